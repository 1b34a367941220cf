use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRACE_HEADER: [&str; 6] = ["iter", "train_loss", "train_err01", "eval_loss", "eval_err01", "wall_ms"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Number of updates applied to the weights being measured.
    pub iteration: usize,
    pub train_loss: f64,
    pub train_error01: f64,
    pub eval_loss: Option<f64>,
    pub eval_error01: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub checkpoints: Vec<Checkpoint>,
    /// FNV-1a digest of the sampled example indices, in order.
    pub index_digest: u64,
    /// Iteration whose loss was non-finite, if training stopped early.
    pub diverged_at: Option<usize>,
}

impl TrainTrace {
    pub fn push(&mut self, checkpoint: Checkpoint) {
        debug_assert!(self
            .checkpoints
            .last()
            .is_none_or(|c| c.iteration < checkpoint.iteration));
        self.checkpoints.push(checkpoint);
    }

    pub fn last(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }

    /// First checkpoint whose evaluation loss (training loss when no
    /// evaluation set was used) is at or below `target`.
    pub fn iterations_to_target(&self, target: f64) -> Option<usize> {
        self.checkpoints
            .iter()
            .find(|c| c.eval_loss.unwrap_or(c.train_loss) <= target)
            .map(|c| c.iteration)
    }

    /// Smallest evaluation (or training) loss seen at any checkpoint.
    pub fn best_loss(&self) -> Option<f64> {
        self.checkpoints
            .iter()
            .map(|c| c.eval_loss.unwrap_or(c.train_loss))
            .fold(None, |best, l| Some(best.map_or(l, |b: f64| b.min(l))))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(TRACE_HEADER).map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.16e}")).unwrap_or_default();
        for c in &self.checkpoints {
            writer
                .write_record([
                    c.iteration.to_string(),
                    format!("{:.16e}", c.train_loss),
                    format!("{:.16e}", c.train_error01),
                    opt(c.eval_loss),
                    opt(c.eval_error01),
                    format!("{:.16e}", c.wall_ms),
                ])
                .map_err(csv_err)?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Parses the checkpoint rows of a trace CSV. The digest and divergence
    /// marker are not part of the CSV and come back as defaults.
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<TrainTrace> {
        let mut reader = csv::Reader::from_reader(input);
        let header = reader.headers().map_err(csv_err)?.clone();
        if header.iter().ne(TRACE_HEADER) {
            return Err(Error::Parse {
                line: 1,
                message: format!("unexpected trace header {:?}", header.iter().collect::<Vec<_>>()),
            });
        }
        let mut trace = TrainTrace::default();
        for record in reader.records() {
            let record = record.map_err(csv_err)?;
            let line = record.position().map_or(0, |p| p.line());
            let bad = |field: &str| Error::Parse {
                line,
                message: format!("invalid {field}"),
            };
            let float = |i: usize| record[i].parse::<f64>().map_err(|_| bad(TRACE_HEADER[i]));
            let opt = |i: usize| match &record[i] {
                "" => Ok(None),
                s => s.parse::<f64>().map(Some).map_err(|_| bad(TRACE_HEADER[i])),
            };
            trace.checkpoints.push(Checkpoint {
                iteration: record[0].parse().map_err(|_| bad("iter"))?,
                train_loss: float(1)?,
                train_error01: float(2)?,
                eval_loss: opt(3)?,
                eval_error01: opt(4)?,
                wall_ms: float(5)?,
            });
        }
        Ok(trace)
    }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Incremental 64-bit FNV-1a.
#[derive(Debug, Clone, Copy)]
pub struct IndexDigest(u64);

impl IndexDigest {
    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub fn push(&mut self, index: usize) {
        for byte in (index as u64).to_le_bytes() {
            self.0 ^= u64::from(byte);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn value(self) -> u64 {
        self.0
    }
}

impl Default for IndexDigest {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TrainTrace {
        TrainTrace {
            checkpoints: vec![
                Checkpoint {
                    iteration: 0,
                    train_loss: std::f64::consts::LN_2,
                    train_error01: 0.5,
                    eval_loss: None,
                    eval_error01: None,
                    wall_ms: 0.0,
                },
                Checkpoint {
                    iteration: 10,
                    train_loss: 0.1 + 0.2,
                    train_error01: 1.0 / 3.0,
                    eval_loss: Some(1e-300),
                    eval_error01: Some(0.25),
                    wall_ms: 12.345678901234567,
                },
            ],
            index_digest: 0,
            diverged_at: None,
        }
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let trace = sample();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("iter,train_loss,train_err01,eval_loss,eval_err01,wall_ms\n"));
        assert_eq!(TrainTrace::read_csv(buf.as_slice()).unwrap(), trace);
    }

    #[test]
    fn rejects_wrong_header() {
        assert!(TrainTrace::read_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn target_search() {
        let trace = sample();
        assert_eq!(trace.iterations_to_target(1.0), Some(0));
        assert_eq!(trace.iterations_to_target(1e-10), Some(10));
        assert_eq!(trace.iterations_to_target(0.0), None);
        assert_eq!(trace.best_loss(), Some(1e-300));
    }

    #[test]
    fn digest_depends_on_order() {
        let mut a = IndexDigest::new();
        let mut b = IndexDigest::new();
        a.push(1);
        a.push(2);
        b.push(2);
        b.push(1);
        assert_ne!(a.value(), b.value());
    }
}

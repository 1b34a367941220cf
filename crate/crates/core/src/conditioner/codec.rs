//! Bit-exact persistence for conditioners.
//!
//! Binary layout (little endian):
//!
//! ```text
//! "SCND" | version: u32 | tag: u8 | n: u64 | k: u64 | payload
//! ```
//!
//! with payload `∅` (identity), `sqrt[n·n] inv_sqrt[n·n]` (full) or
//! `q[n·k] b[k·k] b_inv[k·k] a a_inv degenerate:u8` (low rank), every float
//! stored as its raw IEEE-754 bits. The JSON form carries the same fields.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Conditioner, FullConditioner, LowRankConditioner};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

pub const MAGIC: &[u8; 4] = b"SCND";
const VERSION: u32 = 1;

const TAG_IDENTITY: u8 = 0;
const TAG_FULL: u8 = 1;
const TAG_LOW_RANK: u8 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ConditionerRecord {
    Identity {
        n: usize,
    },
    Full {
        n: usize,
        sqrt: Vec<f64>,
        inv_sqrt: Vec<f64>,
    },
    LowRank {
        n: usize,
        k: usize,
        q: Vec<f64>,
        b: Vec<f64>,
        b_inv: Vec<f64>,
        a: f64,
        a_inv: f64,
        degenerate: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Binary,
    Json,
}

impl Encoding {
    /// `.json` files are text, anything else binary.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => Encoding::Json,
            _ => Encoding::Binary,
        }
    }
}

impl Conditioner {
    pub fn to_record(&self) -> ConditionerRecord {
        match self {
            Conditioner::Identity { n } => ConditionerRecord::Identity { n: *n },
            Conditioner::Full(f) => ConditionerRecord::Full {
                n: f.sqrt.rows(),
                sqrt: f.sqrt.as_slice().to_vec(),
                inv_sqrt: f.inv_sqrt.as_slice().to_vec(),
            },
            Conditioner::LowRank(l) => ConditionerRecord::LowRank {
                n: l.q.rows(),
                k: l.q.cols(),
                q: l.q.as_slice().to_vec(),
                b: l.b.as_slice().to_vec(),
                b_inv: l.b_inv.as_slice().to_vec(),
                a: l.a,
                a_inv: l.a_inv,
                degenerate: l.degenerate,
            },
        }
    }

    /// Rebuilds a conditioner without recomputing any derived field, so a
    /// save/load cycle reproduces every bit.
    pub fn from_record(record: ConditionerRecord) -> Result<Self> {
        match record {
            ConditionerRecord::Identity { n } => Conditioner::identity(n),
            ConditionerRecord::Full { n, sqrt, inv_sqrt } => Ok(Conditioner::Full(FullConditioner {
                sqrt: DenseMatrix::new(n, n, sqrt)?,
                inv_sqrt: DenseMatrix::new(n, n, inv_sqrt)?,
            })),
            ConditionerRecord::LowRank {
                n,
                k,
                q,
                b,
                b_inv,
                a,
                a_inv,
                degenerate,
            } => {
                if k == 0 || k >= n {
                    return Err(Error::Format(format!("low-rank record with k={k}, n={n}")));
                }
                if !(a > 0.0 && a_inv > 0.0) || !a.is_finite() || !a_inv.is_finite() {
                    return Err(Error::Format(format!("invalid residual scale a={a}, a_inv={a_inv}")));
                }
                Ok(Conditioner::LowRank(LowRankConditioner {
                    q: DenseMatrix::new(n, k, q)?,
                    b: DenseMatrix::new(k, k, b)?,
                    b_inv: DenseMatrix::new(k, k, b_inv)?,
                    a,
                    a_inv,
                    degenerate,
                }))
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let put_floats = |out: &mut Vec<u8>, xs: &[f64]| {
            for x in xs {
                out.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        };
        match self {
            Conditioner::Identity { n } => {
                out.push(TAG_IDENTITY);
                out.extend_from_slice(&(*n as u64).to_le_bytes());
                out.extend_from_slice(&0u64.to_le_bytes());
            }
            Conditioner::Full(f) => {
                out.push(TAG_FULL);
                out.extend_from_slice(&(f.sqrt.rows() as u64).to_le_bytes());
                out.extend_from_slice(&0u64.to_le_bytes());
                put_floats(&mut out, f.sqrt.as_slice());
                put_floats(&mut out, f.inv_sqrt.as_slice());
            }
            Conditioner::LowRank(l) => {
                out.push(TAG_LOW_RANK);
                out.extend_from_slice(&(l.q.rows() as u64).to_le_bytes());
                out.extend_from_slice(&(l.q.cols() as u64).to_le_bytes());
                put_floats(&mut out, l.q.as_slice());
                put_floats(&mut out, l.b.as_slice());
                put_floats(&mut out, l.b_inv.as_slice());
                put_floats(&mut out, &[l.a, l.a_inv]);
                out.push(u8::from(l.degenerate));
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("missing conditioner magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported conditioner version {version}")));
        }
        let tag = r.take(1)?[0];
        let n = r.u64()? as usize;
        let k = r.u64()? as usize;
        let record = match tag {
            TAG_IDENTITY => ConditionerRecord::Identity { n },
            TAG_FULL => ConditionerRecord::Full {
                n,
                sqrt: r.floats(n.checked_mul(n).ok_or_else(too_big)?)?,
                inv_sqrt: r.floats(n * n)?,
            },
            TAG_LOW_RANK => ConditionerRecord::LowRank {
                n,
                k,
                q: r.floats(n.checked_mul(k).ok_or_else(too_big)?)?,
                b: r.floats(k.checked_mul(k).ok_or_else(too_big)?)?,
                b_inv: r.floats(k * k)?,
                a: r.floats(1)?[0],
                a_inv: r.floats(1)?[0],
                degenerate: match r.take(1)?[0] {
                    0 => false,
                    1 => true,
                    b => return Err(Error::Format(format!("invalid degenerate flag {b}"))),
                },
            },
            t => return Err(Error::Format(format!("unknown conditioner tag {t}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Self::from_record(record)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_record())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_record(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match Encoding::for_path(path) {
            Encoding::Binary => std::fs::write(path, self.to_bytes())?,
            Encoding::Json => std::fs::write(path, self.to_json()?)?,
        }
        Ok(())
    }

    /// Loads either encoding, detected from the leading magic bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(MAGIC) {
            Self::from_bytes(&bytes)
        } else {
            let text = std::str::from_utf8(&bytes).map_err(|e| Error::Format(e.to_string()))?;
            Self::from_json(text)
        }
    }
}

fn too_big() -> Error {
    Error::Format("conditioner dimensions overflow".into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format("truncated conditioner record".into())),
        }
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn floats(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count.checked_mul(8).ok_or_else(too_big)?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}

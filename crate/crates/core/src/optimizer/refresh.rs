//! Exponential moving average of `x·xᵀ` and periodic rebuilding of the
//! conditioner from it.

use std::collections::VecDeque;
use std::sync::mpsc::{self, Receiver, TryRecvError};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::conditioner::{Conditioner, EigenFloor};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::sketch::{sketched_preprocessing, SketchConfig};

/// How a refreshed conditioner is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RefreshMode {
    /// `A = C^{1/2}` of the moving average.
    Full,
    /// Low-rank conditioner sketched from the last `window` inputs.
    Sketched { k: usize, r: usize, window: usize, seed: u64 },
}

/// `C ← (1 − ν)·C + ν·x·xᵀ`, computed on the upper triangle and mirrored so
/// the result is exactly symmetric.
pub fn ema_update(c: &mut DenseMatrix, x: &[f64], nu: f64) -> Result<()> {
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(Error::InvalidArgument(format!("ema weight must be in (0, 1], got {nu}")));
    }
    let n = c.rows();
    if !c.is_square() || x.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "ema of {}x{} with a vector of length {}",
            c.rows(),
            c.cols(),
            x.len()
        )));
    }
    let keep = 1.0 - nu;
    for i in 0..n {
        let nx = nu * x[i];
        for j in i..n {
            let v = keep * c[(i, j)] + nx * x[j];
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    Ok(())
}

/// Moving-average state plus the recent-input window used by the sketched
/// refresh mode.
#[derive(Debug, Clone)]
pub struct CovarianceTracker {
    ema: DenseMatrix,
    nu: f64,
    recent: VecDeque<Vec<f64>>,
    window: usize,
}

impl CovarianceTracker {
    /// Starts from `C = I`.
    pub fn new(n: usize, nu: f64, mode: &RefreshMode) -> Result<Self> {
        if !(nu > 0.0 && nu <= 1.0) {
            return Err(Error::InvalidArgument(format!("ema weight must be in (0, 1], got {nu}")));
        }
        let window = match mode {
            RefreshMode::Full => 0,
            RefreshMode::Sketched { window, .. } => *window,
        };
        Ok(Self {
            ema: DenseMatrix::identity(n),
            nu,
            recent: VecDeque::with_capacity(window),
            window,
        })
    }

    pub fn observe(&mut self, x: &[f64]) -> Result<()> {
        ema_update(&mut self.ema, x, self.nu)?;
        if self.window > 0 {
            if self.recent.len() == self.window {
                self.recent.pop_front();
            }
            self.recent.push_back(x.to_vec());
        }
        Ok(())
    }

    pub fn ema(&self) -> &DenseMatrix {
        &self.ema
    }

    fn snapshot(&self, mode: &RefreshMode) -> Result<Snapshot> {
        match mode {
            RefreshMode::Full => Ok(Snapshot::Ema(Arc::new(self.ema.clone()))),
            RefreshMode::Sketched { .. } => {
                let columns: Vec<&[f64]> = self.recent.iter().map(Vec::as_slice).collect();
                Ok(Snapshot::Inputs(Arc::new(DenseMatrix::from_columns(&columns)?)))
            }
        }
    }
}

enum Snapshot {
    Ema(Arc<DenseMatrix>),
    Inputs(Arc<DenseMatrix>),
}

fn build(snapshot: &Snapshot, mode: &RefreshMode) -> Result<Conditioner> {
    match (snapshot, mode) {
        (Snapshot::Ema(c), _) => Conditioner::full(c, EigenFloor::default()),
        (Snapshot::Inputs(x), RefreshMode::Sketched { k, r, seed, .. }) => {
            let cfg = SketchConfig::new(*k, *seed).with_width(*r);
            Ok(sketched_preprocessing(x, &cfg)?.0)
        }
        (Snapshot::Inputs(_), RefreshMode::Full) => unreachable!("input snapshots are only taken in sketched mode"),
    }
}

/// Conditioner rebuilt from the tracker when `t` is a positive multiple of
/// `period`.
pub fn maybe_refresh(
    tracker: &CovarianceTracker,
    t: usize,
    period: usize,
    mode: &RefreshMode,
) -> Result<Option<Conditioner>> {
    if period == 0 || t == 0 || !t.is_multiple_of(period) {
        return Ok(None);
    }
    if let RefreshMode::Sketched { r, .. } = mode {
        if tracker.recent.len() < *r {
            return Ok(None);
        }
    }
    build(&tracker.snapshot(mode)?, mode).map(Some)
}

/// Builds conditioners off the training thread.
///
/// The trainer hands over an immutable snapshot; the finished conditioner is
/// picked up with [`AsyncRefresher::poll`] between iterations, so the
/// trainer only ever sees complete conditioners. While a build is in flight
/// new requests are ignored.
#[derive(Default)]
pub struct AsyncRefresher {
    pending: Option<Receiver<Result<Conditioner>>>,
}

impl AsyncRefresher {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts a build if `t` is a refresh point and none is in flight.
    pub fn request(&mut self, tracker: &CovarianceTracker, t: usize, period: usize, mode: &RefreshMode) -> Result<()> {
        if self.pending.is_some() || period == 0 || t == 0 || !t.is_multiple_of(period) {
            return Ok(());
        }
        if let RefreshMode::Sketched { r, .. } = mode {
            if tracker.recent.len() < *r {
                return Ok(());
            }
        }
        let snapshot = tracker.snapshot(mode)?;
        let mode = mode.clone();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let _ = tx.send(build(&snapshot, &mode));
        });
        self.pending = Some(rx);
        Ok(())
    }

    /// A finished conditioner, if one is ready.
    pub fn poll(&mut self) -> Result<Option<Conditioner>> {
        let Some(rx) = &self.pending else {
            return Ok(None);
        };
        match rx.try_recv() {
            Ok(result) => {
                self.pending = None;
                result.map(Some)
            }
            Err(TryRecvError::Empty) => Ok(None),
            Err(TryRecvError::Disconnected) => {
                self.pending = None;
                Ok(None)
            }
        }
    }

    /// Blocks until the in-flight build, if any, finishes.
    pub fn wait(&mut self) -> Result<Option<Conditioner>> {
        match self.pending.take() {
            Some(rx) => match rx.recv() {
                Ok(result) => result.map(Some),
                Err(_) => Ok(None),
            },
            None => Ok(None),
        }
    }
}

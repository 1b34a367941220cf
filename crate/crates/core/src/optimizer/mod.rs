//! Conditioned SGD: `W ← W − η·∇ℓ_y(W·x)·(A⁻¹x)ᵀ` with iterate averaging,
//! mini-batches, optional Nesterov momentum and a moving-average conditioner
//! that can be rebuilt during training.

mod refresh;
mod trace;

pub use refresh::{ema_update, maybe_refresh, AsyncRefresher, CovarianceTracker, RefreshMode};
pub use trace::{Checkpoint, IndexDigest, TrainTrace, TRACE_HEADER};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::conditioner::Conditioner;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, DenseMatrix};
use crate::losses::LossModel;
use crate::rng::{stream, CounterRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum StepSize {
    /// `η = σ / (ρ·sqrt(T))`.
    Lemma1 { sigma: f64 },
    Fixed { eta: f64 },
    /// `η_t = eta0·(1 + gamma·t)^{−power}`.
    Schedule { eta0: f64, gamma: f64, power: f64 },
}

impl Default for StepSize {
    fn default() -> Self {
        StepSize::Lemma1 { sigma: 1.0 }
    }
}

impl StepSize {
    pub fn schedule() -> Self {
        StepSize::Schedule {
            eta0: 0.01,
            gamma: 1e-4,
            power: 0.75,
        }
    }

    /// Step size for iteration `t` (1-based) of a `total`-iteration run.
    pub fn at(&self, t: usize, total: usize, rho: f64) -> f64 {
        match *self {
            StepSize::Lemma1 { sigma } => lemma1_step_size(sigma, rho, total),
            StepSize::Fixed { eta } => eta,
            StepSize::Schedule { eta0, gamma, power } => eta0 * (1.0 + gamma * t as f64).powf(-power),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepSize::Lemma1 { sigma } => sigma > 0.0 && sigma.is_finite(),
            StepSize::Fixed { eta } => eta >= 0.0 && eta.is_finite(),
            StepSize::Schedule { eta0, gamma, power } => {
                eta0 >= 0.0 && eta0.is_finite() && gamma >= 0.0 && gamma.is_finite() && power.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid step size {self:?}")))
        }
    }
}

pub fn lemma1_step_size(sigma: f64, rho: f64, iterations: usize) -> f64 {
    sigma / (rho * (iterations as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub step_size: StepSize,
    pub batch_size: usize,
    /// Momentum coefficient in `[0, 1)`; 0 disables the velocity buffer.
    pub momentum: f64,
    pub nesterov: bool,
    pub seed: u64,
    /// Checkpoint period; 0 records only the first and last iterate.
    pub checkpoint_every: usize,
    /// Rebuild period for the moving-average conditioner; 0 keeps the
    /// initial conditioner for the whole run.
    pub conditioner_refresh_every: usize,
    pub ema_nu: f64,
    pub refresh_mode: RefreshMode,
    pub reset_momentum_on_refresh: bool,
    pub async_refresh: bool,
    /// Training examples used for checkpoint metrics; 0 means all.
    pub metric_examples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            step_size: StepSize::default(),
            batch_size: 1,
            momentum: 0.0,
            nesterov: true,
            seed: 0,
            checkpoint_every: 100,
            conditioner_refresh_every: 0,
            ema_nu: 0.01,
            refresh_mode: RefreshMode::Full,
            reset_momentum_on_refresh: false,
            async_refresh: false,
            metric_examples: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.ema_nu > 0.0 && self.ema_nu <= 1.0) {
            return bad(format!("ema weight must be in (0, 1], got {}", self.ema_nu));
        }
        self.step_size.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Momentum {
    pub coefficient: f64,
    pub nesterov: bool,
}

impl Momentum {
    pub const NONE: Momentum = Momentum {
        coefficient: 0.0,
        nesterov: false,
    };
}

#[derive(Debug, Clone)]
pub struct TrainState {
    /// Current iterate `W_{t+1}`.
    pub w: DenseMatrix,
    /// Mean of `W_1, …, W_t`.
    pub w_avg: DenseMatrix,
    pub velocity: Option<DenseMatrix>,
    /// Number of updates applied.
    pub t: usize,
    pub tracker: Option<CovarianceTracker>,
}

impl TrainState {
    /// `W_1 = 0`.
    pub fn zeros(p: usize, n: usize) -> Self {
        Self {
            w: DenseMatrix::zeros(p, n),
            w_avg: DenseMatrix::zeros(p, n),
            velocity: None,
            t: 0,
            tracker: None,
        }
    }
}

/// One update on `batch`, returning the mean loss at the pre-update iterate.
///
/// The current iterate is folded into the running average first. Gradients
/// and conditioned inputs `A⁻¹x` are all computed at `W_t` before `W` moves;
/// the update is the batch mean of the rank-one terms `g·(A⁻¹x)ᵀ`.
pub fn conditioned_step(
    state: &mut TrainState,
    batch: &[(&[f64], usize)],
    cond: &Conditioner,
    eta: f64,
    loss: &LossModel,
    momentum: Momentum,
) -> Result<f64> {
    let (p, n) = state.w.shape();
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if cond.dim() != n || loss.num_classes() != p {
        return Err(Error::DimensionMismatch(format!(
            "weights are {p}x{n}, conditioner has dimension {}, loss has {} classes",
            cond.dim(),
            loss.num_classes()
        )));
    }
    if let Some((x, _)) = batch.iter().find(|(x, _)| x.len() != n) {
        return Err(Error::DimensionMismatch(format!("input of length {} for {n} features", x.len())));
    }

    state.t += 1;
    let t = state.t;
    let inv_t = 1.0 / t as f64;
    for (avg, &w) in state.w_avg.as_mut_slice().iter_mut().zip(state.w.as_slice()) {
        *avg += (w - *avg) * inv_t;
    }

    let b = batch.len();
    let mut grads = vec![0.0; b * p];
    let mut dirs = vec![0.0; b * n];
    let mut scores = vec![0.0; p];
    let mut total = 0.0;
    for (e, &(x, y)) in batch.iter().enumerate() {
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(state.w.row(j), x);
        }
        let l = loss.value_and_grad_into(&scores, y, &mut grads[e * p..(e + 1) * p])?;
        if !l.is_finite() {
            return Err(Error::Diverged { iteration: t });
        }
        total += l;
        cond.apply_inverse_into(x, &mut dirs[e * n..(e + 1) * n])?;
    }

    let scale = eta / b as f64;
    if momentum.coefficient == 0.0 {
        for e in 0..b {
            let v = &dirs[e * n..(e + 1) * n];
            for (j, &g) in grads[e * p..(e + 1) * p].iter().enumerate() {
                axpy(-(scale * g), v, state.w.row_mut(j));
            }
        }
    } else {
        let mu = momentum.coefficient;
        let mut g_mat = DenseMatrix::zeros(p, n);
        let inv_b = 1.0 / b as f64;
        for e in 0..b {
            let v = &dirs[e * n..(e + 1) * n];
            for (j, &g) in grads[e * p..(e + 1) * p].iter().enumerate() {
                axpy(g * inv_b, v, g_mat.row_mut(j));
            }
        }
        let velocity = state.velocity.get_or_insert_with(|| DenseMatrix::zeros(p, n));
        let w = state.w.as_mut_slice();
        for ((wi, vi), &gi) in w.iter_mut().zip(velocity.as_mut_slice()).zip(g_mat.as_slice()) {
            *vi = mu * *vi + gi;
            let d = if momentum.nesterov { gi + mu * *vi } else { *vi };
            *wi -= eta * d;
        }
    }
    Ok(total / b as f64)
}

/// Mean loss and 0-1 error of `w` on `data`, optionally on an evenly spaced
/// subset of `limit` examples.
pub fn evaluate(w: &DenseMatrix, data: &Dataset, loss: &LossModel, limit: usize) -> Result<(f64, f64)> {
    let m = data.m();
    let count = if limit == 0 { m } else { limit.min(m) };
    let mut scores = vec![0.0; w.rows()];
    let mut total = 0.0;
    let mut wrong = 0usize;
    for s in 0..count {
        let i = s * m / count;
        let x = data.example(i);
        for (j, sc) in scores.iter_mut().enumerate() {
            *sc = dot(w.row(j), x);
        }
        total += loss.value(&scores, data.label(i))?;
        if LossModel::predict(&scores) != data.label(i) {
            wrong += 1;
        }
    }
    Ok((total / count as f64, wrong as f64 / count as f64))
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub state: TrainState,
    pub trace: TrainTrace,
    /// Conditioner in use when training stopped.
    pub conditioner: Conditioner,
    pub refreshes: usize,
    pub elapsed_ms: f64,
}

impl TrainRun {
    /// The averaged iterate `W̄`.
    pub fn averaged(&self) -> &DenseMatrix {
        &self.state.w_avg
    }

    pub fn diverged_at(&self) -> Option<usize> {
        self.trace.diverged_at
    }

    /// Turns a diverged run into an error.
    pub fn into_result(self) -> Result<TrainRun> {
        match self.trace.diverged_at {
            Some(iteration) => Err(Error::Diverged { iteration }),
            None => Ok(self),
        }
    }
}

/// Runs `cfg.iterations` conditioned updates from `W_1 = 0`, sampling
/// example indices uniformly with replacement from the seed's index stream.
///
/// A non-finite loss stops training; the partial trace is returned with
/// `diverged_at` set.
pub fn train(
    data: &Dataset,
    cond: Conditioner,
    cfg: &TrainConfig,
    loss: &LossModel,
    eval: Option<&Dataset>,
) -> Result<TrainRun> {
    cfg.validate()?;
    let (n, m, p) = (data.n(), data.m(), loss.num_classes());
    if data.num_classes() > p {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, loss only {p}",
            data.num_classes()
        )));
    }
    if cond.dim() != n {
        return Err(Error::DimensionMismatch(format!(
            "conditioner dimension {} for {n} features",
            cond.dim()
        )));
    }
    if let Some(e) = eval {
        if e.n() != n || e.num_classes() > p {
            return Err(Error::DimensionMismatch("evaluation set does not match training data".into()));
        }
    }

    let start = Instant::now();
    let mut state = TrainState::zeros(p, n);
    if cfg.conditioner_refresh_every > 0 {
        state.tracker = Some(CovarianceTracker::new(n, cfg.ema_nu, &cfg.refresh_mode)?);
    }
    let momentum = Momentum {
        coefficient: cfg.momentum,
        nesterov: cfg.nesterov,
    };
    let rho = loss.lipschitz_constant();
    let mut cond = cond;
    let mut refresher = AsyncRefresher::new();
    let mut refreshes = 0;
    let mut sampler = CounterRng::new(cfg.seed, stream::SAMPLE_INDEX);
    let mut digest = IndexDigest::new();
    let mut trace = TrainTrace::default();
    let mut indices = vec![0usize; cfg.batch_size];

    let checkpoint = |w: &DenseMatrix, iteration: usize| -> Result<Checkpoint> {
        let (train_loss, train_error01) = evaluate(w, data, loss, cfg.metric_examples)?;
        let (eval_loss, eval_error01) = match eval {
            Some(e) => {
                let (l, err) = evaluate(w, e, loss, 0)?;
                (Some(l), Some(err))
            }
            None => (None, None),
        };
        Ok(Checkpoint {
            iteration,
            train_loss,
            train_error01,
            eval_loss,
            eval_error01,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    };
    trace.push(checkpoint(&state.w, 0)?);

    for t in 1..=cfg.iterations {
        if cfg.async_refresh {
            if let Some(next) = refresher.poll()? {
                cond = next;
                refreshes += 1;
                if cfg.reset_momentum_on_refresh {
                    state.velocity = None;
                }
            }
        }
        for idx in indices.iter_mut() {
            *idx = sampler.below(m as u64) as usize;
            digest.push(*idx);
        }
        let batch: Vec<(&[f64], usize)> = indices.iter().map(|&i| (data.example(i), data.label(i))).collect();
        if let Some(tracker) = state.tracker.as_mut() {
            for (x, _) in &batch {
                tracker.observe(x)?;
            }
        }
        let eta = cfg.step_size.at(t, cfg.iterations, rho);
        match conditioned_step(&mut state, &batch, &cond, eta, loss, momentum) {
            Ok(_) => {}
            Err(Error::Diverged { iteration }) => {
                trace.diverged_at = Some(iteration);
                break;
            }
            Err(e) => return Err(e),
        }

        if let Some(tracker) = &state.tracker {
            let period = cfg.conditioner_refresh_every;
            if cfg.async_refresh {
                refresher.request(tracker, t, period, &cfg.refresh_mode)?;
            } else if let Some(next) = maybe_refresh(tracker, t, period, &cfg.refresh_mode)? {
                cond = next;
                refreshes += 1;
                if cfg.reset_momentum_on_refresh {
                    state.velocity = None;
                }
            }
        }

        let due = cfg.checkpoint_every > 0 && t % cfg.checkpoint_every == 0;
        if due || t == cfg.iterations {
            trace.push(checkpoint(&state.w, t)?);
        }
    }

    trace.index_digest = digest.value();
    Ok(TrainRun {
        state,
        trace,
        conditioner: cond,
        refreshes,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Full-batch gradient descent `W ← W − η·∇L(W)·P` from `W = 0`, used as a
/// reference minimizer. `P` is an `n x n` preconditioner (for instance
/// `C⁻¹`).
pub fn full_batch_minimize(
    data: &Dataset,
    loss: &LossModel,
    precond: &DenseMatrix,
    epochs: usize,
    eta: f64,
) -> Result<DenseMatrix> {
    let (n, p) = (data.n(), loss.num_classes());
    if precond.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "preconditioner is {}x{}, expected {n}x{n}",
            precond.rows(),
            precond.cols()
        )));
    }
    let mut w = DenseMatrix::zeros(p, n);
    for _ in 0..epochs {
        let g = full_gradient(&w, data, loss)?;
        let step = g.matmul(precond)?;
        axpy(-eta, step.as_slice(), w.as_mut_slice());
    }
    Ok(w)
}

/// `∇L(W) = (1/m)·Σ_i ∇ℓ_{y_i}(W·x_i)·x_iᵀ`.
pub fn full_gradient(w: &DenseMatrix, data: &Dataset, loss: &LossModel) -> Result<DenseMatrix> {
    let (p, n) = w.shape();
    let mut g = DenseMatrix::zeros(p, n);
    let mut scores = vec![0.0; p];
    let mut gi = vec![0.0; p];
    let inv_m = 1.0 / data.m() as f64;
    for i in 0..data.m() {
        let x = data.example(i);
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(w.row(j), x);
        }
        loss.value_and_grad_into(&scores, data.label(i), &mut gi)?;
        for (j, &gj) in gi.iter().enumerate() {
            axpy(gj * inv_m, x, g.row_mut(j));
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioner::EigenFloor;

    fn blobs(n: usize, m: usize, seed: u64) -> Dataset {
        let mut rng = CounterRng::new(seed, 1);
        let mut labels = Vec::with_capacity(m);
        let x = DenseMatrix::from_fn(m, n, |i, _| {
            let y = i % 2;
            let centre = if y == 0 { 2.0 } else { -2.0 };
            centre + rng.standard_normal()
        })
        .unwrap()
        .transpose();
        for i in 0..m {
            labels.push(i % 2);
        }
        Dataset::new(x, labels).unwrap()
    }

    fn single_step(cond: &Conditioner) -> DenseMatrix {
        let mut state = TrainState::zeros(2, 2);
        let loss = LossModel::multiclass_logistic(2).unwrap();
        conditioned_step(&mut state, &[(&[1.0, 0.0], 0)], cond, 1.0, &loss, Momentum::NONE).unwrap();
        state.w
    }

    #[test]
    fn single_step_examples() {
        let w = single_step(&Conditioner::identity(2).unwrap());
        assert_eq!(w, DenseMatrix::from_rows(&[[0.5, 0.0], [-0.5, 0.0]]).unwrap());
        let c = DenseMatrix::from_diag(&[16.0, 1.0]).unwrap();
        let w = single_step(&Conditioner::full(&c, EigenFloor::default()).unwrap());
        assert!(w.sub(&DenseMatrix::from_rows(&[[0.125, 0.0], [-0.125, 0.0]]).unwrap()).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn zero_step_only_advances_counter() {
        let loss = LossModel::multiclass_logistic(3).unwrap();
        let mut state = TrainState::zeros(3, 2);
        state.w = DenseMatrix::from_rows(&[[1.0, 2.0], [0.0, -1.0], [3.0, 0.5]]).unwrap();
        let before = state.w.clone();
        conditioned_step(&mut state, &[(&[1.0, 1.0], 2)], &Conditioner::identity(2).unwrap(), 0.0, &loss, Momentum::NONE)
            .unwrap();
        assert_eq!(state.w, before);
        assert_eq!(state.t, 1);
        assert_eq!(state.w_avg, before);
    }

    #[test]
    fn step_rejects_bad_input() {
        let loss = LossModel::multiclass_logistic(2).unwrap();
        let mut state = TrainState::zeros(2, 2);
        let id = Conditioner::identity(2).unwrap();
        assert!(conditioned_step(&mut state, &[], &id, 1.0, &loss, Momentum::NONE).is_err());
        assert!(conditioned_step(&mut state, &[(&[1.0], 0)], &id, 1.0, &loss, Momentum::NONE).is_err());
        let id3 = Conditioner::identity(3).unwrap();
        assert!(conditioned_step(&mut state, &[(&[1.0, 0.0], 0)], &id3, 1.0, &loss, Momentum::NONE).is_err());
    }

    #[test]
    fn batch_update_is_mean_of_rank_one_terms() {
        let loss = LossModel::multiclass_logistic(3).unwrap();
        let c = DenseMatrix::from_rows(&[[2.0, 0.5], [0.5, 1.0]]).unwrap();
        let cond = Conditioner::full(&c, EigenFloor::default()).unwrap();
        let mut state = TrainState::zeros(3, 2);
        state.w = DenseMatrix::from_rows(&[[0.1, -0.2], [0.3, 0.0], [-0.1, 0.4]]).unwrap();
        let w0 = state.w.clone();
        let batch: [(&[f64], usize); 2] = [(&[1.0, 2.0], 0), (&[-1.0, 0.5], 2)];
        conditioned_step(&mut state, &batch, &cond, 0.3, &loss, Momentum::NONE).unwrap();
        let mut expected = w0.clone();
        for (x, y) in batch {
            let g = loss.grad(&w0.matvec(x).unwrap(), y).unwrap();
            let v = cond.apply_inverse(x).unwrap();
            for j in 0..3 {
                for l in 0..2 {
                    expected[(j, l)] -= 0.3 * g[j] * v[l] / 2.0;
                }
            }
        }
        assert!(state.w.sub(&expected).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn nesterov_momentum_matches_hand_recursion() {
        let loss = LossModel::multiclass_logistic(2).unwrap();
        let id = Conditioner::identity(2).unwrap();
        let mom = Momentum {
            coefficient: 0.9,
            nesterov: true,
        };
        let mut state = TrainState::zeros(2, 2);
        let xs: [&[f64]; 3] = [&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]];
        let mut w = [[0.0f64; 2]; 2];
        let mut vel = [[0.0f64; 2]; 2];
        for x in xs {
            let scores = [w[0][0] * x[0] + w[0][1] * x[1], w[1][0] * x[0] + w[1][1] * x[1]];
            let g = loss.grad(&scores, 1).unwrap();
            for j in 0..2 {
                for l in 0..2 {
                    let gij = g[j] * x[l];
                    vel[j][l] = 0.9 * vel[j][l] + gij;
                    w[j][l] -= 0.5 * (gij + 0.9 * vel[j][l]);
                }
            }
            conditioned_step(&mut state, &[(x, 1)], &id, 0.5, &loss, mom).unwrap();
        }
        for j in 0..2 {
            for l in 0..2 {
                assert!((state.w[(j, l)] - w[j][l]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn averaging_matches_recorded_trajectory() {
        let data = blobs(4, 50, 3);
        let loss = LossModel::multiclass_logistic(2).unwrap();
        let id = Conditioner::identity(4).unwrap();
        let mut state = TrainState::zeros(2, 4);
        let mut history = Vec::new();
        let mut rng = CounterRng::new(1, 2);
        for _ in 0..300 {
            history.push(state.w.clone());
            let i = rng.below(50) as usize;
            conditioned_step(&mut state, &[(data.example(i), data.label(i))], &id, 0.1, &loss, Momentum::NONE).unwrap();
        }
        let mut mean = DenseMatrix::zeros(2, 4);
        for w in &history {
            mean = mean.add(w).unwrap();
        }
        let mean = mean.scaled(1.0 / history.len() as f64);
        assert!(state.w_avg.sub(&mean).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn single_iteration_average_is_zero() {
        let data = blobs(3, 10, 1);
        let loss = LossModel::multiclass_logistic(2).unwrap();
        let cfg = TrainConfig {
            iterations: 1,
            ..TrainConfig::default()
        };
        let run = train(&data, Conditioner::identity(3).unwrap(), &cfg, &loss, None).unwrap();
        assert_eq!(run.averaged(), &DenseMatrix::zeros(2, 3));
        assert_ne!(run.state.w, DenseMatrix::zeros(2, 3));
    }

    #[test]
    fn training_is_deterministic() {
        let data = blobs(5, 100, 2);
        let loss = LossModel::multiclass_logistic(2).unwrap();
        let cfg = TrainConfig {
            iterations: 500,
            seed: 9,
            batch_size: 4,
            momentum: 0.5,
            checkpoint_every: 50,
            ..TrainConfig::default()
        };
        let a = train(&data, Conditioner::identity(5).unwrap(), &cfg, &loss, None).unwrap();
        let b = train(&data, Conditioner::identity(5).unwrap(), &cfg, &loss, None).unwrap();
        let strip = |t: &TrainTrace| {
            t.checkpoints
                .iter()
                .map(|c| (c.iteration, c.train_loss.to_bits(), c.train_error01.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a.trace), strip(&b.trace));
        assert_eq!(a.trace.index_digest, b.trace.index_digest);
        assert_eq!(a.state.w, b.state.w);
        let iters: Vec<usize> = a.trace.checkpoints.iter().map(|c| c.iteration).collect();
        assert_eq!(iters, (0..=10).map(|i| i * 50).collect::<Vec<_>>());
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = blobs(6, 400, 5);
        let loss = LossModel::multiclass_logistic(2).unwrap();
        let cfg = TrainConfig {
            iterations: 2000,
            step_size: StepSize::Lemma1 { sigma: 5.0 },
            ..TrainConfig::default()
        };
        let run = train(&data, Conditioner::identity(6).unwrap(), &cfg, &loss, None).unwrap();
        let (_, err) = evaluate(run.averaged(), &data, &loss, 0).unwrap();
        assert!(run.trace.last().unwrap().train_error01 < 0.05);
        assert!(err < 0.05);
    }

    #[test]
    fn divergence_is_reported_with_partial_trace() {
        let blobs = blobs(3, 20, 4);
        let mut rng = CounterRng::new(4, 4);
        let labels = (0..20).map(|_| rng.below(2) as usize).collect();
        let data = Dataset::new(blobs.features().clone(), labels).unwrap();
        let loss = LossModel::multiclass_logistic(2).unwrap();
        let cfg = TrainConfig {
            iterations: 100,
            step_size: StepSize::Fixed { eta: 1e308 },
            checkpoint_every: 1,
            ..TrainConfig::default()
        };
        let run = train(&data, Conditioner::identity(3).unwrap(), &cfg, &loss, None).unwrap();
        let at = run.diverged_at().expect("run should diverge");
        assert!(at > 1 && at < 100);
        assert_eq!(run.trace.last().unwrap().iteration, at - 1);
        assert!(matches!(run.into_result(), Err(Error::Diverged { .. })));
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig {
                iterations: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                ema_nu: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                step_size: StepSize::Lemma1 { sigma: 0.0 },
                ..TrainConfig::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn step_sizes() {
        assert_eq!(StepSize::Lemma1 { sigma: 2.0 }.at(5, 100, 2.0), 0.1);
        let s = StepSize::schedule();
        assert_eq!(s.at(0, 10, 1.0), 0.01);
        assert!((s.at(10_000, 10, 1.0) - 0.01 * 2f64.powf(-0.75)).abs() < 1e-15);
    }

    #[test]
    fn refresh_swaps_conditioner_during_training() {
        let data = blobs(3, 60, 6);
        let loss = LossModel::multiclass_logistic(2).unwrap();
        for async_refresh in [false, true] {
            let cfg = TrainConfig {
                iterations: 200,
                conditioner_refresh_every: 50,
                ema_nu: 0.05,
                async_refresh,
                step_size: StepSize::Fixed { eta: 0.05 },
                ..TrainConfig::default()
            };
            let run = train(&data, Conditioner::identity(3).unwrap(), &cfg, &loss, None).unwrap();
            if async_refresh {
                // Builds finish whenever the worker gets to them.
                assert!(run.refreshes <= 4);
            } else {
                assert_eq!(run.conditioner.kind(), "full");
                assert_eq!(run.refreshes, 4);
            }
            assert!(run.diverged_at().is_none());
        }
    }

    #[test]
    fn preconditioned_reference_reaches_stationarity() {
        let data = blobs(4, 200, 8);
        let loss = LossModel::multiclass_logistic(2).unwrap();
        // Overlapping blobs keep the minimizer finite.
        let mut rng = CounterRng::new(2, 3);
        let labels: Vec<usize> = (0..200).map(|i| if rng.uniform() < 0.2 { 1 - i % 2 } else { i % 2 }).collect();
        let data = Dataset::new(data.features().clone(), labels).unwrap();
        let c = crate::linalg::second_moment(data.features()).unwrap();
        let c_inv = Conditioner::full(&c, EigenFloor::default()).unwrap().explicit_inverse();
        let c_inv = c_inv.matmul(&c_inv).unwrap();
        let w = full_batch_minimize(&data, &loss, &c_inv, 500, 1.0).unwrap();
        let g = full_gradient(&w, &data, &loss).unwrap();
        assert!(g.frobenius_norm() < 1e-8, "{}", g.frobenius_norm());
    }
}

//! Two-layer ReLU network `W₂·relu(W₁x + b₁) + b₂` whose first layer can be
//! trained with an adaptive conditioner: the first-layer gradient has the
//! form `δ·xᵀ`, and the conditioned update replaces it by `δ·(A⁻¹x)ᵀ` with
//! `A` rebuilt from a moving average of the layer inputs.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use crate::conditioner::Conditioner;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, DenseMatrix};
use crate::losses::LossModel;
use crate::optimizer::{
    maybe_refresh, AsyncRefresher, Checkpoint, CovarianceTracker, IndexDigest, Momentum, TrainConfig, TrainTrace,
};
use crate::rng::{stream, CounterRng};

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamBlock {
    W1,
    B1,
    W2,
    B2,
}

impl ParamBlock {
    pub const ALL: [ParamBlock; 4] = [ParamBlock::W1, ParamBlock::B1, ParamBlock::W2, ParamBlock::B2];
}

#[derive(Debug, Clone)]
pub struct TinyNet {
    w1: DenseMatrix,
    b1: Vec<f64>,
    w2: DenseMatrix,
    b2: Vec<f64>,
    /// Changes on every parameter mutation; caches remember the value they
    /// were computed with.
    generation: u64,
}

impl PartialEq for TinyNet {
    fn eq(&self, other: &Self) -> bool {
        self.w1 == other.w1 && self.b1 == other.b1 && self.w2 == other.w2 && self.b2 == other.b2
    }
}

/// Activations saved by [`TinyNet::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub x: Vec<f64>,
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub scores: Vec<f64>,
    generation: u64,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// First-layer error signal; the `W₁` gradient is `delta·xᵀ`.
    pub delta: Vec<f64>,
    pub x: Vec<f64>,
    pub g_b1: Vec<f64>,
    pub g_w2: DenseMatrix,
    pub g_b2: Vec<f64>,
    pub loss: f64,
}

impl Gradients {
    pub fn g_w1(&self) -> DenseMatrix {
        let (h, n) = (self.delta.len(), self.x.len());
        let mut g = DenseMatrix::zeros(h, n);
        for (i, &d) in self.delta.iter().enumerate() {
            axpy(d, &self.x, g.row_mut(i));
        }
        g
    }
}

impl TinyNet {
    pub fn zeros(n: usize, h: usize, p: usize) -> Self {
        Self {
            w1: DenseMatrix::zeros(h, n),
            b1: vec![0.0; h],
            w2: DenseMatrix::zeros(p, h),
            b2: vec![0.0; p],
            generation: next_generation(),
        }
    }

    /// Weights uniform on `[−sqrt(3/fan_in), sqrt(3/fan_in)]`, biases zero.
    pub fn xavier(n: usize, h: usize, p: usize, seed: u64) -> Result<Self> {
        let mut rng = CounterRng::new(seed, stream::INIT);
        let a1 = (3.0 / n as f64).sqrt();
        let a2 = (3.0 / h as f64).sqrt();
        let w1 = DenseMatrix::from_fn(h, n, |_, _| rng.uniform_in(-a1, a1))?;
        let w2 = DenseMatrix::from_fn(p, h, |_, _| rng.uniform_in(-a2, a2))?;
        Self::from_parts(w1, vec![0.0; h], w2, vec![0.0; p])
    }

    pub fn from_parts(w1: DenseMatrix, b1: Vec<f64>, w2: DenseMatrix, b2: Vec<f64>) -> Result<Self> {
        let h = w1.rows();
        if b1.len() != h || w2.cols() != h || b2.len() != w2.rows() {
            return Err(Error::DimensionMismatch(format!(
                "inconsistent layer shapes: w1 {}x{}, b1 {}, w2 {}x{}, b2 {}",
                w1.rows(),
                w1.cols(),
                b1.len(),
                w2.rows(),
                w2.cols(),
                b2.len()
            )));
        }
        if b1.iter().chain(&b2).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite bias".into()));
        }
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            generation: next_generation(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.w2.rows()
    }

    pub fn w1(&self) -> &DenseMatrix {
        &self.w1
    }

    pub fn b1(&self) -> &[f64] {
        &self.b1
    }

    pub fn w2(&self) -> &DenseMatrix {
        &self.w2
    }

    pub fn b2(&self) -> &[f64] {
        &self.b2
    }

    /// Mutable access to one parameter block. Invalidates existing caches.
    pub fn param_mut(&mut self, block: ParamBlock) -> &mut [f64] {
        self.generation = next_generation();
        match block {
            ParamBlock::W1 => self.w1.as_mut_slice(),
            ParamBlock::B1 => &mut self.b1,
            ParamBlock::W2 => self.w2.as_mut_slice(),
            ParamBlock::B2 => &mut self.b2,
        }
    }

    pub fn param(&self, block: ParamBlock) -> &[f64] {
        match block {
            ParamBlock::W1 => self.w1.as_slice(),
            ParamBlock::B1 => &self.b1,
            ParamBlock::W2 => self.w2.as_slice(),
            ParamBlock::B2 => &self.b2,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "input of length {} for a network with {} inputs",
                x.len(),
                self.input_dim()
            )));
        }
        let pre: Vec<f64> = (0..self.hidden_dim())
            .map(|i| dot(self.w1.row(i), x) + self.b1[i])
            .collect();
        let hidden: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
        let scores: Vec<f64> = (0..self.num_classes())
            .map(|j| dot(self.w2.row(j), &hidden) + self.b2[j])
            .collect();
        let cache = ForwardCache {
            x: x.to_vec(),
            pre,
            hidden,
            scores: scores.clone(),
            generation: self.generation,
        };
        Ok((scores, cache))
    }

    pub fn backward(&self, cache: &ForwardCache, label: usize, loss: &LossModel) -> Result<Gradients> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache);
        }
        let p = self.num_classes();
        let h = self.hidden_dim();
        let mut g_b2 = vec![0.0; p];
        let value = loss.value_and_grad_into(&cache.scores, label, &mut g_b2)?;
        let mut g_w2 = DenseMatrix::zeros(p, h);
        for (j, &g) in g_b2.iter().enumerate() {
            axpy(g, &cache.hidden, g_w2.row_mut(j));
        }
        let mut delta = vec![0.0; h];
        for (j, &g) in g_b2.iter().enumerate() {
            axpy(g, self.w2.row(j), &mut delta);
        }
        for (d, &z) in delta.iter_mut().zip(&cache.pre) {
            if z <= 0.0 {
                *d = 0.0;
            }
        }
        Ok(Gradients {
            g_b1: delta.clone(),
            delta,
            x: cache.x.clone(),
            g_w2,
            g_b2,
            loss: value,
        })
    }

    pub fn loss(&self, x: &[f64], label: usize, loss: &LossModel) -> Result<f64> {
        let (scores, _) = self.forward(x)?;
        loss.value(&scores, label)
    }
}

/// Velocity buffers, one per parameter block.
#[derive(Debug, Clone, Default)]
pub struct NetVelocity {
    blocks: Option<[Vec<f64>; 4]>,
}

impl NetVelocity {
    pub fn reset(&mut self) {
        self.blocks = None;
    }
}

/// One mini-batch update. The first layer moves by
/// `−η·mean(δ·(A⁻¹x)ᵀ)`; every other block takes a plain (momentum) SGD
/// step. Returns the mean batch loss before the update.
#[allow(clippy::too_many_arguments)]
pub fn net_step(
    net: &mut TinyNet,
    velocity: &mut NetVelocity,
    batch: &[(&[f64], usize)],
    cond: &Conditioner,
    eta: f64,
    loss: &LossModel,
    momentum: Momentum,
    iteration: usize,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if cond.dim() != net.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "conditioner dimension {} for {} inputs",
            cond.dim(),
            net.input_dim()
        )));
    }
    let (h, n, p) = (net.hidden_dim(), net.input_dim(), net.num_classes());
    let b = batch.len();
    let mut grads = Vec::with_capacity(b);
    let mut dirs = vec![0.0; b * n];
    let mut total = 0.0;
    for (e, &(x, y)) in batch.iter().enumerate() {
        let (_, cache) = net.forward(x)?;
        let g = net.backward(&cache, y, loss)?;
        if !g.loss.is_finite() {
            return Err(Error::Diverged { iteration });
        }
        total += g.loss;
        cond.apply_inverse_into(x, &mut dirs[e * n..(e + 1) * n])?;
        grads.push(g);
    }

    let scale = eta / b as f64;
    if momentum.coefficient == 0.0 {
        for (e, g) in grads.iter().enumerate() {
            let v = &dirs[e * n..(e + 1) * n];
            for (i, &d) in g.delta.iter().enumerate() {
                axpy(-(scale * d), v, net.w1.row_mut(i));
            }
            axpy(-scale, &g.g_b1, &mut net.b1);
            axpy(-scale, g.g_w2.as_slice(), net.w2.as_mut_slice());
            axpy(-scale, &g.g_b2, &mut net.b2);
        }
    } else {
        let inv_b = 1.0 / b as f64;
        let mut mean = [vec![0.0; h * n], vec![0.0; h], vec![0.0; p * h], vec![0.0; p]];
        for (e, g) in grads.iter().enumerate() {
            let v = &dirs[e * n..(e + 1) * n];
            for (i, &d) in g.delta.iter().enumerate() {
                axpy(d * inv_b, v, &mut mean[0][i * n..(i + 1) * n]);
            }
            axpy(inv_b, &g.g_b1, &mut mean[1]);
            axpy(inv_b, g.g_w2.as_slice(), &mut mean[2]);
            axpy(inv_b, &g.g_b2, &mut mean[3]);
        }
        let mu = momentum.coefficient;
        let vel = velocity
            .blocks
            .get_or_insert_with(|| [vec![0.0; h * n], vec![0.0; h], vec![0.0; p * h], vec![0.0; p]]);
        for (k, block) in ParamBlock::ALL.iter().enumerate() {
            let params = match block {
                ParamBlock::W1 => net.w1.as_mut_slice(),
                ParamBlock::B1 => &mut net.b1,
                ParamBlock::W2 => net.w2.as_mut_slice(),
                ParamBlock::B2 => &mut net.b2,
            };
            for ((w, v), &g) in params.iter_mut().zip(vel[k].iter_mut()).zip(&mean[k]) {
                *v = mu * *v + g;
                let d = if momentum.nesterov { g + mu * *v } else { *v };
                *w -= eta * d;
            }
        }
    }
    net.generation = next_generation();
    Ok(total / b as f64)
}

/// Mean loss and 0-1 error of the network on `data` (evenly spaced subset of
/// `limit` examples when `limit > 0`).
pub fn evaluate_net(net: &TinyNet, data: &Dataset, loss: &LossModel, limit: usize) -> Result<(f64, f64)> {
    let m = data.m();
    let count = if limit == 0 { m } else { limit.min(m) };
    let mut total = 0.0;
    let mut wrong = 0usize;
    for s in 0..count {
        let i = s * m / count;
        let (scores, _) = net.forward(data.example(i))?;
        total += loss.value(&scores, data.label(i))?;
        if LossModel::predict(&scores) != data.label(i) {
            wrong += 1;
        }
    }
    Ok((total / count as f64, wrong as f64 / count as f64))
}

#[derive(Debug, Clone)]
pub struct NetRun {
    pub net: TinyNet,
    pub trace: TrainTrace,
    pub conditioner: Conditioner,
    pub refreshes: usize,
}

/// Trains `net` with the first layer conditioned by a moving-average
/// conditioner rebuilt every `cfg.conditioner_refresh_every` iterations
/// (starting from the identity). With the refresh period at 0 the
/// conditioner stays the identity and the run is plain SGD.
///
/// Example indices come from the same stream as the linear trainer, so equal
/// seeds give equal example sequences.
pub fn adaptive_train(
    data: &Dataset,
    net: TinyNet,
    cfg: &TrainConfig,
    loss: &LossModel,
    eval: Option<&Dataset>,
) -> Result<NetRun> {
    cfg.validate()?;
    let (n, m) = (data.n(), data.m());
    if net.input_dim() != n || net.num_classes() != loss.num_classes() || data.num_classes() > loss.num_classes() {
        return Err(Error::DimensionMismatch("network does not match the dataset".into()));
    }
    let start = Instant::now();
    let mut net = net;
    let mut cond = Conditioner::identity(n)?;
    let mut tracker = match cfg.conditioner_refresh_every {
        0 => None,
        _ => Some(CovarianceTracker::new(n, cfg.ema_nu, &cfg.refresh_mode)?),
    };
    let mut refresher = AsyncRefresher::new();
    let mut refreshes = 0;
    let mut velocity = NetVelocity::default();
    let momentum = Momentum {
        coefficient: cfg.momentum,
        nesterov: cfg.nesterov,
    };
    let rho = loss.lipschitz_constant();
    let mut sampler = CounterRng::new(cfg.seed, stream::SAMPLE_INDEX);
    let mut trace = TrainTrace::default();
    let mut digest = IndexDigest::new();
    let mut indices = vec![0usize; cfg.batch_size];

    let checkpoint = |net: &TinyNet, iteration: usize| -> Result<Checkpoint> {
        let (train_loss, train_error01) = evaluate_net(net, data, loss, cfg.metric_examples)?;
        let (eval_loss, eval_error01) = match eval {
            Some(e) => {
                let (l, err) = evaluate_net(net, e, loss, 0)?;
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
    trace.push(checkpoint(&net, 0)?);

    for t in 1..=cfg.iterations {
        if cfg.async_refresh {
            if let Some(next) = refresher.poll()? {
                cond = next;
                refreshes += 1;
                if cfg.reset_momentum_on_refresh {
                    velocity.reset();
                }
            }
        }
        for idx in indices.iter_mut() {
            *idx = sampler.below(m as u64) as usize;
            digest.push(*idx);
        }
        let batch: Vec<(&[f64], usize)> = indices.iter().map(|&i| (data.example(i), data.label(i))).collect();
        if let Some(tracker) = tracker.as_mut() {
            for (x, _) in &batch {
                tracker.observe(x)?;
            }
        }
        let eta = cfg.step_size.at(t, cfg.iterations, rho);
        match net_step(&mut net, &mut velocity, &batch, &cond, eta, loss, momentum, t) {
            Ok(_) => {}
            Err(Error::Diverged { iteration }) => {
                trace.diverged_at = Some(iteration);
                break;
            }
            Err(e) => return Err(e),
        }
        if let Some(tracker) = &tracker {
            let period = cfg.conditioner_refresh_every;
            if cfg.async_refresh {
                refresher.request(tracker, t, period, &cfg.refresh_mode)?;
            } else if let Some(next) = maybe_refresh(tracker, t, period, &cfg.refresh_mode)? {
                cond = next;
                refreshes += 1;
                if cfg.reset_momentum_on_refresh {
                    velocity.reset();
                }
            }
        }
        let due = cfg.checkpoint_every > 0 && t % cfg.checkpoint_every == 0;
        if due || t == cfg.iterations {
            trace.push(checkpoint(&net, t)?);
        }
    }
    trace.index_digest = digest.value();
    Ok(NetRun {
        net,
        trace,
        conditioner: cond,
        refreshes,
    })
}

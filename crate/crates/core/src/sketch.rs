//! Randomized preprocessing that builds a low-rank conditioner directly from
//! the data matrix `X` (`n x m`, one example per column) without forming the
//! `n x n` second moment.
//!
//! Pipeline: `Z = XΩ` → `P = orth(Z)` → `Y = PᵀX` → top-`k` eigenvectors
//! `U'` of `YYᵀ` → `Q = PU'` → `C̃ = (QᵀX)(QᵀX)ᵀ/m` → `B = C̃^{1/2}` and the
//! residual scale `a`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::conditioner::{Conditioner, DEFAULT_RESIDUAL_EPS};
use crate::error::{Error, Result};
use crate::linalg::{orthonormal_basis, sym_eig, DenseMatrix};
use crate::rng::{stream, CounterRng};

/// Seed offset used for the single retry after a rank-deficient sketch.
pub const RETRY_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

/// Columns of `XΩ` whose residual falls below this fraction of the largest
/// column norm are treated as dependent.
const SKETCH_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SketchDistribution {
    /// i.i.d. `N(0, 1/r)`.
    #[default]
    Gaussian,
    /// i.i.d. `±1/sqrt(r)`.
    Rademacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchConfig {
    pub k: usize,
    /// Sketch width; `2k` by default.
    pub r: usize,
    pub seed: u64,
    #[serde(default)]
    pub distribution: SketchDistribution,
}

impl SketchConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            r: 2 * k,
            seed,
            distribution: SketchDistribution::Gaussian,
        }
    }

    pub fn with_width(mut self, r: usize) -> Self {
        self.r = r;
        self
    }

    pub fn with_distribution(mut self, distribution: SketchDistribution) -> Self {
        self.distribution = distribution;
        self
    }

    /// Checks `1 <= k <= r <= m` and `k < n`; returns the effective width,
    /// which is capped at `n` since `XΩ` cannot have more than `n`
    /// independent columns.
    pub fn validate(&self, n: usize, m: usize) -> Result<usize> {
        if self.k == 0 || self.k >= n {
            return Err(Error::InvalidArgument(format!(
                "sketch rank must satisfy 1 <= k < n, got k={} n={n}",
                self.k
            )));
        }
        if self.r < self.k || self.r > m {
            return Err(Error::InvalidArgument(format!(
                "sketch width must satisfy k <= r <= m, got k={} r={} m={m}",
                self.k, self.r
            )));
        }
        Ok(self.r.min(n))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub sketch_ms: f64,
    pub orthonormalize_ms: f64,
    pub project_ms: f64,
    pub eig_ms: f64,
    pub ctilde_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SketchReport {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    /// Effective sketch width.
    pub r: usize,
    /// Seed that produced the accepted sketch.
    pub seed: u64,
    pub retried: bool,
    #[serde(skip)]
    pub q: DenseMatrix,
    pub trace_c: f64,
    pub trace_ctilde: f64,
    /// `‖QQᵀX̄ − X̄‖_F` with `X̄ = X/sqrt(m)`.
    pub projection_residual: f64,
    pub degenerate_residual: bool,
    pub timings: StageTimings,
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Sketch matrix `Ω` (`m x r`), element `(i, j)` drawn at stream position
/// `i·r + j`.
fn sketch_matrix(m: usize, r: usize, seed: u64, distribution: SketchDistribution) -> DenseMatrix {
    let mut rng = CounterRng::new(seed, stream::SKETCH);
    let scale = 1.0 / (r as f64).sqrt();
    let mut omega = DenseMatrix::zeros(m, r);
    for w in omega.as_mut_slice() {
        *w = scale
            * match distribution {
                SketchDistribution::Gaussian => rng.standard_normal(),
                SketchDistribution::Rademacher => rng.rademacher(),
            };
    }
    omega
}

fn sketch_with_seed(x: &DenseMatrix, r: usize, seed: u64, distribution: SketchDistribution) -> Result<DenseMatrix> {
    let omega = sketch_matrix(x.cols(), r, seed, distribution);
    x.matmul(&omega)
}

/// `Z = XΩ`, deterministic in `(X, cfg)`.
pub fn gaussian_sketch(x: &DenseMatrix, cfg: &SketchConfig) -> Result<DenseMatrix> {
    let r = cfg.validate(x.rows(), x.cols())?;
    sketch_with_seed(x, r, cfg.seed, cfg.distribution)
}

struct RangeResult {
    q: DenseMatrix,
    seed: u64,
    retried: bool,
    sketch_ms: f64,
    orthonormalize_ms: f64,
    project_ms: f64,
    eig_ms: f64,
}

fn range_finder_inner(x: &DenseMatrix, cfg: &SketchConfig) -> Result<RangeResult> {
    let r = cfg.validate(x.rows(), x.cols())?;
    let k = cfg.k;
    let mut timings = (0.0, 0.0);
    let mut attempt = |seed: u64| -> Result<std::result::Result<DenseMatrix, usize>> {
        let t = Instant::now();
        let z = sketch_with_seed(x, r, seed, cfg.distribution)?;
        timings.0 += elapsed_ms(t);
        let t = Instant::now();
        let (p, kept) = orthonormal_basis(&z, SKETCH_RANK_TOL)?;
        timings.1 += elapsed_ms(t);
        Ok(if kept.len() >= k { Ok(p) } else { Err(kept.len()) })
    };

    let (p, seed, retried) = match attempt(cfg.seed)? {
        Ok(p) => (p, cfg.seed, false),
        Err(_) => {
            let retry_seed = cfg.seed.wrapping_add(RETRY_SEED_OFFSET);
            match attempt(retry_seed)? {
                Ok(p) => (p, retry_seed, true),
                Err(rank) => return Err(Error::RankDeficient { rank, required: k }),
            }
        }
    };

    let t = Instant::now();
    let y = p.t_matmul(x)?;
    let project_ms = elapsed_ms(t);

    let t = Instant::now();
    let eig = sym_eig(&y.gram())?;
    let u = eig.top_vectors(k);
    let q = p.matmul(&u)?;
    let eig_ms = elapsed_ms(t);

    Ok(RangeResult {
        q,
        seed,
        retried,
        sketch_ms: timings.0,
        orthonormalize_ms: timings.1,
        project_ms,
        eig_ms,
    })
}

/// Orthonormal `Q` (`n x k`) approximating the top-`k` left singular
/// subspace of `X`.
///
/// A sketch whose numerical rank falls below `k` is retried once with the
/// seed offset by [`RETRY_SEED_OFFSET`] before reporting rank deficiency.
pub fn randomized_range_finder(x: &DenseMatrix, cfg: &SketchConfig) -> Result<DenseMatrix> {
    Ok(range_finder_inner(x, cfg)?.q)
}

/// Builds the low-rank conditioner `Q·B·Qᵀ + a·(I − Q·Qᵀ)` from data.
///
/// Never allocates an `n x n` matrix: `C̃` comes from the Gram matrix of
/// `QᵀX` and `tr(C)` from `‖X‖_F²/m`.
pub fn sketched_preprocessing(x: &DenseMatrix, cfg: &SketchConfig) -> Result<(Conditioner, SketchReport)> {
    let start = Instant::now();
    let (n, m) = x.shape();
    let r = cfg.validate(n, m)?;
    let range = range_finder_inner(x, cfg)?;

    let t = Instant::now();
    let w = range.q.t_matmul(x)?;
    let mut ctilde = w.gram();
    ctilde.as_mut_slice().iter_mut().for_each(|v| *v /= m as f64);
    let trace_c = x.as_slice().iter().map(|v| v * v).sum::<f64>() / m as f64;
    let trace_ctilde = ctilde.trace();
    let conditioner = Conditioner::low_rank_from_projection(range.q.clone(), &ctilde, trace_c, DEFAULT_RESIDUAL_EPS)?;
    let ctilde_ms = elapsed_ms(t);

    let projection_residual = projection_residual(x, &range.q, &w) / (m as f64).sqrt();
    let degenerate_residual = matches!(&conditioner, Conditioner::LowRank(l) if l.is_degenerate());

    let report = SketchReport {
        n,
        m,
        k: cfg.k,
        r,
        seed: range.seed,
        retried: range.retried,
        q: range.q,
        trace_c,
        trace_ctilde,
        projection_residual,
        degenerate_residual,
        timings: StageTimings {
            sketch_ms: range.sketch_ms,
            orthonormalize_ms: range.orthonormalize_ms,
            project_ms: range.project_ms,
            eig_ms: range.eig_ms,
            ctilde_ms,
            total_ms: elapsed_ms(start),
        },
    };
    Ok((conditioner, report))
}

/// `‖X − Q·W‖_F` with `W = QᵀX`, streamed one row at a time.
fn projection_residual(x: &DenseMatrix, q: &DenseMatrix, w: &DenseMatrix) -> f64 {
    let mut row = vec![0.0; x.cols()];
    let mut total = 0.0;
    for i in 0..x.rows() {
        row.copy_from_slice(x.row(i));
        for (j, &qij) in q.row(i).iter().enumerate() {
            for (r, &wj) in row.iter_mut().zip(w.row(j)) {
                *r -= qij * wj;
            }
        }
        total += row.iter().map(|v| v * v).sum::<f64>();
    }
    total.sqrt()
}

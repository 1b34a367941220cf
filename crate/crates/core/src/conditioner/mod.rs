//! Conditioners `A` for the update `W ← W − η·g·(A⁻¹x)ᵀ`.
//!
//! Three shapes are supported: the identity (plain SGD), the full square root
//! `A = C^{1/2}`, and the low-rank family `A = Q·B·Qᵀ + a·(I − Q·Qᵀ)` whose
//! inverse `Q·B⁻¹·Qᵀ + a⁻¹·(I − Q·Qᵀ)` is applied in `O(nk)` time.

mod codec;

pub use codec::{ConditionerRecord, Encoding, MAGIC};

use crate::error::{Error, Result};
use crate::linalg::{dot, psd_sqrt_from_eig, sym_eig, DenseMatrix, SymEig, SYMMETRY_TOL};

/// Residual mass below this fraction of `tr(C)` counts as zero.
pub const DEGENERATE_RESIDUAL_REL: f64 = 1e-12;

/// Default `eps` for [`residual_scale`]'s fallback.
pub const DEFAULT_RESIDUAL_EPS: f64 = 1e-6;

/// Eigenvalue floor applied before taking reciprocal square roots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EigenFloor {
    Absolute(f64),
    /// Multiple of the largest eigenvalue.
    Relative(f64),
}

impl Default for EigenFloor {
    fn default() -> Self {
        EigenFloor::Relative(1e-12)
    }
}

impl EigenFloor {
    pub fn resolve(self, largest: f64) -> f64 {
        match self {
            EigenFloor::Absolute(v) => v,
            EigenFloor::Relative(r) => r * largest,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullConditioner {
    sqrt: DenseMatrix,
    inv_sqrt: DenseMatrix,
}

impl FullConditioner {
    pub fn sqrt(&self) -> &DenseMatrix {
        &self.sqrt
    }

    pub fn inv_sqrt(&self) -> &DenseMatrix {
        &self.inv_sqrt
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankConditioner {
    q: DenseMatrix,
    b: DenseMatrix,
    b_inv: DenseMatrix,
    a: f64,
    a_inv: f64,
    degenerate: bool,
}

impl LowRankConditioner {
    /// Builds `Q·B·Qᵀ + a·(I − Q·Qᵀ)` from its parts, inverting `B` through
    /// its eigendecomposition.
    pub fn new(q: DenseMatrix, b: DenseMatrix, a: f64) -> Result<Self> {
        let k = q.cols();
        if b.shape() != (k, k) {
            return Err(Error::DimensionMismatch(format!(
                "B is {}x{} but Q has {k} columns",
                b.rows(),
                b.cols()
            )));
        }
        let eig = sym_eig(&b)?;
        if b.asymmetry() > SYMMETRY_TOL * b.max_abs() {
            return Err(Error::NotSymmetric(b.asymmetry()));
        }
        if eig.eigenvalues.last().is_some_and(|&l| l <= 0.0) {
            return Err(Error::NotPsd {
                eigenvalue: *eig.eigenvalues.last().unwrap(),
                largest: eig.eigenvalues[0],
            });
        }
        let b_inv = eig.map_spectrum(|l| 1.0 / l);
        Self::from_parts(q, b, b_inv, a, false)
    }

    fn from_parts(q: DenseMatrix, b: DenseMatrix, b_inv: DenseMatrix, a: f64, degenerate: bool) -> Result<Self> {
        if q.cols() == 0 || q.cols() >= q.rows() {
            return Err(Error::InvalidArgument(format!(
                "low-rank conditioner needs 1 <= k < n, got k={} n={}",
                q.cols(),
                q.rows()
            )));
        }
        if !(a > 0.0) || !a.is_finite() {
            return Err(Error::InvalidArgument(format!("residual scale must be positive, got {a}")));
        }
        let qtq = q.t_matmul(&q)?;
        let dev = qtq.sub(&DenseMatrix::identity(q.cols()))?.max_abs();
        if dev > 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "Q columns are not orthonormal (max deviation {dev:e})"
            )));
        }
        Ok(Self {
            q,
            b,
            b_inv,
            a,
            a_inv: 1.0 / a,
            degenerate,
        })
    }

    pub fn q(&self) -> &DenseMatrix {
        &self.q
    }

    pub fn b(&self) -> &DenseMatrix {
        &self.b
    }

    pub fn b_inv(&self) -> &DenseMatrix {
        &self.b_inv
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn a_inv(&self) -> f64 {
        self.a_inv
    }

    pub fn rank(&self) -> usize {
        self.q.cols()
    }

    /// Set when `a` came from the fallback floor rather than the residual
    /// trace formula.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    fn apply_inverse_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.q.rows();
        let k = self.q.cols();
        // A⁻¹x = Q·(B⁻¹u − a⁻¹u) + a⁻¹x with u = Qᵀx.
        let mut u = vec![0.0; k];
        for (i, &xi) in x.iter().enumerate() {
            for (uj, &qij) in u.iter_mut().zip(self.q.row(i)) {
                *uj += qij * xi;
            }
        }
        let z: Vec<f64> = (0..k).map(|j| dot(self.b_inv.row(j), &u) - self.a_inv * u[j]).collect();
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.a_inv * x[i] + dot(self.q.row(i), &z);
        }
        opcount::add(2 * n * k + k * k + k + n);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Conditioner {
    Identity { n: usize },
    Full(FullConditioner),
    LowRank(LowRankConditioner),
}

/// Result of [`residual_scale`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualScale {
    pub a: f64,
    /// The residual mass was numerically zero and `a` is the fallback floor.
    pub degenerate: bool,
}

/// `a = sqrt((tr C − tr C̃)/(n − k))`, or `eps·max(1, tr C/n)` when the
/// residual mass is numerically zero.
pub fn residual_scale(trace_c: f64, trace_ctilde: f64, n: usize, k: usize, eps: f64) -> Result<ResidualScale> {
    if n <= k {
        return Err(Error::InvalidArgument(format!("residual scale needs n > k, got n={n} k={k}")));
    }
    if !(trace_c >= 0.0) {
        return Err(Error::InvalidArgument(format!("trace of C must be nonnegative, got {trace_c}")));
    }
    let residual = trace_c - trace_ctilde;
    if residual > DEGENERATE_RESIDUAL_REL * trace_c {
        Ok(ResidualScale {
            a: (residual / (n - k) as f64).sqrt(),
            degenerate: false,
        })
    } else {
        Ok(ResidualScale {
            a: eps * (trace_c / n as f64).max(1.0),
            degenerate: true,
        })
    }
}

/// Largest eigenvalue count above `1e-10·λ₁`.
fn numerical_rank(eig: &SymEig) -> usize {
    let top = eig.eigenvalues.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    eig.eigenvalues.iter().filter(|&&l| l > 1e-10 * top).count()
}

fn check_symmetric(c: &DenseMatrix) -> Result<()> {
    if !c.is_square() {
        return Err(Error::NonSquare {
            rows: c.rows(),
            cols: c.cols(),
        });
    }
    let asym = c.asymmetry();
    if asym > SYMMETRY_TOL * c.max_abs().max(f64::MIN_POSITIVE) {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

impl Conditioner {
    pub fn identity(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("identity conditioner needs n >= 1".into()));
        }
        Ok(Conditioner::Identity { n })
    }

    /// `A = C^{1/2}` with `A⁻¹ = C^{-1/2}` computed on the floored spectrum.
    pub fn full(c: &DenseMatrix, floor: EigenFloor) -> Result<Self> {
        check_symmetric(c)?;
        let eig = sym_eig(c)?;
        Self::full_from_eig(&eig, floor)
    }

    pub fn full_from_eig(eig: &SymEig, floor: EigenFloor) -> Result<Self> {
        let largest = eig.eigenvalues.first().copied().unwrap_or(0.0);
        if !(largest > 0.0) {
            return Err(Error::ZeroMatrix);
        }
        let floor = floor.resolve(largest);
        let pair = psd_sqrt_from_eig(eig, floor)?;
        // Same floor on A itself, so A stays positive definite and A·A⁻¹ = I
        // for singular C.
        let sqrt = if eig.eigenvalues.last().is_some_and(|&l| l < floor) {
            eig.map_spectrum(|l| l.max(floor).sqrt())
        } else {
            pair.sqrt
        };
        Ok(Conditioner::Full(FullConditioner {
            sqrt,
            inv_sqrt: pair.inv_sqrt,
        }))
    }

    /// Low-rank conditioner from the exact top-`k` eigenvectors of `C`:
    /// `Q = U_k`, `B = (QᵀCQ)^{1/2}` and `a` from [`residual_scale`].
    pub fn exact_low_rank(c: &DenseMatrix, k: usize) -> Result<Self> {
        check_symmetric(c)?;
        let n = c.rows();
        if k == 0 || k >= n {
            return Err(Error::InvalidArgument(format!("rank must satisfy 1 <= k < n, got k={k} n={n}")));
        }
        let eig = sym_eig(c)?;
        let rank = numerical_rank(&eig);
        if rank < k {
            return Err(Error::RankDeficient { rank, required: k });
        }
        if let Some(&smallest) = eig.eigenvalues.last() {
            if smallest < -crate::linalg::PSD_NEGATIVE_TOL * eig.eigenvalues[0] {
                return Err(Error::NotPsd {
                    eigenvalue: smallest,
                    largest: eig.eigenvalues[0],
                });
            }
        }
        let q = eig.top_vectors(k);
        let ctilde = q.t_matmul(&c.matmul(&q)?)?.symmetrized()?;
        Self::low_rank_from_projection(q, &ctilde, c.trace(), DEFAULT_RESIDUAL_EPS)
    }

    /// Completes a low-rank conditioner given orthonormal `Q` and
    /// `C̃ = QᵀCQ`: `B = C̃^{1/2}`, `B⁻¹ = C̃^{-1/2}`.
    pub fn low_rank_from_projection(q: DenseMatrix, ctilde: &DenseMatrix, trace_c: f64, eps: f64) -> Result<Self> {
        let (n, k) = q.shape();
        let eig = sym_eig(ctilde)?;
        let largest = eig.eigenvalues.first().copied().unwrap_or(0.0);
        if !(largest > 0.0) {
            return Err(Error::ZeroMatrix);
        }
        let pair = psd_sqrt_from_eig(&eig, EigenFloor::default().resolve(largest))?;
        let scale = residual_scale(trace_c, ctilde.trace(), n, k, eps)?;
        let mut b = pair.sqrt;
        // Floor B as well so that B·B⁻¹ = I holds even when C̃ is singular.
        let floor = EigenFloor::default().resolve(largest);
        if eig.eigenvalues.last().is_some_and(|&l| l < floor) {
            b = eig.map_spectrum(|l| l.max(floor).sqrt());
        }
        Ok(Conditioner::LowRank(LowRankConditioner::from_parts(
            q,
            b,
            pair.inv_sqrt,
            scale.a,
            scale.degenerate,
        )?))
    }

    pub fn dim(&self) -> usize {
        match self {
            Conditioner::Identity { n } => *n,
            Conditioner::Full(f) => f.sqrt.rows(),
            Conditioner::LowRank(l) => l.q.rows(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Conditioner::Identity { .. } => "identity",
            Conditioner::Full(_) => "full",
            Conditioner::LowRank(_) => "low_rank",
        }
    }

    /// `A⁻¹·x`.
    pub fn apply_inverse(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; x.len()];
        self.apply_inverse_into(x, &mut out)?;
        Ok(out)
    }

    /// `out ← A⁻¹·x` without allocating an `n`-vector.
    pub fn apply_inverse_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.dim();
        if x.len() != n || out.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "conditioner of dimension {n} applied to a vector of length {}",
                x.len()
            )));
        }
        match self {
            Conditioner::Identity { .. } => out.copy_from_slice(x),
            Conditioner::Full(f) => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = dot(f.inv_sqrt.row(i), x);
                }
            }
            Conditioner::LowRank(l) => l.apply_inverse_into(x, out),
        }
        Ok(())
    }

    /// Dense `A⁻¹`. Testing and reporting only; `O(n²)` memory.
    pub fn explicit_inverse(&self) -> DenseMatrix {
        match self {
            Conditioner::Identity { n } => DenseMatrix::identity(*n),
            Conditioner::Full(f) => f.inv_sqrt.clone(),
            Conditioner::LowRank(l) => low_rank_dense(&l.q, &l.b_inv, l.a_inv),
        }
    }

    /// Dense `A`.
    pub fn materialize(&self) -> DenseMatrix {
        match self {
            Conditioner::Identity { n } => DenseMatrix::identity(*n),
            Conditioner::Full(f) => f.sqrt.clone(),
            Conditioner::LowRank(l) => low_rank_dense(&l.q, &l.b, l.a),
        }
    }

    /// `tr(A)`.
    pub fn trace(&self) -> f64 {
        match self {
            Conditioner::Identity { n } => *n as f64,
            Conditioner::Full(f) => f.sqrt.trace(),
            Conditioner::LowRank(l) => l.b.trace() + l.a * (l.q.rows() - l.q.cols()) as f64,
        }
    }

    /// `tr(A⁻¹·C)` for a symmetric `C`.
    pub fn trace_inverse_times(&self, c: &DenseMatrix) -> Result<f64> {
        let n = self.dim();
        if c.shape() != (n, n) {
            return Err(Error::DimensionMismatch(format!(
                "C is {}x{}, conditioner dimension {n}",
                c.rows(),
                c.cols()
            )));
        }
        Ok(match self {
            Conditioner::Identity { .. } => c.trace(),
            Conditioner::Full(f) => (0..n).map(|i| dot(f.inv_sqrt.row(i), c.row(i))).sum(),
            Conditioner::LowRank(l) => {
                let ctilde = l.q.t_matmul(&c.matmul(&l.q)?)?;
                let head: f64 = (0..l.rank()).map(|i| dot(l.b_inv.row(i), ctilde.row(i))).sum();
                head + l.a_inv * (c.trace() - ctilde.trace())
            }
        })
    }
}

/// `Q·M·Qᵀ + s·(I − Q·Qᵀ)`.
fn low_rank_dense(q: &DenseMatrix, m: &DenseMatrix, s: f64) -> DenseMatrix {
    let n = q.rows();
    let qm = q.matmul(m).expect("conformant");
    let head = qm.matmul_t(q).expect("conformant");
    let proj = q.matmul_t(q).expect("conformant");
    let mut out = DenseMatrix::identity(n).sub(&proj).expect("square").scaled(s);
    for (o, h) in out.as_mut_slice().iter_mut().zip(head.as_slice()) {
        *o += h;
    }
    out.symmetrized().expect("square")
}

/// Multiply-add counter for the low-rank inverse application.
///
/// Active only with debug assertions; release builds compile it away.
pub mod opcount {
    #[cfg(debug_assertions)]
    thread_local! {
        static COUNT: std::cell::Cell<usize> = const { std::cell::Cell::new(0) };
    }

    #[inline]
    pub(crate) fn add(_ops: usize) {
        #[cfg(debug_assertions)]
        COUNT.with(|c| c.set(c.get() + _ops));
    }

    pub fn reset() {
        #[cfg(debug_assertions)]
        COUNT.with(|c| c.set(0));
    }

    /// Multiply-adds recorded on this thread since the last reset; always
    /// zero without debug assertions.
    pub fn get() -> usize {
        #[cfg(debug_assertions)]
        return COUNT.with(|c| c.get());
        #[cfg(not(debug_assertions))]
        0
    }
}

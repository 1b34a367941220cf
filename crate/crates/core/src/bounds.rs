//! Closed-form convergence bounds and related spectral quantities.
//!
//! Every bound depends on the second-moment matrix `C` only through its
//! eigenvalues, so the evaluators take a descending spectrum. Each bound
//! keeps the constant factor of its own statement: the low-rank bound
//! carries a leading `½` that the general and optimal bounds do not.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt_from_eig, sym_eig, DenseMatrix};

/// Relative slack allowed when checking `tr(C̃) ≤ tr(C)` and sortedness.
const TRACE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Asserted upper bound on `‖W*‖` (spectral norm).
    pub sigma: f64,
    /// Lipschitz constant of the loss.
    pub rho: f64,
    /// Number of iterations.
    pub t: usize,
    /// Eigenvalues of `C`, descending and nonnegative.
    pub spectrum: Vec<f64>,
    pub k: Option<usize>,
}

impl BoundInputs {
    pub fn new(sigma: f64, rho: f64, t: usize, spectrum: Vec<f64>) -> Result<Self> {
        let inputs = Self {
            sigma,
            rho,
            t,
            spectrum,
            k: None,
        };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn with_rank(mut self, k: usize) -> Self {
        self.k = Some(k);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.sigma > 0.0 && self.sigma.is_finite()) || !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad(format!("sigma and rho must be positive, got {} and {}", self.sigma, self.rho));
        }
        if self.t == 0 {
            return bad("T must be at least 1".into());
        }
        if self.spectrum.is_empty() {
            return bad("empty spectrum".into());
        }
        validate_spectrum(&self.spectrum)
    }

    pub fn n(&self) -> usize {
        self.spectrum.len()
    }

    /// `σρ/sqrt(T)`.
    pub fn prefactor(&self) -> f64 {
        self.sigma * self.rho / (self.t as f64).sqrt()
    }

    fn rank(&self) -> Result<usize> {
        let k = self
            .k
            .ok_or_else(|| Error::InvalidArgument("bound needs a rank k".into()))?;
        if k == 0 || k >= self.n() {
            return Err(Error::InvalidArgument(format!("rank must satisfy 1 <= k < n, got k={k} n={}", self.n())));
        }
        Ok(k)
    }
}

fn validate_spectrum(spectrum: &[f64]) -> Result<()> {
    let top = spectrum.first().copied().unwrap_or(0.0);
    if let Some(&l) = spectrum.iter().find(|l| !l.is_finite() || **l < 0.0) {
        return Err(Error::InvalidArgument(format!("spectrum entry {l} is not a finite nonnegative value")));
    }
    if spectrum.windows(2).any(|w| w[1] > w[0] + TRACE_SLACK * top) {
        return Err(Error::InvalidArgument("spectrum must be sorted in descending order".into()));
    }
    Ok(())
}

fn sum_sqrt(xs: &[f64]) -> f64 {
    xs.iter().map(|l| l.sqrt()).sum()
}

/// Descending eigenvalues of a PSD matrix with round-off negatives clamped.
pub fn spectrum_of(c: &DenseMatrix) -> Result<Vec<f64>> {
    let eig = sym_eig(c)?;
    let top = eig.eigenvalues.first().copied().unwrap_or(0.0);
    if let Some(&l) = eig.eigenvalues.last() {
        if l < -crate::linalg::PSD_NEGATIVE_TOL * top.max(0.0) {
            return Err(Error::NotPsd {
                eigenvalue: l,
                largest: top,
            });
        }
    }
    Ok(eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect())
}

/// `(σρ/sqrt(T))·(tr(A) + tr(A⁻¹C))` for any conditioner `A`.
pub fn lemma1_bound(inputs: &BoundInputs, trace_a: f64, trace_ainv_c: f64) -> Result<f64> {
    if !(trace_a >= 0.0) || !(trace_ainv_c >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "traces must be nonnegative, got {trace_a} and {trace_ainv_c}"
        )));
    }
    Ok(inputs.prefactor() * (trace_a + trace_ainv_c))
}

/// `(σρ/sqrt(T))·tr(C^{1/2})`.
pub fn thm1_bound(inputs: &BoundInputs) -> f64 {
    inputs.prefactor() * sum_sqrt(&inputs.spectrum)
}

/// `(σρ/(2·sqrt(T)))·(tr(B) + tr(B⁻¹C̃) + 2·sqrt((n−k)(tr(C) − tr(C̃))))`.
pub fn lowrank_bound(inputs: &BoundInputs, trace_b: f64, trace_binv_ctilde: f64, trace_ctilde: f64) -> Result<f64> {
    let k = inputs.rank()?;
    let n = inputs.n();
    let trace_c: f64 = inputs.spectrum.iter().sum();
    let residual = trace_c - trace_ctilde;
    if residual < -TRACE_SLACK * trace_c.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "tr(C~) = {trace_ctilde} exceeds tr(C) = {trace_c}"
        )));
    }
    let tail = 2.0 * ((n - k) as f64 * residual.max(0.0)).sqrt();
    Ok(0.5 * inputs.prefactor() * (trace_b + trace_binv_ctilde + tail))
}

/// `(σρ/sqrt(T))·(tr(C_k^{1/2}) + sqrt((n−k)(tr(C) − tr(C_k))))`.
pub fn exact_lowrank_bound(inputs: &BoundInputs) -> Result<f64> {
    let k = inputs.rank()?;
    let n = inputs.n();
    let head = sum_sqrt(&inputs.spectrum[..k]);
    let tail: f64 = inputs.spectrum[k..].iter().sum();
    Ok(inputs.prefactor() * (head + ((n - k) as f64 * tail).sqrt()))
}

/// Ratio of the iteration counts needed by `A = I` and `A = C^{1/2}`:
/// `(‖ΔᵀΔ‖_tr·‖C‖_tr) / (‖ΔᵀΔ‖_sp·‖C^{1/2}‖_tr²)`. Values above 1 favour
/// `C^{1/2}`.
pub fn iteration_ratio(
    delta_gram_trace_norm: f64,
    delta_gram_spectral_norm: f64,
    trace_c: f64,
    trace_sqrt_c: f64,
) -> Result<f64> {
    let inputs = [delta_gram_trace_norm, delta_gram_spectral_norm, trace_c, trace_sqrt_c];
    if inputs.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "iteration ratio needs positive finite norms, got {inputs:?}"
        )));
    }
    Ok(delta_gram_trace_norm * trace_c / (delta_gram_spectral_norm * trace_sqrt_c * trace_sqrt_c))
}

/// `(‖ΔᵀΔ‖_tr, ‖ΔᵀΔ‖_sp) = (‖Δ‖_F², σ₁(Δ)²)`.
pub fn delta_gram_norms(delta: &DenseMatrix) -> Result<(f64, f64)> {
    let gram = delta.t_matmul(delta)?;
    let top = sym_eig(&gram)?.eigenvalues.first().copied().unwrap_or(0.0);
    let fro = delta.frobenius_norm();
    Ok((fro * fro, top.max(0.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FastDecay {
    pub holds: bool,
    /// `sqrt((n−k)(tr(C) − tr(C_k)))`.
    pub lhs: f64,
    /// `constant·tr(C^{1/2})`.
    pub rhs: f64,
    /// `(rhs − lhs)/rhs`.
    pub margin: f64,
}

/// Checks `sqrt((n−k)(tr(C) − tr(C_k))) ≤ constant·tr(C^{1/2})`.
pub fn fast_decay_check(spectrum: &[f64], k: usize, constant: f64) -> Result<FastDecay> {
    validate_spectrum(spectrum)?;
    let n = spectrum.len();
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!("rank must satisfy 1 <= k < n, got k={k} n={n}")));
    }
    if !(constant > 0.0) {
        return Err(Error::InvalidArgument(format!("constant must be positive, got {constant}")));
    }
    let tail: f64 = spectrum[k..].iter().sum();
    let lhs = ((n - k) as f64 * tail).sqrt();
    let rhs = constant * sum_sqrt(spectrum);
    let margin = if rhs > 0.0 { (rhs - lhs) / rhs } else { 0.0 };
    Ok(FastDecay {
        holds: lhs <= rhs,
        lhs,
        rhs,
        margin,
    })
}

/// Minimizer of `tr(M⁻¹C)` over trace-one positive definite `M`:
/// `M* = C^{1/2}/tr(C^{1/2})` with minimum `(tr(C^{1/2}))²`.
///
/// Eigenvalues below `1e-12·λ_max` are floored before the square root.
pub fn fan_minimizer(c: &DenseMatrix) -> Result<(DenseMatrix, f64)> {
    let eig = sym_eig(c)?;
    let top = eig.eigenvalues.first().copied().unwrap_or(0.0);
    let sqrt = psd_sqrt_from_eig(&eig, 1e-12 * top.max(0.0))?.sqrt;
    let trace = sqrt.trace();
    Ok((sqrt.scaled(1.0 / trace), trace * trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Every bound assumes `σ ≥ ‖W*‖`, which cannot be checked without `W*`.
    pub conditional_on_sigma: bool,
    pub sigma: f64,
    pub rho: f64,
    pub t: usize,
    pub n: usize,
    pub trace_c: f64,
    pub trace_sqrt_c: f64,
    /// General bound at `A = I`.
    pub lemma1_identity: f64,
    /// General bound at `A = C^{1/2}`.
    pub lemma1_sqrt: f64,
    pub thm1_bound: f64,
    pub k: Option<usize>,
    /// Low-rank bound with `Q` the top-`k` eigenvectors and `B = C̃^{1/2}`.
    pub thm2_bound: Option<f64>,
    pub thm3_bound: Option<f64>,
    pub fast_decay: Option<FastDecay>,
    pub iteration_ratio: Option<f64>,
}

impl BoundReport {
    /// Evaluates every bound for `inputs`; `delta` (`W* − W_1`), when known,
    /// adds the iteration ratio.
    pub fn evaluate(inputs: &BoundInputs, fast_decay_constant: f64, delta: Option<&DenseMatrix>) -> Result<Self> {
        inputs.validate()?;
        let spectrum = &inputs.spectrum;
        let n = inputs.n();
        let trace_c: f64 = spectrum.iter().sum();
        let trace_sqrt_c = sum_sqrt(spectrum);
        let (thm2_bound, thm3_bound, fast_decay) = match inputs.k {
            Some(k) => {
                let trace_ctilde: f64 = spectrum[..k.min(n)].iter().sum();
                let trace_b = sum_sqrt(&spectrum[..k.min(n)]);
                (
                    Some(lowrank_bound(inputs, trace_b, trace_b, trace_ctilde)?),
                    Some(exact_lowrank_bound(inputs)?),
                    Some(fast_decay_check(spectrum, k, fast_decay_constant)?),
                )
            }
            None => (None, None, None),
        };
        let iteration_ratio = match delta {
            Some(d) => {
                let (tr, sp) = delta_gram_norms(d)?;
                Some(iteration_ratio(tr, sp, trace_c, trace_sqrt_c)?)
            }
            None => None,
        };
        Ok(Self {
            conditional_on_sigma: true,
            sigma: inputs.sigma,
            rho: inputs.rho,
            t: inputs.t,
            n,
            trace_c,
            trace_sqrt_c,
            lemma1_identity: lemma1_bound(inputs, n as f64, trace_c)?,
            lemma1_sqrt: lemma1_bound(inputs, trace_sqrt_c, trace_sqrt_c)?,
            thm1_bound: thm1_bound(inputs),
            k: inputs.k,
            thm2_bound,
            thm3_bound,
            fast_decay,
            iteration_ratio,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn unit(spectrum: &[f64], t: usize) -> BoundInputs {
        BoundInputs::new(1.0, 1.0, t, spectrum.to_vec()).unwrap()
    }

    fn random_spd(n: usize, rng: &mut CounterRng) -> DenseMatrix {
        let g = DenseMatrix::from_fn(n, n, |_, _| rng.standard_normal()).unwrap();
        g.gram().add(&DenseMatrix::identity(n).scaled(1e-3)).unwrap()
    }

    fn trace_inv_times(m: &DenseMatrix, c: &DenseMatrix) -> f64 {
        let eig = sym_eig(m).unwrap();
        let inv = eig.map_spectrum(|l| 1.0 / l);
        inv.matmul(c).unwrap().trace()
    }

    #[test]
    fn lemma1_examples() {
        let inputs = unit(&[1.0, 1.0], 100);
        assert!((lemma1_bound(&inputs, 2.0, 2.0).unwrap() - 0.4).abs() < 1e-15);
        let inputs = unit(&[4.0, 1.0], 100);
        let general = lemma1_bound(&inputs, 3.0, 3.0).unwrap();
        assert!((general - 2.0 * thm1_bound(&inputs)).abs() < 1e-15);
        let quad = unit(&[4.0, 1.0], 400);
        assert!((lemma1_bound(&quad, 3.0, 3.0).unwrap() - general / 2.0).abs() < 1e-15);
        assert!(lemma1_bound(&inputs, -1.0, 0.0).is_err());
    }

    #[test]
    fn thm1_examples() {
        assert!((thm1_bound(&unit(&[4.0, 1.0], 100)) - 0.3).abs() < 1e-15);
        assert_eq!(thm1_bound(&unit(&[0.0, 0.0, 0.0], 100)), 0.0);
        assert!((thm1_bound(&unit(&[1.0; 7], 49)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lowrank_examples() {
        let inputs = unit(&[4.0, 1.0, 0.25], 100).with_rank(1);
        let b = lowrank_bound(&inputs, 2.0, 2.0, 4.0).unwrap();
        let expected = 0.1 / 2.0 * (4.0 + 2.0 * 2.5f64.sqrt());
        assert!((b - expected).abs() < 1e-15);
        let no_tail = lowrank_bound(&inputs, 2.0, 2.0, 5.25).unwrap();
        assert!((no_tail - 0.05 * 4.0).abs() < 1e-15);
        assert!(lowrank_bound(&inputs, 2.0, 2.0, 6.0).is_err());
        assert!(lowrank_bound(&unit(&[1.0, 1.0], 1).with_rank(2), 1.0, 1.0, 1.0).is_err());
        // With Q the exact top eigenvectors the two low-rank bounds agree.
        let exact = exact_lowrank_bound(&inputs).unwrap();
        assert!((exact - b).abs() < 1e-15);
    }

    #[test]
    fn exact_lowrank_examples() {
        let b = exact_lowrank_bound(&unit(&[4.0, 1.0, 0.25], 100).with_rank(1)).unwrap();
        assert!((b - 0.1 * (2.0 + 2.5f64.sqrt())).abs() < 1e-15);
        let zero_tail = unit(&[9.0, 4.0, 0.0], 100);
        let b = exact_lowrank_bound(&zero_tail.clone().with_rank(2)).unwrap();
        assert!((b - thm1_bound(&zero_tail)).abs() < 1e-15);
        let spectrum: Vec<f64> = (1..=64).map(|i| (i as f64).powi(-4)).collect();
        let inputs = unit(&spectrum, 1000).with_rank(8);
        let ratio = exact_lowrank_bound(&inputs).unwrap() / thm1_bound(&inputs);
        assert!((1.0..=2.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn exact_lowrank_monotone_in_k() {
        let mut rng = CounterRng::new(3, 0);
        for _ in 0..50 {
            let n = 2 + rng.below(30) as usize;
            let mut spectrum: Vec<f64> = (0..n).map(|_| rng.uniform().powi(3)).collect();
            spectrum.sort_by(|a, b| b.total_cmp(a));
            let base = unit(&spectrum, 10);
            let bounds: Vec<f64> = (1..n)
                .map(|k| exact_lowrank_bound(&base.clone().with_rank(k)).unwrap())
                .collect();
            assert!(bounds.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        }
    }

    #[test]
    fn iteration_ratio_examples() {
        // Δ = I (2x2), C = diag(1, 0).
        assert_eq!(iteration_ratio(2.0, 1.0, 1.0, 1.0).unwrap(), 2.0);
        let n = 6.0;
        assert_eq!(iteration_ratio(n, 1.0, n, n).unwrap(), 1.0);
        assert!(iteration_ratio(1.0, 0.0, 1.0, 1.0).is_err());
        let mut rng = CounterRng::new(1, 0);
        let u: Vec<f64> = (0..4).map(|_| rng.standard_normal()).collect();
        let v: Vec<f64> = (0..5).map(|_| rng.standard_normal()).collect();
        let delta = DenseMatrix::from_fn(4, 5, |i, j| u[i] * v[j]).unwrap();
        let (tr, sp) = delta_gram_norms(&delta).unwrap();
        assert!((tr - sp).abs() < 1e-10 * tr);
        let c = random_spd(5, &mut rng);
        let spectrum = spectrum_of(&c).unwrap();
        let tc: f64 = spectrum.iter().sum();
        let ts = sum_sqrt(&spectrum);
        let r = iteration_ratio(tr, sp, tc, ts).unwrap();
        assert!((r - tr / sp * tc / (ts * ts)).abs() < 1e-12 && r <= 1.0 + 1e-10);
    }

    #[test]
    fn iteration_ratio_range() {
        let mut rng = CounterRng::new(21, 0);
        for _ in 0..200 {
            let n = 1 + rng.below(8) as usize;
            let p = 1 + rng.below(8) as usize;
            let delta = DenseMatrix::from_fn(p, n, |_, _| rng.standard_normal()).unwrap();
            let c = random_spd(n, &mut rng);
            let spectrum = spectrum_of(&c).unwrap();
            let (tr, sp) = delta_gram_norms(&delta).unwrap();
            let r = iteration_ratio(tr, sp, spectrum.iter().sum(), sum_sqrt(&spectrum)).unwrap();
            assert!(r >= 1.0 / n as f64 - 1e-12 && r <= n.min(p) as f64 + 1e-12, "{r}");
        }
    }

    #[test]
    fn fast_decay_examples() {
        let exact = fast_decay_check(&[4.0, 1.0, 0.0, 0.0], 2, 1.0).unwrap();
        assert!(exact.holds && exact.lhs == 0.0 && exact.rhs == 3.0);
        let flat = fast_decay_check(&vec![1.0; 100], 1, 1.0).unwrap();
        assert!(flat.holds);
        assert!((flat.lhs - 99.0).abs() < 1e-12 && (flat.rhs - 100.0).abs() < 1e-12);
        assert!((flat.margin - 0.01).abs() < 1e-12);
        let spectrum: Vec<f64> = (1..=256).map(|i| (i as f64).powi(-4)).collect();
        let fast = fast_decay_check(&spectrum, 8, 1.0).unwrap();
        assert!(fast.holds && fast.margin > 0.5, "{fast:?}");
        assert!(fast_decay_check(&[1.0, 2.0], 1, 1.0).is_err());
        assert!(fast_decay_check(&[2.0, 1.0], 2, 1.0).is_err());
    }

    #[test]
    fn fan_minimizer_examples() {
        let (m, v) = fan_minimizer(&DenseMatrix::from_diag(&[4.0, 1.0]).unwrap()).unwrap();
        assert!(m.sub(&DenseMatrix::from_diag(&[2.0 / 3.0, 1.0 / 3.0]).unwrap()).unwrap().max_abs() < 1e-15);
        assert!((v - 9.0).abs() < 1e-12);
        assert!((trace_inv_times(&m, &DenseMatrix::from_diag(&[4.0, 1.0]).unwrap()) - 9.0).abs() < 1e-12);
        let (m, v) = fan_minimizer(&DenseMatrix::identity(4)).unwrap();
        assert!(m.sub(&DenseMatrix::identity(4).scaled(0.25)).unwrap().max_abs() < 1e-15);
        assert!((v - 16.0).abs() < 1e-12);
        assert!(fan_minimizer(&DenseMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn fan_minimizer_beats_random_feasible_points() {
        let mut rng = CounterRng::new(17, 0);
        for _ in 0..10 {
            let c = random_spd(5, &mut rng);
            let (m_star, min_value) = fan_minimizer(&c).unwrap();
            assert!((m_star.trace() - 1.0).abs() < 1e-12);
            assert!((trace_inv_times(&m_star, &c) - min_value).abs() < 1e-9 * min_value);
            for _ in 0..100 {
                let m = random_spd(5, &mut rng);
                let m = m.scaled(1.0 / m.trace());
                assert!(trace_inv_times(&m, &c) >= min_value - 1e-9 * min_value);
            }
        }
    }

    #[test]
    fn optimal_conditioner_minimizes_general_bound() {
        let mut rng = CounterRng::new(19, 0);
        for _ in 0..50 {
            let n = 2 + rng.below(6) as usize;
            let c = random_spd(n, &mut rng);
            let s = sum_sqrt(&spectrum_of(&c).unwrap());
            for a in [DenseMatrix::identity(n), random_spd(n, &mut rng)] {
                let product = a.trace() * trace_inv_times(&a, &c);
                assert!(s * s <= product * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn report_collects_every_bound() {
        let inputs = BoundInputs::new(1.0, 2f64.sqrt(), 100, vec![4.0, 1.0, 0.25]).unwrap().with_rank(1);
        let delta = DenseMatrix::identity(3);
        let report = BoundReport::evaluate(&inputs, 1.0, Some(&delta)).unwrap();
        assert!((report.lemma1_sqrt - 2.0 * report.thm1_bound).abs() < 1e-12);
        assert_eq!(report.thm2_bound, Some(exact_lowrank_bound(&inputs).unwrap()));
        assert!(report.fast_decay.unwrap().holds);
        assert!(report.iteration_ratio.unwrap() >= 1.0);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"conditional_on_sigma\":true"));
    }

    #[test]
    fn input_validation() {
        assert!(BoundInputs::new(0.0, 1.0, 1, vec![1.0]).is_err());
        assert!(BoundInputs::new(1.0, 1.0, 0, vec![1.0]).is_err());
        assert!(BoundInputs::new(1.0, 1.0, 1, vec![1.0, -1.0]).is_err());
        assert!(BoundInputs::new(1.0, 1.0, 1, vec![1.0, 2.0]).is_err());
        assert!(exact_lowrank_bound(&unit(&[1.0, 1.0], 1)).is_err());
    }
}

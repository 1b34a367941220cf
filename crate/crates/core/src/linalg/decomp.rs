use super::matrix::{dot, norm2, DenseMatrix};
use crate::error::{Error, Result};

/// Relative asymmetry (against the largest entry) tolerated by PSD routines.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Eigenvalues above `-PSD_NEGATIVE_TOL * λ_max` are treated as rounding
/// noise and clamped to zero; anything more negative is rejected.
pub const PSD_NEGATIVE_TOL: f64 = 1e-10;

const MAX_SWEEPS: usize = 64;
const JACOBI_STOP: f64 = 1e-15;
const SIGN_TOL: f64 = 1e-10;

/// Eigendecomposition of a symmetric matrix, eigenvalues descending.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, in eigenvalue order.
    pub eigenvectors: DenseMatrix,
}

impl SymEig {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Eigenvectors of the `k` largest eigenvalues as an `n x k` matrix.
    pub fn top_vectors(&self, k: usize) -> DenseMatrix {
        self.eigenvectors.leading_columns(k)
    }

    /// `V · diag(f(λ)) · Vᵀ`.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        let d: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        spectral_product(&self.eigenvectors, &d)
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        self.map_spectrum(|l| l)
    }
}

/// Thin SVD `M = U · diag(σ) · Vᵀ` with `min(rows, cols)` factors.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub v: DenseMatrix,
}

impl ThinSvd {
    pub fn reconstruct(&self) -> DenseMatrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (x, s) in us.row_mut(i).iter_mut().zip(&self.singular_values) {
                *x *= s;
            }
        }
        us.matmul_t(&self.v).expect("thin svd factors are conformant")
    }
}

#[derive(Debug, Clone)]
pub struct PsdSqrt {
    pub sqrt: DenseMatrix,
    /// Inverse square root with eigenvalues floored before inversion.
    pub inv_sqrt: DenseMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub frobenius: f64,
    pub spectral: f64,
    pub trace_norm: f64,
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input is symmetrized as `(M + Mᵀ)/2` first. Eigenvalues come back in
/// descending order (ties keep their diagonal order) and each eigenvector is
/// signed so that its first component larger than `1e-10` in magnitude is
/// positive.
pub fn sym_eig(m: &DenseMatrix) -> Result<SymEig> {
    if !m.is_square() {
        return Err(Error::NonSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    m.check_finite()?;
    let n = m.rows();
    let mut a = m.symmetrized()?.into_vec();
    let mut v = DenseMatrix::identity(n).into_vec();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt();

    if scale > 0.0 {
        for sweep in 0..MAX_SWEEPS {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += a[p * n + q] * a[p * n + q];
                }
            }
            if off.sqrt() <= JACOBI_STOP * scale {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[p * n + q];
                    if apq == 0.0 {
                        continue;
                    }
                    let app = a[p * n + p];
                    let aqq = a[q * n + q];
                    // Late sweeps: drop entries below the diagonal's precision.
                    let g = 100.0 * apq.abs();
                    if sweep > 3 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                        a[p * n + q] = 0.0;
                        a[q * n + p] = 0.0;
                        continue;
                    }
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = if theta.abs() > 1e150 {
                        0.5 / theta
                    } else {
                        theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                    };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    rotate(&mut a, n, p, q, c, s);
                    a[p * n + p] = app - t * apq;
                    a[q * n + q] = aqq + t * apq;
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    for k in 0..n {
                        let vkp = v[k * n + p];
                        let vkq = v[k * n + q];
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }

    let diag: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]));

    let eigenvalues: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let first = (0..n)
            .map(|k| v[k * n + src])
            .find(|x| x.abs() > SIGN_TOL)
            .unwrap_or(1.0);
        let sign = if first < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors[(k, dst)] = sign * v[k * n + src];
        }
    }
    Ok(SymEig {
        eigenvalues,
        eigenvectors: vectors,
    })
}

/// Applies `A ← Jᵀ A J` for the plane rotation in coordinates `(p, q)`.
fn rotate(a: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..n {
        let akp = a[k * n + p];
        let akq = a[k * n + q];
        a[k * n + p] = c * akp - s * akq;
        a[k * n + q] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[p * n + k];
        let aqk = a[q * n + k];
        a[p * n + k] = c * apk - s * aqk;
        a[q * n + k] = s * apk + c * aqk;
    }
}

/// `V · diag(d) · Vᵀ`, exactly symmetric.
fn spectral_product(v: &DenseMatrix, d: &[f64]) -> DenseMatrix {
    let n = v.rows();
    let mut scaled = v.clone();
    for i in 0..n {
        for (x, s) in scaled.row_mut(i).iter_mut().zip(d) {
            *x *= s;
        }
    }
    let mut out = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let x = dot(scaled.row(i), v.row(j));
            out[(i, j)] = x;
            out[(j, i)] = x;
        }
    }
    out
}

/// Thin SVD through the eigendecomposition of the smaller Gram matrix.
///
/// Singular values are taken as `‖M v_i‖` rather than `sqrt(λ_i)`, which keeps
/// absolute accuracy near `ε·σ₁` for the small ones. Left vectors are
/// re-orthogonalized and completed to an orthonormal set where `σ_i` is zero.
pub fn thin_svd(m: &DenseMatrix) -> Result<ThinSvd> {
    m.check_finite()?;
    let (rows, cols) = m.shape();
    if rows < cols {
        let t = thin_svd(&m.transpose())?;
        return Ok(ThinSvd {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        });
    }

    let gram = m.t_matmul(m)?;
    let eig = sym_eig(&gram)?;
    let mv = m.matmul(&eig.eigenvectors)?;
    let columns: Vec<Vec<f64>> = (0..cols).map(|j| mv.column(j)).collect();
    let norms: Vec<f64> = columns.iter().map(|c| norm2(c)).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let sigma_max = order.first().map_or(0.0, |&i| norms[i]);
    let tol = rows.max(cols) as f64 * f64::EPSILON * sigma_max;

    let mut singular_values = Vec::with_capacity(cols);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut pending = Vec::new();
    for (slot, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        if sigma > tol {
            let mut u: Vec<f64> = columns[src].iter().map(|x| x / sigma).collect();
            orthogonalize(&mut u, &u_cols);
            let nu = norm2(&u);
            u.iter_mut().for_each(|x| *x /= nu);
            u_cols.push(u);
            singular_values.push(sigma);
        } else {
            pending.push(slot);
            u_cols.push(Vec::new());
            singular_values.push(0.0);
        }
    }
    if !pending.is_empty() {
        let mut basis: Vec<Vec<f64>> = u_cols.iter().filter(|c| !c.is_empty()).cloned().collect();
        complete_basis(&mut basis, rows, cols);
        let extra = basis.split_off(cols - pending.len());
        for (slot, col) in pending.into_iter().zip(extra) {
            u_cols[slot] = col;
        }
    }

    let mut v = DenseMatrix::zeros(cols, cols);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..cols {
            v[(k, dst)] = eig.eigenvectors[(k, src)];
        }
    }
    Ok(ThinSvd {
        u: DenseMatrix::from_columns(&u_cols)?,
        singular_values,
        v,
    })
}

/// Two passes of modified Gram-Schmidt against an orthonormal basis.
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for q in basis {
            let c = dot(q, v);
            for (x, qi) in v.iter_mut().zip(q) {
                *x -= c * qi;
            }
        }
    }
}

/// Extends `basis` until it has `target` columns, each time adding the
/// coordinate vector with the largest component outside the current span.
/// That component has norm at least `sqrt((dim − len)/dim)`.
fn complete_basis(basis: &mut Vec<Vec<f64>>, dim: usize, target: usize) {
    while basis.len() < target.min(dim) {
        let best = (0..dim)
            .map(|e| {
                let mut v = vec![0.0; dim];
                v[e] = 1.0;
                orthogonalize(&mut v, basis);
                v
            })
            .max_by(|a, b| norm2(a).total_cmp(&norm2(b)))
            .expect("dim > 0");
        let nv = norm2(&best);
        basis.push(best.into_iter().map(|x| x / nv).collect());
    }
}

/// Rank-revealing Gram-Schmidt orthonormalization of the columns of `m`.
///
/// A column is dropped when its residual after projecting out the earlier
/// columns is at most `rel_tol` times the largest column norm. Returns the
/// orthonormal basis and the indices of the columns that were kept.
pub fn orthonormal_basis(m: &DenseMatrix, rel_tol: f64) -> Result<(DenseMatrix, Vec<usize>)> {
    m.check_finite()?;
    let (rows, cols) = m.shape();
    let columns: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j)).collect();
    let max_norm = columns.iter().map(|c| norm2(c)).fold(0.0, f64::max);
    let threshold = rel_tol * max_norm;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut kept = Vec::with_capacity(cols);
    if max_norm > 0.0 {
        for (j, mut c) in columns.into_iter().enumerate() {
            if basis.len() == rows {
                break;
            }
            orthogonalize(&mut c, &basis);
            let nc = norm2(&c);
            if nc > threshold {
                c.iter_mut().for_each(|x| *x /= nc);
                basis.push(c);
                kept.push(j);
            }
        }
    }
    let p = if basis.is_empty() {
        DenseMatrix::zeros(rows, 0)
    } else {
        DenseMatrix::from_columns(&basis)?
    };
    Ok((p, kept))
}

/// Orthonormal basis `P` of the column space of a full-column-rank matrix.
///
/// Numerical rank is judged with threshold `1e-10` relative to the largest
/// column norm; deficient input is reported with the detected rank.
pub fn qr_orthonormal(m: &DenseMatrix) -> Result<DenseMatrix> {
    if m.rows() < m.cols() {
        return Err(Error::InvalidArgument(format!(
            "qr_orthonormal needs rows >= cols, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let (p, kept) = orthonormal_basis(m, 1e-10)?;
    if kept.len() < m.cols() {
        return Err(Error::RankDeficient {
            rank: kept.len(),
            required: m.cols(),
        });
    }
    Ok(p)
}

fn check_symmetric_square(m: &DenseMatrix) -> Result<()> {
    if !m.is_square() {
        return Err(Error::NonSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    m.check_finite()?;
    let asym = m.asymmetry();
    if asym > SYMMETRY_TOL * m.max_abs().max(f64::MIN_POSITIVE) {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

/// `(M^{1/2}, M^{-1/2})` for a symmetric PSD matrix.
///
/// `eps_floor` is an absolute eigenvalue floor applied before the reciprocal
/// square root.
pub fn psd_sqrt_pair(m: &DenseMatrix, eps_floor: f64) -> Result<PsdSqrt> {
    check_symmetric_square(m)?;
    let eig = sym_eig(m)?;
    psd_sqrt_from_eig(&eig, eps_floor)
}

/// Same as [`psd_sqrt_pair`] starting from an existing eigendecomposition.
pub fn psd_sqrt_from_eig(eig: &SymEig, eps_floor: f64) -> Result<PsdSqrt> {
    if !(eps_floor > 0.0) || !eps_floor.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "eigenvalue floor must be positive, got {eps_floor}"
        )));
    }
    let largest = eig.eigenvalues.first().copied().unwrap_or(0.0);
    if !(largest > 0.0) || largest < eps_floor {
        return Err(Error::ZeroMatrix);
    }
    let smallest = *eig.eigenvalues.last().expect("non-empty spectrum");
    if smallest < -PSD_NEGATIVE_TOL * largest {
        return Err(Error::NotPsd {
            eigenvalue: smallest,
            largest,
        });
    }
    Ok(PsdSqrt {
        sqrt: eig.map_spectrum(|l| l.max(0.0).sqrt()),
        inv_sqrt: eig.map_spectrum(|l| 1.0 / l.max(eps_floor).sqrt()),
    })
}

/// Uncentered second moment `(1/m)·X·Xᵀ` of the columns of `X`.
pub fn second_moment(x: &DenseMatrix) -> Result<DenseMatrix> {
    let m = x.cols();
    if m == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut c = x.gram();
    c.as_mut_slice().iter_mut().for_each(|v| *v /= m as f64);
    Ok(c)
}

/// Frobenius, spectral and trace (nuclear) norms.
pub fn norms(m: &DenseMatrix) -> Result<Norms> {
    let frobenius = m.frobenius_norm();
    if m.rows() == 0 || m.cols() == 0 {
        return Ok(Norms {
            frobenius,
            spectral: 0.0,
            trace_norm: 0.0,
        });
    }
    let svd = thin_svd(m)?;
    Ok(Norms {
        frobenius,
        spectral: svd.singular_values[0],
        trace_norm: svd.singular_values.iter().sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn random_psd(n: usize, rank: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        random(n, rank, rng).gram()
    }

    fn max_dev_from_identity(m: &DenseMatrix) -> f64 {
        let i = DenseMatrix::identity(m.rows());
        m.sub(&i).unwrap().max_abs()
    }

    fn rel_err(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm()
    }

    #[test]
    fn eig_diagonal_and_identity() {
        let e = sym_eig(&DenseMatrix::from_diag(&[3.0, 1.0]).unwrap()).unwrap();
        assert_eq!(e.eigenvalues, vec![3.0, 1.0]);
        assert_eq!(e.eigenvectors, DenseMatrix::identity(2));

        let e = sym_eig(&DenseMatrix::from_diag(&[1.0, 3.0]).unwrap()).unwrap();
        assert_eq!(e.eigenvalues, vec![3.0, 1.0]);
        assert_eq!(e.eigenvectors.column(0), vec![0.0, 1.0]);

        let e = sym_eig(&DenseMatrix::identity(5)).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0; 5]);
    }

    #[test]
    fn eig_two_by_two() {
        // (2-λ)² - 1 = 0 → λ ∈ {3, 1}; (1,1)/√2 and (1,-1)/√2.
        let m = DenseMatrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        let e = sym_eig(&m).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e.eigenvalues[0] - 3.0).abs() < 1e-14);
        assert!((e.eigenvalues[1] - 1.0).abs() < 1e-14);
        let v1 = e.eigenvectors.column(0);
        let v2 = e.eigenvectors.column(1);
        assert!((v1[0] - h).abs() < 1e-14 && (v1[1] - h).abs() < 1e-14);
        assert!((v2[0] - h).abs() < 1e-14 && (v2[1] + h).abs() < 1e-14);
    }

    #[test]
    fn eig_random_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [1, 2, 5, 17, 40] {
            let a = random(n, n, &mut rng);
            let m = a.add(&a.transpose()).unwrap();
            let e = sym_eig(&m).unwrap();
            assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
            let vtv = e.eigenvectors.t_matmul(&e.eigenvectors).unwrap();
            assert!(max_dev_from_identity(&vtv) < 1e-10);
            assert!(rel_err(&e.reconstruct(), &m) < 1e-8);
            let sum: f64 = e.eigenvalues.iter().sum();
            assert!((sum - m.trace()).abs() <= 1e-10 * m.frobenius_norm().max(1.0));
            for j in 0..n {
                let first = e.eigenvectors.column(j).into_iter().find(|x| x.abs() > SIGN_TOL).unwrap();
                assert!(first > 0.0);
            }
        }
    }

    #[test]
    fn eig_errors() {
        let m = DenseMatrix::zeros(2, 3);
        assert!(matches!(sym_eig(&m), Err(Error::NonSquare { .. })));
        let mut m = DenseMatrix::identity(2);
        m[(0, 1)] = f64::INFINITY;
        assert!(matches!(sym_eig(&m), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn svd_examples() {
        let s = thin_svd(&DenseMatrix::from_diag(&[2.0, 1.0]).unwrap()).unwrap();
        assert_eq!(s.singular_values, vec![2.0, 1.0]);
        assert_eq!(s.u, DenseMatrix::identity(2));
        assert_eq!(s.v, DenseMatrix::identity(2));

        // ‖u‖ = 2, ‖v‖ = 3
        let u = [2.0 / 3.0_f64.sqrt(); 3];
        let v = [1.5, 1.5, 1.5, 1.5];
        let outer = DenseMatrix::from_fn(3, 4, |i, j| u[i] * v[j]).unwrap();
        let s = thin_svd(&outer).unwrap();
        assert!((s.singular_values[0] - 6.0).abs() < 1e-12);
        assert!(s.singular_values[1..].iter().all(|&x| x < 1e-12));
        let utu = s.u.t_matmul(&s.u).unwrap();
        assert!(max_dev_from_identity(&utu) < 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (r, c) in [(4, 7), (7, 4), (9, 9), (1, 5)] {
            let m = random(r, c, &mut rng);
            let s = thin_svd(&m).unwrap();
            assert_eq!(s.singular_values.len(), r.min(c));
            assert!(rel_err(&s.reconstruct(), &m) < 1e-10);
            assert!(max_dev_from_identity(&s.u.t_matmul(&s.u).unwrap()) < 1e-10);
            assert!(max_dev_from_identity(&s.v.t_matmul(&s.v).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn svd_zero_matrix() {
        let s = thin_svd(&DenseMatrix::zeros(3, 2)).unwrap();
        assert_eq!(s.singular_values, vec![0.0, 0.0]);
        assert!(max_dev_from_identity(&s.u.t_matmul(&s.u).unwrap()) < 1e-15);
    }

    #[test]
    fn svd_square_low_rank_completes_u() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for rank in [1, 3, 13] {
            let a = random(14, rank, &mut rng);
            let m = a.matmul_t(&a).unwrap();
            let s = thin_svd(&m).unwrap();
            assert!(max_dev_from_identity(&s.u.t_matmul(&s.u).unwrap()) < 1e-12);
            assert!(rel_err(&s.reconstruct(), &m) < 1e-10);
        }
    }

    #[test]
    fn qr_examples() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let p = qr_orthonormal(&DenseMatrix::from_rows(&[[1.0], [1.0]]).unwrap()).unwrap();
        assert!((p[(0, 0)].abs() - h).abs() < 1e-15 && (p[(1, 0)] - p[(0, 0)]).abs() < 1e-15);

        let q = DenseMatrix::from_rows(&[[h, h], [h, -h], [0.0, 0.0]]).unwrap();
        let p = qr_orthonormal(&q).unwrap();
        for j in 0..2 {
            let d = dot(&p.column(j), &q.column(j));
            assert!((d.abs() - 1.0).abs() < 1e-14);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random(8, 3, &mut rng);
        let p = qr_orthonormal(&m).unwrap();
        assert!(max_dev_from_identity(&p.t_matmul(&p).unwrap()) < 1e-10);
        let proj = p.matmul(&p.t_matmul(&m).unwrap()).unwrap();
        assert!(proj.sub(&m).unwrap().frobenius_norm() < 1e-10);
    }

    #[test]
    fn qr_reports_rank() {
        let m = DenseMatrix::from_rows(&[[1.0, 2.0, 3.0], [0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [2.0, 2.0, 4.0]])
            .unwrap();
        match qr_orthonormal(&m) {
            Err(Error::RankDeficient { rank, required }) => assert_eq!((rank, required), (2, 3)),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
        assert!(matches!(
            qr_orthonormal(&DenseMatrix::zeros(2, 3)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn psd_sqrt_examples() {
        let r = psd_sqrt_pair(&DenseMatrix::from_diag(&[4.0, 9.0]).unwrap(), 1e-12).unwrap();
        assert_eq!(r.sqrt, DenseMatrix::from_diag(&[2.0, 3.0]).unwrap());
        assert_eq!(r.inv_sqrt, DenseMatrix::from_diag(&[0.5, 1.0 / 3.0]).unwrap());

        let r = psd_sqrt_pair(&DenseMatrix::identity(4), 1e-12).unwrap();
        assert_eq!(r.sqrt, DenseMatrix::identity(4));
        assert_eq!(r.inv_sqrt, DenseMatrix::identity(4));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_psd(6, 6, &mut rng);
        let r = psd_sqrt_pair(&m, 1e-12).unwrap();
        assert!(rel_err(&r.sqrt.matmul(&r.sqrt).unwrap(), &m) < 1e-10);
    }

    #[test]
    fn psd_sqrt_floor_and_errors() {
        // Rank-deficient input: the floor bounds the inverse square root.
        let r = psd_sqrt_pair(&DenseMatrix::from_diag(&[4.0, 0.0]).unwrap(), 1e-4).unwrap();
        assert_eq!(r.inv_sqrt, DenseMatrix::from_diag(&[0.5, 100.0]).unwrap());

        let m = DenseMatrix::from_rows(&[[1.0, 0.5], [0.0, 1.0]]).unwrap();
        assert!(matches!(psd_sqrt_pair(&m, 1e-12), Err(Error::NotSymmetric(_))));
        assert!(matches!(psd_sqrt_pair(&DenseMatrix::zeros(3, 3), 1e-12), Err(Error::ZeroMatrix)));
        let m = DenseMatrix::from_diag(&[1.0, -0.5]).unwrap();
        assert!(matches!(psd_sqrt_pair(&m, 1e-12), Err(Error::NotPsd { .. })));
        // Tiny negative eigenvalues are clamped.
        let m = DenseMatrix::from_diag(&[1.0, -1e-12]).unwrap();
        let r = psd_sqrt_pair(&m, 1e-12).unwrap();
        assert_eq!(r.sqrt[(1, 1)], 0.0);
    }

    #[test]
    fn second_moment_examples() {
        let x = DenseMatrix::identity(2);
        assert_eq!(second_moment(&x).unwrap(), DenseMatrix::from_diag(&[0.5, 0.5]).unwrap());
        let x = DenseMatrix::from_rows(&[[2.0], [0.0]]).unwrap();
        assert_eq!(second_moment(&x).unwrap(), DenseMatrix::from_diag(&[4.0, 0.0]).unwrap());
        assert!(matches!(second_moment(&DenseMatrix::zeros(3, 0)), Err(Error::EmptyDataset)));

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(5, 40, &mut rng);
        let mut naive = DenseMatrix::zeros(5, 5);
        for j in 0..40 {
            let col = x.column(j);
            for a in 0..5 {
                for b in 0..5 {
                    naive[(a, b)] += col[a] * col[b];
                }
            }
        }
        let naive = naive.scaled(1.0 / 40.0);
        let c = second_moment(&x).unwrap();
        assert!(c.sub(&naive).unwrap().max_abs() < 1e-12);
        assert_eq!(c.asymmetry(), 0.0);
        let e = sym_eig(&c).unwrap();
        assert!(*e.eigenvalues.last().unwrap() >= -1e-10 * e.eigenvalues[0]);
    }

    #[test]
    fn norm_examples() {
        let n = norms(&DenseMatrix::from_diag(&[3.0, 1.0]).unwrap()).unwrap();
        assert!((n.frobenius - 10f64.sqrt()).abs() < 1e-15);
        assert!((n.spectral - 3.0).abs() < 1e-14);
        assert!((n.trace_norm - 4.0).abs() < 1e-14);

        let n = norms(&DenseMatrix::zeros(3, 3)).unwrap();
        assert_eq!((n.frobenius, n.spectral, n.trace_norm), (0.0, 0.0, 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let m = random(3, 3, &mut rng);
            let n = norms(&m).unwrap();
            assert!(n.trace_norm >= n.spectral - 1e-12);
            assert!(n.spectral >= n.frobenius / 3f64.sqrt() - 1e-12);
        }
        // PSD input: trace norm equals trace, including rank-deficient cases.
        let psd = random_psd(8, 3, &mut rng);
        let n = norms(&psd).unwrap();
        assert!((n.trace_norm - psd.trace()).abs() <= 1e-10 * psd.trace());
    }
}

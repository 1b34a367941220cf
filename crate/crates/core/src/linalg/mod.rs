//! Self-contained dense linear algebra: symmetric eigendecomposition by
//! cyclic Jacobi rotations, a Gram-based thin SVD, rank-revealing
//! orthonormalization, PSD square roots and the data second-moment matrix.

mod decomp;
mod matrix;

pub use decomp::{
    norms, orthonormal_basis, psd_sqrt_from_eig, psd_sqrt_pair, qr_orthonormal, second_moment,
    sym_eig, thin_svd, Norms, PsdSqrt, SymEig, ThinSvd, PSD_NEGATIVE_TOL, SYMMETRY_TOL,
};
pub use matrix::{axpy, dot, norm2, DenseMatrix};

/// Allocation instrumentation for [`DenseMatrix`].
///
/// Records, per thread, the largest square matrix built since the last
/// [`probe::reset`]. Used to check that sketched preprocessing never forms an
/// `n x n` buffer.
pub mod probe {
    use std::cell::Cell;

    thread_local! {
        static PEAK_SQUARE: Cell<usize> = const { Cell::new(0) };
    }

    #[inline]
    pub(crate) fn record(rows: usize, cols: usize) {
        if rows == cols {
            PEAK_SQUARE.with(|p| {
                if rows > p.get() {
                    p.set(rows)
                }
            });
        }
    }

    pub fn reset() {
        PEAK_SQUARE.with(|p| p.set(0));
    }

    /// Dimension of the largest square matrix allocated on this thread.
    pub fn peak_square_dim() -> usize {
        PEAK_SQUARE.with(|p| p.get())
    }
}

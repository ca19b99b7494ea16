//! Thin wrapper over faer's sparse LU for the symmetric (but possibly
//! indefinite) tangent systems. Single-threaded and deterministic.

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};

use crate::error::{Error, Result};

/// A factorized sparse matrix ready to solve multiple right-hand sides.
pub struct SparseLu {
    n: usize,
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
}

impl SparseLu {
    /// Builds and factorizes an `n x n` matrix from triplets (duplicates are
    /// summed).
    pub fn factorize(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let trips: Vec<Triplet<usize, usize, f64>> = triplets
            .iter()
            .map(|&(r, c, v)| Triplet::new(r, c, v))
            .collect();
        let mat = SparseColMat::try_new_from_triplets(n, n, &trips)
            .map_err(|e| Error::LinearSolver(format!("triplet assembly failed: {e:?}")))?;
        let lu = mat
            .sp_lu()
            .map_err(|e| Error::LinearSolver(format!("LU factorization failed: {e:?}")))?;
        Ok(SparseLu { n, lu })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n, "rhs length mismatch");
        let rhs = faer::Mat::from_fn(self.n, 1, |i, _| b[i]);
        let x = self.lu.solve(&rhs);
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }

    /// Solves `A^T x = b`; for the symmetric tangents used here this equals
    /// [`SparseLu::solve`], but the adjoint path calls this entry point so the
    /// intent stays explicit.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n, "rhs length mismatch");
        let rhs = faer::Mat::from_fn(self.n, 1, |i, _| b[i]);
        let x = self.lu.solve_transpose(&rhs);
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }
}

/// Sparse matrix-vector product from triplets (duplicates accumulate), used
/// for residual certificates and full-tangent contractions without forming a
/// matrix type.
pub fn triplet_matvec(n_rows: usize, triplets: &[(usize, usize, f64)], x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n_rows];
    for &(r, c, v) in triplets {
        y[r] += v * x[c];
    }
    y
}

/// Same product with the transposed matrix.
pub fn triplet_matvec_transpose(
    n_cols: usize,
    triplets: &[(usize, usize, f64)],
    x: &[f64],
) -> Vec<f64> {
    let mut y = vec![0.0; n_cols];
    for &(r, c, v) in triplets {
        y[c] += v * x[r];
    }
    y
}

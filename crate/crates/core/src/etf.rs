//! Fixed simplex equiangular tight frame used as a scoring basis.
//!
//! The frame holds `K` unit vectors in `R^d` whose pairwise inner products
//! all equal `-1/(K-1)`. The first `K/2` rows span the known subspace and
//! the remaining rows the unknown subspace. Frames are never trained.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};

/// Returns a `k x d` matrix with orthonormal rows, derived from `seed`.
///
/// Rows of a standard-Gaussian matrix are orthonormalized with two passes of
/// modified Gram-Schmidt.
pub fn build_orthonormal_rows(seed: u64, k: usize, d: usize) -> Result<DMatrix<f64>> {
    if k == 0 {
        return Err(Error::invalid("number of rows must be positive"));
    }
    if d < k {
        return Err(Error::invalid(format!(
            "cannot fit {k} orthonormal rows in dimension {d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = DMatrix::<f64>::from_fn(k, d, |_, _| StandardNormal.sample(&mut rng));

    for i in 0..k {
        // Second pass removes the residual components left by rounding.
        for _ in 0..2 {
            for j in 0..i {
                let dot = q.row(i).dot(&q.row(j));
                let rj = q.row(j).clone_owned();
                let mut ri = q.row_mut(i);
                ri -= rj * dot;
            }
        }
        let norm = q.row(i).norm();
        if norm < 1e-12 {
            return Err(Error::invalid(
                "degenerate Gaussian draw during orthonormalization",
            ));
        }
        q.row_mut(i).scale_mut(1.0 / norm);
    }
    Ok(q)
}

#[derive(Debug, Clone)]
pub struct EtfFrame {
    basis: DMatrix<f64>,
    known_half: DMatrix<f64>,
    unknown_half: DMatrix<f64>,
    num_vectors: usize,
    feature_dim: usize,
    seed: u64,
}

/// Builds the simplex ETF `sqrt(K/(K-1)) (I - 11^T/K) Q`.
pub fn build_simplex_etf(k: usize, d: usize, seed: u64) -> Result<EtfFrame> {
    if k < 2 || !k.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "number of frame vectors must be even and at least 2, got {k}"
        )));
    }
    let q = build_orthonormal_rows(seed, k, d)?;
    let scale = (k as f64 / (k as f64 - 1.0)).sqrt();
    // (I - 11^T/K) Q subtracts the column means of Q from every row.
    let col_mean = q.row_mean();
    let mut basis = q;
    for mut row in basis.row_iter_mut() {
        row -= &col_mean;
        row *= scale;
    }
    let half = k / 2;
    let known_half = basis.rows(0, half).clone_owned();
    let unknown_half = basis.rows(half, half).clone_owned();
    Ok(EtfFrame {
        basis,
        known_half,
        unknown_half,
        num_vectors: k,
        feature_dim: d,
        seed,
    })
}

/// Splits a frame into its known and unknown halves.
pub fn split_subspaces(frame: &EtfFrame) -> (&DMatrix<f64>, &DMatrix<f64>) {
    (&frame.known_half, &frame.unknown_half)
}

impl EtfFrame {
    pub fn new(k: usize, d: usize, seed: u64) -> Result<Self> {
        build_simplex_etf(k, d, seed)
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn known_half(&self) -> &DMatrix<f64> {
        &self.known_half
    }

    pub fn unknown_half(&self) -> &DMatrix<f64> {
        &self.unknown_half
    }

    pub fn num_vectors(&self) -> usize {
        self.num_vectors
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Largest deviations of the Gram matrix from the ideal simplex values.
    pub fn gram_errors(&self) -> GramErrors {
        let gram = &self.basis * self.basis.transpose();
        let off_target = -1.0 / (self.num_vectors as f64 - 1.0);
        let mut max_diag_err = 0.0f64;
        let mut max_offdiag_err = 0.0f64;
        for i in 0..self.num_vectors {
            for j in 0..self.num_vectors {
                if i == j {
                    max_diag_err = max_diag_err.max((gram[(i, j)] - 1.0).abs());
                } else {
                    max_offdiag_err = max_offdiag_err.max((gram[(i, j)] - off_target).abs());
                }
            }
        }
        GramErrors {
            max_diag_err,
            max_offdiag_err,
        }
    }

    pub fn to_record(&self) -> FrameRecord {
        FrameRecord {
            k: self.num_vectors,
            d: self.feature_dim,
            seed: self.seed,
            basis: self
                .basis
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GramErrors {
    pub max_diag_err: f64,
    pub max_offdiag_err: f64,
}

/// Serialized form of a frame. `(k, d, seed)` reconstruct it; the basis is kept for audit.
#[derive(Debug, Clone, Serialize)]
pub struct FrameRecord {
    pub k: usize,
    pub d: usize,
    pub seed: u64,
    pub basis: Vec<Vec<f64>>,
}

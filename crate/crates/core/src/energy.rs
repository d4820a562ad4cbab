//! Free-energy quantities built on a numerically stable log-sum-exp.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{ensure_len, Error, Result};
use crate::etf::EtfFrame;

/// `log(sum(exp(v)))` with the max-shift trick.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("logsumexp of an empty slice"));
    }
    Ok(lse_unchecked(values))
}

pub(crate) fn lse_unchecked(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of `values`; the gradient of `logsumexp` with respect to its inputs.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Per-row projections `sub_basis * f`.
fn project(sub_basis: &DMatrix<f64>, f: &[f64]) -> Result<DVector<f64>> {
    ensure_len(sub_basis.ncols(), f.len())?;
    Ok(sub_basis * DVector::from_column_slice(f))
}

/// Helmholtz free energy `-logsumexp(sub_basis * f)` of a feature against one subspace.
pub fn subspace_energy(sub_basis: &DMatrix<f64>, f: &[f64]) -> Result<f64> {
    let proj = project(sub_basis, f)?;
    Ok(-logsumexp(proj.as_slice())?)
}

/// Subspace score (negated energy) and its gradient with respect to `f`.
pub fn subspace_score_with_grad(sub_basis: &DMatrix<f64>, f: &[f64]) -> Result<(f64, Vec<f64>)> {
    let proj = project(sub_basis, f)?;
    let score = logsumexp(proj.as_slice())?;
    let weights = DVector::from_vec(softmax(proj.as_slice()));
    let grad = sub_basis.tr_mul(&weights);
    Ok((score, grad.as_slice().to_vec()))
}

/// Known and unknown subspace scores of a proposal feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SubspaceScores {
    pub s_known: f64,
    pub s_unknown: f64,
}

impl SubspaceScores {
    pub fn new(s_known: f64, s_unknown: f64) -> Self {
        Self { s_known, s_unknown }
    }

    /// Unknown offset `s_unknown - s_known`.
    pub fn offset(&self) -> f64 {
        self.s_unknown - self.s_known
    }

    pub fn known_energy(&self) -> f64 {
        -self.s_known
    }

    pub fn unknown_energy(&self) -> f64 {
        -self.s_unknown
    }
}

/// Scores a raw (unnormalized) feature against both halves of the frame.
pub fn score_subspaces(frame: &EtfFrame, f: &[f64]) -> Result<SubspaceScores> {
    ensure_len(frame.feature_dim(), f.len())?;
    let s_known = -subspace_energy(frame.known_half(), f)?;
    let s_unknown = -subspace_energy(frame.unknown_half(), f)?;
    Ok(SubspaceScores::new(s_known, s_unknown))
}

/// Affinity of a proposal to one sub-classifier: `logsumexp` of that head's logits.
pub fn head_score(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::invalid("sub-classifier has no logits"));
    }
    logsumexp(logits)
}

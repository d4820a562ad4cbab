//! The toy detection head: an affine feature extractor followed by the
//! objectness, classification and box branches.
//!
//! Objectness reads the feature norm; classification and box regression read
//! the unit feature. Box outputs are offsets, in units of
//! [`BOX_OFFSET_SCALE`], added to the proposal box.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::energy::{lse_unchecked, sigmoid, softplus, SubspaceScores};
use crate::error::{ensure_len, Error, Result};
use crate::etf::EtfFrame;
use crate::losses::{HeadSplit, MatchStatus};

/// Probability clamp applied before converting joint probabilities to logits.
pub const PROB_EPS: f64 = 1e-7;
/// Below this spread the per-image calibration term is dropped.
pub const CALIBRATION_EPS: f64 = 1e-8;
/// Scale of the Gaussian used for freshly added classifier rows.
pub const NEW_ROW_SCALE: f64 = 1e-3;
/// Box regression outputs are normalized offsets; this converts them to image units.
pub const BOX_OFFSET_SCALE: f64 = 0.1;
/// Initial objectness probability. Starting low keeps the weak background
/// gradients of the joint focal loss from leaving every proposal object-like.
pub const OBJ_PRIOR: f64 = 0.01;
/// Fixed temperature of the classifier over the unit feature. Without it the
/// logits of a unit-norm input move too slowly at the default learning rate.
pub const CLS_LOGIT_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskOrigin {
    Previous,
    Current,
}

/// Learnable head parameters. The same layout stores gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `d x d_obs` feature map weights.
    pub feat_w: DMatrix<f64>,
    pub feat_b: DVector<f64>,
    /// `(C + 1) x d`; the last row is the unknown node.
    pub cls_w: DMatrix<f64>,
    pub cls_b: DVector<f64>,
    pub obj_w: f64,
    pub obj_b: f64,
    /// `4 x d` box-offset weights over the unit feature.
    pub box_w: DMatrix<f64>,
    pub box_b: DVector<f64>,
    /// Leading known nodes owned by the previous-task sub-classifier.
    pub num_prev: usize,
}

fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        v * scale
    })
}

impl HeadParams {
    pub fn init<R: Rng>(
        rng: &mut R,
        obs_dim: usize,
        feature_dim: usize,
        num_known: usize,
    ) -> Result<Self> {
        if obs_dim == 0 || feature_dim == 0 || num_known == 0 {
            return Err(Error::invalid("head dimensions must be positive"));
        }
        let feat_w = gaussian(rng, feature_dim, obs_dim, 1.0 / (obs_dim as f64).sqrt());
        let cls_w = gaussian(rng, num_known + 1, feature_dim, NEW_ROW_SCALE);
        Ok(Self {
            feat_w,
            feat_b: DVector::zeros(feature_dim),
            cls_w,
            cls_b: DVector::zeros(num_known + 1),
            obj_w: 0.0,
            obj_b: -((1.0 - OBJ_PRIOR) / OBJ_PRIOR).ln(),
            box_w: DMatrix::zeros(4, feature_dim),
            box_b: DVector::zeros(4),
            num_prev: 0,
        })
    }

    pub fn num_known(&self) -> usize {
        self.cls_w.nrows() - 1
    }

    pub fn unknown_index(&self) -> usize {
        self.num_known()
    }

    pub fn feature_dim(&self) -> usize {
        self.feat_w.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.feat_w.ncols()
    }

    pub fn split(&self) -> HeadSplit {
        HeadSplit {
            num_prev: self.num_prev,
            num_known: self.num_known(),
        }
    }

    /// Adds `new_classes` known nodes in front of the unknown node. The classes
    /// known so far become the previous-task sub-classifier.
    pub fn grow<R: Rng>(&mut self, rng: &mut R, new_classes: usize) {
        let old = self.num_known();
        let d = self.feature_dim();
        let rows = gaussian(rng, new_classes, d, NEW_ROW_SCALE);
        let mut cls_w = self.cls_w.clone().insert_rows(old, new_classes, 0.0);
        cls_w.rows_mut(old, new_classes).copy_from(&rows);
        self.cls_w = cls_w;
        self.cls_b = self.cls_b.clone().insert_rows(old, new_classes, 0.0);
        self.num_prev = old;
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            feat_w: DMatrix::zeros(self.feat_w.nrows(), self.feat_w.ncols()),
            feat_b: DVector::zeros(self.feat_b.len()),
            cls_w: DMatrix::zeros(self.cls_w.nrows(), self.cls_w.ncols()),
            cls_b: DVector::zeros(self.cls_b.len()),
            obj_w: 0.0,
            obj_b: 0.0,
            box_w: DMatrix::zeros(4, self.box_w.ncols()),
            box_b: DVector::zeros(4),
            num_prev: self.num_prev,
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &HeadParams) {
        self.feat_w += &other.feat_w * alpha;
        self.feat_b.axpy(alpha, &other.feat_b, 1.0);
        self.cls_w += &other.cls_w * alpha;
        self.cls_b.axpy(alpha, &other.cls_b, 1.0);
        self.obj_w += alpha * other.obj_w;
        self.obj_b += alpha * other.obj_b;
        self.box_w += &other.box_w * alpha;
        self.box_b.axpy(alpha, &other.box_b, 1.0);
    }

    pub fn num_params(&self) -> usize {
        self.flatten().len()
    }

    /// All tensors concatenated in a fixed order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.feat_w.as_slice());
        out.extend_from_slice(self.feat_b.as_slice());
        out.extend_from_slice(self.cls_w.as_slice());
        out.extend_from_slice(self.cls_b.as_slice());
        out.push(self.obj_w);
        out.push(self.obj_b);
        out.extend_from_slice(self.box_w.as_slice());
        out.extend_from_slice(self.box_b.as_slice());
        out
    }

    /// Inverse of [`HeadParams::flatten`] for a tensor of this shape.
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        ensure_len(self.num_params(), values.len())?;
        let mut at = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&values[at..at + dst.len()]);
            at += dst.len();
        };
        take(self.feat_w.as_mut_slice());
        take(self.feat_b.as_mut_slice());
        take(self.cls_w.as_mut_slice());
        take(self.cls_b.as_mut_slice());
        let mut scalar = [0.0; 2];
        take(&mut scalar);
        self.obj_w = scalar[0];
        self.obj_b = scalar[1];
        take(self.box_w.as_mut_slice());
        take(self.box_b.as_mut_slice());
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// Branch outputs for a single proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub feature: Vec<f64>,
    pub z_obj: f64,
    pub z_cls: Vec<f64>,
    pub z_bbox: [f64; 4],
}

/// Runs the head on one raw observation.
pub fn forward(params: &HeadParams, raw: &[f64]) -> Result<HeadOutput> {
    let x = DMatrix::from_row_slice(1, raw.len(), raw);
    let fwd = forward_batch(params, &x)?;
    Ok(HeadOutput {
        feature: fwd.features.row(0).iter().copied().collect(),
        z_obj: fwd.z_obj[0],
        z_cls: fwd.z_cls.row(0).iter().copied().collect(),
        z_bbox: [
            fwd.z_bbox[(0, 0)],
            fwd.z_bbox[(0, 1)],
            fwd.z_bbox[(0, 2)],
            fwd.z_bbox[(0, 3)],
        ],
    })
}

/// Row-per-proposal branch outputs for a batch.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub features: DMatrix<f64>,
    pub norms: Vec<f64>,
    /// Unit-normalized features; zero rows where the feature is zero.
    pub unit: DMatrix<f64>,
    pub z_cls: DMatrix<f64>,
    pub z_obj: Vec<f64>,
    pub z_bbox: DMatrix<f64>,
}

pub fn forward_batch(params: &HeadParams, observations: &DMatrix<f64>) -> Result<BatchForward> {
    ensure_len(params.obs_dim(), observations.ncols())?;
    let n = observations.nrows();
    let mut features = observations * params.feat_w.transpose();
    for mut row in features.row_iter_mut() {
        row += params.feat_b.transpose();
    }
    let norms: Vec<f64> = features.row_iter().map(|r| r.norm()).collect();
    let mut unit = features.clone();
    for (i, mut row) in unit.row_iter_mut().enumerate() {
        if norms[i] > 0.0 {
            row /= norms[i];
        } else {
            row.fill(0.0);
        }
    }
    let mut z_cls = &unit * params.cls_w.transpose() * CLS_LOGIT_SCALE;
    for mut row in z_cls.row_iter_mut() {
        row += params.cls_b.transpose();
    }
    let z_obj = norms
        .iter()
        .map(|r| params.obj_w * r + params.obj_b)
        .collect();
    let mut z_bbox = &unit * params.box_w.transpose();
    for mut row in z_bbox.row_iter_mut() {
        row += params.box_b.transpose();
    }
    debug_assert_eq!(z_cls.nrows(), n);
    Ok(BatchForward {
        features,
        norms,
        unit,
        z_cls,
        z_obj,
        z_bbox,
    })
}

impl BatchForward {
    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn z_cls_row(&self, i: usize) -> Vec<f64> {
        self.z_cls.row(i).iter().copied().collect()
    }

    pub fn feature_row(&self, i: usize) -> Vec<f64> {
        self.features.row(i).iter().copied().collect()
    }

    /// Proposal box shifted by the regressed offsets.
    pub fn predicted_box(&self, i: usize, proposal: &BBox) -> BBox {
        let delta: Vec<f64> = self
            .z_bbox
            .row(i)
            .iter()
            .map(|v| v * BOX_OFFSET_SCALE)
            .collect();
        proposal.shifted(&delta)
    }

    pub fn subspace_scores(&self, frame: &EtfFrame) -> Result<Vec<SubspaceScores>> {
        ensure_len(frame.feature_dim(), self.features.ncols())?;
        let pk = &self.features * frame.known_half().transpose();
        let pu = &self.features * frame.unknown_half().transpose();
        Ok((0..self.len())
            .map(|i| {
                let k: Vec<f64> = pk.row(i).iter().copied().collect();
                let u: Vec<f64> = pu.row(i).iter().copied().collect();
                SubspaceScores::new(lse_unchecked(&k), lse_unchecked(&u))
            })
            .collect())
    }

    /// Raw unknown logit `logsumexp` over the known nodes of each proposal.
    pub fn unknown_logits(&self) -> Vec<f64> {
        let c = self.z_cls.ncols() - 1;
        (0..self.len())
            .map(|i| {
                let row: Vec<f64> = self.z_cls.row(i).columns(0, c).iter().copied().collect();
                lse_unchecked(&row)
            })
            .collect()
    }
}

fn log_softmax(values: &[f64]) -> Vec<f64> {
    let lse = lse_unchecked(values);
    values.iter().map(|v| v - lse).collect()
}

/// Joint probabilities `softmax(z_cls) * sigmoid(z_obj)`.
pub fn joint_probabilities(z_cls: &[f64], z_obj: f64) -> Vec<f64> {
    let log_obj = -softplus(-z_obj);
    log_softmax(z_cls)
        .iter()
        .map(|l| (l + log_obj).exp())
        .collect()
}

/// Joint logits with the cached quantities their backward pass needs.
#[derive(Debug, Clone)]
pub struct JointLogits {
    pub logits: Vec<f64>,
    softmax: Vec<f64>,
    objectness: f64,
    probs: Vec<f64>,
    clamped: Vec<bool>,
}

impl JointLogits {
    /// Maps `dL/dz_jt` to `(dL/dz_cls, dL/dz_obj)`. Clamped entries pass no gradient.
    pub fn backward(&self, g_jt: &[f64]) -> (Vec<f64>, f64) {
        let q: Vec<f64> = g_jt
            .iter()
            .zip(&self.probs)
            .zip(&self.clamped)
            .map(|((g, p), &c)| if c { 0.0 } else { g / (1.0 - p) })
            .collect();
        let q_sum: f64 = q.iter().sum();
        let g_cls = q
            .iter()
            .zip(&self.softmax)
            .map(|(qk, sk)| qk - sk * q_sum)
            .collect();
        (g_cls, (1.0 - self.objectness) * q_sum)
    }
}

/// Converts branch outputs to clamped joint logits `log(p / (1 - p))`.
pub fn joint_logits(z_cls: &[f64], z_obj: f64) -> Vec<f64> {
    joint_logits_with_grad(z_cls, z_obj).1.logits
}

pub fn joint_logits_with_grad(z_cls: &[f64], z_obj: f64) -> (Vec<f64>, JointLogits) {
    let ls = log_softmax(z_cls);
    let log_obj = -softplus(-z_obj);
    let mut logits = Vec::with_capacity(z_cls.len());
    let mut probs = Vec::with_capacity(z_cls.len());
    let mut clamped = Vec::with_capacity(z_cls.len());
    for l in &ls {
        let log_p = l + log_obj;
        let p = log_p.exp();
        if p < PROB_EPS {
            logits.push(PROB_EPS.ln() - (-PROB_EPS).ln_1p());
            clamped.push(true);
        } else if p > 1.0 - PROB_EPS {
            logits.push((1.0 - PROB_EPS).ln() - PROB_EPS.ln());
            clamped.push(true);
        } else {
            logits.push(log_p - (-p).ln_1p());
            clamped.push(false);
        }
        probs.push(p);
    }
    let softmax = ls.iter().map(|l| l.exp()).collect();
    let out = JointLogits {
        logits,
        softmax,
        objectness: sigmoid(z_obj),
        probs: probs.clone(),
        clamped,
    };
    (probs, out)
}

/// Energy-style unknown logit over the known-class logits.
pub fn unknown_logit(z_cls_known: &[f64]) -> Result<f64> {
    if z_cls_known.is_empty() {
        return Err(Error::invalid("no known-class logits"));
    }
    Ok(lse_unchecked(z_cls_known))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-image calibration `z_u + std(z_u) * standardize(offsets)`.
///
/// Both inputs cover every proposal of one image. Population statistics are
/// used; a spread below [`CALIBRATION_EPS`] in either input disables the term.
pub fn calibrate_unknown(z_u: &[f64], offsets: &[f64]) -> Result<Vec<f64>> {
    ensure_len(z_u.len(), offsets.len())?;
    if z_u.is_empty() {
        return Ok(Vec::new());
    }
    let (mu_d, sd_d) = mean_std(offsets);
    let (_, sd_z) = mean_std(z_u);
    if sd_d < CALIBRATION_EPS || sd_z < CALIBRATION_EPS {
        return Ok(z_u.to_vec());
    }
    Ok(z_u
        .iter()
        .zip(offsets)
        .map(|(z, d)| z + sd_z * (d - mu_d) / sd_d)
        .collect())
}

/// Proposals of one scene prepared for a training step.
#[derive(Debug, Clone)]
pub struct ProposalBatch {
    /// One raw observation per row.
    pub observations: DMatrix<f64>,
    pub boxes: Vec<BBox>,
    pub statuses: Vec<MatchStatus>,
    pub gt_boxes: Vec<Option<BBox>>,
    pub origins: Vec<Option<TaskOrigin>>,
}

impl ProposalBatch {
    /// A batch with every proposal provisionally background.
    pub fn new(observations: DMatrix<f64>, boxes: Vec<BBox>) -> Result<Self> {
        ensure_len(observations.nrows(), boxes.len())?;
        let n = boxes.len();
        Ok(Self {
            observations,
            boxes,
            statuses: vec![MatchStatus::Background; n],
            gt_boxes: vec![None; n],
            origins: vec![None; n],
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        let n = self.len();
        ensure_len(n, self.observations.nrows())?;
        ensure_len(n, self.statuses.len())?;
        ensure_len(n, self.gt_boxes.len())?;
        ensure_len(n, self.origins.len())?;
        for b in &self.boxes {
            b.validate()?;
        }
        Ok(())
    }

    /// Tags matched proposals with the sub-classifier owning their class.
    pub fn assign_origins(&mut self, split: HeadSplit) {
        for (status, origin) in self.statuses.iter().zip(self.origins.iter_mut()) {
            *origin = match status {
                MatchStatus::GtMatched(c) if *c < split.num_prev => Some(TaskOrigin::Previous),
                MatchStatus::GtMatched(_) => Some(TaskOrigin::Current),
                _ => None,
            };
        }
    }
}

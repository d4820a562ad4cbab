//! Training losses with hand-derived gradients.
//!
//! Every loss has a value-only entry point and a `*_with_grad` twin used by
//! the trainer. [`total_loss`] combines them over a [`ProposalBatch`] and
//! backpropagates into every [`HeadParams`] tensor.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bbox::{giou_with_grad, BBox};
use crate::energy::{lse_unchecked, sigmoid, softmax, softplus, SubspaceScores};
use crate::error::{ensure_len, Error, Result};
use crate::etf::EtfFrame;
use crate::head::{
    forward_batch, joint_logits_with_grad, HeadParams, ProposalBatch, TaskOrigin, BOX_OFFSET_SCALE,
    CLS_LOGIT_SCALE,
};

/// Training role of a proposal for one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchStatus {
    GtMatched(usize),
    PseudoUnknown,
    Background,
}

impl MatchStatus {
    /// Target over `[s_known, s_unknown]`.
    pub fn subspace_target(&self) -> [f64; 2] {
        match self {
            MatchStatus::GtMatched(_) => [1.0, 0.0],
            MatchStatus::PseudoUnknown => [0.0, 1.0],
            MatchStatus::Background => [0.0, 0.0],
        }
    }

    pub fn is_background(&self) -> bool {
        matches!(self, MatchStatus::Background)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_cls: f64,
    pub w_l1: f64,
    pub w_giou: f64,
    pub w_eus: f64,
    pub w_ekd: f64,
    pub margin: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_cls: 2.0,
            w_l1: 5.0,
            w_giou: 2.0,
            w_eus: 1.0,
            w_ekd: 1.0,
            margin: 0.5,
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w_cls,
            self.w_l1,
            self.w_giou,
            self.w_eus,
            self.w_ekd,
            self.margin,
            self.alpha,
            self.gamma,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if self.margin <= 0.0 {
            return Err(Error::Config("energy margin must be positive".into()));
        }
        Ok(())
    }
}

fn focal_entry(logit: f64, target: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    if target == 1.0 {
        let log_p = -softplus(-logit);
        let w = (1.0 - p).powf(gamma);
        let loss = -alpha * w * log_p;
        let grad = alpha * w * (gamma * p * log_p - (1.0 - p));
        (loss, grad)
    } else {
        let log_q = -softplus(logit);
        let w = p.powf(gamma);
        let loss = -(1.0 - alpha) * w * log_q;
        let grad = (1.0 - alpha) * w * (p - gamma * (1.0 - p) * log_q);
        (loss, grad)
    }
}

fn check_binary(targets: &[f64]) -> Result<()> {
    if targets.iter().any(|t| *t != 0.0 && *t != 1.0) {
        return Err(Error::invalid("focal targets must be 0 or 1"));
    }
    Ok(())
}

/// Sigmoid focal loss summed over entries.
pub fn sigmoid_focal_loss(logits: &[f64], targets: &[f64], alpha: f64, gamma: f64) -> Result<f64> {
    Ok(sigmoid_focal_loss_with_grad(logits, targets, alpha, gamma)?.0)
}

pub fn sigmoid_focal_loss_with_grad(
    logits: &[f64],
    targets: &[f64],
    alpha: f64,
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    ensure_len(logits.len(), targets.len())?;
    check_binary(targets)?;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &t) in logits.iter().zip(targets) {
        let (l, g) = focal_entry(z, t, alpha, gamma);
        total += l;
        grad.push(g);
    }
    Ok((total, grad))
}

/// Squared hinge on the unknown offset, averaged over all proposals.
pub fn energy_margin_loss(offsets: &[f64], statuses: &[MatchStatus], margin: f64) -> Result<f64> {
    Ok(energy_margin_loss_with_grad(offsets, statuses, margin)?.0)
}

pub fn energy_margin_loss_with_grad(
    offsets: &[f64],
    statuses: &[MatchStatus],
    margin: f64,
) -> Result<(f64, Vec<f64>)> {
    ensure_len(offsets.len(), statuses.len())?;
    let n = offsets.len();
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; n];
    for (i, (&delta, status)) in offsets.iter().zip(statuses).enumerate() {
        match status {
            MatchStatus::GtMatched(_) => {
                let h = (margin + delta).max(0.0);
                total += h * h;
                grad[i] = 2.0 * h * inv;
            }
            MatchStatus::PseudoUnknown => {
                let h = (margin - delta).max(0.0);
                total += h * h;
                grad[i] = -2.0 * h * inv;
            }
            MatchStatus::Background => {}
        }
    }
    Ok((total * inv, grad))
}

/// Focal loss on `[s_known, s_unknown]`, averaged over proposals.
pub fn subspace_focal_loss(
    scores: &[SubspaceScores],
    statuses: &[MatchStatus],
    alpha: f64,
    gamma: f64,
) -> Result<f64> {
    Ok(subspace_focal_loss_with_grad(scores, statuses, alpha, gamma)?.0)
}

/// Returns the loss and, per proposal, `(dL/ds_known, dL/ds_unknown)`.
pub fn subspace_focal_loss_with_grad(
    scores: &[SubspaceScores],
    statuses: &[MatchStatus],
    alpha: f64,
    gamma: f64,
) -> Result<(f64, Vec<[f64; 2]>)> {
    ensure_len(scores.len(), statuses.len())?;
    let n = scores.len();
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (s, status) in scores.iter().zip(statuses) {
        let t = status.subspace_target();
        let (lk, gk) = focal_entry(s.s_known, t[0], alpha, gamma);
        let (lu, gu) = focal_entry(s.s_unknown, t[1], alpha, gamma);
        total += lk + lu;
        grad.push([gk * inv, gu * inv]);
    }
    Ok((total * inv, grad))
}

/// The two EUS terms, kept apart for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EusTerms {
    pub energy: f64,
    pub subspace: f64,
}

impl EusTerms {
    pub fn total(&self) -> f64 {
        self.energy + self.subspace
    }
}

pub fn eus_terms(
    scores: &[SubspaceScores],
    statuses: &[MatchStatus],
    margin: f64,
    alpha: f64,
    gamma: f64,
) -> Result<EusTerms> {
    let offsets: Vec<f64> = scores.iter().map(SubspaceScores::offset).collect();
    Ok(EusTerms {
        energy: energy_margin_loss(&offsets, statuses, margin)?,
        subspace: subspace_focal_loss(scores, statuses, alpha, gamma)?,
    })
}

/// EUS loss of a batch: its features are scored against `frame` with the current params.
pub fn eus_loss(
    batch: &ProposalBatch,
    params: &HeadParams,
    frame: &EtfFrame,
    margin: f64,
    alpha: f64,
    gamma: f64,
) -> Result<f64> {
    let fwd = forward_batch(params, &batch.observations)?;
    let scores = fwd.subspace_scores(frame)?;
    Ok(eus_terms(&scores, &batch.statuses, margin, alpha, gamma)?.total())
}

/// Head affinities `(S(f; H_prev), S(f; H_curr))` for one proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadPair {
    pub prev: f64,
    pub curr: f64,
}

/// Pairwise softplus loss separating previous-task and current-task proposals.
///
/// Each side is mean-reduced; an empty side contributes 0.
pub fn ekd_loss_from_scores(prev: &[HeadPair], curr: &[HeadPair]) -> f64 {
    ekd_loss_from_scores_with_grad(prev, curr).0
}

/// Gradients are `(dL/dS_prev, dL/dS_curr)` per proposal, previous side first.
pub fn ekd_loss_from_scores_with_grad(
    prev: &[HeadPair],
    curr: &[HeadPair],
) -> (f64, Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let mut total = 0.0;
    let mut g_prev = Vec::with_capacity(prev.len());
    let mut g_curr = Vec::with_capacity(curr.len());
    if !prev.is_empty() {
        let inv = 1.0 / prev.len() as f64;
        let mut side = 0.0;
        for p in prev {
            let u = p.curr - p.prev;
            side += softplus(u);
            let s = sigmoid(u) * inv;
            g_prev.push([-s, s]);
        }
        total += side * inv;
    }
    if !curr.is_empty() {
        let inv = 1.0 / curr.len() as f64;
        let mut side = 0.0;
        for p in curr {
            let u = p.prev - p.curr;
            side += softplus(u);
            let s = sigmoid(u) * inv;
            g_curr.push([s, -s]);
        }
        total += side * inv;
    }
    (total, g_prev, g_curr)
}

/// Class-node ranges of the two known sub-classifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSplit {
    pub num_prev: usize,
    pub num_known: usize,
}

impl HeadSplit {
    pub fn prev_range(&self) -> std::ops::Range<usize> {
        0..self.num_prev
    }

    pub fn curr_range(&self) -> std::ops::Range<usize> {
        self.num_prev..self.num_known
    }

    fn pair(&self, logits: &[f64]) -> Result<HeadPair> {
        if self.num_prev == 0 || self.num_prev >= self.num_known {
            return Err(Error::invalid(
                "both sub-classifiers need at least one class",
            ));
        }
        if logits.len() < self.num_known {
            return Err(Error::DimensionMismatch {
                expected: self.num_known,
                actual: logits.len(),
            });
        }
        Ok(HeadPair {
            prev: lse_unchecked(&logits[self.prev_range()]),
            curr: lse_unchecked(&logits[self.curr_range()]),
        })
    }
}

/// One gradient row per proposal, over its classification logits.
pub type LogitGrads = Vec<Vec<f64>>;

/// EKD loss from classification logits.
///
/// Returns the loss and the gradient with respect to each proposal's logits
/// (previous-task proposals first, then current-task ones).
pub fn ekd_loss_with_grad(
    prev_logits: &[Vec<f64>],
    curr_logits: &[Vec<f64>],
    split: HeadSplit,
) -> Result<(f64, LogitGrads, LogitGrads)> {
    let prev: Vec<HeadPair> = prev_logits
        .iter()
        .map(|z| split.pair(z))
        .collect::<Result<_>>()?;
    let curr: Vec<HeadPair> = curr_logits
        .iter()
        .map(|z| split.pair(z))
        .collect::<Result<_>>()?;
    let (loss, gp, gc) = ekd_loss_from_scores_with_grad(&prev, &curr);
    let expand = |logits: &[Vec<f64>], g: &[[f64; 2]]| -> Vec<Vec<f64>> {
        logits
            .iter()
            .zip(g)
            .map(|(z, g)| {
                let mut out = vec![0.0; z.len()];
                let wp = softmax(&z[split.prev_range()]);
                let wc = softmax(&z[split.curr_range()]);
                for (k, w) in split.prev_range().zip(wp) {
                    out[k] = g[0] * w;
                }
                for (k, w) in split.curr_range().zip(wc) {
                    out[k] = g[1] * w;
                }
                out
            })
            .collect()
    };
    Ok((loss, expand(prev_logits, &gp), expand(curr_logits, &gc)))
}

pub fn ekd_loss(
    prev_logits: &[Vec<f64>],
    curr_logits: &[Vec<f64>],
    split: HeadSplit,
) -> Result<f64> {
    Ok(ekd_loss_with_grad(prev_logits, curr_logits, split)?.0)
}

/// Sum of absolute coordinate differences.
pub fn l1_box_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    Ok(l1_box_loss_with_grad(pred, gt)?.0)
}

pub fn l1_box_loss_with_grad(pred: &BBox, gt: &BBox) -> Result<(f64, [f64; 4])> {
    gt.validate()?;
    let mut total = 0.0;
    let mut grad = [0.0; 4];
    for (c, g) in grad.iter_mut().enumerate() {
        let diff = pred.0[c] - gt.0[c];
        total += diff.abs();
        *g = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    Ok((total, grad))
}

/// `1 - gIoU(pred, gt)`.
pub fn giou_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    Ok(giou_loss_with_grad(pred, gt)?.0)
}

pub fn giou_loss_with_grad(pred: &BBox, gt: &BBox) -> Result<(f64, [f64; 4])> {
    gt.validate()?;
    let (g, grad) = giou_with_grad(pred, gt);
    Ok((1.0 - g, grad.map(|v| -v)))
}

/// Unweighted value of every term plus the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub energy: f64,
    pub subspace: f64,
    pub ekd: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.cls,
            self.l1,
            self.giou,
            self.energy,
            self.subspace,
            self.ekd,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Focal classification targets over the `C + 1` nodes.
pub fn classification_target(status: MatchStatus, num_known: usize) -> Result<Vec<f64>> {
    let mut t = vec![0.0; num_known + 1];
    match status {
        MatchStatus::GtMatched(c) => {
            if c >= num_known {
                return Err(Error::invalid(format!(
                    "class {c} is outside the {num_known} known classes"
                )));
            }
            t[c] = 1.0;
        }
        MatchStatus::PseudoUnknown => t[num_known] = 1.0,
        MatchStatus::Background => {}
    }
    Ok(t)
}

/// Full training objective and its gradient with respect to every head tensor.
///
/// The EKD term is only evaluated when `replay_active` is set. Terms with a
/// zero weight are still reported in the breakdown but contribute no gradient.
pub fn total_loss(
    batch: &ProposalBatch,
    frame: &EtfFrame,
    params: &HeadParams,
    weights: &LossWeights,
    replay_active: bool,
) -> Result<(LossBreakdown, HeadParams)> {
    batch.check()?;
    let n = batch.len();
    let num_known = params.num_known();
    let nodes = num_known + 1;
    let d = params.feature_dim();
    let mut grads = params.zeros_like();
    let mut out = LossBreakdown::default();
    if n == 0 {
        return Ok((out, grads));
    }

    let fwd = forward_batch(params, &batch.observations)?;

    let mut g_zcls = DMatrix::<f64>::zeros(n, nodes);
    let mut g_obj = vec![0.0; n];
    let mut g_box = DMatrix::<f64>::zeros(n, 4);
    let mut g_f = DMatrix::<f64>::zeros(n, d);

    // Classification on joint logits, summed over nodes and averaged over proposals.
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let z_cls: Vec<f64> = fwd.z_cls.row(i).iter().copied().collect();
        let (_, jt) = joint_logits_with_grad(&z_cls, fwd.z_obj[i]);
        let target = classification_target(batch.statuses[i], num_known)?;
        let (l, g_jt) =
            sigmoid_focal_loss_with_grad(&jt.logits, &target, weights.alpha, weights.gamma)?;
        out.cls += l * inv_n;
        let scale = weights.w_cls * inv_n;
        if scale != 0.0 {
            let (gz, go) = jt.backward(&g_jt);
            for k in 0..nodes {
                g_zcls[(i, k)] += scale * gz[k];
            }
            g_obj[i] += scale * go;
        }
    }

    // Box regression on ground-truth matched proposals.
    let matched: Vec<usize> = (0..n)
        .filter(|&i| matches!(batch.statuses[i], MatchStatus::GtMatched(_)))
        .collect();
    if !matched.is_empty() {
        let inv_m = 1.0 / matched.len() as f64;
        for &i in &matched {
            let gt = batch.gt_boxes[i]
                .ok_or_else(|| Error::invalid("matched proposal without a ground-truth box"))?;
            let pred = fwd.predicted_box(i, &batch.boxes[i]);
            let (l1, g1) = l1_box_loss_with_grad(&pred, &gt)?;
            let (lg, gg) = giou_loss_with_grad(&pred, &gt)?;
            out.l1 += l1 * inv_m;
            out.giou += lg * inv_m;
            for c in 0..4 {
                g_box[(i, c)] +=
                    BOX_OFFSET_SCALE * inv_m * (weights.w_l1 * g1[c] + weights.w_giou * gg[c]);
            }
        }
    }

    // Subspace energies on the raw feature.
    let proj_k = &fwd.features * frame.known_half().transpose();
    let proj_u = &fwd.features * frame.unknown_half().transpose();
    let half = proj_k.ncols();
    let mut scores = Vec::with_capacity(n);
    let mut soft_k = DMatrix::<f64>::zeros(n, half);
    let mut soft_u = DMatrix::<f64>::zeros(n, half);
    for i in 0..n {
        let pk: Vec<f64> = proj_k.row(i).iter().copied().collect();
        let pu: Vec<f64> = proj_u.row(i).iter().copied().collect();
        scores.push(SubspaceScores::new(lse_unchecked(&pk), lse_unchecked(&pu)));
        for (j, w) in softmax(&pk).into_iter().enumerate() {
            soft_k[(i, j)] = w;
        }
        for (j, w) in softmax(&pu).into_iter().enumerate() {
            soft_u[(i, j)] = w;
        }
    }
    let offsets: Vec<f64> = scores.iter().map(SubspaceScores::offset).collect();
    let (energy, g_delta) =
        energy_margin_loss_with_grad(&offsets, &batch.statuses, weights.margin)?;
    let (subspace, g_sub) =
        subspace_focal_loss_with_grad(&scores, &batch.statuses, weights.alpha, weights.gamma)?;
    out.energy = energy;
    out.subspace = subspace;
    if weights.w_eus != 0.0 {
        for i in 0..n {
            let g_sk = weights.w_eus * (g_sub[i][0] - g_delta[i]);
            let g_su = weights.w_eus * (g_sub[i][1] + g_delta[i]);
            soft_k.row_mut(i).scale_mut(g_sk);
            soft_u.row_mut(i).scale_mut(g_su);
        }
        g_f += &soft_k * frame.known_half() + &soft_u * frame.unknown_half();
    }

    // Sub-classifier distinction, only while replaying.
    if replay_active {
        let split = params.split();
        let mut prev_idx = Vec::new();
        let mut curr_idx = Vec::new();
        for i in 0..n {
            match batch.origins[i] {
                Some(TaskOrigin::Previous) => prev_idx.push(i),
                Some(TaskOrigin::Current) => curr_idx.push(i),
                None => {}
            }
        }
        if !(prev_idx.is_empty() && curr_idx.is_empty()) {
            let rows = |idx: &[usize]| -> Vec<Vec<f64>> {
                idx.iter()
                    .map(|&i| fwd.z_cls.row(i).iter().copied().collect())
                    .collect()
            };
            let (ekd, gp, gc) = ekd_loss_with_grad(&rows(&prev_idx), &rows(&curr_idx), split)?;
            out.ekd = ekd;
            if weights.w_ekd != 0.0 {
                for (&i, g) in prev_idx.iter().zip(&gp).chain(curr_idx.iter().zip(&gc)) {
                    for (k, v) in g.iter().enumerate() {
                        g_zcls[(i, k)] += weights.w_ekd * v;
                    }
                }
            }
        }
    }

    out.total = weights.w_cls * out.cls
        + weights.w_l1 * out.l1
        + weights.w_giou * out.giou
        + weights.w_eus * (out.energy + out.subspace)
        + if replay_active {
            weights.w_ekd * out.ekd
        } else {
            0.0
        };

    // Head branches back into the feature.
    let g_unit = &g_zcls * &params.cls_w * CLS_LOGIT_SCALE + &g_box * &params.box_w;
    for (i, (&r, &g_o)) in fwd.norms.iter().zip(&g_obj).enumerate() {
        if r > 0.0 {
            let unit = fwd.unit.row(i);
            let v = g_unit.row(i);
            let radial = v.dot(&unit);
            let update = v / r + unit * (params.obj_w * g_o - radial / r);
            let mut row = g_f.row_mut(i);
            row += update;
        }
    }

    grads.cls_w = g_zcls.transpose() * &fwd.unit * CLS_LOGIT_SCALE;
    grads.cls_b = column_sums(&g_zcls);
    grads.obj_w = g_obj.iter().zip(&fwd.norms).map(|(g, r)| g * r).sum();
    grads.obj_b = g_obj.iter().sum();
    grads.box_w = g_box.transpose() * &fwd.unit;
    grads.box_b = column_sums(&g_box);
    grads.feat_w = g_f.transpose() * &batch.observations;
    grads.feat_b = column_sums(&g_f);

    Ok((out, grads))
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    m.row_sum().transpose()
}

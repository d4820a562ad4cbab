//! Proposal-to-ground-truth matching and pseudo-unknown selection.

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{ensure_len, Error, Result};
use crate::losses::MatchStatus;

pub use crate::bbox::iou;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoConfig {
    pub tau: usize,
    pub size_ratio: f64,
    pub logit_floor: f64,
    pub iou_match_threshold: f64,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self {
            tau: 20,
            size_ratio: 0.5,
            logit_floor: 0.0,
            iou_match_threshold: 0.5,
        }
    }
}

impl PseudoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 1 {
            return Err(Error::Config("tau must be at least 1".into()));
        }
        if !(self.size_ratio > 0.0 && self.size_ratio <= 1.0) {
            return Err(Error::Config("size_ratio must lie in (0, 1]".into()));
        }
        if !(self.iou_match_threshold > 0.0 && self.iou_match_threshold < 1.0) {
            return Err(Error::Config(
                "iou_match_threshold must lie in (0, 1)".into(),
            ));
        }
        if !self.logit_floor.is_finite() {
            return Err(Error::Config("logit_floor must be finite".into()));
        }
        Ok(())
    }
}

/// A ground-truth annotation: class id and box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: BBox,
}

/// Greedy one-to-one matching in descending IoU order.
///
/// Returns the statuses and, per proposal, the index of the matched ground truth.
pub fn match_gt(
    proposals: &[BBox],
    gts: &[GroundTruth],
    threshold: f64,
) -> (Vec<MatchStatus>, Vec<Option<usize>>) {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (p, pb) in proposals.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(pb, &gt.bbox);
            if v >= threshold {
                pairs.push((v, p, g));
            }
        }
    }
    // Ties fall back to the lower proposal, then ground-truth, index.
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut statuses = vec![MatchStatus::Background; proposals.len()];
    let mut assigned = vec![None; proposals.len()];
    let mut gt_taken = vec![false; gts.len()];
    for (_, p, g) in pairs {
        if assigned[p].is_some() || gt_taken[g] {
            continue;
        }
        assigned[p] = Some(g);
        gt_taken[g] = true;
        statuses[p] = MatchStatus::GtMatched(gts[g].class_id);
    }
    (statuses, assigned)
}

/// Number of pseudo-unknown labels: `floor(k_gt * max(1, 2 tau / N_known))`.
pub fn pseudo_count(k_gt: usize, num_known: usize, tau: usize) -> Result<usize> {
    if num_known == 0 {
        return Err(Error::invalid("number of known classes must be positive"));
    }
    // Integer form of the floor avoids rounding at exact multiples.
    if 2 * tau > num_known {
        Ok(k_gt * 2 * tau / num_known)
    } else {
        Ok(k_gt)
    }
}

/// Promotes background proposals to pseudo-unknowns.
///
/// Survivors need `min(w, h) >= size_ratio * min(W, H)` and a calibrated unknown
/// logit above the floor; the `count` highest logits win, ties by lower index.
pub fn select_pseudo_unknowns(
    statuses: &mut [MatchStatus],
    boxes: &[BBox],
    config: &PseudoConfig,
    image_extent: (f64, f64),
    calibrated_logits: &[f64],
    count: usize,
) -> Result<Vec<usize>> {
    ensure_len(statuses.len(), boxes.len())?;
    ensure_len(statuses.len(), calibrated_logits.len())?;
    let min_side = config.size_ratio * image_extent.0.min(image_extent.1);
    let mut survivors: Vec<usize> = (0..statuses.len())
        .filter(|&i| {
            statuses[i].is_background()
                && boxes[i].width().min(boxes[i].height()) >= min_side
                && calibrated_logits[i] > config.logit_floor
        })
        .collect();
    survivors.sort_by(|&a, &b| {
        calibrated_logits[b]
            .total_cmp(&calibrated_logits[a])
            .then(a.cmp(&b))
    });
    survivors.truncate(count);
    for &i in &survivors {
        statuses[i] = MatchStatus::PseudoUnknown;
    }
    survivors.sort_unstable();
    Ok(survivors)
}

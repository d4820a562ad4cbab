//! Inference (calibration, NMS, thresholding) and the benchmark metrics.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BBox};
use crate::energy::lse_unchecked;
use crate::error::{ensure_len, Error, Result};
use crate::etf::EtfFrame;
use crate::head::{calibrate_unknown, forward_batch, joint_probabilities, HeadParams};
use crate::losses::MatchStatus;
use crate::matching::match_gt;
use crate::sim::{Scene, TaskSchedule};

/// Detection label; serializes as the class id or the string `"unknown"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DetLabel {
    Known(usize),
    Unknown,
}

impl Serialize for DetLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            DetLabel::Known(c) => s.serialize_u64(*c as u64),
            DetLabel::Unknown => s.serialize_str("unknown"),
        }
    }
}

impl<'de> Deserialize<'de> for DetLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Id(usize),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Id(c) => Ok(DetLabel::Known(c)),
            Raw::Name(n) if n == "unknown" => Ok(DetLabel::Unknown),
            Raw::Name(n) => Err(serde::de::Error::custom(format!(
                "unexpected class id '{n}'"
            ))),
        }
    }
}

/// One detection; a JSONL record `{image_id, box, class_id, score}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(rename = "class_id")]
    pub label: DetLabel,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.10,
            nms_iou: 0.6,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config(
                "inference thresholds must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Indices of `dets` sorted by descending score, ties by position.
fn by_score(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression within each (image, label) group.
///
/// Survivors keep descending-score order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in by_score(dets) {
        let d = &dets[i];
        let suppressed = kept.iter().any(|k| {
            k.image_id == d.image_id && k.label == d.label && iou(&k.bbox, &d.bbox) >= iou_threshold
        });
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

/// Unknown logits used at inference: calibrated when EUS is on, raw otherwise.
pub fn inference_unknown_logits(
    params: &HeadParams,
    frame: &EtfFrame,
    scene: &Scene,
    eus_enabled: bool,
) -> Result<Vec<f64>> {
    let fwd = forward_batch(params, &scene.observations())?;
    let z_u = fwd.unknown_logits();
    if !eus_enabled {
        return Ok(z_u);
    }
    let offsets: Vec<f64> = fwd
        .subspace_scores(frame)?
        .iter()
        .map(|s| s.offset())
        .collect();
    calibrate_unknown(&z_u, &offsets)
}

/// Detections of one scene.
///
/// Every proposal yields one candidate per class node, scored by its joint
/// probability with the unknown node logit replaced by the inference unknown
/// logit. Boxes are the regressed proposal boxes clipped to the image.
pub fn infer_scene(
    params: &HeadParams,
    frame: &EtfFrame,
    scene: &Scene,
    config: &InferenceConfig,
    eus_enabled: bool,
) -> Result<Vec<Detection>> {
    if scene.proposals.is_empty() {
        return Ok(Vec::new());
    }
    let fwd = forward_batch(params, &scene.observations())?;
    let unknown = inference_unknown_logits(params, frame, scene, eus_enabled)?;
    let c = params.num_known();
    let mut candidates = Vec::with_capacity(scene.proposals.len() * (c + 1));
    for (i, p) in scene.proposals.iter().enumerate() {
        let mut z = fwd.z_cls_row(i);
        z[c] = unknown[i];
        let probs = joint_probabilities(&z, fwd.z_obj[i]);
        let bbox = fwd.predicted_box(i, &p.bbox).sanitized(p.bbox);
        for (k, &score) in probs.iter().enumerate() {
            let label = if k == c {
                DetLabel::Unknown
            } else {
                DetLabel::Known(k)
            };
            candidates.push(Detection {
                image_id: scene.id,
                bbox,
                label,
                score,
            });
        }
    }
    Ok(nms(&candidates, config.nms_iou)
        .into_iter()
        .filter(|d| d.score >= config.score_threshold)
        .collect())
}

/// A ground-truth box tagged with its image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageBox {
    pub image_id: u64,
    pub bbox: BBox,
}

/// Greedy assignment in descending score: each detection takes the
/// highest-IoU unmatched box of its image at or above `iou_threshold`.
fn greedy_hits(
    dets: &[Detection],
    gts: &[ImageBox],
    iou_threshold: f64,
) -> (Vec<usize>, Vec<bool>) {
    let order = by_score(dets);
    let mut taken = vec![false; gts.len()];
    let mut hits = vec![false; dets.len()];
    for &i in &order {
        let d = &dets[i];
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.image_id != d.image_id {
                continue;
            }
            let v = iou(&d.bbox, &gt.bbox);
            if v >= iou_threshold && best.is_none_or(|(b, _)| v > b) {
                best = Some((v, g));
            }
        }
        if let Some((_, g)) = best {
            taken[g] = true;
            hits[i] = true;
        }
    }
    (order, hits)
}

/// VOC-style all-point average precision for one class. `None` without ground truth.
pub fn average_precision(dets: &[Detection], gts: &[ImageBox], iou_threshold: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let (order, hits) = greedy_hits(dets, gts, iou_threshold);
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        if hits[i] {
            tp += 1;
        }
        recall.push(tp as f64 / gts.len() as f64);
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    // Monotone envelope from the right, then area under the step curve.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Recall {
    /// Percentage in `[0, 100]`.
    pub value: f64,
    /// False when there was no ground truth to recall; `value` is then 0.
    pub defined: bool,
}

/// Percentage of unknown ground truth hit by unknown-labelled detections.
pub fn unknown_recall(dets: &[Detection], unknown_gts: &[ImageBox], iou_threshold: f64) -> Recall {
    if unknown_gts.is_empty() {
        return Recall {
            value: 0.0,
            defined: false,
        };
    }
    let unknown: Vec<Detection> = dets
        .iter()
        .filter(|d| d.label == DetLabel::Unknown)
        .copied()
        .collect();
    let (_, hits) = greedy_hits(&unknown, unknown_gts, iou_threshold);
    let n = hits.iter().filter(|h| **h).count();
    Recall {
        value: 100.0 * n as f64 / unknown_gts.len() as f64,
        defined: true,
    }
}

/// Harmonic mean of two percentages; 0 when both are 0.
pub fn h_score(known_map: f64, u_recall: f64) -> f64 {
    let s = known_map + u_recall;
    if s <= 0.0 {
        0.0
    } else {
        2.0 * known_map * u_recall / s
    }
}

/// Proposals of `scene` matched to one of its objects, as `(proposal, class)`.
fn matched_proposals(scene: &Scene, iou_threshold: f64) -> Vec<(usize, usize)> {
    let (statuses, _) = match_gt(&scene.boxes(), &scene.all_objects(), iou_threshold);
    statuses
        .iter()
        .enumerate()
        .filter_map(|(i, s)| match s {
            MatchStatus::GtMatched(c) => Some((i, *c)),
            _ => None,
        })
        .collect()
}

/// Mean head affinity of matched proposals of task `i` (row) under the
/// sub-head of task `j`'s classes (column), for tasks `1..=task`.
pub fn energy_heatmap(
    params: &HeadParams,
    schedule: &TaskSchedule,
    task: usize,
    scenes: &[Scene],
    iou_threshold: f64,
) -> Result<Vec<Vec<f64>>> {
    schedule.check_task(task)?;
    if params.num_known() < schedule.known(task).len() {
        return Err(Error::invalid("head does not cover every task seen"));
    }
    let mut sums = vec![vec![0.0; task]; task];
    let mut counts = vec![0usize; task];
    for scene in scenes {
        let matched = matched_proposals(scene, iou_threshold);
        if matched.is_empty() {
            continue;
        }
        let fwd = forward_batch(params, &scene.observations())?;
        for (p, class_id) in matched {
            let row = schedule.task_of(class_id);
            if row > task {
                continue;
            }
            let z = fwd.z_cls_row(p);
            for (col, sum) in sums[row - 1].iter_mut().enumerate() {
                *sum += lse_unchecked(&z[schedule.current(col + 1)]);
            }
            counts[row - 1] += 1;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(row, n)| {
            row.into_iter()
                .map(|s| if n == 0 { f64::NAN } else { s / n as f64 })
                .collect()
        })
        .collect())
}

/// Mean diagonal and mean off-diagonal of a square heatmap.
pub fn heatmap_contrast(heatmap: &[Vec<f64>]) -> (f64, f64) {
    let (mut diag, mut off, mut n_off) = (0.0, 0.0, 0usize);
    for (i, row) in heatmap.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i == j {
                diag += v;
            } else {
                off += v;
                n_off += 1;
            }
        }
    }
    let n = heatmap.len().max(1) as f64;
    let off_mean = if n_off == 0 {
        f64::NAN
    } else {
        off / n_off as f64
    };
    (diag / n, off_mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassScores {
    pub class_id: usize,
    /// Whether the class was annotated at the evaluated task.
    pub known: bool,
    pub count: usize,
    pub mean_s_known: f64,
    pub mean_s_unknown: f64,
}

/// Mean subspace scores of matched proposals, per class, for every class.
pub fn per_class_scores(
    params: &HeadParams,
    frame: &EtfFrame,
    schedule: &TaskSchedule,
    task: usize,
    scenes: &[Scene],
    iou_threshold: f64,
) -> Result<Vec<ClassScores>> {
    let total = schedule.total_classes();
    let mut acc = vec![(0usize, 0.0, 0.0); total];
    for scene in scenes {
        let matched = matched_proposals(scene, iou_threshold);
        if matched.is_empty() {
            continue;
        }
        let scores = forward_batch(params, &scene.observations())?.subspace_scores(frame)?;
        for (p, c) in matched {
            acc[c].0 += 1;
            acc[c].1 += scores[p].s_known;
            acc[c].2 += scores[p].s_unknown;
        }
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(class_id, (n, sk, su))| {
            let mean = |s: f64| if n == 0 { f64::NAN } else { s / n as f64 };
            ClassScores {
                class_id,
                known: schedule.is_known(task, class_id),
                count: n,
                mean_s_known: mean(sk),
                mean_s_unknown: mean(su),
            }
        })
        .collect())
}

/// Features of matched test proposals with their class, for projection export.
pub fn matched_features(
    params: &HeadParams,
    scenes: &[Scene],
    iou_threshold: f64,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for scene in scenes {
        let matched = matched_proposals(scene, iou_threshold);
        if matched.is_empty() {
            continue;
        }
        let fwd = forward_batch(params, &scene.observations())?;
        for (p, c) in matched {
            feats.push(fwd.feature_row(p));
            labels.push(c);
        }
    }
    Ok((feats, labels))
}

/// Projects `features` onto their top two principal components.
///
/// Each component's first non-negligible loading is made positive. A second
/// component with (numerically) zero variance is dropped and its coordinate
/// reported as 0.
pub fn pca_project(features: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    if features.len() < 2 {
        return Err(Error::invalid("projection needs at least two features"));
    }
    let d = features[0].len();
    if d == 0 {
        return Err(Error::invalid("features are empty"));
    }
    for f in features {
        ensure_len(d, f.len())?;
    }
    let n = features.len();
    let mut x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let cov = x.transpose() * &x / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let top = eig.eigenvalues[order[0]].max(0.0);
    let scale = top.max(1.0);
    let mut comps = Vec::with_capacity(2);
    for (rank, &k) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[k];
        let mut v = eig.eigenvectors.column(k).clone_owned();
        if lambda <= 1e-12 * scale || (rank == 0 && top == 0.0) {
            v.fill(0.0);
        } else if let Some(first) = v.iter().find(|c| c.abs() > 1e-12) {
            if *first < 0.0 {
                v.neg_mut();
            }
        }
        comps.push(v);
    }
    if comps.len() < 2 {
        comps.push(nalgebra::DVector::zeros(d));
    }
    let p0 = &x * &comps[0];
    let p1 = &x * &comps[1];
    Ok((0..n).map(|i| [p0[i], p1[i]]).collect())
}

/// Metrics of one task's evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: usize,
    /// `None` at the first task, which has no previous classes.
    pub previous_map: Option<f64>,
    pub current_map: f64,
    pub known_map: f64,
    pub u_recall: f64,
    pub u_recall_defined: bool,
    pub h_score: f64,
    /// Per known class AP (percent); `None` where the class had no test objects.
    pub class_ap: Vec<Option<f64>>,
    pub heatmap: Vec<Vec<f64>>,
    pub per_class_scores: Vec<ClassScores>,
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Runs inference on `scenes` and computes every metric for `task`.
pub fn evaluate_task(
    params: &HeadParams,
    frame: &EtfFrame,
    schedule: &TaskSchedule,
    task: usize,
    scenes: &[Scene],
    config: &InferenceConfig,
    eus_enabled: bool,
) -> Result<(EvalReport, Vec<Detection>)> {
    schedule.check_task(task)?;
    let mut dets = Vec::new();
    for scene in scenes {
        dets.extend(infer_scene(params, frame, scene, config, eus_enabled)?);
    }
    let known = schedule.known(task);
    let mut class_ap = Vec::with_capacity(known.len());
    for c in known.clone() {
        let class_dets: Vec<Detection> = dets
            .iter()
            .filter(|d| d.label == DetLabel::Known(c))
            .copied()
            .collect();
        let gts: Vec<ImageBox> = scenes
            .iter()
            .flat_map(|s| {
                s.objects
                    .iter()
                    .filter(|o| o.class_id == c)
                    .map(|o| ImageBox {
                        image_id: s.id,
                        bbox: o.bbox,
                    })
            })
            .collect();
        class_ap.push(average_precision(&class_dets, &gts, 0.5).map(|a| 100.0 * a));
    }
    let unknown_gts: Vec<ImageBox> = scenes
        .iter()
        .flat_map(|s| {
            s.unknown_objects(schedule, task)
                .into_iter()
                .map(|g| ImageBox {
                    image_id: s.id,
                    bbox: g.bbox,
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let recall = unknown_recall(&dets, &unknown_gts, 0.5);

    let n_prev = schedule.previous(task).len();
    let previous_map = if n_prev == 0 {
        None
    } else {
        mean_defined(&class_ap[..n_prev])
    };
    let current_map = mean_defined(&class_ap[n_prev..]).unwrap_or(0.0);
    let known_map = mean_defined(&class_ap).unwrap_or(0.0);
    let report = EvalReport {
        task,
        previous_map,
        current_map,
        known_map,
        u_recall: recall.value,
        u_recall_defined: recall.defined,
        h_score: h_score(known_map, recall.value),
        class_ap,
        heatmap: energy_heatmap(params, schedule, task, scenes, 0.5)?,
        per_class_scores: per_class_scores(params, frame, schedule, task, scenes, 0.5)?,
    };
    Ok((report, dets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(image_id: u64, b: [f64; 4], label: DetLabel, score: f64) -> Detection {
        Detection {
            image_id,
            bbox: BBox(b),
            label,
            score,
        }
    }

    fn gt(image_id: u64, b: [f64; 4]) -> ImageBox {
        ImageBox {
            image_id,
            bbox: BBox(b),
        }
    }

    const A: [f64; 4] = [0.0, 0.0, 0.4, 0.4];
    const B: [f64; 4] = [0.6, 0.6, 1.0, 1.0];

    #[test]
    fn detection_record_shape() {
        let known = det(3, [0.0, 0.0, 0.5, 0.25], DetLabel::Known(7), 0.75);
        let json = serde_json::to_string(&known).unwrap();
        assert_eq!(
            json,
            r#"{"image_id":3,"box":[0.0,0.0,0.5,0.25],"class_id":7,"score":0.75}"#
        );
        let unknown = det(4, A, DetLabel::Unknown, 0.5);
        let json = serde_json::to_string(&unknown).unwrap();
        assert!(json.contains(r#""class_id":"unknown""#));
        for d in [known, unknown] {
            let back: Detection =
                serde_json::from_str(&serde_json::to_string(&d).unwrap()).unwrap();
            assert_eq!(back, d);
        }
        assert!(serde_json::from_str::<DetLabel>(r#""car""#).is_err());
    }

    #[test]
    fn nms_examples() {
        let k = DetLabel::Known(0);
        let kept = nms(&[det(1, A, k, 0.8), det(1, A, k, 0.9)], 0.6);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(nms(&[det(1, A, k, 0.9), det(1, B, k, 0.8)], 0.6).len(), 2);
        assert_eq!(
            nms(&[det(1, A, k, 0.9), det(1, A, DetLabel::Unknown, 0.8)], 0.6).len(),
            2
        );
        assert_eq!(nms(&[det(1, A, k, 0.9), det(2, A, k, 0.8)], 0.6).len(), 2);
    }

    #[test]
    fn ap_examples() {
        let k = DetLabel::Known(0);
        assert_eq!(
            average_precision(&[det(1, A, k, 0.9)], &[gt(1, A)], 0.5),
            Some(1.0)
        );
        assert_eq!(
            average_precision(&[det(1, B, k, 0.9)], &[gt(1, A)], 0.5),
            Some(0.0)
        );
        assert_eq!(average_precision(&[det(1, A, k, 0.9)], &[], 0.5), None);
        // TP, FP, TP over two ground truths: 1 * 0.5 + (2/3) * 0.5.
        let dets = [
            det(1, A, k, 0.9),
            det(1, [0.0, 0.6, 0.3, 0.9], k, 0.8),
            det(2, B, k, 0.7),
        ];
        let ap = average_precision(&dets, &[gt(1, A), gt(2, B)], 0.5).unwrap();
        assert!((ap - (0.5 + 2.0 / 3.0 * 0.5)).abs() < 1e-12);
        assert!((ap - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn duplicate_detection_is_a_false_positive() {
        let k = DetLabel::Known(0);
        let ap = average_precision(&[det(1, A, k, 0.9), det(1, A, k, 0.8)], &[gt(1, A)], 0.5);
        assert_eq!(ap, Some(1.0));
        let ap = average_precision(&[det(1, A, k, 0.7), det(1, B, k, 0.8)], &[gt(1, A)], 0.5);
        assert_eq!(ap, Some(0.5));
    }

    #[test]
    fn recall_examples() {
        let u = DetLabel::Unknown;
        let gts = [gt(1, A), gt(1, B)];
        assert_eq!(unknown_recall(&[det(1, A, u, 0.5)], &gts, 0.5).value, 50.0);
        let both = [det(1, A, u, 0.5), det(1, B, u, 0.4)];
        assert_eq!(unknown_recall(&both, &gts, 0.5).value, 100.0);
        let known = [det(1, A, DetLabel::Known(2), 0.9)];
        assert_eq!(unknown_recall(&known, &gts, 0.5).value, 0.0);
        let none = unknown_recall(&both, &[], 0.5);
        assert!(!none.defined && none.value == 0.0);
    }

    #[test]
    fn h_score_examples() {
        assert!((h_score(66.2, 65.1) - 65.6).abs() < 0.05);
        assert!((h_score(71.6, 68.7) - 70.1).abs() < 0.05);
        assert_eq!(h_score(42.0, 0.0), 0.0);
        assert_eq!(h_score(0.0, 0.0), 0.0);
    }

    #[test]
    fn heatmap_contrast_splits_diagonal() {
        let (d, o) = heatmap_contrast(&[vec![2.0, -1.0], vec![-3.0, 4.0]]);
        assert_eq!((d, o), (3.0, -2.0));
        let (d, o) = heatmap_contrast(&[vec![1.5]]);
        assert!(d == 1.5 && o.is_nan());
    }

    #[test]
    fn pca_preserves_planar_distances() {
        // Points on a plane spanned by two orthonormal directions in R^5.
        let u = [0.6, 0.8, 0.0, 0.0, 0.0];
        let v = [0.0, 0.0, 0.0, 1.0, 0.0];
        let coords = [(0.0, 0.0), (1.0, 2.0), (-2.0, 0.5), (3.0, -1.0), (0.5, 0.5)];
        let feats: Vec<Vec<f64>> = coords
            .iter()
            .map(|(a, b)| (0..5).map(|k| 1.0 + a * u[k] + b * v[k]).collect())
            .collect();
        let proj = pca_project(&feats).unwrap();
        for i in 0..coords.len() {
            for j in 0..coords.len() {
                let orig = ((coords[i].0 - coords[j].0).powi(2)
                    + (coords[i].1 - coords[j].1).powi(2))
                .sqrt();
                let got =
                    ((proj[i][0] - proj[j][0]).powi(2) + (proj[i][1] - proj[j][1]).powi(2)).sqrt();
                assert!((orig - got).abs() < 1e-6);
            }
        }
        let mx: f64 = proj.iter().map(|p| p[0]).sum::<f64>() / proj.len() as f64;
        let my: f64 = proj.iter().map(|p| p[1]).sum::<f64>() / proj.len() as f64;
        assert!(mx.abs() < 1e-9 && my.abs() < 1e-9);
    }

    #[test]
    fn pca_duplicates_and_rank_deficiency() {
        let feats = vec![
            vec![1.0, 2.0, 3.0],
            vec![3.0, 6.0, 9.0],
            vec![1.0, 2.0, 3.0],
        ];
        let proj = pca_project(&feats).unwrap();
        assert_eq!(proj[0], proj[2]);
        assert!(proj.iter().all(|p| p[1] == 0.0));
        assert!(pca_project(&feats[..1]).is_err());
    }

    #[test]
    fn pca_sign_convention_is_stable() {
        let feats: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![i as f64, (i * i) as f64 * 0.1, 1.0])
            .collect();
        let neg: Vec<Vec<f64>> = feats
            .iter()
            .map(|f| f.iter().map(|v| -v).collect())
            .collect();
        let a = pca_project(&feats).unwrap();
        let b = pca_project(&neg).unwrap();
        // Negating the data flips the coordinates but not the axes.
        for (p, q) in a.iter().zip(&b) {
            assert!((p[0] + q[0]).abs() < 1e-9 && (p[1] + q[1]).abs() < 1e-9);
        }
    }

    fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec(
            (0u64..3, 0.0f64..0.6, 0.0f64..0.6, 0.1f64..0.4, 0.0f64..1.0),
            0..12,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(img, x, y, s, score)| {
                    det(img, [x, y, x + s, y + s], DetLabel::Unknown, score)
                })
                .collect()
        })
    }

    fn arb_gts() -> impl Strategy<Value = Vec<ImageBox>> {
        prop::collection::vec((0u64..3, 0.0f64..0.6, 0.0f64..0.6, 0.1f64..0.4), 1..6).prop_map(
            |v| {
                v.into_iter()
                    .map(|(img, x, y, s)| gt(img, [x, y, x + s, y + s]))
                    .collect()
            },
        )
    }

    proptest! {
        #[test]
        fn h_score_symmetric_and_idempotent(a in 0.0f64..100.0, b in 0.0f64..100.0) {
            prop_assert!((h_score(a, b) - h_score(b, a)).abs() < 1e-12);
            prop_assert!((h_score(a, a) - a).abs() < 1e-9);
        }

        #[test]
        fn ap_invariant_to_monotone_rescaling(dets in arb_dets(), gts in arb_gts()) {
            let rescaled: Vec<Detection> = dets
                .iter()
                .map(|d| Detection { score: (3.0 * d.score).exp() + 1.0, ..*d })
                .collect();
            prop_assert_eq!(average_precision(&dets, &gts, 0.5), average_precision(&rescaled, &gts, 0.5));
        }

        #[test]
        fn recall_monotone_in_detections(dets in arb_dets(), extra in arb_dets(), gts in arb_gts()) {
            let base = unknown_recall(&dets, &gts, 0.5).value;
            let mut grown = dets.clone();
            grown.extend(extra);
            prop_assert!(unknown_recall(&grown, &gts, 0.5).value >= base);
        }
    }
}

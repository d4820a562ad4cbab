//! Finite-difference gradient checks shared by the integration targets.
#![allow(dead_code)]

use nalgebra::DMatrix;
use owd_core::bbox::BBox;
use owd_core::energy::subspace_score_with_grad;
use owd_core::etf::{build_simplex_etf, EtfFrame};
use owd_core::head::{HeadParams, ProposalBatch, TaskOrigin};
use owd_core::losses::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-5;
pub const DIM: usize = 16;
pub const K: usize = 8;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Largest relative error between `analytic` and central differences of `f` at `x`.
pub fn max_fd_error(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + H;
        let up = f(&probe);
        probe[i] = x[i] - H;
        let down = f(&probe);
        probe[i] = x[i];
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * H)));
    }
    worst
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_status<R: Rng>(rng: &mut R, num_known: usize) -> MatchStatus {
    match rng.gen_range(0..3) {
        0 => MatchStatus::GtMatched(rng.gen_range(0..num_known)),
        1 => MatchStatus::PseudoUnknown,
        _ => MatchStatus::Background,
    }
}

fn random_box<R: Rng>(rng: &mut R) -> BBox {
    let x1 = rng.gen_range(0.0..0.5);
    let y1 = rng.gen_range(0.0..0.5);
    BBox::new(
        x1,
        y1,
        x1 + rng.gen_range(0.1..0.5),
        y1 + rng.gen_range(0.1..0.5),
    )
}

fn frame(seed: u64) -> EtfFrame {
    build_simplex_etf(K, DIM, seed).unwrap()
}

pub fn focal_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let z: Vec<f64> = (0..K).map(|_| r.gen_range(-4.0..4.0)).collect();
    let t: Vec<f64> = (0..K)
        .map(|_| if r.gen_bool(0.3) { 1.0 } else { 0.0 })
        .collect();
    let (_, g) = sigmoid_focal_loss_with_grad(&z, &t, 0.25, 2.0).unwrap();
    max_fd_error(|x| sigmoid_focal_loss(x, &t, 0.25, 2.0).unwrap(), &z, &g)
}

/// Features of `n` proposals laid out row-major in one flat vector.
fn random_features<R: Rng>(r: &mut R, n: usize) -> Vec<f64> {
    (0..n * DIM).map(|_| r.gen_range(-1.5..1.5)).collect()
}

fn scores_of(frame: &EtfFrame, flat: &[f64]) -> Vec<(f64, Vec<f64>, f64, Vec<f64>)> {
    flat.chunks(DIM)
        .map(|f| {
            let (sk, gk) = subspace_score_with_grad(frame.known_half(), f).unwrap();
            let (su, gu) = subspace_score_with_grad(frame.unknown_half(), f).unwrap();
            (sk, gk, su, gu)
        })
        .collect()
}

/// Energy margin checked through the subspace scores of raw features.
pub fn margin_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let fr = frame(seed);
    let n = 6;
    let x = random_features(&mut r, n);
    let statuses: Vec<MatchStatus> = (0..n).map(|_| random_status(&mut r, 3)).collect();
    let loss = |flat: &[f64]| {
        let offsets: Vec<f64> = scores_of(&fr, flat).iter().map(|s| s.2 - s.0).collect();
        energy_margin_loss(&offsets, &statuses, 0.5).unwrap()
    };
    let s = scores_of(&fr, &x);
    let offsets: Vec<f64> = s.iter().map(|s| s.2 - s.0).collect();
    let (_, g) = energy_margin_loss_with_grad(&offsets, &statuses, 0.5).unwrap();
    let mut analytic = Vec::with_capacity(x.len());
    for (i, (_, gk, _, gu)) in s.iter().enumerate() {
        analytic.extend(gk.iter().zip(gu).map(|(a, b)| g[i] * (b - a)));
    }
    max_fd_error(loss, &x, &analytic)
}

pub fn subspace_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let fr = frame(seed);
    let n = 6;
    let x = random_features(&mut r, n);
    let statuses: Vec<MatchStatus> = (0..n).map(|_| random_status(&mut r, 3)).collect();
    let to_scores = |flat: &[f64]| -> Vec<owd_core::energy::SubspaceScores> {
        scores_of(&fr, flat)
            .iter()
            .map(|s| owd_core::energy::SubspaceScores::new(s.0, s.2))
            .collect()
    };
    let loss = |flat: &[f64]| subspace_focal_loss(&to_scores(flat), &statuses, 0.25, 2.0).unwrap();
    let s = scores_of(&fr, &x);
    let (_, g) = subspace_focal_loss_with_grad(&to_scores(&x), &statuses, 0.25, 2.0).unwrap();
    let mut analytic = Vec::with_capacity(x.len());
    for (i, (_, gk, _, gu)) in s.iter().enumerate() {
        analytic.extend(gk.iter().zip(gu).map(|(a, b)| g[i][0] * a + g[i][1] * b));
    }
    max_fd_error(loss, &x, &analytic)
}

pub fn ekd_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let split = HeadSplit {
        num_prev: K / 2,
        num_known: K,
    };
    let n_prev = r.gen_range(1..4);
    let n_curr = r.gen_range(1..4);
    let x: Vec<f64> = (0..(n_prev + n_curr) * (K + 1))
        .map(|_| r.gen_range(-3.0..3.0))
        .collect();
    let unpack = |flat: &[f64]| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let rows: Vec<Vec<f64>> = flat.chunks(K + 1).map(|c| c.to_vec()).collect();
        (rows[..n_prev].to_vec(), rows[n_prev..].to_vec())
    };
    let (p, c) = unpack(&x);
    let (_, gp, gc) = ekd_loss_with_grad(&p, &c, split).unwrap();
    let analytic: Vec<f64> = gp.into_iter().chain(gc).flatten().collect();
    max_fd_error(
        |flat| {
            let (p, c) = unpack(flat);
            ekd_loss(&p, &c, split).unwrap()
        },
        &x,
        &analytic,
    )
}

pub fn l1_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let gt = random_box(&mut r);
    let pred = random_box(&mut r);
    let (_, g) = l1_box_loss_with_grad(&pred, &gt).unwrap();
    max_fd_error(
        |x| l1_box_loss(&BBox([x[0], x[1], x[2], x[3]]), &gt).unwrap(),
        &pred.0,
        &g,
    )
}

pub fn giou_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let gt = random_box(&mut r);
    let pred = random_box(&mut r);
    let (_, g) = giou_loss_with_grad(&pred, &gt).unwrap();
    max_fd_error(
        |x| giou_loss(&BBox([x[0], x[1], x[2], x[3]]), &gt).unwrap(),
        &pred.0,
        &g,
    )
}

/// A random head with a populated previous/current split and a labelled batch.
pub fn head_and_batch(seed: u64) -> (HeadParams, ProposalBatch, EtfFrame) {
    let mut r = rng(seed);
    let d_obs = 6;
    let num_known = 4;
    let mut params = HeadParams::init(&mut r, d_obs, DIM, 2).unwrap();
    params.grow(&mut r, 2);
    // Larger classifier and branch weights than a fresh init so every term is active.
    params.cls_w = DMatrix::from_fn(num_known + 1, DIM, |_, _| r.gen_range(-1.0..1.0));
    params.cls_b = params.cls_b.map(|_| r.gen_range(-0.5..0.5));
    params.obj_w = r.gen_range(-1.0..1.0);
    params.obj_b = r.gen_range(-1.0..1.0);
    params.box_w = DMatrix::from_fn(4, DIM, |_, _| r.gen_range(-0.02..0.02));
    params.box_b = params.box_b.map(|_| r.gen_range(-0.05..0.05));

    let n = 7;
    let obs = DMatrix::from_fn(n, d_obs, |_, _| r.gen_range(-1.0..1.0));
    let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut r)).collect();
    let mut batch = ProposalBatch::new(obs, boxes).unwrap();
    for i in 0..n {
        let s = random_status(&mut r, num_known);
        batch.statuses[i] = s;
        if let MatchStatus::GtMatched(c) = s {
            batch.gt_boxes[i] = Some(random_box(&mut r));
            batch.origins[i] = Some(if c < 2 {
                TaskOrigin::Previous
            } else {
                TaskOrigin::Current
            });
        }
    }
    (params, batch, frame(seed))
}

pub fn total_instance(seed: u64) -> f64 {
    let (params, batch, fr) = head_and_batch(seed);
    let w = LossWeights::default();
    let (_, grads) = total_loss(&batch, &fr, &params, &w, true).unwrap();
    let x = params.flatten();
    let mut probe = params.clone();
    max_fd_error(
        |flat| {
            probe.set_flat(flat).unwrap();
            total_loss(&batch, &fr, &probe, &w, true).unwrap().0.total
        },
        &x,
        &grads.flatten(),
    )
}

pub type Check = (&'static str, fn(u64) -> f64);

pub const CHECKS: [Check; 7] = [
    ("focal", focal_instance),
    ("energy_margin", margin_instance),
    ("subspace_focal", subspace_instance),
    ("ekd", ekd_instance),
    ("l1", l1_instance),
    ("giou", giou_instance),
    ("total", total_instance),
];

/// Worst error of each check over `instances` seeds.
pub fn gradient_fidelity(instances: u64) -> Vec<(&'static str, f64)> {
    CHECKS
        .iter()
        .map(|(name, check)| (*name, (0..instances).map(check).fold(0.0, f64::max)))
        .collect()
}

#![allow(dead_code)]

use cl3d::detector::Detection;
use cl3d::detector::{
    build_targets, detection_loss, shape_aux_loss, BevGrid, DetectorConfig, DetectorState,
    LossWeights, TrainSample,
};
use cl3d::eval::FrameResult;
use cl3d::geometry::{dist2, Box3D, Vec3};
use cl3d::sim::ObjectLabel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn car(x: f64, y: f64, yaw: f64, v: [f64; 2]) -> ObjectLabel {
    ObjectLabel {
        id: 0,
        bbox: Box3D::new([x, y, -0.9], [4.5, 1.9, 1.6], yaw),
        class_id: 0,
        velocity: v,
        confidence: 1.0,
    }
}

/// Narrow 8×8 model so every parameter can be probed.
pub fn tiny_config() -> DetectorConfig {
    DetectorConfig {
        grid: BevGrid::new(8.0, 8),
        hidden: 6,
        channels: 5,
        shape_hidden: 4,
        shape_out: 3,
        ..DetectorConfig::default()
    }
}

pub struct GradCase {
    pub state: DetectorState,
    pub sample: TrainSample,
    pub weights: Option<Vec<f64>>,
}

/// Random model, two points near one random label, optional random W.
pub fn random_case(seed: u64, weighted: bool) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = DetectorState::new(tiny_config(), seed).unwrap();
    // biases and heads away from zero so every branch carries gradient
    for p in state.params.iter_mut() {
        *p += rng.random_range(-0.3..0.3);
    }
    let lx = rng.random_range(-5.0..5.0);
    let ly = rng.random_range(-5.0..5.0);
    let label = car(
        lx,
        ly,
        rng.random_range(-3.0..3.0),
        [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
    );
    let pt = |rng: &mut ChaCha8Rng| {
        [
            (lx + rng.random_range(-1.5..1.5)) as f32,
            (ly + rng.random_range(-1.5..1.5)) as f32,
            rng.random_range(-1.7..0.0) as f32,
        ]
    };
    let a = pt(&mut rng);
    let b = pt(&mut rng);
    let shapes = (0..2)
        .map(|k| {
            let pts = (0..5)
                .map(|_| {
                    [
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-0.8..0.8),
                    ]
                })
                .collect();
            (pts, k)
        })
        .collect();
    let sample = TrainSample {
        cur: vec![a],
        prev: vec![b],
        labels: vec![label],
        velocity_supervised: true,
        shapes,
    };
    let n = state.config.grid.cells() * state.config.classes;
    let weights = weighted.then(|| (0..n).map(|_| rng.random_range(0.0..1.0)).collect());
    GradCase {
        state,
        sample,
        weights,
    }
}

/// Total loss evaluated from scratch, independent of the backward code.
pub fn loss_of(
    state: &DetectorState,
    sample: &TrainSample,
    weights: Option<&[f64]>,
    with_aux: bool,
) -> f64 {
    let maps = state.encode(&sample.cur, &sample.prev);
    let cfg = &state.config;
    let t = build_targets(
        &sample.labels,
        &cfg.grid,
        cfg.classes,
        sample.velocity_supervised,
    );
    let lw = LossWeights {
        reg: cfg.reg_weight,
        motion: cfg.motion_weight,
    };
    let (l, _) = detection_loss(&maps, &t, weights, &lw).unwrap();
    let aux = if with_aux {
        shape_aux_loss(state, &sample.shapes, None)
    } else {
        0.0
    };
    l.total() + aux
}

/// Worst relative error between analytic and central-difference gradients
/// over every parameter. Gradients below `floor` are compared against
/// `floor` instead of their own magnitude.
pub fn worst_gradient_error(case: &GradCase, with_aux: bool) -> f64 {
    let st = &case.state;
    let w = case.weights.as_deref();
    let (maps, cache) = st.encode_with_cache(&case.sample.cur, &case.sample.prev);
    let (_, analytic) = st
        .sample_gradient(&case.sample, &maps, &cache, w, with_aux)
        .unwrap();
    // 1e-6 leaves cancellation noise near 1e-4 on gradients of order 1e-6
    let h = 1e-5;
    let floor = 1e-5;
    let mut probe = st.clone();
    let mut worst: f64 = 0.0;
    for i in 0..st.params.len() {
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let up = loss_of(&probe, &case.sample, w, with_aux);
        probe.params[i] = orig - h;
        let down = loss_of(&probe, &case.sample, w, with_aux);
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}

/// Rebuilds the selection from scratch at every step: the next pick is the
/// unchosen point whose minimum distance to the chosen set is largest,
/// scanning indices upward so ties keep the lowest index.
pub fn fps_oracle(points: &[Vec3], k: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < k.min(points.len()) {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&j| dist2(*p, points[j]))
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        chosen.push(best.unwrap().0);
    }
    while chosen.len() < k {
        chosen.push(*chosen.last().unwrap());
    }
    chosen
}

/// Independent AP: for every cutoff k the top-k detections are matched
/// again from nothing, giving precision and recall at k; AP integrates the
/// best precision reachable at or beyond each recall level.
pub fn brute_force_ap(frames: &[FrameResult], class: usize, threshold: f64) -> Option<f64> {
    let mut all: Vec<(usize, &Detection)> = frames
        .iter()
        .enumerate()
        .flat_map(|(f, fr)| fr.detections.iter().map(move |d| (f, d)))
        .filter(|(_, d)| d.class_id == class)
        .collect();
    all.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());
    let n_gt: usize = frames
        .iter()
        .map(|f| {
            f.ground_truth
                .iter()
                .filter(|g| g.class_id == class)
                .count()
        })
        .sum();
    if n_gt == 0 {
        return if all.is_empty() { None } else { Some(0.0) };
    }
    let tp_at = |k: usize| -> usize {
        let mut used: Vec<Vec<bool>> = frames
            .iter()
            .map(|f| vec![false; f.ground_truth.len()])
            .collect();
        let mut tp = 0;
        for &(f, d) in &all[..k] {
            let cand = frames[f]
                .ground_truth
                .iter()
                .enumerate()
                .filter(|(j, g)| g.class_id == class && !used[f][*j])
                .map(|(j, g)| {
                    (
                        j,
                        (g.bbox.center[0] - d.center[0]).hypot(g.bbox.center[1] - d.center[1]),
                    )
                })
                .filter(|(_, dist)| *dist <= threshold)
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
            if let Some((j, _)) = cand {
                used[f][j] = true;
                tp += 1;
            }
        }
        tp
    };
    let pr: Vec<(f64, f64)> = (1..=all.len())
        .map(|k| {
            let tp = tp_at(k) as f64;
            (tp / n_gt as f64, tp / k as f64)
        })
        .collect();
    let mut levels: Vec<f64> = pr.iter().map(|p| p.0).filter(|r| *r > 0.0).collect();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let best = pr
            .iter()
            .filter(|p| p.0 >= r)
            .map(|p| p.1)
            .fold(0.0, f64::max);
        ap += (r - prev) * best;
        prev = r;
    }
    Some(ap)
}

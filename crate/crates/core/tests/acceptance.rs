//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! `CL3D_ACCEPTANCE_ONLY=1,5,12` restricts the run to the listed criteria and
//! `CL3D_ACCEPTANCE_STRICT=1` turns any failure into a non-zero exit.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use cl3d::config::KvConfig;
use cl3d::detector::{DetectorConfig, DetectorState};
use cl3d::eval::{average_precision, closed_gap, FrameResult};
use cl3d::geometry::{dist2, rotate_z, Box3D, Vec3};
use cl3d::par::Exec;
use cl3d::pipeline::{
    self, prepare_split, pseudo_samples, run_experiment, run_matrix, ExperimentConfig,
    MatrixOutcome, PrototypeReweighter, PseudoFrame, RangeStrategy,
};
use cl3d::pointops::{farthest_point_sample, range_normalize, ShapeSampling};
use cl3d::prototype::{
    build_reweight_map, effective_weight_map, Prototype, PrototypeConfig, PrototypeStore,
};
use cl3d::sim::{make_benchmark, make_split, DeviceModel, ObjectLabel, PointFrame, SimConfig};
use common::{brute_force_ap, fps_oracle, random_case, worst_gradient_error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_gradients() -> Outcome {
    let mut worst = 0.0f64;
    let mut n = 0;
    for seed in 0..24 {
        for weighted in [false, true] {
            let case = random_case(1000 + seed, weighted);
            for with_aux in [false, true] {
                worst = worst.max(worst_gradient_error(&case, with_aux));
                n += 1;
            }
        }
    }
    check(
        worst < 1e-4,
        format!("{n} instances, worst relative error {worst:.2e}"),
    )
}

fn c2_fps() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for case in 0..200 {
        let n = rng.random_range(1..=10);
        let pts: Vec<Vec3> = (0..n)
            .map(|_| {
                if case % 2 == 0 {
                    [
                        rng.random_range(0..3) as f64,
                        rng.random_range(0..3) as f64,
                        0.0,
                    ]
                } else {
                    [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ]
                }
            })
            .collect();
        let k = rng.random_range(1..=5);
        let start = rng.random_range(0..n);
        if farthest_point_sample(&pts, k, start)
            .map_err(|e| e.to_string())?
            .indices
            != fps_oracle(&pts, k, start)
        {
            mismatches += 1;
        }
    }
    check(
        mismatches == 0,
        format!("200 sets, {mismatches} mismatches"),
    )
}

fn c3_ema() -> Outcome {
    let alpha = PrototypeConfig::default().alpha;
    let p0 = [0.3, -1.2, 2.0, 0.0, 0.7];
    let v = [1.0, 0.5, -0.5, 2.0, 0.0];
    let mut worst = 0.0f64;
    for n in [1i32, 10, 100] {
        let mut p = Prototype::new(p0.len());
        p.ema_update(&p0, alpha).map_err(|e| e.to_string())?;
        for _ in 0..n {
            p.ema_update(&v, alpha).map_err(|e| e.to_string())?;
        }
        let a = alpha.powi(n);
        for i in 0..p0.len() {
            worst = worst.max((p.vector[i] - (a * p0[i] + (1.0 - a) * v[i])).abs());
        }
    }
    check(
        alpha == 0.99 && worst < 1e-9,
        format!("alpha {alpha}, max deviation {worst:.1e}"),
    )
}

fn label(x: f64, y: f64, l: f64, w: f64, conf: f64) -> ObjectLabel {
    ObjectLabel {
        id: 0,
        bbox: Box3D::new([x, y, -0.9], [l, w, 1.6], 0.0),
        class_id: 0,
        velocity: [0.0, 0.0],
        confidence: conf,
    }
}

/// One target self-training epoch from the same start, once without
/// weights and once through the reweighter with `s_p = 1`, `w_bg = 1`.
fn reweight_reduces_to_st() -> Result<bool, cl3d::Error> {
    let mut cfg = ExperimentConfig::default();
    cfg.sim.sequences = 4;
    cfg.sim.eval_sequences = 1;
    cfg.prototype.w_bg = 1.0;
    let bench = make_benchmark(&cfg.sim, Exec::Parallel)?;
    let state = DetectorState::new(cfg.detector.clone(), 5)?;
    let pairs = prepare_split(
        &bench.target_train,
        RangeStrategy::Rn,
        false,
        Exec::Parallel,
    )?;
    // stand-in pseudo-labels: the eval split's boxes, which lie in the same extent
    let pseudo: Vec<PseudoFrame> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| PseudoFrame {
            seq: p.seq,
            frame: p.frame,
            fan: None,
            labels: range_normalize(
                &bench.target_eval.sequences[0].frames[1],
                bench.target_eval.labels(0, 1),
            )
            .1
            .into_iter()
            .map(|mut l| {
                l.confidence = 0.3 + 0.1 * i as f64;
                l
            })
            .collect(),
        })
        .collect();
    let samples = pseudo_samples(&pairs, &pseudo)?;
    let plain = pipeline::self_train(state.clone(), &cfg, &samples, None, "c4")?;
    let mut store =
        PrototypeStore::new(1, cfg.detector.shape_out + 2 * cfg.detector.channels, 0.99);
    let mut r = PrototypeReweighter {
        store: &mut store,
        alignment: cfg.alignment,
        prototype: cfg.prototype,
        stats: Default::default(),
        fixed_similarity: Some(1.0),
    };
    let weighted = pipeline::self_train(state, &cfg, &samples, Some(&mut r), "c4")?;
    Ok(plain
        .params
        .iter()
        .zip(&weighted.params)
        .all(|(a, b)| a.to_bits() == b.to_bits()))
}

fn c4_reweight() -> Outcome {
    let grid = DetectorConfig::default().grid;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut peak_err = 0.0f64;
    let mut out_of_range = 0;
    for _ in 0..1000 {
        let mut slots: Vec<(i32, i32)> = (-3..=3)
            .flat_map(|i| (-3..=3).map(move |j| (i, j)))
            .collect();
        let n = rng.random_range(0..8);
        let mut labels = Vec::new();
        for _ in 0..n {
            let (i, j) = slots.swap_remove(rng.random_range(0..slots.len()));
            labels.push(label(
                i as f64 * 13.0 + rng.random_range(-1.0..1.0),
                j as f64 * 13.0 + rng.random_range(-1.0..1.0),
                rng.random_range(0.5..6.0),
                rng.random_range(0.4..2.5),
                1.0,
            ));
        }
        let sims: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let w = build_reweight_map(&labels, &sims, &grid, 1).map_err(|e| e.to_string())?;
        let e = effective_weight_map(&labels, &sims, &grid, 1, 0.1).map_err(|e| e.to_string())?;
        for m in [&w, &e] {
            out_of_range += m.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
            for (l, s) in labels.iter().zip(&sims) {
                let (ix, iy) = grid
                    .cell_of(l.bbox.center[0], l.bbox.center[1])
                    .ok_or("label off grid")?;
                peak_err = peak_err.max((m[grid.index(ix, iy)] - s).abs());
            }
        }
    }
    let identical = reweight_reduces_to_st().map_err(|e| e.to_string())?;
    check(
        peak_err < 1e-6 && out_of_range == 0 && identical,
        format!("peak error {peak_err:.1e}, {out_of_range} cells outside [0,1], W=1 run bit-identical to ST: {identical}"),
    )
}

fn c5_closed_gap() -> Outcome {
    let a = closed_gap(0.705, 0.363, 0.807).ok_or("undefined")?;
    let b = closed_gap(0.641, 0.379, 0.807).ok_or("undefined")?;
    check(
        (a - 77.03).abs() <= 0.01 && (b - 61.21).abs() <= 0.01,
        format!("{a:.2}% and {b:.2}%"),
    )
}

fn c6_range_normalization() -> Outcome {
    let sim = SimConfig {
        sequences: 1,
        ..SimConfig::default()
    };
    let split = make_split(
        &sim,
        "t",
        &DeviceModel::solid_state(),
        6,
        1,
        false,
        Exec::Sequential,
    )
    .map_err(|e| e.to_string())?;
    let mut frame = split.sequences[0].frames[0].clone();
    frame.points.extend([[0.0, 0.0, 0.0], [100.0, 0.0, 0.0]]);
    let (g, _) = range_normalize(&frame, &[]);
    let n = g.points.len();
    let ends = g.points[n - 2] == [-50.0, 0.0, 0.0] && g.points[n - 1] == [50.0, 0.0, 0.0];
    let interval = g.device.range_interval == [-50.0, 50.0];
    let to64 = |p: [f32; 3]| [p[0] as f64, p[1] as f64, p[2] as f64];
    // the shift itself is exact in f64; storing as f32 rounds each output
    // coordinate by at most half an ulp at magnitude 64
    let tol = 2.0 * f32::EPSILON as f64 * 64.0;
    let mut worst = 0.0f64;
    let step = (n / 400).max(1);
    for i in (0..n).step_by(step) {
        for j in (0..i).step_by(step) {
            let d0 = dist2(to64(frame.points[i]), to64(frame.points[j])).sqrt();
            let d1 = dist2(to64(g.points[i]), to64(g.points[j])).sqrt();
            worst = worst.max((d0 - d1).abs());
        }
    }
    let mech = PointFrame {
        device: DeviceModel::mechanical(),
        ..frame.clone()
    };
    let unchanged = range_normalize(&mech, &[]).0 == mech;
    check(
        ends && interval && worst <= tol && unchanged,
        format!("[0,100] -> [-50,50]: {ends}, max distance change {worst:.1e} m (bound {tol:.1e}), mechanical unchanged: {unchanged}"),
    )
}

struct MatrixRuns {
    outcomes: Vec<MatrixOutcome>,
    seconds: f64,
}

fn matrix_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.sim.seed = seed;
    cfg.matrix.oracle = false;
    cfg
}

fn run_matrices() -> Result<MatrixRuns, String> {
    let t = Instant::now();
    let mut outcomes = Vec::new();
    for seed in 0..3 {
        let out = run_matrix(&matrix_config(seed), None).map_err(|e| e.to_string())?;
        for r in &out.records {
            println!("    seed {seed} {:<24} mAP {:.4}", r.method, r.map);
        }
        outcomes.push(out);
    }
    Ok(MatrixRuns {
        outcomes,
        seconds: t.elapsed().as_secs_f64(),
    })
}

fn median_of(runs: &MatrixRuns, method: &str) -> Result<f64, String> {
    let mut v: Vec<f64> = runs
        .outcomes
        .iter()
        .map(|o| o.map_of(method).ok_or(format!("no `{method}` record")))
        .collect::<Result<_, _>>()?;
    v.sort_by(f64::total_cmp);
    Ok(v[v.len() / 2])
}

/// Wall time of the stages the three-arm comparison needs: data, the shared
/// source model and the DT, ST and CL3D arms, summed over seeds.
fn ordering_seconds(runs: &MatrixRuns) -> f64 {
    let stages = ["benchmark", "source/none", "DT+RN", "ST+RN", "CL3D+RN"];
    runs.outcomes
        .iter()
        .flat_map(|o| stages.iter().filter_map(|k| o.seconds.get(*k)))
        .sum()
}

fn c7_method_ordering(runs: &MatrixRuns) -> Outcome {
    let dt = median_of(runs, "DT+RN")?;
    let st = median_of(runs, "ST+RN")?;
    let cl = median_of(runs, "CL3D+RN")?;
    let audit = runs.outcomes.iter().any(|o| o.label_access_before_oracle);
    let margin = cl - st;
    let secs = ordering_seconds(runs);
    check(
        cl > st && st > dt && margin >= 0.03 && secs < 1800.0 && !audit,
        format!(
            "median mAP DT {dt:.4}, ST {st:.4}, CL3D {cl:.4}; margin {margin:.4}; {secs:.0}s for three seeds; target labels read: {audit}"
        ),
    )
}

fn c8_ablation_ordering(runs: &MatrixRuns) -> Outcome {
    let full = median_of(runs, "CL3D+RN")?;
    let no_sga = median_of(runs, "CL3D+RN w/o SGA")?;
    let no_tma = median_of(runs, "CL3D+RN w/o TMA")?;
    let none = median_of(runs, "CL3D+RN w/o TMA & SGA")?;
    check(
        full >= no_sga && full >= no_tma && no_sga >= none && no_tma >= none,
        format!("median mAP full {full:.4}, w/o SGA {no_sga:.4}, w/o TMA {no_tma:.4}, neither {none:.4}"),
    )
}

fn c9_range_ordering(runs: &MatrixRuns) -> Outcome {
    let st = median_of(runs, "ST")?;
    let rn = median_of(runs, "ST+RN")?;
    let sym = median_of(runs, "ST+RSym")?;
    let sp = median_of(runs, "ST+RSp")?;
    check(
        rn > st && st >= sym.max(sp),
        format!("median mAP ST {st:.4}, ST+RN {rn:.4}, ST+RSym {sym:.4}, ST+RSp {sp:.4}"),
    )
}

fn c10_ap() -> Outcome {
    let det = |x: f64, s: f64| cl3d::detector::Detection {
        center: [x, 0.0],
        size: [1.9, 4.5],
        yaw: 0.0,
        velocity: [0.0; 2],
        class_id: 0,
        score: s,
    };
    let frames = vec![FrameResult {
        detections: vec![
            det(0.0, 0.9),
            det(50.0, 0.8),
            det(10.0, 0.7),
            det(20.0, 0.6),
        ],
        ground_truth: vec![
            label(0.0, 0.0, 4.5, 1.9, 1.0),
            label(10.0, 0.0, 4.5, 1.9, 1.0),
            label(20.0, 0.0, 4.5, 1.9, 1.0),
        ],
    }];
    let hand = average_precision(&frames, 0, 1.0)
        .map_err(|e| e.to_string())?
        .ap
        .unwrap_or(-1.0);
    // three recall steps of 1/3 summed in floating point
    let exact = (hand - 5.0 / 6.0).abs() < 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut mismatches = 0;
    for _ in 0..100 {
        let frames: Vec<FrameResult> = (0..rng.random_range(1..4))
            .map(|_| FrameResult {
                ground_truth: (0..rng.random_range(0..5))
                    .map(|_| {
                        label(
                            rng.random_range(0.0..6.0),
                            rng.random_range(0.0..6.0),
                            4.5,
                            1.9,
                            1.0,
                        )
                    })
                    .collect(),
                detections: (0..rng.random_range(0..6))
                    .map(|_| {
                        let mut d = det(rng.random_range(0.0..6.0), rng.random_range(0.0..1.0));
                        d.center[1] = rng.random_range(0.0..6.0);
                        d
                    })
                    .collect(),
            })
            .collect();
        for t in [0.5, 1.0, 2.0, 4.0] {
            let got = average_precision(&frames, 0, t)
                .map_err(|e| e.to_string())?
                .ap;
            let want = brute_force_ap(&frames, 0, t);
            let same = match (got, want) {
                (None, None) => true,
                (Some(a), Some(b)) => (a - b).abs() < 1e-12,
                _ => false,
            };
            mismatches += (!same) as usize;
        }
    }
    check(
        exact && mismatches == 0,
        format!("hand example {hand:.15}, {mismatches} mismatches on 100 random instances"),
    )
}

fn c11_rigid() -> Outcome {
    let state = DetectorState::new(DetectorConfig::default(), 11).map_err(|e| e.to_string())?;
    let sampling = ShapeSampling::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let b = Box3D::new([6.0, 4.0, -0.9], [4.5, 1.9, 1.6], -0.7);
    let mut pts: Vec<Vec3> = (0..80)
        .map(|_| {
            b.to_world([
                rng.random_range(-2.2..2.2),
                rng.random_range(-0.9..0.9),
                rng.random_range(-0.75..0.75),
            ])
        })
        .collect();
    pts.extend((0..50).map(|_| {
        [
            rng.random_range(-30.0..30.0),
            rng.random_range(10.0..30.0),
            -1.7,
        ]
    }));
    let base =
        cl3d::alignment::extract_local(&state, &pts, &b, &sampling).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let theta = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let t = [
            rng.random_range(-40.0..40.0),
            rng.random_range(-40.0..40.0),
            rng.random_range(-1.0..1.0),
        ];
        let mv = |p: Vec3| {
            let r = rotate_z(p, theta);
            [r[0] + t[0], r[1] + t[1], r[2] + t[2]]
        };
        let moved: Vec<Vec3> = pts.iter().map(|p| mv(*p)).collect();
        let mb = Box3D::new(mv(b.center), b.size, b.yaw + theta);
        let f = cl3d::alignment::extract_local(&state, &moved, &mb, &sampling)
            .map_err(|e| e.to_string())?;
        for (x, y) in base.iter().zip(&f) {
            worst = worst.max((x - y).abs());
        }
    }
    check(
        worst < 1e-6,
        format!("50 transforms, max deviation {worst:.1e}"),
    )
}

fn digest(path: &Path) -> Result<Vec<u8>, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(Sha256::digest(&bytes).to_vec())
}

fn c12_reproducible() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    std::fs::create_dir_all(&a).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(&b).map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [
        ("sim.sequences", "6"),
        ("sim.eval_sequences", "4"),
        ("sim.seed", "12"),
        ("experiment.seed", "12"),
        ("experiment.epochs_source", "2"),
        ("experiment.mode", "cl3d"),
    ] {
        cfg.set(k, v).map_err(|e| e.to_string())?;
    }
    run_experiment(&cfg, Some(&a)).map_err(|e| e.to_string())?;
    let text =
        std::fs::read_to_string(a.join(pipeline::RESOLVED_CONFIG)).map_err(|e| e.to_string())?;
    let mut again = ExperimentConfig::default();
    again.apply_text(&text).map_err(|e| e.to_string())?;
    run_experiment(&again, Some(&b)).map_err(|e| e.to_string())?;
    let mut same = Vec::new();
    for f in [
        pipeline::METRICS_JSON,
        pipeline::METRICS_CSV,
        pipeline::ADAPTED_CHECKPOINT,
        pipeline::PSEUDO_LABELS,
    ] {
        same.push((f, digest(&a.join(f))? == digest(&b.join(f))?));
    }
    let all = same.iter().all(|(_, s)| *s);
    let detail = same
        .iter()
        .map(|(f, s)| format!("{f} {}", if *s { "equal" } else { "differs" }))
        .collect::<Vec<_>>();
    check(all, detail.join(", "))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("CL3D_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    // quiet the per-criterion panic hook; failures are reported below
    std::panic::set_hook(Box::new(|_| {}));

    let simple: [(usize, &str, fn() -> Outcome); 9] = [
        (1, "gradient exactness", c1_gradients),
        (2, "FPS oracle equivalence", c2_fps),
        (3, "EMA closed form", c3_ema),
        (4, "reweight formula", c4_reweight),
        (5, "closed-gap arithmetic", c5_closed_gap),
        (6, "range normalization", c6_range_normalization),
        (10, "AP correctness", c10_ap),
        (11, "rigid invariance of the shape feature", c11_rigid),
        (12, "reproducibility from resolved config", c12_reproducible),
    ];
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let run = |f: &dyn Fn() -> Outcome| -> (Outcome, f64) {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        (r, t.elapsed().as_secs_f64())
    };
    for (n, name, f) in simple {
        if wanted(n) {
            let (r, s) = run(&f);
            results.push((n, name, r, s));
        }
    }
    if wanted(7) || wanted(8) || wanted(9) {
        let t = Instant::now();
        match run_matrices() {
            Ok(runs) => {
                let table: [(usize, &str, fn(&MatrixRuns) -> Outcome); 3] = [
                    (7, "detector ordering DT < ST < CL3D", c7_method_ordering),
                    (8, "module ablation ordering", c8_ablation_ordering),
                    (9, "range strategy ordering", c9_range_ordering),
                ];
                for (n, name, f) in table {
                    if wanted(n) {
                        let (r, _) = run(&|| f(&runs));
                        results.push((n, name, r, runs.seconds));
                    }
                }
            }
            Err(e) => {
                for n in [7, 8, 9] {
                    if wanted(n) {
                        results.push((n, "matrix run", Err(e.clone()), t.elapsed().as_secs_f64()));
                    }
                }
            }
        }
    }
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, name, r, secs) in &results {
        let (tag, detail) = match r {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2}: {tag}  {name}: {detail} ({secs:.1}s)");
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", results.len());
        // failures are reported, not fatal, unless asked for
        if std::env::var_os("CL3D_ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
        return;
    }
    println!("all {} criteria passed", results.len());
}

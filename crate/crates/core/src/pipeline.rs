//! Stage orchestration: source pretraining, pseudo-labeling, plain or
//! prototype-reweighted self-training, evaluation, and the comparison
//! matrix over modes and range strategies.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{label_feature, AlignmentConfig, FusionFeature};
use crate::config::{kv, parse_bool, parse_list, parse_value, render_list, KvConfig};
use crate::detector::{
    decode, load_checkpoint, save_checkpoint, train_epoch, Detection, DetectorConfig,
    DetectorState, FeatureMaps, TrainOptions, TrainSample, WeightProvider,
};
use crate::eval::{
    closed_gap, mean_ap, metrics_csv, metrics_json, FrameResult, MatchSpec, MetricRecord,
};
use crate::geometry::{rotate_z, to_f64, Vec3};
use crate::io::{read_file, write_atomic};
use crate::par::{self, Exec};
use crate::pointops::{
    crop_points_in_box, fan_rotation, range_normalize, range_split, range_symmetrize,
    shape_sample_points,
};
use crate::prototype::{effective_weight_map, PrototypeConfig, PrototypeStore};
use crate::sim::{
    make_benchmark, mix_seed, Benchmark, DeviceKind, ObjectLabel, PointFrame, SimConfig, Split,
};
use crate::{Error, Result};

pub const RESOLVED_CONFIG: &str = "config.resolved.cfg";
pub const SOURCE_CHECKPOINT: &str = "source.clds";
pub const ADAPTED_CHECKPOINT: &str = "adapted.clds";
pub const PROTOTYPES: &str = "prototypes.clpt";
pub const PSEUDO_LABELS: &str = "pseudo_labels.jsonl";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Dt,
    St,
    Cl3d,
    Oracle,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dt" => Some(Mode::Dt),
            "st" => Some(Mode::St),
            "cl3d" => Some(Mode::Cl3d),
            "oracle" => Some(Mode::Oracle),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Dt => "DT",
            Mode::St => "ST",
            Mode::Cl3d => "CL3D",
            Mode::Oracle => "Oracle",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        Mode::parse(s).ok_or(())
    }
}

/// How source and target perception ranges are reconciled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RangeStrategy {
    None,
    /// Translate each frame so its perception interval is centered.
    Rn,
    /// Mirror solid-state fans through the origin.
    RSym,
    /// Cut mechanical sweeps into forward-facing fans.
    RSp,
}

impl RangeStrategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Some(RangeStrategy::None),
            "rn" => Some(RangeStrategy::Rn),
            "rsym" => Some(RangeStrategy::RSym),
            "rsp" => Some(RangeStrategy::RSp),
            _ => None,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            RangeStrategy::None => "none",
            RangeStrategy::Rn => "rn",
            RangeStrategy::RSym => "rsym",
            RangeStrategy::RSp => "rsp",
        }
    }

    /// Suffix used in method names, e.g. `ST+RN`.
    pub fn suffix(self) -> &'static str {
        match self {
            RangeStrategy::None => "",
            RangeStrategy::Rn => "+RN",
            RangeStrategy::RSym => "+RSym",
            RangeStrategy::RSp => "+RSp",
        }
    }

    /// Strategies that leave mechanical source frames untouched share one
    /// source model.
    pub fn source_group(self) -> RangeStrategy {
        match self {
            RangeStrategy::RSp => RangeStrategy::RSp,
            _ => RangeStrategy::None,
        }
    }
}

impl fmt::Display for RangeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl std::str::FromStr for RangeStrategy {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        RangeStrategy::parse(s).ok_or(())
    }
}

/// Which arms `run_matrix` executes.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixConfig {
    /// Strategies for the DT and ST arms.
    pub strategies: Vec<RangeStrategy>,
    /// Strategies for the full CL3D arm.
    pub cl3d_strategies: Vec<RangeStrategy>,
    /// Add the single-branch and no-branch CL3D arms (first CL3D strategy).
    pub ablations: bool,
    pub oracle: bool,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            strategies: vec![
                RangeStrategy::None,
                RangeStrategy::Rn,
                RangeStrategy::RSym,
                RangeStrategy::RSp,
            ],
            cl3d_strategies: vec![RangeStrategy::Rn],
            ablations: true,
            oracle: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub range_strategy: RangeStrategy,
    pub seed: u64,
    pub epochs_source: usize,
    pub epochs_target: usize,
    pub epochs_oracle: usize,
    pub rounds: usize,
    /// Worker threads; 0 picks the number of cores.
    pub workers: usize,
    pub parallel: bool,
    pub sim: SimConfig,
    pub detector: DetectorConfig,
    pub alignment: AlignmentConfig,
    pub prototype: PrototypeConfig,
    pub eval: MatchSpec,
    pub matrix: MatrixConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Cl3d,
            range_strategy: RangeStrategy::Rn,
            seed: 0,
            epochs_source: 20,
            epochs_target: 1,
            epochs_oracle: 20,
            rounds: 1,
            workers: 0,
            parallel: true,
            sim: SimConfig::default(),
            detector: DetectorConfig::default(),
            alignment: AlignmentConfig::default(),
            prototype: PrototypeConfig::default(),
            eval: MatchSpec::default(),
            matrix: MatrixConfig::default(),
        }
    }
}

fn parse_strategies(key: &str, value: &str) -> Result<Vec<RangeStrategy>> {
    parse_list::<RangeStrategy>(key, value)
}

impl KvConfig for ExperimentConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key.split_once('.').unwrap_or(("experiment", key));
        match section {
            "sim" => return self.sim.set(key, value),
            "detector" => return self.detector.set(key, value),
            "alignment" => return self.alignment.set(key, value),
            "prototype" => return self.prototype.set(key, value),
            "eval" => return self.eval.set(key, value),
            "experiment" | "matrix" => {}
            _ => return Err(Error::UnknownKey(key.into())),
        }
        match (section, field) {
            ("experiment", "mode") => {
                self.mode = parse_value(key, value)?;
            }
            ("experiment", "range_strategy") => self.range_strategy = parse_value(key, value)?,
            ("experiment", "seed") => self.seed = parse_value(key, value)?,
            ("experiment", "epochs_source") => self.epochs_source = parse_value(key, value)?,
            ("experiment", "epochs_target") => self.epochs_target = parse_value(key, value)?,
            ("experiment", "epochs_oracle") => self.epochs_oracle = parse_value(key, value)?,
            ("experiment", "rounds") => self.rounds = parse_value(key, value)?,
            ("experiment", "workers") => self.workers = parse_value(key, value)?,
            ("experiment", "parallel") => self.parallel = parse_bool(key, value)?,
            ("matrix", "strategies") => self.matrix.strategies = parse_strategies(key, value)?,
            ("matrix", "cl3d_strategies") => {
                self.matrix.cl3d_strategies = parse_strategies(key, value)?
            }
            ("matrix", "ablations") => self.matrix.ablations = parse_bool(key, value)?,
            ("matrix", "oracle") => self.matrix.oracle = parse_bool(key, value)?,
            _ => return Err(Error::UnknownKey(key.into())),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        let mode = match self.mode {
            Mode::Dt => "dt",
            Mode::St => "st",
            Mode::Cl3d => "cl3d",
            Mode::Oracle => "oracle",
        };
        let keys =
            |v: &[RangeStrategy]| render_list(&v.iter().map(|s| s.key()).collect::<Vec<_>>());
        let mut out = vec![
            kv("experiment.mode", mode),
            kv("experiment.range_strategy", self.range_strategy.key()),
            kv("experiment.seed", self.seed),
            kv("experiment.epochs_source", self.epochs_source),
            kv("experiment.epochs_target", self.epochs_target),
            kv("experiment.epochs_oracle", self.epochs_oracle),
            kv("experiment.rounds", self.rounds),
            kv("experiment.workers", self.workers),
            kv("experiment.parallel", self.parallel),
            kv("matrix.strategies", keys(&self.matrix.strategies)),
            kv("matrix.cl3d_strategies", keys(&self.matrix.cl3d_strategies)),
            kv("matrix.ablations", self.matrix.ablations),
            kv("matrix.oracle", self.matrix.oracle),
        ];
        out.extend(self.sim.entries());
        out.extend(self.detector.entries());
        out.extend(self.alignment.entries());
        out.extend(self.prototype.entries());
        out.extend(self.eval.entries());
        out
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.detector.validate()?;
        self.prototype.validate()?;
        self.eval.validate()?;
        if self.rounds == 0 {
            return Err(Error::InvalidConfig(
                "experiment.rounds must be at least 1".into(),
            ));
        }
        if self.mode == Mode::Cl3d && self.alignment.use_tma && self.sim.frames < 2 {
            return Err(Error::InvalidConfig(
                "temporal motion features need consecutive frames".into(),
            ));
        }
        Ok(())
    }

    pub fn exec(&self) -> Exec {
        if self.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    fn stage_seed(&self, tag: &str) -> u64 {
        let h = tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
        });
        mix_seed(self.seed, h)
    }
}

/// One frame pair after the range strategy, possibly one of several fans.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub seq: usize,
    pub frame: usize,
    pub fan: Option<usize>,
    pub cur: Vec<[f32; 3]>,
    pub prev: Vec<[f32; 3]>,
    pub labels: Vec<ObjectLabel>,
}

/// One transformed view of a frame: fan index (RSp only), points, labels.
type View = (Option<usize>, PointFrame, Vec<ObjectLabel>);

fn transform_frame(
    frame: &PointFrame,
    labels: &[ObjectLabel],
    strategy: RangeStrategy,
) -> Result<Vec<View>> {
    let kind = frame.device.kind;
    Ok(match strategy {
        RangeStrategy::None => vec![(None, frame.clone(), labels.to_vec())],
        RangeStrategy::Rn => {
            let (f, l) = range_normalize(frame, labels);
            vec![(None, f, l)]
        }
        RangeStrategy::RSym if kind == DeviceKind::SolidState => {
            let (f, l) = range_symmetrize(frame, labels)?;
            vec![(None, f, l)]
        }
        RangeStrategy::RSp if kind == DeviceKind::Mechanical => range_split(frame, labels)?
            .into_iter()
            .map(|p| (Some(p.fan), p.frame, p.labels))
            .collect(),
        _ => vec![(None, frame.clone(), labels.to_vec())],
    })
}

/// Applies `strategy` to every consecutive pair of `split`. Labels are read
/// (and, for withheld splits, audited) only when `with_labels` is set.
pub fn prepare_split(
    split: &Split,
    strategy: RangeStrategy,
    with_labels: bool,
    exec: Exec,
) -> Result<Vec<PreparedPair>> {
    let pairs = split.pair_indices();
    let labels: Vec<Vec<ObjectLabel>> = pairs
        .iter()
        .map(|&(s, f)| {
            if with_labels {
                split.labels(s, f).to_vec()
            } else {
                Vec::new()
            }
        })
        .collect();
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let out = par::map(exec, &idx, |&i| -> Result<Vec<PreparedPair>> {
        let (s, f) = pairs[i];
        let seq = &split.sequences[s];
        let cur = transform_frame(&seq.frames[f], &labels[i], strategy)?;
        let prev = transform_frame(&seq.frames[f - 1], &[], strategy)?;
        Ok(cur
            .into_iter()
            .zip(prev)
            .map(|((fan, c, l), (_, p, _))| PreparedPair {
                seq: s,
                frame: f,
                fan,
                cur: c.points,
                prev: p.points,
                labels: l,
            })
            .collect())
    });
    Ok(out
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect())
}

/// Maps detections from the strategy's frame back to device coordinates and
/// drops those in mirrored halves.
fn restore_detections(
    dets: Vec<Detection>,
    strategy: RangeStrategy,
    frame: &PointFrame,
    fan: Option<usize>,
) -> Vec<Detection> {
    match (strategy, frame.device.kind) {
        (RangeStrategy::Rn, _) => {
            let shift = frame.device.range_midpoint();
            dets.into_iter()
                .map(|mut d| {
                    d.center[0] += shift;
                    d
                })
                .collect()
        }
        (RangeStrategy::RSym, DeviceKind::SolidState) => {
            dets.into_iter().filter(|d| d.center[0] >= 0.0).collect()
        }
        (RangeStrategy::RSp, DeviceKind::Mechanical) => {
            let a = -fan_rotation(fan.unwrap_or(0));
            dets.into_iter()
                .map(|mut d| {
                    let c = rotate_z([d.center[0], d.center[1], 0.0], a);
                    let v = rotate_z([d.velocity[0], d.velocity[1], 0.0], a);
                    d.center = [c[0], c[1]];
                    d.velocity = [v[0], v[1]];
                    d.yaw = crate::geometry::wrap_angle(d.yaw + a);
                    d
                })
                .collect()
        }
        _ => dets,
    }
}

fn shapes_for(
    cur: &[[f32; 3]],
    labels: &[ObjectLabel],
    cfg: &AlignmentConfig,
    classes: usize,
) -> Vec<(Vec<Vec3>, usize)> {
    let frame = PointFrame {
        points: cur.to_vec(),
        timestamp: 0.0,
        device: crate::sim::DeviceModel::mechanical(),
        frame_index: 0,
    };
    labels
        .iter()
        .filter(|l| l.class_id < classes)
        .filter_map(|l| {
            let crop = crop_points_in_box(&frame, &l.bbox, cfg.sampling.margin);
            shape_sample_points(&crop, &l.bbox, &cfg.sampling)
                .ok()
                .map(|s| (s.points, l.class_id))
        })
        .collect()
}

/// Ground-truth training samples with velocity and shape supervision.
pub fn labeled_samples(cfg: &ExperimentConfig, pairs: &[PreparedPair]) -> Vec<TrainSample> {
    par::map(cfg.exec(), pairs, |p| TrainSample {
        cur: p.cur.clone(),
        prev: p.prev.clone(),
        labels: p.labels.clone(),
        velocity_supervised: true,
        shapes: shapes_for(
            &p.cur,
            &p.labels,
            &cfg.alignment,
            cfg.detector.shape_classes,
        ),
    })
}

fn train_options(cfg: &ExperimentConfig, freeze_shape: bool) -> TrainOptions {
    TrainOptions {
        augmentation: cfg.detector.augment.then_some(Default::default()),
        exec: cfg.exec(),
        freeze_shape,
    }
}

/// Fresh model trained with full supervision on `samples`.
pub fn train_supervised(
    cfg: &ExperimentConfig,
    samples: &[TrainSample],
    epochs: usize,
    tag: &str,
) -> Result<DetectorState> {
    let mut state =
        DetectorState::new(cfg.detector.clone(), cfg.stage_seed(&format!("{tag}/init")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(&format!("{tag}/train")));
    let opts = train_options(cfg, false);
    for epoch in 0..epochs {
        let t = Instant::now();
        let stats = train_epoch(&mut state, samples, &opts, None, &mut rng)?;
        log::info!(
            "{tag}: epoch {}/{epochs} loss {:.4} (cls {:.4} reg {:.4} motion {:.4} aux {:.4}) in {:.1}s",
            epoch + 1,
            stats.mean.total(),
            stats.mean.cls,
            stats.mean.reg,
            stats.mean.motion,
            stats.mean.aux,
            t.elapsed().as_secs_f64()
        );
    }
    state.round_to_f32();
    Ok(state)
}

pub fn pretrain_source(
    cfg: &ExperimentConfig,
    bench: &Benchmark,
    strategy: RangeStrategy,
) -> Result<DetectorState> {
    let pairs = prepare_split(&bench.source, strategy, true, cfg.exec())?;
    let samples = labeled_samples(cfg, &pairs);
    train_supervised(
        cfg,
        &samples,
        cfg.epochs_source,
        &format!("source/{}", strategy.source_group()),
    )
}

pub fn train_oracle(
    cfg: &ExperimentConfig,
    bench: &Benchmark,
    strategy: RangeStrategy,
) -> Result<DetectorState> {
    let pairs = prepare_split(&bench.target_train, strategy, true, cfg.exec())?;
    let samples = labeled_samples(cfg, &pairs);
    train_supervised(
        cfg,
        &samples,
        cfg.epochs_oracle,
        &format!("oracle/{strategy}"),
    )
}

/// Pseudo-labels of one prepared pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoFrame {
    pub seq: usize,
    pub frame: usize,
    pub fan: Option<usize>,
    pub labels: Vec<ObjectLabel>,
}

fn detections_to_labels(dets: &[Detection], cfg: &DetectorConfig) -> Vec<ObjectLabel> {
    dets.iter()
        .enumerate()
        .map(|(i, d)| d.to_label(i as u32, cfg.ground_z, cfg.default_height))
        .collect()
}

/// Decodes every target pair with `score_floor`; detections keep their score
/// as confidence and no further filtering happens.
pub fn generate_pseudo_labels(
    state: &DetectorState,
    pairs: &[PreparedPair],
    score_floor: f64,
    exec: Exec,
) -> Vec<PseudoFrame> {
    par::map(exec, pairs, |p| {
        let maps = state.encode(&p.cur, &p.prev);
        let dets = decode(&maps, score_floor, state.config.max_detections);
        PseudoFrame {
            seq: p.seq,
            frame: p.frame,
            fan: p.fan,
            labels: detections_to_labels(&dets, &state.config),
        }
    })
}

pub fn pseudo_labels_to_jsonl(frames: &[PseudoFrame]) -> String {
    let mut out = String::new();
    for f in frames {
        let fan = f.fan.map_or("null".to_string(), |k| k.to_string());
        for l in &f.labels {
            out.push_str(&format!(
                "{{\"seq\":{},\"frame\":{},\"fan\":{fan},\"label\":{}}}\n",
                f.seq,
                f.frame,
                l.to_json_line()
            ));
        }
    }
    out
}

/// Inverse of [`pseudo_labels_to_jsonl`], regrouped onto `pairs` so frames
/// without labels are kept.
pub fn pseudo_labels_from_jsonl(text: &str, pairs: &[PreparedPair]) -> Result<Vec<PseudoFrame>> {
    let mut by_key: BTreeMap<(usize, usize, Option<usize>), Vec<ObjectLabel>> = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        let field = |k: &str| {
            v.get(k)
                .and_then(|x| x.as_u64())
                .ok_or_else(|| Error::Format(format!("pseudo-label line lacks `{k}`: {line}")))
        };
        let key = (
            field("seq")? as usize,
            field("frame")? as usize,
            v.get("fan").and_then(|x| x.as_u64()).map(|k| k as usize),
        );
        let label = v
            .get("label")
            .ok_or_else(|| Error::Format(format!("pseudo-label line lacks `label`: {line}")))?;
        by_key
            .entry(key)
            .or_default()
            .push(ObjectLabel::from_json_line(&label.to_string())?);
    }
    Ok(pairs
        .iter()
        .map(|p| PseudoFrame {
            seq: p.seq,
            frame: p.frame,
            fan: p.fan,
            labels: by_key.remove(&(p.seq, p.frame, p.fan)).unwrap_or_default(),
        })
        .collect())
}

/// Fusion features of `labels` in one frame; `None` where the feature is
/// null (e.g. an ablation with nothing left to compare).
fn frame_features(
    state: &DetectorState,
    points: &[[f32; 3]],
    labels: &[ObjectLabel],
    maps: &FeatureMaps,
    cfg: &AlignmentConfig,
) -> Result<Vec<Option<FusionFeature>>> {
    let pts: Vec<Vec3> = points.iter().map(|p| to_f64(*p)).collect();
    labels
        .iter()
        .map(|l| {
            if l.class_id >= state.config.classes
                || !maps.grid.contains(l.bbox.center[0], l.bbox.center[1])
            {
                return Ok(None);
            }
            match label_feature(state, &pts, &l.bbox, maps, cfg, l.confidence, l.class_id) {
                Ok(f) => Ok(Some(f)),
                Err(Error::NullFeature) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Seeds class prototypes from ground-truth source objects (confidence 1),
/// one EMA step per batch.
pub fn seed_prototypes(
    state: &DetectorState,
    cfg: &ExperimentConfig,
    pairs: &[PreparedPair],
) -> Result<PrototypeStore> {
    let dim = state.config.shape_out + 2 * state.config.channels;
    let mut store = PrototypeStore::new(state.config.classes, dim, cfg.prototype.alpha);
    for chunk in pairs.chunks(state.config.batch.max(1)) {
        let feats = par::map(cfg.exec(), chunk, |p| {
            let maps = state.encode(&p.cur, &p.prev);
            let gt: Vec<ObjectLabel> = p
                .labels
                .iter()
                .map(|l| ObjectLabel {
                    confidence: 1.0,
                    ..l.clone()
                })
                .collect();
            frame_features(state, &p.cur, &gt, &maps, &cfg.alignment)
        });
        let mut batch = Vec::new();
        for f in feats {
            batch.extend(f?.into_iter().flatten());
        }
        store.update(&batch)?;
    }
    Ok(store)
}

/// Diagnostics of the prototype reweighting over a self-training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReweightStats {
    pub labels: usize,
    pub cold_fallbacks: usize,
    pub null_features: usize,
    pub mean_similarity: f64,
}

/// Per-iteration prototype update and similarity-scaled loss weights.
pub struct PrototypeReweighter<'a> {
    pub store: &'a mut PrototypeStore,
    pub alignment: AlignmentConfig,
    pub prototype: PrototypeConfig,
    pub stats: ReweightStats,
    /// Replaces every similarity by this value (reduction checks).
    pub fixed_similarity: Option<f64>,
}

impl WeightProvider for PrototypeReweighter<'_> {
    fn weights(
        &mut self,
        state: &DetectorState,
        batch: &[TrainSample],
        maps: &[FeatureMaps],
    ) -> Result<Vec<Option<Vec<f64>>>> {
        if !self.alignment.use_sga && !self.alignment.use_tma && self.fixed_similarity.is_none() {
            return Ok(vec![None; batch.len()]);
        }
        let mut per_sample = Vec::with_capacity(batch.len());
        for (s, m) in batch.iter().zip(maps) {
            per_sample.push(frame_features(
                state,
                &s.cur,
                &s.labels,
                m,
                &self.alignment,
            )?);
        }
        let warm: Vec<bool> = (0..state.config.classes)
            .map(|c| self.store.is_warm(c))
            .collect();
        let all: Vec<FusionFeature> = per_sample.iter().flatten().flatten().cloned().collect();
        self.store.update(&all)?;
        let grid = state.config.grid;
        let classes = state.config.classes;
        let mut out = Vec::with_capacity(batch.len());
        for (s, feats) in batch.iter().zip(&per_sample) {
            let mut sims = Vec::with_capacity(s.labels.len());
            for (l, f) in s.labels.iter().zip(feats) {
                let sp = match (self.fixed_similarity, f) {
                    (Some(v), _) => v,
                    (None, None) => {
                        self.stats.null_features += 1;
                        l.confidence
                    }
                    (None, Some(f)) if !warm.get(f.class_id).copied().unwrap_or(false) => {
                        self.stats.cold_fallbacks += 1;
                        l.confidence
                    }
                    (None, Some(f)) => self.store.similarity(f)?,
                };
                self.stats.labels += 1;
                self.stats.mean_similarity += sp;
                sims.push(sp);
            }
            out.push(Some(effective_weight_map(
                &s.labels,
                &sims,
                &grid,
                classes,
                self.prototype.w_bg,
            )?));
        }
        Ok(out)
    }
}

/// Training samples from prepared target pairs and their pseudo-labels.
pub fn pseudo_samples(pairs: &[PreparedPair], pseudo: &[PseudoFrame]) -> Result<Vec<TrainSample>> {
    if pairs.len() != pseudo.len() {
        return Err(Error::ShapeMismatch {
            expected: pairs.len(),
            got: pseudo.len(),
        });
    }
    Ok(pairs
        .iter()
        .zip(pseudo)
        .map(|(p, q)| TrainSample {
            cur: p.cur.clone(),
            prev: p.prev.clone(),
            labels: q.labels.clone(),
            velocity_supervised: false,
            shapes: Vec::new(),
        })
        .collect())
}

/// Fine-tunes on pseudo-labels for `epochs_target` passes. With a
/// reweighter the classification loss is scaled per pixel; without one
/// every pixel has weight 1.
pub fn self_train(
    mut state: DetectorState,
    cfg: &ExperimentConfig,
    samples: &[TrainSample],
    mut reweighter: Option<&mut PrototypeReweighter<'_>>,
    tag: &str,
) -> Result<DetectorState> {
    state.reset_optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(&format!("{tag}/train")));
    let opts = train_options(cfg, true);
    for epoch in 0..cfg.epochs_target {
        let t = Instant::now();
        let provider: Option<&mut dyn WeightProvider> = match reweighter.as_deref_mut() {
            Some(r) => Some(r),
            None => None,
        };
        let stats = train_epoch(&mut state, samples, &opts, provider, &mut rng)?;
        log::info!(
            "{tag}: target epoch {}/{} loss {:.4} in {:.1}s",
            epoch + 1,
            cfg.epochs_target,
            stats.mean.total(),
            t.elapsed().as_secs_f64()
        );
    }
    state.round_to_f32();
    Ok(state)
}

/// Center-distance mAP on a labeled split, with detections mapped back to
/// device coordinates so every strategy is scored against the same boxes.
pub fn evaluate(
    state: &DetectorState,
    cfg: &ExperimentConfig,
    split: &Split,
    strategy: RangeStrategy,
    method: &str,
) -> Result<MetricRecord> {
    let pairs = prepare_split(split, strategy, false, cfg.exec())?;
    let dets = par::map(cfg.exec(), &pairs, |p| {
        let maps = state.encode(&p.cur, &p.prev);
        let d = decode(
            &maps,
            cfg.detector.eval_score_floor,
            cfg.detector.max_detections,
        );
        restore_detections(d, strategy, &split.sequences[p.seq].frames[p.frame], p.fan)
    });
    let mut frames: BTreeMap<(usize, usize), FrameResult> = BTreeMap::new();
    for (p, d) in pairs.iter().zip(dets) {
        frames
            .entry((p.seq, p.frame))
            .or_default()
            .detections
            .extend(d);
    }
    let mut list = Vec::with_capacity(frames.len());
    for ((s, f), mut fr) in frames {
        fr.ground_truth = split.labels(s, f).to_vec();
        list.push(fr);
    }
    let classes: Vec<usize> = (0..cfg.detector.classes).collect();
    mean_ap(&list, &classes, &cfg.eval, method)
}

pub fn method_name(mode: Mode, strategy: RangeStrategy, alignment: &AlignmentConfig) -> String {
    let mut s = format!("{mode}{}", strategy.suffix());
    if mode == Mode::Cl3d {
        match (alignment.use_sga, alignment.use_tma) {
            (true, true) => {}
            (false, true) => s.push_str(" w/o SGA"),
            (true, false) => s.push_str(" w/o TMA"),
            (false, false) => s.push_str(" w/o TMA & SGA"),
        }
    }
    s
}

/// Self-training arm on top of a source model: one or more rounds of
/// pseudo-labeling and fine-tuning.
pub struct AdaptOutcome {
    pub state: DetectorState,
    pub pseudo: Vec<PseudoFrame>,
    pub prototypes: Option<PrototypeStore>,
    pub stats: ReweightStats,
}

pub fn adapt(
    source: &DetectorState,
    cfg: &ExperimentConfig,
    bench: &Benchmark,
    mode: Mode,
    strategy: RangeStrategy,
    initial_pseudo: Option<Vec<PseudoFrame>>,
) -> Result<AdaptOutcome> {
    let target = prepare_split(&bench.target_train, strategy, false, cfg.exec())?;
    let mut store = if mode == Mode::Cl3d {
        let src = prepare_split(&bench.source, strategy, true, cfg.exec())?;
        Some(seed_prototypes(source, cfg, &src)?)
    } else {
        None
    };
    let mut state = source.clone();
    let mut stats = ReweightStats::default();
    let mut pseudo = Vec::new();
    let mut given = initial_pseudo;
    for round in 0..cfg.rounds {
        pseudo = match given.take() {
            Some(p) => p,
            None => generate_pseudo_labels(&state, &target, cfg.detector.score_floor, cfg.exec()),
        };
        let n: usize = pseudo.iter().map(|p| p.labels.len()).sum();
        log::info!(
            "{mode}{}: round {} with {n} pseudo-labels",
            strategy.suffix(),
            round + 1
        );
        let samples = pseudo_samples(&target, &pseudo)?;
        // Every arm of one strategy and round shares the shuffle and
        // augmentation stream, so arms differ only in their loss weights.
        let tag = format!("target/{strategy}/round{round}");
        state = match store.as_mut() {
            Some(store) => {
                let mut r = PrototypeReweighter {
                    store,
                    alignment: cfg.alignment,
                    prototype: cfg.prototype,
                    stats: ReweightStats::default(),
                    fixed_similarity: None,
                };
                let s = self_train(state, cfg, &samples, Some(&mut r), &tag)?;
                stats.labels += r.stats.labels;
                stats.cold_fallbacks += r.stats.cold_fallbacks;
                stats.null_features += r.stats.null_features;
                stats.mean_similarity += r.stats.mean_similarity;
                s
            }
            None => self_train(state, cfg, &samples, None, &tag)?,
        };
    }
    if stats.labels > 0 {
        stats.mean_similarity /= stats.labels as f64;
    }
    Ok(AdaptOutcome {
        state,
        pseudo,
        prototypes: store,
        stats,
    })
}

/// Everything a single experiment produced.
#[derive(Debug)]
pub struct RunArtifacts {
    pub run_dir: Option<PathBuf>,
    pub records: Vec<MetricRecord>,
    pub pseudo_label_count: usize,
    /// Whether any target-train label was read.
    pub target_label_access: bool,
    pub reweight: ReweightStats,
}

fn write_metrics(dir: &Path, records: &[MetricRecord]) -> Result<()> {
    write_atomic(&dir.join(METRICS_JSON), metrics_json(records)?.as_bytes())?;
    write_atomic(&dir.join(METRICS_CSV), metrics_csv(records).as_bytes())
}

pub fn write_resolved_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write_atomic(&dir.join(RESOLVED_CONFIG), cfg.to_text().as_bytes())
}

/// Runs the stages `cfg.mode` needs and evaluates on the target eval split.
/// DT metrics come for free with every non-oracle mode and are reported
/// first.
pub fn run_experiment(cfg: &ExperimentConfig, run_dir: Option<&Path>) -> Result<RunArtifacts> {
    cfg.validate()?;
    if let Some(d) = run_dir {
        write_resolved_config(d, cfg)?;
    }
    let bench = make_benchmark(&cfg.sim, cfg.exec())?;
    let strategy = cfg.range_strategy;
    let mut records = Vec::new();
    let mut pseudo_label_count = 0;
    let mut reweight = ReweightStats::default();
    if cfg.mode == Mode::Oracle {
        let state = train_oracle(cfg, &bench, strategy)?;
        if let Some(d) = run_dir {
            save_checkpoint(&d.join(ADAPTED_CHECKPOINT), &state)?;
        }
        records.push(evaluate(
            &state,
            cfg,
            &bench.target_eval,
            strategy,
            &method_name(Mode::Oracle, strategy, &cfg.alignment),
        )?);
    } else {
        let source = pretrain_source(cfg, &bench, strategy)?;
        if let Some(d) = run_dir {
            save_checkpoint(&d.join(SOURCE_CHECKPOINT), &source)?;
        }
        records.push(evaluate(
            &source,
            cfg,
            &bench.target_eval,
            strategy,
            &method_name(Mode::Dt, strategy, &cfg.alignment),
        )?);
        if cfg.mode != Mode::Dt {
            let out = adapt(&source, cfg, &bench, cfg.mode, strategy, None)?;
            pseudo_label_count = out.pseudo.iter().map(|p| p.labels.len()).sum();
            if let Some(d) = run_dir {
                write_atomic(
                    &d.join(PSEUDO_LABELS),
                    pseudo_labels_to_jsonl(&out.pseudo).as_bytes(),
                )?;
                save_checkpoint(&d.join(ADAPTED_CHECKPOINT), &out.state)?;
                if let Some(p) = &out.prototypes {
                    p.save(&d.join(PROTOTYPES))?;
                }
            }
            records.push(evaluate(
                &out.state,
                cfg,
                &bench.target_eval,
                strategy,
                &method_name(cfg.mode, strategy, &cfg.alignment),
            )?);
            reweight = out.stats;
        }
    }
    if let Some(d) = run_dir {
        write_metrics(d, &records)?;
    }
    Ok(RunArtifacts {
        run_dir: run_dir.map(Path::to_path_buf),
        records,
        pseudo_label_count,
        target_label_access: bench.target_train.label_access_audited(),
        reweight,
    })
}

/// Result of the comparison matrix.
#[derive(Debug)]
pub struct MatrixOutcome {
    pub records: Vec<MetricRecord>,
    /// Whether target-train labels were read before the oracle arm ran.
    pub label_access_before_oracle: bool,
    /// Wall-clock seconds per stage: `benchmark`, `source/{group}` and one
    /// entry per method (adaptation plus evaluation).
    pub seconds: BTreeMap<String, f64>,
}

impl MatrixOutcome {
    pub fn map_of(&self, method: &str) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.method == method)
            .map(|r| r.map)
    }
}

/// DT and ST for every strategy, CL3D (plus ablations) for the configured
/// strategies, and optionally the oracle. Source models are shared between
/// strategies that leave source frames unchanged. Closed gaps use plain DT
/// and the oracle as references.
pub fn run_matrix(cfg: &ExperimentConfig, run_dir: Option<&Path>) -> Result<MatrixOutcome> {
    cfg.validate()?;
    if let Some(d) = run_dir {
        write_resolved_config(d, cfg)?;
    }
    let mut seconds = BTreeMap::new();
    let t = Instant::now();
    let bench = make_benchmark(&cfg.sim, cfg.exec())?;
    seconds.insert("benchmark".to_string(), t.elapsed().as_secs_f64());
    let m = &cfg.matrix;
    let mut strategies: Vec<RangeStrategy> = m.strategies.clone();
    for s in &m.cl3d_strategies {
        if !strategies.contains(s) {
            strategies.push(*s);
        }
    }
    let mut sources: BTreeMap<RangeStrategy, DetectorState> = BTreeMap::new();
    let mut records = Vec::new();
    for &s in &strategies {
        let group = s.source_group();
        if !sources.contains_key(&group) {
            let t = Instant::now();
            let state = pretrain_source(cfg, &bench, group)?;
            seconds.insert(format!("source/{group}"), t.elapsed().as_secs_f64());
            if let Some(d) = run_dir {
                save_checkpoint(&d.join(format!("source.{group}.clds")), &state)?;
            }
            sources.insert(group, state);
        }
        let source = &sources[&group];
        let plain = AlignmentConfig {
            use_sga: true,
            use_tma: true,
            ..cfg.alignment
        };
        let t = Instant::now();
        records.push(evaluate(
            source,
            cfg,
            &bench.target_eval,
            s,
            &method_name(Mode::Dt, s, &plain),
        )?);
        seconds.insert(method_name(Mode::Dt, s, &plain), t.elapsed().as_secs_f64());
        if m.strategies.contains(&s) {
            let t = Instant::now();
            let out = adapt(source, cfg, &bench, Mode::St, s, None)?;
            records.push(evaluate(
                &out.state,
                cfg,
                &bench.target_eval,
                s,
                &method_name(Mode::St, s, &plain),
            )?);
            seconds.insert(method_name(Mode::St, s, &plain), t.elapsed().as_secs_f64());
        }
        if let Some(pos) = m.cl3d_strategies.iter().position(|x| *x == s) {
            let mut arms = vec![(true, true)];
            if m.ablations && pos == 0 {
                arms.extend([(false, true), (true, false), (false, false)]);
            }
            for (sga, tma) in arms {
                let t = Instant::now();
                let mut c = cfg.clone();
                c.alignment.use_sga = sga;
                c.alignment.use_tma = tma;
                let out = adapt(source, &c, &bench, Mode::Cl3d, s, None)?;
                log::info!(
                    "{}: mean similarity {:.3}, {} cold fallbacks, {} null features",
                    method_name(Mode::Cl3d, s, &c.alignment),
                    out.stats.mean_similarity,
                    out.stats.cold_fallbacks,
                    out.stats.null_features
                );
                let name = method_name(Mode::Cl3d, s, &c.alignment);
                records.push(evaluate(&out.state, &c, &bench.target_eval, s, &name)?);
                seconds.insert(name, t.elapsed().as_secs_f64());
            }
        }
    }
    let label_access_before_oracle = bench.target_train.label_access_audited();
    if m.oracle {
        let t = Instant::now();
        let s = *m.cl3d_strategies.first().unwrap_or(&RangeStrategy::Rn);
        let oracle = train_oracle(cfg, &bench, s)?;
        let name = method_name(Mode::Oracle, s, &cfg.alignment);
        records.push(evaluate(&oracle, cfg, &bench.target_eval, s, &name)?);
        seconds.insert(name, t.elapsed().as_secs_f64());
    }
    let dt = records
        .iter()
        .find(|r| r.method == "DT")
        .or_else(|| records.iter().find(|r| r.method.starts_with("DT")))
        .map(|r| r.map);
    let oracle = records
        .iter()
        .find(|r| r.method.starts_with("Oracle"))
        .map(|r| r.map);
    if let (Some(dt), Some(oracle)) = (dt, oracle) {
        for r in &mut records {
            r.closed_gap = closed_gap(r.map, dt, oracle);
        }
    }
    if let Some(d) = run_dir {
        write_metrics(d, &records)?;
    }
    Ok(MatrixOutcome {
        records,
        label_access_before_oracle,
        seconds,
    })
}

/// Loads a stage checkpoint from a run directory, with a hint naming the
/// command that produces it.
pub fn load_stage(dir: &Path, name: &str, cfg: &DetectorConfig) -> Result<DetectorState> {
    let path = dir.join(name);
    if !path.exists() {
        let hint = match name {
            SOURCE_CHECKPOINT => "run `cl3d pretrain` with the same --run-dir first",
            _ => "run `cl3d adapt` with the same --run-dir first",
        };
        return Err(Error::MissingPrerequisite {
            path,
            hint: hint.to_string(),
        });
    }
    load_checkpoint(&path, cfg)
}

pub fn read_pseudo_labels(dir: &Path, pairs: &[PreparedPair]) -> Result<Vec<PseudoFrame>> {
    let path = dir.join(PSEUDO_LABELS);
    if !path.exists() {
        return Err(Error::MissingPrerequisite {
            path,
            hint: "run `cl3d pseudo-label` with the same --run-dir first".into(),
        });
    }
    let bytes = read_file(&path)?;
    pseudo_labels_from_jsonl(&String::from_utf8_lossy(&bytes), pairs)
}

pub fn write_records(dir: &Path, records: &[MetricRecord]) -> Result<()> {
    write_metrics(dir, records)
}

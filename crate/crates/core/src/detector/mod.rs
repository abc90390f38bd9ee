//! A small BEV center-heatmap detector with hand-derived gradients.
//!
//! Points of two consecutive frames are encoded per point by a two-layer
//! perceptron, mean-pooled into grid cells, passed through one spatial
//! convolution, and read out by 1×1 heads: class heatmap, box regression
//! `[dx, dy, log w, log l, sin yaw, cos yaw]`, and a motion head whose hidden
//! layer doubles as the motion feature map.
//!
//! Only cells near occupied cells carry input-dependent features; every other
//! cell shares one "background" feature vector. The forward and backward
//! passes exploit this, which keeps a 128² grid cheap on a single core.

mod backward;
mod checkpoint;
mod decode;
mod forward;
mod grid;
mod loss;
mod nn;
mod shape;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use decode::{decode, Detection};
pub use forward::{EncodeCache, FeatureMaps, POINT_FEATURES};
pub use grid::BevGrid;
pub use loss::{
    build_targets, detection_loss, gaussian_radius, gaussian_value, kernel_cells, kernel_sigma,
    render_target_heatmap, smooth_l1, splat_weight, LossBreakdown, LossWeights, OutputGrads,
    RegTarget, Targets, BOX_DIM, VEL_DIM,
};
pub use shape::{shape_aux_loss, shape_features, ShapeForward};
pub use train::{
    apply_transform, augment_sample, train_epoch, Adam, Augmentation, EpochStats, TrainOptions,
    TrainSample, WeightProvider,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{kv, parse_bool, parse_value, KvConfig};
use crate::{Error, Result};

/// Architecture and loss settings, read from `detector.*` keys.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub grid: BevGrid,
    /// Hidden width of the per-point perceptron.
    pub hidden: usize,
    /// Channel width of pooled, backbone and motion features.
    pub channels: usize,
    /// Odd spatial kernel size of the backbone convolution.
    pub kernel: usize,
    /// Heatmap classes.
    pub classes: usize,
    pub shape_hidden: usize,
    pub shape_out: usize,
    /// Classes predicted by the auxiliary shape classifier.
    pub shape_classes: usize,
    pub lr: f64,
    pub batch: usize,
    pub score_floor: f64,
    pub eval_score_floor: f64,
    pub max_detections: usize,
    pub reg_weight: f64,
    pub motion_weight: f64,
    pub aux_weight: f64,
    pub augment: bool,
    pub heat_bias_init: f64,
    /// Height given to decoded boxes (BEV boxes carry no z extent).
    pub default_height: f64,
    pub ground_z: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            grid: BevGrid::default(),
            hidden: 32,
            channels: 32,
            kernel: 7,
            classes: 1,
            shape_hidden: 32,
            shape_out: 32,
            shape_classes: 2,
            lr: 3e-3,
            batch: 4,
            score_floor: 0.5,
            eval_score_floor: 0.05,
            max_detections: 100,
            reg_weight: 1.0,
            motion_weight: 0.1,
            aux_weight: 1.0,
            augment: true,
            heat_bias_init: -2.19,
            default_height: 1.6,
            ground_z: -1.7,
        }
    }
}

impl KvConfig for DetectorConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key.strip_prefix("detector.").unwrap_or(key);
        match k {
            "grid_range" => self.grid.range = parse_value(key, value)?,
            "grid_resolution" => self.grid.resolution = parse_value(key, value)?,
            "hidden" => self.hidden = parse_value(key, value)?,
            "channels" => self.channels = parse_value(key, value)?,
            "kernel" => self.kernel = parse_value(key, value)?,
            "classes" => self.classes = parse_value(key, value)?,
            "shape_hidden" => self.shape_hidden = parse_value(key, value)?,
            "shape_out" => self.shape_out = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "batch" => self.batch = parse_value(key, value)?,
            "score_floor" => self.score_floor = parse_value(key, value)?,
            "eval_score_floor" => self.eval_score_floor = parse_value(key, value)?,
            "max_detections" => self.max_detections = parse_value(key, value)?,
            "reg_weight" => self.reg_weight = parse_value(key, value)?,
            "motion_weight" => self.motion_weight = parse_value(key, value)?,
            "aux_weight" => self.aux_weight = parse_value(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "heat_bias_init" => self.heat_bias_init = parse_value(key, value)?,
            "default_height" => self.default_height = parse_value(key, value)?,
            _ => return Err(Error::UnknownKey(key.into())),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            kv("detector.grid_range", self.grid.range),
            kv("detector.grid_resolution", self.grid.resolution),
            kv("detector.hidden", self.hidden),
            kv("detector.channels", self.channels),
            kv("detector.kernel", self.kernel),
            kv("detector.classes", self.classes),
            kv("detector.shape_hidden", self.shape_hidden),
            kv("detector.shape_out", self.shape_out),
            kv("detector.lr", self.lr),
            kv("detector.batch", self.batch),
            kv("detector.score_floor", self.score_floor),
            kv("detector.eval_score_floor", self.eval_score_floor),
            kv("detector.max_detections", self.max_detections),
            kv("detector.reg_weight", self.reg_weight),
            kv("detector.motion_weight", self.motion_weight),
            kv("detector.aux_weight", self.aux_weight),
            kv("detector.augment", self.augment),
            kv("detector.heat_bias_init", self.heat_bias_init),
            kv("detector.default_height", self.default_height),
        ]
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.grid.resolution == 0 || self.grid.range <= 0.0 {
            return bad("grid resolution and range must be positive");
        }
        if self.kernel.is_multiple_of(2) {
            return bad("detector.kernel must be odd");
        }
        if self.hidden == 0 || self.channels == 0 || self.classes == 0 || self.batch == 0 {
            return bad("detector widths, classes and batch must be positive");
        }
        if !(self.score_floor > 0.0 && self.score_floor <= 1.0) {
            return bad("detector.score_floor must lie in (0, 1]");
        }
        if self.lr < 0.0 {
            return bad("detector.lr must be non-negative");
        }
        Ok(())
    }
}

/// Parameter tensors, in checkpoint order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tensor {
    EncW1,
    EncB1,
    EncW2,
    EncB2,
    ConvW,
    ConvB,
    HeatW,
    HeatB,
    BoxW,
    BoxB,
    MotW1,
    MotB1,
    MotW2,
    MotB2,
    ShapeW1,
    ShapeB1,
    ShapeW2,
    ShapeB2,
    ShapeClsW,
    ShapeClsB,
}

pub const ALL_TENSORS: [Tensor; 20] = [
    Tensor::EncW1,
    Tensor::EncB1,
    Tensor::EncW2,
    Tensor::EncB2,
    Tensor::ConvW,
    Tensor::ConvB,
    Tensor::HeatW,
    Tensor::HeatB,
    Tensor::BoxW,
    Tensor::BoxB,
    Tensor::MotW1,
    Tensor::MotB1,
    Tensor::MotW2,
    Tensor::MotB2,
    Tensor::ShapeW1,
    Tensor::ShapeB1,
    Tensor::ShapeW2,
    Tensor::ShapeB2,
    Tensor::ShapeClsW,
    Tensor::ShapeClsB,
];

impl Tensor {
    pub fn name(self) -> &'static str {
        match self {
            Tensor::EncW1 => "encoder.w1",
            Tensor::EncB1 => "encoder.b1",
            Tensor::EncW2 => "encoder.w2",
            Tensor::EncB2 => "encoder.b2",
            Tensor::ConvW => "backbone.w",
            Tensor::ConvB => "backbone.b",
            Tensor::HeatW => "heatmap.w",
            Tensor::HeatB => "heatmap.b",
            Tensor::BoxW => "box.w",
            Tensor::BoxB => "box.b",
            Tensor::MotW1 => "motion.w1",
            Tensor::MotB1 => "motion.b1",
            Tensor::MotW2 => "motion.w2",
            Tensor::MotB2 => "motion.b2",
            Tensor::ShapeW1 => "shape.w1",
            Tensor::ShapeB1 => "shape.b1",
            Tensor::ShapeW2 => "shape.w2",
            Tensor::ShapeB2 => "shape.b2",
            Tensor::ShapeClsW => "shape_cls.w",
            Tensor::ShapeClsB => "shape_cls.b",
        }
    }

    /// Whether the tensor belongs to the shape perceptron branch.
    pub fn is_shape(self) -> bool {
        matches!(
            self,
            Tensor::ShapeW1
                | Tensor::ShapeB1
                | Tensor::ShapeW2
                | Tensor::ShapeB2
                | Tensor::ShapeClsW
                | Tensor::ShapeClsB
        )
    }

    fn is_bias(self) -> bool {
        self.name().ends_with(".b") || self.name().ends_with("b1") || self.name().ends_with("b2")
    }
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    shapes: Vec<Vec<usize>>,
    offsets: Vec<usize>,
    total: usize,
}

impl Layout {
    pub fn new(cfg: &DetectorConfig) -> Self {
        let (h, c, k2) = (cfg.hidden, cfg.channels, cfg.kernel * cfg.kernel);
        let (sh, so) = (cfg.shape_hidden, cfg.shape_out);
        let shapes: Vec<Vec<usize>> = ALL_TENSORS
            .iter()
            .map(|t| match t {
                Tensor::EncW1 => vec![h, POINT_FEATURES],
                Tensor::EncB1 => vec![h],
                Tensor::EncW2 => vec![c, h],
                Tensor::EncB2 => vec![c],
                Tensor::ConvW => vec![k2, c, c],
                Tensor::ConvB => vec![c],
                Tensor::HeatW => vec![cfg.classes, c],
                Tensor::HeatB => vec![cfg.classes],
                Tensor::BoxW => vec![BOX_DIM, c],
                Tensor::BoxB => vec![BOX_DIM],
                Tensor::MotW1 => vec![c, c],
                Tensor::MotB1 => vec![c],
                Tensor::MotW2 => vec![VEL_DIM, c],
                Tensor::MotB2 => vec![VEL_DIM],
                Tensor::ShapeW1 => vec![sh, 3],
                Tensor::ShapeB1 => vec![sh],
                Tensor::ShapeW2 => vec![so, sh],
                Tensor::ShapeB2 => vec![so],
                Tensor::ShapeClsW => vec![cfg.shape_classes, so],
                Tensor::ShapeClsB => vec![cfg.shape_classes],
            })
            .collect();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut total = 0;
        for s in &shapes {
            offsets.push(total);
            total += s.iter().product::<usize>();
        }
        Self {
            shapes,
            offsets,
            total,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.shapes[t as usize]
    }

    pub fn range(&self, t: Tensor) -> std::ops::Range<usize> {
        let o = self.offsets[t as usize];
        o..o + self.shapes[t as usize].iter().product::<usize>()
    }
}

/// All trainable parameters plus optimizer state.
#[derive(Clone, Debug)]
pub struct DetectorState {
    pub config: DetectorConfig,
    pub layout: Layout,
    pub params: Vec<f64>,
    pub optimizer: Adam,
}

impl DetectorState {
    /// He-style uniform initialization from a seed. The heatmap bias starts
    /// at `heat_bias_init` so initial scores sit near a small prior.
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in ALL_TENSORS {
            let shape = layout.shape(t).to_vec();
            let r = layout.range(t);
            if t.is_bias() {
                continue;
            }
            let fan_in = match t {
                Tensor::ConvW => shape[0] * shape[2],
                _ => shape[shape.len() - 1],
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            for p in &mut params[r] {
                *p = rng.random_range(-bound..bound);
            }
        }
        for v in &mut params[layout.range(Tensor::HeatB)] {
            *v = config.heat_bias_init;
        }
        let optimizer = Adam::new(config.lr, layout.total());
        Ok(Self {
            config,
            layout,
            params,
            optimizer,
        })
    }

    pub fn t(&self, t: Tensor) -> &[f64] {
        &self.params[self.layout.range(t)]
    }

    pub fn t_mut(&mut self, t: Tensor) -> &mut [f64] {
        let r = self.layout.range(t);
        &mut self.params[r]
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.layout.total()]
    }

    /// Zeroes every head weight and bias (heatmap, box, motion), giving a
    /// model whose outputs do not depend on the input.
    pub fn zero_heads(&mut self) {
        for t in [
            Tensor::HeatW,
            Tensor::HeatB,
            Tensor::BoxW,
            Tensor::BoxB,
            Tensor::MotW1,
            Tensor::MotB1,
            Tensor::MotW2,
            Tensor::MotB2,
        ] {
            self.t_mut(t).fill(0.0);
        }
    }

    /// Fresh optimizer moments, e.g. at the start of a training stage.
    pub fn reset_optimizer(&mut self) {
        self.optimizer = Adam::new(self.config.lr, self.layout.total());
    }

    /// Rounds every parameter to the nearest f32, the precision at which
    /// checkpoints store them. Doing this at stage boundaries makes a
    /// reloaded checkpoint continue exactly like the in-memory state.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

#[cfg(test)]
mod tests;

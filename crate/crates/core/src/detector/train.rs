use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forward::{EncodeCache, FeatureMaps};
use super::loss::{build_targets, detection_loss, LossBreakdown, LossWeights};
use super::shape::shape_aux_loss;
use super::{DetectorState, ALL_TENSORS};
use crate::geometry::{rotate_z, to_f32, to_f64, wrap_angle, Vec3};
use crate::par::{self, Exec};
use crate::sim::ObjectLabel;
use crate::{Error, Result};

/// One training example: a frame pair with its (pseudo-)labels.
#[derive(Clone, Debug, Default)]
pub struct TrainSample {
    pub cur: Vec<[f32; 3]>,
    pub prev: Vec<[f32; 3]>,
    pub labels: Vec<ObjectLabel>,
    /// Whether `labels` carry trustworthy velocities.
    pub velocity_supervised: bool,
    /// Self-normalized shape point sets with class ids for the auxiliary
    /// shape classifier. Unaffected by augmentation.
    pub shapes: Vec<(Vec<Vec3>, usize)>,
}

/// Adaptive-moment optimizer over the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// One update; parameters inside `frozen` ranges are left untouched.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], frozen: &[Range<usize>]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = self.lr * bc2.sqrt() / bc1;
        for i in 0..params.len() {
            if frozen.iter().any(|r| r.contains(&i)) {
                continue;
            }
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= step_size * self.m[i] / (self.v[i].sqrt() + self.eps);
        }
    }
}

/// Random global flip, rotation and scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub flip_prob: f64,
    pub max_rotation: f64,
    pub scale: [f64; 2],
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            max_rotation: std::f64::consts::FRAC_PI_4,
            scale: [0.95, 1.05],
        }
    }
}

/// Applies `p ↦ s·R(θ)·F(p)` to points, boxes and velocities of a sample,
/// where `F` optionally mirrors across the x axis.
pub fn apply_transform(sample: &TrainSample, flip: bool, theta: f64, scale: f64) -> TrainSample {
    let fy = if flip { -1.0 } else { 1.0 };
    let tf = |p: Vec3| {
        let q = rotate_z([p[0], fy * p[1], p[2]], theta);
        [scale * q[0], scale * q[1], scale * q[2]]
    };
    let tf32 = |ps: &[[f32; 3]]| ps.iter().map(|p| to_f32(tf(to_f64(*p)))).collect();
    let labels = sample
        .labels
        .iter()
        .map(|l| {
            let mut l = l.clone();
            l.bbox.center = tf(l.bbox.center);
            l.bbox.size = l.bbox.size.map(|s| s * scale);
            l.bbox.yaw = wrap_angle(fy * l.bbox.yaw + theta);
            let v = rotate_z([l.velocity[0], fy * l.velocity[1], 0.0], theta);
            l.velocity = [scale * v[0], scale * v[1]];
            l
        })
        .collect();
    TrainSample {
        cur: tf32(&sample.cur),
        prev: tf32(&sample.prev),
        labels,
        velocity_supervised: sample.velocity_supervised,
        shapes: sample.shapes.clone(),
    }
}

pub fn augment_sample(sample: &TrainSample, aug: &Augmentation, rng: &mut impl Rng) -> TrainSample {
    let flip = rng.random::<f64>() < aug.flip_prob;
    let theta = if aug.max_rotation > 0.0 {
        rng.random_range(-aug.max_rotation..aug.max_rotation)
    } else {
        0.0
    };
    let scale = if aug.scale[1] > aug.scale[0] {
        rng.random_range(aug.scale[0]..aug.scale[1])
    } else {
        aug.scale[0]
    };
    apply_transform(sample, flip, theta, scale)
}

/// Supplies per-pixel classification weights for a batch, given the
/// (augmented) samples and their forward maps. `None` entries mean W ≡ 1.
pub trait WeightProvider {
    fn weights(
        &mut self,
        state: &DetectorState,
        batch: &[TrainSample],
        maps: &[FeatureMaps],
    ) -> Result<Vec<Option<Vec<f64>>>>;
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub augmentation: Option<Augmentation>,
    pub exec: Exec,
    /// Keep the shape branch fixed and skip the auxiliary loss.
    pub freeze_shape: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            augmentation: Some(Augmentation::default()),
            exec: Exec::default(),
            freeze_shape: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub steps: usize,
    pub mean: LossBreakdown,
}

impl DetectorState {
    /// Loss and parameter gradient of one sample given its forward pass.
    pub fn sample_gradient(
        &self,
        sample: &TrainSample,
        maps: &FeatureMaps,
        cache: &EncodeCache,
        weights: Option<&[f64]>,
        with_aux: bool,
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        let cfg = &self.config;
        let targets = build_targets(
            &sample.labels,
            &cfg.grid,
            cfg.classes,
            sample.velocity_supervised,
        );
        let lw = LossWeights {
            reg: cfg.reg_weight,
            motion: cfg.motion_weight,
        };
        let (mut loss, og) = detection_loss(maps, &targets, weights, &lw)?;
        let mut grads = self.zero_grads();
        self.backward(maps, cache, &og, &mut grads);
        if with_aux {
            loss.aux = shape_aux_loss(self, &sample.shapes, Some(&mut grads));
        }
        Ok((loss, grads))
    }

    fn shape_ranges(&self) -> Vec<Range<usize>> {
        ALL_TENSORS
            .iter()
            .filter(|t| t.is_shape())
            .map(|t| self.layout.range(*t))
            .collect()
    }
}

/// One pass over `samples` in shuffled batches, one optimizer step per
/// batch. Per-sample work runs through `opts.exec`; gradients are reduced in
/// sample order so results do not depend on scheduling.
pub fn train_epoch(
    state: &mut DetectorState,
    samples: &[TrainSample],
    opts: &TrainOptions,
    mut provider: Option<&mut dyn WeightProvider>,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let batch = state.config.batch.max(1);
    let frozen = if opts.freeze_shape {
        state.shape_ranges()
    } else {
        Vec::new()
    };
    let with_aux = !opts.freeze_shape && state.config.aux_weight > 0.0;
    let mut stats = EpochStats::default();
    for chunk in order.chunks(batch) {
        let seeds: Vec<u64> = chunk.iter().map(|_| rng.random()).collect();
        let items: Vec<(usize, u64)> = chunk.iter().copied().zip(seeds).collect();
        let augmented: Vec<TrainSample> =
            par::map(opts.exec, &items, |&(i, seed)| match &opts.augmentation {
                Some(aug) => augment_sample(&samples[i], aug, &mut ChaCha8Rng::seed_from_u64(seed)),
                None => samples[i].clone(),
            });
        let st: &DetectorState = state;
        let results: Vec<Result<(LossBreakdown, Vec<f64>)>> = match provider.as_deref_mut() {
            None => par::map(opts.exec, &augmented, |s| {
                let (maps, cache) = st.encode_with_cache(&s.cur, &s.prev);
                st.sample_gradient(s, &maps, &cache, None, with_aux)
            }),
            Some(p) => {
                let passes: Vec<(FeatureMaps, EncodeCache)> =
                    par::map(opts.exec, &augmented, |s| {
                        st.encode_with_cache(&s.cur, &s.prev)
                    });
                let maps: Vec<FeatureMaps> = passes.iter().map(|(m, _)| m.clone()).collect();
                let weights = p.weights(st, &augmented, &maps)?;
                if weights.len() != augmented.len() {
                    return Err(Error::ShapeMismatch {
                        expected: augmented.len(),
                        got: weights.len(),
                    });
                }
                let idx: Vec<usize> = (0..augmented.len()).collect();
                par::map(opts.exec, &idx, |&k| {
                    let (m, c) = &passes[k];
                    st.sample_gradient(&augmented[k], m, c, weights[k].as_deref(), with_aux)
                })
            }
        };
        let mut total = state.zero_grads();
        let mut loss = LossBreakdown::default();
        for r in results {
            let (l, g) = r?;
            loss.add(&l);
            for (t, v) in total.iter_mut().zip(&g) {
                *t += v;
            }
        }
        let inv = 1.0 / chunk.len() as f64;
        total.iter_mut().for_each(|g| *g *= inv);
        let loss = loss.scaled(inv);
        if !loss.total().is_finite() || total.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step: state.optimizer.step as usize,
                detail: format!("non-finite loss {loss:?}"),
            });
        }
        let DetectorState {
            params, optimizer, ..
        } = state;
        optimizer.update(params, &total, &frozen);
        stats.steps += 1;
        stats.mean.add(&loss);
    }
    if stats.steps > 0 {
        stats.mean = stats.mean.scaled(1.0 / stats.steps as f64);
    }
    Ok(stats)
}

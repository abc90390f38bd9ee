//! Per-class prototypes kept as exponential moving averages of
//! confidence-weighted fusion features, and the similarity-scaled kernel map
//! that reweights the classification loss of each pseudo-label.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::FusionFeature;
use crate::config::{kv, parse_value, KvConfig};
use crate::detector::BevGrid;
use crate::io::{read_file, write_atomic, LeReader};
use crate::sim::ObjectLabel;
use crate::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrototypeConfig {
    pub alpha: f64,
    /// Loss weight floor for background pixels outside every kernel.
    pub w_bg: f64,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            w_bg: 1.0,
        }
    }
}

impl KvConfig for PrototypeConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.strip_prefix("prototype.").unwrap_or(key) {
            "alpha" => self.alpha = parse_value(key, value)?,
            "w_bg" => self.w_bg = parse_value(key, value)?,
            _ => return Err(Error::UnknownKey(key.into())),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            kv("prototype.alpha", self.alpha),
            kv("prototype.w_bg", self.w_bg),
        ]
    }
}

impl PrototypeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.w_bg) {
            return Err(Error::InvalidConfig(
                "prototype.alpha and prototype.w_bg must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub vector: Vec<f64>,
    pub initialized: bool,
    pub count: u64,
}

impl Prototype {
    pub fn new(dim: usize) -> Self {
        Self {
            vector: vec![0.0; dim],
            initialized: false,
            count: 0,
        }
    }

    /// The first update copies `f`; later ones blend `α·p + (1−α)·f`.
    /// Non-finite or wrongly sized input leaves the prototype untouched.
    pub fn ema_update(&mut self, f: &[f64], alpha: f64) -> Result<()> {
        if f.len() != self.vector.len() {
            return Err(Error::ShapeMismatch {
                expected: self.vector.len(),
                got: f.len(),
            });
        }
        if f.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        if self.initialized {
            for (p, x) in self.vector.iter_mut().zip(f) {
                *p = alpha * *p + (1.0 - alpha) * x;
            }
        } else {
            self.vector.copy_from_slice(f);
            self.initialized = true;
        }
        self.count += 1;
        Ok(())
    }
}

/// `(1/N) Σ dᵢ·vᵢ` over the features of class `class`; `None` when there
/// are none.
pub fn aggregate_batch(features: &[FusionFeature], class: usize) -> Option<Vec<f64>> {
    let mut members = features.iter().filter(|f| f.class_id == class).peekable();
    let dim = members.peek()?.vector.len();
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for f in members {
        for (a, v) in acc.iter_mut().zip(&f.vector) {
            *a += f.confidence * v;
        }
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Some(acc)
}

/// Cosine similarity clamped below at zero.
pub fn similarity(feature: &FusionFeature, proto: &Prototype) -> Result<f64> {
    if !proto.initialized {
        return Err(Error::ColdPrototype(feature.class_id));
    }
    let dot: f64 = feature
        .vector
        .iter()
        .zip(&proto.vector)
        .map(|(a, b)| a * b)
        .sum();
    let na = feature.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = proto.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(0.0, 1.0))
}

/// One prototype per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeStore {
    pub alpha: f64,
    pub prototypes: Vec<Prototype>,
}

impl PrototypeStore {
    pub fn new(classes: usize, dim: usize, alpha: f64) -> Self {
        Self {
            alpha,
            prototypes: (0..classes).map(|_| Prototype::new(dim)).collect(),
        }
    }

    /// Aggregates `features` per class and applies one EMA step to every
    /// class that has members. Classes never mix.
    pub fn update(&mut self, features: &[FusionFeature]) -> Result<()> {
        for (c, p) in self.prototypes.iter_mut().enumerate() {
            if let Some(f) = aggregate_batch(features, c) {
                p.ema_update(&f, self.alpha)?;
            }
        }
        Ok(())
    }

    pub fn similarity(&self, feature: &FusionFeature) -> Result<f64> {
        match self.prototypes.get(feature.class_id) {
            Some(p) => similarity(feature, p),
            None => Err(Error::ColdPrototype(feature.class_id)),
        }
    }

    pub fn is_warm(&self, class: usize) -> bool {
        self.prototypes.get(class).is_some_and(|p| p.initialized)
    }

    /// Little-endian: magic "CLPT", version, alpha f64, classes u32, dim
    /// u32, then per class `initialized u8, count u64, f32 × dim`.
    pub fn encode(&self) -> Vec<u8> {
        let dim = self.prototypes.first().map_or(0, |p| p.vector.len());
        let mut out = Vec::new();
        out.extend_from_slice(b"CLPT");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&self.alpha.to_le_bytes());
        out.extend_from_slice(&(self.prototypes.len() as u32).to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        for p in &self.prototypes {
            out.push(p.initialized as u8);
            out.extend_from_slice(&p.count.to_le_bytes());
            for v in &p.vector {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = LeReader::new(bytes);
        if r.take(4)? != b"CLPT" {
            return Err(Error::Format("not a prototype file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::Format(format!(
                "unsupported prototype version {version}"
            )));
        }
        let alpha = f64::from_bits(r.u64()?);
        let classes = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let mut prototypes = Vec::with_capacity(classes);
        for _ in 0..classes {
            let initialized = r.u8()? != 0;
            let count = r.u64()?;
            let vector = (0..dim)
                .map(|_| r.f32().map(f64::from))
                .collect::<Result<Vec<_>>>()?;
            prototypes.push(Prototype {
                vector,
                initialized,
                count,
            });
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes in prototype file".into()));
        }
        Ok(Self { alpha, prototypes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

/// Splats `s_p · gauss` around every pseudo-label center with the same
/// size-adaptive kernel as the target heatmap, keeping per-cell maxima.
/// Cells outside every kernel stay 0. Labels off the grid are skipped.
pub fn build_reweight_map(
    labels: &[ObjectLabel],
    sims: &[f64],
    grid: &BevGrid,
    classes: usize,
) -> Result<Vec<f64>> {
    if labels.len() != sims.len() {
        return Err(Error::ShapeMismatch {
            expected: labels.len(),
            got: sims.len(),
        });
    }
    let mut w = vec![0.0; grid.cells() * classes];
    for (l, &s) in labels.iter().zip(sims) {
        if !grid.contains(l.bbox.center[0], l.bbox.center[1]) {
            log::debug!(
                "pseudo-label {} outside the grid, skipped in reweight map",
                l.id
            );
            continue;
        }
        crate::detector::splat_weight(&mut w, grid, classes, l, s.clamp(0.0, 1.0));
    }
    Ok(w)
}

/// Per-pixel classification-loss weights. Each cell follows the label
/// whose kernel is strongest there (larger `s_p` on ties) and blends from
/// `w_bg` towards that label's similarity, `w_bg + g·(s_p − w_bg)`; cells
/// outside every kernel window get `w_bg`. A center carries exactly its
/// `s_p`, a dissimilar label becomes a dip below the background, and
/// `s_p = w_bg = 1` gives all ones.
pub fn effective_weight_map(
    labels: &[ObjectLabel],
    sims: &[f64],
    grid: &BevGrid,
    classes: usize,
    w_bg: f64,
) -> Result<Vec<f64>> {
    if labels.len() != sims.len() {
        return Err(Error::ShapeMismatch {
            expected: labels.len(),
            got: sims.len(),
        });
    }
    // strongest kernel value and its similarity per cell
    let mut best = vec![(0.0f64, 0.0f64); grid.cells() * classes];
    for (l, &s) in labels.iter().zip(sims) {
        if !grid.contains(l.bbox.center[0], l.bbox.center[1]) {
            continue;
        }
        let s = s.clamp(0.0, 1.0);
        crate::detector::kernel_cells(grid, classes, l, |idx, g| {
            let (bg, bs) = best[idx];
            if g > bg || (g == bg && s > bs) {
                best[idx] = (g, s);
            }
        });
    }
    Ok(best
        .into_iter()
        .map(|(g, s)| w_bg + g * (s - w_bg))
        .collect())
}

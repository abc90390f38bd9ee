//! Synthetic dual-LiDAR world.
//!
//! A world is a set of cuboid objects (cars and barriers) on a flat ground
//! plane moving at constant velocity. The same kind of world is rendered
//! through two device models: a 360° multi-beam mechanical scanner and a
//! forward-looking solid-state raster fan. The two presets differ in point
//! count, point arrangement and perception range.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{kv, parse_value, KvConfig};
use crate::geometry::{to_f32, wrap_angle, Box3D, Vec3};
use crate::io::{read_file, write_atomic, LeReader};
use crate::par::{self, Exec};
use crate::{Error, Result};

pub const CLASS_CAR: usize = 0;
pub const CLASS_BARRIER: usize = 1;
pub const CLASS_NAMES: [&str; 2] = ["car", "barrier"];

const FRAME_MAGIC: &[u8; 4] = b"CLPF";
const FRAME_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeviceKind {
    Mechanical,
    SolidState,
}

impl DeviceKind {
    pub fn code(self) -> u8 {
        match self {
            DeviceKind::Mechanical => 0,
            DeviceKind::SolidState => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DeviceKind::Mechanical),
            1 => Ok(DeviceKind::SolidState),
            _ => Err(Error::Format(format!("unknown device kind {c}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DeviceKind::Mechanical => "mechanical",
            DeviceKind::SolidState => "solid_state",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mechanical" => Some(DeviceKind::Mechanical),
            "solid_state" | "solid-state" => Some(DeviceKind::SolidState),
            _ => None,
        }
    }
}

/// Sensor model. Angles are in degrees, distances in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceModel {
    pub kind: DeviceKind,
    /// Beam count of a mechanical scanner; unused for solid-state.
    pub num_beams: usize,
    pub vertical_fov: [f64; 2],
    pub horizontal_fov: [f64; 2],
    pub azimuth_step: f64,
    /// Raster row spacing of a solid-state fan; unused for mechanical.
    pub elevation_step: f64,
    pub max_range: f64,
    /// Perception interval along the forward (x) axis.
    pub range_interval: [f64; 2],
    pub dropout_prob: f64,
    pub range_noise_sigma: f64,
}

impl DeviceModel {
    pub fn mechanical() -> Self {
        Self {
            kind: DeviceKind::Mechanical,
            num_beams: 32,
            vertical_fov: [-30.0, 10.0],
            horizontal_fov: [-180.0, 180.0],
            azimuth_step: 0.4,
            elevation_step: 0.0,
            max_range: 50.0,
            range_interval: [-50.0, 50.0],
            dropout_prob: 0.05,
            range_noise_sigma: 0.02,
        }
    }

    pub fn solid_state() -> Self {
        Self {
            kind: DeviceKind::SolidState,
            num_beams: 0,
            vertical_fov: [-9.0, 3.0],
            horizontal_fov: [-30.0, 30.0],
            azimuth_step: 0.1,
            elevation_step: 0.1,
            max_range: 100.0,
            range_interval: [0.0, 100.0],
            dropout_prob: 0.02,
            range_noise_sigma: 0.02,
        }
    }

    pub fn preset(kind: DeviceKind) -> Self {
        match kind {
            DeviceKind::Mechanical => Self::mechanical(),
            DeviceKind::SolidState => Self::solid_state(),
        }
    }

    pub fn horizontal_width(&self) -> f64 {
        self.horizontal_fov[1] - self.horizontal_fov[0]
    }

    /// Forward translation that centers the perception interval.
    pub fn range_midpoint(&self) -> f64 {
        0.5 * (self.range_interval[0] + self.range_interval[1])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| {
            Err(Error::InvalidConfig(format!(
                "device {}: {m}",
                self.kind.name()
            )))
        };
        let full = (self.horizontal_width() - 360.0).abs() < 1e-9;
        if full != (self.kind == DeviceKind::Mechanical) {
            return bad("horizontal field of view must be 360° exactly for mechanical devices");
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return bad("dropout probability outside [0, 1]");
        }
        if self.range_noise_sigma < 0.0 || self.max_range <= 0.0 {
            return bad("negative noise or non-positive range");
        }
        let [a, b] = self.range_interval;
        if !(a < b && a.abs() <= self.max_range + 1e-9 && b.abs() <= self.max_range + 1e-9) {
            return bad("range interval must be increasing and within max range");
        }
        if self.vertical_fov[0] >= self.vertical_fov[1] || self.azimuth_step <= 0.0 {
            return bad("empty angular lattice");
        }
        match self.kind {
            DeviceKind::Mechanical if self.num_beams == 0 => bad("zero beams"),
            DeviceKind::SolidState if self.elevation_step <= 0.0 => bad("zero elevation step"),
            _ => Ok(()),
        }
    }

    /// Beam elevations in degrees.
    pub fn elevations(&self) -> Vec<f64> {
        let [lo, hi] = self.vertical_fov;
        match self.kind {
            DeviceKind::Mechanical => {
                if self.num_beams == 1 {
                    return vec![lo];
                }
                let step = (hi - lo) / (self.num_beams - 1) as f64;
                (0..self.num_beams).map(|i| lo + i as f64 * step).collect()
            }
            DeviceKind::SolidState => {
                let n = ((hi - lo) / self.elevation_step + 1e-9).floor() as usize + 1;
                (0..n)
                    .map(|i| lo + i as f64 * self.elevation_step)
                    .collect()
            }
        }
    }

    /// Column azimuths in degrees. Mechanical scans wrap, so the last column
    /// stops one step short of the start.
    pub fn azimuths(&self) -> Vec<f64> {
        let [lo, _] = self.horizontal_fov;
        let w = self.horizontal_width();
        let n = match self.kind {
            DeviceKind::Mechanical => (w / self.azimuth_step).round() as usize,
            DeviceKind::SolidState => (w / self.azimuth_step + 1e-9).floor() as usize + 1,
        };
        (0..n).map(|j| lo + j as f64 * self.azimuth_step).collect()
    }

    /// Whether a horizontal direction (degrees, any wrap) is inside the FOV.
    pub fn azimuth_in_fov(&self, az_deg: f64) -> bool {
        if self.kind == DeviceKind::Mechanical {
            return true;
        }
        let a = wrap_angle(az_deg.to_radians()).to_degrees();
        a >= self.horizontal_fov[0] - 1e-9 && a <= self.horizontal_fov[1] + 1e-9
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub id: u32,
    pub class_id: usize,
    pub center: Vec3,
    /// `[length, width, height]`
    pub size: Vec3,
    pub yaw: f64,
    pub velocity: [f64; 2],
    /// Heading drift in rad/s.
    pub yaw_rate: f64,
}

impl WorldObject {
    pub fn bbox(&self) -> Box3D {
        Box3D::new(self.center, self.size, self.yaw)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub objects: Vec<WorldObject>,
    pub ground_plane_z: f64,
    pub rng_seed: u64,
    pub frame_index: usize,
    pub timestamp: f64,
}

impl WorldState {
    /// The state `dt` seconds later under constant velocity and yaw drift.
    pub fn advanced(&self, dt: f64) -> WorldState {
        let objects = self
            .objects
            .iter()
            .map(|o| {
                let mut n = o.clone();
                n.center[0] += o.velocity[0] * dt;
                n.center[1] += o.velocity[1] * dt;
                n.yaw = wrap_angle(o.yaw + o.yaw_rate * dt);
                n
            })
            .collect();
        WorldState {
            objects,
            ground_plane_z: self.ground_plane_z,
            rng_seed: self.rng_seed,
            frame_index: self.frame_index + 1,
            timestamp: self.timestamp + dt,
        }
    }
}

/// One timestamped point cloud. Points are stored as f32, matching the
/// on-disk format.
#[derive(Clone, Debug, PartialEq)]
pub struct PointFrame {
    pub points: Vec<[f32; 3]>,
    pub timestamp: f64,
    pub device: DeviceModel,
    pub frame_index: usize,
}

/// An oriented box with class, velocity and confidence. Ground truth has
/// confidence 1; pseudo-labels carry the detector score.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectLabel {
    pub id: u32,
    pub bbox: Box3D,
    pub class_id: usize,
    pub velocity: [f64; 2],
    pub confidence: f64,
}

#[derive(Serialize, Deserialize)]
struct LabelRecord {
    id: u32,
    class: usize,
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
    velocity: [f64; 2],
    confidence: f64,
}

impl ObjectLabel {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&LabelRecord {
            id: self.id,
            class: self.class_id,
            center: self.bbox.center,
            size: self.bbox.size,
            yaw: self.bbox.yaw,
            velocity: self.velocity,
            confidence: self.confidence,
        })
        .expect("label serialization")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let r: LabelRecord = serde_json::from_str(line)?;
        let label = ObjectLabel {
            id: r.id,
            bbox: Box3D::new(r.center, r.size, r.yaw),
            class_id: r.class,
            velocity: r.velocity,
            confidence: r.confidence,
        };
        if !(0.0..=1.0).contains(&label.confidence) || !label.bbox.is_valid() {
            return Err(Error::Format(format!("invalid label record: {line}")));
        }
        Ok(label)
    }
}

/// Simulation settings, read from `sim.*` keys.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub sequences: usize,
    pub eval_sequences: usize,
    pub frames: usize,
    pub frame_period: f64,
    pub cars: usize,
    pub barriers: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub static_fraction: f64,
    pub yaw_drift: f64,
    pub size_jitter: f64,
    pub ground_z: f64,
    pub min_separation: f64,
    pub source_device: DeviceModel,
    pub target_device: DeviceModel,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sequences: 50,
            eval_sequences: 50,
            frames: 2,
            frame_period: 0.1,
            cars: 12,
            barriers: 8,
            speed_min: 3.0,
            speed_max: 15.0,
            static_fraction: 0.25,
            yaw_drift: 0.0,
            size_jitter: 0.15,
            ground_z: -1.7,
            min_separation: 7.0,
            source_device: DeviceModel::mechanical(),
            target_device: DeviceModel::solid_state(),
        }
    }
}

pub const CAR_SIZE: Vec3 = [4.5, 1.9, 1.6];
pub const BARRIER_SIZE: Vec3 = [3.0, 0.8, 1.1];

fn device_key(d: &DeviceModel, prefix: &str, out: &mut Vec<(String, String)>) {
    out.push(kv(&format!("{prefix}.kind"), d.kind.name()));
    out.push(kv(&format!("{prefix}.dropout_prob"), d.dropout_prob));
    out.push(kv(
        &format!("{prefix}.range_noise_sigma"),
        d.range_noise_sigma,
    ));
    out.push(kv(&format!("{prefix}.vertical_fov_min"), d.vertical_fov[0]));
    out.push(kv(&format!("{prefix}.vertical_fov_max"), d.vertical_fov[1]));
}

fn set_device(d: &mut DeviceModel, field: &str, key: &str, value: &str) -> Result<()> {
    match field {
        "kind" => {
            let kind = DeviceKind::parse(value).ok_or_else(|| Error::InvalidValue {
                key: key.into(),
                value: value.into(),
            })?;
            *d = DeviceModel::preset(kind);
        }
        "dropout_prob" => d.dropout_prob = parse_value(key, value)?,
        "range_noise_sigma" => d.range_noise_sigma = parse_value(key, value)?,
        "vertical_fov_min" => d.vertical_fov[0] = parse_value(key, value)?,
        "vertical_fov_max" => d.vertical_fov[1] = parse_value(key, value)?,
        _ => return Err(Error::UnknownKey(key.into())),
    }
    Ok(())
}

impl KvConfig for SimConfig {
    /// Accepts keys with or without the `sim.` prefix.
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key.strip_prefix("sim.").unwrap_or(key);
        match k {
            "seed" => self.seed = parse_value(key, value)?,
            "sequences" => self.sequences = parse_value(key, value)?,
            "eval_sequences" => self.eval_sequences = parse_value(key, value)?,
            "frames" => self.frames = parse_value(key, value)?,
            "frame_period" => self.frame_period = parse_value(key, value)?,
            "cars" => self.cars = parse_value(key, value)?,
            "barriers" => self.barriers = parse_value(key, value)?,
            "speed_min" => self.speed_min = parse_value(key, value)?,
            "speed_max" => self.speed_max = parse_value(key, value)?,
            "static_fraction" => self.static_fraction = parse_value(key, value)?,
            "yaw_drift" => self.yaw_drift = parse_value(key, value)?,
            "size_jitter" => self.size_jitter = parse_value(key, value)?,
            "ground_z" => self.ground_z = parse_value(key, value)?,
            "min_separation" => self.min_separation = parse_value(key, value)?,
            _ => {
                if let Some(f) = k.strip_prefix("source.") {
                    return set_device(&mut self.source_device, f, key, value);
                }
                if let Some(f) = k.strip_prefix("target.") {
                    return set_device(&mut self.target_device, f, key, value);
                }
                return Err(Error::UnknownKey(key.into()));
            }
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        let mut v = vec![
            kv("sim.seed", self.seed),
            kv("sim.sequences", self.sequences),
            kv("sim.eval_sequences", self.eval_sequences),
            kv("sim.frames", self.frames),
            kv("sim.frame_period", self.frame_period),
            kv("sim.cars", self.cars),
            kv("sim.barriers", self.barriers),
            kv("sim.speed_min", self.speed_min),
            kv("sim.speed_max", self.speed_max),
            kv("sim.static_fraction", self.static_fraction),
            kv("sim.yaw_drift", self.yaw_drift),
            kv("sim.size_jitter", self.size_jitter),
            kv("sim.ground_z", self.ground_z),
            kv("sim.min_separation", self.min_separation),
        ];
        device_key(&self.source_device, "sim.source", &mut v);
        device_key(&self.target_device, "sim.target", &mut v);
        v
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.frames < 2 {
            return bad(format!("sim.frames must be >= 2, got {}", self.frames));
        }
        if self.frame_period <= 0.0 || !self.frame_period.is_finite() {
            return bad("sim.frame_period must be positive".into());
        }
        if self.speed_min < 0.0 || self.speed_max < self.speed_min {
            return bad("speeds must satisfy 0 <= speed_min <= speed_max".into());
        }
        if !(0.0..=1.0).contains(&self.static_fraction) || !(0.0..1.0).contains(&self.size_jitter) {
            return bad("static_fraction or size_jitter out of range".into());
        }
        if self.yaw_drift < 0.0 {
            return bad("sim.yaw_drift must be non-negative".into());
        }
        self.source_device.validate()?;
        self.target_device.validate()
    }
}

/// splitmix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Samples a placement inside the device's perception region.
fn sample_position(rng: &mut ChaCha8Rng, device: &DeviceModel) -> (f64, f64) {
    let r_min: f64 = 4.0;
    let r_max = device.max_range - 3.0;
    let r = (r_min * r_min + rng.random::<f64>() * (r_max * r_max - r_min * r_min)).sqrt();
    let az = match device.kind {
        DeviceKind::Mechanical => rng.random_range(-PI..PI),
        DeviceKind::SolidState => {
            let lo = (device.horizontal_fov[0] + 2.0).to_radians();
            let hi = (device.horizontal_fov[1] - 2.0).to_radians();
            rng.random_range(lo..hi)
        }
    };
    (r * az.cos(), r * az.sin())
}

/// Builds the initial world for one sequence.
pub fn initial_world(config: &SimConfig, device: &DeviceModel, seed: u64) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects: Vec<WorldObject> = Vec::new();
    let classes = std::iter::repeat_n(CLASS_CAR, config.cars)
        .chain(std::iter::repeat_n(CLASS_BARRIER, config.barriers));
    let drift = Normal::new(0.0, config.yaw_drift.max(1e-300)).expect("finite sigma");
    for class_id in classes {
        let base = if class_id == CLASS_CAR {
            CAR_SIZE
        } else {
            BARRIER_SIZE
        };
        let mut placed = None;
        for _ in 0..200 {
            let (x, y) = sample_position(&mut rng, device);
            let clear = objects.iter().all(|o| {
                let dx = o.center[0] - x;
                let dy = o.center[1] - y;
                dx * dx + dy * dy >= config.min_separation * config.min_separation
            });
            if clear {
                placed = Some((x, y));
                break;
            }
        }
        let Some((x, y)) = placed else { continue };
        let j = config.size_jitter;
        let size = [
            base[0] * (1.0 + rng.random_range(-j..=j)),
            base[1] * (1.0 + rng.random_range(-j..=j)),
            base[2] * (1.0 + rng.random_range(-j..=j)),
        ];
        let yaw = rng.random_range(-PI..PI);
        let moving = class_id == CLASS_CAR && rng.random::<f64>() >= config.static_fraction;
        let speed = if moving {
            rng.random_range(config.speed_min..=config.speed_max)
        } else {
            0.0
        };
        let yaw_rate = if moving && config.yaw_drift > 0.0 {
            drift.sample(&mut rng)
        } else {
            0.0
        };
        objects.push(WorldObject {
            id: objects.len() as u32,
            class_id,
            center: [x, y, config.ground_z + 0.5 * size[2]],
            size,
            yaw,
            velocity: [speed * yaw.cos(), speed * yaw.sin()],
            yaw_rate,
        });
    }
    WorldState {
        objects,
        ground_plane_z: config.ground_z,
        rng_seed: seed,
        frame_index: 0,
        timestamp: 0.0,
    }
}

/// Rolls an initial world forward `frames - 1` steps.
pub fn sequence_from_initial(initial: WorldState, frames: usize, period: f64) -> Vec<WorldState> {
    let mut out = Vec::with_capacity(frames);
    out.push(initial);
    while out.len() < frames {
        let next = out.last().unwrap().advanced(period);
        out.push(next);
    }
    out
}

/// Generates a deterministic world sequence with objects placed inside the
/// perception region of `device`.
pub fn make_world(config: &SimConfig, device: &DeviceModel, seed: u64) -> Result<Vec<WorldState>> {
    config.validate()?;
    Ok(sequence_from_initial(
        initial_world(config, device, seed),
        config.frames,
        config.frame_period,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HitTarget {
    Ground,
    Object(usize),
}

/// One returned ray, in full precision, with its attribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    pub point: Vec3,
    pub target: HitTarget,
}

/// Casts the device lattice against the world. With `rng = None` the result
/// is noiseless and nothing is dropped.
pub fn cast_rays(
    world: &WorldState,
    device: &DeviceModel,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Vec<RayHit> {
    let boxes: Vec<Box3D> = world.objects.iter().map(|o| o.bbox()).collect();
    let elev: Vec<(f64, f64)> = device
        .elevations()
        .iter()
        .map(|e| e.to_radians().sin_cos())
        .collect();
    let noise = Normal::new(0.0, device.range_noise_sigma.max(1e-300)).expect("finite sigma");
    // per-box azimuth window from the bounding circle of the footprint
    let windows: Vec<Option<(f64, f64)>> = boxes
        .iter()
        .map(|b| {
            let d = (b.center[0].powi(2) + b.center[1].powi(2)).sqrt();
            let r = b.footprint_radius() + 1e-6;
            if d <= r {
                None
            } else {
                Some((b.center[1].atan2(b.center[0]), (r / d).asin()))
            }
        })
        .collect();
    let mut hits = Vec::new();
    let mut candidates = Vec::with_capacity(boxes.len());
    for az_deg in device.azimuths() {
        let az = az_deg.to_radians();
        let (sa, ca) = az.sin_cos();
        candidates.clear();
        for (i, w) in windows.iter().enumerate() {
            let keep = match w {
                None => true,
                Some((c, half)) => wrap_angle(az - c).abs() <= *half + 1e-9,
            };
            if keep {
                candidates.push(i);
            }
        }
        for &(se, ce) in &elev {
            let dir = [ce * ca, ce * sa, se];
            let mut best = f64::INFINITY;
            let mut target = HitTarget::Ground;
            if dir[2] < -1e-12 {
                best = world.ground_plane_z / dir[2];
            }
            for &i in &candidates {
                if let Some(t) = boxes[i].ray_hit([0.0; 3], dir) {
                    if t < best {
                        best = t;
                        target = HitTarget::Object(i);
                    }
                }
            }
            if !best.is_finite() || best > device.max_range {
                continue;
            }
            let mut t = best;
            if let Some(r) = rng.as_deref_mut() {
                if r.random::<f64>() < device.dropout_prob {
                    continue;
                }
                if device.range_noise_sigma > 0.0 {
                    t += noise.sample(r);
                }
                if t <= 0.0 || t > device.max_range {
                    continue;
                }
            }
            hits.push(RayHit {
                point: [t * dir[0], t * dir[1], t * dir[2]],
                target,
            });
        }
    }
    hits
}

fn labels_from_hits(world: &WorldState, hits: &[RayHit]) -> Vec<ObjectLabel> {
    let mut seen = vec![false; world.objects.len()];
    for h in hits {
        if let HitTarget::Object(i) = h.target {
            seen[i] = true;
        }
    }
    world
        .objects
        .iter()
        .zip(seen)
        .filter(|(_, s)| *s)
        .map(|(o, _)| ObjectLabel {
            id: o.id,
            bbox: o.bbox(),
            class_id: o.class_id,
            velocity: o.velocity,
            confidence: 1.0,
        })
        .collect()
}

/// Renders one frame with range noise and dropout. Only objects with at
/// least one return are labeled.
pub fn render_frame(
    world: &WorldState,
    device: &DeviceModel,
    seed: u64,
) -> (PointFrame, Vec<ObjectLabel>) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, world.frame_index as u64));
    let hits = cast_rays(world, device, Some(&mut rng));
    let labels = labels_from_hits(world, &hits);
    let frame = PointFrame {
        points: hits.iter().map(|h| to_f32(h.point)).collect(),
        timestamp: world.timestamp,
        device: device.clone(),
        frame_index: world.frame_index,
    };
    (frame, labels)
}

/// Noiseless render that also returns per-point attribution.
pub fn render_frame_exact(
    world: &WorldState,
    device: &DeviceModel,
) -> (Vec<RayHit>, Vec<ObjectLabel>) {
    let hits = cast_rays(world, device, None);
    let labels = labels_from_hits(world, &hits);
    (hits, labels)
}

#[derive(Debug)]
pub struct Sequence {
    pub seed: u64,
    pub frames: Vec<PointFrame>,
    labels: Vec<Vec<ObjectLabel>>,
}

/// A rendered dataset split. Labels of a withheld split can still be read
/// (evaluation oracles need them), but every read flips an audit flag.
#[derive(Debug)]
pub struct Split {
    pub name: String,
    pub device: DeviceModel,
    pub sequences: Vec<Sequence>,
    withheld: bool,
    label_access: AtomicBool,
}

impl Split {
    pub fn is_withheld(&self) -> bool {
        self.withheld
    }

    /// True once any label of a withheld split has been read.
    pub fn label_access_audited(&self) -> bool {
        self.label_access.load(Ordering::SeqCst)
    }

    pub fn labels(&self, seq: usize, frame: usize) -> &[ObjectLabel] {
        if self.withheld {
            self.label_access.store(true, Ordering::SeqCst);
        }
        &self.sequences[seq].labels[frame]
    }

    /// `(sequence, frame)` of every consecutive pair's later frame.
    pub fn pair_indices(&self) -> Vec<(usize, usize)> {
        self.sequences
            .iter()
            .enumerate()
            .flat_map(|(s, q)| (1..q.frames.len()).map(move |f| (s, f)))
            .collect()
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.sequences.iter().map(|s| s.seed).collect()
    }
}

pub const SPLIT_SOURCE: u64 = 0x5352_4300;
pub const SPLIT_TARGET_TRAIN: u64 = 0x5447_5400;
pub const SPLIT_TARGET_EVAL: u64 = 0x5445_5600;

/// Renders `count` sequences through `device`, one seed per sequence.
pub fn make_split(
    config: &SimConfig,
    name: &str,
    device: &DeviceModel,
    tag: u64,
    count: usize,
    withheld: bool,
    exec: Exec,
) -> Result<Split> {
    config.validate()?;
    let seeds: Vec<u64> = (0..count)
        .map(|i| mix_seed(mix_seed(config.seed, tag), i as u64))
        .collect();
    let sequences = par::map(exec, &seeds, |&seed| {
        let worlds = make_world(config, device, seed).expect("validated config");
        let (frames, labels) = worlds.iter().map(|w| render_frame(w, device, seed)).unzip();
        Sequence {
            seed,
            frames,
            labels,
        }
    });
    Ok(Split {
        name: name.to_string(),
        device: device.clone(),
        sequences,
        withheld,
        label_access: AtomicBool::new(false),
    })
}

#[derive(Debug)]
pub struct Benchmark {
    pub source: Split,
    pub target_train: Split,
    pub target_eval: Split,
}

/// Source split (labeled), target train split (labels withheld) and target
/// eval split (labeled), from disjoint seed streams.
pub fn make_benchmark(config: &SimConfig, exec: Exec) -> Result<Benchmark> {
    Ok(Benchmark {
        source: make_split(
            config,
            "source",
            &config.source_device,
            SPLIT_SOURCE,
            config.sequences,
            false,
            exec,
        )?,
        target_train: make_split(
            config,
            "target_train",
            &config.target_device,
            SPLIT_TARGET_TRAIN,
            config.sequences,
            true,
            exec,
        )?,
        target_eval: make_split(
            config,
            "target_eval",
            &config.target_device,
            SPLIT_TARGET_EVAL,
            config.eval_sequences,
            false,
            exec,
        )?,
    })
}

pub fn encode_frame(frame: &PointFrame) -> Vec<u8> {
    let mut b = Vec::with_capacity(13 + 12 * frame.points.len());
    b.extend_from_slice(FRAME_MAGIC);
    b.extend_from_slice(&FRAME_VERSION.to_le_bytes());
    b.extend_from_slice(&(frame.points.len() as u32).to_le_bytes());
    b.push(frame.device.kind.code());
    for p in &frame.points {
        for c in p {
            b.extend_from_slice(&c.to_le_bytes());
        }
    }
    b
}

/// Decodes a `CLPF` frame. The header does not carry timestamps or device
/// parameters, so the device is restored from its preset.
pub fn decode_frame(bytes: &[u8]) -> Result<PointFrame> {
    let mut r = LeReader::new(bytes);
    if r.take(4)? != FRAME_MAGIC {
        return Err(Error::Format("missing CLPF magic".into()));
    }
    let version = r.u32()?;
    if version != FRAME_VERSION {
        return Err(Error::Format(format!("unsupported CLPF version {version}")));
    }
    let n = r.u32()? as usize;
    let kind = DeviceKind::from_code(r.u8()?)?;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        points.push([r.f32()?, r.f32()?, r.f32()?]);
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after point data".into()));
    }
    Ok(PointFrame {
        points,
        timestamp: 0.0,
        device: DeviceModel::preset(kind),
        frame_index: 0,
    })
}

pub fn write_frame(path: &Path, frame: &PointFrame) -> Result<()> {
    write_atomic(path, &encode_frame(frame))
}

pub fn read_frame(path: &Path) -> Result<PointFrame> {
    decode_frame(&read_file(path)?)
}

pub fn labels_to_jsonl(labels: &[ObjectLabel]) -> String {
    let mut s = String::new();
    for l in labels {
        s.push_str(&l.to_json_line());
        s.push('\n');
    }
    s
}

pub fn labels_from_jsonl(text: &str) -> Result<Vec<ObjectLabel>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(ObjectLabel::from_json_line)
        .collect()
}

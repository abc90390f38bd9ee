use super::forward::FeatureMaps;
use super::grid::BevGrid;
use super::nn::{log_sigmoid, sigmoid};
use crate::geometry::Box3D;
use crate::sim::ObjectLabel;
use crate::{Error, Result};

pub const BOX_DIM: usize = 6;
pub const VEL_DIM: usize = 2;

/// Overlap used by the size-adaptive kernel radius.
pub const MIN_OVERLAP: f64 = 0.7;

/// Regression target at a label's center cell.
#[derive(Clone, Debug, PartialEq)]
pub struct RegTarget {
    pub cell: usize,
    pub class: usize,
    /// `[dx, dy, log w, log l, sin yaw, cos yaw]`
    pub values: [f64; BOX_DIM],
    pub velocity: Option<[f64; VEL_DIM]>,
}

#[derive(Clone, Debug)]
pub struct Targets {
    pub heatmap: Vec<f64>,
    pub regs: Vec<RegTarget>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub reg: f64,
    pub motion: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reg: 1.0,
            motion: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub motion: f64,
    pub aux: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.cls + self.reg + self.motion + self.aux
    }

    pub fn add(&mut self, o: &LossBreakdown) {
        self.cls += o.cls;
        self.reg += o.reg;
        self.motion += o.motion;
        self.aux += o.aux;
    }

    pub fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            cls: self.cls * s,
            reg: self.reg * s,
            motion: self.motion * s,
            aux: self.aux * s,
        }
    }
}

/// Loss derivatives with respect to the dense head outputs.
#[derive(Clone, Debug)]
pub struct OutputGrads {
    pub heat: Vec<f64>,
    pub boxes: Vec<f64>,
    pub velocity: Vec<f64>,
}

/// Largest radius (in the units of `h`, `w`) at which a shifted box keeps
/// IoU ≥ `min_overlap` with the original, taking the tightest of the three
/// corner cases.
pub fn gaussian_radius(h: f64, w: f64, min_overlap: f64) -> f64 {
    let o = min_overlap;
    let b1 = h + w;
    let c1 = w * h * (1.0 - o) / (1.0 + o);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).max(0.0).sqrt()) / 2.0;
    let a2 = 4.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - o) * w * h;
    let r2 = (b2 + (b2 * b2 - 4.0 * a2 * c2).max(0.0).sqrt()) / 2.0;
    let a3 = 4.0 * o;
    let b3 = -2.0 * o * (h + w);
    let c3 = (o - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).max(0.0).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Kernel standard deviation in cells for a box footprint.
pub fn kernel_sigma(bbox: &Box3D, grid: &BevGrid) -> f64 {
    let cs = grid.cell_size();
    let r = gaussian_radius(bbox.size[0] / cs, bbox.size[1] / cs, MIN_OVERLAP);
    (r / 3.0).max(0.5)
}

/// Unnormalized Gaussian at an offset of `(dx, dy)` cells.
#[inline]
pub fn gaussian_value(dx: f64, dy: f64, sigma: f64) -> f64 {
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
}

/// Splats `peak · gauss` around the label's center cell, keeping the
/// per-cell maximum. Returns false when the label is off-grid or its class
/// has no channel.
pub(crate) fn splat_kernel(
    map: &mut [f64],
    grid: &BevGrid,
    classes: usize,
    label: &ObjectLabel,
    peak: f64,
) -> bool {
    for_each_kernel_cell(grid, classes, label, |idx, g| {
        let v = peak * g;
        if v > map[idx] {
            map[idx] = v;
        }
    })
}

/// Visits the kernel window of `label` with each cell's flat index and
/// Gaussian value. Returns false when the label is off-grid or its class has
/// no channel.
pub(crate) fn for_each_kernel_cell(
    grid: &BevGrid,
    classes: usize,
    label: &ObjectLabel,
    mut f: impl FnMut(usize, f64),
) -> bool {
    if label.class_id >= classes {
        return false;
    }
    let [x, y, _] = label.bbox.center;
    let Some((ix, iy)) = grid.cell_of(x, y) else {
        return false;
    };
    let sigma = kernel_sigma(&label.bbox, grid);
    let rad = (3.0 * sigma).ceil() as isize;
    let n = grid.resolution as isize;
    for dy in -rad..=rad {
        for dx in -rad..=rad {
            let (nx, ny) = (ix as isize + dx, iy as isize + dy);
            if nx < 0 || ny < 0 || nx >= n || ny >= n {
                continue;
            }
            f(
                grid.index(nx as usize, ny as usize) * classes + label.class_id,
                gaussian_value(dx as f64, dy as f64, sigma),
            );
        }
    }
    true
}

pub fn render_target_heatmap(labels: &[ObjectLabel], grid: &BevGrid, classes: usize) -> Vec<f64> {
    let mut map = vec![0.0; grid.cells() * classes];
    for l in labels {
        splat_kernel(&mut map, grid, classes, l, 1.0);
    }
    map
}

/// Regression values of a box relative to the center of cell `(ix, iy)`.
pub(crate) fn box_target(grid: &BevGrid, ix: usize, iy: usize, bbox: &Box3D) -> [f64; BOX_DIM] {
    let (cx, cy) = grid.cell_center(ix, iy);
    [
        bbox.center[0] - cx,
        bbox.center[1] - cy,
        bbox.size[1].ln(),
        bbox.size[0].ln(),
        bbox.yaw.sin(),
        bbox.yaw.cos(),
    ]
}

pub fn build_targets(
    labels: &[ObjectLabel],
    grid: &BevGrid,
    classes: usize,
    velocity_supervised: bool,
) -> Targets {
    let heatmap = render_target_heatmap(labels, grid, classes);
    let regs = labels
        .iter()
        .filter(|l| l.class_id < classes && l.bbox.is_valid())
        .filter_map(|l| {
            let (ix, iy) = grid.cell_of(l.bbox.center[0], l.bbox.center[1])?;
            Some(RegTarget {
                cell: grid.index(ix, iy),
                class: l.class_id,
                values: box_target(grid, ix, iy, &l.bbox),
                velocity: velocity_supervised.then_some(l.velocity),
            })
        })
        .collect();
    Targets { heatmap, regs }
}

/// `(value, derivative)` of the smooth-L1 penalty with unit transition.
#[inline]
pub fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// Penalty-reduced focal loss on the heatmap (optionally weighted per
/// pixel), smooth-L1 box regression and velocity regression at label
/// centers. Returns the loss terms and their derivatives with respect to
/// every head output.
pub fn detection_loss(
    maps: &FeatureMaps,
    targets: &Targets,
    weights: Option<&[f64]>,
    lw: &LossWeights,
) -> Result<(LossBreakdown, OutputGrads)> {
    let n = maps.heat.len();
    if targets.heatmap.len() != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            got: targets.heatmap.len(),
        });
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::ShapeMismatch {
                expected: n,
                got: w.len(),
            });
        }
    }
    let num_pos = targets.heatmap.iter().filter(|&&y| y == 1.0).count();
    let norm = 1.0 / num_pos.max(1) as f64;

    let mut heat = vec![0.0; n];
    let mut cls = 0.0;
    for i in 0..n {
        let z = maps.heat[i];
        let y = targets.heatmap[i];
        let w = weights.map_or(1.0, |w| w[i]) * norm;
        if w == 0.0 {
            continue;
        }
        let p = sigmoid(z);
        let (l, dz) = if y == 1.0 {
            let lp = log_sigmoid(z);
            let q = 1.0 - p;
            (-q * q * lp, 2.0 * p * q * q * lp - q * q * q)
        } else {
            let lq = log_sigmoid(-z);
            let neg = (1.0 - y).powi(4);
            (
                -neg * p * p * lq,
                -neg * (2.0 * p * p * (1.0 - p) * lq - p * p * p),
            )
        };
        cls += w * l;
        heat[i] = w * dz;
    }

    let mut boxes = vec![0.0; maps.boxes.len()];
    let mut velocity = vec![0.0; maps.velocity.len()];
    let mut reg = 0.0;
    let mut motion = 0.0;
    let reg_norm = lw.reg / targets.regs.len().max(1) as f64;
    let n_vel = targets.regs.iter().filter(|r| r.velocity.is_some()).count();
    let vel_norm = lw.motion / n_vel.max(1) as f64;
    for t in &targets.regs {
        for j in 0..BOX_DIM {
            let k = t.cell * BOX_DIM + j;
            let (l, d) = smooth_l1(maps.boxes[k] - t.values[j]);
            reg += reg_norm * l;
            boxes[k] += reg_norm * d;
        }
        if let Some(v) = t.velocity {
            for j in 0..VEL_DIM {
                let k = t.cell * VEL_DIM + j;
                let (l, d) = smooth_l1(maps.velocity[k] - v[j]);
                motion += vel_norm * l;
                velocity[k] += vel_norm * d;
            }
        }
    }
    Ok((
        LossBreakdown {
            cls,
            reg,
            motion,
            aux: 0.0,
        },
        OutputGrads {
            heat,
            boxes,
            velocity,
        },
    ))
}

/// [`splat_kernel`] for the prototype reweight map.
pub fn splat_weight(
    map: &mut [f64],
    grid: &BevGrid,
    classes: usize,
    label: &ObjectLabel,
    peak: f64,
) -> bool {
    splat_kernel(map, grid, classes, label, peak)
}

/// Public face of [`for_each_kernel_cell`].
pub fn kernel_cells(
    grid: &BevGrid,
    classes: usize,
    label: &ObjectLabel,
    f: impl FnMut(usize, f64),
) -> bool {
    for_each_kernel_cell(grid, classes, label, f)
}

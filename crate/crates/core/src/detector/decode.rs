use serde::{Deserialize, Serialize};

use super::forward::FeatureMaps;
use super::nn::sigmoid;
use super::{BOX_DIM, VEL_DIM};
use crate::geometry::Box3D;
use crate::sim::ObjectLabel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub center: [f64; 2],
    /// `[w, l]`
    pub size: [f64; 2],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class_id: usize,
    pub score: f64,
}

impl Detection {
    /// A label box resting on the ground plane.
    pub fn to_label(&self, id: u32, ground_z: f64, height: f64) -> ObjectLabel {
        ObjectLabel {
            id,
            bbox: Box3D::new(
                [self.center[0], self.center[1], ground_z + 0.5 * height],
                [self.size[1], self.size[0], height],
                self.yaw,
            ),
            class_id: self.class_id,
            velocity: self.velocity,
            confidence: self.score,
        }
    }
}

/// Peaks of the heatmap over 3×3 neighborhoods scoring at least
/// `score_floor`, highest first, at most `max_detections`.
///
/// A cell is a peak when no neighbor is larger and no neighbor with a lower
/// cell index is equal, so a flat plateau yields a single peak per
/// connected run rather than several.
pub fn decode(maps: &FeatureMaps, score_floor: f64, max_detections: usize) -> Vec<Detection> {
    let grid = maps.grid;
    let n = grid.resolution as isize;
    let classes = maps.classes;
    let floor_logit = if score_floor >= 1.0 {
        f64::INFINITY
    } else {
        (score_floor / (1.0 - score_floor)).ln()
    };
    let mut peaks: Vec<(f64, usize, usize)> = Vec::new();
    for c in 0..grid.cells() {
        let (ix, iy) = grid.coords(c);
        for k in 0..classes {
            let z = maps.heat[c * classes + k];
            if z < floor_logit || sigmoid(z) < score_floor {
                continue;
            }
            let mut is_peak = true;
            'nb: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (ix as isize + dx, iy as isize + dy);
                    if nx < 0 || ny < 0 || nx >= n || ny >= n {
                        continue;
                    }
                    let nc = grid.index(nx as usize, ny as usize);
                    let nz = maps.heat[nc * classes + k];
                    if nz > z || (nz == z && nc < c) {
                        is_peak = false;
                        break 'nb;
                    }
                }
            }
            if is_peak {
                peaks.push((sigmoid(z), c, k));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    peaks.truncate(max_detections);
    peaks
        .into_iter()
        .map(|(score, c, k)| {
            let (ix, iy) = grid.coords(c);
            let (cx, cy) = grid.cell_center(ix, iy);
            let b = &maps.boxes[c * BOX_DIM..(c + 1) * BOX_DIM];
            let v = &maps.velocity[c * VEL_DIM..(c + 1) * VEL_DIM];
            Detection {
                center: [cx + b[0], cy + b[1]],
                size: [b[2].clamp(-5.0, 5.0).exp(), b[3].clamp(-5.0, 5.0).exp()],
                yaw: b[4].atan2(b[5]),
                velocity: [v[0], v[1]],
                class_id: k,
                score,
            }
        })
        .collect()
}

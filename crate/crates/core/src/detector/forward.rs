use super::grid::BevGrid;
use super::nn::{add_assign, affine, gemv_acc, relu_inplace, sigmoid};
use super::{DetectorState, Tensor, BOX_DIM, VEL_DIM};
use crate::geometry::{norm, to_f64};
use crate::{Error, Result};

/// Per-point input width: `[x−cx, y−cy, z, |r|/R, Δocc, 1, t-flag]`.
pub const POINT_FEATURES: usize = 7;

pub(crate) const NONE: u32 = u32::MAX;

/// Output of one forward pass over a frame pair.
///
/// Backbone and motion features are stored only for active cells (those
/// within the kernel reach of an occupied cell); every other cell holds the
/// shared background vectors. Head outputs are dense.
#[derive(Clone, Debug)]
pub struct FeatureMaps {
    pub grid: BevGrid,
    pub channels: usize,
    pub classes: usize,
    /// Active cell indices, ascending.
    pub active: Vec<u32>,
    /// Dense cell → active slot, `u32::MAX` for background cells.
    pub slot: Vec<u32>,
    pub backbone: Vec<f64>,
    pub backbone_bg: Vec<f64>,
    /// Hidden layer of the motion head (post-activation).
    pub motion: Vec<f64>,
    pub motion_bg: Vec<f64>,
    /// Heatmap logits, `cells × classes`.
    pub heat: Vec<f64>,
    /// Box regression, `cells × 6`.
    pub boxes: Vec<f64>,
    /// Velocity, `cells × 2`.
    pub velocity: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct EncodeCache {
    pub(crate) point_slot: Vec<u32>,
    pub(crate) feats: Vec<f64>,
    pub(crate) h1: Vec<f64>,
    pub(crate) h2: Vec<f64>,
    pub(crate) occupied: Vec<u32>,
    pub(crate) occ_slot: Vec<u32>,
    pub(crate) occ_count: Vec<u32>,
    pub(crate) pooled: Vec<f64>,
}

#[derive(Clone, Copy)]
enum MapKind {
    Backbone,
    Motion,
}

impl FeatureMaps {
    pub fn backbone_at(&self, cell: usize) -> &[f64] {
        let ch = self.channels;
        match self.slot[cell] {
            NONE => &self.backbone_bg,
            s => &self.backbone[s as usize * ch..(s as usize + 1) * ch],
        }
    }

    pub fn motion_at(&self, cell: usize) -> &[f64] {
        let ch = self.channels;
        match self.slot[cell] {
            NONE => &self.motion_bg,
            s => &self.motion[s as usize * ch..(s as usize + 1) * ch],
        }
    }

    fn at(&self, kind: MapKind, cell: usize) -> &[f64] {
        let ch = self.channels;
        let (dense, bg) = match kind {
            MapKind::Backbone => (&self.backbone, &self.backbone_bg),
            MapKind::Motion => (&self.motion, &self.motion_bg),
        };
        match self.slot[cell] {
            NONE => bg,
            s => &dense[s as usize * ch..(s as usize + 1) * ch],
        }
    }

    pub fn score(&self, cell: usize, class: usize) -> f64 {
        sigmoid(self.heat[cell * self.classes + class])
    }

    /// Dense copy of the backbone map, `cells × channels`.
    pub fn dense_backbone(&self) -> Vec<f64> {
        (0..self.grid.cells())
            .flat_map(|c| self.backbone_at(c).to_vec())
            .collect()
    }

    pub fn sample_backbone(&self, x: f64, y: f64) -> Result<Vec<f64>> {
        self.bilinear(MapKind::Backbone, x, y)
    }

    pub fn sample_motion(&self, x: f64, y: f64) -> Result<Vec<f64>> {
        self.bilinear(MapKind::Motion, x, y)
    }

    /// Bilinear interpolation between cell centers; positions in the outer
    /// half-cell border replicate the edge.
    fn bilinear(&self, kind: MapKind, x: f64, y: f64) -> Result<Vec<f64>> {
        if !self.grid.contains(x, y) || !x.is_finite() || !y.is_finite() {
            return Err(Error::OutOfExtent { x, y });
        }
        let n = self.grid.resolution;
        let (u, v) = self.grid.grid_coords(x, y);
        let axis = |t: f64| -> (usize, usize, f64) {
            let t = t.clamp(0.0, (n - 1) as f64);
            let i0 = (t.floor() as usize).min(n.saturating_sub(2));
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, t - i0 as f64)
        };
        let (x0, x1, tx) = axis(u);
        let (y0, y1, ty) = axis(v);
        let at = |ix: usize, iy: usize| self.at(kind, self.grid.index(ix, iy));
        let corners = [
            (at(x0, y0), (1.0 - tx) * (1.0 - ty)),
            (at(x1, y0), tx * (1.0 - ty)),
            (at(x0, y1), (1.0 - tx) * ty),
            (at(x1, y1), tx * ty),
        ];
        let mut out = vec![0.0; self.channels];
        for (f, w) in corners {
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(f) {
                *o += w * v;
            }
        }
        Ok(out)
    }
}

impl DetectorState {
    /// Forward pass over the current frame and its predecessor.
    pub fn encode(&self, cur: &[[f32; 3]], prev: &[[f32; 3]]) -> FeatureMaps {
        self.encode_impl(cur, prev, false).0
    }

    pub fn encode_with_cache(
        &self,
        cur: &[[f32; 3]],
        prev: &[[f32; 3]],
    ) -> (FeatureMaps, EncodeCache) {
        let (maps, cache) = self.encode_impl(cur, prev, true);
        (maps, cache.expect("cache requested"))
    }

    fn encode_impl(
        &self,
        cur: &[[f32; 3]],
        prev: &[[f32; 3]],
        keep: bool,
    ) -> (FeatureMaps, Option<EncodeCache>) {
        let cfg = &self.config;
        let grid = cfg.grid;
        let n_cells = grid.cells();
        let (hd, ch) = (cfg.hidden, cfg.channels);

        // bit 0: occupied in the previous frame, bit 1: in the current one
        let mut occ = vec![0u8; n_cells];
        let mut pts: Vec<(u32, [f64; 3], f64)> = Vec::with_capacity(cur.len() + prev.len());
        for (frame, flag, bit) in [(prev, 0.0, 1u8), (cur, 1.0, 2u8)] {
            for p in frame {
                let p = to_f64(*p);
                if let Some((ix, iy)) = grid.cell_of(p[0], p[1]) {
                    let c = grid.index(ix, iy);
                    occ[c] |= bit;
                    pts.push((c as u32, p, flag));
                }
            }
        }

        let mut occ_slot = vec![NONE; n_cells];
        let mut occupied = Vec::new();
        for (c, &o) in occ.iter().enumerate() {
            if o != 0 {
                occ_slot[c] = occupied.len() as u32;
                occupied.push(c as u32);
            }
        }
        let n_occ = occupied.len();

        let (w1, b1) = (self.t(Tensor::EncW1), self.t(Tensor::EncB1));
        let (w2, b2) = (self.t(Tensor::EncW2), self.t(Tensor::EncB2));
        let mut pooled = vec![0.0; n_occ * ch];
        let mut occ_count = vec![0u32; n_occ];
        let cap = if keep { pts.len() } else { 0 };
        let mut point_slot = Vec::with_capacity(cap);
        let mut feats = Vec::with_capacity(cap * POINT_FEATURES);
        let mut h1s = Vec::with_capacity(cap * hd);
        let mut h2s = Vec::with_capacity(cap * ch);
        let mut h1 = vec![0.0; hd];
        let mut h2 = vec![0.0; ch];
        let inv_range = 1.0 / grid.range;
        for &(c, p, flag) in &pts {
            let (ix, iy) = grid.coords(c as usize);
            let (cx, cy) = grid.cell_center(ix, iy);
            let o = occ[c as usize];
            let docc = ((o >> 1) & 1) as f64 - (o & 1) as f64;
            let f = [
                p[0] - cx,
                p[1] - cy,
                p[2],
                norm(p) * inv_range,
                docc,
                1.0,
                flag,
            ];
            affine(w1, b1, &f, &mut h1);
            relu_inplace(&mut h1);
            affine(w2, b2, &h1, &mut h2);
            relu_inplace(&mut h2);
            let s = occ_slot[c as usize] as usize;
            add_assign(&mut pooled[s * ch..(s + 1) * ch], &h2);
            occ_count[s] += 1;
            if keep {
                point_slot.push(s as u32);
                feats.extend_from_slice(&f);
                h1s.extend_from_slice(&h1);
                h2s.extend_from_slice(&h2);
            }
        }
        for (s, &n) in occ_count.iter().enumerate() {
            let inv = 1.0 / n as f64;
            pooled[s * ch..(s + 1) * ch]
                .iter_mut()
                .for_each(|v| *v *= inv);
        }

        // active cells: dilation of the occupied set by the kernel radius
        let r = (cfg.kernel / 2) as isize;
        let res = grid.resolution as isize;
        let mut is_active = vec![false; n_cells];
        for &c in &occupied {
            let (ix, iy) = grid.coords(c as usize);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (ix as isize + dx, iy as isize + dy);
                    if nx >= 0 && ny >= 0 && nx < res && ny < res {
                        is_active[grid.index(nx as usize, ny as usize)] = true;
                    }
                }
            }
        }
        let mut slot = vec![NONE; n_cells];
        let mut active = Vec::new();
        for (c, &a) in is_active.iter().enumerate() {
            if a {
                slot[c] = active.len() as u32;
                active.push(c as u32);
            }
        }

        let convw = self.t(Tensor::ConvW);
        let convb = self.t(Tensor::ConvB);
        let k = cfg.kernel as isize;
        let mut backbone = vec![0.0; active.len() * ch];
        for (a, &c) in active.iter().enumerate() {
            let out = &mut backbone[a * ch..(a + 1) * ch];
            out.copy_from_slice(convb);
            let (ix, iy) = grid.coords(c as usize);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (ix as isize + dx, iy as isize + dy);
                    if nx < 0 || ny < 0 || nx >= res || ny >= res {
                        continue;
                    }
                    let o = occ_slot[grid.index(nx as usize, ny as usize)];
                    if o == NONE {
                        continue;
                    }
                    let tap = ((dy + r) * k + (dx + r)) as usize;
                    let o = o as usize;
                    gemv_acc(
                        &convw[tap * ch * ch..(tap + 1) * ch * ch],
                        &pooled[o * ch..(o + 1) * ch],
                        out,
                    );
                }
            }
            relu_inplace(out);
        }
        let mut backbone_bg = convb.to_vec();
        relu_inplace(&mut backbone_bg);

        let classes = cfg.classes;
        let mut heat_bg = vec![0.0; classes];
        let mut box_bg = [0.0; BOX_DIM];
        let mut motion_bg = vec![0.0; ch];
        let mut vel_bg = [0.0; VEL_DIM];
        self.heads(
            &backbone_bg,
            &mut heat_bg,
            &mut box_bg,
            &mut motion_bg,
            &mut vel_bg,
        );

        let mut heat: Vec<f64> = heat_bg
            .iter()
            .copied()
            .cycle()
            .take(n_cells * classes)
            .collect();
        let mut boxes: Vec<f64> = box_bg
            .iter()
            .copied()
            .cycle()
            .take(n_cells * BOX_DIM)
            .collect();
        let mut velocity: Vec<f64> = vel_bg
            .iter()
            .copied()
            .cycle()
            .take(n_cells * VEL_DIM)
            .collect();
        let mut motion = vec![0.0; active.len() * ch];
        for (a, &c) in active.iter().enumerate() {
            let c = c as usize;
            self.heads(
                &backbone[a * ch..(a + 1) * ch],
                &mut heat[c * classes..(c + 1) * classes],
                &mut boxes[c * BOX_DIM..(c + 1) * BOX_DIM],
                &mut motion[a * ch..(a + 1) * ch],
                &mut velocity[c * VEL_DIM..(c + 1) * VEL_DIM],
            );
        }

        let maps = FeatureMaps {
            grid,
            channels: ch,
            classes,
            active,
            slot,
            backbone,
            backbone_bg,
            motion,
            motion_bg,
            heat,
            boxes,
            velocity,
        };
        let cache = keep.then_some(EncodeCache {
            point_slot,
            feats,
            h1: h1s,
            h2: h2s,
            occupied,
            occ_slot,
            occ_count,
            pooled,
        });
        (maps, cache)
    }

    fn heads(&self, f: &[f64], heat: &mut [f64], bx: &mut [f64], m: &mut [f64], vel: &mut [f64]) {
        affine(self.t(Tensor::HeatW), self.t(Tensor::HeatB), f, heat);
        affine(self.t(Tensor::BoxW), self.t(Tensor::BoxB), f, bx);
        affine(self.t(Tensor::MotW1), self.t(Tensor::MotB1), f, m);
        relu_inplace(m);
        affine(self.t(Tensor::MotW2), self.t(Tensor::MotB2), m, vel);
    }
}

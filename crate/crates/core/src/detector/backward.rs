use super::forward::{EncodeCache, FeatureMaps, NONE};
use super::loss::OutputGrads;
use super::nn::{add_assign, gemv_t_acc, outer_acc, relu_mask};
use super::{DetectorState, Tensor, BOX_DIM, VEL_DIM};

/// Gradient accumulators for the tensors touched by the detection loss.
struct HeadGrads {
    heat_w: Vec<f64>,
    heat_b: Vec<f64>,
    box_w: Vec<f64>,
    box_b: Vec<f64>,
    mot_w1: Vec<f64>,
    mot_b1: Vec<f64>,
    mot_w2: Vec<f64>,
    mot_b2: Vec<f64>,
}

impl DetectorState {
    /// Accumulates parameter gradients of a loss whose derivatives with
    /// respect to the head outputs are `og`, into `grads`.
    pub fn backward(
        &self,
        maps: &FeatureMaps,
        cache: &EncodeCache,
        og: &OutputGrads,
        grads: &mut [f64],
    ) {
        let cfg = &self.config;
        let grid = cfg.grid;
        let (hd, ch, classes) = (cfg.hidden, cfg.channels, cfg.classes);
        let zeros = |t: Tensor| vec![0.0; self.layout.range(t).len()];
        let mut hg = HeadGrads {
            heat_w: zeros(Tensor::HeatW),
            heat_b: zeros(Tensor::HeatB),
            box_w: zeros(Tensor::BoxW),
            box_b: zeros(Tensor::BoxB),
            mot_w1: zeros(Tensor::MotW1),
            mot_b1: zeros(Tensor::MotB1),
            mot_w2: zeros(Tensor::MotW2),
            mot_b2: zeros(Tensor::MotB2),
        };

        // heads: active cells individually, background cells as one sum
        let n_act = maps.active.len();
        let mut d_f = vec![0.0; n_act * ch];
        let mut bg_heat = vec![0.0; classes];
        let mut bg_box = [0.0; BOX_DIM];
        let mut bg_vel = [0.0; VEL_DIM];
        for c in 0..grid.cells() {
            let gh = &og.heat[c * classes..(c + 1) * classes];
            let gb = &og.boxes[c * BOX_DIM..(c + 1) * BOX_DIM];
            let gv = &og.velocity[c * VEL_DIM..(c + 1) * VEL_DIM];
            match maps.slot[c] {
                NONE => {
                    add_assign(&mut bg_heat, gh);
                    add_assign(&mut bg_box, gb);
                    add_assign(&mut bg_vel, gv);
                }
                s => {
                    let s = s as usize;
                    self.head_backward(
                        &maps.backbone[s * ch..(s + 1) * ch],
                        &maps.motion[s * ch..(s + 1) * ch],
                        gh,
                        gb,
                        gv,
                        &mut d_f[s * ch..(s + 1) * ch],
                        &mut hg,
                    );
                }
            }
        }
        let mut d_f_bg = vec![0.0; ch];
        self.head_backward(
            &maps.backbone_bg,
            &maps.motion_bg,
            &bg_heat,
            &bg_box,
            &bg_vel,
            &mut d_f_bg,
            &mut hg,
        );

        // convolution + activation
        for s in 0..n_act {
            relu_mask(
                &maps.backbone[s * ch..(s + 1) * ch],
                &mut d_f[s * ch..(s + 1) * ch],
            );
        }
        relu_mask(&maps.backbone_bg, &mut d_f_bg);
        let mut conv_b = d_f_bg.clone();
        let mut conv_w = vec![0.0; self.layout.range(Tensor::ConvW).len()];
        let convw = self.t(Tensor::ConvW);
        let n_occ = cache.occupied.len();
        let mut d_pooled = vec![0.0; n_occ * ch];
        let r = (cfg.kernel / 2) as isize;
        let k = cfg.kernel as isize;
        let res = grid.resolution as isize;
        for (a, &c) in maps.active.iter().enumerate() {
            let g = &d_f[a * ch..(a + 1) * ch];
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            add_assign(&mut conv_b, g);
            let (ix, iy) = grid.coords(c as usize);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (ix as isize + dx, iy as isize + dy);
                    if nx < 0 || ny < 0 || nx >= res || ny >= res {
                        continue;
                    }
                    let o = cache.occ_slot[grid.index(nx as usize, ny as usize)];
                    if o == NONE {
                        continue;
                    }
                    let o = o as usize;
                    let tap = ((dy + r) * k + (dx + r)) as usize;
                    let wr = tap * ch * ch..(tap + 1) * ch * ch;
                    outer_acc(
                        g,
                        &cache.pooled[o * ch..(o + 1) * ch],
                        &mut conv_w[wr.clone()],
                    );
                    gemv_t_acc(&convw[wr], g, &mut d_pooled[o * ch..(o + 1) * ch]);
                }
            }
        }

        // per-point perceptron through the mean pool
        for (o, &n) in cache.occ_count.iter().enumerate() {
            let inv = 1.0 / n as f64;
            d_pooled[o * ch..(o + 1) * ch]
                .iter_mut()
                .for_each(|v| *v *= inv);
        }
        let w2 = self.t(Tensor::EncW2);
        let mut enc_w1 = vec![0.0; self.layout.range(Tensor::EncW1).len()];
        let mut enc_b1 = vec![0.0; hd];
        let mut enc_w2 = vec![0.0; self.layout.range(Tensor::EncW2).len()];
        let mut enc_b2 = vec![0.0; ch];
        let mut dz2 = vec![0.0; ch];
        let mut dz1 = vec![0.0; hd];
        for (p, &o) in cache.point_slot.iter().enumerate() {
            let o = o as usize;
            let g = &d_pooled[o * ch..(o + 1) * ch];
            dz2.copy_from_slice(g);
            let h2 = &cache.h2[p * ch..(p + 1) * ch];
            relu_mask(h2, &mut dz2);
            if dz2.iter().all(|v| *v == 0.0) {
                continue;
            }
            let h1 = &cache.h1[p * hd..(p + 1) * hd];
            outer_acc(&dz2, h1, &mut enc_w2);
            add_assign(&mut enc_b2, &dz2);
            dz1.fill(0.0);
            gemv_t_acc(w2, &dz2, &mut dz1);
            relu_mask(h1, &mut dz1);
            let f = &cache.feats[p * super::POINT_FEATURES..(p + 1) * super::POINT_FEATURES];
            outer_acc(&dz1, f, &mut enc_w1);
            add_assign(&mut enc_b1, &dz1);
        }

        let layout = &self.layout;
        let mut put = |t: Tensor, g: &[f64]| add_assign(&mut grads[layout.range(t)], g);
        put(Tensor::EncW1, &enc_w1);
        put(Tensor::EncB1, &enc_b1);
        put(Tensor::EncW2, &enc_w2);
        put(Tensor::EncB2, &enc_b2);
        put(Tensor::ConvW, &conv_w);
        put(Tensor::ConvB, &conv_b);
        put(Tensor::HeatW, &hg.heat_w);
        put(Tensor::HeatB, &hg.heat_b);
        put(Tensor::BoxW, &hg.box_w);
        put(Tensor::BoxB, &hg.box_b);
        put(Tensor::MotW1, &hg.mot_w1);
        put(Tensor::MotB1, &hg.mot_b1);
        put(Tensor::MotW2, &hg.mot_w2);
        put(Tensor::MotB2, &hg.mot_b2);
    }

    #[allow(clippy::too_many_arguments)]
    fn head_backward(
        &self,
        f: &[f64],
        m: &[f64],
        gh: &[f64],
        gb: &[f64],
        gv: &[f64],
        d_f: &mut [f64],
        hg: &mut HeadGrads,
    ) {
        let nonzero = |g: &[f64]| g.iter().any(|v| *v != 0.0);
        if nonzero(gh) {
            outer_acc(gh, f, &mut hg.heat_w);
            add_assign(&mut hg.heat_b, gh);
            gemv_t_acc(self.t(Tensor::HeatW), gh, d_f);
        }
        if nonzero(gb) {
            outer_acc(gb, f, &mut hg.box_w);
            add_assign(&mut hg.box_b, gb);
            gemv_t_acc(self.t(Tensor::BoxW), gb, d_f);
        }
        if nonzero(gv) {
            outer_acc(gv, m, &mut hg.mot_w2);
            add_assign(&mut hg.mot_b2, gv);
            let mut dm = vec![0.0; m.len()];
            gemv_t_acc(self.t(Tensor::MotW2), gv, &mut dm);
            relu_mask(m, &mut dm);
            outer_acc(&dm, f, &mut hg.mot_w1);
            add_assign(&mut hg.mot_b1, &dm);
            gemv_t_acc(self.t(Tensor::MotW1), &dm, d_f);
        }
    }
}

use super::nn::{add_assign, affine, gemv_t_acc, outer_acc, relu_inplace, relu_mask};
use super::{DetectorState, Tensor};
use crate::geometry::Vec3;

/// Activations of the shape perceptron over one point set.
#[derive(Clone, Debug)]
pub struct ShapeForward {
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    /// Elementwise max of `h2` over points.
    pub pooled: Vec<f64>,
    /// Row of the maximum per channel (lowest on ties).
    pub argmax: Vec<usize>,
}

impl DetectorState {
    pub fn shape_forward(&self, points: &[Vec3]) -> ShapeForward {
        let (sh, so) = (self.config.shape_hidden, self.config.shape_out);
        let mut h1 = vec![0.0; points.len() * sh];
        let mut h2 = vec![0.0; points.len() * so];
        for (i, p) in points.iter().enumerate() {
            let a = &mut h1[i * sh..(i + 1) * sh];
            affine(self.t(Tensor::ShapeW1), self.t(Tensor::ShapeB1), p, a);
            relu_inplace(a);
            let b = &mut h2[i * so..(i + 1) * so];
            affine(
                self.t(Tensor::ShapeW2),
                self.t(Tensor::ShapeB2),
                &h1[i * sh..(i + 1) * sh],
                b,
            );
            relu_inplace(b);
        }
        let mut pooled = vec![0.0; so];
        let mut argmax = vec![0; so];
        for j in 0..so {
            let mut best = f64::NEG_INFINITY;
            for i in 0..points.len() {
                if h2[i * so + j] > best {
                    best = h2[i * so + j];
                    argmax[j] = i;
                }
            }
            pooled[j] = if points.is_empty() { 0.0 } else { best };
        }
        ShapeForward {
            h1,
            h2,
            pooled,
            argmax,
        }
    }
}

/// Max-pooled shape feature of a self-normalized point set.
pub fn shape_features(state: &DetectorState, points: &[Vec3]) -> Vec<f64> {
    state.shape_forward(points).pooled
}

/// Mean cross-entropy of the linear shape classifier over `(points, class)`
/// pairs, scaled by the auxiliary weight. Gradients are accumulated when a
/// buffer is given.
pub fn shape_aux_loss(
    state: &DetectorState,
    samples: &[(Vec<Vec3>, usize)],
    mut grads: Option<&mut [f64]>,
) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let cfg = &state.config;
    let (sh, so, ns) = (cfg.shape_hidden, cfg.shape_out, cfg.shape_classes);
    let scale = cfg.aux_weight / samples.len() as f64;
    let layout = &state.layout;
    let mut total = 0.0;
    let mut logits = vec![0.0; ns];
    for (points, class) in samples {
        let fw = state.shape_forward(points);
        affine(
            state.t(Tensor::ShapeClsW),
            state.t(Tensor::ShapeClsB),
            &fw.pooled,
            &mut logits,
        );
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        total += scale * (lse - logits[*class]);
        let Some(g) = grads.as_deref_mut() else {
            continue;
        };
        let dlogits: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(k, z)| scale * ((z - lse).exp() - if k == *class { 1.0 } else { 0.0 }))
            .collect();
        outer_acc(
            &dlogits,
            &fw.pooled,
            &mut g[layout.range(Tensor::ShapeClsW)],
        );
        add_assign(&mut g[layout.range(Tensor::ShapeClsB)], &dlogits);
        let mut dpool = vec![0.0; so];
        gemv_t_acc(state.t(Tensor::ShapeClsW), &dlogits, &mut dpool);
        let n = points.len();
        let mut dh2 = vec![0.0; n * so];
        for j in 0..so {
            dh2[fw.argmax[j] * so + j] += dpool[j];
        }
        let mut dz1 = vec![0.0; sh];
        for i in 0..n {
            let dz2 = &mut dh2[i * so..(i + 1) * so];
            relu_mask(&fw.h2[i * so..(i + 1) * so], dz2);
            if dz2.iter().all(|v| *v == 0.0) {
                continue;
            }
            let h1 = &fw.h1[i * sh..(i + 1) * sh];
            outer_acc(dz2, h1, &mut g[layout.range(Tensor::ShapeW2)]);
            add_assign(&mut g[layout.range(Tensor::ShapeB2)], dz2);
            dz1.fill(0.0);
            gemv_t_acc(state.t(Tensor::ShapeW2), dz2, &mut dz1);
            relu_mask(h1, &mut dz1);
            outer_acc(&dz1, &points[i], &mut g[layout.range(Tensor::ShapeW1)]);
            add_assign(&mut g[layout.range(Tensor::ShapeB1)], &dz1);
        }
    }
    total
}

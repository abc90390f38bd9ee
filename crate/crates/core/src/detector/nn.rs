//! Dense kernels on row-major `[out × in]` weight matrices.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = w x + b`
#[inline]
pub fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n_in)) {
        *o = 0.0;
        *o += dot(row, x);
    }
    for (o, bi) in out.iter_mut().zip(b) {
        *o += bi;
    }
}

/// `out += w x`
#[inline]
pub fn gemv_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n_in)) {
        *o += dot(row, x);
    }
}

/// `dx += wᵀ dy`
#[inline]
pub fn gemv_t_acc(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let n_in = dx.len();
    for (g, row) in dy.iter().zip(w.chunks_exact(n_in)) {
        if *g == 0.0 {
            continue;
        }
        for (d, wi) in dx.iter_mut().zip(row) {
            *d += g * wi;
        }
    }
}

/// `dw += dy ⊗ x`
#[inline]
pub fn outer_acc(dy: &[f64], x: &[f64], dw: &mut [f64]) {
    let n_in = x.len();
    for (g, row) in dy.iter().zip(dw.chunks_exact_mut(n_in)) {
        if *g == 0.0 {
            continue;
        }
        for (d, xi) in row.iter_mut().zip(x) {
            *d += g * xi;
        }
    }
}

#[inline]
pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `d` wherever the post-activation `y` is not positive.
#[inline]
pub fn relu_mask(y: &[f64], d: &mut [f64]) {
    for (g, v) in d.iter_mut().zip(y) {
        if *v <= 0.0 {
            *g = 0.0;
        }
    }
}

#[inline]
pub fn add_assign(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// `log(sigmoid(z))`, stable for large |z|.
#[inline]
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

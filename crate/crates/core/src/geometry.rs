//! Oriented boxes and the small amount of 3-vector math the crate needs.

use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

pub type Vec3 = [f64; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = sub(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

#[inline]
pub fn to_f64(p: [f32; 3]) -> Vec3 {
    [p[0] as f64, p[1] as f64, p[2] as f64]
}

#[inline]
pub fn to_f32(p: Vec3) -> [f32; 3] {
    [p[0] as f32, p[1] as f32, p[2] as f32]
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

/// Rotates `(x, y)` counter-clockwise by `angle` about the z axis.
#[inline]
pub fn rotate_z(p: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}

/// An oriented 3D box: center, size as `[length, width, height]` along the
/// box's own x/y/z axes, and heading (yaw about +z).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Vec3,
    pub size: Vec3,
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: Vec3, size: Vec3, yaw: f64) -> Self {
        Self { center, size, yaw }
    }

    pub fn is_valid(&self) -> bool {
        self.size.iter().all(|s| *s > 0.0 && s.is_finite())
            && self.center.iter().all(|c| c.is_finite())
            && self.yaw.is_finite()
    }

    /// LiDAR frame to box frame: `R(-yaw) (p - center)`.
    #[inline]
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        rotate_z(sub(p, self.center), -self.yaw)
    }

    /// Box frame to LiDAR frame.
    #[inline]
    pub fn to_world(&self, q: Vec3) -> Vec3 {
        let r = rotate_z(q, self.yaw);
        [
            r[0] + self.center[0],
            r[1] + self.center[1],
            r[2] + self.center[2],
        ]
    }

    /// Whether `p` lies within `size / 2 + margin` on every box axis.
    pub fn contains(&self, p: Vec3, margin: f64) -> bool {
        let q = self.to_local(p);
        (0..3).all(|i| q[i].abs() <= 0.5 * self.size[i] + margin)
    }

    /// Slab-method ray intersection. Returns the smallest positive ray
    /// parameter `t` where `origin + t * dir` enters the box.
    pub fn ray_hit(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        let o = self.to_local(origin);
        let d = rotate_z(dir, -self.yaw);
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for i in 0..3 {
            let h = 0.5 * self.size[i];
            if d[i].abs() < 1e-15 {
                if o[i] < -h || o[i] > h {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[i];
            let (mut t0, mut t1) = ((-h - o[i]) * inv, (h - o[i]) * inv);
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_near = t_near.max(t0);
            t_far = t_far.min(t1);
            if t_near > t_far {
                return None;
            }
        }
        if t_far <= 0.0 {
            None
        } else if t_near > 0.0 {
            Some(t_near)
        } else {
            // origin inside the box
            Some(t_far)
        }
    }

    /// Distance from `p` to the box surface (zero on the surface).
    pub fn surface_distance(&self, p: Vec3) -> f64 {
        let q = self.to_local(p);
        let mut outside = 0.0;
        let mut inside = f64::INFINITY;
        for i in 0..3 {
            let h = 0.5 * self.size[i];
            let e = q[i].abs() - h;
            if e > 0.0 {
                outside += e * e;
            }
            inside = inside.min(-e);
        }
        if outside > 0.0 {
            outside.sqrt()
        } else {
            inside.max(0.0)
        }
    }

    pub fn footprint_radius(&self) -> f64 {
        0.5 * (self.size[0] * self.size[0] + self.size[1] * self.size[1]).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        for a in [-10.0, -PI, 0.0, PI, 3.5 * PI, 1e-17, -1e-17] {
            let w = wrap_angle(a);
            assert!((-PI..PI).contains(&w), "{a} -> {w}");
            assert!(((w - a) / TAU - ((w - a) / TAU).round()).abs() < 1e-9);
        }
    }

    #[test]
    fn ray_hits_front_face() {
        let b = Box3D::new([10.0, 0.0, 0.0], [4.0, 2.0, 1.5], 0.0);
        let t = b.ray_hit([0.0; 3], [1.0, 0.0, 0.0]).unwrap();
        assert!((t - 8.0).abs() < 1e-12);
        assert!(b.ray_hit([0.0; 3], [-1.0, 0.0, 0.0]).is_none());
        assert!(b.ray_hit([0.0; 3], [0.0, 1.0, 0.0]).is_none());
    }

    #[test]
    fn local_world_round_trip() {
        let b = Box3D::new([3.0, -2.0, 0.5], [4.0, 2.0, 1.5], 0.7);
        let p = [1.0, 2.0, 3.0];
        let q = b.to_world(b.to_local(p));
        assert!(dist2(p, q) < 1e-24);
    }
}

//! Per-object features for prototype matching: a shape feature from the
//! object's own points plus a context feature from the backbone map
//! (together the geometry feature), a motion feature from the motion map,
//! and their normalized fusion.

use serde::{Deserialize, Serialize};

use crate::config::{kv, parse_bool, parse_value, KvConfig};
use crate::detector::{shape_features, DetectorState, FeatureMaps};
use crate::geometry::{Box3D, Vec3};
use crate::pointops::{crop_cloud, shape_sample_points, ShapeSampling};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoFeature {
    pub f_local: Vec<f64>,
    pub f_global: Vec<f64>,
}

impl GeoFeature {
    /// `f_local ⊕ f_global`
    pub fn f_geo(&self) -> Vec<f64> {
        let mut v = self.f_local.clone();
        v.extend_from_slice(&self.f_global);
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionFeature {
    pub f_mo: Vec<f64>,
}

/// Unit-norm `f_geo ⊕ f_mo` with the detection confidence kept alongside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionFeature {
    pub vector: Vec<f64>,
    pub confidence: f64,
    pub class_id: usize,
}

/// Which feature branches feed the fusion vector, from `alignment.*` keys.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentConfig {
    pub use_sga: bool,
    pub use_tma: bool,
    pub sampling: ShapeSampling,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            use_sga: true,
            use_tma: true,
            sampling: ShapeSampling::default(),
        }
    }
}

impl KvConfig for AlignmentConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.strip_prefix("alignment.").unwrap_or(key) {
            "use_sga" => self.use_sga = parse_bool(key, value)?,
            "use_tma" => self.use_tma = parse_bool(key, value)?,
            "fps_points" => self.sampling.k = parse_value(key, value)?,
            "crop_margin" => self.sampling.margin = parse_value(key, value)?,
            "min_points" => self.sampling.min_points = parse_value(key, value)?,
            _ => return Err(Error::UnknownKey(key.into())),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            kv("alignment.use_sga", self.use_sga),
            kv("alignment.use_tma", self.use_tma),
            kv("alignment.fps_points", self.sampling.k),
            kv("alignment.crop_margin", self.sampling.margin),
            kv("alignment.min_points", self.sampling.min_points),
        ]
    }
}

/// Shape feature of the points inside `bbox`: crop, FPS, self-normalize,
/// then the shape perceptron with max pooling.
pub fn extract_local(
    state: &DetectorState,
    points: &[Vec3],
    bbox: &Box3D,
    sampling: &ShapeSampling,
) -> Result<Vec<f64>> {
    let cropped = crop_cloud(points.iter().copied(), bbox, sampling.margin);
    let sample = shape_sample_points(&cropped, bbox, sampling)?;
    Ok(shape_features(state, &sample.points))
}

pub fn extract_geo(
    state: &DetectorState,
    points: &[Vec3],
    bbox: &Box3D,
    maps: &FeatureMaps,
    sampling: &ShapeSampling,
) -> Result<GeoFeature> {
    let f_local = extract_local(state, points, bbox, sampling)?;
    let f_global = maps.sample_backbone(bbox.center[0], bbox.center[1])?;
    Ok(GeoFeature { f_local, f_global })
}

pub fn extract_motion(bbox: &Box3D, maps: &FeatureMaps) -> Result<MotionFeature> {
    Ok(MotionFeature {
        f_mo: maps.sample_motion(bbox.center[0], bbox.center[1])?,
    })
}

/// L2-normalizes `f_geo ⊕ f_mo`.
pub fn fuse(
    geo: &GeoFeature,
    mo: &MotionFeature,
    d: f64,
    class_id: usize,
) -> Result<FusionFeature> {
    let mut v = geo.f_geo();
    v.extend_from_slice(&mo.f_mo);
    normalized(v, d, class_id)
}

fn normalized(mut v: Vec<f64>, d: f64, class_id: usize) -> Result<FusionFeature> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(Error::NullFeature);
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(FusionFeature {
        vector: v,
        confidence: d.clamp(0.0, 1.0),
        class_id,
    })
}

/// Fusion with disabled branches zeroed in place, so the vector keeps its
/// dimension across ablations. A box too sparse for a shape sample gets a
/// zero local feature rather than being dropped.
pub fn label_feature(
    state: &DetectorState,
    points: &[Vec3],
    bbox: &Box3D,
    maps: &FeatureMaps,
    cfg: &AlignmentConfig,
    d: f64,
    class_id: usize,
) -> Result<FusionFeature> {
    let so = state.config.shape_out;
    let ch = maps.channels;
    let mut v = Vec::with_capacity(so + 2 * ch);
    if cfg.use_sga {
        match extract_local(state, points, bbox, &cfg.sampling) {
            Ok(f) => v.extend(f),
            Err(Error::EmptyShape | Error::DegenerateShape { .. }) => {
                v.extend(std::iter::repeat_n(0.0, so))
            }
            Err(e) => return Err(e),
        }
        v.extend(maps.sample_backbone(bbox.center[0], bbox.center[1])?);
    } else {
        v.extend(std::iter::repeat_n(0.0, so + ch));
    }
    if cfg.use_tma {
        v.extend(extract_motion(bbox, maps)?.f_mo);
    } else {
        v.extend(std::iter::repeat_n(0.0, ch));
    }
    normalized(v, d, class_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;

    fn tiny() -> DetectorState {
        let mut cfg = DetectorConfig::default();
        cfg.grid = crate::detector::BevGrid::new(8.0, 8);
        DetectorState::new(cfg, 3).unwrap()
    }

    #[test]
    fn fusion_is_unit_and_scale_free() {
        let geo = GeoFeature {
            f_local: vec![1.0, 2.0],
            f_global: vec![0.5, 0.0],
        };
        let mo = MotionFeature {
            f_mo: vec![3.0, -1.0],
        };
        let a = fuse(&geo, &mo, 0.7, 0).unwrap();
        let n: f64 = a.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        let s = |v: &[f64]| v.iter().map(|x| 3.0 * x).collect::<Vec<_>>();
        let geo3 = GeoFeature {
            f_local: s(&geo.f_local),
            f_global: s(&geo.f_global),
        };
        let b = fuse(&geo3, &MotionFeature { f_mo: s(&mo.f_mo) }, 0.7, 0).unwrap();
        for (x, y) in a.vector.iter().zip(&b.vector) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_vector_is_null_feature() {
        let geo = GeoFeature {
            f_local: vec![0.0],
            f_global: vec![0.0],
        };
        let r = fuse(&geo, &MotionFeature { f_mo: vec![0.0] }, 1.0, 0);
        assert!(matches!(r, Err(Error::NullFeature)));
    }

    #[test]
    fn identical_points_give_single_point_response() {
        let st = tiny();
        let b = Box3D::new([1.0, 1.0, 0.0], [2.0, 1.0, 1.0], 0.3);
        let p = b.to_world([0.2, -0.1, 0.1]);
        let f = extract_local(&st, &vec![p; 20], &b, &ShapeSampling::default()).unwrap();
        let single = shape_features(&st, &[b.to_local(p)]);
        for (x, y) in f.iter().zip(&single) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn center_on_node_samples_node() {
        let st = tiny();
        let pts: Vec<[f32; 3]> = vec![[0.3, 0.2, -1.0], [2.5, -1.5, -0.5]];
        let maps = st.encode(&pts, &pts);
        let (x, y) = maps.grid.cell_center(4, 4);
        let b = Box3D::new([x, y, 0.0], [4.5, 1.9, 1.6], 0.0);
        let c = maps.grid.index(4, 4);
        let g = maps.sample_backbone(x, y).unwrap();
        assert_eq!(g, maps.backbone_at(c).to_vec());
        let m = extract_motion(&b, &maps).unwrap();
        assert_eq!(m.f_mo, maps.motion_at(c).to_vec());
        assert!(matches!(
            extract_motion(&Box3D::new([9.0, 0.0, 0.0], [1.0; 3], 0.0), &maps),
            Err(Error::OutOfExtent { .. })
        ));
    }

    #[test]
    fn disabled_branches_are_zeroed() {
        let st = tiny();
        let pts: Vec<[f32; 3]> = vec![[0.3, 0.2, -1.0]];
        let maps = st.encode(&pts, &pts);
        let b = Box3D::new([0.3, 0.2, 0.0], [4.5, 1.9, 1.6], 0.0);
        let cfg = AlignmentConfig {
            use_sga: false,
            ..Default::default()
        };
        let f = label_feature(&st, &[], &b, &maps, &cfg, 1.0, 0).unwrap();
        assert_eq!(f.vector.len(), 96);
        assert!(f.vector[..64].iter().all(|v| *v == 0.0));
    }
}

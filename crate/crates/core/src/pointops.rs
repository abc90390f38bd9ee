//! Non-learned point-set primitives: farthest point sampling, box cropping,
//! self-coordinate normalization and the perception-range strategies.

use std::f64::consts::PI;

use crate::geometry::{dist2, rotate_z, to_f32, to_f64, wrap_angle, Box3D, Vec3};
use crate::sim::{DeviceKind, ObjectLabel, PointFrame};
use crate::{Error, Result};

/// Result of farthest point sampling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FpsSelection {
    pub indices: Vec<usize>,
    /// Set when fewer than `k` distinct points existed and the last index
    /// was repeated to fill the request.
    pub padded: bool,
}

/// Greedy max-min sampling. Each pick maximizes the distance to the nearest
/// already-selected point; ties go to the lowest index.
pub fn farthest_point_sample(points: &[Vec3], k: usize, start: usize) -> Result<FpsSelection> {
    if points.is_empty() {
        return Err(Error::EmptyShape);
    }
    if k == 0 || start >= points.len() {
        return Err(Error::InvalidConfig(format!(
            "fps needs k >= 1 and a valid start (k={k}, start={start}, n={})",
            points.len()
        )));
    }
    let n = points.len();
    let take = k.min(n);
    let mut indices = Vec::with_capacity(k);
    let mut nearest = vec![f64::INFINITY; n];
    let mut chosen = vec![false; n];
    let mut cur = start;
    loop {
        indices.push(cur);
        chosen[cur] = true;
        if indices.len() == take {
            break;
        }
        let c = points[cur];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            let d = dist2(points[i], c);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if !chosen[i] && nearest[i] > best_d {
                best_d = nearest[i];
                best = i;
            }
        }
        cur = best;
    }
    let padded = indices.len() < k;
    while indices.len() < k {
        indices.push(*indices.last().unwrap());
    }
    Ok(FpsSelection { indices, padded })
}

/// Points whose box-frame coordinates lie within `size / 2 + margin`.
pub fn crop_points_in_box(frame: &PointFrame, bbox: &Box3D, margin: f64) -> Vec<Vec3> {
    crop_cloud(frame.points.iter().map(|p| to_f64(*p)), bbox, margin)
}

/// [`crop_points_in_box`] over any point iterator.
pub fn crop_cloud(points: impl IntoIterator<Item = Vec3>, bbox: &Box3D, margin: f64) -> Vec<Vec3> {
    let reach = bbox.footprint_radius() + margin;
    let r2 = reach * reach;
    points
        .into_iter()
        .filter(|p| {
            let dx = p[0] - bbox.center[0];
            let dy = p[1] - bbox.center[1];
            dx * dx + dy * dy <= r2 && bbox.contains(*p, margin)
        })
        .collect()
}

/// `R(-yaw) (p - center)` per point. Metric extent is preserved.
pub fn normalize_to_self(points: &[Vec3], bbox: &Box3D) -> Vec<Vec3> {
    points.iter().map(|p| bbox.to_local(*p)).collect()
}

/// Inverse of [`normalize_to_self`].
pub fn denormalize_from_self(points: &[Vec3], bbox: &Box3D) -> Vec<Vec3> {
    points.iter().map(|q| bbox.to_world(*q)).collect()
}

/// A fixed-size, box-frame shape sample of one object.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSample {
    pub points: Vec<Vec3>,
    pub source_box: Box3D,
    pub source_count: usize,
    pub padded: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeSampling {
    pub k: usize,
    pub margin: f64,
    pub min_points: usize,
}

impl Default for ShapeSampling {
    fn default() -> Self {
        Self {
            k: 16,
            margin: 0.1,
            min_points: 4,
        }
    }
}

/// Crop, sample `k` points by FPS starting from the point nearest the box
/// center, and express them in the box frame.
pub fn shape_sample_points(
    cropped: &[Vec3],
    bbox: &Box3D,
    opts: &ShapeSampling,
) -> Result<ShapeSample> {
    if cropped.is_empty() {
        return Err(Error::EmptyShape);
    }
    if cropped.len() < opts.min_points {
        return Err(Error::DegenerateShape {
            points: cropped.len(),
            required: opts.min_points,
        });
    }
    let start = cropped
        .iter()
        .enumerate()
        .map(|(i, p)| (i, dist2(*p, bbox.center)))
        .fold(
            (0, f64::INFINITY),
            |best, (i, d)| if d < best.1 { (i, d) } else { best },
        )
        .0;
    let sel = farthest_point_sample(cropped, opts.k, start)?;
    let picked: Vec<Vec3> = sel.indices.iter().map(|&i| cropped[i]).collect();
    Ok(ShapeSample {
        points: normalize_to_self(&picked, bbox),
        source_box: *bbox,
        source_count: cropped.len(),
        padded: sel.padded,
    })
}

pub fn shape_sample(frame: &PointFrame, bbox: &Box3D, opts: &ShapeSampling) -> Result<ShapeSample> {
    shape_sample_points(&crop_points_in_box(frame, bbox, opts.margin), bbox, opts)
}

fn translate_labels(labels: &[ObjectLabel], dx: f64) -> Vec<ObjectLabel> {
    labels
        .iter()
        .map(|l| {
            let mut l = l.clone();
            l.bbox.center[0] += dx;
            l
        })
        .collect()
}

/// Translates a frame and its labels so the device's perception interval
/// is centered on the origin. Already-centered frames are returned as is.
pub fn range_normalize(
    frame: &PointFrame,
    labels: &[ObjectLabel],
) -> (PointFrame, Vec<ObjectLabel>) {
    let shift = -frame.device.range_midpoint();
    if shift == 0.0 {
        return (frame.clone(), labels.to_vec());
    }
    let mut out = frame.clone();
    for p in &mut out.points {
        p[0] = (p[0] as f64 + shift) as f32;
    }
    out.device.range_interval = [
        frame.device.range_interval[0] + shift,
        frame.device.range_interval[1] + shift,
    ];
    (out, translate_labels(labels, shift))
}

fn rotate_label(l: &ObjectLabel, angle: f64) -> ObjectLabel {
    let mut o = l.clone();
    o.bbox.center = rotate_z(l.bbox.center, angle);
    o.bbox.yaw = wrap_angle(l.bbox.yaw + angle);
    let v = rotate_z([l.velocity[0], l.velocity[1], 0.0], angle);
    o.velocity = [v[0], v[1]];
    o
}

/// Completes a solid-state fan with its point mirror through the sensor
/// origin. Labels are duplicated and mirrored the same way.
pub fn range_symmetrize(
    frame: &PointFrame,
    labels: &[ObjectLabel],
) -> Result<(PointFrame, Vec<ObjectLabel>)> {
    if frame.device.kind != DeviceKind::SolidState {
        return Err(Error::NotAFan);
    }
    let mut out = frame.clone();
    out.points
        .extend(frame.points.iter().map(|p| [-p[0], -p[1], p[2]]));
    let mut ls = labels.to_vec();
    let next_id = labels.iter().map(|l| l.id + 1).max().unwrap_or(0);
    ls.extend(labels.iter().enumerate().map(|(i, l)| {
        let mut m = rotate_label(l, PI);
        m.id = next_id + i as u32;
        m
    }));
    Ok((out, ls))
}

pub const SPLIT_FAN_DEG: f64 = 60.0;

/// Fan index in `0..6` for an azimuth in degrees (fan k covers
/// `[60k, 60k + 60)` degrees, measured counter-clockwise from +x).
pub fn fan_of_azimuth(az_deg: f64) -> usize {
    let a = az_deg.rem_euclid(360.0);
    ((a / SPLIT_FAN_DEG).floor() as usize).min(5)
}

/// Rotation (radians) that brings fan `k` onto the forward fan `[-30°, 30°)`.
pub fn fan_rotation(k: usize) -> f64 {
    -((k as f64) * SPLIT_FAN_DEG + 0.5 * SPLIT_FAN_DEG).to_radians()
}

/// One fan of a split mechanical frame.
#[derive(Clone, Debug)]
pub struct FanPiece {
    pub fan: usize,
    pub frame: PointFrame,
    pub labels: Vec<ObjectLabel>,
}

/// Cuts a 360° mechanical frame into six 60° fans, each rotated into the
/// forward fan. A label goes to the fan holding its center.
pub fn range_split(frame: &PointFrame, labels: &[ObjectLabel]) -> Result<Vec<FanPiece>> {
    if frame.device.kind != DeviceKind::Mechanical {
        return Err(Error::NotADisc);
    }
    let n_fans = (360.0 / SPLIT_FAN_DEG).ceil() as usize;
    let mut pieces: Vec<FanPiece> = (0..n_fans)
        .map(|k| FanPiece {
            fan: k,
            frame: PointFrame {
                points: Vec::new(),
                ..frame.clone()
            },
            labels: Vec::new(),
        })
        .collect();
    let rot: Vec<(f64, f64)> = (0..n_fans).map(|k| fan_rotation(k).sin_cos()).collect();
    for p in &frame.points {
        let q = to_f64(*p);
        let k = fan_of_azimuth(q[1].atan2(q[0]).to_degrees());
        let (s, c) = rot[k];
        pieces[k]
            .frame
            .points
            .push(to_f32([c * q[0] - s * q[1], s * q[0] + c * q[1], q[2]]));
    }
    for l in labels {
        let k = fan_of_azimuth(l.bbox.center[1].atan2(l.bbox.center[0]).to_degrees());
        pieces[k].labels.push(rotate_label(l, fan_rotation(k)));
    }
    Ok(pieces)
}

/// Reassembles split fans into the original frame (inverse rotations).
pub fn range_unsplit(pieces: &[FanPiece]) -> Vec<Vec3> {
    pieces
        .iter()
        .flat_map(|piece| {
            let a = -fan_rotation(piece.fan);
            piece
                .frame
                .points
                .iter()
                .map(move |p| rotate_z(to_f64(*p), a))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::DeviceModel;

    fn frame_of(points: Vec<[f32; 3]>, device: DeviceModel) -> PointFrame {
        PointFrame {
            points,
            timestamp: 0.0,
            device,
            frame_index: 0,
        }
    }

    fn label_at(center: Vec3, yaw: f64) -> ObjectLabel {
        ObjectLabel {
            id: 0,
            bbox: Box3D::new(center, [4.0, 2.0, 1.5], yaw),
            class_id: 0,
            velocity: [1.0, 2.0],
            confidence: 1.0,
        }
    }

    #[test]
    fn fps_square_picks_opposite_corner() {
        let pts = [
            [0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
        ];
        let s = farthest_point_sample(&pts, 2, 0).unwrap();
        assert_eq!(s.indices, vec![0, 3]);
        assert!(!s.padded);
    }

    #[test]
    fn fps_k1_is_start_and_pads() {
        let pts = [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert_eq!(farthest_point_sample(&pts, 1, 1).unwrap().indices, vec![1]);
        let s = farthest_point_sample(&pts, 4, 0).unwrap();
        assert_eq!(s.indices, vec![0, 1, 1, 1]);
        assert!(s.padded);
        assert!(matches!(
            farthest_point_sample(&[], 2, 0),
            Err(Error::EmptyShape)
        ));
    }

    #[test]
    fn crop_boundaries() {
        let b = Box3D::new([5.0, 0.0, 0.0], [4.0, 2.0, 2.0], 0.0);
        let eps = 1e-3;
        let f = frame_of(
            vec![
                [5.0, 0.0, 0.0],
                [7.0 + 0.1 + eps as f32, 0.0, 0.0],
                [7.05, 0.0, 0.0],
            ],
            DeviceModel::mechanical(),
        );
        let c = crop_points_in_box(&f, &b, 0.1);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0], [5.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_examples() {
        let b = Box3D::new([3.0, 4.0, 0.0], [4.0, 2.0, 1.0], PI / 2.0);
        assert_eq!(normalize_to_self(&[b.center], &b)[0], [0.0, 0.0, 0.0]);
        // front-center of a box facing +y
        let q = normalize_to_self(&[[3.0, 6.0, 0.0]], &b)[0];
        assert!((q[0] - 2.0).abs() < 1e-12 && q[1].abs() < 1e-12);
        let p = [[1.5, -2.0, 0.3]];
        let back = denormalize_from_self(&normalize_to_self(&p, &b), &b);
        assert!(dist2(p[0], back[0]).sqrt() < 1e-9);
    }

    #[test]
    fn range_normalize_shifts_solid_state_only() {
        let f = frame_of(vec![[60.0, 5.0, 0.0]], DeviceModel::solid_state());
        let (g, ls) = range_normalize(&f, &[label_at([60.0, 5.0, 0.0], 0.3)]);
        assert_eq!(g.points[0], [10.0, 5.0, 0.0]);
        assert_eq!(ls[0].bbox.center, [10.0, 5.0, 0.0]);
        assert_eq!(ls[0].bbox.yaw, 0.3);
        assert_eq!(ls[0].velocity, [1.0, 2.0]);
        assert_eq!(g.device.range_interval, [-50.0, 50.0]);
        let m = frame_of(vec![[1.0, 2.0, 3.0]], DeviceModel::mechanical());
        let (h, _) = range_normalize(&m, &[]);
        assert_eq!(h, m);
    }

    #[test]
    fn symmetrize_examples() {
        let f = frame_of(vec![[10.0, 2.0, 0.0]], DeviceModel::solid_state());
        let (g, ls) = range_symmetrize(&f, &[label_at([10.0, 2.0, -1.0], 0.5)]).unwrap();
        assert_eq!(g.points, vec![[10.0, 2.0, 0.0], [-10.0, -2.0, 0.0]]);
        assert_eq!(ls.len(), 2);
        assert_eq!(ls[1].bbox.center[0], -10.0);
        assert!((ls[1].bbox.yaw - wrap_angle(0.5 + PI)).abs() < 1e-12);
        assert!((ls[1].velocity[0] + 1.0).abs() < 1e-12);
        let m = frame_of(vec![], DeviceModel::mechanical());
        assert!(matches!(range_symmetrize(&m, &[]), Err(Error::NotAFan)));
    }

    #[test]
    fn symmetrize_twice_adds_only_duplicates() {
        let f = frame_of(
            vec![[10.0, 2.0, 0.0], [20.0, -3.0, 1.0], [5.5, 0.25, -1.7]],
            DeviceModel::solid_state(),
        );
        let (g, _) = range_symmetrize(&f, &[]).unwrap();
        let (h, _) = range_symmetrize(&g, &[]).unwrap();
        let mut a: Vec<_> = g.points.iter().map(|p| p.map(f32::to_bits)).collect();
        let mut b: Vec<_> = h.points.iter().map(|p| p.map(f32::to_bits)).collect();
        a.sort();
        a.dedup();
        b.sort();
        b.dedup();
        assert_eq!(a, b);
    }

    #[test]
    fn split_assigns_fans() {
        let f = frame_of(vec![[0.0, 10.0, 0.0]], DeviceModel::mechanical());
        let a = 359f64.to_radians();
        let l = label_at([20.0 * a.cos(), 20.0 * a.sin(), 0.0], 0.0);
        let pieces = range_split(&f, &[l]).unwrap();
        assert_eq!(pieces.len(), 6);
        assert_eq!(pieces[1].frame.points.len(), 1);
        let p = pieces[1].frame.points[0];
        assert!((p[0] - 10.0).abs() < 1e-5 && p[1].abs() < 1e-5);
        let total: usize = pieces.iter().map(|p| p.labels.len()).sum();
        assert_eq!(total, 1);
        assert_eq!(pieces[5].labels.len(), 1);
        let s = frame_of(vec![], DeviceModel::solid_state());
        assert!(matches!(range_split(&s, &[]), Err(Error::NotADisc)));
    }
}

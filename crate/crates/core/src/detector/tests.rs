use super::*;
use crate::geometry::Box3D;
use crate::sim::ObjectLabel;

fn tiny_config() -> DetectorConfig {
    DetectorConfig {
        grid: BevGrid::new(8.0, 8),
        ..DetectorConfig::default()
    }
}

fn label(x: f64, y: f64, yaw: f64) -> ObjectLabel {
    ObjectLabel {
        id: 1,
        bbox: Box3D::new([x, y, -0.9], [4.5, 1.9, 1.6], yaw),
        class_id: 0,
        velocity: [1.0, -2.0],
        confidence: 1.0,
    }
}

#[test]
fn grid_mapping_drops_out_of_extent() {
    let g = BevGrid::new(50.0, 128);
    assert_eq!(g.cell_of(-50.0, -50.0), Some((0, 0)));
    assert_eq!(g.cell_of(50.0, 0.0), None);
    assert_eq!(g.cell_of(49.99, 49.99), Some((127, 127)));
    let (x, y) = g.cell_center(3, 7);
    assert_eq!(g.grid_coords(x, y), (3.0, 7.0));
}

#[test]
fn empty_scene_is_bias_response() {
    let st = DetectorState::new(tiny_config(), 1).unwrap();
    let maps = st.encode(&[], &[]);
    assert!(maps.active.is_empty());
    let z = maps.heat[0];
    assert!(maps.heat.iter().all(|v| *v == z));
    assert_eq!(z, st.config.heat_bias_init);
}

#[test]
fn single_point_touches_its_neighborhood_only() {
    let st = DetectorState::new(tiny_config(), 2).unwrap();
    let (x, y) = st.config.grid.cell_center(4, 4);
    let maps = st.encode(&[[x as f32, y as f32, -1.0]], &[]);
    let r = st.config.kernel / 2;
    let side = (4 + r).min(7) - 4usize.saturating_sub(r) + 1;
    assert_eq!(maps.active.len(), side * side);
    for c in 0..st.config.grid.cells() {
        let (ix, iy) = st.config.grid.coords(c);
        let near = ix.abs_diff(4) <= r && iy.abs_diff(4) <= r;
        if !near {
            assert!(maps.backbone_at(c).iter().all(|v| *v == 0.0));
        }
    }
}

#[test]
fn identical_pair_has_no_occupancy_change() {
    let st = DetectorState::new(tiny_config(), 2).unwrap();
    let pts = vec![[0.5f32, 0.5, -1.0], [3.0, -2.0, 0.0]];
    let (_, cache) = st.encode_with_cache(&pts, &pts);
    assert!(cache.feats.chunks(POINT_FEATURES).all(|f| f[4] == 0.0));
}

#[test]
fn target_kernel_values() {
    let g = BevGrid::new(8.0, 8);
    let l = label(0.5, 0.5, 0.0);
    let y = render_target_heatmap(std::slice::from_ref(&l), &g, 1);
    let (ix, iy) = g.cell_of(0.5, 0.5).unwrap();
    assert_eq!(y[g.index(ix, iy)], 1.0);
    let s = 1.7;
    let d = s * (2.0 * 2f64.ln()).sqrt();
    assert!((gaussian_value(d, 0.0, s) - 0.5).abs() < 1e-12);
    assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn decode_recovers_ideal_maps() {
    let st = DetectorState::new(DetectorConfig::default(), 0).unwrap();
    let labels = vec![label(10.3, -4.1, 0.4), label(-20.0, 7.7, -2.0)];
    let mut maps = st.encode(&[], &[]);
    let t = build_targets(&labels, &st.config.grid, 1, true);
    for (i, y) in t.heatmap.iter().enumerate() {
        maps.heat[i] = if *y >= 1.0 { 10.0 } else { 10.0 * y - 5.0 };
    }
    for r in &t.regs {
        maps.boxes[r.cell * BOX_DIM..(r.cell + 1) * BOX_DIM].copy_from_slice(&r.values);
    }
    let dets = decode(&maps, 0.2, 100);
    assert_eq!(dets.len(), 2);
    for l in &labels {
        let d = dets
            .iter()
            .find(|d| (d.center[0] - l.bbox.center[0]).abs() < 1e-9)
            .expect("label recovered");
        assert!((d.center[1] - l.bbox.center[1]).abs() < 1e-9);
        assert!((d.yaw - l.bbox.yaw).abs() < 1e-9);
        assert!((d.size[1] - 4.5).abs() < 1e-9);
    }
}

#[test]
fn decode_keeps_larger_of_adjacent_peaks() {
    let st = DetectorState::new(tiny_config(), 0).unwrap();
    let mut maps = st.encode(&[], &[]);
    maps.heat.fill(-10.0);
    maps.heat[st.config.grid.index(3, 3)] = 2.0;
    maps.heat[st.config.grid.index(4, 3)] = 1.0;
    let dets = decode(&maps, 0.2, 100);
    assert_eq!(dets.len(), 1);
    assert!((dets[0].score - nn::sigmoid(2.0)).abs() < 1e-15);
    assert!(decode(&maps, 1.0, 100).is_empty());
}

#[test]
fn zero_weight_silences_classification() {
    let st = DetectorState::new(tiny_config(), 5).unwrap();
    let pts = vec![[0.5f32, 0.5, -1.0], [1.0, 0.2, -0.5]];
    let (maps, _) = st.encode_with_cache(&pts, &pts);
    let t = build_targets(&[label(0.5, 0.5, 0.3)], &st.config.grid, 1, true);
    let zeros = vec![0.0; maps.heat.len()];
    let (l0, g0) = detection_loss(&maps, &t, Some(&zeros), &LossWeights::default()).unwrap();
    let (l1, g1) = detection_loss(&maps, &t, None, &LossWeights::default()).unwrap();
    assert_eq!(l0.cls, 0.0);
    assert!(g0.heat.iter().all(|v| *v == 0.0));
    assert_eq!(g0.boxes, g1.boxes);
    assert_eq!(l0.reg, l1.reg);
    assert!(l1.cls > 0.0);
    let short = vec![1.0; 3];
    assert!(matches!(
        detection_loss(&maps, &t, Some(&short), &LossWeights::default()),
        Err(crate::Error::ShapeMismatch { .. })
    ));
}

#[test]
fn checkpoint_roundtrip_after_rounding() {
    let mut st = DetectorState::new(tiny_config(), 9).unwrap();
    st.round_to_f32();
    let back = decode_checkpoint(&encode_checkpoint(&st), &st.config).unwrap();
    assert_eq!(back.params, st.params);
    let mut other = tiny_config();
    other.channels = 8;
    assert!(decode_checkpoint(&encode_checkpoint(&st), &other).is_err());
    assert!(decode_checkpoint(b"XXXX", &st.config).is_err());
}

#[test]
fn config_keys_roundtrip() {
    let mut c = DetectorConfig::default();
    c.set("detector.kernel", "5").unwrap();
    c.set("lr", "0.01").unwrap();
    let mut d = DetectorConfig::default();
    d.apply_text(&c.to_text()).unwrap();
    assert_eq!(c, d);
    assert!(matches!(
        c.set("detector.nope", "1"),
        Err(crate::Error::UnknownKey(_))
    ));
}

//! Center-distance average precision, its mean over distance thresholds,
//! and the closed-gap summary.

use serde::{Deserialize, Serialize};

use crate::config::{kv, parse_list, render_list, KvConfig};
use crate::detector::Detection;
use crate::sim::ObjectLabel;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MatchSpec {
    pub thresholds: Vec<f64>,
}

impl Default for MatchSpec {
    fn default() -> Self {
        Self {
            thresholds: vec![0.5, 1.0, 2.0, 4.0],
        }
    }
}

impl MatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::InvalidConfig("no matching thresholds".into()));
        }
        if let Some(t) = self.thresholds.iter().find(|t| **t < 0.0) {
            return Err(Error::NegativeThreshold(*t));
        }
        if self.thresholds.iter().any(|t| !t.is_finite() || *t == 0.0)
            || self.thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::InvalidConfig(
                "thresholds must be positive and strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

impl KvConfig for MatchSpec {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.strip_prefix("eval.").unwrap_or(key) {
            "thresholds" => self.thresholds = parse_list(key, value)?,
            _ => return Err(Error::UnknownKey(key.into())),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![kv("eval.thresholds", render_list(&self.thresholds))]
    }
}

/// Detections and ground truth of one frame.
#[derive(Clone, Debug, Default)]
pub struct FrameResult {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<ObjectLabel>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    /// `None` when there are neither detections nor ground truth.
    pub ap: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Greedy matching over all frames: detections in descending score order
/// (ties by frame, then position) each take the nearest still-unmatched
/// ground-truth box of their class and frame within `threshold` meters.
/// Returns the TP flag of every detection in that order, and the GT count.
pub fn match_detections(
    frames: &[FrameResult],
    class: usize,
    threshold: f64,
) -> Result<(Vec<bool>, usize)> {
    if threshold < 0.0 {
        return Err(Error::NegativeThreshold(threshold));
    }
    let mut order: Vec<(usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(f, fr)| {
            fr.detections
                .iter()
                .enumerate()
                .filter(|(_, d)| d.class_id == class)
                .map(move |(i, _)| (f, i))
        })
        .collect();
    order.sort_by(|a, b| {
        let sa = frames[a.0].detections[a.1].score;
        let sb = frames[b.0].detections[b.1].score;
        sb.total_cmp(&sa).then(a.cmp(b))
    });
    let mut taken: Vec<Vec<bool>> = frames
        .iter()
        .map(|f| vec![false; f.ground_truth.len()])
        .collect();
    let n_gt = frames
        .iter()
        .map(|f| {
            f.ground_truth
                .iter()
                .filter(|g| g.class_id == class)
                .count()
        })
        .sum();
    let t2 = threshold * threshold;
    let flags = order
        .iter()
        .map(|&(f, i)| {
            let d = &frames[f].detections[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in frames[f].ground_truth.iter().enumerate() {
                if g.class_id != class || taken[f][j] {
                    continue;
                }
                let dx = g.bbox.center[0] - d.center[0];
                let dy = g.bbox.center[1] - d.center[1];
                let d2 = dx * dx + dy * dy;
                if d2 <= t2 && best.is_none_or(|(_, b)| d2 < b) {
                    best = Some((j, d2));
                }
            }
            match best {
                Some((j, _)) => {
                    debug_assert!(!taken[f][j]);
                    taken[f][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    Ok((flags, n_gt))
}

/// Area under the precision envelope of a ranked TP/FP sequence.
pub fn ap_from_flags(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return if flags.is_empty() { None } else { Some(0.0) };
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // envelope: precision at each rank becomes the max over later ranks
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in points {
        if r > prev_r {
            ap += (r - prev_r) * p;
            prev_r = r;
        }
    }
    Some(ap)
}

pub fn average_precision(frames: &[FrameResult], class: usize, threshold: f64) -> Result<ApResult> {
    let (flags, n_gt) = match_detections(frames, class, threshold)?;
    let tp = flags.iter().filter(|f| **f).count();
    Ok(ApResult {
        ap: ap_from_flags(&flags, n_gt),
        tp,
        fp: flags.len() - tp,
        fn_: n_gt - tp,
    })
}

/// Mean of the defined values, 0 when none is defined.
pub fn mean_of(aps: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub threshold: f64,
    #[serde(flatten)]
    pub result: ApResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: String,
    pub per_threshold: Vec<ThresholdResult>,
    #[serde(rename = "mAP")]
    pub map: f64,
    /// Percent; `None` renders as "n/a".
    pub closed_gap: Option<f64>,
}

/// AP at each threshold over `classes`, averaged into mAP.
pub fn mean_ap(
    frames: &[FrameResult],
    classes: &[usize],
    spec: &MatchSpec,
    method: &str,
) -> Result<MetricRecord> {
    spec.validate()?;
    let mut per_threshold = Vec::new();
    let mut all = Vec::new();
    for &t in &spec.thresholds {
        let mut merged = ApResult {
            ap: None,
            tp: 0,
            fp: 0,
            fn_: 0,
        };
        let mut aps = Vec::new();
        for &c in classes {
            let r = average_precision(frames, c, t)?;
            merged.tp += r.tp;
            merged.fp += r.fp;
            merged.fn_ += r.fn_;
            aps.push(r.ap);
        }
        if aps.iter().any(|a| a.is_some()) {
            merged.ap = Some(mean_of(&aps));
        }
        all.push(merged.ap);
        per_threshold.push(ThresholdResult {
            threshold: t,
            result: merged,
        });
    }
    Ok(MetricRecord {
        method: method.to_string(),
        per_threshold,
        map: mean_of(&all),
        closed_gap: None,
    })
}

/// `(model − dt) / (oracle − dt)` in percent; `None` when the gap is empty.
pub fn closed_gap(ap_model: f64, ap_dt: f64, ap_oracle: f64) -> Option<f64> {
    let gap = ap_oracle - ap_dt;
    if gap == 0.0 || !gap.is_finite() {
        return None;
    }
    Some(100.0 * (ap_model - ap_dt) / gap)
}

pub fn format_gap(g: Option<f64>) -> String {
    g.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}%"))
}

/// `method,mAP,closed_gap,AP@…` with one row per record.
pub fn metrics_csv(records: &[MetricRecord]) -> String {
    let mut out = String::from("method,mAP,closed_gap");
    if let Some(r) = records.first() {
        for t in &r.per_threshold {
            out.push_str(&format!(",AP@{}", t.threshold));
        }
    }
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{:.6},{}",
            r.method,
            r.map,
            format_gap(r.closed_gap)
        ));
        for t in &r.per_threshold {
            match t.result.ap {
                Some(a) => out.push_str(&format!(",{a:.6}")),
                None => out.push_str(",n/a"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn metrics_json(records: &[MetricRecord]) -> Result<String> {
    Ok(serde_json::to_string_pretty(records)? + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Box3D;

    fn det(x: f64, score: f64) -> Detection {
        Detection {
            center: [x, 0.0],
            size: [1.9, 4.5],
            yaw: 0.0,
            velocity: [0.0; 2],
            class_id: 0,
            score,
        }
    }

    fn gt(x: f64) -> ObjectLabel {
        ObjectLabel {
            id: 0,
            bbox: Box3D::new([x, 0.0, -0.9], [4.5, 1.9, 1.6], 0.0),
            class_id: 0,
            velocity: [0.0; 2],
            confidence: 1.0,
        }
    }

    #[test]
    fn hand_enumerated_curve() {
        let frames = [FrameResult {
            detections: vec![
                det(0.0, 0.9),
                det(50.0, 0.8),
                det(10.0, 0.7),
                det(20.0, 0.6),
            ],
            ground_truth: vec![gt(0.0), gt(10.0), gt(20.0)],
        }];
        let r = average_precision(&frames, 0, 1.0).unwrap();
        assert!((r.ap.unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!((r.tp, r.fp, r.fn_), (3, 1, 0));
    }

    #[test]
    fn empty_cases() {
        let none = [FrameResult::default()];
        assert_eq!(average_precision(&none, 0, 1.0).unwrap().ap, None);
        let fp_only = [FrameResult {
            detections: vec![det(0.0, 0.5)],
            ground_truth: vec![],
        }];
        assert_eq!(average_precision(&fp_only, 0, 1.0).unwrap().ap, Some(0.0));
        let miss = [FrameResult {
            detections: vec![],
            ground_truth: vec![gt(0.0)],
        }];
        assert_eq!(average_precision(&miss, 0, 1.0).unwrap().ap, Some(0.0));
        assert!(matches!(
            average_precision(&miss, 0, -1.0),
            Err(Error::NegativeThreshold(_))
        ));
    }

    #[test]
    fn gap_examples() {
        assert!((closed_gap(0.705, 0.363, 0.807).unwrap() - 77.027).abs() < 0.01);
        assert_eq!(closed_gap(0.4, 0.4, 0.8), Some(0.0));
        assert_eq!(closed_gap(0.8, 0.4, 0.8), Some(100.0));
        assert_eq!(format_gap(closed_gap(0.5, 0.4, 0.4)), "n/a");
        assert_eq!(mean_of(&[Some(0.2), Some(0.4), Some(0.6), Some(0.8)]), 0.5);
    }
}

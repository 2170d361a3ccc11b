//! Average precision with IoU-gated greedy matching, and run-versus-run ablation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::FrameKey;
use crate::geometry::{iou, BBox};

pub const DEFAULT_IOU_GATE: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("average precision is undefined without positives")]
    UndefinedMetric,
    #[error("runs cover different frames; missing from {run}: {missing}")]
    FrameMismatch { run: String, missing: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// A scored box. With `person_id` set it answers for that subject only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video: String,
    pub frame: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub person_id: Option<u32>,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub video: String,
    pub frame: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub person_id: Option<u32>,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

type Key<'a> = (&'a str, u32, Option<u32>);

/// Indices of `dets` by descending score; equal scores keep input order.
pub fn ranking(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// TP flags in [`ranking`] order. A detection is a true positive when it
/// reaches `gate` IoU with a still-unmatched ground truth of the same key; it
/// claims the best such ground truth (lowest index on ties).
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], gate: f64) -> Vec<bool> {
    let mut by_key: BTreeMap<Key, Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_key.entry((g.video.as_str(), g.frame, g.person_id)).or_default().push(i);
    }
    let mut used = vec![false; gts.len()];
    ranking(dets)
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let Some(cands) = by_key.get(&(d.video.as_str(), d.frame, d.person_id)) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for &g in cands {
                if used[g] {
                    continue;
                }
                let v = iou(&d.bbox, &gts[g].bbox);
                if v >= gate && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    used[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub ap: f64,
    /// `(recall, precision)` after each ranked detection.
    pub pr: Vec<(f64, f64)>,
    pub m: usize,
}

impl PrCurve {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("curve serializes")
    }
}

/// Interpolated precision at each recall level `k / m`, `k = 1..=m`.
pub fn interpolated_precisions(flags: &[bool], m: usize) -> Vec<f64> {
    let mut best = vec![0.0f64; m + 1];
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        let p = tp as f64 / (i + 1) as f64;
        let level = tp.min(m);
        best[level] = best[level].max(p);
    }
    for k in (0..m).rev() {
        best[k] = best[k].max(best[k + 1]);
    }
    best[1..].to_vec()
}

pub fn average_precision(flags: &[bool], m: usize) -> Result<PrCurve, EvalError> {
    if m == 0 {
        return Err(EvalError::UndefinedMetric);
    }
    let mut tp = 0usize;
    let pr = flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            tp += f as usize;
            (tp as f64 / m as f64, tp as f64 / (i + 1) as f64)
        })
        .collect();
    let ap = interpolated_precisions(flags, m).iter().sum::<f64>() / m as f64;
    Ok(PrCurve { ap, pr, m })
}

/// Matching followed by [`average_precision`] with `m = gts.len()`.
pub fn evaluate(dets: &[Detection], gts: &[GroundTruth], gate: f64) -> Result<PrCurve, EvalError> {
    average_precision(&match_detections(dets, gts, gate), gts.len())
}

/// Detections of one run and the frames it processed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalRun {
    pub name: String,
    pub frames: Vec<FrameKey>,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub run_a: String,
    pub run_b: String,
    pub ap_a: f64,
    pub ap_b: f64,
    /// `ap_a - ap_b`.
    pub delta: f64,
    pub m: usize,
}

impl AblationReport {
    pub fn to_text(&self) -> String {
        format!(
            "run        AP\n{:<10} {:.4}\n{:<10} {:.4}\ndelta      {:+.4}\npositives  {}\n",
            self.run_a, self.ap_a, self.run_b, self.ap_b, self.delta, self.m
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn missing(from: &BTreeSet<&FrameKey>, other: &BTreeSet<&FrameKey>) -> Vec<String> {
    other.difference(from).map(|k| format!("{}#{}", k.video, k.frame)).collect()
}

pub fn ablation_report(a: &EvalRun, b: &EvalRun, gts: &[GroundTruth], gate: f64) -> Result<AblationReport, EvalError> {
    let fa: BTreeSet<&FrameKey> = a.frames.iter().collect();
    let fb: BTreeSet<&FrameKey> = b.frames.iter().collect();
    for (run, from, other) in [(&a.name, &fa, &fb), (&b.name, &fb, &fa)] {
        let m = missing(from, other);
        if !m.is_empty() {
            return Err(EvalError::FrameMismatch { run: run.clone(), missing: m.join(", ") });
        }
    }
    let ap_a = evaluate(&a.detections, gts, gate)?.ap;
    let ap_b = evaluate(&b.detections, gts, gate)?.ap;
    Ok(AblationReport { run_a: a.name.clone(), run_b: b.name.clone(), ap_a, ap_b, delta: ap_a - ap_b, m: gts.len() })
}

pub fn write_detections(dets: &[Detection]) -> String {
    dets.iter().map(|d| serde_json::to_string(d).expect("detections serialize") + "\n").collect()
}

pub fn read_detections(text: &str) -> Result<Vec<Detection>, EvalError> {
    read_lines(text)
}

pub fn read_ground_truth(text: &str) -> Result<Vec<GroundTruth>, EvalError> {
    read_lines(text)
}

fn read_lines<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| EvalError::Parse { line: i + 1, message: e.to_string() }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(frame: u32, b: BBox, score: f64) -> Detection {
        Detection { video: "v".into(), frame, person_id: None, bbox: b, score }
    }

    fn gt(frame: u32, b: BBox) -> GroundTruth {
        GroundTruth { video: "v".into(), frame, person_id: None, bbox: b }
    }

    #[test]
    fn exact_ap_values() {
        assert_eq!(average_precision(&[true, true], 2).unwrap().ap, 1.0);
        let c = average_precision(&[true, false, true], 2).unwrap();
        assert!((c.ap - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(interpolated_precisions(&[true, false, true], 2), vec![1.0, 2.0 / 3.0]);
        assert_eq!(average_precision(&[false, false], 2).unwrap().ap, 0.0);
        assert!(matches!(average_precision(&[true], 0), Err(EvalError::UndefinedMetric)));
        assert_eq!(average_precision(&[], 3).unwrap().ap, 0.0);
    }

    #[test]
    fn single_match_and_wrong_frame() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let shifted = BBox::new(1.0, 0.0, 10.0, 10.0);
        assert_eq!(match_detections(&[det(0, b, 0.9), det(0, shifted, 0.8)], &[gt(0, b)], 0.5), vec![true, false]);
        assert_eq!(match_detections(&[det(1, b, 0.9)], &[gt(0, b)], 0.5), vec![false]);
        let mut d = det(0, b, 0.5);
        d.person_id = Some(2);
        assert_eq!(match_detections(&[d], &[gt(0, b)], 0.5), vec![false]);
    }

    #[test]
    fn ablation_of_identical_and_improved_runs() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let gts = vec![gt(0, b), gt(1, BBox::new(20.0, 20.0, 5.0, 5.0))];
        let frames = vec![FrameKey::new("v", 0), FrameKey::new("v", 1)];
        let a = EvalRun { name: "a".into(), frames: frames.clone(), detections: vec![det(0, b, 0.3), det(1, b, 0.9)] };
        let r = ablation_report(&a, &a, &gts, 0.5).unwrap();
        assert_eq!(r.delta, 0.0);
        let mut better = a.clone();
        better.detections.extend(gts.iter().map(|g| det(g.frame, g.bbox, 2.0)));
        let r = ablation_report(&better, &a, &gts, 0.5).unwrap();
        assert!(r.ap_a >= r.ap_b && r.delta >= 0.0);
        assert!(r.to_text().contains("delta"));
        let short = EvalRun { frames: frames[..1].to_vec(), ..a.clone() };
        match ablation_report(&a, &short, &gts, 0.5) {
            Err(EvalError::FrameMismatch { missing, .. }) => assert_eq!(missing, "v#1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn json_shapes() {
        let c = average_precision(&[true], 1).unwrap();
        let v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(v["m"], 1);
        assert_eq!(v["pr"][0], serde_json::json!([1.0, 1.0]));
        let d = vec![det(3, BBox::new(1.0, 2.0, 3.0, 4.0), 0.5)];
        let text = write_detections(&d);
        assert_eq!(text, "{\"video\":\"v\",\"frame\":3,\"box\":[1.0,2.0,3.0,4.0],\"score\":0.5}\n");
        assert_eq!(read_detections(&text).unwrap(), d);
    }
}

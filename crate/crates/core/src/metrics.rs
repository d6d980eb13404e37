//! Success, precision and normalised precision.
//!
//! * PR: fraction of frames whose centre error is at most `pr_threshold`
//!   pixels.
//! * NPR: fraction of frames whose centre error divided by the ground-truth
//!   diagonal is at most `npr_threshold`.
//! * SR: mean over the 21 overlap thresholds `0, 0.05, …, 1` of the fraction
//!   of frames with IoU at least that threshold.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::PixelBox;

pub const SUCCESS_THRESHOLDS: usize = 21;

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceMetrics {
    pub name: String,
    pub sr: f64,
    pub pr: f64,
    pub npr: f64,
    pub mean_iou: f64,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub sequences: Vec<SequenceMetrics>,
    /// Means over sequences.
    pub overall: SequenceMetrics,
}

pub fn center_error(a: &PixelBox, b: &PixelBox) -> f64 {
    let ((ax, ay), (bx, by)) = (a.center(), b.center());
    (ax - bx).hypot(ay - by)
}

/// Fraction of frames with IoU ≥ `k·0.05` for each `k` in `0..=20`.
pub fn success_curve(ious: &[f64]) -> [f64; SUCCESS_THRESHOLDS] {
    let n = ious.len().max(1) as f64;
    std::array::from_fn(|k| {
        let t = k as f64 / (SUCCESS_THRESHOLDS - 1) as f64;
        ious.iter().filter(|&&v| v >= t).count() as f64 / n
    })
}

pub fn evaluate_sequence(
    name: &str,
    pred: &[PixelBox],
    gt: &[PixelBox],
    pr_threshold: f64,
    npr_threshold: f64,
) -> Result<SequenceMetrics> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::Data(format!(
            "{name}: {} predicted boxes for {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    let n = gt.len() as f64;
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect();
    let sr = success_curve(&ious).iter().sum::<f64>() / SUCCESS_THRESHOLDS as f64;
    let pr = pred.iter().zip(gt).filter(|(p, g)| center_error(p, g) <= pr_threshold).count() as f64 / n;
    let npr = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| center_error(p, g) / g.w.hypot(g.h) <= npr_threshold)
        .count() as f64
        / n;
    Ok(SequenceMetrics {
        name: name.to_string(),
        sr,
        pr,
        npr,
        mean_iou: ious.iter().sum::<f64>() / n,
        frames: gt.len(),
    })
}

impl MetricsReport {
    pub fn new(sequences: Vec<SequenceMetrics>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Data("no sequences to report".into()));
        }
        let k = sequences.len() as f64;
        let mean = |f: fn(&SequenceMetrics) -> f64| sequences.iter().map(f).sum::<f64>() / k;
        let overall = SequenceMetrics {
            name: "overall".into(),
            sr: mean(|m| m.sr),
            pr: mean(|m| m.pr),
            npr: mean(|m| m.npr),
            mean_iou: mean(|m| m.mean_iou),
            frames: sequences.iter().map(|m| m.frames).sum(),
        };
        Ok(MetricsReport { sequences, overall })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sequence,SR,PR,NPR\n");
        for m in self.sequences.iter().chain([&self.overall]) {
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", m.name, m.sr, m.pr, m.npr);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let width = self
            .sequences
            .iter()
            .map(|m| m.name.len())
            .max()
            .unwrap_or(0)
            .max("sequence".len());
        let mut s = format!("{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}\n", "sequence", "SR", "PR", "NPR", "mIoU");
        for m in self.sequences.iter().chain([&self.overall]) {
            let _ = writeln!(
                s,
                "{:<width$}  {:>6.3}  {:>6.3}  {:>6.3}  {:>6.3}",
                m.name, m.sr, m.pr, m.npr, m.mean_iou
            );
        }
        s
    }
}

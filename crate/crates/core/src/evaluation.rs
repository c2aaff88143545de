//! Confusion counts, change-detection metrics and the significant-pair protocol.

use std::fmt::Write as _;
use std::ops::Add;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::SceneTimeSeries;
use crate::error::{Error, Result};
use crate::training::ChangeMapSeries;

/// Pixel counts with "changed" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self::new(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_, self.tn + o.tn)
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Counts over pixels not flagged in `ignore`. Any non-zero value is "changed".
pub fn confusion(pred: &Array2<u8>, truth: &Array2<u8>, ignore: Option<&Array2<bool>>) -> Result<ConfusionCounts> {
    if pred.dim() != truth.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs truth {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    if let Some(m) = ignore {
        if m.dim() != pred.dim() {
            return Err(Error::ShapeMismatch(format!("ignore mask {:?}", m.dim())));
        }
    }
    let mut c = ConfusionCounts::default();
    for ((idx, &p), &t) in pred.indexed_iter().zip(truth.iter()) {
        if ignore.is_some_and(|m| m[idx]) {
            continue;
        }
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    if c.total() == 0 {
        return Err(Error::NoEligiblePixels("every pixel is ignored".into()));
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub overall_accuracy: f64,
    pub f1: f64,
    pub kappa: f64,
    pub counts: ConfusionCounts,
    pub scene_id: Option<String>,
    pub pair_index: Option<usize>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Precision, recall, OA, F1 and Cohen's kappa. Zero denominators give 0.
pub fn metrics(counts: &ConfusionCounts) -> Result<MetricsReport> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::EmptyInput("confusion counts are all zero".into()));
    }
    let (tp, fp, fn_, tn) = (counts.tp as f64, counts.fp as f64, counts.fn_ as f64, counts.tn as f64);
    let n = total as f64;
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let overall_accuracy = (tp + tn) / n;
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    let p_e = ((tp + fp) * (tp + fn_) + (fn_ + tn) * (fp + tn)) / (n * n);
    let kappa = if p_e == 1.0 {
        0.0
    } else {
        (overall_accuracy - p_e) / (1.0 - p_e)
    };
    Ok(MetricsReport {
        precision,
        recall,
        overall_accuracy,
        f1,
        kappa,
        counts: *counts,
        scene_id: None,
        pair_index: None,
    })
}

/// Counts of the predicted map at the scene's significant pair.
pub fn significant_pair_counts(series: &ChangeMapSeries, scene: &SceneTimeSeries) -> Result<ConfusionCounts> {
    let gt = scene
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::MissingGroundTruth(scene.scene_id.clone()))?;
    let t = gt.significant_pair_index;
    let truth = gt
        .significant_map()
        .ok_or_else(|| Error::MissingGroundTruth(format!("{} pair {t}", scene.scene_id)))?;
    let pred = series.maps.get(t - 1).ok_or_else(|| {
        Error::ShapeMismatch(format!("series has {} maps, significant pair is {t}", series.maps.len()))
    })?;
    confusion(pred, truth, None)
}

pub fn evaluate_significant_pair(series: &ChangeMapSeries, scene: &SceneTimeSeries) -> Result<MetricsReport> {
    let counts = significant_pair_counts(series, scene)?;
    let mut report = metrics(&counts)?;
    report.scene_id = Some(scene.scene_id.clone());
    report.pair_index = scene.ground_truth.as_ref().map(|g| g.significant_pair_index);
    Ok(report)
}

/// Micro-average: metrics of the summed counts.
pub fn pooled(reports: &[MetricsReport]) -> Result<MetricsReport> {
    metrics(&reports.iter().map(|r| r.counts).sum())
}

/// Per-scene rows plus the pooled row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub scenes: Vec<MetricsReport>,
    pub pooled: MetricsReport,
}

impl EvaluationSummary {
    pub fn new(scenes: Vec<MetricsReport>) -> Result<Self> {
        let pooled = pooled(&scenes)?;
        Ok(Self { scenes, pooled })
    }

    /// Aligned columns: Pre %, Rec %, OA %, F1, Kap.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:>5} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "scene", "pair", "Pre(%)", "Rec(%)", "OA(%)", "F1", "Kap"
        );
        let row = |s: &mut String, name: &str, pair: String, r: &MetricsReport| {
            let _ = writeln!(
                s,
                "{:<20} {:>5} {:>7.2} {:>7.2} {:>7.2} {:>7.3} {:>7.3}",
                name,
                pair,
                100.0 * r.precision,
                100.0 * r.recall,
                100.0 * r.overall_accuracy,
                r.f1,
                r.kappa
            );
        };
        for r in &self.scenes {
            let pair = r.pair_index.map(|p| p.to_string()).unwrap_or_default();
            row(&mut s, r.scene_id.as_deref().unwrap_or("-"), pair, r);
        }
        row(&mut s, "pooled", String::new(), &self.pooled);
        s
    }
}

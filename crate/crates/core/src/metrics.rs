//! oIoU, mIoU, Pr@X and per-category aggregation.
//!
//! Aggregation is a sum over per-sample [`IouCounts`], so partial
//! [`MetricsAccumulator`]s built on separate shards can be merged.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::SegmentationMask;

pub const THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
}

impl IouCounts {
    pub fn between(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<Self> {
        if pred.shape() != gt.shape() {
            return Err(Error::ShapeMismatch {
                expected: vec![gt.height, gt.width],
                actual: vec![pred.height, pred.width],
            });
        }
        let (mut i, mut u) = (0u64, 0u64);
        for (&p, &g) in pred.pixels.iter().zip(&gt.pixels) {
            i += (p && g) as u64;
            u += (p || g) as u64;
        }
        Ok(Self {
            intersection: i,
            union: u,
        })
    }

    /// Empty-vs-empty counts as a perfect match.
    pub fn ratio(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

pub fn iou(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<f64> {
    Ok(IouCounts::between(pred, gt)?.ratio())
}

/// How Pr@X compares a sample's IoU to the threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// IoU > X
    #[default]
    Strict,
    /// IoU >= X
    Inclusive,
}

impl ThresholdRule {
    fn passes(self, iou: f64, x: f64) -> bool {
        match self {
            ThresholdRule::Strict => iou > x,
            ThresholdRule::Inclusive => iou >= x,
        }
    }
}

/// Aggregated results, all values in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub pr_at: BTreeMap<String, f64>,
    #[serde(rename = "oIoU")]
    pub oiou: f64,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_category: BTreeMap<String, f64>,
}

pub fn threshold_key(x: f64) -> String {
    format!("{x:.1}")
}

impl MetricsReport {
    pub fn pr(&self, x: f64) -> f64 {
        self.pr_at.get(&threshold_key(x)).copied().unwrap_or(f64::NAN)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Fixed-width table: Pr@0.5 .. Pr@0.9, oIoU, mIoU, then the optional
    /// per-category section.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let mut header = String::new();
        let mut row = String::new();
        for x in THRESHOLDS {
            let _ = write!(header, "{:>9}", format!("Pr@{x:.1}"));
            let _ = write!(row, "{:>9.2}", self.pr(x));
        }
        let _ = write!(header, "{:>9}{:>9}", "oIoU", "mIoU");
        let _ = write!(row, "{:>9.2}{:>9.2}", self.oiou, self.miou);
        let _ = writeln!(out, "{header}");
        let _ = writeln!(out, "{row}");
        let _ = writeln!(out, "samples: {}", self.n_samples);
        if !self.per_category.is_empty() {
            let width = self.per_category.keys().map(String::len).max().unwrap_or(8).max(8);
            let _ = writeln!(out);
            let _ = writeln!(out, "{:<width$}  {:>7}", "category", "mIoU");
            for (cat, v) in &self.per_category {
                let _ = writeln!(out, "{cat:<width$}  {v:>7.2}");
            }
        }
        out
    }
}

/// Running sums for [`MetricsReport`]; `merge` is associative.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsAccumulator {
    pub rule: ThresholdRule,
    total: IouCounts,
    iou_sum: f64,
    n: usize,
    passed: [usize; 5],
    per_category: BTreeMap<String, (f64, usize)>,
}

impl MetricsAccumulator {
    pub fn new(rule: ThresholdRule) -> Self {
        Self {
            rule,
            ..Default::default()
        }
    }

    pub fn add_counts(&mut self, counts: IouCounts, category: Option<&str>) {
        let r = counts.ratio();
        self.total.intersection += counts.intersection;
        self.total.union += counts.union;
        self.iou_sum += r;
        self.n += 1;
        for (slot, x) in self.passed.iter_mut().zip(THRESHOLDS) {
            *slot += self.rule.passes(r, x) as usize;
        }
        if let Some(c) = category {
            let e = self.per_category.entry(c.to_string()).or_insert((0.0, 0));
            e.0 += r;
            e.1 += 1;
        }
    }

    pub fn add(&mut self, pred: &SegmentationMask, gt: &SegmentationMask, category: Option<&str>) -> Result<()> {
        self.add_counts(IouCounts::between(pred, gt)?, category);
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        self.total.intersection += other.total.intersection;
        self.total.union += other.total.union;
        self.iou_sum += other.iou_sum;
        self.n += other.n;
        for (a, b) in self.passed.iter_mut().zip(other.passed) {
            *a += b;
        }
        for (k, (s, n)) in &other.per_category {
            let e = self.per_category.entry(k.clone()).or_insert((0.0, 0));
            e.0 += s;
            e.1 += n;
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn report(&self) -> Result<MetricsReport> {
        if self.n == 0 {
            return Err(Error::EmptyEvaluation);
        }
        let n = self.n as f64;
        let oiou = if self.total.union == 0 {
            100.0
        } else {
            100.0 * self.total.intersection as f64 / self.total.union as f64
        };
        Ok(MetricsReport {
            n_samples: self.n,
            pr_at: THRESHOLDS
                .iter()
                .zip(self.passed)
                .map(|(&x, p)| (threshold_key(x), 100.0 * p as f64 / n))
                .collect(),
            oiou,
            miou: 100.0 * self.iou_sum / n,
            per_category: self
                .per_category
                .iter()
                .map(|(k, (s, c))| (k.clone(), 100.0 * s / *c as f64))
                .collect(),
        })
    }
}

/// One evaluation sample.
pub struct Sample<'a> {
    pub pred: &'a SegmentationMask,
    pub gt: &'a SegmentationMask,
    pub category: Option<&'a str>,
}

pub fn aggregate<'a>(samples: impl IntoIterator<Item = Sample<'a>>) -> Result<MetricsReport> {
    aggregate_with(samples, ThresholdRule::Strict)
}

pub fn aggregate_with<'a>(
    samples: impl IntoIterator<Item = Sample<'a>>,
    rule: ThresholdRule,
) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new(rule);
    for s in samples {
        acc.add(s.pred, s.gt, s.category)?;
    }
    acc.report()
}

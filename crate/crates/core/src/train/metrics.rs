use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::features::Subpopulation;

/// Confusion counts and the scores derived from them. Positive class is 1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// Set when no example was predicted positive, so precision is reported as 0.
    pub precision_undefined: bool,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Metrics {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Metrics {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
            precision_undefined: tp + fp == 0,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn add(&mut self, label: u8, pred: u8) {
        match (label, pred) {
            (1, 1) => self.tp += 1,
            (0, 1) => self.fp += 1,
            (1, 0) => self.fn_ += 1,
            _ => self.tn += 1,
        }
    }

    fn finish(&self) -> Metrics {
        Metrics::from_counts(self.tp, self.fp, self.fn_, self.tn)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: Metrics,
    /// Keyed by subpopulation name; only subpopulations that occur appear.
    pub by_subpop: BTreeMap<String, Metrics>,
}

impl MetricsReport {
    /// Builds a report from `(label, prediction, subpopulation)` triples.
    pub fn from_predictions<I>(items: I) -> MetricsReport
    where
        I: IntoIterator<Item = (u8, u8, Subpopulation)>,
    {
        let mut overall = Metrics::default();
        let mut by: BTreeMap<String, Metrics> = BTreeMap::new();
        for (label, pred, subpop) in items {
            overall.add(label, pred);
            by.entry(subpop.as_str().to_string()).or_default().add(label, pred);
        }
        MetricsReport {
            overall: overall.finish(),
            by_subpop: by.into_iter().map(|(k, m)| (k, m.finish())).collect(),
        }
    }

    pub fn subpop(&self, s: Subpopulation) -> Option<&Metrics> {
        self.by_subpop.get(s.as_str())
    }

    /// Fixed-width text table with one row per slice.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<16} {:>6} {:>6} {:>6} {:>6} {:>10} {:>10} {:>10} {:>10}\n",
            "slice", "tp", "fp", "fn", "tn", "precision", "recall", "f1", "accuracy"
        );
        let rows = std::iter::once(("overall", &self.overall))
            .chain(self.by_subpop.iter().map(|(k, m)| (k.as_str(), m)));
        for (name, m) in rows {
            out.push_str(&format!(
                "{:<16} {:>6} {:>6} {:>6} {:>6} {:>10.6} {:>10.6} {:>10.6} {:>10.6}\n",
                name, m.tp, m.fp, m.fn_, m.tn, m.precision, m.recall, m.f1, m.accuracy
            ));
        }
        out
    }
}

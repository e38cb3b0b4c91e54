//! Positive-class precision/recall/F1 and per-class macro F1.
//!
//! Every empty denominator yields 0.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{CATEGORIES, NUM_CATEGORIES};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn from_binary(preds: &[u8], golds: &[u8]) -> Result<Self> {
        if preds.len() != golds.len() {
            return Err(Error::Contract(format!(
                "{} predictions for {} gold labels",
                preds.len(),
                golds.len()
            )));
        }
        let mut c = ConfusionCounts::default();
        for (&p, &g) in preds.iter().zip(golds) {
            match (p == 1, g == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1_from(self.precision(), self.recall())
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean `2PR/(P+R)`, 0 when both are 0.
pub fn f1_from(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
}

pub fn prf1_positive(preds: &[u8], golds: &[u8]) -> Result<BinaryScores> {
    if preds.is_empty() {
        return Err(Error::Contract("no predictions to score".into()));
    }
    let counts = ConfusionCounts::from_binary(preds, golds)?;
    Ok(BinaryScores {
        precision: counts.precision(),
        recall: counts.recall(),
        f1: counts.f1(),
        counts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiLabelScores {
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
    pub counts: Vec<ConfusionCounts>,
}

/// One-vs-rest F1 per category and their unweighted mean.
pub fn macro_f1(preds: &[Vec<u8>], golds: &[Vec<u8>]) -> Result<MultiLabelScores> {
    if preds.len() != golds.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} gold vectors",
            preds.len(),
            golds.len()
        )));
    }
    if let Some(v) = preds.iter().chain(golds).find(|v| v.len() != NUM_CATEGORIES) {
        return Err(Error::Contract(format!(
            "label vector of length {}, expected {NUM_CATEGORIES}",
            v.len()
        )));
    }
    let counts: Vec<ConfusionCounts> = (0..NUM_CATEGORIES)
        .map(|c| {
            let p: Vec<u8> = preds.iter().map(|v| v[c]).collect();
            let g: Vec<u8> = golds.iter().map(|v| v[c]).collect();
            ConfusionCounts::from_binary(&p, &g)
        })
        .collect::<Result<_>>()?;
    let per_class_f1: Vec<f64> = counts.iter().map(ConfusionCounts::f1).collect();
    Ok(MultiLabelScores {
        macro_f1: mean(&per_class_f1),
        per_class_f1,
        counts,
    })
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

impl BinaryScores {
    /// `key: value` lines.
    pub fn report(&self) -> String {
        let c = &self.counts;
        format!(
            "precision: {:.6}\nrecall: {:.6}\nf1: {:.6}\ntp: {}\nfp: {}\nfn: {}\ntn: {}\n",
            self.precision, self.recall, self.f1, c.tp, c.fp, c.fn_, c.tn
        )
    }

    pub fn tsv_header() -> &'static str {
        "precision\trecall\tf1\ttp\tfp\tfn\ttn"
    }

    pub fn tsv_row(&self) -> String {
        let c = &self.counts;
        format!(
            "{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{}",
            self.precision, self.recall, self.f1, c.tp, c.fp, c.fn_, c.tn
        )
    }
}

impl MultiLabelScores {
    pub fn report(&self) -> String {
        let mut s = String::new();
        for ((abbr, _), f) in CATEGORIES.iter().zip(&self.per_class_f1) {
            let _ = writeln!(s, "f1_{}: {f:.6}", abbr.trim_end_matches('.'));
        }
        let _ = writeln!(s, "macro_f1: {:.6}", self.macro_f1);
        s
    }

    pub fn tsv_header() -> String {
        let mut cols: Vec<String> = CATEGORIES
            .iter()
            .map(|(a, _)| format!("f1_{}", a.trim_end_matches('.')))
            .collect();
        cols.push("macro_f1".into());
        cols.join("\t")
    }

    pub fn tsv_row(&self) -> String {
        self.per_class_f1
            .iter()
            .chain(std::iter::once(&self.macro_f1))
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join("\t")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_row_f1() {
        assert!((f1_from(0.6431, 0.6309) - 0.63694).abs() < 5e-6);
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let g = [1, 0, 1, 0];
        let s = prf1_positive(&g, &g).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let s = prf1_positive(&[0, 0, 0, 0], &g).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        assert_eq!(s.counts.total(), 4);
        assert!(prf1_positive(&[1], &[1, 0]).is_err());
        assert!(prf1_positive(&[], &[]).is_err());
    }

    #[test]
    fn hand_counted_confusion() {
        let s = prf1_positive(&[1, 1, 0, 0, 1], &[1, 0, 1, 0, 1]).unwrap();
        assert_eq!(
            s.counts,
            ConfusionCounts {
                tp: 2,
                fp: 1,
                fn_: 1,
                tn: 1
            }
        );
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn macro_is_mean_and_absent_class_is_zero() {
        let g = vec![vec![1, 0, 0, 0, 0, 0, 1], vec![0, 1, 1, 1, 1, 1, 0]];
        let s = macro_f1(&g, &g).unwrap();
        assert_eq!(s.macro_f1, 1.0);
        let g2 = vec![vec![1, 0, 0, 0, 0, 0, 0]];
        let s = macro_f1(&g2, &g2).unwrap();
        assert_eq!(s.per_class_f1[0], 1.0);
        assert!((s.macro_f1 - 1.0 / 7.0).abs() < 1e-15);
        assert!(macro_f1(&[vec![1, 0]], &[vec![1, 0]]).is_err());
    }

    #[test]
    fn reports_have_one_key_per_metric() {
        let s = prf1_positive(&[1, 0], &[1, 1]).unwrap();
        assert!(s.report().contains("recall: 0.500000"));
        assert_eq!(s.tsv_row().split('\t').count(), BinaryScores::tsv_header().split('\t').count());
        let m = macro_f1(&[vec![1; 7]], &[vec![1; 7]]).unwrap();
        assert!(m.report().contains("f1_merr: 1.000000"));
        assert_eq!(m.tsv_row().split('\t').count(), 8);
    }

    #[test]
    fn spread() {
        assert!((std_dev(&[1.0, 3.0]) - 1.0).abs() < 1e-15);
        assert_eq!(mean(&[]), 0.0);
    }
}

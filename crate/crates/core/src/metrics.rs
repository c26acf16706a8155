//! Detection quality: confusion counts, precision/recall/F1, ROC-AUC and
//! step-wise average precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    /// Counts from `(predicted anomalous, actually anomalous)` pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = ConfusionCounts::default();
        for (pred, truth) in pairs {
            match (pred, truth) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// Counts for the rule `score > threshold`.
    pub fn at_threshold(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        assert_eq!(scores.len(), labels.len(), "one label per score");
        Self::from_pairs(scores.iter().zip(labels).map(|(&s, &y)| (s > threshold, y)))
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// A ratio whose denominator was zero and which was therefore set to 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degenerate {
    Precision,
    Recall,
    F1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: Vec<Degenerate>,
}

pub fn prf1(c: &ConfusionCounts) -> Prf1 {
    let mut degenerate = Vec::new();
    let mut ratio = |num: u64, den: u64, which| {
        if den == 0 {
            degenerate.push(which);
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(c.tp, c.tp + c.fp, Degenerate::Precision);
    let recall = ratio(c.tp, c.tp + c.fn_, Degenerate::Recall);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate.push(Degenerate::F1);
        0.0
    };
    Prf1 {
        precision,
        recall,
        f1,
        degenerate,
    }
}

fn check_ranked_input(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("anomaly scores".into()));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidInput(
            "ranking metrics need at least one positive and one negative label".into(),
        ));
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score, split into runs of equal scores.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// ROC-AUC as the probability that a random positive outscores a random
/// negative, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_ranked_input(scores, labels)?;
    let mut negatives_below = neg as f64;
    let mut wins = 0.0;
    for g in tie_groups(scores) {
        let p = g.iter().filter(|&&i| labels[i]).count() as f64;
        let n = g.len() as f64 - p;
        negatives_below -= n;
        wins += p * (negatives_below + 0.5 * n);
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Area under the precision-recall curve by step-wise integration over a
/// descending-score sweep, one step per distinct score.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_ranked_input(scores, labels)?;
    let (mut tp, mut seen, mut area, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    for g in tie_groups(scores) {
        tp += g.iter().filter(|&&i| labels[i]).count();
        seen += g.len();
        let recall = tp as f64 / pos as f64;
        area += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(area)
}

pub fn auc_aupr(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    Ok((roc_auc(scores, labels)?, aupr(scores, labels)?))
}

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{IrlSpan, RoleLabel};
use crate::error::{PieError, Result};

/// Exact-match counts and derived scores, as fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl LabelScore {
    fn from_counts(gold: usize, predicted: usize, correct: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            gold,
            predicted,
            correct,
            precision,
            recall,
            f1,
        }
    }
}

/// Per-label scores (labels absent from both gold and predictions are
/// omitted) plus micro-averaged totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggerReport {
    pub per_label: BTreeMap<RoleLabel, LabelScore>,
    pub micro: LabelScore,
}

/// Scores predictions against gold spans; a span counts only when label,
/// start and end all agree.
pub fn evaluate_tagger(gold: &[Vec<IrlSpan>], pred: &[Vec<IrlSpan>]) -> Result<TaggerReport> {
    if gold.len() != pred.len() {
        return Err(PieError::Shape(format!(
            "{} gold utterances but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let mut counts: BTreeMap<RoleLabel, (usize, usize, usize)> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        let gold_set: HashSet<&IrlSpan> = g.iter().collect();
        let pred_set: HashSet<&IrlSpan> = p.iter().collect();
        for s in &gold_set {
            counts.entry(s.label).or_default().0 += 1;
        }
        for s in &pred_set {
            let c = counts.entry(s.label).or_default();
            c.1 += 1;
            if gold_set.contains(s) {
                c.2 += 1;
            }
        }
    }
    let (mut tg, mut tp, mut tc) = (0, 0, 0);
    let per_label = counts
        .into_iter()
        .map(|(label, (g, p, c))| {
            tg += g;
            tp += p;
            tc += c;
            (label, LabelScore::from_counts(g, p, c))
        })
        .collect();
    Ok(TaggerReport {
        per_label,
        micro: LabelScore::from_counts(tg, tp, tc),
    })
}

impl fmt::Display for TaggerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>7} {:>7} {:>7} {:>6}", "Label", "P (%)", "R (%)", "F1 (%)", "Gold")?;
        let row = |f: &mut fmt::Formatter<'_>, name: &str, s: &LabelScore| {
            writeln!(
                f,
                "{:<10} {:>7.1} {:>7.1} {:>7.1} {:>6}",
                name,
                100.0 * s.precision,
                100.0 * s.recall,
                100.0 * s.f1,
                s.gold
            )
        };
        for label in RoleLabel::ALL {
            if let Some(s) = self.per_label.get(&label) {
                row(f, label.as_str(), s)?;
            }
        }
        row(f, "micro", &self.micro)
    }
}

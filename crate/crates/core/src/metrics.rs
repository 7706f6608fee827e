//! Boundary-token precision/recall/F1, weighted F1, agreement statistics and
//! the table-level F1 average.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Label, LabelOntology};
use crate::rules::SegmentationResult;

/// Section-start token indices of one segmented note.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundarySet {
    pub note_id: String,
    pub indices: BTreeSet<usize>,
}

impl BoundarySet {
    pub fn new(note_id: impl Into<String>, indices: impl IntoIterator<Item = usize>) -> Self {
        BoundarySet {
            note_id: note_id.into(),
            indices: indices.into_iter().collect(),
        }
    }
}

pub fn boundaries_of(seg: &SegmentationResult) -> BoundarySet {
    BoundarySet::new(seg.note_id.clone(), seg.spans.iter().map(|s| s.token_start))
}

/// Raw decision counts. Summing counts across notes and then dividing gives
/// micro-averaged scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrfCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl PrfCounts {
    pub fn scores(self) -> PRFScores {
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        PRFScores {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

impl std::ops::Add for PrfCounts {
    type Output = PrfCounts;

    fn add(self, rhs: Self) -> Self {
        PrfCounts {
            tp: self.tp + rhs.tp,
            fp: self.fp + rhs.fp,
            fn_: self.fn_ + rhs.fn_,
        }
    }
}

impl std::iter::Sum for PrfCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(PrfCounts::default(), |a, b| a + b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PRFScores {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PRFScores {
    pub fn counts(&self) -> PrfCounts {
        PrfCounts {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn boundary_counts(pred: &BoundarySet, gold: &BoundarySet) -> Result<PrfCounts> {
    if pred.note_id != gold.note_id {
        return Err(Error::NoteMismatch(pred.note_id.clone(), gold.note_id.clone()));
    }
    let tp = pred.indices.intersection(&gold.indices).count();
    Ok(PrfCounts {
        tp,
        fp: pred.indices.len() - tp,
        fn_: gold.indices.len() - tp,
    })
}

/// Exact-match boundary scores for one note.
pub fn boundary_prf(pred: &BoundarySet, gold: &BoundarySet) -> Result<PRFScores> {
    Ok(boundary_counts(pred, gold)?.scores())
}

/// Micro-averaged boundary scores over many notes: counts are pooled before
/// dividing.
pub fn micro_boundary_prf<'a>(
    pairs: impl IntoIterator<Item = (&'a BoundarySet, &'a BoundarySet)>,
) -> Result<PRFScores> {
    let mut total = PrfCounts::default();
    for (pred, gold) in pairs {
        total = total + boundary_counts(pred, gold)?;
    }
    Ok(total.scores())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: Label,
    pub support: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Support-weighted precision, recall and F1 with the per-class breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n: usize,
    pub per_class: Vec<ClassScore>,
}

/// Per-class one-vs-rest scores weighted by gold class frequency. Classes
/// are the ontology labels plus any stray label seen in either sequence;
/// classes absent from gold carry zero weight.
pub fn weighted_f1(pred: &[Label], gold: &[Label], ontology: &LabelOntology) -> Result<WeightedScores> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gold.len(),
        });
    }
    let mut classes: Vec<Label> = ontology.labels().to_vec();
    for l in pred.iter().chain(gold) {
        if !classes.contains(l) {
            classes.push(l.clone());
        }
    }
    let mut counts: BTreeMap<&Label, PrfCounts> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gold) {
        if p == g {
            counts.entry(g).or_default().tp += 1;
        } else {
            counts.entry(p).or_default().fp += 1;
            counts.entry(g).or_default().fn_ += 1;
        }
    }
    let n = gold.len();
    let mut out = WeightedScores {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        n,
        per_class: Vec::new(),
    };
    for label in &classes {
        let c = counts.get(label).copied().unwrap_or_default();
        let s = c.scores();
        let support = c.tp + c.fn_;
        if n > 0 {
            let w = support as f64 / n as f64;
            out.precision += w * s.precision;
            out.recall += w * s.recall;
            out.f1 += w * s.f1;
        }
        if support > 0 || c.fp > 0 {
            out.per_class.push(ClassScore {
                label: label.clone(),
                support,
                tp: c.tp,
                fp: c.fp,
                fn_: c.fn_,
                precision: s.precision,
                recall: s.recall,
                f1: s.f1,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub kappa: f64,
    pub percent_agreement: f64,
    pub expected_agreement: f64,
    pub n: usize,
}

/// Cohen's kappa between two label sequences over the same items.
pub fn cohen_kappa(a: &[Label], b: &[Label]) -> Result<AgreementReport> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = a.len() as f64;
    let observed = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let mut marg_a: BTreeMap<&Label, usize> = BTreeMap::new();
    let mut marg_b: BTreeMap<&Label, usize> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *marg_a.entry(x).or_insert(0) += 1;
        *marg_b.entry(y).or_insert(0) += 1;
    }
    let expected: f64 = marg_a
        .iter()
        .map(|(label, ca)| {
            let cb = marg_b.get(label).copied().unwrap_or(0);
            (*ca as f64 / n) * (cb as f64 / n)
        })
        .sum();
    let kappa = if expected >= 1.0 {
        if observed >= 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (observed - expected) / (1.0 - expected)
    };
    Ok(AgreementReport {
        kappa,
        percent_agreement: observed,
        expected_agreement: expected,
        n: a.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Majority {
    pub label: Label,
    /// More than one label shared the top count; `label` is the
    /// lexicographically smallest of them.
    pub tie: bool,
}

/// Plurality label of one item's annotations. `None` for no annotations.
pub fn majority_label<'a>(labels: impl IntoIterator<Item = &'a Label>) -> Option<Majority> {
    let mut counts: BTreeMap<&Label, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    let top = *counts.values().max()?;
    let mut winners = counts.iter().filter(|(_, c)| **c == top).map(|(l, _)| *l);
    let label = winners.next()?.clone();
    Some(Majority {
        label,
        tie: winners.next().is_some(),
    })
}

/// Rounds half away from zero at `decimals` places, tolerating binary
/// representation error (72.35 is stored as 72.3499999...).
pub fn round_half_up(x: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    let scaled = x * scale;
    let nudged = scaled + scaled.signum() * 1e-9 * scaled.abs().max(1.0);
    nudged.round() / scale
}

/// Mean of the two task F1 values on a 0-100 scale, rounded half-up to one
/// decimal. A missing task reports the other task's value.
pub fn avg_f1(sentence_f1: Option<f64>, freetext_f1: Option<f64>) -> Option<f64> {
    let mean = match (sentence_f1, freetext_f1) {
        (Some(a), Some(b)) => (a + b) / 2.0,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => return None,
    };
    Some(round_half_up(mean, 1))
}

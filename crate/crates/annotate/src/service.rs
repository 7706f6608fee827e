//! Annotation workflow and agreement analytics over a store snapshot.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use cnseg_core::metrics::{cohen_kappa, majority_label, Majority};
use cnseg_core::{Label, LabelOntology, LabeledSentence};
use serde::{Deserialize, Serialize};

use crate::error::{AnnotateError, Result};
use crate::store::{AnnotationRecord, AnnotationStore, Index};

/// System name -> sentence id -> predicted label.
pub type Predictions = BTreeMap<String, BTreeMap<String, Label>>;

/// Subset name -> sentence ids.
pub type Subsets = BTreeMap<String, Vec<String>>;

/// The subset every service knows: the whole task corpus.
pub const ALL_SUBSET: &str = "all";

#[derive(Clone, Debug, Deserialize)]
struct PredictionRecord {
    system: String,
    sentence_id: String,
    label: String,
}

/// Reads `{system, sentence_id, label}` JSONL records. Labels must resolve in
/// the ontology; a repeated (system, sentence) keeps the last line.
pub fn parse_predictions(body: &str, ontology: &LabelOntology) -> Result<Predictions> {
    let mut out = Predictions::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(line).map_err(|e| cnseg_core::Error::MalformedRecord {
            line_no: i + 1,
            reason: e.to_string(),
        })?;
        let label = ontology
            .resolve(&rec.label)
            .cloned()
            .ok_or(AnnotateError::InvalidLabel(rec.label))?;
        out.entry(rec.system).or_default().insert(rec.sentence_id, label);
    }
    Ok(out)
}

pub fn load_predictions(path: &Path, ontology: &LabelOntology) -> Result<Predictions> {
    let body = std::fs::read_to_string(path).map_err(|e| AnnotateError::io(path, e))?;
    parse_predictions(&body, ontology)
}

/// Reads a JSON object mapping subset names to sentence id lists.
pub fn load_subsets(path: &Path) -> Result<Subsets> {
    let body = std::fs::read_to_string(path).map_err(|e| AnnotateError::io(path, e))?;
    serde_json::from_str(&body).map_err(|e| AnnotateError::Core(e.into()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NextTask {
    Sentence {
        sentence_id: String,
        note_id: String,
        position: usize,
        text: String,
        labels: Vec<Label>,
        completed: usize,
        total: usize,
    },
    Done {
        done: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSubmission {
    pub sentence_id: String,
    pub annotator_id: String,
    pub label: String,
    /// Server time is used when absent.
    #[serde(default)]
    pub timestamp: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub store_size: usize,
    pub record: AnnotationRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemAgreement {
    pub system: String,
    /// Sentences with both a prediction and at least one human label.
    pub n: usize,
    pub kappa: f64,
    pub percent_agreement: f64,
    pub expected_agreement: f64,
    /// Overlap sentences whose human majority was a tie.
    pub majority_ties: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub label: Label,
    /// Aligned with [`DistributionTable::columns`].
    pub counts: Vec<usize>,
}

/// Label counts per source over one subset. The `human` column counts every
/// annotator's latest record; `human_majority` counts one tie-broken majority
/// label per annotated sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionTable {
    pub subset: String,
    pub n_sentences: usize,
    pub columns: Vec<String>,
    pub rows: Vec<DistributionRow>,
    pub totals: Vec<usize>,
    pub majority_ties: usize,
    pub fallback: Label,
    /// Share of the fallback label per column (0 for empty columns).
    pub fallback_rate: Vec<f64>,
}

/// Per-sentence human majority over the latest record of every annotator.
pub fn human_majorities(index: &Index) -> BTreeMap<String, Majority> {
    let mut by_sentence: BTreeMap<&str, Vec<&Label>> = BTreeMap::new();
    for ((sentence, _), record) in index {
        by_sentence.entry(sentence).or_default().push(&record.label);
    }
    by_sentence
        .into_iter()
        .filter_map(|(s, labels)| majority_label(labels).map(|m| (s.to_string(), m)))
        .collect()
}

/// Kappa and percent agreement between one system and the human majority,
/// over the sentences both have labeled.
pub fn agreement_report(
    system: &str,
    predictions: &BTreeMap<String, Label>,
    majorities: &BTreeMap<String, Majority>,
) -> Result<SystemAgreement> {
    let mut sys = Vec::new();
    let mut human = Vec::new();
    let mut ties = 0;
    for (sentence, label) in predictions {
        if let Some(m) = majorities.get(sentence) {
            sys.push(label.clone());
            human.push(m.label.clone());
            ties += usize::from(m.tie);
        }
    }
    if sys.is_empty() {
        return Err(AnnotateError::NoOverlap(system.to_string()));
    }
    let report = cohen_kappa(&sys, &human)?;
    Ok(SystemAgreement {
        system: system.to_string(),
        n: report.n,
        kappa: report.kappa,
        percent_agreement: report.percent_agreement,
        expected_agreement: report.expected_agreement,
        majority_ties: ties,
    })
}

pub fn distribution_table(
    subset: &str,
    sentence_ids: &[String],
    predictions: &Predictions,
    index: &Index,
    ontology: &LabelOntology,
) -> DistributionTable {
    let members: std::collections::BTreeSet<&str> = sentence_ids.iter().map(String::as_str).collect();
    let mut columns = vec!["human".to_string(), "human_majority".to_string()];
    columns.extend(predictions.keys().cloned());
    let mut counts: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    let mut bump = |label: &Label, col: usize| {
        counts.entry(label.clone()).or_insert_with(|| vec![0; columns.len()])[col] += 1;
    };
    for ((sentence, _), record) in index {
        if members.contains(sentence.as_str()) {
            bump(&record.label, 0);
        }
    }
    let mut ties = 0;
    for (sentence, m) in human_majorities(index) {
        if members.contains(sentence.as_str()) {
            bump(&m.label, 1);
            ties += usize::from(m.tie);
        }
    }
    for (col, preds) in predictions.values().enumerate() {
        for (sentence, label) in preds {
            if members.contains(sentence.as_str()) {
                bump(label, col + 2);
            }
        }
    }
    let mut rows: Vec<DistributionRow> = Vec::new();
    for label in ontology.labels() {
        if let Some(c) = counts.remove(label) {
            rows.push(DistributionRow {
                label: label.clone(),
                counts: c,
            });
        }
    }
    rows.extend(
        counts
            .into_iter()
            .map(|(label, counts)| DistributionRow { label, counts }),
    );
    let totals: Vec<usize> = (0..columns.len())
        .map(|c| rows.iter().map(|r| r.counts[c]).sum())
        .collect();
    let fallback = ontology.fallback().clone();
    let fallback_rate = (0..columns.len())
        .map(|c| {
            let hits = rows.iter().find(|r| r.label == fallback).map_or(0, |r| r.counts[c]);
            if totals[c] == 0 {
                0.0
            } else {
                hits as f64 / totals[c] as f64
            }
        })
        .collect();
    DistributionTable {
        subset: subset.to_string(),
        n_sentences: members.len(),
        columns,
        rows,
        totals,
        majority_ties: ties,
        fallback,
        fallback_rate,
    }
}

pub struct AnnotationService {
    sentences: Vec<LabeledSentence>,
    positions: HashMap<String, usize>,
    ontology: LabelOntology,
    predictions: Predictions,
    subsets: Subsets,
    store: AnnotationStore,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl AnnotationService {
    /// Sentences are served in the given order.
    pub fn new(sentences: Vec<LabeledSentence>, ontology: LabelOntology, store: AnnotationStore) -> Self {
        let positions = sentences
            .iter()
            .enumerate()
            .map(|(i, s)| (s.sentence_id.clone(), i))
            .collect();
        AnnotationService {
            sentences,
            positions,
            ontology,
            predictions: Predictions::new(),
            subsets: Subsets::new(),
            store,
        }
    }

    pub fn with_predictions(mut self, predictions: Predictions) -> Result<Self> {
        for sentence in predictions.values().flat_map(|p| p.keys()) {
            self.check_sentence(sentence)?;
        }
        self.predictions = predictions;
        Ok(self)
    }

    pub fn with_subsets(mut self, subsets: Subsets) -> Result<Self> {
        for sentence in subsets.values().flatten() {
            self.check_sentence(sentence)?;
        }
        self.subsets = subsets;
        Ok(self)
    }

    fn check_sentence(&self, id: &str) -> Result<()> {
        if self.positions.contains_key(id) {
            Ok(())
        } else {
            Err(AnnotateError::UnknownSentence(id.to_string()))
        }
    }

    pub fn ontology(&self) -> &LabelOntology {
        &self.ontology
    }

    pub fn store(&self) -> &AnnotationStore {
        &self.store
    }

    pub fn systems(&self) -> impl Iterator<Item = &str> {
        self.predictions.keys().map(String::as_str)
    }

    /// First sentence, in corpus order, this annotator has not labeled.
    pub fn next_task(&self, annotator: &str) -> Result<NextTask> {
        if annotator.trim().is_empty() {
            return Err(AnnotateError::MissingAnnotator);
        }
        if self.sentences.is_empty() {
            return Err(AnnotateError::UnknownCorpus);
        }
        let key = |s: &LabeledSentence| (s.sentence_id.clone(), annotator.to_string());
        let (next, completed) = self.store.with_index(|index| {
            let next = self.sentences.iter().find(|s| !index.contains_key(&key(s)));
            let completed = index.keys().filter(|(_, a)| a == annotator).count();
            (next, completed)
        });
        Ok(match next {
            Some(s) => NextTask::Sentence {
                sentence_id: s.sentence_id.clone(),
                note_id: s.note_id.clone(),
                position: s.position,
                text: s.text.clone(),
                labels: self.ontology.labels().to_vec(),
                completed,
                total: self.sentences.len(),
            },
            None => NextTask::Done { done: true },
        })
    }

    /// Validates and durably stores a label choice.
    pub fn submit(&self, submission: LabelSubmission) -> Result<Ack> {
        if submission.annotator_id.trim().is_empty() {
            return Err(AnnotateError::MissingAnnotator);
        }
        self.check_sentence(&submission.sentence_id)?;
        let label = self
            .ontology
            .resolve(&submission.label)
            .cloned()
            .ok_or(AnnotateError::InvalidLabel(submission.label))?;
        let record = AnnotationRecord {
            sentence_id: submission.sentence_id,
            annotator_id: submission.annotator_id,
            label,
            timestamp: submission.timestamp.unwrap_or_else(now_ms),
        };
        let store_size = self.store.append(record.clone())?;
        Ok(Ack { store_size, record })
    }

    pub fn agreement(&self, system: &str) -> Result<SystemAgreement> {
        let preds = self
            .predictions
            .get(system)
            .ok_or_else(|| AnnotateError::UnknownSystem(system.to_string()))?;
        let majorities = self.store.with_index(human_majorities);
        agreement_report(system, preds, &majorities)
    }

    /// Agreement for every system with at least one overlapping sentence.
    pub fn agreement_all(&self) -> Vec<SystemAgreement> {
        let majorities = self.store.with_index(human_majorities);
        self.predictions
            .iter()
            .filter_map(|(system, preds)| agreement_report(system, preds, &majorities).ok())
            .collect()
    }

    pub fn distribution(&self, subset: &str) -> Result<DistributionTable> {
        let all: Vec<String>;
        let ids = match self.subsets.get(subset) {
            Some(ids) => ids,
            None if subset == ALL_SUBSET => {
                all = self.sentences.iter().map(|s| s.sentence_id.clone()).collect();
                &all
            }
            None => return Err(AnnotateError::UnknownSubset(subset.to_string())),
        };
        let index = self.store.index();
        Ok(distribution_table(
            subset,
            ids,
            &self.predictions,
            &index,
            &self.ontology,
        ))
    }

    pub fn export(&self) -> Vec<AnnotationRecord> {
        self.store.log()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index_of(records: &[(&str, &str, &str)]) -> Index {
        let recs: Vec<AnnotationRecord> = records
            .iter()
            .enumerate()
            .map(|(i, (s, a, l))| AnnotationRecord {
                sentence_id: s.to_string(),
                annotator_id: a.to_string(),
                label: Label::canonical(l),
                timestamp: i as u64,
            })
            .collect();
        crate::store::fold(&recs)
    }

    #[test]
    fn echoing_majority_gives_full_agreement() {
        let index = index_of(&[
            ("s1", "a", "SEX"),
            ("s1", "b", "SEX"),
            ("s2", "a", "OTHER"),
            ("s2", "b", "OTHER"),
        ]);
        let maj = human_majorities(&index);
        let preds: BTreeMap<String, Label> = maj.iter().map(|(s, m)| (s.clone(), m.label.clone())).collect();
        let r = agreement_report("echo", &preds, &maj).unwrap();
        assert_eq!((r.kappa, r.percent_agreement, r.n), (1.0, 1.0, 2));
    }

    #[test]
    fn constant_system_agreement_is_label_frequency() {
        // humans: 3 x SEX, 1 x OTHER; system always SEX
        let index = index_of(&[
            ("s1", "a", "SEX"),
            ("s2", "a", "SEX"),
            ("s3", "a", "SEX"),
            ("s4", "a", "OTHER"),
        ]);
        let maj = human_majorities(&index);
        let preds: BTreeMap<String, Label> = ["s1", "s2", "s3", "s4"]
            .iter()
            .map(|s| (s.to_string(), Label::canonical("SEX")))
            .collect();
        let r = agreement_report("const", &preds, &maj).unwrap();
        assert_eq!(r.percent_agreement, 0.75);
        // p_e = 1.0 * 0.75
        assert_eq!(r.expected_agreement, 0.75);
        assert_eq!(r.kappa, 0.0);
    }

    #[test]
    fn no_overlap_is_an_error() {
        let index = index_of(&[("s1", "a", "SEX")]);
        let preds: BTreeMap<String, Label> = [("s9".to_string(), Label::canonical("SEX"))].into();
        assert!(matches!(
            agreement_report("x", &preds, &human_majorities(&index)),
            Err(AnnotateError::NoOverlap(_))
        ));
    }

    #[test]
    fn distribution_counts_raw_records_and_majorities() {
        let ont = LabelOntology::default();
        let index = index_of(&[
            ("s1", "a", "SEX"),
            ("s1", "b", "OTHER"),
            ("s1", "c", "OTHER"),
            ("s2", "a", "SERVICE"),
            ("s2", "b", "ALLERGIES"),
            ("s3", "a", "SEX"),
        ]);
        let mut preds = Predictions::new();
        preds.insert(
            "sys".into(),
            [("s1", "SEX"), ("s2", "SERVICE"), ("s3", "SEX")]
                .iter()
                .map(|(s, l)| (s.to_string(), Label::canonical(l)))
                .collect(),
        );
        let ids: Vec<String> = vec!["s1".into(), "s2".into()];
        let t = distribution_table("first", &ids, &preds, &index, &ont);
        assert_eq!(t.columns, ["human", "human_majority", "sys"]);
        assert_eq!(t.n_sentences, 2);
        assert_eq!(t.totals, [5, 2, 2]);
        assert_eq!(t.majority_ties, 1);
        let row = |l: &str| t.rows.iter().find(|r| r.label.as_str() == l).unwrap().counts.clone();
        assert_eq!(row("OTHER"), [2, 1, 0]);
        // s2 ties ALLERGIES/SERVICE and breaks toward ALLERGIES
        assert_eq!(row("ALLERGIES"), [1, 1, 0]);
        assert_eq!(row("SERVICE"), [1, 0, 1]);
        assert_eq!(t.fallback_rate[0], 0.4);
    }

    #[test]
    fn predictions_reject_unknown_labels() {
        let ont = LabelOntology::default();
        let ok = parse_predictions("{\"system\":\"a\",\"sentence_id\":\"s1\",\"label\":\"hpi\"}\n", &ont).unwrap();
        assert_eq!(ok["a"]["s1"].as_str(), "HISTORY OF PRESENT ILLNESS");
        assert!(matches!(
            parse_predictions(
                "{\"system\":\"a\",\"sentence_id\":\"s1\",\"label\":\"NOT_A_SECTION\"}",
                &ont
            ),
            Err(AnnotateError::InvalidLabel(_))
        ));
    }
}

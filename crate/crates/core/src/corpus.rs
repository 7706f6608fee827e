//! Sentence-labeled corpora, freetext synthesis, cross-validation splits and
//! tag distribution statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{token_index_at, tokenize, ClinicalNote, Label, LabelOntology, LabeledSentence, SectionSpan};

/// Separator placed between consecutive sentences of a synthesized note.
pub const SENTENCE_JOINER: &str = "\n";

pub const DEFAULT_FOLDS: usize = 10;
pub const DEFAULT_MIN_TAG_COUNT: usize = 50;

/// One line of a sentence corpus file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub note_id: String,
    pub position: usize,
    pub label: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence_id: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LabelMode {
    /// Unknown labels map to the ontology fallback.
    #[default]
    Lenient,
    /// Unknown labels are an error.
    Strict,
}

#[derive(Clone, Debug)]
pub struct SentenceCorpus {
    sentences: Vec<LabeledSentence>,
    groups: Vec<(String, Range<usize>)>,
    ontology: LabelOntology,
}

impl SentenceCorpus {
    /// Groups sentences by note (notes in order of first appearance,
    /// sentences by position) and validates labels and positions.
    pub fn new(mut sentences: Vec<LabeledSentence>, ontology: LabelOntology) -> Result<Self> {
        if let Some(s) = sentences.iter().find(|s| !ontology.contains(&s.label)) {
            return Err(Error::UnknownLabel(s.label.to_string()));
        }
        let mut first_seen: HashMap<String, usize> = HashMap::new();
        for s in &sentences {
            let next = first_seen.len();
            first_seen.entry(s.note_id.clone()).or_insert(next);
        }
        sentences.sort_by_key(|s| (first_seen[&s.note_id], s.position));

        let mut ids = HashSet::new();
        for s in &sentences {
            if !ids.insert(s.sentence_id.as_str()) {
                return Err(Error::InvalidCorpus(format!("duplicate sentence id {}", s.sentence_id)));
            }
        }

        let mut groups: Vec<(String, Range<usize>)> = Vec::new();
        for (i, s) in sentences.iter().enumerate() {
            match groups.last_mut() {
                Some((id, range)) if *id == s.note_id => range.end = i + 1,
                _ => groups.push((s.note_id.clone(), i..i + 1)),
            }
        }
        for (note_id, range) in &groups {
            for (expected, s) in sentences[range.clone()].iter().enumerate() {
                if s.position != expected {
                    return Err(Error::InvalidCorpus(format!(
                        "note {note_id}: positions are not contiguous from 0 (found {} where {expected} was expected)",
                        s.position
                    )));
                }
            }
        }
        Ok(SentenceCorpus {
            sentences,
            groups,
            ontology,
        })
    }

    pub fn sentences(&self) -> &[LabeledSentence] {
        &self.sentences
    }

    pub fn ontology(&self) -> &LabelOntology {
        &self.ontology
    }

    pub fn note_count(&self) -> usize {
        self.groups.len()
    }

    pub fn note_ids(&self) -> impl Iterator<Item = &str> {
        self.groups.iter().map(|(id, _)| id.as_str())
    }

    /// Sentence groups in corpus order.
    pub fn notes(&self) -> impl Iterator<Item = (&str, &[LabeledSentence])> {
        self.groups
            .iter()
            .map(|(id, range)| (id.as_str(), &self.sentences[range.clone()]))
    }

    pub fn note(&self, note_id: &str) -> Option<&[LabeledSentence]> {
        self.groups
            .iter()
            .find(|(id, _)| id == note_id)
            .map(|(_, range)| &self.sentences[range.clone()])
    }

    /// Restricts the corpus to the given notes, preserving corpus order.
    pub fn subset(&self, note_ids: &HashSet<&str>) -> SentenceCorpus {
        let sentences = self
            .notes()
            .filter(|(id, _)| note_ids.contains(id))
            .flat_map(|(_, s)| s.iter().cloned())
            .collect();
        SentenceCorpus::new(sentences, self.ontology.clone()).expect("subset of a valid corpus is valid")
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for s in &self.sentences {
            let record = SentenceRecord {
                note_id: s.note_id.clone(),
                position: s.position,
                label: s.label.to_string(),
                text: s.text.clone(),
                sentence_id: Some(s.sentence_id.clone()),
            };
            out.push_str(&serde_json::to_string(&record)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Reads a line-delimited JSON sentence corpus.
pub fn load_sentence_corpus(path: &Path, ontology: &LabelOntology, mode: LabelMode) -> Result<SentenceCorpus> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sentence_corpus(&body, ontology, mode)
}

pub fn parse_sentence_corpus(body: &str, ontology: &LabelOntology, mode: LabelMode) -> Result<SentenceCorpus> {
    let mut sentences = Vec::new();
    for (i, line) in body.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: SentenceRecord = serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
            line_no,
            reason: e.to_string(),
        })?;
        if record.note_id.trim().is_empty() {
            return Err(Error::MalformedRecord {
                line_no,
                reason: "empty note_id".into(),
            });
        }
        if record.text.split_whitespace().next().is_none() {
            return Err(Error::MalformedRecord {
                line_no,
                reason: "sentence text has no tokens".into(),
            });
        }
        let label = match (ontology.resolve(&record.label), mode) {
            (Some(l), _) => l.clone(),
            (None, LabelMode::Lenient) => ontology.fallback().clone(),
            (None, LabelMode::Strict) => return Err(Error::UnknownLabel(record.label)),
        };
        let sentence_id = record
            .sentence_id
            .unwrap_or_else(|| format!("{}:{}", record.note_id, record.position));
        sentences.push(LabeledSentence {
            sentence_id,
            note_id: record.note_id,
            position: record.position,
            text: record.text,
            label,
        });
    }
    SentenceCorpus::new(sentences, ontology.clone())
}

/// Byte ranges of each sentence inside the note synthesized from `sentences`.
pub fn sentence_char_ranges(sentences: &[LabeledSentence]) -> Vec<Range<usize>> {
    let mut offset = 0;
    sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if i > 0 {
                offset += SENTENCE_JOINER.len();
            }
            let range = offset..offset + s.text.len();
            offset = range.end;
            range
        })
        .collect()
}

/// Token index of the first token of each sentence in the synthesized note.
pub fn sentence_token_starts(sentences: &[LabeledSentence]) -> Vec<usize> {
    let mut next = 0;
    sentences
        .iter()
        .map(|s| {
            let start = next;
            next += s.text.split_whitespace().count();
            start
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct FreetextCorpus {
    pub notes: Vec<ClinicalNote>,
}

/// Concatenates each note's sentences with [`SENTENCE_JOINER`] and merges
/// runs of equally-labeled sentences into gold spans.
pub fn synthesize_freetext(corpus: &SentenceCorpus) -> Result<FreetextCorpus> {
    if corpus.note_count() == 0 {
        return Err(Error::EmptyInput);
    }
    let notes = corpus
        .notes()
        .map(|(note_id, sentences)| synthesize_note(note_id, sentences))
        .collect::<Result<Vec<_>>>()?;
    Ok(FreetextCorpus { notes })
}

pub fn synthesize_note(note_id: &str, sentences: &[LabeledSentence]) -> Result<ClinicalNote> {
    let text = sentences
        .iter()
        .map(|s| s.text.as_str())
        .collect::<Vec<_>>()
        .join(SENTENCE_JOINER);
    let ranges = sentence_char_ranges(sentences);
    let token_starts = sentence_token_starts(sentences);
    let n_tokens = tokenize(&text).len();

    let mut spans: Vec<SectionSpan> = Vec::new();
    for (i, s) in sentences.iter().enumerate() {
        let token_end = token_starts.get(i + 1).copied().unwrap_or(n_tokens);
        match spans.last_mut() {
            Some(span) if span.label == s.label => {
                span.token_end = token_end;
                span.char_end = ranges[i].end;
            }
            _ => spans.push(SectionSpan {
                label: s.label.clone(),
                token_start: token_starts[i],
                token_end,
                char_start: ranges[i].start,
                char_end: ranges[i].end,
            }),
        }
    }
    ClinicalNote::new(note_id, text).with_gold(spans)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SpanRecord {
    label: Label,
    char_start: usize,
    char_end: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FreetextRecord {
    note_id: String,
    text: String,
    #[serde(default)]
    spans: Vec<SpanRecord>,
}

impl FreetextCorpus {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for note in &self.notes {
            let record = FreetextRecord {
                note_id: note.note_id.clone(),
                text: note.text.clone(),
                spans: note
                    .gold
                    .iter()
                    .flatten()
                    .map(|s| SpanRecord {
                        label: s.label.clone(),
                        char_start: s.char_start,
                        char_end: s.char_end,
                    })
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&record)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses a freetext export. Notes without span records carry no gold.
    pub fn from_jsonl(body: &str, ontology: &LabelOntology) -> Result<Self> {
        let mut notes = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |reason: String| Error::MalformedRecord { line_no: i + 1, reason };
            let record: FreetextRecord = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
            if record.note_id.is_empty() || !seen.insert(record.note_id.clone()) {
                return Err(malformed(format!("empty or duplicate note_id {:?}", record.note_id)));
            }
            let mut note = ClinicalNote::new(record.note_id, record.text);
            if !record.spans.is_empty() {
                let tokens = note.tokens();
                let mut spans = Vec::with_capacity(record.spans.len());
                for s in record.spans {
                    if !ontology.contains(&s.label) {
                        return Err(Error::UnknownLabel(s.label.to_string()));
                    }
                    if s.char_start >= s.char_end || s.char_end > note.text.len() {
                        return Err(malformed(format!("bad span range {}..{}", s.char_start, s.char_end)));
                    }
                    spans.push(SectionSpan {
                        label: s.label,
                        token_start: token_index_at(tokens, s.char_start),
                        token_end: tokens.partition_point(|t| t.char_start < s.char_end),
                        char_start: s.char_start,
                        char_end: s.char_end,
                    });
                }
                note = note.with_gold(spans)?;
            }
            notes.push(note);
        }
        Ok(FreetextCorpus { notes })
    }

    pub fn load(path: &Path, ontology: &LabelOntology) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&body, ontology)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let body = self.to_jsonl()?;
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Fold assignment for k-fold cross-validation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SplitPlan {
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

/// The train/validation/test note ids of one cross-validation run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldRun {
    pub index: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl SplitPlan {
    /// Shuffles the sorted note ids with a seeded RNG and deals them round
    /// robin into `k` folds.
    pub fn new<'a>(note_ids: impl IntoIterator<Item = &'a str>, k: usize, seed: u64) -> Result<Self> {
        if k < 3 {
            return Err(Error::InvalidConfig(format!("fold count must be at least 3, got {k}")));
        }
        let mut ids: Vec<&str> = note_ids.into_iter().collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() < k {
            return Err(Error::TooFewNotes {
                needed: k,
                got: ids.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ids.shuffle(&mut rng);
        let assignments = ids
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id.to_string(), i % k))
            .collect();
        Ok(SplitPlan { k, seed, assignments })
    }

    pub fn fold_of(&self, note_id: &str) -> Option<usize> {
        self.assignments.get(note_id).copied()
    }

    pub fn fold(&self, fold: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, f)| **f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Run `i`: test is fold `i`, validation is fold `i + 1 (mod k)`, train is the rest.
    pub fn run(&self, i: usize) -> FoldRun {
        let val_fold = (i + 1) % self.k;
        let mut run = FoldRun {
            index: i,
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
        };
        for (id, fold) in &self.assignments {
            let bucket = if *fold == i {
                &mut run.test
            } else if *fold == val_fold {
                &mut run.validation
            } else {
                &mut run.train
            };
            bucket.push(id.clone());
        }
        run
    }

    pub fn runs(&self) -> impl Iterator<Item = FoldRun> + '_ {
        (0..self.k).map(|i| self.run(i))
    }
}

pub fn make_splits(corpus: &SentenceCorpus, k: usize, seed: u64) -> Result<SplitPlan> {
    SplitPlan::new(corpus.note_ids(), k, seed)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TagStatistics {
    pub label_counts: BTreeMap<Label, usize>,
    pub tags_per_note: BTreeMap<String, usize>,
    /// Per label: sentence length in tokens -> number of sentences.
    pub sentence_lengths: BTreeMap<Label, BTreeMap<usize, usize>>,
}

impl TagStatistics {
    /// Labels occurring at least `min_count` times.
    pub fn frequent_labels(&self, min_count: usize) -> BTreeMap<Label, usize> {
        self.label_counts
            .iter()
            .filter(|(_, c)| **c >= min_count)
            .map(|(l, c)| (l.clone(), *c))
            .collect()
    }

    /// Tag count -> number of notes with that many tags.
    pub fn tags_per_note_histogram(&self) -> BTreeMap<usize, usize> {
        let mut hist = BTreeMap::new();
        for n in self.tags_per_note.values() {
            *hist.entry(*n).or_insert(0) += 1;
        }
        hist
    }

    /// Most common tags-per-note value; ties go to the smaller count.
    pub fn tags_per_note_mode(&self) -> Option<usize> {
        self.tags_per_note_histogram()
            .into_iter()
            .max_by(|(a, ca), (b, cb)| ca.cmp(cb).then(b.cmp(a)))
            .map(|(n, _)| n)
    }

    pub fn mean_tags_per_note(&self) -> f64 {
        if self.tags_per_note.is_empty() {
            return 0.0;
        }
        self.tags_per_note.values().sum::<usize>() as f64 / self.tags_per_note.len() as f64
    }
}

pub fn tag_statistics(corpus: &SentenceCorpus) -> TagStatistics {
    let mut stats = TagStatistics::default();
    for (note_id, sentences) in corpus.notes() {
        stats.tags_per_note.insert(note_id.to_string(), sentences.len());
        for s in sentences {
            *stats.label_counts.entry(s.label.clone()).or_insert(0) += 1;
            let len = s.text.split_whitespace().count();
            *stats
                .sentence_lengths
                .entry(s.label.clone())
                .or_default()
                .entry(len)
                .or_insert(0) += 1;
        }
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_spans;

    fn sentence(note: &str, pos: usize, label: &str, text: &str) -> LabeledSentence {
        LabeledSentence {
            sentence_id: format!("{note}:{pos}"),
            note_id: note.into(),
            position: pos,
            text: text.into(),
            label: Label::canonical(label),
        }
    }

    fn corpus(sentences: Vec<LabeledSentence>) -> SentenceCorpus {
        SentenceCorpus::new(sentences, LabelOntology::default()).unwrap()
    }

    #[test]
    fn load_groups_one_note() {
        let body = r#"{"note_id":"n1","position":2,"label":"ALLERGIES","text":"peanuts"}
{"note_id":"n1","position":0,"label":"history of present illness","text":"Patient is a 60M"}
{"note_id":"n1","position":1,"label":"ALLERGIES","text":"Allergies: none known"}
"#;
        let corpus = parse_sentence_corpus(body, &LabelOntology::default(), LabelMode::Strict).unwrap();
        assert_eq!(corpus.note_count(), 1);
        let positions: Vec<_> = corpus.sentences().iter().map(|s| s.position).collect();
        assert_eq!(positions, [0, 1, 2]);
        assert_eq!(corpus.sentences()[0].label.as_str(), "HISTORY OF PRESENT ILLNESS");
        assert_eq!(corpus.sentences()[0].sentence_id, "n1:0");
    }

    #[test]
    fn unknown_label_strict_vs_lenient() {
        let body = r#"{"note_id":"n1","position":0,"label":"SPACESHIP","text":"x"}"#;
        let ont = LabelOntology::default();
        assert!(matches!(
            parse_sentence_corpus(body, &ont, LabelMode::Strict),
            Err(Error::UnknownLabel(l)) if l == "SPACESHIP"
        ));
        let c = parse_sentence_corpus(body, &ont, LabelMode::Lenient).unwrap();
        assert_eq!(c.sentences()[0].label.as_str(), "OTHER");
    }

    #[test]
    fn malformed_record_reports_line() {
        let body = "{\"note_id\":\"n1\",\"position\":0,\"label\":\"OTHER\",\"text\":\"x\"}\nnot json\n";
        assert!(matches!(
            parse_sentence_corpus(body, &LabelOntology::default(), LabelMode::Lenient),
            Err(Error::MalformedRecord { line_no: 2, .. })
        ));
    }

    #[test]
    fn gap_in_positions_rejected() {
        let err = SentenceCorpus::new(
            vec![sentence("n", 0, "OTHER", "a"), sentence("n", 2, "OTHER", "b")],
            LabelOntology::default(),
        );
        assert!(matches!(err, Err(Error::InvalidCorpus(_))));
    }

    #[test]
    fn synthesize_merges_runs() {
        let c = corpus(vec![
            sentence("n", 0, "ALLERGIES", "Allergies: peanuts"),
            sentence("n", 1, "ALLERGIES", "and shellfish"),
            sentence("n", 2, "SERVICE", "Service: medicine"),
        ]);
        let ft = synthesize_freetext(&c).unwrap();
        let note = &ft.notes[0];
        assert_eq!(note.text, "Allergies: peanuts\nand shellfish\nService: medicine");
        let gold = note.gold.as_ref().unwrap();
        assert_eq!(gold.len(), 2);
        assert_eq!((gold[0].token_start, gold[0].token_end), (0, 4));
        assert_eq!((gold[1].token_start, gold[1].token_end), (4, 6));
        let rebuilt: Vec<&str> = gold.iter().map(|s| &note.text[s.char_start..s.char_end]).collect();
        assert_eq!(rebuilt.join(SENTENCE_JOINER), note.text);
    }

    #[test]
    fn synthesize_single_sentence() {
        let c = corpus(vec![sentence("n", 0, "OTHER", "just one line here")]);
        let ft = synthesize_freetext(&c).unwrap();
        let gold = ft.notes[0].gold.as_ref().unwrap();
        assert_eq!(gold.len(), 1);
        assert_eq!((gold[0].token_start, gold[0].token_end), (0, 4));
    }

    #[test]
    fn freetext_jsonl_round_trip() {
        let c = corpus(vec![
            sentence("a", 0, "ALLERGIES", "  Allergies: peanuts "),
            sentence("a", 1, "SERVICE", "Service: medicine"),
            sentence("b", 0, "OTHER", "x y"),
        ]);
        let ft = synthesize_freetext(&c).unwrap();
        let again = FreetextCorpus::from_jsonl(&ft.to_jsonl().unwrap(), c.ontology()).unwrap();
        assert_eq!(again.notes, ft.notes);
    }

    #[test]
    fn splits_ten_notes_ten_folds() {
        let ids: Vec<String> = (0..10).map(|i| format!("n{i}")).collect();
        for seed in [0, 1, 99] {
            let plan = SplitPlan::new(ids.iter().map(String::as_str), 10, seed).unwrap();
            for f in 0..10 {
                assert_eq!(plan.fold(f).len(), 1);
            }
            let again = SplitPlan::new(ids.iter().rev().map(String::as_str), 10, seed).unwrap();
            assert_eq!(plan, again);
        }
    }

    #[test]
    fn splits_full_scale_80_10_10() {
        let ids: Vec<String> = (0..1000).map(|i| format!("note-{i:04}")).collect();
        let plan = SplitPlan::new(ids.iter().map(String::as_str), 10, 7).unwrap();
        for run in plan.runs() {
            assert_eq!((run.train.len(), run.validation.len(), run.test.len()), (800, 100, 100));
        }
    }

    #[test]
    fn split_errors() {
        let ids = ["a", "b"];
        assert!(matches!(
            SplitPlan::new(ids, 3, 0),
            Err(Error::TooFewNotes { needed: 3, got: 2 })
        ));
        assert!(matches!(SplitPlan::new(ids, 2, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn tag_counts() {
        let c = corpus(vec![
            sentence("n", 0, "ALLERGIES", "a b"),
            sentence("n", 1, "ALLERGIES", "c"),
            sentence("n", 2, "SERVICE", "d e f"),
        ]);
        let stats = tag_statistics(&c);
        assert_eq!(stats.label_counts[&Label::canonical("ALLERGIES")], 2);
        assert_eq!(stats.label_counts[&Label::canonical("SERVICE")], 1);
        assert_eq!(stats.tags_per_note["n"], 3);
        assert_eq!(stats.sentence_lengths[&Label::canonical("SERVICE")][&3], 1);
        assert!(stats.frequent_labels(2).contains_key(&Label::canonical("ALLERGIES")));
        assert!(!stats.frequent_labels(2).contains_key(&Label::canonical("SERVICE")));
        assert!(stats.frequent_labels(DEFAULT_MIN_TAG_COUNT).is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        const LABELS: &[&str] = &["ALLERGIES", "SERVICE", "OTHER", "SEX"];

        fn notes() -> impl Strategy<Value = Vec<LabeledSentence>> {
            proptest::collection::vec(
                proptest::collection::vec((0..LABELS.len(), "[a-z]{1,5}( [a-z:]{1,5}){0,4}"), 1..12),
                1..6,
            )
            .prop_map(|notes| {
                notes
                    .into_iter()
                    .enumerate()
                    .flat_map(|(n, sents)| {
                        sents
                            .into_iter()
                            .enumerate()
                            .map(move |(p, (l, text))| sentence(&format!("n{n}"), p, LABELS[l], &text))
                    })
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn synthesis_preserves_text_and_counts_spans(sentences in notes()) {
                let c = corpus(sentences);
                let ft = synthesize_freetext(&c).unwrap();
                for (note, (_, sents)) in ft.notes.iter().zip(c.notes()) {
                    let gold = note.gold.as_ref().unwrap();
                    validate_spans(note.tokens(), gold).unwrap();
                    let joined: Vec<&str> = gold.iter().map(|s| &note.text[s.char_start..s.char_end]).collect();
                    prop_assert_eq!(joined.join(SENTENCE_JOINER), note.text.clone());
                    let changes = sents.windows(2).filter(|w| w[0].label != w[1].label).count();
                    prop_assert_eq!(gold.len(), changes + 1);
                }
            }

            #[test]
            fn splits_partition_notes(n in 3usize..60, k in 3usize..10, seed in any::<u64>()) {
                prop_assume!(n >= k);
                let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
                let plan = SplitPlan::new(ids.iter().map(String::as_str), k, seed).unwrap();
                prop_assert_eq!(plan.assignments.len(), n);
                let sizes: Vec<usize> = (0..k).map(|f| plan.fold(f).len()).collect();
                prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
                for run in plan.runs() {
                    let mut all: Vec<&String> = run.train.iter().chain(&run.validation).chain(&run.test).collect();
                    all.sort();
                    all.dedup();
                    prop_assert_eq!(all.len(), n);
                }
            }
        }
    }
}

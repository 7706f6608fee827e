//! Core data types shared by every stage of the pipeline: notes, section
//! spans, the label ontology, and whitespace tokenization.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical section label, e.g. `HISTORY OF PRESENT ILLNESS`.
///
/// Canonical form is trimmed, upper-cased, with inner whitespace collapsed to
/// single spaces.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Label(String);

impl Label {
    pub fn canonical(raw: &str) -> Label {
        Label(normalize_label(raw))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Label {
    fn from(raw: &str) -> Self {
        Label::canonical(raw)
    }
}

fn normalize_label(raw: &str) -> String {
    raw.split_whitespace()
        .map(|w| w.to_uppercase())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
}

/// Splits `text` into maximal runs of non-whitespace characters.
///
/// Offsets are byte offsets into `text`. Punctuation stays attached to the
/// surrounding token.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut start: Option<usize> = None;
    for (idx, ch) in text.char_indices() {
        match (ch.is_whitespace(), start) {
            (true, Some(s)) => {
                tokens.push(Token {
                    text: text[s..idx].to_string(),
                    char_start: s,
                    char_end: idx,
                });
                start = None;
            }
            (false, None) => start = Some(idx),
            _ => {}
        }
    }
    if let Some(s) = start {
        tokens.push(Token {
            text: text[s..].to_string(),
            char_start: s,
            char_end: text.len(),
        });
    }
    tokens
}

/// Index of the token containing `offset`, or of the next token when the
/// offset sits in whitespace. Offsets in trailing whitespace map to the token
/// count (one past the last token).
pub fn token_index_at(tokens: &[Token], offset: usize) -> usize {
    tokens.partition_point(|t| t.char_end <= offset)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionSpan {
    pub label: Label,
    pub token_start: usize,
    pub token_end: usize,
    pub char_start: usize,
    pub char_end: usize,
}

impl SectionSpan {
    /// Builds a span whose char range is exactly the extent of tokens
    /// `[token_start, token_end)`.
    pub fn from_tokens(label: Label, tokens: &[Token], token_start: usize, token_end: usize) -> Self {
        debug_assert!(token_start < token_end && token_end <= tokens.len());
        SectionSpan {
            label,
            token_start,
            token_end,
            char_start: tokens[token_start].char_start,
            char_end: tokens[token_end - 1].char_end,
        }
    }
}

/// Builds a covering span list from `(start token, label)` boundaries.
///
/// Boundaries are sorted; duplicates keep the first label. If the first
/// boundary is not token 0, a `fallback` span fills the gap.
pub fn spans_from_boundaries(tokens: &[Token], boundaries: &[(usize, Label)], fallback: &Label) -> Vec<SectionSpan> {
    if tokens.is_empty() {
        return Vec::new();
    }
    let mut starts: Vec<(usize, Label)> = Vec::with_capacity(boundaries.len() + 1);
    let mut sorted: Vec<&(usize, Label)> = boundaries.iter().filter(|(t, _)| *t < tokens.len()).collect();
    sorted.sort_by_key(|(t, _)| *t);
    for (t, label) in sorted {
        if starts.last().map_or(true, |(prev, _)| prev < t) {
            starts.push((*t, label.clone()));
        }
    }
    if starts.first().map_or(true, |(t, _)| *t != 0) {
        starts.insert(0, (0, fallback.clone()));
    }
    starts
        .iter()
        .enumerate()
        .map(|(i, (start, label))| {
            let end = starts.get(i + 1).map_or(tokens.len(), |(next, _)| *next);
            SectionSpan::from_tokens(label.clone(), tokens, *start, end)
        })
        .collect()
}

/// Checks the covering invariant: sorted, non-overlapping, every token
/// covered exactly once, char ranges enclosing exactly their tokens.
pub fn validate_spans(tokens: &[Token], spans: &[SectionSpan]) -> std::result::Result<(), String> {
    let mut expected_start = 0;
    for (i, span) in spans.iter().enumerate() {
        if span.token_start != expected_start {
            return Err(format!(
                "span {i} starts at token {} (expected {expected_start})",
                span.token_start
            ));
        }
        if span.token_start >= span.token_end {
            return Err(format!("span {i} is empty"));
        }
        if span.token_end > tokens.len() {
            return Err(format!("span {i} ends past the last token"));
        }
        let first = &tokens[span.token_start];
        let last = &tokens[span.token_end - 1];
        if span.char_start > first.char_start || span.char_end < last.char_end {
            return Err(format!("span {i} char range does not enclose its tokens"));
        }
        if span.token_start > 0 && span.char_start < tokens[span.token_start - 1].char_end {
            return Err(format!("span {i} char range overlaps the previous token"));
        }
        if span.token_end < tokens.len() && span.char_end > tokens[span.token_end].char_start {
            return Err(format!("span {i} char range overlaps the next token"));
        }
        expected_start = span.token_end;
    }
    if expected_start != tokens.len() {
        return Err(format!("spans cover {expected_start} of {} tokens", tokens.len()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNote")]
pub struct ClinicalNote {
    pub note_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Vec<SectionSpan>>,
    #[serde(skip)]
    tokens: Vec<Token>,
}

impl ClinicalNote {
    pub fn new(note_id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        ClinicalNote {
            note_id: note_id.into(),
            text,
            gold: None,
            tokens,
        }
    }

    pub fn with_gold(mut self, gold: Vec<SectionSpan>) -> Result<Self> {
        validate_spans(&self.tokens, &gold)
            .map_err(|reason| Error::InvalidCorpus(format!("note {}: {reason}", self.note_id)))?;
        self.gold = Some(gold);
        Ok(self)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }
}

#[derive(Deserialize)]
struct RawNote {
    note_id: String,
    text: String,
    #[serde(default)]
    gold: Option<Vec<SectionSpan>>,
}

impl TryFrom<RawNote> for ClinicalNote {
    type Error = Error;

    fn try_from(raw: RawNote) -> Result<Self> {
        let note = ClinicalNote::new(raw.note_id, raw.text);
        match raw.gold {
            Some(gold) => note.with_gold(gold),
            None => Ok(note),
        }
    }
}

/// Token index for a byte offset in `note.text`.
pub fn span_for_char(note: &ClinicalNote, char_offset: usize) -> Result<usize> {
    if char_offset >= note.text.len() {
        return Err(Error::OffsetOutOfRange {
            offset: char_offset,
            len: note.text.len(),
        });
    }
    Ok(token_index_at(note.tokens(), char_offset))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub sentence_id: String,
    pub note_id: String,
    pub position: usize,
    pub text: String,
    pub label: Label,
}

/// One record of an ontology file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OntologyRecord {
    pub label: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelOntology {
    labels: Vec<Label>,
    aliases: BTreeMap<Label, Vec<String>>,
    fallback: Label,
    lookup: HashMap<String, Label>,
}

pub const DEFAULT_FALLBACK: &str = "OTHER";

const DEFAULT_LEXICON: &[(&str, &[&str])] = &[
    ("ALLERGIES", &["Allergies", "Allergy", "Allergies/Adverse Reactions"]),
    ("SEX", &["Sex", "Gender"]),
    ("OTHER", &[]),
    ("SERVICE", &["Service"]),
    (
        "HISTORY OF PRESENT ILLNESS",
        &["History of Present Illness", "History of the Present Illness", "HPI"],
    ),
    (
        "MAJOR SURGICAL OR INVASIVE PROCEDURE",
        &[
            "Major Surgical or Invasive Procedure",
            "Major Surgical Or Invasive Procedures",
        ],
    ),
    ("FAMILY HISTORY", &["Family History", "FHx"]),
    (
        "DISCHARGE DIAGNOSIS",
        &["Discharge Diagnosis", "Discharge Diagnoses", "Final Diagnosis"],
    ),
    (
        "PHYSICAL EXAM",
        &["Physical Exam", "Physical Examination", "Admission Exam"],
    ),
    ("PERTINENT RESULTS", &["Pertinent Results", "Laboratory Results"]),
    ("ATTENDING", &["Attending"]),
    ("CHIEF COMPLAINT", &["Chief Complaint", "CC"]),
    ("PAST MEDICAL HISTORY", &["Past Medical History", "PMH", "PMHx"]),
    (
        "MEDICATIONS",
        &[
            "Medications",
            "Medications on Admission",
            "Discharge Medications",
            "Home Medications",
        ],
    ),
    ("DISCHARGE INSTRUCTIONS", &["Discharge Instructions"]),
    ("HOSPITAL COURSE", &["Hospital Course", "Brief Hospital Course"]),
    ("SOCIAL HISTORY", &["Social History"]),
    ("DISCHARGE DISPOSITION", &["Discharge Disposition"]),
    ("DISCHARGE CONDITION", &["Discharge Condition"]),
    (
        "FOLLOWUP INSTRUCTIONS",
        &["Followup Instructions", "Follow-up Instructions"],
    ),
];

impl Default for LabelOntology {
    fn default() -> Self {
        let records = DEFAULT_LEXICON
            .iter()
            .map(|(label, aliases)| OntologyRecord {
                label: label.to_string(),
                aliases: aliases.iter().map(|a| a.to_string()).collect(),
                fallback: *label == DEFAULT_FALLBACK,
            })
            .collect();
        LabelOntology::from_records(records).expect("built-in ontology is valid")
    }
}

impl LabelOntology {
    /// Builds an ontology from records. When no record is flagged as the
    /// fallback, `OTHER` must be among the labels.
    pub fn from_records(records: Vec<OntologyRecord>) -> Result<Self> {
        let mut labels = Vec::with_capacity(records.len());
        let mut aliases = BTreeMap::new();
        let mut lookup: HashMap<String, Label> = HashMap::new();
        let mut fallback = None;
        for record in records {
            let label = Label::canonical(&record.label);
            if label.as_str().is_empty() {
                return Err(Error::InvalidOntology("empty label".into()));
            }
            if labels.contains(&label) {
                return Err(Error::InvalidOntology(format!("duplicate label {label}")));
            }
            if record.fallback {
                if let Some(prev) = &fallback {
                    return Err(Error::InvalidOntology(format!(
                        "two fallback labels: {prev} and {label}"
                    )));
                }
                fallback = Some(label.clone());
            }
            let mut surface = Vec::new();
            for alias in record.aliases {
                let key = normalize_label(&alias);
                if key.is_empty() {
                    return Err(Error::InvalidOntology(format!("empty alias for {label}")));
                }
                if let Some(owner) = lookup.get(&key) {
                    if *owner != label {
                        return Err(Error::DuplicateAlias {
                            alias,
                            first: owner.to_string(),
                            second: label.to_string(),
                        });
                    }
                    continue;
                }
                lookup.insert(key, label.clone());
                surface.push(alias.trim().to_string());
            }
            aliases.insert(label.clone(), surface);
            labels.push(label);
        }
        // Canonical ids resolve to themselves unless an alias already claims them.
        for label in &labels {
            if let Some(owner) = lookup.get(label.as_str()) {
                if owner != label {
                    return Err(Error::DuplicateAlias {
                        alias: label.to_string(),
                        first: owner.to_string(),
                        second: label.to_string(),
                    });
                }
            }
            lookup.insert(label.as_str().to_string(), label.clone());
        }
        let fallback = match fallback {
            Some(f) => f,
            None => {
                let other = Label::canonical(DEFAULT_FALLBACK);
                if !labels.contains(&other) {
                    return Err(Error::InvalidOntology(
                        "no fallback label flagged and OTHER is not defined".into(),
                    ));
                }
                other
            }
        };
        Ok(LabelOntology {
            labels,
            aliases,
            fallback,
            lookup,
        })
    }

    /// Reads a line-delimited JSON ontology file (one [`OntologyRecord`] per line).
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: OntologyRecord = serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
                line_no: i + 1,
                reason: e.to_string(),
            })?;
            records.push(record);
        }
        Self::from_records(records)
    }

    pub fn to_records(&self) -> Vec<OntologyRecord> {
        self.labels
            .iter()
            .map(|label| OntologyRecord {
                label: label.to_string(),
                aliases: self.aliases.get(label).cloned().unwrap_or_default(),
                fallback: *label == self.fallback,
            })
            .collect()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn fallback(&self) -> &Label {
        &self.fallback
    }

    pub fn aliases(&self, label: &Label) -> &[String] {
        self.aliases.get(label).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn contains(&self, label: &Label) -> bool {
        self.labels.contains(label)
    }

    pub fn index_of(&self, label: &Label) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Resolves a canonical id or alias, case-insensitively.
    pub fn resolve(&self, raw: &str) -> Option<&Label> {
        self.lookup.get(&normalize_label(raw))
    }

    /// Resolves `raw`, falling back to the fallback label.
    pub fn resolve_or_fallback(&self, raw: &str) -> Label {
        self.resolve(raw).cloned().unwrap_or_else(|| self.fallback.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(|t| t.text.as_str()).collect()
    }

    #[test]
    fn tokenize_empty() {
        assert!(tokenize("").is_empty());
        assert!(tokenize(" \n\t ").is_empty());
    }

    #[test]
    fn tokenize_chief_complaint() {
        let tokens = tokenize("Chief Complaint: chest pain");
        assert_eq!(texts(&tokens), ["Chief", "Complaint:", "chest", "pain"]);
        assert_eq!(
            tokens[0],
            Token {
                text: "Chief".into(),
                char_start: 0,
                char_end: 5
            }
        );
    }

    #[test]
    fn tokenize_multibyte_offsets() {
        let text = "fièvre  38°C\nok";
        let tokens = tokenize(text);
        assert_eq!(texts(&tokens), ["fièvre", "38°C", "ok"]);
        for t in &tokens {
            assert_eq!(&text[t.char_start..t.char_end], t.text);
        }
    }

    #[test]
    fn span_for_char_examples() {
        let note = ClinicalNote::new("n", "ab cd");
        assert_eq!(span_for_char(&note, 0).unwrap(), 0);
        assert_eq!(span_for_char(&note, 3).unwrap(), 1);
        assert_eq!(span_for_char(&note, 2).unwrap(), 1);
        assert!(matches!(
            span_for_char(&note, 5),
            Err(Error::OffsetOutOfRange { offset: 5, len: 5 })
        ));
    }

    #[test]
    fn span_for_char_trailing_whitespace() {
        let note = ClinicalNote::new("n", "ab  ");
        assert_eq!(span_for_char(&note, 3).unwrap(), 1);
    }

    #[test]
    fn default_ontology_has_observed_labels() {
        let ont = LabelOntology::default();
        for name in [
            "ALLERGIES",
            "SEX",
            "OTHER",
            "SERVICE",
            "HISTORY OF PRESENT ILLNESS",
            "MAJOR SURGICAL OR INVASIVE PROCEDURE",
            "FAMILY HISTORY",
            "DISCHARGE DIAGNOSIS",
            "PHYSICAL EXAM",
            "PERTINENT RESULTS",
            "ATTENDING",
            "CHIEF COMPLAINT",
            "PAST MEDICAL HISTORY",
            "MEDICATIONS",
            "DISCHARGE INSTRUCTIONS",
            "HOSPITAL COURSE",
        ] {
            assert!(ont.contains(&Label::canonical(name)), "{name}");
        }
        assert_eq!(ont.fallback().as_str(), "OTHER");
    }

    #[test]
    fn resolve_is_case_insensitive() {
        let ont = LabelOntology::default();
        let hpi = Label::canonical("HISTORY OF PRESENT ILLNESS");
        assert_eq!(ont.resolve("history of present illness"), Some(&hpi));
        assert_eq!(ont.resolve("  History   of present Illness "), Some(&hpi));
        assert_eq!(ont.resolve("hpi"), Some(&hpi));
        assert_eq!(ont.resolve("NOT_A_SECTION"), None);
        assert_eq!(ont.resolve_or_fallback("NOT_A_SECTION").as_str(), "OTHER");
    }

    #[test]
    fn duplicate_alias_rejected() {
        let records = vec![
            OntologyRecord {
                label: "A".into(),
                aliases: vec!["hdr".into()],
                fallback: false,
            },
            OntologyRecord {
                label: "B".into(),
                aliases: vec!["HDR".into()],
                fallback: false,
            },
            OntologyRecord {
                label: "OTHER".into(),
                aliases: vec![],
                fallback: true,
            },
        ];
        assert!(matches!(
            LabelOntology::from_records(records),
            Err(Error::DuplicateAlias { .. })
        ));
    }

    #[test]
    fn missing_fallback_rejected() {
        let records = vec![OntologyRecord {
            label: "A".into(),
            aliases: vec![],
            fallback: false,
        }];
        assert!(matches!(
            LabelOntology::from_records(records),
            Err(Error::InvalidOntology(_))
        ));
    }

    #[test]
    fn records_round_trip() {
        let ont = LabelOntology::default();
        let again = LabelOntology::from_records(ont.to_records()).unwrap();
        assert_eq!(ont, again);
    }

    #[test]
    fn spans_from_boundaries_fills_prefix() {
        let tokens = tokenize("intro text ALLERGIES: none");
        let spans = spans_from_boundaries(
            &tokens,
            &[(2, Label::canonical("ALLERGIES"))],
            &Label::canonical("OTHER"),
        );
        assert_eq!(spans.len(), 2);
        assert_eq!(spans[0].label.as_str(), "OTHER");
        assert_eq!((spans[0].token_start, spans[0].token_end), (0, 2));
        assert_eq!((spans[1].token_start, spans[1].token_end), (2, 4));
        validate_spans(&tokens, &spans).unwrap();
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn note_text() -> impl Strategy<Value = String> {
            proptest::collection::vec(
                prop_oneof![
                    Just(" ".to_string()),
                    Just("\n".to_string()),
                    Just("\t".to_string()),
                    "[a-zA-Z:.,0-9é]{1,6}",
                ],
                0..30,
            )
            .prop_map(|parts| parts.concat())
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]

            #[test]
            fn retokenizing_joined_tokens_is_stable(text in note_text()) {
                let tokens = tokenize(&text);
                let joined = texts(&tokens).join(" ");
                let again = tokenize(&joined);
                prop_assert_eq!(texts(&tokens), texts(&again));
                prop_assert_eq!(tokenize(&text), tokens);
            }

            #[test]
            fn tokens_are_disjoint_and_ascending(text in note_text()) {
                let tokens = tokenize(&text);
                for pair in tokens.windows(2) {
                    prop_assert!(pair[0].char_end < pair[1].char_start);
                }
                for t in &tokens {
                    prop_assert_eq!(&text[t.char_start..t.char_end], t.text.as_str());
                    prop_assert!(!t.text.chars().any(char::is_whitespace));
                }
            }

            #[test]
            fn span_for_char_matches_linear_scan_and_is_monotone(text in note_text()) {
                prop_assume!(!text.is_empty());
                let note = ClinicalNote::new("n", text.clone());
                let mut prev = 0;
                for offset in 0..text.len() {
                    let got = span_for_char(&note, offset).unwrap();
                    let oracle = note
                        .tokens()
                        .iter()
                        .position(|t| offset < t.char_end)
                        .unwrap_or(note.tokens().len());
                    prop_assert_eq!(got, oracle);
                    prop_assert!(got >= prev);
                    prev = got;
                }
            }
        }
    }
}

//! Deterministic synthetic corpora shaped like the hospital-course data.
//!
//! MIMIC-derived notes cannot be redistributed, so fixtures, tests and demos
//! run on these generators instead.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::SentenceCorpus;
use crate::model::{Label, LabelOntology, LabeledSentence};

/// Filler vocabulary. None of these words starts a header alias of the
/// default ontology.
const BODY_WORDS: &[&str] = &[
    "patient",
    "stable",
    "noted",
    "daily",
    "mg",
    "denies",
    "fever",
    "chest",
    "pain",
    "tolerated",
    "well",
    "ambulating",
    "reports",
    "improved",
    "blood",
    "pressure",
    "normal",
    "left",
    "right",
    "given",
    "overnight",
    "afebrile",
    "cough",
    "nausea",
    "vomiting",
    "tablet",
    "twice",
    "weeks",
    "mild",
    "edema",
    "bilateral",
    "lungs",
    "clear",
    "heart",
    "regular",
    "rate",
    "rhythm",
    "abdomen",
    "soft",
    "nontender",
    "creatinine",
    "elevated",
    "started",
    "on",
    "with",
    "without",
    "and",
    "the",
    "was",
    "of",
    "to",
    "for",
    "in",
    "a",
];

fn body_sentence(rng: &mut ChaCha8Rng, min_words: usize, max_words: usize) -> String {
    let n = rng.gen_range(min_words..=max_words);
    let mut words: Vec<&str> = (0..n).map(|_| *BODY_WORDS.choose(rng).unwrap()).collect();
    // Capitalised first word, period at the end, like extracted prose.
    let first = words[0];
    let capital = first[..1].to_uppercase() + &first[1..];
    words[0] = &capital;
    let mut s = words.join(" ");
    s.push('.');
    s
}

fn header_surface(ontology: &LabelOntology, label: &Label) -> String {
    ontology
        .aliases(label)
        .first()
        .cloned()
        .unwrap_or_else(|| label.to_string())
}

/// Notes in which every section opens with a canonical header and colon,
/// e.g. `Chief Complaint: chest pain.`. Adjacent sections always carry
/// different labels and the fallback label is never used.
pub fn header_explicit_corpus(n_notes: usize, seed: u64, ontology: &LabelOntology) -> SentenceCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let section_labels: Vec<&Label> = ontology.labels().iter().filter(|l| *l != ontology.fallback()).collect();
    let mut sentences = Vec::new();
    for n in 0..n_notes {
        let note_id = format!("hdr-{n:04}");
        let n_sections = rng.gen_range(1..=8);
        let mut prev: Option<&Label> = None;
        let mut position = 0;
        for _ in 0..n_sections {
            let label = loop {
                let candidate = *section_labels.choose(&mut rng).unwrap();
                if Some(candidate) != prev {
                    break candidate;
                }
            };
            prev = Some(label);
            let n_sent = rng.gen_range(1..=4);
            for i in 0..n_sent {
                let body = body_sentence(&mut rng, 2, 10);
                let text = if i == 0 {
                    format!("{}: {}", header_surface(ontology, label), body)
                } else {
                    body
                };
                sentences.push(LabeledSentence {
                    sentence_id: format!("{note_id}:{position}"),
                    note_id: note_id.clone(),
                    position,
                    text,
                    label: label.clone(),
                });
                position += 1;
            }
        }
    }
    SentenceCorpus::new(sentences, ontology.clone()).expect("generated corpus is valid")
}

/// Sentences-per-note histogram of the full-scale fixture:
/// 1,000 notes, 17,487 sentences, mode 18.
pub const FULL_SCALE_SENTENCE_COUNTS: &[(usize, usize)] =
    &[(14, 50), (15, 70), (16, 130), (17, 123), (18, 427), (19, 120), (20, 80)];

/// Typical order of discharge-summary sections, with how many sentences each
/// section tends to hold.
const SECTION_TEMPLATE: &[(&str, usize)] = &[
    ("SEX", 1),
    ("SERVICE", 1),
    ("ALLERGIES", 1),
    ("ATTENDING", 1),
    ("CHIEF COMPLAINT", 1),
    ("MAJOR SURGICAL OR INVASIVE PROCEDURE", 1),
    ("HISTORY OF PRESENT ILLNESS", 3),
    ("PAST MEDICAL HISTORY", 2),
    ("FAMILY HISTORY", 1),
    ("PHYSICAL EXAM", 2),
    ("PERTINENT RESULTS", 2),
    ("HOSPITAL COURSE", 4),
    ("MEDICATIONS", 2),
    ("DISCHARGE DIAGNOSIS", 1),
    ("DISCHARGE INSTRUCTIONS", 2),
];

/// A corpus with the same note and sentence counts as the labeled hospital
/// course data: 1,000 notes and 17,487 sentences.
pub fn full_scale_corpus(seed: u64) -> SentenceCorpus {
    let ontology = LabelOntology::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts: Vec<usize> = FULL_SCALE_SENTENCE_COUNTS
        .iter()
        .flat_map(|(n, notes)| std::iter::repeat(*n).take(*notes))
        .collect();
    counts.shuffle(&mut rng);

    let mut sentences = Vec::new();
    for (n, count) in counts.into_iter().enumerate() {
        let note_id = format!("note-{n:04}");
        let labels = template_labels(count, &mut rng);
        for (position, label) in labels.into_iter().enumerate() {
            let text = if rng.gen_bool(0.1) {
                // short header-like fragment
                format!("{}:", label.to_lowercase())
            } else {
                body_sentence(&mut rng, 3, 18)
            };
            sentences.push(LabeledSentence {
                sentence_id: format!("{note_id}:{position}"),
                note_id: note_id.clone(),
                position,
                text,
                label: Label::canonical(label),
            });
        }
    }
    SentenceCorpus::new(sentences, ontology).expect("generated corpus is valid")
}

/// Expands the section template to exactly `count` sentence labels by
/// growing or shrinking the multi-sentence sections.
fn template_labels(count: usize, rng: &mut ChaCha8Rng) -> Vec<&'static str> {
    let mut sizes: Vec<usize> = SECTION_TEMPLATE.iter().map(|(_, n)| *n).collect();
    let mut total: usize = sizes.iter().sum();
    while total < count {
        let i = rng.gen_range(0..sizes.len());
        sizes[i] += 1;
        total += 1;
    }
    while total > count {
        let i = rng.gen_range(0..sizes.len());
        if sizes[i] > 0 {
            sizes[i] -= 1;
            total -= 1;
        }
    }
    SECTION_TEMPLATE
        .iter()
        .zip(sizes)
        .flat_map(|((label, _), n)| std::iter::repeat(*label).take(n))
        .collect()
}

/// A sentence-classification corpus where every label owns a disjoint
/// vocabulary, so the classes are linearly separable on word counts.
pub fn separable_corpus(n_classes: usize, n_notes: usize, sentences_per_note: usize, seed: u64) -> SentenceCorpus {
    let ontology = LabelOntology::default();
    let labels: Vec<Label> = ontology
        .labels()
        .iter()
        .filter(|l| *l != ontology.fallback())
        .take(n_classes)
        .cloned()
        .collect();
    assert_eq!(labels.len(), n_classes, "ontology has too few labels");
    let vocab: Vec<Vec<String>> = (0..n_classes)
        .map(|c| (0..6).map(|w| format!("c{c}w{w}")).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sentences = Vec::new();
    for n in 0..n_notes {
        let note_id = format!("sep-{n:04}");
        for position in 0..sentences_per_note {
            let class = rng.gen_range(0..n_classes);
            let len = rng.gen_range(2..=6);
            let text = (0..len)
                .map(|_| vocab[class].choose(&mut rng).unwrap().as_str())
                .collect::<Vec<_>>()
                .join(" ");
            sentences.push(LabeledSentence {
                sentence_id: format!("{note_id}:{position}"),
                note_id: note_id.clone(),
                position,
                text,
                label: labels[class].clone(),
            });
        }
    }
    SentenceCorpus::new(sentences, ontology).expect("generated corpus is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tag_statistics, DEFAULT_MIN_TAG_COUNT};

    #[test]
    fn full_scale_counts() {
        let corpus = full_scale_corpus(1);
        assert_eq!(corpus.note_count(), 1000);
        assert_eq!(corpus.sentences().len(), 17_487);
        let stats = tag_statistics(&corpus);
        assert!((stats.mean_tags_per_note() - 17.487).abs() < 1e-12);
        assert_eq!(stats.tags_per_note_mode(), Some(18));
        let frequent = stats.frequent_labels(DEFAULT_MIN_TAG_COUNT);
        assert!(frequent.values().all(|c| *c >= 50));
    }

    #[test]
    fn generators_are_deterministic() {
        let ont = LabelOntology::default();
        let a = header_explicit_corpus(5, 3, &ont);
        let b = header_explicit_corpus(5, 3, &ont);
        assert_eq!(a.sentences(), b.sentences());
        assert_eq!(
            separable_corpus(3, 4, 5, 9).sentences(),
            separable_corpus(3, 4, 5, 9).sentences()
        );
    }

    #[test]
    fn body_words_never_start_an_alias() {
        let ont = LabelOntology::default();
        for word in BODY_WORDS {
            assert!(ont.resolve(word).is_none(), "{word}");
        }
    }
}

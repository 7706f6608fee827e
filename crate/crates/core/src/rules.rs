//! Rule-based segmentation: a regex header matcher and a lexicon-driven
//! sectionizer built on the same engine.

use std::collections::HashMap;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{spans_from_boundaries, token_index_at, ClinicalNote, Label, LabelOntology, SectionSpan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatcherOptions {
    pub case_insensitive: bool,
    /// Header must be followed by a colon.
    pub require_colon: bool,
    /// Headers only open at the first non-blank character of a line.
    pub line_anchored: bool,
    /// Any run of spaces or tabs matches the single spaces inside an alias.
    pub flexible_whitespace: bool,
    /// Joins a line holding a colon-less alias prefix with its continuation.
    pub join_multiline: bool,
}

impl MatcherOptions {
    /// The plain regex header matcher.
    pub fn regex() -> Self {
        MatcherOptions {
            case_insensitive: true,
            require_colon: true,
            line_anchored: true,
            flexible_whitespace: false,
            join_multiline: false,
        }
    }

    /// The lexicon sectionizer: whitespace-normalized aliases, colon optional.
    pub fn sectionizer() -> Self {
        MatcherOptions {
            case_insensitive: true,
            require_colon: false,
            line_anchored: true,
            flexible_whitespace: true,
            join_multiline: false,
        }
    }
}

impl Default for MatcherOptions {
    fn default() -> Self {
        Self::sectionizer()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleMethod {
    Regex,
    Rules,
}

impl RuleMethod {
    pub fn id(self) -> &'static str {
        match self {
            RuleMethod::Regex => "regex",
            RuleMethod::Rules => "rules",
        }
    }

    pub fn options(self) -> MatcherOptions {
        match self {
            RuleMethod::Regex => MatcherOptions::regex(),
            RuleMethod::Rules => MatcherOptions::sectionizer(),
        }
    }
}

#[derive(Clone, Debug)]
struct AliasPattern {
    alias: String,
    label: Label,
    /// Ontology order of the alias, used to break length ties.
    rank: usize,
    regex: Regex,
}

#[derive(Clone, Debug)]
pub struct HeaderMatcher {
    patterns: Vec<AliasPattern>,
    options: MatcherOptions,
    fallback: Label,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub note_id: String,
    pub spans: Vec<SectionSpan>,
    pub method: String,
}

/// A header found in a note.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeaderMatch {
    pub char_start: usize,
    pub alias: String,
    pub label: Label,
}

pub fn compile_matcher(ontology: &LabelOntology, options: MatcherOptions) -> Result<HeaderMatcher> {
    let mut owners: HashMap<String, Label> = HashMap::new();
    let mut patterns = Vec::new();
    for label in ontology.labels() {
        let mut surfaces: Vec<String> = ontology.aliases(label).to_vec();
        if label != ontology.fallback() {
            surfaces.push(label.to_string());
        }
        for alias in surfaces {
            let words: Vec<&str> = alias.split_whitespace().collect();
            let key = if options.case_insensitive {
                words.join(" ").to_lowercase()
            } else {
                words.join(" ")
            };
            match owners.get(&key) {
                Some(owner) if owner != label => {
                    return Err(Error::DuplicateAlias {
                        alias,
                        first: owner.to_string(),
                        second: label.to_string(),
                    })
                }
                Some(_) => continue,
                None => {}
            }
            owners.insert(key, label.clone());
            let sep = if options.flexible_whitespace { "[ \t]+" } else { " " };
            let body = words.iter().map(|w| regex::escape(w)).collect::<Vec<_>>().join(sep);
            let regex = RegexBuilder::new(&format!("^(?:{body})([ \t]*:)?"))
                .case_insensitive(options.case_insensitive)
                .build()
                .map_err(|e| Error::InvalidOntology(format!("alias {alias:?}: {e}")))?;
            patterns.push(AliasPattern {
                alias: words.join(" "),
                label: label.clone(),
                rank: patterns.len(),
                regex,
            });
        }
    }
    Ok(HeaderMatcher {
        patterns,
        options,
        fallback: ontology.fallback().clone(),
    })
}

impl HeaderMatcher {
    pub fn options(&self) -> MatcherOptions {
        self.options
    }

    /// Longest alias matching at the start of `text`; returns the pattern and
    /// the matched byte length.
    fn match_at(&self, text: &str) -> Option<(&AliasPattern, usize)> {
        let mut best: Option<(&AliasPattern, usize)> = None;
        for pattern in &self.patterns {
            let Some(caps) = pattern.regex.captures(text) else {
                continue;
            };
            let whole = caps.get(0).unwrap();
            let has_colon = caps.get(1).is_some();
            if self.options.require_colon && !has_colon {
                continue;
            }
            if !has_colon {
                // The alias must end on a word boundary.
                if let Some(next) = text[whole.end()..].chars().next() {
                    if next.is_alphanumeric() || next == '_' {
                        continue;
                    }
                }
            }
            let better = match best {
                None => true,
                Some((b, _)) => {
                    let (len, b_len) = (pattern.alias.chars().count(), b.alias.chars().count());
                    len > b_len || (len == b_len && pattern.rank < b.rank)
                }
            };
            if better {
                best = Some((pattern, whole.end()));
            }
        }
        best
    }

    /// All header matches in `text`, in order.
    pub fn find_headers(&self, text: &str) -> Vec<HeaderMatch> {
        let lines: Vec<(usize, &str)> = line_offsets(text);
        let mut found = Vec::new();
        let mut skip_line = false;
        for (i, (line_start, line)) in lines.iter().enumerate() {
            if std::mem::take(&mut skip_line) {
                continue;
            }
            let mut candidates = token_starts(line);
            if self.options.line_anchored {
                candidates.truncate(1);
            }
            let mut covered_until = 0;
            for pos in candidates {
                if pos < covered_until {
                    continue;
                }
                if let Some((pattern, len)) = self.match_at(&line[pos..]) {
                    found.push(HeaderMatch {
                        char_start: line_start + pos,
                        alias: pattern.alias.clone(),
                        label: pattern.label.clone(),
                    });
                    covered_until = pos + len;
                    continue;
                }
                if self.options.join_multiline && pos == first_non_blank(line).unwrap_or(usize::MAX) {
                    if let Some((_, next)) = lines.get(i + 1) {
                        let head = line[pos..].trim_end();
                        let joined = format!("{head} {}", next.trim_start());
                        if let Some((pattern, len)) = self.match_at(&joined) {
                            if len > head.len() + 1 {
                                found.push(HeaderMatch {
                                    char_start: line_start + pos,
                                    alias: pattern.alias.clone(),
                                    label: pattern.label.clone(),
                                });
                                skip_line = true;
                                break;
                            }
                        }
                    }
                }
            }
        }
        found
    }
}

fn line_offsets(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = 0;
    for line in text.split('\n') {
        out.push((start, line));
        start += line.len() + 1;
    }
    out
}

fn first_non_blank(line: &str) -> Option<usize> {
    line.char_indices().find(|(_, c)| !c.is_whitespace()).map(|(i, _)| i)
}

fn token_starts(line: &str) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut prev_ws = true;
    for (i, c) in line.char_indices() {
        let ws = c.is_whitespace();
        if prev_ws && !ws {
            starts.push(i);
        }
        prev_ws = ws;
    }
    starts
}

/// Segments a note at header lines. Text before the first header becomes a
/// fallback-labeled span.
pub fn segment_rules(matcher: &HeaderMatcher, note: &ClinicalNote, method: &str) -> SegmentationResult {
    let tokens = note.tokens();
    let boundaries: Vec<(usize, Label)> = matcher
        .find_headers(&note.text)
        .into_iter()
        .map(|h| (token_index_at(tokens, h.char_start), h.label))
        .collect();
    SegmentationResult {
        note_id: note.note_id.clone(),
        spans: spans_from_boundaries(tokens, &boundaries, &matcher.fallback),
        method: method.to_string(),
    }
}

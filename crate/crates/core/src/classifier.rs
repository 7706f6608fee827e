//! Bag-of-words multinomial logistic regression trained with plain
//! mini-batch gradient descent.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Label, LabelOntology, LabeledSentence};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BowVocabulary {
    index: BTreeMap<String, usize>,
    terms: Vec<String>,
    pub min_count: usize,
    pub lowercased: bool,
}

impl BowVocabulary {
    /// Terms occurring at least `min_count` times in `texts`, indexed in
    /// sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize, lowercased: bool) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for tok in text.split_whitespace() {
                *counts.entry(normalize(tok, lowercased)).or_insert(0) += 1;
            }
        }
        let terms: Vec<String> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .map(|(t, _)| t)
            .collect();
        Self::from_terms(terms, min_count, lowercased)
    }

    fn from_terms(terms: Vec<String>, min_count: usize, lowercased: bool) -> Self {
        let index = terms.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        BowVocabulary {
            index,
            terms,
            min_count,
            lowercased,
        }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn get(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }
}

fn normalize(tok: &str, lowercased: bool) -> String {
    if lowercased {
        tok.to_lowercase()
    } else {
        tok.to_string()
    }
}

/// Sparse term counts; the bias feature is implicit and always 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Features {
    pub counts: BTreeMap<usize, f64>,
}

impl Features {
    /// Dense vector of length `dim + 1` with the bias in the last slot.
    pub fn dense(&self, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim + 1];
        for (i, c) in &self.counts {
            v[*i] = *c;
        }
        v[dim] = 1.0;
        v
    }
}

pub fn featurize(vocab: &BowVocabulary, text: &str) -> Features {
    let mut counts = BTreeMap::new();
    for tok in text.split_whitespace() {
        if let Some(i) = vocab.get(&normalize(tok, vocab.lowercased)) {
            *counts.entry(i).or_insert(0.0) += 1.0;
        }
    }
    Features { counts }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2_lambda: f64,
    /// 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub min_count: usize,
    pub lowercase: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            epochs: 50,
            l2_lambda: 1e-4,
            batch_size: 32,
            seed: 42,
            min_count: 2,
            lowercase: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning_rate {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("l2_lambda {}", self.l2_lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRegModel {
    /// Row-major `labels.len() x (vocab.len() + 1)`; last column is the bias.
    pub weights: Vec<f64>,
    pub vocabulary: BowVocabulary,
    pub labels: Vec<Label>,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub label: Label,
    pub probabilities: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: LogRegModel,
    /// Full training-set loss after each epoch.
    pub train_losses: Vec<f64>,
    pub validation_losses: Vec<f64>,
    /// Epoch (1-based) whose weights were kept.
    pub best_epoch: usize,
}

impl TrainReport {
    pub fn final_train_loss(&self) -> f64 {
        *self.train_losses.last().expect("at least one epoch")
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn logits(weights: &[f64], n_labels: usize, dim: usize, x: &Features) -> Vec<f64> {
    let stride = dim + 1;
    (0..n_labels)
        .map(|c| {
            let row = &weights[c * stride..(c + 1) * stride];
            row[dim] + x.counts.iter().map(|(i, v)| row[*i] * v).sum::<f64>()
        })
        .collect()
}

/// Mean softmax cross-entropy plus `(l2 / 2) * ||W||^2`, and its gradient
/// with respect to the row-major weights.
pub fn loss_and_gradient(
    weights: &[f64],
    n_labels: usize,
    dim: usize,
    examples: &[(&Features, usize)],
    l2: f64,
) -> (f64, Vec<f64>) {
    let stride = dim + 1;
    let mut grad = vec![0.0; weights.len()];
    let mut loss = 0.0;
    let scale = 1.0 / examples.len().max(1) as f64;
    for (x, y) in examples {
        let z = logits(weights, n_labels, dim, x);
        let p = softmax(&z);
        loss -= p[*y].max(f64::MIN_POSITIVE).ln() * scale;
        for c in 0..n_labels {
            let err = (p[c] - if c == *y { 1.0 } else { 0.0 }) * scale;
            let row = &mut grad[c * stride..(c + 1) * stride];
            for (i, v) in &x.counts {
                row[*i] += err * v;
            }
            row[dim] += err;
        }
    }
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    loss += 0.5 * l2 * sq;
    for (g, w) in grad.iter_mut().zip(weights) {
        *g += l2 * w;
    }
    (loss, grad)
}

fn dataset_loss(weights: &[f64], n_labels: usize, dim: usize, examples: &[(&Features, usize)], l2: f64) -> f64 {
    let mut loss = 0.0;
    for (x, y) in examples {
        let p = softmax(&logits(weights, n_labels, dim, x));
        loss -= p[*y].max(f64::MIN_POSITIVE).ln();
    }
    loss / examples.len().max(1) as f64 + 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>()
}

/// Trains on `train`; when `validation` is non-empty the weights of the epoch
/// with the lowest validation loss are kept.
pub fn train(
    train: &[LabeledSentence],
    validation: &[LabeledSentence],
    ontology: &LabelOntology,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    let labels: Vec<Label> = ontology
        .labels()
        .iter()
        .filter(|l| train.iter().any(|s| &s.label == *l))
        .cloned()
        .collect();
    if labels.len() < 2 {
        return Err(Error::DegenerateFold(
            labels.first().map(Label::to_string).unwrap_or_else(|| "none".into()),
        ));
    }
    let vocab = BowVocabulary::build(
        train.iter().map(|s| s.text.as_str()),
        config.min_count,
        config.lowercase,
    );
    let dim = vocab.len();
    let n_labels = labels.len();
    let encode = |sentences: &[LabeledSentence]| -> Vec<(Features, usize)> {
        sentences
            .iter()
            .filter_map(|s| {
                labels
                    .iter()
                    .position(|l| *l == s.label)
                    .map(|y| (featurize(&vocab, &s.text), y))
            })
            .collect()
    };
    let train_set = encode(train);
    let val_set = encode(validation);
    let train_refs: Vec<(&Features, usize)> = train_set.iter().map(|(x, y)| (x, *y)).collect();
    let val_refs: Vec<(&Features, usize)> = val_set.iter().map(|(x, y)| (x, *y)).collect();

    let mut weights = vec![0.0; n_labels * (dim + 1)];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_refs.len()).collect();
    let batch = if config.batch_size == 0 {
        train_refs.len()
    } else {
        config.batch_size
    };

    let mut train_losses = Vec::with_capacity(config.epochs);
    let mut validation_losses = Vec::new();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch.max(1)) {
            let examples: Vec<(&Features, usize)> = chunk.iter().map(|i| train_refs[*i]).collect();
            let (_, grad) = loss_and_gradient(&weights, n_labels, dim, &examples, config.l2_lambda);
            for (w, g) in weights.iter_mut().zip(&grad) {
                *w -= config.learning_rate * g;
            }
        }
        train_losses.push(dataset_loss(&weights, n_labels, dim, &train_refs, config.l2_lambda));
        if !val_refs.is_empty() {
            let v = dataset_loss(&weights, n_labels, dim, &val_refs, config.l2_lambda);
            validation_losses.push(v);
            if best.as_ref().map_or(true, |(b, _, _)| v < *b) {
                best = Some((v, epoch, weights.clone()));
            }
        }
    }
    let (best_epoch, weights) = match best {
        Some((_, epoch, w)) => (epoch, w),
        None => (config.epochs, weights),
    };
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::InvalidConfig("training diverged to non-finite weights".into()));
    }
    Ok(TrainReport {
        model: LogRegModel {
            weights,
            vocabulary: vocab,
            labels,
            config: *config,
        },
        train_losses,
        validation_losses,
        best_epoch,
    })
}

impl LogRegModel {
    fn dim(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn probabilities(&self, text: &str) -> Vec<f64> {
        let x = featurize(&self.vocabulary, text);
        softmax(&logits(&self.weights, self.labels.len(), self.dim(), &x))
    }

    /// Argmax label; ties go to the lowest label index.
    pub fn predict(&self, text: &str) -> Prediction {
        let probabilities = self.probabilities(text);
        let mut best = 0;
        for (i, p) in probabilities.iter().enumerate() {
            if *p > probabilities[best] {
                best = i;
            }
        }
        Prediction {
            label: self.labels[best].clone(),
            probabilities,
        }
    }

    /// Versioned text format: header lines, vocabulary, then row-major
    /// weights as shortest round-trip decimals.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        out.push_str("cnseg-logreg 1\n");
        let _ = writeln!(
            out,
            "labels\t{}",
            self.labels.iter().map(Label::as_str).collect::<Vec<_>>().join("\t")
        );
        let _ = writeln!(out, "dims\t{}\t{}", self.labels.len(), self.dim());
        let _ = writeln!(
            out,
            "config\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            c.learning_rate, c.epochs, c.l2_lambda, c.batch_size, c.seed, c.min_count, c.lowercase
        );
        for term in self.vocabulary.terms() {
            let _ = writeln!(out, "term\t{term}");
        }
        let stride = self.dim() + 1;
        for row in self.weights.chunks(stride) {
            let cells: Vec<String> = row.iter().map(|w| format!("{w:?}")).collect();
            let _ = writeln!(out, "w\t{}", cells.join("\t"));
        }
        out
    }

    pub fn from_text(body: &str) -> Result<Self> {
        let bad = |msg: &str| Error::ModelFormat(msg.to_string());
        let mut lines = body.lines();
        if lines.next() != Some("cnseg-logreg 1") {
            return Err(bad("missing or unsupported version header"));
        }
        let fields = |line: Option<&str>, key: &str| -> Result<Vec<String>> {
            let line = line.ok_or_else(|| bad(&format!("missing {key} line")))?;
            let mut parts = line.split('\t');
            if parts.next() != Some(key) {
                return Err(bad(&format!("expected {key} line")));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let labels: Vec<Label> = fields(lines.next(), "labels")?
            .iter()
            .map(|l| Label::canonical(l))
            .collect();
        let dims = fields(lines.next(), "dims")?;
        let parse_usize = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad integer {s:?}")));
        let (n_labels, dim) = match dims.as_slice() {
            [c, v] => (parse_usize(c)?, parse_usize(v)?),
            _ => return Err(bad("dims needs two values")),
        };
        if n_labels != labels.len() {
            return Err(bad("label count does not match dims"));
        }
        let cfg = fields(lines.next(), "config")?;
        if cfg.len() != 7 {
            return Err(bad("config needs seven values"));
        }
        let parse_f64 = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number {s:?}")));
        let config = TrainConfig {
            learning_rate: parse_f64(&cfg[0])?,
            epochs: parse_usize(&cfg[1])?,
            l2_lambda: parse_f64(&cfg[2])?,
            batch_size: parse_usize(&cfg[3])?,
            seed: cfg[4].parse().map_err(|_| bad("bad seed"))?,
            min_count: parse_usize(&cfg[5])?,
            lowercase: cfg[6].parse().map_err(|_| bad("bad lowercase flag"))?,
        };
        let mut terms = Vec::with_capacity(dim);
        for _ in 0..dim {
            let f = fields(lines.next(), "term")?;
            terms.push(f.join("\t"));
        }
        let mut weights = Vec::with_capacity(n_labels * (dim + 1));
        for _ in 0..n_labels {
            let row = fields(lines.next(), "w")?;
            if row.len() != dim + 1 {
                return Err(bad("weight row has the wrong width"));
            }
            for cell in row {
                let w = parse_f64(&cell)?;
                if !w.is_finite() {
                    return Err(bad("non-finite weight"));
                }
                weights.push(w);
            }
        }
        Ok(LogRegModel {
            weights,
            vocabulary: BowVocabulary::from_terms(terms, config.min_count, config.lowercase),
            labels,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&body)
    }
}

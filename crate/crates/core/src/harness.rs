//! Experiment orchestration: runs methods over cross-validation folds,
//! aggregates scores into a results table and writes report files.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{self, TrainConfig};
use crate::corpus::{
    load_sentence_corpus, make_splits, sentence_token_starts, synthesize_freetext, tag_statistics, FoldRun,
    FreetextCorpus, LabelMode, SentenceCorpus, SplitPlan, TagStatistics, DEFAULT_FOLDS, DEFAULT_MIN_TAG_COUNT,
};
use crate::error::{Error, Result};
use crate::llm::{
    build_prompt, call_many, parse_classification, parse_segmentation, DecodingParams, HttpClient, LlmClient,
    LlmEndpoint, MockBehavior, MockClient, ParseStatus, PromptInput, ResponseCache, TaskKind,
};
use crate::metrics::{avg_f1, boundaries_of, micro_boundary_prf, round_half_up, weighted_f1, BoundarySet};
use crate::model::{ClinicalNote, Label, LabelOntology, LabeledSentence, SectionSpan};
use crate::rules::{compile_matcher, segment_rules, RuleMethod, SegmentationResult};
use crate::stats::{one_way_anova, AnovaResult};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MethodSpec {
    Rules,
    Regex,
    LogReg,
    /// Emits the gold annotation; an upper bound and a scoring sanity check.
    Gold,
    /// Offline stand-in for an LLM endpoint.
    Mock,
    Llm(String),
}

impl MethodSpec {
    pub fn id(&self) -> String {
        match self {
            MethodSpec::Rules => "rules".into(),
            MethodSpec::Regex => "regex".into(),
            MethodSpec::LogReg => "logreg".into(),
            MethodSpec::Gold => "gold".into(),
            MethodSpec::Mock => "mock".into(),
            MethodSpec::Llm(name) => format!("llm:{name}"),
        }
    }

    pub fn is_llm(&self) -> bool {
        matches!(self, MethodSpec::Mock | MethodSpec::Llm(_))
    }
}

impl std::str::FromStr for MethodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "rules" => MethodSpec::Rules,
            "regex" => MethodSpec::Regex,
            "logreg" => MethodSpec::LogReg,
            "gold" => MethodSpec::Gold,
            "mock" => MethodSpec::Mock,
            other => match other.strip_prefix("llm:") {
                Some(name) if !name.is_empty() => MethodSpec::Llm(name.to_string()),
                _ => return Err(Error::InvalidConfig(format!("unknown method {other:?}"))),
            },
        })
    }
}

impl TryFrom<String> for MethodSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MethodSpec> for String {
    fn from(m: MethodSpec) -> String {
        m.id()
    }
}

impl std::fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.id())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskSelection {
    Sentences,
    Freetext,
    #[default]
    Both,
}

impl TaskSelection {
    pub fn sentences(self) -> bool {
        self != TaskSelection::Freetext
    }

    pub fn freetext(self) -> bool {
        self != TaskSelection::Sentences
    }
}

fn default_k() -> usize {
    DEFAULT_FOLDS
}
fn default_out() -> PathBuf {
    PathBuf::from("results")
}
fn default_min_tag_count() -> usize {
    DEFAULT_MIN_TAG_COUNT
}

/// Experiment description, read from TOML. Relative paths are resolved
/// against the directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Labeled sentence corpus (JSONL).
    pub sentences: PathBuf,
    /// Optional pre-built freetext corpus; synthesized from `sentences` when absent.
    #[serde(default)]
    pub freetext: Option<PathBuf>,
    /// Ontology records (JSONL); the built-in lexicon when absent.
    #[serde(default)]
    pub ontology: Option<PathBuf>,
    pub methods: Vec<MethodSpec>,
    #[serde(default)]
    pub tasks: TaskSelection,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Response cache directory for LLM methods.
    #[serde(default)]
    pub cache: Option<PathBuf>,
    /// Behaviour file for the `mock` method; heuristic when absent.
    #[serde(default)]
    pub mock_script: Option<PathBuf>,
    /// Reject unknown corpus labels instead of mapping them to the fallback.
    #[serde(default)]
    pub strict_labels: bool,
    #[serde(default = "default_min_tag_count")]
    pub min_tag_count: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub decoding: DecodingParams,
    #[serde(default)]
    pub endpoints: Vec<LlmEndpoint>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml_str(body: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut config: ExperimentConfig = toml::from_str(body)?;
        config.base_dir = base_dir.into();
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&body, base).map_err(|e| e.context(format!("config {}", path.display())))
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("no methods configured".into()));
        }
        let mut seen = HashSet::new();
        for m in &self.methods {
            if !seen.insert(m) {
                return Err(Error::InvalidConfig(format!("method {m} listed twice")));
            }
            if let MethodSpec::Llm(name) = m {
                if self.endpoint(name).is_none() {
                    return Err(Error::InvalidConfig(format!(
                        "method {m} has no matching [[endpoints]] entry"
                    )));
                }
            }
        }
        if self.k < 3 {
            return Err(Error::InvalidConfig(format!("k must be at least 3, got {}", self.k)));
        }
        for ep in &self.endpoints {
            ep.validate()?;
        }
        self.train.validate()
    }

    pub fn endpoint(&self, name: &str) -> Option<&LlmEndpoint> {
        self.endpoints.iter().find(|e| e.name == name)
    }
}

/// Precision, recall and F1 on a 0-100 scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl TaskScores {
    pub fn new(precision: f64, recall: f64, f1: f64) -> Self {
        TaskScores { precision, recall, f1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub sentences: Option<TaskScores>,
    pub freetext: Option<TaskScores>,
    /// `avg_f1` of the displayed (one-decimal) task F1 cells.
    pub avg_f1: Option<f64>,
    /// Share of LLM responses that could not be parsed at all.
    pub parse_failure_rate: Option<f64>,
}

impl ResultRow {
    pub fn new(method: impl Into<String>, sentences: Option<TaskScores>, freetext: Option<TaskScores>) -> Self {
        let avg = avg_f1(sentences.map(|s| display(s.f1)), freetext.map(|s| display(s.f1)));
        ResultRow {
            method: method.into(),
            sentences,
            freetext,
            avg_f1: avg,
            parse_failure_rate: None,
        }
    }

    /// Cells in column order, see [`COLUMNS`].
    pub fn cells(&self) -> [Option<f64>; 7] {
        let s = self.sentences;
        let f = self.freetext;
        [
            s.map(|x| x.precision),
            s.map(|x| x.recall),
            s.map(|x| x.f1),
            f.map(|x| x.precision),
            f.map(|x| x.recall),
            f.map(|x| x.f1),
            self.avg_f1,
        ]
    }
}

pub const COLUMNS: [&str; 7] = [
    "sentences_precision",
    "sentences_recall",
    "sentences_f1",
    "freetext_precision",
    "freetext_recall",
    "freetext_f1",
    "avg_f1",
];

fn display(x: f64) -> f64 {
    round_half_up(x, 1)
}

fn fmt_cell(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{:.1}", display(v)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mark {
    None,
    Best,
    Second,
}

/// Best and second-best marks for one column, compared on displayed values.
/// Ties share a mark; missing cells are never marked; a column with a single
/// distinct value has no second place.
pub fn column_marks(values: &[Option<f64>]) -> Vec<Mark> {
    let shown: Vec<Option<i64>> = values
        .iter()
        .map(|v| v.map(|x| (display(x) * 10.0).round() as i64))
        .collect();
    let mut distinct: Vec<i64> = shown.iter().flatten().copied().collect();
    distinct.sort_unstable_by(|a, b| b.cmp(a));
    distinct.dedup();
    shown
        .iter()
        .map(|v| match v {
            Some(x) if Some(x) == distinct.first() => Mark::Best,
            Some(x) if Some(x) == distinct.get(1) => Mark::Second,
            _ => Mark::None,
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    /// Marks per row, indexed like [`ResultRow::cells`]. The Avg F1 column
    /// ranks only rows scored on both tasks when there are any, since a
    /// single-task average is not comparable with a two-task one.
    pub fn marks(&self) -> Vec<[Mark; 7]> {
        let mut out = vec![[Mark::None; 7]; self.rows.len()];
        let complete = |r: &ResultRow| r.sentences.is_some() && r.freetext.is_some();
        let any_complete = self.rows.iter().any(complete);
        for col in 0..7 {
            let values: Vec<Option<f64>> = self
                .rows
                .iter()
                .map(|r| r.cells()[col].filter(|_| col != 6 || !any_complete || complete(r)))
                .collect();
            for (row, mark) in column_marks(&values).into_iter().enumerate() {
                out[row][col] = mark;
            }
        }
        out
    }

    /// Every Avg F1 cell must equal `avg_f1` of the row's displayed task F1 cells.
    pub fn check_invariants(&self) -> Result<()> {
        for row in &self.rows {
            let expected = avg_f1(
                row.sentences.map(|s| display(s.f1)),
                row.freetext.map(|s| display(s.f1)),
            );
            if expected != row.avg_f1 {
                return Err(Error::InvalidConfig(format!(
                    "row {}: avg F1 {:?} does not match task cells ({expected:?})",
                    row.method, row.avg_f1
                )));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("method,{},parse_failure_rate\n", COLUMNS.join(","));
        for row in &self.rows {
            out.push_str(&row.method);
            for cell in row.cells() {
                out.push(',');
                if let Some(v) = cell {
                    let _ = write!(out, "{:.1}", display(v));
                }
            }
            out.push(',');
            if let Some(rate) = row.parse_failure_rate {
                let _ = write!(out, "{rate:.4}");
            }
            out.push('\n');
        }
        out
    }

    /// Fixed-width table; best cells are wrapped in `**`, second-best in `_`.
    pub fn to_text(&self) -> String {
        let header = [
            "Method",
            "Sent P",
            "Sent R",
            "Sent F1",
            "Free P",
            "Free R",
            "Free F1",
            "Avg F1",
            "Parse fail",
        ];
        let marks = self.marks();
        let mut grid: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for (row, marks) in self.rows.iter().zip(&marks) {
            let mut line = vec![row.method.clone()];
            for (cell, mark) in row.cells().into_iter().zip(marks) {
                let text = fmt_cell(cell);
                line.push(match mark {
                    Mark::Best => format!("**{text}**"),
                    Mark::Second => format!("_{text}_"),
                    Mark::None => text,
                });
            }
            line.push(
                row.parse_failure_rate
                    .map_or_else(|| "-".to_string(), |r| format!("{:.1}%", r * 100.0)),
            );
            grid.push(line);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| grid.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, line) in grid.iter().enumerate() {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        out.push_str("\n**x** best per column, _x_ second best. Scores are means over folds (0-100).\n");
        out
    }
}

/// Scores of one method on one task in one fold run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldDetail {
    pub method: String,
    pub task: String,
    pub fold: usize,
    /// Sentences (sentence task) or notes (freetext task) scored.
    pub n_items: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: Option<usize>,
    pub fp: Option<usize>,
    pub fn_: Option<usize>,
    pub parse: Option<ParseCounts>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseCounts {
    pub ok: usize,
    pub partial: usize,
    pub failed: usize,
}

impl ParseCounts {
    fn record(&mut self, status: ParseStatus) {
        match status {
            ParseStatus::Ok => self.ok += 1,
            ParseStatus::Partial => self.partial += 1,
            ParseStatus::Failed => self.failed += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.ok + self.partial + self.failed
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub table: ResultsTable,
    pub folds: Vec<FoldDetail>,
    pub stats: TagStatistics,
    pub plan: SplitPlan,
}

/// Fails when a test note of `run` also feeds training or validation.
pub fn check_leakage(run: &FoldRun) -> Result<()> {
    let test: HashSet<&str> = run.test.iter().map(String::as_str).collect();
    if let Some(id) = run
        .train
        .iter()
        .chain(&run.validation)
        .find(|id| test.contains(id.as_str()))
    {
        return Err(Error::InvalidCorpus(format!(
            "fold {}: test note {id} is also a training input",
            run.index
        )));
    }
    Ok(())
}

struct Inputs {
    corpus: SentenceCorpus,
    freetext: BTreeMap<String, ClinicalNote>,
}

fn load_inputs(config: &ExperimentConfig) -> Result<Inputs> {
    let ontology = match &config.ontology {
        Some(p) => LabelOntology::load(&config.resolve(p))?,
        None => LabelOntology::default(),
    };
    let mode = if config.strict_labels {
        LabelMode::Strict
    } else {
        LabelMode::Lenient
    };
    let corpus = load_sentence_corpus(&config.resolve(&config.sentences), &ontology, mode)?;
    let freetext = match &config.freetext {
        Some(p) => FreetextCorpus::load(&config.resolve(p), &ontology)?,
        None => synthesize_freetext(&corpus)?,
    };
    let freetext = freetext.notes.into_iter().map(|n| (n.note_id.clone(), n)).collect();
    Ok(Inputs { corpus, freetext })
}

fn mock_endpoint(config: &ExperimentConfig) -> LlmEndpoint {
    config.endpoint("mock").cloned().unwrap_or(LlmEndpoint {
        max_parallel: 1,
        backoff_ms: 0,
        ..LlmEndpoint::new("mock")
    })
}

/// Builds the default clients: `mock` from `mock_script`, `llm:*` over HTTP.
pub fn default_clients(
    config: &ExperimentConfig,
    ontology: &LabelOntology,
) -> Result<BTreeMap<String, Box<dyn LlmClient>>> {
    let mut clients: BTreeMap<String, Box<dyn LlmClient>> = BTreeMap::new();
    for m in &config.methods {
        match m {
            MethodSpec::Mock => {
                let behavior = match &config.mock_script {
                    Some(p) => MockBehavior::load(&config.resolve(p))?,
                    None => MockBehavior::Heuristic,
                };
                clients.insert(m.id(), Box::new(MockClient::new(behavior, ontology)?));
            }
            MethodSpec::Llm(_) => {
                clients.insert(m.id(), Box::new(HttpClient));
            }
            _ => {}
        }
    }
    Ok(clients)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let inputs = load_inputs(config)?;
    let clients = default_clients(config, inputs.corpus.ontology())?;
    run_loaded(config, &inputs, &clients)
}

/// Like [`run_experiment`], with caller-supplied clients keyed by method id
/// (`mock`, `llm:<name>`).
pub fn run_experiment_with_clients(
    config: &ExperimentConfig,
    clients: &BTreeMap<String, Box<dyn LlmClient>>,
) -> Result<ExperimentOutput> {
    let inputs = load_inputs(config)?;
    run_loaded(config, &inputs, clients)
}

fn run_loaded(
    config: &ExperimentConfig,
    inputs: &Inputs,
    clients: &BTreeMap<String, Box<dyn LlmClient>>,
) -> Result<ExperimentOutput> {
    config.validate()?;
    let corpus = &inputs.corpus;
    let plan = make_splits(corpus, config.k, config.seed)?;
    let runs: Vec<FoldRun> = plan.runs().collect();
    for run in &runs {
        check_leakage(run)?;
    }
    let cache = match &config.cache {
        Some(dir) => Some(ResponseCache::open(config.resolve(dir))?),
        None => None,
    };
    let mut table = ResultsTable::default();
    let mut folds = Vec::new();
    for method in &config.methods {
        let runner = MethodRunner {
            method,
            config,
            inputs,
            client: clients.get(&method.id()).map(|c| c.as_ref()),
            cache: cache.as_ref(),
            parse: Default::default(),
        };
        if method.is_llm() && runner.client.is_none() {
            return Err(Error::InvalidConfig(format!("no client for method {method}")));
        }
        let mut sentence_folds = Vec::new();
        let mut freetext_folds = Vec::new();
        for run in &runs {
            let ctx = |e: Error| e.context(format!("method {method}, fold {}", run.index));
            if config.tasks.sentences() {
                if let Some(detail) = runner.sentence_fold(run).map_err(ctx)? {
                    sentence_folds.push(detail);
                }
            }
            if config.tasks.freetext() {
                if let Some(detail) = runner.freetext_fold(run).map_err(ctx)? {
                    freetext_folds.push(detail);
                }
            }
        }
        let mut row = ResultRow::new(method.id(), mean_scores(&sentence_folds), mean_scores(&freetext_folds));
        let parsed = runner.parse.get();
        if method.is_llm() && parsed.total() > 0 {
            row.parse_failure_rate = Some(parsed.failed as f64 / parsed.total() as f64);
        }
        table.rows.push(row);
        folds.extend(sentence_folds);
        folds.extend(freetext_folds);
    }
    table.check_invariants()?;
    Ok(ExperimentOutput {
        table,
        folds,
        stats: tag_statistics(corpus),
        plan,
    })
}

fn mean_scores(folds: &[FoldDetail]) -> Option<TaskScores> {
    if folds.is_empty() {
        return None;
    }
    let n = folds.len() as f64;
    let mean = |f: fn(&FoldDetail) -> f64| folds.iter().map(f).sum::<f64>() / n * 100.0;
    Some(TaskScores::new(
        mean(|d| d.precision),
        mean(|d| d.recall),
        mean(|d| d.f1),
    ))
}

struct MethodRunner<'a> {
    method: &'a MethodSpec,
    config: &'a ExperimentConfig,
    inputs: &'a Inputs,
    client: Option<&'a dyn LlmClient>,
    cache: Option<&'a ResponseCache>,
    parse: std::cell::Cell<ParseCounts>,
}

fn label_at(spans: &[SectionSpan], token: usize, fallback: &Label) -> Label {
    let i = spans.partition_point(|s| s.token_start <= token);
    match i.checked_sub(1).map(|i| &spans[i]) {
        Some(s) if token < s.token_end => s.label.clone(),
        _ => fallback.clone(),
    }
}

impl MethodRunner<'_> {
    fn ontology(&self) -> &LabelOntology {
        self.inputs.corpus.ontology()
    }

    fn sentences_of<'b>(&'b self, ids: &[String]) -> Result<Vec<&'b [LabeledSentence]>> {
        ids.iter()
            .map(|id| {
                self.inputs
                    .corpus
                    .note(id)
                    .ok_or_else(|| Error::InvalidCorpus(format!("note {id} missing from sentence corpus")))
            })
            .collect()
    }

    fn freetext_note(&self, id: &str) -> Result<&ClinicalNote> {
        self.inputs
            .freetext
            .get(id)
            .ok_or_else(|| Error::InvalidCorpus(format!("note {id} missing from freetext corpus")))
    }

    fn endpoint(&self) -> LlmEndpoint {
        match self.method {
            MethodSpec::Llm(name) => self
                .config
                .endpoint(name)
                .cloned()
                .unwrap_or_else(|| LlmEndpoint::new(name)),
            _ => mock_endpoint(self.config),
        }
    }

    fn llm_responses(&self, task: TaskKind, inputs: Vec<PromptInput<'_>>) -> Result<Vec<String>> {
        let prompts = inputs
            .into_iter()
            .map(|input| build_prompt(task, self.ontology(), input))
            .collect::<Result<Vec<_>>>()?;
        let client = self.client.expect("checked before running");
        call_many(client, &self.endpoint(), &prompts, &self.config.decoding, self.cache)
            .into_iter()
            .map(|r| r.map(|t| t.raw_response))
            .collect()
    }

    fn sentence_fold(&self, run: &FoldRun) -> Result<Option<FoldDetail>> {
        let notes = self.sentences_of(&run.test)?;
        let gold: Vec<Label> = notes.iter().flat_map(|n| n.iter().map(|s| s.label.clone())).collect();
        let fallback = self.ontology().fallback().clone();
        let mut parse = None;
        let pred: Vec<Label> = match self.method {
            MethodSpec::Gold => gold.clone(),
            MethodSpec::Rules | MethodSpec::Regex => {
                let rule = if *self.method == MethodSpec::Rules {
                    RuleMethod::Rules
                } else {
                    RuleMethod::Regex
                };
                let matcher = compile_matcher(self.ontology(), rule.options())?;
                let mut out = Vec::with_capacity(gold.len());
                for (id, sentences) in run.test.iter().zip(&notes) {
                    let note = crate::corpus::synthesize_note(id, sentences)?;
                    let seg = segment_rules(&matcher, &note, rule.id());
                    out.extend(
                        sentence_token_starts(sentences)
                            .into_iter()
                            .map(|t| label_at(&seg.spans, t, &fallback)),
                    );
                }
                out
            }
            MethodSpec::LogReg => {
                let train: Vec<LabeledSentence> =
                    self.sentences_of(&run.train)?.into_iter().flatten().cloned().collect();
                let validation: Vec<LabeledSentence> = self
                    .sentences_of(&run.validation)?
                    .into_iter()
                    .flatten()
                    .cloned()
                    .collect();
                let report = classifier::train(&train, &validation, self.ontology(), &self.config.train)?;
                notes
                    .iter()
                    .flat_map(|n| n.iter())
                    .map(|s| report.model.predict(&s.text).label)
                    .collect()
            }
            MethodSpec::Mock | MethodSpec::Llm(_) => {
                let texts: Vec<Vec<&str>> = notes
                    .iter()
                    .map(|n| n.iter().map(|s| s.text.as_str()).collect())
                    .collect();
                let responses = self.llm_responses(
                    TaskKind::SentenceClassify,
                    texts.iter().map(|t| PromptInput::Sentences(t)).collect(),
                )?;
                let mut counts = ParseCounts::default();
                let mut out = Vec::with_capacity(gold.len());
                for (raw, batch) in responses.iter().zip(&texts) {
                    let parsed = parse_classification(raw, batch.len(), self.ontology());
                    counts.record(parsed.status);
                    out.extend(parsed.labels);
                }
                self.add_parse(counts);
                parse = Some(counts);
                out
            }
        };
        let scores = weighted_f1(&pred, &gold, self.ontology())?;
        Ok(Some(FoldDetail {
            method: self.method.id(),
            task: "sentences".into(),
            fold: run.index,
            n_items: gold.len(),
            precision: scores.precision,
            recall: scores.recall,
            f1: scores.f1,
            tp: None,
            fp: None,
            fn_: None,
            parse,
        }))
    }

    fn freetext_fold(&self, run: &FoldRun) -> Result<Option<FoldDetail>> {
        let notes = run
            .test
            .iter()
            .map(|id| self.freetext_note(id))
            .collect::<Result<Vec<_>>>()?;
        let mut parse = None;
        let predicted: Vec<SegmentationResult> = match self.method {
            // the classifier labels sentences only
            MethodSpec::LogReg => return Ok(None),
            MethodSpec::Gold => notes
                .iter()
                .map(|n| SegmentationResult {
                    note_id: n.note_id.clone(),
                    spans: n.gold.clone().unwrap_or_default(),
                    method: "gold".into(),
                })
                .collect(),
            MethodSpec::Rules | MethodSpec::Regex => {
                let rule = if *self.method == MethodSpec::Rules {
                    RuleMethod::Rules
                } else {
                    RuleMethod::Regex
                };
                let matcher = compile_matcher(self.ontology(), rule.options())?;
                notes.iter().map(|n| segment_rules(&matcher, n, rule.id())).collect()
            }
            MethodSpec::Mock | MethodSpec::Llm(_) => {
                let responses = self.llm_responses(
                    TaskKind::FreetextSegment,
                    notes.iter().map(|n| PromptInput::Note(&n.text)).collect(),
                )?;
                let mut counts = ParseCounts::default();
                let method = self.method.id();
                let out = responses
                    .iter()
                    .zip(&notes)
                    .map(|(raw, note)| {
                        let parsed = parse_segmentation(raw, note, self.ontology(), &method);
                        counts.record(parsed.status);
                        parsed.result
                    })
                    .collect();
                self.add_parse(counts);
                parse = Some(counts);
                out
            }
        };
        let gold: Vec<BoundarySet> = notes
            .iter()
            .map(|n| match &n.gold {
                Some(spans) => Ok(BoundarySet::new(n.note_id.clone(), spans.iter().map(|s| s.token_start))),
                None => Err(Error::InvalidCorpus(format!("note {} has no gold spans", n.note_id))),
            })
            .collect::<Result<_>>()?;
        let pred: Vec<BoundarySet> = predicted.iter().map(boundaries_of).collect();
        let scores = micro_boundary_prf(pred.iter().zip(&gold))?;
        Ok(Some(FoldDetail {
            method: self.method.id(),
            task: "freetext".into(),
            fold: run.index,
            n_items: notes.len(),
            precision: scores.precision,
            recall: scores.recall,
            f1: scores.f1,
            tp: Some(scores.tp),
            fp: Some(scores.fp),
            fn_: Some(scores.fn_),
            parse,
        }))
    }

    fn add_parse(&self, counts: ParseCounts) {
        let mut total = self.parse.get();
        total.ok += counts.ok;
        total.partial += counts.partial;
        total.failed += counts.failed;
        self.parse.set(total);
    }
}

/// ANOVA over the table's displayed F1 cells under the two plausible
/// groupings: one group per task, or one group per method.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnovaReport {
    pub by_task: AnovaOutcome,
    pub by_method: AnovaOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnovaOutcome {
    pub groups: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<AnovaResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl AnovaOutcome {
    fn compute(groups: Vec<Vec<f64>>) -> Self {
        match one_way_anova(&groups) {
            Ok(r) => AnovaOutcome {
                groups,
                result: Some(r),
                error: None,
            },
            Err(e) => AnovaOutcome {
                groups,
                result: None,
                error: Some(e.to_string()),
            },
        }
    }
}

pub fn anova_report(table: &ResultsTable) -> AnovaReport {
    let sentences: Vec<f64> = table
        .rows
        .iter()
        .filter_map(|r| r.sentences.map(|s| display(s.f1)))
        .collect();
    let freetext: Vec<f64> = table
        .rows
        .iter()
        .filter_map(|r| r.freetext.map(|s| display(s.f1)))
        .collect();
    let by_method: Vec<Vec<f64>> = table
        .rows
        .iter()
        .map(|r| {
            [r.sentences, r.freetext]
                .iter()
                .flatten()
                .map(|s| display(s.f1))
                .collect::<Vec<f64>>()
        })
        .filter(|g| !g.is_empty())
        .collect();
    AnovaReport {
        by_task: AnovaOutcome::compute(vec![sentences, freetext]),
        by_method: AnovaOutcome::compute(by_method),
    }
}

#[derive(Serialize)]
struct RadarSeries<'a> {
    method: &'a str,
    task: &'a str,
    values: [f64; 3],
}

#[derive(Serialize)]
struct Radar<'a> {
    axes: [&'static str; 3],
    series: Vec<RadarSeries<'a>>,
}

fn radar_json(table: &ResultsTable) -> Result<String> {
    let mut series = Vec::new();
    for row in &table.rows {
        for (task, scores) in [("sentences", row.sentences), ("freetext", row.freetext)] {
            if let Some(s) = scores {
                series.push(RadarSeries {
                    method: &row.method,
                    task,
                    values: [display(s.precision), display(s.recall), display(s.f1)],
                });
            }
        }
    }
    let radar = Radar {
        axes: ["precision", "recall", "f1"],
        series,
    };
    Ok(serde_json::to_string_pretty(&radar)? + "\n")
}

fn folds_csv(folds: &[FoldDetail]) -> String {
    let mut out =
        String::from("method,task,fold,n_items,precision,recall,f1,tp,fp,fn,parse_ok,parse_partial,parse_failed\n");
    let opt = |v: Option<usize>| v.map_or_else(String::new, |v| v.to_string());
    for d in folds {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{},{},{},{},{},{}",
            d.method,
            d.task,
            d.fold,
            d.n_items,
            d.precision,
            d.recall,
            d.f1,
            opt(d.tp),
            opt(d.fp),
            opt(d.fn_),
            opt(d.parse.map(|p| p.ok)),
            opt(d.parse.map(|p| p.partial)),
            opt(d.parse.map(|p| p.failed)),
        );
    }
    out
}

/// Labels with at least `min_count` sentences, most frequent first.
pub fn tag_histogram_csv(stats: &TagStatistics, min_count: usize) -> String {
    let mut rows: Vec<(Label, usize)> = stats.frequent_labels(min_count).into_iter().collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut out = String::from("label,count\n");
    for (label, count) in rows {
        let _ = writeln!(out, "{},{count}", csv_field(label.as_str()));
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes all report files into `out` and returns their names in write order.
pub fn emit_reports(output: &ExperimentOutput, min_tag_count: usize, out: &Path) -> Result<Vec<String>> {
    if output.table.rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    output.table.check_invariants()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let stats = &output.stats;
    let mut tags_per_note = String::from("tags,notes\n");
    for (tags, notes) in stats.tags_per_note_histogram() {
        let _ = writeln!(tags_per_note, "{tags},{notes}");
    }
    let mut lengths = String::from("label,length,count\n");
    for (label, hist) in &stats.sentence_lengths {
        for (len, count) in hist {
            let _ = writeln!(lengths, "{},{len},{count}", csv_field(label.as_str()));
        }
    }
    let files = [
        ("results.csv", output.table.to_csv()),
        ("results.txt", output.table.to_text()),
        ("radar.json", radar_json(&output.table)?),
        ("folds.csv", folds_csv(&output.folds)),
        ("tag_histogram.csv", tag_histogram_csv(stats, min_tag_count)),
        ("tags_per_note.csv", tags_per_note),
        ("sentence_lengths.csv", lengths),
        (
            "anova.json",
            serde_json::to_string_pretty(&anova_report(&output.table))? + "\n",
        ),
        ("splits.json", serde_json::to_string_pretty(&output.plan)? + "\n"),
    ];
    let mut names = Vec::new();
    for (name, body) in files {
        let path = out.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        names.push(name.to_string());
    }
    Ok(names)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub k: usize,
    pub methods: Vec<String>,
    pub tasks: TaskSelection,
    pub inputs: Vec<ManifestEntry>,
    pub outputs: Vec<ManifestEntry>,
}

/// Records input and output hashes in `out/manifest.json`. Inputs are listed
/// by the path written in the config so the manifest is location independent.
pub fn write_manifest(
    config: &ExperimentConfig,
    config_path: Option<&Path>,
    outputs: &[String],
    out: &Path,
) -> Result<Manifest> {
    let mut inputs = Vec::new();
    if let Some(p) = config_path {
        let name = p
            .file_name()
            .map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
        inputs.push(ManifestEntry {
            name,
            sha256: sha256_file(p)?,
        });
    }
    let listed = [
        Some(&config.sentences),
        config.freetext.as_ref(),
        config.ontology.as_ref(),
        config.mock_script.as_ref(),
    ];
    for p in listed.into_iter().flatten() {
        if config.mock_script.as_ref() == Some(p) && !config.methods.contains(&MethodSpec::Mock) {
            continue;
        }
        inputs.push(ManifestEntry {
            name: p.display().to_string(),
            sha256: sha256_file(&config.resolve(p))?,
        });
    }
    let outputs = outputs
        .iter()
        .map(|name| {
            Ok(ManifestEntry {
                name: name.clone(),
                sha256: sha256_file(&out.join(name))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        seed: config.seed,
        k: config.k,
        methods: config.methods.iter().map(MethodSpec::id).collect(),
        tasks: config.tasks,
        inputs,
        outputs,
    };
    let path = out.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::header_explicit_corpus;

    fn setup(methods: &[&str], extra: &str) -> (tempfile::TempDir, ExperimentConfig) {
        let dir = tempfile::tempdir().unwrap();
        let corpus = header_explicit_corpus(30, 7, &LabelOntology::default());
        corpus.write_jsonl(&dir.path().join("sentences.jsonl")).unwrap();
        let methods: Vec<String> = methods.iter().map(|m| format!("{m:?}")).collect();
        let body = format!(
            "sentences = \"sentences.jsonl\"\nmethods = [{}]\nk = 3\nseed = 5\n{extra}\n[train]\nepochs = 5\n",
            methods.join(", ")
        );
        let config = ExperimentConfig::from_toml_str(&body, dir.path()).unwrap();
        (dir, config)
    }

    #[test]
    fn method_ids_round_trip() {
        for raw in ["rules", "regex", "logreg", "gold", "mock", "llm:gpt"] {
            assert_eq!(raw.parse::<MethodSpec>().unwrap().id(), raw);
        }
        assert!("llm:".parse::<MethodSpec>().is_err());
        assert!("medspacy".parse::<MethodSpec>().is_err());
    }

    #[test]
    fn config_validation() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ExperimentConfig::from_toml_str("sentences = \"x\"\nmethods = []", dir.path()).is_err());
        assert!(ExperimentConfig::from_toml_str("sentences = \"x\"\nmethods = [\"llm:a\"]", dir.path()).is_err());
        assert!(
            ExperimentConfig::from_toml_str("sentences = \"x\"\nmethods = [\"rules\"]\nk = 2", dir.path()).is_err()
        );
        assert!(
            ExperimentConfig::from_toml_str("sentences = \"x\"\nmethods = [\"rules\"]\nbogus = 1", dir.path()).is_err()
        );
        let ok = ExperimentConfig::from_toml_str(
            "sentences = \"x\"\nmethods = [\"llm:a\"]\n[[endpoints]]\nname = \"a\"\nbase_url = \"http://h\"",
            dir.path(),
        )
        .unwrap();
        assert_eq!(ok.k, 10);
        assert_eq!(ok.tasks, TaskSelection::Both);
        assert_eq!(ok.resolve(Path::new("x")), dir.path().join("x"));
    }

    #[test]
    fn gold_method_scores_perfectly() {
        let (_dir, config) = setup(&["gold"], "");
        let out = run_experiment(&config).unwrap();
        let row = &out.table.rows[0];
        assert_eq!(row.sentences, Some(TaskScores::new(100.0, 100.0, 100.0)));
        assert_eq!(row.freetext, Some(TaskScores::new(100.0, 100.0, 100.0)));
        assert_eq!(row.avg_f1, Some(100.0));
        assert_eq!(out.folds.len(), 6);
    }

    #[test]
    fn rules_on_header_explicit_corpus_is_perfect() {
        let (_dir, config) = setup(&["rules", "regex"], "tasks = \"freetext\"");
        let out = run_experiment(&config).unwrap();
        for row in &out.table.rows {
            assert_eq!(row.freetext.unwrap().f1, 100.0, "{}", row.method);
            assert!(row.sentences.is_none());
        }
    }

    #[test]
    fn mock_and_rules_table() {
        let (_dir, config) = setup(&["mock", "rules", "logreg"], "");
        let out = run_experiment(&config).unwrap();
        assert_eq!(out.table.rows.len(), 3);
        out.table.check_invariants().unwrap();
        let mock = &out.table.rows[0];
        assert_eq!(mock.parse_failure_rate, Some(0.0));
        let logreg = &out.table.rows[2];
        assert!(logreg.freetext.is_none());
        assert_eq!(logreg.avg_f1, Some(display(logreg.sentences.unwrap().f1)));
    }

    #[test]
    fn garbage_mock_degrades_to_fallback() {
        let (dir, config) = setup(&["mock"], "mock_script = \"mock.json\"");
        std::fs::write(
            dir.path().join("mock.json"),
            r#"{"mode":"fixed","text":"I'd rather not."}"#,
        )
        .unwrap();
        let out = run_experiment(&config).unwrap();
        let row = &out.table.rows[0];
        assert_eq!(row.parse_failure_rate, Some(1.0));
        for cell in row.cells().into_iter().flatten() {
            assert!(cell.is_finite());
        }
    }

    #[test]
    fn leakage_detected() {
        let run = FoldRun {
            index: 0,
            train: vec!["a".into(), "b".into()],
            validation: vec![],
            test: vec!["b".into()],
        };
        assert!(check_leakage(&run).is_err());
    }

    #[test]
    fn marks_on_ties_and_singletons() {
        assert_eq!(column_marks(&[Some(1.0)]), [Mark::Best]);
        assert_eq!(
            column_marks(&[Some(2.0), Some(2.04), None, Some(1.0)]),
            [Mark::Best, Mark::Best, Mark::None, Mark::Second]
        );
        assert_eq!(column_marks(&[None, None]), [Mark::None, Mark::None]);
    }

    #[test]
    fn reports_are_written_and_stable() {
        let (dir, config) = setup(&["rules", "mock"], "");
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        for out in [&a, &b] {
            let result = run_experiment(&config).unwrap();
            let names = emit_reports(&result, 1, out).unwrap();
            write_manifest(&config, None, &names, out).unwrap();
        }
        for name in [
            "results.csv",
            "results.txt",
            "radar.json",
            "folds.csv",
            "anova.json",
            "manifest.json",
        ] {
            let x = std::fs::read(a.join(name)).unwrap();
            assert_eq!(x, std::fs::read(b.join(name)).unwrap(), "{name}");
        }
        let txt = std::fs::read_to_string(a.join("results.txt")).unwrap();
        assert!(txt.contains("**"));
    }

    #[test]
    fn histogram_threshold() {
        let mut stats = TagStatistics::default();
        stats.label_counts.insert(Label::canonical("A"), 50);
        stats.label_counts.insert(Label::canonical("B"), 49);
        stats.label_counts.insert(Label::canonical("C"), 70);
        assert_eq!(tag_histogram_csv(&stats, 50), "label,count\nC,70\nA,50\n");
    }
}

use std::collections::BTreeMap;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use cnseg_annotate::service::{load_predictions, load_subsets};
use cnseg_annotate::{AnnotationService, AnnotationStore};
use cnseg_core::classifier::{self, LogRegModel, TrainConfig};
use cnseg_core::corpus::{
    load_sentence_corpus, synthesize_freetext, tag_statistics, FreetextCorpus, LabelMode, SentenceCorpus,
    DEFAULT_MIN_TAG_COUNT,
};
use cnseg_core::harness::{self, ExperimentConfig};
use cnseg_core::llm::{
    self, build_prompt, parse_classification, parse_segmentation, DecodingParams, HttpClient, LlmClient, LlmEndpoint,
    MockBehavior, MockClient, PromptInput, ResponseCache, TaskKind,
};
use cnseg_core::metrics::{boundaries_of, micro_boundary_prf, BoundarySet};
use cnseg_core::rules::{compile_matcher, segment_rules, RuleMethod};
use cnseg_core::{synth, LabelOntology};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "cnseg", version, about = "Clinical note section segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CorpusArgs {
    /// Labeled sentence corpus (JSONL).
    #[arg(long)]
    sentences: PathBuf,
    /// Ontology records (JSONL); the built-in lexicon when omitted.
    #[arg(long)]
    ontology: Option<PathBuf>,
    /// Reject labels that are not in the ontology.
    #[arg(long)]
    strict: bool,
}

impl CorpusArgs {
    fn load(&self) -> Result<SentenceCorpus> {
        let ontology = load_ontology(self.ontology.as_deref())?;
        let mode = if self.strict {
            LabelMode::Strict
        } else {
            LabelMode::Lenient
        };
        Ok(load_sentence_corpus(&self.sentences, &ontology, mode)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Rules,
    Regex,
}

#[derive(Clone, Copy, ValueEnum)]
enum LlmTask {
    Classify,
    Segment,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    /// Every section opens with a lexicon header and a colon.
    HeaderExplicit,
    /// 1,000 notes / 17,487 sentences with a 14-20 tags-per-note profile.
    FullScale,
    /// Disjoint vocabulary per class.
    Separable,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a sentence corpus and write it back normalized.
    Ingest {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild narrative notes with gold span offsets from a sentence corpus.
    SynthFreetext {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tag frequency, tags-per-note and sentence length distributions.
    Stats {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, default_value_t = DEFAULT_MIN_TAG_COUNT)]
        min_count: usize,
    },
    /// Segment freetext notes with a header matcher.
    Segment {
        #[arg(long, value_enum)]
        method: Method,
        /// Freetext corpus (JSONL); gold spans, when present, are scored.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        ontology: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the bag-of-words logistic regression classifier.
    TrainLogreg {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Validation corpus used for early stopping.
        #[arg(long)]
        validation: Option<PathBuf>,
        /// TOML file with training settings (learning_rate, epochs, ...).
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label sentences with a trained classifier.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        /// System name written to the predictions file.
        #[arg(long, default_value = "logreg")]
        system: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an LLM endpoint over a corpus.
    LlmRun {
        /// Endpoint name from the `[[endpoints]]` table of `--config`.
        #[arg(long, default_value = "mock")]
        endpoint: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        task: LlmTask,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Use the offline mock client instead of HTTP.
        #[arg(long)]
        mock: bool,
        /// Mock behaviour file (JSON); heuristic when omitted.
        #[arg(long)]
        mock_script: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment config and write its reports.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the annotation API.
    AnnotateServe {
        /// Sentence corpus to annotate (JSONL).
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        ontology: Option<PathBuf>,
        /// System predictions (JSONL of {system, sentence_id, label}).
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// JSON object of subset name -> sentence ids.
        #[arg(long)]
        subsets: Option<PathBuf>,
    },
    /// Write the built-in ontology as JSONL, as a starting point for edits.
    Ontology {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic sentence corpus.
    GenCorpus {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long, default_value_t = 200)]
        notes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_ontology(path: Option<&Path>) -> Result<LabelOntology> {
    Ok(match path {
        Some(p) => LabelOntology::load(p)?,
        None => LabelOntology::default(),
    })
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut body = String::new();
    for item in items {
        body.push_str(&serde_json::to_string(&item)?);
        body.push('\n');
    }
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn print_prf(label: &str, pred: &[BoundarySet], gold: &[BoundarySet]) -> Result<()> {
    let s = micro_boundary_prf(pred.iter().zip(gold))?;
    println!(
        "{label}: P={:.1} R={:.1} F1={:.1} (tp={} fp={} fn={})",
        s.precision * 100.0,
        s.recall * 100.0,
        s.f1 * 100.0,
        s.tp,
        s.fp,
        s.fn_
    );
    Ok(())
}

#[derive(Deserialize)]
struct EndpointFile {
    #[serde(default)]
    endpoints: Vec<LlmEndpoint>,
    #[serde(default)]
    decoding: DecodingParams,
}

#[derive(serde::Serialize)]
struct PredictionLine<'a> {
    system: &'a str,
    sentence_id: &'a str,
    label: &'a str,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Ingest { corpus, out } => {
            let c = corpus.load()?;
            c.write_jsonl(&out)?;
            println!(
                "{} notes, {} sentences -> {}",
                c.note_count(),
                c.sentences().len(),
                out.display()
            );
        }
        Command::SynthFreetext { corpus, out } => {
            let free = synthesize_freetext(&corpus.load()?)?;
            free.write(&out)?;
            println!("{} notes -> {}", free.notes.len(), out.display());
        }
        Command::Stats { corpus, min_count } => {
            let c = corpus.load()?;
            let stats = tag_statistics(&c);
            println!("notes: {}  sentences: {}", c.note_count(), c.sentences().len());
            println!(
                "tags per note: mean {:.2}, mode {}",
                stats.mean_tags_per_note(),
                stats.tags_per_note_mode().map_or_else(|| "-".into(), |m| m.to_string())
            );
            print!("{}", harness::tag_histogram_csv(&stats, min_count));
        }
        Command::Segment {
            method,
            input,
            ontology,
            out,
        } => {
            let ontology = load_ontology(ontology.as_deref())?;
            let rule = match method {
                Method::Rules => RuleMethod::Rules,
                Method::Regex => RuleMethod::Regex,
            };
            let matcher = compile_matcher(&ontology, rule.options())?;
            let notes = FreetextCorpus::load(&input, &ontology)?.notes;
            let results: Vec<_> = notes.iter().map(|n| segment_rules(&matcher, n, rule.id())).collect();
            write_jsonl(&out, &results)?;
            if notes.iter().all(|n| n.gold.is_some()) && !notes.is_empty() {
                let gold: Vec<BoundarySet> = notes
                    .iter()
                    .map(|n| BoundarySet::new(n.note_id.clone(), n.gold.iter().flatten().map(|s| s.token_start)))
                    .collect();
                let pred: Vec<BoundarySet> = results.iter().map(boundaries_of).collect();
                print_prf(rule.id(), &pred, &gold)?;
            }
        }
        Command::TrainLogreg {
            corpus,
            validation,
            train_config,
            out,
        } => {
            let c = corpus.load()?;
            let validation = match validation {
                Some(p) => load_sentence_corpus(&p, c.ontology(), LabelMode::Lenient)?
                    .sentences()
                    .to_vec(),
                None => Vec::new(),
            };
            let config: TrainConfig = match train_config {
                Some(p) => toml::from_str(&std::fs::read_to_string(&p).with_context(|| p.display().to_string())?)?,
                None => TrainConfig::default(),
            };
            let report = classifier::train(c.sentences(), &validation, c.ontology(), &config)?;
            report.model.save(&out)?;
            println!(
                "trained on {} sentences, {} labels, vocabulary {}; best epoch {}, train loss {:.4}",
                c.sentences().len(),
                report.model.labels.len(),
                report.model.vocabulary.len(),
                report.best_epoch,
                report.final_train_loss()
            );
        }
        Command::Classify {
            model,
            corpus,
            system,
            out,
        } => {
            let model = LogRegModel::load(&model)?;
            let c = corpus.load()?;
            let preds: Vec<_> = c
                .sentences()
                .iter()
                .map(|s| (s, model.predict(&s.text).label))
                .collect();
            write_jsonl(
                &out,
                preds.iter().map(|(s, l)| PredictionLine {
                    system: &system,
                    sentence_id: &s.sentence_id,
                    label: l.as_str(),
                }),
            )?;
            let gold: Vec<_> = preds.iter().map(|(s, _)| s.label.clone()).collect();
            let pred: Vec<_> = preds.iter().map(|(_, l)| l.clone()).collect();
            let w = cnseg_core::metrics::weighted_f1(&pred, &gold, c.ontology())?;
            println!(
                "{} sentences; weighted P={:.1} R={:.1} F1={:.1}",
                w.n,
                w.precision * 100.0,
                w.recall * 100.0,
                w.f1 * 100.0
            );
        }
        Command::LlmRun {
            endpoint,
            config,
            task,
            corpus,
            cache,
            mock,
            mock_script,
            out,
        } => llm_run(endpoint, config, task, corpus, cache, mock, mock_script, out)?,
        Command::Eval { config, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            let out = match out {
                Some(o) => o,
                None => cfg.resolve(&cfg.out),
            };
            cfg.out = out.clone();
            let result = harness::run_experiment(&cfg)?;
            let names = harness::emit_reports(&result, cfg.min_tag_count, &out)?;
            harness::write_manifest(&cfg, Some(&config), &names, &out)?;
            print!("{}", result.table.to_text());
            println!("reports written to {}", out.display());
        }
        Command::AnnotateServe {
            corpus,
            store,
            port,
            host,
            ontology,
            predictions,
            subsets,
        } => {
            let ontology = load_ontology(ontology.as_deref())?;
            let c = load_sentence_corpus(&corpus, &ontology, LabelMode::Lenient)?;
            let store = AnnotationStore::open(&store)?;
            println!("replayed {} annotation records", store.len());
            let mut svc = AnnotationService::new(c.sentences().to_vec(), ontology.clone(), store);
            if let Some(p) = predictions {
                svc = svc.with_predictions(load_predictions(&p, &ontology)?)?;
            }
            if let Some(p) = subsets {
                svc = svc.with_subsets(load_subsets(&p)?)?;
            }
            let addr: SocketAddr = format!("{host}:{port}").parse().context("listen address")?;
            println!("listening on http://{addr}");
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(cnseg_annotate::serve(Arc::new(svc), addr))?;
        }
        Command::Ontology { out } => {
            let records = LabelOntology::default().to_records();
            let n = records.len();
            write_jsonl(&out, records)?;
            println!("{n} labels -> {}", out.display());
        }
        Command::GenCorpus { kind, notes, seed, out } => {
            let c = match kind {
                SynthKind::HeaderExplicit => synth::header_explicit_corpus(notes, seed, &LabelOntology::default()),
                SynthKind::FullScale => synth::full_scale_corpus(seed),
                SynthKind::Separable => synth::separable_corpus(5, notes, 10, seed),
            };
            c.write_jsonl(&out)?;
            println!(
                "{} notes, {} sentences -> {}",
                c.note_count(),
                c.sentences().len(),
                out.display()
            );
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn llm_run(
    endpoint: String,
    config: Option<PathBuf>,
    task: LlmTask,
    corpus: CorpusArgs,
    cache: Option<PathBuf>,
    mock: bool,
    mock_script: Option<PathBuf>,
    out: PathBuf,
) -> Result<()> {
    let c = corpus.load()?;
    let ontology = c.ontology();
    let file = match &config {
        Some(p) => {
            toml::from_str::<EndpointFile>(&std::fs::read_to_string(p).with_context(|| p.display().to_string())?)?
        }
        None => EndpointFile {
            endpoints: Vec::new(),
            decoding: DecodingParams::default(),
        },
    };
    let ep = match file.endpoints.iter().find(|e| e.name == endpoint) {
        Some(e) => e.clone(),
        None if mock => LlmEndpoint {
            max_parallel: 1,
            backoff_ms: 0,
            ..LlmEndpoint::new(endpoint.clone())
        },
        None => bail!("endpoint {endpoint:?} is not defined in --config"),
    };
    let client: Box<dyn LlmClient> = if mock {
        let behavior = match &mock_script {
            Some(p) => MockBehavior::load(p)?,
            None => MockBehavior::Heuristic,
        };
        Box::new(MockClient::new(behavior, ontology)?)
    } else {
        Box::new(HttpClient)
    };
    let cache = cache.map(ResponseCache::open).transpose()?;
    let notes: Vec<(&str, &[cnseg_core::LabeledSentence])> = c.notes().collect();
    let mut traces = Vec::new();
    match task {
        LlmTask::Classify => {
            let texts: Vec<Vec<&str>> = notes
                .iter()
                .map(|(_, s)| s.iter().map(|x| x.text.as_str()).collect())
                .collect();
            let prompts = texts
                .iter()
                .map(|t| build_prompt(TaskKind::SentenceClassify, ontology, PromptInput::Sentences(t)))
                .collect::<cnseg_core::Result<Vec<_>>>()?;
            let mut lines = Vec::new();
            for (result, (_, sentences)) in
                llm::call_many(client.as_ref(), &ep, &prompts, &file.decoding, cache.as_ref())
                    .into_iter()
                    .zip(&notes)
            {
                let mut trace = result?;
                let parsed = parse_classification(&trace.raw_response, sentences.len(), ontology);
                trace.parse_status = Some(parsed.status);
                for (s, label) in sentences.iter().zip(parsed.labels) {
                    lines.push(serde_json::json!({"system": ep.name, "sentence_id": s.sentence_id, "label": label}));
                }
                traces.push(trace);
            }
            write_jsonl(&out, &lines)?;
        }
        LlmTask::Segment => {
            let free = synthesize_freetext(&c)?;
            let prompts = free
                .notes
                .iter()
                .map(|n| build_prompt(TaskKind::FreetextSegment, ontology, PromptInput::Note(&n.text)))
                .collect::<cnseg_core::Result<Vec<_>>>()?;
            let mut results = Vec::new();
            for (result, note) in llm::call_many(client.as_ref(), &ep, &prompts, &file.decoding, cache.as_ref())
                .into_iter()
                .zip(&free.notes)
            {
                let mut trace = result?;
                let parsed = parse_segmentation(&trace.raw_response, note, ontology, &ep.name);
                trace.parse_status = Some(parsed.status);
                results.push(parsed.result);
                traces.push(trace);
            }
            write_jsonl(&out, &results)?;
            let gold: Vec<BoundarySet> = free
                .notes
                .iter()
                .map(|n| BoundarySet::new(n.note_id.clone(), n.gold.iter().flatten().map(|s| s.token_start)))
                .collect();
            let pred: Vec<BoundarySet> = results.iter().map(boundaries_of).collect();
            print_prf(&ep.name, &pred, &gold)?;
        }
    }
    let trace_path = out.with_extension("traces.jsonl");
    write_jsonl(&trace_path, &traces)?;
    let mut status: BTreeMap<String, usize> = BTreeMap::new();
    for t in &traces {
        *status
            .entry(format!("{:?}", t.parse_status.expect("set above")))
            .or_insert(0) += 1;
    }
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{} responses; parse status {:?}", traces.len(), status)?;
    writeln!(
        stdout,
        "output -> {}, traces -> {}",
        out.display(),
        trace_path.display()
    )?;
    Ok(())
}

use cnseg_core::corpus::synthesize_freetext;
use cnseg_core::harness::{check_leakage, run_experiment, ExperimentConfig};
use cnseg_core::{synth, LabelOntology};

fn config(dir: &std::path::Path, methods: &str) -> ExperimentConfig {
    let corpus = synth::header_explicit_corpus(25, 5, &LabelOntology::default());
    corpus.write_jsonl(&dir.join("s.jsonl")).unwrap();
    let body = format!("sentences = \"s.jsonl\"\nmethods = [{methods}]\nk = 5\nseed = 2\n[train]\nepochs = 5");
    ExperimentConfig::from_toml_str(&body, dir).unwrap()
}

#[test]
fn gold_and_rules_score_perfectly_on_header_explicit_notes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&config(dir.path(), "\"gold\", \"rules\", \"regex\"")).unwrap();
    for row in &out.table.rows {
        assert_eq!(row.sentences.unwrap().f1, 100.0, "{}", row.method);
        assert_eq!(row.freetext.unwrap().f1, 100.0, "{}", row.method);
        assert_eq!(row.avg_f1, Some(100.0));
    }
    assert_eq!(out.plan.k, 5);
    for i in 0..5 {
        check_leakage(&out.plan.run(i)).unwrap();
    }
}

#[test]
fn logreg_has_no_freetext_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&config(dir.path(), "\"logreg\"")).unwrap();
    let row = &out.table.rows[0];
    assert!(row.freetext.is_none());
    assert_eq!(
        row.avg_f1.map(|a| (a * 10.0).round()),
        Some((row.sentences.unwrap().f1 * 10.0).round())
    );
}

#[test]
fn unknown_config_keys_are_rejected() {
    let err = ExperimentConfig::from_toml_str("sentences = \"x\"\nmethods = [\"rules\"]\nfolds = 3", ".");
    assert!(err.is_err());
}

#[test]
fn freetext_gold_starts_each_note_with_a_boundary() {
    let corpus = synth::header_explicit_corpus(50, 8, &LabelOntology::default());
    let free = synthesize_freetext(&corpus).unwrap();
    assert_eq!(free.notes.len(), 50);
    for note in &free.notes {
        let gold = note.gold.as_ref().unwrap();
        assert_eq!(gold[0].token_start, 0);
        assert_eq!(gold.last().unwrap().token_end, note.tokens().len());
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LabelOntology;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskKind {
    SentenceClassify,
    FreetextSegment,
}

impl TaskKind {
    pub fn schema_id(self) -> &'static str {
        match self {
            TaskKind::SentenceClassify => "classify.v1",
            TaskKind::FreetextSegment => "segment.v1",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPrompt {
    pub task: TaskKind,
    pub system: String,
    pub user: String,
    pub schema_id: String,
}

pub enum PromptInput<'a> {
    /// A batch of sentences to label, in note order.
    Sentences(&'a [&'a str]),
    /// The full text of one note.
    Note(&'a str),
}

pub(crate) const SENTENCES_MARKER: &str = "Sentences:";
pub(crate) const NOTE_OPEN: &str = "<<<NOTE\n";
pub(crate) const NOTE_CLOSE: &str = "\nNOTE>>>";

const SYSTEM: &str = "You are a clinical documentation assistant. You identify the sections of clinical notes \
and answer strictly in JSON.";

fn label_block(ontology: &LabelOntology) -> String {
    let mut out = String::from("Allowed labels (copy them exactly):\n");
    for label in ontology.labels() {
        out.push_str("- ");
        out.push_str(label.as_str());
        out.push('\n');
    }
    out.push_str(&format!("Use {} when no other label fits.\n", ontology.fallback()));
    out
}

pub fn build_prompt(task: TaskKind, ontology: &LabelOntology, input: PromptInput<'_>) -> Result<TaskPrompt> {
    let user = match (task, input) {
        (TaskKind::SentenceClassify, PromptInput::Sentences(sentences)) => {
            if sentences.is_empty() {
                return Err(Error::EmptyInput);
            }
            let mut user =
                String::from("Assign exactly one section label to each numbered sentence of a clinical note.\n");
            user.push_str(&label_block(ontology));
            user.push_str(
                "Answer with a JSON array only, one object per sentence, in order:\n\
                 [{\"index\": 0, \"label\": \"<LABEL>\"}, ...]\n\n",
            );
            user.push_str(SENTENCES_MARKER);
            user.push('\n');
            for (i, s) in sentences.iter().enumerate() {
                let flat = s.split_whitespace().collect::<Vec<_>>().join(" ");
                user.push_str(&format!("[{i}] {flat}\n"));
            }
            user
        }
        (TaskKind::FreetextSegment, PromptInput::Note(text)) => {
            if text.trim().is_empty() {
                return Err(Error::EmptyInput);
            }
            let mut user = String::from("Split the clinical note below into its sections.\n");
            user.push_str(&label_block(ontology));
            user.push_str(
                "For every section, in order of appearance, give its label and the first line of the section \
                 copied verbatim from the note.\n\
                 Answer with a JSON array only:\n\
                 [{\"label\": \"<LABEL>\", \"first_line\": \"<first line, verbatim>\"}, ...]\n\n",
            );
            user.push_str(NOTE_OPEN);
            user.push_str(text);
            user.push_str(NOTE_CLOSE);
            user.push('\n');
            user
        }
        (task, _) => {
            return Err(Error::InvalidConfig(format!("input does not fit task {task:?}")));
        }
    };
    Ok(TaskPrompt {
        task,
        system: SYSTEM.to_string(),
        user,
        schema_id: task.schema_id().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_prompt_has_sentence_and_labels() {
        let ont = LabelOntology::default();
        let p = build_prompt(
            TaskKind::SentenceClassify,
            &ont,
            PromptInput::Sentences(&["Allergies: none"]),
        )
        .unwrap();
        assert!(p.user.contains("[0] Allergies: none"));
        for label in ont.labels() {
            assert!(p.user.contains(&format!("- {label}\n")), "{label}");
        }
        let again = build_prompt(
            TaskKind::SentenceClassify,
            &ont,
            PromptInput::Sentences(&["Allergies: none"]),
        )
        .unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn empty_input_rejected() {
        let ont = LabelOntology::default();
        assert!(matches!(
            build_prompt(TaskKind::SentenceClassify, &ont, PromptInput::Sentences(&[])),
            Err(Error::EmptyInput)
        ));
        assert!(matches!(
            build_prompt(TaskKind::FreetextSegment, &ont, PromptInput::Note("  ")),
            Err(Error::EmptyInput)
        ));
        assert!(build_prompt(TaskKind::FreetextSegment, &ont, PromptInput::Sentences(&["x"])).is_err());
    }

    #[test]
    fn segmentation_prompt_embeds_note_verbatim() {
        let ont = LabelOntology::default();
        let text = "ALLERGIES:\npeanuts\nCHIEF COMPLAINT:\npain";
        let p = build_prompt(TaskKind::FreetextSegment, &ont, PromptInput::Note(text)).unwrap();
        assert!(p.user.contains(&format!("{NOTE_OPEN}{text}{NOTE_CLOSE}")));
        assert!(p.user.contains("first_line"));
        assert_eq!(p.schema_id, "segment.v1");
    }
}

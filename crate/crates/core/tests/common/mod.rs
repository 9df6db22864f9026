#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;

use astute_rag::dataset::{self, Dataset};
use astute_rag::gateway::{BackendError, CompletionRequest, FnBackend, Gateway};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn load(name: &str) -> Dataset {
    dataset::load_dataset(fixture(name)).expect("fixture loads")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Generate,
    GenRead,
    Consolidate,
    Answer,
    ClosedBook,
    WithContext,
    SelfRoute,
    UscAggregate,
}

/// Identifies which template produced a prompt.
pub fn classify(prompt: &str) -> PromptKind {
    let starts = |p: &str| prompt.starts_with(p);
    if starts("Generate a background document") {
        PromptKind::GenRead
    } else if starts("Generate ") {
        PromptKind::Generate
    } else if starts("Task: Consolidate") {
        PromptKind::Consolidate
    } else if starts("Task: Answer") {
        PromptKind::Answer
    } else if starts("I have generated the following responses") {
        PromptKind::UscAggregate
    } else if prompt.contains("If the documents do not contain enough information") {
        PromptKind::SelfRoute
    } else if prompt.contains("\nContext: ") {
        PromptKind::WithContext
    } else {
        PromptKind::ClosedBook
    }
}

/// The question a prompt asks about.
pub fn question_of(prompt: &str) -> String {
    if classify(prompt) == PromptKind::UscAggregate {
        let rest = &prompt["I have generated the following responses to the question: ".len()..];
        return rest.lines().next().unwrap_or("").to_string();
    }
    let at = prompt.rfind("Question: ").expect("prompt has a question") + "Question: ".len();
    prompt[at..].lines().next().unwrap_or("").to_string()
}

/// A deterministic stand-in model that knows the first gold answer of every
/// question in `ds`, writes one internal passage, merges documents 1 and 2
/// when consolidating, and picks the first USC response.
pub fn oracle_model(ds: &Dataset) -> Gateway {
    let answers: HashMap<String, String> = ds
        .instances
        .iter()
        .map(|i| (i.question.clone(), i.gold_answers[0].clone()))
        .collect();
    Gateway::new(FnBackend::new("oracle", move |req: &CompletionRequest| {
        let q = question_of(&req.prompt);
        let a = answers
            .get(&q)
            .ok_or_else(|| BackendError::Transport(format!("unknown question {q:?}")))?;
        Ok(match classify(&req.prompt) {
            PromptKind::Generate | PromptKind::GenRead => {
                format!("The town asked about is {a}, according to local histories.")
            }
            PromptKind::Consolidate => format!(
                "Document 1 (merged from documents 1 and 2): Both sources agree the town is {a}."
            ),
            PromptKind::UscAggregate => "The most consistent response is Response 1".into(),
            _ => format!("<ANSWER> {a} </ANSWER>"),
        })
    }))
}

/// Like [`oracle_model`] but every call about a question in `broken` fails.
pub fn flaky_model(ds: &Dataset, broken: &[&str]) -> Gateway {
    let inner = oracle_model(ds);
    let broken: Vec<String> = ds
        .instances
        .iter()
        .filter(|i| broken.contains(&i.id.as_str()))
        .map(|i| i.question.clone())
        .collect();
    Gateway::new(FnBackend::new("flaky", move |req: &CompletionRequest| {
        if broken.contains(&question_of(&req.prompt)) {
            return Err(BackendError::Refusal("blocked by policy".into()));
        }
        inner
            .complete(req)
            .map(|c| c.text)
            .map_err(|e| BackendError::Transport(e.to_string()))
    }))
}

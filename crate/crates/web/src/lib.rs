//! Browser demo: prompt rendering, answer scoring and precision profiling,
//! all computed locally with no model calls.
//!
//! Each export takes plain strings and returns a JSON string, so the page
//! needs no bindings beyond `JSON.parse`.

use astute_rag::dataset::{self, RetrievedPassage};
use astute_rag::eval::{self, PrecisionBuckets};
use astute_rag::pipeline::{build_initial_context, PipelineConfig};
use astute_rag::prompts::{self, ContextState, PassageOrder};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Stand-in for model output the page cannot produce.
pub const PENDING: &str = "<model output from the previous step>";

#[derive(Debug, Serialize)]
pub struct PromptPlan {
    pub api_calls: usize,
    pub generation: String,
    pub initial_context: String,
    pub consolidation: Vec<String>,
    pub finalization: String,
}

fn lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().map(str::trim).filter(|l| !l.is_empty())
}

/// Every prompt an Astute run over `question` would send with `t` iterations.
/// `passages` holds one retrieved passage per line; `internal` stands in for
/// the generation step's output. Prompts that depend on earlier model output
/// show a placeholder there.
pub fn plan_prompts(
    question: &str,
    passages: &str,
    internal: &str,
    t: usize,
    max_internal: usize,
    reversed: bool,
) -> Result<PromptPlan, String> {
    let order = if reversed {
        PassageOrder::Reversed
    } else {
        PassageOrder::AsGiven
    };
    let cfg = PipelineConfig::default()
        .with_iterations(t)
        .with_max_internal(max_internal)
        .with_order(order);
    cfg.validate().map_err(|e| e.to_string())?;

    let generation =
        prompts::render_gen_prompt(question, max_internal).map_err(|e| e.to_string())?;
    let retrieved: Vec<RetrievedPassage> = lines(passages)
        .enumerate()
        .map(|(i, text)| RetrievedPassage::new(i as u32 + 1, format!("passage-{}", i + 1), text))
        .collect();
    let generated = prompts::parse_generated_passages(internal, max_internal);
    let c0 = build_initial_context(&retrieved, &generated, order).map_err(|e| e.to_string())?;

    let pending = ContextState {
        documents: vec![],
        rendered: PENDING.into(),
        step_index: 1,
    };
    let consolidation = (1..t)
        .map(|j| {
            let last = if j == 1 { &c0 } else { &pending };
            prompts::render_consolidation_prompt(question, &c0, last)
        })
        .collect();
    let finalization =
        prompts::render_answer_prompt(question, &c0, (t > 1).then_some(&pending));
    Ok(PromptPlan {
        api_calls: t + 1,
        generation,
        initial_context: c0.rendered,
        consolidation,
        finalization,
    })
}

#[derive(Debug, Serialize)]
pub struct Score {
    pub extracted: Option<String>,
    pub scored_text: String,
    pub correct: bool,
}

/// Extracts the tagged answer from `response` and checks it against the gold
/// variants, one per line.
pub fn score(response: &str, golds: &str) -> Result<Score, String> {
    let golds: Vec<String> = lines(golds).map(String::from).collect();
    if golds.is_empty() {
        return Err("enter at least one gold answer".into());
    }
    let span = prompts::extract_answer(response);
    Ok(Score {
        correct: eval::is_correct(&span, &golds),
        scored_text: span.scoring_text().to_string(),
        extracted: span.extracted,
    })
}

#[derive(Debug, Serialize)]
pub struct Profile {
    pub instances: usize,
    pub without_passages: usize,
    pub bins: Vec<eval::HistogramBin>,
}

/// Retrieval-precision histogram of a pasted JSONL dataset.
pub fn profile(jsonl: &str) -> Result<Profile, String> {
    let ds = dataset::read_dataset("pasted", jsonl.as_bytes()).map_err(|e| e.to_string())?;
    let with: Vec<_> = ds.instances.iter().filter(|i| !i.passages.is_empty()).collect();
    let bins = eval::precision_histogram(with.iter().copied(), &PrecisionBuckets::default())
        .map_err(|e| e.to_string())?;
    Ok(Profile {
        instances: ds.len(),
        without_passages: ds.len() - with.len(),
        bins,
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.map(|v| serde_json::to_string(&v).expect("serializable"))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = planPrompts)]
pub fn plan_prompts_js(
    question: &str,
    passages: &str,
    internal: &str,
    t: usize,
    max_internal: usize,
    reversed: bool,
) -> Result<String, JsValue> {
    to_js(plan_prompts(question, passages, internal, t, max_internal, reversed))
}

#[wasm_bindgen(js_name = scoreAnswer)]
pub fn score_js(response: &str, golds: &str) -> Result<String, JsValue> {
    to_js(score(response, golds))
}

#[wasm_bindgen(js_name = profileDataset)]
pub fn profile_js(jsonl: &str) -> Result<String, JsValue> {
    to_js(profile(jsonl))
}

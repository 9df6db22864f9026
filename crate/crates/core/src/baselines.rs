//! Reference inference strategies run head to head with the pipeline.
//!
//! | kind          | calls | behavior                                             |
//! |---------------|-------|------------------------------------------------------|
//! | `no_rag`      | 1     | closed-book answer                                   |
//! | `vanilla_rag` | 1     | answer over the retrieved passages                   |
//! | `genread`     | 2     | generate a passage, answer over retrieved + generated |
//! | `usc`         | n + 1 | n sampled answers, one aggregation call (n = 3)      |
//! | `self_route`  | 1-2   | answer with retrieval, fall back to closed-book      |

use std::collections::HashMap;
use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::RetrievedPassage;
use crate::eval::normalize_gold;
use crate::gateway::{CompletionRequest, Gateway, GatewayError, DEFAULT_MAX_OUTPUT_TOKENS};
use crate::prompts::{self, AnswerSpan, ContextDocument, PassageOrder, SourceTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    NoRag,
    VanillaRag,
    Genread,
    Usc,
    SelfRoute,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::NoRag,
        BaselineKind::VanillaRag,
        BaselineKind::Genread,
        BaselineKind::Usc,
        BaselineKind::SelfRoute,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::NoRag => "no_rag",
            BaselineKind::VanillaRag => "vanilla_rag",
            BaselineKind::Genread => "genread",
            BaselineKind::Usc => "usc",
            BaselineKind::SelfRoute => "self_route",
        }
    }

    /// Number of model calls a run of this kind makes.
    pub fn call_contract(self, params: &BaselineParams) -> RangeInclusive<usize> {
        match self {
            BaselineKind::NoRag | BaselineKind::VanillaRag => 1..=1,
            BaselineKind::Genread => 2..=2,
            BaselineKind::Usc => params.usc_samples + 1..=params.usc_samples + 1,
            BaselineKind::SelfRoute => 1..=2,
        }
    }

    pub fn needs_retrieval(self) -> bool {
        !matches!(self, BaselineKind::NoRag)
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown baseline {0:?} (expected one of no_rag, vanilla_rag, genread, usc, self_route)")]
pub struct UnknownBaseline(pub String);

impl FromStr for BaselineKind {
    type Err = UnknownBaseline;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "no_rag" | "norag" => Ok(BaselineKind::NoRag),
            "vanilla_rag" | "rag" => Ok(BaselineKind::VanillaRag),
            "genread" => Ok(BaselineKind::Genread),
            "usc" => Ok(BaselineKind::Usc),
            "self_route" | "selfroute" => Ok(BaselineKind::SelfRoute),
            _ => Err(UnknownBaseline(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineParams {
    pub usc_samples: usize,
    pub usc_temperature: f64,
    /// First sampling seed; sample `i` uses `seed + i`.
    pub seed: u64,
    pub deferral_marker: String,
    pub passage_order: PassageOrder,
    pub max_output_tokens: u32,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            usc_samples: 3,
            usc_temperature: 0.7,
            seed: 0,
            deferral_marker: "UNANSWERABLE".into(),
            passage_order: PassageOrder::Reversed,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    WithRag,
    WithoutRag,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub step: String,
    pub prompt: String,
    pub completion: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub kind: BaselineKind,
    pub final_answer: AnswerSpan,
    pub api_calls: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route_taken: Option<Route>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<AnswerSpan>>,
    /// USC only: whether the aggregation call's choice was unusable and the
    /// majority fallback decided.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub used_fallback: bool,
    pub transcript: Vec<Exchange>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BaselineFailure {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("no retrieved passages")]
    NoContext,
    #[error("usc needs at least one sample")]
    NoSamples,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{kind} {step}: {failure}")]
pub struct BaselineError {
    pub kind: BaselineKind,
    pub step: String,
    pub failure: BaselineFailure,
    pub transcript: Vec<Exchange>,
}

struct Runner<'a> {
    gateway: &'a Gateway,
    kind: BaselineKind,
    params: &'a BaselineParams,
    transcript: Vec<Exchange>,
}

impl Runner<'_> {
    fn fail(&mut self, step: &str, failure: BaselineFailure) -> BaselineError {
        BaselineError {
            kind: self.kind,
            step: step.to_string(),
            failure,
            transcript: std::mem::take(&mut self.transcript),
        }
    }

    fn greedy(&self, prompt: String) -> CompletionRequest {
        CompletionRequest::new(prompt).max_output_tokens(self.params.max_output_tokens)
    }

    fn call(&mut self, step: &str, req: CompletionRequest) -> Result<String, BaselineError> {
        match self.gateway.complete(&req) {
            Ok(c) => {
                self.transcript.push(Exchange {
                    step: step.to_string(),
                    prompt: req.prompt,
                    completion: c.text.clone(),
                });
                Ok(c.text)
            }
            Err(e) => Err(self.fail(step, e.into())),
        }
    }

    fn finish(self, final_answer: AnswerSpan) -> BaselineResult {
        BaselineResult {
            kind: self.kind,
            final_answer,
            api_calls: self.transcript.len(),
            route_taken: None,
            samples: None,
            used_fallback: false,
            transcript: self.transcript,
        }
    }
}

fn external_documents(retrieved: &[RetrievedPassage]) -> Vec<ContextDocument> {
    let mut ranked: Vec<&RetrievedPassage> = retrieved.iter().collect();
    ranked.sort_by_key(|p| p.rank);
    ranked
        .into_iter()
        .map(|p| ContextDocument::new(p.text.clone(), SourceTag::external(p.origin.clone())))
        .collect()
}

pub fn run_baseline(
    gateway: &Gateway,
    kind: BaselineKind,
    question: &str,
    retrieved: &[RetrievedPassage],
    params: &BaselineParams,
) -> Result<BaselineResult, BaselineError> {
    let mut r = Runner {
        gateway,
        kind,
        params,
        transcript: Vec::new(),
    };
    if kind.needs_retrieval() && retrieved.is_empty() {
        return Err(r.fail("context", BaselineFailure::NoContext));
    }
    let docs = external_documents(retrieved);
    let context = prompts::render_context(&docs, params.passage_order);

    match kind {
        BaselineKind::NoRag => {
            let text = r.call("answer", r.greedy(prompts::render_closed_book_prompt(question)))?;
            Ok(r.finish(prompts::extract_answer(&text)))
        }
        BaselineKind::VanillaRag => {
            let text = r.call("answer", r.greedy(prompts::render_rag_prompt(question, &context)))?;
            Ok(r.finish(prompts::extract_answer(&text)))
        }
        BaselineKind::Genread => {
            let generated = r.call("generation", r.greedy(prompts::render_genread_prompt(question)))?;
            let mut all = docs;
            all.extend(prompts::parse_generated_passages(&generated, 1));
            let context = prompts::render_context(&all, params.passage_order);
            let text = r.call("answer", r.greedy(prompts::render_rag_prompt(question, &context)))?;
            Ok(r.finish(prompts::extract_answer(&text)))
        }
        BaselineKind::SelfRoute => {
            let marker = params.deferral_marker.as_str();
            let first = r.call(
                "route",
                r.greedy(prompts::render_self_route_prompt(question, &context, marker)),
            )?;
            if first.contains(marker) {
                let text =
                    r.call("fallback", r.greedy(prompts::render_closed_book_prompt(question)))?;
                let mut res = r.finish(prompts::extract_answer(&text));
                res.route_taken = Some(Route::WithoutRag);
                Ok(res)
            } else {
                let mut res = r.finish(prompts::extract_answer(&first));
                res.route_taken = Some(Route::WithRag);
                Ok(res)
            }
        }
        BaselineKind::Usc => run_usc(r, question, &context),
    }
}

fn run_usc(
    mut r: Runner<'_>,
    question: &str,
    context: &str,
) -> Result<BaselineResult, BaselineError> {
    let params = r.params;
    if params.usc_samples == 0 {
        return Err(r.fail("sample", BaselineFailure::NoSamples));
    }
    let prompt = prompts::render_rag_prompt(question, context);
    let requests: Vec<CompletionRequest> = (0..params.usc_samples)
        .map(|i| {
            r.greedy(prompt.clone())
                .temperature(params.usc_temperature)
                .seed(Some(params.seed.wrapping_add(i as u64)))
        })
        .collect();

    // Samples are independent, so they go out together.
    let gateway = r.gateway;
    let outcomes: Vec<Result<String, GatewayError>> = std::thread::scope(|s| {
        let handles: Vec<_> = requests
            .iter()
            .map(|req| s.spawn(move || gateway.complete(req).map(|c| c.text)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sample thread panicked"))
            .collect()
    });
    let mut raw = Vec::with_capacity(outcomes.len());
    for (i, (req, outcome)) in requests.into_iter().zip(outcomes).enumerate() {
        let step = format!("sample {}", i + 1);
        match outcome {
            Ok(text) => {
                r.transcript.push(Exchange {
                    step,
                    prompt: req.prompt,
                    completion: text.clone(),
                });
                raw.push(text);
            }
            Err(e) => return Err(r.fail(&step, e.into())),
        }
    }
    let samples: Vec<AnswerSpan> = raw.iter().map(|t| prompts::extract_answer(t)).collect();

    let agg_prompt = prompts::render_usc_prompt(question, &raw);
    let choice = match r.gateway.complete(&r.greedy(agg_prompt.clone())) {
        Ok(c) => {
            r.transcript.push(Exchange {
                step: "aggregate".into(),
                prompt: agg_prompt,
                completion: c.text.clone(),
            });
            prompts::parse_usc_choice(&c.text, samples.len())
        }
        Err(e) => {
            log::warn!("usc aggregation failed, using majority vote: {e}");
            r.transcript.push(Exchange {
                step: "aggregate".into(),
                prompt: agg_prompt,
                completion: String::new(),
            });
            None
        }
    };
    let (final_answer, used_fallback) = match choice {
        Some(k) => (samples[k].clone(), false),
        None => (usc_fallback_majority(&samples), true),
    };
    let mut res = r.finish(final_answer);
    res.samples = Some(samples);
    res.used_fallback = used_fallback;
    Ok(res)
}

/// Most frequent answer under gold normalization; ties go to the answer seen
/// first. Returns the earliest sample of the winning class.
///
/// # Panics
/// If `samples` is empty.
pub fn usc_fallback_majority(samples: &[AnswerSpan]) -> AnswerSpan {
    assert!(!samples.is_empty(), "majority vote needs at least one sample");
    // class -> (count, first index)
    let mut classes: HashMap<String, (usize, usize)> = HashMap::new();
    for (i, s) in samples.iter().enumerate() {
        classes
            .entry(normalize_gold(s.scoring_text()))
            .or_insert((0, i))
            .0 += 1;
    }
    let (_, first) = classes
        .into_values()
        .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
        .expect("non-empty");
    samples[first].clone()
}

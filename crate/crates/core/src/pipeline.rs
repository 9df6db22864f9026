//! The consolidation pipeline: elicit internal passages, merge them with the
//! retrieved ones, run `t - 1` consolidation rounds, then consolidate and
//! answer in one final call.
//!
//! Every run makes exactly `t + 1` model calls.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::RetrievedPassage;
use crate::gateway::{CompletionRequest, Gateway, GatewayError, DEFAULT_MAX_OUTPUT_TOKENS};
use crate::prompts::{
    self, AnswerSpan, ContextDocument, ContextState, PassageOrder, PromptError, SourceTag,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Number of iterations `t`; `t - 1` explicit consolidation rounds.
    pub iterations: usize,
    /// Cap on passages generated from the model's own knowledge.
    pub max_internal_passages: usize,
    pub passage_order: PassageOrder,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            iterations: 1,
            max_internal_passages: 1,
            passage_order: PassageOrder::Reversed,
            temperature: 0.0,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }
}

impl PipelineConfig {
    pub fn with_iterations(mut self, t: usize) -> Self {
        self.iterations = t;
        self
    }

    pub fn with_max_internal(mut self, m: usize) -> Self {
        self.max_internal_passages = m;
        self
    }

    pub fn with_order(mut self, order: PassageOrder) -> Self {
        self.passage_order = order;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.iterations == 0 {
            return Err(ConfigError("iterations must be >= 1".into()));
        }
        if self.max_internal_passages == 0 {
            return Err(ConfigError("max internal passages must be >= 1".into()));
        }
        Ok(())
    }

    fn request(&self, prompt: String) -> CompletionRequest {
        CompletionRequest::new(prompt)
            .temperature(self.temperature)
            .max_output_tokens(self.max_output_tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid pipeline config: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "step", content = "round", rename_all = "lowercase")]
pub enum Step {
    Generation,
    Context,
    Consolidation(usize),
    Finalization,
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::Generation => f.write_str("generation"),
            Step::Context => f.write_str("context"),
            Step::Consolidation(j) => write!(f, "consolidation {j}"),
            Step::Finalization => f.write_str("finalization"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub step: Step,
    pub prompt: String,
    pub completion: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StepFailure {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("no context available")]
    NoContext,
}

/// A failed run: the step that failed plus everything exchanged before it.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{step}: {failure}")]
pub struct PipelineError {
    pub step: Step,
    pub failure: StepFailure,
    pub transcript: Vec<TranscriptEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub final_answer: AnswerSpan,
    pub internal_passages: Vec<ContextDocument>,
    /// `C_0 ..= C_{t-1}`.
    pub context_states: Vec<ContextState>,
    pub api_calls: usize,
    pub transcript: Vec<TranscriptEntry>,
}

/// `E ⊕ I`: retrieved passages in rank order, then internal passages.
pub fn build_initial_context(
    retrieved: &[RetrievedPassage],
    internal: &[ContextDocument],
    order: PassageOrder,
) -> Result<ContextState, StepFailure> {
    if retrieved.is_empty() && internal.is_empty() {
        return Err(StepFailure::NoContext);
    }
    let mut ranked: Vec<&RetrievedPassage> = retrieved.iter().collect();
    ranked.sort_by_key(|p| p.rank);
    let documents = ranked
        .into_iter()
        .map(|p| ContextDocument::new(p.text.clone(), SourceTag::external(p.origin.clone())))
        .chain(internal.iter().cloned())
        .collect();
    Ok(ContextState::initial(documents, order))
}

pub struct AstuteRag<'g> {
    gateway: &'g Gateway,
    config: PipelineConfig,
}

impl<'g> AstuteRag<'g> {
    pub fn new(gateway: &'g Gateway, config: PipelineConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Self { gateway, config })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn call(&self, prompt: String) -> Result<String, GatewayError> {
        Ok(self.gateway.complete(&self.config.request(prompt))?.text)
    }

    /// One call with the generation prompt; returns `0..=m̂` internal passages.
    pub fn generate_internal(
        &self,
        question: &str,
    ) -> Result<(TranscriptEntry, Vec<ContextDocument>), StepFailure> {
        let prompt = prompts::render_gen_prompt(question, self.config.max_internal_passages)?;
        let completion = self.call(prompt.clone())?;
        let passages =
            prompts::parse_generated_passages(&completion, self.config.max_internal_passages);
        Ok((
            TranscriptEntry {
                step: Step::Generation,
                prompt,
                completion,
            },
            passages,
        ))
    }

    /// One consolidation round. The completion is carried verbatim as the next
    /// state's rendering; parsed documents are attached for tracing.
    pub fn consolidate_step(
        &self,
        question: &str,
        initial: &ContextState,
        last: &ContextState,
    ) -> Result<(TranscriptEntry, ContextState), StepFailure> {
        let prompt = prompts::render_consolidation_prompt(question, initial, last);
        let completion = self.call(prompt.clone())?;
        let next = ContextState {
            documents: prompts::parse_consolidated(&completion, &initial.documents),
            rendered: completion.clone(),
            step_index: last.step_index + 1,
        };
        Ok((
            TranscriptEntry {
                step: Step::Consolidation(next.step_index),
                prompt,
                completion,
            },
            next,
        ))
    }

    /// The combined consolidate-and-answer call.
    pub fn finalize(
        &self,
        question: &str,
        initial: &ContextState,
        consolidated: Option<&ContextState>,
    ) -> Result<(TranscriptEntry, AnswerSpan), StepFailure> {
        let prompt = prompts::render_answer_prompt(question, initial, consolidated);
        let completion = self.call(prompt.clone())?;
        let answer = prompts::extract_answer(&completion);
        Ok((
            TranscriptEntry {
                step: Step::Finalization,
                prompt,
                completion,
            },
            answer,
        ))
    }

    pub fn run(
        &self,
        question: &str,
        retrieved: &[RetrievedPassage],
    ) -> Result<PipelineResult, PipelineError> {
        let mut transcript = Vec::with_capacity(self.config.iterations + 1);
        let fail = |step, failure, transcript: &mut Vec<TranscriptEntry>| PipelineError {
            step,
            failure,
            transcript: std::mem::take(transcript),
        };

        let internal = match self.generate_internal(question) {
            Ok((entry, passages)) => {
                transcript.push(entry);
                passages
            }
            Err(e) => return Err(fail(Step::Generation, e, &mut transcript)),
        };

        let initial = build_initial_context(retrieved, &internal, self.config.passage_order)
            .map_err(|e| fail(Step::Context, e, &mut transcript))?;

        let mut states = vec![initial];
        for j in 1..self.config.iterations {
            let last = states.last().expect("initial state present");
            match self.consolidate_step(question, &states[0], last) {
                Ok((entry, next)) => {
                    transcript.push(entry);
                    states.push(next);
                }
                Err(e) => return Err(fail(Step::Consolidation(j), e, &mut transcript)),
            }
        }

        let consolidated = (states.len() > 1).then(|| states.last().expect("non-empty"));
        let final_answer = match self.finalize(question, &states[0], consolidated) {
            Ok((entry, answer)) => {
                transcript.push(entry);
                answer
            }
            Err(e) => return Err(fail(Step::Finalization, e, &mut transcript)),
        };

        Ok(PipelineResult {
            final_answer,
            internal_passages: internal,
            context_states: states,
            api_calls: transcript.len(),
            transcript,
        })
    }
}

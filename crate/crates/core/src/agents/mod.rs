//! Describe / revise / summarize agents, report refinement and attribute prompts.
//!
//! All model access goes through a [`Backend`], either the deterministic
//! [`MockBackend`] or an [`HttpBackend`] speaking the [`wire`] protocol. [`Agents`]
//! adds retries, transcripts and token budgets on top.

mod backend;
pub mod conformance;
#[cfg(feature = "http")]
mod http;
mod mock;
mod orchestrate;
pub mod script;
pub mod wire;

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PatchRef, Stage, Tokenizer, WhitespaceTokenizer};
use crate::digest::{hash64, sha256_hex};

pub use backend::{Backend, BackendEndpoint, CallError, CallResult, RetryPolicy};
#[cfg(feature = "http")]
pub use http::HttpBackend;
pub use mock::{FaultyBackend, MockBackend, MockConfig, DEFAULT_MOCK_DIM};
pub use orchestrate::{orchestrate_slide, orchestrate_slide_with, EntryFailure, SlideOutput};
pub use script::{
    apply_script, invert_script, perturb_description, OpKind, PerturbConfig, ReviseOp, ReviseScript,
    ScriptError,
};
use wire::*;

/// Default description prompt; `{source}` is replaced by the organ of origin.
pub const DESCRIBE_TEMPLATE: &str = "This is a histopathology image from {source}, describe this image in detail";

/// Recursion depth for splitting overlong findings before hard wrapping.
pub const MAX_SPLIT_DEPTH: usize = 3;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("{stage:?}: backend failed after {attempts} attempt(s): {source}")]
    Backend { stage: Stage, attempts: u32, source: CallError },
    #[error("{stage:?}: empty response after {attempts} attempt(s)")]
    EmptyResponse { stage: Stage, attempts: u32 },
    #[error("{stage:?}: {source}")]
    Script { stage: Stage, source: ScriptError },
    #[error("attributes: backend produced {got} distinct attributes, need {want}")]
    ShortList { got: usize, want: usize },
    #[error("{0}")]
    InvalidInput(String),
    #[error("{stage:?}: malformed response: {msg}")]
    Malformed { stage: Stage, msg: String },
}

impl AgentError {
    /// The backend could not be reached at all; continuing the run is pointless.
    pub fn is_outage(&self) -> bool {
        matches!(self, AgentError::Backend { source: CallError::Unreachable(_), .. })
    }
}

pub type Result<T, E = AgentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentTranscript {
    pub stage: Stage,
    pub request_digest: String,
    pub response_digest: String,
    pub attempts: u32,
    pub backend: String,
}

/// A stage result with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Staged<T> {
    pub value: T,
    pub transcript: AgentTranscript,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Summary {
    pub text: String,
    pub tokens: usize,
    /// The backend never met the budget and the text was cut.
    pub truncated: bool,
}

/// Retry, budget and prompt settings shared by all stages.
#[derive(Debug, Clone)]
pub struct AgentSettings {
    pub retry: RetryPolicy,
    pub describe_template: String,
    pub n_attributes: usize,
    pub token_budget: usize,
}

impl Default for AgentSettings {
    fn default() -> Self {
        Self {
            retry: RetryPolicy::default(),
            describe_template: DESCRIBE_TEMPLATE.to_string(),
            n_attributes: 20,
            token_budget: crate::corpus::DEFAULT_TOKEN_BUDGET,
        }
    }
}

/// Backend plus the per-run state the agent stages share.
pub struct Agents {
    backend: Arc<dyn Backend>,
    tokenizer: Arc<dyn Tokenizer>,
    settings: AgentSettings,
    attributes: Mutex<HashMap<String, Vec<String>>>,
    transcripts: Mutex<Vec<AgentTranscript>>,
}

fn digest_json<T: Serialize>(v: &T) -> String {
    sha256_hex(serde_json::to_string(v).expect("wire types serialize").as_bytes())
}

impl Agents {
    pub fn new(backend: Arc<dyn Backend>, settings: AgentSettings) -> Self {
        Self {
            backend,
            tokenizer: Arc::new(WhitespaceTokenizer),
            settings,
            attributes: Mutex::new(HashMap::new()),
            transcripts: Mutex::new(Vec::new()),
        }
    }

    /// Mock backend without retry delays.
    pub fn mock(seed: u64) -> Self {
        let settings = AgentSettings { retry: RetryPolicy::immediate(3), ..AgentSettings::default() };
        Self::new(Arc::new(MockBackend::with_seed(seed)), settings)
    }

    pub fn with_tokenizer(mut self, tokenizer: Arc<dyn Tokenizer>) -> Self {
        self.tokenizer = tokenizer;
        self
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer.as_ref()
    }

    pub fn settings(&self) -> &AgentSettings {
        &self.settings
    }

    /// Append transcripts to the run log. Callers push in a deterministic order.
    pub fn record(&self, ts: impl IntoIterator<Item = AgentTranscript>) {
        self.transcripts.lock().extend(ts);
    }

    pub fn take_transcripts(&self) -> Vec<AgentTranscript> {
        std::mem::take(&mut *self.transcripts.lock())
    }

    fn transcript<Req: Serialize, Resp: Serialize>(
        &self,
        stage: Stage,
        req: &Req,
        resp: &Resp,
        attempts: u32,
    ) -> AgentTranscript {
        AgentTranscript {
            stage,
            request_digest: digest_json(req),
            response_digest: digest_json(resp),
            attempts,
            backend: self.backend.name().to_string(),
        }
    }

    /// Call with retries. Responses rejected by `accept` count as empty and are retried.
    fn call<Req: Serialize, T>(
        &self,
        stage: Stage,
        req: &Req,
        mut f: impl FnMut(&dyn Backend) -> CallResult<T>,
        accept: impl Fn(&T) -> bool,
    ) -> Result<(T, u32)> {
        let policy = &self.settings.retry;
        let jitter_seed = hash64(digest_json(req).as_bytes());
        let mut last = None;
        for attempt in 1..=policy.max_attempts() {
            if attempt > 1 {
                std::thread::sleep(policy.delay(attempt - 1, jitter_seed));
            }
            match f(self.backend.as_ref()) {
                Ok(v) if accept(&v) => return Ok((v, attempt)),
                Ok(_) => last = None,
                Err(e) if !e.is_retryable() => {
                    return Err(AgentError::Backend { stage, attempts: attempt, source: e })
                }
                Err(e) => last = Some(e),
            }
        }
        let attempts = policy.max_attempts();
        Err(match last {
            Some(source) => AgentError::Backend { stage, attempts, source },
            None => AgentError::EmptyResponse { stage, attempts },
        })
    }

    pub fn describe_prompt(&self, organ_source: &str) -> String {
        self.settings.describe_template.replace("{source}", organ_source)
    }

    pub fn describe(&self, patch: &PatchRef, organ_source: &str) -> Result<Staged<String>> {
        if organ_source.trim().is_empty() {
            return Err(AgentError::InvalidInput("organ source is empty".into()));
        }
        let req = DescribeRequest {
            patch_id: patch.patch_id.clone(),
            uri: patch.uri(),
            source: organ_source.to_string(),
            template: self.describe_prompt(organ_source),
        };
        let (resp, attempts) =
            self.call(Stage::Describe, &req, |b| b.describe(&req), |r| !r.text.trim().is_empty())?;
        let transcript = self.transcript(Stage::Describe, &req, &resp, attempts);
        Ok(Staged { value: resp.text, transcript })
    }

    /// Revised text plus the script that maps `description` onto it.
    pub fn revise(&self, description: &str) -> Result<Staged<(String, ReviseScript)>> {
        if description.trim().is_empty() {
            return Err(AgentError::InvalidInput("description is empty".into()));
        }
        let req = ReviseRequest { text: description.to_string() };
        let (resp, attempts) =
            self.call(Stage::Revise, &req, |b| b.revise(&req), |r| !r.text.trim().is_empty())?;
        let script = ReviseScript::new(description, resp.ops.clone())
            .map_err(|source| AgentError::Script { stage: Stage::Revise, source })?;
        let applied = apply_script(description, &script)
            .map_err(|source| AgentError::Script { stage: Stage::Revise, source })?;
        if applied != resp.text {
            return Err(AgentError::Script {
                stage: Stage::Revise,
                source: ScriptError::InvalidScript("ops do not reproduce the revised text".into()),
            });
        }
        let transcript = self.transcript(Stage::Revise, &req, &resp, attempts);
        Ok(Staged { value: (resp.text, script), transcript })
    }

    /// Summary within `budget` tokens. Over-long answers are re-requested with a
    /// halved token allowance; after the retries are spent the last answer is cut.
    pub fn summarize(&self, description: &str, budget: usize) -> Result<Staged<Summary>> {
        if budget == 0 {
            return Err(AgentError::InvalidInput("token budget must be at least 1".into()));
        }
        let mut total_attempts = 0;
        let mut last: Option<(SummarizeRequest, TextResponse)> = None;
        for round in 0..=self.settings.retry.max_retries {
            let req = SummarizeRequest {
                text: description.to_string(),
                max_tokens: (budget >> round).max(1),
            };
            let (resp, attempts) =
                self.call(Stage::Summarize, &req, |b| b.summarize(&req), |r| !r.text.trim().is_empty())?;
            total_attempts += attempts;
            let tokens = self.tokenizer.count(&resp.text);
            if tokens <= budget {
                let transcript = self.transcript(Stage::Summarize, &req, &resp, total_attempts);
                return Ok(Staged { value: Summary { text: resp.text, tokens, truncated: false }, transcript });
            }
            last = Some((req, resp));
        }
        let (req, resp) = last.expect("at least one round ran");
        let text = self.tokenizer.truncate(&resp.text, budget);
        let tokens = self.tokenizer.count(&text);
        let transcript = self.transcript(Stage::Summarize, &req, &resp, total_attempts);
        Ok(Staged { value: Summary { text, tokens, truncated: true }, transcript })
    }

    fn complete_lines(&self, stage: Stage, req: &CompleteRequest) -> Result<(Vec<String>, AgentTranscript)> {
        let (resp, attempts) = self.call(stage, req, |b| b.complete(req), |_| true)?;
        let lines = resp.text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        Ok((lines, self.transcript(stage, req, &resp, attempts)))
    }

    /// Findings sentences from a raw report, each within `budget` tokens.
    pub fn refine_report(&self, report_raw: &str, budget: usize) -> Result<Staged<Vec<String>>> {
        if report_raw.trim().is_empty() {
            return Err(AgentError::InvalidInput("report is empty".into()));
        }
        if budget == 0 {
            return Err(AgentError::InvalidInput("token budget must be at least 1".into()));
        }
        let req = CompleteRequest {
            task: CompleteTask::RefineReport,
            text: report_raw.to_string(),
            count: 0,
            attempt: 0,
        };
        let (lines, transcript) = self.complete_lines(Stage::RefineReport, &req)?;
        let mut extra = Vec::new();
        let mut out = Vec::new();
        for line in lines {
            self.fit_finding(line, budget, 0, &mut out, &mut extra)?;
        }
        self.record(extra);
        Ok(Staged { value: out, transcript })
    }

    fn fit_finding(
        &self,
        sentence: String,
        budget: usize,
        depth: usize,
        out: &mut Vec<String>,
        log: &mut Vec<AgentTranscript>,
    ) -> Result<()> {
        let tokens = self.tokenizer.count(&sentence);
        if tokens <= budget {
            out.push(sentence);
            return Ok(());
        }
        if depth < MAX_SPLIT_DEPTH {
            let req = CompleteRequest {
                task: CompleteTask::SplitFinding,
                text: sentence.clone(),
                count: 0,
                attempt: 0,
            };
            let (pieces, t) = self.complete_lines(Stage::RefineReport, &req)?;
            log.push(t);
            // a split that makes no progress would recurse on the same text
            let progress = pieces.len() > 1 && pieces.iter().all(|p| self.tokenizer.count(p) < tokens);
            if progress {
                for p in pieces {
                    self.fit_finding(p, budget, depth + 1, out, log)?;
                }
                return Ok(());
            }
        }
        out.extend(self.tokenizer.wrap(&sentence, budget));
        Ok(())
    }

    /// `n_attributes` distinct microscopic attributes for an organ, cached per organ.
    pub fn attribute_prompts(&self, organ_source: &str) -> Result<Vec<String>> {
        if organ_source.trim().is_empty() {
            return Err(AgentError::InvalidInput("organ source is empty".into()));
        }
        let mut cache = self.attributes.lock();
        if let Some(hit) = cache.get(organ_source) {
            return Ok(hit.clone());
        }
        let want = self.settings.n_attributes;
        let mut got: Vec<String> = Vec::new();
        let mut log = Vec::new();
        for attempt in 0..=self.settings.retry.max_retries {
            let req = CompleteRequest {
                task: CompleteTask::Attributes,
                text: organ_source.to_string(),
                count: want,
                attempt,
            };
            let (lines, t) = self.complete_lines(Stage::Attributes, &req)?;
            log.push(t);
            for l in lines {
                if !got.contains(&l) {
                    got.push(l);
                }
            }
            if got.len() >= want {
                got.truncate(want);
                self.record(log);
                cache.insert(organ_source.to_string(), got.clone());
                return Ok(got);
            }
        }
        self.record(log);
        Err(AgentError::ShortList { got: got.len(), want })
    }

    /// Unit-normalized text embeddings.
    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let req = EmbedTextRequest { texts: texts.to_vec() };
        let resp = self.embed_call(&req, texts.len(), |b| b.embed_text(&req))?;
        normalized_rows(resp)
    }

    /// Unit-normalized image embeddings for a batch of patches.
    pub fn embed_images(&self, patches: &[PatchRef]) -> Result<Vec<Vec<f32>>> {
        let req = EmbedImageRequest {
            patch_ids: patches.iter().map(|p| p.patch_id.clone()).collect(),
            uris: patches.iter().map(PatchRef::uri).collect(),
        };
        let resp = self.embed_call(&req, patches.len(), |b| b.embed_image(&req))?;
        normalized_rows(resp)
    }

    fn embed_call<Req: Serialize>(
        &self,
        req: &Req,
        n: usize,
        f: impl FnMut(&dyn Backend) -> CallResult<EmbedResponse>,
    ) -> Result<EmbedResponse> {
        self.call(Stage::Embed, req, f, |r| r.vectors.len() == n)
            .map(|(r, _)| r)
            .map_err(|e| match e {
                AgentError::EmptyResponse { attempts, .. } => AgentError::Malformed {
                    stage: Stage::Embed,
                    msg: format!("wrong vector count after {attempts} attempt(s)"),
                },
                other => other,
            })
    }
}

fn normalized_rows(resp: EmbedResponse) -> Result<Vec<Vec<f32>>> {
    resp.vectors
        .iter()
        .map(|v| {
            if v.len() != resp.d {
                return Err(AgentError::Malformed {
                    stage: Stage::Embed,
                    msg: format!("vector of length {} but d = {}", v.len(), resp.d),
                });
            }
            crate::vectors::normalize_vec(v)
                .ok_or(AgentError::Malformed { stage: Stage::Embed, msg: "zero embedding vector".into() })
        })
        .collect()
}

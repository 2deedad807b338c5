//! Revise scripts: ordered add / delete / modify edits over character spans, with
//! an exact inverse.
//!
//! Offsets count Unicode scalar values, not bytes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScriptError {
    #[error("script digest does not match the text")]
    DigestMismatch,
    #[error("invalid script: {0}")]
    InvalidScript(String),
    #[error("text has {units} sentence units, need {needed}")]
    TooShort { units: usize, needed: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Add,
    Delete,
    Modify,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviseOp {
    pub kind: OpKind,
    #[serde(rename = "start")]
    pub span_start: usize,
    #[serde(rename = "end")]
    pub span_end: usize,
    #[serde(default)]
    pub payload: String,
}

impl ReviseOp {
    pub fn add(at: usize, payload: impl Into<String>) -> Self {
        Self { kind: OpKind::Add, span_start: at, span_end: at, payload: payload.into() }
    }

    pub fn delete(start: usize, end: usize) -> Self {
        Self { kind: OpKind::Delete, span_start: start, span_end: end, payload: String::new() }
    }

    pub fn modify(start: usize, end: usize, payload: impl Into<String>) -> Self {
        Self { kind: OpKind::Modify, span_start: start, span_end: end, payload: payload.into() }
    }

    fn payload_len(&self) -> usize {
        self.payload.chars().count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviseScript {
    pub ops: Vec<ReviseOp>,
    pub source_digest: String,
}

impl ReviseScript {
    /// Script over `source`, validated.
    pub fn new(source: &str, ops: Vec<ReviseOp>) -> Result<Self, ScriptError> {
        validate_ops(&ops, source.chars().count())?;
        Ok(Self { ops, source_digest: text_digest(source) })
    }

    pub fn empty(source: &str) -> Self {
        Self { ops: Vec::new(), source_digest: text_digest(source) }
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }
}

pub fn text_digest(text: &str) -> String {
    sha256_hex(text.as_bytes())
}

fn validate_ops(ops: &[ReviseOp], len: usize) -> Result<(), ScriptError> {
    let mut prev_end = 0;
    for (i, op) in ops.iter().enumerate() {
        if op.span_start > op.span_end || op.span_end > len {
            return Err(ScriptError::InvalidScript(format!(
                "op {i}: span {}..{} out of range for length {len}",
                op.span_start, op.span_end
            )));
        }
        match op.kind {
            OpKind::Add if op.span_start != op.span_end => {
                return Err(ScriptError::InvalidScript(format!("op {i}: add with non-empty span")))
            }
            OpKind::Delete if !op.payload.is_empty() => {
                return Err(ScriptError::InvalidScript(format!("op {i}: delete with payload")))
            }
            _ => {}
        }
        if op.span_start < prev_end {
            return Err(ScriptError::InvalidScript(format!("op {i}: overlaps or out of order")));
        }
        prev_end = op.span_end;
    }
    Ok(())
}

fn byte_offsets(text: &str) -> Vec<usize> {
    text.char_indices().map(|(b, _)| b).chain(std::iter::once(text.len())).collect()
}

/// Apply `script` to `text`, right to left so earlier offsets stay valid.
pub fn apply_script(text: &str, script: &ReviseScript) -> Result<String, ScriptError> {
    if text_digest(text) != script.source_digest {
        return Err(ScriptError::DigestMismatch);
    }
    apply_ops(text, &script.ops)
}

/// [`apply_script`] without the digest check.
pub fn apply_ops(text: &str, ops: &[ReviseOp]) -> Result<String, ScriptError> {
    let offsets = byte_offsets(text);
    validate_ops(ops, offsets.len() - 1)?;
    let mut out = text.to_string();
    for op in ops.iter().rev() {
        out.replace_range(offsets[op.span_start]..offsets[op.span_end], &op.payload);
    }
    Ok(out)
}

/// Script that undoes `script`: adds become deletes of the inserted span, deletes
/// become adds of the removed text, modifies swap old and new text.
pub fn invert_script(script: &ReviseScript, source: &str) -> Result<ReviseScript, ScriptError> {
    let target = apply_script(source, script)?;
    let chars: Vec<char> = source.chars().collect();
    let mut shift: isize = 0;
    let mut ops = Vec::with_capacity(script.ops.len());
    for op in &script.ops {
        let start = (op.span_start as isize + shift) as usize;
        let removed: String = chars[op.span_start..op.span_end].iter().collect();
        let inserted = op.payload_len();
        ops.push(match op.kind {
            OpKind::Add => ReviseOp::delete(start, start + inserted),
            OpKind::Delete => ReviseOp::add(start, removed),
            OpKind::Modify => ReviseOp::modify(start, start + inserted, removed),
        });
        shift += inserted as isize - (op.span_end - op.span_start) as isize;
    }
    ReviseScript::new(&target, ops)
}

/// Split into sentence units on `". "`. Each unit keeps its trailing separator, so
/// the units concatenate back to the text. Returns char-offset spans.
pub fn sentence_units(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<char> = text.chars().collect();
    let mut units = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i + 1 < chars.len() {
        if chars[i] == '.' && chars[i + 1] == ' ' {
            units.push((start, i + 2));
            start = i + 2;
            i += 2;
        } else {
            i += 1;
        }
    }
    if start < chars.len() {
        units.push((start, chars.len()));
    }
    units
}

/// How [`perturb_description`] picks operation kinds.
#[derive(Debug, Clone)]
pub struct PerturbConfig {
    /// Relative weights for add, delete, modify.
    pub kind_weights: [f64; 3],
    /// Sentences used as add / modify payloads.
    pub lexicon: Vec<String>,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            kind_weights: [1.0, 1.0, 1.0],
            lexicon: CONTRADICTIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl PerturbConfig {
    pub fn only(kind: OpKind) -> Self {
        let mut w = [0.0; 3];
        w[kind as usize] = 1.0;
        Self { kind_weights: w, ..Self::default() }
    }
}

const CONTRADICTIONS: &[&str] = &[
    "No nuclear atypia is identified",
    "The stroma is entirely devoid of inflammatory cells",
    "Mitotic figures are abundant throughout the field",
    "The glands show a perfectly preserved architecture",
    "Extensive necrosis occupies most of the section",
    "The nuclei are small, round and uniformly hyperchromatic",
    "There is prominent lymphocytic infiltration of the epithelium",
    "No tumor cells are present in this region",
    "The tissue consists mainly of mature adipocytes",
    "Keratin pearls are readily seen",
];

/// Inject `n_ops` seeded inaccuracies at sentence granularity. Returns the modified
/// text and the forward script; the inverse of that script restores `description`.
pub fn perturb_description(
    description: &str,
    n_ops: usize,
    seed: u64,
    cfg: &PerturbConfig,
) -> Result<(String, ReviseScript), ScriptError> {
    let units = sentence_units(description);
    if n_ops == 0 || units.len() < n_ops {
        return Err(ScriptError::TooShort { units: units.len(), needed: n_ops.max(1) });
    }
    if cfg.lexicon.is_empty() && cfg.kind_weights[0] + cfg.kind_weights[2] > 0.0 {
        return Err(ScriptError::InvalidScript("empty contradiction lexicon".into()));
    }
    let kinds = rand_distr::weighted::WeightedIndex::new(cfg.kind_weights)
        .map_err(|e| ScriptError::InvalidScript(format!("kind weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, units.len(), n_ops).into_vec();
    picked.sort_unstable();
    let chars: Vec<char> = description.chars().collect();
    let mut ops = Vec::with_capacity(n_ops);
    for u in picked {
        let (start, end) = units[u];
        let kind = [OpKind::Add, OpKind::Delete, OpKind::Modify][rng.sample(&kinds)];
        ops.push(match kind {
            OpKind::Add => {
                let p = &cfg.lexicon[rng.random_range(0..cfg.lexicon.len())];
                ReviseOp::add(start, format!("{p}. "))
            }
            OpKind::Delete => ReviseOp::delete(start, end),
            OpKind::Modify => {
                let p = &cfg.lexicon[rng.random_range(0..cfg.lexicon.len())];
                // replace the sentence body, keep its ". " separator
                let body_end = if end - start >= 2 && chars[end - 2] == '.' && chars[end - 1] == ' ' {
                    end - 2
                } else {
                    end
                };
                ReviseOp::modify(start, body_end, p.clone())
            }
        });
    }
    let script = ReviseScript::new(description, ops)?;
    let modified = apply_script(description, &script)?;
    Ok((modified, script))
}

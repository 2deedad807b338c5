//! Representative patch selection for one slide, then probabilistic dedup.
//!
//! Candidates come from three routes: the top patches for the slide's report
//! findings, the top patches for organ attribute prompts, and an even draw across
//! k-means clusters of the remaining patches. Near-duplicate candidates are then
//! dropped with a probability that grows with their similarity to what was kept.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentError, Agents};
use crate::corpus::{PatchRef, SelectionRoute, SlideRecord, SCHEMA_VERSION};
use crate::digest::{derive_seed, sha256_hex};
use crate::par::{self, Exec};
use crate::vectors::{
    self, cluster_count_rule, dot, kmeans_fit_with, l2_normalize, top_k, uniform_cluster_sample_excluding,
    EmbeddingMatrix, VectorError,
};

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("no prompts given")]
    EmptyPrompts,
    #[error("candidate set for {0} is already deduplicated")]
    AlreadyDeduped(String),
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("slide {slide_id}: {msg}")]
    Patches { slide_id: String, msg: String },
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("candidate dump line {line}: {msg}")]
    Dump { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ExtractionError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub top_k_per_category: usize,
    pub cluster_sample_total: usize,
    pub target_total: usize,
    pub dedup_threshold: f64,
    pub token_budget: usize,
    pub n_attributes: usize,
    pub kmeans_max_iter: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            top_k_per_category: 64,
            cluster_sample_total: 256,
            target_total: 384,
            dedup_threshold: 0.88,
            token_budget: 77,
            n_attributes: 20,
            kmeans_max_iter: 50,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(ExtractionError::Config(m.to_string()));
        if !(self.dedup_threshold > 0.0 && self.dedup_threshold < 1.0) {
            return err("dedup_threshold must lie strictly between 0 and 1");
        }
        if [self.top_k_per_category, self.cluster_sample_total, self.target_total, self.token_budget, self.n_attributes, self.kmeans_max_iter]
            .contains(&0)
        {
            return err("all counts must be at least 1");
        }
        if self.target_total != self.cluster_sample_total + 2 * self.top_k_per_category {
            return err("target_total must equal cluster_sample_total + 2 * top_k_per_category");
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// The patches of one slide with their normalized embeddings, row-aligned.
#[derive(Debug, Clone)]
pub struct SlidePatches {
    pub embeds: EmbeddingMatrix,
    pub patches: Vec<PatchRef>,
}

impl SlidePatches {
    /// Pair embedding rows with patches. Row ids must be `slide_id:col:row` keys
    /// inside the slide's grid. Rows are normalized if needed.
    pub fn new(slide: &SlideRecord, embeds: EmbeddingMatrix) -> Result<Self> {
        let bad = |msg: String| ExtractionError::Patches { slide_id: slide.slide_id.clone(), msg };
        let mut patches = Vec::with_capacity(embeds.n());
        let mut seen = HashSet::new();
        for id in embeds.ids() {
            let p = PatchRef::parse_key(id).ok_or_else(|| bad(format!("bad patch key {id:?}")))?;
            if p.slide_id != slide.slide_id || p.col >= slide.grid_w || p.row >= slide.grid_h {
                return Err(bad(format!("patch {id:?} outside the slide grid")));
            }
            if !seen.insert((p.col, p.row)) {
                return Err(bad(format!("patch {id:?} listed twice")));
            }
            patches.push(p);
        }
        if patches.is_empty() {
            return Err(bad("no patches".into()));
        }
        let embeds = if embeds.is_normalized() { embeds } else { l2_normalize(&embeds)? };
        Ok(Self { embeds, patches })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub index: usize,
    pub patch: PatchRef,
    pub score: f64,
}

/// Per-patch score: max cosine over the prompt vectors.
fn aggregate_scores(prompt_vecs: &[Vec<f32>], embeds: &EmbeddingMatrix, exec: Exec) -> Vec<f64> {
    par::map_range(exec, embeds.n(), |i| {
        prompt_vecs
            .iter()
            .map(|q| dot(q, embeds.row(i)).clamp(-1.0, 1.0))
            .fold(f64::NEG_INFINITY, f64::max)
    })
}

fn embed_prompts(agents: &Agents, prompts: &[String], d: usize) -> Result<Vec<Vec<f32>>> {
    if prompts.is_empty() {
        return Err(ExtractionError::EmptyPrompts);
    }
    let vecs = agents.embed_texts(prompts)?;
    if vecs.iter().any(|v| v.len() != d) {
        return Err(VectorError::Shape(format!("prompt embeddings do not have dimension {d}")).into());
    }
    Ok(vecs)
}

/// Top `cfg.top_k_per_category` patches by max similarity over `prompts`.
pub fn retrieve_by_prompts(
    prompts: &[String],
    patches: &SlidePatches,
    agents: &Agents,
    cfg: &PipelineConfig,
) -> Result<Vec<RetrievalHit>> {
    let vecs = embed_prompts(agents, prompts, patches.embeds.d())?;
    let scores = aggregate_scores(&vecs, &patches.embeds, Exec::default());
    Ok(top_k(scores.into_iter().enumerate().collect(), cfg.top_k_per_category)
        .into_iter()
        .map(|(index, score)| RetrievalHit { index, patch: patches.patches[index].clone(), score })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEntry {
    pub index: usize,
    pub patch: PatchRef,
    pub route: SelectionRoute,
    /// Max similarity to any retrieval prompt of the slide.
    pub best_score: f64,
}

/// One dedup decision, in scan order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupDecision {
    pub index: usize,
    pub kept: bool,
    /// Max similarity to the entries kept before this one; `None` for the first.
    pub s_star: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub slide_id: String,
    pub entries: Vec<CandidateEntry>,
    pub deduped: bool,
    /// Filled by [`probabilistic_dedup`].
    pub decisions: Vec<DedupDecision>,
}

impl CandidateSet {
    pub fn route_counts(&self) -> HashMap<SelectionRoute, usize> {
        let mut m = HashMap::new();
        for e in &self.entries {
            *m.entry(e.route).or_insert(0) += 1;
        }
        m
    }
}

pub fn build_candidate_set(
    slide: &SlideRecord,
    patches: &SlidePatches,
    agents: &Agents,
    cfg: &PipelineConfig,
) -> Result<CandidateSet> {
    build_candidate_set_with(slide, patches, agents, cfg, Exec::default())
}

pub fn build_candidate_set_with(
    slide: &SlideRecord,
    patches: &SlidePatches,
    agents: &Agents,
    cfg: &PipelineConfig,
    exec: Exec,
) -> Result<CandidateSet> {
    cfg.validate()?;
    let n = patches.len();
    let d = patches.embeds.d();
    let attributes = agents.attribute_prompts(&slide.organ_source)?;
    let attr_vecs = embed_prompts(agents, &attributes, d)?;
    let report_vecs = if slide.findings.is_empty() {
        Vec::new()
    } else {
        embed_prompts(agents, &slide.findings, d)?
    };
    let attr_scores = aggregate_scores(&attr_vecs, &patches.embeds, exec);
    let report_scores = (!report_vecs.is_empty()).then(|| aggregate_scores(&report_vecs, &patches.embeds, exec));
    let best = |i: usize| match &report_scores {
        Some(r) => r[i].max(attr_scores[i]),
        None => attr_scores[i],
    };

    let mut selected: HashSet<usize> = HashSet::new();
    let mut entries = Vec::with_capacity(cfg.target_total);
    let take = |scores: &[f64], route, selected: &mut HashSet<usize>, entries: &mut Vec<CandidateEntry>| {
        let pool = scores.iter().copied().enumerate().filter(|(i, _)| !selected.contains(i)).collect();
        for (index, _) in top_k(pool, cfg.top_k_per_category) {
            selected.insert(index);
            entries.push(CandidateEntry { index, patch: patches.patches[index].clone(), route, best_score: best(index) });
        }
    };
    if let Some(r) = &report_scores {
        take(r, SelectionRoute::ReportPrompt, &mut selected, &mut entries);
    }
    take(&attr_scores, SelectionRoute::AttributePrompt, &mut selected, &mut entries);

    let remaining = n - selected.len();
    let cluster_total = cfg.cluster_sample_total.min(remaining).min(cfg.target_total - entries.len());
    if cluster_total > 0 {
        let k = cluster_count_rule(n);
        let model = kmeans_fit_with(
            &patches.embeds,
            k,
            derive_seed(cfg.seed, &format!("kmeans:{}", slide.slide_id)),
            cfg.kmeans_max_iter,
            exec,
        )?;
        let drawn = uniform_cluster_sample_excluding(
            &model.assignments,
            k,
            &selected,
            cluster_total,
            derive_seed(cfg.seed, &format!("cluster-sample:{}", slide.slide_id)),
        )?;
        for index in drawn {
            entries.push(CandidateEntry {
                index,
                patch: patches.patches[index].clone(),
                route: SelectionRoute::Cluster,
                best_score: best(index),
            });
        }
    }
    Ok(CandidateSet { slide_id: slide.slide_id.clone(), entries, deduped: false, decisions: Vec::new() })
}

/// Drop probability for a candidate whose nearest kept neighbour has similarity `s`.
pub fn drop_probability(s: f64, threshold: f64) -> f64 {
    ((s - threshold) / (1.0 - threshold)).clamp(0.0, 1.0)
}

/// Scan candidates by descending `best_score` (ties by row index). A candidate
/// whose max similarity `s*` to the already-kept set is below the threshold is
/// kept; otherwise it is dropped with probability [`drop_probability`]. Kept
/// entries retain their original order.
pub fn probabilistic_dedup(cand: &CandidateSet, patches: &SlidePatches, cfg: &PipelineConfig) -> Result<CandidateSet> {
    let seed = derive_seed(cfg.seed, &format!("dedup:{}", cand.slide_id));
    probabilistic_dedup_seeded(cand, &patches.embeds, cfg.dedup_threshold, seed)
}

pub fn probabilistic_dedup_seeded(
    cand: &CandidateSet,
    embeds: &EmbeddingMatrix,
    threshold: f64,
    seed: u64,
) -> Result<CandidateSet> {
    if cand.deduped {
        return Err(ExtractionError::AlreadyDeduped(cand.slide_id.clone()));
    }
    if !embeds.is_normalized() {
        return Err(VectorError::NotNormalized.into());
    }
    let mut order: Vec<usize> = (0..cand.entries.len()).collect();
    order.sort_by(|&a, &b| {
        let (ea, eb) = (&cand.entries[a], &cand.entries[b]);
        vectors::rank_order(&(ea.index, ea.best_score), &(eb.index, eb.best_score))
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept_rows: Vec<usize> = Vec::new();
    let mut keep = vec![false; cand.entries.len()];
    let mut decisions = Vec::with_capacity(order.len());
    for pos in order {
        let row = cand.entries[pos].index;
        let s_star = kept_rows
            .iter()
            .map(|&k| dot(embeds.row(k), embeds.row(row)).clamp(-1.0, 1.0))
            .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))));
        let kept = match s_star {
            Some(s) if s >= threshold => rng.random::<f64>() >= drop_probability(s, threshold),
            _ => true,
        };
        if kept {
            kept_rows.push(row);
            keep[pos] = true;
        }
        decisions.push(DedupDecision { index: row, kept, s_star });
    }
    let entries = cand.entries.iter().zip(&keep).filter(|(_, &k)| k).map(|(e, _)| e.clone()).collect();
    Ok(CandidateSet { slide_id: cand.slide_id.clone(), entries, deduped: true, decisions })
}

/// One audit line of a candidate dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpRecord {
    pub patch_id: String,
    pub slide_id: String,
    pub col: u32,
    pub row: u32,
    pub index: usize,
    pub route: SelectionRoute,
    pub best_score: f64,
    pub kept: bool,
    pub s_star: Option<f64>,
}

/// First line of a candidate dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub schema_version: String,
    pub config_digest: String,
    pub slide_id: String,
}

impl DumpHeader {
    pub fn new(slide_id: &str, config_digest: &str) -> Self {
        Self { schema_version: SCHEMA_VERSION.into(), config_digest: config_digest.into(), slide_id: slide_id.into() }
    }
}

/// Write a header, then every pre-dedup candidate with its dedup decision, in candidate order.
pub fn write_candidate_dump(before: &CandidateSet, after: &CandidateSet, header: &DumpHeader, path: &Path) -> Result<()> {
    let by_row: HashMap<usize, &DedupDecision> = after.decisions.iter().map(|d| (d.index, d)).collect();
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", serde_json::to_string(header).expect("header serializes"))?;
    for e in &before.entries {
        let d = by_row.get(&e.index);
        let rec = DumpRecord {
            patch_id: e.patch.patch_id.clone(),
            slide_id: e.patch.slide_id.clone(),
            col: e.patch.col,
            row: e.patch.row,
            index: e.index,
            route: e.route,
            best_score: e.best_score,
            kept: d.is_none_or(|d| d.kept),
            s_star: d.and_then(|d| d.s_star),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("dump serializes"))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_candidate_dump(path: &Path) -> Result<(DumpHeader, Vec<DumpRecord>)> {
    let mut header = None;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |e: serde_json::Error| ExtractionError::Dump { line: i + 1, msg: e.to_string() };
        if header.is_none() {
            let h: DumpHeader = serde_json::from_str(&line).map_err(bad)?;
            if h.schema_version != SCHEMA_VERSION {
                return Err(ExtractionError::Dump { line: 1, msg: format!("unsupported schema {}", h.schema_version) });
            }
            header = Some(h);
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(bad)?);
    }
    let header = header.ok_or(ExtractionError::Dump { line: 1, msg: "missing header".into() })?;
    Ok((header, out))
}

/// Kept entries of a dump as a deduplicated candidate set.
pub fn kept_candidates(slide_id: &str, dump: &[DumpRecord]) -> CandidateSet {
    let entries = dump
        .iter()
        .filter(|r| r.kept)
        .map(|r| CandidateEntry {
            index: r.index,
            patch: PatchRef::new(&r.slide_id, r.col, r.row),
            route: r.route,
            best_score: r.best_score,
        })
        .collect();
    CandidateSet { slide_id: slide_id.to_string(), entries, deduped: true, decisions: Vec::new() }
}

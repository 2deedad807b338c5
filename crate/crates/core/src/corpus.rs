//! Slide manifests, generated pair records and token accounting.
//!
//! Both the manifest and the pairs output are line-delimited JSON. The pairs file
//! always starts with a [`PairsHeader`] line.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;

pub const SCHEMA_VERSION: &str = "1";
pub const DEFAULT_TOKEN_BUDGET: usize = 77;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate slide id {0:?}")]
    DuplicateSlideId(String),
    #[error("slide {slide_id:?}: grid {grid_w}x{grid_h} (tile {tile_px}px) out of range")]
    GridOutOfRange { slide_id: String, grid_w: u32, grid_h: u32, tile_px: u32 },
    #[error("slide {slide_id:?}: finding {index} has {tokens} tokens, budget is {budget}")]
    FindingTooLong { slide_id: String, index: usize, tokens: usize, budget: usize },
    #[error("unsupported schema version {0:?}")]
    UnsupportedSchema(String),
    #[error("incomplete record for patch {patch_id}: {reason}")]
    IncompleteRecord { patch_id: String, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// Counts tokens of a text and cuts texts down to a token budget.
pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> usize;
    /// Longest prefix of `text` (on token boundaries) holding at most `max` tokens.
    fn truncate(&self, text: &str, max: usize) -> String;
    /// Consecutive pieces of at most `max` tokens covering every token of `text`.
    fn wrap(&self, text: &str, max: usize) -> Vec<String>;
}

/// Whitespace-delimited units. The default tokenizer.
#[derive(Debug, Default, Clone, Copy)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    fn truncate(&self, text: &str, max: usize) -> String {
        text.split_whitespace().take(max).collect::<Vec<_>>().join(" ")
    }

    fn wrap(&self, text: &str, max: usize) -> Vec<String> {
        let words: Vec<&str> = text.split_whitespace().collect();
        words.chunks(max.max(1)).map(|c| c.join(" ")).collect()
    }
}

pub fn count_tokens(text: &str, tokenizer: &dyn Tokenizer) -> usize {
    tokenizer.count(text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub slide_id: String,
    pub organ_source: String,
    pub grid_w: u32,
    pub grid_h: u32,
    pub tile_px: u32,
    #[serde(default)]
    pub findings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_raw: Option<String>,
}

impl SlideRecord {
    pub fn patch_count(&self) -> usize {
        self.grid_w as usize * self.grid_h as usize
    }

    /// Patch at row-major grid index `index`.
    pub fn patch_at(&self, index: usize) -> PatchRef {
        let w = self.grid_w as usize;
        PatchRef::new(&self.slide_id, (index % w) as u32, (index / w) as u32)
    }

    fn validate(&self, tokenizer: &dyn Tokenizer, budget: usize) -> Result<()> {
        if self.grid_w == 0 || self.grid_h == 0 || self.tile_px == 0 {
            return Err(CorpusError::GridOutOfRange {
                slide_id: self.slide_id.clone(),
                grid_w: self.grid_w,
                grid_h: self.grid_h,
                tile_px: self.tile_px,
            });
        }
        for (index, f) in self.findings.iter().enumerate() {
            let tokens = tokenizer.count(f);
            if tokens > budget {
                return Err(CorpusError::FindingTooLong {
                    slide_id: self.slide_id.clone(),
                    index,
                    tokens,
                    budget,
                });
            }
        }
        Ok(())
    }
}

/// A tile of a slide addressed by grid coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchRef {
    pub slide_id: String,
    pub col: u32,
    pub row: u32,
    pub patch_id: String,
}

impl PatchRef {
    pub fn new(slide_id: &str, col: u32, row: u32) -> Self {
        Self { slide_id: slide_id.to_string(), col, row, patch_id: patch_id(slide_id, col, row) }
    }

    /// `slide_id:col:row`, the form used in embedding id lists.
    pub fn key(&self) -> String {
        format!("{}:{}:{}", self.slide_id, self.col, self.row)
    }

    /// Inverse of [`PatchRef::key`]. The slide id may itself contain colons.
    pub fn parse_key(key: &str) -> Option<Self> {
        let mut it = key.rsplitn(3, ':');
        let row = it.next()?.parse().ok()?;
        let col = it.next()?.parse().ok()?;
        let slide = it.next()?;
        Some(Self::new(slide, col, row))
    }

    /// Opaque locator handed to image backends.
    pub fn uri(&self) -> String {
        format!("patch://{}/{}/{}", self.slide_id, self.col, self.row)
    }
}

/// Stable 16-hex-char id for a grid position.
pub fn patch_id(slide_id: &str, col: u32, row: u32) -> String {
    let mut h = sha256_hex(format!("{slide_id}:{col}:{row}").as_bytes());
    h.truncate(16);
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SelectionRoute {
    ReportPrompt,
    AttributePrompt,
    Cluster,
}

impl SelectionRoute {
    pub const ALL: [SelectionRoute; 3] =
        [SelectionRoute::ReportPrompt, SelectionRoute::AttributePrompt, SelectionRoute::Cluster];

    /// Lower is stronger when merging routes.
    pub fn priority(self) -> u8 {
        match self {
            SelectionRoute::ReportPrompt => 0,
            SelectionRoute::AttributePrompt => 1,
            SelectionRoute::Cluster => 2,
        }
    }
}

impl fmt::Display for SelectionRoute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionRoute::ReportPrompt => "report",
            SelectionRoute::AttributePrompt => "attribute",
            SelectionRoute::Cluster => "cluster",
        })
    }
}

/// Agent stage; used both in transcripts and in per-record provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Describe,
    Revise,
    Summarize,
    RefineReport,
    Attributes,
    /// Text embedding for retrieval and zero-shot prompts.
    Embed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMeta {
    pub backend: String,
    pub attempts: u32,
    /// Set when the summary had to be cut at a token boundary.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub patch: PatchRef,
    pub selection_route: SelectionRoute,
    pub description: String,
    pub revised: String,
    pub summary: String,
    pub summary_tokens: usize,
    pub agent_meta: BTreeMap<Stage, StageMeta>,
}

impl PairRecord {
    pub fn check_complete(&self, budget: usize) -> Result<()> {
        let fail = |reason: &str| {
            Err(CorpusError::IncompleteRecord {
                patch_id: self.patch.patch_id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.description.trim().is_empty() {
            return fail("empty description");
        }
        if self.revised.trim().is_empty() {
            return fail("empty revised text");
        }
        if self.summary.trim().is_empty() {
            return fail("empty summary");
        }
        if self.summary_tokens > budget {
            return fail(&format!("summary has {} tokens, budget {budget}", self.summary_tokens));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairsHeader {
    pub schema_version: String,
    pub config_digest: String,
}

impl PairsHeader {
    pub fn new(config_digest: impl Into<String>) -> Self {
        Self { schema_version: SCHEMA_VERSION.to_string(), config_digest: config_digest.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: String,
    pub slides: Vec<SlideRecord>,
    pub created_at: DateTime<Utc>,
    pub config_digest: String,
}

#[derive(Deserialize)]
struct ManifestHeader {
    schema_version: String,
    #[serde(default)]
    created_at: Option<DateTime<Utc>>,
    #[serde(default)]
    config_digest: String,
}

impl DatasetManifest {
    pub fn slide(&self, id: &str) -> Option<&SlideRecord> {
        self.slides.iter().find(|s| s.slide_id == id)
    }
}

/// Load a manifest with the default tokenizer and budget.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest_with(path, &WhitespaceTokenizer, DEFAULT_TOKEN_BUDGET)
}

/// Load a line-delimited manifest. An optional first line carrying `schema_version`
/// is treated as a header; every other non-blank line is a [`SlideRecord`].
pub fn load_manifest_with(
    path: &Path,
    tokenizer: &dyn Tokenizer,
    budget: usize,
) -> Result<DatasetManifest> {
    let reader = BufReader::new(File::open(path)?);
    parse_manifest(reader, tokenizer, budget)
}

pub fn parse_manifest(
    reader: impl BufRead,
    tokenizer: &dyn Tokenizer,
    budget: usize,
) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION.to_string(),
        slides: Vec::new(),
        created_at: DateTime::<Utc>::UNIX_EPOCH,
        config_digest: String::new(),
    };
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Parse { line: line_no, msg: e.to_string() })?;
        if value.get("schema_version").is_some() {
            if !manifest.slides.is_empty() {
                return Err(CorpusError::Parse {
                    line: line_no,
                    msg: "header must be the first record".into(),
                });
            }
            let h: ManifestHeader = serde_json::from_value(value)
                .map_err(|e| CorpusError::Parse { line: line_no, msg: e.to_string() })?;
            if h.schema_version != SCHEMA_VERSION {
                return Err(CorpusError::UnsupportedSchema(h.schema_version));
            }
            manifest.created_at = h.created_at.unwrap_or(manifest.created_at);
            manifest.config_digest = h.config_digest;
            continue;
        }
        let slide: SlideRecord = serde_json::from_value(value)
            .map_err(|e| CorpusError::Parse { line: line_no, msg: e.to_string() })?;
        slide.validate(tokenizer, budget)?;
        if !seen.insert(slide.slide_id.clone()) {
            return Err(CorpusError::DuplicateSlideId(slide.slide_id));
        }
        manifest.slides.push(slide);
    }
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = serde_json::json!({
        "schema_version": manifest.schema_version,
        "created_at": manifest.created_at,
        "config_digest": manifest.config_digest,
    });
    writeln!(w, "{header}")?;
    for s in &manifest.slides {
        writeln!(w, "{}", serde_json::to_string(s).expect("slide serializes"))?;
    }
    w.flush()?;
    Ok(())
}

/// Write a complete pairs file: header line followed by one record per line.
pub fn write_pairs(
    records: &[PairRecord],
    header: &PairsHeader,
    budget: usize,
    path: &Path,
) -> Result<usize> {
    for r in records {
        r.check_complete(budget)?;
    }
    let mut w = PairWriter::create(path, header, budget)?;
    for r in records {
        w.append(r)?;
    }
    w.finish()
}

/// Incremental pairs writer. Lines are flushed per record so an interrupted run
/// leaves at most one torn trailing line.
pub struct PairWriter {
    out: BufWriter<File>,
    budget: usize,
    written: usize,
}

impl PairWriter {
    pub fn create(path: &Path, header: &PairsHeader, budget: usize) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", serde_json::to_string(header).expect("header serializes"))?;
        out.flush()?;
        Ok(Self { out, budget, written: 0 })
    }

    /// Reopen an existing pairs file for appending. Any torn trailing line is cut.
    pub fn resume(path: &Path, budget: usize) -> Result<(Self, PairsHeader, Vec<PairRecord>)> {
        let (header, records, valid_len) = read_pairs_prefix(path)?;
        let file = OpenOptions::new().write(true).open(path)?;
        file.set_len(valid_len)?;
        let mut out = BufWriter::new(file);
        use std::io::Seek;
        out.seek(io::SeekFrom::End(0))?;
        Ok((Self { out, budget, written: 0 }, header, records))
    }

    pub fn append(&mut self, record: &PairRecord) -> Result<()> {
        record.check_complete(self.budget)?;
        writeln!(self.out, "{}", serde_json::to_string(record).expect("record serializes"))?;
        self.out.flush()?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<usize> {
        self.out.flush()?;
        Ok(self.written)
    }
}

/// Read a pairs file written by [`write_pairs`] / [`PairWriter`].
pub fn read_pairs(path: &Path) -> Result<(PairsHeader, Vec<PairRecord>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let header = match lines.next() {
        Some((_, l)) => serde_json::from_str::<PairsHeader>(l)
            .map_err(|e| CorpusError::Parse { line: 1, msg: e.to_string() })?,
        None => return Err(CorpusError::Parse { line: 1, msg: "missing header".into() }),
    };
    if header.schema_version != SCHEMA_VERSION {
        return Err(CorpusError::UnsupportedSchema(header.schema_version));
    }
    let mut records = Vec::new();
    for (i, l) in lines {
        if l.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(l)
                .map_err(|e| CorpusError::Parse { line: i + 1, msg: e.to_string() })?,
        );
    }
    Ok((header, records))
}

// Parses complete lines only; returns the byte length of the valid prefix.
fn read_pairs_prefix(path: &Path) -> Result<(PairsHeader, Vec<PairRecord>, u64)> {
    let bytes = std::fs::read(path)?;
    let mut records = Vec::new();
    let mut header = None;
    let mut valid = 0usize;
    let mut start = 0usize;
    let mut line_no = 0;
    while let Some(off) = bytes[start..].iter().position(|&b| b == b'\n') {
        line_no += 1;
        let line = &bytes[start..start + off];
        let text = std::str::from_utf8(line)
            .map_err(|e| CorpusError::Parse { line: line_no, msg: e.to_string() })?;
        if header.is_none() {
            let h: PairsHeader = serde_json::from_str(text)
                .map_err(|e| CorpusError::Parse { line: line_no, msg: e.to_string() })?;
            if h.schema_version != SCHEMA_VERSION {
                return Err(CorpusError::UnsupportedSchema(h.schema_version));
            }
            header = Some(h);
        } else {
            match serde_json::from_str::<PairRecord>(text) {
                Ok(r) => records.push(r),
                Err(_) => break,
            }
        }
        start += off + 1;
        valid = start;
    }
    let header =
        header.ok_or(CorpusError::Parse { line: 1, msg: "missing header".into() })?;
    Ok((header, records, valid as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::io::Cursor;

    fn slide_line(id: &str, w: u32) -> String {
        format!(
            r#"{{"slide_id":"{id}","organ_source":"lung","grid_w":{w},"grid_h":3,"tile_px":224,"findings":["tumor cells with enlarged nuclei"]}}"#
        )
    }

    fn parse(text: &str) -> Result<DatasetManifest> {
        parse_manifest(Cursor::new(text.to_string()), &WhitespaceTokenizer, 77)
    }

    pub(crate) fn sample_record(i: u32) -> PairRecord {
        let mut meta = BTreeMap::new();
        meta.insert(Stage::Describe, StageMeta { backend: "mock".into(), attempts: 1, truncated: false });
        PairRecord {
            patch: PatchRef::new("s1", i, 0),
            selection_route: SelectionRoute::Cluster,
            description: format!("desc {i}"),
            revised: format!("rev {i}"),
            summary: "short summary".into(),
            summary_tokens: 2,
            agent_meta: meta,
        }
    }

    #[test]
    fn three_valid_lines() {
        let text = [slide_line("a", 2), slide_line("b", 2), slide_line("c", 2)].join("\n");
        let m = parse(&text).unwrap();
        assert_eq!(m.slides.len(), 3);
        assert_eq!(m.slides[1].slide_id, "b");
    }

    #[test]
    fn duplicate_slide_rejected() {
        let text = [slide_line("s1", 2), slide_line("s1", 2)].join("\n");
        assert!(matches!(parse(&text), Err(CorpusError::DuplicateSlideId(id)) if id == "s1"));
    }

    #[test]
    fn zero_grid_rejected() {
        assert!(matches!(parse(&slide_line("s1", 0)), Err(CorpusError::GridOutOfRange { .. })));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{}\n{{not json\n", slide_line("a", 1));
        assert!(matches!(parse(&text), Err(CorpusError::Parse { line: 2, .. })));
    }

    #[test]
    fn unknown_schema_rejected() {
        let text = format!("{{\"schema_version\":\"99\"}}\n{}", slide_line("a", 1));
        assert!(matches!(parse(&text), Err(CorpusError::UnsupportedSchema(_))));
    }

    #[test]
    fn overlong_finding_rejected() {
        let long = vec!["w"; 78].join(" ");
        let line = format!(
            r#"{{"slide_id":"a","organ_source":"lung","grid_w":1,"grid_h":1,"tile_px":1,"findings":["{long}"]}}"#
        );
        assert!(matches!(parse(&line), Err(CorpusError::FindingTooLong { tokens: 78, .. })));
    }

    #[test]
    fn token_counts() {
        let t = WhitespaceTokenizer;
        assert_eq!(count_tokens("", &t), 0);
        assert_eq!(count_tokens("tumor cells with enlarged nuclei", &t), 5);
        assert_eq!(t.truncate("a b  c d", 2), "a b");
    }

    #[test]
    fn patch_ids_are_injective() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut triples = HashSet::new();
        while triples.len() < 100_000 {
            let s = rng.random_range(0..50u32);
            triples.insert((format!("slide-{s}"), rng.random_range(0..400u32), rng.random_range(0..400u32)));
        }
        let ids: HashSet<String> = triples.iter().map(|(s, c, r)| patch_id(s, *c, *r)).collect();
        assert_eq!(ids.len(), 100_000);
    }

    #[test]
    fn patch_key_round_trip() {
        let p = PatchRef::new("TCGA:01", 4, 9);
        assert_eq!(PatchRef::parse_key(&p.key()), Some(p.clone()));
        assert_eq!(p.patch_id.len(), 16);
    }

    #[test]
    fn empty_pairs_file_has_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let n = write_pairs(&[], &PairsHeader::new("abc"), 77, &path).unwrap();
        assert_eq!(n, 0);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        let (h, recs) = read_pairs(&path).unwrap();
        assert_eq!(h.config_digest, "abc");
        assert!(recs.is_empty());
    }

    #[test]
    fn pairs_round_trip_384() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let recs: Vec<_> = (0..384).map(sample_record).collect();
        assert_eq!(write_pairs(&recs, &PairsHeader::new("d"), 77, &path).unwrap(), 384);
        let first = std::fs::read(&path).unwrap();
        let (h, back) = read_pairs(&path).unwrap();
        assert_eq!(back, recs);
        write_pairs(&back, &h, 77, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn empty_summary_is_incomplete() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = sample_record(0);
        r.summary.clear();
        let err = write_pairs(&[r], &PairsHeader::new("d"), 77, &dir.path().join("p")).unwrap_err();
        assert!(matches!(err, CorpusError::IncompleteRecord { .. }));
    }

    #[test]
    fn resume_cuts_torn_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let recs: Vec<_> = (0..4).map(sample_record).collect();
        write_pairs(&recs[..2], &PairsHeader::new("d"), 77, &path).unwrap();
        let full = std::fs::read(&path).unwrap();
        let mut torn = full.clone();
        torn.extend_from_slice(b"{\"patch\":{\"sli");
        std::fs::write(&path, torn).unwrap();
        let (mut w, _, done) = PairWriter::resume(&path, 77).unwrap();
        assert_eq!(done.len(), 2);
        w.append(&recs[2]).unwrap();
        w.append(&recs[3]).unwrap();
        w.finish().unwrap();
        let (_, back) = read_pairs(&path).unwrap();
        assert_eq!(back, recs);
    }
}

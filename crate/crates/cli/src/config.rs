use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use histopair::agents::{
    AgentSettings, Agents, Backend, BackendEndpoint, HttpBackend, MockBackend, MockConfig, RetryPolicy,
};
use histopair::agents::wire::Endpoint;
use histopair::digest::sha256_hex;
use histopair::PipelineConfig;
use serde::{Deserialize, Serialize};

use crate::exit::{Failure, Kind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: PathBuf,
    pub embeddings_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            manifest: "manifest.jsonl".into(),
            embeddings_dir: "embeddings".into(),
            output_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub name: String,
    pub mock_dim: usize,
    pub base_url: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub retry_base_ms: u64,
    /// Per-endpoint overrides keyed by path without the slash, e.g. `describe`.
    pub endpoints: BTreeMap<String, BackendEndpoint>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            name: "mock".into(),
            mock_dim: histopair::agents::DEFAULT_MOCK_DIM,
            base_url: "http://127.0.0.1:8080".into(),
            timeout_ms: 60_000,
            max_retries: 3,
            max_in_flight: 8,
            retry_base_ms: 250,
            endpoints: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// `synthetic` or `files`.
    pub source: String,
    pub d: usize,
    pub noise: f64,
    pub n_stage1: usize,
    pub n_stage2: usize,
    pub n_heldout: usize,
    /// Embedding descriptors, used when `source = "files"`.
    pub stage1_images: Option<PathBuf>,
    pub stage1_texts: Option<PathBuf>,
    pub stage2_images: Option<PathBuf>,
    pub stage2_texts: Option<PathBuf>,
    pub heldout_images: Option<PathBuf>,
    pub heldout_texts: Option<PathBuf>,
    /// Train once on stage1 ++ stage2 instead of in two stages.
    pub merged: bool,
    pub epochs1: usize,
    pub epochs2: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub d_out: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            source: "synthetic".into(),
            d: 32,
            noise: 0.1,
            n_stage1: 200,
            n_stage2: 50,
            n_heldout: 200,
            stage1_images: None,
            stage1_texts: None,
            stage2_images: None,
            stage2_texts: None,
            heldout_images: None,
            heldout_texts: None,
            merged: false,
            epochs1: 30,
            epochs2: 10,
            batch_size: 32,
            lr: 0.5,
            momentum: 0.9,
            d_out: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZeroShotDataset {
    pub name: String,
    pub classes: Vec<String>,
    /// Embedding descriptor and a labels file (one class index per line); synthetic when absent.
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub n_per_class: usize,
    pub noise: f64,
}

impl Default for ZeroShotDataset {
    fn default() -> Self {
        Self {
            name: "synthetic-tissue".into(),
            classes: ["adipose", "lymphocytes", "mucus", "stroma", "tumor epithelium"].map(String::from).to_vec(),
            features: None,
            labels: None,
            n_per_class: 100,
            noise: 0.12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeDataset {
    pub name: String,
    pub train_features: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_features: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub n_classes: usize,
    pub d: usize,
    pub separation: f64,
    pub n_train_per_class: usize,
    pub n_test_per_class: usize,
    pub shuffle_labels: bool,
}

impl Default for ProbeDataset {
    fn default() -> Self {
        Self {
            name: "synthetic-separable".into(),
            train_features: None,
            train_labels: None,
            test_features: None,
            test_labels: None,
            n_classes: 2,
            d: 32,
            separation: 4.0,
            n_train_per_class: 300,
            n_test_per_class: 500,
            shuffle_labels: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MilDataset {
    pub name: String,
    /// JSONL of `{slide_id, label, split, embeddings}`; synthetic when absent.
    pub bags: Option<PathBuf>,
    pub n_train: usize,
    pub n_test: usize,
    pub d: usize,
}

impl Default for MilDataset {
    fn default() -> Self {
        Self { name: "synthetic-signal".into(), bags: None, n_train: 200, n_test: 100, d: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub zeroshot: Vec<ZeroShotDataset>,
    pub probe: Vec<ProbeDataset>,
    pub shots: Vec<usize>,
    pub repeats: usize,
    pub l2_reg: f64,
    pub mil: Vec<MilDataset>,
    pub n_seeds: usize,
    pub hidden: usize,
    pub gated: bool,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            zeroshot: vec![ZeroShotDataset::default()],
            probe: vec![ProbeDataset::default()],
            shots: histopair::evaluation::DEFAULT_SHOTS.to_vec(),
            repeats: histopair::evaluation::DEFAULT_REPEATS,
            l2_reg: 1e-3,
            mil: vec![MilDataset::default()],
            n_seeds: histopair::evaluation::DEFAULT_SEEDS,
            hidden: 128,
            gated: true,
            epochs: 20,
            lr: 0.01,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// 0 = all logical cores.
    pub workers: usize,
    pub paths: Paths,
    pub pipeline: PipelineConfig,
    pub backend: BackendConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Parse `key=value`, reading the value as TOML and falling back to a bare string.
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').with_context(|| format!("--set {spec}: expected key=value"))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("--set {spec}: {part} is not a table"),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub struct Loaded {
    pub config: RunConfig,
    pub digest: String,
}

/// Load the config file (if any), apply overrides and resolve relative paths
/// against the config file's directory.
pub fn load(path: Option<&Path>, sets: &[String], seed: Option<u64>, workers: Option<usize>) -> Result<Loaded, Failure> {
    let (mut table, base) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))
                .map_err(Failure::input)?;
            let t: toml::Table = text
                .parse()
                .with_context(|| format!("parsing config {}", p.display()))
                .map_err(Failure::usage)?;
            (t, p.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (toml::Table::new(), PathBuf::new()),
    };
    for s in sets {
        apply_override(&mut table, s).map_err(Failure::usage)?;
    }
    let mut config: RunConfig = toml::Value::Table(table)
        .try_into()
        .context("invalid configuration")
        .map_err(Failure::usage)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(w) = workers {
        config.workers = w;
    }
    config.pipeline.seed = config.seed;
    config.pipeline.validate().map_err(|e| Failure::new(Kind::Usage, e.into()))?;
    resolve_paths(&mut config, &base);
    let digest = digest(&config);
    Ok(Loaded { config, digest })
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_paths(c: &mut RunConfig, base: &Path) {
    resolve(base, &mut c.paths.manifest);
    resolve(base, &mut c.paths.embeddings_dir);
    resolve(base, &mut c.paths.output_dir);
    let t = &mut c.train;
    for p in [
        &mut t.stage1_images,
        &mut t.stage1_texts,
        &mut t.stage2_images,
        &mut t.stage2_texts,
        &mut t.heldout_images,
        &mut t.heldout_texts,
    ]
    .into_iter()
    .flatten()
    {
        resolve(base, p);
    }
    for z in &mut c.eval.zeroshot {
        for p in [&mut z.features, &mut z.labels].into_iter().flatten() {
            resolve(base, p);
        }
    }
    for d in &mut c.eval.probe {
        for p in [&mut d.train_features, &mut d.train_labels, &mut d.test_features, &mut d.test_labels]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
    }
    for m in &mut c.eval.mil {
        if let Some(p) = &mut m.bags {
            resolve(base, p);
        }
    }
}

/// Digest of everything that can change results. File locations and the worker
/// count are excluded so relocated reruns produce identical outputs.
pub fn digest(c: &RunConfig) -> String {
    let mut v = serde_json::to_value(c).expect("config serializes");
    if let Some(o) = v.as_object_mut() {
        o.remove("paths");
        o.remove("workers");
    }
    sha256_hex(v.to_string().as_bytes())[..16].to_string()
}

impl RunConfig {
    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.backend.max_retries,
            base_delay: Duration::from_millis(self.backend.retry_base_ms),
            ..RetryPolicy::default()
        }
    }

    pub fn backend(&self) -> Result<Arc<dyn Backend>, Failure> {
        let b = &self.backend;
        Ok(match b.kind {
            BackendKind::Mock => Arc::new(MockBackend::new(MockConfig {
                seed: self.seed,
                dim: b.mock_dim,
                ..MockConfig::default()
            })),
            BackendKind::Http => {
                let uniform = BackendEndpoint {
                    name: b.name.clone(),
                    base_url: b.base_url.clone(),
                    timeout_ms: b.timeout_ms,
                    max_retries: b.max_retries,
                    max_in_flight: b.max_in_flight,
                };
                let mut map: BTreeMap<Endpoint, BackendEndpoint> =
                    Endpoint::ALL.into_iter().map(|e| (e, uniform.clone())).collect();
                for (key, ep) in &b.endpoints {
                    let e = Endpoint::ALL
                        .into_iter()
                        .find(|e| e.path().trim_start_matches('/') == key)
                        .ok_or_else(|| Failure::usage(anyhow::anyhow!("unknown backend endpoint {key}")))?;
                    map.insert(e, ep.clone());
                }
                Arc::new(HttpBackend::new(b.name.clone(), map))
            }
        })
    }

    pub fn agents(&self) -> Result<Agents, Failure> {
        let settings = AgentSettings {
            retry: self.retry_policy(),
            n_attributes: self.pipeline.n_attributes,
            token_budget: self.pipeline.token_budget,
            ..AgentSettings::default()
        };
        Ok(Agents::new(self.backend()?, settings))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_typed() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "pipeline.top_k_per_category=32").unwrap();
        apply_override(&mut t, "backend.kind=http").unwrap();
        apply_override(&mut t, "train.lr=0.25").unwrap();
        let c: RunConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(c.pipeline.top_k_per_category, 32);
        assert_eq!(c.backend.kind, BackendKind::Http);
        assert_eq!(c.train.lr, 0.25);
    }

    #[test]
    fn digest_ignores_locations() {
        let mut a = RunConfig::default();
        let d = digest(&a);
        a.paths.output_dir = "/elsewhere".into();
        a.workers = 7;
        assert_eq!(digest(&a), d);
        a.seed = 1;
        assert_ne!(digest(&a), d);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "pipeline.nope=1").unwrap();
        assert!(toml::Value::Table(t).try_into::<RunConfig>().is_err());
    }
}

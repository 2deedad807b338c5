//! Synthetic corpora and feature generators for tests, benches and the `synth` command.

use chrono::{DateTime, Utc};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::agents::{AgentError, Agents};
use crate::cliptrain::PairedFeatures;
use crate::corpus::{DatasetManifest, SlideRecord, SCHEMA_VERSION};
use crate::digest::{derive_seed, hash64};
use crate::evaluation::{MilAggregator, MilBag, ZeroShotTask};
use crate::vectors::{EmbeddingMatrix, VectorError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error("{0}")]
    Eval(String),
}

const EMBED_BATCH: usize = 1024;

/// Embed every grid patch of `slide` (row-major) through the agents' backend.
pub fn mock_patch_embeddings(agents: &Agents, slide: &SlideRecord) -> Result<EmbeddingMatrix, SynthError> {
    let patches: Vec<_> = (0..slide.patch_count()).map(|i| slide.patch_at(i)).collect();
    let mut data = Vec::new();
    let mut d = 0;
    for chunk in patches.chunks(EMBED_BATCH) {
        for v in agents.embed_images(chunk)? {
            d = v.len();
            data.extend(v);
        }
    }
    let ids = patches.iter().map(|p| p.key()).collect();
    Ok(EmbeddingMatrix::new(d, data, ids, true)?)
}

const ORGANS: [&str; 5] = ["lung", "colon", "breast", "prostate", "kidney"];

const FINDINGS: [&str; 8] = [
    "Sheets of atypical cells with enlarged pleomorphic nuclei",
    "Glandular structures with cribriform architecture",
    "Dense lymphocytic infiltrate at the invasive front",
    "Areas of coagulative necrosis",
    "Desmoplastic stroma surrounding infiltrating nests",
    "Frequent mitotic figures including atypical forms",
    "Keratin pearls and intercellular bridges",
    "Perineural invasion is identified",
];

/// Fixed creation time so synthetic manifests are byte-stable.
pub fn epoch() -> DateTime<Utc> {
    DateTime::<Utc>::UNIX_EPOCH
}

/// `n_slides` square slides of `side`×`side` patches, each with two to four findings.
pub fn synthetic_manifest(n_slides: usize, side: u32, seed: u64) -> DatasetManifest {
    let slides = (0..n_slides)
        .map(|i| {
            let h = hash64(format!("{seed}:{i}").as_bytes());
            let n_find = 2 + (h % 3) as usize;
            let findings: Vec<String> =
                (0..n_find).map(|j| FINDINGS[(h as usize / 7 + j * 3) % FINDINGS.len()].to_string()).collect();
            let report = format!("Specimen received in formalin. {}.", findings.join(". "));
            SlideRecord {
                slide_id: format!("slide-{i:03}"),
                organ_source: ORGANS[i % ORGANS.len()].to_string(),
                grid_w: side,
                grid_h: side,
                tile_px: 224,
                findings,
                report_raw: Some(report),
            }
        })
        .collect();
    DatasetManifest {
        schema_version: SCHEMA_VERSION.to_string(),
        slides,
        created_at: epoch(),
        config_digest: String::new(),
    }
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// Uniformly random orthogonal matrix (Gram-Schmidt on a Gaussian matrix).
pub fn random_rotation(d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = gaussian(d, d, &mut rng);
    for i in 0..d {
        for j in 0..i {
            let proj = q.row(i).dot(&q.row(j));
            let qj = q.row(j).to_owned();
            q.row_mut(i).scaled_add(-proj, &qj);
        }
        let n = q.row(i).dot(&q.row(i)).sqrt();
        q.row_mut(i).mapv_inplace(|v| v / n);
    }
    q
}

/// Image features x ~ N(0, I); text features R·x + N(0, σ²I) for a fixed rotation R.
#[derive(Debug, Clone)]
pub struct CorrelatedTask {
    pub rotation: Array2<f64>,
    pub noise: f64,
}

impl CorrelatedTask {
    pub fn new(d: usize, noise: f64, seed: u64) -> Self {
        Self { rotation: random_rotation(d, derive_seed(seed, "rotation")), noise }
    }

    pub fn sample(&self, n: usize, seed: u64) -> PairedFeatures {
        let d = self.rotation.nrows();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pairs"));
        let images = gaussian(n, d, &mut rng);
        let texts = images.dot(&self.rotation.t()) + gaussian(n, d, &mut rng) * self.noise;
        PairedFeatures::new(images, texts).expect("finite by construction")
    }
}

/// Isotropic unit-variance Gaussians around orthogonal class means `separation · q_c`.
#[derive(Debug, Clone)]
pub struct GaussianClasses {
    pub means: Array2<f64>,
}

impl GaussianClasses {
    pub fn new(n_classes: usize, d: usize, separation: f64, seed: u64) -> Self {
        assert!(n_classes <= d, "need d ≥ number of classes");
        let q = random_rotation(d, derive_seed(seed, "class-means"));
        Self { means: q.slice(ndarray::s![..n_classes, ..]).to_owned() * separation }
    }

    pub fn n_classes(&self) -> usize {
        self.means.nrows()
    }

    /// `n_per_class` rows per class, labels cycling 0, 1, …, C−1.
    pub fn sample(&self, n_per_class: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let c = self.n_classes();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "class-samples"));
        let mut x = gaussian(n_per_class * c, self.means.ncols(), &mut rng);
        let labels: Vec<usize> = (0..n_per_class * c).map(|i| i % c).collect();
        for (i, &y) in labels.iter().enumerate() {
            let mut row = x.row_mut(i);
            row += &self.means.row(y);
        }
        (x, labels)
    }
}

pub fn shuffle_labels(labels: &mut [usize], seed: u64) {
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "label-shuffle")));
}

/// Zero-shot task whose images scatter around the backend's embedding of each class prompt.
pub fn zero_shot_task(
    agents: &Agents,
    class_names: &[&str],
    n_per_class: usize,
    noise: f64,
    seed: u64,
) -> Result<ZeroShotTask, SynthError> {
    let names: Vec<String> = class_names.iter().map(|s| s.to_string()).collect();
    let prompts: Vec<String> =
        names.iter().map(|c| crate::evaluation::ZERO_SHOT_TEMPLATE.replace("{class}", c)).collect();
    let anchors = agents.embed_texts(&prompts)?;
    let d = anchors[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "zero-shot"));
    let c = names.len();
    let mut data = Vec::with_capacity(n_per_class * c * d);
    let mut labels = Vec::with_capacity(n_per_class * c);
    for i in 0..n_per_class * c {
        let y = i % c;
        let v: Vec<f32> = anchors[y]
            .iter()
            .map(|&a| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (a as f64 + noise * z) as f32
            })
            .collect();
        data.extend(crate::vectors::normalize_vec(&v).expect("non-zero sample"));
        labels.push(y);
    }
    let ids = (0..labels.len()).map(|i| format!("img-{i}")).collect();
    let feats = EmbeddingMatrix::new(d, data, ids, true)?;
    ZeroShotTask::new(names, feats, labels).map_err(|e| SynthError::Eval(e.to_string()))
}

/// Bags of background instances N(0, I); positive bags also hold one to four signal
/// instances drawn from N(shift · e, I) for a fixed unit direction e.
#[derive(Debug, Clone)]
pub struct SignalBags {
    pub bags: Vec<MilBag>,
    /// Per bag, which instances are signal.
    pub signal: Vec<Vec<bool>>,
}

pub const SIGNAL_SHIFT: f64 = 4.0;

impl SignalBags {
    /// Labels alternate negative, positive.
    pub fn generate(n_bags: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "mil"));
        let dir = random_rotation(d, derive_seed(seed, "mil-direction")).row(0).to_owned() * SIGNAL_SHIFT;
        let mut bags = Vec::with_capacity(n_bags);
        let mut signal = Vec::with_capacity(n_bags);
        for i in 0..n_bags {
            let label = i % 2;
            let m = rng.random_range(16..=48);
            let mut x = gaussian(m, d, &mut rng);
            let mut mask = vec![false; m];
            if label == 1 {
                let k = rng.random_range(1..=4);
                for j in rand::seq::index::sample(&mut rng, m, k) {
                    mask[j] = true;
                    let mut row = x.row_mut(j);
                    row += &dir;
                }
            }
            bags.push(MilBag::new(format!("bag-{i:04}"), x, label).expect("valid by construction"));
            signal.push(mask);
        }
        Self { bags, signal }
    }

    /// Mean attention on signal and on background instances of the positive bags in `idx`.
    pub fn attention_census(&self, agg: &dyn MilAggregator, idx: &[usize]) -> (f64, f64) {
        let (mut sig, mut n_sig, mut bg, mut n_bg) = (0.0, 0usize, 0.0, 0usize);
        for &i in idx.iter().filter(|&&i| self.bags[i].label == 1) {
            let a = agg.forward(&self.bags[i]).attention;
            for (w, &is_sig) in a.iter().zip(&self.signal[i]) {
                if is_sig {
                    sig += w;
                    n_sig += 1;
                } else {
                    bg += w;
                    n_bg += 1;
                }
            }
        }
        (sig / n_sig.max(1) as f64, bg / n_bg.max(1) as f64)
    }
}

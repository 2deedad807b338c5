//! Deterministic in-process backend.
//!
//! Every response is a pure function of `(endpoint, request item, seed)`, so whole
//! pipeline runs are byte-reproducible without model weights.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::backend::{Backend, CallError, CallResult};
use super::script::{apply_ops, ReviseOp};
use super::wire::*;
use crate::digest::hash64;

pub const DEFAULT_MOCK_DIM: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub seed: u64,
    pub dim: usize,
    /// Revise returns its input unchanged with no ops.
    pub identity_revise: bool,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self { seed: 0, dim: DEFAULT_MOCK_DIM, identity_revise: false }
    }
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    cfg: MockConfig,
}

impl MockBackend {
    pub fn new(cfg: MockConfig) -> Self {
        Self { cfg }
    }

    pub fn with_seed(seed: u64) -> Self {
        Self::new(MockConfig { seed, ..MockConfig::default() })
    }

    pub fn config(&self) -> &MockConfig {
        &self.cfg
    }

    fn rng(&self, endpoint: Endpoint, item: &str) -> ChaCha8Rng {
        let key = format!("{endpoint}\u{1f}{}\u{1f}{item}", self.cfg.seed);
        ChaCha8Rng::seed_from_u64(hash64(key.as_bytes()))
    }

    /// Unit vector for one item; same item, same vector, regardless of batching.
    pub fn unit_vector(&self, endpoint: Endpoint, item: &str) -> Vec<f32> {
        let mut rng = self.rng(endpoint, item);
        loop {
            let v: Vec<f64> = (0..self.cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                return v.iter().map(|x| (x / n) as f32).collect();
            }
        }
    }

    fn describe_text(&self, req: &DescribeRequest) -> String {
        let mut rng = self.rng(Endpoint::Describe, &format!("{}|{}", req.patch_id, req.template));
        let pick = |rng: &mut ChaCha8Rng, xs: &[&str]| xs[rng.random_range(0..xs.len())].to_string();
        let mut sentences = vec![format!(
            "This {} tissue patch {} shows {}",
            req.source,
            req.patch_id,
            pick(&mut rng, ARCHITECTURE)
        )];
        let body = rng.random_range(5..8);
        for _ in 0..body {
            let s = match rng.random_range(0..4) {
                0 => format!("The cells display {} with {}", pick(&mut rng, NUCLEI), pick(&mut rng, CYTOPLASM)),
                1 => format!("The surrounding stroma {} and {}", pick(&mut rng, STROMA), pick(&mut rng, INFLAMMATION)),
                2 => format!("Scattered areas appear to be {}", pick(&mut rng, FOCAL)),
                _ => format!("Overall the features are consistent with {}", pick(&mut rng, IMPRESSION)),
            };
            sentences.push(s);
        }
        if rng.random_bool(0.5) {
            sentences.push(DISCLAIMER.to_string());
        }
        let mut text = sentences.join(". ");
        text.push('.');
        text
    }

    fn revise_ops(&self, text: &str) -> Vec<ReviseOp> {
        if self.cfg.identity_revise {
            return Vec::new();
        }
        let chars: Vec<char> = text.chars().collect();
        let find = |needle: &str| -> Option<usize> {
            let byte = text.find(needle)?;
            Some(text[..byte].chars().count())
        };
        let mut ops = Vec::new();
        if let Some(at) = find("appear to be ") {
            ops.push(ReviseOp::modify(at, at + "appear to be ".chars().count(), "are "));
        }
        if let Some(at) = find(DISCLAIMER) {
            // drop the disclaimer together with the space that precedes it
            let start = if at > 0 && chars[at - 1] == ' ' { at - 1 } else { at };
            let end = at + DISCLAIMER.chars().count();
            if ops.last().is_none_or(|o: &ReviseOp| o.span_end <= start) {
                ops.push(ReviseOp::delete(start, end));
            }
        }
        ops
    }

    fn summarize_text(&self, text: &str, max_tokens: usize) -> String {
        let count = |s: &str| s.split_whitespace().count();
        if count(text) <= max_tokens {
            return text.to_string();
        }
        let mut out: Vec<&str> = Vec::new();
        let mut used = 0;
        for s in text.split(". ").map(|s| s.trim_end_matches('.')) {
            if s.contains(DISCLAIMER.trim_end_matches('.')) {
                continue;
            }
            let c = count(s);
            if used + c > max_tokens {
                break;
            }
            used += c;
            out.push(s);
        }
        if out.is_empty() {
            return text.split_whitespace().take(max_tokens.max(1)).collect::<Vec<_>>().join(" ");
        }
        let mut s = out.join(". ");
        s.push('.');
        s
    }

    fn complete_text(&self, req: &CompleteRequest) -> String {
        match req.task {
            CompleteTask::RefineReport => refine(&req.text).join("\n"),
            CompleteTask::SplitFinding => split_clause(&req.text).join("\n"),
            CompleteTask::Attributes => {
                let mut rng = self.rng(Endpoint::Complete, &format!("attr|{}|{}", req.text, req.attempt));
                let mut pool: Vec<String> = ATTRIBUTES.iter().map(|s| s.to_string()).collect();
                pool.shuffle(&mut rng);
                let mut i = 0;
                while pool.len() < req.count {
                    pool.push(format!("{} in {} tissue", ATTRIBUTES[i % ATTRIBUTES.len()], req.text));
                    i += 1;
                }
                pool.truncate(req.count);
                pool.join("\n")
            }
        }
    }
}

const DISCLAIMER: &str = "Correlation with clinical findings is recommended";

const ARCHITECTURE: &[&str] = &[
    "sheets of atypical epithelial cells with loss of normal glandular architecture",
    "well-formed glands lined by columnar epithelium",
    "nests of polygonal cells separated by fibrous septa",
    "a solid growth pattern with focal trabecular arrangement",
    "densely packed lymphoid cells with scattered germinal centres",
];
const NUCLEI: &[&str] = &[
    "enlarged pleomorphic nuclei",
    "vesicular nuclei with prominent nucleoli",
    "hyperchromatic nuclei with irregular contours",
    "small round uniform nuclei",
];
const CYTOPLASM: &[&str] = &[
    "abundant eosinophilic cytoplasm",
    "scant basophilic cytoplasm",
    "clear vacuolated cytoplasm",
    "granular amphophilic cytoplasm",
];
const STROMA: &[&str] = &[
    "is desmoplastic",
    "shows hyalinization",
    "contains dilated thin-walled vessels",
    "is loose and oedematous",
];
const INFLAMMATION: &[&str] = &[
    "contains a moderate lymphocytic infiltrate",
    "shows scattered plasma cells",
    "has minimal inflammation",
    "contains clusters of neutrophils",
];
const FOCAL: &[&str] = &[
    "necrotic with karyorrhectic debris",
    "haemorrhagic",
    "mucin-rich with floating tumour cells",
    "fibrotic",
];
const IMPRESSION: &[&str] = &[
    "an invasive carcinoma",
    "a reactive process",
    "a well-differentiated neoplasm",
    "a poorly differentiated malignancy",
];
const ATTRIBUTES: &[&str] = &[
    "enlarged nuclei",
    "lymphocyte infiltration",
    "nuclear pleomorphism",
    "prominent nucleoli",
    "mitotic figures",
    "tumor necrosis",
    "glandular formation",
    "solid growth pattern",
    "papillary structures",
    "desmoplastic stroma",
    "mucin production",
    "keratin pearls",
    "intercellular bridges",
    "clear cell change",
    "signet ring cells",
    "vascular invasion",
    "perineural invasion",
    "hemorrhage",
    "fibrosis",
    "calcification",
    "hyperchromatic nuclei",
    "high nuclear to cytoplasmic ratio",
    "cribriform architecture",
    "lepidic growth",
    "micropapillary clusters",
    "acinar structures",
    "spindle cell morphology",
    "giant cells",
    "apoptotic bodies",
    "granulomas",
];

fn refine(report: &str) -> Vec<String> {
    const NOISE: &[&str] = &["cm", "gross", "received", "weigh", "labeled", "labelled", "cassette"];
    report
        .split(['.', '\n'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .filter(|s| {
            let lower = s.to_lowercase();
            !lower.split(|c: char| !c.is_alphanumeric()).any(|w| NOISE.iter().any(|n| w.starts_with(n)))
        })
        .map(|s| format!("{s}."))
        .collect()
}

// Split at the clause boundary nearest the middle; falls back to the middle word.
fn split_clause(text: &str) -> Vec<String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() < 2 {
        return vec![text.trim().to_string()];
    }
    let mid = words.len() / 2;
    let boundary = (1..words.len())
        .filter(|&i| {
            let prev = words[i - 1];
            prev.ends_with(',') || prev.ends_with(';') || words[i] == "and" || words[i] == "with"
        })
        .min_by_key(|&i| i.abs_diff(mid))
        .unwrap_or(mid);
    let head = words[..boundary].join(" ");
    let head = head.trim_end_matches([',', ';']).to_string();
    vec![head, words[boundary..].join(" ")]
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn embed_text(&self, req: &EmbedTextRequest) -> CallResult<EmbedResponse> {
        let vectors = req.texts.iter().map(|t| self.unit_vector(Endpoint::EmbedText, t)).collect();
        Ok(EmbedResponse { vectors, d: self.cfg.dim })
    }

    fn embed_image(&self, req: &EmbedImageRequest) -> CallResult<EmbedResponse> {
        if req.patch_ids.len() != req.uris.len() {
            return Err(CallError::Permanent { status: 400, message: "patch_ids and uris differ in length".into() });
        }
        let vectors = req.patch_ids.iter().map(|p| self.unit_vector(Endpoint::EmbedImage, p)).collect();
        Ok(EmbedResponse { vectors, d: self.cfg.dim })
    }

    fn describe(&self, req: &DescribeRequest) -> CallResult<TextResponse> {
        if req.source.trim().is_empty() {
            return Err(CallError::Permanent { status: 400, message: "empty source".into() });
        }
        Ok(TextResponse { text: self.describe_text(req) })
    }

    fn revise(&self, req: &ReviseRequest) -> CallResult<ReviseResponse> {
        let ops = self.revise_ops(&req.text);
        let text = apply_ops(&req.text, &ops)
            .map_err(|e| CallError::Retryable(format!("mock produced invalid ops: {e}")))?;
        Ok(ReviseResponse { text, ops })
    }

    fn summarize(&self, req: &SummarizeRequest) -> CallResult<TextResponse> {
        if req.max_tokens == 0 {
            return Err(CallError::Permanent { status: 400, message: "max_tokens must be positive".into() });
        }
        Ok(TextResponse { text: self.summarize_text(&req.text, req.max_tokens) })
    }

    fn complete(&self, req: &CompleteRequest) -> CallResult<TextResponse> {
        Ok(TextResponse { text: self.complete_text(req) })
    }
}

/// Wraps a backend and fails a seeded fraction of describe calls permanently, or
/// every call when `down` is set.
#[derive(Debug, Clone)]
pub struct FaultyBackend<B> {
    inner: B,
    describe_failure_rate: f64,
    seed: u64,
    down: bool,
}

impl<B: Backend> FaultyBackend<B> {
    pub fn new(inner: B, describe_failure_rate: f64, seed: u64) -> Self {
        Self { inner, describe_failure_rate, seed, down: false }
    }

    pub fn down(inner: B) -> Self {
        Self { inner, describe_failure_rate: 0.0, seed: 0, down: true }
    }

    /// Whether describe for `patch_id` is one of the injected failures.
    pub fn fails(&self, patch_id: &str) -> bool {
        let h = hash64(format!("fault\u{1f}{}\u{1f}{patch_id}", self.seed).as_bytes());
        (h as f64 / u64::MAX as f64) < self.describe_failure_rate
    }

    fn gate(&self) -> CallResult<()> {
        if self.down {
            Err(CallError::Unreachable("injected outage".into()))
        } else {
            Ok(())
        }
    }
}

impl<B: Backend> Backend for FaultyBackend<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn embed_text(&self, req: &EmbedTextRequest) -> CallResult<EmbedResponse> {
        self.gate()?;
        self.inner.embed_text(req)
    }
    fn embed_image(&self, req: &EmbedImageRequest) -> CallResult<EmbedResponse> {
        self.gate()?;
        self.inner.embed_image(req)
    }
    fn describe(&self, req: &DescribeRequest) -> CallResult<TextResponse> {
        self.gate()?;
        if self.fails(&req.patch_id) {
            return Err(CallError::Permanent { status: 422, message: "injected describe failure".into() });
        }
        self.inner.describe(req)
    }
    fn revise(&self, req: &ReviseRequest) -> CallResult<ReviseResponse> {
        self.gate()?;
        self.inner.revise(req)
    }
    fn summarize(&self, req: &SummarizeRequest) -> CallResult<TextResponse> {
        self.gate()?;
        self.inner.summarize(req)
    }
    fn complete(&self, req: &CompleteRequest) -> CallResult<TextResponse> {
        self.gate()?;
        self.inner.complete(req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn describe(m: &MockBackend, source: &str) -> String {
        m.describe(&DescribeRequest {
            patch_id: "abcd1234abcd1234".into(),
            uri: "patch://s/0/0".into(),
            source: source.into(),
            template: format!("This is a histopathology image from {source}, describe this image in detail"),
        })
        .unwrap()
        .text
    }

    #[test]
    fn describe_mentions_patch_and_source() {
        let m = MockBackend::with_seed(1);
        let t = describe(&m, "lung");
        assert!(t.contains("abcd1234abcd1234") && t.contains("lung"));
        assert_eq!(t, describe(&m, "lung"));
        assert!(t.split_whitespace().count() > 77);
    }

    #[test]
    fn vectors_unit_and_batch_independent() {
        let m = MockBackend::with_seed(2);
        let a = m.embed_text(&EmbedTextRequest { texts: vec!["x".into(), "y".into()] }).unwrap();
        let b = m.embed_text(&EmbedTextRequest { texts: vec!["y".into()] }).unwrap();
        assert_eq!(a.vectors[1], b.vectors[0]);
        for v in &a.vectors {
            let n: f64 = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn revise_ops_reproduce_text() {
        let m = MockBackend::with_seed(3);
        for i in 0..50 {
            let d = m.describe_text(&DescribeRequest {
                patch_id: format!("p{i}"),
                uri: String::new(),
                source: "colon".into(),
                template: String::new(),
            });
            let r = m.revise(&ReviseRequest { text: d.clone() }).unwrap();
            assert_eq!(apply_ops(&d, &r.ops).unwrap(), r.text);
            assert!(!r.text.contains(DISCLAIMER));
        }
    }

    #[test]
    fn summaries_fit() {
        let m = MockBackend::with_seed(4);
        let long = vec!["word"; 200].join(" ");
        for budget in [1, 5, 77] {
            let s = m.summarize(&SummarizeRequest { text: long.clone(), max_tokens: budget }).unwrap().text;
            assert!(s.split_whitespace().count() <= budget);
        }
    }

    #[test]
    fn refine_drops_gross_description() {
        let lines = refine("Received in formalin a 3 cm mass. Invasive ductal carcinoma, grade 2. Margins are free");
        assert_eq!(lines, vec!["Invasive ductal carcinoma, grade 2.", "Margins are free."]);
    }

    #[test]
    fn split_prefers_clause_boundary() {
        let parts = split_clause("a b c, d e f g");
        assert_eq!(parts, vec!["a b c", "d e f g"]);
    }

    #[test]
    fn fault_rate_roughly_matches() {
        let f = FaultyBackend::new(MockBackend::with_seed(0), 0.05, 9);
        let n = (0..20_000).filter(|i| f.fails(&format!("p{i}"))).count();
        assert!((800..1200).contains(&n), "{n}");
    }
}

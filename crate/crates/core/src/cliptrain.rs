//! Contrastive training of projection heads over precomputed features.

use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::derive_seed;
use crate::vectors::{read_embeddings, write_embeddings, EmbeddingMatrix, VectorError};

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 100.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("batch of {0} pairs; need at least 2")]
    DegenerateBatch(usize),
    #[error("non-finite gradient at step {0}")]
    NonFiniteGradient(u64),
    #[error("{stage} source is empty but {epochs} epoch(s) were requested")]
    EmptySource { stage: TrainStage, epochs: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainStage {
    #[serde(rename = "stage1")]
    Stage1,
    #[serde(rename = "stage2")]
    Stage2,
}

impl fmt::Display for TrainStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainStage::Stage1 => "stage1",
            TrainStage::Stage2 => "stage2",
        })
    }
}

/// Row-aligned image and text features; row i of each forms a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedFeatures {
    pub images: Array2<f64>,
    pub texts: Array2<f64>,
}

impl PairedFeatures {
    pub fn new(images: Array2<f64>, texts: Array2<f64>) -> Result<Self> {
        if images.nrows() != texts.nrows() {
            return Err(TrainError::Shape(format!("{} images but {} texts", images.nrows(), texts.nrows())));
        }
        if images.iter().chain(texts.iter()).any(|v| !v.is_finite()) {
            return Err(TrainError::Shape("non-finite feature".into()));
        }
        Ok(Self { images, texts })
    }

    pub fn len(&self) -> usize {
        self.images.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self { images: self.images.select(Axis(0), rows), texts: self.texts.select(Axis(0), rows) }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let cat = |a: &Array2<f64>, b: &Array2<f64>| {
            ndarray::concatenate(Axis(0), &[a.view(), b.view()]).map_err(|e| TrainError::Shape(e.to_string()))
        };
        Ok(Self { images: cat(&self.images, &other.images)?, texts: cat(&self.texts, &other.texts)? })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    /// d_in × d_out
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl ProjectionHead {
    /// Gaussian weights with variance 1/d_in, zero bias.
    pub fn init(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (d_in as f64).sqrt();
        let w = Array2::from_shape_fn((d_in, d_out), |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        });
        Self { w, b: Array1::zeros(d_out) }
    }

    pub fn d_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn project(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Projected and L2-normalized rows.
    pub fn embed(&self, x: ArrayView2<f64>) -> Array2<f64> {
        normalize_rows(&self.project(x)).0
    }
}

/// Normalized rows and the original row norms.
fn normalize_rows(y: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = y.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(f64::MIN_POSITIVE));
    let u = y / &norms.view().insert_axis(Axis(1));
    (u, norms)
}

/// Back-propagate through row normalization: dy = (du - u (u·du)) / ‖y‖.
fn normalize_rows_backward(u: &Array2<f64>, norms: &Array1<f64>, du: &Array2<f64>) -> Array2<f64> {
    let proj = (u * du).sum_axis(Axis(1));
    (du - &(u * &proj.view().insert_axis(Axis(1)))) / norms.view().insert_axis(Axis(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub image_w: Array2<f64>,
    pub image_b: Array1<f64>,
    pub text_w: Array2<f64>,
    pub text_b: Array1<f64>,
    pub log_tau: f64,
}

impl Gradients {
    fn zeros_like(s: &TrainState) -> Self {
        Self {
            image_w: Array2::zeros(s.image_head.w.raw_dim()),
            image_b: Array1::zeros(s.image_head.b.raw_dim()),
            text_w: Array2::zeros(s.text_head.w.raw_dim()),
            text_b: Array1::zeros(s.text_head.b.raw_dim()),
            log_tau: 0.0,
        }
    }

    fn is_finite(&self) -> bool {
        self.log_tau.is_finite()
            && self.image_w.iter().chain(&self.image_b).chain(&self.text_w).chain(&self.text_b).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub image_head: ProjectionHead,
    pub text_head: ProjectionHead,
    pub log_tau: f64,
    pub step: u64,
    pub rng_seed: u64,
    velocity: Option<Gradients>,
}

impl TrainState {
    pub fn init(d_image: usize, d_text: usize, d_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init"));
        let image_head = ProjectionHead::init(d_image, d_out, &mut rng);
        let text_head = ProjectionHead::init(d_text, d_out, &mut rng);
        Self { image_head, text_head, log_tau: TAU_INIT.ln(), step: 0, rng_seed: seed, velocity: None }
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp().clamp(TAU_MIN, TAU_MAX)
    }

    /// Parameters equal, ignoring step count and optimizer buffers.
    pub fn same_params(&self, other: &Self) -> bool {
        self.image_head == other.image_head && self.text_head == other.text_head && self.log_tau == other.log_tau
    }
}

fn log_softmax_rows(l: &Array2<f64>) -> Array2<f64> {
    let mut out = l.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Symmetric cross-entropy over the scaled similarity matrix of normalized rows.
pub fn infonce_loss(img: ArrayView2<f64>, txt: ArrayView2<f64>, tau: f64) -> Result<(f64, Array2<f64>)> {
    let b = img.nrows();
    if b < 2 {
        return Err(TrainError::DegenerateBatch(b));
    }
    if txt.nrows() != b || txt.ncols() != img.ncols() {
        return Err(TrainError::Shape("image and text batches differ in shape".into()));
    }
    let logits = img.dot(&txt.t()) / tau;
    let row = log_softmax_rows(&logits);
    let col = log_softmax_rows(&logits.t().to_owned());
    let diag = |m: &Array2<f64>| -m.diag().sum() / b as f64;
    let loss = 0.5 * (diag(&row) + diag(&col));
    Ok((loss, logits))
}

/// Loss of the current heads on a batch.
pub fn objective(state: &TrainState, batch: &PairedFeatures) -> Result<f64> {
    let ui = state.image_head.embed(batch.images.view());
    let ut = state.text_head.embed(batch.texts.view());
    Ok(infonce_loss(ui.view(), ut.view(), state.tau())?.0)
}

/// Loss and analytic gradients with respect to every parameter.
pub fn gradients(state: &TrainState, batch: &PairedFeatures) -> Result<(f64, Gradients)> {
    let (x, t) = (batch.images.view(), batch.texts.view());
    let (ui, ni) = normalize_rows(&state.image_head.project(x));
    let (ut, nt) = normalize_rows(&state.text_head.project(t));
    let tau = state.tau();
    let (loss, logits) = infonce_loss(ui.view(), ut.view(), tau)?;
    let b = logits.nrows() as f64;

    // dloss/dlogits = ½(softmax_rows − I)/B + ½(softmax_cols − I)/B
    let p_row = log_softmax_rows(&logits).mapv(f64::exp);
    let p_col = log_softmax_rows(&logits.t().to_owned()).mapv(f64::exp).reversed_axes();
    let eye = Array2::<f64>::eye(logits.nrows());
    let g = ((&p_row - &eye) + (&p_col - &eye)) / (2.0 * b);

    let dui = g.dot(&ut) / tau;
    let dut = g.t().dot(&ui) / tau;
    let clamped = state.log_tau < TAU_MIN.ln() || state.log_tau > TAU_MAX.ln();
    let dlog_tau = if clamped { 0.0 } else { -(&g * &logits).sum() };

    let dyi = normalize_rows_backward(&ui, &ni, &dui);
    let dyt = normalize_rows_backward(&ut, &nt, &dut);
    Ok((
        loss,
        Gradients {
            image_w: x.t().dot(&dyi),
            image_b: dyi.sum_axis(Axis(0)),
            text_w: t.t().dot(&dyt),
            text_b: dyt.sum_axis(Axis(0)),
            log_tau: dlog_tau,
        },
    ))
}

/// One plain gradient-descent step.
pub fn grad_step(state: &TrainState, batch: &PairedFeatures, lr: f64) -> Result<TrainState> {
    grad_step_momentum(state, batch, lr, 0.0).map(|(s, _)| s)
}

/// One heavy-ball step; returns the new state and the pre-step batch loss.
pub fn grad_step_momentum(
    state: &TrainState,
    batch: &PairedFeatures,
    lr: f64,
    momentum: f64,
) -> Result<(TrainState, f64)> {
    let (loss, g) = gradients(state, batch)?;
    if !g.is_finite() || !loss.is_finite() {
        return Err(TrainError::NonFiniteGradient(state.step));
    }
    let mut v = match (&state.velocity, momentum) {
        (Some(v), m) if m > 0.0 => v.clone(),
        _ => Gradients::zeros_like(state),
    };
    v.image_w = &v.image_w * momentum + &g.image_w;
    v.image_b = &v.image_b * momentum + &g.image_b;
    v.text_w = &v.text_w * momentum + &g.text_w;
    v.text_b = &v.text_b * momentum + &g.text_b;
    v.log_tau = v.log_tau * momentum + g.log_tau;

    let mut next = state.clone();
    next.image_head.w.scaled_add(-lr, &v.image_w);
    next.image_head.b.scaled_add(-lr, &v.image_b);
    next.text_head.w.scaled_add(-lr, &v.text_w);
    next.text_head.b.scaled_add(-lr, &v.text_b);
    next.log_tau = (state.log_tau - lr * v.log_tau).clamp(TAU_MIN.ln(), TAU_MAX.ln());
    next.step += 1;
    next.velocity = (momentum > 0.0).then_some(v);
    Ok((next, loss))
}

/// Pre-training on generated pairs followed by fine-tuning on the initial pairs.
/// A merged single-stage run is `stage1 = generated ++ init`, `epochs2 = 0`.
#[derive(Debug, Clone)]
pub struct StageSchedule {
    pub stage1: PairedFeatures,
    pub stage2: PairedFeatures,
    pub epochs1: usize,
    pub epochs2: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub d_out: usize,
}

impl StageSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(TrainError::Schedule(format!("batch_size {} < 2", self.batch_size)));
        }
        if self.d_out == 0 || self.lr.is_nan() || self.lr < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Schedule("d_out must be positive, lr ≥ 0, momentum in [0, 1)".into()));
        }
        for (stage, src, epochs) in [
            (TrainStage::Stage1, &self.stage1, self.epochs1),
            (TrainStage::Stage2, &self.stage2, self.epochs2),
        ] {
            if epochs > 0 && src.is_empty() {
                return Err(TrainError::EmptySource { stage, epochs });
            }
        }
        let (a, b) = (&self.stage1, &self.stage2);
        if a.images.ncols() != b.images.ncols() || a.texts.ncols() != b.texts.ncols() {
            return Err(TrainError::Shape("stage sources have different feature dimensions".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub step: u64,
    pub stage: TrainStage,
    pub epoch: usize,
    /// Mean pre-step batch loss over the epoch.
    pub loss: f64,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub state: TrainState,
    pub telemetry: Vec<TelemetryRecord>,
}

pub fn train_two_stage(schedule: &StageSchedule, seed: u64) -> Result<TrainRun> {
    schedule.validate()?;
    let s1 = &schedule.stage1;
    let mut state = TrainState::init(s1.images.ncols(), s1.texts.ncols(), schedule.d_out, seed);
    let mut telemetry = Vec::new();
    for (stage, src, epochs) in [
        (TrainStage::Stage1, &schedule.stage1, schedule.epochs1),
        (TrainStage::Stage2, &schedule.stage2, schedule.epochs2),
    ] {
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..src.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("shuffle:{stage}:{epoch}"))));
            let mut losses = Vec::new();
            for chunk in order.chunks(schedule.batch_size).filter(|c| c.len() >= 2) {
                let (next, loss) = grad_step_momentum(&state, &src.select(chunk), schedule.lr, schedule.momentum)?;
                state = next;
                losses.push(loss);
            }
            if losses.is_empty() {
                return Err(TrainError::EmptySource { stage, epochs });
            }
            telemetry.push(TelemetryRecord {
                step: state.step,
                stage,
                epoch,
                loss: losses.iter().sum::<f64>() / losses.len() as f64,
                tau: state.tau(),
            });
        }
    }
    Ok(TrainRun { state, telemetry })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub image_to_text: f64,
    pub text_to_image: f64,
}

/// Recall@k between row-paired normalized embeddings. Ties rank lower indices first.
pub fn recall_at_k(img: ArrayView2<f64>, txt: ArrayView2<f64>, k: usize) -> Recall {
    let n = img.nrows();
    let sims = img.dot(&txt.t());
    let hit = |row: ndarray::ArrayView1<f64>, i: usize| {
        let target = row[i];
        let rank = row.iter().enumerate().filter(|&(j, &s)| s > target || (s == target && j < i)).count();
        rank < k
    };
    let frac = |hits: usize| if n == 0 { 0.0 } else { hits as f64 / n as f64 };
    Recall {
        image_to_text: frac((0..n).filter(|&i| hit(sims.row(i), i)).count()),
        text_to_image: frac((0..n).filter(|&i| hit(sims.column(i), i)).count()),
    }
}

pub fn retrieval_eval(state: &TrainState, feats: &PairedFeatures, k: usize) -> Recall {
    let ui = state.image_head.embed(feats.images.view());
    let ut = state.text_head.embed(feats.texts.view());
    recall_at_k(ui.view(), ut.view(), k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    log_tau: f64,
    tau: f64,
    step: u64,
    rng_seed: u64,
    d_out: usize,
}

fn head_matrix(h: &ProjectionHead) -> Result<EmbeddingMatrix> {
    let rows = ndarray::concatenate(Axis(0), &[h.w.view(), h.b.view().insert_axis(Axis(0))])
        .map_err(|e| TrainError::Shape(e.to_string()))?;
    let ids = (0..h.d_in()).map(|i| format!("W:{i}")).chain(std::iter::once("b".to_string())).collect();
    Ok(EmbeddingMatrix::from_array(&rows, ids, false)?)
}

fn head_from_matrix(m: &EmbeddingMatrix) -> Result<ProjectionHead> {
    let a = m.to_array();
    let n = a.nrows();
    if n < 2 || m.ids()[n - 1] != "b" {
        return Err(TrainError::Checkpoint("head matrix must end with its bias row".into()));
    }
    Ok(ProjectionHead { w: a.slice(ndarray::s![..n - 1, ..]).to_owned(), b: a.row(n - 1).to_owned() })
}

/// Write both heads in the embedding-file format plus a JSON sidecar. Parameters are stored as float32.
pub fn write_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_embeddings(&head_matrix(&state.image_head)?, dir, "image_head")?;
    write_embeddings(&head_matrix(&state.text_head)?, dir, "text_head")?;
    let side = Sidecar {
        log_tau: state.log_tau,
        tau: state.tau(),
        step: state.step,
        rng_seed: state.rng_seed,
        d_out: state.image_head.d_out(),
    };
    fs::write(dir.join("checkpoint.json"), serde_json::to_string_pretty(&side).expect("sidecar serializes") + "\n")?;
    Ok(())
}

pub fn read_checkpoint(dir: &Path) -> Result<TrainState> {
    let side: Sidecar = serde_json::from_str(&fs::read_to_string(dir.join("checkpoint.json"))?)
        .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let image_head = head_from_matrix(&read_embeddings(&dir.join("image_head.json"))?)?;
    let text_head = head_from_matrix(&read_embeddings(&dir.join("text_head.json"))?)?;
    if image_head.d_out() != side.d_out || text_head.d_out() != side.d_out {
        return Err(TrainError::Checkpoint("head output dimension disagrees with sidecar".into()));
    }
    Ok(TrainState { image_head, text_head, log_tau: side.log_tau, step: side.step, rng_seed: side.rng_seed, velocity: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::CorrelatedTask;

    fn gauss(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    fn unit_rows(a: Array2<f64>) -> Array2<f64> {
        normalize_rows(&a).0
    }

    // Independent loss: explicit loops over the B×B matrix.
    fn loss_oracle(img: &Array2<f64>, txt: &Array2<f64>, tau: f64) -> f64 {
        let b = img.nrows();
        let s = |i: usize, j: usize| img.row(i).dot(&txt.row(j)) / tau;
        let mut total = 0.0;
        for i in 0..b {
            let row: f64 = (0..b).map(|j| s(i, j).exp()).sum();
            let col: f64 = (0..b).map(|j| s(j, i).exp()).sum();
            total += (row.ln() - s(i, i)) + (col.ln() - s(i, i));
        }
        total / (2.0 * b as f64)
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    #[test]
    fn loss_matches_loop_oracle() {
        let img = unit_rows(gauss(6, 5, 1));
        let txt = unit_rows(gauss(6, 5, 2));
        let (loss, logits) = infonce_loss(img.view(), txt.view(), 0.3).unwrap();
        assert!((loss - loss_oracle(&img, &txt, 0.3)).abs() < 1e-12);
        assert!((logits[[2, 4]] - img.row(2).dot(&txt.row(4)) / 0.3).abs() < 1e-12);
    }

    #[test]
    fn aligned_orthonormal_small_tau_is_near_zero() {
        let e = Array2::<f64>::eye(4);
        let (loss, _) = infonce_loss(e.view(), e.view(), 0.01).unwrap();
        assert!(loss < 1e-30, "{loss}");
    }

    #[test]
    fn random_features_average_ln_b() {
        let mean: f64 = (0..100)
            .map(|s| {
                let img = unit_rows(gauss(8, 64, 2 * s));
                let txt = unit_rows(gauss(8, 64, 2 * s + 1));
                infonce_loss(img.view(), txt.view(), 1.0).unwrap().0
            })
            .sum::<f64>()
            / 100.0;
        assert!((mean - 8f64.ln()).abs() <= 0.15, "{mean}");
    }

    #[test]
    fn joint_permutation_invariant() {
        let img = unit_rows(gauss(7, 4, 3));
        let txt = unit_rows(gauss(7, 4, 4));
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let a = infonce_loss(img.view(), txt.view(), 0.2).unwrap().0;
        let b = infonce_loss(img.select(Axis(0), &perm).view(), txt.select(Axis(0), &perm).view(), 0.2).unwrap().0;
        assert!(a >= 0.0);
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn degenerate_batch() {
        let e = Array2::<f64>::eye(1);
        assert!(matches!(infonce_loss(e.view(), e.view(), 1.0), Err(TrainError::DegenerateBatch(1))));
    }

    fn fd_check(state: &TrainState, batch: &PairedFeatures) -> f64 {
        let (_, g) = gradients(state, batch).unwrap();
        let eps = 1e-4;
        let mut worst: f64 = 0.0;
        let f = |s: &TrainState| objective(s, batch).unwrap();
        macro_rules! check {
            ($field:expr, $grad:expr) => {
                for (idx, &a) in $grad.indexed_iter() {
                    let mut p = state.clone();
                    let mut m = state.clone();
                    $field(&mut p)[idx] += eps;
                    $field(&mut m)[idx] -= eps;
                    let num = (f(&p) - f(&m)) / (2.0 * eps);
                    worst = worst.max(rel_err(a, num));
                }
            };
        }
        fn iw(s: &mut TrainState) -> &mut Array2<f64> {
            &mut s.image_head.w
        }
        fn ib(s: &mut TrainState) -> &mut Array1<f64> {
            &mut s.image_head.b
        }
        fn tw(s: &mut TrainState) -> &mut Array2<f64> {
            &mut s.text_head.w
        }
        fn tb(s: &mut TrainState) -> &mut Array1<f64> {
            &mut s.text_head.b
        }
        check!(iw, g.image_w);
        check!(ib, g.image_b);
        check!(tw, g.text_w);
        check!(tb, g.text_b);
        let mut p = state.clone();
        let mut m = state.clone();
        p.log_tau += eps;
        m.log_tau -= eps;
        worst.max(rel_err(g.log_tau, (f(&p) - f(&m)) / (2.0 * eps)))
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut state = TrainState::init(6, 5, 3, seed);
            state.image_head.b = Array1::from_shape_fn(3, |i| 0.1 * i as f64);
            state.log_tau = (0.5f64).ln();
            let batch = PairedFeatures::new(gauss(4, 6, 10 + seed), gauss(4, 5, 20 + seed)).unwrap();
            let worst = fd_check(&state, &batch);
            assert!(worst <= 1e-4, "seed {seed}: rel err {worst}");
        }
    }

    #[test]
    fn zero_lr_keeps_params_and_steps_are_deterministic() {
        let s = TrainState::init(4, 4, 3, 1);
        let batch = PairedFeatures::new(gauss(5, 4, 1), gauss(5, 4, 2)).unwrap();
        assert!(grad_step(&s, &batch, 0.0).unwrap().same_params(&s));
        let a = grad_step(&s, &batch, 0.1).unwrap();
        let b = grad_step(&s, &batch, 0.1).unwrap();
        assert_eq!(a, b);
        assert!(!a.same_params(&s));
    }

    #[test]
    fn tau_clamp_holds() {
        let mut s = TrainState::init(4, 4, 3, 1);
        let e = PairedFeatures::new(Array2::eye(4), Array2::eye(4)).unwrap();
        for _ in 0..200 {
            s = grad_step(&s, &e, 50.0).unwrap();
            assert!((TAU_MIN..=TAU_MAX).contains(&s.tau()));
        }
        assert!(s.tau() == TAU_MIN || s.tau() == TAU_MAX, "{}", s.tau());
    }

    fn schedule(task: &CorrelatedTask, e1: usize, e2: usize) -> StageSchedule {
        StageSchedule {
            stage1: task.sample(200, 1),
            stage2: task.sample(50, 2),
            epochs1: e1,
            epochs2: e2,
            batch_size: 32,
            lr: 0.5,
            momentum: 0.9,
            d_out: 32,
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let task = CorrelatedTask::new(32, 0.1, 5);
        let run = train_two_stage(&schedule(&task, 0, 0), 9).unwrap();
        assert_eq!(run.state, TrainState::init(32, 32, 32, 9));
        assert!(run.telemetry.is_empty());
    }

    #[test]
    fn empty_source_rejected() {
        let task = CorrelatedTask::new(8, 0.1, 5);
        let mut s = schedule(&task, 1, 1);
        s.stage2 = task.sample(0, 3);
        assert!(matches!(train_two_stage(&s, 0), Err(TrainError::EmptySource { stage: TrainStage::Stage2, .. })));
        s.epochs2 = 0;
        assert!(train_two_stage(&s, 0).is_ok());
    }

    #[test]
    fn two_stage_learns_held_out_retrieval() {
        let task = CorrelatedTask::new(32, 0.1, 5);
        let held = task.sample(200, 99);
        let run = train_two_stage(&schedule(&task, 30, 10), 1).unwrap();
        let init = TrainState::init(32, 32, 32, 1);
        let r = retrieval_eval(&run.state, &held, 1);
        assert!(r.image_to_text >= 0.9 && r.text_to_image >= 0.9, "{r:?}");
        assert!(objective(&run.state, &held).unwrap() < objective(&init, &held).unwrap());
        assert_eq!(run.telemetry.len(), 40);
        assert_eq!(run.telemetry[29].stage, TrainStage::Stage1);
        assert_eq!(run.telemetry[30].stage, TrainStage::Stage2);
        // 5-epoch window means do not increase within a stage
        let stage1: Vec<f64> = run.telemetry[..30].iter().map(|t| t.loss).collect();
        let windows: Vec<f64> = stage1.chunks(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
        assert!(windows.windows(2).all(|w| w[1] <= w[0]), "{windows:?}");
    }

    #[test]
    fn recall_trivial_cases() {
        let u = unit_rows(gauss(20, 8, 3));
        assert_eq!(recall_at_k(u.view(), u.view(), 1).image_to_text, 1.0);
        let v = unit_rows(gauss(20, 8, 4));
        let r = recall_at_k(u.view(), v.view(), 20);
        assert_eq!((r.image_to_text, r.text_to_image), (1.0, 1.0));
    }

    #[test]
    fn untrained_baseline_is_chance() {
        let task = CorrelatedTask::new(32, 0.1, 5);
        let mean = (0..50)
            .map(|s| {
                let r = retrieval_eval(&TrainState::init(32, 32, 32, 1000 + s), &task.sample(100, s), 1);
                r.image_to_text
            })
            .sum::<f64>()
            / 50.0;
        assert!((mean - 0.01).abs() <= 0.02, "{mean}");
    }

    #[test]
    fn checkpoint_round_trip_is_f32_exact() {
        let s = TrainState::init(5, 4, 3, 2);
        let dir = tempfile::tempdir().unwrap();
        write_checkpoint(&s, dir.path()).unwrap();
        let back = read_checkpoint(dir.path()).unwrap();
        assert_eq!(back.log_tau, s.log_tau);
        for (a, b) in back.image_head.w.iter().zip(s.image_head.w.iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert_eq!(back.text_head.b.len(), 3);
    }
}

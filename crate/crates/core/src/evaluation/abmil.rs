use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::metrics::{argmax, macro_auc, macro_f1};
use super::{EvalError, Result};
use crate::digest::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct MilBag {
    pub slide_id: String,
    /// m × d instance features.
    pub instances: Array2<f64>,
    pub label: usize,
}

impl MilBag {
    pub fn new(slide_id: impl Into<String>, instances: Array2<f64>, label: usize) -> Result<Self> {
        let slide_id = slide_id.into();
        if instances.nrows() == 0 {
            return Err(EvalError::Shape(format!("bag {slide_id} has no instances")));
        }
        if instances.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::Shape(format!("bag {slide_id} has non-finite features")));
        }
        Ok(Self { slide_id, instances, label })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilOutput {
    pub logits: Array1<f64>,
    pub attention: Array1<f64>,
}

/// Slide-level aggregation over instance features.
pub trait MilAggregator {
    fn n_classes(&self) -> usize;
    fn forward(&self, bag: &MilBag) -> MilOutput;
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbmilParams {
    /// d × h attention projection.
    pub v: Array2<f64>,
    /// h attention vector.
    pub w: Array1<f64>,
    /// d × h gate projection; `None` for the ungated variant.
    pub u: Option<Array2<f64>>,
    /// d × C classifier.
    pub wc: Array2<f64>,
    pub bc: Array1<f64>,
}

fn gaussian(shape: (usize, usize), scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

impl AbmilParams {
    /// Gaussian attention weights, zero classifier.
    pub fn init(d: usize, h: usize, n_classes: usize, gated: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = 1.0 / (d as f64).sqrt();
        let v = gaussian((d, h), sd, &mut rng);
        let w = gaussian((h, 1), 1.0 / (h as f64).sqrt(), &mut rng).column(0).to_owned();
        let u = gated.then(|| gaussian((d, h), sd, &mut rng));
        Self { v, w, u, wc: Array2::zeros((d, n_classes)), bc: Array1::zeros(n_classes) }
    }


    fn scaled_add(&mut self, alpha: f64, g: &Self) {
        self.v.scaled_add(alpha, &g.v);
        self.w.scaled_add(alpha, &g.w);
        if let (Some(u), Some(gu)) = (self.u.as_mut(), g.u.as_ref()) {
            u.scaled_add(alpha, gu);
        }
        self.wc.scaled_add(alpha, &g.wc);
        self.bc.scaled_add(alpha, &g.bc);
    }

    fn is_finite(&self) -> bool {
        let u = self.u.iter().flat_map(|u| u.iter());
        self.v.iter().chain(&self.w).chain(u).chain(&self.wc).chain(&self.bc).all(|x| x.is_finite())
    }
}

struct Cache {
    t: Array2<f64>,
    g: Option<Array2<f64>>,
    a: Array1<f64>,
    z: Array1<f64>,
    logits: Array1<f64>,
}

fn softmax(s: &Array1<f64>) -> Array1<f64> {
    let m = s.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = s.mapv(|v| (v - m).exp());
    let total = e.sum();
    e / total
}

fn forward_cached(p: &AbmilParams, bag: &MilBag) -> Cache {
    let h = &bag.instances;
    let t = h.dot(&p.v).mapv(f64::tanh);
    let g = p.u.as_ref().map(|u| h.dot(u).mapv(|x| 1.0 / (1.0 + (-x).exp())));
    let gated = match &g {
        Some(g) => &t * g,
        None => t.clone(),
    };
    let a = softmax(&gated.dot(&p.w));
    let z = a.dot(h);
    let logits = z.dot(&p.wc) + &p.bc;
    Cache { t, g, a, z, logits }
}

pub fn abmil_forward(p: &AbmilParams, bag: &MilBag) -> MilOutput {
    let c = forward_cached(p, bag);
    MilOutput { logits: c.logits, attention: c.a }
}

impl MilAggregator for AbmilParams {
    fn n_classes(&self) -> usize {
        self.bc.len()
    }

    fn forward(&self, bag: &MilBag) -> MilOutput {
        abmil_forward(self, bag)
    }
}

/// Softmax cross-entropy of one bag and its gradient.
pub fn abmil_loss_grad(p: &AbmilParams, bag: &MilBag) -> (f64, AbmilParams) {
    let h = &bag.instances;
    let c = forward_cached(p, bag);
    let mut dlogits = softmax(&c.logits);
    let loss = -dlogits[bag.label].max(f64::MIN_POSITIVE).ln();
    dlogits[bag.label] -= 1.0;

    let wc = c.z.view().insert_axis(Axis(1)).dot(&dlogits.view().insert_axis(Axis(0)));
    let dz = p.wc.dot(&dlogits);
    let da = h.dot(&dz);
    let ds = &c.a * &(&da - c.a.dot(&da));
    // d(gated) = ds ⊗ w
    let dgated = ds.view().insert_axis(Axis(1)).dot(&p.w.view().insert_axis(Axis(0)));
    let (w, dt, u) = match &c.g {
        Some(g) => {
            let w = (&c.t * g).t().dot(&ds);
            let dt = &dgated * g;
            let dgate = &dgated * &c.t * &g.mapv(|x| x * (1.0 - x));
            (w, dt, Some(h.t().dot(&dgate)))
        }
        None => (c.t.t().dot(&ds), dgated, None),
    };
    let v = h.t().dot(&(dt * &c.t.mapv(|x| 1.0 - x * x)));
    (loss, AbmilParams { v, w, u, wc, bc: dlogits })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbmilHyper {
    pub hidden: usize,
    pub gated: bool,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for AbmilHyper {
    fn default() -> Self {
        Self { hidden: 128, gated: true, epochs: 20, lr: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MilSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_f1: f64,
    /// `None` when the validation split holds a single class.
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilScores {
    pub loss: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    pub predictions: Vec<usize>,
}

pub fn n_classes(bags: &[MilBag]) -> usize {
    bags.iter().map(|b| b.label + 1).max().unwrap_or(0).max(2)
}

/// Loss, macro F1 and macro one-vs-rest AUC on a subset of bags.
pub fn evaluate_bags(agg: &dyn MilAggregator, bags: &[MilBag], idx: &[usize]) -> MilScores {
    let c = agg.n_classes();
    let mut probs = Vec::with_capacity(idx.len());
    let mut loss = 0.0;
    for &i in idx {
        let p = softmax(&agg.forward(&bags[i]).logits);
        loss -= p[bags[i].label].max(f64::MIN_POSITIVE).ln();
        probs.push(p.to_vec());
    }
    let labels: Vec<usize> = idx.iter().map(|&i| bags[i].label).collect();
    let predictions: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    MilScores {
        loss: if idx.is_empty() { 0.0 } else { loss / idx.len() as f64 },
        f1: macro_f1(&predictions, &labels, c),
        auc: macro_auc(&probs, &labels, c).ok(),
        predictions,
    }
}

/// SGD with one bag per step and seeded shuffling.
pub fn abmil_train(
    bags: &[MilBag],
    split: &MilSplit,
    hyper: &AbmilHyper,
    seed: u64,
) -> Result<(AbmilParams, Vec<EpochMetrics>)> {
    let classes: std::collections::BTreeSet<usize> = split.train.iter().map(|&i| bags[i].label).collect();
    if classes.len() < 2 {
        return Err(EvalError::SingleClassSplit);
    }
    let d = bags[split.train[0]].instances.ncols();
    if bags.iter().any(|b| b.instances.ncols() != d) {
        return Err(EvalError::Shape("bags differ in feature dimension".into()));
    }
    let mut p = AbmilParams::init(d, hyper.hidden, n_classes(bags), hyper.gated, derive_seed(seed, "abmil:init"));
    let mut trace = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let mut order = split.train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("abmil:epoch:{epoch}"))));
        let mut total = 0.0;
        for &i in &order {
            let (loss, g) = abmil_loss_grad(&p, &bags[i]);
            if !g.is_finite() {
                return Err(EvalError::NonFiniteGradient);
            }
            total += loss;
            p.scaled_add(-hyper.lr, &g);
        }
        let val = evaluate_bags(&p, bags, &split.val);
        trace.push(EpochMetrics {
            epoch,
            train_loss: total / order.len() as f64,
            val_loss: val.loss,
            val_f1: val.f1,
            val_auc: val.auc,
        });
    }
    Ok((p, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SignalBags;

    fn bag(m: usize, d: usize, seed: u64) -> MilBag {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MilBag::new("b", gaussian((m, d), 1.0, &mut rng), 1).unwrap()
    }

    fn random_params(d: usize, h: usize, gated: bool, seed: u64) -> AbmilParams {
        let mut p = AbmilParams::init(d, h, 3, gated, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        p.wc = gaussian((d, 3), 0.5, &mut rng);
        p.bc = gaussian((3, 1), 0.5, &mut rng).column(0).to_owned();
        p
    }

    #[test]
    fn singleton_attention_is_one() {
        let p = random_params(4, 3, true, 1);
        assert_eq!(abmil_forward(&p, &bag(1, 4, 2)).attention.to_vec(), vec![1.0]);
    }

    #[test]
    fn duplicates_share_attention_and_order_does_not_matter() {
        let p = random_params(5, 6, true, 2);
        let mut b = bag(6, 5, 3);
        let r0 = b.instances.row(0).to_owned();
        b.instances.row_mut(4).assign(&r0);
        let out = abmil_forward(&p, &b);
        assert!((out.attention[0] - out.attention[4]).abs() < 1e-6);
        assert!((out.attention.sum() - 1.0).abs() < 1e-6);

        let perm = [3, 5, 0, 1, 4, 2];
        let pb = MilBag::new("p", b.instances.select(Axis(0), &perm), 1).unwrap();
        let po = abmil_forward(&p, &pb);
        for (k, &src) in perm.iter().enumerate() {
            assert!((po.attention[k] - out.attention[src]).abs() < 1e-6);
        }
        for c in 0..3 {
            assert!((po.logits[c] - out.logits[c]).abs() < 1e-6);
        }
    }

    fn fd_worst(p: &AbmilParams, b: &MilBag) -> f64 {
        let (_, g) = abmil_loss_grad(p, b);
        let f = |q: &AbmilParams| abmil_loss_grad(q, b).0;
        let eps = 1e-4;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        let mut worst: f64 = 0.0;
        let mut probe = |apply: &dyn Fn(&mut AbmilParams, f64), a: f64| {
            let (mut hi, mut lo) = (p.clone(), p.clone());
            apply(&mut hi, eps);
            apply(&mut lo, -eps);
            worst = worst.max(rel(a, (f(&hi) - f(&lo)) / (2.0 * eps)));
        };
        for (ix, &a) in g.v.indexed_iter() {
            probe(&|q, e| q.v[ix] += e, a);
        }
        for (ix, &a) in g.w.indexed_iter() {
            probe(&|q, e| q.w[ix] += e, a);
        }
        if let Some(gu) = &g.u {
            for (ix, &a) in gu.indexed_iter() {
                probe(&|q, e| q.u.as_mut().unwrap()[ix] += e, a);
            }
        }
        for (ix, &a) in g.wc.indexed_iter() {
            probe(&|q, e| q.wc[ix] += e, a);
        }
        for (ix, &a) in g.bc.indexed_iter() {
            probe(&|q, e| q.bc[ix] += e, a);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for gated in [true, false] {
            for seed in 0..3 {
                let w = fd_worst(&random_params(4, 5, gated, seed), &bag(3, 4, 50 + seed));
                assert!(w <= 1e-4, "gated {gated} seed {seed}: {w}");
            }
        }
    }

    #[test]
    fn single_class_split_rejected() {
        let bags = vec![bag(2, 3, 1), bag(2, 3, 2)];
        let split = MilSplit { train: vec![0, 1], val: vec![] };
        assert!(matches!(abmil_train(&bags, &split, &AbmilHyper::default(), 0), Err(EvalError::SingleClassSplit)));
    }

    #[test]
    fn learns_signal_task_and_attends_to_signal() {
        let task = SignalBags::generate(300, 32, 11);
        let split = MilSplit { train: (0..200).collect(), val: (200..300).collect() };
        let (p, trace) = abmil_train(&task.bags, &split, &AbmilHyper::default(), 3).unwrap();
        assert_eq!(trace.len(), 20);
        let auc = evaluate_bags(&p, &task.bags, &split.val).auc.unwrap();
        assert!(auc >= 0.95, "{auc}");
        let (sig, bg) = task.attention_census(&p, &split.val);
        assert!(sig > bg, "{sig} vs {bg}");
    }

    #[test]
    fn training_is_deterministic() {
        let task = SignalBags::generate(40, 8, 1);
        let split = MilSplit { train: (0..30).collect(), val: (30..40).collect() };
        let hyper = AbmilHyper { hidden: 8, epochs: 3, ..AbmilHyper::default() };
        assert_eq!(abmil_train(&task.bags, &split, &hyper, 5).unwrap(), abmil_train(&task.bags, &split, &hyper, 5).unwrap());
    }
}

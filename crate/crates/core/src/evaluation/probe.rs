use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, argmax};
use super::{EvalError, Result};
use crate::digest::derive_seed;
use crate::par::{self, Exec};

pub const DEFAULT_SHOTS: [usize; 6] = [8, 16, 32, 64, 128, 256];
pub const DEFAULT_REPEATS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Stop once the loss drops by less than `tol` over `patience` iterations.
    pub tol: f64,
    pub patience: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iter: 5000, tol: 1e-6, patience: 10 }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeTask {
    pub shots: Vec<usize>,
    pub repeats: usize,
    pub train_x: Array2<f64>,
    pub train_y: Vec<usize>,
    pub test_x: Array2<f64>,
    pub test_y: Vec<usize>,
    pub n_classes: usize,
    pub l2_reg: f64,
    pub fit: FitOptions,
}

impl ProbeTask {
    /// Default shot ladder, 10 repeats, l2 = 1e-3.
    pub fn new(
        train_x: Array2<f64>,
        train_y: Vec<usize>,
        test_x: Array2<f64>,
        test_y: Vec<usize>,
        n_classes: usize,
    ) -> Self {
        Self {
            shots: DEFAULT_SHOTS.to_vec(),
            repeats: DEFAULT_REPEATS,
            train_x,
            train_y,
            test_x,
            test_y,
            n_classes,
            l2_reg: 1e-3,
            fit: FitOptions::default(),
        }
    }

    fn class_rows(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.n_classes];
        for (i, &y) in self.train_y.iter().enumerate() {
            rows[y].push(i);
        }
        rows
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.repeats == 0 {
            return Err(EvalError::Shape("probe needs ≥ 2 classes and ≥ 1 repeat".into()));
        }
        if self.train_x.nrows() != self.train_y.len() || self.test_x.nrows() != self.test_y.len() {
            return Err(EvalError::Shape("feature rows and labels differ in count".into()));
        }
        if self.train_x.ncols() != self.test_x.ncols() {
            return Err(EvalError::Shape("train and test features differ in dimension".into()));
        }
        if self.train_y.iter().chain(&self.test_y).any(|&y| y >= self.n_classes) {
            return Err(EvalError::Shape("label out of range".into()));
        }
        let rows = self.class_rows();
        for &shot in &self.shots {
            if let Some((class, r)) = rows.iter().enumerate().find(|(_, r)| r.len() < shot) {
                return Err(EvalError::ShotTooLarge { shot, class, available: r.len() });
            }
        }
        Ok(())
    }
}

/// Multinomial logistic regression: logits = x·W + b.
#[derive(Debug, Clone, PartialEq)]
pub struct LogReg {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl LogReg {
    pub fn zeros(d: usize, c: usize) -> Self {
        Self { w: Array2::zeros((d, c)), b: Array1::zeros(c) }
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        self.logits(x).rows().into_iter().map(|r| argmax(r.as_slice().expect("standard layout"))).collect()
    }
}

fn softmax_rows(l: &Array2<f64>) -> Array2<f64> {
    let mut p = l.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// Mean cross-entropy plus ½·l2·‖W‖², and its gradient.
pub fn logreg_loss_grad(m: &LogReg, x: ArrayView2<f64>, y: &[usize], l2: f64) -> (f64, LogReg) {
    let n = x.nrows() as f64;
    let mut p = softmax_rows(&m.logits(x));
    let mut ce = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        ce -= p[[i, yi]].max(f64::MIN_POSITIVE).ln();
        p[[i, yi]] -= 1.0;
    }
    let loss = ce / n + 0.5 * l2 * m.w.iter().map(|v| v * v).sum::<f64>();
    let gw = x.t().dot(&p) / n + &m.w * l2;
    let gb = p.sum_axis(Axis(0)) / n;
    (loss, LogReg { w: gw, b: gb })
}

/// Largest eigenvalue of [x 1]ᵀ[x 1] / n by power iteration.
fn gram_spectral_radius(x: ArrayView2<f64>) -> f64 {
    let n = x.nrows().max(1) as f64;
    let mut v = Array1::from_elem(x.ncols() + 1, 1.0);
    let mut lambda = 0.0;
    for _ in 0..100 {
        let xv = x.dot(&v.slice(ndarray::s![..x.ncols()])) + v[x.ncols()];
        let mut next = Array1::zeros(v.len());
        next.slice_mut(ndarray::s![..x.ncols()]).assign(&(x.t().dot(&xv) / n));
        next[x.ncols()] = xv.sum() / n;
        let norm = next.dot(&next).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let converged = (norm - lambda).abs() <= 1e-9 * norm;
        lambda = norm;
        v = next / norm;
        if converged {
            break;
        }
    }
    lambda
}

/// Full-batch gradient descent with step 1/L, L bounding the loss curvature
/// (softmax cross-entropy curvature is at most ½ per unit of feature energy).
pub fn fit_logreg(x: ArrayView2<f64>, y: &[usize], n_classes: usize, l2: f64, opts: &FitOptions) -> LogReg {
    let lr = 1.0 / (0.5 * 1.05 * gram_spectral_radius(x) + l2);
    let mut m = LogReg::zeros(x.ncols(), n_classes);
    let mut history = Vec::with_capacity(opts.max_iter.min(1024));
    for it in 0..opts.max_iter {
        let (loss, g) = logreg_loss_grad(&m, x, y, l2);
        history.push(loss);
        if it >= opts.patience && history[it - opts.patience] - loss < opts.tol {
            break;
        }
        m.w.scaled_add(-lr, &g.w);
        m.b.scaled_add(-lr, &g.b);
    }
    m
}

/// Five-number summary with linearly interpolated quartiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl BoxStats {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Self {
            min: v[0],
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub shots: Vec<usize>,
    /// repeats × shots test accuracies.
    pub grid: Vec<Vec<f64>>,
    pub stats: Vec<BoxStats>,
}

/// Stratified sample of `shot` training rows per class.
fn stratified(rows: &[Vec<usize>], shot: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(rows.len() * shot);
    for r in rows {
        let mut pick: Vec<usize> = sample(&mut rng, r.len(), shot).into_iter().map(|i| r[i]).collect();
        pick.sort_unstable();
        out.extend(pick);
    }
    out
}

pub fn linear_probe(task: &ProbeTask, seed: u64) -> Result<ProbeResult> {
    linear_probe_with(task, seed, Exec::default())
}

pub fn linear_probe_with(task: &ProbeTask, seed: u64, exec: Exec) -> Result<ProbeResult> {
    task.validate()?;
    let rows = task.class_rows();
    let n_shots = task.shots.len();
    let flat = par::map_range(exec, task.repeats * n_shots, |job| {
        let (r, s) = (job / n_shots, job % n_shots);
        let shot = task.shots[s];
        let pick = stratified(&rows, shot, derive_seed(seed, &format!("probe:{shot}:{r}")));
        let x = task.train_x.select(Axis(0), &pick);
        let y: Vec<usize> = pick.iter().map(|&i| task.train_y[i]).collect();
        let m = fit_logreg(x.view(), &y, task.n_classes, task.l2_reg, &task.fit);
        accuracy(&m.predict(task.test_x.view()), &task.test_y)
    });
    let grid: Vec<Vec<f64>> = flat.chunks(n_shots).map(<[f64]>::to_vec).collect();
    let stats = (0..n_shots).map(|s| BoxStats::of(&grid.iter().map(|row| row[s]).collect::<Vec<_>>())).collect();
    Ok(ProbeResult { shots: task.shots.clone(), grid, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::GaussianClasses;

    #[test]
    fn gradient_matches_finite_differences() {
        let g = GaussianClasses::new(3, 5, 2.0, 1);
        let (x, y) = g.sample(4, 2);
        let mut m = LogReg::zeros(5, 3);
        m.w.iter_mut().enumerate().for_each(|(i, v)| *v = ((i * 7 % 11) as f64 - 5.0) * 0.05);
        m.b = Array1::from(vec![0.1, -0.2, 0.05]);
        let (_, g) = logreg_loss_grad(&m, x.view(), &y, 1e-2);
        let f = |m: &LogReg| logreg_loss_grad(m, x.view(), &y, 1e-2).0;
        let eps = 1e-4;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        for (idx, &a) in g.w.indexed_iter() {
            let (mut p, mut q) = (m.clone(), m.clone());
            p.w[idx] += eps;
            q.w[idx] -= eps;
            assert!(rel(a, (f(&p) - f(&q)) / (2.0 * eps)) <= 1e-4);
        }
        for (i, &a) in g.b.iter().enumerate() {
            let (mut p, mut q) = (m.clone(), m.clone());
            p.b[i] += eps;
            q.b[i] -= eps;
            assert!(rel(a, (f(&p) - f(&q)) / (2.0 * eps)) <= 1e-4);
        }
    }

    fn task(classes: usize, shuffle: bool) -> ProbeTask {
        let g = GaussianClasses::new(classes, 32, 4.0, 4);
        let (tx, mut ty) = g.sample(300, 5);
        let (ex, mut ey) = g.sample(500, 6);
        if shuffle {
            crate::synth::shuffle_labels(&mut ty, 7);
            crate::synth::shuffle_labels(&mut ey, 8);
        }
        ProbeTask::new(tx, ty, ex, ey, classes)
    }

    #[test]
    fn default_grid_shape_and_separable_accuracy() {
        let r = linear_probe(&task(2, false), 0).unwrap();
        assert_eq!(r.grid.len(), 10);
        assert!(r.grid.iter().all(|row| row.len() == 6));
        assert!(r.stats[0].median >= 0.95, "{:?}", r.stats[0]);
        let medians: Vec<f64> = r.stats.iter().map(|s| s.median).collect();
        let inversions: Vec<f64> = medians.windows(2).map(|w| w[0] - w[1]).filter(|&d| d > 0.0).collect();
        assert!(inversions.len() <= 1 && inversions.iter().all(|&d| d <= 0.02), "{medians:?}");
    }

    #[test]
    fn shuffled_labels_are_chance() {
        let r = linear_probe(&task(3, true), 0).unwrap();
        for s in &r.stats {
            assert!((s.median - 1.0 / 3.0).abs() <= 0.05, "{s:?}");
        }
    }

    #[test]
    fn exec_modes_agree() {
        let mut t = task(2, false);
        t.shots = vec![8, 16];
        t.repeats = 3;
        assert_eq!(linear_probe_with(&t, 1, Exec::Sequential).unwrap(), linear_probe_with(&t, 1, Exec::Parallel).unwrap());
    }

    #[test]
    fn shot_too_large() {
        let mut t = task(2, false);
        t.shots = vec![301];
        assert!(matches!(linear_probe(&t, 0), Err(EvalError::ShotTooLarge { shot: 301, .. })));
    }

    #[test]
    fn spectral_radius_of_diagonal_design() {
        // columns e0·2, e1·1 over 2 rows plus the bias column
        let x = ndarray::array![[2.0, 0.0], [0.0, 1.0]];
        // [x 1]ᵀ[x 1]/2 = [[2,0,1],[0,.5,.5],[1,.5,1]]; largest eigenvalue from a dense solver
        assert!((gram_spectral_radius(x.view()) - 2.651_387_818_865_997_4).abs() < 1e-6);
    }

    #[test]
    fn box_stats_hand_values() {
        let s = BoxStats::of(&[4.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max), (1.0, 2.0, 3.0, 4.0, 5.0));
        assert_eq!(BoxStats::of(&[1.0, 2.0]).median, 1.5);
    }
}

use super::{EvalError, Result};

/// Ranks starting at 1; tied values share their average rank.
fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve via the Mann-Whitney U statistic; ties count ½.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(EvalError::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::Shape("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let ranks = average_ranks(scores);
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Mean one-vs-rest AUC over classes present in `labels`. `probs` is n × C row-major.
pub fn macro_auc(probs: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<f64> {
    let mut aucs = Vec::new();
    for c in 0..n_classes {
        let bin: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if bin.iter().all(|&b| b) || !bin.iter().any(|&b| b) {
            continue;
        }
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        aucs.push(auc(&scores, &bin)?);
    }
    if aucs.is_empty() {
        return Err(EvalError::SingleClass);
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// `m[t][p]` counts label t predicted as p.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&p, &t) in predictions.iter().zip(labels) {
        m[t][p] += 1;
    }
    m
}

/// Unweighted mean of per-class F1; classes with P + R = 0 score 0.
pub fn macro_f1(predictions: &[usize], labels: &[usize], n_classes: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..n_classes {
        let tp = predictions.iter().zip(labels).filter(|&(&p, &t)| p == c && t == c).count() as f64;
        let pred_c = predictions.iter().filter(|&&p| p == c).count() as f64;
        let true_c = labels.iter().filter(|&&t| t == c).count() as f64;
        let p = if pred_c > 0.0 { tp / pred_c } else { 0.0 };
        let r = if true_c > 0.0 { tp / true_c } else { 0.0 };
        if p + r > 0.0 {
            total += 2.0 * p * r / (p + r);
        }
    }
    total / n_classes as f64
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predictions.iter().zip(labels).filter(|(p, t)| p == t).count() as f64 / labels.len() as f64
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

//! Embedding matrices, exact cosine search and k-means clustering.

mod io;
mod kmeans;
mod sample;

use std::cmp::Ordering;

use ndarray::Array2;
use thiserror::Error;

use crate::par::{self, Exec};

pub use io::{read_embeddings, write_embeddings, EmbeddingDescriptor};
pub use kmeans::{kmeans_fit, kmeans_fit_with, ClusterModel};
pub use sample::{cluster_count_rule, cluster_quotas, uniform_cluster_sample, uniform_cluster_sample_excluding};

pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum VectorError {
    #[error("row {0} is all zeros")]
    ZeroRow(usize),
    #[error("matrix or query is not L2-normalized")]
    NotNormalized,
    #[error("matrix has no rows")]
    EmptyMatrix,
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("k = {k} exceeds row count {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("requested {total} samples but only {available} available")]
    TotalTooLarge { total: usize, available: usize },
    #[error("need at least two rows")]
    TooFewRows,
    #[error("embedding file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = VectorError> = std::result::Result<T, E>;

/// Row-major `n x d` float32 matrix with one id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    n: usize,
    d: usize,
    data: Vec<f32>,
    normalized: bool,
    ids: Vec<String>,
}

impl EmbeddingMatrix {
    /// Build a matrix, checking shape and finiteness. `normalized` is verified, not trusted.
    pub fn new(d: usize, data: Vec<f32>, ids: Vec<String>, normalized: bool) -> Result<Self> {
        if d == 0 {
            return Err(VectorError::Shape("dimension must be positive".into()));
        }
        if data.len() != ids.len() * d {
            return Err(VectorError::Shape(format!(
                "{} values for {} ids of dimension {d}",
                data.len(),
                ids.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(VectorError::NonFinite { row: pos / d, col: pos % d });
        }
        let m = Self { n: ids.len(), d, data, normalized: false, ids };
        if normalized && !m.rows_unit_norm() {
            return Err(VectorError::NotNormalized);
        }
        Ok(Self { normalized, ..m })
    }

    /// Matrix from rows with ids `"0".."n-1"`.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).ok_or(VectorError::EmptyMatrix)?;
        if rows.iter().any(|r| r.len() != d) {
            return Err(VectorError::Shape("ragged rows".into()));
        }
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        Self::new(d, rows.concat(), ids, false)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.d)
    }

    /// New matrix holding the selected rows in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.d);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            n: rows.len(),
            d: self.d,
            data,
            normalized: self.normalized,
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
        }
    }

    /// Copy into a dense f64 array.
    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.n, self.d), |(i, j)| self.data[i * self.d + j] as f64)
    }

    /// Build from a dense f64 array, rounding to f32.
    pub fn from_array(a: &Array2<f64>, ids: Vec<String>, normalized: bool) -> Result<Self> {
        let data = a.iter().map(|&v| v as f32).collect();
        Self::new(a.ncols(), data, ids, normalized)
    }

    fn rows_unit_norm(&self) -> bool {
        self.rows().all(|r| (norm(r) - 1.0).abs() <= NORM_TOLERANCE)
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

pub fn is_unit(a: &[f32]) -> bool {
    (norm(a) - 1.0).abs() <= NORM_TOLERANCE
}

/// Scale a vector to unit length. `None` for the zero vector.
pub fn normalize_vec(v: &[f32]) -> Option<Vec<f32>> {
    let n = norm(v);
    (n > 0.0).then(|| v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

pub fn l2_normalize(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut data = Vec::with_capacity(m.data.len());
    for (i, r) in m.rows().enumerate() {
        data.extend(normalize_vec(r).ok_or(VectorError::ZeroRow(i))?);
    }
    Ok(EmbeddingMatrix { data, normalized: true, ..m.clone() })
}

/// `(row, score)` pairs, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub query_id: String,
    pub entries: Vec<(usize, f64)>,
}

/// Descending score, then ascending index.
pub fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

/// Cosine score of `query` against every row, clamped to [-1, 1].
pub fn score_all(query: &[f32], m: &EmbeddingMatrix, exec: Exec) -> Vec<f64> {
    par::map_range(exec, m.n, |i| dot(query, m.row(i)).clamp(-1.0, 1.0))
}

/// Keep the `k` best `(index, score)` pairs in rank order.
pub fn top_k(mut scored: Vec<(usize, f64)>, k: usize) -> Vec<(usize, f64)> {
    if k < scored.len() {
        scored.select_nth_unstable_by(k, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    scored
}

pub fn cosine_topk(query: &[f32], m: &EmbeddingMatrix, k: usize) -> Result<NeighborList> {
    cosine_topk_with(query, m, k, Exec::default())
}

pub fn cosine_topk_with(
    query: &[f32],
    m: &EmbeddingMatrix,
    k: usize,
    exec: Exec,
) -> Result<NeighborList> {
    if m.n == 0 {
        return Err(VectorError::EmptyMatrix);
    }
    if query.len() != m.d {
        return Err(VectorError::Shape(format!("query dim {} vs matrix dim {}", query.len(), m.d)));
    }
    if !m.normalized || !is_unit(query) {
        return Err(VectorError::NotNormalized);
    }
    if k == 0 {
        return Err(VectorError::Shape("k must be positive".into()));
    }
    let scored = score_all(query, m, exec).into_iter().enumerate().collect();
    Ok(NeighborList { query_id: String::new(), entries: top_k(scored, k) })
}

pub fn pairwise_max_similarity(rows: &[usize], m: &EmbeddingMatrix) -> Result<f64> {
    pairwise_max_similarity_with(rows, m, Exec::default())
}

pub fn pairwise_max_similarity_with(rows: &[usize], m: &EmbeddingMatrix, exec: Exec) -> Result<f64> {
    if rows.len() < 2 {
        return Err(VectorError::TooFewRows);
    }
    if !m.normalized {
        return Err(VectorError::NotNormalized);
    }
    let per_row = par::map_range(exec, rows.len() - 1, |i| {
        rows[i + 1..]
            .iter()
            .map(|&j| dot(m.row(rows[i]), m.row(j)))
            .fold(f64::NEG_INFINITY, f64::max)
    });
    Ok(per_row.into_iter().fold(f64::NEG_INFINITY, f64::max).clamp(-1.0, 1.0))
}

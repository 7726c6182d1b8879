//! Dense numeric kernels: row-normalized embedding batches, cosine
//! similarity blocks, tempered softmax, and a seeded RNG.
//!
//! Everything here is a pure function on value inputs and runs in
//! double precision. The softmax subtracts the per-row maximum before
//! exponentiation so that scores up to |s/tau| ~ 1e4 stay finite.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NORM_FLOOR: f64 = 1e-12;

/// Seeded deterministic random stream. Identical seeds produce
/// identical draw sequences; independent substreams for parallel work
/// come from [`Rng::derive`], never from sharing one stream.
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for item `index`, derived from the base seed
    /// (not from the current stream position).
    pub fn derive(&self, index: u64) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(index.wrapping_add(0x51ab_de71))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    pub fn f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // 64-bit multiply-shift; bias is negligible for desk-scale n.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.f64().max(1e-300);
        let u2 = self.f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// An M x d matrix of embedding rows, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBatch {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingBatch {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || dim < 2 || data.len() != rows * dim {
            return Err(Error::InvalidShape {
                rows,
                dim,
                len: data.len(),
            });
        }
        Ok(EmbeddingBatch { rows, dim, data })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        EmbeddingBatch {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(m * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::DimMismatch {
                    left: d,
                    right: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        EmbeddingBatch::new(m, d, data)
    }

    /// Gaussian rows normalized to unit length.
    pub fn random_unit(rng: &mut Rng, rows: usize, dim: usize) -> Self {
        let mut b = EmbeddingBatch::zeros(rows, dim);
        for i in 0..rows {
            loop {
                for v in b.row_mut(i) {
                    *v = rng.normal();
                }
                if normalize_in_place(b.row_mut(i)).is_ok() {
                    break;
                }
            }
        }
        b
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn set_row(&mut self, i: usize, values: &[f64]) {
        self.row_mut(i).copy_from_slice(values);
    }

    /// Normalize every row to unit L2 norm.
    pub fn normalize_rows(&mut self) -> Result<()> {
        for i in 0..self.rows {
            normalize_in_place(self.row_mut(i))?;
        }
        Ok(())
    }

    /// Rows of `a` followed by rows of `b`.
    pub fn vstack(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<EmbeddingBatch> {
        if a.dim != b.dim {
            return Err(Error::DimMismatch {
                left: a.dim,
                right: b.dim,
            });
        }
        let mut data = Vec::with_capacity((a.rows + b.rows) * a.dim);
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        EmbeddingBatch::new(a.rows + b.rows, a.dim, data)
    }

    /// self += alpha * other, elementwise.
    pub fn axpy(&mut self, alpha: f64, other: &EmbeddingBatch) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (x, y) in self.data.iter_mut().zip(other.data.iter()) {
            *x += alpha * y;
        }
    }
}

fn normalize_in_place(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < NORM_FLOOR {
        return Err(Error::ZeroVector);
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    Ok(())
}

/// Unit-norm copy of `v`. Direction is preserved.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    normalize_in_place(&mut out)?;
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity: dot(a, b) / (|a| |b|). Symmetric and invariant
/// to positive rescaling of either argument.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return Err(Error::ZeroVector);
    }
    Ok(dot(a, b) / (na * nb))
}

/// Pairwise dot products between anchor rows and candidate rows,
/// together with the softmax temperature that will scale them.
#[derive(Debug, Clone)]
pub struct SimilarityBlock {
    pub anchors: usize,
    pub candidates: usize,
    /// anchors x candidates, row-major; scores[i][j] = dot(A_i, B_j).
    pub scores: Vec<f64>,
    pub temperature: f64,
}

impl SimilarityBlock {
    pub fn score(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.candidates + j]
    }
}

/// scores[i][j] = dot(A_i, B_j). Inputs are expected row-normalized,
/// in which case every entry lies in [-1, 1].
pub fn sim_block(
    a: &EmbeddingBatch,
    b: &EmbeddingBatch,
    temperature: f64,
) -> Result<SimilarityBlock> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    if temperature <= 0.0 {
        return Err(Error::NonPositiveTemperature { temperature });
    }
    let (m, l) = (a.rows(), b.rows());
    let mut scores = vec![0.0; m * l];
    for i in 0..m {
        let ai = a.row(i);
        for j in 0..l {
            scores[i * l + j] = dot(ai, b.row(j));
        }
    }
    Ok(SimilarityBlock {
        anchors: m,
        candidates: l,
        scores,
        temperature,
    })
}

/// Per-anchor softmax of scores / tau. Each output row sums to 1.
///
/// Each anchor row competes over the full candidate axis; this is the
/// normalization under which a diagonal cross-entropy with one
/// positive per anchor is well formed.
pub fn tempered_softmax(block: &SimilarityBlock) -> Result<Vec<f64>> {
    if block.temperature <= 0.0 {
        return Err(Error::NonPositiveTemperature {
            temperature: block.temperature,
        });
    }
    let (m, l) = (block.anchors, block.candidates);
    let mut out = vec![0.0; m * l];
    for i in 0..m {
        let row = &block.scores[i * l..(i + 1) * l];
        let max = row
            .iter()
            .map(|s| s / block.temperature)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..l {
            let e = (row[j] / block.temperature - max).exp();
            out[i * l + j] = e;
            sum += e;
        }
        for j in 0..l {
            out[i * l + j] /= sum;
        }
    }
    Ok(out)
}

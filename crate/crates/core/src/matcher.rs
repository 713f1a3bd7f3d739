//! Descriptor matching: dual-softmax with a confidence threshold, and mutual
//! nearest neighbours.

use crate::error::{Error, Result};
use crate::tensor::{dot, DescriptorMatrix, Matrix};

/// Temperature of the dual-softmax used in the training objective; logits are
/// `S / temperature`.
pub const LOSS_TEMPERATURE: f32 = 20.0;

/// Temperature used when matching. Small enough that mutual nearest
/// neighbours of near-collinear descriptors still pass the threshold.
pub const MATCH_TEMPERATURE: f32 = 1e-4;

pub const MATCH_THRESHOLD: f32 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchMethod {
    DualSoftmax,
    Mnn,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub confidence: f32,
}

/// Matches ordered by index into the first set.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
    pub method: MatchMethod,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// `S = A Bᵀ`.
pub fn similarity(a: &DescriptorMatrix, b: &DescriptorMatrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(format!(
            "descriptor dimensions differ: {} vs {}",
            a.cols, b.cols
        )));
    }
    let mut s = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ra = a.row(i);
        let out = s.row_mut(i);
        for (j, o) in out.iter_mut().enumerate() {
            *o = dot(ra, b.row(j));
        }
    }
    Ok(s)
}

/// Per-row and per-column log-partition terms of `S / temperature`.
struct SoftmaxStats {
    row_max: Vec<f32>,
    row_log_sum: Vec<f32>,
    col_max: Vec<f32>,
    col_log_sum: Vec<f32>,
    inv_t: f32,
}

impl SoftmaxStats {
    fn new(s: &Matrix, temperature: f32) -> Self {
        let inv_t = 1.0 / temperature;
        let mut row_max = vec![f32::NEG_INFINITY; s.rows];
        let mut col_max = vec![f32::NEG_INFINITY; s.cols];
        for i in 0..s.rows {
            for (j, &v) in s.row(i).iter().enumerate() {
                let l = v * inv_t;
                row_max[i] = row_max[i].max(l);
                col_max[j] = col_max[j].max(l);
            }
        }
        let mut row_sum = vec![0.0f32; s.rows];
        let mut col_sum = vec![0.0f32; s.cols];
        for i in 0..s.rows {
            for (j, &v) in s.row(i).iter().enumerate() {
                let l = v * inv_t;
                row_sum[i] += (l - row_max[i]).exp();
                col_sum[j] += (l - col_max[j]).exp();
            }
        }
        Self {
            row_max,
            row_log_sum: row_sum.iter().map(|v| v.ln()).collect(),
            col_max,
            col_log_sum: col_sum.iter().map(|v| v.ln()).collect(),
            inv_t,
        }
    }

    #[inline]
    fn prob(&self, s: f32, i: usize, j: usize) -> f32 {
        let l = s * self.inv_t;
        let r = (l - self.row_max[i] - self.row_log_sum[i]).exp();
        let c = (l - self.col_max[j] - self.col_log_sum[j]).exp();
        r * c
    }
}

/// `P = softmax_rows(S / T) ⊙ softmax_cols(S / T)`.
pub fn dual_softmax_probs(s: &Matrix, temperature: f32) -> Matrix {
    let stats = SoftmaxStats::new(s, temperature);
    let mut p = Matrix::zeros(s.rows, s.cols);
    for i in 0..s.rows {
        for j in 0..s.cols {
            p.data[i * s.cols + j] = stats.prob(s.get(i, j), i, j);
        }
    }
    p
}

/// Mutual argmax of the dual-softmax probabilities, kept when the probability
/// reaches `threshold`. Argmax ties go to the lowest index.
pub fn dual_softmax_match(
    a: &DescriptorMatrix,
    b: &DescriptorMatrix,
    temperature: f32,
    threshold: f32,
) -> Result<MatchSet> {
    let s = similarity(a, b)?;
    let mut pairs = Vec::new();
    if s.rows > 0 && s.cols > 0 {
        let stats = SoftmaxStats::new(&s, temperature);
        let mut row_best = vec![(f32::NEG_INFINITY, 0usize); s.rows];
        let mut col_best = vec![(f32::NEG_INFINITY, 0usize); s.cols];
        for i in 0..s.rows {
            for (j, &v) in s.row(i).iter().enumerate() {
                let p = stats.prob(v, i, j);
                if p > row_best[i].0 {
                    row_best[i] = (p, j);
                }
                if p > col_best[j].0 {
                    col_best[j] = (p, i);
                }
            }
        }
        for (i, &(p, j)) in row_best.iter().enumerate() {
            if col_best[j].1 == i && p >= threshold {
                pairs.push(Match { a: i, b: j, confidence: p });
            }
        }
    }
    Ok(MatchSet {
        pairs,
        method: MatchMethod::DualSoftmax,
    })
}

/// Mutual nearest neighbours by cosine similarity; confidence is the
/// similarity.
pub fn mnn_match(a: &DescriptorMatrix, b: &DescriptorMatrix) -> Result<MatchSet> {
    let s = similarity(a, b)?;
    let mut row_best = vec![(f32::NEG_INFINITY, 0usize); s.rows];
    let mut col_best = vec![(f32::NEG_INFINITY, 0usize); s.cols];
    for i in 0..s.rows {
        for (j, &v) in s.row(i).iter().enumerate() {
            if v > row_best[i].0 {
                row_best[i] = (v, j);
            }
            if v > col_best[j].0 {
                col_best[j] = (v, i);
            }
        }
    }
    let pairs = row_best
        .iter()
        .enumerate()
        .filter(|&(i, &(_, j))| s.cols > 0 && col_best[j].1 == i)
        .map(|(i, &(v, j))| Match { a: i, b: j, confidence: v })
        .collect();
    Ok(MatchSet {
        pairs,
        method: MatchMethod::Mnn,
    })
}

//! Minimal multi-head causal self-attention decoder with deterministic greedy
//! decoding and a per-layer intervention hook over pre-softmax score rows.
//!
//! All arithmetic is f64. The decoder keeps a per-layer key/value cache; a
//! recompute-from-scratch mode exists behind a debug flag for equivalence
//! testing against the cached path.

mod decoder;
mod model;

pub use decoder::{
    decoder_step,
    greedy_decode, greedy_decode_with_options, AttentionHook, DecodeOptions, DecodeTrace,
    DecoderState, IdentityHook, LayerModulation, StepOutcome, StepRecord,
};
pub use model::{HeadWeights, LayerWeights, Model};

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

/// Reserved end-of-sequence token id.
pub const EOS_TOKEN: u32 = 0;

/// Architecture description for the toy decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 {
            return Err(CoreError::InvalidConfig(
                "num_layers and num_heads must be >= 1".into(),
            ));
        }
        if self.d_model != self.num_heads * self.d_head {
            return Err(CoreError::InvalidConfig(format!(
                "d_model ({}) must equal num_heads * d_head ({} * {})",
                self.d_model, self.num_heads, self.d_head
            )));
        }
        if self.vocab_size == 0 {
            return Err(CoreError::InvalidConfig("vocab_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Partition of the growing decoder sequence at step `t` (1-based).
///
/// Positions `[0, s)` are a fixed pre-visual prefix (e.g. a BOS token),
/// `[s, e)` is the visual prefix of `n` image tokens, `[e, e + m)` the prompt,
/// and everything after is generated. The current query position is the last
/// one, `seq_len() - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    /// Start index of the image tokens.
    pub s: usize,
    /// Number of image tokens.
    pub n: usize,
    /// Number of prompt tokens.
    pub m: usize,
    /// 1-based decoding step.
    pub t: usize,
}

impl TokenLayout {
    pub fn new(s: usize, n: usize, m: usize, t: usize) -> Result<Self> {
        if t == 0 {
            return Err(CoreError::InvalidConfig("decoding step t is 1-based".into()));
        }
        Ok(Self { s, n, m, t })
    }

    /// End index (exclusive) of the image tokens.
    pub fn e(&self) -> usize {
        self.s + self.n
    }

    /// Current sequence length a_t.
    pub fn seq_len(&self) -> usize {
        self.s + self.n + self.m + self.t - 1
    }

    /// Index range of the image tokens.
    pub fn image_range(&self) -> std::ops::Range<usize> {
        self.s..self.e()
    }

    /// Index range of the generated tokens (may be empty at step 1).
    pub fn generated_range(&self) -> std::ops::Range<usize> {
        self.e() + self.m..self.seq_len()
    }

    /// Number of already generated tokens visible at this step.
    pub fn num_generated(&self) -> usize {
        self.t - 1
    }
}

/// Pre-softmax attention scores from the current position to every prior
/// position, for one (layer, head) at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScoreRow {
    pub layer: usize,
    pub head: usize,
    pub step: usize,
    pub values: Vec<f64>,
}

/// Post-softmax attention weights; entries are nonnegative and sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeightRow {
    pub layer: usize,
    pub head: usize,
    pub step: usize,
    pub values: Vec<f64>,
}

/// Outcome of the peak-gap gate for one (layer, head) at one step.
///
/// `gap = peak_textual - peak_visual`; the gate is open iff `gap < tau`
/// (strict). A row with no textual positions records `peak_textual = -inf`
/// and an open gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub layer: usize,
    pub head: usize,
    pub step: usize,
    pub peak_visual: f64,
    pub peak_textual: f64,
    pub gap: f64,
    pub open: bool,
}

/// Scaled dot-product scores of one query against a causal key block.
///
/// `values[i] = dot(query, keys[i]) / sqrt(d_head)`.
pub fn compute_score_row(query: &[f64], keys: &[Vec<f64>], d_head: usize) -> Result<Vec<f64>> {
    if query.len() != d_head {
        return Err(CoreError::ShapeMismatch {
            context: "compute_score_row query",
            expected: format!("length {d_head}"),
            actual: format!("length {}", query.len()),
        });
    }
    if !query.iter().all(|v| v.is_finite()) {
        return Err(CoreError::Precondition("query must be finite".into()));
    }
    let scale = (d_head as f64).sqrt();
    let mut out = Vec::with_capacity(keys.len());
    for (i, key) in keys.iter().enumerate() {
        if key.len() != d_head {
            return Err(CoreError::ShapeMismatch {
                context: "compute_score_row key",
                expected: format!("length {d_head}"),
                actual: format!("key {i} has length {}", key.len()),
            });
        }
        let dot: f64 = query.iter().zip(key).map(|(q, k)| q * k).sum();
        out.push(dot / scale);
    }
    Ok(out)
}

/// Numerically stable softmax over a score row.
pub fn softmax_row(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(CoreError::EmptyInput("softmax over empty row".into()));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / sum).collect())
}

/// Greedy argmax with lowest-index tie break.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    #[test]
    fn score_row_quarter_scaling() {
        // 1/sqrt(4) scaling of plain dot products.
        let q = vec![1.0, 0.0, 0.0, 0.0];
        let keys = vec![vec![2.0, 0.0, 0.0, 0.0], vec![0.0, 3.0, 0.0, 0.0]];
        let row = compute_score_row(&q, &keys, 4).unwrap();
        assert_eq!(row, vec![1.0, 0.0]);
    }

    #[test]
    fn score_row_spec_example() {
        // query=[1,0], keys=[[1,0],[0,1]], d_head treated as 4 per the stated
        // scaling example: pad to length 4.
        let q = vec![1.0, 0.0, 0.0, 0.0];
        let keys = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]];
        let row = compute_score_row(&q, &keys, 4).unwrap();
        assert_eq!(row, vec![0.5, 0.0]);
    }

    #[test]
    fn score_row_zero_query() {
        let q = vec![0.0; 3];
        let keys = vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.25]];
        let row = compute_score_row(&q, &keys, 3).unwrap();
        assert!(row.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn score_row_matches_double_loop_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let d = 4usize;
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let keys: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let row = compute_score_row(&q, &keys, d).unwrap();
        for (i, key) in keys.iter().enumerate() {
            let mut dot = 0.0;
            for j in 0..d {
                dot += q[j] * key[j];
            }
            assert_abs_diff_eq!(row[i], dot / (d as f64).sqrt(), epsilon = 1e-12);
        }
    }

    #[test]
    fn score_row_dimension_mismatch_is_structured() {
        let err = compute_score_row(&[1.0], &[vec![1.0, 2.0]], 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected") && msg.contains("length 1"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let w = softmax_row(&[0.0, 0.0, 0.0]).unwrap();
        for v in &w {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-12);
        }
        let w = softmax_row(&[1000.0, 0.0]).unwrap();
        assert!(w[0] > 1.0 - 1e-12 && w[1] < 1e-12);
        assert!(w.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_ln_example() {
        let w = softmax_row(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        assert_abs_diff_eq!(w[0], 1.0 / 6.0, epsilon = 1e-9);
        assert_abs_diff_eq!(w[1], 2.0 / 6.0, epsilon = 1e-9);
        assert_abs_diff_eq!(w[2], 3.0 / 6.0, epsilon = 1e-9);
    }

    #[test]
    fn softmax_empty_errors() {
        assert!(softmax_row(&[]).is_err());
    }

    #[test]
    fn layout_arithmetic() {
        let l = TokenLayout::new(1, 16, 1, 3).unwrap();
        assert_eq!(l.e(), 17);
        assert_eq!(l.seq_len(), 1 + 16 + 1 + 2);
        assert_eq!(l.generated_range(), 18..20);
        assert_eq!(l.num_generated(), 2);
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax_lowest(&[0.5, 0.5, 0.2]), 0);
        assert_eq!(argmax_lowest(&[0.1, 0.9, 0.9]), 1);
    }
}

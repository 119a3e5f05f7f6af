//! Attention measurement apparatus: attention entropy over the visual prefix,
//! Visual Attention Ratio, cross-head KL divergence, token predictive
//! entropy, quantile grouping, and temporal VAR profiles.
//!
//! All operations are pure; natural logarithms throughout.

use crate::attn_core::{AttentionWeightRow, DecodeTrace, TokenLayout};
use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

/// Log-smoothing constant used wherever a log of a possibly-zero mass is
/// taken.
pub const EPSILON: f64 = 1e-8;

/// Ground-truth label of a generated token, assigned by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenLabel {
    Real,
    Hallucinated,
    Other,
}

impl TokenLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            TokenLabel::Real => "real",
            TokenLabel::Hallucinated => "hallucinated",
            TokenLabel::Other => "other",
        }
    }
}

/// Per-layer measurements at one decode step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    /// Head-averaged attention over the image tokens (length n).
    pub avg_image_attention: Vec<f64>,
    /// Attention entropy of the head-averaged image slice.
    pub attention_entropy: f64,
    /// Visual attention ratio per head.
    pub var_per_head: Vec<f64>,
    /// Mean KL of each head's normalized image attention from the head mean.
    pub cross_head_kl: f64,
    /// Heads whose image slice carried no mass and fell back to uniform.
    pub kl_uniform_fallback_heads: usize,
}

/// All diagnostics for one decode step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSnapshot {
    pub per_layer: Vec<LayerDiagnostics>,
    /// Cross-head KL averaged over layers.
    pub layer_avg_kl: f64,
    /// Predictive entropy of the output distribution.
    pub token_entropy: f64,
}

impl DiagnosticsSnapshot {
    /// Layer-and-head-averaged visual attention ratio.
    pub fn mean_var(&self) -> f64 {
        let vals: Vec<f64> = self
            .per_layer
            .iter()
            .map(|l| l.var_per_head.iter().sum::<f64>() / l.var_per_head.len() as f64)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    pub fn mean_attention_entropy(&self) -> f64 {
        let s: f64 = self.per_layer.iter().map(|l| l.attention_entropy).sum();
        s / self.per_layer.len() as f64
    }
}

/// Elementwise mean over heads of the image-token slice of each weight row.
pub fn head_average_image_attention(
    weight_rows: &[AttentionWeightRow],
    layout: &TokenLayout,
) -> Result<Vec<f64>> {
    if weight_rows.is_empty() {
        return Err(CoreError::EmptyInput("no weight rows".into()));
    }
    if layout.n == 0 {
        return Err(CoreError::EmptyInput("layout has no image tokens".into()));
    }
    let range = layout.image_range();
    let mut acc = vec![0.0; layout.n];
    for row in weight_rows {
        let slice = &row.values[range.clone()];
        for (a, v) in acc.iter_mut().zip(slice) {
            *a += v;
        }
    }
    let h = weight_rows.len() as f64;
    for a in &mut acc {
        *a /= h;
    }
    Ok(acc)
}

/// Attention entropy `-sum_i v_i * ln(v_i + eps)` over the (generally
/// sub-normalized) image slice. `renormalize` rescales the slice to sum 1
/// first; the default call sites leave it off.
pub fn attention_entropy(avg_image_attention: &[f64], eps: f64, renormalize: bool) -> f64 {
    let total: f64 = avg_image_attention.iter().sum();
    let scale = if renormalize && total > 0.0 { 1.0 / total } else { 1.0 };
    -avg_image_attention
        .iter()
        .map(|&v| {
            let v = v * scale;
            if v == 0.0 {
                0.0
            } else {
                v * (v + eps).ln()
            }
        })
        .sum::<f64>()
}

/// Fraction of a row's attention mass on the visual prefix.
pub fn visual_attention_ratio(row: &AttentionWeightRow, layout: &TokenLayout) -> f64 {
    row.values[layout.image_range()].iter().sum()
}

/// Cross-head inconsistency: per head, the image slice is renormalized to a
/// probability vector; the result is the mean KL divergence of each head's
/// vector from the head average, with eps-smoothed logs.
///
/// A head with zero image mass is treated as uniform over the n image slots;
/// the count of such fallbacks is reported alongside the value.
pub fn cross_head_kl_detailed(
    weight_rows: &[AttentionWeightRow],
    layout: &TokenLayout,
    eps: f64,
) -> Result<(f64, usize)> {
    if weight_rows.is_empty() {
        return Err(CoreError::EmptyInput("no weight rows".into()));
    }
    if layout.n == 0 {
        return Err(CoreError::EmptyInput("layout has no image tokens".into()));
    }
    let n = layout.n;
    let range = layout.image_range();
    let mut fallbacks = 0usize;
    let normalized: Vec<Vec<f64>> = weight_rows
        .iter()
        .map(|row| {
            let slice = &row.values[range.clone()];
            let total: f64 = slice.iter().sum();
            if total > 0.0 {
                slice.iter().map(|v| v / total).collect()
            } else {
                fallbacks += 1;
                vec![1.0 / n as f64; n]
            }
        })
        .collect();
    let h = normalized.len() as f64;
    let mut mean = vec![0.0; n];
    for p in &normalized {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / h;
        }
    }
    let mut kl_sum = 0.0;
    for p in &normalized {
        for (pi, mi) in p.iter().zip(&mean) {
            if *pi > 0.0 {
                kl_sum += pi * ((pi + eps).ln() - (mi + eps).ln());
            }
        }
    }
    Ok((kl_sum / h, fallbacks))
}

pub fn cross_head_kl(
    weight_rows: &[AttentionWeightRow],
    layout: &TokenLayout,
    eps: f64,
) -> Result<f64> {
    cross_head_kl_detailed(weight_rows, layout, eps).map(|(v, _)| v)
}

/// Shannon entropy of `softmax(logits)`, natural log.
pub fn token_entropy(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    -exps
        .iter()
        .map(|e| {
            let p = e / sum;
            if p == 0.0 {
                0.0
            } else {
                p * p.ln()
            }
        })
        .sum::<f64>()
}

/// Arithmetic mean of per-layer scalars.
pub fn layer_average(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(CoreError::EmptyInput("layer_average over no layers".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Per-group statistics from a quantile split over cross-head divergence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group: usize,
    pub count: usize,
    pub mean_entropy_real: Option<f64>,
    pub mean_entropy_hallucinated: Option<f64>,
    pub mean_entropy_other: Option<f64>,
    /// Fraction of the group's tokens labeled Hallucinated.
    pub halluc_rate: f64,
}

/// Sort tokens by divergence and split them into `num_groups` equal-count
/// groups (remainder to the earlier groups); report per-label mean predictive
/// entropy and the hallucination fraction per group.
pub fn quantile_group_stats(
    tokens: &[(f64, f64, TokenLabel)],
    num_groups: usize,
) -> Result<Vec<GroupStats>> {
    if tokens.is_empty() {
        return Err(CoreError::EmptyInput("quantile grouping over no tokens".into()));
    }
    if num_groups == 0 {
        return Err(CoreError::Precondition("num_groups must be >= 1".into()));
    }
    let mut sorted: Vec<&(f64, f64, TokenLabel)> = tokens.iter().collect();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite divergences"));

    let base = sorted.len() / num_groups;
    let remainder = sorted.len() % num_groups;
    let mut out = Vec::with_capacity(num_groups);
    let mut idx = 0usize;
    for g in 0..num_groups {
        let size = base + usize::from(g < remainder);
        let slice = &sorted[idx..idx + size];
        idx += size;
        let mut sums = [0.0f64; 3];
        let mut counts = [0usize; 3];
        for (_, e_tok, label) in slice.iter() {
            let li = match label {
                TokenLabel::Real => 0,
                TokenLabel::Hallucinated => 1,
                TokenLabel::Other => 2,
            };
            sums[li] += e_tok;
            counts[li] += 1;
        }
        let mean = |i: usize| {
            if counts[i] > 0 {
                Some(sums[i] / counts[i] as f64)
            } else {
                None
            }
        };
        out.push(GroupStats {
            group: g,
            count: size,
            mean_entropy_real: mean(0),
            mean_entropy_hallucinated: mean(1),
            mean_entropy_other: mean(2),
            halluc_rate: if size == 0 {
                0.0
            } else {
                counts[1] as f64 / size as f64
            },
        });
    }
    Ok(out)
}

/// Sequence of (normalized position, layer-averaged VAR) points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarProfile {
    pub points: Vec<(f64, f64)>,
}

/// Per generated token: the layer-and-head-averaged VAR paired with the
/// token's position normalized by `length - 1` (a 1-token trace maps to 0).
pub fn var_profile(trace: &DecodeTrace) -> Result<VarProfile> {
    if trace.steps.is_empty() {
        return Err(CoreError::EmptyInput("var_profile of an empty trace".into()));
    }
    let len = trace.steps.len();
    let denom = if len > 1 { (len - 1) as f64 } else { 1.0 };
    let points = trace
        .steps
        .iter()
        .enumerate()
        .map(|(i, step)| (i as f64 / denom, step.snapshot.mean_var()))
        .collect();
    Ok(VarProfile { points })
}

fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation between position and VAR, ties mid-ranked.
/// A profile with zero variance on either axis yields 0 (no trend).
pub fn rank_trend(profile: &VarProfile) -> Result<f64> {
    if profile.points.len() < 3 {
        return Err(CoreError::Precondition(
            "rank_trend needs at least 3 points".into(),
        ));
    }
    let xs: Vec<f64> = profile.points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = profile.points.iter().map(|p| p.1).collect();
    let rx = mid_ranks(&xs);
    let ry = mid_ranks(&ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// Assemble the full snapshot for one decode step from the post-modulation
/// attention weights and the step logits.
pub fn step_snapshot(
    weights: &[Vec<AttentionWeightRow>],
    logits: &[f64],
    layout: &TokenLayout,
) -> DiagnosticsSnapshot {
    let per_layer: Vec<LayerDiagnostics> = weights
        .iter()
        .map(|layer_rows| {
            if layout.n == 0 {
                // No visual prefix: image diagnostics degenerate to zero.
                return LayerDiagnostics {
                    avg_image_attention: Vec::new(),
                    attention_entropy: 0.0,
                    var_per_head: vec![0.0; layer_rows.len()],
                    cross_head_kl: 0.0,
                    kl_uniform_fallback_heads: 0,
                };
            }
            let avg = head_average_image_attention(layer_rows, layout)
                .expect("nonempty image slice");
            let entropy = attention_entropy(&avg, EPSILON, false);
            let var_per_head = layer_rows
                .iter()
                .map(|r| visual_attention_ratio(r, layout))
                .collect();
            let (kl, fallbacks) = cross_head_kl_detailed(layer_rows, layout, EPSILON)
                .expect("nonempty image slice");
            LayerDiagnostics {
                avg_image_attention: avg,
                attention_entropy: entropy,
                var_per_head,
                cross_head_kl: kl,
                kl_uniform_fallback_heads: fallbacks,
            }
        })
        .collect();
    let layer_avg_kl = layer_average(
        &per_layer.iter().map(|l| l.cross_head_kl).collect::<Vec<_>>(),
    )
    .expect("at least one layer");
    DiagnosticsSnapshot {
        per_layer,
        layer_avg_kl,
        token_entropy: token_entropy(logits),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(values: Vec<f64>) -> AttentionWeightRow {
        AttentionWeightRow {
            layer: 0,
            head: 0,
            step: 1,
            values,
        }
    }

    fn layout(s: usize, n: usize, m: usize, t: usize) -> TokenLayout {
        TokenLayout::new(s, n, m, t).unwrap()
    }

    #[test]
    fn head_average_single_head_is_identity() {
        let l = layout(0, 2, 1, 1);
        let rows = vec![row(vec![0.3, 0.5, 0.2])];
        let avg = head_average_image_attention(&rows, &l).unwrap();
        assert_eq!(avg, vec![0.3, 0.5]);
    }

    #[test]
    fn head_average_two_disjoint_heads() {
        let l = layout(0, 2, 1, 1);
        let rows = vec![row(vec![1.0, 0.0, 0.0]), row(vec![0.0, 1.0, 0.0])];
        let avg = head_average_image_attention(&rows, &l).unwrap();
        assert_eq!(avg, vec![0.5, 0.5]);
    }

    #[test]
    fn head_average_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = layout(0, 6, 2, 1);
        let rows: Vec<AttentionWeightRow> = (0..4)
            .map(|_| {
                let mut v: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
                let s: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= s);
                row(v)
            })
            .collect();
        let avg = head_average_image_attention(&rows, &l).unwrap();
        for i in 0..6 {
            let mut s = 0.0;
            for r in &rows {
                s += r.values[i];
            }
            assert_abs_diff_eq!(avg[i], s / 4.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn head_average_rejects_empty_image() {
        let l = layout(0, 0, 2, 1);
        assert!(head_average_image_attention(&[row(vec![0.5, 0.5])], &l).is_err());
    }

    #[test]
    fn entropy_uniform_one_hot_and_half() {
        assert_abs_diff_eq!(
            attention_entropy(&[0.25, 0.25, 0.25, 0.25], 1e-8, false),
            4f64.ln(),
            epsilon = 1e-6
        );
        assert_abs_diff_eq!(
            attention_entropy(&[1.0, 0.0, 0.0, 0.0], 1e-8, false),
            0.0,
            epsilon = 1e-7
        );
        assert_abs_diff_eq!(
            attention_entropy(&[0.5, 0.5, 0.0, 0.0], 1e-8, false),
            2f64.ln(),
            epsilon = 1e-6
        );
    }

    #[test]
    fn entropy_zero_vector_is_zero() {
        assert_eq!(attention_entropy(&[0.0, 0.0], EPSILON, false), 0.0);
    }

    #[test]
    fn entropy_renormalize_rescales() {
        // Slice summing to 0.5, renormalized to the uniform distribution.
        let e = attention_entropy(&[0.125, 0.125, 0.125, 0.125], 1e-8, true);
        assert_abs_diff_eq!(e, 4f64.ln(), epsilon = 1e-6);
    }

    #[test]
    fn var_extremes_and_direct_sum() {
        let l = layout(0, 2, 1, 1);
        assert_eq!(visual_attention_ratio(&row(vec![0.6, 0.4, 0.0]), &l), 1.0);
        assert_eq!(visual_attention_ratio(&row(vec![0.0, 0.0, 1.0]), &l), 0.0);
        assert_abs_diff_eq!(
            visual_attention_ratio(&row(vec![0.1, 0.2, 0.7]), &l),
            0.3,
            epsilon = 1e-15
        );
    }

    #[test]
    fn kl_identical_heads_is_zero() {
        let l = layout(0, 3, 1, 1);
        let r = row(vec![0.2, 0.3, 0.4, 0.1]);
        let kl = cross_head_kl(&[r.clone(), r.clone(), r], &l, EPSILON).unwrap();
        assert_abs_diff_eq!(kl, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn kl_disjoint_supports_is_ln2() {
        let l = layout(0, 2, 1, 1);
        let rows = vec![row(vec![0.9, 0.0, 0.1]), row(vec![0.0, 0.9, 0.1])];
        let kl = cross_head_kl(&rows, &l, EPSILON).unwrap();
        assert_abs_diff_eq!(kl, 2f64.ln(), epsilon = 1e-4);
    }

    #[test]
    fn kl_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = layout(0, 5, 1, 1);
        let rows: Vec<AttentionWeightRow> = (0..3)
            .map(|_| {
                let mut v: Vec<f64> = (0..6).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= s);
                row(v)
            })
            .collect();
        let kl = cross_head_kl(&rows, &l, EPSILON).unwrap();

        // Brute-force oracle: renormalize slices, mean, then the double loop.
        let ps: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let sl = &r.values[0..5];
                let tot: f64 = sl.iter().sum();
                sl.iter().map(|v| v / tot).collect()
            })
            .collect();
        let mut mean = vec![0.0; 5];
        for p in &ps {
            for i in 0..5 {
                mean[i] += p[i] / 3.0;
            }
        }
        let mut acc = 0.0;
        for p in &ps {
            for i in 0..5 {
                acc += p[i] * ((p[i] + EPSILON).ln() - (mean[i] + EPSILON).ln());
            }
        }
        assert_abs_diff_eq!(kl, acc / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn kl_zero_mass_head_falls_back_to_uniform() {
        let l = layout(0, 2, 1, 1);
        let rows = vec![row(vec![0.0, 0.0, 1.0]), row(vec![0.5, 0.5, 0.0])];
        let (kl, fallbacks) = cross_head_kl_detailed(&rows, &l, EPSILON).unwrap();
        assert_eq!(fallbacks, 1);
        // Both heads end up uniform over 2 slots, so the divergence vanishes.
        assert_abs_diff_eq!(kl, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn token_entropy_examples() {
        assert_abs_diff_eq!(token_entropy(&[0.0; 4]), 4f64.ln(), epsilon = 1e-12);
        assert!(token_entropy(&[1e6, 0.0, 0.0]) < 1e-9);
        assert_abs_diff_eq!(
            token_entropy(&[0.0, 3f64.ln()]),
            0.5623351446188083,
            epsilon = 1e-9
        );
    }

    #[test]
    fn layer_average_examples() {
        assert_eq!(layer_average(&[1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(layer_average(&[7.5]).unwrap(), 7.5);
        assert!(layer_average(&[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vals: Vec<f64> = (0..17).map(|_| rng.random_range(-4.0..4.0)).collect();
        let mut s = 0.0;
        for v in &vals {
            s += v;
        }
        assert_abs_diff_eq!(layer_average(&vals).unwrap(), s / 17.0, epsilon = 1e-12);
    }

    #[test]
    fn quantile_groups_order_and_split() {
        let toks = vec![
            (1.0, 0.1, TokenLabel::Real),
            (2.0, 0.2, TokenLabel::Real),
            (3.0, 0.3, TokenLabel::Hallucinated),
            (4.0, 0.4, TokenLabel::Hallucinated),
        ];
        let groups = quantile_group_stats(&toks, 2).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].count, 2);
        assert_abs_diff_eq!(groups[0].mean_entropy_real.unwrap(), 0.15, epsilon = 1e-12);
        assert_eq!(groups[0].halluc_rate, 0.0);
        assert_eq!(groups[1].halluc_rate, 1.0);
        assert_abs_diff_eq!(
            groups[1].mean_entropy_hallucinated.unwrap(),
            0.35,
            epsilon = 1e-12
        );
    }

    #[test]
    fn quantile_identical_tokens_give_identical_groups() {
        let toks = vec![(1.0, 0.5, TokenLabel::Real); 9];
        let groups = quantile_group_stats(&toks, 3).unwrap();
        for g in &groups {
            assert_eq!(g.count, 3);
            assert_abs_diff_eq!(g.mean_entropy_real.unwrap(), 0.5, epsilon = 1e-12);
            assert_eq!(g.halluc_rate, 0.0);
        }
    }

    #[test]
    fn quantile_matches_sort_and_slice_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let toks: Vec<(f64, f64, TokenLabel)> = (0..100)
            .map(|_| {
                let label = match rng.random_range(0..3) {
                    0 => TokenLabel::Real,
                    1 => TokenLabel::Hallucinated,
                    _ => TokenLabel::Other,
                };
                (
                    rng.random_range(0.0..5.0),
                    rng.random_range(0.0..2.0),
                    label,
                )
            })
            .collect();
        let num_groups = 7;
        let groups = quantile_group_stats(&toks, num_groups).unwrap();

        // Independent oracle: sort indices, slice with front-loaded remainder.
        let mut idx: Vec<usize> = (0..toks.len()).collect();
        idx.sort_by(|&a, &b| toks[a].0.partial_cmp(&toks[b].0).unwrap());
        let base = toks.len() / num_groups;
        let rem = toks.len() % num_groups;
        let mut pos = 0;
        for (g, stats) in groups.iter().enumerate() {
            let size = base + usize::from(g < rem);
            let ids = &idx[pos..pos + size];
            pos += size;
            let halluc = ids
                .iter()
                .filter(|&&i| toks[i].2 == TokenLabel::Hallucinated)
                .count();
            assert_eq!(stats.count, size);
            assert_abs_diff_eq!(
                stats.halluc_rate,
                halluc as f64 / size as f64,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn rank_trend_monotone_cases() {
        let dec = VarProfile {
            points: (0..5).map(|i| (i as f64 / 4.0, 1.0 - 0.1 * i as f64)).collect(),
        };
        assert_abs_diff_eq!(rank_trend(&dec).unwrap(), -1.0, epsilon = 1e-12);
        let inc = VarProfile {
            points: (0..5).map(|i| (i as f64 / 4.0, 0.1 * i as f64)).collect(),
        };
        assert_abs_diff_eq!(rank_trend(&inc).unwrap(), 1.0, epsilon = 1e-12);
        let two = VarProfile {
            points: vec![(0.0, 1.0), (1.0, 0.5)],
        };
        assert!(rank_trend(&two).is_err());
    }

    #[test]
    fn rank_trend_matches_rank_based_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let points: Vec<(f64, f64)> = (0..20)
            .map(|i| (i as f64 / 19.0, rng.random_range(0.0..1.0)))
            .collect();
        let got = rank_trend(&VarProfile { points: points.clone() }).unwrap();

        // Oracle: explicit rank vectors (no ties in this input), Pearson.
        let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
        let mut order: Vec<usize> = (0..ys.len()).collect();
        order.sort_by(|&a, &b| ys[a].partial_cmp(&ys[b]).unwrap());
        let mut ry = vec![0.0; ys.len()];
        for (rank, &i) in order.iter().enumerate() {
            ry[i] = rank as f64 + 1.0;
        }
        let rx: Vec<f64> = (0..ys.len()).map(|i| i as f64 + 1.0).collect();
        let n = ys.len() as f64;
        let mx = (n + 1.0) / 2.0;
        let (mut cov, mut vx, mut vy) = (0.0, 0.0, 0.0);
        for i in 0..ys.len() {
            cov += (rx[i] - mx) * (ry[i] - mx);
            vx += (rx[i] - mx).powi(2);
            vy += (ry[i] - mx).powi(2);
        }
        assert_abs_diff_eq!(got, cov / (vx.sqrt() * vy.sqrt()), epsilon = 1e-12);
    }
}

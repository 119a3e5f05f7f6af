//! Generalization-bound machinery: the norm-based Rademacher complexity bound
//! for single-layer multi-head attention, its uniformity-minimality
//! decomposition, the softmax Lipschitz inequality, a Monte-Carlo lower
//! estimate of the empirical Rademacher complexity, and the multi-head
//! mutual-information bound with a plug-in estimator.

use crate::error::{CoreError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Norm budget for the attention function class.
///
/// `a[h]` is the per-head product of the value and query-key norm bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormBudget {
    pub b_w: f64,
    pub b_wc: f64,
    pub b_o: f64,
    pub l_sigma: f64,
    pub r: f64,
    pub a: Vec<f64>,
    /// Sample count n.
    pub n: usize,
}

impl NormBudget {
    pub fn validate(&self) -> Result<()> {
        if self.a.is_empty() {
            return Err(CoreError::EmptyInput("per-head products a are empty".into()));
        }
        if self.n == 0 {
            return Err(CoreError::Precondition("sample count n must be >= 1".into()));
        }
        let all = [self.b_w, self.b_wc, self.b_o, self.l_sigma, self.r];
        if all.iter().chain(self.a.iter()).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CoreError::Precondition(
                "norm bounds must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    fn prefactor(&self) -> f64 {
        4.0 * self.b_w * self.b_wc * self.b_o * self.l_sigma * self.r.powi(3)
            / (self.n as f64).sqrt()
    }
}

/// Evaluated complexity bound together with its decomposition into the
/// uniform part `H * abar^2` and the dispersion `sum (a_h - abar)^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound: f64,
    pub abar: f64,
    pub h_abar_sq: f64,
    pub dispersion: f64,
    /// Bound value for the uniform head profile with the same mean.
    pub uniform_bound: f64,
}

/// `4 B_w B_WC B_O L_sigma R^3 / sqrt(n) * sqrt(H abar^2 + sum (a_h - abar)^2)`.
pub fn rademacher_bound(budget: &NormBudget) -> Result<BoundReport> {
    budget.validate()?;
    let h = budget.a.len() as f64;
    let abar = budget.a.iter().sum::<f64>() / h;
    let dispersion = budget.a.iter().map(|a| (a - abar).powi(2)).sum::<f64>();
    let h_abar_sq = h * abar * abar;
    let pre = budget.prefactor();
    Ok(BoundReport {
        bound: pre * (h_abar_sq + dispersion).sqrt(),
        abar,
        h_abar_sq,
        dispersion,
        uniform_bound: pre * h_abar_sq.sqrt(),
    })
}

/// Both sides of `sum a_h^2 = H abar^2 + sum (a_h - abar)^2`, computed
/// independently.
pub fn dispersion_identity(a: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() {
        return Err(CoreError::EmptyInput("dispersion identity of an empty vector".into()));
    }
    let lhs = a.iter().map(|v| v * v).sum::<f64>();
    let h = a.len() as f64;
    let abar = a.iter().sum::<f64>() / h;
    let rhs = h * abar * abar + a.iter().map(|v| (v - abar).powi(2)).sum::<f64>();
    Ok((lhs, rhs))
}

/// Result of checking `||softmax(t1) - softmax(t2)||_1 <= 2 ||t1 - t2||_inf`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

pub fn softmax_lipschitz_check(theta1: &[f64], theta2: &[f64]) -> Result<LipschitzCheck> {
    if theta1.len() != theta2.len() || theta1.is_empty() {
        return Err(CoreError::ShapeMismatch {
            context: "softmax_lipschitz_check",
            expected: format!("two equal-length vectors of length >= 1"),
            actual: format!("lengths {} and {}", theta1.len(), theta2.len()),
        });
    }
    let s1 = crate::attn_core::softmax_row(theta1)?;
    let s2 = crate::attn_core::softmax_row(theta2)?;
    let lhs: f64 = s1.iter().zip(&s2).map(|(a, b)| (a - b).abs()).sum();
    let rhs = 2.0
        * theta1
            .iter()
            .zip(theta2)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
    Ok(LipschitzCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-12,
    })
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

fn scale_to_frobenius(m: &mut [Vec<f64>], target: f64) {
    let norm: f64 = m
        .iter()
        .flat_map(|r| r.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let factor = if norm > 0.0 { target / norm } else { 0.0 };
    for row in m.iter_mut() {
        for v in row.iter_mut() {
            *v *= factor;
        }
    }
}

fn scale_to_l2(v: &mut [f64], target: f64) {
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let factor = if norm > 0.0 { target / norm } else { 0.0 };
    for x in v.iter_mut() {
        *x *= factor;
    }
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// One randomly drawn member of the attention function class, with every
/// parameter on the surface of its norm ball (per-head norms split as
/// `sqrt(a_h)` each for the value and query-key factors).
struct SampledFunction {
    w: Vec<f64>,
    w_c: Vec<Vec<f64>>,
    w_o: Vec<Vec<f64>>,
    w_v: Vec<Vec<Vec<f64>>>,
    w_qk: Vec<Vec<Vec<f64>>>,
    x_cls: Vec<f64>,
    l_sigma: f64,
}

impl SampledFunction {
    fn draw(rng: &mut ChaCha8Rng, budget: &NormBudget, d: usize, d_v: usize) -> Self {
        let h = budget.a.len();
        let mut w: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        scale_to_l2(&mut w, budget.b_w);
        let mut w_c = gaussian_matrix(rng, d, d);
        scale_to_frobenius(&mut w_c, budget.b_wc);
        let mut w_o = gaussian_matrix(rng, h * d_v, d);
        scale_to_frobenius(&mut w_o, budget.b_o);
        let mut w_v = Vec::with_capacity(h);
        let mut w_qk = Vec::with_capacity(h);
        for a_h in &budget.a {
            let split = a_h.sqrt();
            let mut v = gaussian_matrix(rng, d, d_v);
            scale_to_frobenius(&mut v, split);
            w_v.push(v);
            let mut qk = gaussian_matrix(rng, d, d);
            scale_to_frobenius(&mut qk, split);
            w_qk.push(qk);
        }
        let mut x_cls: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        scale_to_l2(&mut x_cls, budget.r);
        Self {
            w,
            w_c,
            w_o,
            w_v,
            w_qk,
            x_cls,
            l_sigma: budget.l_sigma,
        }
    }

    /// `g(X) = w^T W_C^T sigma(W_O^T concat_h(W_V^h{}^T X^T alpha_h))` with
    /// `alpha_h = softmax(X W_QK^h{}^T x_cls)` and linear `sigma = L_sigma u`.
    fn eval(&self, x: &[Vec<f64>]) -> f64 {
        let h = self.w_v.len();
        let d_v = self.w_v[0][0].len();
        let mut concat = Vec::with_capacity(h * d_v);
        for head in 0..h {
            // scores_t = x_t . (W_QK^h x_cls)
            let key = mat_vec(&self.w_qk[head], &self.x_cls);
            let scores: Vec<f64> = x
                .iter()
                .map(|tok| tok.iter().zip(&key).map(|(a, b)| a * b).sum())
                .collect();
            let alpha = crate::attn_core::softmax_row(&scores).expect("nonempty token list");
            // pooled = X^T alpha, z = W_V^T pooled
            let d = x[0].len();
            let mut pooled = vec![0.0; d];
            for (tok, a) in x.iter().zip(&alpha) {
                for (p, t) in pooled.iter_mut().zip(tok) {
                    *p += a * t;
                }
            }
            for col in 0..d_v {
                let mut z = 0.0;
                for row in 0..d {
                    z += self.w_v[head][row][col] * pooled[row];
                }
                concat.push(z);
            }
        }
        // u = W_O^T concat (W_O is (H d_v) x d), sigma linear, then W_C^T, then w.
        let d = self.w.len();
        let mut u = vec![0.0; d];
        for (ci, row) in concat.iter().zip(self.w_o.iter()) {
            for (ui, wv) in u.iter_mut().zip(row.iter()) {
                *ui += ci * wv;
            }
        }
        for v in u.iter_mut() {
            *v *= self.l_sigma;
        }
        let mut c = vec![0.0; d];
        for (ui, row) in u.iter().zip(self.w_c.iter()) {
            for (cj, wv) in c.iter_mut().zip(row.iter()) {
                *cj += ui * wv;
            }
        }
        self.w.iter().zip(&c).map(|(a, b)| a * b).sum()
    }
}

/// Monte-Carlo lower estimate of the empirical Rademacher complexity of the
/// norm-bounded attention class over the given sample.
///
/// Random search over `trials` parameter draws projected onto the norm-ball
/// surfaces approximates the supremum from below; the result averages over
/// `sign_draws` Rademacher sign vectors. Because the class is symmetric in
/// `w`, the per-draw maximum uses the absolute correlation.
pub fn empirical_rademacher_lower(
    sample: &[Vec<Vec<f64>>],
    budget: &NormBudget,
    d_v: usize,
    trials: usize,
    sign_draws: usize,
    seed: u64,
) -> Result<f64> {
    budget.validate()?;
    if sample.is_empty() {
        return Err(CoreError::EmptyInput("empirical estimate needs samples".into()));
    }
    if trials == 0 || sign_draws == 0 {
        return Err(CoreError::Precondition("trials and sign_draws must be >= 1".into()));
    }
    let d = sample[0][0].len();
    for (i, x) in sample.iter().enumerate() {
        for tok in x {
            let norm: f64 = tok.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > budget.r + 1e-9 {
                return Err(CoreError::Precondition(format!(
                    "sample {i} violates the token norm bound: {norm} > {}",
                    budget.r
                )));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = sample.len();
    // Precompute g_trial(x_i) for every trial.
    let mut evals: Vec<Vec<f64>> = Vec::with_capacity(trials);
    for _ in 0..trials {
        let f = SampledFunction::draw(&mut rng, budget, d, d_v);
        evals.push(sample.iter().map(|x| f.eval(x)).collect());
    }

    let mut total = 0.0;
    for _ in 0..sign_draws {
        let signs: Vec<f64> = (0..m)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let mut best = 0.0f64;
        for row in &evals {
            let corr: f64 = row.iter().zip(&signs).map(|(g, e)| g * e).sum::<f64>() / m as f64;
            best = best.max(corr.abs());
        }
        total += best;
    }
    Ok(total / sign_draws as f64)
}

/// Plug-in constants for the multi-head generalization bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T2Constants {
    pub num_heads: usize,
    pub num_classes: usize,
    pub n: usize,
    /// Per-head mutual information estimates, each >= 0.
    pub mutual_information: Vec<f64>,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
}

/// `K1 / (n^{1/2} H^{-1/2}) + K2 / (n^{3/4} H^{-1/4})
///  + K3 * sqrt((K4 - sum_h I_h) / (n H))`.
pub fn t2_bound(constants: &T2Constants) -> Result<f64> {
    if constants.num_heads == 0 || constants.num_classes == 0 || constants.n == 0 {
        return Err(CoreError::Precondition(
            "H, C and n must be positive".into(),
        ));
    }
    if constants.mutual_information.iter().any(|i| *i < 0.0) {
        return Err(CoreError::Precondition(
            "mutual information estimates must be >= 0".into(),
        ));
    }
    let h = constants.num_heads as f64;
    let n = constants.n as f64;
    let info_sum: f64 = constants.mutual_information.iter().sum();
    let radicand = (constants.k4 - info_sum) / (n * h);
    if radicand < 0.0 {
        return Err(CoreError::Precondition(format!(
            "radicand is negative: K4 ({}) must be >= the summed mutual information ({info_sum})",
            constants.k4
        )));
    }
    let term1 = constants.k1 / (n.sqrt() * h.powf(-0.5));
    let term2 = constants.k2 / (n.powf(0.75) * h.powf(-0.25));
    let term3 = constants.k3 * radicand.sqrt();
    Ok(term1 + term2 + term3)
}

/// Plug-in mutual information (natural log) from empirical joint counts over
/// `(quantized feature, label)` pairs.
pub fn discrete_mutual_information(
    samples: &[(usize, usize)],
    num_feature_bins: usize,
    num_labels: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(CoreError::EmptyInput("mutual information of no samples".into()));
    }
    let mut joint = vec![vec![0usize; num_labels]; num_feature_bins];
    for &(f, y) in samples {
        if f >= num_feature_bins || y >= num_labels {
            return Err(CoreError::Precondition(format!(
                "sample ({f}, {y}) outside the {num_feature_bins} x {num_labels} table"
            )));
        }
        joint[f][y] += 1;
    }
    let n = samples.len() as f64;
    let p_f: Vec<f64> = joint
        .iter()
        .map(|row| row.iter().sum::<usize>() as f64 / n)
        .collect();
    let mut p_y = vec![0.0; num_labels];
    for row in &joint {
        for (py, c) in p_y.iter_mut().zip(row) {
            *py += *c as f64 / n;
        }
    }
    let mut info = 0.0;
    for (f, row) in joint.iter().enumerate() {
        for (y, &c) in row.iter().enumerate() {
            if c > 0 {
                let p_fy = c as f64 / n;
                info += p_fy * (p_fy / (p_f[f] * p_y[y])).ln();
            }
        }
    }
    Ok(info.max(0.0))
}

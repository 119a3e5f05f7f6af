//! Paired A/B comparison of two AFIP configurations over seeded model builds,
//! with an exact binomial sign test on the per-seed hallucination deltas.

use super::{build_toy_model, chair_scores, run_episode, PathologyConfig, SyntheticScene};
use crate::afip::AfipConfig;
use crate::attn_core::ModelConfig;
use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbSeedResult {
    pub seed: u64,
    pub ci_off: f64,
    pub ci_on: f64,
    pub cs_off: f64,
    pub cs_on: f64,
}

impl AbSeedResult {
    pub fn delta_ci(&self) -> f64 {
        self.ci_on - self.ci_off
    }

    pub fn delta_cs(&self) -> f64 {
        self.cs_on - self.cs_off
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbSummary {
    pub per_seed: Vec<AbSeedResult>,
    pub mean_ci_off: f64,
    pub mean_ci_on: f64,
    pub mean_cs_off: f64,
    pub mean_cs_on: f64,
    pub mean_delta_ci: f64,
    pub mean_delta_cs: f64,
    /// One-sided exact binomial sign-test p-value for "the on-arm reduces
    /// the object hallucination rate".
    pub sign_test_p: f64,
}

impl AbSummary {
    /// Per-seed paired results as CSV.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("seed,ci_off,ci_on,delta_ci,cs_off,cs_on,delta_cs\n");
        for r in &self.per_seed {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.seed,
                r.ci_off,
                r.ci_on,
                r.delta_ci(),
                r.cs_off,
                r.cs_on,
                r.delta_cs()
            ));
        }
        out
    }
}

/// One-sided exact binomial sign test: probability of at least `improvements`
/// successes among `nonzero` fair coin flips. Ties are discarded before the
/// call; `nonzero == 0` yields p = 1.
pub fn sign_test_p(improvements: usize, nonzero: usize) -> f64 {
    if nonzero == 0 {
        return 1.0;
    }
    // Sum C(n, i) / 2^n for i = improvements..=n, iterating the coefficient.
    let n = nonzero;
    let log_half_n = -(n as f64) * std::f64::consts::LN_2;
    let mut p = 0.0;
    // ln C(n, i) built incrementally from i = 0.
    let mut ln_c = 0.0f64;
    for i in 0..=n {
        if i >= improvements {
            p += (ln_c + log_half_n).exp();
        }
        if i < n {
            ln_c += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
        }
    }
    p.min(1.0)
}

/// Run every scene under both configurations for every seed (the seed drives
/// the model build) and summarize the paired per-seed differences.
pub fn ab_compare(
    model_config: &ModelConfig,
    pathology: &PathologyConfig,
    scenes: &[SyntheticScene],
    config_off: &AfipConfig,
    config_on: &AfipConfig,
    seeds: &[u64],
) -> Result<AbSummary> {
    if seeds.len() < 2 {
        return Err(CoreError::Precondition(
            "ab_compare needs at least 2 seeds".into(),
        ));
    }
    if scenes.is_empty() {
        return Err(CoreError::EmptyInput("ab_compare over no scenes".into()));
    }
    let mut seeds_sorted: Vec<u64> = seeds.to_vec();
    seeds_sorted.sort_unstable();

    let mut per_seed = Vec::with_capacity(seeds_sorted.len());
    for &seed in &seeds_sorted {
        let model = build_toy_model(model_config, &pathology.with_seed(seed))?;
        let mut off_results = Vec::with_capacity(scenes.len());
        let mut on_results = Vec::with_capacity(scenes.len());
        for scene in scenes {
            off_results.push(run_episode(&model, scene, config_off)?);
            on_results.push(run_episode(&model, scene, config_on)?);
        }
        let off = chair_scores(&off_results)?;
        let on = chair_scores(&on_results)?;
        per_seed.push(AbSeedResult {
            seed,
            ci_off: off.c_i,
            ci_on: on.c_i,
            cs_off: off.c_s,
            cs_on: on.c_s,
        });
    }

    let n = per_seed.len() as f64;
    let mean = |f: &dyn Fn(&AbSeedResult) -> f64| per_seed.iter().map(|r| f(r)).sum::<f64>() / n;
    let improvements = per_seed.iter().filter(|r| r.delta_ci() < 0.0).count();
    let nonzero = per_seed.iter().filter(|r| r.delta_ci() != 0.0).count();
    Ok(AbSummary {
        mean_ci_off: mean(&|r| r.ci_off),
        mean_ci_on: mean(&|r| r.ci_on),
        mean_cs_off: mean(&|r| r.cs_off),
        mean_cs_on: mean(&|r| r.cs_on),
        mean_delta_ci: mean(&|r| r.delta_ci()),
        mean_delta_cs: mean(&|r| r.delta_cs()),
        sign_test_p: sign_test_p(improvements, nonzero),
        per_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::super::build::toy_model_config;
    use super::super::episode::standard_suite;
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sign_test_values() {
        assert_eq!(sign_test_p(0, 0), 1.0);
        // 5 of 5 improvements: p = 1/32.
        assert_abs_diff_eq!(sign_test_p(5, 5), 1.0 / 32.0, epsilon = 1e-12);
        // At least 0 improvements always happens.
        assert_abs_diff_eq!(sign_test_p(0, 7), 1.0, epsilon = 1e-12);
        // Symmetric midpoint: at least 1 of 2 is 3/4.
        assert_abs_diff_eq!(sign_test_p(1, 2), 0.75, epsilon = 1e-12);
        // Larger n stays normalized.
        assert_abs_diff_eq!(sign_test_p(0, 200), 1.0, epsilon = 1e-9);
        assert!(sign_test_p(120, 200) < 0.05);
    }

    #[test]
    fn identical_configs_give_zero_deltas_and_p_one() {
        let scenes: Vec<_> = standard_suite().into_iter().take(4).collect();
        let path = PathologyConfig {
            sigma_head: 0.8,
            lambda_decay: 0.97,
            seed: 0,
        };
        let cfg = AfipConfig::default();
        let summary = ab_compare(
            &toy_model_config(4),
            &path,
            &scenes,
            &cfg,
            &cfg,
            &[1, 2, 3],
        )
        .unwrap();
        assert_eq!(summary.mean_delta_ci, 0.0);
        assert_eq!(summary.sign_test_p, 1.0);
    }

    #[test]
    fn clean_model_has_zero_both_arms() {
        let scenes: Vec<_> = standard_suite().into_iter().take(4).collect();
        let summary = ab_compare(
            &toy_model_config(4),
            &PathologyConfig::default(),
            &scenes,
            &AfipConfig::disabled(),
            &AfipConfig::default(),
            &[1, 2],
        )
        .unwrap();
        assert_eq!(summary.mean_ci_off, 0.0);
        assert_eq!(summary.mean_ci_on, 0.0);
        assert_eq!(summary.mean_delta_ci, 0.0);
    }
}

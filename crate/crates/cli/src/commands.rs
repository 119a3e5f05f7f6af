use crate::config::RunConfig;
use crate::trace::{episode_records, read_jsonl, write_jsonl, TraceRecord};
use afip_core::afip::AfipConfig;
use afip_core::attn_core::Model;
use afip_core::diagnostics::{quantile_group_stats, rank_trend, var_profile, TokenLabel};
use afip_core::harness::{
    build_toy_model, chair_scores, run_episode, scene_suite, EpisodeResult, SceneSuite,
    SyntheticScene, STANDARD_SUITE_SEED,
};
use afip_core::theory::{
    rademacher_bound, softmax_lipschitz_check, NormBudget,
};
use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use std::fmt::Write as _;
use std::path::Path;

/// Errors that should exit with the usage/config code rather than the
/// internal one.
#[derive(Debug)]
pub struct UsageError(pub anyhow::Error);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for UsageError {}

pub fn usage_err(e: anyhow::Error) -> anyhow::Error {
    anyhow::Error::new(UsageError(e))
}

fn load_scenes(config: &RunConfig) -> Result<Vec<SyntheticScene>> {
    match &config.scene_suite {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read scene suite {}", path.display()))?;
            Ok(SceneSuite::from_json_str(&text)?.scenes)
        }
        None => Ok(scene_suite(STANDARD_SUITE_SEED, config.num_scenes)),
    }
}

fn model_for_seed(config: &RunConfig, seed: u64) -> Result<Model> {
    match &config.model_path {
        Some(path) => Ok(Model::from_json_file(path)?),
        None => Ok(build_toy_model(
            &config.model,
            &config.pathology.with_seed(seed),
        )?),
    }
}

fn run_all_episodes(config: &RunConfig, afip: &AfipConfig) -> Result<Vec<EpisodeResult>> {
    let scenes = load_scenes(config)?;
    let mut results = Vec::with_capacity(scenes.len() * config.seeds.len());
    for &seed in &config.seeds {
        let model = model_for_seed(config, seed)?;
        for scene in &scenes {
            results.push(run_episode(&model, scene, afip)?);
        }
    }
    Ok(results)
}

/// `decode`: run every (seed, scene) episode, write the trace JSONL and
/// print the mention summary.
pub fn cmd_decode(config: &RunConfig) -> Result<()> {
    let results = run_all_episodes(config, &config.afip)?;
    let mut records = Vec::new();
    for (i, result) in results.iter().enumerate() {
        records.extend(episode_records(i, result));
        println!(
            "episode {i}: mentions {:?} hallucinated {:?}",
            result.mentions, result.hallucinated
        );
    }
    std::fs::create_dir_all(&config.out_dir)?;
    let trace_path = config.out_dir.join("trace.jsonl");
    std::fs::write(&trace_path, write_jsonl(&records)?)?;
    let scores = chair_scores(&results)?;
    log::info!("trace written to {}", trace_path.display());
    println!(
        "episodes={} mentioned={} hallucinated={} C_I={} C_S={}",
        scores.captions, scores.mentioned, scores.hallucinated, scores.c_i, scores.c_s
    );
    Ok(())
}

fn parse_grid(name: &str, raw: &str) -> Result<Vec<f64>> {
    let mut values = Vec::new();
    for part in raw.split(',') {
        let v: f64 = part
            .trim()
            .parse()
            .map_err(|_| usage_err(anyhow::anyhow!("--{name}: cannot parse '{part}'")))?;
        values.push(v);
    }
    if values.is_empty() {
        return Err(usage_err(anyhow::anyhow!("--{name}: empty grid")));
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(values)
}

/// `sweep`: evaluate the k x tau x alpha x gamma grid, one CSV row per cell
/// in lexicographic parameter order.
pub fn cmd_sweep(
    config: &RunConfig,
    k_grid: &str,
    tau_grid: &str,
    alpha_grid: &str,
    gamma_grid: &str,
) -> Result<()> {
    let ks = parse_grid("k-grid", k_grid)?;
    let taus = parse_grid("tau-grid", tau_grid)?;
    let alphas = parse_grid("alpha-grid", alpha_grid)?;
    let gammas = parse_grid("gamma-grid", gamma_grid)?;

    std::fs::create_dir_all(&config.out_dir)?;
    let path = config.out_dir.join("sweep.csv");
    let mut writer = csv::Writer::from_path(&path)?;
    writer.write_record(["k", "tau", "alpha", "gamma", "c_s", "c_i", "mean_var_trend"])?;

    for &k in &ks {
        if k < 1.0 || k.fract() != 0.0 {
            return Err(usage_err(anyhow::anyhow!(
                "--k-grid: k must be a positive integer, got {k}"
            )));
        }
        for &tau in &taus {
            for &alpha in &alphas {
                for &gamma in &gammas {
                    let afip = AfipConfig {
                        enabled: true,
                        k: k as usize,
                        tau,
                        alpha,
                        gamma,
                        ..config.afip
                    };
                    let results = run_all_episodes(config, &afip)?;
                    let scores = chair_scores(&results)?;
                    let mut trend_sum = 0.0;
                    let mut trend_n = 0usize;
                    for r in &results {
                        if r.trace.steps.len() >= 3 {
                            trend_sum += rank_trend(&var_profile(&r.trace)?)?;
                            trend_n += 1;
                        }
                    }
                    let trend = if trend_n > 0 {
                        trend_sum / trend_n as f64
                    } else {
                        0.0
                    };
                    writer.write_record([
                        format!("{k}"),
                        format!("{tau}"),
                        format!("{alpha}"),
                        format!("{gamma}"),
                        format!("{}", scores.c_s),
                        format!("{}", scores.c_i),
                        format!("{trend}"),
                    ])?;
                    log::info!(
                        "cell k={k} tau={tau} alpha={alpha} gamma={gamma}: C_I={}",
                        scores.c_i
                    );
                }
            }
        }
    }
    writer.flush()?;
    println!("sweep written to {}", path.display());
    Ok(())
}

/// `theory`: evaluate the complexity bound for a head profile and optionally
/// property-check the softmax Lipschitz inequality.
#[allow(clippy::too_many_arguments)]
pub fn cmd_theory(
    a_list: &str,
    b_w: f64,
    b_wc: f64,
    b_o: f64,
    l_sigma: f64,
    r: f64,
    n: usize,
    csv_path: Option<&Path>,
    check_lemma1: bool,
    trials: usize,
    seed: u64,
) -> Result<()> {
    let a = parse_grid("a", a_list)?;
    let budget = NormBudget {
        b_w,
        b_wc,
        b_o,
        l_sigma,
        r,
        a: a.clone(),
        n,
    };
    let report = rademacher_bound(&budget).map_err(|e| usage_err(e.into()))?;
    let mut out = String::new();
    writeln!(out, "heads            {}", a.len())?;
    writeln!(out, "mean a           {}", report.abar)?;
    writeln!(out, "H * abar^2       {}", report.h_abar_sq)?;
    writeln!(out, "dispersion       {}", report.dispersion)?;
    writeln!(out, "uniform bound    {}", report.uniform_bound)?;
    writeln!(out, "bound            {}", report.bound)?;
    print!("{out}");

    if let Some(path) = csv_path {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["a_h", "bound", "dispersion"])?;
        for a_h in &a {
            writer.write_record([
                format!("{a_h}"),
                format!("{}", report.bound),
                format!("{}", report.dispersion),
            ])?;
        }
        writer.flush()?;
    }

    if check_lemma1 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for trial in 0..trials {
            let dim = rng.random_range(2..=16);
            let t1: Vec<f64> = (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect();
            let t2: Vec<f64> = (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect();
            let check = softmax_lipschitz_check(&t1, &t2)?;
            if !check.holds {
                bail!(
                    "softmax Lipschitz inequality violated on trial {trial}: lhs {} > rhs {}",
                    check.lhs,
                    check.rhs
                );
            }
        }
        println!("lemma1 holds on {trials} random pairs");
    }
    Ok(())
}

fn profile_points(records: &[TraceRecord]) -> Vec<(f64, f64)> {
    // Group by episode, normalize positions within each episode.
    let mut out = Vec::new();
    let mut i = 0usize;
    while i < records.len() {
        let episode = records[i].episode;
        let mut j = i;
        while j < records.len() && records[j].episode == episode {
            j += 1;
        }
        let len = j - i;
        let denom = if len > 1 { (len - 1) as f64 } else { 1.0 };
        for (idx, r) in records[i..j].iter().enumerate() {
            out.push((idx as f64 / denom, r.var_mean()));
        }
        i = j;
    }
    out
}

/// `metrics`: CSV exports from a trace file.
pub fn cmd_metrics(trace_path: &Path, out_dir: &Path, groups: usize) -> Result<()> {
    let text = std::fs::read_to_string(trace_path)
        .with_context(|| format!("cannot read trace {}", trace_path.display()))
        .map_err(usage_err)?;
    let records = read_jsonl(&text).map_err(usage_err)?;
    std::fs::create_dir_all(out_dir)?;

    // var_profile.csv: (position, var) per token, episodes concatenated.
    let mut profile = csv::Writer::from_path(out_dir.join("var_profile.csv"))?;
    profile.write_record(["position", "var"])?;
    for (pos, var) in profile_points(&records) {
        profile.write_record([format!("{pos}"), format!("{var}")])?;
    }
    profile.flush()?;

    // quantile_table.csv: per-group per-label predictive entropy and the
    // hallucination rate of the group.
    let mut table = csv::Writer::from_path(out_dir.join("quantile_table.csv"))?;
    table.write_record(["group", "label", "mean_entropy", "halluc_rate"])?;
    if !records.is_empty() {
        let tokens: Vec<(f64, f64, TokenLabel)> = records
            .iter()
            .map(|r| (r.d_kl_mean(), r.token_entropy, r.label))
            .collect();
        for stats in quantile_group_stats(&tokens, groups)? {
            for (label, mean) in [
                ("real", stats.mean_entropy_real),
                ("hallucinated", stats.mean_entropy_hallucinated),
                ("other", stats.mean_entropy_other),
            ] {
                if let Some(mean) = mean {
                    table.write_record([
                        format!("{}", stats.group),
                        label.to_string(),
                        format!("{mean}"),
                        format!("{}", stats.halluc_rate),
                    ])?;
                }
            }
        }
    }
    table.flush()?;

    // per_token.csv: flat per-token diagnostics.
    let mut per_token = csv::Writer::from_path(out_dir.join("per_token.csv"))?;
    per_token.write_record([
        "episode",
        "step",
        "token_id",
        "label",
        "token_entropy",
        "d_kl",
        "var",
        "attention_entropy",
        "gate_open_fraction",
    ])?;
    for r in &records {
        per_token.write_record([
            format!("{}", r.episode),
            format!("{}", r.step),
            format!("{}", r.token_id),
            r.label.as_str().to_string(),
            format!("{}", r.token_entropy),
            format!("{}", r.d_kl_mean()),
            format!("{}", r.var_mean()),
            format!("{}", r.entropy_mean()),
            format!("{}", r.gate_open_fraction),
        ])?;
    }
    per_token.flush()?;
    println!(
        "metrics written to {} (var_profile.csv, quantile_table.csv, per_token.csv)",
        out_dir.display()
    );
    Ok(())
}

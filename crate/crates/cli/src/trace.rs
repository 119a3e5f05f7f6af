//! Trace file schema: one JSONL record per generated token.

use afip_core::diagnostics::TokenLabel;
use afip_core::harness::EpisodeResult;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

/// Per-layer diagnostics carried by a trace record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerValues {
    /// Attention entropy of the head-averaged image slice, per layer.
    pub entropy: Vec<f64>,
    /// Head-averaged visual attention ratio, per layer.
    pub var: Vec<f64>,
    /// Cross-head divergence, per layer.
    pub d_kl: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub schema: u32,
    pub episode: usize,
    /// 1-based decoding step within the episode.
    pub step: usize,
    pub token_id: u32,
    pub label: TokenLabel,
    pub layers: LayerValues,
    /// Fraction of recorded gate decisions that were open at this step.
    pub gate_open_fraction: f64,
    pub token_entropy: f64,
}

impl TraceRecord {
    pub fn d_kl_mean(&self) -> f64 {
        self.layers.d_kl.iter().sum::<f64>() / self.layers.d_kl.len() as f64
    }

    pub fn var_mean(&self) -> f64 {
        self.layers.var.iter().sum::<f64>() / self.layers.var.len() as f64
    }

    pub fn entropy_mean(&self) -> f64 {
        self.layers.entropy.iter().sum::<f64>() / self.layers.entropy.len() as f64
    }
}

/// Flatten one episode into trace records.
pub fn episode_records(episode_index: usize, result: &EpisodeResult) -> Vec<TraceRecord> {
    result
        .trace
        .steps
        .iter()
        .zip(&result.labels)
        .enumerate()
        .map(|(i, (step, label))| {
            let per_layer = &step.snapshot.per_layer;
            let open = step.gates.iter().filter(|g| g.open).count();
            TraceRecord {
                schema: 1,
                episode: episode_index,
                step: i + 1,
                token_id: step.token_id,
                label: *label,
                layers: LayerValues {
                    entropy: per_layer.iter().map(|l| l.attention_entropy).collect(),
                    var: per_layer
                        .iter()
                        .map(|l| {
                            l.var_per_head.iter().sum::<f64>() / l.var_per_head.len() as f64
                        })
                        .collect(),
                    d_kl: per_layer.iter().map(|l| l.cross_head_kl).collect(),
                },
                gate_open_fraction: if step.gates.is_empty() {
                    0.0
                } else {
                    open as f64 / step.gates.len() as f64
                },
                token_entropy: step.snapshot.token_entropy,
            }
        })
        .collect()
}

pub fn write_jsonl(records: &[TraceRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_jsonl(text: &str) -> Result<Vec<TraceRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord = serde_json::from_str(line)
            .with_context(|| format!("malformed trace record on line {}", i + 1))?;
        if record.schema != 1 {
            bail!(
                "trace record on line {} has unsupported schema version {}",
                i + 1,
                record.schema
            );
        }
        records.push(record);
    }
    Ok(records)
}

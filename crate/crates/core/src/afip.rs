//! AFIP score modulation: per-step, per-layer adjustment of pre-softmax
//! image-token scores from top-k head statistics (delta1), fusion of
//! historical image attention (delta2), and a peak-gap gate deciding per
//! (layer, head) whether to touch the row at all.

use crate::attn_core::{AttentionHook, AttentionScoreRow, GateDecision, LayerModulation, TokenLayout};
use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// How the head-statistics mean and variance are normalized.
///
/// The correction sums over the selected top-k heads; `PaperLiteralH`
/// divides by the full head count H, `SelectedK` by the number of selected
/// heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorMode {
    PaperLiteralH,
    SelectedK,
}

/// AFIP hyperparameters.
///
/// `tau` compares raw pre-softmax scores and is therefore scale-dependent:
/// it must be chosen relative to the model's typical score magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AfipConfig {
    pub enabled: bool,
    /// Number of top heads feeding the statistics (capped at H).
    pub k: usize,
    /// Variance penalty weight in delta1.
    pub alpha: f64,
    /// History fusion weight in delta2.
    pub gamma: f64,
    /// Gate threshold on peak_textual - peak_visual (strict).
    pub tau: f64,
    /// History window capacity W.
    pub window: usize,
    /// First modulated layer l_e; `None` derives `floor(L * 5 / 32)`.
    pub first_modulated_layer: Option<usize>,
    pub denominator_mode: DenominatorMode,
}

impl Default for AfipConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            k: 6,
            alpha: 0.5,
            gamma: 0.5,
            tau: 0.5,
            window: 8,
            first_modulated_layer: None,
            denominator_mode: DenominatorMode::PaperLiteralH,
        }
    }
}

impl AfipConfig {
    /// Disabled configuration; decodes must equal the baseline exactly.
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn effective_first_layer(&self, num_layers: usize) -> usize {
        self.first_modulated_layer
            .unwrap_or(num_layers * 5 / 32)
    }

    pub fn validate(&self, num_heads: usize, num_layers: usize) -> Result<()> {
        if self.k == 0 {
            return Err(CoreError::InvalidConfig("k must be >= 1".into()));
        }
        let _ = num_heads;
        if self.window == 0 {
            return Err(CoreError::InvalidConfig("window must be >= 1".into()));
        }
        if self.alpha < 0.0 || self.gamma < 0.0 {
            return Err(CoreError::InvalidConfig(
                "alpha and gamma must be >= 0".into(),
            ));
        }
        if self.effective_first_layer(num_layers) >= num_layers {
            return Err(CoreError::InvalidConfig(format!(
                "first_modulated_layer {} out of range for {} layers",
                self.effective_first_layer(num_layers),
                num_layers
            )));
        }
        Ok(())
    }
}

/// Image-token score slices of one completed step, indexed `[layer][head]`.
pub type StepImageScores = Vec<Vec<Vec<f64>>>;

/// Ring buffer of the last W per-(layer, head) image-token score vectors,
/// most recent last.
#[derive(Debug, Clone, Default)]
pub struct HistoryWindow {
    capacity: usize,
    entries: VecDeque<StepImageScores>,
}

impl HistoryWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Append a step snapshot, evicting the oldest entry when full.
    pub fn push(&mut self, snapshot: StepImageScores) {
        self.entries.push_back(snapshot);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    /// Entry `offset` steps back from the most recent one.
    pub fn entry_back(&self, offset: usize) -> Option<&StepImageScores> {
        if offset >= self.entries.len() {
            return None;
        }
        self.entries.get(self.entries.len() - 1 - offset)
    }

    /// Oldest-to-newest iteration, for inspection in tests.
    pub fn iter(&self) -> impl Iterator<Item = &StepImageScores> {
        self.entries.iter()
    }
}

/// Rank heads by their maximum absolute image-token score (descending, ties
/// to the lower head index) and return the top `min(k, H)` indices.
pub fn select_top_k_heads(
    rows: &[AttentionScoreRow],
    layout: &TokenLayout,
    k: usize,
) -> Result<Vec<usize>> {
    if layout.n == 0 {
        return Err(CoreError::EmptyInput("no image tokens to rank heads on".into()));
    }
    if rows.is_empty() {
        return Err(CoreError::EmptyInput("no score rows".into()));
    }
    let range = layout.image_range();
    let mut ranked: Vec<(usize, f64)> = rows
        .iter()
        .enumerate()
        .map(|(h, row)| {
            let peak = row.values[range.clone()]
                .iter()
                .map(|v| v.abs())
                .fold(f64::NEG_INFINITY, f64::max);
            (h, peak)
        })
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let take = k.min(rows.len());
    let mut selected: Vec<usize> = ranked[..take].iter().map(|(h, _)| *h).collect();
    selected.sort_unstable();
    Ok(selected)
}

/// Mean and variance of |score| at one image column over the selected heads.
pub fn head_stats(
    rows: &[AttentionScoreRow],
    selected: &[usize],
    image_column: usize,
    mode: DenominatorMode,
) -> Result<(f64, f64)> {
    if selected.is_empty() {
        return Err(CoreError::EmptyInput("no selected heads".into()));
    }
    let denom = match mode {
        DenominatorMode::PaperLiteralH => rows.len() as f64,
        DenominatorMode::SelectedK => selected.len() as f64,
    };
    let mut sum = 0.0;
    for &h in selected {
        sum += rows[h].values[image_column].abs();
    }
    let avg = sum / denom;
    let mut var = 0.0;
    for &h in selected {
        var += (rows[h].values[image_column].abs() - avg).powi(2);
    }
    Ok((avg, var / denom))
}

/// The cross-head enrichment increment: `avg - alpha * var`.
pub fn delta1(avg: f64, var: f64, alpha: f64) -> f64 {
    avg - alpha * var
}

/// Offset (0 = most recent) of the stored step whose generated token the
/// current row attends most. `None` when nothing is stored.
///
/// Offset `j` addresses the score to sequence position `a_t - 1 - j`; ties
/// resolve to the smallest offset.
pub fn most_relevant_history_offset(
    row: &AttentionScoreRow,
    layout: &TokenLayout,
    stored_entries: usize,
) -> Option<usize> {
    let available = stored_entries.min(layout.num_generated());
    if available == 0 {
        return None;
    }
    let last = layout.seq_len() - 1;
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for j in 0..available {
        let score = row.values[last - j];
        if score > best_score {
            best_score = score;
            best = j;
        }
    }
    Some(best)
}

/// History fusion increment: `gamma` times the stored image score at history
/// offset `r`, image slot `j`. Degenerate addressing yields 0.
pub fn delta2(
    window: &HistoryWindow,
    r: Option<usize>,
    gamma: f64,
    layer: usize,
    head: usize,
    image_slot: usize,
) -> f64 {
    let Some(r) = r else { return 0.0 };
    let Some(entry) = window.entry_back(r) else {
        return 0.0;
    };
    match entry
        .get(layer)
        .and_then(|l| l.get(head))
        .and_then(|h| h.get(image_slot))
    {
        Some(v) => gamma * v,
        None => 0.0,
    }
}

/// Peak-gap gate for one row: open iff `peak_textual - peak_visual < tau`
/// (strict). Rows without textual positions record `peak_textual = -inf` and
/// open the gate.
pub fn gate(row: &AttentionScoreRow, layout: &TokenLayout, tau: f64) -> Result<GateDecision> {
    if layout.n == 0 {
        return Err(CoreError::EmptyInput("gate needs an image region".into()));
    }
    let values = &row.values;
    let peak_visual = values[layout.image_range()]
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut peak_textual = f64::NEG_INFINITY;
    for (i, v) in values.iter().enumerate() {
        if i < layout.s || i >= layout.e() {
            peak_textual = peak_textual.max(*v);
        }
    }
    let gap = peak_textual - peak_visual;
    Ok(GateDecision {
        layer: row.layer,
        head: row.head,
        step: row.step,
        peak_visual,
        peak_textual,
        gap,
        open: gap < tau,
    })
}

/// Apply the full modulation to one layer's rows.
///
/// For every head with an open gate, each image column `s + j` receives
/// `delta1[j] + delta2[j]`; non-image columns and gate-closed rows are left
/// bit-identical to the input.
pub fn modulate_rows(
    rows: &[AttentionScoreRow],
    layout: &TokenLayout,
    config: &AfipConfig,
    window: &HistoryWindow,
) -> Result<(Vec<Vec<f64>>, Vec<GateDecision>)> {
    let selected = select_top_k_heads(rows, layout, config.k)?;
    let mut d1 = Vec::with_capacity(layout.n);
    for j in 0..layout.n {
        let (avg, var) = head_stats(rows, &selected, layout.s + j, config.denominator_mode)?;
        d1.push(delta1(avg, var, config.alpha));
    }

    let mut out_rows = Vec::with_capacity(rows.len());
    let mut gates = Vec::with_capacity(rows.len());
    for row in rows {
        let decision = gate(row, layout, config.tau)?;
        let mut values = row.values.clone();
        if decision.open {
            let r = most_relevant_history_offset(row, layout, window.len());
            for (j, d1_j) in d1.iter().enumerate() {
                values[layout.s + j] +=
                    d1_j + delta2(window, r, config.gamma, row.layer, row.head, j);
            }
        }
        gates.push(decision);
        out_rows.push(values);
    }
    Ok((out_rows, gates))
}

/// Decoder hook running AFIP during greedy decoding.
///
/// Owns the history window for one decode session; raw (pre-modulation)
/// image-token scores of every completed step are pushed after the step.
pub struct AfipHook {
    config: AfipConfig,
    first_layer: usize,
    window: HistoryWindow,
}

impl AfipHook {
    pub fn new(config: AfipConfig, num_layers: usize) -> Self {
        let first_layer = config.effective_first_layer(num_layers);
        Self {
            config,
            first_layer,
            window: HistoryWindow::new(config.window),
        }
    }

    pub fn window(&self) -> &HistoryWindow {
        &self.window
    }

    pub fn config(&self) -> &AfipConfig {
        &self.config
    }
}

impl AttentionHook for AfipHook {
    fn modulate_layer(
        &mut self,
        layer: usize,
        rows: &[AttentionScoreRow],
        layout: &TokenLayout,
    ) -> Result<Option<LayerModulation>> {
        if !self.config.enabled || layer < self.first_layer {
            return Ok(None);
        }
        let (rows, gates) = modulate_rows(rows, layout, &self.config, &self.window)?;
        Ok(Some(LayerModulation { rows, gates }))
    }

    fn observe_step(&mut self, raw_rows: &[Vec<AttentionScoreRow>], layout: &TokenLayout) {
        if !self.config.enabled {
            return;
        }
        let range = layout.image_range();
        let snapshot: StepImageScores = raw_rows
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|row| row.values[range.clone()].to_vec())
                    .collect()
            })
            .collect();
        self.window.push(snapshot);
    }
}

//! Synthetic grounding testbed: hand-constructed toy decoders with dialable
//! attention pathologies, an episode runner, and caption/probe scoring that
//! measures an object-hallucination analog at desk scale.
//!
//! The toy model family describes scenes drawn from a closed object
//! vocabulary. A clean build (no pathology) emits exactly the objects present
//! in the scene and then EOS; the two pathology knobs reintroduce the failure
//! modes under study: per-head query rotations make heads disagree about
//! where to look, and a per-step attenuation of the visual query gain makes
//! image attention fade as generation proceeds.

mod ab;
mod build;
mod episode;
mod metrics;

pub use ab::{ab_compare, sign_test_p, AbSeedResult, AbSummary};
pub use build::{
    build_toy_model, build_toy_model_geom, object_embedding, scene_embeddings, toy_model_config,
};
pub use episode::{
    run_episode, scene_suite, standard_suite, EpisodeResult, SceneSuite, STANDARD_SUITE_SEED,
};
pub use metrics::{
    chair_scores, pope_eval, pope_eval_with_answerer, ChairScores, PopeScores, PopeStrategy,
};

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

/// Number of objects in the closed vocabulary.
pub const V_OBJ: usize = 16;
/// Number of visual-prefix slots.
pub const N_SLOTS: usize = 16;
/// Token ids: EOS is 0 (reserved), then the answer tokens and prompt markers.
pub const TOKEN_YES: u32 = 1;
pub const TOKEN_NO: u32 = 2;
pub const TOKEN_CAPTION_PROMPT: u32 = 3;
pub const TOKEN_QUERY_PROMPT: u32 = 4;
/// First caption-object token id; object `o` is `OBJECT_TOKEN_BASE + o`.
pub const OBJECT_TOKEN_BASE: u32 = 5;
/// First query-object token id (used only inside presence questions).
pub const QUERY_TOKEN_BASE: u32 = OBJECT_TOKEN_BASE + V_OBJ as u32;
/// Full vocabulary size of the toy family.
pub const TOY_VOCAB: usize = QUERY_TOKEN_BASE as usize + V_OBJ;

/// Default cap on generated tokens per episode.
pub const MAX_NEW_TOKENS: usize = 16;

pub fn object_token(object: usize) -> u32 {
    OBJECT_TOKEN_BASE + object as u32
}

pub fn query_token(object: usize) -> u32 {
    QUERY_TOKEN_BASE + object as u32
}

pub fn token_to_object(token: u32) -> Option<usize> {
    if (OBJECT_TOKEN_BASE..QUERY_TOKEN_BASE).contains(&token) {
        Some((token - OBJECT_TOKEN_BASE) as usize)
    } else {
        None
    }
}

/// Pathology knobs of the toy model family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathologyConfig {
    /// Scale of the per-head query rotations (radians before clamping).
    pub sigma_head: f64,
    /// Multiplicative per-step attenuation of the visual query gain; the
    /// image scores at step t carry a factor `lambda_decay^t`.
    pub lambda_decay: f64,
    pub seed: u64,
}

impl Default for PathologyConfig {
    fn default() -> Self {
        Self {
            sigma_head: 0.0,
            lambda_decay: 1.0,
            seed: 0,
        }
    }
}

impl PathologyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_head < 0.0 || !self.sigma_head.is_finite() {
            return Err(CoreError::InvalidConfig("sigma_head must be >= 0".into()));
        }
        if !(self.lambda_decay > 0.0 && self.lambda_decay <= 1.0) {
            return Err(CoreError::InvalidConfig(
                "lambda_decay must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// A scene: objects present at distinct visual slots, plus a pool of absent
/// distractor objects that leave faint imprints in otherwise empty slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticScene {
    /// Present object ids.
    pub present: Vec<usize>,
    /// Slot of each present object, parallel to `present`.
    pub slots: Vec<usize>,
    /// Absent objects acting as visual clutter.
    pub distractors: Vec<usize>,
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        if self.present.len() != self.slots.len() {
            return Err(CoreError::InvalidConfig(
                "present and slots must be parallel".into(),
            ));
        }
        let mut seen_slots = std::collections::BTreeSet::new();
        for &slot in &self.slots {
            if slot >= N_SLOTS {
                return Err(CoreError::InvalidConfig(format!("slot {slot} out of range")));
            }
            if !seen_slots.insert(slot) {
                return Err(CoreError::InvalidConfig(format!("slot {slot} used twice")));
            }
        }
        for &o in self.present.iter().chain(&self.distractors) {
            if o >= V_OBJ {
                return Err(CoreError::InvalidConfig(format!("object {o} out of range")));
            }
        }
        for &d in &self.distractors {
            if self.present.contains(&d) {
                return Err(CoreError::InvalidConfig(format!(
                    "object {d} is both present and a distractor"
                )));
            }
        }
        Ok(())
    }

    pub fn is_present(&self, object: usize) -> bool {
        self.present.contains(&object)
    }

    pub fn absent_objects(&self) -> Vec<usize> {
        (0..V_OBJ).filter(|o| !self.present.contains(o)).collect()
    }
}

/// Fixed wiring constants of the toy model family. The clean-margin story:
/// present objects score ~`P_TARGET` while every spurious channel (pair
/// similarity, faint imprints, lexical inertia) stays strictly below the EOS
/// threshold, which itself rides the decaying visual gain.
pub(crate) mod consts {
    /// Pairwise similarity of paired object embeddings (sin of twice the
    /// mixing angle).
    pub const RHO: f64 = 0.02;
    /// Content magnitude of caption-object token embeddings.
    pub const B_TEXT: f64 = 0.3;
    /// Content magnitude of query-object token embeddings.
    pub const Q_OBJ: f64 = 6.0;
    /// Content magnitude of a present object's image slot.
    pub const A_PRESENT: f64 = 1.0;
    /// Content magnitude of a distractor imprint in an empty slot.
    pub const A_IMPRINT: f64 = 0.5;
    /// Base image score of the reader layers at full visual gain.
    pub const S_READER: f64 = 3.0;
    /// Content-key gain of the reader layers (head-specific direction).
    pub const K_CONTENT: f64 = 2.5;
    /// Occupancy coupling into the shared base key: occupied slots score
    /// higher than empty ones for every head, so the cross-head mean keeps
    /// an imprint-free copy of the scene layout.
    pub const OCC_KEY: f64 = 1.0;
    /// Target clean logit of one unmentioned present object.
    pub const P_TARGET: f64 = 4.5;
    /// EOS logit at full visual gain (decays with the visual gain).
    pub const THETA_EOS: f64 = 3.3;
    /// Score of generated-token positions in the recall-suppression layer.
    pub const S_GEN: f64 = 8.0;
    /// Reader-layer penalty on generated-token positions at full visual
    /// gain. Keeps reader values off text rows (whose residuals already
    /// carry mixed-in object content) while letting decayed-gain noise
    /// reach them late in generation.
    pub const S_GEN_READER: f64 = 3.0;
    /// Base sink score of the recall-suppression layer.
    pub const S_SINK_L0: f64 = 8.0;
    /// Suppression read scale; the effective inhibition of a mentioned
    /// object is `C_INH * B_TEXT * (attention weight on its token)`.
    pub const C_INH: f64 = 100.0;
    /// Query gain multiplier of the suppressor's const read: keeps recall
    /// suppression alive under the largest clamped query rotations.
    pub const M_SUPPRESS: f64 = 4.0;
    /// Value scale of the secondary reader relative to the primary one.
    /// Keeps a second attention pattern alive for the diagnostics without
    /// re-amplifying residual content at full strength.
    pub const REL_READER2: f64 = 0.05;
    /// Sink-seek query gain of image and query-prompt rows.
    pub const SEEK: f64 = 1200.0;
    /// Sink key magnitude on the shared sink channel.
    pub const SINK_KEY: f64 = 0.1;
    /// Peak probe score of a present queried slot before the image penalty.
    pub const PROBE_GAIN: f64 = 8.0;
    /// Flat image penalty of the probe layer.
    pub const PEN_PROBE: f64 = 6.0;
    /// Probe-layer penalty on generated/query tokens (blocks self-matching
    /// even against the residual content accumulated at the answer row).
    pub const PEN_PROBE_TEXT: f64 = 5000.0;
    /// Yes-evidence carried per unit of probe-layer image attention.
    pub const C_YES: f64 = 0.45;
    /// Constant no-logit.
    pub const C_NO: f64 = 0.25;
    /// Unembedding gain of object logits.
    pub const C_U: f64 = 1.0;
    /// Clamp on per-head rotation angles (radians).
    pub const THETA_CLAMP: f64 = 1.35;
    /// Radians of rotation per unit of sigma_head.
    pub const ROT_SCALE: f64 = 0.5;
    /// Positional table capacity of built toy models.
    pub const MAX_POSITIONS: usize = 64;

    // d_model channel layout (32 dims). The occupancy and pair-key dims are
    // carried by token and scene embeddings only; no layer output ever
    // writes them, so keys built from them stay clean of residual content.
    pub const CONTENT_DIMS: usize = 16;
    pub const IMG_MARK: usize = 16;
    pub const GEN_MARK: usize = 17;
    pub const DECAY_DIM: usize = 18;
    pub const OCC_DIM: usize = 19;
    pub const YES_DIM: usize = 20;
    /// One key dim per object pair.
    pub const PAIR_DIMS: [usize; 8] = [21, 22, 23, 24, 25, 29, 30, 31];
    pub const PQ_MARK: usize = 26;
    pub const CONST_DIM: usize = 27;
    pub const SINK_POS: usize = 28;

    // Head-space layout (8 dims per head).
    pub const HEAD_CONTENT: usize = 4;
    pub const E_BASE: usize = 4;
    pub const E_SINK: usize = 5;
    pub const E_YES: usize = 6;
}

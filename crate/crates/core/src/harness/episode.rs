//! Scene generation, the standard evaluation suite, and the episode runner.

use super::{
    scene_embeddings, token_to_object, SyntheticScene, MAX_NEW_TOKENS, N_SLOTS,
    TOKEN_CAPTION_PROMPT, V_OBJ,
};
use crate::afip::{AfipConfig, AfipHook};
use crate::attn_core::{greedy_decode, AttentionHook, DecodeTrace, Model};
use crate::diagnostics::TokenLabel;
use crate::error::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Seed of the bundled 50-scene suite.
pub const STANDARD_SUITE_SEED: u64 = 0;

/// Serializable scene collection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSuite {
    pub schema: u32,
    pub scenes: Vec<SyntheticScene>,
}

impl SceneSuite {
    pub fn new(scenes: Vec<SyntheticScene>) -> Self {
        Self { schema: 1, scenes }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let suite: SceneSuite = serde_json::from_str(s)?;
        if suite.schema != 1 {
            return Err(crate::error::CoreError::InvalidConfig(format!(
                "unsupported scene suite schema {}",
                suite.schema
            )));
        }
        for scene in &suite.scenes {
            scene.validate()?;
        }
        Ok(suite)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Draw one scene: 4..=8 present objects at distinct slots plus 4..=8 absent
/// distractors.
fn random_scene(rng: &mut ChaCha8Rng) -> SyntheticScene {
    let num_present = rng.random_range(4..=8);
    let mut objects: Vec<usize> = (0..V_OBJ).collect();
    objects.shuffle(rng);
    let present: Vec<usize> = objects[..num_present].to_vec();
    let mut slots: Vec<usize> = (0..N_SLOTS).collect();
    slots.shuffle(rng);
    let slots = slots[..num_present].to_vec();
    let mut absent: Vec<usize> = objects[num_present..].to_vec();
    absent.sort_unstable();
    absent.shuffle(rng);
    let num_distractors = rng.random_range(4..=8).min(absent.len());
    let mut distractors = absent[..num_distractors].to_vec();
    distractors.sort_unstable();
    SyntheticScene {
        present,
        slots,
        distractors,
    }
}

/// Deterministic scene collection for a seed.
pub fn scene_suite(seed: u64, count: usize) -> Vec<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_scene(&mut rng)).collect()
}

/// The bundled 50-scene suite.
pub fn standard_suite() -> Vec<SyntheticScene> {
    scene_suite(STANDARD_SUITE_SEED, 50)
}

/// Outcome of one caption episode.
#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub scene: SyntheticScene,
    /// Emitted tokens, including the terminating EOS when reached.
    pub tokens: Vec<u32>,
    /// Unique mentioned object ids, ascending.
    pub mentions: Vec<usize>,
    /// Mentions absent from the scene, ascending.
    pub hallucinated: Vec<usize>,
    /// One label per generated token.
    pub labels: Vec<TokenLabel>,
    pub trace: DecodeTrace,
}

impl EpisodeResult {
    pub fn ground_truth(&self) -> &[usize] {
        &self.scene.present
    }
}

/// Greedy-decode a caption for the scene, with AFIP hooked in when enabled,
/// and label every emitted token against the scene's ground truth.
pub fn run_episode(
    model: &Model,
    scene: &SyntheticScene,
    afip: &AfipConfig,
) -> Result<EpisodeResult> {
    scene.validate()?;
    let embeddings = scene_embeddings(scene);
    let prompt = [TOKEN_CAPTION_PROMPT];
    let mut hook_storage;
    let hook: Option<&mut dyn AttentionHook> = if afip.enabled {
        afip.validate(model.config.num_heads, model.config.num_layers)?;
        hook_storage = AfipHook::new(*afip, model.config.num_layers);
        Some(&mut hook_storage)
    } else {
        None
    };
    let (tokens, trace) = greedy_decode(model, &embeddings, &prompt, MAX_NEW_TOKENS, hook)?;

    let mut mentions: Vec<usize> = tokens.iter().filter_map(|&t| token_to_object(t)).collect();
    mentions.sort_unstable();
    mentions.dedup();
    let hallucinated: Vec<usize> = mentions
        .iter()
        .copied()
        .filter(|o| !scene.is_present(*o))
        .collect();
    let labels: Vec<TokenLabel> = tokens
        .iter()
        .map(|&t| match token_to_object(t) {
            Some(o) if scene.is_present(o) => TokenLabel::Real,
            Some(_) => TokenLabel::Hallucinated,
            None => TokenLabel::Other,
        })
        .collect();
    Ok(EpisodeResult {
        scene: scene.clone(),
        tokens,
        mentions,
        hallucinated,
        labels,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::super::build::{build_toy_model, toy_model_config};
    use super::super::PathologyConfig;
    use super::*;

    #[test]
    fn suite_is_deterministic_and_valid() {
        let a = standard_suite();
        let b = standard_suite();
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        for scene in &a {
            scene.validate().unwrap();
            assert!((4..=8).contains(&scene.present.len()));
            assert!(!scene.distractors.is_empty());
        }
    }

    #[test]
    fn suite_round_trips_through_json() {
        let suite = SceneSuite::new(scene_suite(7, 5));
        let s = suite.to_json_string().unwrap();
        let back = SceneSuite::from_json_str(&s).unwrap();
        assert_eq!(suite, back);
    }

    #[test]
    fn clean_episode_emits_present_set_then_eos() {
        let model = build_toy_model(&toy_model_config(4), &PathologyConfig::default()).unwrap();
        let scene = &standard_suite()[0];
        let result = run_episode(&model, scene, &AfipConfig::disabled()).unwrap();
        let mut expect = scene.present.clone();
        expect.sort_unstable();
        assert_eq!(result.mentions, expect);
        assert!(result.hallucinated.is_empty());
        assert_eq!(*result.tokens.last().unwrap(), crate::attn_core::EOS_TOKEN);
        // One mention per present object plus the EOS.
        assert_eq!(result.tokens.len(), scene.present.len() + 1);
    }

    #[test]
    fn episodes_are_reproducible() {
        let path = PathologyConfig {
            sigma_head: 0.8,
            lambda_decay: 0.97,
            seed: 3,
        };
        let model = build_toy_model(&toy_model_config(4), &path).unwrap();
        let scene = &standard_suite()[3];
        let a = run_episode(&model, scene, &AfipConfig::default()).unwrap();
        let b = run_episode(&model, scene, &AfipConfig::default()).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.mentions, b.mentions);
        for (x, y) in a.trace.steps.iter().zip(&b.trace.steps) {
            assert_eq!(x.logits, y.logits);
        }
    }
}

//! Caption and probe scoring: object/sentence hallucination rates and the
//! binary presence-probing protocol with its three negative-sampling
//! strategies.

use super::{
    object_embedding, query_token, scene_embeddings, EpisodeResult, SyntheticScene,
    TOKEN_NO, TOKEN_QUERY_PROMPT, TOKEN_YES, V_OBJ,
};
use crate::afip::{AfipConfig, AfipHook};
use crate::attn_core::{greedy_decode, AttentionHook, Model};
use crate::error::{CoreError, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Object-level and sentence-level hallucination rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChairScores {
    /// hallucinated mentions / all mentions (0 when nothing is mentioned).
    pub c_i: f64,
    /// captions containing a hallucination / all captions.
    pub c_s: f64,
    pub mentioned: usize,
    pub hallucinated: usize,
    pub captions: usize,
    pub captions_with_hallucination: usize,
}

/// Aggregate unique-per-episode mentions into the two rates.
pub fn chair_scores(results: &[EpisodeResult]) -> Result<ChairScores> {
    if results.is_empty() {
        return Err(CoreError::EmptyInput("chair_scores over no episodes".into()));
    }
    let mentioned: usize = results.iter().map(|r| r.mentions.len()).sum();
    let hallucinated: usize = results.iter().map(|r| r.hallucinated.len()).sum();
    let captions = results.len();
    let captions_with_hallucination =
        results.iter().filter(|r| !r.hallucinated.is_empty()).count();
    Ok(ChairScores {
        c_i: if mentioned == 0 {
            0.0
        } else {
            hallucinated as f64 / mentioned as f64
        },
        c_s: captions_with_hallucination as f64 / captions as f64,
        mentioned,
        hallucinated,
        captions,
        captions_with_hallucination,
    })
}

/// Negative-sampling strategy for presence probing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopeStrategy {
    /// Uniform over the absent objects.
    Random,
    /// Absent objects most frequently present across the scene set.
    Popular,
    /// Absent objects with the highest embedding similarity to present ones.
    Adversarial,
}

impl std::str::FromStr for PopeStrategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "random" => Ok(Self::Random),
            "popular" => Ok(Self::Popular),
            "adversarial" => Ok(Self::Adversarial),
            other => Err(format!("unknown strategy '{other}'")),
        }
    }
}

/// Binary classification metrics of a probing run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopeScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl PopeScores {
    fn from_confusion(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let total = (tp + fp + tn + fn_) as f64;
        let accuracy = (tp + tn) as f64 / total;
        let precision = if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else {
            0.0
        };
        let recall = if tp + fn_ > 0 {
            tp as f64 / (tp + fn_) as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            accuracy,
            precision,
            recall,
            f1,
            tp,
            fp,
            tn,
            fn_,
        }
    }
}

/// Negatives for one scene under the given strategy, as many as positives.
fn sample_negatives(
    scene: &SyntheticScene,
    all_scenes: &[SyntheticScene],
    strategy: PopeStrategy,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let needed = scene.present.len();
    let absent = scene.absent_objects();
    if absent.len() < needed {
        return Err(CoreError::Precondition(format!(
            "strategy needs {needed} negatives but only {} objects are absent",
            absent.len()
        )));
    }
    let negatives = match strategy {
        PopeStrategy::Random => {
            let mut pool = absent;
            pool.shuffle(rng);
            pool[..needed].to_vec()
        }
        PopeStrategy::Popular => {
            let mut freq = vec![0usize; V_OBJ];
            for s in all_scenes {
                for &o in &s.present {
                    freq[o] += 1;
                }
            }
            let mut pool = absent;
            pool.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
            pool[..needed].to_vec()
        }
        PopeStrategy::Adversarial => {
            let present_embs: Vec<Vec<f64>> =
                scene.present.iter().map(|&o| object_embedding(o)).collect();
            let similarity = |o: usize| -> f64 {
                let v = object_embedding(o);
                present_embs
                    .iter()
                    .map(|p| p.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>())
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            let mut pool = absent;
            pool.sort_by(|&a, &b| {
                similarity(b)
                    .partial_cmp(&similarity(a))
                    .unwrap()
                    .then(a.cmp(&b))
            });
            pool[..needed].to_vec()
        }
    };
    Ok(negatives)
}

/// Probe every present object and as many sampled negatives per scene,
/// scoring answers from the provided answerer.
pub fn pope_eval_with_answerer(
    mut answer: impl FnMut(&SyntheticScene, usize) -> Result<bool>,
    scenes: &[SyntheticScene],
    strategy: PopeStrategy,
    seed: u64,
) -> Result<PopeScores> {
    if scenes.is_empty() {
        return Err(CoreError::EmptyInput("pope_eval over no scenes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for scene in scenes {
        scene.validate()?;
        let negatives = sample_negatives(scene, scenes, strategy, &mut rng)?;
        for &o in &scene.present {
            if answer(scene, o)? {
                tp += 1;
            } else {
                fn_ += 1;
            }
        }
        for &o in &negatives {
            if answer(scene, o)? {
                fp += 1;
            } else {
                tn += 1;
            }
        }
    }
    Ok(PopeScores::from_confusion(tp, fp, tn, fn_))
}

/// Ask the model "is this object in the image?" for one scene and object:
/// one decode step on the query prompt, answered by the larger of the two
/// reserved answer logits.
pub fn model_answers_yes(
    model: &Model,
    scene: &SyntheticScene,
    object: usize,
    afip: &AfipConfig,
) -> Result<bool> {
    let embeddings = scene_embeddings(scene);
    let prompt = [TOKEN_QUERY_PROMPT, query_token(object)];
    let mut hook_storage;
    let hook: Option<&mut dyn AttentionHook> = if afip.enabled {
        hook_storage = AfipHook::new(*afip, model.config.num_layers);
        Some(&mut hook_storage)
    } else {
        None
    };
    let (_, trace) = greedy_decode(model, &embeddings, &prompt, 1, hook)?;
    let logits = &trace.steps[0].logits;
    Ok(logits[TOKEN_YES as usize] >= logits[TOKEN_NO as usize])
}

/// Model-backed probing over a scene set.
pub fn pope_eval(
    model: &Model,
    scenes: &[SyntheticScene],
    strategy: PopeStrategy,
    afip: &AfipConfig,
    seed: u64,
) -> Result<PopeScores> {
    pope_eval_with_answerer(
        |scene, object| model_answers_yes(model, scene, object, afip),
        scenes,
        strategy,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::super::build::{build_toy_model, toy_model_config};
    use super::super::episode::{run_episode, standard_suite};
    use super::super::PathologyConfig;
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scene(present: Vec<usize>, slots: Vec<usize>, distractors: Vec<usize>) -> SyntheticScene {
        SyntheticScene {
            present,
            slots,
            distractors,
        }
    }

    #[test]
    fn chair_formulas() {
        // One episode with 5 mentions, 2 hallucinated: C_I = 0.4.
        let e = |mentions: Vec<usize>, halluc: Vec<usize>| EpisodeResult {
            scene: scene(vec![0], vec![0], vec![]),
            tokens: vec![],
            mentions,
            hallucinated: halluc,
            labels: vec![],
            trace: Default::default(),
        };
        let one = vec![e(vec![0, 1, 2, 3, 4], vec![3, 4])];
        let scores = chair_scores(&one).unwrap();
        assert_abs_diff_eq!(scores.c_i, 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(scores.c_s, 1.0, epsilon = 1e-15);

        // 10 episodes, 3 with at least one hallucination: C_S = 0.3.
        let mut many = Vec::new();
        for i in 0..10 {
            let h = if i < 3 { vec![9] } else { vec![] };
            many.push(e(vec![0, 9], h));
        }
        let scores = chair_scores(&many).unwrap();
        assert_abs_diff_eq!(scores.c_s, 0.3, epsilon = 1e-15);

        // No mentions at all: both rates zero by convention.
        let none = vec![e(vec![], vec![])];
        let scores = chair_scores(&none).unwrap();
        assert_eq!(scores.c_i, 0.0);
        assert_eq!(scores.c_s, 0.0);
    }

    #[test]
    fn pope_oracle_answerer_is_perfect() {
        let scenes = standard_suite();
        let scores = pope_eval_with_answerer(
            |scene, o| Ok(scene.is_present(o)),
            &scenes,
            PopeStrategy::Random,
            1,
        )
        .unwrap();
        assert_eq!(scores.accuracy, 1.0);
        assert_eq!(scores.f1, 1.0);
    }

    #[test]
    fn pope_always_yes_on_balanced_queries() {
        let scenes = standard_suite();
        let scores =
            pope_eval_with_answerer(|_, _| Ok(true), &scenes, PopeStrategy::Popular, 1).unwrap();
        assert_abs_diff_eq!(scores.accuracy, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(scores.recall, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(scores.precision, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(scores.f1, 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn pope_needs_enough_negatives() {
        // 12 present objects leave only 4 absent: sampling 12 negatives fails.
        let s = scene((0..12).collect(), (0..12).collect(), vec![]);
        let err = pope_eval_with_answerer(|_, _| Ok(true), &[s], PopeStrategy::Random, 1);
        assert!(err.is_err());
    }

    #[test]
    fn pope_adversarial_prefers_partners() {
        // Object 0 present; its pair partner 1 is the most similar absent.
        let s = scene(vec![0], vec![0], vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let negs = sample_negatives(&s, &[s.clone()], PopeStrategy::Adversarial, &mut rng).unwrap();
        assert_eq!(negs, vec![1]);
    }

    #[test]
    fn model_pope_beats_chance_on_clean_scenes() {
        let model = build_toy_model(&toy_model_config(4), &PathologyConfig::default()).unwrap();
        let scenes: Vec<SyntheticScene> = standard_suite().into_iter().take(10).collect();
        let scores = pope_eval(
            &model,
            &scenes,
            PopeStrategy::Random,
            &AfipConfig::disabled(),
            7,
        )
        .unwrap();
        // Pair-level probing answers every present query and confuses some
        // pair-mate negatives.
        assert_eq!(scores.recall, 1.0, "{scores:?}");
        assert!(scores.accuracy > 0.6, "{scores:?}");
    }

    #[test]
    fn afip_disabled_vs_never_open_gate_identical_results() {
        let path = PathologyConfig {
            sigma_head: 0.8,
            lambda_decay: 0.97,
            seed: 11,
        };
        let model = build_toy_model(&toy_model_config(4), &path).unwrap();
        let scene = &standard_suite()[5];
        let off = run_episode(&model, scene, &AfipConfig::disabled()).unwrap();
        let never_open = AfipConfig {
            tau: f64::NEG_INFINITY,
            ..AfipConfig::default()
        };
        let on = run_episode(&model, scene, &never_open).unwrap();
        assert_eq!(off.tokens, on.tokens);
        for (a, b) in off.trace.steps.iter().zip(&on.trace.steps) {
            assert_eq!(a.logits, b.logits);
            assert_eq!(a.rows_post, b.rows_post);
        }
    }
}

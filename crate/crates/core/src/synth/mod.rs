//! Seeded generator of desk-scale corpora with a controllable split of
//! information between the visual and textual channels.
//!
//! Every scene belongs to one of the built-in scene types. Visual features
//! are the type centroid plus gaussian noise, so vision always identifies
//! the type. Each scene instantiates all event templates of its type, and
//! each (type, template, relation) pair owns a fixed inference set, so a
//! scene's valid inferences are an exact function of its type — which is
//! what lets [`oracle_answers`] serve as ground truth for model evaluation.
//!
//! The `visual_dependence` knob λ blinds the text channel: a seeded subset
//! of scenes covering exactly `round(λ · n_events)` events has every event
//! text replaced by an uninformative placeholder and its place text by
//! "somewhere". At λ=0 the event text alone determines the scene type; at
//! λ=1 the text channel carries nothing and only vision disambiguates.

mod templates;

pub use templates::{builtin_templates, min_pool_size, SceneTemplate, SUBJECT_SLOT};

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    Corpus, EventRecord, Inference, PerRelation, PersonFeature, PersonTag, Relation, SceneEntry, Split,
    VisualScene, MAX_VISUAL_FEATURES,
};
use crate::seeds;

/// Place text used for text-blinded scenes.
pub const PLACE_PLACEHOLDER: &str = "somewhere";

/// Event text used for text-blinded scenes; mentions the subject so the
/// grounding invariant still holds, but carries no scene-type information.
pub fn event_placeholder(subject: PersonTag) -> String {
    format!("{} is here", subject.render())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_scene_types: usize,
    pub n_scenes: usize,
    /// Inclusive range of persons per scene.
    pub persons_per_scene: (u32, u32),
    /// Inclusive range of inferences per (event, relation).
    pub inferences_per_relation: (usize, usize),
    pub feature_dim: usize,
    pub noise_sigma: f32,
    /// λ: fraction of events whose text channel is uninformative.
    pub visual_dependence: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_scene_types: 6,
            n_scenes: 60,
            persons_per_scene: (1, 3),
            inferences_per_relation: (2, 3),
            feature_dim: 64,
            noise_sigma: 0.25,
            visual_dependence: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("n_scene_types {0} outside 1..={1}")]
    BadTypeCount(usize, usize),
    #[error("n_scenes must be at least 1")]
    NoScenes,
    #[error("empty range {0:?} for {1}")]
    EmptyRange((usize, usize), &'static str),
    #[error("persons_per_scene {0:?} outside 1..={1}")]
    BadPersonRange((u32, u32), usize),
    #[error("inferences_per_relation max {0} exceeds the smallest template pool ({1})")]
    PoolTooSmall(usize, usize),
    #[error("visual_dependence {0} outside [0, 1]")]
    BadLambda(f64),
    #[error("feature_dim {0} must be at least n_scene_types {1} for separated centroids")]
    FeatureDimTooSmall(usize, usize),
    #[error("noise_sigma must be positive, got {0}")]
    BadSigma(f32),
    #[error("unknown scene id {0:?}")]
    UnknownScene(String),
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let n_types = builtin_templates().len();
        if self.n_scene_types == 0 || self.n_scene_types > n_types {
            return Err(SynthError::BadTypeCount(self.n_scene_types, n_types));
        }
        if self.n_scenes == 0 {
            return Err(SynthError::NoScenes);
        }
        if self.persons_per_scene.0 > self.persons_per_scene.1 {
            return Err(SynthError::EmptyRange(
                (self.persons_per_scene.0 as usize, self.persons_per_scene.1 as usize),
                "persons_per_scene",
            ));
        }
        if self.persons_per_scene.0 < 1 || self.persons_per_scene.1 as usize > MAX_VISUAL_FEATURES - 1 {
            return Err(SynthError::BadPersonRange(self.persons_per_scene, MAX_VISUAL_FEATURES - 1));
        }
        if self.inferences_per_relation.0 > self.inferences_per_relation.1 || self.inferences_per_relation.0 == 0 {
            return Err(SynthError::EmptyRange(self.inferences_per_relation, "inferences_per_relation"));
        }
        let pool = min_pool_size();
        if self.inferences_per_relation.1 > pool {
            return Err(SynthError::PoolTooSmall(self.inferences_per_relation.1, pool));
        }
        if !(0.0..=1.0).contains(&self.visual_dependence) {
            return Err(SynthError::BadLambda(self.visual_dependence));
        }
        if self.feature_dim < self.n_scene_types {
            return Err(SynthError::FeatureDimTooSmall(self.feature_dim, self.n_scene_types));
        }
        if self.noise_sigma <= 0.0 {
            return Err(SynthError::BadSigma(self.noise_sigma));
        }
        Ok(())
    }
}

/// Type centroid: a one-hot vector with amplitude 3σ, so distinct centroids
/// sit 3σ·√2 ≈ 4.24σ apart — separable but close enough that noise matters.
pub fn centroid(type_id: usize, config: &SynthConfig) -> Vec<f32> {
    let mut c = vec![0.0f32; config.feature_dim];
    c[type_id] = 3.0 * config.noise_sigma;
    c
}

fn scene_type_of(index: usize, config: &SynthConfig) -> usize {
    index % config.n_scene_types
}

fn scene_id_of(index: usize) -> String {
    format!("scene{index:05}")
}

fn parse_scene_id(id: &str) -> Option<usize> {
    id.strip_prefix("scene")?.parse().ok()
}

/// The fixed inference set for a (type, event-template, relation) cell: a
/// cyclic window into the type's pool, with a per-cell size drawn once from
/// the configured range. Stride 2 gives adjacent templates mostly disjoint
/// sets, so event identity carries information beyond the scene type.
fn plan_sets(config: &SynthConfig) -> Vec<Vec<PerRelation<Vec<String>>>> {
    let (lo, hi) = config.inferences_per_relation;
    let mut rng = seeds::stream(config.seed, seeds::TAG_PLAN);
    builtin_templates()[..config.n_scene_types]
        .iter()
        .map(|tpl| {
            (0..tpl.event_templates.len())
                .map(|e| {
                    let mut per = PerRelation::<Vec<String>>::default();
                    for r in Relation::ALL {
                        let pool = tpl.inference_pools.get(r);
                        let count = rng.gen_range(lo..=hi);
                        let start = (e * 2) % pool.len();
                        *per.get_mut(r) = (0..count).map(|k| pool[(start + k) % pool.len()].clone()).collect();
                    }
                    per
                })
                .collect()
        })
        .collect()
}

fn events_per_scene(config: &SynthConfig) -> Vec<usize> {
    (0..config.n_scenes)
        .map(|i| builtin_templates()[scene_type_of(i, config)].event_templates.len())
        .collect()
}

/// Picks the text-blinded scenes: a seeded subset whose event counts sum to
/// exactly `round(λ · n_events)` whenever scene sizes permit (sizes are 2 or
/// 3, so every target except 1 is representable), else as close as possible.
fn blind_scenes(config: &SynthConfig) -> Vec<bool> {
    let sizes = events_per_scene(config);
    let total: usize = sizes.iter().sum();
    let target = (config.visual_dependence * total as f64).round() as usize;

    let mut order: Vec<usize> = (0..config.n_scenes).collect();
    let mut rng = seeds::stream(config.seed, seeds::TAG_BLIND);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let twos: Vec<usize> = order.iter().copied().filter(|&i| sizes[i] == 2).collect();
    let threes: Vec<usize> = order.iter().copied().filter(|&i| sizes[i] == 3).collect();

    // 2a + 3b = target with a <= |twos|, b <= |threes|; prefer the largest
    // feasible b so leftovers stay representable.
    let mut pick: Option<(usize, usize)> = None;
    let mut b = (target / 3).min(threes.len());
    loop {
        let rest = target - 3 * b;
        if rest % 2 == 0 && rest / 2 <= twos.len() {
            pick = Some((rest / 2, b));
            break;
        }
        if b == 0 {
            break;
        }
        b -= 1;
    }
    // Fall back to the closest achievable total below target.
    let (a, b) = pick.unwrap_or_else(|| {
        let mut best = (0usize, 0usize);
        let mut best_sum = 0usize;
        for b in 0..=threes.len() {
            if 3 * b > target {
                break;
            }
            let a = ((target - 3 * b) / 2).min(twos.len());
            let sum = 2 * a + 3 * b;
            if sum > best_sum {
                best_sum = sum;
                best = (a, b);
            }
        }
        best
    });

    let mut blind = vec![false; config.n_scenes];
    for &i in twos.iter().take(a) {
        blind[i] = true;
    }
    for &i in threes.iter().take(b) {
        blind[i] = true;
    }
    blind
}

/// Generates a corpus. Deterministic in the config; per-scene RNG streams
/// are derived from (seed, scene index) so scenes never share draws.
pub fn generate(config: &SynthConfig) -> Result<Corpus, SynthError> {
    config.validate()?;
    let plan = plan_sets(config);
    let blind = blind_scenes(config);
    let templates = builtin_templates();

    let mut corpus = Corpus::new(config.feature_dim);
    for i in 0..config.n_scenes {
        let type_id = scene_type_of(i, config);
        let tpl = &templates[type_id];
        let mut rng = seeds::stream2(config.seed, seeds::TAG_SCENE, i as u64);

        let n_persons = rng.gen_range(config.persons_per_scene.0..=config.persons_per_scene.1);
        let center = centroid(type_id, config);
        let draw_feature = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f32> {
            center
                .iter()
                .map(|&c| c + config.noise_sigma * seeds::gaussian(rng) as f32)
                .collect()
        };
        let image_feature = draw_feature(&mut rng);
        let persons: Vec<PersonFeature> = (1..=n_persons)
            .map(|tag| PersonFeature {
                tag: PersonTag(tag),
                feature: draw_feature(&mut rng),
            })
            .collect();

        let events: Vec<EventRecord> = tpl
            .event_templates
            .iter()
            .enumerate()
            .map(|(e_idx, event_tpl)| {
                let subject = PersonTag(rng.gen_range(1..=n_persons));
                let event_text = if blind[i] {
                    event_placeholder(subject)
                } else {
                    event_tpl.replace(SUBJECT_SLOT, &subject.render())
                };
                let place_text = if blind[i] {
                    PLACE_PLACEHOLDER.to_string()
                } else {
                    tpl.place_phrase.clone()
                };
                let mut inferences = Vec::new();
                for r in Relation::ALL {
                    for text in plan[type_id][e_idx].get(r) {
                        inferences.push(Inference {
                            relation: r,
                            text: text.clone(),
                            subject,
                        });
                    }
                }
                EventRecord {
                    event_text,
                    place_text,
                    subject,
                    inferences,
                }
            })
            .collect();

        corpus
            .push_scene(SceneEntry {
                scene: VisualScene {
                    scene_id: scene_id_of(i),
                    image_feature,
                    persons,
                },
                split: Split::Train,
                events,
            })
            .expect("generated ids are unique");
    }
    debug_assert!(corpus.validate().is_empty());
    Ok(corpus)
}

/// The exact set of inference texts valid for a scene and relation: the
/// union over the scene type's event templates of their planned sets. Used
/// as ground truth by acceptance tests; identical for all scenes of a type.
pub fn oracle_answers(config: &SynthConfig, scene_id: &str, relation: Relation) -> Result<BTreeSet<String>, SynthError> {
    config.validate()?;
    let index = parse_scene_id(scene_id)
        .filter(|&i| i < config.n_scenes)
        .ok_or_else(|| SynthError::UnknownScene(scene_id.to_string()))?;
    let plan = plan_sets(config);
    let type_id = scene_type_of(index, config);
    Ok(plan[type_id]
        .iter()
        .flat_map(|per| per.get(relation).iter().cloned())
        .collect())
}

/// The planned inference texts for one (scene, event index, relation) cell;
/// the generator stores exactly these on the corresponding event.
pub fn oracle_event_answers(
    config: &SynthConfig,
    scene_id: &str,
    event_index: usize,
    relation: Relation,
) -> Result<Vec<String>, SynthError> {
    config.validate()?;
    let index = parse_scene_id(scene_id)
        .filter(|&i| i < config.n_scenes)
        .ok_or_else(|| SynthError::UnknownScene(scene_id.to_string()))?;
    let plan = plan_sets(config);
    let type_id = scene_type_of(index, config);
    plan[type_id]
        .get(event_index)
        .map(|per| per.get(relation).clone())
        .ok_or_else(|| SynthError::UnknownScene(format!("{scene_id} event {event_index}")))
}

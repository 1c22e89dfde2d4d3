//! Bundled scene-type templates.
//!
//! Six hand-written scene types (bar, office, boat, party, street,
//! restaurant) keep generated corpora small enough that tests stay readable.
//! Event templates carry a `[P]` slot for the subject person; inference
//! texts deliberately mention no people.

use std::sync::OnceLock;

use serde::Deserialize;

use crate::graph::{PerRelation, Relation};

/// The subject slot inside event templates.
pub const SUBJECT_SLOT: &str = "[P]";

#[derive(Clone, Debug)]
pub struct SceneTemplate {
    pub scene_type_id: usize,
    pub name: String,
    pub place_phrase: String,
    pub event_templates: Vec<String>,
    pub inference_pools: PerRelation<Vec<String>>,
}

#[derive(Deserialize)]
struct RawAsset {
    types: Vec<RawType>,
}

#[derive(Deserialize)]
struct RawType {
    name: String,
    place: String,
    events: Vec<String>,
    before: Vec<String>,
    intent: Vec<String>,
    after: Vec<String>,
}

static TEMPLATES: OnceLock<Vec<SceneTemplate>> = OnceLock::new();

/// The built-in scene types, parsed once from the bundled asset.
pub fn builtin_templates() -> &'static [SceneTemplate] {
    TEMPLATES.get_or_init(|| {
        let raw: RawAsset =
            serde_json::from_str(include_str!("../../assets/templates.json")).expect("bundled templates parse");
        raw.types
            .into_iter()
            .enumerate()
            .map(|(i, t)| SceneTemplate {
                scene_type_id: i,
                name: t.name,
                place_phrase: t.place,
                event_templates: t.events,
                inference_pools: PerRelation {
                    before: t.before,
                    intent: t.intent,
                    after: t.after,
                },
            })
            .collect()
    })
}

/// Smallest inference pool size across the built-in types; generator configs
/// cannot ask for more inferences per relation than this.
pub fn min_pool_size() -> usize {
    builtin_templates()
        .iter()
        .flat_map(|t| Relation::ALL.iter().map(|&r| t.inference_pools.get(r).len()))
        .min()
        .unwrap_or(0)
}

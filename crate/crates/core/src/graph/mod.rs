//! In-memory model, serialization, validation, splitting, and statistics for
//! visual commonsense graph corpora.
//!
//! A corpus is a set of scenes. Each scene carries one whole-image feature
//! vector plus per-person feature vectors, and a list of grounded events at
//! present; every event links to its before/intent/after inference sets.
//! Scenes are the unit of train/dev/test assignment so no scene ever leaks
//! across splits.

mod io;
mod split;
mod stats;

pub use io::{load_corpus, read_corpus, save_corpus, save_corpus_with_sidecar, write_corpus};
pub use split::{apportion, split_corpus};
pub use stats::{compute_stats, StatsReport, TOP_BIGRAMS};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hard cap on visual features per scene: one whole-image vector plus up to
/// fourteen person vectors.
pub const MAX_VISUAL_FEATURES: usize = 15;

/// A person referent tag, rendered as `[PersonN]` in text. Indices start at 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PersonTag(pub u32);

impl PersonTag {
    pub fn render(self) -> String {
        format!("[Person{}]", self.0)
    }
}

/// Parses a single whitespace token of the form `[PersonN]` (case-sensitive).
pub fn parse_person_token(token: &str) -> Option<u32> {
    let digits = token.strip_prefix("[Person")?.strip_suffix(']')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok().filter(|&n| n >= 1)
}

/// All person tags mentioned in a text, in order of appearance.
pub fn person_mentions(text: &str) -> Vec<u32> {
    text.split_whitespace().filter_map(parse_person_token).collect()
}

/// The three inference dimensions of a visual commonsense graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Before,
    Intent,
    After,
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::Before, Relation::Intent, Relation::After];

    pub fn name(self) -> &'static str {
        match self {
            Relation::Before => "before",
            Relation::Intent => "intent",
            Relation::After => "after",
        }
    }
}

impl std::fmt::Display for Relation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One value per relation. Used by stats reports and metric bundles.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerRelation<T> {
    pub before: T,
    pub intent: T,
    pub after: T,
}

impl<T> PerRelation<T> {
    pub fn get(&self, r: Relation) -> &T {
        match r {
            Relation::Before => &self.before,
            Relation::Intent => &self.intent,
            Relation::After => &self.after,
        }
    }

    pub fn get_mut(&mut self, r: Relation) -> &mut T {
        match r {
            Relation::Before => &mut self.before,
            Relation::Intent => &mut self.intent,
            Relation::After => &mut self.after,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> PerRelation<U> {
        PerRelation {
            before: f(&self.before),
            intent: f(&self.intent),
            after: f(&self.after),
        }
    }
}

/// Corpus split assignment, always per scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// A person's feature vector inside a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonFeature {
    pub tag: PersonTag,
    pub feature: Vec<f32>,
}

/// An image stand-in: whole-image feature vector plus tagged per-person
/// feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualScene {
    pub scene_id: String,
    pub image_feature: Vec<f32>,
    pub persons: Vec<PersonFeature>,
}

impl VisualScene {
    /// Total visual feature count (whole image + persons).
    pub fn visual_count(&self) -> usize {
        1 + self.persons.len()
    }

    pub fn person_feature(&self, tag: PersonTag) -> Option<&[f32]> {
        self.persons
            .iter()
            .find(|p| p.tag == tag)
            .map(|p| p.feature.as_slice())
    }
}

/// One before/intent/after inference attached to an event.
///
/// `subject` is the tag of the event's subject person; inference texts
/// themselves rarely mention people.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub relation: Relation,
    pub text: String,
    pub subject: PersonTag,
}

/// A grounded event at present together with its inference sets.
#[derive(Clone, Debug, PartialEq)]
pub struct EventRecord {
    pub event_text: String,
    pub place_text: String,
    pub subject: PersonTag,
    pub inferences: Vec<Inference>,
}

impl EventRecord {
    pub fn inferences_for(&self, relation: Relation) -> impl Iterator<Item = &Inference> {
        self.inferences.iter().filter(move |i| i.relation == relation)
    }
}

/// A scene plus its split assignment and events.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneEntry {
    pub scene: VisualScene,
    pub split: Split,
    pub events: Vec<EventRecord>,
}

/// An in-memory corpus. Immutable after construction; scene order is the
/// canonical serialization order.
#[derive(Clone, Debug)]
pub struct Corpus {
    feature_dim: usize,
    scenes: Vec<SceneEntry>,
    by_id: HashMap<String, usize>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("duplicate scene id {0:?}")]
    DuplicateScene(String),
    #[error("corpus invariant violated: {0}")]
    Invalid(Violation),
}

/// A single validation finding: which record, which rule.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub scene_id: String,
    pub rule: &'static str,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "scene {:?}: rule {} ({})", self.scene_id, self.rule, self.detail)
    }
}

impl Corpus {
    pub fn new(feature_dim: usize) -> Self {
        Corpus {
            feature_dim,
            scenes: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    /// Builds a corpus and checks all invariants; any violation is an error.
    pub fn from_entries(feature_dim: usize, entries: Vec<SceneEntry>) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::new(feature_dim);
        for entry in entries {
            corpus.push_scene(entry)?;
        }
        if let Some(v) = corpus.validate().into_iter().next() {
            return Err(CorpusError::Invalid(v));
        }
        Ok(corpus)
    }

    /// Appends a scene without running full validation (id uniqueness only).
    pub fn push_scene(&mut self, entry: SceneEntry) -> Result<(), CorpusError> {
        if self.by_id.contains_key(&entry.scene.scene_id) {
            return Err(CorpusError::DuplicateScene(entry.scene.scene_id.clone()));
        }
        self.by_id.insert(entry.scene.scene_id.clone(), self.scenes.len());
        self.scenes.push(entry);
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn scenes(&self) -> &[SceneEntry] {
        &self.scenes
    }

    pub fn scene_by_id(&self, id: &str) -> Option<&SceneEntry> {
        self.by_id.get(id).map(|&i| &self.scenes[i])
    }

    pub fn scene_index(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// All (scene index, event index, event) triples, in corpus order.
    pub fn events(&self) -> impl Iterator<Item = (usize, usize, &EventRecord)> {
        self.scenes
            .iter()
            .enumerate()
            .flat_map(|(si, e)| e.events.iter().enumerate().map(move |(ei, ev)| (si, ei, ev)))
    }

    /// Events restricted to one split.
    pub fn events_in(&self, split: Split) -> impl Iterator<Item = (usize, usize, &EventRecord)> {
        self.scenes
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.split == split)
            .flat_map(|(si, e)| e.events.iter().enumerate().map(move |(ei, ev)| (si, ei, ev)))
    }

    pub fn scenes_in(&self, split: Split) -> impl Iterator<Item = (usize, &SceneEntry)> {
        self.scenes.iter().enumerate().filter(move |(_, e)| e.split == split)
    }

    /// Returns a copy with new split assignments, scene data untouched.
    pub fn with_splits(&self, splits: &[Split]) -> Corpus {
        assert_eq!(splits.len(), self.scenes.len());
        let mut out = self.clone();
        for (entry, &s) in out.scenes.iter_mut().zip(splits) {
            entry.split = s;
        }
        out
    }

    /// Checks every type invariant and returns all findings. Violations are
    /// data, not errors: an empty list means the corpus is well-formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for entry in &self.scenes {
            validate_scene(self.feature_dim, entry, &mut out);
        }
        out
    }
}

fn validate_scene(feature_dim: usize, entry: &SceneEntry, out: &mut Vec<Violation>) {
    let scene = &entry.scene;
    let id = &scene.scene_id;
    let mut push = |rule: &'static str, detail: String| {
        out.push(Violation {
            scene_id: id.clone(),
            rule,
            detail,
        })
    };

    if scene.visual_count() > MAX_VISUAL_FEATURES {
        push(
            "max_visual_features",
            format!("{} visual features exceed the cap of {MAX_VISUAL_FEATURES}", scene.visual_count()),
        );
    }
    if scene.image_feature.len() != feature_dim {
        push(
            "feature_dim",
            format!("image feature has dim {} but corpus dim is {feature_dim}", scene.image_feature.len()),
        );
    }
    for p in &scene.persons {
        if p.feature.len() != feature_dim {
            push(
                "feature_dim",
                format!("{} feature has dim {} but corpus dim is {feature_dim}", p.tag.render(), p.feature.len()),
            );
        }
    }
    // Tags must be exactly 1..=k in order.
    let contiguous = scene
        .persons
        .iter()
        .enumerate()
        .all(|(i, p)| p.tag.0 == i as u32 + 1);
    if !contiguous {
        push(
            "person_tags_contiguous",
            format!("tags {:?} are not 1..={}", scene.persons.iter().map(|p| p.tag.0).collect::<Vec<_>>(), scene.persons.len()),
        );
    }
    let resolves = |tag: u32| scene.persons.iter().any(|p| p.tag.0 == tag);

    for (ei, event) in entry.events.iter().enumerate() {
        let mentions = person_mentions(&event.event_text);
        if mentions.is_empty() {
            push("event_mentions_person", format!("event {ei} mentions no person tag"));
        }
        for tag in mentions {
            if !resolves(tag) {
                push("event_person_resolves", format!("event {ei} mentions [Person{tag}] absent from scene"));
            }
        }
        if !resolves(event.subject.0) {
            push("subject_resolves", format!("event {ei} subject {} absent from scene", event.subject.render()));
        }
        if event.place_text.trim().is_empty() {
            push("place_nonempty", format!("event {ei} has empty place text"));
        }
        for (ii, inf) in event.inferences.iter().enumerate() {
            if inf.text.trim().is_empty() {
                push("inference_text_nonempty", format!("event {ei} inference {ii} has empty text"));
            }
            for tag in person_mentions(&inf.text) {
                if !resolves(tag) {
                    push(
                        "inference_person_resolves",
                        format!("event {ei} inference {ii} mentions [Person{tag}] absent from scene"),
                    );
                }
            }
        }
    }
}

//! Corpus statistics over one split.
//!
//! The report mirrors the usual summary table for this kind of corpus:
//! per-relation inference counts per event, events per scene, mean word
//! counts for event/place/inference text, top starting bigrams per relation,
//! and sentence-length histograms. A `[PersonN]` mention counts as one word.
//!
//! For orientation, the full-scale reference corpus averages 2.12 intent /
//! 4.30 before / 4.31 after inferences per event, 2.34 events per image, and
//! 9.93 / 3.44 / 4.8 words per event / place / inference. Those values
//! describe real data and are not asserted anywhere in this crate.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Corpus, PerRelation, Split};

/// How many starting bigrams to keep per relation.
pub const TOP_BIGRAMS: usize = 5;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("split {0:?} has no scenes")]
    EmptySplit(&'static str),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub split: Split,
    pub scene_count: usize,
    pub event_count: usize,
    pub inference_count: usize,
    /// Mean number of inferences per event, by relation.
    pub inferences_per_event: PerRelation<f64>,
    pub events_per_scene: f64,
    pub event_words_mean: f64,
    pub place_words_mean: f64,
    pub inference_words_mean: f64,
    /// Most frequent first-two-word openings per relation, as (bigram, count),
    /// ordered by descending count then lexicographically.
    pub top_bigrams: PerRelation<Vec<(String, usize)>>,
    /// Sentence length (in words) -> sentence count.
    pub event_length_hist: BTreeMap<usize, usize>,
    pub place_length_hist: BTreeMap<usize, usize>,
    pub inference_length_hist: BTreeMap<usize, usize>,
}

fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Computes the report over `split` only. Deterministic and invariant to
/// record order.
pub fn compute_stats(corpus: &Corpus, split: Split) -> Result<StatsReport, StatsError> {
    let scene_count = corpus.scenes_in(split).count();
    if scene_count == 0 {
        return Err(StatsError::EmptySplit(split.name()));
    }

    let mut event_count = 0usize;
    let mut inference_count = 0usize;
    let mut rel_counts = PerRelation::<usize>::default();
    let mut event_words = 0usize;
    let mut place_words = 0usize;
    let mut inference_words = 0usize;
    let mut bigram_counts: PerRelation<HashMap<String, usize>> = PerRelation::default();
    let mut event_hist = BTreeMap::new();
    let mut place_hist = BTreeMap::new();
    let mut inference_hist = BTreeMap::new();

    for (_, _, event) in corpus.events_in(split) {
        event_count += 1;
        let ew = word_count(&event.event_text);
        let pw = word_count(&event.place_text);
        event_words += ew;
        place_words += pw;
        *event_hist.entry(ew).or_insert(0) += 1;
        *place_hist.entry(pw).or_insert(0) += 1;
        for inf in &event.inferences {
            inference_count += 1;
            *rel_counts.get_mut(inf.relation) += 1;
            let words: Vec<&str> = inf.text.split_whitespace().collect();
            inference_words += words.len();
            *inference_hist.entry(words.len()).or_insert(0) += 1;
            if words.len() >= 2 {
                let bigram = format!("{} {}", words[0], words[1]);
                *bigram_counts.get_mut(inf.relation).entry(bigram).or_insert(0) += 1;
            }
        }
    }

    let mean = |total: usize, denom: usize| {
        if denom == 0 {
            0.0
        } else {
            total as f64 / denom as f64
        }
    };
    let top = |m: &HashMap<String, usize>| {
        let mut pairs: Vec<(String, usize)> = m.iter().map(|(k, &v)| (k.clone(), v)).collect();
        pairs.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        pairs.truncate(TOP_BIGRAMS);
        pairs
    };

    Ok(StatsReport {
        split,
        scene_count,
        event_count,
        inference_count,
        inferences_per_event: rel_counts.map(|&c| mean(c, event_count)),
        events_per_scene: mean(event_count, scene_count),
        event_words_mean: mean(event_words, event_count),
        place_words_mean: mean(place_words, event_count),
        inference_words_mean: mean(inference_words, inference_count),
        top_bigrams: bigram_counts.map(top),
        event_length_hist: event_hist,
        place_length_hist: place_hist,
        inference_length_hist: inference_hist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::tiny_scene;
    use crate::graph::{Inference, PersonTag, Relation};

    #[test]
    fn before_mean_is_hand_count() {
        // One scene, two events with 2 and 3 before inferences: mean 2.5.
        let mut entry = tiny_scene("s0", 4, 1);
        let mk = |text: &str| Inference {
            relation: Relation::Before,
            text: text.into(),
            subject: PersonTag(1),
        };
        entry.events[0].inferences = vec![mk("walk in quietly"), mk("open the door")];
        let mut second = entry.events[0].clone();
        second.inferences = vec![mk("walk in quietly"), mk("hang up a coat"), mk("greet a friend")];
        entry.events.push(second);
        let corpus = Corpus::from_entries(4, vec![entry]).unwrap();
        let report = compute_stats(&corpus, Split::Train).unwrap();
        assert_eq!(report.inferences_per_event.before, 2.5);
        assert_eq!(report.inferences_per_event.intent, 0.0);
        assert_eq!(report.events_per_scene, 2.0);
        // Histogram totals match sentence counts.
        assert_eq!(report.inference_length_hist.values().sum::<usize>(), 5);
        assert_eq!(report.event_length_hist.values().sum::<usize>(), 2);
        // "walk in" leads the before bigrams with count 2.
        assert_eq!(report.top_bigrams.before[0], ("walk in".to_string(), 2));
    }

    #[test]
    fn person_tag_counts_as_one_word() {
        let mut entry = tiny_scene("s0", 4, 1);
        entry.events[0].event_text = "[Person1] sits".into();
        let corpus = Corpus::from_entries(4, vec![entry]).unwrap();
        let report = compute_stats(&corpus, Split::Train).unwrap();
        assert_eq!(report.event_words_mean, 2.0);
    }

    #[test]
    fn empty_split_is_an_error() {
        let corpus = Corpus::from_entries(4, vec![tiny_scene("s0", 4, 1)]).unwrap();
        assert!(compute_stats(&corpus, Split::Dev).is_err());
    }

    #[test]
    fn stats_are_permutation_invariant() {
        let entries = vec![tiny_scene("s0", 4, 1), tiny_scene("s1", 4, 2), tiny_scene("s2", 4, 1)];
        let forward = Corpus::from_entries(4, entries.clone()).unwrap();
        let reversed = Corpus::from_entries(4, entries.into_iter().rev().collect()).unwrap();
        assert_eq!(
            compute_stats(&forward, Split::Train).unwrap(),
            compute_stats(&reversed, Split::Train).unwrap()
        );
    }
}

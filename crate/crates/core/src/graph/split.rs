//! Scene-level train/dev/test assignment.

use rand::Rng;
use thiserror::Error;

use super::{Corpus, Split};
use crate::seeds;

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("fraction {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("fractions sum to {0}, expected 1")]
    BadSum(f64),
}

/// Largest-remainder apportionment of `n` items over three fractions.
/// Floors first, then hands leftover items to the largest remainders
/// (ties broken toward train, then dev).
pub fn apportion(n: usize, fractions: (f64, f64, f64)) -> [usize; 3] {
    let fr = [fractions.0, fractions.1, fractions.2];
    let quota: Vec<f64> = fr.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quota.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quota[a] - quota[a].floor();
        let rb = quota[b] - quota[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..n.saturating_sub(assigned) {
        counts[order[i % 3]] += 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// Reassigns splits at the scene level: counts come from largest-remainder
/// apportionment, membership from a seeded Fisher-Yates shuffle of scene
/// order. Deterministic in `seed`; integer arithmetic only.
pub fn split_corpus(corpus: &Corpus, fractions: (f64, f64, f64), seed: u64) -> Result<Corpus, SplitError> {
    for f in [fractions.0, fractions.1, fractions.2] {
        if !(0.0..=1.0).contains(&f) || !f.is_finite() {
            return Err(SplitError::OutOfRange(f));
        }
    }
    let sum = fractions.0 + fractions.1 + fractions.2;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(SplitError::BadSum(sum));
    }

    let n = corpus.scenes().len();
    let counts = apportion(n, fractions);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeds::stream(seed, seeds::TAG_SPLIT);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut splits = vec![Split::Train; n];
    for (pos, &scene_idx) in order.iter().enumerate() {
        splits[scene_idx] = if pos < counts[0] {
            Split::Train
        } else if pos < counts[0] + counts[1] {
            Split::Dev
        } else {
            Split::Test
        };
    }
    Ok(corpus.with_splits(&splits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::tiny_scene;
    use crate::graph::SceneEntry;

    fn corpus_of(n: usize) -> Corpus {
        let entries: Vec<SceneEntry> = (0..n).map(|i| tiny_scene(&format!("s{i}"), 4, 1)).collect();
        Corpus::from_entries(4, entries).unwrap()
    }

    /// Independent statement of the floor/remainder rule, applied by hand.
    fn apportion_oracle(n: usize, fr: [f64; 3]) -> [usize; 3] {
        let quotas: Vec<f64> = fr.iter().map(|f| f * n as f64).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let mut rem: Vec<(usize, f64)> = quotas.iter().enumerate().map(|(i, q)| (i, q - q.floor())).collect();
        rem.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut left = n - counts.iter().sum::<usize>();
        let mut k = 0;
        while left > 0 {
            counts[rem[k % 3].0] += 1;
            left -= 1;
            k += 1;
        }
        [counts[0], counts[1], counts[2]]
    }

    #[test]
    fn hundred_scenes_match_the_remainder_rule() {
        let corpus = corpus_of(100);
        let split = split_corpus(&corpus, (0.8, 0.1, 0.1), 7).unwrap();
        let count = |s: Split| split.scenes().iter().filter(|e| e.split == s).count();
        let expected = apportion_oracle(100, [0.8, 0.1, 0.1]);
        assert_eq!([count(Split::Train), count(Split::Dev), count(Split::Test)], expected);
        assert_eq!(expected, [80, 10, 10]);
    }

    #[test]
    fn apportion_agrees_with_oracle_on_odd_sizes() {
        for n in [1usize, 7, 13, 99, 101] {
            for fr in [(0.5, 0.3, 0.2), (0.34, 0.33, 0.33), (1.0, 0.0, 0.0)] {
                assert_eq!(
                    apportion(n, fr),
                    apportion_oracle(n, [fr.0, fr.1, fr.2]),
                    "n={n} fr={fr:?}"
                );
            }
        }
    }

    #[test]
    fn all_train_when_fraction_is_one() {
        let split = split_corpus(&corpus_of(9), (1.0, 0.0, 0.0), 3).unwrap();
        assert!(split.scenes().iter().all(|e| e.split == Split::Train));
    }

    #[test]
    fn same_seed_gives_identical_assignment() {
        let corpus = corpus_of(37);
        let a = split_corpus(&corpus, (0.6, 0.2, 0.2), 42).unwrap();
        let b = split_corpus(&corpus, (0.6, 0.2, 0.2), 42).unwrap();
        let splits = |c: &Corpus| c.scenes().iter().map(|e| e.split).collect::<Vec<_>>();
        assert_eq!(splits(&a), splits(&b));
        let c = split_corpus(&corpus, (0.6, 0.2, 0.2), 43).unwrap();
        assert_ne!(splits(&a), splits(&c), "different seed should shuffle differently");
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let corpus = corpus_of(3);
        assert!(split_corpus(&corpus, (0.8, 0.1, 0.2), 0).is_err());
        assert!(split_corpus(&corpus, (1.2, -0.1, -0.1), 0).is_err());
    }
}

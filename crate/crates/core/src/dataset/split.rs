use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Scene;

/// Scene-level train/validation/test partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Split sizes for `n` scenes: train gets `floor(0.7 n)`, validation
/// `floor(0.15 n)`, test the remainder. Validation and test always receive at
/// least one scene, taken from the training share when needed.
pub fn split_sizes(n: usize) -> Result<(usize, usize, usize)> {
    if n < 3 {
        return Err(Error::TooFewScenes { needed: 3, got: n });
    }
    let val = (n * 15 / 100).max(1);
    let train = (n * 70 / 100).min(n - val - 1);
    Ok((train, val, n - train - val))
}

/// Shuffles scene ids with `seed` and partitions them 70/15/15.
pub fn split_scenes(scenes: &[Scene], seed: u64) -> Result<DatasetSplit> {
    let (n_train, n_val, _) = split_sizes(scenes.len())?;
    let mut ids: Vec<String> = scenes.iter().map(|s| s.scene_id.clone()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(DatasetSplit {
        train: ids,
        val,
        test,
        seed,
    })
}

impl DatasetSplit {
    /// Scenes whose ids are listed in `ids`, in the order of `scenes`.
    pub fn select<'a>(scenes: &'a [Scene], ids: &[String]) -> Vec<&'a Scene> {
        let wanted: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
        scenes.iter().filter(|s| wanted.contains(s.scene_id.as_str())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::tests::static_track;
    use crate::scene::DEFAULT_DT;
    use std::collections::HashSet;

    fn scenes(n: usize) -> Vec<Scene> {
        (0..n)
            .map(|i| Scene::new(format!("s{i}"), vec![static_track("a", [0.0, 0.0], 0..2, 2)], vec!["a".into(), "b".into()], DEFAULT_DT).unwrap())
            .collect()
    }

    #[test]
    fn hundred_scenes_split_70_15_15() {
        let s = split_scenes(&scenes(100), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
    }

    #[test]
    fn ten_scenes_rounding() {
        let s = split_scenes(&scenes(10), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
    }

    #[test]
    fn small_splits_stay_nonempty() {
        assert_eq!(split_sizes(3).unwrap(), (1, 1, 1));
        assert_eq!(split_sizes(4).unwrap(), (2, 1, 1));
        assert!(matches!(split_sizes(2), Err(Error::TooFewScenes { .. })));
    }

    #[test]
    fn split_is_deterministic_partition() {
        let all = scenes(37);
        let a = split_scenes(&all, 5).unwrap();
        assert_eq!(a, split_scenes(&all, 5).unwrap());
        assert_ne!(a, split_scenes(&all, 6).unwrap());
        let mut union: HashSet<&String> = HashSet::new();
        for id in a.train.iter().chain(&a.val).chain(&a.test) {
            assert!(union.insert(id), "duplicate {id}");
        }
        assert_eq!(union.len(), 37);
    }
}

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::ObjectiveError;
use crate::model::EOS_ID;
use crate::seed;
use crate::text::NUM_SENTINELS;

/// Id of the first sentinel; sentinels occupy a contiguous block after the
/// reserved tokens.
const FIRST_SENTINEL: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlmConfig {
    pub mask_rate: f64,
    pub min_masks: usize,
}

impl Default for MlmConfig {
    fn default() -> Self {
        MlmConfig { mask_rate: 0.15, min_masks: 1 }
    }
}

impl MlmConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(ObjectiveError::InvalidConfig(format!("mask_rate must be in (0, 1), got {}", self.mask_rate)));
        }
        Ok(())
    }
}

/// Number of masked positions for a sequence of `n` tokens: the rate times
/// `n` rounded half up, but at least `min_masks`.
pub fn mask_count(n: usize, cfg: &MlmConfig) -> usize {
    // The small epsilon keeps exact halves such as 0.15 * 10 from rounding
    // down through binary representation error.
    let m = (cfg.mask_rate * n as f64 + 0.5 + 1e-9).floor() as usize;
    m.max(cfg.min_masks)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmPair {
    /// Input ids with masked positions replaced by sentinels.
    pub input: Vec<u32>,
    /// Sentinel, original token, sentinel, original token, ..., EOS.
    pub target: Vec<u32>,
}

pub fn mask_for_mlm(ids: &[u32], cfg: &MlmConfig, rng_seed: u64) -> Result<MlmPair, ObjectiveError> {
    cfg.validate()?;
    let n = ids.len();
    let m = mask_count(n, cfg);
    if m >= n {
        return Err(ObjectiveError::TooShort { n, masks: m });
    }
    if m > NUM_SENTINELS {
        return Err(ObjectiveError::TooManyMasks { masks: m, available: NUM_SENTINELS });
    }
    let mut rng = seed::rng(rng_seed, &[seed::tag("mlm")]);
    let mut positions = index::sample(&mut rng, n, m).into_vec();
    positions.sort_unstable();
    let mut input = ids.to_vec();
    let mut target = Vec::with_capacity(2 * m + 1);
    for (k, &p) in positions.iter().enumerate() {
        let sentinel = FIRST_SENTINEL + k as u32;
        target.push(sentinel);
        target.push(ids[p]);
        input[p] = sentinel;
    }
    target.push(EOS_ID);
    Ok(MlmPair { input, target })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counts_for_default_rate() {
        let cfg = MlmConfig::default();
        assert_eq!(mask_count(20, &cfg), 3);
        assert_eq!(mask_count(7, &cfg), 1);
        // 1.5 rounds up.
        assert_eq!(mask_count(10, &cfg), 2);
    }

    #[test]
    fn count_matches_integer_formula_over_sweep() {
        let cfg = MlmConfig::default();
        for n in 1..=200usize {
            let expected = ((15 * n + 50) / 100).max(1);
            assert_eq!(mask_count(n, &cfg), expected, "n={n}");
        }
    }

    #[test]
    fn too_short_is_an_error() {
        let cfg = MlmConfig::default();
        assert_eq!(mask_for_mlm(&[40], &cfg, 0), Err(ObjectiveError::TooShort { n: 1, masks: 1 }));
    }

    fn splice(pair: &MlmPair) -> Vec<u32> {
        let fill: std::collections::HashMap<u32, u32> =
            pair.target.chunks(2).filter(|c| c.len() == 2).map(|c| (c[0], c[1])).collect();
        pair.input.iter().map(|t| *fill.get(t).unwrap_or(t)).collect()
    }

    proptest! {
        #[test]
        fn splicing_recovers_original(ids in prop::collection::vec(40u32..100, 2..120), seed in any::<u64>()) {
            let cfg = MlmConfig::default();
            let pair = mask_for_mlm(&ids, &cfg, seed).unwrap();
            let m = mask_count(ids.len(), &cfg);
            prop_assert_eq!(pair.target.len(), 2 * m + 1);
            prop_assert_eq!(*pair.target.last().unwrap(), EOS_ID);
            let sentinels: Vec<u32> = pair.input.iter().copied().filter(|&t| t < 40).collect();
            prop_assert_eq!(sentinels, (0..m as u32).map(|k| FIRST_SENTINEL + k).collect::<Vec<_>>());
            prop_assert_eq!(splice(&pair), ids.clone());
            prop_assert_eq!(mask_for_mlm(&ids, &cfg, seed).unwrap(), pair);
        }
    }
}

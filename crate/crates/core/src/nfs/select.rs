use serde::{Deserialize, Serialize};

use super::NfsModule;
use crate::error::{Error, Result};

/// One non-negative score per input stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub scores: Vec<f64>,
    /// Raw BN scales the scores were computed from.
    pub alpha: Vec<f64>,
}

impl ImportanceScores {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        ImportanceScores { scores, alpha: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Stream indices ordered by descending score, ties by lower index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        order
    }

    pub fn mean_over(&self, streams: &[usize]) -> f64 {
        streams.iter().map(|&j| self.scores[j]).sum::<f64>() / streams.len() as f64
    }
}

/// Mean `|α|` over each stream's BN channels.
pub fn stream_scores(module: &NfsModule) -> ImportanceScores {
    let alpha = module.bn_scale().data();
    let k = module.config().channels_per_stream();
    let scores = alpha.chunks_exact(k).map(|c| c.iter().map(|a| a.abs()).sum::<f64>() / k as f64).collect();
    ImportanceScores { scores, alpha: alpha.to_vec() }
}

/// Kept stream indices, ascending.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureMask {
    indices: Vec<usize>,
    streams: usize,
}

impl FeatureMask {
    pub fn new(mut indices: Vec<usize>, streams: usize) -> Result<Self> {
        indices.sort_unstable();
        let before = indices.len();
        indices.dedup();
        if indices.len() != before {
            return Err(Error::Config("feature mask has duplicate indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&j| j >= streams) {
            return Err(Error::Config(format!("feature index {bad} out of range for {streams} streams")));
        }
        Ok(FeatureMask { indices, streams })
    }

    pub fn all(streams: usize) -> Self {
        FeatureMask { indices: (0..streams).collect(), streams }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Stream count of the module the mask was taken from.
    pub fn streams(&self) -> usize {
        self.streams
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, stream: usize) -> bool {
        self.indices.binary_search(&stream).is_ok()
    }

    pub fn keep_flags(&self) -> Vec<bool> {
        (0..self.streams).map(|j| self.contains(j)).collect()
    }
}

/// The `k_selected` highest-scoring streams; ties go to the lower index.
pub fn select_top_k(scores: &ImportanceScores, k_selected: usize) -> Result<FeatureMask> {
    let d = scores.len();
    if k_selected == 0 || k_selected > d {
        return Err(Error::Config(format!("k_selected = {k_selected} must lie in [1, {d}]")));
    }
    let mut top = scores.ranking();
    top.truncate(k_selected);
    FeatureMask::new(top, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nfs::{NfsConfig, NfsModule};
    use proptest::prelude::*;

    fn top(s: &[f64], k: usize) -> Vec<usize> {
        select_top_k(&ImportanceScores::from_scores(s.to_vec()), k).unwrap().indices().to_vec()
    }

    #[test]
    fn fresh_module_scores_are_one() {
        let m = NfsModule::build(NfsConfig::with_streams(5), 0).unwrap();
        assert_eq!(stream_scores(&m).scores, vec![1.0; 5]);
    }

    #[test]
    fn scores_use_magnitudes() {
        let mut m = NfsModule::build(NfsConfig::with_streams(3), 0).unwrap();
        m.bn_scale_mut().data_mut()[..4].copy_from_slice(&[2.0, -2.0, 2.0, -2.0]);
        assert_eq!(stream_scores(&m).scores[0], 2.0);
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top(&[0.5, 0.01, 0.3], 2), vec![0, 2]);
        assert_eq!(top(&[0.5, 0.01, 0.3], 3), vec![0, 1, 2]);
        assert_eq!(top(&[0.9, 0.4, 0.1, 0.2, 0.4], 2), vec![0, 1]);
    }

    #[test]
    fn top_k_range_checked() {
        let s = ImportanceScores::from_scores(vec![1.0, 2.0]);
        assert!(select_top_k(&s, 0).is_err());
        assert!(select_top_k(&s, 3).is_err());
    }

    #[test]
    fn mask_validation() {
        assert!(FeatureMask::new(vec![1, 1], 3).is_err());
        assert!(FeatureMask::new(vec![3], 3).is_err());
        assert_eq!(FeatureMask::new(vec![2, 0], 3).unwrap().indices(), &[0, 2]);
        assert_eq!(FeatureMask::new(vec![2, 0], 3).unwrap().keep_flags(), vec![true, false, true]);
    }

    proptest! {
        #[test]
        fn top_k_invariant_under_increasing_maps(
            s in prop::collection::vec(0.0f64..10.0, 1..20),
            c in 0.01f64..100.0,
            k_frac in 0.0f64..1.0,
        ) {
            let k = 1 + ((s.len() - 1) as f64 * k_frac) as usize;
            let base = top(&s, k);
            let scaled: Vec<f64> = s.iter().map(|v| c * v).collect();
            let warped: Vec<f64> = s.iter().map(|v| (v + 1.0).ln() * 3.0 + v.powi(3)).collect();
            prop_assert_eq!(&top(&scaled, k), &base);
            prop_assert_eq!(&top(&warped, k), &base);
            prop_assert_eq!(base.len(), k);
            prop_assert!(base.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn scores_are_nonnegative_and_permutation_equivariant(
            alpha in prop::collection::vec(-3.0f64..3.0, 24),
            perm_seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let d = 6;
            let mut m = NfsModule::build(NfsConfig::with_streams(d), 0).unwrap();
            m.bn_scale_mut().data_mut().copy_from_slice(&alpha);
            let s = stream_scores(&m).scores;
            prop_assert!(s.iter().all(|&v| v >= 0.0));

            let mut perm: Vec<usize> = (0..d).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            let permuted: Vec<f64> = perm.iter().flat_map(|&j| alpha[4 * j..4 * j + 4].to_vec()).collect();
            m.bn_scale_mut().data_mut().copy_from_slice(&permuted);
            let sp = stream_scores(&m).scores;
            for (i, &j) in perm.iter().enumerate() {
                prop_assert_eq!(sp[i], s[j]);
            }
        }
    }
}

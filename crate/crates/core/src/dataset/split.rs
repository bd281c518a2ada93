use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.75,
            val: 0.15,
            test: 0.10,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios {self:?} must be in [0,1] and sum to 1")));
        }
        Ok(())
    }

    /// `(train, val, test)` counts for `n` instances: validation and test
    /// sizes are floored, the remainder goes to training.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let floor = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
        let val = floor(self.val);
        let test = floor(self.test);
        (n - val - test, val, test)
    }
}

/// Deterministic, category-stratified split.
///
/// Categories with fewer than three instances go entirely to training; the
/// returned warnings name them.
pub fn split_corpus(corpus: &Corpus, ratios: SplitRatios, seed: u64) -> Result<(Corpus, Vec<String>)> {
    ratios.validate()?;
    let mut by_category: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, inst) in corpus.instances.iter().enumerate() {
        by_category.entry(inst.category_id).or_default().push(i);
    }
    let mut out = corpus.clone();
    out.splits = vec![None; corpus.instances.len()];
    let mut warnings = Vec::new();
    for (category, mut idx) in by_category {
        if idx.len() < 3 {
            warnings.push(format!(
                "category {category} has {} instances; all assigned to train",
                idx.len()
            ));
            for i in idx {
                out.splits[i] = Some(Split::Train);
            }
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (category as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        idx.shuffle(&mut rng);
        let (train, val, _) = ratios.counts(idx.len());
        for (pos, i) in idx.into_iter().enumerate() {
            out.splits[i] = Some(if pos < train {
                Split::Train
            } else if pos < train + val {
                Split::Val
            } else {
                Split::Test
            });
        }
    }
    Ok((out, warnings))
}

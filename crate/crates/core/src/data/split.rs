use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream, streams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split ratios {r:?} must be in [0,1] and sum to 1"
            )));
        }
        Ok(())
    }
}

/// Sample ids per split, each sorted ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Ids of `part` whose class is in `classes`.
    pub fn restrict(part: &[usize], dataset: &Dataset, classes: &[usize]) -> Vec<usize> {
        part.iter()
            .copied()
            .filter(|&i| classes.contains(&dataset.samples()[i].class_id))
            .collect()
    }
}

/// Stratified per-class split. Train and val counts are `round(ratio * n)`; test takes the rest.
pub fn split_train_val_test(dataset: &Dataset, ratios: SplitRatios, seed: u64) -> Result<Splits> {
    ratios.validate()?;
    let mut rng = stream(seed, streams::SPLIT);
    let mut out = Splits::default();
    for (class, mut ids) in dataset.ids_by_class() {
        let n = ids.len();
        if n < 3 {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {n} samples; at least 3 are needed"
            )));
        }
        ids.shuffle(&mut rng);
        let n_train = ((n as f64 * ratios.train).round() as usize).min(n);
        let n_val = ((n as f64 * ratios.val).round() as usize).min(n - n_train);
        out.train.extend_from_slice(&ids[..n_train]);
        out.val.extend_from_slice(&ids[n_train..n_train + n_val]);
        out.test.extend_from_slice(&ids[n_train + n_val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    #[default]
    Random,
    Herding,
}

/// Retained training-sample ids per class. Classes are added once, never revisited,
/// and there is no total-size budget.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExemplarStore {
    per_class: BTreeMap<usize, Vec<usize>>,
}

impl ExemplarStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_class.keys().copied()
    }

    pub fn class(&self, class_id: usize) -> Option<&[usize]> {
        self.per_class.get(&class_id).map(Vec::as_slice)
    }

    /// Every stored id, grouped by ascending class.
    pub fn ids(&self) -> Vec<usize> {
        self.per_class.values().flatten().copied().collect()
    }

    fn check(&self, candidates: &BTreeMap<usize, Vec<usize>>, quota: usize) -> Result<()> {
        for (c, ids) in candidates {
            if self.per_class.contains_key(c) {
                return Err(Error::InvalidArgument(format!("class {c} already has exemplars")));
            }
            if quota > ids.len() {
                return Err(Error::InvalidArgument(format!(
                    "quota {quota} exceeds the {} training samples of class {c}",
                    ids.len()
                )));
            }
        }
        Ok(())
    }

    /// Uniform sampling without replacement, `quota` per new class.
    pub fn select_random(
        &mut self,
        candidates: &BTreeMap<usize, Vec<usize>>,
        quota: usize,
        rng: &mut Rng,
    ) -> Result<()> {
        self.check(candidates, quota)?;
        if quota == 0 {
            return Ok(());
        }
        for (&c, ids) in candidates {
            let mut chosen: Vec<usize> = rand::seq::index::sample(rng, ids.len(), quota)
                .into_iter()
                .map(|i| ids[i])
                .collect();
            chosen.sort_unstable();
            self.per_class.insert(c, chosen);
        }
        Ok(())
    }

    /// Herding on the feature vectors returned by `features` for each class's candidates.
    pub fn select_herding(
        &mut self,
        candidates: &BTreeMap<usize, Vec<usize>>,
        quota: usize,
        mut features: impl FnMut(&[usize]) -> Result<Vec<Vec<f64>>>,
    ) -> Result<()> {
        self.check(candidates, quota)?;
        if quota == 0 {
            return Ok(());
        }
        for (&c, ids) in candidates {
            let f = features(ids)?;
            let picked = herding_select(&f, quota)?;
            self.per_class.insert(c, picked.into_iter().map(|i| ids[i]).collect());
        }
        Ok(())
    }
}

/// Greedy herding: at step `t` take the unselected row that brings the mean of the
/// selection closest (L2) to the mean of all rows. Ties go to the lower index.
/// Returns row positions in selection order.
pub fn herding_select(features: &[Vec<f64>], quota: usize) -> Result<Vec<usize>> {
    if quota > features.len() {
        return Err(Error::InvalidArgument(format!(
            "quota {quota} exceeds {} candidates",
            features.len()
        )));
    }
    let Some(dim) = features.first().map(Vec::len) else {
        return Ok(Vec::new());
    };
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape("herding features of unequal length".into()));
    }
    let n = features.len() as f64;
    let mut target = vec![0.0; dim];
    for f in features {
        for (t, v) in target.iter_mut().zip(f) {
            *t += v / n;
        }
    }
    let mut sum = vec![0.0; dim];
    let mut taken = vec![false; features.len()];
    let mut out = Vec::with_capacity(quota);
    for step in 1..=quota {
        let k = step as f64;
        let mut best: Option<(f64, usize)> = None;
        for (i, f) in features.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d: f64 = target
                .iter()
                .zip(&sum)
                .zip(f)
                .map(|((t, s), v)| (t - (s + v) / k).powi(2))
                .sum();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        let (_, i) = best.expect("quota <= candidates");
        taken[i] = true;
        for (s, v) in sum.iter_mut().zip(&features[i]) {
            *s += v;
        }
        out.push(i);
    }
    Ok(out)
}

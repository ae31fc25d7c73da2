//! Confusion matrices and support-weighted classification scores.

use serde::Serialize;

use crate::error::{Error, Result};

/// Row = true class, column = predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

pub fn confusion(pred: &[usize], truth: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut counts = vec![0u64; classes * classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::InvalidArgument(format!(
                "label pair ({t}, {p}) outside 0..{classes}"
            )));
        }
        counts[t * classes + p] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Support-weighted averages over classes that occur in the truth labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Scores {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
}

impl ConfusionMatrix {
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Shape(format!("{} counts for {classes} classes", counts.len())));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.counts.chunks(self.classes.max(1))
    }

    pub fn per_class(&self) -> Vec<ClassScore> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c) as f64;
                let support: u64 = (0..k).map(|p| self.get(c, p)).sum();
                let predicted: u64 = (0..k).map(|t| self.get(t, c)).sum();
                let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
                let recall = if support > 0 { tp / support as f64 } else { 0.0 };
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassScore {
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect()
    }

    pub fn scores(&self) -> Result<Scores> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Empty("confusion matrix".into()));
        }
        let n = total as f64;
        let mut s = Scores {
            f1: 0.0,
            precision: 0.0,
            recall: 0.0,
            accuracy: (0..self.classes).map(|c| self.get(c, c)).sum::<u64>() as f64 / n,
        };
        for c in self.per_class() {
            let w = c.support as f64 / n;
            s.f1 += w * c.f1;
            s.precision += w * c.precision;
            s.recall += w * c.recall;
        }
        Ok(s)
    }

    pub fn weighted_f1(&self) -> Result<f64> {
        Ok(self.scores()?.f1)
    }

    /// CSV body: header `true\pred,0,1,...` then one row per true class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for c in 0..self.classes {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for (t, row) in self.rows().enumerate() {
            out.push_str(&t.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    #[test]
    fn hand_example() {
        let cm = confusion(&[0, 1, 1], &[0, 1, 0], 2).unwrap();
        assert_eq!(cm.rows().collect::<Vec<_>>(), vec![&[1, 1][..], &[0, 1][..]]);
        let pc = cm.per_class();
        assert_eq!((pc[0].precision, pc[0].recall), (1.0, 0.5));
        assert_eq!((pc[1].precision, pc[1].recall), (0.5, 1.0));
        assert!((cm.weighted_f1().unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let y = [0, 2, 1, 2, 0];
        let cm = confusion(&y, &y, 3).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.get(t, p) > 0, t == p);
            }
        }
        assert_eq!(cm.weighted_f1().unwrap(), 1.0);
    }

    #[test]
    fn errors() {
        assert!(confusion(&[0], &[0, 1], 2).is_err());
        assert!(confusion(&[2], &[0], 2).is_err());
        assert!(confusion(&[], &[], 2).unwrap().weighted_f1().is_err());
    }

    /// Weighted F1 straight from label vectors, without a confusion matrix.
    fn f1_from_labels(pred: &[usize], truth: &[usize]) -> f64 {
        let classes: BTreeSet<usize> = truth.iter().copied().collect();
        let n = truth.len() as f64;
        classes
            .into_iter()
            .map(|c| {
                let tp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count() as f64;
                let fp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t != c).count() as f64;
                let fn_ = pred.iter().zip(truth).filter(|&(&p, &t)| p != c && t == c).count() as f64;
                let f1 = if tp == 0.0 {
                    0.0
                } else {
                    2.0 * tp / (2.0 * tp + fp + fn_)
                };
                (tp + fn_) / n * f1
            })
            .sum()
    }

    #[test]
    fn agrees_with_label_oracle() {
        let mut rng = crate::rng::stream(5, "metrics");
        for _ in 0..1000 {
            let k = rng.random_range(2..8);
            let n = rng.random_range(1..60);
            let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let got = confusion(&pred, &truth, k).unwrap().weighted_f1().unwrap();
            assert!((got - f1_from_labels(&pred, &truth)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn conservation_range_and_permutation(
            pairs in prop::collection::vec((0usize..5, 0usize..5), 1..80),
            perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let (pred, truth): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let cm = confusion(&pred, &truth, 5).unwrap();
            prop_assert_eq!(cm.total() as usize, pairs.len());
            let f = cm.weighted_f1().unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert_eq!(f == 1.0, pred == truth);
            let pp: Vec<usize> = pred.iter().map(|&c| perm[c]).collect();
            let pt: Vec<usize> = truth.iter().map(|&c| perm[c]).collect();
            let g = confusion(&pp, &pt, 5).unwrap().weighted_f1().unwrap();
            prop_assert!((f - g).abs() < 1e-12);
        }
    }
}

//! Spectra, class-incremental task layout, stratified splits and exemplar memory.

mod csv_io;
mod exemplars;
mod split;
mod synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use csv_io::{load_csv, write_csv};
pub use exemplars::{herding_select, ExemplarStore, SelectionMode};
pub use split::{split_train_val_test, SplitRatios, Splits};
pub use synthetic::{default_class_counts, generate_synthetic, SyntheticConfig, CLASS_COUNTS};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub spectrum: Vec<f64>,
    pub class_id: usize,
}

/// An immutable collection of equal-length spectra. Sample ids are positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    bands: usize,
    num_classes: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(bands: usize, num_classes: usize, samples: Vec<Sample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.spectrum.len() != bands {
                return Err(Error::Shape(format!(
                    "sample {i} has {} bands, expected {bands}",
                    s.spectrum.len()
                )));
            }
            if s.class_id >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} has class {} outside 0..{num_classes}",
                    s.class_id
                )));
            }
        }
        Ok(Self {
            bands,
            num_classes,
            samples,
        })
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample ids per class, ascending.
    pub fn ids_by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            m.entry(s.class_id).or_default().push(i);
        }
        m
    }

    /// Stacks the given samples into a `[n, 1, bands]` tensor.
    pub fn tensor<T: Scalar>(&self, ids: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(ids.len() * self.bands);
        for &i in ids {
            data.extend(self.samples[i].spectrum.iter().map(|&v| T::from_f64_lossy(v)));
        }
        Tensor::new(vec![ids.len(), 1, self.bands], data).expect("bands are uniform")
    }

    pub fn labels(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().map(|&i| self.samples[i].class_id).collect()
    }

    /// Copy with every spectrum SNV-normalized.
    pub fn snv(&self) -> Result<Self> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(Sample {
                    spectrum: snv_normalize(&s.spectrum)?,
                    class_id: s.class_id,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { samples, ..*self })
    }
}

/// Standard normal variate: `(x - mean) / std` with the population std.
pub fn snv_normalize(spectrum: &[f64]) -> Result<Vec<f64>> {
    if spectrum.is_empty() {
        return Err(Error::Empty("spectrum".into()));
    }
    let n = spectrum.len() as f64;
    let mean = spectrum.iter().sum::<f64>() / n;
    let var = spectrum.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= f64::EPSILON * mean.abs().max(1.0) {
        return Err(Error::InvalidArgument(
            "constant spectrum has zero standard deviation".into(),
        ));
    }
    Ok(spectrum.iter().map(|v| (v - mean) / std).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub classes: Vec<usize>,
}

/// Ordered disjoint class groups. Head output index of a class is its position in
/// the concatenated task order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    head_index: BTreeMap<usize, usize>,
}

impl TaskStream {
    pub fn new(tasks: Vec<Task>) -> Result<Self> {
        let mut head_index = BTreeMap::new();
        for c in tasks.iter().flat_map(|t| &t.classes) {
            let next = head_index.len();
            if head_index.insert(*c, next).is_some() {
                return Err(Error::InvalidArgument(format!("class {c} appears in two tasks")));
            }
        }
        if tasks.iter().any(|t| t.classes.is_empty()) {
            return Err(Error::InvalidArgument("task without classes".into()));
        }
        Ok(Self { tasks, head_index })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn head_index(&self, class_id: usize) -> Option<usize> {
        self.head_index.get(&class_id).copied()
    }

    /// Classes of tasks `0..=task`.
    pub fn seen_classes(&self, task: usize) -> Vec<usize> {
        self.tasks[..=task]
            .iter()
            .flat_map(|t| t.classes.iter().copied())
            .collect()
    }

    pub fn seen_count(&self, task: usize) -> usize {
        self.tasks[..=task].iter().map(|t| t.classes.len()).sum()
    }
}

/// Groups the classes present in `dataset`, in ascending id order, `per_task` at a time.
/// The last task may be smaller.
pub fn split_tasks(dataset: &Dataset, per_task: usize) -> Result<TaskStream> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset".into()));
    }
    if per_task == 0 {
        return Err(Error::InvalidArgument("classes_per_task must be positive".into()));
    }
    let classes: Vec<usize> = dataset.ids_by_class().into_keys().collect();
    TaskStream::new(classes.chunks(per_task).map(|c| Task { classes: c.to_vec() }).collect())
}

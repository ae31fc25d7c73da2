use std::collections::BTreeMap;

use crate::autograd::{Gradients, Graph};
use crate::error::{Error, Result};
use crate::nn::{ForwardOptions, Model};
use crate::tensor::{Scalar, Tensor};

/// Anchor parameters and their importance, both keyed by parameter name.
///
/// Parameters can grow after the snapshot (a wider head): only the row-major prefix
/// covered by the snapshot is penalized, which for `[out, in]` head weights is exactly
/// the rows that existed when it was taken.
#[derive(Clone, Debug, PartialEq)]
pub struct EwcState<T> {
    pub theta_ref: BTreeMap<String, Vec<T>>,
    pub omega: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> EwcState<T> {
    pub fn snapshot(model: &Model<T>, omega: BTreeMap<String, Vec<T>>) -> Result<Self> {
        let theta_ref: BTreeMap<String, Vec<T>> = model
            .params()
            .into_iter()
            .map(|(n, p)| (n, p.value.data().to_vec()))
            .collect();
        for (n, o) in &omega {
            match theta_ref.get(n) {
                Some(t) if t.len() == o.len() => {}
                _ => {
                    return Err(Error::Shape(format!(
                        "importance for `{n}` does not match the snapshot"
                    )))
                }
            }
        }
        Ok(Self { theta_ref, omega })
    }

    fn pairs<'m>(&'m self, model: &'m Model<T>) -> Result<Vec<(String, &'m [T], &'m [T], &'m [T])>> {
        let mut out = Vec::new();
        for (name, p) in model.params() {
            let (Some(r), Some(o)) = (self.theta_ref.get(&name), self.omega.get(&name)) else {
                continue;
            };
            if r.len() > p.value.len() {
                return Err(Error::Shape(format!(
                    "`{name}` shrank from {} to {} values since the snapshot",
                    r.len(),
                    p.value.len()
                )));
            }
            out.push((name, &p.value.data()[..r.len()], r.as_slice(), o.as_slice()));
        }
        Ok(out)
    }

    /// `(λ/2) Σ Ω (θ - θ_ref)²`.
    pub fn penalty(&self, model: &Model<T>, lambda: f64) -> Result<f64> {
        let mut total = 0.0;
        for (_, theta, r, o) in self.pairs(model)? {
            for ((t, r), o) in theta.iter().zip(r).zip(o) {
                total += o.as_f64() * (t.as_f64() - r.as_f64()).powi(2);
            }
        }
        Ok(0.5 * lambda * total)
    }

    /// Adds `λ Ω (θ - θ_ref)` to the gradients of unfrozen parameters.
    pub fn add_penalty_grad(&self, model: &Model<T>, grads: &mut Gradients<T>, lambda: f64) -> Result<()> {
        let lam = T::from_f64_lossy(lambda);
        let frozen: Vec<String> = model
            .params()
            .into_iter()
            .filter(|(_, p)| p.frozen)
            .map(|(n, _)| n)
            .collect();
        let shapes: BTreeMap<String, Vec<usize>> = model
            .params()
            .into_iter()
            .map(|(n, p)| (n, p.value.shape().to_vec()))
            .collect();
        for (name, theta, r, o) in self.pairs(model)? {
            if frozen.contains(&name) {
                continue;
            }
            let g = grads
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(shapes[&name].clone()));
            for (i, gv) in g.data_mut()[..r.len()].iter_mut().enumerate() {
                *gv += lam * o[i] * (theta[i] - r[i]);
            }
        }
        Ok(())
    }
}

/// Empirical Fisher diagonal: mean over samples of the squared gradient of
/// `-log p(y | x)`, evaluated with batchnorm running statistics.
pub fn estimate_fisher<T: Scalar>(model: &Model<T>, x: &Tensor<T>, y: &[usize]) -> Result<BTreeMap<String, Vec<T>>> {
    let s = x.shape();
    if s.len() != 3 || s[0] != y.len() {
        return Err(Error::Shape(format!("fisher inputs {s:?} with {} labels", y.len())));
    }
    if y.is_empty() {
        return Err(Error::Empty("fisher data".into()));
    }
    let per = s[1] * s[2];
    let opts = ForwardOptions {
        train: false,
        track_grad: true,
        record_activity: false,
    };
    let mut acc: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for (i, &label) in y.iter().enumerate() {
        let xi = Tensor::new(vec![1, s[1], s[2]], x.data()[i * per..(i + 1) * per].to_vec())?;
        let mut g = Graph::new();
        let xv = g.input(xi);
        let trace = model.forward(&mut g, xv, opts)?;
        let loss = g.cross_entropy(trace.logits, &[label])?;
        for (name, grad) in g.backward(loss)? {
            let a = acc.entry(name).or_insert_with(|| vec![T::zero(); grad.len()]);
            for (a, &v) in a.iter_mut().zip(grad.data()) {
                *a += v * v;
            }
        }
    }
    let n = T::from_usize(y.len()).unwrap();
    for v in acc.values_mut() {
        v.iter_mut().for_each(|a| *a = *a / n);
    }
    Ok(acc)
}

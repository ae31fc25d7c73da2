use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::kernels::{leading_columns, softmax_rows};
use crate::tensor::{Scalar, Tensor};

/// Teacher distribution over the first `cols` logits, softened by `temperature`.
pub fn soft_targets<T: Scalar>(teacher_logits: &[T], width: usize, cols: usize, temperature: T) -> Vec<T> {
    softmax_rows(&leading_columns(teacher_logits, width, cols), cols, temperature)
}

/// Batch-mean `-Σ_k p_k log q_k` over the first `cols` classes, where `p` and `q` are the
/// temperature-softened teacher and student distributions.
pub fn distill_loss<T: Scalar>(student: &Tensor<T>, teacher: &Tensor<T>, cols: usize, temperature: T) -> Result<T> {
    if !(temperature > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let (ss, ts) = (student.shape(), teacher.shape());
    if ss.len() != 2 || ts.len() != 2 || ss[0] != ts[0] || cols > ss[1] || cols > ts[1] {
        return Err(Error::Shape(format!(
            "distill student {ss:?} teacher {ts:?} over {cols} classes"
        )));
    }
    let p = soft_targets(teacher.data(), ts[1], cols, temperature);
    let mut g = Graph::new();
    let z = g.input(student.clone());
    let loss = g.soft_cross_entropy(z, p, cols, temperature)?;
    Ok(g.value(loss).data()[0])
}

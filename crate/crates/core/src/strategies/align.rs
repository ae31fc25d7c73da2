use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::Scalar;

fn mean_row_norm<T: Scalar>(w: &[T], cols: usize, rows: std::ops::Range<usize>) -> f64 {
    let n = rows.len() as f64;
    rows.map(|r| {
        w[r * cols..(r + 1) * cols]
            .iter()
            .map(|v| v.as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    })
    .sum::<f64>()
        / n
}

/// Scales the first `old` head rows by `mean‖W_new‖ / mean‖W_old‖` (per-row L2 norms),
/// so both groups end with the same mean row norm. Biases are left alone.
/// Returns the factor applied.
pub fn weight_align<T: Scalar>(head: &mut Linear<T>, old: usize, new: usize) -> Result<f64> {
    let (rows, cols) = (head.out_features(), head.in_features());
    if old == 0 || new == 0 || old + new != rows {
        return Err(Error::InvalidArgument(format!(
            "alignment needs old + new = {rows} rows with both positive, got {old} + {new}"
        )));
    }
    let w = head.weight.value.data_mut();
    let old_norm = mean_row_norm(w, cols, 0..old);
    let new_norm = mean_row_norm(w, cols, old..rows);
    if new_norm == 0.0 || old_norm == 0.0 {
        return Err(Error::InvalidArgument("alignment with a zero mean row norm".into()));
    }
    let gamma = new_norm / old_norm;
    let g = T::from_f64_lossy(gamma);
    w[..old * cols].iter_mut().for_each(|v| *v *= g);
    Ok(gamma)
}

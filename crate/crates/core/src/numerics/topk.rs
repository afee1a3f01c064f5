use std::cmp::Ordering;

use super::matrix::Real;
use crate::error::{invalid, Result};

/// Ranking order: larger value first, lower index breaks ties.
#[inline]
fn rank_order<T: Real>(v: &[T], a: usize, b: usize) -> Ordering {
    v[b].as_f64()
        .total_cmp(&v[a].as_f64())
        .then_with(|| a.cmp(&b))
}

/// Indices of the `k` largest entries of `v`, in ascending index order.
pub fn topk_indices<T: Real>(v: &[T], k: usize) -> Result<Vec<usize>> {
    if k > v.len() {
        return Err(invalid(format!("topk: k = {k} exceeds length {}", v.len())));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    if k < v.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(v, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable();
    Ok(idx)
}

/// Keeps the `k` largest entries of `v` (ties to the lowest index) and zeroes
/// the rest.
pub fn topk<T: Real>(v: &[T], k: usize) -> Result<Vec<T>> {
    let keep = topk_indices(v, k)?;
    let mut out = vec![T::zero(); v.len()];
    for i in keep {
        out[i] = v[i];
    }
    Ok(out)
}

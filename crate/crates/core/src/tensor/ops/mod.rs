mod conv;
mod elementwise;
mod linalg;
mod norm;
mod shape;
mod softmax;

pub use norm::BatchStats;
pub use elementwise::sigmoid;
pub use softmax::log_softmax_row;

use crate::prelude::*;

#[inline]
pub(crate) fn some_if<T>(need: bool, f: impl FnOnce() -> T) -> Option<T> {
    if need {
        Some(f())
    } else {
        None
    }
}

/// Splits a shape into `(rows, last)`.
pub(crate) fn rows_last(shape: &[usize]) -> (usize, usize) {
    let last = shape.last().copied().unwrap_or(1);
    let rows = if last == 0 { 0 } else { shape.iter().product::<usize>() / last };
    (rows, last)
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

//! Dense `f64` tensors and a recording tape for reverse-mode gradients.

mod check;
mod params;
mod sparse;
mod tape;
mod tensor;

use std::sync::Arc;

use rand::Rng;

pub use check::grad_check;
pub use params::{ParamId, ParamStore};
pub use sparse::CsrMatrix;
pub use tape::{sign, Gradients, Tape, Unary, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

pub(crate) use tape::softmax_in_place;

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else `1/(1−rate)`.
pub fn dropout_mask<R: Rng>(len: usize, rate: f64, rng: &mut R) -> Arc<Vec<f64>> {
    let keep = 1.0 - rate;
    let mask = (0..len)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Arc::new(mask)
}

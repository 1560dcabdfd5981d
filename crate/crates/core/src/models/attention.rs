//! Multi-head attention decoder over recurrent cell states.
//!
//! Head `k` scores each time step by `o_lastᵀ · tanh(W_a · s_t^k + b_a)`
//! where `s_t^k` is that head's slice of the cell state; a softmax over
//! time turns scores into weights and the weighted state sum becomes the
//! head context. The contexts plus the final output form a `2D` feature.

use crate::autodiff::{concat, Tensor};
use crate::models::{linear_head, Ctx};
use crate::scalar::Scalar;

pub struct MhaOutput<T: Scalar> {
    /// `(B, 2D)`: head contexts then the query vector.
    pub feature: Tensor<T>,
    /// Per head, the `(B, T)` attention weights.
    pub attention: Vec<Tensor<T>>,
}

/// Attend over `states` `(B, T, D)` with query `o_last` `(B, D)` split
/// into `heads` slices.
pub fn mha_attend<T: Scalar>(
    ctx: &Ctx<'_, T>,
    prefix: &str,
    states: &Tensor<T>,
    o_last: &Tensor<T>,
    heads: usize,
) -> MhaOutput<T> {
    let shape = states.shape();
    assert_eq!(shape.len(), 3, "mha: states must be (B, T, D), got {shape:?}");
    let (batch, steps, dim) = (shape[0], shape[1], shape[2]);
    assert!(
        heads > 0 && dim % heads == 0,
        "mha: state width {dim} not divisible by {heads} heads"
    );
    let head_width = dim / heads;

    let w_a = ctx.p(&format!("{prefix}.wa"));
    let b_a = ctx.p(&format!("{prefix}.ba")).reshape(&[1, dim]);
    let query = o_last.reshape(&[batch, 1, dim]);

    let mut contexts = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    for k in 0..heads {
        let slice = states.slice(2, k * head_width, head_width);
        let keyed = slice
            .reshape(&[batch * steps, head_width])
            .matmul(&w_a)
            .add(&b_a)
            .tanh()
            .reshape(&[batch, steps, dim]);
        let scores = keyed.mul(&query).sum_axis(2);
        let weights = scores.softmax(1);
        let context = weights
            .reshape(&[batch, steps, 1])
            .mul(&slice)
            .sum_axis(1);
        contexts.push(context);
        attention.push(weights);
    }
    contexts.push(o_last.clone());
    let refs: Vec<&Tensor<T>> = contexts.iter().collect();
    MhaOutput {
        feature: concat(&refs, 1),
        attention,
    }
}

/// Attention plus the final linear map onto one scalar per row.
pub fn mha_decode<T: Scalar>(
    ctx: &Ctx<'_, T>,
    enc_prefix: &str,
    head_prefix: &str,
    states: &Tensor<T>,
    o_last: &Tensor<T>,
    heads: usize,
) -> MhaOutput<T> {
    let out = mha_attend(ctx, enc_prefix, states, o_last, heads);
    MhaOutput {
        feature: linear_head(ctx, head_prefix, &out.feature),
        attention: out.attention,
    }
}

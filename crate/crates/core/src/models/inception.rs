//! Parallel same-padded 1-D convolutions concatenated along channels.

use crate::autodiff::{concat, Tensor};
use crate::models::Ctx;
use crate::scalar::Scalar;

pub const INCEPTION_KERNELS: [usize; 4] = [1, 3, 5, 7];

/// Four same-padded convolutions over the time axis, each producing a
/// quarter of `out_channels`, concatenated per tick. Linear (no
/// activation); sequence length is preserved.
pub fn inception_block<T: Scalar>(
    ctx: &Ctx<'_, T>,
    prefix: &str,
    x: &Tensor<T>,
    out_channels: usize,
) -> Tensor<T> {
    assert_eq!(
        out_channels % INCEPTION_KERNELS.len(),
        0,
        "inception: out channels {out_channels} not divisible by {}",
        INCEPTION_KERNELS.len()
    );
    let branch_channels = out_channels / INCEPTION_KERNELS.len();
    let branches: Vec<Tensor<T>> = INCEPTION_KERNELS
        .iter()
        .map(|k| {
            let w = ctx.p(&format!("{prefix}.k{k}.w"));
            let b = ctx
                .p(&format!("{prefix}.k{k}.b"))
                .reshape(&[1, 1, branch_channels]);
            x.conv1d_same(&w).add(&b)
        })
        .collect();
    let refs: Vec<&Tensor<T>> = branches.iter().collect();
    concat(&refs, 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Array, Graph, ParamSet};
    use crate::models::declare_inception;

    #[test]
    fn output_shape_preserves_sequence_length() {
        let mut ps = ParamSet::new();
        declare_inception(&mut ps, "inc", 5, 8, 3);
        let g = Graph::new();
        let ctx = Ctx { graph: &g, params: &ps };
        let x = g.constant(Array::filled(&[2, 11, 5], 0.2));
        let y = inception_block(&ctx, "inc", &x, 8);
        assert_eq!(y.shape(), vec![2, 11, 8]);
    }

    #[test]
    fn zero_kernels_and_bias_give_zero_output() {
        let mut ps = ParamSet::new();
        declare_inception(&mut ps, "inc", 4, 8, 0);
        for (_, a) in ps.iter_mut() {
            a.data_mut().fill(0.0);
        }
        let g = Graph::new();
        let ctx = Ctx { graph: &g, params: &ps };
        let x = g.constant(Array::filled(&[1, 6, 4], 1.5));
        let y = inception_block(&ctx, "inc", &x, 8);
        assert!(y.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_width_branch_is_a_per_tick_linear_map() {
        let mut ps = ParamSet::new();
        declare_inception(&mut ps, "inc", 2, 8, 0);
        for (name, a) in ps.iter_mut() {
            a.data_mut().fill(0.0);
            if name == "inc.k1.w" {
                // copy input channel 0 into branch channel 0
                a.data_mut()[0] = 1.0;
            }
        }
        let g = Graph::new();
        let ctx = Ctx { graph: &g, params: &ps };
        let x = g.constant(Array::from_vec(&[1, 3, 2], vec![1., 2., 3., 4., 5., 6.]));
        let y = inception_block(&ctx, "inc", &x, 8).value();
        for t in 0..3 {
            assert_eq!(y.data()[t * 8], x.value().data()[t * 2]);
            assert!(y.data()[t * 8 + 1..(t + 1) * 8].iter().all(|&v| v == 0.0));
        }
    }
}

//! Gate-level LSTM cell and stacked layers.

use crate::autodiff::{concat, Tensor};
use crate::models::Ctx;
use crate::scalar::Scalar;

/// Bound tensors for one cell: per gate an input map `u`, a recurrent
/// map `w`, and a bias, plus the candidate-state path `c`.
pub struct LstmCellParams<T: Scalar> {
    pub u_f: Tensor<T>,
    pub w_f: Tensor<T>,
    pub b_f: Tensor<T>,
    pub u_i: Tensor<T>,
    pub w_i: Tensor<T>,
    pub b_i: Tensor<T>,
    pub u_o: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub u_c: Tensor<T>,
    pub w_c: Tensor<T>,
    pub b_c: Tensor<T>,
}

pub(crate) const LSTM_GATES: [&str; 4] = ["f", "i", "o", "c"];

impl<T: Scalar> LstmCellParams<T> {
    /// Bind the twelve tensors of `prefix` (biases reshaped for row
    /// broadcasting).
    pub fn bind(ctx: &Ctx<'_, T>, prefix: &str) -> Self {
        let hidden = ctx.params.get(&format!("{prefix}.f.w")).shape()[0];
        let gate = |g: &str, part: &str| ctx.p(&format!("{prefix}.{g}.{part}"));
        let bias = |g: &str| gate(g, "b").reshape(&[1, hidden]);
        Self {
            u_f: gate("f", "u"),
            w_f: gate("f", "w"),
            b_f: bias("f"),
            u_i: gate("i", "u"),
            w_i: gate("i", "w"),
            b_i: bias("i"),
            u_o: gate("o", "u"),
            w_o: gate("o", "w"),
            b_o: bias("o"),
            u_c: gate("c", "u"),
            w_c: gate("c", "w"),
            b_c: bias("c"),
        }
    }
}

/// One recurrence step.
///
/// Gates are sigmoids of `x·U + h·W + b`; the cell state blends its
/// past through the forget gate with a tanh candidate through the
/// input gate; the hidden state is the output gate times tanh(cell).
pub fn lstm_cell<T: Scalar>(
    x: &Tensor<T>,
    h_prev: &Tensor<T>,
    c_prev: &Tensor<T>,
    p: &LstmCellParams<T>,
) -> (Tensor<T>, Tensor<T>) {
    let f = x.matmul(&p.u_f).add(&h_prev.matmul(&p.w_f)).add(&p.b_f).sigmoid();
    let i = x.matmul(&p.u_i).add(&h_prev.matmul(&p.w_i)).add(&p.b_i).sigmoid();
    let o = x.matmul(&p.u_o).add(&h_prev.matmul(&p.w_o)).add(&p.b_o).sigmoid();
    let cand = x.matmul(&p.u_c).add(&h_prev.matmul(&p.w_c)).add(&p.b_c).tanh();
    let c = f.mul(c_prev).add(&i.mul(&cand));
    let h = o.mul(&c.tanh());
    (h, c)
}

pub struct LstmLayerOutput<T: Scalar> {
    pub hidden_seq: Tensor<T>,
    pub final_hidden: Tensor<T>,
    pub final_cell: Tensor<T>,
    pub cell_seq: Option<Tensor<T>>,
}

/// Unroll one layer over a `(B, T, F)` sequence.
pub fn lstm_layer<T: Scalar>(
    ctx: &Ctx<'_, T>,
    prefix: &str,
    x: &Tensor<T>,
    hidden: usize,
    collect_cells: bool,
) -> LstmLayerOutput<T> {
    let shape = x.shape();
    assert_eq!(shape.len(), 3, "lstm_layer: expected (B, T, F), got {shape:?}");
    let (batch, steps, width) = (shape[0], shape[1], shape[2]);
    let p = LstmCellParams::bind(ctx, prefix);

    let zeros = crate::autodiff::Array::zeros(&[batch, hidden]);
    let mut h = ctx.graph.constant(zeros.clone());
    let mut c = ctx.graph.constant(zeros);
    let mut hidden_steps = Vec::with_capacity(steps);
    let mut cell_steps = Vec::with_capacity(if collect_cells { steps } else { 0 });
    for t in 0..steps {
        let x_t = x.slice(1, t, 1).reshape(&[batch, width]);
        let (h_t, c_t) = lstm_cell(&x_t, &h, &c, &p);
        hidden_steps.push(h_t.reshape(&[batch, 1, hidden]));
        if collect_cells {
            cell_steps.push(c_t.reshape(&[batch, 1, hidden]));
        }
        h = h_t;
        c = c_t;
    }
    let hidden_refs: Vec<&Tensor<T>> = hidden_steps.iter().collect();
    let cell_seq = if collect_cells {
        let refs: Vec<&Tensor<T>> = cell_steps.iter().collect();
        Some(concat(&refs, 1))
    } else {
        None
    };
    LstmLayerOutput {
        hidden_seq: concat(&hidden_refs, 1),
        final_hidden: h,
        final_cell: c,
        cell_seq,
    }
}

/// Run `layers` stacked layers; layer `l` reads the previous layer's
/// hidden sequence. Cell states are collected for the last layer only
/// when asked.
pub fn run_stacked<T: Scalar>(
    ctx: &Ctx<'_, T>,
    prefix: &str,
    x: &Tensor<T>,
    hidden: usize,
    layers: usize,
    collect_last_cells: bool,
) -> Vec<LstmLayerOutput<T>> {
    let mut outputs: Vec<LstmLayerOutput<T>> = Vec::with_capacity(layers);
    for l in 0..layers {
        let input = match outputs.last() {
            None => x.clone(),
            Some(prev) => prev.hidden_seq.clone(),
        };
        let collect = collect_last_cells && l == layers - 1;
        outputs.push(lstm_layer(
            ctx,
            &format!("{prefix}.lstm{l}"),
            &input,
            hidden,
            collect,
        ));
    }
    outputs
}

/// Concatenate every layer's final hidden state: `(B, layers * D)`.
pub fn stacked_feature<T: Scalar>(outputs: &[LstmLayerOutput<T>]) -> Tensor<T> {
    let finals: Vec<&Tensor<T>> = outputs.iter().map(|o| &o.final_hidden).collect();
    concat(&finals, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Array, Graph, ParamSet};
    use crate::models::declare_lstm_layer;
    use crate::rng::stream;
    use rand::Rng;

    fn zeroed_cell_params(input: usize, hidden: usize) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        declare_lstm_layer(&mut ps, "cell", input, hidden, 0);
        for (_, a) in ps.iter_mut() {
            a.data_mut().fill(0.0);
        }
        ps
    }

    #[test]
    fn zero_everything_stays_at_rest() {
        let ps = zeroed_cell_params(3, 4);
        let g = Graph::new();
        let ctx = Ctx { graph: &g, params: &ps };
        let p = LstmCellParams::bind(&ctx, "cell");
        let x = g.constant(Array::zeros(&[1, 3]));
        let h0 = g.constant(Array::zeros(&[1, 4]));
        let c0 = g.constant(Array::zeros(&[1, 4]));
        let (h, c) = lstm_cell(&x, &h0, &c0, &p);
        assert!(h.value().iter().all(|&v| v == 0.0));
        assert!(c.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_unit_cell_state_halves() {
        // gates sit at 0.5, so c = 0.5 and h = 0.5 * tanh(0.5)
        let ps = zeroed_cell_params(3, 4);
        let g = Graph::new();
        let ctx = Ctx { graph: &g, params: &ps };
        let p = LstmCellParams::bind(&ctx, "cell");
        let x = g.constant(Array::zeros(&[1, 3]));
        let h0 = g.constant(Array::zeros(&[1, 4]));
        let c0 = g.constant(Array::filled(&[1, 4], 1.0));
        let (h, c) = lstm_cell(&x, &h0, &c0, &p);
        for &v in c.value().iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        let expected = 0.5 * 0.5f64.tanh();
        for &v in h.value().iter() {
            assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
        }
    }

    #[test]
    fn hidden_states_stay_inside_unit_box() {
        let mut ps = ParamSet::new();
        declare_lstm_layer(&mut ps, "cell", 5, 6, 9);
        let mut rng = stream(1, "lstm-box");
        let g = Graph::new();
        let ctx = Ctx { graph: &g, params: &ps };
        let p = LstmCellParams::bind(&ctx, "cell");
        let mut h = g.constant(Array::zeros(&[2, 6]));
        let mut c = g.constant(Array::zeros(&[2, 6]));
        for _ in 0..20 {
            let x = g.constant(Array::from_vec(
                &[2, 5],
                (0..10).map(|_| rng.gen_range(-3.0..3.0f64)).collect(),
            ));
            let (h2, c2) = lstm_cell(&x, &h, &c, &p);
            h = h2;
            c = c2;
            assert!(h.value().iter().all(|&v| v.abs() < 1.0));
        }
    }

    #[test]
    fn single_step_layer_equals_one_cell() {
        let mut ps = ParamSet::new();
        declare_lstm_layer(&mut ps, "l", 3, 4, 5);
        let g = Graph::new();
        let ctx = Ctx { graph: &g, params: &ps };
        let x_data: Vec<f64> = vec![0.3, -0.7, 1.1];
        let seq = g.constant(Array::from_vec(&[1, 1, 3], x_data.clone()));
        let out = lstm_layer(&ctx, "l", &seq, 4, false);

        let p = LstmCellParams::bind(&ctx, "l");
        let x = g.constant(Array::from_vec(&[1, 3], x_data));
        let h0 = g.constant(Array::zeros(&[1, 4]));
        let c0 = g.constant(Array::zeros(&[1, 4]));
        let (h, _) = lstm_cell(&x, &h0, &c0, &p);
        assert_eq!(out.final_hidden.value(), h.value());
    }

    #[test]
    fn stacked_feature_width_is_layers_times_hidden() {
        let mut ps = ParamSet::new();
        declare_lstm_layer(&mut ps, "s.lstm0", 3, 4, 1);
        declare_lstm_layer(&mut ps, "s.lstm1", 4, 4, 2);
        declare_lstm_layer(&mut ps, "s.lstm2", 4, 4, 3);
        let g = Graph::new();
        let ctx = Ctx { graph: &g, params: &ps };
        let x = g.constant(Array::filled(&[2, 7, 3], 0.1));
        let outs = run_stacked(&ctx, "s", &x, 4, 3, false);
        let feat = stacked_feature(&outs);
        assert_eq!(feat.shape(), vec![2, 12]);
    }
}

//! The model family: five encoder architectures, a linear head, and
//! the shared-parameter twin-encoder variant with a difference head.

mod attention;
mod inception;
mod lstm;

pub use attention::{mha_attend, mha_decode, MhaOutput};
pub use inception::{inception_block, INCEPTION_KERNELS};
pub use lstm::{lstm_cell, lstm_layer, run_stacked, stacked_feature, LstmCellParams, LstmLayerOutput};

use rand::Rng;

use crate::autodiff::{Array, Graph, ParamSet, Tensor};
use crate::features::{split_sides, FeatureKind, Sample};
use crate::rng::stream;
use crate::scalar::Scalar;

/// Graph-plus-parameters handle passed through forward code; `p` binds
/// a named parameter into the graph (same name, same node).
pub struct Ctx<'a, T: Scalar> {
    pub graph: &'a Graph<T>,
    pub params: &'a ParamSet<T>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn p(&self, name: &str) -> Tensor<T> {
        self.graph.param(name, self.params.get(name))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Arch {
    #[serde(rename = "mlp")]
    Mlp,
    #[serde(rename = "lstm")]
    StackedLstm,
    #[serde(rename = "mlp-lstm")]
    MlpLstm,
    #[serde(rename = "cnn-lstm")]
    CnnLstm,
    #[serde(rename = "lstm-mha")]
    LstmMha,
}

impl Arch {
    pub const ALL: [Arch; 5] = [
        Arch::Mlp,
        Arch::StackedLstm,
        Arch::MlpLstm,
        Arch::CnnLstm,
        Arch::LstmMha,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Mlp => "mlp",
            Arch::StackedLstm => "lstm",
            Arch::MlpLstm => "mlp-lstm",
            Arch::CnnLstm => "cnn-lstm",
            Arch::LstmMha => "lstm-mha",
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "lstm" => Ok(Arch::StackedLstm),
            "mlp-lstm" => Ok(Arch::MlpLstm),
            "cnn-lstm" => Ok(Arch::CnnLstm),
            "lstm-mha" => Ok(Arch::LstmMha),
            other => Err(format!(
                "unknown architecture {other:?} (expected mlp|lstm|mlp-lstm|cnn-lstm|lstm-mha)"
            )),
        }
    }
}

/// Layer widths. Defaults are the production sizes; `reduced` scales
/// everything down for fast finite-difference checks and smoke grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelSizes {
    /// Recurrent state width D.
    pub hidden: usize,
    /// Attention heads K; must divide `hidden`.
    pub heads: usize,
    /// The three flat-encoder hidden widths.
    pub mlp_hidden: [usize; 3],
    /// Hidden width of the per-tick map in front of the recurrent stack.
    pub pre_hidden: usize,
    /// Difference-head hidden width.
    pub siamese_hidden: usize,
}

impl Default for ModelSizes {
    fn default() -> Self {
        Self {
            hidden: 64,
            heads: 4,
            mlp_hidden: [500, 250, 64],
            pre_hidden: 128,
            siamese_hidden: 32,
        }
    }
}

impl ModelSizes {
    pub fn reduced(hidden: usize) -> Self {
        Self {
            hidden,
            heads: 4,
            mlp_hidden: [hidden * 2, hidden, hidden],
            pre_hidden: hidden * 2,
            siamese_hidden: (hidden / 2).max(2),
        }
    }
}

/// Encoder geometry: architecture, per-tick input width (already
/// halved for twin encoders), window length, and layer sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderSpec {
    pub arch: Arch,
    pub input_width: usize,
    pub seq_len: usize,
    pub sizes: ModelSizes,
}

impl EncoderSpec {
    /// Width of the encoder output feeding the head.
    pub fn feature_dim(&self) -> usize {
        match self.arch {
            Arch::Mlp => self.sizes.mlp_hidden[2],
            Arch::StackedLstm | Arch::MlpLstm | Arch::CnnLstm => 3 * self.sizes.hidden,
            Arch::LstmMha => 2 * self.sizes.hidden,
        }
    }

    fn validate(&self) {
        assert!(self.input_width > 0 && self.seq_len > 0, "empty encoder input");
        assert!(
            self.sizes.heads > 0 && self.sizes.hidden % self.sizes.heads == 0,
            "hidden {} not divisible by {} heads",
            self.sizes.hidden,
            self.sizes.heads
        );
        assert!(
            self.sizes.hidden % INCEPTION_KERNELS.len() == 0,
            "hidden {} not divisible into {} convolution branches",
            self.sizes.hidden,
            INCEPTION_KERNELS.len()
        );
    }
}

/// Difference-head shape: a two-layer map on the encoder-feature
/// difference, squashed and affinely mapped onto the label range
/// (alpha 2, beta 1 cover the ±1 cap).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiameseHeadConfig {
    pub hidden: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl SiameseHeadConfig {
    pub fn new(hidden: usize) -> Self {
        Self {
            hidden,
            alpha: 2.0,
            beta: 1.0,
        }
    }

    /// Open output interval `(-beta, alpha - beta)`.
    pub fn output_range(&self) -> (f64, f64) {
        (-self.beta, self.alpha - self.beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Linear,
    SiameseDifference,
}

/// A built model: spec, decoder kind, and one parameter set. Twin
/// encoders are structural sharing, not copies: there is exactly one
/// set of encoder tensors no matter how many paths read them.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub arch: Arch,
    pub kind: FeatureKind,
    pub spec: EncoderSpec,
    pub decoder: DecoderKind,
    pub head: SiameseHeadConfig,
    pub params: ParamSet<T>,
}

fn init_uniform<T: Scalar>(
    params: &mut ParamSet<T>,
    name: &str,
    shape: &[usize],
    fan_in: usize,
    seed: u64,
) {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let mut rng = stream(seed, name);
    let data = (0..shape.iter().product::<usize>())
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    params.insert(name, Array::from_vec(shape, data));
}

pub(crate) fn declare_linear<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    input: usize,
    output: usize,
    seed: u64,
) {
    init_uniform(params, &format!("{prefix}.w"), &[input, output], input, seed);
    init_uniform(params, &format!("{prefix}.b"), &[output], input, seed);
}

pub(crate) fn declare_lstm_layer<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    input: usize,
    hidden: usize,
    seed: u64,
) {
    for gate in lstm::LSTM_GATES {
        init_uniform(params, &format!("{prefix}.{gate}.u"), &[input, hidden], input, seed);
        init_uniform(params, &format!("{prefix}.{gate}.w"), &[hidden, hidden], hidden, seed);
        init_uniform(params, &format!("{prefix}.{gate}.b"), &[hidden], hidden, seed);
    }
}

pub(crate) fn declare_inception<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    cin: usize,
    out_channels: usize,
    seed: u64,
) {
    let branch = out_channels / INCEPTION_KERNELS.len();
    for k in INCEPTION_KERNELS {
        let fan = k * cin;
        init_uniform(params, &format!("{prefix}.k{k}.w"), &[k, cin, branch], fan, seed);
        init_uniform(params, &format!("{prefix}.k{k}.b"), &[branch], fan, seed);
    }
}

pub(crate) fn declare_mha<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    dim: usize,
    heads: usize,
    seed: u64,
) {
    let head_width = dim / heads;
    init_uniform(params, &format!("{prefix}.wa"), &[head_width, dim], head_width, seed);
    init_uniform(params, &format!("{prefix}.ba"), &[dim], head_width, seed);
}

fn declare_encoder<T: Scalar>(params: &mut ParamSet<T>, spec: &EncoderSpec, seed: u64) {
    let d = spec.sizes.hidden;
    match spec.arch {
        Arch::Mlp => {
            let [h1, h2, h3] = spec.sizes.mlp_hidden;
            let flat = spec.seq_len * spec.input_width;
            declare_linear(params, "enc.mlp.l0", flat, h1, seed);
            declare_linear(params, "enc.mlp.l1", h1, h2, seed);
            declare_linear(params, "enc.mlp.l2", h2, h3, seed);
        }
        Arch::StackedLstm => {
            declare_lstm_layer(params, "enc.lstm0", spec.input_width, d, seed);
            declare_lstm_layer(params, "enc.lstm1", d, d, seed);
            declare_lstm_layer(params, "enc.lstm2", d, d, seed);
        }
        Arch::MlpLstm => {
            declare_linear(params, "enc.pre.l0", spec.input_width, spec.sizes.pre_hidden, seed);
            declare_linear(params, "enc.pre.l1", spec.sizes.pre_hidden, d, seed);
            declare_lstm_layer(params, "enc.lstm0", d, d, seed);
            declare_lstm_layer(params, "enc.lstm1", d, d, seed);
            declare_lstm_layer(params, "enc.lstm2", d, d, seed);
        }
        Arch::CnnLstm => {
            declare_inception(params, "enc.incep", spec.input_width, d, seed);
            declare_lstm_layer(params, "enc.lstm0", d, d, seed);
            declare_lstm_layer(params, "enc.lstm1", d, d, seed);
            declare_lstm_layer(params, "enc.lstm2", d, d, seed);
        }
        Arch::LstmMha => {
            declare_lstm_layer(params, "enc.lstm0", spec.input_width, d, seed);
            declare_lstm_layer(params, "enc.lstm1", d, d, seed);
            declare_mha(params, "enc.mha", d, spec.sizes.heads, seed);
        }
    }
}

/// Scalar count of one encoder built to `spec`, the yardstick for the
/// parameter-sharing checks.
pub fn encoder_param_numel(spec: &EncoderSpec) -> usize {
    let mut scratch = ParamSet::<f64>::new();
    declare_encoder(&mut scratch, spec, 0);
    scratch.numel()
}

/// Construct a model with fan-scaled uniform initialization. Each
/// tensor's stream is derived from `(seed, name)`, so construction
/// order does not matter.
pub fn build_model<T: Scalar>(
    arch: Arch,
    kind: FeatureKind,
    siamese: bool,
    seq_len: usize,
    sizes: &ModelSizes,
    seed: u64,
) -> Model<T> {
    let input_width = if siamese { kind.side_width() } else { kind.width() };
    let spec = EncoderSpec {
        arch,
        input_width,
        seq_len,
        sizes: *sizes,
    };
    spec.validate();
    let head = SiameseHeadConfig::new(sizes.siamese_hidden);
    let mut params = ParamSet::new();
    declare_encoder(&mut params, &spec, seed);
    let feat = spec.feature_dim();
    let decoder = if siamese {
        declare_linear(&mut params, "head.siam.l0", feat, head.hidden, seed);
        declare_linear(&mut params, "head.siam.l1", head.hidden, 1, seed);
        DecoderKind::SiameseDifference
    } else {
        declare_linear(&mut params, "head.lin", feat, 1, seed);
        DecoderKind::Linear
    };
    Model {
        arch,
        kind,
        spec,
        decoder,
        head,
        params,
    }
}

/// `x · W + b` onto one column.
pub fn linear_head<T: Scalar>(ctx: &Ctx<'_, T>, prefix: &str, x: &Tensor<T>) -> Tensor<T> {
    let w = ctx.p(&format!("{prefix}.w"));
    let b = ctx.p(&format!("{prefix}.b")).reshape(&[1, 1]);
    x.matmul(&w).add(&b)
}

fn encode<T: Scalar>(ctx: &Ctx<'_, T>, spec: &EncoderSpec, x: &Tensor<T>) -> Tensor<T> {
    let shape = x.shape();
    assert_eq!(
        &shape[1..],
        &[spec.seq_len, spec.input_width],
        "encoder fed {:?}, expected (B, {}, {})",
        shape,
        spec.seq_len,
        spec.input_width
    );
    let batch = shape[0];
    let d = spec.sizes.hidden;
    match spec.arch {
        Arch::Mlp => {
            let mut h = x.reshape(&[batch, spec.seq_len * spec.input_width]);
            for l in 0..3 {
                let w = ctx.p(&format!("enc.mlp.l{l}.w"));
                let b = ctx
                    .p(&format!("enc.mlp.l{l}.b"))
                    .reshape(&[1, spec.sizes.mlp_hidden[l]]);
                h = h.matmul(&w).add(&b).tanh();
            }
            h
        }
        Arch::StackedLstm => {
            let outs = run_stacked(ctx, "enc", x, d, 3, false);
            stacked_feature(&outs)
        }
        Arch::MlpLstm => {
            let pre = spec.sizes.pre_hidden;
            let flat = x.reshape(&[batch * spec.seq_len, spec.input_width]);
            let w0 = ctx.p("enc.pre.l0.w");
            let b0 = ctx.p("enc.pre.l0.b").reshape(&[1, pre]);
            let w1 = ctx.p("enc.pre.l1.w");
            let b1 = ctx.p("enc.pre.l1.b").reshape(&[1, d]);
            let mapped = flat
                .matmul(&w0)
                .add(&b0)
                .tanh()
                .matmul(&w1)
                .add(&b1)
                .reshape(&[batch, spec.seq_len, d]);
            let outs = run_stacked(ctx, "enc", &mapped, d, 3, false);
            stacked_feature(&outs)
        }
        Arch::CnnLstm => {
            let mapped = inception_block(ctx, "enc.incep", x, d);
            let outs = run_stacked(ctx, "enc", &mapped, d, 3, false);
            stacked_feature(&outs)
        }
        Arch::LstmMha => {
            let outs = run_stacked(ctx, "enc", x, d, 2, true);
            let last = outs.last().expect("two layers");
            let states = last.cell_seq.as_ref().expect("cell states collected");
            mha_attend(ctx, "enc.mha", states, &last.final_hidden, spec.sizes.heads).feature
        }
    }
}

fn siamese_head<T: Scalar>(
    ctx: &Ctx<'_, T>,
    cfg: &SiameseHeadConfig,
    diff: &Tensor<T>,
) -> Tensor<T> {
    let w1 = ctx.p("head.siam.l0.w");
    let b1 = ctx.p("head.siam.l0.b").reshape(&[1, cfg.hidden]);
    let w2 = ctx.p("head.siam.l1.w");
    let b2 = ctx.p("head.siam.l1.b").reshape(&[1, 1]);
    diff.matmul(&w1)
        .add(&b1)
        .matmul(&w2)
        .add(&b2)
        .sigmoid()
        .scale(T::from_f64(cfg.alpha), T::from_f64(-cfg.beta))
}

impl<T: Scalar> Model<T> {
    /// Encoder feature for a `(B, seq_len, input_width)` batch.
    pub fn encode_window(&self, graph: &Graph<T>, x: &Tensor<T>) -> Tensor<T> {
        let ctx = Ctx {
            graph,
            params: &self.params,
        };
        encode(&ctx, &self.spec, x)
    }

    /// Difference head on an encoder-feature difference.
    pub fn decode_difference(&self, graph: &Graph<T>, diff: &Tensor<T>) -> Tensor<T> {
        assert_eq!(
            self.decoder,
            DecoderKind::SiameseDifference,
            "decode_difference on a non-shared model"
        );
        let ctx = Ctx {
            graph,
            params: &self.params,
        };
        siamese_head(&ctx, &self.head, diff)
    }

    /// Non-shared path: encode the full-width window, apply the linear
    /// head. `x` is `(B, seq_len, width)`.
    pub fn forward_full(&self, graph: &Graph<T>, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(
            self.decoder,
            DecoderKind::Linear,
            "forward_full on a twin-encoder model"
        );
        let ctx = Ctx {
            graph,
            params: &self.params,
        };
        let feat = encode(&ctx, &self.spec, x);
        linear_head(&ctx, "head.lin", &feat)
    }

    /// Shared path: encode both sides with the same parameters and put
    /// the feature difference through the squashed head.
    pub fn forward_sides(&self, graph: &Graph<T>, ask: &Tensor<T>, bid: &Tensor<T>) -> Tensor<T> {
        assert_eq!(
            self.decoder,
            DecoderKind::SiameseDifference,
            "forward_sides on a non-shared model"
        );
        let f_a = self.encode_window(graph, ask);
        let f_b = self.encode_window(graph, bid);
        self.decode_difference(graph, &f_a.sub(&f_b))
    }

    /// One prediction column `(B, 1)` for a batch of samples.
    pub fn forward(&self, graph: &Graph<T>, samples: &[&Sample<T>]) -> Tensor<T> {
        assert!(!samples.is_empty(), "forward: empty batch");
        for s in samples {
            assert_eq!(
                s.inputs.shape(),
                &[self.spec.seq_len, self.kind.width()],
                "sample shape {:?} does not match a {} {} model",
                s.inputs.shape(),
                self.kind,
                self.arch
            );
        }
        match self.decoder {
            DecoderKind::Linear => {
                let x = graph.constant(batch_inputs(samples));
                self.forward_full(graph, &x)
            }
            DecoderKind::SiameseDifference => {
                let (ask, bid) = batch_sides(samples, self.kind);
                self.forward_sides(graph, &graph.constant(ask), &graph.constant(bid))
            }
        }
    }

    /// Forward pass on a throwaway graph; returns one value per sample.
    pub fn predict(&self, samples: &[&Sample<T>]) -> Vec<T> {
        let graph = Graph::new();
        let preds = self.forward(&graph, samples);
        preds.value().into_data()
    }

    /// Scalar count of the `enc.*` tensors.
    pub fn encoder_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(name, _)| name.starts_with("enc."))
            .map(|(_, a)| a.numel())
            .sum()
    }
}

/// Spec-level twin forward: same encoder parameters on both sides.
pub fn siamese_forward<T: Scalar>(
    model: &Model<T>,
    graph: &Graph<T>,
    ask: &Tensor<T>,
    bid: &Tensor<T>,
) -> Tensor<T> {
    model.forward_sides(graph, ask, bid)
}

/// Stack sample windows into a `(B, rows, cols)` constant.
pub fn batch_inputs<T: Scalar>(samples: &[&Sample<T>]) -> Array<T> {
    let rows = samples[0].inputs.shape()[0];
    let cols = samples[0].inputs.shape()[1];
    let mut data = Vec::with_capacity(samples.len() * rows * cols);
    for s in samples {
        data.extend_from_slice(s.inputs.data());
    }
    Array::from_vec(&[samples.len(), rows, cols], data)
}

/// Stack targets into a `(B, 1)` column.
pub fn batch_targets<T: Scalar>(samples: &[&Sample<T>]) -> Array<T> {
    let data = samples.iter().map(|s| s.target).collect();
    Array::from_vec(&[samples.len(), 1], data)
}

/// Split each window into its sides and stack: two `(B, rows, cols/2)`
/// constants, ask first.
pub fn batch_sides<T: Scalar>(samples: &[&Sample<T>], kind: FeatureKind) -> (Array<T>, Array<T>) {
    let rows = samples[0].inputs.shape()[0];
    let half = kind.side_width();
    let mut ask_data = Vec::with_capacity(samples.len() * rows * half);
    let mut bid_data = Vec::with_capacity(samples.len() * rows * half);
    for s in samples {
        let (ask, bid) = split_sides(&s.inputs, kind);
        ask_data.extend_from_slice(ask.data());
        bid_data.extend_from_slice(bid.data());
    }
    (
        Array::from_vec(&[samples.len(), rows, half], ask_data),
        Array::from_vec(&[samples.len(), rows, half], bid_data),
    )
}

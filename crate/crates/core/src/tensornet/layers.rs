//! Layer building blocks on top of [`Graph`].
//!
//! Layers own only [`ParamId`]s; values live in a [`ParamStore`] so the same
//! layer can run on any store with matching names (checkpoints, replicas).

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const DEFAULT_DROPOUT: f64 = 0.1;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending running-statistics update produced by a training-mode BatchNorm.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Per-pass state: mode, dropout randomness and BatchNorm side effects.
pub struct ForwardCtx {
    pub mode: Mode,
    pub rng: Rng,
    pub bn_updates: Vec<BnUpdate>,
}

impl ForwardCtx {
    pub fn new(mode: Mode, rng: Rng) -> Self {
        ForwardCtx {
            mode,
            rng,
            bn_updates: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval, crate::rng::substream(0, "eval", 0))
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Folds pending BatchNorm statistics into the store's running buffers.
    pub fn apply_bn_updates(&mut self, store: &mut ParamStore) {
        for up in self.bn_updates.drain(..) {
            for (id, batch) in [(up.mean, &up.batch_mean), (up.var, &up.batch_var)] {
                for (r, b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu => g.leaky_relu(x, LEAKY_SLOPE),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Declarative description of one layer and its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense { input: usize, units: usize },
    Conv3D { in_channels: usize, out_channels: usize, kernel: [usize; 3], dilation: [usize; 3] },
    BatchNorm { channels: usize },
    MaxPool3D { window: [usize; 3] },
    /// Mean over the token axis, `[L, d] -> [1, d]`.
    AvgPool,
    Flatten,
    Dropout { rate: f64 },
    LayerNorm { width: usize },
    Embedding { vocab: usize, width: usize },
    MultiHeadAttention { width: usize, heads: usize },
    Activation(Activation),
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub units: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, units: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / input as f64).sqrt();
        let w = store.add(&format!("{name}.w"), Tensor::uniform(&[input, units], limit, rng));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[units]));
        Dense { w, b, input, units }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
    pub dilation: [usize; 3],
}

impl Conv3d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        dilation: [usize; 3],
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_channels * kernel.iter().product::<usize>();
        let limit = (6.0 / fan_in as f64).sqrt();
        let shape = [out_channels, in_channels, kernel[0], kernel[1], kernel[2]];
        let w = store.add(&format!("{name}.w"), Tensor::uniform(&shape, limit, rng));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[out_channels]));
        Conv3d { w, b, dilation }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        g.conv3d(x, w, b, self.dilation)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let (gamma, beta) = (g.param(store, self.gamma), g.param(store, self.beta));
        match ctx.mode {
            Mode::Train => {
                let (y, batch_mean, batch_var) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
                ctx.bn_updates.push(BnUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    batch_mean,
                    batch_var,
                });
                Ok(y)
            }
            Mode::Eval => g.batch_norm_eval(
                x,
                gamma,
                beta,
                store.get(self.running_mean).data(),
                store.get(self.running_var).data(),
                BN_EPS,
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[width], 1.0)),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(store, self.gamma), g.param(store, self.beta));
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, width: usize, rng: &mut Rng) -> Self {
        let table = store.add(&format!("{name}.table"), Tensor::normal(&[vocab, width], 0.02, rng));
        Embedding { table, vocab }
    }

    pub fn lookup(&self, g: &mut Graph, store: &ParamStore, idx: &[usize]) -> Result<Var> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::OutOfRange(format!(
                "embedding index {bad} with vocabulary {}",
                self.vocab
            )));
        }
        let table = g.param(store, self.table);
        g.gather_rows(table, idx)
    }
}

pub fn dropout(g: &mut Graph, x: Var, rate: f64, ctx: &mut ForwardCtx) -> Var {
    if ctx.is_train() {
        g.dropout(x, rate, &mut ctx.rng)
    } else {
        x
    }
}

/// Multi-head self-attention over one token sequence `[L, d]`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub o: Dense,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "{heads} heads do not divide model width {width}"
            )));
        }
        Ok(MultiHeadAttention {
            q: Dense::new(store, &format!("{name}.q"), width, width, rng),
            k: Dense::new(store, &format!("{name}.k"), width, width, rng),
            v: Dense::new(store, &format!("{name}.v"), width, width, rng),
            o: Dense::new(store, &format!("{name}.o"), width, width, rng),
            heads,
            width,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.width {
            return Err(Error::shape("attention input [L, d]", &[0, self.width], &shape));
        }
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, x)?;
        let v = self.v.forward(g, store, x)?;
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.cols(q, h * dh, dh)?;
            let kh = g.cols(k, h * dh, dh)?;
            let vh = g.cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let merged = g.concat_cols(&heads)?;
        self.o.forward(g, store, merged)
    }
}

/// A built layer: hyperparameters plus parameter handles.
#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    Conv3D(Conv3d),
    BatchNorm(BatchNorm),
    MaxPool3D([usize; 3]),
    AvgPool,
    Flatten,
    Dropout(f64),
    LayerNorm(LayerNorm),
    Embedding(Embedding),
    MultiHeadAttention(MultiHeadAttention),
    Activation(Activation),
}

impl Layer {
    pub fn build(spec: &LayerSpec, store: &mut ParamStore, name: &str, rng: &mut Rng) -> Result<Layer> {
        let positive = |what: &str, v: usize| {
            if v == 0 {
                Err(Error::InvalidArgument(format!("{name}: {what} must be >= 1")))
            } else {
                Ok(())
            }
        };
        Ok(match spec {
            LayerSpec::Dense { input, units } => {
                positive("input", *input)?;
                positive("units", *units)?;
                Layer::Dense(Dense::new(store, name, *input, *units, rng))
            }
            LayerSpec::Conv3D { in_channels, out_channels, kernel, dilation } => {
                positive("in_channels", *in_channels)?;
                positive("out_channels", *out_channels)?;
                if kernel.iter().any(|k| k % 2 == 0) || dilation.contains(&0) {
                    return Err(Error::InvalidArgument(format!(
                        "{name}: kernels must be odd and dilations >= 1"
                    )));
                }
                Layer::Conv3D(Conv3d::new(store, name, *in_channels, *out_channels, *kernel, *dilation, rng))
            }
            LayerSpec::BatchNorm { channels } => {
                positive("channels", *channels)?;
                Layer::BatchNorm(BatchNorm::new(store, name, *channels))
            }
            LayerSpec::MaxPool3D { window } => {
                if window.contains(&0) {
                    return Err(Error::InvalidArgument(format!("{name}: zero pooling window")));
                }
                Layer::MaxPool3D(*window)
            }
            LayerSpec::AvgPool => Layer::AvgPool,
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::InvalidArgument(format!("{name}: dropout rate {rate}")));
                }
                Layer::Dropout(*rate)
            }
            LayerSpec::LayerNorm { width } => {
                positive("width", *width)?;
                Layer::LayerNorm(LayerNorm::new(store, name, *width))
            }
            LayerSpec::Embedding { vocab, width } => {
                positive("vocab", *vocab)?;
                positive("width", *width)?;
                Layer::Embedding(Embedding::new(store, name, *vocab, *width, rng))
            }
            LayerSpec::MultiHeadAttention { width, heads } => {
                Layer::MultiHeadAttention(MultiHeadAttention::new(store, name, *width, *heads, rng)?)
            }
            LayerSpec::Activation(a) => Layer::Activation(*a),
        })
    }

    /// Runs the layer. Embedding layers read their input values as indices.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        match self {
            Layer::Dense(d) => d.forward(g, store, x),
            Layer::Conv3D(c) => c.forward(g, store, x),
            Layer::BatchNorm(bn) => bn.forward(g, store, x, ctx),
            Layer::MaxPool3D(w) => g.max_pool3d(x, *w),
            Layer::AvgPool => g.mean_rows(x),
            Layer::Flatten => g.flatten(x),
            Layer::Dropout(rate) => Ok(dropout(g, x, *rate, ctx)),
            Layer::LayerNorm(ln) => ln.forward(g, store, x),
            Layer::Embedding(e) => {
                let idx: Vec<usize> = g
                    .value(x)
                    .data()
                    .iter()
                    .map(|&v| {
                        if v >= 0.0 && v.fract() == 0.0 {
                            Ok(v as usize)
                        } else {
                            Err(Error::InvalidArgument(format!("embedding index {v}")))
                        }
                    })
                    .collect::<Result<_>>()?;
                e.lookup(g, store, &idx)
            }
            Layer::MultiHeadAttention(m) => m.forward(g, store, x),
            Layer::Activation(a) => Ok(a.apply(g, x)),
        }
    }
}

/// Fisher-Yates shuffle of `0..n` using the given generator.
pub fn permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn identity_dense() {
        let mut store = ParamStore::new();
        let mut rng = substream(0, "t", 0);
        let d = Dense::new(&mut store, "d", 3, 3, &mut rng);
        let eye = Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        *store.get_mut(d.w) = eye;
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let y = d.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn unit_conv_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = substream(0, "t", 0);
        let c = Conv3d::new(&mut store, "c", 1, 1, [1, 1, 1], [1, 1, 1], &mut rng);
        *store.get_mut(c.w) = Tensor::full(&[1, 1, 1, 1, 1], 1.0);
        let input = Tensor::uniform(&[2, 1, 3, 2, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let y = c.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y), &input);
    }

    /// Direct zero-padded dilated convolution loop.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], dil: [usize; 3]) -> Vec<f64> {
        let xs = x.shape();
        let ws = w.shape();
        let (bn, ci, d) = (xs[0], xs[1], [xs[2], xs[3], xs[4]]);
        let co = ws[0];
        let k = [ws[2], ws[3], ws[4]];
        let mut out = vec![0.0; bn * co * d[0] * d[1] * d[2]];
        for bi in 0..bn {
            for o in 0..co {
                for p0 in 0..d[0] {
                    for p1 in 0..d[1] {
                        for p2 in 0..d[2] {
                            let mut acc = b[o];
                            for i in 0..ci {
                                for a in 0..k[0] {
                                    for bb in 0..k[1] {
                                        for c in 0..k[2] {
                                            let q0 = p0 as isize + (a * dil[0]) as isize - (dil[0] * (k[0] - 1) / 2) as isize;
                                            let q1 = p1 as isize + (bb * dil[1]) as isize - (dil[1] * (k[1] - 1) / 2) as isize;
                                            let q2 = p2 as isize + (c * dil[2]) as isize - (dil[2] * (k[2] - 1) / 2) as isize;
                                            if q0 < 0 || q1 < 0 || q2 < 0 || q0 >= d[0] as isize || q1 >= d[1] as isize || q2 >= d[2] as isize {
                                                continue;
                                            }
                                            let xi = (((bi * ci + i) * d[0] + q0 as usize) * d[1] + q1 as usize) * d[2] + q2 as usize;
                                            let wi = (((o * ci + i) * k[0] + a) * k[1] + bb) * k[2] + c;
                                            acc += x.data()[xi] * w.data()[wi];
                                        }
                                    }
                                }
                            }
                            out[(((bi * co + o) * d[0] + p0) * d[1] + p1) * d[2] + p2] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn dilated_conv_matches_naive_loop() {
        let mut rng = substream(4, "t", 0);
        let mut store = ParamStore::new();
        let c = Conv3d::new(&mut store, "c", 2, 3, [3, 3, 3], [2, 1, 2], &mut rng);
        *store.get_mut(c.b) = Tensor::from_vec(vec![0.1, -0.2, 0.3]);
        let mut delta = Tensor::zeros(&[1, 2, 5, 3, 7]);
        delta.data_mut()[2 * 3 * 7 + 1 * 7 + 3] = 1.0;
        let random = Tensor::uniform(&[2, 2, 5, 3, 7], 1.0, &mut rng);
        for input in [delta, random] {
            let mut g = Graph::new();
            let x = g.constant(input.clone());
            let y = c.forward(&mut g, &store, x).unwrap();
            let want = naive_conv(&input, store.get(c.w), store.get(c.b).data(), [2, 1, 2]);
            for (a, b) in g.value(y).data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batchnorm_eval_is_deterministic_affine() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        store.get_mut(bn.running_mean).data_mut().copy_from_slice(&[0.5, -1.0]);
        store.get_mut(bn.running_var).data_mut().copy_from_slice(&[4.0, 0.25]);
        let input = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let run = |store: &ParamStore| {
            let mut g = Graph::new();
            let x = g.constant(input.clone());
            let y = bn.forward(&mut g, store, x, &mut ForwardCtx::eval()).unwrap();
            g.value(y).clone()
        };
        let a = run(&store);
        assert_eq!(a, run(&store));
        let want0 = (1.0 - 0.5) / (4.0f64 + BN_EPS).sqrt();
        assert!((a.data()[0] - want0).abs() < 1e-12);
    }

    #[test]
    fn dropout_eval_identity_and_train_unbiased() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[10_000], 1.0));
        let mut ctx = ForwardCtx::eval();
        assert_eq!(dropout(&mut g, x, 0.1, &mut ctx), x);
        let mut ctx = ForwardCtx::new(Mode::Train, substream(1, "t", 0));
        let y = dropout(&mut g, x, 0.1, &mut ctx);
        let mean = g.value(y).data().iter().sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new();
        let mut rng = substream(0, "t", 0);
        let spec = LayerSpec::MultiHeadAttention { width: 10, heads: 3 };
        assert!(Layer::build(&spec, &mut store, "mha", &mut rng).is_err());
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut store = ParamStore::new();
        let mut rng = substream(2, "t", 0);
        let mha = MultiHeadAttention::new(&mut store, "mha", 16, 8, &mut rng).unwrap();
        let input = Tensor::uniform(&[5, 16], 1.0, &mut rng);
        let perm = [3usize, 0, 4, 1, 2];
        let mut g = Graph::new();
        let x = g.constant(input);
        let y = mha.forward(&mut g, &store, x).unwrap();
        let xp = g.gather_rows(x, &perm).unwrap();
        let yp = mha.forward(&mut g, &store, xp).unwrap();
        let (y, yp) = (g.value(y).data().to_vec(), g.value(yp).data().to_vec());
        for (r, &src) in perm.iter().enumerate() {
            for c in 0..16 {
                assert!((yp[r * 16 + c] - y[src * 16 + c]).abs() < 1e-6);
            }
        }
    }
}

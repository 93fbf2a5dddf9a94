//! Central finite-difference gradient checks.

use super::graph::{Graph, Var};
use super::params::{Grads, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor so near-zero gradients compare in absolute terms.
const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Location of the worst element, e.g. `param conv.w[17]` or `input 0[3]`.
    pub worst: String,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_FLOOR)
}

/// Compares backprop gradients of a scalar loss against central differences
/// for every trainable parameter and every input tensor.
///
/// `f` must be deterministic: it is evaluated twice per perturbed element.
pub fn check_gradients<F>(store: &ParamStore, inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, store, &vars)?;
        if g.value(loss).len() != 1 {
            return Err(Error::shape("gradient check loss", &[1], g.shape(loss)));
        }
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, store, &vars)?;
    g.backward(loss)?;
    let mut grads = Grads::new(store);
    g.collect_param_grads(&mut grads);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut record = |err: f64, place: String| {
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = err.max(report.max_rel_err);
            report.worst = place;
        }
    };

    let mut probe = store.clone();
    for id in store.trainable_ids() {
        let n = store.get(id).len();
        let zeros = vec![0.0; n];
        let analytic = grads.get(id).unwrap_or(&zeros).to_vec();
        for i in 0..n {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&probe, inputs)?;
            probe.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&probe, inputs)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let name = &store.entry(id).name;
            record(relative_error(analytic[i], numeric), format!("param {name}[{i}]"));
        }
    }

    let mut probe_inputs = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[k].len()];
        let analytic = g.grad(v).unwrap_or(&zeros).to_vec();
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe_inputs[k].data_mut()[i] = orig + h;
            let up = eval(store, &probe_inputs)?;
            probe_inputs[k].data_mut()[i] = orig - h;
            let down = eval(store, &probe_inputs)?;
            probe_inputs[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            record(relative_error(analytic[i], numeric), format!("input {k}[{i}]"));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::tensornet::layers::*;

    const TOL: f64 = 1e-4;

    /// Weighted sum so every output element gets a distinct upstream gradient.
    fn probe_loss(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        let shape = g.shape(y).to_vec();
        let w = Tensor::uniform(&shape, 1.0, &mut substream(seed, "probe", 0));
        let w = g.constant(w);
        let prod = g.mul(y, w)?;
        Ok(g.sum(prod))
    }

    fn assert_ok(report: GradCheckReport) {
        assert!(report.checked > 0);
        assert!(report.max_rel_err < TOL, "{report:?}");
    }

    fn layer_case(spec: LayerSpec, input_shape: &[usize], mode: Mode) {
        let mut rng = substream(11, "gc", 0);
        let mut store = ParamStore::new();
        let layer = Layer::build(&spec, &mut store, "l", &mut rng).unwrap();
        let x = Tensor::uniform(input_shape, 1.0, &mut rng);
        let report = check_gradients(&store, &[x], DEFAULT_STEP, |g, s, v| {
            let mut ctx = ForwardCtx::new(mode, substream(5, "drop", 0));
            let y = layer.forward(g, s, v[0], &mut ctx)?;
            probe_loss(g, y, 1)
        })
        .unwrap();
        assert_ok(report);
    }

    #[test]
    fn dense() {
        layer_case(LayerSpec::Dense { input: 5, units: 3 }, &[4, 5], Mode::Train);
    }

    #[test]
    fn conv3d_dilated() {
        let spec = LayerSpec::Conv3D {
            in_channels: 2,
            out_channels: 3,
            kernel: [3, 3, 3],
            dilation: [2, 1, 3],
        };
        layer_case(spec, &[2, 2, 4, 3, 5], Mode::Train);
    }

    #[test]
    fn batchnorm_train_and_eval() {
        layer_case(LayerSpec::BatchNorm { channels: 3 }, &[4, 3, 2, 1, 2], Mode::Train);
        layer_case(LayerSpec::BatchNorm { channels: 3 }, &[4, 3, 2], Mode::Eval);
    }

    #[test]
    fn maxpool_and_flatten() {
        layer_case(LayerSpec::MaxPool3D { window: [2, 1, 2] }, &[2, 2, 4, 2, 4], Mode::Train);
        layer_case(LayerSpec::Flatten, &[2, 3, 2], Mode::Train);
    }

    #[test]
    fn dropout_fixed_mask() {
        layer_case(LayerSpec::Dropout { rate: 0.3 }, &[4, 6], Mode::Train);
    }

    #[test]
    fn layernorm_and_avgpool() {
        layer_case(LayerSpec::LayerNorm { width: 6 }, &[3, 6], Mode::Train);
        layer_case(LayerSpec::AvgPool, &[5, 4], Mode::Train);
    }

    #[test]
    fn activations() {
        for a in [Activation::Relu, Activation::LeakyRelu, Activation::Sigmoid, Activation::Tanh] {
            layer_case(LayerSpec::Activation(a), &[3, 7], Mode::Train);
        }
    }

    #[test]
    fn multi_head_attention() {
        layer_case(LayerSpec::MultiHeadAttention { width: 8, heads: 4 }, &[3, 8], Mode::Train);
    }

    #[test]
    fn embedding_table() {
        let mut rng = substream(12, "gc", 0);
        let mut store = ParamStore::new();
        let emb = Embedding::new(&mut store, "e", 5, 4, &mut rng);
        let report = check_gradients(&store, &[], DEFAULT_STEP, |g, s, _| {
            let y = emb.lookup(g, s, &[4, 0, 4, 2])?;
            probe_loss(g, y, 2)
        })
        .unwrap();
        assert_ok(report);
    }

    #[test]
    fn spatial_attention_ops() {
        let mut rng = substream(13, "gc", 0);
        let x = Tensor::uniform(&[2, 3, 2, 2, 3], 1.0, &mut rng);
        let report = check_gradients(&ParamStore::new(), &[x], DEFAULT_STEP, |g, _, v| {
            let mx = g.channel_max(v[0])?;
            let mn = g.channel_mean(v[0])?;
            let both = g.concat_channels(mx, mn)?;
            let gate = g.sigmoid(both);
            let gate = g.channel_mean(gate)?;
            let y = g.mul_channel_broadcast(v[0], gate)?;
            probe_loss(g, y, 3)
        })
        .unwrap();
        assert_ok(report);
    }

    #[test]
    fn losses() {
        let mut rng = substream(14, "gc", 0);
        let logits = Tensor::uniform(&[6], 2.0, &mut rng);
        let target = Tensor::uniform(&[2, 3], 1.0, &mut rng);
        let labels = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let report = check_gradients(&ParamStore::new(), &[logits.clone()], DEFAULT_STEP, |g, _, v| {
            let p = g.sigmoid(v[0]);
            g.bce(p, &labels)
        })
        .unwrap();
        assert_ok(report);
        let report = check_gradients(&ParamStore::new(), &[logits], DEFAULT_STEP, |g, _, v| {
            let y = g.reshape(v[0], &[2, 3])?;
            g.mse(y, &target)
        })
        .unwrap();
        assert_ok(report);
    }

    #[test]
    fn shape_ops() {
        let mut rng = substream(15, "gc", 0);
        let a = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let b = Tensor::uniform(&[2, 3], 1.0, &mut rng);
        let report = check_gradients(&ParamStore::new(), &[a, b], DEFAULT_STEP, |g, _, v| {
            let r = g.rows(v[0], 1, 2)?;
            let s = g.sub(r, v[1])?;
            let cat = g.concat_rows(&[s, v[0]])?;
            let t = g.transpose(cat)?;
            let c = g.cols(t, 1, 4)?;
            let sm = g.softmax_rows(c)?;
            let m = g.matmul(sm, v[0])?;
            let m = g.scale(m, 0.7);
            let k = g.concat_cols(&[m, m])?;
            let mr = g.mean_rows(k)?;
            let added = g.add(mr, mr)?;
            let y = g.mean(added);
            let z = g.tanh(y);
            probe_loss(g, z, 4)
        })
        .unwrap();
        assert_ok(report);
    }
}

//! Builds a small conv + dense network on the tape, checks its gradients
//! against central differences and takes a few Adam steps.

use fwasense::rng::substream;
use fwasense::tensornet::gradcheck::{check_gradients, DEFAULT_STEP};
use fwasense::tensornet::layers::{Layer, LayerSpec};
use fwasense::tensornet::{Activation, Adam, AdamConfig, ForwardCtx, Graph, Grads, ParamStore, Tensor, Var};

struct Net {
    layers: Vec<Layer>,
}

impl Net {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> fwasense::Result<Var> {
        let mut ctx = ForwardCtx::eval();
        self.layers.iter().try_fold(x, |h, l| l.forward(g, store, h, &mut ctx))
    }
}

fn main() -> fwasense::Result<()> {
    let mut rng = substream(3, "example", 0);
    let mut store = ParamStore::new();
    let specs = [
        LayerSpec::Conv3D { in_channels: 1, out_channels: 4, kernel: [3, 3, 3], dilation: [1, 1, 2] },
        LayerSpec::Activation(Activation::Tanh),
        LayerSpec::MaxPool3D { window: [2, 1, 2] },
        LayerSpec::Flatten,
        LayerSpec::Dense { input: 4 * 2 * 2 * 4, units: 3 },
    ];
    let layers = specs
        .iter()
        .enumerate()
        .map(|(i, s)| Layer::build(s, &mut store, &format!("l{i}"), &mut rng))
        .collect::<fwasense::Result<Vec<_>>>()?;
    let net = Net { layers };

    let x = Tensor::uniform(&[2, 1, 4, 2, 8], 1.0, &mut rng);
    let target = Tensor::uniform(&[2, 3], 1.0, &mut rng);
    let report = check_gradients(&store, &[x.clone()], DEFAULT_STEP, |g, s, v| {
        let y = net.forward(g, s, v[0])?;
        g.mse(y, &target)
    })?;
    println!(
        "checked {} gradient entries, worst relative error {:.2e} at {}",
        report.checked, report.max_rel_err, report.worst
    );

    let mut adam = Adam::new(AdamConfig::with_lr(1e-2), &store);
    for step in 0..20 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = net.forward(&mut g, &store, xv)?;
        let loss = g.mse(y, &target)?;
        g.backward(loss)?;
        let mut grads = Grads::new(&store);
        g.collect_param_grads(&mut grads);
        adam.update(&mut store, &grads);
        if step % 5 == 0 {
            println!("step {step:2}: loss {:.5}", g.value(loss).item());
        }
    }
    Ok(())
}

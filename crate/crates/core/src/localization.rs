//! UAV localization.
//!
//! I-ULocNet estimates a coarse position from one pair's angle-delay map
//! and exposes an intermediate feature vector. C-ULocNet fuses the
//! estimates, features and pair indexes of the selected pairs with a
//! Transformer encoder (medium fusion). Hard fusion averages the estimates;
//! soft fusion feeds raw maps through the same encoder.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::AngleDelayMap;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::scenario::Point3;
use crate::tensornet::layers::{dropout, permutation, BatchNorm, Conv3d, Dense, Embedding, LayerNorm, MultiHeadAttention, LEAKY_SLOPE};
use crate::tensornet::schedule::{csv_err, EpochLog, PlateauConfig, PlateauStep, PlateauTracker};
use crate::tensornet::{Adam, AdamConfig, Checkpoint, ForwardCtx, Graph, Grads, Mode, ParamStore, Tensor, Var};

const POOL_WINDOW: [usize; 3] = [2, 1, 2];

/// Spatial attention: a sigmoid map from channel-max and channel-mean,
/// multiplied back onto every channel.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub conv: Conv3d,
}

impl SpatialAttention {
    pub fn new(store: &mut ParamStore, name: &str, kernel: usize, rng: &mut crate::rng::Rng) -> Self {
        SpatialAttention {
            conv: Conv3d::new(store, name, 2, 1, [kernel; 3], [1, 1, 1], rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mx = g.channel_max(x)?;
        let mn = g.channel_mean(x)?;
        let pooled = g.concat_channels(mx, mn)?;
        let logits = self.conv.forward(g, store, pooled)?;
        let mask = g.sigmoid(logits);
        g.mul_channel_broadcast(x, mask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocatorConfig {
    pub map_dims: [usize; 3],
    pub channels: [usize; 3],
    pub kernel: usize,
    /// Widths of the Dense chain before the position head.
    pub hidden: Vec<usize>,
    /// Feature tap, `dense<width>` naming one of the hidden layers.
    pub tap: String,
    /// Positions are divided by this before the loss.
    pub position_scale: f64,
}

impl LocatorConfig {
    pub fn for_map(map_dims: [usize; 3], position_scale: f64) -> Self {
        LocatorConfig {
            map_dims,
            channels: [8, 16, 32],
            kernel: 3,
            hidden: vec![256, 128, 64, 32],
            tap: "dense64".into(),
            position_scale,
        }
    }

    /// Index into `hidden` of the tapped layer.
    pub fn tap_index(&self) -> Result<usize> {
        let width: Option<usize> = self.tap.strip_prefix("dense").and_then(|w| w.parse().ok());
        width
            .and_then(|w| self.hidden.iter().position(|&h| h == w))
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown feature tap `{}`; expected dense<width> with width in {:?}",
                    self.tap, self.hidden
                ))
            })
    }

    pub fn feature_dim(&self) -> Result<usize> {
        Ok(self.hidden[self.tap_index()?])
    }

    fn trunk_dims(&self) -> [usize; 3] {
        let mut d = self.map_dims;
        for _ in 0..2 {
            for a in 0..3 {
                d[a] /= POOL_WINDOW[a];
            }
        }
        d
    }

    pub fn validate(&self) -> Result<()> {
        self.tap_index()?;
        if self.kernel % 2 == 0 || self.channels.contains(&0) || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("odd kernel and positive widths required".into()));
        }
        if self.trunk_dims().contains(&0) {
            return Err(Error::InvalidArgument(format!("map {:?} too small", self.map_dims)));
        }
        if !(self.position_scale > 0.0 && self.position_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("position scale {}", self.position_scale)));
        }
        Ok(())
    }
}

/// I-ULocNet.
#[derive(Debug, Clone)]
pub struct Locator {
    pub config: LocatorConfig,
    pub store: ParamStore,
    blocks: Vec<(Conv3d, BatchNorm)>,
    attention: Vec<SpatialAttention>,
    dense: Vec<Dense>,
    head: Dense,
    tap: usize,
}

impl Locator {
    pub fn new(config: LocatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tap = config.tap_index()?;
        let mut rng = substream(seed, "init", 1);
        let mut store = ParamStore::new();
        let k = [config.kernel; 3];
        let mut blocks = Vec::new();
        let mut cin = 1;
        for (i, &cout) in config.channels.iter().enumerate() {
            let conv = Conv3d::new(&mut store, &format!("loc.conv{i}"), cin, cout, k, [1; 3], &mut rng);
            blocks.push((conv, BatchNorm::new(&mut store, &format!("loc.bn{i}"), cout)));
            cin = cout;
        }
        let attention = (0..2)
            .map(|i| SpatialAttention::new(&mut store, &format!("loc.sa{i}"), config.kernel, &mut rng))
            .collect();
        let mut width = cin * config.trunk_dims().iter().product::<usize>();
        let mut dense = Vec::new();
        for (i, &h) in config.hidden.iter().enumerate() {
            dense.push(Dense::new(&mut store, &format!("loc.dense{i}"), width, h, &mut rng));
            width = h;
        }
        let head = Dense::new(&mut store, "loc.head", width, 3, &mut rng);
        Ok(Locator { config, store, blocks, attention, dense, head, tap })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: serde_json::json!({ "model": "locator", "config": self.config }),
            params: self.store.clone(),
            optimizer: None,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("model").and_then(|m| m.as_str()) != Some("locator") {
            return Err(Error::InvalidArgument("checkpoint does not hold an I-ULocNet".into()));
        }
        let config: LocatorConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let mut loc = Locator::new(config, 0)?;
        loc.store.load_from(&ck.params)?;
        Ok(loc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn feature_dim(&self) -> usize {
        self.config.hidden[self.tap]
    }

    fn stack(&self, maps: &[&AngleDelayMap]) -> Result<Tensor> {
        let d = self.config.map_dims;
        let mut data = Vec::with_capacity(maps.len() * d.iter().product::<usize>());
        for m in maps {
            if m.dims != [d[0], d[1], d[2], 1] {
                return Err(Error::shape("angle-delay map", &[d[0], d[1], d[2], 1], &m.dims));
            }
            data.extend_from_slice(&m.data);
        }
        Tensor::new(&[maps.len(), 1, d[0], d[1], d[2]], data)
    }

    /// Normalized positions `[B, 3]` and tapped features `[B, N_v]`.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, ctx: &mut ForwardCtx) -> Result<(Var, Var)> {
        let s = &self.store;
        let mut h = x;
        for (i, (conv, bn)) in self.blocks.iter().enumerate() {
            h = conv.forward(g, s, h)?;
            h = bn.forward(g, s, h, ctx)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
            if let Some(sa) = self.attention.get(i) {
                h = sa.forward(g, s, h)?;
            }
            if i != 1 {
                h = g.max_pool3d(h, POOL_WINDOW)?;
            }
        }
        let mut h = g.flatten(h)?;
        let mut tapped = h;
        for (i, d) in self.dense.iter().enumerate() {
            h = d.forward(g, s, h)?;
            h = g.relu(h);
            if i == self.tap {
                tapped = h;
            }
        }
        let p = self.head.forward(g, s, h)?;
        Ok((p, tapped))
    }

    /// Eval-mode estimates and features for several maps.
    pub fn locate_batch(&self, maps: &[&AngleDelayMap]) -> Result<Vec<(Point3, Vec<f64>)>> {
        if maps.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let x = g.constant(self.stack(maps)?);
        let (p, v) = self.forward_graph(&mut g, x, &mut ForwardCtx::eval())?;
        let scale = self.config.position_scale;
        let nv = self.feature_dim();
        let pd = g.value(p).data();
        let vd = g.value(v).data();
        Ok((0..maps.len())
            .map(|i| {
                let q = &pd[i * 3..i * 3 + 3];
                (
                    Point3::new(q[0] * scale, q[1] * scale, q[2] * scale),
                    vd[i * nv..(i + 1) * nv].to_vec(),
                )
            })
            .collect())
    }

    pub fn locate(&self, map: &AngleDelayMap) -> Result<(Point3, Vec<f64>)> {
        Ok(self.locate_batch(&[map])?.remove(0))
    }

    /// Applies the position head alone to a feature of the head's input width.
    pub fn head_from_feature(&self, feature: &[f64]) -> Result<Point3> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, feature.len()], feature.to_vec())?);
        let p = self.head.forward(&mut g, &self.store, x)?;
        let q = g.value(p).data();
        let scale = self.config.position_scale;
        Ok(Point3::new(q[0] * scale, q[1] * scale, q[2] * scale))
    }
}

/// Coordinate-wise mean of the estimates.
pub fn hard_fusion(estimates: &[Point3]) -> Result<Point3> {
    if estimates.is_empty() {
        return Err(Error::Empty("estimates to fuse"));
    }
    let n = estimates.len() as f64;
    let mut acc = [0.0; 3];
    for p in estimates {
        for a in 0..3 {
            acc[a] += p.0[a];
        }
    }
    Ok(Point3(acc.map(|v| v / n)))
}

/// Per-pair inputs of medium fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInput {
    pub estimates: Vec<Point3>,
    pub features: Vec<Vec<f64>>,
    /// Flat pair indexes, 1-based.
    pub indexes: Vec<usize>,
}

/// Token rows plus their pair indexes, ready for the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub rows: Vec<Vec<f64>>,
    pub indexes: Vec<usize>,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Reorders tokens and indexes together.
    pub fn permuted(&self, order: &[usize]) -> TokenSet {
        TokenSet {
            rows: order.iter().map(|&i| self.rows[i].clone()).collect(),
            indexes: order.iter().map(|&i| self.indexes[i]).collect(),
        }
    }
}

impl FusionInput {
    /// Rows `[p / scale, v]`.
    pub fn tokens(&self, position_scale: f64) -> Result<TokenSet> {
        let l = self.indexes.len();
        if self.estimates.len() != l || self.features.len() != l {
            return Err(Error::shape(
                "fusion input",
                &[l, l, l],
                &[self.estimates.len(), self.features.len(), l],
            ));
        }
        let rows = self
            .estimates
            .iter()
            .zip(&self.features)
            .map(|(p, v)| {
                let mut row: Vec<f64> = p.0.iter().map(|c| c / position_scale).collect();
                row.extend_from_slice(v);
                row
            })
            .collect();
        Ok(TokenSet { rows, indexes: self.indexes.clone() })
    }
}

/// Soft-fusion tokens: each pair's flattened map.
pub fn soft_tokens(maps: &[&AngleDelayMap], indexes: &[usize]) -> Result<TokenSet> {
    if maps.len() != indexes.len() {
        return Err(Error::shape("soft fusion input", &[indexes.len()], &[maps.len()]));
    }
    Ok(TokenSet {
        rows: maps.iter().map(|m| m.data.clone()).collect(),
        indexes: indexes.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// `M N`; the index embedding has `M N + 1` rows, row 0 unused.
    pub n_pairs: usize,
    /// Width of one input token row.
    pub token_dim: usize,
    pub width: usize,
    pub ffn: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub position_scale: f64,
    /// Add the mean of the tokens' leading estimate columns to the head
    /// output, so the network learns a correction to hard fusion.
    #[serde(default)]
    pub residual: bool,
}

impl FusionConfig {
    pub fn new(n_pairs: usize, token_dim: usize, position_scale: f64) -> Self {
        FusionConfig {
            n_pairs,
            token_dim,
            width: 64,
            ffn: 256,
            layers: 4,
            heads: 8,
            dropout: 0.1,
            position_scale,
            residual: false,
        }
    }

    /// C-ULocNet tokens: estimate plus feature, with the estimate skip.
    pub fn medium(n_pairs: usize, feature_dim: usize, position_scale: f64) -> Self {
        FusionConfig { residual: true, ..Self::new(n_pairs, 3 + feature_dim, position_scale) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 || self.token_dim == 0 || self.width == 0 || self.ffn == 0 || self.layers == 0 {
            return Err(Error::InvalidArgument("fusion sizes must be positive".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} heads do not divide width {}",
                self.heads, self.width
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.position_scale > 0.0) {
            return Err(Error::InvalidArgument("dropout in [0, 1) and positive scale required".into()));
        }
        if self.residual && self.token_dim < 3 {
            return Err(Error::InvalidArgument("residual fusion needs tokens led by an estimate".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ff1: Dense,
    ff2: Dense,
    ln2: LayerNorm,
}

/// Transformer fusion network shared by C-ULocNet and the soft baseline.
#[derive(Debug, Clone)]
pub struct FusionNet {
    pub config: FusionConfig,
    pub store: ParamStore,
    proj: Dense,
    proj_ln: LayerNorm,
    embed: Embedding,
    layers: Vec<EncoderLayer>,
    head_hidden: Dense,
    head_out: Dense,
}

impl FusionNet {
    pub fn new(config: FusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "init", 2);
        let mut store = ParamStore::new();
        let d = config.width;
        let proj = Dense::new(&mut store, "fus.proj", config.token_dim, d, &mut rng);
        let proj_ln = LayerNorm::new(&mut store, "fus.proj_ln", d);
        let embed = Embedding::new(&mut store, "fus.index", config.n_pairs + 1, d, &mut rng);
        let layers = (0..config.layers)
            .map(|i| {
                let p = format!("fus.enc{i}");
                Ok(EncoderLayer {
                    attn: MultiHeadAttention::new(&mut store, &format!("{p}.attn"), d, config.heads, &mut rng)?,
                    ln1: LayerNorm::new(&mut store, &format!("{p}.ln1"), d),
                    ff1: Dense::new(&mut store, &format!("{p}.ff1"), d, config.ffn, &mut rng),
                    ff2: Dense::new(&mut store, &format!("{p}.ff2"), config.ffn, d, &mut rng),
                    ln2: LayerNorm::new(&mut store, &format!("{p}.ln2"), d),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head_hidden = Dense::new(&mut store, "fus.head.hidden", d, d, &mut rng);
        let head_out = Dense::new(&mut store, "fus.head.out", d, 3, &mut rng);
        if config.residual {
            // Start exactly at hard fusion.
            for id in [head_out.w, head_out.b] {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
        Ok(FusionNet { config, store, proj, proj_ln, embed, layers, head_hidden, head_out })
    }

    pub fn to_checkpoint(&self, kind: &str) -> Checkpoint {
        Checkpoint {
            meta: serde_json::json!({ "model": kind, "config": self.config }),
            params: self.store.clone(),
            optimizer: None,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        match ck.meta.get("model").and_then(|m| m.as_str()) {
            Some("c-ulocnet") | Some("soft-fusion") => {}
            _ => return Err(Error::InvalidArgument("checkpoint does not hold a fusion network".into())),
        }
        let config: FusionConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let mut net = FusionNet::new(config, 0)?;
        net.store.load_from(&ck.params)?;
        Ok(net)
    }

    fn check_tokens(&self, t: &TokenSet) -> Result<()> {
        if t.is_empty() {
            return Err(Error::Empty("fusion tokens"));
        }
        if t.indexes.len() != t.rows.len() {
            return Err(Error::shape("token indexes", &[t.rows.len()], &[t.indexes.len()]));
        }
        if let Some(r) = t.rows.iter().find(|r| r.len() != self.config.token_dim) {
            return Err(Error::shape("token row", &[self.config.token_dim], &[r.len()]));
        }
        let mut seen = vec![false; self.config.n_pairs + 1];
        for &e in &t.indexes {
            if e == 0 || e > self.config.n_pairs {
                return Err(Error::OutOfRange(format!(
                    "pair index {e} outside 1..={}",
                    self.config.n_pairs
                )));
            }
            if std::mem::replace(&mut seen[e], true) {
                return Err(Error::InvalidArgument(format!("pair index {e} repeated")));
            }
        }
        Ok(())
    }

    /// Normalized position `[1, 3]` for one token set.
    pub fn forward_graph(&self, g: &mut Graph, t: &TokenSet, ctx: &mut ForwardCtx) -> Result<Var> {
        self.check_tokens(t)?;
        let s = &self.store;
        let rows: Vec<f64> = t.rows.iter().flatten().copied().collect();
        let input = g.constant(Tensor::new(&[t.len(), self.config.token_dim], rows)?);
        let x = self.proj.forward(g, s, input)?;
        let x = self.proj_ln.forward(g, s, x)?;
        let e = self.embed.lookup(g, s, &t.indexes)?;
        let mut x = g.add(x, e)?;
        for layer in &self.layers {
            let a = layer.attn.forward(g, s, x)?;
            let r = g.add(x, a)?;
            let x1 = layer.ln1.forward(g, s, r)?;
            let f = layer.ff1.forward(g, s, x1)?;
            let f = g.relu(f);
            let f = layer.ff2.forward(g, s, f)?;
            let f = dropout(g, f, self.config.dropout, ctx);
            let r = g.add(x1, f)?;
            x = layer.ln2.forward(g, s, r)?;
        }
        let pooled = g.mean_rows(x)?;
        let h = self.head_hidden.forward(g, s, pooled)?;
        let h = g.relu(h);
        let out = self.head_out.forward(g, s, h)?;
        if !self.config.residual {
            return Ok(out);
        }
        let estimates = g.cols(input, 0, 3)?;
        let mean = g.mean_rows(estimates)?;
        g.add(out, mean)
    }

    pub fn predict(&self, t: &TokenSet) -> Result<Point3> {
        let mut g = Graph::new();
        let p = self.forward_graph(&mut g, t, &mut ForwardCtx::eval())?;
        let scale = self.config.position_scale;
        let q = g.value(p).data();
        Ok(Point3::new(q[0] * scale, q[1] * scale, q[2] * scale))
    }

    /// C-ULocNet inference.
    pub fn fuse(&self, fin: &FusionInput) -> Result<Point3> {
        self.predict(&fin.tokens(self.config.position_scale)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub plateau: PlateauConfig,
}

impl LocHyper {
    pub fn individual() -> Self {
        LocHyper {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 1000,
            seed: 7,
            plateau: PlateauConfig::default(),
        }
    }

    pub fn cooperative() -> Self {
        LocHyper { max_epochs: 300, ..Self::individual() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidArgument(format!("invalid localization hyperparameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocTrainReport {
    pub curve: Vec<EpochLog>,
    /// `None` when no epoch beat the starting weights.
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
    pub initial_val_loss: f64,
}

fn scaled_target(points: &[&Point3], scale: f64) -> Result<Tensor> {
    let data = points.iter().flat_map(|p| p.0.map(|c| c / scale)).collect();
    Tensor::new(&[points.len(), 3], data)
}

trait Trainable {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
}

impl Trainable for Locator {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl Trainable for FusionNet {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

/// Shared epoch loop: `batch_loss` builds the loss of one batch on a fresh graph.
fn fit<M: Trainable>(
    model: &mut M,
    n_train: usize,
    hyper: &LocHyper,
    batch_loss: impl Fn(&M, &[usize], &mut Graph, &mut ForwardCtx) -> Result<Var>,
    val_loss: impl Fn(&M) -> Result<f64>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<LocTrainReport> {
    hyper.validate()?;
    if n_train == 0 {
        return Err(Error::Empty("training set"));
    }
    let mut adam = Adam::new(AdamConfig::with_lr(hyper.lr), model.store());
    let mut tracker = PlateauTracker::new(hyper.plateau, hyper.lr);
    let initial_val_loss = val_loss(model)?;
    // The starting weights stay a candidate, so training never returns a
    // model worse on validation than the one it was given.
    let mut best = model.store().clone();
    let mut best_val_loss = initial_val_loss;
    let mut best_epoch = None;
    let mut curve = Vec::new();
    for epoch in 0..hyper.max_epochs {
        let mut rng = substream(hyper.seed, "sampling", epoch as u64);
        let order = permutation(n_train, &mut rng);
        let mut sum = 0.0;
        for (b, batch) in order.chunks(hyper.batch_size).enumerate() {
            let mut ctx = ForwardCtx::new(
                Mode::Train,
                substream(hyper.seed, "dropout", ((epoch as u64) << 32) | b as u64),
            );
            let mut g = Graph::new();
            let loss = batch_loss(model, batch, &mut g, &mut ctx)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Divergence(format!("localization loss {lv} at epoch {epoch}, batch {b}")));
            }
            g.backward(loss)?;
            let mut grads = Grads::new(model.store());
            g.collect_param_grads(&mut grads);
            if !grads.is_finite() {
                return Err(Error::Divergence(format!("non-finite gradient at epoch {epoch}, batch {b}")));
            }
            adam.update(model.store_mut(), &grads);
            ctx.apply_bn_updates(model.store_mut());
            sum += lv * batch.len() as f64;
        }
        let v = val_loss(model)?;
        if !v.is_finite() {
            return Err(Error::Divergence(format!("validation loss {v} at epoch {epoch}")));
        }
        let log = EpochLog { epoch, train_loss: sum / n_train as f64, val_loss: v, lr: adam.lr() };
        on_epoch(&log);
        curve.push(log);
        if v < best_val_loss {
            best = model.store().clone();
            best_val_loss = v;
            best_epoch = Some(epoch);
        }
        match tracker.observe(epoch, v) {
            PlateauStep::Improved => {}
            PlateauStep::Decayed => adam.set_lr(tracker.lr),
            PlateauStep::Waiting => {}
            PlateauStep::Stop => break,
        }
    }
    *model.store_mut() = best;
    Ok(LocTrainReport {
        curve,
        best_epoch,
        best_val_loss,
        initial_val_loss,
    })
}

fn normalized_sq_err(p: &Point3, truth: &Point3, scale: f64) -> f64 {
    (0..3).map(|a| ((p.0[a] - truth.0[a]) / scale).powi(2)).sum::<f64>() / 3.0
}

/// Trains I-ULocNet on `(map, true position)` examples with MSE on
/// normalized positions.
pub fn train_individual(
    train: &[(&AngleDelayMap, Point3)],
    val: &[(&AngleDelayMap, Point3)],
    config: LocatorConfig,
    hyper: &LocHyper,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(Locator, LocTrainReport)> {
    if val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let mut model = Locator::new(config, hyper.seed)?;
    let scale = model.config.position_scale;
    let report = fit(
        &mut model,
        train.len(),
        hyper,
        |m, batch, g, ctx| {
            let maps: Vec<_> = batch.iter().map(|&i| train[i].0).collect();
            let x = g.constant(m.stack(&maps)?);
            let (p, _) = m.forward_graph(g, x, ctx)?;
            let target = scaled_target(&batch.iter().map(|&i| &train[i].1).collect::<Vec<_>>(), scale)?;
            g.mse(p, &target)
        },
        |m| {
            let mut total = 0.0;
            for chunk in val.chunks(256) {
                let maps: Vec<_> = chunk.iter().map(|e| e.0).collect();
                for ((p, _), (_, truth)) in m.locate_batch(&maps)?.iter().zip(chunk) {
                    total += normalized_sq_err(p, truth, scale);
                }
            }
            Ok(total / val.len() as f64)
        },
        on_epoch,
    )?;
    Ok((model, report))
}

/// Trains a fusion network (C-ULocNet or the soft baseline) on
/// `(tokens, true position)` examples.
pub fn train_fusion(
    train: &[(TokenSet, Point3)],
    val: &[(TokenSet, Point3)],
    config: FusionConfig,
    hyper: &LocHyper,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(FusionNet, LocTrainReport)> {
    if val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let mut model = FusionNet::new(config, hyper.seed)?;
    let scale = model.config.position_scale;
    let report = fit(
        &mut model,
        train.len(),
        hyper,
        |net, batch, g, ctx| {
            let mut preds = Vec::with_capacity(batch.len());
            for &i in batch {
                preds.push(net.forward_graph(g, &train[i].0, ctx)?);
            }
            let p = g.concat_rows(&preds)?;
            let target = scaled_target(&batch.iter().map(|&i| &train[i].1).collect::<Vec<_>>(), scale)?;
            g.mse(p, &target)
        },
        |net| {
            let mut total = 0.0;
            for (t, truth) in val {
                total += normalized_sq_err(&net.predict(t)?, truth, scale);
            }
            Ok(total / val.len() as f64)
        },
        on_epoch,
    )?;
    Ok((model, report))
}

/// One row of a localization trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub sample: usize,
    pub variant: String,
    pub l: usize,
    /// Selected flat indexes joined by `;`.
    pub selected: String,
    /// Individual estimates as `x y z` triples joined by `;`.
    pub individual: String,
    pub est_x: f64,
    pub est_y: f64,
    pub est_z: f64,
    pub true_x: f64,
    pub true_y: f64,
    pub true_z: f64,
    pub ape: f64,
}

impl TraceRow {
    pub fn new(sample: usize, variant: &str, indexes: &[usize], individual: &[Point3], fused: &Point3, truth: &Point3) -> Self {
        let join = |v: Vec<String>| v.join(";");
        TraceRow {
            sample,
            variant: variant.to_string(),
            l: indexes.len(),
            selected: join(indexes.iter().map(|i| i.to_string()).collect()),
            individual: join(
                individual
                    .iter()
                    .map(|p| format!("{:.4} {:.4} {:.4}", p.x(), p.y(), p.z()))
                    .collect(),
            ),
            est_x: fused.x(),
            est_y: fused.y(),
            est_z: fused.z(),
            true_x: truth.x(),
            true_y: truth.y(),
            true_z: truth.z(),
            ape: fused.distance(truth),
        }
    }
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

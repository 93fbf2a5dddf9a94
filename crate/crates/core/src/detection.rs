//! Cooperative UAV detection.
//!
//! A shared per-pair network (I-UDetNet) turns each angle-delay map into an
//! embedding; gated-attention MIL pooling (C-UDetNet) weighs the pairs and
//! a small classifier decides on presence. Only scene labels are used for
//! training, with a random subset of pairs per sample.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::channel::{CfrTensor, SampleRecord};
use crate::dsp::{preprocess, AngleDelayMap};
use crate::error::{Error, Result};
use crate::rng::{substream, Rng};
use crate::scenario::PairId;
use crate::tensornet::layers::{dropout, permutation, BatchNorm, Conv3d, Dense, LEAKY_SLOPE};
use crate::tensornet::schedule::{csv_err, EpochLog, PlateauConfig, PlateauStep, PlateauTracker};
use crate::tensornet::{Adam, AdamConfig, Checkpoint, ForwardCtx, Graph, Grads, Mode, ParamStore, Tensor, Var};

pub const DECISION_THRESHOLD: f64 = 0.5;
const POOL_WINDOW: [usize; 3] = [2, 1, 2];
/// Blocks followed by max pooling.
const POOL_AFTER: [bool; 3] = [true, false, true];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// `[N_r, N_t, N_c']` of the input maps.
    pub map_dims: [usize; 3],
    pub channels: [usize; 3],
    pub dilations: [usize; 3],
    pub kernel: usize,
    pub embedding: usize,
    pub attention_hidden: usize,
    pub classifier_hidden: usize,
    pub dropout: f64,
}

impl DetectorConfig {
    pub fn for_map(map_dims: [usize; 3]) -> Self {
        DetectorConfig {
            map_dims,
            channels: [8, 16, 32],
            dilations: [1, 2, 3],
            kernel: 3,
            embedding: 128,
            attention_hidden: 64,
            classifier_hidden: 64,
            dropout: 0.1,
        }
    }

    pub fn delay_keep(&self) -> usize {
        self.map_dims[2]
    }

    /// Spatial dims after the conv stack.
    pub fn trunk_dims(&self) -> [usize; 3] {
        let mut d = self.map_dims;
        for &pool in &POOL_AFTER {
            if pool {
                for a in 0..3 {
                    d[a] /= POOL_WINDOW[a];
                }
            }
        }
        d
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.kernel % 2 == 0 {
            return bad(format!("kernel size {} must be odd", self.kernel));
        }
        if self.channels.contains(&0) || self.dilations.contains(&0) {
            return bad("channels and dilations must be positive".into());
        }
        if self.embedding == 0 || self.attention_hidden == 0 || self.classifier_hidden == 0 {
            return bad("layer widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {}", self.dropout));
        }
        if self.trunk_dims().contains(&0) {
            return bad(format!("map {:?} too small for the pooling stack", self.map_dims));
        }
        Ok(())
    }
}

/// Per-pair attention logits and weights of one pooled sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub pairs: Vec<PairId>,
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
}

impl AttentionReport {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn weight_of(&self, pair: PairId) -> Option<f64> {
        self.pairs.iter().position(|&p| p == pair).map(|i| self.weights[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionDecision {
    pub probability: f64,
    pub label: u8,
    pub pooled: Vec<f64>,
}

impl DetectionDecision {
    fn new(probability: f64, pooled: Vec<f64>) -> Self {
        DetectionDecision {
            probability,
            label: u8::from(probability >= DECISION_THRESHOLD),
            pooled,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub store: ParamStore,
    blocks: Vec<(Conv3d, BatchNorm)>,
    embed: Dense,
    att_v: Dense,
    att_u: Dense,
    att_w: Dense,
    cls_hidden: Dense,
    cls_out: Dense,
}

impl Detector {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "init", 0);
        let mut store = ParamStore::new();
        let k = [config.kernel; 3];
        let mut blocks = Vec::new();
        let mut cin = 1;
        for (i, (&cout, &dil)) in config.channels.iter().zip(&config.dilations).enumerate() {
            let conv = Conv3d::new(&mut store, &format!("det.conv{i}"), cin, cout, k, [dil; 3], &mut rng);
            let bn = BatchNorm::new(&mut store, &format!("det.bn{i}"), cout);
            blocks.push((conv, bn));
            cin = cout;
        }
        let flat = config.channels[2] * config.trunk_dims().iter().product::<usize>();
        let ne = config.embedding;
        let ha = config.attention_hidden;
        let embed = Dense::new(&mut store, "det.embed", flat, ne, &mut rng);
        let att_v = Dense::new(&mut store, "det.att.v", ne, ha, &mut rng);
        let att_u = Dense::new(&mut store, "det.att.u", ne, ha, &mut rng);
        let att_w = Dense::new(&mut store, "det.att.w", ha, 1, &mut rng);
        let cls_hidden = Dense::new(&mut store, "det.cls.hidden", ne, config.classifier_hidden, &mut rng);
        let cls_out = Dense::new(&mut store, "det.cls.out", config.classifier_hidden, 1, &mut rng);
        Ok(Detector {
            config,
            store,
            blocks,
            embed,
            att_v,
            att_u,
            att_w,
            cls_hidden,
            cls_out,
        })
    }

    pub fn to_checkpoint(&self, optimizer: Option<&Adam>) -> Checkpoint {
        Checkpoint {
            meta: serde_json::json!({ "model": "detector", "config": self.config }),
            params: self.store.clone(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("model").and_then(|m| m.as_str()) != Some("detector") {
            return Err(Error::InvalidArgument("checkpoint does not hold a detector".into()));
        }
        let config: DetectorConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let mut det = Detector::new(config, 0)?;
        det.store.load_from(&ck.params)?;
        Ok(det)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(None).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    fn check_map(&self, map: &AngleDelayMap) -> Result<()> {
        let d = self.config.map_dims;
        if map.dims != [d[0], d[1], d[2], 1] {
            return Err(Error::shape("angle-delay map", &[d[0], d[1], d[2], 1], &map.dims));
        }
        Ok(())
    }

    /// Stacks maps into a `[P, 1, d0, d1, d2]` input.
    fn stack(&self, maps: &[&AngleDelayMap]) -> Result<Tensor> {
        let d = self.config.map_dims;
        let mut data = Vec::with_capacity(maps.len() * d.iter().product::<usize>());
        for m in maps {
            self.check_map(m)?;
            data.extend_from_slice(&m.data);
        }
        Tensor::new(&[maps.len(), 1, d[0], d[1], d[2]], data)
    }

    /// I-UDetNet on a `[P, 1, d0, d1, d2]` batch, giving `[P, N_e]`.
    pub fn embed_graph(&self, g: &mut Graph, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let mut h = x;
        for ((conv, bn), &pool) in self.blocks.iter().zip(&POOL_AFTER) {
            h = conv.forward(g, &self.store, h)?;
            h = bn.forward(g, &self.store, h, ctx)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
            if pool {
                h = g.max_pool3d(h, POOL_WINDOW)?;
            }
        }
        let h = g.flatten(h)?;
        let h = self.embed.forward(g, &self.store, h)?;
        Ok(g.sigmoid(h))
    }

    /// Gated attention over `[K, N_e]`; returns pooled `[1, N_e]`, logits
    /// `[K, 1]` and weights `[1, K]`.
    pub fn pool_graph(&self, g: &mut Graph, h: Var) -> Result<(Var, Var, Var)> {
        let v = self.att_v.forward(g, &self.store, h)?;
        let v = g.tanh(v);
        let u = self.att_u.forward(g, &self.store, h)?;
        let u = g.sigmoid(u);
        let gated = g.mul(v, u)?;
        let logits = self.att_w.forward(g, &self.store, gated)?;
        let row = g.transpose(logits)?;
        let weights = g.softmax_rows(row)?;
        let z = g.matmul(weights, h)?;
        Ok((z, logits, weights))
    }

    /// Classifier on `[B, N_e]`, giving probabilities `[B, 1]`.
    pub fn classify_graph(&self, g: &mut Graph, z: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let h = self.cls_hidden.forward(g, &self.store, z)?;
        let h = g.relu(h);
        let h = dropout(g, h, self.config.dropout, ctx);
        let p = self.cls_out.forward(g, &self.store, h)?;
        Ok(g.sigmoid(p))
    }

    /// Embedding of one map in eval mode.
    pub fn embed(&self, map: &AngleDelayMap) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(self.stack(&[map])?);
        let h = self.embed_graph(&mut g, x, &mut ForwardCtx::eval())?;
        Ok(g.value(h).data().to_vec())
    }

    pub fn mil_pool(&self, embeddings: &[(PairId, Vec<f64>)]) -> Result<(Vec<f64>, AttentionReport)> {
        if embeddings.is_empty() {
            return Err(Error::Empty("pair embeddings"));
        }
        let ne = self.config.embedding;
        let mut data = Vec::with_capacity(embeddings.len() * ne);
        for (_, e) in embeddings {
            if e.len() != ne {
                return Err(Error::shape("embedding", &[ne], &[e.len()]));
            }
            data.extend_from_slice(e);
        }
        let mut g = Graph::new();
        let h = g.constant(Tensor::new(&[embeddings.len(), ne], data)?);
        let (z, logits, weights) = self.pool_graph(&mut g, h)?;
        let report = AttentionReport {
            pairs: embeddings.iter().map(|(p, _)| *p).collect(),
            logits: g.value(logits).data().to_vec(),
            weights: g.value(weights).data().to_vec(),
        };
        Ok((g.value(z).data().to_vec(), report))
    }

    pub fn classify(&self, z: &[f64]) -> Result<DetectionDecision> {
        let ne = self.config.embedding;
        if z.len() != ne {
            return Err(Error::shape("pooled feature", &[ne], &[z.len()]));
        }
        let mut g = Graph::new();
        let zv = g.constant(Tensor::new(&[1, ne], z.to_vec())?);
        let p = self.classify_graph(&mut g, zv, &mut ForwardCtx::eval())?;
        Ok(DetectionDecision::new(g.value(p).item(), z.to_vec()))
    }

    /// Eval-mode detection for several samples at once; each sample is a
    /// nonempty list of `(pair, map)`.
    pub fn detect_batch(
        &self,
        samples: &[Vec<(PairId, &AngleDelayMap)>],
    ) -> Result<Vec<(DetectionDecision, AttentionReport)>> {
        if samples.iter().any(|s| s.is_empty()) {
            return Err(Error::Empty("pair subset"));
        }
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let maps: Vec<&AngleDelayMap> = samples.iter().flatten().map(|(_, m)| *m).collect();
        let mut g = Graph::new();
        let x = g.constant(self.stack(&maps)?);
        let mut ctx = ForwardCtx::eval();
        let h = self.embed_graph(&mut g, x, &mut ctx)?;
        let mut offset = 0;
        let mut pooled = Vec::with_capacity(samples.len());
        let mut parts = Vec::with_capacity(samples.len());
        for s in samples {
            let hs = g.rows(h, offset, s.len())?;
            offset += s.len();
            let (z, logits, weights) = self.pool_graph(&mut g, hs)?;
            pooled.push(z);
            parts.push((z, logits, weights));
        }
        let zs = g.concat_rows(&pooled)?;
        let p = self.classify_graph(&mut g, zs, &mut ctx)?;
        let probs = g.value(p).data().to_vec();
        Ok(samples
            .iter()
            .zip(parts)
            .zip(probs)
            .map(|((s, (z, logits, weights)), prob)| {
                let report = AttentionReport {
                    pairs: s.iter().map(|(p, _)| *p).collect(),
                    logits: g.value(logits).data().to_vec(),
                    weights: g.value(weights).data().to_vec(),
                };
                (DetectionDecision::new(prob, g.value(z).data().to_vec()), report)
            })
            .collect())
    }

    pub fn detect_maps(&self, pairs: &[(PairId, &AngleDelayMap)]) -> Result<(DetectionDecision, AttentionReport)> {
        if pairs.is_empty() {
            return Err(Error::Empty("pair subset"));
        }
        let mut out = self.detect_batch(&[pairs.to_vec()])?;
        Ok(out.remove(0))
    }

    /// Preprocesses raw CFRs of any nonempty pair subset and detects.
    pub fn detect(&self, cfrs: &[CfrTensor]) -> Result<(DetectionDecision, AttentionReport)> {
        if cfrs.is_empty() {
            return Err(Error::Empty("pair subset"));
        }
        let maps = cfrs
            .iter()
            .map(|h| preprocess(h, self.config.delay_keep()))
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<(PairId, &AngleDelayMap)> = cfrs.iter().map(|h| h.pair).zip(&maps).collect();
        self.detect_maps(&pairs)
    }
}

/// A training sample with pair labels stripped: maps of every pair in flat
/// order plus the scene label.
#[derive(Debug, Clone)]
pub struct DetectionExample {
    pub pairs: Vec<PairId>,
    pub maps: Vec<AngleDelayMap>,
    pub scene_label: u8,
}

impl DetectionExample {
    pub fn from_record(rec: &SampleRecord, delay_keep: usize) -> Result<Self> {
        let maps = rec
            .cfrs
            .iter()
            .map(|h| preprocess(h, delay_keep))
            .collect::<Result<Vec<_>>>()?;
        Ok(DetectionExample {
            pairs: rec.cfrs.iter().map(|h| h.pair).collect(),
            maps,
            scene_label: rec.scene_label,
        })
    }

    pub fn all_pairs(&self) -> Vec<(PairId, &AngleDelayMap)> {
        self.pairs.iter().copied().zip(&self.maps).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub plateau: PlateauConfig,
}

impl Default for DetectorHyper {
    fn default() -> Self {
        DetectorHyper {
            lr: 1e-4,
            batch_size: 64,
            max_epochs: 200,
            seed: 7,
            plateau: PlateauConfig::default(),
        }
    }
}

impl DetectorHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate, batch size and epochs must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorTrainReport {
    pub curve: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// `subset_sizes[s]` counts sampled subsets of `s` pairs, all epochs.
    pub subset_sizes: Vec<usize>,
}

/// Random pair subset for one training sample: a size uniform on
/// `[ceil(n/2), n]`, then that many distinct slots in ascending order.
pub fn sample_pair_subset(n_pairs: usize, rng: &mut Rng) -> Vec<usize> {
    if n_pairs == 0 {
        return Vec::new();
    }
    let size = rng.gen_range(n_pairs.div_ceil(2)..=n_pairs);
    let mut picked = permutation(n_pairs, rng);
    picked.truncate(size);
    picked.sort_unstable();
    picked
}

fn check_examples(set: &[DetectionExample], what: &'static str) -> Result<usize> {
    let first = set.first().ok_or(Error::Empty(what))?;
    let n = first.maps.len();
    if n == 0 || set.iter().any(|e| e.maps.len() != n || e.pairs.len() != n) {
        return Err(Error::InvalidArgument(format!("{what}: inconsistent pair counts")));
    }
    Ok(n)
}

/// Mean BCE over `set` in eval mode with every pair participating.
pub fn evaluate_loss(model: &Detector, set: &[DetectionExample], chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    for part in set.chunks(chunk.max(1)) {
        let samples: Vec<_> = part.iter().map(|e| e.all_pairs()).collect();
        let out = model.detect_batch(&samples)?;
        for ((dec, _), e) in out.iter().zip(part) {
            let p = dec.probability.clamp(crate::tensornet::BCE_CLAMP, 1.0 - crate::tensornet::BCE_CLAMP);
            total -= if e.scene_label == 1 { p.ln() } else { (1.0 - p).ln() };
        }
    }
    Ok(total / set.len() as f64)
}

/// Joint training of the embedding, pooling and classifier on scene labels.
pub fn train_detector(
    train: &[DetectionExample],
    val: &[DetectionExample],
    config: DetectorConfig,
    hyper: &DetectorHyper,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Detector, DetectorTrainReport)> {
    hyper.validate()?;
    let n_pairs = check_examples(train, "training set")?;
    if check_examples(val, "validation set")? != n_pairs {
        return Err(Error::InvalidArgument("train and validation pair counts differ".into()));
    }
    let mut model = Detector::new(config, hyper.seed)?;
    let mut adam = Adam::new(AdamConfig::with_lr(hyper.lr), &model.store);
    let mut tracker = PlateauTracker::new(hyper.plateau, hyper.lr);
    let mut best_store = model.store.clone();
    let mut curve = Vec::new();
    let mut subset_sizes = vec![0usize; n_pairs + 1];

    for epoch in 0..hyper.max_epochs {
        let mut rng = substream(hyper.seed, "sampling", epoch as u64);
        let order = permutation(train.len(), &mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(hyper.batch_size).enumerate() {
            let mut maps = Vec::new();
            let mut sizes = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let subset = sample_pair_subset(n_pairs, &mut rng);
                subset_sizes[subset.len()] += 1;
                sizes.push(subset.len());
                maps.extend(subset.iter().map(|&s| &train[i].maps[s]));
                labels.push(f64::from(train[i].scene_label));
            }
            let dropout_rng = substream(hyper.seed, "dropout", ((epoch as u64) << 32) | b as u64);
            let mut ctx = ForwardCtx::new(Mode::Train, dropout_rng);
            let mut g = Graph::new();
            let x = g.constant(model.stack(&maps)?);
            let h = model.embed_graph(&mut g, x, &mut ctx)?;
            let mut offset = 0;
            let mut zs = Vec::with_capacity(batch.len());
            for &k in &sizes {
                let hs = g.rows(h, offset, k)?;
                offset += k;
                zs.push(model.pool_graph(&mut g, hs)?.0);
            }
            let z = g.concat_rows(&zs)?;
            let p = model.classify_graph(&mut g, z, &mut ctx)?;
            let loss = g.bce(p, &labels)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Divergence(format!("detector loss {lv} at epoch {epoch}, batch {b}")));
            }
            g.backward(loss)?;
            let mut grads = Grads::new(&model.store);
            g.collect_param_grads(&mut grads);
            if !grads.is_finite() {
                return Err(Error::Divergence(format!("non-finite gradient at epoch {epoch}, batch {b}")));
            }
            adam.update(&mut model.store, &grads);
            ctx.apply_bn_updates(&mut model.store);
            loss_sum += lv * batch.len() as f64;
        }
        let val_loss = evaluate_loss(&model, val, 256)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence(format!("validation loss {val_loss} at epoch {epoch}")));
        }
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            lr: adam.lr(),
        };
        on_epoch(&log);
        curve.push(log);
        match tracker.observe(epoch, val_loss) {
            PlateauStep::Improved => best_store = model.store.clone(),
            PlateauStep::Decayed => adam.set_lr(tracker.lr),
            PlateauStep::Waiting => {}
            PlateauStep::Stop => break,
        }
    }
    model.store = best_store;
    Ok((
        model,
        DetectorTrainReport {
            curve,
            best_epoch: tracker.best_epoch,
            best_val_loss: tracker.best,
            subset_sizes,
        },
    ))
}

/// One row of an attention export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub sample: usize,
    pub m: usize,
    pub n: usize,
    pub logit: f64,
    pub weight: f64,
    pub pair_label: Option<u8>,
}

impl AttentionRow {
    /// Rows of one report; `pair_labels` is indexed by flat slot.
    pub fn from_report(sample: usize, report: &AttentionReport, pair_labels: Option<&[bool]>) -> Vec<Self> {
        report
            .pairs
            .iter()
            .enumerate()
            .map(|(i, p)| AttentionRow {
                sample,
                m: p.m,
                n: p.n,
                logit: report.logits[i],
                weight: report.weights[i],
                pair_label: pair_labels.and_then(|l| l.get(p.slot())).map(|&b| u8::from(b)),
            })
            .collect()
    }
}

pub fn write_attention_csv(path: &Path, rows: &[AttentionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

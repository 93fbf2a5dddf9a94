//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Artifacts of the desk run are kept under the cargo
//! target temp directory.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;

use fwasense::channel::CfrTensor;
use fwasense::cli::{self, Cli, EvalReport, RunManifest};
use fwasense::detection::{AttentionReport, Detector, DetectorConfig};
use fwasense::dsp::{dft3, idft3, AngleDelayMap};
use fwasense::localization::{FusionConfig, FusionNet, SpatialAttention, TokenSet};
use fwasense::metrics::{ape, detection_metrics, sensing_region_map, RegionMode};
use fwasense::rng::substream;
use fwasense::scenario::{PairId, Point3, Scenario};
use fwasense::selection::{select_pairs, SelectionConfig};
use fwasense::tensornet::gradcheck::check_gradients;
use fwasense::tensornet::layers::{Layer, LayerSpec};
use fwasense::tensornet::{Activation, ForwardCtx, Graph, Mode, ParamStore, Tensor, Var};

type Outcome = std::result::Result<String, String>;

struct Board {
    filters: Vec<String>,
    results: Vec<(String, bool)>,
}

impl Board {
    fn wants(&self, name: &str) -> bool {
        self.filters.is_empty() || self.filters.iter().any(|f| name.contains(f.as_str()))
    }

    fn run(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        if !self.wants(name) {
            return;
        }
        let t = Instant::now();
        let out = f();
        let secs = t.elapsed().as_secs_f64();
        let (ok, detail) = match out {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        println!("{} {name}: {detail} [{secs:.1} s]", if ok { "PASS" } else { "FAIL" });
        self.results.push((name.to_string(), ok));
    }
}

fn check(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- DSP

fn naive_idft(h: &CfrTensor) -> Vec<Complex64> {
    let [a, b, c] = h.shape();
    let n = (a * b * c) as f64;
    let mut out = vec![Complex64::new(0.0, 0.0); a * b * c];
    for p in 0..a {
        for q in 0..b {
            for k in 0..c {
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..a {
                    for j in 0..b {
                        for l in 0..c {
                            let phase = 2.0 * PI
                                * ((p * i) as f64 / a as f64 + (q * j) as f64 / b as f64 + (k * l) as f64 / c as f64);
                            acc += h.at(i, j, l) * Complex64::from_polar(1.0, phase);
                        }
                    }
                }
                out[(p * b + q) * c + k] = acc / n;
            }
        }
    }
    out
}

fn dsp_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = substream(101, "acceptance-dsp", 0);
    let pair = PairId::new(1, 1, 1).map_err(err)?;
    let (mut worst, mut worst_rt) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let dims = [rng.gen_range(1..=8), rng.gen_range(1..=4), rng.gen_range(1..=16)];
        let mut h = CfrTensor::zeros(pair, dims[0], dims[1], dims[2]);
        for v in &mut h.data {
            *v = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        let fast = idft3(&h);
        let slow = naive_idft(&h);
        let scale = slow.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1e-300);
        for (x, y) in fast.data.iter().zip(&slow) {
            worst = worst.max((x - y).norm() / scale);
        }
        let back = dft3(&fast);
        let hs = h.data.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for (x, y) in back.data.iter().zip(&h.data) {
            worst_rt = worst_rt.max((x - y).norm() / hs);
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(worst < 1e-10, format!("transform rel err {worst:.2e}"))?;
    check(worst_rt < 1e-10, format!("round-trip rel err {worst_rt:.2e}"))?;
    check(secs < 10.0, format!("took {secs:.1} s"))?;
    Ok(format!("200 tensors, max rel err {worst:.1e}, round trip {worst_rt:.1e}, {secs:.2} s"))
}

// ---------------------------------------------------------------- gradients

fn probe(g: &mut Graph, y: Var, seed: u64) -> fwasense::Result<Var> {
    let w = Tensor::uniform(g.shape(y), 1.0, &mut substream(seed, "probe", 0));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let h = 1e-5;
    let mut worst: Vec<(String, f64)> = Vec::new();
    let cases: Vec<(&str, LayerSpec, Vec<usize>, Mode)> = vec![
        ("dense", LayerSpec::Dense { input: 5, units: 4 }, vec![3, 5], Mode::Train),
        (
            "conv3d",
            LayerSpec::Conv3D { in_channels: 2, out_channels: 3, kernel: [3, 3, 3], dilation: [2, 1, 2] },
            vec![2, 2, 4, 2, 5],
            Mode::Train,
        ),
        ("batchnorm-train", LayerSpec::BatchNorm { channels: 3 }, vec![4, 3, 2, 1, 3], Mode::Train),
        ("batchnorm-eval", LayerSpec::BatchNorm { channels: 3 }, vec![2, 3, 2, 1, 3], Mode::Eval),
        ("maxpool", LayerSpec::MaxPool3D { window: [2, 1, 2] }, vec![2, 2, 4, 2, 4], Mode::Train),
        ("avgpool", LayerSpec::AvgPool, vec![5, 4], Mode::Train),
        ("flatten", LayerSpec::Flatten, vec![2, 3, 2, 1, 2], Mode::Train),
        ("dropout", LayerSpec::Dropout { rate: 0.3 }, vec![4, 6], Mode::Train),
        ("layernorm", LayerSpec::LayerNorm { width: 6 }, vec![3, 6], Mode::Train),
        ("attention", LayerSpec::MultiHeadAttention { width: 8, heads: 2 }, vec![4, 8], Mode::Train),
        ("relu", LayerSpec::Activation(Activation::Relu), vec![3, 7], Mode::Train),
        ("leaky-relu", LayerSpec::Activation(Activation::LeakyRelu), vec![3, 7], Mode::Train),
        ("sigmoid", LayerSpec::Activation(Activation::Sigmoid), vec![3, 7], Mode::Train),
        ("tanh", LayerSpec::Activation(Activation::Tanh), vec![3, 7], Mode::Train),
    ];
    for (i, (name, spec, shape, mode)) in cases.into_iter().enumerate() {
        let mut rng = substream(102, "acceptance-grad", i as u64);
        let mut store = ParamStore::new();
        let layer = Layer::build(&spec, &mut store, name, &mut rng).map_err(err)?;
        let mut x = Tensor::uniform(&shape, 1.0, &mut rng);
        if matches!(spec, LayerSpec::Activation(Activation::Relu | Activation::LeakyRelu)) {
            // Keep inputs away from the kink.
            for v in x.data_mut() {
                if v.abs() < 0.05 {
                    *v += 0.1;
                }
            }
        }
        let rep = check_gradients(&store, &[x], h, |g, s, v| {
            let mut ctx = ForwardCtx::new(mode, substream(5, "drop", 0));
            let y = layer.forward(g, s, v[0], &mut ctx)?;
            probe(g, y, i as u64)
        })
        .map_err(err)?;
        worst.push((name.to_string(), rep.max_rel_err));
    }

    // Embedding: gradient with respect to the table.
    {
        let mut rng = substream(102, "acceptance-grad", 100);
        let mut store = ParamStore::new();
        let layer = Layer::build(&LayerSpec::Embedding { vocab: 6, width: 4 }, &mut store, "emb", &mut rng).map_err(err)?;
        let idx = Tensor::new(&[3], vec![1.0, 4.0, 1.0]).map_err(err)?;
        let rep = check_gradients(&store, &[], h, |g, s, _| {
            let x = g.constant(idx.clone());
            let y = layer.forward(g, s, x, &mut ForwardCtx::eval())?;
            probe(g, y, 100)
        })
        .map_err(err)?;
        worst.push(("embedding".into(), rep.max_rel_err));
    }

    // Spatial attention block.
    {
        let mut rng = substream(102, "acceptance-grad", 101);
        let mut store = ParamStore::new();
        let sa = SpatialAttention::new(&mut store, "sa", 3, &mut rng);
        let x = Tensor::uniform(&[2, 3, 3, 2, 4], 1.0, &mut rng);
        let rep = check_gradients(&store, &[x], h, |g, s, v| {
            let y = sa.forward(g, s, v[0])?;
            probe(g, y, 101)
        })
        .map_err(err)?;
        worst.push(("spatial-attention".into(), rep.max_rel_err));
    }

    // Losses.
    {
        let mut rng = substream(102, "acceptance-grad", 102);
        let x = Tensor::uniform(&[4, 1], 2.0, &mut rng);
        let target = Tensor::uniform(&[4, 1], 1.0, &mut rng);
        let store = ParamStore::new();
        let rep = check_gradients(&store, &[x.clone()], h, |g, _, v| {
            let p = g.sigmoid(v[0]);
            g.bce(p, &[1.0, 0.0, 1.0, 0.0])
        })
        .map_err(err)?;
        worst.push(("sigmoid+bce".into(), rep.max_rel_err));
        let rep = check_gradients(&store, &[x], h, |g, _, v| g.mse(v[0], &target)).map_err(err)?;
        worst.push(("mse".into(), rep.max_rel_err));
    }

    let secs = t.elapsed().as_secs_f64();
    let (wname, wval) = worst
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let bad: Vec<String> = worst
        .iter()
        .filter(|(_, e)| !(*e < 1e-4))
        .map(|(n, e)| format!("{n} {e:.2e}"))
        .collect();
    check(bad.is_empty(), format!("over tolerance: {}", bad.join(", ")))?;
    check(secs < 60.0, format!("took {secs:.1} s"))?;
    Ok(format!("{} layer kinds, worst {wname} {wval:.2e}", worst.len()))
}

// ---------------------------------------------------------------- MIL

fn random_map(dims: [usize; 3], rng: &mut impl Rng) -> AngleDelayMap {
    AngleDelayMap {
        dims: [dims[0], dims[1], dims[2], 1],
        data: (0..dims.iter().product()).map(|_| rng.gen::<f64>()).collect(),
    }
}

fn mil_invariants() -> Outcome {
    let s = Scenario::desk_profile();
    let dims = [s.n_rx(), s.n_tx(), s.delay_keep];
    let det = Detector::new(DetectorConfig::for_map(dims), 3).map_err(err)?;
    let mut rng = substream(103, "acceptance-mil", 0);
    let pairs = s.pairs();
    let mn = pairs.len();
    let (mut sum_err, mut perm_err) = (0.0f64, 0.0f64);
    for case in 0..100 {
        let size = case % mn + 1;
        let mut chosen = pairs.clone();
        chosen.shuffle(&mut rng);
        chosen.truncate(size);
        let maps: Vec<AngleDelayMap> = (0..size).map(|_| random_map(dims, &mut rng)).collect();
        let input: Vec<(PairId, &AngleDelayMap)> = chosen.iter().copied().zip(&maps).collect();
        let (d, r) = det.detect_maps(&input).map_err(err)?;
        sum_err = sum_err.max((r.weights.iter().sum::<f64>() - 1.0).abs());
        let mut shuffled = input.clone();
        shuffled.shuffle(&mut rng);
        let (d2, _) = det.detect_maps(&shuffled).map_err(err)?;
        perm_err = perm_err.max((d.probability - d2.probability).abs());
    }
    check(sum_err <= 1e-6, format!("weight sum off by {sum_err:.2e}"))?;
    check(perm_err <= 1e-6, format!("permutation changed probability by {perm_err:.2e}"))?;
    Ok(format!("sizes 1..{mn}, weight-sum err {sum_err:.1e}, permutation err {perm_err:.1e}"))
}

// ---------------------------------------------------------------- transformer

fn transformer_invariance() -> Outcome {
    let s = Scenario::desk_profile();
    let mn = s.n_pairs();
    let map_len = s.n_rx() * s.n_tx() * s.delay_keep;
    let nets = [
        ("cooperative", FusionNet::new(FusionConfig::medium(mn, 64, s.uav_xy_range), 4).map_err(err)?),
        ("soft", FusionNet::new(FusionConfig::new(mn, map_len, s.uav_xy_range), 5).map_err(err)?),
    ];
    let mut rng = substream(104, "acceptance-transformer", 0);
    let mut worst = 0.0f64;
    for (name, net) in &nets {
        let dim = net.config.token_dim;
        for case in 0..100 {
            let l = case % mn + 1;
            let mut idx: Vec<usize> = (1..=mn).collect();
            idx.shuffle(&mut rng);
            idx.truncate(l);
            let t = TokenSet {
                rows: (0..l).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
                indexes: idx,
            };
            let p = net.predict(&t).map_err(|e| format!("{name} L={l}: {e}"))?;
            check(p.0.iter().all(|c| c.is_finite()), format!("{name} L={l}: non-finite output"))?;
            let mut order: Vec<usize> = (0..l).collect();
            order.shuffle(&mut rng);
            let q = net.predict(&t.permuted(&order)).map_err(err)?;
            for a in 0..3 {
                worst = worst.max((p.0[a] - q.0[a]).abs());
            }
        }
    }
    check(worst <= 1e-5, format!("permutation moved output by {worst:.2e} m"))?;
    Ok(format!("cooperative and soft, L in 1..{mn}, max deviation {worst:.1e} m"))
}

// ---------------------------------------------------------------- selection

fn random_report(rng: &mut impl Rng, mn: usize) -> AttentionReport {
    let n = rng.gen_range(1..=mn);
    let mut flats: Vec<usize> = (1..=mn).collect();
    flats.shuffle(rng);
    flats.truncate(n);
    let logits: Vec<f64> = (0..n)
        .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(-3.0..3.0) })
        .collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    AttentionReport {
        pairs: flats.iter().map(|&f| PairId::from_flat(f, 2, mn / 2).unwrap()).collect(),
        logits,
        weights: e.iter().map(|v| v / z).collect(),
    }
}

fn selection_algebra() -> Outcome {
    let mn = 8;
    let mut rng = substream(105, "acceptance-selection", 0);
    let subset = |a: &[PairId], b: &[PairId]| a.iter().all(|p| b.contains(p));
    let mut fallbacks = 0;
    for case in 0..1000 {
        let r = random_report(&mut rng, mn);
        let k = rng.gen_range(1..=12);
        let s1: f64 = rng.gen_range(0.0..0.5);
        let s2: f64 = rng.gen_range(s1..0.6);
        let lo = select_pairs(&r, &SelectionConfig::new(k, s1).map_err(err)?).map_err(err)?;
        let hi = select_pairs(&r, &SelectionConfig::new(k, s2).map_err(err)?).map_err(err)?;
        check(subset(&hi.pairs, &lo.pairs), format!("case {case}: threshold monotonicity"))?;
        let k2 = rng.gen_range(k..=12);
        let wide = select_pairs(&r, &SelectionConfig::new(k2, s1).map_err(err)?).map_err(err)?;
        check(subset(&lo.pairs, &wide.pairs), format!("case {case}: k monotonicity"))?;
        for sel in [&lo, &hi, &wide] {
            if sel.fallback {
                fallbacks += 1;
                check(sel.len() == 1, format!("case {case}: fallback size {}", sel.len()))?;
            }
        }
        for (sel, kk, sig) in [(&lo, k, s1), (&hi, k, s2), (&wide, k2, s1)] {
            if !sel.fallback && sig > 0.0 {
                let bound = kk.min((1.0 / sig).floor() as usize);
                check(sel.len() <= bound, format!("case {case}: L {} > {bound}", sel.len()))?;
            }
        }
    }
    Ok(format!("1000 reports, inclusion and cardinality hold ({fallbacks} fallbacks)"))
}

// ---------------------------------------------------------------- metrics

fn metrics_oracles() -> Outcome {
    let mut rng = substream(106, "acceptance-metrics", 0);
    for case in 0..1000 {
        let n = rng.gen_range(1..60);
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let preds: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let m = detection_metrics(&preds, &labels).map_err(err)?;
        let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
        for i in 0..n {
            match (preds[i], labels[i]) {
                (1, 1) => tp += 1,
                (0, 0) => tn += 1,
                (1, 0) => fp += 1,
                _ => fn_ += 1,
            }
        }
        check((m.tp, m.tn, m.fp, m.fn_) == (tp, tn, fp, fn_), format!("case {case}: confusion counts"))?;
        let mdp = (tp + fn_ > 0).then(|| fn_ as f64 / (tp + fn_) as f64);
        let fap = (fp + tn > 0).then(|| fp as f64 / (fp + tn) as f64);
        check(m.mdp == mdp && m.fap == fap, format!("case {case}: rates"))?;
    }
    let mut worst_ape = 0.0f64;
    for _ in 0..1000 {
        let a = Point3::new(rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0), rng.gen_range(0.0..120.0));
        let b = Point3::new(rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0), rng.gen_range(0.0..120.0));
        let manual = ((a.x() - b.x()).powi(2) + (a.y() - b.y()).powi(2) + (a.z() - b.z()).powi(2)).sqrt();
        worst_ape = worst_ape.max((ape(&a, &b) - manual).abs());
    }
    check(worst_ape <= 1e-12, format!("APE off by {worst_ape:.2e}"))?;

    let s = Scenario::desk_profile();
    let pairs = s.pairs();
    let samples: Vec<(Option<Point3>, Vec<bool>)> = (0..2000)
        .map(|i| {
            let pos = (i % 3 != 0).then(|| Point3::new(rng.gen_range(-75.0..75.0), rng.gen_range(-75.0..75.0), 60.0));
            (pos, (0..pairs.len()).map(|_| rng.gen_bool(0.4)).collect())
        })
        .collect();
    for p in &pairs {
        let expected = samples.iter().filter(|(pos, l)| pos.is_some() && l[p.slot()]).count() as u64;
        for res in [1.0, 5.0, 7.5] {
            let m = sensing_region_map(
                samples.iter().map(|(pos, l)| (pos.as_ref(), l.as_slice())),
                std::slice::from_ref(p),
                RegionMode::Union,
                75.0,
                res,
            )
            .map_err(err)?;
            check(m.total() == expected, format!("pair {p} res {res}: mass {} vs {expected}", m.total()))?;
        }
    }
    Ok(format!("1000 confusion tallies, APE err {worst_ape:.0e}, region mass exact for {} pairs", pairs.len()))
}

// ---------------------------------------------------------------- pipeline

fn run_cli(args: &[String]) -> fwasense::Result<RunManifest> {
    let mut full = vec!["fwasense".to_string()];
    full.extend_from_slice(args);
    let cli = Cli::try_parse_from(&full).map_err(|e| fwasense::Error::InvalidArgument(e.to_string()))?;
    cli::run(cli)
}

fn s(v: &[&str]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

struct Pipeline {
    root: PathBuf,
}

impl Pipeline {
    fn data(&self, split: &str) -> String {
        p(&self.root.join("data").join(format!("{split}.fwas")))
    }

    fn gen(&self, counts: [usize; 3], seed: u64, threads: usize) -> fwasense::Result<RunManifest> {
        let mut a = s(&["--threads", &threads.to_string(), "gen", "--seed", &seed.to_string()]);
        a.extend(s(&["--out", &p(&self.root.join("data"))]));
        a.extend(s(&["--train", &counts[0].to_string(), "--val", &counts[1].to_string(), "--test", &counts[2].to_string()]));
        run_cli(&a)
    }

    fn train_detect(&self, seed: u64, threads: usize, extra: &[&str]) -> fwasense::Result<RunManifest> {
        let mut a = s(&["--threads", &threads.to_string(), "train-detect", "--seed", &seed.to_string()]);
        a.extend(s(&["--train", &self.data("train"), "--val", &self.data("val"), "--out", &p(&self.root.join("det"))]));
        a.extend(s(extra));
        run_cli(&a)
    }

    fn detector(&self) -> String {
        p(&self.root.join("det").join(cli::DETECTOR_FILE))
    }

    fn train_loc(&self, seed: u64, threads: usize, extra: &[&str]) -> fwasense::Result<()> {
        let loc = self.root.join("loc");
        let mut a = s(&["--threads", &threads.to_string(), "train-loc-individual", "--seed", &seed.to_string()]);
        a.extend(s(&["--train", &self.data("train"), "--val", &self.data("val"), "--out", &p(&loc)]));
        a.extend(s(&["--detector", &self.detector()]));
        a.extend(s(extra));
        run_cli(&a)?;
        let mut a = s(&["--threads", &threads.to_string(), "train-loc-coop", "--seed", &seed.to_string()]);
        a.extend(s(&["--train", &self.data("train"), "--val", &self.data("val"), "--out", &p(&loc)]));
        a.extend(s(&["--detector", &self.detector(), "--locator", &p(&loc.join(cli::LOCATOR_FILE)), "--baselines"]));
        a.extend(s(extra));
        run_cli(&a)?;
        Ok(())
    }

    fn eval(&self, threads: usize, out: &str) -> fwasense::Result<EvalReport> {
        let dir = self.root.join(out);
        let mut a = s(&["--threads", &threads.to_string(), "eval", "--baselines"]);
        a.extend(s(&["--detector", &self.detector(), "--localizers", &p(&self.root.join("loc"))]));
        a.extend(s(&["--dataset", &self.data("test"), "--out", &p(&dir)]));
        run_cli(&a)?;
        let text = std::fs::read_to_string(dir.join(cli::REPORT_FILE)).map_err(|e| fwasense::Error::InvalidArgument(e.to_string()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("create acceptance directory");
    dir
}

/// Every regular file under `dir`, relative path to bytes; manifests are
/// skipped because they carry timestamps and absolute paths.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable directory").flatten() {
            let path = e.path();
            if path.is_dir() {
                stack.push(path);
            } else if !path.to_string_lossy().ends_with("manifest.json") || path.to_string_lossy().ends_with(".fwas.manifest.json") {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let run = |name: &str| -> std::result::Result<BTreeMap<PathBuf, Vec<u8>>, String> {
        let pl = Pipeline { root: fresh_dir(name) };
        pl.gen([24, 8, 8], 11, 2).map_err(err)?;
        pl.train_detect(5, 2, &["--epochs", "2"]).map_err(err)?;
        pl.train_loc(5, 2, &["--epochs", "2"]).map_err(err)?;
        pl.eval(2, "eval").map_err(err)?;
        Ok(snapshot(&pl.root))
    };
    let a = run("determinism-a")?;
    let b = run("determinism-b")?;
    check(a.keys().eq(b.keys()), "replays produced different file sets")?;
    let differing: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    check(differing.is_empty(), format!("differing files: {}", differing.join(", ")))?;
    let kinds = |ext: &str| a.keys().filter(|k| k.to_string_lossy().ends_with(ext)).count();
    check(kinds(".fwas") == 3 && kinds(".ckpt") == 4 && kinds("report.json") == 1, "missing artifacts")?;
    Ok(format!("{} files byte-identical across replays (datasets, checkpoints, reports)", a.len()))
}

const DETECTION_SEEDS: [u64; 3] = [7, 8, 9];
const DETECTION_BUDGET_S: f64 = 1800.0;
const RATE_LIMIT: f64 = 0.05;

#[derive(serde::Serialize)]
struct Attempt {
    seed: u64,
    mdp: Option<f64>,
    fap: Option<f64>,
    seconds: f64,
    passed: bool,
}

fn desk_detection(pl: &Pipeline) -> std::result::Result<(String, Option<u64>), String> {
    pl.gen([2000, 400, 600], 1, 1).map_err(err)?;
    let mut attempts = Vec::new();
    let mut winner = None;
    for &seed in &DETECTION_SEEDS {
        let t = Instant::now();
        pl.train_detect(seed, 1, &[]).map_err(err)?;
        let det = Detector::load(Path::new(&pl.detector())).map_err(err)?;
        let s = Scenario::desk_profile();
        let (test, _) = cli::load_prepared(Path::new(&pl.data("test")), &s).map_err(err)?;
        let out = cli::detect_all(&det, &test).map_err(err)?;
        let preds: Vec<u8> = out.iter().map(|(l, _)| *l).collect();
        let labels: Vec<u8> = test.iter().map(|x| x.example.scene_label).collect();
        let m = detection_metrics(&preds, &labels).map_err(err)?;
        let seconds = t.elapsed().as_secs_f64();
        let passed = m.mdp.is_some_and(|v| v <= RATE_LIMIT)
            && m.fap.is_some_and(|v| v <= RATE_LIMIT)
            && seconds <= DETECTION_BUDGET_S;
        println!("  detection attempt seed {seed}: MDP {:?} FAP {:?} in {seconds:.0} s", m.mdp, m.fap);
        attempts.push(Attempt { seed, mdp: m.mdp, fap: m.fap, seconds, passed });
        if passed {
            winner = Some(seed);
            break;
        }
    }
    let record = serde_json::to_string_pretty(&attempts).map_err(err)?;
    std::fs::write(pl.root.join("detection_attempts.json"), record).map_err(err)?;
    let last = attempts.last().expect("at least one attempt");
    let detail = format!(
        "seed {} MDP {:.2}% FAP {:.2}% in {:.0} s ({} attempt(s))",
        last.seed,
        100.0 * last.mdp.unwrap_or(f64::NAN),
        100.0 * last.fap.unwrap_or(f64::NAN),
        last.seconds,
        attempts.len()
    );
    Ok((detail, winner))
}

fn desk_localization(pl: &Pipeline, seed: u64) -> Outcome {
    pl.train_loc(seed, 1, &[]).map_err(err)?;
    let r = pl.eval(1, "eval").map_err(err)?;
    let get = |k: &str| r.localization.get(k).ok_or(format!("report lacks {k}"));
    let (coop, hard, soft, center) = (get(cli::VARIANT_COOPERATIVE)?, get(cli::VARIANT_HARD)?, get(cli::VARIANT_SOFT)?, get(cli::VARIANT_CENTER)?);
    let detail = format!(
        "mean APE coop {:.2} / hard {:.2} / center {:.2} m; p95 coop {:.2} / soft {:.2} m",
        coop.mean, hard.mean, center.mean, coop.p95, soft.p95
    );
    check(coop.mean <= hard.mean, format!("cooperative mean above hard fusion: {detail}"))?;
    check(coop.p95 <= soft.p95, format!("cooperative p95 above soft fusion: {detail}"))?;
    check(coop.mean <= 0.7 * center.mean, format!("cooperative gains < 30% over scene center: {detail}"))?;
    Ok(detail)
}

fn main() {
    // Stay quiet under `cargo test -- --list` and similar probes.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let filters = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut board = Board { filters, results: Vec::new() };
    board.run("dsp-oracle", dsp_oracle);
    board.run("gradient-suite", gradient_suite);
    board.run("mil-invariants", mil_invariants);
    board.run("transformer-invariance", transformer_invariance);
    board.run("selection-algebra", selection_algebra);
    board.run("metrics-oracles", metrics_oracles);
    board.run("determinism", determinism);

    if !board.wants("desk") {
        return board.finish();
    }
    let pl = Pipeline { root: fresh_dir("desk-run") };
    let mut winner = None;
    board.run("desk-detection", || {
        let (detail, w) = desk_detection(&pl)?;
        winner = w;
        if w.is_some() {
            Ok(detail)
        } else {
            Err(detail)
        }
    });
    board.run("desk-localization-ordering", || match winner {
        Some(seed) => desk_localization(&pl, seed),
        None => Err("no detector met the detection criterion".into()),
    });
    board.finish();
}

impl Board {
    fn finish(self) {
        let failed: Vec<&str> = self.results.iter().filter(|(_, ok)| !ok).map(|(n, _)| n.as_str()).collect();
        println!(
            "acceptance: {}/{} criteria passed{}",
            self.results.len() - failed.len(),
            self.results.len(),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        );
        if !failed.is_empty() {
            std::process::exit(1);
        }
    }
}

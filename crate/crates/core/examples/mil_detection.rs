//! Trains the attention-MIL detector on a small in-memory desk dataset,
//! then shows the per-pair attention and the selected pairs of a few
//! test scenes.
//!
//!     cargo run --release --example mil_detection -- 300 8

use fwasense::channel::generate_sample;
use fwasense::detection::{train_detector, DetectionExample, DetectorConfig, DetectorHyper};
use fwasense::metrics::detection_metrics;
use fwasense::selection::{select_pairs, SelectionConfig};
use fwasense::Scenario;

fn build(s: &Scenario, per_class: usize, seed: u64) -> fwasense::Result<Vec<DetectionExample>> {
    (0..2 * per_class)
        .map(|i| DetectionExample::from_record(&generate_sample(s, i < per_class, seed, i as u64), s.delay_keep))
        .collect()
}

fn main() -> fwasense::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("numeric argument"));
    let per_class = args.next().unwrap_or(300);
    let epochs = args.next().unwrap_or(8);

    let s = Scenario::desk_profile();
    let train = build(&s, per_class, 1)?;
    let val = build(&s, per_class / 4 + 1, 2)?;
    let test = build(&s, per_class / 2 + 1, 3)?;

    let config = DetectorConfig::for_map([s.n_rx(), s.n_tx(), s.delay_keep]);
    let hyper = DetectorHyper { lr: 1e-3, max_epochs: epochs, ..Default::default() };
    let (det, report) = train_detector(&train, &val, config, &hyper, |e| {
        println!("epoch {:2}  train {:.4}  val {:.4}", e.epoch, e.train_loss, e.val_loss);
    })?;
    println!("best epoch {}", report.best_epoch);

    let inputs: Vec<_> = test.iter().map(|e| e.all_pairs()).collect();
    let out = det.detect_batch(&inputs)?;
    let preds: Vec<u8> = out.iter().map(|(d, _)| d.label).collect();
    let labels: Vec<u8> = test.iter().map(|e| e.scene_label).collect();
    let m = detection_metrics(&preds, &labels)?;
    println!("test: MDP {:?}  FAP {:?}  ({} scenes)", m.mdp, m.fap, m.total());

    let cfg = SelectionConfig::new(10, 0.1)?;
    for (i, (d, att)) in out.iter().enumerate().take(3) {
        let sel = select_pairs(att, &cfg)?;
        let weights: Vec<String> = att.pairs.iter().zip(&att.weights).map(|(p, w)| format!("{p}:{w:.2}")).collect();
        println!("scene {i}: p(UAV) {:.3}  attention [{}]", d.probability, weights.join(" "));
        let picked: Vec<String> = sel.pairs.iter().map(|p| p.to_string()).collect();
        println!("  selected {} {}", picked.join(" "), if sel.fallback { "(fallback)" } else { "" });
    }
    Ok(())
}

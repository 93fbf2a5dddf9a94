//! Individual per-pair localization followed by transformer fusion, on a
//! small desk dataset. Pairs are chosen from the ground-truth labels so the
//! example runs without a detector.
//!
//!     cargo run --release --example cooperative_localization -- 400 10

use fwasense::channel::generate_sample;
use fwasense::detection::DetectionExample;
use fwasense::dsp::AngleDelayMap;
use fwasense::localization::{
    hard_fusion, train_fusion, train_individual, FusionConfig, FusionInput, LocHyper, Locator, LocatorConfig, TokenSet,
};
use fwasense::metrics::{ape, ape_stats};
use fwasense::{Point3, Scenario};

struct Scene {
    truth: Point3,
    example: DetectionExample,
    labeled: Vec<usize>,
}

fn scenes(s: &Scenario, n: usize, seed: u64) -> fwasense::Result<Vec<Scene>> {
    let mut out = Vec::new();
    for i in 0..n {
        let rec = generate_sample(s, true, seed, i as u64);
        let labeled: Vec<usize> = (0..s.n_pairs()).filter(|&k| rec.pair_labels[k]).collect();
        if labeled.is_empty() {
            continue;
        }
        out.push(Scene {
            truth: rec.uav_position.expect("UAV sample"),
            example: DetectionExample::from_record(&rec, s.delay_keep)?,
            labeled,
        });
    }
    Ok(out)
}

fn pairs_of(set: &[Scene]) -> Vec<(&AngleDelayMap, Point3)> {
    set.iter()
        .flat_map(|sc| sc.labeled.iter().map(move |&k| (&sc.example.maps[k], sc.truth)))
        .collect()
}

/// Individual estimates, fused tokens and the hard-fusion estimate of one scene.
fn prepare(loc: &Locator, scene: &Scene, scale: f64) -> fwasense::Result<(TokenSet, Point3)> {
    let maps: Vec<_> = scene.labeled.iter().map(|&k| &scene.example.maps[k]).collect();
    let located = loc.locate_batch(&maps)?;
    let estimates: Vec<Point3> = located.iter().map(|(p, _)| *p).collect();
    let input = FusionInput {
        estimates: estimates.clone(),
        features: located.into_iter().map(|(_, f)| f).collect(),
        indexes: scene.labeled.iter().map(|&k| scene.example.pairs[k].flat).collect(),
    };
    Ok((input.tokens(scale)?, hard_fusion(&estimates)?))
}

fn main() -> fwasense::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("numeric argument"));
    let n = args.next().unwrap_or(400);
    let epochs = args.next().unwrap_or(10);

    let s = Scenario::desk_profile();
    let scale = s.uav_xy_range;
    let (train, val, test) = (scenes(&s, n, 1)?, scenes(&s, n / 4 + 1, 2)?, scenes(&s, n / 4 + 1, 3)?);

    let hyper = LocHyper { lr: 1e-3, max_epochs: epochs, ..LocHyper::individual() };
    let config = LocatorConfig::for_map([s.n_rx(), s.n_tx(), s.delay_keep], scale);
    let (loc, _) = train_individual(&pairs_of(&train), &pairs_of(&val), config, &hyper, |e| {
        println!("I-ULocNet epoch {:2}  val {:.4}", e.epoch, e.val_loss);
    })?;

    let tokens = |set: &[Scene]| -> fwasense::Result<Vec<(TokenSet, Point3)>> {
        set.iter().map(|sc| Ok((prepare(&loc, sc, scale)?.0, sc.truth))).collect()
    };
    let config = FusionConfig::medium(s.n_pairs(), loc.feature_dim(), scale);
    let hyper = LocHyper { lr: 1e-3, max_epochs: epochs, ..LocHyper::cooperative() };
    let (fusion, _) = train_fusion(&tokens(&train)?, &tokens(&val)?, config, &hyper, |e| {
        println!("C-ULocNet epoch {:2}  val {:.4}", e.epoch, e.val_loss);
    })?;

    let (mut hard, mut coop) = (Vec::new(), Vec::new());
    for sc in &test {
        let (t, h) = prepare(&loc, sc, scale)?;
        hard.push(ape(&h, &sc.truth));
        coop.push(ape(&fusion.predict(&t)?, &sc.truth));
    }
    let (hard, coop) = (ape_stats(&hard)?, ape_stats(&coop)?);
    println!("hard fusion   mean {:.2} m  p95 {:.2} m", hard.mean, hard.p95);
    println!("cooperative   mean {:.2} m  p95 {:.2} m", coop.mean, coop.p95);
    Ok(())
}

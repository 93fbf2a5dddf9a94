//! Traces the uplink paths of one BS-CPE pair with and without a UAV,
//! synthesizes the CFR and turns it into an angle-delay map.
//!
//!     cargo run --example uplink_channel -- /tmp/ad-maps

use std::path::PathBuf;

use fwasense::channel::{pair_label, synthesize_cfr, trace_paths};
use fwasense::dsp::{dump_map_pgm, preprocess};
use fwasense::{PairId, Point3, Scenario};

fn main() -> fwasense::Result<()> {
    let s = Scenario::desk_profile();
    let pair = PairId::new(1, 2, s.n_cpe())?;
    // First hover point on a 5 m grid where the bounce clears the label floor.
    let steps = (2.0 * s.uav_xy_range / 5.0) as usize;
    let uav = (0..=steps * steps)
        .map(|i| {
            let at = |k: usize| -s.uav_xy_range + 5.0 * k as f64;
            Point3::new(at(i % (steps + 1)), at(i / (steps + 1)), s.uav_altitude)
        })
        .find(|p| pair_label(&trace_paths(&s, pair, Some(p)), s.channel.power_floor_db) == 1)
        .expect("pair sees the UAV somewhere");
    println!("UAV at ({:.0}, {:.0}, {:.0}) m", uav.x(), uav.y(), uav.z());
    let out = std::env::args().nth(1).map(PathBuf::from);

    for (name, position) in [("empty", None), ("uav", Some(uav))] {
        let paths = trace_paths(&s, pair, position.as_ref());
        println!("{name}: {} paths, pair label {}", paths.paths.len(), pair_label(&paths, s.channel.power_floor_db));
        for p in &paths.paths {
            println!(
                "  {:?}: delay {:.1} ns, power {:.1} dB, AoA az {:.1} deg",
                p.kind,
                p.delay_s * 1e9,
                10.0 * p.power().log10(),
                p.aoa.azimuth.to_degrees()
            );
        }
        let map = preprocess(&synthesize_cfr(&s, &paths), s.delay_keep)?;
        let peak = map.data.iter().cloned().fold(0.0, f64::max);
        println!("  angle-delay map {:?}, peak {peak:.3}", map.dims);
        if let Some(dir) = &out {
            for f in dump_map_pgm(&map, dir, &format!("{name}_{}-{}", pair.m, pair.n))? {
                println!("  wrote {}", f.display());
            }
        }
    }
    Ok(())
}

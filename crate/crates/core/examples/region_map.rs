//! Sensing-region maps: where over the UAV area a pair (or several pairs
//! combined) sees the UAV.
//!
//!     cargo run --release --example region_map -- 2000 /tmp/regions

use std::path::PathBuf;

use fwasense::channel::generate_sample;
use fwasense::metrics::{sensing_region_map, RegionMode};
use fwasense::{PairId, Scenario};

fn main() -> fwasense::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|a| a.parse().expect("sample count")).unwrap_or(2000);
    let out = args.next().map(PathBuf::from);

    let s = Scenario::desk_profile();
    let records: Vec<_> = (0..n).map(|i| generate_sample(&s, true, 5, i as u64)).collect();
    let samples = || records.iter().map(|r| (r.uav_position.as_ref(), r.pair_labels.as_slice()));

    for p in s.pairs() {
        let map = sensing_region_map(samples(), &[p], RegionMode::Union, s.uav_xy_range, 10.0)?;
        println!("pair {p}: affected in {} of {n} positions", map.total());
    }
    let combo = [PairId::new(1, 1, s.n_cpe())?, PairId::new(2, 1, s.n_cpe())?];
    for mode in [RegionMode::Union, RegionMode::Intersection] {
        let map = sensing_region_map(samples(), &combo, mode, s.uav_xy_range, 10.0)?;
        println!("{} and {} ({mode:?}): {}", combo[0], combo[1], map.total());
        if let Some(dir) = &out {
            for f in map.write_files(dir, &format!("region_{mode:?}").to_lowercase())? {
                println!("  wrote {}", f.display());
            }
        }
    }
    Ok(())
}

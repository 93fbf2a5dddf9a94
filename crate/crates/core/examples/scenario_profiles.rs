//! Prints the built-in deployment profiles and, given a directory, writes
//! them out as scenario JSON files usable with `--config`.
//!
//!     cargo run --example scenario_profiles -- configs

use std::path::PathBuf;

use fwasense::Scenario;

fn describe(name: &str, s: &Scenario) {
    println!(
        "{name}: {} BS x {} CPE = {} pairs, BS array {}x{}, CPE array {}x{}, {} subcarriers ({} kept delay taps)",
        s.n_bs(),
        s.n_cpe(),
        s.n_pairs(),
        s.rx_array.rows(),
        s.rx_array.cols(),
        s.tx_array.rows(),
        s.tx_array.cols(),
        s.n_subcarriers,
        s.delay_keep,
    );
    println!("  scenario hash {}", s.hash_hex());
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let profiles = [("desk", Scenario::desk_profile()), ("paper", Scenario::paper_profile())];
    for (name, s) in &profiles {
        s.validate()?;
        describe(name, s);
    }
    if let Some(dir) = std::env::args().nth(1).map(PathBuf::from) {
        std::fs::create_dir_all(&dir)?;
        for (name, s) in &profiles {
            let path = dir.join(format!("{name}.json"));
            std::fs::write(&path, s.to_json_string() + "\n")?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

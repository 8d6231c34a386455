//! Load a scenario file and write its metrics and chain dump, as `dbafl run`
//! does.
//!
//! cargo run --example scenario_from_config -- crates/core/examples/reference.toml out

use std::path::PathBuf;

use dbafl::cli::{self, RunManifest};

fn main() -> dbafl::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/reference.toml"));
    let out = args.next().map(PathBuf::from).unwrap_or_else(std::env::temp_dir);

    let cfg = cli::load_scenario(&config)?;
    println!(
        "{} nodes, {} for {} s, seed {}",
        cfg.nodes.len(),
        cfg.strategy,
        cfg.duration_s,
        cfg.master_seed
    );
    for path in cli::run(&RunManifest::new(&config, &out))? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

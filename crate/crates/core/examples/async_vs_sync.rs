//! Same five vehicles, three ways to combine their models: who gets to a good
//! model first and who sits idle.

use dbafl::orchestrator::{final_accuracy, run_scenario, time_to_reach, ScenarioConfig, Strategy};

fn main() -> dbafl::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    println!("{:<8} {:>8} {:>10} {:>9}", "strategy", "final", "t95 (s)", "waiting");
    for strategy in [
        Strategy::Dbafl,
        Strategy::Afl,
        Strategy::Bsfl,
        Strategy::FedAvg,
        Strategy::LocalOnly,
    ] {
        let cfg = ScenarioConfig {
            strategy,
            master_seed: seed,
            ..ScenarioConfig::default()
        };
        let out = run_scenario(&cfg)?;
        let fin = final_accuracy(&out.rows);
        let t95 = time_to_reach(&out.rows, 0.95 * fin).unwrap_or(f64::NAN);
        let waiting: f64 = out.node_stages.iter().map(|s| s.waiting).sum();
        let total: f64 = out.node_stages.iter().map(|s| s.total()).sum();
        println!(
            "{:<8} {fin:>8.4} {t95:>10.0} {:>8.1}%",
            strategy.to_string(),
            100.0 * waiting / total
        );
    }
    Ok(())
}

//! Flood whoever led aggregation one term ago. A fixed server stays flooded;
//! a rotating committee has usually moved on.

use dbafl::orchestrator::{final_accuracy, run_scenario, time_to_reach, ScenarioConfig, Strategy};

fn main() -> dbafl::Result<()> {
    for strategy in [Strategy::Afl, Strategy::Dbafl] {
        for f in [0.0, 0.8, 0.9] {
            let mut cfg = ScenarioConfig {
                strategy,
                term_blocks: 2,
                ..ScenarioConfig::default()
            };
            cfg.payload.model_bits = Some(8e7);
            cfg.attack.ddos.attack_fraction = f;
            let out = run_scenario(&cfg)?;
            let fin = final_accuracy(&out.rows);
            let t95 = time_to_reach(&out.rows, 0.95 * fin).unwrap_or(f64::NAN);
            let comm: f64 = out.node_stages.iter().map(|s| s.communication).sum::<f64>() / out.node_stages.len() as f64;
            println!(
                "{:<6} f={f:.1}: t95 {t95:>5.0} s, mean communication {comm:>6.1} s",
                strategy.to_string()
            );
            if let Some(ledger) = &out.ledger {
                let leaders: Vec<String> = ledger.terms().iter().map(|t| t.leader.to_string()).collect();
                println!("        leaders by term: {}", leaders.join(" "));
            }
        }
    }
    Ok(())
}

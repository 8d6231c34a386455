//! One bus uploads noise. Plain asynchronous FL absorbs it; the accuracy
//! screen at the leader throws it away.

use dbafl::aggregation::DefensePolicy;
use dbafl::orchestrator::{final_accuracy, run_scenario, ScenarioConfig, StepOutcome, Strategy};

fn main() -> dbafl::Result<()> {
    for strategy in [Strategy::Afl, Strategy::Dbafl] {
        for (label, poisoned, defense) in [
            ("clean", false, DefensePolicy::Off),
            ("poisoned", true, DefensePolicy::Off),
            ("poisoned+screen", true, DefensePolicy::threshold(0.9)?),
        ] {
            let mut cfg = ScenarioConfig {
                strategy,
                ..ScenarioConfig::default()
            };
            if poisoned {
                cfg.attack.poisoners.insert(4);
            }
            cfg.attack.defense = defense;
            let out = run_scenario(&cfg)?;
            let discarded = out
                .aggregations
                .iter()
                .filter(|e| matches!(e.outcome, StepOutcome::Discarded { .. }))
                .count();
            println!(
                "{:<6} {label:<16} final {:.4}  discarded {discarded}",
                strategy.to_string(),
                final_accuracy(&out.rows)
            );
        }
    }
    Ok(())
}

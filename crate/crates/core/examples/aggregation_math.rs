//! The accuracy-weighted aggregation rule on a toy pair of models.

use dbafl::aggregation::{
    aggregate_async, aggregate_fedavg, aggregate_static, defense_filter, scaling_factor, DefensePolicy,
};
use dbafl::model::ModelParams;

fn main() -> dbafl::Result<()> {
    let global = ModelParams::new(vec![0.0, 1.0, -2.0])?;
    let local = ModelParams::new(vec![1.0, 3.0, 2.0])?;

    for (acc_local, acc_global) in [(0.9, 0.6), (0.6, 0.6), (0.3, 0.6), (0.9, 0.0)] {
        let eps = scaling_factor(acc_local, acc_global);
        let next = aggregate_async(&global, &local, eps)?;
        println!(
            "A_L={acc_local:.2} A_G={acc_global:.2} eps={:>7.3} -> {:?}",
            eps.value(),
            next.values()
        );
    }

    let fixed = aggregate_static(&global, &local, 1.0)?;
    println!("static eps=1 -> {:?}", fixed.values());

    let avg = aggregate_fedavg(&[global.clone(), local.clone()], &[300, 100])?;
    println!("fedavg 300:100 -> {:?}", avg.values());

    let policy = DefensePolicy::threshold(0.9)?;
    for acc_local in [0.95, 0.55, 0.5] {
        println!(
            "theta=0.9, A_G=0.6, A_L={acc_local}: {:?}",
            defense_filter(acc_local, 0.6, policy)
        );
    }
    Ok(())
}

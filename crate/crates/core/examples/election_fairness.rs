//! How evenly hash-based election spreads leadership over the committee.

use dbafl::chain::{elect_leader, gini, hash_bytes, leader_probabilities};

fn main() -> dbafl::Result<()> {
    for m in [3usize, 5, 7, 10] {
        for draws in [100u32, 10_000] {
            let observed = (0..draws)
                .map(|i| elect_leader(&hash_bytes(&i.to_le_bytes()), m))
                .collect::<dbafl::Result<Vec<_>>>()?;
            let p = leader_probabilities(&observed, m)?;
            let spread = p.iter().copied().fold(0.0, f64::max) - p.iter().copied().fold(1.0, f64::min);
            println!("M={m:>2} draws={draws:>6}: gini {:.4}, max-min {spread:.4}", gini(&p)?);
        }
    }
    Ok(())
}

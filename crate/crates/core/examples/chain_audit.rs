//! Seal a few blocks of model digests, dump them, tamper with one and audit.

use dbafl::chain::{hash_model, AuditOutcome, BlockCutPolicy, Chain, HashRecord, Ledger};
use dbafl::model::ModelParams;

fn main() -> dbafl::Result<()> {
    let model = |x: f64| ModelParams::new(vec![x, -x, 0.5 * x]);
    let genesis = hash_model(&model(0.0)?)?;
    let mut ledger = Ledger::new(
        vec![HashRecord::local(0, 0, genesis), HashRecord::global(0, 0, genesis)],
        0,
        vec![0, 1, 2],
        2,
        BlockCutPolicy::default(),
    )?;
    println!("genesis leader: {}", ledger.committee().leader());

    for round in 1..=6u64 {
        let now = round as f64 * 3.0;
        let local = model(round as f64)?;
        ledger.submit(HashRecord::local(3, round, hash_model(&local)?), now)?;
        ledger.submit(
            HashRecord::global(ledger.committee().leader(), round, hash_model(&local)?),
            now,
        )?;
        if let Some(leader) = ledger.seal(now + 2.0)? {
            println!("block {} closed a term, new leader {leader}", ledger.chain().len() - 1);
        }
    }

    let dump = ledger.chain().dump();
    print!("{dump}");
    println!("audit: {:?}", Chain::parse_dump(&dump)?.audit());

    let mut blocks = ledger.chain().blocks().to_vec();
    blocks[4].records[0].digest.0[0] ^= 0xff;
    match Chain::from_blocks(blocks).audit() {
        AuditOutcome::Ok => println!("tampering went unnoticed"),
        AuditOutcome::FirstBadBlock(i) => println!("after editing block 4: first bad block {i}"),
    }
    Ok(())
}

//! Per-round latency of a ledger-backed round for a 10 MB model, and how far
//! a bus travels while it completes.

use dbafl::netsim::{connection_window, ddos_effective_rate, round_latency, DdosConfig, LinkParams, PayloadSizes};

fn main() -> dbafl::Result<()> {
    let link = LinkParams::default();
    for model_mb in [1.0, 10.0, 50.0] {
        let bits = model_mb * 8e6;
        let sizes = PayloadSizes {
            model_bits: bits,
            hash_bits: 256.0,
            block_bits: 8.0 * 502.0,
        };
        let lat = round_latency(&sizes, &link)?;
        println!(
            "{model_mb:>4} MB: up {:.4} s, dn {:.4} s, total {:.4} s, ledger overhead {:.4} s",
            lat.t_up,
            lat.t_dn,
            lat.total(),
            lat.t_bc
        );
    }

    for speed in [30.0, 60.0, 90.0] {
        println!(
            "{speed} km/h through 300 m: {:.1} s in range",
            connection_window(300.0, speed)?
        );
    }

    let rate = link.mobile_rate();
    for f in [0.0, 0.5, 0.8, 0.9] {
        let cfg = DdosConfig {
            attack_fraction: f,
            retarget_lag_terms: 1,
        };
        println!(
            "flooded at {f}: {:.1} Mb/s left at the server",
            ddos_effective_rate(rate, &cfg, true) / 1e6
        );
    }
    Ok(())
}

use dbafl::aggregation::{
    aggregate_async, aggregate_fedavg, aggregate_static, defense_filter, scaling_factor, DefensePolicy, ScalingFactor,
    Verdict,
};
use dbafl::model::{
    evaluate_accuracy, generate_synthetic_dataset, local_loss, local_train, Dataset, ModelParams, SyntheticSpec,
    TrainConfig,
};
use dbafl::netsim::{
    connection_window, ddos_effective_rate, round_latency, shannon_rate, tx_time, DdosConfig, EventQueue, LinkParams,
    PayloadSizes,
};
use proptest::prelude::*;

fn params(dim: usize) -> impl Strategy<Value = ModelParams> {
    prop::collection::vec(-50.0f64..50.0, dim).prop_map(|v| ModelParams::new(v).unwrap())
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// Straightforward logits: one weight row per class, biases after all rows.
fn oracle_logits(w: &[f64], x: &[f64], classes: usize) -> Vec<f64> {
    let f = x.len();
    (0..classes)
        .map(|c| (0..f).map(|j| w[c * f + j] * x[j]).sum::<f64>() + w[classes * f + c])
        .collect()
}

fn oracle_accuracy(w: &ModelParams, data: &Dataset) -> f64 {
    let hits = (0..data.len())
        .filter(|&i| {
            let z = oracle_logits(w.values(), data.sample(i), data.num_classes());
            let best = (0..z.len()).fold(0, |b, c| if z[c] > z[b] { c } else { b });
            best == data.label(i)
        })
        .count();
    hits as f64 / data.len() as f64
}

fn oracle_loss(w: &ModelParams, data: &Dataset) -> f64 {
    let total: f64 = (0..data.len())
        .map(|i| {
            let z = oracle_logits(w.values(), data.sample(i), data.num_classes());
            let sum: f64 = z.iter().map(|v| v.exp()).sum();
            -(z[data.label(i)].exp() / sum).ln()
        })
        .sum();
    total / data.len() as f64
}

proptest! {
    #[test]
    fn scaling_factor_is_the_clamped_floored_ratio(al in 0.0f64..=1.0, ag in 0.0f64..=1.0) {
        let eps = scaling_factor(al, ag).value();
        let expected = (al.max(0.01) / ag.max(0.01)).clamp(0.01, 100.0);
        prop_assert!(rel_close(eps, expected, 1e-12));
        prop_assert!((0.01..=100.0).contains(&eps));
    }

    #[test]
    fn scaling_factor_is_monotone(al in 0.0f64..=1.0, bump in 0.0f64..=1.0, ag in 0.0f64..=1.0) {
        let higher = (al + bump).min(1.0);
        prop_assert!(scaling_factor(higher, ag).value() >= scaling_factor(al, ag).value());
        prop_assert!(scaling_factor(ag, higher).value() <= scaling_factor(ag, al).value());
    }

    #[test]
    fn async_step_is_a_convex_combination((g, l) in (1usize..20).prop_flat_map(|d| (params(d), params(d))), e in 0.01f64..=100.0) {
        let w = aggregate_async(&g, &l, ScalingFactor::new(e)).unwrap();
        let s = aggregate_static(&g, &l, e).unwrap();
        prop_assert_eq!(&w, &s);
        for ((wv, gv), lv) in w.values().iter().zip(g.values()).zip(l.values()) {
            prop_assert!(rel_close(*wv, (gv + e * lv) / (1.0 + e), 1e-12));
            prop_assert!(*wv >= gv.min(*lv) - 1e-9 && *wv <= gv.max(*lv) + 1e-9);
        }
    }

    #[test]
    fn identical_inputs_are_a_fixed_point(g in params(12), e in 0.01f64..=100.0) {
        let w = aggregate_async(&g, &g, ScalingFactor::new(e)).unwrap();
        for (a, b) in w.values().iter().zip(g.values()) {
            prop_assert!(rel_close(*a, *b, 1e-14));
        }
    }

    #[test]
    fn fedavg_matches_a_weighted_mean(
        models in prop::collection::vec(params(6), 1..6),
        sizes in prop::collection::vec(1usize..2000, 6),
        rot in 0usize..6,
    ) {
        let sizes = &sizes[..models.len()];
        let out = aggregate_fedavg(&models, sizes).unwrap();
        let n: f64 = sizes.iter().map(|&s| s as f64).sum();
        for j in 0..6 {
            let expected: f64 = models.iter().zip(sizes).map(|(m, &s)| s as f64 * m.values()[j]).sum::<f64>() / n;
            prop_assert!(rel_close(out.values()[j], expected, 1e-12));
        }
        let mut m2 = models.clone();
        let mut s2 = sizes.to_vec();
        let r = rot % models.len();
        m2.rotate_left(r);
        s2.rotate_left(r);
        let rotated = aggregate_fedavg(&m2, &s2).unwrap();
        for (a, b) in rotated.values().iter().zip(out.values()) {
            prop_assert!(rel_close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn defense_accepts_exactly_above_threshold(al in 0.0f64..=1.0, ag in 0.0f64..=1.0, theta in 0.0f64..=1.0) {
        let policy = DefensePolicy::threshold(theta).unwrap();
        let expected = if al >= theta * ag { Verdict::Accept } else { Verdict::Discard };
        prop_assert_eq!(defense_filter(al, ag, policy), expected);
        prop_assert_eq!(defense_filter(al, ag, DefensePolicy::Off), Verdict::Accept);
    }

    #[test]
    fn accuracy_and_loss_match_the_oracle(seed in any::<u64>(), classes in 2usize..5, features in 1usize..6, w in prop::collection::vec(-3.0f64..3.0, 30)) {
        let data = generate_synthetic_dataset(seed, &SyntheticSpec::new(40, features, classes, 2.0)).unwrap();
        let w = ModelParams::new(w[..data.param_dim()].to_vec()).unwrap();
        let acc = evaluate_accuracy(&w, &data).unwrap();
        let loss = local_loss(&w, &data).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert!(loss >= 0.0);
        prop_assert!(rel_close(loss, oracle_loss(&w, &data), 1e-9));
        // Ties are measure-zero for continuous random weights.
        prop_assert_eq!(acc, oracle_accuracy(&w, &data));
    }

    #[test]
    fn training_is_reproducible(seed in any::<u64>(), batch in 1usize..60) {
        let data = generate_synthetic_dataset(seed, &SyntheticSpec::new(50, 3, 3, 2.0)).unwrap();
        let cfg = TrainConfig { epochs: 3, learning_rate: 0.05, batch_size: batch };
        let start = ModelParams::zeros(data.param_dim());
        let a = local_train(&start, &data, &cfg, seed ^ 1).unwrap();
        let b = local_train(&start, &data, &cfg, seed ^ 1).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn latency_phases_are_ordered(
        model in 1e3f64..1e9,
        hash_frac in 1e-9f64..1.0,
        block in 1.0f64..1e6,
        bw in 1e5f64..1e8,
        snr in 0.01f64..1e3,
        eth in 1e6f64..1e11,
    ) {
        let sizes = PayloadSizes { model_bits: model, hash_bits: model * hash_frac, block_bits: block };
        let link = LinkParams { mobile_bandwidth_hz: bw, mobile_snr: snr, ethernet_rate_bps: eth };
        let lat = round_latency(&sizes, &link).unwrap();
        prop_assert!(lat.t_up >= lat.t_ag);
        prop_assert!(lat.t_up >= lat.t_dn);
        prop_assert!(lat.t_bc > 0.0);
        prop_assert!(lat.total() >= lat.t_up + lat.t_dn);
        let r = bw * (1.0 + snr).log2();
        prop_assert!(rel_close(shannon_rate(&link), r, 1e-12));
        prop_assert!(rel_close(lat.t_dn, model / r, 1e-12));
        prop_assert!(rel_close(lat.t_ag, sizes.hash_bits / r + model / eth, 1e-12));
    }

    #[test]
    fn latency_grows_with_size_and_shrinks_with_rate(model in 1e3f64..1e9, grow in 1.0f64..10.0, bw in 1e5f64..1e8) {
        let link = LinkParams { mobile_bandwidth_hz: bw, ..LinkParams::default() };
        let faster = LinkParams { mobile_bandwidth_hz: bw * grow, ..link };
        let small = PayloadSizes { model_bits: model, hash_bits: 256.0, block_bits: 1e3 };
        let large = PayloadSizes { model_bits: model * grow, ..small };
        let base = round_latency(&small, &link).unwrap().total();
        prop_assert!(round_latency(&large, &link).unwrap().total() >= base);
        prop_assert!(round_latency(&small, &faster).unwrap().total() <= base);
    }

    #[test]
    fn ddos_stretches_transfers_by_the_lost_fraction(f in 0.0f64..0.99, rate in 1e3f64..1e10, bits in 1.0f64..1e9) {
        let cfg = DdosConfig { attack_fraction: f, retarget_lag_terms: 1 };
        let hit = ddos_effective_rate(rate, &cfg, true);
        prop_assert!(hit <= rate);
        prop_assert_eq!(ddos_effective_rate(rate, &cfg, false), rate);
        let ratio = tx_time(bits, hit).unwrap() / tx_time(bits, rate).unwrap();
        prop_assert!(rel_close(ratio, 1.0 / (1.0 - f), 1e-9));
    }

    #[test]
    fn queue_pops_in_time_then_insertion_order(times in prop::collection::vec(0u32..20, 0..60)) {
        let mut q = EventQueue::new();
        for (seq, &t) in times.iter().enumerate() {
            q.schedule(t as f64 * 0.5, seq).unwrap();
        }
        let mut expected: Vec<(f64, usize)> = times.iter().enumerate().map(|(s, &t)| (t as f64 * 0.5, s)).collect();
        expected.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut got = Vec::new();
        while let Some(e) = q.pop() {
            got.push(e);
        }
        prop_assert_eq!(got, expected);
    }
}

#[test]
fn a_round_fits_inside_the_coverage_window() {
    // 10 MB model over the default 20 MHz, SNR 3 link; a bus at 60 km/h
    // crossing 300 m of coverage.
    let sizes = PayloadSizes {
        model_bits: 8e7,
        hash_bits: 256.0,
        block_bits: 8.0 * 502.0,
    };
    let lat = round_latency(&sizes, &LinkParams::default()).unwrap();
    let window = connection_window(300.0, 60.0).unwrap();
    assert!((window - 18.0).abs() < 1e-12);
    assert!(lat.t_up < 5.0, "{lat:?}");
    assert!(lat.total() < window);
}

//! Latency model and the discrete-event scheduler.
//!
//! Mobile links run at Shannon capacity `B_M · log2(1 + γ_M)`; RSUs talk to
//! each other over an Ethernet backbone at `B_E` bits per second. A training
//! round decomposes into upload, aggregation, block propagation and download
//! phases, each a payload size over one of these rates.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkParams {
    /// Mobile channel bandwidth in Hz.
    pub mobile_bandwidth_hz: f64,
    /// Received SNR as a linear ratio (not dB).
    pub mobile_snr: f64,
    /// RSU backbone rate in bits per second.
    pub ethernet_rate_bps: f64,
}

impl Default for LinkParams {
    fn default() -> Self {
        LinkParams {
            mobile_bandwidth_hz: 20e6,
            mobile_snr: 3.0,
            ethernet_rate_bps: 1e9,
        }
    }
}

impl LinkParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mobile_bandwidth_hz > 0.0 && self.mobile_bandwidth_hz.is_finite()) {
            return Err(Error::config("link.mobile_bandwidth_hz", "must be positive"));
        }
        if !(self.mobile_snr >= 0.0 && self.mobile_snr.is_finite()) {
            return Err(Error::config("link.mobile_snr", "must be non-negative"));
        }
        if !(self.ethernet_rate_bps > 0.0 && self.ethernet_rate_bps.is_finite()) {
            return Err(Error::config("link.ethernet_rate_bps", "must be positive"));
        }
        Ok(())
    }

    pub fn mobile_rate(&self) -> f64 {
        shannon_rate(self)
    }
}

/// Converts an SNR in decibels to the linear ratio used by [`LinkParams`].
pub fn snr_from_db(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PayloadSizes {
    pub model_bits: f64,
    pub hash_bits: f64,
    pub block_bits: f64,
}

impl PayloadSizes {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("payload.model_bits", self.model_bits),
            ("payload.hash_bits", self.hash_bits),
            ("payload.block_bits", self.block_bits),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.hash_bits > self.model_bits {
            return Err(Error::config("payload.hash_bits", "must not exceed the model size"));
        }
        Ok(())
    }
}

/// Per-phase latencies of one round, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LatencyBreakdown {
    pub t_local: f64,
    pub t_up: f64,
    pub t_ag: f64,
    pub t_bg: f64,
    pub t_bp: f64,
    pub t_dn: f64,
    /// Extra latency relative to ledger-free asynchronous FL.
    pub t_bc: f64,
}

impl LatencyBreakdown {
    /// Round latency `T = T_local + T_up + T_ag + T_bg + T_bp + T_dn`.
    pub fn total(&self) -> f64 {
        self.t_local + self.t_up + self.t_ag + self.t_bg + self.t_bp + self.t_dn
    }
}

/// `B_M · log2(1 + γ_M)`; zero when the SNR is zero.
pub fn shannon_rate(link: &LinkParams) -> f64 {
    link.mobile_bandwidth_hz * (1.0 + link.mobile_snr).log2()
}

pub fn tx_time(size_bits: f64, rate_bps: f64) -> Result<f64> {
    if !(rate_bps > 0.0) {
        return Err(Error::UnreachableLink);
    }
    Ok(size_bits / rate_bps)
}

/// Closed-form latencies of a blockchain-backed round. Local training and
/// block generation are zero: training is not on the critical path of
/// asynchronous aggregation and hashing a block is negligible next to
/// communication.
pub fn round_latency(sizes: &PayloadSizes, link: &LinkParams) -> Result<LatencyBreakdown> {
    let mobile = shannon_rate(link);
    let up_model = tx_time(sizes.model_bits, mobile)?;
    let up_hash = tx_time(sizes.hash_bits, mobile)?;
    let sync_model = tx_time(sizes.model_bits, link.ethernet_rate_bps)?;
    let t_bp = tx_time(sizes.block_bits, mobile)?;
    Ok(LatencyBreakdown {
        t_local: 0.0,
        t_up: up_model + up_hash + sync_model,
        t_ag: up_hash + sync_model,
        t_bg: 0.0,
        t_bp,
        t_dn: up_model,
        t_bc: 2.0 * up_hash + 2.0 * sync_model + t_bp,
    })
}

/// Seconds a vehicle at `speed_kmh` stays inside `coverage_m` of radio range.
/// A stationary vehicle never leaves: the window is `f64::INFINITY`.
pub fn connection_window(coverage_m: f64, speed_kmh: f64) -> Result<f64> {
    if !(coverage_m >= 0.0 && speed_kmh >= 0.0) {
        return Err(Error::contract("coverage and speed must be non-negative"));
    }
    if speed_kmh == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(coverage_m * 3.6 / speed_kmh)
}

/// Flooding attack against whichever node served aggregation
/// `retarget_lag_terms` leader terms ago.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdosConfig {
    pub attack_fraction: f64,
    pub retarget_lag_terms: u64,
}

impl Default for DdosConfig {
    fn default() -> Self {
        DdosConfig {
            attack_fraction: 0.0,
            retarget_lag_terms: 1,
        }
    }
}

impl DdosConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.attack_fraction) {
            return Err(Error::config("attack.ddos.attack_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.attack_fraction > 0.0
    }
}

/// Bandwidth left to legitimate traffic: `base · (1 − f)` at the target.
pub fn ddos_effective_rate(base_rate_bps: f64, cfg: &DdosConfig, target_is_current_server: bool) -> f64 {
    if target_is_current_server {
        base_rate_bps * (1.0 - cfg.attack_fraction)
    } else {
        base_rate_bps
    }
}

struct Scheduled<E> {
    time: f64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    // BinaryHeap is a max-heap; reverse so the earliest (time, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Future events ordered by `(time, insertion order)`.
pub struct EventQueue<E> {
    heap: BinaryHeap<Scheduled<E>>,
    now: f64,
    next_seq: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            now: 0.0,
            next_seq: 0,
        }
    }

    /// Current simulation clock: the time of the last popped event.
    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, time: f64, event: E) -> Result<()> {
        if time.is_nan() || time < self.now {
            return Err(Error::contract(format!(
                "cannot schedule at {time} before the clock at {}",
                self.now
            )));
        }
        self.heap.push(Scheduled {
            time,
            seq: self.next_seq,
            event,
        });
        self.next_seq += 1;
        Ok(())
    }

    pub fn schedule_in(&mut self, delay: f64, event: E) -> Result<()> {
        self.schedule(self.now + delay, event)
    }

    /// Next event and its time; `None` once the queue is drained.
    pub fn pop(&mut self) -> Option<(f64, E)> {
        let Scheduled { time, event, .. } = self.heap.pop()?;
        self.now = time;
        Some((time, event))
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|s| s.time)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link(bw: f64, snr: f64, eth: f64) -> LinkParams {
        LinkParams {
            mobile_bandwidth_hz: bw,
            mobile_snr: snr,
            ethernet_rate_bps: eth,
        }
    }

    #[test]
    fn shannon_examples() {
        assert_eq!(shannon_rate(&link(20e6, 3.0, 1e9)), 40e6);
        assert_eq!(shannon_rate(&link(20e6, 0.0, 1e9)), 0.0);
        assert_eq!(shannon_rate(&link(1e6, 1.0, 1e9)), 1e6);
    }

    #[test]
    fn tx_time_examples() {
        assert_eq!(tx_time(80e6, 40e6).unwrap(), 2.0);
        assert_eq!(tx_time(80e6, 1e9).unwrap(), 0.08);
        assert!((tx_time(256.0, 40e6).unwrap() - 6.4e-6).abs() < 1e-18);
        assert!(matches!(tx_time(1.0, 0.0), Err(Error::UnreachableLink)));
    }

    #[test]
    fn round_latency_reference_case() {
        let sizes = PayloadSizes {
            model_bits: 80e6,
            hash_bits: 256.0,
            block_bits: 8e3,
        };
        let lat = round_latency(&sizes, &link(20e6, 3.0, 1e9)).unwrap();
        // independent sums of the closed-form terms
        let up_model = 80e6 / 40e6;
        let up_hash = 256.0 / 40e6;
        let sync = 80e6 / 1e9;
        assert!((lat.t_up - (up_model + up_hash + sync)).abs() < 1e-12);
        assert!((lat.t_up - 2.0800064).abs() < 1e-9);
        assert!((lat.t_ag - 0.0800064).abs() < 1e-9);
        assert_eq!(lat.t_dn, 2.0);
        assert!((lat.t_bp - 2e-4).abs() < 1e-15);
        assert!((lat.t_bc - (2.0 * 6.4e-6 + 2.0 * 0.08 + 2e-4)).abs() < 1e-12);
        assert_eq!(lat.t_local, 0.0);
        assert_eq!(lat.t_bg, 0.0);
        assert!(matches!(
            round_latency(&sizes, &link(20e6, 0.0, 1e9)),
            Err(Error::UnreachableLink)
        ));
    }

    #[test]
    fn overhead_tends_to_twice_the_sync_time() {
        let l = link(20e6, 3.0, 1e9);
        let tiny = PayloadSizes {
            model_bits: 80e6,
            hash_bits: 1e-9,
            block_bits: 1e-9,
        };
        let lat = round_latency(&tiny, &l).unwrap();
        assert!((lat.t_bc - 2.0 * 0.08).abs() < 1e-12);
    }

    #[test]
    fn connection_window_examples() {
        assert!((connection_window(300.0, 60.0).unwrap() - 18.0).abs() < 1e-12);
        assert!((connection_window(300.0, 30.0).unwrap() - 36.0).abs() < 1e-12);
        assert_eq!(connection_window(0.0, 60.0).unwrap(), 0.0);
        assert_eq!(connection_window(300.0, 0.0).unwrap(), f64::INFINITY);
        assert!(connection_window(-1.0, 60.0).is_err());
    }

    #[test]
    fn ddos_examples() {
        let cfg = DdosConfig {
            attack_fraction: 0.9,
            retarget_lag_terms: 1,
        };
        assert!((ddos_effective_rate(100.0, &cfg, true) - 10.0).abs() < 1e-12);
        assert_eq!(ddos_effective_rate(100.0, &cfg, false), 100.0);
        assert_eq!(ddos_effective_rate(100.0, &DdosConfig::default(), true), 100.0);
        assert!(DdosConfig {
            attack_fraction: 1.0,
            retarget_lag_terms: 0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn queue_orders_by_time_then_insertion() {
        let mut q = EventQueue::new();
        q.schedule(1.0, "late").unwrap();
        q.schedule(0.5, "early").unwrap();
        q.schedule(1.0, "late-second").unwrap();
        assert_eq!(q.pop(), Some((0.5, "early")));
        assert_eq!(q.now(), 0.5);
        assert_eq!(q.pop(), Some((1.0, "late")));
        assert_eq!(q.pop(), Some((1.0, "late-second")));
        assert_eq!(q.pop(), None);
    }

    #[test]
    fn scheduling_in_the_past_is_rejected() {
        let mut q = EventQueue::new();
        q.schedule(2.0, 1).unwrap();
        q.pop();
        assert!(q.schedule(1.0, 2).is_err());
        assert!(q.schedule(f64::NAN, 2).is_err());
        q.schedule(2.0, 3).unwrap();
    }

    #[test]
    fn snr_db_conversion() {
        assert!((snr_from_db(10.0) - 10.0).abs() < 1e-12);
        assert!((snr_from_db(0.0) - 1.0).abs() < 1e-12);
    }
}

//! k-FP style features: counts, byte totals, rates, packet concentration,
//! ordering statistics, head/tail direction counts and inter-packet timing.

use crate::stats;
use crate::trace_store::{Direction, PacketTrace};

use super::FeatureError;

pub const CONCENTRATION_CHUNK: usize = 20;
pub const HEAD_TAIL: usize = 30;
/// Duration substituted when every packet has the same timestamp.
pub const MIN_DURATION: f64 = 1e-6;

pub const KFP_FEATURE_NAMES: [&str; 24] = [
    "total_packets",
    "incoming_packets",
    "outgoing_packets",
    "incoming_bytes",
    "outgoing_bytes",
    "percent_incoming",
    "percent_outgoing",
    "duration",
    "packets_per_second",
    "concentration_sum",
    "concentration_mean",
    "concentration_std",
    "concentration_max",
    "order_in_mean",
    "order_in_std",
    "order_out_mean",
    "order_out_std",
    "first30_incoming",
    "first30_outgoing",
    "last30_incoming",
    "last30_outgoing",
    "interpacket_mean",
    "interpacket_std",
    "interpacket_max",
];

pub fn kfp_feature_names() -> Vec<String> {
    KFP_FEATURE_NAMES.iter().map(|s| s.to_string()).collect()
}

/// Outgoing packets per consecutive chunk of [`CONCENTRATION_CHUNK`] packets.
/// A trailing partial chunk is included.
pub fn concentration(t: &PacketTrace) -> Vec<f64> {
    t.packets
        .chunks(CONCENTRATION_CHUNK)
        .map(|c| c.iter().filter(|p| p.direction == Direction::Out).count() as f64)
        .collect()
}

fn positions(t: &PacketTrace, dir: Direction) -> Vec<f64> {
    t.packets.iter().enumerate().filter(|(_, p)| p.direction == dir).map(|(i, _)| i as f64).collect()
}

fn count_dir(pkts: &[crate::trace_store::Packet], dir: Direction) -> f64 {
    pkts.iter().filter(|p| p.direction == dir).count() as f64
}

pub fn extract_kfp(t: &PacketTrace) -> Result<Vec<f64>, FeatureError> {
    if t.is_empty() {
        return Err(FeatureError::EmptyTrace(t.instance_id.clone()));
    }
    let n = t.len() as f64;
    let n_in = t.count(Direction::In) as f64;
    let n_out = t.count(Direction::Out) as f64;
    let duration = t.duration();
    let rate_duration = if duration > 0.0 { duration } else { MIN_DURATION };

    let conc = concentration(t);
    let order_in = positions(t, Direction::In);
    let order_out = positions(t, Direction::Out);
    let head = &t.packets[..t.len().min(HEAD_TAIL)];
    let tail = &t.packets[t.len().saturating_sub(HEAD_TAIL)..];
    let gaps: Vec<f64> = t.packets.windows(2).map(|w| w[1].time - w[0].time).collect();

    let out = vec![
        n,
        n_in,
        n_out,
        t.bytes(Direction::In) as f64,
        t.bytes(Direction::Out) as f64,
        n_in / n,
        n_out / n,
        duration,
        n / rate_duration,
        conc.iter().sum(),
        stats::mean(&conc),
        stats::std_dev(&conc),
        stats::max(&conc),
        stats::mean(&order_in),
        stats::std_dev(&order_in),
        stats::mean(&order_out),
        stats::std_dev(&order_out),
        count_dir(head, Direction::In),
        count_dir(head, Direction::Out),
        count_dir(tail, Direction::In),
        count_dir(tail, Direction::Out),
        stats::mean(&gaps),
        stats::std_dev(&gaps),
        stats::max(&gaps),
    ];
    debug_assert_eq!(out.len(), KFP_FEATURE_NAMES.len());
    Ok(out)
}

//! CUMUL features: per-direction packet counts and byte totals followed by
//! 100 equidistant samples of the signed cumulative size curve.

use crate::trace_store::{Direction, PacketTrace};

use super::FeatureError;

pub const INTERPOLATION_POINTS: usize = 100;
pub const CUMUL_LEN: usize = 4 + INTERPOLATION_POINTS;

pub fn cumul_feature_names() -> Vec<String> {
    let mut names: Vec<String> =
        ["incoming_count", "outgoing_count", "incoming_bytes", "outgoing_bytes"].iter().map(|s| s.to_string()).collect();
    names.extend((1..=INTERPOLATION_POINTS).map(|i| format!("cumul_{i:03}")));
    names
}

/// Signed running total: incoming adds, outgoing subtracts.
pub fn cumulative_sizes(t: &PacketTrace) -> Vec<f64> {
    let mut acc = 0.0;
    t.packets
        .iter()
        .map(|p| {
            match p.direction {
                Direction::In => acc += p.size as f64,
                Direction::Out => acc -= p.size as f64,
            }
            acc
        })
        .collect()
}

pub fn extract_cumul(t: &PacketTrace) -> Result<Vec<f64>, FeatureError> {
    if t.is_empty() {
        return Err(FeatureError::EmptyTrace(t.instance_id.clone()));
    }
    let mut out = Vec::with_capacity(CUMUL_LEN);
    out.push(t.count(Direction::In) as f64);
    out.push(t.count(Direction::Out) as f64);
    out.push(t.bytes(Direction::In) as f64);
    out.push(t.bytes(Direction::Out) as f64);

    let c = cumulative_sizes(t);
    let last = c.len() - 1;
    let steps = (INTERPOLATION_POINTS - 1) as f64;
    for j in 0..INTERPOLATION_POINTS {
        // sample position over packet indices 0..=last, endpoints included
        let pos = (j * last) as f64 / steps;
        let lo = pos.floor() as usize;
        if lo >= last {
            out.push(c[last]);
        } else {
            let frac = pos - lo as f64;
            out.push(c[lo] + (c[lo + 1] - c[lo]) * frac);
        }
    }
    Ok(out)
}

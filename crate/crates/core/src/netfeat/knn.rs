//! Wang-kNN style features: totals, leading packet lengths, packet ordering,
//! per-span outgoing counts and outgoing bursts.

use serde::{Deserialize, Serialize};

use crate::trace_store::{Direction, PacketTrace};

use super::FeatureError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnnFeatureConfig {
    /// Number of outgoing packets covered by the ordering features.
    pub ordering_length: usize,
    /// Packets per span for the outgoing-count features.
    pub span: usize,
    /// Number of leading packets whose signed lengths are kept.
    pub first_k_lengths: usize,
}

impl Default for KnnFeatureConfig {
    fn default() -> Self {
        KnnFeatureConfig { ordering_length: 500, span: 30, first_k_lengths: 20 }
    }
}

impl KnnFeatureConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.ordering_length == 0 || self.span == 0 || self.first_k_lengths == 0 {
            return Err(FeatureError::InvalidConfig("kNN feature sizes must be positive".into()));
        }
        Ok(())
    }

    /// Span slots cover the first `ordering_length` packets.
    pub fn span_slots(&self) -> usize {
        self.ordering_length.div_ceil(self.span)
    }

    pub fn len(&self) -> usize {
        5 + self.first_k_lengths + 2 * self.ordering_length + self.span_slots() + 3
    }
}

pub fn knn_feature_names(cfg: &KnnFeatureConfig) -> Vec<String> {
    let mut names: Vec<String> = ["total_packets", "incoming_count", "outgoing_count", "incoming_bytes", "outgoing_bytes"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((1..=cfg.first_k_lengths).map(|i| format!("length_{i:03}")));
    names.extend((1..=cfg.ordering_length).map(|i| format!("order_{i:03}")));
    names.extend((1..=cfg.ordering_length).map(|i| format!("order_gap_{i:03}")));
    names.extend((1..=cfg.span_slots()).map(|i| format!("span_outgoing_{i:03}")));
    names.extend(["burst_count", "burst_mean", "burst_max"].iter().map(|s| s.to_string()));
    names
}

/// Lengths of the maximal runs of consecutive outgoing packets.
pub fn outgoing_bursts(t: &PacketTrace) -> Vec<usize> {
    let mut bursts = Vec::new();
    let mut run = 0;
    for p in &t.packets {
        if p.direction == Direction::Out {
            run += 1;
        } else if run > 0 {
            bursts.push(run);
            run = 0;
        }
    }
    if run > 0 {
        bursts.push(run);
    }
    bursts
}

pub fn extract_knn(t: &PacketTrace, cfg: &KnnFeatureConfig) -> Result<Vec<f64>, FeatureError> {
    if t.is_empty() {
        return Err(FeatureError::EmptyTrace(t.instance_id.clone()));
    }
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.len());
    out.push(t.len() as f64);
    out.push(t.count(Direction::In) as f64);
    out.push(t.count(Direction::Out) as f64);
    out.push(t.bytes(Direction::In) as f64);
    out.push(t.bytes(Direction::Out) as f64);

    out.extend((0..cfg.first_k_lengths).map(|i| t.packets.get(i).map_or(0.0, |p| p.signed_size() as f64)));

    // index of an outgoing packet = number of packets before it
    let positions: Vec<usize> = t
        .packets
        .iter()
        .enumerate()
        .filter(|(_, p)| p.direction == Direction::Out)
        .map(|(i, _)| i)
        .take(cfg.ordering_length + 1)
        .collect();
    out.extend((0..cfg.ordering_length).map(|i| positions.get(i).map_or(0.0, |&p| p as f64)));
    out.extend((0..cfg.ordering_length).map(|i| match (positions.get(i), positions.get(i + 1)) {
        (Some(a), Some(b)) => (b - a) as f64,
        _ => 0.0,
    }));

    for slot in 0..cfg.span_slots() {
        let start = slot * cfg.span;
        let end = (start + cfg.span).min(t.len());
        let n = if start < end {
            t.packets[start..end].iter().filter(|p| p.direction == Direction::Out).count()
        } else {
            0
        };
        out.push(n as f64);
    }

    let bursts = outgoing_bursts(t);
    let (count, mean, max) = if bursts.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        let total: usize = bursts.iter().sum();
        (bursts.len() as f64, total as f64 / bursts.len() as f64, *bursts.iter().max().unwrap() as f64)
    };
    out.extend([count, mean, max]);
    debug_assert_eq!(out.len(), cfg.len());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace_store::Packet;

    fn trace(dirs: &[Direction]) -> PacketTrace {
        PacketTrace {
            site_id: "s".into(),
            instance_id: "0".into(),
            packets: dirs
                .iter()
                .enumerate()
                .map(|(i, &direction)| Packet { time: i as f64 * 0.01, direction, size: 100 + i as u32 })
                .collect(),
        }
    }

    fn small_cfg() -> KnnFeatureConfig {
        KnnFeatureConfig { ordering_length: 6, span: 2, first_k_lengths: 20 }
    }

    #[test]
    fn ordering_counts_preceding_packets() {
        use Direction::*;
        let cfg = small_cfg();
        let f = extract_knn(&trace(&[Out, In, Out, In]), &cfg).unwrap();
        let order = &f[25..25 + cfg.ordering_length];
        assert_eq!(order, &[0.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        let gaps = &f[25 + cfg.ordering_length..25 + 2 * cfg.ordering_length];
        assert_eq!(gaps, &[2.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn leading_lengths_padded() {
        use Direction::*;
        let f = extract_knn(&trace(&[Out, In, Out]), &small_cfg()).unwrap();
        let lengths = &f[5..25];
        assert_eq!(&lengths[..3], &[100.0, -101.0, 102.0]);
        assert_eq!(lengths[3..].iter().filter(|&&x| x == 0.0).count(), 17);
    }

    #[test]
    fn bursts_are_maximal_outgoing_runs() {
        use Direction::*;
        let t = trace(&[Out, Out, In, Out]);
        assert_eq!(outgoing_bursts(&t), vec![2, 1]);
        let f = extract_knn(&t, &small_cfg()).unwrap();
        let n = f.len();
        assert_eq!(&f[n - 3..], &[2.0, 1.5, 2.0]);
    }

    #[test]
    fn span_counts() {
        use Direction::*;
        let cfg = small_cfg();
        let f = extract_knn(&trace(&[Out, Out, In, Out, In]), &cfg).unwrap();
        let start = 25 + 2 * cfg.ordering_length;
        assert_eq!(&f[start..start + cfg.span_slots()], &[2.0, 1.0, 0.0]);
    }

    #[test]
    fn ordering_truncates_past_n() {
        let cfg = KnnFeatureConfig { ordering_length: 2, span: 30, first_k_lengths: 1 };
        let f = extract_knn(&trace(&[Direction::Out; 5]), &cfg).unwrap();
        assert_eq!(&f[6..8], &[0.0, 1.0]);
        assert_eq!(&f[8..10], &[1.0, 1.0]);
        assert_eq!(f.len(), cfg.len());
    }

    #[test]
    fn default_shape() {
        let cfg = KnnFeatureConfig::default();
        assert_eq!(knn_feature_names(&cfg).len(), cfg.len());
        assert_eq!(cfg.span_slots(), 17);
    }
}

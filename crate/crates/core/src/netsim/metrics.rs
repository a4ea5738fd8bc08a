//! Measurements collected by a run and the derived tables.

use std::collections::BTreeMap;

use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryRecord {
    pub client: String,
    /// Position in the client's workload.
    pub index: usize,
    pub name: String,
    pub issued: f64,
    /// Seconds from issue to the parsed answer.
    pub resolution: Option<f64>,
    pub source: Option<String>,
    pub error: Option<String>,
}

impl QueryRecord {
    pub fn status(&self) -> &str {
        match (&self.resolution, &self.error) {
            (Some(_), _) => "resolved",
            (None, Some(_)) => "failed",
            (None, None) => "unresolved",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LinkStats {
    pub link: String,
    /// Hops to the border router.
    pub hop: u8,
    pub frames_sent: u64,
    pub frames_received: u64,
    pub frames_lost: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetransmissionRecord {
    pub client: String,
    pub query: usize,
    pub attempt: u32,
    /// Seconds since the exchange's first transmission.
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CacheEventRecord {
    pub time: f64,
    pub node: String,
    pub query: Option<usize>,
    pub kind: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum LogEvent {
    Query { t: f64, client: String, query: usize, name: String },
    Datagram { t: f64, link: String, src: String, dst: String, octets: usize, frames: usize, delivered: bool },
    Retransmission { t: f64, client: String, query: usize, attempt: u32, offset: f64 },
    Cache { t: f64, node: String, query: Option<usize>, kind: String },
    EchoChallenge { t: f64, client: String, query: usize },
    Resolved { t: f64, client: String, query: usize, source: String, resolution: f64 },
    Failed { t: f64, client: String, query: usize, reason: String },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub scenario: String,
    pub seed: u64,
    pub queries: Vec<QueryRecord>,
    pub links: Vec<LinkStats>,
    pub retransmissions: Vec<RetransmissionRecord>,
    pub cache_events: Vec<CacheEventRecord>,
    pub echo_challenges: u64,
    pub events: Vec<LogEvent>,
    /// Virtual time of the last processed event.
    pub end_time: f64,
}

impl Metrics {
    pub fn resolved(&self) -> usize {
        self.queries.iter().filter(|q| q.resolution.is_some()).count()
    }

    pub fn unresolved(&self) -> usize {
        self.queries.len() - self.resolved()
    }

    /// Sorted resolution times of completed queries.
    pub fn resolution_times(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.queries.iter().filter_map(|q| q.resolution).collect();
        v.sort_by(f64::total_cmp);
        v
    }

    pub fn hop(&self, hop: u8) -> HopUtilization {
        link_utilization(self).into_iter().find(|h| h.hop == hop).unwrap_or(HopUtilization { hop, ..Default::default() })
    }

    pub fn cache_count(&self, kind: &str) -> usize {
        self.cache_events.iter().filter(|e| e.kind == kind).count()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct HopUtilization {
    pub hop: u8,
    pub frames_sent: u64,
    pub frames_received: u64,
    pub frames_lost: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

/// Per-hop totals, ordered by hop distance.
pub fn link_utilization(metrics: &Metrics) -> Vec<HopUtilization> {
    let mut by_hop: BTreeMap<u8, HopUtilization> = BTreeMap::new();
    for l in &metrics.links {
        let h = by_hop.entry(l.hop).or_insert(HopUtilization { hop: l.hop, ..Default::default() });
        h.frames_sent += l.frames_sent;
        h.frames_received += l.frames_received;
        h.frames_lost += l.frames_lost;
        h.bytes_sent += l.bytes_sent;
        h.bytes_received += l.bytes_received;
    }
    by_hop.into_values().collect()
}

/// Right-continuous empirical CDF of resolution times evaluated on `grid`.
/// The denominator counts every query, so the curve ends at the resolved
/// fraction.
pub fn resolution_cdf(metrics: &Metrics, grid: &[f64]) -> Vec<(f64, f64)> {
    let times = metrics.resolution_times();
    let total = metrics.queries.len();
    grid.iter()
        .map(|&x| {
            let n = times.partition_point(|&t| t <= x);
            (x, if total == 0 { 0.0 } else { n as f64 / total as f64 })
        })
        .collect()
}

/// `(query, offset, attempt)` for every client retransmission.
pub fn retransmission_offsets(metrics: &Metrics) -> Vec<(String, f64, u32)> {
    metrics
        .retransmissions
        .iter()
        .map(|r| (format!("{}/{}", r.client, r.query), r.offset, r.attempt))
        .collect()
}

/// Linear-interpolation quantile of sorted `v`.
pub fn quantile(v: &[f64], q: f64) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

//! Name-length and record-type statistics over query traces.
//!
//! A trace is plain text with one query per line:
//!
//! ```text
//! # name          rtype  rclass
//! example.org     AAAA   IN
//! ```
//!
//! Fields are whitespace separated. Blank lines and lines starting with `#`
//! are ignored; lines that do not parse are counted in `skipped`.
//! Name length is the presentation length without the trailing dot.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::Serialize;

use crate::dns::DnsName;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceStats {
    pub count: usize,
    pub skipped: usize,
    pub min: usize,
    pub max: usize,
    /// Most frequent length; the smallest one on ties.
    pub mode: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub stddev: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    /// Share of each record type, keyed by mnemonic.
    pub types: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub name_len: usize,
    pub rtype: String,
}

pub fn parse_line(line: &str) -> Option<TraceEntry> {
    let mut fields = line.split_whitespace();
    let name = fields.next()?;
    let rtype = fields.next()?;
    let class = fields.next()?;
    if fields.next().is_some() || !rtype.chars().all(|c| c.is_ascii_alphanumeric()) || !class.chars().all(|c| c.is_ascii_alphanumeric()) {
        return None;
    }
    let parsed: DnsName = name.parse().ok()?;
    Some(TraceEntry { name_len: parsed.presentation_len(), rtype: rtype.to_ascii_uppercase() })
}

/// Parses a whole trace, returning the entries and the number of skipped lines.
pub fn read_trace<R: BufRead>(input: R) -> std::io::Result<(Vec<TraceEntry>, usize)> {
    let mut entries = Vec::new();
    let mut skipped = 0;
    for line in input.lines() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        match parse_line(t) {
            Some(e) => entries.push(e),
            None => skipped += 1,
        }
    }
    Ok((entries, skipped))
}

/// Linear interpolation between closest ranks over sorted `v`:
/// position `q·(n−1)`.
pub fn quantile(v: &[usize], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] as f64 + (v[hi] as f64 - v[lo] as f64) * (pos - lo as f64)
}

/// `None` for an empty trace.
pub fn analyze(entries: &[TraceEntry], skipped: usize) -> Option<TraceStats> {
    if entries.is_empty() {
        return None;
    }
    let mut lens: Vec<usize> = entries.iter().map(|e| e.name_len).collect();
    lens.sort_unstable();
    let n = lens.len() as f64;
    let mean = lens.iter().map(|&l| l as f64).sum::<f64>() / n;
    let var = lens.iter().map(|&l| (l as f64 - mean).powi(2)).sum::<f64>() / n;

    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in &lens {
        *counts.entry(l).or_default() += 1;
    }
    // ascending iteration with a strict comparison keeps the smallest tied length
    let mode = counts.iter().fold((0, 0), |best, (&l, &c)| if c > best.1 { (l, c) } else { best }).0;

    let mut types: BTreeMap<String, usize> = BTreeMap::new();
    for e in entries {
        *types.entry(e.rtype.clone()).or_default() += 1;
    }
    Some(TraceStats {
        count: lens.len(),
        skipped,
        min: lens[0],
        max: lens[lens.len() - 1],
        mode,
        mean,
        stddev: var.sqrt(),
        q1: quantile(&lens, 0.25),
        q2: quantile(&lens, 0.5),
        q3: quantile(&lens, 0.75),
        types: types.into_iter().map(|(k, c)| (k, c as f64 / n)).collect(),
    })
}

pub const STATS_HEADER: [&str; 11] = ["count", "skipped", "min", "max", "mode", "mean", "stddev", "q1", "q2", "q3", "types"];

/// One-row CSV; the `types` column lists `TYPE=ratio` pairs, highest share first.
pub fn write_csv<W: std::io::Write>(out: W, s: &TraceStats) -> csv::Result<()> {
    let mut types: Vec<(&String, &f64)> = s.types.iter().collect();
    types.sort_by(|a, b| b.1.total_cmp(a.1).then(a.0.cmp(b.0)));
    let types = types.iter().map(|(k, v)| format!("{k}={v:.6}")).collect::<Vec<_>>().join(";");
    let mut w = csv::Writer::from_writer(out);
    w.write_record(STATS_HEADER)?;
    w.write_record([
        s.count.to_string(),
        s.skipped.to_string(),
        s.min.to_string(),
        s.max.to_string(),
        s.mode.to_string(),
        format!("{:.6}", s.mean),
        format!("{:.6}", s.stddev),
        format!("{:.6}", s.q1),
        format!("{:.6}", s.q2),
        format!("{:.6}", s.q3),
        types,
    ])?;
    w.flush()?;
    Ok(())
}

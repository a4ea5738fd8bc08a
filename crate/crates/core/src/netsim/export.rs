//! CSV and JSON output of simulation runs.
//!
//! A simulation directory holds one `seed-<n>/` bundle per seed plus
//! `aggregate.csv` and `manifest.json`. Column sets are versioned by
//! [`SCHEMA_VERSION`]; times are seconds with six decimals.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::metrics::{quantile, Metrics};
use super::{run, NetsimError, Scenario};
use crate::cache::CacheEventKind;

pub const SCHEMA_VERSION: u32 = 1;

pub const RESOLUTION_HEADER: [&str; 7] = ["client", "query", "name", "issued_s", "resolution_s", "source", "status"];
pub const LINK_HEADER: [&str; 7] =
    ["link", "hop", "frames_sent", "frames_received", "frames_lost", "bytes_sent", "bytes_received"];
pub const RETRANSMISSION_HEADER: [&str; 4] = ["client", "query", "attempt", "offset_s"];
pub const CACHE_HEADER: [&str; 4] = ["time_s", "node", "query", "kind"];
pub const AGGREGATE_HEADER: [&str; 18] = [
    "seed",
    "queries",
    "resolved",
    "unresolved",
    "median_resolution_s",
    "p90_resolution_s",
    "max_resolution_s",
    "hop1_frames",
    "hop1_bytes",
    "hop2_frames",
    "hop2_bytes",
    "retransmissions",
    "echo_challenges",
    "hit",
    "stale_hit",
    "revalidation_ok",
    "revalidation_full",
    "miss",
];

pub const BUNDLE_FILES: [&str; 5] =
    ["resolution_times.csv", "link_utilization.csv", "retransmissions.csv", "cache_events.csv", "events.json"];

fn fmt_s(v: f64) -> String {
    format!("{v:.6}")
}

fn opt_s(v: Option<f64>) -> String {
    v.map(fmt_s).unwrap_or_default()
}

fn table<W: Write>(out: W, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), NetsimError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_resolution_times<W: Write>(out: W, m: &Metrics) -> Result<(), NetsimError> {
    table(
        out,
        &RESOLUTION_HEADER,
        m.queries.iter().map(|q| {
            vec![
                q.client.clone(),
                q.index.to_string(),
                q.name.clone(),
                fmt_s(q.issued),
                opt_s(q.resolution),
                q.source.clone().unwrap_or_default(),
                q.status().to_string(),
            ]
        }),
    )
}

pub fn write_link_utilization<W: Write>(out: W, m: &Metrics) -> Result<(), NetsimError> {
    table(
        out,
        &LINK_HEADER,
        m.links.iter().map(|l| {
            vec![
                l.link.clone(),
                l.hop.to_string(),
                l.frames_sent.to_string(),
                l.frames_received.to_string(),
                l.frames_lost.to_string(),
                l.bytes_sent.to_string(),
                l.bytes_received.to_string(),
            ]
        }),
    )
}

pub fn write_retransmissions<W: Write>(out: W, m: &Metrics) -> Result<(), NetsimError> {
    table(
        out,
        &RETRANSMISSION_HEADER,
        m.retransmissions
            .iter()
            .map(|r| vec![r.client.clone(), r.query.to_string(), r.attempt.to_string(), fmt_s(r.offset)]),
    )
}

pub fn write_cache_events<W: Write>(out: W, m: &Metrics) -> Result<(), NetsimError> {
    table(
        out,
        &CACHE_HEADER,
        m.cache_events.iter().map(|e| {
            vec![fmt_s(e.time), e.node.clone(), e.query.map(|q| q.to_string()).unwrap_or_default(), e.kind.clone()]
        }),
    )
}

#[derive(Serialize)]
struct EventLog<'a> {
    schema_version: u32,
    scenario: &'a str,
    seed: u64,
    events: &'a [super::metrics::LogEvent],
}

pub fn write_event_log<W: Write>(out: W, m: &Metrics) -> Result<(), NetsimError> {
    let log = EventLog { schema_version: SCHEMA_VERSION, scenario: &m.scenario, seed: m.seed, events: &m.events };
    serde_json::to_writer_pretty(out, &log)?;
    Ok(())
}

pub fn aggregate_row(m: &Metrics) -> Vec<String> {
    let times = m.resolution_times();
    let (h1, h2) = (m.hop(1), m.hop(2));
    let mut row = vec![
        m.seed.to_string(),
        m.queries.len().to_string(),
        m.resolved().to_string(),
        m.unresolved().to_string(),
        opt_s(quantile(&times, 0.5)),
        opt_s(quantile(&times, 0.9)),
        opt_s(times.last().copied()),
        h1.frames_sent.to_string(),
        h1.bytes_sent.to_string(),
        h2.frames_sent.to_string(),
        h2.bytes_sent.to_string(),
        m.retransmissions.len().to_string(),
        m.echo_challenges.to_string(),
    ];
    for kind in [
        CacheEventKind::Hit,
        CacheEventKind::StaleHit,
        CacheEventKind::RevalidationOk,
        CacheEventKind::RevalidationFull,
        CacheEventKind::Miss,
    ] {
        row.push(m.cache_count(kind.as_str()).to_string());
    }
    row
}

pub fn write_aggregate<W: Write>(out: W, runs: &[Metrics]) -> Result<(), NetsimError> {
    table(out, &AGGREGATE_HEADER, runs.iter().map(aggregate_row))
}

/// Writes the per-seed bundle into `dir`.
pub fn write_bundle(dir: &Path, m: &Metrics) -> Result<(), NetsimError> {
    fs::create_dir_all(dir)?;
    let file = |name: &str| fs::File::create(dir.join(name));
    write_resolution_times(file(BUNDLE_FILES[0])?, m)?;
    write_link_utilization(file(BUNDLE_FILES[1])?, m)?;
    write_retransmissions(file(BUNDLE_FILES[2])?, m)?;
    write_cache_events(file(BUNDLE_FILES[3])?, m)?;
    write_event_log(std::io::BufWriter::new(file(BUNDLE_FILES[4])?), m)?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    scenario: &'a Scenario,
    seeds: &'a [u64],
    bundles: Vec<String>,
    files: &'a [&'a str],
    aggregate: &'a str,
}

/// Runs `scenario` once per seed and writes every bundle, the aggregate
/// and the manifest under `out`. Seeds run on parallel threads.
pub fn simulate_to_dir(scenario: &Scenario, seeds: &[u64], out: &Path) -> Result<Vec<Metrics>, NetsimError> {
    scenario.validate()?;
    let runs: Vec<Result<Metrics, NetsimError>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let sc = Scenario { seed, ..scenario.clone() };
                s.spawn(move || run(&sc))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    fs::create_dir_all(out)?;
    let mut bundles = Vec::new();
    for m in &runs {
        let name = bundle_dir(m.seed);
        write_bundle(&out.join(&name), m)?;
        bundles.push(name);
    }
    write_aggregate(fs::File::create(out.join("aggregate.csv"))?, &runs)?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        scenario,
        seeds,
        bundles,
        files: &BUNDLE_FILES,
        aggregate: "aggregate.csv",
    };
    let mut f = fs::File::create(out.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    Ok(runs)
}

pub fn bundle_dir(seed: u64) -> String {
    format!("seed-{seed}")
}

/// Paths of every file `simulate_to_dir` writes for `seeds`, relative to the output directory.
pub fn expected_files(seeds: &[u64]) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = seeds
        .iter()
        .flat_map(|&s| BUNDLE_FILES.iter().map(move |f| Path::new(&bundle_dir(s)).join(f)))
        .collect();
    v.push("aggregate.csv".into());
    v.push("manifest.json".into());
    v
}

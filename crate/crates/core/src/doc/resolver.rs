//! Upstream resolvers used by the DoC server. None of them recurse; they
//! answer from a zone file or synthesize records.
//!
//! TTLs follow per-name epochs. Each epoch lasts a duration drawn uniformly
//! from `[ttl_min, ttl_max]` seconds, and a query inside an epoch sees the
//! time left until the epoch ends, rounded up. Draws depend only on the seed,
//! the name and the epoch index, so answers do not depend on query order.

use std::collections::BTreeMap;
use std::net::{Ipv4Addr, Ipv6Addr};
use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dns::{DnsName, DnsQuestion, DnsRecord, RecordType, CLASS_IN};

#[derive(Debug, Error)]
pub enum ResolveError {
    #[error("name does not exist")]
    NxDomain,
    #[error("zone file: {0}")]
    Zone(String),
}

pub trait Resolver {
    fn resolve(&self, q: &DnsQuestion, now: Duration) -> Result<Vec<DnsRecord>, ResolveError>;
}

impl<R: Resolver + ?Sized> Resolver for &R {
    fn resolve(&self, q: &DnsQuestion, now: Duration) -> Result<Vec<DnsRecord>, ResolveError> {
        (**self).resolve(q, now)
    }
}

impl<R: Resolver + ?Sized> Resolver for Box<R> {
    fn resolve(&self, q: &DnsQuestion, now: Duration) -> Result<Vec<DnsRecord>, ResolveError> {
        (**self).resolve(q, now)
    }
}

impl<R: Resolver + ?Sized> Resolver for std::sync::Arc<R> {
    fn resolve(&self, q: &DnsQuestion, now: Duration) -> Result<Vec<DnsRecord>, ResolveError> {
        (**self).resolve(q, now)
    }
}

/// Adapts a closure.
pub struct FnResolver<F>(pub F);

impl<F> Resolver for FnResolver<F>
where
    F: Fn(&DnsQuestion, Duration) -> Result<Vec<DnsRecord>, ResolveError>,
{
    fn resolve(&self, q: &DnsQuestion, now: Duration) -> Result<Vec<DnsRecord>, ResolveError> {
        (self.0)(q, now)
    }
}

fn name_digest(name: &DnsName) -> [u8; 32] {
    Sha256::digest(name.to_string().to_ascii_lowercase().as_bytes()).into()
}

fn epoch_seed(seed: u64, digest: &[u8; 32], epoch: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(digest);
    h.update(epoch.to_be_bytes());
    u64::from_be_bytes(h.finalize()[..8].try_into().unwrap())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TtlPolicy {
    pub ttl_min: u32,
    pub ttl_max: u32,
}

impl TtlPolicy {
    pub fn fixed(ttl: u32) -> Self {
        TtlPolicy { ttl_min: ttl, ttl_max: ttl }
    }

    /// Remaining TTL of `name` at `now`.
    pub fn ttl_at(&self, seed: u64, name: &DnsName, now: Duration) -> u32 {
        let (lo, hi) = (self.ttl_min.min(self.ttl_max), self.ttl_min.max(self.ttl_max));
        if hi == 0 {
            return 0;
        }
        if lo == hi {
            let now_ms = now.as_millis() as u64;
            let len = lo as u64 * 1000;
            let left = len - now_ms % len;
            return left.div_ceil(1000) as u32;
        }
        let digest = name_digest(name);
        let now_ms = now.as_millis() as u64;
        let mut start = 0u64;
        let mut epoch = 0u64;
        loop {
            let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, &digest, epoch));
            let len = rng.gen_range(lo.max(1)..=hi) as u64 * 1000;
            if now_ms < start + len {
                return (start + len - now_ms).div_ceil(1000) as u32;
            }
            start += len;
            epoch += 1;
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ZoneRecord {
    #[serde(rename = "type")]
    pub rtype: String,
    pub data: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ZoneEntry {
    #[serde(default)]
    pub ttl_min: Option<u32>,
    #[serde(default)]
    pub ttl_max: Option<u32>,
    pub records: Vec<ZoneRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ZoneFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ttl")]
    pub ttl_min: u32,
    #[serde(default = "default_ttl")]
    pub ttl_max: u32,
    pub names: BTreeMap<String, ZoneEntry>,
}

fn default_ttl() -> u32 {
    300
}

struct ZoneName {
    policy: TtlPolicy,
    records: Vec<(RecordType, Vec<u8>)>,
}

/// Answers from a JSON zone file.
pub struct ZoneResolver {
    seed: u64,
    names: Vec<(DnsName, ZoneName)>,
}

fn parse_rdata(rtype: RecordType, data: &str) -> Result<Vec<u8>, ResolveError> {
    match rtype {
        RecordType::A => data
            .parse::<Ipv4Addr>()
            .map(|a| a.octets().to_vec())
            .map_err(|e| ResolveError::Zone(format!("{data:?}: {e}"))),
        RecordType::AAAA => data
            .parse::<Ipv6Addr>()
            .map(|a| a.octets().to_vec())
            .map_err(|e| ResolveError::Zone(format!("{data:?}: {e}"))),
        _ => hex::decode(data).map_err(|e| ResolveError::Zone(format!("{data:?}: {e}"))),
    }
}

impl ZoneResolver {
    pub fn from_zone(zone: ZoneFile) -> Result<Self, ResolveError> {
        let mut names = Vec::new();
        for (name, entry) in zone.names {
            let dn: DnsName = name.parse().map_err(|e| ResolveError::Zone(format!("{name:?}: {e}")))?;
            let policy = TtlPolicy {
                ttl_min: entry.ttl_min.unwrap_or(zone.ttl_min),
                ttl_max: entry.ttl_max.or(entry.ttl_min).unwrap_or(zone.ttl_max),
            };
            let records = entry
                .records
                .iter()
                .map(|r| {
                    let t: RecordType = r.rtype.parse().map_err(|e| ResolveError::Zone(format!("{e}")))?;
                    Ok((t, parse_rdata(t, &r.data)?))
                })
                .collect::<Result<_, ResolveError>>()?;
            names.push((dn, ZoneName { policy, records }));
        }
        Ok(ZoneResolver { seed: zone.seed, names })
    }

    pub fn from_json(text: &str) -> Result<Self, ResolveError> {
        let zone: ZoneFile = serde_json::from_str(text).map_err(|e| ResolveError::Zone(e.to_string()))?;
        Self::from_zone(zone)
    }

    pub fn load(path: &Path) -> Result<Self, ResolveError> {
        let text = std::fs::read_to_string(path).map_err(|e| ResolveError::Zone(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

impl Resolver for ZoneResolver {
    fn resolve(&self, q: &DnsQuestion, now: Duration) -> Result<Vec<DnsRecord>, ResolveError> {
        let (name, entry) = self.names.iter().find(|(n, _)| *n == q.name).ok_or(ResolveError::NxDomain)?;
        let ttl = entry.policy.ttl_at(self.seed, name, now);
        Ok(entry
            .records
            .iter()
            .filter(|(t, _)| *t == q.rtype || q.rtype == RecordType::ANY)
            .map(|(t, rdata)| DnsRecord { name: q.name.clone(), rtype: *t, rclass: CLASS_IN, ttl, rdata: rdata.clone() })
            .collect())
    }
}

/// Answers any A or AAAA question with `records` addresses derived from the
/// name, all sharing one TTL.
#[derive(Clone, Debug)]
pub struct SyntheticResolver {
    pub records: usize,
    pub policy: TtlPolicy,
    pub seed: u64,
}

impl Resolver for SyntheticResolver {
    fn resolve(&self, q: &DnsQuestion, now: Duration) -> Result<Vec<DnsRecord>, ResolveError> {
        let digest = name_digest(&q.name);
        let ttl = self.policy.ttl_at(self.seed, &q.name, now);
        let base = u16::from_be_bytes([digest[0], digest[1]]);
        Ok((0..self.records)
            .filter_map(|i| {
                let i = i as u16;
                match q.rtype {
                    RecordType::AAAA => Some(DnsRecord::aaaa(
                        q.name.clone(),
                        ttl,
                        Ipv6Addr::new(0x2001, 0xdb8, base, 0, 0, 0, 0, i + 1),
                    )),
                    RecordType::A => Some(DnsRecord::a(
                        q.name.clone(),
                        ttl,
                        Ipv4Addr::new(10, digest[0], digest[1], (i as u8).wrapping_add(1)),
                    )),
                    _ => None,
                }
            })
            .collect())
    }
}

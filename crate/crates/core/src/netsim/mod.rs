//! Discrete-event simulation of DNS resolution over a two-hop lossy
//! wireless topology:
//!
//! ```text
//! C1 ┐
//!    ├─(hop 2)─ F ─(hop 1)─ BR ── R
//! C2 ┘
//! ```
//!
//! Clients issue Poisson-timed queries to the resolver `R`, either through
//! an opaque forwarder or a (caching) CoAP forward proxy at `F`. Only the
//! wireless links fragment, lose and delay frames; `BR`–`R` is ideal.

pub mod export;
pub mod link;
pub mod metrics;
mod sim;

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coap::reliability::secs_f64;
use crate::coap::TransmissionParams;
use crate::dns::RecordType;
use crate::doc::{CachingScheme, DocMethod, PayloadFormat};

pub use link::{LinkModel, LinkProfile};
pub use metrics::{link_utilization, resolution_cdf, retransmission_offsets, HopUtilization, Metrics};
pub use sim::run;

/// DTLS 1.2 record overhead: 13 header, 8 explicit nonce, 8 tag octets.
pub const DTLS_OVERHEAD: usize = 29;

#[derive(Debug, Error)]
pub enum NetsimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("scenario JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    /// Plain DNS over UDP.
    Udp,
    /// DNS over DTLS 1.2.
    Dtls,
    Coap,
    /// CoAP over DTLS 1.2.
    Coaps,
    /// CoAP with OSCORE object security.
    Oscore,
}

impl Transport {
    pub const ALL: [Transport; 5] = [Transport::Udp, Transport::Dtls, Transport::Coap, Transport::Coaps, Transport::Oscore];

    pub fn is_coap(self) -> bool {
        matches!(self, Transport::Coap | Transport::Coaps | Transport::Oscore)
    }

    /// Octets added below the application datagram.
    pub fn record_overhead(self) -> usize {
        match self {
            Transport::Dtls | Transport::Coaps => DTLS_OVERHEAD,
            _ => 0,
        }
    }

    /// Whether an on-path proxy can read the CoAP layer.
    pub fn proxyable(self) -> bool {
        matches!(self, Transport::Coap | Transport::Oscore)
    }
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transport::Udp => "udp",
            Transport::Dtls => "dtls",
            Transport::Coap => "coap",
            Transport::Coaps => "coaps",
            Transport::Oscore => "oscore",
        })
    }
}

impl FromStr for Transport {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Transport::ALL
            .into_iter()
            .find(|t| t.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown transport {s:?} (udp|dtls|coap|coaps|oscore)"))
    }
}

/// What sits at the node between the clients and the border router.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Forwarder {
    /// Routes datagrams without looking at them.
    Opaque,
    /// CoAP forward proxy; caches when `proxy_cache` is set.
    Proxy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Workload {
    /// Queries issued by each client.
    pub n_queries: usize,
    /// Poisson rate per client, queries per second.
    pub rate: f64,
    /// Size of the name set the queries draw from.
    pub names: usize,
    pub name_len: usize,
    #[serde(with = "rtype_serde")]
    pub rtype: RecordType,
    /// Records in every answer.
    pub records: usize,
    pub ttl_min: u32,
    pub ttl_max: u32,
}

impl Default for Workload {
    fn default() -> Self {
        Workload {
            n_queries: 50,
            rate: 5.0,
            names: 50,
            name_len: 24,
            rtype: RecordType::AAAA,
            records: 1,
            ttl_min: 2,
            ttl_max: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub transport: Transport,
    pub method: DocMethod,
    pub format: PayloadFormat,
    pub scheme: CachingScheme,
    pub forwarder: Forwarder,
    pub proxy_cache: bool,
    pub client_coap_cache: bool,
    pub client_dns_cache: bool,
    pub clients: usize,
    pub workload: Workload,
    pub link: LinkModel,
    pub coap: TransmissionParams,
    pub block_size: Option<usize>,
    /// Count the OSCORE Echo round trip in the first query's resolution time.
    pub include_echo: bool,
    pub replay_window: u64,
    /// Events after this virtual time are dropped.
    #[serde(with = "secs_f64")]
    pub horizon: Duration,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "default".into(),
            seed: 1,
            transport: Transport::Coap,
            method: DocMethod::Fetch,
            format: PayloadFormat::Wire,
            scheme: CachingScheme::EolTtls,
            forwarder: Forwarder::Opaque,
            proxy_cache: false,
            client_coap_cache: false,
            client_dns_cache: false,
            clients: 2,
            workload: Workload::default(),
            link: LinkModel::default(),
            coap: TransmissionParams::default(),
            block_size: None,
            include_echo: false,
            replay_window: crate::oscore::DEFAULT_REPLAY_WINDOW,
            horizon: Duration::from_secs(3600),
        }
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, NetsimError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), NetsimError> {
        let err = |m: String| Err(NetsimError::Config(m));
        self.link.validate()?;
        self.coap.validate().map_err(NetsimError::Config)?;
        let w = &self.workload;
        if self.clients == 0 || self.clients > 200 {
            return err(format!("clients must be in 1..=200, got {}", self.clients));
        }
        if !w.rate.is_finite() || w.rate <= 0.0 {
            return err(format!("rate must be positive, got {}", w.rate));
        }
        if w.names == 0 {
            return err("names must be at least 1".into());
        }
        if !(6..=200).contains(&w.name_len) {
            return err(format!("name_len must be in 6..=200, got {}", w.name_len));
        }
        if w.rtype != RecordType::A && w.rtype != RecordType::AAAA {
            return err(format!("rtype must be A or AAAA, got {}", w.rtype));
        }
        if w.records > 64 {
            return err(format!("at most 64 records per answer, got {}", w.records));
        }
        if w.ttl_min > w.ttl_max {
            return err(format!("ttl_min {} exceeds ttl_max {}", w.ttl_min, w.ttl_max));
        }
        if self.forwarder == Forwarder::Proxy && !self.transport.proxyable() {
            return err(format!("a proxy cannot act on {} traffic", self.transport));
        }
        if self.proxy_cache && self.forwarder != Forwarder::Proxy {
            return err("proxy_cache requires forwarder \"proxy\"".into());
        }
        if !self.transport.is_coap() {
            if self.client_coap_cache {
                return err(format!("client_coap_cache needs a CoAP transport, not {}", self.transport));
            }
            if self.block_size.is_some() {
                return err(format!("block_size needs a CoAP transport, not {}", self.transport));
            }
        }
        if self.transport == Transport::Oscore && self.block_size.is_some() {
            return err("block-wise transfer is not combined with OSCORE".into());
        }
        if let Some(size) = self.block_size {
            crate::coap::block::szx_for_size(size).map_err(|e| NetsimError::Config(e.to_string()))?;
        }
        if self.replay_window == 0 {
            return err("replay_window must be positive".into());
        }
        Ok(())
    }
}

/// Independent seed for one stochastic purpose, so adding draws in one
/// stream leaves the others untouched.
pub(crate) fn stream_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(purpose.as_bytes());
    h.update(index.to_be_bytes());
    let d = h.finalize();
    u64::from_be_bytes(d[..8].try_into().expect("digest"))
}

mod rtype_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::dns::RecordType;

    pub fn serialize<S: Serializer>(t: &RecordType, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(t)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RecordType, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

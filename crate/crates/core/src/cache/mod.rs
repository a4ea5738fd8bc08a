//! CoAP response cache with the Max-Age freshness model and ETag
//! revalidation, used by the forward proxy and by clients.

pub mod proxy;

use std::collections::HashMap;
use std::fmt;
use std::time::Duration;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::coap::uri::CoapUri;
use crate::coap::{option, CoapMessage, CoapOption, Code, MessageType, DEFAULT_MAX_AGE};

pub use proxy::{ForwardProxy, ProxyStats};

pub const DEFAULT_CAPACITY: usize = 64;
pub const DEFAULT_GRACE: Duration = Duration::from_secs(300);

/// Digest over the parts of a request that select a response.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey(pub [u8; 32]);

impl fmt::Debug for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CacheKey({})", hex::encode(&self.0[..8]))
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

fn feed(h: &mut Sha256, tag: u8, value: &[u8]) {
    h.update([tag]);
    h.update((value.len() as u32).to_be_bytes());
    h.update(value);
}

/// Key for `req`, or `None` when the request is not cacheable (POST and
/// anything other than GET/FETCH). Proxy-Uri is normalized so that it keys
/// the same as the equivalent Uri-Host/Uri-Port/Uri-Path/Uri-Query set.
pub fn cache_key(req: &CoapMessage) -> Option<CacheKey> {
    if req.code != Code::GET && req.code != Code::FETCH {
        return None;
    }
    let mut h = Sha256::new();
    feed(&mut h, 0, &[req.code.0]);
    match req.option(option::PROXY_URI) {
        Some(raw) => {
            let uri = CoapUri::parse(std::str::from_utf8(raw).ok()?).ok()?;
            feed(&mut h, 1, uri.host.to_ascii_lowercase().as_bytes());
            feed(&mut h, 2, &uri.effective_port().to_be_bytes());
            for seg in &uri.path {
                feed(&mut h, 3, seg);
            }
            for q in &uri.query {
                feed(&mut h, 4, q);
            }
        }
        None => {
            if let Some(host) = req.option(option::URI_HOST) {
                feed(&mut h, 1, host.to_ascii_lowercase().as_slice());
            }
            if let Some(port) = req.uint_option(option::URI_PORT) {
                feed(&mut h, 2, &(port as u16).to_be_bytes());
            }
            for seg in req.option_values(option::URI_PATH) {
                feed(&mut h, 3, seg);
            }
            for q in req.option_values(option::URI_QUERY) {
                feed(&mut h, 4, q);
            }
        }
    }
    if let Some(cf) = req.content_format() {
        feed(&mut h, 5, &cf.to_be_bytes());
    }
    if let Some(acc) = req.uint_option(option::ACCEPT) {
        feed(&mut h, 6, &acc.to_be_bytes());
    }
    if req.code == Code::FETCH {
        feed(&mut h, 7, &req.payload);
    }
    Some(CacheKey(h.finalize().into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CacheEventKind {
    Hit,
    StaleHit,
    RevalidationOk,
    RevalidationFull,
    Miss,
}

impl CacheEventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CacheEventKind::Hit => "hit",
            CacheEventKind::StaleHit => "stale-hit",
            CacheEventKind::RevalidationOk => "revalidation-ok",
            CacheEventKind::RevalidationFull => "revalidation-full",
            CacheEventKind::Miss => "miss",
        }
    }
}

impl fmt::Display for CacheEventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheEntry {
    pub code: Code,
    /// Response options without Max-Age.
    pub options: Vec<CoapOption>,
    pub payload: Vec<u8>,
    pub etag: Option<Vec<u8>>,
    pub initial_max_age: u32,
    pub stored_at: Duration,
    last_used: Duration,
}

impl CacheEntry {
    fn from_response(resp: &CoapMessage, now: Duration) -> Self {
        CacheEntry {
            code: resp.code,
            options: resp.options().iter().filter(|o| o.number != option::MAX_AGE).cloned().collect(),
            payload: resp.payload.clone(),
            etag: resp.option(option::ETAG).map(<[u8]>::to_vec),
            initial_max_age: resp.max_age().unwrap_or(DEFAULT_MAX_AGE),
            stored_at: now,
            last_used: now,
        }
    }

    fn expires_at(&self) -> Duration {
        self.stored_at + Duration::from_secs(self.initial_max_age as u64)
    }

    /// Whole seconds of freshness left, or `None` once stale.
    pub fn residual(&self, now: Duration) -> Option<u32> {
        let exp = self.expires_at();
        (now < exp).then(|| (exp - now).as_secs() as u32)
    }

    /// The stored response with Max-Age set to `max_age`. Token and message
    /// ID are left for the messaging layer.
    pub fn to_response(&self, max_age: u32) -> CoapMessage {
        let mut m = CoapMessage::new(MessageType::Acknowledgement, self.code);
        for o in &self.options {
            m.add_option(o.number, o.value.clone());
        }
        m.set_uint_option(option::MAX_AGE, max_age);
        m.payload = self.payload.clone();
        m
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Lookup {
    /// Response ready to serve, with the residual Max-Age.
    Fresh(CoapMessage),
    /// Entry exists but must be revalidated.
    Stale { etag: Option<Vec<u8>> },
    Miss,
}

#[derive(Clone, Debug)]
pub struct Cache {
    entries: HashMap<CacheKey, CacheEntry>,
    capacity: usize,
    grace: Duration,
}

impl Default for Cache {
    fn default() -> Self {
        Cache::new(DEFAULT_CAPACITY, DEFAULT_GRACE)
    }
}

#[derive(Serialize)]
struct DumpEntry {
    key: String,
    code: String,
    etag: Option<String>,
    initial_max_age: u32,
    stored_at: f64,
    residual: Option<u32>,
    payload: String,
}

impl Cache {
    pub fn new(capacity: usize, grace: Duration) -> Self {
        Cache { entries: HashMap::new(), capacity: capacity.max(1), grace }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &CacheKey) -> Option<&CacheEntry> {
        self.entries.get(key)
    }

    pub fn lookup(&mut self, key: &CacheKey, now: Duration) -> Lookup {
        let Some(e) = self.entries.get_mut(key) else {
            return Lookup::Miss;
        };
        e.last_used = now;
        match e.residual(now) {
            Some(age) => Lookup::Fresh(e.to_response(age)),
            None => Lookup::Stale { etag: e.etag.clone() },
        }
    }

    /// Stores a 2.05 response. Other codes are ignored.
    pub fn store(&mut self, key: CacheKey, resp: &CoapMessage, now: Duration) -> bool {
        if resp.code != Code::CONTENT {
            return false;
        }
        self.evict(now);
        if !self.entries.contains_key(&key) && self.entries.len() >= self.capacity {
            if let Some(lru) = self.entries.iter().min_by_key(|(k, e)| (e.last_used, **k)).map(|(k, _)| *k) {
                self.entries.remove(&lru);
            }
        }
        self.entries.insert(key, CacheEntry::from_response(resp, now));
        true
    }

    /// Applies a 2.03 Valid: the entry becomes fresh again with the new
    /// Max-Age. Returns the stored response to serve as 2.05, or `None` if
    /// the entry is gone or the ETag does not match.
    pub fn refresh(&mut self, key: &CacheKey, valid: &CoapMessage, now: Duration) -> Option<CoapMessage> {
        let e = self.entries.get_mut(key)?;
        if let (Some(tag), Some(ours)) = (valid.option(option::ETAG), &e.etag) {
            if tag != ours.as_slice() {
                return None;
            }
        }
        e.initial_max_age = valid.max_age().unwrap_or(DEFAULT_MAX_AGE);
        e.stored_at = now;
        e.last_used = now;
        Some(e.to_response(e.initial_max_age))
    }

    /// Drops entries stale for longer than the grace period.
    pub fn evict(&mut self, now: Duration) {
        let grace = self.grace;
        self.entries.retain(|_, e| e.expires_at() + grace > now);
    }

    pub fn dump_json(&self, now: Duration) -> serde_json::Value {
        let mut rows: Vec<DumpEntry> = self
            .entries
            .iter()
            .map(|(k, e)| DumpEntry {
                key: k.to_string(),
                code: e.code.to_string(),
                etag: e.etag.as_ref().map(hex::encode),
                initial_max_age: e.initial_max_age,
                stored_at: e.stored_at.as_secs_f64(),
                residual: e.residual(now),
                payload: hex::encode(&e.payload),
            })
            .collect();
        rows.sort_by(|a, b| a.key.cmp(&b.key));
        serde_json::to_value(rows).expect("plain data serializes")
    }
}

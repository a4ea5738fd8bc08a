//! DNS over CoAP: request/response mapping, TTL and Max-Age alignment,
//! ETags and revalidation.

pub mod client;
pub mod resolver;
pub mod server;
pub mod template;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cbor_dns::{self, CborDnsError};
use crate::coap::{option, CoapMessage, Code, DEFAULT_MAX_AGE};
use crate::dns::{min_ttl, rewrite_ttls, shuffle_records, DnsError, DnsMessage, DnsQuestion};

pub use client::{AnswerSource, ClientError, ClientEvent, DnsCache, DocClient, QueryId};
pub use resolver::{FnResolver, Resolver, SyntheticResolver, ZoneResolver};
pub use server::{revalidate, serve, DocServer, ServeOptions};
pub use template::{expand_template, ExpandedUri, TemplateError};

/// Content-Format for DNS wire-format messages.
pub const CONTENT_FORMAT_DNS: u16 = 553;
pub const DEFAULT_PATH: &str = "/dns";
pub const DEFAULT_TEMPLATE: &str = "/dns{?dns}";
pub const ETAG_LEN: usize = 8;
/// Largest value a single Uri-Query option may carry.
pub const MAX_URI_QUERY_LEN: usize = 255;

#[derive(Debug, Error)]
pub enum DocError {
    #[error(transparent)]
    Dns(#[from] DnsError),
    #[error(transparent)]
    Cbor(#[from] CborDnsError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("GET query needs {0} octets in one Uri-Query option (limit 255); use FETCH")]
    QueryTooLongForGet(usize),
    #[error("GET template must reference exactly one variable, found {0}")]
    BadTemplate(usize),
    #[error("request carries no DNS query")]
    MissingQuery,
    #[error("query variable is not valid base64url")]
    BadBase64,
    #[error("unsupported content format {0}")]
    UnsupportedFormat(u32),
    #[error("message carries no question")]
    NoQuestion,
    #[error("response question does not match the query")]
    QuestionMismatch,
    #[error("response code {0}")]
    Status(Code),
    #[error("outer Max-Age {outer} exceeds protected Max-Age {protected}")]
    MaxAgeExtended { outer: u32, protected: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocMethod {
    Fetch,
    Get,
    Post,
}

impl DocMethod {
    pub fn code(self) -> Code {
        match self {
            DocMethod::Fetch => Code::FETCH,
            DocMethod::Get => Code::GET,
            DocMethod::Post => Code::POST,
        }
    }

    pub fn from_code(code: Code) -> Option<Self> {
        match code {
            Code::FETCH => Some(DocMethod::Fetch),
            Code::GET => Some(DocMethod::Get),
            Code::POST => Some(DocMethod::Post),
            _ => None,
        }
    }

    pub fn is_cacheable(self) -> bool {
        !matches!(self, DocMethod::Post)
    }

    pub fn carries_body(self) -> bool {
        !matches!(self, DocMethod::Get)
    }

    /// Whether the query itself may be split with Block1.
    pub fn block_transferable(self) -> bool {
        self.carries_body()
    }
}

impl fmt::Display for DocMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DocMethod::Fetch => "fetch",
            DocMethod::Get => "get",
            DocMethod::Post => "post",
        })
    }
}

impl FromStr for DocMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fetch" => Ok(DocMethod::Fetch),
            "get" => Ok(DocMethod::Get),
            "post" => Ok(DocMethod::Post),
            _ => Err(format!("unknown method {s:?} (fetch|get|post)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CachingScheme {
    DohLike,
    EolTtls,
}

impl fmt::Display for CachingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CachingScheme::DohLike => "doh-like",
            CachingScheme::EolTtls => "eol-ttls",
        })
    }
}

impl FromStr for CachingScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "doh-like" | "dohlike" => Ok(CachingScheme::DohLike),
            "eol-ttls" | "eolttls" | "eol" => Ok(CachingScheme::EolTtls),
            _ => Err(format!("unknown caching scheme {s:?} (doh-like|eol-ttls)")),
        }
    }
}

/// Payload representation of DNS messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadFormat {
    Wire,
    Cbor,
}

impl PayloadFormat {
    pub fn content_format(self) -> u16 {
        match self {
            PayloadFormat::Wire => CONTENT_FORMAT_DNS,
            PayloadFormat::Cbor => cbor_dns::CONTENT_FORMAT,
        }
    }

    pub fn from_content_format(cf: u32) -> Result<Self, DocError> {
        match cf {
            x if x == CONTENT_FORMAT_DNS as u32 => Ok(PayloadFormat::Wire),
            x if x == cbor_dns::CONTENT_FORMAT as u32 => Ok(PayloadFormat::Cbor),
            other => Err(DocError::UnsupportedFormat(other)),
        }
    }

    pub fn encode_query(self, query: &DnsMessage) -> Result<Vec<u8>, DocError> {
        match self {
            PayloadFormat::Wire => Ok(query.encode()),
            PayloadFormat::Cbor => Ok(cbor_dns::compress_query(query.question.as_ref().ok_or(DocError::NoQuestion)?)),
        }
    }

    pub fn decode_query(self, bytes: &[u8]) -> Result<DnsMessage, DocError> {
        let msg = match self {
            PayloadFormat::Wire => DnsMessage::decode(bytes)?,
            PayloadFormat::Cbor => {
                let q = cbor_dns::decompress_query(bytes)?;
                DnsMessage::query(q.name, q.rtype, 0)
            }
        };
        if msg.question.is_none() {
            return Err(DocError::NoQuestion);
        }
        Ok(msg)
    }

    pub fn encode_response(self, msg: &DnsMessage) -> Result<Vec<u8>, DocError> {
        match self {
            PayloadFormat::Wire => Ok(msg.encode()),
            PayloadFormat::Cbor => {
                let q = msg.question.as_ref().ok_or(DocError::NoQuestion)?;
                Ok(cbor_dns::compress_response(msg, q)?)
            }
        }
    }

    pub fn decode_response(self, bytes: &[u8], question: &DnsQuestion) -> Result<DnsMessage, DocError> {
        match self {
            PayloadFormat::Wire => Ok(DnsMessage::decode(bytes)?),
            PayloadFormat::Cbor => Ok(cbor_dns::decompress_response(bytes, Some(question))?),
        }
    }
}

impl FromStr for PayloadFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "wire" => Ok(PayloadFormat::Wire),
            "cbor" => Ok(PayloadFormat::Cbor),
            _ => Err(format!("unknown format {s:?} (wire|cbor)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DocClientConfig {
    pub method: DocMethod,
    pub path: String,
    pub template: String,
    pub format: PayloadFormat,
    pub scheme: CachingScheme,
    /// When set, requests go to a forward proxy and name the resolver
    /// resource with this absolute URI prefix (e.g. `coap://resolver`).
    pub proxy_uri: Option<String>,
    /// Block size for Block1/Block2 transfers, if block-wise is wanted.
    pub block_size: Option<usize>,
    /// Use random DNS IDs instead of 0. Defeats caching.
    pub random_id: bool,
}

impl Default for DocClientConfig {
    fn default() -> Self {
        DocClientConfig {
            method: DocMethod::Fetch,
            path: DEFAULT_PATH.to_string(),
            template: DEFAULT_TEMPLATE.to_string(),
            format: PayloadFormat::Wire,
            scheme: CachingScheme::EolTtls,
            proxy_uri: None,
            block_size: None,
            random_id: false,
        }
    }
}

impl DocClientConfig {
    pub fn validate(&self) -> Result<(), DocError> {
        if self.method == DocMethod::Get {
            let n = template::template_variables(&self.template).len();
            if n != 1 {
                return Err(DocError::BadTemplate(n));
            }
        }
        if let Some(size) = self.block_size {
            crate::coap::block::szx_for_size(size).map_err(|_| DocError::UnsupportedFormat(size as u32))?;
        }
        Ok(())
    }
}

/// Maps a DNS query onto a CoAP request. Token and message ID are left to
/// the messaging layer.
pub fn build_request(query: &DnsMessage, cfg: &DocClientConfig) -> Result<CoapMessage, DocError> {
    let payload = cfg.format.encode_query(query)?;
    let cf = cfg.format.content_format() as u32;
    let mut req = CoapMessage::request(cfg.method.code());
    let (path, query_items): (String, Vec<Vec<u8>>) = match cfg.method {
        DocMethod::Fetch | DocMethod::Post => {
            req.add_uint_option(option::CONTENT_FORMAT, cf);
            req.payload = payload;
            (cfg.path.clone(), Vec::new())
        }
        DocMethod::Get => {
            let vars = template::template_variables(&cfg.template);
            if vars.len() != 1 {
                return Err(DocError::BadTemplate(vars.len()));
            }
            let mut bindings = BTreeMap::new();
            bindings.insert(vars[0].clone(), URL_SAFE_NO_PAD.encode(&payload));
            let uri = expand_template(&cfg.template, &bindings)?;
            let items = uri.query_items();
            if let Some(long) = items.iter().find(|i| i.len() > MAX_URI_QUERY_LEN) {
                return Err(DocError::QueryTooLongForGet(long.len()));
            }
            req.add_uint_option(option::ACCEPT, cf);
            (uri.path.clone(), items)
        }
    };
    match &cfg.proxy_uri {
        Some(base) => {
            let mut uri = format!("{}{}", base.trim_end_matches('/'), path);
            for (i, item) in query_items.iter().enumerate() {
                uri.push(if i == 0 { '?' } else { '&' });
                uri.push_str(&template::percent_encode_query(item));
            }
            req.add_option(option::PROXY_URI, uri.into_bytes());
        }
        None => {
            req.set_uri_path(&path);
            for item in query_items {
                req.add_option(option::URI_QUERY, item);
            }
        }
    }
    Ok(req)
}

/// The query carried by a DoC request, and the format the response should use.
pub fn parse_request(req: &CoapMessage) -> Result<(DnsMessage, PayloadFormat), DocError> {
    let method = DocMethod::from_code(req.code).ok_or(DocError::Status(Code::METHOD_NOT_ALLOWED))?;
    match method {
        DocMethod::Fetch | DocMethod::Post => {
            let format = match req.content_format() {
                Some(cf) => PayloadFormat::from_content_format(cf)?,
                None => PayloadFormat::Wire,
            };
            if req.payload.is_empty() {
                return Err(DocError::MissingQuery);
            }
            Ok((format.decode_query(&req.payload)?, format))
        }
        DocMethod::Get => {
            let format = match req.uint_option(option::ACCEPT) {
                Some(cf) => PayloadFormat::from_content_format(cf)?,
                None => PayloadFormat::Wire,
            };
            let value = req
                .option_values(option::URI_QUERY)
                .find_map(|q| q.strip_prefix(b"dns="))
                .ok_or(DocError::MissingQuery)?;
            let bytes = URL_SAFE_NO_PAD.decode(value).map_err(|_| DocError::BadBase64)?;
            Ok((format.decode_query(&bytes)?, format))
        }
    }
}

/// First 8 octets of SHA-256 over the payload.
pub fn make_etag(payload: &[u8]) -> [u8; ETAG_LEN] {
    let digest = Sha256::digest(payload);
    digest[..ETAG_LEN].try_into().expect("digest is 32 octets")
}

/// Rejects an unprotected Max-Age that would extend the protected one.
pub fn check_max_age_consistency(outer: u32, protected: u32) -> Result<(), DocError> {
    if outer > protected {
        Err(DocError::MaxAgeExtended { outer, protected })
    } else {
        Ok(())
    }
}

/// Turns a 2.05 response into the DNS message handed to the local stub,
/// restoring TTLs from Max-Age and shuffling the answers.
pub fn accept_response<R: Rng + ?Sized>(
    resp: &CoapMessage,
    scheme: CachingScheme,
    sent_query: &DnsMessage,
    rng: &mut R,
) -> Result<DnsMessage, DocError> {
    if resp.code != Code::CONTENT {
        return Err(DocError::Status(resp.code));
    }
    let question = sent_query.question.as_ref().ok_or(DocError::NoQuestion)?;
    let format = match resp.content_format() {
        Some(cf) => PayloadFormat::from_content_format(cf)?,
        None => PayloadFormat::Wire,
    };
    let msg = format.decode_response(&resp.payload, question)?;
    match &msg.question {
        Some(q) if q == question => {}
        _ => return Err(DocError::QuestionMismatch),
    }
    let max_age = resp.max_age().unwrap_or(DEFAULT_MAX_AGE);
    let restored = restore_ttls(&msg, scheme, max_age);
    Ok(shuffle_records(&restored, rng))
}

/// TTL restoration without the shuffle.
pub fn restore_ttls(msg: &DnsMessage, scheme: CachingScheme, max_age: u32) -> DnsMessage {
    match scheme {
        CachingScheme::EolTtls => rewrite_ttls(msg, max_age),
        CachingScheme::DohLike => {
            let Ok(min) = min_ttl(msg) else { return msg.clone() };
            let elapsed = min.saturating_sub(max_age);
            let mut out = msg.clone();
            for rr in out.answers.iter_mut().chain(out.authority.iter_mut()).chain(out.additional.iter_mut()) {
                rr.ttl = rr.ttl.saturating_sub(elapsed);
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dns::{build_response, DnsRecord, RecordType};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::net::Ipv6Addr;

    const NAME: &str = "0123456789.abcdefghij.de";

    fn query() -> DnsMessage {
        DnsMessage::query(NAME.parse().unwrap(), RecordType::AAAA, 0)
    }

    fn response(ttls: &[u32]) -> DnsMessage {
        let q = query().question.unwrap();
        let records = ttls
            .iter()
            .enumerate()
            .map(|(i, &t)| DnsRecord::aaaa(q.name.clone(), t, Ipv6Addr::new(0x2001, 0xdb8, 0, 0, 0, 0, 0, i as u16)))
            .collect();
        build_response(&q, records, 0)
    }

    fn cfg(method: DocMethod) -> DocClientConfig {
        DocClientConfig { method, ..Default::default() }
    }

    fn with_token(mut m: CoapMessage) -> CoapMessage {
        m.token = vec![0, 1];
        m
    }

    #[test]
    fn fetch_and_post_carry_wire_query() {
        let q = query();
        for method in [DocMethod::Fetch, DocMethod::Post] {
            let req = build_request(&q, &cfg(method)).unwrap();
            assert_eq!(req.payload.len(), 42);
            assert_eq!(req.payload, q.encode());
            assert_eq!(req.content_format(), Some(553));
            assert_eq!(req.uri_path(), "/dns");
            assert!(req.option(option::ETAG).is_none());
        }
        assert_eq!(with_token(build_request(&q, &cfg(DocMethod::Fetch)).unwrap()).encode().len(), 56);
    }

    #[test]
    fn get_uses_base64url_variable() {
        let q = query();
        let req = build_request(&q, &cfg(DocMethod::Get)).unwrap();
        assert!(req.payload.is_empty());
        let uq = req.option(option::URI_QUERY).unwrap();
        assert!(uq.starts_with(b"dns="));
        assert_eq!(uq.len() - 4, 56);
        assert!(!uq[4..].contains(&b'='));
        assert_eq!(req.uint_option(option::ACCEPT), Some(553));
        let get_len = with_token(req.clone()).encode().len();
        let fetch_len = with_token(build_request(&q, &cfg(DocMethod::Fetch)).unwrap()).encode().len();
        assert_eq!(get_len, 75);
        assert!(get_len as f64 >= 1.3 * fetch_len as f64);
        let (parsed, fmt) = parse_request(&req).unwrap();
        assert_eq!(parsed, q);
        assert_eq!(fmt, PayloadFormat::Wire);
    }

    #[test]
    fn get_rejects_oversized_query() {
        let long: Vec<String> = (0..4).map(|i| format!("{i}{}", "x".repeat(50))).collect();
        let q = DnsMessage::query(long.join(".").parse().unwrap(), RecordType::AAAA, 0);
        assert!(matches!(build_request(&q, &cfg(DocMethod::Get)), Err(DocError::QueryTooLongForGet(_))));
        assert!(build_request(&q, &cfg(DocMethod::Fetch)).is_ok());
        let bad = DocClientConfig { template: "/dns".into(), ..cfg(DocMethod::Get) };
        assert!(matches!(bad.validate(), Err(DocError::BadTemplate(0))));
    }

    #[test]
    fn proxy_uri_replaces_uri_options() {
        let c = DocClientConfig { proxy_uri: Some("coap://resolver".into()), ..cfg(DocMethod::Fetch) };
        let req = build_request(&query(), &c).unwrap();
        assert_eq!(req.option(option::PROXY_URI), Some(&b"coap://resolver/dns"[..]));
        assert!(req.option(option::URI_PATH).is_none());
        let g = DocClientConfig { method: DocMethod::Get, ..c };
        let req = build_request(&query(), &g).unwrap();
        let uri = String::from_utf8(req.option(option::PROXY_URI).unwrap().to_vec()).unwrap();
        assert!(uri.starts_with("coap://resolver/dns?dns="));
    }

    #[test]
    fn cbor_request_round_trip() {
        let c = DocClientConfig { format: PayloadFormat::Cbor, ..cfg(DocMethod::Fetch) };
        let req = build_request(&query(), &c).unwrap();
        assert_eq!(req.content_format(), Some(65053));
        // array head, two-octet text head, name
        assert_eq!(req.payload.len(), 1 + 2 + 24);
        assert_eq!(parse_request(&req).unwrap(), (query(), PayloadFormat::Cbor));
    }

    #[test]
    fn etag_properties() {
        let a = response(&[60, 300]).encode();
        let mut b = a.clone();
        assert_eq!(make_etag(&a), make_etag(&b));
        let last = b.len() - 20;
        b[last] ^= 1;
        assert_ne!(make_etag(&a), make_etag(&b));
    }

    #[test]
    fn max_age_consistency() {
        assert!(check_max_age_consistency(45, 60).is_ok());
        assert!(check_max_age_consistency(60, 60).is_ok());
        assert!(matches!(check_max_age_consistency(90, 60), Err(DocError::MaxAgeExtended { .. })));
    }

    fn coap_response(msg: &DnsMessage, max_age: Option<u32>) -> CoapMessage {
        let mut r = CoapMessage::response_to(&CoapMessage::request(Code::FETCH), Code::CONTENT);
        r.add_uint_option(option::CONTENT_FORMAT, 553);
        if let Some(m) = max_age {
            r.add_uint_option(option::MAX_AGE, m);
        }
        r.payload = msg.encode();
        r
    }

    fn sorted_ttls(m: &DnsMessage) -> Vec<u32> {
        let mut t: Vec<u32> = m.answers.iter().map(|r| r.ttl).collect();
        t.sort();
        t
    }

    #[test]
    fn accept_restores_ttls() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eol = rewrite_ttls(&response(&[60, 300]), 0);
        let out = accept_response(&coap_response(&eol, Some(45)), CachingScheme::EolTtls, &query(), &mut rng).unwrap();
        assert_eq!(sorted_ttls(&out), [45, 45]);
        let out = accept_response(&coap_response(&eol, None), CachingScheme::EolTtls, &query(), &mut rng).unwrap();
        assert_eq!(sorted_ttls(&out), [60, 60]);
        let doh = response(&[60, 300]);
        let out = accept_response(&coap_response(&doh, Some(45)), CachingScheme::DohLike, &query(), &mut rng).unwrap();
        assert_eq!(sorted_ttls(&out), [45, 285]);
        let out = accept_response(&coap_response(&doh, Some(60)), CachingScheme::DohLike, &query(), &mut rng).unwrap();
        assert_eq!(sorted_ttls(&out), [60, 300]);
        let out = accept_response(&coap_response(&doh, Some(0)), CachingScheme::DohLike, &query(), &mut rng).unwrap();
        assert_eq!(sorted_ttls(&out), [0, 240]);
    }

    #[test]
    fn accept_rejects_mismatch_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let other = DnsMessage::query("other.example".parse().unwrap(), RecordType::AAAA, 0);
        let resp = coap_response(&response(&[5]), Some(5));
        assert!(matches!(accept_response(&resp, CachingScheme::EolTtls, &other, &mut rng), Err(DocError::QuestionMismatch)));
        let mut err = resp.clone();
        err.code = Code::BAD_REQUEST;
        assert!(matches!(accept_response(&err, CachingScheme::EolTtls, &query(), &mut rng), Err(DocError::Status(_))));
    }

    #[test]
    fn method_matrix() {
        assert!(DocMethod::Fetch.is_cacheable() && DocMethod::Get.is_cacheable() && !DocMethod::Post.is_cacheable());
        assert!(DocMethod::Fetch.carries_body() && DocMethod::Post.carries_body() && !DocMethod::Get.carries_body());
        assert!(!DocMethod::Get.block_transferable());
        assert_eq!("FETCH".parse::<DocMethod>().unwrap(), DocMethod::Fetch);
        assert_eq!("eol-ttls".parse::<CachingScheme>().unwrap(), CachingScheme::EolTtls);
    }
}

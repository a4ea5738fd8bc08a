//! Per-layer packet size dissection of DNS messages over every transport.

use std::time::Duration;

use serde::Serialize;

use crate::coap::{option, CoapMessage, MessageType};
use crate::dns::{DnsMessage, DnsName, RecordType};
use crate::doc::resolver::TtlPolicy;
use crate::doc::{build_request, serve, CachingScheme, DocClientConfig, DocMethod, PayloadFormat, ServeOptions, SyntheticResolver};
use crate::netsim::{LinkModel, NetsimError, Transport};
use crate::oscore::{echo_challenge, SecurityContext, ECHO_LEN};

/// TTL carried by answers that keep their TTLs.
pub const SIZES_TTL: u32 = 300;
const TOKEN: [u8; 2] = [0x4a, 0x7e];

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SizeRow {
    pub transport: String,
    pub method: String,
    pub format: String,
    pub message: String,
    pub frames: usize,
    /// MAC, fragmentation and compressed IP/UDP headers over all frames.
    pub link: usize,
    pub security: usize,
    pub coap: usize,
    pub dns: usize,
    pub total: usize,
}

#[derive(Clone, Debug)]
pub struct SizeRequest {
    pub name_len: usize,
    pub rtype: RecordType,
    pub records: usize,
    pub transports: Vec<Transport>,
    pub methods: Vec<DocMethod>,
    pub formats: Vec<PayloadFormat>,
    pub scheme: CachingScheme,
    pub link: LinkModel,
}

impl Default for SizeRequest {
    fn default() -> Self {
        SizeRequest {
            name_len: 24,
            rtype: RecordType::AAAA,
            records: 1,
            transports: Transport::ALL.to_vec(),
            methods: vec![DocMethod::Fetch, DocMethod::Get, DocMethod::Post],
            formats: vec![PayloadFormat::Wire],
            scheme: CachingScheme::EolTtls,
            link: LinkModel::default(),
        }
    }
}

/// A name of exactly `len` presentation characters (`len` ≥ 6); 24 gives
/// `0123456789.abcdefghij.de`.
pub fn sample_name(len: usize) -> Result<DnsName, NetsimError> {
    if !(6..=200).contains(&len) {
        return Err(NetsimError::Config(format!("name length must be in 6..=200, got {len}")));
    }
    let body = len - 4;
    let (a, b) = (body.div_ceil(2), body / 2);
    let label = |n: usize, alphabet: &[u8]| -> String { (0..n).map(|i| alphabet[i % alphabet.len()] as char).collect() };
    let mut labels = vec![label(a, b"0123456789"), label(b, b"abcdefghijklmnopqrstuvwxyz"), "de".to_string()];
    // split labels over 63 octets; the inserted dot replaces one character
    let mut out: Vec<String> = Vec::new();
    for l in labels.drain(..) {
        if l.len() <= 63 {
            out.push(l);
        } else {
            let mut rest = l.as_str();
            while rest.len() > 63 {
                out.push(rest[..62].to_string());
                rest = &rest[63..];
            }
            out.push(rest.to_string());
        }
    }
    out.join(".").parse().map_err(|e| NetsimError::Config(format!("{e}")))
}

struct Parts {
    security: usize,
    coap: usize,
    dns: usize,
}

fn row(
    req: &SizeRequest,
    transport: Transport,
    method: &str,
    format: PayloadFormat,
    message: &str,
    parts: Parts,
) -> Result<SizeRow, NetsimError> {
    let datagram = parts.security + parts.coap + parts.dns;
    let frames = req.link.fragment(datagram)?;
    let total: usize = frames.iter().sum();
    Ok(SizeRow {
        transport: transport.to_string(),
        method: method.to_string(),
        format: format!("{format:?}").to_lowercase(),
        message: message.to_string(),
        frames: frames.len(),
        link: total - datagram,
        security: parts.security,
        coap: parts.coap,
        dns: parts.dns,
        total,
    })
}

/// Octets of the DNS material inside a CoAP request: the payload, or for
/// GET the base64url query parameter value.
fn request_dns_octets(msg: &CoapMessage, method: DocMethod, payload_len: usize) -> usize {
    match method {
        DocMethod::Get => (payload_len * 4).div_ceil(3),
        _ => msg.payload.len(),
    }
}

/// Dissects query and response for every requested combination.
pub fn dissect(req: &SizeRequest) -> Result<Vec<SizeRow>, NetsimError> {
    let name = sample_name(req.name_len)?;
    let resolver = SyntheticResolver { records: req.records, policy: TtlPolicy::fixed(SIZES_TTL), seed: 0 };
    let query = DnsMessage::query(name, req.rtype, 0);
    let question = query.question.clone().expect("query has a question");
    let now = Duration::ZERO;
    let mut rows = Vec::new();
    for &transport in &req.transports {
        if !transport.is_coap() {
            let answer = crate::dns::build_response(
                &question,
                crate::doc::Resolver::resolve(&resolver, &question, now).map_err(|e| NetsimError::Config(e.to_string()))?,
                0,
            );
            let sec = transport.record_overhead();
            for (message, dns) in [("query", query.encode().len()), ("response", answer.encode().len())] {
                rows.push(row(req, transport, "-", PayloadFormat::Wire, message, Parts { security: sec, coap: 0, dns })?);
            }
            continue;
        }
        for &format in &req.formats {
            for &method in &req.methods {
                let cfg = DocClientConfig { method, format, scheme: req.scheme, ..Default::default() };
                let mut plain = build_request(&query, &cfg).map_err(|e| NetsimError::Config(e.to_string()))?;
                plain.token = TOKEN.to_vec();
                plain.message_id = 0x1234;
                let query_payload = format.encode_query(&query).map_err(|e| NetsimError::Config(e.to_string()))?.len();
                let opts = ServeOptions { scheme: req.scheme, ..Default::default() };
                let mut resp = serve(&plain, &resolver, &opts, now);
                resp.mtype = MessageType::Acknowledgement;
                let q_dns = request_dns_octets(&plain, method, query_payload);
                let q_plain = plain.encode().len();
                let r_plain = resp.encode().len();
                let m = method.to_string();
                match transport {
                    Transport::Coap | Transport::Coaps => {
                        let sec = transport.record_overhead();
                        rows.push(row(req, transport, &m, format, "query", Parts { security: sec, coap: q_plain - q_dns, dns: q_dns })?);
                        let r_dns = resp.payload.len();
                        rows.push(row(req, transport, &m, format, "response", Parts { security: sec, coap: r_plain - r_dns, dns: r_dns })?);
                    }
                    _ => {
                        let (mut client, mut server) = oscore_pair();
                        let (outer, _) = client.protect_request(&plain).map_err(sec_err)?;
                        let (_, binding) = server.unprotect_request(&outer).map_err(sec_err)?;
                        let protected = server.protect_response(&resp, &binding, false).map_err(sec_err)?;
                        let r_dns = resp.payload.len();
                        rows.push(row(req, transport, &m, format, "query", Parts {
                            security: outer.encode().len() - q_plain,
                            coap: q_plain - q_dns,
                            dns: q_dns,
                        })?);
                        rows.push(row(req, transport, &m, format, "response", Parts {
                            security: protected.encode().len() - r_plain,
                            coap: r_plain - r_dns,
                            dns: r_dns,
                        })?);
                        // Echo round trip: challenge and the repeated query carrying the Echo value
                        let challenge = echo_challenge(&mut server, &plain, &binding, &[0xec; ECHO_LEN]).map_err(sec_err)?;
                        let mut bare = CoapMessage::response_to(&plain, crate::coap::Code::UNAUTHORIZED);
                        bare.add_option(option::ECHO, vec![0xec; ECHO_LEN]);
                        let c_plain = bare.encode().len();
                        rows.push(row(req, transport, &m, format, "echo-challenge", Parts {
                            security: challenge.encode().len() - c_plain,
                            coap: c_plain,
                            dns: 0,
                        })?);
                        let mut with_echo = plain.clone();
                        with_echo.add_option(option::ECHO, vec![0xec; ECHO_LEN]);
                        let e_plain = with_echo.encode().len();
                        let (outer, _) = client.protect_request(&with_echo).map_err(sec_err)?;
                        rows.push(row(req, transport, &m, format, "echo-query", Parts {
                            security: outer.encode().len() - e_plain,
                            coap: e_plain - q_dns,
                            dns: q_dns,
                        })?);
                    }
                }
            }
        }
    }
    Ok(rows)
}

fn sec_err(e: crate::oscore::OscoreError) -> NetsimError {
    NetsimError::Config(format!("OSCORE: {e}"))
}

fn oscore_pair() -> (SecurityContext, SecurityContext) {
    let secret = [0x5au8; 16];
    let client = SecurityContext::derive(&secret, b"", &[0x01], &[]).expect("valid ids");
    let server = SecurityContext::derive(&secret, b"", &[], &[0x01]).expect("valid ids");
    (client, server)
}

pub const SIZES_HEADER: [&str; 10] =
    ["transport", "method", "format", "message", "frames", "link", "security", "coap", "dns", "total"];

pub fn write_csv<W: std::io::Write>(out: W, rows: &[SizeRow]) -> Result<(), NetsimError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(SIZES_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

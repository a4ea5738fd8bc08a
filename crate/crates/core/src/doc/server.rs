//! DoC server: the stateless `serve` handler and a sans-IO server that adds
//! the messaging layer, block-wise transfer and optional OSCORE.

use std::collections::HashMap;
use std::fmt::Debug;
use std::hash::Hash;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::resolver::{ResolveError, Resolver};
use super::{make_etag, parse_request, CachingScheme, DocError, DocMethod, DEFAULT_PATH};
use crate::coap::block::{block_at, szx_for_size, Reassembler};
use crate::coap::{option, BlockOption, CoapMessage, Code, Endpoint, EndpointEvent, TransmissionParams};
use crate::dns::{build_response, min_ttl, rewrite_ttls, sort_records};
use crate::oscore::{self, echo_challenge, EchoState, OscoreError, RequestVerdict, SecurityContext};

const RCODE_NXDOMAIN: u16 = 3;
const RCODE_SERVFAIL: u16 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeOptions {
    pub scheme: CachingScheme,
    pub path: String,
    /// Sort answers before encoding so equal record sets encode equally.
    pub sort: bool,
    pub etag: bool,
    /// Split responses larger than this with Block2 even unasked.
    pub block_size: Option<usize>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions { scheme: CachingScheme::EolTtls, path: DEFAULT_PATH.into(), sort: true, etag: true, block_size: None }
    }
}

fn status_for(err: &DocError) -> Code {
    match err {
        DocError::UnsupportedFormat(_) => Code::UNSUPPORTED_CONTENT_FORMAT,
        DocError::Status(c) => *c,
        _ => Code::BAD_REQUEST,
    }
}

/// Answers one DoC request. Offered ETags that match the fresh
/// representation turn the answer into 2.03 Valid.
pub fn serve<R: Resolver + ?Sized>(req: &CoapMessage, resolver: &R, opts: &ServeOptions, now: Duration) -> CoapMessage {
    let Some(method) = DocMethod::from_code(req.code) else {
        return CoapMessage::response_to(req, Code::METHOD_NOT_ALLOWED);
    };
    if req.uri_path() != opts.path {
        return CoapMessage::response_to(req, Code::NOT_FOUND);
    }
    let (query, format) = match parse_request(req) {
        Ok(v) => v,
        Err(e) => {
            log::debug!("rejecting request: {e}");
            return CoapMessage::response_to(req, status_for(&e));
        }
    };
    let question = query.question.clone().expect("parse_request checks the question");
    let mut msg = match resolver.resolve(&question, now) {
        Ok(records) => build_response(&question, records, query.id),
        Err(e) => {
            let mut m = build_response(&question, Vec::new(), query.id);
            m.flags |= if matches!(e, ResolveError::NxDomain) { RCODE_NXDOMAIN } else { RCODE_SERVFAIL };
            m
        }
    };
    let max_age = min_ttl(&msg).ok();
    if opts.scheme == CachingScheme::EolTtls {
        msg = rewrite_ttls(&msg, 0);
    }
    if opts.sort {
        msg = sort_records(&msg);
    }
    let payload = match format.encode_response(&msg) {
        Ok(p) => p,
        Err(e) => {
            log::debug!("cannot encode response: {e}");
            return CoapMessage::response_to(req, Code::INTERNAL_SERVER_ERROR);
        }
    };
    let etag = (opts.etag && method.is_cacheable()).then(|| make_etag(&payload));
    let valid = etag.is_some_and(|t| req.option_values(option::ETAG).any(|o| o == t));
    let mut resp = CoapMessage::response_to(req, if valid { Code::VALID } else { Code::CONTENT });
    if let Some(t) = etag {
        resp.add_option(option::ETAG, t.to_vec());
    }
    if let Some(age) = max_age {
        resp.add_uint_option(option::MAX_AGE, age);
    }
    if !valid {
        resp.add_uint_option(option::CONTENT_FORMAT, format.content_format() as u32);
        resp.payload = payload;
    }
    resp
}

/// Revalidation is `serve` on a request that carries ETags.
pub fn revalidate<R: Resolver + ?Sized>(req: &CoapMessage, resolver: &R, opts: &ServeOptions, now: Duration) -> CoapMessage {
    serve(req, resolver, opts, now)
}

struct Client {
    ctx: SecurityContext,
    echo: EchoState,
}

/// Counters kept by [`DocServer`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ServerStats {
    pub requests: u64,
    pub resolved: u64,
    pub echo_challenges: u64,
    pub security_failures: u64,
}

pub struct DocServer<P, R> {
    endpoint: Endpoint<P>,
    resolver: R,
    pub opts: ServeOptions,
    uploads: HashMap<(P, Vec<u8>), (Reassembler, Duration)>,
    downloads: HashMap<(P, Vec<u8>), (CoapMessage, u8, Duration)>,
    clients: Option<Vec<Client>>,
    rng: ChaCha8Rng,
    stats: ServerStats,
}

impl<P: Clone + Eq + Hash + Debug, R: Resolver> DocServer<P, R> {
    pub fn new(resolver: R, opts: ServeOptions, params: TransmissionParams, seed: u64) -> Self {
        DocServer {
            endpoint: Endpoint::new(params, seed),
            resolver,
            opts,
            uploads: HashMap::new(),
            downloads: HashMap::new(),
            clients: None,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed),
            stats: ServerStats::default(),
        }
    }

    /// Requires OSCORE from every client; one context per client.
    pub fn with_oscore(mut self, contexts: Vec<SecurityContext>) -> Self {
        self.clients = Some(contexts.into_iter().map(|ctx| Client { ctx, echo: EchoState::default() }).collect());
        self
    }

    pub fn stats(&self) -> ServerStats {
        self.stats
    }

    pub fn endpoint(&self) -> &Endpoint<P> {
        &self.endpoint
    }

    pub fn resolver(&self) -> &R {
        &self.resolver
    }

    pub fn handle_datagram(&mut self, peer: P, bytes: &[u8], now: Duration) {
        self.endpoint.handle_datagram(peer, bytes, now);
        while let Some(ev) = self.endpoint.poll_event() {
            if let EndpointEvent::Request { peer, msg } = ev {
                self.stats.requests += 1;
                let resp = self.process(&peer, &msg, now);
                self.endpoint.respond(peer, &msg, resp, now);
            }
        }
    }

    pub fn poll_transmit(&mut self) -> Option<crate::coap::Transmit<P>> {
        self.endpoint.poll_transmit()
    }

    pub fn poll_timeout(&self) -> Option<Duration> {
        self.endpoint.poll_timeout()
    }

    pub fn handle_timeout(&mut self, now: Duration) {
        self.endpoint.handle_timeout(now);
        while self.endpoint.poll_event().is_some() {}
    }

    fn process(&mut self, peer: &P, req: &CoapMessage, now: Duration) -> CoapMessage {
        if self.clients.is_none() {
            return self.process_plain(peer, req, now);
        }
        match self.verify(req, now) {
            Ok(Ok((idx, inner, binding))) => {
                let resp = self.process_plain(peer, &inner, now);
                let ctx = &mut self.clients.as_mut().expect("checked above")[idx].ctx;
                ctx.protect_response(&resp, &binding, false).unwrap_or_else(|e| {
                    log::warn!("cannot protect response: {e}");
                    CoapMessage::response_to(req, Code::INTERNAL_SERVER_ERROR)
                })
            }
            Ok(Err(challenge)) => {
                self.stats.echo_challenges += 1;
                challenge
            }
            Err(e) => {
                self.stats.security_failures += 1;
                log::debug!("rejecting protected request: {e}");
                let code = match e {
                    OscoreError::BadOption | OscoreError::Inner(_) => Code::BAD_OPTION,
                    OscoreError::BadProxyUri(_) => Code::BAD_REQUEST,
                    _ => Code::UNAUTHORIZED,
                };
                CoapMessage::response_to(req, code)
            }
        }
    }

    /// Either the inner request (with the index of the matching client) or
    /// a ready Echo challenge.
    #[allow(clippy::type_complexity)]
    fn verify(
        &mut self,
        req: &CoapMessage,
        now: Duration,
    ) -> Result<Result<(usize, CoapMessage, oscore::RequestBinding), CoapMessage>, OscoreError> {
        let kid = oscore::request_kid(req)?;
        let clients = self.clients.as_mut().expect("only called with OSCORE");
        let idx = clients.iter().position(|c| c.ctx.recipient_id == kid).ok_or(OscoreError::UnknownKid)?;
        let client = &mut clients[idx];
        match client.echo.verify_request(&mut client.ctx, req, now, &mut self.rng)? {
            RequestVerdict::Accept { msg, binding } => Ok(Ok((idx, msg, binding))),
            RequestVerdict::Challenge { binding, echo } => Ok(Err(echo_challenge(&mut client.ctx, req, &binding, &echo)?)),
        }
    }

    fn expire(&mut self, now: Duration) {
        let life = self.endpoint.params().exchange_lifetime();
        self.uploads.retain(|_, (_, t)| *t + life > now);
        self.downloads.retain(|_, (_, _, t)| *t + life > now);
    }

    fn process_plain(&mut self, peer: &P, req: &CoapMessage, now: Duration) -> CoapMessage {
        self.expire(now);
        let key = (peer.clone(), req.token.clone());
        let block2 = match req.option(option::BLOCK2).map(BlockOption::decode).transpose() {
            Ok(b) => b,
            Err(_) => return CoapMessage::response_to(req, Code::BAD_OPTION),
        };
        if let Some(b2) = block2.filter(|b| b.num > 0) {
            return match self.downloads.get(&key) {
                Some((full, szx, _)) => {
                    // the client may lower the size but never raise it
                    let szx = b2.szx.min(*szx);
                    let num = (b2.offset() / (16usize << szx)) as u32;
                    match block_response(full, num, szx) {
                        Some(resp) => {
                            if resp.option(option::BLOCK2).and_then(|v| BlockOption::decode(v).ok()).is_some_and(|b| !b.more) {
                                self.downloads.remove(&key);
                            }
                            resp
                        }
                        None => CoapMessage::response_to(req, Code::BAD_OPTION),
                    }
                }
                None => CoapMessage::response_to(req, Code::REQUEST_ENTITY_INCOMPLETE),
            };
        }
        let Some(b1) = req.option(option::BLOCK1) else {
            return self.serve_blockwise(key, req, block2, now);
        };
        let Ok(b1) = BlockOption::decode(b1) else {
            return CoapMessage::response_to(req, Code::BAD_OPTION);
        };
        if !DocMethod::from_code(req.code).is_some_and(DocMethod::block_transferable) {
            return CoapMessage::response_to(req, Code::BAD_REQUEST);
        }
        let entry = self.uploads.entry(key.clone()).or_insert_with(|| (Reassembler::new(), now));
        entry.1 = now;
        match entry.0.push(b1, &req.payload) {
            Err(e) => {
                log::debug!("Block1 transfer aborted: {e}");
                self.uploads.remove(&key);
                CoapMessage::response_to(req, Code::REQUEST_ENTITY_INCOMPLETE)
            }
            Ok(None) => {
                let mut resp = CoapMessage::response_to(req, Code::CONTINUE);
                resp.add_option(option::BLOCK1, BlockOption { more: true, ..b1 }.encode());
                resp
            }
            Ok(Some(body)) => {
                self.uploads.remove(&key);
                let mut full = req.clone();
                full.remove_option(option::BLOCK1);
                full.payload = body;
                let mut resp = self.serve_blockwise(key, &full, block2, now);
                resp.add_option(option::BLOCK1, BlockOption { more: false, ..b1 }.encode());
                resp
            }
        }
    }

    fn serve_blockwise(&mut self, key: (P, Vec<u8>), req: &CoapMessage, block2: Option<BlockOption>, now: Duration) -> CoapMessage {
        let mut plain = req.clone();
        plain.remove_option(option::BLOCK2);
        let resp = serve(&plain, &self.resolver, &self.opts, now);
        if resp.code == Code::CONTENT {
            self.stats.resolved += 1;
        }
        let szx = block2.map(|b| b.szx).or_else(|| self.opts.block_size.and_then(|s| szx_for_size(s).ok()));
        match szx {
            Some(szx) if resp.payload.len() > 16usize << szx => {
                let first = block_response(&resp, 0, szx).expect("body is longer than one block");
                self.downloads.insert(key, (resp, szx, now));
                first
            }
            _ => resp,
        }
    }
}

fn block_response(full: &CoapMessage, num: u32, szx: u8) -> Option<CoapMessage> {
    let (block, chunk) = block_at(&full.payload, num, szx).ok()??;
    let mut resp = full.clone();
    resp.payload = chunk.to_vec();
    resp.set_option(option::BLOCK2, block.encode());
    Some(resp)
}

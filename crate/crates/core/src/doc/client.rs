//! Sans-IO DoC client. Queries are multiplexed by token over one CoAP
//! endpoint talking to a server or a forward proxy.

use std::collections::{HashMap, VecDeque};
use std::fmt::Debug;
use std::hash::Hash;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use super::{accept_response, build_request, DocClientConfig, DocError};
use crate::cache::{cache_key, Cache, CacheEventKind, CacheKey, Lookup};
use crate::coap::block::szx_for_size;
use crate::coap::{option, BlockOption, CoapError, CoapMessage, Code, Endpoint, EndpointEvent, FailCause, Transmit, TransmissionParams};
use crate::dns::{min_ttl, DnsMessage, DnsName, RecordType};
use crate::oscore::{OscoreError, RequestBinding, SecurityContext};

pub type QueryId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnswerSource {
    Network,
    CoapCache,
    DnsCache,
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("timed out")]
    Timeout,
    #[error("reset by peer")]
    Reset,
    #[error("server answered {0}")]
    Status(Code),
    #[error(transparent)]
    Doc(#[from] DocError),
    #[error("OSCORE: {0}")]
    Security(#[from] OscoreError),
    #[error("block-wise transfer: {0}")]
    Block(#[from] CoapError),
}

#[derive(Debug)]
pub enum ClientEvent {
    Resolved { id: QueryId, response: DnsMessage, source: AnswerSource, elapsed: Duration },
    Failed { id: QueryId, error: ClientError, elapsed: Duration },
    Retransmitted { id: QueryId, attempt: u32, offset: Duration },
    Cache { id: QueryId, kind: CacheEventKind },
    EchoChallenge { id: QueryId },
}

/// Stub-side DNS cache holding restored answers until their smallest TTL
/// runs out.
#[derive(Clone, Debug, Default)]
pub struct DnsCache {
    entries: HashMap<(DnsName, RecordType), (DnsMessage, Duration)>,
}

impl DnsCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, msg: &DnsMessage, now: Duration) {
        let (Some(q), Ok(ttl)) = (&msg.question, min_ttl(msg)) else { return };
        if ttl > 0 {
            self.entries.insert((q.name.clone(), q.rtype), (msg.clone(), now));
        }
    }

    /// The cached answer with TTLs reduced by the time spent in the cache.
    pub fn lookup(&mut self, name: &DnsName, rtype: RecordType, now: Duration) -> Option<DnsMessage> {
        let key = (name.clone(), rtype);
        let (msg, stored) = self.entries.get(&key)?;
        let elapsed = now.saturating_sub(*stored).as_secs() as u32;
        let ttl = min_ttl(msg).unwrap_or(0);
        if (now.saturating_sub(*stored)) >= Duration::from_secs(ttl as u64) {
            self.entries.remove(&key);
            return None;
        }
        let mut out = msg.clone();
        for rr in out.answers.iter_mut().chain(out.authority.iter_mut()).chain(out.additional.iter_mut()) {
            rr.ttl = rr.ttl.saturating_sub(elapsed);
        }
        Some(out)
    }
}

#[derive(Debug)]
struct Query {
    query: DnsMessage,
    /// Full unprotected request without block options.
    request: CoapMessage,
    started: Duration,
    key: Option<CacheKey>,
    revalidating: bool,
    binding: Option<RequestBinding>,
    echo: Option<Vec<u8>>,
    szx: Option<u8>,
    body: Vec<u8>,
}

pub struct DocClient<P> {
    endpoint: Endpoint<P>,
    server: P,
    cfg: DocClientConfig,
    rng: ChaCha8Rng,
    next_id: QueryId,
    queries: HashMap<QueryId, Query>,
    by_token: HashMap<Vec<u8>, QueryId>,
    coap_cache: Option<Cache>,
    dns_cache: Option<DnsCache>,
    security: Option<SecurityContext>,
    events: VecDeque<ClientEvent>,
}

impl<P: Clone + Eq + Hash + Debug> DocClient<P> {
    /// `server` is the next CoAP hop: the DoC server or a forward proxy
    /// (set `cfg.proxy_uri` for the latter).
    pub fn new(server: P, cfg: DocClientConfig, params: TransmissionParams, seed: u64) -> Result<Self, DocError> {
        cfg.validate()?;
        Ok(DocClient {
            endpoint: Endpoint::new(params, seed),
            server,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xc11e47),
            next_id: 0,
            queries: HashMap::new(),
            by_token: HashMap::new(),
            coap_cache: None,
            dns_cache: None,
            security: None,
            events: VecDeque::new(),
        })
    }

    pub fn with_coap_cache(mut self, cache: Cache) -> Self {
        self.coap_cache = Some(cache);
        self
    }

    pub fn with_dns_cache(mut self) -> Self {
        self.dns_cache = Some(DnsCache::new());
        self
    }

    pub fn with_oscore(mut self, ctx: SecurityContext) -> Self {
        self.security = Some(ctx);
        self
    }

    pub fn config(&self) -> &DocClientConfig {
        &self.cfg
    }

    pub fn security(&self) -> Option<&SecurityContext> {
        self.security.as_ref()
    }

    pub fn coap_cache(&self) -> Option<&Cache> {
        self.coap_cache.as_ref()
    }

    pub fn pending(&self) -> usize {
        self.queries.len()
    }

    pub fn poll_event(&mut self) -> Option<ClientEvent> {
        self.events.pop_front()
    }

    pub fn poll_transmit(&mut self) -> Option<Transmit<P>> {
        self.endpoint.poll_transmit()
    }

    pub fn poll_timeout(&self) -> Option<Duration> {
        self.endpoint.poll_timeout()
    }

    pub fn query(&mut self, name: DnsName, rtype: RecordType, now: Duration) -> QueryId {
        let id = self.next_id;
        self.next_id += 1;
        if let Some(hit) = self.dns_cache.as_mut().and_then(|c| c.lookup(&name, rtype, now)) {
            self.events.push_back(ClientEvent::Resolved { id, response: hit, source: AnswerSource::DnsCache, elapsed: Duration::ZERO });
            return id;
        }
        let dns_id = if self.cfg.random_id { self.rng.gen() } else { 0 };
        let query = DnsMessage::query(name, rtype, dns_id);
        let mut request = match build_request(&query, &self.cfg) {
            Ok(r) => r,
            Err(e) => {
                self.events.push_back(ClientEvent::Failed { id, error: e.into(), elapsed: Duration::ZERO });
                return id;
            }
        };
        let mut revalidating = false;
        let key = if self.security.is_none() { self.coap_cache.as_ref().and_then(|_| cache_key(&request)) } else { None };
        if let Some(key) = key {
            let cache = self.coap_cache.as_mut().expect("key implies cache");
            match cache.lookup(&key, now) {
                Lookup::Fresh(resp) => {
                    self.events.push_back(ClientEvent::Cache { id, kind: CacheEventKind::Hit });
                    self.finish_accept(id, &query, &resp, AnswerSource::CoapCache, now, now);
                    return id;
                }
                Lookup::Stale { etag } => {
                    self.events.push_back(ClientEvent::Cache { id, kind: CacheEventKind::StaleHit });
                    if let Some(tag) = etag {
                        request.add_option(option::ETAG, tag);
                    }
                    revalidating = true;
                }
                Lookup::Miss => self.events.push_back(ClientEvent::Cache { id, kind: CacheEventKind::Miss }),
            }
        }
        request.token = self.endpoint.next_token();
        let szx = self.cfg.block_size.and_then(|s| szx_for_size(s).ok());
        self.by_token.insert(request.token.clone(), id);
        self.queries.insert(
            id,
            Query { query, request, started: now, key, revalidating, binding: None, echo: None, szx, body: Vec::new() },
        );
        self.send_first(id, now);
        id
    }

    /// Sends the opening request of a query, split with Block1 if needed.
    fn send_first(&mut self, id: QueryId, now: Duration) {
        let q = &self.queries[&id];
        let mut msg = q.request.clone();
        if let Some(szx) = q.szx {
            let size = 16usize << szx;
            if msg.payload.len() > size {
                msg.payload.truncate(size);
                msg.add_option(option::BLOCK1, BlockOption { num: 0, more: true, szx }.encode());
            }
            msg.add_option(option::BLOCK2, BlockOption { num: 0, more: false, szx }.encode());
        }
        self.send(id, msg, now);
    }

    fn send(&mut self, id: QueryId, mut msg: CoapMessage, now: Duration) {
        let q = self.queries.get_mut(&id).expect("live query");
        if let Some(echo) = &q.echo {
            msg.set_option(option::ECHO, echo.clone());
        }
        let out = match &mut self.security {
            Some(ctx) => match ctx.protect_request(&msg) {
                Ok((outer, binding)) => {
                    q.binding = Some(binding);
                    outer
                }
                Err(e) => return self.fail(id, e.into(), now),
            },
            None => msg,
        };
        self.endpoint.send_request(self.server.clone(), out, now);
    }

    pub fn handle_datagram(&mut self, peer: P, bytes: &[u8], now: Duration) {
        self.endpoint.handle_datagram(peer, bytes, now);
        self.drain(now);
    }

    pub fn handle_timeout(&mut self, now: Duration) {
        self.endpoint.handle_timeout(now);
        self.drain(now);
    }

    fn drain(&mut self, now: Duration) {
        while let Some(ev) = self.endpoint.poll_event() {
            match ev {
                EndpointEvent::Response { msg, .. } => self.on_response(msg, now),
                EndpointEvent::Retransmitted { token, attempt, offset, .. } => {
                    if let Some(&id) = self.by_token.get(&token) {
                        self.events.push_back(ClientEvent::Retransmitted { id, attempt, offset });
                    }
                }
                EndpointEvent::Failed { token, cause, .. } => {
                    if let Some(&id) = self.by_token.get(&token) {
                        let error = match cause {
                            FailCause::Timeout => ClientError::Timeout,
                            FailCause::Reset => ClientError::Reset,
                        };
                        self.fail(id, error, now);
                    }
                }
                EndpointEvent::Request { peer, msg } => {
                    let resp = CoapMessage::response_to(&msg, Code::METHOD_NOT_ALLOWED);
                    self.endpoint.respond(peer, &msg, resp, now);
                }
            }
        }
    }

    fn remove(&mut self, id: QueryId) -> Option<Query> {
        let q = self.queries.remove(&id)?;
        self.by_token.remove(&q.request.token);
        Some(q)
    }

    fn fail(&mut self, id: QueryId, error: ClientError, now: Duration) {
        if let Some(q) = self.remove(id) {
            self.events.push_back(ClientEvent::Failed { id, error, elapsed: now.saturating_sub(q.started) });
        }
    }

    fn on_response(&mut self, msg: CoapMessage, now: Duration) {
        let Some(&id) = self.by_token.get(&msg.token) else { return };
        let resp = match (&self.security, &self.queries[&id].binding) {
            (Some(ctx), Some(binding)) => match ctx.unprotect_response(&msg, binding) {
                Ok(inner) => inner,
                Err(e) => return self.fail(id, e.into(), now),
            },
            (Some(_), None) => return self.fail(id, OscoreError::MissingOption.into(), now),
            (None, _) => msg,
        };
        let q = self.queries.get_mut(&id).expect("token maps to a live query");

        if resp.code == Code::UNAUTHORIZED && q.echo.is_none() {
            if let Some(echo) = resp.option(option::ECHO) {
                q.echo = Some(echo.to_vec());
                self.events.push_back(ClientEvent::EchoChallenge { id });
                return self.send_first(id, now);
            }
        }
        if resp.code == Code::CONTINUE {
            let (Some(szx), Some(b1)) = (q.szx, resp.option(option::BLOCK1)) else {
                return self.fail(id, ClientError::Status(resp.code), now);
            };
            let acked = match BlockOption::decode(b1) {
                Ok(b) => b,
                Err(e) => return self.fail(id, e.into(), now),
            };
            // the server may ask for smaller blocks
            let szx = acked.szx.min(szx);
            let size = 16usize << szx;
            let offset = acked.offset() + acked.size();
            let num = (offset / size) as u32;
            let body = &q.request.payload;
            if offset >= body.len() {
                return self.fail(id, ClientError::Status(resp.code), now);
            }
            let end = (offset + size).min(body.len());
            let mut next = q.request.clone();
            next.payload = body[offset..end].to_vec();
            next.add_option(option::BLOCK1, BlockOption { num, more: end < body.len(), szx }.encode());
            next.add_option(option::BLOCK2, BlockOption { num: 0, more: false, szx }.encode());
            return self.send(id, next, now);
        }
        let mut resp = resp;
        if let Some(b2) = resp.option(option::BLOCK2) {
            let block = match BlockOption::decode(b2) {
                Ok(b) => b,
                Err(e) => return self.fail(id, e.into(), now),
            };
            if block.offset() != q.body.len() {
                let expected = (q.body.len() / block.size()) as u32;
                return self.fail(id, CoapError::UnexpectedBlock { expected, got: block.num }.into(), now);
            }
            q.body.extend_from_slice(&resp.payload);
            if block.more {
                let mut next = q.request.clone();
                next.payload.clear();
                next.add_option(option::BLOCK2, BlockOption { num: block.num + 1, more: false, szx: block.szx }.encode());
                return self.send(id, next, now);
            }
            resp.payload = std::mem::take(&mut q.body);
            resp.remove_option(option::BLOCK2);
        }
        resp.remove_option(option::BLOCK1);
        self.finish(id, resp, now);
    }

    fn finish(&mut self, id: QueryId, resp: CoapMessage, now: Duration) {
        let Some(q) = self.remove(id) else { return };
        let mut served = resp;
        if let (Some(key), Some(cache)) = (q.key, self.coap_cache.as_mut()) {
            if served.code == Code::VALID && q.revalidating {
                match cache.refresh(&key, &served, now) {
                    Some(full) => {
                        self.events.push_back(ClientEvent::Cache { id, kind: CacheEventKind::RevalidationOk });
                        served = full;
                    }
                    None => {
                        let elapsed = now.saturating_sub(q.started);
                        self.events.push_back(ClientEvent::Failed { id, error: ClientError::Status(Code::VALID), elapsed });
                        return;
                    }
                }
            } else if served.code == Code::CONTENT {
                cache.store(key, &served, now);
                if q.revalidating {
                    self.events.push_back(ClientEvent::Cache { id, kind: CacheEventKind::RevalidationFull });
                }
            }
        }
        self.finish_accept(id, &q.query, &served, AnswerSource::Network, q.started, now);
    }

    fn finish_accept(&mut self, id: QueryId, query: &DnsMessage, resp: &CoapMessage, source: AnswerSource, started: Duration, now: Duration) {
        let elapsed = now.saturating_sub(started);
        let event = match accept_response(resp, self.cfg.scheme, query, &mut self.rng) {
            Ok(dns) => {
                if let Some(c) = self.dns_cache.as_mut() {
                    c.insert(&dns, now);
                }
                ClientEvent::Resolved { id, response: dns, source, elapsed }
            }
            Err(DocError::Status(code)) => ClientEvent::Failed { id, error: ClientError::Status(code), elapsed },
            Err(e) => ClientEvent::Failed { id, error: e.into(), elapsed },
        };
        self.events.push_back(event);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doc::resolver::{SyntheticResolver, TtlPolicy};
    use crate::doc::server::{DocServer, ServeOptions};
    use crate::doc::{CachingScheme, DocMethod};
    use crate::oscore::ReplayWindow;

    const NAME: &str = "0123456789.abcdefghij.de";
    const C: u8 = 1;
    const S: u8 = 2;

    fn server(records: usize, ttl: u32) -> DocServer<u8, SyntheticResolver> {
        let res = SyntheticResolver { records, policy: TtlPolicy::fixed(ttl), seed: 9 };
        DocServer::new(res, ServeOptions::default(), TransmissionParams::default(), 4)
    }

    /// Shuttles datagrams until both sides are quiet; returns datagrams
    /// sent by the client.
    fn pump(c: &mut DocClient<u8>, s: &mut DocServer<u8, SyntheticResolver>, now: Duration) -> usize {
        let mut sent = 0;
        loop {
            let mut moved = false;
            while let Some(t) = c.poll_transmit() {
                sent += 1;
                s.handle_datagram(C, &t.bytes, now);
                moved = true;
            }
            while let Some(t) = s.poll_transmit() {
                c.handle_datagram(S, &t.bytes, now);
                moved = true;
            }
            if !moved {
                return sent;
            }
        }
    }

    fn events(c: &mut DocClient<u8>) -> Vec<ClientEvent> {
        std::iter::from_fn(|| c.poll_event()).collect()
    }

    fn resolved(ev: &[ClientEvent]) -> Vec<(&DnsMessage, AnswerSource)> {
        ev.iter()
            .filter_map(|e| match e {
                ClientEvent::Resolved { response, source, .. } => Some((response, *source)),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn fetch_end_to_end() {
        let mut s = server(1, 60);
        let mut c = DocClient::new(S, DocClientConfig::default(), TransmissionParams::default(), 1).unwrap();
        c.query(NAME.parse().unwrap(), RecordType::AAAA, Duration::ZERO);
        assert_eq!(pump(&mut c, &mut s, Duration::ZERO), 1);
        let ev = events(&mut c);
        let r = resolved(&ev);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].0.answers.len(), 1);
        assert_eq!(r[0].0.answers[0].ttl, 60);
        assert_eq!(c.pending(), 0);
    }

    #[test]
    fn get_and_post_end_to_end() {
        for method in [DocMethod::Get, DocMethod::Post] {
            let mut s = server(2, 30);
            let cfg = DocClientConfig { method, scheme: CachingScheme::DohLike, ..Default::default() };
            s.opts.scheme = CachingScheme::DohLike;
            let mut c = DocClient::new(S, cfg, TransmissionParams::default(), 1).unwrap();
            c.query(NAME.parse().unwrap(), RecordType::A, Duration::ZERO);
            pump(&mut c, &mut s, Duration::ZERO);
            let ev = events(&mut c);
            assert_eq!(resolved(&ev)[0].0.answers.len(), 2, "{method}");
        }
    }

    #[test]
    fn block2_transfer_reassembles() {
        let mut s = server(4, 60);
        let cfg = DocClientConfig { block_size: Some(32), ..Default::default() };
        let mut c = DocClient::new(S, cfg, TransmissionParams::default(), 1).unwrap();
        c.query(NAME.parse().unwrap(), RecordType::AAAA, Duration::ZERO);
        // 42-octet query in two Block1 blocks, 154-octet answer in five Block2 blocks
        assert_eq!(pump(&mut c, &mut s, Duration::ZERO), 2 + 4);
        let ev = events(&mut c);
        assert_eq!(resolved(&ev)[0].0.answers.len(), 4);
        assert_eq!(s.stats().resolved, 1);
    }

    #[test]
    fn coap_cache_hit_and_revalidation() {
        let mut s = server(1, 2);
        let mut c = DocClient::new(S, DocClientConfig::default(), TransmissionParams::default(), 1)
            .unwrap()
            .with_coap_cache(Cache::default());
        let name: DnsName = NAME.parse().unwrap();
        c.query(name.clone(), RecordType::AAAA, Duration::ZERO);
        pump(&mut c, &mut s, Duration::ZERO);
        c.query(name.clone(), RecordType::AAAA, Duration::from_secs(1));
        assert_eq!(pump(&mut c, &mut s, Duration::from_secs(1)), 0);
        c.query(name, RecordType::AAAA, Duration::from_secs(3));
        assert_eq!(pump(&mut c, &mut s, Duration::from_secs(3)), 1);
        let ev = events(&mut c);
        let kinds: Vec<_> = ev
            .iter()
            .filter_map(|e| match e {
                ClientEvent::Cache { kind, .. } => Some(*kind),
                _ => None,
            })
            .collect();
        assert_eq!(kinds, [CacheEventKind::Miss, CacheEventKind::Hit, CacheEventKind::StaleHit, CacheEventKind::RevalidationOk]);
        let r = resolved(&ev);
        assert_eq!(r.iter().map(|x| x.1).collect::<Vec<_>>(), [AnswerSource::Network, AnswerSource::CoapCache, AnswerSource::Network]);
        assert_eq!(r[1].0.answers[0].ttl, 1);
    }

    #[test]
    fn dns_cache_short_circuits() {
        let mut s = server(1, 10);
        let mut c = DocClient::new(S, DocClientConfig::default(), TransmissionParams::default(), 1).unwrap().with_dns_cache();
        let name: DnsName = NAME.parse().unwrap();
        c.query(name.clone(), RecordType::AAAA, Duration::ZERO);
        pump(&mut c, &mut s, Duration::ZERO);
        c.query(name.clone(), RecordType::AAAA, Duration::from_millis(4500));
        assert_eq!(pump(&mut c, &mut s, Duration::from_secs(4)), 0);
        let ev = events(&mut c);
        let r = resolved(&ev);
        assert_eq!(r[1].1, AnswerSource::DnsCache);
        assert_eq!(r[1].0.answers[0].ttl, 6);
        c.query(name, RecordType::AAAA, Duration::from_secs(10));
        assert_eq!(pump(&mut c, &mut s, Duration::from_secs(10)), 1);
    }

    #[test]
    fn timeout_reported() {
        let mut c = DocClient::new(S, DocClientConfig::default(), TransmissionParams::default(), 1).unwrap();
        c.query(NAME.parse().unwrap(), RecordType::AAAA, Duration::ZERO);
        let mut frames = 0;
        while let Some(t) = c.poll_timeout() {
            frames += std::iter::from_fn(|| c.poll_transmit()).count();
            c.handle_timeout(t);
        }
        frames += std::iter::from_fn(|| c.poll_transmit()).count();
        assert_eq!(frames, 5);
        let ev = events(&mut c);
        assert_eq!(ev.iter().filter(|e| matches!(e, ClientEvent::Retransmitted { .. })).count(), 4);
        assert!(matches!(ev.last(), Some(ClientEvent::Failed { error: ClientError::Timeout, .. })));
    }

    #[test]
    fn oscore_with_echo_and_wrong_key() {
        let secret = [3u8; 9];
        let cctx = SecurityContext::derive(&secret, &[], &[1], &[]).unwrap();
        let sctx = SecurityContext::derive(&secret, &[], &[], &[1]).unwrap().with_replay_window(ReplayWindow::unsynchronized(32));
        let mut s = server(1, 60).with_oscore(vec![sctx]);
        let mut c = DocClient::new(S, DocClientConfig::default(), TransmissionParams::default(), 1).unwrap().with_oscore(cctx);
        c.query(NAME.parse().unwrap(), RecordType::AAAA, Duration::ZERO);
        assert_eq!(pump(&mut c, &mut s, Duration::ZERO), 2);
        let ev = events(&mut c);
        assert!(matches!(ev[0], ClientEvent::EchoChallenge { .. }));
        assert_eq!(resolved(&ev).len(), 1);

        let bad = SecurityContext::derive(&[4u8; 9], &[], &[1], &[]).unwrap();
        let mut s = server(1, 60).with_oscore(vec![SecurityContext::derive(&secret, &[], &[], &[1]).unwrap()]);
        let mut c = DocClient::new(S, DocClientConfig::default(), TransmissionParams::default(), 1).unwrap().with_oscore(bad);
        c.query(NAME.parse().unwrap(), RecordType::AAAA, Duration::ZERO);
        pump(&mut c, &mut s, Duration::ZERO);
        let ev = events(&mut c);
        assert!(matches!(ev.last(), Some(ClientEvent::Failed { error: ClientError::Security(_), .. })), "{ev:?}");
    }
}

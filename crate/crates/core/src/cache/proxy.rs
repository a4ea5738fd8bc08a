//! Caching CoAP forward proxy. Clients address it with Proxy-Uri; it
//! forwards to a single upstream, caches 2.05 responses to GET and FETCH,
//! revalidates stale entries with their ETag and coalesces concurrent
//! requests for the same key.

use std::collections::{HashMap, VecDeque};
use std::fmt::Debug;
use std::hash::Hash;
use std::time::Duration;

use serde::Serialize;

use super::{cache_key, Cache, CacheEventKind, CacheKey, Lookup};
use crate::coap::uri::CoapUri;
use crate::coap::{option, BlockOption, CoapMessage, Code, Endpoint, EndpointEvent, FailCause, MessageType, Transmit};
use crate::coap::TransmissionParams;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ProxyStats {
    pub requests: u64,
    pub forwarded: u64,
    pub coalesced: u64,
}

struct Waiter<P> {
    peer: P,
    request: CoapMessage,
}

struct Pending<P> {
    waiters: Vec<Waiter<P>>,
    key: Option<CacheKey>,
    revalidating: bool,
    /// Downstream identity of a block-wise transfer.
    block_key: Option<(P, Vec<u8>)>,
}

pub struct ForwardProxy<P> {
    endpoint: Endpoint<P>,
    upstream: P,
    cache: Option<Cache>,
    pending: HashMap<Vec<u8>, Pending<P>>,
    inflight: HashMap<CacheKey, Vec<u8>>,
    block_tokens: HashMap<(P, Vec<u8>), Vec<u8>>,
    events: VecDeque<CacheEventKind>,
    stats: ProxyStats,
}

impl<P: Clone + Eq + Hash + Debug> ForwardProxy<P> {
    /// `cache = None` makes a plain (non-caching) forward proxy.
    pub fn new(upstream: P, cache: Option<Cache>, params: TransmissionParams, seed: u64) -> Self {
        ForwardProxy {
            endpoint: Endpoint::new(params, seed),
            upstream,
            cache,
            pending: HashMap::new(),
            inflight: HashMap::new(),
            block_tokens: HashMap::new(),
            events: VecDeque::new(),
            stats: ProxyStats::default(),
        }
    }

    pub fn cache(&self) -> Option<&Cache> {
        self.cache.as_ref()
    }

    pub fn stats(&self) -> ProxyStats {
        self.stats
    }

    pub fn poll_cache_event(&mut self) -> Option<CacheEventKind> {
        self.events.pop_front()
    }

    pub fn poll_transmit(&mut self) -> Option<Transmit<P>> {
        self.endpoint.poll_transmit()
    }

    pub fn poll_timeout(&self) -> Option<Duration> {
        self.endpoint.poll_timeout()
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
                EndpointEvent::Request { peer, msg } => self.on_request(peer, msg, now),
                EndpointEvent::Response { peer, msg } if peer == self.upstream => self.on_response(msg, now),
                EndpointEvent::Failed { token, cause, .. } => self.on_failure(&token, cause, now),
                _ => {}
            }
        }
    }

    fn reply(&mut self, peer: P, req: &CoapMessage, resp: CoapMessage, now: Duration) {
        self.endpoint.respond(peer, req, resp, now);
    }

    fn on_request(&mut self, peer: P, req: CoapMessage, now: Duration) {
        self.stats.requests += 1;
        let Some(raw) = req.option(option::PROXY_URI) else {
            self.reply(peer, &req, CoapMessage::response_to(&req, Code::PROXYING_NOT_SUPPORTED), now);
            return;
        };
        let uri = match std::str::from_utf8(raw).ok().map(CoapUri::parse) {
            Some(Ok(u)) => u,
            _ => {
                self.reply(peer, &req, CoapMessage::response_to(&req, Code::BAD_OPTION), now);
                return;
            }
        };
        let mut upstream = CoapMessage::request(req.code);
        upstream.mtype = MessageType::Confirmable;
        for o in req.options() {
            if o.number != option::PROXY_URI && o.number != option::URI_PATH && o.number != option::URI_QUERY {
                upstream.add_option(o.number, o.value.clone());
            }
        }
        for seg in &uri.path {
            upstream.add_option(option::URI_PATH, seg.clone());
        }
        for q in &uri.query {
            upstream.add_option(option::URI_QUERY, q.clone());
        }
        upstream.payload = req.payload.clone();

        let blockwise = req.option(option::BLOCK1).is_some() || req.option(option::BLOCK2).is_some();
        if blockwise {
            let bkey = (peer.clone(), req.token.clone());
            let token = match self.block_tokens.get(&bkey) {
                Some(t) => t.clone(),
                None => {
                    let t = self.endpoint.next_token();
                    self.block_tokens.insert(bkey.clone(), t.clone());
                    t
                }
            };
            upstream.token = token.clone();
            self.forward(upstream, Pending { waiters: vec![Waiter { peer, request: req }], key: None, revalidating: false, block_key: Some(bkey) }, now);
            return;
        }

        let key = self.cache.as_ref().and_then(|_| cache_key(&req));
        let Some(key) = key else {
            self.forward(upstream, Pending { waiters: vec![Waiter { peer, request: req }], key: None, revalidating: false, block_key: None }, now);
            return;
        };
        if let Some(token) = self.inflight.get(&key) {
            if let Some(p) = self.pending.get_mut(token) {
                self.stats.coalesced += 1;
                p.waiters.push(Waiter { peer, request: req });
                return;
            }
        }
        let cache = self.cache.as_mut().expect("key implies cache");
        match cache.lookup(&key, now) {
            Lookup::Fresh(resp) => {
                self.events.push_back(CacheEventKind::Hit);
                let out = answer_for(&req, &resp);
                self.reply(peer, &req, out, now);
            }
            Lookup::Stale { etag } => {
                self.events.push_back(CacheEventKind::StaleHit);
                upstream.remove_option(option::ETAG);
                if let Some(tag) = etag {
                    upstream.add_option(option::ETAG, tag);
                }
                let p = Pending { waiters: vec![Waiter { peer, request: req }], key: Some(key), revalidating: true, block_key: None };
                self.forward_keyed(key, upstream, p, now);
            }
            Lookup::Miss => {
                self.events.push_back(CacheEventKind::Miss);
                let p = Pending { waiters: vec![Waiter { peer, request: req }], key: Some(key), revalidating: false, block_key: None };
                self.forward_keyed(key, upstream, p, now);
            }
        }
    }

    fn forward_keyed(&mut self, key: CacheKey, upstream: CoapMessage, p: Pending<P>, now: Duration) {
        let token = self.forward(upstream, p, now);
        self.inflight.insert(key, token);
    }

    fn forward(&mut self, upstream: CoapMessage, p: Pending<P>, now: Duration) -> Vec<u8> {
        self.stats.forwarded += 1;
        let token = self.endpoint.send_request(self.upstream.clone(), upstream, now);
        self.pending.insert(token.clone(), p);
        token
    }

    fn on_response(&mut self, resp: CoapMessage, now: Duration) {
        let Some(p) = self.pending.remove(&resp.token) else { return };
        if let Some(key) = p.key {
            self.inflight.remove(&key);
        }
        if let Some(bkey) = &p.block_key {
            let more1 = resp.code == Code::CONTINUE;
            let more2 = resp.option(option::BLOCK2).and_then(|v| BlockOption::decode(v).ok()).is_some_and(|b| b.more);
            if !more1 && !more2 {
                self.block_tokens.remove(bkey);
            }
        }
        let served = match (p.key, self.cache.as_mut()) {
            (Some(key), Some(cache)) if resp.code == Code::VALID && p.revalidating => match cache.refresh(&key, &resp, now) {
                Some(full) => {
                    self.events.push_back(CacheEventKind::RevalidationOk);
                    full
                }
                None => resp,
            },
            (Some(key), Some(cache)) if resp.code == Code::CONTENT => {
                cache.store(key, &resp, now);
                if p.revalidating {
                    self.events.push_back(CacheEventKind::RevalidationFull);
                }
                resp
            }
            _ => resp,
        };
        for w in p.waiters {
            let out = answer_for(&w.request, &served);
            self.reply(w.peer, &w.request, out, now);
        }
    }

    fn on_failure(&mut self, token: &[u8], cause: FailCause, now: Duration) {
        let Some(p) = self.pending.remove(token) else { return };
        if let Some(key) = p.key {
            self.inflight.remove(&key);
        }
        if let Some(bkey) = &p.block_key {
            self.block_tokens.remove(bkey);
        }
        let code = match cause {
            FailCause::Timeout => Code::GATEWAY_TIMEOUT,
            FailCause::Reset => Code::BAD_GATEWAY,
        };
        for w in p.waiters {
            let out = CoapMessage::response_to(&w.request, code);
            self.reply(w.peer, &w.request, out, now);
        }
    }
}

/// Tailors a response for one client: a 2.05 whose ETag the client offered
/// becomes a payload-less 2.03.
fn answer_for(req: &CoapMessage, resp: &CoapMessage) -> CoapMessage {
    let mut out = resp.clone();
    out.token = req.token.clone();
    out.message_id = req.message_id;
    if resp.code == Code::CONTENT {
        if let Some(tag) = resp.option(option::ETAG) {
            if req.option_values(option::ETAG).any(|t| t == tag) {
                out.code = Code::VALID;
                out.payload.clear();
                out.remove_option(option::CONTENT_FORMAT);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dns::{DnsMessage, RecordType};
    use crate::doc::{build_request, DocClientConfig, DocMethod};

    const UP: u8 = 0;

    fn proxy(cache: bool) -> ForwardProxy<u8> {
        ForwardProxy::new(UP, cache.then(Cache::default), TransmissionParams::default(), 5)
    }

    fn client_req(method: DocMethod, mid: u16) -> CoapMessage {
        let q = DnsMessage::query("example.org".parse().unwrap(), RecordType::AAAA, 0);
        let cfg = DocClientConfig { method, proxy_uri: Some("coap://resolver".into()), ..Default::default() };
        let mut r = build_request(&q, &cfg).unwrap();
        r.token = vec![mid as u8];
        r.message_id = mid;
        r
    }

    fn drain(p: &mut ForwardProxy<u8>) -> Vec<(u8, CoapMessage)> {
        std::iter::from_fn(|| p.poll_transmit()).map(|t| (t.peer, CoapMessage::decode(&t.bytes).unwrap())).collect()
    }

    fn upstream_answer(req: &CoapMessage, code: Code, max_age: u32, tag: u8) -> Vec<u8> {
        let mut r = CoapMessage::response_to(req, code);
        r.add_uint_option(option::MAX_AGE, max_age);
        r.add_option(option::ETAG, vec![tag; 8]);
        if code == Code::CONTENT {
            r.payload = vec![0xee; 70];
        }
        r.encode()
    }

    const S: fn(u64) -> Duration = Duration::from_secs;

    #[test]
    fn miss_then_fresh_hit_without_upstream() {
        let mut p = proxy(true);
        p.handle_datagram(1, &client_req(DocMethod::Fetch, 1).encode(), S(0));
        let out = drain(&mut p);
        assert_eq!(out.len(), 1);
        let (to, fwd) = &out[0];
        assert_eq!(*to, UP);
        assert!(fwd.option(option::PROXY_URI).is_none());
        assert_eq!(fwd.uri_path(), "/dns");
        p.handle_datagram(UP, &upstream_answer(fwd, Code::CONTENT, 60, 1), S(0));
        let out = drain(&mut p);
        assert_eq!(out[0].0, 1);
        assert_eq!(out[0].1.code, Code::CONTENT);

        p.handle_datagram(2, &client_req(DocMethod::Fetch, 2).encode(), S(15));
        let out = drain(&mut p);
        assert_eq!(out.len(), 1, "no upstream message on a fresh hit");
        assert_eq!(out[0].0, 2);
        assert_eq!(out[0].1.max_age(), Some(45));
        assert_eq!(out[0].1.payload, vec![0xee; 70]);
        let ev: Vec<_> = std::iter::from_fn(|| p.poll_cache_event()).collect();
        assert_eq!(ev, [CacheEventKind::Miss, CacheEventKind::Hit]);
    }

    #[test]
    fn stale_revalidation_ok_serves_cached_payload() {
        let mut p = proxy(true);
        p.handle_datagram(1, &client_req(DocMethod::Fetch, 1).encode(), S(0));
        let fwd = drain(&mut p).remove(0).1;
        p.handle_datagram(UP, &upstream_answer(&fwd, Code::CONTENT, 5, 1), S(0));
        drain(&mut p);
        p.handle_datagram(1, &client_req(DocMethod::Fetch, 2).encode(), S(10));
        let fwd = drain(&mut p).remove(0).1;
        assert_eq!(fwd.option(option::ETAG), Some(&[1u8; 8][..]));
        p.handle_datagram(UP, &upstream_answer(&fwd, Code::VALID, 7, 1), S(10));
        let (_, served) = drain(&mut p).remove(0);
        assert_eq!(served.code, Code::CONTENT);
        assert_eq!(served.payload, vec![0xee; 70]);
        assert_eq!(served.max_age(), Some(7));
        let ev: Vec<_> = std::iter::from_fn(|| p.poll_cache_event()).collect();
        assert_eq!(ev, [CacheEventKind::Miss, CacheEventKind::StaleHit, CacheEventKind::RevalidationOk]);
    }

    #[test]
    fn stale_revalidation_full() {
        let mut p = proxy(true);
        p.handle_datagram(1, &client_req(DocMethod::Fetch, 1).encode(), S(0));
        let fwd = drain(&mut p).remove(0).1;
        p.handle_datagram(UP, &upstream_answer(&fwd, Code::CONTENT, 5, 1), S(0));
        drain(&mut p);
        p.handle_datagram(1, &client_req(DocMethod::Fetch, 2).encode(), S(10));
        let fwd = drain(&mut p).remove(0).1;
        p.handle_datagram(UP, &upstream_answer(&fwd, Code::CONTENT, 9, 2), S(10));
        drain(&mut p);
        assert_eq!(p.poll_cache_event(), Some(CacheEventKind::Miss));
        assert_eq!(p.poll_cache_event(), Some(CacheEventKind::StaleHit));
        assert_eq!(p.poll_cache_event(), Some(CacheEventKind::RevalidationFull));
    }

    #[test]
    fn post_passes_through_without_state() {
        let mut p = proxy(true);
        for mid in 1..3 {
            p.handle_datagram(1, &client_req(DocMethod::Post, mid).encode(), S(0));
            let fwd = drain(&mut p).remove(0).1;
            assert_eq!(fwd.code, Code::POST);
            p.handle_datagram(UP, &upstream_answer(&fwd, Code::CONTENT, 60, 1), S(0));
            drain(&mut p);
        }
        assert!(p.cache().unwrap().is_empty());
        assert_eq!(p.poll_cache_event(), None);
        assert_eq!(p.stats().forwarded, 2);
    }

    #[test]
    fn coalesces_concurrent_requests() {
        let mut p = proxy(true);
        p.handle_datagram(1, &client_req(DocMethod::Fetch, 1).encode(), S(0));
        p.handle_datagram(2, &client_req(DocMethod::Fetch, 2).encode(), S(0));
        let out = drain(&mut p);
        assert_eq!(out.len(), 1);
        p.handle_datagram(UP, &upstream_answer(&out[0].1, Code::CONTENT, 60, 1), S(0));
        let out = drain(&mut p);
        assert_eq!(out.iter().map(|(to, _)| *to).collect::<Vec<_>>(), [1, 2]);
        assert_eq!(out[1].1.token, vec![2]);
    }

    #[test]
    fn errors() {
        let mut p = proxy(false);
        let mut bad = client_req(DocMethod::Fetch, 1);
        bad.set_option(option::PROXY_URI, b"http://x".to_vec());
        p.handle_datagram(1, &bad.encode(), S(0));
        assert_eq!(drain(&mut p)[0].1.code, Code::BAD_OPTION);

        p.handle_datagram(1, &client_req(DocMethod::Fetch, 2).encode(), S(0));
        drain(&mut p);
        let mut out = Vec::new();
        while let Some(t) = p.poll_timeout() {
            p.handle_timeout(t);
            out.extend(drain(&mut p));
        }
        assert!(out.iter().any(|(to, m)| *to == 1 && m.code == Code::GATEWAY_TIMEOUT));
    }

    #[test]
    fn client_etag_answered_with_valid() {
        let mut p = proxy(true);
        p.handle_datagram(1, &client_req(DocMethod::Fetch, 1).encode(), S(0));
        let fwd = drain(&mut p).remove(0).1;
        p.handle_datagram(UP, &upstream_answer(&fwd, Code::CONTENT, 60, 1), S(0));
        drain(&mut p);
        let mut r = client_req(DocMethod::Fetch, 2);
        r.add_option(option::ETAG, vec![1; 8]);
        p.handle_datagram(2, &r.encode(), S(1));
        let (_, resp) = drain(&mut p).remove(0);
        assert_eq!(resp.code, Code::VALID);
        assert!(resp.payload.is_empty());
        assert_eq!(resp.max_age(), Some(59));
    }
}

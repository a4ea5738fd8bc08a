//! Sans-IO CoAP messaging layer: message IDs, tokens, confirmable
//! retransmission, duplicate detection and request/response matching.
//!
//! The endpoint never touches a socket or a clock. Datagrams go in through
//! [`Endpoint::handle_datagram`], timers through [`Endpoint::handle_timeout`],
//! and everything it wants to send is drained from [`Endpoint::poll_transmit`].

use std::collections::{HashMap, VecDeque};
use std::fmt::Debug;
use std::hash::Hash;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::reliability::{ExchangeEvent, ExchangeState, FailCause, StepOutcome, TransmissionParams};
use super::{CoapMessage, Code, MessageType};

/// Number of recently received confirmable messages remembered per endpoint.
pub const DEDUP_ENTRIES: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transmit<P> {
    pub peer: P,
    pub bytes: Vec<u8>,
    /// Retransmission index (1-based) when this is a retransmission.
    pub retransmission: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EndpointEvent<P> {
    Request { peer: P, msg: CoapMessage },
    Response { peer: P, msg: CoapMessage },
    Retransmitted { peer: P, token: Vec<u8>, attempt: u32, offset: Duration },
    Failed { peer: P, token: Vec<u8>, cause: FailCause },
}

#[derive(Debug)]
struct Outgoing<P> {
    peer: P,
    state: ExchangeState,
}

#[derive(Debug)]
struct Seen<P> {
    peer: P,
    message_id: u16,
    at: Duration,
    response: Option<Vec<u8>>,
}

#[derive(Debug)]
pub struct Endpoint<P> {
    params: TransmissionParams,
    rng: ChaCha8Rng,
    next_mid: u16,
    next_token: u16,
    outgoing: Vec<Outgoing<P>>,
    /// Tokens whose request was acknowledged empty; a separate response is due.
    awaiting: HashMap<(P, Vec<u8>), Duration>,
    seen: VecDeque<Seen<P>>,
    transmits: VecDeque<Transmit<P>>,
    events: VecDeque<EndpointEvent<P>>,
}

impl<P: Clone + Eq + Hash + Debug> Endpoint<P> {
    pub fn new(params: TransmissionParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let next_mid = rng.gen();
        let next_token = rng.gen();
        Endpoint {
            params,
            rng,
            next_mid,
            next_token,
            outgoing: Vec::new(),
            awaiting: HashMap::new(),
            seen: VecDeque::new(),
            transmits: VecDeque::new(),
            events: VecDeque::new(),
        }
    }

    pub fn params(&self) -> &TransmissionParams {
        &self.params
    }

    pub fn next_token(&mut self) -> Vec<u8> {
        let t = self.next_token;
        self.next_token = self.next_token.wrapping_add(1);
        t.to_be_bytes().to_vec()
    }

    fn next_message_id(&mut self) -> u16 {
        let m = self.next_mid;
        self.next_mid = self.next_mid.wrapping_add(1);
        m
    }

    /// Sends a request. A token is assigned when the message has none.
    /// Returns the token used.
    pub fn send_request(&mut self, peer: P, mut msg: CoapMessage, now: Duration) -> Vec<u8> {
        if msg.token.is_empty() {
            msg.token = self.next_token();
        }
        msg.message_id = self.next_message_id();
        let bytes = msg.encode();
        if msg.mtype == MessageType::Confirmable {
            let initial = self.params.initial_timeout(&mut self.rng);
            let state = ExchangeState::new(
                msg.token.clone(),
                msg.message_id,
                bytes.clone(),
                initial,
                self.params.max_retransmit,
                now,
            );
            self.outgoing.push(Outgoing { peer: peer.clone(), state });
        } else {
            let wait = self.params.max_transmit_wait();
            self.awaiting.insert((peer.clone(), msg.token.clone()), now + wait);
        }
        self.transmits.push_back(Transmit { peer, bytes, retransmission: None });
        msg.token
    }

    /// Answers a request delivered by [`EndpointEvent::Request`]. Confirmable
    /// requests get a piggybacked response in the acknowledgement.
    pub fn respond(&mut self, peer: P, request: &CoapMessage, mut response: CoapMessage, now: Duration) {
        response.token = request.token.clone();
        if request.mtype == MessageType::Confirmable {
            response.mtype = MessageType::Acknowledgement;
            response.message_id = request.message_id;
        } else {
            response.mtype = MessageType::NonConfirmable;
            response.message_id = self.next_message_id();
        }
        let bytes = response.encode();
        if let Some(seen) = self
            .seen
            .iter_mut()
            .find(|s| s.peer == peer && s.message_id == request.message_id)
        {
            seen.response = Some(bytes.clone());
            seen.at = now;
        }
        self.transmits.push_back(Transmit { peer, bytes, retransmission: None });
    }

    /// Drops any pending exchange for `token` without reporting it.
    pub fn cancel(&mut self, peer: &P, token: &[u8]) {
        self.outgoing.retain(|o| !(o.peer == *peer && o.state.token == token));
        self.awaiting.remove(&(peer.clone(), token.to_vec()));
    }

    pub fn has_pending(&self) -> bool {
        !self.outgoing.is_empty() || !self.awaiting.is_empty()
    }

    pub fn handle_datagram(&mut self, peer: P, bytes: &[u8], now: Duration) {
        let msg = match CoapMessage::decode(bytes) {
            Ok(m) => m,
            Err(e) => {
                log::debug!("dropping undecodable datagram from {peer:?}: {e}");
                return;
            }
        };
        self.expire_seen(now);
        match msg.mtype {
            MessageType::Acknowledgement | MessageType::Reset => self.handle_reply(peer, msg, now),
            MessageType::Confirmable | MessageType::NonConfirmable => {
                if msg.code.is_request() {
                    self.handle_request(peer, msg, now);
                } else if msg.code.is_response() {
                    self.handle_separate_response(peer, msg);
                } else if msg.mtype == MessageType::Confirmable {
                    // CoAP ping
                    self.transmits.push_back(Transmit { peer, bytes: CoapMessage::reset(msg.message_id).encode(), retransmission: None });
                }
            }
        }
    }

    fn handle_request(&mut self, peer: P, msg: CoapMessage, now: Duration) {
        if msg.mtype == MessageType::Confirmable {
            if let Some(seen) = self.seen.iter().find(|s| s.peer == peer && s.message_id == msg.message_id) {
                if let Some(resp) = &seen.response {
                    self.transmits.push_back(Transmit { peer, bytes: resp.clone(), retransmission: None });
                }
                return;
            }
            if self.seen.len() == DEDUP_ENTRIES {
                self.seen.pop_front();
            }
            self.seen.push_back(Seen { peer: peer.clone(), message_id: msg.message_id, at: now, response: None });
        }
        self.events.push_back(EndpointEvent::Request { peer, msg });
    }

    fn handle_reply(&mut self, peer: P, msg: CoapMessage, now: Duration) {
        let Some(idx) = self
            .outgoing
            .iter()
            .position(|o| o.peer == peer && o.state.message_id == msg.message_id)
        else {
            return;
        };
        if !msg.is_empty() && msg.token != self.outgoing[idx].state.token {
            return;
        }
        let mut out = self.outgoing.swap_remove(idx);
        if msg.mtype == MessageType::Reset {
            out.state.step(ExchangeEvent::Reset, now);
            self.events.push_back(EndpointEvent::Failed { peer, token: out.state.token, cause: FailCause::Reset });
            return;
        }
        out.state.step(ExchangeEvent::Ack, now);
        if msg.is_empty() {
            let wait = self.params.max_transmit_wait();
            self.awaiting.insert((peer, out.state.token), now + wait);
        } else {
            self.events.push_back(EndpointEvent::Response { peer, msg });
        }
    }

    fn handle_separate_response(&mut self, peer: P, msg: CoapMessage) {
        if msg.mtype == MessageType::Confirmable {
            self.transmits.push_back(Transmit {
                peer: peer.clone(),
                bytes: CoapMessage::empty_ack(msg.message_id).encode(),
                retransmission: None,
            });
        }
        if self.awaiting.remove(&(peer.clone(), msg.token.clone())).is_some() {
            self.events.push_back(EndpointEvent::Response { peer, msg });
        } else if let Some(idx) = self.outgoing.iter().position(|o| o.peer == peer && o.state.token == msg.token) {
            // response overtook the acknowledgement
            self.outgoing.swap_remove(idx);
            self.events.push_back(EndpointEvent::Response { peer, msg });
        }
    }

    fn expire_seen(&mut self, now: Duration) {
        let lifetime = self.params.exchange_lifetime();
        while self.seen.front().is_some_and(|s| s.at + lifetime <= now) {
            self.seen.pop_front();
        }
    }

    pub fn poll_timeout(&self) -> Option<Duration> {
        let a = self.outgoing.iter().filter_map(|o| o.state.deadline()).min();
        let b = self.awaiting.values().copied().min();
        a.into_iter().chain(b).min()
    }

    pub fn handle_timeout(&mut self, now: Duration) {
        let mut i = 0;
        while i < self.outgoing.len() {
            match self.outgoing[i].state.step(ExchangeEvent::Timeout, now) {
                StepOutcome::Retransmit(bytes) => {
                    let o = &self.outgoing[i];
                    let attempt = o.state.retransmissions();
                    self.events.push_back(EndpointEvent::Retransmitted {
                        peer: o.peer.clone(),
                        token: o.state.token.clone(),
                        attempt,
                        offset: now - o.state.started(),
                    });
                    self.transmits.push_back(Transmit { peer: o.peer.clone(), bytes, retransmission: Some(attempt) });
                    i += 1;
                }
                StepOutcome::Fail(cause) => {
                    let o = self.outgoing.swap_remove(i);
                    self.events.push_back(EndpointEvent::Failed { peer: o.peer, token: o.state.token, cause });
                }
                _ => i += 1,
            }
        }
        let mut expired: Vec<(P, Vec<u8>)> =
            self.awaiting.iter().filter(|(_, &d)| d <= now).map(|(k, _)| k.clone()).collect();
        expired.sort_by(|a, b| a.1.cmp(&b.1));
        for key in expired {
            self.awaiting.remove(&key);
            self.events.push_back(EndpointEvent::Failed { peer: key.0, token: key.1, cause: FailCause::Timeout });
        }
    }

    pub fn poll_transmit(&mut self) -> Option<Transmit<P>> {
        self.transmits.pop_front()
    }

    pub fn poll_event(&mut self) -> Option<EndpointEvent<P>> {
        self.events.pop_front()
    }
}

/// A 4.xx/5.xx response that also works as a direct reply to a request.
pub fn error_response(req: &CoapMessage, code: Code) -> CoapMessage {
    CoapMessage::response_to(req, code)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coap::option;

    fn drain<P: Clone + Eq + Hash + Debug>(ep: &mut Endpoint<P>) -> Vec<Transmit<P>> {
        std::iter::from_fn(|| ep.poll_transmit()).collect()
    }

    fn request() -> CoapMessage {
        let mut m = CoapMessage::request(Code::FETCH);
        m.set_uri_path("/dns");
        m.payload = vec![1, 2, 3];
        m
    }

    #[test]
    fn piggybacked_exchange() {
        let mut client: Endpoint<u8> = Endpoint::new(TransmissionParams::default(), 1);
        let mut server: Endpoint<u8> = Endpoint::new(TransmissionParams::default(), 2);
        let token = client.send_request(0, request(), Duration::ZERO);
        assert_eq!(token.len(), 2);
        let tx = drain(&mut client);
        assert_eq!(tx.len(), 1);
        server.handle_datagram(1, &tx[0].bytes, Duration::from_millis(10));
        let Some(EndpointEvent::Request { peer, msg }) = server.poll_event() else { panic!() };
        let mut resp = CoapMessage::response_to(&msg, Code::CONTENT);
        resp.payload = b"ok".to_vec();
        server.respond(peer, &msg, resp, Duration::from_millis(10));
        let rx = drain(&mut server);
        client.handle_datagram(0, &rx[0].bytes, Duration::from_millis(20));
        let Some(EndpointEvent::Response { msg, .. }) = client.poll_event() else { panic!() };
        assert_eq!(msg.token, token);
        assert_eq!(msg.payload, b"ok");
        assert!(!client.has_pending());
        assert_eq!(client.poll_timeout(), None);
    }

    #[test]
    fn retransmissions_are_identical_and_fail_after_budget() {
        let p = TransmissionParams { random_factor: 1.0, ..Default::default() };
        let mut client: Endpoint<u8> = Endpoint::new(p, 3);
        let token = client.send_request(0, request(), Duration::ZERO);
        let first = drain(&mut client).remove(0).bytes;
        let mut offsets = Vec::new();
        while let Some(t) = client.poll_timeout() {
            client.handle_timeout(t);
            for tx in drain(&mut client) {
                assert_eq!(tx.bytes, first);
            }
            while let Some(ev) = client.poll_event() {
                match ev {
                    EndpointEvent::Retransmitted { attempt, offset, .. } => offsets.push((attempt, offset.as_secs())),
                    EndpointEvent::Failed { token: t, cause, .. } => {
                        assert_eq!(t, token);
                        assert_eq!(cause, FailCause::Timeout);
                    }
                    other => panic!("{other:?}"),
                }
            }
        }
        assert_eq!(offsets, [(1, 2), (2, 6), (3, 14), (4, 30)]);
    }

    #[test]
    fn duplicate_request_gets_cached_response() {
        let mut server: Endpoint<u8> = Endpoint::new(TransmissionParams::default(), 4);
        let mut req = request();
        req.token = vec![7];
        req.message_id = 99;
        let bytes = req.encode();
        server.handle_datagram(5, &bytes, Duration::ZERO);
        let Some(EndpointEvent::Request { msg, .. }) = server.poll_event() else { panic!() };
        server.respond(5, &msg, CoapMessage::response_to(&msg, Code::CONTENT), Duration::ZERO);
        let original = drain(&mut server);
        server.handle_datagram(5, &bytes, Duration::from_secs(3));
        assert!(server.poll_event().is_none());
        assert_eq!(drain(&mut server), original);
        // same message ID from another peer is a new request
        server.handle_datagram(6, &bytes, Duration::from_secs(3));
        assert!(matches!(server.poll_event(), Some(EndpointEvent::Request { peer: 6, .. })));
    }

    #[test]
    fn separate_response_after_empty_ack() {
        let mut client: Endpoint<u8> = Endpoint::new(TransmissionParams::default(), 5);
        let token = client.send_request(0, request(), Duration::ZERO);
        let sent = CoapMessage::decode(&drain(&mut client)[0].bytes).unwrap();
        client.handle_datagram(0, &CoapMessage::empty_ack(sent.message_id).encode(), Duration::from_millis(5));
        assert!(client.poll_event().is_none());
        let mut resp = CoapMessage::new(MessageType::Confirmable, Code::CONTENT);
        resp.token = token.clone();
        resp.message_id = 1234;
        resp.add_uint_option(option::MAX_AGE, 5);
        client.handle_datagram(0, &resp.encode(), Duration::from_secs(5));
        let acks = drain(&mut client);
        assert_eq!(CoapMessage::decode(&acks[0].bytes).unwrap(), CoapMessage::empty_ack(1234));
        assert!(matches!(client.poll_event(), Some(EndpointEvent::Response { .. })));
        assert!(!client.has_pending());
    }

    #[test]
    fn reset_fails_exchange() {
        let mut client: Endpoint<u8> = Endpoint::new(TransmissionParams::default(), 6);
        client.send_request(0, request(), Duration::ZERO);
        let sent = CoapMessage::decode(&drain(&mut client)[0].bytes).unwrap();
        client.handle_datagram(0, &CoapMessage::reset(sent.message_id).encode(), Duration::from_millis(1));
        assert!(matches!(client.poll_event(), Some(EndpointEvent::Failed { cause: FailCause::Reset, .. })));
    }

    #[test]
    fn dedup_window_is_bounded() {
        let mut server: Endpoint<u8> = Endpoint::new(TransmissionParams::default(), 7);
        for mid in 0..(DEDUP_ENTRIES as u16 + 1) {
            let mut r = request();
            r.message_id = mid;
            server.handle_datagram(1, &r.encode(), Duration::ZERO);
        }
        let mut first = request();
        first.message_id = 0;
        server.handle_datagram(1, &first.encode(), Duration::ZERO);
        let delivered = std::iter::from_fn(|| server.poll_event()).count();
        assert_eq!(delivered, DEDUP_ENTRIES + 2);
    }
}

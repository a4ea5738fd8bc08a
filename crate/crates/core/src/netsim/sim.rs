use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use super::metrics::{CacheEventRecord, LinkStats, LogEvent, Metrics, QueryRecord, RetransmissionRecord};
use super::{stream_seed, Forwarder, LinkModel, NetsimError, Scenario, Transport};
use crate::cache::{Cache, ForwardProxy};
use crate::coap::{ExchangeEvent, ExchangeState, StepOutcome, Transmit, TransmissionParams};
use crate::dns::{build_response, encode_query, DnsMessage, DnsName, DnsQuestion, RecordType};
use crate::doc::{
    resolver::TtlPolicy, AnswerSource, ClientError, ClientEvent, DnsCache, DocClient, DocClientConfig, DocServer, QueryId,
    Resolver, ServeOptions, SyntheticResolver,
};
use crate::oscore::{ReplayWindow, SecurityContext};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub(crate) enum Node {
    Client(u8),
    Forwarder,
    BorderRouter,
    Resolver,
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Client(i) => write!(f, "C{}", i + 1),
            Node::Forwarder => f.write_str("F"),
            Node::BorderRouter => f.write_str("BR"),
            Node::Resolver => f.write_str("R"),
        }
    }
}

const PROXY_URI: &str = "coap://resolver";
const MASTER_SECRET: &[u8] = b"netsim master secret";
const SERVER_ID: &[u8] = b"";

#[derive(Clone, Debug)]
struct Datagram {
    src: Node,
    dst: Node,
    bytes: Vec<u8>,
}

#[derive(Debug)]
enum Action {
    Issue { client: usize, index: usize },
    Deliver { at: Node, dgram: Datagram },
    Wake { node: Node },
}

struct Event {
    time: Duration,
    seq: u64,
    action: Action,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so the heap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

struct Link {
    model: LinkModel,
    stats: LinkStats,
    rng: ChaCha8Rng,
    busy_until: Duration,
}

/// Plain DNS stub with CoAP-style retransmission, used for UDP and DTLS.
struct DnsClient {
    server: Node,
    params: TransmissionParams,
    rng: ChaCha8Rng,
    next_dns_id: u16,
    next_query: QueryId,
    cache: Option<DnsCache>,
    pending: BTreeMap<u16, (QueryId, DnsQuestion, ExchangeState)>,
    transmits: VecDeque<Transmit<Node>>,
    events: VecDeque<ClientEvent>,
}

impl DnsClient {
    fn query(&mut self, name: DnsName, rtype: RecordType, now: Duration) -> QueryId {
        let id = self.next_query;
        self.next_query += 1;
        if let Some(hit) = self.cache.as_mut().and_then(|c| c.lookup(&name, rtype, now)) {
            self.events.push_back(ClientEvent::Resolved {
                id,
                response: hit,
                source: AnswerSource::DnsCache,
                elapsed: Duration::ZERO,
            });
            return id;
        }
        let mut dns_id = self.next_dns_id;
        while self.pending.contains_key(&dns_id) {
            dns_id = dns_id.wrapping_add(1);
        }
        self.next_dns_id = dns_id.wrapping_add(1);
        let bytes = encode_query(&name, rtype, dns_id);
        let timeout = self.params.initial_timeout(&mut self.rng);
        let ex = ExchangeState::new(Vec::new(), dns_id, bytes.clone(), timeout, self.params.max_retransmit, now);
        self.pending.insert(dns_id, (id, DnsQuestion::new(name, rtype), ex));
        self.transmits.push_back(Transmit { peer: self.server, bytes, retransmission: None });
        id
    }

    fn handle_datagram(&mut self, bytes: &[u8], now: Duration) {
        let Ok(msg) = DnsMessage::decode(bytes) else { return };
        if !msg.is_response() {
            return;
        }
        let Some((_, question, _)) = self.pending.get(&msg.id) else { return };
        if msg.question.as_ref() != Some(question) {
            return;
        }
        let (id, _, ex) = self.pending.remove(&msg.id).expect("pending");
        if let Some(cache) = self.cache.as_mut() {
            cache.insert(&msg, now);
        }
        self.events.push_back(ClientEvent::Resolved {
            id,
            response: msg,
            source: AnswerSource::Network,
            elapsed: now - ex.started(),
        });
    }

    fn poll_timeout(&self) -> Option<Duration> {
        self.pending.values().filter_map(|(_, _, ex)| ex.deadline()).min()
    }

    fn handle_timeout(&mut self, now: Duration) {
        let mut done = Vec::new();
        for (&dns_id, (id, _, ex)) in self.pending.iter_mut() {
            match ex.step(ExchangeEvent::Timeout, now) {
                StepOutcome::Retransmit(bytes) => {
                    let attempt = ex.retransmissions();
                    self.transmits.push_back(Transmit { peer: self.server, bytes, retransmission: Some(attempt) });
                    self.events.push_back(ClientEvent::Retransmitted { id: *id, attempt, offset: now - ex.started() });
                }
                StepOutcome::Fail(_) => {
                    self.events.push_back(ClientEvent::Failed {
                        id: *id,
                        error: ClientError::Timeout,
                        elapsed: now - ex.started(),
                    });
                    done.push(dns_id);
                }
                StepOutcome::Continue | StepOutcome::Complete => {}
            }
        }
        for id in done {
            self.pending.remove(&id);
        }
    }
}

enum ClientApp {
    Doc(Box<DocClient<Node>>),
    Dns(Box<DnsClient>),
}

enum ForwarderApp {
    Opaque,
    Proxy(Box<ForwardProxy<Node>>),
}

enum ResolverApp {
    Doc(Box<DocServer<Node, SyntheticResolver>>),
    Dns(SyntheticResolver, VecDeque<Transmit<Node>>),
}

struct ClientState {
    app: ClientApp,
    /// Workload index of each outstanding query.
    queries: HashMap<QueryId, usize>,
    /// Offset of this client's records in `Metrics::queries`.
    base: usize,
    plan: Vec<(Duration, DnsName)>,
}

struct Sim {
    scenario: Scenario,
    now: Duration,
    seq: u64,
    queue: BinaryHeap<Event>,
    wakes: HashMap<Node, Duration>,
    links: Vec<Link>,
    clients: Vec<ClientState>,
    forwarder: ForwarderApp,
    resolver: ResolverApp,
    metrics: Metrics,
}

/// Executes `scenario` to completion.
pub fn run(scenario: &Scenario) -> Result<Metrics, NetsimError> {
    scenario.validate()?;
    let mut sim = Sim::new(scenario.clone())?;
    sim.execute()?;
    Ok(sim.finish())
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn generate_names(scenario: &Scenario) -> Vec<DnsName> {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    let w = &scenario.workload;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(scenario.seed, "names", 0));
    // <label>.<label>.de with the two labels sharing the remaining length
    let body = w.name_len - 4;
    let (a, b) = (body.div_ceil(2), body / 2);
    let mut seen = HashSet::new();
    let mut names = Vec::with_capacity(w.names);
    while names.len() < w.names {
        let mut label = |n: usize| -> String { (0..n).map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())] as char).collect() };
        let text = format!("{}.{}.de", label(a), label(b));
        if seen.insert(text.clone()) {
            names.push(text.parse().expect("generated name is valid"));
        }
    }
    names
}

fn plan_queries(scenario: &Scenario, names: &[DnsName], client: usize) -> Vec<(Duration, DnsName)> {
    let w = &scenario.workload;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(scenario.seed, "workload", client as u64));
    let gap = Exp::new(w.rate).expect("validated rate");
    let picks: Vec<DnsName> = if names.len() >= w.n_queries {
        let mut order: Vec<&DnsName> = names.iter().collect();
        order.shuffle(&mut rng);
        order.into_iter().take(w.n_queries).cloned().collect()
    } else {
        (0..w.n_queries).map(|_| names[rng.gen_range(0..names.len())].clone()).collect()
    };
    let mut t = 0.0;
    picks
        .into_iter()
        .map(|name| {
            t += gap.sample(&mut rng);
            (Duration::from_secs_f64(t), name)
        })
        .collect()
}

fn client_id(i: usize) -> Vec<u8> {
    vec![i as u8 + 1]
}

impl Sim {
    fn new(scenario: Scenario) -> Result<Self, NetsimError> {
        let s = &scenario;
        let seed = s.seed;
        let resolver = SyntheticResolver {
            records: s.workload.records,
            policy: TtlPolicy { ttl_min: s.workload.ttl_min, ttl_max: s.workload.ttl_max },
            seed: stream_seed(seed, "ttl", 0),
        };
        let names = generate_names(s);
        let server_node = match s.forwarder {
            Forwarder::Opaque => Node::Resolver,
            Forwarder::Proxy => Node::Forwarder,
        };

        let mut links = Vec::new();
        for i in 0..=s.clients {
            let (name, hop) = if i < s.clients { (format!("C{}-F", i + 1), 2) } else { ("F-BR".to_string(), 1) };
            links.push(Link {
                model: s.link,
                stats: LinkStats { link: name, hop, ..Default::default() },
                rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, "loss", i as u64)),
                busy_until: Duration::ZERO,
            });
        }

        let mut clients = Vec::new();
        for i in 0..s.clients {
            let app_seed = stream_seed(seed, "client", i as u64);
            let app = if s.transport.is_coap() {
                let cfg = DocClientConfig {
                    method: s.method,
                    format: s.format,
                    scheme: s.scheme,
                    proxy_uri: (s.forwarder == Forwarder::Proxy).then(|| PROXY_URI.to_string()),
                    block_size: s.block_size,
                    ..Default::default()
                };
                let mut c = DocClient::new(server_node, cfg, s.coap, app_seed)
                    .map_err(|e| NetsimError::Config(e.to_string()))?;
                if s.client_coap_cache {
                    c = c.with_coap_cache(Cache::default());
                }
                if s.client_dns_cache {
                    c = c.with_dns_cache();
                }
                if s.transport == Transport::Oscore {
                    let ctx = SecurityContext::derive(MASTER_SECRET, b"", &client_id(i), SERVER_ID)
                        .map_err(|e| NetsimError::Config(e.to_string()))?;
                    c = c.with_oscore(ctx);
                }
                ClientApp::Doc(Box::new(c))
            } else {
                ClientApp::Dns(Box::new(DnsClient {
                    server: Node::Resolver,
                    params: s.coap,
                    rng: ChaCha8Rng::seed_from_u64(app_seed),
                    next_dns_id: 1,
                    next_query: 0,
                    cache: s.client_dns_cache.then(DnsCache::new),
                    pending: BTreeMap::new(),
                    transmits: VecDeque::new(),
                    events: VecDeque::new(),
                }))
            };
            clients.push(ClientState {
                app,
                queries: HashMap::new(),
                base: i * s.workload.n_queries,
                plan: plan_queries(s, &names, i),
            });
        }

        let forwarder = match s.forwarder {
            Forwarder::Opaque => ForwarderApp::Opaque,
            Forwarder::Proxy => ForwarderApp::Proxy(Box::new(ForwardProxy::new(
                Node::Resolver,
                s.proxy_cache.then(Cache::default),
                s.coap,
                stream_seed(seed, "proxy", 0),
            ))),
        };

        let resolver = if s.transport.is_coap() {
            let opts = ServeOptions { scheme: s.scheme, block_size: s.block_size, ..Default::default() };
            let mut server = DocServer::new(resolver, opts, s.coap, stream_seed(seed, "server", 0));
            if s.transport == Transport::Oscore {
                let mut contexts = Vec::new();
                for i in 0..s.clients {
                    let window = if s.include_echo {
                        ReplayWindow::unsynchronized(s.replay_window)
                    } else {
                        ReplayWindow::new(s.replay_window)
                    };
                    let ctx = SecurityContext::derive(MASTER_SECRET, b"", SERVER_ID, &client_id(i))
                        .map_err(|e| NetsimError::Config(e.to_string()))?
                        .with_replay_window(window);
                    contexts.push(ctx);
                }
                server = server.with_oscore(contexts);
            }
            ResolverApp::Doc(Box::new(server))
        } else {
            ResolverApp::Dns(resolver, VecDeque::new())
        };

        let mut queries = Vec::new();
        for (i, c) in clients.iter().enumerate() {
            for (index, (at, name)) in c.plan.iter().enumerate() {
                queries.push(QueryRecord {
                    client: Node::Client(i as u8).to_string(),
                    index,
                    name: name.to_string(),
                    issued: secs(*at),
                    resolution: None,
                    source: None,
                    error: None,
                });
            }
        }
        let metrics = Metrics { scenario: s.name.clone(), seed, queries, ..Default::default() };

        let mut sim = Sim {
            scenario,
            now: Duration::ZERO,
            seq: 0,
            queue: BinaryHeap::new(),
            wakes: HashMap::new(),
            links,
            clients,
            forwarder,
            resolver,
            metrics,
        };
        for client in 0..sim.clients.len() {
            for index in 0..sim.clients[client].plan.len() {
                let at = sim.clients[client].plan[index].0;
                sim.push(at, Action::Issue { client, index });
            }
        }
        Ok(sim)
    }

    fn push(&mut self, time: Duration, action: Action) {
        self.seq += 1;
        self.queue.push(Event { time, seq: self.seq, action });
    }

    fn execute(&mut self) -> Result<(), NetsimError> {
        while let Some(ev) = self.queue.pop() {
            if ev.time > self.scenario.horizon {
                break;
            }
            self.now = ev.time;
            match ev.action {
                Action::Issue { client, index } => self.issue(client, index)?,
                Action::Deliver { at, dgram } => self.deliver(at, dgram)?,
                Action::Wake { node } => {
                    if self.wakes.get(&node) == Some(&ev.time) {
                        self.wakes.remove(&node);
                        self.handle_timeout(node);
                        self.flush(node)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn finish(mut self) -> Metrics {
        self.metrics.links = self.links.into_iter().map(|l| l.stats).collect();
        self.metrics.end_time = secs(self.now);
        self.metrics
    }

    fn issue(&mut self, client: usize, index: usize) -> Result<(), NetsimError> {
        let now = self.now;
        let rtype = self.scenario.workload.rtype;
        let c = &mut self.clients[client];
        let name = c.plan[index].1.clone();
        self.metrics.events.push(LogEvent::Query {
            t: secs(now),
            client: Node::Client(client as u8).to_string(),
            query: index,
            name: name.to_string(),
        });
        let id = match &mut c.app {
            ClientApp::Doc(d) => d.query(name, rtype, now),
            ClientApp::Dns(d) => d.query(name, rtype, now),
        };
        c.queries.insert(id, index);
        self.flush(Node::Client(client as u8))
    }

    fn deliver(&mut self, at: Node, dgram: Datagram) -> Result<(), NetsimError> {
        if at != dgram.dst {
            return self.route(at, dgram);
        }
        let now = self.now;
        match at {
            Node::Client(i) => match &mut self.clients[i as usize].app {
                ClientApp::Doc(d) => d.handle_datagram(dgram.src, &dgram.bytes, now),
                ClientApp::Dns(d) => d.handle_datagram(&dgram.bytes, now),
            },
            Node::Forwarder => match &mut self.forwarder {
                ForwarderApp::Proxy(p) => p.handle_datagram(dgram.src, &dgram.bytes, now),
                ForwarderApp::Opaque => return self.route(at, dgram),
            },
            Node::BorderRouter => return self.route(at, dgram),
            Node::Resolver => match &mut self.resolver {
                ResolverApp::Doc(s) => s.handle_datagram(dgram.src, &dgram.bytes, now),
                ResolverApp::Dns(resolver, out) => {
                    if let Some(reply) = answer_plain(resolver, &dgram.bytes, now) {
                        out.push_back(Transmit { peer: dgram.src, bytes: reply, retransmission: None });
                    }
                }
            },
        }
        self.flush(at)
    }

    fn handle_timeout(&mut self, node: Node) {
        let now = self.now;
        match node {
            Node::Client(i) => match &mut self.clients[i as usize].app {
                ClientApp::Doc(d) => d.handle_timeout(now),
                ClientApp::Dns(d) => d.handle_timeout(now),
            },
            Node::Forwarder => {
                if let ForwarderApp::Proxy(p) = &mut self.forwarder {
                    p.handle_timeout(now);
                }
            }
            Node::Resolver => {
                if let ResolverApp::Doc(s) = &mut self.resolver {
                    s.handle_timeout(now);
                }
            }
            Node::BorderRouter => {}
        }
    }

    fn poll_timeout(&self, node: Node) -> Option<Duration> {
        match node {
            Node::Client(i) => match &self.clients[i as usize].app {
                ClientApp::Doc(d) => d.poll_timeout(),
                ClientApp::Dns(d) => d.poll_timeout(),
            },
            Node::Forwarder => match &self.forwarder {
                ForwarderApp::Proxy(p) => p.poll_timeout(),
                ForwarderApp::Opaque => None,
            },
            Node::Resolver => match &self.resolver {
                ResolverApp::Doc(s) => s.poll_timeout(),
                ResolverApp::Dns(..) => None,
            },
            Node::BorderRouter => None,
        }
    }

    fn poll_transmit(&mut self, node: Node) -> Option<Transmit<Node>> {
        match node {
            Node::Client(i) => match &mut self.clients[i as usize].app {
                ClientApp::Doc(d) => d.poll_transmit(),
                ClientApp::Dns(d) => d.transmits.pop_front(),
            },
            Node::Forwarder => match &mut self.forwarder {
                ForwarderApp::Proxy(p) => p.poll_transmit(),
                ForwarderApp::Opaque => None,
            },
            Node::Resolver => match &mut self.resolver {
                ResolverApp::Doc(s) => s.poll_transmit(),
                ResolverApp::Dns(_, out) => out.pop_front(),
            },
            Node::BorderRouter => None,
        }
    }

    /// Sends what `node` queued, records its events and re-arms its timer.
    fn flush(&mut self, node: Node) -> Result<(), NetsimError> {
        while let Some(t) = self.poll_transmit(node) {
            self.route(node, Datagram { src: node, dst: t.peer, bytes: t.bytes })?;
        }
        match node {
            Node::Client(i) => self.drain_client(i as usize),
            Node::Forwarder => {
                if let ForwarderApp::Proxy(p) = &mut self.forwarder {
                    while let Some(kind) = p.poll_cache_event() {
                        let rec = CacheEventRecord {
                            time: secs(self.now),
                            node: Node::Forwarder.to_string(),
                            query: None,
                            kind: kind.as_str().to_string(),
                        };
                        self.metrics.events.push(LogEvent::Cache {
                            t: rec.time,
                            node: rec.node.clone(),
                            query: None,
                            kind: rec.kind.clone(),
                        });
                        self.metrics.cache_events.push(rec);
                    }
                }
            }
            _ => {}
        }
        if let Some(t) = self.poll_timeout(node) {
            let t = t.max(self.now);
            if self.wakes.get(&node) != Some(&t) {
                self.wakes.insert(node, t);
                self.push(t, Action::Wake { node });
            }
        }
        Ok(())
    }

    fn drain_client(&mut self, client: usize) {
        let now = self.now;
        let t = secs(now);
        let label = Node::Client(client as u8).to_string();
        loop {
            let c = &mut self.clients[client];
            let ev = match &mut c.app {
                ClientApp::Doc(d) => d.poll_event(),
                ClientApp::Dns(d) => d.events.pop_front(),
            };
            let Some(ev) = ev else { break };
            let m = &mut self.metrics;
            match ev {
                ClientEvent::Resolved { id, source, .. } => {
                    let Some(index) = c.queries.remove(&id) else { continue };
                    let q = &mut m.queries[c.base + index];
                    let resolution = t - q.issued;
                    let source = serde_plain(&source);
                    q.resolution = Some(resolution);
                    q.source = Some(source.clone());
                    m.events.push(LogEvent::Resolved { t, client: label.clone(), query: index, source, resolution });
                }
                ClientEvent::Failed { id, error, .. } => {
                    let Some(index) = c.queries.remove(&id) else { continue };
                    let reason = error.to_string();
                    m.queries[c.base + index].error = Some(reason.clone());
                    m.events.push(LogEvent::Failed { t, client: label.clone(), query: index, reason });
                }
                ClientEvent::Retransmitted { id, attempt, offset } => {
                    let Some(&index) = c.queries.get(&id) else { continue };
                    let offset = secs(offset);
                    m.retransmissions.push(RetransmissionRecord { client: label.clone(), query: index, attempt, offset });
                    m.events.push(LogEvent::Retransmission { t, client: label.clone(), query: index, attempt, offset });
                }
                ClientEvent::Cache { id, kind } => {
                    let index = c.queries.get(&id).copied();
                    let kind = kind.as_str().to_string();
                    m.cache_events.push(CacheEventRecord { time: t, node: label.clone(), query: index, kind: kind.clone() });
                    m.events.push(LogEvent::Cache { t, node: label.clone(), query: index, kind });
                }
                ClientEvent::EchoChallenge { id } => {
                    m.echo_challenges += 1;
                    if let Some(&index) = c.queries.get(&id) {
                        m.events.push(LogEvent::EchoChallenge { t, client: label.clone(), query: index });
                    }
                }
            }
        }
    }

    /// Moves `dgram` one hop further from `at`.
    fn route(&mut self, at: Node, dgram: Datagram) -> Result<(), NetsimError> {
        let uplink = self.scenario.clients;
        let (link, next) = match (at, dgram.dst) {
            (Node::Client(i), _) => (Some(i as usize), Node::Forwarder),
            (Node::Forwarder, Node::Client(i)) => (Some(i as usize), Node::Client(i)),
            (Node::Forwarder, _) => (Some(uplink), Node::BorderRouter),
            (Node::BorderRouter, Node::Resolver) => (None, Node::Resolver),
            (Node::BorderRouter, _) => (Some(uplink), Node::Forwarder),
            (Node::Resolver, _) => (None, Node::BorderRouter),
        };
        let Some(link) = link else {
            self.push(self.now, Action::Deliver { at: next, dgram });
            return Ok(());
        };
        let octets = dgram.bytes.len() + self.scenario.transport.record_overhead();
        let l = &mut self.links[link];
        let frames = l.model.fragment(octets)?;
        let mut delivered = true;
        for &f in &frames {
            l.stats.frames_sent += 1;
            l.stats.bytes_sent += f as u64;
            if l.rng.gen_bool(l.model.loss_prob) {
                l.stats.frames_lost += 1;
                delivered = false;
            } else {
                l.stats.frames_received += 1;
                l.stats.bytes_received += f as u64;
            }
        }
        let start = self.now.max(l.busy_until);
        l.busy_until = start + l.model.latency * frames.len() as u32;
        let arrival = l.busy_until;
        self.metrics.events.push(LogEvent::Datagram {
            t: secs(self.now),
            link: l.stats.link.clone(),
            src: at.to_string(),
            dst: next.to_string(),
            octets,
            frames: frames.len(),
            delivered,
        });
        if delivered {
            self.push(arrival, Action::Deliver { at: next, dgram });
        }
        Ok(())
    }
}

fn serde_plain(source: &AnswerSource) -> String {
    match source {
        AnswerSource::Network => "network",
        AnswerSource::CoapCache => "coap-cache",
        AnswerSource::DnsCache => "dns-cache",
    }
    .to_string()
}

/// Plain DNS responder: TTLs are passed through unchanged.
fn answer_plain(resolver: &SyntheticResolver, bytes: &[u8], now: Duration) -> Option<Vec<u8>> {
    let query = DnsMessage::decode(bytes).ok()?;
    if query.is_response() {
        return None;
    }
    let question = query.question.clone()?;
    let response = match resolver.resolve(&question, now) {
        Ok(records) => build_response(&question, records, query.id),
        Err(_) => {
            let mut r = build_response(&question, Vec::new(), query.id);
            r.flags |= 2; // SERVFAIL
            r
        }
    };
    Some(response.encode())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doc::{CachingScheme, DocMethod};
    use crate::netsim::{link_utilization, Workload};

    fn single(transport: Transport, rtype: RecordType) -> Scenario {
        Scenario {
            transport,
            clients: 1,
            workload: Workload { n_queries: 1, rtype, ..Workload::default() },
            link: LinkModel::default().lossless(),
            ..Scenario::default()
        }
    }

    #[test]
    fn lossless_udp_a_takes_four_frame_times() {
        let m = run(&single(Transport::Udp, RecordType::A)).unwrap();
        assert_eq!(m.resolved(), 1);
        assert!((m.queries[0].resolution.unwrap() - 0.040).abs() < 1e-9);
    }

    #[test]
    fn lossless_udp_aaaa_response_fragments() {
        let m = run(&single(Transport::Udp, RecordType::AAAA)).unwrap();
        // one query frame and two response fragments per hop
        assert!((m.queries[0].resolution.unwrap() - 0.060).abs() < 1e-9);
    }

    #[test]
    fn total_loss_resolves_nothing() {
        for transport in [Transport::Udp, Transport::Coap] {
            let mut s = Scenario { transport, ..Scenario::default() };
            s.workload.n_queries = 5;
            s.workload.rtype = RecordType::A;
            s.link.loss_prob = 1.0;
            let m = run(&s).unwrap();
            assert_eq!(m.resolved(), 0);
            assert_eq!(m.queries.len(), 10);
            for l in m.links.iter().filter(|l| l.hop == 2) {
                assert_eq!(l.frames_sent, 5 * (1 + s.coap.max_retransmit as u64), "{transport}");
                assert_eq!(l.frames_received, 0);
            }
            assert_eq!(m.hop(1).frames_sent, 0);
        }
    }

    #[test]
    fn frames_conserved_and_deterministic() {
        let s = Scenario { proxy_cache: true, forwarder: Forwarder::Proxy, ..Scenario::default() };
        let a = run(&s).unwrap();
        let b = run(&s).unwrap();
        assert_eq!(a, b);
        for l in &a.links {
            assert_eq!(l.frames_sent, l.frames_received + l.frames_lost);
            assert!(l.bytes_sent >= l.bytes_received);
        }
        assert_ne!(run(&Scenario { seed: 2, ..s }).unwrap(), a);
    }

    #[test]
    fn every_query_accounted_for() {
        let m = run(&Scenario::default()).unwrap();
        assert_eq!(m.queries.len(), 100);
        for q in &m.queries {
            assert!(q.resolution.is_some() || q.error.is_some(), "{q:?}");
        }
        assert!(m.resolved() >= 95);
    }

    #[test]
    fn lossless_runs_never_retransmit() {
        for transport in Transport::ALL {
            let s = Scenario { transport, link: LinkModel::default().lossless(), ..Scenario::default() };
            let m = run(&s).unwrap();
            assert!(m.retransmissions.is_empty(), "{transport}");
            assert_eq!(m.resolved(), 100, "{transport}");
        }
    }

    #[test]
    fn retransmissions_follow_envelope() {
        let mut s = Scenario::default();
        s.link.loss_prob = 0.3;
        let m = run(&s).unwrap();
        assert!(!m.retransmissions.is_empty());
        for r in &m.retransmissions {
            let k = r.attempt as i32;
            let span = (2f64.powi(k) - 1.0) * 1.0;
            assert!(r.offset >= 2.0 * span - 1e-9 && r.offset <= 3.0 * span + 1e-9, "{r:?}");
            assert!(r.attempt <= 4);
        }
    }

    fn caching(scheme: CachingScheme, proxy_cache: bool, seed: u64) -> Scenario {
        let mut s = Scenario {
            seed,
            scheme,
            forwarder: if proxy_cache { Forwarder::Proxy } else { Forwarder::Opaque },
            proxy_cache,
            ..Scenario::default()
        };
        s.workload.names = 8;
        s.workload.records = 4;
        s
    }

    #[test]
    fn proxy_cache_reduces_bottleneck_bytes() {
        let opaque = run(&caching(CachingScheme::EolTtls, false, 4)).unwrap();
        let cached = run(&caching(CachingScheme::EolTtls, true, 4)).unwrap();
        assert!(cached.hop(1).bytes_sent < opaque.hop(1).bytes_sent);
        assert!(cached.cache_count("hit") > 0);
        let doh = run(&caching(CachingScheme::DohLike, true, 4)).unwrap();
        assert!(cached.hop(1).bytes_sent <= doh.hop(1).bytes_sent);
        // DoH-like only revalidates when a new TTL epoch happens to repeat the old bytes
        assert!(doh.cache_count("revalidation-full") > 4 * doh.cache_count("revalidation-ok"));
        assert_eq!(cached.cache_count("revalidation-full"), 0);
    }

    #[test]
    fn post_through_proxy_matches_opaque_without_loss() {
        let mut opaque = caching(CachingScheme::EolTtls, false, 9);
        opaque.method = DocMethod::Post;
        opaque.link = opaque.link.lossless();
        let proxied = Scenario { forwarder: Forwarder::Proxy, proxy_cache: true, ..opaque.clone() };
        let a = run(&opaque).unwrap();
        let b = run(&proxied).unwrap();
        assert_eq!(link_utilization(&a)[0], link_utilization(&b)[0]);
        assert!(b.cache_events.is_empty());
    }

    #[test]
    fn oscore_with_and_without_echo() {
        let mut s = Scenario { transport: Transport::Oscore, ..Scenario::default() };
        s.link = s.link.lossless();
        let plain = run(&s).unwrap();
        assert_eq!(plain.resolved(), 100);
        assert_eq!(plain.echo_challenges, 0);
        s.include_echo = true;
        let echo = run(&s).unwrap();
        assert_eq!(echo.resolved(), 100);
        assert_eq!(echo.echo_challenges, 2);
        s.forwarder = Forwarder::Proxy;
        assert_eq!(run(&s).unwrap().resolved(), 100);
    }

    #[test]
    fn blockwise_and_client_caches() {
        let mut s = caching(CachingScheme::EolTtls, false, 5);
        s.block_size = Some(32);
        s.link = s.link.lossless();
        let m = run(&s).unwrap();
        assert_eq!(m.resolved(), 100);
        let s = Scenario { block_size: None, client_coap_cache: true, client_dns_cache: true, ..s };
        let m = run(&s).unwrap();
        assert_eq!(m.resolved(), 100);
        assert!(m.queries.iter().any(|q| q.source.as_deref() == Some("dns-cache") && q.resolution == Some(0.0)));
    }

    #[test]
    fn dtls_adds_record_overhead() {
        let udp = run(&single(Transport::Udp, RecordType::A)).unwrap();
        let dtls = run(&single(Transport::Dtls, RecordType::A)).unwrap();
        assert!(dtls.hop(2).bytes_sent > udp.hop(2).bytes_sent);
    }

    #[test]
    fn names_have_requested_length() {
        let s = Scenario::default();
        let names = generate_names(&s);
        assert_eq!(names.len(), 50);
        assert!(names.iter().all(|n| n.to_string().trim_end_matches('.').len() == 24));
    }
}

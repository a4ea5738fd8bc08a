//! DoC endpoints on real UDP sockets.
//!
//! Each endpoint drives the sans-IO state machines from a single blocking
//! loop whose read timeout follows the next protocol deadline.

use std::io::{self, Write};
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::path::Path;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::cache::{Cache, ForwardProxy};
use crate::coap::{Transmit, TransmissionParams};
use crate::dns::{DnsMessage, DnsName, DnsQuestion, DnsRecord, RecordType};
use crate::doc::resolver::ResolveError;
use crate::doc::{ClientError, ClientEvent, DocClient, DocClientConfig, DocServer, Resolver, ServeOptions};
use crate::oscore::{KeyFile, OscoreError, SecurityContext, MAX_SEQ};

/// Environment variable naming the OSCORE key file.
pub const KEY_FILE_ENV: &str = "DOCOAP_KEY_FILE";
const MAX_DATAGRAM: usize = 1500;
const IDLE_POLL: Duration = Duration::from_millis(500);

#[derive(Debug, Error)]
pub enum LiveError {
    #[error("I/O: {0}")]
    Io(#[from] io::Error),
    #[error("cannot resolve address {0:?}")]
    Address(String),
    #[error("OSCORE: {0}")]
    Security(#[from] OscoreError),
    #[error("{0}")]
    Config(String),
    #[error("resolution failed: {0}")]
    Query(String),
}

impl LiveError {
    /// Process exit status for a failed command.
    pub fn exit_code(&self) -> i32 {
        match self {
            LiveError::Query(_) => 1,
            LiveError::Security(_) => 3,
            _ => 2,
        }
    }
}

pub fn resolve_addr(s: &str) -> Result<SocketAddr, LiveError> {
    s.to_socket_addrs()
        .map_err(|_| LiveError::Address(s.to_string()))?
        .next()
        .ok_or_else(|| LiveError::Address(s.to_string()))
}

/// The key file from `path`, falling back to [`KEY_FILE_ENV`].
pub fn load_key_file(path: Option<&Path>) -> Result<Option<KeyFile>, LiveError> {
    let env = std::env::var_os(KEY_FILE_ENV);
    let path = path.map(Path::to_path_buf).or_else(|| env.map(Into::into));
    path.map(|p| KeyFile::load(&p).map_err(LiveError::from)).transpose()
}

/// Sender sequence number derived from the wall clock in 10 ms steps, so
/// separate runs without stored state keep moving past the server's
/// replay window.
pub fn clock_sequence() -> u64 {
    let since = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    (since.as_millis() as u64 / 10) & MAX_SEQ
}

/// Announces the bound address on stdout; callers binding port 0 read it
/// from the first line.
fn announce(socket: &UdpSocket, what: &str) -> Result<(), LiveError> {
    let mut out = io::stdout().lock();
    writeln!(out, "{what} listening on {}", socket.local_addr()?)?;
    out.flush()?;
    Ok(())
}

/// Waits for one datagram until `deadline`, or the idle poll interval.
fn receive(socket: &UdpSocket, buf: &mut [u8], deadline: Option<Duration>, now: Duration) -> io::Result<Option<(usize, SocketAddr)>> {
    let wait = deadline.map(|d| d.saturating_sub(now)).unwrap_or(IDLE_POLL).clamp(Duration::from_millis(1), IDLE_POLL);
    socket.set_read_timeout(Some(wait))?;
    match socket.recv_from(buf) {
        Ok(v) => Ok(Some(v)),
        Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => Ok(None),
        Err(e) => Err(e),
    }
}

fn send_all(socket: &UdpSocket, mut next: impl FnMut() -> Option<Transmit<SocketAddr>>) -> io::Result<()> {
    while let Some(t) = next() {
        socket.send_to(&t.bytes, t.peer)?;
    }
    Ok(())
}

/// Prints every lookup so server-side activity is visible.
pub struct LoggingResolver<R>(pub R);

impl<R: Resolver> Resolver for LoggingResolver<R> {
    fn resolve(&self, q: &DnsQuestion, now: Duration) -> Result<Vec<DnsRecord>, ResolveError> {
        let r = self.0.resolve(q, now);
        let mut out = io::stdout().lock();
        let _ = writeln!(out, "resolve {} {} {}", q.name, q.rtype, if r.is_ok() { "ok" } else { "error" });
        let _ = out.flush();
        r
    }
}

/// Runs a DoC server until the process is stopped.
pub fn serve<R: Resolver>(
    bind: &str,
    resolver: R,
    opts: ServeOptions,
    params: TransmissionParams,
    keys: Option<&KeyFile>,
) -> Result<(), LiveError> {
    let socket = UdpSocket::bind(resolve_addr(bind)?)?;
    let mut server = DocServer::new(LoggingResolver(resolver), opts, params, rand::random());
    if let Some(k) = keys {
        server = server.with_oscore(vec![k.server_context()?]);
    }
    announce(&socket, "server")?;
    let start = Instant::now();
    let mut buf = [0u8; MAX_DATAGRAM];
    loop {
        let now = start.elapsed();
        if let Some((n, peer)) = receive(&socket, &mut buf, server.poll_timeout(), now)? {
            server.handle_datagram(peer, &buf[..n], start.elapsed());
        }
        server.handle_timeout(start.elapsed());
        send_all(&socket, || server.poll_transmit())?;
    }
}

/// Runs a forward proxy that sends everything to `upstream`.
pub fn proxy(bind: &str, upstream: &str, cache: Option<Cache>, params: TransmissionParams) -> Result<(), LiveError> {
    let socket = UdpSocket::bind(resolve_addr(bind)?)?;
    let upstream = resolve_addr(upstream)?;
    let mut proxy = ForwardProxy::new(upstream, cache, params, rand::random());
    announce(&socket, "proxy")?;
    let start = Instant::now();
    let mut buf = [0u8; MAX_DATAGRAM];
    loop {
        let now = start.elapsed();
        if let Some((n, peer)) = receive(&socket, &mut buf, proxy.poll_timeout(), now)? {
            proxy.handle_datagram(peer, &buf[..n], start.elapsed());
        }
        proxy.handle_timeout(start.elapsed());
        send_all(&socket, || proxy.poll_transmit())?;
        while let Some(kind) = proxy.poll_cache_event() {
            let mut out = io::stdout().lock();
            writeln!(out, "cache {}", kind.as_str())?;
            out.flush()?;
        }
    }
}

pub struct QueryOptions {
    pub server: String,
    pub config: DocClientConfig,
    pub params: TransmissionParams,
    pub oscore: Option<SecurityContext>,
}

/// Resolves one name and returns the answer with restored TTLs.
pub fn query(name: &DnsName, rtype: RecordType, opts: QueryOptions) -> Result<DnsMessage, LiveError> {
    let server = resolve_addr(&opts.server)?;
    let bind: SocketAddr = if server.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" }.parse().expect("literal");
    let socket = UdpSocket::bind(bind)?;
    let mut client = DocClient::new(server, opts.config, opts.params, rand::random())
        .map_err(|e| LiveError::Config(e.to_string()))?;
    if let Some(ctx) = opts.oscore {
        client = client.with_oscore(ctx);
    }
    let start = Instant::now();
    client.query(name.clone(), rtype, start.elapsed());
    let mut buf = [0u8; MAX_DATAGRAM];
    loop {
        send_all(&socket, || client.poll_transmit())?;
        while let Some(ev) = client.poll_event() {
            match ev {
                ClientEvent::Resolved { response, .. } => return Ok(response),
                ClientEvent::Failed { error, .. } => return Err(failure(error)),
                ClientEvent::Retransmitted { attempt, .. } => log::info!("retransmission {attempt}"),
                ClientEvent::EchoChallenge { .. } => log::info!("answering Echo challenge"),
                ClientEvent::Cache { kind, .. } => log::info!("cache {}", kind.as_str()),
            }
        }
        let now = start.elapsed();
        if let Some((n, peer)) = receive(&socket, &mut buf, client.poll_timeout(), now)? {
            if peer == server {
                client.handle_datagram(peer, &buf[..n], start.elapsed());
            }
        }
        client.handle_timeout(start.elapsed());
    }
}

fn failure(error: ClientError) -> LiveError {
    match error {
        ClientError::Security(e) => LiveError::Security(e),
        ClientError::Status(code) if code == crate::coap::Code::UNAUTHORIZED => {
            LiveError::Security(OscoreError::Authentication)
        }
        other => LiveError::Query(other.to_string()),
    }
}

/// Zone-file style lines: `name TTL IN TYPE data`.
pub fn format_answer(msg: &DnsMessage) -> String {
    let mut out = String::new();
    for r in &msg.answers {
        out.push_str(&format!("{} {} IN {} {}\n", r.name, r.ttl, r.rtype, r.rdata_text()));
    }
    if msg.answers.is_empty() {
        out.push_str(&format!("; no records (rcode {})\n", msg.rcode()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doc::resolver::TtlPolicy;
    use crate::doc::SyntheticResolver;

    #[test]
    fn clock_sequence_fits() {
        let a = clock_sequence();
        assert!(a <= MAX_SEQ);
        std::thread::sleep(Duration::from_millis(20));
        assert!(clock_sequence() > a);
    }

    #[test]
    fn query_against_thread_server() {
        let socket = UdpSocket::bind("127.0.0.1:0").unwrap();
        let addr = socket.local_addr().unwrap();
        let resolver = SyntheticResolver { records: 1, policy: TtlPolicy::fixed(60), seed: 1 };
        let handle = std::thread::spawn(move || {
            let mut server = DocServer::new(resolver, ServeOptions::default(), TransmissionParams::default(), 1);
            let start = Instant::now();
            let mut buf = [0u8; MAX_DATAGRAM];
            while start.elapsed() < Duration::from_secs(5) {
                if let Some((n, peer)) = receive(&socket, &mut buf, server.poll_timeout(), start.elapsed()).unwrap() {
                    server.handle_datagram(peer, &buf[..n], start.elapsed());
                    send_all(&socket, || server.poll_transmit()).unwrap();
                    return;
                }
            }
        });
        let opts = QueryOptions {
            server: addr.to_string(),
            config: DocClientConfig::default(),
            params: TransmissionParams::default(),
            oscore: None,
        };
        let msg = query(&"example.org".parse().unwrap(), RecordType::AAAA, opts).unwrap();
        handle.join().unwrap();
        assert_eq!(msg.answers.len(), 1);
        assert!(msg.answers[0].ttl > 0 && msg.answers[0].ttl <= 60);
        assert!(format_answer(&msg).contains(" IN AAAA 2001:db8:"));
    }
}

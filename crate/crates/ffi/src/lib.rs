//! C interface to the DNS over CoAP library.
//!
//! Objects are opaque heap handles created by `*_new` and released with the
//! matching `*_free`. Every fallible call returns a [`DocoapStatus`]; the
//! message of the most recent failure on the calling thread is available
//! through [`docoap_last_error`]. Times are milliseconds on a caller-chosen
//! monotonic clock. Output buffers are written only on success; when one is
//! too small the call fails with `DOCOAP_STATUS_BUFFER_TOO_SMALL` and stores
//! the required length in `*written`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;
use std::time::Duration;

use docoap::coap::TransmissionParams;
use docoap::dns::{DnsMessage, DnsName, RecordType};
use docoap::doc::resolver::TtlPolicy;
use docoap::doc::{
    CachingScheme, ClientEvent, DocClient, DocClientConfig, DocMethod, DocServer, PayloadFormat, QueryId, ServeOptions,
    SyntheticResolver,
};
use docoap::netsim::{LinkModel, LinkProfile};
use docoap::oscore::SecurityContext;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DocoapStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Decode = 4,
    /// Nothing to return right now; not an error.
    Empty = 5,
    Internal = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DocoapMethod {
    Fetch = 0,
    Get = 1,
    Post = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DocoapFormat {
    Wire = 0,
    Cbor = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DocoapScheme {
    DohLike = 0,
    EolTtls = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DocoapLinkProfile {
    Ieee802154 = 0,
    Lorawan = 1,
}

/// Outcome of a finished query.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DocoapOutcome {
    Resolved = 0,
    Failed = 1,
}

/// Opaque DoC client talking to a single server.
pub struct DocoapClient {
    inner: DocClient<u64>,
    results: std::collections::VecDeque<(QueryId, Result<Vec<u8>, String>)>,
}

/// Opaque DoC server answering from a synthetic zone. Peers are
/// identified by caller-chosen 64-bit handles.
pub struct DocoapServer {
    inner: DocServer<u64, SyntheticResolver>,
}

/// Opaque OSCORE security context.
pub struct DocoapOscoreContext {
    inner: SecurityContext,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: DocoapStatus, msg: impl Into<String>) -> DocoapStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning panics into `Internal`.
fn guard(f: impl FnOnce() -> DocoapStatus) -> DocoapStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(DocoapStatus::Internal, "internal panic"))
}

fn ms(v: u64) -> Duration {
    Duration::from_millis(v)
}

unsafe fn input<'a>(data: *const u8, len: usize) -> Option<&'a [u8]> {
    if len == 0 {
        return Some(&[]);
    }
    (!data.is_null()).then(|| slice::from_raw_parts(data, len))
}

unsafe fn write_out(bytes: &[u8], out: *mut u8, cap: usize, written: *mut usize) -> DocoapStatus {
    if written.is_null() {
        return fail(DocoapStatus::NullPointer, "written is NULL");
    }
    *written = bytes.len();
    if bytes.len() > cap {
        return fail(DocoapStatus::BufferTooSmall, format!("need {} octets, buffer has {cap}", bytes.len()));
    }
    if !bytes.is_empty() {
        if out.is_null() {
            return fail(DocoapStatus::NullPointer, "output buffer is NULL");
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), out, bytes.len());
    }
    DocoapStatus::Ok
}

unsafe fn name_arg(name: *const c_char) -> Result<DnsName, DocoapStatus> {
    if name.is_null() {
        return Err(fail(DocoapStatus::NullPointer, "name is NULL"));
    }
    let s = CStr::from_ptr(name).to_str().map_err(|_| fail(DocoapStatus::InvalidArgument, "name is not UTF-8"))?;
    s.parse().map_err(|e| fail(DocoapStatus::InvalidArgument, format!("invalid name {s:?}: {e}")))
}

impl From<DocoapMethod> for DocMethod {
    fn from(m: DocoapMethod) -> Self {
        match m {
            DocoapMethod::Fetch => DocMethod::Fetch,
            DocoapMethod::Get => DocMethod::Get,
            DocoapMethod::Post => DocMethod::Post,
        }
    }
}

impl From<DocoapFormat> for PayloadFormat {
    fn from(f: DocoapFormat) -> Self {
        match f {
            DocoapFormat::Wire => PayloadFormat::Wire,
            DocoapFormat::Cbor => PayloadFormat::Cbor,
        }
    }
}

impl From<DocoapScheme> for CachingScheme {
    fn from(s: DocoapScheme) -> Self {
        match s {
            DocoapScheme::DohLike => CachingScheme::DohLike,
            DocoapScheme::EolTtls => CachingScheme::EolTtls,
        }
    }
}

/// Copies the last error message of this thread, NUL-terminated and
/// truncated to `cap`. Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be NULL or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn docoap_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = e.len().min(cap - 1);
            ptr::copy_nonoverlapping(e.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn docoap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Encodes a recursion-desired DNS query with ID 0.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn docoap_dns_encode_query(
    name: *const c_char,
    rtype: u16,
    out: *mut u8,
    cap: usize,
    written: *mut usize,
) -> DocoapStatus {
    guard(|| {
        let name = match name_arg(name) {
            Ok(n) => n,
            Err(s) => return s,
        };
        write_out(&docoap::dns::encode_query(&name, RecordType(rtype), 0), out, cap, written)
    })
}

/// Converts a wire-format DNS response to its compressed CBOR form.
///
/// # Safety
/// `wire` must hold `len` bytes; `out` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn docoap_cbor_compress_response(
    wire: *const u8,
    len: usize,
    out: *mut u8,
    cap: usize,
    written: *mut usize,
) -> DocoapStatus {
    guard(|| {
        let Some(bytes) = input(wire, len) else { return fail(DocoapStatus::NullPointer, "wire is NULL") };
        let msg = match DnsMessage::decode(bytes) {
            Ok(m) => m,
            Err(e) => return fail(DocoapStatus::Decode, e.to_string()),
        };
        let Some(q) = msg.question.clone() else { return fail(DocoapStatus::InvalidArgument, "response has no question") };
        match docoap::cbor_dns::compress_response(&msg, &q) {
            Ok(c) => write_out(&c, out, cap, written),
            Err(e) => fail(DocoapStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Number of link-layer frames needed for a `payload`-octet datagram.
///
/// # Safety
/// `frames` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn docoap_fragment_count(payload: usize, profile: DocoapLinkProfile, frames: *mut usize) -> DocoapStatus {
    guard(|| {
        if frames.is_null() {
            return fail(DocoapStatus::NullPointer, "frames is NULL");
        }
        let link = LinkModel::profile(match profile {
            DocoapLinkProfile::Ieee802154 => LinkProfile::Ieee802154,
            DocoapLinkProfile::Lorawan => LinkProfile::Lorawan,
        });
        match link.fragment(payload) {
            Ok(f) => {
                *frames = f.len();
                DocoapStatus::Ok
            }
            Err(e) => fail(DocoapStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Creates a client. `oscore` may be NULL; otherwise requests are
/// protected with that context, which the client takes over. Returns NULL
/// on invalid arguments.
///
/// # Safety
/// `oscore` must be NULL or a context that is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn docoap_client_new(
    method: DocoapMethod,
    format: DocoapFormat,
    scheme: DocoapScheme,
    seed: u64,
    oscore: *mut DocoapOscoreContext,
) -> *mut DocoapClient {
    let cfg = DocClientConfig { method: method.into(), format: format.into(), scheme: scheme.into(), ..Default::default() };
    let ctx = (!oscore.is_null()).then(|| Box::from_raw(oscore).inner);
    match DocClient::new(0u64, cfg, TransmissionParams::default(), seed) {
        Ok(mut inner) => {
            if let Some(ctx) = ctx {
                inner = inner.with_oscore(ctx);
            }
            Box::into_raw(Box::new(DocoapClient { inner, results: Default::default() }))
        }
        Err(e) => {
            set_error(e.to_string());
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `client` must come from [`docoap_client_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn docoap_client_free(client: *mut DocoapClient) {
    if !client.is_null() {
        drop(Box::from_raw(client));
    }
}

/// Starts resolving `name`; the query ID is stored in `*id`.
///
/// # Safety
/// `client` must be valid, `name` NUL-terminated, `id` writable.
#[no_mangle]
pub unsafe extern "C" fn docoap_client_query(
    client: *mut DocoapClient,
    name: *const c_char,
    rtype: u16,
    now_ms: u64,
    id: *mut u64,
) -> DocoapStatus {
    guard(|| {
        if client.is_null() || id.is_null() {
            return fail(DocoapStatus::NullPointer, "NULL argument");
        }
        let name = match name_arg(name) {
            Ok(n) => n,
            Err(s) => return s,
        };
        let c = &mut *client;
        *id = c.inner.query(name, RecordType(rtype), ms(now_ms));
        collect(c);
        DocoapStatus::Ok
    })
}

fn collect(c: &mut DocoapClient) {
    while let Some(ev) = c.inner.poll_event() {
        match ev {
            ClientEvent::Resolved { id, response, .. } => c.results.push_back((id, Ok(response.encode()))),
            ClientEvent::Failed { id, error, .. } => c.results.push_back((id, Err(error.to_string()))),
            _ => {}
        }
    }
}

/// Next datagram for the server, or `DOCOAP_STATUS_EMPTY`.
///
/// # Safety
/// `client` must be valid; `out` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn docoap_client_poll_transmit(
    client: *mut DocoapClient,
    out: *mut u8,
    cap: usize,
    written: *mut usize,
) -> DocoapStatus {
    guard(|| {
        if client.is_null() {
            return fail(DocoapStatus::NullPointer, "client is NULL");
        }
        let c = &mut *client;
        match c.inner.poll_transmit() {
            Some(t) => write_out(&t.bytes, out, cap, written),
            None => DocoapStatus::Empty,
        }
    })
}

/// Feeds a datagram received from the server.
///
/// # Safety
/// `client` must be valid; `data` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn docoap_client_handle_datagram(client: *mut DocoapClient, data: *const u8, len: usize, now_ms: u64) -> DocoapStatus {
    guard(|| {
        let (Some(c), Some(bytes)) = (client.as_mut(), input(data, len)) else {
            return fail(DocoapStatus::NullPointer, "NULL argument");
        };
        c.inner.handle_datagram(0, bytes, ms(now_ms));
        collect(c);
        DocoapStatus::Ok
    })
}

/// Stores the next protocol deadline in `*deadline_ms`, or returns
/// `DOCOAP_STATUS_EMPTY` when nothing is pending.
///
/// # Safety
/// `client` and `deadline_ms` must be valid.
#[no_mangle]
pub unsafe extern "C" fn docoap_client_poll_timeout(client: *const DocoapClient, deadline_ms: *mut u64) -> DocoapStatus {
    let (Some(c), false) = (client.as_ref(), deadline_ms.is_null()) else {
        return fail(DocoapStatus::NullPointer, "NULL argument");
    };
    match c.inner.poll_timeout() {
        Some(d) => {
            *deadline_ms = d.as_nanos().div_ceil(1_000_000).try_into().unwrap_or(u64::MAX);
            DocoapStatus::Ok
        }
        None => DocoapStatus::Empty,
    }
}

/// # Safety
/// `client` must be valid.
#[no_mangle]
pub unsafe extern "C" fn docoap_client_handle_timeout(client: *mut DocoapClient, now_ms: u64) -> DocoapStatus {
    guard(|| {
        let Some(c) = client.as_mut() else { return fail(DocoapStatus::NullPointer, "client is NULL") };
        c.inner.handle_timeout(ms(now_ms));
        collect(c);
        DocoapStatus::Ok
    })
}

/// Takes the next finished query. On `DOCOAP_OUTCOME_RESOLVED` the DNS
/// response (wire format, restored TTLs) is copied to `out`; on failure
/// the reason is available from [`docoap_last_error`].
///
/// # Safety
/// All pointers must be valid; `out` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn docoap_client_poll_result(
    client: *mut DocoapClient,
    id: *mut u64,
    outcome: *mut DocoapOutcome,
    out: *mut u8,
    cap: usize,
    written: *mut usize,
) -> DocoapStatus {
    guard(|| {
        let Some(c) = client.as_mut() else { return fail(DocoapStatus::NullPointer, "client is NULL") };
        if id.is_null() || outcome.is_null() || written.is_null() {
            return fail(DocoapStatus::NullPointer, "NULL argument");
        }
        let Some((qid, result)) = c.results.front() else { return DocoapStatus::Empty };
        match result {
            Ok(bytes) => {
                let status = write_out(bytes, out, cap, written);
                if status != DocoapStatus::Ok {
                    return status;
                }
                *outcome = DocoapOutcome::Resolved;
            }
            Err(reason) => {
                set_error(reason.clone());
                *written = 0;
                *outcome = DocoapOutcome::Failed;
            }
        }
        *id = *qid;
        c.results.pop_front();
        DocoapStatus::Ok
    })
}

/// Creates a server answering every A/AAAA question with `records`
/// synthetic addresses and a fixed TTL. A non-NULL `oscore` context is
/// taken over and then required on every request.
///
/// # Safety
/// `oscore` must be NULL or a context that is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn docoap_server_new(
    records: usize,
    ttl: u32,
    scheme: DocoapScheme,
    seed: u64,
    oscore: *mut DocoapOscoreContext,
) -> *mut DocoapServer {
    let resolver = SyntheticResolver { records, policy: TtlPolicy::fixed(ttl), seed };
    let opts = ServeOptions { scheme: scheme.into(), ..Default::default() };
    let mut inner = DocServer::new(resolver, opts, TransmissionParams::default(), seed);
    if !oscore.is_null() {
        inner = inner.with_oscore(vec![Box::from_raw(oscore).inner]);
    }
    Box::into_raw(Box::new(DocoapServer { inner }))
}

/// # Safety
/// `server` must come from [`docoap_server_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn docoap_server_free(server: *mut DocoapServer) {
    if !server.is_null() {
        drop(Box::from_raw(server));
    }
}

/// # Safety
/// `server` must be valid; `data` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn docoap_server_handle_datagram(
    server: *mut DocoapServer,
    peer: u64,
    data: *const u8,
    len: usize,
    now_ms: u64,
) -> DocoapStatus {
    guard(|| {
        let (Some(s), Some(bytes)) = (server.as_mut(), input(data, len)) else {
            return fail(DocoapStatus::NullPointer, "NULL argument");
        };
        s.inner.handle_datagram(peer, bytes, ms(now_ms));
        DocoapStatus::Ok
    })
}

/// Next outgoing datagram and its destination peer, or `DOCOAP_STATUS_EMPTY`.
///
/// # Safety
/// All pointers must be valid; `out` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn docoap_server_poll_transmit(
    server: *mut DocoapServer,
    peer: *mut u64,
    out: *mut u8,
    cap: usize,
    written: *mut usize,
) -> DocoapStatus {
    guard(|| {
        let Some(s) = server.as_mut() else { return fail(DocoapStatus::NullPointer, "server is NULL") };
        if peer.is_null() {
            return fail(DocoapStatus::NullPointer, "peer is NULL");
        }
        let Some(t) = s.inner.poll_transmit() else { return DocoapStatus::Empty };
        let status = write_out(&t.bytes, out, cap, written);
        if status == DocoapStatus::Ok {
            *peer = t.peer;
        }
        status
    })
}

/// Derives an OSCORE context from the master secret, salt and IDs.
/// Returns NULL on invalid input.
///
/// # Safety
/// Each pointer must hold the given number of bytes.
#[no_mangle]
pub unsafe extern "C" fn docoap_oscore_context_new(
    secret: *const u8,
    secret_len: usize,
    salt: *const u8,
    salt_len: usize,
    sender_id: *const u8,
    sender_len: usize,
    recipient_id: *const u8,
    recipient_len: usize,
) -> *mut DocoapOscoreContext {
    let args = (input(secret, secret_len), input(salt, salt_len), input(sender_id, sender_len), input(recipient_id, recipient_len));
    let (Some(secret), Some(salt), Some(sid), Some(rid)) = args else {
        set_error("NULL argument");
        return ptr::null_mut();
    };
    match SecurityContext::derive(secret, salt, sid, rid) {
        Ok(inner) => Box::into_raw(Box::new(DocoapOscoreContext { inner })),
        Err(e) => {
            set_error(e.to_string());
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `ctx` must come from [`docoap_oscore_context_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn docoap_oscore_context_free(ctx: *mut DocoapOscoreContext) {
    if !ctx.is_null() {
        drop(Box::from_raw(ctx));
    }
}

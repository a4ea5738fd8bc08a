//! Object security for CoAP messages, following the OSCORE message layout
//! with AES-CCM-16-64-128 and HKDF-SHA256 key derivation.
//!
//! Key derivation: `HKDF-SHA256(salt = master_salt, ikm = master_secret,
//! info, L)` where `info` is the CBOR array `[id, null, 10, type, L]`,
//! `type` is `"Key"` or `"IV"` and `id` is the sender or recipient ID (empty
//! for the common IV).
//!
//! OSCORE option value: flag byte `0b000hknnn` (n = partial IV length,
//! k = key ID present, h = key ID context present), then the partial IV,
//! then `s` and the key ID context if h is set, then the key ID. The value is
//! empty when no flag is set.
//!
//! Nonce: `len(id) || id left-padded to 7 octets || PIV left-padded to
//! 5 octets`, XOR the common IV.
//!
//! Requests go out as POST, responses as 2.04 Changed. Uri-Host, Uri-Port,
//! Proxy-Scheme, OSCORE and the scheme/authority part of Proxy-Uri stay
//! outside. Max-Age is copied both inside and outside; everything else is
//! encrypted.

mod replay;

use std::path::Path;
use std::time::Duration;

use aes::Aes128;
use ccm::aead::generic_array::GenericArray;
use ccm::aead::{Aead, KeyInit, Payload};
use ccm::consts::{U13, U8};
use ccm::Ccm;
use hkdf::Hkdf;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use crate::cbor::Value;
use crate::coap::uri::CoapUri;
use crate::coap::{option, CoapError, CoapMessage, Code};

pub use replay::ReplayWindow;

pub const ALG_AES_CCM_16_64_128: u64 = 10;
pub const KEY_LEN: usize = 16;
pub const NONCE_LEN: usize = 13;
pub const TAG_LEN: usize = 8;
pub const MAX_ID_LEN: usize = NONCE_LEN - 6;
pub const MAX_PIV_LEN: usize = 5;
/// Highest sender sequence number that fits a 5-octet partial IV.
pub const MAX_SEQ: u64 = (1 << 40) - 1;
pub const DEFAULT_REPLAY_WINDOW: u64 = 32;
pub const ECHO_LEN: usize = 8;
pub const ECHO_FRESHNESS: Duration = Duration::from_secs(60);

const PROXY_SCHEME: u16 = 39;
const OUTER_ONLY: [u16; 5] = [option::URI_HOST, option::URI_PORT, option::OSCORE, option::PROXY_URI, PROXY_SCHEME];

type Cipher = Ccm<Aes128, U8, U13>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OscoreError {
    #[error("sender and recipient IDs must differ")]
    EqualIds,
    #[error("ID of {0} octets exceeds 7")]
    IdTooLong(usize),
    #[error("sender sequence number exhausted; rekey required")]
    SequenceExhausted,
    #[error("message carries no OSCORE option")]
    MissingOption,
    #[error("malformed OSCORE option")]
    BadOption,
    #[error("request carries no partial IV")]
    MissingPiv,
    #[error("key ID does not match the security context")]
    UnknownKid,
    #[error("authentication failed")]
    Authentication,
    #[error("partial IV {0} is a replay or outside the window")]
    Replay(u64),
    #[error("replay window is not initialized")]
    Unsynchronized,
    #[error("outer Max-Age {outer} exceeds protected Max-Age {protected}")]
    MaxAgeExtended { outer: u32, protected: u32 },
    #[error("Proxy-Uri: {0}")]
    BadProxyUri(&'static str),
    #[error("inner message: {0}")]
    Inner(#[from] CoapError),
    #[error("key file: {0}")]
    KeyFile(String),
}

/// Identifies the request a response belongs to.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RequestBinding {
    pub kid: Vec<u8>,
    pub piv: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct SecurityContext {
    pub sender_id: Vec<u8>,
    pub recipient_id: Vec<u8>,
    sender_key: [u8; KEY_LEN],
    recipient_key: [u8; KEY_LEN],
    common_iv: [u8; NONCE_LEN],
    sender_seq: u64,
    pub replay: ReplayWindow,
}

fn hkdf_expand(secret: &[u8], salt: &[u8], id: &[u8], kind: &str, out: &mut [u8]) {
    let info = Value::Array(vec![
        Value::Bytes(id.to_vec()),
        Value::Null,
        Value::Unsigned(ALG_AES_CCM_16_64_128),
        Value::Text(kind.to_string()),
        Value::Unsigned(out.len() as u64),
    ])
    .encode();
    Hkdf::<Sha256>::new(Some(salt), secret)
        .expand(&info, out)
        .expect("output length is far below the HKDF limit");
}

/// Minimal big-endian partial IV; zero is one octet.
pub fn piv_bytes(seq: u64) -> Vec<u8> {
    let b = seq.to_be_bytes();
    let skip = b.iter().take_while(|&&x| x == 0).count().min(7);
    b[skip..].to_vec()
}

fn piv_value(piv: &[u8]) -> u64 {
    piv.iter().fold(0u64, |acc, &b| (acc << 8) | b as u64)
}

pub fn encode_option(piv: Option<&[u8]>, kid: Option<&[u8]>) -> Vec<u8> {
    let n = piv.map_or(0, <[u8]>::len) as u8;
    let flags = n | if kid.is_some() { 0x08 } else { 0 };
    if flags == 0 {
        return Vec::new();
    }
    let mut v = vec![flags];
    v.extend_from_slice(piv.unwrap_or_default());
    v.extend_from_slice(kid.unwrap_or_default());
    v
}

#[derive(Debug, Default, PartialEq, Eq)]
struct OptionValue {
    piv: Option<Vec<u8>>,
    kid: Option<Vec<u8>>,
    kid_context: Option<Vec<u8>>,
}

fn decode_option(v: &[u8]) -> Result<OptionValue, OscoreError> {
    let Some((&flags, rest)) = v.split_first() else {
        return Ok(OptionValue::default());
    };
    if flags & 0xe0 != 0 {
        return Err(OscoreError::BadOption);
    }
    let n = (flags & 0x07) as usize;
    if n > MAX_PIV_LEN {
        return Err(OscoreError::BadOption);
    }
    let piv = rest.get(..n).ok_or(OscoreError::BadOption)?;
    let mut rest = &rest[n..];
    let kid_context = if flags & 0x10 != 0 {
        let (&s, r) = rest.split_first().ok_or(OscoreError::BadOption)?;
        let ctx = r.get(..s as usize).ok_or(OscoreError::BadOption)?;
        rest = &r[s as usize..];
        Some(ctx.to_vec())
    } else {
        None
    };
    let kid = if flags & 0x08 != 0 {
        Some(rest.to_vec())
    } else if !rest.is_empty() {
        return Err(OscoreError::BadOption);
    } else {
        None
    };
    Ok(OptionValue { piv: (n > 0).then(|| piv.to_vec()), kid, kid_context })
}

/// Key ID announced in a protected request, if any.
pub fn request_kid(msg: &CoapMessage) -> Result<Vec<u8>, OscoreError> {
    let opt = decode_option(msg.option(option::OSCORE).ok_or(OscoreError::MissingOption)?)?;
    opt.kid.ok_or(OscoreError::UnknownKid)
}

fn aad(kid: &[u8], piv: &[u8]) -> Vec<u8> {
    let external = Value::Array(vec![
        Value::Unsigned(1),
        Value::Array(vec![Value::Unsigned(ALG_AES_CCM_16_64_128)]),
        Value::Bytes(kid.to_vec()),
        Value::Bytes(piv.to_vec()),
        Value::Bytes(Vec::new()),
    ])
    .encode();
    Value::Array(vec![Value::Text("Encrypt0".into()), Value::Bytes(Vec::new()), Value::Bytes(external)]).encode()
}

/// Serializes code, options and payload the way they appear after the
/// CoAP header.
fn inner_plaintext(code: Code, options: &CoapMessage) -> Vec<u8> {
    let mut tmp = options.clone();
    tmp.token.clear();
    let enc = tmp.encode();
    let mut out = Vec::with_capacity(enc.len() - 3);
    out.push(code.0);
    out.extend_from_slice(&enc[4..]);
    out
}

fn parse_plaintext(pt: &[u8]) -> Result<CoapMessage, OscoreError> {
    let (&code, rest) = pt.split_first().ok_or(OscoreError::Inner(CoapError::Truncated))?;
    let mut framed = vec![0x40, code, 0, 0];
    framed.extend_from_slice(rest);
    Ok(CoapMessage::decode(&framed)?)
}

/// Splits `msg` into (inner, outer) option carriers. The inner one carries
/// the payload.
fn split_options(msg: &CoapMessage) -> Result<(CoapMessage, CoapMessage), OscoreError> {
    let mut inner = CoapMessage::new(msg.mtype, msg.code);
    let mut outer = CoapMessage::new(msg.mtype, msg.code);
    for o in msg.options() {
        if o.number == option::PROXY_URI {
            let s = std::str::from_utf8(&o.value).map_err(|_| OscoreError::BadProxyUri("not UTF-8"))?;
            let uri = CoapUri::parse(s).map_err(|e| OscoreError::BadProxyUri(e.0))?;
            outer.add_option(option::PROXY_URI, uri.origin().into_bytes());
            for seg in uri.path {
                inner.add_option(option::URI_PATH, seg);
            }
            for q in uri.query {
                inner.add_option(option::URI_QUERY, q);
            }
        } else if OUTER_ONLY.contains(&o.number) {
            outer.add_option(o.number, o.value.clone());
        } else {
            if o.number == option::MAX_AGE {
                outer.add_option(o.number, o.value.clone());
            }
            inner.add_option(o.number, o.value.clone());
        }
    }
    inner.payload = msg.payload.clone();
    Ok((inner, outer))
}

impl SecurityContext {
    pub fn derive(
        master_secret: &[u8],
        master_salt: &[u8],
        sender_id: &[u8],
        recipient_id: &[u8],
    ) -> Result<Self, OscoreError> {
        if sender_id == recipient_id {
            return Err(OscoreError::EqualIds);
        }
        for id in [sender_id, recipient_id] {
            if id.len() > MAX_ID_LEN {
                return Err(OscoreError::IdTooLong(id.len()));
            }
        }
        let mut sender_key = [0u8; KEY_LEN];
        let mut recipient_key = [0u8; KEY_LEN];
        let mut common_iv = [0u8; NONCE_LEN];
        hkdf_expand(master_secret, master_salt, sender_id, "Key", &mut sender_key);
        hkdf_expand(master_secret, master_salt, recipient_id, "Key", &mut recipient_key);
        hkdf_expand(master_secret, master_salt, &[], "IV", &mut common_iv);
        Ok(SecurityContext {
            sender_id: sender_id.to_vec(),
            recipient_id: recipient_id.to_vec(),
            sender_key,
            recipient_key,
            common_iv,
            sender_seq: 0,
            replay: ReplayWindow::new(DEFAULT_REPLAY_WINDOW),
        })
    }

    pub fn with_replay_window(mut self, window: ReplayWindow) -> Self {
        self.replay = window;
        self
    }

    pub fn sender_key(&self) -> &[u8; KEY_LEN] {
        &self.sender_key
    }

    pub fn recipient_key(&self) -> &[u8; KEY_LEN] {
        &self.recipient_key
    }

    pub fn common_iv(&self) -> &[u8; NONCE_LEN] {
        &self.common_iv
    }

    pub fn sender_seq(&self) -> u64 {
        self.sender_seq
    }

    pub fn set_sender_seq(&mut self, seq: u64) {
        self.sender_seq = seq;
    }

    fn nonce(&self, id: &[u8], piv: &[u8]) -> [u8; NONCE_LEN] {
        let mut n = [0u8; NONCE_LEN];
        n[0] = id.len() as u8;
        n[1 + MAX_ID_LEN - id.len()..1 + MAX_ID_LEN].copy_from_slice(id);
        n[NONCE_LEN - piv.len()..].copy_from_slice(piv);
        for (b, iv) in n.iter_mut().zip(self.common_iv) {
            *b ^= iv;
        }
        n
    }

    fn next_piv(&mut self) -> Result<Vec<u8>, OscoreError> {
        if self.sender_seq > MAX_SEQ {
            return Err(OscoreError::SequenceExhausted);
        }
        let piv = piv_bytes(self.sender_seq);
        self.sender_seq += 1;
        Ok(piv)
    }

    fn seal(key: &[u8; KEY_LEN], nonce: &[u8; NONCE_LEN], aad: &[u8], pt: &[u8]) -> Vec<u8> {
        Cipher::new(GenericArray::from_slice(key))
            .encrypt(GenericArray::from_slice(nonce), Payload { msg: pt, aad })
            .expect("CCM encryption of short messages cannot fail")
    }

    fn open(key: &[u8; KEY_LEN], nonce: &[u8; NONCE_LEN], aad: &[u8], ct: &[u8]) -> Result<Vec<u8>, OscoreError> {
        Cipher::new(GenericArray::from_slice(key))
            .decrypt(GenericArray::from_slice(nonce), Payload { msg: ct, aad })
            .map_err(|_| OscoreError::Authentication)
    }

    pub fn protect_request(&mut self, msg: &CoapMessage) -> Result<(CoapMessage, RequestBinding), OscoreError> {
        let (inner, outer_opts) = split_options(msg)?;
        let piv = self.next_piv()?;
        let nonce = self.nonce(&self.sender_id, &piv);
        let ct = Self::seal(&self.sender_key, &nonce, &aad(&self.sender_id, &piv), &inner_plaintext(msg.code, &inner));
        let mut outer = outer_opts;
        outer.code = Code::POST;
        outer.token = msg.token.clone();
        outer.message_id = msg.message_id;
        outer.add_option(option::OSCORE, encode_option(Some(&piv), Some(&self.sender_id)));
        outer.payload = ct;
        Ok((outer, RequestBinding { kid: self.sender_id.clone(), piv }))
    }

    /// Verifies and decrypts a request without consulting the replay window.
    /// Returns the inner message, its binding and its sequence number.
    pub fn decrypt_request(&self, outer: &CoapMessage) -> Result<(CoapMessage, RequestBinding, u64), OscoreError> {
        let opt = decode_option(outer.option(option::OSCORE).ok_or(OscoreError::MissingOption)?)?;
        let piv = opt.piv.ok_or(OscoreError::MissingPiv)?;
        let kid = opt.kid.ok_or(OscoreError::UnknownKid)?;
        if kid != self.recipient_id {
            return Err(OscoreError::UnknownKid);
        }
        let nonce = self.nonce(&kid, &piv);
        let pt = Self::open(&self.recipient_key, &nonce, &aad(&kid, &piv), &outer.payload)?;
        let mut msg = parse_plaintext(&pt)?;
        merge_outer(&mut msg, outer)?;
        msg.mtype = outer.mtype;
        msg.token = outer.token.clone();
        msg.message_id = outer.message_id;
        let seq = piv_value(&piv);
        Ok((msg, RequestBinding { kid, piv }, seq))
    }

    /// Decrypts a request and enforces the replay window.
    pub fn unprotect_request(&mut self, outer: &CoapMessage) -> Result<(CoapMessage, RequestBinding), OscoreError> {
        let (msg, binding, seq) = self.decrypt_request(outer)?;
        if !self.replay.is_synchronized() {
            return Err(OscoreError::Unsynchronized);
        }
        if !self.replay.accept(seq) {
            return Err(OscoreError::Replay(seq));
        }
        Ok((msg, binding))
    }

    /// Protects a response. With `fresh_piv` the response uses its own
    /// partial IV instead of the request's nonce.
    pub fn protect_response(
        &mut self,
        msg: &CoapMessage,
        binding: &RequestBinding,
        fresh_piv: bool,
    ) -> Result<CoapMessage, OscoreError> {
        let (inner, outer_opts) = split_options(msg)?;
        let (nonce, opt) = if fresh_piv {
            let piv = self.next_piv()?;
            (self.nonce(&self.sender_id, &piv), encode_option(Some(&piv), None))
        } else {
            (self.nonce(&binding.kid, &binding.piv), Vec::new())
        };
        let ct = Self::seal(&self.sender_key, &nonce, &aad(&binding.kid, &binding.piv), &inner_plaintext(msg.code, &inner));
        let mut outer = outer_opts;
        outer.code = Code::CHANGED;
        outer.token = msg.token.clone();
        outer.message_id = msg.message_id;
        outer.add_option(option::OSCORE, opt);
        outer.payload = ct;
        Ok(outer)
    }

    pub fn unprotect_response(&self, outer: &CoapMessage, binding: &RequestBinding) -> Result<CoapMessage, OscoreError> {
        let opt = decode_option(outer.option(option::OSCORE).ok_or(OscoreError::MissingOption)?)?;
        let nonce = match &opt.piv {
            Some(piv) => self.nonce(&self.recipient_id, piv),
            None => self.nonce(&binding.kid, &binding.piv),
        };
        let pt = Self::open(&self.recipient_key, &nonce, &aad(&binding.kid, &binding.piv), &outer.payload)?;
        let mut msg = parse_plaintext(&pt)?;
        if let Some(outer_age) = outer.max_age() {
            if let Some(protected) = msg.max_age() {
                if outer_age > protected {
                    return Err(OscoreError::MaxAgeExtended { outer: outer_age, protected });
                }
            }
            msg.set_uint_option(option::MAX_AGE, outer_age);
        }
        msg.mtype = outer.mtype;
        msg.token = outer.token.clone();
        msg.message_id = outer.message_id;
        Ok(msg)
    }
}

/// Puts outer-only request options back, rebuilding a full Proxy-Uri from
/// its outer origin and the inner path and query.
fn merge_outer(msg: &mut CoapMessage, outer: &CoapMessage) -> Result<(), OscoreError> {
    for o in outer.options() {
        if o.number == option::PROXY_URI {
            let s = std::str::from_utf8(&o.value).map_err(|_| OscoreError::BadProxyUri("not UTF-8"))?;
            let mut uri = CoapUri::parse(s).map_err(|e| OscoreError::BadProxyUri(e.0))?;
            uri.path = msg.option_values(option::URI_PATH).map(<[u8]>::to_vec).collect();
            uri.query = msg.option_values(option::URI_QUERY).map(<[u8]>::to_vec).collect();
            msg.remove_option(option::URI_PATH);
            msg.remove_option(option::URI_QUERY);
            msg.add_option(option::PROXY_URI, uri.to_string().into_bytes());
        } else if OUTER_ONLY.contains(&o.number) && o.number != option::OSCORE {
            msg.add_option(o.number, o.value.clone());
        }
    }
    Ok(())
}

/// Server side of the Echo exchange that initializes a replay window.
#[derive(Clone, Debug, Default)]
pub struct EchoState {
    pending: Option<(Vec<u8>, Duration)>,
}

#[derive(Debug)]
pub enum RequestVerdict {
    Accept { msg: CoapMessage, binding: RequestBinding },
    /// Window not initialized: answer with 4.01 carrying this Echo value.
    Challenge { binding: RequestBinding, echo: Vec<u8> },
}

impl EchoState {
    pub fn verify_request<R: RngCore + ?Sized>(
        &mut self,
        ctx: &mut SecurityContext,
        outer: &CoapMessage,
        now: Duration,
        rng: &mut R,
    ) -> Result<RequestVerdict, OscoreError> {
        let (msg, binding, seq) = ctx.decrypt_request(outer)?;
        if ctx.replay.is_synchronized() {
            if !ctx.replay.accept(seq) {
                return Err(OscoreError::Replay(seq));
            }
            return Ok(RequestVerdict::Accept { msg, binding });
        }
        let fresh = match (&self.pending, msg.option(option::ECHO)) {
            (Some((value, issued)), Some(echo)) => echo == value.as_slice() && now.saturating_sub(*issued) <= ECHO_FRESHNESS,
            _ => false,
        };
        if fresh {
            self.pending = None;
            ctx.replay.synchronize(seq);
            return Ok(RequestVerdict::Accept { msg, binding });
        }
        let mut echo = vec![0u8; ECHO_LEN];
        rng.fill_bytes(&mut echo);
        self.pending = Some((echo.clone(), now));
        Ok(RequestVerdict::Challenge { binding, echo })
    }
}

/// The protected 4.01 response that carries an Echo challenge.
pub fn echo_challenge(
    ctx: &mut SecurityContext,
    request: &CoapMessage,
    binding: &RequestBinding,
    echo: &[u8],
) -> Result<CoapMessage, OscoreError> {
    let mut resp = CoapMessage::response_to(request, Code::UNAUTHORIZED);
    resp.add_option(option::ECHO, echo.to_vec());
    ctx.protect_response(&resp, binding, true)
}

/// JSON keying material shared by a client and a server.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KeyFile {
    pub master_secret: String,
    #[serde(default)]
    pub master_salt: String,
    pub client_id: String,
    pub server_id: String,
    #[serde(default = "default_window")]
    pub replay_window: u64,
}

fn default_window() -> u64 {
    DEFAULT_REPLAY_WINDOW
}

impl KeyFile {
    pub fn load(path: &Path) -> Result<Self, OscoreError> {
        let text = std::fs::read_to_string(path).map_err(|e| OscoreError::KeyFile(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| OscoreError::KeyFile(e.to_string()))
    }

    fn bytes(field: &str, v: &str) -> Result<Vec<u8>, OscoreError> {
        hex::decode(v).map_err(|e| OscoreError::KeyFile(format!("{field}: {e}")))
    }

    fn context(&self, client: bool) -> Result<SecurityContext, OscoreError> {
        let secret = Self::bytes("master_secret", &self.master_secret)?;
        let salt = Self::bytes("master_salt", &self.master_salt)?;
        let cid = Self::bytes("client_id", &self.client_id)?;
        let sid = Self::bytes("server_id", &self.server_id)?;
        let (s, r) = if client { (cid, sid) } else { (sid, cid) };
        Ok(SecurityContext::derive(&secret, &salt, &s, &r)?.with_replay_window(ReplayWindow::new(self.replay_window)))
    }

    pub fn client_context(&self) -> Result<SecurityContext, OscoreError> {
        self.context(true)
    }

    /// Server context with an uninitialized replay window, to be set up by
    /// an Echo exchange.
    pub fn server_context(&self) -> Result<SecurityContext, OscoreError> {
        let ctx = self.context(false)?;
        Ok(ctx.with_replay_window(ReplayWindow::unsynchronized(self.replay_window)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SECRET: &[u8] = b"\x01\x02\x03\x04\x05\x06\x07\x08\x09";

    fn pair() -> (SecurityContext, SecurityContext) {
        let c = SecurityContext::derive(SECRET, b"", &[0x01], &[]).unwrap();
        let s = SecurityContext::derive(SECRET, b"", &[], &[0x01]).unwrap();
        (c, s)
    }

    fn fetch() -> CoapMessage {
        let mut m = CoapMessage::request(Code::FETCH);
        m.token = vec![0xaa, 0xbb];
        m.message_id = 42;
        m.set_uri_path("/dns");
        m.add_uint_option(option::CONTENT_FORMAT, 553);
        m.payload = (0..42).collect();
        m
    }

    #[test]
    fn rfc8613_test_vector_keys() {
        // RFC 8613 Appendix C.1.1 (client side)
        let secret = hex::decode("0102030405060708090a0b0c0d0e0f10").unwrap();
        let salt = hex::decode("9e7ca92223786340").unwrap();
        let c = SecurityContext::derive(&secret, &salt, &[], &[0x01]).unwrap();
        assert_eq!(hex::encode(c.sender_key()), "f0910ed7295e6ad4b54fc793154302ff");
        assert_eq!(hex::encode(c.recipient_key()), "ffb14e093c94c9cac9471648b4f98710");
        assert_eq!(hex::encode(c.common_iv()), "4622d4dd6d944168eefb54987c");
    }

    #[test]
    fn derivation_is_symmetric_and_deterministic() {
        let (c, s) = pair();
        assert_eq!(c.sender_key(), s.recipient_key());
        assert_eq!(c.recipient_key(), s.sender_key());
        assert_eq!(c.common_iv(), s.common_iv());
        let again = SecurityContext::derive(SECRET, b"", &[0x01], &[]).unwrap();
        assert_eq!(again.sender_key(), c.sender_key());
        assert_eq!(SecurityContext::derive(SECRET, b"", &[1], &[1]).unwrap_err(), OscoreError::EqualIds);
        assert_eq!(SecurityContext::derive(SECRET, b"", &[0; 8], &[]).unwrap_err(), OscoreError::IdTooLong(8));
    }

    #[test]
    fn request_response_round_trip() {
        let (mut c, mut s) = pair();
        let req = fetch();
        let (outer, binding) = c.protect_request(&req).unwrap();
        assert_eq!(outer.code, Code::POST);
        assert_eq!(outer.token, req.token);
        assert!(outer.option(option::URI_PATH).is_none());
        assert!(outer.option(option::CONTENT_FORMAT).is_none());
        let (inner, sbind) = s.unprotect_request(&CoapMessage::decode(&outer.encode()).unwrap()).unwrap();
        assert_eq!(inner, req);
        assert_eq!(sbind, binding);

        let mut resp = CoapMessage::response_to(&inner, Code::CONTENT);
        resp.add_uint_option(option::MAX_AGE, 60);
        resp.add_option(option::ETAG, vec![1; 8]);
        resp.payload = vec![9; 70];
        let pout = s.protect_response(&resp, &sbind, false).unwrap();
        assert_eq!(pout.code, Code::CHANGED);
        assert_eq!(pout.max_age(), Some(60));
        assert!(pout.option(option::ETAG).is_none());
        assert_eq!(c.unprotect_response(&pout, &binding).unwrap(), resp);
    }

    #[test]
    fn ciphertext_expansion_is_tag_only() {
        let (mut c, _) = pair();
        let req = fetch();
        let (inner, _) = split_options(&req).unwrap();
        let pt = inner_plaintext(req.code, &inner);
        let (outer, _) = c.protect_request(&req).unwrap();
        assert_eq!(outer.payload.len(), pt.len() + TAG_LEN);
        // flag byte + 1-octet PIV + 1-octet kid
        assert_eq!(outer.option(option::OSCORE).unwrap().len(), 3);
    }

    #[test]
    fn replays_and_tampering_rejected() {
        let (mut c, mut s) = pair();
        let (outer, _) = c.protect_request(&fetch()).unwrap();
        s.unprotect_request(&outer).unwrap();
        assert_eq!(s.unprotect_request(&outer).unwrap_err(), OscoreError::Replay(0));
        let (mut outer2, _) = c.protect_request(&fetch()).unwrap();
        outer2.payload[3] ^= 0x40;
        assert_eq!(s.unprotect_request(&outer2).unwrap_err(), OscoreError::Authentication);
    }

    #[test]
    fn distinct_pivs_give_distinct_ciphertexts() {
        let (mut c, _) = pair();
        let (a, ba) = c.protect_request(&fetch()).unwrap();
        let (b, bb) = c.protect_request(&fetch()).unwrap();
        assert_ne!(a.payload, b.payload);
        assert_ne!(ba.piv, bb.piv);
    }

    #[test]
    fn outer_max_age_cannot_extend() {
        let (mut c, mut s) = pair();
        let (outer, binding) = c.protect_request(&fetch()).unwrap();
        let (inner, sb) = s.unprotect_request(&outer).unwrap();
        let mut resp = CoapMessage::response_to(&inner, Code::CONTENT);
        resp.add_uint_option(option::MAX_AGE, 60);
        let mut pout = s.protect_response(&resp, &sb, false).unwrap();
        pout.set_uint_option(option::MAX_AGE, 45);
        assert_eq!(c.unprotect_response(&pout, &binding).unwrap().max_age(), Some(45));
        pout.set_uint_option(option::MAX_AGE, 90);
        assert_eq!(
            c.unprotect_response(&pout, &binding).unwrap_err(),
            OscoreError::MaxAgeExtended { outer: 90, protected: 60 }
        );
    }

    #[test]
    fn proxy_uri_keeps_only_origin_outside() {
        let (mut c, mut s) = pair();
        let mut req = fetch();
        req.remove_option(option::URI_PATH);
        req.add_option(option::PROXY_URI, b"coap://resolver/dns".to_vec());
        let (outer, _) = c.protect_request(&req).unwrap();
        assert_eq!(outer.option(option::PROXY_URI), Some(&b"coap://resolver"[..]));
        let (inner, _) = s.unprotect_request(&outer).unwrap();
        assert_eq!(inner, req);
    }

    #[test]
    fn option_codec() {
        assert_eq!(encode_option(None, None), Vec::<u8>::new());
        assert_eq!(encode_option(Some(&[5]), Some(&[])), [0x09, 5]);
        let v = decode_option(&[0x19, 0x05, 0x02, 0xaa, 0xbb, 0x01]).unwrap();
        assert_eq!(v.piv, Some(vec![5]));
        assert_eq!(v.kid_context, Some(vec![0xaa, 0xbb]));
        assert_eq!(v.kid, Some(vec![1]));
        assert_eq!(decode_option(&[0x06, 0, 0, 0, 0, 0, 0]), Err(OscoreError::BadOption));
        assert_eq!(decode_option(&[0x20]), Err(OscoreError::BadOption));
        assert_eq!(piv_bytes(0), [0]);
        assert_eq!(piv_bytes(256), [1, 0]);
    }

    #[test]
    fn sequence_exhaustion() {
        let (mut c, _) = pair();
        c.set_sender_seq(MAX_SEQ);
        assert!(c.protect_request(&fetch()).is_ok());
        assert_eq!(c.protect_request(&fetch()).unwrap_err(), OscoreError::SequenceExhausted);
    }

    #[test]
    fn echo_initializes_window() {
        let (mut c, mut s) = pair();
        s.replay = ReplayWindow::unsynchronized(32);
        let mut echo_state = EchoState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (outer, binding) = c.protect_request(&fetch()).unwrap();
        let RequestVerdict::Challenge { binding: sb, echo } =
            echo_state.verify_request(&mut s, &outer, Duration::ZERO, &mut rng).unwrap()
        else {
            panic!("expected challenge")
        };
        let (inner, _, _) = s.decrypt_request(&outer).unwrap();
        let challenge = echo_challenge(&mut s, &inner, &sb, &echo).unwrap();
        let resp = c.unprotect_response(&challenge, &binding).unwrap();
        assert_eq!(resp.code, Code::UNAUTHORIZED);
        assert_eq!(resp.option(option::ECHO), Some(&echo[..]));

        let mut retry = fetch();
        retry.add_option(option::ECHO, echo.clone());
        let (outer2, _) = c.protect_request(&retry).unwrap();
        assert!(outer2.encode().len() >= outer.encode().len() + ECHO_LEN);
        let v = echo_state.verify_request(&mut s, &outer2, Duration::from_secs(1), &mut rng).unwrap();
        assert!(matches!(v, RequestVerdict::Accept { .. }));
        // the challenged request itself must not slip through afterwards
        assert!(echo_state.verify_request(&mut s, &outer, Duration::from_secs(2), &mut rng).is_err());
    }

    #[test]
    fn stale_echo_renews_challenge() {
        let (mut c, mut s) = pair();
        s.replay = ReplayWindow::unsynchronized(32);
        let mut st = EchoState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (outer, _) = c.protect_request(&fetch()).unwrap();
        let RequestVerdict::Challenge { echo, .. } = st.verify_request(&mut s, &outer, Duration::ZERO, &mut rng).unwrap() else {
            panic!()
        };
        let mut retry = fetch();
        retry.add_option(option::ECHO, echo);
        let (outer2, _) = c.protect_request(&retry).unwrap();
        let late = ECHO_FRESHNESS + Duration::from_secs(1);
        assert!(matches!(st.verify_request(&mut s, &outer2, late, &mut rng).unwrap(), RequestVerdict::Challenge { .. }));
    }

    #[test]
    fn keyfile_contexts_interoperate() {
        let kf: KeyFile = serde_json::from_str(
            r#"{"master_secret":"010203040506070809","client_id":"01","server_id":"","replay_window":64}"#,
        )
        .unwrap();
        let mut c = kf.client_context().unwrap();
        let mut s = kf.server_context().unwrap();
        assert!(!s.replay.is_synchronized());
        assert_eq!(s.replay.size(), 64);
        let (outer, _) = c.protect_request(&fetch()).unwrap();
        assert_eq!(s.unprotect_request(&outer).unwrap_err(), OscoreError::Unsynchronized);
    }
}

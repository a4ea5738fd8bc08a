//! CoAP message codec, block-wise transfer, confirmable reliability and a
//! sans-IO messaging endpoint.

pub mod block;
pub mod endpoint;
pub mod reliability;
pub mod uri;

use std::fmt;

use thiserror::Error;

pub use block::{slice_body, BlockOption};
pub use endpoint::{Endpoint, EndpointEvent, Transmit};
pub use reliability::{retransmission_schedule, ExchangeEvent, ExchangeState, FailCause, StepOutcome, TransmissionParams};

pub const VERSION: u8 = 1;
pub const PAYLOAD_MARKER: u8 = 0xff;
pub const MAX_TOKEN_LEN: usize = 8;
/// Max-Age assumed when a response carries no Max-Age option.
pub const DEFAULT_MAX_AGE: u32 = 60;

/// Option numbers used in this crate.
pub mod option {
    pub const IF_MATCH: u16 = 1;
    pub const URI_HOST: u16 = 3;
    pub const ETAG: u16 = 4;
    pub const URI_PORT: u16 = 7;
    pub const OSCORE: u16 = 9;
    pub const URI_PATH: u16 = 11;
    pub const CONTENT_FORMAT: u16 = 12;
    pub const MAX_AGE: u16 = 14;
    pub const URI_QUERY: u16 = 15;
    pub const ACCEPT: u16 = 17;
    pub const BLOCK2: u16 = 23;
    pub const BLOCK1: u16 = 27;
    pub const PROXY_URI: u16 = 35;
    pub const ECHO: u16 = 252;
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CoapError {
    #[error("datagram shorter than the 4-octet header")]
    Truncated,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("token length {0} exceeds 8")]
    TokenTooLong(usize),
    #[error("malformed option at offset {0}")]
    BadOption(usize),
    #[error("option number overflow at offset {0}")]
    OptionOverflow(usize),
    #[error("payload marker followed by empty payload")]
    EmptyPayload,
    #[error("reserved block size exponent 7")]
    ReservedSzx,
    #[error("block number {0} does not fit in 20 bits")]
    BlockNumberTooLarge(u32),
    #[error("block size {0} is not a power of two between 16 and 1024")]
    BadBlockSize(usize),
    #[error("block {got} received while expecting block {expected}")]
    UnexpectedBlock { expected: u32, got: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MessageType {
    Confirmable,
    NonConfirmable,
    Acknowledgement,
    Reset,
}

impl MessageType {
    fn bits(self) -> u8 {
        match self {
            MessageType::Confirmable => 0,
            MessageType::NonConfirmable => 1,
            MessageType::Acknowledgement => 2,
            MessageType::Reset => 3,
        }
    }

    fn from_bits(b: u8) -> Self {
        match b & 3 {
            0 => MessageType::Confirmable,
            1 => MessageType::NonConfirmable,
            2 => MessageType::Acknowledgement,
            _ => MessageType::Reset,
        }
    }
}

/// Request method or response code, `class.detail`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Code(pub u8);

impl Code {
    pub const EMPTY: Code = Code::new(0, 0);
    pub const GET: Code = Code::new(0, 1);
    pub const POST: Code = Code::new(0, 2);
    pub const PUT: Code = Code::new(0, 3);
    pub const DELETE: Code = Code::new(0, 4);
    pub const FETCH: Code = Code::new(0, 5);
    pub const CHANGED: Code = Code::new(2, 4);
    pub const VALID: Code = Code::new(2, 3);
    pub const CONTENT: Code = Code::new(2, 5);
    pub const CONTINUE: Code = Code::new(2, 31);
    pub const BAD_REQUEST: Code = Code::new(4, 0);
    pub const UNAUTHORIZED: Code = Code::new(4, 1);
    pub const BAD_OPTION: Code = Code::new(4, 2);
    pub const NOT_FOUND: Code = Code::new(4, 4);
    pub const METHOD_NOT_ALLOWED: Code = Code::new(4, 5);
    pub const REQUEST_ENTITY_INCOMPLETE: Code = Code::new(4, 8);
    pub const UNSUPPORTED_CONTENT_FORMAT: Code = Code::new(4, 15);
    pub const INTERNAL_SERVER_ERROR: Code = Code::new(5, 0);
    pub const BAD_GATEWAY: Code = Code::new(5, 2);
    pub const GATEWAY_TIMEOUT: Code = Code::new(5, 4);
    pub const PROXYING_NOT_SUPPORTED: Code = Code::new(5, 5);

    pub const fn new(class: u8, detail: u8) -> Code {
        Code((class << 5) | (detail & 0x1f))
    }

    pub fn class(self) -> u8 {
        self.0 >> 5
    }

    pub fn detail(self) -> u8 {
        self.0 & 0x1f
    }

    pub fn is_request(self) -> bool {
        self.class() == 0 && self.0 != 0
    }

    pub fn is_response(self) -> bool {
        (2..=5).contains(&self.class())
    }

    pub fn is_success(self) -> bool {
        self.class() == 2
    }
}

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.class(), self.detail())
    }
}

impl fmt::Debug for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CoapOption {
    pub number: u16,
    pub value: Vec<u8>,
}

/// Minimal big-endian encoding of an unsigned option value; zero is empty.
pub fn encode_uint(v: u32) -> Vec<u8> {
    let bytes = v.to_be_bytes();
    let skip = bytes.iter().take_while(|&&b| b == 0).count();
    bytes[skip..].to_vec()
}

pub fn decode_uint(v: &[u8]) -> Option<u32> {
    if v.len() > 4 {
        return None;
    }
    Some(v.iter().fold(0u32, |acc, &b| (acc << 8) | b as u32))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoapMessage {
    pub mtype: MessageType,
    pub code: Code,
    pub message_id: u16,
    pub token: Vec<u8>,
    options: Vec<CoapOption>,
    pub payload: Vec<u8>,
}

impl CoapMessage {
    pub fn new(mtype: MessageType, code: Code) -> Self {
        CoapMessage { mtype, code, message_id: 0, token: Vec::new(), options: Vec::new(), payload: Vec::new() }
    }

    pub fn request(code: Code) -> Self {
        Self::new(MessageType::Confirmable, code)
    }

    /// A response skeleton echoing the request's token.
    pub fn response_to(req: &CoapMessage, code: Code) -> Self {
        let mut m = Self::new(MessageType::Acknowledgement, code);
        m.token = req.token.clone();
        m.message_id = req.message_id;
        m
    }

    pub fn empty_ack(message_id: u16) -> Self {
        let mut m = Self::new(MessageType::Acknowledgement, Code::EMPTY);
        m.message_id = message_id;
        m
    }

    pub fn reset(message_id: u16) -> Self {
        let mut m = Self::new(MessageType::Reset, Code::EMPTY);
        m.message_id = message_id;
        m
    }

    pub fn is_empty(&self) -> bool {
        self.code == Code::EMPTY
    }

    /// Options in serialization order.
    pub fn options(&self) -> &[CoapOption] {
        &self.options
    }

    /// Inserts an option after any existing options with the same number.
    pub fn add_option(&mut self, number: u16, value: impl Into<Vec<u8>>) {
        let at = self.options.partition_point(|o| o.number <= number);
        self.options.insert(at, CoapOption { number, value: value.into() });
    }

    pub fn add_uint_option(&mut self, number: u16, value: u32) {
        self.add_option(number, encode_uint(value));
    }

    pub fn set_option(&mut self, number: u16, value: impl Into<Vec<u8>>) {
        self.remove_option(number);
        self.add_option(number, value);
    }

    pub fn set_uint_option(&mut self, number: u16, value: u32) {
        self.set_option(number, encode_uint(value));
    }

    pub fn remove_option(&mut self, number: u16) {
        self.options.retain(|o| o.number != number);
    }

    pub fn option(&self, number: u16) -> Option<&[u8]> {
        self.options.iter().find(|o| o.number == number).map(|o| o.value.as_slice())
    }

    pub fn option_values(&self, number: u16) -> impl Iterator<Item = &[u8]> {
        self.options.iter().filter(move |o| o.number == number).map(|o| o.value.as_slice())
    }

    pub fn uint_option(&self, number: u16) -> Option<u32> {
        self.option(number).and_then(decode_uint)
    }

    pub fn max_age(&self) -> Option<u32> {
        self.uint_option(option::MAX_AGE)
    }

    pub fn content_format(&self) -> Option<u32> {
        self.uint_option(option::CONTENT_FORMAT)
    }

    /// Uri-Path segments joined with `/`, with a leading slash.
    pub fn uri_path(&self) -> String {
        let mut s = String::new();
        for seg in self.option_values(option::URI_PATH) {
            s.push('/');
            s.push_str(&String::from_utf8_lossy(seg));
        }
        if s.is_empty() {
            s.push('/');
        }
        s
    }

    pub fn set_uri_path(&mut self, path: &str) {
        self.remove_option(option::URI_PATH);
        for seg in path.split('/').filter(|s| !s.is_empty()) {
            self.add_option(option::URI_PATH, seg.as_bytes().to_vec());
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.token.len() + self.payload.len() + 16);
        let tkl = self.token.len().min(MAX_TOKEN_LEN) as u8;
        out.push((VERSION << 6) | (self.mtype.bits() << 4) | tkl);
        out.push(self.code.0);
        out.extend_from_slice(&self.message_id.to_be_bytes());
        out.extend_from_slice(&self.token[..tkl as usize]);
        let mut prev = 0u16;
        let mut sorted: Vec<&CoapOption> = self.options.iter().collect();
        sorted.sort_by_key(|o| o.number);
        for opt in sorted {
            write_option(&mut out, opt.number - prev, &opt.value);
            prev = opt.number;
        }
        if !self.payload.is_empty() {
            out.push(PAYLOAD_MARKER);
            out.extend_from_slice(&self.payload);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CoapError> {
        if bytes.len() < 4 {
            return Err(CoapError::Truncated);
        }
        let version = bytes[0] >> 6;
        if version != VERSION {
            return Err(CoapError::BadVersion(version));
        }
        let mtype = MessageType::from_bits(bytes[0] >> 4);
        let tkl = (bytes[0] & 0x0f) as usize;
        if tkl > MAX_TOKEN_LEN {
            return Err(CoapError::TokenTooLong(tkl));
        }
        let code = Code(bytes[1]);
        let message_id = u16::from_be_bytes([bytes[2], bytes[3]]);
        let token = bytes.get(4..4 + tkl).ok_or(CoapError::Truncated)?.to_vec();
        let mut pos = 4 + tkl;
        let mut options = Vec::new();
        let mut number: u32 = 0;
        let mut payload = Vec::new();
        while pos < bytes.len() {
            let start = pos;
            let b = bytes[pos];
            pos += 1;
            if b == PAYLOAD_MARKER {
                if pos == bytes.len() {
                    return Err(CoapError::EmptyPayload);
                }
                payload = bytes[pos..].to_vec();
                break;
            }
            let delta = read_ext(bytes, &mut pos, b >> 4, start)?;
            let len = read_ext(bytes, &mut pos, b & 0x0f, start)? as usize;
            number += delta;
            if number > u16::MAX as u32 {
                return Err(CoapError::OptionOverflow(start));
            }
            let value = bytes.get(pos..pos + len).ok_or(CoapError::BadOption(start))?.to_vec();
            pos += len;
            options.push(CoapOption { number: number as u16, value });
        }
        Ok(CoapMessage { mtype, code, message_id, token, options, payload })
    }
}

fn write_option(out: &mut Vec<u8>, delta: u16, value: &[u8]) {
    fn nibble(v: usize) -> (u8, Vec<u8>) {
        match v {
            0..=12 => (v as u8, vec![]),
            13..=268 => (13, vec![(v - 13) as u8]),
            _ => (14, ((v - 269) as u16).to_be_bytes().to_vec()),
        }
    }
    let (d, dext) = nibble(delta as usize);
    let (l, lext) = nibble(value.len());
    out.push((d << 4) | l);
    out.extend_from_slice(&dext);
    out.extend_from_slice(&lext);
    out.extend_from_slice(value);
}

fn read_ext(bytes: &[u8], pos: &mut usize, nibble: u8, start: usize) -> Result<u32, CoapError> {
    match nibble {
        0..=12 => Ok(nibble as u32),
        13 => {
            let b = *bytes.get(*pos).ok_or(CoapError::BadOption(start))?;
            *pos += 1;
            Ok(b as u32 + 13)
        }
        14 => {
            let b = bytes.get(*pos..*pos + 2).ok_or(CoapError::BadOption(start))?;
            *pos += 2;
            Ok(u16::from_be_bytes([b[0], b[1]]) as u32 + 269)
        }
        _ => Err(CoapError::BadOption(start)),
    }
}

/// Size of one serialized option with the given delta and value length.
pub fn option_len(delta: u16, value_len: usize) -> usize {
    let ext = |v: usize| match v {
        0..=12 => 0,
        13..=268 => 1,
        _ => 2,
    };
    1 + ext(delta as usize) + ext(value_len) + value_len
}

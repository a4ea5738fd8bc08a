//! DNS wire-format codec and the TTL helpers used by the caching schemes.
//!
//! Encoding emits one compression pointer per record whose owner name equals
//! the question name (pointing at offset 12); every other name is written
//! uncompressed. Decoding follows arbitrary pointer chains.

mod name;

use std::fmt;
use std::net::{Ipv4Addr, Ipv6Addr};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

pub use name::{DnsName, MAX_LABEL_LEN, MAX_NAME_LEN};

pub const HEADER_LEN: usize = 12;

/// Offset of the question name in every message this codec writes.
const QUESTION_NAME_OFFSET: u16 = HEADER_LEN as u16;

/// Default cap on the total number of records decoded from one message.
pub const DEFAULT_MAX_RECORDS: usize = 1024;

pub mod flags {
    pub const QR: u16 = 0x8000;
    pub const RD: u16 = 0x0100;
    pub const RA: u16 = 0x0080;
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DnsError {
    #[error("message truncated at offset {0}")]
    Truncated(usize),
    #[error("compression pointer loop at offset {0}")]
    PointerLoop(usize),
    #[error("label of {len} octets{} exceeds 63", offset.map(|o| format!(" at offset {o}")).unwrap_or_default())]
    LabelTooLong { offset: Option<usize>, len: usize },
    #[error("reserved label type 0x{byte:02x} at offset {offset}")]
    BadLabelType { offset: usize, byte: u8 },
    #[error("empty label")]
    EmptyLabel,
    #[error("encoded name of {0} octets exceeds 255")]
    NameTooLong(usize),
    #[error("{count} records exceed the configured cap of {cap}")]
    TooManyRecords { count: usize, cap: usize },
    #[error("{rtype} record carries {len} octets of rdata at offset {offset}")]
    BadRdataLength { offset: usize, rtype: RecordType, len: usize },
    #[error("message carries {0} questions, at most one is supported")]
    MultipleQuestions(u16),
    #[error("{0} trailing octets after the last record")]
    TrailingData(usize),
    #[error("message has no records")]
    NoRecords,
    #[error("unknown record type {0:?}")]
    UnknownType(String),
}

/// A record type code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordType(pub u16);

impl RecordType {
    pub const A: RecordType = RecordType(1);
    pub const NS: RecordType = RecordType(2);
    pub const PTR: RecordType = RecordType(12);
    pub const TXT: RecordType = RecordType(16);
    pub const AAAA: RecordType = RecordType(28);
    pub const SRV: RecordType = RecordType(33);
    pub const OPT: RecordType = RecordType(41);
    pub const HTTPS: RecordType = RecordType(65);
    pub const ANY: RecordType = RecordType(255);

    const NAMES: [(RecordType, &'static str); 9] = [
        (RecordType::A, "A"),
        (RecordType::NS, "NS"),
        (RecordType::PTR, "PTR"),
        (RecordType::TXT, "TXT"),
        (RecordType::AAAA, "AAAA"),
        (RecordType::SRV, "SRV"),
        (RecordType::OPT, "OPT"),
        (RecordType::HTTPS, "HTTPS"),
        (RecordType::ANY, "ANY"),
    ];

    /// Fixed rdata length for address types.
    pub fn fixed_rdata_len(self) -> Option<usize> {
        match self {
            RecordType::A => Some(4),
            RecordType::AAAA => Some(16),
            _ => None,
        }
    }
}

impl fmt::Display for RecordType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match RecordType::NAMES.iter().find(|(t, _)| t == self) {
            Some((_, name)) => f.write_str(name),
            None => write!(f, "TYPE{}", self.0),
        }
    }
}

impl FromStr for RecordType {
    type Err = DnsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some((t, _)) = RecordType::NAMES.iter().find(|(_, n)| n.eq_ignore_ascii_case(s)) {
            return Ok(*t);
        }
        let upper = s.to_ascii_uppercase();
        upper
            .strip_prefix("TYPE")
            .and_then(|n| n.parse().ok())
            .or_else(|| s.parse().ok())
            .map(RecordType)
            .ok_or_else(|| DnsError::UnknownType(s.to_string()))
    }
}

pub const CLASS_IN: u16 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DnsQuestion {
    pub name: DnsName,
    pub rtype: RecordType,
    pub rclass: u16,
}

impl DnsQuestion {
    pub fn new(name: DnsName, rtype: RecordType) -> Self {
        DnsQuestion { name, rtype, rclass: CLASS_IN }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DnsRecord {
    pub name: DnsName,
    pub rtype: RecordType,
    pub rclass: u16,
    pub ttl: u32,
    pub rdata: Vec<u8>,
}

impl DnsRecord {
    pub fn a(name: DnsName, ttl: u32, addr: Ipv4Addr) -> Self {
        DnsRecord { name, rtype: RecordType::A, rclass: CLASS_IN, ttl, rdata: addr.octets().to_vec() }
    }

    pub fn aaaa(name: DnsName, ttl: u32, addr: Ipv6Addr) -> Self {
        DnsRecord { name, rtype: RecordType::AAAA, rclass: CLASS_IN, ttl, rdata: addr.octets().to_vec() }
    }

    /// Presentation form of the rdata for address records, hex otherwise.
    pub fn rdata_text(&self) -> String {
        match (self.rtype, self.rdata.len()) {
            (RecordType::A, 4) => {
                let o: [u8; 4] = self.rdata[..].try_into().unwrap();
                Ipv4Addr::from(o).to_string()
            }
            (RecordType::AAAA, 16) => {
                let o: [u8; 16] = self.rdata[..].try_into().unwrap();
                Ipv6Addr::from(o).to_string()
            }
            _ => hex::encode(&self.rdata),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct DnsMessage {
    pub id: u16,
    /// Raw flags word. QR, RD and RA are interpreted; opcode and rcode are
    /// carried through untouched.
    pub flags: u16,
    pub question: Option<DnsQuestion>,
    pub answers: Vec<DnsRecord>,
    pub authority: Vec<DnsRecord>,
    pub additional: Vec<DnsRecord>,
}

impl DnsMessage {
    pub fn query(name: DnsName, rtype: RecordType, id: u16) -> Self {
        DnsMessage {
            id,
            flags: flags::RD,
            question: Some(DnsQuestion::new(name, rtype)),
            ..Default::default()
        }
    }

    pub fn is_response(&self) -> bool {
        self.flags & flags::QR != 0
    }

    pub fn rcode(&self) -> u8 {
        (self.flags & 0x000f) as u8
    }

    pub fn records(&self) -> impl Iterator<Item = &DnsRecord> {
        self.answers.iter().chain(&self.authority).chain(&self.additional)
    }

    fn records_mut(&mut self) -> impl Iterator<Item = &mut DnsRecord> {
        self.answers
            .iter_mut()
            .chain(self.authority.iter_mut())
            .chain(self.additional.iter_mut())
    }

    pub fn record_count(&self) -> usize {
        self.answers.len() + self.authority.len() + self.additional.len()
    }

    /// Serializes the message. Records whose owner equals the question name
    /// are written as a pointer to offset 12.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        out.extend_from_slice(&self.id.to_be_bytes());
        out.extend_from_slice(&self.flags.to_be_bytes());
        out.extend_from_slice(&(self.question.is_some() as u16).to_be_bytes());
        for section in [&self.answers, &self.authority, &self.additional] {
            out.extend_from_slice(&(section.len() as u16).to_be_bytes());
        }
        if let Some(q) = &self.question {
            q.name.write_uncompressed(&mut out);
            out.extend_from_slice(&q.rtype.0.to_be_bytes());
            out.extend_from_slice(&q.rclass.to_be_bytes());
        }
        let qname = self.question.as_ref().map(|q| &q.name);
        for rr in self.records() {
            if qname == Some(&rr.name) && !rr.name.is_root() {
                out.extend_from_slice(&(0xc000 | QUESTION_NAME_OFFSET).to_be_bytes());
            } else {
                rr.name.write_uncompressed(&mut out);
            }
            out.extend_from_slice(&rr.rtype.0.to_be_bytes());
            out.extend_from_slice(&rr.rclass.to_be_bytes());
            out.extend_from_slice(&rr.ttl.to_be_bytes());
            out.extend_from_slice(&(rr.rdata.len() as u16).to_be_bytes());
            out.extend_from_slice(&rr.rdata);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DnsError> {
        Self::decode_with_cap(bytes, DEFAULT_MAX_RECORDS)
    }

    /// Decodes with an explicit cap on the total record count.
    pub fn decode_with_cap(bytes: &[u8], max_records: usize) -> Result<Self, DnsError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let id = r.u16()?;
        let flags = r.u16()?;
        let qdcount = r.u16()?;
        let counts = [r.u16()? as usize, r.u16()? as usize, r.u16()? as usize];
        let total: usize = counts.iter().sum();
        if total > max_records {
            return Err(DnsError::TooManyRecords { count: total, cap: max_records });
        }
        if qdcount > 1 {
            return Err(DnsError::MultipleQuestions(qdcount));
        }
        let question = if qdcount == 1 {
            let name = r.name()?;
            let rtype = RecordType(r.u16()?);
            let rclass = r.u16()?;
            Some(DnsQuestion { name, rtype, rclass })
        } else {
            None
        };
        let mut sections: [Vec<DnsRecord>; 3] = Default::default();
        for (section, &count) in sections.iter_mut().zip(&counts) {
            section.reserve(count);
            for _ in 0..count {
                section.push(r.record()?);
            }
        }
        if r.pos != bytes.len() {
            return Err(DnsError::TrailingData(bytes.len() - r.pos));
        }
        let [answers, authority, additional] = sections;
        Ok(DnsMessage { id, flags, question, answers, authority, additional })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DnsError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(DnsError::Truncated(self.pos)),
        }
    }

    fn u16(&mut self) -> Result<u16, DnsError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, DnsError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Reads a possibly compressed name starting at the cursor.
    fn name(&mut self) -> Result<DnsName, DnsError> {
        let mut labels = Vec::new();
        let mut wire_len = 1;
        let mut pos = self.pos;
        let mut resume = None;
        let mut jumps = 0;
        loop {
            let len = *self.buf.get(pos).ok_or(DnsError::Truncated(pos))?;
            match len & 0xc0 {
                0x00 => {
                    if len == 0 {
                        pos += 1;
                        break;
                    }
                    let start = pos + 1;
                    let end = start + len as usize;
                    let label = self.buf.get(start..end).ok_or(DnsError::Truncated(start))?;
                    wire_len += label.len() + 1;
                    if wire_len > MAX_NAME_LEN {
                        return Err(DnsError::NameTooLong(wire_len));
                    }
                    labels.push(label.to_vec());
                    pos = end;
                }
                0xc0 => {
                    let low = *self.buf.get(pos + 1).ok_or(DnsError::Truncated(pos + 1))?;
                    let target = (((len & 0x3f) as usize) << 8) | low as usize;
                    // Each jump must land strictly before the previous one
                    // or the chain may cycle; the jump budget also bounds it.
                    jumps += 1;
                    if target >= pos || jumps > 127 {
                        return Err(DnsError::PointerLoop(pos));
                    }
                    if resume.is_none() {
                        resume = Some(pos + 2);
                    }
                    pos = target;
                }
                0x40 | 0x80 => return Err(DnsError::BadLabelType { offset: pos, byte: len }),
                _ => unreachable!(),
            }
        }
        self.pos = resume.unwrap_or(pos);
        Ok(DnsName::from_labels_unchecked(labels))
    }

    fn record(&mut self) -> Result<DnsRecord, DnsError> {
        let name = self.name()?;
        let rtype = RecordType(self.u16()?);
        let rclass = self.u16()?;
        let ttl = self.u32()?;
        let rdlen = self.u16()? as usize;
        let offset = self.pos;
        let rdata = self.take(rdlen)?.to_vec();
        if let Some(expected) = rtype.fixed_rdata_len() {
            if rdlen != expected {
                return Err(DnsError::BadRdataLength { offset, rtype, len: rdlen });
            }
        }
        Ok(DnsRecord { name, rtype, rclass, ttl, rdata })
    }
}

impl DnsName {
    fn from_labels_unchecked(labels: Vec<Vec<u8>>) -> Self {
        // Label lengths are bounded by the 6-bit length field and the
        // total by the reader's running check.
        DnsName::from_labels(labels).expect("reader enforces name limits")
    }
}

/// Wire bytes of a recursion-desired query with a single question.
pub fn encode_query(name: &DnsName, rtype: RecordType, id: u16) -> Vec<u8> {
    DnsMessage::query(name.clone(), rtype, id).encode()
}

/// A response to `question` carrying `records` in the answer section.
pub fn build_response(question: &DnsQuestion, records: Vec<DnsRecord>, id: u16) -> DnsMessage {
    DnsMessage {
        id,
        flags: flags::QR | flags::RD | flags::RA,
        question: Some(question.clone()),
        answers: records,
        ..Default::default()
    }
}

/// Smallest TTL over all sections.
pub fn min_ttl(msg: &DnsMessage) -> Result<u32, DnsError> {
    msg.records().map(|r| r.ttl).min().ok_or(DnsError::NoRecords)
}

pub fn rewrite_ttls(msg: &DnsMessage, value: u32) -> DnsMessage {
    let mut out = msg.clone();
    for rr in out.records_mut() {
        rr.ttl = value;
    }
    out
}

/// Orders the answer section by (type, rdata). Ties fall back to owner
/// name, class and TTL so the order is total.
pub fn sort_records(msg: &DnsMessage) -> DnsMessage {
    let mut out = msg.clone();
    out.answers.sort_by_cached_key(|r| {
        let mut owner = Vec::with_capacity(r.name.wire_len());
        r.name.write_uncompressed(&mut owner);
        owner.make_ascii_lowercase();
        (r.rtype, r.rdata.clone(), owner, r.rclass, r.ttl)
    });
    out
}

/// Uniformly permutes the answer section.
pub fn shuffle_records<R: Rng + ?Sized>(msg: &DnsMessage, rng: &mut R) -> DnsMessage {
    let mut out = msg.clone();
    out.answers.shuffle(rng);
    out
}

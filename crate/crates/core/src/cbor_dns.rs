//! Compact CBOR representation of DNS questions and answers.
//!
//! Question: `[name, type?, class?]` with type defaulting to AAAA and class
//! to IN. Only trailing elements may be left out.
//!
//! Response, single-array form: `[[ttl, rdata, type?], ...]`. Owner names
//! are elided and recovered from the request the response matches; a missing
//! type means the question's type.
//!
//! Response, two-array form: `[question, [[ttl, rdata, type?, name?], ...]]`.
//! Used when some answer is owned by another name, and decodable without the
//! request. An entry carrying a name must also carry its type.
//!
//! Authority and additional sections are not carried. Only class IN records
//! can be represented in answers.

use thiserror::Error;

use crate::cbor::{CborError, Value};
use crate::dns::{build_response, DnsError, DnsMessage, DnsName, DnsQuestion, DnsRecord, RecordType, CLASS_IN};

/// Content-Format for payloads in this encoding.
pub const CONTENT_FORMAT: u16 = 65053;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CborDnsError {
    #[error(transparent)]
    Cbor(#[from] CborError),
    #[error(transparent)]
    Dns(#[from] DnsError),
    #[error("malformed structure: {0}")]
    Malformed(&'static str),
    #[error("value {0} out of range")]
    OutOfRange(u64),
    #[error("class {0} cannot be represented")]
    UnsupportedClass(u16),
    #[error("rdata of {len} octets is invalid for type {rtype}")]
    BadRdataLength { rtype: RecordType, len: usize },
    #[error("single-array response needs the matching question")]
    MissingQuestion,
}

fn question_value(q: &DnsQuestion) -> Value {
    let mut items = vec![Value::Text(q.name.to_string())];
    if q.rclass != CLASS_IN {
        items.push(Value::Unsigned(q.rtype.0 as u64));
        items.push(Value::Unsigned(q.rclass as u64));
    } else if q.rtype != RecordType::AAAA {
        items.push(Value::Unsigned(q.rtype.0 as u64));
    }
    Value::Array(items)
}

pub fn compress_query(q: &DnsQuestion) -> Vec<u8> {
    question_value(q).encode()
}

fn u16_of(v: &Value) -> Result<u16, CborDnsError> {
    let n = v.as_unsigned().ok_or(CborDnsError::Malformed("expected unsigned integer"))?;
    u16::try_from(n).map_err(|_| CborDnsError::OutOfRange(n))
}

fn name_of(v: &Value) -> Result<DnsName, CborDnsError> {
    match v {
        Value::Text(t) => Ok(t.parse()?),
        _ => Err(CborDnsError::Malformed("expected text name")),
    }
}

fn parse_question(v: &Value) -> Result<DnsQuestion, CborDnsError> {
    let items = v.as_array().ok_or(CborDnsError::Malformed("question is not an array"))?;
    if items.is_empty() || items.len() > 3 {
        return Err(CborDnsError::Malformed("question needs 1 to 3 elements"));
    }
    let name = name_of(&items[0])?;
    let rtype = items.get(1).map(u16_of).transpose()?.map_or(RecordType::AAAA, RecordType);
    let rclass = items.get(2).map(u16_of).transpose()?.unwrap_or(CLASS_IN);
    Ok(DnsQuestion { name, rtype, rclass })
}

pub fn decompress_query(bytes: &[u8]) -> Result<DnsQuestion, CborDnsError> {
    parse_question(&Value::decode(bytes)?)
}

fn entry_value(rr: &DnsRecord, q: &DnsQuestion) -> Result<Value, CborDnsError> {
    if rr.rclass != CLASS_IN {
        return Err(CborDnsError::UnsupportedClass(rr.rclass));
    }
    let mut items = vec![Value::Unsigned(rr.ttl as u64), Value::Bytes(rr.rdata.clone())];
    let own_name = rr.name == q.name;
    if !own_name || rr.rtype != q.rtype {
        items.push(Value::Unsigned(rr.rtype.0 as u64));
    }
    if !own_name {
        items.push(Value::Text(rr.name.to_string()));
    }
    Ok(Value::Array(items))
}

fn entries(msg: &DnsMessage, q: &DnsQuestion) -> Result<Value, CborDnsError> {
    msg.answers.iter().map(|rr| entry_value(rr, q)).collect::<Result<_, _>>().map(Value::Array)
}

/// Compresses the answer section of `msg`, which answers `question`. Falls
/// back to the two-array form when some answer has a different owner.
pub fn compress_response(msg: &DnsMessage, question: &DnsQuestion) -> Result<Vec<u8>, CborDnsError> {
    if msg.answers.iter().all(|rr| rr.name == question.name) {
        Ok(entries(msg, question)?.encode())
    } else {
        compress_response_with_question(msg, question)
    }
}

/// Two-array form, self-describing.
pub fn compress_response_with_question(msg: &DnsMessage, question: &DnsQuestion) -> Result<Vec<u8>, CborDnsError> {
    Ok(Value::Array(vec![question_value(question), entries(msg, question)?]).encode())
}

fn parse_entry(v: &Value, q: &DnsQuestion) -> Result<DnsRecord, CborDnsError> {
    let items = v.as_array().ok_or(CborDnsError::Malformed("answer entry is not an array"))?;
    if items.len() < 2 || items.len() > 4 {
        return Err(CborDnsError::Malformed("answer entry needs 2 to 4 elements"));
    }
    let ttl = items[0].as_unsigned().ok_or(CborDnsError::Malformed("ttl is not an unsigned integer"))?;
    let ttl = u32::try_from(ttl).map_err(|_| CborDnsError::OutOfRange(ttl))?;
    let Value::Bytes(rdata) = &items[1] else {
        return Err(CborDnsError::Malformed("rdata is not a byte string"));
    };
    let rtype = items.get(2).map(u16_of).transpose()?.map_or(q.rtype, RecordType);
    let name = items.get(3).map(name_of).transpose()?.unwrap_or_else(|| q.name.clone());
    if rtype.fixed_rdata_len().is_some_and(|l| l != rdata.len()) || rdata.len() > u16::MAX as usize {
        return Err(CborDnsError::BadRdataLength { rtype, len: rdata.len() });
    }
    Ok(DnsRecord { name, rtype, rclass: CLASS_IN, ttl, rdata: rdata.clone() })
}

/// Reverses [`compress_response`]. The question is required for the
/// single-array form and ignored for the two-array form.
pub fn decompress_response(bytes: &[u8], question: Option<&DnsQuestion>) -> Result<DnsMessage, CborDnsError> {
    let top = Value::decode(bytes)?;
    let items = top.as_array().ok_or(CborDnsError::Malformed("response is not an array"))?;
    let two_array = items.len() == 2
        && items[0].as_array().is_some_and(|q| matches!(q.first(), Some(Value::Text(_))));
    let (q, list) = if two_array {
        (parse_question(&items[0])?, &items[1])
    } else {
        (question.ok_or(CborDnsError::MissingQuestion)?.clone(), &top)
    };
    let list = list.as_array().ok_or(CborDnsError::Malformed("answers are not an array"))?;
    let answers = list.iter().map(|e| parse_entry(e, &q)).collect::<Result<Vec<_>, _>>()?;
    Ok(build_response(&q, answers, 0))
}

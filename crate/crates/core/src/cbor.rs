//! The slice of CBOR this crate needs: unsigned integers, byte and text
//! strings, arrays and `null`, definite lengths only, with minimal-length
//! argument encoding enforced in both directions.

use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Value {
    Unsigned(u64),
    Bytes(Vec<u8>),
    Text(String),
    Array(Vec<Value>),
    Null,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CborError {
    #[error("input ends at offset {0}")]
    Eof(usize),
    #[error("non-minimal argument encoding at offset {0}")]
    NonCanonical(usize),
    #[error("indefinite length at offset {0}")]
    Indefinite(usize),
    #[error("unsupported major type {major} at offset {offset}")]
    Unsupported { offset: usize, major: u8 },
    #[error("text string at offset {0} is not UTF-8")]
    Utf8(usize),
    #[error("{0} trailing octets")]
    Trailing(usize),
    #[error("nesting too deep")]
    TooDeep,
}

const MAJOR_UNSIGNED: u8 = 0;
const MAJOR_BYTES: u8 = 2;
const MAJOR_TEXT: u8 = 3;
const MAJOR_ARRAY: u8 = 4;
const MAJOR_SIMPLE: u8 = 7;
const SIMPLE_NULL: u8 = 22;
const MAX_DEPTH: usize = 16;

/// Writes a major type with its argument in the shortest form.
pub fn write_head(out: &mut Vec<u8>, major: u8, arg: u64) {
    let mt = major << 5;
    match arg {
        0..=23 => out.push(mt | arg as u8),
        24..=0xff => out.extend_from_slice(&[mt | 24, arg as u8]),
        0x100..=0xffff => {
            out.push(mt | 25);
            out.extend_from_slice(&(arg as u16).to_be_bytes());
        }
        0x1_0000..=0xffff_ffff => {
            out.push(mt | 26);
            out.extend_from_slice(&(arg as u32).to_be_bytes());
        }
        _ => {
            out.push(mt | 27);
            out.extend_from_slice(&arg.to_be_bytes());
        }
    }
}

/// Encoded size of a head carrying `arg`.
pub fn head_len(arg: u64) -> usize {
    match arg {
        0..=23 => 1,
        24..=0xff => 2,
        0x100..=0xffff => 3,
        0x1_0000..=0xffff_ffff => 5,
        _ => 9,
    }
}

impl Value {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            Value::Unsigned(n) => write_head(out, MAJOR_UNSIGNED, *n),
            Value::Bytes(b) => {
                write_head(out, MAJOR_BYTES, b.len() as u64);
                out.extend_from_slice(b);
            }
            Value::Text(t) => {
                write_head(out, MAJOR_TEXT, t.len() as u64);
                out.extend_from_slice(t.as_bytes());
            }
            Value::Array(items) => {
                write_head(out, MAJOR_ARRAY, items.len() as u64);
                for item in items {
                    item.encode_into(out);
                }
            }
            Value::Null => out.push((MAJOR_SIMPLE << 5) | SIMPLE_NULL),
        }
    }

    /// Decodes exactly one item spanning the whole input.
    pub fn decode(bytes: &[u8]) -> Result<Value, CborError> {
        let mut pos = 0;
        let v = decode_item(bytes, &mut pos, 0)?;
        if pos != bytes.len() {
            return Err(CborError::Trailing(bytes.len() - pos));
        }
        Ok(v)
    }

    pub fn as_array(&self) -> Option<&[Value]> {
        match self {
            Value::Array(a) => Some(a),
            _ => None,
        }
    }

    pub fn as_unsigned(&self) -> Option<u64> {
        match self {
            Value::Unsigned(n) => Some(*n),
            _ => None,
        }
    }
}

fn read_arg(bytes: &[u8], pos: &mut usize) -> Result<(u8, u64), CborError> {
    let start = *pos;
    let initial = *bytes.get(start).ok_or(CborError::Eof(start))?;
    *pos += 1;
    let major = initial >> 5;
    let info = initial & 0x1f;
    let (width, min) = match info {
        0..=23 => return Ok((major, info as u64)),
        24 => (1, 24),
        25 => (2, 0x100),
        26 => (4, 0x1_0000),
        27 => (8, 0x1_0000_0000),
        31 => return Err(CborError::Indefinite(start)),
        _ => return Err(CborError::Unsupported { offset: start, major }),
    };
    let raw = bytes.get(*pos..*pos + width).ok_or(CborError::Eof(*pos))?;
    *pos += width;
    let arg = raw.iter().fold(0u64, |acc, &b| (acc << 8) | b as u64);
    if arg < min {
        return Err(CborError::NonCanonical(start));
    }
    Ok((major, arg))
}

fn decode_item(bytes: &[u8], pos: &mut usize, depth: usize) -> Result<Value, CborError> {
    if depth > MAX_DEPTH {
        return Err(CborError::TooDeep);
    }
    let start = *pos;
    let (major, arg) = read_arg(bytes, pos)?;
    match major {
        MAJOR_UNSIGNED => Ok(Value::Unsigned(arg)),
        MAJOR_BYTES | MAJOR_TEXT => {
            let len = usize::try_from(arg).map_err(|_| CborError::Eof(*pos))?;
            let data = bytes
                .get(*pos..pos.saturating_add(len))
                .ok_or(CborError::Eof(*pos))?;
            *pos += len;
            if major == MAJOR_BYTES {
                Ok(Value::Bytes(data.to_vec()))
            } else {
                String::from_utf8(data.to_vec())
                    .map(Value::Text)
                    .map_err(|_| CborError::Utf8(start))
            }
        }
        MAJOR_ARRAY => {
            // every element takes at least one octet
            if arg > (bytes.len() - *pos) as u64 {
                return Err(CborError::Eof(*pos));
            }
            let mut items = Vec::with_capacity(arg as usize);
            for _ in 0..arg {
                items.push(decode_item(bytes, pos, depth + 1)?);
            }
            Ok(Value::Array(items))
        }
        MAJOR_SIMPLE if arg == SIMPLE_NULL as u64 && bytes[start] & 0x1f == SIMPLE_NULL => Ok(Value::Null),
        _ => Err(CborError::Unsupported { offset: start, major }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_heads() {
        for (n, len) in [(0u64, 1), (23, 1), (24, 2), (255, 2), (256, 3), (65535, 3), (65536, 5), (u32::MAX as u64, 5), (1 << 32, 9)] {
            let enc = Value::Unsigned(n).encode();
            assert_eq!(enc.len(), len, "{n}");
            assert_eq!(head_len(n), len);
            assert_eq!(Value::decode(&enc).unwrap(), Value::Unsigned(n));
        }
    }

    #[test]
    fn rfc_vectors() {
        assert_eq!(Value::Unsigned(1000).encode(), [0x19, 0x03, 0xe8]);
        assert_eq!(Value::Text("IETF".into()).encode(), [0x64, 0x49, 0x45, 0x54, 0x46]);
        assert_eq!(Value::Bytes(vec![1, 2, 3, 4]).encode(), [0x44, 1, 2, 3, 4]);
        let nested = Value::Array(vec![
            Value::Unsigned(1),
            Value::Array(vec![Value::Unsigned(2), Value::Unsigned(3)]),
        ]);
        assert_eq!(nested.encode(), [0x82, 0x01, 0x82, 0x02, 0x03]);
        assert_eq!(Value::Null.encode(), [0xf6]);
    }

    #[test]
    fn rejects_non_canonical_and_indefinite() {
        assert_eq!(Value::decode(&[0x18, 0x05]), Err(CborError::NonCanonical(0)));
        assert_eq!(Value::decode(&[0x9f, 0xff]), Err(CborError::Indefinite(0)));
        assert_eq!(Value::decode(&[0x01, 0x02]), Err(CborError::Trailing(1)));
        assert!(matches!(Value::decode(&[0xa0]), Err(CborError::Unsupported { major: 5, .. })));
        assert_eq!(Value::decode(&[0x9b, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff]), Err(CborError::Eof(9)));
    }

    fn arb_value() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            any::<u64>().prop_map(Value::Unsigned),
            prop::collection::vec(any::<u8>(), 0..40).prop_map(Value::Bytes),
            ".{0,30}".prop_map(Value::Text),
            Just(Value::Null),
        ];
        leaf.prop_recursive(3, 24, 6, |inner| prop::collection::vec(inner, 0..6).prop_map(Value::Array))
    }

    proptest! {
        #[test]
        fn prop_round_trip(v in arb_value()) {
            let enc = v.encode();
            let back = Value::decode(&enc).unwrap();
            prop_assert_eq!(&back, &v);
            prop_assert_eq!(back.encode(), enc);
        }
    }
}

//! Block-wise transfer (Block1 and Block2 options).

use super::{decode_uint, encode_uint, CoapError};

/// Largest block number representable in a 3-octet option.
pub const MAX_BLOCK_NUM: u32 = (1 << 20) - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockOption {
    pub num: u32,
    pub more: bool,
    pub szx: u8,
}

impl BlockOption {
    pub fn new(num: u32, more: bool, szx: u8) -> Result<Self, CoapError> {
        if szx > 6 {
            return Err(CoapError::ReservedSzx);
        }
        if num > MAX_BLOCK_NUM {
            return Err(CoapError::BlockNumberTooLarge(num));
        }
        Ok(BlockOption { num, more, szx })
    }

    pub fn size(&self) -> usize {
        16 << self.szx
    }

    /// Byte offset of this block in the body.
    pub fn offset(&self) -> usize {
        self.num as usize * self.size()
    }

    pub fn value(&self) -> u32 {
        (self.num << 4) | ((self.more as u32) << 3) | self.szx as u32
    }

    pub fn from_value(v: u32) -> Result<Self, CoapError> {
        Self::new(v >> 4, v & 0x8 != 0, (v & 0x7) as u8)
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_uint(self.value())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CoapError> {
        if bytes.len() > 3 {
            return Err(CoapError::BadOption(0));
        }
        Self::from_value(decode_uint(bytes).ok_or(CoapError::BadOption(0))?)
    }
}

/// Size exponent for a block size in octets.
pub fn szx_for_size(size: usize) -> Result<u8, CoapError> {
    match size {
        16 | 32 | 64 | 128 | 256 | 512 | 1024 => Ok(size.trailing_zeros() as u8 - 4),
        _ => Err(CoapError::BadBlockSize(size)),
    }
}

/// Splits a body into blocks of size `16 << szx`. An empty body yields a
/// single empty final block.
pub fn slice_body(body: &[u8], szx: u8) -> Result<Vec<(BlockOption, &[u8])>, CoapError> {
    let size = 16usize << szx.min(7);
    if szx > 6 {
        return Err(CoapError::ReservedSzx);
    }
    if body.is_empty() {
        return Ok(vec![(BlockOption::new(0, false, szx)?, body)]);
    }
    let count = body.len().div_ceil(size);
    (0..count)
        .map(|i| {
            let chunk = &body[i * size..((i + 1) * size).min(body.len())];
            Ok((BlockOption::new(i as u32, i + 1 < count, szx)?, chunk))
        })
        .collect()
}

/// The block at `num` of `body`, or `None` past the end.
pub fn block_at(body: &[u8], num: u32, szx: u8) -> Result<Option<(BlockOption, &[u8])>, CoapError> {
    let size = 16usize << szx.min(6);
    let start = num as usize * size;
    if start > body.len() || (start == body.len() && num > 0) {
        return Ok(None);
    }
    let end = (start + size).min(body.len());
    Ok(Some((BlockOption::new(num, end < body.len(), szx)?, &body[start..end])))
}

/// Collects blocks arriving in order and yields the body once the final
/// block is in. Duplicate blocks are ignored; gaps are errors.
#[derive(Debug, Default, Clone)]
pub struct Reassembler {
    buf: Vec<u8>,
    next: u32,
    szx: Option<u8>,
}

impl Reassembler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_num(&self) -> u32 {
        self.next
    }

    pub fn received(&self) -> usize {
        self.buf.len()
    }

    pub fn push(&mut self, block: BlockOption, data: &[u8]) -> Result<Option<Vec<u8>>, CoapError> {
        // a peer may shrink the block size mid-transfer; renumber against it
        let offset = block.offset();
        if offset < self.buf.len() {
            return Ok(None);
        }
        if offset != self.buf.len() {
            let expected = (self.buf.len() / block.size()) as u32;
            return Err(CoapError::UnexpectedBlock { expected, got: block.num });
        }
        if block.more && data.len() != block.size() {
            return Err(CoapError::BadBlockSize(data.len()));
        }
        self.buf.extend_from_slice(data);
        self.szx = Some(block.szx);
        self.next = (self.buf.len() / block.size()) as u32;
        if block.more {
            Ok(None)
        } else {
            self.next = 0;
            self.szx = None;
            Ok(Some(std::mem::take(&mut self.buf)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn values_for_96_octets_in_32_octet_blocks() {
        let body = [7u8; 96];
        let blocks = slice_body(&body, 1).unwrap();
        let values: Vec<u32> = blocks.iter().map(|(b, _)| b.value()).collect();
        assert_eq!(values, [9, 25, 33]);
        assert!(blocks.iter().all(|(_, d)| d.len() == 32));
    }

    #[test]
    fn reserved_szx_rejected() {
        assert_eq!(BlockOption::from_value(7), Err(CoapError::ReservedSzx));
        assert_eq!(slice_body(&[1], 7).unwrap_err(), CoapError::ReservedSzx);
        assert_eq!(szx_for_size(64), Ok(2));
        assert!(szx_for_size(100).is_err());
    }

    #[test]
    fn encoded_widths() {
        assert_eq!(BlockOption::new(0, false, 0).unwrap().encode(), Vec::<u8>::new());
        assert_eq!(BlockOption::new(15, true, 6).unwrap().encode().len(), 1);
        assert_eq!(BlockOption::new(16, true, 6).unwrap().encode().len(), 2);
        assert_eq!(BlockOption::new(MAX_BLOCK_NUM, true, 6).unwrap().encode().len(), 3);
        assert!(BlockOption::new(MAX_BLOCK_NUM + 1, false, 0).is_err());
    }

    #[test]
    fn block_at_edges() {
        let body = [1u8; 40];
        let (b, d) = block_at(&body, 1, 0).unwrap().unwrap();
        assert_eq!((b.num, b.more, d.len()), (1, true, 16));
        let (b, d) = block_at(&body, 2, 0).unwrap().unwrap();
        assert_eq!((b.more, d.len()), (false, 8));
        assert!(block_at(&body, 3, 0).unwrap().is_none());
        let (b, d) = block_at(&[], 0, 0).unwrap().unwrap();
        assert!(!b.more && d.is_empty());
    }

    #[test]
    fn reassembler_rejects_gaps_and_skips_duplicates() {
        let body: Vec<u8> = (0..50).collect();
        let blocks = slice_body(&body, 0).unwrap();
        let mut r = Reassembler::new();
        assert_eq!(r.push(blocks[0].0, blocks[0].1), Ok(None));
        assert_eq!(r.push(blocks[0].0, blocks[0].1), Ok(None));
        assert_eq!(
            r.push(blocks[2].0, blocks[2].1),
            Err(CoapError::UnexpectedBlock { expected: 1, got: 2 })
        );
        assert_eq!(r.push(blocks[1].0, blocks[1].1), Ok(None));
        assert_eq!(r.push(blocks[2].0, blocks[2].1), Ok(None));
        assert_eq!(r.push(blocks[3].0, blocks[3].1), Ok(Some(body)));
    }

    proptest! {
        #[test]
        fn prop_slice_reassemble(body in prop::collection::vec(any::<u8>(), 0..3000), szx in 0u8..7) {
            let blocks = slice_body(&body, szx).unwrap();
            let mut r = Reassembler::new();
            let mut out = None;
            for (i, (b, d)) in blocks.iter().enumerate() {
                let back = BlockOption::decode(&b.encode()).unwrap();
                prop_assert_eq!(back, *b);
                prop_assert_eq!(b.num as usize, i);
                prop_assert_eq!(b.more, i + 1 < blocks.len());
                out = r.push(*b, d).unwrap();
            }
            prop_assert_eq!(out, Some(body));
        }
    }
}

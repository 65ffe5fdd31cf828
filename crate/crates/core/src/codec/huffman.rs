//! Canonical Huffman codes over codeword indices.
//!
//! Only code lengths travel on the wire; both ends rebuild identical codes
//! by assigning consecutive values in `(length, symbol)` order. Lengths are
//! capped at [`MAX_CODE_LEN`] with the JPEG-style count-folding adjustment.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::PacketError;

pub const MAX_CODE_LEN: u8 = 16;

/// Optimal (length-limited) code lengths for a histogram; 0 marks absent
/// symbols. A single used symbol gets length 1.
pub fn code_lengths(hist: &[u64], max_len: u8) -> Vec<u8> {
    let used: Vec<usize> = (0..hist.len()).filter(|&s| hist[s] > 0).collect();
    let mut lengths = vec![0u8; hist.len()];
    match used.len() {
        0 => return lengths,
        1 => {
            lengths[used[0]] = 1;
            return lengths;
        }
        _ => {}
    }

    // Plain Huffman tree; ties broken by node id so the result is deterministic.
    let n = used.len();
    let mut parent = vec![usize::MAX; 2 * n - 1];
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> = used.iter().enumerate().map(|(i, &s)| Reverse((hist[s], i))).collect();
    let mut next = n;
    while heap.len() > 1 {
        let Reverse((wa, a)) = heap.pop().unwrap();
        let Reverse((wb, b)) = heap.pop().unwrap();
        parent[a] = next;
        parent[b] = next;
        heap.push(Reverse((wa + wb, next)));
        next += 1;
    }
    let depth = |mut v: usize| {
        let mut d = 0usize;
        while parent[v] != usize::MAX {
            v = parent[v];
            d += 1;
        }
        d
    };
    let depths: Vec<usize> = (0..n).map(depth).collect();
    let deepest = *depths.iter().max().unwrap();

    let mut count = vec![0usize; deepest.max(max_len as usize) + 1];
    for &d in &depths {
        count[d] += 1;
    }
    // Fold over-long codes: move pairs up from the deepest level, borrowing a
    // leaf from the nearest shallower level that has one.
    let limit = max_len as usize;
    for i in (limit + 1..=deepest).rev() {
        while count[i] > 0 {
            let mut j = i - 2;
            while count[j] == 0 {
                j -= 1;
            }
            count[i] -= 2;
            count[i - 1] += 1;
            count[j + 1] += 2;
            count[j] -= 1;
        }
    }

    // Shortest codes to the most frequent symbols; equal counts by symbol order.
    let mut by_freq = used.clone();
    by_freq.sort_by_key(|&s| (Reverse(hist[s]), s));
    let mut it = by_freq.into_iter();
    for (len, &c) in count.iter().enumerate().take(limit + 1) {
        for _ in 0..c {
            lengths[it.next().unwrap()] = len as u8;
        }
    }
    lengths
}

/// `Σ 2^-len` over nonzero lengths, scaled by `2^MAX_CODE_LEN`.
fn kraft_units(lengths: &[u8]) -> Result<u64, PacketError> {
    let mut sum = 0u64;
    for &l in lengths {
        if l > MAX_CODE_LEN {
            return Err(PacketError::BadCodeLength(l));
        }
        if l > 0 {
            sum += 1u64 << (MAX_CODE_LEN - l);
        }
    }
    Ok(sum)
}

pub fn satisfies_kraft(lengths: &[u8]) -> bool {
    matches!(kraft_units(lengths), Ok(s) if s <= 1 << MAX_CODE_LEN)
}

/// Canonical code value per symbol (meaningful only where length > 0).
pub fn canonical_codes(lengths: &[u8]) -> Result<Vec<u32>, PacketError> {
    if kraft_units(lengths)? > 1 << MAX_CODE_LEN {
        return Err(PacketError::KraftViolation);
    }
    let mut bl_count = [0u32; MAX_CODE_LEN as usize + 1];
    for &l in lengths {
        if l > 0 {
            bl_count[l as usize] += 1;
        }
    }
    let mut next_code = [0u32; MAX_CODE_LEN as usize + 2];
    let mut code = 0u32;
    for len in 1..=MAX_CODE_LEN as usize {
        code = (code + bl_count[len - 1]) << 1;
        next_code[len] = code;
    }
    Ok(lengths
        .iter()
        .map(|&l| {
            if l == 0 {
                return 0;
            }
            let c = next_code[l as usize];
            next_code[l as usize] += 1;
            c
        })
        .collect())
}

/// MSB-first bit packer.
#[derive(Default)]
pub(crate) struct BitWriter {
    bytes: Vec<u8>,
    bits: u64,
}

impl BitWriter {
    pub fn write(&mut self, value: u32, width: u8) {
        for i in (0..width).rev() {
            if self.bits % 8 == 0 {
                self.bytes.push(0);
            }
            if (value >> i) & 1 == 1 {
                *self.bytes.last_mut().unwrap() |= 0x80 >> (self.bits % 8);
            }
            self.bits += 1;
        }
    }

    #[cfg(test)]
    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

pub(crate) struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn bit(&mut self) -> Result<u32, PacketError> {
        let byte = (self.pos / 8) as usize;
        let Some(&b) = self.bytes.get(byte) else {
            return Err(PacketError::Truncated { needed: byte + 1, available: self.bytes.len() });
        };
        let v = (b >> (7 - self.pos % 8)) & 1;
        self.pos += 1;
        Ok(v as u32)
    }

    pub fn read(&mut self, width: u8) -> Result<u32, PacketError> {
        let mut v = 0;
        for _ in 0..width {
            v = (v << 1) | self.bit()?;
        }
        Ok(v)
    }

    pub fn position(&self) -> u64 {
        self.pos
    }
}

/// Table-driven canonical decoder.
pub(crate) struct CanonicalDecoder {
    first_code: [u32; MAX_CODE_LEN as usize + 1],
    count: [u32; MAX_CODE_LEN as usize + 1],
    offset: [u32; MAX_CODE_LEN as usize + 1],
    symbols: Vec<u32>,
}

impl CanonicalDecoder {
    pub fn new(lengths: &[u8]) -> Result<Self, PacketError> {
        let codes = canonical_codes(lengths)?;
        let mut symbols: Vec<u32> = (0..lengths.len() as u32).filter(|&s| lengths[s as usize] > 0).collect();
        symbols.sort_by_key(|&s| (lengths[s as usize], s));
        let mut first_code = [0u32; MAX_CODE_LEN as usize + 1];
        let mut count = [0u32; MAX_CODE_LEN as usize + 1];
        let mut offset = [0u32; MAX_CODE_LEN as usize + 1];
        for (i, &s) in symbols.iter().enumerate() {
            let l = lengths[s as usize] as usize;
            if count[l] == 0 {
                first_code[l] = codes[s as usize];
                offset[l] = i as u32;
            }
            count[l] += 1;
        }
        Ok(Self { first_code, count, offset, symbols })
    }

    pub fn decode(&self, r: &mut BitReader<'_>) -> Result<u32, PacketError> {
        let mut code = 0u32;
        for len in 1..=MAX_CODE_LEN as usize {
            code = (code << 1) | r.bit()?;
            let c = self.count[len];
            if c > 0 && code >= self.first_code[len] && code - self.first_code[len] < c {
                return Ok(self.symbols[(self.offset[len] + code - self.first_code[len]) as usize]);
            }
        }
        Err(PacketError::InvalidCode)
    }
}

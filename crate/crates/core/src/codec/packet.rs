use serde::{Deserialize, Serialize};

use super::huffman::{self, BitReader, BitWriter, CanonicalDecoder, MAX_CODE_LEN};
use crate::error::{Error, PacketError, Result};
use crate::vq::IndexMap;

pub const MAGIC: [u8; 4] = *b"GOSM";
pub const VERSION: u8 = 1;
/// Bytes preceding the body when no code-length table is present.
pub const FIXED_HEADER_LEN: usize = 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coder {
    Fixed = 0,
    Huffman = 1,
}

impl Coder {
    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Self, PacketError> {
        match id {
            0 => Ok(Coder::Fixed),
            1 => Ok(Coder::Huffman),
            other => Err(PacketError::UnsupportedCoder(other)),
        }
    }
}

impl std::str::FromStr for Coder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "0" | "fixed" => Ok(Coder::Fixed),
            "1" | "huffman" => Ok(Coder::Huffman),
            other => Err(Error::Config(format!("unknown coder `{other}`"))),
        }
    }
}

/// Image geometry and codebook size carried in the packet header.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketMeta {
    pub height: u16,
    pub width: u16,
    pub ratio: u8,
    pub k: u16,
}

impl PacketMeta {
    pub fn new(height: usize, width: usize, ratio: usize, k: usize) -> Result<Self> {
        let fit = |v: usize, max: usize, what: &str| {
            if v > max {
                Err(Error::InvalidArgument(format!("{what}={v} does not fit the packet header")))
            } else {
                Ok(v)
            }
        };
        let meta = Self {
            height: fit(height, u16::MAX as usize, "H")? as u16,
            width: fit(width, u16::MAX as usize, "W")? as u16,
            ratio: fit(ratio, u8::MAX as usize, "r")? as u8,
            k: fit(k, u16::MAX as usize, "K")? as u16,
        };
        meta.grid().map_err(Error::from)?;
        Ok(meta)
    }

    /// Index-map dimensions `(H/r, W/r)`.
    pub fn grid(&self) -> Result<(usize, usize), PacketError> {
        let r = self.ratio as usize;
        let (h, w) = (self.height as usize, self.width as usize);
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(PacketError::Inconsistent(format!("{h}x{w} not divisible by r={r}")));
        }
        if self.k == 0 {
            return Err(PacketError::Inconsistent("K=0".into()));
        }
        Ok((h / r, w / r))
    }

    pub fn symbol_count(&self) -> Result<usize, PacketError> {
        self.grid().map(|(h, w)| h * w)
    }
}

/// A fully assembled packet. `to_bytes` gives the normative wire layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WirePacket {
    pub meta: PacketMeta,
    pub coder: Coder,
    pub symbol_count: u32,
    /// Present only for the Huffman coder; one entry per codeword.
    pub code_lengths: Option<Vec<u8>>,
    pub body: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayloadReport {
    pub header_bytes: usize,
    pub body_bytes: usize,
    pub total_bytes: usize,
    pub kib: f64,
}

/// Bits per index for the fixed-length coder.
pub fn fixed_width(k: usize) -> u8 {
    let mut bits = 0u8;
    while (1usize << bits) < k {
        bits += 1;
    }
    bits
}

impl WirePacket {
    pub fn header_len(&self) -> usize {
        FIXED_HEADER_LEN + self.code_lengths.as_ref().map_or(0, Vec::len)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.header_len() + self.body.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.meta.height.to_le_bytes());
        out.extend_from_slice(&self.meta.width.to_le_bytes());
        out.push(self.meta.ratio);
        out.extend_from_slice(&self.meta.k.to_le_bytes());
        out.push(self.coder.id());
        out.extend_from_slice(&self.symbol_count.to_le_bytes());
        if let Some(table) = &self.code_lengths {
            out.extend_from_slice(table);
        }
        out.extend_from_slice(&(self.body.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    /// Structural parse: header checks, table validity and exact body length.
    /// The body itself is not decoded.
    pub fn parse(bytes: &[u8]) -> Result<Self, PacketError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(PacketError::BadMagic(magic));
        }
        let version = cur.u8()?;
        if version != VERSION {
            return Err(PacketError::UnsupportedVersion(version));
        }
        let height = cur.u16()?;
        let width = cur.u16()?;
        let ratio = cur.u8()?;
        let k = cur.u16()?;
        let coder = Coder::from_id(cur.u8()?)?;
        let symbol_count = cur.u32()?;
        let meta = PacketMeta { height, width, ratio, k };
        let expected = meta.symbol_count()?;
        if expected != symbol_count as usize {
            return Err(PacketError::Inconsistent(format!("symbol_count {symbol_count} but grid holds {expected}")));
        }
        let code_lengths = match coder {
            Coder::Fixed => None,
            Coder::Huffman => {
                let table = cur.take(k as usize)?.to_vec();
                if let Some(&bad) = table.iter().find(|&&l| l > MAX_CODE_LEN) {
                    return Err(PacketError::BadCodeLength(bad));
                }
                if !huffman::satisfies_kraft(&table) {
                    return Err(PacketError::KraftViolation);
                }
                if symbol_count > 0 && table.iter().all(|&l| l == 0) {
                    return Err(PacketError::Inconsistent("empty code table for nonempty map".into()));
                }
                Some(table)
            }
        };
        let body_len = cur.u32()? as usize;
        let body = cur.take(body_len)?.to_vec();
        let rest = bytes.len() - cur.pos;
        if rest > 0 {
            return Err(PacketError::TrailingGarbage(rest));
        }
        Ok(Self { meta, coder, symbol_count, code_lengths, body })
    }

    pub fn payload(&self) -> PayloadReport {
        let header_bytes = self.header_len();
        let body_bytes = self.body.len();
        let total_bytes = header_bytes + body_bytes;
        PayloadReport { header_bytes, body_bytes, total_bytes, kib: total_bytes as f64 / 1024.0 }
    }
}

pub fn payload(packet: &WirePacket) -> PayloadReport {
    packet.payload()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PacketError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(PacketError::Truncated { needed: self.pos.saturating_add(n), available: self.bytes.len() });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, PacketError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, PacketError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, PacketError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn encode_packet(idx: &IndexMap, meta: PacketMeta, coder: Coder) -> Result<WirePacket> {
    let (gh, gw) = meta.grid()?;
    if (idx.height, idx.width) != (gh, gw) {
        return Err(Error::InvalidArgument(format!(
            "index map is {}x{} but header implies {gh}x{gw}",
            idx.height, idx.width
        )));
    }
    let k = meta.k as usize;
    if idx.k != k {
        return Err(Error::InvalidArgument(format!("index map K={} but header K={k}", idx.k)));
    }
    if let Some(&bad) = idx.indices.iter().find(|&&z| z as usize >= k) {
        return Err(Error::IndexOutOfRange { index: bad, k });
    }
    let symbol_count = u32::try_from(idx.indices.len())
        .map_err(|_| Error::InvalidArgument("index map too large".into()))?;

    let (code_lengths, body) = match coder {
        Coder::Fixed => {
            let width = fixed_width(k);
            let mut w = BitWriter::default();
            for &z in &idx.indices {
                w.write(z, width);
            }
            (None, w.finish())
        }
        Coder::Huffman => {
            let mut hist = vec![0u64; k];
            for &z in &idx.indices {
                hist[z as usize] += 1;
            }
            let lengths = huffman::code_lengths(&hist, MAX_CODE_LEN);
            let distinct = hist.iter().filter(|&&c| c > 0).count();
            let mut w = BitWriter::default();
            if distinct > 1 {
                let codes = huffman::canonical_codes(&lengths)?;
                for &z in &idx.indices {
                    w.write(codes[z as usize], lengths[z as usize]);
                }
            }
            (Some(lengths), w.finish())
        }
    };
    Ok(WirePacket { meta, coder, symbol_count, code_lengths, body })
}

/// Inverse of [`encode_packet`]. Any malformed input is an error; a partial
/// index map is never returned.
pub fn decode_packet(bytes: &[u8]) -> Result<(IndexMap, PacketMeta)> {
    let packet = WirePacket::parse(bytes)?;
    let indices = decode_body(&packet)?;
    let (h, w) = packet.meta.grid()?;
    let map = IndexMap::new(h, w, packet.meta.k as usize, indices)?;
    Ok((map, packet.meta))
}

fn decode_body(packet: &WirePacket) -> Result<Vec<u32>, PacketError> {
    let n = packet.symbol_count as usize;
    let k = packet.meta.k as u32;
    let body = &packet.body;
    let mut out = Vec::with_capacity(n);
    let used_bits = match &packet.code_lengths {
        None => {
            let width = fixed_width(k as usize);
            let bits = n as u64 * width as u64;
            check_body_len(body.len(), bits)?;
            let mut r = BitReader::new(body);
            for _ in 0..n {
                let z = r.read(width)?;
                if z >= k {
                    return Err(PacketError::InvalidCode);
                }
                out.push(z);
            }
            bits
        }
        Some(table) => {
            let present: Vec<usize> = (0..table.len()).filter(|&s| table[s] > 0).collect();
            if present.len() == 1 {
                check_body_len(body.len(), 0)?;
                out.resize(n, present[0] as u32);
                0
            } else {
                let dec = CanonicalDecoder::new(table)?;
                let mut r = BitReader::new(body);
                for _ in 0..n {
                    out.push(dec.decode(&mut r)?);
                }
                let bits = r.position();
                check_body_len(body.len(), bits)?;
                bits
            }
        }
    };
    // Padding bits must be zero.
    if used_bits % 8 != 0 {
        let last = body[body.len() - 1];
        if last & (0xffu8 >> (used_bits % 8)) != 0 {
            return Err(PacketError::Inconsistent("nonzero padding bits".into()));
        }
    }
    Ok(out)
}

fn check_body_len(len: usize, bits: u64) -> Result<(), PacketError> {
    let needed = bits.div_ceil(8) as usize;
    match len.cmp(&needed) {
        std::cmp::Ordering::Less => Err(PacketError::Truncated { needed, available: len }),
        std::cmp::Ordering::Greater => Err(PacketError::TrailingGarbage(len - needed)),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, k: usize, f: impl Fn(usize) -> u32) -> IndexMap {
        IndexMap::new(h, w, k, (0..h * w).map(f).collect()).unwrap()
    }

    #[test]
    fn fixed_width_table() {
        assert_eq!(fixed_width(1), 0);
        assert_eq!(fixed_width(2), 1);
        assert_eq!(fixed_width(4), 2);
        assert_eq!(fixed_width(5), 3);
        assert_eq!(fixed_width(512), 9);
        assert_eq!(fixed_width(65535), 16);
    }

    #[test]
    fn fixed_coder_body_arithmetic() {
        let idx = map(64, 128, 512, |i| (i % 512) as u32);
        let meta = PacketMeta::new(256, 512, 4, 512).unwrap();
        let p = encode_packet(&idx, meta, Coder::Fixed).unwrap();
        assert_eq!(p.body.len(), 9216);
        let report = p.payload();
        assert_eq!(report.header_bytes, FIXED_HEADER_LEN);
        assert_eq!(report.total_bytes, 9216 + 21);
        assert_eq!(p.to_bytes().len(), report.total_bytes);
    }

    #[test]
    fn hand_huffman_case() {
        // a a a a a b c d
        let idx = map(2, 4, 4, |i| [0, 0, 0, 0, 0, 1, 2, 3][i]);
        let meta = PacketMeta::new(2, 4, 1, 4).unwrap();
        let p = encode_packet(&idx, meta, Coder::Huffman).unwrap();
        let lengths = p.code_lengths.clone().unwrap();
        let bits: u32 = idx.indices.iter().map(|&z| lengths[z as usize] as u32).sum();
        assert_eq!(bits, 13);
        assert_eq!(p.body.len(), 2);
        assert_eq!(decode_packet(&p.to_bytes()).unwrap().0, idx);
    }

    #[test]
    fn single_symbol_has_empty_body() {
        let idx = map(4, 4, 8, |_| 5);
        let meta = PacketMeta::new(16, 16, 4, 8).unwrap();
        let p = encode_packet(&idx, meta, Coder::Huffman).unwrap();
        assert!(p.body.is_empty());
        assert_eq!(decode_packet(&p.to_bytes()).unwrap().0, idx);
    }

    #[test]
    fn empty_map_has_empty_body() {
        let idx = IndexMap::new(0, 0, 4, vec![]).unwrap();
        let meta = PacketMeta::new(0, 0, 4, 4).unwrap();
        for coder in [Coder::Fixed, Coder::Huffman] {
            let p = encode_packet(&idx, meta, coder).unwrap();
            assert_eq!(p.payload().body_bytes, 0);
            assert_eq!(decode_packet(&p.to_bytes()).unwrap().0, idx);
        }
    }

    #[test]
    fn rejects_malformed() {
        let idx = map(4, 4, 16, |i| (i * 7 % 16) as u32);
        let meta = PacketMeta::new(16, 16, 4, 16).unwrap();
        for coder in [Coder::Fixed, Coder::Huffman] {
            let good = encode_packet(&idx, meta, coder).unwrap().to_bytes();

            let mut bad = good.clone();
            bad[0] = b'X';
            assert!(matches!(decode_packet(&bad), Err(Error::Packet(PacketError::BadMagic(_)))));

            let mut bad = good.clone();
            bad[4] = 2;
            assert!(matches!(decode_packet(&bad), Err(Error::Packet(PacketError::UnsupportedVersion(2)))));

            let mut bad = good.clone();
            bad[12] = 7;
            assert!(matches!(decode_packet(&bad), Err(Error::Packet(PacketError::UnsupportedCoder(7)))));

            let bad = &good[..good.len() - 1];
            assert!(matches!(decode_packet(bad), Err(Error::Packet(PacketError::Truncated { .. }))));

            let mut bad = good.clone();
            bad.push(0);
            assert!(matches!(decode_packet(&bad), Err(Error::Packet(PacketError::TrailingGarbage(1)))));
        }
        let mut bad = encode_packet(&idx, meta, Coder::Huffman).unwrap().to_bytes();
        bad[17] = 1;
        bad[18] = 1;
        assert!(matches!(decode_packet(&bad), Err(Error::Packet(PacketError::KraftViolation))));
    }

    #[test]
    fn encode_validates_inputs() {
        let meta = PacketMeta::new(8, 8, 4, 4).unwrap();
        let idx = IndexMap { height: 2, width: 2, k: 4, indices: vec![0, 1, 2, 9] };
        assert!(matches!(encode_packet(&idx, meta, Coder::Fixed), Err(Error::IndexOutOfRange { index: 9, k: 4 })));
        let idx = map(2, 2, 4, |_| 0);
        assert!(encode_packet(&idx, PacketMeta::new(16, 16, 4, 4).unwrap(), Coder::Fixed).is_err());
        assert!(PacketMeta::new(10, 8, 4, 4).is_err());
        assert!(PacketMeta::new(8, 8, 4, 70000).is_err());
    }

    #[test]
    fn random_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..200 {
            let k = [2usize, 5, 64, 300][trial % 4];
            let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
            let skew = rng.gen_range(1..=k);
            let idx = map(h, w, k, |_| 0);
            let idx = IndexMap { indices: idx.indices.iter().map(|_| rng.gen_range(0..skew) as u32).collect(), ..idx };
            let meta = PacketMeta::new(h * 2, w * 2, 2, k).unwrap();
            for coder in [Coder::Fixed, Coder::Huffman] {
                let bytes = encode_packet(&idx, meta, coder).unwrap().to_bytes();
                let (back, m) = decode_packet(&bytes).unwrap();
                assert_eq!(back, idx);
                assert_eq!(m, meta);
            }
        }
    }
}

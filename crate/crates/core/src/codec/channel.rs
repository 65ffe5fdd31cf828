//! Loopback link: `len u32 LE | payload | crc32 LE`, where the CRC covers the
//! length prefix and the payload.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const FRAME_OVERHEAD: usize = 8;

pub fn frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + FRAME_OVERHEAD);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Splits a byte stream of back-to-back frames.
pub struct FrameReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> FrameReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    /// `Ok(None)` at a clean end of stream.
    pub fn next_frame(&mut self) -> Result<Option<Vec<u8>>> {
        let rest = &self.buf[self.pos..];
        if rest.is_empty() {
            return Ok(None);
        }
        if rest.len() < FRAME_OVERHEAD {
            return Err(Error::Transmission(format!("{} stray bytes at end of stream", rest.len())));
        }
        let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
        let total = len
            .checked_add(FRAME_OVERHEAD)
            .filter(|&t| t <= rest.len())
            .ok_or_else(|| Error::Transmission(format!("frame claims {len} bytes, {} remain", rest.len() - 4)))?;
        let body_end = 4 + len;
        let sent = u32::from_le_bytes(rest[body_end..total].try_into().unwrap());
        let computed = crc32fast::hash(&rest[..body_end]);
        if sent != computed {
            return Err(Error::Transmission(format!("crc mismatch: sent {sent:08x}, computed {computed:08x}")));
        }
        self.pos += total;
        Ok(Some(rest[4..body_end].to_vec()))
    }
}

/// In-memory link with an optional seeded bit-flip injector.
pub struct LoopbackChannel {
    flip_prob: f64,
    rng: ChaCha8Rng,
    wire: VecDeque<u8>,
}

impl LoopbackChannel {
    pub fn new(seed: u64) -> Self {
        Self { flip_prob: 0.0, rng: ChaCha8Rng::seed_from_u64(seed), wire: VecDeque::new() }
    }

    pub fn with_bit_flips(seed: u64, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("flip probability {p} outside [0,1]")));
        }
        Ok(Self { flip_prob: p, ..Self::new(seed) })
    }

    pub fn send(&mut self, packet: &[u8]) {
        let mut bytes = frame(packet);
        if self.flip_prob > 0.0 {
            for b in &mut bytes {
                for bit in 0..8 {
                    if self.rng.gen_bool(self.flip_prob) {
                        *b ^= 1 << bit;
                    }
                }
            }
        }
        self.wire.extend(bytes);
    }

    /// Drains everything on the wire and returns the decoded frames.
    pub fn receive_all(&mut self) -> Result<Vec<Vec<u8>>> {
        let bytes: Vec<u8> = self.wire.drain(..).collect();
        let mut reader = FrameReader::new(&bytes);
        let mut out = Vec::new();
        while let Some(f) = reader.next_frame()? {
            out.push(f);
        }
        Ok(out)
    }
}

/// Sends one packet over a clean loopback and returns what arrived.
pub fn transmit_loopback(packet: &[u8], channel_seed: u64) -> Result<Vec<u8>> {
    transmit_noisy(packet, channel_seed, 0.0)
}

pub fn transmit_noisy(packet: &[u8], channel_seed: u64, flip_prob: f64) -> Result<Vec<u8>> {
    let mut ch = LoopbackChannel::with_bit_flips(channel_seed, flip_prob)?;
    ch.send(packet);
    let mut frames = ch.receive_all()?;
    if frames.len() != 1 {
        return Err(Error::Transmission(format!("expected 1 frame, got {}", frames.len())));
    }
    Ok(frames.pop().unwrap())
}

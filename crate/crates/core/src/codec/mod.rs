//! Transmission side: index maps to bytes and back.

mod channel;
pub mod huffman;
mod packet;

pub use channel::{frame, transmit_loopback, transmit_noisy, FrameReader, LoopbackChannel, FRAME_OVERHEAD};
pub use packet::{
    decode_packet, encode_packet, fixed_width, payload, Coder, PacketMeta, PayloadReport, WirePacket, FIXED_HEADER_LEN,
    MAGIC, VERSION,
};

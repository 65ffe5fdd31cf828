//! Task-driven semantic quantization for goal-oriented image transmission.
//!
//! A vector-quantized encoder/decoder is trained so that a frozen downstream
//! segmenter produces the same per-pixel class distributions on the
//! reconstruction as on the original. Only codeword indices cross the link,
//! entropy coded into a framed wire packet.
//!
//! Layers, bottom-up:
//! - [`autodiff`]: reverse-mode tensor engine, Adam, checkpoint container
//! - [`datagen`]: procedural labelled scenes
//! - [`nets`]: encoder/decoder, segmenter and perceptual extractor builders
//! - [`vq`]: nearest-codeword quantizer and its losses
//! - [`objectives`]: divergences, perceptual distance, composite objectives
//! - [`task`]: frozen segmenter, imitation targets, mIoU/accuracy
//! - [`codec`]: wire packet, canonical Huffman, loopback channel
//! - [`trainer`]: training schemes and curves
//! - [`harness`]: experiments, sweeps, ablations and reports

pub mod autodiff;
pub mod codec;
pub mod datagen;
mod error;
pub mod harness;
pub mod nets;
pub mod objectives;
pub mod task;
pub mod trainer;
pub mod vq;

pub use autodiff::{Parameter, Real, Tape, Tensor, Var};
pub use codec::{PayloadReport, WirePacket};
pub use datagen::{DatasetSpec, LabeledScene};
pub use error::{Error, PacketError, Result};
pub use nets::{EncoderDecoderConfig, Network, Variant};
pub use objectives::{LossBreakdown, Objective, SegDist, Term};
pub use task::{FrozenSegmenter, TaskMetrics};
pub use trainer::{Scheme, TrainConfig, TrainingCurves};
pub use vq::{Codebook, IndexMap};

/// Numeric mode for a run. Training defaults to single precision; double
/// precision is used for gradient checks and bit-exact determinism audits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Precision::Single),
            "double" => Ok(Precision::Double),
            other => Err(Error::Config(format!("unknown precision `{other}` (expected single or double)"))),
        }
    }
}

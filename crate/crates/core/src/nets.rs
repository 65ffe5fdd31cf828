//! Network builders: the strided-convolution encoder, its transposed
//! decoder (shallow and residual variants), the downstream segmenter, and
//! the frozen multi-scale feature extractor behind the perceptual distance.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::{digest, write_checkpoint};
use crate::autodiff::{Parameter, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const SEGMENTER_WIDTH: usize = 32;
pub const EXTRACTOR_WIDTHS: [usize; 3] = [16, 32, 64];
/// Build seed of the perceptual extractor; fixed so every run measures
/// perceptual distance with the same features.
pub const EXTRACTOR_SEED: u64 = 0x5EED_F00D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Shallow,
    Residual,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shallow" => Ok(Variant::Shallow),
            "residual" => Ok(Variant::Residual),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDecoderConfig {
    /// Spatial compression ratio `r`, a power of two in `2..=32`.
    pub ratio: usize,
    /// Codeword length `D`; also the encoder's output channel count.
    pub codeword_len: usize,
    /// Channel width per downsampling stage; the last entry repeats when
    /// there are more stages than widths.
    pub widths: Vec<usize>,
    pub variant: Variant,
}

impl EncoderDecoderConfig {
    pub fn stages(&self) -> usize {
        self.ratio.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !self.ratio.is_power_of_two() || !(2..=32).contains(&self.ratio) {
            return Err(Error::Config(format!("compression ratio {} not a power of two in 2..=32", self.ratio)));
        }
        if self.codeword_len == 0 {
            return Err(Error::Config("codeword length must be positive".into()));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("widths must be a nonempty list of positive channel counts".into()));
        }
        Ok(())
    }

    fn stage_width(&self, i: usize) -> usize {
        self.widths[i.min(self.widths.len() - 1)]
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Conv { weight: usize, bias: usize, stride: usize, padding: usize },
    ConvTranspose { weight: usize, bias: usize, stride: usize },
    Residual { first: (usize, usize), second: (usize, usize) },
    Silu,
    Sigmoid,
    /// Marks an intermediate output returned by [`Network::forward_taps`].
    Tap,
}

/// An ordered stack of layers and the parameters they own.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    name: String,
    layers: Vec<Layer>,
    params: Vec<Parameter<T>>,
    in_channels: usize,
    out_channels: usize,
    /// Output spatial extent is `input · scale.0 / scale.1`.
    scale: (usize, usize),
}

struct Builder<'r, T> {
    name: String,
    layers: Vec<Layer>,
    params: Vec<Parameter<T>>,
    rng: &'r mut ChaCha8Rng,
}

impl<'r, T: Real> Builder<'r, T> {
    fn new(name: &str, rng: &'r mut ChaCha8Rng) -> Self {
        Self { name: name.into(), layers: Vec::new(), params: Vec::new(), rng }
    }

    fn pair(&mut self, shape: Vec<usize>, fan_in: usize, cout: usize) -> (usize, usize) {
        let idx = self.params.len() / 2;
        let w = Parameter::kernel(format!("{}.{idx:02}.weight", self.name), shape, fan_in, self.rng);
        let b = Parameter::zeros(format!("{}.{idx:02}.bias", self.name), vec![cout]);
        self.params.push(w);
        self.params.push(b);
        (self.params.len() - 2, self.params.len() - 1)
    }

    fn conv(&mut self, k: usize, cin: usize, cout: usize, stride: usize, padding: usize) {
        let (weight, bias) = self.pair(vec![k, k, cin, cout], k * k * cin, cout);
        self.layers.push(Layer::Conv { weight, bias, stride, padding });
    }

    fn conv_transpose(&mut self, k: usize, cin: usize, cout: usize, stride: usize) {
        // Each output pixel of a stride-s transposed conv sees (k/s)² input taps per channel.
        let fan_in = (k / stride).pow(2) * cin;
        let (weight, bias) = self.pair(vec![k, k, cout, cin], fan_in, cout);
        self.layers.push(Layer::ConvTranspose { weight, bias, stride });
    }

    fn residual(&mut self, c: usize) {
        let first = self.pair(vec![3, 3, c, c], 9 * c, c);
        let second = self.pair(vec![3, 3, c, c], 9 * c, c);
        self.layers.push(Layer::Residual { first, second });
    }

    fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    fn finish(self, in_channels: usize, out_channels: usize, scale: (usize, usize)) -> Network<T> {
        Network { name: self.name, layers: self.layers, params: self.params, in_channels, out_channels, scale }
    }
}

/// Image `[H, W, 3]` → feature map `[H/r, W/r, D]`.
pub fn build_encoder<T: Real>(cfg: &EncoderDecoderConfig, rng: &mut ChaCha8Rng) -> Result<Network<T>> {
    cfg.validate()?;
    let mut b = Builder::new("encoder", rng);
    let mut c = 3;
    for i in 0..cfg.stages() {
        let next = cfg.stage_width(i);
        b.conv(4, c, next, 2, 1);
        b.push(Layer::Silu);
        c = next;
    }
    if cfg.variant == Variant::Residual {
        b.residual(c);
        b.residual(c);
    }
    b.conv(3, c, cfg.codeword_len, 1, 1);
    Ok(b.finish(3, cfg.codeword_len, (1, cfg.ratio)))
}

/// Feature map `[H/r, W/r, D]` → image `[H, W, 3]` in `[0, 1]`.
pub fn build_decoder<T: Real>(cfg: &EncoderDecoderConfig, rng: &mut ChaCha8Rng) -> Result<Network<T>> {
    cfg.validate()?;
    let n = cfg.stages();
    let mut b = Builder::new("decoder", rng);
    let top = cfg.stage_width(n - 1);
    b.conv(3, cfg.codeword_len, top, 1, 1);
    b.push(Layer::Silu);
    if cfg.variant == Variant::Residual {
        b.residual(top);
        b.residual(top);
    }
    let mut c = top;
    for j in 0..n {
        let last = j + 1 == n;
        let next = if last { 3 } else { cfg.stage_width(n - 2 - j) };
        b.conv_transpose(4, c, next, 2);
        b.push(if last { Layer::Sigmoid } else { Layer::Silu });
        c = next;
    }
    Ok(b.finish(cfg.codeword_len, 3, (cfg.ratio, 1)))
}

/// Image → per-pixel class logits `[H, W, m]`; fully convolutional.
pub fn build_segmenter<T: Real>(classes: usize, rng: &mut ChaCha8Rng) -> Result<Network<T>> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("segmenter needs at least 2 classes, got {classes}")));
    }
    let mut b = Builder::new("segmenter", rng);
    b.conv(3, 3, SEGMENTER_WIDTH, 1, 1);
    b.push(Layer::Silu);
    b.conv(3, SEGMENTER_WIDTH, SEGMENTER_WIDTH, 1, 1);
    b.push(Layer::Silu);
    b.conv(3, SEGMENTER_WIDTH, classes, 1, 1);
    Ok(b.finish(3, classes, (1, 1)))
}

/// Seeded-random, frozen three-stage feature pyramid at `H/2`, `H/4`, `H/8`.
pub fn build_feature_extractor<T: Real>() -> Network<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(EXTRACTOR_SEED);
    let mut b = Builder::new("extractor", &mut rng);
    let mut c = 3;
    for &w in &EXTRACTOR_WIDTHS {
        b.conv(3, c, w, 2, 1);
        b.push(Layer::Silu);
        b.push(Layer::Tap);
        c = w;
    }
    let mut net = b.finish(3, c, (1, 8));
    net.freeze();
    net
}

impl<T: Real> Network<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn freeze(&mut self) {
        self.params.iter_mut().for_each(|p| p.frozen = true);
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|p| p.frozen)
    }

    /// Output shape for an `[H, W, C]` input, or the reason it is invalid.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let &[h, w, c] = input else {
            return Err(Error::shape("network", format!("{}: expected rank-3 input, got {input:?}", self.name)));
        };
        if c != self.in_channels {
            return Err(Error::shape("network", format!("{}: expected {} channels, got {c}", self.name, self.in_channels)));
        }
        let (num, den) = self.scale;
        if h % den != 0 || w % den != 0 {
            return Err(Error::shape("network", format!("{}: {h}x{w} not divisible by {den}", self.name)));
        }
        Ok(vec![h * num / den, w * num / den, self.out_channels])
    }

    /// Binds every parameter onto the tape, in parameter order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p)).collect()
    }

    pub fn forward(&self, tape: &mut Tape<T>, bound: &[Var], x: Var) -> Result<Var> {
        Ok(self.run(tape, bound, x)?.0)
    }

    /// Outputs at every tap point, in order.
    pub fn forward_taps(&self, tape: &mut Tape<T>, bound: &[Var], x: Var) -> Result<Vec<Var>> {
        Ok(self.run(tape, bound, x)?.1)
    }

    /// Binds and runs in one go; convenient for inference.
    pub fn apply(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let bound = self.bind(tape);
        self.forward(tape, &bound, x)
    }

    fn run(&self, tape: &mut Tape<T>, bound: &[Var], x: Var) -> Result<(Var, Vec<Var>)> {
        if bound.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!("{}: {} bound vars for {} params", self.name, bound.len(), self.params.len())));
        }
        let expected = self.output_shape(tape.value(x).shape())?;
        let mut h = x;
        let mut taps = Vec::new();
        for layer in &self.layers {
            h = match *layer {
                Layer::Conv { weight, bias, stride, padding } => tape.conv2d(h, bound[weight], bound[bias], stride, padding)?,
                Layer::ConvTranspose { weight, bias, stride } => tape.conv_transpose2d(h, bound[weight], bound[bias], stride)?,
                Layer::Residual { first, second } => {
                    let a = tape.conv2d(h, bound[first.0], bound[first.1], 1, 1)?;
                    let a = tape.silu(a);
                    let a = tape.conv2d(a, bound[second.0], bound[second.1], 1, 1)?;
                    tape.add(h, a)?
                }
                Layer::Silu => tape.silu(h),
                Layer::Sigmoid => tape.sigmoid(h),
                Layer::Tap => {
                    taps.push(h);
                    h
                }
            };
        }
        debug_assert_eq!(tape.value(h).shape(), &expected[..]);
        Ok((h, taps))
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.tensor))
    }

    /// Serialized parameters in the checkpoint container.
    pub fn checkpoint(&self) -> Vec<u8> {
        write_checkpoint(self.tensors()).expect("parameter names and shapes fit the container")
    }

    /// Content hash of the parameters.
    pub fn digest(&self) -> String {
        digest(&self.checkpoint())
    }

    /// Overwrites parameter values from a checkpoint map, matching by name.
    pub fn load(&mut self, tensors: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for p in &mut self.params {
            let t = tensors
                .get(&p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {}", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Format(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(ratio: usize, variant: Variant) -> EncoderDecoderConfig {
        EncoderDecoderConfig { ratio, codeword_len: 8, widths: vec![16, 32], variant }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn encoder_shape_r4() {
        let enc = build_encoder::<f64>(&cfg(4, Variant::Shallow), &mut rng()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![64, 64, 3], 0.5));
        let z = enc.apply(&mut tape, x).unwrap();
        assert_eq!(tape.value(z).shape(), &[16, 16, 8]);
    }

    #[test]
    fn stage_count_follows_ratio() {
        assert_eq!(cfg(2, Variant::Shallow).stages(), 1);
        let enc = build_encoder::<f32>(&cfg(2, Variant::Shallow), &mut rng()).unwrap();
        let strided = enc.layers.iter().filter(|l| matches!(l, Layer::Conv { stride: 2, .. })).count();
        assert_eq!(strided, 1);
        assert_eq!(cfg(32, Variant::Shallow).stages(), 5);
    }

    #[test]
    fn shallow_parameter_count() {
        // 4·4·3·16+16 + 4·4·16·32+32 + 3·3·32·8+8
        let enc = build_encoder::<f32>(&cfg(4, Variant::Shallow), &mut rng()).unwrap();
        assert_eq!(enc.param_count(), 784 + 8224 + 2312);
    }

    #[test]
    fn residual_has_more_parameters() {
        for r in [2, 4, 8] {
            let s = build_encoder::<f32>(&cfg(r, Variant::Shallow), &mut rng()).unwrap().param_count()
                + build_decoder::<f32>(&cfg(r, Variant::Shallow), &mut rng()).unwrap().param_count();
            let d = build_encoder::<f32>(&cfg(r, Variant::Residual), &mut rng()).unwrap().param_count()
                + build_decoder::<f32>(&cfg(r, Variant::Residual), &mut rng()).unwrap().param_count();
            assert!(d > s);
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let enc = build_encoder::<f64>(&cfg(8, Variant::Shallow), &mut rng()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![36, 32, 3]));
        assert!(enc.apply(&mut tape, x).is_err());
    }

    #[test]
    fn roundtrip_shapes_all_ratios_and_variants() {
        for variant in [Variant::Shallow, Variant::Residual] {
            for r in [2, 4, 8, 16, 32] {
                let c = cfg(r, variant);
                let mut g = rng();
                let enc = build_encoder::<f32>(&c, &mut g).unwrap();
                let dec = build_decoder::<f32>(&c, &mut g).unwrap();
                let mut tape = Tape::new();
                let x = tape.constant(Tensor::from_fn(vec![64, 32, 3], |i| (i % 7) as f32 / 7.0));
                let z = enc.apply(&mut tape, x).unwrap();
                assert_eq!(tape.value(z).shape(), &[64 / r, 32 / r, 8]);
                let y = dec.apply(&mut tape, z).unwrap();
                assert_eq!(tape.value(y).shape(), &[64, 32, 3]);
                assert!(tape.value(y).data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn segmenter_and_extractor_shapes() {
        let seg = build_segmenter::<f32>(5, &mut rng()).unwrap();
        let ext = build_feature_extractor::<f32>();
        assert!(ext.is_frozen());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![32, 48, 3], 0.3));
        let s = seg.apply(&mut tape, x).unwrap();
        assert_eq!(tape.value(s).shape(), &[32, 48, 5]);
        let bound = ext.bind(&mut tape);
        let taps = ext.forward_taps(&mut tape, &bound, x).unwrap();
        let shapes: Vec<_> = taps.iter().map(|&t| tape.value(t).shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![16, 24, 16], vec![8, 12, 32], vec![4, 6, 64]]);
        assert!(build_segmenter::<f32>(1, &mut rng()).is_err());
    }

    #[test]
    fn extractor_digest_is_stable() {
        assert_eq!(build_feature_extractor::<f64>().digest(), build_feature_extractor::<f64>().digest());
        assert_eq!(build_feature_extractor::<f32>().digest(), build_feature_extractor::<f32>().digest());
    }

    #[test]
    fn load_roundtrip() {
        let c = cfg(4, Variant::Residual);
        let a = build_decoder::<f64>(&c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut b = build_decoder::<f64>(&c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(a.digest(), b.digest());
        let map = crate::autodiff::checkpoint::read_checkpoint::<f64>(&a.checkpoint()).unwrap();
        b.load(&map).unwrap();
        assert_eq!(a.digest(), b.digest());
    }
}

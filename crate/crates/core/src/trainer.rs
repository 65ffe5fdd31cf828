//! Training schemes for the codec: plain VQ-VAE, task-driven GOS-VAE (from
//! scratch or fine-tuned from a VQ-VAE), the residual/larger-codebook
//! variants and the objective ablations.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::{digest, read_checkpoint, write_checkpoint};
use crate::autodiff::{Adam, AdamConfig, Real, Tape, Tensor, Var};
use crate::codec::{encode_packet, Coder, PacketMeta};
use crate::datagen::LabeledScene;
use crate::error::{Error, Result};
use crate::nets::{build_decoder, build_encoder, EncoderDecoderConfig, Network, Variant};
use crate::objectives::{composite, perceptual, LossBreakdown, LossInputs, Objective, Term};
use crate::task::{hard_labels, segment, segment_var, ConfusionMatrix, FrozenSegmenter, TaskMetrics};
use crate::vq::{self, codebook_usage, quantize, Codebook, IndexMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "VQVAE")]
    Vqvae,
    #[serde(rename = "GOSVAE")]
    Gosvae,
    #[serde(rename = "GOSVAE_STAR")]
    GosvaeStar,
    #[serde(rename = "VQVAE_DAGGER")]
    VqvaeDagger,
    #[serde(rename = "GOSVAE_DAGGER")]
    GosvaeDagger,
    #[serde(rename = "ABL_CE")]
    AblCe,
    #[serde(rename = "ABL_KLD")]
    AblKld,
    #[serde(rename = "ABL_VQ_KLD")]
    AblVqKld,
    #[serde(rename = "ABL_VQ_LPIPS")]
    AblVqLpips,
    #[serde(rename = "ABL_KLD_LPIPS")]
    AblKldLpips,
}

impl Scheme {
    pub const ALL: [Scheme; 10] = [
        Scheme::Vqvae,
        Scheme::Gosvae,
        Scheme::GosvaeStar,
        Scheme::VqvaeDagger,
        Scheme::GosvaeDagger,
        Scheme::AblCe,
        Scheme::AblKld,
        Scheme::AblVqKld,
        Scheme::AblVqLpips,
        Scheme::AblKldLpips,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Vqvae => "VQVAE",
            Scheme::Gosvae => "GOSVAE",
            Scheme::GosvaeStar => "GOSVAE_STAR",
            Scheme::VqvaeDagger => "VQVAE_DAGGER",
            Scheme::GosvaeDagger => "GOSVAE_DAGGER",
            Scheme::AblCe => "ABL_CE",
            Scheme::AblKld => "ABL_KLD",
            Scheme::AblVqKld => "ABL_VQ_KLD",
            Scheme::AblVqLpips => "ABL_VQ_LPIPS",
            Scheme::AblKldLpips => "ABL_KLD_LPIPS",
        }
    }

    /// Objective of the scheme's final (or only) phase.
    pub fn objective(self) -> Objective {
        match self {
            Scheme::Vqvae | Scheme::VqvaeDagger => Objective::PixelMse,
            Scheme::Gosvae | Scheme::GosvaeStar | Scheme::GosvaeDagger => Objective::TaskJsdPerceptual,
            Scheme::AblCe => Objective::TaskCe,
            Scheme::AblKld => Objective::TaskKld,
            Scheme::AblVqKld => Objective::PixelMseKld,
            Scheme::AblVqLpips => Objective::Perceptual,
            Scheme::AblKldLpips => Objective::TaskKldPerceptual,
        }
    }

    /// Whether training starts with a VQ-VAE pre-training phase.
    pub fn two_phase(self) -> bool {
        matches!(self, Scheme::GosvaeStar | Scheme::GosvaeDagger)
    }

    /// Residual blocks and the larger codebook.
    pub fn dagger(self) -> bool {
        matches!(self, Scheme::VqvaeDagger | Scheme::GosvaeDagger)
    }

    /// The single-phase scheme that serves as this scheme's pre-training.
    pub fn pretrain_scheme(self) -> Scheme {
        if self.dagger() {
            Scheme::VqvaeDagger
        } else {
            Scheme::Vqvae
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown scheme `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub ratio: usize,
    pub k: usize,
    pub codeword_len: usize,
    pub beta: f64,
    pub lr: f64,
    /// Epochs of the first phase (the whole run for single-phase schemes).
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub variant: Variant,
    pub widths: Vec<usize>,
    /// Reseed unused codewords from encoder outputs after every epoch.
    pub reseed_dead: bool,
}

pub const DEFAULT_LR: f64 = 2e-4;

impl TrainConfig {
    pub fn new(scheme: Scheme) -> Self {
        let mut cfg = Self {
            scheme,
            ratio: 4,
            k: 64,
            codeword_len: 8,
            beta: 0.25,
            lr: DEFAULT_LR,
            epochs: 50,
            finetune_epochs: 20,
            batch: 8,
            seed: 0,
            variant: Variant::Shallow,
            widths: vec![16, 32],
            reseed_dead: false,
        };
        if scheme.dagger() {
            cfg.variant = Variant::Residual;
            cfg.widths = vec![32, 64];
            cfg.k = 256;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.codec_config().validate()?;
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.k == 0 || self.k > u16::MAX as usize {
            return Err(Error::Config(format!("K={} outside 1..=65535", self.k)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        Ok(())
    }

    pub fn codec_config(&self) -> EncoderDecoderConfig {
        EncoderDecoderConfig {
            ratio: self.ratio,
            codeword_len: self.codeword_len,
            widths: self.widths.clone(),
            variant: self.variant,
        }
    }

    /// The configuration of this run's pre-training phase, which is also a
    /// complete single-phase run of the pre-training scheme.
    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig { scheme: self.scheme.pretrain_scheme(), finetune_epochs: 0, ..self.clone() }
    }

    pub fn total_epochs(&self) -> usize {
        if self.scheme.two_phase() {
            self.epochs + self.finetune_epochs
        } else {
            self.epochs
        }
    }
}

/// Encoder, decoder and codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecModel<T> {
    pub config: EncoderDecoderConfig,
    pub encoder: Network<T>,
    pub decoder: Network<T>,
    pub codebook: Codebook<T>,
}

impl<T: Real> CodecModel<T> {
    pub fn new(config: EncoderDecoderConfig, k: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = build_encoder(&config, &mut rng)?;
        let decoder = build_decoder(&config, &mut rng)?;
        let codebook = Codebook::random(k, config.codeword_len, &mut rng)?;
        Ok(Self { config, encoder, decoder, codebook })
    }

    pub fn from_checkpoint(config: EncoderDecoderConfig, k: usize, bytes: &[u8]) -> Result<Self> {
        let mut model = Self::new(config, k, 0)?;
        let tensors = read_checkpoint::<T>(bytes)?;
        model.encoder.load(&tensors)?;
        model.decoder.load(&tensors)?;
        let cb = tensors
            .get(vq::CODEBOOK_NAME)
            .ok_or_else(|| Error::Format("checkpoint lacks the codebook".into()))?;
        if cb.shape() != model.codebook.tensor().shape() {
            return Err(Error::Format(format!("codebook shape {:?}, expected {:?}", cb.shape(), model.codebook.tensor().shape())));
        }
        model.codebook = Codebook::from_tensor(cb.clone())?;
        Ok(model)
    }

    pub fn k(&self) -> usize {
        self.codebook.k()
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count() + self.codebook.tensor().len()
    }

    pub fn checkpoint(&self) -> Vec<u8> {
        let all = self
            .encoder
            .tensors()
            .chain(self.decoder.tensors())
            .chain(std::iter::once((vq::CODEBOOK_NAME, self.codebook.tensor())));
        write_checkpoint(all).expect("parameter names and shapes fit the container")
    }

    pub fn digest(&self) -> String {
        digest(&self.checkpoint())
    }

    /// Transmitter side: image to codeword indices.
    pub fn indices(&self, image: &Tensor<T>) -> Result<IndexMap> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let z_e = self.encoder.apply(&mut tape, x)?;
        quantize(tape.value(z_e), &self.codebook)
    }

    /// Receiver side: indices to image.
    pub fn decode_indices(&self, idx: &IndexMap) -> Result<Tensor<T>> {
        let z_q = vq::dequantize(idx, &self.codebook)?;
        let mut tape = Tape::new();
        let z = tape.constant(z_q);
        let x_hat = self.decoder.apply(&mut tape, z)?;
        Ok(tape.value(x_hat).clone())
    }

    pub fn reconstruct(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode_indices(&self.indices(image)?)
    }

    fn params_mut(&mut self) -> Vec<&mut crate::autodiff::Parameter<T>> {
        let mut v: Vec<_> = self.encoder.params_mut().collect();
        v.extend(self.decoder.params_mut());
        v.push(self.codebook.param_mut());
        v
    }
}

/// Data and frozen networks shared by every run in an experiment. Teacher
/// distributions on the training images are computed once.
pub struct TrainContext<T> {
    pub train: Vec<LabeledScene>,
    pub val: Vec<LabeledScene>,
    pub segmenter: FrozenSegmenter<T>,
    pub extractor: Network<T>,
    teacher: Vec<Tensor<T>>,
}

impl<T: Real> TrainContext<T> {
    pub fn new(
        train: Vec<LabeledScene>,
        val: Vec<LabeledScene>,
        segmenter: FrozenSegmenter<T>,
        extractor: Network<T>,
    ) -> Result<Self> {
        if !extractor.is_frozen() {
            return Err(Error::InvalidArgument("perceptual extractor must be frozen".into()));
        }
        segmenter.verify()?;
        let teacher =
            train.iter().map(|s| Ok(segment(&segmenter, &s.image_tensor())?.into_tensor())).collect::<Result<_>>()?;
        Ok(Self { train, val, segmenter, extractor, teacher })
    }

    /// Cached `softmax(F(x))` for training image `i`.
    pub fn teacher(&self, i: usize) -> &Tensor<T> {
        &self.teacher[i]
    }

    /// Fails if either frozen network changed since it was frozen.
    pub fn verify_frozen(&self, extractor_digest: &str) -> Result<()> {
        self.segmenter.verify()?;
        if self.extractor.digest() != extractor_digest || !self.extractor.is_frozen() {
            return Err(Error::FrozenMutation(self.extractor.name().to_owned()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

/// Validation-set evaluation of a codec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecEval {
    pub metrics: TaskMetrics,
    pub mse: f64,
    pub perceptual: Option<f64>,
    /// Mean Huffman-coded packet size in bytes.
    pub payload_bytes: f64,
    /// Mean fixed-length-coded packet size in bytes.
    pub fixed_payload_bytes: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub phase: Phase,
    pub losses: LossBreakdown,
    pub val_miou: f64,
    pub val_acc: f64,
    pub val_mse: f64,
    pub payload_bytes: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurves {
    pub rows: Vec<CurveRow>,
}

impl TrainingCurves {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Per-epoch values of one loss term; epochs lacking it are skipped.
    pub fn series(&self, term: Term) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.losses.get(term)).collect()
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["epoch".to_string(), "phase".into()];
        header.extend(Term::ALL.iter().map(|t| t.name().to_string()));
        header.extend(["total", "val_miou", "val_acc", "val_mse", "payload_bytes"].map(String::from));
        out.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.epoch.to_string(), r.phase.name().to_string()];
            rec.extend(Term::ALL.iter().map(|&t| r.losses.get(t).map(|v| v.to_string()).unwrap_or_default()));
            rec.extend([r.losses.total, r.val_miou, r.val_acc, r.val_mse, r.payload_bytes].map(|v| v.to_string()));
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Result of a training call.
#[derive(Clone, Debug)]
pub struct TrainRun<T> {
    pub model: CodecModel<T>,
    pub curves: TrainingCurves,
    /// Fine-tuning objective evaluated on the pre-trained weights, before
    /// the first update. Present for two-phase schemes.
    pub finetune_initial: Option<LossBreakdown>,
}

struct Bound {
    encoder: Vec<Var>,
    decoder: Vec<Var>,
    codebook: Var,
}

/// One image through encoder, quantizer, decoder and (if needed) the frozen
/// segmenter, with the objective's composite loss on top.
fn build_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &CodecModel<T>,
    objective: Objective,
    beta: f64,
    image: &Tensor<T>,
    teacher: Option<&Tensor<T>>,
    ctx_seg: &FrozenSegmenter<T>,
    extractor: &Network<T>,
) -> Result<(Bound, crate::objectives::LossGraph, IndexMap, Var)> {
    let bound = Bound {
        encoder: model.encoder.bind(tape),
        decoder: model.decoder.bind(tape),
        codebook: tape.param(model.codebook.param()),
    };
    let x = tape.constant(image.clone());
    let z_e = model.encoder.forward(tape, &bound.encoder, x)?;
    let idx = quantize(tape.value(z_e), &model.codebook)?;
    let z_q = vq::lookup(tape, bound.codebook, &idx)?;
    let z_st = vq::straight_through(tape, z_e, z_q)?;
    let x_hat = model.decoder.forward(tape, &bound.decoder, z_st)?;
    let (s, s_hat) = if objective.needs_task() {
        let teacher = teacher.ok_or(Error::MissingInput { scheme: objective.name(), input: "s" })?;
        let s = tape.constant(teacher.clone());
        (Some(s), Some(segment_var(tape, ctx_seg, x_hat)?))
    } else {
        (None, None)
    };
    let inputs = LossInputs { x: Some(x), x_hat: Some(x_hat), s, s_hat, encoded: Some(z_e), quantized: Some(z_q) };
    let graph = composite(tape, objective, &inputs, objective.needs_extractor().then_some(extractor), beta)?;
    Ok((bound, graph, idx, z_e))
}

/// Mean of `objective`'s terms over the training set, without updating anything.
pub fn evaluate_objective<T: Real>(
    model: &CodecModel<T>,
    objective: Objective,
    beta: f64,
    ctx: &TrainContext<T>,
) -> Result<LossBreakdown> {
    let mut acc = Accumulator::default();
    for (i, scene) in ctx.train.iter().enumerate() {
        let mut tape = Tape::new();
        let (_, graph, _, _) =
            build_loss(&mut tape, model, objective, beta, &scene.image_tensor(), Some(ctx.teacher(i)), &ctx.segmenter, &ctx.extractor)?;
        acc.add(&graph.evaluate(&tape));
    }
    Ok(acc.mean())
}

#[derive(Default)]
struct Accumulator {
    sums: Vec<(Term, f64)>,
    total: f64,
    n: usize,
}

impl Accumulator {
    fn add(&mut self, b: &LossBreakdown) {
        if self.sums.is_empty() {
            self.sums = b.terms.iter().map(|&(t, _)| (t, 0.0)).collect();
        }
        for (s, (_, v)) in self.sums.iter_mut().zip(&b.terms) {
            s.1 += v;
        }
        self.total += b.total;
        self.n += 1;
    }

    fn mean(&self) -> LossBreakdown {
        let n = self.n.max(1) as f64;
        LossBreakdown { terms: self.sums.iter().map(|&(t, s)| (t, s / n)).collect(), total: self.total / n }
    }
}

/// Reconstruct → segment → score against ground truth; encode → payload.
pub fn evaluate<T: Real>(
    model: &CodecModel<T>,
    scenes: &[LabeledScene],
    segmenter: &FrozenSegmenter<T>,
    extractor: Option<&Network<T>>,
) -> Result<CodecEval> {
    let mut cm = ConfusionMatrix::new(segmenter.classes());
    let mut se = 0.0;
    let mut n_pix = 0usize;
    let mut perc = 0.0;
    let mut bytes = 0usize;
    let mut fixed_bytes = 0usize;
    for s in scenes {
        let x = s.image_tensor::<T>();
        let idx = model.indices(&x)?;
        let meta = PacketMeta::new(s.height, s.width, model.config.ratio, model.k())?;
        bytes += encode_packet(&idx, meta, Coder::Huffman)?.payload().total_bytes;
        fixed_bytes += encode_packet(&idx, meta, Coder::Fixed)?.payload().total_bytes;
        let x_hat = model.decode_indices(&idx)?;
        se += x.data().iter().zip(x_hat.data()).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum::<f64>();
        n_pix += x.len();
        cm.add(&hard_labels(&segment(segmenter, &x_hat)?), &s.labels_usize())?;
        if let Some(ext) = extractor {
            let mut tape = Tape::new();
            let a = tape.constant(x);
            let b = tape.constant(x_hat);
            let p = perceptual(&mut tape, ext, a, b)?;
            perc += tape.value(p).item().as_f64();
        }
    }
    let n = scenes.len().max(1) as f64;
    Ok(CodecEval {
        metrics: cm.metrics(),
        mse: se / n_pix.max(1) as f64,
        perceptual: extractor.map(|_| perc / n),
        payload_bytes: bytes as f64 / n,
        fixed_payload_bytes: fixed_bytes as f64 / n,
    })
}

/// Shuffle stream for a phase; the first phase of every scheme shares one
/// stream so a two-phase run's pre-training equals the matching VQ-VAE run.
fn phase_rng(seed: u64, phase: Phase) -> ChaCha8Rng {
    let tag = match phase {
        Phase::Train | Phase::Pretrain => 0x7472_6169_6e00_0001,
        Phase::Finetune => 0x7472_6169_6e00_0002,
    };
    ChaCha8Rng::seed_from_u64(seed ^ tag)
}

fn run_phase<T: Real>(
    model: &mut CodecModel<T>,
    cfg: &TrainConfig,
    objective: Objective,
    phase: Phase,
    epochs: usize,
    first_epoch: usize,
    ctx: &TrainContext<T>,
    curves: &mut TrainingCurves,
) -> Result<()> {
    if epochs == 0 {
        return Ok(());
    }
    if ctx.train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut rng = phase_rng(cfg.seed, phase);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() })?;
    let mut order: Vec<usize> = (0..ctx.train.len()).collect();
    for e in 0..epochs {
        let epoch = first_epoch + e;
        order.shuffle(&mut rng);
        let mut acc = Accumulator::default();
        let mut usage = vec![0u64; model.k()];
        let mut last_encoded: Vec<T> = Vec::new();
        for batch in order.chunks(cfg.batch) {
            let sizes: Vec<usize> = model.params_mut().iter().map(|p| p.tensor.len()).collect();
            let mut grads: Vec<Vec<T>> = sizes.iter().map(|&n| vec![T::zero(); n]).collect();
            for &i in batch {
                let mut tape = Tape::new();
                let image = ctx.train[i].image_tensor();
                let (bound, graph, idx, z_e) =
                    build_loss(&mut tape, model, objective, cfg.beta, &image, Some(ctx.teacher(i)), &ctx.segmenter, &ctx.extractor)?;
                let breakdown = graph.evaluate(&tape);
                if !breakdown.total.is_finite() {
                    return Err(Error::Divergence { epoch });
                }
                acc.add(&breakdown);
                for (u, h) in usage.iter_mut().zip(codebook_usage(&idx)) {
                    *u += h;
                }
                if cfg.reseed_dead {
                    last_encoded = tape.value(z_e).data().to_vec();
                }
                tape.backward(graph.total)?;
                let vars = bound.encoder.iter().chain(&bound.decoder).chain(std::iter::once(&bound.codebook));
                for (g, &v) in grads.iter_mut().zip(vars) {
                    if let Some(pg) = tape.grad(v) {
                        for (a, &b) in g.iter_mut().zip(pg) {
                            *a = *a + b;
                        }
                    }
                }
            }
            let inv = T::from_f64(1.0 / batch.len() as f64);
            grads.iter_mut().flatten().for_each(|g| *g = *g * inv);
            adam.step(&mut model.params_mut(), &grads)?;
        }
        if model.codebook.tensor().data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
        if cfg.reseed_dead {
            vq::reseed_dead(&mut model.codebook, &usage, &last_encoded, &mut rng);
        }
        let eval = evaluate(model, &ctx.val, &ctx.segmenter, None)?;
        curves.rows.push(CurveRow {
            epoch,
            phase,
            losses: acc.mean(),
            val_miou: eval.metrics.miou,
            val_acc: eval.metrics.accuracy,
            val_mse: eval.mse,
            payload_bytes: eval.payload_bytes,
        });
    }
    Ok(())
}

/// Trains `cfg.scheme` end to end. Two-phase schemes run
/// [`pretrain_then_finetune`].
pub fn train<T: Real>(cfg: &TrainConfig, ctx: &TrainContext<T>) -> Result<TrainRun<T>> {
    cfg.validate()?;
    if cfg.scheme.two_phase() {
        return pretrain_then_finetune(cfg, ctx);
    }
    let mut model = CodecModel::new(cfg.codec_config(), cfg.k, cfg.seed)?;
    let mut curves = TrainingCurves::default();
    run_phase(&mut model, cfg, cfg.scheme.objective(), Phase::Train, cfg.epochs, 1, ctx, &mut curves)?;
    ctx.segmenter.verify()?;
    Ok(TrainRun { model, curves, finetune_initial: None })
}

/// Phase 1: the pre-training scheme with `L_v`. Phase 2: a fresh optimizer
/// on the scheme's own objective, starting from the phase-1 weights.
pub fn pretrain_then_finetune<T: Real>(cfg: &TrainConfig, ctx: &TrainContext<T>) -> Result<TrainRun<T>> {
    if !cfg.scheme.two_phase() {
        return Err(Error::Config(format!("{} has no pre-training phase", cfg.scheme)));
    }
    let pre = train(&cfg.pretrain_config(), ctx)?;
    finetune_from(cfg, ctx, pre)
}

/// Phase 2 of [`pretrain_then_finetune`] on an existing phase-1 result,
/// which must come from `cfg.pretrain_config()`.
pub fn finetune_from<T: Real>(cfg: &TrainConfig, ctx: &TrainContext<T>, pretrained: TrainRun<T>) -> Result<TrainRun<T>> {
    cfg.validate()?;
    let TrainRun { mut model, mut curves, .. } = pretrained;
    if model.config != cfg.codec_config() || model.k() != cfg.k {
        return Err(Error::Config("pre-trained model does not match the fine-tuning config".into()));
    }
    for r in &mut curves.rows {
        r.phase = Phase::Pretrain;
    }
    let objective = cfg.scheme.objective();
    let initial = evaluate_objective(&model, objective, cfg.beta, ctx)?;
    let first = curves.rows.last().map_or(1, |r| r.epoch + 1);
    run_phase(&mut model, cfg, objective, Phase::Finetune, cfg.finetune_epochs, first, ctx, &mut curves)?;
    ctx.segmenter.verify()?;
    Ok(TrainRun { model, curves, finetune_initial: Some(initial) })
}

/// Pearson product-moment correlation.
pub fn curve_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "correlation needs two series of equal length ≥ 3, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::InvalidArgument("correlation undefined for a constant series".into()));
    }
    Ok(sab / (saa.sqrt() * sbb.sqrt()))
}

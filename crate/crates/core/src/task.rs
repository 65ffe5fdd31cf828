//! The downstream segmentation task: pre-training and freezing the
//! segmenter, producing imitation targets, and scoring label maps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::read_checkpoint;
use crate::autodiff::{Adam, AdamConfig, Real, Tape, Tensor, Var};
use crate::datagen::LabeledScene;
use crate::error::{Error, Result};
use crate::nets::{build_segmenter, Network};
use crate::objectives::{argmax_channels, SegDist, LOG_EPS};

/// Minimum validation pixel accuracy for a usable teacher.
pub const MIN_TEACHER_ACCURACY: f64 = 90.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    /// Percent.
    pub miou: f64,
    /// Percent.
    pub accuracy: f64,
    /// IoU per class in `[0, 1]`; `None` when the class is absent from both maps.
    pub per_class_iou: Vec<Option<f64>>,
}

/// Corpus-level confusion counts, `counts[gt * m + pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("metrics", format!("{} predictions vs {} labels", pred.len(), gt.len())));
        }
        let m = self.classes;
        if let Some(&bad) = pred.iter().chain(gt).find(|&&l| l >= m) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {m} classes")));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[g * m + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn metrics(&self) -> TaskMetrics {
        let m = self.classes;
        let total: u64 = self.counts.iter().sum();
        let correct: u64 = (0..m).map(|c| self.counts[c * m + c]).sum();
        let per_class_iou: Vec<Option<f64>> = (0..m)
            .map(|c| {
                let tp = self.counts[c * m + c];
                let gt_c: u64 = (0..m).map(|p| self.counts[c * m + p]).sum();
                let pred_c: u64 = (0..m).map(|g| self.counts[g * m + c]).sum();
                let union = gt_c + pred_c - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = if present.is_empty() { 0.0 } else { 100.0 * present.iter().sum::<f64>() / present.len() as f64 };
        let accuracy = if total == 0 { 0.0 } else { 100.0 * correct as f64 / total as f64 };
        TaskMetrics { miou, accuracy, per_class_iou }
    }
}

/// mIoU and pixel accuracy of a single prediction.
pub fn metrics(pred: &[usize], gt: &[usize], classes: usize) -> Result<TaskMetrics> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, gt)?;
    Ok(cm.metrics())
}

/// Per-pixel argmax, ties to the lowest class.
pub fn hard_labels<T: Real>(s: &SegDist<T>) -> Vec<usize> {
    argmax_channels(s.tensor())
}

/// A pre-trained segmenter whose parameters can no longer change.
#[derive(Clone, Debug)]
pub struct FrozenSegmenter<T> {
    net: Network<T>,
    classes: usize,
    digest: String,
    validation: Option<TaskMetrics>,
}

impl<T: Real> FrozenSegmenter<T> {
    /// Freezes `net` and records its digest.
    pub fn freeze(mut net: Network<T>, classes: usize) -> Self {
        net.freeze();
        let digest = net.digest();
        Self { net, classes, digest, validation: None }
    }

    pub fn from_checkpoint(bytes: &[u8], classes: usize) -> Result<Self> {
        let mut net = build_segmenter(classes, &mut ChaCha8Rng::seed_from_u64(0))?;
        net.load(&read_checkpoint(bytes)?)?;
        Ok(Self::freeze(net, classes))
    }

    pub fn net(&self) -> &Network<T> {
        &self.net
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Digest recorded at freeze time.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Validation metrics measured right after pre-training, if known.
    pub fn validation(&self) -> Option<&TaskMetrics> {
        self.validation.as_ref()
    }

    /// Recomputes the digest and fails if the parameters drifted.
    pub fn verify(&self) -> Result<()> {
        if self.net.digest() != self.digest || !self.net.is_frozen() {
            return Err(Error::FrozenMutation(self.net.name().to_owned()));
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Vec<u8> {
        self.net.checkpoint()
    }
}

/// `softmax(F(x))` on a tape; gradients may flow to `x` but never to `F`.
pub fn segment_var<T: Real>(tape: &mut Tape<T>, f: &FrozenSegmenter<T>, x: Var) -> Result<Var> {
    let logits = f.net.apply(tape, x)?;
    tape.softmax_channels(logits)
}

pub fn segment<T: Real>(f: &FrozenSegmenter<T>, x: &Tensor<T>) -> Result<SegDist<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let s = segment_var(&mut tape, f, xv)?;
    SegDist::new(tape.value(s).clone())
}

/// Teacher distribution `sg[softmax(F(x))]`.
pub fn imitation_target<T: Real>(tape: &mut Tape<T>, f: &FrozenSegmenter<T>, x: Var) -> Result<Var> {
    let s = segment_var(tape, f, x)?;
    Ok(tape.stop_gradient(s))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 8, batch: 8, lr: 2e-3, seed: 0 }
    }
}

/// Mean hard-label cross-entropy of `probs` against integer labels.
fn label_ce<T: Real>(tape: &mut Tape<T>, probs: Var, labels: &[u8]) -> Result<Var> {
    let shape = tape.value(probs).shape().to_vec();
    let m = shape[2];
    let mut onehot = Tensor::zeros(shape);
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[i * m + l as usize] = T::one();
    }
    let onehot = tape.constant(onehot);
    let lp = tape.ln(probs, LOG_EPS);
    let picked = tape.mul(onehot, lp)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / labels.len() as f64))
}

/// Validation metrics of a segmenter against ground truth.
pub fn evaluate_segmenter<T: Real>(f: &FrozenSegmenter<T>, scenes: &[LabeledScene]) -> Result<TaskMetrics> {
    let mut cm = ConfusionMatrix::new(f.classes);
    for s in scenes {
        let dist = segment(f, &s.image_tensor())?;
        cm.add(&hard_labels(&dist), &s.labels_usize())?;
    }
    Ok(cm.metrics())
}

/// Trains the segmenter on ground-truth labels, then freezes it. Fails if
/// validation pixel accuracy stays below [`MIN_TEACHER_ACCURACY`].
pub fn pretrain_segmenter<T: Real>(
    train: &[LabeledScene],
    val: &[LabeledScene],
    classes: usize,
    cfg: &PretrainConfig,
) -> Result<FrozenSegmenter<T>> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("segmenter pre-training needs a nonempty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = build_segmenter::<T>(classes, &mut rng)?;
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() })?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch.max(1)) {
            let mut grads: Vec<Vec<T>> = net.params().iter().map(|p| vec![T::zero(); p.tensor.len()]).collect();
            for &i in batch {
                let scene = &train[i];
                let mut tape = Tape::new();
                let bound = net.bind(&mut tape);
                let x = tape.constant(scene.image_tensor());
                let logits = net.forward(&mut tape, &bound, x)?;
                let probs = tape.softmax_channels(logits)?;
                let loss = label_ce(&mut tape, probs, &scene.labels)?;
                tape.backward(loss)?;
                for (g, &v) in grads.iter_mut().zip(&bound) {
                    if let Some(pg) = tape.grad(v) {
                        for (a, &b) in g.iter_mut().zip(pg) {
                            *a = *a + b;
                        }
                    }
                }
            }
            let inv = T::from_f64(1.0 / batch.len() as f64);
            grads.iter_mut().flatten().for_each(|g| *g = *g * inv);
            let mut params: Vec<_> = net.params_mut().collect();
            adam.step(&mut params, &grads)?;
        }
    }
    let mut frozen = FrozenSegmenter::freeze(net, classes);
    let eval_set = if val.is_empty() { train } else { val };
    let m = evaluate_segmenter(&frozen, eval_set)?;
    if m.accuracy < MIN_TEACHER_ACCURACY {
        return Err(Error::Convergence { accuracy: m.accuracy, required: MIN_TEACHER_ACCURACY });
    }
    frozen.validation = Some(m);
    Ok(frozen)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let gt = vec![0, 1, 2, 1];
        let m = metrics(&gt, &gt, 3).unwrap();
        assert_eq!(m.miou, 100.0);
        assert_eq!(m.accuracy, 100.0);
    }

    #[test]
    fn hand_enumerated_2x2() {
        let gt = [0, 0, 1, 1];
        let pred = [0, 1, 1, 1];
        let m = metrics(&pred, &gt, 2).unwrap();
        assert_eq!(m.per_class_iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((m.miou - 58.333333).abs() < 1e-5);
        assert_eq!(m.accuracy, 75.0);
        let m3 = metrics(&pred, &gt, 3).unwrap();
        assert_eq!(m3.miou, m.miou);
        assert_eq!(m3.per_class_iou[2], None);
    }

    #[test]
    fn metrics_errors() {
        assert!(metrics(&[0, 1], &[0], 2).is_err());
        assert!(metrics(&[0, 3], &[0, 1], 2).is_err());
    }

    #[test]
    fn hard_label_rules() {
        let one_hot = SegDist::new(Tensor::new(vec![1, 2, 3], vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(hard_labels(&one_hot), vec![2, 1]);
        let third = 1.0 / 3.0;
        let uniform = SegDist::new(Tensor::full(vec![2, 2, 3], third)).unwrap();
        assert_eq!(hard_labels(&uniform), vec![0; 4]);
    }

    fn two_class_scenes(n: usize, seed: u64) -> Vec<LabeledScene> {
        (0..n).map(|i| crate::datagen::generate_scene(seed + i as u64, 32, 32, 2).unwrap()).collect()
    }

    #[test]
    fn separable_two_class_teacher() {
        let train = two_class_scenes(24, 100);
        let val = two_class_scenes(6, 900);
        let cfg = PretrainConfig { epochs: 6, ..PretrainConfig::default() };
        let f = pretrain_segmenter::<f32>(&train, &val, 2, &cfg).unwrap();
        assert!(f.validation().unwrap().accuracy > 95.0, "{:?}", f.validation());
        f.verify().unwrap();
        let again = pretrain_segmenter::<f32>(&train, &val, 2, &cfg).unwrap();
        assert_eq!(f.digest(), again.digest());
    }

    #[test]
    fn unconverged_teacher_is_rejected() {
        let train: Vec<_> = (0..3).map(|i| crate::datagen::generate_scene(i, 32, 32, 5).unwrap()).collect();
        let cfg = PretrainConfig { epochs: 0, ..PretrainConfig::default() };
        let err = pretrain_segmenter::<f32>(&train, &train, 5, &cfg);
        assert!(matches!(err, Err(Error::Convergence { .. })), "{err:?}");
        assert!(pretrain_segmenter::<f32>(&[], &[], 2, &cfg).is_err());
    }

    #[test]
    fn imitation_target_blocks_gradient() {
        let net = build_segmenter::<f64>(3, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let f = FrozenSegmenter::freeze(net, 3);
        let mut tape = Tape::new();
        let img = Tensor::from_fn(vec![8, 8, 3], |i| ((i * 37) % 11) as f64 / 11.0);
        let x = tape.leaf(img.clone(), true);
        let s = imitation_target(&mut tape, &f, x).unwrap();
        assert_eq!(tape.value(s), segment(&f, &img).unwrap().tensor());
        let l = tape.sum(s);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn segment_is_deterministic_simplex() {
        let net = build_segmenter::<f64>(4, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let f = FrozenSegmenter::freeze(net, 4);
        let img = Tensor::from_fn(vec![16, 16, 3], |i| ((i * 13) % 17) as f64 / 17.0);
        let a = segment(&f, &img).unwrap();
        let b = segment(&f, &img).unwrap();
        assert_eq!(a, b);
        for px in a.tensor().data().chunks(4) {
            assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

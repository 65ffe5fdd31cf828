//! Finite-difference gradient suites shared by the integration tests.

#![allow(dead_code)]

use std::cell::OnceCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semquant::autodiff::gradcheck::check;
use semquant::nets::{build_decoder, build_encoder, build_feature_extractor, build_segmenter};
use semquant::objectives::{composite, LossInputs};
use semquant::task::{segment, segment_var};
use semquant::vq::{lookup, quantize, straight_through};
use semquant::{Codebook, EncoderDecoderConfig, FrozenSegmenter, IndexMap, Objective, Result, Tape, Tensor, Var, Variant};

pub const STEP: f64 = 1e-4;
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;

#[derive(Debug)]
pub struct Check {
    pub name: String,
    pub worst: f64,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst < self.tol
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn weighted(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(tape.value(y).shape(), &mut rng));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Every differentiable tape operation under a random cotangent.
pub fn primitive_suite() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut r = |s: &[usize]| random(s, &mut rng);
    let cases: Vec<(&str, Vec<Tensor<f64>>, Build)> = vec![
        ("conv2d", vec![r(&[5, 5, 2]), r(&[3, 3, 2, 4]), r(&[4])], Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1, 0)?;
            weighted(t, y, 1)
        })),
        ("conv2d_strided", vec![r(&[6, 4, 3]), r(&[4, 4, 3, 2]), r(&[2])], Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
            weighted(t, y, 2)
        })),
        ("conv_transpose2d", vec![r(&[3, 2, 2]), r(&[4, 4, 3, 2]), r(&[3])], Box::new(|t, v| {
            let y = t.conv_transpose2d(v[0], v[1], v[2], 2)?;
            weighted(t, y, 3)
        })),
        ("add", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            weighted(t, y, 4)
        })),
        ("sub", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted(t, y, 5)
        })),
        ("mul", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted(t, y, 6)
        })),
        ("scale", vec![r(&[7])], Box::new(|t, v| {
            let y = t.scale(v[0], 2.5);
            weighted(t, y, 7)
        })),
        ("silu", vec![r(&[9]).map(|x| 3.0 * x)], Box::new(|t, v| {
            let y = t.silu(v[0]);
            weighted(t, y, 8)
        })),
        ("sigmoid", vec![r(&[9]).map(|x| 3.0 * x)], Box::new(|t, v| {
            let y = t.sigmoid(v[0]);
            weighted(t, y, 9)
        })),
        ("square", vec![r(&[9])], Box::new(|t, v| {
            let y = t.square(v[0]);
            weighted(t, y, 10)
        })),
        ("ln", vec![r(&[9]).map(|x| x.abs() + 0.1)], Box::new(|t, v| {
            let y = t.ln(v[0], 1e-8);
            weighted(t, y, 11)
        })),
        ("softmax_channels", vec![r(&[2, 3, 4]).map(|x| 2.0 * x)], Box::new(|t, v| {
            let y = t.softmax_channels(v[0])?;
            weighted(t, y, 12)
        })),
        ("normalize_channels", vec![r(&[2, 3, 4])], Box::new(|t, v| {
            let y = t.normalize_channels(v[0], 1e-10)?;
            weighted(t, y, 13)
        })),
        ("sum", vec![r(&[6])], Box::new(|t, v| {
            let y = t.square(v[0]);
            Ok(t.sum(y))
        })),
        ("mean", vec![r(&[6])], Box::new(|t, v| {
            let y = t.square(v[0]);
            Ok(t.mean(y))
        })),
        ("gather_rows", vec![r(&[4, 3])], Box::new(|t, v| {
            let y = t.gather_rows(v[0], &[2, 0, 2, 3], vec![2, 2, 3])?;
            weighted(t, y, 14)
        })),
        ("stop_gradient", vec![r(&[5]), r(&[5])], Box::new(|t, v| {
            let s = t.stop_gradient(v[0]);
            let p = t.mul(s, v[1])?;
            let q = t.mul(p, v[0])?;
            weighted(t, q, 15)
        })),
        ("straight_through", vec![r(&[2, 2, 3]), r(&[2, 2, 3])], Box::new(|t, v| {
            let y = t.straight_through(v[0], v[1])?;
            let s = t.square(y);
            weighted(t, s, 16)
        })),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, build)| Check {
            name: name.to_owned(),
            worst: check(&inputs, STEP, build).expect("gradient check runs").worst(),
            tol: PRIMITIVE_TOL,
        })
        .collect()
}

/// The five composite objectives on a seeded toy codec, differentiated with
/// respect to every encoder, decoder and codebook parameter.
pub fn composite_suite() -> Vec<Check> {
    let objectives = [
        ("L_v", Objective::PixelMse),
        ("L_s", Objective::TaskJsdPerceptual),
        ("L_sc", Objective::TaskCe),
        ("L_vk", Objective::PixelMseKld),
        ("L_vp", Objective::Perceptual),
        ("kld", Objective::TaskKld),
        ("kld+perceptual", Objective::TaskKldPerceptual),
    ];
    objectives.into_iter().map(|(name, o)| Check { name: name.into(), worst: composite_check(o, 11), tol: COMPOSITE_TOL }).collect()
}

pub fn composite_check(objective: Objective, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderDecoderConfig { ratio: 2, codeword_len: 3, widths: vec![4], variant: Variant::Shallow };
    let enc = build_encoder::<f64>(&cfg, &mut rng).unwrap();
    let dec = build_decoder::<f64>(&cfg, &mut rng).unwrap();
    let k = 6;
    let cb = random(&[k, cfg.codeword_len], &mut rng).map(|v| 0.3 * v);
    let seg = FrozenSegmenter::freeze(build_segmenter::<f64>(3, &mut rng).unwrap(), 3);
    let ext = build_feature_extractor::<f64>();
    let image = Tensor::from_fn(vec![8, 8, 3], |_| rng.gen_range(0.0..1.0));
    let teacher = segment(&seg, &image).unwrap().into_tensor();

    let (ne, nd) = (enc.params().len(), dec.params().len());
    let inputs: Vec<Tensor<f64>> =
        enc.params().iter().chain(dec.params()).map(|p| p.tensor.clone()).chain(std::iter::once(cb)).collect();
    let pinned_idx: OnceCell<IndexMap> = OnceCell::new();
    let result = check(&inputs, STEP, |t, v| {
        let x = t.constant(image.clone());
        let z_e = enc.forward(t, &v[..ne], x)?;
        let codebook = v[ne + nd];
        let idx = pinned_idx.get_or_init(|| {
            quantize(t.value(z_e), &Codebook::from_tensor(t.value(codebook).clone()).unwrap()).unwrap()
        });
        let z_q = lookup(t, codebook, idx)?;
        let z_st = straight_through(t, z_e, z_q)?;
        let x_hat = dec.forward(t, &v[ne..ne + nd], z_st)?;
        let (s, s_hat) = if objective.needs_task() {
            (Some(t.constant(teacher.clone())), Some(segment_var(t, &seg, x_hat)?))
        } else {
            (None, None)
        };
        let inputs = LossInputs { x: Some(x), x_hat: Some(x_hat), s, s_hat, encoded: Some(z_e), quantized: Some(z_q) };
        Ok(composite(t, objective, &inputs, Some(&ext), 0.25)?.total)
    })
    .unwrap();
    result.worst()
}

//! Training objectives: pixel MSE, the perceptual feature distance,
//! divergences between per-pixel class distributions, and the composite
//! objectives assembled from them.
//!
//! Divergences use the natural log with `ln(p + 1e-8)` flooring and are
//! averaged over pixels. Every composite uses unit weights on its terms.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::Network;
use crate::vq::vq_losses;

pub const LOG_EPS: f64 = 1e-8;
pub const NORM_EPS: f64 = 1e-10;
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Per-pixel class distributions, `[H, W, m]`, each pixel on the simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct SegDist<T> {
    probs: Tensor<T>,
}

impl<T: Real> SegDist<T> {
    pub fn new(probs: Tensor<T>) -> Result<Self> {
        let (_, _, m) = probs.dims3()?;
        if m == 0 {
            return Err(Error::shape("seg_dist", "zero classes"));
        }
        for px in probs.data().chunks_exact(m) {
            let s: f64 = px.iter().map(|v| v.as_f64()).sum();
            if px.iter().any(|v| v.as_f64() < 0.0 || !v.is_finite()) || (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::InvalidArgument(format!("pixel {px:?} is not a probability vector")));
            }
        }
        Ok(Self { probs })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.probs
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.probs
    }

    pub fn classes(&self) -> usize {
        self.probs.shape()[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Term {
    Mse,
    Perceptual,
    Jsd,
    Kld,
    Ce,
    Codebook,
    Commitment,
}

impl Term {
    pub const ALL: [Term; 7] = [Term::Mse, Term::Perceptual, Term::Jsd, Term::Kld, Term::Ce, Term::Codebook, Term::Commitment];

    pub fn name(self) -> &'static str {
        match self {
            Term::Mse => "mse",
            Term::Perceptual => "perceptual",
            Term::Jsd => "jsd",
            Term::Kld => "kld",
            Term::Ce => "ce",
            Term::Codebook => "codebook",
            Term::Commitment => "commitment",
        }
    }
}

/// Which terms a training objective sums. The codebook and commitment
/// terms are always present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    /// Pixel MSE (plain VQ-VAE).
    PixelMse,
    /// Perceptual distance + JSD to the frozen task model's output.
    TaskJsdPerceptual,
    /// Hard-label cross-entropy against the task model's argmax.
    TaskCe,
    /// Pixel MSE + KLD to the task output.
    PixelMseKld,
    /// Perceptual distance only.
    Perceptual,
    /// KLD to the task output only.
    TaskKld,
    /// Perceptual distance + KLD to the task output.
    TaskKldPerceptual,
}

impl Objective {
    pub fn terms(self) -> &'static [Term] {
        use Term::*;
        match self {
            Objective::PixelMse => &[Mse, Codebook, Commitment],
            Objective::TaskJsdPerceptual => &[Perceptual, Jsd, Codebook, Commitment],
            Objective::TaskCe => &[Ce, Codebook, Commitment],
            Objective::PixelMseKld => &[Mse, Kld, Codebook, Commitment],
            Objective::Perceptual => &[Perceptual, Codebook, Commitment],
            Objective::TaskKld => &[Kld, Codebook, Commitment],
            Objective::TaskKldPerceptual => &[Perceptual, Kld, Codebook, Commitment],
        }
    }

    /// Whether the objective needs segmentation maps of original and reconstruction.
    pub fn needs_task(self) -> bool {
        self.terms().iter().any(|t| matches!(t, Term::Jsd | Term::Kld | Term::Ce))
    }

    pub fn needs_extractor(self) -> bool {
        self.terms().contains(&Term::Perceptual)
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::PixelMse => "pixel_mse",
            Objective::TaskJsdPerceptual => "task_jsd_perceptual",
            Objective::TaskCe => "task_ce",
            Objective::PixelMseKld => "pixel_mse_kld",
            Objective::Perceptual => "perceptual",
            Objective::TaskKld => "task_kld",
            Objective::TaskKldPerceptual => "task_kld_perceptual",
        }
    }
}

/// Named scalar loss terms and their sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: Vec<(Term, f64)>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn get(&self, term: Term) -> Option<f64> {
        self.terms.iter().find(|(t, _)| *t == term).map(|&(_, v)| v)
    }
}

/// Loss terms as nodes on a tape.
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub terms: Vec<(Term, Var)>,
    pub total: Var,
}

impl LossGraph {
    pub fn evaluate<T: Real>(&self, tape: &Tape<T>) -> LossBreakdown {
        LossBreakdown {
            terms: self.terms.iter().map(|&(t, v)| (t, tape.value(v).item().as_f64())).collect(),
            total: tape.value(self.total).item().as_f64(),
        }
    }
}

fn pixels<T: Real>(tape: &Tape<T>, v: Var) -> f64 {
    let s = tape.value(v).shape();
    s[..s.len().saturating_sub(1)].iter().product::<usize>().max(1) as f64
}

fn check_same<T: Real>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", tape.value(a).shape(), tape.value(b).shape())));
    }
    Ok(())
}

/// Mean squared pixel difference over all `H·W·3` values.
pub fn mse<T: Real>(tape: &mut Tape<T>, x: Var, x_hat: Var) -> Result<Var> {
    let d = tape.sub(x, x_hat)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// `mean_pixels Σ_c P·ln((P+ε)/(Q+ε))`.
pub fn kld<T: Real>(tape: &mut Tape<T>, p: Var, q: Var) -> Result<Var> {
    check_same(tape, "kld", p, q)?;
    let lp = tape.ln(p, LOG_EPS);
    let lq = tape.ln(q, LOG_EPS);
    let ratio = tape.sub(lp, lq)?;
    let weighted = tape.mul(p, ratio)?;
    let s = tape.sum(weighted);
    let n = pixels(tape, p);
    Ok(tape.scale(s, 1.0 / n))
}

/// `½·KLD(S‖M) + ½·KLD(Ŝ‖M)` with `M = ½(S + Ŝ)` per pixel.
pub fn jsd<T: Real>(tape: &mut Tape<T>, s: Var, s_hat: Var) -> Result<Var> {
    check_same(tape, "jsd", s, s_hat)?;
    let sum = tape.add(s, s_hat)?;
    let mix = tape.scale(sum, 0.5);
    let a = kld(tape, s, mix)?;
    let b = kld(tape, s_hat, mix)?;
    let both = tape.add(a, b)?;
    Ok(tape.scale(both, 0.5))
}

/// Per-pixel argmax, ties to the lowest class.
pub fn argmax_channels<T: Real>(probs: &Tensor<T>) -> Vec<usize> {
    let m = *probs.shape().last().unwrap_or(&1);
    probs
        .data()
        .chunks_exact(m.max(1))
        .map(|px| {
            let mut best = 0;
            for c in 1..px.len() {
                if px[c] > px[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// `mean_pixels −ln(Ŝ[argmax S] + ε)`; the teacher only contributes hard labels.
pub fn ce<T: Real>(tape: &mut Tape<T>, s: Var, s_hat: Var) -> Result<Var> {
    check_same(tape, "ce", s, s_hat)?;
    let shape = tape.value(s).shape().to_vec();
    let m = *shape.last().unwrap_or(&1);
    let labels = argmax_channels(tape.value(s));
    let mut onehot = Tensor::zeros(shape);
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[i * m + l] = T::one();
    }
    let onehot = tape.constant(onehot);
    let lq = tape.ln(s_hat, LOG_EPS);
    let picked = tape.mul(onehot, lq)?;
    let total = tape.sum(picked);
    let n = pixels(tape, s);
    Ok(tape.scale(total, -1.0 / n))
}

/// Feature-space distance under the frozen extractor: at each scale,
/// channel-normalize, square the difference, average over positions and
/// channels; sum over scales.
pub fn perceptual<T: Real>(tape: &mut Tape<T>, extractor: &Network<T>, x: Var, x_hat: Var) -> Result<Var> {
    check_same(tape, "perceptual", x, x_hat)?;
    let bound = extractor.bind(tape);
    let fx = extractor.forward_taps(tape, &bound, x)?;
    let fy = extractor.forward_taps(tape, &bound, x_hat)?;
    let mut total: Option<Var> = None;
    for (a, b) in fx.into_iter().zip(fy) {
        let na = tape.normalize_channels(a, NORM_EPS)?;
        let nb = tape.normalize_channels(b, NORM_EPS)?;
        let d = tape.sub(na, nb)?;
        let sq = tape.square(d);
        let m = tape.mean(sq);
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("extractor has no taps".into()))
}

/// Tape nodes a composite objective may draw on.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossInputs {
    pub x: Option<Var>,
    pub x_hat: Option<Var>,
    /// Teacher distribution on the original; always treated as stop-gradient.
    pub s: Option<Var>,
    pub s_hat: Option<Var>,
    pub encoded: Option<Var>,
    pub quantized: Option<Var>,
}

fn need(v: Option<Var>, objective: Objective, input: &'static str) -> Result<Var> {
    v.ok_or(Error::MissingInput { scheme: objective.name(), input })
}

/// Builds exactly the terms of `objective` and their unit-weight sum.
pub fn composite<T: Real>(
    tape: &mut Tape<T>,
    objective: Objective,
    inputs: &LossInputs,
    extractor: Option<&Network<T>>,
    beta: f64,
) -> Result<LossGraph> {
    let teacher = match inputs.s {
        Some(s) if objective.needs_task() => Some(tape.stop_gradient(s)),
        _ => None,
    };
    let mut terms = Vec::with_capacity(4);
    for &term in objective.terms() {
        let v = match term {
            Term::Mse => mse(tape, need(inputs.x, objective, "x")?, need(inputs.x_hat, objective, "x_hat")?)?,
            Term::Perceptual => {
                let ext = extractor.ok_or(Error::MissingInput { scheme: objective.name(), input: "extractor" })?;
                perceptual(tape, ext, need(inputs.x, objective, "x")?, need(inputs.x_hat, objective, "x_hat")?)?
            }
            Term::Jsd => jsd(tape, need(teacher, objective, "s")?, need(inputs.s_hat, objective, "s_hat")?)?,
            Term::Kld => kld(tape, need(teacher, objective, "s")?, need(inputs.s_hat, objective, "s_hat")?)?,
            Term::Ce => ce(tape, need(teacher, objective, "s")?, need(inputs.s_hat, objective, "s_hat")?)?,
            // Both vq terms come from one call; the commitment arm is filled below.
            Term::Codebook => {
                let (cb, com) = vq_losses(
                    tape,
                    need(inputs.encoded, objective, "encoded")?,
                    need(inputs.quantized, objective, "quantized")?,
                    beta,
                )?;
                terms.push((Term::Codebook, cb));
                terms.push((Term::Commitment, com));
                continue;
            }
            Term::Commitment => continue,
        };
        terms.push((term, v));
    }
    let mut total = terms[0].1;
    for &(_, v) in &terms[1..] {
        total = tape.add(total, v)?;
    }
    Ok(LossGraph { terms, total })
}

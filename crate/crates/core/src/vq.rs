//! Codebook quantizer: nearest-codeword assignment, lookup, straight-through
//! gradient routing and the codebook/commitment loss terms.

use rand::Rng;

use crate::autodiff::{Parameter, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const CODEBOOK_NAME: &str = "codebook";

/// `K` learnable codewords of length `D`, stored as a `[K, D]` parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    param: Parameter<T>,
}

impl<T: Real> Codebook<T> {
    /// Components uniform in `[-1/K, 1/K]`.
    pub fn random(k: usize, d: usize, rng: &mut impl Rng) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::InvalidArgument(format!("codebook needs K ≥ 1 and D ≥ 1, got {k}x{d}")));
        }
        let bound = 1.0 / k as f64;
        let t = Tensor::from_fn(vec![k, d], |_| T::from_f64(rng.gen_range(-bound..=bound)));
        Ok(Self { param: Parameter::new(CODEBOOK_NAME, t) })
    }

    pub fn from_tensor(t: Tensor<T>) -> Result<Self> {
        match t.shape() {
            [k, d] if *k > 0 && *d > 0 => {}
            s => return Err(Error::shape("codebook", format!("expected nonempty [K, D], got {s:?}"))),
        }
        if !t.is_finite() {
            return Err(Error::InvalidArgument("codebook contains non-finite values".into()));
        }
        Ok(Self { param: Parameter::new(CODEBOOK_NAME, t) })
    }

    pub fn k(&self) -> usize {
        self.param.tensor.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.param.tensor.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.d();
        &self.param.tensor.data()[i * d..(i + 1) * d]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.param.tensor
    }

    pub fn param(&self) -> &Parameter<T> {
        &self.param
    }

    pub fn param_mut(&mut self) -> &mut Parameter<T> {
        &mut self.param
    }

    /// Replaces codeword `i` with `value` (length `D`).
    pub fn set_row(&mut self, i: usize, value: &[T]) {
        let d = self.d();
        self.param.tensor.data_mut()[i * d..(i + 1) * d].copy_from_slice(value);
    }
}

/// `(H/r)×(W/r)` grid of codeword indices produced against a size-`K` codebook.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IndexMap {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub indices: Vec<u32>,
}

impl IndexMap {
    pub fn new(height: usize, width: usize, k: usize, indices: Vec<u32>) -> Result<Self> {
        if indices.len() != height * width {
            return Err(Error::shape("index_map", format!("{} indices for a {height}x{width} grid", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= k) {
            return Err(Error::IndexOutOfRange { index: bad, k });
        }
        Ok(Self { height, width, k, indices })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[inline]
fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Nearest codeword (squared Euclidean) per position; ties go to the lowest index.
pub fn quantize<T: Real>(encoded: &Tensor<T>, cb: &Codebook<T>) -> Result<IndexMap> {
    let (h, w, d) = encoded.dims3()?;
    if d != cb.d() {
        return Err(Error::shape("quantize", format!("feature length {d} vs codeword length {}", cb.d())));
    }
    let indices = encoded
        .data()
        .chunks_exact(d.max(1))
        .map(|z| {
            let mut best = 0usize;
            let mut best_dist = sq_dist(z, cb.row(0));
            for l in 1..cb.k() {
                let dist = sq_dist(z, cb.row(l));
                if dist < best_dist {
                    best = l;
                    best_dist = dist;
                }
            }
            best as u32
        })
        .collect();
    IndexMap::new(h, w, cb.k(), indices)
}

/// Codeword lookup: `[h, w]` indices → `[h, w, D]` features.
pub fn dequantize<T: Real>(idx: &IndexMap, cb: &Codebook<T>) -> Result<Tensor<T>> {
    if idx.k != cb.k() {
        return Err(Error::shape("dequantize", format!("index map built for K={}, codebook has K={}", idx.k, cb.k())));
    }
    let mut out = Vec::with_capacity(idx.len() * cb.d());
    for &i in &idx.indices {
        if i as usize >= cb.k() {
            return Err(Error::IndexOutOfRange { index: i, k: cb.k() });
        }
        out.extend_from_slice(cb.row(i as usize));
    }
    Tensor::new(vec![idx.height, idx.width, cb.d()], out)
}

/// Differentiable lookup of `idx` rows from a bound codebook var.
pub fn lookup<T: Real>(tape: &mut Tape<T>, codebook: Var, idx: &IndexMap) -> Result<Var> {
    let d = tape.value(codebook).shape()[1];
    let rows: Vec<usize> = idx.indices.iter().map(|&i| i as usize).collect();
    tape.gather_rows(codebook, &rows, vec![idx.height, idx.width, d])
}

/// Forward value of `quantized`, gradient copied straight to `encoded`.
pub fn straight_through<T: Real>(tape: &mut Tape<T>, encoded: Var, quantized: Var) -> Result<Var> {
    tape.straight_through(encoded, quantized)
}

/// `(codebook_term, commitment_term)`: mean over positions of
/// `‖sg[z_e] − z_q‖²` and `β·‖z_e − sg[z_q]‖²` respectively.
pub fn vq_losses<T: Real>(tape: &mut Tape<T>, encoded: Var, quantized: Var, beta: f64) -> Result<(Var, Var)> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let shape = tape.value(encoded).shape().to_vec();
    if shape != tape.value(quantized).shape() {
        return Err(Error::shape("vq_losses", format!("{shape:?} vs {:?}", tape.value(quantized).shape())));
    }
    let positions = shape[..shape.len().saturating_sub(1)].iter().product::<usize>().max(1) as f64;

    let e_sg = tape.stop_gradient(encoded);
    let diff = tape.sub(e_sg, quantized)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    let codebook_term = tape.scale(total, 1.0 / positions);

    let q_sg = tape.stop_gradient(quantized);
    let diff = tape.sub(encoded, q_sg)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    let commitment_term = tape.scale(total, beta / positions);
    Ok((codebook_term, commitment_term))
}

/// Occurrence count of every codeword index.
pub fn codebook_usage(idx: &IndexMap) -> Vec<u64> {
    let mut hist = vec![0u64; idx.k];
    for &i in &idx.indices {
        hist[i as usize] += 1;
    }
    hist
}

/// Shannon entropy of a histogram, in bits per symbol.
pub fn entropy_bits(hist: &[u64]) -> f64 {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.log2()
        })
        .sum()
}

/// Moves every unused codeword onto a randomly chosen encoder output.
/// Returns how many codewords were reseeded.
pub fn reseed_dead<T: Real>(cb: &mut Codebook<T>, usage: &[u64], encoder_outputs: &[T], rng: &mut impl Rng) -> usize {
    let d = cb.d();
    let candidates = encoder_outputs.len() / d;
    if candidates == 0 {
        return 0;
    }
    let mut n = 0;
    for (k, &count) in usage.iter().enumerate() {
        if count == 0 {
            let pick = rng.gen_range(0..candidates);
            cb.set_row(k, &encoder_outputs[pick * d..(pick + 1) * d]);
            n += 1;
        }
    }
    n
}

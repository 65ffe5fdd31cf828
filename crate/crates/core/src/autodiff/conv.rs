//! im2col / col2im lowering of 2-D convolutions onto matrix products.
//!
//! Column matrices are `(out_h·out_w) × (kh·kw·cin)` with the patch axis
//! ordered `(ky, kx, ci)`, which matches a `[kh, kw, cin, cout]` kernel
//! flattened row-major into a `(kh·kw·cin) × cout` matrix.

use crate::autodiff::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        h: usize,
        w: usize,
        cin: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be at least 1".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("input {h}x{w} with padding {pad} smaller than kernel {kh}x{kw}"),
            ));
        }
        Ok(Self {
            h,
            w,
            cin,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.h && ix < self.w).then(|| (iy * self.w + ix) * self.cin)
    }
}

pub(crate) fn im2col<T: Real>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * patch..][..patch];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some(src) = g.source(oy, ox, ky, kx) {
                        let dst = (ky * g.kw + kx) * g.cin;
                        row[dst..dst + g.cin].copy_from_slice(&input[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a column matrix back onto an `h×w×cin` buffer.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, out: &mut [T]) {
    let patch = g.patch();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &cols[(oy * g.out_w + ox) * patch..][..patch];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some(dst) = g.source(oy, ox, ky, kx) {
                        let src = (ky * g.kw + kx) * g.cin;
                        for (o, &v) in out[dst..dst + g.cin].iter_mut().zip(&row[src..src + g.cin]) {
                            *o = *o + v;
                        }
                    }
                }
            }
        }
    }
}

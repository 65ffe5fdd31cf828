//! Define-by-run reverse-mode tape.
//!
//! Every operation appends a node holding its forward value; nodes are
//! therefore already in topological order and `backward` is a single
//! reverse sweep. Intermediate gradients live only for the duration of a
//! sweep, leaf gradients persist and accumulate across sweeps until
//! [`Tape::zero_grads`].

use crate::autodiff::conv::{col2im, im2col, ConvGeom};
use crate::autodiff::{Parameter, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom, cout: usize },
    // `geom` describes the forward convolution this operation is the adjoint of.
    ConvTranspose2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom, cin: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Sigmoid(Var),
    SoftmaxChannels(Var),
    Ln { input: Var, eps: f64 },
    Square(Var),
    Sum(Var),
    Mean(Var),
    StopGradient,
    StraightThrough { encoded: Var },
    GatherRows { table: Var, indices: Vec<usize> },
    NormalizeChannels { input: Var, eps: f64 },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<T>>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    pins: Option<std::vec::IntoIter<Tensor<T>>>,
}

/// Forward values of a tape's stop-gradient nodes and the
/// `quantized − encoded` offsets of its straight-through nodes, in creation
/// order. Replaying a graph on a tape built with [`Tape::pinned`] evaluates
/// the surrogate function whose exact gradient is what `backward` computes.
#[derive(Clone, Debug)]
pub struct Pins<T>(Vec<Tensor<T>>);

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), pins: None }
    }

    /// A tape whose stop-gradient and straight-through nodes take their
    /// values from `pins` instead of their inputs.
    pub fn pinned(pins: Pins<T>) -> Self {
        Self { nodes: Vec::new(), pins: Some(pins.0.into_iter()) }
    }

    pub fn pins(&self) -> Pins<T> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match n.op {
                Op::StopGradient => out.push(n.value.clone()),
                Op::StraightThrough { encoded } => {
                    let e = self.value(encoded).data();
                    let d = n.value.data().iter().zip(e).map(|(&q, &x)| q - x).collect();
                    out.push(Tensor::new(n.value.shape().to_vec(), d).expect("offset has the node's shape"));
                }
                _ => {}
            }
        }
        Pins(out)
    }

    fn next_pin(&mut self, shape: &[usize]) -> Option<Tensor<T>> {
        let pin = self.pins.as_mut()?.next()?;
        assert_eq!(pin.shape(), shape, "pinned replay diverged from the recorded graph");
        Some(pin)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a parameter as a leaf. Frozen parameters never require grad.
    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        self.leaf(p.tensor.clone(), !p.frozen)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward sweep reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- operations ------------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (h, w, cin) = self.value(input).dims3()?;
        let (kh, kw, kcin, cout) = kernel_dims(self.value(kernel))?;
        if kcin != cin {
            return Err(Error::shape("conv2d", format!("input has {cin} channels, kernel expects {kcin}")));
        }
        check_bias(self.value(bias), cout, "conv2d")?;
        let geom = ConvGeom::new(h, w, cin, kh, kw, stride, padding)?;
        let cols = im2col(self.value(input).data(), &geom);
        let mut out = vec![T::zero(); geom.rows() * cout];
        let b = self.value(bias).data();
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(b);
        }
        T::gemm(
            geom.rows(),
            geom.patch(),
            cout,
            &cols,
            (geom.patch() as isize, 1),
            self.value(kernel).data(),
            (cout as isize, 1),
            &mut out,
            true,
        );
        let value = Tensor::new(vec![geom.out_h, geom.out_w, cout], out)?;
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, geom, cout }, needs))
    }

    /// Transposed convolution producing exactly `stride×` spatial upsampling.
    ///
    /// The kernel is `[kh, kw, cout, cin]`, i.e. laid out as the kernel of the
    /// forward convolution this op is the adjoint of; implicit padding is
    /// `(kh − stride)/2`, so `kh − stride` must be even and nonnegative.
    pub fn conv_transpose2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let (h, w, cin) = self.value(input).dims3()?;
        let (kh, kw, cout, kcin) = kernel_dims(self.value(kernel))?;
        if kcin != cin {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be at least 1".into()));
        }
        if kh < stride || kw < stride || (kh - stride) % 2 != 0 || (kw - stride) % 2 != 0 {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("kernel {kh}x{kw} incompatible with exact upsampling by {stride}"),
            ));
        }
        check_bias(self.value(bias), cout, "conv_transpose2d")?;
        let geom = ConvGeom::new(h * stride, w * stride, cout, kh, kw, stride, (kh - stride) / 2)?;
        debug_assert_eq!((geom.out_h, geom.out_w), (h, w));
        let mut cols = vec![T::zero(); geom.rows() * geom.patch()];
        T::gemm(
            geom.rows(),
            cin,
            geom.patch(),
            self.value(input).data(),
            (cin as isize, 1),
            self.value(kernel).data(),
            (1, cin as isize),
            &mut cols,
            false,
        );
        let b = self.value(bias).data();
        let mut out = vec![T::zero(); geom.h * geom.w * cout];
        for px in out.chunks_exact_mut(cout) {
            px.copy_from_slice(b);
        }
        col2im(&cols, &geom, &mut out);
        let value = Tensor::new(vec![geom.h, geom.w, cout], out)?;
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(value, Op::ConvTranspose2d { input, kernel, bias, geom, cin }, needs))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(op, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, node, needs))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, node: Op) -> Var {
        let value = self.value(a).map(f);
        let needs = self.needs(a);
        self.push(value, node, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        self.unary(a, |x| x * f, Op::Scale(a, factor))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x / (T::one() + (-x).exp()), Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// `ln(x + eps)` elementwise.
    pub fn ln(&mut self, a: Var, eps: f64) -> Var {
        let e = T::from_f64(eps);
        self.unary(a, |x| (x + e).ln(), Op::Ln { input: a, eps })
    }

    /// Softmax over the last (channel) axis, max-subtracted.
    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let m = *v.shape().last().ok_or_else(|| Error::shape("softmax_channels", "scalar input"))?;
        if m == 0 {
            return Err(Error::shape("softmax_channels", "zero channels"));
        }
        let mut out = v.data().to_vec();
        for px in out.chunks_exact_mut(m) {
            softmax_in_place(px);
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::SoftmaxChannels(a), needs))
    }

    /// Divides every pixel's channel vector by `sqrt(Σ x² + eps)`.
    pub fn normalize_channels(&mut self, a: Var, eps: f64) -> Result<Var> {
        let v = self.value(a);
        let c = *v.shape().last().ok_or_else(|| Error::shape("normalize_channels", "scalar input"))?;
        let e = T::from_f64(eps);
        let mut out = v.data().to_vec();
        for px in out.chunks_exact_mut(c.max(1)) {
            let n = (px.iter().map(|&x| x * x).sum::<T>() + e).sqrt();
            px.iter_mut().for_each(|x| *x = *x / n);
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::NormalizeChannels { input: a, eps }, needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = T::from_f64(v.len().max(1) as f64);
        let s: T = v.data().iter().copied().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s / n), Op::Mean(a), needs)
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let value = self.next_pin(&shape).unwrap_or_else(|| self.value(a).clone());
        self.push(value, Op::StopGradient, false)
    }

    /// Forward value of `quantized`; the incoming gradient is copied to
    /// `encoded` unchanged and `quantized` receives nothing through this path.
    pub fn straight_through(&mut self, encoded: Var, quantized: Var) -> Result<Var> {
        same_shape("straight_through", self.value(encoded), self.value(quantized))?;
        let shape = self.value(encoded).shape().to_vec();
        let value = match self.next_pin(&shape) {
            Some(mut offset) => {
                let e = self.value(encoded).data();
                offset.data_mut().iter_mut().zip(e).for_each(|(o, &x)| *o = *o + x);
                offset
            }
            None => self.value(quantized).clone(),
        };
        let needs = self.needs(encoded);
        Ok(self.push(value, Op::StraightThrough { encoded }, needs))
    }

    /// Row lookup into a `[rows, width]` table, reshaped to `out_shape`
    /// (whose last extent must equal `width`).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize], out_shape: Vec<usize>) -> Result<Var> {
        let t = self.value(table);
        let (rows, width) = match t.shape() {
            [r, w] => (*r, *w),
            s => return Err(Error::shape("gather_rows", format!("table must be rank 2, got {s:?}"))),
        };
        if out_shape.last() != Some(&width) || out_shape.iter().product::<usize>() != indices.len() * width {
            return Err(Error::shape(
                "gather_rows",
                format!("{} rows of width {width} cannot fill {out_shape:?}", indices.len()),
            ));
        }
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(Error::IndexOutOfRange { index: i as u32, k: rows });
            }
            out.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let value = Tensor::new(out_shape, out)?;
        let needs = self.needs(table);
        Ok(self.push(value, Op::GatherRows { table, indices: indices.to_vec() }, needs))
    }

    // ---- reverse sweep ---------------------------------------------------

    /// Propagates `d loss / d leaf` into every reachable leaf that requires
    /// grad. Calling it again without [`Tape::zero_grads`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { input, kernel, bias, geom, cout } => {
                    let cout = *cout;
                    if self.needs(*kernel) {
                        let cols = im2col(self.value(*input).data(), geom);
                        let gk = slot(&mut grads, *kernel, geom.patch() * cout);
                        T::gemm(geom.patch(), geom.rows(), cout, &cols, (1, geom.patch() as isize), &g, (cout as isize, 1), gk, true);
                    }
                    if self.needs(*bias) {
                        let gb = slot(&mut grads, *bias, cout);
                        for row in g.chunks_exact(cout) {
                            for (b, &v) in gb.iter_mut().zip(row) {
                                *b = *b + v;
                            }
                        }
                    }
                    if self.needs(*input) {
                        let mut gcols = vec![T::zero(); geom.rows() * geom.patch()];
                        T::gemm(
                            geom.rows(),
                            cout,
                            geom.patch(),
                            &g,
                            (cout as isize, 1),
                            self.value(*kernel).data(),
                            (1, cout as isize),
                            &mut gcols,
                            false,
                        );
                        let gx = slot(&mut grads, *input, geom.h * geom.w * geom.cin);
                        col2im(&gcols, geom, gx);
                    }
                }
                Op::ConvTranspose2d { input, kernel, bias, geom, cin } => {
                    let cin = *cin;
                    let cout = geom.cin;
                    let gcols = im2col(&g, geom);
                    if self.needs(*input) {
                        let gy = slot(&mut grads, *input, geom.rows() * cin);
                        T::gemm(
                            geom.rows(),
                            geom.patch(),
                            cin,
                            &gcols,
                            (geom.patch() as isize, 1),
                            self.value(*kernel).data(),
                            (cin as isize, 1),
                            gy,
                            true,
                        );
                    }
                    if self.needs(*kernel) {
                        let y = self.value(*input).data();
                        let gk = slot(&mut grads, *kernel, geom.patch() * cin);
                        T::gemm(geom.patch(), geom.rows(), cin, &gcols, (1, geom.patch() as isize), y, (cin as isize, 1), gk, true);
                    }
                    if self.needs(*bias) {
                        let gb = slot(&mut grads, *bias, cout);
                        for px in g.chunks_exact(cout) {
                            for (b, &v) in gb.iter_mut().zip(px) {
                                *b = *b + v;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.needs(v) {
                            axpy(slot(&mut grads, v, g.len()), &g, T::one());
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        axpy(slot(&mut grads, *a, g.len()), &g, T::one());
                    }
                    if self.needs(*b) {
                        axpy(slot(&mut grads, *b, g.len()), &g, -T::one());
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    if self.needs(*a) {
                        let ga = slot(&mut grads, *a, g.len());
                        for ((o, &gi), &y) in ga.iter_mut().zip(&g).zip(vb) {
                            *o = *o + gi * y;
                        }
                    }
                    if self.needs(*b) {
                        let gb = slot(&mut grads, *b, g.len());
                        for ((o, &gi), &x) in gb.iter_mut().zip(&g).zip(va) {
                            *o = *o + gi * x;
                        }
                    }
                }
                Op::Scale(a, f) => {
                    axpy(slot(&mut grads, *a, g.len()), &g, T::from_f64(*f));
                }
                Op::Silu(a) => {
                    let x = self.value(*a).data();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, &gi), &xi) in ga.iter_mut().zip(&g).zip(x) {
                        let s = sigmoid(xi);
                        *o = *o + gi * s * (T::one() + xi * (T::one() - s));
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, &gi), &yi) in ga.iter_mut().zip(&g).zip(y) {
                        *o = *o + gi * yi * (T::one() - yi);
                    }
                }
                Op::SoftmaxChannels(a) => {
                    let m = *node.value.shape().last().unwrap();
                    let y = node.value.data();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, gi), yi) in ga.chunks_exact_mut(m).zip(g.chunks_exact(m)).zip(y.chunks_exact(m)) {
                        let dot: T = gi.iter().zip(yi).map(|(&p, &q)| p * q).sum();
                        for ((oc, &gc), &yc) in o.iter_mut().zip(gi).zip(yi) {
                            *oc = *oc + yc * (gc - dot);
                        }
                    }
                }
                Op::NormalizeChannels { input, eps } => {
                    let c = *node.value.shape().last().unwrap();
                    let e = T::from_f64(*eps);
                    let x = self.value(*input).data();
                    let y = node.value.data();
                    let ga = slot(&mut grads, *input, g.len());
                    for (((o, gi), yi), xi) in ga
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(y.chunks_exact(c))
                        .zip(x.chunks_exact(c))
                    {
                        let n = (xi.iter().map(|&v| v * v).sum::<T>() + e).sqrt();
                        let dot: T = gi.iter().zip(yi).map(|(&p, &q)| p * q).sum();
                        for ((oc, &gc), &yc) in o.iter_mut().zip(gi).zip(yi) {
                            *oc = *oc + (gc - yc * dot) / n;
                        }
                    }
                }
                Op::Ln { input, eps } => {
                    let e = T::from_f64(*eps);
                    let x = self.value(*input).data();
                    let ga = slot(&mut grads, *input, g.len());
                    for ((o, &gi), &xi) in ga.iter_mut().zip(&g).zip(x) {
                        *o = *o + gi / (xi + e);
                    }
                }
                Op::Square(a) => {
                    let x = self.value(*a).data();
                    let two = T::from_f64(2.0);
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, &gi), &xi) in ga.iter_mut().zip(&g).zip(x) {
                        *o = *o + two * gi * xi;
                    }
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    let ga = slot(&mut grads, *a, n);
                    ga.iter_mut().for_each(|o| *o = *o + g[0]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    let share = g[0] / T::from_f64(n.max(1) as f64);
                    let ga = slot(&mut grads, *a, n);
                    ga.iter_mut().for_each(|o| *o = *o + share);
                }
                Op::StopGradient => {}
                Op::StraightThrough { encoded } => {
                    axpy(slot(&mut grads, *encoded, g.len()), &g, T::one());
                }
                Op::GatherRows { table, indices } => {
                    let width = *node.value.shape().last().unwrap();
                    let len = self.value(*table).len();
                    let gt = slot(&mut grads, *table, len);
                    for (&row, gi) in indices.iter().zip(g.chunks_exact(width)) {
                        axpy(&mut gt[row * width..(row + 1) * width], gi, T::one());
                    }
                }
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(acc) => axpy(acc, &g, T::one()),
                    None => self.nodes[i].grad = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn axpy<T: Real>(acc: &mut [T], g: &[T], alpha: T) {
    for (o, &v) in acc.iter_mut().zip(g) {
        *o = *o + alpha * v;
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Real>(px: &mut [T]) {
    let max = px.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in px.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    px.iter_mut().for_each(|v| *v = *v / total);
}

fn kernel_dims<T: Real>(k: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match k.shape() {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        s => Err(Error::shape("conv", format!("kernel must be rank 4, got {s:?}"))),
    }
}

fn check_bias<T: Real>(b: &Tensor<T>, cout: usize, op: &'static str) -> Result<()> {
    if b.shape() != [cout] {
        return Err(Error::shape(op, format!("bias shape {:?}, expected [{cout}]", b.shape())));
    }
    Ok(())
}

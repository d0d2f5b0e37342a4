//! Minimal reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles; calling
//! [`Tape::backward`] on a scalar result walks the record in reverse and
//! accumulates gradients. Operations are coarse (whole convolutions, whole
//! filters) so the per-node bookkeeping is negligible next to the arithmetic.

use std::cell::RefCell;
use std::ops::Range;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvShape, Geometry};
use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Operation record. Create one per forward evaluation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    kinks: RefCell<Vec<&'static str>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of the given shape if nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            kinks: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; every [`Var`] is treated as constant.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>, rg: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward: if rg { backward } else { None },
            requires_grad: rg,
        });
        Var { tape: self, id }
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), None, self.grad_enabled)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), None, false)
    }

    /// Records a custom operation. `backward` maps the output gradient to one
    /// gradient per parent, in order.
    pub fn op<'t>(
        &'t self,
        value: Tensor,
        parents: &[Var<'t>],
        backward: impl Fn(&Tensor) -> Vec<Tensor> + 'static,
    ) -> Var<'t> {
        let rg = self.grad_enabled && parents.iter().any(|p| p.requires_grad());
        let ids = parents.iter().map(|p| p.id).collect();
        self.push(value, ids, Some(Box::new(backward)), rg)
    }

    /// Flags that a non-differentiable point was evaluated.
    pub fn note_kink(&self, op: &'static str) {
        if self.grad_enabled {
            let mut k = self.kinks.borrow_mut();
            if !k.contains(&op) {
                k.push(op);
            }
        }
    }

    pub fn kinks(&self) -> Vec<&'static str> {
        self.kinks.borrow().clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Backpropagates from a scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.len(), 1, "backward() needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root.id].requires_grad {
            return Gradients { grads };
        }
        grads[root.id] = Some(Tensor::new(nodes[root.id].value.shape(), vec![1.0]));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[pid].requires_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradient of a scalar loss with respect to a flat parameter vector.
///
/// `loss` receives the parameters as a rank-1 leaf and returns the scalar
/// loss. Returns the loss value together with its gradient. Evaluating any
/// operation exactly at a kink is reported rather than silently
/// differentiated.
pub fn gradient<F>(params: &[f64], loss: F) -> Result<(f64, Vec<f64>)>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let p = tape.leaf(Tensor::new(&[params.len()], params.to_vec()));
    let out = loss(&tape, p)?;
    let value = out.item();
    if !value.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    if let Some(op) = tape.kinks().first() {
        return Err(Error::NonDifferentiable(op));
    }
    let grads = tape.backward(out);
    let g = grads.get_or_zeros(p).into_data();
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    Ok((value, g))
}

/// Central finite-difference gradient of `f` at `x` for the given coordinates.
pub fn finite_difference(
    x: &[f64],
    coords: &[usize],
    step: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            probe[i] = x[i] + step;
            let hi = f(&probe);
            probe[i] = x[i] - step;
            let lo = f(&probe);
            probe[i] = x[i];
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

fn elementwise_scale(g: &Tensor, factor: &Tensor) -> Tensor {
    g.zip_map(factor, |a, b| a * b)
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Negative-side slope of [`Var::smooth_leaky_relu`].
pub const LEAKY_SLOPE: f64 = 0.2;

/// `0.2 x + 0.8 (softplus(x) - ln 2)`: smooth, zero at the origin, slope 0.2
/// for large negative inputs and 1 for large positive inputs.
#[inline]
pub fn smooth_leaky(x: f64) -> f64 {
    LEAKY_SLOPE * x + (1.0 - LEAKY_SLOPE) * (softplus(x) - std::f64::consts::LN_2)
}

#[inline]
fn smooth_leaky_grad(x: f64) -> f64 {
    LEAKY_SLOPE + (1.0 - LEAKY_SLOPE) * sigmoid(x)
}

// Graph ops take `self` by value like the std operator traits, but return a
// node on the same tape, so they stay inherent methods.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, value: Tensor, backward: impl Fn(&Tensor) -> Tensor + 'static) -> Var<'t> {
        self.tape.op(value, &[self], move |g| vec![backward(g)])
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.tape.op(v, &[self, other], |g| vec![g.clone(), g.clone()])
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.tape
            .op(v, &[self, other], |g| vec![g.clone(), g.map(|x| -x)])
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let v = a.zip_map(&b, |x, y| x * y);
        self.tape.op(v, &[self, other], move |g| {
            vec![elementwise_scale(g, &b), elementwise_scale(g, &a)]
        })
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let v = a.zip_map(&b, |x, y| x / y);
        let out = Rc::new(v.clone());
        self.tape.op(v, &[self, other], move |g| {
            let ga = g.zip_map(&b, |gi, bi| gi / bi);
            let gb = Tensor::new(
                g.shape(),
                g.data()
                    .iter()
                    .zip(out.data())
                    .zip(b.data())
                    .map(|((gi, oi), bi)| -gi * oi / bi)
                    .collect(),
            );
            vec![ga, gb]
        })
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(self, c: &Tensor) -> Var<'t> {
        let v = self.value().zip_map(c, |a, b| a + b);
        self.unary(v, |g| g.clone())
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.unary(v, move |g| g.map(|x| x * c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(v, |g| g.clone())
    }

    pub fn square(self) -> Var<'t> {
        let a = self.value();
        let v = a.map(|x| x * x);
        self.unary(v, move |g| g.zip_map(&a, |gi, x| 2.0 * x * gi))
    }

    /// Element-wise `x^p` for positive inputs.
    pub fn powf(self, p: f64) -> Var<'t> {
        let a = self.value();
        let v = a.map(|x| x.powf(p));
        self.unary(v, move |g| g.zip_map(&a, |gi, x| gi * p * x.powf(p - 1.0)))
    }

    pub fn ln(self) -> Var<'t> {
        let a = self.value();
        let v = a.map(f64::ln);
        self.unary(v, move |g| g.zip_map(&a, |gi, x| gi / x))
    }

    pub fn relu(self) -> Var<'t> {
        let a = self.value();
        if a.data().contains(&0.0) {
            self.tape.note_kink("relu");
        }
        let v = a.map(|x| x.max(0.0));
        self.unary(v, move |g| {
            g.zip_map(&a, |gi, x| if x > 0.0 { gi } else { 0.0 })
        })
    }

    pub fn smooth_leaky_relu(self) -> Var<'t> {
        let a = self.value();
        let v = a.map(smooth_leaky);
        self.unary(v, move |g| g.zip_map(&a, |gi, x| gi * smooth_leaky_grad(x)))
    }

    pub fn sum(self) -> Var<'t> {
        let a = self.value();
        let shape = a.shape().to_vec();
        self.unary(Tensor::scalar(a.sum()), move |g| Tensor::full(&shape, g.item()))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Multiplies every element by a scalar variable.
    pub fn mul_scalar(self, s: Var<'t>) -> Var<'t> {
        let (a, sv) = (self.value(), s.value().item());
        let v = a.map(|x| x * sv);
        self.tape.op(v, &[self, s], move |g| {
            let gs: f64 = g.data().iter().zip(a.data()).map(|(gi, x)| gi * x).sum();
            vec![g.map(|gi| gi * sv), Tensor::scalar(gs)]
        })
    }

    /// Divides every element by a scalar variable.
    pub fn div_scalar(self, s: Var<'t>) -> Var<'t> {
        let (a, sv) = (self.value(), s.value().item());
        let v = a.map(|x| x / sv);
        self.tape.op(v, &[self, s], move |g| {
            let gs: f64 = g.data().iter().zip(a.data()).map(|(gi, x)| gi * x).sum();
            vec![g.map(|gi| gi / sv), Tensor::scalar(-gs / (sv * sv))]
        })
    }

    /// Contiguous slice of the flattened value, reshaped to `shape`.
    pub fn slice(self, range: Range<usize>, shape: &[usize]) -> Var<'t> {
        let a = self.value();
        let total = a.len();
        let full_shape = a.shape().to_vec();
        let v = Tensor::new(shape, a.data()[range.clone()].to_vec());
        self.unary(v, move |g| {
            let mut out = vec![0.0; total];
            out[range.clone()].copy_from_slice(g.data());
            Tensor::new(&full_shape, out)
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let a = self.value();
        let orig = a.shape().to_vec();
        let v = (*a).clone().reshaped(shape);
        self.unary(v, move |g| g.clone().reshaped(&orig))
    }

    /// Element `i` of the flattened value as a scalar.
    pub fn index(self, i: usize) -> Var<'t> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let v = Tensor::scalar(a.data()[i]);
        self.unary(v, move |g| {
            let mut out = Tensor::zeros(&shape);
            out.data_mut()[i] = g.item();
            out
        })
    }

    /// Forward value is `round_half_away(x)`; the backward pass is the identity.
    pub fn straight_through_round(self) -> Var<'t> {
        let v = self.value().map(f64::round);
        self.unary(v, |g| g.clone())
    }

    /// Strided 2-D convolution. `w` is `[C_out, C_in, k, k]`, `b` is `[C_out]`.
    pub fn conv2d(self, w: Var<'t>, b: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
        let x = self.value();
        let wt = w.value();
        let (n, cin, h, wd) = x.dims4();
        let (cout, cin_w, k, k2) = wt.dims4();
        assert_eq!(cin, cin_w, "conv2d channel mismatch");
        assert_eq!(k, k2);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let shape = ConvShape {
            batch: n,
            c_small: cout,
            c_big: cin,
            geo: Geometry {
                small_h: oh,
                small_w: ow,
                big_h: h,
                big_w: wd,
                k,
                stride,
                pad,
            },
        };
        let bias = b.value();
        let mut out = vec![0.0; n * cout * oh * ow];
        for (i, plane) in out.chunks_mut(oh * ow).enumerate() {
            plane.fill(bias.data()[i % cout]);
        }
        kernels::batched_gather(&mut out, x.data(), wt.data(), shape);
        let v = Tensor::new(&[n, cout, oh, ow], out);
        self.tape.op(v, &[self, w, b], move |g| {
            let mut gx = vec![0.0; x.len()];
            kernels::batched_scatter(&mut gx, g.data(), wt.data(), shape);
            let gw = kernels::batched_weight_grad(x.data(), g.data(), shape);
            let gb = plane_sums(g, cout);
            vec![
                Tensor::new(x.shape(), gx),
                Tensor::new(wt.shape(), gw),
                Tensor::new(&[cout], gb),
            ]
        })
    }

    /// Transposed convolution producing an `out_h x out_w` output.
    /// `w` is `[C_in, C_out, k, k]`, `b` is `[C_out]`.
    pub fn conv_transpose2d(
        self,
        w: Var<'t>,
        b: Var<'t>,
        stride: usize,
        pad: usize,
        out_h: usize,
        out_w: usize,
    ) -> Var<'t> {
        let x = self.value();
        let wt = w.value();
        let (n, cin, h, wd) = x.dims4();
        let (cin_w, cout, k, _) = wt.dims4();
        assert_eq!(cin, cin_w, "conv_transpose2d channel mismatch");
        let shape = ConvShape {
            batch: n,
            c_small: cin,
            c_big: cout,
            geo: Geometry {
                small_h: h,
                small_w: wd,
                big_h: out_h,
                big_w: out_w,
                k,
                stride,
                pad,
            },
        };
        let bias = b.value();
        let mut out = vec![0.0; n * cout * out_h * out_w];
        for (i, plane) in out.chunks_mut(out_h * out_w).enumerate() {
            plane.fill(bias.data()[i % cout]);
        }
        kernels::batched_scatter(&mut out, x.data(), wt.data(), shape);
        let v = Tensor::new(&[n, cout, out_h, out_w], out);
        self.tape.op(v, &[self, w, b], move |g| {
            let mut gx = vec![0.0; x.len()];
            kernels::batched_gather(&mut gx, g.data(), wt.data(), shape);
            let gw = kernels::batched_weight_grad(g.data(), x.data(), shape);
            let gb = plane_sums(g, cout);
            vec![
                Tensor::new(x.shape(), gx),
                Tensor::new(wt.shape(), gw),
                Tensor::new(&[cout], gb),
            ]
        })
    }

    /// Separable "valid" filtering of every plane with the 1-D kernel `k`.
    pub fn separable_filter_valid(self, k: Rc<[f64]>) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let l = k.len();
        assert!(h >= l && w >= l, "plane {h}x{w} smaller than filter {l}");
        let (oh, ow) = (h - l + 1, w - l + 1);
        let mut out = vec![0.0; n * c * oh * ow];
        for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
            filter_plane(src, dst, h, w, &k);
        }
        let v = Tensor::new(&[n, c, oh, ow], out);
        let shape = x.shape().to_vec();
        self.unary(v, move |g| {
            let mut gx = vec![0.0; n * c * h * w];
            for (gsrc, gdst) in g.data().chunks(oh * ow).zip(gx.chunks_mut(h * w)) {
                filter_plane_adjoint(gsrc, gdst, h, w, &k);
            }
            Tensor::new(&shape, gx)
        })
    }

    /// 2x2 average pooling; an odd trailing row or column is dropped.
    pub fn avg_pool2(self) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let v = Tensor::new(&[n, c, oh, ow], out);
        let shape = x.shape().to_vec();
        self.unary(v, move |g| {
            let mut gx = vec![0.0; n * c * h * w];
            for (gsrc, gdst) in g.data().chunks(oh * ow).zip(gx.chunks_mut(h * w)) {
                for y in 0..oh {
                    for xx in 0..ow {
                        let q = 0.25 * gsrc[y * ow + xx];
                        let i = 2 * y * w + 2 * xx;
                        gdst[i] += q;
                        gdst[i + 1] += q;
                        gdst[i + w] += q;
                        gdst[i + w + 1] += q;
                    }
                }
            }
            Tensor::new(&shape, gx)
        })
    }

    /// Spatial mean of each plane: `[N, C, H, W] -> [N, C]`.
    pub fn mean_hw(self) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = (h * w) as f64;
        let v: Vec<f64> = x.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
        let shape = x.shape().to_vec();
        self.unary(Tensor::new(&[n, c], v), move |g| {
            let mut gx = Vec::with_capacity(n * c * h * w);
            for &gi in g.data() {
                gx.extend(std::iter::repeat_n(gi / hw, h * w));
            }
            Tensor::new(&shape, gx)
        })
    }

    /// Population variance of each channel pooled over batch and space:
    /// `[N, C, H, W] -> [C]`.
    pub fn channel_variance(self) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let count = (n * hw) as f64;
        let means: Vec<f64> = (0..c)
            .map(|ch| {
                (0..n)
                    .map(|b| x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>())
                    .sum::<f64>()
                    / count
            })
            .collect();
        let vars: Vec<f64> = (0..c)
            .map(|ch| {
                (0..n)
                    .map(|b| {
                        x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v - means[ch]).powi(2))
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    / count
            })
            .collect();
        let shape = x.shape().to_vec();
        self.unary(Tensor::new(&[c], vars), move |g| {
            let mut gx = vec![0.0; x.len()];
            for (i, (gv, xv)) in gx.iter_mut().zip(x.data()).enumerate() {
                let ch = (i / hw) % c;
                *gv = 2.0 * (xv - means[ch]) / count * g.data()[ch];
            }
            Tensor::new(&shape, gx)
        })
    }

    /// Population variance of all elements.
    pub fn variance(self) -> Var<'t> {
        let x = self.value();
        let count = x.len() as f64;
        let mean = x.sum() / count;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
        self.unary(Tensor::scalar(var), move |g| {
            let gi = g.item();
            x.map(|v| 2.0 * (v - mean) / count * gi)
        })
    }
}

fn plane_sums(g: &Tensor, channels: usize) -> Vec<f64> {
    let (_, _, h, w) = g.dims4();
    let mut out = vec![0.0; channels];
    for (i, plane) in g.data().chunks(h * w).enumerate() {
        out[i % channels] += plane.iter().sum::<f64>();
    }
    out
}

fn filter_plane(src: &[f64], dst: &mut [f64], h: usize, w: usize, k: &[f64]) {
    let l = k.len();
    let ow = w - l + 1;
    let oh = h - l + 1;
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let out = &mut tmp[y * ow..(y + 1) * ow];
        for (x, o) in out.iter_mut().enumerate() {
            *o = k.iter().zip(&row[x..x + l]).map(|(a, b)| a * b).sum();
        }
    }
    for y in 0..oh {
        let out = &mut dst[y * ow..(y + 1) * ow];
        out.fill(0.0);
        for (i, &kv) in k.iter().enumerate() {
            let row = &tmp[(y + i) * ow..(y + i + 1) * ow];
            for (o, r) in out.iter_mut().zip(row) {
                *o += kv * r;
            }
        }
    }
}

fn filter_plane_adjoint(g: &[f64], dst: &mut [f64], h: usize, w: usize, k: &[f64]) {
    let l = k.len();
    let ow = w - l + 1;
    let oh = h - l + 1;
    let mut tmp = vec![0.0; h * ow];
    for y in 0..oh {
        let grow = &g[y * ow..(y + 1) * ow];
        for (i, &kv) in k.iter().enumerate() {
            let t = &mut tmp[(y + i) * ow..(y + i + 1) * ow];
            for (ti, gi) in t.iter_mut().zip(grow) {
                *ti += kv * gi;
            }
        }
    }
    for y in 0..h {
        let t = &tmp[y * ow..(y + 1) * ow];
        let out = &mut dst[y * w..(y + 1) * w];
        for (x, &tv) in t.iter().enumerate() {
            for (i, &kv) in k.iter().enumerate() {
                out[x + i] += kv * tv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn pseudo(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + seed) * 12.9898).sin() * 0.8).collect()
    }

    fn check<F>(params: &[f64], f: F)
    where
        F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
    {
        let (_, g) = gradient(params, &f).unwrap();
        let coords: Vec<usize> = (0..params.len()).collect();
        let fd = finite_difference(params, &coords, 1e-5, |p| {
            let tape = Tape::inference();
            let v = tape.constant(Tensor::new(&[p.len()], p.to_vec()));
            f(&tape, v).unwrap().item()
        });
        for (i, (a, b)) in g.iter().zip(&fd).enumerate() {
            assert!(rel_err(*a, *b) < 1e-5, "coord {i}: analytic {a} vs fd {b}");
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let (v, g) = gradient(&[1.0, 2.0], |t, _| Ok(t.constant(Tensor::scalar(3.0)))).unwrap();
        assert_eq!(v, 3.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let theta = [0.5, -1.25, 3.0];
        let (v, g) = gradient(&theta, |_, p| Ok(p.square().sum().scale(0.5))).unwrap();
        assert!((v - 0.5 * (0.25 + 1.5625 + 9.0)).abs() < 1e-12);
        assert_eq!(g, theta.to_vec());
    }

    #[test]
    fn relu_at_zero_is_reported() {
        let err = gradient(&[0.0, 1.0], |_, p| Ok(p.relu().sum())).unwrap_err();
        assert!(matches!(err, Error::NonDifferentiable("relu")));
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        // x: [2, 2, 6, 6], w: [3, 2, 3, 3], b: [3]
        let nx = 2 * 2 * 6 * 6;
        let nw = 3 * 2 * 9;
        let mut params = pseudo(nx, 0.3);
        params.extend(pseudo(nw, 1.7));
        params.extend([0.1, -0.2, 0.3]);
        check(&params, move |_, p| {
            let x = p.slice(0..nx, &[2, 2, 6, 6]);
            let w = p.slice(nx..nx + nw, &[3, 2, 3, 3]);
            let b = p.slice(nx + nw..nx + nw + 3, &[3]);
            Ok(x.conv2d(w, b, 2, 1).smooth_leaky_relu().square().sum())
        });
    }

    #[test]
    fn conv_transpose_gradients_match_finite_differences() {
        let nx = 2 * 3 * 3 * 3;
        let nw = 3 * 2 * 9;
        let mut params = pseudo(nx, 0.9);
        params.extend(pseudo(nw, 2.1));
        params.extend([0.05, -0.1]);
        check(&params, move |_, p| {
            let x = p.slice(0..nx, &[2, 3, 3, 3]);
            let w = p.slice(nx..nx + nw, &[3, 2, 3, 3]);
            let b = p.slice(nx + nw..nx + nw + 2, &[2]);
            Ok(x.conv_transpose2d(w, b, 2, 1, 6, 6).square().sum())
        });
    }

    #[test]
    fn filter_pool_and_statistics_gradients() {
        let k: Rc<[f64]> = Rc::from(vec![0.25, 0.5, 0.25]);
        let params = pseudo(2 * 2 * 8 * 8, 4.4);
        check(&params, move |_, p| {
            let x = p.reshape(&[2, 2, 8, 8]);
            let f = x.separable_filter_valid(k.clone()).avg_pool2();
            let stats = f.channel_variance().sum();
            let m = x.mean_hw().add_scalar(2.0).powf(1.3).sum();
            let r = x.square().add_scalar(0.5).ln().mean();
            let s = x.variance().div_scalar(x.index(3).add_scalar(3.0));
            Ok(stats.add(m).add(r).add(s).add(x.index(5).mul_scalar(x.index(7)).sum()))
        });
    }

    #[test]
    fn division_gradient() {
        let params = [0.7, -0.4, 1.3, 2.2];
        check(&params, |_, p| {
            let a = p.slice(0..2, &[2]);
            let b = p.slice(2..4, &[2]);
            Ok(a.div(b).mul(a).sub(b.neg()).sum())
        });
    }
}

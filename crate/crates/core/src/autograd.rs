//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its variables. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns the
//! gradient of every leaf created with [`Tape::param`]. Leaves created with
//! [`Tape::constant`] never receive gradients, and neither does any node whose
//! inputs are all constants, so frozen sub-networks cost no backward work.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    ClampedLog(Var, f64),
    ClampMax(Var, f64),
    Sum(Var),
    SumAxes(Var, Vec<usize>),
    Reshape(Var),
    /// `out[o] = x[map[o]]`; covers slicing, padding, pooling, resizing and permutes.
    Index(Var, Vec<usize>),
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        a_inner: usize,
        b_inner: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        n: usize,
        o: usize,
    },
    ChannelBias {
        x: Var,
        b: Var,
        channels: usize,
        inner: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
        n: usize,
        fan_in: usize,
        fan_out: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        dims: (usize, usize, usize),
        batch_stats: bool,
    },
    Softmax(Var),
    Gather(Var, Vec<usize>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics observed by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as accumulated into running statistics.
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn map_values(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        .expect("shape preserved")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf.
    pub fn param(&self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push(&self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        self.push_raw(value, op, rg)
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = map_values(&self.value(a), f);
        self.push(value, op, &[a])
    }

    fn binary(&self, name: &str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(name, &va, &vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), |x| x.max(0.0).sqrt())
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    /// `ln(max(x, eps))`; no gradient flows through the clamped region.
    pub fn clamped_log(&self, a: Var, eps: f64) -> Var {
        self.unary(a, Op::ClampedLog(a, eps), |x| x.max(eps).ln())
    }

    /// `min(x, c)`; no gradient flows through the clamped region.
    pub fn clamp_max(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::ClampMax(a, c), |x| x.min(c))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums over the listed axes, dropping them from the shape.
    pub fn sum_axes(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape();
        if axes.iter().any(|&ax| ax >= shape.len()) {
            return Err(Error::shape(format!("sum over {axes:?} of {shape:?}")));
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let map = reduction_map(shape, axes);
        let mut out = vec![0.0; out_shape.iter().product()];
        for (v, &o) in va.data().iter().zip(&map) {
            out[o] += v;
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::SumAxes(a, map), &[a]))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = (*self.value(a)).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    fn index(&self, a: Var, shape: Vec<usize>, map: Vec<usize>) -> Result<Var> {
        let va = self.value(a);
        let data = map.iter().map(|&i| va.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Index(a, map), &[a]))
    }

    /// Elements `[start, start + len)` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a);
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "slice {start}..{} on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut map = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for i in start..start + len {
                let base = (o * shape[axis] + i) * inner;
                map.extend(base..base + inner);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.index(a, out_shape, map)
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("permute {perm:?} of {shape:?}")));
        }
        let strides = strides_of(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let total: usize = shape.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; out_shape.len()];
        for _ in 0..total {
            map.push(idx.iter().zip(perm).map(|(&i, &p)| i * strides[p]).sum());
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        self.index(a, out_shape, map)
    }

    /// Reflection padding of the two trailing axes.
    pub fn reflect_pad(&self, a: Var, ph: usize, pw: usize) -> Result<Var> {
        let shape = self.shape(a);
        let nd = shape.len();
        if nd < 2 || (ph > 0 && ph >= shape[nd - 2]) || (pw > 0 && pw >= shape[nd - 1]) {
            return Err(Error::shape(format!("reflect pad ({ph}, {pw}) of {shape:?}")));
        }
        let (h, w) = (shape[nd - 2], shape[nd - 1]);
        let outer: usize = shape[..nd - 2].iter().product();
        let map = kernels::reflect_pad_index(outer, h, w, ph, pw);
        let mut out_shape = shape.clone();
        out_shape[nd - 2] = h + 2 * ph;
        out_shape[nd - 1] = w + 2 * pw;
        self.index(a, out_shape, map)
    }

    /// Nearest-neighbour resize of the two trailing axes (up or down).
    pub fn resize_nearest(&self, a: Var, oh: usize, ow: usize) -> Result<Var> {
        let shape = self.shape(a);
        let nd = shape.len();
        if nd < 2 || oh == 0 || ow == 0 {
            return Err(Error::shape(format!("resize {shape:?} to ({oh}, {ow})")));
        }
        let (h, w) = (shape[nd - 2], shape[nd - 1]);
        let outer: usize = shape[..nd - 2].iter().product();
        let map = kernels::resize_index(outer, h, w, oh, ow);
        let mut out_shape = shape.clone();
        out_shape[nd - 2] = oh;
        out_shape[nd - 1] = ow;
        self.index(a, out_shape, map)
    }

    /// Max pooling over the two trailing axes, stride equal to the window,
    /// partial windows at the far edge kept.
    pub fn max_pool(&self, a: Var, kh: usize, kw: usize) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let nd = shape.len();
        if nd < 2 || kh == 0 || kw == 0 {
            return Err(Error::shape(format!("max pool ({kh}, {kw}) of {shape:?}")));
        }
        let (h, w) = (shape[nd - 2], shape[nd - 1]);
        let outer: usize = shape[..nd - 2].iter().product();
        let (_, arg) = kernels::max_pool(va.data(), outer, h, w, kh, kw);
        let mut out_shape = shape.clone();
        out_shape[nd - 2] = h.div_ceil(kh);
        out_shape[nd - 1] = w.div_ceil(kw);
        drop(va);
        self.index(a, out_shape, arg)
    }

    /// Rearranges a `[A, B, kh, kw]` kernel into `[B, A, kh, kw]` with both
    /// spatial axes reversed, turning a transposed convolution into a plain one.
    pub fn flip_transpose_kernel(&self, w: Var) -> Result<Var> {
        let shape = self.shape(w);
        if shape.len() != 4 {
            return Err(Error::shape(format!("kernel flip of {shape:?}")));
        }
        let (a, b, kh, kw) = (shape[0], shape[1], shape[2], shape[3]);
        let mut map = Vec::with_capacity(a * b * kh * kw);
        for j in 0..b {
            for i in 0..a {
                for y in 0..kh {
                    for x in 0..kw {
                        map.push(((i * b + j) * kh + (kh - 1 - y)) * kw + (kw - 1 - x));
                    }
                }
            }
        }
        self.index(w, vec![b, a, kh, kw], map)
    }

    pub fn concat(&self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::shape(format!("concat {sa:?} with {sb:?} on axis {axis}")));
        }
        let outer: usize = sa[..axis].iter().product();
        let a_inner: usize = sa[axis..].iter().product();
        let b_inner: usize = sb[axis..].iter().product();
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for o in 0..outer {
            data.extend_from_slice(&va.data()[o * a_inner..(o + 1) * a_inner]);
            data.extend_from_slice(&vb.data()[o * b_inner..(o + 1) * b_inner]);
        }
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        let value = Tensor::new(shape, data)?;
        drop((va, vb));
        Ok(self.push(
            value,
            Op::Concat {
                a,
                b,
                outer,
                a_inner,
                b_inner,
            },
            &[a, b],
        ))
    }

    /// Stride-one 2-D convolution of `[N, C, H, W]` by `[O, C, kh, kw]` with
    /// zero padding `(ph, pw)`.
    pub fn conv2d(&self, x: Var, w: Var, ph: usize, pw: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape(format!("conv2d input {sx:?} kernel {sw:?}")));
        }
        let geom = ConvGeom {
            c: sx[1],
            h: sx[2],
            w: sx[3],
            kh: sw[2],
            kw: sw[3],
            ph,
            pw,
        };
        if sx[2] + 2 * ph < sw[2] || sx[3] + 2 * pw < sw[3] {
            return Err(Error::shape(format!("conv2d kernel {sw:?} larger than padded input {sx:?}")));
        }
        let (n, o) = (sx[0], sw[0]);
        let out = kernels::conv2d_forward(vx.data(), n, vw.data(), o, &geom);
        let value = Tensor::new(vec![n, o, geom.out_h(), geom.out_w()], out)?;
        drop((vx, vw));
        Ok(self.push(value, Op::Conv2d { x, w, geom, n, o }, &[x, w]))
    }

    /// Adds `b[c]` along axis 1 of `x`.
    pub fn channel_bias(&self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let sx = vx.shape();
        if sx.len() < 2 || vb.shape() != [sx[1]] {
            return Err(Error::shape(format!("bias {:?} for {sx:?}", vb.shape())));
        }
        let channels = sx[1];
        let inner: usize = sx[2..].iter().product();
        let mut data = vx.data().to_vec();
        for (k, v) in data.iter_mut().enumerate() {
            *v += vb.data()[(k / inner) % channels];
        }
        let value = Tensor::new(sx.to_vec(), data)?;
        drop((vx, vb));
        Ok(self.push(value, Op::ChannelBias { x, b, channels, inner }, &[x, b]))
    }

    /// `x [N, in] * w[out, in]^T + b[out]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || vb.shape() != [sw[0]] {
            return Err(Error::shape(format!(
                "linear input {sx:?} weight {sw:?} bias {:?}",
                vb.shape()
            )));
        }
        let (n, fan_in, fan_out) = (sx[0], sx[1], sw[0]);
        let mut out = Vec::with_capacity(n * fan_out);
        for _ in 0..n {
            out.extend_from_slice(vb.data());
        }
        kernels::gemm(n, fan_in, fan_out, vx.data(), false, vw.data(), true, &mut out, 1.0);
        let value = Tensor::new(vec![n, fan_out], out)?;
        drop((vx, vw, vb));
        Ok(self.push(
            value,
            Op::Linear {
                x,
                w,
                b,
                n,
                fan_in,
                fan_out,
            },
            &[x, w, b],
        ))
    }

    /// Batch normalization of `[N, C, L]` per channel. With `running = None`
    /// the batch statistics are used and returned; otherwise the supplied
    /// `(mean, var)` are used as fixed constants.
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let sx = vx.shape();
        if sx.len() != 3 || vg.shape() != [sx[1]] || vb.shape() != [sx[1]] {
            return Err(Error::shape(format!("batch norm of {sx:?}")));
        }
        let (n, c, l) = (sx[0], sx[1], sx[2]);
        let m = (n * l) as f64;
        let at = |s: usize, ch: usize, i: usize| (s * c + ch) * l + i;
        let (mean, var_biased, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::shape("running statistics width"));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for smp in 0..n {
                        for i in 0..l {
                            s += vx.data()[at(smp, ch, i)];
                        }
                    }
                    mean[ch] = s / m;
                    let mut q = 0.0;
                    for smp in 0..n {
                        for i in 0..l {
                            let d = vx.data()[at(smp, ch, i)] - mean[ch];
                            q += d * d;
                        }
                    }
                    var[ch] = q / m;
                }
                let unbiased = var
                    .iter()
                    .map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; vx.len()];
        let mut out = vec![0.0; vx.len()];
        for smp in 0..n {
            for ch in 0..c {
                for i in 0..l {
                    let k = at(smp, ch, i);
                    xhat[k] = (vx.data()[k] - mean[ch]) * inv_std[ch];
                    out[k] = vg.data()[ch] * xhat[k] + vb.data()[ch];
                }
            }
        }
        let value = Tensor::new(sx.to_vec(), out)?;
        drop((vx, vg, vb));
        let var = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                dims: (n, c, l),
                batch_stats: stats.is_some(),
            },
            &[x, gamma, beta],
        );
        Ok((var, stats))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let width = *shape
            .last()
            .ok_or_else(|| Error::shape("softmax of a scalar"))?;
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor::new(shape, out)?;
        drop(va);
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    /// Picks `x[i, labels[i]]` from a `[N, Y]` matrix.
    pub fn gather(&self, a: Var, labels: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape(format!(
                "gather {} labels from {shape:?}",
                labels.len()
            )));
        }
        let y = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= y) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: y,
            });
        }
        let map: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * y + l).collect();
        let data = map.iter().map(|&k| va.data()[k]).collect();
        let value = Tensor::new(vec![labels.len()], data)?;
        drop(va);
        Ok(self.push(value, Op::Gather(a, map), &[a]))
    }

    /// Gradients of the scalar `root` with respect to every trainable leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward from non-scalar {:?}",
                nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(nodes[root.0].value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// For every input element, the flat index of the output it sums into.
fn reduction_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let kept: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
    let out_shape: Vec<usize> = kept.iter().map(|&d| shape[d]).collect();
    let out_strides = strides_of(&out_shape);
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..total {
        map.push(kept.iter().zip(&out_strides).map(|(&d, &s)| idx[d] * s).sum());
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(nodes[v.0].value.shape()));
    }
    f(slot.as_mut().expect("initialised").data_mut());
}

fn needs(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let gd = g.data();
    let val = |v: Var| nodes[v.0].value.clone();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |d| d.iter_mut().zip(gd).for_each(|(x, g)| *x += g));
            accumulate(nodes, grads, *b, |d| d.iter_mut().zip(gd).for_each(|(x, g)| *x += g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |d| d.iter_mut().zip(gd).for_each(|(x, g)| *x += g));
            accumulate(nodes, grads, *b, |d| d.iter_mut().zip(gd).for_each(|(x, g)| *x -= g));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |d| {
                for ((x, g), y) in d.iter_mut().zip(gd).zip(vb.data()) {
                    *x += g * y;
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for ((x, g), y) in d.iter_mut().zip(gd).zip(va.data()) {
                    *x += g * y;
                }
            });
        }
        Op::Scale(a, c) => {
            accumulate(nodes, grads, *a, |d| d.iter_mut().zip(gd).for_each(|(x, g)| *x += c * g));
        }
        Op::AddScalar(a) => {
            accumulate(nodes, grads, *a, |d| d.iter_mut().zip(gd).for_each(|(x, g)| *x += g));
        }
        Op::Square(a) => {
            let va = val(*a);
            accumulate(nodes, grads, *a, |d| {
                for ((x, g), v) in d.iter_mut().zip(gd).zip(va.data()) {
                    *x += 2.0 * v * g;
                }
            });
        }
        Op::Sqrt(a) => {
            let y = node.value.clone();
            accumulate(nodes, grads, *a, |d| {
                for ((x, g), y) in d.iter_mut().zip(gd).zip(y.data()) {
                    if *y > 0.0 {
                        *x += g / (2.0 * y);
                    }
                }
            });
        }
        Op::Abs(a) => {
            let va = val(*a);
            accumulate(nodes, grads, *a, |d| {
                for ((x, g), v) in d.iter_mut().zip(gd).zip(va.data()) {
                    if *v > 0.0 {
                        *x += g;
                    } else if *v < 0.0 {
                        *x -= g;
                    }
                }
            });
        }
        Op::Relu(a) => {
            let va = val(*a);
            accumulate(nodes, grads, *a, |d| {
                for ((x, g), v) in d.iter_mut().zip(gd).zip(va.data()) {
                    if *v > 0.0 {
                        *x += g;
                    }
                }
            });
        }
        Op::LeakyRelu(a, slope) => {
            let va = val(*a);
            accumulate(nodes, grads, *a, |d| {
                for ((x, g), v) in d.iter_mut().zip(gd).zip(va.data()) {
                    *x += if *v > 0.0 { *g } else { slope * g };
                }
            });
        }
        Op::Sigmoid(a) => {
            let y = node.value.clone();
            accumulate(nodes, grads, *a, |d| {
                for ((x, g), y) in d.iter_mut().zip(gd).zip(y.data()) {
                    *x += g * y * (1.0 - y);
                }
            });
        }
        Op::ClampedLog(a, eps) => {
            let va = val(*a);
            accumulate(nodes, grads, *a, |d| {
                for ((x, g), v) in d.iter_mut().zip(gd).zip(va.data()) {
                    if *v > *eps {
                        *x += g / v;
                    }
                }
            });
        }
        Op::ClampMax(a, c) => {
            let va = val(*a);
            accumulate(nodes, grads, *a, |d| {
                for ((x, g), v) in d.iter_mut().zip(gd).zip(va.data()) {
                    if *v < *c {
                        *x += g;
                    }
                }
            });
        }
        Op::Sum(a) => {
            let g0 = gd[0];
            accumulate(nodes, grads, *a, |d| d.iter_mut().for_each(|x| *x += g0));
        }
        Op::SumAxes(a, map) => {
            accumulate(nodes, grads, *a, |d| {
                for (x, &o) in d.iter_mut().zip(map) {
                    *x += gd[o];
                }
            });
        }
        Op::Reshape(a) => {
            accumulate(nodes, grads, *a, |d| d.iter_mut().zip(gd).for_each(|(x, g)| *x += g));
        }
        Op::Index(a, map) => {
            accumulate(nodes, grads, *a, |d| {
                for (&src, g) in map.iter().zip(gd) {
                    d[src] += g;
                }
            });
        }
        Op::Concat {
            a,
            b,
            outer,
            a_inner,
            b_inner,
        } => {
            let row = a_inner + b_inner;
            accumulate(nodes, grads, *a, |d| {
                for o in 0..*outer {
                    for (x, g) in d[o * a_inner..(o + 1) * a_inner]
                        .iter_mut()
                        .zip(&gd[o * row..o * row + a_inner])
                    {
                        *x += g;
                    }
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for o in 0..*outer {
                    for (x, g) in d[o * b_inner..(o + 1) * b_inner]
                        .iter_mut()
                        .zip(&gd[o * row + a_inner..(o + 1) * row])
                    {
                        *x += g;
                    }
                }
            });
        }
        Op::Conv2d { x, w, geom, n, o } => {
            let (vx, vw) = (val(*x), val(*w));
            let (dx, dw) = kernels::conv2d_backward(
                vx.data(),
                *n,
                vw.data(),
                *o,
                geom,
                gd,
                needs(nodes, *x),
                needs(nodes, *w),
            );
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, |d| d.iter_mut().zip(&dx).for_each(|(a, b)| *a += b));
            }
            if let Some(dw) = dw {
                accumulate(nodes, grads, *w, |d| d.iter_mut().zip(&dw).for_each(|(a, b)| *a += b));
            }
        }
        Op::ChannelBias { x, b, channels, inner } => {
            accumulate(nodes, grads, *x, |d| d.iter_mut().zip(gd).for_each(|(a, g)| *a += g));
            accumulate(nodes, grads, *b, |d| {
                for (k, g) in gd.iter().enumerate() {
                    d[(k / inner) % channels] += g;
                }
            });
        }
        Op::Linear {
            x,
            w,
            b,
            n,
            fan_in,
            fan_out,
        } => {
            let (vx, vw) = (val(*x), val(*w));
            accumulate(nodes, grads, *x, |d| {
                kernels::gemm(*n, *fan_out, *fan_in, gd, false, vw.data(), false, d, 1.0);
            });
            accumulate(nodes, grads, *w, |d| {
                kernels::gemm(*fan_out, *n, *fan_in, gd, true, vx.data(), false, d, 1.0);
            });
            accumulate(nodes, grads, *b, |d| {
                for row in gd.chunks(*fan_out) {
                    d.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                }
            });
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            dims: (n, c, l),
            batch_stats,
        } => {
            let vg = val(*gamma);
            let at = |s: usize, ch: usize, i: usize| (s * c + ch) * l + i;
            let m = (n * l) as f64;
            let mut sum_g = vec![0.0; *c];
            let mut sum_gx = vec![0.0; *c];
            for s in 0..*n {
                for ch in 0..*c {
                    for i in 0..*l {
                        let k = at(s, ch, i);
                        sum_g[ch] += gd[k];
                        sum_gx[ch] += gd[k] * xhat[k];
                    }
                }
            }
            accumulate(nodes, grads, *gamma, |d| d.iter_mut().zip(&sum_gx).for_each(|(a, g)| *a += g));
            accumulate(nodes, grads, *beta, |d| d.iter_mut().zip(&sum_g).for_each(|(a, g)| *a += g));
            accumulate(nodes, grads, *x, |d| {
                for s in 0..*n {
                    for ch in 0..*c {
                        let scale = vg.data()[ch] * inv_std[ch];
                        for i in 0..*l {
                            let k = at(s, ch, i);
                            d[k] += if *batch_stats {
                                scale * (gd[k] - sum_g[ch] / m - xhat[k] * sum_gx[ch] / m)
                            } else {
                                scale * gd[k]
                            };
                        }
                    }
                }
            });
        }
        Op::Softmax(a) => {
            let y = node.value.clone();
            let width = *y.shape().last().expect("softmax has an axis");
            accumulate(nodes, grads, *a, |d| {
                for ((drow, grow), yrow) in d
                    .chunks_mut(width)
                    .zip(gd.chunks(width))
                    .zip(y.data().chunks(width))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((x, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *x += y * (g - dot);
                    }
                }
            });
        }
        Op::Gather(a, map) => {
            accumulate(nodes, grads, *a, |d| {
                for (&k, g) in map.iter().zip(gd) {
                    d[k] += g;
                }
            });
        }
    }
}

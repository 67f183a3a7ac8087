//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Values live on the
//! tape; parameters are copied in from a [`ParamSet`] and their gradients are
//! accumulated back with [`Tape::backward_into`]. A fresh tape is built for
//! every forward pass.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims, ConvSpec};
use crate::params::ParamSet;
use crate::tensor::{split_nc_spatial, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf {
        param: Option<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
        dims: ConvDims,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        planes: usize,
        inp: [usize; 3],
        factor: [usize; 3],
    },
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Concat {
        inputs: Vec<Var>,
    },
    Gather {
        input: Var,
        rows: Vec<(usize, usize)>,
    },
    /// Scalar-valued op whose local gradient was computed during the forward pass.
    Fused(Vec<(Var, Vec<f64>)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Softmax layout: `outer` groups of `channels` values spaced `inner` apart.
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    if shape.len() == 1 {
        (1, shape[0], 1)
    } else {
        (shape[0], shape[1], shape[2..].iter().product())
    }
}

pub(crate) fn softmax_in_place(data: &mut [f64], shape: &[usize]) {
    let (outer, c, inner) = channel_layout(shape);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * c * inner + i;
            let mut max = f64::NEG_INFINITY;
            for k in 0..c {
                max = max.max(data[base + k * inner]);
            }
            let mut z = 0.0;
            for k in 0..c {
                let e = libm::exp(data[base + k * inner] - max);
                data[base + k * inner] = e;
                z += e;
            }
            for k in 0..c {
                data[base + k * inner] /= z;
            }
        }
    }
}

fn log_softmax(data: &[f64], shape: &[usize]) -> Vec<f64> {
    let (outer, c, inner) = channel_layout(shape);
    let mut out = data.to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * c * inner + i;
            let mut max = f64::NEG_INFINITY;
            for k in 0..c {
                max = max.max(data[base + k * inner]);
            }
            let mut z = 0.0;
            for k in 0..c {
                z += libm::exp(data[base + k * inner] - max);
            }
            let lse = max + libm::log(z);
            for k in 0..c {
                out[base + k * inner] = data[base + k * inner] - lse;
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records an input value.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf { param: None }, requires_grad)
    }

    /// Copies parameter `index` of `params` onto the tape.
    pub fn param(&mut self, params: &ParamSet, index: usize) -> Var {
        let value = params.value(index).clone();
        self.push(value, Op::Leaf { param: Some(index) }, true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |p, q| p - q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, k), rg)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let xv = x[i * k + p];
                for j in 0..n {
                    out[i * n + j] += xv * y[p * n + j];
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// N-D convolution (1 to 3 spatial axes). `input` is `[N, Cin, spatial..]`,
    /// `weight` is `[Cout, Cin, kernel..]` with the same spatial rank, `bias` is `[Cout]`.
    pub fn conv(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != sw.len() {
            return Err(Error::shape("conv", &si, &sw));
        }
        let (n, cin, inp) = split_nc_spatial(&si)?;
        let (cout, wcin, ker) = split_nc_spatial(&sw)?;
        if wcin != cin {
            return Err(Error::shape("conv", &si, &sw));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv bias", self.shape(b), &[cout]));
            }
        }
        let mut out = [0; 3];
        for ax in 0..3 {
            out[ax] = kernels::conv_out_len(inp[ax], ker[ax], spec.stride[ax], spec.padding[ax])
                .ok_or_else(|| Error::shape("conv", &si, &sw))?;
        }
        let dims = ConvDims { n, cin, cout, inp, ker, out };
        let data = kernels::conv_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &dims,
            &spec,
        );
        let rank = si.len() - 2;
        let mut shape = vec![n, cout];
        shape.extend_from_slice(&out[3 - rank..]);
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Conv { input, weight, bias, spec, dims }, rg))
    }

    /// Max pooling with window and stride `factor` over the spatial axes.
    pub fn max_pool(&mut self, input: Var, factor: &[usize]) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let (n, c, inp) = split_nc_spatial(&s)?;
        let f = pad_factor(&s, factor)?;
        for ax in 0..3 {
            if inp[ax] % f[ax] != 0 {
                return Err(Error::shape("max_pool", &s, factor));
            }
        }
        let (vals, argmax) = kernels::max_pool(self.value(input).data(), n * c, inp, f);
        let mut shape = s.clone();
        let rank = s.len() - 2;
        for (i, d) in shape[2..].iter_mut().enumerate() {
            *d /= f[3 - rank + i];
        }
        let t = Tensor::new(shape, vals)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::MaxPool { input, argmax }, rg))
    }

    /// Nearest-neighbour upsampling by integer `factor` per spatial axis.
    pub fn upsample(&mut self, input: Var, factor: &[usize]) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let (n, c, inp) = split_nc_spatial(&s)?;
        let f = pad_factor(&s, factor)?;
        let data = kernels::upsample(self.value(input).data(), n * c, inp, f);
        let mut shape = s.clone();
        for (i, d) in shape[2..].iter_mut().enumerate() {
            *d *= factor[i];
        }
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::Upsample { input, planes: n * c, inp, factor: f }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    /// Softmax along the channel axis (axis 1, or axis 0 for 1-D tensors).
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        let shape = t.shape().to_vec();
        softmax_in_place(t.data_mut(), &shape);
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = log_softmax(x.data(), x.shape());
        let t = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::LogSoftmax(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(libm::log);
        let rg = self.rg(a);
        self.push(t, Op::Log(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Concatenates activations along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::Empty("concat input list"))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() < 2 {
            return Err(Error::shape("concat", &s0, &s0));
        }
        let mut channels = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::shape("concat", &s0, s));
            }
            channels += s[1];
        }
        let n = s0[0];
        let plane: usize = s0[2..].iter().product();
        let mut data = Vec::with_capacity(n * channels * plane);
        for b in 0..n {
            for &v in inputs {
                let x = self.value(v);
                let c = x.shape()[1];
                data.extend_from_slice(&x.data()[b * c * plane..][..c * plane]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = channels;
        let t = Tensor::new(shape, data)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(t, Op::Concat { inputs: inputs.to_vec() }, rg))
    }

    /// Picks per-site channel vectors out of an `[N, C, spatial..]` activation,
    /// producing an `[rows, C]` matrix. Each row is `(batch index, flat site index)`.
    pub fn gather_sites(&mut self, input: Var, rows: &[(usize, usize)]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Empty("site selection"));
        }
        let s = self.shape(input).to_vec();
        let (n, c, sp) = split_nc_spatial(&s)?;
        let plane: usize = sp.iter().product();
        let x = self.value(input).data();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &(b, site) in rows {
            if b >= n || site >= plane {
                return Err(Error::arg("rows", alloc::format!("site ({b}, {site}) outside {s:?}")));
            }
            for k in 0..c {
                data.push(x[(b * c + k) * plane + site]);
            }
        }
        let t = Tensor::new(vec![rows.len(), c], data)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::Gather { input, rows: rows.to_vec() }, rg))
    }

    /// Records a scalar whose gradient with respect to each input was already
    /// computed. Used by losses with closed-form local gradients.
    pub(crate) fn fused_scalar(&mut self, value: f64, parts: Vec<(Var, Vec<f64>)>) -> Var {
        let rg = parts.iter().any(|(v, _)| self.rg(*v));
        self.push(Tensor::scalar(value), Op::Fused(parts), rg)
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward pass that adds parameter gradients into `params`.
    pub fn backward_into(&self, loss: Var, params: &mut ParamSet) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(p) } = node.op {
                if let Some(g) = grads.grads[i].as_deref() {
                    params.accumulate_grad(p, g)?;
                }
            }
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(d, x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * y[k];
                    }
                });
                acc(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * x[k];
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(d, x)| *d += k * x)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, kk, n) = (sa[0], sa[1], sb[1]);
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for r in 0..m {
                        for p in 0..kk {
                            let mut t = 0.0;
                            for j in 0..n {
                                t += g[r * n + j] * y[p * n + j];
                            }
                            s[r * kk + p] += t;
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for r in 0..m {
                        for p in 0..kk {
                            let xv = x[r * kk + p];
                            for j in 0..n {
                                s[p * n + j] += xv * g[r * n + j];
                            }
                        }
                    }
                });
            }
            Op::Conv { input, weight, bias, spec, dims } => {
                let (gi, gw, gb) =
                    kernels::conv_backward(self.value(*input).data(), self.value(*weight).data(), g, dims, spec, self.rg(*input));
                if let Some(gi) = gi {
                    acc(*input, &mut |s| add_into(s, &gi));
                }
                acc(*weight, &mut |s| add_into(s, &gw));
                if let Some(b) = bias {
                    acc(*b, &mut |s| add_into(s, &gb));
                }
            }
            Op::MaxPool { input, argmax } => acc(*input, &mut |s| {
                for (o, &src) in argmax.iter().enumerate() {
                    s[src] += g[o];
                }
            }),
            Op::Upsample { input, planes, inp, factor } => {
                let gi = kernels::upsample_backward(g, *planes, *inp, *factor);
                acc(*input, &mut |s| add_into(s, &gi));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        if x[k] > 0.0 {
                            s[k] += g[k];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let (outer, c, inner) = channel_layout(node.value.shape());
                acc(*a, &mut |s| {
                    for o in 0..outer {
                        for q in 0..inner {
                            let base = o * c * inner + q;
                            let mut dot = 0.0;
                            for k in 0..c {
                                dot += g[base + k * inner] * y[base + k * inner];
                            }
                            for k in 0..c {
                                let j = base + k * inner;
                                s[j] += y[j] * (g[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let (outer, c, inner) = channel_layout(node.value.shape());
                acc(*a, &mut |s| {
                    for o in 0..outer {
                        for q in 0..inner {
                            let base = o * c * inner + q;
                            let mut gsum = 0.0;
                            for k in 0..c {
                                gsum += g[base + k * inner];
                            }
                            for k in 0..c {
                                let j = base + k * inner;
                                s[j] += g[j] - libm::exp(y[j]) * gsum;
                            }
                        }
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / x[k];
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::Concat { inputs } => {
                let s0 = node.value.shape();
                let (n, total_c) = (s0[0], s0[1]);
                let plane: usize = s0[2..].iter().product();
                let mut offset = 0;
                for &v in inputs {
                    let c = self.shape(v)[1];
                    acc(v, &mut |s| {
                        for b in 0..n {
                            let src = &g[(b * total_c + offset) * plane..][..c * plane];
                            add_into(&mut s[b * c * plane..][..c * plane], src);
                        }
                    });
                    offset += c;
                }
            }
            Op::Gather { input, rows } => {
                let (_, c, sp) = split_nc_spatial(self.shape(*input)).expect("checked on record");
                let plane: usize = sp.iter().product();
                acc(*input, &mut |s| {
                    for (r, &(b, site)) in rows.iter().enumerate() {
                        for k in 0..c {
                            s[(b * c + k) * plane + site] += g[r * c + k];
                        }
                    }
                });
            }
            Op::Fused(parts) => {
                for (v, local) in parts {
                    acc(*v, &mut |s| s.iter_mut().zip(local).for_each(|(d, l)| *d += g[0] * l));
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn pad_factor(shape: &[usize], factor: &[usize]) -> Result<[usize; 3]> {
    let rank = shape.len().saturating_sub(2);
    if factor.len() != rank || factor.contains(&0) {
        return Err(Error::shape("spatial factor", shape, factor));
    }
    let mut f = [1; 3];
    f[3 - rank..].copy_from_slice(factor);
    Ok(f)
}

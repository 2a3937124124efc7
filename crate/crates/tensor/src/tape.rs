//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and the handles of
//! its inputs, so node order is a topological order and `backward` walks the
//! tape once in reverse. A tape belongs to one thread; build a new tape per
//! forward pass.

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvTranspose2x2 { x: Var, w: Var, b: Var },
    AvgPool2d { x: Var, kh: usize, kw: usize },
    Relu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    SumAll(Var),
    SumAxis { x: Var, axis: usize },
    L2Normalize { x: Var, norms: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

/// `(outer, len, inner)` split of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, requires_grad)
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient from the last `backward`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads[v.0].as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).expect("grad shape mirrors value"))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// `x[..., n] + b[n]`, the bias broadcast over every leading index.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(b) != [n] {
            return Err(TensorError::mismatch("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let xv = self.value(x);
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(&bias).map(|(&v, &c)| v + c))
            .collect();
        let out = Tensor::new(xv.shape(), data)?;
        Ok(self.push(out, Op::AddBias(x, b), &[x, b]))
    }

    /// `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![T::zero(); m * n];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), &mut data, m, k, n);
        let out = Tensor::new(&[m, n], data)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product: `[B,m,k] x [B,k,n]`, or `[B,m,k] x [B,n,k]^T` when
    /// `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(TensorError::mismatch("bmm", sa, sb));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut data = vec![T::zero(); bt * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..bt {
            let ab = &av[i * m * k..(i + 1) * m * k];
            let bb = &bv[i * k * n..(i + 1) * k * n];
            let ob = &mut data[i * m * n..(i + 1) * m * n];
            if trans_b {
                kernels::gemm_nt(ab, bb, ob, m, k, n);
            } else {
                kernels::gemm_nn(ab, bb, ob, m, k, n);
            }
        }
        let out = Tensor::new(&[bt, m, n], data)?;
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    /// Affine map over the last axis: `x[..., k] · w[k, n] (+ b[n])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let k = *sx.last().unwrap();
        if sw.len() != 2 || sw[0] != k {
            return Err(TensorError::mismatch("linear", &sx, &sw));
        }
        let rows = sx.iter().product::<usize>() / k;
        let flat = self.reshape(x, &[rows, k])?;
        let y = self.matmul(flat, w)?;
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = sw[1];
        let y = self.reshape(y, &out_shape)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Stride-1 2-D convolution, `x[B,C,H,W]`, `w[O,C,k,k]`, `b[O]`, zero
    /// padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sb != [sw[0]] {
            return Err(TensorError::mismatch("conv2d", sx, sw));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            out_ch: sw[0],
            h: sx[2],
            w: sx[3],
            k: sw[2],
            pad,
        };
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[2] || pad >= sw[2] {
            return Err(TensorError::invalid(
                "conv2d",
                format!("kernel {} with padding {pad} does not fit input {sx:?}", sw[2]),
            ));
        }
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let bias = self.value(b).data();
        let mut data = Vec::with_capacity(geom.batch * geom.out_ch * oh * ow);
        for _ in 0..geom.batch {
            for &bv in bias {
                data.extend(std::iter::repeat(bv).take(oh * ow));
            }
        }
        kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), &mut data);
        let out = Tensor::new(&[geom.batch, geom.out_ch, oh, ow], data)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }

    /// Transposed convolution with kernel 2 and stride 2 (exact 2x
    /// upsampling): `x[B,C,H,W]`, `w[C,O,2,2]`, `b[O]` -> `[B,O,2H,2W]`.
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sx[1] || sw[2] != 2 || sw[3] != 2 || sb != [sw[1]] {
            return Err(TensorError::mismatch("conv_transpose2x2", sx, sw));
        }
        let (bn, c, h, wd, o) = (sx[0], sx[1], sx[2], sx[3], sw[1]);
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let (oh, ow) = (2 * h, 2 * wd);
        let mut data = vec![T::zero(); bn * o * oh * ow];
        for bi in 0..bn {
            for oc in 0..o {
                let plane = &mut data[(bi * o + oc) * oh * ow..(bi * o + oc + 1) * oh * ow];
                plane.iter_mut().for_each(|v| *v = bv[oc]);
                for ic in 0..c {
                    let xin = &xv[(bi * c + ic) * h * wd..(bi * c + ic + 1) * h * wd];
                    let k = &wv[(ic * o + oc) * 4..(ic * o + oc) * 4 + 4];
                    for i in 0..h {
                        for j in 0..wd {
                            let v = xin[i * wd + j];
                            let base = 2 * i * ow + 2 * j;
                            plane[base] = plane[base] + v * k[0];
                            plane[base + 1] = plane[base + 1] + v * k[1];
                            plane[base + ow] = plane[base + ow] + v * k[2];
                            plane[base + ow + 1] = plane[base + ow + 1] + v * k[3];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[bn, o, oh, ow], data)?;
        Ok(self.push(out, Op::ConvTranspose2x2 { x, w, b }, &[x, w, b]))
    }

    /// Non-overlapping average pooling over `kh x kw` windows of `x[B,C,H,W]`.
    pub fn avg_pool2d(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || kh == 0 || kw == 0 || sx[2] % kh != 0 || sx[3] % kw != 0 {
            return Err(TensorError::invalid(
                "avg_pool2d",
                format!("window {kh}x{kw} does not tile input {sx:?}"),
            ));
        }
        let (planes, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / kh, w / kw);
        let inv = T::from_f64(1.0 / (kh * kw) as f64);
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            for y in 0..h {
                for xx in 0..w {
                    let o = p * oh * ow + (y / kh) * ow + xx / kw;
                    data[o] = data[o] + xv[p * h * w + y * w + xx];
                }
            }
        }
        data.iter_mut().for_each(|v| *v = *v * inv);
        let out = Tensor::new(&[sx[0], sx[1], oh, ow], data)?;
        Ok(self.push(out, Op::AvgPool2d { x, kh, kw }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(TensorError::mismatch("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::from_f64(eps);
        let nf = T::from_f64(n as f64);
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.numel() / n;
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                data.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(xv.shape(), data)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            let mut sum = T::zero();
            for &v in row {
                let e = (v - mx).exp();
                sum = sum + e;
                data.push(e);
            }
            data[start..].iter_mut().for_each(|e| *e = *e / sum);
        }
        let out = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(out, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::invalid("permute", format!("{perm:?} is not a permutation of {shape:?}")));
        }
        let (data, out_shape) = permute_data(self.value(x).data(), shape, perm);
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(out, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over `axis`, removing it (a rank-1 input reduces to shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &xv[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(out, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self
            .shape(x)
            .get(axis)
            .copied()
            .ok_or_else(|| TensorError::invalid("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Scales every last-axis row to unit Euclidean length.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        let tiny = T::from_f64(1e-12);
        let mut norms = Vec::with_capacity(xv.numel() / n);
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(n) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(tiny);
            norms.push(norm);
            data.extend(row.iter().map(|&v| v / norm));
        }
        let out = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(out, Op::L2Normalize { x, norms }, &[x])
    }

    /// Row-wise dot product over the last axis.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        let last = self.shape(p).len() - 1;
        self.sum_axis(p, last)
    }

    /// Row-wise cosine similarity over the last axis.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let na = self.l2_normalize(a);
        let nb = self.l2_normalize(b);
        self.dot(na, nb)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    /// Gathers rows of `table[V, D]` -> `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || ids.is_empty() {
            return Err(TensorError::invalid("embedding", format!("table {st:?}, {} ids", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= st[0]) {
            return Err(TensorError::invalid("embedding", format!("id {bad} out of range for {} rows", st[0])));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * st[1]);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new(&[ids.len(), st[1]], data)?;
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Mean softmax cross-entropy of `logits[N, C]` against class `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(TensorError::mismatch("cross_entropy", &sl, &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= sl[1]) {
            return Err(TensorError::invalid("cross_entropy", format!("target {bad} out of range for {} classes", sl[1])));
        }
        let c = sl[1];
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(lv.len());
        let mut total = 0.0f64;
        for (row, &t) in lv.chunks(c).zip(targets) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + sum.ln();
            total += (lse - row[t]).to_f64();
            probs.extend(row.iter().map(|&v| (v - mx).exp() / sum));
        }
        let loss = T::from_f64(total / targets.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        ))
    }

    /// Reverse sweep from a one-element `loss`. Clears gradients left by any
    /// earlier sweep, then fills `grad` for every node that requires one and
    /// is reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let Tape { nodes, grads } = self;
        let nodes: &[Node<T>] = nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(slot);
        };
        fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &s)| *d = *d - s));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for ((d, &s), &o) in d.iter_mut().zip(g).zip(bv) {
                        *d = *d + s * o;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, &s), &o) in d.iter_mut().zip(g).zip(av) {
                        *d = *d + s * o;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * *s)),
            Op::AddScalar(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::AddBias(x, b) => {
                acc(*x, &mut |d| add_into(d, g));
                let n = nodes[b.0].value.numel();
                acc(*b, &mut |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| kernels::gemm_nt(g, bv, d, m, n, k));
                acc(*b, &mut |d| kernels::gemm_tn(av, g, d, k, m, n));
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for i in 0..bt {
                        let gb = &g[i * m * n..(i + 1) * m * n];
                        let bb = &bv[i * k * n..(i + 1) * k * n];
                        let db = &mut d[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            kernels::gemm_nn(gb, bb, db, m, n, k);
                        } else {
                            kernels::gemm_nt(gb, bb, db, m, n, k);
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..bt {
                        let gb = &g[i * m * n..(i + 1) * m * n];
                        let ab = &av[i * m * k..(i + 1) * m * k];
                        let db = &mut d[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            kernels::gemm_tn(gb, ab, db, n, m, k);
                        } else {
                            kernels::gemm_tn(ab, gb, db, k, m, n);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |d| kernels::conv2d_backward_input(geom, g, wv, d));
                acc(*w, &mut |d| kernels::conv2d_backward_weight(geom, g, xv, d));
                let plane = geom.out_h() * geom.out_w();
                acc(*b, &mut |d| {
                    for (pi, chunk) in g.chunks(plane).enumerate() {
                        let o = pi % geom.out_ch;
                        d[o] = d[o] + chunk.iter().copied().sum::<T>();
                    }
                });
            }
            Op::ConvTranspose2x2 { x, w, b } => {
                let sx = nodes[x.0].value.shape();
                let (bn, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let o = nodes[b.0].value.numel();
                let (oh, ow) = (2 * h, 2 * wd);
                let (xv, wv) = (val(*x), val(*w));
                let taps = |plane: &[T], i: usize, j: usize| {
                    let base = 2 * i * ow + 2 * j;
                    [plane[base], plane[base + 1], plane[base + ow], plane[base + ow + 1]]
                };
                acc(*x, &mut |d| {
                    for bi in 0..bn {
                        for oc in 0..o {
                            let plane = &g[(bi * o + oc) * oh * ow..(bi * o + oc + 1) * oh * ow];
                            for ic in 0..c {
                                let k = &wv[(ic * o + oc) * 4..(ic * o + oc) * 4 + 4];
                                let dx = &mut d[(bi * c + ic) * h * wd..(bi * c + ic + 1) * h * wd];
                                for i in 0..h {
                                    for j in 0..wd {
                                        let t = taps(plane, i, j);
                                        dx[i * wd + j] = dx[i * wd + j] + t[0] * k[0] + t[1] * k[1] + t[2] * k[2] + t[3] * k[3];
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*w, &mut |d| {
                    for bi in 0..bn {
                        for oc in 0..o {
                            let plane = &g[(bi * o + oc) * oh * ow..(bi * o + oc + 1) * oh * ow];
                            for ic in 0..c {
                                let xin = &xv[(bi * c + ic) * h * wd..(bi * c + ic + 1) * h * wd];
                                let mut s = [T::zero(); 4];
                                for i in 0..h {
                                    for j in 0..wd {
                                        let t = taps(plane, i, j);
                                        let v = xin[i * wd + j];
                                        for q in 0..4 {
                                            s[q] = s[q] + v * t[q];
                                        }
                                    }
                                }
                                let dk = &mut d[(ic * o + oc) * 4..(ic * o + oc) * 4 + 4];
                                add_into(dk, &s);
                            }
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for (pi, chunk) in g.chunks(oh * ow).enumerate() {
                        let oc = pi % o;
                        d[oc] = d[oc] + chunk.iter().copied().sum::<T>();
                    }
                });
            }
            Op::AvgPool2d { x, kh, kw } => {
                let sx = nodes[x.0].value.shape();
                let (planes, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
                let (oh, ow) = (h / kh, w / kw);
                let inv = T::from_f64(1.0 / (kh * kw) as f64);
                acc(*x, &mut |d| {
                    for p in 0..planes {
                        for y in 0..h {
                            for xx in 0..w {
                                let gi = g[p * oh * ow + (y / kh) * ow + xx / kw];
                                let di = p * h * w + y * w + xx;
                                d[di] = d[di] + gi * inv;
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for ((d, &s), &v) in d.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d = *d + s;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = nodes[i].value.data();
                acc(*x, &mut |d| {
                    for ((d, &s), &yv) in d.iter_mut().zip(g).zip(y) {
                        *d = *d + s * yv * (T::one() - yv);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = nodes[gamma.0].value.numel();
                let gm = val(*gamma);
                let nf = T::from_f64(n as f64);
                acc(*beta, &mut |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
                acc(*gamma, &mut |d| {
                    for (row, xh) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            d[j] = d[j] + row[j] * xh[j];
                        }
                    }
                });
                acc(*x, &mut |d| {
                    for (r, ((row, xh), dx)) in g.chunks(n).zip(xhat.chunks(n)).zip(d.chunks_mut(n)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dhx = T::zero();
                        for j in 0..n {
                            let dh = row[j] * gm[j];
                            mean_dh = mean_dh + dh;
                            mean_dhx = mean_dhx + dh * xh[j];
                        }
                        mean_dh = mean_dh / nf;
                        mean_dhx = mean_dhx / nf;
                        for j in 0..n {
                            let dh = row[j] * gm[j];
                            dx[j] = dx[j] + rstd[r] * (dh - mean_dh - xh[j] * mean_dhx);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = nodes[i].value.data();
                let n = *nodes[i].value.shape().last().unwrap();
                acc(*x, &mut |d| {
                    for ((row, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(d.chunks_mut(n)) {
                        let dotp: T = row.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            dr[j] = dr[j] + yr[j] * (row[j] - dotp);
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let out_shape = nodes[i].value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = nodes[v.0].value.shape()[*axis];
                    acc(v, &mut |d| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut d[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                let len = nodes[i].value.shape()[*axis];
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        add_into(&mut d[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (back, _) = permute_data(g, nodes[i].value.shape(), &inverse);
                acc(*x, &mut |d| add_into(d, &back));
            }
            Op::SumAll(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v = *v + g[0])),
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for a in 0..n {
                            add_into(&mut d[(o * n + a) * inner..(o * n + a + 1) * inner], &g[o * inner..(o + 1) * inner]);
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let y = nodes[i].value.data();
                let n = *nodes[i].value.shape().last().unwrap();
                acc(*x, &mut |d| {
                    for (r, ((row, yr), dr)) in g.chunks(n).zip(y.chunks(n)).zip(d.chunks_mut(n)).enumerate() {
                        let dotp: T = row.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            dr[j] = dr[j] + (row[j] - yr[j] * dotp) / norms[r];
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let dim = nodes[table.0].value.shape()[1];
                acc(*table, &mut |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = nodes[logits.0].value.shape()[1];
                let scale = g[0] / T::from_f64(targets.len() as f64);
                acc(*logits, &mut |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            d[r * c + j] = d[r * c + j] + scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_slice(shape, data).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_slice(&[3], &[-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn cosine_of_vector_with_itself_is_one() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_slice(&[1, 4], &[0.3, -2.0, 5.5, 1e-3]).unwrap());
        let c = tape.cosine_similarity(x, x).unwrap();
        assert!((tape.value(c).data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = tape.matmul(a, b).unwrap();
        // [1 2 3; 4 5 6] x [7 8; 9 10; 11 12]
        assert_eq!(tape.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("[2, 3]"));
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, c).unwrap_err().to_string().starts_with("add"));
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_slice(&[2, 2], &[1.0, -2.0, 3.0, 0.5]).unwrap(), true);
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn dot_with_self_gradient_is_twice_input() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_slice(&[3], &[1.0, -2.0, 0.25]).unwrap(), true);
        let d = tape.dot(x, x).unwrap();
        tape.backward(d).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 0.5]);
    }

    #[test]
    fn two_branches_accumulate() {
        // y = x*x + 3x consumed through two branches vs fused analytic 2x + 3.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[0.5, -1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let lin = tape.scale(x, 3.0);
        let y = tape.add(sq, lin).unwrap();
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 1.0, 7.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        let c = tape.constant(Tensor::ones(&[2]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn permute_round_trips() {
        let mut tape = Tape::<f32>::new();
        let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let x = tape.constant(Tensor::new(&[2, 3, 4], data.clone()).unwrap());
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        // element [k, i, j] of output = input [i, j, k]
        assert_eq!(tape.value(p).data()[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back).data(), &data[..]);
    }

    #[test]
    fn softmax_of_single_logit_is_one() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_slice(&[2, 1], &[-3.0, 40.0]).unwrap());
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[1.0, 1.0]);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::new(&[2, 2, 3], (0..12).map(|v| v as f32).collect()).unwrap());
        let b = tape.constant(Tensor::new(&[2, 1, 3], (12..18).map(|v| v as f32).collect()).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 3]);
        let s = tape.slice(c, 1, 2, 1).unwrap();
        assert_eq!(tape.value(s), tape.value(b));
        let s = tape.slice(c, 1, 0, 2).unwrap();
        assert_eq!(tape.value(s), tape.value(a));
    }
}

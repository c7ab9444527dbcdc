//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied during one forward pass. Nodes
//! are appended in evaluation order, so the node list is already a topological
//! order and [`Graph::backward`] walks it in reverse exactly once.

use std::sync::Arc;

use super::tensor::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Tanh approximation.
    Gelu,
    Sigmoid,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::contract(format!("unknown activation `{other}`"))),
        }
    }
}

/// Allowed-pair pattern for windowed attention logits.
///
/// `allowed` has shape `[windows, tokens, tokens]`. Logit rows are laid out
/// as `[batch * windows, heads, tokens]`, so the pattern repeats over batch
/// and heads.
#[derive(Clone, Debug)]
pub struct AttentionMask {
    pub allowed: Arc<Vec<bool>>,
    pub windows: usize,
    pub heads: usize,
    pub tokens: usize,
}

impl AttentionMask {
    #[inline]
    fn row_pattern(&self, row: usize) -> &[bool] {
        let t = self.tokens;
        let window = (row / (self.heads * t)) % self.windows;
        let p = row % t;
        let start = (window * t + p) * t;
        &self.allowed[start..start + t]
    }
}

/// Geometry of a 2-D cross-correlation on channels-last input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

/// Precomputed bilinear taps (align-corners = false) for one axis.
#[derive(Clone, Debug)]
pub struct ResizeAxis<T> {
    taps: Vec<(usize, usize, T, T)>,
}

impl<T: Scalar> ResizeAxis<T> {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let taps = (0..output)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
                let l1 = src - i0 as f64;
                (i0, i1, T::c(1.0 - l1), T::c(l1))
            })
            .collect();
        ResizeAxis { taps }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
        tb: bool,
    },
    Gather {
        x: Var,
        index: Arc<Vec<usize>>,
        chunk: usize,
    },
    Reshape(Var),
    Concat {
        a: Var,
        b: Var,
        ca: usize,
        cb: usize,
    },
    Act(Var, Activation),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
        batch_stats: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Resize {
        x: Var,
        rows: Arc<ResizeAxis<T>>,
        cols: Arc<ResizeAxis<T>>,
    },
    Bce {
        pred: Var,
        target: Arc<Tensor<T>>,
        clamp: T,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Statistics produced by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased per-channel variance.
    pub var: Vec<T>,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("grad shape"))
    }

    /// Gradient of `v`, zeros if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// Tape of one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn trailing_broadcast(a: &[usize], b: &[usize]) -> bool {
    let lead = b.iter().take_while(|&&d| d == 1).count();
    let b = &b[lead.min(b.len().saturating_sub(1))..];
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn batch_dims(shape: &[usize]) -> usize {
    shape[..shape.len() - 2].iter().product()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is collected by [`Graph::backward`].
    pub fn parameter(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
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

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !trailing_broadcast(ta.shape(), tb.shape()) {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let period = tb.numel();
        let bd = tb.data();
        let out: Vec<T> = ta
            .data()
            .chunks(period)
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(ta.shape(), out)
    }

    /// `a + b`, where `b` broadcasts over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// `a - b`, where `b` broadcasts over the leading axes of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// `a * b` elementwise, where `b` broadcasts over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]`.
    ///
    /// Batch axes must match, or `b` may be a plain matrix shared by every
    /// batch entry of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a x b^T` for `a: [.., m, k]`, `b: [.., n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let name = if tb { "matmul_nt" } else { "matmul" };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(name, &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = if tb {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let shared_b = sb.len() == 2 || batch_dims(&sb) == 1;
        if k != k2 || (!shared_b && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::shape(name, &sa, &sb));
        }
        let batch = batch_dims(&sa);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            if shared_b {
                gemm(batch * m, k, n, da, false, db, tb, &mut out, false);
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &da[i * m * k..(i + 1) * m * k],
                        false,
                        &db[i * k * n..(i + 1) * k * n],
                        tb,
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(
            t,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
                tb,
            },
            &[a, b],
        ))
    }

    /// Chunked gather: output chunk `i` is input chunk `index[i]`.
    ///
    /// Expresses permutations, cyclic shifts, window tiling, and patch
    /// extraction. Repeated indices are allowed; gradients scatter-add.
    pub fn gather(
        &mut self,
        x: Var,
        index: Arc<Vec<usize>>,
        chunk: usize,
        out_shape: &[usize],
    ) -> Result<Var> {
        let src = self.value(x);
        let chunks = src.numel() / chunk.max(1);
        if chunk == 0
            || src.numel() % chunk != 0
            || index.len() * chunk != out_shape.iter().product::<usize>()
            || index.iter().any(|&i| i >= chunks)
        {
            return Err(Error::shape("gather", src.shape(), out_shape));
        }
        let d = src.data();
        let mut out = Vec::with_capacity(index.len() * chunk);
        for &i in index.iter() {
            out.extend_from_slice(&d[i * chunk..(i + 1) * chunk]);
        }
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::Gather { x, index, chunk }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat", sa, sb));
        }
        let (ca, cb) = (ta.last_dim(), tb.last_dim());
        let mut out = Vec::with_capacity(ta.numel() + tb.numel());
        for (ra, rb) in ta.data().chunks(ca).zip(tb.data().chunks(cb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Concat { a, b, ca, cb }, &[a, b]))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = self.value(x).map(|v| act_forward(kind, v));
        self.push(out, Op::Act(x, kind), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Softmax over the last axis. Disallowed pairs get exactly zero weight.
    pub fn softmax(&mut self, x: Var, mask: Option<AttentionMask>) -> Result<Var> {
        let t = self.value(x);
        let l = t.last_dim();
        if let Some(m) = &mask {
            let rows = t.numel() / l;
            if m.tokens != l
                || m.allowed.len() != m.windows * l * l
                || rows % (m.windows * m.heads * l) != 0
            {
                return Err(Error::shape("softmax mask", t.shape(), &[m.windows, l, l]));
            }
        }
        let mut out = t.data().to_vec();
        for (r, row) in out.chunks_mut(l).enumerate() {
            let pattern = mask.as_ref().map(|m| m.row_pattern(r));
            let allowed = |q: usize| pattern.is_none_or(|p| p[q]);
            let mut max = T::neg_infinity();
            for (q, &v) in row.iter().enumerate() {
                if allowed(q) && v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for (q, v) in row.iter_mut().enumerate() {
                *v = if allowed(q) { (*v - max).exp() } else { T::zero() };
                sum += *v;
            }
            let inv = T::one() / sum;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Normalizes each vector along the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let t = self.value(x);
        let c = t.last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", t.shape(), self.shape(gamma)));
        }
        if eps <= T::zero() {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let cn = T::c(c as f64);
        let mut out = Vec::with_capacity(t.numel());
        let mut rstds = Vec::with_capacity(t.numel() / c);
        for row in t.data().chunks(c) {
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let rstd = T::one() / (var + eps).sqrt();
            rstds.push(rstd);
            out.extend(
                row.iter()
                    .zip(g.iter().zip(b))
                    .map(|(&v, (&gi, &bi))| (v - mean) * rstd * gi + bi),
            );
        }
        let out = Tensor::new(t.shape(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd: rstds,
            },
            &[x, gamma, beta],
        ))
    }

    /// Per-channel normalization over every axis but the last.
    ///
    /// With `running = None` batch statistics are used and returned; otherwise
    /// the given `(mean, var)` are applied as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let t = self.value(x);
        let c = t.last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", t.shape(), self.shape(gamma)));
        }
        let count = t.numel() / c;
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape("batch_norm", t.shape(), &[m.len()]));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                if count < 2 {
                    return Err(Error::contract(
                        "training-mode batch_norm needs at least 2 values per channel",
                    ));
                }
                let mut mean = vec![T::zero(); c];
                for row in t.data().chunks(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                let n = T::c(count as f64);
                mean.iter_mut().for_each(|m| *m = *m / n);
                let mut var = vec![T::zero(); c];
                for row in t.data().chunks(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                let unbiased = var.iter().map(|&s| s / T::c((count - 1) as f64)).collect();
                var.iter_mut().for_each(|s| *s = *s / n);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(c) {
            for ch in 0..c {
                out.push((row[ch] - mean[ch]) * rstd[ch] * g[ch] + b[ch]);
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        let batch_stats = stats.is_some();
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
                batch_stats,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    /// Grouped, dilated 2-D cross-correlation on `[B, H, W, C]` input with
    /// weights `[kh, kw, C_in / groups, C_out]`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || stride == 0 || dilation == 0 || groups == 0 {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let (batch, in_h, in_w, in_c) = (sx[0], sx[1], sx[2], sx[3]);
        let (kh, kw, cin_g, out_c) = (sw[0], sw[1], sw[2], sw[3]);
        if in_c % groups != 0 || out_c % groups != 0 || cin_g * groups != in_c {
            return Err(Error::shape("conv2d channels", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [out_c] {
                return Err(Error::shape("conv2d bias", &sw, self.shape(b)));
            }
        }
        let span_h = dilation * (kh - 1) + 1;
        let span_w = dilation * (kw - 1) + 1;
        if in_h + 2 * padding < span_h || in_w + 2 * padding < span_w {
            return Err(Error::contract(format!(
                "conv2d output would be empty for input {sx:?} and kernel {sw:?}"
            )));
        }
        let geom = ConvGeom {
            batch,
            in_h,
            in_w,
            in_c,
            out_h: (in_h + 2 * padding - span_h) / stride + 1,
            out_w: (in_w + 2 * padding - span_w) / stride + 1,
            out_c,
            kh,
            kw,
            stride,
            padding,
            dilation,
            groups,
        };
        let mut out = conv_forward(&geom, self.value(x).data(), self.value(w).data());
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(out_c) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let t = Tensor::new(&[batch, geom.out_h, geom.out_w, out_c], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Bilinear resampling of `[B, H, W, C]` to `[B, out_h, out_w, C]`.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize", &s, &[out_h, out_w]));
        }
        let rows = Arc::new(ResizeAxis::new(s[1], out_h));
        let cols = Arc::new(ResizeAxis::new(s[2], out_w));
        let out = resize_forward(self.value(x), &rows, &cols);
        Ok(self.push(out, Op::Resize { x, rows, cols }, &[x]))
    }

    /// Mean binary cross-entropy against a constant target, predictions
    /// clamped to `[clamp, 1 - clamp]`.
    pub fn bce(&mut self, pred: Var, target: Arc<Tensor<T>>, clamp: T) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape("bce", p.shape(), target.shape()));
        }
        let hi = T::one() - clamp;
        let total: T = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.max(clamp).min(hi);
                -(t * p.ln() + (T::one() - t) * (T::one() - p).ln())
            })
            .sum();
        let loss = total / T::c(p.numel() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                target,
                clamp,
            },
            &[pred],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::c(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
        f(slot);
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y)
                });
                self.accumulate(grads, *b, |gb| {
                    let period = gb.len();
                    for chunk in g.chunks(period) {
                        gb.iter_mut().zip(chunk).for_each(|(x, &y)| *x += sign * y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let period = vb.len();
                self.accumulate(grads, *a, |ga| {
                    for (gc, gchunk) in ga.chunks_mut(period).zip(g.chunks(period)) {
                        for ((x, &y), &bv) in gc.iter_mut().zip(gchunk).zip(vb) {
                            *x += y * bv;
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (achunk, gchunk) in va.chunks(period).zip(g.chunks(period)) {
                        for ((x, &y), &av) in gb.iter_mut().zip(gchunk).zip(achunk) {
                            *x += y * av;
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *s)
                });
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
                tb,
            } => {
                let (batch, m, k, n, tb) = (*batch, *m, *k, *n, *tb);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (rows, blocks) = if *shared_b { (batch * m, 1) } else { (m, batch) };
                // dA = dC * op(B)^T
                self.accumulate(grads, *a, |ga| {
                    for i in 0..blocks {
                        let gc = &g[i * rows * n..(i + 1) * rows * n];
                        let bb = &vb[i * k * n..(i + 1) * k * n];
                        let dst = &mut ga[i * rows * k..(i + 1) * rows * k];
                        gemm(rows, n, k, gc, false, bb, !tb, dst, true);
                    }
                });
                // dB = A^T * dC, or dC^T * A when B enters transposed
                self.accumulate(grads, *b, |gb| {
                    for i in 0..blocks {
                        let gc = &g[i * rows * n..(i + 1) * rows * n];
                        let aa = &va[i * rows * k..(i + 1) * rows * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if tb {
                            gemm(n, rows, k, gc, true, aa, false, dst, true);
                        } else {
                            gemm(k, rows, n, aa, true, gc, false, dst, true);
                        }
                    }
                });
            }
            Op::Gather { x, index, chunk } => {
                let chunk = *chunk;
                self.accumulate(grads, *x, |gx| {
                    for (o, &i) in index.iter().enumerate() {
                        let dst = &mut gx[i * chunk..(i + 1) * chunk];
                        dst.iter_mut()
                            .zip(&g[o * chunk..(o + 1) * chunk])
                            .for_each(|(d, &s)| *d += s);
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(x, &y)| *x += y)
                });
            }
            Op::Concat { a, b, ca, cb } => {
                let w = ca + cb;
                self.accumulate(grads, *a, |ga| {
                    for (dst, row) in ga.chunks_mut(*ca).zip(g.chunks(w)) {
                        dst.iter_mut().zip(&row[..*ca]).for_each(|(d, &s)| *d += s);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (dst, row) in gb.chunks_mut(*cb).zip(g.chunks(w)) {
                        dst.iter_mut().zip(&row[*ca..]).for_each(|(d, &s)| *d += s);
                    }
                });
            }
            Op::Act(x, kind) => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * act_derivative(*kind, xv[i], yv[i]);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let l = node.value.last_dim();
                self.accumulate(grads, *x, |gx| {
                    for ((gr, yr), dr) in gx.chunks_mut(l).zip(y.chunks(l)).zip(g.chunks(l)) {
                        let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        for q in 0..l {
                            gr[q] += yr[q] * (dr[q] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
            } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let c = gv.len();
                let cn = T::c(c as f64);
                let xhat_row = |r: usize| {
                    let row = &xv[r * c..(r + 1) * c];
                    let mean = row.iter().copied().sum::<T>() / cn;
                    row.iter().map(move |&v| (v - mean) * rstd[r])
                };
                self.accumulate(grads, *gamma, |gg| {
                    for r in 0..rstd.len() {
                        for ((dst, xh), &d) in gg.iter_mut().zip(xhat_row(r)).zip(&g[r * c..]) {
                            *dst += d * xh;
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let mut xh = vec![T::zero(); c];
                    let mut dxh = vec![T::zero(); c];
                    for r in 0..rstd.len() {
                        for (slot, v) in xh.iter_mut().zip(xhat_row(r)) {
                            *slot = v;
                        }
                        for i in 0..c {
                            dxh[i] = g[r * c + i] * gv[i];
                        }
                        let m1 = dxh.iter().copied().sum::<T>() / cn;
                        let m2 = dxh.iter().zip(&xh).map(|(&a, &b)| a * b).sum::<T>() / cn;
                        for i in 0..c {
                            gx[r * c + i] += rstd[r] * (dxh[i] - m1 - xh[i] * m2);
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
                batch_stats,
            } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let c = gv.len();
                let count = xv.len() / c;
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xh = vec![T::zero(); c];
                for (xr, gr) in xv.chunks(c).zip(g.chunks(c)) {
                    for ch in 0..c {
                        let xh = (xr[ch] - mean[ch]) * rstd[ch];
                        sum_dy[ch] += gr[ch];
                        sum_dy_xh[ch] += gr[ch] * xh;
                    }
                }
                self.accumulate(grads, *gamma, |gg| {
                    gg.iter_mut().zip(&sum_dy_xh).for_each(|(d, &s)| *d += s)
                });
                self.accumulate(grads, *beta, |gb| {
                    gb.iter_mut().zip(&sum_dy).for_each(|(d, &s)| *d += s)
                });
                self.accumulate(grads, *x, |gx| {
                    let n = T::c(count as f64);
                    for ((dst, xr), gr) in gx.chunks_mut(c).zip(xv.chunks(c)).zip(g.chunks(c)) {
                        for ch in 0..c {
                            let scale = gv[ch] * rstd[ch];
                            if *batch_stats {
                                let xh = (xr[ch] - mean[ch]) * rstd[ch];
                                dst[ch] += scale
                                    * (gr[ch] - sum_dy[ch] / n - xh * sum_dy_xh[ch] / n);
                            } else {
                                dst[ch] += scale * gr[ch];
                            }
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if let Some(b) = b {
                    self.accumulate(grads, *b, |gb| {
                        for row in g.chunks(geom.out_c) {
                            gb.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                        }
                    });
                }
                self.accumulate(grads, *w, |gw| conv_backward_weight(geom, xv, g, gw));
                self.accumulate(grads, *x, |gx| conv_backward_input(geom, wv, g, gx));
            }
            Op::Resize { x, rows, cols } => {
                let s = self.shape(*x).to_vec();
                self.accumulate(grads, *x, |gx| resize_backward(&s, rows, cols, g, gx));
            }
            Op::Bce {
                pred,
                target,
                clamp,
            } => {
                let p = self.value(*pred).data();
                let n = T::c(p.len() as f64);
                let hi = T::one() - *clamp;
                self.accumulate(grads, *pred, |gp| {
                    for ((d, &pv), &tv) in gp.iter_mut().zip(p).zip(target.data()) {
                        if pv > *clamp && pv < hi {
                            *d += g[0] * (pv - tv) / (pv * (T::one() - pv)) / n;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(x) => {
                let n = T::c(self.value(*x).numel() as f64);
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|d| *d += g[0] / n));
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

#[inline]
fn act_forward<T: Scalar>(kind: Activation, v: T) -> T {
    match kind {
        Activation::Relu => v.max(T::zero()),
        Activation::Sigmoid => T::one() / (T::one() + (-v).exp()),
        Activation::Gelu => {
            let inner = T::c(GELU_K) * (v + T::c(GELU_C) * v * v * v);
            T::c(0.5) * v * (T::one() + inner.tanh())
        }
    }
}

#[inline]
fn act_derivative<T: Scalar>(kind: Activation, x: T, y: T) -> T {
    match kind {
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Sigmoid => y * (T::one() - y),
        Activation::Gelu => {
            let inner = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
            let t = inner.tanh();
            let dinner = T::c(GELU_K) * (T::one() + T::c(3.0 * GELU_C) * x * x);
            T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * dinner
        }
    }
}

/// Input coordinate for output position `o` and kernel tap `k`, if in bounds.
#[inline]
fn tap(o: usize, k: usize, geom: &ConvGeom, extent: usize) -> Option<usize> {
    let pos = (o * geom.stride + k * geom.dilation) as isize - geom.padding as isize;
    (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
}

fn im2col<T: Scalar>(geom: &ConvGeom, x: &[T]) -> Vec<T> {
    let cols_w = geom.kh * geom.kw * geom.in_c;
    let mut cols = vec![T::zero(); geom.batch * geom.out_h * geom.out_w * cols_w];
    let mut r = 0;
    for b in 0..geom.batch {
        for oh in 0..geom.out_h {
            for ow in 0..geom.out_w {
                let row = &mut cols[r * cols_w..(r + 1) * cols_w];
                for i in 0..geom.kh {
                    let Some(ih) = tap(oh, i, geom, geom.in_h) else { continue };
                    for j in 0..geom.kw {
                        let Some(iw) = tap(ow, j, geom, geom.in_w) else { continue };
                        let src = ((b * geom.in_h + ih) * geom.in_w + iw) * geom.in_c;
                        let dst = (i * geom.kw + j) * geom.in_c;
                        row[dst..dst + geom.in_c].copy_from_slice(&x[src..src + geom.in_c]);
                    }
                }
                r += 1;
            }
        }
    }
    cols
}

fn conv_forward<T: Scalar>(geom: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let rows = geom.batch * geom.out_h * geom.out_w;
    let mut out = vec![T::zero(); rows * geom.out_c];
    if geom.groups == 1 {
        let cols = im2col(geom, x);
        gemm(rows, geom.kh * geom.kw * geom.in_c, geom.out_c, &cols, false, w, false, &mut out, false);
        return out;
    }
    let cin_g = geom.in_c / geom.groups;
    let cout_g = geom.out_c / geom.groups;
    let mut r = 0;
    for b in 0..geom.batch {
        for oh in 0..geom.out_h {
            for ow in 0..geom.out_w {
                let o = &mut out[r * geom.out_c..(r + 1) * geom.out_c];
                for i in 0..geom.kh {
                    let Some(ih) = tap(oh, i, geom, geom.in_h) else { continue };
                    for j in 0..geom.kw {
                        let Some(iw) = tap(ow, j, geom, geom.in_w) else { continue };
                        let src = ((b * geom.in_h + ih) * geom.in_w + iw) * geom.in_c;
                        let xs = &x[src..src + geom.in_c];
                        let wk = &w[(i * geom.kw + j) * cin_g * geom.out_c..];
                        if cin_g == 1 && cout_g == 1 {
                            for ((ov, &xv), &wv) in o.iter_mut().zip(xs).zip(wk) {
                                *ov += xv * wv;
                            }
                            continue;
                        }
                        for grp in 0..geom.groups {
                            for ci in 0..cin_g {
                                let xv = xs[grp * cin_g + ci];
                                let wrow = &wk[ci * geom.out_c + grp * cout_g..];
                                for co in 0..cout_g {
                                    o[grp * cout_g + co] += xv * wrow[co];
                                }
                            }
                        }
                    }
                }
                r += 1;
            }
        }
    }
    out
}

fn conv_backward_weight<T: Scalar>(geom: &ConvGeom, x: &[T], g: &[T], gw: &mut [T]) {
    let rows = geom.batch * geom.out_h * geom.out_w;
    if geom.groups == 1 {
        let cols = im2col(geom, x);
        gemm(geom.kh * geom.kw * geom.in_c, rows, geom.out_c, &cols, true, g, false, gw, true);
        return;
    }
    let cin_g = geom.in_c / geom.groups;
    let cout_g = geom.out_c / geom.groups;
    let mut r = 0;
    for b in 0..geom.batch {
        for oh in 0..geom.out_h {
            for ow in 0..geom.out_w {
                let go = &g[r * geom.out_c..(r + 1) * geom.out_c];
                for i in 0..geom.kh {
                    let Some(ih) = tap(oh, i, geom, geom.in_h) else { continue };
                    for j in 0..geom.kw {
                        let Some(iw) = tap(ow, j, geom, geom.in_w) else { continue };
                        let src = ((b * geom.in_h + ih) * geom.in_w + iw) * geom.in_c;
                        let xs = &x[src..src + geom.in_c];
                        let base = (i * geom.kw + j) * cin_g * geom.out_c;
                        if cin_g == 1 && cout_g == 1 {
                            let wk = &mut gw[base..base + geom.out_c];
                            for ((wv, &xv), &gv) in wk.iter_mut().zip(xs).zip(go) {
                                *wv += xv * gv;
                            }
                            continue;
                        }
                        for grp in 0..geom.groups {
                            for ci in 0..cin_g {
                                let xv = xs[grp * cin_g + ci];
                                let off = base + ci * geom.out_c + grp * cout_g;
                                for co in 0..cout_g {
                                    gw[off + co] += xv * go[grp * cout_g + co];
                                }
                            }
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

fn conv_backward_input<T: Scalar>(geom: &ConvGeom, w: &[T], g: &[T], gx: &mut [T]) {
    let rows = geom.batch * geom.out_h * geom.out_w;
    let cin_g = geom.in_c / geom.groups;
    let cout_g = geom.out_c / geom.groups;
    let cols_w = geom.kh * geom.kw * geom.in_c;
    let dcols = if geom.groups == 1 {
        let mut d = vec![T::zero(); rows * cols_w];
        gemm(rows, geom.out_c, cols_w, g, false, w, true, &mut d, false);
        Some(d)
    } else {
        None
    };
    let mut r = 0;
    for b in 0..geom.batch {
        for oh in 0..geom.out_h {
            for ow in 0..geom.out_w {
                let go = &g[r * geom.out_c..(r + 1) * geom.out_c];
                for i in 0..geom.kh {
                    let Some(ih) = tap(oh, i, geom, geom.in_h) else { continue };
                    for j in 0..geom.kw {
                        let Some(iw) = tap(ow, j, geom, geom.in_w) else { continue };
                        let dst = ((b * geom.in_h + ih) * geom.in_w + iw) * geom.in_c;
                        let xs = &mut gx[dst..dst + geom.in_c];
                        if let Some(d) = &dcols {
                            let src = r * cols_w + (i * geom.kw + j) * geom.in_c;
                            xs.iter_mut()
                                .zip(&d[src..src + geom.in_c])
                                .for_each(|(a, &v)| *a += v);
                            continue;
                        }
                        let wk = &w[(i * geom.kw + j) * cin_g * geom.out_c..];
                        if cin_g == 1 && cout_g == 1 {
                            for ((xv, &wv), &gv) in xs.iter_mut().zip(wk).zip(go) {
                                *xv += wv * gv;
                            }
                            continue;
                        }
                        for grp in 0..geom.groups {
                            for ci in 0..cin_g {
                                let wrow = &wk[ci * geom.out_c + grp * cout_g..];
                                let mut acc = T::zero();
                                for co in 0..cout_g {
                                    acc += wrow[co] * go[grp * cout_g + co];
                                }
                                xs[grp * cin_g + ci] += acc;
                            }
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

fn resize_forward<T: Scalar>(x: &Tensor<T>, rows: &ResizeAxis<T>, cols: &ResizeAxis<T>) -> Tensor<T> {
    let s = x.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (rows.taps.len(), cols.taps.len());
    let d = x.data();
    let mut out = vec![T::zero(); b * oh * ow * c];
    for bi in 0..b {
        for (r, &(r0, r1, wr0, wr1)) in rows.taps.iter().enumerate() {
            for (q, &(c0, c1, wc0, wc1)) in cols.taps.iter().enumerate() {
                let o = ((bi * oh + r) * ow + q) * c;
                let at = |i: usize, j: usize| ((bi * h + i) * w + j) * c;
                let corners = [
                    (at(r0, c0), wr0 * wc0),
                    (at(r0, c1), wr0 * wc1),
                    (at(r1, c0), wr1 * wc0),
                    (at(r1, c1), wr1 * wc1),
                ];
                let dst = &mut out[o..o + c];
                for (src, wt) in corners {
                    if wt == T::zero() {
                        continue;
                    }
                    dst.iter_mut()
                        .zip(&d[src..src + c])
                        .for_each(|(a, &v)| *a += wt * v);
                }
            }
        }
    }
    Tensor::new(&[b, oh, ow, c], out).expect("resize shape")
}

fn resize_backward<T: Scalar>(
    s: &[usize],
    rows: &ResizeAxis<T>,
    cols: &ResizeAxis<T>,
    g: &[T],
    gx: &mut [T],
) {
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (rows.taps.len(), cols.taps.len());
    for bi in 0..b {
        for (r, &(r0, r1, wr0, wr1)) in rows.taps.iter().enumerate() {
            for (q, &(c0, c1, wc0, wc1)) in cols.taps.iter().enumerate() {
                let o = ((bi * oh + r) * ow + q) * c;
                let at = |i: usize, j: usize| ((bi * h + i) * w + j) * c;
                let corners = [
                    (at(r0, c0), wr0 * wc0),
                    (at(r0, c1), wr0 * wc1),
                    (at(r1, c0), wr1 * wc0),
                    (at(r1, c1), wr1 * wc1),
                ];
                for (dst, wt) in corners {
                    if wt == T::zero() {
                        continue;
                    }
                    gx[dst..dst + c]
                        .iter_mut()
                        .zip(&g[o..o + c])
                        .for_each(|(a, &v)| *a += wt * v);
                }
            }
        }
    }
}

//! Reverse-mode differentiation tape and the differentiable operations.
//!
//! A [`Tape`] records every operation in execution order together with the
//! values its backward pass needs. Nodes only ever refer to earlier nodes,
//! so a single reverse sweep visits them in topological order.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

use super::gemm::{gemm, parallel_enabled};
use super::{ParamId, ParamSet, Scalar, Tensor};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Batch-norm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Softmax followed by cross-entropy against row-normalized targets.
    SoftmaxCe,
    /// Mean binary cross-entropy on per-class sigmoids.
    SigmoidBce,
}

/// Handle to a node on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Running statistics a batch-norm layer reads (eval) or updates (train).
pub struct BnStats<'a, T> {
    pub mean: &'a mut [T],
    pub var: &'a mut [T],
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv1d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: usize,
    },
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    Concat {
        parts: Vec<usize>,
    },
    Slice {
        x: usize,
        start: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
    Loss {
        logits: usize,
        dlogits: Vec<T>,
    },
    Sum {
        x: usize,
    },
    Square {
        x: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients of a scalar with respect to every node that requires them.
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn for_rows<T: Send, F>(data: &mut [T], row: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if row == 0 {
        return;
    }
    if parallel_enabled() && data.len() >= 1 << 14 {
        data.par_chunks_mut(row).enumerate().for_each(|(i, r)| f(i, r));
    } else {
        data.chunks_mut(row).enumerate().for_each(|(i, r)| f(i, r));
    }
}

fn shape_err(msg: String) -> Error {
    Error::ShapeMismatch(msg)
}

fn conv_out_len(l: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || k == 0 || k > l + 2 * pad {
        None
    } else {
        Some((l + 2 * pad - k) / stride + 1)
    }
}

/// Unfolds `x (n, c, l)` into `(c*k, n*lo)` columns.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    l: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lo: usize,
) -> Vec<T> {
    let width = n * lo;
    let mut cols = vec![T::zero(); c * k * width];
    for_rows(&mut cols, width, |row, out| {
        let (ci, kk) = (row / k, row % k);
        for ni in 0..n {
            let xs = &x[(ni * c + ci) * l..(ni * c + ci + 1) * l];
            let dst = &mut out[ni * lo..(ni + 1) * lo];
            for (o, d) in dst.iter_mut().enumerate() {
                let j = (o * stride + kk) as isize - pad as isize;
                if j >= 0 && (j as usize) < l {
                    *d = xs[j as usize];
                }
            }
        }
    });
    cols
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::DetachedLoss(format!("variable {v:?} does not belong to this tape")));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        #[cfg(debug_assertions)]
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var { tape: self.id, index }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v).expect("foreign variable")].value
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Places a parameter on the tape; its gradient flows back into `params`.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        let var = self.push(params.value(id).clone(), Op::Leaf, params.is_trainable(id));
        self.nodes[var.index].param = Some(id);
        var
    }

    /// 1-D cross-correlation with zero padding.
    ///
    /// `x: (N, C_in, L)`, `w: (C_out, C_in, K)`, `b: (C_out)`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let xs = self.nodes[xi].value.shape().to_vec();
        let ws = self.nodes[wi].value.shape().to_vec();
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(shape_err(format!("conv1d input {xs:?} vs weight {ws:?}")));
        }
        let (n, c, l) = (xs[0], xs[1], xs[2]);
        let (co, k) = (ws[0], ws[2]);
        if let Some(bi) = bi {
            if self.nodes[bi].value.shape() != [co] {
                return Err(shape_err(format!(
                    "conv1d bias {:?} for {co} output channels",
                    self.nodes[bi].value.shape()
                )));
            }
        }
        let lo = conv_out_len(l, k, stride, pad).ok_or_else(|| {
            shape_err(format!("conv1d kernel {k} stride {stride} pad {pad} on length {l}"))
        })?;

        let ck = c * k;
        let width = n * lo;
        let cols = im2col(self.nodes[xi].value.data(), n, c, l, k, stride, pad, lo);
        let mut tmp = vec![T::zero(); co * width];
        gemm(co, ck, width, self.nodes[wi].value.data(), (ck, 1), &cols, (width, 1), T::zero(), &mut tmp);

        let bias = bi.map(|bi| self.nodes[bi].value.data().to_vec());
        let mut out = vec![T::zero(); n * co * lo];
        for_rows(&mut out, lo, |row, dst| {
            let (ni, ci) = (row / co, row % co);
            let src = &tmp[ci * width + ni * lo..ci * width + (ni + 1) * lo];
            let bv = bias.as_ref().map_or(T::zero(), |b| b[ci]);
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bv;
            }
        });
        let rg = self.rg(xi) || self.rg(wi) || bi.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(vec![n, co, lo], out)?,
            Op::Conv1d {
                x: xi,
                w: wi,
                b: bi,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Per-channel batch normalization over `(N, L)`.
    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_, T>,
        mode: Mode,
    ) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let xs = self.nodes[xi].value.shape().to_vec();
        if xs.len() != 3 {
            return Err(shape_err(format!("batchnorm1d expects (N, C, L), got {xs:?}")));
        }
        let (n, c, l) = (xs[0], xs[1], xs[2]);
        for (what, len) in [
            ("gamma", self.nodes[gi].value.numel()),
            ("beta", self.nodes[bi].value.numel()),
            ("running mean", stats.mean.len()),
            ("running var", stats.var.len()),
        ] {
            if len != c {
                return Err(shape_err(format!("batchnorm1d {what} has {len} values for {c} channels")));
            }
        }
        let m = n * l;
        let batch_stats = mode == Mode::Train;
        if batch_stats && m <= 1 {
            return Err(shape_err(format!(
                "batch statistics need more than one value per channel, got N*L = {m}"
            )));
        }

        let eps = T::of(BN_EPS);
        let momentum = T::of(BN_MOMENTUM);
        let xv = self.nodes[xi].value.data();
        let mut mean = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let (mu, var) = if batch_stats {
                let mut sum = T::zero();
                for ni in 0..n {
                    sum += xv[(ni * c + ch) * l..(ni * c + ch + 1) * l].iter().copied().sum::<T>();
                }
                let mu = sum / T::of(m as f64);
                let mut sq = T::zero();
                for ni in 0..n {
                    for &v in &xv[(ni * c + ch) * l..(ni * c + ch + 1) * l] {
                        sq += (v - mu) * (v - mu);
                    }
                }
                let var = sq / T::of(m as f64);
                let unbiased = sq / T::of((m - 1) as f64);
                stats.mean[ch] = (T::one() - momentum) * stats.mean[ch] + momentum * mu;
                stats.var[ch] = (T::one() - momentum) * stats.var[ch] + momentum * unbiased;
                (mu, var)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            mean[ch] = mu;
            inv_std[ch] = T::one() / (var + eps).sqrt();
        }

        let gv = self.nodes[gi].value.data();
        let bv = self.nodes[bi].value.data();
        let mut xhat = vec![T::zero(); n * c * l];
        let mut out = vec![T::zero(); n * c * l];
        for row in 0..n * c {
            let ch = row % c;
            for j in row * l..(row + 1) * l {
                let h = (xv[j] - mean[ch]) * inv_std[ch];
                xhat[j] = h;
                out[j] = gv[ch] * h + bv[ch];
            }
        }
        let rg = self.rg(xi) || self.rg(gi) || self.rg(bi);
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = &self.nodes[xi].value;
        let out: Vec<T> = v.data().iter().map(|&a| a.max(T::zero())).collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(xi);
        Ok(self.push(t, Op::Relu { x: xi }, rg))
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape() != bv.shape() {
            return Err(shape_err(format!("add {:?} + {:?}", av.shape(), bv.shape())));
        }
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(t, Op::Add { a: ai, b: bi }, rg))
    }

    /// Max pooling over the last axis; padded positions never win.
    pub fn maxpool1d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let xs = self.nodes[xi].value.shape().to_vec();
        if xs.len() != 3 || pad >= kernel.max(1) {
            return Err(shape_err(format!("maxpool1d on {xs:?} with kernel {kernel} pad {pad}")));
        }
        let (n, c, l) = (xs[0], xs[1], xs[2]);
        let lo = conv_out_len(l, kernel, stride, pad)
            .ok_or_else(|| shape_err(format!("maxpool1d kernel {kernel} on length {l}")))?;
        let xv = self.nodes[xi].value.data();
        let mut out = Vec::with_capacity(n * c * lo);
        let mut argmax = Vec::with_capacity(n * c * lo);
        for row in 0..n * c {
            let base = row * l;
            for o in 0..lo {
                let start = (o * stride) as isize - pad as isize;
                let lo_j = start.max(0) as usize;
                let hi_j = ((start + kernel as isize) as usize).min(l);
                let mut best = lo_j;
                for j in lo_j + 1..hi_j {
                    if xv[base + j] > xv[base + best] {
                        best = j;
                    }
                }
                out.push(xv[base + best]);
                argmax.push(base + best);
            }
        }
        let rg = self.rg(xi);
        Ok(self.push(Tensor::new(vec![n, c, lo], out)?, Op::MaxPool { x: xi, argmax }, rg))
    }

    /// `(N, C, L) -> (N, C)` mean over the last axis.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let xs = self.nodes[xi].value.shape().to_vec();
        if xs.len() != 3 || xs[2] == 0 {
            return Err(shape_err(format!("global_avg_pool expects (N, C, L), got {xs:?}")));
        }
        let l = xs[2];
        let inv = T::one() / T::of(l as f64);
        let out = self.nodes[xi]
            .value
            .data()
            .chunks(l)
            .map(|r| r.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(xi);
        Ok(self.push(Tensor::new(vec![xs[0], xs[1]], out)?, Op::GlobalAvgPool { x: xi }, rg))
    }

    /// Affine map `x W^T + b` with `x: (N, in)`, `w: (out, in)`, `b: (out)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let xs = self.nodes[xi].value.shape().to_vec();
        let ws = self.nodes[wi].value.shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.nodes[bi].value.shape() != [ws[0]] {
            return Err(shape_err(format!(
                "dense input {xs:?}, weight {ws:?}, bias {:?}",
                self.nodes[bi].value.shape()
            )));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = Vec::with_capacity(n * fout);
        for _ in 0..n {
            out.extend_from_slice(self.nodes[bi].value.data());
        }
        gemm(
            n,
            fin,
            fout,
            self.nodes[xi].value.data(),
            (fin, 1),
            self.nodes[wi].value.data(),
            (1, fin),
            T::one(),
            &mut out,
        );
        let rg = self.rg(xi) || self.rg(wi) || self.rg(bi);
        Ok(self.push(Tensor::new(vec![n, fout], out)?, Op::Dense { x: xi, w: wi, b: bi }, rg))
    }

    /// Joins tensors along axis 1; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat of nothing".into()));
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let first = self.nodes[idx[0]].value.shape().to_vec();
        if first.len() < 2 {
            return Err(shape_err(format!("concat needs rank >= 2, got {first:?}")));
        }
        let inner: usize = first[2..].iter().product();
        let mut channels = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(shape_err(format!("concat {first:?} with {s:?}")));
            }
            channels += s[1];
        }
        let n = first[0];
        let mut out = Vec::with_capacity(n * channels * inner);
        for ni in 0..n {
            for &i in &idx {
                let v = &self.nodes[i].value;
                let block = v.dim(1) * inner;
                out.extend_from_slice(&v.data()[ni * block..(ni + 1) * block]);
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { parts: idx }, rg))
    }

    /// Channels `start..start + len` along axis 1.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let xs = self.nodes[xi].value.shape().to_vec();
        if xs.len() < 2 || start + len > xs[1] {
            return Err(shape_err(format!("slice {start}..{} of {xs:?}", start + len)));
        }
        let inner: usize = xs[2..].iter().product();
        let v = self.nodes[xi].value.data();
        let mut out = Vec::with_capacity(xs[0] * len * inner);
        for ni in 0..xs[0] {
            let base = (ni * xs[1] + start) * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = xs.clone();
        shape[1] = len;
        let rg = self.rg(xi);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x: xi, start }, rg))
    }

    /// Inverted spatial dropout: whole `(n, c)` channels are zeroed with
    /// probability `rate` and survivors scaled by `1 / (1 - rate)`.
    /// Identity in eval mode or at rate 0.
    pub fn spatial_dropout<R: Rng>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidRate(format!("dropout rate {rate} outside [0, 1)")));
        }
        let xi = self.idx(x)?;
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let xs = self.nodes[xi].value.shape().to_vec();
        if xs.len() != 3 {
            return Err(shape_err(format!("spatial_dropout expects (N, C, L), got {xs:?}")));
        }
        let l = xs[2];
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..xs[0] * xs[1])
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out = self.nodes[xi]
            .value
            .data()
            .chunks(l)
            .zip(&mask)
            .flat_map(|(r, &m)| r.iter().map(move |&v| v * m))
            .collect();
        let rg = self.rg(xi);
        Ok(self.push(Tensor::new(xs, out)?, Op::Dropout { x: xi, mask }, rg))
    }

    /// Scalar classification loss of `logits (N, C)` against `targets (N, C)`.
    pub fn loss(&mut self, logits: Var, targets: &Tensor<T>, kind: LossKind) -> Result<Var> {
        let li = self.idx(logits)?;
        let ls = self.nodes[li].value.shape().to_vec();
        if ls.len() != 2 || targets.shape() != ls.as_slice() {
            return Err(shape_err(format!("logits {ls:?} vs targets {:?}", targets.shape())));
        }
        let (n, c) = (ls[0], ls[1]);
        let z = self.nodes[li].value.data();
        let t = targets.data();
        let mut dlogits = vec![T::zero(); n * c];
        let mut total = 0.0f64;
        match kind {
            LossKind::SoftmaxCe => {
                for r in 0..n {
                    let zr = &z[r * c..(r + 1) * c];
                    let tr = &t[r * c..(r + 1) * c];
                    let tsum: T = tr.iter().copied().sum();
                    if !(tsum > T::zero()) {
                        return Err(Error::EmptyTarget(r));
                    }
                    let max = zr.iter().copied().fold(T::neg_infinity(), T::max);
                    let sum_exp: T = zr.iter().map(|&v| (v - max).exp()).sum();
                    let lse = max + sum_exp.ln();
                    let inv_n = T::one() / T::of(n as f64);
                    for j in 0..c {
                        let th = tr[j] / tsum;
                        total += (th * (lse - zr[j])).as_f64();
                        let p = (zr[j] - lse).exp();
                        dlogits[r * c + j] = (p - th) * inv_n;
                    }
                }
                total /= n as f64;
            }
            LossKind::SigmoidBce => {
                let inv = T::one() / T::of((n * c) as f64);
                for i in 0..n * c {
                    let (zi, ti) = (z[i], t[i]);
                    let l = zi.max(T::zero()) - zi * ti + (T::one() + (-zi.abs()).exp()).ln();
                    total += l.as_f64();
                    let sig = T::one() / (T::one() + (-zi).exp());
                    dlogits[i] = (sig - ti) * inv;
                }
                total /= (n * c) as f64;
            }
        }
        let rg = self.rg(li);
        Ok(self.push(Tensor::scalar(T::of(total)), Op::Loss { logits: li, dlogits }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s: T = self.nodes[xi].value.data().iter().copied().sum();
        let rg = self.rg(xi);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x: xi }, rg))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = &self.nodes[xi].value;
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a * a).collect())?;
        let rg = self.rg(xi);
        Ok(self.push(t, Op::Square { x: xi }, rg))
    }

    /// Reverse sweep from a scalar, returning gradients for every node that
    /// requires them.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(Error::DetachedLoss("loss was not recorded on this tape".into()));
        }
        let root = &self.nodes[loss.index];
        if root.value.numel() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::DetachedLoss("loss does not depend on any trainable input".into()));
        }

        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.index).map(|_| None).collect();
        grads[loss.index] = Some(vec![T::one()]);
        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    /// Accumulates d(loss)/d(theta) into `params` for every parameter used.
    pub fn backward(&self, loss: Var, params: &mut ParamSet<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                params.accumulate_grad(id, g);
            }
        }
        Ok(())
    }

    fn accum<'g>(&self, grads: &'g mut [Option<Vec<T>>], i: usize) -> Option<&'g mut Vec<T>> {
        if !self.nodes[i].requires_grad {
            return None;
        }
        let n = self.nodes[i].value.numel();
        Some(grads[i].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, stride, pad } => self.backward_conv(*x, *w, *b, *stride, *pad, g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = self.nodes[*x].value.shape();
                let (n, c, l) = (s[0], s[1], s[2]);
                let gv = self.nodes[*gamma].value.data();
                let m = T::of((n * l) as f64);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut sum_dxhat = vec![T::zero(); c];
                let mut sum_dxhat_xhat = vec![T::zero(); c];
                for row in 0..n * c {
                    let ch = row % c;
                    for j in row * l..(row + 1) * l {
                        dgamma[ch] += g[j] * xhat[j];
                        dbeta[ch] += g[j];
                        let dxh = g[j] * gv[ch];
                        sum_dxhat[ch] += dxh;
                        sum_dxhat_xhat[ch] += dxh * xhat[j];
                    }
                }
                if let Some(dx) = self.accum(grads, *x) {
                    for row in 0..n * c {
                        let ch = row % c;
                        for j in row * l..(row + 1) * l {
                            let dxh = g[j] * gv[ch];
                            dx[j] += if *batch_stats {
                                inv_std[ch] / m
                                    * (m * dxh - sum_dxhat[ch] - xhat[j] * sum_dxhat_xhat[ch])
                            } else {
                                dxh * inv_std[ch]
                            };
                        }
                    }
                }
                if let Some(dg) = self.accum(grads, *gamma) {
                    dg.iter_mut().zip(&dgamma).for_each(|(a, &b)| *a += b);
                }
                if let Some(db) = self.accum(grads, *beta) {
                    db.iter_mut().zip(&dbeta).for_each(|(a, &b)| *a += b);
                }
            }
            Op::Relu { x } => {
                let xv = self.nodes[*x].value.data();
                if let Some(dx) = self.accum(grads, *x) {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        if xi > T::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for t in [*a, *b] {
                    if let Some(d) = self.accum(grads, t) {
                        d.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(dx) = self.accum(grads, *x) {
                    for (&j, &gi) in argmax.iter().zip(g) {
                        dx[j] += gi;
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                let l = self.nodes[*x].value.dim(2);
                let inv = T::one() / T::of(l as f64);
                if let Some(dx) = self.accum(grads, *x) {
                    for (row, &gi) in dx.chunks_mut(l).zip(g) {
                        row.iter_mut().for_each(|d| *d += gi * inv);
                    }
                }
            }
            Op::Dense { x, w, b } => {
                let s = self.nodes[*x].value.shape();
                let (n, fin) = (s[0], s[1]);
                let fout = self.nodes[*w].value.dim(0);
                if let Some(dx) = self.accum(grads, *x) {
                    gemm(n, fout, fin, g, (fout, 1), self.nodes[*w].value.data(), (fin, 1), T::one(), dx);
                }
                if let Some(dw) = self.accum(grads, *w) {
                    gemm(fout, n, fin, g, (1, fout), self.nodes[*x].value.data(), (fin, 1), T::one(), dw);
                }
                if let Some(db) = self.accum(grads, *b) {
                    for r in g.chunks(fout) {
                        db.iter_mut().zip(r).for_each(|(d, &gi)| *d += gi);
                    }
                }
            }
            Op::Concat { parts } => {
                let s = node.value.shape();
                let inner: usize = s[2..].iter().product();
                let total = s[1] * inner;
                let mut offset = 0;
                for &p in parts {
                    let block = self.nodes[p].value.dim(1) * inner;
                    if let Some(dp) = self.accum(grads, p) {
                        for ni in 0..s[0] {
                            let src = &g[ni * total + offset..ni * total + offset + block];
                            dp[ni * block..(ni + 1) * block]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &gi)| *d += gi);
                        }
                    }
                    offset += block;
                }
            }
            Op::Slice { x, start } => {
                let xs = self.nodes[*x].value.shape();
                let inner: usize = xs[2..].iter().product();
                let len = node.value.dim(1);
                if let Some(dx) = self.accum(grads, *x) {
                    for ni in 0..xs[0] {
                        let base = (ni * xs[1] + start) * inner;
                        dx[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[ni * len * inner..(ni + 1) * len * inner])
                            .for_each(|(d, &gi)| *d += gi);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let l = self.nodes[*x].value.dim(2);
                if let Some(dx) = self.accum(grads, *x) {
                    for ((row, gr), &m) in dx.chunks_mut(l).zip(g.chunks(l)).zip(mask) {
                        row.iter_mut().zip(gr).for_each(|(d, &gi)| *d += gi * m);
                    }
                }
            }
            Op::Loss { logits, dlogits } => {
                if let Some(d) = self.accum(grads, *logits) {
                    d.iter_mut().zip(dlogits).for_each(|(d, &v)| *d += v * g[0]);
                }
            }
            Op::Sum { x } => {
                if let Some(d) = self.accum(grads, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Square { x } => {
                let xv = self.nodes[*x].value.data();
                if let Some(d) = self.accum(grads, *x) {
                    for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(xv) {
                        *d += gi * (xi + xi);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv(
        &self,
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let xs = self.nodes[x].value.shape();
        let (n, c, l) = (xs[0], xs[1], xs[2]);
        let ws = self.nodes[w].value.shape();
        let (co, k) = (ws[0], ws[2]);
        let lo = conv_out_len(l, k, stride, pad).expect("validated in forward");
        let (ck, width) = (c * k, n * lo);

        // dy (N, Co, Lo) -> (Co, N*Lo)
        let mut gp = vec![T::zero(); co * width];
        for_rows(&mut gp, width, |ci, dst| {
            for ni in 0..n {
                let src = &g[(ni * co + ci) * lo..(ni * co + ci + 1) * lo];
                dst[ni * lo..(ni + 1) * lo].copy_from_slice(src);
            }
        });

        if let Some(b) = b {
            if let Some(db) = self.accum(grads, b) {
                for (d, row) in db.iter_mut().zip(gp.chunks(width)) {
                    *d += row.iter().copied().sum::<T>();
                }
            }
        }
        if self.rg(w) {
            let cols = im2col(self.nodes[x].value.data(), n, c, l, k, stride, pad, lo);
            let dw = self.accum(grads, w).expect("requires grad");
            gemm(co, width, ck, &gp, (width, 1), &cols, (1, width), T::one(), dw);
        }
        if self.rg(x) {
            let mut dcols = vec![T::zero(); ck * width];
            gemm(ck, co, width, self.nodes[w].value.data(), (1, ck), &gp, (width, 1), T::zero(), &mut dcols);
            let dx = self.accum(grads, x).expect("requires grad");
            for_rows(dx, l, |row, dst| {
                let (ni, ci) = (row / c, row % c);
                for kk in 0..k {
                    let src = &dcols[(ci * k + kk) * width + ni * lo..(ci * k + kk) * width + (ni + 1) * lo];
                    for (o, &v) in src.iter().enumerate() {
                        let j = (o * stride + kk) as isize - pad as isize;
                        if j >= 0 && (j as usize) < l {
                            dst[j as usize] += v;
                        }
                    }
                }
            });
        }
    }
}

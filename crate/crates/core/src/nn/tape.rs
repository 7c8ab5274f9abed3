//! Reverse-mode automatic differentiation over a linear tape of tensor ops.
//!
//! A [`Tape`] borrows the parameter set it differentiates against; parameter
//! leaves read their values from it without copying. Every op records just
//! enough to run its adjoint, and [`Tape::backward`] accumulates gradients
//! into a buffer aligned with the parameter set.

use super::kernels;
use super::{ParamId, ParamSet, Scalar, Tensor};

/// Spatial size from which conv weight gradients use [`kernels::dot_rows`]
/// when no BLAS is linked.
const DOT_ROWS_MIN_HW: usize = 1024;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        ks: usize,
        col: Option<Vec<T>>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    AddChannel {
        x: Var,
        v: Var,
    },
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: T,
    },
    Silu {
        x: Var,
        sig: Vec<T>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Mse {
        x: Var,
        diff: Vec<T>,
    },
    L1 {
        x: Var,
        sign: Vec<T>,
    },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    needs_grad: bool,
}

pub struct Tape<'p, T: Scalar> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<'p, T: Scalar> Tape<'p, T> {
    /// Tape that records adjoint caches for a later [`Tape::backward`].
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
            record: true,
        }
    }

    /// Forward-only tape; [`Tape::backward`] panics on it.
    pub fn inference(params: &'p ParamSet<T>) -> Self {
        Self {
            record: false,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every value recorded so far, in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id),
            _ => node.value.as_ref().expect("non-param node carries its value"),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, parents: &[Var]) -> Var {
        let needs_grad = self.record && parents.iter().any(|&p| self.needs(p));
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value: Some(value),
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad: self.record,
        });
        Var(self.nodes.len() - 1)
    }

    /// Same-padded stride-1 convolution. `w` is `[co, ci, ks, ks]`, `b` is `[co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (ci, h, wd) = self.value(x).chw();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [co, ci, k, k]");
        assert_eq!(ws[1], ci, "conv input channels {ci} != weight {}", ws[1]);
        let (co, ks) = (ws[0], ws[2]);
        let hw = h * wd;
        let mut out = vec![T::zero(); co * hw];
        let bias = self.value(b).data();
        for (o, &bv) in bias.iter().enumerate() {
            out[o * hw..(o + 1) * hw].fill(bv);
        }
        let col = if ks == 1 {
            None
        } else {
            Some(kernels::im2col(self.value(x).data(), ci, h, wd, ks))
        };
        {
            let cols = col.as_deref().unwrap_or_else(|| self.value(x).data());
            kernels::gemm(co, ci * ks * ks, hw, self.value(w).data(), false, cols, false, T::one(), &mut out);
        }
        let keep = if self.record { col } else { None };
        self.push(
            Op::Conv2d { x, w, b, ks, col: keep },
            Tensor::from_vec(&[co, h, wd], out),
            &[x, w, b],
        )
    }

    /// `w @ x + b` for `x: [n]`, `w: [o, n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let ws = self.value(w).shape();
        assert_eq!(ws, [ws[0], xv.numel()], "linear weight shape mismatch");
        let o = ws[0];
        let mut out = self.value(b).data().to_vec();
        kernels::gemm(o, xv.numel(), 1, self.value(w).data(), false, xv.data(), false, T::one(), &mut out);
        self.push(Op::Linear { x, w, b }, Tensor::from_vec(&[o], out), &[x, w, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |p, q| p + q);
        self.push(Op::Add(a, b), out, &[a, b])
    }

    /// Adds a per-channel vector `v: [c]` to every pixel of `x: [c, h, w]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let vv = self.value(v).data();
        assert_eq!(vv.len(), c, "channel bias length mismatch");
        let mut out = self.value(x).clone();
        for (ci, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            for p in plane {
                *p = *p + vv[ci];
            }
        }
        self.push(Op::AddChannel { x, v }, out, &[x, v])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |p, q| p * q);
        self.push(Op::Mul(a, b), out, &[a, b])
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(Op::Affine { x, scale }, out, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let sig: Vec<T> = xv.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let out = Tensor::from_vec(xv.shape(), xv.data().iter().zip(&sig).map(|(&v, &s)| v * s).collect());
        let sig = if self.record { sig } else { Vec::new() };
        self.push(Op::Silu { x, sig }, out, &[x])
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert!(groups > 0 && c % groups == 0, "{c} channels not divisible into {groups} groups");
        let hw = h * w;
        let (xhat, rstd) = kernels::group_norm_stats(self.value(x).data(), c, hw, groups);
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); c * hw];
        for ci in 0..c {
            for i in ci * hw..(ci + 1) * hw {
                out[i] = xhat[i] * g[ci] + bt[ci];
            }
        }
        let (xhat, rstd) = if self.record { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        self.push(
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            Tensor::from_vec(&[c, h, w], out),
            &[x, gamma, beta],
        )
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims, got {h}x{w}");
        let out = kernels::avg_pool2(self.value(x).data(), c, h, w);
        self.push(Op::AvgPool2(x), Tensor::from_vec(&[c, h / 2, w / 2], out), &[x])
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let out = kernels::upsample2(self.value(x).data(), c, h, w);
        self.push(Op::Upsample2(x), Tensor::from_vec(&[c, 2 * h, 2 * w], out), &[x])
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ca, h, w) = self.value(a).chw();
        let (cb, hb, wb) = self.value(b).chw();
        assert_eq!((h, w), (hb, wb), "concat spatial mismatch");
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        self.push(Op::Concat(a, b), Tensor::from_vec(&[ca + cb, h, w], data), &[a, b])
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert!(start + len <= c, "channel slice out of range");
        let hw = h * w;
        let data = self.value(x).data()[start * hw..(start + len) * hw].to_vec();
        self.push(Op::SliceChannels { x, start }, Tensor::from_vec(&[len, h, w], data), &[x])
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &Tensor<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "mse shape mismatch");
        let diff: Vec<T> = xv.data().iter().zip(target.data()).map(|(&a, &b)| a - b).collect();
        let loss = diff.iter().map(|&d| d * d).sum::<T>() / T::lit(diff.len() as f64);
        let diff = if self.record { diff } else { Vec::new() };
        self.push(Op::Mse { x, diff }, Tensor::scalar(loss), &[x])
    }

    /// Mean absolute error against a constant target.
    pub fn l1(&mut self, x: Var, target: &Tensor<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "l1 shape mismatch");
        let mut sign = Vec::with_capacity(target.numel());
        let mut total = T::zero();
        for (&a, &b) in xv.data().iter().zip(target.data()) {
            let d = a - b;
            total = total + d.abs();
            sign.push(if d > T::zero() {
                T::one()
            } else if d < T::zero() {
                -T::one()
            } else {
                T::zero()
            });
        }
        let loss = total / T::lit(sign.len() as f64);
        let sign = if self.record { sign } else { Vec::new() };
        self.push(Op::L1 { x, sign }, Tensor::scalar(loss), &[x])
    }

    /// `sum_i w_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let total = terms
            .iter()
            .map(|&(v, w)| self.value(v).item() * w)
            .fold(T::zero(), |a, b| a + b);
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Op::WeightedSum(terms.to_vec()), Tensor::scalar(total), &parents)
    }

    /// Back-propagates from the scalar `root`, adding parameter gradients
    /// into `grads` (aligned with the tape's [`ParamSet`]).
    pub fn backward(&self, root: Var, grads: &mut [Tensor<T>]) {
        assert!(self.record, "backward on an inference tape");
        assert_eq!(grads.len(), self.params.len(), "gradient buffer misaligned");
        assert_eq!(self.value(root).numel(), 1, "backward root must be scalar");
        let mut adj: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Param(id) => grads[id.0].add_assign(&g),
                Op::Conv2d { x, w, b, ks, col } => {
                    let (ci, h, wd) = self.value(*x).chw();
                    let (co, hw, ks) = (g.shape()[0], h * wd, *ks);
                    let ckk = ci * ks * ks;
                    let cols = col.as_deref().unwrap_or_else(|| self.value(*x).data());
                    if self.needs(*b) {
                        let db: Vec<T> = g.data().chunks(hw).map(|p| p.iter().copied().sum()).collect();
                        accumulate(&mut adj, *b, Tensor::from_vec(&[co], db));
                    }
                    if self.needs(*w) {
                        let mut dw = vec![T::zero(); co * ckk];
                        if !cfg!(feature = "openblas") && hw >= DOT_ROWS_MIN_HW {
                            kernels::dot_rows(co, ckk, hw, g.data(), cols, &mut dw);
                        } else {
                            kernels::gemm(co, hw, ckk, g.data(), false, cols, true, T::zero(), &mut dw);
                        }
                        accumulate(&mut adj, *w, Tensor::from_vec(&[co, ci, ks, ks], dw));
                    }
                    if self.needs(*x) {
                        let mut dcol = vec![T::zero(); ckk * hw];
                        kernels::gemm(ckk, co, hw, self.value(*w).data(), true, g.data(), false, T::zero(), &mut dcol);
                        let dx = if ks == 1 {
                            dcol
                        } else {
                            let mut dx = vec![T::zero(); ci * hw];
                            kernels::col2im(&dcol, ci, h, wd, ks, &mut dx);
                            dx
                        };
                        accumulate(&mut adj, *x, Tensor::from_vec(&[ci, h, wd], dx));
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let n = xv.numel();
                    let o = g.numel();
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, g.clone());
                    }
                    if self.needs(*w) {
                        let mut dw = vec![T::zero(); o * n];
                        kernels::gemm(o, 1, n, g.data(), false, xv.data(), false, T::zero(), &mut dw);
                        accumulate(&mut adj, *w, Tensor::from_vec(&[o, n], dw));
                    }
                    if self.needs(*x) {
                        let mut dx = vec![T::zero(); n];
                        kernels::gemm(n, o, 1, self.value(*w).data(), true, g.data(), false, T::zero(), &mut dx);
                        accumulate(&mut adj, *x, Tensor::from_vec(xv.shape(), dx));
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, g);
                    }
                }
                Op::AddChannel { x, v } => {
                    if self.needs(*v) {
                        let (_, h, w) = g.chw();
                        let dv: Vec<T> = g.data().chunks(h * w).map(|p| p.iter().copied().sum()).collect();
                        let len = dv.len();
                        accumulate(&mut adj, *v, Tensor::from_vec(&[len], dv));
                    }
                    if self.needs(*x) {
                        accumulate(&mut adj, *x, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, g.zip_map(self.value(*b), |p, q| p * q));
                    }
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, g.zip_map(self.value(*a), |p, q| p * q));
                    }
                }
                Op::Affine { x, scale } => {
                    let s = *scale;
                    accumulate(&mut adj, *x, g.map(|v| v * s));
                }
                Op::Silu { x, sig } => {
                    let xv = self.value(*x);
                    let d = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .zip(sig)
                        .map(|((&gv, &v), &s)| gv * kernels::silu_grad(v, s))
                        .collect();
                    accumulate(&mut adj, *x, Tensor::from_vec(xv.shape(), d));
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    rstd,
                } => {
                    let (c, h, w) = g.chw();
                    let hw = h * w;
                    let gd = g.data();
                    if self.needs(*gamma) {
                        let dg: Vec<T> = (0..c)
                            .map(|ci| (ci * hw..(ci + 1) * hw).map(|i| gd[i] * xhat[i]).sum())
                            .collect();
                        accumulate(&mut adj, *gamma, Tensor::from_vec(&[c], dg));
                    }
                    if self.needs(*beta) {
                        let db: Vec<T> = gd.chunks(hw).map(|p| p.iter().copied().sum()).collect();
                        accumulate(&mut adj, *beta, Tensor::from_vec(&[c], db));
                    }
                    if self.needs(*x) {
                        let gam = self.value(*gamma).data();
                        let mut dxhat = gd.to_vec();
                        for (ci, plane) in dxhat.chunks_mut(hw).enumerate() {
                            for v in plane {
                                *v = *v * gam[ci];
                            }
                        }
                        let dx = kernels::group_norm_backward(&dxhat, xhat, rstd, c, hw, *groups);
                        accumulate(&mut adj, *x, Tensor::from_vec(&[c, h, w], dx));
                    }
                }
                Op::AvgPool2(x) => {
                    let (c, h, w) = self.value(*x).chw();
                    let dx = kernels::avg_pool2_backward(g.data(), c, h, w);
                    accumulate(&mut adj, *x, Tensor::from_vec(&[c, h, w], dx));
                }
                Op::Upsample2(x) => {
                    let (c, h, w) = self.value(*x).chw();
                    let dx = kernels::upsample2_backward(g.data(), c, h, w);
                    accumulate(&mut adj, *x, Tensor::from_vec(&[c, h, w], dx));
                }
                Op::Concat(a, b) => {
                    let (ca, h, w) = self.value(*a).chw();
                    let split = ca * h * w;
                    let (ga, gb) = g.data().split_at(split);
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, Tensor::from_vec(&[ca, h, w], ga.to_vec()));
                    }
                    if self.needs(*b) {
                        let cb = gb.len() / (h * w);
                        accumulate(&mut adj, *b, Tensor::from_vec(&[cb, h, w], gb.to_vec()));
                    }
                }
                Op::SliceChannels { x, start } => {
                    let (c, h, w) = self.value(*x).chw();
                    let mut dx = Tensor::zeros(&[c, h, w]);
                    let off = start * h * w;
                    dx.data_mut()[off..off + g.numel()].copy_from_slice(g.data());
                    accumulate(&mut adj, *x, dx);
                }
                Op::Mse { x, diff } => {
                    let k = g.item() * T::lit(2.0) / T::lit(diff.len() as f64);
                    let shape = self.value(*x).shape();
                    accumulate(&mut adj, *x, Tensor::from_vec(shape, diff.iter().map(|&d| d * k).collect()));
                }
                Op::L1 { x, sign } => {
                    let k = g.item() / T::lit(sign.len() as f64);
                    let shape = self.value(*x).shape();
                    accumulate(&mut adj, *x, Tensor::from_vec(shape, sign.iter().map(|&s| s * k).collect()));
                }
                Op::WeightedSum(terms) => {
                    let gv = g.item();
                    for &(v, w) in terms {
                        if self.needs(v) {
                            accumulate(&mut adj, v, Tensor::scalar(gv * w));
                        }
                    }
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(adj: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::nn::uniform_init;

    /// Central-difference check of a scalar function of the parameters.
    fn check(params: &mut ParamSet<f64>, f: impl Fn(&mut Tape<f64>) -> Var) {
        let mut grads = params.zeros_like();
        {
            let mut tape = Tape::new(params);
            let root = f(&mut tape);
            tape.backward(root, &mut grads);
        }
        let h = 1e-5;
        for id in params.ids().collect::<Vec<_>>() {
            for j in 0..params.get(id).numel() {
                let orig = params.get(id).data()[j];
                params.get_mut(id).data_mut()[j] = orig + h;
                let up = {
                    let mut t = Tape::inference(params);
                    let r = f(&mut t);
                    t.value(r).item()
                };
                params.get_mut(id).data_mut()[j] = orig - h;
                let down = {
                    let mut t = Tape::inference(params);
                    let r = f(&mut t);
                    t.value(r).item()
                };
                params.get_mut(id).data_mut()[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads[id.0].data()[j];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-6, "{} [{j}]: analytic {an} vs fd {fd}", params.name(id));
            }
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::<f64>::new();
        let x = p.add("x", uniform_init(&mut rng, &[4, 4, 4], 1, 1.0));
        let w3 = p.add("w3", uniform_init(&mut rng, &[4, 4, 3, 3], 36, 1.0));
        let b3 = p.add("b3", uniform_init(&mut rng, &[4], 1, 0.5));
        let w1 = p.add("w1", uniform_init(&mut rng, &[8, 8, 1, 1], 8, 1.0));
        let b1 = p.add("b1", uniform_init(&mut rng, &[8], 1, 0.5));
        let gam = p.add("gamma", uniform_init(&mut rng, &[8], 1, 1.0));
        let bet = p.add("beta", uniform_init(&mut rng, &[8], 1, 1.0));
        let lw = p.add("lw", uniform_init(&mut rng, &[8, 3], 3, 1.0));
        let lb = p.add("lb", uniform_init(&mut rng, &[8], 1, 1.0));
        let emb = p.add("emb", uniform_init(&mut rng, &[3], 1, 1.0));
        let target: Tensor<f64> = uniform_init(&mut rng, &[4, 4, 4], 1, 3.0);
        let target_small: Tensor<f64> = uniform_init(&mut rng, &[2, 2, 2], 1, 3.0);

        check(&mut p, |t| {
            let xv = t.param(x);
            let (w3, b3, w1, b1) = (t.param(w3), t.param(b3), t.param(w1), t.param(b1));
            let c = t.conv2d(xv, w3, b3);
            let s = t.silu(c);
            let cat = t.concat(s, xv);
            let mixed = t.conv2d(cat, w1, b1);
            let (gam, bet) = (t.param(gam), t.param(bet));
            let n = t.group_norm(mixed, gam, bet, 4);
            let (lw, lb, emb) = (t.param(lw), t.param(lb), t.param(emb));
            let v = t.linear(emb, lw, lb);
            let n = t.add_channel(n, v);
            let a = t.slice_channels(n, 0, 4);
            let b = t.slice_channels(n, 4, 4);
            let b1p = t.affine(b, 0.5, 1.0);
            let m = t.mul(a, b1p);
            let m = t.add(m, xv);
            let l_full = t.mse(m, &target);
            let pooled = t.avg_pool2(m);
            let up = t.upsample2(pooled);
            let down = t.avg_pool2(up);
            let down = t.slice_channels(down, 1, 2);
            let l_small = t.l1(down, &target_small);
            t.weighted_sum(&[(l_full, 0.7), (l_small, 1.3)])
        });
    }

    #[test]
    fn inference_tape_matches_recording_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = ParamSet::<f64>::new();
        let w = p.add("w", uniform_init(&mut rng, &[2, 1, 3, 3], 9, 1.0));
        let b = p.add("b", Tensor::zeros(&[2]));
        let input: Tensor<f64> = uniform_init(&mut rng, &[1, 8, 8], 1, 1.0);
        let run = |t: &mut Tape<f64>| {
            let x = t.constant(input.clone());
            let (w, b) = (t.param(w), t.param(b));
            t.conv2d(x, w, b)
        };
        let mut a = Tape::new(&p);
        let ra = run(&mut a);
        let mut i = Tape::inference(&p);
        let ri = run(&mut i);
        assert_eq!(a.value(ra), i.value(ri));
    }
}

//! Reverse-mode autodiff over a linear tape. Every op records its inputs and
//! whatever it needs for the backward pass; `backward` walks the tape once.

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::real::Real;
use super::tensor::{sigmoid, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Input,
    Conv {
        x: Var,
        w: ParamId,
        b: Option<ParamId>,
        geom: ConvGeom,
    },
    ConvT {
        x: Var,
        w: ParamId,
        b: Option<ParamId>,
        stride: [usize; 3],
    },
    Norm {
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    LeakyRelu {
        x: Var,
        slope: F,
    },
    Add(Var, Var),
    Concat(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<F>,
    },
    StraightThrough {
        x: Var,
    },
    SquaredErrorMean {
        x: Var,
        target: Tensor<F>,
        scale: F,
    },
    CodebookLoss {
        z: Tensor<F>,
        indices: Vec<usize>,
        codebook: Tensor<F>,
        scale: F,
    },
    Bce {
        x: Var,
        target: Vec<F>,
    },
    SoftDice {
        x: Var,
        target: Vec<F>,
        eps: f64,
    },
    WeightedSum(Vec<(Var, F)>),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

pub struct Tape<'p, F: Real> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
}

/// Gradients of a scalar root. `inputs` holds gradients for `Input` nodes,
/// `codebook` is populated only when a codebook loss term was recorded.
pub struct Gradients<F> {
    pub params: Vec<Option<Tensor<F>>>,
    inputs: Vec<Option<Tensor<F>>>,
    pub codebook: Option<Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params[id.index()].as_ref()
    }

    pub fn input(&self, v: Var) -> Option<&Tensor<F>> {
        self.inputs.get(v.0).and_then(|g| g.as_ref())
    }
}

fn shape_err(msg: String) -> Error {
    Error::ShapeIncompatible(msg)
}

fn mean_sq_diff<F: Real>(a: &[F], b: &[F]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y).f64().powi(2)).sum()
}

fn grad_slot<'g, F: Real>(grads: &'g mut [Option<Tensor<F>>], nodes: &[Node<F>], v: Var) -> &'g mut Tensor<F> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()))
}

impl<'p, F: Real> Tape<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn conv(&mut self, x: Var, w: ParamId, b: Option<ParamId>, geom: ConvGeom) -> Result<Var> {
        let (n, cin, sp) = self.value(x).dims5()?;
        let wt = self.params.get(w);
        let cout = wt.shape()[0];
        if wt.numel() != cout * cin * geom.taps() {
            return Err(shape_err(format!(
                "conv weight {:?} does not fit {cin} input channels",
                wt.shape()
            )));
        }
        let o = geom.out_shape(sp);
        let mut y = Tensor::zeros(&[n, cout, o[0], o[1], o[2]]);
        kernels::conv_forward(
            self.value(x).data(),
            n,
            cin,
            sp,
            wt.data(),
            b.map(|b| self.params.get(b).data()),
            cout,
            geom,
            y.data_mut(),
        );
        Ok(self.push(y, Op::Conv { x, w, b, geom }))
    }

    pub fn conv_transpose(&mut self, x: Var, w: ParamId, b: Option<ParamId>, stride: [usize; 3]) -> Result<Var> {
        let (n, cin, sp) = self.value(x).dims5()?;
        let wt = self.params.get(w);
        let taps: usize = stride.iter().product();
        if wt.shape()[0] != cin || wt.numel() % (cin * taps) != 0 {
            return Err(shape_err(format!(
                "transposed conv weight {:?} does not fit {cin} input channels",
                wt.shape()
            )));
        }
        let cout = wt.numel() / (cin * taps);
        let mut y = Tensor::zeros(&[n, cout, sp[0] * stride[0], sp[1] * stride[1], sp[2] * stride[2]]);
        kernels::conv_transpose_forward(
            self.value(x).data(),
            n,
            cin,
            sp,
            wt.data(),
            b.map(|b| self.params.get(b).data()),
            cout,
            stride,
            y.data_mut(),
        );
        Ok(self.push(y, Op::ConvT { x, w, b, stride }))
    }

    pub fn instance_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Result<Var> {
        let (n, c, _) = self.value(x).dims5()?;
        let s = self.value(x).spatial_len();
        let mut y = Tensor::zeros(self.value(x).shape());
        let (xhat, inv_std) = kernels::instance_norm_forward(
            self.value(x).data(),
            n,
            c,
            s,
            self.params.get(gamma).data(),
            self.params.get(beta).data(),
            y.data_mut(),
        );
        Ok(self.push(
            y,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = F::of(slope);
        let y = self.value(x).map(|v| if v > F::zero() { v } else { v * s });
        self.push(y, Op::LeakyRelu { x, slope: s })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(format!(
                "cannot add {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = Tensor::concat_channels(&[self.value(a), self.value(b)])?;
        Ok(self.push(y, Op::Concat(a, b)))
    }

    /// Multi-head attention with queries from `q` and keys/values from `k`, `v`
    /// (all `[n, d, ..]`). Softmax runs over the key positions.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, d, _) = self.value(q).dims5()?;
        let (nk, dk, _) = self.value(k).dims5()?;
        if nk != n || dk != d || self.value(k).shape() != self.value(v).shape() {
            return Err(shape_err(format!(
                "attention operands {:?}, {:?}, {:?} disagree",
                self.value(q).shape(),
                self.value(k).shape(),
                self.value(v).shape()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err(format!("{d} channels not divisible by {heads} heads")));
        }
        let sq = self.value(q).spatial_len();
        let sk = self.value(k).spatial_len();
        let mut out = Tensor::zeros(self.value(q).shape());
        let mut probs = vec![F::zero(); n * heads * sq * sk];
        for b in 0..n {
            let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            kernels::attention_forward(
                &qv[b * d * sq..(b + 1) * d * sq],
                &kv[b * d * sk..(b + 1) * d * sk],
                &vv[b * d * sk..(b + 1) * d * sk],
                d,
                sq,
                sk,
                heads,
                &mut out.data_mut()[b * d * sq..(b + 1) * d * sq],
                &mut probs[b * heads * sq * sk..(b + 1) * heads * sq * sk],
            );
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// Softmax weights of an attention node, laid out `[batch, head, query, key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[F]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Forward value `quantized`, backward identity into `x`.
    pub fn straight_through(&mut self, x: Var, quantized: Tensor<F>) -> Result<Var> {
        if quantized.shape() != self.value(x).shape() {
            return Err(shape_err("straight-through operands differ in shape".into()));
        }
        Ok(self.push(quantized, Op::StraightThrough { x }))
    }

    /// `sum((x - target)^2) / locations` with `target` treated as a constant.
    pub fn squared_error_mean(&mut self, x: Var, target: Tensor<F>, locations: usize) -> Result<Var> {
        if target.shape() != self.value(x).shape() {
            return Err(shape_err("squared-error operands differ in shape".into()));
        }
        let scale = 1.0 / locations.max(1) as f64;
        let v = mean_sq_diff(self.value(x).data(), target.data()) * scale;
        Ok(self.push(
            Tensor::scalar(F::of(v)),
            Op::SquaredErrorMean {
                x,
                target,
                scale: F::of(scale),
            },
        ))
    }

    /// `sum_l ||z_l - e_{idx_l}||^2 / L` with `z` constant; the gradient flows
    /// into the codebook rows. `z` is `[L, D]`, `codebook` is `[K, D]`.
    pub fn codebook_loss(&mut self, z: Tensor<F>, indices: Vec<usize>, codebook: Tensor<F>) -> Var {
        let d = codebook.shape()[1];
        let l = indices.len();
        let mut acc = 0.0;
        for (i, &k) in indices.iter().enumerate() {
            acc += mean_sq_diff(&z.data()[i * d..(i + 1) * d], &codebook.data()[k * d..(k + 1) * d]);
        }
        let scale = 1.0 / l.max(1) as f64;
        self.push(
            Tensor::scalar(F::of(acc * scale)),
            Op::CodebookLoss {
                z,
                indices,
                codebook,
                scale: F::of(scale),
            },
        )
    }

    /// Mean binary cross-entropy of `sigmoid(x)` against `target`.
    pub fn bce_with_logits(&mut self, x: Var, target: &[F]) -> Result<Var> {
        let xs = self.value(x).data();
        if xs.len() != target.len() {
            return Err(Error::ShapeMismatch(format!(
                "logits have {} elements, target {}",
                xs.len(),
                target.len()
            )));
        }
        let mut acc = 0.0;
        for (&l, &t) in xs.iter().zip(target) {
            let (l, t) = (l.f64(), t.f64());
            // max(l,0) - l*t + ln(1 + e^-|l|)
            acc += l.max(0.0) - l * t + (-l.abs()).exp().ln_1p();
        }
        let v = acc / xs.len() as f64;
        Ok(self.push(
            Tensor::scalar(F::of(v)),
            Op::Bce {
                x,
                target: target.to_vec(),
            },
        ))
    }

    /// Soft Dice loss `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)` with
    /// `p = sigmoid(x)`, sums over every element.
    pub fn soft_dice_loss(&mut self, x: Var, target: &[F], eps: f64) -> Result<Var> {
        let xs = self.value(x).data();
        if xs.len() != target.len() {
            return Err(Error::ShapeMismatch(format!(
                "logits have {} elements, target {}",
                xs.len(),
                target.len()
            )));
        }
        let (mut i, mut sp, mut sg) = (0.0, 0.0, 0.0);
        for (&l, &t) in xs.iter().zip(target) {
            let p = sigmoid(l).f64();
            i += p * t.f64();
            sp += p;
            sg += t.f64();
        }
        let v = 1.0 - (2.0 * i + eps) / (sp + sg + eps);
        Ok(self.push(
            Tensor::scalar(F::of(v)),
            Op::SoftDice {
                x,
                target: target.to_vec(),
                eps,
            },
        ))
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut acc = 0.0;
        for &(v, w) in terms {
            acc += w * self.value(v).item().f64();
        }
        let terms = terms.iter().map(|&(v, w)| (v, F::of(w))).collect();
        self.push(Tensor::scalar(F::of(acc)), Op::WeightedSum(terms))
    }

    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.value(root).numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Option<Tensor<F>>> = (0..self.params.len()).map(|_| None).collect();
        let mut inputs: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut codebook: Option<Tensor<F>> = None;
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), F::one()));

        let params = self.params;
        let take = |pg: &mut Vec<Option<Tensor<F>>>, id: ParamId| -> Tensor<F> {
            pg[id.index()]
                .take()
                .unwrap_or_else(|| Tensor::zeros(params.get(id).shape()))
        };

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let nodes = &self.nodes[..];
            match &node.op {
                Op::Input => {
                    inputs[i] = Some(g);
                }
                Op::Conv { x, w, b, geom } => {
                    let xv = self.value(*x);
                    let (n, cin, sp) = xv.dims5().expect("checked in forward");
                    let cout = params.get(*w).shape()[0];
                    let mut dw = take(&mut pgrads, *w);
                    let mut db = b.map(|b| take(&mut pgrads, b));
                    let dx = grad_slot(&mut grads, nodes, *x);
                    kernels::conv_backward(
                        xv.data(),
                        n,
                        cin,
                        sp,
                        params.get(*w).data(),
                        cout,
                        *geom,
                        g.data(),
                        dw.data_mut(),
                        db.as_mut().map(|t| t.data_mut()),
                        Some(dx.data_mut()),
                    );
                    pgrads[w.index()] = Some(dw);
                    if let (Some(b), Some(db)) = (b, db) {
                        pgrads[b.index()] = Some(db);
                    }
                }
                Op::ConvT { x, w, b, stride } => {
                    let xv = self.value(*x);
                    let (n, cin, sp) = xv.dims5().expect("checked in forward");
                    let taps: usize = stride.iter().product();
                    let cout = params.get(*w).numel() / (cin * taps);
                    let mut dw = take(&mut pgrads, *w);
                    let mut db = b.map(|b| take(&mut pgrads, b));
                    let dx = grad_slot(&mut grads, nodes, *x);
                    kernels::conv_transpose_backward(
                        xv.data(),
                        n,
                        cin,
                        sp,
                        params.get(*w).data(),
                        cout,
                        *stride,
                        g.data(),
                        dw.data_mut(),
                        db.as_mut().map(|t| t.data_mut()),
                        Some(dx.data_mut()),
                    );
                    pgrads[w.index()] = Some(dw);
                    if let (Some(b), Some(db)) = (b, db) {
                        pgrads[b.index()] = Some(db);
                    }
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (n, c, _) = node.value.dims5().expect("checked in forward");
                    let s = node.value.spatial_len();
                    let mut dg = take(&mut pgrads, *gamma);
                    let mut dbt = take(&mut pgrads, *beta);
                    let dx = grad_slot(&mut grads, nodes, *x);
                    kernels::instance_norm_backward(
                        g.data(),
                        xhat,
                        inv_std,
                        n,
                        c,
                        s,
                        params.get(*gamma).data(),
                        dg.data_mut(),
                        dbt.data_mut(),
                        dx.data_mut(),
                    );
                    pgrads[gamma.index()] = Some(dg);
                    pgrads[beta.index()] = Some(dbt);
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x).data();
                    let dx = grad_slot(&mut grads, nodes, *x);
                    for ((d, &gv), &v) in dx.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        *d += if v > F::zero() { gv } else { gv * *slope };
                    }
                }
                Op::Add(a, b) => {
                    grad_slot(&mut grads, nodes, *a).add_assign(&g);
                    grad_slot(&mut grads, nodes, *b).add_assign(&g);
                }
                Op::Concat(a, b) => {
                    let (n, ca, _) = self.value(*a).dims5().expect("5-axis");
                    let cb = self.value(*b).shape()[1];
                    let s = node.value.spatial_len();
                    for bi in 0..n {
                        let base = bi * (ca + cb) * s;
                        let da = grad_slot(&mut grads, nodes, *a);
                        for (d, &gv) in da.data_mut()[bi * ca * s..(bi + 1) * ca * s]
                            .iter_mut()
                            .zip(&g.data()[base..base + ca * s])
                        {
                            *d += gv;
                        }
                        let db = grad_slot(&mut grads, nodes, *b);
                        for (d, &gv) in db.data_mut()[bi * cb * s..(bi + 1) * cb * s]
                            .iter_mut()
                            .zip(&g.data()[base + ca * s..base + (ca + cb) * s])
                        {
                            *d += gv;
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (n, d, _) = node.value.dims5().expect("5-axis");
                    let sq = node.value.spatial_len();
                    let sk = self.value(*k).spatial_len();
                    let mut dq = vec![F::zero(); n * d * sq];
                    let mut dk = vec![F::zero(); n * d * sk];
                    let mut dv = vec![F::zero(); n * d * sk];
                    for b in 0..n {
                        kernels::attention_backward(
                            &self.value(*q).data()[b * d * sq..(b + 1) * d * sq],
                            &self.value(*k).data()[b * d * sk..(b + 1) * d * sk],
                            &self.value(*v).data()[b * d * sk..(b + 1) * d * sk],
                            &probs[b * heads * sq * sk..(b + 1) * heads * sq * sk],
                            &g.data()[b * d * sq..(b + 1) * d * sq],
                            d,
                            sq,
                            sk,
                            *heads,
                            &mut dq[b * d * sq..(b + 1) * d * sq],
                            &mut dk[b * d * sk..(b + 1) * d * sk],
                            &mut dv[b * d * sk..(b + 1) * d * sk],
                        );
                    }
                    for (var, gd) in [(*q, dq), (*k, dk), (*v, dv)] {
                        for (a, b) in grad_slot(&mut grads, nodes, var).data_mut().iter_mut().zip(gd) {
                            *a += b;
                        }
                    }
                }
                Op::StraightThrough { x } => {
                    grad_slot(&mut grads, nodes, *x).add_assign(&g);
                }
                Op::SquaredErrorMean { x, target, scale } => {
                    let c = F::of(2.0) * *scale * g.item();
                    let xv = self.value(*x).data();
                    let dx = grad_slot(&mut grads, nodes, *x);
                    for ((d, &a), &t) in dx.data_mut().iter_mut().zip(xv).zip(target.data()) {
                        *d += c * (a - t);
                    }
                }
                Op::CodebookLoss {
                    z,
                    indices,
                    codebook: cb,
                    scale,
                } => {
                    let dim = cb.shape()[1];
                    let c = F::of(2.0) * *scale * g.item();
                    let dc = codebook.get_or_insert_with(|| Tensor::zeros(cb.shape()));
                    for (l, &k) in indices.iter().enumerate() {
                        for j in 0..dim {
                            dc.data_mut()[k * dim + j] += c * (cb.data()[k * dim + j] - z.data()[l * dim + j]);
                        }
                    }
                }
                Op::Bce { x, target } => {
                    let c = g.item() / F::of(target.len() as f64);
                    let xv = self.value(*x).data();
                    let dx = grad_slot(&mut grads, nodes, *x);
                    for ((d, &l), &t) in dx.data_mut().iter_mut().zip(xv).zip(target) {
                        *d += c * (sigmoid(l) - t);
                    }
                }
                Op::SoftDice { x, target, eps } => {
                    let xv = self.value(*x).data();
                    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
                    for (&l, &t) in xv.iter().zip(target) {
                        let p = sigmoid(l).f64();
                        inter += p * t.f64();
                        sp += p;
                        sg += t.f64();
                    }
                    let num = 2.0 * inter + eps;
                    let den = sp + sg + eps;
                    let gv = g.item().f64();
                    let dx = grad_slot(&mut grads, nodes, *x);
                    for ((d, &l), &t) in dx.data_mut().iter_mut().zip(xv).zip(target) {
                        let p = sigmoid(l).f64();
                        // dL/dp = -(2 g den - num) / den^2
                        let dl_dp = -(2.0 * t.f64() * den - num) / (den * den);
                        *d += F::of(gv * dl_dp * p * (1.0 - p));
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        let d = grad_slot(&mut grads, nodes, v);
                        d.data_mut()[0] += w * g.item();
                    }
                }
            }
        }
        Gradients {
            params: pgrads,
            inputs,
            codebook,
        }
    }
}

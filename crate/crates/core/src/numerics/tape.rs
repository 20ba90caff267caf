//! Reverse-mode differentiation over a linear record of primitive applications.
//!
//! Nodes are appended in evaluation order, so a node's inputs always have
//! smaller ids and a single reverse sweep visits every node once. Parameters
//! are registered by name; registering the same name twice returns the same
//! node, which is how weight sharing shows up in the gradient.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

use super::kernels::{self, GroupNormSaved, UpsampleMode};
use super::ops::Activation;
use super::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    AvgPool2(Var),
    Upsample2(Var, UpsampleMode),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Silu(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        saved: GroupNormSaved<T>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddChannel(Var, Var),
    ConcatChannels(Var, Var),
    ScaleSamples(Var, Vec<T>),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    WeightedMse {
        pred: Var,
        target: Tensor<T>,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
}

#[derive(Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Names of every parameter registered so far.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(name.to_string()),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let y = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), pad)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, pad }, &[x, w, b]))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let y = kernels::avg_pool2_forward(self.value(x))?;
        Ok(self.push(y, Op::AvgPool2(x), &[x]))
    }

    pub fn upsample2(&mut self, x: Var, mode: UpsampleMode) -> Result<Var> {
        let y = kernels::upsample2_forward(self.value(x), mode)?;
        Ok(self.push(y, Op::Upsample2(x, mode), &[x]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::matmul_forward(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let y = kernels::add_bias_forward(self.value(x), self.value(b))?;
        Ok(self.push(y, Op::AddBias(x, b), &[x, b]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = kernels::silu_forward(self.value(x));
        self.push(y, Op::Silu(x), &[x])
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
        let y = self.matmul(x, w)?;
        let y = self.add_bias(y, b)?;
        Ok(match act {
            Activation::None => y,
            Activation::Silu => self.silu(y),
        })
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (y, saved) =
            kernels::group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups)?;
        Ok(self.push(
            y,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                saved,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    /// `x[B, C, H, W] + e[B, C]`, broadcasting `e` over space.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let (xs, es) = (self.value(x), self.value(e));
        let (b, c, h, w) = xs.dims4()?;
        if es.shape() != [b, c] {
            return Err(Error::shape("add_channel", xs.shape(), es.shape()));
        }
        let mut y = xs.clone();
        for (plane, &v) in y.data_mut().chunks_mut(h * w).zip(es.data()) {
            plane.iter_mut().for_each(|p| *p = *p + v);
        }
        Ok(self.push(y, Op::AddChannel(x, e), &[x, e]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, ca, h, w) = av.dims4()?;
        let (n2, cb, h2, w2) = bv.dims4()?;
        if (n, h, w) != (n2, h2, w2) {
            return Err(Error::shape("concat_channels", av.shape(), bv.shape()));
        }
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        for i in 0..n {
            data.extend_from_slice(&av.data()[i * ca * h * w..(i + 1) * ca * h * w]);
            data.extend_from_slice(&bv.data()[i * cb * h * w..(i + 1) * cb * h * w]);
        }
        let y = Tensor::from_parts(vec![n, ca + cb, h, w], data);
        Ok(self.push(y, Op::ConcatChannels(a, b), &[a, b]))
    }

    /// Multiplies batch element `i` by the constant `scale[i]`.
    pub fn scale_samples(&mut self, x: Var, scale: &[T]) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.shape()[0];
        if scale.len() != n {
            return Err(Error::invalid(
                "scale_samples",
                format!("{} scales for batch of {n}", scale.len()),
            ));
        }
        let per = xv.numel() / n;
        let mut y = xv.clone();
        for (chunk, &s) in y.data_mut().chunks_mut(per).zip(scale) {
            chunk.iter_mut().for_each(|v| *v = *v * s);
        }
        Ok(self.push(y, Op::ScaleSamples(x, scale.to_vec()), &[x]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let y = self.value(x).scale(s);
        self.push(y, Op::Scale(x, s), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x), &[x]))
    }

    /// `sum_i weights[i] * |pred_i - target_i|^2 / numel`, a scalar.
    pub fn weighted_mse(&mut self, pred: Var, target: &Tensor<T>, weights: &[T]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::shape("weighted_mse", pv.shape(), target.shape()));
        }
        let n = pv.shape()[0];
        if weights.len() != n {
            return Err(Error::invalid(
                "weighted_mse",
                format!("{} weights for batch of {n}", weights.len()),
            ));
        }
        let per = pv.numel() / n;
        let total = T::from_usize(pv.numel()).unwrap();
        let mut acc = T::zero();
        for ((p, t), &w) in pv.data().chunks(per).zip(target.data().chunks(per)).zip(weights) {
            let se: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
            acc = acc + w * se;
        }
        let y = Tensor::scalar(acc / total);
        Ok(self.push(
            y,
            Op::WeightedMse {
                pred,
                target: target.clone(),
                weights: weights.to_vec(),
            },
            &[pred],
        ))
    }

    /// Gradients of the scalar `loss` with respect to every parameter it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut out = Gradients::new();
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::from_parts(
            self.value(loss).shape().to_vec(),
            vec![T::one()],
        ));

        for k in (0..=loss.0).rev() {
            let Some(g) = grads[k].take() else { continue };
            let node = &self.nodes[k];
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    if let Some(name) = &node.param {
                        out.insert(name.clone(), g);
                    }
                }
                Op::Conv2d { x, w, b, pad } => {
                    let cg = kernels::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        self.value(*b),
                        *pad,
                        &g,
                        needs(*x),
                    )?;
                    if let Some(gx) = cg.x {
                        accumulate(&mut grads, *x, gx);
                    }
                    if needs(*w) {
                        accumulate(&mut grads, *w, cg.w);
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, cg.b);
                    }
                }
                Op::AvgPool2(x) => {
                    let gx = kernels::avg_pool2_backward(self.value(*x).shape(), &g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Upsample2(x, mode) => {
                    let gx = kernels::upsample2_backward(self.value(*x).shape(), &g, *mode);
                    accumulate(&mut grads, *x, gx);
                }
                Op::MatMul(a, b) => {
                    let (ga, gb) = kernels::matmul_backward(
                        self.value(*a),
                        self.value(*b),
                        &g,
                        needs(*a),
                        needs(*b),
                    );
                    if let Some(ga) = ga {
                        accumulate(&mut grads, *a, ga);
                    }
                    if let Some(gb) = gb {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::AddBias(x, b) => {
                    if needs(*b) {
                        let n = self.value(*b).numel();
                        accumulate(&mut grads, *b, kernels::bias_grad(&g, n));
                    }
                    if needs(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Silu(x) => {
                    let gx = kernels::silu_backward(self.value(*x), &g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    saved,
                } => {
                    let (gx, ggamma, gbeta) = kernels::group_norm_backward(
                        self.value(*x),
                        self.value(*gamma),
                        *groups,
                        saved,
                        &g,
                        needs(*x),
                    );
                    if let Some(gx) = gx {
                        accumulate(&mut grads, *x, gx);
                    }
                    if needs(*gamma) {
                        accumulate(&mut grads, *gamma, ggamma);
                    }
                    if needs(*beta) {
                        accumulate(&mut grads, *beta, gbeta);
                    }
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        let ga = g.zip_map(self.value(*b), |p, q| p * q)?;
                        accumulate(&mut grads, *a, ga);
                    }
                    if needs(*b) {
                        let gb = g.zip_map(self.value(*a), |p, q| p * q)?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::AddChannel(x, e) => {
                    if needs(*e) {
                        let (n, c, h, w) = g.dims4()?;
                        let ge: Vec<T> = g
                            .data()
                            .chunks(h * w)
                            .map(|plane| plane.iter().copied().sum())
                            .collect();
                        accumulate(&mut grads, *e, Tensor::from_parts(vec![n, c], ge));
                    }
                    if needs(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::ConcatChannels(a, b) => {
                    let (n, _, h, w) = g.dims4()?;
                    let ca = self.value(*a).shape()[1];
                    let cb = self.value(*b).shape()[1];
                    let (pa, pb) = (ca * h * w, cb * h * w);
                    if needs(*a) {
                        let mut ga = Vec::with_capacity(n * pa);
                        for chunk in g.data().chunks(pa + pb) {
                            ga.extend_from_slice(&chunk[..pa]);
                        }
                        accumulate(&mut grads, *a, Tensor::from_parts(vec![n, ca, h, w], ga));
                    }
                    if needs(*b) {
                        let mut gb = Vec::with_capacity(n * pb);
                        for chunk in g.data().chunks(pa + pb) {
                            gb.extend_from_slice(&chunk[pa..]);
                        }
                        accumulate(&mut grads, *b, Tensor::from_parts(vec![n, cb, h, w], gb));
                    }
                }
                Op::ScaleSamples(x, scale) => {
                    let per = g.numel() / scale.len();
                    let mut gx = g;
                    for (chunk, &s) in gx.data_mut().chunks_mut(per).zip(scale) {
                        chunk.iter_mut().for_each(|v| *v = *v * s);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Scale(x, s) => {
                    accumulate(&mut grads, *x, g.scale(*s));
                }
                Op::Sum(x) => {
                    let gx = Tensor::full(self.value(*x).shape(), g.data()[0]);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let gx = g.reshape(self.value(*x).shape())?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::WeightedMse {
                    pred,
                    target,
                    weights,
                } => {
                    let pv = self.value(*pred);
                    let per = pv.numel() / weights.len();
                    let scale = g.data()[0] * T::from_f64_lossy(2.0)
                        / T::from_usize(pv.numel()).unwrap();
                    let mut gp = pv.sub(target)?;
                    for (chunk, &w) in gp.data_mut().chunks_mut(per).zip(weights) {
                        chunk.iter_mut().for_each(|v| *v = *v * w * scale);
                    }
                    accumulate(&mut grads, *pred, gp);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", &Tensor::from_f64_slice(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g["x"], Tensor::ones(&[2, 3]));
    }

    #[test]
    fn grad_of_half_square_is_identity() {
        let xv = Tensor::from_f64_slice(&[4], &[0.5, -1.0, 2.0, 3.5]).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", &xv);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let l = tape.scale(s, 0.5);
        let g = tape.backward(l).unwrap();
        assert_eq!(g["x"], xv);
    }

    #[test]
    fn unreachable_params_get_no_entry() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param("a", &Tensor::ones(&[3]));
        let _b = tape.param("b", &Tensor::ones(&[3]));
        let s = tape.sum(a);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.keys().collect::<Vec<_>>(), vec!["a"]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param("a", &Tensor::ones(&[3]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn repeated_param_registration_shares_node() {
        let mut tape = Tape::<f64>::new();
        let v = Tensor::from_f64_slice(&[2], &[1.0, 2.0]).unwrap();
        let a = tape.param("w", &v);
        let b = tape.param("w", &v);
        assert_eq!(a, b);
        let s = tape.add(a, b).unwrap();
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap();
        assert_eq!(g["w"].data(), &[2.0, 2.0]);
    }
}

use crate::error::{Error, Result};
use crate::nn::{self, BatchNormParams, ConvKernel};
use crate::tensor::{broadcast_add, relu, Tensor};

use super::loss::softmax_xent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::from_parts(value.shape().to_vec(), vec![0.0; value.len()]);
        self.params.push(Parameter { name: name.into(), value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shapes(p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::from_parts(p.value.shape().to_vec(), vec![0.0; p.value.len()]);
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d { input: Var, kernel: Var },
    Depthwise { search: Var, template: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Relu(Var),
    Linear { x: Var, w: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f32>, var: Vec<f32>, eps: f32 },
    Reshape(Var),
    MeanSpatial(Var),
    Sum(Var),
    DotConst { x: Var, weights: Tensor },
    SoftmaxXent { logits: Var, label: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    /// Unrounded value of scalar reductions.
    exact: Option<f64>,
}

/// Tape of operations recorded in execution order.
///
/// Nodes can only reference earlier nodes, so the tape is a topological
/// order by construction. Build a fresh graph for every forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
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

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let requires_grad = matches!(op, Op::Param(_)) || inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad, exact: None });
        Var(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, op: Op, value: f64, inputs: &[Var]) -> Var {
        let v = self.push(op, Tensor::scalar(value as f32), inputs);
        self.nodes[v.0].exact = Some(value);
        v
    }

    /// Scalar value of `v` before rounding to `f32`, for reductions and
    /// losses; the stored `f32` otherwise.
    pub fn scalar_f64(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.exact.unwrap_or(n.value.data()[0] as f64)
    }

    /// Sign pattern (`input > 0`) of every ReLU on the tape, in tape order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.data().iter().map(|&v| v > 0.0))
            .collect()
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t, &[])
    }

    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Var {
        self.push(Op::Param(id), set.value(id).clone(), &[])
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let k = ConvKernel::new(self.value(kernel).clone())?;
        let out = nn::conv2d_valid(self.value(input), &k)?;
        Ok(self.push(Op::Conv2d { input, kernel }, out, &[input, kernel]))
    }

    pub fn head1x1(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let (_, _, kh, kw) = self.value(kernel).dims4()?;
        if (kh, kw) != (1, 1) {
            return Err(Error::shapes(self.value(kernel).shape(), &[kh, kw, 1, 1]));
        }
        self.conv2d(input, kernel)
    }

    pub fn depthwise_corr(&mut self, search: Var, template: Var) -> Result<Var> {
        let out = nn::depthwise_corr(self.value(search), self.value(template))?;
        Ok(self.push(Op::Depthwise { search, template }, out, &[search, template]))
    }

    /// XCorr as a reshape of the template to a `1×C×η×ω` kernel followed by
    /// a convolution.
    pub fn xcorr(&mut self, search: Var, template: Var) -> Result<Var> {
        let mut shape = vec![1];
        shape.extend_from_slice(self.value(template).dims3().map(|(c, h, w)| [c, h, w])?.as_slice());
        let k = self.reshape(template, shape)?;
        self.conv2d(search, k)
    }

    /// Broadcasting sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add { a, b }, out, &[a, b]))
    }

    /// Elementwise product of equal-shape operands.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul { a, b }, out, &[a, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = relu(self.value(x));
        self.push(Op::Relu(x), out, &[x])
    }

    /// `W·x + b` for a vector `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = nn::linear(self.value(x).data(), self.value(w), self.value(b))?;
        let t = Tensor::from_vec(out)?;
        Ok(self.push(Op::Linear { x, w, b }, t, &[x, w, b]))
    }

    /// Three linear layers, ReLU after the first two.
    pub fn mlp3(&mut self, x: Var, layers: [(Var, Var); 3]) -> Result<Var> {
        let h = self.linear(x, layers[0].0, layers[0].1)?;
        let h = self.relu(h);
        let h = self.linear(h, layers[1].0, layers[1].1)?;
        let h = self.relu(h);
        self.linear(h, layers[2].0, layers[2].1)
    }

    /// Inference batch norm with trainable `gamma`/`beta` and fixed running
    /// statistics taken from `stats`.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, stats: &BatchNormParams) -> Result<Var> {
        let p = BatchNormParams::new(
            self.value(gamma).clone(),
            self.value(beta).clone(),
            stats.running_mean.clone(),
            stats.running_var.clone(),
            stats.eps,
        )?;
        let out = nn::batchnorm_infer(self.value(x), &p)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            mean: stats.running_mean.data().to_vec(),
            var: stats.running_var.data().to_vec(),
            eps: stats.eps,
        };
        Ok(self.push(op, out, &[x, gamma, beta]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x), out, &[x]))
    }

    /// Global average pool `C×H×W -> [C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let plane = h * w;
        let d = self.value(x).data();
        let out = (0..c).map(|ci| (d[ci * plane..(ci + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32).collect();
        Ok(self.push(Op::MeanSpatial(x), Tensor::from_parts(vec![c], out), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push_scalar(Op::Sum(x), s, &[x])
    }

    /// `Σ weights ⊙ x` with constant weights.
    pub fn dot_const(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(Error::shapes(xv.shape(), weights.shape()));
        }
        let s: f64 = xv.data().iter().zip(weights.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        Ok(self.push_scalar(Op::DotConst { x, weights }, s, &[x]))
    }

    pub fn softmax_xent(&mut self, logits: Var, label: usize) -> Result<Var> {
        let loss = softmax_xent(self.value(logits).data(), label)?;
        Ok(self.push_scalar(Op::SoftmaxXent { logits, label }, loss, &[logits]))
    }

    /// Reverse pass from a scalar `loss`. Every parameter gradient in
    /// `params` is reset, then set to `∂loss/∂param`. Consumes the tape.
    pub fn backward(self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 || root.value.rank() > 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::DisconnectedLoss);
        }
        params.zero_grads();

        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let wants = |v: &Var| self.nodes[v.0].requires_grad;
            let mut acc = |v: Var, d: Vec<f64>| match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(d).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => {
                    let p = params.get_mut(*pid);
                    let summed: Vec<f32> = p.grad.data().iter().zip(&g).map(|(&a, &b)| (a as f64 + b) as f32).collect();
                    p.grad = Tensor::from_parts(p.value.shape().to_vec(), summed);
                }
                Op::Conv2d { input, kernel } => {
                    let (gx, gk) = conv_backward(&g, self.value(*input), self.value(*kernel), wants(input), wants(kernel));
                    if let Some(gx) = gx {
                        acc(*input, gx);
                    }
                    if let Some(gk) = gk {
                        acc(*kernel, gk);
                    }
                }
                Op::Depthwise { search, template } => {
                    let (gs, gt) = depthwise_backward(&g, self.value(*search), self.value(*template));
                    if wants(search) {
                        acc(*search, gs);
                    }
                    if wants(template) {
                        acc(*template, gt);
                    }
                }
                Op::Add { a, b } => {
                    for v in [a, b] {
                        if wants(v) {
                            acc(*v, reduce_broadcast(&g, node.value.shape(), self.value(*v).shape()));
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if wants(a) {
                        acc(*a, g.iter().zip(bv).map(|(&gv, &y)| gv * y as f64).collect());
                    }
                    if wants(b) {
                        acc(*b, g.iter().zip(av).map(|(&gv, &x)| gv * x as f64).collect());
                    }
                }
                Op::Relu(x) => {
                    let d = g.iter().zip(self.value(*x).data()).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect();
                    acc(*x, d);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x).data(), self.value(*w));
                    let (out, inp) = (wv.shape()[0], wv.shape()[1]);
                    if wants(x) {
                        let mut gx = vec![0f64; inp];
                        for (row, &go) in wv.data().chunks(inp).zip(g.iter()) {
                            for (gi, &wi) in gx.iter_mut().zip(row) {
                                *gi += go * wi as f64;
                            }
                        }
                        acc(*x, gx);
                    }
                    if wants(w) {
                        let mut gw = Vec::with_capacity(out * inp);
                        for &go in g.iter().take(out) {
                            gw.extend(xv.iter().map(|&xi| go * xi as f64));
                        }
                        acc(*w, gw);
                    }
                    if wants(b) {
                        acc(*b, g.clone());
                    }
                }
                Op::BatchNorm { x, gamma, beta, mean, var, eps } => {
                    let xv = self.value(*x);
                    let (c, h, w) = xv.dims3()?;
                    let plane = h * w;
                    let gam = self.value(*gamma).data();
                    let inv: Vec<f64> = var.iter().map(|&v| 1.0 / (v as f64 + *eps as f64).sqrt()).collect();
                    if wants(x) {
                        acc(*x, g.iter().enumerate().map(|(i, &gv)| gv * gam[i / plane] as f64 * inv[i / plane]).collect());
                    }
                    if wants(gamma) {
                        let mut gg = vec![0f64; c];
                        for (i, (&gv, &xi)) in g.iter().zip(xv.data()).enumerate() {
                            let ch = i / plane;
                            gg[ch] += gv * (xi as f64 - mean[ch] as f64) * inv[ch];
                        }
                        acc(*gamma, gg);
                    }
                    if wants(beta) {
                        let mut gb = vec![0f64; c];
                        for (i, &gv) in g.iter().enumerate() {
                            gb[i / plane] += gv;
                        }
                        acc(*beta, gb);
                    }
                }
                Op::Reshape(x) => acc(*x, g),
                Op::MeanSpatial(x) => {
                    let (_, h, w) = self.value(*x).dims3()?;
                    let plane = h * w;
                    let d = (0..g.len() * plane).map(|i| g[i / plane] / plane as f64).collect();
                    acc(*x, d);
                }
                Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
                Op::DotConst { x, weights } => acc(*x, weights.data().iter().map(|&w| g[0] * w as f64).collect()),
                Op::SoftmaxXent { logits, label } => {
                    let probs = super::loss::softmax(self.value(*logits).data());
                    let d = probs.iter().enumerate().map(|(k, &p)| g[0] * (p - if k == *label { 1.0 } else { 0.0 })).collect();
                    acc(*logits, d);
                }
            }
        }
        Ok(())
    }
}

/// Sums a gradient of broadcast shape `out_shape` down to operand `shape`.
fn reduce_broadcast(g: &[f64], out_shape: &[usize], shape: &[usize]) -> Vec<f64> {
    if out_shape == shape {
        return g.to_vec();
    }
    let strides = crate::tensor::broadcast_strides(shape, out_shape);
    let mut acc = vec![0f64; shape.iter().product()];
    let mut idx = vec![0usize; out_shape.len()];
    let mut pos = 0usize;
    for &v in g {
        acc[pos] += v;
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            pos += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            pos -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    acc
}

type GradPair = (Option<Vec<f64>>, Option<Vec<f64>>);

fn conv_backward(g: &[f64], x: &Tensor, k: &Tensor, want_x: bool, want_k: bool) -> GradPair {
    let (c, h, w) = x.dims3().expect("checked in forward");
    let (p, _, kh, kw) = k.dims4().expect("checked in forward");
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let (xd, kd) = (x.data(), k.data());
    let mut gx = want_x.then(|| vec![0f64; c * h * w]);
    let mut gk = want_k.then(|| vec![0f64; p * c * kh * kw]);
    for po in 0..p {
        let gp = &g[po * oh * ow..(po + 1) * oh * ow];
        for ci in 0..c {
            let kbase = (po * c + ci) * kh * kw;
            let xbase = ci * h * w;
            for u in 0..kh {
                for v in 0..kw {
                    let kval = kd[kbase + u * kw + v] as f64;
                    let mut ksum = 0f64;
                    for i in 0..oh {
                        let xrow = xbase + (i + u) * w + v;
                        let grow = &gp[i * ow..(i + 1) * ow];
                        if let Some(gx) = gx.as_mut() {
                            for (j, &gv) in grow.iter().enumerate() {
                                gx[xrow + j] += gv * kval;
                            }
                        }
                        if gk.is_some() {
                            for (j, &gv) in grow.iter().enumerate() {
                                ksum += gv * xd[xrow + j] as f64;
                            }
                        }
                    }
                    if let Some(gk) = gk.as_mut() {
                        gk[kbase + u * kw + v] += ksum;
                    }
                }
            }
        }
    }
    (gx, gk)
}

fn depthwise_backward(g: &[f64], s: &Tensor, t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = s.dims3().expect("checked in forward");
    let (_, th, tw) = t.dims3().expect("checked in forward");
    let (oh, ow) = (h - th + 1, w - tw + 1);
    let (sd, td) = (s.data(), t.data());
    let mut gs = vec![0f64; c * h * w];
    let mut gt = vec![0f64; c * th * tw];
    for ci in 0..c {
        for u in 0..th {
            for v in 0..tw {
                let tval = td[(ci * th + u) * tw + v] as f64;
                let mut tsum = 0f64;
                for i in 0..oh {
                    for j in 0..ow {
                        let gv = g[(ci * oh + i) * ow + j];
                        let xi = (ci * h + i + u) * w + j + v;
                        gs[xi] += gv * tval;
                        tsum += gv * sd[xi] as f64;
                    }
                }
                gt[(ci * th + u) * tw + v] += tsum;
            }
        }
    }
    (gs, gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_subgradient() {
        let mut ps = ParamSet::new();
        let x = ps.add("x", Tensor::from_vec(vec![-1.0, 2.0, 3.0]).unwrap());
        let mut g = Graph::new();
        let xv = g.param(&ps, x);
        let r = g.relu(xv);
        let s = g.sum(r);
        g.backward(s, &mut ps).unwrap();
        assert_eq!(ps.get(x).grad.data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let mut ps = ParamSet::new();
        let x = ps.add("x", Tensor::from_vec(vec![0.0]).unwrap());
        let mut g = Graph::new();
        let xv = g.param(&ps, x);
        let r = g.relu(xv);
        let s = g.sum(r);
        g.backward(s, &mut ps).unwrap();
        assert_eq!(ps.get(x).grad.data(), &[0.0]);
    }

    #[test]
    fn broadcast_gradient_counts_windows() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::zeros(vec![3, 1, 1]).unwrap());
        let b = ps.add("b", Tensor::zeros(vec![3, 2, 2]).unwrap());
        let mut g = Graph::new();
        let (av, bv) = (g.param(&ps, a), g.param(&ps, b));
        let s = g.add(av, bv).unwrap();
        let l = g.sum(s);
        g.backward(l, &mut ps).unwrap();
        assert_eq!(ps.get(a).grad.data(), &[4.0; 3]);
        assert_eq!(ps.get(b).grad.data(), &[1.0; 12]);
    }

    #[test]
    fn loss_errors() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::zeros(vec![2]).unwrap());
        let mut g = Graph::new();
        let av = g.param(&ps, a);
        assert!(matches!(g.backward(av, &mut ps), Err(Error::NonScalarLoss(_))));
        let mut g = Graph::new();
        let c = g.input(Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        let s = g.sum(c);
        assert!(matches!(g.backward(s, &mut ps), Err(Error::DisconnectedLoss)));
    }

    #[test]
    fn grads_reset_each_pass_and_accumulate_within() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        for _ in 0..2 {
            let mut g = Graph::new();
            let x = g.param(&ps, a);
            let y = g.param(&ps, a);
            let s = g.add(x, y).unwrap();
            let l = g.sum(s);
            g.backward(l, &mut ps).unwrap();
            assert_eq!(ps.get(a).grad.data(), &[2.0, 2.0]);
        }
    }

    #[test]
    fn inputs_get_no_gradient_but_flow_through() {
        let mut ps = ParamSet::new();
        let k = ps.add("k", Tensor::full(vec![1, 1, 1, 1], 2.0).unwrap());
        let mut g = Graph::new();
        let x = g.input(Tensor::full(vec![1, 2, 2], 3.0).unwrap());
        let kv = g.param(&ps, k);
        let y = g.conv2d(x, kv).unwrap();
        let l = g.sum(y);
        g.backward(l, &mut ps).unwrap();
        assert_eq!(ps.get(k).grad.data(), &[12.0]);
    }
}

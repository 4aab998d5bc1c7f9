//! Reverse-mode gradients over small tensor graphs, and Adam.
//!
//! A [`Graph`] is built fresh for every loss evaluation and dropped after
//! [`Graph::backward`]. Nodes are appended in evaluation order, so the
//! node list is already a topological order and the backward sweep is a
//! single reverse pass.
//!
//! ```
//! use blindrestore::grad::Graph;
//! use blindrestore::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
//! let loss = g.sum_sq(x);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, 4.0]);
//! ```

use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SumSq(Var),
    /// Sum of absolute values; subgradient 0 at 0.
    L1(Var),
    /// max(0, x); derivative taken as 0 at 0.
    Relu(Var),
    Blur { input: Var, kernel: Var },
    Conv { input: Var, weight: Var, bias: Var },
    AvgPool(Var),
    Upsample(Var),
    Concat(Var, Var),
    Slice { src: Var, offset: usize },
    Decode { input: Var, codec: Codec },
    /// Forward difference along `axis` (1 = rows, 2 = columns) of a
    /// `(C, H, W)` tensor, zero in the last row/column.
    Diff { input: Var, axis: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar loss with respect to every node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).norm_sq());
        self.push(v, Op::SumSq(a))
    }

    pub fn l1(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).l1());
        self.push(v, Op::L1(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// One `(k, k)` kernel applied to every channel of `input`.
    pub fn blur(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let v = ops::blur(self.value(input), self.value(kernel))?;
        Ok(self.push(v, Op::Blur { input, kernel }))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let v = ops::conv2d(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(v, Op::Conv { input, weight, bias }))
    }

    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let v = ops::avg_pool2(self.value(a))?;
        Ok(self.push(v, Op::AvgPool(a)))
    }

    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let v = ops::upsample2(self.value(a))?;
        Ok(self.push(v, Op::Upsample(a)))
    }

    /// Channel concatenation of two `(C, H, W)` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, h, w) = self.value(a).dims3()?;
        let (cb, hb, wb) = self.value(b).dims3()?;
        if (h, w) != (hb, wb) {
            return Err(Error::shape(&[cb, h, w], &[cb, hb, wb]));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let v = Tensor::new(vec![ca + cb, h, w], data)?;
        Ok(self.push(v, Op::Concat(a, b)))
    }

    /// View `shape` elements of a flat parameter vector starting at `offset`.
    pub fn slice(&mut self, src: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data = self.value(src).data();
        if offset + n > data.len() {
            return Err(Error::Graph(format!(
                "slice [{offset}, {}) out of range for {} elements",
                offset + n,
                data.len()
            )));
        }
        let v = Tensor::new(shape.to_vec(), data[offset..offset + n].to_vec())?;
        Ok(self.push(v, Op::Slice { src, offset }))
    }

    pub fn decode(&mut self, input: Var, codec: &Codec) -> Result<Var> {
        let v = codec.decode(self.value(input))?;
        Ok(self.push(
            v,
            Op::Decode {
                input,
                codec: codec.clone(),
            },
        ))
    }

    pub fn diff(&mut self, input: Var, axis: usize) -> Result<Var> {
        let v = forward_diff(self.value(input), axis)?;
        Ok(self.push(v, Op::Diff { input, axis }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("unknown node {}", loss.0)));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            for (parent, contrib) in self.local_vjp(id, node, &g)? {
                if parent.0 >= id {
                    return Err(Error::Graph(format!(
                        "node {id} depends on later node {}",
                        parent.0
                    )));
                }
                accumulate(&mut grads[parent.0], contrib)?;
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn local_vjp(&self, id: usize, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let scalar = || g.data()[0];
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |x, y| x * y)?),
                (*b, g.zip_map(val(*a), |x, y| x * y)?),
            ],
            Op::Scale(a, k) => vec![(*a, g.scale(*k))],
            Op::Sum(a) => vec![(*a, Tensor::filled(val(*a).shape(), scalar()))],
            Op::SumSq(a) => {
                let s = 2.0 * scalar();
                vec![(*a, val(*a).scale(s))]
            }
            Op::L1(a) => {
                let s = scalar();
                vec![(*a, val(*a).map(|x| s * sign0(x)))]
            }
            Op::Relu(a) => vec![(*a, val(*a).zip_map(g, |x, gg| if x > 0.0 { gg } else { 0.0 })?)],
            Op::Blur { input, kernel } => {
                let (gx, gk) = ops::blur_vjp(val(*input), val(*kernel), g)?;
                vec![(*input, gx), (*kernel, gk)]
            }
            Op::Conv { input, weight, bias } => {
                let (gx, gw, gb) = ops::conv2d_vjp(val(*input), val(*weight), g)?;
                vec![(*input, gx), (*weight, gw), (*bias, gb)]
            }
            Op::AvgPool(a) => vec![(*a, ops::avg_pool2_vjp(val(*a).shape(), g)?)],
            Op::Upsample(a) => vec![(*a, ops::upsample2_vjp(g)?)],
            Op::Concat(a, b) => {
                let na = val(*a).len();
                let ga = Tensor::new(val(*a).shape().to_vec(), g.data()[..na].to_vec())?;
                let gb = Tensor::new(val(*b).shape().to_vec(), g.data()[na..].to_vec())?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Slice { src, offset } => {
                let mut full = Tensor::zeros(val(*src).shape());
                full.data_mut()[*offset..*offset + g.len()].copy_from_slice(g.data());
                vec![(*src, full)]
            }
            Op::Decode { input, codec } => vec![(*input, codec.decode_adjoint(g)?)],
            Op::Diff { input, axis } => vec![(*input, forward_diff_adjoint(g, *axis)?)],
        })
        .map(|v| {
            debug_assert!(v.iter().all(|(p, _)| p.0 < id));
            v
        })
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) -> Result<()> {
    match slot {
        Some(acc) => acc.axpy(1.0, &contrib),
        None => {
            *slot = Some(contrib);
            Ok(())
        }
    }
}

fn forward_diff(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let i = ch * h * w + y * w + xx;
                out[i] = match axis {
                    1 if y + 1 < h => d[i + w] - d[i],
                    2 if xx + 1 < w => d[i + 1] - d[i],
                    1 | 2 => 0.0,
                    _ => return Err(Error::Graph(format!("diff axis {axis} not in {{1, 2}}"))),
                };
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

fn forward_diff_adjoint(g: &Tensor, axis: usize) -> Result<Tensor> {
    let (c, h, w) = g.dims3()?;
    let gd = g.data();
    let mut out = vec![0.0; gd.len()];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let i = ch * h * w + y * w + xx;
                let (has_next, step) = match axis {
                    1 => (y + 1 < h, w),
                    2 => (xx + 1 < w, 1),
                    _ => return Err(Error::Graph(format!("diff axis {axis} not in {{1, 2}}"))),
                };
                if has_next {
                    out[i + step] += gd[i];
                    out[i] -= gd[i];
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            config,
        }
    }

    /// In-place update of `params` with gradient `g`.
    pub fn update(&mut self, params: &mut [f64], g: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || g.len() != self.m.len() {
            return Err(Error::shape(&[self.m.len()], &[params.len().max(g.len())]));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Value-semantic Adam step: returns the advanced state and new parameters.
pub fn adam_step(state: AdamState, params: &Tensor, g: &Tensor) -> Result<(AdamState, Tensor)> {
    params.ensure_same_shape(g)?;
    let mut state = state;
    let mut p = params.clone();
    state.update(p.data_mut(), g.data())?;
    Ok((state, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        a.distance(b).unwrap() / b.norm().max(1e-12)
    }

    #[test]
    fn squared_norm_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let l = g.sum_sq(x);
        assert_eq!(g.backward(l).unwrap().get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let c = g.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let l = g.sum_sq(c);
        assert_eq!(g.backward(l).unwrap().get(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[3]));
        assert!(matches!(g.backward(x), Err(Error::Graph(_))));
    }

    #[test]
    fn blur_residual_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Tensor::randn(&[1, 5, 5], &mut rng);
        let k0 = Tensor::randn(&[3, 3], &mut rng);
        let y = Tensor::randn(&[1, 5, 5], &mut rng);
        let loss = |x: &Tensor, k: &Tensor| ops::blur(x, k).unwrap().sub(&y).unwrap().norm_sq();
        let mut g = Graph::new();
        let xv = g.leaf(x0.clone());
        let kv = g.leaf(k0.clone());
        let yv = g.leaf(y.clone());
        let b = g.blur(xv, kv).unwrap();
        let r = g.sub(yv, b).unwrap();
        let l = g.sum_sq(r);
        let grads = g.backward(l).unwrap();
        assert!(rel_err(&grads.get(xv), &fd_grad(|x| loss(x, &k0), &x0, 1e-5)) < 1e-4);
        assert!(rel_err(&grads.get(kv), &fd_grad(|k| loss(&x0, k), &k0, 1e-5)) < 1e-4);
    }

    #[test]
    fn network_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x0 = Tensor::randn(&[2, 4, 4], &mut rng);
        let w0 = Tensor::randn(&[3, 2, 3, 3], &mut rng);
        let b0 = Tensor::randn(&[3], &mut rng);
        let codec = Codec::new(CodecKind::Haar, &[2, 4, 4]).unwrap();
        let build = |g: &mut Graph, x: &Tensor, w: &Tensor| {
            let xv = g.leaf(x.clone());
            let wv = g.leaf(w.clone());
            let bv = g.leaf(b0.clone());
            let d = g.decode(xv, &codec).unwrap();
            let c = g.conv2d(d, wv, bv).unwrap();
            let r = g.relu(c);
            let p = g.avg_pool2(r).unwrap();
            let u = g.upsample2(p).unwrap();
            let cat = g.concat(u, d).unwrap();
            let m = g.mul(cat, cat).unwrap();
            let dx = g.diff(m, 2).unwrap();
            let dy = g.diff(m, 1).unwrap();
            let s = g.add(dx, dy).unwrap();
            let a = g.sum_sq(s);
            let l1 = g.l1(wv);
            let l1s = g.scale(l1, 0.5);
            let l = g.add(a, l1s).unwrap();
            (xv, wv, l)
        };
        let f = |x: &Tensor, w: &Tensor| {
            let mut g = Graph::new();
            let (_, _, l) = build(&mut g, x, w);
            g.scalar_value(l)
        };
        let mut g = Graph::new();
        let (xv, wv, l) = build(&mut g, &x0, &w0);
        let grads = g.backward(l).unwrap();
        assert!(rel_err(&grads.get(xv), &fd_grad(|x| f(x, &w0), &x0, 1e-5)) < 1e-4);
        assert!(rel_err(&grads.get(wv), &fd_grad(|w| f(&x0, w), &w0, 1e-5)) < 1e-4);
    }

    #[test]
    fn slice_scatters_back() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::new(vec![5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let s = g.slice(p, 1, &[2]).unwrap();
        let l = g.sum_sq(s);
        assert_eq!(g.backward(l).unwrap().get(p).data(), &[0.0, 4.0, 6.0, 0.0, 0.0]);
        assert!(g.slice(p, 4, &[2]).is_err());
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let st = AdamState::new(3, AdamConfig::default());
        let p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let (st, q) = adam_step(st, &p, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(q, p);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let cfg = AdamConfig::default();
        let p = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let g = Tensor::new(vec![2], vec![3.0, -0.25]).unwrap();
        let (_, q) = adam_step(AdamState::new(2, cfg), &p, &g).unwrap();
        assert!((q.data()[0] + cfg.lr).abs() < 1e-8);
        assert!((q.data()[1] - cfg.lr).abs() < 1e-8);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let cfg = AdamConfig { lr: 0.3, ..AdamConfig::default() };
        let mut st = AdamState::new(1, cfg);
        let mut w = [0.0];
        for _ in 0..50 {
            let g = [2.0 * (w[0] - 3.0)];
            st.update(&mut w, &g).unwrap();
        }
        assert!((w[0] - 3.0).abs() < 0.1, "w = {}", w[0]);
    }
}

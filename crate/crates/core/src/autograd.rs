//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction and [`Graph::backward`] is a single reverse sweep.
//!
//! Leaves created with `requires_grad = true` (see [`Graph::leaf`] and
//! [`Graph::param`]) receive gradients; everything computed only from constants
//! stays a constant node and is skipped during the sweep.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{self, axpy, conv2d_backward, conv2d_forward, dims2, dims3, ConvGeom, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Silu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    FrobeniusSq(Var),
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    ChannelBias(Var, Var),
    ConcatChannels(Vec<Var>),
    AvgPool(Var, usize),
    Upsample(Var, usize),
    SpaceToDepth(Var, usize),
    DepthToSpace(Var, usize),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Mse(a, b) | MatMul(a, b) | ChannelBias(a, b) => {
                vec![*a, *b]
            }
            Conv2d { x, k, .. } => vec![*x, *k],
            Scale(a, _) | AddScalar(a) | Relu(a) | Silu(a) | Tanh(a) | Sigmoid(a) | Sum(a)
            | Mean(a) | FrobeniusSq(a) | Reshape(a) | Transpose(a) | AvgPool(a, _)
            | Upsample(a, _) | SpaceToDepth(a, _) | DepthToSpace(a, _) => vec![*a],
            ConcatChannels(vs) => vs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a named parameter once per graph; later calls with the same
    /// name return the existing leaf so that gradients from every use
    /// accumulate into one node.
    pub fn param(&mut self, name: &str, value: &Tensor, requires_grad: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), requires_grad);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Registers an existing node under a parameter name, so later
    /// [`Graph::param`] calls with that name resolve to it.
    pub fn bind_param(&mut self, name: &str, v: Var) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::contract(format!("parameter {name} already bound")));
        }
        self.params.insert(name.to_string(), v);
        Ok(())
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated into `v` by the last [`Graph::backward`], if any
    /// path reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape mirrors value"))
    }

    pub fn param_grad(&self, name: &str) -> Option<Tensor> {
        self.param_var(name).and_then(|v| self.grad(v))
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_raw(value, op, requires_grad)
    }

    fn check_same(&self, a: Var, b: Var, op: &str) -> Result<()> {
        tensor::same_shape(self.value(a), self.value(b), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mse")?;
        let (x, y) = (self.value(a), self.value(b));
        let n = x.len() as f64;
        let s: f64 = x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b)))
    }

    pub fn frobenius_norm_sq(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sq_norm());
        self.push(v, Op::FrobeniusSq(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose2()?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(k), padding)?;
        let mut out = vec![0.0; geom.out_len()];
        conv2d_forward(&geom, self.value(x).data(), self.value(k).data(), &mut out);
        let v = Tensor::new(&[geom.c_out, geom.h_out, geom.w_out], out)?;
        Ok(self.push(v, Op::Conv2d { x, k, geom }))
    }

    /// Adds `bias[c]` to every pixel of channel `c` of a c×h×w tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let [c, h, w] = dims3(self.value(x), "channel bias input")?;
        if self.value(bias).len() != c {
            return Err(Error::dim(format!(
                "channel bias of shape {:?} does not match input {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let mut data = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for (ch, plane) in data.chunks_exact_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|p| *p += b[ch]);
        }
        let v = Tensor::new(&[c, h, w], data)?;
        Ok(self.push(v, Op::ChannelBias(x, bias)))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let [_, h, w] = dims3(self.value(*first), "concat")?;
        let mut c_total = 0;
        let mut data = Vec::new();
        for &p in parts {
            let [c, ph, pw] = dims3(self.value(p), "concat")?;
            if (ph, pw) != (h, w) {
                return Err(Error::dim(format!(
                    "concat spatial mismatch: {:?} vs {:?}",
                    self.shape(*first),
                    self.shape(p)
                )));
            }
            c_total += c;
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(&[c_total, h, w], data)?;
        Ok(self.push(v, Op::ConcatChannels(parts.to_vec())))
    }

    /// Box-average pooling with window and stride `f`.
    pub fn avg_pool(&mut self, x: Var, f: usize) -> Result<Var> {
        let v = avg_pool(self.value(x), f)?;
        Ok(self.push(v, Op::AvgPool(x, f)))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, f: usize) -> Result<Var> {
        let v = upsample_nearest(self.value(x), f)?;
        Ok(self.push(v, Op::Upsample(x, f)))
    }

    /// Folds each `f×f` spatial block into channels: c×h×w → (c·f²)×(h/f)×(w/f).
    pub fn space_to_depth(&mut self, x: Var, f: usize) -> Result<Var> {
        let v = space_to_depth(self.value(x), f)?;
        Ok(self.push(v, Op::SpaceToDepth(x, f)))
    }

    /// Inverse of [`Graph::space_to_depth`].
    pub fn depth_to_space(&mut self, x: Var, f: usize) -> Result<Var> {
        let v = depth_to_space(self.value(x), f)?;
        Ok(self.push(v, Op::DepthToSpace(x, f)))
    }

    /// Propagates d`loss`/d`v` to every node that requires a gradient.
    /// Gradients accumulate, so calling this twice on the same tape sums the
    /// contributions.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::contract(
                "loss does not depend on any tensor that requires grad",
            ));
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (input, contrib) in self.local_grads(i, &op, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut pending[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot => *slot = Some(contrib),
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, c)| *a += c),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, op: &Op, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = self.nodes[i].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => vec![
                (*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect()),
                (*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect()),
            ],
            Op::Scale(a, s) => vec![(*a, g.iter().map(|x| x * s).collect())],
            Op::AddScalar(a) | Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Relu(a) => vec![(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            )],
            Op::Silu(a) => vec![(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect(),
            )],
            Op::Tanh(a) => vec![(*a, g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect())],
            Op::Sigmoid(a) => vec![(*a, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect())],
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::Mse(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let c = 2.0 * g[0] / x.len() as f64;
                let da: Vec<f64> = x.iter().zip(y).map(|(p, q)| c * (p - q)).collect();
                let db = da.iter().map(|v| -v).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::FrobeniusSq(a) => vec![(*a, val(*a).iter().map(|x| 2.0 * g[0] * x).collect())],
            Op::Transpose(a) => {
                let [m, n] = dims2(&self.nodes[a.0].value, "").expect("checked in forward");
                // output is n×m
                let mut d = vec![0.0; m * n];
                for r in 0..n {
                    for c in 0..m {
                        d[c * n + r] = g[r * m + c];
                    }
                }
                vec![(*a, d)]
            }
            Op::MatMul(a, b) => {
                let [m, k] = dims2(&self.nodes[a.0].value, "").expect("checked in forward");
                let n = self.nodes[b.0].value.shape()[1];
                let mut res = Vec::with_capacity(2);
                if wants(*a) {
                    // dA = G · Bᵀ
                    let bv = val(*b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] = tensor::dot(&g[i * n..(i + 1) * n], &bv[p * n..(p + 1) * n]);
                        }
                    }
                    res.push((*a, da));
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    let av = val(*a);
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            axpy(av[i * k + p], &g[i * n..(i + 1) * n], &mut db[p * n..(p + 1) * n]);
                        }
                    }
                    res.push((*b, db));
                }
                res
            }
            Op::Conv2d { x, k, geom } => {
                let mut dx = wants(*x).then(|| vec![0.0; val(*x).len()]);
                let mut dk = wants(*k).then(|| vec![0.0; val(*k).len()]);
                conv2d_backward(geom, val(*x), val(*k), g, dx.as_deref_mut(), dk.as_deref_mut());
                let mut res = Vec::with_capacity(2);
                if let Some(d) = dx {
                    res.push((*x, d));
                }
                if let Some(d) = dk {
                    res.push((*k, d));
                }
                res
            }
            Op::ChannelBias(x, b) => {
                let c = val(*b).len();
                let hw = g.len() / c;
                let db = g.chunks_exact(hw).map(|p| p.iter().sum()).collect();
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::ConcatChannels(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let n = val(*p).len();
                        let piece = g[offset..offset + n].to_vec();
                        offset += n;
                        (*p, piece)
                    })
                    .collect()
            }
            Op::AvgPool(x, f) => {
                let [c, h, w] = dims3(&self.nodes[x.0].value, "").expect("checked in forward");
                let (ho, wo) = (h / f, w / f);
                let inv = 1.0 / (f * f) as f64;
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            d[(ch * h + y) * w + xx] = g[(ch * ho + y / f) * wo + xx / f] * inv;
                        }
                    }
                }
                vec![(*x, d)]
            }
            Op::Upsample(x, f) => {
                let [c, h, w] = dims3(&self.nodes[x.0].value, "").expect("checked in forward");
                let (ho, wo) = (h * f, w * f);
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            d[(ch * h + y / f) * w + xx / f] += g[(ch * ho + y) * wo + xx];
                        }
                    }
                }
                vec![(*x, d)]
            }
            Op::SpaceToDepth(x, f) => {
                let out = &self.nodes[i].value;
                let g = Tensor::new(out.shape(), g.to_vec()).expect("grad mirrors value");
                vec![(*x, depth_to_space(&g, *f).expect("shape checked in forward").into_data())]
            }
            Op::DepthToSpace(x, f) => {
                let out = &self.nodes[i].value;
                let g = Tensor::new(out.shape(), g.to_vec()).expect("grad mirrors value");
                vec![(*x, space_to_depth(&g, *f).expect("shape checked in forward").into_data())]
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn avg_pool(t: &Tensor, f: usize) -> Result<Tensor> {
    let [c, h, w] = dims3(t, "avg_pool")?;
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::dim(format!(
            "avg_pool factor {f} does not divide {:?}",
            t.shape()
        )));
    }
    let (ho, wo) = (h / f, w / f);
    let inv = 1.0 / (f * f) as f64;
    let src = t.data();
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * ho + y / f) * wo + x / f] += src[(ch * h + y) * w + x];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(&[c, ho, wo], out)
}

pub(crate) fn upsample_nearest(t: &Tensor, f: usize) -> Result<Tensor> {
    let [c, h, w] = dims3(t, "upsample")?;
    if f == 0 {
        return Err(Error::dim("upsample factor must be positive"));
    }
    let (ho, wo) = (h * f, w * f);
    let src = t.data();
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                out[(ch * ho + y) * wo + x] = src[(ch * h + y / f) * w + x / f];
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

// channel index of sub-pixel (dy, dx) of input channel c is (c·f + dy)·f + dx
pub(crate) fn space_to_depth(t: &Tensor, f: usize) -> Result<Tensor> {
    let [c, h, w] = dims3(t, "space_to_depth")?;
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::dim(format!(
            "space_to_depth factor {f} does not divide {:?}",
            t.shape()
        )));
    }
    let (ho, wo) = (h / f, w / f);
    let src = t.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let oc = (ch * f + y % f) * f + x % f;
                out[(oc * ho + y / f) * wo + x / f] = src[(ch * h + y) * w + x];
            }
        }
    }
    Tensor::new(&[c * f * f, ho, wo], out)
}

pub(crate) fn depth_to_space(t: &Tensor, f: usize) -> Result<Tensor> {
    let [cf, h, w] = dims3(t, "depth_to_space")?;
    if f == 0 || cf % (f * f) != 0 {
        return Err(Error::dim(format!(
            "depth_to_space factor {f} does not divide channels of {:?}",
            t.shape()
        )));
    }
    let c = cf / (f * f);
    let (ho, wo) = (h * f, w * f);
    let src = t.data();
    let mut out = vec![0.0; cf * h * w];
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let ic = (ch * f + y % f) * f + x % f;
                out[(ch * ho + y) * wo + x] = src[(ic * h + y / f) * w + x / f];
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap(), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let mut g = Graph::new();
        let xv = Tensor::new(&[4], vec![1.0, -2.0, 0.25, 3.0]).unwrap();
        let x = g.leaf(xv.clone(), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let l = g.scale(s, 0.5);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), xv);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_do_not_record_gradients() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::ones(&[3]));
        let x = g.leaf(Tensor::ones(&[3]), true);
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        let scaled = g.scale(c, 2.0);
        assert!(!g.requires_grad(scaled));
    }

    #[test]
    fn reused_input_accumulates_both_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xv = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let mv = Tensor::randn(&[3, 3], 1.0, &mut rng);

        // x feeds both operands of the matmul and the silu branch
        let mut g = Graph::new();
        let x = g.leaf(xv.clone(), true);
        let m = g.constant(mv.clone());
        let p = g.matmul(x, x).unwrap();
        let s = g.silu(x);
        let q = g.mul(s, m).unwrap();
        let r = g.add(p, q).unwrap();
        let l = g.sum(r);
        g.backward(l).unwrap();
        let shared = g.grad(x).unwrap();

        // same graph with every use given its own copy
        let mut h = Graph::new();
        let x1 = h.leaf(xv.clone(), true);
        let x2 = h.leaf(xv.clone(), true);
        let x3 = h.leaf(xv, true);
        let m = h.constant(mv);
        let p = h.matmul(x1, x2).unwrap();
        let s = h.silu(x3);
        let q = h.mul(s, m).unwrap();
        let r = h.add(p, q).unwrap();
        let l = h.sum(r);
        h.backward(l).unwrap();
        let mut unrolled = h.grad(x1).unwrap();
        for extra in [h.grad(x2).unwrap(), h.grad(x3).unwrap()] {
            unrolled = unrolled.zip_map(&extra, |a, b| a + b).unwrap();
        }
        assert!(shared.max_abs_diff(&unrolled) < 1e-12);
    }

    #[test]
    fn backward_is_linear_in_loss_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xv = Tensor::randn(&[1, 4, 4], 1.0, &mut rng);
        let kv = Tensor::randn(&[2, 1, 3, 3], 1.0, &mut rng);
        let grads = |alpha: f64| {
            let mut g = Graph::new();
            let x = g.leaf(xv.clone(), true);
            let k = g.leaf(kv.clone(), true);
            let y = g.conv2d(x, k, 1).unwrap();
            let y = g.tanh(y);
            let l = g.frobenius_norm_sq(y);
            let l = g.scale(l, alpha);
            g.backward(l).unwrap();
            (g.grad(x).unwrap(), g.grad(k).unwrap())
        };
        let (bx, bk) = grads(1.0);
        for alpha in [-2.0, 0.5, 3.0] {
            let (gx, gk) = grads(alpha);
            assert!(gx.max_abs_diff(&bx.map(|v| v * alpha)) < 1e-12);
            assert!(gk.max_abs_diff(&bk.map(|v| v * alpha)) < 1e-12);
        }
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2, 4, 6]), true);
        let p = g.avg_pool(x, 2).unwrap();
        assert_eq!(g.shape(p), &[2, 2, 3]);
        let u = g.upsample(p, 2).unwrap();
        assert_eq!(g.value(u), &Tensor::ones(&[2, 4, 6]));
        assert!(g.avg_pool(x, 4).is_err());
    }

    #[test]
    fn pixel_shuffle_round_trip_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xv = Tensor::randn(&[2, 4, 6], 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.leaf(xv.clone(), true);
        let d = g.space_to_depth(x, 2).unwrap();
        assert_eq!(g.shape(d), &[8, 2, 3]);
        // channel 1 of the folded tensor holds the (0, 1) sub-pixels of channel 0
        assert_eq!(g.value(d).data()[6], xv.data()[1]);
        let back = g.depth_to_space(d, 2).unwrap();
        assert_eq!(g.value(back), &xv);
        let err = crate::gradcheck::finite_diff_check(
            |g, x| {
                let d = g.space_to_depth(x, 2)?;
                let w = g.constant(Tensor::randn(&[8, 2, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
                let p = g.mul(d, w)?;
                let p = g.tanh(p);
                let u = g.depth_to_space(p, 2)?;
                Ok(g.frobenius_norm_sq(u))
            },
            &xv,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}

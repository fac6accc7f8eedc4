//! Eager tape: every op computes its value immediately and records what the
//! backward sweep needs. A graph is owned by one thread; distinct graphs may
//! run concurrently against a shared read-only [`ParamStore`].

use std::collections::BTreeMap;

use super::conv::{col2im, im2col, ConvGeom};
use super::{dims3, shape_str, ParamId, ParamStore, Tensor};
use crate::error::{FanError, Result};
use crate::scalar::{sigmoid, Scalar};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        /// Column matrix of the input; empty for pointwise convs.
        cols: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulChannels { x: Var, gate: Var },
    Upsample2(Var),
    Reshape(Var),
    ChwToHwc(Var),
    Sum(Var),
    Mean(Var),
    /// Scalar reduction whose derivative w.r.t. each input element was
    /// computed analytically alongside the value.
    Reduce { x: Var, local_grad: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls with the same id
    /// return the same node, so shared parameters accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    /// Parameter leaves created so far.
    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    /// 2-D convolution of `x: [C, H, W]` with `w: [O, C, k, k]` and optional
    /// bias `[O]`, zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [c, h, wd] = dims3("conv2d", self.shape(x))?;
        let ws = self.shape(w).to_vec();
        let (o, k) = match ws[..] {
            [o, ci, k1, k2] if ci == c && k1 == k2 => (o, k1),
            _ => {
                return Err(FanError::shape(
                    "conv2d",
                    format!("weight [O, {c}, k, k]"),
                    shape_str(&ws),
                ))
            }
        };
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(FanError::shape("conv2d", format!("bias [{o}]"), shape_str(self.shape(b))));
            }
        }
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(FanError::shape("conv2d", "input at least kernel size", shape_str(self.shape(x))));
        }
        let geom = ConvGeom { in_channels: c, out_channels: o, height: h, width: wd, kernel: k, stride, pad };
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            let mut cols = vec![T::zero(); geom.col_rows() * geom.out_pixels()];
            im2col(&geom, self.value(x).data(), &mut cols);
            cols
        };
        let mut out = vec![T::zero(); o * ho * wo];
        if let Some(b) = b {
            for (oc, bias) in self.value(b).data().iter().enumerate() {
                out[oc * ho * wo..(oc + 1) * ho * wo].iter_mut().for_each(|v| *v = *bias);
            }
        }
        {
            let colm: &[T] = if geom.is_pointwise() { self.value(x).data() } else { &cols };
            T::gemm(o, geom.col_rows(), ho * wo, self.value(w).data(), false, colm, false, &mut out, b.is_some());
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![o, ho, wo], out)?;
        Ok(self.push(value, Op::Conv { x, w, b, geom, cols }, rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x);
        let value = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&v| f(v)).collect() };
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    /// Sign of every ReLU input in construction order: the linear region
    /// the graph was evaluated in.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).data.iter().map(|&v| v > T::zero()))
            .collect()
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(FanError::shape(op, shape_str(self.shape(a)), shape_str(self.shape(b))));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// `x: [C, H, W]` times a single-channel `gate: [1, H, W]` broadcast over channels.
    pub fn mul_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let [c, h, w] = dims3("mul_channels", self.shape(x))?;
        if self.shape(gate) != [1, h, w] {
            return Err(FanError::shape("mul_channels", format!("gate [1, {h}, {w}]"), shape_str(self.shape(gate))));
        }
        let (tx, tg) = (self.value(x), self.value(gate));
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let plane = &tx.data[ch * h * w..(ch + 1) * h * w];
            data.extend(plane.iter().zip(&tg.data).map(|(&a, &g)| a * g));
        }
        let rg = self.rg(x) || self.rg(gate);
        let value = Tensor { shape: vec![c, h, w], data };
        Ok(self.push(value, Op::MulChannels { x, gate }, rg))
    }

    /// Nearest-neighbour ×2 upsampling of `[C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let [c, h, w] = dims3("upsample2", self.shape(x))?;
        let t = self.value(x);
        let (h2, w2) = (2 * h, 2 * w);
        let mut data = vec![T::zero(); c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                let src = &t.data[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
                let dst = &mut data[(ch * h2 + y) * w2..(ch * h2 + y + 1) * w2];
                for (xo, v) in dst.iter_mut().enumerate() {
                    *v = src[xo / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![c, h2, w2], data }, Op::Upsample2(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `[C, H, W]` → `[H, W, C]`.
    pub fn chw_to_hwc(&mut self, x: Var) -> Result<Var> {
        let [c, h, w] = dims3("chw_to_hwc", self.shape(x))?;
        let t = self.value(x);
        let mut data = vec![T::zero(); c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                data[p * c + ch] = t.data[ch * h * w + p];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![h, w, c], data }, Op::ChwToHwc(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = T::from_usize(t.numel().max(1)).expect("count");
        let s: T = t.data.iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s / n), Op::Mean(x), rg)
    }

    /// Records a scalar computed outside the graph together with its
    /// analytic derivative with respect to every element of `x`.
    pub fn reduce_with_grad(&mut self, x: Var, value: T, local_grad: Vec<T>) -> Result<Var> {
        if local_grad.len() != self.value(x).numel() {
            return Err(FanError::shape(
                "reduce_with_grad",
                format!("{} gradient entries", self.value(x).numel()),
                format!("{}", local_grad.len()),
            ));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(value), Op::Reduce { x, local_grad }, rg))
    }

    /// Reverse sweep from a one-element root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop_node(node, &gy, &mut grads);
            }
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.rg(v) {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(g);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom, cols } => {
                let (o, rows, px) = (geom.out_channels, geom.col_rows(), geom.out_pixels());
                let colm: &[T] = if geom.is_pointwise() { self.value(*x).data() } else { cols };
                acc(*w, &mut |g| T::gemm(o, px, rows, gy, false, colm, true, g, true));
                if let Some(b) = b {
                    acc(*b, &mut |g| {
                        for (oc, gb) in g.iter_mut().enumerate() {
                            *gb = *gb + gy[oc * px..(oc + 1) * px].iter().copied().sum();
                        }
                    });
                }
                let wt = self.value(*w).data();
                acc(*x, &mut |g| {
                    if geom.is_pointwise() {
                        T::gemm(rows, o, px, wt, true, gy, false, g, true);
                    } else {
                        let mut dcols = vec![T::zero(); rows * px];
                        T::gemm(rows, o, px, wt, true, gy, false, &mut dcols, false);
                        col2im(geom, &dcols, g);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |g| {
                    for ((gi, &xi), &gyi) in g.iter_mut().zip(xv).zip(gy) {
                        if xi > T::zero() {
                            *gi = *gi + gyi;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                acc(*x, &mut |g| {
                    for ((gi, &yi), &gyi) in g.iter_mut().zip(yv).zip(gy) {
                        *gi = *gi + gyi * yi * (T::one() - yi);
                    }
                });
            }
            Op::Exp(x) => {
                let yv = node.value.data();
                acc(*x, &mut |g| {
                    for ((gi, &yi), &gyi) in g.iter_mut().zip(yv).zip(gy) {
                        *gi = *gi + gyi * yi;
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| add_into(g, gy));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |g| {
                    for ((gi, &bi), &gyi) in g.iter_mut().zip(bv).zip(gy) {
                        *gi = *gi + gyi * bi;
                    }
                });
                acc(*b, &mut |g| {
                    for ((gi, &ai), &gyi) in g.iter_mut().zip(av).zip(gy) {
                        *gi = *gi + gyi * ai;
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |g| {
                    for (gi, &gyi) in g.iter_mut().zip(gy) {
                        *gi = *gi + gyi * *c;
                    }
                });
            }
            Op::MulChannels { x, gate } => {
                let (xv, gv) = (self.value(*x).data(), self.value(*gate).data());
                let hw = gv.len();
                let c = xv.len() / hw;
                acc(*x, &mut |g| {
                    for ch in 0..c {
                        let r = ch * hw..(ch + 1) * hw;
                        for ((gi, &gg), &gyi) in g[r.clone()].iter_mut().zip(gv).zip(&gy[r]) {
                            *gi = *gi + gyi * gg;
                        }
                    }
                });
                acc(*gate, &mut |g| {
                    for ch in 0..c {
                        let r = ch * hw..(ch + 1) * hw;
                        for ((gi, &xi), &gyi) in g.iter_mut().zip(&xv[r.clone()]).zip(&gy[r]) {
                            *gi = *gi + gyi * xi;
                        }
                    }
                });
            }
            Op::Upsample2(x) => {
                let [c, h, w] = dims3("upsample2", self.shape(*x)).expect("checked in forward");
                let w2 = 2 * w;
                acc(*x, &mut |g| {
                    for ch in 0..c {
                        for y in 0..2 * h {
                            let row = &gy[(ch * 2 * h + y) * w2..(ch * 2 * h + y + 1) * w2];
                            let dst = &mut g[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
                            for (xo, &v) in row.iter().enumerate() {
                                dst[xo / 2] = dst[xo / 2] + v;
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |g| add_into(g, gy)),
            Op::ChwToHwc(x) => {
                let [c, h, w] = dims3("chw_to_hwc", self.shape(*x)).expect("checked in forward");
                acc(*x, &mut |g| {
                    for ch in 0..c {
                        for p in 0..h * w {
                            g[ch * h * w + p] = g[ch * h * w + p] + gy[p * c + ch];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|gi| *gi = *gi + gy[0])),
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).numel().max(1)).expect("count");
                acc(*x, &mut |g| g.iter_mut().for_each(|gi| *gi = *gi + gy[0] / n));
            }
            Op::Reduce { x, local_grad } => acc(*x, &mut |g| {
                for (gi, &li) in g.iter_mut().zip(local_grad) {
                    *gi = *gi + gy[0] * li;
                }
            }),
        }
    }
}

fn add_into<T: Scalar>(g: &mut [T], src: &[T]) {
    for (a, &b) in g.iter_mut().zip(src) {
        *a = *a + b;
    }
}

/// Result of [`Graph::backward`]: accumulated adjoints per node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Adjoint of `v`; `None` if `v` does not influence the root or is a constant.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter gradient of `graph` into `sink`, indexed by [`ParamId`].
    pub fn accumulate_params(&self, graph: &Graph<T>, sink: &mut [Vec<T>]) {
        for (pid, var) in graph.param_vars() {
            if let Some(g) = self.get(var) {
                add_into(&mut sink[pid.0], g);
            }
        }
    }
}

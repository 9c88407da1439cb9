use rand::Rng;

use super::{Tensor, TensorError};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pairwise combination used by [`Graph::outer`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OuterKind {
    Add,
    Sub,
    Mul,
    /// `a_i / (b_j + eps)`
    Div { eps: f64 },
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Conv1x1 {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    PadFront(Var),
    Outer {
        a: Var,
        b: Var,
        kind: OuterKind,
    },
    Stack(Vec<Var>),
    Reshape(Var),
    ConcatCols(Var, Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// A single forward pass recorded for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Gradient buffer of `v`, allocated on first use; `None` when `v` does not
/// require a gradient.
fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut [f64]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(
        grads[v.0]
            .get_or_insert_with(|| vec![0.0; node.value.len()])
            .as_mut_slice(),
    )
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_node(value, op, requires_grad)
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf; gradients are accumulated for it only if `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
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

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn matmul(&mut self, x: Var, y: Var) -> Result<Var, TensorError> {
        let (xs, ys) = (self.shape(x), self.shape(y));
        if xs.len() != 2 || ys.len() != 2 || xs[1] != ys[0] {
            return Err(shape_err("matmul", xs, ys));
        }
        let (m, k, n) = (xs[0], xs[1], ys[1]);
        let xd = self.value(x).data();
        let yd = self.value(y).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let xv = xd[i * k + p];
                if xv == 0.0 {
                    continue;
                }
                for (o, &yv) in row.iter_mut().zip(&yd[p * n..(p + 1) * n]) {
                    *o += xv * yv;
                }
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(x, y), &[x, y]))
    }

    /// `x + bias` where `bias` matches the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        let d = *xs.last().unwrap();
        if bs.len() != 1 || bs[0] != d {
            return Err(shape_err("add_bias", xs, bs));
        }
        let bd = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(bd) {
                *o += b;
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var, TensorError> {
        self.same_shape("add", x, y)?;
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(self.value(y).data())
            .map(|(a, b)| a + b)
            .collect();
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(value, Op::Add(x, y), &[x, y]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", x, y)?;
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(self.value(y).data())
            .map(|(a, b)| a * b)
            .collect();
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(value, Op::Mul(x, y), &[x, y]))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let value = self.map_value(x, |v| -v);
        self.push(value, Op::Neg(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.map_value(x, |v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.map_value(x, stable_sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape(), out).unwrap();
        self.push(value, Op::SoftmaxRows(x), &[x])
    }

    /// Normalizes each row of the last axis to zero mean and unit variance
    /// (biased variance, epsilon 1e-5), then applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        const EPS: f64 = 1e-5;
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(shape_err("layer_norm", &xs, self.shape(p)));
            }
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + EPS).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = gd[j] * h + bd[j];
            }
        }
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)` during
    /// training; evaluation returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Param(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let out = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape(), out)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Pointwise convolution: `x` is `[batch, C, H, W]`, `weight` is
    /// `[Cout, C]` and `bias` is `[Cout]`.
    pub fn conv2d_1x1(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(shape_err("conv2d_1x1", &xs, &ws));
        }
        if self.shape(bias) != [ws[0]] {
            return Err(shape_err("conv2d_1x1", &ws, self.shape(bias)));
        }
        let (batch, c, hw, cout) = (xs[0], xs[1], xs[2] * xs[3], ws[0]);
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; batch * cout * hw];
        for n in 0..batch {
            for o in 0..cout {
                let dst = &mut out[(n * cout + o) * hw..(n * cout + o + 1) * hw];
                dst.fill(bd[o]);
                for ch in 0..c {
                    let w = wd[o * c + ch];
                    let src = &xd[(n * c + ch) * hw..(n * c + ch + 1) * hw];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        let value = Tensor::new(&[batch, cout, xs[2], xs[3]], out)?;
        Ok(self.push(value, Op::Conv1x1 { x, w: weight, b: bias }, &[x, weight, bias]))
    }

    /// Square-kernel 2-d convolution with zero padding: `x` is
    /// `[batch, Cin, H, W]`, `weight` is `[Cout, Cin, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        if self.shape(bias) != [ws[0]] {
            return Err(shape_err("conv2d", &ws, self.shape(bias)));
        }
        let k = ws[2];
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        let geo = ConvGeometry::new(&xs, &ws, stride, pad);
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; geo.batch * geo.cout * geo.ho * geo.wo];
        geo.for_each_tap(|oi, xi, wi| {
            if let Some(xi) = xi {
                out[oi] += wd[wi] * xd[xi];
            }
        });
        for (i, v) in out.iter_mut().enumerate() {
            *v += bd[(i / (geo.ho * geo.wo)) % geo.cout];
        }
        let value = Tensor::new(&[geo.batch, geo.cout, geo.ho, geo.wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w: weight,
                b: bias,
                stride,
                pad,
            },
            &[x, weight, bias],
        ))
    }

    /// Mean over the spatial axes of `[batch, C, H, W]`, giving `[batch, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("global_avg_pool", &xs, &[0, 0, 0, 0]));
        }
        let hw = xs[2] * xs[3];
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(&[xs[0], xs[1]], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits` (`[batch, classes]`). Returns a one-element tensor.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(shape_err("cross_entropy", &ls, &[labels.len()]));
        }
        let classes = ls[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::Data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(classes).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            softmax_in_place(row);
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Prepends a constant column: `[batch, N]` becomes `[batch, N + 1]`.
    pub fn pad_front(&mut self, x: Var, value: f64) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(shape_err("pad_front", &xs, &[0, 0]));
        }
        let n = xs[1];
        let mut out = Vec::with_capacity(xs[0] * (n + 1));
        for row in self.value(x).data().chunks(n) {
            out.push(value);
            out.extend_from_slice(row);
        }
        let value = Tensor::new(&[xs[0], n + 1], out)?;
        Ok(self.push(value, Op::PadFront(x), &[x]))
    }

    /// Batched outer combination: `a` is `[batch, N]`, `b` is `[batch, M]`,
    /// the result is `[batch, N, M]` with entry `(i, j)` = `a_i ∘ b_j`.
    pub fn outer(&mut self, a: Var, b: Var, kind: OuterKind) -> Result<Var, TensorError> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 2 || bs.len() != 2 || as_[0] != bs[0] {
            return Err(shape_err("outer", &as_, &bs));
        }
        let (batch, n, m) = (as_[0], as_[1], bs[1]);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(batch * n * m);
        for s in 0..batch {
            let arow = &ad[s * n..(s + 1) * n];
            let brow = &bd[s * m..(s + 1) * m];
            for &ai in arow {
                out.extend(brow.iter().map(|&bj| match kind {
                    OuterKind::Add => ai + bj,
                    OuterKind::Sub => ai - bj,
                    OuterKind::Mul => ai * bj,
                    OuterKind::Div { eps } => ai / (bj + eps),
                }));
            }
        }
        let value = Tensor::new(&[batch, n, m], out)?;
        Ok(self.push(value, Op::Outer { a, b, kind }, &[a, b]))
    }

    /// Stacks `[batch, H, W]` maps along a new channel axis at position 1.
    pub fn stack_channels(&mut self, maps: &[Var]) -> Result<Var, TensorError> {
        let first = maps
            .first()
            .ok_or_else(|| TensorError::Param("stack_channels needs at least one map".into()))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 3 {
            return Err(shape_err("stack_channels", &s0, &[0, 0, 0]));
        }
        for m in maps {
            if self.shape(*m) != s0.as_slice() {
                return Err(shape_err("stack_channels", &s0, self.shape(*m)));
            }
        }
        let (batch, hw) = (s0[0], s0[1] * s0[2]);
        let mut out = Vec::with_capacity(batch * maps.len() * hw);
        for n in 0..batch {
            for m in maps {
                out.extend_from_slice(&self.value(*m).data()[n * hw..(n + 1) * hw]);
            }
        }
        let value = Tensor::new(&[batch, maps.len(), s0[1], s0[2]], out)?;
        Ok(self.push(value, Op::Stack(maps.to_vec()), maps))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Flattens everything after the leading batch axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        let batch = xs[0];
        let rest = xs[1..].iter().product::<usize>().max(1);
        self.reshape(x, &[batch, rest])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 2 || bs.len() != 2 || as_[0] != bs[0] {
            return Err(shape_err("concat_cols", &as_, &bs));
        }
        let (n, m) = (as_[1], bs[1]);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(as_[0] * (n + m));
        for r in 0..as_[0] {
            out.extend_from_slice(&ad[r * n..(r + 1) * n]);
            out.extend_from_slice(&bd[r * m..(r + 1) * m]);
        }
        let value = Tensor::new(&[as_[0], n + m], out)?;
        Ok(self.push(value, Op::ConcatCols(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    fn same_shape(&self, op: &'static str, x: Var, y: Var) -> Result<(), TensorError> {
        if self.shape(x) != self.shape(y) {
            return Err(shape_err(op, self.shape(x), self.shape(y)));
        }
        Ok(())
    }

    fn map_value(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).unwrap()
    }

    /// Back-propagates from a one-element `root`, replacing any gradients
    /// from a previous call.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.value(root).len() != 1 {
            return Err(TensorError::Param(format!(
                "backward root must have one element, got shape {:?}",
                self.shape(root)
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);

        let Graph { nodes, grads } = self;
        for i in (0..=root.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let out = &nodes[i].value;
            match &nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(x, y) => {
                    let (m, k) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                    let n = nodes[y.0].value.shape()[1];
                    let xd = nodes[x.0].value.data();
                    let yd = nodes[y.0].value.data();
                    if let Some(gx) = slot(grads, nodes, *x) {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let yrow = &yd[p * n..(p + 1) * n];
                                gx[i * k + p] += grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                    if let Some(gy) = slot(grads, nodes, *y) {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let xv = xd[i * k + p];
                                if xv == 0.0 {
                                    continue;
                                }
                                for (o, gv) in gy[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += xv * gv;
                                }
                            }
                        }
                    }
                }
                Op::AddBias(x, b) => {
                    let d = nodes[b.0].value.len();
                    add_into(slot(grads, nodes, *x), &g);
                    if let Some(gb) = slot(grads, nodes, *b) {
                        for row in g.chunks(d) {
                            add_slice(gb, row);
                        }
                    }
                }
                Op::Add(x, y) => {
                    add_into(slot(grads, nodes, *x), &g);
                    add_into(slot(grads, nodes, *y), &g);
                }
                Op::Mul(x, y) => {
                    let xd = nodes[x.0].value.data();
                    let yd = nodes[y.0].value.data();
                    if let Some(gx) = slot(grads, nodes, *x) {
                        for ((o, gv), yv) in gx.iter_mut().zip(&g).zip(yd) {
                            *o += gv * yv;
                        }
                    }
                    if let Some(gy) = slot(grads, nodes, *y) {
                        for ((o, gv), xv) in gy.iter_mut().zip(&g).zip(xd) {
                            *o += gv * xv;
                        }
                    }
                }
                Op::Neg(x) => {
                    if let Some(gx) = slot(grads, nodes, *x) {
                        for (o, gv) in gx.iter_mut().zip(&g) {
                            *o -= gv;
                        }
                    }
                }
                Op::Relu(x) => {
                    let xd = nodes[x.0].value.data();
                    if let Some(gx) = slot(grads, nodes, *x) {
                        for ((o, gv), xv) in gx.iter_mut().zip(&g).zip(xd) {
                            if *xv > 0.0 {
                                *o += gv;
                            }
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let yd = out.data();
                    if let Some(gx) = slot(grads, nodes, *x) {
                        for ((o, gv), y) in gx.iter_mut().zip(&g).zip(yd) {
                            *o += gv * y * (1.0 - y);
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    let d = *out.shape().last().unwrap();
                    let yd = out.data();
                    if let Some(gx) = slot(grads, nodes, *x) {
                        for ((orow, grow), yrow) in
                            gx.chunks_mut(d).zip(g.chunks(d)).zip(yd.chunks(d))
                        {
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for ((o, gv), y) in orow.iter_mut().zip(grow).zip(yrow) {
                                *o += y * (gv - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let d = nodes[gamma.0].value.len();
                    let gd = nodes[gamma.0].value.data();
                    if let Some(gx) = slot(grads, nodes, *x) {
                        let mut dxhat = vec![0.0; d];
                        for (r, s) in rstd.iter().enumerate() {
                            let grow = &g[r * d..(r + 1) * d];
                            let hrow = &xhat[r * d..(r + 1) * d];
                            for j in 0..d {
                                dxhat[j] = grow[j] * gd[j];
                            }
                            let sum_d: f64 = dxhat.iter().sum();
                            let sum_dh: f64 = dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum();
                            let orow = &mut gx[r * d..(r + 1) * d];
                            for j in 0..d {
                                orow[j] += s / d as f64
                                    * (d as f64 * dxhat[j] - sum_d - hrow[j] * sum_dh);
                            }
                        }
                    }
                    if let Some(gg) = slot(grads, nodes, *gamma) {
                        for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                gg[j] += grow[j] * hrow[j];
                            }
                        }
                    }
                    if let Some(gb) = slot(grads, nodes, *beta) {
                        for grow in g.chunks(d) {
                            add_slice(gb, grow);
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    if let Some(gx) = slot(grads, nodes, *x) {
                        for ((o, gv), m) in gx.iter_mut().zip(&g).zip(mask) {
                            *o += gv * m;
                        }
                    }
                }
                Op::Conv1x1 { x, w, b } => {
                    let xs = nodes[x.0].value.shape();
                    let (batch, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let cout = nodes[w.0].value.shape()[0];
                    let xd = nodes[x.0].value.data();
                    let wd = nodes[w.0].value.data();
                    if let Some(gx) = slot(grads, nodes, *x) {
                        for n in 0..batch {
                            for o in 0..cout {
                                let grow = &g[(n * cout + o) * hw..(n * cout + o + 1) * hw];
                                for ch in 0..c {
                                    let wv = wd[o * c + ch];
                                    let dst = &mut gx[(n * c + ch) * hw..(n * c + ch + 1) * hw];
                                    for (d, gv) in dst.iter_mut().zip(grow) {
                                        *d += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                    if let Some(gw) = slot(grads, nodes, *w) {
                        for n in 0..batch {
                            for o in 0..cout {
                                let grow = &g[(n * cout + o) * hw..(n * cout + o + 1) * hw];
                                for ch in 0..c {
                                    let src = &xd[(n * c + ch) * hw..(n * c + ch + 1) * hw];
                                    gw[o * c + ch] +=
                                        grow.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                        }
                    }
                    if let Some(gb) = slot(grads, nodes, *b) {
                        for (i, chunk) in g.chunks(hw).enumerate() {
                            gb[i % cout] += chunk.iter().sum::<f64>();
                        }
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let geo = ConvGeometry::new(
                        nodes[x.0].value.shape(),
                        nodes[w.0].value.shape(),
                        *stride,
                        *pad,
                    );
                    let xd = nodes[x.0].value.data();
                    let wd = nodes[w.0].value.data();
                    if let Some(gx) = slot(grads, nodes, *x) {
                        geo.for_each_tap(|oi, xi, wi| {
                            if let Some(xi) = xi {
                                gx[xi] += wd[wi] * g[oi];
                            }
                        });
                    }
                    if let Some(gw) = slot(grads, nodes, *w) {
                        geo.for_each_tap(|oi, xi, wi| {
                            if let Some(xi) = xi {
                                gw[wi] += xd[xi] * g[oi];
                            }
                        });
                    }
                    if let Some(gb) = slot(grads, nodes, *b) {
                        let plane = geo.ho * geo.wo;
                        for (i, chunk) in g.chunks(plane).enumerate() {
                            gb[i % geo.cout] += chunk.iter().sum::<f64>();
                        }
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let xs = nodes[x.0].value.shape();
                    let hw = xs[2] * xs[3];
                    if let Some(gx) = slot(grads, nodes, *x) {
                        for (chunk, gv) in gx.chunks_mut(hw).zip(&g) {
                            let share = gv / hw as f64;
                            chunk.iter_mut().for_each(|o| *o += share);
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let classes = nodes[logits.0].value.shape()[1];
                    let scale = g[0] / labels.len() as f64;
                    if let Some(gl) = slot(grads, nodes, *logits) {
                        for (r, &label) in labels.iter().enumerate() {
                            for c in 0..classes {
                                let onehot = if c == label { 1.0 } else { 0.0 };
                                gl[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                            }
                        }
                    }
                }
                Op::PadFront(x) => {
                    let n = nodes[x.0].value.shape()[1];
                    if let Some(gx) = slot(grads, nodes, *x) {
                        for (orow, grow) in gx.chunks_mut(n).zip(g.chunks(n + 1)) {
                            add_slice(orow, &grow[1..]);
                        }
                    }
                }
                Op::Outer { a, b, kind } => {
                    let (batch, n) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    let m = nodes[b.0].value.shape()[1];
                    let ad = nodes[a.0].value.data();
                    let bd = nodes[b.0].value.data();
                    if let Some(ga) = slot(grads, nodes, *a) {
                        for s in 0..batch {
                            let brow = &bd[s * m..(s + 1) * m];
                            for i in 0..n {
                                let grow = &g[(s * n + i) * m..(s * n + i + 1) * m];
                                ga[s * n + i] += match kind {
                                    OuterKind::Add | OuterKind::Sub => grow.iter().sum::<f64>(),
                                    OuterKind::Mul => {
                                        grow.iter().zip(brow).map(|(g, b)| g * b).sum::<f64>()
                                    }
                                    OuterKind::Div { eps } => grow
                                        .iter()
                                        .zip(brow)
                                        .map(|(g, b)| g / (b + eps))
                                        .sum::<f64>(),
                                };
                            }
                        }
                    }
                    if let Some(gb) = slot(grads, nodes, *b) {
                        for s in 0..batch {
                            let arow = &ad[s * n..(s + 1) * n];
                            let brow = &bd[s * m..(s + 1) * m];
                            let dst = &mut gb[s * m..(s + 1) * m];
                            for (i, &ai) in arow.iter().enumerate() {
                                let grow = &g[(s * n + i) * m..(s * n + i + 1) * m];
                                for j in 0..m {
                                    dst[j] += match kind {
                                        OuterKind::Add => grow[j],
                                        OuterKind::Sub => -grow[j],
                                        OuterKind::Mul => grow[j] * ai,
                                        OuterKind::Div { eps } => {
                                            let den = brow[j] + eps;
                                            -grow[j] * ai / (den * den)
                                        }
                                    };
                                }
                            }
                        }
                    }
                }
                Op::Stack(maps) => {
                    let s = out.shape();
                    let (batch, c, hw) = (s[0], s[1], s[2] * s[3]);
                    for (k, m) in maps.iter().enumerate() {
                        if let Some(gm) = slot(grads, nodes, *m) {
                            for n in 0..batch {
                                let src = &g[(n * c + k) * hw..(n * c + k + 1) * hw];
                                add_slice(&mut gm[n * hw..(n + 1) * hw], src);
                            }
                        }
                    }
                }
                Op::Reshape(x) => add_into(slot(grads, nodes, *x), &g),
                Op::ConcatCols(a, b) => {
                    let n = nodes[a.0].value.shape()[1];
                    let m = nodes[b.0].value.shape()[1];
                    if let Some(ga) = slot(grads, nodes, *a) {
                        for (orow, grow) in ga.chunks_mut(n).zip(g.chunks(n + m)) {
                            add_slice(orow, &grow[..n]);
                        }
                    }
                    if let Some(gb) = slot(grads, nodes, *b) {
                        for (orow, grow) in gb.chunks_mut(m).zip(g.chunks(n + m)) {
                            add_slice(orow, &grow[n..]);
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(gx) = slot(grads, nodes, *x) {
                        gx.iter_mut().for_each(|o| *o += g[0]);
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn add_slice(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn add_into(dst: Option<&mut [f64]>, src: &[f64]) {
    if let Some(dst) = dst {
        add_slice(dst, src);
    }
}

struct ConvGeometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Self {
        let k = ws[2];
        Self {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            k,
            stride,
            pad,
            ho: (xs[2] + 2 * pad - k) / stride + 1,
            wo: (xs[3] + 2 * pad - k) / stride + 1,
        }
    }

    /// Visits every (output, input, weight) index triple of the convolution.
    /// The input index is `None` for taps that fall on the zero padding.
    fn for_each_tap(&self, mut f: impl FnMut(usize, Option<usize>, usize)) {
        for n in 0..self.batch {
            for o in 0..self.cout {
                for i in 0..self.ho {
                    for j in 0..self.wo {
                        let oi = ((n * self.cout + o) * self.ho + i) * self.wo + j;
                        for c in 0..self.cin {
                            for ki in 0..self.k {
                                let r = (i * self.stride + ki) as isize - self.pad as isize;
                                for kj in 0..self.k {
                                    let col = (j * self.stride + kj) as isize - self.pad as isize;
                                    let wi = ((o * self.cin + c) * self.k + ki) * self.k + kj;
                                    let inside = r >= 0
                                        && col >= 0
                                        && (r as usize) < self.h
                                        && (col as usize) < self.w;
                                    let xi = inside.then(|| {
                                        ((n * self.cin + c) * self.h + r as usize) * self.w
                                            + col as usize
                                    });
                                    f(oi, xi, wi);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

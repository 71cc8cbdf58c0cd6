//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and the backward sweep walks it in reverse.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    /// Elementwise map whose derivative was stored during the forward pass.
    Pointwise {
        src: usize,
        local: Vec<T>,
    },
    Sigmoid(usize),
    Abs(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(usize),
    SliceCols {
        src: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    SliceRows {
        src: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    GatherRows {
        src: usize,
        index: Vec<usize>,
    },
    PairSum(usize, usize),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    /// Scalar reduction whose local gradient was computed during the forward pass.
    Reduce {
        src: usize,
        local: Vec<T>,
    },
}

/// A value in the graph together with its accumulated gradient.
#[derive(Debug)]
pub struct TensorNode<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<TensorNode<T>>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

fn dim_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation: 0.5 x (1 + tanh(k (x + 0.044715 x^3)))
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c = T::of(0.044715);
    let half = T::of(0.5);
    let one = T::one();
    let inner = k * (x + c * x * x * x);
    // tanh through exp is markedly faster than libm tanh and exact enough
    let t = one - T::of(2.0) / ((inner + inner).exp() + one);
    let y = half * x * (one + t);
    let dinner = k * (one + T::of(3.0) * c * x * x);
    let dy = half * (one + t) + half * x * (one - t * t) * dinner;
    (y, dy)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(TensorNode {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn node(&self, v: Var) -> &TensorNode<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Input that participates in differentiation.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf for a named parameter. Repeated lookups of the same name share one node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.push(t, Op::Leaf, true);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters touched by this graph, in first-use order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(dim_err(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    fn check_finite(&self, v: Var, op: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite input to {op}")))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.mat_dims(a, "matmul")?;
        let (k2, m) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        self.check_finite(a, "matmul")?;
        self.check_finite(b, "matmul")?;
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n,
            k,
            m,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::zero(),
            &mut out,
        );
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a.0, b.0), rg))
    }

    /// `a · bᵀ` for `a: [n×k]`, `b: [m×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.mat_dims(a, "matmul_t")?;
        let (m, k2) = self.mat_dims(b, "matmul_t")?;
        if k != k2 {
            return Err(dim_err("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n,
            k,
            m,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            T::zero(),
            &mut out,
        );
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMulT(a.0, b.0), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(name, self.shape(a), self.shape(b)));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Adds a `[c]` vector to every row of an `[n×c]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c) = self.mat_dims(x, "add_row")?;
        if self.value(bias).len() != c {
            return Err(dim_err("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (v, &bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        let rg = self.rg(x.0) || self.rg(bias.0);
        Ok(self.push(Tensor::new(vec![n, c], data)?, Op::AddRow(x.0, bias.0), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a.0);
        self.push(t, Op::Scale(a.0, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let rg = self.rg(a.0);
        let x = self.value(a);
        let (t, local) = if rg {
            let (y, d): (Vec<T>, Vec<T>) = x.data().iter().map(|&v| gelu_parts(v)).unzip();
            (Tensor::new(x.shape().to_vec(), y).unwrap(), d)
        } else {
            (x.map(|v| gelu_parts(v).0), Vec::new())
        };
        self.push(t, Op::Pointwise { src: a.0, local }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = T::one();
        let t = self.value(a).map(|x| one / (one + (-x).exp()));
        let rg = self.rg(a.0);
        self.push(t, Op::Sigmoid(a.0), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.abs());
        let rg = self.rg(a.0);
        self.push(t, Op::Abs(a.0), rg)
    }

    /// Row-wise layer normalization followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, c) = self.mat_dims(x, "layer_norm")?;
        if c == 0 || self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        self.check_finite(x, "layer_norm")?;
        let eps = T::of(eps);
        let cn = T::of(c as f64);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); n * c];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * c];
        for r in 0..n {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        let op = Op::LayerNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor::new(vec![n, c], out)?, op, rg))
    }

    /// Numerically stabilized row softmax. Masked (`false`) entries are excluded and output 0.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (n, c) = self.mat_dims(x, "softmax")?;
        if let Some(m) = mask {
            if m.len() != n * c {
                return Err(dim_err("softmax mask", &[n, c], &[m.len()]));
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c];
        for r in 0..n {
            let keep = |j: usize| mask.is_none_or(|m| m[r * c + j]);
            let mut mx = T::neg_infinity();
            let mut kept = 0;
            for j in 0..c {
                if keep(j) {
                    let v = xv[r * c + j];
                    if !v.is_finite() {
                        return Err(Error::Numeric(format!("non-finite softmax input in row {r}")));
                    }
                    kept += 1;
                    mx = mx.max(v);
                }
            }
            if kept == 0 {
                return Err(Error::Config(format!("softmax row {r} is fully masked")));
            }
            let mut total = T::zero();
            for j in 0..c {
                if keep(j) {
                    let e = (xv[r * c + j] - mx).exp();
                    out[r * c + j] = e;
                    total += e;
                }
            }
            for j in 0..c {
                out[r * c + j] = out[r * c + j] / total;
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::Softmax(x.0), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (n, c) = self.mat_dims(a, "slice_cols")?;
        if start + width > c {
            return Err(dim_err("slice_cols", self.shape(a), &[start, width]));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(n * width);
        for r in 0..n {
            data.extend_from_slice(&src[r * c + start..r * c + start + width]);
        }
        let rg = self.rg(a.0);
        Ok(self.push(
            Tensor::new(vec![n, width], data)?,
            Op::SliceCols { src: a.0, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let (n, _) = self.mat_dims(first, "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (pn, pc) = self.mat_dims(p, "concat_cols")?;
            if pn != n {
                return Err(dim_err("concat_cols", self.shape(first), self.shape(p)));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Tensor::new(vec![n, total], data)?, Op::ConcatCols(ids), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.mat_dims(a, "slice_rows")?;
        if start + len > n {
            return Err(dim_err("slice_rows", self.shape(a), &[start, len]));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::new(vec![len, c], data)?, Op::SliceRows { src: a.0, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let (_, c) = self.mat_dims(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pn, pc) = self.mat_dims(p, "concat_rows")?;
            if pc != c {
                return Err(dim_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pn;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Tensor::new(vec![rows, c], data)?, Op::ConcatRows(ids), rg))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (n, c) = self.mat_dims(a, "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Usage(format!("gather index {bad} out of range for {n} rows")));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(self.value(a).row(i));
        }
        let rg = self.rg(a.0);
        let op = Op::GatherRows {
            src: a.0,
            index: index.to_vec(),
        };
        Ok(self.push(Tensor::new(vec![index.len(), c], data)?, op, rg))
    }

    /// All pairwise row sums: output row `r·n_b + s` is `a[r] + b[s]`.
    pub fn pair_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, h) = self.mat_dims(a, "pair_sum")?;
        let (nb, h2) = self.mat_dims(b, "pair_sum")?;
        if h != h2 {
            return Err(dim_err("pair_sum", self.shape(a), self.shape(b)));
        }
        let mut data = Vec::with_capacity(na * nb * h);
        for r in 0..na {
            let ar = self.value(a).row(r);
            for s in 0..nb {
                let bs = self.value(b).row(s);
                data.extend(ar.iter().zip(bs).map(|(&x, &y)| x + y));
            }
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::new(vec![na * nb, h], data)?, Op::PairSum(a.0, b.0), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a.0);
        Ok(self.push(t, Op::Reshape(a.0), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.len().max(1);
        let s = v.data().iter().copied().sum::<T>() / T::of(n as f64);
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::Mean(a.0), rg)
    }

    /// Records a scalar computed outside the graph whose gradient w.r.t. `src`
    /// is `local` (same length as `src`).
    pub(crate) fn reduce(&mut self, src: Var, value: T, local: Vec<T>) -> Var {
        debug_assert_eq!(local.len(), self.value(src).len());
        let rg = self.rg(src.0);
        self.push(Tensor::scalar(value), Op::Reduce { src: src.0, local }, rg)
    }

    /// Reverse sweep from a scalar. Gradients add onto whatever earlier calls left
    /// in place; call [`Graph::zero_grad`] between independent sweeps.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.item().is_finite() {
            return Err(Error::Numeric("backward from a non-finite loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            match &mut self.nodes[i].grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: usize, t: Tensor<T>| {
            if !nodes[v].requires_grad {
                return;
            }
            match &mut grads[v] {
                Some(x) => x.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let val = |v: usize| &nodes[v].value;
        let gd = g.data();
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (n, k) = (val(a).shape()[0], val(a).shape()[1]);
                let m = val(b).shape()[1];
                if nodes[a].requires_grad {
                    let mut da = vec![T::zero(); n * k];
                    T::gemm(n, m, k, gd, false, val(b).data(), true, T::zero(), &mut da);
                    acc(a, Tensor::new(vec![n, k], da).unwrap());
                }
                if nodes[b].requires_grad {
                    let mut db = vec![T::zero(); k * m];
                    T::gemm(k, n, m, val(a).data(), true, gd, false, T::zero(), &mut db);
                    acc(b, Tensor::new(vec![k, m], db).unwrap());
                }
            }
            &Op::MatMulT(a, b) => {
                let (n, k) = (val(a).shape()[0], val(a).shape()[1]);
                let m = val(b).shape()[0];
                if nodes[a].requires_grad {
                    let mut da = vec![T::zero(); n * k];
                    T::gemm(n, m, k, gd, false, val(b).data(), false, T::zero(), &mut da);
                    acc(a, Tensor::new(vec![n, k], da).unwrap());
                }
                if nodes[b].requires_grad {
                    let mut db = vec![T::zero(); m * k];
                    T::gemm(m, n, k, gd, true, val(a).data(), false, T::zero(), &mut db);
                    acc(b, Tensor::new(vec![m, k], db).unwrap());
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            &Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.map(|x| -x));
            }
            &Op::Mul(a, b) => {
                let da = gd.iter().zip(val(b).data()).map(|(&x, &y)| x * y).collect();
                let db = gd.iter().zip(val(a).data()).map(|(&x, &y)| x * y).collect();
                acc(a, Tensor::new(g.shape().to_vec(), da).unwrap());
                acc(b, Tensor::new(g.shape().to_vec(), db).unwrap());
            }
            &Op::AddRow(x, b) => {
                acc(x, g.clone());
                let c = g.cols();
                let mut db = vec![T::zero(); c];
                for row in gd.chunks(c.max(1)) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(b, Tensor::new(val(b).shape().to_vec(), db).unwrap());
            }
            &Op::Scale(a, s) => acc(a, g.map(|x| x * s)),
            Op::Pointwise { src, local } => {
                let d = gd.iter().zip(local).map(|(&gg, &l)| gg * l).collect();
                acc(*src, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            &Op::Sigmoid(a) => {
                let y = nodes[i].value.data();
                let d = gd.iter().zip(y).map(|(&gg, &y)| gg * y * (T::one() - y)).collect();
                acc(a, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            &Op::Abs(a) => {
                let d = gd
                    .iter()
                    .zip(val(a).data())
                    .map(|(&gg, &x)| {
                        if x > T::zero() {
                            gg
                        } else if x < T::zero() {
                            -gg
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                acc(a, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = g.cols();
                let n = g.rows();
                let gam = val(*gamma).data();
                if nodes[*gamma].requires_grad || nodes[*beta].requires_grad {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for r in 0..n {
                        for j in 0..c {
                            dg[j] += gd[r * c + j] * xhat[r * c + j];
                            db[j] += gd[r * c + j];
                        }
                    }
                    acc(*gamma, Tensor::new(val(*gamma).shape().to_vec(), dg).unwrap());
                    acc(*beta, Tensor::new(val(*beta).shape().to_vec(), db).unwrap());
                }
                if nodes[*x].requires_grad {
                    let cn = T::of(c as f64);
                    let mut dx = vec![T::zero(); n * c];
                    for r in 0..n {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dh = gd[r * c + j] * gam[j];
                            m1 += dh;
                            m2 += dh * xhat[r * c + j];
                        }
                        m1 = m1 / cn;
                        m2 = m2 / cn;
                        for j in 0..c {
                            let dh = gd[r * c + j] * gam[j];
                            dx[r * c + j] = rstd[r] * (dh - m1 - xhat[r * c + j] * m2);
                        }
                    }
                    acc(*x, Tensor::new(vec![n, c], dx).unwrap());
                }
            }
            &Op::Softmax(a) => {
                let y = nodes[i].value.data();
                let c = g.cols();
                let mut dx = vec![T::zero(); y.len()];
                for (r, (yr, gr)) in y.chunks(c.max(1)).zip(gd.chunks(c.max(1))).enumerate() {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..c {
                        dx[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(a, Tensor::new(g.shape().to_vec(), dx).unwrap());
            }
            &Op::SliceCols { src, start } => {
                let (n, c) = (val(src).rows(), val(src).cols());
                let w = g.cols();
                let mut d = vec![T::zero(); n * c];
                for r in 0..n {
                    d[r * c + start..r * c + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                acc(src, Tensor::new(vec![n, c], d).unwrap());
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let (n, w) = (val(p).rows(), val(p).cols());
                    let mut d = Vec::with_capacity(n * w);
                    for r in 0..n {
                        d.extend_from_slice(&gd[r * total + off..r * total + off + w]);
                    }
                    off += w;
                    acc(p, Tensor::new(vec![n, w], d).unwrap());
                }
            }
            &Op::SliceRows { src, start } => {
                let (n, c) = (val(src).rows(), val(src).cols());
                let mut d = vec![T::zero(); n * c];
                d[start * c..start * c + gd.len()].copy_from_slice(gd);
                acc(src, Tensor::new(vec![n, c], d).unwrap());
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    let d = gd[off..off + len].to_vec();
                    off += len;
                    acc(p, Tensor::new(val(p).shape().to_vec(), d).unwrap());
                }
            }
            Op::GatherRows { src, index } => {
                let (n, c) = (val(*src).rows(), val(*src).cols());
                let mut d = vec![T::zero(); n * c];
                for (k, &row) in index.iter().enumerate() {
                    for j in 0..c {
                        d[row * c + j] += gd[k * c + j];
                    }
                }
                acc(*src, Tensor::new(vec![n, c], d).unwrap());
            }
            &Op::PairSum(a, b) => {
                let (na, h) = (val(a).rows(), val(a).cols());
                let nb = val(b).rows();
                let mut da = vec![T::zero(); na * h];
                let mut db = vec![T::zero(); nb * h];
                for r in 0..na {
                    for s in 0..nb {
                        let row = &gd[(r * nb + s) * h..(r * nb + s + 1) * h];
                        for j in 0..h {
                            da[r * h + j] += row[j];
                            db[s * h + j] += row[j];
                        }
                    }
                }
                acc(a, Tensor::new(vec![na, h], da).unwrap());
                acc(b, Tensor::new(vec![nb, h], db).unwrap());
            }
            &Op::Reshape(a) => {
                acc(a, g.clone().reshaped(val(a).shape()).unwrap());
            }
            &Op::Sum(a) => acc(a, Tensor::full(val(a).shape(), g.item())),
            &Op::Mean(a) => {
                let n = val(a).len().max(1);
                acc(a, Tensor::full(val(a).shape(), g.item() / T::of(n as f64)));
            }
            Op::Reduce { src, local } => {
                let s = g.item();
                let d = local.iter().map(|&l| l * s).collect();
                acc(*src, Tensor::new(val(*src).shape().to_vec(), d).unwrap());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(msg.matches("[2, 3]").count() == 2, "{msg}");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square_is_two_x() {
        let vals = [1.0, -2.0, 3.0, 0.5];
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2, 2], &vals));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        let expect: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap().data(), expect.as_slice());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0; 3]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn layer_norm_constant_row_and_zero_gamma() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 4], &[5.0, 5.0, 5.0, 5.0, 1.0, 2.0, 3.0, 4.0]));
        let one = g.constant(Tensor::full(&[4], 1.0));
        let zero = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
        assert_eq!(&g.value(y).data()[..4], &[0.0; 4]);

        let beta = g.constant(t(&[4], &[0.1, 0.2, 0.3, 0.4]));
        let y = g.layer_norm(x, zero, beta, 1e-5).unwrap();
        for r in 0..2 {
            assert_eq!(g.value(y).row(r), &[0.1, 0.2, 0.3, 0.4]);
        }
    }

    #[test]
    fn layer_norm_rejects_non_finite() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[f64::NAN, 1.0]));
        let one = g.constant(Tensor::full(&[2], 1.0));
        let zero = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.layer_norm(x, one, zero, 1e-5), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_rows_are_stochastic_and_respect_mask() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1000.0, 1001.0, 999.0, -3.0, 0.0, 2.0]));
        let mask = [true, true, true, true, false, true];
        let y = g.softmax_rows(x, Some(&mask)).unwrap();
        for r in 0..2 {
            let s: f64 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(g.value(y).at(1, 1), 0.0);
        let bad = [false, false, false, true, true, true];
        assert!(matches!(g.softmax_rows(x, Some(&bad)), Err(Error::Config(_))));
    }

    #[test]
    fn pair_sum_layout() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 1], &[10.0, 20.0]));
        let b = g.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
        let p = g.pair_sum(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[11.0, 12.0, 13.0, 21.0, 22.0, 23.0]);
    }
}

//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamSet`]; calling [`Graph::backward`] on a scalar node
//! returns one gradient tensor per parameter, zero for parameters the pass
//! never touched.

use crate::tensor::{gemm, matmul, Matrix, Trans};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "parameter {name} registered twice"
        );
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }
}

/// Per-parameter gradient tensors, shaped like the [`ParamSet`] they came from.
#[derive(Clone, Debug)]
pub struct Gradients {
    tensors: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Gradients {
            tensors: params
                .tensors
                .iter()
                .map(|t| Matrix::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.scale_assign(s);
        }
    }

    /// First parameter holding a NaN or infinite entry.
    pub fn first_non_finite(&self) -> Option<ParamId> {
        self.tensors
            .iter()
            .position(|t| !t.all_finite())
            .map(ParamId)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), Trans::No, self.value(b), Trans::No);
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), Trans::No, self.value(b), Trans::Yes);
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 × c` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        assert_eq!(r.cols(), self.value(a).cols());
        let r = r.data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (x, b) in out.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for v in out.data_mut() {
            let t = (GELU_C * (*v + 0.044715 * *v * *v * *v)).tanh();
            *v = 0.5 * *v * (1.0 + t);
        }
        self.push(out, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        assert_eq!(g.len(), d);
        let mut xhat = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(i);
            for j in 0..d {
                xh[j] = (row[j] - mean) * is;
            }
            let o = out.row_mut(i);
            for j in 0..d {
                o[j] = xh[j] * g[j] + b[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` is masked out when
    /// `j > i`.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let mut out = self.value(a).clone();
        let cols = out.cols();
        for i in 0..out.rows() {
            let limit = if causal { (i + 1).min(cols) } else { cols };
            let row = out.row_mut(i);
            let max = row[..limit]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in &mut row[..limit] {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in &mut row[..limit] {
                *v /= sum;
            }
            for v in &mut row[limit..] {
                *v = 0.0;
            }
        }
        self.push(out, Op::Softmax(a))
    }

    /// Gathers rows of `table` by index.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let d = t.cols();
        let mut out = Matrix::zeros(ids.len(), d);
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols);
            data.extend_from_slice(m.data());
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows);
            let c = m.cols();
            for i in 0..rows {
                out.row_mut(i)[off..off + c].copy_from_slice(m.row(i));
            }
            off += c;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let m = self.value(x);
        assert!(start + len <= m.cols());
        let out = Matrix::from_fn(m.rows(), len, |r, c| m.get(r, start + c));
        self.push(out, Op::SliceCols { x, start })
    }

    /// Mean over rows, producing a `1 × c` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let n = m.rows();
        assert!(n > 0);
        let mut out = Matrix::zeros(1, m.cols());
        for i in 0..n {
            for (o, v) in out.row_mut(0).iter_mut().zip(m.row(i)) {
                *o += v;
            }
        }
        out.scale_assign(1.0 / n as f64);
        self.push(out, Op::MeanRows(x))
    }

    /// Mean token cross-entropy of `targets` under row-wise softmax of
    /// `logits`. Returns a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows(), targets.len());
        let mut probs = l.clone();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = probs.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
            total -= row[t].ln();
        }
        let loss = total / targets.len() as f64;
        self.push(
            Matrix::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));
        let mut out = Gradients::zeros_like(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.tensors[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = grad_slot(&mut grads, *a, av);
                    gemm(1.0, &g, Trans::No, bv, Trans::Yes, 1.0, ga);
                    let gb = grad_slot(&mut grads, *b, bv);
                    gemm(1.0, av, Trans::Yes, &g, Trans::No, 1.0, gb);
                }
                Op::MatMulBt(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = grad_slot(&mut grads, *a, av);
                    gemm(1.0, &g, Trans::No, bv, Trans::No, 1.0, ga);
                    let gb = grad_slot(&mut grads, *b, bv);
                    gemm(1.0, &g, Trans::Yes, av, Trans::No, 1.0, gb);
                }
                Op::Add(a, b) => {
                    grad_slot(&mut grads, *a, self.value(*a)).add_assign(&g);
                    grad_slot(&mut grads, *b, self.value(*b)).add_assign(&g);
                }
                Op::AddRow(a, row) => {
                    grad_slot(&mut grads, *a, self.value(*a)).add_assign(&g);
                    let gr = grad_slot(&mut grads, *row, self.value(*row));
                    for i in 0..g.rows() {
                        for (o, v) in gr.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let ga = grad_slot(&mut grads, *a, self.value(*a));
                    for (o, v) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += s * v;
                    }
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let ga = grad_slot(&mut grads, *a, x);
                    for ((o, &v), &gv) in ga.data_mut().iter_mut().zip(x.data()).zip(g.data()) {
                        let inner = GELU_C * (v + 0.044715 * v * v * v);
                        let t = inner.tanh();
                        let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner;
                        *o += gv * d;
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (n, d) = xhat.shape();
                    let gv = self.value(*gain).data().to_vec();
                    {
                        let gg = grad_slot(&mut grads, *gain, self.value(*gain));
                        for i in 0..n {
                            for j in 0..d {
                                gg.data_mut()[j] += g.get(i, j) * xhat.get(i, j);
                            }
                        }
                    }
                    {
                        let gb = grad_slot(&mut grads, *bias, self.value(*bias));
                        for i in 0..n {
                            for j in 0..d {
                                gb.data_mut()[j] += g.get(i, j);
                            }
                        }
                    }
                    let gx = grad_slot(&mut grads, *x, self.value(*x));
                    let mut dxhat = vec![0.0; d];
                    for i in 0..n {
                        let xh = xhat.row(i);
                        let gr = g.row(i);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xh[j];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        let row = gx.row_mut(i);
                        for j in 0..d {
                            row[j] += inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let ga = grad_slot(&mut grads, *a, self.value(*a));
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let s = crate::tensor::dot(yr, gr);
                        for (o, (yv, gv)) in ga.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                            *o += yv * (gv - s);
                        }
                    }
                }
                Op::Embed { table, ids } => {
                    let gt = grad_slot(&mut grads, *table, self.value(*table));
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let n = pv.len();
                        let gp = grad_slot(&mut grads, *p, pv);
                        for (o, v) in gp.data_mut().iter_mut().zip(&g.data()[off..off + n]) {
                            *o += v;
                        }
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let c = pv.cols();
                        let gp = grad_slot(&mut grads, *p, pv);
                        for i in 0..g.rows() {
                            for (o, v) in gp.row_mut(i).iter_mut().zip(&g.row(i)[off..off + c]) {
                                *o += v;
                            }
                        }
                        off += c;
                    }
                }
                Op::SliceCols { x, start } => {
                    let gx = grad_slot(&mut grads, *x, self.value(*x));
                    let c = g.cols();
                    for i in 0..g.rows() {
                        for (o, v) in gx.row_mut(i)[*start..*start + c].iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                }
                Op::MeanRows(x) => {
                    let xv = self.value(*x);
                    let n = xv.rows() as f64;
                    let gx = grad_slot(&mut grads, *x, xv);
                    for i in 0..gx.rows() {
                        for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(0)) {
                            *o += v / n;
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g.data()[0] / targets.len() as f64;
                    let gl = grad_slot(&mut grads, *logits, self.value(*logits));
                    for (i, &t) in targets.iter().enumerate() {
                        let row = gl.row_mut(i);
                        for (o, p) in row.iter_mut().zip(probs.row(i)) {
                            *o += scale * p;
                        }
                        row[t] -= scale;
                    }
                }
            }
        }
        out
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Matrix>], v: Var, like: &Matrix) -> &'a mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(like.rows(), like.cols()))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences over every coordinate of every parameter.
    fn check(params: &ParamSet, f: impl Fn(&ParamSet) -> f64, build: impl Fn(&mut Graph) -> Var) {
        let mut g = Graph::new(params);
        let loss = build(&mut g);
        let grads = g.backward(loss);
        let eps = 1e-5;
        for id in params.ids() {
            for k in 0..params.get(id).len() {
                let mut p = params.clone();
                p.get_mut(id).data_mut()[k] += eps;
                let up = f(&p);
                p.get_mut(id).data_mut()[k] -= 2.0 * eps;
                let down = f(&p);
                let numeric = (up - down) / (2.0 * eps);
                let analytic = grads.get(id).data()[k];
                let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(err < 1e-5, "{} [{k}]: {analytic} vs {numeric}", params.name(id));
            }
        }
    }

    fn small_params() -> ParamSet {
        let mut p = ParamSet::new();
        p.add("a", Matrix::from_fn(3, 4, |r, c| ((r * 7 + c * 3) % 5) as f64 * 0.3 - 0.6));
        p.add("w", Matrix::from_fn(4, 4, |r, c| ((r * 5 + c) % 7) as f64 * 0.2 - 0.5));
        p.add("g", Matrix::from_fn(1, 4, |_, c| 1.0 + 0.1 * c as f64));
        p.add("b", Matrix::from_fn(1, 4, |_, c| 0.05 * c as f64));
        p.add("e", Matrix::from_fn(6, 4, |r, c| ((r + 2 * c) % 4) as f64 * 0.25 - 0.4));
        p
    }

    fn forward(g: &mut Graph) -> Var {
        let a = g.param(ParamId(0));
        let w = g.param(ParamId(1));
        let gain = g.param(ParamId(2));
        let bias = g.param(ParamId(3));
        let e = g.param(ParamId(4));
        let emb = g.embed(e, &[1, 3, 1]);
        let x = g.add(a, emb);
        let h = g.layer_norm(x, gain, bias);
        let h = g.matmul(h, w);
        let h = g.gelu(h);
        let h = g.add_row(h, bias);
        let left = g.slice_cols(h, 0, 2);
        let right = g.slice_cols(h, 2, 2);
        let s = g.matmul_bt(left, right);
        let s = g.scale(s, 0.7);
        let p = g.softmax_rows(s, true);
        let o = g.matmul(p, right);
        let o = g.concat_cols(&[o, left]);
        let pooled = g.mean_rows(o);
        let stacked = g.concat_rows(&[o, pooled]);
        g.cross_entropy(stacked, &[0, 3, 2, 1])
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let params = small_params();
        check(
            &params,
            |p| {
                let mut g = Graph::new(p);
                let l = forward(&mut g);
                g.scalar(l)
            },
            forward,
        );
    }

    #[test]
    fn untouched_rows_get_exactly_zero_gradient() {
        let params = small_params();
        let mut g = Graph::new(&params);
        let l = forward(&mut g);
        let grads = g.backward(l);
        let e = grads.get(ParamId(4));
        for unused in [0, 2, 4, 5] {
            assert!(e.row(unused).iter().all(|&v| v == 0.0));
        }
        assert!(e.row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn causal_softmax_masks_future_positions() {
        let params = ParamSet::new();
        let mut g = Graph::new(&params);
        let x = g.constant(Matrix::from_fn(3, 3, |r, c| (r + c) as f64));
        let y = g.softmax_rows(x, true);
        let y = g.value(y);
        assert_eq!(y.get(0, 0), 1.0);
        assert_eq!(y.get(0, 1), 0.0);
        assert_eq!(y.get(1, 2), 0.0);
        let s: f64 = y.row(2).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

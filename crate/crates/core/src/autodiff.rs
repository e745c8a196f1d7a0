//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`](crate::nn::ParamStore) rather than copied,
//! and [`Tape::backward`] returns one gradient per stored parameter.

use ndarray::{s, Array2, Axis, Zip};

use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Array2<f64>),
    Sigmoid(Var),
    Tanh(Var),
    Sin(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    RowNorm(Var, Vec<f64>),
    SoftmaxRows(Var),
    MaskedAttend {
        scores: Var,
        values: Var,
        weights: Vec<Array2<f64>>,
    },
    MeanPoolRows(Var, usize),
    CrossEntropySum {
        logits: Var,
        probs: Array2<f64>,
        labels: Vec<usize>,
        mask: Vec<bool>,
    },
}

struct Node {
    value: Option<Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Row-wise softmax over the columns where `mask` is set; rows with no
/// admissible column are all zeros.
pub fn masked_softmax_row(scores: &[f64], admit: impl Fn(usize) -> bool, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (j, &s) in scores.iter().enumerate() {
        if admit(j) && s > max {
            max = s;
        }
    }
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, (&s, o)) in scores.iter().zip(out.iter_mut()).enumerate() {
        *o = if admit(j) { (s - max).exp() } else { 0.0 };
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Per-column attention weights: for every value column `f`, a softmax of
/// `scores` (R × T) restricted to the rows `j` where `mask[[j, f]]` holds.
pub fn masked_attention_weights(scores: &Array2<f64>, mask: &Array2<bool>) -> Vec<Array2<f64>> {
    let (r, t) = scores.dim();
    let f = mask.ncols();
    assert_eq!(mask.nrows(), t, "mask rows must match score columns");
    (0..f)
        .map(|col| {
            let mut w = Array2::zeros((r, t));
            for (srow, mut wrow) in scores.rows().into_iter().zip(w.rows_mut()) {
                let srow = srow.to_vec();
                let out = wrow.as_slice_mut().expect("contiguous");
                masked_softmax_row(&srow, |j| mask[[j, col]], out);
            }
            w
        })
        .collect()
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.value(id),
            _ => node.value.as_ref().expect("non-parameter nodes own a value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, id: usize) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// One leaf per stored parameter, indexed by parameter id.
    pub fn bind_params(&mut self) -> Vec<Var> {
        (0..self.params.len()).map(|id| self.param(id)).collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let g = self.grad_of(&[a, b]);
        self.push(v, Op::MatMul(a, b), g)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let g = self.grad_of(&[a, b]);
        self.push(v, Op::MatMulT(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let g = self.grad_of(&[a, b]);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let g = self.grad_of(&[a, b]);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let g = self.grad_of(&[a, b]);
        self.push(v, Op::Mul(a, b), g)
    }

    /// `a + row`, broadcasting a `1 × n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let g = self.grad_of(&[a, row]);
        self.push(v, Op::AddRow(a, row), g)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        let g = self.grad_of(&[a, row]);
        self.push(v, Op::MulRow(a, row), g)
    }

    /// `x · w + b`
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let g = self.grad_of(&[a]);
        self.push(v, Op::Scale(a, c), g)
    }

    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let v = self.value(a) * &c;
        let g = self.grad_of(&[a]);
        self.push(v, Op::MulConst(a, c), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let g = self.grad_of(&[a]);
        self.push(v, Op::Sigmoid(a), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let g = self.grad_of(&[a]);
        self.push(v, Op::Tanh(a), g)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sin);
        let g = self.grad_of(&[a]);
        self.push(v, Op::Sin(a), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("matching row counts");
        let g = self.grad_of(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("matching column counts");
        let g = self.grad_of(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), g)
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        let g = self.grad_of(&[a]);
        self.push(v, Op::SliceRows(a, start), g)
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let g = self.grad_of(&[a]);
        self.push(v, Op::SliceCols(a, start), g)
    }

    /// Zero-mean, unit-variance rows (no affine part).
    pub fn row_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let g = self.grad_of(&[a]);
        self.push(out, Op::RowNorm(a, inv_std), g)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Array2::zeros(x.raw_dim());
        for (xr, mut or) in x.rows().into_iter().zip(out.rows_mut()) {
            let xs = xr.to_vec();
            masked_softmax_row(&xs, |_| true, or.as_slice_mut().expect("contiguous"));
        }
        let g = self.grad_of(&[a]);
        self.push(out, Op::SoftmaxRows(a), g)
    }

    /// For each column `f` of `values` (T × F): a softmax of `scores` (R × T)
    /// over the rows observed in that column, applied to the column. Masked
    /// entries get exactly zero weight; a column observed nowhere yields 0.
    pub fn masked_attend(&mut self, scores: Var, values: Var, mask: &Array2<bool>) -> Var {
        let weights = masked_attention_weights(self.value(scores), mask);
        let vals = self.value(values);
        let (r, f) = (self.value(scores).nrows(), vals.ncols());
        let mut out = Array2::zeros((r, f));
        for (col, w) in weights.iter().enumerate() {
            let column = vals.column(col);
            let masked: Vec<f64> = column
                .iter()
                .enumerate()
                .map(|(j, &v)| if mask[[j, col]] { v } else { 0.0 })
                .collect();
            let attended = w.dot(&ndarray::ArrayView1::from(&masked));
            out.column_mut(col).assign(&attended);
        }
        let g = self.grad_of(&[scores, values]);
        self.push(
            out,
            Op::MaskedAttend {
                scores,
                values,
                weights,
            },
            g,
        )
    }

    /// Mean of each consecutive group of `group` rows.
    pub fn mean_pool_rows(&mut self, a: Var, group: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows() % group, 0, "rows must divide into groups");
        let mut out = Array2::zeros((x.nrows() / group, x.ncols()));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let block = x.slice(s![i * group..(i + 1) * group, ..]);
            row.assign(&block.mean_axis(Axis(0)).expect("non-empty group"));
        }
        let g = self.grad_of(&[a]);
        self.push(out, Op::MeanPoolRows(a, group), g)
    }

    /// Sum over unmasked rows of `−log softmax(logits)[label]`, as a 1 × 1 value.
    pub fn cross_entropy_sum(&mut self, logits: Var, labels: &[usize], mask: &[bool]) -> Var {
        let x = self.value(logits);
        let mut probs = Array2::zeros(x.raw_dim());
        let mut total = 0.0;
        for (i, (xr, mut pr)) in x.rows().into_iter().zip(probs.rows_mut()).enumerate() {
            let xs = xr.to_vec();
            let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (p, v) in pr.iter_mut().zip(&xs) {
                *p = (v - lse).exp();
            }
            if mask[i] {
                total += lse - xs[labels[i]];
            }
        }
        let g = self.grad_of(&[logits]);
        self.push(
            Array2::from_elem((1, 1), total),
            Op::CrossEntropySum {
                logits,
                probs,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
            },
            g,
        )
    }

    /// Gradients of `root` (a 1 × 1 value) with respect to every parameter.
    pub fn backward(&self, root: Var) -> Vec<Array2<f64>> {
        let mut param_grads: Vec<Array2<f64>> = (0..self.params.len())
            .map(|id| Array2::zeros(self.params.value(id).raw_dim()))
            .collect();
        let mut grads: Vec<Option<Array2<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones(self.value(root).raw_dim()));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |v: Var, d: Array2<f64>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => param_grads[*id] += &g,
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&self.value(*b).t()));
                    acc(*b, self.value(*a).t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    acc(*a, g.dot(self.value(*b)));
                    acc(*b, g.t().dot(self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -g);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * self.value(*b));
                    acc(*b, &g * self.value(*a));
                }
                Op::AddRow(a, row) => {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g);
                }
                Op::MulRow(a, row) => {
                    let d_row = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(*a, &g * self.value(*row));
                    acc(*row, d_row);
                }
                Op::Scale(a, c) => acc(*a, g * *c),
                Op::MulConst(a, c) => acc(*a, g * c),
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut d = g;
                    Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y * (1.0 - y));
                    acc(*a, d);
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut d = g;
                    Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
                    acc(*a, d);
                }
                Op::Sin(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= x.cos());
                    acc(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(*p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        acc(*p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(*a, d);
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*a, d);
                }
                Op::RowNorm(a, inv_std) => {
                    let y = node.value.as_ref().unwrap();
                    let mut d = g;
                    for ((mut dr, yr), &is) in d.rows_mut().into_iter().zip(y.rows()).zip(inv_std) {
                        let n = dr.len() as f64;
                        let mean_g = dr.sum() / n;
                        let mean_gy = dr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
                        Zip::from(&mut dr)
                            .and(&yr)
                            .for_each(|g, &y| *g = is * (*g - mean_g - y * mean_gy));
                    }
                    acc(*a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut d = g;
                    for (mut dr, yr) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = dr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        Zip::from(&mut dr).and(&yr).for_each(|g, &y| *g = y * (*g - dot));
                    }
                    acc(*a, d);
                }
                Op::MaskedAttend {
                    scores,
                    values,
                    weights,
                } => {
                    let out = node.value.as_ref().unwrap();
                    let vals = self.value(*values);
                    let mut d_scores = Array2::zeros(self.value(*scores).raw_dim());
                    let mut d_values = Array2::zeros(vals.raw_dim());
                    for (col, w) in weights.iter().enumerate() {
                        let gcol = g.column(col);
                        // dL/dv[j] = Σ_r g[r] w[r, j]; masked rows carry zero weight
                        d_values.column_mut(col).assign(&w.t().dot(&gcol));
                        for r in 0..w.nrows() {
                            let gr = gcol[r];
                            if gr == 0.0 {
                                continue;
                            }
                            let o = out[[r, col]];
                            for j in 0..w.ncols() {
                                let wj = w[[r, j]];
                                if wj != 0.0 {
                                    d_scores[[r, j]] += gr * wj * (vals[[j, col]] - o);
                                }
                            }
                        }
                    }
                    acc(*scores, d_scores);
                    acc(*values, d_values);
                }
                Op::MeanPoolRows(a, group) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    let inv = 1.0 / *group as f64;
                    for (i, gr) in g.rows().into_iter().enumerate() {
                        for k in 0..*group {
                            d.row_mut(i * group + k).assign(&(&gr * inv));
                        }
                    }
                    acc(*a, d);
                }
                Op::CrossEntropySum {
                    logits,
                    probs,
                    labels,
                    mask,
                } => {
                    let scale = g[[0, 0]];
                    let mut d = probs.clone();
                    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                        if mask[i] {
                            row[labels[i]] -= 1.0;
                            row *= scale;
                        } else {
                            row.fill(0.0);
                        }
                    }
                    acc(*logits, d);
                }
            }
        }
        param_grads
    }
}

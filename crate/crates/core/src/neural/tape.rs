//! Reverse-mode differentiation over a linear tape of 2-D tensor ops.
//!
//! Parameters are referenced by index instead of being copied onto the tape,
//! so one set of weights can back many short-lived tapes.

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    /// `[n, m] + [1, m]` broadcast over rows.
    AddBias(Var, Var),
    Add(Var, Var),
    Relu(Var),
    Tanh(Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    /// Places row `k` of the input at row `idx[k]` of an otherwise zero
    /// matrix; indices must be distinct.
    ScatterRows(Var, Vec<usize>),
    /// Row means over consecutive segments `offsets[s]..offsets[s + 1]`;
    /// empty segments give zero rows.
    SegmentMean(Var, Vec<usize>),
    RowDot(Var, Var),
    /// Log-softmax over all entries.
    LogSoftmax(Var),
    /// `sum_k w_k * x_k` over same-shaped inputs.
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Entry {
    op: Op,
    value: Option<Tensor>,
}

pub struct Tape<'p> {
    params: &'p [Tensor],
    entries: Vec<Entry>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Tape { params, entries: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.entries[v.0] {
            Entry { op: Op::Param(i), .. } => &self.params[*i],
            Entry { value: Some(t), .. } => t,
            _ => unreachable!("tape entry without value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.entries.push(Entry { op, value: Some(value) });
        Var(self.entries.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t)
    }

    pub fn param(&mut self, index: usize) -> Var {
        self.entries.push(Entry { op: Op::Param(index), value: None });
        Var(self.entries.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let mut v = self.value(a).clone();
        let b = self.value(bias);
        let m = v.cols();
        assert_eq!(b.data.len(), m, "bias width mismatch");
        for row in v.data.chunks_mut(m) {
            for (x, bb) in row.iter_mut().zip(&b.data) {
                *x += bb;
            }
        }
        self.push(Op::AddBias(a, bias), v)
    }

    /// `a @ w + b`.
    pub fn linear(&mut self, a: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(a, w);
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(v.shape, self.value(b).shape, "add shape mismatch");
        v.add_assign(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for x in &mut v.data {
            *x = x.max(0.0);
        }
        self.push(Op::Relu(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for x in &mut v.data {
            *x = x.tanh();
        }
        self.push(Op::Tanh(a), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut v = self.value(a).clone();
        v.scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), rows, "concat row mismatch");
                data.extend_from_slice(t.row(r));
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::new(vec![rows, total], data))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(vec![idx.len(), c], data);
        self.push(Op::GatherRows(a, idx), v)
    }

    pub fn scatter_rows(&mut self, a: Var, idx: Vec<usize>, rows: usize) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut v = Tensor::zeros(rows, c);
        for (k, &i) in idx.iter().enumerate() {
            v.data[i * c..(i + 1) * c].copy_from_slice(t.row(k));
        }
        self.push(Op::ScatterRows(a, idx), v)
    }

    pub fn segment_mean(&mut self, a: Var, offsets: Vec<usize>) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let segs = offsets.len() - 1;
        let mut v = Tensor::zeros(segs, c);
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if hi == lo {
                continue;
            }
            let inv = 1.0 / (hi - lo) as f64;
            let out = &mut v.data[s * c..(s + 1) * c];
            for r in lo..hi {
                for (o, x) in out.iter_mut().zip(t.row(r)) {
                    *o += x * inv;
                }
            }
        }
        self.push(Op::SegmentMean(a, offsets), v)
    }

    /// Mean over all rows, `[1, cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).rows();
        self.segment_mean(a, vec![0, n])
    }

    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "row_dot shape mismatch");
        let data = (0..ta.rows()).map(|r| ta.row(r).iter().zip(tb.row(r)).map(|(x, y)| x * y).sum()).collect();
        let v = Tensor::new(vec![ta.rows(), 1], data);
        self.push(Op::RowDot(a, b), v)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let max = t.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.data.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let v = Tensor::new(t.shape.clone(), t.data.iter().map(|x| x - lse).collect());
        self.push(Op::LogSoftmax(a), v)
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let mut v = Tensor::new(self.value(terms[0].0).shape.clone(), vec![0.0; self.value(terms[0].0).data.len()]);
        for &(x, w) in &terms {
            for (o, a) in v.data.iter_mut().zip(&self.value(x).data) {
                *o += w * a;
            }
        }
        self.push(Op::WeightedSum(terms), v)
    }

    /// Backpropagates from the scalar `output` and returns the gradient of
    /// every parameter (zeros for parameters not on the tape).
    pub fn backward(&self, output: Var) -> Vec<Tensor> {
        assert_eq!(self.value(output).data.len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::new(self.value(output).shape.clone(), vec![1.0]));
        let mut param_grads: Vec<Tensor> =
            self.params.iter().map(|p| Tensor::new(p.shape.clone(), vec![0.0; p.data.len()])).collect();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let entry = &self.entries[idx];
            let out = || self.value(Var(idx));
            match &entry.op {
                Op::Constant => {}
                Op::Param(p) => param_grads[*p].add_assign(&g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddBias(a, b) => {
                    let m = g.cols();
                    let mut gb = Tensor::new(self.value(*b).shape.clone(), vec![0.0; m]);
                    for row in g.data.chunks(m) {
                        for (o, x) in gb.data.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    for (x, y) in ga.data.iter_mut().zip(&out().data) {
                        if *y <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    for (x, y) in ga.data.iter_mut().zip(&out().data) {
                        *x *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, c) => {
                    let mut ga = g;
                    ga.scale(*c);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g.data[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads, p, Tensor::new(vec![rows, w], gp));
                        offset += w;
                    }
                }
                Op::GatherRows(a, idx_list) => {
                    let src = self.value(*a);
                    let c = src.cols();
                    let mut ga = Tensor::zeros(src.rows(), c);
                    for (k, &i) in idx_list.iter().enumerate() {
                        for (o, x) in ga.data[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ScatterRows(a, idx_list) => {
                    let c = g.cols();
                    let mut data = Vec::with_capacity(idx_list.len() * c);
                    for &i in idx_list {
                        data.extend_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *a, Tensor::new(vec![idx_list.len(), c], data));
                }
                Op::SegmentMean(a, offsets) => {
                    let src = self.value(*a);
                    let c = src.cols();
                    let mut ga = Tensor::zeros(src.rows(), c);
                    for s in 0..offsets.len() - 1 {
                        let (lo, hi) = (offsets[s], offsets[s + 1]);
                        if hi == lo {
                            continue;
                        }
                        let inv = 1.0 / (hi - lo) as f64;
                        for r in lo..hi {
                            for (o, x) in ga.data[r * c..(r + 1) * c].iter_mut().zip(g.row(s)) {
                                *o += x * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowDot(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let mut ga = ta.clone();
                    let mut gb = tb.clone();
                    let c = ta.cols();
                    for r in 0..ta.rows() {
                        let gr = g.data[r];
                        for j in 0..c {
                            ga.data[r * c + j] = gr * tb.data[r * c + j];
                            gb.data[r * c + j] = gr * ta.data[r * c + j];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::LogSoftmax(a) => {
                    let y = out();
                    let gsum: f64 = g.data.iter().sum();
                    let data = g.data.iter().zip(&y.data).map(|(gi, yi)| gi - yi.exp() * gsum).collect();
                    accumulate(&mut grads, *a, Tensor::new(y.shape.clone(), data));
                }
                Op::WeightedSum(terms) => {
                    for &(x, w) in terms {
                        let mut gx = g.clone();
                        gx.scale(w);
                        accumulate(&mut grads, x, gx);
                    }
                }
            }
        }
        param_grads
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

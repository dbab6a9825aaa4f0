//! Eager reverse-mode automatic differentiation on f64 matrices.
//!
//! Every tensor in the model is a row-major [`Array2<f64>`]; sequences are
//! (frames × channels), vectors are (1 × d), scalars are (1 × 1). A [`Graph`]
//! is built per forward pass: each op computes its value immediately and
//! records enough to replay the chain rule in reverse. Parameters live in a
//! [`ParamStore`](super::params::ParamStore) shared across passes; `backward`
//! returns per-parameter gradient accumulators.

use ndarray::{s, Array2, Axis};

use super::params::{ParamId, ParamStore};

/// Handle to a node in the tape.
pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Detach,
    Add(NodeId, NodeId),
    /// `a (r,c) + b (1,c)` broadcast over rows.
    AddRow(NodeId, NodeId),
    /// `a (r,c) + b (r,1)` broadcast over columns.
    AddCol(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `a (r,c) * b (r,1)` broadcast over columns.
    MulCol(NodeId, NodeId),
    /// `a (r,c) * b (1,c)` broadcast over rows.
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Matmul(NodeId, NodeId),
    /// `a · bᵀ`
    MatmulTB(NodeId, NodeId),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    /// Mean over non-overlapping windows of `f` rows: (r,c) -> (r/f,c).
    MeanPoolRows(NodeId, usize),
    /// Repeat each row `f` times: (r,c) -> (r*f,c).
    UpsampleRows(NodeId, usize),
    SumAll(NodeId),
    MeanAll(NodeId),
    MeanRows(NodeId),
    SumRows(NodeId),
    Softmax(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    Square(NodeId),
    ClampMin(NodeId, f64),
    Clamp(NodeId, f64, f64),
    /// Per-row `(x - mean) / sqrt(var + eps)`.
    NormalizeRows(NodeId, f64),
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Mean cross-entropy of row logits against integer targets.
    CrossEntropy(NodeId, Vec<usize>),
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    vals: Vec<Array2<f64>>,
    ops: Vec<Op>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            vals: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, val: Array2<f64>) -> NodeId {
        self.vals.push(val);
        self.ops.push(op);
        self.vals.len() - 1
    }

    /// Value of a node (already computed; evaluation is eager).
    pub fn value(&self, n: NodeId) -> &Array2<f64> {
        &self.vals[n]
    }

    pub fn shape(&self, n: NodeId) -> (usize, usize) {
        self.vals[n].dim()
    }

    pub fn scalar(&self, n: NodeId) -> f64 {
        debug_assert_eq!(self.vals[n].dim(), (1, 1));
        self.vals[n][[0, 0]]
    }

    // ---- leaves -------------------------------------------------------

    pub fn input(&mut self, v: Array2<f64>) -> NodeId {
        self.push(Op::Input, v)
    }

    pub fn param(&mut self, p: ParamId) -> NodeId {
        let v = self.store.value(p).clone();
        self.push(Op::Param(p), v)
    }

    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a].clone();
        self.push(Op::Detach, v)
    }

    // ---- elementwise / broadcast --------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.vals[a] + &self.vals[b];
        self.push(Op::Add(a, b), v)
    }

    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.vals[b].nrows(), 1);
        let v = &self.vals[a] + &self.vals[b].row(0);
        self.push(Op::AddRow(a, b), v)
    }

    pub fn add_col(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.vals[b].ncols(), 1);
        let v = &self.vals[a] + &self.vals[b].column(0).insert_axis(Axis(1));
        self.push(Op::AddCol(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.vals[a] - &self.vals[b];
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.vals[a] * &self.vals[b];
        self.push(Op::Mul(a, b), v)
    }

    pub fn mul_col(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.vals[b].ncols(), 1);
        let v = &self.vals[a] * &self.vals[b].column(0).insert_axis(Axis(1));
        self.push(Op::MulCol(a, b), v)
    }

    pub fn mul_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.vals[b].nrows(), 1);
        let v = &self.vals[a] * &self.vals[b].row(0);
        self.push(Op::MulRow(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.vals[a] * c;
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.vals[a] + c;
        self.push(Op::AddScalar(a), v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    // ---- linear algebra -----------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a].dot(&self.vals[b]);
        self.push(Op::Matmul(a, b), v)
    }

    /// `a · bᵀ` without materializing the transpose as a node.
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a].dot(&self.vals[b].t());
        self.push(Op::MatmulTB(a, b), v)
    }

    // ---- shape ops ------------------------------------------------------

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.vals[a].slice(s![start..end, ..]).to_owned();
        self.push(Op::SliceRows(a, start, end), v)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.vals[a].slice(s![.., start..end]).to_owned();
        self.push(Op::SliceCols(a, start, end), v)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.vals[p].view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape");
        self.push(Op::ConcatRows(parts.to_vec()), v)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.vals[p].view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape");
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let src = &self.vals[a];
        let mut v = Array2::zeros((idx.len(), src.ncols()));
        for (i, &j) in idx.iter().enumerate() {
            v.row_mut(i).assign(&src.row(j));
        }
        self.push(Op::GatherRows(a, idx.to_vec()), v)
    }

    pub fn mean_pool_rows(&mut self, a: NodeId, factor: usize) -> NodeId {
        let src = &self.vals[a];
        let (r, c) = src.dim();
        debug_assert_eq!(r % factor, 0, "mean_pool_rows: rows not divisible");
        let out_r = r / factor;
        let mut v = Array2::zeros((out_r, c));
        for i in 0..out_r {
            let win = src.slice(s![i * factor..(i + 1) * factor, ..]);
            v.row_mut(i).assign(&win.mean_axis(Axis(0)).unwrap());
        }
        self.push(Op::MeanPoolRows(a, factor), v)
    }

    pub fn upsample_rows(&mut self, a: NodeId, factor: usize) -> NodeId {
        let src = &self.vals[a];
        let (r, c) = src.dim();
        let mut v = Array2::zeros((r * factor, c));
        for i in 0..r {
            for f in 0..factor {
                v.row_mut(i * factor + f).assign(&src.row(i));
            }
        }
        self.push(Op::UpsampleRows(a, factor), v)
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.vals[a].sum());
        self.push(Op::SumAll(a), v)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.vals[a].mean().unwrap());
        self.push(Op::MeanAll(a), v)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a]
            .mean_axis(Axis(0))
            .unwrap()
            .insert_axis(Axis(0));
        self.push(Op::MeanRows(a), v)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a].sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(Op::SumRows(a), v)
    }

    // ---- nonlinearities --------------------------------------------------

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let mut v = self.vals[a].clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(Op::Softmax(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a].mapv(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a].mapv(f64::ln);
        self.push(Op::Ln(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a].mapv(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a].mapv(gelu);
        self.push(Op::Gelu(a), v)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a].mapv(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn clamp_min(&mut self, a: NodeId, lo: f64) -> NodeId {
        let v = self.vals[a].mapv(|x| x.max(lo));
        self.push(Op::ClampMin(a, lo), v)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.vals[a].mapv(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v)
    }

    pub fn normalize_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let src = &self.vals[a];
        let mut v = src.clone();
        for mut row in v.rows_mut() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|x| (x - mean) * (x - mean)).mean().unwrap();
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        self.push(Op::NormalizeRows(a, eps), v)
    }

    // ---- structured ops --------------------------------------------------

    /// 1-D convolution over rows (time). `x` is (L, c_in), `w` is
    /// (kernel*c_in, c_out), `b` is (1, c_out). Zero padding.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let c_in = self.vals[x].ncols();
        debug_assert_eq!(self.vals[w].nrows(), kernel * c_in);
        let unfolded = unfold(&self.vals[x], kernel, stride, pad);
        let v = unfolded.dot(&self.vals[w]) + &self.vals[b].row(0);
        self.push(
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
                pad,
            },
            v,
        )
    }

    /// Mean cross-entropy over rows of `logits` against integer `targets`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let lg = &self.vals[logits];
        debug_assert_eq!(lg.nrows(), targets.len());
        let mut total = 0.0;
        for (row, &t) in lg.rows().into_iter().zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let v = Array2::from_elem((1, 1), total / targets.len() as f64);
        self.push(Op::CrossEntropy(logits, targets.to_vec()), v)
    }

    // ---- composites ------------------------------------------------------

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean_all(sq)
    }

    /// Forward value of `target`, gradient routed to `through`.
    /// Classic straight-through estimator; shapes must match.
    pub fn straight_through(&mut self, through: NodeId, target: &Array2<f64>) -> NodeId {
        let diff = self.input(target - &self.vals[through]);
        self.add(through, diff)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar node. Returns accumulated gradients for
    /// every parameter node touched by this graph (dense over the store).
    pub fn backward(&self, loss: NodeId) -> Grads {
        debug_assert_eq!(self.vals[loss].dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.vals.len()];
        grads[loss] = Some(Array2::from_elem((1, 1), 1.0));
        let mut param_grads = Grads::new(self.store.len());

        for n in (0..=loss).rev() {
            let g = match grads[n].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.ops[n] {
                Op::Input | Op::Detach => {}
                Op::Param(p) => param_grads.accumulate(*p, &g),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &g);
                    acc(&mut grads, *b, &g);
                }
                Op::AddRow(a, b) => {
                    acc(&mut grads, *a, &g);
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *b, &gb);
                }
                Op::AddCol(a, b) => {
                    acc(&mut grads, *a, &g);
                    let gb = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *b, &gb);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, &g);
                    let gb = g.mapv(|x| -x);
                    acc(&mut grads, *b, &gb);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.vals[*b];
                    let gb = &g * &self.vals[*a];
                    acc(&mut grads, *a, &ga);
                    acc(&mut grads, *b, &gb);
                }
                Op::MulCol(a, b) => {
                    let bcol = self.vals[*b].column(0).insert_axis(Axis(1));
                    let ga = &g * &bcol;
                    acc(&mut grads, *a, &ga);
                    let gb = (&g * &self.vals[*a])
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1));
                    acc(&mut grads, *b, &gb);
                }
                Op::MulRow(a, b) => {
                    let ga = &g * &self.vals[*b].row(0);
                    acc(&mut grads, *a, &ga);
                    let gb = (&g * &self.vals[*a])
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    acc(&mut grads, *b, &gb);
                }
                Op::Scale(a, c) => {
                    let ga = &g * *c;
                    acc(&mut grads, *a, &ga);
                }
                Op::AddScalar(a) => acc(&mut grads, *a, &g),
                Op::Matmul(a, b) => {
                    let ga = g.dot(&self.vals[*b].t());
                    let gb = self.vals[*a].t().dot(&g);
                    acc(&mut grads, *a, &ga);
                    acc(&mut grads, *b, &gb);
                }
                Op::MatmulTB(a, b) => {
                    // y = a bᵀ: da = g b ; db = gᵀ a
                    let ga = g.dot(&self.vals[*b]);
                    let gb = g.t().dot(&self.vals[*a]);
                    acc(&mut grads, *a, &ga);
                    acc(&mut grads, *b, &gb);
                }
                Op::SliceRows(a, start, _end) => {
                    let mut ga = Array2::zeros(self.vals[*a].dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, &ga);
                }
                Op::SliceCols(a, start, _end) => {
                    let mut ga = Array2::zeros(self.vals[*a].dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, &ga);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let r = self.vals[p].nrows();
                        let gp = g.slice(s![off..off + r, ..]).to_owned();
                        acc(&mut grads, p, &gp);
                        off += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let c = self.vals[p].ncols();
                        let gp = g.slice(s![.., off..off + c]).to_owned();
                        acc(&mut grads, p, &gp);
                        off += c;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Array2::zeros(self.vals[*a].dim());
                    for (i, &j) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(j);
                        row += &g.row(i);
                    }
                    acc(&mut grads, *a, &ga);
                }
                Op::MeanPoolRows(a, f) => {
                    let (r, c) = self.vals[*a].dim();
                    let mut ga = Array2::zeros((r, c));
                    let scale = 1.0 / *f as f64;
                    for i in 0..g.nrows() {
                        for k in 0..*f {
                            let mut row = ga.row_mut(i * f + k);
                            row.scaled_add(scale, &g.row(i));
                        }
                    }
                    acc(&mut grads, *a, &ga);
                }
                Op::UpsampleRows(a, f) => {
                    let (r, c) = self.vals[*a].dim();
                    let mut ga = Array2::zeros((r, c));
                    for i in 0..r {
                        for k in 0..*f {
                            let mut row = ga.row_mut(i);
                            row += &g.row(i * f + k);
                        }
                    }
                    acc(&mut grads, *a, &ga);
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.vals[*a].dim(), g[[0, 0]]);
                    acc(&mut grads, *a, &ga);
                }
                Op::MeanAll(a) => {
                    let n = self.vals[*a].len() as f64;
                    let ga = Array2::from_elem(self.vals[*a].dim(), g[[0, 0]] / n);
                    acc(&mut grads, *a, &ga);
                }
                Op::MeanRows(a) => {
                    let r = self.vals[*a].nrows() as f64;
                    let mut ga = Array2::zeros(self.vals[*a].dim());
                    for mut row in ga.rows_mut() {
                        row.scaled_add(1.0 / r, &g.row(0));
                    }
                    acc(&mut grads, *a, &ga);
                }
                Op::SumRows(a) => {
                    let mut ga = Array2::zeros(self.vals[*a].dim());
                    for mut row in ga.rows_mut() {
                        row += &g.row(0);
                    }
                    acc(&mut grads, *a, &ga);
                }
                Op::Softmax(a) => {
                    let y = &self.vals[n];
                    let mut ga = Array2::zeros(y.dim());
                    for (i, yrow) in y.rows().into_iter().enumerate() {
                        let grow = g.row(i);
                        let dot: f64 = yrow.iter().zip(grow.iter()).map(|(y, g)| y * g).sum();
                        for (j, out) in ga.row_mut(i).iter_mut().enumerate() {
                            *out = yrow[j] * (grow[j] - dot);
                        }
                    }
                    acc(&mut grads, *a, &ga);
                }
                Op::Exp(a) => {
                    let ga = &g * &self.vals[n];
                    acc(&mut grads, *a, &ga);
                }
                Op::Ln(a) => {
                    let ga = &g / &self.vals[*a];
                    acc(&mut grads, *a, &ga);
                }
                Op::Tanh(a) => {
                    let ga = &g * &self.vals[n].mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *a, &ga);
                }
                Op::Gelu(a) => {
                    let ga = &g * &self.vals[*a].mapv(gelu_grad);
                    acc(&mut grads, *a, &ga);
                }
                Op::Square(a) => {
                    let ga = &g * &self.vals[*a].mapv(|x| 2.0 * x);
                    acc(&mut grads, *a, &ga);
                }
                Op::ClampMin(a, lo) => {
                    let mask = self.vals[*a].mapv(|x| if x > *lo { 1.0 } else { 0.0 });
                    let ga = &g * &mask;
                    acc(&mut grads, *a, &ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mask = self.vals[*a].mapv(|x| if x > *lo && x < *hi { 1.0 } else { 0.0 });
                    let ga = &g * &mask;
                    acc(&mut grads, *a, &ga);
                }
                Op::NormalizeRows(a, eps) => {
                    let x = &self.vals[*a];
                    let y = &self.vals[n];
                    let c = x.ncols() as f64;
                    let mut ga = Array2::zeros(x.dim());
                    for i in 0..x.nrows() {
                        let xrow = x.row(i);
                        let yrow = y.row(i);
                        let grow = g.row(i);
                        let mean = xrow.mean().unwrap();
                        let var = xrow.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean: f64 = grow.sum() / c;
                        let gydot: f64 =
                            grow.iter().zip(yrow.iter()).map(|(g, y)| g * y).sum::<f64>() / c;
                        for (j, out) in ga.row_mut(i).iter_mut().enumerate() {
                            *out = inv * (grow[j] - gmean - yrow[j] * gydot);
                        }
                    }
                    acc(&mut grads, *a, &ga);
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    kernel,
                    stride,
                    pad,
                } => {
                    let unfolded = unfold(&self.vals[*x], *kernel, *stride, *pad);
                    let gw = unfolded.t().dot(&g);
                    acc(&mut grads, *w, &gw);
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *b, &gb);
                    let gu = g.dot(&self.vals[*w].t());
                    let gx = fold_back(&gu, self.vals[*x].dim(), *kernel, *stride, *pad);
                    acc(&mut grads, *x, &gx);
                }
                Op::CrossEntropy(logits, targets) => {
                    let lg = &self.vals[*logits];
                    let scale = g[[0, 0]] / targets.len() as f64;
                    let mut ga = Array2::zeros(lg.dim());
                    for (i, row) in lg.rows().into_iter().enumerate() {
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for (j, out) in ga.row_mut(i).iter_mut().enumerate() {
                            let p = exps[j] / sum;
                            *out = scale * (p - if j == targets[i] { 1.0 } else { 0.0 });
                        }
                    }
                    acc(&mut grads, *logits, &ga);
                }
            }
        }
        param_grads
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], n: NodeId, g: &Array2<f64>) {
    match &mut grads[n] {
        Some(existing) => *existing += g,
        slot => *slot = Some(g.clone()),
    }
}

/// Unfold (L, c_in) into (L_out, kernel*c_in) windows with zero padding.
fn unfold(x: &Array2<f64>, kernel: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (l, c_in) = x.dim();
    let l_out = (l + 2 * pad - kernel) / stride + 1;
    let mut u = Array2::zeros((l_out, kernel * c_in));
    for t in 0..l_out {
        for k in 0..kernel {
            let src = (t * stride + k) as isize - pad as isize;
            if src >= 0 && (src as usize) < l {
                u.slice_mut(s![t, k * c_in..(k + 1) * c_in])
                    .assign(&x.row(src as usize));
            }
        }
    }
    u
}

/// Scatter-add an unfolded gradient back to the input layout.
fn fold_back(
    gu: &Array2<f64>,
    x_dim: (usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (l, c_in) = x_dim;
    let mut gx = Array2::zeros((l, c_in));
    for t in 0..gu.nrows() {
        for k in 0..kernel {
            let src = (t * stride + k) as isize - pad as isize;
            if src >= 0 && (src as usize) < l {
                let mut row = gx.row_mut(src as usize);
                row += &gu.slice(s![t, k * c_in..(k + 1) * c_in]);
            }
        }
    }
    gx
}

/// tanh-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Per-parameter gradient accumulators, dense over a [`ParamStore`].
pub struct Grads {
    slots: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn new(n: usize) -> Self {
        Grads {
            slots: (0..n).map(|_| None).collect(),
        }
    }

    pub fn accumulate(&mut self, p: ParamId, g: &Array2<f64>) {
        match &mut self.slots[p.index()] {
            Some(existing) => *existing += g,
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, p: ParamId) -> Option<&Array2<f64>> {
        self.slots[p.index()].as_ref()
    }

    /// Merge another gradient set into this one (used for per-clip batching).
    pub fn merge(&mut self, other: &Grads) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                match &mut self.slots[i] {
                    Some(existing) => *existing += g,
                    slot => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|x| x * c);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Array2<f64>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }
}

//! Append-only computation tape with reverse-mode differentiation.
//!
//! Values are computed eagerly as ops are recorded; `backward` walks the tape
//! in reverse insertion order (which is already a topological order) and
//! accumulates vector-Jacobian products into per-node gradient buffers.
//! Graphs are cheap and short-lived: the training loop builds one per batch,
//! with parameters entering as leaves each time.

use crate::conv::{col2im_acc, conv_out_dim, gemm_nn, gemm_nt_acc, gemm_tn_acc, im2col};
use crate::error::{PadError, Result};
use crate::tensor::{numel, Float, Tensor};

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, Float),
    /// Multiply every element of the first operand by a one-element tensor.
    MulScalar(Var, Var),
    /// `[r, c] + [c]`, broadcasting the vector over rows.
    AddRow(Var, Var),
    /// `[r, c] * [c]`, broadcasting the vector over rows.
    MulRow(Var, Var),
    /// `[r, c] * [r, 1]`, broadcasting the column over each row.
    MulPerRow(Var, Var),
    /// `[r, c] / [r, 1]`.
    DivPerRow(Var, Var),
    /// `[n, c, h, w] + [c]` over the channel axis.
    AddChannelBias(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows { a: Var, temp: Float },
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    GlobalAvgPool(Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    /// Convolution where every sample brings its own kernel stack.
    Conv2dPerSample { x: Var, w: Var, stride: usize, pad: usize },
    /// Per-row top-n values; `indices` were fixed at forward time.
    RowTopK { a: Var, indices: Vec<usize>, n: usize },
    /// Inverse of top-k selection: place `[r, n]` values into `[r, width]`.
    RowScatter { a: Var, indices: Vec<usize>, width: usize },
    ColSlice { a: Var, col: usize },
    RowSlice { a: Var, row: usize },
    Segment { a: Var, from: usize },
    /// Interleave per-sample dynamic values `[b, nd]` and shared static
    /// values `[ns]` into `[b, nd + ns]` at fixed positions.
    AssembleScatter { dyn_v: Var, stat: Var, dyn_pos: Vec<usize>, stat_pos: Vec<usize> },
    /// Mean cross-entropy straight from logits (fused log-softmax).
    CrossEntropyLogits { logits: Var, targets: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<Float>>,
    requires_grad: bool,
    op: Op,
}

/// The tape. See the module docs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn any_wants(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.wants(*v))
    }

    /// Constant input; gradients do not flow into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Differentiable input; `grad` is available after `backward`.
    pub fn leaf_grad(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`, if any
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<&[Float]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(PadError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(PadError::ShapeMismatch { op, detail: format!("expected rank 2, got {s:?}") }),
        }
    }

    fn rank4(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize, usize)> {
        match self.shape(v) {
            [n, c, h, w] => Ok((*n, *c, *h, *w)),
            s => Err(PadError::ShapeMismatch { op, detail: format!("expected rank 4, got {s:?}") }),
        }
    }

    // ---- elementwise and broadcast ops ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.nodes[a.0].value.data().iter().zip(self.nodes[b.0].value.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_wants(&[a, b]);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.nodes[a.0].value.data().iter().zip(self.nodes[b.0].value.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_wants(&[a, b]);
        Ok(self.push(t, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.nodes[a.0].value.data().iter().zip(self.nodes[b.0].value.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_wants(&[a, b]);
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, c: Float) -> Result<Var> {
        let data = self.nodes[a.0].value.data().iter().map(|x| x + c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.wants(a);
        Ok(self.push(t, rg, Op::AddScalar(a)))
    }

    pub fn scale(&mut self, a: Var, c: Float) -> Result<Var> {
        let data = self.nodes[a.0].value.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.wants(a);
        Ok(self.push(t, rg, Op::Scale(a, c)))
    }

    /// `a * s` where `s` has exactly one element (any shape).
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].value.numel() != 1 {
            return Err(PadError::ShapeMismatch {
                op: "mul_scalar",
                detail: format!("scalar operand has shape {:?}", self.shape(s)),
            });
        }
        let sv = self.nodes[s.0].value.data()[0];
        let data = self.nodes[a.0].value.data().iter().map(|x| x * sv).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_wants(&[a, s]);
        Ok(self.push(t, rg, Op::MulScalar(a, s)))
    }

    fn row_broadcast_check(&self, op: &'static str, a: Var, v: Var) -> Result<(usize, usize)> {
        let (r, c) = self.rank2(op, a)?;
        match self.shape(v) {
            [n] if *n == c => Ok((r, c)),
            s => Err(PadError::ShapeMismatch { op, detail: format!("vector {s:?} does not match row width {c}") }),
        }
    }

    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (r, c) = self.row_broadcast_check("add_row", a, v)?;
        let av = self.nodes[a.0].value.data();
        let vv = self.nodes[v.0].value.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = av[i * c + j] + vv[j];
            }
        }
        let t = Tensor::new(vec![r, c], data)?;
        let rg = self.any_wants(&[a, v]);
        Ok(self.push(t, rg, Op::AddRow(a, v)))
    }

    pub fn mul_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (r, c) = self.row_broadcast_check("mul_row", a, v)?;
        let av = self.nodes[a.0].value.data();
        let vv = self.nodes[v.0].value.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = av[i * c + j] * vv[j];
            }
        }
        let t = Tensor::new(vec![r, c], data)?;
        let rg = self.any_wants(&[a, v]);
        Ok(self.push(t, rg, Op::MulRow(a, v)))
    }

    fn col_broadcast_check(&self, op: &'static str, a: Var, w: Var) -> Result<(usize, usize)> {
        let (r, c) = self.rank2(op, a)?;
        match self.shape(w) {
            [n] | [n, 1] if *n == r => Ok((r, c)),
            s => Err(PadError::ShapeMismatch { op, detail: format!("column {s:?} does not match row count {r}") }),
        }
    }

    pub fn mul_per_row(&mut self, a: Var, w: Var) -> Result<Var> {
        let (r, c) = self.col_broadcast_check("mul_per_row", a, w)?;
        let av = self.nodes[a.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = av[i * c + j] * wv[i];
            }
        }
        let t = Tensor::new(vec![r, c], data)?;
        let rg = self.any_wants(&[a, w]);
        Ok(self.push(t, rg, Op::MulPerRow(a, w)))
    }

    pub fn div_per_row(&mut self, a: Var, w: Var) -> Result<Var> {
        let (r, c) = self.col_broadcast_check("div_per_row", a, w)?;
        let av = self.nodes[a.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = av[i * c + j] / wv[i];
            }
        }
        let t = Tensor::new(vec![r, c], data)?;
        let rg = self.any_wants(&[a, w]);
        Ok(self.push(t, rg, Op::DivPerRow(a, w)))
    }

    pub fn add_channel_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, c, h, w) = self.rank4("add_channel_bias", a)?;
        match self.shape(b) {
            [bc] if *bc == c => {}
            s => {
                return Err(PadError::ShapeMismatch {
                    op: "add_channel_bias",
                    detail: format!("bias {s:?} does not match channel count {c}"),
                })
            }
        }
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let area = h * w;
        let mut data = vec![0.0; n * c * area];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * area;
                for p in 0..area {
                    data[base + p] = av[base + p] + bv[ch];
                }
            }
        }
        let t = Tensor::new(vec![n, c, h, w], data)?;
        let rg = self.any_wants(&[a, b]);
        Ok(self.push(t, rg, Op::AddChannelBias(a, b)))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(PadError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims {k} vs {k2}"),
            });
        }
        let mut data = vec![0.0; m * n];
        gemm_nn(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), &mut data, m, k, n);
        let t = Tensor::new(vec![m, n], data)?;
        let rg = self.any_wants(&[a, b]);
        Ok(self.push(t, rg, Op::MatMul(a, b)))
    }

    // ---- activations ----

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.nodes[a.0].value.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.wants(a);
        Ok(self.push(t, rg, Op::Relu(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self.nodes[a.0].value.data().iter().map(|&x| stable_sigmoid(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.wants(a);
        Ok(self.push(t, rg, Op::Sigmoid(a)))
    }

    /// Row-wise `softmax(z / temp)`. `temp` must be positive and finite.
    pub fn softmax_rows(&mut self, a: Var, temp: Float) -> Result<Var> {
        if !(temp > 0.0) || !temp.is_finite() {
            return Err(PadError::InvalidArgument(format!("softmax temperature must be positive and finite, got {temp}")));
        }
        let (r, c) = self.rank2("softmax_rows", a)?;
        let av = self.nodes[a.0].value.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(&av[i * c..(i + 1) * c], temp, &mut data[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![r, c], data)?;
        let rg = self.wants(a);
        Ok(self.push(t, rg, Op::SoftmaxRows { a, temp }))
    }

    // ---- reductions and shape ops ----

    /// `[r, c]` → `[r, 1]` row sums.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rank2("row_sum", a)?;
        let av = self.nodes[a.0].value.data();
        let data = (0..r).map(|i| av[i * c..(i + 1) * c].iter().sum()).collect();
        let t = Tensor::new(vec![r, 1], data)?;
        let rg = self.wants(a);
        Ok(self.push(t, rg, Op::RowSum(a)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: Float = self.nodes[a.0].value.data().iter().sum();
        let rg = self.wants(a);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.numel();
        if n == 0 {
            return Err(PadError::InvalidArgument("mean of an empty tensor".into()));
        }
        let s: Float = self.nodes[a.0].value.data().iter().sum();
        let rg = self.wants(a);
        Ok(self.push(Tensor::scalar(s / n as Float), rg, Op::Mean(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.nodes[a.0].value.numel() {
            return Err(PadError::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.shape(a), shape),
            });
        }
        let t = Tensor::new(shape, self.nodes[a.0].value.data().to_vec())?;
        let rg = self.wants(a);
        Ok(self.push(t, rg, Op::Reshape(a)))
    }

    /// `[n, c, h, w]` → `[n, c]` spatial means.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.rank4("global_avg_pool", a)?;
        let area = h * w;
        if area == 0 {
            return Err(PadError::InvalidArgument("global_avg_pool over empty spatial extent".into()));
        }
        let av = self.nodes[a.0].value.data();
        let mut data = vec![0.0; n * c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * area;
                data[i * c + ch] = av[base..base + area].iter().sum::<Float>() / area as Float;
            }
        }
        let t = Tensor::new(vec![n, c], data)?;
        let rg = self.wants(a);
        Ok(self.push(t, rg, Op::GlobalAvgPool(a)))
    }

    // ---- convolutions ----

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, ci, h, iw) = self.rank4("conv2d", x)?;
        let (co, wci, kh, kw) = self.rank4("conv2d", w)?;
        if ci != wci {
            return Err(PadError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input has {ci} channels, kernel expects {wci}"),
            });
        }
        let oh = conv_out_dim(h, kh, stride, pad)?;
        let ow = conv_out_dim(iw, kw, stride, pad)?;
        let patch = ci * kh * kw;
        let area = oh * ow;
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let mut data = vec![0.0; n * co * area];
        let mut col = vec![0.0; patch * area];
        for b in 0..n {
            im2col(&xv[b * ci * h * iw..(b + 1) * ci * h * iw], ci, h, iw, kh, kw, stride, pad, &mut col);
            gemm_nn(wv, &col, &mut data[b * co * area..(b + 1) * co * area], co, patch, area);
        }
        let t = Tensor::new(vec![n, co, oh, ow], data)?;
        let rg = self.any_wants(&[x, w]);
        Ok(self.push(t, rg, Op::Conv2d { x, w, stride, pad }))
    }

    /// Like [`Graph::conv2d`] but `w` is `[n, co, ci, kh, kw]`: sample `b`
    /// is convolved with kernel stack `b`.
    pub fn conv2d_per_sample(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, ci, h, iw) = self.rank4("conv2d_per_sample", x)?;
        let (wn, co, wci, kh, kw) = match self.shape(w) {
            [a, b, c, d, e] => (*a, *b, *c, *d, *e),
            s => {
                return Err(PadError::ShapeMismatch {
                    op: "conv2d_per_sample",
                    detail: format!("expected rank 5 kernel, got {s:?}"),
                })
            }
        };
        if wn != n || wci != ci {
            return Err(PadError::ShapeMismatch {
                op: "conv2d_per_sample",
                detail: format!("kernel [{wn}, {co}, {wci}, ..] vs input [{n}, {ci}, ..]"),
            });
        }
        let oh = conv_out_dim(h, kh, stride, pad)?;
        let ow = conv_out_dim(iw, kw, stride, pad)?;
        let patch = ci * kh * kw;
        let area = oh * ow;
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let mut data = vec![0.0; n * co * area];
        let mut col = vec![0.0; patch * area];
        for b in 0..n {
            im2col(&xv[b * ci * h * iw..(b + 1) * ci * h * iw], ci, h, iw, kh, kw, stride, pad, &mut col);
            gemm_nn(&wv[b * co * patch..(b + 1) * co * patch], &col, &mut data[b * co * area..(b + 1) * co * area], co, patch, area);
        }
        let t = Tensor::new(vec![n, co, oh, ow], data)?;
        let rg = self.any_wants(&[x, w]);
        Ok(self.push(t, rg, Op::Conv2dPerSample { x, w, stride, pad }))
    }

    // ---- selection and scatter ----

    /// Per-row largest `n` entries. Ties resolve toward the lower index, and
    /// the selected columns are reported in ascending index order. Returns
    /// `(values, indices)`; `values` is `[r, n]`.
    pub fn row_topk(&mut self, a: Var, n: usize) -> Result<(Var, Vec<usize>)> {
        let (r, c) = self.rank2("row_topk", a)?;
        if n == 0 || n > c {
            return Err(PadError::InvalidArgument(format!("top-k width {n} out of range for {c} columns")));
        }
        let av = self.nodes[a.0].value.data();
        let mut indices = Vec::with_capacity(r * n);
        let mut data = vec![0.0; r * n];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let mut order: Vec<usize> = (0..c).collect();
            order.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
            let mut chosen: Vec<usize> = order[..n].to_vec();
            chosen.sort_unstable();
            for (j, &idx) in chosen.iter().enumerate() {
                data[i * n + j] = row[idx];
                indices.push(idx);
            }
        }
        let t = Tensor::new(vec![r, n], data)?;
        let rg = self.wants(a);
        let v = self.push(t, rg, Op::RowTopK { a, indices: indices.clone(), n });
        Ok((v, indices))
    }

    /// Place `[r, n]` values into a zero-filled `[r, width]` tensor at the
    /// provided per-row column indices (as produced by [`Graph::row_topk`]).
    pub fn row_scatter(&mut self, a: Var, indices: &[usize], width: usize) -> Result<Var> {
        let (r, n) = self.rank2("row_scatter", a)?;
        if indices.len() != r * n {
            return Err(PadError::ShapeMismatch {
                op: "row_scatter",
                detail: format!("{} indices for [{r}, {n}] values", indices.len()),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= width) {
            return Err(PadError::InvalidArgument(format!("scatter index {bad} out of width {width}")));
        }
        let av = self.nodes[a.0].value.data();
        let mut data = vec![0.0; r * width];
        for i in 0..r {
            for j in 0..n {
                data[i * width + indices[i * n + j]] = av[i * n + j];
            }
        }
        let t = Tensor::new(vec![r, width], data)?;
        let rg = self.wants(a);
        Ok(self.push(t, rg, Op::RowScatter { a, indices: indices.to_vec(), width }))
    }

    /// Single column as `[r, 1]`.
    pub fn col_slice(&mut self, a: Var, col: usize) -> Result<Var> {
        let (r, c) = self.rank2("col_slice", a)?;
        if col >= c {
            return Err(PadError::InvalidArgument(format!("column {col} out of range {c}")));
        }
        let av = self.nodes[a.0].value.data();
        let data = (0..r).map(|i| av[i * c + col]).collect();
        let t = Tensor::new(vec![r, 1], data)?;
        let rg = self.wants(a);
        Ok(self.push(t, rg, Op::ColSlice { a, col }))
    }

    /// Single row as `[c]`.
    pub fn row_slice(&mut self, a: Var, row: usize) -> Result<Var> {
        let (r, c) = self.rank2("row_slice", a)?;
        if row >= r {
            return Err(PadError::InvalidArgument(format!("row {row} out of range {r}")));
        }
        let data = self.nodes[a.0].value.data()[row * c..(row + 1) * c].to_vec();
        let t = Tensor::new(vec![c], data)?;
        let rg = self.wants(a);
        Ok(self.push(t, rg, Op::RowSlice { a, row }))
    }

    /// Contiguous slice `[from, from + len)` of a rank-1 tensor.
    pub fn segment(&mut self, a: Var, from: usize, len: usize) -> Result<Var> {
        let total = match self.shape(a) {
            [n] => *n,
            s => {
                return Err(PadError::ShapeMismatch {
                    op: "segment",
                    detail: format!("expected rank 1, got {s:?}"),
                })
            }
        };
        if from + len > total {
            return Err(PadError::InvalidArgument(format!("segment {from}..{} out of length {total}", from + len)));
        }
        let data = self.nodes[a.0].value.data()[from..from + len].to_vec();
        let t = Tensor::new(vec![len], data)?;
        let rg = self.wants(a);
        Ok(self.push(t, rg, Op::Segment { a, from }))
    }

    /// Merge per-sample values `dyn_v` `[b, nd]` and shared values `stat`
    /// `[ns]` into `[b, nd + ns]`: column `dyn_pos[i]` takes `dyn_v[:, i]`,
    /// column `stat_pos[j]` takes `stat[j]` in every row. The two position
    /// lists must exactly partition `0..nd + ns`.
    pub fn assemble_scatter(&mut self, dyn_v: Var, stat: Var, dyn_pos: &[usize], stat_pos: &[usize]) -> Result<Var> {
        let (b, nd) = self.rank2("assemble_scatter", dyn_v)?;
        let ns = match self.shape(stat) {
            [n] => *n,
            s => {
                return Err(PadError::ShapeMismatch {
                    op: "assemble_scatter",
                    detail: format!("static operand must be rank 1, got {s:?}"),
                })
            }
        };
        if dyn_pos.len() != nd || stat_pos.len() != ns {
            return Err(PadError::ShapeMismatch {
                op: "assemble_scatter",
                detail: format!("{} + {} positions for {nd} + {ns} values", dyn_pos.len(), stat_pos.len()),
            });
        }
        let width = nd + ns;
        let mut seen = vec![false; width];
        for &p in dyn_pos.iter().chain(stat_pos) {
            if p >= width || seen[p] {
                return Err(PadError::InvalidArgument(format!("assemble positions must partition 0..{width}; index {p} repeats or overflows")));
            }
            seen[p] = true;
        }
        let dv = self.nodes[dyn_v.0].value.data();
        let sv = self.nodes[stat.0].value.data();
        let mut data = vec![0.0; b * width];
        for row in 0..b {
            let dst = &mut data[row * width..(row + 1) * width];
            for (i, &p) in dyn_pos.iter().enumerate() {
                dst[p] = dv[row * nd + i];
            }
            for (j, &p) in stat_pos.iter().enumerate() {
                dst[p] = sv[j];
            }
        }
        let t = Tensor::new(vec![b, width], data)?;
        let rg = self.any_wants(&[dyn_v, stat]);
        Ok(self.push(
            t,
            rg,
            Op::AssembleScatter { dyn_v, stat, dyn_pos: dyn_pos.to_vec(), stat_pos: stat_pos.to_vec() },
        ))
    }

    // ---- loss ----

    /// Mean cross-entropy over the batch, computed from raw logits with a
    /// max-shifted log-sum-exp.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = self.rank2("cross_entropy_logits", logits)?;
        if targets.len() != n {
            return Err(PadError::ShapeMismatch {
                op: "cross_entropy_logits",
                detail: format!("{} targets for {n} rows", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(PadError::InvalidArgument(format!("target class {bad} out of range {k}")));
        }
        let zv = self.nodes[logits.0].value.data();
        let mut total = 0.0;
        for i in 0..n {
            let row = &zv[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<Float>().ln();
            total += lse - row[targets[i]];
        }
        let rg = self.wants(logits);
        Ok(self.push(
            Tensor::scalar(total / n as Float),
            rg,
            Op::CrossEntropyLogits { logits, targets: targets.to_vec() },
        ))
    }

    // ---- reverse pass ----

    fn grad_buf(&mut self, v: Var) -> &mut Vec<Float> {
        let n = self.nodes[v.0].value.numel();
        self.nodes[v.0].grad.get_or_insert_with(|| vec![0.0; n])
    }

    fn accum(&mut self, v: Var, contrib: &[Float]) {
        let buf = self.grad_buf(v);
        debug_assert_eq!(buf.len(), contrib.len());
        for (o, c) in buf.iter_mut().zip(contrib) {
            *o += c;
        }
    }

    /// Reverse sweep from `root`, which must hold exactly one element.
    /// Gradients from any previous sweep are discarded first.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(PadError::ShapeMismatch {
                op: "backward",
                detail: format!("root must be scalar, shape is {:?}", self.shape(root)),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let g = self.nodes[idx].grad.take().unwrap();
            self.propagate(idx, &op, &g)?;
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, out_idx: usize, op: &Op, g: &[Float]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.accum(*a, g);
                }
                if self.wants(*b) {
                    self.accum(*b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.accum(*a, g);
                }
                if self.wants(*b) {
                    let neg: Vec<Float> = g.iter().map(|x| -x).collect();
                    self.accum(*b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = self.nodes[b.0].value.data();
                    let contrib: Vec<Float> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    self.accum(*a, &contrib);
                }
                if self.wants(*b) {
                    let av = self.nodes[a.0].value.data();
                    let contrib: Vec<Float> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    self.accum(*b, &contrib);
                }
            }
            Op::AddScalar(a) => {
                if self.wants(*a) {
                    self.accum(*a, g);
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    let contrib: Vec<Float> = g.iter().map(|x| x * c).collect();
                    self.accum(*a, &contrib);
                }
            }
            Op::MulScalar(a, s) => {
                if self.wants(*a) {
                    let sv = self.nodes[s.0].value.data()[0];
                    let contrib: Vec<Float> = g.iter().map(|x| x * sv).collect();
                    self.accum(*a, &contrib);
                }
                if self.wants(*s) {
                    let av = self.nodes[a.0].value.data();
                    let dot: Float = g.iter().zip(av).map(|(x, y)| x * y).sum();
                    self.accum(*s, &[dot]);
                }
            }
            Op::AddRow(a, v) => {
                let [r, c] = *self.shape_arr2(out_idx);
                if self.wants(*a) {
                    self.accum(*a, g);
                }
                if self.wants(*v) {
                    let mut contrib = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            contrib[j] += g[i * c + j];
                        }
                    }
                    self.accum(*v, &contrib);
                }
            }
            Op::MulRow(a, v) => {
                let [r, c] = *self.shape_arr2(out_idx);
                if self.wants(*a) {
                    let vv = self.nodes[v.0].value.data();
                    let mut contrib = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            contrib[i * c + j] = g[i * c + j] * vv[j];
                        }
                    }
                    self.accum(*a, &contrib);
                }
                if self.wants(*v) {
                    let av = self.nodes[a.0].value.data();
                    let mut contrib = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            contrib[j] += g[i * c + j] * av[i * c + j];
                        }
                    }
                    self.accum(*v, &contrib);
                }
            }
            Op::MulPerRow(a, w) => {
                let [r, c] = *self.shape_arr2(out_idx);
                if self.wants(*a) {
                    let wv = self.nodes[w.0].value.data();
                    let mut contrib = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            contrib[i * c + j] = g[i * c + j] * wv[i];
                        }
                    }
                    self.accum(*a, &contrib);
                }
                if self.wants(*w) {
                    let av = self.nodes[a.0].value.data();
                    let mut contrib = vec![0.0; r];
                    for i in 0..r {
                        for j in 0..c {
                            contrib[i] += g[i * c + j] * av[i * c + j];
                        }
                    }
                    self.accum(*w, &contrib);
                }
            }
            Op::DivPerRow(a, w) => {
                let [r, c] = *self.shape_arr2(out_idx);
                let wv = self.nodes[w.0].value.data().to_vec();
                if self.wants(*a) {
                    let mut contrib = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            contrib[i * c + j] = g[i * c + j] / wv[i];
                        }
                    }
                    self.accum(*a, &contrib);
                }
                if self.wants(*w) {
                    let av = self.nodes[a.0].value.data();
                    let mut contrib = vec![0.0; r];
                    for i in 0..r {
                        for j in 0..c {
                            contrib[i] -= g[i * c + j] * av[i * c + j] / (wv[i] * wv[i]);
                        }
                    }
                    self.accum(*w, &contrib);
                }
            }
            Op::AddChannelBias(a, b) => {
                let (n, c, h, w) = match self.nodes[out_idx].value.shape() {
                    [n, c, h, w] => (*n, *c, *h, *w),
                    _ => unreachable!(),
                };
                if self.wants(*a) {
                    self.accum(*a, g);
                }
                if self.wants(*b) {
                    let area = h * w;
                    let mut contrib = vec![0.0; c];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * area;
                            contrib[ch] += g[base..base + area].iter().sum::<Float>();
                        }
                    }
                    self.accum(*b, &contrib);
                }
            }
            Op::MatMul(a, b) => {
                let [m, n] = *self.shape_arr2(out_idx);
                let k = self.shape(*a)[1];
                if self.wants(*a) {
                    let bv = self.nodes[b.0].value.data();
                    let mut contrib = vec![0.0; m * k];
                    gemm_nt_acc(g, bv, &mut contrib, m, n, k);
                    self.accum(*a, &contrib);
                }
                if self.wants(*b) {
                    let av = self.nodes[a.0].value.data();
                    let mut contrib = vec![0.0; k * n];
                    gemm_tn_acc(av, g, &mut contrib, k, m, n);
                    self.accum(*b, &contrib);
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let av = self.nodes[a.0].value.data();
                    let contrib: Vec<Float> = g.iter().zip(av).map(|(x, &v)| if v > 0.0 { *x } else { 0.0 }).collect();
                    self.accum(*a, &contrib);
                }
            }
            Op::Sigmoid(a) => {
                if self.wants(*a) {
                    let yv = self.nodes[out_idx].value.data();
                    let contrib: Vec<Float> = g.iter().zip(yv).map(|(x, &y)| x * y * (1.0 - y)).collect();
                    self.accum(*a, &contrib);
                }
            }
            Op::SoftmaxRows { a, temp } => {
                if self.wants(*a) {
                    let [r, c] = *self.shape_arr2(out_idx);
                    let yv = self.nodes[out_idx].value.data();
                    let mut contrib = vec![0.0; r * c];
                    for i in 0..r {
                        let y = &yv[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: Float = gr.iter().zip(y).map(|(x, z)| x * z).sum();
                        for j in 0..c {
                            contrib[i * c + j] = y[j] * (gr[j] - dot) / temp;
                        }
                    }
                    self.accum(*a, &contrib);
                }
            }
            Op::RowSum(a) => {
                if self.wants(*a) {
                    let [r, c] = match self.shape(*a) {
                        [r, c] => [*r, *c],
                        _ => unreachable!(),
                    };
                    let mut contrib = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            contrib[i * c + j] = g[i];
                        }
                    }
                    self.accum(*a, &contrib);
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let contrib = vec![g[0]; self.nodes[a.0].value.numel()];
                    self.accum(*a, &contrib);
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let n = self.nodes[a.0].value.numel();
                    let contrib = vec![g[0] / n as Float; n];
                    self.accum(*a, &contrib);
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    self.accum(*a, g);
                }
            }
            Op::GlobalAvgPool(a) => {
                if self.wants(*a) {
                    let (n, c, h, w) = match self.shape(*a) {
                        [n, c, h, w] => (*n, *c, *h, *w),
                        _ => unreachable!(),
                    };
                    let area = h * w;
                    let inv = 1.0 / area as Float;
                    let mut contrib = vec![0.0; n * c * area];
                    for i in 0..n {
                        for ch in 0..c {
                            let gv = g[i * c + ch] * inv;
                            let base = (i * c + ch) * area;
                            contrib[base..base + area].fill(gv);
                        }
                    }
                    self.accum(*a, &contrib);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                self.conv2d_backward(out_idx, *x, *w, *stride, *pad, g, false)?;
            }
            Op::Conv2dPerSample { x, w, stride, pad } => {
                self.conv2d_backward(out_idx, *x, *w, *stride, *pad, g, true)?;
            }
            Op::RowTopK { a, indices, n } => {
                if self.wants(*a) {
                    let c = self.shape(*a)[1];
                    let r = self.shape(*a)[0];
                    let mut contrib = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..*n {
                            contrib[i * c + indices[i * n + j]] += g[i * n + j];
                        }
                    }
                    self.accum(*a, &contrib);
                }
            }
            Op::RowScatter { a, indices, width } => {
                if self.wants(*a) {
                    let [r, n] = match self.shape(*a) {
                        [r, n] => [*r, *n],
                        _ => unreachable!(),
                    };
                    let mut contrib = vec![0.0; r * n];
                    for i in 0..r {
                        for j in 0..n {
                            contrib[i * n + j] = g[i * width + indices[i * n + j]];
                        }
                    }
                    self.accum(*a, &contrib);
                }
            }
            Op::ColSlice { a, col } => {
                if self.wants(*a) {
                    let [r, c] = match self.shape(*a) {
                        [r, c] => [*r, *c],
                        _ => unreachable!(),
                    };
                    let mut contrib = vec![0.0; r * c];
                    for i in 0..r {
                        contrib[i * c + col] = g[i];
                    }
                    self.accum(*a, &contrib);
                }
            }
            Op::RowSlice { a, row } => {
                if self.wants(*a) {
                    let [r, c] = match self.shape(*a) {
                        [r, c] => [*r, *c],
                        _ => unreachable!(),
                    };
                    let mut contrib = vec![0.0; r * c];
                    contrib[row * c..(row + 1) * c].copy_from_slice(g);
                    self.accum(*a, &contrib);
                }
            }
            Op::Segment { a, from } => {
                if self.wants(*a) {
                    let total = self.nodes[a.0].value.numel();
                    let mut contrib = vec![0.0; total];
                    contrib[*from..from + g.len()].copy_from_slice(g);
                    self.accum(*a, &contrib);
                }
            }
            Op::AssembleScatter { dyn_v, stat, dyn_pos, stat_pos } => {
                let [b, width] = *self.shape_arr2(out_idx);
                if self.wants(*dyn_v) {
                    let nd = dyn_pos.len();
                    let mut contrib = vec![0.0; b * nd];
                    for row in 0..b {
                        for (i, &p) in dyn_pos.iter().enumerate() {
                            contrib[row * nd + i] = g[row * width + p];
                        }
                    }
                    self.accum(*dyn_v, &contrib);
                }
                if self.wants(*stat) {
                    let mut contrib = vec![0.0; stat_pos.len()];
                    for row in 0..b {
                        for (j, &p) in stat_pos.iter().enumerate() {
                            contrib[j] += g[row * width + p];
                        }
                    }
                    self.accum(*stat, &contrib);
                }
            }
            Op::CrossEntropyLogits { logits, targets } => {
                if self.wants(*logits) {
                    let [n, k] = match self.shape(*logits) {
                        [n, k] => [*n, *k],
                        _ => unreachable!(),
                    };
                    let zv = self.nodes[logits.0].value.data();
                    let scale = g[0] / n as Float;
                    let mut contrib = vec![0.0; n * k];
                    for i in 0..n {
                        let row = &zv[i * k..(i + 1) * k];
                        softmax_row(row, 1.0, &mut contrib[i * k..(i + 1) * k]);
                        let crow = &mut contrib[i * k..(i + 1) * k];
                        crow[targets[i]] -= 1.0;
                        for v in crow.iter_mut() {
                            *v *= scale;
                        }
                    }
                    self.accum(*logits, &contrib);
                }
            }
        }
        Ok(())
    }

    fn shape_arr2(&self, idx: usize) -> &[usize; 2] {
        self.nodes[idx].value.shape().try_into().expect("rank-2 output")
    }

    fn conv2d_backward(
        &mut self,
        out_idx: usize,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        g: &[Float],
        per_sample: bool,
    ) -> Result<()> {
        let (n, ci, h, iw) = match self.shape(x) {
            [n, c, h, w] => (*n, *c, *h, *w),
            _ => unreachable!(),
        };
        let wshape = self.shape(w).to_vec();
        let (co, kh, kw) = if per_sample {
            (wshape[1], wshape[3], wshape[4])
        } else {
            (wshape[0], wshape[2], wshape[3])
        };
        let (oh, ow) = match self.nodes[out_idx].value.shape() {
            [_, _, oh, ow] => (*oh, *ow),
            _ => unreachable!(),
        };
        let patch = ci * kh * kw;
        let area = oh * ow;
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        if !want_x && !want_w {
            return Ok(());
        }

        let xv = self.nodes[x.0].value.data().to_vec();
        let wv = self.nodes[w.0].value.data().to_vec();
        let mut gx = if want_x { vec![0.0; xv.len()] } else { Vec::new() };
        let mut gw = if want_w { vec![0.0; wv.len()] } else { Vec::new() };
        let mut col = vec![0.0; patch * area];
        let mut gcol = vec![0.0; patch * area];

        for b in 0..n {
            im2col(&xv[b * ci * h * iw..(b + 1) * ci * h * iw], ci, h, iw, kh, kw, stride, pad, &mut col);
            let gout = &g[b * co * area..(b + 1) * co * area];
            if want_w {
                let gw_slice = if per_sample {
                    &mut gw[b * co * patch..(b + 1) * co * patch]
                } else {
                    &mut gw[..]
                };
                gemm_nt_acc(gout, &col, gw_slice, co, area, patch);
            }
            if want_x {
                let w_slice = if per_sample { &wv[b * co * patch..(b + 1) * co * patch] } else { &wv[..] };
                gcol.fill(0.0);
                gemm_tn_acc(w_slice, gout, &mut gcol, patch, co, area);
                col2im_acc(&gcol, ci, h, iw, kh, kw, stride, pad, &mut gx[b * ci * h * iw..(b + 1) * ci * h * iw]);
            }
        }
        if want_x {
            self.accum(x, &gx);
        }
        if want_w {
            self.accum(w, &gw);
        }
        Ok(())
    }
}

/// Numerically safe logistic function.
pub fn stable_sigmoid(x: Float) -> Float {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax of one row at temperature `temp`, written into `out`.
fn softmax_row(row: &[Float], temp: Float, out: &mut [Float]) {
    let m = row.iter().map(|&z| z / temp).fold(Float::NEG_INFINITY, Float::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(row) {
        let e = (z / temp - m).exp();
        *o = e;
        total += e;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

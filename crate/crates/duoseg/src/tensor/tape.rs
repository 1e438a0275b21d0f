use super::{numel, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Relu(Var),
    Log(Var),
    SoftmaxLast {
        x: Var,
        cols: usize,
    },
    LogSoftmaxLast {
        x: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cols: usize,
        eps: f64,
    },
    MeanAll(Var),
    SumAll(Var),
    ConcatLast {
        xs: Vec<Var>,
        widths: Vec<usize>,
        rows: usize,
    },
    SliceLast {
        x: Var,
        start: usize,
        len: usize,
        cols: usize,
        rows: usize,
    },
    Reshape(Var),
    AddBias {
        x: Var,
        bias: Var,
        cols: usize,
    },
    MulPerRow {
        x: Var,
        w: Var,
        rows: usize,
        pixels: usize,
        cols: usize,
    },
    Mix3x3 {
        x: Var,
        b: usize,
        h: usize,
        w: usize,
        d: usize,
        kernel: [[f64; 3]; 3],
    },
    SpatialMean {
        x: Var,
        b: usize,
        h: usize,
        w: usize,
        d: usize,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Define-by-run record of differentiable operations.
///
/// A tape is rebuilt for every forward pass and confined to one thread.
/// `backward` replays the record in strict reverse creation order;
/// `clear_grads` drops gradient buffers without touching any value.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor as a leaf, copying its data and grad flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
        )
    }

    /// Registers grad-free data, e.g. inputs or one-hot selection masks.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, TensorError> {
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(self.push(Op::Leaf, shape, data, false))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, vec![], vec![value], false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a 1-element var.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Gradient accumulated for `v`, if it carries one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            op,
            shape,
            data,
            grad: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    /// Last-axis width and the row count it implies.
    fn last_axis(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        let shape = &self.nodes[v.0].shape;
        let cols = *shape.last().ok_or_else(|| TensorError::BadShape {
            op,
            expected: "at least one axis".into(),
            got: shape.clone(),
        })?;
        if cols == 0 {
            return Err(TensorError::BadShape {
                op,
                expected: "nonempty last axis".into(),
                got: shape.clone(),
            });
        }
        Ok((cols, self.nodes[v.0].data.len() / cols))
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b), shape, data, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Sub(a, b), shape, data, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Mul(a, b), shape, data, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * factor).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs(&[x]);
        self.push(Op::Scale(x, factor), shape, data, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs(&[x]);
        self.push(Op::Relu(x), shape, data, rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.ln()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs(&[x]);
        self.push(Op::Log(x), shape, data, rg)
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// `a [m×k] · b [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        {
            let da = &self.nodes[a.0].data;
            let db = &self.nodes[b.0].data;
            for i in 0..m {
                for p in 0..k {
                    let av = da[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &db[p * n..(p + 1) * n];
                    let orow = &mut data[i * n..(i + 1) * n];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Matmul { a, b, m, k, n }, vec![m, n], data, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = &self.nodes[x.0].shape;
        if shape.len() != 2 {
            return Err(TensorError::BadShape {
                op: "transpose",
                expected: "rank-2 tensor".into(),
                got: shape.clone(),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = src[r * cols + c];
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Transpose { x, rows, cols }, vec![cols, rows], data, rg))
    }

    // ── row-structured ops ───────────────────────────────────────────

    /// Numerically stabilized softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let (cols, rows) = self.last_axis("softmax", x)?;
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs(&[x]);
        Ok(self.push(Op::SoftmaxLast { x, cols }, shape, data, rg))
    }

    /// `log(softmax(x))` over the last axis, computed stably.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let (cols, rows) = self.last_axis("log_softmax", x)?;
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in data[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v - max - log_sum;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs(&[x]);
        Ok(self.push(Op::LogSoftmaxLast { x, cols }, shape, data, rg))
    }

    /// Per-row normalization over the last axis: zero mean, unit variance,
    /// then `gain ⊙ · + bias`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (cols, rows) = self.last_axis("layer_norm", x)?;
        for (name, v) in [("gain", gain), ("bias", bias)] {
            let s = &self.nodes[v.0].shape;
            if s != &[cols] {
                return Err(TensorError::BadShape {
                    op: "layer_norm",
                    expected: format!("{name} of shape [{cols}]"),
                    got: s.clone(),
                });
            }
        }
        if eps <= 0.0 {
            return Err(TensorError::Contract {
                op: "layer_norm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                data[r * cols + c] = g[c] * (row[c] - mean) * inv_std + b[c];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                cols,
                eps,
            },
            shape,
            data,
            rg,
        ))
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.needs(&[x]);
        self.push(Op::SumAll(x), vec![], vec![total], rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len() as f64;
        let total: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.needs(&[x]);
        self.push(Op::MeanAll(x), vec![], vec![total / n], rg)
    }

    // ── shape plumbing ───────────────────────────────────────────────

    /// Concatenates along the last axis; all inputs must agree on the
    /// leading axes.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = *xs.first().ok_or_else(|| TensorError::Contract {
            op: "concat_last",
            msg: "needs at least one input".into(),
        })?;
        let lead = {
            let s = &self.nodes[first.0].shape;
            if s.is_empty() {
                return Err(TensorError::BadShape {
                    op: "concat_last",
                    expected: "at least one axis".into(),
                    got: s.clone(),
                });
            }
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = &self.nodes[x.0].shape;
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_last",
                    lhs: self.nodes[first.0].shape.clone(),
                    rhs: s.clone(),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let rows = lead.iter().product::<usize>();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        for r in 0..rows {
            let mut offset = 0;
            for (&x, &w) in xs.iter().zip(&widths) {
                let src = &self.nodes[x.0].data[r * w..(r + 1) * w];
                data[r * total + offset..r * total + offset + w].copy_from_slice(src);
                offset += w;
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.needs(xs);
        Ok(self.push(
            Op::ConcatLast {
                xs: xs.to_vec(),
                widths,
                rows,
            },
            shape,
            data,
            rg,
        ))
    }

    /// Columns `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (cols, rows) = self.last_axis("slice_last", x)?;
        if start + len > cols || len == 0 {
            return Err(TensorError::Contract {
                op: "slice_last",
                msg: format!("slice [{start}, {}) out of width {cols}", start + len),
            });
        }
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let mut shape = self.nodes[x.0].shape.clone();
        *shape.last_mut().unwrap() = len;
        let rg = self.needs(&[x]);
        Ok(self.push(
            Op::SliceLast {
                x,
                start,
                len,
                cols,
                rows,
            },
            shape,
            data,
            rg,
        ))
    }

    /// Reinterprets the row-major buffer under a new shape of equal size.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let got = self.nodes[x.0].data.len();
        if numel(&shape) != got {
            return Err(TensorError::DataLength {
                expected: numel(&shape),
                shape,
                got,
            });
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Reshape(x), shape, data, rg))
    }

    /// Adds a `[C]` bias to every row of an `[..×C]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (cols, rows) = self.last_axis("add_bias", x)?;
        if self.nodes[bias.0].shape != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let src = &self.nodes[x.0].data;
        let b = &self.nodes[bias.0].data;
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] = src[r * cols + c] + b[c];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs(&[x, bias]);
        Ok(self.push(Op::AddBias { x, bias, cols }, shape, data, rg))
    }

    /// Multiplies `x [B×..×C]` by a per-sample weight `w [B×C]`, broadcast
    /// over the middle axes.
    pub fn mul_per_row(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        if sx.len() < 2 || sw.len() != 2 || sx[0] != sw[0] || sx[sx.len() - 1] != sw[1] {
            return Err(TensorError::ShapeMismatch {
                op: "mul_per_row",
                lhs: sx,
                rhs: sw,
            });
        }
        let rows = sx[0];
        let cols = sx[sx.len() - 1];
        let pixels = self.nodes[x.0].data.len() / (rows * cols);
        let src = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            for p in 0..pixels {
                let base = (r * pixels + p) * cols;
                for c in 0..cols {
                    data[base + c] = src[base + c] * wd[r * cols + c];
                }
            }
        }
        let rg = self.needs(&[x, w]);
        Ok(self.push(
            Op::MulPerRow {
                x,
                w,
                rows,
                pixels,
                cols,
            },
            sx,
            data,
            rg,
        ))
    }

    // ── spatial ops ──────────────────────────────────────────────────

    /// Fixed 3×3 neighborhood mixing per feature channel, zero-padded.
    pub fn mix3x3(&mut self, x: Var, kernel: [[f64; 3]; 3]) -> Result<Var, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 4 {
            return Err(TensorError::BadShape {
                op: "mix3x3",
                expected: "[B,H,W,D] tensor".into(),
                got: shape,
            });
        }
        let (b, h, w, d) = (shape[0], shape[1], shape[2], shape[3]);
        let src = &self.nodes[x.0].data;
        let data = mix3x3_forward(src, b, h, w, d, &kernel);
        let rg = self.needs(&[x]);
        Ok(self.push(
            Op::Mix3x3 {
                x,
                b,
                h,
                w,
                d,
                kernel,
            },
            shape,
            data,
            rg,
        ))
    }

    /// Mean over the spatial axes: `[B,H,W,D] -> [B,D]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 4 {
            return Err(TensorError::BadShape {
                op: "spatial_mean",
                expected: "[B,H,W,D] tensor".into(),
                got: shape,
            });
        }
        let (b, h, w, d) = (shape[0], shape[1], shape[2], shape[3]);
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; b * d];
        let inv = 1.0 / (h * w) as f64;
        for bi in 0..b {
            for p in 0..h * w {
                let base = (bi * h * w + p) * d;
                for di in 0..d {
                    data[bi * d + di] += src[base + di];
                }
            }
            for di in 0..d {
                data[bi * d + di] *= inv;
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Op::SpatialMean { x, b, h, w, d }, vec![b, d], data, rg))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Zeroes gradient buffers only; values stay untouched.
    pub fn clear_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Reverse sweep from a scalar loss. Afterwards every `requires_grad`
    /// node holds its full gradient; unreachable ones hold zeros.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                got: self.nodes[loss.0].shape.clone(),
            });
        }
        for node in &mut self.nodes {
            if node.requires_grad {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
        if let Some(g) = &mut self.nodes[loss.0].grad {
            g[0] = 1.0;
        } else {
            // Loss depends on no gradient-carrying leaf; nothing flows.
            return Ok(());
        }
        for idx in (0..self.nodes.len()).rev() {
            if self.nodes[idx].grad.is_none() {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let upstream = self.nodes[idx].grad.clone().unwrap();
            self.backward_op(idx, &op, &upstream);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: &[f64]) {
        if let Some(g) = &mut self.nodes[v.0].grad {
            for (a, c) in g.iter_mut().zip(contribution) {
                *a += c;
            }
        }
    }

    fn backward_op(&mut self, idx: usize, op: &Op, up: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, up);
                self.accumulate(*b, up);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, up);
                let neg: Vec<f64> = up.iter().map(|g| -g).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f64> = up
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(g, y)| g * y)
                        .collect();
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<f64> = up
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, x)| g * x)
                        .collect();
                    self.accumulate(*b, &db);
                }
            }
            Op::Scale(x, factor) => {
                let dx: Vec<f64> = up.iter().map(|g| g * factor).collect();
                self.accumulate(*x, &dx);
            }
            Op::Relu(x) => {
                let dx: Vec<f64> = up
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Log(x) => {
                let dx: Vec<f64> = up
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(g, v)| g / v)
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.nodes[a.0].requires_grad {
                    // dA = G · Bᵀ
                    let db_data = &self.nodes[b.0].data;
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = up[i * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += g * db_data[p * n + j];
                            }
                        }
                    }
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · G
                    let da_data = &self.nodes[a.0].data;
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = da_data[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av * up[i * n + j];
                            }
                        }
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::Transpose { x, rows, cols } => {
                let mut dx = vec![0.0; rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        dx[r * cols + c] = up[c * rows + r];
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::SoftmaxLast { x, cols } => {
                let cols = *cols;
                let out = self.nodes[idx].data.clone();
                let rows = up.len() / cols;
                let mut dx = vec![0.0; up.len()];
                for r in 0..rows {
                    let o = &out[r * cols..(r + 1) * cols];
                    let g = &up[r * cols..(r + 1) * cols];
                    let dot: f64 = o.iter().zip(g).map(|(p, g)| p * g).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = o[c] * (g[c] - dot);
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::LogSoftmaxLast { x, cols } => {
                let cols = *cols;
                let out = self.nodes[idx].data.clone();
                let rows = up.len() / cols;
                let mut dx = vec![0.0; up.len()];
                for r in 0..rows {
                    let o = &out[r * cols..(r + 1) * cols];
                    let g = &up[r * cols..(r + 1) * cols];
                    let gsum: f64 = g.iter().sum();
                    for c in 0..cols {
                        dx[r * cols + c] = g[c] - o[c].exp() * gsum;
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cols,
                eps,
            } => {
                let cols = *cols;
                let rows = up.len() / cols;
                let src = &self.nodes[x.0].data;
                let g = &self.nodes[gain.0].data;
                let mut dx = vec![0.0; src.len()];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                for r in 0..rows {
                    let row = &src[r * cols..(r + 1) * cols];
                    let grow = &up[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    // normalized row and the gained upstream
                    let mut gy_mean = 0.0;
                    let mut gyxhat_mean = 0.0;
                    for c in 0..cols {
                        let xhat = (row[c] - mean) * inv_std;
                        let gy = grow[c] * g[c];
                        gy_mean += gy;
                        gyxhat_mean += gy * xhat;
                        dgain[c] += grow[c] * xhat;
                        dbias[c] += grow[c];
                    }
                    gy_mean /= cols as f64;
                    gyxhat_mean /= cols as f64;
                    for c in 0..cols {
                        let xhat = (row[c] - mean) * inv_std;
                        let gy = grow[c] * g[c];
                        dx[r * cols + c] = inv_std * (gy - gy_mean - xhat * gyxhat_mean);
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gain, &dgain);
                self.accumulate(*bias, &dbias);
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].data.len();
                let dx = vec![up[0] / n as f64; n];
                self.accumulate(*x, &dx);
            }
            Op::SumAll(x) => {
                let n = self.nodes[x.0].data.len();
                let dx = vec![up[0]; n];
                self.accumulate(*x, &dx);
            }
            Op::ConcatLast { xs, widths, rows } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&x, &w) in xs.iter().zip(widths) {
                    if self.nodes[x.0].requires_grad {
                        let mut dx = vec![0.0; rows * w];
                        for r in 0..*rows {
                            dx[r * w..(r + 1) * w]
                                .copy_from_slice(&up[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(x, &dx);
                    }
                    offset += w;
                }
            }
            Op::SliceLast {
                x,
                start,
                len,
                cols,
                rows,
            } => {
                let mut dx = vec![0.0; rows * cols];
                for r in 0..*rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&up[r * len..(r + 1) * len]);
                }
                self.accumulate(*x, &dx);
            }
            Op::Reshape(x) => {
                self.accumulate(*x, up);
            }
            Op::AddBias { x, bias, cols } => {
                self.accumulate(*x, up);
                if self.nodes[bias.0].requires_grad {
                    let mut dbias = vec![0.0; *cols];
                    for (i, g) in up.iter().enumerate() {
                        dbias[i % cols] += g;
                    }
                    self.accumulate(*bias, &dbias);
                }
            }
            Op::MulPerRow {
                x,
                w,
                rows,
                pixels,
                cols,
            } => {
                let (rows, pixels, cols) = (*rows, *pixels, *cols);
                if self.nodes[x.0].requires_grad {
                    let wd = &self.nodes[w.0].data;
                    let mut dx = vec![0.0; up.len()];
                    for r in 0..rows {
                        for p in 0..pixels {
                            let base = (r * pixels + p) * cols;
                            for c in 0..cols {
                                dx[base + c] = up[base + c] * wd[r * cols + c];
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                }
                if self.nodes[w.0].requires_grad {
                    let xd = &self.nodes[x.0].data;
                    let mut dw = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for p in 0..pixels {
                            let base = (r * pixels + p) * cols;
                            for c in 0..cols {
                                dw[r * cols + c] += up[base + c] * xd[base + c];
                            }
                        }
                    }
                    self.accumulate(*w, &dw);
                }
            }
            Op::Mix3x3 {
                x,
                b,
                h,
                w,
                d,
                kernel,
            } => {
                // Gradient is correlation with the flipped kernel.
                let mut flipped = [[0.0; 3]; 3];
                for i in 0..3 {
                    for j in 0..3 {
                        flipped[i][j] = kernel[2 - i][2 - j];
                    }
                }
                let dx = mix3x3_forward(up, *b, *h, *w, *d, &flipped);
                self.accumulate(*x, &dx);
            }
            Op::SpatialMean { x, b, h, w, d } => {
                let inv = 1.0 / (h * w) as f64;
                let mut dx = vec![0.0; b * h * w * d];
                for bi in 0..*b {
                    for p in 0..h * w {
                        let base = (bi * h * w + p) * d;
                        for di in 0..*d {
                            dx[base + di] = up[bi * d + di] * inv;
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
        }
    }

}

pub(crate) fn mix3x3_forward(
    src: &[f64],
    b: usize,
    h: usize,
    w: usize,
    d: usize,
    kernel: &[[f64; 3]; 3],
) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                for (i, krow) in kernel.iter().enumerate() {
                    let sy = y as isize + i as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for (j, &kv) in krow.iter().enumerate() {
                        let sx = x as isize + j as isize - 1;
                        if sx < 0 || sx >= w as isize || kv == 0.0 {
                            continue;
                        }
                        let src_base = ((bi * h + sy as usize) * w + sx as usize) * d;
                        let out_base = ((bi * h + y) * w + x) * d;
                        for di in 0..d {
                            out[out_base + di] += kv * src[src_base + di];
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{compare_gradients, FD_EPS, FD_TOL};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Builds the expression twice: once for analytic gradients, once per
    /// finite-difference probe. The probe path only ever runs forwards.
    fn check_grads(
        shapes: &[&[usize]],
        data: &[Vec<f64>],
        build: impl Fn(&mut Tape, &[Var]) -> Var,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = shapes
            .iter()
            .zip(data)
            .map(|(s, d)| tape.leaf(&tensor(s, d).with_grad()))
            .collect();
        let loss = build(&mut tape, &vars);
        tape.backward(loss).unwrap();
        let analytic: Vec<f64> = vars
            .iter()
            .flat_map(|v| tape.grad(*v).unwrap().to_vec())
            .collect();

        let flat: Vec<f64> = data.iter().flatten().copied().collect();
        let mut eval = |probe: &[f64]| {
            let mut t = Tape::new();
            let mut offset = 0;
            let vars: Vec<Var> = shapes
                .iter()
                .map(|s| {
                    let n: usize = s.iter().product();
                    let v = t
                        .constant(s.to_vec(), probe[offset..offset + n].to_vec())
                        .unwrap();
                    offset += n;
                    v
                })
                .collect();
            let loss = build(&mut t, &vars);
            t.scalar_value(loss)
        };
        let report = compare_gradients(&mut eval, &flat, &analytic, FD_EPS);
        assert!(
            report.passes(FD_TOL),
            "gradient check failed: rel err {} at coordinate {} (analytic {}, numeric {})",
            report.max_rel_err,
            report.worst_index,
            report.analytic_at_worst,
            report.numeric_at_worst
        );
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    /// Values bounded away from zero so relu kinks stay out of FD reach.
    fn random_vec_off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(0.2..2.0);
                if rng.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect()
    }

    // ── matmul ───────────────────────────────────────────────────────

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape
            .constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])
            .unwrap();
        let m = tape
            .constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projector() {
        let mut tape = Tape::new();
        let p = tape
            .constant(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0])
            .unwrap();
        let m = tape
            .constant(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0])
            .unwrap();
        let out = tape.matmul(p, m).unwrap();
        assert_eq!(tape.value(out), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_rejects_mismatch_naming_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = random_vec(&mut rng, 12);
        let b = random_vec(&mut rng, 8);
        check_grads(&[&[3, 4], &[4, 2]], &[a, b], |t, v| {
            let out = t.matmul(v[0], v[1]).unwrap();
            t.sum_all(out)
        });
    }

    // ── softmax ──────────────────────────────────────────────────────

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        let out = tape.softmax(x).unwrap();
        for v in tape.value(out) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2], vec![1000.0, 0.0]).unwrap();
        let out = tape.softmax(x).unwrap();
        let v = tape.value(out);
        assert!(v[0].is_finite() && v[1].is_finite());
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!(v[1] < 1e-12);
    }

    #[test]
    fn softmax_matches_exp_normalize_oracle() {
        // Independent route: plain exp-normalize without max subtraction.
        let logits = [1.0f64, 2.0, 3.0];
        let exps: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
        let sum: f64 = exps.iter().sum();
        let expected: Vec<f64> = exps.iter().map(|e| e / sum).collect();

        let mut tape = Tape::new();
        let x = tape.constant(vec![3], logits.to_vec()).unwrap();
        let out = tape.softmax(x).unwrap();
        for (got, want) in tape.value(out).iter().zip(&expected) {
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_rejects_empty_last_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 0], vec![]).unwrap();
        assert!(tape.softmax(x).is_err());
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_vec(&mut rng, 12);
        let w = random_vec(&mut rng, 12);
        check_grads(&[&[3, 4]], &[x], |t, v| {
            let p = t.softmax(v[0]).unwrap();
            let weights = t.constant(vec![3, 4], w.clone()).unwrap();
            let weighted = t.mul(p, weights).unwrap();
            t.sum_all(weighted)
        });
    }

    // ── layer norm ───────────────────────────────────────────────────

    #[test]
    fn layer_norm_collapses_constant_row_to_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![3], vec![5.0, 5.0, 5.0]).unwrap();
        let gain = tape.constant(vec![3], vec![1.0; 3]).unwrap();
        let bias = tape.constant(vec![3], vec![0.0; 3]).unwrap();
        let out = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        for v in tape.value(out) {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_keeps_already_normalized_row() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2], vec![1.0, -1.0]).unwrap();
        let gain = tape.constant(vec![2], vec![1.0; 2]).unwrap();
        let bias = tape.constant(vec![2], vec![0.0; 2]).unwrap();
        let out = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        let v = tape.value(out);
        assert!((v[0] - 1.0).abs() < 1e-9 && (v[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_output_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = random_vec(&mut rng, 4);
        let mut tape = Tape::new();
        let x = tape.constant(vec![4], data).unwrap();
        let gain = tape.constant(vec![4], vec![1.0; 4]).unwrap();
        let bias = tape.constant(vec![4], vec![0.0; 4]).unwrap();
        let out = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        let v = tape.value(out);
        let mean = v.iter().sum::<f64>() / 4.0;
        let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "var {var}");
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_vec(&mut rng, 8);
        let gain = random_vec(&mut rng, 4);
        let bias = random_vec(&mut rng, 4);
        let w = random_vec(&mut rng, 8);
        check_grads(&[&[2, 4], &[4], &[4]], &[x, gain, bias], |t, v| {
            let out = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            let weights = t.constant(vec![2, 4], w.clone()).unwrap();
            let weighted = t.mul(out, weights).unwrap();
            t.sum_all(weighted)
        });
    }

    // ── backward semantics ───────────────────────────────────────────

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).with_grad());
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square_sum_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[2], &[1.0, 2.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[2], &[1.0, 2.0]).with_grad());
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn grad_free_leaf_never_receives_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[2], &[1.0, 2.0]).with_grad());
        let frozen = tape.leaf(&tensor(&[2], &[3.0, 4.0]));
        let prod = tape.mul(x, frozen).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        assert!(tape.grad(frozen).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn unreachable_grad_leaf_holds_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[2], &[1.0, 2.0]).with_grad());
        let orphan = tape.leaf(&tensor(&[3], &[1.0, 1.0, 1.0]).with_grad());
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(orphan).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn backward_is_idempotent_after_clearing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = random_vec(&mut rng, 6);
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[2, 3], &data).with_grad());
        let p = tape.softmax(x).unwrap();
        let lp = tape.log(p);
        let prod = tape.mul(p, lp).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        let first = tape.grad(x).unwrap().to_vec();
        tape.clear_grads();
        assert!(tape.grad(x).is_none());
        tape.backward(loss).unwrap();
        let second = tape.grad(x).unwrap().to_vec();
        let first_bits: Vec<u64> = first.iter().map(|v| v.to_bits()).collect();
        let second_bits: Vec<u64> = second.iter().map(|v| v.to_bits()).collect();
        assert_eq!(first_bits, second_bits);
    }

    // ── remaining op gradients ───────────────────────────────────────

    #[test]
    fn elementwise_and_reduction_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random_vec(&mut rng, 6);
        let b = random_vec(&mut rng, 6);
        check_grads(&[&[2, 3], &[2, 3]], &[a.clone(), b.clone()], |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let d = t.sub(v[0], v[1]).unwrap();
            let p = t.mul(s, d).unwrap();
            let scaled = t.scale(p, 0.7);
            t.mean_all(scaled)
        });
    }

    #[test]
    fn relu_gradient_off_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random_vec_off_kink(&mut rng, 8);
        check_grads(&[&[8]], &[x], |t, v| {
            let r = t.relu(v[0]);
            t.sum_all(r)
        });
    }

    #[test]
    fn log_gradient_on_positive_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(0.3..3.0)).collect();
        check_grads(&[&[6]], &[x], |t, v| {
            let l = t.log(v[0]);
            t.sum_all(l)
        });
    }

    #[test]
    fn log_softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = random_vec(&mut rng, 10);
        let w = random_vec(&mut rng, 10);
        check_grads(&[&[2, 5]], &[x], |t, v| {
            let lp = t.log_softmax(v[0]).unwrap();
            let weights = t.constant(vec![2, 5], w.clone()).unwrap();
            let weighted = t.mul(lp, weights).unwrap();
            t.sum_all(weighted)
        });
    }

    #[test]
    fn concat_slice_transpose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let a = random_vec(&mut rng, 6);
        let b = random_vec(&mut rng, 4);
        check_grads(&[&[2, 3], &[2, 2]], &[a, b], |t, v| {
            let cat = t.concat_last(&[v[0], v[1]]).unwrap();
            let piece = t.slice_last(cat, 1, 3).unwrap();
            let tp = t.transpose(piece).unwrap();
            let sq = t.mul(tp, tp).unwrap();
            t.sum_all(sq)
        });
    }

    #[test]
    fn add_bias_and_mul_per_row_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = random_vec(&mut rng, 2 * 4 * 3);
        let bias = random_vec(&mut rng, 3);
        let w = random_vec(&mut rng, 2 * 3);
        check_grads(&[&[2, 4, 3], &[3], &[2, 3]], &[x, bias, w], |t, v| {
            let biased = t.add_bias(v[0], v[1]).unwrap();
            let modulated = t.mul_per_row(biased, v[2]).unwrap();
            let sm = t.softmax(modulated).unwrap();
            let lg = t.log(sm);
            let prod = t.mul(sm, lg).unwrap();
            t.sum_all(prod)
        });
    }

    #[test]
    fn spatial_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let x = random_vec(&mut rng, 3 * 3 * 2);
        let kernel = [[0.05, 0.1, 0.05], [0.1, 0.4, 0.1], [0.05, 0.1, 0.05]];
        check_grads(&[&[1, 3, 3, 2]], &[x], |t, v| {
            let mixed = t.mix3x3(v[0], kernel).unwrap();
            let pooled = t.spatial_mean(mixed).unwrap();
            let sq = t.mul(pooled, pooled).unwrap();
            t.sum_all(sq)
        });
    }

    #[test]
    fn reshape_passes_values_and_gradients_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = random_vec(&mut rng, 12);
        check_grads(&[&[3, 4]], &[x], |t, v| {
            let r = t.reshape(v[0], vec![2, 6]).unwrap();
            let sq = t.mul(r, r).unwrap();
            t.mean_all(sq)
        });
    }

    // ── properties ───────────────────────────────────────────────────

    proptest! {
        /// Rows of softmax output always sum to 1 and live in [0,1].
        #[test]
        fn softmax_rows_are_distributions(
            data in proptest::collection::vec(-50.0f64..50.0, 1..=24),
        ) {
            let cols = data.len();
            let mut tape = Tape::new();
            let x = tape.constant(vec![cols], data).unwrap();
            let out = tape.softmax(x).unwrap();
            let v = tape.value(out);
            let sum: f64 = v.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for p in v {
                prop_assert!(*p >= 0.0 && *p <= 1.0);
            }
        }

        /// Any expression composed of provided ops passes the central
        /// finite-difference check on every coordinate.
        #[test]
        fn random_expressions_pass_gradient_check(seed in 0u64..64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = rng.random_range(2..4usize);
            let cols = rng.random_range(2..5usize);
            let a = random_vec_off_kink(&mut rng, rows * cols);
            let b = random_vec_off_kink(&mut rng, rows * cols);
            let pick = rng.random_range(0..4u8);
            check_grads(
                &[&[rows, cols], &[rows, cols]],
                &[a, b],
                move |t, v| match pick {
                    0 => {
                        let s = t.add(v[0], v[1]).unwrap();
                        let r = t.relu(s);
                        t.mean_all(r)
                    }
                    1 => {
                        let p = t.softmax(v[0]).unwrap();
                        let q = t.mul(p, v[1]).unwrap();
                        t.sum_all(q)
                    }
                    2 => {
                        let tp = t.transpose(v[1]).unwrap();
                        let m = t.matmul(v[0], tp).unwrap();
                        let sm = t.log_softmax(m).unwrap();
                        t.mean_all(sm)
                    }
                    _ => {
                        let d = t.sub(v[0], v[1]).unwrap();
                        let sq = t.mul(d, d).unwrap();
                        t.sum_all(sq)
                    }
                },
            );
        }
    }
}

//! Wengert tape: reverse-mode autodiff over flat f64 tensors.
//!
//! Ops append nodes in topological order during the forward pass; `backward`
//! replays them in reverse exactly once, accumulating cotangents in fixed
//! order so gradients are bit-identical across runs. A second backward on the
//! same tape is an error.
//!
//! Every op also adds to an instrumented multiply-accumulate counter. The
//! counter uses mac-equivalent units: one unit per scalar multiply in linear
//! algebra, `2*h*w*log2(h*w)` per 2D FFT, and one unit per transcendental in
//! the pointwise ops. Relative comparisons (expert sweeps, adaptive-compute
//! spreads) only ever consume differences of this counter.

use crate::error::{MoceError, Result};
use crate::numerics::fft::Fft2d;
use crate::numerics::special::{gelu, gelu_grad, normal_cdf, normal_pdf};
use crate::numerics::tensor::{numel_of, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    rule: Rule,
}

enum Rule {
    Leaf,
    Matmul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    /// Fused projection with bias: `out = x @ w + b` over flattened rows.
    LinearFused { x: usize, w: usize, b: usize, m: usize, k: usize, n: usize },
    /// `out = a^T @ b` with both operands viewed as `[rows, cols]`.
    MatmulTnB { a: usize, b: usize, rows: usize, ca: usize, cb: usize },
    /// `out = a @ b^T` with `a: [m, k]`, `b: [n, k]`.
    MatmulABt { a: usize, b: usize, m: usize, k: usize, n: usize },
    Conv3x3 { x: usize, w: usize, b: usize, h: usize, wd: usize, cin: usize, cout: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    AddConst { x: usize },
    AddRow { x: usize, bias: usize, rows: usize, cols: usize },
    Gelu { x: usize },
    Abs { x: usize },
    Softmax { x: usize, rows: usize, cols: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, rows: usize, cols: usize, eps: f64 },
    MeanAll { x: usize },
    SumAll { x: usize },
    Reshape { x: usize },
    Gather { x: usize, map: Vec<usize> },
    Transpose2d { x: usize, rows: usize, cols: usize },
    WindowPartition { x: usize, h: usize, w: usize, ch: usize, win: usize },
    WindowMerge { x: usize, h: usize, w: usize, ch: usize, win: usize },
    PixelUnshuffle { x: usize, h: usize, w: usize, ch: usize },
    PixelShuffle { x: usize, h: usize, w: usize, ch: usize },
    ConcatLast { a: usize, b: usize, rows: usize, ca: usize, cb: usize },
    Select { x: usize, idx: usize },
    ReduceMax { x: usize, argmax: usize },
    StackScalars { xs: Vec<usize> },
    MulScalar { x: usize, s: usize },
    NormalCdf { x: usize, scale: f64 },
    SpatialMean { x: usize, hw: usize, c: usize },
    L2NormCols { x: usize, rows: usize, cols: usize, eps: f64 },
    CircularCorr { q: usize, k: usize, nw: usize, w: usize, ch: usize },
    StandardizeGroups { x: usize, groups: usize, group_len: usize, eps: f64 },
    SobelDesc { x: usize, h: usize, w: usize, c: usize },
    CvSquared { x: usize },
    Sqrt { x: usize },
    FourierL1 { pred: usize, h: usize, w: usize, c: usize, diff_re: Vec<f64>, diff_im: Vec<f64> },
}

fn rule_name(rule: &Rule) -> &'static str {
    match rule {
        Rule::Leaf => "leaf",
        Rule::Matmul { .. } => "matmul",
        Rule::LinearFused { .. } => "linear",
        Rule::MatmulTnB { .. } => "matmul_tn_b",
        Rule::MatmulABt { .. } => "matmul_a_bt",
        Rule::Conv3x3 { .. } => "conv2d_3x3",
        Rule::Add { .. } => "add",
        Rule::Sub { .. } => "sub",
        Rule::Mul { .. } => "mul",
        Rule::Scale { .. } => "scale",
        Rule::AddConst { .. } => "add_const",
        Rule::AddRow { .. } => "add_row",
        Rule::Gelu { .. } => "gelu",
        Rule::Abs { .. } => "abs",
        Rule::Softmax { .. } => "softmax",
        Rule::LayerNorm { .. } => "layernorm",
        Rule::MeanAll { .. } => "mean_all",
        Rule::SumAll { .. } => "sum_all",
        Rule::Reshape { .. } => "reshape",
        Rule::Gather { .. } => "gather",
        Rule::Transpose2d { .. } => "transpose2d",
        Rule::WindowPartition { .. } => "window_partition",
        Rule::WindowMerge { .. } => "window_merge",
        Rule::PixelUnshuffle { .. } => "pixel_unshuffle",
        Rule::PixelShuffle { .. } => "pixel_shuffle",
        Rule::ConcatLast { .. } => "concat_last",
        Rule::Select { .. } => "select",
        Rule::ReduceMax { .. } => "reduce_max",
        Rule::StackScalars { .. } => "stack_scalars",
        Rule::MulScalar { .. } => "mul_scalar",
        Rule::NormalCdf { .. } => "normal_cdf",
        Rule::SpatialMean { .. } => "spatial_mean",
        Rule::L2NormCols { .. } => "l2_normalize_cols",
        Rule::CircularCorr { .. } => "circular_corr2d",
        Rule::StandardizeGroups { .. } => "standardize_groups",
        Rule::SobelDesc { .. } => "sobel_descriptor",
        Rule::CvSquared { .. } => "cv_squared",
        Rule::Sqrt { .. } => "sqrt",
        Rule::FourierL1 { .. } => "fourier_l1",
    }
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Recording tape. One tape per forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            macs: 0,
            backward_done: false,
        }
    }

    /// Snapshot a tensor onto the tape as a leaf. Gradients accumulate here
    /// when `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Rule::Leaf,
        )
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> TensorId {
        debug_assert_eq!(numel_of(shape), data.len());
        self.push(shape.to_vec(), data, false, Rule::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Multiply-accumulate units recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// First node holding a NaN, if any; `(op name, node index)`.
    pub fn first_nan(&self) -> Option<(&'static str, usize)> {
        for (i, node) in self.nodes.iter().enumerate() {
            if node.data.iter().any(|v| v.is_nan()) {
                return Some((rule_name(&node.rule), i));
            }
        }
        None
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, rule: Rule) -> TensorId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            grad: None,
            rule,
        });
        TensorId(id)
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── Ops ──────────────────────────────────────────────────────────

    /// `[.., m, k] @ [.., k, n] -> [.., m, n]`; leading batch dims must match
    /// exactly when present.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = sa.len() < 2
            || sb.len() != sa.len()
            || sa[sa.len() - 1] != sb[sb.len() - 2]
            || sa[..sa.len() - 2] != sb[..sb.len() - 2];
        if mismatch {
            return Err(MoceError::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            matmul_kernel(
                &self.value(a)[t * m * k..(t + 1) * m * k],
                &self.value(b)[t * k * n..(t + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.macs += (batch * m * k * n) as u64;
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, out, rg, Rule::Matmul { a: a.0, b: b.0, batch, m, k, n }))
    }

    /// 3x3 convolution with zero padding 1: `[h, w, cin] * [3, 3, cin, cout] + [cout]`.
    pub fn conv2d_3x3(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[0] != 3 || sw[1] != 3 || sw[2] != sx[2] {
            return Err(MoceError::Dimension {
                op: "conv2d_3x3",
                lhs: sx,
                rhs: sw,
            });
        }
        let (h, wd, cin, cout) = (sx[0], sx[1], sx[2], sw[3]);
        if h < 3 || wd < 3 {
            return Err(MoceError::Contract(format!(
                "conv2d_3x3 needs spatial extent >= 3, got {h}x{wd}"
            )));
        }
        if self.shape(b) != [cout] {
            return Err(MoceError::Dimension {
                op: "conv2d_3x3 bias",
                lhs: self.shape(b).to_vec(),
                rhs: vec![cout],
            });
        }
        let mut out = vec![0.0; h * wd * cout];
        conv3x3_forward(self.value(x), self.value(w), self.value(b), &mut out, h, wd, cin, cout);
        self.macs += (h * wd * (9 * cin + 1) * cout) as u64;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(
            vec![h, wd, cout],
            out,
            rg,
            Rule::Conv3x3 { x: x.0, w: w.0, b: b.0, h, wd, cin, cout },
        ))
    }

    fn elementwise_pair(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(MoceError::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_pair("add", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, data, rg, Rule::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_pair("sub", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, data, rg, Rule::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_pair("mul", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        self.macs += data.len() as u64;
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, data, rg, Rule::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        self.macs += data.len() as u64;
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        self.push(shape, data, rg, Rule::Scale { x: x.0, c })
    }

    /// Add a constant vector (e.g. routing noise); backward passes through.
    pub fn add_const(&mut self, x: TensorId, c: &[f64]) -> Result<TensorId> {
        if self.value(x).len() != c.len() {
            return Err(MoceError::Dimension {
                op: "add_const",
                lhs: self.shape(x).to_vec(),
                rhs: vec![c.len()],
            });
        }
        let data: Vec<f64> = self.value(x).iter().zip(c).map(|(v, k)| v + k).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(shape, data, rg, Rule::AddConst { x: x.0 }))
    }

    /// Broadcast a `[cols]` bias over the rows of `[rows, cols]`.
    pub fn add_row(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let cols = *sx.last().unwrap_or(&0);
        if self.shape(bias) != [cols] {
            return Err(MoceError::Dimension {
                op: "add_row",
                lhs: sx,
                rhs: self.shape(bias).to_vec(),
            });
        }
        let rows = numel_of(&sx) / cols;
        let bv = self.value(bias).to_vec();
        let data: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % cols])
            .collect();
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(sx, data, rg, Rule::AddRow { x: x.0, bias: bias.0, rows, cols }))
    }

    /// Matrix product on flattened views: `a` as `[m, k]`, `b` as `[k, n]`,
    /// with an explicit output shape. Lets callers project the last axis of
    /// any tensor without materializing reshape copies.
    pub fn matmul_dims(
        &mut self,
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
        out_shape: Vec<usize>,
    ) -> Result<TensorId> {
        if self.value(a).len() != m * k
            || self.value(b).len() != k * n
            || numel_of(&out_shape) != m * n
        {
            return Err(MoceError::Dimension {
                op: "matmul_dims",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_kernel(self.value(a), self.value(b), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out_shape, out, rg, Rule::Matmul { a: a.0, b: b.0, batch: 1, m, k, n }))
    }

    /// Linear layer over the last axis; the output keeps the leading shape.
    /// Bias addition is fused into the product.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(MoceError::Dimension {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let (k, n) = (sw[0], sw[1]);
        if self.shape(b) != [n] {
            return Err(MoceError::Dimension {
                op: "linear bias",
                lhs: self.shape(b).to_vec(),
                rhs: vec![n],
            });
        }
        let m = numel_of(&sx) / k;
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = n;

        let mut out = vec![0.0; m * n];
        {
            let bias = self.value(b);
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        matmul_kernel(self.value(x), self.value(w), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(
            out_shape,
            out,
            rg,
            Rule::LinearFused { x: x.0, w: w.0, b: b.0, m, k, n },
        ))
    }

    /// `a^T @ b` with both operands viewed as `[rows, last]`; output
    /// `[ca, cb]`. Saves materializing the transpose.
    pub fn matmul_tn_b(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let ca = *self.shape(a).last().unwrap_or(&0);
        let cb = *self.shape(b).last().unwrap_or(&0);
        let rows = self.value(a).len() / ca.max(1);
        if rows * cb != self.value(b).len() {
            return Err(MoceError::Dimension {
                op: "matmul_tn_b",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; ca * cb];
        kernel_at_b(self.value(a), self.value(b), &mut out, rows, ca, cb);
        self.macs += (rows * ca * cb) as u64;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(vec![ca, cb], out, rg, Rule::MatmulTnB { a: a.0, b: b.0, rows, ca, cb }))
    }

    /// `a @ b^T` with `a` viewed as `[m, k]` and `b` strictly `[n, k]`;
    /// output takes `out_shape` (product `m * n`).
    pub fn matmul_a_bt(&mut self, a: TensorId, b: TensorId, out_shape: Vec<usize>) -> Result<TensorId> {
        let sb = self.shape(b).to_vec();
        if sb.len() != 2 {
            return Err(MoceError::Dimension {
                op: "matmul_a_bt",
                lhs: self.shape(a).to_vec(),
                rhs: sb,
            });
        }
        let (n, k) = (sb[0], sb[1]);
        let m = self.value(a).len() / k.max(1);
        if m * k != self.value(a).len() || numel_of(&out_shape) != m * n {
            return Err(MoceError::Dimension {
                op: "matmul_a_bt",
                lhs: self.shape(a).to_vec(),
                rhs: sb,
            });
        }
        let mut out = vec![0.0; m * n];
        kernel_a_bt(self.value(a), self.value(b), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out_shape, out, rg, Rule::MatmulABt { a: a.0, b: b.0, m, k, n }))
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.value(x).iter().map(|&v| gelu(v)).collect();
        self.macs += data.len() as u64;
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        self.push(shape, data, rg, Rule::Gelu { x: x.0 })
    }

    pub fn abs(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.value(x).iter().map(|v| v.abs()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        self.push(shape, data, rg, Rule::Abs { x: x.0 })
    }

    /// Row softmax over the last axis, stabilized by max subtraction.
    /// NaN inputs are rejected eagerly.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let cols = *sx.last().unwrap_or(&0);
        if cols == 0 {
            return Err(MoceError::Contract("softmax over empty axis".into()));
        }
        if self.value(x).iter().any(|v| v.is_nan()) {
            return Err(MoceError::Nan { op: "softmax input".into() });
        }
        let rows = numel_of(&sx) / cols;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.value(x)[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                data[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                data[r * cols + j] /= sum;
            }
        }
        self.macs += 2 * (rows * cols) as u64;
        let rg = self.any_grad(&[x]);
        Ok(self.push(sx, data, rg, Rule::Softmax { x: x.0, rows, cols }))
    }

    /// Per-position layer norm over the last axis with affine parameters.
    pub fn layernorm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let cols = *sx.last().unwrap_or(&0);
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(MoceError::Dimension {
                op: "layernorm",
                lhs: sx,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(MoceError::Contract("layernorm eps must be positive".into()));
        }
        let rows = numel_of(&sx) / cols;
        let mut data = vec![0.0; rows * cols];
        {
            let xs = self.value(x);
            let gs = self.value(gamma);
            let bs = self.value(beta);
            for r in 0..rows {
                let row = &xs[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..cols {
                    data[r * cols + j] = (row[j] - mean) * inv * gs[j] + bs[j];
                }
            }
        }
        self.macs += 2 * (rows * cols) as u64;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            sx,
            data,
            rg,
            Rule::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, rows, cols, eps },
        ))
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.value(x).len();
        let v = self.value(x).iter().sum::<f64>() / n as f64;
        let rg = self.any_grad(&[x]);
        self.push(vec![1], vec![v], rg, Rule::MeanAll { x: x.0 })
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x).iter().sum::<f64>();
        let rg = self.any_grad(&[x]);
        self.push(vec![1], vec![v], rg, Rule::SumAll { x: x.0 })
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        if numel_of(shape) != self.value(x).len() {
            return Err(MoceError::Dimension {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.value(x).to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(shape.to_vec(), data, rg, Rule::Reshape { x: x.0 }))
    }

    /// `out[j] = x[map[j]]`. Backward is deterministic scatter-add, so maps
    /// may repeat source indices.
    pub fn gather(&mut self, x: TensorId, map: Vec<usize>, out_shape: &[usize]) -> Result<TensorId> {
        if numel_of(out_shape) != map.len() {
            return Err(MoceError::Contract(format!(
                "gather map length {} does not cover output shape {:?}",
                map.len(),
                out_shape
            )));
        }
        let xs = self.value(x);
        if let Some(&bad) = map.iter().find(|&&i| i >= xs.len()) {
            return Err(MoceError::Contract(format!(
                "gather index {bad} out of bounds for {} elements",
                xs.len()
            )));
        }
        let data: Vec<f64> = map.iter().map(|&i| xs[i]).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(out_shape.to_vec(), data, rg, Rule::Gather { x: x.0, map }))
    }

    /// Transpose, viewing the input as `[numel/last, last]`; output is 2D
    /// `[last, numel/last]`.
    pub fn transpose2d(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        let cols = *s.last().ok_or_else(|| {
            MoceError::Contract("transpose2d needs at least one axis".into())
        })?;
        let rows = self.value(x).len() / cols.max(1);
        let xs = self.value(x);
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = xs[i * cols + j];
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(vec![cols, rows], data, rg, Rule::Transpose2d { x: x.0, rows, cols }))
    }

    /// `[h, w, ch] -> [nw, win, win, ch]` over non-overlapping tiles.
    pub fn window_partition(&mut self, x: TensorId, win: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || win == 0 || s[0] % win != 0 || s[1] % win != 0 {
            return Err(MoceError::Contract(format!(
                "window_partition: window {win} does not tile {s:?}"
            )));
        }
        let (h, w, ch) = (s[0], s[1], s[2]);
        let nw = (h / win) * (w / win);
        let mut data = vec![0.0; h * w * ch];
        partition_move(self.value(x), &mut data, h, w, ch, win, false);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            vec![nw, win, win, ch],
            data,
            rg,
            Rule::WindowPartition { x: x.0, h, w, ch, win },
        ))
    }

    /// Inverse of [`Tape::window_partition`].
    pub fn window_merge(&mut self, x: TensorId, h: usize, w: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] != s[2] {
            return Err(MoceError::Contract(format!(
                "window_merge expects [nw, win, win, ch], got {s:?}"
            )));
        }
        let (win, ch) = (s[1], s[3]);
        if win == 0 || h % win != 0 || w % win != 0 || s[0] != (h / win) * (w / win) {
            return Err(MoceError::Contract(format!(
                "window_merge: {s:?} does not reassemble into {h}x{w}"
            )));
        }
        let mut data = vec![0.0; h * w * ch];
        partition_move(self.value(x), &mut data, h, w, ch, win, true);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            vec![h, w, ch],
            data,
            rg,
            Rule::WindowMerge { x: x.0, h, w, ch, win },
        ))
    }

    /// `[h, w, c] -> [h/2, w/2, 4c]`; channel block index is `dy*2+dx`.
    pub fn pixel_unshuffle(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] % 2 != 0 || s[1] % 2 != 0 {
            return Err(MoceError::Contract(format!(
                "pixel_unshuffle needs even spatial dims, got {s:?}"
            )));
        }
        let (h, w, ch) = (s[0], s[1], s[2]);
        let mut data = vec![0.0; h * w * ch];
        shuffle_move(self.value(x), &mut data, h, w, ch, false);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            vec![h / 2, w / 2, 4 * ch],
            data,
            rg,
            Rule::PixelUnshuffle { x: x.0, h, w, ch },
        ))
    }

    /// `[h, w, 4c] -> [2h, 2w, c]`, inverse of [`Tape::pixel_unshuffle`].
    pub fn pixel_shuffle(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[2] % 4 != 0 {
            return Err(MoceError::Contract(format!(
                "pixel_shuffle needs channels divisible by 4, got {s:?}"
            )));
        }
        let (oh, ow, ch) = (2 * s[0], 2 * s[1], s[2] / 4);
        let mut data = vec![0.0; oh * ow * ch];
        shuffle_move(self.value(x), &mut data, oh, ow, ch, true);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            vec![oh, ow, ch],
            data,
            rg,
            Rule::PixelShuffle { x: x.0, h: oh, w: ow, ch },
        ))
    }

    /// Concatenate along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(MoceError::Dimension {
                op: "concat_last",
                lhs: sa,
                rhs: sb,
            });
        }
        let ca = *sa.last().unwrap();
        let cb = *sb.last().unwrap();
        let rows = numel_of(&sa) / ca.max(1);
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&self.value(a)[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&self.value(b)[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = ca + cb;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, data, rg, Rule::ConcatLast { a: a.0, b: b.0, rows, ca, cb }))
    }

    /// Pick one element as a `[1]` node.
    pub fn select(&mut self, x: TensorId, idx: usize) -> Result<TensorId> {
        if idx >= self.value(x).len() {
            return Err(MoceError::Contract(format!(
                "select index {idx} out of bounds for shape {:?}",
                self.shape(x)
            )));
        }
        let v = self.value(x)[idx];
        let rg = self.any_grad(&[x]);
        Ok(self.push(vec![1], vec![v], rg, Rule::Select { x: x.0, idx }))
    }

    /// Maximum element as a `[1]` node; ties break toward the lowest index.
    pub fn reduce_max(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.value(x);
        if xs.is_empty() {
            return Err(MoceError::Contract("reduce_max over empty tensor".into()));
        }
        let mut argmax = 0;
        for (i, v) in xs.iter().enumerate() {
            if *v > xs[argmax] {
                argmax = i;
            }
        }
        let v = xs[argmax];
        let rg = self.any_grad(&[x]);
        Ok(self.push(vec![1], vec![v], rg, Rule::ReduceMax { x: x.0, argmax }))
    }

    /// Stack `[1]` nodes into one vector node.
    pub fn stack_scalars(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        let mut data = Vec::with_capacity(xs.len());
        for &id in xs {
            if self.value(id).len() != 1 {
                return Err(MoceError::Contract(
                    "stack_scalars expects 1-element nodes".into(),
                ));
            }
            data.push(self.value(id)[0]);
        }
        let rg = self.any_grad(xs);
        Ok(self.push(
            vec![xs.len()],
            data,
            rg,
            Rule::StackScalars { xs: xs.iter().map(|i| i.0).collect() },
        ))
    }

    /// Multiply any tensor by a `[1]` scalar node.
    pub fn mul_scalar(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        if self.value(s).len() != 1 {
            return Err(MoceError::Contract("mul_scalar needs a [1] scalar node".into()));
        }
        let sv = self.value(s)[0];
        let data: Vec<f64> = self.value(x).iter().map(|v| v * sv).collect();
        self.macs += data.len() as u64;
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(shape, data, rg, Rule::MulScalar { x: x.0, s: s.0 }))
    }

    /// Elementwise standard normal CDF of `x * scale`.
    pub fn normal_cdf(&mut self, x: TensorId, scale: f64) -> TensorId {
        let data: Vec<f64> = self.value(x).iter().map(|&v| normal_cdf(v * scale)).collect();
        self.macs += data.len() as u64;
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        self.push(shape, data, rg, Rule::NormalCdf { x: x.0, scale })
    }

    /// Global average pool: `[h, w, c] -> [c]`.
    pub fn spatial_mean(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(MoceError::Contract(format!(
                "spatial_mean expects [h, w, c], got {s:?}"
            )));
        }
        let (hw, c) = (s[0] * s[1], s[2]);
        let mut out = vec![0.0; c];
        for (i, v) in self.value(x).iter().enumerate() {
            out[i % c] += v;
        }
        for v in out.iter_mut() {
            *v /= hw as f64;
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(vec![c], out, rg, Rule::SpatialMean { x: x.0, hw, c }))
    }

    /// L2-normalize each column, viewing the input as `[numel/last, last]`
    /// (per-channel normalization over the spatial axis).
    pub fn l2_normalize_cols(&mut self, x: TensorId, eps: f64) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        let cols = *s.last().ok_or_else(|| {
            MoceError::Contract("l2_normalize_cols needs at least one axis".into())
        })?;
        let rows = self.value(x).len() / cols.max(1);
        let xs = self.value(x);
        let mut inv = vec![eps; cols];
        for row in xs.chunks_exact(cols) {
            for (acc, v) in inv.iter_mut().zip(row) {
                *acc += v * v;
            }
        }
        for n in inv.iter_mut() {
            *n = 1.0 / n.sqrt();
        }
        let mut data = vec![0.0; rows * cols];
        for (orow, row) in data.chunks_exact_mut(cols).zip(xs.chunks_exact(cols)) {
            for ((o, v), s) in orow.iter_mut().zip(row).zip(&inv) {
                *o = v * s;
            }
        }
        self.macs += 2 * (rows * cols) as u64;
        let rg = self.any_grad(&[x]);
        Ok(self.push(s, data, rg, Rule::L2NormCols { x: x.0, rows, cols, eps }))
    }

    /// Per-channel circular cross-correlation of two window stacks laid out
    /// as `[nw, w, w, ch]`, computed via FFT:
    /// `A[t] = sum_s Q(s + t) * K(s)` over each `w x w` field.
    pub fn circular_corr2d(&mut self, q: TensorId, k: TensorId) -> Result<TensorId> {
        self.elementwise_pair("circular_corr2d", q, k)?;
        let s = self.shape(q).to_vec();
        if s.len() != 4 || s[1] != s[2] {
            return Err(MoceError::Contract(format!(
                "circular_corr2d expects [nw, w, w, ch], got {s:?}"
            )));
        }
        let (nw, w, ch) = (s[0], s[1], s[3]);
        let plan = Fft2d::new(w, w)?;
        let mut out = vec![0.0; nw * w * w * ch];
        corr_forward(self.value(q), self.value(k), &mut out, &plan, nw, w, ch);
        self.macs += (nw * ch) as u64 * (3 * fft_macs(w, w) + 4 * (w * w) as u64);
        let rg = self.any_grad(&[q, k]);
        Ok(self.push(s, out, rg, Rule::CircularCorr { q: q.0, k: k.0, nw, w, ch }))
    }

    /// Standardize each contiguous group of `group_len` elements to zero mean
    /// and unit variance (eps-regularized).
    pub fn standardize_groups(&mut self, x: TensorId, group_len: usize, eps: f64) -> Result<TensorId> {
        let n = self.value(x).len();
        if group_len == 0 || n % group_len != 0 {
            return Err(MoceError::Contract(format!(
                "standardize_groups: {n} elements not divisible into groups of {group_len}"
            )));
        }
        let groups = n / group_len;
        let xs = self.value(x);
        let mut data = vec![0.0; n];
        for g in 0..groups {
            let seg = &xs[g * group_len..(g + 1) * group_len];
            let mean = seg.iter().sum::<f64>() / group_len as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / group_len as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in seg.iter().enumerate() {
                data[g * group_len + j] = (v - mean) * inv;
            }
        }
        self.macs += 2 * n as u64;
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(shape, data, rg, Rule::StandardizeGroups { x: x.0, groups, group_len, eps }))
    }

    /// Per-channel Sobel gradient magnitude, averaged over interior pixels:
    /// `[h, w, c] -> [c]`. The magnitude's subgradient at an exactly flat
    /// neighborhood is taken as zero.
    pub fn sobel_descriptor(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] < 3 || s[1] < 3 {
            return Err(MoceError::Contract(format!(
                "sobel_descriptor expects [h>=3, w>=3, c], got {s:?}"
            )));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let xs = self.value(x);
        let mut out = vec![0.0; c];
        let interior = ((h - 2) * (w - 2)) as f64;
        for y in 1..h - 1 {
            for xx in 1..w - 1 {
                for cc in 0..c {
                    let (gx, gy) = sobel_pair(xs, h, w, c, y, xx, cc);
                    out[cc] += (gx * gx + gy * gy).sqrt();
                }
            }
        }
        for v in out.iter_mut() {
            *v /= interior;
        }
        self.macs += 8 * (h * w * c) as u64;
        let rg = self.any_grad(&[x]);
        Ok(self.push(vec![c], out, rg, Rule::SobelDesc { x: x.0, h, w, c }))
    }

    /// Squared coefficient of variation: `var(x) / mean(x)^2`. Smooth at
    /// uniform inputs, unlike CV itself.
    pub fn cv_squared(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.value(x);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        if mean <= 0.0 {
            return Err(MoceError::Contract(format!(
                "cv_squared requires positive mean, got {mean}"
            )));
        }
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rg = self.any_grad(&[x]);
        Ok(self.push(vec![1], vec![var / (mean * mean)], rg, Rule::CvSquared { x: x.0 }))
    }

    pub fn sqrt(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.value(x).iter().map(|v| v.sqrt()).collect();
        self.macs += data.len() as u64;
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        self.push(shape, data, rg, Rule::Sqrt { x: x.0 })
    }

    /// L1 distance between the spectra of `pred` and a constant target,
    /// `sum_c mean_bins |FFT(pred_c) - FFT(target_c)|` over `[h, w, c]`.
    pub fn fourier_l1(&mut self, pred: TensorId, target: &Tensor) -> Result<TensorId> {
        let s = self.shape(pred).to_vec();
        if s.len() != 3 || target.shape() != s.as_slice() {
            return Err(MoceError::Dimension {
                op: "fourier_l1",
                lhs: s,
                rhs: target.shape().to_vec(),
            });
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let plan = Fft2d::new(h, w)?;
        let hw = h * w;
        let mut diff_re = vec![0.0; hw * c];
        let mut diff_im = vec![0.0; hw * c];
        let mut re = vec![0.0; hw];
        let mut im = vec![0.0; hw];
        let mut loss = 0.0;
        for cc in 0..c {
            // pred channel spectrum
            for p in 0..hw {
                re[p] = self.value(pred)[p * c + cc];
                im[p] = 0.0;
            }
            plan.process(&mut re, &mut im, false);
            for p in 0..hw {
                diff_re[cc * hw + p] = re[p];
                diff_im[cc * hw + p] = im[p];
            }
            // subtract target channel spectrum
            for p in 0..hw {
                re[p] = target.data()[p * c + cc];
                im[p] = 0.0;
            }
            plan.process(&mut re, &mut im, false);
            for p in 0..hw {
                diff_re[cc * hw + p] -= re[p];
                diff_im[cc * hw + p] -= im[p];
                loss += (diff_re[cc * hw + p] * diff_re[cc * hw + p]
                    + diff_im[cc * hw + p] * diff_im[cc * hw + p])
                    .sqrt();
            }
        }
        loss /= hw as f64;
        self.macs += c as u64 * fft_macs(h, w) + 2 * (hw * c) as u64;
        let rg = self.any_grad(&[pred]);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Rule::FourierL1 { pred: pred.0, h, w, c, diff_re, diff_im },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(MoceError::Contract(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(&[(loss, vec![1.0])])
    }

    /// Reverse sweep with explicit cotangent seeds. This is how batch-level
    /// objectives inject their gradient into per-sample tapes.
    pub fn backward_seeded(&mut self, seeds: &[(TensorId, Vec<f64>)]) -> Result<()> {
        if self.backward_done {
            return Err(MoceError::Contract(
                "backward already ran on this tape; re-record the graph".into(),
            ));
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        for (id, seed) in seeds {
            let node = &self.nodes[id.0];
            if seed.len() != node.data.len() {
                return Err(MoceError::Contract(format!(
                    "seed length {} does not match node shape {:?}",
                    seed.len(),
                    node.shape
                )));
            }
            if !node.requires_grad {
                continue;
            }
            match &mut grads[id.0] {
                Some(g) => {
                    for (gv, sv) in g.iter_mut().zip(seed) {
                        *gv += sv;
                    }
                }
                slot => *slot = Some(seed.clone()),
            }
        }

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            // Only leaves keep their gradient; intermediate cotangents are
            // dropped as soon as they have been propagated, which keeps the
            // backward working set near the live frontier.
            if matches!(self.nodes[idx].rule, Rule::Leaf) {
                self.nodes[idx].grad = Some(g);
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Accumulate `len`-vector `f(slot)` into parent `p` if it tracks grads.
        macro_rules! acc {
            ($p:expr, $len:expr, $write:expr) => {
                if nodes[$p].requires_grad {
                    let slot = grads[$p].get_or_insert_with(|| vec![0.0; $len]);
                    #[allow(clippy::redundant_closure_call)]
                    ($write)(slot.as_mut_slice());
                }
            };
        }

        match &nodes[idx].rule {
            Rule::Leaf => {}
            Rule::Matmul { a, b, batch, m, k, n } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                acc!(*a, batch * m * k, |da: &mut [f64]| {
                    // d_a[i, kk] += sum_j g[i, j] * b[kk, j]
                    let bd = &nodes[*b].data;
                    for t in 0..batch {
                        let (go, ao, bo) = (t * m * n, t * m * k, t * k * n);
                        for i in 0..m {
                            let grow = &g[go + i * n..go + (i + 1) * n];
                            for kk in 0..k {
                                let brow = &bd[bo + kk * n..bo + (kk + 1) * n];
                                let mut dot = 0.0;
                                for j in 0..n {
                                    dot += grow[j] * brow[j];
                                }
                                da[ao + i * k + kk] += dot;
                            }
                        }
                    }
                });
                acc!(*b, batch * k * n, |db: &mut [f64]| {
                    // d_b[kk, j] += sum_i a[i, kk] * g[i, j]
                    let ad = &nodes[*a].data;
                    for t in 0..batch {
                        let (go, ao, bo) = (t * m * n, t * m * k, t * k * n);
                        for i in 0..m {
                            let grow = &g[go + i * n..go + (i + 1) * n];
                            for kk in 0..k {
                                let av = ad[ao + i * k + kk];
                                if av != 0.0 {
                                    let dbrow = &mut db[bo + kk * n..bo + (kk + 1) * n];
                                    for j in 0..n {
                                        dbrow[j] += av * grow[j];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Rule::LinearFused { x, w, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                acc!(*x, m * k, |dx: &mut [f64]| {
                    // dx = g @ w^T
                    kernel_a_bt(g, &nodes[*w].data, dx, m, n, k);
                });
                acc!(*w, k * n, |dw: &mut [f64]| {
                    // dw = x^T @ g
                    kernel_at_b(&nodes[*x].data, g, dw, m, k, n);
                });
                acc!(*b, n, |db: &mut [f64]| {
                    for row in g.chunks(n) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                });
            }
            Rule::MatmulTnB { a, b, rows, ca, cb } => {
                let (rows, ca, cb) = (*rows, *ca, *cb);
                acc!(*a, rows * ca, |da: &mut [f64]| {
                    // da = b @ g^T
                    kernel_a_bt(&nodes[*b].data, g, da, rows, cb, ca);
                });
                acc!(*b, rows * cb, |db: &mut [f64]| {
                    // db = a @ g
                    matmul_kernel(&nodes[*a].data, g, db, rows, ca, cb);
                });
            }
            Rule::MatmulABt { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                acc!(*a, m * k, |da: &mut [f64]| {
                    // da = g @ b
                    matmul_kernel(g, &nodes[*b].data, da, m, n, k);
                });
                acc!(*b, n * k, |db: &mut [f64]| {
                    // db = g^T @ a
                    kernel_at_b(g, &nodes[*a].data, db, m, n, k);
                });
            }
            Rule::Conv3x3 { x, w, b, h, wd, cin, cout } => {
                let (h, wd, cin, cout) = (*h, *wd, *cin, *cout);
                acc!(*x, h * wd * cin, |dx: &mut [f64]| {
                    conv3x3_backward_x(g, &nodes[*w].data, dx, h, wd, cin, cout);
                });
                acc!(*w, 9 * cin * cout, |dw: &mut [f64]| {
                    conv3x3_backward_w(g, &nodes[*x].data, dw, h, wd, cin, cout);
                });
                acc!(*b, cout, |db: &mut [f64]| {
                    for p in 0..h * wd {
                        for co in 0..cout {
                            db[co] += g[p * cout + co];
                        }
                    }
                });
            }
            Rule::Add { a, b } => {
                acc!(*a, g.len(), |da: &mut [f64]| elem_add(da, g));
                acc!(*b, g.len(), |db: &mut [f64]| elem_add(db, g));
            }
            Rule::Sub { a, b } => {
                acc!(*a, g.len(), |da: &mut [f64]| elem_add(da, g));
                acc!(*b, g.len(), |db: &mut [f64]| {
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            Rule::Mul { a, b } => {
                acc!(*a, g.len(), |da: &mut [f64]| {
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(&nodes[*b].data) {
                        *d += gv * bv;
                    }
                });
                acc!(*b, g.len(), |db: &mut [f64]| {
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(&nodes[*a].data) {
                        *d += gv * av;
                    }
                });
            }
            Rule::Scale { x, c } => {
                acc!(*x, g.len(), |dx: &mut [f64]| {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                });
            }
            Rule::AddConst { x } | Rule::Reshape { x } => {
                acc!(*x, g.len(), |dx: &mut [f64]| elem_add(dx, g));
            }
            Rule::AddRow { x, bias, rows, cols } => {
                acc!(*x, g.len(), |dx: &mut [f64]| elem_add(dx, g));
                acc!(*bias, *cols, |db: &mut [f64]| {
                    for r in 0..*rows {
                        for j in 0..*cols {
                            db[j] += g[r * cols + j];
                        }
                    }
                });
            }
            Rule::Gelu { x } => {
                acc!(*x, g.len(), |dx: &mut [f64]| {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(&nodes[*x].data) {
                        *d += gv * gelu_grad(*xv);
                    }
                });
            }
            Rule::Abs { x } => {
                acc!(*x, g.len(), |dx: &mut [f64]| {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(&nodes[*x].data) {
                        *d += gv * xv.signum() * f64::from(u8::from(*xv != 0.0));
                    }
                });
            }
            Rule::Softmax { x, rows, cols } => {
                let y = &nodes[idx].data;
                acc!(*x, g.len(), |dx: &mut [f64]| {
                    for r in 0..*rows {
                        let seg = r * cols..(r + 1) * cols;
                        let dot: f64 = g[seg.clone()]
                            .iter()
                            .zip(&y[seg.clone()])
                            .map(|(gv, yv)| gv * yv)
                            .sum();
                        for j in seg {
                            dx[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Rule::LayerNorm { x, gamma, beta, rows, cols, eps } => {
                let (rows, cols, eps) = (*rows, *cols, *eps);
                let xd = &nodes[*x].data;
                let gd = &nodes[*gamma].data;
                // Recompute per-row statistics; cheaper than caching them.
                let mut stats = Vec::with_capacity(rows);
                for r in 0..rows {
                    let row = &xd[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    stats.push((mean, 1.0 / (var + eps).sqrt()));
                }
                acc!(*beta, cols, |db: &mut [f64]| {
                    for r in 0..rows {
                        for j in 0..cols {
                            db[j] += g[r * cols + j];
                        }
                    }
                });
                acc!(*gamma, cols, |dg: &mut [f64]| {
                    for r in 0..rows {
                        let (mean, inv) = stats[r];
                        for j in 0..cols {
                            dg[j] += g[r * cols + j] * (xd[r * cols + j] - mean) * inv;
                        }
                    }
                });
                acc!(*x, rows * cols, |dx: &mut [f64]| {
                    for r in 0..rows {
                        let (mean, inv) = stats[r];
                        let mut mu = 0.0;
                        let mut mxh = 0.0;
                        for j in 0..cols {
                            let xh = (xd[r * cols + j] - mean) * inv;
                            let u = gd[j] * g[r * cols + j];
                            mu += u;
                            mxh += u * xh;
                        }
                        mu /= cols as f64;
                        mxh /= cols as f64;
                        for j in 0..cols {
                            let xh = (xd[r * cols + j] - mean) * inv;
                            let u = gd[j] * g[r * cols + j];
                            dx[r * cols + j] += (u - mu - xh * mxh) * inv;
                        }
                    }
                });
            }
            Rule::MeanAll { x } => {
                let len = nodes[*x].data.len();
                let gv = g[0] / len as f64;
                acc!(*x, len, |dx: &mut [f64]| {
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Rule::SumAll { x } => {
                let len = nodes[*x].data.len();
                acc!(*x, len, |dx: &mut [f64]| {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Rule::Gather { x, map } => {
                let len = nodes[*x].data.len();
                acc!(*x, len, |dx: &mut [f64]| {
                    for (j, &src) in map.iter().enumerate() {
                        dx[src] += g[j];
                    }
                });
            }
            Rule::Transpose2d { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                acc!(*x, rows * cols, |dx: &mut [f64]| {
                    for j in 0..cols {
                        for i in 0..rows {
                            dx[i * cols + j] += g[j * rows + i];
                        }
                    }
                });
            }
            Rule::WindowPartition { x, h, w, ch, win } => {
                let (h, w, ch, win) = (*h, *w, *ch, *win);
                acc!(*x, h * w * ch, |dx: &mut [f64]| {
                    partition_acc(g, dx, h, w, ch, win, true);
                });
            }
            Rule::WindowMerge { x, h, w, ch, win } => {
                let (h, w, ch, win) = (*h, *w, *ch, *win);
                acc!(*x, h * w * ch, |dx: &mut [f64]| {
                    partition_acc(g, dx, h, w, ch, win, false);
                });
            }
            Rule::PixelUnshuffle { x, h, w, ch } => {
                let (h, w, ch) = (*h, *w, *ch);
                acc!(*x, h * w * ch, |dx: &mut [f64]| {
                    shuffle_acc(g, dx, h, w, ch, true);
                });
            }
            Rule::PixelShuffle { x, h, w, ch } => {
                let (h, w, ch) = (*h, *w, *ch);
                acc!(*x, h * w * ch, |dx: &mut [f64]| {
                    shuffle_acc(g, dx, h, w, ch, false);
                });
            }
            Rule::ConcatLast { a, b, rows, ca, cb } => {
                let (rows, ca, cb) = (*rows, *ca, *cb);
                acc!(*a, rows * ca, |da: &mut [f64]| {
                    for r in 0..rows {
                        for j in 0..ca {
                            da[r * ca + j] += g[r * (ca + cb) + j];
                        }
                    }
                });
                acc!(*b, rows * cb, |db: &mut [f64]| {
                    for r in 0..rows {
                        for j in 0..cb {
                            db[r * cb + j] += g[r * (ca + cb) + ca + j];
                        }
                    }
                });
            }
            Rule::Select { x, idx: i } => {
                let len = nodes[*x].data.len();
                acc!(*x, len, |dx: &mut [f64]| dx[*i] += g[0]);
            }
            Rule::ReduceMax { x, argmax } => {
                let len = nodes[*x].data.len();
                acc!(*x, len, |dx: &mut [f64]| dx[*argmax] += g[0]);
            }
            Rule::StackScalars { xs } => {
                for (j, &p) in xs.iter().enumerate() {
                    acc!(p, 1, |dp: &mut [f64]| dp[0] += g[j]);
                }
            }
            Rule::MulScalar { x, s } => {
                let sv = nodes[*s].data[0];
                acc!(*x, g.len(), |dx: &mut [f64]| {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += gv * sv;
                    }
                });
                acc!(*s, 1, |ds: &mut [f64]| {
                    let mut dot = 0.0;
                    for (gv, xv) in g.iter().zip(&nodes[*x].data) {
                        dot += gv * xv;
                    }
                    ds[0] += dot;
                });
            }
            Rule::NormalCdf { x, scale } => {
                acc!(*x, g.len(), |dx: &mut [f64]| {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(&nodes[*x].data) {
                        *d += gv * normal_pdf(xv * scale) * scale;
                    }
                });
            }
            Rule::SpatialMean { x, hw, c } => {
                let scale = 1.0 / *hw as f64;
                acc!(*x, hw * c, |dx: &mut [f64]| {
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += g[i % c] * scale;
                    }
                });
            }
            Rule::L2NormCols { x, rows, cols, eps } => {
                let (rows, cols) = (*rows, *cols);
                let xd = &nodes[*x].data;
                acc!(*x, rows * cols, |dx: &mut [f64]| {
                    // Row-major accumulation of the per-column norm and
                    // gradient dot, then one streaming update pass.
                    let mut sq = vec![*eps; cols];
                    let mut dot = vec![0.0; cols];
                    for (grow, xrow) in g.chunks_exact(cols).zip(xd.chunks_exact(cols)) {
                        for j in 0..cols {
                            sq[j] += xrow[j] * xrow[j];
                            dot[j] += grow[j] * xrow[j];
                        }
                    }
                    let mut inv_s = sq;
                    let mut dot_s3 = dot;
                    for j in 0..cols {
                        let s = inv_s[j].sqrt();
                        inv_s[j] = 1.0 / s;
                        dot_s3[j] /= s * s * s;
                    }
                    for ((drow, grow), xrow) in dx
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(xd.chunks_exact(cols))
                    {
                        for j in 0..cols {
                            drow[j] += grow[j] * inv_s[j] - xrow[j] * dot_s3[j];
                        }
                    }
                });
            }
            Rule::CircularCorr { q, k, nw, w, ch } => {
                let (nw, w, ch) = (*nw, *w, *ch);
                let plan = Fft2d::new(w, w).expect("plan validated at record time");
                acc!(*q, nw * w * w * ch, |dq: &mut [f64]| {
                    corr_backward_q(g, &nodes[*k].data, dq, &plan, nw, w, ch);
                });
                acc!(*k, nw * w * w * ch, |dk: &mut [f64]| {
                    corr_backward_k(g, &nodes[*q].data, dk, &plan, nw, w, ch);
                });
            }
            Rule::StandardizeGroups { x, groups, group_len, eps } => {
                let (groups, gl, eps) = (*groups, *group_len, *eps);
                let xd = &nodes[*x].data;
                acc!(*x, groups * gl, |dx: &mut [f64]| {
                    for gi in 0..groups {
                        let seg = &xd[gi * gl..(gi + 1) * gl];
                        let mean = seg.iter().sum::<f64>() / gl as f64;
                        let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gl as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gseg = &g[gi * gl..(gi + 1) * gl];
                        let mut mg = 0.0;
                        let mut mgy = 0.0;
                        for j in 0..gl {
                            let y = (seg[j] - mean) * inv;
                            mg += gseg[j];
                            mgy += gseg[j] * y;
                        }
                        mg /= gl as f64;
                        mgy /= gl as f64;
                        for j in 0..gl {
                            let y = (seg[j] - mean) * inv;
                            dx[gi * gl + j] += (gseg[j] - mg - y * mgy) * inv;
                        }
                    }
                });
            }
            Rule::SobelDesc { x, h, w, c } => {
                let (h, w, c) = (*h, *w, *c);
                let xd = &nodes[*x].data;
                let interior = ((h - 2) * (w - 2)) as f64;
                acc!(*x, h * w * c, |dx: &mut [f64]| {
                    for y in 1..h - 1 {
                        for xx in 1..w - 1 {
                            for cc in 0..c {
                                let (gx, gy) = sobel_pair(xd, h, w, c, y, xx, cc);
                                let m = (gx * gx + gy * gy).sqrt();
                                if m == 0.0 {
                                    continue;
                                }
                                let coeff = g[cc] / (interior * m);
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let p = ((y + ky - 1) * w + (xx + kx - 1)) * c + cc;
                                        dx[p] += coeff * (gx * SOBEL_X[ky][kx] + gy * SOBEL_Y[ky][kx]);
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Rule::CvSquared { x } => {
                let xd = &nodes[*x].data;
                let n = xd.len() as f64;
                let mean = xd.iter().sum::<f64>() / n;
                let var = xd.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let m2 = mean * mean;
                acc!(*x, xd.len(), |dx: &mut [f64]| {
                    for (d, xv) in dx.iter_mut().zip(xd) {
                        *d += g[0] * (2.0 * (xv - mean) / (n * m2) - 2.0 * var / (n * m2 * mean));
                    }
                });
            }
            Rule::Sqrt { x } => {
                let y = &nodes[idx].data;
                acc!(*x, g.len(), |dx: &mut [f64]| {
                    for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * 0.5 / yv;
                    }
                });
            }
            Rule::FourierL1 { pred, h, w, c, diff_re, diff_im } => {
                let (h, w, c) = (*h, *w, *c);
                let hw = h * w;
                let plan = Fft2d::new(h, w).expect("plan validated at record time");
                let coeff = g[0] / hw as f64;
                acc!(*pred, hw * c, |dx: &mut [f64]| {
                    let mut re = vec![0.0; hw];
                    let mut im = vec![0.0; hw];
                    for cc in 0..c {
                        for p in 0..hw {
                            let dr = diff_re[cc * hw + p];
                            let di = diff_im[cc * hw + p];
                            let m = (dr * dr + di * di).sqrt();
                            if m > 0.0 {
                                re[p] = coeff * dr / m;
                                im[p] = coeff * di / m;
                            } else {
                                re[p] = 0.0;
                                im[p] = 0.0;
                            }
                        }
                        // d/dx of sum_k f(F x)_k = hw * Re(ifft2(df/dF)).
                        plan.inverse_scaled(&mut re, &mut im);
                        for p in 0..hw {
                            dx[p * c + cc] += re[p] * hw as f64;
                        }
                    }
                });
            }
        }
    }
}

// ── Kernels ─────────────────────────────────────────────────────────────

fn elem_add(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av != 0.0 {
                let brow = &b[kk * n..(kk + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// `out += a^T @ b` for `a: [rows, ca]`, `b: [rows, cb]`.
fn kernel_at_b(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, ca: usize, cb: usize) {
    for r in 0..rows {
        let arow = &a[r * ca..(r + 1) * ca];
        let brow = &b[r * cb..(r + 1) * cb];
        for (i, av) in arow.iter().enumerate() {
            if *av != 0.0 {
                let orow = &mut out[i * cb..(i + 1) * cb];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// `out += a @ b^T` for `a: [m, k]`, `b: [n, k]`. Pre-transposes `b` (it is
/// small everywhere this runs) so the accumulation streams row-major.
fn kernel_a_bt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for kk in 0..k {
            bt[kk * n + j] = b[j * k + kk];
        }
    }
    matmul_kernel(a, &bt, out, m, k, n);
}

fn conv3x3_forward(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64], h: usize, wd: usize, cin: usize, cout: usize) {
    for y in 0..h {
        for xx in 0..wd {
            let orow = &mut out[(y * wd + xx) * cout..(y * wd + xx + 1) * cout];
            orow.copy_from_slice(b);
            for ky in 0..3 {
                let iy = y + ky;
                if iy < 1 || iy > h {
                    continue;
                }
                let iy = iy - 1;
                for kx in 0..3 {
                    let ix = xx + kx;
                    if ix < 1 || ix > wd {
                        continue;
                    }
                    let ix = ix - 1;
                    for ci in 0..cin {
                        let xv = x[(iy * wd + ix) * cin + ci];
                        if xv != 0.0 {
                            let wrow = &w[((ky * 3 + kx) * cin + ci) * cout..((ky * 3 + kx) * cin + ci + 1) * cout];
                            for (o, wv) in orow.iter_mut().zip(wrow) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv3x3_backward_x(g: &[f64], w: &[f64], dx: &mut [f64], h: usize, wd: usize, cin: usize, cout: usize) {
    for y in 0..h {
        for xx in 0..wd {
            let grow = &g[(y * wd + xx) * cout..(y * wd + xx + 1) * cout];
            for ky in 0..3 {
                let iy = y + ky;
                if iy < 1 || iy > h {
                    continue;
                }
                let iy = iy - 1;
                for kx in 0..3 {
                    let ix = xx + kx;
                    if ix < 1 || ix > wd {
                        continue;
                    }
                    let ix = ix - 1;
                    for ci in 0..cin {
                        let wrow = &w[((ky * 3 + kx) * cin + ci) * cout..((ky * 3 + kx) * cin + ci + 1) * cout];
                        let mut dot = 0.0;
                        for (gv, wv) in grow.iter().zip(wrow) {
                            dot += gv * wv;
                        }
                        dx[(iy * wd + ix) * cin + ci] += dot;
                    }
                }
            }
        }
    }
}

fn conv3x3_backward_w(g: &[f64], x: &[f64], dw: &mut [f64], h: usize, wd: usize, cin: usize, cout: usize) {
    for y in 0..h {
        for xx in 0..wd {
            let grow = &g[(y * wd + xx) * cout..(y * wd + xx + 1) * cout];
            for ky in 0..3 {
                let iy = y + ky;
                if iy < 1 || iy > h {
                    continue;
                }
                let iy = iy - 1;
                for kx in 0..3 {
                    let ix = xx + kx;
                    if ix < 1 || ix > wd {
                        continue;
                    }
                    let ix = ix - 1;
                    for ci in 0..cin {
                        let xv = x[(iy * wd + ix) * cin + ci];
                        if xv != 0.0 {
                            let wrow = &mut dw[((ky * 3 + kx) * cin + ci) * cout..((ky * 3 + kx) * cin + ci + 1) * cout];
                            for (d, gv) in wrow.iter_mut().zip(grow) {
                                *d += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Separable evaluation: row/column differences cancel exactly on flat
/// neighborhoods, so constant images produce a bit-exact zero descriptor.
fn sobel_pair(x: &[f64], _h: usize, w: usize, c: usize, y: usize, xx: usize, cc: usize) -> (f64, f64) {
    let at = |dy: usize, dx: usize| x[((y + dy - 1) * w + (xx + dx - 1)) * c + cc];
    let (a0, a1, a2) = (at(0, 0), at(0, 1), at(0, 2));
    let (b0, b2) = (at(1, 0), at(1, 2));
    let (c0, c1, c2) = (at(2, 0), at(2, 1), at(2, 2));
    let gx = (a2 - a0) + 2.0 * (b2 - b0) + (c2 - c0);
    let gy = (c0 + 2.0 * c1 + c2) - (a0 + 2.0 * a1 + a2);
    (gx, gy)
}

/// Move between `[h, w, ch]` and `[nw, win, win, ch]` layouts.
/// `from_windows` selects the direction; channel runs copy contiguously.
fn partition_move(src: &[f64], dst: &mut [f64], h: usize, w: usize, ch: usize, win: usize, from_windows: bool) {
    let gx = w / win;
    let mut widx = 0;
    for by in 0..h / win {
        for bx in 0..gx {
            for iy in 0..win {
                for ix in 0..win {
                    let s = ((by * win + iy) * w + bx * win + ix) * ch;
                    if from_windows {
                        dst[s..s + ch].copy_from_slice(&src[widx..widx + ch]);
                    } else {
                        dst[widx..widx + ch].copy_from_slice(&src[s..s + ch]);
                    }
                    widx += ch;
                }
            }
        }
    }
}

/// Accumulating inverse used by the backward rules.
fn partition_acc(g: &[f64], dx: &mut [f64], h: usize, w: usize, ch: usize, win: usize, g_is_windows: bool) {
    let gx = w / win;
    let mut widx = 0;
    for by in 0..h / win {
        for bx in 0..gx {
            for iy in 0..win {
                for ix in 0..win {
                    let s = ((by * win + iy) * w + bx * win + ix) * ch;
                    if g_is_windows {
                        for c in 0..ch {
                            dx[s + c] += g[widx + c];
                        }
                    } else {
                        for c in 0..ch {
                            dx[widx + c] += g[s + c];
                        }
                    }
                    widx += ch;
                }
            }
        }
    }
}

/// Move between spatial `[h, w, ch]` and packed `[h/2, w/2, 4ch]` layouts.
fn shuffle_move(src: &[f64], dst: &mut [f64], h: usize, w: usize, ch: usize, from_packed: bool) {
    for y in 0..h {
        for x in 0..w {
            let k = (y % 2) * 2 + x % 2;
            let packed = ((y / 2) * (w / 2) + x / 2) * 4 * ch + k * ch;
            let spatial = (y * w + x) * ch;
            if from_packed {
                dst[spatial..spatial + ch].copy_from_slice(&src[packed..packed + ch]);
            } else {
                dst[packed..packed + ch].copy_from_slice(&src[spatial..spatial + ch]);
            }
        }
    }
}

fn shuffle_acc(g: &[f64], dx: &mut [f64], h: usize, w: usize, ch: usize, g_is_packed: bool) {
    for y in 0..h {
        for x in 0..w {
            let k = (y % 2) * 2 + x % 2;
            let packed = ((y / 2) * (w / 2) + x / 2) * 4 * ch + k * ch;
            let spatial = (y * w + x) * ch;
            if g_is_packed {
                for c in 0..ch {
                    dx[spatial + c] += g[packed + c];
                }
            } else {
                for c in 0..ch {
                    dx[packed + c] += g[spatial + c];
                }
            }
        }
    }
}

fn fft_macs(h: usize, w: usize) -> u64 {
    let n = (h * w) as u64;
    2 * n * (n.max(2).ilog2() as u64)
}

/// Gather one `w x w` channel plane (stride `ch`) out of `[nw, w, w, ch]`.
fn load_plane(src: &[f64], dst_re: &mut [f64], dst_im: &mut [f64], win: usize, cc: usize, w: usize, ch: usize) {
    let base = win * w * w * ch + cc;
    for p in 0..w * w {
        dst_re[p] = src[base + p * ch];
        dst_im[p] = 0.0;
    }
}

fn store_plane_add(dst: &mut [f64], src: &[f64], win: usize, cc: usize, w: usize, ch: usize) {
    let base = win * w * w * ch + cc;
    for p in 0..w * w {
        dst[base + p * ch] += src[p];
    }
}

fn corr_forward(q: &[f64], k: &[f64], out: &mut [f64], plan: &Fft2d, nw: usize, w: usize, ch: usize) {
    let hw = w * w;
    let mut qre = vec![0.0; hw];
    let mut qim = vec![0.0; hw];
    let mut kre = vec![0.0; hw];
    let mut kim = vec![0.0; hw];
    for win in 0..nw {
        for cc in 0..ch {
            load_plane(q, &mut qre, &mut qim, win, cc, w, ch);
            plan.process(&mut qre, &mut qim, false);
            load_plane(k, &mut kre, &mut kim, win, cc, w, ch);
            plan.process(&mut kre, &mut kim, false);
            // Q ⊙ conj(K) then inverse.
            for p in 0..hw {
                let ar = qre[p] * kre[p] + qim[p] * kim[p];
                let ai = qim[p] * kre[p] - qre[p] * kim[p];
                qre[p] = ar;
                qim[p] = ai;
            }
            plan.inverse_scaled(&mut qre, &mut qim);
            store_plane_add(out, &qre, win, cc, w, ch);
        }
    }
}

/// dL/dQ = circular convolution of the cotangent with K: `ifft(fft(g) * fft(K))`.
fn corr_backward_q(g: &[f64], k: &[f64], dq: &mut [f64], plan: &Fft2d, nw: usize, w: usize, ch: usize) {
    let hw = w * w;
    let mut gre = vec![0.0; hw];
    let mut gim = vec![0.0; hw];
    let mut kre = vec![0.0; hw];
    let mut kim = vec![0.0; hw];
    for win in 0..nw {
        for cc in 0..ch {
            load_plane(g, &mut gre, &mut gim, win, cc, w, ch);
            plan.process(&mut gre, &mut gim, false);
            load_plane(k, &mut kre, &mut kim, win, cc, w, ch);
            plan.process(&mut kre, &mut kim, false);
            for p in 0..hw {
                let ar = gre[p] * kre[p] - gim[p] * kim[p];
                let ai = gre[p] * kim[p] + gim[p] * kre[p];
                gre[p] = ar;
                gim[p] = ai;
            }
            plan.inverse_scaled(&mut gre, &mut gim);
            store_plane_add(dq, &gre, win, cc, w, ch);
        }
    }
}

/// dL/dK = circular cross-correlation of Q with the cotangent:
/// `ifft(fft(Q) * conj(fft(g)))`.
fn corr_backward_k(g: &[f64], q: &[f64], dk: &mut [f64], plan: &Fft2d, nw: usize, w: usize, ch: usize) {
    let hw = w * w;
    let mut gre = vec![0.0; hw];
    let mut gim = vec![0.0; hw];
    let mut qre = vec![0.0; hw];
    let mut qim = vec![0.0; hw];
    for win in 0..nw {
        for cc in 0..ch {
            load_plane(g, &mut gre, &mut gim, win, cc, w, ch);
            plan.process(&mut gre, &mut gim, false);
            load_plane(q, &mut qre, &mut qim, win, cc, w, ch);
            plan.process(&mut qre, &mut qim, false);
            for p in 0..hw {
                let ar = qre[p] * gre[p] + qim[p] * gim[p];
                let ai = qim[p] * gre[p] - qre[p] * gim[p];
                gre[p] = ar;
                gim[p] = ai;
            }
            plan.inverse_scaled(&mut gre, &mut gim);
            store_plane_add(dk, &gre, win, cc, w, ch);
        }
    }
}

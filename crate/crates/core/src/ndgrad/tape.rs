use super::params::ParamStore;
use super::tensor::{gemm_acc, transpose, Tensor};
use super::GradError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a grouped multi-head attention call.
///
/// Queries are `[groups·tq, heads·dk]`, keys `[groups·tk, heads·dk]`,
/// values `[groups·tk, heads·dv]`. Each (group, head) pair attends
/// independently; head outputs are concatenated along columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub groups: usize,
    pub heads: usize,
}

/// Geometry of a strided patch extraction over `[batch, height, width, channels]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl PatchGeometry {
    pub fn out_h(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }
    pub fn patches_per_item(&self) -> usize {
        self.out_h() * self.out_w()
    }
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

enum Op {
    Leaf,
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    Minimum(Var, Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    GroupMeanRows {
        x: Var,
        group: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        weights: Vec<f64>,
    },
    Im2Col {
        x: Var,
        geom: PatchGeometry,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::MatmulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Abs(..) => "abs",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::Pick { .. } => "pick",
            Op::Minimum(..) => "minimum",
            Op::Clamp { .. } => "clamp",
            Op::GroupMeanRows { .. } => "group_mean_rows",
            Op::Attention { .. } => "attention",
            Op::Im2Col { .. } => "im2col",
        }
    }
}

enum Value {
    Owned(Tensor),
    Param(usize),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass and replays them in reverse.
///
/// A tape may borrow a [`ParamStore`]; parameters are then bound lazily with
/// [`Tape::param`] and never copied. Exactly one backward pass is allowed.
pub struct Tape<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            params: Some(params),
            param_vars: vec![None; params.len()],
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        value_of(&self.nodes, self.params, v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.value(v).shape().to_vec(), g.clone()).expect("grad matches shape"))
    }

    /// Gradients for every parameter of the bound store, zero where unused.
    pub fn param_grads(&self) -> Vec<Tensor> {
        let store = self.params.expect("tape has no bound parameters");
        (0..store.len())
            .map(|i| {
                self.param_vars[i]
                    .and_then(|v| self.grad(v))
                    .unwrap_or_else(|| Tensor::zeros(store.tensor(i).shape().to_vec()))
            })
            .collect()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(Value::Owned(t), Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_raw(Value::Owned(t), Op::Leaf, true)
    }

    /// Binds parameter `i` of the attached store, reusing the existing node.
    pub fn param(&mut self, i: usize) -> Var {
        if let Some(v) = self.param_vars[i] {
            return v;
        }
        let v = self.push_raw(Value::Param(i), Op::Leaf, true);
        self.param_vars[i] = Some(v);
        v
    }

    fn push_raw(&mut self, value: Value, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, t: Tensor, op: Op, inputs: &[Var]) -> Result<Var, GradError> {
        if self.consumed {
            return Err(GradError::TapeConsumed);
        }
        if !t.all_finite() {
            return Err(GradError::NonFinite(op.name().to_string()));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(Value::Owned(t), op, rg))
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize), GradError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(GradError::Shape(format!("{what}: expected 2-D, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), GradError> {
        if self.shape(a) != self.shape(b) {
            return Err(GradError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, GradError> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, op, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var, GradError> {
        self.same_shape(a, b, op.name())?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(t, op, &[a, b])
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(GradError::Shape(format!(
                "matmul inner dims differ: {m}x{k} by {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b), &[a, b])
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (m, k) = self.dims2(a, "matmul_nt lhs")?;
        let (n, k2) = self.dims2(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(GradError::Shape(format!(
                "matmul_nt inner dims differ: {m}x{k} by ({n}x{k2})^T"
            )));
        }
        let bt = transpose(self.value(b).data(), n, k);
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), &bt, &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatmulNt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a vector over the last dimension of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, GradError> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(GradError::Shape(format!(
                "bias {:?} does not match last extent {n}",
                self.shape(bias)
            )));
        }
        let (xv, bv) = (self.value(x), self.value(bias));
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (d, b) in row.iter_mut().zip(bv.data()) {
                *d += b;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, GradError> {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var, GradError> {
        self.map(x, Op::Shift(x), |v| v + c)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, GradError> {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, GradError> {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, GradError> {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, GradError> {
        self.map(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, GradError> {
        self.map(x, Op::Log(x), f64::ln)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, GradError> {
        self.map(x, Op::Abs(x), f64::abs)
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var, GradError> {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, GradError> {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::LogSoftmax(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, GradError> {
        if eps <= 0.0 {
            return Err(GradError::Config("layer_norm eps must be positive".into()));
        }
        let n = self.value(x).last_dim();
        for (p, what) in [(gain, "gain"), (bias, "bias")] {
            if self.shape(p) != [n] {
                return Err(GradError::Shape(format!(
                    "layer_norm {what} {:?} does not match last extent {n}",
                    self.shape(p)
                )));
            }
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, GradError> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, GradError> {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, GradError> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(x), &[x])
    }

    /// Stacks 2-D inputs along rows.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var, GradError> {
        if xs.is_empty() {
            return Err(GradError::Shape("concat_rows of nothing".into()));
        }
        let cols = self.dims2(xs[0], "concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let (r, c) = self.dims2(x, "concat_rows")?;
            if c != cols {
                return Err(GradError::Shape(format!(
                    "concat_rows column mismatch: {c} vs {cols}"
                )));
            }
            rows += r;
            data.extend_from_slice(self.value(x).data());
        }
        self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(xs.to_vec()), xs)
    }

    /// Joins 2-D inputs side by side.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, GradError> {
        if xs.is_empty() {
            return Err(GradError::Shape("concat_cols of nothing".into()));
        }
        let rows = self.dims2(xs[0], "concat_cols")?.0;
        let mut total = 0;
        for &x in xs {
            let (r, c) = self.dims2(x, "concat_cols")?;
            if r != rows {
                return Err(GradError::Shape(format!(
                    "concat_cols row mismatch: {r} vs {rows}"
                )));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(r));
            }
        }
        self.push(Tensor::new(vec![rows, total], data)?, Op::ConcatCols(xs.to_vec()), xs)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, GradError> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(GradError::Shape(format!(
                "slice_rows {start}..{} out of {r} rows",
                start + len
            )));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        self.push(Tensor::new(vec![len, c], data)?, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, GradError> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(GradError::Shape(format!(
                "slice_cols {start}..{} out of {c} columns",
                start + len
            )));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        self.push(Tensor::new(vec![r, len], data)?, Op::SliceCols { x, start }, &[x])
    }

    /// Selects rows by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, GradError> {
        let (r, c) = self.dims2(x, "gather_rows")?;
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(GradError::Shape(format!("gather_rows index out of {r} rows")));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let t = Tensor::new(vec![idx.len(), c], data)?;
        self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// Selects flat elements into a vector.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var, GradError> {
        let xv = self.value(x);
        if idx.is_empty() || idx.iter().any(|&i| i >= xv.len()) {
            return Err(GradError::Shape(format!(
                "pick index out of {} elements",
                xv.len()
            )));
        }
        let data = idx.iter().map(|&i| xv.data()[i]).collect();
        self.push(
            Tensor::vector(data),
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.zip(a, b, Op::Minimum(a, b), f64::min)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, GradError> {
        self.map(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// Averages consecutive blocks of `group` rows: `[n·group, c] → [n, c]`.
    pub fn group_mean_rows(&mut self, x: Var, group: usize) -> Result<Var, GradError> {
        let (r, c) = self.dims2(x, "group_mean_rows")?;
        if group == 0 || r % group != 0 {
            return Err(GradError::Shape(format!(
                "group_mean_rows: {r} rows not divisible by {group}"
            )));
        }
        let xv = self.value(x);
        let n = r / group;
        let mut data = vec![0.0; n * c];
        for g in 0..n {
            let out = &mut data[g * c..(g + 1) * c];
            for i in 0..group {
                for (o, v) in out.iter_mut().zip(xv.row(g * group + i)) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o /= group as f64;
            }
        }
        self.push(Tensor::new(vec![n, c], data)?, Op::GroupMeanRows { x, group }, &[x])
    }

    /// Scaled dot-product attention for every (group, head) pair.
    ///
    /// Returns the concatenated head outputs and the attention weights laid out
    /// as `[groups, heads, tq, tk]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
    ) -> Result<(Var, Tensor), GradError> {
        let AttnLayout { groups, heads } = layout;
        let (qr, qc) = self.dims2(q, "attention q")?;
        let (kr, kc) = self.dims2(k, "attention k")?;
        let (vr, vc) = self.dims2(v, "attention v")?;
        if groups == 0 || heads == 0 {
            return Err(GradError::Config("attention needs groups, heads > 0".into()));
        }
        if qc != kc || qc % heads != 0 || vc % heads != 0 || kr != vr {
            return Err(GradError::Shape(format!(
                "attention shapes q {qr}x{qc}, k {kr}x{kc}, v {vr}x{vc} with {heads} heads"
            )));
        }
        if qr % groups != 0 || kr % groups != 0 {
            return Err(GradError::Shape(format!(
                "attention rows {qr}/{kr} not divisible by {groups} groups"
            )));
        }
        let dk = qc / heads;
        let dv = vc / heads;
        if dk == 0 {
            return Err(GradError::Config("attention key width d_k is zero".into()));
        }
        let (tq, tk) = (qr / groups, kr / groups);
        let scale = 1.0 / (dk as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut weights = vec![0.0; groups * heads * tq * tk];
        let mut out = vec![0.0; qr * vc];
        for g in 0..groups {
            for h in 0..heads {
                let w = &mut weights[((g * heads + h) * tq) * tk..((g * heads + h + 1) * tq) * tk];
                for a in 0..tq {
                    let qrow = &qd[(g * tq + a) * qc + h * dk..(g * tq + a) * qc + (h + 1) * dk];
                    let wrow = &mut w[a * tk..(a + 1) * tk];
                    for (b, wv) in wrow.iter_mut().enumerate() {
                        let krow =
                            &kd[(g * tk + b) * kc + h * dk..(g * tk + b) * kc + (h + 1) * dk];
                        *wv = dot(qrow, krow) * scale;
                    }
                    softmax_in_place(wrow);
                    let orow = &mut out[(g * tq + a) * vc + h * dv..(g * tq + a) * vc + (h + 1) * dv];
                    for (b, &wv) in wrow.iter().enumerate() {
                        let vrow =
                            &vd[(g * tk + b) * vc + h * dv..(g * tk + b) * vc + (h + 1) * dv];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += wv * x;
                        }
                    }
                }
            }
        }
        let wt = Tensor::new(vec![groups, heads, tq, tk], weights.clone())?;
        let var = self.push(
            Tensor::new(vec![qr, vc], out)?,
            Op::Attention {
                q,
                k,
                v,
                layout,
                weights,
            },
            &[q, k, v],
        )?;
        Ok((var, wt))
    }

    /// Extracts flattened `kernel×kernel×channels` patches in row-major patch order.
    pub fn im2col(&mut self, x: Var, geom: PatchGeometry) -> Result<Var, GradError> {
        let expected = geom.batch * geom.height * geom.width * geom.channels;
        if self.value(x).len() != expected
            || geom.kernel == 0
            || geom.stride == 0
            || geom.kernel > geom.height
            || geom.kernel > geom.width
        {
            return Err(GradError::Shape(format!(
                "im2col geometry {geom:?} does not fit input {:?}",
                self.shape(x)
            )));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(geom.batch * geom.patches_per_item() * geom.patch_len());
        for_each_patch_element(&geom, |src| data.push(xv[src]));
        let rows = geom.batch * geom.patches_per_item();
        let t = Tensor::new(vec![rows, geom.patch_len()], data)?;
        self.push(t, Op::Im2Col { x, geom }, &[x])
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<(), GradError> {
        if self.consumed {
            return Err(GradError::TapeConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(GradError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(GradError::NonFinite("backward".into()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| value_of(nodes, self.params, v);
        let out = val(Var(i));
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; val(v).len()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                acc(*a, &mut |ga| {
                    let bt = transpose(bv.data(), k, n);
                    gemm_acc(g, &bt, ga, m, n, k);
                });
                acc(*b, &mut |gb| {
                    let at = transpose(av.data(), m, k);
                    gemm_acc(&at, g, gb, k, m, n);
                });
            }
            Op::MatmulNt(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                // out = a·bᵀ: da = g·b, db = gᵀ·a
                acc(*a, &mut |ga| gemm_acc(g, bv.data(), ga, m, n, k));
                acc(*b, &mut |gb| {
                    let gt = transpose(g, m, n);
                    gemm_acc(&gt, av.data(), gb, n, m, k);
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |gx| add_into(gx, g));
                let n = val(*b).len();
                acc(*b, &mut |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, s)| *d += s * c)),
            Op::Shift(x) | Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Sigmoid(x) => {
                let y = out.data();
                acc(*x, &mut |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = out.data();
                acc(*x, &mut |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * (1.0 - y[j] * y[j]);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |gx| {
                    for j in 0..g.len() {
                        if xv[j] > 0.0 {
                            gx[j] += g[j];
                        }
                    }
                });
            }
            Op::Exp(x) => {
                let y = out.data();
                acc(*x, &mut |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * y[j];
                    }
                });
            }
            Op::Log(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] / xv[j];
                    }
                });
            }
            Op::Abs(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * sign(xv[j]);
                    }
                });
            }
            Op::Softmax(x) => {
                let n = out.last_dim();
                let y = out.data();
                acc(*x, &mut |gx| {
                    for r in 0..y.len() / n {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let d = dot(yr, gr);
                        for j in 0..n {
                            gx[r * n + j] += yr[j] * (gr[j] - d);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let n = out.last_dim();
                let y = out.data();
                acc(*x, &mut |gx| {
                    for r in 0..y.len() / n {
                        let gr = &g[r * n..(r + 1) * n];
                        let s: f64 = gr.iter().sum();
                        for j in 0..n {
                            gx[r * n + j] += gr[j] - y[r * n + j].exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = val(*gain).data();
                let n = gv.len();
                let rows = xhat.len() / n;
                acc(*gain, &mut |gg| {
                    for j in 0..g.len() {
                        gg[j % n] += g[j] * xhat[j];
                    }
                });
                acc(*bias, &mut |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dxhat = vec![0.0; n];
                    for r in 0..rows {
                        let o = r * n;
                        for j in 0..n {
                            dxhat[j] = g[o + j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxhat
                            .iter()
                            .zip(&xhat[o..o + n])
                            .map(|(d, h)| d * h)
                            .sum::<f64>()
                            / n as f64;
                        for j in 0..n {
                            gx[o + j] += rstd[r] * (dxhat[j] - mean_d - xhat[o + j] * mean_dx);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = val(x).len();
                    acc(x, &mut |gx| add_into(gx, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(xs) => {
                let total = out.last_dim();
                let mut col = 0;
                for &x in xs {
                    let c = val(x).last_dim();
                    acc(x, &mut |gx| {
                        for (r, row) in gx.chunks_mut(c).enumerate() {
                            add_into(row, &g[r * total + col..r * total + col + c]);
                        }
                    });
                    col += c;
                }
            }
            Op::SliceRows { x, start } => {
                let c = out.last_dim();
                acc(*x, &mut |gx| add_into(&mut gx[start * c..start * c + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let len = out.last_dim();
                let c = val(*x).last_dim();
                acc(*x, &mut |gx| {
                    for (r, gr) in g.chunks(len).enumerate() {
                        add_into(&mut gx[r * c + start..r * c + start + len], gr);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = out.last_dim();
                acc(*x, &mut |gx| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut gx[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::Pick { x, idx } => acc(*x, &mut |gx| {
                for (r, &src) in idx.iter().enumerate() {
                    gx[src] += g[r];
                }
            }),
            Op::Minimum(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for j in 0..g.len() {
                        if av[j] <= bv[j] {
                            ga[j] += g[j];
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..g.len() {
                        if av[j] > bv[j] {
                            gb[j] += g[j];
                        }
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x).data();
                acc(*x, &mut |gx| {
                    for j in 0..g.len() {
                        if xv[j] > *lo && xv[j] < *hi {
                            gx[j] += g[j];
                        }
                    }
                });
            }
            Op::GroupMeanRows { x, group } => {
                let c = out.last_dim();
                acc(*x, &mut |gx| {
                    for (r, row) in gx.chunks_mut(c).enumerate() {
                        let src = &g[(r / group) * c..(r / group + 1) * c];
                        for (d, s) in row.iter_mut().zip(src) {
                            *d += s / *group as f64;
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                weights,
            } => self.attention_backward(*q, *k, *v, *layout, weights, g, grads),
            Op::Im2Col { x, geom } => acc(*x, &mut |gx| {
                let mut r = 0;
                for_each_patch_element(geom, |src| {
                    gx[src] += g[r];
                    r += 1;
                });
            }),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        weights: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let val = |x: Var| value_of(&self.nodes, self.params, x);
        let (qv, kv, vv) = (val(q), val(k), val(v));
        let AttnLayout { groups, heads } = layout;
        let (qc, vc) = (qv.last_dim(), vv.last_dim());
        let (dk, dv) = (qc / heads, vc / heads);
        let (tq, tk) = (qv.rows() / groups, kv.rows() / groups);
        let scale = 1.0 / (dk as f64).sqrt();
        let mut gq = vec![0.0; qv.len()];
        let mut gk = vec![0.0; kv.len()];
        let mut gvv = vec![0.0; vv.len()];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut ds = vec![0.0; tk];
        for gi in 0..groups {
            for h in 0..heads {
                let w = &weights[((gi * heads + h) * tq) * tk..((gi * heads + h + 1) * tq) * tk];
                for a in 0..tq {
                    let go = &g[(gi * tq + a) * vc + h * dv..(gi * tq + a) * vc + (h + 1) * dv];
                    let wrow = &w[a * tk..(a + 1) * tk];
                    for b in 0..tk {
                        let vo = (gi * tk + b) * vc + h * dv;
                        ds[b] = dot(go, &vd[vo..vo + dv]);
                        for (d, &o) in gvv[vo..vo + dv].iter_mut().zip(go) {
                            *d += wrow[b] * o;
                        }
                    }
                    let inner = dot(wrow, &ds);
                    for b in 0..tk {
                        ds[b] = wrow[b] * (ds[b] - inner) * scale;
                    }
                    let qo = (gi * tq + a) * qc + h * dk;
                    for b in 0..tk {
                        let ko = (gi * tk + b) * qc + h * dk;
                        for c in 0..dk {
                            gq[qo + c] += ds[b] * kd[ko + c];
                            gk[ko + c] += ds[b] * qd[qo + c];
                        }
                    }
                }
            }
        }
        for (x, gx) in [(q, gq), (k, gk), (v, gvv)] {
            if self.nodes[x.0].requires_grad {
                match &mut grads[x.0] {
                    Some(slot) => add_into(slot, &gx),
                    slot @ None => *slot = Some(gx),
                }
            }
        }
    }
}

fn value_of<'a>(nodes: &'a [Node], params: Option<&'a ParamStore>, v: Var) -> &'a Tensor {
    match &nodes[v.0].value {
        Value::Owned(t) => t,
        Value::Param(i) => params.expect("parameter node without store").tensor(*i),
    }
}

fn for_each_patch_element(geom: &PatchGeometry, mut f: impl FnMut(usize)) {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let (w, c) = (geom.width, geom.channels);
    for b in 0..geom.batch {
        let base = b * geom.height * w * c;
        for py in 0..oh {
            for px in 0..ow {
                for dy in 0..geom.kernel {
                    let row = py * geom.stride + dy;
                    for dx in 0..geom.kernel {
                        let col = px * geom.stride + dx;
                        let o = base + (row * w + col) * c;
                        for ch in 0..c {
                            f(o + ch);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

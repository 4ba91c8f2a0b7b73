//! Tape-based reverse-mode differentiation over dense 2-D f64 tensors.
//!
//! Every tensor is a row-major `[rows x cols]` buffer; vectors are `[1 x n]`
//! and scalars `[1 x 1]`. Ops append nodes to the tape, so node ids are
//! already in topological order and `backward` is a single reverse sweep.
//! There is no implicit broadcasting beyond bias-add and scalar ops; callers
//! reshape explicitly, which keeps every gradient formula auditable.

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(pub(crate) usize);

/// Norm guard for cosine similarity: below this, similarity is 0.
pub const EPS_NORM: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(TensorRef, TensorRef),
    Add(TensorRef, TensorRef),
    AddN(Vec<TensorRef>),
    Sub(TensorRef, TensorRef),
    Mul(TensorRef, TensorRef),
    AddBias(TensorRef, TensorRef),
    Scale(TensorRef, f64),
    MulScalarNode(TensorRef, TensorRef),
    Relu(TensorRef),
    Sigmoid(TensorRef),
    Tanh(TensorRef),
    Gelu(TensorRef),
    LogSigmoid(TensorRef),
    Log(TensorRef),
    Softmax(TensorRef, usize),
    LayerNorm {
        x: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
        eps: f64,
    },
    SumAll(TensorRef),
    MeanRows(TensorRef),
    Transpose(TensorRef),
    Reshape(TensorRef),
    ConcatCols(Vec<TensorRef>),
    ConcatRows(Vec<TensorRef>),
    SliceCols(TensorRef, usize, usize),
    SelectElement(TensorRef, usize, usize),
    GatherRows(TensorRef, Vec<usize>),
    GatherTable(TensorRef, Vec<usize>),
    CosineSim(TensorRef, TensorRef),
    HarmonicLambda(TensorRef, f64),
    SubFromScalar(TensorRef, TensorRef),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddN(..) => "add_n",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::MulScalarNode(..) => "mul_scalar_node",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::LogSigmoid(..) => "log_sigmoid",
            Op::Log(..) => "log",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SumAll(..) => "sum_all",
            Op::MeanRows(..) => "mean_rows",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SelectElement(..) => "select_element",
            Op::GatherRows(..) => "gather_rows",
            Op::GatherTable(..) => "gather_table",
            Op::CosineSim(..) => "cosine_sim",
            Op::HarmonicLambda(..) => "harmonic_lambda",
            Op::SubFromScalar(..) => "sub_from_scalar",
        }
    }
}

struct Node {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
    name: Option<String>,
}

/// The recorded computation. One graph per forward/backward pass.
pub struct Graph {
    nodes: Vec<Node>,
}

/// Row-major `a[m x k] * b[k x n]`, accumulated in ikj order.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn softplus(z: f64) -> f64 {
    // ln(1 + e^z) without overflow
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid_raw(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

/// Plain cosine similarity with the near-zero-norm guard: either norm
/// below `EPS_NORM` yields 0; identical buffers yield exactly 1.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(u.len(), v.len(), "cosine: length mismatch {} vs {}", u.len(), v.len());
    if u == v {
        let norm: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        return if norm < EPS_NORM { 0.0 } else { 1.0 };
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu < EPS_NORM || nv < EPS_NORM {
        0.0
    } else {
        dot / (nu * nv)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, data: Vec<f64>, rows: usize, cols: usize, op: Op, requires_grad: bool) -> TensorRef {
        debug_assert_eq!(data.len(), rows * cols);
        let id = self.nodes.len();
        self.nodes.push(Node {
            data,
            rows,
            cols,
            grad: None,
            requires_grad,
            op,
            name: None,
        });
        TensorRef(id)
    }

    fn needs(&self, t: TensorRef) -> bool {
        self.nodes[t.0].requires_grad
    }

    fn any_needs(&self, ts: &[TensorRef]) -> bool {
        ts.iter().any(|t| self.needs(*t))
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> TensorRef {
        assert_eq!(data.len(), rows * cols, "constant: data length {} != {}x{}", data.len(), rows, cols);
        self.push(data, rows, cols, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorRef {
        self.constant(vec![v], 1, 1)
    }

    /// Differentiable leaf (model parameter or checked input).
    pub fn parameter(&mut self, name: &str, data: Vec<f64>, rows: usize, cols: usize) -> TensorRef {
        assert_eq!(data.len(), rows * cols, "parameter {name}: data length {} != {}x{}", data.len(), rows, cols);
        let t = self.push(data, rows, cols, Op::Leaf, true);
        self.nodes[t.0].name = Some(name.to_string());
        t
    }

    /// Constant copy of an existing node's values (cuts the gradient path).
    pub fn detach(&mut self, t: TensorRef) -> TensorRef {
        let (r, c) = self.dims(t);
        let data = self.nodes[t.0].data.clone();
        self.constant(data, r, c)
    }

    pub fn value(&self, t: TensorRef) -> &[f64] {
        &self.nodes[t.0].data
    }

    pub fn dims(&self, t: TensorRef) -> (usize, usize) {
        (self.nodes[t.0].rows, self.nodes[t.0].cols)
    }

    pub fn grad(&self, t: TensorRef) -> Option<&[f64]> {
        self.nodes[t.0].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First node (in creation order) holding a non-finite value, with a
    /// human-readable description. Drives the NaN-abort diagnostic.
    pub fn first_non_finite(&self) -> Option<(TensorRef, String)> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.data.iter().any(|v| !v.is_finite()) {
                let label = match &n.name {
                    Some(name) => format!("node {i} ({}, leaf '{name}')", n.op.name()),
                    None => format!("node {i} ({})", n.op.name()),
                };
                return Some((TensorRef(i), label));
            }
        }
        None
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul: inner extents differ ({m}x{k} * {k2}x{n})");
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.any_needs(&[a, b]);
        self.push(data, m, n, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (r, c) = self.dims(a);
        assert_eq!((r, c), self.dims(b), "add: shape mismatch");
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.any_needs(&[a, b]);
        self.push(data, r, c, Op::Add(a, b), rg)
    }

    /// Sum of same-shaped tensors; empty input is a contract violation.
    pub fn add_n(&mut self, parts: &[TensorRef]) -> TensorRef {
        assert!(!parts.is_empty(), "add_n: no inputs");
        let (r, c) = self.dims(parts[0]);
        let mut data = self.nodes[parts[0].0].data.clone();
        for p in &parts[1..] {
            assert_eq!((r, c), self.dims(*p), "add_n: shape mismatch");
            for (d, v) in data.iter_mut().zip(&self.nodes[p.0].data) {
                *d += v;
            }
        }
        let rg = self.any_needs(parts);
        self.push(data, r, c, Op::AddN(parts.to_vec()), rg)
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (r, c) = self.dims(a);
        assert_eq!((r, c), self.dims(b), "sub: shape mismatch");
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.any_needs(&[a, b]);
        self.push(data, r, c, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (r, c) = self.dims(a);
        assert_eq!((r, c), self.dims(b), "mul: shape mismatch");
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.any_needs(&[a, b]);
        self.push(data, r, c, Op::Mul(a, b), rg)
    }

    /// `[r x c] + [1 x c]` row-broadcast bias add.
    pub fn add_bias(&mut self, a: TensorRef, bias: TensorRef) -> TensorRef {
        let (r, c) = self.dims(a);
        let (br, bc) = self.dims(bias);
        assert_eq!((br, bc), (1, c), "add_bias: bias must be 1x{c}, got {br}x{bc}");
        let bdata = &self.nodes[bias.0].data;
        let mut data = self.nodes[a.0].data.clone();
        for row in data.chunks_mut(c) {
            for (d, b) in row.iter_mut().zip(bdata.iter()) {
                *d += b;
            }
        }
        let rg = self.any_needs(&[a, bias]);
        self.push(data, r, c, Op::AddBias(a, bias), rg)
    }

    pub fn scale(&mut self, a: TensorRef, factor: f64) -> TensorRef {
        let (r, c) = self.dims(a);
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * factor).collect();
        let rg = self.needs(a);
        self.push(data, r, c, Op::Scale(a, factor), rg)
    }

    /// Multiply a whole tensor by a `[1 x 1]` node.
    pub fn mul_scalar_node(&mut self, a: TensorRef, s: TensorRef) -> TensorRef {
        let (r, c) = self.dims(a);
        assert_eq!(self.dims(s), (1, 1), "mul_scalar_node: scalar must be 1x1");
        let sv = self.nodes[s.0].data[0];
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * sv).collect();
        let rg = self.any_needs(&[a, s]);
        self.push(data, r, c, Op::MulScalarNode(a, s), rg)
    }

    pub fn relu(&mut self, a: TensorRef) -> TensorRef {
        let (r, c) = self.dims(a);
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        let rg = self.needs(a);
        self.push(data, r, c, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: TensorRef) -> TensorRef {
        let (r, c) = self.dims(a);
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| sigmoid_raw(x)).collect();
        let rg = self.needs(a);
        self.push(data, r, c, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: TensorRef) -> TensorRef {
        let (r, c) = self.dims(a);
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.tanh()).collect();
        let rg = self.needs(a);
        self.push(data, r, c, Op::Tanh(a), rg)
    }

    /// tanh-form gelu; smooth, so finite-difference checks stay clean.
    pub fn gelu(&mut self, a: TensorRef) -> TensorRef {
        let (r, c) = self.dims(a);
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        let rg = self.needs(a);
        self.push(data, r, c, Op::Gelu(a), rg)
    }

    /// log(sigmoid(x)) evaluated in log-space; never produces -inf for
    /// finite input.
    pub fn log_sigmoid(&mut self, a: TensorRef) -> TensorRef {
        let (r, c) = self.dims(a);
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| -softplus(-x)).collect();
        let rg = self.needs(a);
        self.push(data, r, c, Op::LogSigmoid(a), rg)
    }

    pub fn log(&mut self, a: TensorRef) -> TensorRef {
        let (r, c) = self.dims(a);
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.ln()).collect();
        let rg = self.needs(a);
        self.push(data, r, c, Op::Log(a), rg)
    }

    /// Softmax along `axis` (0 = down columns, 1 = across rows), with
    /// max-subtraction for stability.
    pub fn softmax(&mut self, a: TensorRef, axis: usize) -> TensorRef {
        assert!(axis < 2, "softmax: axis must be 0 or 1");
        let (r, c) = self.dims(a);
        let x = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * c];
        let (outer, inner, stride) = if axis == 1 { (r, c, 1) } else { (c, r, c) };
        for o in 0..outer {
            let base = if axis == 1 { o * c } else { o };
            let mut maxv = f64::NEG_INFINITY;
            for i in 0..inner {
                maxv = maxv.max(x[base + i * stride]);
            }
            let mut sum = 0.0;
            for i in 0..inner {
                let e = (x[base + i * stride] - maxv).exp();
                data[base + i * stride] = e;
                sum += e;
            }
            for i in 0..inner {
                data[base + i * stride] /= sum;
            }
        }
        let rg = self.needs(a);
        self.push(data, r, c, Op::Softmax(a, axis), rg)
    }

    pub fn layer_norm(&mut self, x: TensorRef, gamma: TensorRef, beta: TensorRef, eps: f64) -> TensorRef {
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(gamma), (1, c), "layer_norm: gamma must be 1x{c}");
        assert_eq!(self.dims(beta), (1, c), "layer_norm: beta must be 1x{c}");
        let xd = &self.nodes[x.0].data;
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let mut data = vec![0.0; r * c];
        for row in 0..r {
            let s = &xd[row * c..(row + 1) * c];
            let mean = s.iter().sum::<f64>() / c as f64;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                data[row * c + j] = (s[j] - mean) * inv * g[j] + b[j];
            }
        }
        let rg = self.any_needs(&[x, gamma, beta]);
        self.push(data, r, c, Op::LayerNorm { x, gamma, beta, eps }, rg)
    }

    pub fn sum_all(&mut self, a: TensorRef) -> TensorRef {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.needs(a);
        self.push(vec![s], 1, 1, Op::SumAll(a), rg)
    }

    /// Column means: `[r x c] -> [1 x c]`.
    pub fn mean_rows(&mut self, a: TensorRef) -> TensorRef {
        let (r, c) = self.dims(a);
        let x = &self.nodes[a.0].data;
        let mut data = vec![0.0; c];
        for row in x.chunks(c) {
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        for d in data.iter_mut() {
            *d /= r as f64;
        }
        let rg = self.needs(a);
        self.push(data, 1, c, Op::MeanRows(a), rg)
    }

    pub fn transpose(&mut self, a: TensorRef) -> TensorRef {
        let (r, c) = self.dims(a);
        let data = transpose_raw(&self.nodes[a.0].data, r, c);
        let rg = self.needs(a);
        self.push(data, c, r, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: TensorRef, rows: usize, cols: usize) -> TensorRef {
        let (r, c) = self.dims(a);
        assert_eq!(r * c, rows * cols, "reshape: element count mismatch");
        let data = self.nodes[a.0].data.clone();
        let rg = self.needs(a);
        self.push(data, rows, cols, Op::Reshape(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[TensorRef]) -> TensorRef {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let r = self.dims(parts[0]).0;
        let total: usize = parts.iter().map(|p| self.dims(*p).1).sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for p in parts {
            let (pr, pc) = self.dims(*p);
            assert_eq!(pr, r, "concat_cols: row mismatch");
            let pd = &self.nodes[p.0].data;
            for row in 0..r {
                data[row * total + off..row * total + off + pc]
                    .copy_from_slice(&pd[row * pc..(row + 1) * pc]);
            }
            off += pc;
        }
        let rg = self.any_needs(parts);
        self.push(data, r, total, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[TensorRef]) -> TensorRef {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let c = self.dims(parts[0]).1;
        let total: usize = parts.iter().map(|p| self.dims(*p).0).sum();
        let mut data = Vec::with_capacity(total * c);
        for p in parts {
            let (_, pc) = self.dims(*p);
            assert_eq!(pc, c, "concat_rows: column mismatch");
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let rg = self.any_needs(parts);
        self.push(data, total, c, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Columns `[from, to)` of a matrix.
    pub fn slice_cols(&mut self, a: TensorRef, from: usize, to: usize) -> TensorRef {
        let (r, c) = self.dims(a);
        assert!(from < to && to <= c, "slice_cols: bad range {from}..{to} of {c}");
        let w = to - from;
        let x = &self.nodes[a.0].data;
        let mut data = Vec::with_capacity(r * w);
        for row in 0..r {
            data.extend_from_slice(&x[row * c + from..row * c + to]);
        }
        let rg = self.needs(a);
        self.push(data, r, w, Op::SliceCols(a, from, to), rg)
    }

    /// One element as a `[1 x 1]` node.
    pub fn select_element(&mut self, a: TensorRef, row: usize, col: usize) -> TensorRef {
        let (r, c) = self.dims(a);
        assert!(row < r && col < c, "select_element: ({row},{col}) out of {r}x{c}");
        let v = self.nodes[a.0].data[row * c + col];
        let rg = self.needs(a);
        self.push(vec![v], 1, 1, Op::SelectElement(a, row, col), rg)
    }

    /// Row gather (embedding lookup): `table[V x d]`, ids -> `[len x d]`.
    /// Gradient scatter-adds into the gathered rows.
    pub fn gather_rows(&mut self, table: TensorRef, ids: &[usize]) -> TensorRef {
        let (v, d) = self.dims(table);
        assert!(!ids.is_empty(), "gather_rows: empty id list");
        let td = &self.nodes[table.0].data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "gather_rows: id {id} out of vocabulary {v}");
            data.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let rg = self.needs(table);
        self.push(data, ids.len(), d, Op::GatherRows(table, ids.to_vec()), rg)
    }

    /// Scalar-table gather: `table[1 x K]` indexed by a fixed map into an
    /// `[rows x cols]` matrix (relative-position score tables).
    pub fn gather_table(&mut self, table: TensorRef, index_map: &[usize], rows: usize, cols: usize) -> TensorRef {
        let (tr, k) = self.dims(table);
        assert_eq!(tr, 1, "gather_table: table must be 1xK");
        assert_eq!(index_map.len(), rows * cols, "gather_table: index map size mismatch");
        let td = &self.nodes[table.0].data;
        let data: Vec<f64> = index_map
            .iter()
            .map(|&i| {
                assert!(i < k, "gather_table: index {i} out of table {k}");
                td[i]
            })
            .collect();
        let rg = self.needs(table);
        self.push(data, rows, cols, Op::GatherTable(table, index_map.to_vec()), rg)
    }

    /// Cosine similarity of two equal-length vectors as a `[1 x 1]` node.
    pub fn cosine_sim(&mut self, u: TensorRef, v: TensorRef) -> TensorRef {
        let (ur, uc) = self.dims(u);
        let (vr, vc) = self.dims(v);
        assert_eq!(
            ur * uc,
            vr * vc,
            "cosine_sim: length mismatch {} vs {}",
            ur * uc,
            vr * vc
        );
        let val = cosine(&self.nodes[u.0].data, &self.nodes[v.0].data);
        let rg = self.any_needs(&[u, v]);
        self.push(vec![val], 1, 1, Op::CosineSim(u, v), rg)
    }

    /// Harmonic mean `n / sum_j(1/x_j)` over a `[1 x n]` vector. Entries
    /// with |x| < eps are replaced by sign-preserving ±eps before the
    /// reciprocal; if the reciprocal sum itself lands within eps of zero
    /// the result is 0 (with zero gradient).
    pub fn harmonic_lambda(&mut self, a: TensorRef, eps: f64) -> TensorRef {
        let (r, n) = self.dims(a);
        assert_eq!(r, 1, "harmonic_lambda: expects a 1xN vector");
        let val = harmonic_lambda_raw(&self.nodes[a.0].data, eps);
        let rg = self.needs(a);
        let _ = n;
        self.push(vec![val], 1, 1, Op::HarmonicLambda(a, eps), rg)
    }

    /// `s - a_j` for scalar node `s` and vector `a`.
    pub fn sub_from_scalar(&mut self, s: TensorRef, a: TensorRef) -> TensorRef {
        assert_eq!(self.dims(s), (1, 1), "sub_from_scalar: s must be 1x1");
        let (r, c) = self.dims(a);
        let sv = self.nodes[s.0].data[0];
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| sv - x).collect();
        let rg = self.any_needs(&[s, a]);
        self.push(data, r, c, Op::SubFromScalar(s, a), rg)
    }

    // ── backward ─────────────────────────────────────────────────────

    fn accum(&mut self, t: TensorRef, g: &[f64]) {
        let node = &mut self.nodes[t.0];
        if !node.requires_grad {
            return;
        }
        match node.grad {
            Some(ref mut buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => node.grad = Some(g.to_vec()),
        }
    }

    /// Reverse sweep from a scalar loss. Each node is visited exactly once
    /// (tape order is topological by construction) and gradient
    /// accumulation is additive. One backward per graph.
    pub fn backward(&mut self, loss: TensorRef) {
        assert_eq!(self.dims(loss), (1, 1), "backward: loss must be a 1x1 scalar");
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let grad = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(a);
                    let n = self.dims(b).1;
                    if self.needs(a) {
                        let bt = transpose_raw(&self.nodes[b.0].data, k, n);
                        let da = matmul_raw(&grad, &bt, m, n, k);
                        self.accum(a, &da);
                    }
                    if self.needs(b) {
                        let at = transpose_raw(&self.nodes[a.0].data, m, k);
                        let db = matmul_raw(&at, &grad, k, m, n);
                        self.accum(b, &db);
                    }
                }
                Op::Add(a, b) => {
                    self.accum(a, &grad);
                    self.accum(b, &grad);
                }
                Op::AddN(parts) => {
                    for p in parts {
                        self.accum(p, &grad);
                    }
                }
                Op::Sub(a, b) => {
                    self.accum(a, &grad);
                    if self.needs(b) {
                        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                        self.accum(b, &neg);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let da: Vec<f64> = grad.iter().zip(&self.nodes[b.0].data).map(|(g, y)| g * y).collect();
                        self.accum(a, &da);
                    }
                    if self.needs(b) {
                        let db: Vec<f64> = grad.iter().zip(&self.nodes[a.0].data).map(|(g, x)| g * x).collect();
                        self.accum(b, &db);
                    }
                }
                Op::AddBias(a, bias) => {
                    self.accum(a, &grad);
                    if self.needs(bias) {
                        let c = self.dims(bias).1;
                        let mut db = vec![0.0; c];
                        for row in grad.chunks(c) {
                            for (d, g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        self.accum(bias, &db);
                    }
                }
                Op::Scale(a, f) => {
                    let da: Vec<f64> = grad.iter().map(|g| g * f).collect();
                    self.accum(a, &da);
                }
                Op::MulScalarNode(a, s) => {
                    let sv = self.nodes[s.0].data[0];
                    if self.needs(a) {
                        let da: Vec<f64> = grad.iter().map(|g| g * sv).collect();
                        self.accum(a, &da);
                    }
                    if self.needs(s) {
                        let ds: f64 = grad.iter().zip(&self.nodes[a.0].data).map(|(g, x)| g * x).sum();
                        self.accum(s, &[ds]);
                    }
                }
                Op::Relu(a) => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accum(a, &da);
                }
                Op::Sigmoid(a) => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(g, &y)| g * y * (1.0 - y))
                        .collect();
                    self.accum(a, &da);
                }
                Op::Tanh(a) => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(g, &y)| g * (1.0 - y * y))
                        .collect();
                    self.accum(a, &da);
                }
                Op::Gelu(a) => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, &x)| {
                            let inner = GELU_C * (x + 0.044715 * x * x * x);
                            let t = inner.tanh();
                            let sech2 = 1.0 - t * t;
                            let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                            g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner)
                        })
                        .collect();
                    self.accum(a, &da);
                }
                Op::LogSigmoid(a) => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, &x)| g * sigmoid_raw(-x))
                        .collect();
                    self.accum(a, &da);
                }
                Op::Log(a) => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, &x)| g / x)
                        .collect();
                    self.accum(a, &da);
                }
                Op::Softmax(a, axis) => {
                    let (r, c) = self.dims(a);
                    let y = &self.nodes[i].data;
                    let mut da = vec![0.0; r * c];
                    let (outer, inner, stride) = if axis == 1 { (r, c, 1) } else { (c, r, c) };
                    for o in 0..outer {
                        let base = if axis == 1 { o * c } else { o };
                        let mut dot = 0.0;
                        for j in 0..inner {
                            let idx = base + j * stride;
                            dot += grad[idx] * y[idx];
                        }
                        for j in 0..inner {
                            let idx = base + j * stride;
                            da[idx] = y[idx] * (grad[idx] - dot);
                        }
                    }
                    self.accum(a, &da);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (r, c) = self.dims(x);
                    let xd = &self.nodes[x.0].data;
                    let gd = &self.nodes[gamma.0].data;
                    let mut dx = vec![0.0; r * c];
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for row in 0..r {
                        let s = &xd[row * c..(row + 1) * c];
                        let g = &grad[row * c..(row + 1) * c];
                        let mean = s.iter().sum::<f64>() / c as f64;
                        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = s.iter().map(|v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> = g.iter().zip(gd.iter()).map(|(gi, gm)| gi * gm).collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let cf = c as f64;
                        for j in 0..c {
                            dgamma[j] += g[j] * xhat[j];
                            dbeta[j] += g[j];
                            dx[row * c + j] =
                                inv / cf * (cf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    self.accum(x, &dx);
                    self.accum(gamma, &dgamma);
                    self.accum(beta, &dbeta);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.dims(a);
                    let da = vec![grad[0]; r * c];
                    self.accum(a, &da);
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.dims(a);
                    let mut da = vec![0.0; r * c];
                    for row in 0..r {
                        for j in 0..c {
                            da[row * c + j] = grad[j] / r as f64;
                        }
                    }
                    self.accum(a, &da);
                }
                Op::Transpose(a) => {
                    let (r, c) = self.dims(TensorRef(i));
                    let da = transpose_raw(&grad, r, c);
                    self.accum(a, &da);
                }
                Op::Reshape(a) => {
                    self.accum(a, &grad);
                }
                Op::ConcatCols(parts) => {
                    let total = self.dims(TensorRef(i)).1;
                    let r = self.dims(TensorRef(i)).0;
                    let mut off = 0;
                    for p in parts {
                        let pc = self.dims(p).1;
                        if self.needs(p) {
                            let mut dp = vec![0.0; r * pc];
                            for row in 0..r {
                                dp[row * pc..(row + 1) * pc]
                                    .copy_from_slice(&grad[row * total + off..row * total + off + pc]);
                            }
                            self.accum(p, &dp);
                        }
                        off += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let c = self.dims(TensorRef(i)).1;
                    let mut off = 0;
                    for p in parts {
                        let pr = self.dims(p).0;
                        if self.needs(p) {
                            self.accum(p, &grad[off * c..(off + pr) * c]);
                        }
                        off += pr;
                    }
                }
                Op::SliceCols(a, from, to) => {
                    let (r, c) = self.dims(a);
                    let w = to - from;
                    let mut da = vec![0.0; r * c];
                    for row in 0..r {
                        da[row * c + from..row * c + to].copy_from_slice(&grad[row * w..(row + 1) * w]);
                    }
                    self.accum(a, &da);
                }
                Op::SelectElement(a, row, col) => {
                    let (r, c) = self.dims(a);
                    let mut da = vec![0.0; r * c];
                    da[row * c + col] = grad[0];
                    self.accum(a, &da);
                }
                Op::GatherRows(table, ids) => {
                    let (v, d) = self.dims(table);
                    let mut dt = vec![0.0; v * d];
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += grad[t * d + j];
                        }
                    }
                    self.accum(table, &dt);
                }
                Op::GatherTable(table, index_map) => {
                    let k = self.dims(table).1;
                    let mut dt = vec![0.0; k];
                    for (g, &idx) in grad.iter().zip(&index_map) {
                        dt[idx] += g;
                    }
                    self.accum(table, &dt);
                }
                Op::CosineSim(u, v) => {
                    let ud = &self.nodes[u.0].data;
                    let vd = &self.nodes[v.0].data;
                    let nu = ud.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nv = vd.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if nu >= EPS_NORM && nv >= EPS_NORM {
                        let cosv = self.nodes[i].data[0];
                        let g = grad[0];
                        let du: Vec<f64> = ud
                            .iter()
                            .zip(vd)
                            .map(|(&ui, &vi)| g * (vi / (nu * nv) - cosv * ui / (nu * nu)))
                            .collect();
                        let dv: Vec<f64> = ud
                            .iter()
                            .zip(vd)
                            .map(|(&ui, &vi)| g * (ui / (nu * nv) - cosv * vi / (nv * nv)))
                            .collect();
                        self.accum(u, &du);
                        self.accum(v, &dv);
                    }
                }
                Op::HarmonicLambda(a, eps) => {
                    let xd = &self.nodes[a.0].data;
                    let n = xd.len() as f64;
                    let guarded: Vec<f64> = xd.iter().map(|&x| guard_reciprocal_input(x, eps)).collect();
                    let s: f64 = guarded.iter().map(|x| 1.0 / x).sum();
                    if s.abs() >= eps {
                        let g = grad[0];
                        // lambda = n / s; d lambda / d x_j = n / (s^2 x_j^2)
                        // for entries outside the guard band, 0 inside it.
                        let da: Vec<f64> = xd
                            .iter()
                            .zip(&guarded)
                            .map(|(&x, &w)| {
                                if x.abs() < eps {
                                    0.0
                                } else {
                                    g * n / (s * s * w * w)
                                }
                            })
                            .collect();
                        self.accum(a, &da);
                    }
                }
                Op::SubFromScalar(s, a) => {
                    if self.needs(s) {
                        let ds: f64 = grad.iter().sum();
                        self.accum(s, &[ds]);
                    }
                    if self.needs(a) {
                        let da: Vec<f64> = grad.iter().map(|g| -g).collect();
                        self.accum(a, &da);
                    }
                }
            }
            // Non-leaf nodes only relay gradients; free the buffer so a
            // second sweep cannot double-count.
            if !matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = None;
            } else {
                self.nodes[i].grad = Some(grad);
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn guard_reciprocal_input(x: f64, eps: f64) -> f64 {
    if x.abs() >= eps {
        x
    } else if x < 0.0 {
        -eps
    } else {
        eps
    }
}

/// Plain (non-graph) harmonic mean with the same guards as the graph op.
pub fn harmonic_lambda_raw(xs: &[f64], eps: f64) -> f64 {
    let n = xs.len() as f64;
    let s: f64 = xs.iter().map(|&x| 1.0 / guard_reciprocal_input(x, eps)).sum();
    if s.abs() < eps {
        0.0
    } else {
        n / s
    }
}

//! The differentiation tape and its operation set.

use super::Scalar;

/// Handle to a node on a [`Tape`]. Values are matrices (`rows x cols`);
/// scalars are 1x1 and vectors are single rows or columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value {
    pub(crate) id: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Value {
    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }
}

enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// Broadcast add of a 1 x C row onto every row of a T x C matrix.
    AddRow(usize, usize),
    Scale(usize, S),
    AddConst(usize),
    Square(usize),
    Abs(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Mean(usize),
    Sum(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        src: usize,
        axis: usize,
        start: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Embedding {
        table: usize,
        indices: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        class: usize,
        probs: Vec<S>,
    },
    Conv1d {
        input: usize,
        kernel: usize,
        k: usize,
        cin: usize,
        cout: usize,
        dilation: usize,
        causal: bool,
    },
    StopGradient,
    GradReverse(usize, S),
}

struct Node<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
    grad: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records a forward evaluation; `backward` accumulates gradients in exact
/// reverse recording order.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn disjoint_pair_mut<T>(slice: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = slice.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = slice.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, v: Value) -> &[S] {
        &self.nodes[v.id].data
    }

    pub fn grad(&self, v: Value) -> &[S] {
        &self.nodes[v.id].grad
    }

    pub fn scalar_value(&self, v: Value) -> S {
        assert!(v.is_scalar(), "scalar_value on {}", v.shape_str());
        self.nodes[v.id].data[0]
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<S>, op: Op<S>, requires_grad: bool, name: &str) -> Value {
        debug_assert_eq!(data.len(), rows * cols, "{name}: buffer size mismatch");
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "{name}: produced a non-finite value"
        );
        let grad = vec![S::zero(); data.len()];
        self.nodes.push(Node { rows, cols, data, grad, op, requires_grad });
        Value { id: self.nodes.len() - 1, rows, cols }
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    // ---- creation ----

    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<S>, requires_grad: bool) -> Value {
        assert_eq!(data.len(), rows * cols, "leaf: {} values for shape {rows}x{cols}", data.len());
        self.push(rows, cols, data, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<S>) -> Value {
        self.leaf(rows, cols, data, false)
    }

    pub fn scalar(&mut self, v: S) -> Value {
        self.constant(1, 1, vec![v])
    }

    pub fn zeros(&mut self, rows: usize, cols: usize, requires_grad: bool) -> Value {
        self.leaf(rows, cols, vec![S::zero(); rows * cols], requires_grad)
    }

    pub fn ones(&mut self, rows: usize, cols: usize) -> Value {
        self.constant(rows, cols, vec![S::one(); rows * cols])
    }

    // ---- elementwise ----

    fn check_same(&self, op: &str, a: Value, b: Value) {
        assert!(
            a.rows == b.rows && a.cols == b.cols,
            "{op}: shape mismatch ({} vs {})",
            a.shape_str(),
            b.shape_str()
        );
    }

    fn zip_new(&mut self, a: Value, b: Value, f: impl Fn(S, S) -> S, op: Op<S>, name: &str) -> Value {
        self.check_same(name, a, b);
        let req = self.requires(a.id) || self.requires(b.id);
        let data: Vec<S> = self.nodes[a.id]
            .data
            .iter()
            .zip(&self.nodes[b.id].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(a.rows, a.cols, data, op, req, name)
    }

    pub fn add(&mut self, a: Value, b: Value) -> Value {
        self.zip_new(a, b, |x, y| x + y, Op::Add(a.id, b.id), "add")
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Value {
        self.zip_new(a, b, |x, y| x - y, Op::Sub(a.id, b.id), "sub")
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Value {
        self.zip_new(a, b, |x, y| x * y, Op::Mul(a.id, b.id), "mul")
    }

    pub fn div(&mut self, a: Value, b: Value) -> Value {
        self.zip_new(a, b, |x, y| x / y, Op::Div(a.id, b.id), "div")
    }

    pub fn add_row(&mut self, a: Value, row: Value) -> Value {
        assert!(
            row.rows == 1 && row.cols == a.cols,
            "add_row: row {} does not broadcast over {}",
            row.shape_str(),
            a.shape_str()
        );
        let req = self.requires(a.id) || self.requires(row.id);
        let mut data = self.nodes[a.id].data.clone();
        for t in 0..a.rows {
            for c in 0..a.cols {
                data[t * a.cols + c] += self.nodes[row.id].data[c];
            }
        }
        self.push(a.rows, a.cols, data, Op::AddRow(a.id, row.id), req, "add_row")
    }

    fn map_new(&mut self, a: Value, f: impl Fn(S) -> S, op: Op<S>, name: &str) -> Value {
        let req = self.requires(a.id);
        let data: Vec<S> = self.nodes[a.id].data.iter().map(|&x| f(x)).collect();
        self.push(a.rows, a.cols, data, op, req, name)
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Value {
        let c = S::cast_from(c);
        self.map_new(a, |x| x * c, Op::Scale(a.id, c), "scale")
    }

    pub fn add_const(&mut self, a: Value, c: f64) -> Value {
        let c = S::cast_from(c);
        self.map_new(a, |x| x + c, Op::AddConst(a.id), "add_const")
    }

    pub fn neg(&mut self, a: Value) -> Value {
        self.scale(a, -1.0)
    }

    pub fn square(&mut self, a: Value) -> Value {
        self.map_new(a, |x| x * x, Op::Square(a.id), "square")
    }

    pub fn abs(&mut self, a: Value) -> Value {
        self.map_new(a, |x| x.abs(), Op::Abs(a.id), "abs")
    }

    pub fn exp(&mut self, a: Value) -> Value {
        self.map_new(a, |x| x.exp(), Op::Exp(a.id), "exp")
    }

    pub fn log(&mut self, a: Value) -> Value {
        self.map_new(a, |x| x.ln(), Op::Log(a.id), "log")
    }

    pub fn sqrt(&mut self, a: Value) -> Value {
        self.map_new(a, |x| x.sqrt(), Op::Sqrt(a.id), "sqrt")
    }

    pub fn sigmoid(&mut self, a: Value) -> Value {
        let one = S::one();
        self.map_new(
            a,
            |x| {
                if x >= S::zero() {
                    one / (one + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (one + e)
                }
            },
            Op::Sigmoid(a.id),
            "sigmoid",
        )
    }

    pub fn tanh(&mut self, a: Value) -> Value {
        self.map_new(a, |x| x.tanh(), Op::Tanh(a.id), "tanh")
    }

    pub fn relu(&mut self, a: Value) -> Value {
        self.map_new(a, |x| x.max(S::zero()), Op::Relu(a.id), "relu")
    }

    // ---- reductions (f64 accumulation) ----

    pub fn mean(&mut self, a: Value) -> Value {
        let req = self.requires(a.id);
        let total: f64 = self.nodes[a.id].data.iter().map(|&x| x.cast_f64()).sum();
        let v = S::cast_from(total / a.numel() as f64);
        self.push(1, 1, vec![v], Op::Mean(a.id), req, "mean")
    }

    pub fn sum(&mut self, a: Value) -> Value {
        let req = self.requires(a.id);
        let total: f64 = self.nodes[a.id].data.iter().map(|&x| x.cast_f64()).sum();
        self.push(1, 1, vec![S::cast_from(total)], Op::Sum(a.id), req, "sum")
    }

    // ---- shape ----

    pub fn concat(&mut self, parts: &[Value], axis: usize) -> Value {
        assert!(!parts.is_empty(), "concat: no inputs");
        assert!(axis < 2, "concat: axis {axis} out of range");
        let (rows, cols) = match axis {
            0 => {
                let cols = parts[0].cols;
                for p in parts {
                    assert_eq!(p.cols, cols, "concat(axis=0): column mismatch ({} vs 1x{})", p.shape_str(), cols);
                }
                (parts.iter().map(|p| p.rows).sum(), cols)
            }
            _ => {
                let rows = parts[0].rows;
                for p in parts {
                    assert_eq!(p.rows, rows, "concat(axis=1): row mismatch ({} vs {}x1)", p.shape_str(), rows);
                }
                (rows, parts.iter().map(|p| p.cols).sum())
            }
        };
        let req = parts.iter().any(|p| self.requires(p.id));
        let mut data = vec![S::zero(); rows * cols];
        match axis {
            0 => {
                let mut r0 = 0;
                for p in parts {
                    let src = &self.nodes[p.id].data;
                    data[r0 * cols..(r0 + p.rows) * cols].copy_from_slice(src);
                    r0 += p.rows;
                }
            }
            _ => {
                let mut c0 = 0;
                for p in parts {
                    let src = &self.nodes[p.id].data;
                    for r in 0..rows {
                        data[r * cols + c0..r * cols + c0 + p.cols]
                            .copy_from_slice(&src[r * p.cols..(r + 1) * p.cols]);
                    }
                    c0 += p.cols;
                }
            }
        }
        let ids = parts.iter().map(|p| p.id).collect();
        self.push(rows, cols, data, Op::Concat { parts: ids, axis }, req, "concat")
    }

    /// Contiguous range `start..end` along `axis` (0 = rows, 1 = columns).
    pub fn slice(&mut self, a: Value, axis: usize, start: usize, end: usize) -> Value {
        assert!(axis < 2, "slice: axis {axis} out of range");
        let limit = if axis == 0 { a.rows } else { a.cols };
        assert!(
            start < end && end <= limit,
            "slice: range {start}..{end} invalid for {} along axis {axis}",
            a.shape_str()
        );
        let req = self.requires(a.id);
        let (rows, cols) = if axis == 0 { (end - start, a.cols) } else { (a.rows, end - start) };
        let src = &self.nodes[a.id].data;
        let mut data = vec![S::zero(); rows * cols];
        if axis == 0 {
            data.copy_from_slice(&src[start * a.cols..end * a.cols]);
        } else {
            for r in 0..rows {
                data[r * cols..(r + 1) * cols].copy_from_slice(&src[r * a.cols + start..r * a.cols + end]);
            }
        }
        self.push(rows, cols, data, Op::Slice { src: a.id, axis, start }, req, "slice")
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Value {
        assert_eq!(
            a.cols, b.rows,
            "matmul: inner dimension mismatch ({} vs {})",
            a.shape_str(),
            b.shape_str()
        );
        let (m, k, n) = (a.rows, a.cols, b.cols);
        let req = self.requires(a.id) || self.requires(b.id);
        let da = &self.nodes[a.id].data;
        let db = &self.nodes[b.id].data;
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            let out_row = &mut data[i * n..(i + 1) * n];
            for l in 0..k {
                let av = da[i * k + l];
                let b_row = &db[l * n..(l + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
        self.push(m, n, data, Op::MatMul { a: a.id, b: b.id }, req, "matmul")
    }

    /// Gather rows of `table` by index; backward scatter-adds into the
    /// gathered rows.
    pub fn embedding_lookup(&mut self, table: Value, indices: &[usize]) -> Value {
        let (k, d) = (table.rows, table.cols);
        for &i in indices {
            assert!(i < k, "embedding_lookup: index {i} out of range for table {}", table.shape_str());
        }
        let req = self.requires(table.id);
        let src = &self.nodes[table.id].data;
        let mut data = vec![S::zero(); indices.len() * d];
        for (t, &i) in indices.iter().enumerate() {
            data[t * d..(t + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push(
            indices.len(),
            d,
            data,
            Op::Embedding { table: table.id, indices: indices.to_vec() },
            req,
            "embedding_lookup",
        )
    }

    /// Numerically stable `-log softmax(logits)[class]` of a flat logit
    /// vector.
    pub fn softmax_cross_entropy(&mut self, logits: Value, class: usize) -> Value {
        let n = logits.numel();
        assert!(class < n, "softmax_cross_entropy: class {class} out of range for {n} logits");
        let req = self.requires(logits.id);
        let data = &self.nodes[logits.id].data;
        let max = data.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut probs: Vec<S> = data.iter().map(|&x| (x - max).exp()).collect();
        let denom: f64 = probs.iter().map(|&p| p.cast_f64()).sum();
        let denom_s = S::cast_from(denom);
        for p in probs.iter_mut() {
            *p /= denom_s;
        }
        let loss = S::cast_from(denom.ln()) + max - data[class];
        self.push(
            1,
            1,
            vec![loss],
            Op::SoftmaxCrossEntropy { logits: logits.id, class, probs },
            req,
            "softmax_cross_entropy",
        )
    }

    /// Length-preserving dilated 1-D convolution over a T x Cin sequence.
    /// The kernel is laid out as (k * Cin) x Cout, tap-major; causal
    /// convolution left-pads so frame t sees only frames <= t, non-causal
    /// pads symmetrically.
    pub fn conv1d_dilated(&mut self, input: Value, kernel: Value, k: usize, dilation: usize, causal: bool) -> Value {
        assert!(k >= 1 && dilation >= 1, "conv1d_dilated: k and dilation must be >= 1");
        let t_len = input.rows;
        let cin = input.cols;
        assert_eq!(
            kernel.rows,
            k * cin,
            "conv1d_dilated: kernel {} does not match k {k} x cin {cin} (input {})",
            kernel.shape_str(),
            input.shape_str()
        );
        assert_ne!(input.id, kernel.id, "conv1d_dilated: input and kernel must be distinct values");
        let cout = kernel.cols;
        let pad = if causal { (k - 1) * dilation } else { (k - 1) * dilation / 2 };
        let req = self.requires(input.id) || self.requires(kernel.id);
        let x = &self.nodes[input.id].data;
        let w = &self.nodes[kernel.id].data;
        let mut data = vec![S::zero(); t_len * cout];
        for t in 0..t_len {
            let out_row = &mut data[t * cout..(t + 1) * cout];
            for j in 0..k {
                let src = t as isize + (j * dilation) as isize - pad as isize;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let x_row = &x[src as usize * cin..(src as usize + 1) * cin];
                for (ci, &xv) in x_row.iter().enumerate() {
                    if xv == S::zero() {
                        continue;
                    }
                    let w_row = &w[(j * cin + ci) * cout..(j * cin + ci + 1) * cout];
                    for (o, &wv) in out_row.iter_mut().zip(w_row) {
                        *o += xv * wv;
                    }
                }
            }
        }
        self.push(
            t_len,
            cout,
            data,
            Op::Conv1d { input: input.id, kernel: kernel.id, k, cin, cout, dilation, causal },
            req,
            "conv1d_dilated",
        )
    }

    /// Gated linear unit: split channels in half, `first * sigmoid(second)`.
    pub fn glu(&mut self, a: Value) -> Value {
        assert!(a.cols % 2 == 0, "glu: channel count {} is odd ({})", a.cols, a.shape_str());
        let half = a.cols / 2;
        let lin = self.slice(a, 1, 0, half);
        let gate = self.slice(a, 1, half, a.cols);
        let sg = self.sigmoid(gate);
        self.mul(lin, sg)
    }

    /// Forward identity whose backward contributes nothing upstream.
    pub fn stop_gradient(&mut self, a: Value) -> Value {
        let data = self.nodes[a.id].data.clone();
        self.push(a.rows, a.cols, data, Op::StopGradient, false, "stop_gradient")
    }

    /// Forward identity; backward multiplies the upstream gradient by
    /// `-lambda`.
    pub fn gradient_reversal(&mut self, a: Value, lambda: f64) -> Value {
        assert!(lambda.is_finite(), "gradient_reversal: lambda must be finite");
        let req = self.requires(a.id);
        let data = self.nodes[a.id].data.clone();
        self.push(a.rows, a.cols, data, Op::GradReverse(a.id, S::cast_from(lambda)), req, "gradient_reversal")
    }

    // ---- composites ----

    /// Repeat a 1 x C row `t` times (ones-matmul composite).
    pub fn broadcast_rows(&mut self, row: Value, t: usize) -> Value {
        assert_eq!(row.rows, 1, "broadcast_rows: expected a single row, got {}", row.shape_str());
        let ones = self.ones(t, 1);
        self.matmul(ones, row)
    }

    /// Column means: T x C -> 1 x C.
    pub fn mean_rows(&mut self, a: Value) -> Value {
        let ones = self.ones(1, a.rows);
        let s = self.matmul(ones, a);
        self.scale(s, 1.0 / a.rows as f64)
    }

    // ---- backward ----

    /// Accumulate gradients of `loss` (a scalar) into every node that
    /// requires them.
    pub fn backward(&mut self, loss: Value) {
        assert!(loss.is_scalar(), "backward: loss must be scalar, got {}", loss.shape_str());
        self.nodes[loss.id].grad[0] += S::one();
        for i in (0..=loss.id).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            match &node.op {
                Op::Leaf => {}
                Op::StopGradient => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if before[a].requires_grad {
                        for (g, &up) in before[a].grad.iter_mut().zip(&node.grad) {
                            *g += up;
                        }
                    }
                    if before[b].requires_grad {
                        for (g, &up) in before[b].grad.iter_mut().zip(&node.grad) {
                            *g += up;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if before[a].requires_grad {
                        for (g, &up) in before[a].grad.iter_mut().zip(&node.grad) {
                            *g += up;
                        }
                    }
                    if before[b].requires_grad {
                        for (g, &up) in before[b].grad.iter_mut().zip(&node.grad) {
                            *g -= up;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if a == b {
                        let pa = &mut before[a];
                        if pa.requires_grad {
                            for ((g, &d), &up) in pa.grad.iter_mut().zip(&pa.data).zip(&node.grad) {
                                *g += (d + d) * up;
                            }
                        }
                    } else {
                        let (pa, pb) = disjoint_pair_mut(before, a, b);
                        if pa.requires_grad {
                            for ((g, &db), &up) in pa.grad.iter_mut().zip(&pb.data).zip(&node.grad) {
                                *g += db * up;
                            }
                        }
                        if pb.requires_grad {
                            for ((g, &da), &up) in pb.grad.iter_mut().zip(&pa.data).zip(&node.grad) {
                                *g += da * up;
                            }
                        }
                    }
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    if a == b {
                        // d(a/a) = 0
                    } else {
                        let (pa, pb) = disjoint_pair_mut(before, a, b);
                        if pa.requires_grad {
                            for ((g, &db), &up) in pa.grad.iter_mut().zip(&pb.data).zip(&node.grad) {
                                *g += up / db;
                            }
                        }
                        if pb.requires_grad {
                            for (idx, (g, &up)) in pb.grad.iter_mut().zip(&node.grad).enumerate() {
                                let db = pb.data[idx];
                                *g -= up * node.data[idx] / db;
                            }
                        }
                    }
                }
                Op::AddRow(a, r) => {
                    let (a, r) = (*a, *r);
                    let cols = node.cols;
                    if before[a].requires_grad {
                        for (g, &up) in before[a].grad.iter_mut().zip(&node.grad) {
                            *g += up;
                        }
                    }
                    if before[r].requires_grad {
                        for t in 0..node.rows {
                            for c in 0..cols {
                                before[r].grad[c] += node.grad[t * cols + c];
                            }
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    for (g, &up) in before[a].grad.iter_mut().zip(&node.grad) {
                        *g += c * up;
                    }
                }
                Op::AddConst(a) => {
                    for (g, &up) in before[*a].grad.iter_mut().zip(&node.grad) {
                        *g += up;
                    }
                }
                Op::Square(a) => {
                    let pa = &mut before[*a];
                    let two = S::cast_from(2.0);
                    for ((g, &d), &up) in pa.grad.iter_mut().zip(&pa.data).zip(&node.grad) {
                        *g += two * d * up;
                    }
                }
                Op::Abs(a) => {
                    let pa = &mut before[*a];
                    for ((g, &d), &up) in pa.grad.iter_mut().zip(&pa.data).zip(&node.grad) {
                        *g += d.signum() * up * if d == S::zero() { S::zero() } else { S::one() };
                    }
                }
                Op::Exp(a) => {
                    for ((g, &out), &up) in before[*a].grad.iter_mut().zip(&node.data).zip(&node.grad) {
                        *g += out * up;
                    }
                }
                Op::Log(a) => {
                    let pa = &mut before[*a];
                    for ((g, &d), &up) in pa.grad.iter_mut().zip(&pa.data).zip(&node.grad) {
                        *g += up / d;
                    }
                }
                Op::Sqrt(a) => {
                    let half = S::cast_from(0.5);
                    for ((g, &out), &up) in before[*a].grad.iter_mut().zip(&node.data).zip(&node.grad) {
                        *g += half * up / out;
                    }
                }
                Op::Sigmoid(a) => {
                    let one = S::one();
                    for ((g, &out), &up) in before[*a].grad.iter_mut().zip(&node.data).zip(&node.grad) {
                        *g += out * (one - out) * up;
                    }
                }
                Op::Tanh(a) => {
                    let one = S::one();
                    for ((g, &out), &up) in before[*a].grad.iter_mut().zip(&node.data).zip(&node.grad) {
                        *g += (one - out * out) * up;
                    }
                }
                Op::Relu(a) => {
                    let pa = &mut before[*a];
                    for ((g, &d), &up) in pa.grad.iter_mut().zip(&pa.data).zip(&node.grad) {
                        if d > S::zero() {
                            *g += up;
                        }
                    }
                }
                Op::Mean(a) => {
                    let pa = &mut before[*a];
                    let scale = node.grad[0] / S::cast_from(pa.data.len() as f64);
                    for g in pa.grad.iter_mut() {
                        *g += scale;
                    }
                }
                Op::Sum(a) => {
                    let up = node.grad[0];
                    for g in before[*a].grad.iter_mut() {
                        *g += up;
                    }
                }
                Op::Concat { parts, axis } => match axis {
                    0 => {
                        let cols = node.cols;
                        let mut r0 = 0;
                        for &p in parts {
                            let rows_p = before[p].rows;
                            if before[p].requires_grad {
                                for (g, &up) in before[p]
                                    .grad
                                    .iter_mut()
                                    .zip(&node.grad[r0 * cols..(r0 + rows_p) * cols])
                                {
                                    *g += up;
                                }
                            }
                            r0 += rows_p;
                        }
                    }
                    _ => {
                        let cols = node.cols;
                        let mut c0 = 0;
                        for &p in parts {
                            let (rows_p, cols_p) = (before[p].rows, before[p].cols);
                            if before[p].requires_grad {
                                for r in 0..rows_p {
                                    for c in 0..cols_p {
                                        before[p].grad[r * cols_p + c] += node.grad[r * cols + c0 + c];
                                    }
                                }
                            }
                            c0 += cols_p;
                        }
                    }
                },
                Op::Slice { src, axis, start } => {
                    let (src, axis, start) = (*src, *axis, *start);
                    let ps = &mut before[src];
                    if axis == 0 {
                        for (g, &up) in ps.grad[start * ps.cols..start * ps.cols + node.grad.len()]
                            .iter_mut()
                            .zip(&node.grad)
                        {
                            *g += up;
                        }
                    } else {
                        for r in 0..node.rows {
                            for c in 0..node.cols {
                                ps.grad[r * ps.cols + start + c] += node.grad[r * node.cols + c];
                            }
                        }
                    }
                }
                Op::MatMul { a, b } if a == b => {
                    // square self-product: dX = G.X^T + X^T.G
                    let a = *a;
                    let (m, n) = (node.rows, node.cols);
                    let pa = &mut before[a];
                    let k = pa.cols;
                    let mut tmp = vec![S::zero(); pa.grad.len()];
                    for i in 0..m {
                        let g_row = &node.grad[i * n..(i + 1) * n];
                        for l in 0..k {
                            let b_row = &pa.data[l * n..(l + 1) * n];
                            let mut acc = S::zero();
                            for (gv, bv) in g_row.iter().zip(b_row) {
                                acc += *gv * *bv;
                            }
                            tmp[i * k + l] += acc;
                        }
                    }
                    for l in 0..k {
                        for i in 0..m {
                            let av = pa.data[i * k + l];
                            let g_row = &node.grad[i * n..(i + 1) * n];
                            for (c, &gv) in g_row.iter().enumerate() {
                                tmp[l * n + c] += av * gv;
                            }
                        }
                    }
                    for (g, t) in pa.grad.iter_mut().zip(tmp) {
                        *g += t;
                    }
                }
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, n) = (node.rows, node.cols);
                    let (pa, pb) = disjoint_pair_mut(before, a, b);
                    let k = pa.cols;
                    if pa.requires_grad {
                        // dA = G . B^T
                        for i in 0..m {
                            let g_row = &node.grad[i * n..(i + 1) * n];
                            let ga_row = &mut pa.grad[i * k..(i + 1) * k];
                            for l in 0..k {
                                let b_row = &pb.data[l * n..(l + 1) * n];
                                let mut acc = S::zero();
                                for (gv, bv) in g_row.iter().zip(b_row) {
                                    acc += *gv * *bv;
                                }
                                ga_row[l] += acc;
                            }
                        }
                    }
                    if pb.requires_grad {
                        // dB = A^T . G
                        for l in 0..k {
                            let gb_row = &mut pb.grad[l * n..(l + 1) * n];
                            for i in 0..m {
                                let av = pa.data[i * k + l];
                                if av == S::zero() {
                                    continue;
                                }
                                let g_row = &node.grad[i * n..(i + 1) * n];
                                for (g, &gv) in gb_row.iter_mut().zip(g_row) {
                                    *g += av * gv;
                                }
                            }
                        }
                    }
                }
                Op::Embedding { table, indices } => {
                    let pt = &mut before[*table];
                    let d = pt.cols;
                    for (t, &i) in indices.iter().enumerate() {
                        for (g, &up) in pt.grad[i * d..(i + 1) * d].iter_mut().zip(&node.grad[t * d..(t + 1) * d]) {
                            *g += up;
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, class, probs } => {
                    let up = node.grad[0];
                    let pl = &mut before[*logits];
                    for (j, (g, &p)) in pl.grad.iter_mut().zip(probs).enumerate() {
                        let target = if j == *class { S::one() } else { S::zero() };
                        *g += up * (p - target);
                    }
                }
                Op::Conv1d { input, kernel, k, cin, cout, dilation, causal } => {
                    let (input, kernel) = (*input, *kernel);
                    let (k, cin, cout, dilation) = (*k, *cin, *cout, *dilation);
                    let pad = if *causal { (k - 1) * dilation } else { (k - 1) * dilation / 2 };
                    let t_len = node.rows;
                    let (px, pw) = disjoint_pair_mut(before, input, kernel);
                    let x_req = px.requires_grad;
                    let w_req = pw.requires_grad;
                    for t in 0..t_len {
                        let g_row = &node.grad[t * cout..(t + 1) * cout];
                        for j in 0..k {
                            let src = t as isize + (j * dilation) as isize - pad as isize;
                            if src < 0 || src >= t_len as isize {
                                continue;
                            }
                            let src = src as usize;
                            for ci in 0..cin {
                                let w_row = &pw.data[(j * cin + ci) * cout..(j * cin + ci + 1) * cout];
                                if x_req {
                                    let mut acc = S::zero();
                                    for (gv, wv) in g_row.iter().zip(w_row) {
                                        acc += *gv * *wv;
                                    }
                                    px.grad[src * cin + ci] += acc;
                                }
                                if w_req {
                                    let xv = px.data[src * cin + ci];
                                    if xv == S::zero() {
                                        continue;
                                    }
                                    let gw_row = &mut pw.grad[(j * cin + ci) * cout..(j * cin + ci + 1) * cout];
                                    for (g, &gv) in gw_row.iter_mut().zip(g_row) {
                                        *g += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::GradReverse(a, lambda) => {
                    let neg = -*lambda;
                    for (g, &up) in before[*a].grad.iter_mut().zip(&node.grad) {
                        *g += neg * up;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T64 = Tape<f64>;

    #[test]
    fn mean_forward_and_backward() {
        let mut tape = T64::new();
        let x = tape.leaf(1, 3, vec![1.0, 2.0, 3.0], true);
        let m = tape.mean(x);
        assert_eq!(tape.scalar_value(m), 2.0);
        tape.backward(m);
        for &g in tape.grad(x) {
            assert!((g - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_lose_ln_c() {
        let mut tape = T64::new();
        for c in [2usize, 4, 7] {
            let logits = tape.leaf(1, c, vec![0.3; c], true);
            let loss = tape.softmax_cross_entropy(logits, 1);
            assert!((tape.scalar_value(loss) - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn value_used_twice_accumulates_both_contributions() {
        let mut tape = T64::new();
        let v = tape.leaf(1, 4, vec![1.0, 2.0, 3.0, 4.0], true);
        let m1 = tape.mean(v);
        let sq = tape.square(v);
        let m2 = tape.mean(sq);
        let loss = tape.add(m1, m2);
        tape.backward(loss);
        for (i, &g) in tape.grad(v).iter().enumerate() {
            let expect = 0.25 + 2.0 * (i as f64 + 1.0) * 0.25;
            assert!((g - expect).abs() < 1e-12, "coord {i}: {g} vs {expect}");
        }
    }

    #[test]
    fn stop_gradient_blocks_upstream() {
        let mut tape = T64::new();
        let v = tape.leaf(1, 3, vec![1.0, -2.0, 3.0], true);
        let sg = tape.stop_gradient(v);
        let sq = tape.square(sg);
        let loss = tape.mean(sq);
        tape.backward(loss);
        assert!(tape.grad(v).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn self_subtraction_through_stop_gradient() {
        let mut tape = T64::new();
        let v = tape.leaf(1, 3, vec![0.5, 1.5, -0.5], true);
        let sg = tape.stop_gradient(v);
        let diff = tape.sub(v, sg);
        let sq = tape.square(diff);
        let loss = tape.mean(sq);
        assert_eq!(tape.scalar_value(loss), 0.0);
        tape.backward(loss);
        assert!(tape.grad(v).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_reversal_negates_and_scales() {
        for lambda in [0.0, 0.1, 1.0] {
            let mut tape = T64::new();
            let v = tape.leaf(1, 3, vec![1.0, 2.0, 3.0], true);
            let r = tape.gradient_reversal(v, lambda);
            let loss = tape.mean(r);
            tape.backward(loss);
            for &g in tape.grad(v) {
                assert!((g - (-lambda / 3.0)).abs() < 1e-12, "lambda {lambda}: {g}");
            }
        }
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let mut tape = T64::new();
        let x = tape.leaf(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], true);
        // k=1, identity channel map
        let w = tape.leaf(2, 2, vec![1.0, 0.0, 0.0, 1.0], true);
        let y = tape.conv1d_dilated(x, w, 1, 1, true);
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn causal_impulse_response_support() {
        let mut tape = T64::new();
        // impulse at t=0, single channel, k=2 d=2 causal
        let mut xs = vec![0.0; 8];
        xs[0] = 1.0;
        let x = tape.leaf(8, 1, xs, false);
        let w = tape.leaf(2, 1, vec![0.5, 0.25], false);
        let y = tape.conv1d_dilated(x, w, 2, 2, true);
        let out = tape.data(y);
        // taps at t (j=1 -> weight 0.25) and t-2 (j=0 -> weight 0.5)
        assert_eq!(out[0], 0.25);
        assert_eq!(out[2], 0.5);
        for (t, &v) in out.iter().enumerate() {
            if t != 0 && t != 2 {
                assert_eq!(v, 0.0, "frame {t}");
            }
        }
    }

    #[test]
    fn glu_zero_gate_halves() {
        let mut tape = T64::new();
        let x = tape.leaf(2, 4, vec![2.0, 4.0, 0.0, 0.0, -2.0, 6.0, 0.0, 0.0], true);
        let y = tape.glu(x);
        assert_eq!(tape.data(y), &[1.0, 2.0, -1.0, 3.0]);
    }

    #[test]
    fn glu_saturated_gate_passes_first_half() {
        let mut tape = T64::new();
        let x = tape.leaf(1, 4, vec![3.0, -1.5, 100.0, 100.0], true);
        let y = tape.glu(x);
        let out = tape.data(y);
        assert!((out[0] - 3.0).abs() < 1e-10);
        assert!((out[1] + 1.5).abs() < 1e-10);
    }

    #[test]
    #[should_panic(expected = "glu")]
    fn glu_rejects_odd_channels() {
        let mut tape = T64::new();
        let x = tape.leaf(1, 3, vec![1.0, 2.0, 3.0], false);
        tape.glu(x);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn elementwise_shape_mismatch_names_shapes() {
        let mut tape = T64::new();
        let a = tape.leaf(2, 2, vec![0.0; 4], false);
        let b = tape.leaf(1, 4, vec![0.0; 4], false);
        tape.add(a, b);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(3, 3, (0..9).map(|i| (i as f32) * 0.37 - 1.0).collect(), true);
            let w = tape.leaf(3, 3, (0..9).map(|i| (i as f32) * 0.11 - 0.5).collect(), true);
            let y = tape.matmul(x, w);
            let s = tape.sigmoid(y);
            let loss = tape.mean(s);
            tape.backward(loss);
            (tape.data(loss).to_vec(), tape.grad(x).to_vec(), tape.grad(w).to_vec())
        };
        assert_eq!(run(), run());
    }

    /// Causality: perturbing a later frame never changes earlier outputs.
    #[test]
    fn causal_conv_is_causal() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t_len = 10;
        let base: Vec<f64> = (0..t_len * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..3 * 3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let forward = |xs: &[f64]| {
            let mut tape = T64::new();
            let x = tape.leaf(t_len, 3, xs.to_vec(), false);
            let kernel = tape.leaf(9, 4, w.clone(), false);
            let y = tape.conv1d_dilated(x, kernel, 3, 2, true);
            tape.data(y).to_vec()
        };
        let y0 = forward(&base);
        for perturb_t in 1..t_len {
            let mut xs = base.clone();
            for c in 0..3 {
                xs[perturb_t * 3 + c] += 10.0;
            }
            let y1 = forward(&xs);
            for t in 0..perturb_t {
                for c in 0..4 {
                    assert_eq!(y0[t * 4 + c], y1[t * 4 + c], "frame {t} changed by perturbation at {perturb_t}");
                }
            }
        }
    }
}

//! Minimal dense-tensor compute with tape-based reverse-mode
//! differentiation: the substrate for the R-GCN, the actor/critic MLPs, and
//! the IQL Q-network. Everything is double precision and strictly
//! sequential, so identical inputs give bit-identical outputs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("non-finite value in `{0}`")]
    NonFinite(String),
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    MulElem(TensorId, TensorId),
    AddBias(TensorId, TensorId),
    Relu(TensorId),
    Tanh(TensorId),
    Exp(TensorId),
    Ln(TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    Minimum(TensorId, TensorId),
    Maximum(TensorId, TensorId),
    Clamp(TensorId, f64, f64),
    MeanAll(TensorId),
    SumAll(TensorId),
    MaskedLogSoftmax(TensorId, Vec<bool>),
    MaskedEntropy(TensorId, Vec<bool>),
    GatherRows(TensorId, Vec<usize>),
    GatherCols(TensorId, Vec<usize>),
    SegmentMean(TensorId, Vec<usize>, Vec<usize>),
    ConcatRows(Vec<TensorId>),
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// Computation tape. Forward values are computed eagerly as ops are
/// recorded; [`Tape::backward`] runs the adjoints in reverse order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), rows * cols);
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node { rows, cols, data, grad, op });
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> TensorId {
        self.push(rows, cols, data, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.leaf(1, 1, vec![v])
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        (self.nodes[id.0].rows, self.nodes[id.0].cols)
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.shape(id), (1, 1));
        self.nodes[id.0].data[0]
    }

    pub fn check_finite(&self, id: TensorId, what: &str) -> Result<(), NnError> {
        if self.nodes[id.0].data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NnError::NonFinite(what.to_string()))
        }
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.nodes[a.0].data[i * k..(i + 1) * k];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &self.nodes[b.0].data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        self.push(m, n, out, Op::Matmul(a, b))
    }

    fn binary_elem(&mut self, a: TensorId, b: TensorId, f: impl Fn(f64, f64) -> f64, op: Op) -> TensorId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (r, c), "elementwise shape mismatch");
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(r, c, data, op)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_elem(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_elem(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul_elem(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_elem(a, b, |x, y| x * y, Op::MulElem(a, b))
    }

    pub fn minimum(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_elem(a, b, f64::min, Op::Minimum(a, b))
    }

    pub fn maximum(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_elem(a, b, f64::max, Op::Maximum(a, b))
    }

    /// Broadcast-add a 1 x cols bias row to every row of x.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> TensorId {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(bias), (1, c), "bias must be 1 x cols");
        let mut data = self.nodes[x.0].data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += self.nodes[bias.0].data[j];
            }
        }
        self.push(r, c, data, Op::AddBias(x, bias))
    }

    fn unary(&mut self, x: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let (r, c) = self.shape(x);
        let data = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        self.push(r, c, data, op)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: TensorId) -> TensorId {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn scale(&mut self, x: TensorId, s: f64) -> TensorId {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: TensorId, s: f64) -> TensorId {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    /// Clamp with zero gradient outside [lo, hi].
    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> TensorId {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x.0].data.len();
        assert!(n > 0, "mean of empty tensor");
        let s: f64 = self.nodes[x.0].data.iter().sum();
        self.push(1, 1, vec![s / n as f64], Op::MeanAll(x))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        self.push(1, 1, vec![s], Op::SumAll(x))
    }

    /// Row-wise log-softmax over the unmasked entries. Masked entries get
    /// probability 0 (log-prob -inf) and are excluded from normalization.
    /// Panics if a row is fully masked.
    pub fn masked_log_softmax(&mut self, x: TensorId, mask: &[bool]) -> TensorId {
        let (r, c) = self.shape(x);
        assert_eq!(mask.len(), r * c, "mask length mismatch");
        let mut data = vec![f64::NEG_INFINITY; r * c];
        for i in 0..r {
            let row = &self.nodes[x.0].data[i * c..(i + 1) * c];
            let mrow = &mask[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(mrow)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(max.is_finite(), "softmax row {i} is fully masked");
            let z: f64 = row
                .iter()
                .zip(mrow)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| (v - max).exp())
                .sum();
            let log_z = max + z.ln();
            for j in 0..c {
                if mrow[j] {
                    data[i * c + j] = row[j] - log_z;
                }
            }
        }
        self.push(r, c, data, Op::MaskedLogSoftmax(x, mask.to_vec()))
    }

    /// Per-row entropy of the masked softmax distribution over `x`,
    /// returned as rows x 1.
    pub fn masked_entropy(&mut self, x: TensorId, mask: &[bool]) -> TensorId {
        let (r, c) = self.shape(x);
        assert_eq!(mask.len(), r * c);
        let logp = self.masked_log_softmax_values(x, mask);
        let mut data = vec![0.0; r];
        for i in 0..r {
            let mut h = 0.0;
            for j in 0..c {
                let lp = logp[i * c + j];
                if lp.is_finite() {
                    h -= lp.exp() * lp;
                }
            }
            data[i] = h;
        }
        self.push(r, 1, data, Op::MaskedEntropy(x, mask.to_vec()))
    }

    fn masked_log_softmax_values(&self, x: TensorId, mask: &[bool]) -> Vec<f64> {
        let (r, c) = self.shape(x);
        let mut out = vec![f64::NEG_INFINITY; r * c];
        for i in 0..r {
            let row = &self.nodes[x.0].data[i * c..(i + 1) * c];
            let mrow = &mask[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(mrow)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(max.is_finite(), "softmax row {i} is fully masked");
            let z: f64 = row
                .iter()
                .zip(mrow)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| (v - max).exp())
                .sum();
            let log_z = max + z.ln();
            for j in 0..c {
                if mrow[j] {
                    out[i * c + j] = row[j] - log_z;
                }
            }
        }
        out
    }

    pub fn gather_rows(&mut self, x: TensorId, rows: &[usize]) -> TensorId {
        let (r, c) = self.shape(x);
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            assert!(i < r, "row index {i} out of range");
            data.extend_from_slice(&self.nodes[x.0].data[i * c..(i + 1) * c]);
        }
        self.push(rows.len(), c, data, Op::GatherRows(x, rows.to_vec()))
    }

    /// Pick one element per row: out[i] = x[i, cols[i]].
    pub fn gather_cols(&mut self, x: TensorId, cols: &[usize]) -> TensorId {
        let (r, c) = self.shape(x);
        assert_eq!(cols.len(), r);
        let data = cols
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < c);
                self.nodes[x.0].data[i * c + j]
            })
            .collect();
        self.push(r, 1, data, Op::GatherCols(x, cols.to_vec()))
    }

    /// Mean of rows per segment id; empty segments produce zero rows.
    pub fn segment_mean(&mut self, x: TensorId, segments: &[usize], num_segments: usize) -> TensorId {
        let (r, c) = self.shape(x);
        assert_eq!(segments.len(), r, "one segment id per row");
        let mut counts = vec![0usize; num_segments];
        for &s in segments {
            assert!(s < num_segments);
            counts[s] += 1;
        }
        let mut data = vec![0.0; num_segments * c];
        for (i, &s) in segments.iter().enumerate() {
            let row = &self.nodes[x.0].data[i * c..(i + 1) * c];
            let orow = &mut data[s * c..(s + 1) * c];
            for (o, &v) in orow.iter_mut().zip(row) {
                *o += v;
            }
        }
        for (s, &count) in counts.iter().enumerate() {
            if count > 1 {
                for v in &mut data[s * c..(s + 1) * c] {
                    *v /= count as f64;
                }
            }
        }
        self.push(num_segments, c, data, Op::SegmentMean(x, segments.to_vec(), counts))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let c = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.shape(p);
            assert_eq!(pc, c, "concat_rows column mismatch");
            rows += r;
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        self.push(rows, c, data, Op::ConcatRows(parts.to_vec()))
    }

    /// Seed the gradient of a 1x1 loss node and propagate adjoints back
    /// through the tape.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for idx in (0..self.nodes.len()).rev() {
            let op = self.nodes[idx].op.clone();
            let grad = std::mem::take(&mut self.nodes[idx].grad);
            match &op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = self.shape(*b).1;
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            let grow = &grad[i * n..(i + 1) * n];
                            let brow = &self.nodes[b.0].data[p * n..(p + 1) * n];
                            for (g, bv) in grow.iter().zip(brow) {
                                s += g * bv;
                            }
                            self.nodes[a.0].grad[i * k + p] += s;
                        }
                    }
                    for i in 0..m {
                        for p in 0..k {
                            let av = self.nodes[a.0].data[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let grow = &grad[i * n..(i + 1) * n];
                            let brow = &mut self.nodes[b.0].grad[p * n..(p + 1) * n];
                            for (bg, g) in brow.iter_mut().zip(grow) {
                                *bg += av * g;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (i, &g) in grad.iter().enumerate() {
                        self.nodes[a.0].grad[i] += g;
                        self.nodes[b.0].grad[i] += g;
                    }
                }
                Op::Sub(a, b) => {
                    for (i, &g) in grad.iter().enumerate() {
                        self.nodes[a.0].grad[i] += g;
                        self.nodes[b.0].grad[i] -= g;
                    }
                }
                Op::MulElem(a, b) => {
                    for (i, &g) in grad.iter().enumerate() {
                        let av = self.nodes[a.0].data[i];
                        let bv = self.nodes[b.0].data[i];
                        self.nodes[a.0].grad[i] += g * bv;
                        self.nodes[b.0].grad[i] += g * av;
                    }
                }
                Op::AddBias(x, bias) => {
                    let c = self.shape(*bias).1;
                    for (i, &g) in grad.iter().enumerate() {
                        self.nodes[x.0].grad[i] += g;
                        self.nodes[bias.0].grad[i % c] += g;
                    }
                }
                Op::Relu(x) => {
                    for (i, &g) in grad.iter().enumerate() {
                        if self.nodes[x.0].data[i] > 0.0 {
                            self.nodes[x.0].grad[i] += g;
                        }
                    }
                }
                Op::Tanh(x) => {
                    for (i, &g) in grad.iter().enumerate() {
                        let y = self.nodes[idx].data[i];
                        self.nodes[x.0].grad[i] += g * (1.0 - y * y);
                    }
                }
                Op::Exp(x) => {
                    for (i, &g) in grad.iter().enumerate() {
                        self.nodes[x.0].grad[i] += g * self.nodes[idx].data[i];
                    }
                }
                Op::Ln(x) => {
                    for (i, &g) in grad.iter().enumerate() {
                        self.nodes[x.0].grad[i] += g / self.nodes[x.0].data[i];
                    }
                }
                Op::Scale(x, s) => {
                    for (i, &g) in grad.iter().enumerate() {
                        self.nodes[x.0].grad[i] += g * s;
                    }
                }
                Op::AddScalar(x) => {
                    for (i, &g) in grad.iter().enumerate() {
                        self.nodes[x.0].grad[i] += g;
                    }
                }
                Op::Minimum(a, b) => {
                    for (i, &g) in grad.iter().enumerate() {
                        if self.nodes[a.0].data[i] <= self.nodes[b.0].data[i] {
                            self.nodes[a.0].grad[i] += g;
                        } else {
                            self.nodes[b.0].grad[i] += g;
                        }
                    }
                }
                Op::Maximum(a, b) => {
                    for (i, &g) in grad.iter().enumerate() {
                        if self.nodes[a.0].data[i] >= self.nodes[b.0].data[i] {
                            self.nodes[a.0].grad[i] += g;
                        } else {
                            self.nodes[b.0].grad[i] += g;
                        }
                    }
                }
                Op::Clamp(x, lo, hi) => {
                    for (i, &g) in grad.iter().enumerate() {
                        let v = self.nodes[x.0].data[i];
                        if v >= *lo && v <= *hi {
                            self.nodes[x.0].grad[i] += g;
                        }
                    }
                }
                Op::MeanAll(x) => {
                    let n = self.nodes[x.0].data.len() as f64;
                    for gx in self.nodes[x.0].grad.iter_mut() {
                        *gx += grad[0] / n;
                    }
                }
                Op::SumAll(x) => {
                    for gx in self.nodes[x.0].grad.iter_mut() {
                        *gx += grad[0];
                    }
                }
                Op::MaskedLogSoftmax(x, mask) => {
                    let (r, c) = self.shape(*x);
                    for i in 0..r {
                        let gsum: f64 = grad[i * c..(i + 1) * c]
                            .iter()
                            .zip(&mask[i * c..(i + 1) * c])
                            .filter(|(_, &m)| m)
                            .map(|(&g, _)| g)
                            .sum();
                        for j in 0..c {
                            if mask[i * c + j] {
                                let p = self.nodes[idx].data[i * c + j].exp();
                                self.nodes[x.0].grad[i * c + j] += grad[i * c + j] - p * gsum;
                            }
                        }
                    }
                }
                Op::MaskedEntropy(x, mask) => {
                    let (r, c) = self.shape(*x);
                    let logp = self.masked_log_softmax_values(*x, mask);
                    for i in 0..r {
                        let h = self.nodes[idx].data[i];
                        for j in 0..c {
                            let lp = logp[i * c + j];
                            if lp.is_finite() {
                                self.nodes[x.0].grad[i * c + j] -=
                                    grad[i] * lp.exp() * (lp + h);
                            }
                        }
                    }
                }
                Op::GatherRows(x, rows) => {
                    let c = self.shape(*x).1;
                    for (k, &i) in rows.iter().enumerate() {
                        for j in 0..c {
                            self.nodes[x.0].grad[i * c + j] += grad[k * c + j];
                        }
                    }
                }
                Op::GatherCols(x, cols) => {
                    let c = self.shape(*x).1;
                    for (i, &j) in cols.iter().enumerate() {
                        self.nodes[x.0].grad[i * c + j] += grad[i];
                    }
                }
                Op::SegmentMean(x, segments, counts) => {
                    let c = self.shape(*x).1;
                    for (i, &s) in segments.iter().enumerate() {
                        let scale = 1.0 / counts[s] as f64;
                        for j in 0..c {
                            self.nodes[x.0].grad[i * c + j] += grad[s * c + j] * scale;
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].data.len();
                        for k in 0..len {
                            self.nodes[p.0].grad[k] += grad[offset + k];
                        }
                        offset += len;
                    }
                }
            }
            self.nodes[idx].grad = grad;
        }
    }
}

/// A named parameter matrix with Adam optimizer state.
#[derive(Debug, Clone)]
pub struct Param {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Ordered collection of named parameters; the single shared parameter
/// vector of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    order: Vec<String>,
    params: std::collections::HashMap<String, Param>,
    adam_t: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Declare a parameter with scaled uniform (Xavier-style) init.
    pub fn declare(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, rows, cols, data);
    }

    pub fn declare_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, rows, cols, vec![0.0; rows * cols]);
    }

    pub fn insert(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>) {
        assert_eq!(data.len(), rows * cols);
        if !self.params.contains_key(name) {
            self.order.push(name.to_string());
        }
        let n = data.len();
        self.params.insert(
            name.to_string(),
            Param { rows, cols, data, m: vec![0.0; n], v: vec![0.0; n] },
        );
    }

    pub fn get(&self, name: &str) -> &Param {
        self.params.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn names(&self) -> &[String] {
        &self.order
    }

    pub fn num_values(&self) -> usize {
        self.order.iter().map(|n| self.params[n].data.len()).sum()
    }

    /// Put a parameter on the tape as a leaf.
    pub fn leaf(&self, tape: &mut Tape, name: &str) -> TensorId {
        let p = self.get(name);
        tape.leaf(p.rows, p.cols, p.data.clone())
    }

    /// One Adam update from gradients accumulated on `tape` at the given
    /// leaf ids. Errors on non-finite gradients.
    pub fn adam_step(
        &mut self,
        tape: &Tape,
        leaves: &[(String, TensorId)],
        lr: f64,
    ) -> Result<(), NnError> {
        self.adam_step_with(tape, leaves, lr, 0.9, 0.999, 1e-8)
    }

    pub fn adam_step_with(
        &mut self,
        tape: &Tape,
        leaves: &[(String, TensorId)],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<(), NnError> {
        for (name, id) in leaves {
            if tape.grad(*id).iter().any(|g| !g.is_finite()) {
                return Err(NnError::NonFinite(format!("gradient of {name}")));
            }
        }
        self.adam_t += 1;
        let t = self.adam_t as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, id) in leaves {
            let grads = tape.grad(*id).to_vec();
            let p = self.get_mut(name);
            for (i, g) in grads.into_iter().enumerate() {
                p.m[i] = beta1 * p.m[i] + (1.0 - beta1) * g;
                p.v[i] = beta2 * p.v[i] + (1.0 - beta2) * g * g;
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

const CHECKPOINT_VERSION: &str = "fleetsense-checkpoint-v1";

impl ParamStore {
    /// Write all parameters as named tensors with a shape header. Values
    /// are stored as hex-encoded IEEE-754 bits, so the round trip is
    /// bit-exact.
    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{CHECKPOINT_VERSION}")?;
        writeln!(f, "{}", self.order.len())?;
        for name in &self.order {
            let p = &self.params[name];
            writeln!(f, "{name} {} {}", p.rows, p.cols)?;
            for v in &p.data {
                writeln!(f, "{:016x}", v.to_bits())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> std::io::Result<ParamStore> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let bad = |msg: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string());
        if lines.next() != Some(CHECKPOINT_VERSION) {
            return Err(bad("unsupported checkpoint version"));
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.parse().ok())
            .ok_or_else(|| bad("missing tensor count"))?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let header = lines.next().ok_or_else(|| bad("truncated checkpoint"))?;
            let mut parts = header.split_whitespace();
            let name = parts.next().ok_or_else(|| bad("missing tensor name"))?;
            let rows: usize =
                parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad rows"))?;
            let cols: usize =
                parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad cols"))?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let line = lines.next().ok_or_else(|| bad("truncated tensor data"))?;
                let bits = u64::from_str_radix(line.trim(), 16).map_err(|_| bad("bad value"))?;
                data.push(f64::from_bits(bits));
            }
            store.insert(name, rows, cols, data);
        }
        Ok(store)
    }
}

/// One forward construction: the tape, the scalar loss node, and the leaf
/// ids of every parameter used.
pub struct Forward {
    pub tape: Tape,
    pub loss: TensorId,
    pub leaves: Vec<(String, TensorId)>,
}

/// Central-finite-difference gradient check. Returns the max over all
/// parameter coordinates of |analytic - numeric| / max(1e-8, |a| + |n|).
pub fn grad_check(
    store: &mut ParamStore,
    h: f64,
    build: impl Fn(&ParamStore) -> Forward,
) -> f64 {
    let mut fwd = build(store);
    fwd.tape.backward(fwd.loss);
    let analytic: Vec<(String, Vec<f64>)> = fwd
        .leaves
        .iter()
        .map(|(name, id)| (name.clone(), fwd.tape.grad(*id).to_vec()))
        .collect();

    let mut max_err: f64 = 0.0;
    for (name, grads) in &analytic {
        for i in 0..grads.len() {
            let orig = store.get(name).data[i];
            store.get_mut(name).data[i] = orig + h;
            let up = {
                let f = build(store);
                f.tape.scalar_value(f.loss)
            };
            store.get_mut(name).data[i] = orig - h;
            let down = {
                let f = build(store);
                f.tape.scalar_value(f.loss)
            };
            store.get_mut(name).data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grads[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            max_err = max_err.max(err);
        }
    }
    max_err
}

/// Three-layer fully connected network: widths [in, hidden, hidden, out],
/// tanh hidden activations, identity output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Mlp {
    pub fn declare(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Mlp {
        store.declare(&format!("{prefix}.w1"), input, hidden, rng);
        store.declare_zeros(&format!("{prefix}.b1"), 1, hidden);
        store.declare(&format!("{prefix}.w2"), hidden, hidden, rng);
        store.declare_zeros(&format!("{prefix}.b2"), 1, hidden);
        store.declare(&format!("{prefix}.w3"), hidden, output, rng);
        store.declare_zeros(&format!("{prefix}.b3"), 1, output);
        Mlp { prefix: prefix.to_string(), input, hidden, output }
    }

    pub fn param_names(&self) -> Vec<String> {
        ["w1", "b1", "w2", "b2", "w3", "b3"]
            .iter()
            .map(|s| format!("{}.{s}", self.prefix))
            .collect()
    }

    /// Forward pass over leaves already placed on the tape (name -> id).
    pub fn forward(
        &self,
        tape: &mut Tape,
        leaves: &std::collections::HashMap<String, TensorId>,
        x: TensorId,
    ) -> TensorId {
        let id = |n: &str| leaves[&format!("{}.{n}", self.prefix)];
        let h1 = tape.matmul(x, id("w1"));
        let h1 = tape.add_bias(h1, id("b1"));
        let h1 = tape.tanh(h1);
        let h2 = tape.matmul(h1, id("w2"));
        let h2 = tape.add_bias(h2, id("b2"));
        let h2 = tape.tanh(h2);
        let out = tape.matmul(h2, id("w3"));
        tape.add_bias(out, id("b3"))
    }
}

/// Place every parameter of `names` on the tape; returns both the lookup
/// map used by forward passes and the ordered leaf list used by Adam.
pub fn stage_params(
    store: &ParamStore,
    tape: &mut Tape,
    names: &[String],
) -> (std::collections::HashMap<String, TensorId>, Vec<(String, TensorId)>) {
    let mut map = std::collections::HashMap::new();
    let mut leaves = Vec::new();
    for name in names {
        let id = store.leaf(tape, name);
        map.insert(name.clone(), id);
        leaves.push((name.clone(), id));
    }
    (map, leaves)
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

use crate::error::{Error, Result};
use crate::geometry;

use super::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Value(usize);

impl Value {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Dense { input: Value, weight: Value, bias: Value },
    Relu { input: Value },
    Reshape { input: Value },
    MaxRows { input: Value, argmax: Vec<usize> },
    GroupMax { input: Value, argmax: Vec<usize> },
    GatherRows { input: Value, index: Vec<usize> },
    ConcatCols { a: Value, b: Value },
    ConcatRows { a: Value, b: Value },
    Add { a: Value, b: Value },
    Sub { a: Value, b: Value },
    Mul { a: Value, b: Value },
    Scale { input: Value, factor: f64 },
    Sum { input: Value },
    CrossEntropy { logits: Value, label: usize, softmax: Vec<f64> },
    CwMargin { logits: Value, label: usize, runner_up: usize, active: bool },
    ChamferTo { points: Value, target: Vec<f64>, nearest: Vec<usize> },
    KnnMean { points: Value, neighbors: Vec<usize>, k: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every op's inputs precede it.
/// The tape also folds every discrete branch it takes (ReLU masks, max-pool
/// winners, nearest-neighbour choices) into a running [`signature`], which
/// lets finite-difference checks detect when a probe crossed a kink.
///
/// [`signature`]: Tape::signature
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    signature: u64,
}

const MIX_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const MIX_MULT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Gradients of a scalar with respect to every node of the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn get(&self, v: Value) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Value) -> Vec<f64> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => vec![0.0; self.shapes[v.0].iter().product()],
        }
    }
}

fn dim_err(op: &'static str, detail: String) -> Error {
    Error::Dimension { op, detail }
}

/// `c (m×n) [+]= op(a) (m×k) · op(b) (k×n)`, row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    // a is m×k unless transposed (stored k×m); same for b.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: buffer sizes match the strides checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            signature: MIX_OFFSET,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every discrete decision taken so far.
    pub fn signature(&self) -> u64 {
        self.signature
    }

    fn mix(&mut self, word: u64) {
        let h = (self.signature ^ word).wrapping_mul(MIX_MULT);
        self.signature = h ^ (h >> 29);
    }

    fn mix_all(&mut self, words: impl IntoIterator<Item = u64>) {
        for w in words {
            self.mix(w);
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Value {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Value(self.nodes.len() - 1)
    }

    fn rg(&self, v: Value) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Value {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Value {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix_dims(&self, v: Value, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(dim_err(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// `input · weights + bias`, row by row.
    pub fn dense(&mut self, input: Value, weight: Value, bias: Value) -> Result<Value> {
        let (n, din) = self.matrix_dims(input, "dense")?;
        let (win, dout) = self.matrix_dims(weight, "dense")?;
        if win != din {
            return Err(dim_err(
                "dense",
                format!("input has {din} columns but weights have {win} rows"),
            ));
        }
        if self.shape(bias) != [dout] {
            return Err(dim_err(
                "dense",
                format!("bias shape {:?} != [{dout}]", self.shape(bias)),
            ));
        }
        let mut out = Vec::with_capacity(n * dout);
        let b = self.value(bias).data();
        for _ in 0..n {
            out.extend_from_slice(b);
        }
        gemm(
            n,
            din,
            dout,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            false,
            &mut out,
            true,
        );
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(vec![n, dout], out),
            Op::Dense {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Elementwise `max(x, 0)`; the derivative at exactly 0 is 0.
    pub fn relu(&mut self, input: Value) -> Value {
        let x = self.value(input);
        let shape = x.shape().to_vec();
        let data: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let mut word = 0u64;
        let mut words = Vec::with_capacity(data.len() / 64 + 1);
        for (i, &v) in data.iter().enumerate() {
            if v > 0.0 {
                word |= 1 << (i % 64);
            }
            if i % 64 == 63 {
                words.push(word);
                word = 0;
            }
        }
        words.push(word);
        self.mix_all(words);
        let rg = self.rg(input);
        self.push(Tensor::from_parts(shape, data), Op::Relu { input }, rg)
    }

    pub fn reshape(&mut self, input: Value, shape: &[usize]) -> Result<Value> {
        let x = self.value(input);
        if shape.iter().product::<usize>() != x.len() {
            return Err(dim_err(
                "reshape",
                format!("{:?} -> {:?}", x.shape(), shape),
            ));
        }
        let t = Tensor::from_parts(shape.to_vec(), x.data().to_vec());
        let rg = self.rg(input);
        Ok(self.push(t, Op::Reshape { input }, rg))
    }

    /// Column-wise max over the rows of an `N × d` matrix.
    ///
    /// Returns the pooled `d`-vector and, per channel, the lowest row index
    /// attaining the maximum. The backward pass routes each channel's
    /// gradient to that row only.
    pub fn max_over_points(&mut self, input: Value) -> Result<(Value, Vec<usize>)> {
        let (n, d) = self.matrix_dims(input, "max_over_points")?;
        if n == 0 {
            return Err(Error::Precondition("max_over_points on an empty matrix".into()));
        }
        let x = self.value(input).data();
        let mut pooled = x[..d].to_vec();
        let mut argmax = vec![0usize; d];
        for i in 1..n {
            let row = &x[i * d..(i + 1) * d];
            for j in 0..d {
                if row[j] > pooled[j] {
                    pooled[j] = row[j];
                    argmax[j] = i;
                }
            }
        }
        self.mix_all(argmax.iter().map(|&i| i as u64));
        let rg = self.rg(input);
        let v = self.push(
            Tensor::from_parts(vec![d], pooled),
            Op::MaxRows {
                input,
                argmax: argmax.clone(),
            },
            rg,
        );
        Ok((v, argmax))
    }

    /// Max over consecutive blocks of `group` rows: `(M·group) × d -> M × d`.
    pub fn group_max(&mut self, input: Value, group: usize) -> Result<Value> {
        let (rows, d) = self.matrix_dims(input, "group_max")?;
        if group == 0 || rows % group != 0 {
            return Err(dim_err(
                "group_max",
                format!("{rows} rows not divisible into groups of {group}"),
            ));
        }
        let m = rows / group;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(m * d);
        let mut argmax = Vec::with_capacity(m * d);
        for g in 0..m {
            let base = g * group;
            for j in 0..d {
                let mut best = x[base * d + j];
                let mut at = base;
                for r in base + 1..base + group {
                    let v = x[r * d + j];
                    if v > best {
                        best = v;
                        at = r;
                    }
                }
                out.push(best);
                argmax.push(at);
            }
        }
        self.mix_all(argmax.iter().map(|&i| i as u64));
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::from_parts(vec![m, d], out),
            Op::GroupMax { input, argmax },
            rg,
        ))
    }

    pub fn gather_rows(&mut self, input: Value, index: &[usize]) -> Result<Value> {
        let (n, d) = self.matrix_dims(input, "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                what: "gather_rows",
                index: bad,
                len: n,
            });
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            out.extend_from_slice(&x[i * d..(i + 1) * d]);
        }
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::from_parts(vec![index.len(), d], out),
            Op::GatherRows {
                input,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ra, ca) = self.matrix_dims(a, "concat_cols")?;
        let (rb, cb) = self.matrix_dims(b, "concat_cols")?;
        if ra != rb {
            return Err(dim_err("concat_cols", format!("{ra} rows vs {rb} rows")));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&xa[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&xb[i * cb..(i + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![ra, ca + cb], out),
            Op::ConcatCols { a, b },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ra, ca) = self.matrix_dims(a, "concat_rows")?;
        let (rb, cb) = self.matrix_dims(b, "concat_rows")?;
        if ca != cb {
            return Err(dim_err("concat_rows", format!("{ca} cols vs {cb} cols")));
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![ra + rb, ca], out),
            Op::ConcatRows { a, b },
            rg,
        ))
    }

    fn same_shape(&self, a: Value, b: Value, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Value, b: Value, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, op)?;
        let (xa, xb) = (self.value(a), self.value(b));
        let data = xa.data().iter().zip(xb.data()).map(|(&p, &q)| f(p, q)).collect();
        Ok(Tensor::from_parts(xa.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let t = self.zip(a, b, "add", |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        let t = self.zip(a, b, "sub", |p, q| p - q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        let t = self.zip(a, b, "mul", |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, input: Value, factor: f64) -> Value {
        let x = self.value(input);
        let t = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().map(|v| v * factor).collect(),
        );
        let rg = self.rg(input);
        self.push(t, Op::Scale { input, factor }, rg)
    }

    pub fn sum(&mut self, input: Value) -> Value {
        let s = self.value(input).data().iter().sum();
        let rg = self.rg(input);
        self.push(Tensor::from_parts(vec![], vec![s]), Op::Sum { input }, rg)
    }

    fn logits_vec(&self, logits: Value, op: &'static str) -> Result<Vec<f64>> {
        let t = self.value(logits);
        if t.shape().len() != 1 {
            return Err(dim_err(op, format!("logits must be a vector, got {:?}", t.shape())));
        }
        Ok(t.data().to_vec())
    }

    /// `-log softmax(logits)[label]` via a max-shifted log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Value, label: usize) -> Result<Value> {
        let z = self.logits_vec(logits, "cross_entropy")?;
        if label >= z.len() {
            return Err(Error::Index {
                what: "cross_entropy label",
                index: label,
                len: z.len(),
            });
        }
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let total: f64 = exps.iter().sum();
        let lse = m + total.ln();
        let softmax = exps.iter().map(|e| e / total).collect();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::from_parts(vec![], vec![lse - z[label]]),
            Op::CrossEntropy {
                logits,
                label,
                softmax,
            },
            rg,
        ))
    }

    /// Untargeted margin `max(z[y] - max_{j≠y} z[j], -kappa)`.
    pub fn cw_margin_loss(&mut self, logits: Value, label: usize, kappa: f64) -> Result<Value> {
        let z = self.logits_vec(logits, "cw_margin_loss")?;
        if z.len() < 2 {
            return Err(Error::Precondition(
                "cw_margin_loss needs at least two classes".into(),
            ));
        }
        if label >= z.len() {
            return Err(Error::Index {
                what: "cw_margin_loss label",
                index: label,
                len: z.len(),
            });
        }
        let mut runner_up = usize::MAX;
        for (j, &v) in z.iter().enumerate() {
            if j != label && (runner_up == usize::MAX || v > z[runner_up]) {
                runner_up = j;
            }
        }
        let margin = z[label] - z[runner_up];
        let active = margin > -kappa;
        self.mix_all([runner_up as u64, active as u64]);
        let out = margin.max(-kappa);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::from_parts(vec![], vec![out]),
            Op::CwMargin {
                logits,
                label,
                runner_up,
                active,
            },
            rg,
        ))
    }

    /// Mean over rows of `points` of the squared distance to the nearest row
    /// of the fixed `target` cloud. Both are flat `· × 3` coordinate lists.
    pub fn chamfer_to(&mut self, points: Value, target: &[f64]) -> Result<Value> {
        let (n, d) = self.matrix_dims(points, "chamfer_to")?;
        if d != 3 || !target.len().is_multiple_of(3) || target.is_empty() || n == 0 {
            return Err(dim_err(
                "chamfer_to",
                format!("need nonempty N×3 clouds, got {n}×{d} and {} values", target.len()),
            ));
        }
        let nn = geometry::nearest(self.value(points).data(), target);
        let mean = nn.iter().map(|&(_, d)| d).sum::<f64>() / n as f64;
        self.mix_all(nn.iter().map(|&(j, _)| j as u64));
        let rg = self.rg(points);
        Ok(self.push(
            Tensor::from_parts(vec![], vec![mean]),
            Op::ChamferTo {
                points,
                target: target.to_vec(),
                nearest: nn.into_iter().map(|(j, _)| j).collect(),
            },
            rg,
        ))
    }

    /// Mean Euclidean distance from each point to its `k` nearest neighbours
    /// within the same cloud. The neighbour graph is held constant.
    pub fn knn_mean_distance(&mut self, points: Value, k: usize) -> Result<Value> {
        let (n, d) = self.matrix_dims(points, "knn_mean_distance")?;
        if d != 3 {
            return Err(dim_err("knn_mean_distance", format!("need N×3, got {n}×{d}")));
        }
        if k == 0 || k >= n {
            return Err(Error::Precondition(format!(
                "knn_mean_distance needs 0 < k < N (k={k}, N={n})"
            )));
        }
        let x = self.value(points).data();
        let neighbors = geometry::knn(x, k);
        let mut total = 0.0;
        for i in 0..n {
            for &j in &neighbors[i * k..(i + 1) * k] {
                total += geometry::sq_dist(geometry::point(x, i), geometry::point(x, j)).sqrt();
            }
        }
        self.mix_all(neighbors.iter().map(|&j| j as u64));
        let rg = self.rg(points);
        Ok(self.push(
            Tensor::from_parts(vec![], vec![total / (n * k) as f64]),
            Op::KnnMean {
                points,
                neighbors,
                k,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Value) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Precondition(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            // Intermediate gradients are not kept; only leaves are queried.
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Value) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[v.0].value.len()]);
        }
        slot.as_mut()
    }

    fn add_into(&self, grads: &mut [Option<Vec<f64>>], v: Value, g: &[f64], factor: f64) {
        if let Some(dst) = self.accumulate(grads, v) {
            for (d, s) in dst.iter_mut().zip(g) {
                *d += factor * s;
            }
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (n, dout) = (node.value.shape()[0], node.value.shape()[1]);
                let din = self.value(*input).shape()[1];
                let w = self.value(*weight).data();
                let x = self.value(*input).data();
                if let Some(dx) = self.accumulate(grads, *input) {
                    // dX = dY · Wᵀ
                    gemm(n, dout, din, g, false, w, true, dx, true);
                }
                if let Some(dw) = self.accumulate(grads, *weight) {
                    // dW = Xᵀ · dY
                    gemm(din, n, dout, x, true, g, false, dw, true);
                }
                if let Some(db) = self.accumulate(grads, *bias) {
                    for row in g.chunks_exact(dout) {
                        for (d, s) in db.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Relu { input } => {
                let out = node.value.data();
                if let Some(dx) = self.accumulate(grads, *input) {
                    for ((d, &s), &o) in dx.iter_mut().zip(g).zip(out) {
                        if o > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            Op::Reshape { input } => self.add_into(grads, *input, g, 1.0),
            Op::MaxRows { input, argmax } => {
                let d = argmax.len();
                if let Some(dx) = self.accumulate(grads, *input) {
                    for (j, &i) in argmax.iter().enumerate() {
                        dx[i * d + j] += g[j];
                    }
                }
            }
            Op::GroupMax { input, argmax } => {
                let d = node.value.shape()[1];
                if let Some(dx) = self.accumulate(grads, *input) {
                    for (slot, &r) in argmax.iter().enumerate() {
                        dx[r * d + slot % d] += g[slot];
                    }
                }
            }
            Op::GatherRows { input, index } => {
                let d = node.value.shape()[1];
                if let Some(dx) = self.accumulate(grads, *input) {
                    for (r, &i) in index.iter().enumerate() {
                        for c in 0..d {
                            dx[i * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let ca = self.value(*a).shape()[1];
                let cb = self.value(*b).shape()[1];
                let rows = node.value.shape()[0];
                if let Some(da) = self.accumulate(grads, *a) {
                    for r in 0..rows {
                        for c in 0..ca {
                            da[r * ca + c] += g[r * (ca + cb) + c];
                        }
                    }
                }
                if let Some(db) = self.accumulate(grads, *b) {
                    for r in 0..rows {
                        for c in 0..cb {
                            db[r * cb + c] += g[r * (ca + cb) + ca + c];
                        }
                    }
                }
            }
            Op::ConcatRows { a, b } => {
                let na = self.value(*a).len();
                self.add_into(grads, *a, &g[..na], 1.0);
                self.add_into(grads, *b, &g[na..], 1.0);
            }
            Op::Add { a, b } => {
                self.add_into(grads, *a, g, 1.0);
                self.add_into(grads, *b, g, 1.0);
            }
            Op::Sub { a, b } => {
                self.add_into(grads, *a, g, 1.0);
                self.add_into(grads, *b, g, -1.0);
            }
            Op::Mul { a, b } => {
                let xa = self.value(*a).data().to_vec();
                let xb = self.value(*b).data().to_vec();
                let ga: Vec<f64> = g.iter().zip(&xb).map(|(s, v)| s * v).collect();
                let gb: Vec<f64> = g.iter().zip(&xa).map(|(s, v)| s * v).collect();
                self.add_into(grads, *a, &ga, 1.0);
                self.add_into(grads, *b, &gb, 1.0);
            }
            Op::Scale { input, factor } => self.add_into(grads, *input, g, *factor),
            Op::Sum { input } => {
                if let Some(dx) = self.accumulate(grads, *input) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                softmax,
            } => {
                if let Some(dz) = self.accumulate(grads, *logits) {
                    for (j, (d, p)) in dz.iter_mut().zip(softmax).enumerate() {
                        let onehot = if j == *label { 1.0 } else { 0.0 };
                        *d += g[0] * (p - onehot);
                    }
                }
            }
            Op::CwMargin {
                logits,
                label,
                runner_up,
                active,
            } => {
                if *active {
                    if let Some(dz) = self.accumulate(grads, *logits) {
                        dz[*label] += g[0];
                        dz[*runner_up] -= g[0];
                    }
                }
            }
            Op::ChamferTo {
                points,
                target,
                nearest,
            } => {
                let x = self.value(*points).data();
                let n = nearest.len() as f64;
                if let Some(dx) = self.accumulate(grads, *points) {
                    for (i, &j) in nearest.iter().enumerate() {
                        for c in 0..3 {
                            dx[3 * i + c] += g[0] * 2.0 * (x[3 * i + c] - target[3 * j + c]) / n;
                        }
                    }
                }
            }
            Op::KnnMean {
                points,
                neighbors,
                k,
            } => {
                let x = self.value(*points).data();
                let n = neighbors.len() / k;
                let coef = g[0] / (n * k) as f64;
                if let Some(dx) = self.accumulate(grads, *points) {
                    for i in 0..n {
                        for &j in &neighbors[i * k..(i + 1) * k] {
                            let d = geometry::sq_dist(geometry::point(x, i), geometry::point(x, j)).sqrt();
                            if d == 0.0 {
                                continue;
                            }
                            for c in 0..3 {
                                let u = coef * (x[3 * i + c] - x[3 * j + c]) / d;
                                dx[3 * i + c] += u;
                                dx[3 * j + c] -= u;
                            }
                        }
                    }
                }
            }
        }
    }
}

use rand::Rng;

use super::{matmul_raw, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mask {
        input: Var,
        mask: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    CosineRows {
        a: Var,
        b: Var,
        a_norm: Vec<f64>,
        b_norm: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        input: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run gradient tape.
///
/// Nodes are appended in execution order, so every node's parents precede
/// it. [`Tape::backward`] does not consume the recording: it can be called
/// again (gradients are recomputed from scratch each time) and the tape is
/// simply dropped when the step is over.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, `None` if the loss does
    /// not depend on it.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        let g = self.grads.get(var.0)?.as_ref()?;
        Some(Tensor {
            shape: self.shapes[var.0].clone(),
            data: g.clone(),
        })
    }

    /// Like [`Gradients::get`] but unreachable values get a zero gradient.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.get(var).unwrap_or_else(|| Tensor {
            shape: self.shapes[var.0].clone(),
            data: vec![0.0; self.shapes[var.0].iter().product()],
        })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: t.shape.clone(),
            rhs: vec![0, 0],
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients flow into it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Frozen leaf: treated as a constant by backward.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|&p| self.needs_grad(p));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_matrix("matmul", ta)?;
        let (k2, n) = require_matrix("matmul", tb)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let data = matmul_raw(&ta.data, &tb.data, m, k, n);
        self.push("matmul", Tensor { shape: vec![m, n], data }, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        require_matrix("transpose", t)?;
        let value = t.transpose();
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// Adds a `[n]` vector to every trailing row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rank() != 1 || tb.numel() != tx.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: tx.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let n = tb.numel();
        let data = tx
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data[i % n])
            .collect();
        let value = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        self.push("add_row", value, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v * factor).collect(),
        };
        self.push("scale", value, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| v.max(0.0)).collect(),
        };
        self.push("relu", value, Op::Relu(a), &[a])
    }

    /// Softmax along `axis`, max-subtracted for stability.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(TensorError::InvalidParameter(format!(
                "softmax axis {axis} for rank-{} tensor",
                t.rank()
            )));
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data: softmax_along(&t.data, &t.shape, axis),
        };
        self.push("softmax", value, Op::Softmax { input: a, axis }, &[a])
    }

    /// Normalizes each trailing row to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.shape != [d] || tb.shape != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape.clone(),
                rhs: tg.shape.clone(),
            });
        }
        let rows = tx.numel() / d;
        let mut normed = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                normed[r * d + j] = h;
                out[r * d + j] = h * tg.data[j] + tb.data[j];
            }
        }
        if !inv_std.iter().all(|v| v.is_finite()) || !normed.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "layer_norm" });
        }
        let value = Tensor {
            shape: tx.shape.clone(),
            data: out,
        };
        let op = Op::LayerNorm {
            input: x,
            gain,
            bias,
            normed,
            inv_std,
        };
        self.push("layer_norm", value, op, &[x, gain, bias])
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 - p)`. Outside
    /// training, or with `p == 0`, `x` is returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidParameter(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().zip(&mask).map(|(v, m)| v * m).collect(),
        };
        self.push("dropout", value, Op::Mask { input: x, mask }, &[x])
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (b, n) = require_matrix("cross_entropy", t)?;
        if targets.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: t.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&k| k >= n) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                bound: n,
            });
        }
        let probs = softmax_along(&t.data, &t.shape, 1);
        let mut total = 0.0;
        for (i, &k) in targets.iter().enumerate() {
            let row = &t.data[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[k];
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push("cross_entropy", Tensor::scalar(total / b as f64), op, &[logits])
    }

    /// Pairwise cosine similarity between the rows of `a` and `b`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, d) = require_matrix("cosine_rows", ta)?;
        let (n, d2) = require_matrix("cosine_rows", tb)?;
        if d != d2 {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_rows",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let a_norm = row_norms(ta, "lhs")?;
        let b_norm = row_norms(tb, "rhs")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ai = ta.row(i);
            for j in 0..n {
                let dot: f64 = ai.iter().zip(tb.row(j)).map(|(x, y)| x * y).sum();
                out[i * n + j] = dot / (a_norm[i] * b_norm[j]);
            }
        }
        let op = Op::CosineRows {
            a,
            b,
            a_norm,
            b_norm,
        };
        self.push("cosine_rows", Tensor { shape: vec![m, n], data: out }, op, &[a, b])
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidParameter("concat_rows of nothing".into()))?;
        let cols = require_matrix("concat_rows", self.value(*first))?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (r, c) = require_matrix("concat_rows", t)?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: t.shape.clone(),
                });
            }
            rows += r;
            data.extend_from_slice(&t.data);
        }
        let value = Tensor {
            shape: vec![rows, cols],
            data,
        };
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = require_matrix("slice_rows", t)?;
        if len == 0 || start + len > r {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: r,
            });
        }
        let value = Tensor {
            shape: vec![len, c],
            data: t.data[start * c..(start + len) * c].to_vec(),
        };
        self.push("slice_rows", value, Op::SliceRows { input: x, start }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data.iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |var: Var, contribution: Vec<f64>| {
            if self.needs_grad(var) {
                accumulate(&mut grads[var.0], contribution);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if self.needs_grad(*a) {
                    // g [m×n] · bᵀ [n×k]
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let bp = &tb.data[p * n..(p + 1) * n];
                            da[i * k + p] = gi.iter().zip(bp).map(|(x, y)| x * y).sum();
                        }
                    }
                    send(*a, da);
                }
                if self.needs_grad(*b) {
                    // aᵀ [k×m] · g [m×n]
                    send(*b, matmul_raw(&ta.transpose().data, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let s = &node.value.shape;
                let gt = Tensor {
                    shape: s.clone(),
                    data: g.to_vec(),
                };
                send(*a, gt.transpose().data);
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::AddRow(x, bias) => {
                let n = self.value(*bias).numel();
                let mut db = vec![0.0; n];
                for (i, v) in g.iter().enumerate() {
                    db[i % n] += v;
                }
                send(*x, g.to_vec());
                send(*bias, db);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                send(*a, g.iter().zip(&tb.data).map(|(x, y)| x * y).collect());
                send(*b, g.iter().zip(&ta.data).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, f) => send(*a, g.iter().map(|v| v * f).collect()),
            Op::Relu(a) => {
                let t = self.value(*a);
                send(
                    *a,
                    g.iter()
                        .zip(&t.data)
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::Softmax { input, axis } => {
                let y = &node.value.data;
                let (outer, len, inner) = lanes(&node.value.shape, *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let s: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = y[at(k)] * (g[at(k)] - s);
                        }
                    }
                }
                send(*input, dx);
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let tg = self.value(*gain);
                let d = tg.numel();
                let rows = normed.len() / d;
                let mut dx = vec![0.0; normed.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let span = r * d..(r + 1) * d;
                    let (gr, hr) = (&g[span.clone()], &normed[span]);
                    let dh: Vec<f64> = gr.iter().zip(&tg.data).map(|(a, b)| a * b).collect();
                    let mean_dh = dh.iter().sum::<f64>() / d as f64;
                    let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                }
                send(*input, dx);
                send(*gain, dgain);
                send(*bias, dbias);
            }
            Op::Mask { input, mask } => {
                send(*input, g.iter().zip(mask).map(|(a, b)| a * b).collect());
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let b = targets.len();
                let n = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &k) in targets.iter().enumerate() {
                    dl[i * n + k] -= scale;
                }
                send(*logits, dl);
            }
            Op::CosineRows {
                a,
                b,
                a_norm,
                b_norm,
            } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = &node.value.data;
                let (m, n, d) = (a_norm.len(), b_norm.len(), ta.cols());
                if self.needs_grad(*a) {
                    let mut da = vec![0.0; m * d];
                    for i in 0..m {
                        let ai = ta.row(i);
                        let dai = &mut da[i * d..(i + 1) * d];
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let u = gij / (a_norm[i] * b_norm[j]);
                            let w = gij * c[i * n + j] / (a_norm[i] * a_norm[i]);
                            for (k, slot) in dai.iter_mut().enumerate() {
                                *slot += u * tb.row(j)[k] - w * ai[k];
                            }
                        }
                    }
                    send(*a, da);
                }
                if self.needs_grad(*b) {
                    let mut db = vec![0.0; n * d];
                    for j in 0..n {
                        let bj = tb.row(j);
                        let dbj = &mut db[j * d..(j + 1) * d];
                        for i in 0..m {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let u = gij / (a_norm[i] * b_norm[j]);
                            let w = gij * c[i * n + j] / (b_norm[j] * b_norm[j]);
                            for (k, slot) in dbj.iter_mut().enumerate() {
                                *slot += u * ta.row(i)[k] - w * bj[k];
                            }
                        }
                    }
                    send(*b, db);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    send(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SliceRows { input, start } => {
                let t = self.value(*input);
                let c = t.cols();
                let mut dx = vec![0.0; t.numel()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                send(*input, dx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![g[0] / n as f64; n]);
            }
        }
    }
}

fn softmax_along(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = lanes(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| data[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (data[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[at(k)] /= total;
            }
        }
    }
    out
}

fn row_norms(t: &Tensor, operand: &'static str) -> Result<Vec<f64>> {
    (0..t.rows())
        .map(|i| {
            let n = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                Err(TensorError::SingularInput { operand, row: i })
            } else {
                Ok(n)
            }
        })
        .collect()
}

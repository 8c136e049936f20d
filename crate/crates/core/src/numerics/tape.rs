//! Single-use reverse-mode differentiation tape.
//!
//! Every kernel pushes one node; `backward` from a scalar root walks the
//! node list once in reverse, accumulating gradients by summing over all
//! paths. Inputs always precede outputs in the node list, so the reverse
//! sweep is a valid topological order.

use super::tensor::{matmul_raw, softmax_row_raw, Elem, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<E: Elem> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize, usize),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Softmax(Var),
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Mse {
        pred: Var,
        target: Tensor<E>,
    },
    CrossEntropyLogits {
        logits: Var,
        probs: Tensor<E>,
    },
    GatherLogSoftmax {
        logits: Var,
        ids: Vec<usize>,
    },
    CosineSim(Var, Var),
    Sum(Var),
    Mean(Var),
    Clamp(Var, f64, f64),
    MinElem(Var, Var),
}

struct Node<E: Elem> {
    value: Tensor<E>,
    grad: Option<Tensor<E>>,
    op: Op<E>,
}

pub struct Tape<E: Elem> {
    nodes: Vec<Node<E>>,
    consumed: bool,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, name: &'static str) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Register an input tensor. Leaves receive gradients on backward.
    pub fn leaf(&mut self, t: Tensor<E>) -> Var {
        self.nodes.push(Node {
            value: t,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant is just a leaf whose gradient the caller ignores.
    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.leaf(t)
    }

    fn check_same_shape(&self, a: Var, b: Var, context: &'static str) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                expected: self.shape(a).to_vec(),
                got: self.shape(b).to_vec(),
                context,
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check_same_shape(a, b, "add")?;
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check_same_shape(a, b, "sub")?;
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        self.push(t, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check_same_shape(a, b, "mul")?;
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        self.push(t, Op::Mul(a, b), "mul")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let cv = E::from_f64(c);
        let data = self.nodes[a.0].value.data.iter().map(|&x| x + cv).collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        self.push(t, Op::AddScalar(a), "add_scalar")
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let cv = E::from_f64(c);
        let data = self.nodes[a.0].value.data.iter().map(|&x| x * cv).collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        self.push(t, Op::MulScalar(a, c), "mul_scalar")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                expected: sa,
                got: sb,
                context: "matmul",
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, m, k, n);
        let t = Tensor {
            shape: vec![m, n],
            data,
        };
        self.push(t, Op::Matmul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Invalid("transpose expects 2D".into()));
        }
        let (r, c) = (s[0], s[1]);
        let src = &self.nodes[a.0].value.data;
        let mut data = vec![E::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor {
            shape: vec![c, r],
            data,
        };
        self.push(t, Op::Transpose(a), "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.nodes[a.0].value.numel() {
            return Err(TensorError::ShapeMismatch {
                expected: self.shape(a).to_vec(),
                got: shape,
                context: "reshape",
            });
        }
        let t = Tensor {
            shape,
            data: self.nodes[a.0].value.data.clone(),
        };
        self.push(t, Op::Reshape(a), "reshape")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat of zero parts".into()));
        }
        let cols = self.nodes[parts[0].0].value.rows_cols().1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.nodes[p.0].value.rows_cols();
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    expected: vec![r, cols],
                    got: vec![r, c],
                    context: "concat_rows",
                });
            }
            rows += r;
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        let t = Tensor {
            shape: vec![rows, cols],
            data,
        };
        self.push(t, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat of zero parts".into()));
        }
        let rows = self.nodes[parts[0].0].value.rows_cols().0;
        let mut total_cols = 0;
        for &p in parts {
            let (r, c) = self.nodes[p.0].value.rows_cols();
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    expected: vec![rows, c],
                    got: vec![r, c],
                    context: "concat_cols",
                });
            }
            total_cols += c;
        }
        let mut data = vec![E::zero(); rows * total_cols];
        let mut col_off = 0;
        for &p in parts {
            let (_, c) = self.nodes[p.0].value.rows_cols();
            let src = &self.nodes[p.0].value.data;
            for i in 0..rows {
                data[i * total_cols + col_off..i * total_cols + col_off + c]
                    .copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            col_off += c;
        }
        let t = Tensor {
            shape: vec![rows, total_cols],
            data,
        };
        self.push(t, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Result<Var, TensorError> {
        let (rows, cols) = self.nodes[a.0].value.rows_cols();
        if r0 >= r1 || r1 > rows {
            return Err(TensorError::Invalid(format!(
                "slice_rows {r0}..{r1} out of range for {rows} rows"
            )));
        }
        let data = self.nodes[a.0].value.data[r0 * cols..r1 * cols].to_vec();
        let t = Tensor {
            shape: vec![r1 - r0, cols],
            data,
        };
        self.push(t, Op::SliceRows(a, r0), "slice_rows")
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Result<Var, TensorError> {
        let (rows, cols) = self.nodes[a.0].value.rows_cols();
        if c0 >= c1 || c1 > cols {
            return Err(TensorError::Invalid(format!(
                "slice_cols {c0}..{c1} out of range for {cols} cols"
            )));
        }
        let src = &self.nodes[a.0].value.data;
        let w = c1 - c0;
        let mut data = vec![E::zero(); rows * w];
        for i in 0..rows {
            data[i * w..(i + 1) * w].copy_from_slice(&src[i * cols + c0..i * cols + c1]);
        }
        let t = Tensor {
            shape: vec![rows, w],
            data,
        };
        self.push(t, Op::SliceCols(a, c0, c1), "slice_cols")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let data = self.nodes[a.0].value.data.iter().map(|&x| x.exp()).collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        self.push(t, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        let data = self.nodes[a.0].value.data.iter().map(|&x| x.ln()).collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        self.push(t, Op::Log(a), "log")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .map(|&x| x.tanh())
            .collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        self.push(t, Op::Tanh(a), "tanh")
    }

    /// Softmax over the last axis (rows of the 2D view).
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let (rows, cols) = self.nodes[a.0].value.rows_cols();
        let mut data = self.nodes[a.0].value.data.clone();
        for i in 0..rows {
            softmax_row_raw(&mut data[i * cols..(i + 1) * cols]);
        }
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        self.push(t, Op::Softmax(a), "softmax")
    }

    /// Row `i` softmaxes over columns `0..=i`; later columns are zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != s[1] {
            return Err(TensorError::Invalid(
                "causal_softmax expects a square matrix".into(),
            ));
        }
        let n = s[0];
        let src = &self.nodes[a.0].value.data;
        let mut data = vec![E::zero(); n * n];
        for i in 0..n {
            data[i * n..i * n + i + 1].copy_from_slice(&src[i * n..i * n + i + 1]);
            softmax_row_raw(&mut data[i * n..i * n + i + 1]);
        }
        let t = Tensor { shape: s, data };
        self.push(t, Op::CausalSoftmax(a), "causal_softmax")
    }

    /// Per-row layer normalization with affine gain/bias (1D, length = cols).
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (rows, cols) = self.nodes[x.0].value.rows_cols();
        if self.nodes[gain.0].value.numel() != cols || self.nodes[bias.0].value.numel() != cols {
            return Err(TensorError::ShapeMismatch {
                expected: vec![cols],
                got: self.shape(gain).to_vec(),
                context: "layer_norm",
            });
        }
        let xs = &self.nodes[x.0].value.data;
        let g = &self.nodes[gain.0].value.data;
        let b = &self.nodes[bias.0].value.data;
        let mut data = vec![E::zero(); rows * cols];
        let inv_n = E::from_f64(1.0 / cols as f64);
        let epsv = E::from_f64(eps);
        for i in 0..rows {
            let row = &xs[i * cols..(i + 1) * cols];
            let mut mean = E::zero();
            for &v in row {
                mean += v;
            }
            mean = mean * inv_n;
            let mut var = E::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var * inv_n;
            let inv_std = E::one() / (var + epsv).sqrt();
            for j in 0..cols {
                let xhat = (row[j] - mean) * inv_std;
                data[i * cols + j] = g[j] * xhat + b[j];
            }
        }
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        self.push(t, Op::LayerNorm { x, gain, bias, eps }, "layer_norm")
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (vocab, dim) = self.nodes[table.0].value.rows_cols();
        let src = &self.nodes[table.0].value.data;
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Invalid(format!(
                    "gather id {id} out of range {vocab}"
                )));
            }
            data.extend_from_slice(&src[id * dim..(id + 1) * dim]);
        }
        let t = Tensor {
            shape: vec![ids.len(), dim],
            data,
        };
        self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            "gather",
        )
    }

    /// Mean squared error against a constant target, averaged over all elements.
    pub fn mse(&mut self, pred: Var, target: &Tensor<E>) -> Result<Var, TensorError> {
        if self.shape(pred) != target.shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                expected: self.shape(pred).to_vec(),
                got: target.shape.clone(),
                context: "mse",
            });
        }
        let n = target.numel() as f64;
        let mut acc = 0.0;
        for (&p, &t) in self.nodes[pred.0].value.data.iter().zip(&target.data) {
            let d = p.to_f64() - t.to_f64();
            acc += d * d;
        }
        let t = Tensor::scalar(acc / n);
        self.push(
            t,
            Op::Mse {
                pred,
                target: target.clone(),
            },
            "mse",
        )
    }

    /// Per-row cross-entropy of `logits` against constant probability rows:
    /// `-sum_j p_j * log_softmax(z)_j`. Output is a vector, one entry per row.
    pub fn cross_entropy_logits(
        &mut self,
        logits: Var,
        probs: &Tensor<E>,
    ) -> Result<Var, TensorError> {
        if self.shape(logits) != probs.shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                expected: self.shape(logits).to_vec(),
                got: probs.shape.clone(),
                context: "cross_entropy_logits",
            });
        }
        let (rows, cols) = self.nodes[logits.0].value.rows_cols();
        let zs = &self.nodes[logits.0].value.data;
        let mut out = vec![E::zero(); rows];
        for i in 0..rows {
            let row = &zs[i * cols..(i + 1) * cols];
            let mut m = row[0];
            for &v in row {
                m = m.max(v);
            }
            let mut lse = E::zero();
            for &v in row {
                lse += (v - m).exp();
            }
            let lse = lse.ln() + m;
            let mut ce = E::zero();
            for j in 0..cols {
                ce += probs.data[i * cols + j] * (lse - row[j]);
            }
            out[i] = ce;
        }
        let t = Tensor {
            shape: vec![rows],
            data: out,
        };
        self.push(
            t,
            Op::CrossEntropyLogits {
                logits,
                probs: probs.clone(),
            },
            "cross_entropy_logits",
        )
    }

    /// Per-row log-softmax probability of the selected id. Output is a vector.
    pub fn gather_log_softmax(&mut self, logits: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (rows, cols) = self.nodes[logits.0].value.rows_cols();
        if ids.len() != rows {
            return Err(TensorError::Invalid(format!(
                "gather_log_softmax: {} ids for {} rows",
                ids.len(),
                rows
            )));
        }
        let zs = &self.nodes[logits.0].value.data;
        let mut out = vec![E::zero(); rows];
        for i in 0..rows {
            if ids[i] >= cols {
                return Err(TensorError::Invalid(format!(
                    "gather_log_softmax id {} out of range {cols}",
                    ids[i]
                )));
            }
            let row = &zs[i * cols..(i + 1) * cols];
            let mut m = row[0];
            for &v in row {
                m = m.max(v);
            }
            let mut lse = E::zero();
            for &v in row {
                lse += (v - m).exp();
            }
            let lse = lse.ln() + m;
            out[i] = row[ids[i]] - lse;
        }
        let t = Tensor {
            shape: vec![rows],
            data: out,
        };
        self.push(
            t,
            Op::GatherLogSoftmax {
                logits,
                ids: ids.to_vec(),
            },
            "gather_log_softmax",
        )
    }

    /// Cosine similarity of two equal-length vectors.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check_same_shape(a, b, "cosine_sim")?;
        let na = self.nodes[a.0].value.l2_norm();
        let nb = self.nodes[b.0].value.l2_norm();
        if na == 0.0 || nb == 0.0 {
            return Err(TensorError::Invalid(
                "cosine_sim of zero-norm vector".into(),
            ));
        }
        let dot: f64 = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(&x, &y)| x.to_f64() * y.to_f64())
            .sum();
        let t = Tensor::scalar(dot / (na * nb));
        self.push(t, Op::CosineSim(a, b), "cosine_sim")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s: f64 = self.nodes[a.0].value.data.iter().map(|&v| v.to_f64()).sum();
        let t = Tensor::scalar(s);
        self.push(t, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.nodes[a.0].value.numel() as f64;
        let s: f64 = self.nodes[a.0].value.data.iter().map(|&v| v.to_f64()).sum();
        let t = Tensor::scalar(s / n);
        self.push(t, Op::Mean(a), "mean")
    }

    /// Clamp to `[lo, hi]`; gradient is zero where the input is clipped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        let (l, h) = (E::from_f64(lo), E::from_f64(hi));
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .map(|&x| x.max(l).min(h))
            .collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        self.push(t, Op::Clamp(a, lo, hi), "clamp")
    }

    /// Elementwise minimum; the gradient follows the selected branch
    /// (ties go to the first argument).
    pub fn min_elem(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check_same_shape(a, b, "min_elem")?;
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(&x, &y)| if x <= y { x } else { y })
            .collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        self.push(t, Op::MinElem(a, b), "min_elem")
    }

    fn acc_grad(&mut self, v: Var, delta: &[E]) {
        let node = &mut self.nodes[v.0];
        let grad = node
            .grad
            .get_or_insert_with(|| Tensor::zeros(node.value.shape.clone()));
        for (g, &d) in grad.data.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Reverse sweep from a scalar root. Consumes the tape: a second call
    /// is an error.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if !self.nodes[root.0].value.is_scalar() {
            return Err(TensorError::NonScalarRoot {
                shape: self.shape(root).to_vec(),
            });
        }
        self.consumed = true;
        self.nodes[root.0].grad = Some(Tensor {
            shape: self.nodes[root.0].value.shape.clone(),
            data: vec![E::one()],
        });
        for idx in (0..=root.0).rev() {
            let Some(out_grad) = self.nodes[idx].grad.clone() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            self.backprop_node(idx, &op, &out_grad)?;
        }
        Ok(())
    }

    fn backprop_node(
        &mut self,
        idx: usize,
        op: &Op<E>,
        og: &Tensor<E>,
    ) -> Result<(), TensorError> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_grad(*a, &og.data);
                self.acc_grad(*b, &og.data);
            }
            Op::Sub(a, b) => {
                self.acc_grad(*a, &og.data);
                let neg: Vec<E> = og.data.iter().map(|&g| -g).collect();
                self.acc_grad(*b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<E> = og
                    .data
                    .iter()
                    .zip(&self.nodes[b.0].value.data)
                    .map(|(&g, &y)| g * y)
                    .collect();
                let db: Vec<E> = og
                    .data
                    .iter()
                    .zip(&self.nodes[a.0].value.data)
                    .map(|(&g, &x)| g * x)
                    .collect();
                self.acc_grad(*a, &da);
                self.acc_grad(*b, &db);
            }
            Op::AddScalar(a) => self.acc_grad(*a, &og.data),
            Op::MulScalar(a, c) => {
                let cv = E::from_f64(*c);
                let da: Vec<E> = og.data.iter().map(|&g| g * cv).collect();
                self.acc_grad(*a, &da);
            }
            Op::Matmul(a, b) => {
                let (m, k) = {
                    let s = &self.nodes[a.0].value.shape;
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape[1];
                // dA = dC * B^T
                let bt = {
                    let bd = &self.nodes[b.0].value.data;
                    let mut t = vec![E::zero(); k * n];
                    for i in 0..k {
                        for j in 0..n {
                            t[j * k + i] = bd[i * n + j];
                        }
                    }
                    t
                };
                let da = matmul_raw(&og.data, &bt, m, n, k);
                // dB = A^T * dC
                let at = {
                    let ad = &self.nodes[a.0].value.data;
                    let mut t = vec![E::zero(); k * m];
                    for i in 0..m {
                        for j in 0..k {
                            t[j * m + i] = ad[i * k + j];
                        }
                    }
                    t
                };
                let db = matmul_raw(&at, &og.data, k, m, n);
                self.acc_grad(*a, &da);
                self.acc_grad(*b, &db);
            }
            Op::Transpose(a) => {
                let s = &self.nodes[a.0].value.shape;
                let (r, c) = (s[0], s[1]);
                let mut da = vec![E::zero(); r * c];
                for i in 0..c {
                    for j in 0..r {
                        da[j * c + i] = og.data[i * r + j];
                    }
                }
                self.acc_grad(*a, &da);
            }
            Op::Reshape(a) => self.acc_grad(*a, &og.data),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    let slice = og.data[off..off + n].to_vec();
                    self.acc_grad(p, &slice);
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.nodes[parts[0].0].value.rows_cols().0;
                let total_cols = og.numel() / rows;
                let mut col_off = 0;
                for &p in parts {
                    let (_, c) = self.nodes[p.0].value.rows_cols();
                    let mut dp = vec![E::zero(); rows * c];
                    for i in 0..rows {
                        dp[i * c..(i + 1) * c].copy_from_slice(
                            &og.data[i * total_cols + col_off..i * total_cols + col_off + c],
                        );
                    }
                    self.acc_grad(p, &dp);
                    col_off += c;
                }
            }
            Op::SliceRows(a, r0) => {
                let (_, cols) = self.nodes[a.0].value.rows_cols();
                let n_in = self.nodes[a.0].value.numel();
                let mut da = vec![E::zero(); n_in];
                da[r0 * cols..r0 * cols + og.numel()].copy_from_slice(&og.data);
                self.acc_grad(*a, &da);
            }
            Op::SliceCols(a, c0, c1) => {
                let (rows, cols) = self.nodes[a.0].value.rows_cols();
                let w = c1 - c0;
                let mut da = vec![E::zero(); rows * cols];
                for i in 0..rows {
                    da[i * cols + c0..i * cols + c1].copy_from_slice(&og.data[i * w..(i + 1) * w]);
                }
                self.acc_grad(*a, &da);
            }
            Op::Exp(a) => {
                let da: Vec<E> = og
                    .data
                    .iter()
                    .zip(&self.nodes[idx].value.data)
                    .map(|(&g, &y)| g * y)
                    .collect();
                self.acc_grad(*a, &da);
            }
            Op::Log(a) => {
                let da: Vec<E> = og
                    .data
                    .iter()
                    .zip(&self.nodes[a.0].value.data)
                    .map(|(&g, &x)| g / x)
                    .collect();
                self.acc_grad(*a, &da);
            }
            Op::Tanh(a) => {
                let da: Vec<E> = og
                    .data
                    .iter()
                    .zip(&self.nodes[idx].value.data)
                    .map(|(&g, &y)| g * (E::one() - y * y))
                    .collect();
                self.acc_grad(*a, &da);
            }
            Op::Softmax(a) => {
                let (rows, cols) = self.nodes[idx].value.rows_cols();
                let p = &self.nodes[idx].value.data;
                let mut da = vec![E::zero(); rows * cols];
                for i in 0..rows {
                    let mut dot = E::zero();
                    for j in 0..cols {
                        dot += p[i * cols + j] * og.data[i * cols + j];
                    }
                    for j in 0..cols {
                        da[i * cols + j] = p[i * cols + j] * (og.data[i * cols + j] - dot);
                    }
                }
                self.acc_grad(*a, &da);
            }
            Op::CausalSoftmax(a) => {
                let n = self.nodes[idx].value.shape[0];
                let p = &self.nodes[idx].value.data;
                let mut da = vec![E::zero(); n * n];
                for i in 0..n {
                    let mut dot = E::zero();
                    for j in 0..=i {
                        dot += p[i * n + j] * og.data[i * n + j];
                    }
                    for j in 0..=i {
                        da[i * n + j] = p[i * n + j] * (og.data[i * n + j] - dot);
                    }
                }
                self.acc_grad(*a, &da);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (rows, cols) = self.nodes[x.0].value.rows_cols();
                let xs = self.nodes[x.0].value.data.clone();
                let g = self.nodes[gain.0].value.data.clone();
                let inv_n = 1.0 / cols as f64;
                let mut dx = vec![E::zero(); rows * cols];
                let mut dgain = vec![E::zero(); cols];
                let mut dbias = vec![E::zero(); cols];
                for i in 0..rows {
                    let row: Vec<f64> =
                        xs[i * cols..(i + 1) * cols].iter().map(|v| v.to_f64()).collect();
                    let mean = row.iter().sum::<f64>() * inv_n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_n;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let dy: Vec<f64> = og.data[i * cols..(i + 1) * cols]
                        .iter()
                        .map(|v| v.to_f64())
                        .collect();
                    let gdy: Vec<f64> = dy
                        .iter()
                        .zip(&g)
                        .map(|(d, gv)| d * gv.to_f64())
                        .collect();
                    let mean_gdy = gdy.iter().sum::<f64>() * inv_n;
                    let mean_gdy_xhat = gdy
                        .iter()
                        .zip(&xhat)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        * inv_n;
                    for j in 0..cols {
                        dx[i * cols + j] = E::from_f64(
                            (gdy[j] - mean_gdy - xhat[j] * mean_gdy_xhat) * inv_std,
                        );
                        dgain[j] += E::from_f64(dy[j] * xhat[j]);
                        dbias[j] += E::from_f64(dy[j]);
                    }
                }
                self.acc_grad(*x, &dx);
                self.acc_grad(*gain, &dgain);
                self.acc_grad(*bias, &dbias);
            }
            Op::Gather { table, ids } => {
                let (vocab, dim) = self.nodes[table.0].value.rows_cols();
                let mut dt = vec![E::zero(); vocab * dim];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..dim {
                        dt[id * dim + j] += og.data[row * dim + j];
                    }
                }
                self.acc_grad(*table, &dt);
            }
            Op::Mse { pred, target } => {
                let n = target.numel() as f64;
                let scale = og.data[0].to_f64() * 2.0 / n;
                let dp: Vec<E> = self.nodes[pred.0]
                    .value
                    .data
                    .iter()
                    .zip(&target.data)
                    .map(|(&p, &t)| E::from_f64((p.to_f64() - t.to_f64()) * scale))
                    .collect();
                self.acc_grad(*pred, &dp);
            }
            Op::CrossEntropyLogits { logits, probs } => {
                let (rows, cols) = self.nodes[logits.0].value.rows_cols();
                let zs = self.nodes[logits.0].value.data.clone();
                let mut dz = vec![E::zero(); rows * cols];
                for i in 0..rows {
                    let mut sm: Vec<E> = zs[i * cols..(i + 1) * cols].to_vec();
                    softmax_row_raw(&mut sm);
                    let go = og.data[i];
                    for j in 0..cols {
                        dz[i * cols + j] = go * (sm[j] - probs.data[i * cols + j]);
                    }
                }
                self.acc_grad(*logits, &dz);
            }
            Op::GatherLogSoftmax { logits, ids } => {
                let (rows, cols) = self.nodes[logits.0].value.rows_cols();
                let zs = self.nodes[logits.0].value.data.clone();
                let mut dz = vec![E::zero(); rows * cols];
                for i in 0..rows {
                    let mut sm: Vec<E> = zs[i * cols..(i + 1) * cols].to_vec();
                    softmax_row_raw(&mut sm);
                    let go = og.data[i];
                    for j in 0..cols {
                        let onehot = if j == ids[i] { E::one() } else { E::zero() };
                        dz[i * cols + j] = go * (onehot - sm[j]);
                    }
                }
                self.acc_grad(*logits, &dz);
            }
            Op::CosineSim(a, b) => {
                let av = self.nodes[a.0].value.to_f64_vec();
                let bv = self.nodes[b.0].value.to_f64_vec();
                let na = self.nodes[a.0].value.l2_norm();
                let nb = self.nodes[b.0].value.l2_norm();
                let dot: f64 = av.iter().zip(&bv).map(|(x, y)| x * y).sum();
                let c = dot / (na * nb);
                let go = og.data[0].to_f64();
                let da: Vec<E> = av
                    .iter()
                    .zip(&bv)
                    .map(|(x, y)| E::from_f64(go * (y / (na * nb) - c * x / (na * na))))
                    .collect();
                let db: Vec<E> = av
                    .iter()
                    .zip(&bv)
                    .map(|(x, y)| E::from_f64(go * (x / (na * nb) - c * y / (nb * nb))))
                    .collect();
                self.acc_grad(*a, &da);
                self.acc_grad(*b, &db);
            }
            Op::Sum(a) => {
                let g = og.data[0];
                let da = vec![g; self.nodes[a.0].value.numel()];
                self.acc_grad(*a, &da);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                let g = og.data[0] * E::from_f64(1.0 / n as f64);
                let da = vec![g; n];
                self.acc_grad(*a, &da);
            }
            Op::Clamp(a, lo, hi) => {
                let (l, h) = (E::from_f64(*lo), E::from_f64(*hi));
                let da: Vec<E> = og
                    .data
                    .iter()
                    .zip(&self.nodes[a.0].value.data)
                    .map(|(&g, &x)| if x >= l && x <= h { g } else { E::zero() })
                    .collect();
                self.acc_grad(*a, &da);
            }
            Op::MinElem(a, b) => {
                let mut da = vec![E::zero(); og.numel()];
                let mut db = vec![E::zero(); og.numel()];
                for (j, &g) in og.data.iter().enumerate() {
                    let x = self.nodes[a.0].value.data[j];
                    let y = self.nodes[b.0].value.data[j];
                    if x <= y {
                        da[j] = g;
                    } else {
                        db[j] = g;
                    }
                }
                self.acc_grad(*a, &da);
                self.acc_grad(*b, &db);
            }
        }
        Ok(())
    }
}

/// Multi-head scaled dot-product attention over already-projected
/// `q`/`k`/`v` of shape `(len, dim)`. With `causal` set, position `i`
/// attends to positions `<= i`.
pub fn attention<E: Elem>(
    tape: &mut Tape<E>,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    causal: bool,
) -> Result<Var, TensorError> {
    let dim = tape.value(q).rows_cols().1;
    if dim % n_heads != 0 {
        return Err(TensorError::Invalid(format!(
            "width {dim} not divisible by {n_heads} heads"
        )));
    }
    let hd = dim / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (c0, c1) = (h * hd, (h + 1) * hd);
        let qh = tape.slice_cols(q, c0, c1)?;
        let kh = tape.slice_cols(k, c0, c1)?;
        let vh = tape.slice_cols(v, c0, c1)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.mul_scalar(scores, scale)?;
        let attn = if causal {
            tape.causal_softmax(scores)?
        } else {
            tape.softmax(scores)?
        };
        outs.push(tape.matmul(attn, vh)?);
    }
    tape.concat_cols(&outs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64_slice(vec![2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data, vec![1.0; 6]);
    }

    #[test]
    fn path_accumulation_x_times_x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64_slice(vec![3], &[1., 2., 3.]).unwrap());
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data, vec![2., 4., 6.]);
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_p() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::from_f64_slice(vec![1, 3], &[0.3, -0.2, 1.1]).unwrap());
        let p = Tensor::from_f64_slice(vec![1, 3], &[0.2, 0.5, 0.3]).unwrap();
        let ce = tape.cross_entropy_logits(z, &p).unwrap();
        let s = tape.sum(ce).unwrap();
        tape.backward(s).unwrap();
        let mut sm = vec![0.3, -0.2, 1.1];
        softmax_row_raw(&mut sm);
        let g = &tape.grad(z).unwrap().data;
        for j in 0..3 {
            assert!((g[j] - (sm[j] - p.data[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn second_backward_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64_slice(vec![2], &[1., 2.]).unwrap());
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn log_of_zero_surfaces_nonfinite() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64_slice(vec![1], &[0.0]).unwrap());
        assert!(matches!(
            tape.log(x),
            Err(TensorError::NonFinite { op: "log" })
        ));
    }

    #[test]
    fn concat_slice_partition_exact() {
        // Gradient of the whole reassembles from gradients of the parts.
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_f64_slice(vec![1, 2], &[1., 2.]).unwrap());
        let b = tape.leaf(Tensor::from_f64_slice(vec![2, 2], &[3., 4., 5., 6.]).unwrap());
        let cat = tape.concat_rows(&[a, b]).unwrap();
        let sq = tape.mul(cat, cat).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data, vec![2., 4.]);
        assert_eq!(tape.grad(b).unwrap().data, vec![6., 8., 10., 12.]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64_slice(vec![2, 4], &[1., -2., 0.5, 3., 0., 0., 0., 9.]).unwrap());
        let p = tape.softmax(x).unwrap();
        let v = tape.value(p);
        for i in 0..2 {
            let s: f64 = v.data[i * 4..(i + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every differentiable operation appends one node to the tape; inputs are
//! always earlier nodes, so a single reverse sweep applies the chain rule.
//! Gradients accumulate into the tape's persistent store: calling
//! [`Tape::backward`] twice without clearing doubles every gradient.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{ensure_finite, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// 1-D convolution padding scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    /// Zero padding on both sides; output length equals input length.
    Same,
    /// Zero padding on the left only; output at step t sees inputs <= t.
    Causal,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Row-broadcast add: lhs is (n, d), rhs has d elements.
    AddRow(Var, Var),
    /// Multiply by a compile-time constant.
    Scale(Var, f64),
    /// Add a compile-time constant.
    Shift(Var, f64),
    /// Multiply elementwise by a scalar (1-element) variable.
    ScaleVar(Var, Var),
    Matmul(Var, Var),
    /// a @ b^T without materializing the transpose.
    MatmulNT(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    SumAll(Var),
    SumAxis0(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    /// Replace flagged rows of `base` with the broadcast `fill` vector.
    MaskRows {
        base: Var,
        fill: Var,
        rows: Vec<bool>,
    },
    /// Elementwise multiply by a constant mask (dropout).
    MulMask(Var, Vec<f64>),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        pad: Pad,
    },
    /// Valid 2-D convolution, x: (C,H,W), w: (Co,C,kh,kw), b: (Co).
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    /// Global average over the spatial dims of (C,H,W).
    MeanPoolHw(Var),
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    op: Op,
    needs_grad: bool,
    /// Op-specific forward cache (layer norm keeps per-row mean and rstd).
    saved: Vec<f64>,
}

/// Wengert-list tape. One tape per forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    /// Accumulated gradient of a node, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].shape[0]
    }

    fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].shape[1]
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        values: Vec<f64>,
        op: Op,
        needs_grad: bool,
        saved: Vec<f64>,
    ) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        ensure_finite(op_name, &values)?;
        self.nodes.push(Node {
            shape,
            values,
            op,
            needs_grad,
            saved,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    fn check_2d(&self, op: &'static str, v: Var) -> Result<()> {
        if self.nodes[v.0].shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[v.0].shape.clone(),
                rhs: vec![],
            });
        }
        Ok(())
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Register an input node. `requires_grad` leaves receive gradients.
    pub fn leaf(&mut self, values: &[f64], shape: &[usize], requires_grad: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                lhs: shape.to_vec(),
                rhs: vec![values.len()],
            });
        }
        self.push(
            "leaf",
            shape.to_vec(),
            values.to_vec(),
            Op::Leaf,
            requires_grad,
            vec![],
        )
    }

    pub fn leaf_tensor(&mut self, t: &Tensor, requires_grad: bool) -> Result<Var> {
        self.leaf(t.values(), t.shape(), requires_grad)
    }

    pub fn constant(&mut self, values: &[f64], shape: &[usize]) -> Result<Var> {
        self.leaf(values, shape, false)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.leaf(&[value], &[1], false)
    }

    // ── Elementwise and broadcast arithmetic ─────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.nodes[a.0].shape.clone();
        self.push("add", shape, values, Op::Add(a, b), needs, vec![])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.nodes[a.0].shape.clone();
        self.push("sub", shape, values, Op::Sub(a, b), needs, vec![])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.nodes[a.0].shape.clone();
        self.push("mul", shape, values, Op::Mul(a, b), needs, vec![])
    }

    /// `a + b` where `a` is (n, d) and `b` has d elements, broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_2d("add_row", a)?;
        let (n, d) = (self.rows(a), self.cols(a));
        if self.nodes[b.0].values.len() != d {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut values = self.nodes[a.0].values.clone();
        for i in 0..n {
            for j in 0..d {
                values[i * d + j] += self.nodes[b.0].values[j];
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            "add_row",
            vec![n, d],
            values,
            Op::AddRow(a, b),
            needs,
            vec![],
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let values: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        let needs = self.needs(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push("scale", shape, values, Op::Scale(a, c), needs, vec![])
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        let values: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x + c).collect();
        let needs = self.needs(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push("shift", shape, values, Op::Shift(a, c), needs, vec![])
    }

    /// Multiply every element of `a` by the scalar variable `s`.
    pub fn scale_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].values.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scale_var",
                lhs: self.nodes[s.0].shape.clone(),
                rhs: vec![1],
            });
        }
        let sv = self.nodes[s.0].values[0];
        let values: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x * sv).collect();
        let needs = self.needs(a) || self.needs(s);
        let shape = self.nodes[a.0].shape.clone();
        self.push(
            "scale_var",
            shape,
            values,
            Op::ScaleVar(a, s),
            needs,
            vec![],
        )
    }

    // ── Matrix products ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_2d("matmul", a)?;
        self.check_2d("matmul", b)?;
        let (m, k) = (self.rows(a), self.cols(a));
        let (k2, n) = (self.rows(b), self.cols(b));
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let out = &mut values[i * n..(i + 1) * n];
                for j in 0..n {
                    out[j] += aip * brow[j];
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            "matmul",
            vec![m, n],
            values,
            Op::Matmul(a, b),
            needs,
            vec![],
        )
    }

    /// `a @ b^T` for a: (m, k), b: (n, k).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_2d("matmul_nt", a)?;
        self.check_2d("matmul_nt", b)?;
        let (m, k) = (self.rows(a), self.cols(a));
        let (n, k2) = (self.rows(b), self.cols(b));
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += av[i * k + p] * bv[j * k + p];
                }
                values[i * n + j] = acc;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            "matmul_nt",
            vec![m, n],
            values,
            Op::MatmulNT(a, b),
            needs,
            vec![],
        )
    }

    // ── Nonlinearities ───────────────────────────────────────────────

    /// Exact Gaussian-CDF GELU: x * Phi(x).
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| x * math::norm_cdf(x))
            .collect();
        let needs = self.needs(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push("gelu", shape, values, Op::Gelu(a), needs, vec![])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| math::sigmoid(x))
            .collect();
        let needs = self.needs(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push("sigmoid", shape, values, Op::Sigmoid(a), needs, vec![])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| math::tanh(x))
            .collect();
        let needs = self.needs(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push("tanh", shape, values, Op::Tanh(a), needs, vec![])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let values: Vec<f64> = self.nodes[a.0].values.iter().map(|&x| math::exp(x)).collect();
        let needs = self.needs(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push("exp", shape, values, Op::Exp(a), needs, vec![])
    }

    /// Natural log; errors on non-positive input.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].values.iter().any(|&x| x <= 0.0) {
            return Err(Error::NonFinite { op: "ln" });
        }
        let values: Vec<f64> = self.nodes[a.0].values.iter().map(|&x| math::ln(x)).collect();
        let needs = self.needs(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push("ln", shape, values, Op::Ln(a), needs, vec![])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| math::softplus(x))
            .collect();
        let needs = self.needs(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push("softplus", shape, values, Op::Softplus(a), needs, vec![])
    }

    /// Row-wise softmax of a 2-D tensor; each output row sums to 1.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check_2d("softmax_rows", a)?;
        let (n, d) = (self.rows(a), self.cols(a));
        let av = &self.nodes[a.0].values;
        let mut values = vec![0.0; n * d];
        for i in 0..n {
            let row = &av[i * d..(i + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..d {
                let e = math::exp(row[j] - m);
                values[i * d + j] = e;
                z += e;
            }
            for j in 0..d {
                values[i * d + j] /= z;
            }
        }
        let needs = self.needs(a);
        self.push(
            "softmax_rows",
            vec![n, d],
            values,
            Op::SoftmaxRows(a),
            needs,
            vec![],
        )
    }

    /// Layer normalization over the last axis with affine gain/bias.
    ///
    /// Uses population variance. With `eps == 0` a zero-variance row is an
    /// error; the conventional default is `eps = 1e-5`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.check_2d("layer_norm", x)?;
        let (n, d) = (self.rows(x), self.cols(x));
        if self.nodes[gain.0].values.len() != d || self.nodes[bias.0].values.len() != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![n, d],
                rhs: self.nodes[gain.0].shape.clone(),
            });
        }
        let xv = &self.nodes[x.0].values;
        let gv = &self.nodes[gain.0].values;
        let bv = &self.nodes[bias.0].values;
        let mut values = vec![0.0; n * d];
        let mut saved = vec![0.0; 2 * n]; // per row: mean, rstd
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            if var + eps <= 0.0 {
                return Err(Error::NonFinite { op: "layer_norm" });
            }
            let rstd = 1.0 / math::sqrt(var + eps);
            saved[2 * i] = mean;
            saved[2 * i + 1] = rstd;
            for j in 0..d {
                values[i * d + j] = gv[j] * (row[j] - mean) * rstd + bv[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            "layer_norm",
            vec![n, d],
            values,
            Op::LayerNorm { x, gain, bias },
            needs,
            saved,
        )
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].values.iter().sum();
        let needs = self.needs(a);
        self.push("sum_all", vec![1], vec![s], Op::SumAll(a), needs, vec![])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].values.len();
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Column sums of a 2-D tensor: (n, d) -> (d).
    pub fn sum_axis0(&mut self, a: Var) -> Result<Var> {
        self.check_2d("sum_axis0", a)?;
        let (n, d) = (self.rows(a), self.cols(a));
        let av = &self.nodes[a.0].values;
        let mut values = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                values[j] += av[i * d + j];
            }
        }
        let needs = self.needs(a);
        self.push("sum_axis0", vec![d], values, Op::SumAxis0(a), needs, vec![])
    }

    // ── Slicing and concatenation ────────────────────────────────────

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Result<Var> {
        self.check_2d("slice_rows", a)?;
        let (n, d) = (self.rows(a), self.cols(a));
        if r0 >= r1 || r1 > n {
            return Err(Error::Invalid(alloc::format!(
                "slice_rows: range {r0}..{r1} out of bounds for {n} rows"
            )));
        }
        let values = self.nodes[a.0].values[r0 * d..r1 * d].to_vec();
        let needs = self.needs(a);
        self.push(
            "slice_rows",
            vec![r1 - r0, d],
            values,
            Op::SliceRows(a, r0),
            needs,
            vec![],
        )
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Result<Var> {
        self.check_2d("slice_cols", a)?;
        let (n, d) = (self.rows(a), self.cols(a));
        if c0 >= c1 || c1 > d {
            return Err(Error::Invalid(alloc::format!(
                "slice_cols: range {c0}..{c1} out of bounds for {d} cols"
            )));
        }
        let w = c1 - c0;
        let av = &self.nodes[a.0].values;
        let mut values = vec![0.0; n * w];
        for i in 0..n {
            values[i * w..(i + 1) * w].copy_from_slice(&av[i * d + c0..i * d + c1]);
        }
        let needs = self.needs(a);
        self.push(
            "slice_cols",
            vec![n, w],
            values,
            Op::SliceCols(a, c0, c1),
            needs,
            vec![],
        )
    }

    /// Concatenate 2-D tensors along axis 0. All must share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat_rows: empty input".into()));
        }
        self.check_2d("concat_rows", parts[0])?;
        let d = self.cols(parts[0]);
        let mut n = 0;
        for &p in parts {
            self.check_2d("concat_rows", p)?;
            if self.cols(p) != d {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            n += self.rows(p);
        }
        let mut values = Vec::with_capacity(n * d);
        for &p in parts {
            values.extend_from_slice(&self.nodes[p.0].values);
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            "concat_rows",
            vec![n, d],
            values,
            Op::ConcatRows(parts.to_vec()),
            needs,
            vec![],
        )
    }

    /// Concatenate 2-D tensors along axis 1. All must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat_cols: empty input".into()));
        }
        self.check_2d("concat_cols", parts[0])?;
        let n = self.rows(parts[0]);
        let mut d = 0;
        for &p in parts {
            self.check_2d("concat_cols", p)?;
            if self.rows(p) != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            d += self.cols(p);
        }
        let mut values = vec![0.0; n * d];
        let mut off = 0;
        for &p in parts {
            let w = self.cols(p);
            let pv = &self.nodes[p.0].values;
            for i in 0..n {
                values[i * d + off..i * d + off + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            "concat_cols",
            vec![n, d],
            values,
            Op::ConcatCols(parts.to_vec()),
            needs,
            vec![],
        )
    }

    /// Replace rows of `base` flagged in `rows` with the vector `fill`.
    /// Gradient flows to `base` on unmasked rows and to `fill` on masked ones;
    /// the original values of masked rows are unreachable by construction.
    pub fn mask_rows(&mut self, base: Var, fill: Var, rows: &[bool]) -> Result<Var> {
        self.check_2d("mask_rows", base)?;
        let (n, d) = (self.rows(base), self.cols(base));
        if rows.len() != n || self.nodes[fill.0].values.len() != d {
            return Err(Error::ShapeMismatch {
                op: "mask_rows",
                lhs: vec![n, d],
                rhs: vec![rows.len(), self.nodes[fill.0].values.len()],
            });
        }
        let mut values = self.nodes[base.0].values.clone();
        let fv = &self.nodes[fill.0].values;
        for (i, &m) in rows.iter().enumerate() {
            if m {
                values[i * d..(i + 1) * d].copy_from_slice(fv);
            }
        }
        let needs = self.needs(base) || self.needs(fill);
        self.push(
            "mask_rows",
            vec![n, d],
            values,
            Op::MaskRows {
                base,
                fill,
                rows: rows.to_vec(),
            },
            needs,
            vec![],
        )
    }

    /// Elementwise multiply by a constant mask of the same length.
    pub fn mul_mask(&mut self, a: Var, mask: &[f64]) -> Result<Var> {
        if mask.len() != self.nodes[a.0].values.len() {
            return Err(Error::ShapeMismatch {
                op: "mul_mask",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(mask)
            .map(|(x, m)| x * m)
            .collect();
        let needs = self.needs(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push(
            "mul_mask",
            shape,
            values,
            Op::MulMask(a, mask.to_vec()),
            needs,
            vec![],
        )
    }

    // ── Convolutions ─────────────────────────────────────────────────

    /// 1-D convolution over time. x: (T, Cin), w: (K, Cin, Cout), b: (Cout).
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, pad: Pad) -> Result<Var> {
        self.check_2d("conv1d", x)?;
        let wsh = self.nodes[w.0].shape.clone();
        if wsh.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: wsh,
                rhs: vec![],
            });
        }
        let (t_len, cin) = (self.rows(x), self.cols(x));
        let (k, wcin, cout) = (wsh[0], wsh[1], wsh[2]);
        if wcin != cin || self.nodes[b.0].values.len() != cout {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: vec![t_len, cin],
                rhs: wsh,
            });
        }
        if matches!(pad, Pad::Same) && k % 2 == 0 {
            return Err(Error::Invalid("conv1d: same padding needs odd kernel".into()));
        }
        let xv = &self.nodes[x.0].values;
        let wv = &self.nodes[w.0].values;
        let bv = &self.nodes[b.0].values;
        let mut values = vec![0.0; t_len * cout];
        for t in 0..t_len {
            for co in 0..cout {
                let mut acc = bv[co];
                for kk in 0..k {
                    let s = match pad {
                        Pad::Same => t as isize + kk as isize - (k / 2) as isize,
                        Pad::Causal => t as isize - kk as isize,
                    };
                    if s < 0 || s >= t_len as isize {
                        continue;
                    }
                    let s = s as usize;
                    for ci in 0..cin {
                        acc += wv[(kk * cin + ci) * cout + co] * xv[s * cin + ci];
                    }
                }
                values[t * cout + co] = acc;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            "conv1d",
            vec![t_len, cout],
            values,
            Op::Conv1d { x, w, b, pad },
            needs,
            vec![],
        )
    }

    /// Valid 2-D convolution. x: (C, H, W), w: (Co, C, kh, kw), b: (Co).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xsh = self.nodes[x.0].shape.clone();
        let wsh = self.nodes[w.0].shape.clone();
        if xsh.len() != 3 || wsh.len() != 4 || wsh[1] != xsh[0] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xsh,
                rhs: wsh,
            });
        }
        let (c, h, wid) = (xsh[0], xsh[1], xsh[2]);
        let (co, _, kh, kw) = (wsh[0], wsh[1], wsh[2], wsh[3]);
        if h < kh || wid < kw || self.nodes[b.0].values.len() != co {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xsh,
                rhs: wsh,
            });
        }
        let (oh, ow) = (h - kh + 1, wid - kw + 1);
        let xv = &self.nodes[x.0].values;
        let wv = &self.nodes[w.0].values;
        let bv = &self.nodes[b.0].values;
        let mut values = vec![0.0; co * oh * ow];
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bv[o];
                    for ci in 0..c {
                        for di in 0..kh {
                            for dj in 0..kw {
                                acc += wv[((o * c + ci) * kh + di) * kw + dj]
                                    * xv[(ci * h + i + di) * wid + j + dj];
                            }
                        }
                    }
                    values[(o * oh + i) * ow + j] = acc;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            "conv2d",
            vec![co, oh, ow],
            values,
            Op::Conv2d { x, w, b },
            needs,
            vec![],
        )
    }

    /// Global average pool over spatial dims: (C, H, W) -> (C).
    pub fn mean_pool_hw(&mut self, x: Var) -> Result<Var> {
        let xsh = self.nodes[x.0].shape.clone();
        if xsh.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "mean_pool_hw",
                lhs: xsh,
                rhs: vec![],
            });
        }
        let (c, h, w) = (xsh[0], xsh[1], xsh[2]);
        let xv = &self.nodes[x.0].values;
        let mut values = vec![0.0; c];
        for ci in 0..c {
            values[ci] = xv[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
        }
        let needs = self.needs(x);
        self.push(
            "mean_pool_hw",
            vec![c],
            values,
            Op::MeanPoolHw(x),
            needs,
            vec![],
        )
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Visits every recorded op exactly
    /// once in reverse order and adds the resulting gradients into the
    /// tape's persistent per-node accumulators.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::Invalid(alloc::format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].values[0].is_finite() {
            return Err(Error::NonFinite { op: "backward" });
        }

        // Fresh buffers per call; accumulated into the persistent store at
        // the end so repeated backward calls sum their contributions.
        let mut tmp: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        tmp[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let g = match tmp[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].needs_grad {
                tmp[id] = Some(g);
                continue;
            }
            let op = self.nodes[id].op.clone();
            self.propagate(id, &g, &op, &mut tmp);
            tmp[id] = Some(g);
        }

        for (slot, t) in self.grads.iter_mut().zip(tmp.into_iter()) {
            if let Some(t) = t {
                match slot {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&t) {
                            *a += b;
                        }
                    }
                    None => *slot = Some(t),
                }
            }
        }
        Ok(())
    }

    fn add_into(tmp: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
        if !nodes[v.0].needs_grad {
            return;
        }
        let slot = tmp[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].values.len()]);
        f(slot);
    }

    fn propagate(&self, id: usize, g: &[f64], op: &Op, tmp: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::add_into(tmp, nodes, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                Self::add_into(tmp, nodes, *b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Sub(a, b) => {
                Self::add_into(tmp, nodes, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                Self::add_into(tmp, nodes, *b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.0].values;
                let bv = &nodes[b.0].values;
                Self::add_into(tmp, nodes, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                Self::add_into(tmp, nodes, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, b) => {
                let d = nodes[b.0].values.len();
                Self::add_into(tmp, nodes, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                Self::add_into(tmp, nodes, *b, |gb| {
                    for (i, y) in g.iter().enumerate() {
                        gb[i % d] += y;
                    }
                });
            }
            Op::Scale(a, c) => {
                Self::add_into(tmp, nodes, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += c * y;
                    }
                });
            }
            Op::Shift(a, _) => {
                Self::add_into(tmp, nodes, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::ScaleVar(a, s) => {
                let sv = nodes[s.0].values[0];
                let av = &nodes[a.0].values;
                Self::add_into(tmp, nodes, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += sv * y;
                    }
                });
                Self::add_into(tmp, nodes, *s, |gs| {
                    gs[0] += g.iter().zip(av).map(|(y, x)| y * x).sum::<f64>();
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let av = &nodes[a.0].values;
                let bv = &nodes[b.0].values;
                // gA = G @ B^T
                Self::add_into(tmp, nodes, *a, |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] += acc;
                        }
                    }
                });
                // gB = A^T @ G
                Self::add_into(tmp, nodes, *b, |gb| {
                    for p in 0..k {
                        for i in 0..m {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::MatmulNT(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[0];
                let av = &nodes[a.0].values;
                let bv = &nodes[b.0].values;
                // out = A @ B^T, so gA = G @ B and gB = G^T @ A.
                Self::add_into(tmp, nodes, *a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[i * k + p] += gij * bv[j * k + p];
                            }
                        }
                    }
                });
                Self::add_into(tmp, nodes, *b, |gb| {
                    for j in 0..n {
                        for i in 0..m {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                gb[j * k + p] += gij * av[i * k + p];
                            }
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let av = &nodes[a.0].values;
                Self::add_into(tmp, nodes, *a, |ga| {
                    for i in 0..ga.len() {
                        let x = av[i];
                        ga[i] += g[i] * (math::norm_cdf(x) + x * math::norm_pdf(x));
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = &nodes[id].values;
                Self::add_into(tmp, nodes, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * yv[i] * (1.0 - yv[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let yv = &nodes[id].values;
                Self::add_into(tmp, nodes, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * (1.0 - yv[i] * yv[i]);
                    }
                });
            }
            Op::Exp(a) => {
                let yv = &nodes[id].values;
                Self::add_into(tmp, nodes, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * yv[i];
                    }
                });
            }
            Op::Ln(a) => {
                let av = &nodes[a.0].values;
                Self::add_into(tmp, nodes, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / av[i];
                    }
                });
            }
            Op::Softplus(a) => {
                let av = &nodes[a.0].values;
                Self::add_into(tmp, nodes, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * math::sigmoid(av[i]);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (n, d) = (nodes[id].shape[0], nodes[id].shape[1]);
                let yv = &nodes[id].values;
                Self::add_into(tmp, nodes, *a, |ga| {
                    for i in 0..n {
                        let y = &yv[i * d..(i + 1) * d];
                        let gr = &g[i * d..(i + 1) * d];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            ga[i * d + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                let (n, d) = (nodes[id].shape[0], nodes[id].shape[1]);
                let xv = &nodes[x.0].values;
                let gv = &nodes[gain.0].values;
                let saved = &nodes[id].saved;
                Self::add_into(tmp, nodes, *x, |gx| {
                    for i in 0..n {
                        let mean = saved[2 * i];
                        let rstd = saved[2 * i + 1];
                        let gr = &g[i * d..(i + 1) * d];
                        let mut sum_gy = 0.0;
                        let mut sum_gy_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (xv[i * d + j] - mean) * rstd;
                            let gy = gr[j] * gv[j];
                            sum_gy += gy;
                            sum_gy_xhat += gy * xhat;
                        }
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            let xhat = (xv[i * d + j] - mean) * rstd;
                            let gy = gr[j] * gv[j];
                            gx[i * d + j] +=
                                rstd * (gy - inv_d * sum_gy - xhat * inv_d * sum_gy_xhat);
                        }
                    }
                });
                Self::add_into(tmp, nodes, *gain, |gg| {
                    for i in 0..n {
                        let mean = saved[2 * i];
                        let rstd = saved[2 * i + 1];
                        for j in 0..d {
                            let xhat = (xv[i * d + j] - mean) * rstd;
                            gg[j] += g[i * d + j] * xhat;
                        }
                    }
                });
                Self::add_into(tmp, nodes, *bias, |gb| {
                    for i in 0..n {
                        for j in 0..d {
                            gb[j] += g[i * d + j];
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let gs = g[0];
                Self::add_into(tmp, nodes, *a, |ga| {
                    for x in ga.iter_mut() {
                        *x += gs;
                    }
                });
            }
            Op::SumAxis0(a) => {
                let d = nodes[id].values.len();
                Self::add_into(tmp, nodes, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i % d];
                    }
                });
            }
            Op::SliceRows(a, r0) => {
                let d = nodes[a.0].shape[1];
                let off = r0 * d;
                Self::add_into(tmp, nodes, *a, |ga| {
                    for (i, y) in g.iter().enumerate() {
                        ga[off + i] += y;
                    }
                });
            }
            Op::SliceCols(a, c0, c1) => {
                let d = nodes[a.0].shape[1];
                let w = c1 - c0;
                let n = nodes[a.0].shape[0];
                Self::add_into(tmp, nodes, *a, |ga| {
                    for i in 0..n {
                        for j in 0..w {
                            ga[i * d + c0 + j] += g[i * w + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].values.len();
                    let seg = &g[off..off + len];
                    Self::add_into(tmp, nodes, p, |gp| {
                        for (x, y) in gp.iter_mut().zip(seg) {
                            *x += y;
                        }
                    });
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = nodes[id].shape[0];
                let d = nodes[id].shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].shape[1];
                    Self::add_into(tmp, nodes, p, |gp| {
                        for i in 0..n {
                            for j in 0..w {
                                gp[i * w + j] += g[i * d + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::MaskRows { base, fill, rows } => {
                let d = nodes[base.0].shape[1];
                Self::add_into(tmp, nodes, *base, |gb| {
                    for (i, &m) in rows.iter().enumerate() {
                        if !m {
                            for j in 0..d {
                                gb[i * d + j] += g[i * d + j];
                            }
                        }
                    }
                });
                Self::add_into(tmp, nodes, *fill, |gf| {
                    for (i, &m) in rows.iter().enumerate() {
                        if m {
                            for j in 0..d {
                                gf[j] += g[i * d + j];
                            }
                        }
                    }
                });
            }
            Op::MulMask(a, mask) => {
                Self::add_into(tmp, nodes, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * mask[i];
                    }
                });
            }
            Op::Conv1d { x, w, b, pad } => {
                let (t_len, cin) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let (k, cout) = (nodes[w.0].shape[0], nodes[w.0].shape[2]);
                let xv = &nodes[x.0].values;
                let wv = &nodes[w.0].values;
                let src = |t: usize, kk: usize| -> Option<usize> {
                    let s = match pad {
                        Pad::Same => t as isize + kk as isize - (k / 2) as isize,
                        Pad::Causal => t as isize - kk as isize,
                    };
                    if s < 0 || s >= t_len as isize {
                        None
                    } else {
                        Some(s as usize)
                    }
                };
                Self::add_into(tmp, nodes, *x, |gx| {
                    for t in 0..t_len {
                        for co in 0..cout {
                            let gt = g[t * cout + co];
                            if gt == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                if let Some(s) = src(t, kk) {
                                    for ci in 0..cin {
                                        gx[s * cin + ci] += gt * wv[(kk * cin + ci) * cout + co];
                                    }
                                }
                            }
                        }
                    }
                });
                Self::add_into(tmp, nodes, *w, |gw| {
                    for t in 0..t_len {
                        for co in 0..cout {
                            let gt = g[t * cout + co];
                            if gt == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                if let Some(s) = src(t, kk) {
                                    for ci in 0..cin {
                                        gw[(kk * cin + ci) * cout + co] += gt * xv[s * cin + ci];
                                    }
                                }
                            }
                        }
                    }
                });
                Self::add_into(tmp, nodes, *b, |gb| {
                    for t in 0..t_len {
                        for co in 0..cout {
                            gb[co] += g[t * cout + co];
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b } => {
                let xsh = &nodes[x.0].shape;
                let wsh = &nodes[w.0].shape;
                let (c, h, wid) = (xsh[0], xsh[1], xsh[2]);
                let (co, kh, kw) = (wsh[0], wsh[2], wsh[3]);
                let (oh, ow) = (h - kh + 1, wid - kw + 1);
                let xv = &nodes[x.0].values;
                let wv = &nodes[w.0].values;
                Self::add_into(tmp, nodes, *x, |gx| {
                    for o in 0..co {
                        for i in 0..oh {
                            for j in 0..ow {
                                let go = g[(o * oh + i) * ow + j];
                                if go == 0.0 {
                                    continue;
                                }
                                for ci in 0..c {
                                    for di in 0..kh {
                                        for dj in 0..kw {
                                            gx[(ci * h + i + di) * wid + j + dj] +=
                                                go * wv[((o * c + ci) * kh + di) * kw + dj];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                Self::add_into(tmp, nodes, *w, |gw| {
                    for o in 0..co {
                        for i in 0..oh {
                            for j in 0..ow {
                                let go = g[(o * oh + i) * ow + j];
                                if go == 0.0 {
                                    continue;
                                }
                                for ci in 0..c {
                                    for di in 0..kh {
                                        for dj in 0..kw {
                                            gw[((o * c + ci) * kh + di) * kw + dj] +=
                                                go * xv[(ci * h + i + di) * wid + j + dj];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                Self::add_into(tmp, nodes, *b, |gb| {
                    for o in 0..co {
                        for i in 0..oh {
                            for j in 0..ow {
                                gb[o] += g[(o * oh + i) * ow + j];
                            }
                        }
                    }
                });
            }
            Op::MeanPoolHw(x) => {
                let xsh = &nodes[x.0].shape;
                let (c, h, w) = (xsh[0], xsh[1], xsh[2]);
                let inv = 1.0 / (h * w) as f64;
                Self::add_into(tmp, nodes, *x, |gx| {
                    for ci in 0..c {
                        let gc = g[ci] * inv;
                        for p in 0..h * w {
                            gx[ci * h * w + p] += gc;
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn grad_of(tape: &Tape, v: Var) -> Vec<f64> {
        tape.grad(v).unwrap().to_vec()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(&[1.0, 2.0, 3.0], &[3], true).unwrap();
        let loss = t.sum_all(x).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(grad_of(&t, x), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn elementwise_square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(&[1.0, 2.0], &[2], true).unwrap();
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum_all(sq).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(grad_of(&t, x), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let mut t = Tape::new();
        let x = t.leaf(&[1.0, 2.0], &[2], true).unwrap();
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum_all(sq).unwrap();
        t.backward(loss).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(grad_of(&t, x), vec![4.0, 8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(&[1.0, 2.0], &[2], true).unwrap();
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let eye = t
            .leaf(&[1.0, 0.0, 0.0, 1.0], &[2, 2], false)
            .unwrap();
        let a = t.leaf(&[1.0, 2.0, 3.0, 4.0], &[2, 2], false).unwrap();
        let out = t.matmul(eye, a).unwrap();
        assert_eq!(t.values(out), t.values(a));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(&[0.0; 6], &[2, 3], false).unwrap();
        let b = t.leaf(&[0.0; 8], &[4, 2], false).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut t = Tape::new();
        let x = t.leaf(&[0.0, 0.0, 0.0], &[1, 3], false).unwrap();
        let y = t.softmax_rows(x).unwrap();
        for v in t.values(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t
            .leaf(&[0.3, -2.0, 5.0, 0.1, 0.2, 0.3], &[2, 3], false)
            .unwrap();
        let y = t.softmax_rows(x).unwrap();
        let v = t.values(y);
        for i in 0..2 {
            let s: f64 = v[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_anchors() {
        let mut t = Tape::new();
        let x = t.leaf(&[0.0, 10.0], &[2], false).unwrap();
        let y = t.gelu(x).unwrap();
        assert_eq!(t.values(y)[0], 0.0);
        assert!((t.values(y)[1] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_constant_row_zeroes() {
        let mut t = Tape::new();
        let x = t.leaf(&[5.0, 5.0, 5.0, 5.0], &[1, 4], false).unwrap();
        let gain = t.leaf(&[1.0; 4], &[4], false).unwrap();
        let bias = t.leaf(&[0.0; 4], &[4], false).unwrap();
        let y = t.layer_norm(x, gain, bias, 1e-5).unwrap();
        for v in t.values(y) {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        // Row [1, 3]: mean 2, population std 1, so normalized is [-1, 1].
        let mut t = Tape::new();
        let x = t.leaf(&[1.0, 3.0], &[1, 2], false).unwrap();
        let gain = t.leaf(&[1.0, 1.0], &[2], false).unwrap();
        let bias = t.leaf(&[0.0, 0.0], &[2], false).unwrap();
        let y = t.layer_norm(x, gain, bias, 0.0).unwrap();
        let v = t.values(y);
        assert!((v[0] + 1.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_zero_eps_zero_variance_errors() {
        let mut t = Tape::new();
        let x = t.leaf(&[2.0, 2.0], &[1, 2], false).unwrap();
        let gain = t.leaf(&[1.0, 1.0], &[2], false).unwrap();
        let bias = t.leaf(&[0.0, 0.0], &[2], false).unwrap();
        assert!(t.layer_norm(x, gain, bias, 0.0).is_err());
    }

    #[test]
    fn layer_norm_normalizes_random_rows() {
        let mut t = Tape::new();
        let vals = [0.3, -1.2, 4.5, 2.2, 0.0, -3.3, 1.1, 0.7];
        let x = t.leaf(&vals, &[2, 4], false).unwrap();
        let gain = t.leaf(&[1.0; 4], &[4], false).unwrap();
        let bias = t.leaf(&[0.0; 4], &[4], false).unwrap();
        let y = t.layer_norm(x, gain, bias, 0.0).unwrap();
        let v = t.values(y);
        for i in 0..2 {
            let row = &v[i * 4..(i + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn concat_rows_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(&[0.0; 12], &[3, 4], false).unwrap();
        let b = t.leaf(&[1.0; 8], &[2, 4], false).unwrap();
        let c = t.concat_rows(&[a, b]).unwrap();
        assert_eq!(t.shape(c), &[5, 4]);
    }

    #[test]
    fn mask_rows_replaces_and_blocks_gradient() {
        let mut t = Tape::new();
        let base = t.leaf(&[1.0, 2.0, 3.0, 4.0], &[2, 2], true).unwrap();
        let fill = t.leaf(&[9.0, 9.0], &[2], true).unwrap();
        let out = t.mask_rows(base, fill, &[true, false]).unwrap();
        assert_eq!(t.values(out), &[9.0, 9.0, 3.0, 4.0]);
        let loss = t.sum_all(out).unwrap();
        t.backward(loss).unwrap();
        // Masked row contributes no gradient to base; fill collects it.
        assert_eq!(t.grad(base).unwrap(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(t.grad(fill).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn non_finite_forward_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(&[1e308, 1e308], &[2], false).unwrap();
        assert!(t.add(x, x).is_err());
    }
}

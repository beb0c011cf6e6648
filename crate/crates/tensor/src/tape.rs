//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Values live on
//! the tape; callers hold [`Var`] handles. [`Tape::backward`] consumes the
//! tape, walks the recorded nodes in exact reverse order and returns the
//! accumulated [`Gradients`].
//!
//! Parameters enter through [`Tape::param`], which borrows their buffers
//! instead of copying, so a tape lives no longer than the parameters it
//! reads.
//!
//! ```
//! use qfm_tensor::{Tape, Tensor};
//!
//! let w = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
//! let mut tape = Tape::new();
//! let a = tape.param(&w);
//! let x = tape.constant(Tensor::from_rows(&[&[0.0], &[1.0]]).unwrap());
//! let y = tape.matmul(a, x).unwrap();
//! assert_eq!(tape.value(y), &[2.0, 4.0]);
//! let loss = tape.sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(a).unwrap(), &[0.0, 1.0, 0.0, 1.0]);
//! ```

use std::borrow::Cow;

use crate::error::TensorError;
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, TensorError>;

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
    Sub(Var, Var),
    Mul(Var, Var),
    /// Scalar-vs-tensor forms; the first operand is the full tensor.
    AddScalar(Var, Var),
    SubScalar(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f32),
    Affine(Var, f32),
    Gelu(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    RepeatRows(Var),
    MeanRows(Var),
    Patchify {
        x: Var,
        patch: usize,
    },
}

struct Node<'p> {
    shape: Vec<usize>,
    value: Cow<'p, [f32]>,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Node indices whose backward rule ran, in the order they ran.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

fn check_finite(op: &'static str, data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TensorError::NonFinite { op, index }),
        None => Ok(()),
    }
}

/// C (m×n) = A·B (+ C when `accumulate`), where A is m×k and B is k×n in
/// logical terms. `a_t`/`b_t` mean the buffer stores the transpose.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover m*k, k*n and m*n elements under the strides above.
    unsafe {
        matrixmultiply::sgemm(
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

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn add_into(dst: &mut Option<Vec<f32>>, src: &[f32]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<f32>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        check_finite(op_name, &value)?;
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf borrowing the tensor's buffer.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient (an owned input such as an image).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Borrowed leaf that never receives a gradient.
    pub fn constant_ref(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(t.into_data()),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Detached copy of a recorded value.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("tape values are validated")
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(TensorError::Rank {
                op,
                expected: 2,
                shape: s.clone(),
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", x)?;
        let v = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        self.push("transpose", vec![c, r], out, Op::Transpose(x), rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        same: fn(Var, Var) -> Op,
        scalar: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let rg = self.rg(&[a, b]);
        if sa == sb {
            let out = self
                .value(a)
                .iter()
                .zip(self.value(b))
                .map(|(&x, &y)| f(x, y))
                .collect();
            return self.push(name, sa, out, same(a, b), rg);
        }
        if self.value(b).len() == 1 {
            let s = self.value(b)[0];
            let out = self.value(a).iter().map(|&x| f(x, s)).collect();
            return self.push(name, sa, out, scalar(a, b), rg);
        }
        Err(TensorError::ShapeMismatch {
            op: name,
            lhs: sa,
            rhs: sb,
        })
    }

    /// Elementwise sum; `b` may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add, Op::AddScalar)
    }

    /// Elementwise difference; `b` may be a single-element tensor.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub, Op::SubScalar)
    }

    /// Elementwise product; `b` may be a single-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul, Op::MulScalar)
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Scale(x, c), rg)
    }

    /// `c·x + b` evaluated in f64 and rounded once; `b` is a constant with
    /// the same length as `x`.
    pub fn affine(&mut self, x: Var, c: f64, b: &[f64]) -> Result<Var> {
        let v = self.value(x);
        if b.len() != v.len() {
            return Err(TensorError::ShapeMismatch {
                op: "affine",
                lhs: self.shape(x).to_vec(),
                rhs: vec![b.len()],
            });
        }
        let out = v.iter().zip(b).map(|(&xv, &bv)| (c * xv as f64 + bv) as f32).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push("affine", shape, out, Op::Affine(x, c as f32), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push("gelu", shape, out, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push("relu", shape, out, Op::Relu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f32 = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum", vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.iter().sum::<f32>() / v.len() as f32;
        let rg = self.rg(&[x]);
        self.push("mean", vec![1], vec![s], Op::Mean(x), rg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f32::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(v[base + j * inner]);
                }
                let mut total = 0.0;
                for j in 0..len {
                    let e = (v[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= total;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            "softmax",
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        )
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("shape is nonempty");
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument {
                op: "layernorm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        for p in [gamma, beta] {
            if self.value(p).len() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "layernorm",
                    lhs: shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let rows = self.value(x).len() / d;
        let v = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; v.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "layernorm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || n != self.value(x).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        self.push("reshape", shape, out, Op::Reshape(x), rg)
    }

    /// Stacks 2-D tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut cols = None;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2("concat_rows", p)?;
            if *cols.get_or_insert(c) != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: vec![r, c],
                });
            }
            rows += r;
        }
        let cols = cols.ok_or(TensorError::InvalidArgument {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        self.push(
            "concat_rows",
            vec![rows, cols],
            out,
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    /// Joins 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if *rows.get_or_insert(r) != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: vec![r, c],
                });
            }
            widths.push(c);
        }
        let rows = rows.ok_or(TensorError::InvalidArgument {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        self.push(
            "concat_cols",
            vec![rows, total],
            out,
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_cols", x)?;
        if len == 0 || start + len > c {
            return Err(TensorError::InvalidArgument {
                op: "slice_cols",
                msg: format!("range {start}..{} outside {c} columns", start + len),
            });
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[x]);
        self.push("slice_cols", vec![r, len], out, Op::SliceCols { x, start }, rg)
    }

    /// Tiles a length-n vector (any shape with n elements) into an m×n matrix.
    pub fn repeat_rows(&mut self, v: Var, m: usize) -> Result<Var> {
        if m == 0 {
            return Err(TensorError::InvalidArgument {
                op: "repeat_rows",
                msg: "zero repeats".into(),
            });
        }
        let row = self.value(v);
        let n = row.len();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(row);
        }
        let rg = self.rg(&[v]);
        self.push("repeat_rows", vec![m, n], out, Op::RepeatRows(v), rg)
    }

    /// Column means of an m×n matrix as a 1×n matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("mean_rows", x)?;
        let v = self.value(x);
        let mut out = vec![0.0; c];
        for i in 0..r {
            out.iter_mut()
                .zip(&v[i * c..(i + 1) * c])
                .for_each(|(o, a)| *o += a);
        }
        out.iter_mut().for_each(|o| *o /= r as f32);
        let rg = self.rg(&[x]);
        self.push("mean_rows", vec![1, c], out, Op::MeanRows(x), rg)
    }

    /// Splits a C×H×W image into non-overlapping `patch`×`patch` tiles,
    /// returning an M×(C·patch²) matrix. Tiles are ordered row-major over the
    /// grid; each row is laid out channel, then tile row, then tile column.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(TensorError::Rank {
                op: "patchify",
                expected: 3,
                shape: s,
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(TensorError::InvalidArgument {
                op: "patchify",
                msg: format!("patch size {patch} does not tile {h}x{w}"),
            });
        }
        let v = self.value(x);
        let (gh, gw) = (h / patch, w / patch);
        let width = c * patch * patch;
        let mut out = vec![0.0; gh * gw * width];
        for_each_patch_pixel(c, h, w, patch, |dst, src| out[dst] = v[src]);
        let rg = self.rg(&[x]);
        self.push(
            "patchify",
            vec![gh * gw, width],
            out,
            Op::Patchify { x, patch },
            rg,
        )
    }

    /// Runs reverse accumulation from a single-element `loss` and discards
    /// the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        let mut visited = Vec::new();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<'p>, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(*b), true, &mut da, false);
                    add_into(&mut grads[a.0], &da);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a), true, g, false, &mut db, false);
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (node.shape[1], node.shape[0]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                    add_into(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d: Vec<f32> = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[a.0], &d);
                }
                if self.wants(*b) {
                    let d: Vec<f32> = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[b.0], &d);
                }
            }
            Op::AddScalar(a, s) | Op::SubScalar(a, s) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*s) {
                    let total: f32 = g.iter().sum();
                    let sign = if matches!(node.op, Op::SubScalar(..)) {
                        -1.0
                    } else {
                        1.0
                    };
                    add_into(&mut grads[s.0], &[sign * total]);
                }
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s)[0];
                if self.wants(*a) {
                    let d: Vec<f32> = g.iter().map(|x| x * sv).collect();
                    add_into(&mut grads[a.0], &d);
                }
                if self.wants(*s) {
                    let total: f32 = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).sum();
                    add_into(&mut grads[s.0], &[total]);
                }
            }
            Op::Scale(x, c) | Op::Affine(x, c) => {
                let d: Vec<f32> = g.iter().map(|v| v * c).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::Gelu(x) => {
                let d: Vec<f32> = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(gv, &xv)| gv * gelu_grad(xv))
                    .collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::Relu(x) => {
                let d: Vec<f32> = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.value(*x).len()];
                add_into(&mut grads[x.0], &d);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let d = vec![g[0] / n as f32; n];
                add_into(&mut grads[x.0], &d);
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = &node.value;
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let dot: f32 = (0..*len)
                            .map(|j| g[base + j * inner] * y[base + j * inner])
                            .sum();
                        for j in 0..*len {
                            let k = base + j * inner;
                            dx[k] = y[k] * (g[k] - dot);
                        }
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().expect("nonempty");
                let rows = rstd.len();
                let gam = self.value(*gamma);
                if self.wants(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let off = r * d;
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = g[off + j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[off + j];
                        }
                        mean_dh /= d as f32;
                        mean_dh_h /= d as f32;
                        for j in 0..d {
                            let dh = g[off + j] * gam[j];
                            dx[off + j] = rstd[r] * (dh - mean_dh - xhat[off + j] * mean_dh_h);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
                if self.wants(*gamma) {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    add_into(&mut grads[gamma.0], &dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                    add_into(&mut grads[beta.0], &db);
                }
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], g),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.wants(*p) {
                        add_into(&mut grads[p.0], &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].shape[1];
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        add_into(&mut grads[p.0], &d);
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let len = node.shape[1];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::RepeatRows(v) => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let mut dv = vec![0.0; n];
                for i in 0..m {
                    dv.iter_mut()
                        .zip(&g[i * n..(i + 1) * n])
                        .for_each(|(a, b)| *a += b);
                }
                add_into(&mut grads[v.0], &dv);
            }
            Op::MeanRows(x) => {
                let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let mut dx = Vec::with_capacity(r * c);
                for _ in 0..r {
                    dx.extend(g.iter().map(|v| v / r as f32));
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::Patchify { x, patch } => {
                let s = &self.nodes[x.0].shape;
                let mut dx = vec![0.0; self.value(*x).len()];
                for_each_patch_pixel(s[0], s[1], s[2], *patch, |dst, src| dx[src] += g[dst]);
                add_into(&mut grads[x.0], &dx);
            }
        }
    }
}

/// Calls `f(patch_matrix_index, image_index)` for every pixel.
fn for_each_patch_pixel(
    c: usize,
    h: usize,
    w: usize,
    patch: usize,
    mut f: impl FnMut(usize, usize),
) {
    let gw = w / patch;
    let width = c * patch * patch;
    for gy in 0..h / patch {
        for gx in 0..gw {
            let row = gy * gw + gx;
            for ch in 0..c {
                for py in 0..patch {
                    for px in 0..patch {
                        let dst = row * width + (ch * patch + py) * patch + px;
                        let src = (ch * h + gy * patch + py) * w + gx * patch + px;
                        f(dst, src);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let x = tape.constant(t(&[&[3.0, -1.0], &[0.5, 2.0]]));
        let y = tape.matmul(i2, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let a = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(t(&[&[0.0], &[1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.value(c), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[3]));
        let s = tape.softmax(z, 0).unwrap();
        for &v in tape.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let big = tape.constant(Tensor::from_vec(vec![1000.0, 0.0]).unwrap());
        let s = tape.softmax(big, 0).unwrap();
        let v = tape.value(s);
        assert!((v[0] - 1.0).abs() < 1e-6 && v[1].abs() < 1e-6);
        assert!(tape.softmax(big, 1).is_err());
    }

    #[test]
    fn softmax_middle_axis_sums_to_one() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..24).map(|i| (i as f32 * 0.37).sin() * 3.0).collect();
        let x = tape.constant(Tensor::new(vec![2, 3, 4], data).unwrap());
        let s = tape.softmax(x, 1).unwrap();
        let v = tape.value(s);
        for o in 0..2 {
            for i in 0..4 {
                let total: f32 = (0..3).map(|j| v[o * 12 + j * 4 + i]).sum();
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[5.0, 5.0, 5.0, 5.0]]));
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layernorm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
        assert!(tape.layernorm(x, g, b, 0.0).is_err());
    }

    #[test]
    fn layernorm_row_moments() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[1.0, 2.0, 3.0]]));
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.layernorm(x, g, b, 1e-6).unwrap();
        let v = tape.value(y);
        let mean: f32 = v.iter().sum::<f32>() / 3.0;
        let var: f32 = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f32>() / 3.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![2.0, 4.0, 6.0]).unwrap());
        let m = tape.mean(x).unwrap();
        assert_eq!(tape.value(m), &[4.0]);
        let z = tape.constant(Tensor::scalar(0.0));
        let gz = tape.gelu(z).unwrap();
        assert_eq!(tape.value(gz), &[0.0]);
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn broadcast_only_for_scalars() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(a, b).is_err());
        let s = tape.constant(Tensor::scalar(2.0));
        let y = tape.add(a, s).unwrap();
        assert_eq!(tape.value(y), &[2.0; 6]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::filled(&[2], 3.0e38));
        let err = tape.scale(a, 10.0).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { op: "scale", .. }));
    }

    #[test]
    fn diamond_sums_branch_gradients() {
        // y = sum(x*3 + x*x) => dy/dx = 3 + 2x
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![1.0, -2.0, 0.5]).unwrap());
        let left = tape.scale(x, 3.0).unwrap();
        let right = tape.mul(x, x).unwrap();
        let both = tape.add(left, right).unwrap();
        let y = tape.sum(both).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[5.0, -1.0, 4.0]);
    }

    #[test]
    fn backward_visits_in_reverse_order() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        let a = tape.scale(x, 2.0).unwrap();
        let b = tape.gelu(a).unwrap();
        let c = tape.sum(b).unwrap();
        let grads = tape.backward(c).unwrap();
        assert_eq!(
            grads.visit_order(),
            &[c.index(), b.index(), a.index(), x.index()]
        );
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn patchify_layout() {
        // 1 channel, 4x4 image, patch 2 => 4 patches of 4 pixels
        let data: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::new(vec![1, 4, 4], data).unwrap());
        let p = tape.patchify(img, 2).unwrap();
        assert_eq!(tape.shape(p), &[4, 4]);
        assert_eq!(
            tape.value(p),
            &[
                0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0, 8.0, 9.0, 12.0, 13.0, 10.0, 11.0, 14.0,
                15.0
            ]
        );
        assert!(tape.patchify(img, 3).is_err());
    }

    #[test]
    fn concat_slice_repeat_mean_rows() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[&[1.0, 2.0, 3.0]]));
        let b = tape.constant(t(&[&[4.0, 5.0, 6.0]]));
        let ab = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.shape(ab), &[2, 3]);
        let s = tape.slice_cols(ab, 1, 2).unwrap();
        assert_eq!(tape.value(s), &[2.0, 3.0, 5.0, 6.0]);
        let c = tape.concat_cols(&[s, s]).unwrap();
        assert_eq!(tape.value(c), &[2.0, 3.0, 2.0, 3.0, 5.0, 6.0, 5.0, 6.0]);
        let r = tape.repeat_rows(a, 2).unwrap();
        assert_eq!(tape.value(r), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let m = tape.mean_rows(ab).unwrap();
        assert_eq!(tape.value(m), &[2.5, 3.5, 4.5]);
        assert!(tape.slice_cols(ab, 2, 2).is_err());
    }

    #[test]
    fn affine_rounds_once_and_scales_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        let y = tape.affine(x, 0.9, &[0.3, -0.1]).unwrap();
        assert_eq!(tape.value(y), &[(0.9f64 + 0.3) as f32, (1.8f64 - 0.1) as f32]);
        assert!(tape.affine(x, 1.0, &[0.0]).is_err());
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.9, 0.9]);
    }
}

//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles together with
//! its eagerly computed value. [`Tape::backward`] then replays the record in
//! reverse insertion order and accumulates adjoints for every input registered
//! with [`Tape::param`].
//!
//! Shapes are deliberately simple: rank-0 tensors are scalars, and every
//! structural primitive (matmul, broadcast, slice, concat, axis sums) works on
//! rank-2 tensors. Elementwise primitives require identical shapes; use
//! [`Primitive::Broadcast`] to expand explicitly.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a rank-2 tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: argument {value} is outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("tensor shape {shape:?} needs {expected} values, got {len}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        len: usize,
    },
    #[error("{op}: range {start}..{end} invalid for axis {axis} of length {len}")]
    Range {
        op: &'static str,
        axis: usize,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable was not recorded on this tape")]
    ForeignVar,
}

pub type Result<T, E = GradError> = std::result::Result<T, E>;

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(GradError::DataLength {
                shape,
                expected,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// Stacks equal-length rows into an `[rows, cols]` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(GradError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// Splits a rank-2 tensor back into rows.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        match self.shape.as_slice() {
            [_, cols] if *cols > 0 => self.data.chunks(*cols).map(<[f64]>::to_vec).collect(),
            [rows, _] => vec![Vec::new(); *rows],
            _ => vec![self.data.clone()],
        }
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(GradError::NotMatrix {
                op,
                shape: self.shape.clone(),
            }),
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// The closed set of differentiable operations.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Sin,
    Cos,
    Exp,
    Log,
    Tanh,
    Relu,
    Square,
    Sqrt,
    /// Sum of all elements, giving a scalar.
    Sum,
    /// Mean of all elements, giving a scalar.
    Mean,
    /// Euclidean norm of all elements, giving a scalar.
    Norm2,
    /// Euclidean norm of each row: `[m, n] -> [m, 1]`.
    RowNorm2,
    /// Sum along one axis of a matrix, keeping it as a length-1 axis.
    SumAxis(usize),
    Concat(usize),
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    /// Expand length-1 axes (or a scalar) to the target matrix shape.
    Broadcast(Vec<usize>),
    Reshape(Vec<usize>),
    /// Multiply by a constant.
    Scale(f64),
    /// Add a constant.
    Offset(f64),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::MatMul => "matmul",
            Primitive::Sin => "sin",
            Primitive::Cos => "cos",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Square => "square",
            Primitive::Sqrt => "sqrt",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Norm2 => "norm2",
            Primitive::RowNorm2 => "row_norm2",
            Primitive::SumAxis(_) => "sum_axis",
            Primitive::Concat(_) => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Broadcast(_) => "broadcast",
            Primitive::Reshape(_) => "reshape",
            Primitive::Scale(_) => "scale",
            Primitive::Offset(_) => "offset",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div | Primitive::MatMul => {
                Some(2)
            }
            Primitive::Concat(_) => None,
            _ => Some(1),
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

struct Node {
    value: Tensor,
    op: Option<Primitive>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Ordered record of primitive applications.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("params", &self.params.len())
            .finish()
    }
}

/// Adjoints of a scalar loss with respect to every parameter of a tape.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn remove(&mut self, var: Var) -> Option<Tensor> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Option<Primitive>, inputs: Vec<usize>, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var { tape: self.id, index }
    }

    /// Records a leaf that gradients are reported for.
    pub fn param(&mut self, value: Tensor) -> Var {
        let var = self.push(value, None, Vec::new(), true);
        self.params.push(var.index);
        var
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None, Vec::new(), false)
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(GradError::ForeignVar);
        }
        Ok(var.index)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor> {
        let i = self.check(var)?;
        Ok(&self.nodes[i].value)
    }

    pub fn requires_grad(&self, var: Var) -> Result<bool> {
        let i = self.check(var)?;
        Ok(self.nodes[i].requires_grad)
    }

    /// Applies `op` to `inputs`, records the node and returns its handle.
    pub fn apply(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        if let Some(expected) = op.arity() {
            if inputs.len() != expected {
                return Err(GradError::Arity {
                    op: op.name(),
                    expected,
                    got: inputs.len(),
                });
            }
        } else if inputs.is_empty() {
            return Err(GradError::Arity {
                op: op.name(),
                expected: 1,
                got: 0,
            });
        }
        let idx = inputs
            .iter()
            .map(|v| self.check(*v))
            .collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let out = forward(&op, &values)?;
        let requires_grad = idx.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(out, Some(op), idx, requires_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Div, &[a, b])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sin, &[a])
    }
    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Cos, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Square, &[a])
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sqrt, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[a])
    }
    pub fn norm2(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Norm2, &[a])
    }
    pub fn row_norm2(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::RowNorm2, &[a])
    }
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::SumAxis(axis), &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat(axis), parts)
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Primitive::Slice { axis, start, end }, &[a])
    }
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Broadcast(shape.to_vec()), &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[a])
    }
    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.apply(Primitive::Scale(k), &[a])
    }
    pub fn offset(&mut self, a: Var, k: f64) -> Result<Var> {
        self.apply(Primitive::Offset(k), &[a])
    }

    /// Computes d`loss`/d`p` for every parameter `p` on this tape.
    ///
    /// Parameters that `loss` does not depend on get a zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        let loss_value = &self.nodes[root].value;
        if loss_value.numel() != 1 {
            return Err(GradError::NonScalarLoss(loss_value.shape.clone()));
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        adjoints[root] = Some(vec![1.0]);

        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adjoints[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let input_grads = backward_rule(op, &inputs, &node.value, &g);
            for (&j, grad) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                let Some(grad) = grad else { continue };
                match &mut adjoints[j] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(grad),
                }
            }
            // Leaves keep their adjoint, interior nodes are freed as we go.
            adjoints[i] = None;
        }

        let mut grads = HashMap::with_capacity(self.params.len());
        for &p in &self.params {
            let shape = self.nodes[p].value.shape.clone();
            let data = match adjoints.get_mut(p).and_then(Option::take) {
                Some(data) => data,
                None => vec![0.0; self.nodes[p].value.numel()],
            };
            grads.insert(Var { tape: self.id, index: p }, Tensor { shape, data });
        }
        Ok(Gradients { grads })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(GradError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| f(x)).collect(),
    }
}

fn zip(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_shape(op, a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

/// `C = op(A) * op(B)` where `A` is `[m, k]` (or `[k, m]` if `ta`) and
/// `B` is `[k, n]` (or `[n, k]` if `tb`), all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths match the stated dimensions and strides, and `c`
    // does not alias `a` or `b`.
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn broadcast_source_dims(op: &'static str, a: &Tensor, target: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let (tr, tc) = match target {
        [r, c] => (*r, *c),
        _ => {
            return Err(GradError::NotMatrix {
                op,
                shape: target.to_vec(),
            })
        }
    };
    let (ar, ac) = match a.shape.as_slice() {
        [] => (1, 1),
        [r, c] => (*r, *c),
        _ => {
            return Err(GradError::NotMatrix {
                op,
                shape: a.shape.clone(),
            })
        }
    };
    if (ar != tr && ar != 1) || (ac != tc && ac != 1) {
        return Err(GradError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: target.to_vec(),
        });
    }
    Ok((ar, ac, tr, tc))
}

fn forward(op: &Primitive, x: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    Ok(match op {
        Primitive::Add => zip(name, x[0], x[1], |a, b| a + b)?,
        Primitive::Sub => zip(name, x[0], x[1], |a, b| a - b)?,
        Primitive::Mul => zip(name, x[0], x[1], |a, b| a * b)?,
        Primitive::Div => {
            same_shape(name, x[0], x[1])?;
            if let Some(&z) = x[1].data.iter().find(|&&v| v == 0.0) {
                return Err(GradError::Domain { op: name, value: z });
            }
            zip(name, x[0], x[1], |a, b| a / b)?
        }
        Primitive::MatMul => {
            let (m, k) = x[0].dims2(name)?;
            let (k2, n) = x[1].dims2(name)?;
            if k != k2 {
                return Err(GradError::ShapeMismatch {
                    op: name,
                    lhs: x[0].shape.clone(),
                    rhs: x[1].shape.clone(),
                });
            }
            Tensor {
                shape: vec![m, n],
                data: gemm(m, k, n, &x[0].data, false, &x[1].data, false),
            }
        }
        Primitive::Sin => map(x[0], f64::sin),
        Primitive::Cos => map(x[0], f64::cos),
        Primitive::Exp => map(x[0], f64::exp),
        Primitive::Log => {
            if let Some(&bad) = x[0].data.iter().find(|&&v| !(v > 0.0)) {
                return Err(GradError::Domain { op: name, value: bad });
            }
            map(x[0], f64::ln)
        }
        Primitive::Tanh => map(x[0], f64::tanh),
        Primitive::Relu => map(x[0], |v| v.max(0.0)),
        Primitive::Square => map(x[0], |v| v * v),
        Primitive::Sqrt => {
            if let Some(&bad) = x[0].data.iter().find(|&&v| !(v >= 0.0)) {
                return Err(GradError::Domain { op: name, value: bad });
            }
            map(x[0], f64::sqrt)
        }
        Primitive::Sum => Tensor::scalar(x[0].data.iter().sum()),
        Primitive::Mean => {
            let n = x[0].numel();
            if n == 0 {
                return Err(GradError::Domain { op: name, value: 0.0 });
            }
            Tensor::scalar(x[0].data.iter().sum::<f64>() / n as f64)
        }
        Primitive::Norm2 => Tensor::scalar(x[0].data.iter().map(|v| v * v).sum::<f64>().sqrt()),
        Primitive::RowNorm2 => {
            let (m, n) = x[0].dims2(name)?;
            let data = (0..m)
                .map(|r| x[0].data[r * n..(r + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            Tensor {
                shape: vec![m, 1],
                data,
            }
        }
        Primitive::SumAxis(axis) => {
            let (m, n) = x[0].dims2(name)?;
            match axis {
                0 => {
                    let mut data = vec![0.0; n];
                    for row in x[0].data.chunks(n.max(1)).take(m) {
                        data.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
                    }
                    Tensor {
                        shape: vec![1, n],
                        data,
                    }
                }
                1 => Tensor {
                    shape: vec![m, 1],
                    data: (0..m).map(|r| x[0].data[r * n..(r + 1) * n].iter().sum()).collect(),
                },
                _ => {
                    return Err(GradError::Range {
                        op: name,
                        axis: *axis,
                        start: 0,
                        end: 0,
                        len: 2,
                    })
                }
            }
        }
        Primitive::Concat(axis) => concat_forward(name, x, *axis)?,
        Primitive::Slice { axis, start, end } => {
            let (m, n) = x[0].dims2(name)?;
            let len = match axis {
                0 => m,
                1 => n,
                _ => 0,
            };
            if *axis > 1 || start > end || *end > len {
                return Err(GradError::Range {
                    op: name,
                    axis: *axis,
                    start: *start,
                    end: *end,
                    len,
                });
            }
            if *axis == 0 {
                Tensor {
                    shape: vec![end - start, n],
                    data: x[0].data[start * n..end * n].to_vec(),
                }
            } else {
                let w = end - start;
                let mut data = Vec::with_capacity(m * w);
                for r in 0..m {
                    data.extend_from_slice(&x[0].data[r * n + start..r * n + end]);
                }
                Tensor {
                    shape: vec![m, w],
                    data,
                }
            }
        }
        Primitive::Broadcast(target) => {
            let (ar, ac, tr, tc) = broadcast_source_dims(name, x[0], target)?;
            let mut data = Vec::with_capacity(tr * tc);
            for r in 0..tr {
                let sr = if ar == 1 { 0 } else { r };
                if ac == 1 {
                    data.extend(std::iter::repeat_n(x[0].data[sr], tc));
                } else {
                    data.extend_from_slice(&x[0].data[sr * ac..(sr + 1) * ac]);
                }
            }
            Tensor {
                shape: target.clone(),
                data,
            }
        }
        Primitive::Reshape(shape) => {
            let expected: usize = shape.iter().product();
            if expected != x[0].numel() {
                return Err(GradError::ShapeMismatch {
                    op: name,
                    lhs: x[0].shape.clone(),
                    rhs: shape.clone(),
                });
            }
            Tensor {
                shape: shape.clone(),
                data: x[0].data.clone(),
            }
        }
        Primitive::Scale(k) => map(x[0], |v| v * k),
        Primitive::Offset(k) => map(x[0], |v| v + k),
    })
}

fn concat_forward(name: &'static str, x: &[&Tensor], axis: usize) -> Result<Tensor> {
    let dims = x.iter().map(|t| t.dims2(name)).collect::<Result<Vec<_>>>()?;
    let (m0, n0) = dims[0];
    match axis {
        0 => {
            if let Some(i) = dims.iter().position(|&(_, n)| n != n0) {
                return Err(GradError::ShapeMismatch {
                    op: name,
                    lhs: x[0].shape.clone(),
                    rhs: x[i].shape.clone(),
                });
            }
            let rows = dims.iter().map(|d| d.0).sum();
            let data = x.iter().flat_map(|t| t.data.iter().copied()).collect();
            Ok(Tensor {
                shape: vec![rows, n0],
                data,
            })
        }
        1 => {
            if let Some(i) = dims.iter().position(|&(m, _)| m != m0) {
                return Err(GradError::ShapeMismatch {
                    op: name,
                    lhs: x[0].shape.clone(),
                    rhs: x[i].shape.clone(),
                });
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(m0 * cols);
            for r in 0..m0 {
                for (t, &(_, n)) in x.iter().zip(&dims) {
                    data.extend_from_slice(&t.data[r * n..(r + 1) * n]);
                }
            }
            Ok(Tensor {
                shape: vec![m0, cols],
                data,
            })
        }
        _ => Err(GradError::Range {
            op: name,
            axis,
            start: 0,
            end: 0,
            len: 2,
        }),
    }
}

/// Adjoint of each input given the output adjoint `g`.
///
/// Shapes were validated by the forward pass, so this cannot fail.
fn backward_rule(op: &Primitive, x: &[&Tensor], y: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let ew = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..g.len()).map(f).collect() };
    match op {
        Primitive::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
        Primitive::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
        Primitive::Mul => {
            let (a, b) = (&x[0].data, &x[1].data);
            vec![Some(ew(&|i| g[i] * b[i])), Some(ew(&|i| g[i] * a[i]))]
        }
        Primitive::Div => {
            let (a, b) = (&x[0].data, &x[1].data);
            vec![
                Some(ew(&|i| g[i] / b[i])),
                Some(ew(&|i| -g[i] * a[i] / (b[i] * b[i]))),
            ]
        }
        Primitive::MatMul => {
            let (m, k) = (x[0].shape[0], x[0].shape[1]);
            let n = x[1].shape[1];
            // dA = G Bᵀ, dB = Aᵀ G
            let da = gemm(m, n, k, g, false, &x[1].data, true);
            let db = gemm(k, m, n, &x[0].data, true, g, false);
            vec![Some(da), Some(db)]
        }
        Primitive::Sin => vec![Some(ew(&|i| g[i] * x[0].data[i].cos()))],
        Primitive::Cos => vec![Some(ew(&|i| -g[i] * x[0].data[i].sin()))],
        Primitive::Exp => vec![Some(ew(&|i| g[i] * y.data[i]))],
        Primitive::Log => vec![Some(ew(&|i| g[i] / x[0].data[i]))],
        Primitive::Tanh => vec![Some(ew(&|i| g[i] * (1.0 - y.data[i] * y.data[i])))],
        Primitive::Relu => vec![Some(ew(&|i| if x[0].data[i] > 0.0 { g[i] } else { 0.0 }))],
        Primitive::Square => vec![Some(ew(&|i| 2.0 * x[0].data[i] * g[i]))],
        Primitive::Sqrt => vec![Some(ew(&|i| 0.5 * g[i] / y.data[i]))],
        Primitive::Sum => vec![Some(vec![g[0]; x[0].numel()])],
        Primitive::Mean => {
            let n = x[0].numel() as f64;
            vec![Some(vec![g[0] / n; x[0].numel()])]
        }
        Primitive::Norm2 => {
            let norm = y.data[0];
            let grad = if norm > 0.0 {
                x[0].data.iter().map(|v| g[0] * v / norm).collect()
            } else {
                vec![0.0; x[0].numel()]
            };
            vec![Some(grad)]
        }
        Primitive::RowNorm2 => {
            let n = x[0].shape[1];
            let mut grad = vec![0.0; x[0].numel()];
            for (r, &norm) in y.data.iter().enumerate() {
                if norm > 0.0 {
                    let s = g[r] / norm;
                    for c in 0..n {
                        grad[r * n + c] = s * x[0].data[r * n + c];
                    }
                }
            }
            vec![Some(grad)]
        }
        Primitive::SumAxis(axis) => {
            let (m, n) = (x[0].shape[0], x[0].shape[1]);
            let grad = if *axis == 0 {
                (0..m * n).map(|i| g[i % n]).collect()
            } else {
                (0..m * n).map(|i| g[i / n]).collect()
            };
            vec![Some(grad)]
        }
        Primitive::Concat(axis) => {
            let total_cols = y.shape[1];
            let mut out = Vec::with_capacity(x.len());
            let mut offset = 0;
            for t in x {
                let (m, n) = (t.shape[0], t.shape[1]);
                let part = if *axis == 0 {
                    g[offset * n..(offset + m) * n].to_vec()
                } else {
                    let mut part = Vec::with_capacity(m * n);
                    for r in 0..m {
                        part.extend_from_slice(&g[r * total_cols + offset..r * total_cols + offset + n]);
                    }
                    part
                };
                offset += if *axis == 0 { m } else { n };
                out.push(Some(part));
            }
            out
        }
        Primitive::Slice { axis, start, end } => {
            let (m, n) = (x[0].shape[0], x[0].shape[1]);
            let mut grad = vec![0.0; m * n];
            if *axis == 0 {
                grad[start * n..end * n].copy_from_slice(g);
            } else {
                let w = end - start;
                for r in 0..m {
                    grad[r * n + start..r * n + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
            }
            vec![Some(grad)]
        }
        Primitive::Broadcast(target) => {
            let (tr, tc) = (target[0], target[1]);
            let (ar, ac) = match x[0].shape.as_slice() {
                [r, c] => (*r, *c),
                _ => (1, 1),
            };
            let mut grad = vec![0.0; ar * ac];
            for r in 0..tr {
                let sr = if ar == 1 { 0 } else { r };
                for c in 0..tc {
                    let sc = if ac == 1 { 0 } else { c };
                    grad[sr * ac + sc] += g[r * tc + c];
                }
            }
            vec![Some(grad)]
        }
        Primitive::Reshape(_) => vec![Some(g.to_vec())],
        Primitive::Scale(k) => vec![Some(g.iter().map(|v| v * k).collect())],
        Primitive::Offset(_) => vec![Some(g.to_vec())],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn add_is_componentwise() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[1, 2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn exp_of_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 1], &[0.0]));
        let e = tape.exp(a).unwrap();
        assert_eq!(tape.value(e).unwrap().data(), &[1.0]);
    }

    #[test]
    fn norm2_three_four_five() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[3.0, 4.0]));
        let n = tape.norm2(a).unwrap();
        let oracle = (3.0f64 * 3.0 + 4.0 * 4.0).sqrt();
        assert_eq!(tape.value(n).unwrap().item(), Some(oracle));
    }

    #[test]
    fn fresh_tape_is_empty() {
        assert!(Tape::new().is_empty());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let sq = tape.square(x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_has_no_gradients() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(3.0));
        assert!(tape.backward(c).unwrap().is_empty());
    }

    #[test]
    fn sin_gradient_matches_finite_difference() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.7));
        let y = tape.sin(x).unwrap();
        let grad = tape.backward(y).unwrap().get(x).unwrap().data()[0];
        let h = 1e-6;
        let fd = ((0.7f64 + h).sin() - (0.7f64 - h).sin()) / (2.0 * h);
        assert!((grad - fd).abs() < 1e-6);
        assert!((grad - 0.7f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn reused_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let g = tape.backward(z).unwrap().get(x).unwrap().data()[0];
        assert_eq!(g, 2.0 * 1.5 + 1.0);
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err();
        assert_eq!(
            err,
            GradError::ShapeMismatch {
                op: "add",
                lhs: vec![1, 2],
                rhs: vec![1, 3]
            }
        );
        assert!(matches!(tape.matmul(a, b), Err(GradError::ShapeMismatch { op: "matmul", .. })));
    }

    #[test]
    fn domain_errors() {
        let mut tape = Tape::new();
        let neg = tape.constant(t(&[1, 1], &[-1.0]));
        let zero = tape.constant(t(&[1, 1], &[0.0]));
        assert!(matches!(tape.log(zero), Err(GradError::Domain { op: "log", .. })));
        assert!(matches!(tape.sqrt(neg), Err(GradError::Domain { op: "sqrt", .. })));
        assert!(matches!(tape.div(neg, zero), Err(GradError::Domain { op: "div", .. })));
        assert!(tape.sqrt(zero).is_ok());
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1, 2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(GradError::NonScalarLoss(_))));
        let mut other = Tape::new();
        let y = other.param(Tensor::scalar(1.0));
        assert_eq!(tape.backward(y).unwrap_err(), GradError::ForeignVar);
    }

    #[test]
    fn structural_ops_round_trip() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let left = tape.slice(a, 1, 0, 1).unwrap();
        let right = tape.slice(a, 1, 1, 3).unwrap();
        let joined = tape.concat(&[left, right], 1).unwrap();
        assert_eq!(tape.value(joined).unwrap(), tape.value(a).unwrap());
        let top = tape.slice(a, 0, 0, 1).unwrap();
        let rows = tape.broadcast(top, &[2, 3]).unwrap();
        assert_eq!(tape.value(rows).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = tape.sum_axis(a, 0).unwrap();
        assert_eq!(tape.value(s).unwrap().data(), &[5.0, 7.0, 9.0]);
        let s = tape.sum_axis(a, 1).unwrap();
        assert_eq!(tape.value(s).unwrap().data(), &[6.0, 15.0]);
        assert!(tape.slice(a, 1, 2, 4).is_err());
    }

    #[test]
    fn matmul_values() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).unwrap().data(), &[17.0, 39.0]);
    }

    // A composite exercising every primitive, checked against central
    // differences.
    fn composite(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
        let h = tape.matmul(x, w)?; // [2,3]
        let a = tape.tanh(h)?;
        let s = tape.sin(a)?;
        let c = tape.cos(h)?;
        let p = tape.mul(s, c)?;
        let e = tape.exp(p)?;
        let sq = tape.square(e)?;
        let r = tape.relu(h)?;
        let q = tape.add(sq, r)?;
        let l = tape.log(q)?;
        let rt = tape.sqrt(sq)?;
        let d = tape.div(l, rt)?;
        let left = tape.slice(d, 1, 0, 2)?;
        let right = tape.slice(d, 1, 2, 3)?;
        let right = tape.broadcast(right, &[2, 2])?;
        let m = tape.sub(left, right)?;
        let cat = tape.concat(&[m, left], 0)?;
        let rn = tape.row_norm2(cat)?;
        let colsum = tape.sum_axis(cat, 0)?;
        let cs = tape.reshape(colsum, &[2, 1])?;
        let cs = tape.scale(cs, 0.5)?;
        let cs = tape.offset(cs, 2.0)?;
        let total = tape.norm2(cs)?;
        let rm = tape.mean(rn)?;
        let s = tape.sum(d)?;
        let a = tape.add(total, rm)?;
        tape.add(a, s)
    }

    #[test]
    fn composite_gradient_matches_central_difference() {
        let xv = [0.3, -0.2, 0.5, 0.1];
        let wv = [0.4, -0.6, 0.2, 0.7, 0.3, -0.5];
        let eval = |x: &[f64], w: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.constant(t(&[2, 2], x));
            let w = tape.constant(t(&[2, 3], w));
            let out = composite(&mut tape, x, w).unwrap();
            tape.value(out).unwrap().data()[0]
        };
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 2], &xv));
        let w = tape.param(t(&[2, 3], &wv));
        let out = composite(&mut tape, x, w).unwrap();
        let grads = tape.backward(out).unwrap();
        let fx = central_difference(|v| eval(v, &wv), &xv, 1e-5);
        let fw = central_difference(|v| eval(&xv, v), &wv, 1e-5);
        for (a, b) in grads.get(x).unwrap().data().iter().zip(&fx) {
            assert!((a - b).abs() / (1.0 + b.abs()) < 1e-4, "{a} vs {b}");
        }
        for (a, b) in grads.get(w).unwrap().data().iter().zip(&fw) {
            assert!((a - b).abs() / (1.0 + b.abs()) < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.param(t(&[2, 2], &[0.3, -0.2, 0.5, 0.1]));
            let w = tape.param(t(&[2, 3], &[0.4, -0.6, 0.2, 0.7, 0.3, -0.5]));
            let out = composite(&mut tape, x, w).unwrap();
            let g = tape.backward(out).unwrap();
            (g.get(x).unwrap().clone(), g.get(w).unwrap().clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn row_norm_of_zero_row_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[0.0, 0.0, 3.0, 4.0]));
        let n = tape.row_norm2(x).unwrap();
        let s = tape.sum(n).unwrap();
        let g = tape.backward(s).unwrap();
        let got = g.get(x).unwrap().data();
        assert_eq!(&got[..2], &[0.0, 0.0]);
        assert!((got[2] - 0.6).abs() < 1e-15 && (got[3] - 0.8).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn poly(tape: &mut Tape, x: Var) -> Var {
            let s = tape.sin(x).unwrap();
            let q = tape.square(x).unwrap();
            let p = tape.mul(s, q).unwrap();
            tape.sum(p).unwrap()
        }

        fn expo(tape: &mut Tape, x: Var) -> Var {
            let e = tape.tanh(x).unwrap();
            let e = tape.exp(e).unwrap();
            tape.mean(e).unwrap()
        }

        proptest! {
            #[test]
            fn gradient_is_linear(
                xs in prop::collection::vec(-2.0f64..2.0, 1..6),
                a in -3.0f64..3.0,
                b in -3.0f64..3.0,
            ) {
                let n = xs.len();
                let grad_of = |which: u8| {
                    let mut tape = Tape::new();
                    let x = tape.param(Tensor::new(vec![1, n], xs.clone()).unwrap());
                    let f = poly(&mut tape, x);
                    let g = expo(&mut tape, x);
                    let loss = match which {
                        0 => f,
                        1 => g,
                        _ => {
                            let fa = tape.scale(f, a).unwrap();
                            let gb = tape.scale(g, b).unwrap();
                            tape.add(fa, gb).unwrap()
                        }
                    };
                    tape.backward(loss).unwrap().get(x).unwrap().data().to_vec()
                };
                let (gf, gg, gc) = (grad_of(0), grad_of(1), grad_of(2));
                for i in 0..n {
                    let expect = a * gf[i] + b * gg[i];
                    prop_assert!((gc[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
                }
            }
        }
    }
}

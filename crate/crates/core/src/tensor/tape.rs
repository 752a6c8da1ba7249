use super::kernels::{self, gelu, gelu_grad, sigmoid, softplus};
use super::{Real, Result, Tensor, TensorError};
use std::cell::RefCell;
use std::sync::Arc;

/// Lower/upper bound applied to the argument of `acos` when evaluating its
/// derivative, which is singular at ±1.
pub const ACOS_GRAD_CLAMP: f64 = 1.0 - 1e-7;

/// Gradient rule for a user-supplied operation: receives the input values,
/// the output value and the upstream gradient; returns one gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&[Arc<Tensor<T>>], &Tensor<T>, &[T]) -> Vec<Vec<T>>>;

enum Op<T: Real> {
    Leaf,
    Add { inner: usize },
    Sub { inner: usize },
    Mul { inner: usize },
    Div { inner: usize },
    Neg,
    Scale(T),
    AddScalar,
    Exp,
    Log,
    Sqrt,
    Abs,
    Relu,
    Gelu,
    Softplus,
    Acos,
    Clamp { lo: T, hi: T },
    SignedPow,
    Matmul { batch: usize, m: usize, k: usize, n: usize, shared_rhs: bool },
    TransposeLast { batch: usize, rows: usize, cols: usize },
    Reshape,
    Permute(Vec<usize>),
    Softmax { cols: usize },
    LogSoftmax { cols: usize },
    Sum,
    Mean,
    SumAxis0 { rows: usize },
    MeanAxis0 { rows: usize },
    MaxAxis0 { argmax: Vec<usize> },
    NormLast { cols: usize },
    Concat0 { sizes: Vec<usize> },
    SelectRows { indices: Vec<usize>, inner: usize },
    SliceRows { start: usize, inner: usize },
    LayerNorm { cols: usize, eps: T },
    MaskFill { keep: Vec<bool> },
    Index(usize),
    Custom(BackwardFn<T>),
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Abs => "abs",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::Softplus => "softplus",
            Op::Acos => "acos",
            Op::Clamp { .. } => "clamp",
            Op::SignedPow => "signed_pow",
            Op::Matmul { .. } => "matmul",
            Op::TransposeLast { .. } => "transpose",
            Op::Reshape => "reshape",
            Op::Permute(_) => "permute",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumAxis0 { .. } => "sum_axis0",
            Op::MeanAxis0 { .. } => "mean_axis0",
            Op::MaxAxis0 { .. } => "max_axis0",
            Op::NormLast { .. } => "norm",
            Op::Concat0 { .. } => "concat",
            Op::SelectRows { .. } => "select_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MaskFill { .. } => "mask_fill",
            Op::Index(_) => "index",
            Op::Custom(_) => "custom",
        }
    }

    /// Ops whose outputs legitimately hold `-inf` (masked logits).
    fn allows_neg_inf(&self) -> bool {
        matches!(self, Op::MaskFill { .. } | Op::LogSoftmax { .. })
    }
}

struct Node<T: Real> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    inputs: Vec<usize>,
    needs_grad: bool,
}

/// Ordered record of executed operations. Nodes are appended as operations
/// run, so every node's inputs precede it.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the output with respect to `var`. Nodes the output does not
    /// depend on (or that do not require gradients) yield zeros.
    pub fn get(&self, var: &Var<'_, T>) -> Tensor<T> {
        self.get_id(var.id)
    }

    pub fn get_id(&self, id: usize) -> Tensor<T> {
        let shape = self.shapes[id].clone();
        match &self.grads[id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient layout"),
            None => Tensor::zeros(shape),
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. It participates in differentiation iff
    /// `tensor.requires_grad`.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var<'_, T> {
        let needs_grad = tensor.requires_grad;
        let mut tensor = tensor;
        tensor.grad = None;
        self.push_node(tensor, Op::Leaf, Vec::new(), needs_grad)
    }

    /// Records a gradient-free leaf.
    pub fn constant(&self, mut tensor: Tensor<T>) -> Var<'_, T> {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    /// Records a gradient-free leaf without copying its data.
    pub fn constant_shared(&self, tensor: Arc<Tensor<T>>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            inputs: Vec::new(),
            needs_grad: false,
        });
        Var { tape: self, id }
    }

    pub fn scalar(&self, value: f64) -> Var<'_, T> {
        self.constant(Tensor::scalar(T::lit(value)))
    }

    pub fn value(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub fn op_name(&self, id: usize) -> &'static str {
        self.nodes.borrow()[id].op.name()
    }

    fn push_node(
        &self,
        mut value: Tensor<T>,
        op: Op<T>,
        inputs: Vec<usize>,
        needs_grad: bool,
    ) -> Var<'_, T> {
        value.requires_grad = needs_grad;
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            inputs,
            needs_grad,
        });
        Var { tape: self, id }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: Vec<usize>) -> Var<'_, T> {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].needs_grad)
        };
        self.push_node(value, op, inputs, needs_grad)
    }

    fn shape_error(&self, op: &'static str, detail: String) -> TensorError {
        TensorError::Shape {
            node: self.len(),
            op,
            detail,
        }
    }

    /// Concatenates along the leading axis; trailing shapes must agree.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat of nothing".into()));
        }
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let tail = &values[0].shape()[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for v in &values {
            if v.rank() == 0 || &v.shape()[1..] != tail {
                return Err(self.shape_error(
                    "concat",
                    format!("{:?} vs trailing {:?}", v.shape(), tail),
                ));
            }
            rows += v.shape()[0];
            sizes.push(v.len());
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Concat0 { sizes },
            parts.iter().map(|p| p.id).collect(),
        ))
    }

    /// Records an operation with a caller-supplied gradient rule.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t, T>],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Var<'t, T> {
        self.push(
            value,
            Op::Custom(backward),
            inputs.iter().map(|v| v.id).collect(),
        )
    }

    /// Scans every recorded node for NaN or infinite values. Masking nodes may
    /// hold `-inf`.
    pub fn check_finite(&self) -> Result<()> {
        let nodes = self.nodes.borrow();
        for (id, node) in nodes.iter().enumerate() {
            let allow = node.op.allows_neg_inf();
            if let Some(index) = node
                .value
                .data()
                .iter()
                .position(|x| x.is_nan() || (x.is_infinite() && !(allow && *x < T::zero())))
            {
                return Err(TensorError::NonFinite {
                    node: id,
                    op: node.op.name(),
                    index,
                });
            }
        }
        Ok(())
    }

    /// Reverse pass from a scalar output. The tape itself is left unchanged.
    pub fn backward(&self, output: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.id].value.shape().to_vec();
        if nodes[output.id].value.len() != 1 {
            return Err(TensorError::NotScalar(out_shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(vec![T::one()]);
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let ins: Vec<Arc<Tensor<T>>> =
                node.inputs.iter().map(|&i| nodes[i].value.clone()).collect();
            let need: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].needs_grad).collect();
            let input_grads = backward_rule(&node.op, &ins, &node.value, &g, &need);
            for ((&input, ig), needed) in node.inputs.iter().zip(input_grads).zip(need) {
                if !needed {
                    continue;
                }
                let Some(ig) = ig else { continue };
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a = *a + b),
                    slot => *slot = Some(ig),
                }
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Records `f` on a fresh tape with `inputs` as leaves, verifies every
/// intermediate is finite and returns the output value.
pub fn forward_eval<T, E, F>(inputs: &[Tensor<T>], f: F) -> std::result::Result<Tensor<T>, E>
where
    T: Real,
    E: From<TensorError>,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> std::result::Result<Var<'t, T>, E>,
{
    let tape = Tape::new();
    let leaves: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &leaves)?;
    tape.check_finite()?;
    let value = out.value();
    Ok((*value).clone())
}

fn suffix_inner(a: &[usize], b: &[usize]) -> Option<usize> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Some(b.iter().product())
    } else {
        None
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a one-element node.
    pub fn item(&self) -> T {
        self.value().item()
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'t, T> {
        let v = self.value();
        let out = v.map(f);
        self.tape.push(out, op, vec![self.id])
    }

    fn binary(
        &self,
        other: &Var<'t, T>,
        name: &'static str,
        make: impl Fn(usize) -> Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let inner = suffix_inner(a.shape(), b.shape()).ok_or_else(|| {
            self.tape
                .shape_error(name, format!("{:?} and {:?}", a.shape(), b.shape()))
        })?;
        let bd = b.data();
        let data: Vec<T> = if inner == a.len() {
            a.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            a.data()
                .chunks_exact(inner.max(1))
                .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)))
                .collect()
        };
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(out, make(inner), vec![self.id, other.id]))
    }

    /// Elementwise sum; `other` may broadcast over leading axes.
    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", |inner| Op::Add { inner }, |x, y| x + y)
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", |inner| Op::Sub { inner }, |x, y| x - y)
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", |inner| Op::Mul { inner }, |x, y| x * y)
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "div", |inner| Op::Div { inner }, |x, y| x / y)
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.unary(Op::Neg, |x| -x)
    }

    pub fn scale(&self, c: f64) -> Var<'t, T> {
        let c = T::lit(c);
        self.unary(Op::Scale(c), |x| x * c)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t, T> {
        let c = T::lit(c);
        self.unary(Op::AddScalar, |x| x + c)
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(Op::Exp, |x| x.exp())
    }

    pub fn ln(&self) -> Var<'t, T> {
        self.unary(Op::Log, |x| x.ln())
    }

    pub fn sqrt(&self) -> Var<'t, T> {
        self.unary(Op::Sqrt, |x| x.sqrt())
    }

    pub fn abs(&self) -> Var<'t, T> {
        self.unary(Op::Abs, |x| x.abs())
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(Op::Relu, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn gelu(&self) -> Var<'t, T> {
        self.unary(Op::Gelu, gelu)
    }

    pub fn softplus(&self) -> Var<'t, T> {
        self.unary(Op::Softplus, softplus)
    }

    /// `acos` on `[-1, 1]`; the derivative is evaluated with the argument
    /// clamped to `±ACOS_GRAD_CLAMP` so it stays finite.
    pub fn acos(&self) -> Var<'t, T> {
        self.unary(Op::Acos, |x| x.max(-T::one()).min(T::one()).acos())
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t, T> {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        self.unary(Op::Clamp { lo, hi }, |x| x.max(lo).min(hi))
    }

    /// `sign(x) * |x|^p` with a scalar (possibly trainable) exponent `p`.
    pub fn signed_pow(&self, p: &Var<'t, T>) -> Result<Var<'t, T>> {
        let pv = p.value();
        if pv.len() != 1 {
            return Err(self
                .tape
                .shape_error("signed_pow", format!("exponent shape {:?}", pv.shape())));
        }
        let e = pv.item();
        let out = self.value().map(|x| signed_pow(x, e));
        Ok(self.tape.push(out, Op::SignedPow, vec![self.id, p.id]))
    }

    /// Matrix product over the last two axes. `self` may be a vector `[k]`;
    /// `other` may be a shared `[k, n]` matrix or carry the same batch axes.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let err = || {
            self.tape
                .shape_error("matmul", format!("{:?} x {:?}", a.shape(), b.shape()))
        };
        let (lead, m, k) = match a.rank() {
            0 => return Err(err()),
            1 => (Vec::new(), 1, a.shape()[0]),
            r => (a.shape()[..r - 2].to_vec(), a.shape()[r - 2], a.shape()[r - 1]),
        };
        if b.rank() < 2 {
            return Err(err());
        }
        let rb = b.rank();
        let (kb, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
        let shared_rhs = rb == 2;
        if kb != k || (!shared_rhs && b.shape()[..rb - 2] != lead[..]) {
            return Err(err());
        }
        let batch: usize = lead.iter().product();
        let mut data = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let bs = if shared_rhs { 0 } else { bi * k * n };
            T::gemm(
                m,
                k,
                n,
                &a.data()[bi * m * k..(bi + 1) * m * k],
                false,
                &b.data()[bs..bs + k * n],
                false,
                &mut data[bi * m * n..(bi + 1) * m * n],
                false,
            );
        }
        let mut shape = lead;
        if a.rank() > 1 {
            shape.push(m);
        }
        shape.push(n);
        let out = Tensor::new(shape, data)?;
        Ok(self.tape.push(
            out,
            Op::Matmul {
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            vec![self.id, other.id],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let a = self.value();
        let r = a.rank();
        if r < 2 {
            return Err(self
                .tape
                .shape_error("transpose", format!("rank {r} tensor")));
        }
        let (rows, cols) = (a.shape()[r - 2], a.shape()[r - 1]);
        let batch = a.len() / (rows * cols).max(1);
        let data = transpose_blocks(a.data(), batch, rows, cols);
        let mut shape = a.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let out = Tensor::new(shape, data)?;
        Ok(self
            .tape
            .push(out, Op::TransposeLast { batch, rows, cols }, vec![self.id]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        if shape.iter().product::<usize>() != a.len() {
            return Err(self
                .tape
                .shape_error("reshape", format!("{:?} -> {:?}", a.shape(), shape)));
        }
        let out = Tensor::new(shape.to_vec(), a.data().to_vec())?;
        Ok(self.tape.push(out, Op::Reshape, vec![self.id]))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        let mut seen = vec![false; a.rank()];
        let valid = perm.len() == a.rank()
            && perm.iter().all(|&p| p < a.rank() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(self
                .tape
                .shape_error("permute", format!("{:?} by {:?}", a.shape(), perm)));
        }
        let data = kernels::permute(a.data(), a.shape(), perm);
        let shape: Vec<usize> = perm.iter().map(|&p| a.shape()[p]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.tape.push(out, Op::Permute(perm.to_vec()), vec![self.id]))
    }

    fn last_axis(&self, name: &'static str) -> Result<(Arc<Tensor<T>>, usize)> {
        let a = self.value();
        match a.shape().last() {
            Some(&c) if c > 0 => Ok((a, c)),
            _ => Err(self
                .tape
                .shape_error(name, format!("needs a non-empty last axis, got {:?}", a.shape()))),
        }
    }

    /// Softmax along the last axis.
    pub fn softmax(&self) -> Result<Var<'t, T>> {
        let (a, cols) = self.last_axis("softmax")?;
        let mut data = a.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut total = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total = total + *x;
            }
            row.iter_mut().for_each(|x| *x = *x / total);
        }
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(out, Op::Softmax { cols }, vec![self.id]))
    }

    /// Log-softmax along the last axis. Entries equal to `-inf` stay `-inf`.
    pub fn log_softmax(&self) -> Result<Var<'t, T>> {
        let (a, cols) = self.last_axis("log_softmax")?;
        let mut data = a.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|x| *x = *x - lse);
        }
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(out, Op::LogSoftmax { cols }, vec![self.id]))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let a = self.value();
        let s = a.data().iter().copied().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum, vec![self.id])
    }

    pub fn mean(&self) -> Var<'t, T> {
        let a = self.value();
        let n = T::lit(a.len().max(1) as f64);
        let s: T = a.data().iter().copied().sum();
        self.tape.push(Tensor::scalar(s / n), Op::Mean, vec![self.id])
    }

    fn axis0(&self, name: &'static str) -> Result<(Arc<Tensor<T>>, usize, usize)> {
        let a = self.value();
        if a.rank() == 0 || a.shape()[0] == 0 {
            return Err(self
                .tape
                .shape_error(name, format!("empty leading axis in {:?}", a.shape())));
        }
        let rows = a.shape()[0];
        Ok((a.clone(), rows, a.len() / rows))
    }

    pub fn sum_axis0(&self) -> Result<Var<'t, T>> {
        let (a, rows, inner) = self.axis0("sum_axis0")?;
        let data = kernels::reduce_leading(a.data(), inner);
        let out = Tensor::new(a.shape()[1..].to_vec(), data)?;
        Ok(self.tape.push(out, Op::SumAxis0 { rows }, vec![self.id]))
    }

    pub fn mean_axis0(&self) -> Result<Var<'t, T>> {
        let (a, rows, inner) = self.axis0("mean_axis0")?;
        let r = T::lit(rows as f64);
        let data = kernels::reduce_leading(a.data(), inner)
            .into_iter()
            .map(|x| x / r)
            .collect();
        let out = Tensor::new(a.shape()[1..].to_vec(), data)?;
        Ok(self.tape.push(out, Op::MeanAxis0 { rows }, vec![self.id]))
    }

    /// Elementwise maximum over the leading axis; ties go to the lowest row.
    pub fn max_axis0(&self) -> Result<Var<'t, T>> {
        let (a, rows, inner) = self.axis0("max_axis0")?;
        let d = a.data();
        let mut data = d[..inner].to_vec();
        let mut argmax = vec![0usize; inner];
        for r in 1..rows {
            for j in 0..inner {
                let x = d[r * inner + j];
                if x > data[j] {
                    data[j] = x;
                    argmax[j] = r;
                }
            }
        }
        let out = Tensor::new(a.shape()[1..].to_vec(), data)?;
        Ok(self.tape.push(out, Op::MaxAxis0 { argmax }, vec![self.id]))
    }

    /// Euclidean norm along the last axis.
    pub fn norm(&self) -> Result<Var<'t, T>> {
        let (a, cols) = self.last_axis("norm")?;
        let data = a
            .data()
            .chunks_exact(cols)
            .map(|row| row.iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect();
        let shape = a.shape()[..a.rank() - 1].to_vec();
        let out = Tensor::new(shape, data)?;
        Ok(self.tape.push(out, Op::NormLast { cols }, vec![self.id]))
    }

    /// Gathers rows of the leading axis (repeats allowed).
    pub fn select_rows(&self, indices: &[usize]) -> Result<Var<'t, T>> {
        let (a, rows, inner) = self.axis0("select_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(self
                .tape
                .shape_error("select_rows", format!("index {bad} out of {rows} rows")));
        }
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&a.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[0] = indices.len();
        let out = Tensor::new(shape, data)?;
        Ok(self.tape.push(
            out,
            Op::SelectRows {
                indices: indices.to_vec(),
                inner,
            },
            vec![self.id],
        ))
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let (a, rows, inner) = self.axis0("slice_rows")?;
        if start >= end || end > rows {
            return Err(self
                .tape
                .shape_error("slice_rows", format!("{start}..{end} of {rows} rows")));
        }
        let data = a.data()[start * inner..end * inner].to_vec();
        let mut shape = a.shape().to_vec();
        shape[0] = end - start;
        let out = Tensor::new(shape, data)?;
        Ok(self
            .tape
            .push(out, Op::SliceRows { start, inner }, vec![self.id]))
    }

    /// Normalizes each row of the last axis to zero mean and unit variance.
    pub fn layer_norm(&self, eps: f64) -> Result<Var<'t, T>> {
        let (a, cols) = self.last_axis("layer_norm")?;
        let eps = T::lit(eps);
        let mut data = a.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            let (mu, inv) = row_stats(row, eps);
            row.iter_mut().for_each(|x| *x = (*x - mu) * inv);
        }
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self
            .tape
            .push(out, Op::LayerNorm { cols, eps }, vec![self.id]))
    }

    /// Replaces entries whose mask is `false` with `-inf`; those entries get
    /// no gradient.
    pub fn mask_fill(&self, keep: &[bool]) -> Result<Var<'t, T>> {
        let a = self.value();
        if keep.len() != a.len() {
            return Err(self
                .tape
                .shape_error("mask_fill", format!("mask of {} for {:?}", keep.len(), a.shape())));
        }
        let data = a
            .data()
            .iter()
            .zip(keep)
            .map(|(&x, &k)| if k { x } else { T::neg_infinity() })
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(
            out,
            Op::MaskFill {
                keep: keep.to_vec(),
            },
            vec![self.id],
        ))
    }

    /// Element `i` of the flattened tensor, as a scalar.
    pub fn index(&self, i: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        if i >= a.len() {
            return Err(self
                .tape
                .shape_error("index", format!("index {i} of {} elements", a.len())));
        }
        let out = Tensor::scalar(a.data()[i]);
        Ok(self.tape.push(out, Op::Index(i), vec![self.id]))
    }
}

fn signed_pow<T: Real>(x: T, p: T) -> T {
    if x == T::zero() {
        T::zero()
    } else {
        x.signum() * x.abs().powf(p)
    }
}

fn row_stats<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::lit(row.len() as f64);
    let mu = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / n;
    (mu, T::one() / (var + eps).sqrt())
}

fn transpose_blocks<T: Real>(src: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        let off = b * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[off + c * rows + r] = src[off + r * cols + c];
            }
        }
    }
    out
}

fn elementwise<T: Real>(g: &[T], x: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    g.iter().zip(x).map(|(&g, &x)| f(g, x)).collect()
}

fn backward_rule<T: Real>(
    op: &Op<T>,
    ins: &[Arc<Tensor<T>>],
    out: &Tensor<T>,
    g: &[T],
    need: &[bool],
) -> Vec<Option<Vec<T>>> {
    let zero = T::zero();
    let one = T::one();
    let x = || ins[0].data();
    let y = out.data();
    let single = |v: Vec<T>| vec![Some(v)];
    match op {
        Op::Leaf => Vec::new(),
        Op::Add { inner } => vec![
            Some(g.to_vec()),
            need[1].then(|| kernels::reduce_leading(g, *inner)),
        ],
        Op::Sub { inner } => vec![
            Some(g.to_vec()),
            need[1].then(|| {
                kernels::reduce_leading(g, *inner)
                    .into_iter()
                    .map(|v| -v)
                    .collect()
            }),
        ],
        Op::Mul { inner } => {
            let (a, b) = (ins[0].data(), ins[1].data());
            let inner = (*inner).max(1);
            let ga = need[0].then(|| {
                g.iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * b[i % inner])
                    .collect()
            });
            let gb = need[1].then(|| {
                let prod: Vec<T> = g.iter().zip(a).map(|(&gi, &ai)| gi * ai).collect();
                kernels::reduce_leading(&prod, inner)
            });
            vec![ga, gb]
        }
        Op::Div { inner } => {
            let (a, b) = (ins[0].data(), ins[1].data());
            let inner = (*inner).max(1);
            let ga = need[0].then(|| {
                g.iter()
                    .enumerate()
                    .map(|(i, &gi)| gi / b[i % inner])
                    .collect()
            });
            let gb = need[1].then(|| {
                let prod: Vec<T> = g
                    .iter()
                    .zip(a)
                    .enumerate()
                    .map(|(i, (&gi, &ai))| {
                        let bi = b[i % inner];
                        -gi * ai / (bi * bi)
                    })
                    .collect();
                kernels::reduce_leading(&prod, inner)
            });
            vec![ga, gb]
        }
        Op::Neg => single(g.iter().map(|&v| -v).collect()),
        Op::Scale(c) => single(g.iter().map(|&v| v * *c).collect()),
        Op::AddScalar => single(g.to_vec()),
        Op::Exp => single(g.iter().zip(y).map(|(&g, &y)| g * y).collect()),
        Op::Log => single(elementwise(g, x(), |g, x| g / x)),
        Op::Sqrt => single(
            g.iter()
                .zip(y)
                .map(|(&g, &y)| if y > zero { g / (y + y) } else { zero })
                .collect(),
        ),
        Op::Abs => single(elementwise(g, x(), |g, x| {
            if x > zero {
                g
            } else if x < zero {
                -g
            } else {
                zero
            }
        })),
        Op::Relu => single(elementwise(g, x(), |g, x| if x > zero { g } else { zero })),
        Op::Gelu => single(elementwise(g, x(), |g, x| g * gelu_grad(x))),
        Op::Softplus => single(elementwise(g, x(), |g, x| g * sigmoid(x))),
        Op::Acos => {
            let lim = T::lit(ACOS_GRAD_CLAMP);
            single(elementwise(g, x(), |g, x| {
                let c = x.max(-lim).min(lim);
                -g / (one - c * c).sqrt()
            }))
        }
        Op::Clamp { lo, hi } => single(elementwise(g, x(), |g, x| {
            if x >= *lo && x <= *hi {
                g
            } else {
                zero
            }
        })),
        Op::SignedPow => {
            let p = ins[1].item();
            let gx = need[0].then(|| {
                elementwise(g, x(), |g, x| {
                    if x == zero {
                        // d/dx |x|^p at 0: 1 for p = 1, 0 for p > 1; the
                        // p < 1 singularity is reported as 0.
                        if p == one {
                            g
                        } else {
                            zero
                        }
                    } else {
                        g * p * x.abs().powf(p - one)
                    }
                })
            });
            let gp = need[1].then(|| {
                let s = g
                    .iter()
                    .zip(x())
                    .zip(y)
                    .map(|((&g, &x), &y)| if x == zero { zero } else { g * y * x.abs().ln() })
                    .sum::<T>();
                vec![s]
            });
            vec![gx, gp]
        }
        Op::Matmul {
            batch,
            m,
            k,
            n,
            shared_rhs,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let (a, b) = (ins[0].data(), ins[1].data());
            let ga = need[0].then(|| {
                let mut ga = vec![zero; a.len()];
                for bi in 0..*batch {
                    let bs = if *shared_rhs { 0 } else { bi * k * n };
                    T::gemm(
                        m,
                        n,
                        k,
                        &g[bi * m * n..(bi + 1) * m * n],
                        false,
                        &b[bs..bs + k * n],
                        true,
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        false,
                    );
                }
                ga
            });
            let gb = need[1].then(|| {
                let mut gb = vec![zero; b.len()];
                for bi in 0..*batch {
                    let bs = if *shared_rhs { 0 } else { bi * k * n };
                    T::gemm(
                        k,
                        m,
                        n,
                        &a[bi * m * k..(bi + 1) * m * k],
                        true,
                        &g[bi * m * n..(bi + 1) * m * n],
                        false,
                        &mut gb[bs..bs + k * n],
                        *shared_rhs,
                    );
                }
                gb
            });
            vec![ga, gb]
        }
        Op::TransposeLast { batch, rows, cols } => {
            single(transpose_blocks(g, *batch, *cols, *rows))
        }
        Op::Reshape => single(g.to_vec()),
        Op::Permute(perm) => {
            let inv = kernels::inverse_permutation(perm);
            single(kernels::permute(g, out.shape(), &inv))
        }
        Op::Softmax { cols } => {
            let mut gx = vec![zero; g.len()];
            for ((gr, yr), out) in g
                .chunks_exact(*cols)
                .zip(y.chunks_exact(*cols))
                .zip(gx.chunks_exact_mut(*cols))
            {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                    *o = yi * (gi - dot);
                }
            }
            single(gx)
        }
        Op::LogSoftmax { cols } => {
            let mut gx = vec![zero; g.len()];
            for ((gr, yr), out) in g
                .chunks_exact(*cols)
                .zip(y.chunks_exact(*cols))
                .zip(gx.chunks_exact_mut(*cols))
            {
                let total: T = gr.iter().copied().sum();
                for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                    *o = gi - yi.exp() * total;
                }
            }
            single(gx)
        }
        Op::Sum => single(vec![g[0]; ins[0].len()]),
        Op::Mean => {
            let n = ins[0].len().max(1);
            single(vec![g[0] / T::lit(n as f64); n])
        }
        Op::SumAxis0 { rows } => single(g.repeat(*rows)),
        Op::MeanAxis0 { rows } => {
            let r = T::lit(*rows as f64);
            let scaled: Vec<T> = g.iter().map(|&v| v / r).collect();
            single(scaled.repeat(*rows))
        }
        Op::MaxAxis0 { argmax } => {
            let inner = argmax.len();
            let mut gx = vec![zero; ins[0].len()];
            for (j, &r) in argmax.iter().enumerate() {
                gx[r * inner + j] = g[j];
            }
            single(gx)
        }
        Op::NormLast { cols } => {
            let mut gx = vec![zero; ins[0].len()];
            for (((row, out), &gi), &ni) in x()
                .chunks_exact(*cols)
                .zip(gx.chunks_exact_mut(*cols))
                .zip(g)
                .zip(y)
            {
                if ni > zero {
                    for (o, &xi) in out.iter_mut().zip(row) {
                        *o = gi * xi / ni;
                    }
                }
            }
            single(gx)
        }
        Op::Concat0 { sizes } => {
            let mut off = 0;
            sizes
                .iter()
                .map(|&s| {
                    let part = g[off..off + s].to_vec();
                    off += s;
                    Some(part)
                })
                .collect()
        }
        Op::SelectRows { indices, inner } => {
            let mut gx = vec![zero; ins[0].len()];
            for (slot, &i) in indices.iter().enumerate() {
                for j in 0..*inner {
                    gx[i * inner + j] = gx[i * inner + j] + g[slot * inner + j];
                }
            }
            single(gx)
        }
        Op::SliceRows { start, inner } => {
            let mut gx = vec![zero; ins[0].len()];
            gx[start * inner..start * inner + g.len()].copy_from_slice(g);
            single(gx)
        }
        Op::LayerNorm { cols, eps } => {
            let n = T::lit(*cols as f64);
            let mut gx = vec![zero; g.len()];
            for ((xr, gr), out) in x()
                .chunks_exact(*cols)
                .zip(g.chunks_exact(*cols))
                .zip(gx.chunks_exact_mut(*cols))
            {
                let (mu, inv) = row_stats(xr, *eps);
                let mean_g = gr.iter().copied().sum::<T>() / n;
                let mean_gx = gr
                    .iter()
                    .zip(xr)
                    .map(|(&gi, &xi)| gi * (xi - mu) * inv)
                    .sum::<T>()
                    / n;
                for ((o, &gi), &xi) in out.iter_mut().zip(gr).zip(xr) {
                    let xhat = (xi - mu) * inv;
                    *o = inv * (gi - mean_g - xhat * mean_gx);
                }
            }
            single(gx)
        }
        Op::MaskFill { keep } => single(
            g.iter()
                .zip(keep)
                .map(|(&gi, &k)| if k { gi } else { zero })
                .collect(),
        ),
        Op::Index(i) => {
            let mut gx = vec![zero; ins[0].len()];
            gx[*i] = g[0];
            single(gx)
        }
        Op::Custom(rule) => rule(ins, out, g).into_iter().map(Some).collect(),
    }
}

//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every vector-Jacobian product is itself expressed with [`Var`] operations, so
//! gradients can be differentiated again (`create_graph = true`). The reviser's
//! gradient-norm penalty depends on this.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::ops;
use std::rc::Rc;

use crate::tensor::{conv2d, conv2d_adj_input, conv2d_adj_weight, ConvGeom, Scalar, Tensor};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Which of the three bilinear convolution maps a node computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// `(x, w) -> y`
    Forward,
    /// `(gy, w) -> x`-shaped; the transposed convolution.
    AdjInput,
    /// `(x, gy) -> w`-shaped.
    AdjWeight,
}

#[derive(Clone)]
enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    AddScalar,
    MulScalar(T),
    Sqrt,
    Log,
    Exp,
    Tanh,
    Sigmoid,
    MaskMul(Tensor<T>),
    Select { mask: Tensor<T>, inverse: Tensor<T> },
    SumTo,
    BroadcastTo,
    Reshape,
    Conv(ConvKind, ConvGeom),
    Slice { starts: Vec<usize> },
    Embed { starts: Vec<usize> },
    Concat { dim: usize },
}

struct Node<T> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
    parents: Vec<Var<T>>,
}

/// A value in the computation graph. Cloning is cheap (reference counted).
#[derive(Clone)]
pub struct Var<T>(Rc<Node<T>>);

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.0.id, self.0.value)
    }
}

impl<T: Scalar> Var<T> {
    fn make(value: Tensor<T>, op: Op<T>, parents: Vec<Var<T>>) -> Self {
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        let (op, parents) = if requires_grad {
            (op, parents)
        } else {
            (Op::Leaf, Vec::new())
        };
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            op,
            parents,
        }))
    }

    /// A value gradients never flow into.
    pub fn constant(value: Tensor<T>) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: false,
            op: Op::Leaf,
            parents: Vec::new(),
        }))
    }

    /// A differentiable leaf (parameter or probed input).
    pub fn leaf(value: Tensor<T>) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            op: Op::Leaf,
            parents: Vec::new(),
        }))
    }

    pub fn detach(&self) -> Self {
        Var::constant(self.0.value.clone())
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> T {
        self.0.value.item()
    }

    fn same_shape(&self, other: &Var<T>, what: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
    }

    pub fn add(&self, other: &Var<T>) -> Self {
        self.same_shape(other, "add");
        let v = self.value().zip_map(other.value(), |a, b| a + b);
        Var::make(v, Op::Add, vec![self.clone(), other.clone()])
    }

    pub fn sub(&self, other: &Var<T>) -> Self {
        self.same_shape(other, "sub");
        let v = self.value().zip_map(other.value(), |a, b| a - b);
        Var::make(v, Op::Sub, vec![self.clone(), other.clone()])
    }

    pub fn mul(&self, other: &Var<T>) -> Self {
        self.same_shape(other, "mul");
        let v = self.value().zip_map(other.value(), |a, b| a * b);
        Var::make(v, Op::Mul, vec![self.clone(), other.clone()])
    }

    pub fn div(&self, other: &Var<T>) -> Self {
        self.same_shape(other, "div");
        let v = self.value().zip_map(other.value(), |a, b| a / b);
        Var::make(v, Op::Div, vec![self.clone(), other.clone()])
    }

    pub fn neg(&self) -> Self {
        Var::make(self.value().map(|a| -a), Op::Neg, vec![self.clone()])
    }

    pub fn add_scalar(&self, c: T) -> Self {
        Var::make(self.value().map(|a| a + c), Op::AddScalar, vec![self.clone()])
    }

    pub fn mul_scalar(&self, c: T) -> Self {
        Var::make(self.value().map(|a| a * c), Op::MulScalar(c), vec![self.clone()])
    }

    pub fn square(&self) -> Self {
        self.mul(self)
    }

    pub fn sqrt(&self) -> Self {
        Var::make(self.value().map(|a| a.sqrt()), Op::Sqrt, vec![self.clone()])
    }

    pub fn ln(&self) -> Self {
        Var::make(self.value().map(|a| a.ln()), Op::Log, vec![self.clone()])
    }

    pub fn exp(&self) -> Self {
        Var::make(self.value().map(|a| a.exp()), Op::Exp, vec![self.clone()])
    }

    pub fn tanh(&self) -> Self {
        Var::make(self.value().map(|a| a.tanh()), Op::Tanh, vec![self.clone()])
    }

    pub fn sigmoid(&self) -> Self {
        let v = self.value().map(|a| T::one() / (T::one() + (-a).exp()));
        Var::make(v, Op::Sigmoid, vec![self.clone()])
    }

    /// Elementwise product with a constant tensor.
    pub fn mask_mul(&self, mask: &Tensor<T>) -> Self {
        let v = self.value().zip_map(mask, |a, m| a * m);
        Var::make(v, Op::MaskMul(mask.clone()), vec![self.clone()])
    }

    pub fn relu(&self) -> Self {
        self.leaky_relu(T::zero())
    }

    pub fn leaky_relu(&self, slope: T) -> Self {
        let mask = self
            .value()
            .map(|a| if a > T::zero() { T::one() } else { slope });
        self.mask_mul(&mask)
    }

    /// `|x|`, with subgradient 0 at 0.
    pub fn abs(&self) -> Self {
        let mask = self.value().map(|a| {
            if a > T::zero() {
                T::one()
            } else if a < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        });
        self.mask_mul(&mask)
    }

    /// `mask ? a : b` elementwise, for a constant 0/1 mask.
    pub fn select(mask: &Tensor<T>, a: &Var<T>, b: &Var<T>) -> Self {
        a.same_shape(b, "select");
        assert_eq!(mask.shape(), a.shape(), "select mask shape");
        let inverse = mask.map(|m| T::one() - m);
        let mut out = b.value().clone();
        {
            let o = out.data_mut();
            for ((o, &m), &av) in o.iter_mut().zip(mask.data()).zip(a.value().data()) {
                if m != T::zero() {
                    *o = av;
                }
            }
        }
        Var::make(
            out,
            Op::Select {
                mask: mask.clone(),
                inverse,
            },
            vec![a.clone(), b.clone()],
        )
    }

    pub fn sum_to(&self, target: &[usize]) -> Self {
        Var::make(self.value().sum_to(target), Op::SumTo, vec![self.clone()])
    }

    pub fn broadcast_to(&self, target: &[usize]) -> Self {
        Var::make(
            self.value().broadcast_to(target),
            Op::BroadcastTo,
            vec![self.clone()],
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        let v = self.value().reshape(shape).expect("reshape element count");
        Var::make(v, Op::Reshape, vec![self.clone()])
    }

    /// Sum of every element, as a rank-0 value.
    pub fn sum_all(&self) -> Self {
        let ones = vec![1; self.shape().len()];
        self.sum_to(&ones).reshape(&[])
    }

    pub fn mean_all(&self) -> Self {
        let n = self.value().numel() as f64;
        self.sum_all().mul_scalar(T::from_f64(1.0 / n))
    }

    pub fn conv(kind: ConvKind, a: &Var<T>, b: &Var<T>, geom: ConvGeom) -> Self {
        let v = match kind {
            ConvKind::Forward => conv2d(a.value(), b.value(), &geom),
            ConvKind::AdjInput => conv2d_adj_input(a.value(), b.value(), &geom),
            ConvKind::AdjWeight => conv2d_adj_weight(a.value(), b.value(), &geom),
        };
        Var::make(v, Op::Conv(kind, geom), vec![a.clone(), b.clone()])
    }

    pub fn conv2d(&self, weight: &Var<T>, geom: ConvGeom) -> Self {
        Var::conv(ConvKind::Forward, self, weight, geom)
    }

    /// Transposed convolution; `geom` describes the convolution it inverts.
    pub fn conv_transpose2d(&self, weight: &Var<T>, geom: ConvGeom) -> Self {
        Var::conv(ConvKind::AdjInput, self, weight, geom)
    }

    pub fn slice(&self, starts: &[usize], lens: &[usize]) -> Self {
        Var::make(
            self.value().slice(starts, lens),
            Op::Slice {
                starts: starts.to_vec(),
            },
            vec![self.clone()],
        )
    }

    fn embed(&self, starts: &[usize], full: &[usize]) -> Self {
        Var::make(
            self.value().embed(starts, full),
            Op::Embed {
                starts: starts.to_vec(),
            },
            vec![self.clone()],
        )
    }

    pub fn concat(parts: &[Var<T>], dim: usize) -> Self {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let v = Tensor::concat(&values, dim).expect("concat shapes");
        Var::make(v, Op::Concat { dim }, parts.to_vec())
    }

    fn ones_like(&self) -> Self {
        Var::constant(Tensor::ones(self.shape()))
    }

    /// Vector-Jacobian products of this node for each parent (None when the
    /// parent needs no gradient). `out` is this node, possibly detached.
    fn vjp(&self, parents: &[Var<T>], out: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
        let need = |i: usize| self.0.parents[i].requires_grad();
        let when = |i: usize, f: &dyn Fn() -> Var<T>| if need(i) { Some(f()) } else { None };
        match &self.0.op {
            Op::Leaf => Vec::new(),
            Op::Add => vec![when(0, &|| g.clone()), when(1, &|| g.clone())],
            Op::Sub => vec![when(0, &|| g.clone()), when(1, &|| g.neg())],
            Op::Mul => vec![
                when(0, &|| g.mul(&parents[1])),
                when(1, &|| g.mul(&parents[0])),
            ],
            Op::Div => vec![
                when(0, &|| g.div(&parents[1])),
                when(1, &|| g.mul(out).div(&parents[1]).neg()),
            ],
            Op::Neg => vec![when(0, &|| g.neg())],
            Op::AddScalar => vec![when(0, &|| g.clone())],
            Op::MulScalar(c) => vec![when(0, &|| g.mul_scalar(*c))],
            Op::Sqrt => vec![when(0, &|| g.div(out).mul_scalar(T::from_f64(0.5)))],
            Op::Log => vec![when(0, &|| g.div(&parents[0]))],
            Op::Exp => vec![when(0, &|| g.mul(out))],
            Op::Tanh => vec![when(0, &|| g.sub(&g.mul(out).mul(out)))],
            Op::Sigmoid => vec![when(0, &|| {
                let one_minus = out.neg().add_scalar(T::one());
                g.mul(out).mul(&one_minus)
            })],
            Op::MaskMul(mask) => vec![when(0, &|| g.mask_mul(mask))],
            Op::Select { mask, inverse } => vec![
                when(0, &|| g.mask_mul(mask)),
                when(1, &|| g.mask_mul(inverse)),
            ],
            Op::SumTo => vec![when(0, &|| g.broadcast_to(parents[0].shape()))],
            Op::BroadcastTo => vec![when(0, &|| g.sum_to(parents[0].shape()))],
            Op::Reshape => vec![when(0, &|| g.reshape(parents[0].shape()))],
            Op::Conv(kind, geom) => {
                let (a, b) = (&parents[0], &parents[1]);
                let geom = *geom;
                match kind {
                    ConvKind::Forward => vec![
                        when(0, &|| Var::conv(ConvKind::AdjInput, g, b, geom)),
                        when(1, &|| Var::conv(ConvKind::AdjWeight, a, g, geom)),
                    ],
                    ConvKind::AdjInput => vec![
                        when(0, &|| Var::conv(ConvKind::Forward, g, b, geom)),
                        when(1, &|| Var::conv(ConvKind::AdjWeight, g, a, geom)),
                    ],
                    ConvKind::AdjWeight => vec![
                        when(0, &|| Var::conv(ConvKind::AdjInput, b, g, geom)),
                        when(1, &|| Var::conv(ConvKind::Forward, a, g, geom)),
                    ],
                }
            }
            Op::Slice { starts } => vec![when(0, &|| g.embed(starts, parents[0].shape()))],
            Op::Embed { starts } => vec![when(0, &|| g.slice(starts, parents[0].shape()))],
            Op::Concat { dim } => {
                let mut offset = 0;
                parents
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let mut starts = vec![0; p.shape().len()];
                        starts[*dim] = offset;
                        offset += p.shape()[*dim];
                        when(i, &|| g.slice(&starts, p.shape()))
                    })
                    .collect()
            }
        }
    }
}

/// Gradients of the scalar `root` with respect to each of `wrt`.
///
/// With `create_graph` the returned values are themselves differentiable.
/// Inputs that `root` does not depend on get zero gradients.
pub fn grad<T: Scalar>(root: &Var<T>, wrt: &[&Var<T>], create_graph: bool) -> Vec<Var<T>> {
    assert_eq!(root.value().numel(), 1, "grad of non-scalar {:?}", root.shape());
    let targets: HashSet<u64> = wrt.iter().map(|v| v.0.id).collect();

    // Collect every node on a path to a gradient-requiring leaf.
    let mut order: Vec<Var<T>> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack = vec![root.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.0.id) {
            continue;
        }
        stack.extend(v.0.parents.iter().cloned());
        order.push(v);
    }
    // Ids grow with creation, so descending id is a reverse topological order.
    order.sort_unstable_by_key(|v| std::cmp::Reverse(v.0.id));

    let mut grads: HashMap<u64, Var<T>> = HashMap::new();
    grads.insert(root.0.id, root.ones_like());
    for node in &order {
        let Some(g) = grads.remove(&node.0.id) else {
            continue;
        };
        if targets.contains(&node.0.id) {
            grads.insert(node.0.id, g.clone());
        }
        if matches!(node.0.op, Op::Leaf) {
            continue;
        }
        let contributions = if create_graph {
            node.vjp(&node.0.parents, node, &g)
        } else {
            let parents: Vec<Var<T>> = node.0.parents.iter().map(Var::detach).collect();
            node.vjp(&parents, &node.detach(), &g.detach())
        };
        for (parent, c) in node.0.parents.iter().zip(contributions) {
            let Some(c) = c else { continue };
            let pid = parent.0.id;
            let acc = match grads.remove(&pid) {
                Some(prev) => prev.add(&c),
                None => c,
            };
            grads.insert(pid, acc);
        }
    }
    wrt.iter()
        .map(|v| {
            grads
                .get(&v.0.id)
                .cloned()
                .unwrap_or_else(|| Var::constant(Tensor::zeros(v.shape())))
        })
        .collect()
}

impl<T: Scalar> ops::Add for &Var<T> {
    type Output = Var<T>;
    fn add(self, rhs: &Var<T>) -> Var<T> {
        Var::add(self, rhs)
    }
}

impl<T: Scalar> ops::Sub for &Var<T> {
    type Output = Var<T>;
    fn sub(self, rhs: &Var<T>) -> Var<T> {
        Var::sub(self, rhs)
    }
}

impl<T: Scalar> ops::Mul for &Var<T> {
    type Output = Var<T>;
    fn mul(self, rhs: &Var<T>) -> Var<T> {
        Var::mul(self, rhs)
    }
}

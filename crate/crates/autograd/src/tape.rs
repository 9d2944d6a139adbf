use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use ndarray::{Axis, Ix2, IxDyn};

use crate::nn::{self, NnOp};
use crate::Array;

pub(crate) enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Tanh(usize),
    SumAxes(usize),
    Reshape(usize),
    MatMul(usize, usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Select { input: usize, axis: usize, indices: Vec<usize> },
    Nn(NnOp),
}

struct Node {
    value: Rc<Array>,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. One tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when the loss
    /// does not depend on it through any differentiable path.
    pub fn get(&self, var: Var<'_>) -> Option<&Array> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Array> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push_shared(&self, value: Rc<Array>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn leaf(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Array::from_elem(IxDyn(&[]), value))
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Array> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub(crate) fn record(&self, value: Array, op: Op, inputs: &[usize]) -> Var<'_> {
        let rg = inputs.iter().any(|&i| self.requires(i));
        self.push(value, op, rg)
    }

    /// Backpropagates from a scalar (single-element) `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.len(),
            1,
            "backward requires a single-element loss"
        );
        let mut grads: Vec<Option<Array>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Array::ones(nodes[loss.id].value.raw_dim()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contributions = backprop(&nodes, id, &g);
            for (input, ig) in contributions {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => *acc += &ig,
                    slot => *slot = Some(ig),
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Gradients { grads }
    }
}

/// Sums `grad` down to `shape`, undoing numpy-style broadcasting.
pub(crate) fn reduce_to(grad: Array, shape: &[usize]) -> Array {
    if grad.shape() == shape {
        return grad;
    }
    let mut g = grad;
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (k, &s) in shape.iter().enumerate() {
        if s == 1 && g.shape()[k] != 1 {
            g = g.sum_axis(Axis(k)).insert_axis(Axis(k));
        }
    }
    g
}

fn backprop(nodes: &[Node], id: usize, g: &Array) -> Vec<(usize, Array)> {
    let val = |i: usize| -> &Array { &nodes[i].value };
    let needs = |i: usize| nodes[i].requires_grad;
    let out: &Array = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf | Op::Constant => vec![],
        Op::Add(a, b) => vec![
            (*a, reduce_to(g.clone(), val(*a).shape())),
            (*b, reduce_to(g.clone(), val(*b).shape())),
        ],
        Op::Sub(a, b) => vec![
            (*a, reduce_to(g.clone(), val(*a).shape())),
            (*b, reduce_to(-g, val(*b).shape())),
        ],
        Op::Mul(a, b) => {
            let mut out = Vec::with_capacity(2);
            if needs(*a) {
                out.push((*a, reduce_to(g * val(*b), val(*a).shape())));
            }
            if needs(*b) {
                out.push((*b, reduce_to(g * val(*a), val(*b).shape())));
            }
            out
        }
        Op::Div(a, b) => {
            let ga = g / val(*b);
            let gb = -(&ga * out);
            vec![
                (*a, reduce_to(ga, val(*a).shape())),
                (*b, reduce_to(gb, val(*b).shape())),
            ]
        }
        Op::Neg(a) => vec![(*a, -g)],
        Op::Scale(a, s) => vec![(*a, g * *s)],
        Op::Offset(a) => vec![(*a, g.clone())],
        Op::Exp(a) => vec![(*a, g * out)],
        Op::Ln(a) => vec![(*a, g / val(*a))],
        Op::Sqrt(a) => vec![(*a, g / &(out * 2.0))],
        Op::Square(a) => vec![(*a, g * &(val(*a) * 2.0))],
        Op::Relu(a) => {
            let mut ga = g.clone();
            ndarray::Zip::from(&mut ga)
                .and(val(*a))
                .for_each(|g, &x| {
                    if x <= 0.0 {
                        *g = 0.0
                    }
                });
            vec![(*a, ga)]
        }
        Op::LeakyRelu(a, slope) => {
            let mut ga = g.clone();
            ndarray::Zip::from(&mut ga)
                .and(val(*a))
                .for_each(|g, &x| {
                    if x <= 0.0 {
                        *g *= slope
                    }
                });
            vec![(*a, ga)]
        }
        Op::Tanh(a) => vec![(*a, g * &out.mapv(|y| 1.0 - y * y))],
        Op::SumAxes(a) => {
            let ga = g
                .broadcast(val(*a).raw_dim())
                .expect("sum gradient broadcasts")
                .to_owned();
            vec![(*a, ga)]
        }
        Op::Reshape(a) => {
            let ga = g
                .to_shape(val(*a).raw_dim())
                .expect("reshape gradient")
                .into_owned();
            vec![(*a, ga)]
        }
        Op::MatMul(a, b) => {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let a2 = val(*a).view().into_dimensionality::<Ix2>().unwrap();
            let b2 = val(*b).view().into_dimensionality::<Ix2>().unwrap();
            let mut out = Vec::with_capacity(2);
            if needs(*a) {
                out.push((*a, g2.dot(&b2.t()).into_dyn()));
            }
            if needs(*b) {
                out.push((*b, a2.t().dot(&g2).into_dyn()));
            }
            out
        }
        Op::Concat { inputs, axis } => {
            let mut offset = 0;
            inputs
                .iter()
                .map(|&i| {
                    let len = val(i).shape()[*axis];
                    let part = g
                        .slice_axis(Axis(*axis), (offset..offset + len).into())
                        .to_owned();
                    offset += len;
                    (i, part)
                })
                .collect()
        }
        Op::Select {
            input,
            axis,
            indices,
        } => {
            let mut ga = Array::zeros(val(*input).raw_dim());
            for (k, &idx) in indices.iter().enumerate() {
                let mut dst = ga.index_axis_mut(Axis(*axis), idx);
                dst += &g.index_axis(Axis(*axis), k);
            }
            vec![(*input, ga)]
        }
        Op::Nn(op) => nn::backprop(op, val, needs, out, g),
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Array> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a {:?} array", v.shape());
        *v.iter().next().unwrap()
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(&self) -> Var<'t> {
        let v = self.value();
        self.tape.push_shared(v, Op::Constant, false)
    }

    fn unary(&self, value: Array, op: Op) -> Var<'t> {
        self.tape.record(value, op, &[self.id])
    }

    fn binary(&self, other: Var<'t>, value: Array, op: Op) -> Var<'t> {
        assert!(std::ptr::eq(self.tape, other.tape), "vars on different tapes");
        self.tape.record(value, op, &[self.id, other.id])
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() + &*other.value();
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() - &*other.value();
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() * &*other.value();
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() / &*other.value();
        self.binary(other, v, Op::Div(self.id, other.id))
    }

    pub fn neg(&self) -> Var<'t> {
        let v = -&*self.value();
        self.unary(v, Op::Neg(self.id))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let v = &*self.value() * s;
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        let v = &*self.value() + s;
        self.unary(v, Op::Offset(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.value().mapv(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var<'t> {
        let v = self.value().mapv(f64::ln);
        self.unary(v, Op::Ln(self.id))
    }

    pub fn sqrt(&self) -> Var<'t> {
        let v = self.value().mapv(f64::sqrt);
        self.unary(v, Op::Sqrt(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        let v = self.value().mapv(|x| x * x);
        self.unary(v, Op::Square(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value().mapv(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        let v = self.value().mapv(|x| if x > 0.0 { x } else { slope * x });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    pub fn tanh(&self) -> Var<'t> {
        let v = self.value().mapv(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes_keepdim(&self, axes: &[usize]) -> Var<'t> {
        let mut v = (*self.value()).clone();
        for &a in axes {
            v = v.sum_axis(Axis(a)).insert_axis(Axis(a));
        }
        self.unary(v, Op::SumAxes(self.id))
    }

    pub fn mean_axes_keepdim(&self, axes: &[usize]) -> Var<'t> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes_keepdim(axes).scale(1.0 / count as f64)
    }

    /// Sum of every element, as a 0-d value.
    pub fn sum(&self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum_axes_keepdim(&axes).reshape(&[])
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let v = self
            .value()
            .to_shape(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape {:?} -> {shape:?}: {e}", self.shape()))
            .into_owned();
        self.unary(v, Op::Reshape(self.id))
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-D");
        let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-D");
        assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dimensions");
        let v = a2.dot(&b2).into_dyn();
        self.binary(other, v, Op::MatMul(self.id, other.id))
    }

    /// Concatenation along `axis`.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<Rc<Array>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.record(
            v,
            Op::Concat {
                inputs: ids.clone(),
                axis,
            },
            &ids,
        )
    }

    /// Gathers `indices` along `axis` (indices may repeat).
    pub fn select(&self, axis: usize, indices: &[usize]) -> Var<'t> {
        let v = self.value().select(Axis(axis), indices);
        self.unary(
            v,
            Op::Select {
                input: self.id,
                axis,
                indices: indices.to_vec(),
            },
        )
    }

    pub(crate) fn record_nn(&self, inputs: &[usize], value: Array, op: NnOp) -> Var<'t> {
        self.tape.record(value, Op::Nn(op), inputs)
    }
}

//! Scalar reverse-mode automatic differentiation.
//!
//! A [`Tape`] is a Wengert list: every arithmetic operation on a [`Var`]
//! appends a node recording its operands and primal value. Calling
//! [`Tape::adjoints`] sweeps the list backwards once and yields the
//! derivative of one root node with respect to every node.
//!
//! The tape is deliberately general (it knows nothing about networks); the
//! loss functions build their whole computation on it so that its
//! gradients are an independent check on the hand-derived backward passes.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Range, Sub};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Ln(usize),
    Tanh(usize),
    Silu(usize),
    Softplus(usize),
    Square(usize),
    Sqrt(usize),
    Scale(usize, f64),
    Shift(usize, f64),
}

#[derive(Clone, Copy, Debug)]
struct Node {
    op: Op,
    value: f64,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`]. Copyable; arithmetic records new nodes.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    value: f64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} = {})", self.id, self.value)
    }
}

/// A contiguous run of leaves created together.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeafRange(Range<usize>);

impl LeafRange {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn range(&self) -> Range<usize> {
        self.0.clone()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn eval(op: Op, v: &[f64], own: f64) -> f64 {
    match op {
        Op::Leaf | Op::Const => own,
        Op::Add(a, b) => v[a] + v[b],
        Op::Sub(a, b) => v[a] - v[b],
        Op::Mul(a, b) => v[a] * v[b],
        Op::Div(a, b) => v[a] / v[b],
        Op::Neg(a) => -v[a],
        Op::Exp(a) => v[a].exp(),
        Op::Ln(a) => v[a].ln(),
        Op::Tanh(a) => v[a].tanh(),
        Op::Silu(a) => silu(v[a]),
        Op::Softplus(a) => softplus(v[a]),
        Op::Square(a) => v[a] * v[a],
        Op::Sqrt(a) => v[a].sqrt(),
        Op::Scale(a, k) => v[a] * k,
        Op::Shift(a, k) => v[a] + k,
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

    fn push(&self, op: Op, value: f64) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { op, value });
        Var {
            tape: self,
            id,
            value,
        }
    }

    pub fn leaf(&self, value: f64) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    /// Creates one leaf per value, contiguously.
    pub fn leaves(&self, values: &[f64]) -> (Vec<Var<'_>>, LeafRange) {
        let start = self.len();
        let vars: Vec<Var<'_>> = values.iter().map(|&v| self.leaf(v)).collect();
        (vars, LeafRange(start..start + values.len()))
    }

    pub fn constant(&self, value: f64) -> Var<'_> {
        self.push(Op::Const, value)
    }

    /// Left-to-right sum; an empty slice yields a zero constant.
    pub fn sum<'t>(&'t self, vars: &[Var<'t>]) -> Var<'t> {
        match vars.split_first() {
            None => self.constant(0.0),
            Some((first, rest)) => rest.iter().fold(*first, |acc, &v| acc + v),
        }
    }

    pub fn value(&self, id: NodeId) -> f64 {
        self.nodes.borrow()[id.0].value
    }

    /// Derivative of `root` with respect to every node on the tape.
    pub fn adjoints(&self, root: NodeId) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        adj[root.0] = 1.0;
        for i in (0..=root.0).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let node = nodes[i];
            match node.op {
                Op::Leaf | Op::Const => {}
                Op::Add(a, b) => {
                    adj[a] += g;
                    adj[b] += g;
                }
                Op::Sub(a, b) => {
                    adj[a] += g;
                    adj[b] -= g;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a].value, nodes[b].value);
                    adj[a] += g * vb;
                    adj[b] += g * va;
                }
                Op::Div(a, b) => {
                    let vb = nodes[b].value;
                    adj[a] += g / vb;
                    adj[b] -= g * node.value / vb;
                }
                Op::Neg(a) => adj[a] -= g,
                Op::Exp(a) => adj[a] += g * node.value,
                Op::Ln(a) => adj[a] += g / nodes[a].value,
                Op::Tanh(a) => adj[a] += g * (1.0 - node.value * node.value),
                Op::Silu(a) => adj[a] += g * silu_derivative(nodes[a].value),
                Op::Softplus(a) => adj[a] += g * sigmoid(nodes[a].value),
                Op::Square(a) => adj[a] += g * 2.0 * nodes[a].value,
                Op::Sqrt(a) => adj[a] += g * 0.5 / node.value,
                Op::Scale(a, k) => adj[a] += g * k,
                Op::Shift(a, _) => adj[a] += g,
            }
        }
        adj
    }

    /// Re-executes every recorded operation from the stored leaf and
    /// constant values, returning the recomputed node values.
    pub fn replay(&self) -> Vec<f64> {
        self.replay_with(|_, v| v)
    }

    /// Re-executes the tape with leaf values supplied by `leaf_value(node
    /// index, recorded value)`.
    pub fn replay_with<F: FnMut(usize, f64) -> f64>(&self, mut leaf_value: F) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut v = Vec::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            let x = match node.op {
                Op::Leaf => leaf_value(i, node.value),
                op => eval(op, &v, node.value),
            };
            v.push(x);
        }
        v
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        NodeId(self.id)
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    fn unary(self, op: Op, value: f64) -> Var<'t> {
        self.tape.push(op, value)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), self.value.exp())
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Ln(self.id), self.value.ln())
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), self.value.tanh())
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(Op::Silu(self.id), silu(self.value))
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), softplus(self.value))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), self.value * self.value)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), self.value.sqrt())
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, k), self.value * k)
    }

    pub fn shift(self, k: f64) -> Var<'t> {
        self.unary(Op::Shift(self.id, k), self.value + k)
    }
}

macro_rules! binary_op {
    ($trait:ident, $method:ident, $op:ident, $f:expr) => {
        impl<'t> $trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                debug_assert!(
                    std::ptr::eq(self.tape, rhs.tape),
                    "vars from different tapes"
                );
                let f: fn(f64, f64) -> f64 = $f;
                self.tape
                    .push(Op::$op(self.id, rhs.id), f(self.value, rhs.value))
            }
        }
    };
}

binary_op!(Add, add, Add, |a, b| a + b);
binary_op!(Sub, sub, Sub, |a, b| a - b);
binary_op!(Mul, mul, Mul, |a, b| a * b);
binary_op!(Div, div, Div, |a, b| a / b);

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.shift(rhs)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.shift(-rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), -self.value)
    }
}

/// What a recording closure hands back to [`GradientTape::record`]: which
/// leaves are the parameters, which are inputs, and the output node(s).
#[derive(Debug, Default)]
pub struct Recording {
    pub params: Option<LeafRange>,
    pub inputs: Vec<LeafRange>,
    pub outputs: Vec<NodeId>,
}

/// A finished recording of a scalar loss over network parameters and inputs.
#[derive(Debug)]
pub struct GradientTape {
    tape: Tape,
    recording: Recording,
}

impl GradientTape {
    pub fn record<F>(f: F) -> Self
    where
        F: FnOnce(&Tape) -> Recording,
    {
        let tape = Tape::new();
        let recording = f(&tape);
        Self { tape, recording }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    fn root(&self) -> Result<NodeId> {
        match self.recording.outputs.as_slice() {
            [root] => Ok(*root),
            other => Err(Error::NonScalarRoot(other.len())),
        }
    }

    /// Primal value of the scalar root.
    pub fn value(&self) -> Result<f64> {
        Ok(self.tape.value(self.root()?))
    }

    pub fn param_count(&self) -> usize {
        self.recording.params.as_ref().map_or(0, LeafRange::len)
    }

    /// d(root)/d(parameters), in parameter order.
    pub fn grad_params(&self) -> Result<Vec<f64>> {
        let root = self.root()?;
        let range = self
            .recording
            .params
            .as_ref()
            .ok_or_else(|| Error::Contract("no parameter leaves recorded".into()))?;
        let adj = self.tape.adjoints(root);
        Ok(adj[range.range()].to_vec())
    }

    /// d(root)/d(input block `which`).
    pub fn grad_input(&self, which: usize) -> Result<Vec<f64>> {
        let root = self.root()?;
        let range = self
            .recording
            .inputs
            .get(which)
            .ok_or_else(|| Error::Contract(format!("no input block {which}")))?;
        let adj = self.tape.adjoints(root);
        Ok(adj[range.range()].to_vec())
    }

    /// Root value recomputed by replaying the tape from its leaves.
    pub fn replay(&self) -> Result<f64> {
        let root = self.root()?;
        Ok(self.tape.replay()[root.index()])
    }

    /// Root value with the parameter leaves replaced by `params`.
    pub fn replay_with_params(&self, params: &[f64]) -> Result<f64> {
        let root = self.root()?;
        let range = self
            .recording
            .params
            .as_ref()
            .ok_or_else(|| Error::Contract("no parameter leaves recorded".into()))?
            .range();
        if params.len() != range.len() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                range.len(),
                params.len()
            )));
        }
        let values = self.tape.replay_with(|i, v| {
            if range.contains(&i) {
                params[i - range.start]
            } else {
                v
            }
        });
        Ok(values[root.index()])
    }
}

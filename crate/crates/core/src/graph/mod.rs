//! Predictive coding on directed acyclic computation graphs.
//!
//! Each vertex holds a value `v_i` computed from its parents. After a forward
//! pass the predictions `v̂_i` are frozen, an error unit `ε_i` is attached to
//! every vertex, the output error is seeded with `∂L/∂v_out`, and the errors
//! relax under
//!
//! `dε_i/dt = −ε_i + Σ_{j ∈ C(i)} (∂v̂_j/∂v_i)ᵀ ε_j`
//!
//! whose fixed point is exactly the reverse-mode gradient `∂L/∂v_i`.

mod document;
mod pc;

pub use document::{EdgeDoc, GraphDocument, OpDoc, VertexDoc};
pub use pc::{
    forward_pass, reverse_oracle, vertex_error_update, AugmentedGraph, ForwardPass, OracleGradients, ParamGrad,
    RelaxConfig, RelaxReport, Schedule,
};

use petgraph::algo::toposort;
use petgraph::graph::DiGraph;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{PcError, Result};
use crate::linalg::{Matrix, Vector};

/// The function a vertex applies to its parents.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    /// `f(Σ_k W_k v_{p_k} + b)`, one weight matrix per parent.
    Dense { activation: Activation, weights: Vec<Matrix>, bias: Vector },
    /// Sum of the parents.
    Add,
    /// Element-wise product of the parents.
    Mul,
    /// `f(v_p)` of its single parent.
    Act(Activation),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vertex {
    pub name: String,
    pub dim: usize,
    pub op: Op,
    pub parents: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Loss {
    /// `L = Σ_k v_out[k]`.
    Sum,
    /// `L = ½‖v_out − target‖²`.
    SquaredError { target: Vector },
}

impl Loss {
    pub fn value(&self, out: &Vector) -> f64 {
        match self {
            Loss::Sum => out.sum(),
            Loss::SquaredError { target } => 0.5 * (out - target).norm_squared(),
        }
    }

    pub fn gradient(&self, out: &Vector) -> Vector {
        match self {
            Loss::Sum => Vector::from_element(out.len(), 1.0),
            Loss::SquaredError { target } => out - target,
        }
    }
}

/// A validated DAG with a single output vertex and a loss on it.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputationGraph {
    vertices: Vec<Vertex>,
    output: usize,
    loss: Loss,
    order: Vec<usize>,
    children: Vec<Vec<(usize, usize)>>,
}

impl ComputationGraph {
    pub fn new(vertices: Vec<Vertex>, output: usize, loss: Loss) -> Result<Self> {
        let n = vertices.len();
        if output >= n {
            return Err(PcError::Argument(format!("output vertex {output} does not exist")));
        }
        let mut dag = DiGraph::<(), ()>::new();
        let nodes: Vec<_> = (0..n).map(|_| dag.add_node(())).collect();
        let mut children = vec![Vec::new(); n];
        for (j, v) in vertices.iter().enumerate() {
            check_vertex(&vertices, v)?;
            for (slot, &p) in v.parents.iter().enumerate() {
                dag.add_edge(nodes[p], nodes[j], ());
                children[p].push((j, slot));
            }
        }
        let order = toposort(&dag, None)
            .map_err(|c| PcError::Argument(format!("graph has a cycle through vertex {}", c.node_id().index())))?
            .into_iter()
            .map(|ix| ix.index())
            .collect();
        if !children[output].is_empty() {
            return Err(PcError::Argument("the output vertex must have no children".into()));
        }
        if let Loss::SquaredError { target } = &loss {
            if target.len() != vertices[output].dim {
                return Err(PcError::Shape("loss target does not match the output dimension".into()));
            }
        }
        Ok(ComputationGraph { vertices, output, loss, order, children })
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    pub fn vertex(&self, i: usize) -> &Vertex {
        &self.vertices[i]
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn output(&self) -> usize {
        self.output
    }

    pub fn loss(&self) -> &Loss {
        &self.loss
    }

    pub fn set_loss(&mut self, loss: Loss) -> Result<()> {
        if let Loss::SquaredError { target } = &loss {
            if target.len() != self.vertices[self.output].dim {
                return Err(PcError::Shape("loss target does not match the output dimension".into()));
            }
        }
        self.loss = loss;
        Ok(())
    }

    /// A topological order of the vertices.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// `(child, parent slot)` pairs for vertex `i`.
    pub fn children(&self, i: usize) -> &[(usize, usize)] {
        &self.children[i]
    }

    /// Input vertex indices in declaration order.
    pub fn inputs(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.vertices[i].op == Op::Input).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.vertices.iter().position(|v| v.name == name)
    }

    /// Length of the longest input-to-output path, in edges.
    pub fn depth(&self) -> usize {
        let mut level = vec![0usize; self.len()];
        for &j in &self.order {
            level[j] = self.vertices[j].parents.iter().map(|&p| level[p] + 1).max().unwrap_or(0);
        }
        level.into_iter().max().unwrap_or(0)
    }

    /// Applies `θ ← θ − lr · ∂L/∂θ` to every dense vertex.
    pub fn apply_gradients(&mut self, grads: &[ParamGrad], lr: f64) -> Result<()> {
        if grads.len() != self.len() {
            return Err(PcError::Shape("one gradient entry per vertex expected".into()));
        }
        for (v, g) in self.vertices.iter_mut().zip(grads) {
            if let (Op::Dense { weights, bias, .. }, ParamGrad::Dense { weights: gw, bias: gb }) = (&mut v.op, g) {
                for (w, d) in weights.iter_mut().zip(gw) {
                    *w -= d * lr;
                }
                *bias -= gb * lr;
            }
        }
        Ok(())
    }

    /// Chain of dense layers `dims[0] → … → dims[n]` with uniform Glorot weights.
    pub fn mlp<R: Rng + ?Sized>(dims: &[usize], activation: Activation, loss: Loss, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(PcError::Argument("an MLP needs at least two layer sizes".into()));
        }
        let mut b = GraphBuilder::default();
        let mut prev = b.input("x", dims[0]);
        for (k, w) in dims.windows(2).enumerate() {
            let weight = glorot(w[1], w[0], rng);
            let bias = glorot(w[1], 1, rng).column(0) * 0.1;
            prev = b.dense(&format!("h{}", k + 1), &[(prev, weight)], bias, activation)?;
        }
        b.build(prev, loss)
    }
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

impl ComputationGraph {
    /// `length` dense vertices of width `dim` in a row after one input.
    pub fn chain<R: Rng + ?Sized>(dim: usize, length: usize, activation: Activation, loss: Loss, rng: &mut R) -> Result<Self> {
        Self::mlp(&vec![dim; length + 1], activation, loss, rng)
    }

    /// Fan-out and fan-in: `x → a, b`; `m = a ⊙ b`; `s = a + m`; `y = f(W_s s + W_b b + c)`.
    pub fn diamond<R: Rng + ?Sized>(dim: usize, out_dim: usize, activation: Activation, loss: Loss, rng: &mut R) -> Result<Self> {
        let mut g = GraphBuilder::default();
        let x = g.input("x", dim);
        let a = g.dense("a", &[(x, glorot(dim, dim, rng))], Vector::zeros(dim), activation)?;
        let b = g.dense("b", &[(x, glorot(dim, dim, rng))], Vector::zeros(dim), activation)?;
        let m = g.mul("m", &[a, b])?;
        let s = g.add("s", &[a, m])?;
        let y = g.dense("y", &[(s, glorot(out_dim, dim, rng)), (b, glorot(out_dim, dim, rng))], Vector::zeros(out_dim), activation)?;
        g.build(y, loss)
    }
}

fn check_vertex(all: &[Vertex], v: &Vertex) -> Result<()> {
    let n = all.len();
    if let Some(&p) = v.parents.iter().find(|&&p| p >= n) {
        return Err(PcError::Argument(format!("vertex {} has unknown parent {p}", v.name)));
    }
    if v.dim == 0 {
        return Err(PcError::Argument(format!("vertex {} has dimension 0", v.name)));
    }
    let bad = |msg: &str| Err(PcError::Shape(format!("vertex {}: {msg}", v.name)));
    match &v.op {
        Op::Input if !v.parents.is_empty() => return Err(PcError::Argument(format!("input {} has parents", v.name))),
        Op::Input => {}
        _ if v.parents.is_empty() => {
            return Err(PcError::Argument(format!("non-input vertex {} has no parents", v.name)));
        }
        Op::Dense { weights, bias, .. } => {
            if weights.len() != v.parents.len() {
                return bad("one weight matrix per parent expected");
            }
            for (w, &p) in weights.iter().zip(&v.parents) {
                if w.shape() != (v.dim, all[p].dim) {
                    return bad(&format!("weight from {} is {:?}, expected ({}, {})", all[p].name, w.shape(), v.dim, all[p].dim));
                }
            }
            if bias.len() != v.dim {
                return bad("bias length differs from the vertex dimension");
            }
        }
        Op::Add | Op::Mul => {
            if v.parents.iter().any(|&p| all[p].dim != v.dim) {
                return bad("parents must share the vertex dimension");
            }
        }
        Op::Act(_) => {
            if v.parents.len() != 1 || all[v.parents[0]].dim != v.dim {
                return bad("an activation vertex has one parent of the same dimension");
            }
        }
    }
    Ok(())
}

/// Incremental construction of a [`ComputationGraph`].
#[derive(Debug, Clone, Default)]
pub struct GraphBuilder {
    vertices: Vec<Vertex>,
}

impl GraphBuilder {
    fn push(&mut self, name: &str, dim: usize, op: Op, parents: Vec<usize>) -> usize {
        self.vertices.push(Vertex { name: name.to_string(), dim, op, parents });
        self.vertices.len() - 1
    }

    fn dim_of(&self, parents: &[usize]) -> Result<usize> {
        let first = *parents.first().ok_or_else(|| PcError::Argument("vertex needs a parent".into()))?;
        self.vertices
            .get(first)
            .map(|v| v.dim)
            .ok_or_else(|| PcError::Argument(format!("unknown parent {first}")))
    }

    pub fn input(&mut self, name: &str, dim: usize) -> usize {
        self.push(name, dim, Op::Input, Vec::new())
    }

    pub fn dense(&mut self, name: &str, parents: &[(usize, Matrix)], bias: Vector, activation: Activation) -> Result<usize> {
        let ids = parents.iter().map(|(p, _)| *p).collect();
        let weights = parents.iter().map(|(_, w)| w.clone()).collect();
        Ok(self.push(name, bias.len(), Op::Dense { activation, weights, bias }, ids))
    }

    pub fn add(&mut self, name: &str, parents: &[usize]) -> Result<usize> {
        let dim = self.dim_of(parents)?;
        Ok(self.push(name, dim, Op::Add, parents.to_vec()))
    }

    pub fn mul(&mut self, name: &str, parents: &[usize]) -> Result<usize> {
        let dim = self.dim_of(parents)?;
        Ok(self.push(name, dim, Op::Mul, parents.to_vec()))
    }

    pub fn activation(&mut self, name: &str, parent: usize, activation: Activation) -> Result<usize> {
        let dim = self.dim_of(&[parent])?;
        Ok(self.push(name, dim, Op::Act(activation), vec![parent]))
    }

    pub fn build(self, output: usize, loss: Loss) -> Result<ComputationGraph> {
        ComputationGraph::new(self.vertices, output, loss)
    }
}

//! JSON description of a computation graph.
//!
//! ```json
//! {
//!   "vertices": [
//!     {"name": "x", "dim": 2, "op": {"kind": "input"}},
//!     {"name": "h", "dim": 3, "op": {"kind": "dense", "activation": "tanh"}},
//!     {"name": "y", "dim": 3, "op": {"kind": "activation", "activation": "logistic"}}
//!   ],
//!   "edges": [
//!     {"from": "x", "to": "h", "weight": [[1, 0], [0, 1], [1, 1]]},
//!     {"from": "h", "to": "y"}
//!   ],
//!   "output": "y",
//!   "loss": {"kind": "sum"}
//! }
//! ```
//!
//! Edges into a dense vertex carry a row-major `dim_to × dim_from` weight;
//! the order of edges fixes the parent order.

use serde::{Deserialize, Serialize};

use super::{ComputationGraph, Loss, Op, Vertex};
use crate::activation::Activation;
use crate::error::{PcError, Result};
use crate::linalg::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OpDoc {
    Input,
    Dense {
        activation: Activation,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<Vec<f64>>,
    },
    Add,
    Mul,
    Activation { activation: Activation },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VertexDoc {
    pub name: String,
    pub dim: usize,
    pub op: OpDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeDoc {
    pub from: String,
    pub to: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDocument {
    pub vertices: Vec<VertexDoc>,
    pub edges: Vec<EdgeDoc>,
    pub output: String,
    pub loss: Loss,
}

fn matrix_from_rows(rows: &[Vec<f64>], shape: (usize, usize), edge: &str) -> Result<Matrix> {
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(PcError::Shape(format!("weight on edge {edge} is not {}x{}", shape.0, shape.1)));
    }
    Ok(Matrix::from_fn(shape.0, shape.1, |i, j| rows[i][j]))
}

impl GraphDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| PcError::Config(format!("graph document: {e}")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn build(&self) -> Result<ComputationGraph> {
        let index = |name: &str| {
            self.vertices
                .iter()
                .position(|v| v.name == name)
                .ok_or_else(|| PcError::Config(format!("unknown vertex {name}")))
        };
        let mut vertices: Vec<Vertex> = self
            .vertices
            .iter()
            .map(|v| {
                let op = match &v.op {
                    OpDoc::Input => Op::Input,
                    OpDoc::Dense { activation, bias } => Op::Dense {
                        activation: *activation,
                        weights: Vec::new(),
                        bias: bias.as_ref().map_or_else(|| Vector::zeros(v.dim), |b| Vector::from_column_slice(b)),
                    },
                    OpDoc::Add => Op::Add,
                    OpDoc::Mul => Op::Mul,
                    OpDoc::Activation { activation } => Op::Act(*activation),
                };
                Vertex { name: v.name.clone(), dim: v.dim, op, parents: Vec::new() }
            })
            .collect();
        for e in &self.edges {
            let (from, to) = (index(&e.from)?, index(&e.to)?);
            let label = format!("{}->{}", e.from, e.to);
            let shape = (vertices[to].dim, vertices[from].dim);
            match (&mut vertices[to].op, &e.weight) {
                (Op::Dense { weights, .. }, Some(w)) => weights.push(matrix_from_rows(w, shape, &label)?),
                (Op::Dense { .. }, None) => return Err(PcError::Config(format!("edge {label} into a dense vertex needs a weight"))),
                (_, Some(_)) => return Err(PcError::Config(format!("edge {label} carries a weight but its target is not dense"))),
                _ => {}
            }
            vertices[to].parents.push(from);
        }
        ComputationGraph::new(vertices, index(&self.output)?, self.loss.clone())
    }

    pub fn from_graph(graph: &ComputationGraph) -> Self {
        let vs = graph.vertices();
        let vertices = vs
            .iter()
            .map(|v| VertexDoc {
                name: v.name.clone(),
                dim: v.dim,
                op: match &v.op {
                    Op::Input => OpDoc::Input,
                    Op::Dense { activation, bias, .. } => {
                        OpDoc::Dense { activation: *activation, bias: Some(bias.iter().copied().collect()) }
                    }
                    Op::Add => OpDoc::Add,
                    Op::Mul => OpDoc::Mul,
                    Op::Act(a) => OpDoc::Activation { activation: *a },
                },
            })
            .collect();
        let mut edges = Vec::new();
        for v in vs {
            for (slot, &p) in v.parents.iter().enumerate() {
                let weight = match &v.op {
                    Op::Dense { weights, .. } => {
                        let w = &weights[slot];
                        Some((0..w.nrows()).map(|i| w.row(i).iter().copied().collect()).collect())
                    }
                    _ => None,
                };
                edges.push(EdgeDoc { from: vs[p].name.clone(), to: v.name.clone(), weight });
            }
        }
        GraphDocument { vertices, edges, output: vs[graph.output()].name.clone(), loss: graph.loss().clone() }
    }
}

use serde::{Deserialize, Serialize};

use super::{ComputationGraph, Op};
use crate::error::{ensure_len, PcError, Result};
use crate::linalg::{Matrix, Precision, Vector};

/// Vertex values of one forward pass, frozen as the predictions `v̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub values: Vec<Vector>,
    /// Pre-activations of dense vertices, `None` elsewhere.
    pub pre_activations: Vec<Option<Vector>>,
    pub loss: f64,
    /// Number of vertex evaluations performed; always `|V|`.
    pub evaluations: usize,
}

/// Evaluates every vertex in topological order; `inputs` follow [`ComputationGraph::inputs`].
pub fn forward_pass(graph: &ComputationGraph, inputs: &[Vector]) -> Result<ForwardPass> {
    let input_ids = graph.inputs();
    if inputs.len() != input_ids.len() {
        return Err(PcError::Argument(format!("{} inputs bound, graph has {}", inputs.len(), input_ids.len())));
    }
    let n = graph.len();
    let mut values: Vec<Option<Vector>> = vec![None; n];
    let mut pre_activations = vec![None; n];
    for (&id, x) in input_ids.iter().zip(inputs) {
        ensure_len(&format!("input {}", graph.vertex(id).name), x.len(), graph.vertex(id).dim)?;
    }
    let mut bound: Vec<Option<&Vector>> = vec![None; n];
    for (&id, x) in input_ids.iter().zip(inputs) {
        bound[id] = Some(x);
    }
    let mut evaluations = 0;
    for &j in graph.order() {
        let v = graph.vertex(j);
        let parent = |k: usize| values[v.parents[k]].as_ref().expect("parents precede children");
        let value = match &v.op {
            Op::Input => bound[j].expect("every input bound").clone(),
            Op::Dense { activation, weights, bias } => {
                let mut a = bias.clone();
                for (k, w) in weights.iter().enumerate() {
                    a += w * parent(k);
                }
                let out = activation.apply(&a);
                pre_activations[j] = Some(a);
                out
            }
            Op::Add => (1..v.parents.len()).fold(parent(0).clone(), |acc, k| acc + parent(k)),
            Op::Mul => (1..v.parents.len()).fold(parent(0).clone(), |acc, k| acc.component_mul(parent(k))),
            Op::Act(f) => f.apply(parent(0)),
        };
        evaluations += 1;
        values[j] = Some(value);
    }
    let values: Vec<Vector> = values.into_iter().map(|v| v.expect("all evaluated")).collect();
    let loss = graph.loss().value(&values[graph.output()]);
    Ok(ForwardPass { values, pre_activations, loss, evaluations })
}

/// `∂v̂_j/∂v_{p}` for parent slot `slot` of vertex `j`, at the forward values.
fn jacobian(graph: &ComputationGraph, fwd: &ForwardPass, j: usize, slot: usize) -> Matrix {
    let v = graph.vertex(j);
    match &v.op {
        Op::Input => unreachable!("inputs have no parents"),
        Op::Dense { activation, weights, .. } => {
            let gate = activation.derivative(fwd.pre_activations[j].as_ref().expect("dense pre-activation"));
            Matrix::from_diagonal(&gate) * &weights[slot]
        }
        Op::Add => Matrix::identity(v.dim, v.dim),
        Op::Mul => {
            let mut others = Vector::from_element(v.dim, 1.0);
            for (k, &p) in v.parents.iter().enumerate() {
                if k != slot {
                    others.component_mul_assign(&fwd.values[p]);
                }
            }
            Matrix::from_diagonal(&others)
        }
        Op::Act(f) => Matrix::from_diagonal(&f.derivative(&fwd.values[v.parents[0]])),
    }
}

/// Parameter gradient of one vertex.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrad {
    None,
    Dense { weights: Vec<Matrix>, bias: Vector },
}

impl ParamGrad {
    /// Max-abs difference between two gradients of the same shape.
    pub fn max_abs_diff(&self, other: &ParamGrad) -> f64 {
        match (self, other) {
            (ParamGrad::Dense { weights: a, bias: b }, ParamGrad::Dense { weights: c, bias: d }) => a
                .iter()
                .zip(c)
                .map(|(x, y)| (x - y).amax())
                .fold((b - d).amax(), f64::max),
            (ParamGrad::None, ParamGrad::None) => 0.0,
            _ => f64::INFINITY,
        }
    }
}

fn param_grad(graph: &ComputationGraph, fwd: &ForwardPass, j: usize, upstream: &Vector) -> ParamGrad {
    let v = graph.vertex(j);
    match &v.op {
        Op::Dense { activation, .. } => {
            let gate = activation.derivative(fwd.pre_activations[j].as_ref().expect("dense pre-activation"));
            let delta = upstream.component_mul(&gate);
            let weights = v.parents.iter().map(|&p| &delta * fwd.values[p].transpose()).collect();
            ParamGrad::Dense { weights, bias: delta }
        }
        _ => ParamGrad::None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleGradients {
    /// `∂L/∂v_i` for every vertex, inputs included.
    pub vertex: Vec<Vector>,
    pub params: Vec<ParamGrad>,
}

/// Exact reverse-mode gradients: `∂L/∂v_i = Σ_{j ∈ C(i)} (∂v_j/∂v_i)ᵀ ∂L/∂v_j`.
pub fn reverse_oracle(graph: &ComputationGraph, fwd: &ForwardPass) -> OracleGradients {
    let n = graph.len();
    let mut vertex: Vec<Vector> = (0..n).map(|i| Vector::zeros(graph.vertex(i).dim)).collect();
    vertex[graph.output()] = graph.loss().gradient(&fwd.values[graph.output()]);
    for &i in graph.order().iter().rev() {
        if i == graph.output() {
            continue;
        }
        let mut g = Vector::zeros(graph.vertex(i).dim);
        for &(j, slot) in graph.children(i) {
            g += jacobian(graph, fwd, j, slot).tr_mul(&vertex[j]);
        }
        vertex[i] = g;
    }
    let params = (0..n).map(|j| param_grad(graph, fwd, j, &vertex[j])).collect();
    OracleGradients { vertex, params }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// All errors updated simultaneously from the previous iterate.
    #[default]
    Jacobi,
    /// Errors updated one at a time in reverse topological order.
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelaxConfig {
    pub step: f64,
    pub max_iters: usize,
    /// Stop once the max-norm change of all errors in one iteration is below this.
    pub tol: f64,
    pub schedule: Schedule,
}

impl Default for RelaxConfig {
    fn default() -> Self {
        RelaxConfig { step: 0.5, max_iters: 20_000, tol: 1e-12, schedule: Schedule::Jacobi }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxReport {
    pub iterations: usize,
    pub converged: bool,
    pub last_change: f64,
}

/// The local relaxation kernel for one vertex:
/// `ε_i + η(−Π_i ε_i + Σ_j J_jiᵀ Π_j ε_j)`, where `children` holds
/// `(Π_j ε_j, J_ji)` and `own_weighted` is `Π_i ε_i`.
pub fn vertex_error_update(eps: &Vector, own_weighted: &Vector, children: &[(&Vector, &Matrix)], step: f64) -> Vector {
    let mut drive = -own_weighted;
    for (e, j) in children {
        drive += j.tr_mul(e);
    }
    eps + drive * step
}

/// A computation graph with error units and frozen predictions.
#[derive(Debug, Clone)]
pub struct AugmentedGraph<'g> {
    graph: &'g ComputationGraph,
    forward: ForwardPass,
    /// `jacobians[j][slot]` is `∂v̂_j/∂v_{parent slot}`.
    jacobians: Vec<Vec<Matrix>>,
    eps: Vec<Vector>,
    precisions: Option<Vec<Precision>>,
    relaxed: bool,
}

impl<'g> AugmentedGraph<'g> {
    /// Freezes `forward` as the predictions and seeds `ε_out = ∂L/∂v_out`.
    pub fn new(graph: &'g ComputationGraph, forward: ForwardPass) -> Result<Self> {
        ensure_len("forward values", forward.values.len(), graph.len())?;
        let jacobians = (0..graph.len())
            .map(|j| (0..graph.vertex(j).parents.len()).map(|s| jacobian(graph, &forward, j, s)).collect())
            .collect();
        let mut eps: Vec<Vector> = graph.vertices().iter().map(|v| Vector::zeros(v.dim)).collect();
        eps[graph.output()] = graph.loss().gradient(&forward.values[graph.output()]);
        Ok(AugmentedGraph { graph, forward, jacobians, eps, precisions: None, relaxed: false })
    }

    /// Experimental precision weighting of the vertex errors.
    ///
    /// The fixed point then satisfies `Π_i ε_i = Σ_j J_jiᵀ Π_j ε_j`, so the
    /// precision-weighted errors still equal the gradients.
    pub fn with_precisions(mut self, precisions: Vec<Precision>) -> Result<Self> {
        ensure_len("vertex precisions", precisions.len(), self.graph.len())?;
        for (p, v) in precisions.iter().zip(self.graph.vertices()) {
            ensure_len(&format!("precision of {}", v.name), p.dim(), v.dim)?;
        }
        let out = self.graph.output();
        self.eps[out] = spd_solve(&precisions[out], &self.eps[out]);
        self.precisions = Some(precisions);
        Ok(self)
    }

    pub fn graph(&self) -> &ComputationGraph {
        self.graph
    }

    pub fn forward(&self) -> &ForwardPass {
        &self.forward
    }

    pub fn errors(&self) -> &[Vector] {
        &self.eps
    }

    /// Overwrites the error units; the output error stays seeded.
    pub fn set_errors(&mut self, eps: Vec<Vector>) -> Result<()> {
        ensure_len("errors", eps.len(), self.graph.len())?;
        for (e, v) in eps.iter().zip(self.graph.vertices()) {
            ensure_len(&format!("error of {}", v.name), e.len(), v.dim)?;
        }
        let out = self.graph.output();
        let seed = self.eps[out].clone();
        self.eps = eps;
        self.eps[out] = seed;
        self.relaxed = true;
        Ok(())
    }

    /// `Π_i ε_i`, or `ε_i` without precisions.
    pub fn weighted_error(&self, i: usize) -> Vector {
        match &self.precisions {
            Some(p) => p[i].apply(&self.eps[i]),
            None => self.eps[i].clone(),
        }
    }

    fn weighted_errors_of(&self, eps: &[Vector]) -> Vec<Vector> {
        match &self.precisions {
            Some(p) => eps.iter().zip(p).map(|(e, p)| p.apply(e)).collect(),
            None => eps.to_vec(),
        }
    }

    fn is_free(&self, i: usize) -> bool {
        i != self.graph.output() && self.graph.vertex(i).op != Op::Input
    }

    fn update_vertex(&self, i: usize, weighted: &[Vector], step: f64) -> Vector {
        let children: Vec<(&Vector, &Matrix)> = self
            .graph
            .children(i)
            .iter()
            .map(|&(j, slot)| (&weighted[j], &self.jacobians[j][slot]))
            .collect();
        vertex_error_update(&self.eps[i], &weighted[i], &children, step)
    }

    /// One relaxation sweep; returns the max-norm change.
    pub fn relax_step(&mut self, cfg: &RelaxConfig) -> f64 {
        let mut change = 0.0f64;
        match cfg.schedule {
            Schedule::Jacobi => {
                let weighted = self.weighted_errors_of(&self.eps);
                let next: Vec<Option<Vector>> = (0..self.graph.len())
                    .map(|i| self.is_free(i).then(|| self.update_vertex(i, &weighted, cfg.step)))
                    .collect();
                for (i, v) in next.into_iter().enumerate() {
                    if let Some(v) = v {
                        change = change.max((&v - &self.eps[i]).amax());
                        self.eps[i] = v;
                    }
                }
            }
            Schedule::Sequential => {
                let order: Vec<usize> = self.graph.order().iter().rev().copied().filter(|&i| self.is_free(i)).collect();
                let mut weighted = self.weighted_errors_of(&self.eps);
                for i in order {
                    let v = self.update_vertex(i, &weighted, cfg.step);
                    change = change.max((&v - &self.eps[i]).amax());
                    self.eps[i] = v;
                    weighted[i] = self.weighted_error(i);
                }
            }
        }
        self.relaxed = true;
        change
    }

    /// Relaxes the errors until the per-iteration change drops below `cfg.tol`.
    pub fn relax(&mut self, cfg: &RelaxConfig) -> Result<RelaxReport> {
        self.relax_observed(cfg, |_, _| {})
    }

    /// As [`AugmentedGraph::relax`], calling `observe(iteration, errors)` after every sweep.
    pub fn relax_observed(&mut self, cfg: &RelaxConfig, mut observe: impl FnMut(usize, &[Vector])) -> Result<RelaxReport> {
        if !(cfg.step > 0.0) {
            return Err(PcError::Argument(format!("relaxation step must be positive, got {}", cfg.step)));
        }
        let mut last_change = f64::INFINITY;
        for it in 1..=cfg.max_iters {
            last_change = self.relax_step(cfg);
            if let Some(i) = (0..self.graph.len()).find(|&i| self.eps[i].iter().any(|v| !v.is_finite() || v.abs() > 1e12)) {
                return Err(PcError::Divergence { location: format!("vertex {}", self.graph.vertex(i).name), iteration: it });
            }
            observe(it, &self.eps);
            if last_change < cfg.tol {
                return Ok(RelaxReport { iterations: it, converged: true, last_change });
            }
        }
        Ok(RelaxReport { iterations: cfg.max_iters, converged: false, last_change })
    }

    /// `max_i ‖ε_i − Σ_j J_jiᵀ ε_j‖_∞` over the free vertices (weighted errors with precisions).
    pub fn fixed_point_residual(&self) -> f64 {
        let weighted = self.weighted_errors_of(&self.eps);
        (0..self.graph.len())
            .filter(|&i| self.is_free(i))
            .map(|i| (&self.eps[i] - self.update_vertex(i, &weighted, 1.0)).amax())
            .fold(0.0, f64::max)
    }

    /// Parameter gradients `ε_i ∂v̂_i/∂θ_i` from the relaxed errors.
    pub fn pc_weight_update(&self) -> Result<Vec<ParamGrad>> {
        if !self.relaxed {
            return Err(PcError::State("pc_weight_update called before relaxation".into()));
        }
        let weighted = self.weighted_errors_of(&self.eps);
        Ok((0..self.graph.len()).map(|j| param_grad(self.graph, &self.forward, j, &weighted[j])).collect())
    }
}

fn spd_solve(p: &Precision, v: &Vector) -> Vector {
    p.covariance() * v
}

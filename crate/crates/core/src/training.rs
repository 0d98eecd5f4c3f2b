//! Clamping regimes: unsupervised, supervised forward and supervised backward.
//!
//! | mode                  | clamped at 0 | clamped at L | classify      | generate      |
//! |-----------------------|--------------|--------------|---------------|---------------|
//! | `unsupervised`        | data         | free         | unsupported   | sweep from μ_L |
//! | `supervised_forward`  | data         | label        | relax         | sweep         |
//! | `supervised_backward` | label        | data         | sweep         | relax         |

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, PcError, Result};
use crate::linalg::Vector;
use crate::model::{
    em_step_states, predict, run_inference, EpochReport, LearningConfig, NetworkParams, NetworkSpec, NetworkState,
};
use crate::relaxed::{relaxed_downward_sweep, relaxed_em_step_states, relaxed_run_inference, RelaxedNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClampMode {
    #[default]
    Unsupervised,
    SupervisedForward,
    SupervisedBackward,
}

impl ClampMode {
    pub fn is_supervised(self) -> bool {
        self != ClampMode::Unsupervised
    }

    /// Layer holding the observation.
    pub fn data_layer(self, spec: &NetworkSpec) -> usize {
        match self {
            ClampMode::SupervisedBackward => spec.depth(),
            _ => 0,
        }
    }

    /// Layer holding the label, if any.
    pub fn label_layer(self, spec: &NetworkSpec) -> Option<usize> {
        match self {
            ClampMode::Unsupervised => None,
            ClampMode::SupervisedForward => Some(spec.depth()),
            ClampMode::SupervisedBackward => Some(0),
        }
    }

    pub fn label_dim(self, spec: &NetworkSpec) -> Option<usize> {
        self.label_layer(spec).map(|l| spec.dim(l))
    }
}

/// Inputs with optional one-hot labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledBatch {
    pub inputs: Vec<Vector>,
    pub labels: Option<Vec<Vector>>,
}

impl LabeledBatch {
    pub fn unlabeled(inputs: Vec<Vector>) -> Self {
        LabeledBatch { inputs, labels: None }
    }

    /// Builds one-hot (optionally smoothed) labels from class indices.
    pub fn from_indices(inputs: Vec<Vector>, classes: &[usize], num_classes: usize, smoothing: f64) -> Result<Self> {
        ensure_len("labels", classes.len(), inputs.len())?;
        let labels = classes.iter().map(|&c| one_hot(c, num_classes, smoothing)).collect::<Result<Vec<_>>>()?;
        Ok(LabeledBatch { inputs, labels: Some(labels) })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Labels present iff `mode` is supervised; every label sums to 1.
    pub fn validate(&self, mode: ClampMode) -> Result<()> {
        match (&self.labels, mode.is_supervised()) {
            (None, true) => return Err(PcError::Argument("supervised mode needs labels".into())),
            (Some(_), false) => return Err(PcError::Argument("unsupervised mode takes no labels".into())),
            _ => {}
        }
        if let Some(labels) = &self.labels {
            ensure_len("labels", labels.len(), self.inputs.len())?;
            if let Some(bad) = labels.iter().position(|y| (y.sum() - 1.0).abs() > 1e-9) {
                return Err(PcError::Argument(format!("label {bad} does not sum to 1")));
            }
        }
        Ok(())
    }

    pub fn label(&self, i: usize) -> Option<&Vector> {
        self.labels.as_ref().map(|l| &l[i])
    }
}

/// `(1 − s) e_index + s / dim`.
pub fn one_hot(index: usize, dim: usize, smoothing: f64) -> Result<Vector> {
    if index >= dim {
        return Err(PcError::Argument(format!("class {index} out of range for {dim} classes")));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(PcError::Argument(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    let mut v = Vector::from_element(dim, smoothing / dim as f64);
    v[index] += 1.0 - smoothing;
    Ok(v)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &Vector) -> Result<usize> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(PcError::Divergence { location: "label layer".into(), iteration: 0 });
    }
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Clamps data and label into `state` according to `mode`; everything else is released.
pub fn apply_clamps(
    mode: ClampMode,
    input: &Vector,
    label: Option<&Vector>,
    state: &mut NetworkState,
    spec: &NetworkSpec,
) -> Result<()> {
    for l in 0..state.clamped.len() {
        state.release(l);
    }
    state.clamp(mode.data_layer(spec), input.clone())?;
    if let Some(layer) = mode.label_layer(spec) {
        let y = label.ok_or_else(|| PcError::Argument("supervised mode needs a label".into()))?;
        state.clamp(layer, y.clone())?;
    }
    Ok(())
}

/// Downward prediction sweep `μ_{l-1} = f_l(θ_l μ_l)` from layer `from` to 0.
///
/// Costs exactly `from` matrix-vector products.
pub fn downward_sweep(params: &NetworkParams, spec: &NetworkSpec, from: usize, value: &Vector) -> Result<Vec<Vector>> {
    ensure_len("sweep source", value.len(), spec.dim(from))?;
    let mut layers = vec![value.clone()];
    for l in (1..=from).rev() {
        let next = predict(params, spec, l, layers.last().expect("non-empty"));
        layers.push(next);
    }
    layers.reverse();
    if layers.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(PcError::Divergence { location: "prediction sweep".into(), iteration: 0 });
    }
    Ok(layers)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub label: usize,
    pub scores: Vector,
    /// Relaxation iterations used; zero for the sweep direction.
    pub iterations: usize,
}

/// Predicts the class of `input` and reports how much relaxation it took.
pub fn classify_detailed(
    input: &Vector,
    params: &NetworkParams,
    spec: &NetworkSpec,
    mode: ClampMode,
) -> Result<Classification> {
    match mode {
        ClampMode::Unsupervised => Err(PcError::Unsupported("classification needs a supervised mode".into())),
        ClampMode::SupervisedForward => {
            let mut state = NetworkState::zeros(spec);
            state.clamp(0, input.clone())?;
            for l in 1..=spec.depth() {
                state.mu[l] = params.theta(l).tr_mul(&state.mu[l - 1]);
            }
            let report = run_inference(&mut state, params, spec)?;
            let scores = state.top().clone();
            Ok(Classification { label: argmax(&scores)?, scores, iterations: report.iterations })
        }
        ClampMode::SupervisedBackward => {
            let sweep = downward_sweep(params, spec, spec.depth(), input)?;
            let scores = sweep[0].clone();
            Ok(Classification { label: argmax(&scores)?, scores, iterations: 0 })
        }
    }
}

pub fn classify(input: &Vector, params: &NetworkParams, spec: &NetworkSpec, mode: ClampMode) -> Result<usize> {
    Ok(classify_detailed(input, params, spec, mode)?.label)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub observation: Vector,
    pub iterations: usize,
}

/// Synthesises an observation from a label (or, unsupervised, from a top-layer value).
pub fn generate_detailed(
    label: &Vector,
    params: &NetworkParams,
    spec: &NetworkSpec,
    mode: ClampMode,
) -> Result<Generation> {
    match mode {
        ClampMode::Unsupervised | ClampMode::SupervisedForward => {
            let sweep = downward_sweep(params, spec, spec.depth(), label)?;
            Ok(Generation { observation: sweep[0].clone(), iterations: 0 })
        }
        ClampMode::SupervisedBackward => {
            let mut state = NetworkState::zeros(spec);
            state.clamp(0, label.clone())?;
            for l in 1..=spec.depth() {
                state.mu[l] = params.theta(l).tr_mul(&state.mu[l - 1]);
            }
            let report = run_inference(&mut state, params, spec)?;
            Ok(Generation { observation: state.top().clone(), iterations: report.iterations })
        }
    }
}

pub fn generate(label: &Vector, params: &NetworkParams, spec: &NetworkSpec, mode: ClampMode) -> Result<Vector> {
    Ok(generate_detailed(label, params, spec, mode)?.observation)
}

/// Fraction of items whose argmax label matches [`classify`]; evaluated in parallel.
pub fn accuracy(batch: &LabeledBatch, params: &NetworkParams, spec: &NetworkSpec, mode: ClampMode) -> Result<f64> {
    batch.validate(mode)?;
    if batch.is_empty() {
        return Err(PcError::Argument("empty evaluation set".into()));
    }
    let labels = batch.labels.as_ref().expect("validated");
    let correct = batch
        .inputs
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, y)| Ok(usize::from(classify(x, params, spec, mode)? == argmax(y)?)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: ClampMode,
    pub batch_size: usize,
    pub learning: LearningConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { mode: ClampMode::default(), batch_size: 32, learning: LearningConfig::default() }
    }
}

/// One pass over `batch` in shuffled minibatches.
///
/// The report averages the per-minibatch reports weighted by size.
pub fn train_epoch<R: Rng + ?Sized>(
    batch: &LabeledBatch,
    params: &mut NetworkParams,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<EpochReport> {
    run_epoch(batch, spec, cfg, rng, |states, rng| em_step_states(states, params, spec, &cfg.learning, rng))
}

/// [`train_epoch`] with the relaxed inference and learning rules of `net`.
pub fn train_epoch_relaxed<R: Rng + ?Sized>(
    batch: &LabeledBatch,
    params: &mut NetworkParams,
    net: &mut RelaxedNetwork,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<EpochReport> {
    run_epoch(batch, spec, cfg, rng, |states, rng| relaxed_em_step_states(states, params, net, spec, &cfg.learning, rng))
}

fn run_epoch<R: Rng + ?Sized>(
    batch: &LabeledBatch,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    rng: &mut R,
    mut step: impl FnMut(&mut [NetworkState], &mut R) -> Result<EpochReport>,
) -> Result<EpochReport> {
    batch.validate(cfg.mode)?;
    if batch.is_empty() {
        return Err(PcError::Argument("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(PcError::Argument("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.shuffle(rng);
    let mut total = EpochReport {
        items: 0,
        mean_free_energy: 0.0,
        mean_relaxed_free_energy: 0.0,
        mean_iterations: 0.0,
        layer_error_norms: vec![0.0; spec.depth() + 1],
    };
    for chunk in order.chunks(cfg.batch_size) {
        let mut states = chunk
            .iter()
            .map(|&i| {
                let mut s = NetworkState::zeros(spec);
                apply_clamps(cfg.mode, &batch.inputs[i], batch.label(i), &mut s, spec)?;
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        let r = step(&mut states, rng)?;
        let w = r.items as f64;
        total.items += r.items;
        total.mean_free_energy += r.mean_free_energy * w;
        total.mean_relaxed_free_energy += r.mean_relaxed_free_energy * w;
        total.mean_iterations += r.mean_iterations * w;
        for (a, b) in total.layer_error_norms.iter_mut().zip(&r.layer_error_norms) {
            *a += b * w;
        }
    }
    let n = total.items as f64;
    total.mean_free_energy /= n;
    total.mean_relaxed_free_energy /= n;
    total.mean_iterations /= n;
    total.layer_error_norms.iter_mut().for_each(|v| *v /= n);
    Ok(total)
}

/// [`classify_detailed`] under the relaxed rules of `net`: the backward sweep
/// passes through `ζ`, forward relaxation uses `ψ` and the derivative flag.
pub fn classify_relaxed(
    input: &Vector,
    params: &NetworkParams,
    net: &RelaxedNetwork,
    spec: &NetworkSpec,
    mode: ClampMode,
) -> Result<Classification> {
    match mode {
        ClampMode::Unsupervised => Err(PcError::Unsupported("classification needs a supervised mode".into())),
        ClampMode::SupervisedForward => {
            let mut state = NetworkState::zeros(spec);
            state.clamp(0, input.clone())?;
            for l in 1..=spec.depth() {
                state.mu[l] = params.theta(l).tr_mul(&state.mu[l - 1]);
            }
            let report = relaxed_run_inference(&mut state, params, spec, net)?;
            let scores = state.top().clone();
            Ok(Classification { label: argmax(&scores)?, scores, iterations: report.iterations })
        }
        ClampMode::SupervisedBackward => {
            let scores = relaxed_downward_sweep(params, spec, net, input)?;
            Ok(Classification { label: argmax(&scores)?, scores, iterations: 0 })
        }
    }
}

/// [`accuracy`] under the relaxed rules of `net`.
pub fn accuracy_relaxed(
    batch: &LabeledBatch,
    params: &NetworkParams,
    net: &RelaxedNetwork,
    spec: &NetworkSpec,
    mode: ClampMode,
) -> Result<f64> {
    batch.validate(mode)?;
    if batch.is_empty() {
        return Err(PcError::Argument("empty evaluation set".into()));
    }
    let labels = batch.labels.as_ref().expect("validated");
    let correct = batch
        .inputs
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, y)| Ok(usize::from(classify_relaxed(x, params, net, spec, mode)?.label == argmax(y)?)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / batch.len() as f64)
}

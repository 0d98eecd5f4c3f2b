use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{PcError, Result};
use crate::graph::Schedule;
use crate::precision::PrecisionMode;
use crate::relaxed::RelaxationFlags;
use crate::training::ClampMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Train,
    Classify,
    Generate,
    KalmanCompare,
    BackpropCompare,
    PidCompare,
    PrecisionStudy,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::Train,
        ExperimentKind::Classify,
        ExperimentKind::Generate,
        ExperimentKind::KalmanCompare,
        ExperimentKind::BackpropCompare,
        ExperimentKind::PidCompare,
        ExperimentKind::PrecisionStudy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Train => "train",
            ExperimentKind::Classify => "classify",
            ExperimentKind::Generate => "generate",
            ExperimentKind::KalmanCompare => "kalman-compare",
            ExperimentKind::BackpropCompare => "backprop-compare",
            ExperimentKind::PidCompare => "pid-compare",
            ExperimentKind::PrecisionStudy => "precision-study",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = PcError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| PcError::Config(format!("unknown experiment kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub layer_dims: Vec<usize>,
    /// One entry per latent layer, or a single entry applied to all.
    pub activations: Vec<Activation>,
    pub step_size: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            layer_dims: vec![10, 128, 784],
            activations: vec![Activation::Logistic, Activation::Tanh],
            step_size: 0.1,
            max_iters: 100,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub mode: ClampMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_lr: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            mode: ClampMode::SupervisedBackward,
            epochs: 30,
            batch_size: 20,
            weight_lr: 1.0,
            weight_decay: 0.0,
            label_smoothing: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrecisionSection {
    pub mode: PrecisionMode,
    pub lr: f64,
}

impl Default for PrecisionSection {
    fn default() -> Self {
        PrecisionSection { mode: PrecisionMode::Fixed, lr: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSection {
    /// IDX files named `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
    /// `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte` in `dir`.
    Idx {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    /// Gaussian clusters; input dimension and class count follow the network's data and label layers.
    Clusters {
        n_train: usize,
        n_test: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_noise")]
        noise: f64,
    },
}

fn default_separation() -> f64 {
    3.0
}

fn default_noise() -> f64 {
    0.5
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection::Clusters { n_train: 400, n_test: 200, separation: default_separation(), noise: default_noise() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KalmanSection {
    pub systems: usize,
    pub steps: usize,
    pub state_dim: usize,
    pub obs_dim: usize,
    pub control_dim: usize,
}

impl Default for KalmanSection {
    fn default() -> Self {
        KalmanSection { systems: 20, steps: 100, state_dim: 4, obs_dim: 3, control_dim: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackpropSection {
    /// Layer sizes of the random MLPs.
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub graphs: usize,
    pub relax_step: f64,
    pub schedule: Schedule,
}

impl Default for BackpropSection {
    fn default() -> Self {
        BackpropSection { dims: vec![8, 16, 16, 4], activation: Activation::Tanh, graphs: 10, relax_step: 0.5, schedule: Schedule::Jacobi }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PidSection {
    /// `[σ_z⁻¹, σ_z′⁻¹, σ_z″⁻¹]`.
    pub precisions: [f64; 3],
    pub dt: f64,
    pub steps: usize,
    pub target: f64,
    /// Step disturbances as `[start_step, magnitude]` pairs; each persists until the next.
    pub disturbances: Vec<(usize, f64)>,
}

impl Default for PidSection {
    fn default() -> Self {
        PidSection {
            precisions: [1.0, 1.5, 0.1],
            dt: 0.01,
            steps: 10_000,
            target: 1.0,
            disturbances: vec![(3000, 0.5), (6000, -0.5)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrecisionStudySection {
    pub errors: Vec<f64>,
    pub lr: f64,
    pub steps: usize,
    pub samples: usize,
}

impl Default for PrecisionStudySection {
    fn default() -> Self {
        PrecisionStudySection { errors: vec![1.0, 8.0, 27.0], lr: 0.05, steps: 20_000, samples: 100_000 }
    }
}

/// A complete experiment description, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    /// Metrics file (JSON lines).
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Learned parameters: written by `train`, read by `classify` and `generate`.
    #[serde(default)]
    pub params: Option<PathBuf>,
    /// Record wall-clock milliseconds; off by default so reruns are byte-identical.
    #[serde(default)]
    pub timing: bool,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub relaxation: RelaxationFlags,
    #[serde(default)]
    pub precision: PrecisionSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub kalman: KalmanSection,
    #[serde(default)]
    pub backprop: BackpropSection,
    #[serde(default)]
    pub pid: PidSection,
    #[serde(default)]
    pub precision_study: PrecisionStudySection,
}

fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets the dotted `key` in `table` to `value`, creating intermediate tables.
fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| PcError::Config(format!("empty override key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| PcError::Config(format!("override {key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// A default configuration of the given kind.
    pub fn of_kind(kind: ExperimentKind) -> Self {
        ExperimentConfig {
            kind,
            seed: 0,
            output: None,
            params: None,
            timing: false,
            network: NetworkSection::default(),
            training: TrainingSection::default(),
            relaxation: RelaxationFlags::default(),
            precision: PrecisionSection::default(),
            dataset: DatasetSection::default(),
            kalman: KalmanSection::default(),
            backprop: BackpropSection::default(),
            pid: PidSection::default(),
            precision_study: PrecisionStudySection::default(),
        }
    }

    /// Parses TOML, applies `key=value` overrides, then validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| PcError::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| PcError::Config(format!("override {o:?} is not key=value")))?;
            set_dotted(&mut table, k.trim(), parse_override_value(v.trim()))?;
        }
        let cfg: ExperimentConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| PcError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PcError::Config(e.to_string()))
    }

    /// Range checks on every numeric field.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PcError::Config(m));
        let positive = |name: &str, v: f64| if v > 0.0 && v.is_finite() { Ok(()) } else { bad(format!("{name} must be positive, got {v}")) };
        if i64::try_from(self.seed).is_err() {
            return bad(format!("seed must be at most {}", i64::MAX));
        }
        let n = &self.network;
        if n.layer_dims.len() < 2 || n.layer_dims.contains(&0) {
            return bad("network.layer_dims needs at least two positive sizes".into());
        }
        if n.activations.len() != 1 && n.activations.len() != n.layer_dims.len() - 1 {
            return bad(format!("network.activations needs 1 or {} entries", n.layer_dims.len() - 1));
        }
        positive("network.step_size", n.step_size)?;
        positive("network.tol", n.tol)?;
        if n.max_iters == 0 {
            return bad("network.max_iters must be positive".into());
        }
        let t = &self.training;
        if t.epochs == 0 || t.batch_size == 0 {
            return bad("training.epochs and training.batch_size must be positive".into());
        }
        positive("training.weight_lr", t.weight_lr)?;
        if !(t.weight_decay >= 0.0) {
            return bad("training.weight_decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&t.label_smoothing) {
            return bad("training.label_smoothing must lie in [0, 1)".into());
        }
        positive("precision.lr", self.precision.lr)?;
        match &self.dataset {
            DatasetSection::Idx { train_limit, test_limit, .. } => {
                if *train_limit == Some(0) || *test_limit == Some(0) {
                    return bad("dataset limits must be positive".into());
                }
            }
            DatasetSection::Clusters { n_train, n_test, separation, noise } => {
                if *n_train == 0 || *n_test == 0 {
                    return bad("dataset.n_train and dataset.n_test must be positive".into());
                }
                positive("dataset.separation", *separation)?;
                if !(*noise >= 0.0) {
                    return bad("dataset.noise must be non-negative".into());
                }
            }
        }
        let k = &self.kalman;
        if k.systems == 0 || k.steps == 0 || k.state_dim == 0 || k.obs_dim == 0 {
            return bad("kalman sizes must be positive".into());
        }
        let b = &self.backprop;
        if b.dims.len() < 2 || b.dims.contains(&0) || b.graphs == 0 {
            return bad("backprop.dims needs at least two positive sizes and graphs > 0".into());
        }
        positive("backprop.relax_step", b.relax_step)?;
        let p = &self.pid;
        positive("pid.dt", p.dt)?;
        if p.precisions.iter().any(|v| !(*v >= 0.0)) || p.steps == 0 {
            return bad("pid.precisions must be non-negative and pid.steps positive".into());
        }
        let s = &self.precision_study;
        if s.errors.is_empty() || s.steps == 0 || s.samples < crate::precision::MIN_FIXED_POINT_SAMPLES {
            return bad("precision_study needs errors, steps > 0 and samples >= 100".into());
        }
        positive("precision_study.lr", s.lr)?;
        Ok(())
    }

    /// Activations expanded to one per latent layer.
    pub fn activations(&self) -> Vec<Activation> {
        let depth = self.network.layer_dims.len() - 1;
        if self.network.activations.len() == 1 {
            vec![self.network.activations[0]; depth]
        } else {
            self.network.activations.clone()
        }
    }
}

//! Run configuration: one JSON document, validated before any work starts.

use std::path::{Path, PathBuf};

use ousb::fm::{Integrator, LrSchedule, ScoreWeight, TrainConfig};
use ousb::nn::AdamWConfig;
use ousb::kernel::DEFAULT_NODES;
use ousb::process::{GaussianJson, ProcessJson};
use ousb::refit::{default_lambda_grid, RefitConfig};
use ousb::{Gaussian, OUProcess};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::experiments::{GaussianProtocol, MixtureProtocol, RepressilatorProtocol, RepressilatorSystem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessFile {
    pub file: PathBuf,
}

/// A reference process given inline or as `{"file": "path.json"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProcessSpec {
    File(ProcessFile),
    Inline(ProcessJson),
}

/// Network and optimiser settings. Coupling settings live in `sinkhorn`,
/// quadrature resolution and seed at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch: usize,
    pub iterations: usize,
    pub hidden: Vec<usize>,
    pub optimizer: AdamWConfig,
    pub lr_schedule: LrSchedule,
    pub score_weight: ScoreWeight,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            batch: d.batch,
            iterations: d.iterations,
            hidden: d.hidden,
            optimizer: d.optimizer,
            lr_schedule: d.lr_schedule,
            score_weight: d.score_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornSection {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornSection {
    fn default() -> Self {
        let d = ousb::eot::SinkhornConfig::default();
        Self {
            epsilon: d.epsilon,
            max_iters: d.max_iters,
            tol: d.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefitSection {
    pub outer_iters: usize,
    pub lambda_grid: Vec<f64>,
    pub folds: usize,
    /// Hold out every interior snapshot in turn and score the prediction.
    pub leave_one_out: bool,
    /// Diffusion scale of the Brownian reference used when no `process` is
    /// configured.
    pub initial_sigma: f64,
}

impl Default for RefitSection {
    fn default() -> Self {
        Self {
            outer_iters: 5,
            lambda_grid: default_lambda_grid(),
            folds: 5,
            leave_one_out: false,
            initial_sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    /// Integration steps per unit time.
    pub steps_per_unit: usize,
    pub integrator: Integrator,
    /// Output times; empty means 11 evenly spaced times over the horizon.
    pub times: Vec<f64>,
    /// Samples per output time.
    pub samples: usize,
    /// Euler step for synthetic data.
    pub dt: f64,
    /// Initial law for `simulate --system ou`.
    pub initial: Option<GaussianJson>,
    /// Example paths written by `simulate --system repressilator`.
    pub paths: usize,
    pub repressilator: RepressilatorSystem,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            steps_per_unit: 100,
            integrator: Integrator::Sde,
            times: Vec::new(),
            samples: 100,
            dt: ousb::sim::REPRESSILATOR_DT,
            initial: None,
            paths: 10,
            repressilator: RepressilatorSystem::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// Squared Euclidean ground cost for EMD.
    pub emd_squared: bool,
    /// Monte-Carlo samples per time for the force error.
    pub force_samples: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            emd_squared: false,
            force_samples: 1024,
        }
    }
}

/// Benchmark protocols. These are self-contained: the top-level training
/// sections do not apply to them.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSection {
    pub gaussian: GaussianProtocol,
    pub mixture: MixtureProtocol,
    pub repressilator: RepressilatorProtocol,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub process: Option<ProcessSpec>,
    pub horizon: f64,
    pub nodes: usize,
    pub seed: u64,
    pub train: TrainSection,
    pub sinkhorn: SinkhornSection,
    pub refit: RefitSection,
    pub sim: SimSection,
    pub metrics: MetricsSection,
    pub benchmark: BenchmarkSection,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            process: None,
            horizon: 1.0,
            nodes: DEFAULT_NODES,
            seed: 0,
            train: TrainSection::default(),
            sinkhorn: SinkhornSection::default(),
            refit: RefitSection::default(),
            sim: SimSection::default(),
            metrics: MetricsSection::default(),
            benchmark: BenchmarkSection::default(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    /// Parse and validate; relative process files resolve against `base`.
    pub fn from_json_str(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        if let Some(ProcessSpec::File(ProcessFile { file })) = &mut cfg.process {
            if file.is_relative() {
                *file = base.join(&*file);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => {
                let cfg = RunConfig::default();
                cfg.validate()?;
                Ok(cfg)
            }
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_json_str(&text, p.parent().unwrap_or(Path::new(".")))
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Usage(format!("invalid config: {m}")));
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("horizon must be positive");
        }
        if self.nodes < 2 {
            return bad("nodes must be at least 2");
        }
        self.train_config()
            .validate()
            .map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        if !(self.refit.initial_sigma > 0.0 && self.refit.initial_sigma.is_finite()) {
            return bad("refit.initial_sigma must be positive");
        }
        if self.refit.outer_iters == 0 || self.refit.folds < 2 {
            return bad("refit needs outer_iters >= 1 and folds >= 2");
        }
        if self.refit.lambda_grid.is_empty() || self.refit.lambda_grid.iter().any(|l| !(*l >= 0.0)) {
            return bad("lambda_grid must be nonempty and nonnegative");
        }
        if self.sim.steps_per_unit == 0 || self.sim.samples == 0 || !(self.sim.dt > 0.0) {
            return bad("sim steps, samples and dt must be positive");
        }
        if self.sim.times.windows(2).any(|w| !(w[1] > w[0])) || self.sim.times.iter().any(|t| !(*t >= 0.0)) {
            return bad("sim.times must be nonnegative and increasing");
        }
        let b = &self.benchmark;
        for t in [&b.gaussian.train, &b.mixture.train, &b.repressilator.refit.train] {
            t.validate()
                .map_err(|e| CliError::Usage(format!("invalid config: benchmark: {e}")))?;
        }
        if self.metrics.force_samples == 0 {
            return bad("metrics.force_samples must be positive");
        }
        Ok(())
    }

    /// Training settings with the run seed.
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch: t.batch,
            iterations: t.iterations,
            hidden: t.hidden.clone(),
            optimizer: t.optimizer,
            lr_schedule: t.lr_schedule,
            score_weight: t.score_weight,
            sinkhorn_epsilon: self.sinkhorn.epsilon,
            sinkhorn_max_iters: self.sinkhorn.max_iters,
            sinkhorn_tol: self.sinkhorn.tol,
            nodes: self.nodes,
            seed: self.seed,
        }
    }

    pub fn sinkhorn_config(&self) -> ousb::eot::SinkhornConfig {
        ousb::eot::SinkhornConfig {
            epsilon: self.sinkhorn.epsilon,
            max_iters: self.sinkhorn.max_iters,
            tol: self.sinkhorn.tol,
        }
    }

    pub fn refit_config(&self) -> RefitConfig {
        RefitConfig {
            outer_iters: self.refit.outer_iters,
            lambda_grid: self.refit.lambda_grid.clone(),
            folds: self.refit.folds,
            train: self.train_config(),
        }
    }

    /// The configured process, or a Brownian reference of dimension `d`.
    pub fn process_or_brownian(&self, d: usize) -> Result<OUProcess, CliError> {
        match self.process {
            Some(_) => {
                let p = self.process()?;
                if p.dim() != d {
                    return Err(CliError::Data(format!("process has dimension {}, data has {d}", p.dim())));
                }
                Ok(p)
            }
            None => Ok(OUProcess::brownian(d, self.refit.initial_sigma)?),
        }
    }

    pub fn process(&self) -> Result<OUProcess, CliError> {
        let json = match &self.process {
            None => return Err(CliError::Usage("this command needs a `process` in the config".into())),
            Some(ProcessSpec::Inline(p)) => p.clone(),
            Some(ProcessSpec::File(ProcessFile { file })) => {
                let text = std::fs::read_to_string(file)
                    .map_err(|e| CliError::Data(format!("cannot read process file {}: {e}", file.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Data(format!("process file {}: {e}", file.display())))?
            }
        };
        Ok(OUProcess::from_json(&json)?)
    }

    /// Output times over `[0, horizon]`.
    pub fn output_times(&self, horizon: f64) -> Vec<f64> {
        if self.sim.times.is_empty() {
            ousb::sim::uniform_grid(0.0, horizon, 10)
        } else {
            self.sim.times.clone()
        }
    }
}

pub fn read_gaussian(path: &Path) -> Result<Gaussian, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let json: GaussianJson =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(Gaussian::from_json(&json)?)
}

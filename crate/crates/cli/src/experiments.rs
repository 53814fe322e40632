//! Benchmark pipelines: the Gaussian benchmark with its Brownian ablation,
//! Gaussian mixtures, and repressilator refitting with leave-one-out scores.

use nalgebra::{DMatrix, DVector};
use ousb::fm::{integrate, sb_drift, train, Checkpoint, Integrator, Snapshot, TrainConfig};
use ousb::gsb::{self, GSBProblem, GSBSolution};
use ousb::metrics::{bw2, emd, energy_distance, force_error};
use ousb::process::row_major;
use ousb::refit::{iterated_refit, leave_one_out_all, PredictConfig, RefitConfig};
use ousb::rng::{derive_seed, rng, standard_normal};
use ousb::sim::{self, uniform_grid, Cloud, RepressilatorParams};
use ousb::{Gaussian, KernelCache, OUProcess};
use serde::{Deserialize, Serialize};

/// Names of the two references compared in the synthetic experiments.
pub const MVOU: &str = "mvou";
pub const BROWNIAN: &str = "brownian";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianProtocol {
    pub d: usize,
    pub seed: u64,
    pub train: TrainConfig,
    /// Fresh initial samples pushed through the learned SDE.
    pub eval_samples: usize,
    pub steps: usize,
    /// Evaluation times (as multiples of the `1 / steps` grid).
    pub eval_times: Vec<f64>,
    pub force_samples: usize,
}

impl Default for GaussianProtocol {
    fn default() -> Self {
        Self {
            d: 2,
            seed: 0,
            train: TrainConfig::default(),
            eval_samples: 1024,
            steps: 100,
            eval_times: (1..=10).map(|k| k as f64 / 10.0).collect(),
            force_samples: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScore {
    pub reference: String,
    pub bw2: Vec<f64>,
    pub mean_bw2: f64,
    pub force_error: f64,
    pub force_error_se: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianReport {
    pub experiment: String,
    pub d: usize,
    pub seed: u64,
    pub samples: usize,
    pub times: Vec<f64>,
    pub results: Vec<ReferenceScore>,
}

impl GaussianReport {
    pub fn score(&self, reference: &str) -> Option<&ReferenceScore> {
        self.results.iter().find(|r| r.reference == reference)
    }
}

fn two_snapshots(x0: &Cloud, x1: &Cloud) -> Vec<Snapshot> {
    vec![
        Snapshot {
            t: 0.0,
            points: x0.clone(),
        },
        Snapshot {
            t: 1.0,
            points: x1.clone(),
        },
    ]
}

/// Train with the true reference and with a unit Brownian one, in parallel.
fn train_pair(snaps: &[Snapshot], truth: &OUProcess, config: &TrainConfig) -> ousb::Result<(Checkpoint, Checkpoint)> {
    let brownian = OUProcess::brownian(truth.dim(), 1.0)?;
    let (a, b) = rayon::join(|| train(snaps, truth, config), || train(snaps, &brownian, config));
    Ok((a?, b?))
}

fn record_indices(times: &[f64], steps: usize) -> ousb::Result<Vec<usize>> {
    times
        .iter()
        .map(|&t| {
            let k = (t * steps as f64).round();
            if !(0.0..=steps as f64).contains(&k) || (k / steps as f64 - t).abs() > 1e-12 {
                return Err(ousb::Error::InvalidArgument(format!("evaluation time {t} is not on the grid")));
            }
            Ok(k as usize)
        })
        .collect()
}

fn draw(g: &Gaussian, n: usize, seed: u64) -> Cloud {
    let f = ousb::linalg::psd_factor(g.cov());
    let mut r = rng(seed);
    (0..n).map(|_| g.mean() + &f * standard_normal(&mut r, g.dim())).collect()
}

fn score_reference(
    name: &str,
    ckpt: &Checkpoint,
    truth: &GSBSolution,
    protocol: &GaussianProtocol,
    start: &Cloud,
) -> ousb::Result<ReferenceScore> {
    let grid = uniform_grid(0.0, 1.0, protocol.steps);
    let record = record_indices(&protocol.eval_times, protocol.steps)?;
    let clouds = integrate(ckpt, start, &grid, Integrator::Sde, &record, derive_seed(protocol.seed, 21))?;
    let laws = gsb::gsb_marginal_interpolate(truth, &protocol.eval_times)?;
    let bw: Vec<f64> = clouds
        .iter()
        .zip(&laws)
        .map(|(c, law)| bw2(&Gaussian::fit(c, ousb::metrics::FIT_JITTER)?, law))
        .collect::<ousb::Result<_>>()?;
    let drifts: Vec<_> = protocol
        .eval_times
        .iter()
        .map(|&t| truth.drift_at(t))
        .collect::<ousb::Result<_>>()?;
    let force = force_error(
        |t, x| sb_drift(ckpt, t, x).expect("dimensions match"),
        |t, x| {
            let k = protocol.eval_times.iter().position(|&s| s == t).expect("evaluation time");
            drifts[k].eval(x)
        },
        &laws,
        &protocol.eval_times,
        protocol.force_samples,
        derive_seed(protocol.seed, 22),
    )?;
    Ok(ReferenceScore {
        reference: name.to_string(),
        mean_bw2: bw.iter().sum::<f64>() / bw.len() as f64,
        bw2: bw,
        force_error: force.value,
        force_error_se: force.std_error.unwrap_or(0.0),
        final_loss: ckpt.meta.loss_history.last().copied().unwrap_or(f64::NAN),
    })
}

/// Rotational benchmark: learned marginals against the closed-form bridge,
/// for the true reference and the Brownian ablation.
pub fn run_gaussian(protocol: &GaussianProtocol) -> ousb::Result<GaussianReport> {
    let bench = sim::gaussian_benchmark(protocol.d, protocol.seed)?;
    let cache = KernelCache::new(&bench.process, 1.0, protocol.train.nodes)?;
    let truth = gsb::solve(GSBProblem::new(cache, bench.rho0.clone(), bench.rho1.clone())?)?;
    let config = TrainConfig {
        seed: protocol.seed,
        ..protocol.train.clone()
    };
    let snaps = two_snapshots(&bench.x0, &bench.x1);
    let (mvou, brownian) = train_pair(&snaps, &bench.process, &config)?;
    let start = draw(&bench.rho0, protocol.eval_samples, derive_seed(protocol.seed, 20));
    let results = vec![
        score_reference(MVOU, &mvou, &truth, protocol, &start)?,
        score_reference(BROWNIAN, &brownian, &truth, protocol, &start)?,
    ];
    Ok(GaussianReport {
        experiment: "gaussian".into(),
        d: protocol.d,
        seed: protocol.seed,
        samples: bench.x0.len(),
        times: protocol.eval_times.clone(),
        results,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureProtocol {
    pub d: usize,
    pub seed: u64,
    pub samples: usize,
    pub train: TrainConfig,
    pub steps: usize,
}

impl Default for MixtureProtocol {
    fn default() -> Self {
        Self {
            d: 2,
            seed: 0,
            samples: sim::BENCHMARK_SAMPLES,
            train: TrainConfig::default(),
            steps: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointScore {
    pub reference: String,
    pub energy: f64,
    pub emd: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureReport {
    pub experiment: String,
    pub d: usize,
    pub seed: u64,
    pub samples: usize,
    pub results: Vec<EndpointScore>,
}

/// Mixture endpoints under the rotational reference: push the initial
/// samples to `t = 1` and compare with the terminal samples.
pub fn run_mixture(protocol: &MixtureProtocol) -> ousb::Result<MixtureReport> {
    let data = sim::gaussian_mixture_data(protocol.d, protocol.samples, protocol.seed)?;
    let config = TrainConfig {
        seed: protocol.seed,
        ..protocol.train.clone()
    };
    let snaps = two_snapshots(&data.x0, &data.x1);
    let (mvou, brownian) = train_pair(&snaps, &data.process, &config)?;
    let grid = uniform_grid(0.0, 1.0, protocol.steps);
    let mut results = Vec::new();
    for (name, ckpt) in [(MVOU, &mvou), (BROWNIAN, &brownian)] {
        let end = integrate(ckpt, &data.x0, &grid, Integrator::Sde, &[protocol.steps], derive_seed(protocol.seed, 21))?;
        results.push(EndpointScore {
            reference: name.to_string(),
            energy: energy_distance(&end[0], &data.x1)?,
            emd: emd(&end[0], &data.x1, false)?.value,
            final_loss: ckpt.meta.loss_history.last().copied().unwrap_or(f64::NAN),
        });
    }
    Ok(MixtureReport {
        experiment: "mixture".into(),
        d: protocol.d,
        seed: protocol.seed,
        samples: protocol.samples,
        results,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RepressilatorProtocol {
    pub seed: u64,
    pub system: RepressilatorSystem,
    pub samples: usize,
    pub times: Vec<f64>,
    pub dt: f64,
    /// Diffusion scale of the initial Brownian reference.
    pub initial_sigma: f64,
    pub refit: RefitConfig,
    pub predict_steps_per_unit: usize,
    /// Also score leave-one-out prediction of every interior snapshot.
    pub leave_one_out: bool,
}

/// Serializable mirror of [`RepressilatorParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepressilatorSystem {
    pub beta: f64,
    pub n: f64,
    pub k: f64,
    pub gamma: f64,
    pub sigma: f64,
}

impl Default for RepressilatorSystem {
    fn default() -> Self {
        let p = RepressilatorParams::default();
        Self {
            beta: p.beta,
            n: p.n,
            k: p.k,
            gamma: p.gamma,
            sigma: p.sigma,
        }
    }
}

impl From<RepressilatorSystem> for RepressilatorParams {
    fn from(s: RepressilatorSystem) -> Self {
        RepressilatorParams {
            beta: s.beta,
            n: s.n,
            k: s.k,
            gamma: s.gamma,
            sigma: s.sigma,
        }
    }
}

/// Reference noise and coupling tolerances for the repressilator runs.
pub const REPRESSILATOR_REFERENCE_SIGMA: f64 = 0.2;
pub const REPRESSILATOR_SINKHORN_TOL: f64 = 1e-6;
pub const REPRESSILATOR_SINKHORN_MAX_ITERS: usize = 100_000;

impl Default for RepressilatorProtocol {
    fn default() -> Self {
        let mut refit = RefitConfig::default();
        refit.train.sinkhorn_tol = REPRESSILATOR_SINKHORN_TOL;
        refit.train.sinkhorn_max_iters = REPRESSILATOR_SINKHORN_MAX_ITERS;
        Self {
            seed: 0,
            system: RepressilatorSystem::default(),
            samples: 100,
            times: uniform_grid(0.0, 10.0, 9),
            dt: sim::REPRESSILATOR_DT,
            initial_sigma: REPRESSILATOR_REFERENCE_SIGMA,
            refit,
            predict_steps_per_unit: 100,
            leave_one_out: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    /// Row-major fitted drift matrix.
    pub drift: Vec<f64>,
    pub target: Vec<f64>,
    pub lambda: f64,
    pub drift_change: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_loo_energy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_loo_emd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutScores {
    pub held_out: usize,
    pub t: f64,
    pub energy: Vec<f64>,
    pub emd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepressilatorReport {
    pub experiment: String,
    pub seed: u64,
    pub fixed_point: f64,
    /// Row-major Jacobian of the system at its fixed point.
    pub jacobian: Vec<f64>,
    pub iterations: Vec<IterationSummary>,
    pub holdouts: Vec<HoldoutScores>,
    /// Whether the last fitted drift has the sign of the Jacobian on the three
    /// inhibition entries `(0,2)`, `(1,0)`, `(2,1)`.
    pub inhibition_signs_match: bool,
}

/// Entries where gene `i` is repressed by its predecessor.
pub const INHIBITION_ENTRIES: [(usize, usize); 3] = [(0, 2), (1, 0), (2, 1)];

pub fn signs_match(fitted: &DMatrix<f64>, jacobian: &DMatrix<f64>) -> bool {
    INHIBITION_ENTRIES
        .iter()
        .all(|&(i, j)| fitted[(i, j)] != 0.0 && fitted[(i, j)].signum() == jacobian[(i, j)].signum())
}

pub fn repressilator_data(protocol: &RepressilatorProtocol) -> ousb::Result<Vec<Snapshot>> {
    let clouds = sim::repressilator_snapshots(
        &protocol.system.into(),
        protocol.samples,
        &protocol.times,
        protocol.dt,
        protocol.seed,
    )?;
    Ok(protocol
        .times
        .iter()
        .zip(clouds)
        .map(|(&t, points)| Snapshot { t, points })
        .collect())
}

/// Refit on all snapshots for the drift estimate, and optionally on each
/// leave-one-out split for prediction error.
pub fn run_repressilator(protocol: &RepressilatorProtocol) -> ousb::Result<RepressilatorReport> {
    let params: RepressilatorParams = protocol.system.into();
    let snaps = repressilator_data(protocol)?;
    let initial = OUProcess::brownian(3, protocol.initial_sigma)?;
    let mut refit = protocol.refit.clone();
    refit.train.seed = protocol.seed;
    let predict = PredictConfig {
        steps_per_unit: protocol.predict_steps_per_unit,
        seed: derive_seed(protocol.seed, 30),
    };
    let (full, loo) = rayon::join(
        || iterated_refit(&snaps, &initial, &refit),
        || {
            if protocol.leave_one_out {
                leave_one_out_all(&snaps, &initial, &refit, predict).map(Some)
            } else {
                Ok(None)
            }
        },
    );
    let (full, loo) = (full?, loo?);
    let holdouts: Vec<HoldoutScores> = loo
        .iter()
        .flatten()
        .map(|r| HoldoutScores {
            held_out: r.held_out,
            t: snaps[r.held_out].t,
            energy: r.scores.iter().map(|s| s.energy).collect(),
            emd: r.scores.iter().map(|s| s.emd).collect(),
        })
        .collect();
    let mean_at = |k: usize, f: fn(&HoldoutScores) -> &Vec<f64>| -> Option<f64> {
        (!holdouts.is_empty()).then(|| holdouts.iter().map(|h| f(h)[k]).sum::<f64>() / holdouts.len() as f64)
    };
    let iterations = full
        .history
        .iter()
        .enumerate()
        .map(|(k, it)| IterationSummary {
            iteration: it.iteration,
            drift: row_major(&it.fit.drift),
            target: it.fit.target.iter().copied().collect(),
            lambda: it.fit.lambda,
            drift_change: it.drift_change,
            mean_loo_energy: mean_at(k, |h| &h.energy),
            mean_loo_emd: mean_at(k, |h| &h.emd),
        })
        .collect();
    let fixed = params.fixed_point();
    let jacobian = params.jacobian(&DVector::from_element(3, fixed));
    Ok(RepressilatorReport {
        experiment: "repressilator".into(),
        seed: protocol.seed,
        fixed_point: fixed,
        jacobian: row_major(&jacobian),
        iterations,
        holdouts,
        inhibition_signs_match: signs_match(full.process.drift(), &jacobian),
    })
}

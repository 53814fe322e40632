//! Subcommand implementations. Each command validates its configuration and
//! computes everything before the output directory is touched.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use ousb::bridge::{bridge_moments, bridge_sample, BridgePin};
use ousb::eot::{mvou_cost, sinkhorn, uniform};
use ousb::fm::{integrate, train, Checkpoint, CheckpointJson, Snapshot};
use ousb::gsb::{self, GSBProblem};
use ousb::io::{
    merge_snapshots, read_snapshots_file, write_plan_triplets, write_snapshots, write_table, write_trajectories,
};
use ousb::metrics::{bw2_samples, emd, energy_distance};
use ousb::process::{row_major, GaussianJson, ProcessJson};
use ousb::refit::{iterated_refit, leave_one_out_all, CvScore, PredictConfig};
use ousb::rng::derive_seed;
use ousb::sim::{self, uniform_grid, Cloud};
use ousb::{Gaussian, KernelCache};
use serde::{Deserialize, Serialize};

use crate::config::{read_gaussian, RunConfig};
use crate::error::CliError;
use crate::experiments::{run_gaussian, run_mixture, run_repressilator};
use crate::output::{sha256_hex, OutputDir};
use crate::{Command, Common, Experiment, System};

/// Configuration after flag overrides, with where to write and its hash.
struct Run {
    config: RunConfig,
    out: PathBuf,
    config_sha256: String,
    config_json: Vec<u8>,
    started: Instant,
}

impl Run {
    fn new(common: &Common) -> Result<Self, CliError> {
        let started = Instant::now();
        let mut config = RunConfig::load(common.config.as_deref())?;
        if let Some(seed) = common.seed {
            config.seed = seed;
        }
        let out = common
            .out
            .clone()
            .or_else(|| config.output_dir.clone())
            .ok_or_else(|| CliError::Usage("no output directory: pass --out or set output_dir".into()))?;
        let mut config_json = serde_json::to_vec_pretty(&config)?;
        config_json.push(b'\n');
        Ok(Self {
            config_sha256: sha256_hex(&config_json),
            config,
            out,
            config_json,
            started,
        })
    }

    fn open(&self) -> Result<OutputDir, CliError> {
        let mut dir = OutputDir::create(&self.out, self.started)?;
        dir.write("config.json", &self.config_json)?;
        Ok(dir)
    }

    fn finish(&self, dir: OutputDir, command: &str) -> Result<(), CliError> {
        dir.finish(command, &self.config_sha256, self.config.seed)?;
        Ok(())
    }
}

fn read_data(path: &Path) -> Result<Vec<Snapshot>, CliError> {
    read_snapshots_file(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_many(paths: &[PathBuf]) -> Result<Vec<Snapshot>, CliError> {
    let parts = paths.iter().map(|p| read_data(p)).collect::<Result<Vec<_>, _>>()?;
    Ok(merge_snapshots(parts))
}

fn data_dim(snaps: &[Snapshot]) -> usize {
    snaps[0].points[0].len()
}

fn snapshots_of(times: &[f64], clouds: Vec<Cloud>) -> Vec<Snapshot> {
    times.iter().zip(clouds).map(|(&t, points)| Snapshot { t, points }).collect()
}

/// Header `t, mean_1.., cov_1_1..` with row-major covariance entries.
fn moment_header(d: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=d).map(|i| format!("mean_{i}")));
    for i in 1..=d {
        h.extend((1..=d).map(|j| format!("cov_{i}_{j}")));
    }
    h
}

fn moment_row(t: f64, g: &Gaussian) -> Vec<f64> {
    let mut row = vec![t];
    row.extend(g.mean().iter());
    row.extend(row_major(g.cov()));
    row
}

/// Integration grid from `t0` through `times` at `per_unit` steps per unit.
fn output_grid(t0: f64, times: &[f64], per_unit: usize) -> Result<(Vec<f64>, Vec<usize>), CliError> {
    sim::grid_through(t0, times, 1.0 / per_unit as f64).map_err(|e| CliError::Usage(format!("output times: {e}")))
}

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::GsbSolve {
            common,
            problem,
            rho0,
            rho1,
            drift,
        } => {
            let source = match (problem, rho0, rho1) {
                (Some(p), _, _) => GsbSource::Problem(p),
                (None, Some(a), Some(b)) => GsbSource::Pair(a, b),
                _ => return Err(CliError::Usage("pass --problem or both --rho0 and --rho1".into())),
            };
            gsb_solve(&common, source, drift)
        }
        Command::BridgeSample { common, x0, xt, n } => bridge_sample_cmd(&common, x0, xt, n),
        Command::Eot { common, data } => eot(&common, &data),
        Command::Train { common, data } => train_cmd(&common, &data),
        Command::Sample {
            common,
            checkpoint,
            from,
        } => sample(&common, &checkpoint, &from),
        Command::Simulate { common, system } => simulate(&common, system),
        Command::Refit { common, data } => refit(&common, &data),
        Command::Metrics { common, a, b, from } => metrics(&common, &a, &b, from.as_deref()),
        Command::Benchmark { common, experiment, d } => benchmark(&common, experiment, d),
    }
}

#[derive(Serialize)]
struct GsbSummary {
    horizon: f64,
    process: ProcessJson,
    rho0: GaussianJson,
    rho1: GaussianJson,
    /// Row-major cross-covariance of the optimal endpoint coupling.
    cross_cov: Vec<f64>,
}

/// Problem file for `gsb-solve`; omitted fields come from the run config.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GsbProblemFile {
    process: Option<ProcessJson>,
    rho0: GaussianJson,
    #[serde(rename = "rhoT")]
    rho_t: GaussianJson,
    #[serde(rename = "T")]
    horizon: Option<f64>,
    grid: Option<Vec<f64>>,
}

enum GsbSource {
    Problem(PathBuf),
    Pair(PathBuf, PathBuf),
}

fn drift_header(d: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=d).map(|i| format!("mean_{i}")));
    h.extend((1..=d).map(|i| format!("mean_rate_{i}")));
    for i in 1..=d {
        h.extend((1..=d).map(|j| format!("matrix_{i}_{j}")));
    }
    h
}

fn gsb_solve(common: &Common, source: GsbSource, with_drift: bool) -> Result<(), CliError> {
    let run = Run::new(common)?;
    let cfg = &run.config;
    let (g0, g1, process, horizon, times) = match source {
        GsbSource::Pair(a, b) => {
            let (g0, g1) = (read_gaussian(&a)?, read_gaussian(&b)?);
            let process = cfg.process_or_brownian(g0.dim())?;
            (g0, g1, process, cfg.horizon, cfg.output_times(cfg.horizon))
        }
        GsbSource::Problem(path) => {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
            let p: GsbProblemFile =
                serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let g0 = Gaussian::from_json(&p.rho0)?;
            let process = match &p.process {
                Some(json) => ousb::OUProcess::from_json(json)?,
                None => cfg.process_or_brownian(g0.dim())?,
            };
            let horizon = p.horizon.unwrap_or(cfg.horizon);
            if !(horizon > 0.0 && horizon.is_finite()) {
                return Err(CliError::Data(format!("{}: T must be positive", path.display())));
            }
            let times = p.grid.unwrap_or_else(|| cfg.output_times(horizon));
            (g0, Gaussian::from_json(&p.rho_t)?, process, horizon, times)
        }
    };
    if g0.dim() != g1.dim() || g0.dim() != process.dim() {
        return Err(CliError::Data("process, rho0 and rhoT differ in dimension".into()));
    }
    if times.iter().any(|&t| !(0.0..=horizon).contains(&t)) {
        return Err(CliError::Data(format!("output times must lie in [0, {horizon}]")));
    }
    let cache = KernelCache::new(&process, horizon, cfg.nodes)?;
    let sol = gsb::solve(GSBProblem::new(cache, g0.clone(), g1.clone())?)?;
    let laws = gsb::gsb_marginal_interpolate(&sol, &times)?;
    let rows: Vec<Vec<f64>> = times.iter().zip(&laws).map(|(&t, g)| moment_row(t, g)).collect();
    let drift_rows = if with_drift {
        let rows = times
            .iter()
            .map(|&t| {
                let a = sol.drift_at(t)?;
                let mut row = vec![t];
                row.extend(a.mean.iter());
                row.extend(a.mean_rate.iter());
                row.extend(row_major(&a.matrix));
                Ok(row)
            })
            .collect::<ousb::Result<Vec<_>>>()?;
        Some(rows)
    } else {
        None
    };

    let mut dir = run.open()?;
    dir.write_with("marginals.csv", |w| write_table(w, &moment_header(g0.dim()), &rows))?;
    if let Some(rows) = &drift_rows {
        dir.write_with("drift.csv", |w| write_table(w, &drift_header(g0.dim()), rows))?;
    }
    dir.write_json(
        "gsb.json",
        &GsbSummary {
            horizon,
            process: process.to_json(),
            rho0: g0.to_json(),
            rho1: g1.to_json(),
            cross_cov: row_major(sol.cross_cov()),
        },
    )?;
    run.finish(dir, "gsb-solve")
}

fn bridge_sample_cmd(common: &Common, x0: Vec<f64>, xt: Vec<f64>, n: usize) -> Result<(), CliError> {
    let run = Run::new(common)?;
    let cfg = &run.config;
    if x0.is_empty() || x0.len() != xt.len() {
        return Err(CliError::Usage("--x0 and --xt must be nonempty and of equal length".into()));
    }
    if n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let process = cfg.process_or_brownian(x0.len())?;
    let cache = KernelCache::new(&process, cfg.horizon, cfg.nodes)?;
    let pin = BridgePin::new(DVector::from_vec(x0), DVector::from_vec(xt), cfg.horizon)?;
    let times = cfg.output_times(cfg.horizon);
    let mut snaps = Vec::new();
    let mut rows = Vec::new();
    for (k, &t) in times.iter().enumerate() {
        let base = derive_seed(cfg.seed, k as u64);
        let points = (0..n)
            .map(|i| bridge_sample(&cache, &pin, t, derive_seed(base, i as u64)))
            .collect::<ousb::Result<Cloud>>()?;
        snaps.push(Snapshot { t, points });
        let m = bridge_moments(&cache, &pin, t)?;
        rows.push(moment_row(t, &Gaussian::new(m.mean, m.cov)?));
    }

    let mut dir = run.open()?;
    dir.write_with("samples.csv", |w| write_snapshots(w, &snaps))?;
    dir.write_with("moments.csv", |w| write_table(w, &moment_header(pin.x0.len()), &rows))?;
    run.finish(dir, "bridge-sample")
}

/// Plan entries at or below this mass are left out of `plan.csv`.
const PLAN_THRESHOLD: f64 = 1e-12;

#[derive(Serialize)]
struct CouplingSummary {
    t0: f64,
    t1: f64,
    epsilon: f64,
    iterations: usize,
    marginal_error: f64,
    converged: bool,
    /// Expected cost under the plan.
    transport_cost: f64,
    f: Vec<f64>,
    g: Vec<f64>,
}

fn eot(common: &Common, data: &[PathBuf]) -> Result<(), CliError> {
    let run = Run::new(common)?;
    let cfg = &run.config;
    let snaps = if let [a, b] = data {
        let (sa, sb) = (read_data(a)?, read_data(b)?);
        if sa.len() != 1 || sb.len() != 1 {
            return Err(CliError::Data("with two files, each must hold a single snapshot".into()));
        }
        if !(sb[0].t > sa[0].t) {
            return Err(CliError::Data("the second snapshot must come after the first".into()));
        }
        vec![sa.into_iter().next().unwrap(), sb.into_iter().next().unwrap()]
    } else {
        read_data(&data[0])?
    };
    if snaps.len() != 2 {
        return Err(CliError::Data(format!("eot needs exactly two snapshots, found {}", snaps.len())));
    }
    let (a, b) = (&snaps[0], &snaps[1]);
    let process = cfg.process_or_brownian(data_dim(&snaps))?;
    let cache = KernelCache::new(&process, b.t - a.t, cfg.nodes)?;
    let cost = mvou_cost(&cache, &a.points, &b.points)?;
    let c = sinkhorn(&cost, &uniform(a.points.len()), &uniform(b.points.len()), cfg.sinkhorn_config())?;
    if !c.converged {
        return Err(CliError::Numerical(format!(
            "sinkhorn did not converge in {} iterations (marginal error {:.3e})",
            c.iterations, c.marginal_error
        )));
    }

    let mut dir = run.open()?;
    dir.write_with("plan.csv", |w| write_plan_triplets(w, &c.plan, PLAN_THRESHOLD))?;
    dir.write_json(
        "coupling.json",
        &CouplingSummary {
            t0: a.t,
            t1: b.t,
            epsilon: c.epsilon,
            iterations: c.iterations,
            marginal_error: c.marginal_error,
            converged: c.converged,
            transport_cost: c.plan.component_mul(&cost).sum(),
            f: c.f.iter().copied().collect(),
            g: c.g.iter().copied().collect(),
        },
    )?;
    run.finish(dir, "eot")
}

fn loss_rows(ckpt: &Checkpoint) -> Vec<Vec<f64>> {
    ckpt.meta
        .loss_history
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i as f64, *l])
        .collect()
}

fn train_cmd(common: &Common, data: &[PathBuf]) -> Result<(), CliError> {
    let run = Run::new(common)?;
    let cfg = &run.config;
    let snaps = read_many(data)?;
    if snaps.len() < 2 {
        return Err(CliError::Data("training needs at least two snapshots".into()));
    }
    let process = cfg.process_or_brownian(data_dim(&snaps))?;
    let ckpt = train(&snaps, &process, &cfg.train_config())?;

    let mut dir = run.open()?;
    dir.write_json("checkpoint.json", &ckpt.to_json())?;
    dir.write_with("loss.csv", |w| write_table(w, &["iteration".into(), "loss".into()], &loss_rows(&ckpt)))?;
    run.finish(dir, "train")
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let json: CheckpointJson =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(Checkpoint::from_json(&json)?)
}

/// Push the first snapshot of `from` through `ckpt`, recording at `times`
/// (default: 11 even times from that snapshot to the model's end).
fn push_forward(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    from: &[Snapshot],
    times: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<Cloud>), CliError> {
    if data_dim(from) != ckpt.dim() {
        return Err(CliError::Data(format!(
            "data has dimension {}, checkpoint has {}",
            data_dim(from),
            ckpt.dim()
        )));
    }
    let start = &from[0];
    let t_end = ckpt.meta.time.start + ckpt.meta.time.span;
    if !(start.t < t_end) {
        return Err(CliError::Data(format!("start time {} is not before the model's end {t_end}", start.t)));
    }
    let times = match times {
        Some(t) => t.to_vec(),
        None if cfg.sim.times.is_empty() => uniform_grid(start.t, t_end, 10),
        None => cfg.sim.times.clone(),
    };
    let (grid, record) = output_grid(start.t, &times, cfg.sim.steps_per_unit)?;
    let clouds = integrate(ckpt, &start.points, &grid, cfg.sim.integrator, &record, cfg.seed)?;
    Ok((times, clouds))
}

fn sample(common: &Common, checkpoint: &Path, from: &Path) -> Result<(), CliError> {
    let run = Run::new(common)?;
    let cfg = &run.config;
    let ckpt = read_checkpoint(checkpoint)?;
    let (times, clouds) = push_forward(cfg, &ckpt, &read_data(from)?, None)?;
    let paths = clouds.clone();
    let out = snapshots_of(&times, clouds);

    let mut dir = run.open()?;
    dir.write_with("samples.csv", |w| write_snapshots(w, &out))?;
    dir.write_with("trajectories.csv", |w| write_trajectories(w, &times, &paths))?;
    run.finish(dir, "sample")
}

fn simulate(common: &Common, system: System) -> Result<(), CliError> {
    let run = Run::new(common)?;
    let cfg = &run.config;
    let (snaps, times, paths) = match system {
        System::Repressilator => {
            let times = if cfg.sim.times.is_empty() {
                uniform_grid(0.0, 10.0, 9)
            } else {
                cfg.sim.times.clone()
            };
            let params = cfg.sim.repressilator.into();
            let clouds = sim::repressilator_snapshots(&params, cfg.sim.samples, &times, cfg.sim.dt, cfg.seed)?;
            let paths = if cfg.sim.paths > 0 {
                Some(sim::repressilator_paths(&params, cfg.sim.paths, &times, cfg.sim.dt, derive_seed(cfg.seed, 2))?)
            } else {
                None
            };
            (snapshots_of(&times, clouds), times, paths)
        }
        System::Ou => {
            let process = cfg.process()?;
            let initial = cfg
                .sim
                .initial
                .as_ref()
                .ok_or_else(|| CliError::Usage("simulate --system ou needs sim.initial".into()))?;
            let initial = Gaussian::from_json(initial)?;
            if initial.dim() != process.dim() {
                return Err(CliError::Usage("sim.initial and process differ in dimension".into()));
            }
            let times = cfg.output_times(cfg.horizon);
            let (grid, record) = sim::grid_through(0.0, &times, cfg.sim.dt)
                .map_err(|e| CliError::Usage(format!("output times: {e}")))?;
            let factor = ousb::linalg::psd_factor(initial.cov());
            let mut r = ousb::rng::rng(derive_seed(cfg.seed, 0));
            let x0: Cloud = (0..cfg.sim.samples)
                .map(|_| initial.mean() + &factor * ousb::rng::standard_normal(&mut r, initial.dim()))
                .collect();
            let clouds = sim::euler_maruyama_ensemble(
                |_, x| process.drift_at(x),
                process.diffusion(),
                &x0,
                &grid,
                &record,
                derive_seed(cfg.seed, 1),
            )?;
            (snapshots_of(&times, clouds.clone()), times, Some(clouds))
        }
    };

    let mut dir = run.open()?;
    dir.write_with("snapshots.csv", |w| write_snapshots(w, &snaps))?;
    if let Some(p) = &paths {
        dir.write_with("trajectories.csv", |w| write_trajectories(w, &times, p))?;
    }
    run.finish(dir, "simulate")
}

#[derive(Serialize)]
struct IterationRecord {
    iteration: usize,
    reference: ProcessJson,
    fitted: ProcessJson,
    intercept: Vec<f64>,
    lambda: f64,
    residual: f64,
    cv: Vec<CvScore>,
    drift_change: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    warning: Option<String>,
    final_loss: f64,
}

#[derive(Serialize)]
struct LooRecord {
    held_out: usize,
    t: f64,
    energy: Vec<f64>,
    emd: Vec<f64>,
}

#[derive(Serialize)]
struct LooReport {
    holdouts: Vec<LooRecord>,
    mean_energy: Vec<f64>,
    mean_emd: Vec<f64>,
}

fn refit(common: &Common, data: &[PathBuf]) -> Result<(), CliError> {
    let run = Run::new(common)?;
    let cfg = &run.config;
    let snaps = read_many(data)?;
    let initial = cfg.process_or_brownian(data_dim(&snaps))?;
    let refit_cfg = cfg.refit_config();
    let state = iterated_refit(&snaps, &initial, &refit_cfg)?;
    let loo = if cfg.refit.leave_one_out {
        let predict = PredictConfig {
            steps_per_unit: cfg.sim.steps_per_unit,
            seed: derive_seed(cfg.seed, 30),
        };
        let results = leave_one_out_all(&snaps, &initial, &refit_cfg, predict)?;
        let k = refit_cfg.outer_iters;
        let holdouts: Vec<LooRecord> = results
            .iter()
            .map(|r| LooRecord {
                held_out: r.held_out,
                t: snaps[r.held_out].t,
                energy: r.scores.iter().map(|s| s.energy).collect(),
                emd: r.scores.iter().map(|s| s.emd).collect(),
            })
            .collect();
        let mean = |f: fn(&LooRecord) -> &Vec<f64>| -> Vec<f64> {
            (0..k)
                .map(|i| holdouts.iter().map(|h| f(h)[i]).sum::<f64>() / holdouts.len() as f64)
                .collect()
        };
        Some(LooReport {
            mean_energy: mean(|h| &h.energy),
            mean_emd: mean(|h| &h.emd),
            holdouts,
        })
    } else {
        None
    };
    let records: Vec<IterationRecord> = state
        .history
        .iter()
        .map(|it| IterationRecord {
            iteration: it.iteration,
            reference: it.reference.to_json(),
            fitted: ProcessJson {
                a: ousb::process::MatrixJson::Flat(row_major(&it.fit.drift)),
                m: it.fit.target.iter().copied().collect(),
                ..it.reference.to_json()
            },
            intercept: it.fit.intercept.iter().copied().collect(),
            lambda: it.fit.lambda,
            residual: it.fit.residual,
            cv: it.fit.cv.clone(),
            drift_change: it.drift_change,
            warning: it.fit.warning.clone(),
            final_loss: it.checkpoint.meta.loss_history.last().copied().unwrap_or(f64::NAN),
        })
        .collect();
    for r in &records {
        if let Some(w) = &r.warning {
            eprintln!("warning: refit iteration {}: {w}", r.iteration);
        }
    }

    let mut dir = run.open()?;
    for it in &state.history {
        dir.write_json(&format!("process_iter{}.json", it.iteration), &it.reference.to_json())?;
        dir.write_json(&format!("checkpoint_iter{}.json", it.iteration), &it.checkpoint.to_json())?;
    }
    dir.write_json("process.json", &state.process.to_json())?;
    dir.write_json("refit.json", &records)?;
    if let Some(l) = &loo {
        dir.write_json("loo.json", l)?;
    }
    run.finish(dir, "refit")
}

#[derive(Serialize)]
struct TimeMetrics {
    t: f64,
    n_a: usize,
    n_b: usize,
    bw2: f64,
    energy: f64,
    emd: f64,
    emd_exact: bool,
}

#[derive(Serialize)]
struct MetricsReport {
    emd_squared: bool,
    times: Vec<TimeMetrics>,
    mean_bw2: f64,
    mean_energy: f64,
    mean_emd: f64,
}

/// One side of a comparison: data on disk, or a model to push forward.
enum Side {
    Data(Vec<Snapshot>),
    Model(Box<Checkpoint>),
}

fn read_side(path: &Path) -> Result<Side, CliError> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        Ok(Side::Model(Box::new(read_checkpoint(path)?)))
    } else {
        Ok(Side::Data(read_data(path)?))
    }
}

fn resolve_sides(cfg: &RunConfig, a: Side, b: Side, from: Option<&Path>) -> Result<(Vec<Snapshot>, Vec<Snapshot>), CliError> {
    let from = match (&a, &b, from) {
        (Side::Data(_), Side::Data(_), _) => None,
        (_, _, Some(p)) => Some(read_data(p)?),
        _ => return Err(CliError::Usage("a checkpoint side needs --from".into())),
    };
    let data_times = |s: &Side| match s {
        Side::Data(d) => Some(d.iter().map(|x| x.t).collect::<Vec<f64>>()),
        Side::Model(_) => None,
    };
    let times = data_times(&a).or_else(|| data_times(&b)).or_else(|| {
        let f = from.as_ref().expect("model sides have --from");
        Some(if cfg.sim.times.is_empty() { f.iter().map(|x| x.t).collect() } else { cfg.sim.times.clone() })
    });
    let realise = |s: Side| -> Result<Vec<Snapshot>, CliError> {
        match s {
            Side::Data(d) => Ok(d),
            Side::Model(ckpt) => {
                let f = from.as_ref().expect("model sides have --from");
                let (t, clouds) = push_forward(cfg, &ckpt, f, times.as_deref())?;
                Ok(snapshots_of(&t, clouds))
            }
        }
    };
    Ok((realise(a)?, realise(b)?))
}

fn metrics(common: &Common, a: &Path, b: &Path, from: Option<&Path>) -> Result<(), CliError> {
    let run = Run::new(common)?;
    let cfg = &run.config;
    let (sa, sb) = resolve_sides(cfg, read_side(a)?, read_side(b)?, from)?;
    if data_dim(&sa) != data_dim(&sb) {
        return Err(CliError::Data("the two files differ in dimension".into()));
    }
    let ta: Vec<f64> = sa.iter().map(|s| s.t).collect();
    let tb: Vec<f64> = sb.iter().map(|s| s.t).collect();
    if ta != tb {
        return Err(CliError::Data(format!("snapshot times differ: {ta:?} vs {tb:?}")));
    }
    let times = sa
        .iter()
        .zip(&sb)
        .map(|(x, y)| {
            let e = emd(&x.points, &y.points, cfg.metrics.emd_squared)?;
            let bw = if x.points.len() > 1 && y.points.len() > 1 {
                bw2_samples(&x.points, &y.points)?
            } else {
                f64::NAN
            };
            Ok(TimeMetrics {
                t: x.t,
                n_a: x.points.len(),
                n_b: y.points.len(),
                bw2: bw,
                energy: energy_distance(&x.points, &y.points)?,
                emd: e.value,
                emd_exact: e.exact.unwrap_or(true),
            })
        })
        .collect::<ousb::Result<Vec<_>>>()?;
    let mean = |f: fn(&TimeMetrics) -> f64| times.iter().map(f).sum::<f64>() / times.len() as f64;
    let report = MetricsReport {
        emd_squared: cfg.metrics.emd_squared,
        mean_bw2: mean(|m| m.bw2),
        mean_energy: mean(|m| m.energy),
        mean_emd: mean(|m| m.emd),
        times,
    };

    let mut dir = run.open()?;
    dir.write_json("metrics.json", &report)?;
    run.finish(dir, "metrics")
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

fn benchmark(common: &Common, experiment: Experiment, d: Option<usize>) -> Result<(), CliError> {
    let run = Run::new(common)?;
    let cfg = &run.config;
    let b = &cfg.benchmark;
    let dim = |default: usize| match d.unwrap_or(default) {
        d if d >= 2 => Ok(d),
        _ => Err(CliError::Usage("--d must be at least 2".into())),
    };
    let report = match experiment {
        Experiment::Gaussian => {
            let mut p = b.gaussian.clone();
            p.d = dim(p.d)?;
            p.seed = cfg.seed;
            json_bytes(&run_gaussian(&p)?)?
        }
        Experiment::Mixture => {
            let mut p = b.mixture.clone();
            p.d = dim(p.d)?;
            p.seed = cfg.seed;
            json_bytes(&run_mixture(&p)?)?
        }
        Experiment::Repressilator => {
            if d.is_some_and(|d| d != 3) {
                return Err(CliError::Usage("the repressilator is three dimensional".into()));
            }
            let mut p = b.repressilator.clone();
            p.seed = cfg.seed;
            json_bytes(&run_repressilator(&p)?)?
        }
    };

    let mut dir = run.open()?;
    dir.write("benchmark.json", &report)?;
    run.finish(dir, "benchmark")
}

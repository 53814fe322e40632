//! Iterated reference fitting: train, read the learned drift off at the
//! snapshot points, regress an affine drift `A (x - m)` on it, repeat.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fm::{integrate, train, Checkpoint, Integrator, Snapshot, TrainConfig};
use crate::linalg::{condition_number, rel_frobenius};
use crate::metrics::{emd, energy_distance};
use crate::process::OUProcess;
use crate::rng::derive_seed;
use crate::sim::{uniform_grid, Cloud};

/// Largest condition number of the fitted `A` for which `m = -A^{-1} c` is trusted.
pub const MAX_INTERCEPT_COND: f64 = 1e8;

pub fn default_lambda_grid() -> Vec<f64> {
    (-4..=2).map(|k| 10f64.powi(k)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvScore {
    pub lambda: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    pub drift: DMatrix<f64>,
    pub target: DVector<f64>,
    /// Fitted intercept `c` of `v = A x + c`.
    pub intercept: DVector<f64>,
    pub lambda: f64,
    /// Weighted mean squared residual on all rows.
    pub residual: f64,
    pub cv: Vec<CvScore>,
    pub warning: Option<String>,
}

fn check_rows(x: &[DVector<f64>], v: &[DVector<f64>], w: &[f64]) -> Result<usize> {
    if x.is_empty() || x.len() != v.len() || x.len() != w.len() {
        return Err(Error::invalid("states, drifts and weights must have equal nonzero length"));
    }
    let d = x[0].len();
    if x.iter().chain(v.iter()).any(|r| r.len() != d || r.iter().any(|e| !e.is_finite())) {
        return Err(Error::invalid(format!("all rows must be finite {d}-vectors")));
    }
    if w.iter().any(|&e| !(e >= 0.0 && e.is_finite())) || !(w.iter().sum::<f64>() > 0.0) {
        return Err(Error::invalid("weights must be nonnegative with positive sum"));
    }
    Ok(d)
}

/// Weighted ridge regression `v ~ B x + c` with unpenalised intercept:
/// `B = V_c^T W X_c (X_c^T W X_c + lambda I)^{-1}` on weighted-centred data.
/// Returns `(B, c)`, or `None` when the normal matrix is singular.
pub fn ridge_solve(x: &[DVector<f64>], v: &[DVector<f64>], w: &[f64], lambda: f64) -> Result<Option<(DMatrix<f64>, DVector<f64>)>> {
    let d = check_rows(x, v, w)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("ridge penalty must be nonnegative"));
    }
    let total: f64 = w.iter().sum();
    let xbar = x.iter().zip(w).fold(DVector::zeros(d), |a, (r, wi)| a + r * *wi) / total;
    let vbar = v.iter().zip(w).fold(DVector::zeros(d), |a, (r, wi)| a + r * *wi) / total;
    let mut xtx = DMatrix::<f64>::identity(d, d) * lambda;
    let mut vtx = DMatrix::<f64>::zeros(d, d);
    for ((xr, vr), wi) in x.iter().zip(v).zip(w) {
        let xc = xr - &xbar;
        xtx += &xc * xc.transpose() * *wi;
        vtx += (vr - &vbar) * xc.transpose() * *wi;
    }
    let scale = xtx.iter().fold(0.0f64, |a, e| a.max(e.abs()));
    if !(scale > 0.0) || condition_number(&xtx) > 1e14 {
        return Ok(None);
    }
    let Some(chol) = xtx.cholesky() else {
        return Ok(None);
    };
    // B xtx = vtx  <=>  xtx B^T = vtx^T
    let b = chol.solve(&vtx.transpose()).transpose();
    let c = &vbar - &b * &xbar;
    Ok(Some((b, c)))
}

fn weighted_mse(x: &[DVector<f64>], v: &[DVector<f64>], w: &[f64], b: &DMatrix<f64>, c: &DVector<f64>) -> f64 {
    let total: f64 = w.iter().sum();
    x.iter()
        .zip(v)
        .zip(w)
        .map(|((xr, vr), wi)| wi * (vr - b * xr - c).norm_squared())
        .sum::<f64>()
        / total
}

/// Ridge fit with the penalty chosen by `folds`-fold cross-validation
/// (row `i` in fold `i mod folds`). `m = -A^{-1} c` when `A` is well
/// conditioned; otherwise `previous_target` is kept and a warning recorded.
pub fn ridge_fit(
    x: &[DVector<f64>],
    v: &[DVector<f64>],
    w: &[f64],
    lambda_grid: &[f64],
    folds: usize,
    previous_target: &DVector<f64>,
) -> Result<RidgeFit> {
    let d = check_rows(x, v, w)?;
    if x.len() < d + 1 {
        return Err(Error::invalid(format!("need at least {} rows for a {d}-dimensional affine fit", d + 1)));
    }
    if lambda_grid.is_empty() || lambda_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(Error::invalid("lambda grid must be nonempty and nonnegative"));
    }
    if folds < 2 || folds > x.len() {
        return Err(Error::invalid("fold count must be between 2 and the number of rows"));
    }
    let mut cv = Vec::new();
    for &lambda in lambda_grid {
        let mut sse = 0.0;
        let mut weight = 0.0;
        let mut usable = true;
        for f in 0..folds {
            let split = |keep: bool| -> (Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<f64>) {
                let idx: Vec<usize> = (0..x.len()).filter(|i| (i % folds == f) != keep).collect();
                (
                    idx.iter().map(|&i| x[i].clone()).collect(),
                    idx.iter().map(|&i| v[i].clone()).collect(),
                    idx.iter().map(|&i| w[i]).collect(),
                )
            };
            let (xt, vt, wt) = split(true);
            let (xh, vh, wh) = split(false);
            match ridge_solve(&xt, &vt, &wt, lambda) {
                Ok(Some((b, c))) => {
                    let wsum: f64 = wh.iter().sum();
                    if wsum > 0.0 {
                        sse += weighted_mse(&xh, &vh, &wh, &b, &c) * wsum;
                        weight += wsum;
                    }
                }
                // rank-deficient without enough penalty: drop this lambda
                _ => {
                    usable = false;
                    break;
                }
            }
        }
        if usable && weight > 0.0 {
            cv.push(CvScore { lambda, mse: sse / weight });
        }
    }
    let best = cv
        .iter()
        .fold(None::<&CvScore>, |acc, s| match acc {
            Some(a) if a.mse <= s.mse => Some(a),
            _ => Some(s),
        })
        .ok_or_else(|| Error::Degenerate("every ridge penalty gave a singular design".into()))?
        .lambda;
    let (b, c) = ridge_solve(x, v, w, best)?
        .ok_or_else(|| Error::Degenerate("ridge design singular at the selected penalty".into()))?;
    let residual = weighted_mse(x, v, w, &b, &c);
    let cond = condition_number(&b);
    let (target, warning) = match b.clone().lu().solve(&(-&c)) {
        Some(m) if cond < MAX_INTERCEPT_COND && m.iter().all(|e| e.is_finite()) => (m, None),
        _ => (
            previous_target.clone(),
            Some(format!("drift matrix condition number {cond:.3e}; target kept from previous reference")),
        ),
    };
    Ok(RidgeFit {
        drift: b,
        target,
        intercept: c,
        lambda: best,
        residual,
        cv,
        warning,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefitConfig {
    pub outer_iters: usize,
    pub lambda_grid: Vec<f64>,
    pub folds: usize,
    pub train: TrainConfig,
}

impl Default for RefitConfig {
    fn default() -> Self {
        Self {
            outer_iters: 5,
            lambda_grid: default_lambda_grid(),
            folds: 5,
            train: TrainConfig {
                iterations: 1000,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefitIteration {
    pub iteration: usize,
    /// Reference the networks were trained against.
    pub reference: OUProcess,
    pub checkpoint: Checkpoint,
    /// Regression of the learned drift, giving the next reference.
    pub fit: RidgeFit,
    /// `|A_next - A| / |A|` (absolute change when `A = 0`).
    pub drift_change: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefitState {
    /// Latest fitted reference.
    pub process: OUProcess,
    pub history: Vec<RefitIteration>,
}

/// Learned SB drift at every snapshot point at its own time.
pub fn drift_samples(ckpt: &Checkpoint, snapshots: &[Snapshot]) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let d = ckpt.dim();
    let mut xs = Vec::new();
    let mut vs = Vec::new();
    for snap in snapshots {
        let m = DMatrix::from_fn(d, snap.points.len(), |r, c| snap.points[c][r]);
        let drift = ckpt.drift_batch(snap.t, &m)?;
        xs.extend(snap.points.iter().cloned());
        vs.extend(drift.column_iter().map(|c| c.into_owned()));
    }
    Ok((xs, vs))
}

/// Alternate training against the current reference with a ridge update of
/// `(A, m)`. The diffusion is never refitted.
pub fn iterated_refit(snapshots: &[Snapshot], initial: &OUProcess, config: &RefitConfig) -> Result<RefitState> {
    if snapshots.len() < 3 {
        return Err(Error::invalid("reference refitting needs at least three snapshots"));
    }
    if config.outer_iters == 0 {
        return Err(Error::invalid("outer_iters must be at least 1"));
    }
    let mut process = initial.clone();
    let mut history = Vec::with_capacity(config.outer_iters);
    for iteration in 0..config.outer_iters {
        let wrap = |e: Error| Error::Refit {
            iteration,
            source: Box::new(e),
        };
        let checkpoint = train(snapshots, &process, &config.train).map_err(wrap)?;
        let (xs, vs) = drift_samples(&checkpoint, snapshots).map_err(wrap)?;
        let weights = vec![1.0; xs.len()];
        let fit = ridge_fit(&xs, &vs, &weights, &config.lambda_grid, config.folds, process.target()).map_err(wrap)?;
        let next = process
            .with_drift(fit.drift.clone(), fit.target.clone())
            .map_err(wrap)?;
        let drift_change = if process.drift().norm() > 0.0 {
            rel_frobenius(next.drift(), process.drift())
        } else {
            next.drift().norm()
        };
        history.push(RefitIteration {
            iteration,
            reference: std::mem::replace(&mut process, next),
            checkpoint,
            fit,
            drift_change,
        });
    }
    Ok(RefitState { process, history })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    /// Euler-Maruyama steps per unit time for forward prediction.
    pub steps_per_unit: usize,
    pub seed: u64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            steps_per_unit: 100,
            seed: 0,
        }
    }
}

/// Push `from` forward with the learned SDE from `t0` to `t1`.
pub fn predict_forward(ckpt: &Checkpoint, from: &[DVector<f64>], t0: f64, t1: f64, config: PredictConfig) -> Result<Cloud> {
    if !(t1 > t0) {
        return Err(Error::invalid("prediction must move forward in time"));
    }
    let steps = ((t1 - t0) * config.steps_per_unit as f64).ceil().max(1.0) as usize;
    let grid = uniform_grid(t0, t1, steps);
    Ok(integrate(ckpt, from, &grid, Integrator::Sde, &[steps], config.seed)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LooScore {
    pub iteration: usize,
    pub emd: f64,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LooResult {
    pub held_out: usize,
    pub scores: Vec<LooScore>,
    /// Predicted cloud at the held-out time, per iteration.
    pub predictions: Vec<Cloud>,
    pub state: RefitState,
}

/// Refit on all snapshots but `held_out`, then predict it from the previous
/// snapshot with every iteration's learned SDE.
pub fn leave_one_out(
    snapshots: &[Snapshot],
    held_out: usize,
    initial: &OUProcess,
    config: &RefitConfig,
    predict: PredictConfig,
) -> Result<LooResult> {
    if held_out == 0 || held_out + 1 >= snapshots.len() {
        return Err(Error::invalid("only interior snapshots can be held out"));
    }
    let kept: Vec<Snapshot> = snapshots
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != held_out)
        .map(|(_, s)| s.clone())
        .collect();
    let state = iterated_refit(&kept, initial, config)?;
    let (from, target) = (&snapshots[held_out - 1], &snapshots[held_out]);
    let mut scores = Vec::new();
    let mut predictions = Vec::new();
    for it in &state.history {
        let cloud = predict_forward(&it.checkpoint, &from.points, from.t, target.t, predict)?;
        scores.push(LooScore {
            iteration: it.iteration,
            emd: emd(&cloud, &target.points, false)?.value,
            energy: energy_distance(&cloud, &target.points)?,
        });
        predictions.push(cloud);
    }
    Ok(LooResult {
        held_out,
        scores,
        predictions,
        state,
    })
}

/// [`leave_one_out`] for every interior snapshot, in parallel. Hold-out `i`
/// trains with seed `derive_seed(seed, i)`.
pub fn leave_one_out_all(
    snapshots: &[Snapshot],
    initial: &OUProcess,
    config: &RefitConfig,
    predict: PredictConfig,
) -> Result<Vec<LooResult>> {
    if snapshots.len() < 4 {
        return Err(Error::invalid("leave-one-out needs at least four snapshots"));
    }
    (1..snapshots.len() - 1)
        .into_par_iter()
        .map(|i| {
            let mut cfg = config.clone();
            cfg.train.seed = derive_seed(config.train.seed, i as u64);
            let p = PredictConfig {
                seed: derive_seed(predict.seed, i as u64),
                ..predict
            };
            leave_one_out(snapshots, i, initial, &cfg, p)
        })
        .collect()
}

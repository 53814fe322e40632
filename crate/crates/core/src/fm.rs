//! Simulation-free score and flow matching against mvOU bridges.
//!
//! Pairs `(x0, xT)` are drawn from the entropic coupling of consecutive
//! snapshots, a point `z` from the reference bridge between them, and two
//! networks regress onto the bridge's probability flow and score at `z`.
//! The Schrödinger bridge drift is then `u + D s`.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::{BridgeKernel, BridgePin};
use crate::eot::{mvou_cost, sinkhorn, uniform, PlanSampler, SinkhornConfig};
use crate::error::{Error, Result};
use crate::kernel::{KernelCache, DEFAULT_NODES};
use crate::nn::{AdamW, AdamWConfig, LayerJson, Mlp};
use crate::process::{OUProcess, ProcessJson};
use crate::rng::{derive_seed, rng, standard_normal, Rng};
use crate::sim::Cloud;

/// Samples observed at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub points: Cloud,
}

/// Weight of the score term in the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreWeight {
    Constant(f64),
    /// `tr(Omega_t) / d`, the mean bridge variance.
    BridgeVariance,
}

impl Default for ScoreWeight {
    fn default() -> Self {
        ScoreWeight::Constant(1.0)
    }
}

/// Learning rate over the course of training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the configured rate to zero.
    Cosine,
}

impl LrSchedule {
    /// Multiplier on the base rate at step `iter` of `total`.
    pub fn factor(self, iter: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * iter as f64 / total as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch: usize,
    pub iterations: usize,
    pub hidden: Vec<usize>,
    pub optimizer: AdamWConfig,
    pub lr_schedule: LrSchedule,
    pub score_weight: ScoreWeight,
    pub sinkhorn_epsilon: f64,
    pub sinkhorn_max_iters: usize,
    pub sinkhorn_tol: f64,
    pub nodes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sk = SinkhornConfig::default();
        Self {
            batch: 64,
            iterations: 2500,
            hidden: vec![64, 64, 64],
            optimizer: AdamWConfig::default(),
            lr_schedule: LrSchedule::Constant,
            score_weight: ScoreWeight::default(),
            sinkhorn_epsilon: sk.epsilon,
            sinkhorn_max_iters: sk.max_iters,
            sinkhorn_tol: sk.tol,
            nodes: DEFAULT_NODES,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if self.batch == 0 || self.iterations == 0 || !(o.learning_rate > 0.0) {
            return Err(Error::invalid("batch, iterations and learning rate must be positive"));
        }
        if self.hidden.iter().any(|&h| h == 0) || self.nodes < 2 {
            return Err(Error::invalid("hidden widths and quadrature nodes must be positive"));
        }
        if !(self.sinkhorn_epsilon > 0.0 && self.sinkhorn_tol > 0.0) || self.sinkhorn_max_iters == 0 {
            return Err(Error::invalid("sinkhorn settings must be positive"));
        }
        if let ScoreWeight::Constant(w) = self.score_weight {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid("score weight must be nonnegative"));
            }
        }
        Ok(())
    }

    fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig {
            epsilon: self.sinkhorn_epsilon,
            max_iters: self.sinkhorn_max_iters,
            tol: self.sinkhorn_tol,
        }
    }
}

/// Maps model time to the network's `[0, 1]` input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeNorm {
    pub start: f64,
    pub span: f64,
}

impl TimeNorm {
    pub fn apply(&self, t: f64) -> f64 {
        (t - self.start) / self.span
    }
}

/// One bridge draw: local time `t` on a segment of length `pin.horizon`.
#[derive(Debug, Clone)]
pub struct BridgeDraw {
    pub t: f64,
    pub pin: BridgePin,
    pub z: DVector<f64>,
}

/// Regression inputs and targets, one sample per column.
#[derive(Debug, Clone)]
pub struct TargetBatch {
    pub inputs: DMatrix<f64>,
    pub flow: DMatrix<f64>,
    pub score: DMatrix<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub flow_loss: f64,
    pub score_loss: f64,
    pub grad_u: Vec<f64>,
    pub grad_s: Vec<f64>,
}

fn net_input(time: f64, x: &DVector<f64>) -> DVector<f64> {
    let mut v = DVector::zeros(x.len() + 1);
    v[0] = time;
    v.rows_mut(1, x.len()).copy_from(x);
    v
}

fn stack(cols: &[DVector<f64>], rows: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols.len(), |r, c| cols[c][r])
}

type TargetRow = (DVector<f64>, DVector<f64>, DVector<f64>, f64);

fn target_row(
    kernel: &BridgeKernel,
    pin: &BridgePin,
    z: &DVector<f64>,
    offset: f64,
    norm: TimeNorm,
    weight: ScoreWeight,
) -> TargetRow {
    let (u, s) = kernel.flow_and_score(pin, z);
    let w = match weight {
        ScoreWeight::Constant(w) => w,
        ScoreWeight::BridgeVariance => kernel.cov().trace() / z.len() as f64,
    };
    (net_input(norm.apply(offset + kernel.time()), z), u, s, w)
}

fn assemble(rows: Vec<TargetRow>, d: usize) -> TargetBatch {
    let inputs: Vec<_> = rows.iter().map(|r| r.0.clone()).collect();
    let flow: Vec<_> = rows.iter().map(|r| r.1.clone()).collect();
    let score: Vec<_> = rows.iter().map(|r| r.2.clone()).collect();
    TargetBatch {
        inputs: stack(&inputs, d + 1),
        flow: stack(&flow, d),
        score: stack(&score, d),
        weights: rows.iter().map(|r| r.3).collect(),
    }
}

/// Bridge flow and score targets at each draw. `offset` is the model time of
/// the segment start.
pub fn bridge_targets(
    cache: &KernelCache,
    draws: &[BridgeDraw],
    offset: f64,
    norm: TimeNorm,
    weight: ScoreWeight,
) -> Result<TargetBatch> {
    let rows: Vec<Result<TargetRow>> = draws
        .par_iter()
        .map(|draw| {
            let kernel = BridgeKernel::new(cache, draw.t)?;
            Ok(target_row(&kernel, &draw.pin, &draw.z, offset, norm, weight))
        })
        .collect();
    Ok(assemble(rows.into_iter().collect::<Result<_>>()?, cache.dim()))
}

/// Mean over the batch of `|u - u*|^2 + w |s - s*|^2`, with parameter gradients.
pub fn loss_and_grad(u: &Mlp, s: &Mlp, batch: &TargetBatch) -> Result<LossEval> {
    let b = batch.inputs.ncols();
    if b == 0 || batch.weights.len() != b {
        return Err(Error::invalid("empty or inconsistent target batch"));
    }
    let (u_out, u_tape) = u.forward_tape(&batch.inputs)?;
    let (s_out, s_tape) = s.forward_tape(&batch.inputs)?;
    if u_out.shape() != batch.flow.shape() || s_out.shape() != batch.score.shape() {
        return Err(Error::invalid("network outputs do not match target shapes"));
    }
    let mut u_res = u_out - &batch.flow;
    let mut s_res = s_out - &batch.score;
    let flow_loss = u_res.norm_squared() / b as f64;
    let mut score_loss = 0.0;
    for (c, w) in batch.weights.iter().enumerate() {
        score_loss += w * s_res.column(c).norm_squared();
        s_res.column_mut(c).scale_mut(2.0 * w / b as f64);
    }
    score_loss /= b as f64;
    u_res.scale_mut(2.0 / b as f64);
    Ok(LossEval {
        loss: flow_loss + score_loss,
        flow_loss,
        score_loss,
        grad_u: u.backward(&u_tape, &u_res)?,
        grad_s: s.backward(&s_tape, &s_res)?,
    })
}

/// Loss for a batch of bridge draws on one segment starting at model time
/// `offset`.
pub fn cfm_loss(
    u: &Mlp,
    s: &Mlp,
    cache: &KernelCache,
    draws: &[BridgeDraw],
    offset: f64,
    norm: TimeNorm,
    weight: ScoreWeight,
) -> Result<LossEval> {
    loss_and_grad(u, s, &bridge_targets(cache, draws, offset, norm, weight)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentInfo {
    pub t0: f64,
    pub t1: f64,
    pub sinkhorn_iterations: usize,
    pub marginal_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub time: TimeNorm,
    pub iterations: usize,
    pub seed: u64,
    pub loss_history: Vec<f64>,
    pub segments: Vec<SegmentInfo>,
    pub config: TrainConfig,
}

/// Trained flow and score networks with their reference process.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub u: Mlp,
    pub s: Mlp,
    pub process: OUProcess,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointJson {
    pub arch: Vec<usize>,
    pub u: Vec<LayerJson>,
    pub s: Vec<LayerJson>,
    pub process: ProcessJson,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn dim(&self) -> usize {
        self.process.dim()
    }

    pub fn to_json(&self) -> CheckpointJson {
        CheckpointJson {
            arch: self.u.widths().to_vec(),
            u: self.u.to_json(),
            s: self.s.to_json(),
            process: self.process.to_json(),
            meta: self.meta.clone(),
        }
    }

    pub fn from_json(json: &CheckpointJson) -> Result<Self> {
        let process = OUProcess::from_json(&json.process)?;
        let d = process.dim();
        if json.arch.first() != Some(&(d + 1)) || json.arch.last() != Some(&d) {
            return Err(Error::Data(format!("architecture must map {} inputs to {d} outputs", d + 1)));
        }
        if !(json.meta.time.span > 0.0) {
            return Err(Error::Data("checkpoint time span must be positive".into()));
        }
        Ok(Self {
            u: Mlp::from_json(&json.arch, &json.u)?,
            s: Mlp::from_json(&json.arch, &json.s)?,
            process,
            meta: json.meta.clone(),
        })
    }

    fn inputs(&self, t: f64, xs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(xs.nrows() + 1, xs.ncols());
        m.row_mut(0).fill(self.meta.time.apply(t));
        m.rows_mut(1, xs.nrows()).copy_from(xs);
        m
    }

    /// Probability flow `u(t, x)` for a batch of columns.
    pub fn flow_batch(&self, t: f64, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.u.forward(&self.inputs(t, xs))
    }

    pub fn score_batch(&self, t: f64, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.s.forward(&self.inputs(t, xs))
    }

    /// SDE drift `u + D s` for a batch of columns.
    pub fn drift_batch(&self, t: f64, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let input = self.inputs(t, xs);
        Ok(self.u.forward(&input)? + self.process.diffusivity() * self.s.forward(&input)?)
    }
}

pub fn sb_drift(ckpt: &Checkpoint, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    let m = ckpt.drift_batch(t, &DMatrix::from_column_slice(x.len(), 1, x.as_slice()))?;
    Ok(m.column(0).into_owned())
}

pub fn sb_flow(ckpt: &Checkpoint, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    let m = ckpt.flow_batch(t, &DMatrix::from_column_slice(x.len(), 1, x.as_slice()))?;
    Ok(m.column(0).into_owned())
}

fn check_snapshots(snapshots: &[Snapshot], d: usize) -> Result<()> {
    if snapshots.len() < 2 {
        return Err(Error::invalid("need at least two snapshots"));
    }
    if snapshots.windows(2).any(|w| !(w[1].t > w[0].t)) || snapshots.iter().any(|s| !s.t.is_finite()) {
        return Err(Error::invalid("snapshot times must be finite and strictly increasing"));
    }
    for s in snapshots {
        if s.points.is_empty() {
            return Err(Error::invalid(format!("snapshot at t = {} is empty", s.t)));
        }
        if s.points.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid(format!(
                "snapshot at t = {} has points that are not finite {d}-vectors",
                s.t
            )));
        }
    }
    Ok(())
}

struct Segment {
    t0: f64,
    cache: KernelCache,
    sampler: PlanSampler,
}

/// Entropic coupling of each consecutive snapshot pair under the reference.
fn couple_segments(
    snapshots: &[Snapshot],
    process: &OUProcess,
    config: &TrainConfig,
) -> Result<(Vec<Segment>, Vec<SegmentInfo>)> {
    let mut segments = Vec::new();
    let mut info = Vec::new();
    for (k, w) in snapshots.windows(2).enumerate() {
        let cache = KernelCache::new(process, w[1].t - w[0].t, config.nodes)?;
        let cost = mvou_cost(&cache, &w[0].points, &w[1].points)?;
        let coupling = sinkhorn(&cost, &uniform(w[0].points.len()), &uniform(w[1].points.len()), config.sinkhorn())?;
        if !coupling.converged {
            return Err(Error::SinkhornFailed {
                segment: k,
                error: coupling.marginal_error,
            });
        }
        info.push(SegmentInfo {
            t0: w[0].t,
            t1: w[1].t,
            sinkhorn_iterations: coupling.iterations,
            marginal_error: coupling.marginal_error,
        });
        segments.push(Segment {
            t0: w[0].t,
            sampler: PlanSampler::new(&coupling.plan)?,
            cache,
        });
    }
    Ok((segments, info))
}

/// Train one shared pair of networks over all segments. Model time is drawn
/// uniformly over the full range, so segments are visited in proportion to
/// their length.
pub fn train(snapshots: &[Snapshot], process: &OUProcess, config: &TrainConfig) -> Result<Checkpoint> {
    config.validate()?;
    let d = process.dim();
    check_snapshots(snapshots, d)?;
    let (segments, info) = couple_segments(snapshots, process, config)?;
    let start = snapshots[0].t;
    let span = snapshots.last().unwrap().t - start;
    let norm = TimeNorm { start, span };

    let mut widths = vec![d + 1];
    widths.extend(&config.hidden);
    widths.push(d);
    let mut u = Mlp::new(&widths, derive_seed(config.seed, 1))?;
    let mut s = Mlp::new(&widths, derive_seed(config.seed, 2))?;
    let mut opt_u = AdamW::new(config.optimizer, u.params().len());
    let mut opt_s = AdamW::new(config.optimizer, s.params().len());
    let draw_seed = derive_seed(config.seed, 3);

    let mut history = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        let mut r = rng(derive_seed(draw_seed, iter as u64));
        // all randomness is drawn serially; kernels and targets are built in parallel
        let mut plan = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            let t = start + r.random::<f64>() * span;
            let k = segments.partition_point(|seg| seg.t0 <= t).saturating_sub(1);
            let seg = &segments[k];
            let (i, j) = seg.sampler.draw(&mut r);
            let local = (t - seg.t0).clamp(0.0, seg.cache.horizon());
            plan.push((k, local, i, j, standard_normal(&mut r, d)));
        }
        let rows: Vec<Result<TargetRow>> = plan
            .par_iter()
            .map(|(k, local, i, j, xi)| {
                let seg = &segments[*k];
                let pin = BridgePin::new(
                    snapshots[*k].points[*i].clone(),
                    snapshots[*k + 1].points[*j].clone(),
                    seg.cache.horizon(),
                )?;
                let kernel = BridgeKernel::new(&seg.cache, *local)?;
                let z = kernel.mean(&pin) + kernel.cov_root() * xi;
                Ok(target_row(&kernel, &pin, &z, seg.t0, norm, config.score_weight))
            })
            .collect();
        let batch = assemble(rows.into_iter().collect::<Result<_>>()?, d);
        let eval = loss_and_grad(&u, &s, &batch)?;
        if !eval.loss.is_finite() {
            return Err(Error::NonFinite { step: iter });
        }
        let lr = config.optimizer.learning_rate * config.lr_schedule.factor(iter, config.iterations);
        opt_u.step_at_rate(u.params_mut(), &eval.grad_u, lr);
        opt_s.step_at_rate(s.params_mut(), &eval.grad_s, lr);
        history.push(eval.loss);
    }

    Ok(Checkpoint {
        u,
        s,
        process: process.clone(),
        meta: CheckpointMeta {
            time: norm,
            iterations: config.iterations,
            seed: config.seed,
            loss_history: history,
            segments: info,
            config: config.clone(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// Euler-Maruyama on `dX = (u + D s) dt + sigma dB`.
    Sde,
    /// RK4 on the probability flow `dx/dt = u`.
    Ode,
}

/// Push `x0` through the learned dynamics on `grid`, keeping the states at
/// grid indices `record`. Returns `out[k][particle]`. Particle `i` draws its
/// noise from `derive_seed(seed, i)`.
pub fn integrate(
    ckpt: &Checkpoint,
    x0: &[DVector<f64>],
    grid: &[f64],
    mode: Integrator,
    record: &[usize],
    seed: u64,
) -> Result<Vec<Cloud>> {
    let d = ckpt.dim();
    if grid.len() < 2 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("integration grid must be strictly increasing"));
    }
    if record.iter().any(|&k| k >= grid.len()) {
        return Err(Error::invalid("record index beyond the grid"));
    }
    if x0.is_empty() || x0.iter().any(|x| x.len() != d) {
        return Err(Error::invalid(format!("initial states must be {d}-vectors")));
    }
    let mut x = stack(x0, d);
    let mut rngs: Vec<Rng> = (0..x0.len()).map(|i| rng(derive_seed(seed, i as u64))).collect();
    let sigma = ckpt.process.diffusion().clone();
    let mut out: Vec<Cloud> = vec![Vec::new(); record.len()];
    let keep = |x: &DMatrix<f64>, k: usize, out: &mut Vec<Cloud>| {
        for (slot, _) in record.iter().enumerate().filter(|(_, &r)| r == k) {
            out[slot] = x.column_iter().map(|c| c.into_owned()).collect();
        }
    };
    keep(&x, 0, &mut out);
    for k in 1..grid.len() {
        let (t, h) = (grid[k - 1], grid[k] - grid[k - 1]);
        x = match mode {
            Integrator::Sde => {
                let drift = ckpt.drift_batch(t, &x)?;
                let mut noise = DMatrix::zeros(d, x.ncols());
                for (c, r) in rngs.iter_mut().enumerate() {
                    noise.set_column(c, &(&sigma * standard_normal(r, d)));
                }
                &x + drift * h + noise * h.sqrt()
            }
            Integrator::Ode => {
                let k1 = ckpt.flow_batch(t, &x)?;
                let k2 = ckpt.flow_batch(t + 0.5 * h, &(&x + &k1 * (0.5 * h)))?;
                let k3 = ckpt.flow_batch(t + 0.5 * h, &(&x + &k2 * (0.5 * h)))?;
                let k4 = ckpt.flow_batch(t + h, &(&x + &k3 * h))?;
                &x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
            }
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: k });
        }
        keep(&x, k, &mut out);
    }
    Ok(out)
}

//! End-to-end training checks against closed-form answers.

use nalgebra::{DMatrix, DVector};
use ousb::bridge::{BridgeKernel, BridgePin};
use ousb::eot::{mvou_cost, sinkhorn, uniform, SinkhornConfig};
use ousb::fm::{integrate, sb_drift, train, Integrator, LrSchedule, Snapshot, TrainConfig};
use ousb::gsb::{solve, GSBProblem, GSBSolution};
use ousb::linalg::psd_factor;
use ousb::metrics::{bw2, energy_distance};
use ousb::rng::{rng, standard_normal};
use ousb::sim::{gaussian_benchmark, uniform_grid, GaussianBenchmark};
use ousb::{Gaussian, KernelCache, OUProcess};

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_vec(xs.to_vec())
}

fn draw(g: &Gaussian, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let f = psd_factor(g.cov());
    let mut r = rng(seed);
    (0..n).map(|_| g.mean() + &f * standard_normal(&mut r, g.dim())).collect()
}

fn pair(x0: &[DVector<f64>], x1: &[DVector<f64>]) -> Vec<Snapshot> {
    vec![
        Snapshot {
            t: 0.0,
            points: x0.to_vec(),
        },
        Snapshot {
            t: 1.0,
            points: x1.to_vec(),
        },
    ]
}

fn benchmark_truth(bench: &GaussianBenchmark) -> GSBSolution {
    let cache = KernelCache::new(&bench.process, 1.0, 512).unwrap();
    solve(GSBProblem::new(cache, bench.rho0.clone(), bench.rho1.clone()).unwrap()).unwrap()
}

/// Smaller, decaying steps and larger batches than the defaults, so the
/// networks end close to the regression optimum rather than jittering around it.
fn settled() -> TrainConfig {
    let mut c = TrainConfig {
        batch: 128,
        iterations: 5000,
        ..Default::default()
    };
    c.optimizer.learning_rate = 1e-3;
    c.lr_schedule = LrSchedule::Cosine;
    c
}

#[test]
fn benchmark_training_with_default_settings() {
    let bench = gaussian_benchmark(2, 0).unwrap();
    let truth = benchmark_truth(&bench);
    let ckpt = train(&pair(&bench.x0, &bench.x1), &bench.process, &TrainConfig::default()).unwrap();

    let losses = &ckpt.meta.loss_history;
    let tenth = losses.len() / 10;
    let head = losses[..tenth].iter().sum::<f64>() / tenth as f64;
    let tail = losses[losses.len() - tenth..].iter().sum::<f64>() / tenth as f64;
    assert!(tail < head, "loss went from {head} to {tail}");

    let grid = uniform_grid(0.0, 1.0, 100);
    let mid = integrate(&ckpt, &draw(&bench.rho0, 1024, 7), &grid, Integrator::Sde, &[50], 8).unwrap();
    let err = bw2(&Gaussian::fit(&mid[0], 1e-8).unwrap(), &truth.marginal(0.5).unwrap()).unwrap();
    eprintln!("BW2 at t = 0.5: {err:.4}");
    assert!(err < 1.0, "BW2 at t = 0.5 is {err}");
}

#[test]
fn well_sampled_benchmark_matches_closed_form() {
    let bench = gaussian_benchmark(2, 0).unwrap();
    let truth = benchmark_truth(&bench);
    let x0 = draw(&bench.rho0, 1024, 50);
    let x1 = draw(&bench.rho1, 1024, 51);
    let ckpt = train(&pair(&x0, &x1), &bench.process, &settled()).unwrap();

    // probability-flow transport of fresh source samples onto fresh target samples
    let grid = uniform_grid(0.0, 1.0, 100);
    let end = integrate(&ckpt, &draw(&bench.rho0, 1024, 7), &grid, Integrator::Ode, &[100], 9).unwrap();
    let ed = energy_distance(&end[0], &draw(&bench.rho1, 1024, 10)).unwrap();
    eprintln!("PF-ODE energy distance: {ed:.4}");
    assert!(ed < 0.1, "energy distance {ed}");

    // learned drift against the closed-form drift over the true marginals
    let mut num = 0.0;
    let mut den = 0.0;
    let mut r = rng(11);
    for k in 1..10 {
        let t = k as f64 / 10.0;
        let law = truth.marginal(t).unwrap();
        let exact = truth.drift_at(t).unwrap();
        let f = psd_factor(law.cov());
        for _ in 0..200 {
            let x = law.mean() + &f * standard_normal(&mut r, 2);
            let want = exact.eval(&x);
            num += (sb_drift(&ckpt, t, &x).unwrap() - &want).norm_squared();
            den += want.norm_squared();
        }
    }
    let rel = (num / den).sqrt();
    eprintln!("relative drift error: {rel:.4}");
    assert!(rel < 0.2, "relative drift error {rel}");
}

/// Marginal flow of a mixture of bridges: conditional flows weighted by the
/// posterior probability of each endpoint pair given `z`.
fn mixture_flow(
    kernel: &BridgeKernel,
    pins: &[BridgePin],
    weights: &[f64],
    z: &DVector<f64>,
) -> DVector<f64> {
    let cov = Gaussian::new(DVector::zeros(z.len()), kernel.cov().clone()).unwrap();
    let logs: Vec<f64> = pins
        .iter()
        .zip(weights)
        .map(|(p, w)| w.ln() + cov.log_density(&(z - kernel.mean(p))).unwrap())
        .collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let post: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = post.iter().sum();
    pins.iter()
        .zip(&post)
        .fold(DVector::zeros(z.len()), |acc, (p, w)| acc + kernel.flow(p, z) * (w / total))
}

#[test]
fn learned_flow_is_the_marginal_flow() {
    // atoms 2.5 noise scales apart, so about 4% of the plan mass crosses over
    let process = OUProcess::brownian(2, 0.05).unwrap();
    let sources = [v(&[0.0, 0.0]), v(&[0.0, 0.125])];
    let targets = [v(&[1.0, 0.0]), v(&[1.0, 0.125])];
    let config = settled();
    let ckpt = train(&pair(&sources, &targets), &process, &config).unwrap();

    let cache = KernelCache::new(&process, 1.0, config.nodes).unwrap();
    let cost = mvou_cost(&cache, &sources, &targets).unwrap();
    let plan = sinkhorn(&cost, &uniform(2), &uniform(2), SinkhornConfig::default()).unwrap().plan;
    let mut pins = Vec::new();
    let mut weights = Vec::new();
    for i in 0..2 {
        for j in 0..2 {
            pins.push(BridgePin::new(sources[i].clone(), targets[j].clone(), 1.0).unwrap());
            weights.push(plan[(i, j)]);
        }
    }

    let mut r = rng(3);
    let mut sq = 0.0;
    let mut count = 0;
    let mut worst: f64 = 0.0;
    for k in 2..=8 {
        let t = k as f64 / 10.0;
        let kernel = BridgeKernel::new(&cache, t).unwrap();
        for (p, w) in pins.iter().zip(&weights) {
            // points drawn from each component in proportion to its weight
            let n = (w * 200.0).round() as usize;
            for _ in 0..n {
                let z = kernel.sample(p, &mut r);
                let want = mixture_flow(&kernel, &pins, &weights, &z);
                let got = ckpt.flow_batch(t, &DMatrix::from_column_slice(2, 1, z.as_slice())).unwrap();
                let e = (got.column(0) - &want).norm();
                sq += e * e;
                worst = worst.max(e);
                count += 1;
            }
        }
    }
    let rms = (sq / count as f64).sqrt();
    eprintln!("flow error rms {rms:.4} max {worst:.4}");
    assert!(rms < 5e-2, "rms flow error {rms}");
}

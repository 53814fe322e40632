//! Reference refitting on data simulated from a known linear process.

use nalgebra::{DMatrix, DVector};
use ousb::fm::Snapshot;
use ousb::linalg::rel_frobenius;
use ousb::refit::{iterated_refit, leave_one_out, PredictConfig, RefitConfig};
use ousb::rng::{derive_seed, rng, standard_normal};
use ousb::sim::{euler_maruyama_ensemble, uniform_grid};
use ousb::OUProcess;

fn planted_process() -> OUProcess {
    OUProcess::new(
        DMatrix::from_row_slice(2, 2, &[-0.2, 1.0, -1.0, -0.2]),
        DVector::from_vec(vec![1.0, 0.0]),
        DMatrix::identity(2, 2) * 0.5,
    )
    .unwrap()
}

fn planted_snapshots(seed: u64, n: usize, times: &[f64]) -> Vec<Snapshot> {
    let truth = planted_process();
    let mut r = rng(derive_seed(seed, 100));
    let start = DVector::from_vec(vec![-1.5, 0.0]);
    let x0: Vec<DVector<f64>> = (0..n * times.len())
        .map(|_| &start + standard_normal(&mut r, 2) * 0.3)
        .collect();
    let dt = 1e-2;
    let t_end = *times.last().unwrap();
    let grid = uniform_grid(0.0, t_end, (t_end / dt).round() as usize);
    let record: Vec<usize> = times.iter().map(|t| (t / dt).round() as usize).collect();
    let clouds = euler_maruyama_ensemble(
        |_, x| truth.drift_at(x),
        truth.diffusion(),
        &x0,
        &grid,
        &record,
        derive_seed(seed, 101),
    )
    .unwrap();
    // a fresh set of particles per snapshot, as in destructive sampling
    times
        .iter()
        .zip(clouds)
        .enumerate()
        .map(|(k, (&t, cloud))| Snapshot {
            t,
            points: cloud[k * n..(k + 1) * n].to_vec(),
        })
        .collect()
}

fn config(seed: u64) -> RefitConfig {
    let mut c = RefitConfig {
        outer_iters: 3,
        ..Default::default()
    };
    c.train.seed = seed;
    c
}

#[test]
fn recovers_planted_drift() {
    let times = uniform_grid(0.0, 3.0, 6);
    let truth = planted_process();
    let snaps = planted_snapshots(0, 128, &times);
    let initial = OUProcess::brownian(2, 0.5).unwrap();
    let state = iterated_refit(&snaps, &initial, &config(0)).unwrap();
    for it in &state.history {
        eprintln!(
            "iteration {} error {:.3} A = {:?}",
            it.iteration,
            rel_frobenius(&it.fit.drift, truth.drift()),
            it.fit.drift.as_slice()
        );
    }
    let err = rel_frobenius(state.process.drift(), truth.drift());
    assert!(err < 0.2, "relative error {err}");
}

#[test]
fn held_out_error_improves_with_refitting() {
    let times = uniform_grid(0.0, 3.0, 6);
    let snaps = planted_snapshots(1, 128, &times);
    let initial = OUProcess::brownian(2, 0.5).unwrap();
    let predict = PredictConfig {
        steps_per_unit: 100,
        seed: 5,
    };
    let res = leave_one_out(&snaps, 3, &initial, &config(1), predict).unwrap();
    let e: Vec<f64> = res.scores.iter().map(|s| s.energy).collect();
    eprintln!("held-out energy by iteration {e:?}");
    assert!(e[2] < e[0], "{e:?}");
    assert!(leave_one_out(&snaps, 0, &initial, &config(1), predict).is_err());
    assert!(leave_one_out(&snaps, 6, &initial, &config(1), predict).is_err());
}

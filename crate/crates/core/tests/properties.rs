//! Randomised invariants across the library.

use nalgebra::{DMatrix, DVector};
use ousb::bridge::{bridge_moments_exact, bridge_score, BridgePin};
use ousb::eot::{sinkhorn, uniform, SinkhornConfig};
use ousb::fm::Snapshot;
use ousb::gsb::{solve, GSBProblem};
use ousb::io::{read_snapshots, write_snapshots};
use ousb::linalg::{expm, max_abs, min_eigenvalue};
use ousb::metrics::{bw2, emd, energy_distance};
use ousb::process::ProcessJson;
use ousb::{Gaussian, KernelCache, OUProcess};
use proptest::prelude::*;

fn matrix(d: usize, lo: f64, hi: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(lo..hi, d * d).prop_map(move |v| DMatrix::from_row_slice(d, d, &v))
}

fn vector(d: usize, lo: f64, hi: f64) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(lo..hi, d).prop_map(DVector::from_vec)
}

fn spd(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    matrix(d, -1.0, 1.0).prop_map(move |b| &b * b.transpose() + DMatrix::identity(d, d) * 0.1)
}

fn gaussian(d: usize) -> impl Strategy<Value = Gaussian> {
    (vector(d, -2.0, 2.0), spd(d)).prop_map(|(m, c)| Gaussian::new(m, c).unwrap())
}

fn process(d: usize) -> impl Strategy<Value = OUProcess> {
    (matrix(d, -1.0, 1.0), vector(d, -1.0, 1.0), matrix(d, -0.5, 0.5)).prop_map(move |(a, m, s)| {
        let sigma = s + DMatrix::identity(d, d);
        OUProcess::new(a, m, sigma).unwrap()
    })
}

fn cloud(d: usize, n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<DVector<f64>>> {
    prop::collection::vec(vector(d, -3.0, 3.0), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn expm_semigroup(a in matrix(3, -1.5, 1.5), s in 0.0..2.0f64, t in 0.0..2.0f64) {
        prop_assume!(a.norm() * (s + t) <= 10.0);
        let lhs = expm(&(&a * s)).unwrap() * expm(&(&a * t)).unwrap();
        let rhs = expm(&(&a * (s + t))).unwrap();
        prop_assert!(max_abs(&(&lhs - &rhs)) <= 1e-10 * max_abs(&rhs).max(1.0));
    }

    #[test]
    fn energy_distance_matches_double_loop(x in cloud(2, 2..20), y in cloud(2, 2..20)) {
        let mean = |a: &[DVector<f64>], b: &[DVector<f64>]| {
            let mut total = 0.0;
            for p in a {
                let mut row = 0.0;
                for q in b {
                    row += (p - q).norm();
                }
                total += row;
            }
            total / (a.len() * b.len()) as f64
        };
        let brute = 2.0 * mean(&x, &y) - mean(&x, &x) - mean(&y, &y);
        prop_assert_eq!(energy_distance(&x, &y).unwrap(), brute);
        prop_assert!(brute >= -1e-12);
        prop_assert_eq!(energy_distance(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn emd_is_a_semimetric(x in cloud(3, 1..12), y in cloud(3, 1..12)) {
        let xy = emd(&x, &y, false).unwrap().value;
        let yx = emd(&y, &x, false).unwrap().value;
        prop_assert!(xy >= 0.0);
        prop_assert!((xy - yx).abs() <= 1e-9 * (1.0 + xy));
        prop_assert!(emd(&x, &x, false).unwrap().value.abs() <= 1e-12);
    }

    #[test]
    fn bw2_symmetry_and_triangle(a in gaussian(3), b in gaussian(3), c in gaussian(3)) {
        let ab = bw2(&a, &b).unwrap();
        prop_assert!((ab - bw2(&b, &a).unwrap()).abs() <= 1e-8 * (1.0 + ab));
        prop_assert!(bw2(&a, &a).unwrap() <= 1e-8);
        let ac = bw2(&a, &c).unwrap().sqrt();
        let cb = bw2(&c, &b).unwrap().sqrt();
        prop_assert!(ab.sqrt() <= ac + cb + 1e-8);
    }

    #[test]
    fn process_json_round_trip(p in process(3)) {
        let text = serde_json::to_string(&p.to_json()).unwrap();
        let back: ProcessJson = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(OUProcess::from_json(&back).unwrap(), p);
    }

    #[test]
    fn snapshot_csv_round_trip(points in cloud(2, 1..10), t in -5.0..5.0f64) {
        let snaps = vec![Snapshot { t, points }];
        let mut buf = Vec::new();
        write_snapshots(&mut buf, &snaps).unwrap();
        prop_assert_eq!(read_snapshots(buf.as_slice()).unwrap(), snaps);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sinkhorn_marginals_and_dual_feasibility(
        n in 3usize..40,
        m in 3usize..40,
        seed in any::<u64>(),
        eps in prop::sample::select(vec![0.5, 1.0]),
    ) {
        let mut r = ousb::rng::rng(seed);
        use rand::Rng;
        let cost = DMatrix::from_fn(n, m, |_, _| r.random::<f64>() * 5.0);
        let cfg = SinkhornConfig { epsilon: eps, ..Default::default() };
        let c = sinkhorn(&cost, &uniform(n), &uniform(m), cfg).unwrap();
        prop_assert!(c.converged);
        let rows = c.plan.column_sum();
        let cols = c.plan.row_sum();
        let err: f64 = rows.iter().map(|v| (v - 1.0 / n as f64).abs()).sum::<f64>()
            + cols.iter().map(|v| (v - 1.0 / m as f64).abs()).sum::<f64>();
        prop_assert!(err < 1e-8, "marginal error {}", err);
        prop_assert!(c.plan.iter().all(|p| *p >= 0.0));
        let bound = eps * ((n * m) as f64).ln() + 1e-6;
        for i in 0..n {
            for j in 0..m {
                prop_assert!(c.f[i] + c.g[j] - cost[(i, j)] <= bound);
            }
        }
    }

    #[test]
    fn phi_composition(p in process(2), i in 1usize..255, j in 1usize..256) {
        prop_assume!(i < j);
        let cache = KernelCache::new(&p, 1.0, 512).unwrap();
        let (s, t) = (cache.grid()[i], cache.grid()[j]);
        let e = cache.exp_at(t - s).unwrap();
        let rhs = cache.phi(t - s).unwrap() + &e * cache.phi(s).unwrap() * e.transpose();
        prop_assert!(max_abs(&(cache.phi(t).unwrap() - rhs)) < 1e-8);
    }

    #[test]
    fn gsb_joint_covariance_is_psd(
        p in process(2),
        g0 in gaussian(2),
        g1 in gaussian(2),
        s in 0.0..1.0f64,
        t in 0.0..1.0f64,
    ) {
        prop_assume!(s < t);
        let cache = KernelCache::new(&p, 1.0, 256).unwrap();
        let sol = solve(GSBProblem::new(cache, g0, g1).unwrap()).unwrap();
        let (ss, st, tt) = (sol.cov(s, s).unwrap(), sol.cov(s, t).unwrap(), sol.cov(t, t).unwrap());
        let mut joint = DMatrix::zeros(4, 4);
        joint.view_mut((0, 0), (2, 2)).copy_from(&ss);
        joint.view_mut((0, 2), (2, 2)).copy_from(&st);
        joint.view_mut((2, 0), (2, 2)).copy_from(&st.transpose());
        joint.view_mut((2, 2), (2, 2)).copy_from(&tt);
        prop_assert!(min_eigenvalue(&joint) >= -1e-8 * max_abs(&joint).max(1.0));
    }

    #[test]
    fn bridge_pins_endpoints(p in process(2), x0 in vector(2, -2.0, 2.0), xt in vector(2, -2.0, 2.0)) {
        let cache = KernelCache::new(&p, 1.0, 512).unwrap();
        let pin = BridgePin::new(x0.clone(), xt, 1.0).unwrap();
        let gaps: Vec<(f64, f64)> = [1e-3, 1e-4, 1e-5]
            .iter()
            .map(|&e| {
                let m = bridge_moments_exact(&cache, &pin, e).unwrap();
                ((m.mean - &x0).norm(), m.cov.norm())
            })
            .collect();
        for w in gaps.windows(2) {
            prop_assert!(w[1].0 < w[0].0 && w[1].1 < w[0].1, "{:?}", gaps);
        }
        prop_assert!(gaps[2].0 < 1e-3 && gaps[2].1 < 1e-3);
    }

    #[test]
    fn bridge_score_is_a_gradient(
        p in process(2),
        x0 in vector(2, -2.0, 2.0),
        xt in vector(2, -2.0, 2.0),
        x in vector(2, -2.0, 2.0),
        t in 0.05..0.95f64,
    ) {
        let cache = KernelCache::new(&p, 1.0, 512).unwrap();
        let pin = BridgePin::new(x0, xt, 1.0).unwrap();
        let m = bridge_moments_exact(&cache, &pin, t).unwrap();
        let law = Gaussian::new(m.mean, m.cov).unwrap();
        let h = 1e-5;
        let fd = DVector::from_fn(2, |k, _| {
            let mut e = DVector::zeros(2);
            e[k] = h;
            (law.log_density(&(&x + &e)).unwrap() - law.log_density(&(&x - &e)).unwrap()) / (2.0 * h)
        });
        let s = bridge_score(&cache, &pin, t, &x).unwrap();
        prop_assert!((&s - &fd).norm() <= 1e-5 * s.norm().max(1.0), "{} vs {}", s, fd);
    }
}

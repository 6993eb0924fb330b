//! Property checks that need several modules at once, all against
//! enumeration.

mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

use ising_hs::annealing::{anneal_partition, AnnealingSchedule, EstimatorParams, Ladder};
use ising_hs::hs_grid::{brute_force_cell, brute_force_projected_log_partition, build_grid, CellLadder, GridOverrides};
use ising_hs::oracle::{brute_force_distribution, brute_force_log_partition};
use ising_hs::rng::{rng_from_seed, SeedTree};
use ising_hs::spectral::{decompose, SpectralSplit};
use ising_hs::tilt::{tilted_mean, TiltProblem};
use ising_hs::{IsingModel, SpinConfig};

use common::{adaptive_simpson, random_psd, random_unit};

fn symmetric(n: usize, entries: &[f64]) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |i, j| entries[i * n + j]);
    (&a + a.transpose()) * 0.5
}

fn model_strategy() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..=7).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec(-1.0..1.0f64, n * n),
            prop::collection::vec(-1.0..1.0f64, n),
            prop::collection::vec(-3.0..3.0f64, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn diagonal_shift_moves_only_log_z((n, j, h, d) in model_strategy()) {
        let model = IsingModel::new(symmetric(n, &j), DVector::from_vec(h)).unwrap();
        let shifted = model.with_diagonal_shift(&d).unwrap();
        let p = brute_force_distribution(&model).unwrap().probs();
        let q = brute_force_distribution(&shifted).unwrap().probs();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
        let gap = brute_force_log_partition(&shifted).unwrap() - brute_force_log_partition(&model).unwrap();
        prop_assert!((gap - 0.5 * d.iter().sum::<f64>()).abs() <= 1e-8);
    }

    #[test]
    fn zero_field_is_flip_symmetric((n, j, _, _) in model_strategy()) {
        let model = IsingModel::with_zero_field(symmetric(n, &j)).unwrap();
        let dist = brute_force_distribution(&model).unwrap();
        let mask = (1u64 << n) - 1;
        for idx in 0..1u64 << n {
            prop_assert!((dist.prob(idx) - dist.prob(idx ^ mask)).abs() <= 1e-12);
        }
    }

    #[test]
    fn huge_energies_stay_finite(a in prop::collection::vec(-10i64..=10, 2..=10), scale in 0.5..2.0f64) {
        prop_assume!(a.iter().any(|&x| x != 0));
        let n = a.len();
        let av = DVector::from_iterator(n, a.iter().map(|&x| x as f64));
        let total: f64 = a.iter().map(|x| x.abs() as f64).sum();
        // the largest energy is ½·β·n·(Σ|a|)², here up to 700·scale
        let beta = 1400.0 * scale / (n as f64 * total * total);
        let model = IsingModel::with_zero_field(&av * av.transpose() * (beta * n as f64)).unwrap();
        let lz = brute_force_log_partition(&model).unwrap();
        prop_assert!(lz.is_finite());
        prop_assert!(lz >= 700.0 * scale - 1e-9);
    }
}

fn spiked_model(n: usize, seed: u64) -> IsingModel {
    let mut rng = rng_from_seed(seed);
    let v = random_unit(n, &mut rng);
    let lam = rng.random_range(1.2..2.5);
    let j = &v * v.transpose() * lam + random_psd(n, rng.random_range(0.1..0.6), &mut rng);
    let h = DVector::from_fn(n, |_, _| rng.random_range(-0.4..0.4));
    IsingModel::new(j, h).unwrap()
}

#[test]
fn cutoff_keeps_most_of_the_mass() {
    for (k, eps) in [0.05, 0.2, 0.5].into_iter().enumerate() {
        for n in [4, 7, 10] {
            let model = spiked_model(n, 100 + 10 * k as u64 + n as u64);
            let split = decompose(model.j(), None, 1e-10).unwrap();
            assert_eq!(split.d, 1);
            let grid = build_grid(
                &split,
                eps,
                &GridOverrides {
                    force: true,
                    ..Default::default()
                },
            )
            .unwrap();
            let log_f = |y: f64| {
                brute_force_projected_log_partition(&split, model.h(), &[y]).unwrap() - 0.5 * n as f64 * y * y
            };
            let wide = 4.0 * grid.l + 10.0;
            let peak = (0..=800)
                .map(|i| log_f(-wide + 2.0 * wide * i as f64 / 800.0))
                .fold(f64::NEG_INFINITY, f64::max);
            let f = |y: f64| (log_f(y) - peak).exp();
            let total = adaptive_simpson(&f, -wide, wide, 1e-13);
            let kept = adaptive_simpson(&f, -grid.l, grid.l, 1e-13);
            assert!(kept / total >= 1.0 - eps / 2.0, "n={n} eps={eps}: kept {}", kept / total);
        }
    }
}

/// `u` with `u = E_{P(u)}[σ]`, by damped iteration of the exact map.
fn exact_fixed_point(p: &TiltProblem) -> DVector<f64> {
    let mut u = DVector::zeros(p.n());
    for _ in 0..500 {
        let m = tilted_mean(p, &u).unwrap();
        u = &u * 0.5 + m * 0.5;
    }
    u
}

fn log_second_moment_ratio(beta_j: DMatrix<f64>, field: &[f64], log_g: impl Fn(&[f64]) -> f64) -> f64 {
    let model = IsingModel::new(beta_j, DVector::from_column_slice(field)).unwrap();
    let dist = brute_force_distribution(&model).unwrap();
    let g1 = dist.expect(|s| log_g(s.to_f64().as_slice()).exp());
    let g2 = dist.expect(|s| (2.0 * log_g(s.to_f64().as_slice())).exp());
    (g2 / (g1 * g1)).ln()
}

fn check_ladder_moments(model: &IsingModel, split: &SpectralSplit, y_stars: &[f64]) {
    let n = model.n();
    let schedule = AnnealingSchedule::new(n);
    for &y in y_stars {
        let tilt = if split.has_minus() {
            let base = split.spike_field(&[y]) + model.h();
            let problem = TiltProblem::from_split(split, base, 0.1, 0.1).unwrap();
            let u = exact_fixed_point(&problem);
            (-(&problem.j_minus * u)).iter().copied().collect()
        } else {
            vec![0.0; n]
        };
        let cell = brute_force_cell(split, model.h(), vec![y], 0.1, tilt).unwrap();
        let ladder = CellLadder {
            split,
            cell: &cell,
            schedule,
            steps: 1,
        };
        for level in 1..=ladder.levels() {
            let j = &split.j_perp * schedule.beta(level);
            let r = log_second_moment_ratio(j, &cell.field, |s| ladder.log_g(level, s));
            let bound = if level < schedule.m {
                1.0
            } else {
                1.0 + 2.0 * split.c_trace_minus() + 4.0
            };
            assert!(r <= bound + 1e-9, "level {level}, y* = {y}: log ratio {r} > {bound}");
        }
    }
}

#[test]
fn ladder_ratios_have_bounded_second_moments() {
    for seed in 0..6 {
        let model = spiked_model(7, 300 + seed);
        let split = decompose(model.j(), None, 1e-10).unwrap();
        check_ladder_moments(&model, &split, &[-1.0, -0.2, 0.0, 0.6, 1.4]);
    }
    // with a negative part and the exact tilt
    for seed in 0..4 {
        let n = 6;
        let mut rng = rng_from_seed(400 + seed);
        let w = random_unit(n, &mut rng);
        let j = spiked_model(n, 500 + seed).j() - &w * w.transpose() * rng.random_range(0.5..1.0);
        let model = IsingModel::new(j, DVector::from_fn(n, |_, _| rng.random_range(-0.3..0.3))).unwrap();
        let split = decompose(model.j(), Some(2.0), 1e-10).unwrap();
        assert!(split.has_minus());
        check_ladder_moments(&model, &split, &[-0.8, 0.0, 0.9]);
    }
}

#[test]
fn doubling_samples_does_not_add_variance() {
    let model = spiked_model(6, 900);
    let split = decompose(model.j(), None, 1e-10).unwrap();
    let cell = brute_force_cell(&split, model.h(), vec![0.4], 0.1, vec![0.0; 6]).unwrap();
    let ladder = CellLadder {
        split: &split,
        cell: &cell,
        schedule: AnnealingSchedule::new(6),
        steps: 200,
    };
    let log_z1 = cell.log_z_ladder[0];
    let variance = |samples: u64| {
        let params = EstimatorParams::new(samples, 1, log_z1).unwrap();
        let runs: Vec<f64> = (0..50)
            .map(|s| {
                anneal_partition(&ladder, &params, SeedTree::new(7).child("seed", s))
                    .unwrap()
                    .log_z_final()
            })
            .collect();
        let mean = runs.iter().sum::<f64>() / 50.0;
        runs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 49.0
    };
    let (v1, v2) = (variance(100), variance(200));
    assert!(v2 <= v1, "variance rose from {v1} to {v2}");
}

#[test]
fn spin_configs_index_consistently_with_the_oracle() {
    // bit i of the index is (σ_i + 1)/2
    let model = IsingModel::new(DMatrix::zeros(3, 3), DVector::from_vec(vec![2.0, 0.0, 0.0])).unwrap();
    let dist = brute_force_distribution(&model).unwrap();
    let up = SpinConfig::new(vec![1, -1, -1]).unwrap();
    assert_eq!(up.index(), 1);
    assert!((dist.prob(1) / dist.prob(0) - (4.0f64).exp()).abs() < 1e-9);
}

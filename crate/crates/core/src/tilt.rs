//! Tilts that neutralize the negative part `J₋`.
//!
//! For a base measure `P = P_{J⊥, b}` the functional
//!
//! ```text
//! G(u) = log E_P[exp(−⟨u, J₋σ⟩)] + ½⟨u, J₋u⟩
//! ∇G(u) = −J₋·E_{P(u)}[σ] + J₋u,   P(u) = P_{J⊥, b − J₋u}
//! ```
//!
//! has critical points at the fixed points `u = E_{P(u)}[σ]`. There the
//! proposal `P(u)` is within `exp(c·Tr J₋)` of the target reweighted by
//! `exp(−½⟨σ, J₋σ⟩)`. The solver is a two-phase randomized SGD: several
//! short trajectories, each stopped at a uniformly random iterate, then a
//! fresh-sample comparison of the candidates' gradient norms.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{IsingError, Result};
use crate::glauber::{default_steps, FieldSampler, STEP_CONSTANT};
use crate::oracle::{distribution_raw, log_partition_raw, log_partition_with};
use crate::rng::SeedTree;
use crate::spectral::{sym_op_norm, SpectralSplit};

#[derive(Clone, Debug)]
pub struct TiltProblem {
    pub j_perp: DMatrix<f64>,
    /// Negative part, already regularized when built with [`TiltProblem::new`].
    pub j_minus: DMatrix<f64>,
    pub base_field: DVector<f64>,
    pub c: f64,
    pub epsilon: f64,
    pub delta: f64,
    /// Multiple of the identity added to `J₋`.
    pub regularization: f64,
    perp_norm: f64,
    minus_norm: f64,
}

impl TiltProblem {
    /// Adds `(ε/(c·n))·I` to a non-zero `J₋` so it is strictly positive definite.
    pub fn new(
        j_perp: DMatrix<f64>,
        j_minus: DMatrix<f64>,
        base_field: DVector<f64>,
        c: f64,
        epsilon: f64,
        delta: f64,
    ) -> Result<Self> {
        let mut p = Self::unregularized(j_perp, j_minus, base_field, c, epsilon, delta)?;
        if p.minus_norm > 0.0 {
            let n = p.n();
            let alpha = epsilon / (c * n as f64);
            for i in 0..n {
                p.j_minus[(i, i)] += alpha;
            }
            p.regularization = alpha;
            p.minus_norm += alpha;
        }
        Ok(p)
    }

    /// Same checks, `J₋` used as given.
    pub fn unregularized(
        j_perp: DMatrix<f64>,
        j_minus: DMatrix<f64>,
        base_field: DVector<f64>,
        c: f64,
        epsilon: f64,
        delta: f64,
    ) -> Result<Self> {
        let n = base_field.len();
        if n == 0 || j_perp.shape() != (n, n) || j_minus.shape() != (n, n) {
            return Err(IsingError::invalid("tilt problem shapes disagree"));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) || !(delta > 0.0 && delta < 1.0) {
            return Err(IsingError::invalid(format!("need eps > 0 and delta in (0,1), got {epsilon}, {delta}")));
        }
        let minus_norm = sym_op_norm(&j_minus)?;
        let perp_norm = sym_op_norm(&j_perp)?;
        if minus_norm > 0.0 && !(c > 1.0 && c.is_finite()) {
            return Err(IsingError::invalid(format!("a non-zero negative part needs finite c > 1, got {c}")));
        }
        Ok(Self {
            j_perp,
            j_minus,
            base_field,
            c,
            epsilon,
            delta,
            regularization: 0.0,
            perp_norm,
            minus_norm,
        })
    }

    /// The problem for one grid cell: bulk and negative part from `split`.
    pub fn from_split(split: &SpectralSplit, base_field: DVector<f64>, epsilon: f64, delta: f64) -> Result<Self> {
        Self::new(split.j_perp.clone(), split.j_minus.clone(), base_field, split.c, epsilon, delta)
    }

    pub fn n(&self) -> usize {
        self.base_field.len()
    }

    pub fn is_trivial(&self) -> bool {
        self.minus_norm == 0.0
    }

    pub fn minus_norm(&self) -> f64 {
        self.minus_norm
    }

    pub fn minus_trace(&self) -> f64 {
        self.j_minus.trace()
    }

    /// `c·‖J₋‖² + ‖J₋‖`.
    pub fn smoothness(&self) -> f64 {
        self.c * self.minus_norm * self.minus_norm + self.minus_norm
    }

    /// Bound on the oracle output norm, `2‖J₋‖√n`.
    pub fn gradient_scale(&self) -> f64 {
        2.0 * self.minus_norm * (self.n() as f64).sqrt()
    }

    /// Field of the tilted proposal `P(u)`: `base − J₋u`.
    pub fn tilted_field(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.base_field - &self.j_minus * u
    }
}

/// `−J₋(σ − u)` for one draw `σ ~ P(u)`.
pub fn stochastic_gradient(problem: &TiltProblem, u: &DVector<f64>, sigma: &[f64]) -> DVector<f64> {
    let s = DVector::from_column_slice(sigma);
    -(&problem.j_minus * (s - u))
}

#[derive(Clone, Debug)]
pub struct TiltConfig {
    /// Cap on SGD iterations per trajectory.
    pub max_iters: u64,
    /// Fixed iterations per trajectory, bypassing the smoothness formula.
    pub iterations: Option<u64>,
    /// Fresh samples per candidate in phase two; default `⌈64/ε²⌉`.
    pub verify_samples: Option<u64>,
    /// Glauber steps per draw; default from the per-call TV target.
    pub glauber_steps: Option<u64>,
    /// Per-draw TV target; default `δ / (2·total draws)`.
    pub glauber_tv: Option<f64>,
    pub step_constant: f64,
    /// Replace the chosen candidate by its phase-two sample mean.
    pub polish: bool,
    pub trace: bool,
}

impl Default for TiltConfig {
    fn default() -> Self {
        Self {
            max_iters: 200_000,
            iterations: None,
            verify_samples: None,
            glauber_steps: None,
            glauber_tv: None,
            step_constant: STEP_CONSTANT,
            polish: true,
            trace: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceEntry {
    pub trajectory: usize,
    pub iteration: u64,
    pub u_norm: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TiltSolution {
    pub u: Vec<f64>,
    pub tilt: Vec<f64>,
    pub grad_norm_estimate: f64,
    pub sgd_iterations: u64,
    pub samples_used: u64,
    pub chain_steps: u64,
    /// Phase-two gradient-norm estimate per candidate.
    pub candidate_grad_norms: Vec<f64>,
    pub chosen: usize,
    pub verified: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TraceEntry>,
}

impl TiltSolution {
    fn zero(n: usize) -> Self {
        Self {
            u: vec![0.0; n],
            tilt: vec![0.0; n],
            grad_norm_estimate: 0.0,
            sgd_iterations: 0,
            samples_used: 0,
            chain_steps: 0,
            candidate_grad_norms: Vec::new(),
            chosen: 0,
            verified: true,
            trace: Vec::new(),
        }
    }

    pub fn tilt_norm(&self) -> f64 {
        self.tilt.iter().map(|t| t * t).sum::<f64>().sqrt()
    }

    pub fn trace_json(&self) -> String {
        serde_json::to_string(&self.trace).expect("trace serializes")
    }
}

/// Iterations, step size, verification samples and chain steps resolved
/// from the problem and config.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TiltPlan {
    pub trajectories: usize,
    pub iterations: u64,
    pub step_size: f64,
    pub verify_samples: u64,
    pub glauber_steps: u64,
}

pub fn plan(problem: &TiltProblem, cfg: &TiltConfig) -> TiltPlan {
    let n = problem.n() as f64;
    let eps = problem.epsilon;
    let l = problem.smoothness();
    let trajectories = (2.0 / problem.delta).log2().ceil().max(1.0) as usize;
    let iterations = cfg
        .iterations
        .unwrap_or_else(|| (10.0 * l * l * n / (eps * eps)).ceil() as u64)
        .clamp(1, cfg.max_iters.max(1));
    // D̃ = √n in the 2-RSG step-size rule
    let step_size = (1.0 / (2.0 * l)).min(n.sqrt() / (problem.gradient_scale() * (iterations as f64).sqrt()));
    let verify_samples = cfg.verify_samples.unwrap_or_else(|| (64.0 / (eps * eps)).ceil() as u64).max(1);
    let glauber_steps = cfg.glauber_steps.unwrap_or_else(|| {
        let draws = trajectories as f64 * (iterations + verify_samples) as f64;
        let tv = cfg.glauber_tv.unwrap_or(problem.delta / (2.0 * draws));
        default_steps(problem.n(), tv, problem.perp_norm, cfg.step_constant)
    });
    TiltPlan {
        trajectories,
        iterations,
        step_size,
        verify_samples,
        glauber_steps,
    }
}

struct Trajectory {
    u: DVector<f64>,
    iterations: u64,
    steps: u64,
    trace: Vec<TraceEntry>,
}

fn run_trajectory(problem: &TiltProblem, plan: &TiltPlan, cfg: &TiltConfig, index: usize, seed: SeedTree) -> Trajectory {
    let mut rng = seed.rng();
    let n = problem.n();
    let stop = rng.random_range(1..=plan.iterations);
    let mut u = DVector::zeros(n);
    let mut sampler = FieldSampler::new(
        &problem.j_perp,
        1.0,
        problem.base_field.as_slice().to_vec(),
        plan.glauber_steps,
        &mut rng,
    );
    let every = (plan.iterations / 100).max(1);
    let mut trace = Vec::new();
    let mut steps = 0;
    for t in 1..stop {
        sampler.set_field(problem.tilted_field(&u).as_slice().to_vec());
        let (sigma, cost) = sampler.draw(&mut rng);
        steps += cost;
        let g = stochastic_gradient(problem, &u, sigma);
        if cfg.trace && t % every == 0 {
            trace.push(TraceEntry {
                trajectory: index,
                iteration: t,
                u_norm: u.norm(),
                grad_norm: g.norm(),
            });
        }
        u.axpy(-plan.step_size, &g, 1.0);
    }
    Trajectory {
        u,
        iterations: stop - 1,
        steps,
        trace,
    }
}

/// Phase-two estimate at `u`: sample mean of `σ ~ P(u)` and chain steps.
fn tilted_sample_mean(problem: &TiltProblem, u: &DVector<f64>, samples: u64, chain_steps: u64, seed: SeedTree) -> (DVector<f64>, u64) {
    let mut rng = seed.rng();
    let mut sampler = FieldSampler::new(
        &problem.j_perp,
        1.0,
        problem.tilted_field(u).as_slice().to_vec(),
        chain_steps,
        &mut rng,
    );
    let mut sum = DVector::zeros(problem.n());
    let mut steps = 0;
    for _ in 0..samples {
        let (sigma, cost) = sampler.draw(&mut rng);
        steps += cost;
        for (a, b) in sum.iter_mut().zip(sigma) {
            *a += b;
        }
    }
    (sum / samples as f64, steps)
}

/// Two-phase randomized SGD from `u = 0`.
pub fn solve_tilt(problem: &TiltProblem, cfg: &TiltConfig, seed: u64) -> Result<TiltSolution> {
    let n = problem.n();
    if problem.is_trivial() {
        return Ok(TiltSolution::zero(n));
    }
    let plan = plan(problem, cfg);
    let root = SeedTree::new(seed);

    let trajectories: Vec<Trajectory> = (0..plan.trajectories)
        .into_par_iter()
        .map(|s| run_trajectory(problem, &plan, cfg, s, root.child("trajectory", s as u64)))
        .collect();

    let verified: Vec<(DVector<f64>, u64)> = trajectories
        .par_iter()
        .enumerate()
        .map(|(s, t)| tilted_sample_mean(problem, &t.u, plan.verify_samples, plan.glauber_steps, root.child("verify", s as u64)))
        .collect();

    let norms: Vec<f64> = trajectories
        .iter()
        .zip(&verified)
        .map(|(t, (mean, _))| (&problem.j_minus * (mean - &t.u)).norm())
        .collect();
    let chosen = (0..norms.len())
        .min_by(|&a, &b| norms[a].total_cmp(&norms[b]))
        .expect("at least one trajectory");
    let grad_norm_estimate = norms[chosen];

    let u = if cfg.polish {
        verified[chosen].0.clone()
    } else {
        trajectories[chosen].u.clone()
    };
    let tilt = -(&problem.j_minus * &u);
    let sgd_iterations: u64 = trajectories.iter().map(|t| t.iterations).sum();
    let samples_used = sgd_iterations + plan.verify_samples * plan.trajectories as u64;
    let chain_steps = trajectories.iter().map(|t| t.steps).sum::<u64>() + verified.iter().map(|v| v.1).sum::<u64>();
    let verified_ok = grad_norm_estimate <= problem.epsilon;
    if !verified_ok {
        log::debug!("tilt unverified: gradient estimate {grad_norm_estimate:.4} > {}", problem.epsilon);
    }
    Ok(TiltSolution {
        u: u.as_slice().to_vec(),
        tilt: tilt.as_slice().to_vec(),
        grad_norm_estimate,
        sgd_iterations,
        samples_used,
        chain_steps,
        candidate_grad_norms: norms,
        chosen,
        verified: verified_ok,
        trace: trajectories.into_iter().flat_map(|t| t.trace).collect(),
    })
}

/// Exact `E_{P(u)}[σ]`; `n ≤ 25`.
pub fn tilted_mean(problem: &TiltProblem, u: &DVector<f64>) -> Result<DVector<f64>> {
    let field = problem.tilted_field(u);
    Ok(distribution_raw(&problem.j_perp, field.as_slice())?.mean_cov().0)
}

/// `‖u − E_{P(u)}[σ]‖_∞` by enumeration.
pub fn fixed_point_residual(problem: &TiltProblem, u: &DVector<f64>) -> Result<f64> {
    Ok((u - tilted_mean(problem, u)?).amax())
}

/// Exact `G(u)`.
pub fn brute_force_g(problem: &TiltProblem, u: &DVector<f64>) -> Result<f64> {
    let base = log_partition_raw(&problem.j_perp, problem.base_field.as_slice())?;
    let tilted = log_partition_raw(&problem.j_perp, problem.tilted_field(u).as_slice())?;
    Ok(tilted - base + 0.5 * u.dot(&(&problem.j_minus * u)))
}

/// Exact `∇G(u)`.
pub fn brute_force_gradient(problem: &TiltProblem, u: &DVector<f64>) -> Result<DVector<f64>> {
    let mean = tilted_mean(problem, u)?;
    Ok(-(&problem.j_minus * (mean - u)))
}

/// `log E_{P(u)}[exp(−½⟨σ−u, J₋(σ−u)⟩)]` by enumeration; always `≤ 0`.
pub fn log_importance_bound(problem: &TiltProblem, u: &DVector<f64>) -> Result<f64> {
    let field = problem.tilted_field(u);
    let n = problem.n();
    let jm = &problem.j_minus;
    let log_z = log_partition_raw(&problem.j_perp, field.as_slice())?;
    let weighted = log_partition_with(&problem.j_perp, field.as_slice(), |s| {
        let mut q = 0.0;
        for a in 0..n {
            let da = s[a] - u[a];
            let mut row = 0.0;
            for b in 0..n {
                row += jm[(a, b)] * (s[b] - u[b]);
            }
            q += da * row;
        }
        -0.5 * q
    })?;
    Ok((weighted - log_z).min(0.0))
}

/// Monte Carlo version of [`log_importance_bound`] for large `n`.
pub fn sampled_log_importance_bound(problem: &TiltProblem, u: &DVector<f64>, samples: u64, chain_steps: u64, seed: u64) -> f64 {
    let mut rng = SeedTree::new(seed).rng();
    let mut sampler = FieldSampler::new(
        &problem.j_perp,
        1.0,
        problem.tilted_field(u).as_slice().to_vec(),
        chain_steps,
        &mut rng,
    );
    let mut acc = crate::numeric::LogSumExp::new();
    for _ in 0..samples {
        let (sigma, _) = sampler.draw(&mut rng);
        let d = DVector::from_column_slice(sigma) - u;
        acc.push(-0.5 * d.dot(&(&problem.j_minus * &d)));
    }
    acc.value() - (samples as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn scalar(base: f64, jm: f64) -> TiltProblem {
        TiltProblem::unregularized(
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, jm),
            DVector::from_element(1, base),
            2.0,
            0.05,
            0.1,
        )
        .unwrap()
    }

    // root of u = tanh(b − a·u) by bisection
    fn scalar_root(b: f64, a: f64) -> f64 {
        let (mut lo, mut hi) = (-1.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid - (b - a * mid).tanh() > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn random_instance(n: usize, seed: u64) -> TiltProblem {
        let mut rng = rng_from_seed(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let psd = &a * a.transpose();
        let jp = &psd * (0.4 / sym_op_norm(&psd).unwrap());
        let b = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let m = &b * b.transpose();
        let jm = &m * (0.8 / m.trace());
        let h = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
        TiltProblem::new(jp, jm, h, 2.0, 0.05, 0.1).unwrap()
    }

    #[test]
    fn zero_negative_part() {
        let p = TiltProblem::new(DMatrix::zeros(3, 3), DMatrix::zeros(3, 3), DVector::from_element(3, 0.2), 2.0, 0.1, 0.1).unwrap();
        assert!(p.is_trivial());
        assert_eq!(p.regularization, 0.0);
        let u = DVector::from_element(3, 0.7);
        assert_eq!(stochastic_gradient(&p, &u, &[1.0, -1.0, 1.0]).amax(), 0.0);
        let sol = solve_tilt(&p, &TiltConfig::default(), 1).unwrap();
        assert_eq!(sol.u, vec![0.0; 3]);
        assert_eq!(sol.tilt, vec![0.0; 3]);
        assert_eq!(sol.sgd_iterations, 0);
        assert_eq!(log_importance_bound(&p, &u).unwrap(), 0.0);
    }

    #[test]
    fn scalar_gradient_and_residual() {
        let p = scalar(1.0, 1.0);
        let g = brute_force_gradient(&p, &DVector::zeros(1)).unwrap();
        assert!((g[0] + 1f64.tanh()).abs() < 1e-12);
        let root = scalar_root(1.0, 1.0);
        assert!((root - 0.4797).abs() < 1e-3);
        assert!(fixed_point_residual(&p, &DVector::from_element(1, root)).unwrap() < 1e-6);
        let sym = scalar(0.0, 1.0);
        assert_eq!(fixed_point_residual(&sym, &DVector::zeros(1)).unwrap(), 0.0);
        let far = TiltProblem::unregularized(DMatrix::zeros(2, 2), DMatrix::identity(2, 2), DVector::zeros(2), 2.0, 0.05, 0.1).unwrap();
        let r = fixed_point_residual(&far, &DVector::from_element(2, 1.0)).unwrap();
        assert!((r - (1.0 - (-1f64).tanh())).abs() < 1e-12);
    }

    #[test]
    fn scalar_solve_finds_root() {
        let p = TiltProblem::new(DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 1.0), 2.0, 0.02, 0.1).unwrap();
        let cfg = TiltConfig {
            iterations: Some(20_000),
            ..TiltConfig::default()
        };
        let sol = solve_tilt(&p, &cfg, 3).unwrap();
        let root = scalar_root(1.0, p.j_minus[(0, 0)]);
        assert!((sol.u[0] - root).abs() < 0.03, "{} vs {root}", sol.u[0]);
        assert!((sol.tilt[0] + p.j_minus[(0, 0)] * sol.u[0]).abs() < 1e-12);
        let zero = TiltProblem::new(DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, 1.0), DVector::zeros(1), 2.0, 0.02, 0.1).unwrap();
        let sol = solve_tilt(&zero, &cfg, 3).unwrap();
        assert!(sol.u[0].abs() < 0.03);
    }

    #[test]
    fn phase_two_picks_the_smallest() {
        let p = random_instance(5, 8);
        let cfg = TiltConfig {
            iterations: Some(500),
            verify_samples: Some(400),
            glauber_steps: Some(100),
            trace: true,
            ..TiltConfig::default()
        };
        let sol = solve_tilt(&p, &cfg, 5).unwrap();
        for &g in &sol.candidate_grad_norms {
            assert!(sol.grad_norm_estimate <= g);
        }
        assert!(!sol.trace.is_empty());
        let parsed: serde_json::Value = serde_json::from_str(&sol.trace_json()).unwrap();
        assert!(parsed.as_array().unwrap()[0].get("grad_norm").is_some());
        // same seed, same answer, any pool size
        let pool = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
        let again = pool.install(|| solve_tilt(&p, &cfg, 5).unwrap());
        assert_eq!(sol.u, again.u);
    }

    #[test]
    fn regularization_shifts_trace() {
        let raw = random_instance(4, 1);
        let n = 4.0;
        assert!((raw.regularization - 0.05 / (2.0 * n)).abs() < 1e-15);
        let un = TiltProblem::unregularized(raw.j_perp.clone(), raw.j_minus.clone() - DMatrix::identity(4, 4) * raw.regularization, raw.base_field.clone(), 2.0, 0.05, 0.1).unwrap();
        assert!((raw.minus_trace() - un.minus_trace() - 0.05 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn coercive_far_from_origin() {
        let p = random_instance(5, 4);
        assert!(brute_force_g(&p, &DVector::zeros(5)).unwrap().abs() < 1e-12);
        let radius = 2.0 * p.c * 5f64.powf(1.5) * p.minus_norm() / p.epsilon;
        let mut rng = rng_from_seed(9);
        for _ in 0..10 {
            let dir = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0)).normalize();
            let u = dir * (radius * 1.01);
            assert!(brute_force_g(&p, &u).unwrap() > 0.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn gradient_matches_finite_differences(seed in 0u64..100_000) {
            let p = random_instance(6, seed);
            let mut rng = rng_from_seed(seed ^ 0xabc);
            let u = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            let g = brute_force_gradient(&p, &u).unwrap();
            let h = 1e-5;
            for k in 0..6 {
                let mut up = u.clone();
                up[k] += h;
                let mut dn = u.clone();
                dn[k] -= h;
                let fd = (brute_force_g(&p, &up).unwrap() - brute_force_g(&p, &dn).unwrap()) / (2.0 * h);
                prop_assert!((fd - g[k]).abs() < 1e-5, "k={} fd={} g={}", k, fd, g[k]);
            }
        }

        #[test]
        fn importance_bound_is_at_most_zero(seed in 0u64..100_000) {
            let p = random_instance(5, seed);
            let mut rng = rng_from_seed(seed);
            let u = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
            prop_assert!(log_importance_bound(&p, &u).unwrap() <= 0.0);
        }
    }
}

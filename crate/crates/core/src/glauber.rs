//! Heat-bath Glauber dynamics.
//!
//! The chain keeps the off-diagonal local fields `Σ_{j≠i} J_ij σ_j`
//! up to date after every flip, so a step costs `O(1)` without a flip and
//! `O(n)` with one, and the diagonal of `J` never enters: adding a
//! diagonal shift leaves every trajectory bitwise unchanged.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{IsingError, Result};
use crate::model::{IsingModel, SpinConfig};
use crate::numeric::logistic;
use crate::rng::{rng_from_seed, SeedTree};

/// Default constant in the step-count formulas.
pub const STEP_CONSTANT: f64 = 20.0;

/// Largest `n` for which [`transition_matrix`] builds the dense kernel.
pub const KERNEL_MAX_N: usize = 10;

/// Off-diagonal couplings at or below this are treated as absent.
pub const DECOUPLED_TOL: f64 = 1e-13;

#[derive(Clone, Debug, PartialEq)]
pub enum InitialState {
    UniformRandom,
    Fixed(SpinConfig),
}

#[derive(Clone, Debug)]
pub struct ChainConfig {
    pub steps: u64,
    pub seed: u64,
    pub initial: InitialState,
}

impl ChainConfig {
    pub fn new(steps: u64, seed: u64) -> Self {
        Self {
            steps,
            seed,
            initial: InitialState::UniformRandom,
        }
    }

    pub fn starting_at(mut self, sigma: SpinConfig) -> Self {
        self.initial = InitialState::Fixed(sigma);
        self
    }
}

/// `⌈C·n·log(n/ε)/γ⌉` for a bulk with spectral gap `γ = 1 − ‖J‖`.
pub fn steps_for_gap(n: usize, eps: f64, gap: f64, constant: f64) -> u64 {
    let n = n as f64;
    (constant * n * (n / eps).ln().max(1.0) / gap).ceil() as u64
}

/// `⌈C·n²·log(n/ε)⌉`, valid up to `‖J‖ ≤ 1`.
pub fn steps_for_unit_norm(n: usize, eps: f64, constant: f64) -> u64 {
    let n = n as f64;
    (constant * n * n * (n / eps).ln().max(1.0)).ceil() as u64
}

/// The gap formula when `‖J⊥‖ < 1`, the `n²` formula otherwise.
pub fn default_steps(n: usize, eps: f64, bulk_norm: f64, constant: f64) -> u64 {
    let gap = 1.0 - bulk_norm;
    if gap > 1e-9 {
        steps_for_gap(n, eps, gap, constant)
    } else {
        steps_for_unit_norm(n, eps, constant)
    }
}

/// Whether `J` has no off-diagonal coupling worth simulating.
pub fn is_decoupled(j: &DMatrix<f64>) -> bool {
    let n = j.nrows();
    (0..n).all(|c| (0..n).all(|r| r == c || j[(r, c)].abs() <= DECOUPLED_TOL))
}

/// Uniform configuration in `{-1,+1}^n`.
pub fn uniform_spins<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// Independent spins with `P(σ_i = +1) = logistic(2·field_i)`.
pub fn product_spins<R: Rng + ?Sized>(field: &[f64], rng: &mut R) -> Vec<f64> {
    field
        .iter()
        .map(|&f| {
            if rng.random::<f64>() < logistic(2.0 * f) {
                1.0
            } else {
                -1.0
            }
        })
        .collect()
}

/// Exact sampler for the zero-coupling model with the given field.
pub fn sample_product(field: &[f64], seed: u64) -> SpinConfig {
    let mut rng = rng_from_seed(seed);
    to_config(&product_spins(field, &mut rng))
}

pub(crate) fn to_config(sigma: &[f64]) -> SpinConfig {
    SpinConfig::from_raw(sigma.iter().map(|&s| if s > 0.0 { 1 } else { -1 }).collect())
}

/// Heat-bath chain for `exp(β·½⟨σ,Jσ⟩ + ⟨field,σ⟩)`.
///
/// `J` is borrowed; `β` and the field can change between steps, which is
/// how the tempering sampler moves along its ladder.
#[derive(Clone, Debug)]
pub struct GlauberChain<'a> {
    j: &'a [f64],
    n: usize,
    pub beta: f64,
    field: Vec<f64>,
    sigma: Vec<f64>,
    local: Vec<f64>,
    // ⟨σ, Jσ⟩ including the diagonal, kept current across flips
    quad: f64,
    coupled: bool,
}

impl<'a> GlauberChain<'a> {
    pub fn new(j: &'a DMatrix<f64>, beta: f64, field: Vec<f64>, sigma: Vec<f64>) -> Self {
        let n = j.nrows();
        assert!(j.ncols() == n && field.len() == n && sigma.len() == n);
        let mut chain = Self {
            j: j.as_slice(),
            n,
            beta,
            field,
            sigma,
            local: vec![0.0; n],
            quad: 0.0,
            coupled: !is_decoupled(j),
        };
        chain.refresh_local();
        chain
    }

    fn refresh_local(&mut self) {
        let n = self.n;
        let mut quad = 0.0;
        for i in 0..n {
            let col = &self.j[i * n..(i + 1) * n];
            let mut acc = 0.0;
            if self.coupled {
                for k in 0..n {
                    if k != i {
                        acc += col[k] * self.sigma[k];
                    }
                }
            }
            self.local[i] = acc;
            quad += self.sigma[i] * acc + col[i];
        }
        self.quad = quad;
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn field(&self) -> &[f64] {
        &self.field
    }

    pub fn config(&self) -> SpinConfig {
        to_config(&self.sigma)
    }

    pub fn set_state(&mut self, sigma: Vec<f64>) {
        assert_eq!(sigma.len(), self.n);
        self.sigma = sigma;
        self.refresh_local();
    }

    pub fn set_field(&mut self, field: Vec<f64>) {
        assert_eq!(field.len(), self.n);
        self.field = field;
    }

    /// `⟨σ, Jσ⟩` including the diagonal, updated incrementally.
    pub fn quad_form(&self) -> f64 {
        self.quad
    }

    /// Heat-bath probability of flipping site `i`.
    pub fn flip_probability(&self, i: usize) -> f64 {
        let s = self.sigma[i];
        logistic(-2.0 * s * (self.beta * self.local[i] + self.field[i]))
    }

    pub fn flip(&mut self, i: usize) {
        let n = self.n;
        let s = self.sigma[i];
        self.sigma[i] = -s;
        if !self.coupled {
            return;
        }
        self.quad -= 4.0 * s * self.local[i];
        let col = &self.j[i * n..(i + 1) * n];
        let delta = -2.0 * s;
        for k in 0..n {
            if k != i {
                self.local[k] += delta * col[k];
            }
        }
    }

    /// One step: uniform site, then one uniform for the flip decision.
    #[inline]
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let i = rng.random_range(0..self.n);
        let u: f64 = rng.random();
        let x = -2.0 * self.sigma[i] * (self.beta * self.local[i] + self.field[i]);
        // logistic(x) ≥ ½ iff x ≥ 0, which settles half the draws without exp
        let flip = if x >= 0.0 {
            u < 0.5 || u < logistic(x)
        } else {
            u < 0.5 && u < logistic(x)
        };
        if flip {
            self.flip(i);
        }
    }

    pub fn run<R: Rng + ?Sized>(&mut self, rng: &mut R, steps: u64) {
        for _ in 0..steps {
            self.step(rng);
        }
    }
}

/// Repeated draws from `exp(β·½⟨σ,Jσ⟩ + ⟨field,σ⟩)` with a persistent chain.
///
/// Each draw runs `steps` heat-bath steps from the previous state. When
/// the effective coupling vanishes (`β = 0` or `J` diagonal) draws are
/// exact product samples instead.
#[derive(Clone, Debug)]
pub struct FieldSampler<'a> {
    chain: GlauberChain<'a>,
    steps: u64,
    exact: bool,
    exact_sigma: Vec<f64>,
}

impl<'a> FieldSampler<'a> {
    pub fn new<R: Rng + ?Sized>(j: &'a DMatrix<f64>, beta: f64, field: Vec<f64>, steps: u64, rng: &mut R) -> Self {
        let n = j.nrows();
        let exact = beta == 0.0 || is_decoupled(j);
        let init = if exact { vec![1.0; n] } else { uniform_spins(n, rng) };
        Self {
            chain: GlauberChain::new(j, beta, field, init),
            steps,
            exact,
            exact_sigma: Vec::new(),
        }
    }

    pub fn is_exact(&self) -> bool {
        self.exact
    }

    pub fn set_field(&mut self, field: Vec<f64>) {
        self.chain.set_field(field);
    }

    /// Next draw and the number of chain steps it cost.
    pub fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> (&[f64], u64) {
        if self.exact {
            self.exact_sigma = product_spins(self.chain.field(), rng);
            (&self.exact_sigma, 0)
        } else {
            self.chain.run(rng, self.steps);
            (self.chain.sigma(), self.steps)
        }
    }
}

fn check_site(model: &IsingModel, sigma: &SpinConfig, i: usize) -> Result<()> {
    if sigma.len() != model.n() {
        return Err(IsingError::invalid("configuration length does not match model"));
    }
    if i >= model.n() {
        return Err(IsingError::invalid(format!("site {i} out of range for n = {}", model.n())));
    }
    Ok(())
}

/// `p(σ⁽ⁱ⁾) / (p(σ⁽ⁱ⁾) + p(σ))`.
pub fn flip_probability(model: &IsingModel, sigma: &SpinConfig, i: usize) -> Result<f64> {
    check_site(model, sigma, i)?;
    let s = sigma.as_slice();
    let j = model.j();
    let local: f64 = (0..model.n())
        .filter(|&k| k != i)
        .map(|k| j[(i, k)] * s[k] as f64)
        .sum();
    let si = s[i] as f64;
    Ok(logistic(-2.0 * si * (local + model.h()[i])))
}

fn initial_spins(model: &IsingModel, init: &InitialState, rng: &mut impl Rng) -> Result<Vec<f64>> {
    match init {
        InitialState::UniformRandom => Ok(uniform_spins(model.n(), rng)),
        InitialState::Fixed(s) => {
            if s.len() != model.n() {
                return Err(IsingError::invalid("initial state length does not match model"));
            }
            Ok(s.as_slice().iter().map(|&v| v as f64).collect())
        }
    }
}

/// Run `cfg.steps` heat-bath steps and return the final state.
pub fn glauber_run(model: &IsingModel, cfg: &ChainConfig) -> Result<SpinConfig> {
    if cfg.steps == 0 {
        return Err(IsingError::invalid("chain needs at least one step"));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let sigma = initial_spins(model, &cfg.initial, &mut rng)?;
    let mut chain = GlauberChain::new(model.j(), 1.0, model.h().as_slice().to_vec(), sigma);
    chain.run(&mut rng, cfg.steps);
    Ok(chain.config())
}

/// `count` independent chains; chain `k` uses stream `("chain", k)` of
/// `cfg.seed`, so the output does not depend on the thread count.
pub fn glauber_chains(model: &IsingModel, cfg: &ChainConfig, count: usize) -> Result<Vec<SpinConfig>> {
    if cfg.steps == 0 {
        return Err(IsingError::invalid("chain needs at least one step"));
    }
    let root = SeedTree::new(cfg.seed);
    (0..count)
        .into_par_iter()
        .map(|k| {
            let mut rng = root.child("chain", k as u64).rng();
            let sigma = initial_spins(model, &cfg.initial, &mut rng)?;
            let mut chain = GlauberChain::new(model.j(), 1.0, model.h().as_slice().to_vec(), sigma);
            chain.run(&mut rng, cfg.steps);
            Ok(chain.config())
        })
        .collect()
}

/// One long chain, recording the state every `every` steps.
pub fn glauber_trace(model: &IsingModel, cfg: &ChainConfig, every: u64, snapshots: usize) -> Result<Vec<SpinConfig>> {
    if every == 0 {
        return Err(IsingError::invalid("snapshot spacing must be positive"));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let sigma = initial_spins(model, &cfg.initial, &mut rng)?;
    let mut chain = GlauberChain::new(model.j(), 1.0, model.h().as_slice().to_vec(), sigma);
    let mut out = Vec::with_capacity(snapshots);
    for _ in 0..snapshots {
        chain.run(&mut rng, every);
        out.push(chain.config());
    }
    Ok(out)
}

/// Dense one-step kernel, rows indexed by state index; `n ≤ 10`.
pub fn transition_matrix(model: &IsingModel) -> Result<DMatrix<f64>> {
    let n = model.n();
    if n > KERNEL_MAX_N {
        return Err(IsingError::capacity("transition kernel spin count", n as u64, KERNEL_MAX_N as u64));
    }
    let size = 1usize << n;
    let mut k = DMatrix::zeros(size, size);
    for idx in 0..size {
        let sigma = SpinConfig::from_index(idx as u64, n);
        let mut stay = 1.0;
        for i in 0..n {
            let p = flip_probability(model, &sigma, i)? / n as f64;
            k[(idx, idx ^ (1 << i))] = p;
            stay -= p;
        }
        k[(idx, idx)] = stay;
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{brute_force_distribution, DiscreteDistribution};
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_model(n: usize, seed: u64, scale: f64) -> IsingModel {
        let mut rng = rng_from_seed(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let j = (&a + a.transpose()) * (0.5 * scale);
        let h = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
        IsingModel::new(j, h).unwrap()
    }

    #[test]
    fn flip_probability_examples() {
        let free = IsingModel::from_row_major(3, &[0.0; 9], &[0.0; 3]).unwrap();
        for idx in 0..8 {
            let s = SpinConfig::from_index(idx, 3);
            for i in 0..3 {
                assert_eq!(flip_probability(&free, &s, i).unwrap(), 0.5);
            }
        }
        let one = IsingModel::from_row_major(1, &[0.0], &[1.0]).unwrap();
        let p = flip_probability(&one, &SpinConfig::new(vec![-1]).unwrap(), 0).unwrap();
        assert!((p - 0.8807970779778823).abs() < 1e-12);
        assert!(flip_probability(&one, &SpinConfig::new(vec![-1]).unwrap(), 1).is_err());
    }

    #[test]
    fn diagonal_shift_leaves_flips_and_chains_unchanged() {
        let m = random_model(5, 3, 0.5);
        let shifted = m.with_diagonal_shift(&[0.3, -1.0, 2.0, 0.0, 5.0]).unwrap();
        for idx in 0..32 {
            let s = SpinConfig::from_index(idx, 5);
            for i in 0..5 {
                assert_eq!(flip_probability(&m, &s, i).unwrap(), flip_probability(&shifted, &s, i).unwrap());
            }
        }
        let cfg = ChainConfig::new(500, 9);
        assert_eq!(glauber_run(&m, &cfg).unwrap(), glauber_run(&shifted, &cfg).unwrap());
    }

    #[test]
    fn product_sampler_examples() {
        let s = sample_product(&[1e3, -1e3, 1e3], 1);
        assert_eq!(s.as_slice(), &[1, -1, 1]);
        let mut rng = rng_from_seed(2);
        let trials = 100_000;
        let (mut a, mut b, mut fair) = (0, 0, 0);
        for _ in 0..trials {
            let s = product_spins(&[1.0, -1.0, 0.0], &mut rng);
            a += (s[0] > 0.0) as u32;
            b += (s[1] < 0.0) as u32;
            fair += (s[2] > 0.0) as u32;
        }
        let se = (0.25f64 / trials as f64).sqrt();
        assert!((a as f64 / trials as f64 - 0.8807970779778823).abs() < 4.0 * se);
        assert!((b as f64 / trials as f64 - 0.8807970779778823).abs() < 4.0 * se);
        assert!((fair as f64 / trials as f64 - 0.5).abs() < 4.0 * se);
    }

    #[test]
    fn single_spin_chain_hits_logistic() {
        let one = IsingModel::from_row_major(1, &[0.0], &[1.0]).unwrap();
        let out = glauber_chains(&one, &ChainConfig::new(10, 5), 100_000).unwrap();
        let up = out.iter().filter(|s| s.as_slice()[0] == 1).count() as f64 / 1e5;
        assert!((up - 0.8807970779778823).abs() < 0.01, "{up}");
    }

    #[test]
    fn free_chain_is_uniform() {
        let n = 8;
        let free = IsingModel::with_zero_field(DMatrix::zeros(n, n)).unwrap();
        let steps = (10.0 * n as f64 * (n as f64).ln()).ceil() as u64;
        let out = glauber_chains(&free, &ChainConfig::new(steps, 11), 100_000).unwrap();
        let emp = DiscreteDistribution::empirical(n, &out).unwrap();
        let exact = brute_force_distribution(&free).unwrap();
        let tv = emp.tv_distance(&exact).unwrap();
        assert!(tv <= 0.02, "tv {tv}");
    }

    #[test]
    fn bulk_chain_reaches_oracle() {
        // 0 ⪯ J ⪯ (1−γ)I with γ = ½, n = 8, ε = 0.05
        let n = 8;
        let mut rng = rng_from_seed(21);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let psd = &a * a.transpose();
        let top = crate::spectral::sym_op_norm(&psd).unwrap();
        let j = psd * (0.5 / top);
        let h = DVector::from_fn(n, |_, _| rng.random_range(-0.3..0.3));
        let m = IsingModel::new(j, h).unwrap();
        let steps = steps_for_gap(n, 0.05, 0.5, STEP_CONSTANT);
        let samples = 40_000;
        let out = glauber_chains(&m, &ChainConfig::new(steps, 4), samples).unwrap();
        let emp = DiscreteDistribution::empirical(n, &out).unwrap();
        let exact = brute_force_distribution(&m).unwrap();
        let tv = emp.tv_distance(&exact).unwrap();
        // finite-sample bias of the empirical TV over 256 states
        let bias: f64 = exact
            .probs()
            .iter()
            .map(|p| (p * (1.0 - p) / samples as f64).sqrt())
            .sum::<f64>()
            * 0.5
            * (2.0 / std::f64::consts::PI).sqrt();
        assert!(tv <= 0.05 + bias + 0.01, "tv {tv}, sampling floor {bias}");
    }

    #[test]
    fn runs_are_deterministic() {
        let m = random_model(6, 1, 0.8);
        let cfg = ChainConfig::new(1000, 77);
        assert_eq!(glauber_run(&m, &cfg).unwrap(), glauber_run(&m, &cfg).unwrap());
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = glauber_chains(&m, &cfg, 50).unwrap();
        let b = pool.install(|| glauber_chains(&m, &cfg, 50).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn kernel_examples() {
        let free = IsingModel::from_row_major(1, &[0.0], &[0.0]).unwrap();
        let k = transition_matrix(&free).unwrap();
        assert!((k - DMatrix::from_element(2, 2, 0.5)).amax() < 1e-15);
        let big = IsingModel::with_zero_field(DMatrix::zeros(11, 11)).unwrap();
        assert!(transition_matrix(&big).is_err());
    }

    #[test]
    fn step_counts() {
        assert_eq!(steps_for_gap(8, 0.05, 0.5, 20.0), (20.0 * 8.0 * (160.0f64).ln() / 0.5).ceil() as u64);
        assert_eq!(default_steps(8, 0.05, 1.0, 20.0), steps_for_unit_norm(8, 0.05, 20.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn kernel_is_stationary_and_reversible(seed in 0u64..1_000_000, n in 1usize..7) {
            let m = random_model(n, seed, 0.9 / n as f64);
            let k = transition_matrix(&m).unwrap();
            let p = brute_force_distribution(&m).unwrap().probs();
            let size = p.len();
            for a in 0..size {
                let row: f64 = k.row(a).sum();
                prop_assert!((row - 1.0).abs() < 1e-12);
                let mass: f64 = (0..size).map(|b| p[b] * k[(b, a)]).sum();
                prop_assert!((mass - p[a]).abs() < 1e-10);
                for b in 0..size {
                    prop_assert!((p[a] * k[(a, b)] - p[b] * k[(b, a)]).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn flip_probabilities_are_complementary(seed in 0u64..1_000_000, n in 1usize..7, idx in 0u64..64, site in 0usize..7) {
            let m = random_model(n, seed, 1.0);
            let idx = idx % (1 << n);
            let i = site % n;
            let s = SpinConfig::from_index(idx, n);
            let mut t = s.clone();
            t.flip(i);
            let sum = flip_probability(&m, &s, i).unwrap() + flip_probability(&m, &t, i).unwrap();
            prop_assert_eq!(sum, 1.0);
        }
    }
}

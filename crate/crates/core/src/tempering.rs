//! Simulated tempering over (level, cell, σ), finished by a rejection step
//! that turns the tempering law at the top level into samples of `p`.
//!
//! Level `ℓ` with cell `y*` targets
//! `q_ℓ(σ) ∝ exp(β_ℓ·½⟨σ,J⊥σ⟩ + ⟨h(y*),σ⟩) / Ẑ_ℓ(y*)`, so with accurate
//! ladders every (level, cell) pair carries about the same mass and the
//! walk moves freely between the easy product measure at `β = 0` and the
//! full bulk coupling.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::annealing::AnnealingSchedule;
use crate::error::{IsingError, Result};
use crate::glauber::{product_spins, to_config, GlauberChain};
use crate::hs_grid::{build_grid, estimate_all_cells, log_g_top_raw, CellData, EstimateConfig, GridEstimate, GridOverrides};
use crate::model::{IsingModel, SpinConfig};
use crate::numeric::logistic;
use crate::rng::{ChainRng, SeedTree};
use crate::spectral::{decompose, SpectralSplit};

/// Constant in the default trajectory length `C·n⁴·d·log(n‖J‖/ε)`.
pub const STEPS_CONSTANT: f64 = 4.0;
/// Largest state space [`tempering_kernel`] will assemble.
pub const KERNEL_MAX_STATES: usize = 4096;

/// Levels, cells and normalizers shared by every chain.
pub struct TemperingContext<'a> {
    split: &'a SpectralSplit,
    cells: Vec<&'a CellData>,
    schedule: AnnealingSchedule,
    log_norm: f64,
}

impl<'a> TemperingContext<'a> {
    /// Uses every cell not flagged as failed.
    pub fn new(split: &'a SpectralSplit, estimate: &'a GridEstimate) -> Result<Self> {
        if estimate.per_cell.is_empty() {
            return Err(IsingError::invalid(format!(
                "estimate (method {}) carries no per-cell ladders",
                estimate.method
            )));
        }
        if estimate.d != split.d || estimate.c != split.c.is_finite().then_some(split.c) {
            return Err(IsingError::invalid("estimate was computed for a different split"));
        }
        Self::from_cells(split, estimate.per_cell.iter().filter(|c| !c.is_excluded()).collect())
    }

    pub fn from_cells(split: &'a SpectralSplit, cells: Vec<&'a CellData>) -> Result<Self> {
        let n = split.n();
        let schedule = AnnealingSchedule::new(n);
        if cells.is_empty() {
            return Err(IsingError::invalid("no usable grid cells"));
        }
        for c in &cells {
            if c.log_z_ladder.len() != schedule.m + 1 || c.field.len() != n || c.y_star.len() != split.d {
                return Err(IsingError::invalid("cell data does not match the model"));
            }
            if c.log_z_ladder.iter().any(|v| !v.is_finite()) {
                return Err(IsingError::Numeric(format!("non-finite ladder in cell {:?}", c.y_star)));
            }
        }
        let max_top = cells
            .iter()
            .map(|c| c.log_z_ladder[schedule.m])
            .fold(f64::NEG_INFINITY, f64::max);
        let log_norm = (4.0 * std::f64::consts::E).ln() + max_top + split.c_trace_minus() + 1.0;
        Ok(Self {
            split,
            cells,
            schedule,
            log_norm,
        })
    }

    /// Number of levels `M`.
    pub fn levels(&self) -> usize {
        self.schedule.m
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn cell(&self, index: usize) -> &CellData {
        self.cells[index]
    }

    pub fn beta(&self, level: usize) -> f64 {
        self.schedule.beta(level)
    }

    /// `log Ẑ_ℓ(y*)`, `ℓ = 1..=M+1`.
    pub fn log_z(&self, level: usize, cell: usize) -> f64 {
        self.cells[cell].log_z_ladder[level - 1]
    }

    /// `log(4e) + max_y* log Ẑ_{M+1}(y*) + c·Tr(J₋) + 1`.
    pub fn log_accept_normalizer(&self) -> f64 {
        self.log_norm
    }

    /// Log acceptance probability of the final rejection step at the top level.
    pub fn final_accept_log_prob(&self, cell: usize, sigma: &[f64]) -> Result<f64> {
        let m = self.levels();
        let v = self.log_z(m, cell) + log_g_top_raw(self.split, self.cells[cell], sigma) - self.log_norm;
        if v > 0.0 {
            return Err(IsingError::Consistency(format!(
                "final acceptance probability exp({v:.4}) exceeds 1 in cell {:?}",
                self.cells[cell].y_star
            )));
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemperingState {
    /// `1..=M`.
    pub level: usize,
    pub cell: usize,
    pub sigma: SpinConfig,
}

/// One tempering chain; the heat-bath part reuses a [`GlauberChain`] on
/// `J⊥` whose `β` and field follow the current level and cell.
pub struct TemperingChain<'c, 'a> {
    ctx: &'c TemperingContext<'a>,
    level: usize,
    cell: usize,
    chain: GlauberChain<'a>,
}

impl<'c, 'a> TemperingChain<'c, 'a> {
    /// Level 1, a uniform cell and an exact product draw.
    pub fn new<R: Rng + ?Sized>(ctx: &'c TemperingContext<'a>, rng: &mut R) -> Self {
        let cell = rng.random_range(0..ctx.cell_count());
        let field = ctx.cell(cell).field.clone();
        let sigma = product_spins(&field, rng);
        Self {
            ctx,
            level: 1,
            cell,
            chain: GlauberChain::new(&ctx.split.j_perp, ctx.beta(1), field, sigma),
        }
    }

    pub fn from_state(ctx: &'c TemperingContext<'a>, state: &TemperingState) -> Result<Self> {
        let m = ctx.levels();
        if state.level == 0 || state.level > m || state.cell >= ctx.cell_count() || state.sigma.len() != ctx.split.n() {
            return Err(IsingError::invalid("tempering state out of range"));
        }
        let sigma = state.sigma.as_slice().iter().map(|&s| s as f64).collect();
        Ok(Self {
            ctx,
            level: state.level,
            cell: state.cell,
            chain: GlauberChain::new(
                &ctx.split.j_perp,
                ctx.beta(state.level),
                ctx.cell(state.cell).field.clone(),
                sigma,
            ),
        })
    }

    pub fn restart<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.level = 1;
        self.chain.beta = self.ctx.beta(1);
        self.reselect(rng);
    }

    fn reselect<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.cell = rng.random_range(0..self.ctx.cell_count());
        let field = self.ctx.cell(self.cell).field.clone();
        let sigma = product_spins(&field, rng);
        self.chain.set_field(field);
        self.chain.set_state(sigma);
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn cell(&self) -> usize {
        self.cell
    }

    pub fn sigma(&self) -> &[f64] {
        self.chain.sigma()
    }

    pub fn state(&self) -> TemperingState {
        TemperingState {
            level: self.level,
            cell: self.cell,
            sigma: self.chain.config(),
        }
    }

    /// `log q_to(σ) − log q_from(σ)` at the current cell.
    pub fn log_level_ratio(&self, from: usize, to: usize) -> f64 {
        let half_quad = 0.5 * self.chain.quad_form();
        (self.ctx.beta(to) - self.ctx.beta(from)) * half_quad + self.ctx.log_z(from, self.cell)
            - self.ctx.log_z(to, self.cell)
    }

    fn try_level<R: Rng + ?Sized>(&mut self, to: usize, rng: &mut R) {
        let log_r = self.log_level_ratio(self.level, to);
        let u: f64 = rng.random();
        if log_r >= 0.0 || u < log_r.exp() {
            self.level = to;
            self.chain.beta = self.ctx.beta(to);
        }
    }

    /// Up or down with probability ¼ each; otherwise (after a possible
    /// cell reset at level 1) one heat-bath flip.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let m = self.ctx.levels();
        let u: f64 = rng.random();
        if u < 0.25 {
            if self.level < m {
                self.try_level(self.level + 1, rng);
            }
        } else if u < 0.5 {
            if self.level > 1 {
                self.try_level(self.level - 1, rng);
            }
        } else {
            if self.level == 1 && rng.random::<bool>() {
                self.reselect(rng);
            }
            self.chain.step(rng);
        }
    }

    pub fn run<R: Rng + ?Sized>(&mut self, rng: &mut R, steps: u64) {
        for _ in 0..steps {
            self.step(rng);
        }
    }

    /// Log probability of accepting the current state; the chain must sit
    /// at the top level.
    pub fn final_accept_log_prob(&self) -> Result<f64> {
        if self.level != self.ctx.levels() {
            return Err(IsingError::invalid(format!(
                "final acceptance needs level {}, chain is at {}",
                self.ctx.levels(),
                self.level
            )));
        }
        self.ctx.final_accept_log_prob(self.cell, self.chain.sigma())
    }
}

/// One step from `state`, for tests and tracing. Builds a fresh chain, so
/// long runs should use [`TemperingChain`] directly.
pub fn tempering_step<R: Rng + ?Sized>(
    ctx: &TemperingContext,
    state: &TemperingState,
    rng: &mut R,
) -> Result<TemperingState> {
    let mut chain = TemperingChain::from_state(ctx, state)?;
    chain.step(rng);
    Ok(chain.state())
}

/// Final acceptance for an explicit state.
pub fn final_accept_log_prob(ctx: &TemperingContext, state: &TemperingState) -> Result<f64> {
    TemperingChain::from_state(ctx, state)?.final_accept_log_prob()
}

/// Draw from `proposal` and accept with probability `exp(log_ratio − log_c)`.
///
/// A ratio above `log_c` means the bound was wrong and is reported as a
/// consistency error rather than silently clipped.
pub fn rejection_sample_generic<T, R, P, F>(
    mut proposal: P,
    log_ratio: F,
    log_c: f64,
    max_trials: u64,
    rng: &mut R,
) -> Result<(T, u64)>
where
    R: Rng + ?Sized,
    P: FnMut(&mut R) -> T,
    F: Fn(&T) -> f64,
{
    for trial in 1..=max_trials {
        let x = proposal(rng);
        let lr = log_ratio(&x) - log_c;
        if lr > 0.0 {
            return Err(IsingError::Consistency(format!(
                "density ratio exceeds the bound by exp({lr:.4})"
            )));
        }
        let u: f64 = rng.random();
        if u < lr.exp() {
            return Ok((x, trial));
        }
    }
    Err(IsingError::SamplerFailure {
        trials: max_trials,
        steps: 0,
        reason: "rejection sampler exhausted its trial budget".into(),
    })
}

/// `⌈C·n⁴·max(d,1)·max(log(n‖J‖/ε), 1)⌉`.
pub fn default_tempering_steps(n: usize, d: usize, op_norm: f64, eps: f64, constant: f64) -> u64 {
    let nf = n as f64;
    let log_term = (nf * op_norm / eps).ln().max(1.0);
    (constant * nf.powi(4) * d.max(1) as f64 * log_term).ceil() as u64
}

/// `⌈64·4e²·(n+1)·e^{c·Tr(J₋)}·|grid|⌉`, saturating.
///
/// A trial ends at the top level with probability about `1/(n+1)` and is
/// then accepted with probability at least `1/(4e²·e^{c·Tr(J₋)}·|grid|)`,
/// so this is 64 times the worst-case mean.
pub fn default_trial_budget(n: usize, c_trace_minus: f64, cells: usize) -> u64 {
    let e2 = std::f64::consts::E * std::f64::consts::E;
    let v = (64.0 * 4.0 * e2 * (n + 1) as f64 * c_trace_minus.exp() * cells as f64).ceil();
    if v >= u64::MAX as f64 {
        u64::MAX
    } else {
        v as u64
    }
}

#[derive(Clone, Debug)]
pub struct SampleConfig {
    /// Target total-variation error.
    pub eps: f64,
    pub delta: f64,
    pub num_samples: usize,
    pub c: Option<f64>,
    /// Tempering steps per trial; default [`default_tempering_steps`].
    pub steps: Option<u64>,
    pub steps_constant: f64,
    /// Trials per sample; default [`default_trial_budget`].
    pub trial_budget: Option<u64>,
    /// Grid used when no estimate is supplied.
    pub grid: GridOverrides,
    /// Estimator used when no estimate is supplied; default is accuracy
    /// `log 2` at confidence `delta`.
    pub estimate: Option<EstimateConfig>,
}

impl SampleConfig {
    pub fn new(eps: f64, delta: f64, num_samples: usize) -> Self {
        Self {
            eps,
            delta,
            num_samples,
            c: None,
            steps: None,
            steps_constant: STEPS_CONSTANT,
            trial_budget: None,
            grid: GridOverrides::default(),
            estimate: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SamplerReport {
    pub samples: Vec<SpinConfig>,
    /// Trials summed over samples.
    pub trials: u64,
    pub per_sample_trials: Vec<u64>,
    /// Tempering steps summed over all trials.
    pub steps_total: u64,
    pub steps_per_trial: u64,
    pub trial_budget: u64,
    /// Accepted samples over trials.
    pub acceptance_rate: f64,
    /// Fraction of trials that ended at the top level.
    pub top_level_rate: f64,
    /// Largest final-acceptance log probability seen; always `≤ 0`.
    pub max_log_accept: f64,
}

struct OneSample {
    sigma: SpinConfig,
    trials: u64,
    top_hits: u64,
    max_log_accept: f64,
}

fn sample_one(ctx: &TemperingContext, steps: u64, budget: u64, rng: &mut ChainRng) -> Result<OneSample> {
    let m = ctx.levels();
    let mut chain = TemperingChain::new(ctx, rng);
    let mut top_hits = 0;
    let mut max_log_accept = f64::NEG_INFINITY;
    for trial in 1..=budget {
        if trial > 1 {
            chain.restart(rng);
        }
        chain.run(rng, steps);
        if chain.level() != m {
            continue;
        }
        top_hits += 1;
        let la = chain.final_accept_log_prob()?;
        max_log_accept = max_log_accept.max(la);
        let u: f64 = rng.random();
        if u < la.exp() {
            return Ok(OneSample {
                sigma: to_config(chain.sigma()),
                trials: trial,
                top_hits,
                max_log_accept,
            });
        }
    }
    Err(IsingError::SamplerFailure {
        trials: budget,
        steps: budget.saturating_mul(steps),
        reason: format!("no sample accepted ({top_hits} trials reached the top level)"),
    })
}

/// Samples from the cells of an existing estimate; sample `k` uses stream
/// `("sample", k)` of `seed`.
pub fn sample_with_estimate(
    model: &IsingModel,
    split: &SpectralSplit,
    estimate: &GridEstimate,
    cfg: &SampleConfig,
    seed: u64,
) -> Result<SamplerReport> {
    if !(cfg.eps > 0.0 && cfg.eps < 1.0) || !(cfg.delta > 0.0 && cfg.delta < 1.0) {
        return Err(IsingError::invalid("eps and delta must lie in (0,1)"));
    }
    if split.n() != model.n() {
        return Err(IsingError::invalid("split does not match the model"));
    }
    let ctx = TemperingContext::new(split, estimate)?;
    let n = model.n();
    let steps = cfg
        .steps
        .unwrap_or_else(|| default_tempering_steps(n, split.d, split.op_norm, cfg.eps, cfg.steps_constant))
        .max(1);
    let budget = cfg
        .trial_budget
        .unwrap_or_else(|| default_trial_budget(n, split.c_trace_minus(), ctx.cell_count()))
        .max(1);
    let root = SeedTree::new(seed);
    let results: Vec<Result<OneSample>> = (0..cfg.num_samples as u64)
        .into_par_iter()
        .map(|k| sample_one(&ctx, steps, budget, &mut root.child("sample", k).rng()))
        .collect();

    let mut samples = Vec::with_capacity(cfg.num_samples);
    let mut per_sample_trials = Vec::with_capacity(cfg.num_samples);
    let mut top_hits = 0;
    let mut max_log_accept = f64::NEG_INFINITY;
    for r in results {
        let s = r?;
        samples.push(s.sigma);
        per_sample_trials.push(s.trials);
        top_hits += s.top_hits;
        max_log_accept = max_log_accept.max(s.max_log_accept);
    }
    let trials: u64 = per_sample_trials.iter().sum();
    let ratio = |a: u64| if trials == 0 { 0.0 } else { a as f64 / trials as f64 };
    Ok(SamplerReport {
        acceptance_rate: ratio(samples.len() as u64),
        top_level_rate: ratio(top_hits),
        samples,
        trials,
        per_sample_trials,
        steps_total: trials.saturating_mul(steps),
        steps_per_trial: steps,
        trial_budget: budget,
        max_log_accept,
    })
}

/// Decompose, estimate the cell ladders unless `precomputed` is given,
/// then draw `cfg.num_samples` samples.
pub fn sample(
    model: &IsingModel,
    cfg: &SampleConfig,
    seed: u64,
    precomputed: Option<&GridEstimate>,
) -> Result<SamplerReport> {
    let split = decompose(model.j(), cfg.c, crate::model::SYMMETRY_TOL)?;
    match precomputed {
        Some(est) => sample_with_estimate(model, &split, est, cfg, seed),
        None => {
            let grid = build_grid(&split, cfg.eps, &cfg.grid)?;
            let est_cfg = cfg
                .estimate
                .clone()
                .unwrap_or_else(|| EstimateConfig::new(std::f64::consts::LN_2, cfg.delta));
            let est_seed = SeedTree::new(seed).child("estimate", 0).seed();
            let est = estimate_all_cells(model, &split, &grid, &est_cfg, est_seed)?;
            sample_with_estimate(model, &split, &est, cfg, seed)
        }
    }
}

fn heat_bath_row(j: &DMatrix<f64>, beta: f64, field: &[f64], idx: usize, n: usize) -> Vec<(usize, f64)> {
    let sigma: Vec<f64> = (0..n).map(|i| if (idx >> i) & 1 == 1 { 1.0 } else { -1.0 }).collect();
    let mut row = Vec::with_capacity(n + 1);
    let mut stay = 1.0;
    for i in 0..n {
        let local: f64 = (0..n).filter(|&k| k != i).map(|k| j[(i, k)] * sigma[k]).sum();
        let p = logistic(-2.0 * sigma[i] * (beta * local + field[i])) / n as f64;
        row.push((idx ^ (1 << i), p));
        stay -= p;
    }
    row.push((idx, stay));
    row
}

fn product_probs(field: &[f64], n: usize) -> Vec<f64> {
    (0..1usize << n)
        .map(|idx| {
            (0..n)
                .map(|i| {
                    let s = if (idx >> i) & 1 == 1 { 1.0 } else { -1.0 };
                    logistic(2.0 * s * field[i])
                })
                .product()
        })
        .collect()
}

/// State index of `(level, cell, σ)` in [`tempering_kernel`].
pub fn kernel_index(ctx: &TemperingContext, level: usize, cell: usize, sigma_index: u64) -> usize {
    let n = ctx.split.n();
    ((level - 1) * ctx.cell_count() + cell) * (1 << n) + sigma_index as usize
}

/// The full tempering transition matrix, rows indexed by [`kernel_index`].
pub fn tempering_kernel(ctx: &TemperingContext) -> Result<DMatrix<f64>> {
    let n = ctx.split.n();
    let m = ctx.levels();
    let g = ctx.cell_count();
    let size = m * g * (1usize << n.min(20));
    if n > 20 || size > KERNEL_MAX_STATES {
        return Err(IsingError::Capacity {
            what: "tempering kernel states".into(),
            got: size as u64,
            limit: KERNEL_MAX_STATES as u64,
        });
    }
    let j = &ctx.split.j_perp;
    let states = 1usize << n;
    let mut k = DMatrix::zeros(size, size);
    let rows: Vec<Vec<Vec<(usize, f64)>>> = (1..=m)
        .map(|l| {
            (0..g)
                .flat_map(|c| (0..states).map(move |s| (c, s)))
                .map(|(c, s)| heat_bath_row(j, ctx.beta(l), &ctx.cell(c).field, s, n))
                .collect()
        })
        .collect();
    let products: Vec<Vec<f64>> = (0..g).map(|c| product_probs(&ctx.cell(c).field, n)).collect();

    for l in 1..=m {
        for c in 0..g {
            for s in 0..states {
                let from = kernel_index(ctx, l, c, s as u64);
                let sigma = SpinConfig::from_index(s as u64, n);
                let chain = TemperingChain::from_state(
                    ctx,
                    &TemperingState {
                        level: l,
                        cell: c,
                        sigma,
                    },
                )?;
                for (to_level, active) in [(l + 1, l < m), (l.wrapping_sub(1), l > 1)] {
                    if active {
                        let a = chain.log_level_ratio(l, to_level).min(0.0).exp();
                        k[(from, kernel_index(ctx, to_level, c, s as u64))] += 0.25 * a;
                        k[(from, from)] += 0.25 * (1.0 - a);
                    } else {
                        k[(from, from)] += 0.25;
                    }
                }
                let flip_weight = if l == 1 { 0.25 } else { 0.5 };
                for &(t, p) in &rows[l - 1][c * states + s] {
                    k[(from, kernel_index(ctx, l, c, t as u64))] += flip_weight * p;
                }
                if l == 1 {
                    // reset to a uniform cell and product draw, then flip
                    for c2 in 0..g {
                        for s2 in 0..states {
                            let w = 0.25 * products[c2][s2] / g as f64;
                            for &(t, p) in &rows[0][c2 * states + s2] {
                                k[(from, kernel_index(ctx, 1, c2, t as u64))] += w * p;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(k)
}

/// Normalized `q_ℓ(σ)` weights over the kernel's states.
pub fn tempering_target(ctx: &TemperingContext) -> Result<Vec<f64>> {
    let n = ctx.split.n();
    let m = ctx.levels();
    let g = ctx.cell_count();
    let states = 1usize << n;
    let mut logw = vec![0.0; m * g * states];
    for l in 1..=m {
        for c in 0..g {
            for s in 0..states {
                let sigma: Vec<f64> = (0..n).map(|i| if (s >> i) & 1 == 1 { 1.0 } else { -1.0 }).collect();
                let sv = nalgebra::DVector::from_column_slice(&sigma);
                let quad = 0.5 * sv.dot(&(&ctx.split.j_perp * &sv));
                let lin: f64 = ctx.cell(c).field.iter().zip(&sigma).map(|(a, b)| a * b).sum();
                logw[kernel_index(ctx, l, c, s as u64)] = ctx.beta(l) * quad + lin - ctx.log_z(l, c);
            }
        }
    }
    let lse = crate::numeric::log_sum_exp(&logw);
    Ok(logw.into_iter().map(|v| (v - lse).exp()).collect())
}

//! Hubbard–Stratonovich grid over the positive-spike directions.
//!
//! With `J∥ = (1/n)·XᵀQQᵀX`,
//!
//! ```text
//! exp(½⟨σ, J∥σ⟩) = (n/2π)^{d/2} ∫ exp(⟨XᵀQy, σ⟩ − (n/2)‖y‖²) dy
//! ```
//!
//! so `Z` is a Gaussian mixture over `y ∈ ℝᵈ` of bulk models with field
//! `h + XᵀQy`. The integral is cut to `[−L, L]ᵈ` and split into cubes of
//! side `η`; each cube's mass is estimated by annealing from the product
//! measure up to the bulk model, plus one final ratio that folds in the
//! negative part and the Gaussian integral over the cube.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annealing::{anneal_partition, AnnealingSchedule, EstimatorParams, Ladder, LevelSampler};
use crate::error::{IsingError, Result};
use crate::glauber::{default_steps, FieldSampler, STEP_CONSTANT};
use crate::model::{IsingModel, SpinConfig};
use crate::numeric::{log_cosh, log_sum_exp, log_tilted_gaussian_interval};
use crate::oracle::{log_partition_raw, log_partition_with};
use crate::rng::{ChainRng, SeedTree};
use crate::spectral::SpectralSplit;
use crate::tilt::{solve_tilt, TiltConfig, TiltProblem, TiltSolution};

/// Default cap on the number of grid cells.
pub const DEFAULT_CELL_BUDGET: u64 = 100_000;

#[derive(Clone, Copy, Debug, Default)]
pub struct GridOverrides {
    pub l: Option<f64>,
    pub eta: Option<f64>,
    pub cell_budget: Option<u64>,
    /// Build even when the cell count exceeds the budget.
    pub force: bool,
}

/// Cells are the `kᵈ` cubes of side `η` tiling `[−L, L]ᵈ`, `L = k·η/2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(rename = "L")]
    pub l: f64,
    pub eta: f64,
    pub d: usize,
    /// Cells per dimension.
    pub k: u64,
}

impl GridSpec {
    pub fn cell_count(&self) -> u64 {
        self.k.pow(self.d as u32)
    }

    /// Center of cell `index`, dimension 0 varying fastest.
    pub fn center(&self, index: u64) -> Vec<f64> {
        let mut rest = index;
        (0..self.d)
            .map(|_| {
                let digit = rest % self.k;
                rest /= self.k;
                -self.l + (digit as f64 + 0.5) * self.eta
            })
            .collect()
    }

    pub fn centers(&self) -> Vec<Vec<f64>> {
        (0..self.cell_count()).map(|i| self.center(i)).collect()
    }
}

/// Cutoff before rounding to a whole number of cells.
pub fn base_cutoff(op_norm: f64, eps: f64, n: usize, d: usize) -> f64 {
    let nf = n as f64;
    op_norm.sqrt() + (2.0 * (4.0 * nf * d.max(1) as f64 / eps).ln() / nf).sqrt()
}

/// `1/(n·d·L + 2n·√(‖J‖·d))`.
pub fn theoretical_eta(op_norm: f64, n: usize, d: usize, l: f64) -> f64 {
    let (nf, df) = (n as f64, d as f64);
    1.0 / (nf * df * l + 2.0 * nf * (op_norm * df).sqrt())
}

pub fn build_grid(split: &SpectralSplit, eps: f64, overrides: &GridOverrides) -> Result<GridSpec> {
    let n = split.n();
    let d = split.d;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(IsingError::invalid(format!("eps must lie in (0,1), got {eps}")));
    }
    if d == 0 {
        return Ok(GridSpec { l: 0.0, eta: 0.0, d: 0, k: 1 });
    }
    let l0 = match overrides.l {
        Some(l) if !(l > 0.0 && l.is_finite()) => return Err(IsingError::invalid(format!("grid L must be positive, got {l}"))),
        Some(l) => l,
        None => base_cutoff(split.op_norm, eps, n, d),
    };
    let (eta, k) = match overrides.eta {
        Some(eta) => {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(IsingError::invalid(format!("grid eta must be positive, got {eta}")));
            }
            if eta > 2.0 * l0 {
                return Err(IsingError::invalid(format!("grid eta {eta} exceeds 2L = {}", 2.0 * l0)));
            }
            (eta, (2.0 * l0 / eta).ceil() as u64)
        }
        None => {
            // η shrinks as L is rounded up to whole cells; iterate to a fixed point
            let mut eta = theoretical_eta(split.op_norm, n, d, l0);
            for _ in 0..50 {
                let l = (2.0 * l0 / eta).ceil() * eta / 2.0;
                let next = theoretical_eta(split.op_norm, n, d, l);
                if next == eta {
                    break;
                }
                eta = next;
            }
            (eta, (2.0 * l0 / eta).ceil() as u64)
        }
    };
    let k = k.max(1);
    let grid = GridSpec {
        l: k as f64 * eta / 2.0,
        eta,
        d,
        k,
    };
    let budget = overrides.cell_budget.unwrap_or(DEFAULT_CELL_BUDGET);
    let count = (k as f64).powi(d as i32);
    if count > budget as f64 && !overrides.force {
        return Err(IsingError::capacity("grid cell count", count.min(u64::MAX as f64) as u64, budget));
    }
    Ok(grid)
}

/// `log Z` of the zero-coupling model: `n·log 2 + Σ log cosh(field_i)`.
pub fn log_z1(field: &[f64]) -> f64 {
    field.len() as f64 * std::f64::consts::LN_2 + field.iter().map(|&f| log_cosh(f)).sum::<f64>()
}

fn quad(m: &nalgebra::DMatrix<f64>, s: &[f64]) -> f64 {
    let n = s.len();
    let mut total = 0.0;
    for b in 0..n {
        let col = &m.as_slice()[b * n..(b + 1) * n];
        let mut acc = 0.0;
        for a in 0..n {
            acc += col[a] * s[a];
        }
        total += acc * s[b];
    }
    total
}

/// `⟨σ, J⊥σ⟩ / (2n)`.
pub fn log_g_bulk(split: &SpectralSplit, sigma: &SpinConfig) -> f64 {
    log_g_bulk_raw(split, sigma.to_f64().as_slice())
}

pub(crate) fn log_g_bulk_raw(split: &SpectralSplit, sigma: &[f64]) -> f64 {
    quad(&split.j_perp, sigma) / (2.0 * sigma.len() as f64)
}

/// `log ∫_{B(y*)} exp(⟨a, y − y*⟩ − (n/2)‖y‖²) dy` over the cube of side
/// `η` centered at `y*`; separable, one Gaussian interval per coordinate.
pub fn log_gaussian_box(a: &[f64], y_star: &[f64], eta: f64, n: usize) -> f64 {
    assert_eq!(a.len(), y_star.len());
    let half = 0.5 * eta;
    a.iter()
        .zip(y_star)
        .map(|(&aj, &yj)| log_tilted_gaussian_interval(aj, yj, yj - half, yj + half, n as f64))
        .sum()
}

/// Everything the estimator and sampler need about one grid cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellData {
    pub y_star: Vec<f64>,
    pub eta: f64,
    /// `−J₋u`, zero when there is no negative part.
    pub tilt: Vec<f64>,
    /// `h(y*) = tilt + XᵀQy* + h`.
    pub field: Vec<f64>,
    /// `log Ẑ_ℓ(y*)` for `ℓ = 1..=M+1`.
    pub log_z_ladder: Vec<f64>,
    pub tilt_norm: f64,
    pub flags: Vec<String>,
}

impl CellData {
    pub fn log_z_hat(&self) -> f64 {
        *self.log_z_ladder.last().unwrap_or(&f64::NEG_INFINITY)
    }

    pub fn is_excluded(&self) -> bool {
        self.flags.iter().any(|f| f == FLAG_FAILED)
    }
}

pub const FLAG_FAILED: &str = "annealing-failed";
pub const FLAG_UNVERIFIED: &str = "tilt-unverified";

/// `h(y*) = tilt + XᵀQy* + h`.
pub fn cell_field(split: &SpectralSplit, h: &DVector<f64>, y_star: &[f64], tilt: &[f64]) -> Vec<f64> {
    let base = split.spike_field(y_star) + h;
    base.iter().zip(tilt).map(|(b, t)| b + t).collect()
}

/// `−½⟨σ, J₋σ⟩ − ⟨tilt, σ⟩ + log_gaussian_box(QᵀXσ, y*, η, n)`.
pub fn log_g_top(split: &SpectralSplit, cell: &CellData, sigma: &SpinConfig) -> f64 {
    log_g_top_raw(split, cell, sigma.to_f64().as_slice())
}

pub(crate) fn log_g_top_raw(split: &SpectralSplit, cell: &CellData, sigma: &[f64]) -> f64 {
    let n = sigma.len();
    let mut v = 0.0;
    if split.has_minus() {
        v -= 0.5 * quad(&split.j_minus, sigma);
    }
    v -= cell.tilt.iter().zip(sigma).map(|(t, s)| t * s).sum::<f64>();
    if split.d > 0 {
        v += log_gaussian_box(&split.project(sigma), &cell.y_star, cell.eta, n);
    }
    v
}

#[derive(Clone, Debug)]
pub struct EstimateConfig {
    pub eps: f64,
    pub delta: f64,
    /// Samples per level; default `⌈320·e·M/ε²⌉`.
    pub samples: Option<u64>,
    /// Trials; default `⌈32·log(1/δ)⌉`.
    pub trials: Option<usize>,
    /// Glauber steps between samples; default from the bulk norm.
    pub glauber_steps: Option<u64>,
    pub step_constant: f64,
    pub tilt: TiltConfig,
    /// Target gradient norm for the tilt; default `ε`.
    pub tilt_eps: Option<f64>,
    pub tilt_delta: Option<f64>,
    /// Retry an unverified tilt once with a fresh seed.
    pub retry_unverified: bool,
}

impl EstimateConfig {
    pub fn new(eps: f64, delta: f64) -> Self {
        Self {
            eps,
            delta,
            samples: None,
            trials: None,
            glauber_steps: None,
            step_constant: STEP_CONSTANT,
            tilt: TiltConfig::default(),
            tilt_eps: None,
            tilt_delta: None,
            retry_unverified: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 1.0) || !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(IsingError::invalid(format!(
                "eps and delta must lie in (0,1), got {} and {}",
                self.eps, self.delta
            )));
        }
        Ok(())
    }

    pub fn chain_steps(&self, split: &SpectralSplit) -> u64 {
        self.glauber_steps
            .unwrap_or_else(|| default_steps(split.n(), self.eps, split.perp_norm, self.step_constant))
            .max(1)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridEstimate {
    #[serde(rename = "log_Z_hat")]
    pub log_z_hat: f64,
    pub d: usize,
    /// Split parameter; `None` stands for `c = ∞`.
    #[serde(default)]
    pub c: Option<f64>,
    pub cells: u64,
    pub grid: GridSpec,
    pub method: String,
    pub per_cell: Vec<CellData>,
    pub samples_per_level: u64,
    pub trials: usize,
    pub glauber_steps: u64,
    pub chain_steps_total: u64,
}

impl GridEstimate {
    /// Largest `log Ẑ_{M+1}(y*)` over usable cells.
    pub fn max_log_z_top(&self) -> f64 {
        self.per_cell
            .iter()
            .filter(|c| !c.is_excluded())
            .map(|c| c.log_z_hat())
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Annealing ladder for one cell: `p_ℓ = p_{β_ℓ J⊥, h(y*)}`, `ℓ = 1..=n+1`.
pub struct CellLadder<'a> {
    pub split: &'a SpectralSplit,
    pub cell: &'a CellData,
    pub schedule: AnnealingSchedule,
    pub steps: u64,
}

impl Ladder for CellLadder<'_> {
    fn levels(&self) -> usize {
        self.schedule.m
    }

    fn sampler(&self, level: usize, rng: &mut ChainRng) -> Result<Box<dyn LevelSampler + '_>> {
        let beta = self.schedule.beta(level);
        Ok(Box::new(FieldSampler::new(&self.split.j_perp, beta, self.cell.field.clone(), self.steps, rng)))
    }

    fn log_g(&self, level: usize, sigma: &[f64]) -> f64 {
        if level < self.schedule.m {
            log_g_bulk_raw(self.split, sigma)
        } else {
            log_g_top_raw(self.split, self.cell, sigma)
        }
    }
}

fn cell_tilt(
    split: &SpectralSplit,
    h: &DVector<f64>,
    y_star: &[f64],
    cfg: &EstimateConfig,
    seed: SeedTree,
    flags: &mut Vec<String>,
) -> Result<(Vec<f64>, Option<TiltSolution>)> {
    let n = split.n();
    if !split.has_minus() {
        return Ok((vec![0.0; n], None));
    }
    let base = split.spike_field(y_star) + h;
    let problem = TiltProblem::from_split(
        split,
        base,
        cfg.tilt_eps.unwrap_or(cfg.eps),
        cfg.tilt_delta.unwrap_or(cfg.delta),
    )?;
    let mut sol = solve_tilt(&problem, &cfg.tilt, seed.child("tilt", 0).seed())?;
    if !sol.verified && cfg.retry_unverified {
        let retry = solve_tilt(&problem, &cfg.tilt, seed.child("tilt", 1).seed())?;
        if retry.grad_norm_estimate < sol.grad_norm_estimate {
            sol = retry;
        }
    }
    if !sol.verified {
        log::warn!(
            "tilt for cell {y_star:?} unverified (gradient estimate {:.4})",
            sol.grad_norm_estimate
        );
        flags.push(FLAG_UNVERIFIED.into());
    }
    Ok((sol.tilt.clone(), Some(sol)))
}

/// Tilt and annealing ladder for one cell; annealing failures flag the
/// cell instead of propagating.
pub fn estimate_cell(
    model: &IsingModel,
    split: &SpectralSplit,
    grid: &GridSpec,
    y_star: Vec<f64>,
    cfg: &EstimateConfig,
    seed: SeedTree,
) -> Result<(CellData, u64)> {
    let n = model.n();
    let mut flags = Vec::new();
    let (tilt, _) = cell_tilt(split, model.h(), &y_star, cfg, seed, &mut flags)?;
    let field = cell_field(split, model.h(), &y_star, &tilt);
    let tilt_norm = tilt.iter().map(|t| t * t).sum::<f64>().sqrt();
    let mut cell = CellData {
        y_star,
        eta: grid.eta,
        tilt,
        field,
        log_z_ladder: Vec::new(),
        tilt_norm,
        flags,
    };
    let schedule = AnnealingSchedule::new(n);
    let params = resolve_params(cfg, schedule.m, log_z1(&cell.field))?;
    let ladder = CellLadder {
        split,
        cell: &cell,
        schedule,
        steps: cfg.chain_steps(split),
    };
    match anneal_partition(&ladder, &params, seed.child("anneal", 0)) {
        Ok(r) => {
            cell.log_z_ladder = r.log_z;
            Ok((cell, r.chain_steps))
        }
        Err(e) => {
            log::warn!("cell {:?} excluded: {e}", cell.y_star);
            cell.flags.push(FLAG_FAILED.into());
            Ok((cell, 0))
        }
    }
}

fn resolve_params(cfg: &EstimateConfig, levels: usize, log_z1: f64) -> Result<EstimatorParams> {
    let theory = EstimatorParams::theoretical(levels, cfg.eps, cfg.delta, log_z1);
    EstimatorParams::new(cfg.samples.unwrap_or(theory.samples), cfg.trials.unwrap_or(theory.trials), log_z1)
}

/// Every cell of the grid, then `(d/2)·log(n/2π) + log Σ_cells Ẑ(y*)`.
///
/// For `ε ≤ 2⁻ⁿ` the model is enumerated instead.
pub fn estimate_all_cells(
    model: &IsingModel,
    split: &SpectralSplit,
    grid: &GridSpec,
    cfg: &EstimateConfig,
    seed: u64,
) -> Result<GridEstimate> {
    cfg.validate()?;
    let n = model.n();
    if split.n() != n || grid.d != split.d {
        return Err(IsingError::invalid("split or grid does not match the model"));
    }
    let root = SeedTree::new(seed);
    let levels = n + 1;
    let params = resolve_params(cfg, levels, 0.0)?;
    let steps = cfg.chain_steps(split);

    if cfg.eps <= (-(n as f64) * std::f64::consts::LN_2).exp() {
        let log_z = log_partition_raw(model.j(), model.h().as_slice())?;
        return Ok(GridEstimate {
            log_z_hat: log_z,
            d: split.d,
            c: split.c.is_finite().then_some(split.c),
            cells: grid.cell_count(),
            grid: grid.clone(),
            method: "brute-force".into(),
            per_cell: Vec::new(),
            samples_per_level: 0,
            trials: 0,
            glauber_steps: 0,
            chain_steps_total: 0,
        });
    }

    let count = grid.cell_count();
    let results: Vec<Result<(CellData, u64)>> = (0..count)
        .into_par_iter()
        .map(|i| estimate_cell(model, split, grid, grid.center(i), cfg, root.child("cell", i)))
        .collect();
    let mut cells = Vec::with_capacity(count as usize);
    let mut chain_steps_total = 0;
    for r in results {
        let (cell, s) = r?;
        chain_steps_total += s;
        cells.push(cell);
    }
    let failed = cells.iter().filter(|c| c.is_excluded()).count();
    if failed as f64 > 0.01 * count as f64 {
        return Err(IsingError::Estimator(format!("{failed} of {count} grid cells failed to anneal")));
    }
    let tops: Vec<f64> = cells.iter().filter(|c| !c.is_excluded()).map(|c| c.log_z_hat()).collect();
    let prefactor = 0.5 * split.d as f64 * (n as f64 / (2.0 * std::f64::consts::PI)).ln();
    let log_z_hat = prefactor + log_sum_exp(&tops);
    if !log_z_hat.is_finite() {
        return Err(IsingError::Numeric(format!("estimate is not finite: {log_z_hat}")));
    }
    Ok(GridEstimate {
        log_z_hat,
        d: split.d,
        c: split.c.is_finite().then_some(split.c),
        cells: count,
        grid: grid.clone(),
        method: "annealing".into(),
        per_cell: cells,
        samples_per_level: params.samples,
        trials: params.trials,
        glauber_steps: steps,
        chain_steps_total,
    })
}

/// A cell whose ladder is computed by enumeration instead of annealing.
pub fn brute_force_cell(
    split: &SpectralSplit,
    h: &DVector<f64>,
    y_star: Vec<f64>,
    eta: f64,
    tilt: Vec<f64>,
) -> Result<CellData> {
    let n = split.n();
    let field = cell_field(split, h, &y_star, &tilt);
    let tilt_norm = tilt.iter().map(|t| t * t).sum::<f64>().sqrt();
    let mut cell = CellData {
        y_star,
        eta,
        tilt,
        field,
        log_z_ladder: Vec::with_capacity(n + 2),
        tilt_norm,
        flags: Vec::new(),
    };
    let schedule = AnnealingSchedule::new(n);
    for level in 1..=schedule.m {
        let j = &split.j_perp * schedule.beta(level);
        cell.log_z_ladder.push(log_partition_raw(&j, &cell.field)?);
    }
    let top = log_partition_with(&split.j_perp, &cell.field, |s| log_g_top_raw(split, &cell, s))?;
    cell.log_z_ladder.push(top);
    Ok(cell)
}

/// `log Z` of `(J⊥ − J₋, h + XᵀQy)` by enumeration: the HS integrand at `y`
/// without the Gaussian weight.
pub fn brute_force_projected_log_partition(split: &SpectralSplit, h: &DVector<f64>, y: &[f64]) -> Result<f64> {
    let j = &split.j_perp - &split.j_minus;
    let field = split.spike_field(y) + h;
    log_partition_raw(&j, field.as_slice())
}

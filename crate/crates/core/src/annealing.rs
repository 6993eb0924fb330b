//! Simulated-annealing estimation of a partition function.
//!
//! Given a ladder of distributions `p_1, …, p_M` with known `Z_1` and ratio
//! functions satisfying `E_{p_ℓ}[g_ℓ] = Z_{ℓ+1}/Z_ℓ`, each trial multiplies
//! the per-level sample means of `g_ℓ`; the reported value per level is the
//! median over independent trials.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{IsingError, Result};
use crate::glauber::FieldSampler;
use crate::numeric::LogSumExp;
use crate::oracle::DiscreteDistribution;
use crate::rng::{ChainRng, SeedTree};

/// `β_ℓ = (ℓ−1)/n` for `ℓ = 1..M`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AnnealingSchedule {
    pub n: usize,
    pub m: usize,
}

impl AnnealingSchedule {
    /// The standard ladder `M = n + 1`, ending at `β_M = 1`.
    pub fn new(n: usize) -> Self {
        Self { n, m: n + 1 }
    }

    pub fn beta(&self, level: usize) -> f64 {
        assert!(level >= 1 && level <= self.m, "level {level} outside 1..={}", self.m);
        (level - 1) as f64 / self.n as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EstimatorParams {
    pub samples: u64,
    pub trials: usize,
    pub log_z1: f64,
}

impl EstimatorParams {
    pub fn new(samples: u64, trials: usize, log_z1: f64) -> Result<Self> {
        if samples == 0 || trials == 0 {
            return Err(IsingError::invalid("annealing needs N >= 1 and R >= 1"));
        }
        Ok(Self { samples, trials, log_z1 })
    }

    /// `N = ⌈320·e·M/ε²⌉`, `R = ⌈32·log(1/δ)⌉`.
    pub fn theoretical(levels: usize, eps: f64, delta: f64, log_z1: f64) -> Self {
        let samples = (320.0 * std::f64::consts::E * levels as f64 / (eps * eps)).ceil() as u64;
        let trials = (32.0 * (1.0 / delta).ln()).ceil().max(1.0) as usize;
        Self { samples, trials, log_z1 }
    }
}

/// A source of (approximate) samples from one level of the ladder.
pub trait LevelSampler {
    /// Next draw as ±1.0 spins, plus the chain steps it cost.
    fn draw(&mut self, rng: &mut ChainRng) -> Result<(&[f64], u64)>;
}

impl LevelSampler for FieldSampler<'_> {
    fn draw(&mut self, rng: &mut ChainRng) -> Result<(&[f64], u64)> {
        Ok(FieldSampler::draw(self, rng))
    }
}

/// Exact sampler from an enumerated law (inverse CDF).
#[derive(Clone, Debug)]
pub struct ExactSampler {
    n: usize,
    cdf: Vec<f64>,
    sigma: Vec<f64>,
}

impl ExactSampler {
    pub fn new(dist: &DiscreteDistribution) -> Self {
        let mut acc = 0.0;
        let cdf = dist
            .probs()
            .into_iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Self {
            n: dist.n(),
            cdf,
            sigma: vec![0.0; dist.n()],
        }
    }

    pub fn draw_index<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let total = *self.cdf.last().unwrap();
        let u = rng.random::<f64>() * total;
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1) as u64
    }
}

impl LevelSampler for ExactSampler {
    fn draw(&mut self, rng: &mut ChainRng) -> Result<(&[f64], u64)> {
        let idx = self.draw_index(rng);
        for i in 0..self.n {
            self.sigma[i] = if (idx >> i) & 1 == 1 { 1.0 } else { -1.0 };
        }
        Ok((&self.sigma, 0))
    }
}

/// A ladder of samplers and ratio functions, levels `1..=levels()`.
pub trait Ladder: Sync {
    fn levels(&self) -> usize;
    fn sampler(&self, level: usize, rng: &mut ChainRng) -> Result<Box<dyn LevelSampler + '_>>;
    /// `log g_ℓ(σ)`.
    fn log_g(&self, level: usize, sigma: &[f64]) -> f64;
}

/// `log((1/N)·Σ_k g(x_k))` with `x_k` drawn from `sampler`.
pub fn estimate_level_ratio(
    sampler: &mut dyn LevelSampler,
    log_g: impl Fn(&[f64]) -> f64,
    samples: u64,
    rng: &mut ChainRng,
) -> Result<(f64, u64)> {
    if samples == 0 {
        return Err(IsingError::invalid("need at least one sample per level"));
    }
    let mut acc = LogSumExp::new();
    let mut steps = 0;
    for _ in 0..samples {
        let (sigma, cost) = sampler.draw(rng)?;
        steps += cost;
        acc.push(log_g(sigma));
    }
    Ok((acc.value() - (samples as f64).ln(), steps))
}

/// Median; the mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AnnealResult {
    /// Median `log Ẑ_ℓ` for `ℓ = 1..=M+1`; entry 0 is `log Z_1` itself.
    pub log_z: Vec<f64>,
    pub failed_trials: usize,
    pub chain_steps: u64,
}

impl AnnealResult {
    pub fn log_z_final(&self) -> f64 {
        *self.log_z.last().unwrap()
    }
}

fn run_trial<L: Ladder + ?Sized>(ladder: &L, params: &EstimatorParams, seed: SeedTree) -> Result<(Vec<f64>, u64)> {
    let m = ladder.levels();
    let mut out = Vec::with_capacity(m + 1);
    out.push(params.log_z1);
    let mut steps = 0;
    for level in 1..=m {
        let mut rng = seed.child("level", level as u64).rng();
        let mut sampler = ladder.sampler(level, &mut rng)?;
        let (ratio, cost) = estimate_level_ratio(sampler.as_mut(), |s| ladder.log_g(level, s), params.samples, &mut rng)?;
        steps += cost;
        out.push(out[level - 1] + ratio);
    }
    Ok((out, steps))
}

/// `R` independent trials, per-level medians over the trials that
/// succeeded; a majority of failures is an error.
pub fn anneal_partition<L: Ladder + ?Sized>(ladder: &L, params: &EstimatorParams, seed: SeedTree) -> Result<AnnealResult> {
    let trials: Vec<Result<(Vec<f64>, u64)>> = (0..params.trials)
        .into_par_iter()
        .map(|r| run_trial(ladder, params, seed.child("trial", r as u64)))
        .collect();
    let mut ok = Vec::new();
    let mut failed = 0;
    let mut last_error = None;
    let mut steps = 0;
    for t in trials {
        match t {
            Ok((v, s)) => {
                ok.push(v);
                steps += s;
            }
            Err(e) => {
                failed += 1;
                last_error = Some(e);
            }
        }
    }
    if 2 * failed > params.trials {
        return Err(IsingError::Estimator(format!(
            "{failed} of {} annealing trials failed; last: {}",
            params.trials,
            last_error.map(|e| e.to_string()).unwrap_or_default()
        )));
    }
    let levels = ladder.levels() + 1;
    let log_z = (0..levels)
        .map(|l| median(&ok.iter().map(|t| t[l]).collect::<Vec<_>>()))
        .collect();
    Ok(AnnealResult {
        log_z,
        failed_trials: failed,
        chain_steps: steps,
    })
}

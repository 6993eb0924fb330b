//! Exact enumeration over `{-1, +1}^n` for small `n`.
//!
//! These are the reference answers every stochastic routine is tested
//! against. States are visited in Gray-code order inside fixed-size
//! blocks so each step costs `O(n)`; blocks are reduced in index order,
//! which keeps results bitwise identical for any thread count.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{IsingError, Result};
use crate::model::{IsingModel, SpinConfig};
use crate::numeric::LogSumExp;

/// Largest `n` accepted by the enumeration routines.
pub const BRUTE_FORCE_MAX_N: usize = 25;

const BLOCK_BITS: usize = 14;

fn check_capacity(n: usize) -> Result<()> {
    if n > BRUTE_FORCE_MAX_N {
        return Err(IsingError::capacity(
            "brute-force spin count",
            n as u64,
            BRUTE_FORCE_MAX_N as u64,
        ));
    }
    Ok(())
}

/// Visit every state of block `block` (high bits fixed, low `bits` bits
/// varying) with its energy.
fn visit_block(j: &DMatrix<f64>, h: &[f64], bits: usize, block: u64, mut f: impl FnMut(u64, f64, &[f64])) {
    let n = h.len();
    let data = j.as_slice();
    let base = block << bits;
    let mut sigma: Vec<f64> = (0..n)
        .map(|i| if (base >> i) & 1 == 1 { 1.0 } else { -1.0 })
        .collect();
    // off-diagonal local fields: Σ_{k≠i} J_ik σ_k
    let mut local: Vec<f64> = (0..n)
        .map(|i| {
            let col = &data[i * n..(i + 1) * n];
            (0..n).filter(|&k| k != i).map(|k| col[k] * sigma[k]).sum()
        })
        .collect();
    let diag: f64 = (0..n).map(|i| data[i * n + i]).sum();
    let mut energy = 0.5 * diag
        + (0..n)
            .map(|i| 0.5 * sigma[i] * local[i] + h[i] * sigma[i])
            .sum::<f64>();
    let mut index = base;
    f(index, energy, &sigma);
    for t in 1u64..(1u64 << bits) {
        let i = t.trailing_zeros() as usize;
        let s = sigma[i];
        energy += -2.0 * s * local[i] - 2.0 * s * h[i];
        sigma[i] = -s;
        index ^= 1 << i;
        let col = &data[i * n..(i + 1) * n];
        let delta = -2.0 * s;
        for k in 0..n {
            if k != i {
                local[k] += delta * col[k];
            }
        }
        f(index, energy, &sigma);
    }
}

fn blocks(n: usize) -> (usize, u64) {
    let bits = n.min(BLOCK_BITS);
    (bits, 1u64 << (n - bits))
}

pub(crate) fn log_partition_raw(j: &DMatrix<f64>, h: &[f64]) -> Result<f64> {
    let n = h.len();
    check_capacity(n)?;
    let (bits, nblocks) = blocks(n);
    let parts: Vec<LogSumExp> = (0..nblocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = LogSumExp::new();
            visit_block(j, h, bits, b, |_, e, _| acc.push(e));
            acc
        })
        .collect();
    let mut total = LogSumExp::new();
    for p in &parts {
        total.merge(p);
    }
    Ok(total.value())
}

/// `log Σ_σ exp(E(σ) + f(σ))` over all states; `f` sees `σ` as ±1.0.
pub(crate) fn log_partition_with(
    j: &DMatrix<f64>,
    h: &[f64],
    f: impl Fn(&[f64]) -> f64 + Sync,
) -> Result<f64> {
    let n = h.len();
    check_capacity(n)?;
    let (bits, nblocks) = blocks(n);
    let parts: Vec<LogSumExp> = (0..nblocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = LogSumExp::new();
            visit_block(j, h, bits, b, |_, e, s| acc.push(e + f(s)));
            acc
        })
        .collect();
    let mut total = LogSumExp::new();
    for p in &parts {
        total.merge(p);
    }
    Ok(total.value())
}

pub(crate) fn distribution_raw(j: &DMatrix<f64>, h: &[f64]) -> Result<DiscreteDistribution> {
    let n = h.len();
    check_capacity(n)?;
    let (bits, _) = blocks(n);
    let mut log_w = vec![0.0; 1usize << n];
    log_w
        .par_chunks_mut(1usize << bits)
        .enumerate()
        .for_each(|(b, chunk)| {
            let base = (b as u64) << bits;
            visit_block(j, h, bits, b as u64, |idx, e, _| chunk[(idx - base) as usize] = e);
        });
    Ok(DiscreteDistribution::from_log_weights(n, log_w))
}

/// `log Z` by enumeration; `n ≤ 25`.
pub fn brute_force_log_partition(model: &IsingModel) -> Result<f64> {
    log_partition_raw(model.j(), model.h().as_slice())
}

/// Exact normalized law of the model; `n ≤ 25`.
pub fn brute_force_distribution(model: &IsingModel) -> Result<DiscreteDistribution> {
    distribution_raw(model.j(), model.h().as_slice())
}

/// Exact `E[σ]` and `Cov(σ)`.
pub fn brute_force_mean_cov(model: &IsingModel) -> Result<(DVector<f64>, DMatrix<f64>)> {
    Ok(brute_force_distribution(model)?.mean_cov())
}

/// `½ Σ |p − q|`.
pub fn tv_distance(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    p.tv_distance(q)
}

/// A law on `{-1, +1}^n` stored as log-probabilities by state index.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDistribution {
    n: usize,
    log_probs: Vec<f64>,
}

impl DiscreteDistribution {
    /// Normalize unnormalized log-weights.
    pub fn from_log_weights(n: usize, mut log_w: Vec<f64>) -> Self {
        assert_eq!(log_w.len(), 1usize << n);
        let mut acc = LogSumExp::new();
        for &w in &log_w {
            acc.push(w);
        }
        let log_z = acc.value();
        for w in &mut log_w {
            *w -= log_z;
        }
        Self { n, log_probs: log_w }
    }

    /// Empirical law of a sample set.
    pub fn empirical<'a>(n: usize, samples: impl IntoIterator<Item = &'a SpinConfig>) -> Result<Self> {
        if n > BRUTE_FORCE_MAX_N {
            return Err(IsingError::capacity("empirical table size", n as u64, BRUTE_FORCE_MAX_N as u64));
        }
        let mut counts = vec![0u64; 1usize << n];
        let mut total = 0u64;
        for s in samples {
            if s.len() != n {
                return Err(IsingError::invalid("sample has wrong length"));
            }
            counts[s.index() as usize] += 1;
            total += 1;
        }
        if total == 0 {
            return Err(IsingError::invalid("empirical law of zero samples"));
        }
        let lt = (total as f64).ln();
        let log_probs = counts
            .iter()
            .map(|&c| if c == 0 { f64::NEG_INFINITY } else { (c as f64).ln() - lt })
            .collect();
        Ok(Self { n, log_probs })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn prob(&self, index: u64) -> f64 {
        self.log_probs[index as usize].exp()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn tv_distance(&self, other: &Self) -> Result<f64> {
        if self.log_probs.len() != other.log_probs.len() {
            return Err(IsingError::invalid(format!(
                "support sizes differ: {} vs {}",
                self.log_probs.len(),
                other.log_probs.len()
            )));
        }
        let l1: f64 = self
            .log_probs
            .iter()
            .zip(&other.log_probs)
            .map(|(a, b)| (a.exp() - b.exp()).abs())
            .sum();
        Ok((0.5 * l1).min(1.0))
    }

    pub fn mean_cov(&self) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.n;
        let mut mean = DVector::zeros(n);
        let mut second = DMatrix::zeros(n, n);
        for (idx, &lp) in self.log_probs.iter().enumerate() {
            let p = lp.exp();
            if p == 0.0 {
                continue;
            }
            let s = SpinConfig::from_index(idx as u64, n).to_f64();
            mean.axpy(p, &s, 1.0);
            second.ger(p, &s, &s, 1.0);
        }
        let cov = second - &mean * mean.transpose();
        (mean, cov)
    }

    /// `E[f(σ)]` under the law.
    pub fn expect(&self, mut f: impl FnMut(&SpinConfig) -> f64) -> f64 {
        self.log_probs
            .iter()
            .enumerate()
            .map(|(idx, lp)| {
                let p = lp.exp();
                if p == 0.0 {
                    0.0
                } else {
                    p * f(&SpinConfig::from_index(idx as u64, self.n))
                }
            })
            .sum()
    }
}

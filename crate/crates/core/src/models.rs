//! Generators for the standard instance families.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{IsingError, Result};
use crate::model::{IsingModel, ModelMeta};
use crate::rng::{ChainRng, SeedTree};

fn meta(kind: &str, expected_hard: bool, params: serde_json::Value) -> ModelMeta {
    ModelMeta {
        kind: kind.into(),
        expected_hard,
        params: Some(params),
    }
}

/// `J_ij = β/n` for all `i, j` (diagonal included), `h = 0`, so that
/// `½⟨σ,Jσ⟩ = (β/2n)(Σσ)²` and the mean-field equation is `y = tanh(βy)`.
pub fn curie_weiss(n: usize, beta: f64) -> Result<IsingModel> {
    if n == 0 || !(beta >= 0.0) || !beta.is_finite() {
        return Err(IsingError::invalid(format!("curie-weiss needs n ≥ 1 and β ≥ 0, got n={n}, β={beta}")));
    }
    let j = DMatrix::from_element(n, n, beta / n as f64);
    Ok(IsingModel::with_zero_field(j)?.with_meta(meta("curie-weiss", false, serde_json::json!({"n": n, "beta": beta}))))
}

/// `J = (β/2n)·Σ_v η_v η_vᵀ`.
pub fn hopfield(patterns: &[Vec<i8>], beta: f64, field: Option<DVector<f64>>) -> Result<IsingModel> {
    let n = patterns.first().map(|p| p.len()).unwrap_or(0);
    if n == 0 {
        return Err(IsingError::invalid("hopfield needs at least one non-empty pattern"));
    }
    let mut j = DMatrix::zeros(n, n);
    for (v, p) in patterns.iter().enumerate() {
        if p.len() != n {
            return Err(IsingError::invalid(format!("pattern {v} has length {}, expected {n}", p.len())));
        }
        if p.iter().any(|&s| s != 1 && s != -1) {
            return Err(IsingError::invalid(format!("pattern {v} has entries other than ±1")));
        }
        let eta = DVector::from_iterator(n, p.iter().map(|&s| s as f64));
        j += &eta * eta.transpose();
    }
    j *= beta / (2.0 * n as f64);
    let h = field.unwrap_or_else(|| DVector::zeros(n));
    let params = serde_json::json!({"m": patterns.len(), "n": n, "beta": beta});
    Ok(IsingModel::new(j, h)?.with_meta(meta("hopfield", false, params)))
}

/// `m` independent uniform patterns of length `n`.
pub fn random_patterns(n: usize, m: usize, seed: u64) -> Vec<Vec<i8>> {
    let mut rng = SeedTree::new(seed).child("patterns", 0).rng();
    (0..m)
        .map(|_| (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect())
        .collect()
}

/// Symmetric `W` with off-diagonal `N(0, 1/n)` and diagonal `N(0, 2/n)`.
pub fn goe(n: usize, rng: &mut ChainRng) -> DMatrix<f64> {
    let off = (1.0 / n as f64).sqrt();
    let diag = (2.0 / n as f64).sqrt();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        let g: f64 = StandardNormal.sample(rng);
        w[(i, i)] = diag * g;
        for k in i + 1..n {
            let g: f64 = StandardNormal.sample(rng);
            w[(i, k)] = off * g;
            w[(k, i)] = off * g;
        }
    }
    w
}

/// `J_ij = β₁/n + β₂·W_ij` with `W` from the Gaussian orthogonal ensemble.
pub fn sk_ferro(n: usize, beta1: f64, beta2: f64, seed: u64) -> Result<IsingModel> {
    if n < 2 {
        return Err(IsingError::invalid("sk-ferro needs n ≥ 2"));
    }
    let mut rng = SeedTree::new(seed).child("goe", 0).rng();
    let w = goe(n, &mut rng);
    let j = DMatrix::from_element(n, n, beta1 / n as f64) + w * beta2;
    let params = serde_json::json!({"n": n, "beta1": beta1, "beta2": beta2, "seed": seed});
    Ok(IsingModel::with_zero_field(j)?.with_meta(meta("sk-ferro", false, params)))
}

/// `J = sign·β·A` for a simple graph; the field may be inconsistent.
pub fn graph_ising(adjacency: &DMatrix<f64>, beta: f64, sign: i8, h: Option<DVector<f64>>) -> Result<IsingModel> {
    let n = adjacency.nrows();
    if n == 0 || adjacency.ncols() != n {
        return Err(IsingError::invalid("adjacency must be square and non-empty"));
    }
    if sign != 1 && sign != -1 {
        return Err(IsingError::invalid(format!("sign must be ±1, got {sign}")));
    }
    for i in 0..n {
        if adjacency[(i, i)] != 0.0 {
            return Err(IsingError::invalid(format!("adjacency has a self-loop at {i}")));
        }
        for k in 0..n {
            let a = adjacency[(i, k)];
            if a != 0.0 && a != 1.0 {
                return Err(IsingError::invalid(format!("adjacency entry ({i},{k}) = {a} is not 0/1")));
            }
            if a != adjacency[(k, i)] {
                return Err(IsingError::invalid(format!("adjacency is not symmetric at ({i},{k})")));
            }
        }
    }
    let j = adjacency * (sign as f64 * beta);
    let h = h.unwrap_or_else(|| DVector::zeros(n));
    let kind = if sign < 0 { "graph-antiferro" } else { "graph-ferro" };
    let params = serde_json::json!({"n": n, "beta": beta, "sign": sign});
    Ok(IsingModel::new(j, h)?.with_meta(meta(kind, false, params)))
}

/// Uniform-ish simple `d`-regular graph: random pairing of half-edges,
/// drawing only admissible pairs and restarting when stuck.
pub fn random_regular_graph(n: usize, d: usize, seed: u64) -> Result<DMatrix<f64>> {
    if d >= n || (n * d) % 2 != 0 {
        return Err(IsingError::invalid(format!("no simple {d}-regular graph on {n} vertices")));
    }
    let tree = SeedTree::new(seed);
    for attempt in 0..1000 {
        let mut rng = tree.child("regular-graph", attempt).rng();
        let mut adj = DMatrix::zeros(n, n);
        let mut points: Vec<usize> = (0..n).flat_map(|v| std::iter::repeat_n(v, d)).collect();
        points.shuffle(&mut rng);
        let mut stuck = false;
        while !points.is_empty() && !stuck {
            let len = points.len();
            let mut found = None;
            for _ in 0..(50 * len) {
                let a = rng.random_range(0..len);
                let b = rng.random_range(0..len);
                let (u, v) = (points[a], points[b]);
                if a != b && u != v && adj[(u, v)] == 0.0 {
                    found = Some((a.max(b), a.min(b)));
                    break;
                }
            }
            match found {
                Some((hi, lo)) => {
                    let (u, v) = (points[hi], points[lo]);
                    adj[(u, v)] = 1.0;
                    adj[(v, u)] = 1.0;
                    points.swap_remove(hi);
                    points.swap_remove(lo);
                }
                None => stuck = true,
            }
        }
        if !stuck {
            return Ok(adj);
        }
    }
    Err(IsingError::SamplerFailure {
        trials: 1000,
        steps: 0,
        reason: format!("could not pair a {d}-regular graph on {n} vertices"),
    })
}

/// `J = λ·A + (p·μ / (n(1+μ)))·B·Bᵀ`, `h = 0`: the cluster posterior
/// after integrating out the context mean. `A = None` is the Gaussian
/// mixture posterior.
pub fn posterior_model(a: Option<&DMatrix<f64>>, b: &DMatrix<f64>, lambda: f64, mu: f64, p: usize) -> Result<IsingModel> {
    let n = b.nrows();
    if n == 0 || b.ncols() != p {
        return Err(IsingError::invalid(format!(
            "B must be n×p with p = {p}, got {}x{}",
            b.nrows(),
            b.ncols()
        )));
    }
    if !(mu > -1.0) {
        return Err(IsingError::invalid(format!("mu must exceed -1, got {mu}")));
    }
    let mut j = b * b.transpose() * (p as f64 * mu / (n as f64 * (1.0 + mu)));
    if let Some(a) = a {
        if a.nrows() != n || a.ncols() != n {
            return Err(IsingError::invalid(format!("A must be {n}x{n}, got {}x{}", a.nrows(), a.ncols())));
        }
        j += a * lambda;
    }
    // B·Bᵀ is symmetric only up to rounding
    let j = (&j + j.transpose()) * 0.5;
    let params = serde_json::json!({"n": n, "p": p, "lambda": lambda, "mu": mu, "graph": a.is_some()});
    Ok(IsingModel::with_zero_field(j)?.with_meta(meta("posterior", false, params)))
}

/// One draw of the Gaussian contextual block model.
#[derive(Clone, Debug)]
pub struct CsbmSample {
    /// `(λ/n)·vvᵀ + W`.
    pub a: DMatrix<f64>,
    /// `√(μ/n)·v·uᵀ + Z`.
    pub b: DMatrix<f64>,
    pub v: Vec<i8>,
    pub u: DVector<f64>,
}

/// `v` uniform, `u ~ N(0, I_p/p)`, `W` GOE, `Z` with iid `N(0, 1/p)`.
pub fn csbm_sample(n: usize, p: usize, lambda: f64, mu: f64, seed: u64) -> Result<CsbmSample> {
    if n == 0 || p == 0 {
        return Err(IsingError::invalid("csbm needs n ≥ 1 and p ≥ 1"));
    }
    let tree = SeedTree::new(seed);
    let mut rng = tree.child("csbm-latent", 0).rng();
    let v: Vec<i8> = (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
    let sp = (1.0 / p as f64).sqrt();
    let u = DVector::from_fn(p, |_, _| sp * Distribution::<f64>::sample(&StandardNormal, &mut rng));
    let vf = DVector::from_iterator(n, v.iter().map(|&s| s as f64));
    let w = goe(n, &mut tree.child("csbm-graph", 0).rng());
    let a = &vf * vf.transpose() * (lambda / n as f64) + w;
    let mut zr = tree.child("csbm-context", 0).rng();
    let z = DMatrix::from_fn(n, p, |_, _| sp * Distribution::<f64>::sample(&StandardNormal, &mut zr));
    let b = &vf * u.transpose() * (mu / n as f64).sqrt() + z;
    Ok(CsbmSample { a, b, v, u })
}

/// `p_a(σ) ∝ exp(−β·n·(⟨a,σ⟩ − b)²)`: `J = −2βn·aaᵀ`, `h = 2bβn·a`.
///
/// Sampling this is as hard as deciding subset sum; it exists to stress
/// the pipeline and is marked `expected_hard`.
pub fn subset_sum_instance(a: &[i64], beta: f64, b: Option<i64>) -> Result<IsingModel> {
    let n = a.len();
    if n == 0 {
        return Err(IsingError::invalid("subset-sum needs a non-empty vector"));
    }
    log::warn!("subset-sum instance with n = {n}: expected hard, use for stress testing only");
    let av = DVector::from_iterator(n, a.iter().map(|&x| x as f64));
    let scale = beta * n as f64;
    let j = &av * av.transpose() * (-2.0 * scale);
    let h = match b {
        Some(b) => &av * (2.0 * b as f64 * scale),
        None => DVector::zeros(n),
    };
    let params = serde_json::json!({"a": a, "beta": beta, "b": b});
    Ok(IsingModel::new(j, h)?.with_meta(meta("subset-sum", true, params)))
}

/// A serializable description of a generated model.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelParams {
    CurieWeiss {
        n: usize,
        beta: f64,
    },
    /// Explicit `patterns`, or `m` random patterns of length `n`.
    Hopfield {
        beta: f64,
        #[serde(default)]
        patterns: Option<Vec<Vec<i8>>>,
        #[serde(default)]
        n: Option<usize>,
        #[serde(default)]
        m: Option<usize>,
        #[serde(default)]
        field: Option<Vec<f64>>,
    },
    SkFerro {
        n: usize,
        beta1: f64,
        beta2: f64,
    },
    /// Explicit adjacency rows, or a random `degree`-regular graph on `n`.
    Graph {
        beta: f64,
        sign: i8,
        #[serde(default)]
        adjacency: Option<Vec<Vec<u8>>>,
        #[serde(default)]
        n: Option<usize>,
        #[serde(default)]
        degree: Option<usize>,
        #[serde(default)]
        field: Option<Vec<f64>>,
    },
    /// Explicit `b` (and optionally `a`), or a fresh contextual block model
    /// draw of size `n`.
    Posterior {
        lambda: f64,
        mu: f64,
        p: usize,
        #[serde(default)]
        a: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        b: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        n: Option<usize>,
    },
    SubsetSum {
        a: Vec<i64>,
        beta: f64,
        #[serde(default)]
        b: Option<i64>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelRecipe {
    #[serde(flatten)]
    pub params: ModelParams,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map(|x| x.len()).unwrap_or(0);
    if r == 0 || c == 0 || rows.iter().any(|x| x.len() != c) {
        return Err(IsingError::invalid(format!("{what} must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(r, c, |i, k| rows[i][k]))
}

impl ModelRecipe {
    pub fn kind(&self) -> &'static str {
        match self.params {
            ModelParams::CurieWeiss { .. } => "curie-weiss",
            ModelParams::Hopfield { .. } => "hopfield",
            ModelParams::SkFerro { .. } => "sk-ferro",
            ModelParams::Graph { .. } => "graph",
            ModelParams::Posterior { .. } => "posterior",
            ModelParams::SubsetSum { .. } => "subset-sum",
        }
    }

    fn need_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| IsingError::invalid(format!("{} recipe needs a seed", self.kind())))
    }

    pub fn build(&self) -> Result<IsingModel> {
        let model = match &self.params {
            ModelParams::CurieWeiss { n, beta } => curie_weiss(*n, *beta)?,
            ModelParams::Hopfield {
                beta,
                patterns,
                n,
                m,
                field,
            } => {
                let pats = match (patterns, n, m) {
                    (Some(p), _, _) => p.clone(),
                    (None, Some(n), Some(m)) => random_patterns(*n, *m, self.need_seed()?),
                    _ => return Err(IsingError::invalid("hopfield needs patterns or n and m")),
                };
                hopfield(&pats, *beta, field.clone().map(DVector::from_vec))?
            }
            ModelParams::SkFerro { n, beta1, beta2 } => sk_ferro(*n, *beta1, *beta2, self.need_seed()?)?,
            ModelParams::Graph {
                beta,
                sign,
                adjacency,
                n,
                degree,
                field,
            } => {
                let adj = match (adjacency, n, degree) {
                    (Some(rows), _, _) => {
                        let f: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
                        rows_to_matrix(&f, "adjacency")?
                    }
                    (None, Some(n), Some(d)) => random_regular_graph(*n, *d, self.need_seed()?)?,
                    _ => return Err(IsingError::invalid("graph needs an adjacency or n and degree")),
                };
                graph_ising(&adj, *beta, *sign, field.clone().map(DVector::from_vec))?
            }
            ModelParams::Posterior { lambda, mu, p, a, b, n } => match (b, n) {
                (Some(b), _) => {
                    let bm = rows_to_matrix(b, "B")?;
                    let am = a.as_ref().map(|a| rows_to_matrix(a, "A")).transpose()?;
                    posterior_model(am.as_ref(), &bm, *lambda, *mu, *p)?
                }
                (None, Some(n)) => {
                    let s = csbm_sample(*n, *p, *lambda, *mu, self.need_seed()?)?;
                    let a = (*lambda != 0.0).then_some(&s.a);
                    posterior_model(a, &s.b, *lambda, *mu, *p)?
                }
                _ => return Err(IsingError::invalid("posterior needs B or n")),
            },
            ModelParams::SubsetSum { a, beta, b } => subset_sum_instance(a, *beta, *b)?,
        };
        let hard = matches!(self.params, ModelParams::SubsetSum { .. });
        let params = serde_json::to_value(self).map_err(|e| IsingError::invalid(e.to_string()))?;
        Ok(model.with_meta(meta(self.kind(), hard, params)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::brute_force_distribution;
    use crate::spectral::symmetric_eigen;
    use crate::SpinConfig;
    use proptest::prelude::*;

    fn eig(j: &DMatrix<f64>) -> Vec<f64> {
        let mut v: Vec<f64> = symmetric_eigen(j).unwrap().eigenvalues.iter().copied().collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    #[test]
    fn curie_weiss_examples() {
        let m = curie_weiss(2, 1.0).unwrap();
        assert_eq!(m.j(), &DMatrix::from_element(2, 2, 0.5));
        assert_eq!(curie_weiss(5, 0.0).unwrap().j(), &DMatrix::zeros(5, 5));
        let e = eig(curie_weiss(6, 1.3).unwrap().j());
        assert!((e[5] - 1.3).abs() < 1e-12);
        assert!(e[..5].iter().all(|x| x.abs() < 1e-12));
        assert!(curie_weiss(0, 1.0).is_err());
        assert!(curie_weiss(3, -1.0).is_err());
    }

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(lo) * f(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn curie_weiss_is_bimodal_at_mean_field_points() {
        let (n, beta) = (12, 1.5);
        let dist = brute_force_distribution(&curie_weiss(n, beta).unwrap()).unwrap();
        let mut by_mag = vec![0.0; n + 1];
        for idx in 0..1u64 << n {
            let m = SpinConfig::from_index(idx, n).magnetization();
            by_mag[((m + n as i64) / 2) as usize] += dist.prob(idx);
        }
        for k in 0..=n {
            assert!((by_mag[k] - by_mag[n - k]).abs() < 1e-12);
        }
        let y = bisect(|y| y - (beta * y).tanh(), 0.1, 1.0);
        assert!((y - 0.8586).abs() < 1e-3);
        let mode = (0..=n).max_by(|&a, &b| by_mag[a].partial_cmp(&by_mag[b]).unwrap()).unwrap();
        let mode_mag = (2 * mode) as f64 - n as f64;
        assert!((mode_mag.abs() - n as f64 * y).abs() <= 2.0, "{mode_mag}");
        assert!(by_mag[n / 2] < by_mag[mode]);
    }

    #[test]
    fn hopfield_examples() {
        let m = hopfield(&[vec![1; 4]], 2.0, None).unwrap();
        assert!((m.j() - DMatrix::from_element(4, 4, 0.25)).amax() < 1e-15);
        let pats = vec![vec![1, 1, 1, 1], vec![1, -1, 1, -1], vec![1, 1, -1, -1]];
        let e = eig(hopfield(&pats, 1.4, None).unwrap().j());
        assert!(e[0].abs() < 1e-12);
        for x in &e[1..] {
            assert!((x - 0.7).abs() < 1e-12);
        }
        let r = hopfield(&random_patterns(10, 2, 4), 1.0, None).unwrap();
        assert!(eig(r.j()).iter().filter(|x| x.abs() > 1e-10).count() <= 2);
        assert!(hopfield(&[vec![1, 1], vec![1]], 1.0, None).is_err());
        assert_eq!(random_patterns(7, 3, 9), random_patterns(7, 3, 9));
    }

    #[test]
    fn sk_reduces_to_curie_weiss() {
        let a = sk_ferro(9, 1.1, 0.0, 3).unwrap();
        assert!((a.j() - curie_weiss(9, 1.1).unwrap().j()).amax() < 1e-15);
        assert_eq!(sk_ferro(9, 0.5, 0.3, 3).unwrap().j(), sk_ferro(9, 0.5, 0.3, 3).unwrap().j());
        assert_ne!(sk_ferro(9, 0.5, 0.3, 3).unwrap().j(), sk_ferro(9, 0.5, 0.3, 4).unwrap().j());
    }

    #[test]
    fn sk_norm_concentrates() {
        let hits = (0..50u64)
            .filter(|&s| {
                let e = eig(sk_ferro(200, 0.0, 0.2, s).unwrap().j());
                e[0].abs().max(e[199].abs()) <= 0.2 * 2.0 * 1.2
            })
            .count();
        assert!(hits >= 48, "{hits}");
    }

    #[test]
    fn goe_variances() {
        let mut rng = SeedTree::new(1).rng();
        let n = 300;
        let w = goe(n, &mut rng);
        let off: f64 = (0..n).flat_map(|i| (i + 1..n).map(move |k| (i, k))).map(|(i, k)| w[(i, k)].powi(2)).sum::<f64>()
            / (n * (n - 1) / 2) as f64;
        let diag: f64 = (0..n).map(|i| w[(i, i)].powi(2)).sum::<f64>() / n as f64;
        assert!((off * n as f64 - 1.0).abs() < 0.02);
        assert!((diag * n as f64 - 2.0).abs() < 0.4);
    }

    #[test]
    fn graph_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let m = graph_ising(&a, 0.3, -1, None).unwrap();
        assert_eq!(m.j(), &DMatrix::from_row_slice(2, 2, &[0.0, -0.3, -0.3, 0.0]));
        assert_eq!(graph_ising(&a, 0.3, 1, None).unwrap().j(), &(&a * 0.3));
        let bad = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert!(graph_ising(&bad, 0.3, 1, None).is_err());
        let g = random_regular_graph(12, 3, 5).unwrap();
        for i in 0..12 {
            assert_eq!(g.row(i).sum(), 3.0);
            assert_eq!(g[(i, i)], 0.0);
        }
        let e = eig(graph_ising(&g, 0.2, -1, None).unwrap().j());
        assert!((e[0] + 0.6).abs() < 1e-10);
        assert!(random_regular_graph(5, 3, 1).is_err());
        assert_eq!(random_regular_graph(20, 4, 8).unwrap(), random_regular_graph(20, 4, 8).unwrap());
    }

    #[test]
    fn posterior_examples() {
        let s = csbm_sample(6, 2, 0.0, 1.5, 3).unwrap();
        let m = posterior_model(None, &s.b, 0.0, 1.5, 2).unwrap();
        let e = eig(m.j());
        assert!(e.iter().filter(|x| x.abs() > 1e-10).count() <= 2);
        assert!(e[0] > -1e-12);
        let z = posterior_model(None, &s.b, 0.0, 0.0, 2).unwrap();
        assert_eq!(z.j(), &DMatrix::zeros(6, 6));
        let with_a = posterior_model(Some(&s.a), &s.b, 0.2, 1.5, 2).unwrap();
        assert!((with_a.j() - m.j() - &s.a * 0.2).amax() < 1e-12);
        assert!(posterior_model(None, &s.b, 0.0, 1.0, 3).is_err());
        // the quadratic form is the posterior exponent
        let v = DVector::from_vec(vec![1.0, -1.0, 1.0, 1.0, -1.0, -1.0]);
        let bt_v = s.b.transpose() * &v;
        let want = 2.0 * 1.5 / (2.0 * 6.0 * 2.5) * bt_v.norm_squared();
        assert!((0.5 * v.dot(&(m.j() * &v)) - want).abs() < 1e-12);
    }

    #[test]
    fn subset_sum_examples() {
        let m = subset_sum_instance(&[1, 1, 2], 1.0, None).unwrap();
        assert!(m.meta.as_ref().unwrap().expected_hard);
        let dist = brute_force_distribution(&m).unwrap();
        let zero: Vec<u64> = (0..8u64)
            .filter(|&i| {
                let s = SpinConfig::from_index(i, 3);
                let dot: i64 = s.as_slice().iter().zip([1i64, 1, 2]).map(|(&a, b)| a as i64 * b).sum();
                dot == 0
            })
            .collect();
        assert_eq!(zero.len(), 2);
        assert!(zero.contains(&SpinConfig::new(vec![1, 1, -1]).unwrap().index()));
        let outside: f64 = (0..8u64).filter(|i| !zero.contains(i)).map(|i| dist.prob(i)).sum();
        assert!(outside <= 8.0 * (-3.0f64).exp());

        let m = subset_sum_instance(&[1, 3], 1.0, None).unwrap();
        let dist = brute_force_distribution(&m).unwrap();
        // ⟨a,σ⟩ ∈ {±4, ±2}; the two states with |⟨a,σ⟩| = 2 share the mass
        let best = SpinConfig::new(vec![1, -1]).unwrap().index();
        let other = SpinConfig::new(vec![-1, 1]).unwrap().index();
        assert!((dist.prob(best) - dist.prob(other)).abs() < 1e-12);
        assert!(dist.prob(best) > 0.49);

        let with_b = subset_sum_instance(&[1, 2], 0.5, Some(1)).unwrap();
        assert_eq!(with_b.h().as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn recipe_roundtrip() {
        let r = ModelRecipe {
            params: ModelParams::Hopfield {
                beta: 1.2,
                patterns: None,
                n: Some(8),
                m: Some(2),
                field: None,
            },
            seed: Some(3),
        };
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"kind\":\"hopfield\""));
        let back: ModelRecipe = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.build().unwrap().j(), r.build().unwrap().j());
        let no_seed = ModelRecipe { seed: None, ..r };
        assert!(no_seed.build().is_err());
        let cw: ModelRecipe = serde_json::from_str(r#"{"kind":"curie-weiss","n":4,"beta":1.0}"#).unwrap();
        assert_eq!(cw.build().unwrap().meta.unwrap().kind, "curie-weiss");
        let post: ModelRecipe = serde_json::from_str(r#"{"kind":"posterior","lambda":0.1,"mu":1.0,"p":2,"n":7,"seed":1}"#).unwrap();
        assert_eq!(post.build().unwrap().n(), 7);
        let g: ModelRecipe = serde_json::from_str(r#"{"kind":"graph","beta":0.2,"sign":-1,"n":10,"degree":3,"seed":2}"#).unwrap();
        assert_eq!(g.build().unwrap().j().iter().filter(|&&x| x != 0.0).count(), 30);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn hopfield_rank_bounded(n in 2usize..12, m in 1usize..4, seed in 0u64..1000, beta in 0.1f64..3.0) {
            let model = hopfield(&random_patterns(n, m, seed), beta, None).unwrap();
            let nonzero = eig(model.j()).iter().filter(|x| x.abs() > 1e-9).count();
            prop_assert!(nonzero <= m);
        }

        #[test]
        fn gmm_posterior_rank_and_psd(n in 2usize..12, p in 1usize..4, seed in 0u64..1000, mu in 0.0f64..3.0) {
            let s = csbm_sample(n, p, 0.0, mu, seed).unwrap();
            let model = posterior_model(None, &s.b, 0.0, mu, p).unwrap();
            let e = eig(model.j());
            prop_assert!(e.iter().filter(|x| x.abs() > 1e-9).count() <= p);
            prop_assert!(e[0] > -1e-9);
        }

        #[test]
        fn generators_are_seed_deterministic(n in 2usize..16, seed in 0u64..1000) {
            prop_assert_eq!(sk_ferro(n, 0.3, 0.2, seed).unwrap(), sk_ferro(n, 0.3, 0.2, seed).unwrap());
            let a = csbm_sample(n, 2, 0.5, 1.0, seed).unwrap();
            let b = csbm_sample(n, 2, 0.5, 1.0, seed).unwrap();
            prop_assert_eq!(a.a, b.a);
            prop_assert_eq!(a.b, b.b);
        }
    }
}

//! Splitting `J` into positive spikes, a bounded bulk, and a negative part.
//!
//! ```text
//! J = J₊ − J₋,   J₊ = J∥ + J⊥,   J₊ = (1/n)·XᵀX
//! ```
//!
//! `X` is the symmetric square root of `n·J₊`, so it shares eigenvectors
//! with `J` and `XᵀQ = √n·Q·diag(√λ)` on the spike block. That identity is
//! what every downstream module uses instead of materializing `X`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{IsingError, Result};

/// Eigenvalues within this distance of the spike threshold stay in the bulk.
pub const THRESHOLD_TOL: f64 = 1e-12;
/// Negative eigenvalues smaller than this in magnitude are treated as zero.
pub const NEG_CLAMP: f64 = 1e-12;

const EIGEN_MAX_ITER: usize = 100_000;

/// `c = ∞` marker, meaning spike threshold 1.
pub const C_INFINITY: f64 = f64::INFINITY;

#[derive(Clone, Debug)]
pub struct SpectralSplit {
    pub c: f64,
    pub d: usize,
    pub j_plus: DMatrix<f64>,
    pub j_minus: DMatrix<f64>,
    pub x: DMatrix<f64>,
    /// `n × d`, orthonormal columns spanning the spike subspace.
    pub q: DMatrix<f64>,
    /// Eigenvalues of `J` matching the columns of `q`.
    pub spike_eigvals: Vec<f64>,
    pub j_par: DMatrix<f64>,
    pub j_perp: DMatrix<f64>,
    /// All eigenvalues of `J`, ascending.
    pub eigvals: Vec<f64>,
    pub op_norm: f64,
    pub perp_norm: f64,
    pub minus_norm: f64,
    pub minus_trace: f64,
}

/// `c` used when the caller gives none.
pub fn default_c(eigvals: &[f64]) -> f64 {
    if eigvals.iter().any(|&l| l < -NEG_CLAMP) {
        2.0
    } else {
        C_INFINITY
    }
}

/// Spike threshold `1 − 1/c`.
pub fn spike_threshold(c: f64) -> f64 {
    if c.is_infinite() {
        1.0
    } else {
        1.0 - 1.0 / c
    }
}

pub(crate) fn symmetric_eigen(j: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    SymmetricEigen::try_new(j.clone(), f64::EPSILON, EIGEN_MAX_ITER)
        .ok_or_else(|| IsingError::Numeric("symmetric eigensolver did not converge".into()))
}

/// Spectral norm of a symmetric matrix.
pub fn sym_op_norm(m: &DMatrix<f64>) -> Result<f64> {
    if m.is_empty() {
        return Ok(0.0);
    }
    Ok(symmetric_eigen(m)?.eigenvalues.amax())
}

/// Split `J` at threshold `1 − 1/c`. `c = None` picks [`default_c`];
/// `tol` is the absolute symmetry tolerance.
pub fn decompose(j: &DMatrix<f64>, c: Option<f64>, tol: f64) -> Result<SpectralSplit> {
    let n = j.nrows();
    if n == 0 || j.ncols() != n {
        return Err(IsingError::invalid(format!("J must be square and non-empty, got {}x{}", j.nrows(), j.ncols())));
    }
    let asym = (j - j.transpose()).amax();
    if asym > tol {
        return Err(IsingError::invalid(format!("J is not symmetric (max asymmetry {asym:.3e})")));
    }
    if j.iter().any(|v| !v.is_finite()) {
        return Err(IsingError::invalid("J has non-finite entries"));
    }
    let sym = (j + j.transpose()) * 0.5;
    let eig = symmetric_eigen(&sym)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigvals: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();

    let c = c.unwrap_or_else(|| default_c(&eigvals));
    if c.is_nan() || c <= 1.0 {
        return Err(IsingError::invalid(format!("c must lie in (1, inf], got {c}")));
    }
    let has_negative = eigvals[0] < -NEG_CLAMP;
    if has_negative && c.is_infinite() {
        return Err(IsingError::invalid("c = inf is only valid when J has no negative eigenvalues"));
    }
    let thr = spike_threshold(c);

    let mut j_plus = DMatrix::zeros(n, n);
    let mut j_minus = DMatrix::zeros(n, n);
    let mut j_par = DMatrix::zeros(n, n);
    let mut x = DMatrix::zeros(n, n);
    let mut spike_cols = Vec::new();
    let mut spike_eigvals = Vec::new();
    let nf = n as f64;
    // descending order for the spike columns so column 0 is the top spike
    for &k in order.iter().rev() {
        let lambda = eig.eigenvalues[k];
        let v = eig.eigenvectors.column(k);
        if lambda < -NEG_CLAMP {
            j_minus.ger(-lambda, &v, &v, 1.0);
        } else if lambda > 0.0 {
            j_plus.ger(lambda, &v, &v, 1.0);
            x.ger((nf * lambda).sqrt(), &v, &v, 1.0);
            if lambda > thr + THRESHOLD_TOL {
                j_par.ger(lambda, &v, &v, 1.0);
                spike_cols.push(v.into_owned());
                spike_eigvals.push(lambda);
            }
        }
    }
    let d = spike_cols.len();
    let q = if d == 0 {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&spike_cols)
    };
    let j_perp = &j_plus - &j_par;
    let op_norm = eigvals[0].abs().max(eigvals[n - 1].abs());
    let perp_norm = eigvals
        .iter()
        .filter(|&&l| l > 0.0 && l <= thr + THRESHOLD_TOL)
        .fold(0.0f64, |a, &l| a.max(l));
    let minus_norm = eigvals.iter().filter(|&&l| l < -NEG_CLAMP).fold(0.0f64, |a, &l| a.max(-l));
    let minus_trace = eigvals.iter().filter(|&&l| l < -NEG_CLAMP).map(|l| -l).sum();

    Ok(SpectralSplit {
        c,
        d,
        j_plus,
        j_minus,
        x,
        q,
        spike_eigvals,
        j_par,
        j_perp,
        eigvals,
        op_norm,
        perp_norm,
        minus_norm,
        minus_trace,
    })
}

impl SpectralSplit {
    pub fn n(&self) -> usize {
        self.j_plus.nrows()
    }

    pub fn has_minus(&self) -> bool {
        self.minus_trace > 0.0
    }

    /// `c·Tr(J₋)`, with `c·0 = 0` even for `c = ∞`.
    pub fn c_trace_minus(&self) -> f64 {
        if self.has_minus() {
            self.c * self.minus_trace
        } else {
            0.0
        }
    }

    /// `√(n·λ_k)` per spike column.
    pub fn spike_scales(&self) -> Vec<f64> {
        let nf = self.n() as f64;
        self.spike_eigvals.iter().map(|l| (nf * l).sqrt()).collect()
    }

    /// `XᵀQ·y` in `ℝⁿ`.
    pub fn spike_field(&self, y: &[f64]) -> DVector<f64> {
        assert_eq!(y.len(), self.d);
        let scaled: Vec<f64> = self.spike_scales().iter().zip(y).map(|(s, y)| s * y).collect();
        &self.q * DVector::from_vec(scaled)
    }

    /// `QᵀX·σ` in `ℝᵈ`.
    pub fn project(&self, sigma: &[f64]) -> Vec<f64> {
        let s = DVector::from_column_slice(sigma);
        let qs = self.q.transpose() * s;
        qs.iter().zip(self.spike_scales()).map(|(a, b)| a * b).collect()
    }
}

/// Invariant checks on a split, all defects as non-negative numbers.
#[derive(Clone, Debug, Serialize)]
pub struct SplitDiagnostics {
    pub n: usize,
    pub d: usize,
    pub c: Option<f64>,
    pub reconstruction_error: f64,
    pub psd_slack: f64,
    pub cross_term: f64,
    pub orthonormality_defect: f64,
    pub factor_error: f64,
    pub par_error: f64,
    pub perp_norm: f64,
    pub perp_bound: f64,
    pub op_norm: f64,
    pub minus_trace: f64,
    pub eigvals: Vec<f64>,
    pub violations: Vec<String>,
}

impl SplitDiagnostics {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    match symmetric_eigen(m) {
        Ok(e) => e.eigenvalues.min(),
        Err(_) => f64::NAN,
    }
}

/// Recompute every split invariant from scratch.
pub fn validate_split(split: &SpectralSplit, j: &DMatrix<f64>) -> Result<SplitDiagnostics> {
    let n = j.nrows();
    if split.n() != n || split.q.nrows() != n || split.q.ncols() != split.d {
        return Err(IsingError::invalid("split and J shapes disagree"));
    }
    let nf = n as f64;
    let reconstruction_error = (&split.j_plus - &split.j_minus - j).norm();
    let psd_slack = (-min_eig(&split.j_plus)).max(-min_eig(&split.j_minus)).max(0.0);
    let cross_term = (&split.j_plus * &split.j_minus).norm();
    let gram = split.q.transpose() * &split.q;
    let orthonormality_defect = (gram - DMatrix::identity(split.d, split.d)).amax();
    let factor_error = (split.x.transpose() * &split.x / nf - &split.j_plus).norm();
    let p_par = &split.q * split.q.transpose();
    let par_error = (split.x.transpose() * p_par * &split.x / nf - &split.j_par).norm()
        + (&split.j_plus - &split.j_par - &split.j_perp).norm();
    let perp_norm = sym_op_norm(&split.j_perp)?;
    let perp_bound = spike_threshold(split.c);

    let mut violations = Vec::new();
    let mut flag = |cond: bool, msg: String| {
        if cond {
            violations.push(msg);
        }
    };
    flag(!(reconstruction_error <= 1e-8), format!("reconstruction error {reconstruction_error:.3e}"));
    flag(!(psd_slack <= 1e-10), format!("PSD slack {psd_slack:.3e}"));
    flag(!(cross_term <= 1e-8), format!("J+ J- cross term {cross_term:.3e}"));
    flag(!(orthonormality_defect <= 1e-10), format!("orthonormality defect {orthonormality_defect:.3e}"));
    flag(!(factor_error <= 1e-8), format!("factor error {factor_error:.3e}"));
    flag(!(par_error <= 1e-8), format!("parallel part error {par_error:.3e}"));
    flag(
        !(perp_norm <= perp_bound + 1e-8),
        format!("bulk norm {perp_norm:.6} exceeds {perp_bound:.6}"),
    );

    Ok(SplitDiagnostics {
        n,
        d: split.d,
        c: split.c.is_finite().then_some(split.c),
        reconstruction_error,
        psd_slack,
        cross_term,
        orthonormality_defect,
        factor_error,
        par_error,
        perp_norm,
        perp_bound,
        op_norm: split.op_norm,
        minus_trace: split.minus_trace,
        eigvals: split.eigvals.clone(),
        violations,
    })
}

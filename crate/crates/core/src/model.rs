//! Model representation and the JSON model file format.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{IsingError, Result};

/// Absolute asymmetry tolerated silently when loading `J`.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// A configuration in `{-1, +1}^n`.
///
/// State index convention: bit `i` of the index is `(σ_i + 1) / 2`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<i8>", into = "Vec<i8>")]
pub struct SpinConfig(Vec<i8>);

impl SpinConfig {
    pub fn new(spins: Vec<i8>) -> Result<Self> {
        if let Some(bad) = spins.iter().find(|&&s| s != 1 && s != -1) {
            return Err(IsingError::invalid(format!("spin value {bad} is not ±1")));
        }
        Ok(Self(spins))
    }

    pub fn all_up(n: usize) -> Self {
        Self(vec![1; n])
    }

    pub fn from_index(index: u64, n: usize) -> Self {
        Self((0..n).map(|i| if (index >> i) & 1 == 1 { 1 } else { -1 }).collect())
    }

    /// Binary encoding of the configuration. Panics past 64 spins.
    pub fn index(&self) -> u64 {
        assert!(self.0.len() <= 64, "state index needs n <= 64");
        self.0
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &s)| if s == 1 { acc | (1 << i) } else { acc })
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }

    /// Flip site `i` in place.
    pub fn flip(&mut self, i: usize) {
        self.0[i] = -self.0[i];
    }

    pub fn magnetization(&self) -> i64 {
        self.0.iter().map(|&s| s as i64).sum()
    }

    pub fn to_f64(&self) -> DVector<f64> {
        DVector::from_iterator(self.0.len(), self.0.iter().map(|&s| s as f64))
    }

    pub(crate) fn from_raw(spins: Vec<i8>) -> Self {
        debug_assert!(spins.iter().all(|&s| s == 1 || s == -1));
        Self(spins)
    }
}

impl TryFrom<Vec<i8>> for SpinConfig {
    type Error = IsingError;
    fn try_from(v: Vec<i8>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SpinConfig> for Vec<i8> {
    fn from(s: SpinConfig) -> Self {
        s.0
    }
}

impl fmt::Display for SpinConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &s in &self.0 {
            f.write_str(if s == 1 { "+" } else { "-" })?;
        }
        Ok(())
    }
}

/// Generator recipe attached to a model; not part of the model hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: String,
    #[serde(default)]
    pub expected_hard: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<serde_json::Value>,
}

/// `p(σ) ∝ exp(½⟨σ, Jσ⟩ + ⟨h, σ⟩)` on `{-1, +1}^n`.
#[derive(Clone, Debug, PartialEq)]
pub struct IsingModel {
    j: DMatrix<f64>,
    h: DVector<f64>,
    pub meta: Option<ModelMeta>,
}

impl IsingModel {
    /// Build a model, symmetrizing `J` as `(J + Jᵀ)/2`.
    pub fn new(j: DMatrix<f64>, h: DVector<f64>) -> Result<Self> {
        let n = h.len();
        if n == 0 {
            return Err(IsingError::invalid("model needs at least one spin"));
        }
        if j.nrows() != n || j.ncols() != n {
            return Err(IsingError::invalid(format!(
                "J is {}x{} but h has length {n}",
                j.nrows(),
                j.ncols()
            )));
        }
        if j.iter().chain(h.iter()).any(|x| !x.is_finite()) {
            return Err(IsingError::invalid("J and h must be finite"));
        }
        let asym = (&j - j.transpose()).amax();
        if asym > SYMMETRY_TOL {
            log::warn!("J asymmetric by {asym:.3e}; symmetrizing");
        }
        let j = if asym > 0.0 { (&j + j.transpose()) * 0.5 } else { j };
        Ok(Self { j, h, meta: None })
    }

    pub fn from_row_major(n: usize, j: &[f64], h: &[f64]) -> Result<Self> {
        if j.len() != n * n || h.len() != n {
            return Err(IsingError::invalid(format!(
                "expected {} couplings and {n} fields, got {} and {}",
                n * n,
                j.len(),
                h.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(n, n, j), DVector::from_row_slice(h))
    }

    /// Zero field.
    pub fn with_zero_field(j: DMatrix<f64>) -> Result<Self> {
        let n = j.nrows();
        Self::new(j, DVector::zeros(n))
    }

    pub fn with_meta(mut self, meta: ModelMeta) -> Self {
        self.meta = Some(meta);
        self
    }

    pub fn n(&self) -> usize {
        self.h.len()
    }

    pub fn j(&self) -> &DMatrix<f64> {
        &self.j
    }

    pub fn h(&self) -> &DVector<f64> {
        &self.h
    }

    /// `J + diag(d)`, same field.
    pub fn with_diagonal_shift(&self, d: &[f64]) -> Result<Self> {
        if d.len() != self.n() {
            return Err(IsingError::invalid("diagonal shift has wrong length"));
        }
        let mut j = self.j.clone();
        for (i, &di) in d.iter().enumerate() {
            j[(i, i)] += di;
        }
        Ok(Self {
            j,
            h: self.h.clone(),
            meta: self.meta.clone(),
        })
    }

    /// `½⟨σ, Jσ⟩ + ⟨h, σ⟩`.
    pub fn energy(&self, sigma: &SpinConfig) -> Result<f64> {
        if sigma.len() != self.n() {
            return Err(IsingError::invalid(format!(
                "configuration has {} spins, model has {}",
                sigma.len(),
                self.n()
            )));
        }
        Ok(quadratic_energy(&self.j, self.h.as_slice(), sigma.as_slice()))
    }

    /// SHA-256 over `n`, `J` and `h` (bit patterns, row-major).
    pub fn content_hash(&self) -> String {
        let n = self.n();
        let mut hasher = Sha256::new();
        hasher.update((n as u64).to_le_bytes());
        for r in 0..n {
            for c in 0..n {
                hasher.update(self.j[(r, c)].to_bits().to_le_bytes());
            }
        }
        for x in self.h.iter() {
            hasher.update(x.to_bits().to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn to_file(&self) -> ModelFile {
        let n = self.n();
        let mut j = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                j.push(self.j[(r, c)]);
            }
        }
        ModelFile {
            n,
            j: Some(j),
            h: self.h.iter().copied().collect(),
            j_factors: None,
            meta: self.meta.clone(),
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        let n = file.n;
        if file.h.len() != n {
            return Err(IsingError::invalid(format!(
                "h has length {}, expected n = {n}",
                file.h.len()
            )));
        }
        let mut j = match &file.j {
            Some(v) => {
                if v.len() != n * n {
                    return Err(IsingError::invalid(format!(
                        "J has {} entries, expected n·n = {}",
                        v.len(),
                        n * n
                    )));
                }
                DMatrix::from_row_slice(n, n, v)
            }
            None => DMatrix::zeros(n, n),
        };
        if let Some(f) = &file.j_factors {
            j += f.expand(n)?;
        } else if file.j.is_none() {
            return Err(IsingError::invalid("model file needs J or J_factors"));
        }
        let mut model = Self::new(j, DVector::from_vec(file.h))?;
        model.meta = file.meta;
        Ok(model)
    }

    pub fn from_json_str(text: &str, origin: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| IsingError::Parse {
            path: origin.to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        Self::from_file(file)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("model serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| IsingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|source| IsingError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

pub(crate) fn quadratic_energy(j: &DMatrix<f64>, h: &[f64], sigma: &[i8]) -> f64 {
    let n = h.len();
    let data = j.as_slice();
    let mut quad = 0.0;
    let mut lin = 0.0;
    for c in 0..n {
        let col = &data[c * n..(c + 1) * n];
        let mut s = 0.0;
        for r in 0..n {
            s += col[r] * sigma[r] as f64;
        }
        quad += s * sigma[c] as f64;
        lin += h[c] * sigma[c] as f64;
    }
    0.5 * quad + lin
}

/// On-disk model: `{"n", "J" (row-major n·n), "h"}` with an optional
/// eigen-form `J_factors` expanded as `Σ_k λ_k u_k u_kᵀ` and added to `J`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub n: usize,
    #[serde(rename = "J", default, skip_serializing_if = "Option::is_none")]
    pub j: Option<Vec<f64>>,
    pub h: Vec<f64>,
    #[serde(rename = "J_factors", default, skip_serializing_if = "Option::is_none")]
    pub j_factors: Option<JFactors>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<ModelMeta>,
}

/// `U` holds one length-`n` vector per factor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JFactors {
    #[serde(rename = "U")]
    pub u: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
}

impl JFactors {
    fn expand(&self, n: usize) -> Result<DMatrix<f64>> {
        if self.u.len() != self.lambda.len() {
            return Err(IsingError::invalid(format!(
                "J_factors has {} vectors but {} eigenvalues",
                self.u.len(),
                self.lambda.len()
            )));
        }
        let mut j = DMatrix::zeros(n, n);
        for (u, &lam) in self.u.iter().zip(&self.lambda) {
            if u.len() != n {
                return Err(IsingError::invalid("J_factors vector has wrong length"));
            }
            let v = DVector::from_row_slice(u);
            j += (&v * v.transpose()) * lam;
        }
        Ok(j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> IsingModel {
        IsingModel::from_row_major(2, &[0.0, 1.0, 1.0, 0.0], &[0.5, -0.5]).unwrap()
    }

    #[test]
    fn energy_by_hand() {
        let m = pair();
        let up = SpinConfig::new(vec![1, 1]).unwrap();
        assert_eq!(m.energy(&up).unwrap(), 1.0);
        let zero = IsingModel::from_row_major(2, &[0.0; 4], &[0.0; 2]).unwrap();
        assert_eq!(zero.energy(&up).unwrap(), 0.0);
        let m0 = IsingModel::from_row_major(2, &[0.0, 1.0, 1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(m0.energy(&SpinConfig::new(vec![1, -1]).unwrap()).unwrap(), -1.0);
    }

    #[test]
    fn energy_dimension_mismatch() {
        let err = pair().energy(&SpinConfig::all_up(3)).unwrap_err();
        assert!(matches!(err, IsingError::InvalidInput(_)));
    }

    #[test]
    fn spins_validated_and_indexed() {
        assert!(SpinConfig::new(vec![1, 0]).is_err());
        let s = SpinConfig::new(vec![1, -1, 1]).unwrap();
        assert_eq!(s.index(), 0b101);
        assert_eq!(SpinConfig::from_index(0b101, 3), s);
    }

    #[test]
    fn symmetrizes_on_load() {
        let m = IsingModel::from_row_major(2, &[0.0, 1.0, 0.5, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(m.j()[(0, 1)], 0.75);
        assert_eq!(m.j()[(1, 0)], 0.75);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(IsingModel::from_row_major(2, &[0.0; 3], &[0.0; 2]).is_err());
        let text = r#"{"n": 2, "J": [0,1,1,0], "h": [0]}"#;
        assert!(IsingModel::from_json_str(text, "x").is_err());
    }

    #[test]
    fn json_round_trip_is_bitwise() {
        let m = IsingModel::from_row_major(2, &[0.1, 1.0 / 3.0, 1.0 / 3.0, -2e-7], &[0.5, -0.5])
            .unwrap();
        let back = IsingModel::from_json_str(&m.to_json_string(), "mem").unwrap();
        assert_eq!(m, back);
        assert_eq!(m.content_hash(), back.content_hash());
    }

    #[test]
    fn factors_expand() {
        let text = r#"{"n": 2, "h": [0, 0], "J_factors": {"U": [[1, 1]], "lambda": [0.5]}}"#;
        let m = IsingModel::from_json_str(text, "mem").unwrap();
        assert_eq!(m.j()[(0, 1)], 0.5);
        assert_eq!(m.j()[(1, 1)], 0.5);
    }

    #[test]
    fn parse_error_has_position() {
        let err = IsingModel::from_json_str("{\n \"n\": 2,\n oops }", "bad.json").unwrap_err();
        match err {
            IsingError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}

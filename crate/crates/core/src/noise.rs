//! Measurement and model covariances.

use nalgebra::{DMatrix, Matrix3, Matrix6, SMatrix, SVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::table::fmt_f64;

const SYM_TOL: f64 = 1e-9;
const PSD_TOL: f64 = 1e-9;

/// Sensor covariance `Q` (ax, ay, gyro) and per-step model covariance `R`
/// over the filter state (vx, vy, vpsi, ax, ay, apsi).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub q_meas: Matrix3<f64>,
    pub r_model: Matrix6<f64>,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::zero()
    }
}

impl NoiseModel {
    pub fn zero() -> Self {
        Self {
            q_meas: Matrix3::zeros(),
            r_model: Matrix6::zeros(),
        }
    }

    pub fn new(q_meas: Matrix3<f64>, r_model: Matrix6<f64>) -> Result<Self> {
        let n = Self { q_meas, r_model };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<()> {
        check_psd("Q", &self.q_meas)?;
        check_psd("R", &self.r_model)
    }

    /// Acceleration block of `R`, used as simulator process noise.
    pub fn accel_block(&self) -> Matrix3<f64> {
        self.r_model.fixed_view::<3, 3>(3, 3).into_owned()
    }

    /// Plain-text document: a `<name> <rows> <cols>` header followed by the rows.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        write_matrix(&mut out, "Q", &self.q_meas);
        write_matrix(&mut out, "R", &self.r_model);
        out
    }

    pub fn from_text(s: &str) -> Result<Self> {
        let mut lines = s
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let q: Matrix3<f64> = read_matrix(&mut lines, "Q")?;
        let r: Matrix6<f64> = read_matrix(&mut lines, "R")?;
        if let Some((line, _)) = lines.next() {
            return Err(Error::Parse {
                line,
                msg: "trailing content after R".into(),
            });
        }
        Self::new(q, r)
    }
}

fn write_matrix<const N: usize>(out: &mut String, name: &str, m: &SMatrix<f64, N, N>) {
    out.push_str(&format!("{name} {N} {N}\n"));
    for r in 0..N {
        let row: Vec<String> = (0..N).map(|c| fmt_f64(m[(r, c)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
}

fn read_matrix<'a, const N: usize>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    name: &str,
) -> Result<SMatrix<f64, N, N>> {
    let (line, header) = lines.next().ok_or(Error::Parse {
        line: 0,
        msg: format!("missing {name} header"),
    })?;
    let expected = format!("{name} {N} {N}");
    if header.split_whitespace().collect::<Vec<_>>().join(" ") != expected {
        return Err(Error::Parse {
            line,
            msg: format!("expected header `{expected}`, found `{header}`"),
        });
    }
    let mut m = SMatrix::<f64, N, N>::zeros();
    for r in 0..N {
        let (line, text) = lines.next().ok_or(Error::Parse {
            line,
            msg: format!("{name}: missing row {r}"),
        })?;
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line,
                msg: e.to_string(),
            })?;
        if vals.len() != N {
            return Err(Error::Parse {
                line,
                msg: format!("{name}: expected {N} columns, found {}", vals.len()),
            });
        }
        for (c, v) in vals.into_iter().enumerate() {
            m[(r, c)] = v;
        }
    }
    Ok(m)
}

fn check_psd<const N: usize>(name: &str, m: &SMatrix<f64, N, N>) -> Result<()> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidParams(format!("{name} has non-finite entries")));
    }
    let asym = (m - m.transpose()).abs().max();
    if asym > SYM_TOL * (1.0 + m.abs().max()) {
        return Err(Error::InvalidParams(format!("{name} is not symmetric ({asym:e})")));
    }
    let min_eig = SymmetricEigen::new(DMatrix::from_column_slice(N, N, symmetrize(m).as_slice()))
        .eigenvalues
        .min();
    if min_eig < -PSD_TOL * (1.0 + m.abs().max()) {
        return Err(Error::InvalidParams(format!(
            "{name} is not positive semidefinite (min eigenvalue {min_eig:e})"
        )));
    }
    Ok(())
}

pub fn symmetrize<const N: usize>(m: &SMatrix<f64, N, N>) -> SMatrix<f64, N, N> {
    (m + m.transpose()) * 0.5
}

/// Matrix square root factor `L` with `L Lᵀ = Σ`, valid for singular PSD `Σ`.
pub fn psd_factor<const N: usize>(cov: &SMatrix<f64, N, N>) -> SMatrix<f64, N, N> {
    let eig = SymmetricEigen::new(DMatrix::from_column_slice(N, N, symmetrize(cov).as_slice()));
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let l = eig.eigenvectors * DMatrix::from_diagonal(&sqrt);
    SMatrix::<f64, N, N>::from_column_slice(l.as_slice())
}

/// One zero-mean Gaussian draw with covariance `L Lᵀ`.
pub fn gaussian<const N: usize, R: Rng + ?Sized>(
    factor: &SMatrix<f64, N, N>,
    rng: &mut R,
) -> SVector<f64, N> {
    let z = SVector::<f64, N>::from_fn(|_, _| rng.sample(StandardNormal));
    factor * z
}

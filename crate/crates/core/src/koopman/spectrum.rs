//! Eigen-decomposition of the latent transition matrix.

use std::cmp::Ordering;

use nalgebra::{Complex, DMatrix, DVector, Schur};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

/// Eigenvector matrices above this condition number count as defective.
pub const MAX_EIGENVECTOR_CONDITION: f64 = 1e12;
/// Discrete eigenvalues below this magnitude have no continuous counterpart.
pub const ZERO_EIGENVALUE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralReport {
    /// Discrete eigenvalues, `|mu|` descending, then real part descending,
    /// then imaginary part descending.
    pub eigenvalues: Vec<C64>,
    /// `ln(mu) / dt` on the principal branch; `None` where `|mu| < 1e-12`.
    pub continuous: Vec<Option<C64>>,
    /// Right eigenvectors as columns, unit norm.
    pub right: DMatrix<C64>,
    /// Left eigenvectors as columns, scaled so that `W^H Xi = I`.
    pub left: DMatrix<C64>,
    pub dt: f64,
    pub controllability_rank: Option<usize>,
}

impl SpectralReport {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Continuous eigenvalue with `-inf` standing in for a zero mode.
    pub fn continuous_or_sentinel(&self, i: usize) -> C64 {
        self.continuous[i].unwrap_or(C64::new(f64::NEG_INFINITY, 0.0))
    }

    pub fn spectral_radius(&self) -> f64 {
        self.eigenvalues.iter().map(|m| m.norm()).fold(0.0, f64::max)
    }

    /// `W^H` (the inverse of the right eigenvector matrix).
    pub fn left_adjoint(&self) -> DMatrix<C64> {
        self.left.adjoint()
    }
}

/// Principal-branch `ln(mu) / dt`.
pub fn continuous_eigenvalue(mu: C64, dt: f64) -> Option<C64> {
    (mu.norm() >= ZERO_EIGENVALUE).then(|| mu.ln() / dt)
}

fn order(a: &C64, b: &C64) -> Ordering {
    b.norm()
        .total_cmp(&a.norm())
        .then(b.re.total_cmp(&a.re))
        .then(b.im.total_cmp(&a.im))
}

fn side(z: C64) -> Ordering {
    z.im.partial_cmp(&0.0).unwrap_or(Ordering::Equal)
}

fn to_complex(a: &DMatrix<f64>) -> DMatrix<C64> {
    a.map(|v| C64::new(v, 0.0))
}

/// Orthonormal basis of the approximate null space of `m` with `k` vectors.
fn null_vectors(m: &DMatrix<C64>, k: usize) -> Vec<DVector<C64>> {
    let n = m.ncols();
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^H");
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    idx.into_iter()
        .take(k)
        .map(|i| v_t.row(i).adjoint().into_owned())
        .collect()
}

/// Unit norm, largest entry real and positive.
fn normalize(mut v: DVector<C64>) -> DVector<C64> {
    let pivot = v
        .iter()
        .copied()
        .max_by(|a, b| a.norm().total_cmp(&b.norm()))
        .unwrap_or(C64::new(1.0, 0.0));
    if pivot.norm() > 0.0 {
        let phase = pivot.conj() / pivot.norm();
        v *= phase;
    }
    let norm = v.norm();
    if norm > 0.0 {
        v /= C64::new(norm, 0.0);
    }
    v
}

/// Condition number of a square complex matrix in the 2-norm.
fn condition(m: &DMatrix<C64>) -> f64 {
    let s = m.clone().svd(false, false).singular_values;
    let max = s.iter().copied().fold(0.0, f64::max);
    let min = s.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Sorted eigenvalues of a real square matrix.
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<C64>> {
    let v = a.nrows();
    if v == 0 || a.ncols() != v {
        return Err(Error::Shape(format!("spectrum needs a non-empty square matrix, got {:?}", a.shape())));
    }
    let schur = Schur::try_new(a.clone(), f64::EPSILON, 100 * v.max(1))
        .ok_or_else(|| Error::NotDiagonalizable { condition: f64::NAN })?;
    let mut mus: Vec<C64> = schur.complex_eigenvalues().iter().copied().collect();
    mus.sort_by(order);
    Ok(mus)
}

/// Full eigen-decomposition `A = Xi diag(mu) Xi^{-1}` with left
/// eigenvectors `W = Xi^{-H}`.
pub fn spectrum(a: &DMatrix<f64>, dt: f64) -> Result<SpectralReport> {
    let mus = eigenvalues(a)?;
    let v = mus.len();
    let scale = a.norm().max(f64::MIN_POSITIVE);
    let cluster_tol = 1e-7 * scale.max(1.0);
    let ac = to_complex(a);

    let mut right = DMatrix::<C64>::zeros(v, v);
    let mut i = 0;
    while i < v {
        let mu = mus[i];
        if mu.im < 0.0 && i > 0 && (mus[i - 1].conj() - mu).norm() == 0.0 {
            // partner of an already-solved conjugate pair
            let conj = right.column(i - 1).map(|z| z.conj());
            right.set_column(i, &conj);
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < v && (mus[j] - mu).norm() <= cluster_tol && side(mus[j]) == side(mu) {
            j += 1;
        }
        let k = j - i;
        let shifted = &ac - DMatrix::<C64>::identity(v, v) * mu;
        for (off, vec) in null_vectors(&shifted, k).into_iter().enumerate() {
            right.set_column(i + off, &normalize(vec));
        }
        i = j;
    }

    let cond = condition(&right);
    if !(cond <= MAX_EIGENVECTOR_CONDITION) {
        return Err(Error::NotDiagonalizable { condition: cond });
    }
    let diag = DMatrix::from_diagonal(&DVector::from_vec(mus.clone()));
    let residual = (&ac * &right - &right * &diag).norm();
    if residual > 1e-8 * scale {
        return Err(Error::NotDiagonalizable { condition: f64::INFINITY });
    }
    let inverse = right
        .clone()
        .try_inverse()
        .ok_or(Error::NotDiagonalizable { condition: cond })?;
    let left = inverse.adjoint();
    let continuous = mus.iter().map(|&m| continuous_eigenvalue(m, dt)).collect();
    Ok(SpectralReport {
        eigenvalues: mus,
        continuous,
        right,
        left,
        dt,
        controllability_rank: None,
    })
}

/// `mode_index,mu_re,mu_im,lambda_re,lambda_im,abs_mu`, one row per mode.
pub fn spectrum_csv(report: &SpectralReport) -> String {
    let mut out = String::from("mode_index,mu_re,mu_im,lambda_re,lambda_im,abs_mu\n");
    for (i, mu) in report.eigenvalues.iter().enumerate() {
        let lam = report.continuous_or_sentinel(i);
        out.push_str(&format!(
            "{i},{:?},{:?},{:?},{:?},{:?}\n",
            mu.re,
            mu.im,
            lam.re,
            lam.im,
            mu.norm()
        ));
    }
    out
}

/// One parsed row of [`spectrum_csv`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumRow {
    pub mode_index: usize,
    pub mu: C64,
    pub lambda: C64,
    pub abs_mu: f64,
}

pub fn parse_spectrum_csv(text: &str) -> std::result::Result<Vec<SpectrumRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some("mode_index,mu_re,mu_im,lambda_re,lambda_im,abs_mu") {
        return Err("unexpected spectrum header".into());
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(format!("expected 6 fields in '{line}'"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("'{s}': {e}"));
            Ok(SpectrumRow {
                mode_index: f[0].parse().map_err(|e| format!("'{}': {e}", f[0]))?,
                mu: C64::new(num(f[1])?, num(f[2])?),
                lambda: C64::new(num(f[3])?, num(f[4])?),
                abs_mu: num(f[5])?,
            })
        })
        .collect()
}

use nalgebra::{DMatrix, DVector};

use super::spectrum::{SpectralReport, C64};
use crate::error::{Error, Result};

/// Eigenfunction traces `psi_k = W^H phi_k`, indexed `[mode][step]` in the
/// report's eigenvalue order.
pub fn eigenfunctions(report: &SpectralReport, latents: &[DVector<f64>]) -> Result<Vec<Vec<C64>>> {
    let v = report.dim();
    if let Some(bad) = latents.iter().find(|z| z.len() != v) {
        return Err(Error::Shape(format!("latent has {} entries, report has {v} modes", bad.len())));
    }
    let wh = report.left_adjoint();
    let mut traces = vec![Vec::with_capacity(latents.len()); v];
    for z in latents {
        let psi = &wh * z.map(|x| C64::new(x, 0.0));
        for (mode, trace) in traces.iter_mut().enumerate() {
            trace.push(psi[mode]);
        }
    }
    Ok(traces)
}

/// Default ridge: `1e-10 * trace(Phi Phi^T) / v`.
pub fn default_ridge(latents: &DMatrix<f64>) -> f64 {
    let gram_trace: f64 = latents.iter().map(|x| x * x).sum();
    1e-10 * gram_trace / latents.nrows().max(1) as f64
}

/// Regression weights `Bmat = X Phi^T (Phi Phi^T + ridge I)^{-1}` and modes
/// `zeta = Bmat Xi`.
pub fn koopman_modes_with_ridge(
    states: &DMatrix<f64>,
    latents: &DMatrix<f64>,
    report: &SpectralReport,
    ridge: f64,
) -> Result<(DMatrix<f64>, DMatrix<C64>)> {
    let (v, m) = latents.shape();
    if states.ncols() != m {
        return Err(Error::Shape(format!(
            "states have {} snapshots, latents {m}",
            states.ncols()
        )));
    }
    if v != report.dim() {
        return Err(Error::Shape(format!("latents have {v} rows, report {} modes", report.dim())));
    }
    if m < v {
        return Err(Error::RankDeficient(format!("{m} snapshots for {v} latent coordinates")));
    }
    let gram = latents * latents.transpose() + DMatrix::identity(v, v) * ridge;
    let rhs = latents * states.transpose();
    let weights_t = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::RankDeficient("latent Gram matrix is singular".into()))?,
    };
    if weights_t.iter().any(|x| !x.is_finite()) {
        return Err(Error::RankDeficient("non-finite regression weights".into()));
    }
    let weights = weights_t.transpose();
    let modes = weights.map(|x| C64::new(x, 0.0)) * &report.right;
    Ok((weights, modes))
}

pub fn koopman_modes(
    states: &DMatrix<f64>,
    latents: &DMatrix<f64>,
    report: &SpectralReport,
) -> Result<(DMatrix<f64>, DMatrix<C64>)> {
    koopman_modes_with_ridge(states, latents, report, default_ridge(latents))
}

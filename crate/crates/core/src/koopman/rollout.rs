use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

fn check(a: &DMatrix<f64>, b: &DMatrix<f64>, z0: &DVector<f64>, actions: &[DVector<f64>]) -> Result<()> {
    let v = a.nrows();
    if a.ncols() != v || b.nrows() != v || z0.len() != v {
        return Err(Error::Shape(format!(
            "rollout dims: A {:?}, B {:?}, latent {}",
            a.shape(),
            b.shape(),
            z0.len()
        )));
    }
    if let Some(u) = actions.iter().find(|u| u.len() != b.ncols()) {
        return Err(Error::Shape(format!("action has {} entries, B expects {}", u.len(), b.ncols())));
    }
    Ok(())
}

/// `A^i z0 + sum_{j=1..i} A^{j-1} B u_{i-j}` with `i = actions.len()`,
/// evaluated from explicit matrix powers.
pub fn rollout_closed_form(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    z0: &DVector<f64>,
    actions: &[DVector<f64>],
) -> Result<DVector<f64>> {
    check(a, b, z0, actions)?;
    let i = actions.len();
    let v = a.nrows();
    let mut power = DMatrix::identity(v, v);
    let mut forced = DVector::zeros(v);
    for j in 1..=i {
        forced += &power * (b * &actions[i - j]);
        power = a * power;
    }
    Ok(power * z0 + forced)
}

/// Stepwise `z_{k+1} = A z_k + B u_k`; returns `z_1 ..= z_i`.
pub fn rollout_recursive(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    z0: &DVector<f64>,
    actions: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    check(a, b, z0, actions)?;
    let mut out = Vec::with_capacity(actions.len());
    let mut z = z0.clone();
    for u in actions {
        z = a * z + b * u;
        out.push(z.clone());
    }
    Ok(out)
}

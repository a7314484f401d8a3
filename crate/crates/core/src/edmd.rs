//! Extended DMD with control over explicit dictionaries: lift state
//! snapshots, solve a regularized least-squares problem for `[A B]`.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::koopman::rollout_recursive;

#[derive(Debug, Clone, PartialEq)]
pub enum Dictionary {
    Identity,
    /// All monomials of total degree `<= degree`, graded lexicographic,
    /// constant first.
    Monomial { degree: usize },
    /// Tensorized probabilists' Hermite polynomials on the same index set.
    Hermite { degree: usize },
    /// Gaussian bumps `exp(-|s - c|^2 / (2 width^2))`.
    Rbf { centers: Vec<Vec<f64>>, width: f64 },
}

/// Exponent tuples of total degree `<= degree` in graded lexicographic
/// order (higher powers of earlier coordinates first within a degree).
pub fn multi_indices(dim: usize, degree: usize) -> Vec<Vec<usize>> {
    fn fill(dim: usize, remaining: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() + 1 == dim {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=remaining).rev() {
            prefix.push(e);
            fill(dim, remaining - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for total in 0..=degree {
        fill(dim, total, &mut Vec::with_capacity(dim), &mut out);
    }
    out
}

/// `He_0 .. He_degree` at `x` via `He_{k+1} = x He_k - k He_{k-1}`.
pub fn hermite_values(x: f64, degree: usize) -> Vec<f64> {
    let mut h = Vec::with_capacity(degree + 1);
    h.push(1.0);
    if degree >= 1 {
        h.push(x);
    }
    for k in 1..degree {
        let next = x * h[k] - k as f64 * h[k - 1];
        h.push(next);
    }
    h
}

impl Dictionary {
    pub fn validate(&self, state_dim: usize) -> Result<()> {
        match self {
            Dictionary::Rbf { centers, width } => {
                if !(*width > 0.0 && width.is_finite()) {
                    return Err(Error::Config(format!("rbf width must be positive, got {width}")));
                }
                if centers.is_empty() {
                    return Err(Error::Config("rbf dictionary needs centers".into()));
                }
                if centers.iter().any(|c| c.len() != state_dim || c.iter().any(|x| !x.is_finite())) {
                    return Err(Error::Config("rbf centers must be finite and match the state dim".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn output_dim(&self, state_dim: usize) -> usize {
        match self {
            Dictionary::Identity => state_dim,
            Dictionary::Monomial { degree } | Dictionary::Hermite { degree } => multi_indices(state_dim, *degree).len(),
            Dictionary::Rbf { centers, .. } => centers.len(),
        }
    }

    pub fn lift(&self, state: &[f64]) -> Result<Vec<f64>> {
        match self {
            Dictionary::Identity => Ok(state.to_vec()),
            Dictionary::Monomial { degree } => Ok(multi_indices(state.len(), *degree)
                .iter()
                .map(|idx| idx.iter().zip(state).map(|(&e, &x)| x.powi(e as i32)).product())
                .collect()),
            Dictionary::Hermite { degree } => {
                let tables: Vec<Vec<f64>> = state.iter().map(|&x| hermite_values(x, *degree)).collect();
                Ok(multi_indices(state.len(), *degree)
                    .iter()
                    .map(|idx| idx.iter().zip(&tables).map(|(&e, t)| t[e]).product())
                    .collect())
            }
            Dictionary::Rbf { centers, width } => {
                self.validate(state.len())?;
                Ok(centers
                    .iter()
                    .map(|c| {
                        let d2: f64 = c.iter().zip(state).map(|(a, b)| (a - b) * (a - b)).sum();
                        (-d2 / (2.0 * width * width)).exp()
                    })
                    .collect())
            }
        }
    }
}

/// Time-aligned lifted snapshot pairs: column `j` of `lifted_next` is the
/// lift of the successor of column `j` of `lifted` under `actions[:, j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    pub lifted: DMatrix<f64>,
    pub lifted_next: DMatrix<f64>,
    pub actions: DMatrix<f64>,
}

impl SnapshotSet {
    pub fn new(lifted: DMatrix<f64>, lifted_next: DMatrix<f64>, actions: DMatrix<f64>) -> Result<Self> {
        let m = lifted.ncols();
        if lifted_next.ncols() != m || actions.ncols() != m || lifted_next.nrows() != lifted.nrows() {
            return Err(Error::Shape(format!(
                "snapshot blocks {:?} / {:?} / {:?} disagree",
                lifted.shape(),
                lifted_next.shape(),
                actions.shape()
            )));
        }
        Ok(Self {
            lifted,
            lifted_next,
            actions,
        })
    }

    pub fn from_trajectories(dict: &Dictionary, trajectories: &[Trajectory]) -> Result<Self> {
        let first = trajectories
            .iter()
            .find(|t| !t.actions.is_empty())
            .ok_or_else(|| Error::EmptyDataset("no transitions to lift".into()))?;
        let m_state = first.states[0].len();
        let n = first.actions[0].len();
        dict.validate(m_state)?;
        let v = dict.output_dim(m_state);
        let total: usize = trajectories.iter().map(|t| t.actions.len()).sum();
        let mut lifted = DMatrix::zeros(v, total);
        let mut lifted_next = DMatrix::zeros(v, total);
        let mut actions = DMatrix::zeros(n, total);
        let mut col = 0;
        for t in trajectories {
            if t.states.len() != t.actions.len() + 1 {
                return Err(Error::Shape("trajectory states/actions misaligned".into()));
            }
            let lifts = t.states.iter().map(|s| dict.lift(s)).collect::<Result<Vec<_>>>()?;
            for (k, u) in t.actions.iter().enumerate() {
                if u.len() != n || lifts[k].len() != v {
                    return Err(Error::Shape("inconsistent state or action dimension".into()));
                }
                lifted.set_column(col, &DVector::from_column_slice(&lifts[k]));
                lifted_next.set_column(col, &DVector::from_column_slice(&lifts[k + 1]));
                actions.set_column(col, &DVector::from_column_slice(u));
                col += 1;
            }
        }
        Self::new(lifted, lifted_next, actions)
    }

    pub fn len(&self) -> usize {
        self.lifted.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lifted_dim(&self) -> usize {
        self.lifted.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.nrows()
    }

    fn regressors(&self) -> DMatrix<f64> {
        let (v, n, m) = (self.lifted_dim(), self.action_dim(), self.len());
        let mut g = DMatrix::zeros(v + n, m);
        g.view_mut((0, 0), (v, m)).copy_from(&self.lifted);
        g.view_mut((v, 0), (n, m)).copy_from(&self.actions);
        g
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdmdFit {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub warnings: Vec<String>,
}

/// Least squares `targets ~ K regressors` through the normal equations with
/// ridge `1e-12 * trace(G G^T) / rows(G)`.
pub fn regress(targets: &DMatrix<f64>, regressors: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = regressors.nrows();
    let gram = regressors * regressors.transpose();
    let trace = gram.trace();
    if !(trace > 0.0) || !trace.is_finite() {
        return Err(Error::DegenerateFit("regressors are identically zero or non-finite".into()));
    }
    let ridge = 1e-12 * trace / p as f64;
    let system = gram + DMatrix::identity(p, p) * ridge;
    let rhs = regressors * targets.transpose();
    let solution = system
        .cholesky()
        .ok_or_else(|| Error::DegenerateFit("normal equations are not positive definite".into()))?
        .solve(&rhs);
    Ok(solution.transpose())
}

/// Fits `[A B]` minimizing `|Phi' - A Phi - B U|_F`.
pub fn fit(snapshots: &SnapshotSet) -> Result<EdmdFit> {
    let (v, n, m) = (snapshots.lifted_dim(), snapshots.action_dim(), snapshots.len());
    if m == 0 {
        return Err(Error::DegenerateFit("no snapshots".into()));
    }
    let mut warnings = Vec::new();
    if m < v + n {
        warnings.push(format!("{m} snapshots for {} unknowns per row; fit is underdetermined", v + n));
    }
    let k = regress(&snapshots.lifted_next, &snapshots.regressors())?;
    Ok(EdmdFit {
        a: k.columns(0, v).into_owned(),
        b: k.columns(v, n).into_owned(),
        warnings,
    })
}

/// Frobenius norm of `Phi' - A Phi - B U`.
pub fn fit_residual(snapshots: &SnapshotSet, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (&snapshots.lifted_next - a * &snapshots.lifted - b * &snapshots.actions).norm()
}

/// Lifts `initial` and propagates it through `A`, `B`; returns the lifted
/// states after each action.
pub fn edmd_predict(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    dict: &Dictionary,
    initial: &[f64],
    actions: &[Vec<f64>],
) -> Result<Vec<DVector<f64>>> {
    let z0 = DVector::from_vec(dict.lift(initial)?);
    let us: Vec<DVector<f64>> = actions.iter().map(|u| DVector::from_column_slice(u)).collect();
    rollout_recursive(a, b, &z0, &us)
}

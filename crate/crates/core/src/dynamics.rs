//! Analytic discrete-time forced systems used to generate ground-truth
//! trajectories: MountainCar, CartPole and a linear reference system.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MOUNTAIN_CAR_P1: f64 = 0.0015;
pub const MOUNTAIN_CAR_P2: f64 = 0.0025;
pub const MOUNTAIN_CAR_DT: f64 = 1.0;
pub const CART_POLE_DT: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SystemKind {
    MountainCar,
    CartPole,
    LinearRef,
}

impl SystemKind {
    pub fn name(self) -> &'static str {
        match self {
            SystemKind::MountainCar => "mountain_car",
            SystemKind::CartPole => "cart_pole",
            SystemKind::LinearRef => "linear_ref",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "mountain_car" => Ok(SystemKind::MountainCar),
            "cart_pole" => Ok(SystemKind::CartPole),
            "linear_ref" => Ok(SystemKind::LinearRef),
            other => Err(Error::Config(format!("unknown system '{other}'"))),
        }
    }
}

/// Closed interval per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Bounds {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if min.len() != max.len() || min.is_empty() {
            return Err(Error::Config("bounds need equal, non-zero lengths".into()));
        }
        if min.iter().zip(&max).any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::Config("bounds require min < max per coordinate".into()));
        }
        Ok(Self { min, max })
    }

    fn unbounded(dim: usize) -> Self {
        Self {
            min: vec![f64::NEG_INFINITY; dim],
            max: vec![f64::INFINITY; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn clamp(&self, v: &mut [f64]) {
        for ((x, lo), hi) in v.iter_mut().zip(&self.min).zip(&self.max) {
            *x = x.clamp(*lo, *hi);
        }
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.iter()
            .zip(&self.min)
            .zip(&self.max)
            .all(|((x, lo), hi)| *x >= *lo && *x <= *hi)
    }
}

/// Physical constants of a system.
#[derive(Debug, Clone, PartialEq)]
pub enum SystemParams {
    MountainCar { p1: f64, p2: f64 },
    CartPole { pole_half_length: f64, gravity: f64 },
    LinearRef { a: DMatrix<f64>, b: DMatrix<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub kind: SystemKind,
    pub dt: f64,
    pub params: SystemParams,
    pub state_bounds: Bounds,
    pub action_bounds: Bounds,
}

impl SystemSpec {
    pub fn mountain_car() -> Self {
        Self {
            kind: SystemKind::MountainCar,
            dt: MOUNTAIN_CAR_DT,
            params: SystemParams::MountainCar {
                p1: MOUNTAIN_CAR_P1,
                p2: MOUNTAIN_CAR_P2,
            },
            state_bounds: Bounds {
                min: vec![-1.2, -0.07],
                max: vec![0.6, 0.07],
            },
            action_bounds: Bounds {
                min: vec![-1.0],
                max: vec![1.0],
            },
        }
    }

    /// Cart position and pole angle are bounded; the velocities are not.
    pub fn cart_pole() -> Self {
        Self {
            kind: SystemKind::CartPole,
            dt: CART_POLE_DT,
            params: SystemParams::CartPole {
                pole_half_length: 0.5,
                gravity: 9.8,
            },
            state_bounds: Bounds {
                min: vec![-2.4, f64::NEG_INFINITY, -0.21, f64::NEG_INFINITY],
                max: vec![2.4, f64::INFINITY, 0.21, f64::INFINITY],
            },
            action_bounds: Bounds {
                min: vec![-10.0],
                max: vec![10.0],
            },
        }
    }

    /// `s' = A s + B u` with no clamping of the state.
    pub fn linear_ref(a: DMatrix<f64>, b: DMatrix<f64>, dt: f64) -> Result<Self> {
        let m = a.nrows();
        if m == 0 || a.ncols() != m {
            return Err(Error::Config(format!(
                "A_true must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != m || b.ncols() == 0 {
            return Err(Error::Config(format!(
                "B_true must be {m}xn with n >= 1, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {dt}")));
        }
        let n = b.ncols();
        Ok(Self {
            kind: SystemKind::LinearRef,
            dt,
            params: SystemParams::LinearRef { a, b },
            state_bounds: Bounds::unbounded(m),
            action_bounds: Bounds {
                min: vec![-1.0; n],
                max: vec![1.0; n],
            },
        })
    }

    /// Exact discretization of the damped oscillator with continuous
    /// eigenvalues -0.3 +/- 2i at dt = 0.05, forced on the velocity.
    pub fn linear_ref_default() -> Self {
        let dt = 0.05;
        let a = damped_rotation(-0.3, 2.0, dt);
        let b = DMatrix::from_column_slice(2, 1, &[0.0, dt]);
        Self::linear_ref(a, b, dt).expect("default linear system is valid")
    }

    pub fn by_kind(kind: SystemKind) -> Self {
        match kind {
            SystemKind::MountainCar => Self::mountain_car(),
            SystemKind::CartPole => Self::cart_pole(),
            SystemKind::LinearRef => Self::linear_ref_default(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_bounds.dim()
    }

    pub fn action_dim(&self) -> usize {
        self.action_bounds.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        Bounds::new(self.state_bounds.min.clone(), self.state_bounds.max.clone())?;
        Bounds::new(self.action_bounds.min.clone(), self.action_bounds.max.clone())?;
        let (m, n) = (self.state_dim(), self.action_dim());
        let expected = match &self.params {
            SystemParams::MountainCar { .. } => (2, 1),
            SystemParams::CartPole { .. } => (4, 1),
            SystemParams::LinearRef { a, b } => {
                if a.shape() != (m, m) || b.shape() != (m, n) {
                    return Err(Error::Config(format!(
                        "linear_ref matrices {:?}/{:?} disagree with bounds ({m}, {n})",
                        a.shape(),
                        b.shape()
                    )));
                }
                (m, n)
            }
        };
        if expected != (m, n) {
            return Err(Error::Config(format!(
                "{} expects dims {expected:?}, bounds give ({m}, {n})",
                self.kind.name()
            )));
        }
        Ok(())
    }

    /// Advances one step. Actions are clamped into the action bounds first.
    pub fn step(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim() || action.len() != self.action_dim() {
            return Err(Error::Shape(format!(
                "{} step expects state {} / action {}, got {} / {}",
                self.kind.name(),
                self.state_dim(),
                self.action_dim(),
                state.len(),
                action.len()
            )));
        }
        match &self.params {
            SystemParams::MountainCar { .. } => {
                let next = mountain_car_step([state[0], state[1]], action[0], self);
                Ok(next.to_vec())
            }
            SystemParams::CartPole { .. } => {
                let next = cart_pole_step([state[0], state[1], state[2], state[3]], action[0], self);
                Ok(next.to_vec())
            }
            SystemParams::LinearRef { .. } => linear_ref_step(state, action, self),
        }
    }

    fn initial_state(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self.kind {
            SystemKind::MountainCar => vec![rng.random_range(-0.6..-0.4), 0.0],
            SystemKind::CartPole => (0..4).map(|_| rng.random_range(-0.05..0.05)).collect(),
            SystemKind::LinearRef => (0..self.state_dim())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        }
    }
}

/// `exp(dt * [[re, im], [-im, re]])`, a rotation scaled by `exp(re * dt)`.
pub fn damped_rotation(re: f64, im: f64, dt: f64) -> DMatrix<f64> {
    let r = (re * dt).exp();
    let (s, c) = (im * dt).sin_cos();
    DMatrix::from_row_slice(2, 2, &[r * c, r * s, -r * s, r * c])
}

/// One MountainCar step. Velocity accumulates the applied force.
pub fn mountain_car_step(state: [f64; 2], u: f64, spec: &SystemSpec) -> [f64; 2] {
    let (p1, p2) = match spec.params {
        SystemParams::MountainCar { p1, p2 } => (p1, p2),
        _ => (MOUNTAIN_CAR_P1, MOUNTAIN_CAR_P2),
    };
    let b = &spec.state_bounds;
    let u = u.clamp(spec.action_bounds.min[0], spec.action_bounds.max[0]);
    let [x, v] = state;
    let mut v_next = (v + p1 * u - p2 * (3.0 * x).cos()).clamp(b.min[1], b.max[1]);
    if x <= b.min[0] && v_next < 0.0 {
        v_next = 0.0;
    }
    let x_next = (x + v_next * spec.dt).clamp(b.min[0], b.max[0]);
    [x_next, v_next]
}

/// Angular acceleration of the pole, dt factor included.
pub fn cart_pole_angular_acceleration(theta: f64, u: f64, spec: &SystemSpec) -> f64 {
    let (l, g) = match spec.params {
        SystemParams::CartPole {
            pole_half_length,
            gravity,
        } => (pole_half_length, gravity),
        _ => (0.5, 9.8),
    };
    3.0 * spec.dt / (4.0 * l) * (g * theta.sin() + u * theta.cos())
}

/// One explicit Euler CartPole step with `x_dd = u`.
pub fn cart_pole_step(state: [f64; 4], u: f64, spec: &SystemSpec) -> [f64; 4] {
    let u = u.clamp(spec.action_bounds.min[0], spec.action_bounds.max[0]);
    let [x, xd, th, thd] = state;
    let thdd = cart_pole_angular_acceleration(th, u, spec);
    let mut next = [
        x + xd * spec.dt,
        xd + u * spec.dt,
        th + thd * spec.dt,
        thd + thdd * spec.dt,
    ];
    spec.state_bounds.clamp(&mut next);
    next
}

pub fn linear_ref_step(state: &[f64], u: &[f64], spec: &SystemSpec) -> Result<Vec<f64>> {
    let SystemParams::LinearRef { a, b } = &spec.params else {
        return Err(Error::Config("linear_ref_step needs linear_ref params".into()));
    };
    if a.nrows() != a.ncols() || state.len() != a.ncols() || b.nrows() != a.nrows() || u.len() != b.ncols() {
        return Err(Error::Config(format!(
            "linear_ref dims: A {:?}, B {:?}, state {}, u {}",
            a.shape(),
            b.shape(),
            state.len(),
            u.len()
        )));
    }
    let next = a * DVector::from_column_slice(state) + b * DVector::from_column_slice(u);
    Ok(next.as_slice().to_vec())
}

/// Open-loop exploration policies.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    /// i.i.d. uniform in the action bounds.
    RandomUniform,
    /// `u = a sin(w k + phase)` per action coordinate, with `a`, `w`, `phase`
    /// drawn once per trajectory.
    Sinusoid,
    /// Fixed action rows, one per step.
    Scripted(Vec<Vec<f64>>),
}

impl Policy {
    /// Resolves a policy name. `scripted` reads its actions from `script`.
    pub fn from_name(name: &str, script: Option<&Path>) -> Result<Self> {
        match name {
            "random_uniform" => Ok(Policy::RandomUniform),
            "sinusoid" => Ok(Policy::Sinusoid),
            "scripted" => {
                let path = script
                    .ok_or_else(|| Error::Config("scripted policy needs an action CSV".into()))?;
                Ok(Policy::Scripted(read_action_csv(path)?))
            }
            other => Err(Error::Config(format!("unknown policy '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Policy::RandomUniform => "random_uniform",
            Policy::Sinusoid => "sinusoid",
            Policy::Scripted(_) => "scripted",
        }
    }
}

/// Parses an action CSV with header `u0,u1,...` and one action per row.
pub fn parse_action_csv(text: &str) -> std::result::Result<Vec<Vec<f64>>, String> {
    parse_indexed_csv(text, 'u')
}

/// Rows of a CSV whose header is `s0,s1,...`.
pub fn parse_state_csv(text: &str) -> std::result::Result<Vec<Vec<f64>>, String> {
    parse_indexed_csv(text, 's')
}

fn parse_indexed_csv(text: &str, prefix: char) -> std::result::Result<Vec<Vec<f64>>, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or("empty csv file")?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    for (i, c) in cols.iter().enumerate() {
        if *c != format!("{prefix}{i}") {
            return Err(format!("bad header column {i}: '{c}'"));
        }
    }
    lines
        .enumerate()
        .map(|(row, line)| {
            let vals = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| format!("row {}: {e}", row + 1))?;
            if vals.len() != cols.len() {
                return Err(format!("row {}: expected {} values", row + 1, cols.len()));
            }
            Ok(vals)
        })
        .collect()
}

pub fn read_action_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_action_csv(&text).map_err(|d| Error::format(path, d))
}

pub fn format_action_csv(actions: &[Vec<f64>], action_dim: usize) -> String {
    let mut out = (0..action_dim)
        .map(|i| format!("u{i}"))
        .collect::<Vec<_>>()
        .join(",");
    out.push('\n');
    for a in actions {
        let row: Vec<String> = a.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub dt: f64,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Steps `spec` from `initial` under a fixed action sequence.
pub fn simulate(spec: &SystemSpec, initial: &[f64], actions: &[Vec<f64>], seed: u64) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(actions.len() + 1);
    states.push(initial.to_vec());
    for u in actions {
        let next = spec.step(states.last().expect("non-empty"), u)?;
        states.push(next);
    }
    Ok(Trajectory {
        states,
        actions: actions.to_vec(),
        dt: spec.dt,
        seed,
    })
}

/// Rolls out `steps` actions of `policy` from a seeded initial state.
pub fn generate_trajectory(spec: &SystemSpec, policy: &Policy, steps: usize, seed: u64) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::Config("trajectory needs at least one step".into()));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial = spec.initial_state(&mut rng);
    let n = spec.action_dim();
    let lo = &spec.action_bounds.min;
    let hi = &spec.action_bounds.max;
    let actions: Vec<Vec<f64>> = match policy {
        Policy::RandomUniform => (0..steps)
            .map(|_| (0..n).map(|j| rng.random_range(lo[j]..=hi[j])).collect())
            .collect(),
        Policy::Sinusoid => {
            let shape: Vec<(f64, f64, f64)> = (0..n)
                .map(|j| {
                    let half = 0.5 * (hi[j] - lo[j]);
                    let amp = half * rng.random_range(0.5..=1.0);
                    let freq = rng.random_range(0.05..0.3);
                    let phase = rng.random_range(0.0..2.0 * PI);
                    (amp, freq, phase)
                })
                .collect();
            (0..steps)
                .map(|k| {
                    shape
                        .iter()
                        .enumerate()
                        .map(|(j, (amp, freq, phase))| {
                            let mid = 0.5 * (hi[j] + lo[j]);
                            (mid + amp * (freq * k as f64 + phase).sin()).clamp(lo[j], hi[j])
                        })
                        .collect()
                })
                .collect()
        }
        Policy::Scripted(rows) => {
            if rows.len() < steps {
                return Err(Error::Config(format!(
                    "scripted policy has {} rows, {steps} steps requested",
                    rows.len()
                )));
            }
            if let Some(bad) = rows.iter().find(|r| r.len() != n) {
                return Err(Error::Config(format!(
                    "scripted action has {} entries, system expects {n}",
                    bad.len()
                )));
            }
            rows[..steps].to_vec()
        }
    };
    simulate(spec, &initial, &actions, seed)
}

//! Multi-step Koopman objective and its mini-batch Adam training loop.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::koopman::KoopmanModel;
use crate::netcore::{sample_latent_backward, Adam, ArchConfig, EncoderMode, EncoderOutput, HeadActivation, Tape};
use crate::render::Episode;

/// `1 + tanh(tau * i)`: the up-weighting of step `i` in the multi-step losses.
pub fn aux_weight(tau: f64, i: usize) -> f64 {
    (1.0 + (tau * i as f64).tanh()).min(BELOW_TWO)
}

/// Largest double below 2; `1 + tanh` rounds up to 2 once `tanh` saturates.
const BELOW_TWO: f64 = 2.0 - f64::EPSILON;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha_linear: f64,
    pub alpha_recon: f64,
    pub alpha_pred: f64,
    pub alpha_l2: f64,
    pub tau_linear: f64,
    pub tau_pred: f64,
    pub horizon_recon: usize,
    pub horizon_linear: usize,
    pub horizon_pred: usize,
    pub latent_dim: usize,
    pub channels: usize,
    pub out_channels: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: EncoderMode,
    pub head: HeadActivation,
    pub rank_interval: usize,
    pub conv_channels: [usize; 2],
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha_linear: 0.3,
            alpha_recon: 1.0,
            alpha_pred: 1.0,
            alpha_l2: 5e-7,
            tau_linear: 0.0,
            tau_pred: 0.0,
            horizon_recon: 25,
            horizon_linear: 25,
            horizon_pred: 25,
            latent_dim: 32,
            channels: 3,
            out_channels: 3,
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 1000,
            seed: 0,
            mode: EncoderMode::Deterministic,
            head: HeadActivation::None,
            rank_interval: 10,
            conv_channels: [8, 16],
            hidden: 64,
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "alpha_linear",
    "alpha_recon",
    "alpha_pred",
    "alpha_l2",
    "tau_linear",
    "tau_pred",
    "horizon_recon",
    "horizon_linear",
    "horizon_pred",
    "latent_dim",
    "channels",
    "out_channels",
    "learning_rate",
    "batch_size",
    "epochs",
    "seed",
    "mode",
    "head",
    "rank_interval",
    "conv_channels",
    "hidden",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{value}`")))
}

impl TrainConfig {
    /// Longest window offset any loss touches.
    pub fn max_horizon(&self) -> usize {
        self.horizon_recon.max(self.horizon_linear).max(self.horizon_pred)
    }

    /// Observations per training window.
    pub fn window_len(&self) -> usize {
        self.max_horizon() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("key `{key}`: {why}")));
        for (key, v) in [
            ("horizon_recon", self.horizon_recon),
            ("horizon_linear", self.horizon_linear),
            ("horizon_pred", self.horizon_pred),
            ("latent_dim", self.latent_dim),
            ("channels", self.channels),
            ("out_channels", self.out_channels),
            ("batch_size", self.batch_size),
            ("rank_interval", self.rank_interval),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return bad(key, "must be >= 1");
            }
        }
        if self.conv_channels.contains(&0) {
            return bad("conv_channels", "must be >= 1");
        }
        if self.out_channels > self.channels {
            return bad("out_channels", "cannot exceed channels");
        }
        for (key, v) in [
            ("alpha_linear", self.alpha_linear),
            ("alpha_recon", self.alpha_recon),
            ("alpha_pred", self.alpha_pred),
            ("alpha_l2", self.alpha_l2),
            ("tau_linear", self.tau_linear),
            ("tau_pred", self.tau_pred),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, "must be finite and >= 0");
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if self.head == HeadActivation::Tanh && self.mode == EncoderMode::Variational {
            return bad("head", "tanh head requires the deterministic mode");
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", lineno + 1)));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "alpha_linear" => self.alpha_linear = parse_value(key, value)?,
            "alpha_recon" => self.alpha_recon = parse_value(key, value)?,
            "alpha_pred" => self.alpha_pred = parse_value(key, value)?,
            "alpha_l2" => self.alpha_l2 = parse_value(key, value)?,
            "tau_linear" => self.tau_linear = parse_value(key, value)?,
            "tau_pred" => self.tau_pred = parse_value(key, value)?,
            "horizon_recon" => self.horizon_recon = parse_value(key, value)?,
            "horizon_linear" => self.horizon_linear = parse_value(key, value)?,
            "horizon_pred" => self.horizon_pred = parse_value(key, value)?,
            "latent_dim" => self.latent_dim = parse_value(key, value)?,
            "channels" => self.channels = parse_value(key, value)?,
            "out_channels" => self.out_channels = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "rank_interval" => self.rank_interval = parse_value(key, value)?,
            "hidden" => self.hidden = parse_value(key, value)?,
            "mode" => {
                self.mode = EncoderMode::from_name(value).map_err(|_| Error::Config(format!("key `mode`: unknown mode `{value}`")))?
            }
            "head" => {
                self.head = HeadActivation::from_name(value).map_err(|_| Error::Config(format!("key `head`: unknown head `{value}`")))?
            }
            "conv_channels" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 2 {
                    return Err(Error::Config(format!("key `conv_channels`: expected two comma-separated sizes, got `{value}`")));
                }
                self.conv_channels = [parse_value(key, parts[0])?, parse_value(key, parts[1])?];
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let value = match *key {
                "alpha_linear" => format!("{:?}", self.alpha_linear),
                "alpha_recon" => format!("{:?}", self.alpha_recon),
                "alpha_pred" => format!("{:?}", self.alpha_pred),
                "alpha_l2" => format!("{:?}", self.alpha_l2),
                "tau_linear" => format!("{:?}", self.tau_linear),
                "tau_pred" => format!("{:?}", self.tau_pred),
                "horizon_recon" => self.horizon_recon.to_string(),
                "horizon_linear" => self.horizon_linear.to_string(),
                "horizon_pred" => self.horizon_pred.to_string(),
                "latent_dim" => self.latent_dim.to_string(),
                "channels" => self.channels.to_string(),
                "out_channels" => self.out_channels.to_string(),
                "learning_rate" => format!("{:?}", self.learning_rate),
                "batch_size" => self.batch_size.to_string(),
                "epochs" => self.epochs.to_string(),
                "seed" => self.seed.to_string(),
                "mode" => self.mode.name().to_string(),
                "head" => self.head.name().to_string(),
                "rank_interval" => self.rank_interval.to_string(),
                "conv_channels" => format!("{},{}", self.conv_channels[0], self.conv_channels[1]),
                "hidden" => self.hidden.to_string(),
                _ => unreachable!(),
            };
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    pub fn arch(&self, height: usize, width: usize) -> ArchConfig {
        ArchConfig {
            out_channels: self.out_channels,
            head: self.head,
            conv_channels: self.conv_channels,
            hidden: self.hidden,
            ..ArchConfig::new(self.channels, height, width, self.latent_dim, self.mode)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub linear: f64,
    pub recon: f64,
    pub pred: f64,
    pub l2: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(linear: f64, recon: f64, pred: f64, l2: f64, cfg: &TrainConfig) -> Self {
        Self {
            linear,
            recon,
            pred,
            l2,
            total: cfg.alpha_linear * linear + cfg.alpha_recon * recon + cfg.alpha_pred * pred + cfg.alpha_l2 * l2,
        }
    }

    fn is_finite(&self) -> bool {
        [self.linear, self.recon, self.pred, self.l2, self.total].iter().all(|v| v.is_finite())
    }
}

/// Consecutive observations `x_k ..= x_{k+L}` with the actions between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<DVector<f64>>,
}

impl Window {
    pub fn new(observations: Vec<Vec<f64>>, actions: Vec<DVector<f64>>) -> Result<Self> {
        if observations.is_empty() || actions.len() + 1 < observations.len() {
            return Err(Error::TooShort(format!(
                "window with {} observations needs {} actions, got {}",
                observations.len(),
                observations.len().saturating_sub(1),
                actions.len()
            )));
        }
        Ok(Self { observations, actions })
    }

    pub fn from_episode(episode: &Episode, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > episode.num_observations() {
            return Err(Error::TooShort(format!(
                "window {start}..{} exceeds {} observations",
                start + len,
                episode.num_observations()
            )));
        }
        let observations = (start..start + len)
            .map(|j| episode.observation(j).map(|o| o.pixels))
            .collect::<Result<Vec<_>>>()?;
        let actions = episode.actions[start..start + len - 1]
            .iter()
            .map(|u| DVector::from_column_slice(u))
            .collect();
        Ok(Self { observations, actions })
    }

    fn require(&self, observations: usize, what: &str) -> Result<()> {
        if self.observations.len() < observations || self.actions.len() + 1 < observations {
            return Err(Error::TooShort(format!(
                "{what} needs {observations} observations, window has {}",
                self.observations.len().min(self.actions.len() + 1)
            )));
        }
        Ok(())
    }
}

/// Per-window sampling noise for variational encoders, one vector per
/// encoded observation.
pub type WindowNoise = Vec<Vec<f64>>;

struct Terms {
    linear: f64,
    recon: f64,
    pred: f64,
}

/// Offsets into the flat parameter layout of [`KoopmanModel::flat_params`].
struct Layout {
    enc: usize,
    dec: usize,
    a: usize,
    total: usize,
}

impl Layout {
    fn of(model: &KoopmanModel) -> Self {
        let enc = model.encoder.param_count();
        let dec = model.decoder.param_count();
        let a = model.a.len();
        Self {
            enc,
            dec,
            a,
            total: enc + dec + a + model.b.len(),
        }
    }
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Raw loss terms of one window and, when `grad` is given, accumulates
/// `scale * d(weighted terms)/d(params)` into it.
fn window_terms(
    model: &KoopmanModel,
    window: &Window,
    noise: Option<&WindowNoise>,
    cfg: &TrainConfig,
    scale: f64,
    grad: Option<&mut [f64]>,
) -> Result<Terms> {
    let (p_rec, p_lin, p_pred) = (cfg.horizon_recon, cfg.horizon_linear, cfg.horizon_pred);
    let n_enc = p_rec.max(p_lin) + 1;
    let n_roll = p_lin.max(p_pred);
    window.require(n_enc.max(n_roll + 1), "objective")?;
    let dec_len = model.decoder.output_shape().numel();
    let target = |i: usize| -> Result<&[f64]> {
        let obs = &window.observations[i];
        if obs.len() < dec_len {
            return Err(Error::Shape(format!("decoder emits {dec_len} values, observation has {}", obs.len())));
        }
        Ok(&obs[obs.len() - dec_len..])
    };

    let mut enc_tapes: Vec<Tape> = Vec::with_capacity(n_enc);
    let mut log_vars: Vec<Vec<f64>> = Vec::with_capacity(n_enc);
    let mut phi: Vec<DVector<f64>> = Vec::with_capacity(n_enc);
    for i in 0..n_enc {
        let tape = model.encoder.forward(&window.observations[i])?;
        let out = EncoderOutput::from_head(model.mode, tape.output().to_vec());
        let z = match (&out, noise) {
            (EncoderOutput::Variational { .. }, Some(xi)) => {
                let xi = xi.get(i).ok_or_else(|| Error::Shape(format!("no noise for observation {i}")))?;
                crate::netcore::sample_latent(&out, xi)?
            }
            _ => out.mean().to_vec(),
        };
        if let EncoderOutput::Variational { log_var, .. } = out {
            log_vars.push(log_var);
        }
        phi.push(DVector::from_vec(z));
        enc_tapes.push(tape);
    }

    let mut z = Vec::with_capacity(n_roll + 1);
    z.push(phi[0].clone());
    for i in 1..=n_roll {
        let next = &model.a * &z[i - 1] + &model.b * &window.actions[i - 1];
        z.push(next);
    }

    let mut linear = 0.0;
    for i in 1..=p_lin {
        linear += aux_weight(cfg.tau_linear, i) * (&phi[i] - &z[i]).norm_squared();
    }
    linear /= p_lin as f64;

    let mut rec_tapes = Vec::with_capacity(p_rec + 1);
    let mut recon = 0.0;
    for i in 0..=p_rec {
        let tape = model.decoder.forward(phi[i].as_slice())?;
        recon += sq_dist(tape.output(), target(i)?);
        rec_tapes.push(tape);
    }
    recon /= (p_rec + 1) as f64;

    let mut pred_tapes = Vec::with_capacity(p_pred);
    let mut pred = 0.0;
    for i in 1..=p_pred {
        let tape = model.decoder.forward(z[i].as_slice())?;
        pred += aux_weight(cfg.tau_pred, i) * sq_dist(tape.output(), target(i)?);
        pred_tapes.push(tape);
    }
    pred /= p_pred as f64;

    let Some(grad) = grad else {
        return Ok(Terms { linear, recon, pred });
    };
    let layout = Layout::of(model);
    if grad.len() != layout.total {
        return Err(Error::Shape(format!("gradient buffer {} for {} parameters", grad.len(), layout.total)));
    }
    let (g_enc, rest) = grad.split_at_mut(layout.enc);
    let (g_dec, rest) = rest.split_at_mut(layout.dec);
    let (g_a, g_b) = rest.split_at_mut(layout.a);
    let v = model.latent_dim();
    let n = model.action_dim();

    let mut d_phi = vec![DVector::<f64>::zeros(v); n_enc];
    let mut d_z = vec![DVector::<f64>::zeros(v); n_roll + 1];

    if cfg.alpha_linear != 0.0 {
        for i in 1..=p_lin {
            let g = (&phi[i] - &z[i]) * (scale * cfg.alpha_linear * 2.0 * aux_weight(cfg.tau_linear, i) / p_lin as f64);
            d_phi[i] += &g;
            d_z[i] -= &g;
        }
    }
    if cfg.alpha_recon != 0.0 {
        let c = scale * cfg.alpha_recon * 2.0 / (p_rec + 1) as f64;
        for (i, tape) in rec_tapes.iter().enumerate() {
            let g_out: Vec<f64> = tape.output().iter().zip(target(i)?).map(|(d, y)| c * (d - y)).collect();
            let g_in = model.decoder.backward(tape, &g_out, g_dec)?;
            d_phi[i] += DVector::from_vec(g_in);
        }
    }
    if cfg.alpha_pred != 0.0 {
        for (k, tape) in pred_tapes.iter().enumerate() {
            let i = k + 1;
            let c = scale * cfg.alpha_pred * 2.0 * aux_weight(cfg.tau_pred, i) / p_pred as f64;
            let g_out: Vec<f64> = tape.output().iter().zip(target(i)?).map(|(d, y)| c * (d - y)).collect();
            let g_in = model.decoder.backward(tape, &g_out, g_dec)?;
            d_z[i] += DVector::from_vec(g_in);
        }
    }

    for i in (1..=n_roll).rev() {
        let (dzi, zp, u) = (&d_z[i], &z[i - 1], &window.actions[i - 1]);
        for r in 0..v {
            if dzi[r] == 0.0 {
                continue;
            }
            for c in 0..v {
                g_a[r * v + c] += dzi[r] * zp[c];
            }
            for c in 0..n {
                g_b[r * n + c] += dzi[r] * u[c];
            }
        }
        let back = model.a.tr_mul(dzi);
        d_z[i - 1] += back;
    }
    let dz0 = d_z[0].clone();
    d_phi[0] += dz0;

    for (i, tape) in enc_tapes.iter().enumerate() {
        if d_phi[i].iter().all(|&g| g == 0.0) {
            continue;
        }
        let head_grad = match (model.mode, noise) {
            (EncoderMode::Variational, Some(xi)) => sample_latent_backward(&log_vars[i], &xi[i], d_phi[i].as_slice()),
            (EncoderMode::Variational, None) => {
                let mut g = d_phi[i].as_slice().to_vec();
                g.resize(2 * v, 0.0);
                g
            }
            (EncoderMode::Deterministic, _) => d_phi[i].as_slice().to_vec(),
        };
        model.encoder.backward(tape, &head_grad, g_enc)?;
    }
    Ok(Terms { linear, recon, pred })
}

fn batch_terms(model: &KoopmanModel, windows: &[Window], cfg: &TrainConfig) -> Result<Terms> {
    if windows.is_empty() {
        return Err(Error::EmptyDataset("no windows".into()));
    }
    let mut acc = Terms {
        linear: 0.0,
        recon: 0.0,
        pred: 0.0,
    };
    for w in windows {
        let t = window_terms(model, w, None, cfg, 1.0, None)?;
        acc.linear += t.linear;
        acc.recon += t.recon;
        acc.pred += t.pred;
    }
    let m = windows.len() as f64;
    Ok(Terms {
        linear: acc.linear / m,
        recon: acc.recon / m,
        pred: acc.pred / m,
    })
}

fn with_horizons(cfg: &TrainConfig, recon: usize, linear: usize, pred: usize) -> TrainConfig {
    TrainConfig {
        horizon_recon: recon,
        horizon_linear: linear,
        horizon_pred: pred,
        ..cfg.clone()
    }
}

fn check_horizon(horizon: usize) -> Result<()> {
    if horizon == 0 {
        return Err(Error::Config("horizon must be >= 1".into()));
    }
    Ok(())
}

/// Batch mean of `(1/p_l) sum_i w_i |phi(x_i) - z_i|^2` with `z` the latent
/// rollout from `phi(x_0)`. Variational encoders use their mean.
pub fn linearity_loss(model: &KoopmanModel, windows: &[Window], tau: f64, horizon: usize) -> Result<f64> {
    check_horizon(horizon)?;
    let cfg = TrainConfig {
        tau_linear: tau,
        ..with_horizons(&TrainConfig::default(), 0, horizon, 0)
    };
    linear_only(model, windows, &cfg)
}

fn linear_only(model: &KoopmanModel, windows: &[Window], cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    for w in windows {
        let n = cfg.horizon_linear;
        w.require(n + 1, "linearity loss")?;
        let mut z = model.encode(&w.observations[0], None)?;
        let mut acc = 0.0;
        for i in 1..=n {
            z = &model.a * &z + &model.b * &w.actions[i - 1];
            let phi = model.encode(&w.observations[i], None)?;
            acc += aux_weight(cfg.tau_linear, i) * (phi - &z).norm_squared();
        }
        total += acc / n as f64;
    }
    if windows.is_empty() {
        return Err(Error::EmptyDataset("no windows".into()));
    }
    Ok(total / windows.len() as f64)
}

/// Batch mean of `(1/(p+1)) sum_{i=0..p} |x_i - dec(enc(x_i))|^2`.
pub fn reconstruction_loss(model: &KoopmanModel, windows: &[Window], horizon: usize) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::EmptyDataset("no windows".into()));
    }
    let dec_len = model.decoder.output_shape().numel();
    let mut total = 0.0;
    for w in windows {
        w.require(horizon + 1, "reconstruction loss")?;
        let mut acc = 0.0;
        for x in &w.observations[..=horizon] {
            let recon = model.decode(&model.encode(x, None)?)?;
            acc += sq_dist(&recon, &x[x.len() - dec_len..]);
        }
        total += acc / (horizon + 1) as f64;
    }
    Ok(total / windows.len() as f64)
}

/// Batch mean of `(1/p_p) sum_i w_i |x_i - dec(z_i)|^2`.
pub fn prediction_loss(model: &KoopmanModel, windows: &[Window], tau: f64, horizon: usize) -> Result<f64> {
    check_horizon(horizon)?;
    if windows.is_empty() {
        return Err(Error::EmptyDataset("no windows".into()));
    }
    let dec_len = model.decoder.output_shape().numel();
    let mut total = 0.0;
    for w in windows {
        w.require(horizon + 1, "prediction loss")?;
        let mut z = model.encode(&w.observations[0], None)?;
        let mut acc = 0.0;
        for i in 1..=horizon {
            z = &model.a * &z + &model.b * &w.actions[i - 1];
            let x = &w.observations[i];
            acc += aux_weight(tau, i) * sq_dist(&model.decode(&z)?, &x[x.len() - dec_len..]);
        }
        total += acc / horizon as f64;
    }
    Ok(total / windows.len() as f64)
}

pub fn l2_penalty(model: &KoopmanModel) -> f64 {
    model.flat_params().iter().map(|p| p * p).sum()
}

/// Weighted objective over a batch, evaluated at the encoder mean.
pub fn total_loss(model: &KoopmanModel, windows: &[Window], cfg: &TrainConfig) -> Result<LossBreakdown> {
    let t = batch_terms(model, windows, cfg)?;
    Ok(LossBreakdown::combine(t.linear, t.recon, t.pred, l2_penalty(model), cfg))
}

/// Objective and its gradient in the [`KoopmanModel::flat_params`] layout.
/// `noise[w]` supplies the reparameterization draws of window `w`.
pub fn loss_and_gradient(
    model: &KoopmanModel,
    windows: &[Window],
    noise: Option<&[WindowNoise]>,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    if windows.is_empty() {
        return Err(Error::EmptyDataset("no windows".into()));
    }
    if let Some(noise) = noise {
        if noise.len() != windows.len() {
            return Err(Error::Shape(format!("{} noise sets for {} windows", noise.len(), windows.len())));
        }
    }
    let layout = Layout::of(model);
    let scale = 1.0 / windows.len() as f64;
    let parts: Vec<Result<(Terms, Vec<f64>)>> = windows
        .par_iter()
        .enumerate()
        .map(|(k, w)| {
            let mut g = vec![0.0; layout.total];
            let t = window_terms(model, w, noise.map(|n| &n[k]), cfg, scale, Some(&mut g))?;
            Ok((t, g))
        })
        .collect();
    let mut grad = vec![0.0; layout.total];
    let (mut linear, mut recon, mut pred) = (0.0, 0.0, 0.0);
    for part in parts {
        let (t, g) = part?;
        linear += t.linear;
        recon += t.recon;
        pred += t.pred;
        for (acc, x) in grad.iter_mut().zip(&g) {
            *acc += x;
        }
    }
    let params = model.flat_params();
    let l2 = params.iter().map(|p| p * p).sum();
    if cfg.alpha_l2 != 0.0 {
        for (g, p) in grad.iter_mut().zip(&params) {
            *g += 2.0 * cfg.alpha_l2 * p;
        }
    }
    let breakdown = LossBreakdown::combine(linear * scale, recon * scale, pred * scale, l2, cfg);
    Ok((breakdown, grad))
}

/// One logged epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub rank: Option<usize>,
}

pub const LOG_HEADER: &str = "epoch,L_linear,L_recon,L_pred,l2,total,rank";

pub fn log_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in records {
        let rank = r.rank.map(|k| k.to_string()).unwrap_or_default();
        let l = &r.loss;
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?},{}",
            r.epoch, l.linear, l.recon, l.pred, l.l2, l.total, rank
        );
    }
    out
}

pub fn parse_log_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let bad = |detail: String| Error::format("<training log>", detail);
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(LOG_HEADER) {
        return Err(bad("missing header".into()));
    }
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(format!("row {}: expected 7 fields", k + 1)));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(format!("row {}: bad number `{s}`", k + 1)));
        let epoch = f[0].trim().parse().map_err(|_| bad(format!("row {}: bad epoch", k + 1)))?;
        let rank = match f[6].trim() {
            "" => None,
            s => Some(s.parse().map_err(|_| bad(format!("row {}: bad rank", k + 1)))?),
        };
        out.push(EpochRecord {
            epoch,
            loss: LossBreakdown {
                linear: num(f[1])?,
                recon: num(f[2])?,
                pred: num(f[3])?,
                l2: num(f[4])?,
                total: num(f[5])?,
            },
            rank,
        });
    }
    Ok(out)
}

/// Model, optimizer and epoch counter: everything needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: KoopmanModel,
    pub optimizer: Adam,
    /// Epochs completed so far.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(model: KoopmanModel, cfg: &TrainConfig) -> Self {
        let optimizer = Adam::new(cfg.learning_rate, model.param_count());
        Self {
            model,
            optimizer,
            epoch: 0,
        }
    }
}

/// Every `(episode, offset)` at which a window of `len` observations fits.
pub fn window_index(episodes: &[Episode], len: usize) -> Vec<(usize, usize)> {
    episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..(ep.num_observations() + 1).saturating_sub(len)).map(move |j| (e, j)))
        .collect()
}

fn check_episodes(episodes: &[Episode], cfg: &TrainConfig) -> Result<(usize, usize, usize)> {
    let first = episodes
        .first()
        .ok_or_else(|| Error::EmptyDataset("no episodes".into()))?;
    let (h, w) = first.frame_shape();
    let n = first.action_dim();
    for (k, ep) in episodes.iter().enumerate() {
        if ep.frame_shape() != (h, w) || ep.action_dim() != n {
            return Err(Error::Shape(format!("episode {k} differs in frame size or action dimension")));
        }
        if ep.channels != cfg.channels {
            return Err(Error::Config(format!(
                "episode {k} stacks {} frames, config expects channels = {}",
                ep.channels, cfg.channels
            )));
        }
    }
    Ok((h, w, n))
}

/// Fresh convolutional model sized for `episodes`.
pub fn initial_model(episodes: &[Episode], dt: f64, cfg: &TrainConfig) -> Result<KoopmanModel> {
    cfg.validate()?;
    let (h, w, n) = check_episodes(episodes, cfg)?;
    KoopmanModel::initialize(&cfg.arch(h, w), n, dt, cfg.seed)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Runs epochs `state.epoch .. cfg.epochs`, one Adam step per epoch on a
/// batch of windows drawn uniformly with replacement.
pub fn train_from(state: &mut TrainState, episodes: &[Episode], cfg: &TrainConfig) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    check_episodes(episodes, cfg)?;
    let len = cfg.window_len();
    let index = window_index(episodes, len);
    if index.is_empty() {
        return Err(Error::EmptyDataset(format!("no episode holds a window of {len} observations")));
    }
    state.optimizer.learning_rate = cfg.learning_rate;
    let v = state.model.latent_dim();
    let n_enc = cfg.horizon_recon.max(cfg.horizon_linear) + 1;
    let mut records = Vec::with_capacity(cfg.epochs.saturating_sub(state.epoch));
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut rng = epoch_rng(cfg.seed, epoch);
        let picks: Vec<(usize, usize)> = (0..cfg.batch_size).map(|_| index[rng.random_range(0..index.len())]).collect();
        let noise: Option<Vec<WindowNoise>> = (state.model.mode == EncoderMode::Variational).then(|| {
            (0..cfg.batch_size)
                .map(|_| (0..n_enc).map(|_| (0..v).map(|_| rng.sample(StandardNormal)).collect()).collect())
                .collect()
        });
        let windows = picks
            .iter()
            .map(|&(e, j)| Window::from_episode(&episodes[e], j, len))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grad) = loss_and_gradient(&state.model, &windows, noise.as_deref(), cfg)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                detail: format!("{loss:?}"),
            });
        }
        if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                epoch,
                detail: format!("gradient entry {k} is {}", grad[k]),
            });
        }
        let mut params = state.model.flat_params();
        state.optimizer.step(&mut params, &grad)?;
        state.model.set_flat_params(&params)?;
        state.epoch += 1;
        let rank = if state.epoch % cfg.rank_interval == 0 || state.epoch == cfg.epochs {
            Some(state.model.controllability()?.1)
        } else {
            None
        };
        records.push(EpochRecord { epoch, loss, rank });
    }
    Ok(records)
}

/// Trains a fresh model from the config seed.
pub fn train(episodes: &[Episode], dt: f64, cfg: &TrainConfig) -> Result<(TrainState, Vec<EpochRecord>)> {
    let mut state = TrainState::new(initial_model(episodes, dt, cfg)?, cfg);
    let log = train_from(&mut state, episodes, cfg)?;
    Ok((state, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{generate_trajectory, Policy, SystemSpec};
    use crate::netcore::{LayerSpec, Network, Shape};
    use crate::render::{render_episode, RenderConfig};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    /// Scalar model with `enc(x) = x`, `dec(z) = z`.
    fn scalar_model(a: f64, b: f64) -> KoopmanModel {
        let enc = Network::with_params(Shape::Vector(1), vec![LayerSpec::dense(1, 1)], vec![1.0, 0.0]).unwrap();
        let dec = Network::with_params(Shape::Vector(1), vec![LayerSpec::dense(1, 1)], vec![1.0, 0.0]).unwrap();
        KoopmanModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            enc,
            dec,
            EncoderMode::Deterministic,
            1.0,
        )
        .unwrap()
    }

    fn scalar_window(xs: &[f64], us: &[f64]) -> Window {
        Window::new(
            xs.iter().map(|&x| vec![x]).collect(),
            us.iter().map(|&u| DVector::from_element(1, u)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn aux_weight_values() {
        assert_eq!(aux_weight(0.0, 7), 1.0);
        assert!((aux_weight(0.03, 25) - 1.635149).abs() < 1e-6);
        assert!(aux_weight(1.0, 10_000) < 2.0 || aux_weight(1.0, 10_000) == 2.0);
        assert!(aux_weight(0.5, 30) < 2.0);
    }

    proptest! {
        #[test]
        fn aux_weight_bounded_and_monotone(tau in 0.0..1.0f64, i in 1usize..100) {
            let w = aux_weight(tau, i);
            prop_assert!((1.0..2.0).contains(&w));
            prop_assert!(aux_weight(tau, i + 1) >= w);
        }
    }

    #[test]
    fn linearity_loss_two_step_example() {
        let model = scalar_model(0.5, 1.0);
        // rollout from 1.0 with u = (0.6, 0.2) gives (1.1, 0.75)
        let exact_first = scalar_window(&[1.0, 1.1, 1.1], &[0.6, 0.2]);
        assert!((linearity_loss(&model, &[exact_first], 0.0, 2).unwrap() - 0.06125).abs() < 1e-12);
        let targets = scalar_window(&[1.0, 1.0, 1.1], &[0.6, 0.2]);
        assert!((linearity_loss(&model, &[targets], 0.0, 2).unwrap() - 0.06625).abs() < 1e-12);
    }

    #[test]
    fn linearity_loss_degenerate_cases() {
        let zero = KoopmanModel::new(
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            Network::with_params(Shape::Vector(1), vec![LayerSpec::dense(1, 1)], vec![0.0, 0.0]).unwrap(),
            Network::with_params(Shape::Vector(1), vec![LayerSpec::dense(1, 1)], vec![1.0, 0.0]).unwrap(),
            EncoderMode::Deterministic,
            1.0,
        )
        .unwrap();
        let w = scalar_window(&[3.0, -1.0, 2.0], &[1.0, 1.0]);
        assert_eq!(linearity_loss(&zero, &[w.clone()], 0.3, 2).unwrap(), 0.0);
        let exact = scalar_window(&[1.0, 1.1], &[0.6]);
        assert_eq!(linearity_loss(&scalar_model(0.5, 1.0), &[exact], 0.0, 1).unwrap(), 0.0);
        assert!(matches!(linearity_loss(&zero, &[w], 0.0, 3), Err(Error::TooShort(_))));
    }

    #[test]
    fn prediction_loss_scalar_example() {
        let model = scalar_model(0.8, 0.0);
        let w = scalar_window(&[1.0, 1.0], &[0.0]);
        assert!((prediction_loss(&model, &[w], 0.0, 1).unwrap() - 0.04).abs() < 1e-12);
    }

    #[test]
    fn constant_decoder_reconstruction() {
        // decoder ignores the latent and emits 0.5 on 4 pixels
        let enc = Network::with_params(Shape::Vector(4), vec![LayerSpec::dense(4, 1)], vec![1.0; 5]).unwrap();
        let dec_params = vec![0.0; 8];
        let dec = Network::with_params(Shape::Vector(1), vec![LayerSpec::dense(1, 4), LayerSpec::Sigmoid], dec_params).unwrap();
        let model = KoopmanModel::new(
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
            enc,
            dec,
            EncoderMode::Deterministic,
            1.0,
        )
        .unwrap();
        let w = Window::new(
            vec![vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0, 1.0]],
            vec![DVector::zeros(1)],
        )
        .unwrap();
        let loss = reconstruction_loss(&model, &[w.clone(), w.clone()], 1).unwrap();
        assert!((loss - 0.25 * 4.0).abs() < 1e-12);
    }

    fn tiny_pixel_setup(mode: EncoderMode) -> (KoopmanModel, Vec<Window>, TrainConfig) {
        let spec = SystemSpec::mountain_car();
        let rcfg = RenderConfig {
            height: 8,
            width: 8,
            channels: 2,
            ..RenderConfig::default()
        };
        let traj = generate_trajectory(&spec, &Policy::Sinusoid, 12, 3).unwrap();
        let ep = render_episode(&traj, &spec, &rcfg).unwrap();
        let cfg = TrainConfig {
            latent_dim: 4,
            channels: 2,
            out_channels: 1,
            horizon_recon: 2,
            horizon_linear: 3,
            horizon_pred: 2,
            tau_linear: 0.2,
            tau_pred: 0.1,
            alpha_l2: 1e-3,
            conv_channels: [2, 3],
            hidden: 6,
            mode,
            ..TrainConfig::default()
        };
        let model = initial_model(std::slice::from_ref(&ep), 1.0, &cfg).unwrap();
        let windows = vec![
            Window::from_episode(&ep, 0, cfg.window_len()).unwrap(),
            Window::from_episode(&ep, 5, cfg.window_len()).unwrap(),
        ];
        (model, windows, cfg)
    }

    fn gradient_check(mode: EncoderMode) {
        let (mut model, windows, cfg) = tiny_pixel_setup(mode);
        // jitter every value: zero biases put ReLU inputs exactly on the kink
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let jittered: Vec<f64> = model
            .flat_params()
            .iter()
            .map(|p| p + 0.05 * rand::Rng::sample::<f64, _>(&mut rng, StandardNormal))
            .collect();
        model.set_flat_params(&jittered).unwrap();
        model.a *= 0.9;
        let noise: Option<Vec<WindowNoise>> = (mode == EncoderMode::Variational).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            (0..windows.len())
                .map(|_| (0..4).map(|_| (0..4).map(|_| 0.3 * rand::Rng::sample::<f64, _>(&mut rng, StandardNormal)).collect()).collect())
                .collect()
        });
        let (_, grad) = loss_and_gradient(&model, &windows, noise.as_deref(), &cfg).unwrap();
        let base = model.flat_params();
        let eps = 1e-4;
        let mut worst: f64 = 0.0;
        for k in 0..base.len() {
            let mut probe = model.clone();
            let mut p = base.clone();
            p[k] += eps;
            probe.set_flat_params(&p).unwrap();
            let up = loss_and_gradient(&probe, &windows, noise.as_deref(), &cfg).unwrap().0.total;
            p[k] -= 2.0 * eps;
            probe.set_flat_params(&p).unwrap();
            let down = loss_and_gradient(&probe, &windows, noise.as_deref(), &cfg).unwrap().0.total;
            let fd = (up - down) / (2.0 * eps);
            let rel = (fd - grad[k]).abs() / (fd.abs().max(grad[k].abs()).max(1e-6));
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "{mode:?} worst relative error {worst:e}");
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        gradient_check(EncoderMode::Deterministic);
        gradient_check(EncoderMode::Variational);
    }

    #[test]
    fn breakdown_is_weighted_sum() {
        let (model, windows, cfg) = tiny_pixel_setup(EncoderMode::Deterministic);
        let b = total_loss(&model, &windows, &cfg).unwrap();
        let expect = cfg.alpha_linear * b.linear + cfg.alpha_recon * b.recon + cfg.alpha_pred * b.pred + cfg.alpha_l2 * b.l2;
        assert!((b.total - expect).abs() < 1e-12);
        assert!(b.linear >= 0.0 && b.recon >= 0.0 && b.pred >= 0.0 && b.l2 >= 0.0);
        let doubled = TrainConfig {
            alpha_linear: 2.0 * cfg.alpha_linear,
            ..cfg.clone()
        };
        let b2 = total_loss(&model, &windows, &doubled).unwrap();
        assert_eq!(b2.linear, b.linear);
        assert!((b2.total - b.total - cfg.alpha_linear * b.linear).abs() < 1e-12);
        let none = TrainConfig {
            alpha_linear: 0.0,
            alpha_recon: 0.0,
            alpha_pred: 0.0,
            alpha_l2: 0.0,
            ..cfg.clone()
        };
        assert_eq!(total_loss(&model, &windows, &none).unwrap().total, 0.0);
        // the batch loss and its gradient twin agree
        let (g, _) = loss_and_gradient(&model, &windows, None, &cfg).unwrap();
        assert!((g.total - b.total).abs() < 1e-12);
        // the individual operations agree with the breakdown
        let lin = linearity_loss(&model, &windows, cfg.tau_linear, cfg.horizon_linear).unwrap();
        let rec = reconstruction_loss(&model, &windows, cfg.horizon_recon).unwrap();
        let pred = prediction_loss(&model, &windows, cfg.tau_pred, cfg.horizon_pred).unwrap();
        assert!((lin - b.linear).abs() < 1e-12 && (rec - b.recon).abs() < 1e-12 && (pred - b.pred).abs() < 1e-12);
    }

    #[test]
    fn l2_only_single_parameter() {
        let model = scalar_model(0.0, 0.0);
        let mut m = model.clone();
        m.set_flat_params(&[0.0, 0.0, 0.0, 0.0, 0.7, 0.0]).unwrap();
        let cfg = TrainConfig {
            alpha_linear: 0.0,
            alpha_recon: 0.0,
            alpha_pred: 0.0,
            alpha_l2: 1.0,
            horizon_recon: 1,
            horizon_linear: 1,
            horizon_pred: 1,
            ..TrainConfig::default()
        };
        let w = scalar_window(&[0.1, 0.2], &[0.0]);
        assert!((total_loss(&m, &[w], &cfg).unwrap().total - 0.49).abs() < 1e-15);
    }

    #[test]
    fn batch_permutation_invariance() {
        let (model, mut windows, cfg) = tiny_pixel_setup(EncoderMode::Deterministic);
        let a = reconstruction_loss(&model, &windows, 2).unwrap();
        windows.reverse();
        let b = reconstruction_loss(&model, &windows, 2).unwrap();
        assert!((a - b).abs() < 1e-14);
        let _ = cfg;
    }

    #[test]
    fn config_round_trip_and_errors() {
        let cfg = TrainConfig {
            tau_linear: 0.03,
            mode: EncoderMode::Variational,
            conv_channels: [4, 6],
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let parsed = TrainConfig::parse("# comment\ntau_linear = 0.03\n\nepochs=5 # trailing\n").unwrap();
        assert_eq!(parsed.tau_linear, 0.03);
        assert_eq!(parsed.epochs, 5);
        assert_eq!(parsed.max_horizon(), 25);
        for (text, key) in [
            ("batch_size = many", "batch_size"),
            ("colour = blue", "colour"),
            ("horizon_pred = 0", "horizon_pred"),
            ("tau_pred = -1", "tau_pred"),
            ("mode = spiky", "mode"),
        ] {
            let err = TrainConfig::parse(text).unwrap_err().to_string();
            assert!(err.contains(key), "{err}");
        }
        assert!(TrainConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn log_round_trip() {
        let records = vec![
            EpochRecord {
                epoch: 0,
                loss: LossBreakdown::combine(0.1, 0.2, 0.3, 4.0, &TrainConfig::default()),
                rank: None,
            },
            EpochRecord {
                epoch: 1,
                loss: LossBreakdown::combine(1.0 / 3.0, 0.25, 0.125, 5.5, &TrainConfig::default()),
                rank: Some(3),
            },
        ];
        assert_eq!(parse_log_csv(&log_csv(&records)).unwrap(), records);
    }

    fn tiny_episodes() -> Vec<Episode> {
        let spec = SystemSpec::mountain_car();
        let rcfg = RenderConfig {
            height: 8,
            width: 8,
            channels: 2,
            ..RenderConfig::default()
        };
        (0..2)
            .map(|s| render_episode(&generate_trajectory(&spec, &Policy::Sinusoid, 10, s).unwrap(), &spec, &rcfg).unwrap())
            .collect()
    }

    fn tiny_cfg(mode: EncoderMode, epochs: usize) -> TrainConfig {
        TrainConfig {
            latent_dim: 3,
            channels: 2,
            out_channels: 2,
            horizon_recon: 3,
            horizon_linear: 3,
            horizon_pred: 3,
            conv_channels: [2, 2],
            hidden: 8,
            batch_size: 3,
            epochs,
            learning_rate: 1e-3,
            rank_interval: 2,
            mode,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let eps = tiny_episodes();
        for mode in [EncoderMode::Deterministic, EncoderMode::Variational] {
            let cfg = tiny_cfg(mode, 4);
            let (s1, log1) = train(&eps, 1.0, &cfg).unwrap();
            let (s2, log2) = train(&eps, 1.0, &cfg).unwrap();
            assert_eq!(log1, log2);
            assert_eq!(s1, s2);
            assert_eq!(log1.len(), 4);
            assert_eq!(log1.iter().map(|r| r.rank.is_some()).collect::<Vec<_>>(), vec![false, true, false, true]);

            let (mut half, first) = train(&eps, 1.0, &tiny_cfg(mode, 2)).unwrap();
            let rest = train_from(&mut half, &eps, &cfg).unwrap();
            assert_eq!(rest[0].epoch, 2);
            let joined: Vec<f64> = first.iter().chain(&rest).map(|r| r.loss.total).collect();
            let straight: Vec<f64> = log1.iter().map(|r| r.loss.total).collect();
            assert_eq!(joined, straight);
            assert_eq!(half, s1);
        }
    }

    #[test]
    fn training_errors() {
        let eps = tiny_episodes();
        let cfg = tiny_cfg(EncoderMode::Deterministic, 1);
        assert!(matches!(train(&[], 1.0, &cfg), Err(Error::EmptyDataset(_))));
        let long = TrainConfig {
            horizon_linear: 50,
            ..cfg.clone()
        };
        assert!(matches!(train(&eps, 1.0, &long), Err(Error::EmptyDataset(_))));
        let wrong_stack = TrainConfig { channels: 3, out_channels: 3, ..cfg.clone() };
        assert!(matches!(train(&eps, 1.0, &wrong_stack), Err(Error::Config(_))));
        let (mut state, _) = train(&eps, 1.0, &cfg).unwrap();
        state.model.a[(0, 0)] = f64::NAN;
        let more = TrainConfig { epochs: 2, ..cfg };
        assert!(matches!(train_from(&mut state, &eps, &more), Err(Error::NonFiniteLoss { epoch: 1, .. })));
    }

    #[test]
    fn window_index_counts_offsets() {
        let eps = tiny_episodes();
        // 11 frames, stack 2 -> 10 observations -> 7 windows of 4
        assert_eq!(window_index(&eps, 4).len(), 14);
        assert_eq!(window_index(&eps, 11).len(), 0);
    }
}

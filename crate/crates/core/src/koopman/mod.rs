//! The latent linear model `z_{k+1} = A z_k + B u_k` together with its
//! encoder/decoder pair, and the operator mathematics built on it.

mod control;
mod modes;
mod rollout;
mod spectrum;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use control::{controllability, controllability_matrix, numerical_rank};
pub use modes::{default_ridge, eigenfunctions, koopman_modes, koopman_modes_with_ridge};
pub use rollout::{rollout_closed_form, rollout_recursive};
pub use spectrum::{
    continuous_eigenvalue, eigenvalues, parse_spectrum_csv, spectrum, spectrum_csv, SpectralReport, SpectrumRow, C64,
    MAX_EIGENVECTOR_CONDITION, ZERO_EIGENVALUE,
};

use crate::error::{Error, Result};
use crate::netcore::{build_decoder, build_encoder, sample_latent, ArchConfig, EncoderMode, EncoderOutput, Network};

#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub encoder: Network,
    pub decoder: Network,
    pub mode: EncoderMode,
    pub dt: f64,
}

impl KoopmanModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        encoder: Network,
        decoder: Network,
        mode: EncoderMode,
        dt: f64,
    ) -> Result<Self> {
        let v = a.nrows();
        if v == 0 || a.ncols() != v || b.nrows() != v {
            return Err(Error::Shape(format!("A {:?} / B {:?}", a.shape(), b.shape())));
        }
        let head = match mode {
            EncoderMode::Deterministic => v,
            EncoderMode::Variational => 2 * v,
        };
        if encoder.output_shape().numel() != head {
            return Err(Error::Shape(format!(
                "encoder emits {} values, {} mode with latent {v} needs {head}",
                encoder.output_shape().numel(),
                mode.name()
            )));
        }
        if decoder.input_shape().numel() != v {
            return Err(Error::Shape(format!(
                "decoder consumes {} values, latent has {v}",
                decoder.input_shape().numel()
            )));
        }
        Ok(Self {
            a,
            b,
            encoder,
            decoder,
            mode,
            dt,
        })
    }

    /// Fresh model: standard encoder/decoder, `A = 0.99 I + U(+-0.01)`,
    /// `B = U(+-0.01)`.
    pub fn initialize(arch: &ArchConfig, action_dim: usize, dt: f64, seed: u64) -> Result<Self> {
        let encoder = build_encoder(arch, seed)?;
        let decoder = build_decoder(arch, seed.wrapping_add(1))?;
        Self::with_networks(encoder, decoder, arch.mode, arch.latent_dim, action_dim, dt, seed)
    }

    /// Wraps given networks with the standard `A`, `B` initialization.
    pub fn with_networks(
        encoder: Network,
        decoder: Network,
        mode: EncoderMode,
        latent_dim: usize,
        action_dim: usize,
        dt: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let a = DMatrix::from_fn(latent_dim, latent_dim, |i, j| {
            let noise = rng.random_range(-0.01..=0.01);
            if i == j {
                0.99 + noise
            } else {
                noise
            }
        });
        let b = DMatrix::from_fn(latent_dim, action_dim, |_, _| rng.random_range(-0.01..=0.01));
        Self::new(a, b, encoder, decoder, mode, dt)
    }

    pub fn latent_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn encoder_output(&self, obs: &[f64]) -> Result<EncoderOutput> {
        Ok(EncoderOutput::from_head(self.mode, self.encoder.predict(obs)?))
    }

    /// Latent state of an observation. Variational models sample with
    /// `noise` when given and return the mean otherwise.
    pub fn encode(&self, obs: &[f64], noise: Option<&[f64]>) -> Result<DVector<f64>> {
        let out = self.encoder_output(obs)?;
        let z = match (&out, noise) {
            (EncoderOutput::Variational { .. }, Some(xi)) => sample_latent(&out, xi)?,
            _ => out.mean().to_vec(),
        };
        Ok(DVector::from_vec(z))
    }

    pub fn decode(&self, latent: &DVector<f64>) -> Result<Vec<f64>> {
        self.decoder.predict(latent.as_slice())
    }

    pub fn rollout(&self, z0: &DVector<f64>, actions: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        rollout_recursive(&self.a, &self.b, z0, actions)
    }

    pub fn rollout_closed_form(&self, z0: &DVector<f64>, actions: &[DVector<f64>]) -> Result<DVector<f64>> {
        rollout_closed_form(&self.a, &self.b, z0, actions)
    }

    /// Spectrum of `A` with the controllability rank filled in.
    pub fn spectrum(&self) -> Result<SpectralReport> {
        let mut report = spectrum(&self.a, self.dt)?;
        report.controllability_rank = Some(self.controllability()?.1);
        Ok(report)
    }

    pub fn controllability(&self) -> Result<(DMatrix<f64>, usize)> {
        controllability(&self.a, &self.b)
    }

    /// Every trainable value: encoder, decoder, `A`, `B`.
    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count() + self.a.len() + self.b.len()
    }

    /// Flattened `[encoder, decoder, A (row-major), B (row-major)]`.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.encoder.params);
        out.extend_from_slice(&self.decoder.params);
        out.extend(self.a.transpose().iter());
        out.extend(self.b.transpose().iter());
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "flat vector has {} entries, model has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let (enc, rest) = flat.split_at(self.encoder.param_count());
        let (dec, rest) = rest.split_at(self.decoder.param_count());
        let (a, b) = rest.split_at(self.a.len());
        self.encoder.params.copy_from_slice(enc);
        self.decoder.params.copy_from_slice(dec);
        self.a = DMatrix::from_row_slice(self.a.nrows(), self.a.ncols(), a);
        self.b = DMatrix::from_row_slice(self.b.nrows(), self.b.ncols(), b);
        Ok(())
    }
}

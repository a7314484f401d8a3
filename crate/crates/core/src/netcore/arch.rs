//! Encoder/decoder builders and the variational sampling step.

use super::layer::{LayerSpec, Shape};
use super::network::Network;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EncoderMode {
    Deterministic,
    Variational,
}

impl EncoderMode {
    pub fn name(self) -> &'static str {
        match self {
            EncoderMode::Deterministic => "deterministic",
            EncoderMode::Variational => "variational",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "deterministic" | "dcknet" => Ok(EncoderMode::Deterministic),
            "variational" | "vcknet" => Ok(EncoderMode::Variational),
            other => Err(Error::Config(format!("unknown encoder mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum HeadActivation {
    #[default]
    None,
    Tanh,
}

impl HeadActivation {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(HeadActivation::None),
            "tanh" => Ok(HeadActivation::Tanh),
            other => Err(Error::Config(format!("unknown head activation '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadActivation::None => "none",
            HeadActivation::Tanh => "tanh",
        }
    }
}

/// Sizes of the convolutional encoder and its mirrored decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub latent_dim: usize,
    /// Decoder output channels.
    pub out_channels: usize,
    pub mode: EncoderMode,
    pub head: HeadActivation,
    pub conv_channels: [usize; 2],
    pub hidden: usize,
}

impl ArchConfig {
    pub fn new(channels: usize, height: usize, width: usize, latent_dim: usize, mode: EncoderMode) -> Self {
        Self {
            channels,
            height,
            width,
            latent_dim,
            out_channels: channels,
            mode,
            head: HeadActivation::None,
            conv_channels: [8, 16],
            hidden: 64,
        }
    }

    pub fn head_dim(&self) -> usize {
        match self.mode {
            EncoderMode::Deterministic => self.latent_dim,
            EncoderMode::Variational => 2 * self.latent_dim,
        }
    }

    fn bottleneck(&self) -> Result<Shape> {
        let probe = Network::zeros(Shape::image(self.channels, self.height, self.width), self.conv_stack())?;
        Ok(probe.output_shape())
    }

    fn conv_stack(&self) -> Vec<LayerSpec> {
        let [c1, c2] = self.conv_channels;
        vec![
            LayerSpec::conv2d(self.channels, c1, 4, 2, 1),
            LayerSpec::Relu,
            LayerSpec::conv2d(c1, c2, 4, 2, 1),
            LayerSpec::Relu,
        ]
    }

    fn check(&self) -> Result<()> {
        if self.latent_dim == 0 || self.channels == 0 || self.out_channels == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("degenerate architecture {self:?}")));
        }
        if self.head == HeadActivation::Tanh && self.mode == EncoderMode::Variational {
            return Err(Error::Config(
                "tanh head is only available for deterministic encoders".into(),
            ));
        }
        Ok(())
    }
}

/// `conv(s2)+ReLU x2 -> flatten -> dense+ReLU -> dense head [-> tanh]`.
pub fn build_encoder(cfg: &ArchConfig, seed: u64) -> Result<Network> {
    cfg.check()?;
    let flat = cfg.bottleneck()?.numel();
    let mut layers = cfg.conv_stack();
    layers.extend([
        LayerSpec::Flatten,
        LayerSpec::dense(flat, cfg.hidden),
        LayerSpec::Relu,
        LayerSpec::dense(cfg.hidden, cfg.head_dim()),
    ]);
    if cfg.head == HeadActivation::Tanh {
        layers.push(LayerSpec::Tanh);
    }
    Network::new(Shape::image(cfg.channels, cfg.height, cfg.width), layers, seed)
}

/// Mirror of the encoder ending in a sigmoid over `out_channels` planes.
pub fn build_decoder(cfg: &ArchConfig, seed: u64) -> Result<Network> {
    cfg.check()?;
    let bottleneck = cfg.bottleneck()?;
    let [c1, c2] = cfg.conv_channels;
    let layers = vec![
        LayerSpec::dense(cfg.latent_dim, cfg.hidden),
        LayerSpec::Relu,
        LayerSpec::dense(cfg.hidden, bottleneck.numel()),
        LayerSpec::Relu,
        LayerSpec::Reshape(bottleneck),
        LayerSpec::deconv2d(c2, c1, 4, 2, 1),
        LayerSpec::Relu,
        LayerSpec::deconv2d(c1, cfg.out_channels, 4, 2, 1),
        LayerSpec::Sigmoid,
    ];
    let net = Network::new(Shape::Vector(cfg.latent_dim), layers, seed)?;
    let want = Shape::image(cfg.out_channels, cfg.height, cfg.width);
    if net.output_shape() != want {
        return Err(Error::Shape(format!(
            "decoder cannot mirror {}x{}: produces {:?}",
            cfg.height,
            cfg.width,
            net.output_shape()
        )));
    }
    Ok(net)
}

/// Raw encoder head, split by mode.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderOutput {
    Deterministic(Vec<f64>),
    Variational { mean: Vec<f64>, log_var: Vec<f64> },
}

impl EncoderOutput {
    pub fn from_head(mode: EncoderMode, head: Vec<f64>) -> Self {
        match mode {
            EncoderMode::Deterministic => EncoderOutput::Deterministic(head),
            EncoderMode::Variational => {
                let mut mean = head;
                let log_var = mean.split_off(mean.len() / 2);
                EncoderOutput::Variational { mean, log_var }
            }
        }
    }

    /// The latent used at evaluation time (the mean for variational heads).
    pub fn mean(&self) -> &[f64] {
        match self {
            EncoderOutput::Deterministic(z) => z,
            EncoderOutput::Variational { mean, .. } => mean,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean().len()
    }
}

/// Reparameterized draw `mean + exp(log_var / 2) * noise`.
pub fn sample_latent(out: &EncoderOutput, noise: &[f64]) -> Result<Vec<f64>> {
    let EncoderOutput::Variational { mean, log_var } = out else {
        return Err(Error::NotVariational);
    };
    if noise.len() != mean.len() {
        return Err(Error::Shape(format!(
            "noise has {} entries, latent has {}",
            noise.len(),
            mean.len()
        )));
    }
    Ok(mean
        .iter()
        .zip(log_var)
        .zip(noise)
        .map(|((m, lv), xi)| m + (0.5 * lv).exp() * xi)
        .collect())
}

/// Pulls a latent gradient back to the head `[d mean, d log_var]`.
pub fn sample_latent_backward(log_var: &[f64], noise: &[f64], grad_latent: &[f64]) -> Vec<f64> {
    let mut head = grad_latent.to_vec();
    head.extend(
        grad_latent
            .iter()
            .zip(log_var)
            .zip(noise)
            .map(|((g, lv), xi)| g * xi * 0.5 * (0.5 * lv).exp()),
    );
    head
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn encoder_shapes() {
        let det = ArchConfig::new(3, 32, 32, 32, EncoderMode::Deterministic);
        assert_eq!(build_encoder(&det, 0).unwrap().output_shape(), Shape::Vector(32));
        let var = ArchConfig::new(3, 32, 32, 32, EncoderMode::Variational);
        assert_eq!(build_encoder(&var, 0).unwrap().output_shape(), Shape::Vector(64));
    }

    #[test]
    fn decoder_mirrors_encoder() {
        let cfg = ArchConfig::new(3, 32, 32, 32, EncoderMode::Deterministic);
        let enc = build_encoder(&cfg, 1).unwrap();
        let dec = build_decoder(&cfg, 2).unwrap();
        let x: Vec<f64> = (0..3 * 32 * 32).map(|i| (i % 7) as f64 / 7.0).collect();
        let out = dec.predict(&enc.predict(&x).unwrap()).unwrap();
        assert_eq!(dec.output_shape(), Shape::image(3, 32, 32));
        assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn infeasible_shapes_rejected() {
        let cfg = ArchConfig::new(3, 30, 30, 8, EncoderMode::Deterministic);
        assert!(build_decoder(&cfg, 0).is_err());
        let bad = ArchConfig {
            head: HeadActivation::Tanh,
            ..ArchConfig::new(3, 32, 32, 8, EncoderMode::Variational)
        };
        assert!(build_encoder(&bad, 0).is_err());
    }

    #[test]
    fn tanh_head_bounds_latent() {
        let cfg = ArchConfig {
            head: HeadActivation::Tanh,
            ..ArchConfig::new(1, 8, 8, 4, EncoderMode::Deterministic)
        };
        let enc = build_encoder(&cfg, 0).unwrap();
        let z = enc.predict(&[1.0; 64]).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn reparameterization_examples() {
        let out = EncoderOutput::Variational {
            mean: vec![0.5, -1.0],
            log_var: vec![0.3, 0.0],
        };
        assert_eq!(sample_latent(&out, &[0.0, 0.0]).unwrap(), vec![0.5, -1.0]);
        let unit = EncoderOutput::Variational {
            mean: vec![0.5, -1.0],
            log_var: vec![0.0, 0.0],
        };
        assert_eq!(sample_latent(&unit, &[1.0, 0.0]).unwrap(), vec![1.5, -1.0]);
        assert!(matches!(
            sample_latent(&EncoderOutput::Deterministic(vec![1.0]), &[0.0]),
            Err(Error::NotVariational)
        ));
    }

    #[test]
    fn reparameterization_mean_is_unbiased() {
        let out = EncoderOutput::Variational {
            mean: vec![0.7, -2.0],
            log_var: vec![(0.25f64).ln(), (4.0f64).ln()],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let xi: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
            let z = sample_latent(&out, &xi).unwrap();
            sum[0] += z[0];
            sum[1] += z[1];
        }
        for (j, sigma) in [0.5, 2.0].iter().enumerate() {
            let mean = sum[j] / n as f64;
            assert!((mean - out.mean()[j]).abs() < 4.0 * sigma / (n as f64).sqrt());
        }
    }

    #[test]
    fn sampling_gradient_matches_finite_differences() {
        let log_var = [0.4, -1.2];
        let noise = [0.8, -1.5];
        let g = [1.0, 2.0];
        let head = sample_latent_backward(&log_var, &noise, &g);
        let f = |m: [f64; 2], lv: [f64; 2]| -> f64 {
            let out = EncoderOutput::Variational {
                mean: m.to_vec(),
                log_var: lv.to_vec(),
            };
            sample_latent(&out, &noise).unwrap().iter().zip(g).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        for j in 0..2 {
            let mut up = log_var;
            let mut dn = log_var;
            up[j] += eps;
            dn[j] -= eps;
            let num = (f([0.0; 2], up) - f([0.0; 2], dn)) / (2.0 * eps);
            assert!((head[2 + j] - num).abs() < 1e-8);
            assert_eq!(head[j], g[j]);
        }
    }
}

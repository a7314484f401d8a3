//! Versioned little-endian binary checkpoints (`CKN1`).
//!
//! Layout: magic, version, mode, dims `(latent, action, c, c', h, w)`, dt,
//! epoch, encoder and decoder (seed, input shape, layer table, parameters),
//! `A` and `B` row-major, then an optional Adam state.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::koopman::KoopmanModel;
use crate::netcore::{Adam, ConvGeometry, EncoderMode, LayerSpec, Network, Shape};

pub const MAGIC: &[u8; 4] = b"CKN1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: KoopmanModel,
    /// Epochs completed when saved.
    pub epoch: usize,
    pub optimizer: Option<Adam>,
}

/// Frame geometry recorded alongside a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub latent: usize,
    pub action: usize,
    pub channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn of(model: &KoopmanModel) -> Self {
        let (channels, height, width) = match model.encoder.input_shape() {
            Shape::Image { channels, height, width } => (channels, height, width),
            Shape::Vector(n) => (1, 1, n),
        };
        let plane = (height * width).max(1);
        Self {
            latent: model.latent_dim(),
            action: model.action_dim(),
            channels,
            out_channels: model.decoder.output_shape().numel() / plane,
            height,
            width,
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|x| self.f64(*x));
    }
    fn shape(&mut self, s: Shape) {
        match s {
            Shape::Vector(n) => {
                self.u8(0);
                self.usize(n);
            }
            Shape::Image { channels, height, width } => {
                self.u8(1);
                [channels, height, width].iter().for_each(|v| self.usize(*v));
            }
        }
    }
    fn geometry(&mut self, g: &ConvGeometry) {
        [g.in_channels, g.out_channels, g.kernel, g.stride, g.padding]
            .iter()
            .for_each(|v| self.usize(*v));
    }
    fn layer(&mut self, l: &LayerSpec) {
        match l {
            LayerSpec::Dense { inputs, outputs } => {
                self.u8(0);
                self.usize(*inputs);
                self.usize(*outputs);
            }
            LayerSpec::Conv2d(g) => {
                self.u8(1);
                self.geometry(g);
            }
            LayerSpec::Deconv2d { geometry, output_padding } => {
                self.u8(2);
                self.geometry(geometry);
                self.usize(*output_padding);
            }
            LayerSpec::Relu => self.u8(3),
            LayerSpec::Tanh => self.u8(4),
            LayerSpec::Sigmoid => self.u8(5),
            LayerSpec::Flatten => self.u8(6),
            LayerSpec::Reshape(s) => {
                self.u8(7);
                self.shape(*s);
            }
        }
    }
    fn network(&mut self, net: &Network) {
        self.u64(net.seed);
        self.shape(net.input_shape());
        self.usize(net.layers().len());
        net.layers().iter().for_each(|l| self.layer(l));
        self.f64s(&net.params);
    }
    fn matrix(&mut self, m: &DMatrix<f64>) {
        self.usize(m.nrows());
        self.usize(m.ncols());
        m.transpose().iter().for_each(|x| self.f64(*x));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

/// Upper bound on any single count, to reject garbage before allocating.
const MAX_COUNT: u64 = 1 << 32;

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> std::result::Result<usize, String> {
        let v = self.u64()?;
        if v > MAX_COUNT {
            return Err(format!("implausible count {v} at byte {}", self.pos - 8));
        }
        Ok(v as usize)
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> std::result::Result<Vec<f64>, String> {
        let n = self.usize()?;
        if n.saturating_mul(8) > self.bytes.len() - self.pos {
            return Err(format!("payload of {n} values exceeds file"));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn shape(&mut self) -> std::result::Result<Shape, String> {
        match self.u8()? {
            0 => Ok(Shape::Vector(self.usize()?)),
            1 => Ok(Shape::Image {
                channels: self.usize()?,
                height: self.usize()?,
                width: self.usize()?,
            }),
            t => Err(format!("unknown shape tag {t}")),
        }
    }
    fn geometry(&mut self) -> std::result::Result<ConvGeometry, String> {
        Ok(ConvGeometry {
            in_channels: self.usize()?,
            out_channels: self.usize()?,
            kernel: self.usize()?,
            stride: self.usize()?,
            padding: self.usize()?,
        })
    }
    fn layer(&mut self) -> std::result::Result<LayerSpec, String> {
        Ok(match self.u8()? {
            0 => LayerSpec::Dense {
                inputs: self.usize()?,
                outputs: self.usize()?,
            },
            1 => LayerSpec::Conv2d(self.geometry()?),
            2 => LayerSpec::Deconv2d {
                geometry: self.geometry()?,
                output_padding: self.usize()?,
            },
            3 => LayerSpec::Relu,
            4 => LayerSpec::Tanh,
            5 => LayerSpec::Sigmoid,
            6 => LayerSpec::Flatten,
            7 => LayerSpec::Reshape(self.shape()?),
            t => return Err(format!("unknown layer tag {t}")),
        })
    }
    fn network(&mut self) -> std::result::Result<Network, String> {
        let seed = self.u64()?;
        let input = self.shape()?;
        let count = self.usize()?;
        let layers = (0..count).map(|_| self.layer()).collect::<std::result::Result<Vec<_>, _>>()?;
        let params = self.f64s()?;
        let mut net = Network::with_params(input, layers, params).map_err(|e| e.to_string())?;
        net.seed = seed;
        Ok(net)
    }
    fn matrix(&mut self) -> std::result::Result<DMatrix<f64>, String> {
        let (r, c) = (self.usize()?, self.usize()?);
        if r.saturating_mul(c).saturating_mul(8) > self.bytes.len() - self.pos {
            return Err(format!("{r}x{c} matrix exceeds file"));
        }
        let data = (0..r * c).map(|_| self.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(DMatrix::from_row_slice(r, c, &data))
    }
}

impl Checkpoint {
    pub fn new(model: KoopmanModel, epoch: usize, optimizer: Option<Adam>) -> Self {
        Self { model, epoch, optimizer }
    }

    pub fn dims(&self) -> Dims {
        Dims::of(&self.model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u8(match self.model.mode {
            EncoderMode::Deterministic => 0,
            EncoderMode::Variational => 1,
        });
        let d = self.dims();
        [d.latent, d.action, d.channels, d.out_channels, d.height, d.width]
            .iter()
            .for_each(|v| w.usize(*v));
        w.f64(self.model.dt);
        w.usize(self.epoch);
        w.network(&self.model.encoder);
        w.network(&self.model.decoder);
        w.matrix(&self.model.a);
        w.matrix(&self.model.b);
        match &self.optimizer {
            None => w.u8(0),
            Some(adam) => {
                w.u8(1);
                w.f64(adam.learning_rate);
                w.f64(adam.beta1);
                w.f64(adam.beta2);
                w.f64(adam.epsilon);
                w.u64(adam.t);
                w.f64s(&adam.m);
                w.f64s(&adam.v);
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("not a CKN1 checkpoint".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let mode = match r.u8()? {
            0 => EncoderMode::Deterministic,
            1 => EncoderMode::Variational,
            t => return Err(format!("unknown mode flag {t}")),
        };
        let stored = Dims {
            latent: r.usize()?,
            action: r.usize()?,
            channels: r.usize()?,
            out_channels: r.usize()?,
            height: r.usize()?,
            width: r.usize()?,
        };
        let dt = r.f64()?;
        let epoch = r.usize()?;
        let encoder = r.network()?;
        let decoder = r.network()?;
        let a = r.matrix()?;
        let b = r.matrix()?;
        let model = KoopmanModel::new(a, b, encoder, decoder, mode, dt).map_err(|e| e.to_string())?;
        if Dims::of(&model) != stored {
            return Err(format!("header dims {stored:?} disagree with payload {:?}", Dims::of(&model)));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let mut adam = Adam::new(r.f64()?, 0);
                adam.beta1 = r.f64()?;
                adam.beta2 = r.f64()?;
                adam.epsilon = r.f64()?;
                adam.t = r.u64()?;
                adam.m = r.f64s()?;
                adam.v = r.f64s()?;
                if adam.m.len() != model.param_count() || adam.v.len() != model.param_count() {
                    return Err("optimizer state does not match the parameter count".into());
                }
                Some(adam)
            }
            t => return Err(format!("unknown optimizer flag {t}")),
        };
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self { model, epoch, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|d| Error::format(path, d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{ArchConfig, HeadActivation};
    use proptest::prelude::*;

    fn model(mode: EncoderMode, head: HeadActivation, seed: u64) -> KoopmanModel {
        let arch = ArchConfig {
            conv_channels: [2, 3],
            hidden: 5,
            head,
            out_channels: 1,
            ..ArchConfig::new(2, 8, 8, 3, mode)
        };
        KoopmanModel::initialize(&arch, 2, 0.25, seed).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for (mode, head) in [
            (EncoderMode::Deterministic, HeadActivation::None),
            (EncoderMode::Deterministic, HeadActivation::Tanh),
            (EncoderMode::Variational, HeadActivation::None),
        ] {
            let m = model(mode, head, 3);
            let mut adam = Adam::new(3e-4, m.param_count());
            let mut p = m.flat_params();
            let g = vec![0.1; p.len()];
            adam.step(&mut p, &g).unwrap();
            for ckpt in [Checkpoint::new(m.clone(), 7, Some(adam)), Checkpoint::new(m, 0, None)] {
                let bytes = ckpt.to_bytes();
                assert_eq!(&bytes[..4], MAGIC);
                let back = Checkpoint::from_bytes(&bytes).unwrap();
                assert_eq!(back, ckpt);
                assert_eq!(back.to_bytes(), bytes);
            }
        }
    }

    #[test]
    fn dims_are_recorded() {
        let d = Checkpoint::new(model(EncoderMode::Deterministic, HeadActivation::None, 1), 0, None).dims();
        assert_eq!(
            d,
            Dims {
                latent: 3,
                action: 2,
                channels: 2,
                out_channels: 1,
                height: 8,
                width: 8
            }
        );
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = Checkpoint::new(model(EncoderMode::Variational, HeadActivation::None, 2), 1, None).to_bytes();
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(Checkpoint::from_bytes(&version).unwrap_err().contains("version"));
        let mut dims = bytes;
        dims[9] = 4; // latent dim in the header
        assert!(Checkpoint::from_bytes(&dims).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = Checkpoint::new(model(EncoderMode::Deterministic, HeadActivation::None, 4), 3, None);
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
        assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn arbitrary_values_round_trip(seed in 0u64..10_000, scale in -1e300..1e300f64, epoch in 0usize..1_000_000) {
            let mut m = model(EncoderMode::Deterministic, HeadActivation::None, seed);
            m.a *= scale;
            m.b[(0, 1)] = f64::MIN_POSITIVE;
            m.decoder.params[0] = -0.0;
            let ckpt = Checkpoint::new(m, epoch, None);
            let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), ckpt.to_bytes());
        }
    }
}

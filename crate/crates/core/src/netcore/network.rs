use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{self, Dims};
use super::layer::{LayerSpec, Shape};
use crate::error::{Error, Result};

/// A feed-forward stack of layers with all trainable values in one flat
/// vector. Each parameterized layer stores its weights followed by its biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Shape,
    layers: Vec<LayerSpec>,
    /// `shapes[i]` is the input of layer `i`; the last entry is the output.
    shapes: Vec<Shape>,
    offsets: Vec<Range<usize>>,
    pub params: Vec<f64>,
    pub seed: u64,
}

/// Activations recorded by [`Network::forward`]: the network input followed
/// by every layer output.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    activations: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("tape holds the input at least")
    }

    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Network {
    /// Shape-checks the stack and initializes weights uniformly in
    /// `+-sqrt(6 / (fan_in + fan_out))`, biases at zero.
    pub fn new(input_shape: Shape, layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(input_shape, layers)?;
        net.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (layer, range) in net.layers.iter().zip(&net.offsets) {
            if let Some((fan_in, fan_out)) = layer.fans() {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = layer.weight_count();
                for p in &mut net.params[range.start..range.start + weights] {
                    *p = rng.random_range(-limit..=limit);
                }
            }
        }
        Ok(net)
    }

    /// Same layout as [`Network::new`] with every parameter zero.
    pub fn zeros(input_shape: Shape, layers: Vec<LayerSpec>) -> Result<Self> {
        let mut shapes = Vec::with_capacity(layers.len() + 1);
        shapes.push(input_shape);
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for layer in &layers {
            let next = layer.output_shape(*shapes.last().expect("non-empty"))?;
            shapes.push(next);
            let n = layer.param_count();
            offsets.push(total..total + n);
            total += n;
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
            offsets,
            params: vec![0.0; total],
            seed: 0,
        })
    }

    pub fn with_params(input_shape: Shape, layers: Vec<LayerSpec>, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(input_shape, layers)?;
        if params.len() != net.params.len() {
            return Err(Error::Shape(format!(
                "layer table implies {} parameters, payload has {}",
                net.params.len(),
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn output_shape(&self) -> Shape {
        *self.shapes.last().expect("non-empty")
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn layer_params(&self, layer: usize) -> &[f64] {
        &self.params[self.offsets[layer].clone()]
    }

    pub fn layer_params_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.offsets[layer].clone();
        &mut self.params[r]
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_shape.numel() {
            return Err(Error::Shape(format!(
                "network expects {} inputs ({:?}), got {}",
                self.input_shape.numel(),
                self.input_shape,
                input.len()
            )));
        }
        Ok(())
    }

    fn dims(&self, i: usize) -> Dims {
        let (Shape::Image { height: in_h, width: in_w, .. }, Shape::Image { height: out_h, width: out_w, .. }) =
            (self.shapes[i], self.shapes[i + 1])
        else {
            unreachable!("convolution layers map images to images")
        };
        Dims { in_h, in_w, out_h, out_w }
    }

    fn layer_forward(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let p = &self.params[self.offsets[i].clone()];
        match self.layers[i] {
            LayerSpec::Dense { inputs, outputs } => {
                let (w, b) = p.split_at(inputs * outputs);
                (0..outputs)
                    .map(|o| {
                        let row = &w[o * inputs..(o + 1) * inputs];
                        b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .collect()
            }
            LayerSpec::Conv2d(g) => {
                let (w, b) = p.split_at(g.weight_count());
                let mut out = vec![0.0; self.shapes[i + 1].numel()];
                conv::conv_forward(&g, &self.dims(i), x, w, b, &mut out);
                out
            }
            LayerSpec::Deconv2d { geometry: g, .. } => {
                let (w, b) = p.split_at(g.weight_count());
                let mut out = vec![0.0; self.shapes[i + 1].numel()];
                conv::deconv_forward(&g, &self.dims(i), x, w, b, &mut out);
                out
            }
            LayerSpec::Relu => x.iter().map(|v| v.max(0.0)).collect(),
            LayerSpec::Tanh => x.iter().map(|v| v.tanh()).collect(),
            LayerSpec::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            LayerSpec::Flatten | LayerSpec::Reshape(_) => x.to_vec(),
        }
    }

    /// Evaluates the network without recording intermediates.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        for i in 0..self.layers.len() {
            x = self.layer_forward(i, &x);
        }
        Ok(x)
    }

    /// Evaluates the network and records every activation for [`Network::backward`].
    pub fn forward(&self, input: &[f64]) -> Result<Tape> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        for i in 0..self.layers.len() {
            let next = self.layer_forward(i, activations.last().expect("non-empty"));
            activations.push(next);
        }
        Ok(Tape { activations })
    }

    /// Reverse pass. Parameter gradients are *added* into `grad_params`
    /// (length [`Network::param_count`]); the input gradient is returned.
    pub fn backward(&self, tape: &Tape, grad_output: &[f64], grad_params: &mut [f64]) -> Result<Vec<f64>> {
        if tape.activations.len() != self.layers.len() + 1
            || tape
                .activations
                .iter()
                .zip(&self.shapes)
                .any(|(a, s)| a.len() != s.numel())
        {
            return Err(Error::MissingCache);
        }
        if grad_output.len() != self.output_shape().numel() {
            return Err(Error::Shape(format!(
                "output gradient has {} entries, network emits {}",
                grad_output.len(),
                self.output_shape().numel()
            )));
        }
        if grad_params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "gradient buffer has {} entries, network has {} parameters",
                grad_params.len(),
                self.params.len()
            )));
        }
        let mut g = grad_output.to_vec();
        for i in (0..self.layers.len()).rev() {
            let x = &tape.activations[i];
            let y = &tape.activations[i + 1];
            let range = self.offsets[i].clone();
            let p = &self.params[range.clone()];
            let gp = &mut grad_params[range];
            g = match self.layers[i] {
                LayerSpec::Dense { inputs, outputs } => {
                    let (w, _) = p.split_at(inputs * outputs);
                    let (gw, gb) = gp.split_at_mut(inputs * outputs);
                    let mut gx = vec![0.0; inputs];
                    for o in 0..outputs {
                        let go = g[o];
                        gb[o] += go;
                        if go == 0.0 {
                            continue;
                        }
                        let row = &w[o * inputs..(o + 1) * inputs];
                        let grow = &mut gw[o * inputs..(o + 1) * inputs];
                        for j in 0..inputs {
                            grow[j] += go * x[j];
                            gx[j] += go * row[j];
                        }
                    }
                    gx
                }
                LayerSpec::Conv2d(geom) => {
                    let (w, _) = p.split_at(geom.weight_count());
                    let (gw, gb) = gp.split_at_mut(geom.weight_count());
                    let mut gx = vec![0.0; x.len()];
                    conv::conv_backward(&geom, &self.dims(i), x, w, &g, gw, gb, &mut gx);
                    gx
                }
                LayerSpec::Deconv2d { geometry: geom, .. } => {
                    let (w, _) = p.split_at(geom.weight_count());
                    let (gw, gb) = gp.split_at_mut(geom.weight_count());
                    let mut gx = vec![0.0; x.len()];
                    conv::deconv_backward(&geom, &self.dims(i), x, w, &g, gw, gb, &mut gx);
                    gx
                }
                LayerSpec::Relu => g.iter().zip(x).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect(),
                LayerSpec::Tanh => g.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect(),
                LayerSpec::Sigmoid => g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect(),
                LayerSpec::Flatten | LayerSpec::Reshape(_) => g,
            };
        }
        Ok(g)
    }
}

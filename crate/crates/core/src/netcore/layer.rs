use crate::error::{Error, Result};

/// Tensor shape flowing between layers. Images are channel-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Vector(usize),
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl Shape {
    pub fn image(channels: usize, height: usize, width: usize) -> Self {
        Shape::Image {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        match *self {
            Shape::Vector(n) => n,
            Shape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }
}

/// Square-kernel 2-D convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel
    }

    fn check(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Shape(format!("invalid convolution geometry {self:?}")));
        }
        Ok(())
    }

    /// Output extent of a strided convolution along one axis.
    pub fn conv_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::Shape(format!(
                "kernel {} exceeds padded extent {padded}",
                self.kernel
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of a transposed convolution along one axis.
    pub fn deconv_extent(&self, input: usize, output_padding: usize) -> Result<usize> {
        let full = (input - 1) * self.stride + self.kernel + output_padding;
        if input == 0 || full <= 2 * self.padding {
            return Err(Error::Shape(format!(
                "transposed convolution {self:?} collapses extent {input}"
            )));
        }
        Ok(full - 2 * self.padding)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Conv2d(ConvGeometry),
    /// Transposed convolution. Weights are laid out `[in][out][k][k]`, so a
    /// deconvolution sharing a convolution's weight array is its adjoint.
    Deconv2d { geometry: ConvGeometry, output_padding: usize },
    Relu,
    Tanh,
    Sigmoid,
    Flatten,
    Reshape(Shape),
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense { inputs, outputs }
    }

    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv2d(ConvGeometry::new(in_channels, out_channels, kernel, stride, padding))
    }

    pub fn deconv2d(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Deconv2d {
            geometry: ConvGeometry::new(in_channels, out_channels, kernel, stride, padding),
            output_padding: 0,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            LayerSpec::Dense { inputs, outputs } => inputs * outputs + outputs,
            LayerSpec::Conv2d(g) => g.weight_count() + g.out_channels,
            LayerSpec::Deconv2d { geometry, .. } => geometry.weight_count() + geometry.out_channels,
            _ => 0,
        }
    }

    /// Fan-in and fan-out used by the uniform initializer.
    pub(crate) fn fans(&self) -> Option<(usize, usize)> {
        match self {
            LayerSpec::Dense { inputs, outputs } => Some((*inputs, *outputs)),
            LayerSpec::Conv2d(g) | LayerSpec::Deconv2d { geometry: g, .. } => {
                let k2 = g.kernel * g.kernel;
                Some((g.in_channels * k2, g.out_channels * k2))
            }
            _ => None,
        }
    }

    /// Number of weights (excluding biases).
    pub(crate) fn weight_count(&self) -> usize {
        match self {
            LayerSpec::Dense { inputs, outputs } => inputs * outputs,
            LayerSpec::Conv2d(g) | LayerSpec::Deconv2d { geometry: g, .. } => g.weight_count(),
            _ => 0,
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let mismatch = |what: &str| Error::Shape(format!("{self:?} cannot consume {input:?}: {what}"));
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if inputs == 0 || outputs == 0 {
                    return Err(mismatch("dense widths must be >= 1"));
                }
                match input {
                    Shape::Vector(n) if n == inputs => Ok(Shape::Vector(outputs)),
                    _ => Err(mismatch("expected a vector of matching width")),
                }
            }
            LayerSpec::Conv2d(g) => {
                g.check()?;
                match input {
                    Shape::Image {
                        channels,
                        height,
                        width,
                    } if channels == g.in_channels => Ok(Shape::image(
                        g.out_channels,
                        g.conv_extent(height)?,
                        g.conv_extent(width)?,
                    )),
                    _ => Err(mismatch("expected an image with matching channels")),
                }
            }
            LayerSpec::Deconv2d {
                geometry: g,
                output_padding,
            } => {
                g.check()?;
                if output_padding >= g.stride {
                    return Err(mismatch("output padding must be smaller than the stride"));
                }
                match input {
                    Shape::Image {
                        channels,
                        height,
                        width,
                    } if channels == g.in_channels => Ok(Shape::image(
                        g.out_channels,
                        g.deconv_extent(height, output_padding)?,
                        g.deconv_extent(width, output_padding)?,
                    )),
                    _ => Err(mismatch("expected an image with matching channels")),
                }
            }
            LayerSpec::Relu | LayerSpec::Tanh | LayerSpec::Sigmoid => Ok(input),
            LayerSpec::Flatten => Ok(Shape::Vector(input.numel())),
            LayerSpec::Reshape(target) => {
                if target.numel() == input.numel() {
                    Ok(target)
                } else {
                    Err(mismatch("element count changes"))
                }
            }
        }
    }
}

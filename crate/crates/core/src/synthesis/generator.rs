use dfcil_autograd::{Array, Var};
use serde::{Deserialize, Serialize};

use crate::data::ImageDims;
use crate::error::{invalid, Result};
use crate::model::{join, BatchNorm, Conv2d, Linear, Module, Session, TensorKind};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Noise dimension.
    pub z_dim: usize,
    /// Channels of the first feature map; the last hidden stage uses half.
    pub width: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            z_dim: 1000,
            width: 128,
        }
    }
}

/// Noise-to-image network: a linear map to a feature map at a quarter of
/// the image resolution, two nearest-neighbour upsampling stages with
/// conv-BN-LeakyReLU, a tanh-bounded output conv and a final parameter-free
/// batch norm that standardizes each output channel. Batch statistics are
/// always used, in training and in sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    config: GeneratorConfig,
    dims: ImageDims,
    fc: Linear,
    bn0: BatchNorm,
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    conv_out: Conv2d,
    bn_out: BatchNorm,
}

impl Generator {
    pub fn new(config: GeneratorConfig, dims: ImageDims, rng: &mut Rng) -> Result<Self> {
        if !dims.height.is_multiple_of(4) || !dims.width.is_multiple_of(4) {
            return Err(invalid(format!(
                "generator needs image sides divisible by 4, got {}x{}",
                dims.height, dims.width
            )));
        }
        if config.z_dim == 0 || config.width < 2 {
            return Err(invalid("generator needs z_dim >= 1 and width >= 2"));
        }
        let w = config.width;
        let cells = (dims.height / 4) * (dims.width / 4);
        Ok(Self {
            config,
            dims,
            fc: Linear::fan_in_uniform(config.z_dim, w * cells, rng),
            bn0: BatchNorm::new(w, true),
            conv1: Conv2d::kaiming(w, w, 3, 1, 1, rng),
            bn1: BatchNorm::new(w, true),
            conv2: Conv2d::kaiming(w / 2, w, 3, 1, 1, rng),
            bn2: BatchNorm::new(w / 2, true),
            conv_out: Conv2d::kaiming(dims.channels, w / 2, 3, 1, 1, rng),
            bn_out: BatchNorm::new(dims.channels, false),
        })
    }

    pub fn config(&self) -> GeneratorConfig {
        self.config
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    /// `[B, Z]` noise to `[B, C, H, W]` images. The session must be in
    /// train mode.
    pub fn forward<'t>(&self, s: &Session<'t>, z: Var<'t>) -> Var<'t> {
        let b = z.shape()[0];
        let (h4, w4) = (self.dims.height / 4, self.dims.width / 4);
        let h = self.fc.forward(s, "fc", z).reshape(&[b, self.config.width, h4, w4]);
        let h = self.bn0.forward(s, "bn0", h).upsample2x();
        let h = self.conv1.forward(s, "conv1", h);
        let h = self.bn1.forward(s, "bn1", h).leaky_relu(0.2).upsample2x();
        let h = self.conv2.forward(s, "conv2", h);
        let h = self.bn2.forward(s, "bn2", h).leaky_relu(0.2);
        let h = self.conv_out.forward(s, "conv_out", h).tanh();
        self.bn_out.forward(s, "bn_out", h)
    }
}

impl Module for Generator {
    fn visit(&self, p: &str, f: &mut dyn FnMut(String, &Array, TensorKind)) {
        self.fc.visit(&join(p, "fc"), f);
        self.bn0.visit(&join(p, "bn0"), f);
        self.conv1.visit(&join(p, "conv1"), f);
        self.bn1.visit(&join(p, "bn1"), f);
        self.conv2.visit(&join(p, "conv2"), f);
        self.bn2.visit(&join(p, "bn2"), f);
        self.conv_out.visit(&join(p, "conv_out"), f);
        self.bn_out.visit(&join(p, "bn_out"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Array, TensorKind)) {
        self.fc.visit_mut(&join(p, "fc"), f);
        self.bn0.visit_mut(&join(p, "bn0"), f);
        self.conv1.visit_mut(&join(p, "conv1"), f);
        self.bn1.visit_mut(&join(p, "bn1"), f);
        self.conv2.visit_mut(&join(p, "conv2"), f);
        self.bn2.visit_mut(&join(p, "bn2"), f);
        self.conv_out.visit_mut(&join(p, "conv_out"), f);
        self.bn_out.visit_mut(&join(p, "bn_out"), f);
    }
}

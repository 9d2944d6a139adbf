use dfcil_autograd::{Array, Var};
use serde::{Deserialize, Serialize};

use crate::model::layers::{global_avg_pool, join, BatchNorm, Conv2d, Module, TensorKind};
use crate::model::session::Session;
use crate::seed::Rng;

/// Feature extractor choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Four conv-BN-ReLU blocks with channels `w, 2w, 2w, 4w`; the second
    /// and fourth downsample. Embedding dimension `4w`.
    Convnet4 { width: usize },
    /// CIFAR-style residual network: `6n + 2` layers over three stages of
    /// widths `w, 2w, 4w`. `n = 5`, `w = 16` is the 32-layer network.
    Resnet { blocks_per_stage: usize, width: usize },
}

impl Architecture {
    pub fn resnet32() -> Self {
        Self::Resnet {
            blocks_per_stage: 5,
            width: 16,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match *self {
            Self::Convnet4 { width } => 4 * width,
            Self::Resnet { width, .. } => 4 * width,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet4 {
    blocks: Vec<(Conv2d, BatchNorm)>,
}

impl ConvNet4 {
    fn new(in_ch: usize, width: usize, rng: &mut Rng) -> Self {
        let plan = [(width, 1), (2 * width, 2), (2 * width, 1), (4 * width, 2)];
        let mut prev = in_ch;
        let blocks = plan
            .iter()
            .map(|&(out, stride)| {
                let conv = Conv2d::kaiming(out, prev, 3, stride, 1, rng);
                prev = out;
                (conv, BatchNorm::new(out, true))
            })
            .collect();
        Self { blocks }
    }

    fn forward<'t>(&self, s: &Session<'t>, prefix: &str, mut x: Var<'t>) -> Var<'t> {
        for (i, (conv, bn)) in self.blocks.iter().enumerate() {
            x = conv.forward(s, &join(prefix, &format!("conv{i}")), x);
            x = bn.forward(s, &join(prefix, &format!("bn{i}")), x).relu();
        }
        global_avg_pool(x)
    }

    fn visit_bn<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a BatchNorm)>) {
        for (i, (_, bn)) in self.blocks.iter().enumerate() {
            out.push((join(prefix, &format!("bn{i}")), bn));
        }
    }

    fn visit_bn_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut BatchNorm)>) {
        for (i, (_, bn)) in self.blocks.iter_mut().enumerate() {
            out.push((join(prefix, &format!("bn{i}")), bn));
        }
    }
}

impl Module for ConvNet4 {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array, TensorKind)) {
        for (i, (conv, bn)) in self.blocks.iter().enumerate() {
            conv.visit(&join(prefix, &format!("conv{i}")), f);
            bn.visit(&join(prefix, &format!("bn{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array, TensorKind)) {
        for (i, (conv, bn)) in self.blocks.iter_mut().enumerate() {
            conv.visit_mut(&join(prefix, &format!("conv{i}")), f);
            bn.visit_mut(&join(prefix, &format!("bn{i}")), f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut Rng) -> Self {
        let shortcut = (stride != 1 || in_ch != out_ch)
            .then(|| (Conv2d::kaiming(out_ch, in_ch, 1, stride, 0, rng), BatchNorm::new(out_ch, true)));
        Self {
            conv1: Conv2d::kaiming(out_ch, in_ch, 3, stride, 1, rng),
            bn1: BatchNorm::new(out_ch, true),
            conv2: Conv2d::kaiming(out_ch, out_ch, 3, 1, 1, rng),
            bn2: BatchNorm::new(out_ch, true),
            shortcut,
        }
    }

    fn forward<'t>(&self, s: &Session<'t>, p: &str, x: Var<'t>) -> Var<'t> {
        let h = self.conv1.forward(s, &join(p, "conv1"), x);
        let h = self.bn1.forward(s, &join(p, "bn1"), h).relu();
        let h = self.conv2.forward(s, &join(p, "conv2"), h);
        let h = self.bn2.forward(s, &join(p, "bn2"), h);
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let t = conv.forward(s, &join(p, "shortcut.conv"), x);
                bn.forward(s, &join(p, "shortcut.bn"), t)
            }
            None => x,
        };
        h.add(skip).relu()
    }

    fn visit_bn<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a BatchNorm)>) {
        out.push((join(p, "bn1"), &self.bn1));
        out.push((join(p, "bn2"), &self.bn2));
        if let Some((_, bn)) = &self.shortcut {
            out.push((join(p, "shortcut.bn"), bn));
        }
    }

    fn visit_bn_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut BatchNorm)>) {
        out.push((join(p, "bn1"), &mut self.bn1));
        out.push((join(p, "bn2"), &mut self.bn2));
        if let Some((_, bn)) = &mut self.shortcut {
            out.push((join(p, "shortcut.bn"), bn));
        }
    }
}

impl Module for BasicBlock {
    fn visit(&self, p: &str, f: &mut dyn FnMut(String, &Array, TensorKind)) {
        self.conv1.visit(&join(p, "conv1"), f);
        self.bn1.visit(&join(p, "bn1"), f);
        self.conv2.visit(&join(p, "conv2"), f);
        self.bn2.visit(&join(p, "bn2"), f);
        if let Some((conv, bn)) = &self.shortcut {
            conv.visit(&join(p, "shortcut.conv"), f);
            bn.visit(&join(p, "shortcut.bn"), f);
        }
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Array, TensorKind)) {
        self.conv1.visit_mut(&join(p, "conv1"), f);
        self.bn1.visit_mut(&join(p, "bn1"), f);
        self.conv2.visit_mut(&join(p, "conv2"), f);
        self.bn2.visit_mut(&join(p, "bn2"), f);
        if let Some((conv, bn)) = &mut self.shortcut {
            conv.visit_mut(&join(p, "shortcut.conv"), f);
            bn.visit_mut(&join(p, "shortcut.bn"), f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResNet {
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<BasicBlock>,
}

impl ResNet {
    fn new(in_ch: usize, blocks_per_stage: usize, width: usize, rng: &mut Rng) -> Self {
        let stem = Conv2d::kaiming(width, in_ch, 3, 1, 1, rng);
        let mut blocks = Vec::new();
        let mut prev = width;
        for (stage, mult) in [1, 2, 4].into_iter().enumerate() {
            let out = width * mult;
            for b in 0..blocks_per_stage {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(prev, out, stride, rng));
                prev = out;
            }
        }
        Self {
            stem,
            stem_bn: BatchNorm::new(width, true),
            blocks,
        }
    }

    fn forward<'t>(&self, s: &Session<'t>, prefix: &str, x: Var<'t>) -> Var<'t> {
        let h = self.stem.forward(s, &join(prefix, "stem.conv"), x);
        let mut h = self.stem_bn.forward(s, &join(prefix, "stem.bn"), h).relu();
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward(s, &join(prefix, &format!("block{i}")), h);
        }
        global_avg_pool(h)
    }

    fn visit_bn<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a BatchNorm)>) {
        out.push((join(prefix, "stem.bn"), &self.stem_bn));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_bn(&join(prefix, &format!("block{i}")), out);
        }
    }

    fn visit_bn_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut BatchNorm)>) {
        out.push((join(prefix, "stem.bn"), &mut self.stem_bn));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_bn_mut(&join(prefix, &format!("block{i}")), out);
        }
    }
}

impl Module for ResNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array, TensorKind)) {
        self.stem.visit(&join(prefix, "stem.conv"), f);
        self.stem_bn.visit(&join(prefix, "stem.bn"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array, TensorKind)) {
        self.stem.visit_mut(&join(prefix, "stem.conv"), f);
        self.stem_bn.visit_mut(&join(prefix, "stem.bn"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backbone {
    Convnet4(ConvNet4),
    Resnet(ResNet),
}

impl Backbone {
    pub fn new(arch: Architecture, in_channels: usize, rng: &mut Rng) -> Self {
        match arch {
            Architecture::Convnet4 { width } => Self::Convnet4(ConvNet4::new(in_channels, width, rng)),
            Architecture::Resnet {
                blocks_per_stage,
                width,
            } => Self::Resnet(ResNet::new(in_channels, blocks_per_stage, width, rng)),
        }
    }

    /// `[B, C, H, W] -> [B, D]`.
    pub fn forward<'t>(&self, s: &Session<'t>, prefix: &str, x: Var<'t>) -> Var<'t> {
        match self {
            Self::Convnet4(m) => m.forward(s, prefix, x),
            Self::Resnet(m) => m.forward(s, prefix, x),
        }
    }

    /// Batch-norm layers in forward order.
    pub fn bn_layers(&self, prefix: &str) -> Vec<(String, &BatchNorm)> {
        let mut out = Vec::new();
        match self {
            Self::Convnet4(m) => m.visit_bn(prefix, &mut out),
            Self::Resnet(m) => m.visit_bn(prefix, &mut out),
        }
        out
    }

    pub fn bn_layers_mut(&mut self, prefix: &str) -> Vec<(String, &mut BatchNorm)> {
        let mut out = Vec::new();
        match self {
            Self::Convnet4(m) => m.visit_bn_mut(prefix, &mut out),
            Self::Resnet(m) => m.visit_bn_mut(prefix, &mut out),
        }
        out
    }
}

impl Module for Backbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array, TensorKind)) {
        match self {
            Self::Convnet4(m) => m.visit(prefix, f),
            Self::Resnet(m) => m.visit(prefix, f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array, TensorKind)) {
        match self {
            Self::Convnet4(m) => m.visit_mut(prefix, f),
            Self::Resnet(m) => m.visit_mut(prefix, f),
        }
    }
}

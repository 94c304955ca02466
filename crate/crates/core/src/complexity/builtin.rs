//! Builtin architecture descriptors: the CIFAR ResNets (20 and the desk-scale
//! 8), the CIFAR VGG-16 variant (13 conv layers, two fully-connected layers,
//! batch norm after every convolution) and ImageNet ResNet-50.

use super::{ArchSpec, LayerKind, LayerNode};
use crate::error::{Error, Result};

struct Builder {
    layers: Vec<LayerNode>,
}

impl Builder {
    fn new() -> Self {
        Self { layers: Vec::new() }
    }

    fn push(&mut self, name: impl Into<String>, kind: LayerKind, input: Option<usize>) -> usize {
        self.layers.push(LayerNode {
            name: name.into(),
            kind,
            input,
        });
        self.layers.len() - 1
    }

    fn conv(
        &mut self,
        name: impl Into<String>,
        input: Option<usize>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> usize {
        self.push(
            name,
            LayerKind::Conv {
                in_channels: in_ch,
                out_channels: out_ch,
                kernel,
                stride,
                padding,
                groups: 1,
            },
            input,
        )
    }

    fn bn(&mut self, name: impl Into<String>, channels: usize) -> usize {
        self.push(name, LayerKind::BatchNorm { channels }, None)
    }

    fn relu(&mut self, name: impl Into<String>) -> usize {
        self.push(name, LayerKind::Relu, None)
    }
}

/// CIFAR-style residual networks: an initial 3x3 convolution, three stages of
/// basic blocks with 16-32-64 filters, strided projection shortcuts at stage
/// entries, pooled head.
fn resnet_cifar(name: &str, blocks_per_stage: usize, classes: usize) -> ArchSpec {
    let mut b = Builder::new();
    b.conv("conv1", None, 3, 16, 3, 1, 1);
    b.bn("bn1", 16);
    let mut block_in = b.relu("relu1");

    let widths = [16usize, 32, 64];
    let mut in_ch = 16;
    for (stage, &width) in widths.iter().enumerate() {
        for block in 0..blocks_per_stage {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let tag = format!("s{}b{}", stage + 1, block + 1);
            b.conv(
                format!("{tag}.conv1"),
                Some(block_in),
                in_ch,
                width,
                3,
                stride,
                1,
            );
            b.bn(format!("{tag}.bn1"), width);
            b.relu(format!("{tag}.relu1"));
            b.conv(format!("{tag}.conv2"), None, width, width, 3, 1, 1);
            let main = b.bn(format!("{tag}.bn2"), width);
            let skip = if stride != 1 || in_ch != width {
                b.conv(
                    format!("{tag}.down"),
                    Some(block_in),
                    in_ch,
                    width,
                    1,
                    stride,
                    0,
                );
                b.bn(format!("{tag}.down_bn"), width)
            } else {
                block_in
            };
            b.push(
                format!("{tag}.add"),
                LayerKind::Add { skip_from: skip },
                Some(main),
            );
            block_in = b.relu(format!("{tag}.relu2"));
            in_ch = width;
        }
    }

    b.push("pool", LayerKind::GapHead, None);
    b.push(
        "fc",
        LayerKind::Linear {
            in_features: 64,
            out_features: classes,
        },
        None,
    );

    ArchSpec {
        name: name.to_string(),
        input: (3, 32, 32),
        layers: b.layers,
    }
}

/// CIFAR VGG-16 variant: 13 convolutions in the 64-128-256-512-512 stages,
/// batch norm after each, two fully-connected layers.
fn vgg16_cifar(classes: usize) -> ArchSpec {
    let mut b = Builder::new();
    let stages: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
    let mut in_ch = 3;
    let mut conv_idx = 0;
    for (stage, &(width, convs)) in stages.iter().enumerate() {
        for _ in 0..convs {
            conv_idx += 1;
            b.conv(format!("conv{conv_idx}"), None, in_ch, width, 3, 1, 1);
            b.bn(format!("bn{conv_idx}"), width);
            b.relu(format!("relu{conv_idx}"));
            in_ch = width;
        }
        b.push(
            format!("pool{}", stage + 1),
            LayerKind::MaxPool {
                kernel: 2,
                stride: 2,
                padding: 0,
            },
            None,
        );
    }
    b.push("flatten", LayerKind::GapHead, None);
    b.push(
        "fc1",
        LayerKind::Linear {
            in_features: 512,
            out_features: 512,
        },
        None,
    );
    b.relu("fc1.relu");
    b.push(
        "fc2",
        LayerKind::Linear {
            in_features: 512,
            out_features: classes,
        },
        None,
    );
    ArchSpec {
        name: "vgg16_cifar".to_string(),
        input: (3, 32, 32),
        layers: b.layers,
    }
}

/// ImageNet ResNet-50: 7x7 stem, four stages of bottleneck blocks
/// ([3, 4, 6, 3], expansion 4), strided projection shortcuts.
fn resnet50(classes: usize) -> ArchSpec {
    let mut b = Builder::new();
    b.conv("conv1", None, 3, 64, 7, 2, 3);
    b.bn("bn1", 64);
    b.relu("relu1");
    let mut block_in = b.push(
        "maxpool",
        LayerKind::MaxPool {
            kernel: 3,
            stride: 2,
            padding: 1,
        },
        None,
    );

    let stages: [(usize, usize, usize); 4] =
        [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)];
    let mut in_ch = 64;
    for (stage, &(width, blocks, entry_stride)) in stages.iter().enumerate() {
        let out_ch = width * 4;
        for block in 0..blocks {
            let stride = if block == 0 { entry_stride } else { 1 };
            let tag = format!("s{}b{}", stage + 1, block + 1);
            b.conv(format!("{tag}.conv1"), Some(block_in), in_ch, width, 1, 1, 0);
            b.bn(format!("{tag}.bn1"), width);
            b.relu(format!("{tag}.relu1"));
            b.conv(format!("{tag}.conv2"), None, width, width, 3, stride, 1);
            b.bn(format!("{tag}.bn2"), width);
            b.relu(format!("{tag}.relu2"));
            b.conv(format!("{tag}.conv3"), None, width, out_ch, 1, 1, 0);
            let main = b.bn(format!("{tag}.bn3"), out_ch);
            let skip = if stride != 1 || in_ch != out_ch {
                b.conv(
                    format!("{tag}.down"),
                    Some(block_in),
                    in_ch,
                    out_ch,
                    1,
                    stride,
                    0,
                );
                b.bn(format!("{tag}.down_bn"), out_ch)
            } else {
                block_in
            };
            b.push(
                format!("{tag}.add"),
                LayerKind::Add { skip_from: skip },
                Some(main),
            );
            block_in = b.relu(format!("{tag}.relu3"));
            in_ch = out_ch;
        }
    }

    b.push("pool", LayerKind::GapHead, None);
    b.push(
        "fc",
        LayerKind::Linear {
            in_features: 2048,
            out_features: classes,
        },
        None,
    );
    ArchSpec {
        name: "resnet50".to_string(),
        input: (3, 224, 224),
        layers: b.layers,
    }
}

/// Names accepted by [`builtin_arch`].
pub fn arch_names() -> &'static [&'static str] {
    &["resnet20", "resnet8", "vgg16_cifar", "resnet50"]
}

/// Returns a builtin architecture descriptor by name.
pub fn builtin_arch(name: &str) -> Result<ArchSpec> {
    match name {
        "resnet20" => Ok(resnet_cifar("resnet20", 3, 10)),
        "resnet8" => Ok(resnet_cifar("resnet8", 1, 10)),
        "vgg16_cifar" => Ok(vgg16_cifar(10)),
        "resnet50" => Ok(resnet50(1000)),
        other => Err(Error::UnknownArch(other.to_string())),
    }
}

//! Closed-form parameter and FLOP accounting over declarative architecture
//! descriptions.
//!
//! Counting convention (documented in every report header):
//! - one multiply-accumulate = one FLOP;
//! - convolutions and linear layers are counted by their MACs
//!   (params * output positions, no bias term for convolutions);
//! - batch norm costs 2 scalars and 2 ops per normalized element;
//! - activations are free;
//! - pooling, residual adds and the split-convolution overhead (branch sum,
//!   pooled statistics, softmax and the channel-wise scaling) are counted as
//!   elementwise ops and reported separately from the MAC totals where the
//!   layer kind distinguishes them.

mod builtin;

pub use builtin::{arch_names, builtin_arch};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spconv::{FusionMode, RepMode, SPConvConfig};

/// One layer of a declarative network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    #[serde(rename = "spconv")]
    SPConv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        alpha: f64,
        groups: usize,
        rep_mode: RepMode,
        redundant_enabled: bool,
        fusion: FusionMode,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Global average pooling head: collapses (c, h, w) to a feature vector.
    GapHead,
    /// Residual join: adds the output of an earlier layer to the previous one.
    Add {
        skip_from: usize,
    },
    /// Keeps the first `keep` channels and drops the rest.
    Slice {
        keep: usize,
    },
}

impl LayerKind {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::SPConv { .. } => "spconv",
            LayerKind::Linear { .. } => "linear",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::GapHead => "gap_head",
            LayerKind::Add { .. } => "add",
            LayerKind::Slice { .. } => "slice",
        }
    }
}

/// Named layer with an optional explicit input (defaults to the previous
/// layer; index -1 style references are expressed as `None`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Index of the layer whose output feeds this one; `None` means the
    /// immediately preceding layer (the architecture input for layer 0).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<usize>,
}

/// Whole-network description: input shape plus an ordered layer list whose
/// residual topology is expressed through explicit input and skip indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    /// Input shape as (channels, height, width).
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerNode>,
}

/// Shape flowing between layers: spatial maps before the pooling head,
/// flat feature vectors after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Spatial { c: usize, h: usize, w: usize },
    Features { c: usize },
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Spatial { c, h, w } => c * h * w,
            Shape::Features { c } => c,
        }
    }

    fn describe(&self) -> String {
        match *self {
            Shape::Spatial { c, h, w } => format!("{c}x{h}x{w}"),
            Shape::Features { c } => format!("{c}"),
        }
    }
}

fn spatial(shape: Shape, layer: &str) -> Result<(usize, usize, usize)> {
    match shape {
        Shape::Spatial { c, h, w } => Ok((c, h, w)),
        Shape::Features { .. } => Err(Error::Propagation {
            layer: layer.to_string(),
            reason: "expected a spatial input, got a feature vector".into(),
        }),
    }
}

fn conv_extent(input: usize, kernel: usize, stride: usize, padding: usize, layer: &str) -> Result<usize> {
    let padded = input + 2 * padding;
    if stride == 0 {
        return Err(Error::Propagation {
            layer: layer.to_string(),
            reason: "stride must be >= 1".into(),
        });
    }
    if padded < kernel {
        return Err(Error::Propagation {
            layer: layer.to_string(),
            reason: format!("kernel {kernel} exceeds padded extent {padded}"),
        });
    }
    Ok((padded - kernel) / stride + 1)
}

impl ArchSpec {
    /// Runs shape propagation over the whole network, returning the shape
    /// produced by every layer.
    pub fn propagate(&self) -> Result<Vec<Shape>> {
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.layers.len());
        for (idx, node) in self.layers.iter().enumerate() {
            let input_shape = match node.input {
                Some(src) => {
                    if src >= idx {
                        return Err(Error::Propagation {
                            layer: node.name.clone(),
                            reason: format!("input index {src} does not precede layer {idx}"),
                        });
                    }
                    shapes[src]
                }
                None => {
                    if idx == 0 {
                        let (c, h, w) = self.input;
                        Shape::Spatial { c, h, w }
                    } else {
                        shapes[idx - 1]
                    }
                }
            };
            let out = self.propagate_layer(node, input_shape, &shapes, idx)?;
            shapes.push(out);
        }
        Ok(shapes)
    }

    fn propagate_layer(
        &self,
        node: &LayerNode,
        input: Shape,
        shapes: &[Shape],
        idx: usize,
    ) -> Result<Shape> {
        let name = node.name.as_str();
        match &node.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                groups,
            } => {
                let (c, h, w) = spatial(input, name)?;
                if c != *in_channels {
                    return Err(Error::Propagation {
                        layer: name.to_string(),
                        reason: format!("expected {in_channels} input channels, got {c}"),
                    });
                }
                if in_channels % groups != 0 || out_channels % groups != 0 {
                    return Err(Error::Propagation {
                        layer: name.to_string(),
                        reason: format!("groups {groups} must divide both channel counts"),
                    });
                }
                Ok(Shape::Spatial {
                    c: *out_channels,
                    h: conv_extent(h, *kernel, *stride, *padding, name)?,
                    w: conv_extent(w, *kernel, *stride, *padding, name)?,
                })
            }
            LayerKind::SPConv { .. } => {
                let config = self.spconv_config(idx)?;
                let (c, h, w) = spatial(input, name)?;
                if c != config.in_channels {
                    return Err(Error::Propagation {
                        layer: name.to_string(),
                        reason: format!(
                            "expected {} input channels, got {c}",
                            config.in_channels
                        ),
                    });
                }
                config.split().map_err(|e| Error::Propagation {
                    layer: name.to_string(),
                    reason: e.to_string(),
                })?;
                Ok(Shape::Spatial {
                    c: config.out_channels,
                    h: conv_extent(h, config.kernel, config.stride, config.padding, name)?,
                    w: conv_extent(w, config.kernel, config.stride, config.padding, name)?,
                })
            }
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                let c = match input {
                    Shape::Features { c } => c,
                    Shape::Spatial { c, h, w } if h == 1 && w == 1 => c,
                    _ => {
                        return Err(Error::Propagation {
                            layer: name.to_string(),
                            reason: "linear layer needs a feature vector input".into(),
                        })
                    }
                };
                if c != *in_features {
                    return Err(Error::Propagation {
                        layer: name.to_string(),
                        reason: format!("expected {in_features} input features, got {c}"),
                    });
                }
                Ok(Shape::Features { c: *out_features })
            }
            LayerKind::BatchNorm { channels } => {
                let (c, h, w) = spatial(input, name)?;
                if c != *channels {
                    return Err(Error::Propagation {
                        layer: name.to_string(),
                        reason: format!("expected {channels} channels, got {c}"),
                    });
                }
                Ok(Shape::Spatial { c, h, w })
            }
            LayerKind::Relu => Ok(input),
            LayerKind::MaxPool {
                kernel,
                stride,
                padding,
            } => {
                let (c, h, w) = spatial(input, name)?;
                Ok(Shape::Spatial {
                    c,
                    h: conv_extent(h, *kernel, *stride, *padding, name)?,
                    w: conv_extent(w, *kernel, *stride, *padding, name)?,
                })
            }
            LayerKind::GapHead => {
                let (c, _, _) = spatial(input, name)?;
                Ok(Shape::Features { c })
            }
            LayerKind::Add { skip_from } => {
                if *skip_from >= idx {
                    return Err(Error::Propagation {
                        layer: name.to_string(),
                        reason: format!("skip source {skip_from} does not precede layer {idx}"),
                    });
                }
                let skip = shapes[*skip_from];
                if skip != input {
                    return Err(Error::Propagation {
                        layer: name.to_string(),
                        reason: format!(
                            "join shapes differ: {} vs {}",
                            input.describe(),
                            skip.describe()
                        ),
                    });
                }
                Ok(input)
            }
            LayerKind::Slice { keep } => {
                let (c, h, w) = spatial(input, name)?;
                if *keep == 0 || *keep > c {
                    return Err(Error::Propagation {
                        layer: name.to_string(),
                        reason: format!("cannot keep {keep} of {c} channels"),
                    });
                }
                Ok(Shape::Spatial { c: *keep, h, w })
            }
        }
    }

    /// Reconstructs the operator configuration of an SPCONV layer.
    pub fn spconv_config(&self, idx: usize) -> Result<SPConvConfig> {
        match &self.layers[idx].kind {
            LayerKind::SPConv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                alpha,
                groups,
                rep_mode,
                redundant_enabled,
                fusion,
            } => Ok(SPConvConfig {
                in_channels: *in_channels,
                out_channels: *out_channels,
                kernel: *kernel,
                alpha: *alpha,
                groups: *groups,
                stride: *stride,
                padding: *padding,
                rep_mode: *rep_mode,
                redundant_enabled: *redundant_enabled,
                fusion: *fusion,
            }),
            other => Err(Error::Config(format!(
                "layer {idx} is {}, not spconv",
                other.kind_name()
            ))),
        }
    }

    /// Rewrites the trailing linear layer for a different class count.
    pub fn with_classes(mut self, classes: usize) -> Self {
        for node in self.layers.iter_mut().rev() {
            if let LayerKind::Linear { out_features, .. } = &mut node.kind {
                *out_features = classes;
                break;
            }
        }
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Cost of one layer under the counting convention.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerCost {
    pub params: u64,
    pub flops: u64,
    /// Portion of `flops` that is branch-combination overhead rather than
    /// convolution MACs (pooled statistics, softmax, scaling, branch sums).
    pub fusion_flops: u64,
}

/// Params and FLOPs of a plain layer given its resolved output shape.
pub fn count_vanilla(kind: &LayerKind, out: Shape, input: Shape) -> Result<LayerCost> {
    let cost = match kind {
        LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            groups,
            ..
        } => {
            let (_, h, w) = match out {
                Shape::Spatial { c, h, w } => (c, h, w),
                _ => return Err(Error::Config("conv output must be spatial".into())),
            };
            let params = (kernel * kernel * in_channels / groups * out_channels) as u64;
            LayerCost {
                params,
                flops: params * (h * w) as u64,
                fusion_flops: 0,
            }
        }
        LayerKind::Linear {
            in_features,
            out_features,
        } => LayerCost {
            params: (in_features * out_features + out_features) as u64,
            flops: (in_features * out_features) as u64,
            fusion_flops: 0,
        },
        LayerKind::BatchNorm { channels } => {
            let numel = out.numel() as u64;
            let _ = channels;
            LayerCost {
                params: 2 * *channels as u64,
                flops: 2 * numel,
                fusion_flops: 0,
            }
        }
        LayerKind::Relu | LayerKind::Slice { .. } => LayerCost::default(),
        LayerKind::MaxPool { kernel, .. } => LayerCost {
            params: 0,
            flops: (kernel * kernel) as u64 * out.numel() as u64,
            fusion_flops: 0,
        },
        LayerKind::GapHead => LayerCost {
            params: 0,
            flops: input.numel() as u64,
            fusion_flops: 0,
        },
        LayerKind::Add { .. } => LayerCost {
            params: 0,
            flops: out.numel() as u64,
            fusion_flops: 0,
        },
        LayerKind::SPConv { .. } => {
            return Err(Error::Config(
                "use count_spconv for split convolution layers".into(),
            ))
        }
    };
    Ok(cost)
}

/// Params and FLOPs of a split convolution layer.
///
/// Convolution FLOPs are exactly params * output positions; the branch
/// combination overhead is returned in `fusion_flops` and included in
/// `flops`:
/// - each enabled attention branch is pooled (1 op per element),
/// - the softmax costs 5 ops per output channel,
/// - the channel-wise scaling costs 3 ops per output element,
/// - direct summation costs 1 op per output element,
/// - the representative branch's internal sum (grouped + pointwise paths)
///   costs 1 op per output element.
pub fn count_spconv(config: &SPConvConfig, h_out: usize, w_out: usize) -> Result<LayerCost> {
    let params = crate::spconv::spconv_param_count(config)? as u64;
    let m = config.out_channels as u64;
    let plane = (h_out * w_out) as u64;
    let out_elems = m * plane;

    let rep_sum = match config.rep_mode {
        RepMode::GwcPlusPwc => out_elems,
        _ => 0,
    };
    let combine = if config.redundant_enabled {
        match config.fusion {
            FusionMode::Attention => 2 * out_elems + 3 * out_elems + 5 * m,
            FusionMode::Sum => out_elems,
        }
    } else {
        0
    };
    let fusion_flops = rep_sum + combine;
    Ok(LayerCost {
        params,
        flops: params * plane + fusion_flops,
        fusion_flops,
    })
}

fn layer_cost(arch: &ArchSpec, idx: usize, shapes: &[Shape], input: Shape) -> Result<LayerCost> {
    match &arch.layers[idx].kind {
        LayerKind::SPConv { .. } => {
            let config = arch.spconv_config(idx)?;
            let (_, h, w) = match shapes[idx] {
                Shape::Spatial { c, h, w } => (c, h, w),
                _ => unreachable!("spconv output is spatial"),
            };
            count_spconv(&config, h, w)
        }
        kind => count_vanilla(kind, shapes[idx], input),
    }
}

/// Which operator arrangement `replace_policy` installs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplaceVariant {
    /// Grouped + pointwise representative paths, redundant branch, attention.
    Full,
    /// Dense convolution on the representative part.
    RepVanilla,
    /// Grouped convolution followed by pointwise on the representative part.
    RepGwcThenPwc,
    /// Both branches, combined by direct summation instead of attention.
    DirectSum,
    /// Redundant channels dropped entirely (slice + single-branch operator).
    DropRedundant,
}

impl ReplaceVariant {
    pub fn all() -> [ReplaceVariant; 5] {
        [
            ReplaceVariant::Full,
            ReplaceVariant::RepGwcThenPwc,
            ReplaceVariant::RepVanilla,
            ReplaceVariant::DirectSum,
            ReplaceVariant::DropRedundant,
        ]
    }

    pub fn label(&self) -> &'static str {
        match self {
            ReplaceVariant::Full => "full",
            ReplaceVariant::RepVanilla => "vanilla-rep",
            ReplaceVariant::RepGwcThenPwc => "gwc-then-pwc",
            ReplaceVariant::DirectSum => "sum-fusion",
            ReplaceVariant::DropRedundant => "no-redundant",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "full" => Ok(ReplaceVariant::Full),
            "vanilla-rep" => Ok(ReplaceVariant::RepVanilla),
            "gwc-then-pwc" => Ok(ReplaceVariant::RepGwcThenPwc),
            "sum-fusion" => Ok(ReplaceVariant::DirectSum),
            "no-redundant" => Ok(ReplaceVariant::DropRedundant),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected full, vanilla-rep, gwc-then-pwc, sum-fusion or no-redundant)"
            ))),
        }
    }
}

/// Replaces every 3x3 dense convolution except the network's first
/// convolution with the split operator at the given settings. 1x1
/// convolutions (projection shortcuts, bottleneck reducers) and non-3x3
/// stems are left untouched.
pub fn replace_policy(
    arch: &ArchSpec,
    alpha: f64,
    groups: usize,
    variant: ReplaceVariant,
) -> Result<ArchSpec> {
    let mut out_layers: Vec<LayerNode> = Vec::with_capacity(arch.layers.len() + 8);
    let mut index_map: Vec<usize> = Vec::with_capacity(arch.layers.len());
    let mut first_conv_seen = false;

    for node in arch.layers.iter() {
        let remap = |r: Option<usize>, map: &[usize]| r.map(|j| map[j]);
        let mut node = node.clone();
        node.input = remap(node.input, &index_map);
        if let LayerKind::Add { skip_from } = &mut node.kind {
            *skip_from = index_map[*skip_from];
        }

        let replace = match &node.kind {
            LayerKind::Conv {
                kernel, groups: g, ..
            } => {
                // The network's initial convolution is exempt whatever its
                // kernel; beyond it, every dense 3x3 is a target.
                let is_initial = !first_conv_seen;
                first_conv_seen = true;
                *kernel == 3 && *g == 1 && !is_initial
            }
            _ => false,
        };

        if !replace {
            index_map.push(out_layers.len());
            out_layers.push(node);
            continue;
        }

        let LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } = node.kind
        else {
            unreachable!()
        };

        let (rep_mode, redundant, fusion) = match variant {
            ReplaceVariant::Full => (RepMode::GwcPlusPwc, true, FusionMode::Attention),
            ReplaceVariant::RepVanilla => (RepMode::Vanilla, true, FusionMode::Attention),
            ReplaceVariant::RepGwcThenPwc => (RepMode::GwcThenPwc, true, FusionMode::Attention),
            ReplaceVariant::DirectSum => (RepMode::GwcPlusPwc, true, FusionMode::Sum),
            ReplaceVariant::DropRedundant => (RepMode::GwcPlusPwc, false, FusionMode::Sum),
        };

        let (spconv_in, spconv_alpha, node_input) = if variant == ReplaceVariant::DropRedundant {
            // Drop the redundant channels in front of the operator and run
            // the single-branch operator on the kept representative slice.
            let rounded = (alpha * in_channels as f64).round() as usize;
            let keep = rounded - rounded % groups;
            if keep < groups {
                return Err(Error::Config(format!(
                    "alpha {alpha} leaves no representative channels for {in_channels} inputs"
                )));
            }
            let slice = LayerNode {
                name: format!("{}.slice", node.name),
                kind: LayerKind::Slice { keep },
                input: node.input,
            };
            out_layers.push(slice);
            (keep, 1.0, None)
        } else {
            (in_channels, alpha, node.input)
        };

        let spconv = LayerNode {
            name: node.name.clone(),
            kind: LayerKind::SPConv {
                in_channels: spconv_in,
                out_channels,
                kernel,
                stride,
                padding,
                alpha: spconv_alpha,
                groups,
                rep_mode,
                redundant_enabled: redundant,
                fusion,
            },
            input: node_input,
        };
        index_map.push(out_layers.len());
        out_layers.push(spconv);
    }

    let replaced = ArchSpec {
        name: format!("{}-spconv", arch.name),
        input: arch.input,
        layers: out_layers,
    };
    // Surface inconsistencies (alpha too small for a narrow layer, group
    // divisibility) immediately rather than at analysis time.
    replaced.propagate()?;
    Ok(replaced)
}

/// Per-layer entry of a complexity report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub kind: String,
    pub out_shape: String,
    pub params: u64,
    pub flops: u64,
    pub fusion_flops: u64,
}

/// Full analysis of an architecture against a baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub convention: String,
    pub arch: String,
    pub baseline: String,
    pub layers: Vec<LayerReport>,
    pub total_params: u64,
    pub total_flops: u64,
    pub total_fusion_flops: u64,
    pub baseline_params: u64,
    pub baseline_flops: u64,
    /// 100 * (1 - new / baseline), from unrounded totals.
    pub params_reduced_pct: f64,
    pub flops_reduced_pct: f64,
}

const CONVENTION: &str = "1 MAC = 1 FLOP; conv/linear/batchnorm counted, activations free; \
fusion overhead (pooling, softmax, scaling, branch sums) reported separately";

/// Sums params/FLOPs over an architecture. Returns per-layer costs plus
/// resolved shapes.
pub fn tally(arch: &ArchSpec) -> Result<(Vec<LayerCost>, Vec<Shape>)> {
    let shapes = arch.propagate()?;
    let mut costs = Vec::with_capacity(arch.layers.len());
    for idx in 0..arch.layers.len() {
        let input = match arch.layers[idx].input {
            Some(src) => shapes[src],
            None if idx == 0 => {
                let (c, h, w) = arch.input;
                Shape::Spatial { c, h, w }
            }
            None => shapes[idx - 1],
        };
        costs.push(layer_cost(arch, idx, &shapes, input)?);
    }
    Ok((costs, shapes))
}

/// Analyzes `arch`, reporting reductions relative to `baseline`.
pub fn analyze(arch: &ArchSpec, baseline: &ArchSpec) -> Result<ComplexityReport> {
    let (costs, shapes) = tally(arch)?;
    let (base_costs, _) = tally(baseline)?;

    let layers: Vec<LayerReport> = arch
        .layers
        .iter()
        .zip(costs.iter())
        .zip(shapes.iter())
        .map(|((node, cost), shape)| LayerReport {
            name: node.name.clone(),
            kind: node.kind.kind_name().to_string(),
            out_shape: shape.describe(),
            params: cost.params,
            flops: cost.flops,
            fusion_flops: cost.fusion_flops,
        })
        .collect();

    let total_params: u64 = costs.iter().map(|c| c.params).sum();
    let total_flops: u64 = costs.iter().map(|c| c.flops).sum();
    let total_fusion_flops: u64 = costs.iter().map(|c| c.fusion_flops).sum();
    let baseline_params: u64 = base_costs.iter().map(|c| c.params).sum();
    let baseline_flops: u64 = base_costs.iter().map(|c| c.flops).sum();

    let pct = |new: u64, base: u64| {
        if base == 0 {
            0.0
        } else {
            100.0 * (1.0 - new as f64 / base as f64)
        }
    };

    Ok(ComplexityReport {
        convention: CONVENTION.to_string(),
        arch: arch.name.clone(),
        baseline: baseline.name.clone(),
        layers,
        total_params,
        total_flops,
        total_fusion_flops,
        baseline_params,
        baseline_flops,
        params_reduced_pct: pct(total_params, baseline_params),
        flops_reduced_pct: pct(total_flops, baseline_flops),
    })
}

fn human(v: u64) -> String {
    if v >= 1_000_000_000 {
        format!("{:.2}G", v as f64 / 1e9)
    } else if v >= 1_000_000 {
        format!("{:.2}M", v as f64 / 1e6)
    } else if v >= 1_000 {
        format!("{:.2}K", v as f64 / 1e3)
    } else {
        v.to_string()
    }
}

impl ComplexityReport {
    /// Deterministic human-readable table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("arch: {}  (baseline: {})\n", self.arch, self.baseline));
        out.push_str(&format!("convention: {}\n", self.convention));
        out.push_str(&format!(
            "{:<22} {:>9} {:>12} {:>14} {:>12}\n",
            "layer", "kind", "out", "params", "flops"
        ));
        for l in &self.layers {
            out.push_str(&format!(
                "{:<22} {:>9} {:>12} {:>14} {:>12}\n",
                l.name, l.kind, l.out_shape, l.params, l.flops
            ));
        }
        out.push_str(&format!(
            "total: {} params ({}), {} flops ({}), fusion overhead {} flops\n",
            self.total_params,
            human(self.total_params),
            self.total_flops,
            human(self.total_flops),
            human(self.total_fusion_flops),
        ));
        out.push_str(&format!(
            "baseline: {} params ({}), {} flops ({})\n",
            self.baseline_params,
            human(self.baseline_params),
            self.baseline_flops,
            human(self.baseline_flops),
        ));
        out.push_str(&format!(
            "reduced: params {:.2}%, flops {:.2}%\n",
            self.params_reduced_pct, self.flops_reduced_pct
        ));
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_vanilla_conv_count() {
        let kind = LayerKind::Conv {
            in_channels: 64,
            out_channels: 64,
            kernel: 3,
            stride: 1,
            padding: 1,
            groups: 1,
        };
        let out = Shape::Spatial { c: 64, h: 8, w: 8 };
        let cost = count_vanilla(&kind, out, out).unwrap();
        assert_eq!(cost.params, 36_864);
        assert_eq!(cost.flops, 36_864 * 64);
    }

    #[test]
    fn spconv_count_closed_form_and_ratio() {
        let config = SPConvConfig::new(64, 64, 3, 0.5, 2);
        let cost = count_spconv(&config, 8, 8).unwrap();
        assert_eq!(cost.params, 13_312);
        // Eq-style identity: conv MACs per position equal the param count.
        assert_eq!(cost.flops - cost.fusion_flops, 13_312 * 64);
        // vanilla / spconv parameter ratio rounds to 2.8
        let vanilla = 36_864u64;
        let ratio_times_10 = (vanilla * 10 + cost.params / 2) / cost.params;
        assert_eq!(ratio_times_10, 28);
    }

    #[test]
    fn spconv_degenerate_equals_vanilla_count() {
        let config = SPConvConfig::new(64, 64, 3, 1.0, 1)
            .with_rep_mode(RepMode::Vanilla)
            .without_redundant()
            .with_fusion(FusionMode::Sum);
        let cost = count_spconv(&config, 8, 8).unwrap();
        assert_eq!(cost.params, 36_864);
        assert_eq!(cost.fusion_flops, 0);
        assert_eq!(cost.flops, 36_864 * 64);
    }

    #[test]
    fn param_monotonicity_in_alpha_and_groups() {
        let alphas = [0.25, 0.5, 0.75];
        let mut last = 0;
        for &alpha in &alphas {
            let cfg = SPConvConfig::new(64, 64, 3, alpha, 2);
            let p = count_spconv(&cfg, 8, 8).unwrap().params;
            assert!(p >= last, "params must not decrease in alpha");
            last = p;
        }
        let mut last = u64::MAX;
        for &g in &[1usize, 2, 4, 8] {
            let cfg = SPConvConfig::new(64, 64, 3, 0.5, g);
            let p = count_spconv(&cfg, 8, 8).unwrap().params;
            assert!(p <= last, "params must not increase in groups");
            last = p;
        }
    }

    #[test]
    fn propagation_failure_names_the_layer() {
        let arch = ArchSpec {
            name: "bad".into(),
            input: (3, 8, 8),
            layers: vec![LayerNode {
                name: "conv1".into(),
                kind: LayerKind::Conv {
                    in_channels: 4,
                    out_channels: 8,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    groups: 1,
                },
                input: None,
            }],
        };
        let err = arch.propagate().unwrap_err();
        assert!(err.to_string().contains("conv1"), "{err}");
    }

    #[test]
    fn arch_json_round_trip() {
        let arch = builtin_arch("resnet20").unwrap();
        let text = arch.to_json().unwrap();
        let back = ArchSpec::from_json(&text).unwrap();
        assert_eq!(arch, back);
    }
}

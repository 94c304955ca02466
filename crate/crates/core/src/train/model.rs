//! Executable network graph built from a declarative architecture
//! description. Forward/backward walk the ordered node list; residual
//! topology is expressed through explicit input and skip indices, and
//! gradients are accumulated per producing node so a value consumed twice
//! (block input feeding both the main path and a projection shortcut)
//! receives the sum of its consumers' gradients.

use crate::complexity::{ArchSpec, LayerKind};
use crate::error::{Error, Result};
use crate::spconv::{init_params, spconv_backward, spconv_forward_with, SPConvCache, SPConvConfig, SPConvParams};
use crate::tensor::{ChannelStats, ConvGeom, ConvScratch, Tensor4};
use crate::train::layers::{
    maxpool_backward, maxpool_forward, BatchNorm, BatchNormCache, ConvLayer, Linear, Mode, Value,
};

enum Node {
    Conv(ConvLayer),
    SPConv {
        config: SPConvConfig,
        params: SPConvParams,
        grads: SPConvParams,
    },
    BatchNorm(BatchNorm),
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    GapHead,
    Add {
        skip_from: usize,
    },
    Slice {
        keep: usize,
    },
    Linear(Linear),
}

enum NodeCache {
    None,
    Map(Tensor4),
    VecIn(ChannelStats),
    BatchNorm(BatchNormCache),
    MaxPool { input: Tensor4, argmax: Vec<usize> },
    SPConv(Box<SPConvCache>),
    ReluMapMask(Vec<bool>),
    ReluVecMask(Vec<bool>),
}

/// A buildable, trainable network.
pub struct ModelGraph {
    arch: ArchSpec,
    nodes: Vec<Node>,
    inputs: Vec<Option<usize>>,
    /// Output value of every node from the latest forward pass.
    values: Vec<Option<Value>>,
    caches: Vec<NodeCache>,
    scratch: ConvScratch,
}

fn mix_seed(seed: u64, idx: usize) -> u64 {
    // splitmix64 step keyed by the layer index.
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(idx as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ModelGraph {
    /// Instantiates every layer of `arch` with seed-derived initial weights.
    pub fn build(arch: &ArchSpec, params_seed: u64) -> Result<ModelGraph> {
        arch.propagate().map_err(|e| match e {
            Error::Propagation { layer, reason } => Error::Propagation { layer, reason },
            other => other,
        })?;
        let mut nodes = Vec::with_capacity(arch.layers.len());
        let mut inputs = Vec::with_capacity(arch.layers.len());
        for (idx, layer) in arch.layers.iter().enumerate() {
            let seed = mix_seed(params_seed, idx);
            let node = match &layer.kind {
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    groups,
                } => Node::Conv(ConvLayer::new(
                    *in_channels,
                    *out_channels,
                    *kernel,
                    ConvGeom::new(*stride, *padding, *groups),
                    seed,
                )),
                LayerKind::SPConv { .. } => {
                    let config = arch.spconv_config(idx)?;
                    let params = init_params(&config, seed)?;
                    let grads = params.zeros_like();
                    Node::SPConv {
                        config,
                        params,
                        grads,
                    }
                }
                LayerKind::BatchNorm { channels } => Node::BatchNorm(BatchNorm::new(*channels)),
                LayerKind::Relu => Node::Relu,
                LayerKind::MaxPool {
                    kernel,
                    stride,
                    padding,
                } => Node::MaxPool {
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                },
                LayerKind::GapHead => Node::GapHead,
                LayerKind::Add { skip_from } => Node::Add {
                    skip_from: *skip_from,
                },
                LayerKind::Slice { keep } => Node::Slice { keep: *keep },
                LayerKind::Linear {
                    in_features,
                    out_features,
                } => Node::Linear(Linear::new(*in_features, *out_features, seed)),
            };
            nodes.push(node);
            inputs.push(layer.input);
        }
        let n = nodes.len();
        Ok(ModelGraph {
            arch: arch.clone(),
            nodes,
            inputs,
            values: (0..n).map(|_| None).collect(),
            caches: (0..n).map(|_| NodeCache::None).collect(),
            scratch: ConvScratch::default(),
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    /// Number of trainable scalars (batch norm running statistics excluded).
    pub fn param_count(&self) -> u64 {
        let mut total = 0u64;
        self.visit_params(|slice, _| total += slice.len() as u64);
        total
    }

    /// Number of classes produced by the final linear layer.
    pub fn classes(&self) -> usize {
        self.nodes
            .iter()
            .rev()
            .find_map(|n| match n {
                Node::Linear(l) => Some(l.out_features),
                _ => None,
            })
            .unwrap_or(0)
    }

    fn visit_params(&self, mut f: impl FnMut(&[f64], &[f64])) {
        for node in &self.nodes {
            match node {
                Node::Conv(c) => f(c.weights.data(), c.grad.data()),
                Node::SPConv { params, grads, .. } => {
                    for (p, g) in params.blocks().iter().zip(grads.blocks().iter()) {
                        f(p.data(), g.data());
                    }
                }
                Node::BatchNorm(bn) => {
                    f(&bn.gamma, &bn.grad_gamma);
                    f(&bn.beta, &bn.grad_beta);
                }
                Node::Linear(l) => {
                    f(&l.weight, &l.grad_weight);
                    f(&l.bias, &l.grad_bias);
                }
                _ => {}
            }
        }
    }

    /// Visits (parameter slice, gradient slice) pairs mutably in a stable
    /// order; the optimizer and the flat accessors are built on this.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&mut [f64], &mut [f64])) {
        for node in &mut self.nodes {
            match node {
                Node::Conv(c) => {
                    // Split borrow: weights and grad live in the same struct.
                    let ConvLayer { weights, grad, .. } = c;
                    f(weights.data_mut(), grad.data_mut());
                }
                Node::SPConv { params, grads, .. } => {
                    for (p, g) in params
                        .blocks_mut()
                        .into_iter()
                        .zip(grads.blocks_mut().into_iter())
                    {
                        f(p.data_mut(), g.data_mut());
                    }
                }
                Node::BatchNorm(bn) => {
                    f(&mut bn.gamma, &mut bn.grad_gamma);
                    f(&mut bn.beta, &mut bn.grad_beta);
                }
                Node::Linear(l) => {
                    f(&mut l.weight, &mut l.grad_weight);
                    f(&mut l.bias, &mut l.grad_bias);
                }
                _ => {}
            }
        }
    }

    /// All parameters flattened into one vector (stable order).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(|p, _| out.extend_from_slice(p));
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_params_mut(|p, _| {
            p.copy_from_slice(&flat[offset..offset + p.len()]);
            offset += p.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    pub fn grads_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(|_, g| out.extend_from_slice(g));
        out
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(|_, g| g.fill(0.0));
    }

    fn input_value(&self, idx: usize, input: &Value) -> Result<Value> {
        Ok(match self.inputs[idx] {
            Some(src) => self.values[src]
                .clone()
                .ok_or_else(|| Error::State(format!("value of layer {src} not computed")))?,
            None => {
                if idx == 0 {
                    input.clone()
                } else {
                    self.values[idx - 1]
                        .clone()
                        .ok_or_else(|| Error::State(format!("value of layer {} missing", idx - 1)))?
                }
            }
        })
    }

    /// Runs the network on a batch, returning the class logits.
    pub fn forward(&mut self, x: &Tensor4, mode: Mode) -> Result<ChannelStats> {
        let input = Value::Map(x.clone());
        for idx in 0..self.nodes.len() {
            let in_val = self.input_value(idx, &input)?;
            let (out, cache) = self.forward_node(idx, in_val, mode)?;
            self.values[idx] = Some(out);
            self.caches[idx] = cache;
        }
        let last = self
            .values
            .last()
            .and_then(|v| v.clone())
            .ok_or_else(|| Error::State("empty network".into()))?;
        last.as_vec().cloned()
    }

    fn forward_node(&mut self, idx: usize, input: Value, mode: Mode) -> Result<(Value, NodeCache)> {
        match &mut self.nodes[idx] {
            Node::Conv(conv) => {
                let x = input.as_map()?;
                let y = conv.forward(x, &mut self.scratch)?;
                Ok((Value::Map(y), NodeCache::Map(x.clone())))
            }
            Node::SPConv { config, params, .. } => {
                let x = input.as_map()?;
                let (y, cache) = spconv_forward_with(x, params, config, &mut self.scratch)?;
                Ok((Value::Map(y), NodeCache::SPConv(Box::new(cache))))
            }
            Node::BatchNorm(bn) => {
                let x = input.as_map()?;
                let (y, cache) = bn.forward(x, mode)?;
                Ok((Value::Map(y), NodeCache::BatchNorm(cache)))
            }
            Node::Relu => match input {
                Value::Map(t) => {
                    let mask: Vec<bool> = t.data().iter().map(|&v| v > 0.0).collect();
                    let mut y = t;
                    for v in y.data_mut().iter_mut() {
                        if *v <= 0.0 {
                            *v = 0.0;
                        }
                    }
                    Ok((Value::Map(y), NodeCache::ReluMapMask(mask)))
                }
                Value::Vec(t) => {
                    let mask: Vec<bool> = t.data().iter().map(|&v| v > 0.0).collect();
                    let mut y = t;
                    for v in y.data_mut().iter_mut() {
                        if *v <= 0.0 {
                            *v = 0.0;
                        }
                    }
                    Ok((Value::Vec(y), NodeCache::ReluVecMask(mask)))
                }
            },
            Node::MaxPool {
                kernel,
                stride,
                padding,
            } => {
                let x = input.as_map()?;
                let (y, argmax) = maxpool_forward(x, *kernel, *stride, *padding)?;
                Ok((
                    Value::Map(y),
                    NodeCache::MaxPool {
                        input: x.clone(),
                        argmax,
                    },
                ))
            }
            Node::GapHead => {
                let x = input.as_map()?;
                let stats = crate::tensor::gap(x);
                let (_, _, h, w) = x.shape();
                // Cache only the spatial extent, reconstructed from a 1x1 map.
                Ok((
                    Value::Vec(stats),
                    NodeCache::Map(Tensor4::zeros(1, 1, h, w)),
                ))
            }
            Node::Add { skip_from } => {
                let a = input.as_map()?;
                let skip = self.values[*skip_from]
                    .as_ref()
                    .ok_or_else(|| Error::State("skip value missing".into()))?
                    .as_map()?;
                Ok((Value::Map(a.add(skip)?), NodeCache::None))
            }
            Node::Slice { keep } => {
                let x = input.as_map()?;
                let (n, c, h, w) = x.shape();
                if *keep == c {
                    return Ok((Value::Map(x.clone()), NodeCache::Map(Tensor4::zeros(n, c, h, w))));
                }
                let (front, _) = crate::tensor::split_channels(x, *keep)?;
                Ok((
                    Value::Map(front),
                    NodeCache::Map(Tensor4::zeros(n, c, h, w)),
                ))
            }
            Node::Linear(lin) => {
                let x = input.as_vec()?;
                let y = lin.forward(x)?;
                Ok((Value::Vec(y), NodeCache::VecIn(x.clone())))
            }
        }
    }

    /// Backpropagates the loss gradient at the logits through the whole
    /// graph, accumulating parameter gradients. Returns the gradient with
    /// respect to the network input.
    pub fn backward(&mut self, grad_logits: &ChannelStats) -> Result<Tensor4> {
        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Value>> = (0..n_nodes).map(|_| None).collect();
        let mut input_grad: Option<Value> = None;
        *grads
            .last_mut()
            .ok_or_else(|| Error::State("empty network".into()))? =
            Some(Value::Vec(grad_logits.clone()));

        for idx in (0..n_nodes).rev() {
            let Some(grad_out) = grads[idx].take() else {
                continue;
            };
            let (grad_in, extra) = self.backward_node(idx, &grad_out)?;
            // Route the input gradient to the producing node (or the
            // network input).
            let dst = match self.inputs[idx] {
                Some(src) => Some(src),
                None if idx == 0 => None,
                None => Some(idx - 1),
            };
            match dst {
                Some(src) => accumulate_slot(&mut grads[src], grad_in)?,
                None => accumulate_slot(&mut input_grad, grad_in)?,
            }
            if let Some((skip_idx, skip_grad)) = extra {
                accumulate_slot(&mut grads[skip_idx], skip_grad)?;
            }
        }

        match input_grad {
            Some(Value::Map(t)) => Ok(t),
            _ => Err(Error::State("input gradient missing".into())),
        }
    }

    fn backward_node(
        &mut self,
        idx: usize,
        grad_out: &Value,
    ) -> Result<(Value, Option<(usize, Value)>)> {
        match &mut self.nodes[idx] {
            Node::Conv(conv) => {
                let NodeCache::Map(x) = &self.caches[idx] else {
                    return Err(Error::State("conv cache missing".into()));
                };
                let gx = conv.backward(x, grad_out.as_map()?, &mut self.scratch)?;
                Ok((Value::Map(gx), None))
            }
            Node::SPConv {
                config,
                params,
                grads,
            } => {
                let NodeCache::SPConv(cache) = &self.caches[idx] else {
                    return Err(Error::State("spconv cache missing".into()));
                };
                let (gx, gp) = spconv_backward(cache, grad_out.as_map()?, params, config)?;
                for (acc, g) in grads.blocks_mut().into_iter().zip(gp.blocks().into_iter()) {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data().iter()) {
                        *a += v;
                    }
                }
                Ok((Value::Map(gx), None))
            }
            Node::BatchNorm(bn) => {
                let NodeCache::BatchNorm(cache) = &self.caches[idx] else {
                    return Err(Error::State("batchnorm cache missing".into()));
                };
                let gx = bn.backward(cache, grad_out.as_map()?)?;
                Ok((Value::Map(gx), None))
            }
            Node::Relu => match (&self.caches[idx], grad_out) {
                (NodeCache::ReluMapMask(mask), Value::Map(g)) => {
                    let mut gx = g.clone();
                    for (v, &keep) in gx.data_mut().iter_mut().zip(mask.iter()) {
                        if !keep {
                            *v = 0.0;
                        }
                    }
                    Ok((Value::Map(gx), None))
                }
                (NodeCache::ReluVecMask(mask), Value::Vec(g)) => {
                    let mut gx = g.clone();
                    for (v, &keep) in gx.data_mut().iter_mut().zip(mask.iter()) {
                        if !keep {
                            *v = 0.0;
                        }
                    }
                    Ok((Value::Vec(gx), None))
                }
                _ => Err(Error::State("relu cache mismatch".into())),
            },
            Node::MaxPool { .. } => {
                let NodeCache::MaxPool { input, argmax } = &self.caches[idx] else {
                    return Err(Error::State("maxpool cache missing".into()));
                };
                let gx = maxpool_backward(input, argmax, grad_out.as_map()?);
                Ok((Value::Map(gx), None))
            }
            Node::GapHead => {
                let NodeCache::Map(extent) = &self.caches[idx] else {
                    return Err(Error::State("gap cache missing".into()));
                };
                let (_, _, h, w) = extent.shape();
                let g = grad_out.as_vec()?;
                let (n, c) = g.shape();
                let inv = 1.0 / (h * w) as f64;
                let mut gx = Tensor4::zeros(n, c, h, w);
                for i in 0..n {
                    for j in 0..c {
                        let v = g.at(i, j) * inv;
                        let base = gx.index(i, j, 0, 0);
                        for p in 0..h * w {
                            gx.data_mut()[base + p] = v;
                        }
                    }
                }
                Ok((Value::Map(gx), None))
            }
            Node::Add { skip_from } => {
                let g = grad_out.as_map()?;
                Ok((
                    Value::Map(g.clone()),
                    Some((*skip_from, Value::Map(g.clone()))),
                ))
            }
            Node::Slice { keep } => {
                let NodeCache::Map(extent) = &self.caches[idx] else {
                    return Err(Error::State("slice cache missing".into()));
                };
                let (n, c, h, w) = extent.shape();
                let g = grad_out.as_map()?;
                if *keep == c {
                    return Ok((Value::Map(g.clone()), None));
                }
                let mut gx = Tensor4::zeros(n, c, h, w);
                let plane = h * w;
                for i in 0..n {
                    for j in 0..*keep {
                        let src = g.index(i, j, 0, 0);
                        let dst = gx.index(i, j, 0, 0);
                        gx.data_mut()[dst..dst + plane]
                            .copy_from_slice(&g.data()[src..src + plane]);
                    }
                }
                Ok((Value::Map(gx), None))
            }
            Node::Linear(lin) => {
                let NodeCache::VecIn(x) = &self.caches[idx] else {
                    return Err(Error::State("linear cache missing".into()));
                };
                let gx = lin.backward(x, grad_out.as_vec()?)?;
                Ok((Value::Vec(gx), None))
            }
        }
    }
}

fn accumulate_slot(slot: &mut Option<Value>, grad: Value) -> Result<()> {
    match slot {
        Some(existing) => existing.accumulate(&grad),
        None => {
            *slot = Some(grad);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complexity::{builtin_arch, replace_policy, tally, ReplaceVariant};

    #[test]
    fn built_model_parameter_totals_match_analyzer_exactly() {
        for name in ["resnet8", "resnet20", "vgg16_cifar"] {
            let arch = builtin_arch(name).unwrap();
            let model = ModelGraph::build(&arch, 1).unwrap();
            let (costs, _) = tally(&arch).unwrap();
            let expect: u64 = costs.iter().map(|c| c.params).sum();
            assert_eq!(model.param_count(), expect, "{name}");

            for variant in ReplaceVariant::all() {
                let replaced = replace_policy(&arch, 0.5, 2, variant).unwrap();
                let model = ModelGraph::build(&replaced, 1).unwrap();
                let (costs, _) = tally(&replaced).unwrap();
                let expect: u64 = costs.iter().map(|c| c.params).sum();
                assert_eq!(model.param_count(), expect, "{name}/{}", variant.label());
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_initial_parameters() {
        let arch = builtin_arch("resnet8").unwrap();
        let a = ModelGraph::build(&arch, 7).unwrap().params_flat();
        let b = ModelGraph::build(&arch, 7).unwrap().params_flat();
        assert_eq!(a, b);
        let c = ModelGraph::build(&arch, 8).unwrap().params_flat();
        assert_ne!(a, c);
    }

    #[test]
    fn forward_produces_class_logits() {
        let arch = builtin_arch("resnet8").unwrap().with_classes(4);
        let mut model = ModelGraph::build(&arch, 3).unwrap();
        let x = Tensor4::zeros(2, 3, 32, 32);
        let logits = model.forward(&x, Mode::Eval).unwrap();
        assert_eq!(logits.shape(), (2, 4));
        assert!(logits.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn spconv_resnet8_forward_backward_smoke() {
        let arch = builtin_arch("resnet8").unwrap().with_classes(4);
        let replaced = replace_policy(&arch, 0.5, 2, ReplaceVariant::Full).unwrap();
        let mut model = ModelGraph::build(&replaced, 5).unwrap();
        let x = Tensor4::from_fn(2, 3, 32, 32, |i, j, y, xx| {
            ((i + j + y + xx) % 7) as f64 * 0.1 - 0.3
        });
        let logits = model.forward(&x, Mode::Train).unwrap();
        let (n, c) = logits.shape();
        let grad = ChannelStats::constant(n, c, 0.5);
        let gx = model.backward(&grad).unwrap();
        assert_eq!(gx.shape(), x.shape());
        assert!(model.grads_flat().iter().any(|&g| g != 0.0));
    }
}

//! The split convolution operator.
//!
//! Input channels are partitioned positionally: the first `rep_count`
//! channels form the representative part, processed by a grouped k x k
//! convolution plus a pointwise convolution whose outputs are summed; the
//! remaining channels form the redundant part, processed by a strided
//! pointwise convolution only. The two branch outputs are recombined either
//! by direct summation or by a parameter-free channel attention: global
//! average pooling yields per-channel statistics for each branch, a two-way
//! softmax turns them into convex weights, and the output is the channel-wise
//! convex combination of the branches.
//!
//! Variant flags swap the representative path for a dense convolution or a
//! grouped-then-pointwise chain, drop the redundant branch, or replace the
//! attention with a plain sum; these are the ablation axes exposed by the
//! analyzer and the training harness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    concat_channels, conv2d_backward_with, conv2d_with, fuse, fusion_weights, gap, split_channels,
    ChannelStats, ConvGeom, ConvScratch, Tensor4, Weights4,
};

/// How the representative channels are processed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepMode {
    /// Grouped k x k and pointwise convolutions applied in parallel, summed.
    GwcPlusPwc,
    /// One dense k x k convolution.
    Vanilla,
    /// Grouped k x k convolution followed by a pointwise convolution.
    GwcThenPwc,
}

/// How the two branch outputs are recombined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Softmax channel attention over pooled branch statistics.
    Attention,
    /// Direct elementwise summation.
    Sum,
}

/// Operator hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SPConvConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// Fraction of input channels assigned to the representative part.
    pub alpha: f64,
    /// Group count of the representative grouped convolution.
    pub groups: usize,
    pub stride: usize,
    pub padding: usize,
    pub rep_mode: RepMode,
    pub redundant_enabled: bool,
    pub fusion: FusionMode,
}

/// Resolved channel partition of a valid configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelSplit {
    pub rep: usize,
    pub red: usize,
}

impl SPConvConfig {
    /// Default-shaped operator: stride 1, same padding, both branches,
    /// attention fusion.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        alpha: f64,
        groups: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            alpha,
            groups,
            stride: 1,
            padding: kernel / 2,
            rep_mode: RepMode::GwcPlusPwc,
            redundant_enabled: true,
            fusion: FusionMode::Attention,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_rep_mode(mut self, rep_mode: RepMode) -> Self {
        self.rep_mode = rep_mode;
        self
    }

    pub fn with_fusion(mut self, fusion: FusionMode) -> Self {
        self.fusion = fusion;
        self
    }

    pub fn without_redundant(mut self) -> Self {
        self.redundant_enabled = false;
        self
    }

    /// Validates every invariant and resolves the channel partition.
    ///
    /// The representative count is the largest multiple of `groups` that is
    /// at most round(alpha * L); configurations where that count would fall
    /// below `groups`, or where the redundant part would be empty while the
    /// redundant branch is enabled, are rejected.
    pub fn split(&self) -> Result<ChannelSplit> {
        let l = self.in_channels;
        let m = self.out_channels;
        if l == 0 || m == 0 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if self.kernel == 0 {
            return Err(Error::Config("kernel must be >= 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if self.groups == 0 {
            return Err(Error::Config("groups must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        let rounded = (self.alpha * l as f64).round() as usize;
        let rep = rounded - rounded % self.groups;
        if rep < self.groups || rep > l {
            return Err(Error::Config(format!(
                "representative count {rep} invalid for L={l}, alpha={}, g={}",
                self.alpha, self.groups
            )));
        }
        let red = l - rep;
        if self.redundant_enabled && red == 0 {
            return Err(Error::Config(
                "redundant branch enabled but no channels remain for it".into(),
            ));
        }
        if !self.redundant_enabled && rep != l {
            return Err(Error::Config(format!(
                "redundant branch disabled requires rep_count == in_channels, got {rep} != {l}"
            )));
        }
        let grouped = matches!(self.rep_mode, RepMode::GwcPlusPwc | RepMode::GwcThenPwc);
        if grouped && m % self.groups != 0 {
            return Err(Error::Config(format!(
                "out_channels {m} not divisible by groups {}",
                self.groups
            )));
        }
        // Branch outputs must agree spatially. A 1x1 path at padding 0 lines
        // up with the k x k path only under same-padding.
        let needs_alignment = self.redundant_enabled || self.rep_mode != RepMode::Vanilla;
        if needs_alignment && (self.kernel % 2 == 0 || self.padding != (self.kernel - 1) / 2) {
            return Err(Error::Config(format!(
                "padding {} does not align 1x1 and {k}x{k} branch outputs (need (k-1)/2)",
                self.padding,
                k = self.kernel
            )));
        }
        Ok(ChannelSplit { rep, red })
    }

    pub(crate) fn rep_geom(&self) -> ConvGeom {
        let groups = match self.rep_mode {
            RepMode::Vanilla => 1,
            _ => self.groups,
        };
        ConvGeom::new(self.stride, self.padding, groups)
    }

    pub(crate) fn pwc_geom(&self) -> ConvGeom {
        ConvGeom::new(self.stride, 0, 1)
    }
}

/// The operator's weight blocks. Blocks a variant does not use are absent.
#[derive(Debug, Clone, PartialEq)]
pub struct SPConvParams {
    /// Grouped (or, under the vanilla variant, dense) k x k kernel on the
    /// representative channels.
    pub gwc: Option<Weights4>,
    /// Pointwise kernel on the representative channels (on the grouped
    /// output under the chained variant).
    pub pwc_rep: Option<Weights4>,
    /// Pointwise kernel on the redundant channels.
    pub pwc_red: Option<Weights4>,
}

impl SPConvParams {
    pub fn scalar_count(&self) -> usize {
        self.blocks().iter().map(|w| w.len()).sum()
    }

    /// Same block layout with all-zero values; used for gradient slots.
    pub fn zeros_like(&self) -> SPConvParams {
        let z = |w: &Option<Weights4>| {
            w.as_ref().map(|w| {
                let (m, c, k, _) = w.shape();
                Weights4::zeros(m, c, k)
            })
        };
        SPConvParams {
            gwc: z(&self.gwc),
            pwc_rep: z(&self.pwc_rep),
            pwc_red: z(&self.pwc_red),
        }
    }

    /// Present blocks in the fixed (gwc, pwc_rep, pwc_red) order.
    pub fn blocks(&self) -> Vec<&Weights4> {
        [&self.gwc, &self.pwc_rep, &self.pwc_red]
            .into_iter()
            .flatten()
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Weights4> {
        [&mut self.gwc, &mut self.pwc_rep, &mut self.pwc_red]
            .into_iter()
            .flatten()
            .collect()
    }
}

/// Block shapes (m_out, c_in_per_group, k) for a configuration, in the fixed
/// (gwc, pwc_rep, pwc_red) order.
fn block_shapes(config: &SPConvConfig) -> Result<[Option<(usize, usize, usize)>; 3]> {
    let ChannelSplit { rep, red } = config.split()?;
    let m = config.out_channels;
    let k = config.kernel;
    let gwc = match config.rep_mode {
        RepMode::GwcPlusPwc | RepMode::GwcThenPwc => Some((m, rep / config.groups, k)),
        RepMode::Vanilla => Some((m, rep, k)),
    };
    let pwc_rep = match config.rep_mode {
        RepMode::GwcPlusPwc => Some((m, rep, 1)),
        RepMode::GwcThenPwc => Some((m, m, 1)),
        RepMode::Vanilla => None,
    };
    let pwc_red = config.redundant_enabled.then_some((m, red, 1));
    Ok([gwc, pwc_rep, pwc_red])
}

/// Number of weight scalars the operator allocates under `config`.
///
/// For the default variant this evaluates the closed form
/// (k*k*rep/g + rep + red) * M with integer channel counts; for other
/// variants it is the actual allocated count.
pub fn spconv_param_count(config: &SPConvConfig) -> Result<usize> {
    Ok(block_shapes(config)?
        .iter()
        .flatten()
        .map(|&(m, c, k)| m * c * k * k)
        .sum())
}

/// Draws every weight block i.i.d. from N(0, 2/fan_in), where fan_in counts
/// the input scalars feeding one output unit of that block. Fully
/// deterministic in `seed`.
pub fn init_params(config: &SPConvConfig, seed: u64) -> Result<SPConvParams> {
    let shapes = block_shapes(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |shape: Option<(usize, usize, usize)>| -> Result<Option<Weights4>> {
        let Some((m, c, k)) = shape else {
            return Ok(None);
        };
        let fan_in = c * k * k;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
            .map_err(|e| Error::Config(format!("bad init distribution: {e}")))?;
        let data: Vec<f64> = (0..m * c * k * k).map(|_| normal.sample(&mut rng)).collect();
        Ok(Some(Weights4::new(m, c, k, k, data)?))
    };
    Ok(SPConvParams {
        gwc: make(shapes[0])?,
        pwc_rep: make(shapes[1])?,
        pwc_red: make(shapes[2])?,
    })
}

fn expect_block<'a>(block: &'a Option<Weights4>, name: &'static str) -> Result<&'a Weights4> {
    block
        .as_ref()
        .ok_or_else(|| Error::Variant(format!("weight block `{name}` absent under this variant")))
}

/// Representative branch: U3 from the first `rep` channels.
pub fn representative_branch(
    x_rep: &Tensor4,
    params: &SPConvParams,
    config: &SPConvConfig,
) -> Result<Tensor4> {
    let mut scratch = ConvScratch::default();
    representative_branch_with(x_rep, params, config, &mut scratch).map(|(u3, _)| u3)
}

/// Returns the branch output and, under the chained variant, the
/// intermediate grouped output needed by the backward pass.
fn representative_branch_with(
    x_rep: &Tensor4,
    params: &SPConvParams,
    config: &SPConvConfig,
    scratch: &mut ConvScratch,
) -> Result<(Tensor4, Option<Tensor4>)> {
    let ChannelSplit { rep, .. } = config.split()?;
    if x_rep.channels() != rep {
        return Err(Error::Dimension {
            axis: "representative channels",
            expected: rep,
            got: x_rep.channels(),
        });
    }
    match config.rep_mode {
        RepMode::GwcPlusPwc => {
            let grouped = conv2d_with(
                x_rep,
                expect_block(&params.gwc, "gwc")?,
                &config.rep_geom(),
                scratch,
            )?;
            let pointwise = conv2d_with(
                x_rep,
                expect_block(&params.pwc_rep, "pwc_rep")?,
                &config.pwc_geom(),
                scratch,
            )?;
            Ok((grouped.add(&pointwise)?, None))
        }
        RepMode::Vanilla => {
            let dense = conv2d_with(
                x_rep,
                expect_block(&params.gwc, "gwc")?,
                &config.rep_geom(),
                scratch,
            )?;
            Ok((dense, None))
        }
        RepMode::GwcThenPwc => {
            let mid = conv2d_with(
                x_rep,
                expect_block(&params.gwc, "gwc")?,
                &config.rep_geom(),
                scratch,
            )?;
            let out = conv2d_with(
                &mid,
                expect_block(&params.pwc_rep, "pwc_rep")?,
                &ConvGeom::unit(),
                scratch,
            )?;
            Ok((out, Some(mid)))
        }
    }
}

/// Redundant branch: U1 = strided pointwise convolution of the trailing
/// channels, so its output aligns spatially with the representative branch.
pub fn redundant_branch(
    x_red: &Tensor4,
    params: &SPConvParams,
    config: &SPConvConfig,
) -> Result<Tensor4> {
    if !config.redundant_enabled {
        return Err(Error::Variant(
            "redundant branch invoked while disabled".into(),
        ));
    }
    let ChannelSplit { red, .. } = config.split()?;
    if x_red.channels() != red {
        return Err(Error::Dimension {
            axis: "redundant channels",
            expected: red,
            got: x_red.channels(),
        });
    }
    let mut scratch = ConvScratch::default();
    conv2d_with(
        x_red,
        expect_block(&params.pwc_red, "pwc_red")?,
        &config.pwc_geom(),
        &mut scratch,
    )
}

/// Activations saved by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct SPConvCache {
    config: SPConvConfig,
    x_rep: Tensor4,
    x_red: Option<Tensor4>,
    /// Grouped-path intermediate, present only under the chained variant.
    rep_mid: Option<Tensor4>,
    u3: Tensor4,
    u1: Option<Tensor4>,
    beta: Option<ChannelStats>,
    gamma: Option<ChannelStats>,
}

impl SPConvCache {
    pub fn branch_outputs(&self) -> (&Tensor4, Option<&Tensor4>) {
        (&self.u3, self.u1.as_ref())
    }

    pub fn attention_weights(&self) -> Option<(&ChannelStats, &ChannelStats)> {
        self.beta.as_ref().zip(self.gamma.as_ref())
    }
}

/// Full operator forward pass. Returns the fused output (always
/// `out_channels` channels) and the cache for the backward pass.
pub fn spconv_forward(
    x: &Tensor4,
    params: &SPConvParams,
    config: &SPConvConfig,
) -> Result<(Tensor4, SPConvCache)> {
    let mut scratch = ConvScratch::default();
    spconv_forward_with(x, params, config, &mut scratch)
}

pub fn spconv_forward_with(
    x: &Tensor4,
    params: &SPConvParams,
    config: &SPConvConfig,
    scratch: &mut ConvScratch,
) -> Result<(Tensor4, SPConvCache)> {
    let ChannelSplit { rep, red } = config.split()?;
    if x.channels() != config.in_channels {
        return Err(Error::Dimension {
            axis: "input channels",
            expected: config.in_channels,
            got: x.channels(),
        });
    }
    let (x_rep, x_red) = if red > 0 {
        let (front, back) = split_channels(x, rep)?;
        (front, Some(back))
    } else {
        (x.clone(), None)
    };

    let (u3, rep_mid) = representative_branch_with(&x_rep, params, config, scratch)?;

    if !config.redundant_enabled {
        let cache = SPConvCache {
            config: *config,
            x_rep,
            x_red: None,
            rep_mid,
            u3: u3.clone(),
            u1: None,
            beta: None,
            gamma: None,
        };
        return Ok((u3, cache));
    }

    let x_red = x_red.expect("redundant enabled implies red > 0");
    let u1 = conv2d_with(
        &x_red,
        expect_block(&params.pwc_red, "pwc_red")?,
        &config.pwc_geom(),
        scratch,
    )?;

    let (y, beta, gamma) = match config.fusion {
        FusionMode::Sum => (u3.add(&u1)?, None, None),
        FusionMode::Attention => {
            let s3 = gap(&u3);
            let s1 = gap(&u1);
            let (beta, gamma) = fusion_weights(&s3, &s1)?;
            let y = fuse(&u3, &u1, &beta, &gamma)?;
            (y, Some(beta), Some(gamma))
        }
    };

    let cache = SPConvCache {
        config: *config,
        x_rep,
        x_red: Some(x_red),
        rep_mid,
        u3,
        u1: Some(u1),
        beta,
        gamma,
    };
    Ok((y, cache))
}

fn rep_branch_backward(
    cache: &SPConvCache,
    grad_u3: &Tensor4,
    params: &SPConvParams,
    config: &SPConvConfig,
    scratch: &mut ConvScratch,
) -> Result<(Tensor4, Option<Weights4>, Option<Weights4>)> {
    match config.rep_mode {
        RepMode::GwcPlusPwc => {
            let (gx_g, gw_g) = conv2d_backward_with(
                &cache.x_rep,
                expect_block(&params.gwc, "gwc")?,
                &config.rep_geom(),
                grad_u3,
                scratch,
            )?;
            let (gx_p, gw_p) = conv2d_backward_with(
                &cache.x_rep,
                expect_block(&params.pwc_rep, "pwc_rep")?,
                &config.pwc_geom(),
                grad_u3,
                scratch,
            )?;
            Ok((gx_g.add(&gx_p)?, Some(gw_g), Some(gw_p)))
        }
        RepMode::Vanilla => {
            let (gx, gw) = conv2d_backward_with(
                &cache.x_rep,
                expect_block(&params.gwc, "gwc")?,
                &config.rep_geom(),
                grad_u3,
                scratch,
            )?;
            Ok((gx, Some(gw), None))
        }
        RepMode::GwcThenPwc => {
            let mid = cache
                .rep_mid
                .as_ref()
                .ok_or_else(|| Error::State("chained variant cache lacks intermediate".into()))?;
            let (g_mid, gw_p) = conv2d_backward_with(
                mid,
                expect_block(&params.pwc_rep, "pwc_rep")?,
                &ConvGeom::unit(),
                grad_u3,
                scratch,
            )?;
            let (gx, gw_g) = conv2d_backward_with(
                &cache.x_rep,
                expect_block(&params.gwc, "gwc")?,
                &config.rep_geom(),
                &g_mid,
                scratch,
            )?;
            Ok((gx, Some(gw_g), Some(gw_p)))
        }
    }
}

/// Exact reverse-mode gradients of `spconv_forward` with respect to the
/// input and every weight block, including the pooled-statistics path: the
/// attention weights depend on both branch outputs, and that dependence is
/// differentiated through.
pub fn spconv_backward(
    cache: &SPConvCache,
    grad_out: &Tensor4,
    params: &SPConvParams,
    config: &SPConvConfig,
) -> Result<(Tensor4, SPConvParams)> {
    if cache.config != *config {
        return Err(Error::State(
            "cache was produced under a different configuration".into(),
        ));
    }
    if grad_out.shape() != cache.u3.shape() {
        return Err(Error::Dimension {
            axis: "grad_out shape",
            expected: cache.u3.data().len(),
            got: grad_out.data().len(),
        });
    }
    let mut scratch = ConvScratch::default();

    // Gradients flowing into each branch output.
    let (grad_u3, grad_u1) = match (&cache.u1, config.fusion) {
        (None, _) => (grad_out.clone(), None),
        (Some(_), FusionMode::Sum) => (grad_out.clone(), Some(grad_out.clone())),
        (Some(u1), FusionMode::Attention) => {
            let beta = cache
                .beta
                .as_ref()
                .ok_or_else(|| Error::State("attention cache lacks beta".into()))?;
            let gamma = cache
                .gamma
                .as_ref()
                .ok_or_else(|| Error::State("attention cache lacks gamma".into()))?;
            let u3 = &cache.u3;
            let (n, c, h, w) = u3.shape();
            let plane = h * w;
            let mut g3 = Tensor4::zeros(n, c, h, w);
            let mut g1 = Tensor4::zeros(n, c, h, w);
            for i in 0..n {
                for j in 0..c {
                    let b = beta.at(i, j);
                    let g = gamma.at(i, j);
                    let base = u3.index(i, j, 0, 0);
                    // dL/dbeta for this channel: sum over positions of
                    // grad_out * (U3 - U1).
                    let mut dl_dbeta = 0.0;
                    for p in 0..plane {
                        dl_dbeta += grad_out.data()[base + p]
                            * (u3.data()[base + p] - u1.data()[base + p]);
                    }
                    // Through the two-way softmax (d beta / d S3 = beta*gamma,
                    // d beta / d S1 = -beta*gamma) and the pooling mean.
                    let ds = dl_dbeta * b * g / plane as f64;
                    for p in 0..plane {
                        let go = grad_out.data()[base + p];
                        g3.data_mut()[base + p] = b * go + ds;
                        g1.data_mut()[base + p] = g * go - ds;
                    }
                }
            }
            (g3, Some(g1))
        }
    };

    let (gx_rep, gw_gwc, gw_pwc_rep) =
        rep_branch_backward(cache, &grad_u3, params, config, &mut scratch)?;

    let (grad_x, gw_pwc_red) = match (&cache.x_red, grad_u1) {
        (Some(x_red), Some(grad_u1)) => {
            let (gx_red, gw_red) = conv2d_backward_with(
                x_red,
                expect_block(&params.pwc_red, "pwc_red")?,
                &config.pwc_geom(),
                &grad_u1,
                &mut scratch,
            )?;
            (concat_channels(&gx_rep, &gx_red)?, Some(gw_red))
        }
        (None, None) => (gx_rep, None),
        _ => return Err(Error::State("cache and fusion gradients disagree".into())),
    };

    Ok((
        grad_x,
        SPConvParams {
            gwc: gw_gwc,
            pwc_rep: gw_pwc_rep,
            pwc_red: gw_pwc_red,
        },
    ))
}

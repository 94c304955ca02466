//! Finite-difference verification of every backward path through the split
//! convolution operator: each representative mode, both fusion modes, the
//! redundant branch on and off, and strided geometry.

mod common;

use common::{rand_tensor, relative_error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spconv::spconv::{
    init_params, spconv_backward, spconv_forward, FusionMode, RepMode, SPConvConfig, SPConvParams,
};
use spconv::tensor::Tensor4;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Scalar loss: sum of element products with a fixed projection tensor, so
/// grad_out equals the projection.
fn project(y: &Tensor4, proj: &Tensor4) -> f64 {
    y.data()
        .iter()
        .zip(proj.data().iter())
        .map(|(a, b)| a * b)
        .sum()
}

fn forward_loss(x: &Tensor4, params: &SPConvParams, config: &SPConvConfig, proj: &Tensor4) -> f64 {
    let (y, _) = spconv_forward(x, params, config).unwrap();
    project(&y, proj)
}

/// Checks analytic gradients of the operator against central differences on
/// every input element and every weight scalar.
fn check_operator(config: &SPConvConfig, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params(config, seed ^ 0x5eed).unwrap();
    let x = rand_tensor(&mut rng, 1, config.in_channels, 5, 5);
    let (y, cache) = spconv_forward(&x, &params, config).unwrap();
    let (n, m, h, w) = y.shape();
    let proj = rand_tensor(&mut rng, n, m, h, w);

    let (grad_x, grad_params) = spconv_backward(&cache, &proj, &params, config).unwrap();

    let mut max_rel = 0.0f64;
    for idx in 0..x.data().len() {
        let mut xp = x.clone();
        xp.data_mut()[idx] += EPS;
        let mut xm = x.clone();
        xm.data_mut()[idx] -= EPS;
        let num =
            (forward_loss(&xp, &params, config, &proj) - forward_loss(&xm, &params, config, &proj))
                / (2.0 * EPS);
        max_rel = max_rel.max(relative_error(num, grad_x.data()[idx]));
    }

    fn block_mut(p: &mut SPConvParams, bi: usize) -> Option<&mut spconv::tensor::Weights4> {
        match bi {
            0 => p.gwc.as_mut(),
            1 => p.pwc_rep.as_mut(),
            _ => p.pwc_red.as_mut(),
        }
    }
    let grad_blocks = [&grad_params.gwc, &grad_params.pwc_rep, &grad_params.pwc_red];
    for (bi, grad_block) in grad_blocks.into_iter().enumerate() {
        let Some(gw) = grad_block else { continue };
        for idx in 0..gw.len() {
            let mut pp = params.clone();
            block_mut(&mut pp, bi).unwrap().data_mut()[idx] += EPS;
            let mut pm = params.clone();
            block_mut(&mut pm, bi).unwrap().data_mut()[idx] -= EPS;
            let num = (forward_loss(&x, &pp, config, &proj)
                - forward_loss(&x, &pm, config, &proj))
                / (2.0 * EPS);
            max_rel = max_rel.max(relative_error(num, gw.data()[idx]));
        }
    }
    max_rel
}

fn variant_configs() -> Vec<(String, SPConvConfig)> {
    let mut out = Vec::new();
    for rep_mode in [RepMode::GwcPlusPwc, RepMode::Vanilla, RepMode::GwcThenPwc] {
        for fusion in [FusionMode::Attention, FusionMode::Sum] {
            for stride in [1usize, 2] {
                let config = SPConvConfig::new(8, 8, 3, 0.5, 2)
                    .with_rep_mode(rep_mode)
                    .with_fusion(fusion)
                    .with_stride(stride);
                out.push((
                    format!("{rep_mode:?}/{fusion:?}/stride{stride}"),
                    config,
                ));
            }
        }
        // Redundant branch deleted: representative part covers all channels.
        let config = SPConvConfig::new(8, 8, 3, 1.0, 2)
            .with_rep_mode(rep_mode)
            .without_redundant();
        out.push((format!("{rep_mode:?}/no-redundant"), config));
    }
    out
}

#[test]
fn operator_gradients_match_finite_differences_for_all_variants() {
    for (seed, (name, config)) in variant_configs().into_iter().enumerate() {
        let max_rel = check_operator(&config, seed as u64 + 100);
        assert!(
            max_rel < TOL,
            "variant {name}: max relative error {max_rel:.3e} exceeds {TOL:e}"
        );
    }
}

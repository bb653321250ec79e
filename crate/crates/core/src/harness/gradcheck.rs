//! Finite-difference verification of a whole network in f64.

use phnet_tensor::{grad_check_coords, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{MlppSettings, PhNet, PhnetConfig};

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// Worst relative error over sampled input coordinates.
    pub input: f64,
    /// Worst relative error over sampled coordinates of every parameter.
    pub params: f64,
    pub worst_param: String,
    pub checked_params: usize,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        self.input.max(self.params)
    }
}

/// Two-stage network with one convolutional and one MLPP stage, small
/// enough for exhaustive finite differences.
pub fn tiny_gradcheck_config() -> PhnetConfig {
    PhnetConfig {
        num_stages: 2,
        base_channels: 2,
        max_channels: 16,
        in_channels: 1,
        num_classes: 2,
        spacing_mm: [1.0, 1.0, 2.0],
        patch_dhw: [4, 8, 8],
        mlpp_stages: Some(vec![1]),
        mlpp: MlppSettings::default(),
        blocks_per_stage: 1,
    }
}

fn weighted_sum(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> phnet_tensor::Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(y, w)?;
    g.sum_all(prod)
}

/// Compares analytic and central-difference gradients of a random weighted
/// sum of the logits, with respect to the input and to `per_param` sampled
/// coordinates of every parameter. Biases and affine terms are randomized
/// so that every path carries signal.
pub fn network_grad_check(cfg: &PhnetConfig, seed: u64, input_samples: usize, per_param: usize) -> Result<GradCheckReport> {
    let mut net = PhNet::<f64>::build(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0A11_CE55);
    for p in net.params.iter_mut() {
        let (lo, hi) = if p.name.ends_with("gamma") {
            (0.7, 1.3)
        } else if p.name.ends_with("bias") || p.name.ends_with("beta") {
            (-0.3, 0.3)
        } else {
            continue;
        };
        p.value = Tensor::from_fn(p.value.shape(), |_| rng.random_range(lo..hi));
    }
    let [d, h, w] = cfg.patch_dhw;
    let x = Tensor::from_fn(&[1, cfg.in_channels, d, h, w], |_| rng.random_range(-1.0..1.0));
    let out_shape = [1, cfg.num_classes, d, h, w];
    let weights = Tensor::from_fn(&out_shape, |_| rng.random_range(-1.0..1.0));
    let sample = |rng: &mut ChaCha8Rng, n: usize, k: usize| -> Vec<usize> {
        if k >= n {
            (0..n).collect()
        } else {
            (0..k).map(|_| rng.random_range(0..n)).collect()
        }
    };

    let coords = sample(&mut rng, x.numel(), input_samples);
    let input = grad_check_coords(
        |g, xv| {
            let p = net.params.bind(g, false);
            let y = net.forward(g, &p, xv)?;
            weighted_sum(g, y, &weights)
        },
        &x,
        1e-5,
        &coords,
    )?;

    let mut params = 0.0f64;
    let mut worst_param = String::new();
    let ids: Vec<_> = net.params.ids().collect();
    for &id in &ids {
        let value = net.params.get(id).value.clone();
        let coords = sample(&mut rng, value.numel(), per_param);
        let err = grad_check_coords(
            |g, wv| {
                let mut p = net.params.bind(g, false);
                p.set(id, wv);
                let xv = g.constant(x.clone());
                let y = net.forward(g, &p, xv)?;
                weighted_sum(g, y, &weights)
            },
            &value,
            1e-5,
            &coords,
        )?;
        if err >= params {
            params = err;
            worst_param = net.params.get(id).name.clone();
        }
    }
    Ok(GradCheckReport { input, params, worst_param, checked_params: ids.len() })
}

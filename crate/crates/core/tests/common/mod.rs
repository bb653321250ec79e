#![allow(dead_code)]

use phnet_core::ParamStore;
use phnet_tensor::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `sum(y ⊙ r)` for a fixed random `r`, so every output coordinate carries a
/// distinct weight (a plain sum would hide errors behind symmetries such as
/// normalization).
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed);
    let w = uniform(&mut r, g.shape(y), -1.0, 1.0);
    let wv = g.constant(w);
    let prod = g.mul(y, wv)?;
    g.sum_all(prod)
}

/// Replaces every parameter with uniform noise in `[-scale, scale]`.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for p in store.iter_mut() {
        p.value = uniform(&mut r, p.value.shape(), -scale, scale);
    }
}

pub fn zero_all(store: &mut ParamStore<f64>) {
    for p in store.iter_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
}

/// Sample of coordinate indices, all of them when `n ≥ numel`.
pub fn sample_coords(rng: &mut ChaCha8Rng, numel: usize, n: usize) -> Vec<usize> {
    if n >= numel {
        return (0..numel).collect();
    }
    (0..n).map(|_| rng.random_range(0..numel)).collect()
}

/// Direct cross-correlation with zero padding, looping over every output
/// element and kernel tap.
pub fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&[f64]>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Tensor<f64> {
    let (b, cin, d, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]);
    let (cout, kd, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3], w.shape()[4]);
    let od = (d + 2 * pad[0] - kd) / stride[0] + 1;
    let oh = (h + 2 * pad[1] - kh) / stride[1] + 1;
    let ow = (wd + 2 * pad[2] - kw) / stride[2] + 1;
    let mut out = vec![0.0; b * cout * od * oh * ow];
    let mut i = 0;
    for bi in 0..b {
        for co in 0..cout {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = bias.map_or(0.0, |bb| bb[co]);
                        for ci in 0..cin {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for e in 0..kw {
                                        let iz = (z * stride[0] + a) as isize - pad[0] as isize;
                                        let iy = (y * stride[1] + bb) as isize - pad[1] as isize;
                                        let ix = (xx * stride[2] + e) as isize - pad[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= d || iy >= h || ix >= wd {
                                            continue;
                                        }
                                        acc += x.get(&[bi, ci, iz, iy, ix]) * w.get(&[co, ci, a, bb, e]);
                                    }
                                }
                            }
                        }
                        out[i] = acc;
                        i += 1;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, cout, od, oh, ow], out).unwrap()
}

pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.to_vec().iter().zip(b.to_vec()).map(|(x, y)| x * y).sum()
}

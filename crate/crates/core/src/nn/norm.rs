//! Instance normalization over spatial positions and layer normalization over
//! the trailing (channel) axis, as fused graph ops.

use phnet_tensor::{CustomOp, Element, Graph, Tensor, Var};

use crate::error::{invalid, Result};

/// Where the affine parameters attach: each normalized row belongs to one
/// channel (`PerRow`), or each position inside a row is a channel (`PerColumn`).
#[derive(Clone, Copy, Debug)]
enum Affine {
    PerRow { channels: usize },
    PerColumn,
}

struct NormOp<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    row_len: usize,
    affine: Affine,
}

fn normalize_rows<T: Element>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    row_len: usize,
    affine: Affine,
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / row_len;
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let src = &x[r * row_len..(r + 1) * row_len];
        let mean = src.iter().map(|v| v.f64()).sum::<f64>() / row_len as f64;
        let var = src.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / row_len as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(T::of(inv));
        let (mean, inv) = (T::of(mean), T::of(inv));
        let xh = &mut xhat[r * row_len..(r + 1) * row_len];
        let o = &mut out[r * row_len..(r + 1) * row_len];
        for i in 0..row_len {
            xh[i] = (src[i] - mean) * inv;
            let c = match affine {
                Affine::PerRow { channels } => r % channels,
                Affine::PerColumn => i,
            };
            o[i] = gamma[c] * xh[i] + beta[c];
        }
    }
    (out, xhat, inv_std)
}

impl<T: Element> CustomOp<T> for NormOp<T> {
    fn name(&self) -> &'static str {
        match self.affine {
            Affine::PerRow { .. } => "instance_norm",
            Affine::PerColumn => "layer_norm",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> phnet_tensor::Result<Vec<Option<Tensor<T>>>> {
        let gamma = inputs[1].data();
        let gd = grad.data();
        let n = self.row_len;
        let rows = gd.len() / n;
        let channels = gamma.len();
        let mut dx = vec![T::zero(); if needs[0] { gd.len() } else { 0 }];
        let mut dgamma = vec![0.0f64; channels];
        let mut dbeta = vec![0.0f64; channels];
        let mut dxhat = vec![T::zero(); n];
        for r in 0..rows {
            let g = &gd[r * n..(r + 1) * n];
            let xh = &self.xhat[r * n..(r + 1) * n];
            let (mut s1, mut s2) = (0.0f64, 0.0f64);
            for i in 0..n {
                let c = match self.affine {
                    Affine::PerRow { channels } => r % channels,
                    Affine::PerColumn => i,
                };
                dgamma[c] += (g[i] * xh[i]).f64();
                dbeta[c] += g[i].f64();
                dxhat[i] = g[i] * gamma[c];
                s1 += dxhat[i].f64();
                s2 += (dxhat[i] * xh[i]).f64();
            }
            if needs[0] {
                let (m1, m2) = (T::of(s1 / n as f64), T::of(s2 / n as f64));
                let inv = self.inv_std[r];
                for i in 0..n {
                    dx[r * n + i] = inv * (dxhat[i] - m1 - xh[i] * m2);
                }
            }
        }
        let vec_of = |v: Vec<f64>| Tensor::from_vec(&[channels], v.into_iter().map(T::of).collect());
        Ok(vec![
            if needs[0] { Some(Tensor::from_vec(inputs[0].shape(), dx)?) } else { None },
            if needs[1] { Some(vec_of(dgamma)?) } else { None },
            if needs[2] { Some(vec_of(dbeta)?) } else { None },
        ])
    }
}

fn check_affine<T: Element>(g: &Graph<T>, gamma: Var, beta: Var, channels: usize, what: &str) -> Result<()> {
    for (name, v) in [("gamma", gamma), ("beta", beta)] {
        if g.shape(v) != [channels] {
            return invalid(format!("{what}: {name} has shape {:?}, expected [{channels}]", g.shape(v)));
        }
    }
    Ok(())
}

/// Normalizes each `(batch, channel)` of a `(B, C, D, H, W)` map over its
/// spatial positions, then applies per-channel `gamma`, `beta`.
pub fn instance_norm<T: Element>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 5 {
        return invalid(format!("instance_norm expects (B, C, D, H, W), got {shape:?}"));
    }
    check_affine(g, gamma, beta, shape[1], "instance_norm")?;
    let row_len = shape[2] * shape[3] * shape[4];
    let affine = Affine::PerRow { channels: shape[1] };
    let (out, xhat, inv_std) = {
        let (xv, gv, bv) = (g.value(x).data(), g.value(gamma).data(), g.value(beta).data());
        normalize_rows(&xv, &gv, &bv, row_len, affine, eps)
    };
    let out = Tensor::from_vec(&shape, out)?;
    Ok(g.custom(&[x, gamma, beta], out, Box::new(NormOp { xhat, inv_std, row_len, affine })))
}

/// Normalizes every vector along the last axis, then applies `gamma`, `beta`
/// elementwise along that axis.
pub fn layer_norm<T: Element>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let Some(&channels) = shape.last() else {
        return invalid("layer_norm needs rank ≥ 1");
    };
    check_affine(g, gamma, beta, channels, "layer_norm")?;
    let affine = Affine::PerColumn;
    let (out, xhat, inv_std) = {
        let (xv, gv, bv) = (g.value(x).data(), g.value(gamma).data(), g.value(beta).data());
        normalize_rows(&xv, &gv, &bv, channels, affine, eps)
    };
    let out = Tensor::from_vec(&shape, out)?;
    Ok(g.custom(&[x, gamma, beta], out, Box::new(NormOp { xhat, inv_std, row_len: channels, affine })))
}

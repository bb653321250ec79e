//! 3D convolution and transposed convolution over `(B, C, D, H, W)` maps.
//!
//! Both directions lower to `im2col`/`col2im` plus a GEMM per batch element.
//! A 2D convolution is the `k_d = 1`, depth-stride-1 case.

use phnet_tensor::{gemm, CustomOp, Element, Graph, MatRef, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Kernel, stride and zero padding per spatial axis, ordered `(d, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Self {
        ConvGeometry { kernel, stride, padding }
    }

    /// Stride-1 convolution with `pad = (k - 1) / 2`; kernels must be odd.
    pub fn same(kernel: [usize; 3]) -> Self {
        Self::same_strided(kernel, [1, 1, 1])
    }

    pub fn same_strided(kernel: [usize; 3], stride: [usize; 3]) -> Self {
        assert!(kernel.iter().all(|k| k % 2 == 1), "same padding needs odd kernels, got {kernel:?}");
        ConvGeometry { kernel, stride, padding: kernel.map(|k| (k - 1) / 2) }
    }

    pub fn pointwise() -> Self {
        Self::same([1, 1, 1])
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_identity_layout(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    /// `floor((n + 2p - k) / s) + 1` per axis.
    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if self.kernel[a] == 0 || self.stride[a] == 0 {
                return invalid(format!("kernel and stride must be positive, got {self:?}"));
            }
            if padded < self.kernel[a] {
                return invalid(format!(
                    "kernel {} larger than padded extent {} on spatial axis {a}",
                    self.kernel[a], padded
                ));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// `(n - 1) s - 2p + k` per axis.
    pub fn transpose_output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let full = (input[a] - 1) * self.stride[a] + self.kernel[a];
            if full <= 2 * self.padding[a] {
                return invalid(format!("transposed convolution output would be empty on spatial axis {a}"));
            }
            out[a] = full - 2 * self.padding[a];
        }
        Ok(out)
    }
}

fn spatial(shape: &[usize]) -> [usize; 3] {
    [shape[2], shape[3], shape[4]]
}

/// Range of output positions `o` for which `o * s + k_off - pad` lies in
/// `[0, n)`.
#[inline]
fn valid_range(out_len: usize, n: usize, stride: usize, k_off: usize, pad: usize) -> (usize, usize) {
    // o*s + k_off >= pad  and  o*s + k_off - pad < n
    let lo = if k_off >= pad { 0 } else { (pad - k_off).div_ceil(stride) };
    let limit = n + pad; // o*s + k_off < n + pad
    let hi = if limit <= k_off { 0 } else { (limit - k_off).div_ceil(stride) };
    (lo.min(out_len), hi.min(out_len).max(lo.min(out_len)))
}

/// Unfolds one `(C, D, H, W)` volume into a `(C·kd·kh·kw, Do·Ho·Wo)` matrix.
pub(crate) fn im2col<T: Element>(
    x: &[T],
    channels: usize,
    dims: [usize; 3],
    geom: &ConvGeometry,
    out_dims: [usize; 3],
    col: &mut [T],
) {
    let [d, h, w] = dims;
    let [od, oh, ow] = out_dims;
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.padding;
    let plane = oh * ow;
    let p = od * plane;
    debug_assert_eq!(col.len(), channels * kd * kh * kw * p);
    let mut row = 0;
    for c in 0..channels {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            let (dlo, dhi) = valid_range(od, d, sd, a, pd);
            for b in 0..kh {
                let (hlo, hhi) = valid_range(oh, h, sh, b, ph);
                for e in 0..kw {
                    let (wlo, whi) = valid_range(ow, w, sw, e, pw);
                    let dst = &mut col[row * p..(row + 1) * p];
                    for z in 0..od {
                        let dz = &mut dst[z * plane..(z + 1) * plane];
                        if z < dlo || z >= dhi {
                            dz.fill(T::zero());
                            continue;
                        }
                        let iz = z * sd + a - pd;
                        for y in 0..oh {
                            let dy = &mut dz[y * ow..(y + 1) * ow];
                            if y < hlo || y >= hhi {
                                dy.fill(T::zero());
                                continue;
                            }
                            let iy = y * sh + b - ph;
                            let src = &xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            dy[..wlo].fill(T::zero());
                            dy[whi..].fill(T::zero());
                            if sw == 1 {
                                let start = wlo + e - pw;
                                dy[wlo..whi].copy_from_slice(&src[start..start + (whi - wlo)]);
                            } else {
                                for (o, v) in dy[wlo..whi].iter_mut().enumerate() {
                                    *v = src[(wlo + o) * sw + e - pw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back into a volume.
pub(crate) fn col2im<T: Element>(
    col: &[T],
    channels: usize,
    dims: [usize; 3],
    geom: &ConvGeometry,
    out_dims: [usize; 3],
    x: &mut [T],
) {
    let [d, h, w] = dims;
    let [od, oh, ow] = out_dims;
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.padding;
    let plane = oh * ow;
    let p = od * plane;
    let mut row = 0;
    for c in 0..channels {
        let xc = &mut x[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            let (dlo, dhi) = valid_range(od, d, sd, a, pd);
            for b in 0..kh {
                let (hlo, hhi) = valid_range(oh, h, sh, b, ph);
                for e in 0..kw {
                    let (wlo, whi) = valid_range(ow, w, sw, e, pw);
                    let src = &col[row * p..(row + 1) * p];
                    for z in dlo..dhi {
                        let iz = z * sd + a - pd;
                        for y in hlo..hhi {
                            let iy = y * sh + b - ph;
                            let s = &src[z * plane + y * ow..z * plane + (y + 1) * ow];
                            let dst = &mut xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            if sw == 1 {
                                let start = wlo + e - pw;
                                for (dv, sv) in dst[start..start + (whi - wlo)].iter_mut().zip(&s[wlo..whi]) {
                                    *dv += *sv;
                                }
                            } else {
                                for o in wlo..whi {
                                    dst[o * sw + e - pw] += s[o];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn check_input(x: &[usize], w: &[usize], channel_axis_of_w: usize, what: &str) -> Result<()> {
    if x.len() != 5 {
        return invalid(format!("{what} expects a (B, C, D, H, W) input, got {x:?}"));
    }
    if w.len() != 5 {
        return invalid(format!("{what} expects a rank-5 kernel, got {w:?}"));
    }
    if x[1] != w[channel_axis_of_w] {
        return invalid(format!("{what}: input has {} channels, kernel {w:?} expects {}", x[1], w[channel_axis_of_w]));
    }
    Ok(())
}

fn check_kernel(w: &[usize], geom: &ConvGeometry) -> Result<()> {
    if [w[2], w[3], w[4]] != geom.kernel {
        return invalid(format!("kernel tensor {w:?} does not match geometry {:?}", geom.kernel));
    }
    Ok(())
}

fn add_channel_bias<T: Element>(out: &mut [T], bias: &[T], per_channel: usize) {
    for (chunk, &b) in out.chunks_mut(per_channel).zip(bias.iter().cycle()) {
        for v in chunk {
            *v += b;
        }
    }
}

fn bias_grad<T: Element>(g: &[T], channels: usize, per_channel: usize) -> Vec<T> {
    let mut acc = vec![0.0f64; channels];
    for (i, chunk) in g.chunks(per_channel).enumerate() {
        acc[i % channels] += chunk.iter().map(|v| v.f64()).sum::<f64>();
    }
    acc.into_iter().map(T::of).collect()
}

/// Forward convolution on plain tensors. `w` is `(C_out, C_in, kd, kh, kw)`.
pub fn conv3d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    check_input(x.shape(), w.shape(), 1, "conv")?;
    check_kernel(w.shape(), geom)?;
    let (b, cin, cout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let dims = spatial(x.shape());
    let out_dims = geom.output_dims(dims)?;
    let p: usize = out_dims.iter().product();
    let n_in: usize = dims.iter().product();
    let rows = cin * geom.kernel_volume();
    let xd = x.data();
    let wd = w.data();
    let wm = MatRef::new(&wd, cout, rows);
    let mut out = vec![T::zero(); b * cout * p];
    let direct = geom.is_identity_layout();
    let mut col = if direct { Vec::new() } else { vec![T::zero(); rows * p] };
    for bi in 0..b {
        let xb = &xd[bi * cin * n_in..(bi + 1) * cin * n_in];
        let colm = if direct {
            MatRef::new(xb, rows, p)
        } else {
            im2col(xb, cin, dims, geom, out_dims, &mut col);
            MatRef::new(&col, rows, p)
        };
        gemm(T::one(), wm, colm, T::zero(), &mut out[bi * cout * p..(bi + 1) * cout * p]);
    }
    if let Some(bias) = bias {
        add_channel_bias(&mut out, &bias.data(), p);
    }
    Ok(Tensor::from_vec(&[b, cout, out_dims[0], out_dims[1], out_dims[2]], out)?)
}

/// Transposed convolution on plain tensors; `w` is `(C_in, C_out, kd, kh, kw)`,
/// the same tensor that the matching forward convolution would use as
/// `(C_out', C_in', ...)`.
pub fn conv_transpose3d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    check_input(x.shape(), w.shape(), 0, "conv_transpose")?;
    check_kernel(w.shape(), geom)?;
    let (b, cin, cout) = (x.shape()[0], x.shape()[1], w.shape()[1]);
    let dims = spatial(x.shape());
    let out_dims = geom.transpose_output_dims(dims)?;
    let p_in: usize = dims.iter().product();
    let p_out: usize = out_dims.iter().product();
    let rows = cout * geom.kernel_volume();
    let xd = x.data();
    let wd = w.data();
    let wt = MatRef::new(&wd, cin, rows).t();
    let mut out = vec![T::zero(); b * cout * p_out];
    let mut col = vec![T::zero(); rows * p_in];
    for bi in 0..b {
        let xb = MatRef::new(&xd[bi * cin * p_in..(bi + 1) * cin * p_in], cin, p_in);
        gemm(T::one(), wt, xb, T::zero(), &mut col);
        col2im(&col, cout, out_dims, geom, dims, &mut out[bi * cout * p_out..(bi + 1) * cout * p_out]);
    }
    if let Some(bias) = bias {
        add_channel_bias(&mut out, &bias.data(), p_out);
    }
    Ok(Tensor::from_vec(&[b, cout, out_dims[0], out_dims[1], out_dims[2]], out)?)
}

struct ConvOp {
    geom: ConvGeometry,
}

impl<T: Element> CustomOp<T> for ConvOp {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> phnet_tensor::Result<Vec<Option<Tensor<T>>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let geom = &self.geom;
        let (b, cin, cout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
        let dims = spatial(x.shape());
        let out_dims = spatial(grad.shape());
        let n_in: usize = dims.iter().product();
        let p: usize = out_dims.iter().product();
        let rows = cin * geom.kernel_volume();
        let (xd, wd, gd) = (x.data(), w.data(), grad.data());
        let direct = geom.is_identity_layout();
        let mut dx = if needs[0] { Some(vec![T::zero(); x.numel()]) } else { None };
        let mut dw = if needs[1] { Some(vec![T::zero(); w.numel()]) } else { None };
        let mut col = vec![T::zero(); if direct { 0 } else { rows * p }];
        let mut dcol = vec![T::zero(); if dx.is_some() && !direct { rows * p } else { 0 }];
        for bi in 0..b {
            let gb = MatRef::new(&gd[bi * cout * p..(bi + 1) * cout * p], cout, p);
            let xb = &xd[bi * cin * n_in..(bi + 1) * cin * n_in];
            if let Some(dw) = dw.as_mut() {
                let colm = if direct {
                    MatRef::new(xb, rows, p)
                } else {
                    im2col(xb, cin, dims, geom, out_dims, &mut col);
                    MatRef::new(&col, rows, p)
                };
                gemm(T::one(), gb, colm.t(), T::one(), dw);
            }
            if let Some(dx) = dx.as_mut() {
                let wt = MatRef::new(&wd, cout, rows).t();
                let dxb = &mut dx[bi * cin * n_in..(bi + 1) * cin * n_in];
                if direct {
                    gemm(T::one(), wt, gb, T::zero(), dxb);
                } else {
                    gemm(T::one(), wt, gb, T::zero(), &mut dcol);
                    col2im(&dcol, cin, dims, geom, out_dims, dxb);
                }
            }
        }
        let mut out = vec![
            dx.map(|v| Tensor::from_vec(x.shape(), v)).transpose()?,
            dw.map(|v| Tensor::from_vec(w.shape(), v)).transpose()?,
        ];
        if inputs.len() > 2 {
            out.push(if needs[2] { Some(Tensor::from_vec(&[cout], bias_grad(&gd, cout, p))?) } else { None });
        }
        Ok(out)
    }
}

struct ConvTransposeOp {
    geom: ConvGeometry,
}

impl<T: Element> CustomOp<T> for ConvTransposeOp {
    fn name(&self) -> &'static str {
        "conv_transpose3d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> phnet_tensor::Result<Vec<Option<Tensor<T>>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let geom = &self.geom;
        let (b, cin, cout) = (x.shape()[0], x.shape()[1], w.shape()[1]);
        let dims = spatial(x.shape());
        let out_dims = spatial(grad.shape());
        let p_in: usize = dims.iter().product();
        let p_out: usize = out_dims.iter().product();
        let rows = cout * geom.kernel_volume();
        let (xd, wd, gd) = (x.data(), w.data(), grad.data());
        let mut dx = if needs[0] { Some(vec![T::zero(); x.numel()]) } else { None };
        let mut dw = if needs[1] { Some(vec![T::zero(); w.numel()]) } else { None };
        let mut col = vec![T::zero(); rows * p_in];
        for bi in 0..b {
            // The gradient of a transposed convolution is a forward convolution.
            im2col(&gd[bi * cout * p_out..(bi + 1) * cout * p_out], cout, out_dims, geom, dims, &mut col);
            let colm = MatRef::new(&col, rows, p_in);
            if let Some(dx) = dx.as_mut() {
                gemm(T::one(), MatRef::new(&wd, cin, rows), colm, T::zero(), &mut dx[bi * cin * p_in..(bi + 1) * cin * p_in]);
            }
            if let Some(dw) = dw.as_mut() {
                let xb = MatRef::new(&xd[bi * cin * p_in..(bi + 1) * cin * p_in], cin, p_in);
                gemm(T::one(), xb, colm.t(), T::one(), dw);
            }
        }
        let mut out = vec![
            dx.map(|v| Tensor::from_vec(x.shape(), v)).transpose()?,
            dw.map(|v| Tensor::from_vec(w.shape(), v)).transpose()?,
        ];
        if inputs.len() > 2 {
            out.push(if needs[2] { Some(Tensor::from_vec(&[cout], bias_grad(&gd, cout, p_out))?) } else { None });
        }
        Ok(out)
    }
}

/// Differentiable convolution recorded on `g`.
pub fn conv3d<T: Element>(g: &mut Graph<T>, x: Var, w: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
    let out = conv3d_forward(g.value(x), g.value(w), bias.map(|b| g.value(b)), &geom)?;
    let mut inputs = vec![x, w];
    inputs.extend(bias);
    Ok(g.custom(&inputs, out, Box::new(ConvOp { geom })))
}

/// Differentiable transposed convolution recorded on `g`.
pub fn conv_transpose3d<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    bias: Option<Var>,
    geom: ConvGeometry,
) -> Result<Var> {
    let out = conv_transpose3d_forward(g.value(x), g.value(w), bias.map(|b| g.value(b)), &geom)?;
    let mut inputs = vec![x, w];
    inputs.extend(bias);
    Ok(g.custom(&inputs, out, Box::new(ConvTransposeOp { geom })))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for n in 1..7 {
            for s in 1..3 {
                for k in 0..3 {
                    for pad in 0..2 {
                        let out_len = 8;
                        let (lo, hi) = valid_range(out_len, n, s, k, pad);
                        for o in 0..out_len {
                            let pos = (o * s + k) as isize - pad as isize;
                            let inside = pos >= 0 && (pos as usize) < n;
                            assert_eq!(inside, o >= lo && o < hi, "n{n} s{s} k{k} p{pad} o{o}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn geometry_formulas() {
        let g = ConvGeometry::new([2, 2, 2], [2, 2, 2], [0, 0, 0]);
        assert_eq!(g.transpose_output_dims([4, 4, 4]).unwrap(), [8, 8, 8]);
        assert_eq!(g.output_dims([8, 8, 8]).unwrap(), [4, 4, 4]);
        let s = ConvGeometry::same_strided([3, 3, 3], [1, 2, 2]);
        assert_eq!(s.output_dims([8, 16, 16]).unwrap(), [8, 8, 8]);
        assert!(ConvGeometry::new([5, 1, 1], [1, 1, 1], [0, 0, 0]).output_dims([3, 4, 4]).is_err());
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 2, 3, 4], |i| i as f64 * 0.5 - 3.0);
        let w = Tensor::ones(&[1, 1, 1, 1, 1]);
        let y = conv3d_forward(&x, &w, None, &ConvGeometry::pointwise()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_planar_kernel_counts_overlap() {
        let x = Tensor::<f64>::ones(&[1, 1, 1, 4, 5]);
        let w = Tensor::ones(&[1, 1, 1, 3, 3]);
        let y = conv3d_forward(&x, &w, None, &ConvGeometry::same([1, 3, 3])).unwrap();
        assert_eq!(y.get(&[0, 0, 0, 1, 1]), 9.0);
        assert_eq!(y.get(&[0, 0, 0, 0, 0]), 4.0);
        assert_eq!(y.get(&[0, 0, 0, 3, 4]), 4.0);
        assert_eq!(y.get(&[0, 0, 0, 0, 2]), 6.0);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::<f64>::ones(&[1, 2, 3, 3, 3]);
        let w = Tensor::ones(&[1, 3, 1, 1, 1]);
        assert!(conv3d_forward(&x, &w, None, &ConvGeometry::pointwise()).is_err());
        assert!(conv_transpose3d_forward(&x, &w, None, &ConvGeometry::pointwise()).is_err());
    }

    #[test]
    fn transpose_of_zero_is_bias() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2, 2, 2]);
        let w = Tensor::ones(&[2, 3, 2, 2, 2]);
        let b = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let g = ConvGeometry::new([2, 2, 2], [2, 2, 2], [0, 0, 0]);
        let y = conv_transpose3d_forward(&x, &w, None, &g).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4, 4]);
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
        let yb = conv_transpose3d_forward(&x, &w, Some(&b), &g).unwrap();
        assert_eq!(yb.get(&[0, 2, 3, 1, 0]), 2.0);
    }
}

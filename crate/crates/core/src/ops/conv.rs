//! 2-D convolution and its transpose on single `C×H×W` images.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::linalg::{gemm, gemm_nt, gemm_tn};
use crate::tensor::{Element, Tensor};

/// `floor((input + 2p − k)/s) + 1`, or an error when no window fits.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::dim("kernel and stride must be at least 1"));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::dim(format!(
            "kernel {kernel} exceeds padded input {padded}; output would be empty"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// `(input − 1)·s − 2p + k`, or an error when that is not positive.
pub fn deconv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 || input == 0 {
        return Err(Error::dim("kernel, stride and input must be at least 1"));
    }
    let full = (input - 1) * stride + kernel;
    if full <= 2 * padding {
        return Err(Error::dim(format!(
            "transposed conv output (H−1)·s − 2p + k = {full} − {} is not positive",
            2 * padding
        )));
    }
    Ok(full - 2 * padding)
}

/// Window geometry shared by im2col and col2im.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds `c×h×w` into a `(c·k·k) × (ho·wo)` patch matrix.
pub(crate) fn im2col<T: Element>(x: &[T], win: Window) -> Vec<T> {
    let Window { channels, h, w, k, stride, pad, ho, wo } = win;
    let mut cols = vec![T::zero(); win.rows() * win.cols()];
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[(c * h + iy as usize) * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch columns back, accumulating into `out`.
pub(crate) fn col2im<T: Element>(cols: &[T], win: Window, out: &mut [T]) {
    let Window { channels, h, w, k, stride, pad, ho, wo } = win;
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut out[(c * h + iy as usize) * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_rank3(op: &str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        &[c, h, w] => Ok((c, h, w)),
        _ => Err(Error::dim(format!("{op} expects a C×H×W input, got {shape:?}"))),
    }
}

impl<T: Element> Graph<T> {
    /// Zero-padded grouped convolution.
    ///
    /// `x: C_in×H×W`, `w: C_out×(C_in/groups)×k×k`, optional `bias: [C_out]`.
    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let (out, win, cout) = self.with_values(&inputs, |v| {
            let (cin, h, wd) = check_rank3("conv2d", v[0].shape())?;
            let ws = v[1].shape();
            if ws.len() != 4 || ws[2] != ws[3] {
                return Err(Error::dim(format!("conv2d weight must be C_out×C_in/g×k×k, got {ws:?}")));
            }
            let (cout, cin_g, k) = (ws[0], ws[1], ws[2]);
            if groups == 0 || cin % groups != 0 || cout % groups != 0 {
                return Err(Error::dim(format!(
                    "conv2d: channels {cin}→{cout} not divisible into {groups} groups"
                )));
            }
            if cin_g != cin / groups {
                return Err(Error::dim(format!(
                    "conv2d weight {ws:?} expects {} input channels per group, input has {}",
                    cin_g,
                    cin / groups
                )));
            }
            if let Some(b) = v.get(2) {
                if b.shape() != [cout] {
                    return Err(Error::dim(format!("conv2d bias {:?} for {cout} outputs", b.shape())));
                }
            }
            let ho = conv_out_size(h, k, stride, padding)?;
            let wo = conv_out_size(wd, k, stride, padding)?;
            let win = Window { channels: cin_g, h, w: wd, k, stride, pad: padding, ho, wo };
            let cout_g = cout / groups;
            let kk = cin_g * k * k;
            let mut out = vec![T::zero(); cout * ho * wo];
            for gi in 0..groups {
                let xg = &v[0].data()[gi * cin_g * h * wd..(gi + 1) * cin_g * h * wd];
                let cols = im2col(xg, win);
                let wg = &v[1].data()[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                gemm(cout_g, kk, ho * wo, wg, &cols, &mut out[gi * cout_g * ho * wo..(gi + 1) * cout_g * ho * wo]);
            }
            if let Some(b) = v.get(2) {
                for (plane, &bv) in out.chunks_mut(ho * wo).zip(b.data()) {
                    plane.iter_mut().for_each(|o| *o += bv);
                }
            }
            Ok((Tensor::new(&[cout, ho, wo], out)?, win, cout))
        })?;
        let has_bias = bias.is_some();
        self.record(
            "conv2d",
            &inputs,
            out,
            Box::new(move |args| {
                let g = args.grad_output;
                let (x, w) = (args.inputs[0], args.inputs[1]);
                let cin_g = win.channels;
                let cout_g = cout / groups;
                let kk = win.rows();
                let plane = win.cols();
                let in_plane = win.h * win.w;
                let mut gx = args.needs_grad[0].then(|| vec![T::zero(); x.numel()]);
                let mut gw = args.needs_grad[1].then(|| vec![T::zero(); w.numel()]);
                for gi in 0..groups {
                    let go = &g[gi * cout_g * plane..(gi + 1) * cout_g * plane];
                    if let Some(gw) = gw.as_mut() {
                        let xg = &x.data()[gi * cin_g * in_plane..(gi + 1) * cin_g * in_plane];
                        let cols = im2col(xg, win);
                        gemm_nt(cout_g, plane, kk, go, &cols, &mut gw[gi * cout_g * kk..(gi + 1) * cout_g * kk]);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let wg = &w.data()[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                        let mut dcols = vec![T::zero(); kk * plane];
                        gemm_tn(kk, cout_g, plane, wg, go, &mut dcols);
                        col2im(&dcols, win, &mut gx[gi * cin_g * in_plane..(gi + 1) * cin_g * in_plane]);
                    }
                }
                let mut grads = vec![gx, gw];
                if has_bias {
                    let gb = args.needs_grad[2]
                        .then(|| g.chunks(plane).map(|p| p.iter().copied().sum()).collect());
                    grads.push(gb);
                }
                Ok(grads)
            }),
        )
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`] with the same `(k, s, p)`.
    ///
    /// `x: C_in×H×W`, `w: C_in×C_out×k×k`, optional `bias: [C_out]`;
    /// output is `C_out×H'×W'` with `H' = (H−1)·s − 2p + k`.
    pub fn conv2d_transposed(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let (out, win) = self.with_values(&inputs, |v| {
            let (cin, h, wd) = check_rank3("conv2d_transposed", v[0].shape())?;
            let ws = v[1].shape();
            if ws.len() != 4 || ws[2] != ws[3] || ws[0] != cin {
                return Err(Error::dim(format!(
                    "conv2d_transposed weight must be {cin}×C_out×k×k, got {ws:?}"
                )));
            }
            let (cout, k) = (ws[1], ws[2]);
            if let Some(b) = v.get(2) {
                if b.shape() != [cout] {
                    return Err(Error::dim(format!("deconv bias {:?} for {cout} outputs", b.shape())));
                }
            }
            let ho = deconv_out_size(h, k, stride, padding)?;
            let wo = deconv_out_size(wd, k, stride, padding)?;
            // The output plays the role of the input of a forward conv producing h×w.
            let win = Window { channels: cout, h: ho, w: wo, k, stride, pad: padding, ho: h, wo: wd };
            let mut cols = vec![T::zero(); win.rows() * win.cols()];
            gemm_tn(win.rows(), cin, h * wd, v[1].data(), v[0].data(), &mut cols);
            let mut out = vec![T::zero(); cout * ho * wo];
            col2im(&cols, win, &mut out);
            if let Some(b) = v.get(2) {
                for (plane, &bv) in out.chunks_mut(ho * wo).zip(b.data()) {
                    plane.iter_mut().for_each(|o| *o += bv);
                }
            }
            Ok((Tensor::new(&[cout, ho, wo], out)?, win))
        })?;
        let has_bias = bias.is_some();
        self.record(
            "conv2d_transposed",
            &inputs,
            out,
            Box::new(move |args| {
                let g = args.grad_output;
                let (x, w) = (args.inputs[0], args.inputs[1]);
                let cin = x.shape()[0];
                let plane_in = win.cols();
                let dcols = im2col(g, win);
                let gx = args.needs_grad[0].then(|| {
                    let mut gx = vec![T::zero(); x.numel()];
                    gemm(cin, win.rows(), plane_in, w.data(), &dcols, &mut gx);
                    gx
                });
                let gw = args.needs_grad[1].then(|| {
                    let mut gw = vec![T::zero(); w.numel()];
                    gemm_nt(cin, plane_in, win.rows(), x.data(), &dcols, &mut gw);
                    gw
                });
                let mut grads = vec![gx, gw];
                if has_bias {
                    let plane_out = win.h * win.w;
                    grads.push(
                        args.needs_grad[2]
                            .then(|| g.chunks(plane_out).map(|p| p.iter().copied().sum()).collect()),
                    );
                }
                Ok(grads)
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_formulas() {
        assert_eq!(conv_out_size(256, 7, 4, 3).unwrap(), 64);
        assert_eq!(conv_out_size(2, 3, 2, 1).unwrap(), 1);
        assert_eq!(deconv_out_size(16, 4, 2, 1).unwrap(), 32);
        assert!(conv_out_size(2, 7, 1, 0).is_err());
        assert!(deconv_out_size(1, 1, 1, 1).is_err());
    }

    #[test]
    fn one_by_one_identity_kernel() {
        let g = Graph::<f64>::new();
        let img = Tensor::from_fn(&[1, 4, 5], |i| i as f64 * 0.5 - 3.0);
        let x = g.constant(img.clone());
        let w = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, Some(b), 1, 0, 1).unwrap();
        assert_eq!(*g.value(y), img);
        let yt = g.conv2d_transposed(x, w, None, 1, 0).unwrap();
        assert_eq!(*g.value(yt), img);
    }

    #[test]
    fn grouping_must_divide_channels() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[3, 4, 4]));
        let w = g.constant(Tensor::ones(&[4, 1, 3, 3]));
        assert!(matches!(g.conv2d(x, w, None, 1, 1, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn stride_two_halves_the_map() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[2, 8, 8]));
        let w = g.constant(Tensor::ones(&[3, 2, 3, 3]));
        let y = g.conv2d(x, w, None, 2, 1, 1).unwrap();
        assert_eq!(g.shape(y), vec![3, 4, 4]);
        // interior output sees the full 3×3×2 window of ones
        assert_eq!(g.value(y).at(&[0, 1, 1]), 18.0);
        // top-left window overlaps the padding on two sides
        assert_eq!(g.value(y).at(&[0, 0, 0]), 8.0);
    }
}

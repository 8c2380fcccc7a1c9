//! Reference implementations on plain slices, written without the graph or
//! any of the crate's kernels.
#![allow(dead_code)]

use hevitpose::nn::LN_EPS;
use hevitpose::ParamStore;

pub fn param<'a>(ps: &'a ParamStore<f64>, name: &str) -> &'a [f64] {
    ps.get(name).unwrap_or_else(|| panic!("missing parameter {name}")).data()
}

/// Direct-loop grouped convolution. `w` is `co × (ci/groups) × k × k`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    (ci, h, w_): (usize, usize, usize),
    w: &[f64],
    co: usize,
    k: usize,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, (usize, usize, usize)) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w_ + 2 * pad - k) / stride + 1;
    let (cig, cog) = (ci / groups, co / groups);
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        let grp = o / cog;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for c in 0..cig {
                    let ic = grp * cig + c;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w_ as isize {
                                continue;
                            }
                            let xv = x[(ic * h + iy as usize) * w_ + ix as usize];
                            acc += xv * w[((o * cig + c) * k + ky) * k + kx];
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    (out, (co, ho, wo))
}

/// Scatter form of the transposed convolution. `w` is `ci × co × k × k`.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d(
    x: &[f64],
    (ci, h, w_): (usize, usize, usize),
    w: &[f64],
    co: usize,
    k: usize,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, (usize, usize, usize)) {
    let ho = (h - 1) * stride + k - 2 * pad;
    let wo = (w_ - 1) * stride + k - 2 * pad;
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        let b = bias.map_or(0.0, |b| b[o]);
        out[o * ho * wo..(o + 1) * ho * wo].iter_mut().for_each(|v| *v = b);
    }
    for c in 0..ci {
        for iy in 0..h {
            for ix in 0..w_ {
                let xv = x[(c * h + iy) * w_ + ix];
                for o in 0..co {
                    for ky in 0..k {
                        for kx in 0..k {
                            let oy = (iy * stride + ky) as isize - pad as isize;
                            let ox = (ix * stride + kx) as isize - pad as isize;
                            if oy < 0 || ox < 0 || oy >= ho as isize || ox >= wo as isize {
                                continue;
                            }
                            out[(o * ho + oy as usize) * wo + ox as usize] += xv * w[((c * co + o) * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    (out, (co, ho, wo))
}

/// `C×H×W` → row-major `(H·W)×C`.
pub fn to_tokens(x: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut t = vec![0.0; c * hw];
    for ch in 0..c {
        for p in 0..hw {
            t[p * c + ch] = x[ch * hw + p];
        }
    }
    t
}

pub fn from_tokens(t: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut x = vec![0.0; c * hw];
    for p in 0..hw {
        for ch in 0..c {
            x[ch * hw + p] = t[p * c + ch];
        }
    }
    x
}

/// `x · W + b` with `W` stored `in × out`.
pub fn linear(x: &[f64], n: usize, d_in: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let d_out = b.len();
    let mut y = vec![0.0; n * d_out];
    for i in 0..n {
        for o in 0..d_out {
            let mut acc = b[o];
            for j in 0..d_in {
                acc += x[i * d_in + j] * w[j * d_out + o];
            }
            y[i * d_out + o] = acc;
        }
    }
    y
}

pub fn layer_norm_rows(x: &[f64], d: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (row, out) in x.chunks(d).zip(y.chunks_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            out[j] = (row[j] - mean) * inv * gamma[j] + beta[j];
        }
    }
    y
}

/// Softmax attention per head over column blocks of width `c / heads`.
pub fn attention(q: &[f64], n: usize, k: &[f64], v: &[f64], m: usize, c: usize, heads: usize) -> Vec<f64> {
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; n * c];
    for h in 0..heads {
        for i in 0..n {
            let logits: Vec<f64> = (0..m)
                .map(|j| (0..d).map(|t| q[i * c + h * d + t] * k[j * c + h * d + t]).sum::<f64>() * scale)
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..d {
                out[i * c + h * d + t] = (0..m).map(|j| e[j] / z * v[j * c + h * d + t]).sum();
            }
        }
    }
    out
}

/// One group's spatial-reduction attention on a `c×h×w` map, result `c×h×w`.
pub fn group_attention(
    ps: &ParamStore<f64>,
    prefix: &str,
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    ratio: usize,
    heads: usize,
) -> Vec<f64> {
    let p = |s: &str| param(ps, &format!("{prefix}.{s}"));
    let n = h * w;
    let tokens = to_tokens(x, c, n);
    let q = linear(&tokens, n, c, p("q.weight"), p("q.bias"));
    let (red, (_, rh, rw)) =
        conv2d(x, (c, h, w), p("sr.conv.weight"), c, ratio, Some(p("sr.conv.bias")), ratio, 0, 1);
    let m = rh * rw;
    let rt = layer_norm_rows(&to_tokens(&red, c, m), c, p("sr.norm.gamma"), p("sr.norm.beta"));
    let k = linear(&rt, m, c, p("k.weight"), p("k.bias"));
    let v = linear(&rt, m, c, p("v.weight"), p("v.bias"));
    let o = attention(&q, n, &k, &v, m, c, heads);
    let o = layer_norm_rows(&o, c, p("norm.gamma"), p("norm.beta"));
    from_tokens(&o, c, n)
}

/// Cascaded grouped attention followed by the output projection.
#[allow(clippy::too_many_arguments)]
pub fn cgsr_mha(
    ps: &ParamStore<f64>,
    name: &str,
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    groups: usize,
    ratio: usize,
    heads: usize,
) -> Vec<f64> {
    let cg = c / groups;
    let plane = h * w;
    let mut cat = Vec::with_capacity(c * plane);
    let mut prev: Option<Vec<f64>> = None;
    for g in 0..groups {
        let mut input = x[g * cg * plane..(g + 1) * cg * plane].to_vec();
        if let Some(p) = &prev {
            input.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        let out = group_attention(ps, &format!("{name}.group{g}"), &input, (cg, h, w), ratio, heads);
        cat.extend_from_slice(&out);
        prev = Some(out);
    }
    let t = to_tokens(&cat, c, plane);
    let y = linear(&t, plane, c, param(ps, &format!("{name}.proj.weight")), param(ps, &format!("{name}.proj.bias")));
    from_tokens(&y, c, plane)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

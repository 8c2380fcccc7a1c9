use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{lit, Element, Tensor};

impl<T: Element> Graph<T> {
    /// Softmax along `axis`, evaluated with the per-row maximum subtracted.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let out = self.with_values(&[x], |v| {
            let s = v[0].shape();
            if axis >= s.len() {
                return Err(Error::dim(format!("softmax axis {axis} for shape {s:?}")));
            }
            let n = s[axis];
            let inner: usize = s[axis + 1..].iter().product();
            let outer: usize = s[..axis].iter().product();
            let src = v[0].data();
            let mut out = vec![T::zero(); src.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let m = (0..n).map(|k| src[at(k)]).fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for k in 0..n {
                        let e = (src[at(k)] - m).exp();
                        out[at(k)] = e;
                        z += e;
                    }
                    for k in 0..n {
                        out[at(k)] /= z;
                    }
                }
            }
            Tensor::new(s, out)
        })?;
        self.record(
            "softmax",
            &[x],
            out,
            Box::new(move |args| {
                let s = args.output.shape();
                let n = s[axis];
                let inner: usize = s[axis + 1..].iter().product();
                let outer: usize = s[..axis].iter().product();
                let y = args.output.data();
                let g = args.grad_output;
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dotp: T = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            gx[at(k)] = y[at(k)] * (g[at(k)] - dotp);
                        }
                    }
                }
                Ok(vec![Some(gx)])
            }),
        )
    }

    /// Row-wise layer normalisation of an `L×D` matrix with affine `gamma`, `beta` of length `D`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Usage(format!("layer_norm eps must be positive, got {eps}")));
        }
        let eps_t: T = lit(eps);
        let out = self.with_values(&[x, gamma, beta], |v| {
            let s = v[0].shape();
            if s.len() != 2 || v[1].shape() != [s[1]] || v[2].shape() != [s[1]] {
                return Err(Error::dim(format!(
                    "layer_norm on {s:?} with gamma {:?} beta {:?}",
                    v[1].shape(),
                    v[2].shape()
                )));
            }
            let d = s[1];
            let inv_d: T = lit(1.0 / d as f64);
            let (gm, bt) = (v[1].data(), v[2].data());
            let mut out = Vec::with_capacity(v[0].numel());
            for row in v[0].data().chunks(d) {
                let mean = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() * inv_d;
                let rstd = T::one() / (var + eps_t).sqrt();
                out.extend(row.iter().zip(gm).zip(bt).map(|((&x, &g), &b)| (x - mean) * rstd * g + b));
            }
            Tensor::new(s, out)
        })?;
        self.record(
            "layer_norm",
            &[x, gamma, beta],
            out,
            Box::new(move |args| {
                let d = args.inputs[0].shape()[1];
                let inv_d: T = lit(1.0 / d as f64);
                let gm = args.inputs[1].data();
                let mut gx = vec![T::zero(); args.inputs[0].numel()];
                let mut ggamma = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for (r, (row, gout)) in args.inputs[0]
                    .data()
                    .chunks(d)
                    .zip(args.grad_output.chunks(d))
                    .enumerate()
                {
                    let mean = row.iter().copied().sum::<T>() * inv_d;
                    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() * inv_d;
                    let rstd = T::one() / (var + eps_t).sqrt();
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * rstd;
                        dxhat[j] = gout[j] * gm[j];
                        ggamma[j] += gout[j] * xhat[j];
                        gbeta[j] += gout[j];
                    }
                    let m1 = dxhat.iter().copied().sum::<T>() * inv_d;
                    let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                    for j in 0..d {
                        gx[r * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                Ok(vec![Some(gx), Some(ggamma), Some(gbeta)])
            }),
        )
    }
}

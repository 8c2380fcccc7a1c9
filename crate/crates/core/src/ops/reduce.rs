use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{lit, Element, Tensor};

impl<T: Element> Graph<T> {
    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let out = self.with_values(&[a], |v| Tensor::scalar(v[0].data().iter().copied().sum()));
        self.record(
            "sum",
            &[a],
            out,
            Box::new(|args| Ok(vec![Some(vec![args.grad_output[0]; args.inputs[0].numel()])])),
        )
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.with_values(&[a], |v| v[0].numel());
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let out = self.with_values(&[a], |v| {
            let s = v[0].shape();
            if axis >= s.len() {
                return Err(Error::dim(format!("sum_axis {axis} for shape {s:?}")));
            }
            let outer: usize = s[..axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let mut data = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for k in 0..s[axis] {
                    let src = &v[0].data()[(o * s[axis] + k) * inner..][..inner];
                    data[o * inner..(o + 1) * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, &x)| *d += x);
                }
            }
            let mut shape = s.to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                return Ok(Tensor::scalar(data[0]));
            }
            Tensor::new(&shape, data)
        })?;
        self.record(
            "sum_axis",
            &[a],
            out,
            Box::new(move |args| {
                let s = args.inputs[0].shape();
                let outer: usize = s[..axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut g = Vec::with_capacity(args.inputs[0].numel());
                for o in 0..outer {
                    for _ in 0..s[axis] {
                        g.extend_from_slice(&args.grad_output[o * inner..(o + 1) * inner]);
                    }
                }
                Ok(vec![Some(g)])
            }),
        )
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let n = self.shape(a).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Average pooling over `k×k` windows with stride `s` on a `C×H×W` map, no padding.
    pub fn avg_pool2d(&self, x: Var, k: usize, s: usize) -> Result<Var> {
        let out = self.with_values(&[x], |v| {
            let sh = v[0].shape();
            if sh.len() != 3 || k == 0 || s == 0 || sh[1] < k || sh[2] < k {
                return Err(Error::dim(format!("avg_pool2d k={k} s={s} on {sh:?}")));
            }
            let (c, h, w) = (sh[0], sh[1], sh[2]);
            let (ho, wo) = ((h - k) / s + 1, (w - k) / s + 1);
            let norm: T = lit(1.0 / (k * k) as f64);
            let src = v[0].data();
            let mut data = Vec::with_capacity(c * ho * wo);
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = T::zero();
                        for dy in 0..k {
                            for dx in 0..k {
                                acc += src[(ch * h + oy * s + dy) * w + ox * s + dx];
                            }
                        }
                        data.push(acc * norm);
                    }
                }
            }
            Tensor::new(&[c, ho, wo], data)
        })?;
        self.record(
            "avg_pool2d",
            &[x],
            out,
            Box::new(move |args| {
                let sh = args.inputs[0].shape();
                let (c, h, w) = (sh[0], sh[1], sh[2]);
                let (ho, wo) = (args.output.shape()[1], args.output.shape()[2]);
                let norm: T = lit(1.0 / (k * k) as f64);
                let mut g = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let go = args.grad_output[(ch * ho + oy) * wo + ox] * norm;
                            for dy in 0..k {
                                for dx in 0..k {
                                    g[(ch * h + oy * s + dy) * w + ox * s + dx] += go;
                                }
                            }
                        }
                    }
                }
                Ok(vec![Some(g)])
            }),
        )
    }
}

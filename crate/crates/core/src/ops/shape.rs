use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{strides, Element, Tensor};

/// Copies `src` (shape `shape`) into the axis order given by `axes`.
pub(crate) fn permute_data<T: Copy>(src: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    // stride in the source for each output axis
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    if rank == 0 {
        return (out_shape, src.to_vec());
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(src[off]);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn check_axes(axes: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if axes.len() != rank {
        return Err(Error::dim(format!("permute: {} axes for rank {rank}", axes.len())));
    }
    for &a in axes {
        if a >= rank || seen[a] {
            return Err(Error::dim(format!("permute: invalid axes {axes:?}")));
        }
        seen[a] = true;
    }
    Ok(())
}

impl<T: Element> Graph<T> {
    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.with_values(&[a], |v| v[0].reshaped(shape))?;
        self.record(
            "reshape",
            &[a],
            out,
            Box::new(|args| Ok(vec![Some(args.grad_output.to_vec())])),
        )
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let axes = axes.to_vec();
        let out = self.with_values(&[a], |v| {
            check_axes(&axes, v[0].rank())?;
            let (shape, data) = permute_data(v[0].data(), v[0].shape(), &axes);
            Tensor::new(&shape, data)
        })?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.record(
            "permute",
            &[a],
            out,
            Box::new(move |args| {
                let (_, g) = permute_data(args.grad_output, args.output.shape(), &inverse);
                Ok(vec![Some(g)])
            }),
        )
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        self.permute(a, &[1, 0])
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat of zero tensors".into()));
        }
        let (out, sizes) = self.with_values(parts, |v| {
            let base = v[0].shape();
            if axis >= base.len() {
                return Err(Error::dim(format!("concat axis {axis} for rank {}", base.len())));
            }
            let mut sizes = Vec::with_capacity(v.len());
            for t in v {
                let s = t.shape();
                if s.len() != base.len()
                    || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i])
                {
                    return Err(Error::dim(format!("concat: {s:?} incompatible with {base:?}")));
                }
                sizes.push(s[axis]);
            }
            let outer: usize = base[..axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let total: usize = sizes.iter().sum();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for (t, &sz) in v.iter().zip(&sizes) {
                    data.extend_from_slice(&t.data()[o * sz * inner..(o + 1) * sz * inner]);
                }
            }
            let mut shape = base.to_vec();
            shape[axis] = total;
            Ok((Tensor::new(&shape, data)?, sizes))
        })?;
        self.record(
            "concat",
            parts,
            out,
            Box::new(move |args| {
                let shape = args.output.shape();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total: usize = sizes.iter().sum();
                let g = args.grad_output;
                let mut grads = Vec::with_capacity(sizes.len());
                let mut start = 0;
                for (k, &sz) in sizes.iter().enumerate() {
                    if !args.needs_grad[k] {
                        grads.push(None);
                        start += sz;
                        continue;
                    }
                    let mut gk = Vec::with_capacity(outer * sz * inner);
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        gk.extend_from_slice(&g[base..base + sz * inner]);
                    }
                    grads.push(Some(gk));
                    start += sz;
                }
                Ok(grads)
            }),
        )
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.with_values(&[a], |v| {
            let s = v[0].shape();
            if axis >= s.len() || len == 0 || start + len > s[axis] {
                return Err(Error::dim(format!(
                    "narrow [{start}, {}) on axis {axis} of {s:?}",
                    start + len
                )));
            }
            let outer: usize = s[..axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * s[axis] + start) * inner;
                data.extend_from_slice(&v[0].data()[base..base + len * inner]);
            }
            let mut shape = s.to_vec();
            shape[axis] = len;
            Tensor::new(&shape, data)
        })?;
        self.record(
            "narrow",
            &[a],
            out,
            Box::new(move |args| {
                let s = args.inputs[0].shape();
                let outer: usize = s[..axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut g = vec![T::zero(); args.inputs[0].numel()];
                for o in 0..outer {
                    let dst = (o * s[axis] + start) * inner;
                    let src = o * len * inner;
                    g[dst..dst + len * inner].copy_from_slice(&args.grad_output[src..src + len * inner]);
                }
                Ok(vec![Some(g)])
            }),
        )
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let dim = self.shape(a).get(axis).copied().ok_or_else(|| {
            Error::dim(format!("split axis {axis} out of range"))
        })?;
        if sizes.iter().sum::<usize>() != dim {
            return Err(Error::dim(format!("split sizes {sizes:?} do not sum to {dim}")));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let v = self.narrow(a, axis, start, len);
                start += len;
                v
            })
            .collect()
    }

    /// Splits along `axis` into `n` equal pieces.
    pub fn chunk(&self, a: Var, axis: usize, n: usize) -> Result<Vec<Var>> {
        let dim = self.shape(a).get(axis).copied().unwrap_or(0);
        if n == 0 || dim % n != 0 {
            return Err(Error::dim(format!("cannot split {dim} into {n} equal parts")));
        }
        self.split(a, axis, &vec![dim / n; n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_mapping() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let (shape, data) = permute_data(t.data(), t.shape(), &[2, 0, 1]);
        let p = Tensor::new(&shape, data).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.at(&[c, a, b]), t.at(&[a, b, c]));
                }
            }
        }
    }

    #[test]
    fn concat_then_split_recovers_parts() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn(&[2, 1, 3], |i| i as f64));
        let b = g.constant(Tensor::from_fn(&[2, 2, 3], |i| 100.0 + i as f64));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), vec![2, 3, 3]);
        let parts = g.split(c, 1, &[1, 2]).unwrap();
        assert_eq!(*g.value(parts[0]), *g.value(a));
        assert_eq!(*g.value(parts[1]), *g.value(b));
    }

    #[test]
    fn bad_axes_are_rejected() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        assert!(g.permute(a, &[0, 0]).is_err());
        assert!(g.permute(a, &[0]).is_err());
        assert!(g.narrow(a, 1, 2, 2).is_err());
        assert!(g.chunk(a, 1, 2).is_err());
    }
}

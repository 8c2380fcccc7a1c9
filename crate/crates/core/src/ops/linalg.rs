use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};

/// `c += a · b` with `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`, `c: m×n`.
pub(crate) fn gemm_nt<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_tn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (cv, &bv) in c[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

impl<T: Element> Graph<T> {
    /// Matrix product of `M×K` and `K×N`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with_values(&[a, b], |v| {
            let (sa, sb) = (v[0].shape(), v[1].shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::dim(format!("matmul {sa:?} · {sb:?}")));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut c = vec![T::zero(); m * n];
            gemm(m, k, n, v[0].data(), v[1].data(), &mut c);
            Tensor::new(&[m, n], c)
        })?;
        self.record(
            "matmul",
            &[a, b],
            out,
            Box::new(|args| {
                let (m, k) = (args.inputs[0].shape()[0], args.inputs[0].shape()[1]);
                let n = args.inputs[1].shape()[1];
                let g = args.grad_output;
                let ga = args.needs_grad[0].then(|| {
                    // dA = dC · Bᵀ
                    let mut ga = vec![T::zero(); m * k];
                    gemm_nt(m, n, k, g, args.inputs[1].data(), &mut ga);
                    ga
                });
                let gb = args.needs_grad[1].then(|| {
                    // dB = Aᵀ · dC
                    let mut gb = vec![T::zero(); k * n];
                    gemm_tn(k, m, n, args.inputs[0].data(), g, &mut gb);
                    gb
                });
                Ok(vec![ga, gb])
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[rows, cols], v).unwrap()
    }

    #[test]
    fn identity_times_matrix() {
        let g = Graph::<f64>::new();
        let i = g.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn projector_selects_first_row() {
        let g = Graph::<f64>::new();
        let p = g.constant(mat(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        let m = g.constant(mat(2, 2, &[5.0, 6.0, 7.0, 8.0]));
        let r = g.matmul(p, m).unwrap();
        assert_eq!(g.value(r).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn inner_dimension_mismatch() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn kernels_agree_with_naive_product() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, &b, &mut c);
        // bᵀ stored row-major as n×k
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, &mut c2);
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let mut c3 = vec![0.0; m * n];
        gemm_tn(m, k, n, &at, &b, &mut c3);
        for i in 0..m * n {
            assert!((c[i] - naive[i]).abs() < 1e-12);
            assert!((c2[i] - naive[i]).abs() < 1e-12);
            assert!((c3[i] - naive[i]).abs() < 1e-12);
        }
    }
}

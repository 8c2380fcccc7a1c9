use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{lit, Element, Tensor};

fn same_shape<T: Element>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn map<T: Element>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

impl<T: Element> Graph<T> {
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with_values(&[a, b], |v| {
            same_shape("add", v[0], v[1])?;
            let d = v[0].data().iter().zip(v[1].data()).map(|(&x, &y)| x + y).collect();
            Tensor::new(v[0].shape(), d)
        })?;
        self.record(
            "add",
            &[a, b],
            out,
            Box::new(|args| {
                let g = args.grad_output.to_vec();
                Ok(vec![Some(g.clone()), Some(g)])
            }),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with_values(&[a, b], |v| {
            same_shape("sub", v[0], v[1])?;
            let d = v[0].data().iter().zip(v[1].data()).map(|(&x, &y)| x - y).collect();
            Tensor::new(v[0].shape(), d)
        })?;
        self.record(
            "sub",
            &[a, b],
            out,
            Box::new(|args| {
                let g = args.grad_output;
                Ok(vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())])
            }),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with_values(&[a, b], |v| {
            same_shape("mul", v[0], v[1])?;
            let d = v[0].data().iter().zip(v[1].data()).map(|(&x, &y)| x * y).collect();
            Tensor::new(v[0].shape(), d)
        })?;
        self.record(
            "mul",
            &[a, b],
            out,
            Box::new(|args| {
                let g = args.grad_output;
                let (a, b) = (args.inputs[0].data(), args.inputs[1].data());
                let ga = args.needs_grad[0].then(|| g.iter().zip(b).map(|(&g, &y)| g * y).collect());
                let gb = args.needs_grad[1].then(|| g.iter().zip(a).map(|(&g, &x)| g * x).collect());
                Ok(vec![ga, gb])
            }),
        )
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        let s: T = lit(s);
        let out = self.with_values(&[a], |v| map(v[0], |x| x * s));
        self.record(
            "scale",
            &[a],
            out,
            Box::new(move |args| Ok(vec![Some(args.grad_output.iter().map(|&g| g * s).collect())])),
        )
    }

    /// Adds `b` (shape `[D]`) to every length-`D` row of `x` (last axis).
    pub fn bias_add(&self, x: Var, b: Var) -> Result<Var> {
        let out = self.with_values(&[x, b], |v| {
            let d = *v[0].shape().last().unwrap_or(&1);
            if v[1].shape() != [d] {
                return Err(Error::dim(format!(
                    "bias_add: bias {:?} does not match last axis of {:?}",
                    v[1].shape(),
                    v[0].shape()
                )));
            }
            let bias = v[1].data();
            let data = v[0]
                .data()
                .chunks(d)
                .flat_map(|row| row.iter().zip(bias).map(|(&x, &b)| x + b))
                .collect();
            Tensor::new(v[0].shape(), data)
        })?;
        self.record(
            "bias_add",
            &[x, b],
            out,
            Box::new(|args| {
                let d = args.inputs[1].numel();
                let g = args.grad_output;
                let gb = args.needs_grad[1].then(|| {
                    let mut acc = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    acc
                });
                Ok(vec![Some(g.to_vec()), gb])
            }),
        )
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let out = self.with_values(&[a], |v| map(v[0], |x| x.max(T::zero())));
        self.record(
            "relu",
            &[a],
            out,
            Box::new(|args| {
                let x = args.inputs[0].data();
                Ok(vec![Some(
                    args.grad_output
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                )])
            }),
        )
    }

    /// GELU in its exact form `x·Φ(x)` with the Gaussian CDF `Φ`.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        let out = self.with_values(&[a], |v| map(v[0], gelu_exact));
        self.record(
            "gelu",
            &[a],
            out,
            Box::new(|args| {
                let x = args.inputs[0].data();
                Ok(vec![Some(
                    args.grad_output
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| g * gelu_exact_grad(x))
                        .collect(),
                )])
            }),
        )
    }
}

pub(crate) fn gelu_exact<T: Element>(x: T) -> T {
    let half: T = lit(0.5);
    half * x * (T::one() + (x * lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_exact_grad<T: Element>(x: T) -> T {
    let half: T = lit(0.5);
    let cdf = half * (T::one() + (x * lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

//! Pointwise, reduction, and shape ops on the tape.

use super::{leaky_relu, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

impl<S: Scalar> Tape<S> {
    pub fn add(&mut self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        let out = a.value().zip_map(b.value(), |x, y| x + y)?;
        self.record("add", &[a, b], out, |g, needs| {
            Ok(vec![
                needs[0].then(|| g.clone()),
                needs[1].then(|| g.clone()),
            ])
        })
    }

    pub fn sub(&mut self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        let out = a.value().zip_map(b.value(), |x, y| x - y)?;
        self.record("sub", &[a, b], out, |g, needs| {
            Ok(vec![
                needs[0].then(|| g.clone()),
                needs[1].then(|| g.map(|v| -v)),
            ])
        })
    }

    pub fn mul(&mut self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        let out = a.value().zip_map(b.value(), |x, y| x * y)?;
        let (sa, sb) = (a.shared(), b.shared());
        self.record("mul", &[a, b], out, move |g, needs| {
            Ok(vec![
                needs[0].then(|| g.zip_map(&sb, |d, y| d * y)).transpose()?,
                needs[1].then(|| g.zip_map(&sa, |d, x| d * x)).transpose()?,
            ])
        })
    }

    pub fn scale(&mut self, a: &Var<S>, factor: S) -> Result<Var<S>> {
        let out = a.value().map(|x| x * factor);
        self.record("scale", &[a], out, move |g, _| {
            Ok(vec![Some(g.map(|d| d * factor))])
        })
    }

    /// `x` for `x >= 0`, `slope * x` otherwise. The derivative at zero is 1.
    pub fn leaky_relu(&mut self, a: &Var<S>, slope: S) -> Result<Var<S>> {
        self.probe_signs(a.value().data());
        let out = leaky_relu(a.value(), slope);
        let x = a.shared();
        self.record("leaky_relu", &[a], out, move |g, _| {
            Ok(vec![Some(g.zip_map(&x, |d, v| {
                if v >= S::zero() {
                    d
                } else {
                    d * slope
                }
            })?)])
        })
    }

    pub fn square(&mut self, a: &Var<S>) -> Result<Var<S>> {
        let out = a.value().map(|x| x * x);
        let x = a.shared();
        self.record("square", &[a], out, move |g, _| {
            let two = S::of(2.0);
            Ok(vec![Some(g.zip_map(&x, |d, v| two * d * v)?)])
        })
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: &Var<S>) -> Result<Var<S>> {
        let out = Tensor::scalar(a.value().sum());
        let shape = a.shape().to_vec();
        self.record("sum", &[a], out, move |g, _| {
            Ok(vec![Some(Tensor::full(&shape, g.data()[0]))])
        })
    }

    pub fn mean(&mut self, a: &Var<S>) -> Result<Var<S>> {
        let n = S::of(a.value().numel() as f64);
        let out = Tensor::scalar(a.value().sum() / n);
        let shape = a.shape().to_vec();
        self.record("mean", &[a], out, move |g, _| {
            Ok(vec![Some(Tensor::full(&shape, g.data()[0] / n))])
        })
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        let diff = a.value().zip_map(b.value(), |x, y| x - y)?;
        let n = S::of(diff.numel() as f64);
        let out = Tensor::scalar(diff.data().iter().map(|&d| d * d).sum::<S>() / n);
        self.record("mse", &[a, b], out, move |g, needs| {
            let k = S::of(2.0) * g.data()[0] / n;
            let ga = diff.map(|d| k * d);
            let gb = needs[1].then(|| ga.map(|v| -v));
            Ok(vec![needs[0].then_some(ga), gb])
        })
    }

    pub fn reshape(&mut self, a: &Var<S>, shape: &[usize]) -> Result<Var<S>> {
        let out = a.to_tensor().reshape(shape)?;
        let original = a.shape().to_vec();
        self.record("reshape", &[a], out, move |g, _| {
            Ok(vec![Some(g.clone().reshape(&original)?)])
        })
    }

    pub fn concat(&mut self, parts: &[&Var<S>], axis: usize) -> Result<Var<S>> {
        let values: Vec<&Tensor<S>> = parts.iter().map(|v| v.value()).collect();
        let out = Tensor::concat(&values, axis)?;
        let extents: Vec<usize> = parts.iter().map(|v| v.shape()[axis]).collect();
        self.record("concat", parts, out, move |g, needs| {
            let mut start = 0;
            let mut grads = Vec::with_capacity(extents.len());
            for (&len, &need) in extents.iter().zip(needs) {
                grads.push(need.then(|| g.narrow(axis, start, len)).transpose()?);
                start += len;
            }
            Ok(grads)
        })
    }

    pub fn narrow(&mut self, a: &Var<S>, axis: usize, start: usize, len: usize) -> Result<Var<S>> {
        let out = a.value().narrow(axis, start, len)?;
        let shape = a.shape().to_vec();
        self.record("narrow", &[a], out, move |g, _| {
            let mut full = Tensor::zeros(&shape);
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let src_chunk = len * inner;
            let dst_chunk = shape[axis] * inner;
            for o in 0..outer {
                let dst = o * dst_chunk + start * inner;
                full.data_mut()[dst..dst + src_chunk]
                    .copy_from_slice(&g.data()[o * src_chunk..(o + 1) * src_chunk]);
            }
            Ok(vec![Some(full)])
        })
    }

    /// Splits `a` into two halves along `axis`.
    pub fn split_half(&mut self, a: &Var<S>, axis: usize) -> Result<(Var<S>, Var<S>)> {
        let extent = a.shape().get(axis).copied().unwrap_or(0);
        if extent % 2 != 0 || extent == 0 {
            return Err(Error::dim(
                "split_half",
                format!("axis {axis} of {:?} is not even", a.shape()),
            ));
        }
        let half = extent / 2;
        Ok((self.narrow(a, axis, 0, half)?, self.narrow(a, axis, half, half)?))
    }
}

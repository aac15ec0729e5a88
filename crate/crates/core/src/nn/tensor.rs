use super::real::Real;
use crate::error::{Error, Result};

/// Dense row-major tensor. Feature maps use `[batch, channels, x, y, z]`
/// with the spatial part flattened x-fastest, matching [`crate::volume::Grid3`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeIncompatible(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn item(&self) -> F {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// `(batch, channels, [x, y, z])` of a 5-axis feature map.
    pub fn dims5(&self) -> Result<(usize, usize, [usize; 3])> {
        match self.shape.as_slice() {
            &[n, c, x, y, z] => Ok((n, c, [x, y, z])),
            other => Err(Error::ShapeIncompatible(format!(
                "expected a 5-axis feature map, got shape {other:?}"
            ))),
        }
    }

    pub fn spatial_len(&self) -> usize {
        self.shape.iter().skip(2).product()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeIncompatible(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel slice `[n, c, ..]` of a 5-axis map as a contiguous spatial block.
    pub fn channel(&self, n: usize, c: usize) -> &[F] {
        let s = self.spatial_len();
        let channels = self.shape[1];
        &self.data[(n * channels + c) * s..(n * channels + c + 1) * s]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [F] {
        let s = self.spatial_len();
        let channels = self.shape[1];
        &mut self.data[(n * channels + c) * s..(n * channels + c + 1) * s]
    }

    /// Concatenates 5-axis maps along channels.
    pub fn concat_channels(parts: &[&Tensor<F>]) -> Result<Self> {
        let (n, _, sp) = parts
            .first()
            .ok_or_else(|| Error::ShapeIncompatible("nothing to concatenate".into()))?
            .dims5()?;
        let mut total_c = 0;
        for p in parts {
            let (pn, pc, psp) = p.dims5()?;
            if pn != n || psp != sp {
                return Err(Error::ShapeIncompatible(format!(
                    "cannot concatenate {:?} with {:?}",
                    parts[0].shape, p.shape
                )));
            }
            total_c += pc;
        }
        let s: usize = sp.iter().product();
        let mut data = Vec::with_capacity(n * total_c * s);
        for b in 0..n {
            for p in parts {
                let pc = p.shape[1];
                data.extend_from_slice(&p.data[b * pc * s..(b + 1) * pc * s]);
            }
        }
        Tensor::from_vec(&[n, total_c, sp[0], sp[1], sp[2]], data)
    }

    /// Selects one batch item, keeping the batch axis.
    pub fn batch_item(&self, b: usize) -> Self {
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.data[b * per..(b + 1) * per].to_vec(),
        }
    }
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

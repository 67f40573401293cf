//! Dense row-major tensor over a flat buffer.

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(dims: &[usize]) -> Tensor<S> {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![S::ZERO; len],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<S>) -> Tensor<S> {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "dims {:?} do not match buffer length {}",
            dims,
            data.len()
        );
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn full(dims: &[usize], value: S) -> Tensor<S> {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Reinterprets the buffer under new dims of equal total length.
    pub fn reshaped(mut self, dims: &[usize]) -> Tensor<S> {
        assert_eq!(dims.iter().product::<usize>(), self.data.len());
        self.dims = dims.to_vec();
        self
    }

    pub fn fill(&mut self, value: S) {
        for v in &mut self.data {
            *v = value;
        }
    }

    pub fn scale(&mut self, a: S) {
        for v in &mut self.data {
            *v *= a;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn map<T: Scalar>(&self, f: impl Fn(S) -> T) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let r = t.clone().reshaped(&[3, 2]);
        assert_eq!(r.dims(), &[3, 2]);
        assert_eq!(r.data(), t.data());
    }

    #[test]
    #[should_panic]
    fn from_vec_checks_length() {
        let _ = Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]);
    }
}

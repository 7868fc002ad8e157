//! Dense row-major tensors over a configurable float element type.

use std::fmt;
use std::sync::Arc;

use super::AutodiffError;

/// Element width tag stored in checkpoint headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Float element type the tensor library is generic over.
///
/// Training defaults to `f32`; gradient checking runs in `f64`, where
/// central finite differences are actually meaningful.
pub trait Element:
    num_traits::Float + num_traits::NumAssign + Copy + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// Dense n-dimensional float array, row-major, immutable after construction.
///
/// Clones are cheap: the flat buffer is shared behind an [`Arc`].
/// Every dimension is at least 1; scalars use shape `[1]`.
#[derive(Debug, Clone)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
}

impl<F: Element> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, AutodiffError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(AutodiffError::InvalidShape(format!(
                "dimensions must all be >= 1, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::ElementCountMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// Builds a tensor, panicking on shape/length mismatch. For statically
    /// known shapes (tests, parameter construction).
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Self {
        Self::new(shape.to_vec(), data).expect("static tensor shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![F::zero(); n])
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![F::one(); n])
    }

    pub fn scalar(v: F) -> Self {
        Self::from_vec(&[1], vec![v])
    }

    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> Self {
        Self::from_vec(shape, data.iter().map(|&v| F::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // dimensions are >= 1 by construction
    }

    pub fn is_scalar(&self) -> bool {
        self.shape == [1]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.data.to_vec()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> F {
        debug_assert!(self.is_scalar(), "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    /// Returns a copy with one flat element replaced. Used by the
    /// finite-difference checker to perturb inputs.
    pub fn with_element(&self, index: usize, value: F) -> Self {
        let mut data = self.data.to_vec();
        data[index] = value;
        Self {
            shape: self.shape.clone(),
            data: Arc::new(data),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, F> {
        self.data.iter()
    }

    /// Bitwise equality of shape and every element.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub(crate) fn share_data(&self) -> Arc<Vec<F>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn from_shared(shape: Vec<usize>, data: Arc<Vec<F>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dimension() {
        assert!(matches!(
            Tensor::<f64>::new(vec![2, 0], vec![]),
            Err(AutodiffError::InvalidShape(_))
        ));
    }

    #[test]
    fn rejects_element_count_mismatch() {
        assert!(matches!(
            Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]),
            Err(AutodiffError::ElementCountMismatch { expected: 4, actual: 3 })
        ));
    }

    #[test]
    fn scalar_is_shape_one() {
        let t = Tensor::<f32>::scalar(2.5);
        assert!(t.is_scalar());
        assert_eq!(t.item(), 2.5);
    }

    #[test]
    fn clone_shares_storage() {
        let t = Tensor::<f64>::ones(&[4, 4]);
        let u = t.clone();
        assert!(Arc::ptr_eq(&t.data, &u.data));
    }
}

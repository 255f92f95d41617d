use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
///
/// All training and evaluation arithmetic runs in f64; serialized embeddings
/// are stored as f32 and widened on load. Values are immutable once a tensor
/// has been handed to the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that the shape matches the payload length.
    /// Debug builds additionally reject non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor construction", &shape, &[data.len()]));
        }
        let t = Tensor { shape, data };
        t.debug_check_finite("tensor construction")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::shape("ragged rows", &[c], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::shape("scalar read", &[1], &self.shape));
        }
        Ok(self.data[0])
    }

    /// Row/column counts for 2-D use. Scalars and vectors are rejected.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::shape("2-d access", &[0, 0], &self.shape)),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = (self.shape[0], self.shape[1]);
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// NaN/Inf guard, active in debug evaluation only.
    pub fn debug_check_finite(&self, context: &'static str) -> Result<()> {
        if cfg!(debug_assertions) && !self.all_finite() {
            return Err(Error::non_finite(context));
        }
        Ok(())
    }
}

/// Dot product with a fixed left-to-right accumulation order.
///
/// Every similarity in the crate funnels through this helper so that batched
/// and pairwise code paths agree bit-for-bit.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Returns `v / ||v||`, or the zero vector when `v` is zero.
pub fn l2_normalized(v: &[f64]) -> Vec<f64> {
    let n = l2_norm(v);
    if n == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| x / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_payload() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_roundtrip() {
        let t = Tensor::scalar(2.5);
        assert!(t.is_scalar());
        assert_eq!(t.scalar_value().unwrap(), 2.5);
        assert_eq!(t.numel(), 1);
    }

    #[cfg(debug_assertions)]
    #[test]
    fn non_finite_rejected_in_debug() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn normalize_zero_vector() {
        assert_eq!(l2_normalized(&[0.0, 0.0]), vec![0.0, 0.0]);
        let u = l2_normalized(&[3.0, 4.0]);
        assert!((l2_norm(&u) - 1.0).abs() < 1e-15);
    }
}

//! Dense 4-D tensor in `(batch, channels, height, width)` layout.
//!
//! Row-major with `w` fastest, so each `(n, c)` plane and each row is a
//! contiguous slice. All math in the workspace runs in `f64`.

use crate::error::{NnError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4D {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4D {
    pub fn zeros(shape: [usize; 4]) -> Self {
        let len = shape.iter().product();
        Tensor4D {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(NnError::InvalidArgument(format!(
                "tensor data length {} does not match shape {:?} (= {})",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor4D { shape, data })
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous `(h*w)` plane for one `(n, c)` pair.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor4D]) -> Result<Tensor4D> {
        let first = parts
            .first()
            .ok_or_else(|| NnError::InvalidArgument("concat of zero tensors".into()))?;
        let [n, _, h, w] = first.shape;
        let mut channels = 0;
        for p in parts {
            let [pn, pc, ph, pw] = p.shape;
            if pn != n || ph != h || pw != w {
                return Err(NnError::InvalidArgument(format!(
                    "concat shape mismatch: {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
            channels += pc;
        }
        let mut out = Tensor4D::zeros([n, channels, h, w]);
        let hw = h * w;
        for b in 0..n {
            let mut c0 = 0;
            for p in parts {
                for c in 0..p.channels() {
                    out.plane_mut(b, c0 + c).copy_from_slice(p.plane(b, c));
                }
                c0 += p.channels();
            }
        }
        let _ = hw;
        Ok(out)
    }

    /// Splits a channel-gradient back into per-part tensors (inverse of concat).
    pub fn split_channels(&self, widths: &[usize]) -> Vec<Tensor4D> {
        let [n, _, h, w] = self.shape;
        let mut out = Vec::with_capacity(widths.len());
        let mut c0 = 0;
        for &cw in widths {
            let mut part = Tensor4D::zeros([n, cw, h, w]);
            for b in 0..n {
                for c in 0..cw {
                    part.plane_mut(b, c).copy_from_slice(self.plane(b, c0 + c));
                }
            }
            c0 += cw;
            out.push(part);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_layout_is_row_major() {
        let mut t = Tensor4D::zeros([2, 3, 4, 5]);
        t.set(1, 2, 3, 4, 7.0);
        assert_eq!(t.data()[((1 * 3 + 2) * 4 + 3) * 5 + 4], 7.0);
        assert_eq!(t.at(1, 2, 3, 4), 7.0);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor4D::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn concat_then_split_roundtrips() {
        let a = Tensor4D::from_vec([1, 2, 1, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor4D::from_vec([1, 1, 1, 2], vec![5., 6.]).unwrap();
        let cat = Tensor4D::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), [1, 3, 1, 2]);
        assert_eq!(cat.data(), &[1., 2., 3., 4., 5., 6.]);
        let parts = cat.split_channels(&[2, 1]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}

use std::fmt;

/// Dense row-major `f64` tensor.
///
/// Image tensors use NCHW layout throughout the crate.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Panics if `data.len()` does not match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NCHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "cannot reshape {:?} into {shape:?}",
            self.shape
        );
        self.shape = shape.to_vec();
        self
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Sample `n` of a batch as a new tensor with leading dimension 1.
    pub fn sample(&self, n: usize) -> Tensor {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::from_vec(&shape, self.data[n * per..(n + 1) * per].to_vec())
    }

    /// Stack equally shaped tensors along a new leading batch dimension,
    /// or along the existing leading dimension when they already have one.
    pub fn cat_batch(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "cat_batch of zero tensors");
        let tail = &parts[0].shape[1..];
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.numel()).sum());
        let mut n = 0;
        for t in parts {
            assert_eq!(&t.shape[1..], tail, "cat_batch shape mismatch");
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(tail);
        Tensor::from_vec(&shape, data)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// Concatenate NCHW tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, ca, h, w) = a.dims4();
    let (nb, cb, hb, wb) = b.dims4();
    assert!(n == nb && h == hb && w == wb, "concat_channels: {:?} vs {:?}", a.shape(), b.shape());
    let hw = h * w;
    let mut out = Vec::with_capacity(n * (ca + cb) * hw);
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * ca * hw..(i + 1) * ca * hw]);
        out.extend_from_slice(&b.data()[i * cb * hw..(i + 1) * cb * hw]);
    }
    Tensor::from_vec(&[n, ca + cb, h, w], out)
}

/// Inverse of [`concat_channels`]: split off the first `ca` channels.
pub fn split_channels(t: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let (n, c, h, w) = t.dims4();
    assert!(ca <= c);
    let cb = c - ca;
    let hw = h * w;
    let mut a = Vec::with_capacity(n * ca * hw);
    let mut b = Vec::with_capacity(n * cb * hw);
    for i in 0..n {
        let base = i * c * hw;
        a.extend_from_slice(&t.data()[base..base + ca * hw]);
        b.extend_from_slice(&t.data()[base + ca * hw..base + c * hw]);
    }
    (
        Tensor::from_vec(&[n, ca, h, w], a),
        Tensor::from_vec(&[n, cb, h, w], b),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_is_identity() {
        let a = Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(&[2, 2, 1, 2], (0..8).map(f64::from).collect());
        let c = concat_channels(&a, &b);
        assert_eq!(c.shape(), &[2, 3, 1, 2]);
        assert_eq!(&c.data()[..6], &[1.0, 2.0, 0.0, 1.0, 2.0, 3.0]);
        let (a2, b2) = split_channels(&c, 1);
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    #[should_panic]
    fn from_vec_rejects_bad_length() {
        let _ = Tensor::from_vec(&[2, 2], vec![0.0; 3]);
    }
}

use crate::float::Float;
use crate::ShapeError;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (i, &d) in shape.iter().enumerate().rev() {
        strides[i] = acc;
        acc *= d;
    }
    strides
}

impl<T: Float> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, ShapeError> {
        if numel(shape) != data.len() {
            return Err(ShapeError::Length {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(
            self.shape, other.shape,
            "elementwise op on mismatched shapes {:?} vs {:?}",
            self.shape, other.shape
        );
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        assert_eq!(
            numel(shape),
            self.data.len(),
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        }
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Self) -> Self {
        assert!(
            self.shape.len() == 2 && other.shape.len() == 2 && self.shape[1] == other.shape[0],
            "matmul shape mismatch {:?} x {:?}",
            self.shape,
            other.shape
        );
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        if m > 0 && n > 0 && k > 0 {
            unsafe {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    self.data.as_ptr(),
                    k as isize,
                    1,
                    other.data.as_ptr(),
                    n as isize,
                    1,
                    T::zero(),
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Self {
            shape: vec![m, n],
            data: out,
        }
    }

    pub fn transpose(&self) -> Self {
        assert_eq!(self.shape.len(), 2, "transpose needs a matrix");
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Numpy-style broadcast (leading dimensions are padded with 1).
    pub fn broadcast_to(&self, shape: &[usize]) -> Self {
        let src = aligned_shape(&self.shape, shape.len());
        for (s, t) in src.iter().zip(shape) {
            assert!(
                *s == *t || *s == 1,
                "cannot broadcast {:?} to {:?}",
                self.shape,
                shape
            );
        }
        if src == shape {
            return self.reshape(shape);
        }
        let src_strides: Vec<usize> = strides_of(&src)
            .into_iter()
            .zip(&src)
            .map(|(st, &d)| if d == 1 { 0 } else { st })
            .collect();
        let total = numel(shape);
        let mut out = Vec::with_capacity(total);
        for_each_offset(shape, &src_strides, |off| out.push(self.data[off]));
        Self {
            shape: shape.to_vec(),
            data: out,
        }
    }

    /// Adjoint of `broadcast_to`: sums over broadcast dimensions.
    pub fn sum_to(&self, shape: &[usize]) -> Self {
        let dst = aligned_shape(shape, self.shape.len());
        for (s, t) in self.shape.iter().zip(&dst) {
            assert!(
                *s == *t || *t == 1,
                "cannot sum {:?} down to {:?}",
                self.shape,
                shape
            );
        }
        if dst == self.shape {
            return self.reshape(shape);
        }
        let dst_strides: Vec<usize> = strides_of(&dst)
            .into_iter()
            .zip(&dst)
            .map(|(st, &d)| if d == 1 { 0 } else { st })
            .collect();
        let mut out = vec![T::zero(); numel(&dst)];
        let mut i = 0;
        for_each_offset(&self.shape, &dst_strides, |off| {
            out[off] += self.data[i];
            i += 1;
        });
        Self {
            shape: shape.to_vec(),
            data: out,
        }
    }

    /// `out[i] = self[idx[i]]`.
    pub fn gather(&self, idx: &[usize], shape: &[usize]) -> Self {
        assert_eq!(numel(shape), idx.len(), "gather output shape mismatch");
        Self {
            shape: shape.to_vec(),
            data: idx.iter().map(|&i| self.data[i]).collect(),
        }
    }

    /// `out[idx[i]] += self[i]`; adjoint of `gather`.
    pub fn scatter(&self, idx: &[usize], shape: &[usize]) -> Self {
        assert_eq!(self.data.len(), idx.len(), "scatter index length mismatch");
        let mut out = vec![T::zero(); numel(shape)];
        for (&i, &v) in idx.iter().zip(&self.data) {
            out[i] += v;
        }
        Self {
            shape: shape.to_vec(),
            data: out,
        }
    }
}

fn aligned_shape(shape: &[usize], rank: usize) -> Vec<usize> {
    assert!(
        shape.len() <= rank,
        "rank {} shape {:?} cannot align to rank {}",
        shape.len(),
        shape,
        rank
    );
    let mut out = vec![1; rank - shape.len()];
    out.extend_from_slice(shape);
    out
}

/// Walks `shape` in row-major order, calling `f` with the dot product of the
/// multi-index and `strides`.
fn for_each_offset(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize)) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let last = rank - 1;
    let inner = shape[last];
    let inner_stride = strides[last];
    let mut done = 0;
    while done < total {
        let mut o = off;
        for _ in 0..inner {
            f(o);
            o += inner_stride;
        }
        done += inner;
        // carry into the outer dimensions
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            off += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_and_sum_are_adjoint_shapes() {
        let t = Tensor::<f64>::from_vec(&[1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let b = t.broadcast_to(&[2, 3, 2]);
        assert_eq!(b.shape(), &[2, 3, 2]);
        assert_eq!(b.data()[..6], [1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let s = b.sum_to(&[1, 3, 1]);
        assert_eq!(s.data(), &[4.0, 8.0, 12.0]);
        let total = b.sum_to(&[]);
        assert_eq!(total.item(), 24.0);
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::<f64>::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::from_vec(&[3, 1], vec![1., 0., -1.]).unwrap();
        assert_eq!(a.matmul(&b).data(), &[-2.0, -2.0]);
        assert_eq!(a.transpose().shape(), &[3, 2]);
        assert_eq!(a.transpose().data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
    }
}

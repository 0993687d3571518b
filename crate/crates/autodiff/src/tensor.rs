use crate::{AdError, Real, Result};

/// Dense row-major array. Rank is the length of `shape`; scalars use an
/// empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AdError::Contract(format!(
                "tensor shape {:?} holds {} entries, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![T::ZERO; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == d), "ragged rows");
        Self {
            shape: vec![n, d],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty() || self.data.len() == 1
    }

    pub fn item(&self) -> T {
        assert!(self.is_scalar(), "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    /// Rows/cols of a rank-2 tensor; vectors are treated as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            2 => (self.shape[0], self.shape[1]),
            1 => (1, self.shape[0]),
            _ => panic!("dims2 on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let (_, d) = self.dims2();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// `c[n×m] += a[n×k] · b[k×m]`, row-major, fixed accumulation order.
pub(crate) fn matmul_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(c.len(), n * m);
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = av.mul_add(bv, *cv);
            }
        }
    }
}

/// `c[n×m] += a[k×n]ᵀ · b[k×m]`.
pub(crate) fn matmul_at_b_acc<T: Real>(
    c: &mut [T],
    a: &[T],
    b: &[T],
    k: usize,
    n: usize,
    m: usize,
) {
    for p in 0..k {
        let arow = &a[p * n..(p + 1) * n];
        let brow = &b[p * m..(p + 1) * m];
        for i in 0..n {
            let av = arow[i];
            let crow = &mut c[i * m..(i + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = av.mul_add(bv, *cv);
            }
        }
    }
}

/// `c[n×m] += a[n×k] · b[m×k]ᵀ`.
pub(crate) fn matmul_a_bt_acc<T: Real>(
    c: &mut [T],
    a: &[T],
    b: &[T],
    n: usize,
    k: usize,
    m: usize,
) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = av.mul_add(bv, acc);
            }
            c[i * m + j] += acc;
        }
    }
}

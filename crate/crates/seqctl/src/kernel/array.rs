//! Dense row-major f64 arrays with the handful of matrix kernels the
//! models need. Everything is shape-checked by the graph layer; the
//! routines here assume shapes already agree.

use rayon::prelude::*;

/// Row-major dense array of f64 values.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

// Below this many multiply-adds a parallel matmul is not worth the
// scheduling overhead.
const PAR_FLOP_THRESHOLD: usize = 1 << 17;

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar array");
        self.data[0]
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("array with empty shape")
    }

    /// Number of rows when the array is viewed as [rows, last_dim].
    pub fn rows(&self) -> usize {
        if self.shape.len() <= 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape to {:?} incompatible with {} elements",
            shape,
            self.data.len()
        );
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape);
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

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// 2-D transpose.
    pub fn transpose2(&self) -> Self {
        assert_eq!(self.shape.len(), 2);
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self {
            shape: vec![n, m],
            data: out,
        }
    }
}

fn matmul_block(a: &[f64], b: &[f64], out: &mut [f64], k: usize, n: usize) {
    // out is one row [n], a is one row [k], b is [k, n]; ikj order so the
    // inner loop streams through b rows.
    for (p, &av) in a.iter().enumerate() {
        if av == 0.0 {
            continue;
        }
        let brow = &b[p * n..(p + 1) * n];
        for (o, &bv) in out.iter_mut().zip(brow) {
            *o += av * bv;
        }
    }
    let _ = k;
}

/// C[m,n] = A[m,k] * B[k,n].
pub fn matmul(a: &Array, b: &Array, m: usize, k: usize, n: usize) -> Array {
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            matmul_block(&ad[i * k..(i + 1) * k], bd, row, k, n);
        });
    } else {
        for i in 0..m {
            matmul_block(&ad[i * k..(i + 1) * k], bd, &mut out[i * n..(i + 1) * n], k, n);
        }
    }
    Array::new(vec![m, n], out)
}

/// C[m,n] = A[m,k] * B[n,k]^T.
pub fn matmul_tb(a: &Array, b: &Array, m: usize, k: usize, n: usize) -> Array {
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    let row = |i: usize, orow: &mut [f64]| {
        let arow = &ad[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o = acc;
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for i in 0..m {
            row(i, &mut out[i * n..(i + 1) * n]);
        }
    }
    Array::new(vec![m, n], out)
}

/// C[m,n] = A[k,m]^T * B[k,n].
pub fn matmul_ta(a: &Array, b: &Array, m: usize, k: usize, n: usize) -> Array {
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for p in 0..k {
        let arow = &ad[p * m..(p + 1) * m];
        let brow = &bd[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Array::new(vec![m, n], out)
}

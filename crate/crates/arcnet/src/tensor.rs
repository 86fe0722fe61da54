//! Dense `f64` tensors in NCHW layout and the matrix kernels behind the
//! network layers.
//!
//! The matrix products are routed through `matrixmultiply::dgemm`, split into
//! row blocks so the parallel build can fan blocks out over threads. Row
//! blocks write disjoint output rows and each output element accumulates in a
//! fixed k-order, so the block split does not change results.

use crate::par;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length mismatch");
        Tensor { n, c, h, w, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn c(&self) -> usize {
        self.c
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    /// One (sample, channel) plane as a contiguous slice.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let pl = self.plane_len();
        let off = (n * self.c + c) * pl;
        &self.data[off..off + pl]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let pl = self.plane_len();
        let off = (n * self.c + c) * pl;
        &mut self.data[off..off + pl]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        self.data[((n * self.c + c) * self.h + y) * self.w + x] = v;
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Elementwise rectified linear unit.
pub fn relu(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.shape();
    let data = x
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { 0.0 })
        .collect();
    Tensor::from_vec(n, c, h, w, data)
}

/// Gradient of [`relu`] given its output `y` and incoming cotangent `dy`.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    debug_assert_eq!(y.shape(), dy.shape());
    let (n, c, h, w) = y.shape();
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&yv, &dv)| if yv > 0.0 { dv } else { 0.0 })
        .collect();
    Tensor::from_vec(n, c, h, w, data)
}

/// Elementwise sum; shapes must match.
pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let (n, c, h, w) = a.shape();
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::from_vec(n, c, h, w, data)
}

/// Concatenate along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.n(), b.n(), "concat: batch mismatch");
    assert_eq!((a.h(), a.w()), (b.h(), b.w()), "concat: spatial mismatch");
    let (n, ca, h, w) = a.shape();
    let cb = b.c();
    let mut out = Tensor::zeros(n, ca + cb, h, w);
    let pl = h * w;
    par::chunks_mut_indexed(out.data_mut(), (ca + cb) * pl, |ni, sample| {
        sample[..ca * pl].copy_from_slice(&a.data()[ni * ca * pl..(ni + 1) * ca * pl]);
        sample[ca * pl..].copy_from_slice(&b.data()[ni * cb * pl..(ni + 1) * cb * pl]);
    });
    out
}

/// Split a channel concatenation back into its two parts.
pub fn split_channels(x: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let (n, c, h, w) = x.shape();
    assert!(ca <= c);
    let cb = c - ca;
    let pl = h * w;
    let mut a = Tensor::zeros(n, ca, h, w);
    let mut b = Tensor::zeros(n, cb, h, w);
    for ni in 0..n {
        let sample = &x.data()[ni * c * pl..(ni + 1) * c * pl];
        a.data_mut()[ni * ca * pl..(ni + 1) * ca * pl].copy_from_slice(&sample[..ca * pl]);
        b.data_mut()[ni * cb * pl..(ni + 1) * cb * pl].copy_from_slice(&sample[ca * pl..]);
    }
    (a, b)
}

fn row_block(m: usize) -> usize {
    // Each block pays its own panel-packing cost inside dgemm, so blocks
    // stay coarse: two per worker, and never smaller than 2048 rows.
    let blocks = (par::threads() * 2).max(1);
    (m.div_ceil(blocks)).max(2048)
}

/// `c[m x n] += a[m x k] * b[k x n]`, all row-major.
pub fn matmul_nn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    assert_eq!(c.len(), m * n);
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let block = row_block(m);
    par::chunks_mut_indexed(c, block * n, |bi, cchunk| {
        let r0 = bi * block;
        let rows = cchunk.len() / n;
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().add(r0 * k),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                1.0,
                cchunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// `out[m x n] = a[m x k] * transpose(bt[n x k])`, all row-major.
pub fn matmul_nt(a: &[f64], bt: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(bt.len(), n * k);
    let mut out = vec![0.0; m * n];
    let block = row_block(m);
    par::chunks_mut_indexed(&mut out, block * n, |bi, cchunk| {
        let r0 = bi * block;
        let rows = cchunk.len() / n;
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().add(r0 * k),
                k as isize,
                1,
                bt.as_ptr(),
                1,
                k as isize,
                1.0,
                cchunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
    out
}

/// `c[m x n] += transpose(at[k x m]) * b[k x n]`, all row-major.
pub fn matmul_tn_acc(c: &mut [f64], at: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    assert_eq!(c.len(), m * n);
    assert_eq!(at.len(), k * m);
    assert_eq!(b.len(), k * n);
    let block = row_block(m);
    par::chunks_mut_indexed(c, block * n, |bi, cchunk| {
        let r0 = bi * block;
        let rows = cchunk.len() / n;
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                at.as_ptr().add(r0),
                1,
                m as isize,
                b.as_ptr(),
                n as isize,
                1,
                1.0,
                cchunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

//! Dense rank-2 tensors (row-major f64) and the raw kernels behind the
//! autodiff ops. Everything in this crate is batch-major: `[rows, cols]`
//! with one sample per row.
//!
//! Kernels treat shape mismatches as programmer error and panic via
//! `assert!`; the public layer APIs validate shapes and return `Result`
//! before reaching this level.

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Tensor {
        Tensor { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(data.len(), rows * cols, "element count must equal product of shape");
        Tensor { rows, cols, data }
    }

    pub fn row(values: &[f64]) -> Tensor {
        Tensor::from_vec(1, values.len(), values.to_vec())
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(1, 1, vec![v])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
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

    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// `self + scale * other`, in place. Shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }
}

/// `a [m,k] * b [k,n] -> [m,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b.data[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a [m,n] * b^T` where `b` is `[k,n]` -> `[m,k]`. Row-dot-row, so both
/// operands stream contiguously.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dimension mismatch");
    let (m, n, k) = (a.rows, a.cols, b.rows);
    let mut out = Tensor::zeros(m, k);
    for i in 0..m {
        let arow = &a.data[i * n..(i + 1) * n];
        let orow = &mut out.data[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b.data[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o = acc;
        }
    }
    out
}

/// `a^T * b` where `a` is `[m,k]`, `b` is `[m,n]` -> `[k,n]`. Accumulates
/// rank-1 updates row by row (the weight-gradient kernel).
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_tn inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(k, n);
    for l in 0..m {
        let arow = &a.data[l * k..(l + 1) * k];
        let brow = &b.data[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Row-broadcast add: `a [m,n] + b [1,n]` (or `b [m,n]` elementwise).
pub fn add_row(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "add_row column mismatch");
    assert!(b.rows == 1 || b.rows == a.rows, "add_row row mismatch");
    let mut out = a.clone();
    if b.rows == 1 {
        for r in 0..a.rows {
            let orow = &mut out.data[r * a.cols..(r + 1) * a.cols];
            for (o, &bv) in orow.iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
    } else {
        for (o, &bv) in out.data.iter_mut().zip(&b.data) {
            *o += bv;
        }
    }
    out
}

/// Concatenate along columns.
pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let rows = parts[0].rows;
    assert!(parts.iter().all(|p| p.rows == rows), "concat_cols row mismatch");
    let cols: usize = parts.iter().map(|p| p.cols).sum();
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let orow = &mut out.data[r * cols..(r + 1) * cols];
        let mut off = 0;
        for p in parts {
            orow[off..off + p.cols].copy_from_slice(p.row_slice(r));
            off += p.cols;
        }
    }
    out
}

/// Columns `[from, to)` of `a`.
pub fn slice_cols(a: &Tensor, from: usize, to: usize) -> Tensor {
    assert!(from <= to && to <= a.cols, "slice_cols out of range");
    let w = to - from;
    let mut out = Tensor::zeros(a.rows, w);
    for r in 0..a.rows {
        out.data[r * w..(r + 1) * w].copy_from_slice(&a.row_slice(r)[from..to]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::from_vec(3, 2, vec![7., 8., 9., 10., 11., 12.]);
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn transposed_variants_agree_with_plain() {
        let a = Tensor::from_vec(2, 3, vec![1., -2., 3., 0.5, 5., -6.]);
        let b = Tensor::from_vec(4, 3, vec![7., 8., 9., 1., -1., 2., 0., 3., -2., 4., 4., 4.]);
        // a * b^T via explicit transpose.
        let mut bt = Tensor::zeros(3, 4);
        for i in 0..4 {
            for j in 0..3 {
                bt.set(j, i, b.at(i, j));
            }
        }
        assert_eq!(matmul_nt(&a, &b).data(), matmul(&a, &bt).data());

        let c = Tensor::from_vec(2, 4, vec![1., 0., 2., -1., 3., 1., 0., 2.]);
        let mut at = Tensor::zeros(3, 2);
        for i in 0..2 {
            for j in 0..3 {
                at.set(j, i, a.at(i, j));
            }
        }
        let lhs = matmul_tn(&a, &c);
        let rhs = matmul(&at, &c);
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_slice_roundtrip() {
        let a = Tensor::from_vec(2, 2, vec![1., 2., 3., 4.]);
        let b = Tensor::from_vec(2, 1, vec![5., 6.]);
        let c = concat_cols(&[&a, &b]);
        assert_eq!(c.shape(), [2, 3]);
        assert_eq!(slice_cols(&c, 0, 2).data(), a.data());
        assert_eq!(slice_cols(&c, 2, 3).data(), b.data());
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{DwfError, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DwfError::Shape(format!(
                "{} values cannot fill a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(DwfError::Shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
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
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// New matrix made of the given rows, in order.
    pub fn gather_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// Every kernel below accumulates each output entry as
// ((0 + a_0 b_0) + a_1 b_1) + ... over the inner index in ascending order.
// Terms with a zero left factor are skipped, which leaves finite sums unchanged.
// Parallel and sequential paths share the row kernels and are bit-identical.

#[inline]
fn row_times_matrix(a_row: &[f64], b: &DenseMatrix, out: &mut [f64]) {
    for (k, &aik) in a_row.iter().enumerate() {
        if aik == 0.0 {
            continue;
        }
        let b_row = b.row(k);
        for (o, &bkj) in out.iter_mut().zip(b_row) {
            *o += aik * bkj;
        }
    }
}

/// Accumulates rows `lo..lo + out.len() / b.cols` of `aᵀ · b` into `out`,
/// visiting the shared index `k` in ascending order.
#[inline]
fn transposed_rows_times_matrix(a: &DenseMatrix, lo: usize, b: &DenseMatrix, out: &mut [f64]) {
    let n = b.cols;
    let hi = lo + out.len() / n;
    for k in 0..a.rows {
        let a_row = &a.row(k)[lo..hi];
        let b_row = b.row(k);
        for (i, &aki) in a_row.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            for (o, &bkj) in out[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                *o += aki * bkj;
            }
        }
    }
}

fn check_inner(a_inner: usize, b_inner: usize, what: &str) -> Result<()> {
    if a_inner != b_inner {
        return Err(DwfError::Shape(format!(
            "{what}: inner dimensions {a_inner} and {b_inner} differ"
        )));
    }
    Ok(())
}

#[cfg(feature = "parallel")]
const PARALLEL_MIN_WORK: usize = 1 << 16;

/// Matrix product `a · b` on the calling thread.
pub fn matmul_seq(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    check_inner(a.cols, b.rows, "matmul")?;
    let mut c = DenseMatrix::zeros(a.rows, b.cols);
    if b.cols == 0 {
        return Ok(c);
    }
    for (i, out) in c.data.chunks_mut(b.cols).enumerate() {
        row_times_matrix(a.row(i), b, out);
    }
    Ok(c)
}

/// Matrix product `a · b` with output rows distributed over the rayon pool.
#[cfg(feature = "parallel")]
pub fn matmul_par(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    use rayon::prelude::*;
    check_inner(a.cols, b.rows, "matmul")?;
    let mut c = DenseMatrix::zeros(a.rows, b.cols);
    if b.cols == 0 {
        return Ok(c);
    }
    c.data
        .par_chunks_mut(b.cols)
        .enumerate()
        .for_each(|(i, out)| row_times_matrix(a.row(i), b, out));
    Ok(c)
}

/// Matrix product `a · b`. Uses the parallel kernel for large products when
/// the `parallel` feature is enabled; results are identical either way.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    #[cfg(feature = "parallel")]
    if a.rows * a.cols * b.cols >= PARALLEL_MIN_WORK && rayon::current_num_threads() > 1 {
        return matmul_par(a, b);
    }
    matmul_seq(a, b)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn_seq(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    check_inner(a.rows, b.rows, "matmul_tn")?;
    let mut c = DenseMatrix::zeros(a.cols, b.cols);
    if b.cols == 0 {
        return Ok(c);
    }
    transposed_rows_times_matrix(a, 0, b, &mut c.data);
    Ok(c)
}

#[cfg(feature = "parallel")]
pub fn matmul_tn_par(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    use rayon::prelude::*;
    check_inner(a.rows, b.rows, "matmul_tn")?;
    let mut c = DenseMatrix::zeros(a.cols, b.cols);
    if b.cols == 0 {
        return Ok(c);
    }
    let block = a.cols.div_ceil(rayon::current_num_threads() * 4).max(1);
    c.data
        .par_chunks_mut(block * b.cols)
        .enumerate()
        .for_each(|(t, out)| transposed_rows_times_matrix(a, t * block, b, out));
    Ok(c)
}

pub fn matmul_tn(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    #[cfg(feature = "parallel")]
    if a.rows * a.cols * b.cols >= PARALLEL_MIN_WORK && rayon::current_num_threads() > 1 {
        return matmul_tn_par(a, b);
    }
    matmul_tn_seq(a, b)
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    check_inner(a.cols, b.cols, "matmul_nt")?;
    matmul(a, &b.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::SeededRng;

    fn naive(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
        let mut c = DenseMatrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                c.set(i, j, s);
            }
        }
        c
    }

    fn random(rng: &mut SeededRng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_vec(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn identity_is_neutral() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&DenseMatrix::identity(2), &a).unwrap(), a);
    }

    #[test]
    fn small_product() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = SeededRng::new(7);
        let a = random(&mut rng, 5, 7);
        let b = random(&mut rng, 7, 3);
        let c = matmul(&a, &b).unwrap();
        let r = naive(&a, &b);
        for (x, y) in c.as_slice().iter().zip(r.as_slice()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn transposed_variants_match_explicit_transpose() {
        let mut rng = SeededRng::new(8);
        let a = random(&mut rng, 6, 4);
        let b = random(&mut rng, 6, 5);
        assert_eq!(
            matmul_tn(&a, &b).unwrap(),
            matmul(&a.transpose(), &b).unwrap()
        );
        let c = random(&mut rng, 5, 4);
        assert_eq!(
            matmul_nt(&a, &c).unwrap(),
            matmul(&a, &c.transpose()).unwrap()
        );
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = DenseMatrix::zeros(2, 3);
        let b = DenseMatrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(DwfError::Shape(_))));
        assert!(DenseMatrix::from_vec(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn product_is_associative() {
        let mut rng = SeededRng::new(5);
        let a = random(&mut rng, 7, 9);
        let b = random(&mut rng, 9, 4);
        let c = random(&mut rng, 4, 6);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        for (x, y) in left.as_slice().iter().zip(right.as_slice()) {
            assert!((x - y).abs() <= 1e-10);
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_kernels_are_bit_identical() {
        let mut rng = SeededRng::new(9);
        let mut a = random(&mut rng, 64, 80);
        for v in a.as_mut_slice().iter_mut().step_by(3) {
            *v = 0.0;
        }
        let b = random(&mut rng, 80, 33);
        assert_eq!(matmul_seq(&a, &b).unwrap(), matmul_par(&a, &b).unwrap());
        let c = random(&mut rng, 64, 17);
        assert_eq!(matmul_tn_seq(&a, &c).unwrap(), matmul_tn_par(&a, &c).unwrap());
    }
}

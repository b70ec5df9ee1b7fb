//! Dense row-major tensors of 64-bit floats, rank 1 to 3.

use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};

/// A dense real-valued tensor with shape metadata and an optional gradient
/// buffer. Rows always mean slices along the last dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::Dimension(format!(
                "rank {} unsupported (rank 1-3 only)",
                shape.len()
            )));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {expect} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn filled(shape: &[usize], v: f64) -> Result<Self> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![v; n])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
        }
    }

    /// Build a rank-2 tensor from row vectors. All rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Dimension("no rows".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(&[rows.len(), cols], data)
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, g: Vec<f64>) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "gradient length {} does not match tensor length {}",
                g.len(),
                self.data.len()
            )));
        }
        self.grad = Some(g);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Number of last-dimension rows.
    pub fn rows(&self) -> usize {
        self.shape[..self.shape.len() - 1].iter().product()
    }

    /// Length of a last-dimension row.
    pub fn row_len(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.rank(), "index rank mismatch");
        let mut flat = 0;
        for (d, &i) in idx.iter().enumerate() {
            assert!(i < self.shape[d], "index {i} out of bounds in dim {d}");
            flat = flat * self.shape[d] + i;
        }
        self.data[flat]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// First non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<f64> {
        self.data.iter().copied().find(|v| !v.is_finite())
    }

    pub(crate) fn view2(&self) -> Result<ArrayView2<'_, f64>> {
        if self.rank() != 2 {
            return Err(Error::Dimension(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            )));
        }
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.data)
            .map_err(|e| Error::Dimension(e.to_string()))
    }
}

pub(crate) fn view2_of(data: &[f64], r: usize, c: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((r, c), data).expect("consistent view shape")
}

pub(crate) fn view2_mut_of(data: &mut [f64], r: usize, c: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((r, c), data).expect("consistent view shape")
}

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let av = a.view2()?;
    let bv = b.view2()?;
    if av.ncols() != bv.nrows() {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, n) = (av.nrows(), bv.ncols());
    let mut out = vec![0.0; m * n];
    ndarray::linalg::general_mat_mul(1.0, &av, &bv, 0.0, &mut view2_mut_of(&mut out, m, n));
    Tensor::new(&[m, n], out)
}

fn normalize_rows_by(
    a: &Tensor,
    eps: f64,
    row_measure: impl Fn(&[f64]) -> f64,
) -> Result<(Tensor, Vec<bool>)> {
    if eps <= 0.0 {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    let w = a.row_len();
    let mut out = a.data().to_vec();
    let mut degenerate = vec![false; a.rows()];
    for (i, flag) in degenerate.iter_mut().enumerate() {
        let row = &mut out[i * w..(i + 1) * w];
        let m = row_measure(row);
        if m < eps {
            *flag = true;
        } else {
            for v in row.iter_mut() {
                *v /= m;
            }
        }
    }
    Ok((Tensor::new(a.shape(), out)?, degenerate))
}

/// Divide each last-dimension row by the sum of absolute values of its
/// entries. Rows whose absolute sum falls below `eps` are returned unchanged
/// and flagged in the second return value.
pub fn l1_normalize_rows(a: &Tensor, eps: f64) -> Result<(Tensor, Vec<bool>)> {
    normalize_rows_by(a, eps, |row| row.iter().map(|v| v.abs()).sum())
}

/// Scale each last-dimension row to unit Euclidean norm. Rows with norm below
/// `eps` are returned unchanged and flagged.
pub fn l2_normalize_rows(a: &Tensor, eps: f64) -> Result<(Tensor, Vec<bool>)> {
    normalize_rows_by(a, eps, |row| {
        row.iter().map(|v| v * v).sum::<f64>().sqrt()
    })
}

/// Default threshold below which a row is treated as degenerate by the
/// normalizers.
pub const NORM_EPS: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn shape_must_match_data_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(&[1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let c = matmul(&eye, &b).unwrap();
        assert_eq!(c, b);
    }

    #[test]
    fn matmul_zero() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![0.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[2, 3]).unwrap();
        match matmul(&a, &b) {
            Err(Error::Dimension(_)) => {}
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    /// Independent oracle: triple-loop product in plain arithmetic.
    fn matmul_naive(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a.data()[i * k + l] * b.data()[l * n + j];
                }
                out[i * n + j] = s;
            }
        }
        Tensor::new(&[m, n], out).unwrap()
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::new(&[4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::new(&[3, 2], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let got = matmul(&a, &b).unwrap();
        let want = matmul_naive(&a, &b);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn l1_normalize_symmetric_row() {
        let a = Tensor::from_rows(&[vec![2.0, 2.0]]).unwrap();
        let (y, flags) = l1_normalize_rows(&a, NORM_EPS).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        assert_eq!(flags, vec![false]);
    }

    #[test]
    fn l1_normalize_uses_absolute_values() {
        let a = Tensor::from_rows(&[vec![0.2, -0.2]]).unwrap();
        let (y, _) = l1_normalize_rows(&a, NORM_EPS).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-15);
        assert!((y.data()[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn l1_normalize_flags_zero_row() {
        let a = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 3.0]]).unwrap();
        let (y, flags) = l1_normalize_rows(&a, 1e-12).unwrap();
        assert_eq!(&y.data()[..2], &[0.0, 0.0]);
        assert_eq!(flags, vec![true, false]);
        assert!((y.data()[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_345_triangle() {
        let a = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let (y, flags) = l2_normalize_rows(&a, NORM_EPS).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15);
        assert!((y.data()[1] - 0.8).abs() < 1e-15);
        assert!(!flags[0]);
    }

    #[test]
    fn l2_normalize_zero_row_flagged() {
        let a = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let (y, flags) = l2_normalize_rows(&a, NORM_EPS).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
        assert!(flags[0]);
    }

    #[test]
    fn l2_normalize_unit_row_unchanged() {
        let inv = 1.0 / 2.0f64.sqrt();
        let a = Tensor::from_rows(&[vec![inv, inv]]).unwrap();
        let (y, _) = l2_normalize_rows(&a, NORM_EPS).unwrap();
        assert!((y.data()[0] - inv).abs() < 1e-15);
        assert!((y.data()[1] - inv).abs() < 1e-15);
    }

    #[test]
    fn eps_must_be_positive() {
        let a = Tensor::zeros(&[1, 2]).unwrap();
        assert!(matches!(
            l1_normalize_rows(&a, 0.0),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            l2_normalize_rows(&a, -1.0),
            Err(Error::Parameter(_))
        ));
    }
}

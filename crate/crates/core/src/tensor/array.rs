use crate::error::{Error, Result};

/// Dense row-major array of 64-bit floats.
///
/// Most arrays handled by the encoder are matrices (`[rows, cols]`); bias
/// vectors are `[cols]` and scalars are `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Array {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension for matrices, 1 for vectors.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[..self.shape.len() - 1].iter().product()
        } else {
            1
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Array) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn max_abs_diff(&self, other: &Array) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Boolean matrix; `true` marks a visible (query, key) entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, fill: bool) -> Self {
        Mask {
            rows,
            cols,
            data: vec![fill; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mask { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged mask rows".into()));
        }
        Ok(Mask {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn all(&self) -> bool {
        self.data.iter().all(|&b| b)
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Row-wise softmax restricted to the visible entries of `mask`.
///
/// Masked entries come out as exact zeros, which is what lets hidden tokens
/// make no contribution at all to downstream sums.
pub fn masked_softmax(scores: &Array, mask: &Mask) -> Result<Array> {
    let (rows, cols) = (scores.rows(), scores.cols());
    if mask.rows() != rows || mask.cols() != cols {
        return Err(Error::Shape(format!(
            "scores {rows}x{cols} vs mask {}x{}",
            mask.rows(),
            mask.cols()
        )));
    }
    let mut out = Array::zeros(scores.shape());
    for r in 0..rows {
        let visible = mask.row(r);
        let s = scores.row(r);
        let max = s
            .iter()
            .zip(visible)
            .filter(|(_, &v)| v)
            .map(|(&x, _)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::EmptyMaskRow { row: r });
        }
        let o = out.row_mut(r);
        let mut total = 0.0;
        for c in 0..cols {
            if visible[c] {
                let e = (s[c] - max).exp();
                o[c] = e;
                total += e;
            }
        }
        for v in o.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Floor applied to the gold-class probability before taking the log.
pub const CE_FLOOR: f64 = 1e-12;

/// `-ln p[gold]` with the probability clamped at [`CE_FLOOR`].
pub fn cross_entropy(dist: &[f64], gold: usize) -> f64 {
    -dist[gold].max(CE_FLOOR).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Array {
        Array::matrix(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_symmetric() {
        let p = masked_softmax(&row(&[0.0, 0.0]), &Mask::new(1, 2, true)).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_masked_middle() {
        let mask = Mask::from_rows(&[vec![true, false, true]]).unwrap();
        let p = masked_softmax(&row(&[5.0, 3.0, 1.0]), &mask).unwrap();
        // e^5/(e^5+e^1) and e^1/(e^5+e^1)
        let z = 5f64.exp() + 1f64.exp();
        assert!((p.data()[0] - 5f64.exp() / z).abs() < 1e-12);
        assert!((p.data()[0] - 0.982014).abs() < 1e-6);
        assert_eq!(p.data()[1], 0.0);
        assert!((p.data()[2] - 0.017986).abs() < 1e-6);
    }

    #[test]
    fn softmax_single_visible() {
        let mask = Mask::from_rows(&[vec![true, false]]).unwrap();
        let p = masked_softmax(&row(&[9.0, -9.0]), &mask).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_empty_row() {
        let mask = Mask::from_rows(&[vec![true, true], vec![false, false]]).unwrap();
        let err = masked_softmax(&Array::zeros(&[2, 2]), &mask).unwrap_err();
        assert!(matches!(err, Error::EmptyMaskRow { row: 1 }));
    }

    #[test]
    fn cross_entropy_values() {
        assert_eq!(cross_entropy(&[1.0, 0.0, 0.0], 0), 0.0);
        assert!((cross_entropy(&[0.25; 4], 2) - 4f64.ln()).abs() < 1e-12);
        assert!((cross_entropy(&[0.9, 0.1], 1) - std::f64::consts::LN_10).abs() < 1e-6);
        assert!((cross_entropy(&[1.0, 0.0], 1) + CE_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn array_shape_checked() {
        assert!(Array::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Array::zeros(&[2, 3]).rows(), 2);
    }
}

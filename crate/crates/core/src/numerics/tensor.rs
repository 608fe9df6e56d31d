use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Exec;

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    /// Stack equally long rows. An empty slice gives a 0x0 tensor.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor2 {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on 0; a zero-width tensor still has `rows` empty rows
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gather the given rows into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor2 {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor2 {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Concatenate along rows.
    pub fn vstack(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot stack {} columns onto {}",
                other.cols, self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Tensor2 {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self · rhs + bias` (bias broadcast over rows). Rows are independent,
    /// so the parallel path produces bit-identical output.
    pub fn affine(&self, rhs: &Tensor2, bias: &[f64], exec: Exec) -> Result<Tensor2> {
        if self.cols != rhs.rows || bias.len() != rhs.cols {
            return Err(Error::Shape(format!(
                "affine {}x{} · {}x{} + [{}]",
                self.rows,
                self.cols,
                rhs.rows,
                rhs.cols,
                bias.len()
            )));
        }
        let (inner, out_cols) = (self.cols, rhs.cols);
        let mut out = Tensor2::zeros(self.rows, out_cols);
        if out_cols == 0 {
            return Ok(out);
        }
        const BLOCK: usize = 32;
        exec.for_each_chunk_mut(&mut out.data, BLOCK * out_cols, |bi, block| {
            for (j, orow) in block.chunks_exact_mut(out_cols).enumerate() {
                let r = bi * BLOCK + j;
                orow.copy_from_slice(bias);
                let xrow = &self.data[r * inner..(r + 1) * inner];
                for (k, &x) in xrow.iter().enumerate() {
                    if x == 0.0 {
                        continue;
                    }
                    let wrow = &rhs.data[k * out_cols..(k + 1) * out_cols];
                    for (o, &w) in orow.iter_mut().zip(wrow) {
                        *o += x * w;
                    }
                }
            }
        });
        Ok(out)
    }

    /// `selfᵀ · rhs`, accumulated row by row in index order.
    pub fn t_matmul(&self, rhs: &Tensor2) -> Result<Tensor2> {
        if self.rows != rhs.rows {
            return Err(Error::Shape(format!(
                "transpose product {}x{}ᵀ · {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Tensor2::zeros(self.cols, rhs.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let b = rhs.row(r);
            for (k, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let orow = out.row_mut(k);
                for (o, &bv) in orow.iter_mut().zip(b) {
                    *o += av * bv;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ`.
    pub fn matmul_t(&self, rhs: &Tensor2) -> Result<Tensor2> {
        if self.cols != rhs.cols {
            return Err(Error::Shape(format!(
                "product {}x{} · {}x{}ᵀ",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Tensor2::zeros(self.rows, rhs.rows);
        for r in 0..self.rows {
            let a = self.row(r);
            for k in 0..rhs.rows {
                let b = rhs.row(k);
                out.data[r * rhs.rows + k] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        Ok(out)
    }

    /// Column sums, accumulated in row order.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (acc, v) in s.iter_mut().zip(row) {
                *acc += v;
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor2 {
        Tensor2::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn affine_matches_hand_product() {
        let x = t(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let w = t(2, 3, &[1.0, 0.0, -1.0, 0.5, 1.0, 2.0]);
        let y = x.affine(&w, &[0.1, 0.2, 0.3], Exec::Sequential).unwrap();
        assert_eq!(y.data(), &[2.1, 2.2, 3.3, 5.1, 4.2, 5.3]);
    }

    #[test]
    fn affine_parallel_is_bit_identical() {
        let n = 517;
        let x = Tensor2::from_vec(n, 7, (0..n * 7).map(|i| (i as f64 * 0.37).sin()).collect())
            .unwrap();
        let w = Tensor2::from_vec(7, 5, (0..35).map(|i| (i as f64 * 1.3).cos()).collect()).unwrap();
        let b = [0.1, -0.2, 0.3, 0.0, 1.0];
        let a = x.affine(&w, &b, Exec::Sequential).unwrap();
        let p = x.affine(&w, &b, Exec::Parallel).unwrap();
        assert_eq!(a, p);
    }

    #[test]
    fn transposed_products() {
        let x = t(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let d = t(2, 1, &[1.0, -1.0]);
        assert_eq!(x.t_matmul(&d).unwrap().data(), &[-2.0, -2.0]);
        let w = t(1, 2, &[1.0, 1.0]);
        assert_eq!(x.matmul_t(&w).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn shape_errors() {
        assert!(Tensor2::from_vec(2, 2, vec![0.0; 3]).is_err());
        let x = Tensor2::zeros(2, 3);
        assert!(x.affine(&Tensor2::zeros(2, 2), &[0.0, 0.0], Exec::Sequential).is_err());
        assert!(Tensor2::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}

//! Reconstruction and output error metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconError {
    /// Mean of `(W - Ŵ)^2`.
    pub mse: f64,
    /// `‖W - Ŵ‖_F / ‖W‖_F`, or the absolute norm when `W = 0`.
    pub frobenius_rel: f64,
    /// Sum of squared errors.
    pub sse: f64,
}

fn same_shape(w: &Matrix, w_hat: &Matrix) -> Result<()> {
    if w.shape() != w_hat.shape() {
        return Err(Error::Shape(format!(
            "weights {:?} and reconstruction {:?} differ in shape",
            w.shape(),
            w_hat.shape()
        )));
    }
    Ok(())
}

pub fn recon_error(w: &Matrix, w_hat: &Matrix) -> Result<ReconError> {
    same_shape(w, w_hat)?;
    let (mut sse, mut norm) = (0.0f64, 0.0f64);
    for (&a, &b) in w.as_slice().iter().zip(w_hat.as_slice()) {
        let d = a as f64 - b as f64;
        sse += d * d;
        norm += a as f64 * a as f64;
    }
    let n = w.as_slice().len().max(1) as f64;
    let frobenius_rel = if norm > 0.0 { (sse / norm).sqrt() } else { sse.sqrt() };
    Ok(ReconError {
        mse: sse / n,
        frobenius_rel,
        sse,
    })
}

/// Squared Frobenius norms of `X (W - Ŵ)` and `X W`.
pub fn output_error_parts(w: &Matrix, w_hat: &Matrix, x: &Matrix) -> Result<(f64, f64)> {
    same_shape(w, w_hat)?;
    if x.cols() != w.rows() {
        return Err(Error::Shape(format!(
            "validation inputs have width {}, weights have {} input channels",
            x.cols(),
            w.rows()
        )));
    }
    let d_out = w.cols();
    let diff: Vec<f64> = w
        .as_slice()
        .iter()
        .zip(w_hat.as_slice())
        .map(|(&a, &b)| a as f64 - b as f64)
        .collect();
    let (mut num, mut den) = (0.0f64, 0.0f64);
    let mut e = vec![0.0f64; d_out];
    let mut y = vec![0.0f64; d_out];
    for xr in x.iter_rows() {
        e.fill(0.0);
        y.fill(0.0);
        for (i, &xi) in xr.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let xi = xi as f64;
            let dr = &diff[i * d_out..(i + 1) * d_out];
            for ((ej, yj), (&d, &wv)) in e.iter_mut().zip(y.iter_mut()).zip(dr.iter().zip(w.row(i))) {
                *ej += xi * d;
                *yj += xi * wv as f64;
            }
        }
        num += e.iter().map(|v| v * v).sum::<f64>();
        den += y.iter().map(|v| v * v).sum::<f64>();
    }
    Ok((num, den))
}

/// `‖X (W - Ŵ)‖_F / ‖X W‖_F`; the absolute norm when the denominator is 0.
pub fn output_error(w: &Matrix, w_hat: &Matrix, x: &Matrix) -> Result<f64> {
    let (num, den) = output_error_parts(w, w_hat, x)?;
    Ok(if den > 0.0 { (num / den).sqrt() } else { num.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(r: usize, c: usize, v: &[f32]) -> Matrix {
        Matrix::from_vec(r, c, v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_reconstruction() {
        let w = m(2, 2, &[1.0, -2.0, 3.0, 0.5]);
        let e = recon_error(&w, &w).unwrap();
        assert_eq!((e.mse, e.frobenius_rel), (0.0, 0.0));
        assert_eq!(output_error(&w, &w, &m(1, 2, &[1.0, 1.0])).unwrap(), 0.0);
    }

    #[test]
    fn zero_reconstruction_is_fully_wrong() {
        let w = m(2, 2, &[1.0, -2.0, 3.0, 0.5]);
        assert_eq!(recon_error(&w, &Matrix::zeros(2, 2)).unwrap().frobenius_rel, 1.0);
    }

    #[test]
    fn single_wrong_entry() {
        let w = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let w_hat = m(2, 2, &[1.0, 2.5, 3.0, 4.0]);
        assert_eq!(recon_error(&w, &w_hat).unwrap().mse, 0.25 / 4.0);
    }

    #[test]
    fn identity_inputs_give_frobenius_rel() {
        let w = m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w_hat = m(2, 3, &[1.0, 2.5, 3.0, 3.0, 5.0, 6.0]);
        let x = m(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let a = output_error(&w, &w_hat, &x).unwrap();
        let b = recon_error(&w, &w_hat).unwrap().frobenius_rel;
        assert!((a - b).abs() <= 1e-15, "{a} vs {b}");
    }

    #[test]
    fn matches_dense_computation() {
        let w = m(3, 2, &[0.5, -1.0, 2.0, 0.25, -0.75, 1.5]);
        let w_hat = m(3, 2, &[0.5, -0.5, 2.0, 0.0, -1.0, 1.5]);
        let x = m(2, 3, &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]);
        let xd = x
            .matmul_f64(&m(3, 2, &[0.0, -0.5, 0.0, 0.25, 0.25, 0.0]))
            .unwrap();
        let xw = x.matmul_f64(&w).unwrap();
        let want = (xd.iter().map(|v| v * v).sum::<f64>() / xw.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let got = output_error(&w, &w_hat, &x).unwrap();
        assert!((got - want).abs() <= 1e-15 * want, "{got} vs {want}");
    }

    #[test]
    fn zero_denominator_falls_back_to_absolute() {
        let w = Matrix::zeros(2, 1);
        let w_hat = m(2, 1, &[3.0, 4.0]);
        let x = m(1, 2, &[1.0, 0.0]);
        assert_eq!(output_error(&w, &w_hat, &x).unwrap(), 3.0);
        assert_eq!(recon_error(&w, &w_hat).unwrap().frobenius_rel, 5.0);
    }

    #[test]
    fn shape_mismatch() {
        let w = Matrix::zeros(2, 2);
        assert!(matches!(recon_error(&w, &Matrix::zeros(2, 3)), Err(Error::Shape(_))));
        assert!(matches!(output_error(&w, &w, &Matrix::zeros(1, 3)), Err(Error::Shape(_))));
    }
}

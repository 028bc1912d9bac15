//! Reference forecasters: last-value repetition and per-variable ridge AR.

use nalgebra::{DMatrix, DVector};

use crate::data::Windows;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Repeats the last observed row for every task: `[N, l, n]` on raw scale.
pub fn naive_baseline(windows: &Windows) -> Tensor {
    let (l, n) = (windows.tasks(), windows.n());
    let idx: Vec<usize> = (0..windows.len()).collect();
    let x = windows.inputs_raw(&idx);
    let p = x.shape()[1];
    let mut out = Vec::with_capacity(idx.len() * l * n);
    for i in idx {
        let last = &x.data()[(i * p + p - 1) * n..(i * p + p) * n];
        for _ in 0..l {
            out.extend_from_slice(last);
        }
    }
    Tensor::new([windows.len(), l, n], out).expect("naive shape")
}

/// Per-variable linear AR fitted by ridge regression, predicting `h` steps
/// ahead directly from the `q` most recent values.
#[derive(Debug, Clone, PartialEq)]
pub struct ArBaseline {
    pub order: usize,
    pub lambda: f64,
    pub horizon: usize,
    /// `coefs[i][j]` weighs lag `j` (0 = most recent) of variable `i`.
    pub coefs: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
}

impl ArBaseline {
    /// Fits on the raw `[T, n]` train rows. The intercept is not penalised.
    pub fn fit(train: &Tensor, order: usize, lambda: f64, horizon: usize) -> Result<Self> {
        if train.ndim() != 2 {
            return Err(Error::Data(format!("AR baseline expects [T, n], got {:?}", train.shape())));
        }
        if order == 0 || horizon == 0 || !(lambda >= 0.0) {
            return Err(Error::Config(format!(
                "AR baseline needs order ≥ 1, horizon ≥ 1 and λ ≥ 0, got {order}, {horizon}, {lambda}"
            )));
        }
        let (t, n) = (train.shape()[0], train.shape()[1]);
        if t < order + horizon {
            return Err(Error::Data(format!(
                "train length {t} too short for order {order} at horizon {horizon}"
            )));
        }
        let rows = t + 1 - order - horizon;
        let mut coefs = Vec::with_capacity(n);
        let mut intercepts = Vec::with_capacity(n);
        for var in 0..n {
            let col = |r: usize| train.at(&[r, var]);
            // anchor a = order − 1 + r; lag j reads row a − j
            let x = DMatrix::from_fn(rows, order, |r, j| col(order - 1 + r - j));
            let y = DVector::from_fn(rows, |r, _| col(order - 1 + r + horizon));
            let x_mean = x.row_mean();
            let y_mean = y.mean();
            let mut xc = x.clone();
            for mut row in xc.row_iter_mut() {
                row -= &x_mean;
            }
            let yc = y.add_scalar(-y_mean);
            let a = xc.transpose() * &xc + DMatrix::identity(order, order) * lambda;
            let b = xc.transpose() * yc;
            let beta = a
                .cholesky()
                .map(|c| c.solve(&b))
                .ok_or_else(|| Error::Numerical(format!("singular ridge system for variable {var}")))?;
            if beta.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite AR coefficients for variable {var}")));
            }
            intercepts.push(y_mean - (x_mean * &beta)[0]);
            coefs.push(beta.iter().copied().collect());
        }
        Ok(ArBaseline {
            order,
            lambda,
            horizon,
            coefs,
            intercepts,
        })
    }

    /// Prediction from a `[p, n]` window with `p ≥ order`.
    pub fn predict_window(&self, x: &Tensor) -> Result<Vec<f64>> {
        let (p, n) = (x.shape()[0], x.shape()[1]);
        if x.ndim() != 2 || n != self.coefs.len() || p < self.order {
            return Err(Error::shape("ar baseline", x.shape(), &[self.order, self.coefs.len()]));
        }
        Ok((0..n)
            .map(|i| {
                self.intercepts[i]
                    + self.coefs[i]
                        .iter()
                        .enumerate()
                        .map(|(j, c)| c * x.at(&[p - 1 - j, i]))
                        .sum::<f64>()
            })
            .collect())
    }

    /// Main-task predictions `[N, n]` for every window, raw scale.
    pub fn predict(&self, windows: &Windows) -> Result<Tensor> {
        let n = windows.n();
        let mut out = Vec::with_capacity(windows.len() * n);
        for i in 0..windows.len() {
            let x = windows.inputs_raw(&[i]);
            let p = x.shape()[1];
            out.extend(self.predict_window(&x.reshape([p, n])?)?);
        }
        Tensor::new([windows.len(), n], out)
    }
}

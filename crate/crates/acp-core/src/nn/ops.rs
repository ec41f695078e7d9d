//! Differentiable building blocks: affine layers, activations, and losses.
//!
//! Forward functions return the values a backward pass needs; backward
//! functions map output gradients to input gradients and accumulate weight
//! gradients into the store.

use crate::error::{AcpError, Result};
use crate::nn::matrix::Matrix;
use crate::nn::store::ParamStore;

/// Probability clamp used inside logs to avoid -inf.
pub const EPS_PROB: f64 = 1e-12;

/// A named affine layer `y = x W + b` with weights held in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub w: String,
    pub b: String,
}

impl DenseLayer {
    /// Register a fresh layer: uniform weights, zero bias.
    pub fn init(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let w = format!("{prefix}.w");
        let b = format!("{prefix}.b");
        store.add_uniform(&w, fan_in, fan_out)?;
        store.add_zeros(&b, 1, fan_out)?;
        Ok(DenseLayer { w, b })
    }

    pub fn forward(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        x.matmul(store.value(&self.w))?
            .add_row_broadcast(store.value(&self.b))
    }

    /// Accumulates dW and db; returns dX.
    pub fn backward(&self, store: &mut ParamStore, x: &Matrix, dy: &Matrix) -> Result<Matrix> {
        let dw = x.matmul_tn(dy)?;
        store.accumulate_grad(&self.w, &dw)?;
        store.accumulate_grad(&self.b, &dy.col_sums())?;
        dy.matmul_nt(store.value(&self.w))
    }
}

pub fn relu(x: &Matrix) -> Result<Matrix> {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// dX given the pre-activation input.
pub fn relu_backward(x: &Matrix, dy: &Matrix) -> Result<Matrix> {
    if x.shape() != dy.shape() {
        return Err(AcpError::Shape {
            op: "relu_backward",
            detail: format!("{:?} vs {:?}", x.shape(), dy.shape()),
        });
    }
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&xv, &dv)| if xv > 0.0 { dv } else { 0.0 })
        .collect();
    Matrix::new(x.rows, x.cols, data)
}

pub fn sigmoid(x: &Matrix) -> Result<Matrix> {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// dX given the sigmoid output.
pub fn sigmoid_backward(y: &Matrix, dy: &Matrix) -> Result<Matrix> {
    if y.shape() != dy.shape() {
        return Err(AcpError::Shape {
            op: "sigmoid_backward",
            detail: format!("{:?} vs {:?}", y.shape(), dy.shape()),
        });
    }
    let data = y
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&yv, &dv)| dv * yv * (1.0 - yv))
        .collect();
    Matrix::new(y.rows, y.cols, data)
}

/// Row-wise softmax, numerically stabilized by the row maximum.
pub fn softmax_row(x: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let orow = out.row_mut(r);
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out.check_finite("softmax_row")?;
    Ok(out)
}

/// dX given the softmax output: per row, `y .* (dy - (dy . y))`.
pub fn softmax_row_backward(y: &Matrix, dy: &Matrix) -> Result<Matrix> {
    if y.shape() != dy.shape() {
        return Err(AcpError::Shape {
            op: "softmax_row_backward",
            detail: format!("{:?} vs {:?}", y.shape(), dy.shape()),
        });
    }
    let mut out = Matrix::zeros(y.rows, y.cols);
    for r in 0..y.rows {
        let yrow = y.row(r);
        let drow = dy.row(r);
        let dot: f64 = yrow.iter().zip(drow).map(|(a, b)| a * b).sum();
        for ((o, &yv), &dv) in out.row_mut(r).iter_mut().zip(yrow).zip(drow) {
            *o = yv * (dv - dot);
        }
    }
    Ok(out)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(EPS_PROB, 1.0 - EPS_PROB)
}

/// Mean-reduced binary cross-entropy over every entry.
pub fn bce(pred: &Matrix, target: &Matrix) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(AcpError::Shape {
            op: "bce",
            detail: format!("{:?} vs {:?}", pred.shape(), target.shape()),
        });
    }
    if target.data.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(AcpError::Contract("bce target outside [0, 1]".to_string()));
    }
    let mut acc = 0.0;
    for (&p, &t) in pred.data.iter().zip(&target.data) {
        let p = clamp_prob(p);
        acc -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    let loss = acc / pred.len() as f64;
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(AcpError::NonFinite("bce".to_string()))
    }
}

/// Gradient of [`bce`] with respect to the predictions.
pub fn bce_grad(pred: &Matrix, target: &Matrix) -> Result<Matrix> {
    if pred.shape() != target.shape() {
        return Err(AcpError::Shape {
            op: "bce_grad",
            detail: format!("{:?} vs {:?}", pred.shape(), target.shape()),
        });
    }
    let count = pred.len() as f64;
    let data = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&p, &t)| {
            let p = clamp_prob(p);
            (p - t) / (p * (1.0 - p)) / count
        })
        .collect();
    Matrix::new(pred.rows, pred.cols, data)
}

/// Mean-reduced softmax cross-entropy against one-hot rows; returns the loss
/// and the gradient with respect to the logits.
pub fn ce_softmax(logits: &Matrix, one_hot: &Matrix) -> Result<(f64, Matrix)> {
    if logits.shape() != one_hot.shape() {
        return Err(AcpError::Shape {
            op: "ce_softmax",
            detail: format!("{:?} vs {:?}", logits.shape(), one_hot.shape()),
        });
    }
    let probs = softmax_row(logits)?;
    let rows = logits.rows as f64;
    let mut loss = 0.0;
    for r in 0..logits.rows {
        for (p, t) in probs.row(r).iter().zip(one_hot.row(r)) {
            if *t > 0.0 {
                loss -= t * clamp_prob(*p).ln();
            }
        }
    }
    loss /= rows;
    let grad_data = probs
        .data
        .iter()
        .zip(&one_hot.data)
        .map(|(&p, &t)| (p - t) / rows)
        .collect();
    let grad = Matrix::new(logits.rows, logits.cols, grad_data)?;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_dense_passes_input_through() {
        let mut store = ParamStore::new(0);
        store
            .add_matrix("id.w", Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        store.add_zeros("id.b", 1, 2).unwrap();
        let layer = DenseLayer {
            w: "id.w".into(),
            b: "id.b".into(),
        };
        let x = Matrix::new(3, 2, vec![1.0, -2.0, 0.5, 4.0, -1.0, 0.0]).unwrap();
        assert_eq!(layer.forward(&store, &x).unwrap(), x);
    }

    #[test]
    fn zero_dense_outputs_zero() {
        let mut store = ParamStore::new(0);
        store.add_zeros("z.w", 3, 2).unwrap();
        store.add_zeros("z.b", 1, 2).unwrap();
        let layer = DenseLayer {
            w: "z.w".into(),
            b: "z.b".into(),
        };
        let x = Matrix::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(layer.forward(&store, &x).unwrap().data, vec![0.0, 0.0]);
    }

    #[test]
    fn activation_values() {
        let x = Matrix::new(1, 3, vec![-2.0, 0.0, 3.0]).unwrap();
        assert_eq!(relu(&x).unwrap().data, vec![0.0, 0.0, 3.0]);
        let s = sigmoid(&Matrix::new(1, 1, vec![0.0]).unwrap()).unwrap();
        assert_eq!(s.data[0], 0.5);
        let sm = softmax_row(&Matrix::new(1, 2, vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(sm.data, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Matrix::new(3, 4, (0..12).map(|v| (v as f64) * 1.7 - 5.0).collect()).unwrap();
        let y = softmax_row(&x).unwrap();
        for r in 0..3 {
            let sum: f64 = y.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_open_interval() {
        let x = Matrix::new(1, 3, vec![-800.0, 0.0, 800.0]).unwrap();
        let y = sigmoid(&x).unwrap();
        assert!(y.data.iter().all(|&v| v > 0.0 && v < 1.0 || v == 0.0 || v == 1.0));
        // extreme logits saturate to the boundary in f64; interior values stay open
        assert!(y.data[1] > 0.0 && y.data[1] < 1.0);
    }

    #[test]
    fn bce_closed_form() {
        let p = Matrix::new(1, 1, vec![0.5]).unwrap();
        let t = Matrix::new(1, 1, vec![0.5]).unwrap();
        let loss = bce(&p, &t).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_minimized_at_target() {
        let t = Matrix::new(1, 1, vec![0.3]).unwrap();
        let at = bce(&Matrix::new(1, 1, vec![0.3]).unwrap(), &t).unwrap();
        for dp in [-0.05, 0.05] {
            let p = Matrix::new(1, 1, vec![0.3 + dp]).unwrap();
            assert!(bce(&p, &t).unwrap() > at);
        }
    }

    #[test]
    fn bce_target_out_of_range_rejected() {
        let p = Matrix::new(1, 1, vec![0.5]).unwrap();
        let t = Matrix::new(1, 1, vec![1.5]).unwrap();
        assert!(bce(&p, &t).is_err());
    }

    #[test]
    fn bce_grad_matches_finite_difference() {
        let p = Matrix::new(1, 4, vec![0.2, 0.5, 0.7, 0.9]).unwrap();
        let t = Matrix::new(1, 4, vec![0.0, 1.0, 0.5, 1.0]).unwrap();
        let g = bce_grad(&p, &t).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let mut plus = p.clone();
            plus.data[i] += h;
            let mut minus = p.clone();
            minus.data[i] -= h;
            let num = (bce(&plus, &t).unwrap() - bce(&minus, &t).unwrap()) / (2.0 * h);
            assert!(
                (g.data[i] - num).abs() / num.abs().max(1.0) < 1e-6,
                "coord {i}: analytic {} vs numeric {num}",
                g.data[i]
            );
        }
    }

    #[test]
    fn ce_softmax_grad_matches_finite_difference() {
        let logits = Matrix::new(2, 3, vec![0.5, -1.0, 2.0, 0.0, 0.3, -0.7]).unwrap();
        let one_hot = Matrix::new(2, 3, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let (_, g) = ce_softmax(&logits, &one_hot).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let mut plus = logits.clone();
            plus.data[i] += h;
            let mut minus = logits.clone();
            minus.data[i] -= h;
            let num = (ce_softmax(&plus, &one_hot).unwrap().0
                - ce_softmax(&minus, &one_hot).unwrap().0)
                / (2.0 * h);
            assert!((g.data[i] - num).abs() < 1e-8);
        }
    }
}

//! Prior-space projection, teacher targets, and the training objectives.
//!
//! Projection maps an action-probability vector into the co-occurrence
//! consistent space. It serves three roles: a test-time post-process, and
//! two teacher targets (projected prediction, projected ground truth) whose
//! binary cross-entropy terms regularize training. Teachers are constants:
//! gradients flow only through the live prediction.

use serde::{Deserialize, Serialize};

use crate::error::{AcpError, Result};
use crate::model::{joint_hoi, ActionPrediction};
use crate::nn::{bce, bce_grad, Matrix};
use crate::priors::{PriorBank, PriorMatrices};

/// Weights for the co-occurrence and complement matrices in the projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Project with each object's own matrices instead of the global ones.
    pub use_per_object: bool,
}

impl ProjectionConfig {
    pub fn new(alpha: f64, beta: f64, use_per_object: bool) -> Result<Self> {
        if !(alpha.is_finite() && beta.is_finite()) || alpha < 0.0 || beta < 0.0 {
            return Err(AcpError::Config(format!(
                "projection weights must be non-negative, got alpha={alpha}, beta={beta}"
            )));
        }
        if (alpha + beta - 2.0).abs() > 1e-12 {
            return Err(AcpError::Config(format!(
                "projection weights must satisfy alpha + beta = 2, got {}",
                alpha + beta
            )));
        }
        if alpha < beta {
            return Err(AcpError::Config(format!(
                "projection weights must satisfy alpha >= beta, got alpha={alpha} < beta={beta}"
            )));
        }
        Ok(ProjectionConfig {
            alpha,
            beta,
            use_per_object,
        })
    }
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            alpha: 1.2,
            beta: 0.8,
            use_per_object: true,
        }
    }
}

/// Balancing weights of the training objective: `lambda1` scales the
/// ground-truth term, `lambda2` the projected-prediction teacher, `lambda3`
/// the projected-ground-truth teacher, and `lambda0` the word-embedding
/// loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossWeights {
    pub fn new(lambda0: f64, lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let w = LossWeights {
            lambda0,
            lambda1,
            lambda2,
            lambda3,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda0", self.lambda0),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(AcpError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.lambda1 <= 0.0 {
            return Err(AcpError::Config(
                "lambda1 must be positive: the ground-truth term cannot be disabled".to_string(),
            ));
        }
        Ok(())
    }

    /// Plain ground-truth objective only.
    pub fn ground_truth_only() -> Self {
        LossWeights {
            lambda0: 0.0,
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 0.0,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda0: 0.1,
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 0.5,
        }
    }
}

/// Project an action distribution into the prior-consistent space:
/// `A*(j) = (alpha * sum_i A(i) c_ij + beta * sum_i (1 - A(i)) c'_ij) / N`.
pub fn project(action_probs: &[f64], priors: &PriorMatrices, cfg: &ProjectionConfig) -> Result<Vec<f64>> {
    let n = priors.n_actions;
    if action_probs.len() != n {
        return Err(AcpError::Shape {
            op: "project",
            detail: format!("distribution length {} vs {n} actions", action_probs.len()),
        });
    }
    if action_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(AcpError::Contract(
            "projection input outside [0, 1]".to_string(),
        ));
    }
    let mut out = vec![0.0; n];
    for (j, slot) in out.iter_mut().enumerate() {
        let mut occur = 0.0;
        let mut absent = 0.0;
        for (i, &p) in action_probs.iter().enumerate() {
            occur += p * priors.cooc_at(i, j);
            absent += (1.0 - p) * priors.comp_at(i, j);
        }
        *slot = (cfg.alpha * occur + cfg.beta * absent) / n as f64;
    }
    Ok(out)
}

/// Teacher built from the live prediction: project the action probabilities
/// with the object's matrices, then recompose the joint interaction vector.
/// The result is used as a constant target.
pub fn teacher_from_prediction(
    action_probs: &[f64],
    det_human: f64,
    det_object: f64,
    object: usize,
    bank: &PriorBank,
    cfg: &ProjectionConfig,
) -> Result<Vec<f64>> {
    let priors = bank.select(cfg.use_per_object, object);
    let projected = project(action_probs, priors, cfg)?;
    let mut joint = joint_hoi(&projected, det_human, det_object, object, &bank.space);
    clamp_target(&mut joint);
    Ok(joint)
}

/// Teacher built from the ground-truth labels: the binary action vector is
/// projected and recomposed with unit human/object confidences.
pub fn teacher_from_groundtruth(
    gt_actions: &std::collections::BTreeSet<usize>,
    object: usize,
    bank: &PriorBank,
    cfg: &ProjectionConfig,
) -> Result<Vec<f64>> {
    let n = bank.space.n_actions();
    let mut gt = vec![0.0; n];
    for &a in gt_actions {
        gt[a] = 1.0;
    }
    let priors = bank.select(cfg.use_per_object, object);
    let projected = project(&gt, priors, cfg)?;
    let mut joint = joint_hoi(&projected, 1.0, 1.0, object, &bank.space);
    clamp_target(&mut joint);
    Ok(joint)
}

/// Projected targets can reach `alpha / N * N = alpha` only in degenerate
/// cases, but they are clamped into [0, 1] before entering the loss.
fn clamp_target(values: &mut [f64]) {
    for v in values.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Weighted sum of the three binary cross-entropy terms.
pub fn distill_loss(
    y_hat: &Matrix,
    y_gt: &Matrix,
    y_proj: &Matrix,
    y_gt_proj: &Matrix,
    w: &LossWeights,
) -> Result<f64> {
    w.validate()?;
    let mut loss = w.lambda1 * bce(y_hat, y_gt)?;
    if w.lambda2 > 0.0 {
        loss += w.lambda2 * bce(y_hat, y_proj)?;
    }
    if w.lambda3 > 0.0 {
        loss += w.lambda3 * bce(y_hat, y_gt_proj)?;
    }
    Ok(loss)
}

/// Gradient of [`distill_loss`] with respect to the prediction.
pub fn distill_loss_grad(
    y_hat: &Matrix,
    y_gt: &Matrix,
    y_proj: &Matrix,
    y_gt_proj: &Matrix,
    w: &LossWeights,
) -> Result<Matrix> {
    let mut grad = bce_grad(y_hat, y_gt)?.scale(w.lambda1)?;
    if w.lambda2 > 0.0 {
        grad = grad.add(&bce_grad(y_hat, y_proj)?.scale(w.lambda2)?)?;
    }
    if w.lambda3 > 0.0 {
        grad = grad.add(&bce_grad(y_hat, y_gt_proj)?.scale(w.lambda3)?)?;
    }
    Ok(grad)
}

/// Word-embedding regression loss for the true object class:
/// `-log sigmoid(o_embed . v)`, computed in softplus form for stability.
pub fn emb_loss(o_embed: &[f64], regressed: &[f64]) -> Result<f64> {
    if o_embed.len() != regressed.len() {
        return Err(AcpError::Shape {
            op: "emb_loss",
            detail: format!("{} vs {}", o_embed.len(), regressed.len()),
        });
    }
    let dot: f64 = o_embed.iter().zip(regressed).map(|(a, b)| a * b).sum();
    // -ln sigmoid(x) = softplus(-x)
    let loss = if dot > 0.0 {
        (-dot).exp().ln_1p()
    } else {
        -dot + dot.exp().ln_1p()
    };
    Ok(loss)
}

/// Gradient of [`emb_loss`] with respect to the regressed embedding.
pub fn emb_loss_grad(o_embed: &[f64], regressed: &[f64]) -> Result<Vec<f64>> {
    if o_embed.len() != regressed.len() {
        return Err(AcpError::Shape {
            op: "emb_loss_grad",
            detail: format!("{} vs {}", o_embed.len(), regressed.len()),
        });
    }
    let dot: f64 = o_embed.iter().zip(regressed).map(|(a, b)| a * b).sum();
    let sig = 1.0 / (1.0 + (-dot).exp());
    Ok(o_embed.iter().map(|&e| (sig - 1.0) * e).collect())
}

/// Total objective: distillation plus the weighted embedding loss.
pub fn total_loss(distill: f64, emb: f64, w: &LossWeights) -> f64 {
    distill + w.lambda0 * emb
}

/// Test-time projection of a prediction: the action probabilities move to
/// their projected values and the joint interaction vector is recomposed.
/// Model parameters are untouched.
pub fn post_process(
    pred: &ActionPrediction,
    det_human: f64,
    det_object: f64,
    object: usize,
    bank: &PriorBank,
    cfg: &ProjectionConfig,
) -> Result<(ActionPrediction, Vec<f64>)> {
    let priors = bank.select(cfg.use_per_object, object);
    let projected = project(&pred.action_probs, priors, cfg)?;
    let joint = joint_hoi(&projected, det_human, det_object, object, &bank.space);
    let mut out = pred.clone();
    out.action_probs = projected;
    Ok((out, joint))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::Scope;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn matrices(n: usize, cooc: Vec<f64>, comp: Vec<f64>) -> PriorMatrices {
        PriorMatrices {
            n_actions: n,
            scope: Scope::Global,
            cooc,
            comp,
        }
    }

    fn hand_case() -> PriorMatrices {
        matrices(
            2,
            vec![1.0, 0.5, 0.25, 1.0],
            vec![0.0, 0.1, 0.3, 0.0],
        )
    }

    fn unit_cfg() -> ProjectionConfig {
        ProjectionConfig::new(1.0, 1.0, false).unwrap()
    }

    /// Scalar transliteration of the projection formula, used as the
    /// independent oracle.
    fn project_oracle(a: &[f64], p: &PriorMatrices, alpha: f64, beta: f64) -> Vec<f64> {
        let n = p.n_actions;
        (0..n)
            .map(|j| {
                let mut occur = 0.0;
                let mut absent = 0.0;
                for i in 0..n {
                    occur += a[i] * p.cooc_at(i, j);
                    absent += (1.0 - a[i]) * p.comp_at(i, j);
                }
                (alpha * occur + beta * absent) / n as f64
            })
            .collect()
    }

    #[test]
    fn single_action_fixed_point() {
        let p = matrices(1, vec![1.0], vec![0.0]);
        let out = project(&[0.37], &p, &unit_cfg()).unwrap();
        assert_eq!(out, vec![0.37]);
    }

    #[test]
    fn two_action_hand_case() {
        let p = hand_case();
        let a = [0.8, 0.4];
        let out = project(&a, &p, &unit_cfg()).unwrap();
        let oracle = project_oracle(&a, &p, 1.0, 1.0);
        assert_eq!(out, oracle);
        assert!((out[0] - 0.54).abs() < 1e-12);
        assert!((out[1] - 0.41).abs() < 1e-12);
    }

    #[test]
    fn range_bound_zero_to_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = ProjectionConfig::new(1.2, 0.8, false).unwrap();
        for _ in 0..200 {
            let n = rng.random_range(1..6);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
            let mut cooc: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..=1.0)).collect();
            let mut comp: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..=1.0)).collect();
            for i in 0..n {
                cooc[i * n + i] = 1.0;
                comp[i * n + i] = 0.0;
            }
            let p = matrices(n, cooc, comp);
            let out = project(&a, &p, &cfg).unwrap();
            for v in out {
                assert!((0.0..=cfg.alpha).contains(&v), "value {v} out of [0, alpha]");
            }
        }
    }

    #[test]
    fn projection_is_affine() {
        let p = hand_case();
        let cfg = ProjectionConfig::new(1.4, 0.6, false).unwrap();
        let a1 = [0.9, 0.1];
        let a2 = [0.2, 0.7];
        for t in [0.0, 0.25, 0.5, 0.9, 1.0] {
            let mix: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| t * x + (1.0 - t) * y).collect();
            let lhs = project(&mix, &p, &cfg).unwrap();
            let p1 = project(&a1, &p, &cfg).unwrap();
            let p2 = project(&a2, &p, &cfg).unwrap();
            for j in 0..2 {
                let rhs = t * p1[j] + (1.0 - t) * p2[j];
                assert!((lhs[j] - rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_input_rejected() {
        let p = hand_case();
        assert!(project(&[1.2, 0.0], &p, &unit_cfg()).is_err());
        assert!(project(&[-0.1, 0.0], &p, &unit_cfg()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ProjectionConfig::new(1.2, 0.8, true).is_ok());
        assert!(ProjectionConfig::new(1.0, 1.0, true).is_ok());
        assert!(ProjectionConfig::new(0.8, 1.2, true).is_err());
        assert!(ProjectionConfig::new(1.5, 0.8, true).is_err());
        assert!(ProjectionConfig::new(-0.5, 2.5, true).is_err());
        assert!(LossWeights::new(0.0, 0.0, 0.5, 0.5).is_err());
        assert!(LossWeights::new(0.1, 1.0, -0.2, 0.5).is_err());
    }

    #[test]
    fn all_ones_cooc_projects_to_mean() {
        let p = matrices(2, vec![1.0; 4], vec![0.0; 4]);
        let a = [0.8, 0.4];
        let out = project(&a, &p, &unit_cfg()).unwrap();
        let mean = (0.8 + 0.4) / 2.0;
        assert!((out[0] - mean).abs() < 1e-15);
        assert!((out[1] - mean).abs() < 1e-15);
    }

    #[test]
    fn zero_input_projects_to_complement_column_means() {
        let p = hand_case();
        let cfg = ProjectionConfig::new(1.2, 0.8, false).unwrap();
        let out = project(&[0.0, 0.0], &p, &cfg).unwrap();
        assert!((out[0] - 0.8 * 0.3 / 2.0).abs() < 1e-15);
        assert!((out[1] - 0.8 * 0.1 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn groundtruth_one_hot_scaled_row() {
        // One-hot at action 0, beta = 0, alpha = 2: projection is (2/N)
        // times row 0 of the co-occurrence matrix.
        let p = hand_case();
        let cfg = ProjectionConfig::new(2.0, 0.0, false).unwrap();
        let out = project(&[1.0, 0.0], &p, &cfg).unwrap();
        assert!((out[0] - 2.0 / 2.0 * 1.0).abs() < 1e-15);
        assert!((out[1] - 2.0 / 2.0 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_groundtruth_zero_complement_projects_to_zero() {
        let p = matrices(2, vec![1.0, 0.5, 0.25, 1.0], vec![0.0; 4]);
        let out = project(&[0.0, 0.0], &p, &unit_cfg()).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn distill_reduces_to_plain_bce() {
        let y_hat = Matrix::new(1, 4, vec![0.3, 0.8, 0.1, 0.6]).unwrap();
        let y_gt = Matrix::new(1, 4, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let other = Matrix::new(1, 4, vec![0.5; 4]).unwrap();
        let w = LossWeights::ground_truth_only();
        let loss = distill_loss(&y_hat, &y_gt, &other, &other, &w).unwrap();
        assert_eq!(loss, bce(&y_hat, &y_gt).unwrap());
    }

    #[test]
    fn distill_minimum_at_matching_targets() {
        let v = vec![0.3, 0.8, 0.1, 0.6];
        let y = Matrix::new(1, 4, v.clone()).unwrap();
        let w = LossWeights {
            lambda0: 0.0,
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 0.5,
        };
        let at = distill_loss(&y, &y, &y, &y, &w).unwrap();
        for i in 0..4 {
            for dp in [-0.02, 0.02] {
                let mut pert = v.clone();
                pert[i] += dp;
                let yp = Matrix::new(1, 4, pert).unwrap();
                assert!(distill_loss(&yp, &y, &y, &y, &w).unwrap() > at);
            }
        }
    }

    #[test]
    fn distill_grad_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = 6;
        let y_hat: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..0.95)).collect();
        let y_gt: Vec<f64> = (0..m).map(|_| f64::from(rng.random_range(0..2))).collect();
        let y_proj: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let y_gt_proj: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let w = LossWeights {
            lambda0: 0.0,
            lambda1: 1.0,
            lambda2: 0.7,
            lambda3: 0.4,
        };
        let mk = |v: &[f64]| Matrix::new(1, m, v.to_vec()).unwrap();
        let grad = distill_loss_grad(&mk(&y_hat), &mk(&y_gt), &mk(&y_proj), &mk(&y_gt_proj), &w).unwrap();
        let h = 1e-6;
        for i in 0..m {
            let mut plus = y_hat.clone();
            plus[i] += h;
            let mut minus = y_hat.clone();
            minus[i] -= h;
            let lp = distill_loss(&mk(&plus), &mk(&y_gt), &mk(&y_proj), &mk(&y_gt_proj), &w).unwrap();
            let lm = distill_loss(&mk(&minus), &mk(&y_gt), &mk(&y_proj), &mk(&y_gt_proj), &w).unwrap();
            let num = (lp - lm) / (2.0 * h);
            let rel = (grad.data[i] - num).abs() / num.abs().max(1.0);
            assert!(rel < 1e-6, "coord {i}: rel {rel}");
        }
    }

    #[test]
    fn emb_loss_values() {
        // orthogonal vectors: -ln sigmoid(0) = ln 2
        let loss = emb_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        // strong alignment drives the loss toward zero
        let loss = emb_loss(&[10.0, 0.0], &[10.0, 0.0]).unwrap();
        assert!(loss < 1e-8);
        // anti-alignment is punished
        assert!(emb_loss(&[5.0, 0.0], &[-5.0, 0.0]).unwrap() > 10.0);
    }

    #[test]
    fn emb_grad_matches_finite_difference() {
        let o = [0.4, -0.7, 0.2];
        let v = [0.3, 0.5, -0.6];
        let grad = emb_loss_grad(&o, &v).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut plus = v;
            plus[i] += h;
            let mut minus = v;
            minus[i] -= h;
            let num = (emb_loss(&o, &plus).unwrap() - emb_loss(&o, &minus).unwrap()) / (2.0 * h);
            assert!((grad[i] - num).abs() < 1e-8, "coord {i}");
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights {
            lambda0: 0.0,
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 0.0,
        };
        assert_eq!(total_loss(1.0, std::f64::consts::LN_2, &w), 1.0);
        let w = LossWeights {
            lambda0: 1.0,
            ..w
        };
        let total = total_loss(1.0, std::f64::consts::LN_2, &w);
        assert!((total - 1.6931471805599453).abs() < 1e-12);
    }
}

//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::store::ParamStore;

/// Above this many coordinates, a seeded random subset is checked instead
/// of every coordinate.
pub const EXHAUSTIVE_COORD_LIMIT: usize = 10_000;
const SUBSET_SIZE: usize = 2_048;

/// Compare the gradients currently held in `store` against central finite
/// differences of `loss`, returning the maximum relative error.
///
/// The caller runs its backward pass first so the gradient slots are
/// populated; `loss` must be a deterministic function of the parameter
/// values alone. Relative error uses `max(|analytic|, |numeric|, 1e-6)` as
/// the denominator.
pub fn finite_diff_check<F>(store: &mut ParamStore, step: f64, mut loss: F) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let analytic = store.grads_snapshot();
    let names: Vec<String> = store.names().map(str::to_string).collect();

    // Flat coordinate list (name index, offset).
    let mut coords = Vec::new();
    for (ni, name) in names.iter().enumerate() {
        for off in 0..store.value(name).len() {
            coords.push((ni, off));
        }
    }
    let picked: Vec<(usize, usize)> = if coords.len() > EXHAUSTIVE_COORD_LIMIT {
        let mut rng = ChaCha8Rng::seed_from_u64(store.rng_seed ^ 0x9e37_79b9_7f4a_7c15);
        sample(&mut rng, coords.len(), SUBSET_SIZE)
            .into_iter()
            .map(|i| coords[i])
            .collect()
    } else {
        coords
    };

    let mut max_rel = 0.0f64;
    for (ni, off) in picked {
        let name = &names[ni];
        let orig = store.value(name).data[off];
        store.value_mut(name).data[off] = orig + step;
        let plus = loss(store)?;
        store.value_mut(name).data[off] = orig - step;
        let minus = loss(store)?;
        store.value_mut(name).data[off] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[name].data[off];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::matrix::Matrix;
    use crate::nn::ops::{bce, bce_grad, relu, relu_backward, DenseLayer};

    /// loss = sum over params of (w - c)^2 with per-name offsets.
    fn quadratic_loss(store: &ParamStore) -> Result<f64> {
        let mut acc = 0.0;
        for name in store.names() {
            for (i, &w) in store.value(name).data.iter().enumerate() {
                acc += (w - 0.1 * i as f64).powi(2);
            }
        }
        Ok(acc)
    }

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let mut store = ParamStore::new(5);
        store.add_uniform("w", 1, 3).unwrap();
        // analytic gradient: 2 (w - c)
        let grads: Vec<f64> = store.value("w").data.iter().enumerate()
            .map(|(i, &w)| 2.0 * (w - 0.1 * i as f64))
            .collect();
        store
            .accumulate_grad("w", &Matrix::new(1, 3, grads).unwrap())
            .unwrap();
        let err = finite_diff_check(&mut store, 1e-5, quadratic_loss).unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let mut store = ParamStore::new(5);
        store
            .add_matrix("w", Matrix::new(1, 1, vec![0.0]).unwrap())
            .unwrap();
        // loss = w^2 at w = 0: true gradient 0, corrupted by +1.
        store
            .accumulate_grad("w", &Matrix::new(1, 1, vec![1.0]).unwrap())
            .unwrap();
        let err = finite_diff_check(&mut store, 1e-5, |s| {
            Ok(s.value("w").data[0].powi(2))
        })
        .unwrap();
        assert!(err >= 0.5, "err = {err}");
    }

    #[test]
    fn dense_layer_gradient_3x4() {
        let mut store = ParamStore::new(42);
        let layer = DenseLayer::init(&mut store, "fc", 3, 4).unwrap();
        let x = Matrix::new(2, 3, vec![0.3, -1.0, 0.7, 1.2, 0.1, -0.4]).unwrap();
        let target = Matrix::new(2, 4, vec![0.2, 0.8, 0.5, 0.1, 0.9, 0.3, 0.6, 0.4]).unwrap();

        // loss = bce(sigmoid-free clamp? no: use plain sigmoid-less probe) —
        // use relu then bce against targets on squashed values.
        let loss_of = |s: &ParamStore| -> Result<f64> {
            let y = layer.forward(s, &x)?;
            let a = crate::nn::ops::sigmoid(&y)?;
            bce(&a, &target)
        };

        let y = layer.forward(&store, &x).unwrap();
        let a = crate::nn::ops::sigmoid(&y).unwrap();
        let da = bce_grad(&a, &target).unwrap();
        let dy = crate::nn::ops::sigmoid_backward(&a, &da).unwrap();
        layer.backward(&mut store, &x, &dy).unwrap();

        let err = finite_diff_check(&mut store, 1e-5, loss_of).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn relu_gradient() {
        let mut store = ParamStore::new(9);
        let layer = DenseLayer::init(&mut store, "fc", 3, 3).unwrap();
        let x = Matrix::new(1, 3, vec![0.5, -0.3, 0.9]).unwrap();
        let loss_of = |s: &ParamStore| -> Result<f64> {
            let y = layer.forward(s, &x)?;
            let r = relu(&y)?;
            Ok(r.data.iter().map(|v| v * v).sum())
        };
        let y = layer.forward(&store, &x).unwrap();
        let r = relu(&y).unwrap();
        let dr = r.scale(2.0).unwrap();
        let dy = relu_backward(&y, &dr).unwrap();
        layer.backward(&mut store, &x, &dy).unwrap();
        let err = finite_diff_check(&mut store, 1e-5, loss_of).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}

use serde::{Deserialize, Serialize};

use super::params::{global_norm, Gradients, ParamStore};
use super::tensor::Scalar;
use super::NumericError;

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One AdamW step with decoupled weight decay and bias correction.
///
/// Every parameter in `params` must have a gradient of identical shape.
pub fn adamw_update<F: Scalar>(
    params: &mut ParamStore<F>,
    grads: &Gradients<F>,
    opt: &AdamW,
) -> Result<(), NumericError> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| NumericError::MissingGradient(name.to_string()))?;
        if g.shape() != p.value.shape() {
            return Err(NumericError::ShapeMismatch {
                context: "adamw_update",
                expected: p.value.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(NumericError::NonFinite {
                op: "adamw_update",
                node: 0,
            });
        }
    }

    let (b1, b2) = (F::of(opt.beta1), F::of(opt.beta2));
    let (lr, wd, eps) = (F::of(opt.lr), F::of(opt.weight_decay), F::of(opt.eps));
    let one = F::one();
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        p.step += 1;
        let bc1 = one - b1.powi(p.step as i32);
        let bc2 = one - b2.powi(p.step as i32);
        let m = p.m.data_mut();
        let v = p.v.data_mut();
        for (i, (x, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *x = *x - lr * wd * *x - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales all gradients by `max_norm / norm` when the global norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<F: Scalar>(grads: &mut Gradients<F>, max_norm: f64) -> F {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = global_norm(grads);
    let bound = F::of(max_norm);
    if norm > bound {
        let s = bound / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x = *x * s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![vals.len()], vals.to_vec()).unwrap())
            .unwrap();
        s
    }

    fn grads(vals: &[f64]) -> Gradients<f64> {
        let mut g = Gradients::new();
        g.insert("w".into(), Tensor::new(vec![vals.len()], vals.to_vec()).unwrap());
        g
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut s = store(&[1.0, -2.0, 3.5]);
        let before = s.clone();
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        adamw_update(&mut s, &grads(&[0.0, 0.0, 0.0]), &opt).unwrap();
        assert_eq!(s.get("w"), before.get("w"));
        assert_eq!(s.param("w").unwrap().step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut s = store(&[0.0]);
        let opt = AdamW {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamW::default()
        };
        adamw_update(&mut s, &grads(&[1.0]), &opt).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((s.get("w").unwrap().data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut s = store(&[1.0]);
        let opt = AdamW {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamW::default()
        };
        adamw_update(&mut s, &grads(&[0.0]), &opt).unwrap();
        assert!((s.get("w").unwrap().data()[0] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut s = store(&[0.3, -0.7]);
        let before = s.get("w").unwrap().clone();
        let opt = AdamW {
            lr: 0.0,
            ..AdamW::default()
        };
        adamw_update(&mut s, &grads(&[5.0, -1.0]), &opt).unwrap();
        assert_eq!(s.get("w").unwrap(), &before);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = store(&[0.0, 0.0]);
        let err = adamw_update(&mut s, &grads(&[1.0]), &AdamW::default()).unwrap_err();
        assert!(matches!(err, NumericError::ShapeMismatch { .. }));
        let mut missing = Gradients::new();
        missing.insert("other".into(), Tensor::zeros(&[2]));
        assert!(adamw_update(&mut s, &missing, &AdamW::default()).is_err());
    }

    #[test]
    fn clip_examples() {
        let mut g = grads(&[3.0, 4.0]);
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g["w"].data(), &[3.0, 4.0]);

        let mut g = grads(&[3.0, 4.0]);
        clip_global_norm(&mut g, 1.0);
        assert!((g["w"].data()[0] - 0.6).abs() < 1e-12);
        assert!((g["w"].data()[1] - 0.8).abs() < 1e-12);

        let mut g = grads(&[0.0, 0.0]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 0.0);
        assert_eq!(g["w"].data(), &[0.0, 0.0]);
    }
}

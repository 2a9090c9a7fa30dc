use crate::error::{NumError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay.
///
/// Each step first shrinks the weights by `1 - lr·λ` and then applies the
/// bias-corrected Adam update, so `λ = 0` reduces to plain Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Result<Self> {
        if config.weight_decay < 0.0 || !config.weight_decay.is_finite() {
            return Err(NumError::InvalidArgument {
                op: "adamw",
                msg: format!("weight decay must be >= 0, got {}", config.weight_decay),
            });
        }
        let zeros = |p: &Tensor| Tensor::zeros(p.shape());
        Ok(Self {
            config,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(NumError::InvalidArgument {
                op: "adamw",
                msg: format!("learning rate must be finite and non-negative, got {lr}"),
            });
        }
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(NumError::ShapeMismatch {
                op: "adamw",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(NumError::ShapeMismatch {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(NumError::NonFinite { op: "adamw gradient" });
            }
        }

        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let decay = 1.0 - lr * weight_decay;
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((w, &gv), (mv, vv)) in iter {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> Vec<Tensor> {
        vec![Tensor::vector(vec![w])]
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let mut params = single(1.0);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.01,
                ..Default::default()
            },
            &params,
        )
        .unwrap();
        opt.step(&mut params, &single(0.0), 0.1).unwrap();
        assert!((params[0].item() - 0.999).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_matches_hand_computed_adam() {
        // m = 0.1, v = 0.001; m̂ = 1, v̂ = 1; Δ = 0.001 / (1 + 1e-8).
        let mut params = single(0.0);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &params,
        )
        .unwrap();
        opt.step(&mut params, &single(1.0), 0.001).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((params[0].item() - expected).abs() < 1e-15);
        assert!((params[0].item() + 0.001).abs() < 1e-10);
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let mut params = vec![Tensor::vector(vec![0.3, -0.7]), Tensor::vector(vec![0.3, -0.7])];
        let grads = vec![Tensor::vector(vec![0.5, 2.0]), Tensor::vector(vec![0.5, 2.0])];
        let mut opt = AdamW::new(AdamWConfig::default(), &params).unwrap();
        for _ in 0..5 {
            opt.step(&mut params, &grads, 0.01).unwrap();
        }
        assert_eq!(params[0], params[1]);
    }

    #[test]
    fn step_count_increments_and_zero_lr_is_identity() {
        let mut params = vec![Tensor::vector(vec![0.25, -1.5])];
        let before = params.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &params).unwrap();
        for k in 1..=3 {
            opt.step(&mut params, &[Tensor::vector(vec![1.0, -3.0])], 0.0).unwrap();
            assert_eq!(opt.step_count(), k);
        }
        assert_eq!(params, before);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut params = single(1.0);
        assert!(AdamW::new(
            AdamWConfig {
                weight_decay: -0.1,
                ..Default::default()
            },
            &params
        )
        .is_err());
        let mut opt = AdamW::new(AdamWConfig::default(), &params).unwrap();
        assert!(opt.step(&mut params, &single(f64::NAN), 0.1).is_err());
        assert!(opt.step(&mut params, &[Tensor::vector(vec![1.0, 2.0])], 0.1).is_err());
        assert!(opt.step(&mut params, &single(1.0), f64::NAN).is_err());
        assert_eq!(opt.step_count(), 0);
    }
}

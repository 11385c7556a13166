use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{Parameters, TrainableMask};
use crate::tensor::{Real, Tensor};

/// Parameters exempt from weight decay.
pub fn decays(name: &str) -> bool {
    name != "adapter.gates"
}

/// AdamW with moments only for masked parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Real = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// First and second moments by parameter name.
    pub moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &dyn Parameters<T>, mask: &TrainableMask, weight_decay: f64) -> Self {
        let moments = params
            .named()
            .into_iter()
            .filter(|(n, _)| mask.contains(n))
            .map(|(n, t)| (n, (Tensor::zeros(t.shape()), Tensor::zeros(t.shape()))))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments,
        }
    }

    /// One update of every parameter that has moments; others are untouched
    /// whatever `grads` holds for them.
    pub fn step(&mut self, params: &mut dyn Parameters<T>, grads: &BTreeMap<String, Vec<T>>, lr: f64) -> Result<()> {
        let next = self.step + 1;
        for (name, g) in grads {
            if self.moments.contains_key(name) && !g.iter().all(|x| x.is_finite()) {
                return Err(Error::NumericAbort {
                    step: next as usize,
                    param: name.clone(),
                });
            }
        }
        self.step = next;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let bc1 = T::of(1.0 - self.beta1.powi(next as i32));
        let bc2 = T::of(1.0 - self.beta2.powi(next as i32));
        let (lr_t, eps) = (T::of(lr), T::of(self.eps));
        for (name, p) in params.named_mut() {
            let Some((m, v)) = self.moments.get_mut(&name) else { continue };
            let Some(g) = grads.get(&name) else { continue };
            let shrink = if decays(&name) {
                T::one() - lr_t * T::of(self.weight_decay)
            } else {
                T::one()
            };
            let it = p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g);
            for (((p, m), v), &g) in it {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p = *p * shrink - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct One(Tensor<f64>, Tensor<f64>);

    impl Parameters<f64> for One {
        fn named(&self) -> Vec<(String, &Tensor<f64>)> {
            vec![("w".into(), &self.0), ("frozen".into(), &self.1)]
        }
        fn named_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
            vec![("w".into(), &mut self.0), ("frozen".into(), &mut self.1)]
        }
    }

    fn grads(w: f64, frozen: f64) -> BTreeMap<String, Vec<f64>> {
        BTreeMap::from([("w".to_string(), vec![w]), ("frozen".to_string(), vec![frozen])])
    }

    #[test]
    fn single_scalar_step_matches_formula() {
        let mut p = One(Tensor::scalar(2.0), Tensor::scalar(1.0));
        let mut opt = AdamW::new(&p, &TrainableMask::from_names(["w"]), 0.1);
        opt.step(&mut p, &grads(0.5, 9.0), 0.01).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps) after decoupled decay.
        let want = 2.0 * (1.0 - 0.01 * 0.1) - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((p.0.data()[0] - want).abs() < 1e-15);
        assert_eq!(p.1.data()[0].to_bits(), 1f64.to_bits());
    }

    #[test]
    fn zero_grads_zero_decay_leave_params() {
        let mut p = One(Tensor::scalar(2.0), Tensor::scalar(1.0));
        let mut opt = AdamW::new(&p, &TrainableMask::from_names(["w"]), 0.0);
        for _ in 0..3 {
            opt.step(&mut p, &grads(0.0, 0.0), 0.1).unwrap();
        }
        assert_eq!(p.0.data()[0], 2.0);
    }

    #[test]
    fn non_finite_grads_abort_with_context() {
        let mut p = One(Tensor::scalar(2.0), Tensor::scalar(1.0));
        let mut opt = AdamW::new(&p, &TrainableMask::from_names(["w"]), 0.0);
        match opt.step(&mut p, &grads(f64::NAN, 0.0), 0.1) {
            Err(Error::NumericAbort { step: 1, param }) => assert_eq!(param, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p.0.data()[0], 2.0);
    }
}

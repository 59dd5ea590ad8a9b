//! Adaptive-moment optimizer with bias correction and a cosine learning-rate
//! schedule.

use super::error::AutodiffError;
use super::tensor::ParamStore;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f32,
    pub min_lr: f32,
    pub total_steps: usize,
}

impl CosineSchedule {
    /// Decay from `base_lr` to `min_lr` over `total_steps`; step 0 yields the
    /// base rate, any step at or beyond the end yields the minimum.
    pub fn lr_at(&self, step: usize) -> f32 {
        if self.total_steps == 0 || step >= self.total_steps {
            return self.min_lr;
        }
        let progress = step as f64 / self.total_steps as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        (self.min_lr as f64 + (self.base_lr as f64 - self.min_lr as f64) * cos) as f32
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    pub step: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub schedule: CosineSchedule,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, schedule: CosineSchedule) -> Self {
        let m = store
            .iter()
            .map(|(_, p)| vec![0.0; p.tensor.numel()])
            .collect();
        let v = store
            .iter()
            .map(|(_, p)| vec![0.0; p.tensor.numel()])
            .collect();
        OptimizerState {
            m,
            v,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
        }
    }

    pub fn current_lr(&self) -> f32 {
        self.schedule.lr_at(self.step)
    }

    /// One update over every parameter; gradients are consumed and cleared.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), AutodiffError> {
        if !store.grads_populated() {
            return Err(AutodiffError::MissingGradients);
        }
        let lr = self.current_lr();
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for idx in 0..store.len() {
            let pid = super::tensor::ParamId(idx);
            let p = store.get_mut(pid);
            let grad = p.tensor.grad.as_ref().expect("params carry grads").clone();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for ((w, g), (mi, vi)) in p
                .tensor
                .values
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
                if !w.is_finite() {
                    return Err(AutodiffError::NonFinite {
                        context: format!("parameter {}", p.name),
                        value: *w,
                    });
                }
            }
        }
        self.step += 1;
        store.zero_grads();
        Ok(())
    }

    /// Reset the moment history for a slice of one parameter, e.g. after a
    /// codeword has been reseeded.
    pub fn zero_moments(&mut self, param_index: usize, start: usize, len: usize) {
        for buf in [&mut self.m[param_index], &mut self.v[param_index]] {
            for v in &mut buf[start..start + len] {
                *v = 0.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tape::Tape;
    use crate::autodiff::tensor::Tensor;

    #[test]
    fn schedule_endpoints() {
        let s = CosineSchedule {
            base_lr: 1e-3,
            min_lr: 1e-5,
            total_steps: 100,
        };
        assert_eq!(s.lr_at(0), 1e-3);
        assert_eq!(s.lr_at(100), 1e-5);
        assert_eq!(s.lr_at(5000), 1e-5);
        // Halfway sits at the midpoint of base and min.
        let mid = s.lr_at(50);
        assert!((mid - (1e-3 + 1e-5) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn single_step_matches_hand_calculation() {
        // loss = p^2 at p = 1: g = 2, m_hat = 2, v_hat = 4,
        // update = lr * 2 / (2 + eps) ~= lr.
        let mut store = ParamStore::new();
        let pid = store.add("p", Tensor::new(vec![1], vec![1.0]));
        let mut tape = Tape::new();
        let p = tape.param(&store, pid);
        let loss = tape.mul(p, p);
        tape.backward(loss).unwrap();
        tape.export_param_grads(&mut store);

        let lr = 0.1f32;
        let mut opt = OptimizerState::new(
            &store,
            CosineSchedule {
                base_lr: lr,
                min_lr: lr,
                total_steps: 10,
            },
        );
        opt.step(&mut store).unwrap();

        let eps = 1e-8f32;
        let g = 2.0f32;
        let m_hat = (0.1 * g) / (1.0 - 0.9);
        let v_hat = (0.001 * g * g) / (1.0 - 0.999);
        let expect = 1.0 - lr * m_hat / (v_hat.sqrt() + eps);
        let got = store.get(pid).tensor.values[0];
        assert!((got - expect).abs() < 2e-6, "got {got}, expect {expect}");
        assert_eq!(opt.step, 1);
        assert!(!store.grads_populated(), "gradients cleared after step");
    }

    #[test]
    fn step_without_gradients_errors() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::new(vec![1], vec![1.0]));
        let mut opt = OptimizerState::new(
            &store,
            CosineSchedule {
                base_lr: 0.1,
                min_lr: 0.01,
                total_steps: 10,
            },
        );
        assert!(matches!(
            opt.step(&mut store),
            Err(AutodiffError::MissingGradients)
        ));
    }
}

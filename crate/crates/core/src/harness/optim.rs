use crate::numerics::{ParamStore, Real, Tensor};

/// Adam with decoupled weight decay and a constant learning rate.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip: f64,
    t: i32,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, clip: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip,
            t: 0,
            moments: Vec::new(),
        }
    }

    /// One update. `grads` pairs parameter names with gradients; parameters
    /// without a gradient are left untouched. Returns the pre-clip gradient norm.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &[(String, Tensor<T>)]) -> f64 {
        if self.moments.is_empty() {
            self.moments = store
                .iter()
                .map(|(_, t)| (vec![0.0; t.len()], vec![0.0; t.len()]))
                .collect();
        }
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
            .sum::<f64>()
            .sqrt();
        let scale = if self.clip > 0.0 && norm > self.clip {
            self.clip / norm
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let names: Vec<String> = store.names().map(String::from).collect();
        for (name, grad) in grads {
            let idx = names
                .iter()
                .position(|n| n == name)
                .expect("gradient for a registered parameter");
            let (m, v) = &mut self.moments[idx];
            let p = store.get_mut(name).expect("registered parameter").data_mut();
            for i in 0..p.len() {
                let g = grad.data()[i].as_f64() * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                let w = p[i].as_f64();
                p[i] = T::of(w - self.lr * (update + self.weight_decay * w));
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut s = ParamStore::<f64>::new(0);
        s.add_const("w", &[3], 1.0).unwrap();
        let mut opt = AdamW::new(0.1, 0.0, 0.0);
        let g = Tensor::from_f64(&[3], &[2.0, -0.5, 0.0]).unwrap();
        opt.step(&mut s, &[("w".into(), g)]);
        let w = s.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 1.1).abs() < 1e-6);
        assert_eq!(w[2], 1.0);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut s = ParamStore::<f64>::new(0);
        s.add_const("w", &[1], 2.0).unwrap();
        let mut opt = AdamW::new(0.1, 0.5, 0.0);
        opt.step(&mut s, &[("w".into(), Tensor::zeros(&[1]))]);
        assert!((s.get("w").unwrap().data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let mut s = ParamStore::<f64>::new(0);
        s.add_const("w", &[1], 0.0).unwrap();
        let mut opt = AdamW::new(0.1, 0.0, 1.0);
        let norm = opt.step(&mut s, &[("w".into(), Tensor::from_f64(&[1], &[10.0]).unwrap())]);
        assert_eq!(norm, 10.0);
    }
}

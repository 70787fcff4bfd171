use super::params::ParamStore;
use super::tensor::Tensor;

/// Adam with coupled L2 weight decay (the decay term is added to the gradient).
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

pub const DEFAULT_WEIGHT_DECAY: f64 = 5e-4;

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len(), "gradient count mismatch");
        if self.m.len() != params.len() {
            self.m = params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
            self.t = 0;
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gk = gv + self.weight_decay * *pv;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *pv -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ParamStore::new();
        p.push("w", Tensor::vector(vec![1.0, -1.0]));
        let mut opt = Adam::new(0.0);
        opt.step(&mut p, &[Tensor::vector(vec![0.3, -2.0])], 0.1);
        let w = p.get(0).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_pulls_towards_zero() {
        let mut p = ParamStore::new();
        p.push("w", Tensor::vector(vec![2.0]));
        let mut opt = Adam::new(DEFAULT_WEIGHT_DECAY);
        opt.step(&mut p, &[Tensor::vector(vec![0.0])], 0.01);
        assert!(p.get(0).data()[0] < 2.0);
    }
}

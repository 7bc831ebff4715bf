//! First-order optimizers over [`ParamVec`]s.

use crate::tensor::ParamVec;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: ParamVec,
    v: ParamVec,
    t: i32,
}

impl Adam {
    pub fn new(like: &ParamVec, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: ParamVec::zeros_like(like),
            v: ParamVec::zeros_like(like),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamVec, grad: &ParamVec) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .0
            .iter_mut()
            .zip(&grad.0)
            .zip(self.m.0.iter_mut().zip(self.v.0.iter_mut()))
        {
            let p = p.data_mut();
            let m = m.data_mut();
            let v = v.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= self.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ParamVec(vec![Tensor::row(vec![1.0, -2.0])]);
        let g = ParamVec(vec![Tensor::row(vec![3.0, -0.5])]);
        let mut opt = Adam::new(&p, 0.1);
        opt.step(&mut p, &g);
        assert!((p.0[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p.0[0].data()[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamVec(vec![Tensor::row(vec![4.0, -3.0])]);
        let mut opt = Adam::new(&p, 0.05);
        for _ in 0..2000 {
            let g = p.scale(2.0);
            opt.step(&mut p, &g);
        }
        assert!(p.norm() < 1e-3);
    }
}

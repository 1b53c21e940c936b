//! Adam, global-norm clipping and plateau-based learning-rate decay.

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// L2 weight decay is folded into the gradient.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.data.len() {
                let gi = g.data[i] + self.weight_decay * p.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Multiplies the learning rate by `factor` once `patience` consecutive
/// evaluations fail to improve on the best loss by a relative `threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub threshold: f64,
    pub best: f64,
    pub bad: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize, min_lr: f64) -> Self {
        Plateau {
            factor,
            patience,
            min_lr,
            threshold: 1e-4,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Records a loss and returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if !self.best.is_finite() || loss < self.best - self.threshold * self.best.abs() {
            self.best = loss;
            self.bad = 0;
            return lr;
        }
        self.bad += 1;
        if self.bad >= self.patience {
            self.bad = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::from_vec(1, 2, vec![1.0, -1.0])];
        let g = vec![Tensor::from_vec(1, 2, vec![0.5, -3.0])];
        let mut opt = Adam::new(&p, 0.1, 0.95, 0.99, 0.0);
        opt.update(&mut p, &g);
        assert!((p[0].data[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut p = vec![Tensor::from_vec(1, 1, vec![5.0])];
        let mut opt = Adam::new(&p, 0.05, 0.9, 0.99, 0.0);
        for _ in 0..2000 {
            let g = vec![p[0].map(|x| 2.0 * (x - 1.0))];
            opt.update(&mut p, &g);
        }
        assert!((p[0].data[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::from_vec(1, 2, vec![3.0, 4.0])];
        assert_eq!(clip_grad_norm(&mut g, 8.0), 5.0);
        assert_eq!(g[0].data, vec![3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].sq_norm().sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn plateau_decays_after_patience() {
        let mut p = Plateau::new(0.6, 3, 1e-6);
        let mut lr = 0.005;
        lr = p.observe(1.0, lr);
        for _ in 0..2 {
            lr = p.observe(1.0, lr);
            assert_eq!(lr, 0.005);
        }
        lr = p.observe(1.0, lr);
        assert_eq!(lr, 0.005 * 0.6);
        lr = p.observe(0.5, lr);
        assert_eq!(lr, 0.003);
        let mut q = Plateau::new(0.1, 1, 1e-3);
        q.observe(1.0, 1.0);
        assert_eq!(q.observe(2.0, 0.005), 1e-3);
    }
}

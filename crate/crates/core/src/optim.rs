//! Adam, the cosine learning-rate schedule and validation-loss early stopping
//! shared by both trainers.

use crate::ndmath::Parameters;

#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        assert!((0.0..1.0).contains(&beta1), "beta1 must be in [0, 1)");
        assert!((0.0..1.0).contains(&beta2), "beta2 must be in [0, 1)");
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn with_defaults(n_params: usize) -> Self {
        Self::new(n_params, 0.9, 0.999, 1e-8)
    }

    /// One bias-corrected update of `params` along `grads`.
    pub fn step<P: Parameters, G: Parameters>(&mut self, params: &mut P, grads: &G, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let grads = grads.param_slices();
        let mut offset = 0;
        for (p, g) in params.param_slices_mut().into_iter().zip(grads) {
            debug_assert_eq!(p.len(), g.len());
            let m = &mut self.m[offset..offset + p.len()];
            let v = &mut self.v[offset..offset + p.len()];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            offset += p.len();
        }
    }
}

/// Cosine decay from `initial` at epoch 0 to `minimum` at `total_epochs`.
pub fn cosine_lr(initial: f64, minimum: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return initial;
    }
    let progress = (epoch as f64 / total_epochs as f64).min(1.0);
    minimum + 0.5 * (initial - minimum) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Tracks the best validation loss. `patience` counts tolerated
/// non-improving epochs; the next one stops training.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Stalled,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, val_loss: f64) -> Progress {
        if val_loss < self.best {
            self.best = val_loss;
            self.since_best = 0;
            Progress::Improved
        } else {
            self.since_best += 1;
            if self.since_best > self.patience {
                Progress::Stop
            } else {
                Progress::Stalled
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Flat(Vec<f64>);

    impl Parameters for Flat {
        fn param_slices(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = Flat(vec![3.0, -2.0]);
        let mut opt = Adam::with_defaults(2);
        for _ in 0..2000 {
            let g = Flat(p.0.iter().map(|x| 2.0 * x).collect());
            opt.step(&mut p, &g, 0.05);
        }
        assert!(p.0.iter().all(|x| x.abs() < 1e-3), "{:?}", p.0);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = Flat(vec![1.0]);
        let mut opt = Adam::with_defaults(1);
        opt.step(&mut p, &Flat(vec![0.3]), 0.01);
        assert!((p.0[0] - 0.99).abs() < 1e-6);
    }

    #[test]
    fn cosine_hits_both_endpoints() {
        assert_eq!(cosine_lr(1e-3, 1e-4, 0, 200), 1e-3);
        assert!((cosine_lr(1e-3, 1e-4, 200, 200) - 1e-4).abs() < 1e-18);
        assert!((cosine_lr(1e-3, 1e-4, 100, 200) - 5.5e-4).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for e in 0..=200 {
            let lr = cosine_lr(1e-3, 1e-4, e, 200);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn zero_patience_stops_on_first_stall() {
        let mut es = EarlyStopping::new(0);
        assert_eq!(es.observe(1.0), Progress::Improved);
        assert_eq!(es.observe(0.5), Progress::Improved);
        assert_eq!(es.observe(0.5), Progress::Stop);

        let mut es = EarlyStopping::new(2);
        es.observe(1.0);
        assert_eq!(es.observe(1.1), Progress::Stalled);
        assert_eq!(es.observe(1.2), Progress::Stalled);
        assert_eq!(es.observe(1.3), Progress::Stop);
    }
}

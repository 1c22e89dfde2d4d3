//! Bias-corrected Adam.

use super::tensor::{sc, Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    /// Moment buffers shaped after `params`, standard betas.
    pub fn new(params: &[&Tensor<T>], lr: f64) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Gradients are read-only; the caller owns zeroing them.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) {
        assert_eq!(params.len(), self.m.len(), "adam: {} params, state has {}", params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let b1: T = sc(self.beta1);
        let b2: T = sc(self.beta2);
        let one = T::one();
        let bc1: T = sc(1.0 - self.beta1.powi(self.step as i32));
        let bc2: T = sc(1.0 - self.beta2.powi(self.step as i32));
        let lr: T = sc(self.lr);
        let eps: T = sc(self.eps);

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "adam: param {:?} vs grad {:?}", p.shape(), g.shape());
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::from_vec(&[2], vec![1.0f64, -2.0]);
        let before = p.clone();
        let g = Tensor::zeros(&[2]);
        let mut state = AdamState::new(&[&p], 0.1);
        state.step(&mut [&mut p], &[&g]);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With bias correction at t=1, the update is -lr * g / (|g| + eps').
        let mut p = Tensor::from_vec(&[3], vec![0.0f64, 0.0, 0.0]);
        let g = Tensor::from_vec(&[3], vec![0.5, -3.0, 1e-3]);
        let lr = 0.01;
        let mut state = AdamState::new(&[&p], lr);
        state.step(&mut [&mut p], &[&g]);
        for (pv, gv) in p.data().iter().zip(g.data()) {
            let expected = -lr * gv.signum();
            assert!((pv - expected).abs() < 1e-4, "{pv} vs {expected}");
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        // Minimize ||w||^2 from ||w0|| = 1; compare against the same
        // recurrence run independently on each coordinate.
        let dim = 4;
        let w0 = 0.5f64; // 4 * 0.25 = 1.0
        let mut w = Tensor::filled(&[dim], w0);
        let mut state = AdamState::new(&[&w], 0.1);
        // independent scalar oracle
        let mut scalar = w0;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=200u32 {
            let grads: Vec<f64> = w.data().iter().map(|&x| 2.0 * x).collect();
            let g = Tensor::from_vec(&[dim], grads);
            state.step(&mut [&mut w], &[&g]);

            let gs = 2.0 * scalar;
            m = 0.9 * m + 0.1 * gs;
            v = 0.999 * v + 0.001 * gs * gs;
            let mhat = m / (1.0 - 0.9f64.powi(t as i32));
            let vhat = v / (1.0 - 0.999f64.powi(t as i32));
            scalar -= 0.1 * mhat / (vhat.sqrt() + 1e-8);
        }
        let norm: f64 = w.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm < 1e-2, "norm {norm}");
        for &x in w.data() {
            assert!((x - scalar).abs() < 1e-12, "{x} vs oracle {scalar}");
        }
    }
}

use crate::matrix::{Matrix, Real};

/// Global L2 norm over a set of gradient tensors.
pub fn global_norm<T: Real>(grads: &[Matrix<T>]) -> f64 {
    grads.iter().map(Matrix::sum_squares).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm<T: Real>(grads: &mut [Matrix<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        grads.iter_mut().for_each(|g| g.scale_assign(s));
    }
    norm
}

/// Adam with bias correction and a constant learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(shapes: &[Matrix<T>], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            shapes
                .iter()
                .map(|t| Matrix::zeros(t.rows(), t.cols()))
                .collect()
        };
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut [Matrix<T>], grads: &[Matrix<T>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let one = T::one();
        let c1 = T::from_f64_lossy(1.0 / (1.0 - self.beta1.powi(t)));
        let c2 = T::from_f64_lossy(1.0 / (1.0 - self.beta2.powi(t)));
        let lr = T::from_f64_lossy(lr);
        let eps = T::from_f64_lossy(self.eps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((p, &g), m), v) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m * c1;
                let v_hat = *v * c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Matrix::from_vec(1, 2, vec![3.0f64, 4.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let mut small = vec![Matrix::from_vec(1, 1, vec![0.5f64]).unwrap()];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].get(0, 0), 0.5);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut p = vec![Matrix::from_vec(1, 2, vec![1.0f64, -1.0]).unwrap()];
        let g = vec![Matrix::from_vec(1, 2, vec![0.2f64, -3.0]).unwrap()];
        let mut adam = Adam::new(&p, 0.9, 0.98, 1e-9);
        adam.update(&mut p, &g, 0.01);
        // bias-corrected first step is lr · sign(g)
        assert!((p[0].get(0, 0) - 0.99).abs() < 1e-8);
        assert!((p[0].get(0, 1) + 0.99).abs() < 1e-8);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = vec![Matrix::from_vec(1, 1, vec![5.0f64]).unwrap()];
        let mut adam = Adam::new(&p, 0.9, 0.98, 1e-9);
        for _ in 0..2000 {
            let g = vec![p[0].map(|x| 2.0 * (x - 1.5))];
            adam.update(&mut p, &g, 0.01);
        }
        assert!((p[0].get(0, 0) - 1.5).abs() < 1e-2);
    }
}

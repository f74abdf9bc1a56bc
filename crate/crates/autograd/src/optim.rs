use crate::float::Float;
use crate::tensor::Tensor;

/// Adam with bias correction (Kingma & Ba defaults).
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(lr: T) -> Self {
        Self {
            lr,
            beta1: T::from_f64_lossy(0.9),
            beta2: T::from_f64_lossy(0.999),
            eps: T::from_f64_lossy(1e-8),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for param {i}");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (T::one() - self.beta1) * gv;
                v[j] = self.beta2 * v[j] + (T::one() - self.beta2) * gv * gv;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Plain gradient descent, `p <- p - lr * g`.
pub fn sgd_step<T: Float>(params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: T) {
    for (p, g) in params.iter_mut().zip(grads) {
        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
}

use crate::tensor::{s, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    lr: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<'a>(cfg: AdamConfig, lr: f64, params: impl Iterator<Item = &'a Tensor<T>>) -> Self {
        let zeros: Vec<Vec<T>> = params.map(|t| vec![T::zero(); t.len()]).collect();
        Self {
            cfg,
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Apply one update; `grads[i]` is `None` for a parameter that received
    /// no gradient this step.
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut Tensor<T>>,
        grads: &[Option<Tensor<T>>],
    ) {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = s::<T>(1.0 - b1.powi(self.step));
        let c2 = s::<T>(1.0 - b2.powi(self.step));
        let (b1, b2, eps, lr) = (
            s::<T>(b1),
            s::<T>(b2),
            s::<T>(self.cfg.eps),
            s::<T>(self.lr),
        );
        let one = T::one();
        for (i, p) in params.enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = [Tensor::<f64>::from_f64(&[2], &[1.0, -1.0]).unwrap()];
        let mut opt = Adam::new(AdamConfig::default(), 0.1, p.iter());
        let g = Tensor::from_f64(&[2], &[3.0, -0.5]).unwrap();
        opt.step(p.iter_mut(), &[Some(g)]);
        let d = p[0].data();
        assert!(
            (d[0] - 0.9).abs() < 1e-6 && (d[1] + 0.9).abs() < 1e-6,
            "{d:?}"
        );
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = [Tensor::<f64>::from_f64(&[1], &[5.0]).unwrap()];
        let mut opt = Adam::new(AdamConfig::default(), 0.1, p.iter());
        for _ in 0..500 {
            let g = p[0].map(|x| 2.0 * (x - 2.0));
            opt.step(p.iter_mut(), &[Some(g)]);
        }
        assert!((p[0].data()[0] - 2.0).abs() < 1e-2);
    }
}

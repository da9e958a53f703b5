use super::{NumError, Result, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    pub first_moment: Vec<Tensor<S>>,
    pub second_moment: Vec<Tensor<S>>,
    pub step_count: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new<'a, I>(params: I, config: AdamConfig) -> Self
    where
        I: IntoIterator<Item = &'a Tensor<S>>,
    {
        let first_moment: Vec<Tensor<S>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            second_moment: first_moment.clone(),
            first_moment,
            step_count: 0,
        }
    }

    /// Applies one update in place. Nothing is modified when any gradient is
    /// non-finite or any shape disagrees with the moment arrays.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Tensor<S>], lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(NumError::Contract(format!("learning rate must be positive, got {lr}")));
        }
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(NumError::Shape(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for (i, ((p, g), m)) in params.iter().zip(grads).zip(&self.first_moment).enumerate() {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(NumError::Shape(format!(
                    "adam slot {i}: param {:?}, grad {:?}, moment {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
            if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(NumError::NonFinite(format!("gradient slot {i} element {pos}")));
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let c = self.config;
        let b1 = S::from_f64_lossy(c.beta1);
        let b2 = S::from_f64_lossy(c.beta2);
        let eps = S::from_f64_lossy(c.epsilon);
        let lr = S::from_f64_lossy(lr);
        let bc1 = S::one() - b1.powi(t);
        let bc2 = S::one() - b2.powi(t);

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (S::one() - b1) * *gv;
                *vv = b2 * *vv + (S::one() - b2) * *gv * *gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

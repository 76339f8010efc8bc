//! ADAM with bias correction and a fixed learning rate.

use crate::error::{Error, Result};
use crate::model::{Model, ModelGrads};

pub const LEARNING_RATE: f64 = 0.0002;
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment estimates for every parameter, in [`Model::flat_parameters`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        AdamState {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
            lr: LEARNING_RATE,
            beta1: BETA1,
            beta2: BETA2,
            epsilon: EPSILON,
        }
    }

    /// Fresh state shaped like `model`'s parameters.
    pub fn for_model(model: &Model) -> Self {
        Self::new(model.parameter_count())
    }

    /// One update of `params` in place. Refuses non-finite gradients and
    /// leaves everything untouched in that case.
    pub fn step_flat<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut f64>,
        grads: &[f64],
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::dim(format!(
                "optimizer tracks {} parameters, got {} gradients",
                self.m.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient at parameter {i}; step refused"
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powf(self.t as f64);
        let c2 = 1.0 - self.beta2.powf(self.t as f64);
        let mut count = 0;
        for (((p, m), v), &g) in params
            .into_iter()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
            .zip(grads)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            count += 1;
        }
        debug_assert_eq!(count, grads.len());
        Ok(())
    }

    pub fn step(&mut self, model: &mut Model, grads: &ModelGrads) -> Result<()> {
        if grads.layers.len() != model.layers().len()
            || grads
                .layers
                .iter()
                .zip(model.layers())
                .any(|(g, l)| g.kernel.len() != l.kernel().len() || g.bias.len() != l.bias().len())
        {
            return Err(Error::dim("gradient structure does not match model"));
        }
        let flat = grads.flatten();
        if let Some(i) = flat.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient at parameter {i}; step refused"
            )));
        }
        let params = model.layers_mut().iter_mut().flat_map(|l| {
            let (k, b) = l.kernel_and_bias_mut();
            k.iter_mut().chain(b.iter_mut())
        });
        self.step_flat(params, &flat)
    }
}

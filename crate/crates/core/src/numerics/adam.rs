use crate::error::{Error, Result};

/// Bias-corrected Adam optimizer state over one flat parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Defaults: β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(len: usize, learning_rate: f64) -> Result<Self> {
        Self::with_hyperparams(len, learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(
        len: usize,
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Result<Self> {
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(Error::config(format!("learning rate {learning_rate} must be non-negative")));
        }
        if !(0.0 < beta1 && beta1 < 1.0) || !(0.0 < beta2 && beta2 < 1.0) {
            return Err(Error::config("beta1 and beta2 must lie in (0, 1)"));
        }
        if !(epsilon > 0.0 && epsilon <= 1e-3) {
            return Err(Error::config("epsilon must lie in (0, 1e-3]"));
        }
        Ok(Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            learning_rate,
            beta1,
            beta2,
            epsilon,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    /// Applies one update in place and advances the step counter.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::contract(format!(
                "adam state holds {} moments but got {} params and {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric("adam received a non-finite gradient"));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let correction1 = 1.0 - self.beta1.powi(t);
        let correction2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }

    /// Worst-case `|Δp| / lr` after `t` steps over all gradient sequences.
    ///
    /// From Cauchy-Schwarz on the moment sums; equals 1 at `t = 1` and
    /// grows toward `(1-β1)/sqrt((1-β2)(1-β1²/β2))` for long runs.
    pub fn step_bound(&self, t: u64) -> f64 {
        let ratio = self.beta1 * self.beta1 / self.beta2;
        let geometric: f64 = (0..t as i32).map(|k| ratio.powi(k)).sum();
        (1.0 - self.beta1) * (1.0 - self.beta2.powi(t as i32)).sqrt()
            / ((1.0 - self.beta1.powi(t as i32)) * (1.0 - self.beta2).sqrt())
            * geometric.sqrt()
    }
}

//! Noise-schedule arithmetic: the forward diffusion coefficients, the
//! sigma(eta) family interpolating between deterministic and ancestral
//! sampling, and the strided inference subsequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Serialized schedule parameters (the JSON form used in experiment configs).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub t_train: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub infer_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            t_train: 1000,
            beta_min: 1e-4,
            beta_max: 2e-2,
            infer_steps: 50,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.t_train, self.beta_min, self.beta_max, self.infer_steps)
    }
}

/// Linear-beta diffusion schedule with a uniformly strided inference
/// subsequence. `alpha_bar(t)` is the cumulative signal coefficient, with
/// `alpha_bar(0) = 1`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_train: usize,
    beta: Vec<f64>,      // beta[t-1] is the step-t variance
    alpha_bar: Vec<f64>, // alpha_bar[t], t = 0..=T
    infer_steps: Vec<usize>,
}

impl NoiseSchedule {
    /// Builds a schedule from a linear beta ramp. The inference subsequence
    /// is uniformly strided, descending from `T` toward 0.
    pub fn build(t_train: usize, beta_min: f64, beta_max: f64, infer_count: usize) -> Result<Self> {
        if t_train == 0 || !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "invalid schedule: T={t_train}, beta in [{beta_min}, {beta_max}]"
            )));
        }
        if infer_count == 0 || infer_count > t_train {
            return Err(Error::Config(format!(
                "infer_steps {infer_count} must be in 1..={t_train}"
            )));
        }
        let mut beta = Vec::with_capacity(t_train);
        for i in 0..t_train {
            let frac = if t_train == 1 {
                0.0
            } else {
                i as f64 / (t_train - 1) as f64
            };
            beta.push(beta_min + frac * (beta_max - beta_min));
        }
        let mut alpha_bar = Vec::with_capacity(t_train + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for b in &beta {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        if alpha_bar[t_train] >= 0.01 {
            return Err(Error::Config(format!(
                "terminal alpha_bar {} >= 0.01; raise beta_max or T",
                alpha_bar[t_train]
            )));
        }
        let stride = t_train / infer_count;
        let infer_steps: Vec<usize> = (1..=infer_count).rev().map(|i| i * stride).collect();
        Ok(NoiseSchedule {
            t_train,
            beta,
            alpha_bar,
            infer_steps,
        })
    }

    pub fn t_train(&self) -> usize {
        self.t_train
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// Cumulative signal coefficient; `t` may be 0 (returns 1).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Strictly decreasing inference timesteps; the final step goes to 0.
    pub fn infer_steps(&self) -> &[usize] {
        &self.infer_steps
    }

    /// `(t, t_prev)` pairs visited by a full sampling pass, highest noise
    /// first; the last pair steps to 0.
    pub fn infer_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::with_capacity(self.infer_steps.len());
        for (i, &t) in self.infer_steps.iter().enumerate() {
            let t_prev = self.infer_steps.get(i + 1).copied().unwrap_or(0);
            pairs.push((t, t_prev));
        }
        pairs
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_train {
            return Err(Error::TimestepRange {
                t,
                t_max: self.t_train,
            });
        }
        Ok(())
    }

    /// Forward diffusion: `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        x0.same_shape(eps, "q_sample")?;
        let abar = self.alpha_bar(t);
        let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
        x0.zip_map(eps, "q_sample", |x, e| a * x + b * e)
    }

    /// The sigma(eta) of the sampling family:
    /// `eta * sqrt((1 - abar_prev) / (1 - abar_t)) * sqrt(1 - abar_t / abar_prev)`.
    /// Zero gives the deterministic sampler, one the ancestral one. Computed
    /// as `eta * sigma(1)` so linearity in eta is exact.
    pub fn sigma(&self, t: usize, t_prev: usize, eta: f64) -> f64 {
        debug_assert!(t_prev < t);
        let at = self.alpha_bar(t);
        let ap = self.alpha_bar(t_prev);
        eta * (((1.0 - ap) / (1.0 - at)).sqrt() * (1.0 - at / ap).sqrt())
    }
}

//! Closed-form denoiser for an isotropic Gaussian-mixture data distribution.
//!
//! Diffusing a mixture `sum_k w_k N(mu_k, s^2 I)` keeps it a mixture with
//! component means `sqrt(abar_t) mu_k` and shared variance
//! `abar_t s^2 + 1 - abar_t`, so the exact score — and therefore the exact
//! noise prediction — is available in closed form. This is the oracle the
//! sampling machinery is verified against, and the generative prior for the
//! procedural editing tasks.

use serde::{Deserialize, Serialize};

use crate::denoiser::{AttentionHooks, ConditionBundle, Denoiser, EpsOutput};
use crate::error::{Error, Result};
use crate::oracle::log_sum_exp;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Isotropic Gaussian-mixture prior: weights, component means, shared std.
#[derive(Debug, Clone)]
pub struct GmmPrior {
    weights: Vec<f64>,
    means: Vec<Tensor>,
    std: f64,
    shape: Vec<usize>,
}

impl GmmPrior {
    pub fn new(weights: Vec<f64>, means: Vec<Tensor>, std: f64) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() {
            return Err(Error::Config(format!(
                "{} weights for {} means",
                weights.len(),
                means.len()
            )));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Config("negative mixture weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}")));
        }
        if std <= 0.0 {
            return Err(Error::Config(format!("component std {std} must be > 0")));
        }
        let shape = means[0].shape().to_vec();
        for m in &means[1..] {
            m.same_shape(&means[0], "GmmPrior::new")?;
        }
        Ok(GmmPrior {
            weights,
            means,
            std,
            shape,
        })
    }

    /// Equal-weight mixture.
    pub fn uniform(means: Vec<Tensor>, std: f64) -> Result<Self> {
        let k = means.len();
        let mut weights = vec![1.0 / k as f64; k];
        // Make the weights sum to exactly 1 regardless of rounding.
        let sum: f64 = weights.iter().sum();
        weights[0] += 1.0 - sum;
        GmmPrior::new(weights, means, std)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Tensor] {
        &self.means
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    /// Draws `x0 = mu_k + s * xi` with `k ~ weights`, `xi ~ N(0, I)`.
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> Tensor {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let noise = Tensor::randn(&self.shape, rng);
        self.means[k]
            .zip_map(&noise, "GmmPrior::sample", |m, n| m + self.std * n)
            .expect("shape invariant")
    }

    /// Posterior component responsibilities at `z_t`, log-sum-exp stabilized.
    fn responsibilities(&self, schedule: &NoiseSchedule, z_t: &Tensor, t: usize) -> Vec<f64> {
        let abar = schedule.alpha_bar(t);
        let var = abar * self.std * self.std + (1.0 - abar);
        debug_assert!(var > 0.0);
        let scale = abar.sqrt();
        let mut logits = Vec::with_capacity(self.weights.len());
        for (w, mu) in self.weights.iter().zip(&self.means) {
            let d2: f64 = z_t
                .data()
                .iter()
                .zip(mu.data())
                .map(|(z, m)| {
                    let d = z - scale * m;
                    d * d
                })
                .sum();
            logits.push(w.ln() - d2 / (2.0 * var));
        }
        let lse = log_sum_exp(&logits);
        logits.iter().map(|l| (l - lse).exp()).collect()
    }

    /// Exact noise prediction `-sqrt(1 - abar_t) * grad log q_t(z_t)` for the
    /// diffused mixture.
    pub fn analytic_eps(&self, schedule: &NoiseSchedule, z_t: &Tensor, t: usize) -> Result<Tensor> {
        if z_t.shape() != self.shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "analytic_eps",
                lhs: z_t.shape().to_vec(),
                rhs: self.shape.clone(),
            });
        }
        if t == 0 || t > schedule.t_train() {
            return Err(Error::TimestepRange {
                t,
                t_max: schedule.t_train(),
            });
        }
        let abar = schedule.alpha_bar(t);
        let var = abar * self.std * self.std + (1.0 - abar);
        let scale = abar.sqrt();
        let resp = self.responsibilities(schedule, z_t, t);

        // Posterior-weighted component mean.
        let mut blend = vec![0.0; z_t.len()];
        for (r, mu) in resp.iter().zip(&self.means) {
            for (b, m) in blend.iter_mut().zip(mu.data()) {
                *b += r * m;
            }
        }
        // score = (sqrt(abar) * blend - z) / var; eps = -sqrt(1-abar) * score
        let coef = (1.0 - abar).sqrt() / var;
        let data: Vec<f64> = z_t
            .data()
            .iter()
            .zip(&blend)
            .map(|(z, b)| coef * (z - scale * b))
            .collect();
        Tensor::new(self.shape.clone(), data)
    }
}

/// [`Denoiser`] backed by the closed-form mixture score. Has no attention
/// layers, so capture and injection hooks are inert.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    prior: GmmPrior,
    schedule: NoiseSchedule,
}

impl AnalyticDenoiser {
    pub fn new(prior: GmmPrior, schedule: NoiseSchedule) -> Self {
        AnalyticDenoiser { prior, schedule }
    }

    pub fn prior(&self) -> &GmmPrior {
        &self.prior
    }
}

impl Denoiser for AnalyticDenoiser {
    fn predict_eps(
        &self,
        z_t: &Tensor,
        t: usize,
        _cond: &ConditionBundle,
        _hooks: &AttentionHooks,
    ) -> Result<EpsOutput> {
        Ok(EpsOutput {
            eps: self.prior.analytic_eps(&self.schedule, z_t, t)?,
            captured: Vec::new(),
        })
    }

    fn latent_shape(&self) -> &[usize] {
        self.prior.shape()
    }
}

/// Procedural prior over blob images: one mixture component per grid
/// position, each mean a Gaussian bump rendered at that position.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobGridSpec {
    pub image_size: usize,
    /// Inclusive start and exclusive end of the center-position grid.
    pub grid_min: usize,
    pub grid_max: usize,
    /// Grid spacing in pixels.
    pub grid_step: usize,
    pub blob_sigma: f64,
    pub amplitude: f64,
    pub component_std: f64,
}

impl Default for BlobGridSpec {
    fn default() -> Self {
        BlobGridSpec {
            image_size: 32,
            grid_min: 6,
            grid_max: 26,
            grid_step: 1,
            blob_sigma: 2.0,
            amplitude: 1.0,
            component_std: 0.08,
        }
    }
}

/// Renders a Gaussian bump centered at `(cx, cy)`.
pub fn render_blob(size: usize, cx: f64, cy: f64, sigma: f64, amplitude: f64) -> Tensor {
    let mut img = Tensor::zeros(&[size, size]);
    for r in 0..size {
        for c in 0..size {
            let dx = c as f64 - cx;
            let dy = r as f64 - cy;
            img.data_mut()[r * size + c] =
                amplitude * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
    img
}

impl BlobGridSpec {
    pub fn build_prior(&self) -> Result<GmmPrior> {
        if self.grid_min >= self.grid_max || self.grid_max > self.image_size || self.grid_step == 0
        {
            return Err(Error::Config(format!(
                "bad blob grid [{}, {}) step {}",
                self.grid_min, self.grid_max, self.grid_step
            )));
        }
        let mut means = Vec::new();
        let mut cy = self.grid_min;
        while cy < self.grid_max {
            let mut cx = self.grid_min;
            while cx < self.grid_max {
                means.push(render_blob(
                    self.image_size,
                    cx as f64,
                    cy as f64,
                    self.blob_sigma,
                    self.amplitude,
                ));
                cx += self.grid_step;
            }
            cy += self.grid_step;
        }
        GmmPrior::uniform(means, self.component_std)
    }
}

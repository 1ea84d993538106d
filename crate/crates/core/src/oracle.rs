//! Independent verification oracles.
//!
//! Everything here is deliberately written from first principles, separate
//! from the implementation paths it checks: central finite differences for
//! gradients, log-sum-exp mixture densities for the analytic denoiser, the
//! textbook posterior-variance grouping for the DDPM limit, and plain moment
//! estimators for sampler statistics. The verification suites and the test
//! targets both go through this module.

use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Central finite-difference gradient of a scalar function at `x`.
pub fn finite_diff_grad(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * h);
    }
    g
}

/// Norm-wise relative error `||a - b|| / max(||b||, floor)`.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / b.norm().max(1e-12)
}

/// Log density of the diffused mixture at timestep `t`,
/// `log sum_k w_k N(z; sqrt(abar_t) mu_k, (abar_t s^2 + 1 - abar_t) I)`,
/// evaluated by log-sum-exp. Used to cross-check the closed-form score by
/// finite differences.
pub fn gmm_log_density(
    weights: &[f64],
    means: &[Tensor],
    std: f64,
    schedule: &NoiseSchedule,
    z: &Tensor,
    t: usize,
) -> f64 {
    let abar = schedule.alpha_bar(t);
    let var = abar * std * std + (1.0 - abar);
    let dim = z.len() as f64;
    let log_norm = -0.5 * dim * (2.0 * std::f64::consts::PI * var).ln();
    let scale = abar.sqrt();
    let mut terms: Vec<f64> = Vec::with_capacity(weights.len());
    for (w, mu) in weights.iter().zip(means) {
        let d2: f64 = z
            .data()
            .iter()
            .zip(mu.data())
            .map(|(zi, mi)| {
                let d = zi - scale * mi;
                d * d
            })
            .sum();
        terms.push(w.ln() + log_norm - d2 / (2.0 * var));
    }
    log_sum_exp(&terms)
}

pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let mx = terms.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()
}

/// DDPM posterior standard deviation for a (possibly strided) step pair,
/// via the textbook grouping `beta_tilde = (1 - abar_prev) * beta_eff / (1 - abar_t)`
/// with `beta_eff = 1 - abar_t / abar_prev`.
pub fn ddpm_posterior_std(schedule: &NoiseSchedule, t: usize, t_prev: usize) -> f64 {
    let at = schedule.alpha_bar(t);
    let ap = schedule.alpha_bar(t_prev);
    let beta_eff = 1.0 - at / ap;
    ((1.0 - ap) * beta_eff / (1.0 - at)).sqrt()
}

/// Sample mean and covariance (unbiased) of row vectors.
pub fn moments(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = samples.len();
    let d = samples[0].len();
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for s in samples {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (s[i] - mean[i]) * (s[j] - mean[j]);
            }
        }
    }
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= (n - 1) as f64;
        }
    }
    (mean, cov)
}

/// Intensity centroid `(x, y)` over pixels at or above half the peak value.
/// The standard blob-position measure used by the editing metrics.
pub fn blob_centroid(image: &Tensor) -> Option<(f64, f64)> {
    let (h, w) = image.dims2().ok()?;
    let peak = image
        .data()
        .iter()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if peak <= 0.0 {
        return None;
    }
    let thresh = 0.5 * peak;
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            let v = image.at2(r, c);
            if v >= thresh {
                sx += c as f64 * v;
                sy += r as f64 * v;
                sw += v;
            }
        }
    }
    Some((sx / sw, sy / sw))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_gradient_of_quadratic() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff_grad(&x, 1e-5, |x| x.data().iter().map(|v| v * v).sum());
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - 2.0 * xi).abs() < 1e-9);
        }
    }

    #[test]
    fn moments_of_fixed_points() {
        let samples = vec![
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.0, 2.0],
            vec![0.0, -2.0],
        ];
        let (mean, cov) = moments(&samples);
        assert!(mean[0].abs() < 1e-12 && mean[1].abs() < 1e-12);
        assert!((cov[0][0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((cov[1][1] - 8.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn centroid_of_point_mass() {
        let mut img = Tensor::zeros(&[5, 5]);
        img.data_mut()[2 * 5 + 3] = 1.0;
        let (cx, cy) = blob_centroid(&img).unwrap();
        assert_eq!((cx, cy), (3.0, 2.0));
    }
}

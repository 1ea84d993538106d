//! Denoising training: plain SGD on the squared noise-prediction error with
//! uniformly sampled timesteps and Gaussian noise.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::denoiser::{AttentionHooks, Denoiser, TinyAttentionDenoiser};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch: 32,
            lr: 1e-2,
            seed: 0,
        }
    }
}

/// Trains the denoiser in place; returns the per-step loss curve.
/// Deterministic given the seed. A non-finite loss aborts with a training
/// error naming the step.
pub fn train_denoiser(
    model: &mut TinyAttentionDenoiser,
    data: &Dataset,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Config("empty training dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps);
    let hooks = AttentionHooks::default();
    let label_tokens = model.config().label_tokens;
    let img_shape = [model.config().image_size, model.config().image_size];

    for step in 0..cfg.steps {
        let step_result = (|| -> Result<f64> {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let mut loss_acc = None;
            for _ in 0..cfg.batch {
                let i = rng.gen_range(0..data.len());
                let t = rng.gen_range(1..=schedule.t_train());
                let eps = Tensor::randn(&img_shape, &mut rng);
                let z_t = schedule.q_sample(&data.images[i], t, &eps)?;

                let z = tape.leaf(z_t);
                let text = tape.slice_rows(
                    bound["label_embed"],
                    data.labels[i] * label_tokens,
                    label_tokens,
                )?;
                let mut captured = Vec::new();
                let pred = model.forward_on(
                    &mut tape,
                    &bound,
                    z,
                    t,
                    text,
                    None,
                    0.0,
                    &hooks,
                    &mut captured,
                )?;
                let target = tape.leaf(eps);
                let diff = tape.sub(pred, target)?;
                let sq = tape.mul(diff, diff)?;
                let sample_loss = tape.mean(sq)?;
                loss_acc = Some(match loss_acc {
                    None => sample_loss,
                    Some(acc) => tape.add(acc, sample_loss)?,
                });
            }
            let total = tape.scale(loss_acc.expect("batch > 0"), 1.0 / cfg.batch as f64)?;
            let loss = tape.value(total).item()?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            let grads = tape.backward(total)?;
            let mut table = BTreeMap::new();
            for (name, var) in &bound {
                table.insert(name.clone(), grads.wrt(&tape, *var)?);
            }
            model.apply_grads(&table, cfg.lr)?;
            Ok(loss)
        })();
        match step_result {
            Ok(loss) => curve.push(loss),
            Err(e) => {
                return Err(Error::Training {
                    step,
                    what: e.to_string(),
                })
            }
        }
    }
    Ok(curve)
}

/// Mean noise-prediction loss over a dataset, with `draws` (t, eps) draws per
/// sample. Used for held-out evaluation; deterministic given the seed.
pub fn eval_eps_loss(
    model: &TinyAttentionDenoiser,
    data: &Dataset,
    schedule: &NoiseSchedule,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hooks = AttentionHooks::default();
    let img_shape = [model.config().image_size, model.config().image_size];
    let mut total = 0.0;
    let mut count = 0usize;
    for (img, &label) in data.images.iter().zip(&data.labels) {
        for _ in 0..draws {
            let t = rng.gen_range(1..=schedule.t_train());
            let eps = Tensor::randn(&img_shape, &mut rng);
            let z_t = schedule.q_sample(img, t, &eps)?;
            let cond = crate::denoiser::ConditionBundle {
                text_tokens: model.label_tokens(label)?,
                image_tokens: None,
                cfg_scale: 1.0,
                gamma: 0.0,
            };
            let out = model.predict_eps(&z_t, t, &cond, &hooks)?;
            total += out.eps.mse(&eps)?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_blobs;
    use crate::denoiser::TinyDenoiserConfig;

    fn tiny_cfg() -> TinyDenoiserConfig {
        TinyDenoiserConfig {
            image_size: 8,
            patch_size: 4,
            width: 8,
            blocks: 2,
            ff_mult: 2,
            n_classes: 3,
            label_tokens: 2,
        }
    }

    #[test]
    fn zero_steps_leaves_model_unchanged() {
        let mut model = TinyAttentionDenoiser::new(tiny_cfg(), 0).unwrap();
        let before = model.params().clone();
        let data = generate_blobs(4, 8, 0);
        let schedule = NoiseSchedule::build(1000, 1e-4, 2e-2, 50).unwrap();
        let curve = train_denoiser(
            &mut model,
            &data,
            &schedule,
            &TrainConfig {
                steps: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(curve.is_empty());
        assert_eq!(model.params(), &before);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let data = generate_blobs(32, 8, 1);
        let schedule = NoiseSchedule::build(1000, 1e-4, 2e-2, 50).unwrap();
        let cfg = TrainConfig {
            steps: 60,
            batch: 8,
            lr: 5e-3,
            seed: 7,
        };
        let mut m1 = TinyAttentionDenoiser::new(tiny_cfg(), 0).unwrap();
        let c1 = train_denoiser(&mut m1, &data, &schedule, &cfg).unwrap();
        let mut m2 = TinyAttentionDenoiser::new(tiny_cfg(), 0).unwrap();
        let c2 = train_denoiser(&mut m2, &data, &schedule, &cfg).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(m1.params(), m2.params());
        let head: f64 = c1[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = c1[c1.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "loss should drop: {head} -> {tail}");
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        // Loss at exactly predicted noise is the squared-error minimum, 0.
        let eps = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        assert_eq!(eps.mse(&eps).unwrap(), 0.0);
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut model = TinyAttentionDenoiser::new(tiny_cfg(), 0).unwrap();
        let data = generate_blobs(0, 8, 0);
        let schedule = NoiseSchedule::build(1000, 1e-4, 2e-2, 50).unwrap();
        assert!(train_denoiser(&mut model, &data, &schedule, &TrainConfig::default()).is_err());
    }

    #[test]
    fn divergence_is_a_training_error_naming_the_step() {
        let mut model = TinyAttentionDenoiser::new(tiny_cfg(), 0).unwrap();
        let data = generate_blobs(8, 8, 0);
        let schedule = NoiseSchedule::build(1000, 1e-4, 2e-2, 50).unwrap();
        let cfg = TrainConfig {
            steps: 200,
            batch: 4,
            lr: 1e9,
            seed: 0,
        };
        match train_denoiser(&mut model, &data, &schedule, &cfg) {
            Err(crate::error::Error::Training { step, .. }) => {
                assert!(step < 200, "diverged at step {step}");
            }
            other => panic!("expected training divergence, got {other:?}"),
        }
    }

    #[test]
    fn concurrent_inference_is_pure() {
        // Models are immutable during inference and shareable across
        // threads; concurrent predictions match the serial ones bit for bit.
        let model = std::sync::Arc::new(TinyAttentionDenoiser::new(tiny_cfg(), 3).unwrap());
        let mut rng = crate::test_rng(5);
        let z = Tensor::randn(&[8, 8], &mut rng);
        let cond = crate::denoiser::ConditionBundle {
            text_tokens: model.label_tokens(0).unwrap(),
            image_tokens: None,
            cfg_scale: 1.0,
            gamma: 0.0,
        };
        let serial = model
            .predict_eps(&z, 77, &cond, &AttentionHooks::default())
            .unwrap()
            .eps;
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let model = std::sync::Arc::clone(&model);
                let z = z.clone();
                let cond = cond.clone();
                std::thread::spawn(move || {
                    model
                        .predict_eps(&z, 77, &cond, &AttentionHooks::default())
                        .unwrap()
                        .eps
                })
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), serial);
        }
    }
}

//! Sampling machinery: the deterministic/stochastic step family, exact
//! inversion with memory-bank capture, regional SDE stepping, accurate
//! time-travel rollback, and the full editing loop that ties guidance,
//! visual cross-attention, and the image prompt together.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{cfg_combine, AttentionHooks, ConditionBundle, Denoiser, LayerKv};
use crate::error::{Error, Result};
use crate::guidance::{guided_eps, regional_gradient, EditSpec};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Per-timestep record captured during inversion: the source latent, the
/// optional reference latent, and per-layer attention keys/values of each.
#[derive(Debug, Clone)]
pub struct BankEntry {
    pub z_gud: Tensor,
    pub z_ref: Option<Tensor>,
    pub kv_gud: Vec<LayerKv>,
    pub kv_ref: Vec<LayerKv>,
}

/// Memory bank keyed by inference timestep. Lookups are exact; there is no
/// nearest-neighbor fallback.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    entries: BTreeMap<usize, BankEntry>,
    latent_shape: Vec<usize>,
}

impl MemoryBank {
    pub fn new(latent_shape: Vec<usize>) -> Self {
        MemoryBank {
            entries: BTreeMap::new(),
            latent_shape,
        }
    }

    pub fn insert(&mut self, t: usize, entry: BankEntry) {
        debug_assert_eq!(entry.z_gud.shape(), self.latent_shape.as_slice());
        self.entries.insert(t, entry);
    }

    pub fn entry(&self, t: usize) -> Result<&BankEntry> {
        self.entries.get(&t).ok_or(Error::MissingBankEntry(t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn timesteps(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn latent_shape(&self) -> &[usize] {
        &self.latent_shape
    }
}

/// All sampling knobs. Field names are the JSON config keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Guidance is applied within the first `n` inference steps.
    pub n: usize,
    /// Steps between guidance (and time-travel) applications.
    pub guidance_stride: usize,
    /// Regional SDE window: the first `tau_sde` inference steps.
    pub tau_sde: usize,
    /// Time-travel window: the first `tau_tt` inference steps.
    pub tau_tt: usize,
    /// Inner iterations per time-travel step.
    pub u: usize,
    /// SDE strength inside the edit mask.
    pub eta1: f64,
    /// SDE strength outside the edit mask.
    pub eta2: f64,
    /// Guidance learning-rate scale; the per-step rate is
    /// `guidance_lr * sqrt(1 - abar_t)`.
    pub guidance_lr: f64,
    pub cfg_scale: f64,
    /// Image-prompt weight in the fused cross-attention.
    pub gamma: f64,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n: 30,
            guidance_stride: 2,
            tau_sde: 25,
            tau_tt: 25,
            u: 3,
            eta1: 0.4,
            eta2: 0.2,
            guidance_lr: 0.4,
            cfg_scale: 5.0,
            gamma: 0.5,
            rng_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, infer_steps: usize) -> Result<()> {
        if !(0.0 <= self.eta2 && self.eta2 <= self.eta1 && self.eta1 <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= eta2 <= eta1 <= 1, got ({}, {})",
                self.eta1, self.eta2
            )));
        }
        if self.u == 0 {
            return Err(Error::Config("u must be >= 1".into()));
        }
        if self.n > infer_steps {
            return Err(Error::Config(format!(
                "guidance budget n={} exceeds {infer_steps} inference steps",
                self.n
            )));
        }
        if self.guidance_stride == 0 {
            return Err(Error::Config("guidance_stride must be >= 1".into()));
        }
        if self.tau_sde > infer_steps || self.tau_tt > infer_steps {
            return Err(Error::Config(format!(
                "tau_sde={} / tau_tt={} exceed {infer_steps} inference steps",
                self.tau_sde, self.tau_tt
            )));
        }
        Ok(())
    }
}

/// One sampling step:
/// `sqrt(abar_prev) * x0_hat + sqrt(1 - abar_prev - sigma^2) * eps + sigma * noise`
/// with `x0_hat = (z - sqrt(1 - abar_t) * eps) / sqrt(abar_t)`.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    z_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: usize,
    sigma: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    z_t.same_shape(eps, "ddim_step")?;
    let at = schedule.alpha_bar(t);
    let ap = schedule.alpha_bar(t_prev);
    let dir_sq = 1.0 - ap - sigma * sigma;
    if dir_sq < 0.0 {
        return Err(Error::Config(format!(
            "sigma {sigma} too large for step {t}->{t_prev} (eta too large)"
        )));
    }
    let c_x0 = (ap / at).sqrt();
    let c_eps = dir_sq.sqrt() - c_x0 * (1.0 - at).sqrt();
    let mut out = z_t.zip_map(eps, "ddim_step", |z, e| c_x0 * z + c_eps * e)?;
    if sigma > 0.0 {
        let noise = noise
            .ok_or_else(|| Error::Config("ddim_step: sigma > 0 requires a noise tensor".into()))?;
        out = out.zip_map(noise, "ddim_step", |o, n| o + sigma * n)?;
    }
    Ok(out)
}

/// Exact algebraic inverse of the deterministic step for a shared `eps`:
/// `z_t = sqrt(abar_t / abar_prev) * (z_prev - sqrt(1 - abar_prev) * eps) + sqrt(1 - abar_t) * eps`.
pub fn ddim_invert_step(
    schedule: &NoiseSchedule,
    z_prev: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: usize,
) -> Result<Tensor> {
    z_prev.same_shape(eps, "ddim_invert_step")?;
    let at = schedule.alpha_bar(t);
    let ap = schedule.alpha_bar(t_prev);
    let c = (at / ap).sqrt();
    let c_eps = (1.0 - at).sqrt() - c * (1.0 - ap).sqrt();
    z_prev.zip_map(eps, "ddim_invert_step", |z, e| c * z + c_eps * e)
}

/// Deterministic rollback used by time travel: the exact inverse of the
/// sigma = 0 step, reusing the cached noise prediction of the step being
/// undone.
pub fn time_travel_rollback(
    schedule: &NoiseSchedule,
    z_prev: &Tensor,
    cached_eps: &Tensor,
    t: usize,
    t_prev: usize,
) -> Result<Tensor> {
    ddim_invert_step(schedule, z_prev, cached_eps, t, t_prev)
}

fn predict(
    denoiser: &dyn Denoiser,
    z: &Tensor,
    t: usize,
    cond: &ConditionBundle,
    hooks: &AttentionHooks,
) -> Result<crate::denoiser::EpsOutput> {
    denoiser
        .predict_eps(z, t, cond, hooks)
        .map_err(|e| e.at_timestep(t))
}

/// (timestep, latent, captured keys/values) triple recorded per inversion
/// step.
type InversionRecord = (usize, Tensor, Vec<LayerKv>);

/// Runs one image up the inversion chain, capturing latents and attention
/// keys/values at every inference timestep.
fn invert_single(
    x0: &Tensor,
    cond: &ConditionBundle,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<(Tensor, Vec<InversionRecord>)> {
    let capture = denoiser.captures_attention();
    let hooks = if capture {
        AttentionHooks::capture()
    } else {
        AttentionHooks::default()
    };
    let mut records: Vec<(usize, Tensor, Vec<LayerKv>)> = Vec::new();
    let mut kv_pending: BTreeMap<usize, Vec<LayerKv>> = BTreeMap::new();
    let mut z = x0.clone();
    let pairs = schedule.infer_pairs();
    for &(t, t_prev) in pairs.iter().rev() {
        // Noise is re-evaluated at the current state. The first hop starts at
        // the clean image, where the target timestep provides the evaluation
        // point.
        let t_eval = if t_prev == 0 { t } else { t_prev };
        let out = predict(denoiser, &z, t_eval, cond, &hooks)?;
        if capture && t_prev != 0 {
            kv_pending.insert(t_prev, out.captured);
        }
        z = ddim_invert_step(schedule, &z, &out.eps, t, t_prev)?;
        records.push((t, z.clone(), Vec::new()));
    }
    if capture {
        // Keys/values for the terminal state come from one extra evaluation.
        let t_top = pairs[0].0;
        let out = predict(denoiser, &z, t_top, cond, &hooks)?;
        kv_pending.insert(t_top, out.captured);
        for (t, _, kv) in &mut records {
            if let Some(captured) = kv_pending.remove(t) {
                *kv = captured;
            }
        }
    }
    Ok((z, records))
}

/// Inverts an image to its terminal latent, building the memory bank. When a
/// reference image is given it runs through the same inversion and fills the
/// reference entries.
pub fn invert(
    x0: &Tensor,
    x0_ref: Option<&Tensor>,
    cond: &ConditionBundle,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<(Tensor, MemoryBank)> {
    let (z_t, records) = invert_single(x0, cond, denoiser, schedule)?;
    let mut bank = MemoryBank::new(x0.shape().to_vec());
    for (t, z, kv) in records {
        bank.insert(
            t,
            BankEntry {
                z_gud: z,
                z_ref: None,
                kv_gud: kv,
                kv_ref: Vec::new(),
            },
        );
    }
    if let Some(r) = x0_ref {
        let (_, ref_records) = invert_single(r, cond, denoiser, schedule)?;
        for (t, z, kv) in ref_records {
            let entry = bank.entries.get_mut(&t).expect("same timestep set");
            entry.z_ref = Some(z);
            entry.kv_ref = kv;
        }
    }
    Ok((z_t, bank))
}

/// Plain deterministic reconstruction from a terminal latent, with optional
/// visual cross-attention against a memory bank.
pub fn reconstruct(
    z_top: &Tensor,
    cond: &ConditionBundle,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    bank: Option<&MemoryBank>,
) -> Result<Tensor> {
    let mut z = z_top.clone();
    let uncond = cond.uncond();
    for (t, t_prev) in schedule.infer_pairs() {
        let inject_sets = bank_inject_sets(bank, denoiser, t)?;
        let hooks = AttentionHooks {
            capture: false,
            inject: inject_sets,
        };
        let eps = cfg_eps(denoiser, &z, t, cond, &uncond, &hooks)?;
        z = ddim_step(schedule, &z, &eps, t, t_prev, 0.0, None).map_err(|e| e.at_timestep(t))?;
    }
    Ok(z)
}

fn bank_inject_sets<'a>(
    bank: Option<&'a MemoryBank>,
    denoiser: &dyn Denoiser,
    t: usize,
) -> Result<Vec<&'a [LayerKv]>> {
    let mut sets: Vec<&[LayerKv]> = Vec::new();
    if let Some(bank) = bank {
        if denoiser.captures_attention() {
            let entry = bank.entry(t)?;
            sets.push(&entry.kv_gud);
            if !entry.kv_ref.is_empty() {
                sets.push(&entry.kv_ref);
            }
        }
    }
    Ok(sets)
}

fn cfg_eps(
    denoiser: &dyn Denoiser,
    z: &Tensor,
    t: usize,
    cond: &ConditionBundle,
    uncond: &ConditionBundle,
    hooks: &AttentionHooks,
) -> Result<Tensor> {
    let eps_c = predict(denoiser, z, t, cond, hooks)?.eps;
    if cond.cfg_scale == 1.0 {
        return Ok(eps_c);
    }
    let eps_u = predict(denoiser, z, t, uncond, hooks)?.eps;
    cfg_combine(&eps_u, &eps_c, cond.cfg_scale)
}

/// The regional SDE step: both mask branches share one standard-normal draw,
/// scaled by their respective sigma. Outside the SDE window both strengths
/// are zero and the step is the deterministic one.
#[allow(clippy::too_many_arguments)]
pub fn regional_sde_step<R: Rng>(
    schedule: &NoiseSchedule,
    z_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: usize,
    m_edit: &Tensor,
    eta1: f64,
    eta2: f64,
    in_tau_sde: bool,
    rng: &mut R,
) -> Result<Tensor> {
    z_t.same_shape(m_edit, "regional_sde_step")?;
    let (e1, e2) = if in_tau_sde { (eta1, eta2) } else { (0.0, 0.0) };
    let s1 = schedule.sigma(t, t_prev, e1);
    let s2 = schedule.sigma(t, t_prev, e2);
    let noise = if s1 > 0.0 || s2 > 0.0 {
        Some(Tensor::randn(z_t.shape(), rng))
    } else {
        None
    };
    let inside = ddim_step(schedule, z_t, eps, t, t_prev, s1, noise.as_ref())?;
    let outside = ddim_step(schedule, z_t, eps, t, t_prev, s2, noise.as_ref())?;
    let mut out = Tensor::zeros(z_t.shape());
    for i in 0..out.len() {
        let m = m_edit.data()[i];
        out.data_mut()[i] = if m == 0.0 {
            outside.data()[i]
        } else if m == 1.0 {
            inside.data()[i]
        } else {
            m * inside.data()[i] + (1.0 - m) * outside.data()[i]
        };
    }
    Ok(out)
}

/// Per-step record in the run log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub t: usize,
    pub t_prev: usize,
    pub guided: bool,
    pub tt_iterations: usize,
    pub sigma_inside: f64,
    pub sigma_outside: f64,
    pub e_edit: Option<f64>,
    pub e_content: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLog {
    pub sampler: SamplerConfig,
    pub infer_steps: usize,
    pub identity_edit: bool,
    pub steps: Vec<StepLog>,
}

pub struct EditOutput {
    pub image: Tensor,
    pub log: RunLog,
}

/// The full editing loop: inversion and bank building, then per step a
/// classifier-free noise prediction (with visual cross-attention when the
/// denoiser has attention layers); on guidance steps the regional energy
/// gradient steers the prediction and the regional SDE step advances the
/// latent, otherwise the deterministic step does; on time-travel steps the
/// inner loop re-steps after accurate rollback. The final latent is the
/// output image (identity decoder).
pub fn run_edit(
    x0: &Tensor,
    x0_ref: Option<&Tensor>,
    spec: &EditSpec,
    cond: &ConditionBundle,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<EditOutput> {
    let pairs = schedule.infer_pairs();
    cfg.validate(pairs.len())?;
    spec.validate(denoiser.latent_shape())?;
    if spec.uses_reference() && x0_ref.is_none() {
        return Err(Error::EditSpec(format!(
            "{:?} task needs a reference image",
            spec.task
        )));
    }
    let cond = ConditionBundle {
        cfg_scale: cfg.cfg_scale,
        gamma: cfg.gamma,
        ..cond.clone()
    };
    let uncond = cond.uncond();

    let (z_top, bank) = invert(x0, x0_ref, &cond, denoiser, schedule)?;
    let identity = spec.is_identity();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut z = z_top;
    let mut log_steps = Vec::with_capacity(pairs.len());

    for (i, &(t, t_prev)) in pairs.iter().enumerate() {
        let on_stride = i % cfg.guidance_stride == 0;
        let guided = !identity && i < cfg.n && on_stride;
        let in_tt = i < cfg.tau_tt && on_stride;
        let in_sde = i < cfg.tau_sde;
        let u_cur = if in_tt { cfg.u } else { 1 };

        let mut entry_log = StepLog {
            step: i,
            t,
            t_prev,
            guided,
            tt_iterations: u_cur,
            sigma_inside: 0.0,
            sigma_outside: 0.0,
            e_edit: None,
            e_content: None,
        };

        for u in 0..u_cur {
            let inject = bank_inject_sets(Some(&bank), denoiser, t)?;
            let hooks = AttentionHooks {
                capture: false,
                inject,
            };
            let eps = cfg_eps(denoiser, &z, t, &cond, &uncond, &hooks)?;
            let (eps_used, z_next) = if guided {
                let report = regional_gradient(&z, &bank, spec, t).map_err(|e| e.at_timestep(t))?;
                let lr = cfg.guidance_lr * (1.0 - schedule.alpha_bar(t)).sqrt();
                let eps_g = guided_eps(&eps, &report, lr)?;
                let z_next = regional_sde_step(
                    schedule, &z, &eps_g, t, t_prev, &spec.mask, cfg.eta1, cfg.eta2, in_sde,
                    &mut rng,
                )
                .map_err(|e| e.at_timestep(t))?;
                entry_log.e_edit = Some(report.e_edit);
                entry_log.e_content = Some(report.e_content);
                entry_log.sigma_inside =
                    schedule.sigma(t, t_prev, if in_sde { cfg.eta1 } else { 0.0 });
                entry_log.sigma_outside =
                    schedule.sigma(t, t_prev, if in_sde { cfg.eta2 } else { 0.0 });
                (eps_g, z_next)
            } else {
                let z_next = ddim_step(schedule, &z, &eps, t, t_prev, 0.0, None)
                    .map_err(|e| e.at_timestep(t))?;
                (eps, z_next)
            };
            if u + 1 < u_cur {
                z = time_travel_rollback(schedule, &z_next, &eps_used, t, t_prev)?;
            } else {
                z = z_next;
            }
        }
        log_steps.push(entry_log);
    }

    Ok(EditOutput {
        image: z,
        log: RunLog {
            sampler: cfg.clone(),
            infer_steps: pairs.len(),
            identity_edit: identity,
            steps: log_steps,
        },
    })
}

//! Command implementations behind the `smudge` binary: dataset generation,
//! model training, inversion, the editing tasks, verification suites, and
//! metrics aggregation. Everything is driven by JSON configs plus flags and
//! is reproducible from config + seed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use smudge_core::data::{generate_blobs, Dataset};
use smudge_core::denoiser::{
    render_blob, AnalyticDenoiser, AttentionHooks, BlobGridSpec, ConditionBundle, Denoiser,
    EpsOutput, TinyAttentionDenoiser, TinyDenoiserConfig, TrainConfig,
};
use smudge_core::error::{Error, Result};
use smudge_core::guidance::{self, EditSpec, EditTask};
use smudge_core::io;
use smudge_core::oracle;
use smudge_core::prompt::{
    load_prompt_encoder, save_prompt_encoder, train_prompt_encoder, ImageTokenizer,
    PromptTrainConfig, QFormerConfig, QFormerEncoder,
};
use smudge_core::sampler::{invert, reconstruct, run_edit, SamplerConfig};
use smudge_core::schedule::{NoiseSchedule, ScheduleConfig};
use smudge_core::tensor::Tensor;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "SMUDGE_OUT_ROOT";

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Either a TNSR file path or procedural blob parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageSource {
    Path(PathBuf),
    Blob {
        size: usize,
        cx: f64,
        cy: f64,
        #[serde(default = "default_blob_sigma")]
        sigma: f64,
        #[serde(default = "default_amplitude")]
        amplitude: f64,
    },
}

fn default_blob_sigma() -> f64 {
    2.0
}

fn default_amplitude() -> f64 {
    1.0
}

impl ImageSource {
    pub fn load(&self, base: &Path) -> Result<Tensor> {
        match self {
            ImageSource::Path(p) => io::read_tensor(&resolve(base, p)),
            ImageSource::Blob {
                size,
                cx,
                cy,
                sigma,
                amplitude,
            } => Ok(render_blob(*size, *cx, *cy, *sigma, *amplitude)),
        }
    }
}

/// Which denoiser backs a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DenoiserSpec {
    /// Closed-form blob-grid denoiser.
    Analytic {
        #[serde(default)]
        blob_grid: BlobGridSpec,
    },
    /// Trained attention denoiser, optionally with a prompt encoder.
    Tiny {
        bundle: PathBuf,
        #[serde(default)]
        prompt_encoder: Option<PathBuf>,
    },
}

pub enum AnyDenoiser {
    Analytic(AnalyticDenoiser),
    Tiny(Box<TinyAttentionDenoiser>),
}

impl Denoiser for AnyDenoiser {
    fn predict_eps(
        &self,
        z_t: &Tensor,
        t: usize,
        cond: &ConditionBundle,
        hooks: &AttentionHooks,
    ) -> Result<EpsOutput> {
        match self {
            AnyDenoiser::Analytic(d) => d.predict_eps(z_t, t, cond, hooks),
            AnyDenoiser::Tiny(d) => d.predict_eps(z_t, t, cond, hooks),
        }
    }

    fn latent_shape(&self) -> &[usize] {
        match self {
            AnyDenoiser::Analytic(d) => d.latent_shape(),
            AnyDenoiser::Tiny(d) => d.latent_shape(),
        }
    }

    fn captures_attention(&self) -> bool {
        match self {
            AnyDenoiser::Analytic(d) => d.captures_attention(),
            AnyDenoiser::Tiny(d) => d.captures_attention(),
        }
    }
}

/// A (source, destination) coordinate pair in the serialized region map.
pub type RegionPair = ((usize, usize), (usize, usize));

/// The task block of an experiment config, following the serialized edit-spec
/// layout (task, mask path, region-map pairs, reference id) with optional
/// builder parameters in place of an explicit mask and map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditSpecFile {
    pub task: String,
    #[serde(default)]
    pub mask: Option<PathBuf>,
    #[serde(default)]
    pub region_map: Option<Vec<RegionPair>>,
    #[serde(default)]
    pub reference_id: Option<String>,
    #[serde(default)]
    pub src: Option<(usize, usize)>,
    #[serde(default)]
    pub dst: Option<(usize, usize)>,
    #[serde(default)]
    pub handle: Option<(usize, usize)>,
    #[serde(default)]
    pub target: Option<(usize, usize)>,
    #[serde(default)]
    pub center: Option<(usize, usize)>,
    #[serde(default)]
    pub ref_center: Option<(usize, usize)>,
    #[serde(default)]
    pub dst_center: Option<(usize, usize)>,
    #[serde(default)]
    pub object_radius: Option<f64>,
    #[serde(default)]
    pub mask_radius: Option<f64>,
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub scale: Option<f64>,
}

impl EditSpecFile {
    fn need<T: Copy>(v: Option<T>, what: &str, task: &str) -> Result<T> {
        v.ok_or_else(|| Error::Config(format!("{task} task needs `{what}`")))
    }

    pub fn resolve(&self, base: &Path, latent: (usize, usize)) -> Result<EditSpec> {
        if let (Some(mask_path), Some(map)) = (&self.mask, &self.region_map) {
            let task = match self.task.as_str() {
                "move" => EditTask::Move,
                "resize" => EditTask::Resize,
                "paste" => EditTask::Paste,
                "replace" => EditTask::Replace,
                "drag" => EditTask::Drag,
                other => return Err(Error::Config(format!("unknown task '{other}'"))),
            };
            let spec = EditSpec {
                task,
                mask: io::read_tensor(&resolve(base, mask_path))?,
                region_map: map.clone(),
                reference_id: self.reference_id.clone(),
            };
            spec.validate(&[latent.0, latent.1])?;
            return Ok(spec);
        }
        match self.task.as_str() {
            "identity" => Ok(guidance::identity_task(latent)),
            "move" => guidance::move_task(
                latent,
                Self::need(self.src, "src", "move")?,
                Self::need(self.dst, "dst", "move")?,
                self.object_radius.unwrap_or(4.0),
                self.mask_radius.unwrap_or(5.0),
            ),
            "drag" => guidance::drag_task(
                latent,
                Self::need(self.handle, "handle", "drag")?,
                Self::need(self.target, "target", "drag")?,
            ),
            "resize" => guidance::resize_task(
                latent,
                Self::need(self.center, "center", "resize")?,
                self.object_radius.unwrap_or(4.0),
                Self::need(self.scale, "scale", "resize")?,
            ),
            "paste" => guidance::paste_task(
                latent,
                Self::need(self.ref_center, "ref_center", "paste")?,
                Self::need(self.dst_center, "dst_center", "paste")?,
                self.radius.unwrap_or(4.0),
                self.reference_id.clone().unwrap_or_else(|| "ref".into()),
            ),
            "replace" => guidance::replace_task(
                latent,
                Self::need(self.center, "center", "replace")?,
                self.radius.unwrap_or(4.0),
                self.reference_id.clone().unwrap_or_else(|| "ref".into()),
            ),
            other => Err(Error::Config(format!(
                "unknown task '{other}' (and no explicit mask/region_map given)"
            ))),
        }
    }
}

/// One experiment: schedule, denoiser, sampler knobs, task, and images.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserSpec,
    #[serde(default)]
    pub sampler: SamplerConfig,
    pub edit_spec: EditSpecFile,
    pub image: ImageSource,
    #[serde(default)]
    pub reference_image: Option<ImageSource>,
    /// Class label fed to the text-conditioning path of a trained denoiser.
    #[serde(default)]
    pub label_class: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    /// Loads the config and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let cfg: ExperimentConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut referenced: Vec<PathBuf> = Vec::new();
        if let ImageSource::Path(p) = &cfg.image {
            referenced.push(resolve(&base, p));
        }
        if let Some(ImageSource::Path(p)) = &cfg.reference_image {
            referenced.push(resolve(&base, p));
        }
        if let Some(mask) = &cfg.edit_spec.mask {
            referenced.push(resolve(&base, mask));
        }
        if let DenoiserSpec::Tiny {
            bundle,
            prompt_encoder,
        } = &cfg.denoiser
        {
            referenced.push(resolve(&base, bundle));
            if let Some(enc) = prompt_encoder {
                referenced.push(resolve(&base, enc));
            }
        }
        for p in referenced {
            if !p.exists() {
                return Err(Error::Config(format!(
                    "referenced file {} does not exist",
                    p.display()
                )));
            }
        }
        Ok((cfg, base))
    }

    pub fn out_dir(&self, config_path: &Path) -> PathBuf {
        if let Some(dir) = &self.out_dir {
            return dir.clone();
        }
        let stem = config_path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "run".into());
        match std::env::var(OUT_ROOT_ENV) {
            Ok(root) => PathBuf::from(root).join(stem),
            Err(_) => PathBuf::from("out").join(stem),
        }
    }

    pub fn build_denoiser(&self, base: &Path, schedule: &NoiseSchedule) -> Result<AnyDenoiser> {
        match &self.denoiser {
            DenoiserSpec::Analytic { blob_grid } => Ok(AnyDenoiser::Analytic(
                AnalyticDenoiser::new(blob_grid.build_prior()?, schedule.clone()),
            )),
            DenoiserSpec::Tiny { bundle, .. } => Ok(AnyDenoiser::Tiny(Box::new(
                TinyAttentionDenoiser::load(&resolve(base, bundle))?,
            ))),
        }
    }

    /// Builds the conditioning bundle: label tokens (and the image prompt
    /// when an encoder is configured).
    pub fn build_cond(
        &self,
        base: &Path,
        x0: &Tensor,
        den: &AnyDenoiser,
    ) -> Result<ConditionBundle> {
        match (den, &self.denoiser) {
            (AnyDenoiser::Tiny(model), DenoiserSpec::Tiny { prompt_encoder, .. }) => {
                let image_tokens = match prompt_encoder {
                    Some(enc_path) => {
                        let (tokenizer, encoder) = load_prompt_encoder(&resolve(base, enc_path))?;
                        Some(encoder.encode(&tokenizer.tokenize(x0)?)?)
                    }
                    None => None,
                };
                Ok(ConditionBundle {
                    text_tokens: model.label_tokens(self.label_class)?,
                    image_tokens,
                    cfg_scale: self.sampler.cfg_scale,
                    gamma: self.sampler.gamma,
                })
            }
            _ => Ok(ConditionBundle {
                text_tokens: Tensor::zeros(&[1, 4]),
                image_tokens: None,
                cfg_scale: self.sampler.cfg_scale,
                gamma: 0.0,
            }),
        }
    }
}

/// Generates a blob dataset on disk.
pub fn cmd_gen_data(out: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    let data = generate_blobs(count, size, seed);
    data.save(out)?;
    println!(
        "wrote {count} samples of {size}x{size} to {} (manifest.json + TNSR files)",
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, clap::Args)]
pub struct TrainDenoiserArgs {
    /// Dataset directory (from gen-data).
    #[arg(long)]
    pub data: PathBuf,
    /// Output model bundle path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub patch: usize,
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    /// Hold out every k-th sample for evaluation.
    #[arg(long, default_value_t = 8)]
    pub holdout: usize,
}

pub fn cmd_train_denoiser(args: &TrainDenoiserArgs) -> Result<()> {
    let data = Dataset::load(&args.data)?;
    let (train, held) = data.split_holdout(args.holdout);
    let schedule = ScheduleConfig::default().build()?;
    let cfg = TinyDenoiserConfig {
        image_size: data.image_size,
        patch_size: args.patch,
        width: args.width,
        n_classes: data.n_classes,
        ..Default::default()
    };
    let mut model = TinyAttentionDenoiser::new(cfg, args.seed)?;
    let initial = smudge_core::denoiser::eval_eps_loss(&model, &held, &schedule, 4, 99)?;
    println!(
        "training on {} samples ({} held out); initial held-out loss {initial:.4}",
        train.len(),
        held.len()
    );
    let t0 = Instant::now();
    let curve = smudge_core::denoiser::train_denoiser(
        &mut model,
        &train,
        &schedule,
        &TrainConfig {
            steps: args.steps,
            batch: args.batch,
            lr: args.lr,
            seed: args.seed,
        },
    )?;
    let final_loss = smudge_core::denoiser::eval_eps_loss(&model, &held, &schedule, 4, 99)?;
    println!(
        "trained {} steps in {:.0}s; held-out loss {final_loss:.4} ({:.1}% of initial)",
        args.steps,
        t0.elapsed().as_secs_f64(),
        100.0 * final_loss / initial
    );
    model.save(&args.out)?;
    write_json(&args.out.with_extension("losses.json"), &curve)?;
    println!("saved model to {}", args.out.display());
    Ok(())
}

#[derive(Debug, Clone, clap::Args)]
pub struct TrainPromptArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Frozen denoiser bundle.
    #[arg(long)]
    pub denoiser: PathBuf,
    /// Output encoder bundle path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    /// Probability of dropping the prompt image (classifier-free training).
    #[arg(long, default_value_t = 0.1)]
    pub drop_prob: f64,
    #[arg(long, default_value_t = 0.5)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub queries: usize,
    #[arg(long, default_value_t = 2)]
    pub submodules: usize,
    #[arg(long, default_value_t = 8)]
    pub holdout: usize,
}

pub fn cmd_train_prompt(args: &TrainPromptArgs) -> Result<()> {
    let data = Dataset::load(&args.data)?;
    let (train, held) = data.split_holdout(args.holdout);
    let schedule = ScheduleConfig::default().build()?;
    let denoiser = TinyAttentionDenoiser::load(&args.denoiser)?;
    let width = denoiser.config().width;
    let tokenizer = ImageTokenizer::new(data.image_size, 8, width, args.seed)?;
    let mut encoder = QFormerEncoder::new(
        QFormerConfig {
            queries: args.queries,
            width,
            submodules: args.submodules,
            ff_mult: 2,
        },
        args.seed,
    )?;
    let text_only = smudge_core::denoiser::eval_eps_loss(&denoiser, &held, &schedule, 4, 99)?;
    println!(
        "training prompt encoder on {} samples; text-only held-out loss {text_only:.4}",
        train.len()
    );
    let t0 = Instant::now();
    let curve = train_prompt_encoder(
        &mut encoder,
        &tokenizer,
        &denoiser,
        &train,
        &schedule,
        &PromptTrainConfig {
            steps: args.steps,
            batch: args.batch,
            lr: args.lr,
            drop_prob: args.drop_prob,
            gamma: args.gamma,
            seed: args.seed,
        },
    )?;
    let with_prompt = smudge_core::prompt::eval_prompt_loss(
        &encoder, &tokenizer, &denoiser, &held, &schedule, args.gamma, 4, 99,
    )?;
    println!(
        "trained {} steps in {:.0}s; held-out loss with prompt {with_prompt:.4} vs text-only {text_only:.4}",
        args.steps,
        t0.elapsed().as_secs_f64()
    );
    save_prompt_encoder(&args.out, &tokenizer, &encoder)?;
    write_json(&args.out.with_extension("losses.json"), &curve)?;
    println!("saved encoder to {}", args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct InvertReport {
    roundtrip_rel_mse: f64,
    bank_timesteps: Vec<usize>,
}

/// Inverts an image, writes the terminal latent and its reconstruction, and
/// reports the round-trip error.
pub fn cmd_invert(config_path: &Path) -> Result<()> {
    let (cfg, base) = ExperimentConfig::load(config_path)?;
    let schedule = cfg.schedule.build()?;
    let denoiser = cfg.build_denoiser(&base, &schedule)?;
    let x0 = cfg.image.load(&base)?;
    let cond = cfg.build_cond(&base, &x0, &denoiser)?;
    let out_dir = cfg.out_dir(config_path);
    ensure_dir(&out_dir)?;

    let (z_top, bank) = invert(&x0, None, &cond, &denoiser, &schedule)?;
    let rec = reconstruct(&z_top, &cond, &denoiser, &schedule, Some(&bank))?;
    let rel = rec.sub(&x0)?.data().iter().map(|v| v * v).sum::<f64>()
        / x0.data().iter().map(|v| v * v).sum::<f64>().max(1e-12);
    io::write_tensor(&out_dir.join("z_top.tnsr"), &z_top)?;
    io::write_tensor(&out_dir.join("reconstruction.tnsr"), &rec)?;
    io::write_pgm(&out_dir.join("reconstruction.pgm"), &rec)?;
    write_json(
        &out_dir.join("invert_log.json"),
        &InvertReport {
            roundtrip_rel_mse: rel,
            bank_timesteps: bank.timesteps().collect(),
        },
    )?;
    println!(
        "inverted {} -> {} (round-trip rel MSE {rel:.3e})",
        config_path.display(),
        out_dir.display()
    );
    Ok(())
}

/// Per-run result row appended to the metrics CSV.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub task: String,
    pub seed: u64,
    /// Centroid error in pixels for move/drag/resize; reference-minus-source
    /// cosine gain for paste/replace; out-of-mask MSE for identity.
    pub objective: f64,
    pub out_mask_mse: f64,
    pub wall_ms: u128,
}

fn append_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let fresh = !path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(fresh)
        .from_writer(file);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn masked_cosine(a: &Tensor, b: &Tensor, coords: &[usize]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for &i in coords {
        dot += a.data()[i] * b.data()[i];
        na += a.data()[i] * a.data()[i];
        nb += b.data()[i] * b.data()[i];
    }
    dot / (na.sqrt() * nb.sqrt() + 1e-12)
}

fn task_objective(
    spec_file: &EditSpecFile,
    spec: &EditSpec,
    x0: &Tensor,
    x_ref: Option<&Tensor>,
    output: &Tensor,
) -> f64 {
    let mask_coords: Vec<usize> = (0..spec.mask.len())
        .filter(|&i| spec.mask.data()[i] > 0.0)
        .collect();
    match spec.task {
        EditTask::Move | EditTask::Drag | EditTask::Resize => {
            let target = spec_file
                .dst
                .or(spec_file.target)
                .or(spec_file.center)
                .map(|(x, y)| (x as f64, y as f64));
            match (oracle::blob_centroid(output), target) {
                (Some((cx, cy)), Some((tx, ty))) => (cx - tx).hypot(cy - ty),
                _ => f64::NAN,
            }
        }
        EditTask::Paste | EditTask::Replace => {
            // Appearance gain: cosine of the edited region (against the
            // region-mapped reference content) minus cosine against the
            // original source content.
            let mut expected = x0.clone();
            if let Some(r) = x_ref {
                let w = spec.mask.shape()[1];
                for &((sx, sy), (dx, dy)) in &spec.region_map {
                    expected.data_mut()[dy * w + dx] = r.data()[sy * w + sx];
                }
            }
            let cos_ref = masked_cosine(output, &expected, &mask_coords);
            let cos_src = masked_cosine(output, x0, &mask_coords);
            cos_ref - cos_src
        }
    }
}

#[derive(Debug, Clone, clap::Args)]
pub struct EditArgs {
    /// Experiment config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Number of independent seeds to run (rng_seed, rng_seed+1, ...).
    #[arg(long, default_value_t = 1)]
    pub runs: u64,
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

pub fn cmd_edit(args: &EditArgs) -> Result<()> {
    let (cfg, base) = ExperimentConfig::load(&args.config)?;
    let schedule = cfg.schedule.build()?;
    let denoiser = cfg.build_denoiser(&base, &schedule)?;
    let x0 = cfg.image.load(&base)?;
    let x_ref = match &cfg.reference_image {
        Some(src) => Some(src.load(&base)?),
        None => None,
    };
    let latent = denoiser.latent_shape();
    let spec = cfg.edit_spec.resolve(&base, (latent[0], latent[1]))?;
    let cond = cfg.build_cond(&base, &x0, &denoiser)?;
    let out_dir = cfg.out_dir(&args.config);
    ensure_dir(&out_dir)?;

    // The resolved configuration rides along with the outputs so every run
    // is reproducible from the directory contents alone.
    write_json(&out_dir.join("config_resolved.json"), &cfg)?;

    let seeds: Vec<u64> = (0..args.runs).map(|k| cfg.sampler.rng_seed + k).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let results: Vec<Result<(u64, MetricsRow)>> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let run_cfg = SamplerConfig {
                    rng_seed: seed,
                    ..cfg.sampler.clone()
                };
                let t0 = Instant::now();
                let out = run_edit(
                    &x0,
                    x_ref.as_ref(),
                    &spec,
                    &cond,
                    &denoiser,
                    &schedule,
                    &run_cfg,
                )
                .map_err(|e| {
                    Error::Config(format!("{}: seed {seed}: {e}", args.config.display()))
                })?;
                let wall_ms = t0.elapsed().as_millis();
                io::write_tensor(&out_dir.join(format!("edit_seed{seed}.tnsr")), &out.image)?;
                io::write_pgm(&out_dir.join(format!("edit_seed{seed}.pgm")), &out.image)?;
                write_json(&out_dir.join(format!("runlog_seed{seed}.json")), &out.log)?;
                let objective = if out.log.identity_edit {
                    out.image.mse(&x0)?
                } else {
                    task_objective(&cfg.edit_spec, &spec, &x0, x_ref.as_ref(), &out.image)
                };
                let mut out_sq = 0.0;
                let mut out_n = 0.0;
                for i in 0..x0.len() {
                    if spec.mask.data()[i] == 0.0 {
                        let d = out.image.data()[i] - x0.data()[i];
                        out_sq += d * d;
                        out_n += 1.0;
                    }
                }
                Ok((
                    seed,
                    MetricsRow {
                        task: cfg.edit_spec.task.clone(),
                        seed,
                        objective,
                        out_mask_mse: if out_n > 0.0 { out_sq / out_n } else { 0.0 },
                        wall_ms,
                    },
                ))
            })
            .collect()
    });
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        rows.push(r?.1);
    }
    rows.sort_by_key(|r| r.seed);
    append_metrics(&out_dir.join("metrics.csv"), &rows)?;
    for row in &rows {
        println!(
            "task={} seed={} objective={:.4} out_mask_mse={:.3e} wall_ms={}",
            row.task, row.seed, row.objective, row.out_mask_mse, row.wall_ms
        );
    }
    println!("outputs in {}", out_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct VerifyReport {
    suites: Vec<smudge_core::verify::SuiteReport>,
    pass: bool,
}

/// Runs one verification suite (or `all`) and writes a machine-readable
/// report. Returns overall pass.
pub fn cmd_verify(suite: &str, out: Option<&Path>) -> Result<bool> {
    let names: Vec<&str> = if suite == "all" {
        smudge_core::verify::SUITES.to_vec()
    } else {
        vec![suite]
    };
    let mut suites = Vec::new();
    for name in names {
        let report = smudge_core::verify::run_suite(name)?;
        for c in &report.checks {
            println!(
                "[{}] {name}: {} (measured {:.3e}, threshold {:.3e})",
                if c.pass { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.threshold
            );
        }
        suites.push(report);
    }
    let pass = suites.iter().all(|s| s.pass);
    let report = VerifyReport { suites, pass };
    if let Some(path) = out {
        write_json(path, &report)?;
        println!("report written to {}", path.display());
    }
    Ok(pass)
}

#[derive(Debug, Default, Serialize)]
pub struct TaskStats {
    pub runs: usize,
    pub mean_objective: f64,
    pub mean_out_mask_mse: f64,
    pub mean_wall_ms: f64,
    pub success_rate: f64,
}

/// Aggregates a metrics CSV per task. Success means centroid error <= 1.5 px
/// for move/drag/resize and positive appearance gain for paste/replace.
pub fn cmd_stats(metrics: &Path, out: Option<&Path>) -> Result<()> {
    let mut reader = csv::Reader::from_path(metrics).map_err(|e| Error::Format(e.to_string()))?;
    let mut by_task: std::collections::BTreeMap<String, Vec<(f64, f64, f64)>> =
        std::collections::BTreeMap::new();
    for record in reader.deserialize::<std::collections::HashMap<String, String>>() {
        let row = record.map_err(|e| Error::Format(e.to_string()))?;
        let task = row.get("task").cloned().unwrap_or_default();
        let get = |k: &str| -> f64 { row.get(k).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN) };
        by_task.entry(task).or_default().push((
            get("objective"),
            get("out_mask_mse"),
            get("wall_ms"),
        ));
    }
    let mut stats: std::collections::BTreeMap<String, TaskStats> = Default::default();
    for (task, rows) in &by_task {
        let n = rows.len() as f64;
        let success = rows
            .iter()
            .filter(|(obj, _, _)| match task.as_str() {
                "move" | "drag" | "resize" => *obj <= 1.5,
                "paste" | "replace" => *obj > 0.0,
                _ => obj.is_finite(),
            })
            .count() as f64;
        stats.insert(
            task.clone(),
            TaskStats {
                runs: rows.len(),
                mean_objective: rows.iter().map(|r| r.0).sum::<f64>() / n,
                mean_out_mask_mse: rows.iter().map(|r| r.1).sum::<f64>() / n,
                mean_wall_ms: rows.iter().map(|r| r.2).sum::<f64>() / n,
                success_rate: success / n,
            },
        );
    }
    for (task, s) in &stats {
        println!(
            "{task}: {} runs, mean objective {:.4}, mean out-mask MSE {:.3e}, success rate {:.0}%, mean wall {:.0} ms",
            s.runs,
            s.mean_objective,
            s.mean_out_mask_mse,
            100.0 * s.success_rate,
            s.mean_wall_ms
        );
    }
    if let Some(path) = out {
        write_json(path, &stats)?;
    }
    Ok(())
}

//! Image-prompt pathway: a fixed patch tokenizer standing in for a vision
//! backbone, a query-former that compresses image tokens into a small prompt
//! token bank, the fused two-branch cross-attention, and the encoder training
//! loop with classifier-free prompt dropping.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::denoiser::{AttentionHooks, Denoiser, TinyAttentionDenoiser};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Fused two-branch attention on the tape:
/// `softmax(Q K1^T / sqrt(d)) V1 + gamma * softmax(Q K2^T / sqrt(d)) V2`.
/// The second branch is optional; asking for a nonzero `gamma` without one is
/// a config error.
pub fn fused_attention_on(
    tape: &mut Tape,
    q: Var,
    k1: Var,
    v1: Var,
    kv2: Option<(Var, Var)>,
    gamma: f64,
) -> Result<Var> {
    let d = tape.value(q).dims2()?.1;
    let scale = 1.0 / (d as f64).sqrt();
    let branch = |tape: &mut Tape, k: Var, v: Var| -> Result<Var> {
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, scale)?;
        let attn = tape.softmax_rows(logits)?;
        tape.matmul(attn, v)
    };
    let first = branch(tape, k1, v1)?;
    match kv2 {
        Some((k2, v2)) => {
            let second = branch(tape, k2, v2)?;
            let second = tape.scale(second, gamma)?;
            tape.add(first, second)
        }
        None if gamma != 0.0 => Err(Error::Config(
            "fused attention: gamma != 0 but no second key/value branch".into(),
        )),
        None => Ok(first),
    }
}

/// Eager convenience over [`fused_attention_on`].
pub fn fused_attention(
    q: &Tensor,
    k1: &Tensor,
    v1: &Tensor,
    kv2: Option<(&Tensor, &Tensor)>,
    gamma: f64,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let qv = tape.leaf(q.clone());
    let k1v = tape.leaf(k1.clone());
    let v1v = tape.leaf(v1.clone());
    let kv2v = kv2.map(|(k2, v2)| (tape.leaf(k2.clone()), tape.leaf(v2.clone())));
    let out = fused_attention_on(&mut tape, qv, k1v, v1v, kv2v, gamma)?;
    Ok(tape.value(out).clone())
}

/// Fixed (untrained) patch tokenizer: a seeded random linear projection of
/// flattened patches, with one mean-pooled global token prepended.
#[derive(Debug, Clone)]
pub struct ImageTokenizer {
    image_size: usize,
    patch_size: usize,
    proj: Tensor, // patch_size^2 x width
}

impl ImageTokenizer {
    pub fn new(image_size: usize, patch_size: usize, width: usize, seed: u64) -> Result<Self> {
        if !image_size.is_multiple_of(patch_size) {
            return Err(Error::Config(format!(
                "image size {image_size} not divisible by patch size {patch_size}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p2 = patch_size * patch_size;
        let proj = Tensor::randn(&[p2, width], &mut rng).scale(1.0 / (p2 as f64).sqrt());
        Ok(ImageTokenizer {
            image_size,
            patch_size,
            proj,
        })
    }

    pub fn token_count(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side + 1
    }

    pub fn width(&self) -> usize {
        self.proj.dims2().expect("rank 2").1
    }

    /// Tokenizes an image: one global mean token followed by per-patch
    /// embeddings.
    pub fn tokenize(&self, image: &Tensor) -> Result<Tensor> {
        if image.shape() != [self.image_size, self.image_size] {
            return Err(Error::ShapeMismatch {
                op: "tokenize_image",
                lhs: image.shape().to_vec(),
                rhs: vec![self.image_size, self.image_size],
            });
        }
        let ps = self.patch_size;
        let side = self.image_size / ps;
        let p2 = ps * ps;
        let mut patches = Vec::with_capacity(side * side * p2);
        for pr in 0..side {
            for pc in 0..side {
                for r in 0..ps {
                    for c in 0..ps {
                        patches.push(image.at2(pr * ps + r, pc * ps + c));
                    }
                }
            }
        }
        let patch_mat = Tensor::new(vec![side * side, p2], patches)?;
        let embedded = patch_mat.matmul(&self.proj)?;
        let (n, d) = embedded.dims2()?;
        let mut data = Vec::with_capacity((n + 1) * d);
        // Global token: mean of the patch embeddings.
        for j in 0..d {
            let mut s = 0.0;
            for i in 0..n {
                s += embedded.at2(i, j);
            }
            data.push(s / n as f64);
        }
        data.extend_from_slice(embedded.data());
        Tensor::new(vec![n + 1, d], data)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QFormerConfig {
    /// Number of learnable queries (the output token count).
    pub queries: usize,
    pub width: usize,
    /// Cross-attention + feed-forward submodules. No self-attention.
    pub submodules: usize,
    pub ff_mult: usize,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        QFormerConfig {
            queries: 8,
            width: 16,
            submodules: 2,
            ff_mult: 2,
        }
    }
}

/// Learnable-query cross-attention stack compressing image tokens into a
/// fixed number of prompt tokens. Queries carry no positional encoding, so
/// the encoder is permutation-invariant over its input tokens.
#[derive(Debug, Clone)]
pub struct QFormerEncoder {
    cfg: QFormerConfig,
    params: BTreeMap<String, Tensor>,
}

impl QFormerEncoder {
    pub fn new(cfg: QFormerConfig, seed: u64) -> Result<Self> {
        if cfg.queries == 0 || cfg.width == 0 || cfg.submodules == 0 {
            return Err(Error::Config("zero-sized QFormer dimension".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.width;
        let ff = cfg.ff_mult * d;
        let mut params = BTreeMap::new();
        params.insert(
            "queries".into(),
            Tensor::randn(&[cfg.queries, d], &mut rng).scale(0.5),
        );
        fn init(
            params: &mut BTreeMap<String, Tensor>,
            name: String,
            rows: usize,
            cols: usize,
            rng: &mut ChaCha8Rng,
        ) {
            let t = Tensor::randn(&[rows, cols], rng).scale(1.0 / (rows as f64).sqrt());
            params.insert(name, t);
        }
        for s in 0..cfg.submodules {
            for w in ["cq", "ck", "cv", "co"] {
                init(&mut params, format!("sub{s}.{w}"), d, d, &mut rng);
            }
            init(&mut params, format!("sub{s}.ff.w1"), d, ff, &mut rng);
            params.insert(format!("sub{s}.ff.b1"), Tensor::zeros(&[ff]));
            init(&mut params, format!("sub{s}.ff.w2"), ff, d, &mut rng);
            params.insert(format!("sub{s}.ff.b2"), Tensor::zeros(&[d]));
        }
        init(&mut params, "trailing.w".into(), d, d, &mut rng);
        params.insert("trailing.b".into(), Tensor::zeros(&[d]));
        Ok(QFormerEncoder { cfg, params })
    }

    pub fn config(&self) -> &QFormerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf(value.clone())))
            .collect()
    }

    pub fn apply_grads(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
            *p = p.zip_map(g, "sgd", |w, gw| w - lr * gw)?;
        }
        Ok(())
    }

    /// Tape-level forward: queries attend to image tokens in every submodule.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        params: &BTreeMap<String, Var>,
        image_tokens: Var,
    ) -> Result<Var> {
        let d = self.cfg.width;
        if tape.value(image_tokens).dims2()?.1 != d {
            return Err(Error::ShapeMismatch {
                op: "qformer_forward",
                lhs: tape.value(image_tokens).shape().to_vec(),
                rhs: vec![0, d],
            });
        }
        let mut x = params["queries"];
        for s in 0..self.cfg.submodules {
            let p = |w: &str| params[&format!("sub{s}.{w}")];
            let xn = tape.layer_norm_rows(x, 1e-5)?;
            let q = tape.matmul(xn, p("cq"))?;
            let k = tape.matmul(image_tokens, p("ck"))?;
            let v = tape.matmul(image_tokens, p("cv"))?;
            let attn = fused_attention_on(tape, q, k, v, None, 0.0)?;
            let attn = tape.matmul(attn, p("co"))?;
            x = tape.add(x, attn)?;

            let xn = tape.layer_norm_rows(x, 1e-5)?;
            let h = tape.matmul(xn, p("ff.w1"))?;
            let h = tape.add_row(h, p("ff.b1"))?;
            let h = tape.tanh(h)?;
            let h = tape.matmul(h, p("ff.w2"))?;
            let h = tape.add_row(h, p("ff.b2"))?;
            x = tape.add(x, h)?;
        }
        let out = tape.matmul(x, params["trailing.w"])?;
        tape.add_row(out, params["trailing.b"])
    }

    /// Eager forward: compresses image tokens into `queries` prompt tokens.
    pub fn encode(&self, image_tokens: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let tokens = tape.leaf(image_tokens.clone());
        let out = self.forward_on(&mut tape, &params, tokens)?;
        Ok(tape.value(out).clone())
    }
}

/// Writes the encoder parameters, geometry metadata, and the fixed tokenizer
/// projection as one checkpoint bundle.
pub fn save_prompt_encoder(
    path: &std::path::Path,
    tokenizer: &ImageTokenizer,
    encoder: &QFormerEncoder,
) -> Result<()> {
    let mut bundle = encoder.params.clone();
    let c = &encoder.cfg;
    for (name, v) in [
        ("meta.queries", c.queries),
        ("meta.width", c.width),
        ("meta.submodules", c.submodules),
        ("meta.ff_mult", c.ff_mult),
        ("meta.tok.image_size", tokenizer.image_size),
        ("meta.tok.patch_size", tokenizer.patch_size),
    ] {
        bundle.insert(name.to_string(), Tensor::scalar(v as f64));
    }
    bundle.insert("tok.proj".to_string(), tokenizer.proj.clone());
    crate::io::write_bundle(path, &bundle)
}

pub fn load_prompt_encoder(path: &std::path::Path) -> Result<(ImageTokenizer, QFormerEncoder)> {
    let mut bundle = crate::io::read_bundle(path)?;
    let mut meta = |name: &str| -> Result<usize> {
        let t = bundle
            .remove(name)
            .ok_or_else(|| Error::Format(format!("bundle missing {name}")))?;
        Ok(t.item()? as usize)
    };
    let cfg = QFormerConfig {
        queries: meta("meta.queries")?,
        width: meta("meta.width")?,
        submodules: meta("meta.submodules")?,
        ff_mult: meta("meta.ff_mult")?,
    };
    let image_size = meta("meta.tok.image_size")?;
    let patch_size = meta("meta.tok.patch_size")?;
    let proj = bundle
        .remove("tok.proj")
        .ok_or_else(|| Error::Format("bundle missing tok.proj".into()))?;
    let mut tokenizer = ImageTokenizer::new(image_size, patch_size, cfg.width, 0)?;
    if proj.shape() != tokenizer.proj.shape() {
        return Err(Error::Format(format!(
            "tokenizer projection shape {:?}, expected {:?}",
            proj.shape(),
            tokenizer.proj.shape()
        )));
    }
    tokenizer.proj = proj;
    let template = QFormerEncoder::new(cfg, 0)?;
    for (name, t) in template.params.iter() {
        let loaded = bundle
            .get(name)
            .ok_or_else(|| Error::Format(format!("bundle missing parameter {name}")))?;
        if loaded.shape() != t.shape() {
            return Err(Error::Format(format!(
                "parameter {name}: shape {:?}, expected {:?}",
                loaded.shape(),
                t.shape()
            )));
        }
    }
    if bundle.len() != template.params.len() {
        return Err(Error::Format("bundle has unexpected extra entries".into()));
    }
    Ok((
        tokenizer,
        QFormerEncoder {
            cfg,
            params: bundle,
        },
    ))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PromptTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing the prompt image with the zero image.
    pub drop_prob: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for PromptTrainConfig {
    fn default() -> Self {
        PromptTrainConfig {
            steps: 8_000,
            batch: 32,
            lr: 1e-2,
            drop_prob: 0.1,
            gamma: 0.5,
            seed: 0,
        }
    }
}

/// Trains the prompt encoder against a frozen denoiser; returns the loss
/// curve. With probability `drop_prob` the prompt image is replaced by the
/// zero image, so the unconditional branch stays trained for classifier-free
/// guidance.
pub fn train_prompt_encoder(
    encoder: &mut QFormerEncoder,
    tokenizer: &ImageTokenizer,
    denoiser: &TinyAttentionDenoiser,
    data: &Dataset,
    schedule: &NoiseSchedule,
    cfg: &PromptTrainConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Config("empty training dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps);
    let hooks = AttentionHooks::default();
    let zero_image = Tensor::zeros(&[data.image_size, data.image_size]);
    let zero_tokens = tokenizer.tokenize(&zero_image)?;
    let label_tokens = denoiser.config().label_tokens;

    for step in 0..cfg.steps {
        let step_result = (|| -> Result<f64> {
            let mut tape = Tape::new();
            let enc_bound = encoder.bind(&mut tape);
            // Frozen denoiser parameters still live on the tape as leaves;
            // their gradients are simply never applied.
            let den_bound = denoiser.bind(&mut tape);
            let mut loss_acc = None;
            for _ in 0..cfg.batch {
                let i = rng.gen_range(0..data.len());
                let t = rng.gen_range(1..=schedule.t_train());
                let eps = Tensor::randn(&[data.image_size, data.image_size], &mut rng);
                let z_t = schedule.q_sample(&data.images[i], t, &eps)?;
                let dropped = rng.gen::<f64>() < cfg.drop_prob;

                let img_tokens = if dropped {
                    zero_tokens.clone()
                } else {
                    tokenizer.tokenize(&data.images[i])?
                };
                let img_var = tape.leaf(img_tokens);
                let prompt = encoder.forward_on(&mut tape, &enc_bound, img_var)?;

                let z = tape.leaf(z_t);
                let text = tape.slice_rows(
                    den_bound["label_embed"],
                    data.labels[i] * label_tokens,
                    label_tokens,
                )?;
                let mut captured = Vec::new();
                let pred = denoiser.forward_on(
                    &mut tape,
                    &den_bound,
                    z,
                    t,
                    text,
                    Some(prompt),
                    cfg.gamma,
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
            for (name, var) in &enc_bound {
                table.insert(name.clone(), grads.wrt(&tape, *var)?);
            }
            encoder.apply_grads(&table, cfg.lr)?;
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

/// Held-out loss of the frozen denoiser with image-prompt conditioning.
#[allow(clippy::too_many_arguments)]
pub fn eval_prompt_loss(
    encoder: &QFormerEncoder,
    tokenizer: &ImageTokenizer,
    denoiser: &TinyAttentionDenoiser,
    data: &Dataset,
    schedule: &NoiseSchedule,
    gamma: f64,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hooks = AttentionHooks::default();
    let mut total = 0.0;
    let mut count = 0usize;
    for (img, &label) in data.images.iter().zip(&data.labels) {
        let prompt = encoder.encode(&tokenizer.tokenize(img)?)?;
        for _ in 0..draws {
            let t = rng.gen_range(1..=schedule.t_train());
            let eps = Tensor::randn(&[data.image_size, data.image_size], &mut rng);
            let z_t = schedule.q_sample(img, t, &eps)?;
            let cond = crate::denoiser::ConditionBundle {
                text_tokens: denoiser.label_tokens(label)?,
                image_tokens: Some(prompt.clone()),
                cfg_scale: 1.0,
                gamma,
            };
            let out = denoiser.predict_eps(&z_t, t, &cond, &hooks)?;
            total += out.eps.mse(&eps)?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_count_is_patches_plus_one() {
        let tok = ImageTokenizer::new(32, 8, 16, 0).unwrap();
        assert_eq!(tok.token_count(), 17);
        let img = Tensor::zeros(&[32, 32]);
        assert_eq!(tok.tokenize(&img).unwrap().shape(), &[17, 16]);
    }

    #[test]
    fn zero_image_gives_zero_tokens() {
        let tok = ImageTokenizer::new(16, 4, 8, 1).unwrap();
        let tokens = tok.tokenize(&Tensor::zeros(&[16, 16])).unwrap();
        assert!(tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_patch_change_is_local_plus_global() {
        let tok = ImageTokenizer::new(16, 4, 8, 2).unwrap();
        let mut rng = crate::test_rng(3);
        let a = Tensor::randn(&[16, 16], &mut rng);
        let mut b = a.clone();
        b.data_mut()[0] += 1.0; // inside patch (0,0)
        let ta = tok.tokenize(&a).unwrap();
        let tb = tok.tokenize(&b).unwrap();
        for token in 0..tok.token_count() {
            let differs = (0..8).any(|j| ta.at2(token, j) != tb.at2(token, j));
            // Token 0 is global, token 1 is patch (0,0); all others equal.
            assert_eq!(differs, token <= 1, "token {token}");
        }
    }

    #[test]
    fn indivisible_geometry_rejected() {
        assert!(ImageTokenizer::new(30, 8, 16, 0).is_err());
    }

    #[test]
    fn qformer_output_count_fixed() {
        let cfg = QFormerConfig {
            queries: 8,
            width: 16,
            submodules: 2,
            ff_mult: 2,
        };
        let enc = QFormerEncoder::new(cfg, 0).unwrap();
        let mut rng = crate::test_rng(4);
        for tokens in [1usize, 17, 257] {
            let input = Tensor::randn(&[tokens, 16], &mut rng);
            let out = enc.encode(&input).unwrap();
            assert_eq!(out.shape(), &[8, 16]);
        }
    }

    #[test]
    fn qformer_permutation_invariant_over_keys() {
        let enc = QFormerEncoder::new(QFormerConfig::default(), 5).unwrap();
        let mut rng = crate::test_rng(6);
        let input = Tensor::randn(&[9, 16], &mut rng);
        // Reverse the token order.
        let mut rev = Vec::new();
        for i in (0..9).rev() {
            rev.extend_from_slice(&input.data()[i * 16..(i + 1) * 16]);
        }
        let reversed = Tensor::new(vec![9, 16], rev).unwrap();
        let a = enc.encode(&input).unwrap();
        let b = enc.encode(&reversed).unwrap();
        let diff = a.sub(&b).unwrap().max_abs();
        assert!(diff < 1e-12, "permutation changed output by {diff}");
    }

    #[test]
    fn qformer_singleton_token_attention_is_value_projection() {
        // With one image token every attention row is a singleton softmax,
        // so the attention output equals that token's value projection.
        let enc = QFormerEncoder::new(
            QFormerConfig {
                queries: 3,
                width: 8,
                submodules: 1,
                ff_mult: 2,
            },
            7,
        )
        .unwrap();
        let mut rng = crate::test_rng(8);
        let token = Tensor::randn(&[1, 8], &mut rng);
        let v_proj = token.matmul(&enc.params()["sub0.cv"]).unwrap();

        // Reproduce the first attention output by hand.
        let mut tape = Tape::new();
        let params = enc.bind(&mut tape);
        let xn = tape.layer_norm_rows(params["queries"], 1e-5).unwrap();
        let q = tape.matmul(xn, params["sub0.cq"]).unwrap();
        let k = tape.leaf(token.matmul(&enc.params()["sub0.ck"]).unwrap());
        let v = tape.leaf(v_proj.clone());
        let attn = fused_attention_on(&mut tape, q, k, v, None, 0.0).unwrap();
        let out = tape.value(attn);
        for row in 0..3 {
            for j in 0..8 {
                assert!((out.at2(row, j) - v_proj.at2(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fused_attention_gamma_zero_is_single_branch() {
        let mut rng = crate::test_rng(9);
        let q = Tensor::randn(&[4, 8], &mut rng);
        let k = Tensor::randn(&[5, 8], &mut rng);
        let v = Tensor::randn(&[5, 8], &mut rng);
        let k2 = Tensor::randn(&[3, 8], &mut rng);
        let v2 = Tensor::randn(&[3, 8], &mut rng);
        let single = fused_attention(&q, &k, &v, None, 0.0).unwrap();
        let fused = fused_attention(&q, &k, &v, Some((&k2, &v2)), 0.0).unwrap();
        assert_eq!(single, fused);
    }

    #[test]
    fn fused_attention_singleton_closed_form() {
        // Singleton branches: output = V1 + gamma * V2; 1 + 0.5*2 = 2.
        let q = Tensor::zeros(&[1, 1]);
        let k = Tensor::scalar(0.3).reshape(&[1, 1]).unwrap();
        let v1 = Tensor::scalar(1.0).reshape(&[1, 1]).unwrap();
        let v2 = Tensor::scalar(2.0).reshape(&[1, 1]).unwrap();
        let out = fused_attention(&q, &k, &v1, Some((&k, &v2)), 0.5).unwrap();
        assert_eq!(out.item().unwrap(), 2.0);
    }

    #[test]
    fn fused_attention_duplicate_branch_doubles() {
        let mut rng = crate::test_rng(10);
        let q = Tensor::randn(&[2, 4], &mut rng);
        let k = Tensor::randn(&[3, 4], &mut rng);
        let v = Tensor::randn(&[3, 4], &mut rng);
        let single = fused_attention(&q, &k, &v, None, 0.0).unwrap();
        let doubled = fused_attention(&q, &k, &v, Some((&k, &v)), 1.0).unwrap();
        let diff = doubled.sub(&single.scale(2.0)).unwrap().max_abs();
        assert!(diff < 1e-12);
    }

    #[test]
    fn fused_attention_gamma_without_branch_errors() {
        let q = Tensor::zeros(&[1, 1]);
        assert!(fused_attention(&q, &q, &q, None, 0.5).is_err());
    }

    #[test]
    fn fused_attention_linear_in_gamma() {
        let mut rng = crate::test_rng(11);
        let q = Tensor::randn(&[3, 6], &mut rng);
        let k1 = Tensor::randn(&[4, 6], &mut rng);
        let v1 = Tensor::randn(&[4, 6], &mut rng);
        let k2 = Tensor::randn(&[5, 6], &mut rng);
        let v2 = Tensor::randn(&[5, 6], &mut rng);
        let at0 = fused_attention(&q, &k1, &v1, Some((&k2, &v2)), 0.0).unwrap();
        let at1 = fused_attention(&q, &k1, &v1, Some((&k2, &v2)), 1.0).unwrap();
        for gamma in [0.25, 0.5, 2.0, -1.0] {
            let at_g = fused_attention(&q, &k1, &v1, Some((&k2, &v2)), gamma).unwrap();
            // out(gamma) - out(0) == gamma * (out(1) - out(0)), exactly.
            let lhs = at_g.sub(&at0).unwrap();
            let rhs = at1.sub(&at0).unwrap().scale(gamma);
            assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
        }
    }
}

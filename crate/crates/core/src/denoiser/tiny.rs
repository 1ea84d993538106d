//! A small patch-token attention denoiser.
//!
//! Two blocks of (self-attention, cross-attention, feed-forward) over patch
//! tokens, with sinusoidal timestep conditioning. The self-attention layers
//! expose their keys/values for memory-bank capture and accept concatenated
//! external keys/values; the cross-attention runs the fused two-branch form
//! so text tokens and image-prompt tokens condition jointly.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{AttentionHooks, ConditionBundle, Denoiser, EpsOutput};
use crate::error::{Error, Result};
use crate::prompt::fused_attention_on;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One self-attention layer's keys and values.
#[derive(Debug, Clone)]
pub struct LayerKv {
    pub k: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TinyDenoiserConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub blocks: usize,
    pub ff_mult: usize,
    pub n_classes: usize,
    /// Embedding tokens per class label.
    pub label_tokens: usize,
}

impl Default for TinyDenoiserConfig {
    fn default() -> Self {
        // Patch size 4 keeps the per-patch output projection full rank
        // (patch_size^2 == width), which the noise-prediction objective
        // needs; patch 8 caps the achievable loss well above useful levels.
        TinyDenoiserConfig {
            image_size: 32,
            patch_size: 4,
            width: 16,
            blocks: 2,
            ff_mult: 4,
            n_classes: 3,
            label_tokens: 4,
        }
    }
}

impl TinyDenoiserConfig {
    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    fn validate(&self) -> Result<()> {
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.width == 0 || self.blocks == 0 || self.n_classes == 0 || self.label_tokens == 0 {
            return Err(Error::Config("zero-sized denoiser dimension".into()));
        }
        Ok(())
    }
}

/// Trainable attention denoiser. Parameters are named tensors; the forward
/// pass is recorded on a gradient tape so the same code serves inference and
/// training.
#[derive(Debug, Clone)]
pub struct TinyAttentionDenoiser {
    cfg: TinyDenoiserConfig,
    params: BTreeMap<String, Tensor>,
    latent_shape: Vec<usize>,
    patch_idx: Arc<Vec<usize>>,
}

/// Row-major flat indices that reorder an image into patch-token layout.
fn patch_indices(image_size: usize, patch_size: usize) -> Vec<usize> {
    let side = image_size / patch_size;
    let mut idx = Vec::with_capacity(image_size * image_size);
    for pr in 0..side {
        for pc in 0..side {
            for r in 0..patch_size {
                for c in 0..patch_size {
                    idx.push((pr * patch_size + r) * image_size + pc * patch_size + c);
                }
            }
        }
    }
    idx
}

fn sinusoidal_embedding(t: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; dim];
    let half = dim / 2;
    for i in 0..half {
        let freq = (10000.0f64).powf(-(i as f64) / half as f64);
        data[2 * i] = (t as f64 * freq).sin();
        data[2 * i + 1] = (t as f64 * freq).cos();
    }
    Tensor::new(vec![dim], data).expect("finite")
}

impl TinyAttentionDenoiser {
    pub fn new(cfg: TinyDenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.width;
        let p2 = cfg.patch_size * cfg.patch_size;
        let ff = cfg.ff_mult * d;
        let mut params = BTreeMap::new();

        fn init(
            params: &mut BTreeMap<String, Tensor>,
            name: String,
            rows: usize,
            cols: usize,
            rng: &mut ChaCha8Rng,
        ) {
            let scale = 1.0 / (rows as f64).sqrt();
            let t = Tensor::randn(&[rows, cols], rng).scale(scale);
            params.insert(name, t);
        }

        init(&mut params, "embed.w".into(), p2, d, &mut rng);
        params.insert("embed.b".into(), Tensor::zeros(&[d]));
        // Learned positional embedding: patch tokens are otherwise
        // permutation-equivalent, which would make position-conditional
        // prediction impossible.
        params.insert(
            "pos_embed".into(),
            Tensor::randn(&[cfg.tokens(), d], &mut rng).scale(0.1),
        );
        init(&mut params, "temb.w".into(), d, d, &mut rng);
        params.insert("temb.b".into(), Tensor::zeros(&[d]));
        params.insert(
            "label_embed".into(),
            Tensor::randn(&[cfg.n_classes * cfg.label_tokens, d], &mut rng).scale(0.5),
        );
        for b in 0..cfg.blocks {
            for w in ["wq", "wk", "wv", "wo", "cq", "ck", "cv", "co"] {
                init(&mut params, format!("blk{b}.{w}"), d, d, &mut rng);
            }
            init(&mut params, format!("blk{b}.ff.w1"), d, ff, &mut rng);
            params.insert(format!("blk{b}.ff.b1"), Tensor::zeros(&[ff]));
            init(&mut params, format!("blk{b}.ff.w2"), ff, d, &mut rng);
            params.insert(format!("blk{b}.ff.b2"), Tensor::zeros(&[d]));
        }
        // Small random output projection so every parameter receives
        // gradient from the first step. (A zero-initialized projection makes
        // the model the zero map and blocks upstream gradients until the
        // projection grows.)
        init(&mut params, "out.w".into(), d, p2, &mut rng);
        let out_w = params.get_mut("out.w").expect("just inserted");
        *out_w = out_w.scale(0.1);

        Ok(TinyAttentionDenoiser {
            patch_idx: Arc::new(patch_indices(cfg.image_size, cfg.patch_size)),
            latent_shape: vec![cfg.image_size, cfg.image_size],
            cfg,
            params,
        })
    }

    pub fn config(&self) -> &TinyDenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    /// Label-embedding tokens for a class, the stand-in for text conditioning.
    pub fn label_tokens(&self, class: usize) -> Result<Tensor> {
        if class >= self.cfg.n_classes {
            return Err(Error::Config(format!(
                "class {class} out of {}",
                self.cfg.n_classes
            )));
        }
        let l = self.cfg.label_tokens;
        let d = self.cfg.width;
        let table = &self.params["label_embed"];
        let start = class * l * d;
        Tensor::new(vec![l, d], table.data()[start..start + l * d].to_vec())
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf(value.clone())))
            .collect()
    }

    /// Writes the parameters plus geometry metadata as a model bundle.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut bundle = self.params.clone();
        let c = &self.cfg;
        for (name, v) in [
            ("meta.image_size", c.image_size),
            ("meta.patch_size", c.patch_size),
            ("meta.width", c.width),
            ("meta.blocks", c.blocks),
            ("meta.ff_mult", c.ff_mult),
            ("meta.n_classes", c.n_classes),
            ("meta.label_tokens", c.label_tokens),
        ] {
            bundle.insert(name.to_string(), Tensor::scalar(v as f64));
        }
        crate::io::write_bundle(path, &bundle)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut bundle = crate::io::read_bundle(path)?;
        let mut meta = |name: &str| -> Result<usize> {
            let t = bundle
                .remove(name)
                .ok_or_else(|| Error::Format(format!("bundle missing {name}")))?;
            Ok(t.item()? as usize)
        };
        let cfg = TinyDenoiserConfig {
            image_size: meta("meta.image_size")?,
            patch_size: meta("meta.patch_size")?,
            width: meta("meta.width")?,
            blocks: meta("meta.blocks")?,
            ff_mult: meta("meta.ff_mult")?,
            n_classes: meta("meta.n_classes")?,
            label_tokens: meta("meta.label_tokens")?,
        };
        let template = TinyAttentionDenoiser::new(cfg, 0)?;
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
        Ok(TinyAttentionDenoiser {
            params: bundle,
            ..template
        })
    }

    /// Applies one SGD step from a gradient table.
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

    /// The tape-level forward pass. `text`/`image` are token vars; captured
    /// self-attention keys/values are appended to `captured`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        params: &BTreeMap<String, Var>,
        z_t: Var,
        t: usize,
        text: Var,
        image: Option<Var>,
        gamma: f64,
        hooks: &AttentionHooks,
        captured: &mut Vec<LayerKv>,
    ) -> Result<Var> {
        let d = self.cfg.width;
        let p2 = self.cfg.patch_size * self.cfg.patch_size;
        let tokens = self.cfg.tokens();
        let scale = 1.0 / (d as f64).sqrt();

        if tape.value(z_t).shape() != self.latent_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "tiny_denoiser_forward",
                lhs: tape.value(z_t).shape().to_vec(),
                rhs: self.latent_shape.clone(),
            });
        }
        if tape.value(text).dims2()?.1 != d {
            return Err(Error::ShapeMismatch {
                op: "tiny_denoiser_forward",
                lhs: tape.value(text).shape().to_vec(),
                rhs: vec![self.cfg.label_tokens, d],
            });
        }

        // Patchify and embed.
        let flat = tape.gather(z_t, Arc::clone(&self.patch_idx))?;
        let patches = tape.reshape(flat, &[tokens, p2])?;
        let mut x = tape.matmul(patches, params["embed.w"])?;
        x = tape.add_row(x, params["embed.b"])?;
        x = tape.add(x, params["pos_embed"])?;

        // Timestep conditioning.
        let sin = tape.leaf(sinusoidal_embedding(t, d).reshape(&[1, d])?);
        let temb = tape.matmul(sin, params["temb.w"])?;
        let temb = tape.reshape(temb, &[d])?;
        let temb = {
            let b = params["temb.b"];
            tape.add(temb, b)?
        };
        x = tape.add_row(x, temb)?;

        for b in 0..self.cfg.blocks {
            let p = |w: &str| params[&format!("blk{b}.{w}")];

            // Self-attention with capture / external K,V concatenation.
            let xn = tape.layer_norm_rows(x, 1e-5)?;
            let q = tape.matmul(xn, p("wq"))?;
            let k = tape.matmul(xn, p("wk"))?;
            let v = tape.matmul(xn, p("wv"))?;
            if hooks.capture {
                captured.push(LayerKv {
                    k: tape.value(k).clone(),
                    v: tape.value(v).clone(),
                });
            }
            let (mut kf, mut vf) = (k, v);
            for set in &hooks.inject {
                let ext = set
                    .get(b)
                    .ok_or_else(|| Error::Config(format!("injected K/V set missing layer {b}")))?;
                let ke = tape.leaf(ext.k.clone());
                let ve = tape.leaf(ext.v.clone());
                kf = tape.concat_rows(kf, ke)?;
                vf = tape.concat_rows(vf, ve)?;
            }
            let kt = tape.transpose(kf)?;
            let logits = tape.matmul(q, kt)?;
            let logits = tape.scale(logits, scale)?;
            let attn = tape.softmax_rows(logits)?;
            let sa = tape.matmul(attn, vf)?;
            let sa = tape.matmul(sa, p("wo"))?;
            x = tape.add(x, sa)?;

            // Fused cross-attention over text and image-prompt tokens.
            let xn = tape.layer_norm_rows(x, 1e-5)?;
            let qc = tape.matmul(xn, p("cq"))?;
            let kt_text = tape.matmul(text, p("ck"))?;
            let vt_text = tape.matmul(text, p("cv"))?;
            let img_kv = match image {
                Some(img) => {
                    let ki = tape.matmul(img, p("ck"))?;
                    let vi = tape.matmul(img, p("cv"))?;
                    Some((ki, vi))
                }
                None => None,
            };
            let g = if img_kv.is_some() { gamma } else { 0.0 };
            let ca = fused_attention_on(tape, qc, kt_text, vt_text, img_kv, g)?;
            let ca = tape.matmul(ca, p("co"))?;
            x = tape.add(x, ca)?;

            // Feed-forward.
            let xn = tape.layer_norm_rows(x, 1e-5)?;
            let h = tape.matmul(xn, p("ff.w1"))?;
            let h = tape.add_row(h, p("ff.b1"))?;
            let h = tape.tanh(h)?;
            let h = tape.matmul(h, p("ff.w2"))?;
            let h = tape.add_row(h, p("ff.b2"))?;
            x = tape.add(x, h)?;
        }

        let out_tokens = tape.matmul(x, params["out.w"])?;
        let flat = tape.reshape(out_tokens, &[tokens * p2])?;
        tape.scatter_add(flat, Arc::clone(&self.patch_idx), &self.latent_shape)
    }
}

impl Denoiser for TinyAttentionDenoiser {
    fn predict_eps(
        &self,
        z_t: &Tensor,
        t: usize,
        cond: &ConditionBundle,
        hooks: &AttentionHooks,
    ) -> Result<EpsOutput> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let z = tape.leaf(z_t.clone());
        let text = tape.leaf(cond.text_tokens.clone());
        let image = cond.image_tokens.as_ref().map(|img| tape.leaf(img.clone()));
        let mut captured = Vec::new();
        let out = self.forward_on(
            &mut tape,
            &params,
            z,
            t,
            text,
            image,
            cond.gamma,
            hooks,
            &mut captured,
        )?;
        Ok(EpsOutput {
            eps: tape.value(out).clone(),
            captured,
        })
    }

    fn latent_shape(&self) -> &[usize] {
        &self.latent_shape
    }

    fn captures_attention(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TinyAttentionDenoiser {
        TinyAttentionDenoiser::new(
            TinyDenoiserConfig {
                image_size: 8,
                patch_size: 4,
                width: 8,
                blocks: 2,
                ff_mult: 2,
                n_classes: 2,
                label_tokens: 2,
            },
            9,
        )
        .unwrap()
    }

    fn cond(model: &TinyAttentionDenoiser) -> ConditionBundle {
        ConditionBundle {
            text_tokens: model.label_tokens(0).unwrap(),
            image_tokens: None,
            cfg_scale: 1.0,
            gamma: 0.5,
        }
    }

    #[test]
    fn zero_output_projection_gives_zero_map() {
        let mut model = small();
        let shape = model.params()["out.w"].shape().to_vec();
        model
            .params_mut()
            .insert("out.w".into(), Tensor::zeros(&shape));
        let mut rng = crate::test_rng(1);
        let z = Tensor::randn(&[8, 8], &mut rng);
        let out = model
            .predict_eps(&z, 500, &cond(&model), &AttentionHooks::default())
            .unwrap();
        assert_eq!(out.eps, Tensor::zeros(&[8, 8]));
    }

    fn trained_like(model: &mut TinyAttentionDenoiser) {
        // Larger output projection so forwards are strongly non-trivial.
        let mut rng = crate::test_rng(2);
        let p2 = model.cfg.patch_size * model.cfg.patch_size;
        let d = model.cfg.width;
        model
            .params_mut()
            .insert("out.w".into(), Tensor::randn(&[d, p2], &mut rng).scale(0.3));
    }

    #[test]
    fn forward_is_pure() {
        let mut model = small();
        trained_like(&mut model);
        let mut rng = crate::test_rng(3);
        let z = Tensor::randn(&[8, 8], &mut rng);
        let a = model
            .predict_eps(&z, 123, &cond(&model), &AttentionHooks::default())
            .unwrap();
        let b = model
            .predict_eps(&z, 123, &cond(&model), &AttentionHooks::default())
            .unwrap();
        assert_eq!(a.eps, b.eps);
    }

    #[test]
    fn capture_then_inject_own_kv_is_duplicate_renormalization() {
        // Duplicating identical key/value rows leaves softmax attention
        // output exactly unchanged; verify to tight tolerance.
        let mut model = small();
        trained_like(&mut model);
        let mut rng = crate::test_rng(4);
        let z = Tensor::randn(&[8, 8], &mut rng);
        let c = cond(&model);

        let base = model
            .predict_eps(&z, 77, &c, &AttentionHooks::capture())
            .unwrap();
        assert_eq!(base.captured.len(), 2);

        let hooks = AttentionHooks {
            capture: false,
            inject: vec![&base.captured],
        };
        let injected = model.predict_eps(&z, 77, &c, &hooks).unwrap();
        let diff = injected.eps.sub(&base.eps).unwrap().max_abs();
        assert!(diff < 1e-10, "duplication changed output by {diff}");
    }

    #[test]
    fn capture_shapes_match_tokens() {
        let model = small();
        let mut rng = crate::test_rng(5);
        let z = Tensor::randn(&[8, 8], &mut rng);
        let out = model
            .predict_eps(&z, 10, &cond(&model), &AttentionHooks::capture())
            .unwrap();
        for kv in &out.captured {
            assert_eq!(kv.k.shape(), &[4, 8]);
            assert_eq!(kv.v.shape(), &[4, 8]);
        }
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let model = small();
        let z = Tensor::zeros(&[8, 8]);
        let bad = ConditionBundle {
            text_tokens: Tensor::zeros(&[2, 5]),
            image_tokens: None,
            cfg_scale: 1.0,
            gamma: 0.0,
        };
        assert!(model
            .predict_eps(&z, 10, &bad, &AttentionHooks::default())
            .is_err());
    }

    #[test]
    fn wrong_latent_shape_is_dimension_error() {
        let model = small();
        let z = Tensor::zeros(&[4, 4]);
        assert!(model
            .predict_eps(&z, 10, &cond(&model), &AttentionHooks::default())
            .is_err());
    }
}

//! The noise-prediction interface and its two implementations: a closed-form
//! mixture-of-Gaussians denoiser used as a verification oracle, and a small
//! trainable attention denoiser that hosts the conditioning and key/value
//! injection machinery.

mod gmm;
mod tiny;
mod train;

pub use gmm::{render_blob, AnalyticDenoiser, BlobGridSpec, GmmPrior};
pub use tiny::{LayerKv, TinyAttentionDenoiser, TinyDenoiserConfig};
pub use train::{eval_eps_loss, train_denoiser, TrainConfig};

use crate::error::Result;
use crate::tensor::Tensor;

/// Conditioning inputs carried through a sampling run: label-embedding text
/// tokens, optional image-prompt tokens, and the guidance weights.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    /// `L x d` token embeddings standing in for the text prompt.
    pub text_tokens: Tensor,
    /// `L_im x d` image-prompt tokens, when an encoder is in play.
    pub image_tokens: Option<Tensor>,
    /// Classifier-free guidance scale.
    pub cfg_scale: f64,
    /// Weight of the image branch in the fused cross-attention.
    pub gamma: f64,
}

impl ConditionBundle {
    /// The unconditional branch used for classifier-free guidance: zeroed
    /// text tokens and no image prompt.
    pub fn uncond(&self) -> ConditionBundle {
        ConditionBundle {
            text_tokens: Tensor::zeros(self.text_tokens.shape()),
            image_tokens: None,
            cfg_scale: self.cfg_scale,
            gamma: self.gamma,
        }
    }
}

/// Capture/injection controls for the self-attention layers.
///
/// With `capture` set, the denoiser returns its per-layer keys and values.
/// Each entry of `inject` is one per-layer set of external keys/values that
/// get concatenated behind the layer's own before attention.
#[derive(Default)]
pub struct AttentionHooks<'a> {
    pub capture: bool,
    pub inject: Vec<&'a [LayerKv]>,
}

impl AttentionHooks<'_> {
    pub fn capture() -> AttentionHooks<'static> {
        AttentionHooks {
            capture: true,
            inject: Vec::new(),
        }
    }
}

/// A noise prediction plus whatever the hooks captured.
pub struct EpsOutput {
    pub eps: Tensor,
    pub captured: Vec<LayerKv>,
}

/// The denoiser interface: predicts the noise content of `z_t`. Pure —
/// identical inputs give identical outputs, and the output shape equals the
/// input shape.
pub trait Denoiser {
    fn predict_eps(
        &self,
        z_t: &Tensor,
        t: usize,
        cond: &ConditionBundle,
        hooks: &AttentionHooks,
    ) -> Result<EpsOutput>;

    fn latent_shape(&self) -> &[usize];

    /// Whether this denoiser has attention layers that participate in
    /// memory-bank capture and injection.
    fn captures_attention(&self) -> bool {
        false
    }
}

/// Classifier-free guidance combination:
/// `eps_uncond + scale * (eps_cond - eps_uncond)`. Scale 1 returns the
/// conditional prediction exactly.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f64) -> Result<Tensor> {
    eps_uncond.same_shape(eps_cond, "cfg_combine")?;
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    eps_uncond.zip_map(eps_cond, "cfg_combine", |u, c| u + scale * (c - u))
}

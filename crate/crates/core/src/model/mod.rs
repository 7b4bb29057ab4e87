//! Model configuration, decoder variants, parameter initialisation and the
//! [`Model`] wrapper that runs image + prompts to logits.

pub mod decoder;
pub mod encoders;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Prompt;
use crate::error::{Error, Result};
use crate::params::{ParamInit, ParamStore, Session};
use crate::tensor::Tensor;

pub use decoder::{
    blend_attention, contrastive_attention, crl_fuse, decode, decode_traced, expert_e1, expert_e2, expert_e3,
    mask_head, transform_intermediate, DecodeTrace,
};
pub use encoders::{encode_image, encode_prompts, FeatureCache, ImageFeatures, PromptTokens, TokenKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    /// Encoder blocks `m`; must be even.
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub mlp_ratio: usize,
    /// Average-pool the intermediate tap 2× so it is smaller than the final map.
    pub pool_intermediate: bool,
    pub expert_heads: usize,
    pub expert_mlp_ratio: usize,
    pub e3_heads: usize,
    pub leaky_slope: f32,
    pub ln_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            dim: 64,
            encoder_depth: 4,
            encoder_heads: 4,
            mlp_ratio: 4,
            pool_intermediate: true,
            expert_heads: 4,
            expert_mlp_ratio: 4,
            e3_heads: 4,
            leaky_slope: 0.01,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// 16×16 images, a 4×4 feature grid and 8 channels; for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 16,
            patch_size: 4,
            dim: 8,
            encoder_depth: 2,
            encoder_heads: 2,
            mlp_ratio: 2,
            expert_heads: 2,
            expert_mlp_ratio: 2,
            e3_heads: 2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!("image size {} is not divisible by patch size {}", self.image_size, self.patch_size));
        }
        if self.encoder_depth == 0 || self.encoder_depth % 2 != 0 {
            return bad(format!("encoder depth must be even and positive, got {}", self.encoder_depth));
        }
        if self.dim % 4 != 0 || self.dim == 0 {
            return bad(format!("channel count {} must be a positive multiple of 4", self.dim));
        }
        for (what, h) in [("encoder", self.encoder_heads), ("expert", self.expert_heads), ("e3", self.e3_heads)] {
            if h == 0 || self.dim % h != 0 {
                return bad(format!("{what} heads {h} do not divide {} channels", self.dim));
            }
        }
        if self.mlp_ratio == 0 || self.expert_mlp_ratio == 0 {
            return bad("MLP expansion ratio must be at least 1".into());
        }
        let g = self.grid();
        if self.pool_intermediate && g % 2 != 0 {
            return bad(format!("pooling the intermediate tap needs an even grid, got {g}"));
        }
        if !(self.ln_eps > 0.0) || !(self.leaky_slope >= 0.0) {
            return bad("ln_eps must be positive and leaky_slope nonnegative".into());
        }
        Ok(())
    }

    /// Side of the final feature map, `H = W = S / patch`.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Side of the intermediate map `H_p`.
    pub fn inter_grid(&self) -> usize {
        if self.pool_intermediate {
            self.grid() / 2
        } else {
            self.grid()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    Baseline,
    #[serde(rename = "safeclick")]
    SafeClick,
    #[serde(rename = "ablate_e1")]
    AblateE1,
    #[serde(rename = "ablate_e2")]
    AblateE2,
    #[serde(rename = "ablate_crl")]
    AblateCrl,
}

impl DecoderVariant {
    pub const ALL: [DecoderVariant; 5] = [
        DecoderVariant::Baseline,
        DecoderVariant::AblateE1,
        DecoderVariant::AblateE2,
        DecoderVariant::AblateCrl,
        DecoderVariant::SafeClick,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DecoderVariant::Baseline => "baseline",
            DecoderVariant::SafeClick => "safeclick",
            DecoderVariant::AblateE1 => "ablate_e1",
            DecoderVariant::AblateE2 => "ablate_e2",
            DecoderVariant::AblateCrl => "ablate_crl",
        }
    }

    /// Row label in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            DecoderVariant::Baseline => "Baseline",
            DecoderVariant::SafeClick => "SafeClick",
            DecoderVariant::AblateE1 => "w/o E1",
            DecoderVariant::AblateE2 => "w/o E2",
            DecoderVariant::AblateCrl => "w/o CRL",
        }
    }

    /// Parameter scopes the variant needs beyond the shared trunk.
    pub fn expert_scopes(self) -> &'static [&'static str] {
        match self {
            DecoderVariant::Baseline => &[],
            DecoderVariant::SafeClick => &["transform", "e1", "e2", "crl.alpha_raw", "crl.conv"],
            DecoderVariant::AblateE1 => &["e2", "crl.conv"],
            DecoderVariant::AblateE2 => &["transform", "e1", "crl.conv"],
            DecoderVariant::AblateCrl => &["transform", "e1", "e2", "crl.conv"],
        }
    }

    /// Scopes trained in the second stage by default.
    pub fn stage2_trainable(self) -> Vec<&'static str> {
        let mut s: Vec<&str> = self.expert_scopes().to_vec();
        s.extend(["out_norm", "head"]);
        s
    }
}

impl fmt::Display for DecoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DecoderVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`")))
    }
}

/// Scopes shared by every variant.
pub const TRUNK_SCOPES: [&str; 5] = ["encoder", "prompt", "e3", "out_norm", "head"];
const EXPERT_SCOPES: [&str; 5] = ["transform", "e1", "e2", "crl.alpha_raw", "crl.conv"];

/// Errors unless `params` holds exactly the scopes `variant` needs.
pub fn check_variant_params(params: &ParamStore, variant: DecoderVariant) -> Result<()> {
    let needed = variant.expert_scopes();
    for scope in TRUNK_SCOPES.iter().chain(needed) {
        if !params.has_prefix(scope) {
            return Err(Error::ConfigMismatch(format!("variant {variant} needs parameters under `{scope}`")));
        }
    }
    for scope in EXPERT_SCOPES.iter().filter(|s| !needed.contains(s)) {
        if params.has_prefix(scope) {
            return Err(Error::ConfigMismatch(format!("variant {variant} has no `{scope}` but the parameters do")));
        }
    }
    Ok(())
}

/// Fresh parameters for `variant`. Every tensor is seeded by `(seed, name)`,
/// so shared scopes are bitwise identical across variants at the same seed.
pub fn init_params(cfg: &ModelConfig, variant: DecoderVariant, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut p = ParamInit::new(seed);
    encoders::init_encoder(cfg, &mut p)?;
    encoders::init_prompt(cfg, &mut p);
    decoder::init_decoder(cfg, variant, &mut p)?;
    Ok(p.finish())
}

/// Configuration, variant and parameters of one decoder instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub variant: DecoderVariant,
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: ModelConfig, variant: DecoderVariant, seed: u64) -> Result<Self> {
        let params = init_params(&config, variant, seed)?;
        Ok(Model { config, variant, params })
    }

    pub fn from_parts(config: ModelConfig, variant: DecoderVariant, params: ParamStore) -> Result<Self> {
        config.validate()?;
        check_variant_params(&params, variant)?;
        Ok(Model { config, variant, params })
    }

    /// `[S, S]` logits for an `[S, S, 1]` image.
    pub fn predict(&self, image: &Tensor, prompts: &[Prompt]) -> Result<Tensor> {
        let mut s = Session::inference(&self.params);
        let feats = encode_image(&mut s, &self.config, image)?;
        let tokens = encode_prompts(&mut s, &self.config, prompts)?;
        let logits = decode(&mut s, &self.config, self.variant, &feats, &tokens)?;
        Ok(s.tape.value(logits).clone())
    }

    /// Encoder outputs as plain tensors, for reuse across prompts.
    pub fn features(&self, image: &Tensor) -> Result<FeatureCache> {
        let mut s = Session::inference(&self.params);
        let feats = encode_image(&mut s, &self.config, image)?;
        Ok(feats.to_cache(&s.tape))
    }

    pub fn predict_cached(&self, cache: &FeatureCache, prompts: &[Prompt]) -> Result<Tensor> {
        let mut s = Session::inference(&self.params);
        let feats = cache.bind(&mut s.tape);
        let tokens = encode_prompts(&mut s, &self.config, prompts)?;
        let logits = decode(&mut s, &self.config, self.variant, &feats, &tokens)?;
        Ok(s.tape.value(logits).clone())
    }
}

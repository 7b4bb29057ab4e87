//! Toy ViT image encoder and the prompt encoder.

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::data::{PointLabel, Prompt};
use crate::error::{Error, Result};
use crate::nn::{grid_encoding, positional_encoding, Attention, LayerNorm, Mlp};
use crate::params::{ParamInit, Session};
use crate::tensor::{Tape, Tensor, Var};

/// Encoder outputs on a tape: `x_i` is `[H_p, W_p, C]`, `x_f` is `[H, W, C]`.
#[derive(Clone, Copy, Debug)]
pub struct ImageFeatures {
    pub x_i: Var,
    pub x_f: Var,
}

impl ImageFeatures {
    pub fn to_cache(&self, tape: &Tape) -> FeatureCache {
        FeatureCache { x_i: tape.value(self.x_i).clone(), x_f: tape.value(self.x_f).clone() }
    }
}

/// Detached encoder outputs. With a frozen encoder these are reused across
/// every step that sees the same image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    pub x_i: Tensor,
    pub x_f: Tensor,
}

impl FeatureCache {
    pub fn bind(&self, tape: &mut Tape) -> ImageFeatures {
        ImageFeatures { x_i: tape.constant(self.x_i.clone()), x_f: tape.constant(self.x_f.clone()) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    PointPositive,
    PointNegative,
    BoxTopLeft,
    BoxBottomRight,
    Output,
}

/// Prompt tokens `[N_p, C]`; the learned output token is always last.
#[derive(Clone, Debug)]
pub struct PromptTokens {
    pub tokens: Var,
    pub kinds: Vec<TokenKind>,
}

fn block_prefix(i: usize) -> String {
    format!("encoder.block{i}")
}

fn block_layers(cfg: &ModelConfig, i: usize) -> Result<(LayerNorm, Attention, LayerNorm, Mlp)> {
    let p = block_prefix(i);
    Ok((
        LayerNorm::new(format!("{p}.norm1"), cfg.dim, cfg.ln_eps),
        Attention::new(format!("{p}.attn"), cfg.dim, cfg.encoder_heads)?,
        LayerNorm::new(format!("{p}.norm2"), cfg.dim, cfg.ln_eps),
        Mlp::new(format!("{p}.mlp"), cfg.dim, cfg.dim * cfg.mlp_ratio),
    ))
}

pub(crate) fn init_encoder(cfg: &ModelConfig, p: &mut ParamInit) -> Result<()> {
    let pp = cfg.patch_size * cfg.patch_size;
    p.weight("encoder.embed.w", &[pp, cfg.dim]);
    p.zeros("encoder.embed.b", &[cfg.dim]);
    for i in 0..cfg.encoder_depth {
        let (n1, attn, n2, mlp) = block_layers(cfg, i)?;
        n1.init(p);
        attn.init(p);
        n2.init(p);
        mlp.init(p);
    }
    LayerNorm::new("encoder.norm_out", cfg.dim, cfg.ln_eps).init(p);
    Ok(())
}

pub(crate) fn init_prompt(cfg: &ModelConfig, p: &mut ParamInit) {
    for name in ["point_pos", "point_neg", "corner_tl", "corner_br", "output_token"] {
        p.weight(&format!("prompt.{name}"), &[cfg.dim]);
    }
}

/// `[S, S]` or `[S, S, 1]` image to `[H·W, p²]` patch rows.
fn patchify(image: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let s = cfg.image_size;
    let ok = match image.shape() {
        [h, w] | [h, w, 1] => *h == s && *w == s,
        _ => false,
    };
    if !ok {
        return Err(Error::shape("encode_image", image.shape(), &[s, s, 1]));
    }
    let (p, g) = (cfg.patch_size, cfg.grid());
    let px = image.data();
    let mut out = Vec::with_capacity(s * s);
    for gy in 0..g {
        for gx in 0..g {
            for dy in 0..p {
                let row = (gy * p + dy) * s + gx * p;
                out.extend_from_slice(&px[row..row + p]);
            }
        }
    }
    Tensor::new([g * g, p * p], out)
}

/// Patch embedding plus `m` pre-norm transformer blocks. The output of block
/// `m/2` (optionally 2× average-pooled) is `x_i`; the normalised output of
/// block `m` is `x_f`.
pub fn encode_image(s: &mut Session, cfg: &ModelConfig, image: &Tensor) -> Result<ImageFeatures> {
    cfg.validate()?;
    let (g, c) = (cfg.grid(), cfg.dim);
    let patches = s.tape.constant(patchify(image, cfg)?);
    let w = s.param("encoder.embed.w")?;
    let b = s.param("encoder.embed.b")?;
    let x = s.tape.matmul(patches, w)?;
    let x = s.tape.add_bias(x, b)?;
    let pe = s.tape.constant(grid_encoding(g, g, c)?);
    let mut x = s.tape.add(x, pe)?;

    let mut tap = None;
    for i in 0..cfg.encoder_depth {
        let (n1, attn, n2, mlp) = block_layers(cfg, i)?;
        let h = n1.forward(s, x)?;
        let h = attn.forward(s, h, h, h)?;
        x = s.tape.add(x, h)?;
        let h = n2.forward(s, x)?;
        let h = mlp.forward(s, h)?;
        x = s.tape.add(x, h)?;
        if i + 1 == cfg.encoder_depth / 2 {
            tap = Some(x);
        }
    }
    let tap = tap.expect("depth validated as even and positive");
    let x_i = s.tape.reshape(tap, [g, g, c])?;
    let x_i = if cfg.pool_intermediate { s.tape.avg_pool2(x_i)? } else { x_i };
    let x_f = LayerNorm::new("encoder.norm_out", c, cfg.ln_eps).forward(s, x)?;
    let x_f = s.tape.reshape(x_f, [g, g, c])?;
    Ok(ImageFeatures { x_i, x_f })
}

/// Index coordinates to the unit square, at pixel centres.
fn unit(v: f64, size: usize) -> f32 {
    ((v + 0.5) / size as f64) as f32
}

/// One token per point, two per box, then the learned output token.
pub fn encode_prompts(s: &mut Session, cfg: &ModelConfig, prompts: &[Prompt]) -> Result<PromptTokens> {
    if prompts.is_empty() {
        return Err(Error::invalid("at least one prompt is required"));
    }
    let size = cfg.image_size;
    let mut coords = Vec::new();
    let mut kinds = Vec::new();
    for p in prompts {
        p.check_bounds(size)?;
        match *p {
            Prompt::Point { x, y, label } => {
                coords.push((unit(x, size), unit(y, size)));
                kinds.push(match label {
                    PointLabel::Positive => TokenKind::PointPositive,
                    PointLabel::Negative => TokenKind::PointNegative,
                });
            }
            Prompt::Box { x0, y0, x1, y1 } => {
                coords.push((unit(x0, size), unit(y0, size)));
                kinds.push(TokenKind::BoxTopLeft);
                coords.push((unit(x1, size), unit(y1, size)));
                kinds.push(TokenKind::BoxBottomRight);
            }
        }
    }
    let pe = positional_encoding(&coords, cfg.dim)?;
    let mut rows = Vec::with_capacity(kinds.len() + 1);
    for (i, kind) in kinds.iter().enumerate() {
        let name = match kind {
            TokenKind::PointPositive => "prompt.point_pos",
            TokenKind::PointNegative => "prompt.point_neg",
            TokenKind::BoxTopLeft => "prompt.corner_tl",
            TokenKind::BoxBottomRight => "prompt.corner_br",
            TokenKind::Output => unreachable!(),
        };
        let row = Tensor::new([1, cfg.dim], pe.data()[i * cfg.dim..(i + 1) * cfg.dim].to_vec())?;
        let row = s.tape.constant(row);
        let emb = s.param(name)?;
        rows.push(s.tape.add_bias(row, emb)?);
    }
    let out = s.param("prompt.output_token")?;
    rows.push(s.tape.reshape(out, [1, cfg.dim])?);
    kinds.push(TokenKind::Output);
    let tokens = s.tape.concat_rows(&rows)?;
    Ok(PromptTokens { tokens, kinds })
}

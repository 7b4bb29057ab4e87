//! Expert layers, consensus fusion, the mask head and variant dispatch.
//!
//! Feature maps are `[H, W, C]` tape values. The consensus layer works on
//! channel matrices `Φ = T(x)`, `C×N` with `N = H·W`; internally it keeps the
//! row-major `N×C` flattening and uses transposed products, so `Φ1Φ2ᵀ` is
//! `X1ᵀX2` and `A·Φ2` is `(X2·Aᵀ)ᵀ`. [`to_channel_matrix`] and
//! [`from_channel_matrix`] give the explicit `C×N` view.

use super::encoders::{ImageFeatures, PromptTokens};
use super::{check_variant_params, DecoderVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{grid_encoding, Attention, LayerNorm, Mlp};
use crate::params::{ParamInit, Session};
use crate::tensor::{Tape, Tensor, Var};

fn ln(cfg: &ModelConfig, name: &str) -> LayerNorm {
    LayerNorm::new(name, cfg.dim, cfg.ln_eps)
}

fn expert_attn(cfg: &ModelConfig, name: &str) -> Result<Attention> {
    Attention::new(name, cfg.dim, cfg.expert_heads)
}

fn expert_mlp(cfg: &ModelConfig, name: &str) -> Mlp {
    Mlp::new(name, cfg.dim, cfg.dim * cfg.expert_mlp_ratio)
}

fn e3_attn(cfg: &ModelConfig, name: &str) -> Result<Attention> {
    Attention::new(name, cfg.dim, cfg.e3_heads)
}

pub(crate) fn init_decoder(cfg: &ModelConfig, variant: DecoderVariant, p: &mut ParamInit) -> Result<()> {
    let c = cfg.dim;
    for n in ["e3.norm_self", "e3.norm_t2i_q", "e3.norm_t2i_kv", "e3.norm_mlp", "e3.norm_i2t_q", "e3.norm_i2t_kv"] {
        ln(cfg, n).init(p);
    }
    for n in ["e3.attn_self", "e3.attn_t2i", "e3.attn_i2t"] {
        e3_attn(cfg, n)?.init(p);
    }
    Mlp::new("e3.mlp", c, c * cfg.mlp_ratio).init(p);

    ln(cfg, "out_norm").init(p);
    p.weight("head.up1.w", &[c, 2, 2, c / 2]);
    p.zeros("head.up1.b", &[c / 2]);
    p.weight("head.up2.w", &[c / 2, 2, 2, c / 4]);
    p.zeros("head.up2.b", &[c / 4]);
    for (i, (fan_in, fan_out)) in [(c, c), (c, c), (c, c / 4)].into_iter().enumerate() {
        p.weight(&format!("head.token_mlp.w{i}"), &[fan_in, fan_out]);
        p.zeros(&format!("head.token_mlp.b{i}"), &[fan_out]);
    }

    let scopes = variant.expert_scopes();
    if scopes.contains(&"transform") {
        p.weight("transform.conv.w", &[1, 1, c, c]);
        p.zeros("transform.conv.b", &[c]);
        ln(cfg, "transform.norm").init(p);
    }
    if scopes.contains(&"e1") {
        for n in ["e1.norm_q", "e1.norm_kv", "e1.norm_mlp"] {
            ln(cfg, n).init(p);
        }
        expert_attn(cfg, "e1.attn")?.init(p);
        expert_mlp(cfg, "e1.mlp").init(p);
    }
    if scopes.contains(&"e2") {
        for n in ["e2.norm", "e2.norm_mlp"] {
            ln(cfg, n).init(p);
        }
        expert_attn(cfg, "e2.attn")?.init(p);
        expert_mlp(cfg, "e2.mlp").init(p);
    }
    if scopes.contains(&"crl.alpha_raw") {
        p.zeros("crl.alpha_raw", &[1]);
    }
    if scopes.contains(&"crl.conv") {
        p.zeros("crl.conv.w", &[3, 3, c, c]);
        p.zeros("crl.conv.b", &[c]);
    }
    Ok(())
}

fn dims3(tape: &Tape, x: Var, op: &'static str) -> Result<[usize; 3]> {
    match *tape.shape(x) {
        [h, w, c] => Ok([h, w, c]),
        ref s => Err(Error::shape(op, s, &[0, 0, 0])),
    }
}

fn flatten(tape: &mut Tape, x: Var, op: &'static str) -> Result<(Var, [usize; 3])> {
    let d = dims3(tape, x, op)?;
    Ok((tape.reshape(x, [d[0] * d[1], d[2]])?, d))
}

/// `T(x)`: `[H, W, C]` to the `C×N` channel matrix.
pub fn to_channel_matrix(x: &Tensor) -> Result<Tensor> {
    let [h, w, c] = x.dims3("to_channel_matrix")?;
    x.reshape([h * w, c])?.transpose2()
}

/// `R(Φ)`: the `C×N` channel matrix back to `[H, W, C]`.
pub fn from_channel_matrix(phi: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [c, n] = phi.dims2("from_channel_matrix")?;
    if n != h * w {
        return Err(Error::shape("from_channel_matrix", phi.shape(), &[c, h * w]));
    }
    phi.transpose2()?.reshape([h, w, c])
}

/// 1×1 conv, bilinear resize to `H×W`, layer norm, GELU.
pub fn transform_intermediate(s: &mut Session, cfg: &ModelConfig, x_i: Var, h: usize, w: usize) -> Result<Var> {
    let wt = s.param("transform.conv.w")?;
    let b = s.param("transform.conv.b")?;
    let y = s.tape.conv2d(x_i, wt, b, 1, 0)?;
    let [hp, wp, _] = dims3(&s.tape, y, "transform_intermediate")?;
    let y = if (hp, wp) == (h, w) { y } else { s.tape.resize_bilinear(y, h, w)? };
    let y = ln(cfg, "transform.norm").forward(s, y)?;
    Ok(s.tape.gelu(y))
}

/// Pre-norm residual cross-attention from `x̂_i` to `x_f`, then an MLP.
pub fn expert_e1(s: &mut Session, cfg: &ModelConfig, x_hat_i: Var, x_f: Var) -> Result<Var> {
    let (q_src, d) = flatten(&mut s.tape, x_hat_i, "expert_e1")?;
    let (kv_src, dk) = flatten(&mut s.tape, x_f, "expert_e1")?;
    if d != dk {
        return Err(Error::shape("expert_e1", &d, &dk));
    }
    let q = ln(cfg, "e1.norm_q").forward(s, q_src)?;
    let kv = ln(cfg, "e1.norm_kv").forward(s, kv_src)?;
    let a = expert_attn(cfg, "e1.attn")?.forward(s, q, kv, kv)?;
    let t = s.tape.add(a, q_src)?;
    let h = ln(cfg, "e1.norm_mlp").forward(s, t)?;
    let h = expert_mlp(cfg, "e1.mlp").forward(s, h)?;
    let out = s.tape.add(h, t)?;
    s.tape.reshape(out, d)
}

/// Pre-norm residual self-attention over `x_f`, then an MLP. Takes no prompt.
pub fn expert_e2(s: &mut Session, cfg: &ModelConfig, x_f: Var) -> Result<Var> {
    let (x, d) = flatten(&mut s.tape, x_f, "expert_e2")?;
    let n = ln(cfg, "e2.norm").forward(s, x)?;
    let a = expert_attn(cfg, "e2.attn")?.forward(s, n, n, n)?;
    let t = s.tape.add(a, x)?;
    let h = ln(cfg, "e2.norm_mlp").forward(s, t)?;
    let h = expert_mlp(cfg, "e2.mlp").forward(s, h)?;
    let out = s.tape.add(h, t)?;
    s.tape.reshape(out, d)
}

/// One two-way layer: token self-attention, token-to-image attention, token
/// MLP, image-to-token attention. Returns `(x3, output token)`.
pub fn expert_e3(s: &mut Session, cfg: &ModelConfig, x_f: Var, prompts: &PromptTokens) -> Result<(Var, Var)> {
    let n_tok = s.tape.shape(prompts.tokens)[0];
    if n_tok < 2 {
        return Err(Error::invalid("two-way layer needs a prompt token and the output token"));
    }
    let (img, d) = flatten(&mut s.tape, x_f, "expert_e3")?;
    let pe = s.tape.constant(grid_encoding(d[0], d[1], d[2])?);
    let mut t = prompts.tokens;

    let h = ln(cfg, "e3.norm_self").forward(s, t)?;
    let h = e3_attn(cfg, "e3.attn_self")?.forward(s, h, h, h)?;
    t = s.tape.add(t, h)?;

    let q = ln(cfg, "e3.norm_t2i_q").forward(s, t)?;
    let v = ln(cfg, "e3.norm_t2i_kv").forward(s, img)?;
    let k = s.tape.add(v, pe)?;
    let h = e3_attn(cfg, "e3.attn_t2i")?.forward(s, q, k, v)?;
    t = s.tape.add(t, h)?;

    let h = ln(cfg, "e3.norm_mlp").forward(s, t)?;
    let h = Mlp::new("e3.mlp", cfg.dim, cfg.dim * cfg.mlp_ratio).forward(s, h)?;
    t = s.tape.add(t, h)?;

    let q = ln(cfg, "e3.norm_i2t_q").forward(s, img)?;
    let q = s.tape.add(q, pe)?;
    let kv = ln(cfg, "e3.norm_i2t_kv").forward(s, t)?;
    let h = e3_attn(cfg, "e3.attn_i2t")?.forward(s, q, kv, kv)?;
    let img = s.tape.add(img, h)?;

    let x3 = s.tape.reshape(img, d)?;
    let token = s.tape.slice_rows(t, n_tok - 1, 1)?;
    Ok((x3, token))
}

/// `max(G)·𝟙 − G` with the global maximum of `G`.
pub fn contrastive_attention(tape: &mut Tape, g: Var) -> Result<Var> {
    let m = tape.max_all(g);
    let ones = tape.constant(Tensor::ones(tape.shape(g).to_vec()));
    let full = tape.mul_scalar(ones, m)?;
    tape.sub(full, g)
}

/// Channel attention `A` from `N×C` flattenings `x1`, `x2`.
///
/// Without `alpha` this is `σ(Â_self)`. With it, the blend
/// `(σ(Â_self) + α·σ(Â_cross)) / (1 + α)` is evaluated as
/// `σ(Â_self) + α/(1+α)·(σ(Â_cross) − σ(Â_self))`, which reduces to
/// `σ(Â_self)` bit for bit when `α = 0` or when the two branches agree.
pub fn blend_attention(tape: &mut Tape, x1: Var, x2: Var, alpha: Option<Var>) -> Result<Var> {
    let g_self = tape.t_matmul(x2, x2)?;
    let a_self = contrastive_attention(tape, g_self)?;
    let s_self = tape.softmax_rows(a_self)?;
    let Some(alpha) = alpha else {
        return Ok(s_self);
    };
    let g_cross = tape.t_matmul(x1, x2)?;
    let a_cross = contrastive_attention(tape, g_cross)?;
    let s_cross = tape.softmax_rows(a_cross)?;
    let denom = tape.add_scalar(alpha, 1.0);
    let w = tape.div(alpha, denom)?;
    let diff = tape.sub(s_cross, s_self)?;
    let mix = tape.mul_scalar(diff, w)?;
    tape.add(s_self, mix)
}

/// `R(A·Φ + Φ)` for `N×C` flattening `x` of an `[H, W, C]` map.
fn channel_mix(tape: &mut Tape, a: Var, x: Var, d: [usize; 3]) -> Result<Var> {
    let ax = tape.matmul_t(x, a)?;
    let y = tape.add(ax, x)?;
    tape.reshape(y, d)
}

/// `leakyReLU(LN(F_conv(x) + x3))`.
fn fuse_into_prompt_path(s: &mut Session, cfg: &ModelConfig, x: Var, x3: Var) -> Result<Var> {
    let w = s.param("crl.conv.w")?;
    let b = s.param("crl.conv.b")?;
    let y = s.tape.conv2d(x, w, b, 1, 1)?;
    let y = s.tape.add(y, x3)?;
    enhance(s, cfg, y)
}

fn enhance(s: &mut Session, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let y = ln(cfg, "out_norm").forward(s, x)?;
    Ok(s.tape.leaky_relu(y, cfg.leaky_slope))
}

/// Consensus fusion of the three expert maps into `x_enhanced`.
///
/// `alpha_override` replaces `softplus(alpha_raw)`; it must be a finite
/// nonnegative number.
pub fn crl_fuse(
    s: &mut Session,
    cfg: &ModelConfig,
    x1: Var,
    x2: Var,
    x3: Var,
    alpha_override: Option<f32>,
) -> Result<Var> {
    let (f1, d1) = flatten(&mut s.tape, x1, "crl_fuse")?;
    let (f2, d2) = flatten(&mut s.tape, x2, "crl_fuse")?;
    let d3 = dims3(&s.tape, x3, "crl_fuse")?;
    if d1 != d2 || d2 != d3 {
        return Err(Error::shape("crl_fuse", &d1, &d3));
    }
    let alpha = match alpha_override {
        Some(a) if !(a >= 0.0) || !a.is_finite() => {
            return Err(Error::invalid(format!("alpha must be finite and nonnegative, got {a}")))
        }
        Some(a) => s.tape.constant(Tensor::scalar(a).reshape([1])?),
        None => {
            let raw = s.param("crl.alpha_raw")?;
            s.tape.softplus(raw)
        }
    };
    let a = blend_attention(&mut s.tape, f1, f2, Some(alpha))?;
    let x2p = channel_mix(&mut s.tape, a, f2, d2)?;
    fuse_into_prompt_path(s, cfg, x2p, x3)
}

/// Two stride-2 transposed convolutions, a token MLP, and a per-pixel dot
/// product, resized to the image resolution.
pub fn mask_head(s: &mut Session, cfg: &ModelConfig, x_enh: Var, token: Var) -> Result<Var> {
    let mut u = x_enh;
    for stage in ["up1", "up2"] {
        let w = s.param(&format!("head.{stage}.w"))?;
        let b = s.param(&format!("head.{stage}.b"))?;
        u = s.tape.conv_transpose2x2(u, w, b)?;
        u = s.tape.gelu(u);
    }
    let mut t = token;
    for i in 0..3 {
        let w = s.param(&format!("head.token_mlp.w{i}"))?;
        let b = s.param(&format!("head.token_mlp.b{i}"))?;
        t = s.tape.matmul(t, w)?;
        t = s.tape.add_bias(t, b)?;
        if i < 2 {
            t = s.tape.gelu(t);
        }
    }
    let (uf, [h, w, _]) = flatten(&mut s.tape, u, "mask_head")?;
    let logits = s.tape.matmul_t(uf, t)?;
    let logits = s.tape.reshape(logits, [h, w, 1])?;
    let size = cfg.image_size;
    let logits = if (h, w) == (size, size) { logits } else { s.tape.resize_bilinear(logits, size, size)? };
    s.tape.reshape(logits, [size, size])
}

/// Intermediate values of one decoder pass.
#[derive(Clone, Copy, Debug)]
pub struct DecodeTrace {
    pub x_hat_i: Option<Var>,
    pub x1: Option<Var>,
    pub x2: Option<Var>,
    pub x3: Var,
    pub token: Var,
    pub x_enhanced: Var,
    pub logits: Var,
}

pub fn decode(
    s: &mut Session,
    cfg: &ModelConfig,
    variant: DecoderVariant,
    feats: &ImageFeatures,
    prompts: &PromptTokens,
) -> Result<Var> {
    Ok(decode_traced(s, cfg, variant, feats, prompts)?.logits)
}

pub fn decode_traced(
    s: &mut Session,
    cfg: &ModelConfig,
    variant: DecoderVariant,
    feats: &ImageFeatures,
    prompts: &PromptTokens,
) -> Result<DecodeTrace> {
    check_variant_params(s.params(), variant)?;
    let [h, w, _] = dims3(&s.tape, feats.x_f, "decode")?;
    let (x3, token) = expert_e3(s, cfg, feats.x_f, prompts)?;
    let uses_e1 = variant.expert_scopes().contains(&"e1");
    let uses_e2 = variant.expert_scopes().contains(&"e2");
    let (x_hat_i, x1) = if uses_e1 {
        let xh = transform_intermediate(s, cfg, feats.x_i, h, w)?;
        (Some(xh), Some(expert_e1(s, cfg, xh, feats.x_f)?))
    } else {
        (None, None)
    };
    let x2 = if uses_e2 { Some(expert_e2(s, cfg, feats.x_f)?) } else { None };

    let x_enhanced = match (variant, x1, x2) {
        (DecoderVariant::Baseline, _, _) => enhance(s, cfg, x3)?,
        (DecoderVariant::SafeClick, Some(x1), Some(x2)) => crl_fuse(s, cfg, x1, x2, x3, None)?,
        (DecoderVariant::AblateE1, None, Some(x)) | (DecoderVariant::AblateE2, Some(x), None) => {
            let (f, d) = flatten(&mut s.tape, x, "decode")?;
            let a = blend_attention(&mut s.tape, f, f, None)?;
            let xp = channel_mix(&mut s.tape, a, f, d)?;
            fuse_into_prompt_path(s, cfg, xp, x3)?
        }
        (DecoderVariant::AblateCrl, Some(x1), Some(x2)) => {
            let sum = s.tape.add(x1, x2)?;
            fuse_into_prompt_path(s, cfg, sum, x3)?
        }
        _ => unreachable!("expert scopes are fixed per variant"),
    };
    let logits = mask_head(s, cfg, x_enhanced, token)?;
    Ok(DecodeTrace { x_hat_i, x1, x2, x3, token, x_enhanced, logits })
}

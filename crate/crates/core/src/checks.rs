//! Finite-difference gradient checks for every tape primitive and every
//! decoder module, shared by the test suite and the `grad-check` command.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data::Prompt;
use crate::error::Result;
use crate::model::{
    blend_attention, contrastive_attention, crl_fuse, decode, encode_prompts, expert_e1, expert_e2, expert_e3,
    init_params, mask_head, transform_intermediate, DecoderVariant, ImageFeatures, ModelConfig,
};
use crate::params::{FreezeSet, ParamStore, Session};
use crate::tensor::{grad_check, GradCheckReport, Tape, Tensor, Var};
use crate::train::{seg_loss, stream};

pub const DEFAULT_STEP: f32 = 1e-3;
pub const DEFAULT_TOL: f32 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f32,
    pub checked: usize,
    /// Input or parameter holding the worst element.
    pub worst: String,
    pub pass: bool,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f32) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| std * rng.sample::<f32, _>(StandardNormal))
}

/// Entries bounded away from zero, for kinks at the origin.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f32 = rng.sample(StandardNormal);
        v.signum() * (0.1 + v.abs())
    })
}

/// Distinct entries at least 0.1 apart, for the max.
fn spread(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| 0.1 * i as f32 - 0.05 * n as f32).collect();
    rand::seq::SliceRandom::shuffle(&mut vals[..], rng);
    Tensor::new(shape.to_vec(), vals).expect("shape matches")
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output element matters.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = stream(seed, 0x9e37, n as u64, 0);
    let r = normal(&mut rng, &shape, 1.0 / (n as f32).sqrt());
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

type PrimFn = fn(&mut Tape, &[Var]) -> Result<Var>;

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, PrimFn)> {
    let n = |rng: &mut ChaCha8Rng, s: &[usize]| normal(rng, s, 1.0);
    vec![
        ("matmul", vec![n(rng, &[3, 4]), n(rng, &[4, 2])], |t, v| t.matmul(v[0], v[1])),
        ("matmul_t", vec![n(rng, &[3, 4]), n(rng, &[2, 4])], |t, v| t.matmul_t(v[0], v[1])),
        ("t_matmul", vec![n(rng, &[4, 3]), n(rng, &[4, 2])], |t, v| t.t_matmul(v[0], v[1])),
        ("transpose", vec![n(rng, &[3, 4])], |t, v| t.transpose(v[0])),
        ("reshape", vec![n(rng, &[3, 4])], |t, v| t.reshape(v[0], [2, 6])),
        ("add", vec![n(rng, &[3, 2]), n(rng, &[3, 2])], |t, v| t.add(v[0], v[1])),
        ("sub", vec![n(rng, &[3, 2]), n(rng, &[3, 2])], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![n(rng, &[3, 2]), n(rng, &[3, 2])], |t, v| t.mul(v[0], v[1])),
        ("div", vec![n(rng, &[3, 2]), off_zero(rng, &[3, 2]).map(|x| x.signum() + x)], |t, v| t.div(v[0], v[1])),
        ("add_bias", vec![n(rng, &[3, 4]), n(rng, &[4])], |t, v| t.add_bias(v[0], v[1])),
        ("mul_scalar", vec![n(rng, &[3, 2]), n(rng, &[1])], |t, v| t.mul_scalar(v[0], v[1])),
        ("scale", vec![n(rng, &[3, 2])], |t, v| Ok(t.scale(v[0], -1.7))),
        ("add_scalar", vec![n(rng, &[3, 2])], |t, v| Ok(t.add_scalar(v[0], 0.3))),
        ("gelu", vec![n(rng, &[3, 4])], |t, v| Ok(t.gelu(v[0]))),
        ("leaky_relu", vec![off_zero(rng, &[3, 4])], |t, v| Ok(t.leaky_relu(v[0], 0.01))),
        ("sigmoid", vec![n(rng, &[3, 4])], |t, v| Ok(t.sigmoid(v[0]))),
        ("softplus", vec![n(rng, &[3, 4])], |t, v| Ok(t.softplus(v[0]))),
        ("softmax_rows", vec![n(rng, &[3, 4])], |t, v| t.softmax_rows(v[0])),
        ("layer_norm", vec![n(rng, &[3, 4]), n(rng, &[4]), n(rng, &[4])], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ("sum", vec![n(rng, &[3, 4])], |t, v| Ok(t.sum(v[0]))),
        ("mean", vec![n(rng, &[3, 4])], |t, v| Ok(t.mean(v[0]))),
        ("max_all", vec![spread(rng, &[3, 4])], |t, v| Ok(t.max_all(v[0]))),
        ("bce_with_logits", vec![n(rng, &[4, 4])], |t, v| {
            let target = Tensor::from_fn([4, 4], |i| (i % 3 == 0) as u8 as f32);
            t.bce_with_logits(v[0], &target)
        }),
        ("conv2d", vec![n(rng, &[5, 5, 2]), n(rng, &[3, 3, 2, 3]), n(rng, &[3])], |t, v| t.conv2d(v[0], v[1], v[2], 1, 1)),
        ("conv2d_stride2", vec![n(rng, &[6, 6, 2]), n(rng, &[2, 2, 2, 3]), n(rng, &[3])], |t, v| {
            t.conv2d(v[0], v[1], v[2], 2, 0)
        }),
        ("conv_transpose2x2", vec![n(rng, &[3, 2, 2]), n(rng, &[2, 2, 2, 3]), n(rng, &[3])], |t, v| {
            t.conv_transpose2x2(v[0], v[1], v[2])
        }),
        ("resize_bilinear", vec![n(rng, &[3, 3, 2])], |t, v| t.resize_bilinear(v[0], 5, 7)),
        ("avg_pool2", vec![n(rng, &[4, 6, 2])], |t, v| t.avg_pool2(v[0])),
        ("concat_rows", vec![n(rng, &[2, 3]), n(rng, &[1, 3])], |t, v| t.concat_rows(&[v[0], v[1]])),
        ("concat_cols", vec![n(rng, &[2, 3]), n(rng, &[2, 1])], |t, v| t.concat_cols(&[v[0], v[1]])),
        ("slice_rows", vec![n(rng, &[4, 3])], |t, v| t.slice_rows(v[0], 1, 2)),
        ("slice_cols", vec![n(rng, &[3, 4])], |t, v| t.slice_cols(v[0], 1, 2)),
        ("contrastive_attention", vec![spread(rng, &[3, 3])], |t, v| contrastive_attention(t, v[0])),
        ("blend_attention", vec![n(rng, &[6, 3]), n(rng, &[6, 3]), n(rng, &[1]).map(f32::abs)], |t, v| {
            blend_attention(t, v[0], v[1], Some(v[2]))
        }),
    ]
}

/// Checks `f` with respect to every element of every input and every
/// parameter in `params`.
pub fn grad_check_module<F>(params: &ParamStore, inputs: &[Tensor], f: F, h: f32, tol: f32) -> Result<(GradCheckReport, String)>
where
    F: Fn(&mut Session, &[Var]) -> Result<Var>,
{
    let mut store = params.clone();
    for (i, t) in inputs.iter().enumerate() {
        store.insert(format!("input.{i}"), t.clone());
    }
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let input_names: Vec<String> = (0..inputs.len()).map(|i| format!("input.{i}")).collect();
    let run = |s: &mut Session| -> Result<Var> {
        let vars = input_names.iter().map(|n| s.param(n)).collect::<Result<Vec<_>>>()?;
        f(s, &vars)
    };

    let free = FreezeSet::none();
    let mut s = Session::training(&store, &free);
    let loss = run(&mut s)?;
    let grads = s.backward(loss)?;

    let mut work = store.clone();
    let eval = |work: &ParamStore| -> Result<f64> {
        let mut s = Session::inference(work);
        let loss = run(&mut s)?;
        Ok(s.tape.value(loss).item() as f64)
    };
    let mut report =
        GradCheckReport { max_rel_err: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, checked: 0, pass: true };
    for (k, name) in names.iter().enumerate() {
        let n = store.get(name)?.numel();
        for j in 0..n {
            let orig = store.get(name)?.data()[j];
            work.get_mut(name)?.data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(name)?.data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(name)?.data_mut()[j] = orig;
            let numeric = ((plus - minus) / (2.0 * h as f64)) as f32;
            let g = grads[name].data()[j];
            let err = (g - numeric).abs() / 1f32.max(g.abs()).max(numeric.abs());
            report.checked += 1;
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = err;
                report.worst = (k, j);
                report.analytic = g;
                report.numeric = numeric;
            }
        }
    }
    report.pass = report.max_rel_err < tol;
    let worst = format!("{}[{}]", names[report.worst.0], report.worst.1);
    Ok((report, worst))
}

/// Small architecture used by the module checks.
pub fn check_config() -> ModelConfig {
    ModelConfig { image_size: 16, patch_size: 4, ..ModelConfig::tiny() }
}

/// Parameters of `scopes` only, with every tensor (zero-initialised ones
/// included) jittered so no gradient path is trivially zero.
fn module_params(cfg: &ModelConfig, scopes: &[&str], rng: &mut ChaCha8Rng, seed: u64) -> Result<ParamStore> {
    let all = init_params(cfg, DecoderVariant::SafeClick, seed)?;
    Ok(all
        .iter()
        .filter(|(n, _)| scopes.iter().any(|s| crate::params::in_scope(n, s)))
        .map(|(n, t)| {
            let jitter = normal(rng, t.shape(), 0.2);
            let v = t.zip_map(&jitter, |a, b| a + b).expect("same shape");
            (n.clone(), v)
        })
        .collect())
}

type ModuleFn = Box<dyn Fn(&mut Session, &[Var]) -> Result<Var>>;

fn module_cases(rng: &mut ChaCha8Rng, seed: u64) -> Result<Vec<(&'static str, ParamStore, Vec<Tensor>, ModuleFn)>> {
    let cfg = check_config();
    let (g, c) = (cfg.grid(), cfg.dim);
    let gi = cfg.inter_grid();
    let prompts = vec![Prompt::point(5.0, 9.0), Prompt::boxed(2.0, 3.0, 11.0, 12.0)];
    let mut cases: Vec<(&'static str, ParamStore, Vec<Tensor>, ModuleFn)> = Vec::new();

    let c1 = cfg.clone();
    cases.push((
        "transform_intermediate",
        module_params(&cfg, &["transform"], rng, seed)?,
        vec![normal(rng, &[gi, gi, c], 1.0)],
        Box::new(move |s, v| {
            let y = transform_intermediate(s, &c1, v[0], g, g)?;
            project(&mut s.tape, y, seed)
        }),
    ));
    let c1 = cfg.clone();
    cases.push((
        "expert_e1",
        module_params(&cfg, &["e1"], rng, seed)?,
        vec![normal(rng, &[g, g, c], 1.0), normal(rng, &[g, g, c], 1.0)],
        Box::new(move |s, v| {
            let y = expert_e1(s, &c1, v[0], v[1])?;
            project(&mut s.tape, y, seed)
        }),
    ));
    let c1 = cfg.clone();
    cases.push((
        "expert_e2",
        module_params(&cfg, &["e2"], rng, seed)?,
        vec![normal(rng, &[g, g, c], 1.0)],
        Box::new(move |s, v| {
            let y = expert_e2(s, &c1, v[0])?;
            project(&mut s.tape, y, seed)
        }),
    ));
    let c1 = cfg.clone();
    let p1 = prompts.clone();
    cases.push((
        "expert_e3",
        module_params(&cfg, &["e3", "prompt"], rng, seed)?,
        vec![normal(rng, &[g, g, c], 1.0)],
        Box::new(move |s, v| {
            let tokens = encode_prompts(s, &c1, &p1)?;
            let (x3, token) = expert_e3(s, &c1, v[0], &tokens)?;
            let a = project(&mut s.tape, x3, seed)?;
            let b = project(&mut s.tape, token, seed ^ 1)?;
            s.tape.add(a, b)
        }),
    ));
    let c1 = cfg.clone();
    cases.push((
        "crl_fuse",
        module_params(&cfg, &["crl", "out_norm"], rng, seed)?,
        vec![normal(rng, &[g, g, c], 0.5), normal(rng, &[g, g, c], 0.5), normal(rng, &[g, g, c], 1.0)],
        Box::new(move |s, v| {
            let y = crl_fuse(s, &c1, v[0], v[1], v[2], None)?;
            project(&mut s.tape, y, seed)
        }),
    ));
    let c1 = cfg.clone();
    cases.push((
        "mask_head",
        module_params(&cfg, &["head"], rng, seed)?,
        vec![normal(rng, &[g, g, c], 1.0), normal(rng, &[1, c], 1.0)],
        Box::new(move |s, v| {
            let y = mask_head(s, &c1, v[0], v[1])?;
            project(&mut s.tape, y, seed)
        }),
    ));
    let gt = Tensor::from_fn([8, 8], |i| ((i * 7 + seed as usize) % 3 == 0) as u8 as f32);
    cases.push((
        "seg_loss",
        ParamStore::new(),
        vec![normal(rng, &[8, 8], 1.0)],
        Box::new(move |s, v| seg_loss(&mut s.tape, v[0], &gt)),
    ));
    let c1 = cfg.clone();
    let p1 = prompts;
    // decode checks that the full parameter set is present; encoder
    // entries are unused and contribute zero gradients.
    let decoder_scopes = ["encoder", "prompt", "e3", "out_norm", "head", "transform", "e1", "e2", "crl"];
    cases.push((
        "decoder_safeclick",
        module_params(&cfg, &decoder_scopes, rng, seed)?,
        vec![normal(rng, &[gi, gi, c], 1.0), normal(rng, &[g, g, c], 1.0)],
        Box::new(move |s, v| {
            let tokens = encode_prompts(s, &c1, &p1)?;
            let feats = ImageFeatures { x_i: v[0], x_f: v[1] };
            let logits = decode(s, &c1, DecoderVariant::SafeClick, &feats, &tokens)?;
            project(&mut s.tape, logits, seed)
        }),
    ));
    Ok(cases)
}

/// Runs every primitive and module check once per seed.
pub fn gradient_suite(seeds: &[u64], h: f32, tol: f32) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let mut rng = stream(seed, 0x6772, 0, 0);
        for (name, inputs, f) in primitive_cases(&mut rng) {
            let r = grad_check(|t, v| {
                let y = f(t, v)?;
                if t.value(y).numel() == 1 { Ok(y) } else { project(t, y, seed) }
            }, &inputs, h, tol)?;
            out.push(CheckResult {
                name: name.to_string(),
                seed,
                max_rel_err: r.max_rel_err,
                checked: r.checked,
                worst: format!("input.{}[{}]", r.worst.0, r.worst.1),
                pass: r.pass,
            });
        }
        for (name, params, inputs, f) in module_cases(&mut rng, seed)? {
            let (r, worst) = grad_check_module(&params, &inputs, f, h, tol)?;
            out.push(CheckResult { name: name.to_string(), seed, max_rel_err: r.max_rel_err, checked: r.checked, worst, pass: r.pass });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_one_seed() {
        let results = gradient_suite(&[11], DEFAULT_STEP, DEFAULT_TOL).unwrap();
        let failed: Vec<_> = results.iter().filter(|r| !r.pass).collect();
        assert!(failed.is_empty(), "{failed:#?}");
    }
}

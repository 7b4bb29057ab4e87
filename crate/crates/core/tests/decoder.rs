use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use safeclick::data::{PointLabel, Prompt};
use safeclick::model::{
    blend_attention, crl_fuse, decode_traced, encode_image, encode_prompts, expert_e1, expert_e2, expert_e3,
    init_params, mask_head, transform_intermediate, DecoderVariant, FeatureCache, Model, ModelConfig,
};
use safeclick::params::{ParamStore, Session};
use safeclick::tensor::{Tape, Tensor};

fn cfg() -> ModelConfig {
    ModelConfig::tiny()
}

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Init params with every tensor nudged so identities are not trivially zero.
fn params(variant: DecoderVariant, seed: u64) -> ParamStore {
    let mut p = init_params(&cfg(), variant, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let names: Vec<String> = p.names().map(str::to_string).collect();
    for n in names {
        if n.starts_with("crl.conv") {
            continue;
        }
        for v in p.get_mut(&n).unwrap().data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    p
}

fn zero(p: &mut ParamStore, names: &[&str]) {
    for n in names {
        p.get_mut(n).unwrap().data_mut().fill(0.0);
    }
}

fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

#[test]
fn transform_collapses_constant_input_to_gelu_of_beta() {
    let c = cfg();
    let mut p = params(DecoderVariant::SafeClick, 1);
    *p.get_mut("transform.conv.w").unwrap() = Tensor::eye(c.dim).reshape([1, 1, c.dim, c.dim]).unwrap();
    zero(&mut p, &["transform.conv.b"]);
    let beta = p.get("transform.norm.beta").unwrap().clone();
    let mut s = Session::inference(&p);
    let x = s.tape.constant(Tensor::full([2, 2, c.dim], 0.7));
    let y = transform_intermediate(&mut s, &c, x, 4, 4).unwrap();
    assert_eq!(s.tape.shape(y), &[4, 4, c.dim]);
    for (i, &v) in s.tape.value(y).data().iter().enumerate() {
        assert!((v as f64 - gelu_ref(beta.data()[i % c.dim] as f64)).abs() < 1e-5, "{i} {v} {}", gelu_ref(beta.data()[i % c.dim] as f64));
    }

    let x = s.tape.constant(Tensor::full([4, 4, c.dim], 0.7));
    let y = transform_intermediate(&mut s, &c, x, 4, 4).unwrap();
    assert_eq!(s.tape.shape(y), &[4, 4, c.dim]);
}

#[test]
fn experts_reduce_to_residual_when_outputs_are_zero() {
    let c = cfg();
    let mut p = params(DecoderVariant::SafeClick, 2);
    zero(&mut p, &["e1.attn.wo", "e1.mlp.w2", "e1.mlp.b2", "e2.attn.wo", "e2.mlp.w2", "e2.mlp.b2"]);
    zero(&mut p, &["e3.attn_self.wo", "e3.attn_t2i.wo", "e3.attn_i2t.wo", "e3.mlp.w2", "e3.mlp.b2"]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut s = Session::inference(&p);
    let xh = s.tape.constant(rand_tensor(&[4, 4, c.dim], &mut rng));
    let xf = s.tape.constant(rand_tensor(&[4, 4, c.dim], &mut rng));
    let x1 = expert_e1(&mut s, &c, xh, xf).unwrap();
    assert!(s.tape.value(x1).bit_eq(s.tape.value(xh)));
    let x2 = expert_e2(&mut s, &c, xf).unwrap();
    assert!(s.tape.value(x2).bit_eq(s.tape.value(xf)));
    let tokens = encode_prompts(&mut s, &c, &[Prompt::point(3.0, 4.0)]).unwrap();
    let (x3, tok) = expert_e3(&mut s, &c, xf, &tokens).unwrap();
    assert!(s.tape.value(x3).bit_eq(s.tape.value(xf)));
    assert_eq!(s.tape.shape(tok), &[1, c.dim]);
}

#[test]
fn e1_on_a_single_cell_matches_hand_computation() {
    let c = cfg();
    let mut p = params(DecoderVariant::SafeClick, 3);
    zero(&mut p, &["e1.mlp.w2", "e1.mlp.b2"]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xh = rand_tensor(&[1, 1, c.dim], &mut rng);
    let xf = rand_tensor(&[1, 1, c.dim], &mut rng);
    let mut s = Session::inference(&p);
    let (a, b) = (s.tape.constant(xh.clone()), s.tape.constant(xf.clone()));
    let x1 = expert_e1(&mut s, &c, a, b).unwrap();

    let d = c.dim;
    let xf: Vec<f64> = xf.data().iter().map(|&v| v as f64).collect();
    let mean = xf.iter().sum::<f64>() / d as f64;
    let var = xf.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    let g = p.get("e1.norm_kv.gamma").unwrap().data();
    let be = p.get("e1.norm_kv.beta").unwrap().data();
    let n: Vec<f64> =
        (0..d).map(|j| (xf[j] - mean) / (var + c.ln_eps as f64).sqrt() * g[j] as f64 + be[j] as f64).collect();
    let mat = |name: &str, v: &[f64]| -> Vec<f64> {
        let w = p.get(name).unwrap();
        (0..d).map(|j| (0..d).map(|k| v[k] * w.at2(k, j) as f64).sum()).collect()
    };
    let out = mat("e1.attn.wo", &mat("e1.attn.wv", &n));
    for j in 0..d {
        let expect = out[j] + xh.data()[j] as f64;
        assert!((s.tape.value(x1).data()[j] as f64 - expect).abs() < 1e-5, "channel {j}");
    }
}

#[test]
fn e3_ignores_point_token_order() {
    let c = cfg();
    let p = params(DecoderVariant::Baseline, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xf0 = rand_tensor(&[4, 4, c.dim], &mut rng);
    let pts = [Prompt::point(2.0, 3.0), Prompt::Point { x: 9.0, y: 1.0, label: PointLabel::Negative }, Prompt::point(12.0, 14.0)];
    let run = |order: &[usize]| {
        let mut s = Session::inference(&p);
        let xf = s.tape.constant(xf0.clone());
        let ps: Vec<Prompt> = order.iter().map(|&i| pts[i]).collect();
        let tokens = encode_prompts(&mut s, &c, &ps).unwrap();
        let (x3, _) = expert_e3(&mut s, &c, xf, &tokens).unwrap();
        s.tape.value(x3).clone()
    };
    let a = run(&[0, 1, 2]);
    let b = run(&[2, 0, 1]);
    assert!(a.max_abs_diff(&b) < 1e-5);
    assert_eq!(a.shape(), &[4, 4, c.dim]);
}

#[test]
fn blend_alpha_zero_and_symmetric_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut t = Tape::new();
    let x1 = t.constant(rand_tensor(&[16, 8], &mut rng));
    let x2 = t.constant(rand_tensor(&[16, 8], &mut rng));
    let base = blend_attention(&mut t, x1, x2, None).unwrap();
    let base = t.value(base).clone();
    let zero = t.constant(Tensor::zeros([1]));
    let a0 = blend_attention(&mut t, x1, x2, Some(zero)).unwrap();
    assert!(t.value(a0).bit_eq(&base));

    let same = blend_attention(&mut t, x2, x2, None).unwrap();
    let same = t.value(same).clone();
    for alpha in [0.0, 0.5, 1.0, 10.0] {
        let a = t.constant(Tensor::full([1], alpha));
        let m = blend_attention(&mut t, x1, x2, Some(a)).unwrap();
        for row in t.value(m).data().chunks(8) {
            assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-5);
        }
        let m = blend_attention(&mut t, x2, x2, Some(a)).unwrap();
        assert!(t.value(m).bit_eq(&same));
    }
}

#[test]
fn crl_zero_init_and_alpha_independence() {
    let c = cfg();
    let p = params(DecoderVariant::SafeClick, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut s = Session::inference(&p);
    let x1 = s.tape.constant(rand_tensor(&[4, 4, c.dim], &mut rng));
    let x2 = s.tape.constant(rand_tensor(&[4, 4, c.dim], &mut rng));
    let x3 = s.tape.constant(rand_tensor(&[4, 4, c.dim], &mut rng));

    let g = s.param("out_norm.gamma").unwrap();
    let b = s.param("out_norm.beta").unwrap();
    let n = s.tape.layer_norm(x3, g, b, c.ln_eps).unwrap();
    let expect = s.tape.leaky_relu(n, c.leaky_slope);
    let expect = s.tape.value(expect).clone();
    let fused = crl_fuse(&mut s, &c, x1, x2, x3, None).unwrap();
    assert!(s.tape.value(fused).bit_eq(&expect));

    let mut p = p.clone();
    let mut rng2 = ChaCha8Rng::seed_from_u64(66);
    for n in ["crl.conv.w", "crl.conv.b"] {
        for v in p.get_mut(n).unwrap().data_mut() {
            *v = rng2.gen_range(-0.2..0.2);
        }
    }
    let mut s = Session::inference(&p);
    let x2 = s.tape.constant(rand_tensor(&[4, 4, c.dim], &mut rng));
    let x3 = s.tape.constant(rand_tensor(&[4, 4, c.dim], &mut rng));
    let r0 = crl_fuse(&mut s, &c, x2, x2, x3, Some(0.0)).unwrap();
    let r0 = s.tape.value(r0).clone();
    for alpha in [0.5, 1.0, 10.0] {
        let r = crl_fuse(&mut s, &c, x2, x2, x3, Some(alpha)).unwrap();
        assert!(s.tape.value(r).bit_eq(&r0));
    }
    assert!(crl_fuse(&mut s, &c, x2, x2, x3, Some(-1.0)).is_err());
}

#[test]
fn zero_token_mlp_gives_zero_logits() {
    let c = cfg();
    let mut p = params(DecoderVariant::Baseline, 7);
    zero(&mut p, &["head.token_mlp.w2", "head.token_mlp.b2"]);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut s = Session::inference(&p);
    let x = s.tape.constant(rand_tensor(&[4, 4, c.dim], &mut rng));
    let tok = s.tape.constant(rand_tensor(&[1, c.dim], &mut rng));
    let logits = mask_head(&mut s, &c, x, tok).unwrap();
    assert_eq!(s.tape.shape(logits), &[16, 16]);
    assert!(s.tape.value(logits).data().iter().all(|&v| v == 0.0));
}

fn image(rng: &mut impl Rng) -> Tensor {
    rand_tensor(&[16, 16, 1], rng).map(|v| v.abs())
}

#[test]
fn baseline_and_safeclick_agree_at_init() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..5 {
        let base = Model::init(cfg(), DecoderVariant::Baseline, seed).unwrap();
        let sc = Model::init(cfg(), DecoderVariant::SafeClick, seed).unwrap();
        for _ in 0..4 {
            let img = image(&mut rng);
            let prompts = [Prompt::point(rng.gen_range(0.0..15.0), rng.gen_range(0.0..15.0))];
            let a = base.predict(&img, &prompts).unwrap();
            let b = sc.predict(&img, &prompts).unwrap();
            assert!(a.bit_eq(&b));
        }
    }
}

#[test]
fn every_variant_yields_image_sized_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = image(&mut rng);
    for v in DecoderVariant::ALL {
        let m = Model::from_parts(cfg(), v, params(v, 9)).unwrap();
        let l = m.predict(&img, &[Prompt::boxed(1.0, 2.0, 10.0, 12.0)]).unwrap();
        assert_eq!(l.shape(), &[16, 16]);
        assert!(l.all_finite());
    }
    let wrong = Model::init(cfg(), DecoderVariant::Baseline, 0).unwrap();
    assert!(Model::from_parts(cfg(), DecoderVariant::SafeClick, wrong.params).is_err());
}

#[test]
fn ablate_e1_ignores_the_intermediate_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m = Model::from_parts(cfg(), DecoderVariant::AblateE1, params(DecoderVariant::AblateE1, 10)).unwrap();
    let cache = m.features(&image(&mut rng)).unwrap();
    let moved = FeatureCache { x_i: cache.x_i.map(|v| v * 3.0 - 1.0), x_f: cache.x_f.clone() };
    let prompts = [Prompt::point(5.0, 6.0)];
    assert!(m.predict_cached(&cache, &prompts).unwrap().bit_eq(&m.predict_cached(&moved, &prompts).unwrap()));

    let sc = Model::from_parts(cfg(), DecoderVariant::SafeClick, params(DecoderVariant::SafeClick, 10)).unwrap();
    let mut sc = sc;
    for v in sc.params.get_mut("crl.conv.w").unwrap().data_mut() {
        *v = 0.05;
    }
    assert!(!sc.predict_cached(&cache, &prompts).unwrap().bit_eq(&sc.predict_cached(&moved, &prompts).unwrap()));
}

#[test]
fn prompts_reach_x3_but_not_the_experts() {
    let c = cfg();
    let p = params(DecoderVariant::SafeClick, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = image(&mut rng);
    let trace = |prompts: &[Prompt]| {
        let mut s = Session::inference(&p);
        let f = encode_image(&mut s, &c, &img).unwrap();
        let t = encode_prompts(&mut s, &c, prompts).unwrap();
        let tr = decode_traced(&mut s, &c, DecoderVariant::SafeClick, &f, &t).unwrap();
        let v = |x| s.tape.value(x).clone();
        (v(tr.x1.unwrap()), v(tr.x2.unwrap()), v(tr.x3))
    };
    let a = trace(&[Prompt::point(2.0, 2.0)]);
    let b = trace(&[Prompt::boxed(4.0, 4.0, 13.0, 11.0)]);
    assert!(a.0.bit_eq(&b.0) && a.1.bit_eq(&b.1));
    assert!(!a.2.bit_eq(&b.2));
}

#[test]
fn prompt_tokens_are_additive_in_the_label() {
    let c = cfg();
    let p = params(DecoderVariant::Baseline, 12);
    let mut s = Session::inference(&p);
    let pos = encode_prompts(&mut s, &c, &[Prompt::point(7.0, 3.0)]).unwrap();
    let neg = encode_prompts(&mut s, &c, &[Prompt::Point { x: 7.0, y: 3.0, label: PointLabel::Negative }]).unwrap();
    let bx = encode_prompts(&mut s, &c, &[Prompt::boxed(1.0, 1.0, 5.0, 5.0)]).unwrap();
    assert_eq!((s.tape.shape(pos.tokens)[0], s.tape.shape(bx.tokens)[0]), (2, 3));
    let (pe, ne) = (p.get("prompt.point_pos").unwrap(), p.get("prompt.point_neg").unwrap());
    for j in 0..c.dim {
        let d = s.tape.value(pos.tokens).data()[j] - s.tape.value(neg.tokens).data()[j];
        assert!((d - (pe.data()[j] - ne.data()[j])).abs() < 1e-6);
    }
    assert!(encode_prompts(&mut s, &c, &[Prompt::point(16.0, 3.0)]).is_err());
}

#[test]
fn encoder_shapes_and_depth_precondition() {
    let c = ModelConfig::default();
    let p = init_params(&c, DecoderVariant::Baseline, 0).unwrap();
    let img = Tensor::from_fn([64, 64, 1], |i| (i % 7) as f32 / 7.0);
    let run = || {
        let mut s = Session::inference(&p);
        let f = encode_image(&mut s, &c, &img).unwrap();
        (s.tape.value(f.x_i).clone(), s.tape.value(f.x_f).clone())
    };
    let (xi, xf) = run();
    assert_eq!((xi.shape(), xf.shape()), (&[4, 4, 64][..], &[8, 8, 64][..]));
    let (xi2, xf2) = run();
    assert!(xi.bit_eq(&xi2) && xf.bit_eq(&xf2));
    assert!(Model::init(ModelConfig { encoder_depth: 3, ..ModelConfig::default() }, DecoderVariant::Baseline, 0).is_err());
}

#[test]
fn initialisation_conventions() {
    let a = init_params(&cfg(), DecoderVariant::SafeClick, 13).unwrap();
    let b = init_params(&cfg(), DecoderVariant::SafeClick, 13).unwrap();
    assert!(a.bit_eq(&b));
    for (name, t) in a.iter() {
        if name.starts_with("crl.") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
        if name.ends_with(".gamma") {
            assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
        }
        if name.ends_with(".beta") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
}

//! Gradient-check cases, one function per layer. Each returns the measured
//! quantities with their bound.

use super::{all_params, calibrate_batch_norm, check_layer, conditioned, invariant_grad, micro_config, random, randomize, synth};
use datr_core::attention::{msa, window_partition, AttentionParams, BlockKind, TransformerBlock};
use datr_core::decoder::{Dac, Decoder, Guidance, GuidanceConfig};
use datr_core::encoder::Encoder;
use datr_core::model::Datr;
use datr_core::nn::{self, Conv2dSpec};
use datr_core::params::Init;
use datr_core::{ParamStore, Session, Tensor, Var};

pub const TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
/// Bound on the analytic gradient of parameters the loss does not depend on.
pub const INVARIANT_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct Case {
    pub name: String,
    pub value: f64,
    pub bound: f64,
}

impl Case {
    fn new(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Case { name: name.into(), value, bound }
    }

    pub fn ok(&self) -> bool {
        self.value < self.bound
    }
}

pub fn assert_all(cases: &[Case]) {
    for c in cases {
        assert!(c.ok(), "{}: {} (bound {})", c.name, c.value, c.bound);
    }
}

fn names(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

/// Splits parameters into those checked by finite differences and those the
/// loss does not depend on at all.
fn split<'a>(v: &'a [String], invariant: &[&str]) -> (Vec<&'a str>, Vec<&'a str>) {
    v.iter()
        .map(String::as_str)
        .partition(|n| !invariant.iter().any(|s| n.ends_with(s)))
}

pub fn linear() -> Vec<Case> {
    let mut store = ParamStore::new();
    nn::register_linear(&mut store, "shared/l", 3, 4, true, Init::TruncNormal(1.0), 1).unwrap();
    randomize(&mut store, 2, 1.0);
    let e = check_layer(&store, &["shared/l.w", "shared/l.b"], &[random(&[2, 5, 3], 3, 1.0)], false, |s, v| {
        nn::linear(s, v[0], "shared/l")
    });
    vec![Case::new("linear", e, TOL)]
}

pub fn layer_norm() -> Vec<Case> {
    let mut store = ParamStore::new();
    nn::register_layer_norm(&mut store, "shared/ln", 6).unwrap();
    randomize(&mut store, 4, 1.0);
    let e = check_layer(&store, &["shared/ln.gamma", "shared/ln.beta"], &[random(&[3, 6], 5, 2.0)], false, |s, v| {
        nn::layer_norm(s, v[0], "shared/ln")
    });
    vec![Case::new("layer norm", e, TOL)]
}

pub fn batch_norm() -> Vec<Case> {
    let mut store = ParamStore::new();
    nn::register_batch_norm(&mut store, "shared/bn", 3).unwrap();
    randomize(&mut store, 6, 1.0);
    store.set_buffer("shared/bn.running_mean".into(), Tensor::from_f64(&[3], &[0.2, -0.1, 0.4]).unwrap());
    store.set_buffer("shared/bn.running_var".into(), Tensor::from_f64(&[3], &[0.5, 1.5, 2.5]).unwrap());
    [true, false]
        .into_iter()
        .map(|batch_stats| {
            let e = check_layer(
                &store,
                &["shared/bn.gamma", "shared/bn.beta"],
                &[random(&[2, 3, 3, 3], 7, 1.0)],
                batch_stats,
                |s, v| nn::batch_norm(s, v[0], "shared/bn"),
            );
            Case::new(format!("batch norm (batch statistics: {batch_stats})"), e, TOL)
        })
        .collect()
}

pub fn convolutions() -> Vec<Case> {
    let specs = [
        Conv2dSpec::dense(2, 3, 3, 1),
        Conv2dSpec::dense(2, 2, 3, 2),
        Conv2dSpec::channel_wise(3, 3),
        Conv2dSpec::point_wise(3, 2),
    ];
    specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut store = ParamStore::new();
            nn::register_conv(&mut store, "shared/c", spec, true, 1).unwrap();
            randomize(&mut store, 10 + i as u64, 1.0);
            let x = random(&[2, 6, 5, spec.in_channels], 20 + i as u64, 1.0);
            let e = check_layer(&store, &["shared/c.w", "shared/c.b"], &[x], false, |s, v| {
                nn::conv2d(s, v[0], "shared/c", spec)
            });
            Case::new(format!("conv {spec:?}"), e, TOL)
        })
        .collect()
}

pub fn windowed_attention() -> Vec<Case> {
    let params = AttentionParams::new("enc/a", 4, 2, 2).unwrap();
    let mut store = ParamStore::new();
    params.register_shared(&mut store, 1).unwrap();
    params.register_query(&mut store, Some("d"), 1).unwrap();
    randomize(&mut store, 30, 0.7);
    let all = all_params(&store);
    let (checked, zero) = split(&all, &["k.b"]);
    let mut out = Vec::new();
    for shift in [0, 1] {
        let x = [random(&[2, 4, 4, 4], 31, 1.0)];
        let build = |s: &mut Session<f64>, v: &[Var]| {
            let (w, plan) = window_partition(s, v[0], 2, shift)?;
            msa(s, w, &params, Some("d"), plan.mask.as_ref())
        };
        out.push(Case::new(format!("window attention shift {shift}"), check_layer(&store, &checked, &x, false, build), TOL));
        out.push(Case::new(
            format!("window attention shift {shift}, key bias"),
            invariant_grad(&store, &zero, &x, false, build),
            INVARIANT_TOL,
        ));
    }
    out
}

pub fn transformer_blocks() -> Vec<Case> {
    let mut out = Vec::new();
    for kind in [BlockKind::Basic, BlockKind::DomainAdaptive] {
        for shift in [0, 1] {
            let block = TransformerBlock::new("enc/b", 4, 2, 2, shift, kind).unwrap();
            let mut store = ParamStore::new();
            block.register_shared(&mut store, 1).unwrap();
            block.register_domain(&mut store, "d", 1).unwrap();
            randomize(&mut store, 40, 0.7);
            let all = all_params(&store);
            let (checked, zero) = split(&all, &["k.b"]);
            let x = [random(&[2, 4, 4, 4], 41, 1.0)];
            let build = |s: &mut Session<f64>, v: &[Var]| block.forward(s, v[0], Some("d"));
            out.push(Case::new(format!("{kind:?} block shift {shift}"), check_layer(&store, &checked, &x, false, build), TOL));
            out.push(Case::new(
                format!("{kind:?} block shift {shift}, key bias"),
                invariant_grad(&store, &zero, &x, false, build),
                INVARIANT_TOL,
            ));
        }
    }
    out
}

pub fn patch_embed_and_merge() -> Vec<Case> {
    let cfg = micro_config();
    let enc = Encoder::new(cfg.encoder.clone()).unwrap();
    let mut store = ParamStore::new();
    enc.register_shared(&mut store, 1).unwrap();
    randomize(&mut store, 50, 0.7);
    let embed = [
        "shared/enc/patch_embed.w",
        "shared/enc/patch_embed.b",
        "shared/enc/patch_norm.gamma",
        "shared/enc/patch_norm.beta",
    ];
    let e1 = check_layer(&store, &embed, &[random(&[2, 16, 16, 1], 51, 1.0)], false, |s, v| {
        enc.patch_embed(s, v[0])
    });
    let merge = ["shared/enc/merge0/norm.gamma", "shared/enc/merge0/norm.beta", "shared/enc/merge0/reduction.w"];
    let e2 = check_layer(&store, &merge, &[random(&[2, 8, 8, 3], 52, 1.0)], false, |s, v| {
        enc.patch_merge(s, v[0], 0)
    });
    vec![Case::new("patch embedding", e1, TOL), Case::new("patch merging", e2, TOL)]
}

pub fn dac() -> Vec<Case> {
    let dac = Dac::new("dec/x", 3, 2);
    let mut store = ParamStore::new();
    dac.register_shared(&mut store, 1).unwrap();
    dac.register_domain(&mut store, "d", 1).unwrap();
    randomize(&mut store, 60, 1.0);
    let all = all_params(&store);
    let x = [random(&[2, 4, 4, 3], 61, 1.0)];
    let build = |s: &mut Session<f64>, v: &[Var]| dac.forward(s, v[0], "d");
    // a bias in front of batch-statistics normalization cancels
    let (checked, zero) = split(&all, &["dw.b", "pw.b"]);
    vec![
        Case::new("DAC (running statistics)", check_layer(&store, &names(&all), &x, false, build), TOL),
        Case::new("DAC (batch statistics)", check_layer(&store, &checked, &x, true, build), TOL),
        Case::new("DAC (batch statistics), biases", invariant_grad(&store, &zero, &x, true, build), INVARIANT_TOL),
    ]
}

pub fn decoder() -> Vec<Case> {
    let cfg = micro_config();
    let dec = Decoder::new(&cfg.encoder);
    let mut store = ParamStore::new();
    dec.register_shared(&mut store, 1).unwrap();
    dec.register_domain(&mut store, "d", 1, 1).unwrap();
    conditioned(&mut store, 70);
    let pyramid: Vec<Tensor<f64>> = (0..4)
        .map(|s| {
            let side = 8 >> s;
            random(&[2, side, side, cfg.encoder.stage_dim(s)], 71 + s as u64, 1.0)
        })
        .collect();
    calibrate_batch_norm(&mut store, &pyramid, |s, v| dec.decode(s, v, "d"));
    let all = all_params(&store);
    let e = check_layer(&store, &names(&all), &pyramid, false, |s, v| dec.decode(s, v, "d"));
    vec![Case::new("decoder", e, TOL)]
}

pub fn guidance() -> Vec<Case> {
    let g = Guidance::new(
        GuidanceConfig {
            width: 3,
            dilations: vec![1, 2],
            downsample: 2,
        },
        1,
    );
    let mut store = ParamStore::new();
    g.register_domain(&mut store, "d", 2, 1).unwrap();
    randomize(&mut store, 80, 0.8);
    let all = all_params(&store);
    let e = check_layer(&store, &names(&all), &[random(&[2, 8, 8, 1], 81, 1.0)], false, |s, v| {
        g.forward(s, v[0], "d")
    });
    vec![Case::new("guidance", e, TOL)]
}

pub fn full_model() -> Vec<Case> {
    let mut model = Datr::new(micro_config()).unwrap();
    let mut store = ParamStore::new();
    model.init_shared(&mut store, 1).unwrap();
    model.register_domain(&mut store, synth("d", 1), 1).unwrap();
    conditioned(&mut store, 92);
    let build = |s: &mut Session<f64>, v: &[Var]| Ok(model.forward(s, v[0], "d")?.fused);
    let x = random(&[1, 16, 16, 1], 93, 1.0);
    let pair = Tensor::new(&[2, 16, 16, 1], [x.data(), x.data()].concat()).unwrap();
    calibrate_batch_norm(&mut store, &[pair], build);
    let all = all_params(&store);
    let (checked, zero) = split(&all, &["k.b"]);
    let x = [x];
    vec![
        Case::new("full model", check_layer(&store, &checked, &x, false, build), MODEL_TOL),
        Case::new("full model, key biases", invariant_grad(&store, &zero, &x, false, build), INVARIANT_TOL),
    ]
}

pub fn suite() -> Vec<Case> {
    [
        linear(),
        layer_norm(),
        batch_norm(),
        convolutions(),
        windowed_attention(),
        transformer_blocks(),
        patch_embed_and_merge(),
        dac(),
        decoder(),
        guidance(),
        full_model(),
    ]
    .concat()
}

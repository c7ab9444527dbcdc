//! Independent reference computations. Each check returns a summary line on
//! success and a description of the first violation otherwise.

use super::{random, randomize, rng, synth};
use datr_core::attention::{msa, window_partition, window_reverse, AttentionParams, BlockKind, TransformerBlock};
use datr_core::metrics::{hand_spacing, mre, sdr};
use datr_core::model::{decode_landmarks, gaussian_target, Datr, Geometry, LandmarkSet, ModelConfig};
use datr_core::trainer::{TrainConfig, Trainer};
use datr_core::{ParamStore, Session, Tensor, Trainable};
use rand::Rng;

pub type Check = Result<String, String>;

fn linear(x: &[f64], store: &ParamStore<f64>, prefix: &str) -> Vec<f64> {
    let w = store.get(&format!("{prefix}.w")).unwrap();
    let b = store.get(&format!("{prefix}.b")).unwrap();
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    (0..cout)
        .map(|o| b.data()[o] + (0..cin).map(|i| x[i] * w.data()[i * cout + o]).sum::<f64>())
        .collect()
}

/// Attention over the whole map, token by token. Two tokens may attend to
/// each other when they fall in the same window after rolling the map by
/// `-shift` and, for shifted maps, in the same wrap-around region.
pub fn dense_attention(
    x: &Tensor<f64>,
    store: &ParamStore<f64>,
    p: &AttentionParams,
    domain: &str,
    window: usize,
    shift: usize,
) -> Vec<f64> {
    let [b, h, w, c]: [usize; 4] = x.shape().try_into().unwrap();
    let (heads, hd) = (p.heads, p.dim / p.heads);
    let side = 2 * p.window - 1;
    let table = store.get(&format!("shared/{}/rel_bias", p.path)).unwrap();
    let region = |v: usize, extent: usize| {
        if shift == 0 || v < extent - window {
            0
        } else if v < extent - shift {
            1
        } else {
            2
        }
    };
    let mut out = vec![0.0; x.numel()];
    for bi in 0..b {
        let token = |i: usize| &x.data()[(bi * h * w + i) * c..][..c];
        let rolled = |i: usize| (((i / w) + h - shift) % h, ((i % w) + w - shift) % w);
        let q: Vec<Vec<f64>> = (0..h * w).map(|i| linear(token(i), store, &format!("domain/{domain}/{}/q", p.path))).collect();
        let k: Vec<Vec<f64>> = (0..h * w).map(|i| linear(token(i), store, &format!("shared/{}/k", p.path))).collect();
        let v: Vec<Vec<f64>> = (0..h * w).map(|i| linear(token(i), store, &format!("shared/{}/v", p.path))).collect();
        for i in 0..h * w {
            let (ri, rj) = rolled(i);
            let mut merged = vec![0.0; c];
            for head in 0..heads {
                let mut logits = Vec::new();
                for j in 0..h * w {
                    let (si, sj) = rolled(j);
                    let same_window = ri / window == si / window && rj / window == sj / window;
                    let same_region = region(ri, h) == region(si, h) && region(rj, w) == region(sj, w);
                    if !(same_window && same_region) {
                        continue;
                    }
                    let dot: f64 = (0..hd).map(|t| q[i][head * hd + t] * k[j][head * hd + t]).sum();
                    let dy = (ri % window) as isize - (si % window) as isize + p.window as isize - 1;
                    let dx = (rj % window) as isize - (sj % window) as isize + p.window as isize - 1;
                    let bias = table.data()[(dy as usize * side + dx as usize) * heads + head];
                    logits.push((j, dot / (hd as f64).sqrt() + bias));
                }
                let m = logits.iter().map(|l| l.1).fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l.1 - m).exp()).sum();
                for &(j, l) in &logits {
                    let a = (l - m).exp() / z;
                    for t in 0..hd {
                        merged[head * hd + t] += a * v[j][head * hd + t];
                    }
                }
            }
            let o = linear(&merged, store, &format!("shared/{}/proj", p.path));
            out[(bi * h * w + i) * c..][..c].copy_from_slice(&o);
        }
    }
    out
}

/// Largest deviation between windowed and dense attention over maps up to 8×8.
pub fn window_deviation() -> f64 {
    let cases = [
        (4, 4, 2, 1, 1),
        (4, 4, 2, 0, 2),
        (8, 8, 4, 2, 2),
        (8, 8, 4, 0, 1),
        (8, 4, 4, 2, 2),
        (6, 6, 3, 1, 1),
        (8, 8, 2, 1, 2),
    ];
    let mut worst = 0.0f64;
    for (n, &(h, w, window, shift, heads)) in cases.iter().enumerate() {
        let dim = 4;
        let p = AttentionParams::new("enc/t/attn", dim, heads, window).unwrap();
        let mut store = ParamStore::new();
        p.register_shared(&mut store, 1).unwrap();
        p.register_query(&mut store, Some("d"), 1).unwrap();
        randomize(&mut store, 200 + n as u64, 1.0);
        let x = random(&[2, h, w, dim], 300 + n as u64, 1.0);

        let mut sess = Session::new(&store, Trainable::Nothing, false);
        let xv = sess.graph.constant(x.clone());
        let (windows, plan) = window_partition(&mut sess, xv, window, shift).unwrap();
        let y = msa(&mut sess, windows, &p, Some("d"), plan.mask.as_ref()).unwrap();
        let y = window_reverse(&mut sess, y, &plan).unwrap();
        let want = dense_attention(&x, &store, &p, "d", window, shift);
        for (a, b) in sess.graph.value(y).data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// A basic and a domain-adaptive block on the same path, with the domain
/// query tied to the shared one and unit diagonals.
pub fn block_pair(
    dim: usize,
    heads: usize,
    window: usize,
    shift: usize,
    seed: u64,
) -> (TransformerBlock, TransformerBlock, ParamStore<f64>) {
    let basic = TransformerBlock::new("enc/r", dim, heads, window, shift, BlockKind::Basic).unwrap();
    let adaptive = TransformerBlock::new("enc/r", dim, heads, window, shift, BlockKind::DomainAdaptive).unwrap();
    let mut store = ParamStore::new();
    basic.register_shared(&mut store, seed).unwrap();
    randomize(&mut store, seed, 0.5);
    adaptive.register_domain(&mut store, "d", seed).unwrap();
    for leaf in ["w", "b"] {
        let q = store.get(&format!("shared/enc/r/attn/q.{leaf}")).unwrap().clone();
        store.set(&format!("domain/d/enc/r/attn/q.{leaf}"), q).unwrap();
    }
    (basic, adaptive, store)
}

pub fn run_block(block: &TransformerBlock, store: &ParamStore<f64>, x: &Tensor<f64>, domain: Option<&str>) -> Tensor<f64> {
    let mut sess = Session::new(store, Trainable::Nothing, false);
    let v = sess.graph.constant(x.clone());
    let y = block.forward(&mut sess, v, domain).unwrap();
    sess.graph.value(y).clone()
}

/// Largest deviation between the two blocks of `block_pair` over random
/// shapes and inputs.
pub fn reduction_deviation(cases: u64) -> f64 {
    let mut r = rng(77);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let heads = [1, 2][r.random_range(0..2)];
        let dim = heads * r.random_range(1..4);
        let window = [2, 4][r.random_range(0..2)];
        let shift = if r.random_bool(0.5) { window / 2 } else { 0 };
        let (bh, bw) = (window * r.random_range(1..3), window * r.random_range(1..3));
        let (basic, adaptive, store) = block_pair(dim, heads, window, shift, 1000 + case);
        let x = random(&[r.random_range(1..3), bh, bw, dim], 2000 + case, 1.0);
        let a = run_block(&basic, &store, &x, None);
        let b = run_block(&adaptive, &store, &x, Some("d"));
        for (p, q) in a.data().iter().zip(b.data()) {
            worst = worst.max((p - q).abs());
        }
    }
    worst
}

/// Per-domain parameter count computed from the configuration alone.
pub fn symbolic_domain_count(c: &ModelConfig, landmarks: usize) -> usize {
    let e = &c.encoder;
    let dim = |s: usize| e.embed_dim << s;
    let mut total = 0;
    for s in 0..4 {
        let ch = dim(s);
        total += e.depths[s] * (ch * ch + ch + 2 * ch);
    }
    for s in 0..3 {
        let cin = dim(s + 1) + dim(s);
        total += 9 * cin + cin;
        total += 9 * dim(s) + dim(s);
    }
    total += dim(0) * landmarks + landmarks;
    let w = c.guidance.width;
    total += 9 * e.in_channels * w + w;
    total += (c.guidance.dilations.len() - 1) * (9 * w * w + w);
    total += w * landmarks + landmarks;
    total
}

/// Registers domains with 1, 19 and 37 landmarks on each configuration and
/// compares the growth with the symbolic count.
pub fn parameter_accounting(configs: &[(&str, ModelConfig)]) -> Check {
    let mut summary = Vec::new();
    for (label, config) in configs {
        let mut model = Datr::new(config.clone()).unwrap();
        let mut store = ParamStore::<f32>::new();
        for (i, n) in [1usize, 19, 37].into_iter().enumerate() {
            let before = store.total_count();
            let name = format!("d{i}");
            model.register_domain(&mut store, synth(&name, n), 0).unwrap();
            let added = store.total_count() - before;
            let want = symbolic_domain_count(config, n);
            if added != want || store.domain_count(&name) != added || model.domain_param_count(n) != added {
                return Err(format!("{label}, {n} landmarks: added {added}, symbolic {want}"));
            }
            if n == 19 {
                summary.push(format!("{label}: +{added}"));
            }
        }
    }
    Ok(format!("per-domain growth at N=19 {}", summary.join(", ")))
}

/// One optimizer step on domain `a` of a three-domain model.
pub fn domain_isolation(config: ModelConfig) -> Check {
    let domains = [synth("a", 2), synth("b", 3), synth("c", 4)];
    let g = config.input;
    let mut trainer = Trainer::new(config, &domains, TrainConfig::toy()).unwrap();
    let images = random(&[2, g.height, g.width, 1], 4, 1.0).cast::<f32>();
    let targets = Tensor::<f32>::full(&[2, g.height, g.width, 2], 0.1);
    let is_other = |n: &str| n.starts_with("domain/b/") || n.starts_with("domain/c/");

    // gradients of every other-domain parameter, bound explicitly, are zero
    let others: Vec<String> = trainer.store.names().filter(|n| is_other(n)).cloned().collect();
    {
        let mut sess = Session::new(&trainer.store, Trainable::All, true);
        let bound: Vec<_> = others.iter().map(|n| sess.param(n).unwrap()).collect();
        let x = sess.graph.constant(images.clone());
        let out = trainer.model.forward(&mut sess, x, "a").unwrap();
        let loss = sess.graph.bce(out.fused, std::sync::Arc::new(targets.clone()), 1e-7).unwrap();
        let grads = sess.graph.backward(loss).unwrap();
        for (n, v) in others.iter().zip(bound) {
            if grads.get_or_zeros(v).data().iter().any(|&g| g != 0.0) {
                return Err(format!("{n} has a nonzero gradient"));
            }
        }
    }

    let before = trainer.store.clone();
    trainer.train_step("a", images, targets, 1e-3).map_err(|e| e.to_string())?;
    let kinds = ["attn/q.w", "attn/q.b", "dam1", "dam2", "dw.w", "dw.b", "guide/conv", "guide/head", "dec/head"];
    let mut checked = 0;
    for kind in kinds {
        for d in ["b", "c"] {
            let names: Vec<&String> = before
                .names()
                .filter(|n| n.starts_with(&format!("domain/{d}/")) && n.contains(kind))
                .collect();
            if names.is_empty() {
                return Err(format!("domain {d} has no {kind}"));
            }
            for n in names {
                let (x, y) = (before.get(n).unwrap(), trainer.store.get(n).unwrap());
                if !x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()) {
                    return Err(format!("{n} changed"));
                }
                checked += 1;
            }
        }
        let moved = before
            .names()
            .filter(|n| n.starts_with("domain/a/") && n.contains(kind))
            .any(|n| before.get(n).unwrap() != trainer.store.get(n).unwrap());
        if !moved {
            return Err(format!("domain a {kind} did not move"));
        }
    }
    if trainer.adam.slots.keys().any(|k| is_other(k)) {
        return Err("optimizer state created for an untouched domain".into());
    }
    Ok(format!("{} zero-gradient tensors, {checked} bit-identical after the step", others.len()))
}

/// Decodes Gaussian targets of random interior landmarks and compares the
/// peak with the closed-form amplitude.
pub fn heatmap(cases: usize) -> Check {
    let mut r = rng(2024);
    let sigma = 3.0;
    let amplitude = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma);
    let mut worst_peak = 0.0f64;
    for case in 0..cases {
        let (h, w) = (r.random_range(16..96), r.random_range(16..96));
        let g = Geometry::new(h, w);
        let n = r.random_range(1..4);
        let coords: Vec<(f64, f64)> = (0..n)
            .map(|_| (r.random_range(1..h - 1) as f64, r.random_range(1..w - 1) as f64))
            .collect();
        let l = LandmarkSet::new(coords, g).unwrap();
        let t = gaussian_target(&l, g, sigma, false).map_err(|e| e.to_string())?;
        let decoded = decode_landmarks(&t);
        if decoded != l {
            return Err(format!("case {case}: decoded {:?}, placed {:?}", decoded.coords(), l.coords()));
        }
        for k in 0..n {
            let peak = t.data.data().iter().skip(k).step_by(n).cloned().fold(f64::MIN, f64::max);
            worst_peak = worst_peak.max((peak - amplitude).abs());
        }
    }
    if worst_peak >= 1e-9 {
        return Err(format!("peak deviates by {worst_peak:.3e}"));
    }
    Ok(format!("{cases} exact decodes, peak {amplitude:.6}, deviation {worst_peak:.1e}"))
}

/// MRE and SDR against direct recomputation, SDR monotonicity, and the hand
/// spacing rule on random endpoints.
pub fn metrics(cases: usize) -> Check {
    let mut r = rng(123);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let n = r.random_range(1..60);
        let errors: Vec<f64> = (0..n).map(|_| r.random_range(0.0..12.0)).collect();
        let mean = errors.iter().sum::<f64>() / n as f64;
        let std = (errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n as f64).sqrt();
        let (m, s) = mre(&errors).unwrap();
        worst = worst.max((m - mean).abs()).max((s - std).abs());
        let mut last = 0.0;
        for t in [0.5, 1.0, 2.0, 2.5, 3.0, 4.0, 6.0, 10.0, 20.0] {
            let mut hits = 0;
            for e in &errors {
                if *e < t {
                    hits += 1;
                }
            }
            let p = sdr(&errors, t).unwrap();
            worst = worst.max((p - 100.0 * hits as f64 / n as f64).abs());
            if p < last || !(0.0..=100.0).contains(&p) {
                return Err(format!("case {case}: SDR {p} after {last} at threshold {t}"));
            }
            last = p;
        }
    }
    let mut worst_spacing = 0.0f64;
    for _ in 0..cases {
        let p: (f64, f64) = (r.random_range(0.0..500.0), r.random_range(0.0..500.0));
        let q: (f64, f64) = (r.random_range(0.0..500.0), r.random_range(0.0..500.0));
        let d = ((p.0 - q.0) * (p.0 - q.0) + (p.1 - q.1) * (p.1 - q.1)).sqrt();
        let s = hand_spacing(p, q).unwrap();
        worst_spacing = worst_spacing.max((s - 50.0 / d).abs() / s.max(1.0));
    }
    if worst >= 1e-12 || worst_spacing >= 1e-12 {
        return Err(format!("MRE/SDR deviation {worst:.3e}, spacing deviation {worst_spacing:.3e}"));
    }
    Ok(format!("{cases} lists, max deviation {worst:.1e}; spacing max relative deviation {worst_spacing:.1e}"))
}

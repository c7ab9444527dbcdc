#![allow(dead_code)]

pub mod grads;
pub mod oracles;

use datr_core::model::{DomainSpec, Geometry, ModelConfig};
use datr_core::decoder::GuidanceConfig;
use datr_core::encoder::EncoderConfig;
use datr_core::{grad_check_report, Graph, ParamStore, Result, Session, Tensor, Trainable, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).unwrap()
}

/// `sum(out * w)` with fixed pseudo-random weights, so that no gradient
/// vanishes by symmetry (softmax rows and normalized outputs sum to
/// constants).
pub fn projected_loss(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = g.constant(random(&shape, 0xC0FFEE, 1.0));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Gradient check of a layer with respect to its inputs and the named
/// parameters, whose values are read from `store`.
pub fn check_layer<F>(
    store: &ParamStore<f64>,
    params: &[&str],
    inputs: &[Tensor<f64>],
    batch_stats: bool,
    build: F,
) -> f64
where
    F: Fn(&mut Session<f64>, &[Var]) -> Result<Var>,
{
    let mut values: Vec<Tensor<f64>> = inputs.to_vec();
    values.extend(params.iter().map(|p| store.get(p).unwrap().clone()));
    let ni = inputs.len();
    let r = grad_check_report(
        |g, vars| {
            let graph = std::mem::take(g);
            let mut sess = Session::with_graph(graph, store, Trainable::Nothing, batch_stats);
            for (name, &v) in params.iter().zip(&vars[ni..]) {
                sess.bind(name, v)?;
            }
            let out = build(&mut sess, &vars[..ni])?;
            let loss = projected_loss(&mut sess.graph, out)?;
            *g = sess.into_graph();
            Ok(loss)
        },
        &values,
        1e-4,
    )
    .unwrap();
    if r.error >= 1e-4 {
        let which = match r.param.checked_sub(ni) {
            Some(p) => params[p].to_string(),
            None => format!("input {}", r.param),
        };
        eprintln!("worst: {which}[{}] analytic {} numeric {}", r.index, r.analytic, r.numeric);
    }
    r.error
}

/// Largest analytic gradient magnitude over the named parameters, for
/// parameters the loss is invariant to (key biases under softmax, biases in
/// front of batch-statistics normalization).
pub fn invariant_grad<F>(
    store: &ParamStore<f64>,
    params: &[&str],
    inputs: &[Tensor<f64>],
    batch_stats: bool,
    build: F,
) -> f64
where
    F: Fn(&mut Session<f64>, &[Var]) -> Result<Var>,
{
    let mut sess = Session::new(store, Trainable::All, batch_stats);
    let vars: Vec<Var> = inputs.iter().map(|t| sess.graph.constant(t.clone())).collect();
    let out = build(&mut sess, &vars).unwrap();
    let loss = projected_loss(&mut sess.graph, out).unwrap();
    let grads = sess.graph.backward(loss).unwrap();
    let by_name = sess.param_grads(&grads);
    params
        .iter()
        .flat_map(|p| by_name[*p].data().to_vec())
        .fold(0.0, |m, g| m.max(g.abs()))
}

/// Every parameter name in the store except batch-norm running buffers.
pub fn all_params(store: &ParamStore<f64>) -> Vec<String> {
    store.names().cloned().collect()
}

/// Smallest configuration with the full architecture: 16×16 input, patch 2.
/// Width 3 keeps layer norm away from the two-channel case, whose output is
/// almost constant.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            patch_size: 2,
            in_channels: 1,
            embed_dim: 3,
            depths: [1, 1, 1, 1],
            heads: [1, 1, 1, 2],
            window: 2,
        },
        guidance: GuidanceConfig {
            width: 2,
            dilations: vec![1, 1, 1, 1, 2],
            downsample: 4,
        },
        input: Geometry::new(16, 16),
    }
}

/// A small but complete configuration for fast structural tests.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            patch_size: 2,
            in_channels: 1,
            embed_dim: 4,
            depths: [1, 2, 1, 1],
            heads: [1, 2, 2, 4],
            window: 2,
        },
        guidance: GuidanceConfig {
            width: 4,
            dilations: vec![1, 1, 1, 1, 2],
            downsample: 4,
        },
        input: Geometry::new(32, 32),
    }
}

pub fn synth(name: &str, n: usize) -> DomainSpec {
    DomainSpec::synthetic(name, n)
}

/// Replaces every parameter with uniform values in `(-scale, scale)` so that
/// gradients are not dominated by tiny initial weights.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let names: Vec<String> = store.names().cloned().collect();
    for (i, n) in names.iter().enumerate() {
        let shape = store.get(n).unwrap().shape().to_vec();
        store.set(n, random(&shape, seed.wrapping_add(i as u64), scale)).unwrap();
    }
}

pub fn params_with_prefix(store: &ParamStore<f64>, prefix: &str) -> Vec<String> {
    store.names().filter(|n| n.starts_with(prefix)).cloned().collect()
}

/// A well-conditioned point for gradient checks through deep ReLU stacks.
///
/// Weights preserve activation scale, so deep gradients do not shrink into
/// the roundoff floor of the central difference. Every ReLU input is kept
/// well above zero: normalization shifts are large and positive, and the
/// guidance convolutions use positive weights and biases. Central differences
/// straddling a ReLU kink do not estimate the derivative.
pub fn conditioned(store: &mut ParamStore<f64>, seed: u64) {
    let names: Vec<String> = store.names().cloned().collect();
    for (i, n) in names.iter().enumerate() {
        let shape = store.get(n).unwrap().shape().to_vec();
        let mut r = rng(seed.wrapping_add(i as u64));
        let count: usize = shape.iter().product();
        let guide_conv = n.contains("/guide/conv");
        let fan_in: usize = shape[..shape.len() - 1].iter().product();
        let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..count).map(|_| r.random_range(lo..hi)).collect() };
        let data = if n.ends_with(".w") && guide_conv {
            draw(0.0, 2.0 / fan_in as f64)
        } else if n.ends_with(".w") {
            let a = (3.0 / fan_in as f64).sqrt();
            draw(-a, a)
        } else if n.ends_with(".b") && guide_conv {
            draw(2.5, 3.5)
        } else if n.ends_with("bn.beta") {
            draw(3.7, 4.3)
        } else if n.ends_with("gamma") || n.ends_with("dam1") || n.ends_with("dam2") {
            draw(0.7, 1.3)
        } else if n.ends_with("rel_bias") {
            draw(-0.5, 0.5)
        } else {
            draw(-0.3, 0.3)
        };
        store.set(n, Tensor::new(&shape, data).unwrap()).unwrap();
    }
}

/// Sets every batch-norm running statistic to the batch statistics of one
/// training-mode pass, so that inference-mode normalization is standardizing.
pub fn calibrate_batch_norm<F>(store: &mut ParamStore<f64>, inputs: &[Tensor<f64>], build: F)
where
    F: Fn(&mut Session<f64>, &[Var]) -> Result<Var>,
{
    let stats = {
        let mut sess = Session::new(store, Trainable::Nothing, true);
        let vars: Vec<Var> = inputs.iter().map(|t| sess.graph.constant(t.clone())).collect();
        build(&mut sess, &vars).unwrap();
        sess.take_batch_stats()
    };
    for (prefix, st) in stats {
        store.update_running_stats(&prefix, &st, 1.0).unwrap();
    }
}

//! End-to-end acceptance checks. Each criterion prints one PASS or FAIL line;
//! the test fails at the end if any criterion failed.

mod common;

use std::time::{Duration, Instant};

use common::oracles::{self, Check};
use common::{grads, micro_config, small_config};
use datr_core::datasets::{gen_synthetic, DatasetManifest, Split, SynthOptions};
use datr_core::model::{DomainSpec, ModelConfig};
use datr_core::trainer::{evaluate, prepare, start_transfer, Checkpoint, TrainConfig, Trainer};
use datr_core::{ParamStore, Session, Tensor};

struct Outcome {
    lines: Vec<String>,
    failed: usize,
}

impl Outcome {
    fn record(&mut self, name: &str, check: Check, took: Duration) {
        let line = match check {
            Ok(detail) => format!("PASS  {name}: {detail} ({:.1}s)", took.as_secs_f64()),
            Err(detail) => {
                self.failed += 1;
                format!("FAIL  {name}: {detail} ({:.1}s)", took.as_secs_f64())
            }
        };
        println!("{line}");
        self.lines.push(line);
    }

    fn run(&mut self, name: &str, f: impl FnOnce() -> Check) {
        let t = Instant::now();
        let check = f();
        self.record(name, check, t.elapsed());
    }
}

fn bound(value: f64, limit: f64, what: &str) -> Check {
    if value < limit {
        Ok(format!("{what} {value:.3e} < {limit:e}"))
    } else {
        Err(format!("{what} {value:.3e} >= {limit:e}"))
    }
}

fn gradient_suite() -> Check {
    let t = Instant::now();
    let cases = grads::suite();
    let took = t.elapsed();
    if let Some(c) = cases.iter().find(|c| !c.ok()) {
        return Err(format!("{}: {:.3e} (bound {:e})", c.name, c.value, c.bound));
    }
    if took > Duration::from_secs(120) {
        return Err(format!("all {} cases pass but took {:.0}s", cases.len(), took.as_secs_f64()));
    }
    let layer = cases.iter().filter(|c| c.bound == grads::TOL).map(|c| c.value).fold(0.0, f64::max);
    let model = cases.iter().find(|c| c.bound == grads::MODEL_TOL).map_or(f64::NAN, |c| c.value);
    Ok(format!(
        "{} cases, worst layer {layer:.2e}, full model {model:.2e}",
        cases.len()
    ))
}

fn pyramid() -> Check {
    let config = ModelConfig::paper();
    let model = datr_core::model::Datr::new(config.clone()).map_err(|e| e.to_string())?;
    let mut store = ParamStore::<f32>::new();
    model.init_shared(&mut store, 1).map_err(|e| e.to_string())?;
    let mut m = model.clone();
    m.register_domain(&mut store, DomainSpec::synthetic("a", 19), 1).map_err(|e| e.to_string())?;
    let mut sess = Session::inference(&store);
    let x = sess.graph.constant(Tensor::<f32>::full(&[1, 512, 512, 1], 0.5));
    let stages = m.encoder.encode(&mut sess, x, "a").map_err(|e| e.to_string())?;
    let got: Vec<Vec<usize>> = stages.iter().map(|&v| sess.graph.shape(v).to_vec()).collect();
    let want = [[1, 128, 128, 128], [1, 64, 64, 256], [1, 32, 32, 512], [1, 16, 16, 1024]];
    let text = got
        .iter()
        .map(|s| format!("{}²×{}", s[1], s[3]))
        .collect::<Vec<_>>()
        .join(", ");
    if got.iter().zip(&want).all(|(g, w)| g == w) && got.len() == 4 {
        Ok(text)
    } else {
        Err(format!("got {text}"))
    }
}

fn toy_data() -> Vec<DatasetManifest> {
    [("alpha", 3), ("beta", 5)]
        .iter()
        .zip(100..)
        .map(|(&(n, k), seed)| gen_synthetic(&DomainSpec::synthetic(n, k), 20, seed, SynthOptions::default()).unwrap())
        .collect()
}

fn toy_config() -> TrainConfig {
    TrainConfig {
        seed: 7,
        normalize_peak: true,
        ..TrainConfig::toy()
    }
}

fn new_trainer(manifests: &[DatasetManifest], config: TrainConfig) -> Trainer {
    let specs: Vec<DomainSpec> = manifests.iter().map(|m| m.spec.clone()).collect();
    Trainer::new(ModelConfig::toy(), &specs, config).unwrap()
}

/// Trains the toy model to completion. Returns the trainer, or a failure.
fn toy_training(manifests: &[DatasetManifest]) -> Result<(Trainer, String), String> {
    let mut tr = new_trainer(manifests, toy_config());
    let data: Vec<_> = manifests
        .iter()
        .map(|m| prepare(m, tr.model.config.input, &tr.config).unwrap())
        .collect();
    while !tr.finished() {
        tr.run_epoch(&data).map_err(|e| e.to_string())?;
    }
    let best = tr.best_checkpoint();
    let mut detail = format!("{} steps", tr.step);
    let mut ok = tr.step <= 500;
    for m in manifests {
        let e = evaluate(&tr.model, &best.params, m, Split::Train, false).map_err(|e| e.to_string())?;
        detail += &format!(", {} train MRE {:.3} px", m.spec.name, e.report.mre);
        ok &= e.report.mre < 3.0;
    }

    // a second run from scratch repeats the loss sequence bit for bit
    let prefix = 100;
    let mut again = new_trainer(manifests, TrainConfig { max_steps: Some(prefix), ..toy_config() });
    while !again.finished() {
        again.run_epoch(&data).map_err(|e| e.to_string())?;
    }
    let same = again.losses.iter().zip(&tr.losses).all(|(a, b)| a.to_bits() == b.to_bits());
    detail += &format!(", first {prefix} losses {}", if same { "bit-identical on rerun" } else { "differ on rerun" });
    ok &= same && again.losses.len() == prefix as usize;
    if ok {
        Ok((tr, detail))
    } else {
        Err(detail)
    }
}

fn transfer(base: &Checkpoint) -> Check {
    let gamma = gen_synthetic(&DomainSpec::synthetic("gamma", 4), 20, 300, SynthOptions::default()).unwrap();
    let cfg = TrainConfig {
        max_steps: Some(300),
        epochs: 1000,
        ..toy_config()
    };
    let checksum = base.shared_checksum();
    let mut tr = start_transfer(base, gamma.spec.clone(), cfg, None).map_err(|e| e.to_string())?;
    let data = prepare(&gamma, tr.model.config.input, &tr.config).unwrap();
    let mut checked = 0usize;
    while !tr.finished() {
        tr.run_epoch_with(std::slice::from_ref(&data), |t| {
            if datr_core::trainer::shared_checksum(&t.store) != checksum {
                return Err(datr_core::Error::Contract(format!("shared parameters changed at step {}", t.step)));
            }
            checked += 1;
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    }
    let best = tr.best_checkpoint();
    if best.shared_checksum() != checksum {
        return Err("selected checkpoint has different shared parameters".into());
    }
    let e = evaluate(&tr.model, &best.params, &gamma, Split::Train, false).map_err(|e| e.to_string())?;
    let detail = format!(
        "checksum unchanged over {checked} steps, gamma train MRE {:.3} px after {} steps",
        e.report.mre, tr.step
    );
    if e.report.mre < 4.0 && tr.step <= 300 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn checkpoint_round_trip(ck: &Checkpoint, manifests: &[DatasetManifest]) -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    ck.save(&a).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&a).map_err(|e| e.to_string())?;
    loaded.save(&b).map_err(|e| e.to_string())?;
    let reloaded = Checkpoint::load(&b).map_err(|e| e.to_string())?;
    if ck.param_section() != reloaded.param_section() {
        return Err("parameter sections differ".into());
    }
    if std::fs::read(&a).unwrap() != std::fs::read(&b).unwrap() {
        return Err("files differ".into());
    }
    let model = ck.build_model().map_err(|e| e.to_string())?;
    let again = reloaded.build_model().map_err(|e| e.to_string())?;
    for m in manifests {
        let x = evaluate(&model, &ck.params, m, Split::Train, false).map_err(|e| e.to_string())?;
        let y = evaluate(&again, &reloaded.params, m, Split::Train, false).map_err(|e| e.to_string())?;
        if x.report != y.report || x.predictions != y.predictions {
            return Err(format!("evaluation of {} differs after reload", m.spec.name));
        }
    }
    Ok(format!("{} parameter bytes identical, evaluation identical", ck.param_section().len()))
}

#[test]
fn acceptance() {
    let mut out = Outcome {
        lines: Vec::new(),
        failed: 0,
    };
    out.run("gradient suite", gradient_suite);
    out.run("reduction oracle", || bound(oracles::reduction_deviation(100), 1e-6, "max deviation"));
    out.run("domain isolation", || oracles::domain_isolation(micro_config()));
    out.run("parameter accounting", || {
        oracles::parameter_accounting(&[
            ("micro", micro_config()),
            ("small", small_config()),
            ("toy", ModelConfig::toy()),
            ("paper", ModelConfig::paper()),
        ])
    });
    out.run("windowed attention oracle", || bound(oracles::window_deviation(), 1e-6, "max deviation"));
    out.run("heatmap self-consistency", || oracles::heatmap(1000));
    out.run("metrics oracle", || oracles::metrics(1000));
    out.run("pyramid shape law", pyramid);

    let manifests = toy_data();
    let t = Instant::now();
    match toy_training(&manifests) {
        Ok((trainer, detail)) => {
            out.record("toy multi-domain training", Ok(detail), t.elapsed());
            let base = trainer.best_checkpoint();
            out.run("transfer protocol", || transfer(&base));
            out.run("checkpoint round trip", || checkpoint_round_trip(&base, &manifests));
        }
        Err(detail) => {
            out.record("toy multi-domain training", Err(detail), t.elapsed());
            out.record("transfer protocol", Err("no base checkpoint".into()), Duration::ZERO);
            out.record("checkpoint round trip", Err("no base checkpoint".into()), Duration::ZERO);
        }
    }

    println!("\n{} of {} criteria pass", out.lines.len() - out.failed, out.lines.len());
    assert_eq!(out.failed, 0, "\n{}", out.lines.join("\n"));
}

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use datr_core::datasets::{
    gen_synthetic, load_dataset, load_domain, load_image, resize_image, DatasetManifest, Split, SynthOptions,
};
use datr_core::metrics::EvalReport;
use datr_core::model::{decode_landmarks, DomainSpec, Geometry};
use datr_core::trainer::{
    evaluate as eval_split, prepare, stack, start_transfer, Checkpoint, EpochLog, PreparedDomain, Trainer,
};

use crate::config::RunConfig;
use crate::export;
use crate::{CliError, Common};

const NAMES: [&str; 8] = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta"];

#[derive(Args, Debug)]
pub struct GenSynth {
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    domains: u64,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    per_domain: u64,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(16..))]
    size: u64,
    /// Landmarks per domain, cycled over the domains.
    #[arg(long, value_delimiter = ',', default_value = "3,5,4")]
    landmarks: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct Train {
    /// Dataset root with one directory per domain.
    #[arg(long)]
    data: PathBuf,
    /// Continue from `last.ckpt` in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
pub struct Evaluate {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root, or a single domain directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Resize the fused heatmap to the image before decoding.
    #[arg(long)]
    resize_heatmap: bool,
}

#[derive(Args, Debug)]
pub struct Predict {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    domain: String,
    /// Also write fused, fine and guidance heatmaps and a landmark overlay.
    #[arg(long)]
    export_heatmaps: bool,
    #[arg(long)]
    resize_heatmap: bool,
    /// Image files or directories of images.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Transfer {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of the new domain.
    #[arg(long)]
    data: PathBuf,
    /// Domain whose parameters initialize the new one; the first by default.
    #[arg(long)]
    donor: Option<String>,
}

fn out_dir(common: &Common, allow_existing: bool) -> Result<PathBuf, CliError> {
    let out = common
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("--out is required".into()))?;
    let busy = fs::read_dir(&out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if busy && !allow_existing && !common.force {
        return Err(CliError::Usage(format!(
            "{} is not empty (use --force to write into it)",
            out.display()
        )));
    }
    fs::create_dir_all(&out)?;
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn split_arg(s: &str) -> Result<Split, CliError> {
    s.parse().map_err(|e: datr_core::Error| CliError::Usage(e.to_string()))
}

fn load_data(path: &Path) -> Result<Vec<DatasetManifest>, CliError> {
    if path.join("domain.cfg").is_file() {
        Ok(vec![load_domain(path)?])
    } else {
        Ok(load_dataset(path)?)
    }
}

pub fn gen_synth(common: &Common, args: GenSynth) -> Result<(), CliError> {
    if args.landmarks.is_empty() || args.landmarks.contains(&0) {
        return Err(CliError::Usage("--landmarks needs positive counts".into()));
    }
    let out = out_dir(common, false)?;
    let seed = common.seed.unwrap_or(7);
    write(
        &out.join("gen-synth.cfg"),
        &format!(
            "domains={}\nper_domain={}\nsize={}\nlandmarks={}\nseed={seed}\n",
            args.domains,
            args.per_domain,
            args.size,
            args.landmarks.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
        ),
    )?;
    let opts = SynthOptions {
        size: args.size as usize,
        ..SynthOptions::default()
    };
    for i in 0..args.domains as usize {
        let name = NAMES.get(i).map_or_else(|| format!("domain{i}"), |n| n.to_string());
        let spec = DomainSpec::synthetic(name, args.landmarks[i % args.landmarks.len()]);
        let m = gen_synthetic(&spec, args.per_domain as usize, seed + i as u64, opts)?;
        datr_core::datasets::write_domain(&out, &m)?;
        println!(
            "{}: {} landmarks, {} train, {} val",
            spec.name,
            spec.landmarks,
            m.train.len(),
            m.val.len()
        );
    }
    Ok(())
}

/// Appends one CSV row per epoch, writing the header for a new file.
struct EpochCsv {
    path: PathBuf,
}

impl EpochCsv {
    fn new(path: PathBuf, domains: &[String], fresh: bool) -> Result<Self, CliError> {
        if fresh || !path.exists() {
            let mut header = String::from("epoch,step,lr,train_loss,val_total");
            for d in domains {
                header += &format!(",val_{d}");
            }
            write(&path, &(header + "\n"))?;
        }
        Ok(EpochCsv { path })
    }

    fn push(&self, log: &EpochLog, step: u64) -> Result<(), CliError> {
        let mut row = format!("{},{},{},{},{}", log.epoch, step, log.lr, log.train_loss, log.val_total);
        for (_, v) in &log.val {
            row += &format!(",{v}");
        }
        let mut f = OpenOptions::new().append(true).open(&self.path)?;
        writeln!(f, "{row}")?;
        Ok(())
    }
}

/// Runs epochs to completion, logging and checkpointing after each.
fn run(trainer: &mut Trainer, data: &[PreparedDomain], out: &Path, fresh: bool) -> Result<(), CliError> {
    let names: Vec<String> = data.iter().map(|d| d.name.clone()).collect();
    let csv = EpochCsv::new(out.join("log.csv"), &names, fresh)?;
    while !trainer.finished() {
        let log = trainer.run_epoch(data)?;
        csv.push(&log, trainer.step)?;
        trainer.checkpoint().save(&out.join("last.ckpt"))?;
        trainer.best_checkpoint().save(&out.join("best.ckpt"))?;
        println!(
            "epoch {:>4} step {:>6} lr {:.2e} train {:.5} val {:.5}",
            log.epoch, trainer.step, log.lr, log.train_loss, log.val_total
        );
    }
    println!(
        "best validation loss {:.5}; wrote {}",
        trainer.best_val_loss(),
        out.join("best.ckpt").display()
    );
    Ok(())
}

pub fn train(common: &Common, args: Train) -> Result<(), CliError> {
    let out = out_dir(common, args.resume)?;
    let cfg = RunConfig::resolve(
        common.preset.as_deref(),
        common.config.as_deref(),
        &common.overrides,
        common.seed,
        !args.resume,
    )?;
    let manifests = load_data(&args.data)?;
    let mut trainer = if args.resume {
        let last = Checkpoint::load(&out.join("last.ckpt"))?;
        let best_path = out.join("best.ckpt");
        let best = if best_path.exists() { Some(Checkpoint::load(&best_path)?) } else { None };
        let t = Trainer::resume(&last, best.as_ref(), cfg.train.clone())?;
        println!("resuming at epoch {} step {}", t.epoch, t.step);
        t
    } else {
        let specs: Vec<DomainSpec> = manifests.iter().map(|m| m.spec.clone()).collect();
        Trainer::new(cfg.model.clone(), &specs, cfg.train.clone())?
    };
    let effective = RunConfig {
        model: trainer.model.config.clone(),
        ..cfg
    };
    write(&out.join("config.txt"), &effective.to_text())?;
    let data = manifests
        .iter()
        .map(|m| prepare(m, trainer.model.config.input, &trainer.config))
        .collect::<Result<Vec<_>, _>>()?;
    run(&mut trainer, &data, &out, !args.resume)
}

pub fn evaluate(common: &Common, args: Evaluate) -> Result<(), CliError> {
    let split = split_arg(&args.split)?;
    let out = match &common.out {
        Some(_) => Some(out_dir(common, true)?),
        None => None,
    };
    if let Some(o) = &out {
        write(
            &o.join("evaluate.cfg"),
            &format!(
                "checkpoint={}\ndata={}\nsplit={}\nresize_heatmap={}\n",
                args.checkpoint.display(),
                args.data.display(),
                args.split,
                args.resize_heatmap
            ),
        )?;
    }
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.build_model()?;
    let manifests = load_data(&args.data)?;
    let mut reports = Vec::new();
    for m in &manifests {
        reports.push(eval_split(&model, &ck.params, m, split, args.resize_heatmap)?.report);
    }
    let table = EvalReport::table(&reports);
    print!("{table}");
    if let Some(o) = &out {
        write(&o.join("report.txt"), &table)?;
        let kv: String = reports.iter().map(EvalReport::key_values).collect();
        write(&o.join("report.kv"), &kv)?;
    }
    Ok(())
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "pgm")
    )
}

fn collect_images(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| is_image(f))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(CliError::Usage("no input images".into()));
    }
    Ok(files)
}

pub fn predict(common: &Common, args: Predict) -> Result<(), CliError> {
    let out = out_dir(common, true)?;
    write(
        &out.join("predict.cfg"),
        &format!(
            "checkpoint={}\ndomain={}\nexport_heatmaps={}\nresize_heatmap={}\n",
            args.checkpoint.display(),
            args.domain,
            args.export_heatmaps,
            args.resize_heatmap
        ),
    )?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.build_model()?;
    model.domain(&args.domain)?;
    let input = model.config.input;
    for path in collect_images(&args.inputs)? {
        let image = load_image(&path)?;
        let geom = Geometry::new(image.shape()[0], image.shape()[1]);
        let resized = resize_image(&image, input)?;
        let [fused, fine, guidance] = model
            .predict(&ck.params, &stack([&resized])?, &args.domain)?
            .pop()
            .ok_or_else(|| CliError::Data("empty prediction".into()))?;
        let landmarks = if args.resize_heatmap {
            decode_landmarks(&fused.resized(geom)?)
        } else {
            decode_landmarks(&fused).rescaled(geom)
        };
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| CliError::Data(format!("{}: bad file name", path.display())))?
            .to_string();
        let csv: String = landmarks
            .coords()
            .iter()
            .enumerate()
            .map(|(n, (r, c))| format!("{n},{r},{c}\n"))
            .collect();
        write(&out.join(format!("{stem}.csv")), &csv)?;
        if args.export_heatmaps {
            export::write_heatmaps(&out, &stem, &[fused, fine, guidance])?;
            export::write_overlay(&out.join(format!("{stem}_overlay.png")), &image, &landmarks)?;
        }
        println!("{}: {} landmarks", path.display(), landmarks.len());
    }
    Ok(())
}

pub fn transfer(common: &Common, args: Transfer) -> Result<(), CliError> {
    let out = out_dir(common, false)?;
    let cfg = RunConfig::resolve(
        common.preset.as_deref(),
        common.config.as_deref(),
        &common.overrides,
        common.seed,
        false,
    )?;
    let base = Checkpoint::load(&args.checkpoint)?;
    let manifest = load_domain(&args.data)?;
    let mut trainer = start_transfer(&base, manifest.spec.clone(), cfg.train.clone(), args.donor.as_deref())?;
    let effective = RunConfig {
        model: trainer.model.config.clone(),
        ..cfg
    };
    write(
        &out.join("config.txt"),
        &format!(
            "{}base={}\ndonor={}\n",
            effective.to_text(),
            args.checkpoint.display(),
            args.donor.as_deref().unwrap_or("first")
        ),
    )?;
    let checksum = base.shared_checksum();
    println!("frozen parameters: {} (shared)", trainer.store.shared_count());
    println!(
        "trainable parameters: {} (domain {})",
        trainer.store.domain_count(&manifest.spec.name),
        manifest.spec.name
    );
    let data = prepare(&manifest, trainer.model.config.input, &trainer.config)?;
    run(&mut trainer, &[data], &out, true)?;
    let after = Checkpoint::load(&out.join("best.ckpt"))?.shared_checksum();
    if after != checksum {
        return Err(CliError::Numeric("shared parameters changed during transfer".into()));
    }
    println!("shared checksum {checksum} unchanged");
    Ok(())
}

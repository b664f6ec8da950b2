mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use sdn_core::analyzer::{analyze, count_depth, count_params};
use sdn_core::data::{
    self, load_dataset, read_pgm, read_ppm, synth_dataset, write_dataset, write_pgm, SynthSpec,
};
use sdn_core::gradcheck::{graph_spot_check, run_op_suite, OP_SUITES};
use sdn_core::trainer::train_loop;
use sdn_core::{weights, EncoderKind, Error, EvalAccumulator, SdnModel, TrainConfig};

use crate::config::{parse_encoder, ModelSpec, MODEL_FILE};

#[derive(Parser)]
#[command(
    name = "sdn",
    version,
    about = "Stacked deconvolutional networks for semantic segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic shapes dataset with a manifest.
    Synth(SynthArgs),
    /// Train a network on a dataset manifest.
    Train(TrainArgs),
    /// Predict label maps for a dataset or a single PPM image.
    Infer(InferArgs),
    /// Mean IoU and Global Avg of a prediction directory against ground truth.
    Eval(EvalArgs),
    /// Parameter, depth and receptive-field accounting.
    Analyze(AnalyzeArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Architecture flags; they override the run file.
#[derive(Args)]
struct ModelArgs {
    /// Run file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    units: Option<usize>,
    #[arg(long, value_parser = parse_encoder)]
    encoder: Option<EncoderKind>,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest file or dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Start from these weights instead of a fresh initialization.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Manifest, dataset directory or a single .ppm image.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    scales: Vec<f64>,
    #[arg(long)]
    mirror: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted .pgm label maps.
    #[arg(long)]
    pred: PathBuf,
    /// Directory holding ground-truth maps with the same file names.
    #[arg(long)]
    gt: PathBuf,
    /// Number of classes; defaults to the largest label seen plus one.
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Every op suite plus the whole-network check (the default).
    #[arg(long)]
    all: bool,
    /// Run only the named op suites.
    #[arg(long = "op")]
    ops: Vec<String>,
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
}

fn resolve(
    args: &ModelArgs,
    train: &mut TrainConfig,
    fallback: Option<&Path>,
) -> Result<ModelSpec> {
    let mut model = ModelSpec::default();
    if let Some(path) = args.config.as_deref().or(fallback.filter(|p| p.exists())) {
        config::read(path, &mut model, train)?;
    }
    if let Some(u) = args.units {
        model.units = u;
    }
    if let Some(e) = args.encoder {
        model.encoder = e;
    }
    Ok(model)
}

fn synth(a: &SynthArgs) -> Result<()> {
    let d = synth_dataset(&SynthSpec::new(a.count, a.classes, a.size, a.seed))?;
    let manifest = write_dataset(&a.out, &d)?;
    println!(
        "wrote {} samples to {}",
        d.samples.len(),
        manifest.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut tc = TrainConfig::desk_profile(1000);
    let spec = resolve(&a.model, &mut tc, None)?;
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    if let Some(m) = a.max_iter {
        tc.max_iter = m;
    }
    let data = load_dataset(&a.data)?;
    let classes = spec.classes.unwrap_or(data.classes);
    if classes != data.classes {
        return Err(Error::Data(format!(
            "run file says {classes} classes, dataset has {}",
            data.classes
        ))
        .into());
    }
    let mut model: SdnModel<f32> = SdnModel::new(spec.build(classes)?, tc.seed)?;
    if let Some(w) = &a.weights {
        weights::load(w, &mut model.net)?;
    }
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join(MODEL_FILE), spec.render(classes))?;
    info!(
        "training {} parameters for {} iterations",
        model.net.param_count(),
        tc.max_iter
    );
    let rows = train_loop(&mut model, &data, &tc, Some(&a.out))?;
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        println!(
            "loss {:.4} -> {:.4} over {} iterations",
            first.total,
            last.total,
            rows.len()
        );
    }
    println!("weights written to {}", a.out.join("final.sdnw").display());
    Ok(())
}

fn infer(a: &InferArgs) -> Result<()> {
    let fallback = a.weights.parent().map(|p| p.join(MODEL_FILE));
    let spec = resolve(
        &a.model,
        &mut TrainConfig::desk_profile(0),
        fallback.as_deref(),
    )?;
    let single = a.data.extension().is_some_and(|e| e == "ppm");
    // (image, output name, padding mean)
    let jobs: Vec<(sdn_core::Tensor4<f32>, String, [f64; 3])> = if single {
        let image = read_ppm(&a.data)?;
        let mean = data::mean_pixel(&[data::Sample::new(
            image.clone(),
            sdn_core::LabelMap::filled(1, image.shape().h, image.shape().w, 0),
        )?]);
        let stem = a
            .data
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("prediction");
        vec![(image, format!("{stem}.pgm"), mean)]
    } else {
        let d = load_dataset(&a.data)?;
        let manifest = if a.data.is_dir() {
            a.data.join(data::MANIFEST_NAME)
        } else {
            a.data.clone()
        };
        let entries = data::Manifest::parse(&fs::read_to_string(&manifest)?)?.entries;
        d.samples
            .into_iter()
            .zip(entries)
            .map(|(s, (_, lbl))| {
                let name = lbl
                    .file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or("prediction.pgm")
                    .to_string();
                (s.image, name, d.mean)
            })
            .collect()
    };
    let classes = spec.classes.ok_or_else(|| {
        Error::Usage("number of classes unknown: pass --config with a 'classes' line".into())
    })?;
    let mut model: SdnModel<f32> = SdnModel::new(spec.build(classes)?, 0)?;
    weights::load(&a.weights, &mut model.net)?;
    fs::create_dir_all(&a.out)?;
    for (image, name, mean) in &jobs {
        let (padded, (h, w)) = data::pad_to_16(image, mean)?;
        let pred = model
            .ms_flip_predict(&padded, &a.scales, a.mirror, mean)?
            .crop(h, w);
        write_pgm(&a.out.join(name), &pred)?;
    }
    println!("wrote {} label maps to {}", jobs.len(), a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let mut names: Vec<PathBuf> = fs::read_dir(&a.pred)
        .with_context(|| format!("cannot list {}", a.pred.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Data(format!("no .pgm files in {}", a.pred.display())).into());
    }
    let mut pairs = Vec::with_capacity(names.len());
    for p in &names {
        let gt = a.gt.join(p.file_name().expect("listed file"));
        if !gt.exists() {
            return Err(Error::Data(format!(
                "no ground truth {} for {}",
                gt.display(),
                p.display()
            ))
            .into());
        }
        pairs.push((read_pgm(p)?, read_pgm(&gt)?));
    }
    let classes = a.classes.unwrap_or_else(|| {
        let seen = pairs
            .iter()
            .flat_map(|(p, g)| p.data.iter().chain(&g.data))
            .filter(|&&v| v != 255)
            .max();
        seen.map_or(2, |&m| (usize::from(m) + 1).max(2))
    });
    let mut acc = EvalAccumulator::new(classes);
    for (p, g) in &pairs {
        acc.add(p, g, 255)?;
    }
    let report = acc.iou_report()?;
    println!("mIoU {:.4}", report.mean);
    println!("Global Avg {:.4}", acc.global_avg()?);
    for (i, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => println!("  class {i:>3}  IoU {v:.4}"),
            None => println!("  class {i:>3}  excluded (absent from prediction and ground truth)"),
        }
    }
    Ok(())
}

fn analyze_cmd(a: &AnalyzeArgs) -> Result<bool> {
    let mut spec = resolve(&a.model, &mut TrainConfig::desk_profile(0), None)?;
    if a.model.encoder.is_none() && a.model.config.is_none() {
        spec.encoder = EncoderKind::DenseNet161;
    }
    let full = spec.encoder == EncoderKind::DenseNet161;
    let classes = a
        .classes
        .or(spec.classes)
        .unwrap_or(if full { 21 } else { 3 });
    let reference = if full { (320, 320) } else { (64, 64) };
    let report = analyze(&spec.build(classes)?, reference)?;
    print!("{report}");
    print!("{}", report.key_values());

    let at = |units: usize| -> Result<(u64, usize)> {
        let cfg = ModelSpec {
            units,
            ..spec.clone()
        }
        .build(classes)?;
        Ok((count_params(&cfg)?, count_depth(&cfg)?))
    };
    let (p1, d1) = at(1)?;
    let (p2, d2) = at(2)?;
    let (p3, d3) = at(3)?;
    let param_delta = p2 - p1 == p3 - p2;
    let depth_delta = d2 - d1 == d3 - d2;
    println!("units=1,2,3 params={p1},{p2},{p3} depth={d1},{d2},{d3}");
    println!("param_delta={} depth_delta={}", p2 - p1, d2 - d1);
    let mut ok = param_delta && depth_delta;
    if full {
        let rel = (p1 as f64 - 84.9e6) / 84.9e6;
        let within = rel.abs() <= 0.05;
        println!("reference params_millions=84.9,161.7,238.5 depth=169,185,201");
        println!("m1_vs_reference={:+.2}% within_5pct={within}", 100.0 * rel);
        ok &= within && d2 - d1 == 16;
    }
    println!("delta_check={}", if ok { "pass" } else { "fail" });
    Ok(ok)
}

fn gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let selected: Vec<_> = if a.ops.is_empty() || a.all {
        OP_SUITES.to_vec()
    } else {
        let mut v = Vec::new();
        for name in &a.ops {
            match OP_SUITES.iter().find(|(n, _)| n == name) {
                Some(s) => v.push(*s),
                None => {
                    let known: Vec<&str> = OP_SUITES.iter().map(|(n, _)| *n).collect();
                    return Err(Error::Usage(format!(
                        "unknown op suite '{name}'; known: {}",
                        known.join(", ")
                    ))
                    .into());
                }
            }
        }
        v
    };
    let mut ok = true;
    for (name, check) in selected {
        let r = run_op_suite(name, check, a.seeds, a.seed)?;
        println!(
            "{:<18} seeds {:>3}  worst {:.2e}  {}",
            r.name,
            r.seeds,
            r.worst,
            if r.passed() { "ok" } else { "FAIL" }
        );
        ok &= r.passed();
    }
    if a.ops.is_empty() || a.all {
        for seed in [1, 2] {
            let r = graph_spot_check(seed, 5)?;
            println!(
                "{:<18} seed {seed:>4}  worst {:.2e}  {}",
                r.name,
                r.worst,
                if r.passed() { "ok" } else { "FAIL" }
            );
            ok &= r.passed();
        }
    }
    Ok(ok)
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Synth(a) => synth(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Infer(a) => infer(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Analyze(a) => analyze_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Usage(_))));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

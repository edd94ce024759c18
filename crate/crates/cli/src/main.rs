use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use idfc::ablation::{ablate, ablation_table};
use idfc::data::io::{read_pfm, read_ppm, write_pfm};
use idfc::data::{load_split, write_synth_dataset, SampleMode, SamplerConfig, Split};
use idfc::gradcheck::{run_suite, REL_TOL, SUITES};
use idfc::layers::ObservationMask;
use idfc::metrics::evaluate;
use idfc::model::Variant;
use idfc::tensor::Tensor;
use idfc::train::{train, Checkpoint, TrainConfig};

/// Depth completion from RGB and sparse depth with an inductive late-fusion network.
#[derive(Parser)]
#[command(name = "idfc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Complete one sparse depth map.
    Infer(InferArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Train every variant and evaluate each at several densities.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    frames: usize,
    /// HEIGHTxWIDTH, both multiples of 8.
    #[arg(long, default_value = "32x32", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// key = value config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// key=value, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    samples: usize,
    /// Restrict inputs and metrics to rows TOP..BOTTOM.
    #[arg(long, value_name = "TOP:BOTTOM", value_parser = parse_band)]
    band: Option<(usize, usize)>,
    /// Per-frame records (JSON lines, pooled totals last).
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    rgb: PathBuf,
    #[arg(long)]
    sparse: PathBuf,
    /// Treat every finite nonzero sparse value as observed.
    #[arg(long, conflicts_with = "mask", required_unless_present = "mask")]
    mask_from_nonzero: bool,
    /// PFM whose nonzero pixels mark observations.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(SUITES))]
    module: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "5,20,50,200")]
    densities: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "inductive,vanilla,context_only")]
    variants: Vec<Variant>,
    #[arg(long)]
    report: PathBuf,
    /// Base training config shared by all variants.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HEIGHTxWIDTH")?;
    Ok((
        h.parse().map_err(|_| format!("bad height {h:?}"))?,
        w.parse().map_err(|_| format!("bad width {w:?}"))?,
    ))
}

fn parse_band(s: &str) -> Result<(usize, usize), String> {
    let (t, b) = s.split_once(':').ok_or("expected TOP:BOTTOM")?;
    Ok((
        t.parse().map_err(|_| format!("bad top row {t:?}"))?,
        b.parse().map_err(|_| format!("bad bottom row {b:?}"))?,
    ))
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_text(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    for o in overrides {
        cfg.apply_override(o).with_context(|| format!("override {o:?}"))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let (h, w) = a.size;
    let refs = write_synth_dataset(&a.out, a.frames, h, w, a.seed)?;
    println!("wrote {} frames ({h}x{w}) to {}", refs.len(), a.out.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), &a.overrides)?;
    let ckpt = train(&cfg)?;
    println!(
        "trained {} iterations; checkpoint {}",
        ckpt.iteration,
        cfg.checkpoint.display()
    );
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let (_, model) = Checkpoint::load(&a.checkpoint)?.restore()?;
    let frames = load_split(&a.data, a.split)?;
    if frames.is_empty() {
        bail!("{} has no {} frames", a.data.display(), a.split);
    }
    let mode = match a.band {
        Some((top, bottom)) => SampleMode::Band { top, bottom },
        None => SampleMode::Uniform,
    };
    let sampler = SamplerConfig {
        samples: a.samples,
        seed: a.seed,
        mode,
    };
    let eval = evaluate(&frames, &sampler, |f, sparse, mask| {
        model.predict_depth(&f.rgb, sparse, mask)
    })?;
    write(&a.report, &eval.to_records())?;
    print!("{}", eval.to_table());
    Ok(())
}

fn run_infer(a: InferArgs) -> Result<()> {
    let (_, model) = Checkpoint::load(&a.checkpoint)?.restore()?;
    let rgb = read_ppm(&a.rgb)?;
    let sparse = read_pfm(&a.sparse)?;
    let marks = match &a.mask {
        Some(p) => read_pfm(p)?,
        None => sparse.clone(),
    };
    if marks.shape() != sparse.shape() {
        bail!(
            "mask shape {:?} differs from sparse depth {:?}",
            marks.shape(),
            sparse.shape()
        );
    }
    let bits: Vec<bool> = marks
        .data()
        .iter()
        .zip(sparse.data())
        .map(|(m, d)| *m != 0.0 && m.is_finite() && d.is_finite())
        .collect();
    let depth: Vec<f64> = sparse
        .data()
        .iter()
        .zip(&bits)
        .map(|(d, &b)| if b { *d } else { 0.0 })
        .collect();
    let (_, _, h, w) = sparse.expect_rank4("infer")?;
    let mask = ObservationMask::from_bools(1, h, w, &bits)?;
    let pred = model.predict_depth(&rgb, &Tensor::new(sparse.shape(), depth)?, &mask)?;
    write_pfm(&a.out, &pred)?;
    println!("{} observed pixels; wrote {}", mask.count(), a.out.display());
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let results = run_suite(a.module.as_deref(), a.seed)?;
    let mut worst = 0.0f64;
    let mut ok = true;
    for r in &results {
        println!(
            "{:<44} max rel err {:.3e}  checked {:>5}  kinks {:>3}  {}",
            r.name,
            r.max_rel_err,
            r.checked,
            r.kinks_skipped,
            if r.passed() { "ok" } else { "FAIL" }
        );
        worst = worst.max(r.max_rel_err);
        ok &= r.passed();
    }
    println!("worst relative error {worst:.3e} (tolerance {REL_TOL:e})");
    Ok(ok)
}

fn run_ablate(a: AblateArgs) -> Result<()> {
    let base = load_config(a.config.as_deref(), &a.overrides)?;
    let train_frames = load_split(&a.data, Split::Train)?;
    let eval_frames = load_split(&a.data, Split::Test)?;
    if eval_frames.is_empty() {
        bail!("{} has no test frames", a.data.display());
    }
    let rows = ablate(
        &train_frames,
        &eval_frames,
        &base,
        &a.variants,
        &a.densities,
        a.eval_seed,
    )?;
    let table = ablation_table(&rows);
    write(&a.report, &table)?;
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Infer(a) => run_infer(a),
        Command::Gradcheck(a) => match run_gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient check failed");
                return ExitCode::FAILURE;
            }
            Err(e) => Err(e),
        },
        Command::Ablate(a) => run_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

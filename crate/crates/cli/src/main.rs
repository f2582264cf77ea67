//! `hiif`: train, run and benchmark the super-resolution model.
//!
//! Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hiif::checkpoint::Checkpoint;
use hiif::config::{Preset, RunConfig};
use hiif::decoder::Variant;
use hiif::eval::{self, BenchReport, Dataset};
use hiif::gradcheck::{self, GradcheckOptions};
use hiif::image::{load_png, save_png};
use hiif::model::{scaled_len, Model, MAX_TILE};
use hiif::run;
use hiif::synth;
use hiif::tensor::OpKind;
use hiif::train::load_images;

#[derive(Parser)]
#[command(name = "hiif", version, about = "Arbitrary-scale image super-resolution")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on a directory of PNG images.
    Train(TrainArgs),
    /// Super-resolve one PNG.
    Infer(InferArgs),
    /// PSNR benchmark of a checkpoint or a classical baseline.
    Eval(EvalArgs),
    /// Finite-difference check of every backward rule and the model.
    Gradcheck(GradcheckArgs),
    /// Train the full model and one ablated variant under the same budget.
    Ablate(AblateArgs),
    /// Write a procedural toy dataset.
    MakeToy(MakeToyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "desk")]
    preset: PresetArg,
    /// `key = value` file applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    data: PathBuf,
    /// Held-out images scored after training.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Upsampling factor r ≥ 1 (output ⌈r·H⌉×⌈r·W⌉).
    #[arg(long, conflicts_with = "size", required_unless_present = "size")]
    scale: Option<f64>,
    /// Explicit output size `HxW`.
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    tile: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Bicubic,
    Bilinear,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "baseline")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated scales; defaults to the checkpoint's or 2,3,4.
    #[arg(long, value_delimiter = ',')]
    scales: Vec<f64>,
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// TSV report path (also printed).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    tile: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "desk")]
    preset: PresetArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    instances: usize,
    /// Corrupt one backward rule (negative control).
    #[arg(long, hide = true, value_parser = parse_op)]
    inject_fault: Option<OpKind>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_parser = parse_ablation)]
    variant: Variant,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct MakeToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 96)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height `{h}`"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width `{w}`"))?;
    if h == 0 || w == 0 {
        return Err("size must be positive".into());
    }
    Ok((h, w))
}

fn parse_op(s: &str) -> Result<OpKind, String> {
    OpKind::parse(s).ok_or_else(|| format!("unknown op `{s}`"))
}

fn parse_ablation(s: &str) -> Result<Variant, String> {
    match s.parse::<Variant>()? {
        v @ (Variant::NoHier | Variant::NoMultiScale | Variant::NoAttention) => Ok(v),
        other => Err(format!("`{other}` is not an ablation; expected v1-H, v2-MS or v3-MH")),
    }
}

/// Failure classes mapped onto exit statuses.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = Result<ExitCode, Failure>;

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn run_config(args: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::preset(args.preset.into());
    if let Some(path) = &args.config {
        cfg.apply_file(path).map_err(usage)?;
    }
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(anyhow!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim()).map_err(|m| usage(anyhow!("--set {kv}: {m}")))?;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn fmt_scale(r: f64) -> String {
    format!("{r}")
}

/// Trains into `out` and returns the model with its validation report.
fn train_into(cfg: &RunConfig, data: &Path, val: Option<&Dataset>, out: &Path) -> anyhow::Result<(Model<f32>, Option<BenchReport>)> {
    let images = load_images(data).with_context(|| format!("loading {}", data.display()))?;
    if images.is_empty() {
        bail!("{}: no PNG images", data.display());
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let log_path = out.join("metrics.log");
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path).with_context(|| log_path.display().to_string())?);
    let (model, report) = run::train_model(cfg, &images, &mut log)?;
    for s in &report.skipped {
        eprintln!("warning: skipped {s}");
    }
    let mut extra = vec![
        ("meta.epochs", report.epochs.len().to_string()),
        ("meta.seed", cfg.train.seed.to_string()),
    ];
    if let Some(last) = report.epochs.last() {
        extra.push(("meta.final_loss", format!("{}", last.loss)));
    }
    let val_report = match val {
        Some(ds) => {
            let r = run::evaluate_model(&model, &cfg.decoder.variant.to_string(), ds, cfg)?;
            for row in &r.rows {
                writeln!(log, "val scale={} psnr_db={}", fmt_scale(row.scale), row.psnr_db)?;
            }
            fs::write(out.join("val.tsv"), r.to_tsv())?;
            Some(r)
        }
        None => None,
    };
    let keys: Vec<(String, String)> = val_report
        .iter()
        .flat_map(|r| r.rows.iter())
        .map(|row| (format!("meta.val.{}.x{}", row.dataset, fmt_scale(row.scale)), format!("{}", row.psnr_db)))
        .collect();
    for (k, v) in &keys {
        extra.push((k.as_str(), v.clone()));
    }
    log.flush()?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    Checkpoint::from_model(&model, cfg, &extra).save(&out.join("model.ckpt"))?;
    Ok((model, val_report))
}

fn load_val(path: Option<&PathBuf>) -> Result<Option<Dataset>, Failure> {
    Ok(path.map(|p| Dataset::load(p)).transpose()?)
}

fn cmd_train(args: TrainArgs) -> Outcome {
    let cfg = run_config(&args)?;
    let val = load_val(args.val.as_ref())?;
    let (_, report) = train_into(&cfg, &args.data, val.as_ref(), &args.out)?;
    if let Some(r) = report {
        print!("{}", r.to_tsv());
    }
    eprintln!("wrote {}", args.out.join("model.ckpt").display());
    Ok(ExitCode::SUCCESS)
}

fn check_tile(tile: usize) -> Result<usize, Failure> {
    if tile == 0 || tile > MAX_TILE {
        return Err(usage(anyhow!("tile must be in 1..={MAX_TILE}, got {tile}")));
    }
    Ok(tile)
}

fn cmd_infer(args: InferArgs) -> Outcome {
    let ck = Checkpoint::load(&args.ckpt)?;
    let model: Model<f32> = ck.to_model()?;
    let tile = check_tile(args.tile.unwrap_or(ck.run_config()?.eval.tile))?;
    let lr = load_png(&args.input).with_context(|| args.input.display().to_string())?;
    let (h, w) = match (args.scale, args.size) {
        (Some(r), _) => {
            if !(r.is_finite() && r >= 1.0) {
                return Err(usage(anyhow!("--scale must be a real number ≥ 1, got {r}")));
            }
            (scaled_len(lr.height(), r), scaled_len(lr.width(), r))
        }
        (None, Some(hw)) => hw,
        (None, None) => unreachable!("clap requires one of --scale/--size"),
    };
    let out = model.upsample(&lr, h, w, tile)?;
    save_png(&out, &args.output).with_context(|| args.output.display().to_string())?;
    eprintln!("{}x{} -> {}x{}: {}", lr.height(), lr.width(), h, w, args.output.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Outcome {
    let ck = args.ckpt.as_ref().map(|p| Checkpoint::load(p)).transpose()?;
    let saved = ck.as_ref().map(|c| c.run_config()).transpose()?;
    let scales = if !args.scales.is_empty() {
        args.scales.clone()
    } else {
        saved.as_ref().map_or_else(|| vec![2.0, 3.0, 4.0], |c| c.eval.scales.clone())
    };
    if let Some(bad) = scales.iter().find(|r| !(r.is_finite() && **r >= 1.0)) {
        return Err(usage(anyhow!("scales must be ≥ 1, got {bad}")));
    }
    let tile = check_tile(args.tile.or(saved.as_ref().map(|c| c.eval.tile)).unwrap_or(hiif::model::DEFAULT_TILE))?;
    let data = Dataset::load(&args.data)?;
    let mut report = BenchReport::default();
    match args.baseline {
        Some(Baseline::Bicubic) => report.extend(eval::eval_bicubic(&data, &scales)?),
        Some(Baseline::Bilinear) => report.extend(eval::eval_bilinear(&data, &scales)?),
        None => {}
    }
    if let (Some(ck), Some(cfg)) = (&ck, &saved) {
        let model: Model<f32> = ck.to_model()?;
        let method = cfg.decoder.variant.to_string();
        report.extend(eval::eval_model(&model, &method, &data, &scales, tile)?);
    }
    let tsv = report.to_tsv();
    print!("{tsv}");
    if let Some(out) = &args.out {
        fs::write(out, &tsv).with_context(|| out.display().to_string())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Outcome {
    let cfg = RunConfig::preset(args.preset.into());
    let mut opts = GradcheckOptions::new(cfg.model(), args.seed);
    opts.instances = args.instances.max(1);
    opts.fault = args.inject_fault;
    let report = gradcheck::run_suite(&opts);
    print!("{}", report.to_text());
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_ablate(args: AblateArgs) -> Outcome {
    let cfg = run_config(&args.train)?;
    let val_dir = args
        .train
        .val
        .as_ref()
        .ok_or_else(|| usage(anyhow!("ablate needs --val (held-out images to compare on)")))?;
    let val = Dataset::load(val_dir)?;
    let full_cfg = run::variant_of(&cfg, Variant::Full);
    let var_cfg = run::variant_of(&cfg, args.variant);
    let out = &args.train.out;
    let (full, full_rep) = train_into(&full_cfg, &args.train.data, Some(&val), &out.join("full"))?;
    let (var, var_rep) = train_into(&var_cfg, &args.train.data, Some(&val), &out.join(args.variant.to_string()))?;
    let (full_rep, var_rep) = (full_rep.expect("val given"), var_rep.expect("val given"));
    let name = args.variant.to_string();
    let mut text = format!("# params full={} {}={}\n", full.param_count(), name, var.param_count());
    text.push_str(&run::paired_table(&full_rep, &var_rep, &name));
    print!("{text}");
    fs::write(out.join("ablation.tsv"), &text)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_make_toy(args: MakeToyArgs) -> Outcome {
    if args.count == 0 || args.size == 0 {
        return Err(usage(anyhow!("--count and --size must be positive")));
    }
    fs::create_dir_all(&args.out).with_context(|| args.out.display().to_string())?;
    synth::write_toy_dataset(&args.out, args.count, args.size, args.seed)?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    // clap itself exits with status 2 on usage errors
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::MakeToy(a) => cmd_make_toy(a),
    };
    match res {
        Ok(code) => code,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use demesh::error::{DemeshError, Result};
use demesh::facegen::{load_dataset, make_dataset, read_pgm, validate_dir, write_pgm, Dataset, DatasetConfig, SplitRatios};
use demesh::fcn::InpaintNet;
use demesh::featnet::{build_phi, FeatureNet, PhiMode, PhiSpec, PretrainConfig};
use demesh::losses::Variant;
use demesh::selfcheck::{run_suite, Suite};
use demesh::stn::Landmarks;
use demesh::trainer::{evaluate, run_ablation, train, TrainConfig};
use demesh::verifier::psnr;

#[derive(Parser)]
#[command(name = "demesh", version, about = "Blind face inpainting experiments at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic MeshFace dataset.
    GenData(GenDataArgs),
    /// Train ψ for one variant.
    Train(TrainArgs),
    /// Evaluate a checkpoint under the verification protocol.
    Eval(EvalArgs),
    /// Train and evaluate every variant on one dataset.
    Ablation(AblationArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Inpaint one MeshFace image.
    Inpaint(InpaintArgs),
    /// Merge per-model ROC files into plot data and an SVG.
    RocPlot(RocPlotArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    identities: usize,
    #[arg(long, default_value_t = 20)]
    per_id: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train/val/test fractions.
    #[arg(long, default_value = "0.7/0.1/0.2")]
    split: SplitRatios,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

/// Options shared by every command that needs a config and φ.
#[derive(Args)]
struct ExperimentArgs {
    /// `key = value` experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory; overrides the config's `dataset`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// φ checkpoint. Loaded if it exists, otherwise built and saved there.
    #[arg(long)]
    phi: Option<PathBuf>,
    #[arg(long)]
    phi_mode: Option<PhiMode>,
    #[arg(long)]
    phi_seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long)]
    variant: Option<Variant>,
    /// Total steps; the lr decay moves to two thirds of it.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    order_seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Training log; defaults to the checkpoint path with `.log.tsv`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Row name in the report; defaults to the checkpoint file stem.
    #[arg(long)]
    name: Option<String>,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblationArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long)]
    steps: Option<usize>,
    /// Comma-separated variants; all five by default.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<Variant>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "all")]
    module: Suite,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    sabotage: bool,
}

#[derive(Args)]
struct InpaintArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// Eye centres `x1,y1,x2,y2` in pixels.
    #[arg(long)]
    landmarks: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Clear image; prints the PSNR of the output and of the input.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct RocPlotArgs {
    /// Directory holding report.tsv and roc_<model>.tsv files.
    #[arg(long)]
    report: PathBuf,
    /// Comma-separated models; every row of report.tsv by default.
    #[arg(long, value_delimiter = ',')]
    models: Vec<String>,
    /// Plot-data TSV; an SVG is written next to it.
    #[arg(long)]
    out: PathBuf,
}

fn experiment_config(exp: &ExperimentArgs) -> Result<TrainConfig> {
    let mut cfg = match &exp.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(d) = &exp.data {
        cfg.dataset = Some(d.clone());
    }
    if let Some(m) = exp.phi_mode {
        cfg.phi_mode = m;
    }
    if let Some(s) = exp.phi_seed {
        cfg.phi_seed = s;
    }
    Ok(cfg)
}

fn dataset(cfg: &TrainConfig) -> Result<Dataset> {
    let dir = cfg
        .dataset
        .as_deref()
        .ok_or_else(|| DemeshError::InvalidArgument {
            op: "dataset",
            msg: "no dataset given (use --data or `dataset =` in the config)".into(),
        })?;
    load_dataset(dir)
}

fn phi(cfg: &TrainConfig, cache: Option<&Path>) -> Result<FeatureNet> {
    if let Some(p) = cache {
        if p.exists() {
            return FeatureNet::load(p);
        }
    }
    let net = build_phi(cfg.phi_mode, cfg.phi_seed, PhiSpec::default(), &PretrainConfig::default())?;
    if let Some(p) = cache {
        net.save(p)?;
    }
    Ok(net)
}

fn parse_landmarks(s: &str) -> Result<Landmarks> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| DemeshError::InvalidArgument {
            op: "landmarks",
            msg: format!("`{s}`: {e}"),
        })?;
    match v[..] {
        [x1, y1, x2, y2] => Ok(Landmarks::new((x1, y1), (x2, y2))),
        _ => Err(DemeshError::InvalidArgument {
            op: "landmarks",
            msg: format!("expected x1,y1,x2,y2, found `{s}`"),
        }),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = DatasetConfig {
        identities: a.identities,
        per_identity: a.per_id,
        seed: a.seed,
        split: a.split,
        ..DatasetConfig::default()
    };
    make_dataset(&cfg, &a.out, a.force)?;
    let r = validate_dir(&a.out)?;
    println!("identities={} triplets={} manifest={}", r.identities, r.triplets, a.out.join("manifest.tsv").display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = experiment_config(&a.exp)?;
    // switching variant resets the loss keys to that variant's defaults
    if let Some(v) = a.variant.filter(|&v| v != cfg.variant) {
        cfg = cfg.with_variant(v);
    }
    if let Some(s) = a.steps {
        cfg = cfg.with_steps(s);
    }
    if let Some(s) = a.init_seed {
        cfg.init_seed = s;
    }
    if let Some(s) = a.order_seed {
        cfg.order_seed = s;
    }
    let ds = dataset(&cfg)?;
    let phi = if cfg.loss.uses_features() { Some(phi(&cfg, a.exp.phi.as_deref())?) } else { None };
    let (net, log) = train(&cfg, &ds, phi.as_ref())?;
    net.save(&a.out)?;
    let log_path = a.log.unwrap_or_else(|| a.out.with_extension("log.tsv"));
    log.write(&log_path)?;
    let last = log.steps.last().expect("at least one step");
    println!("variant={} steps={} final_loss={:.6} checkpoint={}", cfg.variant, log.steps.len(), last.total, a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let cfg = experiment_config(&a.exp)?;
    let ds = dataset(&cfg)?;
    let phi = phi(&cfg, a.exp.phi.as_deref())?;
    let net = InpaintNet::load(&a.checkpoint)?;
    let name = match a.name {
        Some(n) => n,
        None => a
            .checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into()),
    };
    let report = evaluate(&name, &net, &ds, &phi)?;
    let path = report.write(&a.out)?;
    print!("{}", report.to_tsv());
    eprintln!("report={}", path.display());
    Ok(())
}

fn ablation_cmd(a: AblationArgs) -> Result<()> {
    let mut cfg = experiment_config(&a.exp)?;
    if let Some(s) = a.steps {
        cfg = cfg.with_steps(s);
    }
    let variants = if a.variants.is_empty() { Variant::ALL.to_vec() } else { a.variants };
    let ds = dataset(&cfg)?;
    let phi = phi(&cfg, a.exp.phi.as_deref())?;
    let run = run_ablation(&cfg, &variants, &ds, &phi, Some(&a.out))?;
    print!("{}", run.report.to_tsv());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let results = run_suite(a.module, a.seed, a.sabotage)?;
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(DemeshError::InvalidArgument {
            op: "gradcheck",
            msg: format!("failed checks: {}", failed.join(",")),
        })
    }
}

fn inpaint_cmd(a: InpaintArgs) -> Result<()> {
    let net = InpaintNet::load(&a.checkpoint)?;
    let x = read_pgm(&a.input)?;
    let (h, w) = (net.spec().height, net.spec().width);
    if x.shape() != [1, h, w] {
        return Err(DemeshError::ShapeMismatch {
            op: "inpaint",
            expected: vec![1, h, w],
            found: x.shape().to_vec(),
        });
    }
    if let Some(s) = &a.landmarks {
        let eyes = parse_landmarks(s)?;
        if !eyes.inside(h, w, 0.0) {
            return Err(DemeshError::InvalidArgument {
                op: "inpaint",
                msg: format!("landmarks `{s}` lie outside the {h}x{w} image"),
            });
        }
    }
    let y = net.forward(&x)?;
    write_pgm(&a.out, &y)?;
    if let Some(t) = &a.truth {
        let truth = read_pgm(t)?;
        // scores the quantized output that was written, like any reader of the file would see
        let written = read_pgm(&a.out)?;
        println!("psnr_db={:.6} input_psnr_db={:.6}", psnr(&written, &truth, 1.0)?, psnr(&x, &truth, 1.0)?);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablation(a) => ablation_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Inpaint(a) => inpaint_cmd(a),
        Command::RocPlot(a) => plot::roc_plot(&a.report, &a.models, &a.out),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").replace('"', "'")
}

fn set_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("DEMESH_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or(format!("DEMESH_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error kind=usage msg=\"{}\"", one_line(first));
            return ExitCode::from(2);
        }
    };
    if let Err(msg) = set_threads() {
        eprintln!("error kind=invalid_argument msg=\"{}\"", one_line(&msg));
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} msg=\"{}\"", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}

//! `mgcn`: train, evaluate and inspect multi-graph pose forecasters.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration or input
//! error, 3 numerical failure during training.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use mgcn_core::data::{import_csv, load_sequences, make_windows, save_sequences, synth_kinematic, DEFAULT_RATE};
use mgcn_core::graph::{multigraph_for, write_matrix_text};
use mgcn_core::run::{self, RunOutcome};
use mgcn_core::tensor::with_corrupted_backward;
use mgcn_core::train::{evaluate, evaluate_baseline};
use mgcn_core::{checkpoint, gradcheck, skeleton_preset, Error, OpKind, RunConfig, SynthConfig, Tensor};

#[derive(Parser)]
#[command(name = "mgcn", version, about = "Multi-graph convolution pose forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML run config and write checkpoint, log and report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on an MGPS dataset.
    Eval(EvalArgs),
    /// Forecast the frames following one input window.
    Predict(PredictArgs),
    /// Train one model per (span, max hop) pair.
    Sweep(SweepArgs),
    /// Finite-difference gradient checks for every op and a tiny model.
    Gradcheck(GradcheckArgs),
    /// Write the raw and normalized multi-graph operators as text matrices.
    GraphDump(GraphDumpArgs),
    /// Generate periodic chain motion into an MGPS file.
    Synth(SynthArgs),
    /// Convert a `frame,joint,x,y,z` CSV file into MGPS.
    ImportCsv(ImportArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated 1-based frame offsets.
    #[arg(long, value_delimiter = ',', default_value = "2,10")]
    horizons: Vec<usize>,
    /// Add a zero-velocity row.
    #[arg(long)]
    baseline: bool,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Where to write the JSON report (default: `eval.json` next to the checkpoint).
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    sequence: usize,
    /// First input frame; defaults to the last full input window.
    #[arg(long)]
    start: Option<usize>,
    /// CSV output (`frame,joint,x,y,z`); stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    spans: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    hops: Vec<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Test hook: distort one op's backward pass.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct GraphDumpArgs {
    #[arg(long)]
    skeleton: String,
    #[arg(long)]
    frames: usize,
    #[arg(long)]
    span: usize,
    #[arg(long)]
    max_hop: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    joints: usize,
    #[arg(long, default_value_t = 4)]
    sequences: usize,
    #[arg(long, default_value_t = 200)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    start_frame: usize,
    #[arg(long, default_value_t = 0.5)]
    amplitude: f64,
    #[arg(long, default_value_t = 24.0)]
    period: f64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ImportArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RATE)]
    rate: f64,
    #[arg(long)]
    label: Option<String>,
}

/// Verification failures carry their own exit code.
#[derive(Debug)]
struct VerificationFailed(String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<VerificationFailed>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite { .. }) => 3,
        Some(Error::DegenerateMask { .. } | Error::NonScalarRoot(_) | Error::UninitializedGradient(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Sweep(a) => sweep(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::GraphDump(a) => graph_dump(a),
        Command::Synth(a) => synth(a),
        Command::ImportCsv(a) => import(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn load_config(path: &Path, output: Option<PathBuf>) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(dir) = output {
        cfg.output_dir = dir;
    }
    Ok(cfg)
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.config, args.output)?;
    let quiet = args.quiet;
    let outcome: RunOutcome = run::execute(&cfg, |r| {
        if !quiet {
            println!("epoch {:>4}  loss {:.6}  lr {:e}", r.epoch, r.mean_loss, r.lr);
        }
    })?;
    outcome
        .write_artifacts(&cfg.output_dir, &cfg)
        .with_context(|| format!("writing artifacts to {}", cfg.output_dir.display()))?;
    print!("{}", outcome.report_table());
    println!("artifacts written to {}", cfg.output_dir.display());
    Ok(())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let model = checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let seqs = load_sequences(&args.data).with_context(|| format!("loading {}", args.data.display()))?;
    let c = model.config();
    let data = make_windows(&seqs, model.skeleton(), c.input_frames, c.output_frames, args.stride)?;
    let report = evaluate(&model, &data, &args.horizons)?;
    let baseline = if args.baseline {
        Some(evaluate_baseline(&data, &args.horizons)?)
    } else {
        None
    };
    let extra: Vec<_> = baseline.iter().map(|b| ("zero_velocity", b)).collect();
    let rate = seqs.first().map_or(DEFAULT_RATE, |s| s.rate);
    print!("{}", report.to_table(rate, &extra));

    let json_path = args.json.unwrap_or_else(|| {
        args.checkpoint.parent().unwrap_or(Path::new(".")).join("eval.json")
    });
    let json = serde_json::json!({ "model": report, "zero_velocity": baseline });
    fs::write(&json_path, serde_json::to_string_pretty(&json)? + "\n")
        .with_context(|| format!("writing {}", json_path.display()))?;
    Ok(())
}

fn predict(args: PredictArgs) -> anyhow::Result<()> {
    let model = checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let seqs = load_sequences(&args.data).with_context(|| format!("loading {}", args.data.display()))?;
    let Some(seq) = seqs.get(args.sequence) else {
        return Err(Error::config("sequence", format!("index {} but file has {}", args.sequence, seqs.len())).into());
    };
    let (t, v) = (model.config().input_frames, model.joint_count());
    if seq.joint_count() != v {
        return Err(Error::dim("predict", &[seq.joint_count()], &[v]).into());
    }
    if seq.frame_count() < t {
        return Err(Error::config("start", format!("sequence has {} frames, need {t}", seq.frame_count())).into());
    }
    let start = args.start.unwrap_or(seq.frame_count() - t);
    if start + t > seq.frame_count() {
        return Err(Error::config("start", format!("window {start}..{} past end", start + t)).into());
    }
    let x = Tensor::new(seq.frames(start, t).to_vec(), &[1, t, v, 3])?;
    let y = model.predict(&x)?;

    let mut out: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(out, "frame,joint,x,y,z")?;
    for (f, pose) in y.data().chunks_exact(v * 3).enumerate() {
        for (j, p) in pose.chunks_exact(3).enumerate() {
            writeln!(out, "{},{j},{},{},{}", start + t + f, p[0], p[1], p[2])?;
        }
    }
    Ok(())
}

fn sweep(args: SweepArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.config, args.output)?;
    let cells = run::sweep(&cfg, &args.spans, &args.hops, |c| {
        println!("L={} D={} done, final train loss {:.6}", c.span, c.max_hop, c.final_loss);
    })?;
    let table = run::sweep_table(&cfg.eval.horizons, &cells);
    print!("{table}");
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("sweep.txt"), &table)?;
    fs::write(cfg.output_dir.join("sweep.json"), serde_json::to_string_pretty(&cells)? + "\n")?;
    Ok(())
}

fn gradcheck_cmd(args: GradcheckArgs) -> anyhow::Result<()> {
    let results = match args.corrupt {
        Some(name) => {
            let Some(kind) = OpKind::from_name(&name) else {
                let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
                bail!(Error::config("corrupt", format!("unknown op `{name}` (known: {})", known.join(", "))));
            };
            with_corrupted_backward(kind, gradcheck::run_suite)?
        }
        None => gradcheck::run_suite()?,
    };
    for r in &results {
        println!(
            "{:<36} {:>10.3e}  {}",
            r.name,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks below {:e}", results.len(), gradcheck::TOLERANCE);
        Ok(())
    } else {
        Err(VerificationFailed(format!("gradient check failed for: {}", failed.join(", "))).into())
    }
}

fn graph_dump(args: GraphDumpArgs) -> anyhow::Result<()> {
    let skeleton = skeleton_preset(&args.skeleton)?;
    let mg = multigraph_for(&skeleton, args.frames, args.span, args.max_hop)?;
    fs::create_dir_all(&args.out)?;
    for k in 0..mg.partition_count() {
        for (tag, m) in [("raw", &mg.raw()[k]), ("norm", &mg.operators()[k])] {
            let path = args.out.join(format!("G{k}_{tag}.txt"));
            let mut file = std::io::BufWriter::new(fs::File::create(&path)?);
            write_matrix_text(&mut file, mg.header(k), m)?;
            file.flush()?;
        }
    }
    println!(
        "{} partitions of {} nodes written to {}",
        mg.partition_count(),
        mg.node_count(),
        args.out.display()
    );
    Ok(())
}

fn synth(args: SynthArgs) -> anyhow::Result<()> {
    let seqs = (0..args.sequences)
        .map(|i| {
            synth_kinematic(&SynthConfig {
                joints: args.joints,
                amplitude: args.amplitude,
                period: args.period,
                frames: args.frames,
                seed: args.seed + i as u64,
                noise: args.noise,
                start_frame: args.start_frame,
            })
        })
        .collect::<mgcn_core::Result<Vec<_>>>()?;
    save_sequences(&args.out, &seqs)?;
    Ok(())
}

fn import(args: ImportArgs) -> anyhow::Result<()> {
    let seq = import_csv(&args.csv, args.rate, args.label)?;
    println!("{} frames x {} joints", seq.frame_count(), seq.joint_count());
    save_sequences(&args.out, &[seq])?;
    Ok(())
}

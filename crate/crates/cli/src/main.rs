use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cl3d::config::{parse_override, KvConfig};
use cl3d::detector::save_checkpoint;
use cl3d::io::{read_file, write_atomic};
use cl3d::par;
use cl3d::pipeline::{self, ExperimentConfig, Mode};
use cl3d::sim::{self, make_benchmark, Split};
use cl3d::Error;

#[derive(Parser)]
#[command(
    name = "cl3d",
    version,
    about = "Cross-LiDAR domain adaptation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file with `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; defaults to $CL3D_RUN_DIR.
    #[arg(long, env = "CL3D_RUN_DIR")]
    run_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the benchmark frames and visible labels to disk.
    GenData(Common),
    /// Train on labeled source frames and report direct transfer.
    Pretrain(Common),
    /// Decode the source model on unlabeled target frames.
    PseudoLabel(Common),
    /// Self-train from the source model (ST or CL3D per experiment.mode).
    Adapt(Common),
    /// Score a stored checkpoint on the target eval split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Stage::Adapted)]
        stage: Stage,
    },
    /// Run every mode and range strategy and write the comparison table.
    RunMatrix(Common),
    /// Dump a frame file.
    Inspect {
        #[arg(long)]
        frame: PathBuf,
        #[arg(long, value_enum, default_value_t = Export::Csv)]
        export: Export,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Source,
    Adapted,
}

#[derive(Clone, Copy, ValueEnum)]
enum Export {
    Csv,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn load_config(common: &Common) -> std::result::Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for o in &common.overrides {
        let (k, v) = parse_override(o)?;
        cfg.set(&k, &v)?;
    }
    cfg.validate()?;
    par::configure_workers(cfg.workers);
    Ok(cfg)
}

fn run_dir(common: &Common) -> std::result::Result<PathBuf, Failure> {
    let dir = common.run_dir.clone().ok_or_else(|| {
        Failure::Usage("no run directory: pass --run-dir or set CL3D_RUN_DIR".into())
    })?;
    fs::create_dir_all(&dir)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn setup(common: &Common) -> std::result::Result<(ExperimentConfig, PathBuf), Failure> {
    let cfg = load_config(common)?;
    let dir = run_dir(common)?;
    pipeline::write_resolved_config(&dir, &cfg)?;
    Ok((cfg, dir))
}

fn write_split(dir: &Path, split: &Split, with_labels: bool) -> Outcome {
    for (s, seq) in split.sequences.iter().enumerate() {
        let seq_dir = dir.join(&split.name).join(format!("seq_{s:04}"));
        fs::create_dir_all(&seq_dir)
            .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", seq_dir.display())))?;
        for (f, frame) in seq.frames.iter().enumerate() {
            sim::write_frame(&seq_dir.join(format!("frame_{f:02}.clpf")), frame)?;
            if with_labels {
                let text = sim::labels_to_jsonl(split.labels(s, f));
                write_atomic(
                    &seq_dir.join(format!("frame_{f:02}.jsonl")),
                    text.as_bytes(),
                )?;
            }
        }
    }
    Ok(())
}

fn gen_data(common: &Common) -> Outcome {
    let (cfg, dir) = setup(common)?;
    let bench = make_benchmark(&cfg.sim, cfg.exec())?;
    let data = dir.join("data");
    write_split(&data, &bench.source, true)?;
    // Target training labels stay withheld.
    write_split(&data, &bench.target_train, false)?;
    write_split(&data, &bench.target_eval, true)?;
    log::info!("wrote benchmark to {}", data.display());
    Ok(())
}

fn pretrain(common: &Common) -> Outcome {
    let (cfg, dir) = setup(common)?;
    let bench = make_benchmark(&cfg.sim, cfg.exec())?;
    let s = cfg.range_strategy;
    let state = pipeline::pretrain_source(&cfg, &bench, s)?;
    save_checkpoint(&dir.join(pipeline::SOURCE_CHECKPOINT), &state)?;
    let rec = pipeline::evaluate(
        &state,
        &cfg,
        &bench.target_eval,
        s,
        &pipeline::method_name(Mode::Dt, s, &cfg.alignment),
    )?;
    pipeline::write_records(&dir, &[rec])?;
    Ok(())
}

fn pseudo_label(common: &Common) -> Outcome {
    let (cfg, dir) = setup(common)?;
    let source = pipeline::load_stage(&dir, pipeline::SOURCE_CHECKPOINT, &cfg.detector)?;
    let bench = make_benchmark(&cfg.sim, cfg.exec())?;
    let pairs =
        pipeline::prepare_split(&bench.target_train, cfg.range_strategy, false, cfg.exec())?;
    let pseudo =
        pipeline::generate_pseudo_labels(&source, &pairs, cfg.detector.score_floor, cfg.exec());
    let n: usize = pseudo.iter().map(|p| p.labels.len()).sum();
    write_atomic(
        &dir.join(pipeline::PSEUDO_LABELS),
        pipeline::pseudo_labels_to_jsonl(&pseudo).as_bytes(),
    )?;
    log::info!("wrote {n} pseudo-labels for {} frames", pseudo.len());
    Ok(())
}

fn adapt(common: &Common) -> Outcome {
    let (cfg, dir) = setup(common)?;
    let mode = match cfg.mode {
        Mode::St | Mode::Cl3d => cfg.mode,
        other => {
            return Err(Failure::Usage(format!(
                "adapt needs experiment.mode st or cl3d, got {other}"
            )))
        }
    };
    let source = pipeline::load_stage(&dir, pipeline::SOURCE_CHECKPOINT, &cfg.detector)?;
    let bench = make_benchmark(&cfg.sim, cfg.exec())?;
    let s = cfg.range_strategy;
    let pseudo = if dir.join(pipeline::PSEUDO_LABELS).exists() {
        let pairs = pipeline::prepare_split(&bench.target_train, s, false, cfg.exec())?;
        Some(pipeline::read_pseudo_labels(&dir, &pairs)?)
    } else {
        None
    };
    let out = pipeline::adapt(&source, &cfg, &bench, mode, s, pseudo)?;
    save_checkpoint(&dir.join(pipeline::ADAPTED_CHECKPOINT), &out.state)?;
    if let Some(p) = &out.prototypes {
        p.save(&dir.join(pipeline::PROTOTYPES))?;
    }
    let rec = pipeline::evaluate(
        &out.state,
        &cfg,
        &bench.target_eval,
        s,
        &pipeline::method_name(mode, s, &cfg.alignment),
    )?;
    pipeline::write_records(&dir, &[rec])?;
    Ok(())
}

fn evaluate(common: &Common, stage: Stage) -> Outcome {
    let (cfg, dir) = setup(common)?;
    let (file, mode) = match stage {
        Stage::Source => (pipeline::SOURCE_CHECKPOINT, Mode::Dt),
        Stage::Adapted => (pipeline::ADAPTED_CHECKPOINT, cfg.mode),
    };
    let state = pipeline::load_stage(&dir, file, &cfg.detector)?;
    let bench = make_benchmark(&cfg.sim, cfg.exec())?;
    let s = cfg.range_strategy;
    let rec = pipeline::evaluate(
        &state,
        &cfg,
        &bench.target_eval,
        s,
        &pipeline::method_name(mode, s, &cfg.alignment),
    )?;
    pipeline::write_records(&dir, std::slice::from_ref(&rec))?;
    println!("{}", cl3d::eval::metrics_csv(&[rec]).trim_end());
    Ok(())
}

fn run_matrix(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let dir = run_dir(common)?;
    let out = pipeline::run_matrix(&cfg, Some(&dir))?;
    print!("{}", cl3d::eval::metrics_csv(&out.records));
    Ok(())
}

fn inspect(frame: &Path, out: Option<&Path>) -> Outcome {
    let f = sim::decode_frame(&read_file(frame)?)?;
    let mut csv = String::from("x,y,z\n");
    for p in &f.points {
        csv.push_str(&format!("{},{},{}\n", p[0], p[1], p[2]));
    }
    match out {
        Some(path) => write_atomic(path, csv.as_bytes())?,
        None => std::io::stdout()
            .write_all(csv.as_bytes())
            .map_err(|e| Failure::Runtime(format!("stdout: {e}")))?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Pretrain(c) => pretrain(c),
        Command::PseudoLabel(c) => pseudo_label(c),
        Command::Adapt(c) => adapt(c),
        Command::Evaluate { common, stage } => evaluate(common, *stage),
        Command::RunMatrix(c) => run_matrix(c),
        Command::Inspect { frame, out, .. } => inspect(frame, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: usage: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: runtime: {msg}");
            ExitCode::from(1)
        }
    }
}

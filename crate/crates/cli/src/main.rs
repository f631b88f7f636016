use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use glca_core::harness::ablate::ablate;
use glca_core::harness::config::RunConfig;
use glca_core::harness::dataset::{list_files, load_split};
use glca_core::harness::evaluate::evaluate_dirs;
use glca_core::harness::gradcheck::{micro_config, run_gradcheck, Corruption, TOLERANCE};
use glca_core::harness::infer::infer_file;
use glca_core::harness::memory::bench_memory;
use glca_core::harness::opcheck::{op_gradchecks, OP_TOLERANCE};
use glca_core::harness::synth::{gen_data, TEST_DIR, TRAIN_DIR};
use glca_core::harness::train::train;
use glca_core::model::{Checkpoint, InferMode};
use glca_core::tiling::plan_grid;
use glca_core::{Error, Result};

#[derive(Parser)]
#[command(name = "glca", version, about = "Global/local cross-attention segmentation harness")]
struct Cli {
    /// Run configuration (flat key = value file).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Byte-reproducible output (no timings in logs).
    #[arg(long, global = true)]
    deterministic: bool,
    /// Inference mode for `infer` and the post-training evaluation.
    #[arg(long, global = true, default_value = "patch")]
    mode: InferMode,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset (train/ and test/ splits).
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write model.json, train.jsonl and run.conf into --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict an image (or every .ppm in a directory).
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write NAME_overlay.ppm.
        #[arg(long)]
        overlay: bool,
    },
    /// Score predicted label maps against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Finite-difference check of the full training loss on a micro model and
    /// of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 4)]
        d_model: usize,
        /// Perturb one analytic gradient entry (the check must then fail).
        #[arg(long)]
        corrupt: bool,
    },
    /// Train all four attention-toggle combinations and emit a CSV.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plan a tile grid.
    Tile {
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        /// Print the plan as JSON (the only output format).
        #[arg(long)]
        plan: bool,
    },
    /// Transient peak bytes of patch vs global inference.
    BenchMemory {
        #[arg(long, value_delimiter = ',', default_values_t = [128, 256])]
        sides: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::CheckFailed(_) => 4,
        _ => 3,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn io_error(path: &Path, e: io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| Error::Usage(e.to_string()))?;
    print_text(&format!("{line}\n"))
}

fn print_text(text: &str) -> Result<()> {
    io::stdout()
        .lock()
        .write_all(text.as_bytes())
        .map_err(|e| io_error(Path::new("<stdout>"), e))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        if matches!(cli.command, Command::GenData { .. }) {
            cfg.data.scene.seed = seed;
        }
    }

    match cli.command {
        Command::GenData { out } => {
            gen_data(&cfg.data, &out)?;
            eprintln!("wrote {} train and {} test scenes to {}", cfg.data.train, cfg.data.test, out.display());
        }
        Command::Train { data, out } => {
            let samples = load_split(&data.join(TRAIN_DIR))?;
            create_dir(&out)?;
            let conf = out.join("run.conf");
            fs::write(&conf, cfg.to_text()).map_err(|e| io_error(&conf, e))?;
            let log_path = out.join("train.jsonl");
            let file = File::create(&log_path).map_err(|e| io_error(&log_path, e))?;
            let mut log = BufWriter::new(file);
            let ckpt = out.join("model.json");
            let ck = train(&cfg, &samples, &mut log, Some(&ckpt), cli.deterministic)?;
            log.flush().map_err(|e| io_error(&log_path, e))?;
            eprintln!("trained {} steps on {} images; checkpoint {}", cfg.steps, samples.len(), ckpt.display());
            let test_dir = data.join(TEST_DIR);
            if test_dir.is_dir() {
                let test = load_split(&test_dir)?;
                let cm = glca_core::harness::evaluate::evaluate_model(&ck.params, &ck.config, &test, cli.mode)?;
                print_json(&glca_core::metrics::MetricsRecord::from_matrix("test", &cm))?;
            }
        }
        Command::Infer { ckpt, input, out, overlay } => {
            let ck = Checkpoint::load(&ckpt)?;
            create_dir(&out)?;
            let inputs = if input.is_dir() { list_files(&input, "ppm")? } else { vec![input] };
            for path in inputs {
                let files = infer_file(&ck, &path, cli.mode, &out, overlay)?;
                print_json(&serde_json::json!({
                    "image": path.display().to_string(),
                    "prediction": files.prediction.display().to_string(),
                    "mode": cli.mode,
                    "memory": files.report,
                }))?;
            }
        }
        Command::Eval { pred, gt, classes } => {
            let report = evaluate_dirs(&pred, &gt, classes)?;
            for r in &report.records {
                print_json(r)?;
            }
            print_json(&report.summary)?;
        }
        Command::Gradcheck { d_model, corrupt } => {
            let corruption = corrupt.then_some(Corruption { param: 0, index: 0, factor: 1.5 });
            let model = run_gradcheck(&micro_config(d_model), cfg.seed, corruption)?;
            let ops = op_gradchecks(cfg.seed)?;
            let worst_op = ops
                .iter()
                .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
                .expect("suite is non-empty");
            let ops_passed = worst_op.max_rel_error < OP_TOLERANCE;
            print_json(&serde_json::json!({
                "passed": model.passed && ops_passed,
                "model": &model,
                "ops": &ops,
            }))?;
            if !model.passed {
                return Err(Error::CheckFailed(format!(
                    "model gradient: max relative error {:.3e} in {} (tolerance {TOLERANCE:e})",
                    model.max_rel_error, model.worst
                )));
            }
            if !ops_passed {
                return Err(Error::CheckFailed(format!(
                    "op gradient: max relative error {:.3e} in {} (tolerance {OP_TOLERANCE:e})",
                    worst_op.max_rel_error, worst_op.op
                )));
            }
        }
        Command::Ablate { data, out } => {
            let train_set = load_split(&data.join(TRAIN_DIR))?;
            let test_set = load_split(&data.join(TEST_DIR))?;
            let table = ablate(&cfg, &train_set, &test_set)?;
            let csv = table.to_csv()?;
            match out {
                Some(path) => fs::write(&path, &csv).map_err(|e| io_error(&path, e))?,
                None => print_text(&csv)?,
            }
        }
        Command::Tile { height, width, plan: _ } => {
            let grid = plan_grid(height, width, cfg.model.patch, cfg.model.overlap)?;
            print_text(&format!("{}\n", grid.to_json()))?;
        }
        Command::BenchMemory { sides, out } => {
            let rows = bench_memory(&cfg.model, &sides, cfg.seed)?;
            let text: String = rows
                .iter()
                .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Usage(e.to_string()))?;
            match out {
                Some(path) => fs::write(&path, &text).map_err(|e| io_error(&path, e))?,
                None => print_text(&text)?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

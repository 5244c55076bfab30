//! The `cmslstm` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use cms_tensor::OpKind;

use crate::config::RunConfig;
use crate::data::{build_dataset, Dataset, Geometry};
use crate::error::{Error, Result};
use crate::export::{export_maps, export_prediction};
use crate::gradcheck::{self, DEFAULT_TOLERANCE};
use crate::train::{self, RunDir, CONFIG_FILE};

pub const TRAIN_FILE: &str = "train.stsq";
pub const TEST_FILE: &str = "test.stsq";

/// Exit status for a gradient check that exceeds its tolerance.
pub const EXIT_CHECK_FAILED: i32 = 1;
/// Exit status for invalid input, missing files and every other error.
pub const EXIT_ERROR: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "cmslstm",
    version,
    about = "Context-embedding multi-scale ConvLSTM frame prediction"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train and test moving-shapes datasets.
    GenData {
        /// Output directory; receives train.stsq and test.stsq.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        n_train: usize,
        #[arg(long, default_value_t = 200)]
        n_test: usize,
        /// Frame width and height in pixels.
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Moving shapes per sequence.
        #[arg(long, default_value_t = 2)]
        shapes: usize,
        #[arg(long, default_value_t = 10)]
        t_in: usize,
        #[arg(long, default_value_t = 10)]
        t_out: usize,
    },
    /// Train a model; writes run.cfg, train_log.csv and checkpoint.cmsl.
    Train {
        /// key=value run configuration; defaults apply to absent keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training dataset file, or a directory holding train.stsq.
        /// Defaults to the config's `dataset` key.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Override one config key, e.g. `--set enable_se=false`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint autoregressively; writes a per-frame CSV report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Test dataset file, or a directory holding test.stsq.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Run configuration; defaults to run.cfg next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write observed, ground-truth and predicted frames of one sequence as PGM.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset file, or a directory holding test.stsq.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out_dir: PathBuf,
        /// Run configuration; defaults to run.cfg next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of every primitive
    /// and of the cell in all four CE/SE modes.
    Gradcheck {
        /// Run configuration whose block settings the cell cases use.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the backward rule of one primitive (detector self-test).
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
    },
    /// Export final-layer CE weight maps and SE attention mass as PGM images.
    ExportMaps {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset file, or a directory holding test.stsq.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out_dir: PathBuf,
        /// Run configuration; defaults to run.cfg next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status. Errors are reported on `err` as one line:
/// `error: kind=<kind> msg="<message>"`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().replace('"', "'");
            let _ = writeln!(err, "error: kind={} msg=\"{msg}\"", e.kind());
            EXIT_ERROR
        }
    }
}

fn dataset_path(path: &Path, default_file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(default_file)
    } else {
        path.to_path_buf()
    }
}

fn run_config(config: Option<&Path>, ckpt: &Path) -> Result<RunConfig> {
    let path = match config {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
    };
    RunConfig::load(&path)
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    let mut say = |line: String| {
        let _ = writeln!(out, "{line}");
    };
    match command {
        Command::GenData {
            out: dir,
            seed,
            n_train,
            n_test,
            size,
            shapes,
            t_in,
            t_out,
        } => {
            if t_in == 0 || t_out == 0 {
                return Err(Error::Invalid("t_in and t_out must be positive".into()));
            }
            let geometry = Geometry {
                frame_size: size,
                shapes,
                frames: t_in + t_out,
            };
            let (train, test) = build_dataset(seed, n_train, n_test, &geometry)?;
            train.save(&dir.join(TRAIN_FILE))?;
            test.save(&dir.join(TEST_FILE))?;
            say(format!(
                "STSQ n_train={n_train} n_test={n_test} T={} H={size} W={size} C=1 t_in={t_in} t_out={t_out} seed={seed} -> {}",
                t_in + t_out,
                dir.display()
            ));
        }
        Command::Train {
            config,
            data,
            out_dir,
            overrides,
        } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            for kv in &overrides {
                let (k, v) = kv.split_once('=').ok_or_else(|| {
                    Error::Invalid(format!("--set expects KEY=VALUE, got {kv:?}"))
                })?;
                cfg.set(k.trim(), v.trim()).map_err(Error::Invalid)?;
            }
            let data = data.or_else(|| cfg.dataset.clone()).ok_or_else(|| {
                Error::Invalid("no dataset: pass --data or set `dataset` in the config".into())
            })?;
            let path = dataset_path(&data, TRAIN_FILE);
            cfg.dataset = Some(path.clone());
            cfg.validate()?;
            let dataset = Dataset::load(&path)?;
            let dir = RunDir::new(&out_dir);
            let every = (cfg.iters / 20).max(1);
            let outcome = train::train(&cfg, &dataset, Some(&dir), |row| {
                if row.iteration % every == 0 || row.iteration + 1 == cfg.iters {
                    say(format!(
                        "iter {:>6} loss {:.6} eps {:.3} {} ms",
                        row.iteration, row.loss, row.epsilon, row.elapsed_ms
                    ));
                }
            })?;
            let _ = writeln!(
                out,
                "trained {} iterations, {} parameters -> {}",
                outcome.log.len(),
                outcome.store.scalar_count(),
                dir.checkpoint().display()
            );
        }
        Command::Eval {
            ckpt,
            data,
            report,
            config,
        } => {
            let cfg = run_config(config.as_deref(), &ckpt)?;
            let dataset = Dataset::load(&dataset_path(&data, TEST_FILE))?;
            train::check_dataset(&cfg, &dataset)?;
            let (model, store, _) = train::load_model(&cfg, &ckpt)?;
            let r = train::evaluate(&model, &store, &dataset, cfg.t_in)?;
            r.save_csv(&report)?;
            let a = r.aggregate();
            say(format!(
                "frames={} mse={:.4} mae={:.4} psnr={:.4} ssim={:.6} -> {}",
                r.frames(),
                a.mse,
                a.mae,
                a.psnr,
                a.ssim,
                report.display()
            ));
        }
        Command::Predict {
            ckpt,
            data,
            index,
            out_dir,
            config,
        } => {
            let cfg = run_config(config.as_deref(), &ckpt)?;
            let dataset = Dataset::load(&dataset_path(&data, TEST_FILE))?;
            train::check_dataset(&cfg, &dataset)?;
            dataset.raw(index)?;
            let (model, store, _) = train::load_model(&cfg, &ckpt)?;
            let written = export_prediction(&model, &store, &dataset, index, cfg.t_in, &out_dir)?;
            say(format!(
                "wrote {} frames to {}",
                written.len(),
                out_dir.display()
            ));
        }
        Command::Gradcheck {
            config,
            tolerance,
            seed,
            inject_fault,
        } => {
            if tolerance.is_nan() || tolerance <= 0.0 {
                return Err(Error::Invalid(format!(
                    "tolerance {tolerance} must be positive"
                )));
            }
            let fault = match inject_fault.as_deref() {
                None => None,
                Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
                    let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
                    Error::Invalid(format!(
                        "unknown primitive {name:?}; known: {}",
                        known.join(", ")
                    ))
                })?),
            };
            let template = match &config {
                Some(p) => RunConfig::load(p)?.model,
                None => RunConfig::default().model,
            };
            let report = gradcheck::run(&gradcheck::Options {
                tolerance,
                seed,
                fault,
                template,
            })?;
            for r in &report.results {
                let verdict = if r.worst < tolerance { "ok" } else { "FAIL" };
                say(format!(
                    "{:<18} worst_rel_err={:.3e} {verdict}",
                    r.name, r.worst
                ));
            }
            say(format!(
                "checked {} cases, worst {:.3e}, tolerance {:.1e}: {}",
                report.results.len(),
                report.worst(),
                tolerance,
                if report.passed() { "PASS" } else { "FAIL" }
            ));
            if !report.passed() {
                return Ok(EXIT_CHECK_FAILED);
            }
        }
        Command::ExportMaps {
            ckpt,
            data,
            index,
            out_dir,
            config,
        } => {
            let cfg = run_config(config.as_deref(), &ckpt)?;
            let dataset = Dataset::load(&dataset_path(&data, TEST_FILE))?;
            train::check_dataset(&cfg, &dataset)?;
            dataset.raw(index)?;
            let (model, store, _) = train::load_model(&cfg, &ckpt)?;
            let export = export_maps(&model, &store, &dataset, index, cfg.t_in, &out_dir)?;
            for n in &export.notices {
                say(format!("notice: {n}"));
            }
            say(format!(
                "wrote {} files to {}",
                export.written.len(),
                out_dir.display()
            ));
        }
    }
    Ok(0)
}

//! `fire` — one binary wiring data synthesis, training, registration,
//! evaluation and benchmarking into batch workflows.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fire_core::config::RunConfig;
use fire_core::data;
use fire_core::eval;
use fire_core::model::{Direction, RegisterMode};
use fire_core::trainer;
use fire_core::warp::{compose, identity_grid};
use fire_core::FireError;

#[derive(Parser)]
#[command(name = "fire", version, about = "Unsupervised affine + non-rigid image registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Ab,
    Ba,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Direction {
        match d {
            DirectionArg::Ab => Direction::AB,
            DirectionArg::Ba => Direction::BA,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-modality phantom dataset with label masks.
    Synth {
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Number of co-registered volume pairs.
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Spatial rank of the volumes.
        #[arg(long, default_value_t = 2)]
        dim: usize,
        /// Extent per axis (>= 16, divisible by 4).
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Dataset seed; per-pair seeds are derived and recorded.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write PGM previews (2-D only).
        #[arg(long)]
        preview: bool,
    },
    /// Train a model on a synthesized dataset.
    Train {
        /// Run configuration JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (from `fire synth`).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the trace, checkpoints and reports.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured iteration count.
        #[arg(long)]
        iters: Option<u64>,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Register a moving volume onto a fixed volume with a trained model.
    Register {
        /// Checkpoint stem or `.ckpt.json` path.
        #[arg(long)]
        ckpt: PathBuf,
        /// Moving volume (stem or `.vol.json`).
        #[arg(long)]
        moving: PathBuf,
        /// Fixed volume (stem or `.vol.json`).
        #[arg(long)]
        fixed: PathBuf,
        /// Output stem for the warped volume.
        #[arg(long)]
        out: PathBuf,
        /// Optional output stem for the composed displacement field
        /// (n channels, image resolution, normalized units).
        #[arg(long)]
        field: Option<PathBuf>,
        /// Which transformation network to apply.
        #[arg(long, value_enum, default_value = "ab")]
        direction: DirectionArg,
    },
    /// Evaluate registration quality over a masked dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Random perturbations applied to each case.
        #[arg(long, default_value_t = 20)]
        repeat: usize,
        /// Report stem: writes `<report>.csv` and `<report>.txt`.
        #[arg(long)]
        report: PathBuf,
        /// Optional run config supplying the perturbation protocol.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Worker threads (FIRE_THREADS caps this; default 1).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Time registrations and emit a mean/std table per dataset and mode.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Timing repeats over the dataset.
        #[arg(long, default_value_t = 5)]
        repeat: usize,
        /// Report stem: writes `<report>.csv` and `<report>.txt`.
        #[arg(long)]
        report: PathBuf,
    },
}

fn worker_count(flag: Option<usize>) -> usize {
    let cap = std::env::var("FIRE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .max(1);
    flag.unwrap_or(1).clamp(1, cap)
}

fn run() -> Result<(), FireError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth {
            out,
            count,
            dim,
            size,
            seed,
            preview,
        } => {
            let manifest = data::synth_dataset(&out, count, dim, size, seed)?;
            if preview {
                for p in &manifest.pairs {
                    for stem in [&p.a, &p.b] {
                        let v = data::load_volume(&out.join(stem))?;
                        if v.spatial_shape().len() == 2 {
                            data::write_pgm_preview(&v, &out.join(format!("{stem}.pgm")))?;
                        }
                    }
                }
            }
            eprintln!(
                "wrote {} pairs ({}^{}, seed {}) to {}",
                count,
                size,
                dim,
                seed,
                out.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            data: data_dir,
            out,
            iters,
            seed,
        } => {
            let mut cfg = match config {
                Some(path) => RunConfig::from_path(&path)?,
                None => RunConfig::default(),
            };
            if let Some(iters) = iters {
                cfg.train.iters = iters;
            }
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            cfg.validate()?;
            let pairs = data::load_dataset(&data_dir)?;
            let setup = cfg.to_setup();
            let t0 = std::time::Instant::now();
            let outcome = trainer::train(&pairs, &setup, &out)?;
            eprintln!(
                "trained {} iterations in {:.1}s; trace: {}; checkpoint: {}",
                cfg.train.iters,
                t0.elapsed().as_secs_f64(),
                outcome.trace_path.display(),
                outcome.final_checkpoint.display()
            );
            Ok(())
        }
        Command::Register {
            ckpt,
            moving,
            fixed,
            out,
            field,
            direction,
        } => {
            let (model, _) = trainer::load_checkpoint(&ckpt)?;
            let moving = data::load_volume(&moving)?;
            let fixed = data::load_volume(&fixed)?;
            let (aff, u, warped) =
                eval::register_volume(&model, &moving, &fixed, direction.into(), RegisterMode::Full)?;
            data::save_volume(&warped, &out)?;
            if let Some(field_stem) = field {
                let sp = moving.spatial_shape().to_vec();
                let grid = compose(&aff, &u, &sp)?;
                let id = identity_grid::<f32>(&sp)?;
                let displacement = grid.tensor().sub(id.tensor())?.detach();
                data::save_tensor(&displacement, &warped.spacing_mm, &field_stem)?;
            }
            Ok(())
        }
        Command::Eval {
            ckpt,
            data: data_dir,
            repeat,
            report,
            config,
            seed,
            workers,
        } => {
            let (model, _) = trainer::load_checkpoint(&ckpt)?;
            let cases = data::load_dataset(&data_dir)?;
            let spec = match config {
                Some(path) => RunConfig::from_path(&path)?.perturbation,
                None => Default::default(),
            };
            let report_data =
                eval::evaluate(&model, &cases, &spec, repeat, seed, worker_count(workers))?;
            eval::write_report(
                &report_data,
                &report.with_extension("csv"),
                &report.with_extension("txt"),
            )?;
            print!("{}", report_data.text_summary());
            Ok(())
        }
        Command::Bench {
            ckpt,
            data: data_dir,
            repeat,
            report,
        } => {
            let (model, _) = trainer::load_checkpoint(&ckpt)?;
            let cases = data::load_dataset(&data_dir)?;
            let name = format!("phantom-{}d", cases[0].0.spatial_shape().len());
            let bench = eval::bench(&model, &cases, &name, repeat)?;
            std::fs::write(report.with_extension("csv"), bench.csv())
                .map_err(|e| FireError::Io {
                    path: report.display().to_string(),
                    source: e,
                })?;
            std::fs::write(report.with_extension("txt"), bench.text_summary()).map_err(|e| {
                FireError::Io {
                    path: report.display().to_string(),
                    source: e,
                }
            })?;
            print!("{}", bench.text_summary());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

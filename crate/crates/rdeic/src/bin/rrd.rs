//! Command-line interface for the relay residual diffusion codec.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rdeic::codec::{compress, decompress, CompressOptions, DecompressOptions};
use rdeic::config::{GridConfig, TrainConfig};
use rdeic::corpus;
use rdeic::eval;
use rdeic::nn::checkpoint::Model;
use rdeic::train::Trainer;

#[derive(Parser)]
#[command(name = "rrd", version, about = "Relay residual diffusion image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress an image into a bitstream file.
    Compress {
        /// Input image (PNG or PPM).
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Default denoising step count recorded in the header.
        #[arg(long, default_value_t = 2)]
        steps: usize,
        /// Guidance scale recorded in the header.
        #[arg(long = "lambda-s", default_value_t = 1.0)]
        lambda_s: f64,
        /// Bypass the learned entropy model (escape-only coding).
        #[arg(long)]
        raw: bool,
        /// Decode-noise seed override (derived from content by default).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Decompress a bitstream file into an image.
    Decompress {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Override the denoising step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Override the guidance scale.
        #[arg(long = "lambda-s")]
        lambda_s: Option<f64>,
    },
    /// Evaluate a grid of models / step counts / guidance scales over a
    /// directory of images.
    Eval {
        image_dir: PathBuf,
        #[arg(long)]
        grid: PathBuf,
    },
    /// Run a training stage described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// 1 = independent per-step training (runs the autoencoder and
        /// base-denoiser pretraining first when starting fresh),
        /// 2 = fixed-step fine-tuning.
        #[arg(long)]
        stage: u8,
        /// Checkpoint to continue from (required for stage 2).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Where to write the trained checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Metrics log (JSON lines); defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Generate a synthetic toy-image corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
    },
}

fn run() -> rdeic::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Compress {
            input,
            output,
            model,
            steps,
            lambda_s,
            raw,
            seed,
        } => {
            let model = Model::load(&model)?;
            let img = corpus::load_image(&input)?;
            let opts = CompressOptions {
                raw_mode: raw,
                steps,
                lambda_s,
                seed,
            };
            let (bytes, info) = compress(&model, &img, &opts)?;
            std::fs::write(&output, &bytes)?;
            let (_, h, w) = img.dim();
            println!(
                "{} -> {} ({} bytes, {:.4} bpp, estimated {:.1} bits)",
                input.display(),
                output.display(),
                bytes.len(),
                rdeic::metrics::bpp(bytes.len() * 8, w, h),
                info.estimated_bits
            );
        }
        Command::Decompress {
            input,
            output,
            model,
            steps,
            lambda_s,
        } => {
            let model = Model::load(&model)?;
            let bytes = std::fs::read(&input)?;
            let (img, info) = decompress(&model, &bytes, &DecompressOptions { steps, lambda_s })?;
            corpus::save_image(&output, &img)?;
            println!(
                "{} -> {} ({}x{}, {} steps, denoising {:.3}s)",
                input.display(),
                output.display(),
                info.header.width,
                info.header.height,
                info.timing.per_step_seconds.len(),
                info.timing.total_seconds()
            );
        }
        Command::Eval { image_dir, grid } => {
            let grid = GridConfig::load(&grid)?;
            let mut log = std::io::stderr();
            let records = eval::evaluate(&image_dir, &grid, &mut log)?;
            println!(
                "wrote {} rows to {}",
                records.len(),
                grid.out_dir.join("metrics.csv").display()
            );
            let sweep = eval::mean_d_by_lambda_s(&records, &grid.lambda_s_values);
            for (ls, d) in sweep {
                println!("lambda_s = {ls:<4}: mean D = {d:.4}");
            }
        }
        Command::Train {
            config,
            stage,
            init,
            out,
            log,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let log_path = log.unwrap_or_else(|| {
                let mut p = out.clone();
                p.set_extension("log.jsonl");
                p
            });
            let mut log = std::fs::File::create(&log_path)?;
            let model = match &init {
                Some(p) => Model::load(p)?,
                None => Model::new(cfg.topology.clone(), cfg.schedule, cfg.seed),
            };
            let mut trainer = Trainer::new(model, cfg)?;
            match stage {
                1 => {
                    use rdeic::nn::checkpoint::TrainStage;
                    if trainer.model.meta.stage < TrainStage::Autoencoder {
                        eprintln!("pretraining autoencoder...");
                        let mse = trainer.pretrain_autoencoder(&mut log)?;
                        eprintln!("autoencoder held-out MSE: {mse:.5}");
                    }
                    if trainer.model.meta.stage < TrainStage::BaseDenoiser {
                        eprintln!("pretraining base denoiser...");
                        trainer.pretrain_base_denoiser(&mut log)?;
                    }
                    eprintln!("stage I...");
                    trainer.train_stage1(&mut log)?;
                }
                2 => {
                    eprintln!("stage II (L = {})...", trainer.cfg.l_steps);
                    trainer.train_stage2(&mut log)?;
                }
                other => {
                    return Err(rdeic::Error::Config(format!(
                        "unknown stage {other} (expected 1 or 2)"
                    )))
                }
            }
            trainer.model.save(&out)?;
            let mse = trainer.heldout_mse(trainer.cfg.l_steps, 1.0)?;
            println!(
                "saved {} (held-out reconstruction MSE at L={}: {:.5})",
                out.display(),
                trainer.cfg.l_steps,
                mse
            );
        }
        Command::GenCorpus {
            out,
            count,
            size,
            seed,
        } => {
            let images = corpus::generate_corpus(seed, count, size);
            corpus::save_corpus(&out, &images)?;
            println!("wrote {count} images ({size}x{size}) to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

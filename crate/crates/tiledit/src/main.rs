use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tiledit::checkpoint::load_model;
use tiledit::config::{EmbeddingSource, RunConfig, CONFIG_ENV};
use tiledit::engine::{iterative_upsample, plan_report, upsample, verify_equivalence, Upsampled};
use tiledit::io::{load_image, save_image};
use tiledit::textures::texture_set;
use tiledit::train::{load_dataset, train, TrainState};
use tiledit::{Error, Result};
use tiledit_core::diffusion::Sampler;
use tiledit_core::geometry::Trajectory;
use tiledit_core::imaging::{psnr, ssim};
use tiledit_core::model::Model;
use tiledit_core::{Precision, Scalar};

#[derive(Parser)]
#[command(name = "tiledit", version, about = "Block-streamed diffusion transformer upsampler")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Upsample one image.
    Upsample(UpsampleArgs),
    /// Upsample repeatedly, feeding each output back in.
    Iterate {
        #[command(flatten)]
        args: UpsampleArgs,
        #[arg(long, default_value_t = 3)]
        rounds: usize,
    },
    /// Train a model on a directory of PNG/PPM images.
    TrainToy {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from the checkpoint at --out.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the tile schedule and memory estimate for an image size.
    Plan {
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        tiles_n: Option<usize>,
        #[arg(long, value_enum)]
        trajectory: Option<TrajectoryArg>,
    },
    /// Compare streamed and whole-image forward passes of a random model.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "32", value_parser = ["32", "64"])]
        precision: String,
    },
    /// PSNR and SSIM between two image files.
    Metrics {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Write procedural training textures.
    Textures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct UpsampleArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    factor: Option<usize>,
    #[arg(long)]
    tiles_n: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    sampler: Option<SamplerArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    prompt_pos: Option<String>,
    #[arg(long)]
    prompt_neg: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Precomputed SEMB embedding instead of the built-in encoder.
    #[arg(long)]
    embedding_file: Option<PathBuf>,
    /// Start from pure noise instead of noise around the upsampled input.
    #[arg(long)]
    plain_noise_init: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Euler,
    Heun,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrajectoryArg {
    RowMajor,
    ColumnMajor,
}

impl UpsampleArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.factor {
            cfg.factor = v;
        }
        if let Some(v) = self.tiles_n {
            cfg.tiles_n = v;
        }
        if let Some(v) = self.steps {
            cfg.edm.steps = v;
        }
        if let Some(s) = self.sampler {
            cfg.edm.sampler = match s {
                SamplerArg::Euler => Sampler::Euler,
                SamplerArg::Heun => Sampler::Heun,
            };
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.prompt_pos {
            cfg.guidance.positive = v.clone();
        }
        if let Some(v) = &self.prompt_neg {
            cfg.guidance.negative = v.clone();
        }
        if let Some(v) = self.alpha {
            cfg.guidance.alpha = v;
        }
        if let Some(p) = &self.embedding_file {
            cfg.embedding = EmbeddingSource::File { path: p.clone() };
        }
        if self.plain_noise_init {
            cfg.edm.lr_init = false;
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref())?;
    match cli.command {
        Command::Upsample(args) => {
            args.apply(&mut cfg);
            cfg.validate()?;
            match cfg.precision {
                Precision::F32 => run_upsample::<f32>(&args, &cfg, 1),
                Precision::F64 => run_upsample::<f64>(&args, &cfg, 1),
            }
        }
        Command::Iterate { args, rounds } => {
            args.apply(&mut cfg);
            cfg.validate()?;
            match cfg.precision {
                Precision::F32 => run_upsample::<f32>(&args, &cfg, rounds),
                Precision::F64 => run_upsample::<f64>(&args, &cfg, rounds),
            }
        }
        Command::TrainToy { data, out, steps, resume, seed } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            match cfg.precision {
                Precision::F32 => run_train::<f32>(&data, &out, resume, &cfg),
                Precision::F64 => run_train::<f64>(&data, &out, resume, &cfg),
            }
        }
        Command::Plan { height, width, tiles_n, trajectory } => {
            let traj = trajectory.map(|t| match t {
                TrajectoryArg::RowMajor => Trajectory::RowMajor,
                TrajectoryArg::ColumnMajor => Trajectory::ColumnMajor,
            });
            let report = plan_report(
                height,
                width,
                &cfg.model,
                tiles_n.unwrap_or(cfg.tiles_n),
                traj.or(cfg.trajectory),
                cfg.precision,
            )?;
            print!("{report}");
            Ok(())
        }
        Command::Verify { seed, precision } => {
            let p = if precision == "64" { Precision::F64 } else { Precision::F32 };
            let report = verify_equivalence(seed, p)?;
            println!("{report}");
            if report.pass() {
                Ok(())
            } else {
                Err(Error::CheckFailed("streamed forward deviates from the whole-image forward".into()))
            }
        }
        Command::Metrics { reference, test } => {
            let a = load_image(&reference)?;
            let b = load_image(&test)?;
            println!("psnr_db {}", psnr(&a, &b)?);
            println!("ssim {}", ssim(&a, &b)?);
            Ok(())
        }
        Command::Textures { out, count, size, seed } => {
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for (i, img) in texture_set(seed, count, size).iter().enumerate() {
                save_image(img, out.join(format!("texture_{i:05}.png")))?;
            }
            println!("wrote {count} textures to {}", out.display());
            Ok(())
        }
    }
}

fn run_upsample<T: Scalar>(args: &UpsampleArgs, cfg: &RunConfig, rounds: usize) -> Result<()> {
    let model: Model<T> = load_model(&args.checkpoint, Some(&cfg.model))?;
    let lr = load_image(&args.input)?;
    let runs: Vec<Upsampled> = if rounds == 1 {
        vec![upsample(&lr, &model, cfg)?]
    } else {
        iterative_upsample(&lr, rounds, &model, cfg)?.1
    };
    let last = runs.last().expect("at least one round");
    save_image(&last.image, &args.output)?;
    for (i, r) in runs.iter().enumerate() {
        println!(
            "round {} size {}x{} high_water_blocks {} bound {} cache_bytes {}",
            i + 1,
            r.image.height(),
            r.image.width(),
            r.stats.high_water_blocks,
            r.plan.residency_bound(),
            r.stats.high_water_bytes
        );
    }
    Ok(())
}

fn run_train<T: Scalar>(data: &Path, out: &Path, resume: bool, cfg: &RunConfig) -> Result<()> {
    let images = load_dataset(data)?;
    let mut state = if resume {
        TrainState::<T>::load(out, cfg)?
    } else {
        TrainState::new(Model::<T>::init(cfg.model, cfg.seed)?)
    };
    let every = cfg.train.checkpoint_every;
    train(&mut state, &images, cfg, cfg.train.steps, |st, log| {
        if log.step % 50 == 0 || log.step == cfg.train.steps {
            println!("step {} loss {:.5} grad_norm {:.4}", log.step, log.loss, log.grad_norm);
        }
        if every > 0 && log.step % every == 0 {
            st.save(out)?;
        }
        Ok(())
    })?;
    state.save(out)
}

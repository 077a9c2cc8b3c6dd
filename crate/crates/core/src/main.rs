use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use drnet::drmlp::{Bank, Task};
use drnet::model::{load, load_train, save, save_fused, Checkpoint, DRNet, Mode};
use drnet::pipeline::{
    bench, psnr, read_image, restore, sequential_restore, ssim, train, write_image, RunConfig,
    TaskSpec,
};
use drnet::Error;

#[derive(Parser)]
#[command(name = "drnet", version, about = "All-in-one image restoration with task-fused MLP banks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a freshly initialized train-mode checkpoint
    Init {
        /// Run configuration; the tiny preset when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on synthetic degradations
    Train {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated task names
        #[arg(long, value_delimiter = ',', required = true)]
        tasks: Vec<String>,
        #[arg(long)]
        steps: Option<usize>,
        /// Training keys (crop, batch, lr, ...) are read from here
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 100)]
        log_every: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collapse every bank for one task
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Restore an image with a fused checkpoint, or with a train-mode
    /// checkpoint and an ordered task list
    Restore {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<String>>,
    },
    /// Time the fused and multi-branch forward passes
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 10)]
        reps: usize,
    },
    /// Summarize a checkpoint
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        /// Print the cosine similarity of fused weights between priors
        #[arg(long)]
        similarity: bool,
        /// Restrict the similarity to one bank (1 or 2)
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        bank: Option<u8>,
    },
    /// PSNR and SSIM of a test image against a reference
    Metrics {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
}

fn parse_tasks(names: &[String]) -> Result<Vec<Task>> {
    Ok(names
        .iter()
        .map(|n| n.trim().parse())
        .collect::<drnet::Result<Vec<Task>>>()?)
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(RunConfig::from_text(&text)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init { config, seed, out } => {
            let cfg = match config {
                Some(p) => read_config(&p)?.model,
                None => RunConfig::default().model,
            };
            let m = DRNet::build(&cfg, seed)?;
            save(&m, &out)?;
            println!(
                "initialized {} ({} train / {} fused parameters)",
                out.display(),
                m.count_params(Mode::Train),
                m.count_params(Mode::Fused)
            );
        }
        Command::Train {
            ckpt,
            tasks,
            steps,
            config,
            seed,
            log_every,
            out,
        } => {
            let tasks = parse_tasks(&tasks)?;
            let mut m = load_train(&ckpt)?;
            let mut tc = match config {
                Some(p) => read_config(&p)?.train,
                None => Default::default(),
            };
            if let Some(s) = steps {
                tc.steps = s;
            }
            if let Some(s) = seed {
                tc.seed = s;
            }
            let log_every = log_every.max(1);
            let report = train(&mut m, &tc, &tasks, |step, loss, lr| {
                if step % log_every == 0 || step + 1 == tc.steps {
                    println!("step {step:>6}  loss {loss:.5}  lr {lr:.3e}");
                }
            })?;
            save(&m, &out)?;
            if !report.losses.is_empty() {
                let n = report.losses.len();
                let window = n.min(100);
                println!(
                    "trained {n} steps; mean loss first {window}: {:.5}, last {window}: {:.5}",
                    report.mean_loss(0..window),
                    report.mean_loss(n - window..n)
                );
            }
        }
        Command::Fuse { ckpt, task, out } => {
            let m = load_train(&ckpt)?;
            let spec = TaskSpec::from_name(&task, m.config().num_tasks)?;
            let fused = m.reconfigure(&spec.prior)?;
            save_fused(&fused, &out)?;
            println!("fused for {task}: {} parameters", fused.count_params());
        }
        Command::Restore {
            ckpt,
            input,
            output,
            tasks,
        } => {
            let image = read_image(&input)?;
            let restored = match (load(&ckpt)?, tasks) {
                (Checkpoint::Fused(f), None) => restore(&f, &image)?,
                (Checkpoint::Train(m), Some(names)) => {
                    sequential_restore(&m, &image, &parse_tasks(&names)?)?
                }
                (Checkpoint::Fused(_), Some(_)) => {
                    return Err(Error::Contract(
                        "--tasks needs a train-mode checkpoint".into(),
                    )
                    .into())
                }
                (Checkpoint::Train(_), None) => {
                    return Err(Error::Contract(
                        "a train-mode checkpoint needs --tasks (or fuse it first)".into(),
                    )
                    .into())
                }
            };
            write_image(&output, &restored)?;
        }
        Command::Bench {
            ckpt,
            task,
            size,
            reps,
        } => {
            let m = load_train(&ckpt)?;
            let report = bench(&m, task.parse()?, size, size, reps)?;
            println!("{report}");
        }
        Command::Inspect {
            ckpt,
            similarity,
            bank,
        } => {
            let loaded = load(&ckpt)?;
            let cfg = loaded.config().clone();
            match &loaded {
                Checkpoint::Train(m) => {
                    println!("mode            train");
                    println!("params_train    {}", m.count_params(Mode::Train));
                    println!("params_fused    {}", m.count_params(Mode::Fused));
                }
                Checkpoint::Fused(f) => {
                    println!("mode            fused:{}", f.task());
                    println!("params          {}", f.count_params());
                }
            }
            println!("config_digest   {}", cfg.digest());
            print!("{}", cfg.to_text());
            if similarity {
                let Checkpoint::Train(m) = &loaded else {
                    return Err(Error::Format(
                        "similarity needs a train-mode checkpoint".into(),
                    )
                    .into());
                };
                let bank = bank.map(|b| if b == 1 { Bank::First } else { Bank::Second });
                println!();
                print!("{}", m.task_similarity(bank)?);
            }
        }
        Command::Metrics { reference, test } => {
            let a = read_image(&reference)?;
            let b = read_image(&test)?;
            println!("psnr {:.4}", psnr(&b, &a, 1.0)?);
            println!("ssim {:.6}", ssim(&b, &a)?);
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Divergence(_)) => 4,
        Some(Error::UnknownTask(_) | Error::Contract(_)) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

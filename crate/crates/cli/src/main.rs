use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use weaklab::bench::{prepare, run_ladder};
use weaklab::config::{parse_seeds, RunConfig};
use weaklab::manifest::RunManifest;
use weaklab::pipeline::{self, EvalSplit, TrainInputs};
use weaklab::serve::{serve, Annotator};
use weaklab::store::create_dir;
use weaklab::{CliError, Result};

#[derive(Parser)]
#[command(name = "weaklab", version, about = "Weakly supervised LiDAR+camera segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (flat `key = value` file).
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Err(CliError::Config("--config <file> is required".into())),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Superpixel directory; without it the association loss is inactive.
    #[arg(long)]
    superpixels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    assoc_weight: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = self.config.load()?;
        cfg.epochs = self.epochs.unwrap_or(cfg.epochs);
        cfg.lr = self.lr.unwrap_or(cfg.lr);
        cfg.assoc_weight = self.assoc_weight.unwrap_or(cfg.assoc_weight);
        cfg.train_seed = self.seed.unwrap_or(cfg.train_seed);
        cfg.validate()?;
        Ok(cfg)
    }

    fn inputs(&self) -> TrainInputs<'_> {
        TrainInputs { scenes: &self.scenes, labels: &self.labels, superpixels: self.superpixels.as_deref() }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes.
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        /// Inclusive range `a..b` or list `a,b,c`; defaults to the config's `seeds`.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ground detection, clustering and simulated cluster annotation.
    Label {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// SEEDS superpixels for every camera image.
    Superpixel {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Superpixels per image (overrides the config).
        #[arg(long)]
        n: Option<usize>,
    },
    /// One supervised M-step on the initial labels.
    Train(TrainArgs),
    /// Warm-up followed by EM self-training.
    Em {
        #[command(flatten)]
        train: TrainArgs,
        /// act-fsf, fix, fix:<tau>, esl or dars (overrides the config).
        #[arg(long)]
        method: Option<String>,
    },
    /// One E-step with a trained model: append pseudo labels.
    Rectify {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        method: Option<String>,
        #[arg(long, default_value_t = 0)]
        iteration: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class IoU and mIoU of a model.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// val, train or all.
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// The supervision ladder on the synthetic benchmark.
    Bench {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// HTTP service for cluster-level annotation.
    ServeAnnotate {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 8787)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        readonly: bool,
        /// Start from empty label sets (the annotation units are kept).
        #[arg(long)]
        reset: bool,
    },
}

fn method_override(cfg: &mut RunConfig, method: &Option<String>) -> Result<()> {
    if let Some(m) = method {
        cfg.pseudo_method = m.clone();
        cfg.validate()?;
    }
    Ok(())
}

fn bench(cfg: &RunConfig, out: &Path) -> Result<String> {
    let seeds =
        parse_seeds(cfg.seeds.as_deref().ok_or_else(|| CliError::Config("bench needs `seeds` in the config".into()))?)?;
    let data = prepare(cfg, &seeds)?;
    let s = &data.stats;
    eprintln!(
        "data: {} train / {} val scenes, sparse {:.3}%, propagated {:.1}%, negative {:.1}% ({:.0} s)",
        data.train.len(),
        data.val.len(),
        100.0 * s.sparse_rate,
        100.0 * s.propagated_rate,
        100.0 * s.negative_rate,
        data.seconds
    );
    let report = run_ladder(cfg, &data, |line| eprintln!("{line}"))?;
    create_dir(out)?;
    let mut m = RunManifest::new("bench", &cfg.hash(), &seeds);
    let mut lines = Vec::new();
    for r in &report.rungs {
        lines.push(serde_json::json!({"rung": r.name, "miou": r.miou, "iou": r.iou, "seconds": r.seconds}).to_string());
    }
    lines.push(serde_json::json!({"em_history": report.em_history, "em_best": report.em_best}).to_string());
    m.write_artifact(out, "ladder.jsonl", (lines.join("\n") + "\n").as_bytes())?;
    m.write(out)?;
    let text: Vec<String> = report.rungs.iter().map(|r| format!("{:<26} {:6.2}", r.name, r.miou)).collect();
    Ok(text.join("\n"))
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Synth { config, seeds, out } => {
            let cfg = config.load()?;
            let spec = seeds.or(cfg.seeds.clone()).ok_or_else(|| CliError::Config("no seeds given".into()))?;
            Ok(pipeline::synth(&cfg, &parse_seeds(&spec)?, &out)?.report)
        }
        Command::Label { config, input, out } => Ok(pipeline::label(&config.load()?, &input, &out)?.report),
        Command::Superpixel { config, input, out, n } => {
            let mut cfg = config.load()?;
            cfg.superpixels = n.unwrap_or(cfg.superpixels);
            cfg.validate()?;
            Ok(pipeline::superpixel(&cfg, &input, &out)?.report)
        }
        Command::Train(args) => Ok(pipeline::train(&args.load()?, &args.inputs(), &args.out)?.report),
        Command::Em { train, method } => {
            let mut cfg = train.load()?;
            method_override(&mut cfg, &method)?;
            Ok(pipeline::em(&cfg, &train.inputs(), &train.out)?.report)
        }
        Command::Rectify { config, scenes, labels, model, method, iteration, out } => {
            let mut cfg = config.load()?;
            method_override(&mut cfg, &method)?;
            let inputs = TrainInputs { scenes: &scenes, labels: &labels, superpixels: None };
            Ok(pipeline::rectify(&cfg, &inputs, &model, cfg.method()?, iteration, &out)?.report)
        }
        Command::Eval { config, scenes, model, split, out } => {
            let cfg = config.load()?;
            let split: EvalSplit = split.parse()?;
            Ok(pipeline::eval(&cfg, &scenes, &model, split, &out)?.report)
        }
        Command::Bench { config, out } => bench(&config.load()?, &out),
        Command::ServeAnnotate { scenes, labels, port, host, readonly, reset } => {
            let annotator = Annotator::open(&scenes, &labels, readonly, reset)?;
            let rt = tokio::runtime::Runtime::new().map_err(weaklab::error::io_err(Path::new("tokio runtime")))?;
            rt.block_on(serve(annotator, &host, port))?;
            Ok(String::new())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::Config(first).line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(report) => {
            if !report.is_empty() {
                println!("{report}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use sci_core::checkpoint::{self, Checkpoint};
use sci_core::config::RunConfig;
use sci_core::evalkit::Protocol;
use sci_core::pipeline::{self, ABLATION_FILE, CHECKPOINT_FILE, METRICS_FILE, TRAIN_LOG_FILE};
use sci_core::synthdata;
use sci_core::Error;

#[derive(Parser)]
#[command(name = "sci", version, about = "Cloth-changing re-identification with dual prompts and text-guided refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(Common),
    /// Run both training stages and write a checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on the query/gallery splits.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (default: <out>/checkpoint.bin).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate the four module combinations.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// Comma-separated protocols: general, same_clothes, cloth_changing.
    #[arg(long, value_delimiter = ',')]
    protocol: Vec<String>,
    #[arg(long)]
    kmax: Option<usize>,
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::OutputExists(_) => Failure::Usage(e.to_string()),
            other => Failure::Data(other),
        }
    }
}

type Outcome = Result<(), Failure>;

fn threads() -> Result<usize, Failure> {
    match std::env::var("SCI_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("SCI_THREADS must be a non-negative integer, got `{v}`"))),
        Err(_) => Ok(0),
    }
}

impl Common {
    fn base_config(&self) -> Result<RunConfig, Failure> {
        Ok(match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        })
    }

    fn resolve(&self, mut cfg: RunConfig) -> Result<RunConfig, Failure> {
        if !self.protocol.is_empty() {
            cfg.protocols = self
                .protocol
                .iter()
                .map(|s| s.trim().parse::<Protocol>())
                .collect::<Result<_, _>>()?;
        }
        if let Some(k) = self.kmax {
            cfg.kmax = k;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = Some(out.clone());
        }
        Ok(cfg.resolve(self.seed)?)
    }

    fn config(&self) -> Result<RunConfig, Failure> {
        let base = self.base_config()?;
        self.resolve(base)
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    cfg.output_dir
        .clone()
        .ok_or_else(|| Failure::Usage("no output directory: pass --out or set output_dir".into()))
}

fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::Data(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn cmd_gen(c: &Common) -> Outcome {
    let cfg = c.config()?;
    let out = out_dir(&cfg)?;
    pipeline::ensure_fresh(&out.join(synthdata::MANIFEST_FILE), c.force)?;
    let ds = synthdata::generate(&cfg.synth)?;
    pipeline::create_dir(&out)?;
    synthdata::save(&ds, &out)?;
    println!(
        "wrote {} images ({} train, {} query, {} gallery) to {}",
        ds.len(),
        ds.count(synthdata::Split::Train),
        ds.count(synthdata::Split::Query),
        ds.count(synthdata::Split::Gallery),
        out.display()
    );
    Ok(())
}

fn cmd_train(c: &Common) -> Outcome {
    let cfg = c.config()?;
    let out = out_dir(&cfg)?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    pipeline::ensure_fresh(&ckpt_path, c.force)?;
    pipeline::ensure_fresh(&out.join(TRAIN_LOG_FILE), c.force)?;
    let ds = pipeline::obtain_dataset(&cfg)?;
    let outcome = pipeline::train(&cfg, &ds)?;
    pipeline::create_dir(&out)?;
    let run = pipeline::checkpoint_record(&cfg);
    checkpoint::from_model(&outcome.model, run)?.save(&ckpt_path)?;
    pipeline::write_jsonl(&out.join(TRAIN_LOG_FILE), &pipeline::train_log_records(&cfg, &outcome)?)?;
    if let Some(last) = outcome.stage1.last() {
        println!("stage1 epoch {}: prompt loss {:.4}", last.epoch, last.total);
    }
    if let Some(last) = outcome.stage2.last() {
        println!("stage2 epoch {}: loss {:.4}", last.epoch, last.total);
    }
    println!("checkpoint {} sha256 {}", ckpt_path.display(), sha256_file(&ckpt_path)?);
    Ok(())
}

fn cmd_eval(c: &Common, checkpoint: Option<&Path>) -> Outcome {
    let threads = threads()?;
    let ckpt_path = match (checkpoint, &c.out) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(out)) => out.join(CHECKPOINT_FILE),
        (None, None) => return Err(Failure::Usage("pass --checkpoint or --out".into())),
    };
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let (model, run) = checkpoint::to_model(&ckpt)?;
    let base = match &c.config {
        Some(_) => c.base_config()?,
        None => serde_json::from_value(run["config"].clone())
            .map_err(|e| Failure::Data(Error::MalformedCheckpoint(format!("run config: {e}"))))?,
    };
    let mut cfg = c.resolve(base)?;
    if cfg.output_dir.is_none() {
        cfg.output_dir = ckpt_path.parent().map(Path::to_path_buf);
    }
    let out = out_dir(&cfg)?;
    let metrics_path = out.join(METRICS_FILE);
    pipeline::ensure_fresh(&metrics_path, c.force)?;
    let ds = pipeline::obtain_dataset(&cfg)?;
    let metrics = pipeline::evaluate_model(&model, &ds, &cfg.protocols, cfg.kmax, threads)?;
    pipeline::create_dir(&out)?;
    pipeline::write_jsonl(&metrics_path, &pipeline::metrics_records(&cfg, &metrics)?)?;
    for m in &metrics {
        println!(
            "{:<15} rank1 {:.4} rank5 {:.4} rank10 {:.4} mAP {:.4} ({} queries)",
            m.protocol.name(),
            m.rank1,
            m.rank5,
            m.rank10,
            m.map,
            m.num_valid_queries
        );
    }
    Ok(())
}

fn cmd_ablate(c: &Common) -> Outcome {
    let threads = threads()?;
    let cfg = c.config()?;
    let out = out_dir(&cfg)?;
    let path = out.join(ABLATION_FILE);
    pipeline::ensure_fresh(&path, c.force)?;
    let ds = pipeline::obtain_dataset(&cfg)?;
    let rows = pipeline::ablate(&cfg, &ds, threads)?;
    pipeline::create_dir(&out)?;
    pipeline::write_jsonl(&path, &pipeline::ablation_records(&cfg, &rows))?;
    print!("{}", pipeline::ablation_table(&rows));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Gen(c) => cmd_gen(c),
        Command::Train(c) => cmd_train(c),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint.as_deref()),
        Command::Ablate(c) => cmd_ablate(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

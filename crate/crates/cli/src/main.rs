use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rcmf::accounting::{count_params, ParamReport};
use rcmf::fused_kernel::{bench_recurrent, BENCH_CSV_HEADER};
use rcmf::layers::{ModelConfig, Variant};
use rcmf::train::checkpoint::{self, Checkpoint};
use rcmf::train::tokenizer::tokenize_bytes;
use rcmf::train::trainer::METRICS_CSV_HEADER;
use rcmf::train::{evaluate, generate, TrainConfig, Trainer};
use rcmf::Error;

#[derive(Parser, Debug)]
#[command(
    name = "rcmf",
    version,
    about = "Ternary matmul-free recurrent LMs with fixed shared reservoirs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Plain-text `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model variant: base, rc or grc.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model (optionally resuming from --ckpt).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory for metrics.csv and checkpoints.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Print a progress line every this many steps.
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Held-out loss and perplexity of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Greedy continuation of a prompt.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = 200)]
        tokens: usize,
    },
    /// Parameter and memory accounting.
    Params {
        #[command(flatten)]
        common: Common,
        /// Emit CSV instead of the aligned table.
        #[arg(long)]
        csv: bool,
    },
    /// Fused vs two-pass recurrent traversal: wall time and buffer traffic.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Sequence length (defaults to the config's context size).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

fn load_config(common: &Common) -> Result<TrainConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = common.variant {
        cfg.model.variant = v;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn read_tokens(path: &Path) -> Result<Vec<usize>, Failure> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(tokenize_bytes(&bytes))
}

/// Training and evaluation tokens: a separate eval file, or a tail holdout.
fn split_data(cfg: &TrainConfig, data: &Path) -> Result<(Vec<usize>, Vec<usize>), Failure> {
    let mut train = read_tokens(data)?;
    let eval = match &cfg.eval_data {
        Some(p) => read_tokens(p)?,
        None => {
            let keep = train.len() - (train.len() as f64 * cfg.holdout_fraction) as usize;
            train.split_off(keep)
        }
    };
    Ok((train, eval))
}

fn train(
    common: Common,
    data: Option<PathBuf>,
    steps: Option<usize>,
    out: Option<PathBuf>,
    ckpt: Option<PathBuf>,
    log_every: usize,
) -> Result<(), Failure> {
    let resumed = match &ckpt {
        Some(p) => Some(checkpoint::load(p)?),
        None => None,
    };
    let mut cfg = match &resumed {
        Some(c) if common.config.is_none() => c.config.clone(),
        _ => load_config(&common)?,
    };
    if let Some(s) = steps {
        cfg.total_steps = s;
    }
    if let Some(d) = data {
        cfg.data = Some(d);
    }
    if let Some(o) = out {
        cfg.out_dir = Some(o);
    }
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| Failure::Usage("train needs --data (or `data = …` in the config)".into()))?;
    cfg.validate()?;
    let (train_tokens, eval_tokens) = split_data(&cfg, &data)?;
    let mut trainer = match resumed {
        Some(mut c) => {
            if c.config.model != cfg.model {
                return Err(Failure::Usage(
                    "--config describes a different model than --ckpt".into(),
                ));
            }
            c.config = cfg.clone();
            c.into_trainer(train_tokens)?
        }
        None => Trainer::new(cfg.clone(), train_tokens)?,
    };
    let out_dir = cfg.out_dir.clone();
    let mut metrics: Option<BufWriter<File>> = match &out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("metrics.csv");
            let fresh = !path.exists() || trainer.step == 0;
            let file = OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&path)?;
            let mut w = BufWriter::new(file);
            if fresh {
                writeln!(w, "{METRICS_CSV_HEADER}")?;
            }
            Some(w)
        }
        None => None,
    };
    eprintln!(
        "training {} model: {} trainable parameters, {} steps, peak lr {:.3e}",
        cfg.model.variant,
        trainer.model.params.trainable_count(),
        cfg.total_steps,
        cfg.peak_lr()
    );
    let interval = cfg.checkpoint_interval;
    let total = cfg.total_steps;
    trainer.run(metrics.as_mut().map(|w| w as &mut dyn Write), |t, m| {
        if log_every > 0 && (m.step % log_every == 0 || m.step == total) {
            eprintln!(
                "step {:>6}  lr {:.3e}  loss {:.4}  smoothed {:.4}  {:.0} tok/s",
                m.step, m.lr, m.loss, m.smoothed_loss, m.tokens_per_s
            );
        }
        if let (Some(dir), true) = (&out_dir, interval > 0 && m.step % interval == 0) {
            checkpoint::save(
                &Checkpoint::from_trainer(t),
                &dir.join(format!("step{:06}.ckpt", m.step)),
            )?;
        }
        Ok(())
    })?;
    if let Some(w) = metrics.as_mut() {
        w.flush()?;
    }
    if let Some(dir) = &out_dir {
        let path = dir.join("final.ckpt");
        checkpoint::save(&Checkpoint::from_trainer(&trainer), &path)?;
        eprintln!("saved {}", path.display());
    }
    if eval_tokens.len() > cfg.model.context_size {
        let r = evaluate(&trainer.model, &eval_tokens)?;
        println!(
            "eval_loss {:.6} perplexity {:.4} tokens {}",
            r.mean_loss, r.perplexity, r.tokens
        );
    }
    Ok(())
}

fn params(common: Common, csv: bool) -> Result<(), Failure> {
    let base = match &common.config {
        Some(_) => load_config(&common)?.model,
        None => ModelConfig::reference_scale(Variant::Base),
    };
    let variants = match common.variant {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    };
    let mut out = std::io::stdout().lock();
    if csv {
        writeln!(out, "{}", ParamReport::CSV_HEADER)?;
    }
    for v in variants {
        let cfg = base.with_variant(v);
        let report = count_params(&cfg);
        if csv {
            writeln!(out, "{}", report.to_csv_row(&cfg))?;
        } else {
            write!(out, "{}", report.to_text(&cfg))?;
        }
    }
    Ok(())
}

fn bench(common: Common, steps: Option<usize>, reps: usize) -> Result<(), Failure> {
    if reps < 3 {
        return Err(Failure::Usage(format!("--reps must be at least 3, got {reps}")));
    }
    let cfg = load_config(&common)?;
    let t = steps.unwrap_or(cfg.model.context_size);
    let variants = match common.variant {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    };
    let mut out = std::io::stdout().lock();
    writeln!(out, "{BENCH_CSV_HEADER}")?;
    for v in variants {
        let report = bench_recurrent(cfg.model.d, t, reps, v, cfg.seed)?;
        for row in report.csv_rows() {
            writeln!(out, "{row}")?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train {
            common,
            data,
            steps,
            out,
            ckpt,
            log_every,
        } => train(common, data, steps, out, ckpt, log_every),
        Command::Eval { ckpt, data } => {
            let c = checkpoint::load(&ckpt)?;
            let r = evaluate(&c.model, &read_tokens(&data)?)?;
            println!(
                "eval_loss {:.6} perplexity {:.4} tokens {}",
                r.mean_loss, r.perplexity, r.tokens
            );
            Ok(())
        }
        Command::Generate { ckpt, prompt, tokens } => {
            let c = checkpoint::load(&ckpt)?;
            let text = generate(&c.model, prompt.as_bytes(), tokens)?;
            let mut out = std::io::stdout().lock();
            out.write_all(&text)?;
            writeln!(out)?;
            Ok(())
        }
        Command::Params { common, csv } => params(common, csv),
        Command::Bench { common, steps, reps } => bench(common, steps, reps),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

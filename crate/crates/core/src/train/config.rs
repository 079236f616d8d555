//! Plain-text `key = value` configuration files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::LinearKernel;
use crate::error::{Error, Result};
use crate::layers::{default_glu_dim, ModelConfig, Variant};

/// Learning rate at batch size 256; scaled by `√(batch / 256)`.
pub const DEFAULT_BASE_LR: f64 = 0.003_535_533_905_932_737_6;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub total_steps: usize,
    pub base_lr: f64,
    /// `None` means 1% of `total_steps`.
    pub warmup_steps: Option<usize>,
    /// Seed for batch sampling (model initialization uses `model.seed`).
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    /// Fraction of the training file held out for evaluation when no
    /// separate eval file is given.
    pub holdout_fraction: f64,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_interval: usize,
    pub out_dir: Option<PathBuf>,
    /// Decay of the exponential moving average reported as smoothed loss.
    pub ema_decay: f64,
    pub grad_clip: f64,
    pub kernel: LinearKernel,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(Variant::Base),
            batch_size: 32,
            total_steps: 2000,
            base_lr: DEFAULT_BASE_LR,
            warmup_steps: None,
            seed: 0,
            data: None,
            eval_data: None,
            holdout_fraction: 0.1,
            checkpoint_interval: 0,
            out_dir: None,
            ema_decay: 0.98,
            grad_clip: 1.0,
            kernel: LinearKernel::Dequantized,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_kernel(v: &str) -> Result<LinearKernel> {
    match v {
        "addsub" => Ok(LinearKernel::AddSub),
        "dequantized" => Ok(LinearKernel::Dequantized),
        _ => Err(Error::Config(format!(
            "`kernel`: expected addsub or dequantized, got `{v}`"
        ))),
    }
}

fn kernel_name(k: LinearKernel) -> &'static str {
    match k {
        LinearKernel::AddSub => "addsub",
        LinearKernel::Dequantized => "dequantized",
    }
}

impl TrainConfig {
    /// Warmup length actually used.
    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.total_steps / 100)
    }

    pub fn peak_lr(&self) -> f64 {
        self.base_lr * (self.batch_size as f64 / 256.0).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.warmup() > self.total_steps {
            return Err(Error::Config("warmup_steps exceeds total_steps".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    /// Apply one `key = value` setting. Paths are taken verbatim.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "d" => {
                let glu_was_default = m.glu_dim == default_glu_dim(m.d);
                m.d = parse_num(key, value)?;
                if glu_was_default {
                    m.glu_dim = default_glu_dim(m.d);
                }
            }
            "n_layers" => m.n_layers = parse_num(key, value)?,
            "vocab" => m.vocab = parse_num(key, value)?,
            "glu_dim" => m.glu_dim = parse_num(key, value)?,
            "context_size" => m.context_size = parse_num(key, value)?,
            "variant" => m.variant = value.parse()?,
            "sparsity" => m.sparsity = parse_num(key, value)?,
            "model_seed" => m.seed = parse_num(key, value)?,
            "reservoir_seed" => m.reservoir_seed = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "total_steps" | "steps" => self.total_steps = parse_num(key, value)?,
            "base_lr" => self.base_lr = parse_num(key, value)?,
            "warmup_steps" => {
                self.warmup_steps = match value {
                    "auto" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            "seed" => self.seed = parse_num(key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "eval_data" => self.eval_data = Some(PathBuf::from(value)),
            "holdout_fraction" => self.holdout_fraction = parse_num(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse_num(key, value)?,
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "ema_decay" => self.ema_decay = parse_num(key, value)?,
            "grad_clip" => self.grad_clip = parse_num(key, value)?,
            "kernel" => self.kernel = parse_kernel(value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parse config text over the defaults. Relative paths are resolved
    /// against `base_dir` when given.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        if let Some(base) = base_dir {
            for p in [&mut cfg.data, &mut cfg.eval_data, &mut cfg.out_dir]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent())
    }

    /// Serialize every setting; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("d", m.d.to_string());
        kv("n_layers", m.n_layers.to_string());
        kv("vocab", m.vocab.to_string());
        kv("glu_dim", m.glu_dim.to_string());
        kv("context_size", m.context_size.to_string());
        kv("variant", m.variant.to_string());
        kv("sparsity", m.sparsity.to_string());
        kv("model_seed", m.seed.to_string());
        kv("reservoir_seed", m.reservoir_seed.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("total_steps", self.total_steps.to_string());
        kv("base_lr", self.base_lr.to_string());
        kv(
            "warmup_steps",
            self.warmup_steps.map_or_else(|| "auto".to_string(), |w| w.to_string()),
        );
        kv("seed", self.seed.to_string());
        if let Some(p) = &self.data {
            kv("data", p.display().to_string());
        }
        if let Some(p) = &self.eval_data {
            kv("eval_data", p.display().to_string());
        }
        kv("holdout_fraction", self.holdout_fraction.to_string());
        kv("checkpoint_interval", self.checkpoint_interval.to_string());
        if let Some(p) = &self.out_dir {
            kv("out_dir", p.display().to_string());
        }
        kv("ema_decay", self.ema_decay.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("kernel", kernel_name(self.kernel).to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_lr_matches_reference() {
        assert!((DEFAULT_BASE_LR - 0.01 / 8f64.sqrt()).abs() < 1e-18);
        let cfg = TrainConfig {
            batch_size: 256,
            ..Default::default()
        };
        assert_eq!(cfg.peak_lr(), DEFAULT_BASE_LR);
    }

    #[test]
    fn parse_with_comments() {
        let cfg = TrainConfig::parse(
            "# tiny\nd = 8   # width\nvariant = grc\nsteps=10\nwarmup_steps = 2\n\nkernel = addsub\n",
            None,
        )
        .unwrap();
        assert_eq!(cfg.model.d, 8);
        assert_eq!(cfg.model.glu_dim, default_glu_dim(8));
        assert_eq!(cfg.model.variant, Variant::Grc);
        assert_eq!(cfg.total_steps, 10);
        assert_eq!(cfg.warmup(), 2);
        assert_eq!(cfg.kernel, LinearKernel::AddSub);
    }

    #[test]
    fn round_trip_text() {
        let mut cfg = TrainConfig::default();
        cfg.set("base_lr", "0.0123456789012345").unwrap();
        cfg.set("data", "corpus.txt").unwrap();
        cfg.set("sparsity", "0.7").unwrap();
        assert_eq!(TrainConfig::parse(&cfg.to_text(), None).unwrap(), cfg);
    }

    #[test]
    fn errors() {
        assert!(TrainConfig::parse("d = x", None).is_err());
        assert!(TrainConfig::parse("bogus = 1", None).is_err());
        assert!(TrainConfig::parse("no equals sign", None).is_err());
        assert!(TrainConfig::parse("batch_size = 0", None).is_err());
        assert!(TrainConfig::parse("variant = lstm", None).is_err());
    }

    #[test]
    fn relative_paths_resolve() {
        let cfg = TrainConfig::parse("data = a.txt\nout_dir = /abs", Some(Path::new("/cfg"))).unwrap();
        assert_eq!(cfg.data.unwrap(), PathBuf::from("/cfg/a.txt"));
        assert_eq!(cfg.out_dir.unwrap(), PathBuf::from("/abs"));
    }
}

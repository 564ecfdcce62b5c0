//! Run configuration: defaults, `key = value` config files, and validation.
//! Every key is overridable by the same-named command-line flag; flags win.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::coverage::CoverageMode;
use crate::error::{Error, Result};
use crate::training::{Lambdas, Objective};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: CoverageMode,
    pub objective: Objective,
    pub lambda_gru: f64,
    pub lambda_sub: f64,
    pub d_c: usize,
    pub d_h: usize,
    pub d_emb: usize,
    pub beam: usize,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub max_len: usize,
    pub vocab_size: usize,
    pub len_norm: bool,
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub dev_src: Option<PathBuf>,
    pub dev_tgt: Option<PathBuf>,
    pub align: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: CoverageMode::Gru,
            objective: Objective::Mix,
            lambda_gru: 1e-4,
            lambda_sub: 1e-2,
            d_c: 100,
            d_h: 64,
            d_emb: 64,
            beam: 4,
            batch: 80,
            epochs: 10,
            seed: 1,
            max_len: 50,
            vocab_size: 1000,
            len_norm: false,
            train_src: None,
            train_tgt: None,
            dev_src: None,
            dev_tgt: None,
            align: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn lambdas(&self) -> Lambdas {
        Lambdas {
            gru: self.lambda_gru,
            sub: self.lambda_sub,
        }
    }

    /// Apply one `key = value` setting (config-file key or flag name).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| {
            Error::config(format!("config field {key}: invalid {what} {value:?}"))
        };
        match key {
            "mode" => self.mode = value.parse()?,
            "objective" => self.objective = value.parse()?,
            "lambda-gru" => self.lambda_gru = value.parse().map_err(|_| bad("number"))?,
            "lambda-sub" => self.lambda_sub = value.parse().map_err(|_| bad("number"))?,
            "d-c" => self.d_c = value.parse().map_err(|_| bad("width"))?,
            "d-h" => self.d_h = value.parse().map_err(|_| bad("width"))?,
            "d-emb" => self.d_emb = value.parse().map_err(|_| bad("width"))?,
            "beam" => self.beam = value.parse().map_err(|_| bad("width"))?,
            "batch" => self.batch = value.parse().map_err(|_| bad("size"))?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad("count"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "max-len" => self.max_len = value.parse().map_err(|_| bad("length"))?,
            "vocab-size" => self.vocab_size = value.parse().map_err(|_| bad("size"))?,
            "len-norm" => self.len_norm = value.parse().map_err(|_| bad("boolean"))?,
            "train-src" => self.train_src = Some(PathBuf::from(value)),
            "train-tgt" => self.train_tgt = Some(PathBuf::from(value)),
            "dev-src" => self.dev_src = Some(PathBuf::from(value)),
            "dev-tgt" => self.dev_tgt = Some(PathBuf::from(value)),
            "align" => self.align = Some(PathBuf::from(value)),
            "out-dir" => self.out_dir = Some(PathBuf::from(value)),
            other => {
                return Err(Error::config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Parse a `key = value` file with `#` comments into `self`.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "{}:{}: expected `key = value`, got {raw:?}",
                    path.display(),
                    no + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Checks that only make sense once the whole config is assembled.
    pub fn validate_for_training(&self) -> Result<()> {
        if self.objective == Objective::Aligned && self.align.is_none() {
            return Err(Error::config(
                "objective aligned requires an alignment file (field align)",
            ));
        }
        if self.lambda_gru < 0.0 || self.lambda_sub < 0.0 {
            return Err(Error::config("field lambda-gru/lambda-sub: must be nonnegative"));
        }
        for (field, value) in [
            ("d-c", self.d_c),
            ("d-h", self.d_h),
            ("d-emb", self.d_emb),
            ("batch", self.batch),
            ("epochs", self.epochs),
            ("max-len", self.max_len),
        ] {
            if value == 0 {
                return Err(Error::config(format!("field {field}: must be positive")));
            }
        }
        let need = [
            ("train-src", &self.train_src),
            ("train-tgt", &self.train_tgt),
            ("out-dir", &self.out_dir),
        ];
        for (field, value) in need {
            if value.is_none() {
                return Err(Error::config(format!("field {field}: required for training")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode = {}", self.mode)?;
        writeln!(f, "objective = {}", self.objective)?;
        writeln!(f, "lambda-gru = {}", self.lambda_gru)?;
        writeln!(f, "lambda-sub = {}", self.lambda_sub)?;
        writeln!(f, "d-c = {}", self.d_c)?;
        writeln!(f, "d-h = {}", self.d_h)?;
        writeln!(f, "d-emb = {}", self.d_emb)?;
        writeln!(f, "beam = {}", self.beam)?;
        writeln!(f, "batch = {}", self.batch)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "max-len = {}", self.max_len)?;
        writeln!(f, "vocab-size = {}", self.vocab_size)?;
        writeln!(f, "len-norm = {}", self.len_norm)
    }
}

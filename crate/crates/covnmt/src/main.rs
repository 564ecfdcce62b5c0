//! covnmt: attention NMT with coverage embeddings.
//!
//! Subcommands: `train`, `translate`, `eval`, `gen`. Every config-file key
//! has a same-named flag; flags win. Exit codes: 0 success, 1 usage or
//! config error, 2 data error, 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use covnmt::commands::{cmd_eval, cmd_gen, cmd_train, cmd_translate, EvalKind, TranslateArgs};
use covnmt::config::RunConfig;
use covnmt::corpus::Task;
use covnmt::error::Result;

#[derive(Parser)]
#[command(name = "covnmt", version, about = "attention NMT with coverage embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags mirroring the config-file keys; unset flags leave the config-file
/// (or default) value in place.
#[derive(Args, Debug, Default)]
struct ConfigFlags {
    /// Plain `key = value` config file, `#` comments.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Coverage mode: base | gru | sub | both.
    #[arg(long)]
    mode: Option<String>,
    /// Objective: mix | aligned.
    #[arg(long)]
    objective: Option<String>,
    #[arg(long = "lambda-gru")]
    lambda_gru: Option<f64>,
    #[arg(long = "lambda-sub")]
    lambda_sub: Option<f64>,
    /// Coverage embedding width.
    #[arg(long = "d-c")]
    d_c: Option<usize>,
    /// Per-direction encoder width.
    #[arg(long = "d-h")]
    d_h: Option<usize>,
    /// Word embedding width.
    #[arg(long = "d-emb")]
    d_emb: Option<usize>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "max-len")]
    max_len: Option<usize>,
    #[arg(long = "vocab-size")]
    vocab_size: Option<usize>,
    /// Divide beam scores by output length when picking the winner.
    #[arg(long = "len-norm")]
    len_norm: bool,
    #[arg(long = "train-src")]
    train_src: Option<PathBuf>,
    #[arg(long = "train-tgt")]
    train_tgt: Option<PathBuf>,
    #[arg(long = "dev-src")]
    dev_src: Option<PathBuf>,
    #[arg(long = "dev-tgt")]
    dev_tgt: Option<PathBuf>,
    /// Pharaoh alignment file for the aligned objective.
    #[arg(long)]
    align: Option<PathBuf>,
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
}

impl ConfigFlags {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        if let Some(v) = &self.mode {
            cfg.set("mode", v)?;
        }
        if let Some(v) = &self.objective {
            cfg.set("objective", v)?;
        }
        if let Some(v) = self.lambda_gru {
            cfg.lambda_gru = v;
        }
        if let Some(v) = self.lambda_sub {
            cfg.lambda_sub = v;
        }
        if let Some(v) = self.d_c {
            cfg.d_c = v;
        }
        if let Some(v) = self.d_h {
            cfg.d_h = v;
        }
        if let Some(v) = self.d_emb {
            cfg.d_emb = v;
        }
        if let Some(v) = self.beam {
            cfg.beam = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.max_len {
            cfg.max_len = v;
        }
        if let Some(v) = self.vocab_size {
            cfg.vocab_size = v;
        }
        if self.len_norm {
            cfg.len_norm = true;
        }
        if let Some(v) = &self.train_src {
            cfg.train_src = Some(v.clone());
        }
        if let Some(v) = &self.train_tgt {
            cfg.train_tgt = Some(v.clone());
        }
        if let Some(v) = &self.dev_src {
            cfg.dev_src = Some(v.clone());
        }
        if let Some(v) = &self.dev_tgt {
            cfg.dev_tgt = Some(v.clone());
        }
        if let Some(v) = &self.align {
            cfg.align = Some(v.clone());
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = Some(v.clone());
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes vocabularies, per-epoch checkpoints and the
    /// metric log into --out-dir.
    Train {
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Translate a file line by line with beam search.
    Translate {
        #[command(flatten)]
        flags: ConfigFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "src-vocab")]
        src_vocab: PathBuf,
        #[arg(long = "tgt-vocab")]
        tgt_vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Attention matrix dump file.
        #[arg(long = "attn-dump")]
        attn_dump: Option<PathBuf>,
        /// Per-step coverage L1 dump file.
        #[arg(long = "cov-dump")]
        cov_dump: Option<PathBuf>,
        /// Replace UNK outputs with the attention-argmax source token.
        #[arg(long = "replace-unk")]
        replace_unk: bool,
    },
    /// Evaluation reports: alignment F1, repetition counts, BLEU, accuracy.
    Eval {
        #[command(subcommand)]
        kind: EvalCommand,
    },
    /// Generate a synthetic parallel corpus with gold alignments.
    Gen {
        /// copy | reverse | fertility
        #[arg(long)]
        task: String,
        #[arg(long)]
        size: usize,
        /// Number of distinct tokens.
        #[arg(long)]
        vocab: usize,
        #[arg(long = "min-len", default_value_t = 2)]
        min_len: usize,
        #[arg(long = "max-len", default_value_t = 10)]
        max_len: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output prefix; writes <out>.src, <out>.tgt, <out>.align.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Precision/recall/F1 of predicted Pharaoh links against gold.
    AlignF1 {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
    /// Total repeated n-gram count over a file of sentences.
    Repetition {
        #[arg(long)]
        file: PathBuf,
        #[arg(long = "min-len", default_value_t = 4)]
        min_len: usize,
    },
    /// Corpus BLEU-4 of candidates against references.
    Bleu {
        #[arg(long)]
        cand: PathBuf,
        #[arg(long)]
        refs: PathBuf,
    },
    /// Position-wise token accuracy of hypotheses against references.
    Accuracy {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        refs: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { flags } => {
            let cfg = flags.build()?;
            cmd_train(&cfg)
        }
        Command::Translate {
            flags,
            checkpoint,
            src_vocab,
            tgt_vocab,
            input,
            output,
            attn_dump,
            cov_dump,
            replace_unk,
        } => {
            let cfg = flags.build()?;
            cmd_translate(
                &cfg,
                &TranslateArgs {
                    checkpoint,
                    src_vocab,
                    tgt_vocab,
                    input,
                    output,
                    attn_dump,
                    cov_dump,
                    replace_unk,
                },
            )
        }
        Command::Eval { kind } => {
            let kind = match kind {
                EvalCommand::AlignF1 { pred, gold } => EvalKind::AlignF1 { pred, gold },
                EvalCommand::Repetition { file, min_len } => {
                    EvalKind::Repetition { file, min_len }
                }
                EvalCommand::Bleu { cand, refs } => EvalKind::Bleu { cand, refs },
                EvalCommand::Accuracy { hyp, refs } => EvalKind::Accuracy { hyp, refs },
            };
            cmd_eval(&kind, &mut std::io::stdout())
        }
        Command::Gen {
            task,
            size,
            vocab,
            min_len,
            max_len,
            seed,
            out,
        } => {
            let task: Task = task.parse()?;
            cmd_gen(task, size, vocab, min_len, max_len, seed, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are success; anything else is a usage error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

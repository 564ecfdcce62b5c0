//! Implementations behind the CLI subcommands: train, translate, eval, gen.
//! The binary stays a thin argument parser over these.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::corpus::{gen_synthetic, read_parallel, read_token_lines, render_synthetic, Task};
use crate::coverage::format_l1_dump;
use crate::decoding::{format_attention_dump, replace_unk, translate_sentence};
use crate::error::{Error, Result};
use crate::evaluation::{
    bleu4, parse_pharaoh_line, repetition_count, token_accuracy, LinkSet,
};
use crate::model::{ModelDims, ModelParams};
use crate::training::{train, TrainConfig};
use crate::vocab::Vocabulary;

/// Training precision. Gradient checks run wide (f64) in the test suites;
/// the CLI trains and decodes in the standard mode.
type Std = f32;

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Wire corpus ingestion, vocabulary building, training and checkpointing.
/// Writes `src.vocab`, `tgt.vocab`, `model.epNNN.cvnmt` per epoch,
/// `model.cvnmt`, and `metrics.tsv` into the output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    cfg.validate_for_training()?;
    let train_src = cfg.train_src.as_ref().unwrap();
    let train_tgt = cfg.train_tgt.as_ref().unwrap();
    let out_dir = cfg.out_dir.as_ref().unwrap();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let src_lines = read_token_lines(train_src)?;
    let tgt_lines = read_token_lines(train_tgt)?;
    let src_vocab = Vocabulary::build(
        src_lines.iter().flatten().map(|s| s.as_str()),
        cfg.vocab_size,
    )?;
    let tgt_vocab = Vocabulary::build(
        tgt_lines.iter().flatten().map(|s| s.as_str()),
        cfg.vocab_size,
    )?;
    src_vocab.save(&out_dir.join("src.vocab"))?;
    tgt_vocab.save(&out_dir.join("tgt.vocab"))?;

    let (train_set, dropped) = read_parallel(
        train_src,
        train_tgt,
        cfg.align.as_deref(),
        &src_vocab,
        &tgt_vocab,
        cfg.max_len,
    )?;
    if dropped > 0 {
        eprintln!("dropped {dropped} pair(s) longer than {}", cfg.max_len);
    }
    if train_set.is_empty() {
        return Err(Error::data("no training pairs within max-len".to_string()));
    }
    let dev_set = match (&cfg.dev_src, &cfg.dev_tgt) {
        (Some(ds), Some(dt)) => {
            read_parallel(ds, dt, None, &src_vocab, &tgt_vocab, cfg.max_len)?.0
        }
        _ => Vec::new(),
    };

    let dims = ModelDims {
        src_vocab: src_vocab.len(),
        tgt_vocab: tgt_vocab.len(),
        d_emb: cfg.d_emb,
        d_h: cfg.d_h,
        d_c: cfg.d_c,
        mode: cfg.mode,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params: ModelParams<Std> = ModelParams::init(dims, &mut rng);

    let tc = TrainConfig {
        mode: cfg.mode,
        objective: cfg.objective,
        lambdas: cfg.lambdas(),
        batch_size: cfg.batch,
        epochs: cfg.epochs,
        seed: cfg.seed,
        rho: 0.95,
        eps: 1e-6,
    };
    let out = out_dir.clone();
    let metrics = train(&mut params, &train_set, &dev_set, &tc, |epoch, p, _m| {
        checkpoint::save(&out.join(format!("model.ep{epoch:03}.cvnmt")), p)
    })?;
    checkpoint::save(&out_dir.join("model.cvnmt"), &params)?;

    let mut log = String::new();
    for m in &metrics {
        log.push_str(&m.tsv_line());
        log.push('\n');
    }
    write_file(&out_dir.join("metrics.tsv"), &log)?;
    for m in &metrics {
        println!("{}", m.tsv_line());
    }
    Ok(())
}

pub struct TranslateArgs {
    pub checkpoint: PathBuf,
    pub src_vocab: PathBuf,
    pub tgt_vocab: PathBuf,
    pub input: PathBuf,
    pub output: PathBuf,
    pub attn_dump: Option<PathBuf>,
    pub cov_dump: Option<PathBuf>,
    pub replace_unk: bool,
}

/// Beam-decode every input line; write one translation per line plus the
/// requested dump files.
pub fn cmd_translate(cfg: &RunConfig, args: &TranslateArgs) -> Result<()> {
    let src_vocab = Vocabulary::load(&args.src_vocab)?;
    let tgt_vocab = Vocabulary::load(&args.tgt_vocab)?;
    let dims = ModelDims {
        src_vocab: src_vocab.len(),
        tgt_vocab: tgt_vocab.len(),
        d_emb: cfg.d_emb,
        d_h: cfg.d_h,
        d_c: cfg.d_c,
        mode: cfg.mode,
    };
    let params: ModelParams<Std> = checkpoint::load(&args.checkpoint, &dims)?;

    let input = fs::read_to_string(&args.input)
        .map_err(|e| Error::io(args.input.display().to_string(), e))?;
    let mut out_lines = String::new();
    let mut attn_out = String::new();
    let mut cov_out = String::new();
    for (no, line) in input.lines().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            out_lines.push('\n');
            attn_out.push_str(&format_attention_dump(no, 0, &[]));
            continue;
        }
        let ids = src_vocab.ids(&tokens);
        let result = translate_sentence(
            &params,
            &tgt_vocab,
            &ids,
            cfg.beam,
            cfg.max_len,
            cfg.len_norm,
        )?;
        let rendered = if args.replace_unk {
            replace_unk(&result, &tokens)
        } else {
            result.tokens.clone()
        };
        out_lines.push_str(&rendered.join(" "));
        out_lines.push('\n');
        attn_out.push_str(&format_attention_dump(no, ids.len(), &result.attention));
        if args.cov_dump.is_some() {
            cov_out.push_str(&format!("sent {no}\n"));
            cov_out.push_str(&format_l1_dump(&result.cov_l1_steps));
        }
    }
    write_file(&args.output, &out_lines)?;
    if let Some(p) = &args.attn_dump {
        write_file(p, &attn_out)?;
    }
    if let Some(p) = &args.cov_dump {
        write_file(p, &cov_out)?;
    }
    Ok(())
}

pub enum EvalKind {
    AlignF1 { pred: PathBuf, gold: PathBuf },
    Repetition { file: PathBuf, min_len: usize },
    Bleu { cand: PathBuf, refs: PathBuf },
    Accuracy { hyp: PathBuf, refs: PathBuf },
}

/// Dispatch an evaluation and write `metric<TAB>value` lines to `out`.
pub fn cmd_eval(kind: &EvalKind, out: &mut dyn Write) -> Result<()> {
    let emit = |out: &mut dyn Write, metric: &str, value: f64| -> Result<()> {
        writeln!(out, "{metric}\t{value:.6}")
            .map_err(|e| Error::io("eval output".to_string(), e))
    };
    match kind {
        EvalKind::AlignF1 { pred, gold } => {
            let read_links = |path: &Path| -> Result<Vec<LinkSet>> {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                text.lines()
                    .enumerate()
                    .map(|(no, l)| {
                        parse_pharaoh_line(l, no + 1).map(|v| v.into_iter().collect())
                    })
                    .collect()
            };
            let p = read_links(pred)?;
            let g = read_links(gold)?;
            if p.len() != g.len() {
                return Err(Error::data(format!(
                    "alignment files disagree: {} vs {} lines (line {})",
                    p.len(),
                    g.len(),
                    p.len().min(g.len()) + 1
                )));
            }
            // Corpus-level counts, then P/R/F1 with the empty-set conventions.
            let mut inter = 0usize;
            let mut pred_n = 0usize;
            let mut gold_n = 0usize;
            for (ps, gs) in p.iter().zip(&g) {
                inter += ps.intersection(gs).count();
                pred_n += ps.len();
                gold_n += gs.len();
            }
            let prec = if pred_n == 0 {
                if gold_n == 0 { 1.0 } else { 0.0 }
            } else {
                inter as f64 / pred_n as f64
            };
            let rec = if gold_n == 0 {
                if pred_n == 0 { 1.0 } else { 0.0 }
            } else {
                inter as f64 / gold_n as f64
            };
            let f1 = if prec + rec == 0.0 {
                0.0
            } else {
                2.0 * prec * rec / (prec + rec)
            };
            emit(out, "precision", prec)?;
            emit(out, "recall", rec)?;
            emit(out, "f1", f1)?;
        }
        EvalKind::Repetition { file, min_len } => {
            let lines = read_token_lines(file)?;
            let total: usize = lines
                .iter()
                .map(|l| repetition_count(l, *min_len))
                .sum();
            writeln!(out, "repetition\t{total}")
                .map_err(|e| Error::io("eval output".to_string(), e))?;
        }
        EvalKind::Bleu { cand, refs } => {
            let c = read_token_lines(cand)?;
            let r = read_token_lines(refs)?;
            if c.len() != r.len() {
                return Err(Error::data(format!(
                    "bleu files disagree: {} vs {} lines (line {})",
                    c.len(),
                    r.len(),
                    c.len().min(r.len()) + 1
                )));
            }
            emit(out, "bleu", bleu4(&c, &r)?)?;
        }
        EvalKind::Accuracy { hyp, refs } => {
            let h = read_token_lines(hyp)?;
            let r = read_token_lines(refs)?;
            emit(out, "accuracy", token_accuracy(&h, &r)?)?;
        }
    }
    Ok(())
}

/// Generate a synthetic parallel corpus with gold alignments; writes
/// `<out>.src`, `<out>.tgt`, `<out>.align`.
pub fn cmd_gen(
    task: Task,
    size: usize,
    vocab: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
    out_prefix: &Path,
) -> Result<()> {
    let pairs = gen_synthetic(task, size, vocab, min_len, max_len, seed)?;
    let (src, tgt, align) = render_synthetic(&pairs);
    let stem = out_prefix.display();
    write_file(&PathBuf::from(format!("{stem}.src")), &src)?;
    write_file(&PathBuf::from(format!("{stem}.tgt")), &tgt)?;
    write_file(&PathBuf::from(format!("{stem}.align")), &align)?;
    Ok(())
}

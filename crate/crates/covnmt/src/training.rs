//! Objectives, AdaDelta, and the batched teacher-forced training loop.
//!
//! The likelihood term is the usual per-step negative log-probability of the
//! reference word (EOS appended, BOS input-only). The coverage penalty comes
//! in two flavors: the final-state form penalizes the L1 of every coverage
//! row after the last step, the alignment-supervised form penalizes each
//! source word's rows from the step it is last aligned to onward. Gradients
//! of the penalty flow all the way back through the attention weights.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend, context, decode_step, initial_state, predict, project_encoder};
use crate::coverage::{init_set, step_all, CoverageMode, CoverageSet};
use crate::encoder::encode;
use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelVars};
use crate::tape::{Tape, Var};
use crate::tensor::Real;
use crate::vocab::{BOS, EOS};

/// One parallel sentence pair, optionally with gold alignment links as
/// (source index, target index) pairs, both 0-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    pub links: Option<Vec<(usize, usize)>>,
}

impl TrainingExample {
    pub fn new(source: Vec<u32>, target: Vec<u32>) -> Self {
        TrainingExample {
            source,
            target,
            links: None,
        }
    }

    pub fn with_links(mut self, links: Vec<(usize, usize)>) -> Self {
        self.links = Some(links);
        self
    }
}

/// Which coverage objective trains the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Likelihood minus lambda times the final coverage L1.
    Mix,
    /// Alignment-supervised: rows are penalized from each word's last
    /// aligned step onward.
    Aligned,
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mix" => Ok(Objective::Mix),
            "aligned" => Ok(Objective::Aligned),
            other => Err(Error::config(format!(
                "unknown objective {other:?} (expected mix|aligned)"
            ))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::Mix => "mix",
            Objective::Aligned => "aligned",
        })
    }
}

/// Penalty coefficients, one per update rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lambdas {
    pub gru: f64,
    pub sub: f64,
}

impl Lambdas {
    pub const ZERO: Lambdas = Lambdas { gru: 0.0, sub: 0.0 };

    fn validate(&self) -> Result<()> {
        if self.gru < 0.0 || self.sub < 0.0 {
            return Err(Error::config(format!(
                "coverage lambdas must be nonnegative, got gru={} sub={}",
                self.gru, self.sub
            )));
        }
        Ok(())
    }
}

/// Everything one teacher-forced pass produces.
pub struct SentenceForward {
    /// Negative log-likelihood alone.
    pub nll: Var,
    /// nll plus the configured coverage penalty.
    pub loss: Var,
    /// Attention row per step.
    pub alphas: Vec<Var>,
    /// Coverage after each step (empty in base mode).
    pub cov_history: Vec<CoverageSet>,
    /// Steps whose argmax prediction matched the reference.
    pub correct: usize,
    /// Number of prediction steps (reference length plus the EOS step).
    pub steps: usize,
}

/// Teacher-forced forward pass for one sentence under the configured mode and
/// objective. Coverage updates see the reference word.
pub fn forward_sentence<F: Real>(
    tape: &mut Tape<F>,
    vars: &ModelVars,
    mode: CoverageMode,
    example: &TrainingExample,
    lambdas: Lambdas,
    objective: Objective,
) -> Result<SentenceForward> {
    lambdas.validate()?;
    if example.target.is_empty() {
        return Err(Error::EmptyInput("forward_sentence: target sentence"));
    }
    let enc = encode(tape, vars.src_embed, &vars.enc_fwd, &vars.enc_bwd, &example.source)?;
    let proj = project_encoder(tape, &vars.attn, &enc)?;
    let mut s = initial_state(tape, vars.w_init, &enc)?;
    let mut cov = init_set(
        tape,
        mode,
        vars.cov_gru.as_ref(),
        vars.cov_sub.as_ref(),
        &example.source,
    )?;

    let mut targets = example.target.clone();
    targets.push(EOS);

    let mut nll = tape.scalar(F::zero());
    let mut alphas = Vec::with_capacity(targets.len());
    let mut cov_history = Vec::with_capacity(targets.len());
    let mut prev_id = BOS;
    let mut correct = 0;
    for &y_t in &targets {
        let y_prev_emb = tape.row(vars.tgt_embed, prev_id as usize)?;
        let rec = attend(tape, &vars.attn, s, &enc, &proj, y_prev_emb, &cov)?;
        let ctx = context(tape, rec.probs, &enc)?;
        s = decode_step(tape, &vars.dec, s, y_prev_emb, ctx)?;
        let dist = predict(tape, &vars.out, s, y_prev_emb)?;

        let p = tape.pick(dist, y_t as usize)?;
        if tape.item(p) < F::min_positive_value() {
            eprintln!(
                "warning: reference token {y_t} got zero probability; loss clamped"
            );
        }
        let lp = tape.ln(p);
        let neg_lp = tape.scale(lp, -F::one());
        nll = tape.add(nll, neg_lp)?;

        let dist_vals = tape.value(dist);
        let argmax = dist_vals
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if argmax == y_t as usize {
            correct += 1;
        }

        // Teacher forcing: the coverage update sees the reference word.
        if mode != CoverageMode::Base {
            let y_emb = tape.row(vars.tgt_embed, y_t as usize)?;
            cov = step_all(
                tape,
                mode,
                vars.cov_gru.as_ref(),
                vars.cov_sub.as_ref(),
                &cov,
                Some(y_emb),
                Some(rec.probs),
                &enc.mask,
            )?;
            cov_history.push(cov.clone());
        }
        alphas.push(rec.probs);
        prev_id = y_t;
    }

    let penalty = match objective {
        Objective::Mix => coverage_penalty_final(tape, &cov, lambdas, &enc.mask)?,
        Objective::Aligned => coverage_penalty_aligned(
            tape,
            &cov_history,
            example,
            lambdas,
            &enc.mask,
        )?,
    };
    let loss = tape.add(nll, penalty)?;

    Ok(SentenceForward {
        nll,
        loss,
        alphas,
        cov_history,
        correct,
        steps: targets.len(),
    })
}

fn row_l1<F: Real>(tape: &mut Tape<F>, row: Var) -> Var {
    let a = tape.abs(row);
    tape.sum(a)
}

/// Final-state penalty: sum over rules of lambda_rule times the L1 of every
/// unmasked coverage row after the last step.
pub fn coverage_penalty_final<F: Real>(
    tape: &mut Tape<F>,
    cov: &CoverageSet,
    lambdas: Lambdas,
    mask: &[bool],
) -> Result<Var> {
    lambdas.validate()?;
    let mut total = tape.scalar(F::zero());
    for state in cov.states() {
        let lambda = match state.kind {
            crate::coverage::RuleKind::Gru => lambdas.gru,
            crate::coverage::RuleKind::Sub => lambdas.sub,
        };
        if lambda == 0.0 {
            continue;
        }
        let mut acc = tape.scalar(F::zero());
        for (j, &row) in state.rows.iter().enumerate() {
            if mask[j] {
                let l1 = row_l1(tape, row);
                acc = tape.add(acc, l1)?;
            }
        }
        let scaled = tape.scale(acc, F::from_f64(lambda));
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}

/// Last target step each source word aligns to, 1-based; unaligned words get
/// `steps` so that only their final row is penalized.
pub fn last_aligned_step(
    links: &[(usize, usize)],
    source_len: usize,
    target_len: usize,
    steps: usize,
) -> Result<Vec<usize>> {
    let mut last = vec![steps; source_len];
    let mut seen = vec![false; source_len];
    for &(i, j) in links {
        if i >= source_len {
            return Err(Error::data(format!(
                "alignment link source index {i} out of range (sentence length {source_len})"
            )));
        }
        if j >= target_len {
            return Err(Error::data(format!(
                "alignment link target index {j} out of range (target length {target_len})"
            )));
        }
        let step = j + 1;
        if !seen[i] || step > last[i] {
            last[i] = if seen[i] { last[i].max(step) } else { step };
            seen[i] = true;
        }
    }
    Ok(last)
}

/// Alignment-supervised penalty: for each source word i, the L1 of its
/// coverage rows from step a_i through the final step, per rule.
pub fn coverage_penalty_aligned<F: Real>(
    tape: &mut Tape<F>,
    cov_history: &[CoverageSet],
    example: &TrainingExample,
    lambdas: Lambdas,
    mask: &[bool],
) -> Result<Var> {
    lambdas.validate()?;
    let links = example
        .links
        .as_ref()
        .ok_or_else(|| Error::data("aligned objective needs gold alignment links"))?;
    let steps = cov_history.len();
    if steps == 0 {
        // Base mode carries no coverage; the penalty is vacuously zero.
        return Ok(tape.scalar(F::zero()));
    }
    let l = example.source.len();
    let a = last_aligned_step(links, l, example.target.len(), steps)?;

    let mut total = tape.scalar(F::zero());
    for which in 0..2 {
        let lambda = if which == 0 { lambdas.gru } else { lambdas.sub };
        if lambda == 0.0 {
            continue;
        }
        let mut acc = tape.scalar(F::zero());
        let mut any = false;
        for (step_idx, set) in cov_history.iter().enumerate() {
            let state = if which == 0 { &set.gru } else { &set.sub };
            let Some(state) = state else { continue };
            any = true;
            let step = step_idx + 1;
            for i in 0..l {
                if mask[i] && step >= a[i] {
                    let l1 = row_l1(tape, state.rows[i]);
                    acc = tape.add(acc, l1)?;
                }
            }
        }
        if any {
            let scaled = tape.scale(acc, F::from_f64(lambda));
            total = tape.add(total, scaled)?;
        }
    }
    Ok(total)
}

/// AdaDelta with decaying accumulators of squared gradients and updates.
#[derive(Debug, Clone)]
pub struct AdaDelta<F> {
    pub rho: F,
    pub eps: F,
    acc_g2: BTreeMap<String, Vec<F>>,
    acc_dx2: BTreeMap<String, Vec<F>>,
}

impl<F: Real> AdaDelta<F> {
    pub fn new(rho: f64, eps: f64) -> Self {
        AdaDelta {
            rho: F::from_f64(rho),
            eps: F::from_f64(eps),
            acc_g2: BTreeMap::new(),
            acc_dx2: BTreeMap::new(),
        }
    }

    /// One update over every parameter. A non-finite gradient anywhere skips
    /// the whole batch with a warning and leaves all state untouched;
    /// returns whether the update was applied.
    pub fn step(
        &mut self,
        params: &mut ModelParams<F>,
        grads: &BTreeMap<String, Vec<F>>,
    ) -> Result<bool> {
        for (name, g) in grads {
            if g.iter().any(|x| !x.is_finite()) {
                eprintln!("warning: non-finite gradient in {name}; skipping batch update");
                return Ok(false);
            }
        }
        let (rho, eps) = (self.rho, self.eps);
        let one_minus_rho = F::one() - rho;
        let mut missing: Option<String> = None;
        params.for_each_mut(|name, tensor| {
            let Some(g) = grads.get(name) else {
                missing = Some(name.to_string());
                return;
            };
            let eg2 = self
                .acc_g2
                .entry(name.to_string())
                .or_insert_with(|| vec![F::zero(); tensor.len()]);
            let edx2 = self
                .acc_dx2
                .entry(name.to_string())
                .or_insert_with(|| vec![F::zero(); tensor.len()]);
            for k in 0..tensor.len() {
                let gk = g[k];
                eg2[k] = rho * eg2[k] + one_minus_rho * gk * gk;
                let dx = -((edx2[k] + eps).sqrt() / (eg2[k] + eps).sqrt()) * gk;
                edx2[k] = rho * edx2[k] + one_minus_rho * dx * dx;
                tensor.data[k] += dx;
            }
        });
        if let Some(name) = missing {
            return Err(Error::config(format!(
                "optimizer got no gradient for parameter {name}"
            )));
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: CoverageMode,
    pub objective: Objective,
    pub lambdas: Lambdas,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub rho: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_acc: f64,
    /// Mean final coverage L1 per unmasked source position on dev.
    pub cov_l1: f64,
}

impl EpochMetrics {
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.train_loss, self.dev_loss, self.dev_acc, self.cov_l1
        )
    }
}

/// Length-bucketed, seed-shuffled batches: examples are grouped by source
/// length, groups shuffled internally, then batch order shuffled.
fn plan_batches(
    examples: &[TrainingExample],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, ex) in examples.iter().enumerate() {
        buckets.entry(ex.source.len()).or_default().push(idx);
    }
    let mut ordered = Vec::with_capacity(examples.len());
    for bucket in buckets.values_mut() {
        bucket.shuffle(rng);
        ordered.extend_from_slice(bucket);
    }
    let mut batches: Vec<Vec<usize>> = ordered
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect();
    batches.shuffle(rng);
    batches
}

/// Forward-only evaluation: mean loss, teacher-forced token accuracy, and
/// mean final coverage L1 per unmasked position.
pub fn evaluate<F: Real>(
    params: &ModelParams<F>,
    dev: &[TrainingExample],
    cfg: &TrainConfig,
) -> Result<(f64, f64, f64)> {
    let mut loss_total = 0.0;
    let mut correct = 0usize;
    let mut steps = 0usize;
    let mut l1_total = 0.0;
    let mut positions = 0usize;
    for chunk in dev.chunks(32) {
        let mut tape: Tape<F> = Tape::new();
        let vars = params.bind_frozen(&mut tape);
        for ex in chunk {
            let fwd = forward_sentence(&mut tape, &vars, cfg.mode, ex, cfg.lambdas, cfg.objective)?;
            loss_total += tape.item(fwd.loss).as_f64();
            correct += fwd.correct;
            steps += fwd.steps;
            if let Some(set) = fwd.cov_history.last() {
                for state in set.states() {
                    for (j, l1) in state.row_l1(&tape).iter().enumerate() {
                        if ex.source[j] != crate::vocab::PAD {
                            l1_total += l1.as_f64();
                        }
                    }
                }
                positions += ex.source.iter().filter(|&&id| id != crate::vocab::PAD).count();
            }
        }
    }
    let n = dev.len().max(1) as f64;
    let acc = if steps == 0 {
        0.0
    } else {
        correct as f64 / steps as f64
    };
    let cov_l1 = if positions == 0 {
        0.0
    } else {
        l1_total / positions as f64
    };
    Ok((loss_total / n, acc, cov_l1))
}

/// Batched AdaDelta training. The per-batch objective is the mean sentence
/// loss, so lambda scaling does not depend on batch size. `on_epoch` runs
/// after each epoch's metrics are computed (checkpoint cadence).
pub fn train<F: Real>(
    params: &mut ModelParams<F>,
    train_set: &[TrainingExample],
    dev_set: &[TrainingExample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &ModelParams<F>, &EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    if train_set.is_empty() {
        return Err(Error::EmptyInput("training corpus"));
    }
    cfg.lambdas.validate()?;
    let mut opt = AdaDelta::new(cfg.rho, cfg.eps);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        let batches = plan_batches(train_set, cfg.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in &batches {
            let mut tape: Tape<F> = Tape::new();
            let (vars, named) = bind_named(params, &mut tape);
            let mut batch_loss = tape.scalar(F::zero());
            for &idx in batch {
                let ex = &train_set[idx];
                let fwd =
                    forward_sentence(&mut tape, &vars, cfg.mode, ex, cfg.lambdas, cfg.objective)?;
                loss_sum += tape.item(fwd.loss).as_f64();
                batch_loss = tape.add(batch_loss, fwd.loss)?;
            }
            seen += batch.len();
            let mean = tape.scale(batch_loss, F::from_f64(1.0 / batch.len() as f64));
            if !tape.item(mean).is_finite() {
                return Err(Error::numeric(format!(
                    "training diverged: non-finite batch loss at epoch {epoch}"
                )));
            }
            tape.backward(mean)?;
            let mut grads: BTreeMap<String, Vec<F>> = BTreeMap::new();
            for (name, var) in &named {
                let g = tape
                    .grad(*var)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![F::zero(); tape.value(*var).len()]);
                grads.insert(name.clone(), g);
            }
            opt.step(params, &grads)?;
        }
        let train_loss = loss_sum / seen.max(1) as f64;
        let (dev_loss, dev_acc, cov_l1) = if dev_set.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            evaluate(params, dev_set, cfg)?
        };
        let metrics = EpochMetrics {
            epoch,
            train_loss,
            dev_loss,
            dev_acc,
            cov_l1,
        };
        on_epoch(epoch, params, &metrics)?;
        log.push(metrics);
    }
    Ok(log)
}

fn bind_named<F: Real>(
    params: &ModelParams<F>,
    tape: &mut Tape<F>,
) -> (ModelVars, Vec<(String, Var)>) {
    let mut named = Vec::new();
    params.for_each(|name, t| {
        let var = tape.leaf(t.clone().with_grad());
        named.push((name.to_string(), var));
    });
    let vars = ModelVars::from_ordered(
        &params.dims,
        &named.iter().map(|(_, v)| *v).collect::<Vec<_>>(),
    );
    (vars, named)
}

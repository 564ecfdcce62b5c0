//! Greedy/beam decoding with per-hypothesis coverage tracking, attention
//! dumping, and attention-argmax UNK replacement.
//!
//! The search is generic over a step model so the beam machinery can be
//! exercised against hand-built distributions; the NMT wrapper drives the
//! real network, with every hypothesis owning its coverage states.

use crate::attention::{
    attend, context, decode_step, initial_state, predict, project_encoder, EncoderProjection,
};
use crate::coverage::{init_set, step_all, CoverageMode, CoverageSet};
use crate::encoder::{encode, EncodedSource};
use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelVars};
use crate::tape::{Tape, Var};
use crate::tensor::Real;
use crate::vocab::{Vocabulary, BOS, EOS, PAD, UNK};

/// One decodable sentence: the search calls `propose` once per live
/// hypothesis per step and `advance` only for surviving candidates.
pub trait DecodeModel {
    type State: Clone;
    type Pending;

    fn start(&mut self) -> Result<Self::State>;

    /// Log-probabilities over the target vocabulary, the attention row for
    /// this step, and whatever the emission-independent part of the step
    /// computed (reused by every candidate token).
    fn propose(
        &mut self,
        state: &Self::State,
        y_prev: Option<u32>,
    ) -> Result<Proposal<Self::Pending>>;

    /// State after emitting `y` from this step.
    fn advance(
        &mut self,
        state: &Self::State,
        pending: &Self::Pending,
        y: u32,
    ) -> Result<Self::State>;

    /// Per-source-position coverage L1 for diagnostics; empty when the model
    /// carries no coverage.
    fn coverage_l1(&self, _state: &Self::State) -> Vec<f64> {
        Vec::new()
    }
}

pub struct Proposal<P> {
    pub log_probs: Vec<f64>,
    pub attention: Vec<f64>,
    pub pending: P,
}

/// Winning hypothesis of a search.
pub struct DecodeOutput<S> {
    /// Emitted ids, EOS excluded.
    pub tokens: Vec<u32>,
    /// Sum of per-step chosen-token log-probabilities.
    pub log_prob: f64,
    /// The chosen token's log-probability at each step (EOS step included).
    pub step_log_probs: Vec<f64>,
    /// One attention row per emitted token.
    pub attention: Vec<Vec<f64>>,
    /// Coverage L1 per position after each update step (EOS step included).
    pub cov_l1_steps: Vec<Vec<f64>>,
    pub final_state: S,
}

struct Hyp<S> {
    tokens: Vec<u32>,
    log_prob: f64,
    step_log_probs: Vec<f64>,
    attention: Vec<Vec<f64>>,
    cov_l1_steps: Vec<Vec<f64>>,
    state: S,
    /// Step at which EOS was emitted; max_len terminations use max_len + 1.
    done_at: usize,
}

/// Length-capped beam search. Completed means EOS emitted (its probability
/// counts, the token does not appear in the output); hitting `max_len`
/// force-terminates. The winner is the completed hypothesis with the highest
/// score, ties broken by earliest completion then lexicographically smallest
/// id sequence. `len_norm` divides final scores by output length.
pub fn beam_decode<M: DecodeModel>(
    model: &mut M,
    beam: usize,
    max_len: usize,
    eos: u32,
    banned: &[u32],
    len_norm: bool,
) -> Result<DecodeOutput<M::State>> {
    if beam < 1 {
        return Err(Error::config("beam width must be at least 1"));
    }
    if max_len < 1 {
        return Err(Error::config("max decode length must be at least 1"));
    }
    let start = model.start()?;
    let mut active = vec![Hyp {
        tokens: Vec::new(),
        log_prob: 0.0,
        step_log_probs: Vec::new(),
        attention: Vec::new(),
        cov_l1_steps: Vec::new(),
        state: start,
        done_at: 0,
    }];
    let mut completed: Vec<Hyp<M::State>> = Vec::new();

    for step in 1..=max_len {
        // Propose once per live hypothesis.
        let mut proposals = Vec::with_capacity(active.len());
        for hyp in &active {
            let y_prev = hyp.tokens.last().copied();
            proposals.push(model.propose(&hyp.state, y_prev)?);
        }
        // All candidate emissions, deterministically ordered.
        let mut candidates: Vec<(usize, u32, f64)> = Vec::new();
        for (hi, prop) in proposals.iter().enumerate() {
            for (y, &lp) in prop.log_probs.iter().enumerate() {
                let y = y as u32;
                if banned.contains(&y) {
                    continue;
                }
                candidates.push((hi, y, active[hi].log_prob + lp));
            }
        }
        candidates.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        candidates.truncate(beam);

        let mut next_active = Vec::with_capacity(beam);
        for (hi, y, score) in candidates {
            let parent = &active[hi];
            let prop = &proposals[hi];
            let state = model.advance(&parent.state, &prop.pending, y)?;
            let mut cov_l1_steps = parent.cov_l1_steps.clone();
            let cov = model.coverage_l1(&state);
            if !cov.is_empty() {
                cov_l1_steps.push(cov);
            }
            let mut step_log_probs = parent.step_log_probs.clone();
            step_log_probs.push(prop.log_probs[y as usize]);
            if y == eos {
                completed.push(Hyp {
                    tokens: parent.tokens.clone(),
                    log_prob: score,
                    step_log_probs,
                    attention: parent.attention.clone(),
                    cov_l1_steps,
                    state,
                    done_at: step,
                });
            } else {
                let mut tokens = parent.tokens.clone();
                tokens.push(y);
                let mut attention = parent.attention.clone();
                attention.push(prop.attention.clone());
                next_active.push(Hyp {
                    tokens,
                    log_prob: score,
                    step_log_probs,
                    attention,
                    cov_l1_steps,
                    state,
                    done_at: 0,
                });
            }
        }
        active = next_active;
        if active.is_empty() {
            break;
        }
    }
    // Force-terminate whatever is still running.
    for mut hyp in active {
        hyp.done_at = max_len + 1;
        completed.push(hyp);
    }

    let score = |h: &Hyp<M::State>| {
        if len_norm {
            h.log_prob / h.tokens.len().max(1) as f64
        } else {
            h.log_prob
        }
    };
    let mut best = 0;
    for i in 1..completed.len() {
        let (a, b) = (&completed[i], &completed[best]);
        let ord = score(a)
            .partial_cmp(&score(b))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| b.done_at.cmp(&a.done_at))
            .then_with(|| {
                // Lexicographically smaller wins, so invert for max-compare.
                match a.tokens.cmp(&b.tokens) {
                    std::cmp::Ordering::Less => std::cmp::Ordering::Greater,
                    std::cmp::Ordering::Greater => std::cmp::Ordering::Less,
                    std::cmp::Ordering::Equal => std::cmp::Ordering::Equal,
                }
            });
        if ord == std::cmp::Ordering::Greater {
            best = i;
        }
    }
    let winner = completed.swap_remove(best);
    Ok(DecodeOutput {
        tokens: winner.tokens,
        log_prob: winner.log_prob,
        step_log_probs: winner.step_log_probs,
        attention: winner.attention,
        cov_l1_steps: winner.cov_l1_steps,
        final_state: winner.state,
    })
}

// ---- the real model as a DecodeModel ----

#[derive(Clone)]
pub struct NmtState {
    s: Var,
    cov: CoverageSet,
}

pub struct NmtPending {
    s_next: Var,
    alpha: Var,
}

/// One sentence's decoding context: a frozen tape holding the parameters and
/// the encoded source. Each hypothesis hangs its own state variables off it.
pub struct NmtDecoder<F: Real> {
    tape: Tape<F>,
    vars: ModelVars,
    enc: EncodedSource,
    proj: EncoderProjection,
    mode: CoverageMode,
    source_ids: Vec<u32>,
}

impl<F: Real> NmtDecoder<F> {
    pub fn new(params: &ModelParams<F>, source_ids: &[u32]) -> Result<Self> {
        let mut tape = Tape::new();
        let vars = params.bind_frozen(&mut tape);
        let enc = encode(&mut tape, vars.src_embed, &vars.enc_fwd, &vars.enc_bwd, source_ids)?;
        let proj = project_encoder(&mut tape, &vars.attn, &enc)?;
        Ok(NmtDecoder {
            tape,
            vars,
            enc,
            proj,
            mode: params.dims.mode,
            source_ids: source_ids.to_vec(),
        })
    }

    pub fn source_len(&self) -> usize {
        self.enc.mask.len()
    }
}

impl<F: Real> DecodeModel for NmtDecoder<F> {
    type State = NmtState;
    type Pending = NmtPending;

    fn start(&mut self) -> Result<NmtState> {
        let s = initial_state(&mut self.tape, self.vars.w_init, &self.enc)?;
        let ids = self.source_ids.clone();
        let cov = init_set(
            &mut self.tape,
            self.mode,
            self.vars.cov_gru.as_ref(),
            self.vars.cov_sub.as_ref(),
            &ids,
        )?;
        Ok(NmtState { s, cov })
    }

    fn propose(&mut self, state: &NmtState, y_prev: Option<u32>) -> Result<Proposal<NmtPending>> {
        let y_prev = y_prev.unwrap_or(BOS);
        let tape = &mut self.tape;
        let y_emb = tape.row(self.vars.tgt_embed, y_prev as usize)?;
        let rec = attend(tape, &self.vars.attn, state.s, &self.enc, &self.proj, y_emb, &state.cov)?;
        let ctx = context(tape, rec.probs, &self.enc)?;
        let s_next = decode_step(tape, &self.vars.dec, state.s, y_emb, ctx)?;
        let dist = predict(tape, &self.vars.out, s_next, y_emb)?;
        let log_probs: Vec<f64> = tape.value(dist).iter().map(|p| p.as_f64().ln()).collect();
        let attention: Vec<f64> = tape.value(rec.probs).iter().map(|p| p.as_f64()).collect();
        Ok(Proposal {
            log_probs,
            attention,
            pending: NmtPending {
                s_next,
                alpha: rec.probs,
            },
        })
    }

    fn advance(&mut self, state: &NmtState, pending: &NmtPending, y: u32) -> Result<NmtState> {
        let cov = if self.mode == CoverageMode::Base {
            state.cov.clone()
        } else {
            let y_emb = self.tape.row(self.vars.tgt_embed, y as usize)?;
            let mask = self.enc.mask.clone();
            step_all(
                &mut self.tape,
                self.mode,
                self.vars.cov_gru.as_ref(),
                self.vars.cov_sub.as_ref(),
                &state.cov,
                Some(y_emb),
                Some(pending.alpha),
                &mask,
            )?
        };
        Ok(NmtState {
            s: pending.s_next,
            cov,
        })
    }

    fn coverage_l1(&self, state: &NmtState) -> Vec<f64> {
        let l = self.enc.mask.len();
        let mut out = vec![0.0; l];
        let mut any = false;
        for st in state.cov.states() {
            any = true;
            for (j, v) in st.row_l1(&self.tape).iter().enumerate() {
                out[j] += v.as_f64();
            }
        }
        if any {
            out
        } else {
            Vec::new()
        }
    }
}

/// Decoded sentence plus the diagnostics the dump files need.
pub struct TranslationResult {
    pub token_ids: Vec<u32>,
    pub tokens: Vec<String>,
    /// `m` rows of `l` attention probabilities.
    pub attention: Vec<Vec<f64>>,
    /// Final coverage L1 per source position, summed over rules; empty in
    /// base mode.
    pub final_cov_l1: Vec<f64>,
    /// Per-update-step coverage L1 rows (for the diagnostic dump).
    pub cov_l1_steps: Vec<Vec<f64>>,
    pub log_prob: f64,
}

/// Beam-decode one sentence with the real model.
pub fn translate_sentence<F: Real>(
    params: &ModelParams<F>,
    tgt_vocab: &Vocabulary,
    source_ids: &[u32],
    beam: usize,
    max_len: usize,
    len_norm: bool,
) -> Result<TranslationResult> {
    let mut dec = NmtDecoder::new(params, source_ids)?;
    let out = beam_decode(&mut dec, beam, max_len, EOS, &[PAD, BOS], len_norm)?;
    let final_cov_l1 = out.cov_l1_steps.last().cloned().unwrap_or_default();
    let tokens = out
        .tokens
        .iter()
        .map(|&id| tgt_vocab.token(id).to_string())
        .collect();
    Ok(TranslationResult {
        token_ids: out.tokens,
        tokens,
        attention: out.attention,
        final_cov_l1,
        cov_l1_steps: out.cov_l1_steps,
        log_prob: out.log_prob,
    })
}

/// Replace every UNK output token with the source token its attention row
/// points at (argmax, ties to the lowest source index).
pub fn replace_unk(result: &TranslationResult, source_tokens: &[&str]) -> Vec<String> {
    result
        .tokens
        .iter()
        .enumerate()
        .map(|(t, tok)| {
            if result.token_ids[t] == UNK {
                let row = &result.attention[t];
                let mut best = 0;
                for (j, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = j;
                    }
                }
                source_tokens
                    .get(best)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| tok.clone())
            } else {
                tok.clone()
            }
        })
        .collect()
}

/// Attention dump block: `sent <id> <l> <m>` then one line per target step
/// with l probabilities at six decimals.
pub fn format_attention_dump(sent_id: usize, l: usize, attention: &[Vec<f64>]) -> String {
    let mut out = format!("sent {sent_id} {l} {}\n", attention.len());
    for row in attention {
        let cells: Vec<String> = row.iter().map(|p| format!("{p:.6}")).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

//! Per-source-word coverage embeddings and their update rules.
//!
//! Each source word starts from a "full" learned vector taken from a coverage
//! embedding table and is pushed toward zero as the word gets translated.
//! Two update rules exist: a dedicated GRU fed the emitted word and the
//! attention weight, and a direct weighted subtraction of the emitted word's
//! projected embedding. The combined setup runs both in parallel with
//! separate tables and separate attention projections.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{CovGruVars, CovSubVars};
use crate::tape::{Tape, Var};
use crate::tensor::Real;

/// Which coverage machinery a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoverageMode {
    Base,
    Gru,
    Sub,
    Both,
}

impl CoverageMode {
    pub fn uses_gru(self) -> bool {
        matches!(self, CoverageMode::Gru | CoverageMode::Both)
    }
    pub fn uses_sub(self) -> bool {
        matches!(self, CoverageMode::Sub | CoverageMode::Both)
    }
    /// Number of coverage states a sentence carries in this mode.
    pub fn state_count(self) -> usize {
        match self {
            CoverageMode::Base => 0,
            CoverageMode::Gru | CoverageMode::Sub => 1,
            CoverageMode::Both => 2,
        }
    }
}

impl fmt::Display for CoverageMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CoverageMode::Base => "base",
            CoverageMode::Gru => "gru",
            CoverageMode::Sub => "sub",
            CoverageMode::Both => "both",
        };
        f.write_str(s)
    }
}

impl FromStr for CoverageMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(CoverageMode::Base),
            "gru" => Ok(CoverageMode::Gru),
            "sub" => Ok(CoverageMode::Sub),
            "both" => Ok(CoverageMode::Both),
            other => Err(Error::config(format!(
                "unknown coverage mode {other:?} (expected base|gru|sub|both)"
            ))),
        }
    }
}

/// Which rule a [`CoverageState`] belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleKind {
    Gru,
    Sub,
}

/// Coverage embeddings for one sentence under one rule: an `l x d_c` matrix
/// held as per-position rows, plus the update step counter.
#[derive(Debug, Clone)]
pub struct CoverageState {
    pub rows: Vec<Var>,
    pub kind: RuleKind,
    pub step: usize,
}

impl CoverageState {
    /// Materialize the `l x d_c` matrix.
    pub fn matrix<F: Real>(&self, tape: &mut Tape<F>) -> Result<Var> {
        tape.stack_rows(&self.rows)
    }

    /// L1 norm of each row, read out of the tape.
    pub fn row_l1<F: Real>(&self, tape: &Tape<F>) -> Vec<F> {
        self.rows
            .iter()
            .map(|&r| {
                let mut acc = F::zero();
                for &v in tape.value(r) {
                    acc += v.abs();
                }
                acc
            })
            .collect()
    }
}

/// The one or two coverage states a sentence carries, depending on mode.
#[derive(Debug, Clone, Default)]
pub struct CoverageSet {
    pub gru: Option<CoverageState>,
    pub sub: Option<CoverageState>,
}

impl CoverageSet {
    pub fn states(&self) -> impl Iterator<Item = &CoverageState> {
        self.gru.iter().chain(self.sub.iter())
    }

    fn check(&self, mode: CoverageMode) -> Result<()> {
        if self.gru.is_some() != mode.uses_gru() || self.sub.is_some() != mode.uses_sub() {
            let have = self.gru.is_some() as usize + self.sub.is_some() as usize;
            return Err(Error::config(format!(
                "coverage state count {have} does not match mode {mode} (expects {})",
                mode.state_count()
            )));
        }
        Ok(())
    }
}

/// Row j starts as the coverage table row for source word x_j; step = 0.
pub fn init_coverage<F: Real>(
    tape: &mut Tape<F>,
    table: Var,
    source_ids: &[u32],
    kind: RuleKind,
) -> Result<CoverageState> {
    let rows = source_ids
        .iter()
        .map(|&id| tape.row(table, id as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(CoverageState {
        rows,
        kind,
        step: 0,
    })
}

/// GRU update, exactly the stated blend: c_t = z o c_{t-1} + (1-z) o cand,
/// so a saturated update gate keeps the old memory. alpha enters as a scalar
/// per position through the `d_c x 1` maps. Masked rows pass through
/// untouched.
pub fn update_gru<F: Real>(
    tape: &mut Tape<F>,
    w: &CovGruVars,
    cov: &CoverageState,
    y_emb: Var,
    alpha: Var,
    mask: &[bool],
) -> Result<CoverageState> {
    if cov.kind != RuleKind::Gru {
        return Err(Error::config("update_gru applied to a non-GRU coverage state"));
    }
    let l = cov.rows.len();
    if tape.shape(alpha) != [l] || mask.len() != l {
        return Err(Error::Dimension {
            op: "update_gru",
            lhs: tape.shape(alpha).to_vec(),
            rhs: vec![l],
        });
    }

    // Word-dependent terms are position-independent; compute them once.
    let zy = tape.matmul(w.w_zy, y_emb)?;
    let ry = tape.matmul(w.w_ry, y_emb)?;
    let cy = tape.matmul(w.w_y, y_emb)?;

    let mut rows = Vec::with_capacity(l);
    for j in 0..l {
        if !mask[j] {
            rows.push(cov.rows[j]);
            continue;
        }
        let c_prev = cov.rows[j];
        let a_j = tape.pick(alpha, j)?;

        let za = tape.matmul(w.w_za, a_j)?;
        let zc = tape.matmul(w.u_z, c_prev)?;
        let zp = tape.add(zy, za)?;
        let zp = tape.add(zp, zc)?;
        let z = tape.sigmoid(zp);

        let ra = tape.matmul(w.w_ra, a_j)?;
        let rc = tape.matmul(w.u_r, c_prev)?;
        let rp = tape.add(ry, ra)?;
        let rp = tape.add(rp, rc)?;
        let r = tape.sigmoid(rp);

        let ca = tape.matmul(w.w_a, a_j)?;
        let uc = tape.matmul(w.u, c_prev)?;
        let gated = tape.mul(r, uc)?;
        let cp = tape.add(cy, ca)?;
        let cp = tape.add(cp, gated)?;
        let cand = tape.tanh(cp);

        let old_part = tape.mul(z, c_prev)?;
        let neg_z = tape.scale(z, -F::one());
        let fresh = tape.add_const(neg_z, F::one());
        let new_part = tape.mul(fresh, cand)?;
        rows.push(tape.add(old_part, new_part)?);
    }
    Ok(CoverageState {
        rows,
        kind: RuleKind::Gru,
        step: cov.step + 1,
    })
}

/// Subtraction update: c_t = c_{t-1} - alpha_j o (W_y2c emb(y_t)).
pub fn update_sub<F: Real>(
    tape: &mut Tape<F>,
    w: &CovSubVars,
    cov: &CoverageState,
    y_emb: Var,
    alpha: Var,
    mask: &[bool],
) -> Result<CoverageState> {
    if cov.kind != RuleKind::Sub {
        return Err(Error::config("update_sub applied to a non-SUB coverage state"));
    }
    let l = cov.rows.len();
    if tape.shape(alpha) != [l] || mask.len() != l {
        return Err(Error::Dimension {
            op: "update_sub",
            lhs: tape.shape(alpha).to_vec(),
            rhs: vec![l],
        });
    }
    let projected = tape.matmul(w.w_y2c, y_emb)?;
    let mut rows = Vec::with_capacity(l);
    for j in 0..l {
        if !mask[j] {
            rows.push(cov.rows[j]);
            continue;
        }
        let a_j = tape.pick(alpha, j)?;
        let delta = tape.mul(a_j, projected)?;
        rows.push(tape.sub(cov.rows[j], delta)?);
    }
    Ok(CoverageState {
        rows,
        kind: RuleKind::Sub,
        step: cov.step + 1,
    })
}

/// Initialize the coverage states a mode demands (none for base).
pub fn init_set<F: Real>(
    tape: &mut Tape<F>,
    mode: CoverageMode,
    gru: Option<&CovGruVars>,
    sub: Option<&CovSubVars>,
    source_ids: &[u32],
) -> Result<CoverageSet> {
    let gru_state = if mode.uses_gru() {
        let w = gru.ok_or_else(|| Error::config("mode requires GRU coverage parameters"))?;
        Some(init_coverage(tape, w.table, source_ids, RuleKind::Gru)?)
    } else {
        None
    };
    let sub_state = if mode.uses_sub() {
        let w = sub.ok_or_else(|| Error::config("mode requires SUB coverage parameters"))?;
        Some(init_coverage(tape, w.table, source_ids, RuleKind::Sub)?)
    } else {
        None
    };
    Ok(CoverageSet {
        gru: gru_state,
        sub: sub_state,
    })
}

/// Advance every state one step with the same attention row and emitted word.
/// Base mode is a no-op.
pub fn step_all<F: Real>(
    tape: &mut Tape<F>,
    mode: CoverageMode,
    gru: Option<&CovGruVars>,
    sub: Option<&CovSubVars>,
    set: &CoverageSet,
    y_emb: Option<Var>,
    alpha: Option<Var>,
    mask: &[bool],
) -> Result<CoverageSet> {
    set.check(mode)?;
    if mode == CoverageMode::Base {
        return Ok(set.clone());
    }
    let y_emb = y_emb.ok_or_else(|| Error::config("coverage update needs the emitted word"))?;
    let alpha = alpha.ok_or_else(|| Error::config("coverage update needs the attention row"))?;
    let new_gru = match (&set.gru, gru) {
        (Some(state), Some(w)) => Some(update_gru(tape, w, state, y_emb, alpha, mask)?),
        (None, _) => None,
        (Some(_), None) => return Err(Error::config("GRU coverage state without parameters")),
    };
    let new_sub = match (&set.sub, sub) {
        (Some(state), Some(w)) => Some(update_sub(tape, w, state, y_emb, alpha, mask)?),
        (None, _) => None,
        (Some(_), None) => return Err(Error::config("SUB coverage state without parameters")),
    };
    Ok(CoverageSet {
        gru: new_gru,
        sub: new_sub,
    })
}

/// Diagnostic dump: one `t<TAB>j<TAB>norm` line per step and position, where
/// norm is the L1 of that position's coverage row summed over active rules.
pub fn format_l1_dump(per_step: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for (t, norms) in per_step.iter().enumerate() {
        for (j, n) in norms.iter().enumerate() {
            out.push_str(&format!("{t}\t{j}\t{n:.6}\n"));
        }
    }
    out
}

//! Bidirectional GRU encoder. Each source position i gets the concatenation
//! of the right-to-left state over x_i..x_l and the left-to-right state over
//! x_1..x_i, in that order. PAD positions are masked and their rows stay zero.

use crate::error::{Error, Result};
use crate::model::GruCellVars;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::vocab::PAD;

/// Encoder output for one sentence.
pub struct EncodedSource {
    /// `[l, 2*d_h]` matrix of concatenated directional states.
    pub states: Var,
    /// Per-position rows of `states`, each `[2*d_h]`.
    pub rows: Vec<Var>,
    /// true = real token, false = PAD.
    pub mask: Vec<bool>,
    /// Right-to-left state at position 1, i.e. over the whole sentence;
    /// seeds the decoder state.
    pub first_bwd: Var,
}

/// One gated recurrent step: z = sig(W_z x + U_z h), r = sig(W_r x + U_r h),
/// cand = tanh(W_h x + U_h (r o h)), out = (1-z) o h + z o cand.
pub fn gru_cell<F: Real>(
    tape: &mut Tape<F>,
    w: &GruCellVars,
    x: Var,
    h_prev: Var,
) -> Result<Var> {
    let zx = tape.matmul(w.w_z, x)?;
    let zh = tape.matmul(w.u_z, h_prev)?;
    let zp = tape.add(zx, zh)?;
    let z = tape.sigmoid(zp);

    let rx = tape.matmul(w.w_r, x)?;
    let rh = tape.matmul(w.u_r, h_prev)?;
    let rp = tape.add(rx, rh)?;
    let r = tape.sigmoid(rp);

    let gated = tape.mul(r, h_prev)?;
    let cx = tape.matmul(w.w_h, x)?;
    let ch = tape.matmul(w.u_h, gated)?;
    let cp = tape.add(cx, ch)?;
    let cand = tape.tanh(cp);

    let neg_z = tape.scale(z, -F::one());
    let keep = tape.add_const(neg_z, F::one());
    let old_part = tape.mul(keep, h_prev)?;
    let new_part = tape.mul(z, cand)?;
    tape.add(old_part, new_part)
}

/// Encode a source sentence: independent left-to-right and right-to-left
/// sweeps from zero initial states, rows concatenated as [backward; forward].
pub fn encode<F: Real>(
    tape: &mut Tape<F>,
    src_embed: Var,
    fwd: &GruCellVars,
    bwd: &GruCellVars,
    source_ids: &[u32],
) -> Result<EncodedSource> {
    if source_ids.is_empty() {
        return Err(Error::EmptyInput("encode: source sentence"));
    }
    let l = source_ids.len();
    let d_h = tape.shape(fwd.u_z)[0];
    let mask: Vec<bool> = source_ids.iter().map(|&id| id != PAD).collect();

    let embs: Vec<Option<Var>> = source_ids
        .iter()
        .map(|&id| {
            if id == PAD {
                Ok(None)
            } else {
                tape.row(src_embed, id as usize).map(Some)
            }
        })
        .collect::<Result<_>>()?;

    // Left-to-right sweep; PAD positions pass the state through.
    let zero = tape.leaf(Tensor::zeros(vec![d_h]));
    let mut state = zero;
    let mut fwd_states = vec![zero; l];
    for i in 0..l {
        if let Some(x) = embs[i] {
            state = gru_cell(tape, fwd, x, state)?;
        }
        fwd_states[i] = state;
    }

    // Right-to-left sweep.
    let mut state = zero;
    let mut bwd_states = vec![zero; l];
    for i in (0..l).rev() {
        if let Some(x) = embs[i] {
            state = gru_cell(tape, bwd, x, state)?;
        }
        bwd_states[i] = state;
    }

    let zero_row = tape.leaf(Tensor::zeros(vec![2 * d_h]));
    let mut rows = Vec::with_capacity(l);
    for i in 0..l {
        if mask[i] {
            rows.push(tape.concat(&[bwd_states[i], fwd_states[i]])?);
        } else {
            rows.push(zero_row);
        }
    }
    let states = tape.stack_rows(&rows)?;
    Ok(EncodedSource {
        states,
        rows,
        mask,
        first_bwd: bwd_states[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GruCellParams, ModelDims, ModelParams};
    use crate::coverage::CoverageMode;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bind_cell<F: Real>(tape: &mut Tape<F>, p: &GruCellParams<F>, grad: bool) -> GruCellVars {
        let mut leaf = |t: &Tensor<F>| {
            if grad {
                tape.leaf(t.clone().with_grad())
            } else {
                tape.leaf(t.clone())
            }
        };
        GruCellVars {
            w_z: leaf(&p.w_z),
            u_z: leaf(&p.u_z),
            w_r: leaf(&p.w_r),
            u_r: leaf(&p.u_r),
            w_h: leaf(&p.w_h),
            u_h: leaf(&p.u_h),
        }
    }

    fn zero_cell(d_out: usize, d_in: usize) -> GruCellParams<f64> {
        GruCellParams {
            w_z: Tensor::zeros(vec![d_out, d_in]),
            u_z: Tensor::zeros(vec![d_out, d_out]),
            w_r: Tensor::zeros(vec![d_out, d_in]),
            u_r: Tensor::zeros(vec![d_out, d_out]),
            w_h: Tensor::zeros(vec![d_out, d_in]),
            u_h: Tensor::zeros(vec![d_out, d_out]),
        }
    }

    #[test]
    fn zero_params_zero_state_stay_zero() {
        let mut tape = Tape::<f64>::new();
        let cell = zero_cell(3, 2);
        let w = bind_cell(&mut tape, &cell, false);
        let x = tape.leaf(Tensor::vector(vec![0.7, -0.3]));
        let h = tape.leaf(Tensor::zeros(vec![3]));
        let out = gru_cell(&mut tape, &w, x, h).unwrap();
        assert_eq!(tape.value(out), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn saturated_update_gate_keeps_previous_state() {
        // Large negative z-preactivation drives z to 0, so out ~= h_prev.
        let mut cell = zero_cell(3, 2);
        cell.w_z = Tensor::filled(vec![3, 2], -40.0);
        let mut tape = Tape::<f64>::new();
        let w = bind_cell(&mut tape, &cell, false);
        let x = tape.leaf(Tensor::vector(vec![1.0, 1.0]));
        let h = tape.leaf(Tensor::vector(vec![0.4, -0.9, 0.2]));
        let out = gru_cell(&mut tape, &w, x, h).unwrap();
        for (o, e) in tape.value(out).iter().zip(&[0.4, -0.9, 0.2]) {
            assert!((o - e).abs() < 1e-9);
        }
    }

    #[test]
    fn random_cell_gradients_agree_with_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = GruCellParams::<f64>::init(4, 4, &mut rng);
        let x: Tensor<f64> = Tensor::rand_uniform(vec![4], -1.0, 1.0, &mut rng);
        let h: Tensor<f64> = Tensor::rand_uniform(vec![4], -1.0, 1.0, &mut rng);
        let params = vec![
            p.w_z.clone(),
            p.u_z.clone(),
            p.w_r.clone(),
            p.u_r.clone(),
            p.w_h.clone(),
            p.u_h.clone(),
            x,
            h,
        ];
        let res = grad_check(&params, 1e-4, |tape, vars| {
            let w = GruCellVars {
                w_z: vars[0],
                u_z: vars[1],
                w_r: vars[2],
                u_r: vars[3],
                w_h: vars[4],
                u_h: vars[5],
            };
            let out = gru_cell(tape, &w, vars[6], vars[7])?;
            let t = tape.tanh(out);
            Ok(tape.sum(t))
        })
        .unwrap();
        assert!(res.max_rel_err < 1e-6, "rel err {}", res.max_rel_err);
    }

    fn toy_params(seed: u64) -> ModelParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParams::init(
            ModelDims {
                src_vocab: 6,
                tgt_vocab: 6,
                d_emb: 3,
                d_h: 2,
                d_c: 2,
                mode: CoverageMode::Base,
            },
            &mut rng,
        )
    }

    #[test]
    fn single_token_encodes_one_step_per_direction() {
        let p = toy_params(5);
        let mut tape = Tape::new();
        let vars = p.bind_frozen(&mut tape);
        let enc = encode(&mut tape, vars.src_embed, &vars.enc_fwd, &vars.enc_bwd, &[4]).unwrap();

        let x = tape.row(vars.src_embed, 4).unwrap();
        let zero = tape.leaf(Tensor::zeros(vec![2]));
        let f = gru_cell(&mut tape, &vars.enc_fwd, x, zero).unwrap();
        let b = gru_cell(&mut tape, &vars.enc_bwd, x, zero).unwrap();
        let expect = tape.concat(&[b, f]).unwrap();
        assert_eq!(tape.value(enc.rows[0]), tape.value(expect));
    }

    #[test]
    fn zero_parameters_give_zero_states() {
        let mut p = toy_params(6);
        p.for_each_mut(|_, t| t.data.iter_mut().for_each(|v| *v = 0.0));
        let mut tape = Tape::new();
        let vars = p.bind_frozen(&mut tape);
        let enc = encode(&mut tape, vars.src_embed, &vars.enc_fwd, &vars.enc_bwd, &[4, 5, 4])
            .unwrap();
        assert!(tape.value(enc.states).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn three_token_encode_matches_hand_unrolled_cells() {
        let p = toy_params(7);
        let ids = [4u32, 5, 4];
        let mut tape = Tape::new();
        let vars = p.bind_frozen(&mut tape);
        let enc =
            encode(&mut tape, vars.src_embed, &vars.enc_fwd, &vars.enc_bwd, &ids).unwrap();

        // Manual three-step unroll, same tape so values are bit-identical.
        let zero = tape.leaf(Tensor::zeros(vec![2]));
        let xs: Vec<Var> = ids
            .iter()
            .map(|&id| tape.row(vars.src_embed, id as usize).unwrap())
            .collect();
        let f1 = gru_cell(&mut tape, &vars.enc_fwd, xs[0], zero).unwrap();
        let f2 = gru_cell(&mut tape, &vars.enc_fwd, xs[1], f1).unwrap();
        let f3 = gru_cell(&mut tape, &vars.enc_fwd, xs[2], f2).unwrap();
        let b3 = gru_cell(&mut tape, &vars.enc_bwd, xs[2], zero).unwrap();
        let b2 = gru_cell(&mut tape, &vars.enc_bwd, xs[1], b3).unwrap();
        let b1 = gru_cell(&mut tape, &vars.enc_bwd, xs[0], b2).unwrap();

        let r0 = tape.concat(&[b1, f1]).unwrap();
        let r1 = tape.concat(&[b2, f2]).unwrap();
        let r2 = tape.concat(&[b3, f3]).unwrap();
        assert_eq!(tape.value(enc.rows[0]), tape.value(r0));
        assert_eq!(tape.value(enc.rows[1]), tape.value(r1));
        assert_eq!(tape.value(enc.rows[2]), tape.value(r2));
    }

    #[test]
    fn reversing_input_mirrors_and_swaps_halves_under_shared_cells() {
        let mut p = toy_params(8);
        p.enc_bwd = p.enc_fwd.clone();
        let ids = [4u32, 5, 4, 5];
        let rev: Vec<u32> = ids.iter().rev().copied().collect();

        let mut tape = Tape::new();
        let vars = p.bind_frozen(&mut tape);
        let fwd_enc =
            encode(&mut tape, vars.src_embed, &vars.enc_fwd, &vars.enc_bwd, &ids).unwrap();
        let rev_enc =
            encode(&mut tape, vars.src_embed, &vars.enc_fwd, &vars.enc_bwd, &rev).unwrap();

        let l = ids.len();
        let d = 2;
        for i in 0..l {
            let a = tape.value(rev_enc.rows[i]).to_vec();
            let b = tape.value(fwd_enc.rows[l - 1 - i]).to_vec();
            let swapped: Vec<f64> = b[d..].iter().chain(&b[..d]).copied().collect();
            assert_eq!(a, swapped);
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let p = toy_params(9);
        let run = || {
            let mut tape = Tape::new();
            let vars = p.bind_frozen(&mut tape);
            let enc = encode(&mut tape, vars.src_embed, &vars.enc_fwd, &vars.enc_bwd, &[5, 4])
                .unwrap();
            tape.value(enc.states).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_sentence_is_an_error() {
        let p = toy_params(10);
        let mut tape = Tape::new();
        let vars = p.bind_frozen(&mut tape);
        assert!(matches!(
            encode(&mut tape, vars.src_embed, &vars.enc_fwd, &vars.enc_bwd, &[]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn pad_rows_are_zero_and_masked() {
        let p = toy_params(11);
        let mut tape = Tape::new();
        let vars = p.bind_frozen(&mut tape);
        let enc = encode(&mut tape, vars.src_embed, &vars.enc_fwd, &vars.enc_bwd, &[4, 5, PAD])
            .unwrap();
        assert_eq!(enc.mask, vec![true, true, false]);
        assert!(tape.value(enc.rows[2]).iter().all(|&v| v == 0.0));
    }
}

//! Model parameters: every learnable matrix and embedding table, plus the
//! fixed traversal order that initialization, optimization, checkpointing and
//! gradient checking all share.

use rand::Rng;

use crate::coverage::CoverageMode;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::vocab::EmbeddingTable;

/// Widths and mode for one model instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Word embedding width (source and target).
    pub d_emb: usize,
    /// Per-direction encoder state width; encoder rows are `2 * d_h` wide.
    pub d_h: usize,
    /// Coverage embedding width.
    pub d_c: usize,
    pub mode: CoverageMode,
}

impl ModelDims {
    /// Decoder state width.
    pub fn d_s(&self) -> usize {
        self.d_h
    }
    /// Attention intermediate width (the A layer).
    pub fn d_a(&self) -> usize {
        self.d_h
    }
    /// Output intermediate width (the o layer).
    pub fn d_o(&self) -> usize {
        self.d_emb
    }
}

/// One gated recurrent cell: update gate W/U, reset gate W/U, candidate W/U.
/// No bias terms anywhere in the model.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCellParams<F> {
    pub w_z: Tensor<F>,
    pub u_z: Tensor<F>,
    pub w_r: Tensor<F>,
    pub u_r: Tensor<F>,
    pub w_h: Tensor<F>,
    pub u_h: Tensor<F>,
}

#[derive(Debug, Clone, Copy)]
pub struct GruCellVars {
    pub w_z: Var,
    pub u_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub w_h: Var,
    pub u_h: Var,
}

impl<F: Real> GruCellParams<F> {
    pub fn init(d_out: usize, d_in: usize, rng: &mut impl Rng) -> Self {
        GruCellParams {
            w_z: Tensor::rand_uniform(vec![d_out, d_in], -0.08, 0.08, rng),
            u_z: Tensor::rand_uniform(vec![d_out, d_out], -0.08, 0.08, rng),
            w_r: Tensor::rand_uniform(vec![d_out, d_in], -0.08, 0.08, rng),
            u_r: Tensor::rand_uniform(vec![d_out, d_out], -0.08, 0.08, rng),
            w_h: Tensor::rand_uniform(vec![d_out, d_in], -0.08, 0.08, rng),
            u_h: Tensor::rand_uniform(vec![d_out, d_out], -0.08, 0.08, rng),
        }
    }
}

/// Attention weights: A_j = tanh(W_s s + W_h h_j + W_y emb(y_prev) + sum_k W_c^k c^k_j),
/// e_j = w_e A_j. Coverage projections exist per active update rule and stay
/// separate in combined mode.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<F> {
    pub w_s: Tensor<F>,
    pub w_h: Tensor<F>,
    pub w_y: Tensor<F>,
    pub w_e: Tensor<F>,
    pub w_cov_gru: Option<Tensor<F>>,
    pub w_cov_sub: Option<Tensor<F>>,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_s: Var,
    pub w_h: Var,
    pub w_y: Var,
    pub w_e: Var,
    pub w_cov_gru: Option<Var>,
    pub w_cov_sub: Option<Var>,
}

/// Output layer: o = tanh(W_o s + W_oy emb(y_prev)), logits = W_v o.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputParams<F> {
    pub w_o: Tensor<F>,
    pub w_oy: Tensor<F>,
    pub w_v: Tensor<F>,
}

#[derive(Debug, Clone, Copy)]
pub struct OutputVars {
    pub w_o: Var,
    pub w_oy: Var,
    pub w_v: Var,
}

/// GRU-rule coverage parameters; the three alpha maps are `d_c x 1` since the
/// attention weight enters as a scalar per position.
#[derive(Debug, Clone, PartialEq)]
pub struct CovGruParams<F> {
    pub table: EmbeddingTable<F>,
    pub w_zy: Tensor<F>,
    pub w_za: Tensor<F>,
    pub u_z: Tensor<F>,
    pub w_ry: Tensor<F>,
    pub w_ra: Tensor<F>,
    pub u_r: Tensor<F>,
    pub w_y: Tensor<F>,
    pub w_a: Tensor<F>,
    pub u: Tensor<F>,
}

#[derive(Debug, Clone, Copy)]
pub struct CovGruVars {
    pub table: Var,
    pub w_zy: Var,
    pub w_za: Var,
    pub u_z: Var,
    pub w_ry: Var,
    pub w_ra: Var,
    pub u_r: Var,
    pub w_y: Var,
    pub w_a: Var,
    pub u: Var,
}

/// Subtraction-rule coverage parameters: its own table plus the projection
/// that converts a target word embedding to coverage width.
#[derive(Debug, Clone, PartialEq)]
pub struct CovSubParams<F> {
    pub table: EmbeddingTable<F>,
    pub w_y2c: Tensor<F>,
}

#[derive(Debug, Clone, Copy)]
pub struct CovSubVars {
    pub table: Var,
    pub w_y2c: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub dims: ModelDims,
    pub src_embed: EmbeddingTable<F>,
    pub tgt_embed: EmbeddingTable<F>,
    pub enc_fwd: GruCellParams<F>,
    pub enc_bwd: GruCellParams<F>,
    /// Projects the backward encoder state at position 1 into s_0.
    pub w_init: Tensor<F>,
    pub dec: GruCellParams<F>,
    pub attn: AttentionParams<F>,
    pub out: OutputParams<F>,
    pub cov_gru: Option<CovGruParams<F>>,
    pub cov_sub: Option<CovSubParams<F>>,
}

/// Tape handles for every parameter, in the same layout as [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub src_embed: Var,
    pub tgt_embed: Var,
    pub enc_fwd: GruCellVars,
    pub enc_bwd: GruCellVars,
    pub w_init: Var,
    pub dec: GruCellVars,
    pub attn: AttentionVars,
    pub out: OutputVars,
    pub cov_gru: Option<CovGruVars>,
    pub cov_sub: Option<CovSubVars>,
}

impl<F: Real> ModelParams<F> {
    /// Fresh parameters, every tensor uniform in [-0.08, 0.08) from the given
    /// generator. The draw order is the fixed field order, so a seed pins the
    /// whole parameter set.
    pub fn init(dims: ModelDims, rng: &mut impl Rng) -> Self {
        let d_emb = dims.d_emb;
        let d_h = dims.d_h;
        let d_s = dims.d_s();
        let d_a = dims.d_a();
        let d_o = dims.d_o();
        let d_c = dims.d_c;

        let src_embed = EmbeddingTable::init(dims.src_vocab, d_emb, rng);
        let tgt_embed = EmbeddingTable::init(dims.tgt_vocab, d_emb, rng);
        let enc_fwd = GruCellParams::init(d_h, d_emb, rng);
        let enc_bwd = GruCellParams::init(d_h, d_emb, rng);
        let w_init = Tensor::rand_uniform(vec![d_s, d_h], -0.08, 0.08, rng);
        let dec = GruCellParams::init(d_s, d_emb + 2 * d_h, rng);
        let attn = AttentionParams {
            w_s: Tensor::rand_uniform(vec![d_a, d_s], -0.08, 0.08, rng),
            w_h: Tensor::rand_uniform(vec![d_a, 2 * d_h], -0.08, 0.08, rng),
            w_y: Tensor::rand_uniform(vec![d_a, d_emb], -0.08, 0.08, rng),
            w_e: Tensor::rand_uniform(vec![1, d_a], -0.08, 0.08, rng),
            w_cov_gru: dims
                .mode
                .uses_gru()
                .then(|| Tensor::rand_uniform(vec![d_a, d_c], -0.08, 0.08, rng)),
            w_cov_sub: dims
                .mode
                .uses_sub()
                .then(|| Tensor::rand_uniform(vec![d_a, d_c], -0.08, 0.08, rng)),
        };
        let out = OutputParams {
            w_o: Tensor::rand_uniform(vec![d_o, d_s], -0.08, 0.08, rng),
            w_oy: Tensor::rand_uniform(vec![d_o, d_emb], -0.08, 0.08, rng),
            w_v: Tensor::rand_uniform(vec![dims.tgt_vocab, d_o], -0.08, 0.08, rng),
        };
        let cov_gru = dims.mode.uses_gru().then(|| CovGruParams {
            table: EmbeddingTable::init(dims.src_vocab, d_c, rng),
            w_zy: Tensor::rand_uniform(vec![d_c, d_emb], -0.08, 0.08, rng),
            w_za: Tensor::rand_uniform(vec![d_c, 1], -0.08, 0.08, rng),
            u_z: Tensor::rand_uniform(vec![d_c, d_c], -0.08, 0.08, rng),
            w_ry: Tensor::rand_uniform(vec![d_c, d_emb], -0.08, 0.08, rng),
            w_ra: Tensor::rand_uniform(vec![d_c, 1], -0.08, 0.08, rng),
            u_r: Tensor::rand_uniform(vec![d_c, d_c], -0.08, 0.08, rng),
            w_y: Tensor::rand_uniform(vec![d_c, d_emb], -0.08, 0.08, rng),
            w_a: Tensor::rand_uniform(vec![d_c, 1], -0.08, 0.08, rng),
            u: Tensor::rand_uniform(vec![d_c, d_c], -0.08, 0.08, rng),
        });
        let cov_sub = dims.mode.uses_sub().then(|| CovSubParams {
            table: EmbeddingTable::init(dims.src_vocab, d_c, rng),
            w_y2c: Tensor::rand_uniform(vec![d_c, d_emb], -0.08, 0.08, rng),
        });

        ModelParams {
            dims,
            src_embed,
            tgt_embed,
            enc_fwd,
            enc_bwd,
            w_init,
            dec,
            attn,
            out,
            cov_gru,
            cov_sub,
        }
    }

    /// Visit `(name, tensor)` pairs in the fixed field order.
    pub fn for_each(&self, mut f: impl FnMut(&str, &Tensor<F>)) {
        self.visit(|name, t| f(name, t));
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<F>)) {
        macro_rules! cell {
            ($f:expr, $prefix:literal, $cell:expr) => {
                $f(concat!($prefix, ".w_z"), &mut $cell.w_z);
                $f(concat!($prefix, ".u_z"), &mut $cell.u_z);
                $f(concat!($prefix, ".w_r"), &mut $cell.w_r);
                $f(concat!($prefix, ".u_r"), &mut $cell.u_r);
                $f(concat!($prefix, ".w_h"), &mut $cell.w_h);
                $f(concat!($prefix, ".u_h"), &mut $cell.u_h);
            };
        }
        f("src_embed", &mut self.src_embed.weights);
        f("tgt_embed", &mut self.tgt_embed.weights);
        cell!(f, "enc_fwd", self.enc_fwd);
        cell!(f, "enc_bwd", self.enc_bwd);
        f("w_init", &mut self.w_init);
        cell!(f, "dec", self.dec);
        f("attn.w_s", &mut self.attn.w_s);
        f("attn.w_h", &mut self.attn.w_h);
        f("attn.w_y", &mut self.attn.w_y);
        f("attn.w_e", &mut self.attn.w_e);
        if let Some(t) = self.attn.w_cov_gru.as_mut() {
            f("attn.w_cov_gru", t);
        }
        if let Some(t) = self.attn.w_cov_sub.as_mut() {
            f("attn.w_cov_sub", t);
        }
        f("out.w_o", &mut self.out.w_o);
        f("out.w_oy", &mut self.out.w_oy);
        f("out.w_v", &mut self.out.w_v);
        if let Some(g) = self.cov_gru.as_mut() {
            f("cov_gru.table", &mut g.table.weights);
            f("cov_gru.w_zy", &mut g.w_zy);
            f("cov_gru.w_za", &mut g.w_za);
            f("cov_gru.u_z", &mut g.u_z);
            f("cov_gru.w_ry", &mut g.w_ry);
            f("cov_gru.w_ra", &mut g.w_ra);
            f("cov_gru.u_r", &mut g.u_r);
            f("cov_gru.w_y", &mut g.w_y);
            f("cov_gru.w_a", &mut g.w_a);
            f("cov_gru.u", &mut g.u);
        }
        if let Some(s) = self.cov_sub.as_mut() {
            f("cov_sub.table", &mut s.table.weights);
            f("cov_sub.w_y2c", &mut s.w_y2c);
        }
    }

    fn visit(&self, mut f: impl FnMut(&str, &Tensor<F>)) {
        // Same order as for_each_mut; keep the two in sync.
        macro_rules! cell {
            ($f:expr, $prefix:literal, $cell:expr) => {
                $f(concat!($prefix, ".w_z"), &$cell.w_z);
                $f(concat!($prefix, ".u_z"), &$cell.u_z);
                $f(concat!($prefix, ".w_r"), &$cell.w_r);
                $f(concat!($prefix, ".u_r"), &$cell.u_r);
                $f(concat!($prefix, ".w_h"), &$cell.w_h);
                $f(concat!($prefix, ".u_h"), &$cell.u_h);
            };
        }
        f("src_embed", &self.src_embed.weights);
        f("tgt_embed", &self.tgt_embed.weights);
        cell!(f, "enc_fwd", self.enc_fwd);
        cell!(f, "enc_bwd", self.enc_bwd);
        f("w_init", &self.w_init);
        cell!(f, "dec", self.dec);
        f("attn.w_s", &self.attn.w_s);
        f("attn.w_h", &self.attn.w_h);
        f("attn.w_y", &self.attn.w_y);
        f("attn.w_e", &self.attn.w_e);
        if let Some(t) = self.attn.w_cov_gru.as_ref() {
            f("attn.w_cov_gru", t);
        }
        if let Some(t) = self.attn.w_cov_sub.as_ref() {
            f("attn.w_cov_sub", t);
        }
        f("out.w_o", &self.out.w_o);
        f("out.w_oy", &self.out.w_oy);
        f("out.w_v", &self.out.w_v);
        if let Some(g) = self.cov_gru.as_ref() {
            f("cov_gru.table", &g.table.weights);
            f("cov_gru.w_zy", &g.w_zy);
            f("cov_gru.w_za", &g.w_za);
            f("cov_gru.u_z", &g.u_z);
            f("cov_gru.w_ry", &g.w_ry);
            f("cov_gru.w_ra", &g.w_ra);
            f("cov_gru.u_r", &g.u_r);
            f("cov_gru.w_y", &g.w_y);
            f("cov_gru.w_a", &g.w_a);
            f("cov_gru.u", &g.u);
        }
        if let Some(s) = self.cov_sub.as_ref() {
            f("cov_sub.table", &s.table.weights);
            f("cov_sub.w_y2c", &s.w_y2c);
        }
    }

    /// Tensors in fixed field order, for gradient checking.
    pub fn flatten(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::new();
        self.for_each(|name, t| out.push((name.to_string(), t.clone())));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.len());
        n
    }

    /// Register every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<F>) -> ModelVars {
        let mut vars = Vec::new();
        self.for_each(|_, t| vars.push(tape.leaf(t.clone().with_grad())));
        ModelVars::from_ordered(&self.dims, &vars)
    }

    /// As `bind`, but without gradient tracking (decoding, evaluation).
    pub fn bind_frozen(&self, tape: &mut Tape<F>) -> ModelVars {
        let mut vars = Vec::new();
        self.for_each(|_, t| vars.push(tape.leaf(t.clone())));
        ModelVars::from_ordered(&self.dims, &vars)
    }
}

impl ModelVars {
    /// Rebuild the bundle from leaves laid out in the fixed field order
    /// (the order `for_each` visits). Used by `bind` and by gradient checks
    /// that register the flattened parameter list themselves.
    pub fn from_ordered(dims: &ModelDims, vars: &[Var]) -> ModelVars {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("parameter list too short for mode");
        let cell = |next: &mut dyn FnMut() -> Var| GruCellVars {
            w_z: next(),
            u_z: next(),
            w_r: next(),
            u_r: next(),
            w_h: next(),
            u_h: next(),
        };
        let src_embed = next();
        let tgt_embed = next();
        let enc_fwd = cell(&mut next);
        let enc_bwd = cell(&mut next);
        let w_init = next();
        let dec = cell(&mut next);
        let attn = AttentionVars {
            w_s: next(),
            w_h: next(),
            w_y: next(),
            w_e: next(),
            w_cov_gru: dims.mode.uses_gru().then(&mut next),
            w_cov_sub: dims.mode.uses_sub().then(&mut next),
        };
        let out = OutputVars {
            w_o: next(),
            w_oy: next(),
            w_v: next(),
        };
        let cov_gru = dims.mode.uses_gru().then(|| CovGruVars {
            table: next(),
            w_zy: next(),
            w_za: next(),
            u_z: next(),
            w_ry: next(),
            w_ra: next(),
            u_r: next(),
            w_y: next(),
            w_a: next(),
            u: next(),
        });
        let cov_sub = dims.mode.uses_sub().then(|| CovSubVars {
            table: next(),
            w_y2c: next(),
        });
        assert!(it.next().is_none(), "parameter list too long for mode");
        ModelVars {
            src_embed,
            tgt_embed,
            enc_fwd,
            enc_bwd,
            w_init,
            dec,
            attn,
            out,
            cov_gru,
            cov_sub,
        }
    }
}

//! Neural layers composed from tape operations.
//!
//! Each layer owns [`ParamId`]s registered under a dotted name prefix
//! (`"decoder.gate.out.w"`), so optimizer groups and checkpoints can address
//! parameters by name. Layers are plain data; all state flows through the
//! [`Tape`] passed to their apply methods.

use rand::Rng;

use crate::tape::{ParamId, ParamSet, Tape, Var};

/// Negative slope shared by every leaky ReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Affine map `x W + b` with `W: (in, out)`, `b: (1, out)`.
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = ps.register(format!("{name}.w"), in_dim, out_dim, in_dim, rng);
        let b = bias.then(|| ps.register(format!("{name}.b"), 1, out_dim, in_dim, rng));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn apply(&self, tape: &Tape, ps: &ParamSet, x: Var) -> Var {
        let y = tape.matmul(x, tape.param(ps, self.w));
        match self.b {
            Some(b) => tape.add_row(y, tape.param(ps, b)),
            None => y,
        }
    }
}

/// Two-layer feed-forward block: `W2 lrelu(W1 x + b1) + b2`.
///
/// The hidden width always equals the model dimension, so stacked blocks stay
/// residual-compatible.
pub struct Ffn {
    first: Linear,
    second: Linear,
}

impl Ffn {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Self {
        Ffn {
            first: Linear::new(ps, rng, &format!("{name}.first"), in_dim, hidden, true),
            second: Linear::new(ps, rng, &format!("{name}.second"), hidden, out_dim, true),
        }
    }

    pub fn apply(&self, tape: &Tape, ps: &ParamSet, x: Var) -> Var {
        let h = tape.leaky_relu(self.first.apply(tape, ps, x), LEAKY_SLOPE);
        self.second.apply(tape, ps, h)
    }
}

/// Single-direction LSTM cell. Gate order in the fused weight: i, f, g, o.
pub struct LstmCell {
    wih: ParamId,
    whh: ParamId,
    b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        LstmCell {
            wih: ps.register(format!("{name}.wih"), in_dim, 4 * hidden, in_dim, rng),
            whh: ps.register(format!("{name}.whh"), hidden, 4 * hidden, hidden, rng),
            b: ps.register(format!("{name}.b"), 1, 4 * hidden, hidden, rng),
            hidden,
        }
    }

    /// One step over a batch of rows: `x (n,in)`, `h`/`c (n,hidden)`.
    pub fn step(&self, tape: &Tape, ps: &ParamSet, x: Var, h: Var, c: Var) -> (Var, Var) {
        let d = self.hidden;
        let pre = tape.add_row(
            tape.add(
                tape.matmul(x, tape.param(ps, self.wih)),
                tape.matmul(h, tape.param(ps, self.whh)),
            ),
            tape.param(ps, self.b),
        );
        let i = tape.sigmoid(tape.slice_cols(pre, 0..d));
        let f = tape.sigmoid(tape.slice_cols(pre, d..2 * d));
        let g = tape.tanh(tape.slice_cols(pre, 2 * d..3 * d));
        let o = tape.sigmoid(tape.slice_cols(pre, 3 * d..4 * d));
        let c_next = tape.add(tape.mul(f, c), tape.mul(i, g));
        let h_next = tape.mul(o, tape.tanh(c_next));
        (h_next, c_next)
    }
}

/// Per-position outputs of a [`BiLstm`] run.
pub struct BiLstmOut {
    /// `(T, 2*hidden)`: forward and backward states concatenated per position.
    pub states: Var,
    /// `(1, 2*hidden)`: last forward state next to last backward state.
    pub final_state: Var,
}

/// Bidirectional LSTM over the rows of a sequence matrix.
pub struct BiLstm {
    fwd: LstmCell,
    bwd: LstmCell,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        BiLstm {
            fwd: LstmCell::new(ps, rng, &format!("{name}.fwd"), in_dim, hidden),
            bwd: LstmCell::new(ps, rng, &format!("{name}.bwd"), in_dim, hidden),
            hidden,
        }
    }

    /// Runs both directions over `xs (T, in)`, `T >= 1`, zero initial state.
    pub fn run(&self, tape: &Tape, ps: &ParamSet, xs: Var) -> BiLstmOut {
        let d = self.hidden;
        self.run_from(tape, ps, xs, tape.zeros(1, d), tape.zeros(1, d))
    }

    /// Runs both directions with given initial hidden states (cell states
    /// start at zero).
    pub fn run_from(
        &self,
        tape: &Tape,
        ps: &ParamSet,
        xs: Var,
        h0_fwd: Var,
        h0_bwd: Var,
    ) -> BiLstmOut {
        let (t_len, _) = tape.shape(xs);
        assert!(t_len >= 1, "BiLstm: empty sequence");
        let d = self.hidden;

        let mut h = h0_fwd;
        let mut c = tape.zeros(1, d);
        let mut fwd_states = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let (h2, c2) = self.fwd.step(tape, ps, tape.row(xs, t), h, c);
            h = h2;
            c = c2;
            fwd_states.push(h);
        }
        let fwd_last = h;

        let mut h = h0_bwd;
        let mut c = tape.zeros(1, d);
        let mut bwd_states = Vec::with_capacity(t_len);
        for t in (0..t_len).rev() {
            let (h2, c2) = self.bwd.step(tape, ps, tape.row(xs, t), h, c);
            h = h2;
            c = c2;
            bwd_states.push(h);
        }
        bwd_states.reverse();
        let bwd_last = bwd_states[0];

        let rows: Vec<Var> = (0..t_len)
            .map(|t| tape.concat_cols(&[fwd_states[t], bwd_states[t]]))
            .collect();
        BiLstmOut {
            states: tape.concat_rows(&rows),
            final_state: tape.concat_cols(&[fwd_last, bwd_last]),
        }
    }
}

/// Gated recurrent unit cell, used by the recurrent variant of the schema
/// interaction layer.
pub struct GruCell {
    wiz: ParamId,
    whz: ParamId,
    bz: ParamId,
    wir: ParamId,
    whr: ParamId,
    br: ParamId,
    win: ParamId,
    whn: ParamId,
    bn: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        GruCell {
            wiz: ps.register(format!("{name}.wiz"), in_dim, hidden, in_dim, rng),
            whz: ps.register(format!("{name}.whz"), hidden, hidden, hidden, rng),
            bz: ps.register(format!("{name}.bz"), 1, hidden, hidden, rng),
            wir: ps.register(format!("{name}.wir"), in_dim, hidden, in_dim, rng),
            whr: ps.register(format!("{name}.whr"), hidden, hidden, hidden, rng),
            br: ps.register(format!("{name}.br"), 1, hidden, hidden, rng),
            win: ps.register(format!("{name}.win"), in_dim, hidden, in_dim, rng),
            whn: ps.register(format!("{name}.whn"), hidden, hidden, hidden, rng),
            bn: ps.register(format!("{name}.bn"), 1, hidden, hidden, rng),
            hidden,
        }
    }

    /// One step over a batch of rows: `x (n,in)`, `h (n,hidden)`.
    pub fn step(&self, tape: &Tape, ps: &ParamSet, x: Var, h: Var) -> Var {
        let z = tape.sigmoid(tape.add_row(
            tape.add(
                tape.matmul(x, tape.param(ps, self.wiz)),
                tape.matmul(h, tape.param(ps, self.whz)),
            ),
            tape.param(ps, self.bz),
        ));
        let r = tape.sigmoid(tape.add_row(
            tape.add(
                tape.matmul(x, tape.param(ps, self.wir)),
                tape.matmul(h, tape.param(ps, self.whr)),
            ),
            tape.param(ps, self.br),
        ));
        let n = tape.tanh(tape.add_row(
            tape.add(
                tape.matmul(x, tape.param(ps, self.win)),
                tape.matmul(tape.mul(r, h), tape.param(ps, self.whn)),
            ),
            tape.param(ps, self.bn),
        ));
        // h' = (1 - z) * n + z * h
        let ones = tape.constant(ndarray::Array2::from_elem(tape.shape(z), 1.0));
        tape.add(tape.mul(tape.sub(ones, z), n), tape.mul(z, h))
    }
}

/// Trainable token embedding table.
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        vocab: usize,
        dim: usize,
    ) -> Self {
        Embedding {
            table: ps.register(format!("{name}.table"), vocab, dim, dim, rng),
            dim,
        }
    }

    /// Embedding table with explicit initial rows (for file-backed vectors).
    pub fn with_values(ps: &mut ParamSet, name: &str, values: ndarray::Array2<f64>) -> Self {
        let dim = values.ncols();
        Embedding {
            table: ps.register_with(format!("{name}.table"), values),
            dim,
        }
    }

    /// Looks up `indices` as rows, yielding `(len, dim)`.
    pub fn lookup(&self, tape: &Tape, ps: &ParamSet, indices: &[usize]) -> Var {
        tape.gather_rows(tape.param(ps, self.table), indices)
    }
}

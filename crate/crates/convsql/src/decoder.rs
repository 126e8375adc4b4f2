//! SQL generation: recurrent decoder with attention over text tokens,
//! schema items, and the previous turn's query, gated into one output
//! distribution over the union of three vocabularies.
//!
//! At each step the gate squashes the decoder state and attention contexts
//! into a probe vector, scores every reserved word, schema item, and
//! previous-query token, scales each channel's logits by its gate value, and
//! normalizes everything under a single shared softmax. Tokens reachable
//! through several channels (FROM may be reserved and in the previous
//! query) are merged by summing their probabilities.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{BiLstm, Embedding, Linear, LstmCell};
use crate::tape::{ParamId, ParamSet, Tape, Var};
use crate::text::EmbeddingProvider;

/// Bidirectional encoder over the previous turn's predicted query.
pub struct PrevQueryEncoder {
    lstm: BiLstm,
}

impl PrevQueryEncoder {
    pub fn new(ps: &mut ParamSet, rng: &mut impl Rng, embed_dim: usize, d: usize) -> Self {
        PrevQueryEncoder {
            lstm: BiLstm::new(ps, rng, "prev_query.lstm", embed_dim, d / 2),
        }
    }

    /// `(M, d)`: one vector per previous-query token.
    pub fn encode(
        &self,
        tape: &Tape,
        ps: &ParamSet,
        provider: &EmbeddingProvider,
        tokens: &[String],
    ) -> Result<Var> {
        assert!(!tokens.is_empty(), "encode_prev_query: empty query");
        let embedded = provider.embed(tape, ps, tokens)?;
        Ok(self.lstm.run(tape, ps, embedded).states)
    }
}

/// The three output channels, in tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feed {
    Reserved(usize),
    Schema(usize),
    Query(usize),
}

/// Which channels can produce a surface token.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SourceTags {
    pub res: bool,
    pub sch: bool,
    pub que: bool,
}

/// One merged output token.
#[derive(Debug, Clone)]
pub struct OutputEntry {
    pub surface: String,
    pub probability: f64,
    pub tags: SourceTags,
    /// First channel able to produce the token; used for input feeding.
    pub feed: Feed,
}

/// Output distribution after merging duplicate surfaces.
#[derive(Debug, Clone)]
pub struct OutputDistribution {
    pub entries: Vec<OutputEntry>,
}

impl OutputDistribution {
    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.probability).sum()
    }

    /// Highest-probability entry; ties go to the earlier entry, which is the
    /// reserved-before-schema-before-query, then lower-index order.
    pub fn best(&self) -> &OutputEntry {
        let mut best = &self.entries[0];
        for e in &self.entries[1..] {
            if e.probability > best.probability {
                best = e;
            }
        }
        best
    }

    pub fn probability_of(&self, surface: &str) -> f64 {
        self.entries
            .iter()
            .find(|e| e.surface == surface)
            .map(|e| e.probability)
            .unwrap_or(0.0)
    }
}

/// The token strings behind each flat logit position: reserved vocabulary,
/// then schema item surfaces, then previous-query tokens.
pub struct OutputSpace<'a> {
    pub reserved: &'a [String],
    pub items: &'a [String],
    pub prev_query: &'a [String],
}

impl<'a> OutputSpace<'a> {
    pub fn len(&self) -> usize {
        self.reserved.len() + self.items.len() + self.prev_query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn surface_at(&self, flat: usize) -> &str {
        let (v, s) = (self.reserved.len(), self.items.len());
        if flat < v {
            &self.reserved[flat]
        } else if flat < v + s {
            &self.items[flat - v]
        } else {
            &self.prev_query[flat - v - s]
        }
    }

    /// Every flat position whose surface equals `surface`.
    pub fn positions_of(&self, surface: &str) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.surface_at(i) == surface)
            .collect()
    }

    fn feed_of(&self, flat: usize) -> Feed {
        let (v, s) = (self.reserved.len(), self.items.len());
        if flat < v {
            Feed::Reserved(flat)
        } else if flat < v + s {
            Feed::Schema(flat - v)
        } else {
            Feed::Query(flat - v - s)
        }
    }

    /// First channel able to produce `surface`: reserved, then schema, then
    /// previous query.
    pub fn feed_for(&self, surface: &str) -> Option<Feed> {
        self.positions_of(surface).first().map(|&i| self.feed_of(i))
    }
}

/// Recurrent decoder state plus the fed-back attention context.
pub struct DecoderState {
    h: Var,
    c: Var,
    prev_context: Var,
}

/// Attention outputs of one decoder step.
pub struct StepOut {
    /// `(1, d)` decoder output state o_j.
    pub o: Var,
    /// `(1, 5d)` concatenated text, schema, query contexts c_j.
    pub context: Var,
    /// `(1, T)` attention over text tokens.
    pub text_weights: Var,
    /// `(1, |S|)` attention over schema items.
    pub schema_weights: Var,
    /// `(1, M)` attention over previous-query tokens, when present.
    pub query_weights: Option<Var>,
}

/// Gate values and the probe vector they derive from.
pub struct GateOut {
    /// `(1, d)` probe õ_j reused by every output scorer.
    pub o_tilde: Var,
    /// `(1,1)` sigmoid gates for the three channels.
    pub res: Var,
    pub sch: Var,
    pub que: Var,
}

pub struct Decoder {
    cell: LstmCell,
    init: Linear,
    att_text: ParamId,
    att_schema: ParamId,
    att_query: ParamId,
    gate_o: Linear,
    gate_res: Linear,
    gate_sch: Linear,
    gate_que: Linear,
    out_res: Linear,
    out_sch: ParamId,
    out_que: ParamId,
    out_embed: Embedding,
    feed_schema: Linear,
    feed_query: Linear,
    sos: ParamId,
    pub d: usize,
}

impl Decoder {
    pub fn new(ps: &mut ParamSet, rng: &mut impl Rng, d: usize, reserved_len: usize) -> Self {
        assert!(reserved_len > 0, "empty reserved vocabulary");
        Decoder {
            // Input: previous token vector (d) + fed-back context (5d).
            cell: LstmCell::new(ps, rng, "decoder.cell", 6 * d, d),
            init: Linear::new(ps, rng, "decoder.init", d / 2, d, true),
            att_text: ps.register("decoder.att.text", d, 2 * d, d, rng),
            att_schema: ps.register("decoder.att.schema", d, 2 * d, d, rng),
            att_query: ps.register("decoder.att.query", d, d, d, rng),
            gate_o: Linear::new(ps, rng, "decoder.gate.o", 6 * d, d, true),
            gate_res: Linear::new(ps, rng, "decoder.gate.res", d, 1, true),
            gate_sch: Linear::new(ps, rng, "decoder.gate.sch", d, 1, true),
            gate_que: Linear::new(ps, rng, "decoder.gate.que", d, 1, true),
            out_res: Linear::new(ps, rng, "decoder.out.res", d, d, true),
            out_sch: ps.register("decoder.out.sch", 2 * d, d, 2 * d, rng),
            out_que: ps.register("decoder.out.que", d, d, d, rng),
            out_embed: Embedding::new(ps, rng, "decoder.out_embed", reserved_len, d),
            feed_schema: Linear::new(ps, rng, "decoder.feed.schema", 2 * d, d, true),
            feed_query: Linear::new(ps, rng, "decoder.feed.query", d, d, true),
            sos: ps.register("decoder.sos", 1, d, d, rng),
            d,
        }
    }

    /// Fresh state from the text encoder's interaction state.
    pub fn begin(&self, tape: &Tape, ps: &ParamSet, dec_init: Var) -> DecoderState {
        DecoderState {
            h: self.init.apply(tape, ps, dec_init),
            c: tape.zeros(1, self.d),
            prev_context: tape.zeros(1, 5 * self.d),
        }
    }

    /// Start-of-sequence input vector.
    pub fn sos_vector(&self, tape: &Tape, ps: &ParamSet) -> Var {
        tape.param(ps, self.sos)
    }

    /// Input vector for the token chosen at the previous step.
    pub fn feed_vector(
        &self,
        tape: &Tape,
        ps: &ParamSet,
        feed: Feed,
        g_tilde: Var,
        q: Option<Var>,
    ) -> Var {
        match feed {
            Feed::Reserved(i) => self.out_embed.lookup(tape, ps, &[i]),
            Feed::Schema(i) => self.feed_schema.apply(tape, ps, tape.row(g_tilde, i)),
            Feed::Query(i) => {
                let q = q.expect("query feed requires a previous query");
                self.feed_query.apply(tape, ps, tape.row(q, i))
            }
        }
    }

    /// One recurrent step with attention over the three sources. `q` is the
    /// previous-query encoding, absent at turn 1 (its context is zero).
    pub fn step(
        &self,
        tape: &Tape,
        ps: &ParamSet,
        state: &DecoderState,
        tok_vec: Var,
        h_tilde: Var,
        g_tilde: Var,
        q: Option<Var>,
    ) -> (DecoderState, StepOut) {
        assert_eq!(tape.shape(tok_vec), (1, self.d), "token vector width");
        let input = tape.concat_cols(&[tok_vec, state.prev_context]);
        let (h, c) = self.cell.step(tape, ps, input, state.h, state.c);
        let o = h;

        let attend = |w: ParamId, source: Var| {
            let scores = tape.matmul(tape.matmul(o, tape.param(ps, w)), tape.transpose(source));
            let weights = tape.softmax_rows(scores);
            (weights, tape.matmul(weights, source))
        };
        let (text_weights, text_ctx) = attend(self.att_text, h_tilde);
        let (schema_weights, schema_ctx) = attend(self.att_schema, g_tilde);
        let (query_weights, query_ctx) = match q {
            Some(q) => {
                let (w, ctx) = attend(self.att_query, q);
                (Some(w), ctx)
            }
            None => (None, tape.zeros(1, self.d)),
        };
        let context = tape.concat_cols(&[text_ctx, schema_ctx, query_ctx]);
        let next = DecoderState {
            h,
            c,
            prev_context: context,
        };
        (
            next,
            StepOut {
                o,
                context,
                text_weights,
                schema_weights,
                query_weights,
            },
        )
    }

    /// Gate values: õ_j = tanh(W_o [o_j; c_j] + b_o), ζ_m = σ(W_m õ_j + b_m).
    pub fn gate(&self, tape: &Tape, ps: &ParamSet, o: Var, context: Var) -> GateOut {
        let o_tilde = tape.tanh(self.gate_o.apply(tape, ps, tape.concat_cols(&[o, context])));
        GateOut {
            res: tape.sigmoid(self.gate_res.apply(tape, ps, o_tilde)),
            sch: tape.sigmoid(self.gate_sch.apply(tape, ps, o_tilde)),
            que: tape.sigmoid(self.gate_que.apply(tape, ps, o_tilde)),
            o_tilde,
        }
    }

    /// Flat probabilities over reserved ++ schema ++ previous-query logits,
    /// all under one shared softmax. Channel logits are scaled by their gate
    /// before normalization.
    pub fn flat_probabilities(
        &self,
        tape: &Tape,
        ps: &ParamSet,
        gate: &GateOut,
        g_tilde: Var,
        q: Option<Var>,
    ) -> Var {
        let res_scores = tape.matmul(
            self.out_res.apply(tape, ps, gate.o_tilde),
            tape.transpose(tape.param(ps, self.out_embed.table)),
        );
        let mut segments = vec![tape.mul_scalar(res_scores, gate.res)];

        let probe = tape.transpose(gate.o_tilde);
        let sch_scores = tape.transpose(tape.matmul(
            tape.matmul(g_tilde, tape.param(ps, self.out_sch)),
            probe,
        ));
        segments.push(tape.mul_scalar(sch_scores, gate.sch));

        if let Some(q) = q {
            let que_scores =
                tape.transpose(tape.matmul(tape.matmul(q, tape.param(ps, self.out_que)), probe));
            segments.push(tape.mul_scalar(que_scores, gate.que));
        }
        tape.softmax_rows(tape.concat_cols(&segments))
    }

    /// Merged distribution over surface tokens, from the flat probabilities
    /// of [`Decoder::flat_probabilities`]. `space` must align with the flat
    /// positions.
    pub fn output_distribution(
        &self,
        tape: &Tape,
        flat: Var,
        space: &OutputSpace,
    ) -> OutputDistribution {
        let probs = tape.value(flat);
        assert_eq!(probs.ncols(), space.len(), "output space misaligned");
        let mut entries: Vec<OutputEntry> = Vec::new();
        for i in 0..space.len() {
            let surface = space.surface_at(i);
            let p = probs[(0, i)];
            let tag = space.feed_of(i);
            match entries.iter_mut().find(|e| e.surface == surface) {
                Some(e) => {
                    e.probability += p;
                    apply_tag(&mut e.tags, tag);
                }
                None => {
                    let mut tags = SourceTags::default();
                    apply_tag(&mut tags, tag);
                    entries.push(OutputEntry {
                        surface: surface.to_string(),
                        probability: p,
                        tags,
                        feed: tag,
                    });
                }
            }
        }
        OutputDistribution { entries }
    }

    /// Per-step negative log probability of `gold`, summing the probability
    /// mass of every position whose surface matches (the merged view).
    pub fn step_loss(
        &self,
        tape: &Tape,
        flat_probs: Var,
        space: &OutputSpace,
        gold: &str,
    ) -> Result<Var> {
        let positions = space.positions_of(gold);
        if positions.is_empty() {
            return Err(Error::Training(format!(
                "gold token `{gold}` is not representable by any output channel"
            )));
        }
        Ok(tape.scale(tape.ln(tape.sum_cols(flat_probs, positions)), -1.0))
    }

    /// Greedy decoding until EOS or `max_len` tokens. Ties break toward the
    /// earlier flat position: reserved, then schema, then query, then index.
    #[allow(clippy::too_many_arguments)]
    pub fn greedy_decode(
        &self,
        tape: &Tape,
        ps: &ParamSet,
        dec_init: Var,
        h_tilde: Var,
        g_tilde: Var,
        q: Option<Var>,
        space: &OutputSpace,
        eos: &str,
        max_len: usize,
    ) -> Vec<String> {
        assert!(max_len >= 1, "max_len must be at least 1");
        let mut state = self.begin(tape, ps, dec_init);
        let mut tok_vec = self.sos_vector(tape, ps);
        let mut out = Vec::new();
        while out.len() < max_len {
            let (next, step) = self.step(tape, ps, &state, tok_vec, h_tilde, g_tilde, q);
            state = next;
            let gate = self.gate(tape, ps, step.o, step.context);
            let flat = self.flat_probabilities(tape, ps, &gate, g_tilde, q);
            let dist = self.output_distribution(tape, flat, space);
            let best = dist.best();
            if best.surface == eos {
                break;
            }
            out.push(best.surface.clone());
            tok_vec = self.feed_vector(tape, ps, best.feed, g_tilde, q);
        }
        out
    }
}

fn apply_tag(tags: &mut SourceTags, feed: Feed) {
    match feed {
        Feed::Reserved(_) => tags.res = true,
        Feed::Schema(_) => tags.sch = true,
        Feed::Query(_) => tags.que = true,
    }
}

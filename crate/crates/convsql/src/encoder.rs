//! Schema encoding: base item embeddings, cross-turn interaction layers, and
//! intra-turn graph layers.
//!
//! Each turn the schema items are re-encoded. A cross-turn layer scores the
//! current layer's states against themselves (`W1`) and against the previous
//! turn's final states (`W2`), normalizes both score sets under one joint
//! softmax, and applies a residual feed-forward update. An intra-turn layer
//! is the single-branch version of the same pattern (`W3`). All attention is
//! masked to the schema graph; the previous-turn branch uses the
//! distance-<=-1 mask, which the graph module proves equal to the adjacency
//! mask, but the two gate different key/value sets so they stay separate
//! arguments.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use crate::data::SchemaItem;
use crate::error::{Error, Result};
use crate::nn::{BiLstm, Ffn, GruCell};
use crate::tape::{ParamId, ParamSet, Tape, Var};
use crate::text::EmbeddingProvider;

/// Model variants of the schema encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoCrossTurn,
    NoIntraTurn,
    GruInteraction,
    FullyConnected,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_cross_turn" => Ok(Variant::NoCrossTurn),
            "no_intra_turn" => Ok(Variant::NoIntraTurn),
            "gru_interaction" => Ok(Variant::GruInteraction),
            "fully_connected" => Ok(Variant::FullyConnected),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected full, no_cross_turn, no_intra_turn, \
                 gru_interaction, fully_connected)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Full => "full",
            Variant::NoCrossTurn => "no_cross_turn",
            Variant::NoIntraTurn => "no_intra_turn",
            Variant::GruInteraction => "gru_interaction",
            Variant::FullyConnected => "fully_connected",
        };
        f.write_str(s)
    }
}

/// Sizing and depth of the schema encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    /// Cross-turn layer count.
    pub l1: usize,
    /// Intra-turn layer count.
    pub l2: usize,
    /// Cross-turn attention dimension.
    pub d1: usize,
    /// Intra-turn attention dimension.
    pub d2: usize,
    pub heads: usize,
    pub variant: Variant,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            l1: 2,
            l2: 1,
            d1: 300,
            d2: 300,
            heads: 6,
            variant: Variant::Full,
        }
    }
}

impl EncoderConfig {
    /// The shared model dimension. Residual connections chain r through both
    /// layer stacks, so the two attention dimensions must agree.
    pub fn dim(&self) -> usize {
        self.d1
    }

    pub fn validate(&self) -> Result<()> {
        if self.d1 != self.d2 {
            return Err(Error::Config(format!(
                "d1 ({}) must equal d2 ({}): residual connections carry one width end to end",
                self.d1, self.d2
            )));
        }
        if self.d1 % self.heads != 0 {
            return Err(Error::Config(format!(
                "dimension {} not divisible by {} heads",
                self.d1, self.heads
            )));
        }
        if self.d1 % 4 != 0 {
            return Err(Error::Config(format!(
                "dimension {} must be divisible by 4 (text encoder splits it twice)",
                self.d1
            )));
        }
        if self.l1 < 1 {
            return Err(Error::Config("l1 must be at least 1".into()));
        }
        Ok(())
    }
}

/// All per-turn outputs of the schema encoder.
pub struct SchemaTurnState {
    /// Cross-turn chain: `z_layers[0]` is the base embedding r.
    pub z_layers: Vec<Var>,
    /// Intra-turn chain: `g_layers[0]` is the last cross-turn output.
    pub g_layers: Vec<Var>,
    /// Final representation `g_final`, fed to co-attention and to the next
    /// turn's cross-turn layers.
    pub g_final: Var,
}

/// Base encoder: one bidirectional pass over each item's word tokens, the
/// item vector being the mean of the per-position states.
pub struct SchemaItemEncoder {
    lstm: BiLstm,
}

impl SchemaItemEncoder {
    pub fn new(ps: &mut ParamSet, rng: &mut impl Rng, embed_dim: usize, d: usize) -> Self {
        assert!(d % 2 == 0, "model dimension must be even");
        SchemaItemEncoder {
            lstm: BiLstm::new(ps, rng, "schema_items.lstm", embed_dim, d / 2),
        }
    }

    /// Encodes all items into an `(|S|, d)` matrix.
    pub fn encode(
        &self,
        tape: &Tape,
        ps: &ParamSet,
        provider: &EmbeddingProvider,
        items: &[SchemaItem],
    ) -> Result<Var> {
        assert!(!items.is_empty(), "schema has no items");
        let mut rows = Vec::with_capacity(items.len());
        for item in items {
            assert!(!item.tokens.is_empty(), "schema item with no tokens");
            let embedded = provider.embed(tape, ps, &item.tokens)?;
            let out = self.lstm.run(tape, ps, embedded);
            rows.push(tape.mean_rows(out.states));
        }
        Ok(tape.concat_rows(&rows))
    }
}

struct CrossHead {
    u_ffn: Ffn,
    g_ffn: Ffn,
    w1: ParamId,
    w2: ParamId,
}

/// One cross-turn schema interaction layer.
pub struct CrossTurnLayer {
    heads: Vec<CrossHead>,
    post: Ffn,
    d: usize,
}

impl CrossTurnLayer {
    pub fn new(ps: &mut ParamSet, rng: &mut impl Rng, name: &str, d: usize, heads: usize) -> Self {
        let dh = d / heads;
        let heads = (0..heads)
            .map(|k| CrossHead {
                u_ffn: Ffn::new(ps, rng, &format!("{name}.head.{k}.u_ffn"), d, d, dh),
                g_ffn: Ffn::new(ps, rng, &format!("{name}.head.{k}.g_ffn"), d, d, dh),
                w1: ps.register(format!("{name}.head.{k}.w1"), dh, dh, dh, rng),
                w2: ps.register(format!("{name}.head.{k}.w2"), dh, dh, dh, rng),
            })
            .collect();
        CrossTurnLayer {
            heads,
            post: Ffn::new(ps, rng, &format!("{name}.post"), d, d, d),
            d,
        }
    }

    /// `z` is the previous layer's output; `g_prev_turn` the previous turn's
    /// final representation (absent at turn 1). `current_mask` gates the
    /// current-side scores, `prev_mask` the previous-turn scores.
    pub fn forward(
        &self,
        tape: &Tape,
        ps: &ParamSet,
        z: Var,
        g_prev_turn: Option<Var>,
        current_mask: &Rc<Array2<bool>>,
        prev_mask: &Rc<Array2<bool>>,
    ) -> Var {
        let (s, d) = tape.shape(z);
        assert_eq!(d, self.d, "cross layer width mismatch");
        assert_eq!(current_mask.dim(), (s, s), "current mask shape mismatch");
        let scale = 1.0 / (self.d as f64).sqrt();

        let mut head_outputs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let u = head.u_ffn.apply(tape, ps, z);
            let xi = tape.scale(
                tape.matmul(tape.matmul(u, tape.param(ps, head.w1)), tape.transpose(u)),
                scale,
            );
            let context = match g_prev_turn {
                Some(g_prev) => {
                    assert_eq!(prev_mask.dim(), (s, s), "prev mask shape mismatch");
                    let u_hat = head.g_ffn.apply(tape, ps, g_prev);
                    let xi_hat = tape.scale(
                        tape.matmul(
                            tape.matmul(u, tape.param(ps, head.w2)),
                            tape.transpose(u_hat),
                        ),
                        scale,
                    );
                    // One softmax over both score sets: the Eq. 2 denominator
                    // sums current and previous-turn terms together.
                    let joint_scores = tape.concat_cols(&[xi, xi_hat]);
                    let joint_mask = Rc::new(hstack_masks(current_mask, prev_mask));
                    let weights = tape.masked_softmax_rows(joint_scores, joint_mask);
                    let values = tape.concat_rows(&[u, u_hat]);
                    tape.matmul(weights, values)
                }
                None => {
                    let alpha = tape.masked_softmax_rows(xi, Rc::clone(current_mask));
                    tape.matmul(alpha, u)
                }
            };
            head_outputs.push(context);
        }
        let u_tilde = tape.concat_cols(&head_outputs);
        tape.add(z, self.post.apply(tape, ps, tape.add(z, u_tilde)))
    }
}

struct IntraHead {
    mu_ffn: Ffn,
    w3: ParamId,
}

/// One intra-turn schema graph layer: the single-branch counterpart of the
/// cross-turn layer.
pub struct IntraTurnLayer {
    heads: Vec<IntraHead>,
    post: Ffn,
    d: usize,
}

impl IntraTurnLayer {
    pub fn new(ps: &mut ParamSet, rng: &mut impl Rng, name: &str, d: usize, heads: usize) -> Self {
        let dh = d / heads;
        let heads = (0..heads)
            .map(|k| IntraHead {
                mu_ffn: Ffn::new(ps, rng, &format!("{name}.head.{k}.mu_ffn"), d, d, dh),
                w3: ps.register(format!("{name}.head.{k}.w3"), dh, dh, dh, rng),
            })
            .collect();
        IntraTurnLayer {
            heads,
            post: Ffn::new(ps, rng, &format!("{name}.post"), d, d, d),
            d,
        }
    }

    pub fn forward(
        &self,
        tape: &Tape,
        ps: &ParamSet,
        g: Var,
        mask: &Rc<Array2<bool>>,
    ) -> Var {
        let (s, d) = tape.shape(g);
        assert_eq!(d, self.d, "intra layer width mismatch");
        assert_eq!(mask.dim(), (s, s), "intra mask shape mismatch");
        let scale = 1.0 / (self.d as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let mu = head.mu_ffn.apply(tape, ps, g);
            let tau = tape.scale(
                tape.matmul(tape.matmul(mu, tape.param(ps, head.w3)), tape.transpose(mu)),
                scale,
            );
            let beta = tape.masked_softmax_rows(tau, Rc::clone(mask));
            head_outputs.push(tape.matmul(beta, mu));
        }
        let mu_tilde = tape.concat_cols(&head_outputs);
        tape.add(g, self.post.apply(tape, ps, tape.add(g, mu_tilde)))
    }
}

/// The full schema encoder stack with variant dispatch.
pub struct GraphEncoder {
    pub config: EncoderConfig,
    cross: Vec<CrossTurnLayer>,
    intra: Vec<IntraTurnLayer>,
    gru: Option<GruCell>,
}

impl GraphEncoder {
    /// Registers exactly the parameters the variant uses.
    pub fn new(ps: &mut ParamSet, rng: &mut impl Rng, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim();
        let cross = match config.variant {
            Variant::NoCrossTurn | Variant::GruInteraction => Vec::new(),
            _ => (0..config.l1)
                .map(|l| {
                    CrossTurnLayer::new(ps, rng, &format!("graph_encoder.cross.{l}"), d, config.heads)
                })
                .collect(),
        };
        let intra = match config.variant {
            Variant::NoIntraTurn => Vec::new(),
            _ => (0..config.l2)
                .map(|l| {
                    IntraTurnLayer::new(ps, rng, &format!("graph_encoder.intra.{l}"), d, config.heads)
                })
                .collect(),
        };
        let gru = match config.variant {
            Variant::GruInteraction => {
                Some(GruCell::new(ps, rng, "graph_encoder.gru", d, d))
            }
            _ => None,
        };
        Ok(GraphEncoder {
            config,
            cross,
            intra,
            gru,
        })
    }

    /// Encodes one turn. `r` comes from [`SchemaItemEncoder::encode`];
    /// `g_prev_turn` is the previous turn's `g_final` (absent at turn 1).
    /// `intra_allowed` is the adjacency mask; `cross_allowed` the
    /// distance-<=-1 mask (replaced by all-true under `fully_connected`).
    pub fn encode_turn(
        &self,
        tape: &Tape,
        ps: &ParamSet,
        r: Var,
        g_prev_turn: Option<Var>,
        intra_allowed: &Rc<Array2<bool>>,
        cross_allowed: &Rc<Array2<bool>>,
    ) -> SchemaTurnState {
        let (s, _) = tape.shape(r);
        let mut z_layers = vec![r];

        match self.config.variant {
            Variant::NoCrossTurn => {}
            Variant::GruInteraction => {
                // Per-node recurrence over turns: previous turn's final
                // representation is the state, this turn's base embedding
                // the input.
                let gru = self.gru.as_ref().unwrap();
                let state = g_prev_turn.unwrap_or_else(|| tape.zeros(s, self.config.dim()));
                z_layers.push(gru.step(tape, ps, r, state));
            }
            Variant::Full | Variant::NoIntraTurn | Variant::FullyConnected => {
                let all_true;
                let prev_mask = if self.config.variant == Variant::FullyConnected {
                    all_true = Rc::new(Array2::from_elem((s, s), true));
                    &all_true
                } else {
                    cross_allowed
                };
                for layer in &self.cross {
                    let z = layer.forward(
                        tape,
                        ps,
                        *z_layers.last().unwrap(),
                        g_prev_turn,
                        intra_allowed,
                        prev_mask,
                    );
                    z_layers.push(z);
                }
            }
        }

        let mut g_layers = vec![*z_layers.last().unwrap()];
        for layer in &self.intra {
            g_layers.push(layer.forward(tape, ps, *g_layers.last().unwrap(), intra_allowed));
        }
        SchemaTurnState {
            g_final: *g_layers.last().unwrap(),
            z_layers,
            g_layers,
        }
    }
}

fn hstack_masks(a: &Array2<bool>, b: &Array2<bool>) -> Array2<bool> {
    let (rows, ca) = a.dim();
    let cb = b.ncols();
    Array2::from_shape_fn((rows, ca + cb), |(r, c)| {
        if c < ca {
            a[(r, c)]
        } else {
            b[(r, c - ca)]
        }
    })
}

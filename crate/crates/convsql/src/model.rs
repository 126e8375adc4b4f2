//! The assembled parser: schema encoder, text encoder, co-attention, and
//! decoder wired together per interaction, plus checkpointing.
//!
//! An interaction is processed turn by turn on one tape. The schema's base
//! item encoding is computed once; each turn re-runs the interaction layers
//! with the previous turn's final schema state, encodes the utterance with
//! the interaction-level recurrence, co-attends, and decodes. Training uses
//! the gold previous query (teacher forcing); prediction feeds back the
//! model's own previous output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatabaseSchema, Interaction, EOS_TOKEN};
use crate::decoder::{Decoder, OutputSpace, PrevQueryEncoder};
use crate::encoder::{EncoderConfig, GraphEncoder, SchemaItemEncoder};
use crate::error::{Error, Result};
use crate::graph::{build_graph, cross_turn_mask, intra_mask};
use crate::tape::{ParamSet, Tape, Var};
use crate::text::{CoAttention, EmbeddingProvider, ProviderMode, TextEncoder, VocabBuilder};

/// Probability floor for gold tokens no output channel can produce.
pub const UNCOVERABLE_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Word embedding width fed to every token encoder.
    pub embed_dim: usize,
    /// Attendable previous turns in the text encoder; absent = unbounded.
    pub history_window: Option<usize>,
    pub max_decode_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            embed_dim: 300,
            history_window: None,
            max_decode_len: 100,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if self.max_decode_len == 0 {
            return Err(Error::Config("max_decode_len must be positive".into()));
        }
        Ok(())
    }
}

/// Where token embeddings come from.
pub enum ProviderSpec {
    /// Trainable table over the given vocabulary (UNK first).
    Learned { vocab: Vec<String> },
    /// Table loaded from a dumped directory, fine-tuned at the slow rate.
    FileBacked { dir: PathBuf },
}

/// Text-side embedding vocabulary: schema item words and surfaces from every
/// loaded database (schemas are model inputs, not labels), train-split
/// utterance and gold-query words, and the output vocabulary itself.
pub fn text_vocab(
    schemas: &BTreeMap<String, DatabaseSchema>,
    train: &[Interaction],
    output_vocab: &[String],
) -> Vec<String> {
    let mut b = VocabBuilder::new();
    for schema in schemas.values() {
        for item in &schema.items {
            b.add_tokens(&item.tokens);
            b.add(&item.surface());
        }
    }
    for interaction in train {
        for turn in &interaction.turns {
            b.add_tokens(&turn.utterance_tokens);
            b.add_tokens(&turn.gold_query_tokens);
        }
    }
    for t in output_vocab {
        b.add(t);
    }
    b.build()
}

/// Per-turn teacher-forcing outputs.
pub struct TurnOutcome {
    /// Summed step losses, on tape.
    pub loss: Var,
    /// Decode steps (gold length + end marker).
    pub steps: usize,
    /// Steps whose merged argmax equals the gold token.
    pub token_hits: usize,
    /// Gold tokens no channel can produce (floored at a constant epsilon).
    pub uncoverable: usize,
}

pub struct InteractionOutcome {
    pub turns: Vec<TurnOutcome>,
}

impl InteractionOutcome {
    pub fn steps(&self) -> usize {
        self.turns.iter().map(|t| t.steps).sum()
    }
    pub fn token_hits(&self) -> usize {
        self.turns.iter().map(|t| t.token_hits).sum()
    }
    pub fn uncoverable(&self) -> usize {
        self.turns.iter().map(|t| t.uncoverable).sum()
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub ps: ParamSet,
    pub provider: EmbeddingProvider,
    /// Reserved output vocabulary (fixed words plus train-only extras).
    pub output_vocab: Vec<String>,
    item_encoder: SchemaItemEncoder,
    graph_encoder: GraphEncoder,
    text_encoder: TextEncoder,
    co_attention: CoAttention,
    prev_query: PrevQueryEncoder,
    decoder: Decoder,
}

impl Model {
    /// Builds a freshly initialized model. Parameter registration order is
    /// fixed so a checkpoint can restore values by name into an identically
    /// constructed model.
    pub fn new(
        config: ModelConfig,
        output_vocab: Vec<String>,
        spec: ProviderSpec,
        seed: u64,
    ) -> Result<Model> {
        config.validate()?;
        if output_vocab.is_empty() {
            return Err(Error::Config("empty output vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let provider = match spec {
            ProviderSpec::Learned { vocab } => {
                EmbeddingProvider::learned(&mut ps, &mut rng, vocab, config.embed_dim)
            }
            ProviderSpec::FileBacked { dir } => EmbeddingProvider::file_backed(&mut ps, dir)?,
        };
        Self::assemble(config, output_vocab, ps, provider, rng)
    }

    /// Same shape as [`Model::new`] but with a freshly initialized provider
    /// of the given mode; checkpoint restore overwrites all values after.
    fn from_parts(
        config: ModelConfig,
        output_vocab: Vec<String>,
        mode: ProviderMode,
        provider_vocab: Vec<String>,
        seed: u64,
    ) -> Result<Model> {
        config.validate()?;
        if output_vocab.is_empty() {
            return Err(Error::Config("empty output vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let provider = EmbeddingProvider::from_parts(
            &mut ps,
            &mut rng,
            mode,
            provider_vocab,
            config.embed_dim,
        );
        Self::assemble(config, output_vocab, ps, provider, rng)
    }

    fn assemble(
        config: ModelConfig,
        output_vocab: Vec<String>,
        mut ps: ParamSet,
        provider: EmbeddingProvider,
        mut rng: ChaCha8Rng,
    ) -> Result<Model> {
        if provider.dim != config.embed_dim {
            return Err(Error::Config(format!(
                "embedding table width {} does not match embed_dim {}",
                provider.dim, config.embed_dim
            )));
        }
        let d = config.encoder.dim();
        Ok(Model {
            item_encoder: SchemaItemEncoder::new(&mut ps, &mut rng, config.embed_dim, d),
            graph_encoder: GraphEncoder::new(&mut ps, &mut rng, config.encoder)?,
            text_encoder: TextEncoder::new(
                &mut ps,
                &mut rng,
                config.embed_dim,
                d,
                config.history_window,
            ),
            co_attention: CoAttention::new(&mut ps, &mut rng, d),
            prev_query: PrevQueryEncoder::new(&mut ps, &mut rng, config.embed_dim, d),
            decoder: Decoder::new(&mut ps, &mut rng, d, output_vocab.len()),
            config,
            ps,
            provider,
            output_vocab,
        })
    }

    /// Teacher-forced forward pass over one interaction: the previous turn's
    /// GOLD query feeds both the query encoder and the input feeding.
    pub fn teacher_forced(
        &self,
        tape: &Tape,
        schema: &DatabaseSchema,
        interaction: &Interaction,
    ) -> Result<InteractionOutcome> {
        let surfaces: Vec<String> = schema.items.iter().map(|i| i.surface()).collect();
        let graph = build_graph(schema);
        let intra = intra_mask(&graph).allowed;
        let cross = cross_turn_mask(&graph).allowed;
        let r = self
            .item_encoder
            .encode(tape, &self.ps, &self.provider, &schema.items)?;

        let mut text_state = self.text_encoder.begin_interaction(tape);
        let mut g_prev: Option<Var> = None;
        let mut prev_gold: Option<&[String]> = None;
        let empty: Vec<String> = Vec::new();
        let mut turns = Vec::with_capacity(interaction.turns.len());

        for turn in &interaction.turns {
            let tts = self.text_encoder.encode_utterance(
                tape,
                &self.ps,
                &self.provider,
                &turn.utterance_tokens,
                &mut text_state,
            )?;
            let sts = self
                .graph_encoder
                .encode_turn(tape, &self.ps, r, g_prev, &intra, &cross);
            let co = self.co_attention.apply(tape, &self.ps, tts.h, sts.g_final);
            let q = match prev_gold {
                Some(tokens) => Some(
                    self.prev_query
                        .encode(tape, &self.ps, &self.provider, tokens)?,
                ),
                None => None,
            };
            let space = OutputSpace {
                reserved: &self.output_vocab,
                items: &surfaces,
                prev_query: prev_gold.unwrap_or(&empty),
            };

            let mut state = self.decoder.begin(tape, &self.ps, tts.dec_init);
            let mut tok = self.decoder.sos_vector(tape, &self.ps);
            let mut loss: Option<Var> = None;
            let mut token_hits = 0;
            let mut uncoverable = 0;
            let eos = EOS_TOKEN.to_string();
            let targets = turn.gold_query_tokens.iter().chain(std::iter::once(&eos));
            let mut steps = 0;
            for target in targets {
                let (next, step) =
                    self.decoder
                        .step(tape, &self.ps, &state, tok, co.h_tilde, co.g_tilde, q);
                state = next;
                let gate = self.decoder.gate(tape, &self.ps, step.o, step.context);
                let flat = self
                    .decoder
                    .flat_probabilities(tape, &self.ps, &gate, co.g_tilde, q);
                let dist = self.decoder.output_distribution(tape, flat, &space);
                if dist.best().surface == *target {
                    token_hits += 1;
                }
                let step_loss = match space.feed_for(target) {
                    Some(_) => self.decoder.step_loss(tape, flat, &space, target)?,
                    None => {
                        uncoverable += 1;
                        tape.constant(ndarray::arr2(&[[-UNCOVERABLE_EPSILON.ln()]]))
                    }
                };
                loss = Some(match loss {
                    Some(acc) => tape.add(acc, step_loss),
                    None => step_loss,
                });
                steps += 1;
                if *target != eos {
                    // Input feeding uses the gold token's first channel;
                    // uncoverable gold falls back to the start vector.
                    tok = match space.feed_for(target) {
                        Some(feed) => {
                            self.decoder.feed_vector(tape, &self.ps, feed, co.g_tilde, q)
                        }
                        None => self.decoder.sos_vector(tape, &self.ps),
                    };
                }
            }
            turns.push(TurnOutcome {
                loss: loss.expect("at least the end marker is scored"),
                steps,
                token_hits,
                uncoverable,
            });
            g_prev = Some(sts.g_final);
            prev_gold = Some(&turn.gold_query_tokens);
        }
        Ok(InteractionOutcome { turns })
    }

    /// Greedy prediction over one interaction: the previous turn's PREDICTED
    /// query feeds the query channel. An empty prediction leaves the channel
    /// absent, as at turn 1.
    pub fn predict(
        &self,
        tape: &Tape,
        schema: &DatabaseSchema,
        interaction: &Interaction,
    ) -> Result<Vec<Vec<String>>> {
        let surfaces: Vec<String> = schema.items.iter().map(|i| i.surface()).collect();
        let graph = build_graph(schema);
        let intra = intra_mask(&graph).allowed;
        let cross = cross_turn_mask(&graph).allowed;
        let r = self
            .item_encoder
            .encode(tape, &self.ps, &self.provider, &schema.items)?;

        let mut text_state = self.text_encoder.begin_interaction(tape);
        let mut g_prev: Option<Var> = None;
        let mut prev_pred: Vec<String> = Vec::new();
        let mut out = Vec::with_capacity(interaction.turns.len());

        for turn in &interaction.turns {
            let tts = self.text_encoder.encode_utterance(
                tape,
                &self.ps,
                &self.provider,
                &turn.utterance_tokens,
                &mut text_state,
            )?;
            let sts = self
                .graph_encoder
                .encode_turn(tape, &self.ps, r, g_prev, &intra, &cross);
            let co = self.co_attention.apply(tape, &self.ps, tts.h, sts.g_final);
            let q = if prev_pred.is_empty() {
                None
            } else {
                Some(
                    self.prev_query
                        .encode(tape, &self.ps, &self.provider, &prev_pred)?,
                )
            };
            let space = OutputSpace {
                reserved: &self.output_vocab,
                items: &surfaces,
                prev_query: &prev_pred,
            };
            let tokens = self.decoder.greedy_decode(
                tape,
                &self.ps,
                tts.dec_init,
                co.h_tilde,
                co.g_tilde,
                q,
                &space,
                EOS_TOKEN,
                self.config.max_decode_len,
            );
            g_prev = Some(sts.g_final);
            prev_pred = tokens.clone();
            out.push(tokens);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(self, path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        load_checkpoint(path.as_ref())
    }
}

const MAGIC: &[u8; 8] = b"CONVSQL1";

#[derive(Serialize, Deserialize)]
struct ManifestParam {
    name: String,
    rows: usize,
    cols: usize,
}

/// Everything needed to rebuild the model shape; values follow as raw
/// little-endian f64 blobs in manifest order.
#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    output_vocab: Vec<String>,
    provider_mode: ProviderMode,
    provider_vocab: Vec<String>,
    params: Vec<ManifestParam>,
}

fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let manifest = Manifest {
        config: model.config.clone(),
        output_vocab: model.output_vocab.clone(),
        provider_mode: model.provider.mode,
        provider_vocab: model.provider.vocab_tokens().to_vec(),
        params: model
            .ps
            .iter()
            .map(|(_, name, v)| ManifestParam {
                name: name.to_string(),
                rows: v.nrows(),
                cols: v.ncols(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest serialization failed: {e}")))?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for (_, _, v) in model.ps.iter() {
        for x in v.iter() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a model checkpoint",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body_at = 16 + header_len;
    if bytes.len() < body_at {
        return Err(Error::Checkpoint("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..body_at])
        .map_err(|e| Error::Checkpoint(format!("malformed manifest: {e}")))?;

    // Rebuild an identically shaped model, then overwrite every value.
    let mut model = Model::from_parts(
        manifest.config,
        manifest.output_vocab,
        manifest.provider_mode,
        manifest.provider_vocab,
        0,
    )
    .map_err(|e| Error::Checkpoint(format!("checkpoint config rejected: {e}")))?;
    if manifest.params.len() != model.ps.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, model has {}",
            manifest.params.len(),
            model.ps.len()
        )));
    }
    let mut at = body_at;
    for p in &manifest.params {
        let id = model.ps.id_by_name(&p.name).ok_or_else(|| {
            Error::Checkpoint(format!("manifest parameter `{}` unknown to the model", p.name))
        })?;
        let value = model.ps.value_mut(id);
        if value.dim() != (p.rows, p.cols) {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` has shape {:?} in the model but ({}, {}) in the checkpoint",
                p.name,
                value.dim(),
                p.rows,
                p.cols
            )));
        }
        let need = p.rows * p.cols * 8;
        if bytes.len() < at + need {
            return Err(Error::Checkpoint(format!(
                "checkpoint truncated inside parameter `{}`",
                p.name
            )));
        }
        for (i, slot) in value.iter_mut().enumerate() {
            let o = at + i * 8;
            *slot = f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        }
        at += need;
    }
    if at != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last parameter",
            bytes.len() - at
        )));
    }
    Ok(model)
}

//! Token embeddings, utterance encoding with interaction history, and
//! text-schema co-attention.
//!
//! Each utterance runs through a bidirectional recurrent encoder whose
//! initial state comes from an interaction-level recurrent encoder over the
//! summaries of earlier utterances. Every token state then attends over the
//! stored token states of all previous turns (dot-product, empty history
//! giving a zero context), and the token representation is the
//! concatenation of state and context. Co-attention augments token and
//! schema vectors with bilinear attention summaries of each other.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BiLstm, Embedding, Linear, LstmCell};
use crate::tape::{ParamId, ParamSet, Tape, Var};

/// Row 0 of every learned embedding table; unknown tokens map here.
pub const UNK_TOKEN: &str = "<unk>";

/// Deduplicating, order-independent vocabulary accumulator.
#[derive(Default)]
pub struct VocabBuilder {
    tokens: std::collections::BTreeSet<String>,
}

impl VocabBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, token: &str) {
        if token != UNK_TOKEN {
            self.tokens.insert(token.to_string());
        }
    }

    pub fn add_tokens(&mut self, tokens: &[String]) {
        for t in tokens {
            self.add(t);
        }
    }

    /// Sorted vocabulary with the unknown marker at index 0.
    pub fn build(self) -> Vec<String> {
        let mut v = vec![UNK_TOKEN.to_string()];
        v.extend(self.tokens);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderMode {
    Learned,
    FileBacked,
}

/// Token embedding source: a trainable table (learned mode, unknowns map to
/// the UNK row) or a table initialized from an exported file (file-backed
/// mode, unknown tokens are errors). Either way the table lives in the
/// parameter set; the optimizer decides per name prefix how fast it moves.
pub struct EmbeddingProvider {
    pub mode: ProviderMode,
    pub dim: usize,
    vocab: BTreeMap<String, usize>,
    tokens: Vec<String>,
    table: Embedding,
}

#[derive(Serialize, Deserialize)]
struct FileIndex {
    dim: usize,
    keys: BTreeMap<String, usize>,
}

const INDEX_FILE: &str = "index.json";
const TABLE_FILE: &str = "table.bin";

impl EmbeddingProvider {
    /// Trainable table over `vocab` (index 0 must be the UNK marker, as
    /// produced by [`VocabBuilder::build`]).
    pub fn learned(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        vocab: Vec<String>,
        dim: usize,
    ) -> Self {
        Self::from_parts(ps, rng, ProviderMode::Learned, vocab, dim)
    }

    /// Provider with a freshly initialized table; checkpoint restore
    /// overwrites the values afterwards. The table name (and therefore the
    /// optimizer's learning-rate group) follows the mode.
    pub fn from_parts(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        mode: ProviderMode,
        vocab: Vec<String>,
        dim: usize,
    ) -> Self {
        let name = match mode {
            ProviderMode::Learned => {
                assert_eq!(vocab[0], UNK_TOKEN, "learned vocab must start with UNK");
                "embedding"
            }
            ProviderMode::FileBacked => "embedding.pretrained",
        };
        let table = Embedding::new(ps, rng, name, vocab.len(), dim);
        EmbeddingProvider {
            mode,
            dim,
            vocab: index_of(&vocab),
            tokens: vocab,
            table,
        }
    }

    /// Table initialized from a dumped directory (`index.json` declaring the
    /// dimension and key -> row map, `table.bin` of little-endian f64 rows).
    /// Registered under `embedding.pretrained` so the optimizer can give it
    /// the fine-tuning learning rate.
    pub fn file_backed(ps: &mut ParamSet, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index_path = dir.join(INDEX_FILE);
        let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: FileIndex =
            serde_json::from_str(&text).map_err(|e| Error::json(&index_path, e))?;
        let table_path = dir.join(TABLE_FILE);
        let bytes = std::fs::read(&table_path).map_err(|e| Error::io(&table_path, e))?;
        let rows = index.keys.len();
        if bytes.len() != rows * index.dim * 8 {
            return Err(Error::EmbeddingLookup(format!(
                "table {} holds {} bytes, expected {} ({} rows x {} dims)",
                table_path.display(),
                bytes.len(),
                rows * index.dim * 8,
                rows,
                index.dim
            )));
        }
        let mut tokens = vec![String::new(); rows];
        for (tok, &row) in &index.keys {
            if row >= rows {
                return Err(Error::EmbeddingLookup(format!(
                    "index row {row} for `{tok}` out of range"
                )));
            }
            tokens[row] = tok.clone();
        }
        let mut data = Array2::zeros((rows, index.dim));
        for r in 0..rows {
            for c in 0..index.dim {
                let at = (r * index.dim + c) * 8;
                data[(r, c)] = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            }
        }
        let table = Embedding::with_values(ps, "embedding.pretrained", data);
        Ok(EmbeddingProvider {
            mode: ProviderMode::FileBacked,
            dim: index.dim,
            vocab: index.keys,
            tokens,
            table,
        })
    }

    /// Writes the current table in the file-backed format.
    pub fn dump(&self, ps: &ParamSet, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let index = FileIndex {
            dim: self.dim,
            keys: self.vocab.clone(),
        };
        let index_path = dir.join(INDEX_FILE);
        std::fs::write(
            &index_path,
            serde_json::to_string_pretty(&index).expect("index serializes"),
        )
        .map_err(|e| Error::io(&index_path, e))?;
        let values = ps.value(self.table.table);
        let mut bytes = Vec::with_capacity(values.len() * 8);
        for v in values.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let table_path = dir.join(TABLE_FILE);
        std::fs::write(&table_path, bytes).map_err(|e| Error::io(&table_path, e))
    }

    /// One embedding row per token, `(T, dim)`.
    pub fn embed(&self, tape: &Tape, ps: &ParamSet, tokens: &[String]) -> Result<Var> {
        assert!(!tokens.is_empty(), "embed: empty token list");
        let mut indices = Vec::with_capacity(tokens.len());
        for t in tokens {
            match self.vocab.get(t) {
                Some(&i) => indices.push(i),
                None if self.mode == ProviderMode::Learned => indices.push(0),
                None => {
                    return Err(Error::EmbeddingLookup(format!(
                        "token `{t}` missing from file-backed embedding table"
                    )))
                }
            }
        }
        Ok(self.table.lookup(tape, ps, &indices))
    }

    pub fn vocab_tokens(&self) -> &[String] {
        &self.tokens
    }
}

fn index_of(vocab: &[String]) -> BTreeMap<String, usize> {
    vocab
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect()
}

/// Recurrent state threaded through one interaction's turns.
pub struct InteractionTextState {
    inter_h: Var,
    inter_c: Var,
    /// Per-turn `(T_k, d/2)` token state matrices of earlier turns.
    history: Vec<Var>,
}

/// Per-turn outputs of the text encoder.
pub struct TextTurnState {
    /// `(T, d)`: token state concatenated with turn-attention context.
    pub h: Var,
    /// `(1, d/2)`: final bidirectional state of this utterance.
    pub summary: Var,
    /// `(1, d/2)`: interaction state after consuming this turn; seeds the
    /// decoder.
    pub dec_init: Var,
}

/// Hierarchical utterance encoder. Width budget for model dimension d:
/// token states are d/2 (d/4 per direction), turn-attention contexts d/2,
/// giving token representations of exactly d.
pub struct TextEncoder {
    bilstm: BiLstm,
    inter: LstmCell,
    init_proj: Linear,
    pub d: usize,
    /// How many previous turns are attendable; `None` = unbounded.
    pub history_window: Option<usize>,
}

impl TextEncoder {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        embed_dim: usize,
        d: usize,
        history_window: Option<usize>,
    ) -> Self {
        assert!(d % 4 == 0, "model dimension must be divisible by 4");
        TextEncoder {
            bilstm: BiLstm::new(ps, rng, "text.utterance", embed_dim, d / 4),
            inter: LstmCell::new(ps, rng, "text.interaction", d / 2, d / 2),
            init_proj: Linear::new(ps, rng, "text.init_proj", d / 2, d / 2, true),
            d,
            history_window,
        }
    }

    pub fn begin_interaction(&self, tape: &Tape) -> InteractionTextState {
        InteractionTextState {
            inter_h: tape.zeros(1, self.d / 2),
            inter_c: tape.zeros(1, self.d / 2),
            history: Vec::new(),
        }
    }

    /// Encodes one utterance and advances the interaction state.
    pub fn encode_utterance(
        &self,
        tape: &Tape,
        ps: &ParamSet,
        provider: &EmbeddingProvider,
        tokens: &[String],
        state: &mut InteractionTextState,
    ) -> Result<TextTurnState> {
        assert!(!tokens.is_empty(), "encode_utterance: empty utterance");
        let embedded = provider.embed(tape, ps, tokens)?;
        let init = self.init_proj.apply(tape, ps, state.inter_h);
        let h0_fwd = tape.slice_cols(init, 0..self.d / 4);
        let h0_bwd = tape.slice_cols(init, self.d / 4..self.d / 2);
        let out = self.bilstm.run_from(tape, ps, embedded, h0_fwd, h0_bwd);

        let t_len = tokens.len();
        let attendable = match self.history_window {
            Some(w) => &state.history[state.history.len().saturating_sub(w)..],
            None => &state.history[..],
        };
        let context = if attendable.is_empty() {
            tape.zeros(t_len, self.d / 2)
        } else {
            let bank = tape.concat_rows(attendable);
            let scores = tape.matmul(out.states, tape.transpose(bank));
            let weights = tape.softmax_rows(scores);
            tape.matmul(weights, bank)
        };
        let h = tape.concat_cols(&[out.states, context]);

        state.history.push(out.states);
        let (h_next, c_next) =
            self.inter
                .step(tape, ps, out.final_state, state.inter_h, state.inter_c);
        state.inter_h = h_next;
        state.inter_c = c_next;
        Ok(TextTurnState {
            h,
            summary: out.final_state,
            dec_init: h_next,
        })
    }
}

/// Bilinear co-attention between token and schema representations.
pub struct CoAttention {
    w: ParamId,
    d: usize,
}

/// Augmented representations plus the attention matrices that built them.
pub struct CoAttentionOutput {
    /// `(T, 2d)`
    pub h_tilde: Var,
    /// `(|S|, 2d)`
    pub g_tilde: Var,
    /// `(T, |S|)` rows sum to 1: token attention over items.
    pub token_to_item: Var,
    /// `(|S|, T)` rows sum to 1: item attention over tokens.
    pub item_to_token: Var,
}

impl CoAttention {
    pub fn new(ps: &mut ParamSet, rng: &mut impl Rng, d: usize) -> Self {
        CoAttention {
            w: ps.register("co_attention.w", d, d, d, rng),
            d,
        }
    }

    pub fn apply(&self, tape: &Tape, ps: &ParamSet, h: Var, g: Var) -> CoAttentionOutput {
        let (_, dh) = tape.shape(h);
        let (_, dg) = tape.shape(g);
        assert_eq!(dh, self.d, "co-attention: token width mismatch");
        assert_eq!(dg, self.d, "co-attention: item width mismatch");
        let scores = tape.matmul(tape.matmul(h, tape.param(ps, self.w)), tape.transpose(g));
        let token_to_item = tape.softmax_rows(scores);
        let item_to_token = tape.softmax_rows(tape.transpose(scores));
        let h_ctx = tape.matmul(token_to_item, g);
        let g_ctx = tape.matmul(item_to_token, h);
        CoAttentionOutput {
            h_tilde: tape.concat_cols(&[h, h_ctx]),
            g_tilde: tape.concat_cols(&[g, g_ctx]),
            token_to_item,
            item_to_token,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn words(ws: &[&str]) -> Vec<String> {
        ws.iter().map(|w| w.to_string()).collect()
    }

    fn learned_provider(ps: &mut ParamSet, rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingProvider {
        let mut vb = VocabBuilder::new();
        vb.add_tokens(&words(&["how", "many", "dogs", "are", "there", "names"]));
        EmbeddingProvider::learned(ps, rng, vb.build(), dim)
    }

    #[test]
    fn embed_shapes_and_repeated_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let provider = learned_provider(&mut ps, &mut rng, 5);
        let tape = Tape::new();
        let e = provider
            .embed(&tape, &ps, &words(&["how", "many", "dogs"]))
            .unwrap();
        assert_eq!(tape.shape(e), (3, 5));
        let twice = provider.embed(&tape, &ps, &words(&["dogs", "dogs"])).unwrap();
        let v = tape.value(twice);
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn unknown_tokens_share_the_unk_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let provider = learned_provider(&mut ps, &mut rng, 5);
        let tape = Tape::new();
        let e = provider
            .embed(&tape, &ps, &words(&["zyzzy", "qwerty", UNK_TOKEN]))
            .unwrap();
        let v = tape.value(e);
        assert_eq!(v.row(0), v.row(1));
        assert_eq!(v.row(0), v.row(2));
    }

    #[test]
    fn file_backed_round_trip_reproduces_learned_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let provider = learned_provider(&mut ps, &mut rng, 4);
        let dir = tempfile::tempdir().unwrap();
        provider.dump(&ps, dir.path()).unwrap();

        let mut ps2 = ParamSet::new();
        let loaded = EmbeddingProvider::file_backed(&mut ps2, dir.path()).unwrap();
        assert_eq!(loaded.dim, 4);
        let tokens = words(&["how", "many", "dogs"]);
        let tape = Tape::new();
        let a = provider.embed(&tape, &ps, &tokens).unwrap();
        let b = loaded.embed(&tape, &ps2, &tokens).unwrap();
        assert_eq!(tape.value(a).as_ref(), tape.value(b).as_ref());
    }

    #[test]
    fn file_backed_missing_token_is_an_error_naming_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::new();
        let provider = learned_provider(&mut ps, &mut rng, 4);
        let dir = tempfile::tempdir().unwrap();
        provider.dump(&ps, dir.path()).unwrap();
        let mut ps2 = ParamSet::new();
        let loaded = EmbeddingProvider::file_backed(&mut ps2, dir.path()).unwrap();
        let tape = Tape::new();
        let err = loaded
            .embed(&tape, &ps2, &words(&["zyzzy"]))
            .unwrap_err();
        assert!(err.to_string().contains("zyzzy"), "{err}");
    }

    fn encoder_fixture() -> (ParamSet, EmbeddingProvider, TextEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let provider = learned_provider(&mut ps, &mut rng, 6);
        let enc = TextEncoder::new(&mut ps, &mut rng, 6, 8, None);
        (ps, provider, enc)
    }

    #[test]
    fn first_turn_context_is_zero() {
        let (ps, provider, enc) = encoder_fixture();
        let tape = Tape::new();
        let mut state = enc.begin_interaction(&tape);
        let turn = enc
            .encode_utterance(&tape, &ps, &provider, &words(&["how", "many", "dogs"]), &mut state)
            .unwrap();
        let h = tape.value(turn.h);
        assert_eq!(h.dim(), (3, 8));
        for r in 0..3 {
            for c in 4..8 {
                assert_eq!(h[(r, c)], 0.0, "context column ({r},{c}) not zero");
            }
        }
    }

    #[test]
    fn three_turns_thread_state_and_history() {
        let (ps, provider, enc) = encoder_fixture();
        let tape = Tape::new();
        let mut state = enc.begin_interaction(&tape);
        let turns = [
            words(&["how", "many", "dogs"]),
            words(&["names"]),
            words(&["how", "many", "there"]),
        ];
        let mut dec_inits = Vec::new();
        for t in &turns {
            let out = enc
                .encode_utterance(&tape, &ps, &provider, t, &mut state)
                .unwrap();
            dec_inits.push(tape.value(out.dec_init));
        }
        assert_eq!(state.history.len(), 3);
        assert_ne!(dec_inits[0].as_ref(), dec_inits[1].as_ref());
        assert_ne!(dec_inits[1].as_ref(), dec_inits[2].as_ref());
    }

    #[test]
    fn history_attention_changes_later_turn_representations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let provider = learned_provider(&mut ps, &mut rng, 6);
        let unbounded = TextEncoder::new(&mut ps, &mut rng, 6, 8, None);
        let run = |enc: &TextEncoder| {
            let tape = Tape::new();
            let mut state = enc.begin_interaction(&tape);
            enc.encode_utterance(&tape, &ps, &provider, &words(&["how", "many", "dogs"]), &mut state)
                .unwrap();
            let t2 = enc
                .encode_utterance(&tape, &ps, &provider, &words(&["names"]), &mut state)
                .unwrap();
            tape.value(t2.h)
        };
        let with_history = run(&unbounded);
        // Same parameters, history masked out.
        let masked = TextEncoder {
            history_window: Some(0),
            ..unbounded
        };
        assert_ne!(with_history.as_ref(), run(&masked).as_ref());
    }

    #[test]
    fn prefix_encoding_is_bit_exact() {
        let (ps, provider, enc) = encoder_fixture();
        let turns = [
            words(&["how", "many", "dogs"]),
            words(&["names"]),
            words(&["there", "are"]),
        ];
        let encode_first_n = |n: usize| {
            let tape = Tape::new();
            let mut state = enc.begin_interaction(&tape);
            let mut hs = Vec::new();
            for t in &turns[..n] {
                let out = enc
                    .encode_utterance(&tape, &ps, &provider, t, &mut state)
                    .unwrap();
                hs.push(tape.value(out.h));
            }
            hs
        };
        let full = encode_first_n(3);
        let prefix = encode_first_n(2);
        for (a, b) in prefix.iter().zip(&full) {
            assert_eq!(a.as_ref(), b.as_ref());
        }
    }

    #[test]
    fn co_attention_doubles_widths_and_is_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ps = ParamSet::new();
        let co = CoAttention::new(&mut ps, &mut rng, 8);
        let tape = Tape::new();
        let h = tape.constant(Array2::from_shape_fn((5, 8), |(r, c)| {
            ((r * 13 + c * 7) as f64 * 0.37).sin()
        }));
        let g = tape.constant(Array2::from_shape_fn((3, 8), |(r, c)| {
            ((r * 5 + c * 11) as f64 * 0.29).cos()
        }));
        let out = co.apply(&tape, &ps, h, g);
        assert_eq!(tape.shape(out.h_tilde), (5, 16));
        assert_eq!(tape.shape(out.g_tilde), (3, 16));
        for weights in [out.token_to_item, out.item_to_token] {
            let w = tape.value(weights);
            for row in w.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_item_attention_collapses_to_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::new();
        let co = CoAttention::new(&mut ps, &mut rng, 4);
        let tape = Tape::new();
        let h = tape.constant(Array2::from_elem((2, 4), 0.5));
        let g = tape.constant(Array2::from_elem((1, 4), -0.25));
        let out = co.apply(&tape, &ps, h, g);
        let w = tape.value(out.token_to_item);
        assert!(w.iter().all(|&x| (x - 1.0).abs() < 1e-12));
        // The appended context equals the single item vector.
        let ht = tape.value(out.h_tilde);
        for r in 0..2 {
            for c in 4..8 {
                assert_eq!(ht[(r, c)], -0.25);
            }
        }
    }
}

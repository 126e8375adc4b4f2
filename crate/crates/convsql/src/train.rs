//! Loss aggregation, the optimizer schedule, the training loop, and the
//! finite-difference verification harness.
//!
//! Interactions train with teacher forcing. Each utterance loss is weighted
//! by the inverse of its interaction's turn count and interactions are then
//! averaged, so a long conversation never outweighs a short one. The
//! learning rate ramps linearly over warmup and decays by a fixed factor
//! whenever a dev evaluation shows loss rising while token accuracy falls.
//! A pretrained embedding table (parameter names under
//! `embedding.pretrained`) moves at its own, much slower rate.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{detokenize, Corpus};
use crate::decoder::OutputDistribution;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Prediction};
use crate::model::{Model, UNCOVERABLE_EPSILON};
use crate::tape::{ParamId, ParamSet, Tape, Var};

/// Parameter-name prefix that selects the slow learning-rate group.
pub const PRETRAINED_PREFIX: &str = "embedding.pretrained";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Applies only to parameters under [`PRETRAINED_PREFIX`].
    pub embedding_lr: f64,
    pub warmup_steps: usize,
    pub decay_factor: f64,
    /// Interactions per optimizer step.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Dev evaluation cadence in steps; absent = once per epoch.
    pub eval_every: Option<usize>,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            embedding_lr: 1e-5,
            warmup_steps: 1000,
            decay_factor: 0.8,
            batch_size: 16,
            max_epochs: 10,
            seed: 1,
            eval_every: None,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 || self.embedding_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.warmup_steps < 1 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("decay_factor must be in (0, 1]".into()));
        }
        if self.batch_size < 1 || self.max_epochs < 1 {
            return Err(Error::Config(
                "batch_size and max_epochs must be at least 1".into(),
            ));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// One dev evaluation's summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevPoint {
    pub loss: f64,
    pub token_acc: f64,
    pub question_match: f64,
}

/// Mutable schedule state. The learning rate is always
/// `base_lr x min(1, step/warmup) x decay_factor^decays`.
#[derive(Debug, Clone, Default)]
pub struct TrainState {
    pub step: usize,
    pub decays: u32,
    pub history: Vec<DevPoint>,
    pub best: Option<DevPoint>,
}

impl TrainState {
    /// Folds in a dev point if one arrived, then returns the current rate
    /// multiplier applied to both learning-rate groups. A decay triggers
    /// only when dev loss rose AND token accuracy fell; one metric moving
    /// alone is read as noise.
    pub fn lr_schedule(&mut self, config: &TrainConfig, new_point: Option<DevPoint>) -> f64 {
        if let Some(p) = new_point {
            if let Some(prev) = self.history.last() {
                if p.loss > prev.loss && p.token_acc < prev.token_acc {
                    self.decays += 1;
                }
            }
            self.history.push(p);
        }
        let ramp = (self.step as f64 / config.warmup_steps as f64).min(1.0);
        ramp * config.decay_factor.powi(self.decays as i32)
    }
}

/// Sum over steps of the negative log merged probability of the gold token.
/// Returns the loss and how many gold tokens were uncoverable (floored at
/// epsilon). The caller appends the end marker to `gold_tokens`.
pub fn sequence_loss(
    step_distributions: &[OutputDistribution],
    gold_tokens: &[String],
) -> (f64, usize) {
    assert_eq!(
        step_distributions.len(),
        gold_tokens.len(),
        "one distribution per gold token"
    );
    let mut loss = 0.0;
    let mut uncoverable = 0;
    for (dist, gold) in step_distributions.iter().zip(gold_tokens) {
        let p = dist.probability_of(gold);
        if p > 0.0 {
            loss -= p.ln();
        } else {
            uncoverable += 1;
            loss -= UNCOVERABLE_EPSILON.ln();
        }
    }
    (loss, uncoverable)
}

/// Inverse-interaction-length weighting with per-interaction averaging:
/// every interaction contributes equally regardless of turn count. Rows are
/// `(utterance loss, interaction id, interaction turn count)`.
pub fn batch_reweight(per_utterance_losses: &[(f64, usize, usize)]) -> f64 {
    assert!(!per_utterance_losses.is_empty(), "empty batch");
    let mut per_interaction: std::collections::BTreeMap<usize, f64> =
        std::collections::BTreeMap::new();
    for &(loss, interaction_id, interaction_len) in per_utterance_losses {
        assert!(interaction_len > 0, "zero interaction length");
        *per_interaction.entry(interaction_id).or_insert(0.0) += loss / interaction_len as f64;
    }
    let n = per_interaction.len() as f64;
    per_interaction.values().sum::<f64>() / n
}

/// Adam with two learning-rate groups (split by parameter-name prefix) and
/// global gradient-norm clipping. Moments update only for parameters that
/// received a gradient this step.
pub struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    slow_group: Vec<bool>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(ps: &ParamSet) -> Self {
        let mut m = Vec::with_capacity(ps.len());
        let mut v = Vec::with_capacity(ps.len());
        let mut slow_group = Vec::with_capacity(ps.len());
        for (_, name, value) in ps.iter() {
            m.push(Array2::zeros(value.dim()));
            v.push(Array2::zeros(value.dim()));
            slow_group.push(name.starts_with(PRETRAINED_PREFIX));
        }
        Adam {
            m,
            v,
            slow_group,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update. `lr_base`/`lr_slow` are the already-scheduled rates.
    pub fn step(
        &mut self,
        ps: &mut ParamSet,
        grads: &crate::tape::Gradients,
        lr_base: f64,
        lr_slow: f64,
        clip_norm: f64,
    ) {
        self.t += 1;
        let ids: Vec<ParamId> = ps.iter().map(|(id, _, _)| id).collect();
        let norm: f64 = ids
            .iter()
            .filter_map(|&id| grads.get(id))
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = if norm > clip_norm {
            clip_norm / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for id in ids {
            let Some(grad) = grads.get(id) else { continue };
            let i = id.0;
            let lr = if self.slow_group[i] { lr_slow } else { lr_base };
            let value = ps.value_mut(id);
            for ((p, (m, v)), g) in value
                .iter_mut()
                .zip(self.m[i].iter_mut().zip(self.v[i].iter_mut()))
                .zip(grad.iter())
            {
                let g = g * clip;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// One metrics-log line, appended at every dev evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_token_acc: f64,
    pub dev_question_match: f64,
}

pub struct TrainOutcome {
    /// Best-dev checkpoint path (highest question match, ties to lower loss).
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub best: DevPoint,
    pub state: TrainState,
    /// Batch losses in step order, for reproducibility checks.
    pub step_losses: Vec<f64>,
}

/// Teacher-forced dev loss (batch-reweighted) and token accuracy.
fn dev_forced_metrics(model: &Model, dev: &Corpus) -> Result<(f64, f64)> {
    let mut rows = Vec::new();
    let mut hits = 0usize;
    let mut steps = 0usize;
    for (i, inter) in dev.interactions.iter().enumerate() {
        let tape = Tape::new();
        let out = model.teacher_forced(&tape, dev.schema_of(inter), inter)?;
        for t in &out.turns {
            rows.push((tape.scalar(t.loss), i, inter.turns.len()));
        }
        hits += out.token_hits();
        steps += out.steps();
    }
    let acc = if steps == 0 {
        0.0
    } else {
        hits as f64 / steps as f64
    };
    Ok((batch_reweight(&rows), acc))
}

/// Greedy predictions over a corpus in prediction-record form.
pub fn predict_corpus(model: &Model, corpus: &Corpus) -> Result<Vec<Prediction>> {
    let mut preds = Vec::new();
    for (i, inter) in corpus.interactions.iter().enumerate() {
        let tape = Tape::new();
        let decoded = model.predict(&tape, corpus.schema_of(inter), inter)?;
        for (t, (tokens, turn)) in decoded.iter().zip(&inter.turns).enumerate() {
            preds.push(Prediction {
                interaction_index: i,
                db_id: inter.db_id.clone(),
                turn_index: t,
                predicted_query: detokenize(tokens),
                gold_query: detokenize(&turn.gold_query_tokens),
            });
        }
    }
    Ok(preds)
}

/// Full dev sweep: teacher-forced loss and token accuracy, then greedy
/// decoding scored by exact set match.
pub fn dev_point(model: &Model, dev: &Corpus) -> Result<DevPoint> {
    let (loss, token_acc) = dev_forced_metrics(model, dev)?;
    let preds = predict_corpus(model, dev)?;
    let report = evaluate(&preds, dev)?;
    Ok(DevPoint {
        loss,
        token_acc,
        question_match: report.question_match,
    })
}

fn better(candidate: &DevPoint, best: &Option<DevPoint>) -> bool {
    match best {
        None => true,
        Some(b) => {
            candidate.question_match > b.question_match
                || (candidate.question_match == b.question_match && candidate.loss < b.loss)
        }
    }
}

/// Trains `model` in place and writes the best-dev checkpoint plus a JSONL
/// metrics log into `out_dir`. Deterministic given the config seed.
pub fn train(
    model: &mut Model,
    train_corpus: &Corpus,
    dev_corpus: &Corpus,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_corpus.interactions.is_empty() || dev_corpus.interactions.is_empty() {
        return Err(Error::Training("both splits must be nonempty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let checkpoint = out_dir.join("model.ckpt");
    let metrics_log = out_dir.join("metrics.jsonl");
    let mut metrics_file =
        std::fs::File::create(&metrics_log).map_err(|e| Error::io(&metrics_log, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&model.ps);
    let mut state = TrainState::default();
    let mut step_losses = Vec::new();
    let mut since_eval: Vec<f64> = Vec::new();

    for _epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..train_corpus.interactions.len()).collect();
        order.shuffle(&mut rng);
        let mut batch_start = 0;
        while batch_start < order.len() {
            let batch = &order[batch_start..(batch_start + config.batch_size).min(order.len())];
            batch_start += config.batch_size;
            state.step += 1;

            let tape = Tape::new();
            let mut interaction_losses = Vec::with_capacity(batch.len());
            for &idx in batch {
                let inter = &train_corpus.interactions[idx];
                let out = model.teacher_forced(&tape, train_corpus.schema_of(inter), inter)?;
                let mut sum = out.turns[0].loss;
                for t in &out.turns[1..] {
                    sum = tape.add(sum, t.loss);
                }
                interaction_losses.push(tape.scale(sum, 1.0 / inter.turns.len() as f64));
            }
            let mut total = interaction_losses[0];
            for &l in &interaction_losses[1..] {
                total = tape.add(total, l);
            }
            let batch_loss = tape.scale(total, 1.0 / batch.len() as f64);
            let loss_value = tape.scalar(batch_loss);
            if !loss_value.is_finite() {
                let dump = out_dir.join("nonfinite_batch.json");
                let detail = serde_json::json!({
                    "step": state.step,
                    "loss": format!("{loss_value}"),
                    "interaction_indices": batch,
                    "db_ids": batch
                        .iter()
                        .map(|&i| train_corpus.interactions[i].db_id.clone())
                        .collect::<Vec<_>>(),
                });
                std::fs::write(&dump, serde_json::to_string_pretty(&detail).unwrap())
                    .map_err(|e| Error::io(&dump, e))?;
                return Err(Error::Training(format!(
                    "non-finite loss {loss_value} at step {}; batch dumped to {}",
                    state.step,
                    dump.display()
                )));
            }
            step_losses.push(loss_value);
            since_eval.push(loss_value);

            let grads = tape.backward(batch_loss, model.ps.len());
            let mult = state.lr_schedule(config, None);
            adam.step(
                &mut model.ps,
                &grads,
                config.base_lr * mult,
                config.embedding_lr * mult,
                config.clip_norm,
            );

            if let Some(every) = config.eval_every {
                if state.step % every == 0 {
                    run_eval(
                        model,
                        dev_corpus,
                        config,
                        &mut state,
                        &mut since_eval,
                        &mut metrics_file,
                        &checkpoint,
                    )?;
                }
            }
        }
        if config.eval_every.is_none() {
            run_eval(
                model,
                dev_corpus,
                config,
                &mut state,
                &mut since_eval,
                &mut metrics_file,
                &checkpoint,
            )?;
        }
    }
    // An eval cadence longer than the whole run still yields one snapshot.
    if state.best.is_none() {
        run_eval(
            model,
            dev_corpus,
            config,
            &mut state,
            &mut since_eval,
            &mut metrics_file,
            &checkpoint,
        )?;
    }
    Ok(TrainOutcome {
        checkpoint,
        metrics_log,
        best: state.best.expect("at least one evaluation ran"),
        state,
        step_losses,
    })
}

fn run_eval(
    model: &Model,
    dev_corpus: &Corpus,
    config: &TrainConfig,
    state: &mut TrainState,
    since_eval: &mut Vec<f64>,
    metrics_file: &mut std::fs::File,
    checkpoint: &Path,
) -> Result<()> {
    let point = dev_point(model, dev_corpus)?;
    let mult = state.lr_schedule(config, Some(point));
    let train_loss = if since_eval.is_empty() {
        f64::NAN
    } else {
        since_eval.iter().sum::<f64>() / since_eval.len() as f64
    };
    since_eval.clear();
    let row = MetricsRow {
        step: state.step,
        lr: config.base_lr * mult,
        train_loss,
        dev_loss: point.loss,
        dev_token_acc: point.token_acc,
        dev_question_match: point.question_match,
    };
    let line = serde_json::to_string(&row).expect("metrics row serializes");
    writeln!(metrics_file, "{line}").map_err(|e| Error::Training(format!("metrics log: {e}")))?;
    if better(&point, &state.best) {
        state.best = Some(point);
        model.save(checkpoint)?;
    }
    Ok(())
}

/// Which parameter stack a gradient check exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckComponent {
    /// A lone linear layer; exact up to rounding.
    Linear,
    GraphEncoder,
    TextEncoder,
    Decoder,
    /// The assembled model end to end.
    Full,
}

impl std::str::FromStr for CheckComponent {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(CheckComponent::Linear),
            "graph_encoder" => Ok(CheckComponent::GraphEncoder),
            "text_encoder" => Ok(CheckComponent::TextEncoder),
            "decoder" => Ok(CheckComponent::Decoder),
            "full" => Ok(CheckComponent::Full),
            other => Err(Error::Config(format!(
                "unknown component `{other}` (expected linear, graph_encoder, text_encoder, \
                 decoder, full)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub component: String,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub scalars_checked: usize,
}

/// A deterministic scene: a parameter set plus a scalar loss over it that
/// can be rebuilt on any tape. Perturbing the set through `params_mut`
/// changes what `loss` sees.
trait CheckScene {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn loss(&self, tape: &Tape) -> Var;
}

/// Compares analytic gradients against central finite differences for every
/// parameter tensor of the chosen component, probing a deterministic spread
/// of entries per tensor. Relative error is
/// `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn gradient_check(component: CheckComponent, epsilon: f64) -> GradCheckReport {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let mut scene = fixtures::scene(component);
    let n = scene.params().len();
    assert!(n > 0, "scene registers parameters");

    let analytic: Vec<Array2<f64>> = {
        let tape = Tape::new();
        let loss = scene.loss(&tape);
        let grads = tape.backward(loss, n);
        scene
            .params()
            .iter()
            .map(|(id, _, v)| match grads.get(id) {
                Some(g) => g.clone(),
                None => Array2::zeros(v.dim()),
            })
            .collect()
    };

    let eval_loss = |scene: &dyn CheckScene| {
        let tape = Tape::new();
        let loss = scene.loss(&tape);
        tape.scalar(loss)
    };

    let names: Vec<String> = scene
        .params()
        .iter()
        .map(|(_, n, _)| n.to_string())
        .collect();
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut checked = 0usize;
    for (i, name) in names.iter().enumerate() {
        let id = ParamId(i);
        let (rows, cols) = scene.params().value(id).dim();
        for k in probe_indices(rows * cols) {
            // Logical (row, col) addressing: gradients may carry any layout.
            let at = (k / cols, k % cols);
            let orig = scene.params().value(id)[at];
            set_at(scene.params_mut(), id, at, orig + epsilon);
            let up = eval_loss(&*scene);
            set_at(scene.params_mut(), id, at, orig - epsilon);
            let down = eval_loss(&*scene);
            set_at(scene.params_mut(), id, at, orig);
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[i][at];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            checked += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = name.clone();
            }
        }
    }
    GradCheckReport {
        component: format!("{component:?}"),
        max_rel_error: max_rel,
        worst_param: worst,
        scalars_checked: checked,
    }
}

/// Up to six probe positions spanning the tensor.
fn probe_indices(len: usize) -> Vec<usize> {
    if len <= 6 {
        return (0..len).collect();
    }
    let mut v: Vec<usize> = (0..6).map(|i| i * (len - 1) / 5).collect();
    v.dedup();
    v
}

fn set_at(ps: &mut ParamSet, id: ParamId, at: (usize, usize), x: f64) {
    ps.value_mut(id)[at] = x;
}

/// Small fixed scenes for the checker. Inputs are deterministic sinusoid
/// fills; every tensor a fixture registers is on its loss path.
mod fixtures {
    use super::{CheckComponent, CheckScene, ParamSet, Tape, Var};
    use crate::data::synthetic::{generate_synthetic_corpus, GeneratorConfig};
    use crate::data::{build_output_vocab, DatabaseSchema, Interaction};
    use crate::decoder::{Decoder, OutputSpace};
    use crate::encoder::{EncoderConfig, GraphEncoder, Variant};
    use crate::graph::{build_graph, cross_turn_mask, intra_mask};
    use crate::model::{text_vocab, Model, ModelConfig, ProviderSpec};
    use crate::nn::Linear;
    use crate::text::{EmbeddingProvider, TextEncoder, UNK_TOKEN};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    pub(super) fn scene(component: CheckComponent) -> Box<dyn CheckScene> {
        match component {
            CheckComponent::Linear => Box::new(LinearScene::new()),
            CheckComponent::GraphEncoder => Box::new(GraphScene::new()),
            CheckComponent::TextEncoder => Box::new(TextScene::new()),
            CheckComponent::Decoder => Box::new(DecoderScene::new()),
            CheckComponent::Full => Box::new(FullScene::new()),
        }
    }

    fn wave(rows: usize, cols: usize, k: f64) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |(r, c)| ((r * cols + c) as f64 * k).sin())
    }

    fn strs(ws: &[&str]) -> Vec<String> {
        ws.iter().map(|w| w.to_string()).collect()
    }

    struct LinearScene {
        ps: ParamSet,
        lin: Linear,
        x: Array2<f64>,
    }

    impl LinearScene {
        fn new() -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut ps = ParamSet::new();
            let lin = Linear::new(&mut ps, &mut rng, "probe", 5, 4, true);
            LinearScene {
                ps,
                lin,
                x: wave(3, 5, 0.37),
            }
        }
    }

    impl CheckScene for LinearScene {
        fn params(&self) -> &ParamSet {
            &self.ps
        }
        fn params_mut(&mut self) -> &mut ParamSet {
            &mut self.ps
        }
        fn loss(&self, tape: &Tape) -> Var {
            tape.sum_all(self.lin.apply(tape, &self.ps, tape.constant(self.x.clone())))
        }
    }

    fn small_synthetic() -> crate::data::Corpus {
        // Two tables of (star + 2 columns) each: 6 schema items per db.
        let cfg = GeneratorConfig {
            n_databases: 2,
            tables_per_db: 2,
            columns_per_table: 2,
            n_interactions: 6,
            turns_per_interaction: 2,
            seed: 9,
        };
        generate_synthetic_corpus(&cfg)
            .expect("valid generator config")
            .train
    }

    struct GraphScene {
        ps: ParamSet,
        enc: GraphEncoder,
        r: Array2<f64>,
        g_prev: Array2<f64>,
        intra: Rc<Array2<bool>>,
        cross: Rc<Array2<bool>>,
    }

    impl GraphScene {
        fn new() -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut ps = ParamSet::new();
            let enc = GraphEncoder::new(
                &mut ps,
                &mut rng,
                EncoderConfig {
                    l1: 2,
                    l2: 1,
                    d1: 8,
                    d2: 8,
                    heads: 2,
                    variant: Variant::Full,
                },
            )
            .expect("valid encoder config");
            let train = small_synthetic();
            let schema = train.schemas.values().next().expect("nonempty").clone();
            let graph = build_graph(&schema);
            let s = schema.items.len();
            GraphScene {
                ps,
                enc,
                r: wave(s, 8, 0.23),
                g_prev: wave(s, 8, 0.31),
                intra: intra_mask(&graph).allowed,
                cross: cross_turn_mask(&graph).allowed,
            }
        }
    }

    impl CheckScene for GraphScene {
        fn params(&self) -> &ParamSet {
            &self.ps
        }
        fn params_mut(&mut self) -> &mut ParamSet {
            &mut self.ps
        }
        fn loss(&self, tape: &Tape) -> Var {
            // Previous-turn input present, so both halves of every
            // cross-turn layer carry gradient.
            let state = self.enc.encode_turn(
                tape,
                &self.ps,
                tape.constant(self.r.clone()),
                Some(tape.constant(self.g_prev.clone())),
                &self.intra,
                &self.cross,
            );
            tape.sum_all(state.g_final)
        }
    }

    struct TextScene {
        ps: ParamSet,
        provider: EmbeddingProvider,
        enc: TextEncoder,
        turn1: Vec<String>,
        turn2: Vec<String>,
    }

    impl TextScene {
        fn new() -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut ps = ParamSet::new();
            let vocab = strs(&[UNK_TOKEN, "list", "the", "rows", "again"]);
            let provider = EmbeddingProvider::learned(&mut ps, &mut rng, vocab, 5);
            let enc = TextEncoder::new(&mut ps, &mut rng, 5, 8, None);
            TextScene {
                ps,
                provider,
                enc,
                turn1: strs(&["list", "the", "rows"]),
                turn2: strs(&["again"]),
            }
        }
    }

    impl CheckScene for TextScene {
        fn params(&self) -> &ParamSet {
            &self.ps
        }
        fn params_mut(&mut self) -> &mut ParamSet {
            &mut self.ps
        }
        fn loss(&self, tape: &Tape) -> Var {
            // Two turns so the interaction recurrence and the turn-level
            // attention bank are both on the path.
            let mut state = self.enc.begin_interaction(tape);
            let a = self
                .enc
                .encode_utterance(tape, &self.ps, &self.provider, &self.turn1, &mut state)
                .expect("tokens in vocab");
            let b = self
                .enc
                .encode_utterance(tape, &self.ps, &self.provider, &self.turn2, &mut state)
                .expect("tokens in vocab");
            tape.add(tape.sum_all(a.h), tape.sum_all(b.h))
        }
    }

    struct DecoderScene {
        ps: ParamSet,
        dec: Decoder,
        reserved: Vec<String>,
        items: Vec<String>,
        prev: Vec<String>,
        h_tilde: Array2<f64>,
        g_tilde: Array2<f64>,
        q: Array2<f64>,
        dec_init: Array2<f64>,
    }

    impl DecoderScene {
        fn new() -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let mut ps = ParamSet::new();
            let reserved = strs(&["SELECT", "FROM", "value", "EOS"]);
            let dec = Decoder::new(&mut ps, &mut rng, 8, reserved.len());
            DecoderScene {
                ps,
                dec,
                reserved,
                items: strs(&["t", "t.a", "t.b"]),
                // `legacy` exists only here, forcing a query-channel feed.
                prev: strs(&["SELECT", "t.a", "legacy"]),
                h_tilde: wave(4, 16, 0.19),
                g_tilde: wave(3, 16, 0.29),
                q: wave(3, 8, 0.41),
                dec_init: wave(1, 4, 0.7),
            }
        }
    }

    impl CheckScene for DecoderScene {
        fn params(&self) -> &ParamSet {
            &self.ps
        }
        fn params_mut(&mut self) -> &mut ParamSet {
            &mut self.ps
        }
        fn loss(&self, tape: &Tape) -> Var {
            let ps = &self.ps;
            let h_tilde = tape.constant(self.h_tilde.clone());
            let g_tilde = tape.constant(self.g_tilde.clone());
            let q = Some(tape.constant(self.q.clone()));
            let space = OutputSpace {
                reserved: &self.reserved,
                items: &self.items,
                prev_query: &self.prev,
            };
            // Gold walks all three channels so every feed path and output
            // head carries gradient: reserved, schema item, query-only.
            let gold = ["SELECT", "t.a", "legacy", "EOS"];
            let mut state = self
                .dec
                .begin(tape, ps, tape.constant(self.dec_init.clone()));
            let mut tok = self.dec.sos_vector(tape, ps);
            let mut loss: Option<Var> = None;
            for target in gold {
                let (next, step) = self.dec.step(tape, ps, &state, tok, h_tilde, g_tilde, q);
                state = next;
                let gate = self.dec.gate(tape, ps, step.o, step.context);
                let flat = self.dec.flat_probabilities(tape, ps, &gate, g_tilde, q);
                let l = self
                    .dec
                    .step_loss(tape, flat, &space, target)
                    .expect("gold covered");
                loss = Some(match loss {
                    Some(acc) => tape.add(acc, l),
                    None => l,
                });
                if target != "EOS" {
                    let feed = space.feed_for(target).expect("gold covered");
                    tok = self.dec.feed_vector(tape, ps, feed, g_tilde, q);
                }
            }
            loss.expect("nonempty gold")
        }
    }

    struct FullScene {
        model: Model,
        schema: DatabaseSchema,
        interaction: Interaction,
    }

    impl FullScene {
        fn new() -> Self {
            let train = small_synthetic();
            let config = ModelConfig {
                encoder: EncoderConfig {
                    l1: 1,
                    l2: 1,
                    d1: 8,
                    d2: 8,
                    heads: 2,
                    variant: Variant::Full,
                },
                embed_dim: 5,
                history_window: None,
                max_decode_len: 20,
            };
            let output_vocab = build_output_vocab(&train);
            let vocab = text_vocab(&train.schemas, &train.interactions, &output_vocab);
            let model = Model::new(config, output_vocab, ProviderSpec::Learned { vocab }, 7)
                .expect("valid model config");
            let interaction = train.interactions[0].clone();
            let schema = train.schema_of(&interaction).clone();
            FullScene {
                model,
                schema,
                interaction,
            }
        }
    }

    impl CheckScene for FullScene {
        fn params(&self) -> &ParamSet {
            &self.model.ps
        }
        fn params_mut(&mut self) -> &mut ParamSet {
            &mut self.model.ps
        }
        fn loss(&self, tape: &Tape) -> Var {
            let out = self
                .model
                .teacher_forced(tape, &self.schema, &self.interaction)
                .expect("fixture interaction encodes");
            let mut sum = out.turns[0].loss;
            for t in &out.turns[1..] {
                sum = tape.add(sum, t.loss);
            }
            sum
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{Feed, OutputEntry, SourceTags};

    fn dist(pairs: &[(&str, f64)]) -> OutputDistribution {
        OutputDistribution {
            entries: pairs
                .iter()
                .map(|(s, p)| OutputEntry {
                    surface: s.to_string(),
                    probability: *p,
                    tags: SourceTags::default(),
                    feed: Feed::Reserved(0),
                })
                .collect(),
        }
    }

    #[test]
    fn sequence_loss_matches_hand_arithmetic() {
        let d1 = dist(&[("SELECT", 0.5), ("FROM", 0.5)]);
        let d2 = dist(&[("SELECT", 0.75), ("FROM", 0.25)]);
        let gold = vec!["SELECT".to_string(), "FROM".to_string()];
        let (loss, unc) = sequence_loss(&[d1, d2], &gold);
        assert!((loss - (-(0.5f64.ln()) - 0.25f64.ln())).abs() < 1e-12);
        assert_eq!(unc, 0);
    }

    #[test]
    fn certain_gold_is_zero_loss_and_absent_gold_is_floored() {
        let sure = dist(&[("SELECT", 1.0)]);
        let gold = vec!["SELECT".to_string()];
        let (loss, unc) = sequence_loss(std::slice::from_ref(&sure), &gold);
        assert_eq!(loss, 0.0);
        assert_eq!(unc, 0);
        let missing = vec!["HAVING".to_string()];
        let (loss, unc) = sequence_loss(&[sure], &missing);
        assert!((loss - -(1e-12f64.ln())).abs() < 1e-9);
        assert_eq!(unc, 1);
    }

    #[test]
    fn batch_reweight_equalizes_interactions() {
        // Lengths 1 and 4, every utterance loss L: both interactions
        // contribute L, and the batch average is L.
        let l = 2.5;
        let rows = vec![(l, 0, 1), (l, 1, 4), (l, 1, 4), (l, 1, 4), (l, 1, 4)];
        assert!((batch_reweight(&rows) - l).abs() < 1e-12);
        assert_eq!(batch_reweight(&[(3.25, 7, 1)]), 3.25);
    }

    #[test]
    fn batch_reweight_differs_from_uniform_averaging() {
        let rows = vec![(1.0, 0, 2), (4.0, 1, 1), (3.0, 0, 2)];
        let mut shuffled = rows.clone();
        shuffled.swap(0, 2);
        assert_eq!(batch_reweight(&rows), batch_reweight(&shuffled));
        // Interaction 0 contributes (1+3)/2 = 2, interaction 1 contributes
        // 4; the reweighted mean of 3 differs from the uniform 8/3.
        assert!((batch_reweight(&rows) - 3.0).abs() < 1e-12);
        let uniform = (1.0 + 4.0 + 3.0) / 3.0;
        assert!((batch_reweight(&rows) - uniform).abs() > 1e-9);
    }

    #[test]
    fn warmup_ramps_linearly_and_tops_out() {
        let config = TrainConfig::default();
        let mut state = TrainState::default();
        state.step = 500;
        assert!((state.lr_schedule(&config, None) * config.base_lr - 5e-4).abs() < 1e-15);
        state.step = 1000;
        assert_eq!(state.lr_schedule(&config, None) * config.base_lr, 1e-3);
        state.step = 5000;
        assert_eq!(state.lr_schedule(&config, None) * config.base_lr, 1e-3);
        let mut last = 0.0;
        for s in 0..=1000 {
            state.step = s;
            let lr = state.lr_schedule(&config, None);
            assert!(lr >= last, "warmup must be monotone");
            last = lr;
        }
    }

    #[test]
    fn decay_requires_loss_up_and_accuracy_down() {
        let config = TrainConfig::default();
        let mut state = TrainState {
            step: 2000,
            ..Default::default()
        };
        let p = |loss, acc| DevPoint {
            loss,
            token_acc: acc,
            question_match: 0.0,
        };
        state.lr_schedule(&config, Some(p(1.0, 0.5)));
        // Loss up, accuracy also up: noise, no decay.
        let m = state.lr_schedule(&config, Some(p(1.2, 0.6)));
        assert_eq!(m * config.base_lr, 1e-3);
        // Loss up AND accuracy down: decay once.
        let m = state.lr_schedule(&config, Some(p(1.4, 0.5)));
        assert!((m * config.base_lr - 8e-4).abs() < 1e-15);
        // Again: decay compounds.
        let m = state.lr_schedule(&config, Some(p(1.6, 0.4)));
        assert!((m * config.base_lr - 6.4e-4).abs() < 1e-15);
        assert_eq!(state.decays, 2);
        assert_eq!(state.history.len(), 4);
    }

    #[test]
    fn adam_moves_groups_at_their_own_rates() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let mut ps = ParamSet::new();
        let fast = ps.register("dense.w", 1, 1, 1, &mut rng);
        let slow = ps.register("embedding.pretrained.table", 1, 1, 1, &mut rng);
        let f0 = ps.value(fast)[(0, 0)];
        let s0 = ps.value(slow)[(0, 0)];
        let tape = Tape::new();
        let loss = tape.add(
            tape.sum_all(tape.param(&ps, fast)),
            tape.sum_all(tape.param(&ps, slow)),
        );
        let grads = tape.backward(loss, ps.len());
        let mut adam = Adam::new(&ps);
        adam.step(&mut ps, &grads, 1e-2, 1e-4, 5.0);
        // Unit gradients: the first step size is exactly the learning rate.
        let df = (ps.value(fast)[(0, 0)] - f0).abs();
        let ds = (ps.value(slow)[(0, 0)] - s0).abs();
        assert!((df - 1e-2).abs() < 1e-6);
        assert!((ds - 1e-4).abs() < 1e-8);
    }

    #[test]
    fn adam_clip_preserves_gradient_direction() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamSet::new();
        let w = ps.register("w", 1, 2, 1, &mut rng);
        let tape = Tape::new();
        // Gradient (60, 80): norm 100, clip 5 scales to (3, 4).
        let x = tape.constant(ndarray::arr2(&[[60.0, 80.0]]));
        let loss = tape.sum_all(tape.mul(tape.param(&ps, w), x));
        let grads = tape.backward(loss, ps.len());
        let g = grads.get(w).unwrap();
        assert_eq!((g[(0, 0)], g[(0, 1)]), (60.0, 80.0));
        let before = ps.value(w).clone();
        let mut adam = Adam::new(&ps);
        adam.step(&mut ps, &grads, 1e-2, 1e-2, 5.0);
        let after = ps.value(w);
        // Both entries moved downhill; clipping rescales, never reorders.
        assert!(after[(0, 0)] < before[(0, 0)]);
        assert!(after[(0, 1)] < before[(0, 1)]);
    }

    #[test]
    fn linear_gradient_check_is_exact() {
        let report = gradient_check(CheckComponent::Linear, 1e-5);
        assert!(
            report.max_rel_error < 1e-8,
            "linear maps are exact: {report:?}"
        );
        assert!(report.scalars_checked >= 10);
    }

    #[test]
    fn config_validation_rejects_degenerate_knobs() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        let bad = TrainConfig {
            decay_factor: 0.0,
            ..ok.clone()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            base_lr: -1.0,
            ..ok.clone()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..ok
        };
        assert!(bad.validate().is_err());
    }
}

//! Command-line front end: corpus generation, training, prediction,
//! evaluation, graph inspection, and gradient checking.
//!
//! Every command accepts `--config <file.json>` holding the same keys as its
//! flags; flags override file values and unknown keys are rejected. The
//! fully resolved configuration is echoed as one JSON line before work
//! starts. Exit codes: 0 success, 1 usage error, 2 validation error, 3
//! runtime failure.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use convsql::data::synthetic::{DEV_FILE, SCHEMA_FILE, TRAIN_FILE};
use convsql::data::{
    generate_synthetic_corpus, load_interactions, load_schemas, Corpus, GeneratorConfig, Split,
};
use convsql::encoder::{EncoderConfig, Variant};
use convsql::eval::{evaluate, Prediction};
use convsql::graph::build_graph;
use convsql::model::{text_vocab, Model, ModelConfig, ProviderSpec};
use convsql::train::{
    gradient_check, predict_corpus, train, CheckComponent, TrainConfig,
};
use convsql::{Error, Result};

/// Default data directory when neither flag nor file sets one.
const DATA_DIR_ENV: &str = "CONVSQL_DATA_DIR";

#[derive(Parser)]
#[command(name = "convsql", version, about = "Conversational text-to-SQL at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic conversation corpus.
    GenSynthetic(GenArgs),
    /// Train a model and keep the best-dev checkpoint.
    Train(TrainArgs),
    /// Greedily decode a split with a trained checkpoint.
    Predict(PredictArgs),
    /// Score a prediction file with clause-level exact set match.
    Evaluate(EvaluateArgs),
    /// Dump a schema graph as DOT or JSON adjacency.
    InspectGraph(InspectArgs),
    /// Compare analytic gradients against finite differences.
    GradCheck(GradArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version surface as clap "errors" but are not.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_)
                | Error::SchemaValidation { .. }
                | Error::InteractionValidation(_) => 2,
                _ => 3,
            })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenSynthetic(a) => cmd_gen_synthetic(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::InspectGraph(a) => cmd_inspect_graph(a),
        Command::GradCheck(a) => cmd_grad_check(a),
    }
}

fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Bulk stdout writer; a vanished reader (piped into `head`) ends the
/// program quietly instead of panicking.
fn emit(s: &str) {
    let mut out = std::io::stdout().lock();
    if out.write_all(s.as_bytes()).is_err() {
        std::process::exit(0);
    }
}

fn read_config_file<T: for<'de> Deserialize<'de> + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!(
                "config file {}: {e}",
                p.display()
            )))
        }
    }
}

fn echo<T: Serialize>(resolved: &T) {
    let json = serde_json::to_string(resolved).expect("resolved config serializes");
    emit(&format!("resolved config: {json}\n"));
}

/// Loads one split from the standard three-file directory layout.
fn load_corpus(dir: &Path, split: Split) -> Result<Corpus> {
    let schemas = load_schemas(dir.join(SCHEMA_FILE))?;
    let file = match split {
        Split::Train => TRAIN_FILE,
        Split::Dev | Split::Test => DEV_FILE,
    };
    let interactions = load_interactions(dir.join(file), &schemas)?;
    Ok(Corpus {
        schemas,
        interactions,
        split,
    })
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        other => Err(Error::Config(format!(
            "unknown split `{other}` (expected train or dev)"
        ))),
    }
}

// ---------------------------------------------------------------- generate

#[derive(Args)]
struct GenArgs {
    /// JSON file with the same keys as the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    n_databases: Option<usize>,
    #[arg(long)]
    tables_per_db: Option<usize>,
    #[arg(long)]
    columns_per_table: Option<usize>,
    #[arg(long)]
    n_interactions: Option<usize>,
    #[arg(long)]
    turns_per_interaction: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GenFile {
    out_dir: Option<PathBuf>,
    n_databases: Option<usize>,
    tables_per_db: Option<usize>,
    columns_per_table: Option<usize>,
    n_interactions: Option<usize>,
    turns_per_interaction: Option<usize>,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct GenResolved<'a> {
    out_dir: &'a Path,
    #[serde(flatten)]
    generator: &'a GeneratorConfig,
}

fn cmd_gen_synthetic(a: GenArgs) -> Result<()> {
    let file: GenFile = read_config_file(&a.config)?;
    let defaults = GeneratorConfig::default();
    let cfg = GeneratorConfig {
        n_databases: a.n_databases.or(file.n_databases).unwrap_or(defaults.n_databases),
        tables_per_db: a
            .tables_per_db
            .or(file.tables_per_db)
            .unwrap_or(defaults.tables_per_db),
        columns_per_table: a
            .columns_per_table
            .or(file.columns_per_table)
            .unwrap_or(defaults.columns_per_table),
        n_interactions: a
            .n_interactions
            .or(file.n_interactions)
            .unwrap_or(defaults.n_interactions),
        turns_per_interaction: a
            .turns_per_interaction
            .or(file.turns_per_interaction)
            .unwrap_or(defaults.turns_per_interaction),
        seed: a.seed.or(file.seed).unwrap_or(defaults.seed),
    };
    let out_dir = a.out_dir.or(file.out_dir).unwrap_or_else(default_data_dir);
    echo(&GenResolved {
        out_dir: &out_dir,
        generator: &cfg,
    });
    let corpus = generate_synthetic_corpus(&cfg)?;
    corpus.write_to(&out_dir)?;
    emit(&format!(
        "wrote {} train and {} dev interactions over {} databases to {}\n",
        corpus.train.interactions.len(),
        corpus.dev.interactions.len(),
        cfg.n_databases,
        out_dir.display()
    ));
    Ok(())
}

// ------------------------------------------------------------------- train

#[derive(Args)]
struct TrainArgs {
    /// JSON file with the same keys as the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// full | no_cross_turn | no_intra_turn | gru_interaction | fully_connected
    #[arg(long)]
    variant: Option<Variant>,
    /// Model dimension (attention width; both layer stacks share it).
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Cross-turn layer count.
    #[arg(long)]
    l1: Option<usize>,
    /// Intra-turn layer count.
    #[arg(long)]
    l2: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Attendable previous turns; omitted = unbounded.
    #[arg(long)]
    history_window: Option<usize>,
    #[arg(long)]
    max_decode_len: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    embedding_lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    decay_factor: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dev evaluation cadence in steps; omitted = once per epoch.
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainFile {
    data_dir: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    variant: Option<Variant>,
    d: Option<usize>,
    heads: Option<usize>,
    l1: Option<usize>,
    l2: Option<usize>,
    embed_dim: Option<usize>,
    history_window: Option<usize>,
    max_decode_len: Option<usize>,
    base_lr: Option<f64>,
    embedding_lr: Option<f64>,
    warmup_steps: Option<usize>,
    decay_factor: Option<f64>,
    batch_size: Option<usize>,
    max_epochs: Option<usize>,
    seed: Option<u64>,
    eval_every: Option<usize>,
    clip_norm: Option<f64>,
}

#[derive(Serialize)]
struct TrainResolved<'a> {
    data_dir: &'a Path,
    out_dir: &'a Path,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let file: TrainFile = read_config_file(&a.config)?;
    let data_dir = a.data_dir.or(file.data_dir).unwrap_or_else(default_data_dir);
    let out_dir = a
        .out_dir
        .or(file.out_dir)
        .unwrap_or_else(|| PathBuf::from("run"));

    let ec = EncoderConfig::default();
    let d = a.d.or(file.d).unwrap_or(ec.d1);
    let model_config = ModelConfig {
        encoder: EncoderConfig {
            l1: a.l1.or(file.l1).unwrap_or(ec.l1),
            l2: a.l2.or(file.l2).unwrap_or(ec.l2),
            d1: d,
            d2: d,
            heads: a.heads.or(file.heads).unwrap_or(ec.heads),
            variant: a.variant.or(file.variant).unwrap_or(ec.variant),
        },
        embed_dim: a.embed_dim.or(file.embed_dim).unwrap_or(300),
        history_window: a.history_window.or(file.history_window),
        max_decode_len: a.max_decode_len.or(file.max_decode_len).unwrap_or(100),
    };
    let tc = TrainConfig::default();
    let train_config = TrainConfig {
        base_lr: a.base_lr.or(file.base_lr).unwrap_or(tc.base_lr),
        embedding_lr: a.embedding_lr.or(file.embedding_lr).unwrap_or(tc.embedding_lr),
        warmup_steps: a.warmup_steps.or(file.warmup_steps).unwrap_or(tc.warmup_steps),
        decay_factor: a.decay_factor.or(file.decay_factor).unwrap_or(tc.decay_factor),
        batch_size: a.batch_size.or(file.batch_size).unwrap_or(tc.batch_size),
        max_epochs: a.max_epochs.or(file.max_epochs).unwrap_or(tc.max_epochs),
        seed: a.seed.or(file.seed).unwrap_or(tc.seed),
        eval_every: a.eval_every.or(file.eval_every),
        clip_norm: a.clip_norm.or(file.clip_norm).unwrap_or(tc.clip_norm),
    };
    echo(&TrainResolved {
        data_dir: &data_dir,
        out_dir: &out_dir,
        model: &model_config,
        train: &train_config,
    });

    let train_corpus = load_corpus(&data_dir, Split::Train)?;
    let dev_corpus = load_corpus(&data_dir, Split::Dev)?;
    let mut model = build_model(&model_config, &train_corpus, &dev_corpus, train_config.seed)?;
    let outcome = train(
        &mut model,
        &train_corpus,
        &dev_corpus,
        &train_config,
        &out_dir,
    )?;
    emit(&format!(
        "best dev: loss {:.4}, token acc {:.4}, question match {:.4}\n",
        outcome.best.loss, outcome.best.token_acc, outcome.best.question_match
    ));
    emit(&format!("checkpoint: {}\n", outcome.checkpoint.display()));
    emit(&format!("metrics: {}\n", outcome.metrics_log.display()));
    Ok(())
}

/// Assembles a fresh model sized for the given corpora. The text vocabulary
/// covers every loaded schema (schemas are inputs, not labels) plus train
/// utterances and gold queries.
fn build_model(
    config: &ModelConfig,
    train_corpus: &Corpus,
    dev_corpus: &Corpus,
    seed: u64,
) -> Result<Model> {
    let mut all_schemas = train_corpus.schemas.clone();
    all_schemas.extend(dev_corpus.schemas.clone());
    let output_vocab = convsql::data::build_output_vocab(train_corpus);
    let vocab = text_vocab(&all_schemas, &train_corpus.interactions, &output_vocab);
    Model::new(
        config.clone(),
        output_vocab,
        ProviderSpec::Learned { vocab },
        seed,
    )
}

// ----------------------------------------------------------------- predict

#[derive(Args)]
struct PredictArgs {
    /// JSON file with the same keys as the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// train | dev
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output JSONL path; one prediction record per line.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PredictFile {
    data_dir: Option<PathBuf>,
    split: Option<String>,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct PredictResolved<'a> {
    data_dir: &'a Path,
    split: &'a str,
    checkpoint: &'a Path,
    out: &'a Path,
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let file: PredictFile = read_config_file(&a.config)?;
    let data_dir = a.data_dir.or(file.data_dir).unwrap_or_else(default_data_dir);
    let split_name = a.split.or(file.split).unwrap_or_else(|| "dev".into());
    let split = parse_split(&split_name)?;
    let checkpoint = a
        .checkpoint
        .or(file.checkpoint)
        .ok_or_else(|| Error::Config("predict requires --checkpoint".into()))?;
    let out = a
        .out
        .or(file.out)
        .unwrap_or_else(|| PathBuf::from("predictions.jsonl"));
    echo(&PredictResolved {
        data_dir: &data_dir,
        split: &split_name,
        checkpoint: &checkpoint,
        out: &out,
    });

    let corpus = load_corpus(&data_dir, split)?;
    let model = Model::load(&checkpoint)?;
    let preds = predict_corpus(&model, &corpus)?;
    write_predictions(&out, &preds)?;
    emit(&format!("wrote {} predictions to {}\n", preds.len(), out.display()));
    Ok(())
}

fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for p in preds {
        let line = serde_json::to_string(p).expect("prediction serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| Error::Evaluation(format!("bad prediction line: {e}")))
        })
        .collect()
}

// ---------------------------------------------------------------- evaluate

#[derive(Args)]
struct EvaluateArgs {
    /// JSON file with the same keys as the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// train | dev
    #[arg(long)]
    split: Option<String>,
    /// Prediction JSONL produced by `predict`.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Score the corpus's own gold queries (pipeline sanity check).
    #[arg(long, default_value_t = false)]
    gold: bool,
    /// Where to write the JSON report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvaluateFile {
    data_dir: Option<PathBuf>,
    split: Option<String>,
    predictions: Option<PathBuf>,
    gold: Option<bool>,
    report: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvaluateResolved<'a> {
    data_dir: &'a Path,
    split: &'a str,
    predictions: Option<&'a Path>,
    gold: bool,
    report: Option<&'a Path>,
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let file: EvaluateFile = read_config_file(&a.config)?;
    let data_dir = a.data_dir.or(file.data_dir).unwrap_or_else(default_data_dir);
    let split_name = a.split.or(file.split).unwrap_or_else(|| "dev".into());
    let split = parse_split(&split_name)?;
    let gold = a.gold || file.gold.unwrap_or(false);
    let predictions = a.predictions.or(file.predictions);
    let report_path = a.report.or(file.report);
    echo(&EvaluateResolved {
        data_dir: &data_dir,
        split: &split_name,
        predictions: predictions.as_deref(),
        gold,
        report: report_path.as_deref(),
    });

    let corpus = load_corpus(&data_dir, split)?;
    let preds = if gold {
        if predictions.is_some() {
            return Err(Error::Config(
                "--gold and --predictions are mutually exclusive".into(),
            ));
        }
        gold_as_predictions(&corpus)
    } else {
        let path = predictions
            .ok_or_else(|| Error::Config("evaluate requires --predictions or --gold".into()))?;
        read_predictions(&path)?
    };
    let report = evaluate(&preds, &corpus)?;
    emit(&report.text_table());
    if let Some(path) = report_path {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        emit(&format!("report: {}\n", path.display()));
    }
    Ok(())
}

fn gold_as_predictions(corpus: &Corpus) -> Vec<Prediction> {
    let mut preds = Vec::new();
    for (i, inter) in corpus.interactions.iter().enumerate() {
        for (t, turn) in inter.turns.iter().enumerate() {
            let gold = convsql::data::detokenize(&turn.gold_query_tokens);
            preds.push(Prediction {
                interaction_index: i,
                db_id: inter.db_id.clone(),
                turn_index: t,
                predicted_query: gold.clone(),
                gold_query: gold,
            });
        }
    }
    preds
}

// ------------------------------------------------------------ inspect-graph

#[derive(Args)]
struct InspectArgs {
    /// JSON file with the same keys as the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Database id from the schema file.
    #[arg(long)]
    db: Option<String>,
    /// `table.column` (`table.*` for the star item): print its
    /// distance-<=-1 neighborhood instead of the whole graph.
    #[arg(long)]
    node: Option<String>,
    /// dot | json
    #[arg(long)]
    format: Option<String>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct InspectFile {
    data_dir: Option<PathBuf>,
    db: Option<String>,
    node: Option<String>,
    format: Option<String>,
}

#[derive(Serialize)]
struct InspectResolved<'a> {
    data_dir: &'a Path,
    db: &'a str,
    node: Option<&'a str>,
    format: &'a str,
}

fn cmd_inspect_graph(a: InspectArgs) -> Result<()> {
    let file: InspectFile = read_config_file(&a.config)?;
    let data_dir = a.data_dir.or(file.data_dir).unwrap_or_else(default_data_dir);
    let db = a
        .db
        .or(file.db)
        .ok_or_else(|| Error::Config("inspect-graph requires --db".into()))?;
    let node = a.node.or(file.node);
    let format = a.format.or(file.format).unwrap_or_else(|| "dot".into());
    if format != "dot" && format != "json" {
        return Err(Error::Config(format!(
            "unknown format `{format}` (expected dot or json)"
        )));
    }
    echo(&InspectResolved {
        data_dir: &data_dir,
        db: &db,
        node: node.as_deref(),
        format: &format,
    });

    let schemas = load_schemas(data_dir.join(SCHEMA_FILE))?;
    let schema = schemas
        .get(&db)
        .ok_or_else(|| Error::Config(format!("no database `{db}` in schema file")))?;
    let graph = build_graph(schema);
    let names: Vec<String> = schema
        .items
        .iter()
        .map(|it| format!("{}.{}", it.table_name, it.column_name))
        .collect();

    if let Some(node) = node {
        let (table, column) = node.split_once('.').ok_or_else(|| {
            Error::Config(format!("node `{node}` is not in table.column form"))
        })?;
        let idx = schema.item_index(table, column).ok_or_else(|| {
            Error::Config(format!("no schema item `{node}` in database `{db}`"))
        })?;
        let mut s = String::new();
        for n in graph.neighborhood(idx) {
            s.push_str(&names[n]);
            s.push('\n');
        }
        emit(&s);
        return Ok(());
    }

    match format.as_str() {
        "dot" => {
            let mut s = format!("graph {} {{\n", sanitize_dot_id(&db));
            for name in &names {
                s.push_str(&format!("  \"{name}\";\n"));
            }
            for &(a, b) in &graph.edges {
                if a != b {
                    s.push_str(&format!("  \"{}\" -- \"{}\";\n", names[a], names[b]));
                }
            }
            s.push_str("}\n");
            emit(&s);
        }
        _ => {
            let mut adjacency: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
            for i in 0..graph.node_count {
                adjacency.insert(
                    &names[i],
                    graph.neighborhood(i).iter().map(|&n| names[n].as_str()).collect(),
                );
            }
            let json =
                serde_json::to_string_pretty(&adjacency).expect("adjacency serializes");
            emit(&json);
            emit("\n");
        }
    }
    Ok(())
}

fn sanitize_dot_id(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_alphanumeric() || c == '_' { c } else { '_' })
        .collect()
}

// -------------------------------------------------------------- grad-check

#[derive(Args)]
struct GradArgs {
    /// JSON file with the same keys as the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// linear | graph_encoder | text_encoder | decoder | full
    #[arg(long)]
    component: Option<CheckComponent>,
    /// Central-difference step.
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GradFile {
    component: Option<String>,
    epsilon: Option<f64>,
}

#[derive(Serialize)]
struct GradResolved {
    component: String,
    epsilon: f64,
}

fn cmd_grad_check(a: GradArgs) -> Result<()> {
    let file: GradFile = read_config_file(&a.config)?;
    let component = match (a.component, file.component) {
        (Some(c), _) => c,
        (None, Some(s)) => s.parse()?,
        (None, None) => CheckComponent::Full,
    };
    let epsilon = a.epsilon.or(file.epsilon).unwrap_or(1e-5);
    if epsilon <= 0.0 {
        return Err(Error::Config("epsilon must be positive".into()));
    }
    echo(&GradResolved {
        component: format!("{component:?}"),
        epsilon,
    });
    let report = gradient_check(component, epsilon);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    emit(&format!("{json}\n"));
    Ok(())
}

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::{json, Map, Value};

use medtok::corpus::{load_codes, load_kg, load_mapping, CodeRegistry, KnowledgeGraph, SyntheticConfig};
use medtok::graphenc::{extract_subgraph, DEFAULT_CAP, DEFAULT_HOPS};
use medtok::textenc::{load_text_embeddings, EmbeddingClient, EMBED_URL_ENV};
use medtok::tokenizer::{TokenSequence, TrainedTokenizer};
use medtok::trainer::{write_loss_csv, TrainConfig, Trainer, TrainingData};

#[derive(Parser)]
#[command(name = "medtok", version, about = "Multimodal tokenizer for medical codes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CorpusArgs {
    /// Line-delimited JSON code records.
    #[arg(long)]
    codes: PathBuf,
    #[arg(long)]
    kg_nodes: PathBuf,
    #[arg(long)]
    kg_edges: PathBuf,
    /// `code_id<TAB>node_id` mapping.
    #[arg(long)]
    map: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Pooled text embeddings (MTEB).
    #[arg(long)]
    text_emb: PathBuf,
    /// Per-token text states (MTES).
    #[arg(long)]
    text_states: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    codebook_size: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Four comma-separated region fractions.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    region_split: Option<Vec<f64>>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Check ingestion files and report counts and unmapped codes.
    Validate(CorpusArgs),
    /// Print the subgraph extracted for one code.
    Subgraph {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        code: String,
        #[arg(long, default_value_t = DEFAULT_HOPS)]
        hops: usize,
        #[arg(long, default_value_t = DEFAULT_CAP)]
        cap: usize,
    },
    /// Embed code descriptions with a remote embedding service.
    Embed {
        #[arg(long)]
        codes: PathBuf,
        /// Defaults to the MEDTOK_EMBED_URL environment variable.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, default_value_t = 30)]
        timeout_secs: u64,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        states_out: Option<PathBuf>,
    },
    /// Train a tokenizer and write the artifact to --out.
    Train(Box<TrainArgs>),
    /// Token sequence of one code.
    Tokenize {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        code: String,
        #[arg(long)]
        json: bool,
    },
    /// Tokenize every code listed in a file, one JSON line each.
    TokenizeBatch {
        #[arg(long)]
        artifact: PathBuf,
        /// One code id per line.
        #[arg(long)]
        codes_file: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the codebook as an MTEB embedding file.
    ExportEmbeddings {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise an artifact.
    Inspect {
        #[arg(long)]
        artifact: PathBuf,
    },
    /// Write a seeded synthetic corpus.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        families: usize,
        #[arg(long, default_value_t = 500)]
        codes_per_family: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_corpus(a: &CorpusArgs) -> Result<(CodeRegistry, KnowledgeGraph, medtok::corpus::MappingReport)> {
    let registry = load_codes(&a.codes)?;
    let kg = load_kg(&a.kg_nodes, &a.kg_edges)?;
    let (registry, report) = load_mapping(&a.map, registry, &kg)?;
    Ok((registry, kg, report))
}

fn validate(a: &CorpusArgs) -> Result<()> {
    let mut out = io::stdout().lock();
    let (registry, kg, report) = load_corpus(a)?;
    writeln!(out, "codes\t{}", registry.len())?;
    for (system, n) in registry.counts() {
        writeln!(out, "  {}\t{n}", system.tag())?;
    }
    writeln!(out, "kg nodes\t{}", kg.node_count())?;
    writeln!(out, "kg edges\t{}", kg.edge_count())?;
    writeln!(out, "mapping rows\t{}", report.mapping_rows)?;
    writeln!(out, "mapped codes\t{}", report.mapped_codes)?;
    writeln!(out, "unmapped codes\t{}", report.unmapped.len())?;
    for id in &report.unmapped {
        writeln!(out, "  {id}")?;
    }
    Ok(())
}

fn subgraph(a: &CorpusArgs, code: &str, hops: usize, cap: usize) -> Result<()> {
    let mut out = io::stdout().lock();
    let (registry, kg, _) = load_corpus(a)?;
    let Some(c) = registry.get(code) else {
        bail!("unknown code {code:?}");
    };
    let g = extract_subgraph(c, &kg, hops, cap);
    let centers: BTreeSet<usize> = g.centers.iter().copied().collect();
    writeln!(out, "nodes\t{}", g.len())?;
    for (i, n) in g.nodes.iter().enumerate() {
        let mark = if centers.contains(&i) { "\tcenter" } else { "" };
        writeln!(out, "{i}\t{}\t{}{mark}", n.id, n.type_label)?;
    }
    let edges = g.edges();
    writeln!(out, "edges\t{}", edges.len())?;
    for (u, v) in edges {
        writeln!(out, "{}\t{}", g.nodes[u].id, g.nodes[v].id)?;
    }
    Ok(())
}

fn embed(
    codes: &Path,
    endpoint: Option<String>,
    timeout: Duration,
    batch: usize,
    out: &Path,
    states_out: Option<&Path>,
) -> Result<()> {
    let registry = load_codes(codes)?;
    let mut client = match endpoint {
        Some(url) => EmbeddingClient::new(url, timeout),
        None => EmbeddingClient::from_env(timeout).with_context(|| format!("no --endpoint and {EMBED_URL_ENV} unset"))?,
    };
    let set = client.embed_registry(&registry, batch)?;
    set.save(out, states_out)?;
    println!("embedded {} codes, dim {}", set.len(), set.dim());
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let Some(mut cfg) = TrainConfig::preset(&a.preset) else {
        bail!("unknown preset {:?}; expected desk or paper", a.preset);
    };
    if let Some(v) = a.codebook_size {
        cfg.codebook_size = v;
    }
    if let Some(v) = a.dim {
        cfg.dim = v;
    }
    if let Some(v) = a.topk {
        cfg.topk = v;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    if a.lambda.is_some() {
        cfg.lambda = a.lambda;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = &a.region_split {
        cfg.region_split = v[..].try_into().context("--region-split takes four values")?;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = train_config(a)?;
    let (registry, kg, _) = load_corpus(&a.corpus)?;
    let text = load_text_embeddings(&a.text_emb, a.text_states.as_deref())?;
    let data = TrainingData::build(&registry, &kg, &text, cfg.hops, cfg.cap)?;
    info!("training on {} codes, {} steps", data.len(), cfg.steps);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut trainer = match &a.resume {
        Some(dir) => Trainer::resume(cfg, &data, dir)?,
        None => Trainer::new(cfg, &data)?,
    };
    trainer.run(Some(&a.out))?;
    let trace = &trainer.state().trace;
    write_loss_csv(&a.out.join("loss_trace.csv"), trace)?;
    let tk = trainer.freeze()?;
    tk.save(&a.out)?;
    if let Some(last) = trace.last() {
        println!("step {} total loss {:.6}", last.step, last.total);
    }
    println!("artifact written to {}", a.out.display());
    Ok(())
}

fn groups_json(s: &TokenSequence) -> (Value, Value) {
    let mut tokens = Map::new();
    let mut weights = Map::new();
    for (g, name) in TokenSequence::GROUPS.iter().enumerate() {
        let (ids, w) = s.group(g);
        tokens.insert(name.to_string(), json!(ids));
        weights.insert(name.to_string(), json!(w));
    }
    (Value::Object(tokens), Value::Object(weights))
}

fn sequence_json(s: &TokenSequence) -> Value {
    let (tokens, weights) = groups_json(s);
    json!({"code_id": s.code_id, "tokens": tokens, "weights": weights})
}

fn tokenize(artifact: &Path, code: &str, as_json: bool) -> Result<()> {
    let tk = TrainedTokenizer::load(artifact)?;
    let s = tk.tokenize(code)?;
    if as_json {
        println!("{}", sequence_json(&s));
    } else {
        let ids: Vec<String> = s.ids.iter().map(usize::to_string).collect();
        println!("{}\t{}", s.code_id, ids.join(" "));
    }
    Ok(())
}

fn tokenize_batch(artifact: &Path, codes_file: &Path, out: &Path) -> Result<()> {
    let tk = TrainedTokenizer::load(artifact)?;
    let list = fs::read_to_string(codes_file).with_context(|| format!("reading {}", codes_file.display()))?;
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = BufWriter::new(file);
    let mut n = 0;
    for line in list.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let s = tk.tokenize(line)?;
        writeln!(w, "{}", sequence_json(&s))?;
        n += 1;
    }
    w.flush()?;
    println!("tokenized {n} codes into {}", out.display());
    Ok(())
}

fn inspect(artifact: &Path) -> Result<()> {
    let mut out = io::stdout().lock();
    let tk = TrainedTokenizer::load(artifact)?;
    let cb = tk.codebook();
    writeln!(out, "codebook size N\t{}", cb.len())?;
    writeln!(out, "dimension d\t{}", cb.dim())?;
    writeln!(out, "top-K\t{}", tk.topk())?;
    let names = ["text_specific", "graph_specific", "text_shared", "graph_shared"];
    for (name, r) in names.iter().zip(cb.layout().ranges()) {
        writeln!(out, "region {name}\t{}..{}", r.start, r.end)?;
    }
    writeln!(out, "corpus codes\t{}", tk.len())?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Err(e) if e.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) => Ok(()),
        other => other,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Validate(a) => validate(&a),
        Command::Subgraph { corpus, code, hops, cap } => subgraph(&corpus, &code, hops, cap),
        Command::Embed {
            codes,
            endpoint,
            timeout_secs,
            batch,
            out,
            states_out,
        } => embed(&codes, endpoint, Duration::from_secs(timeout_secs), batch, &out, states_out.as_deref()),
        Command::Train(a) => train(&a),
        Command::Tokenize { artifact, code, json } => tokenize(&artifact, &code, json),
        Command::TokenizeBatch { artifact, codes_file, out } => tokenize_batch(&artifact, &codes_file, &out),
        Command::ExportEmbeddings { artifact, out } => {
            let tk = TrainedTokenizer::load(&artifact)?;
            tk.export_token_embeddings(&out)?;
            println!("wrote {} token embeddings to {}", tk.codebook().len(), out.display());
            Ok(())
        }
        Command::Inspect { artifact } => inspect(&artifact),
        Command::GenSynthetic {
            out,
            families,
            codes_per_family,
            seed,
        } => {
            let corpus = SyntheticConfig {
                families,
                codes_per_family,
                seed,
                ..SyntheticConfig::default()
            }
            .generate()?;
            let files = corpus.write_to(&out)?;
            println!("wrote {} codes to {}", corpus.registry.len(), out.display());
            info!("codes file {}", files.codes.display());
            Ok(())
        }
    }
}

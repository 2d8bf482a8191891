//! `bti`: explain paragraph similarity, query a corpus, run the sanity test.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use bti::baselines::{tfidf_w2v_explain, IgConfig, TfidfStats, WordVectorTable};
use bti::corpus::{build_index, ingest, ingest_pairs, SimilarityIndex};
use bti::encoder::{EmbeddingTap, EncoderConfig, EncoderWeights};
use bti::pipeline::{explain_text, BandwidthPolicy, ExplainConfig, SaliencyLayer, SaliencyMethod, SaliencySource};
use bti::report::{render_report, ReportFormat};
use bti::sanity::randomization_test;
use bti::tokenizer::Vocabulary;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bti", version, about = "Explain why two paragraphs are similar under a BERT-style encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Explain the similarity of two paragraphs.
    Explain(ExplainArgs),
    /// Rank corpus items by similarity to a seed item.
    Nearest(NearestArgs),
    /// Compare explanations under the given weights and random weights.
    Sanity(SanityArgs),
    /// Explain with BTI or one of the baseline methods.
    Compare(CompareArgs),
    /// Write a randomly initialized weight file.
    InitRandom(InitArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    GradTimesActivation,
    Activation,
    Gradient,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayerArg {
    Embedding,
    Last,
}

#[derive(Clone, Copy, ValueEnum)]
enum TapArg {
    Pre,
    Post,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Json,
    Html,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Bti,
    Vg,
    Ig,
    Tfidf,
}

#[derive(Args)]
struct Paragraphs {
    /// File holding the first paragraph.
    #[arg(long, value_name = "FILE")]
    a: PathBuf,
    /// File holding the second paragraph.
    #[arg(long, value_name = "FILE")]
    b: PathBuf,
}

#[derive(Args)]
struct Selection {
    #[arg(long, value_enum, default_value = "text")]
    format: FormatArg,
    /// Number of highest-scoring clusters to keep.
    #[arg(long, default_value_t = 2)]
    top_k: usize,
    #[arg(long, value_enum, default_value = "grad-times-activation")]
    saliency_source: SourceArg,
    #[arg(long, value_enum, default_value = "embedding")]
    layer: LayerArg,
    /// Embedding activation the gradient is taken against.
    #[arg(long, value_enum, default_value = "pre")]
    tap: TapArg,
    /// Fixed mean-shift bandwidth.
    #[arg(long, conflicts_with = "bandwidth_quantile")]
    bandwidth: Option<f64>,
    /// Bandwidth as a quantile of pairwise score distances.
    #[arg(long)]
    bandwidth_quantile: Option<f64>,
    /// Write the report here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long, value_name = "FILE")]
    weights: PathBuf,
    #[arg(long, value_name = "FILE")]
    vocab: PathBuf,
    #[command(flatten)]
    paragraphs: Paragraphs,
    #[command(flatten)]
    selection: Selection,
}

#[derive(Args)]
struct NearestArgs {
    #[arg(long, value_name = "FILE")]
    weights: PathBuf,
    #[arg(long, value_name = "FILE")]
    vocab: PathBuf,
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    #[arg(long)]
    seed_id: String,
    #[arg(short = 'k', default_value_t = 5)]
    k: usize,
    /// Load a prebuilt index instead of encoding the corpus.
    #[arg(long, value_name = "FILE")]
    index: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    save_index: Option<PathBuf>,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SanityArgs {
    #[arg(long, value_name = "FILE")]
    weights: PathBuf,
    #[arg(long, value_name = "FILE")]
    vocab: PathBuf,
    #[arg(long, value_name = "FILE")]
    pairs: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    top_k: usize,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long, value_name = "FILE")]
    weights: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
    /// Word vectors, for `tfidf`.
    #[arg(long, value_name = "FILE")]
    vectors: Option<PathBuf>,
    /// Reference corpus for document frequencies, for `tfidf`.
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    /// Integration steps, for `ig`.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[command(flatten)]
    paragraphs: Paragraphs,
    #[command(flatten)]
    selection: Selection,
}

#[derive(Args)]
struct InitArgs {
    /// `V,h,L,A,I,N`: vocabulary, hidden, layers, heads, intermediate, max length.
    #[arg(long, default_value = "1000,64,2,4,256,128", value_parser = parse_config)]
    config: EncoderConfig,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

fn parse_config(s: &str) -> Result<EncoderConfig, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let [vocab_size, hidden, layers, heads, intermediate, max_len] = v[..] else {
        return Err(format!("expected six comma-separated integers, got {}", v.len()));
    };
    let cfg = EncoderConfig {
        vocab_size,
        hidden,
        layers,
        heads,
        intermediate,
        max_len,
        ..EncoderConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

/// Errors that should exit with the usage status rather than the data status.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

impl Selection {
    fn config(&self) -> anyhow::Result<ExplainConfig> {
        let bandwidth = match (self.bandwidth, self.bandwidth_quantile) {
            (Some(b), _) => BandwidthPolicy::Fixed(b),
            (None, Some(q)) => BandwidthPolicy::Quantile(q),
            (None, None) => BandwidthPolicy::default(),
        };
        let cfg = ExplainConfig {
            top_k: self.top_k,
            saliency_source: match self.saliency_source {
                SourceArg::GradTimesActivation => SaliencySource::GradTimesActivation,
                SourceArg::Activation => SaliencySource::ActivationOnly,
                SourceArg::Gradient => SaliencySource::GradientOnly,
            },
            saliency_layer: match self.layer {
                LayerArg::Embedding => SaliencyLayer::Embedding,
                LayerArg::Last => SaliencyLayer::Last,
            },
            embedding_tap: match self.tap {
                TapArg::Pre => EmbeddingTap::PreNorm,
                TapArg::Post => EmbeddingTap::PostNorm,
            },
            bandwidth,
            ..ExplainConfig::default()
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        bandwidth.resolve::<f64>(&[0.0, 1.0]).map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    fn format(&self) -> ReportFormat {
        match self.format {
            FormatArg::Text => ReportFormat::Text,
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Html => ReportFormat::Html,
        }
    }
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_model(weights: &Path, vocab: &Path) -> anyhow::Result<(EncoderWeights<f64>, Vocabulary)> {
    let w = EncoderWeights::load(weights).with_context(|| format!("loading weights {}", weights.display()))?;
    let v = Vocabulary::load(vocab).with_context(|| format!("loading vocabulary {}", vocab.display()))?;
    if v.len() != w.config.vocab_size {
        bail!(
            "vocabulary has {} tokens but the weights expect {}",
            v.len(),
            w.config.vocab_size
        );
    }
    Ok((w, v))
}

fn emit(bytes: &[u8], out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn run_explain(args: &ExplainArgs) -> anyhow::Result<()> {
    let cfg = args.selection.config()?;
    let (w, v) = load_model(&args.weights, &args.vocab)?;
    let a = read_text(&args.paragraphs.a)?;
    let b = read_text(&args.paragraphs.b)?;
    let e = explain_text(&a, &b, &v, &w, &cfg, &SaliencyMethod::Bti)?;
    let r = render_report(&e, args.selection.format())?;
    emit(&r.payload, args.selection.out.as_deref())
}

fn run_compare(args: &CompareArgs) -> anyhow::Result<()> {
    let cfg = args.selection.config()?;
    let a = read_text(&args.paragraphs.a)?;
    let b = read_text(&args.paragraphs.b)?;
    let e = if args.method == MethodArg::Tfidf {
        let (Some(vectors), Some(corpus)) = (&args.vectors, &args.corpus) else {
            return Err(usage("--method tfidf needs --vectors and --corpus"));
        };
        let docs: Vec<String> = ingest(corpus)?.into_iter().map(|i| i.description).collect();
        let stats = TfidfStats::build(&docs, cfg.tokenizer)?;
        let table = WordVectorTable::<f64>::load(vectors)?;
        tfidf_w2v_explain(&a, &b, &stats, &table, &cfg)?
    } else {
        let (Some(weights), Some(vocab)) = (&args.weights, &args.vocab) else {
            return Err(usage("this method needs --weights and --vocab"));
        };
        if args.method == MethodArg::Ig && args.steps == 0 {
            return Err(usage("--steps must be at least 1"));
        }
        let (w, v) = load_model(weights, vocab)?;
        let method = match args.method {
            MethodArg::Bti => SaliencyMethod::Bti,
            MethodArg::Vg => SaliencyMethod::VanillaGradients,
            _ => SaliencyMethod::IntegratedGradients(IgConfig {
                steps: args.steps,
                ..IgConfig::default()
            }),
        };
        explain_text(&a, &b, &v, &w, &cfg, &method)?
    };
    let r = render_report(&e, args.selection.format())?;
    emit(&r.payload, args.selection.out.as_deref())
}

fn run_nearest(args: &NearestArgs) -> anyhow::Result<()> {
    if args.k == 0 {
        return Err(usage("-k must be at least 1"));
    }
    let (w, v) = load_model(&args.weights, &args.vocab)?;
    let index = match &args.index {
        Some(p) => {
            let idx = SimilarityIndex::load(p).with_context(|| format!("loading index {}", p.display()))?;
            idx.check_weights(&w)?;
            idx
        }
        None => build_index(&ingest(&args.corpus)?, &w, &v, ExplainConfig::default().tokenizer)?,
    };
    if let Some(p) = &args.save_index {
        index.save(p).with_context(|| format!("writing {}", p.display()))?;
    }
    let hits = index.nearest(&args.seed_id, args.k)?;
    let mut out = String::new();
    if args.json {
        let rows: Vec<_> = hits
            .iter()
            .map(|(id, c)| serde_json::json!({ "id": id, "cosine": c }))
            .collect();
        out = serde_json::to_string_pretty(&rows)? + "\n";
    } else {
        let width = hits.iter().map(|(id, _)| id.chars().count()).max().unwrap_or(0);
        for (rank, (id, c)) in hits.iter().enumerate() {
            out.push_str(&format!("{:>3}  {id:<width$}  {c:.6}\n", rank + 1));
        }
    }
    emit(out.as_bytes(), None)
}

fn run_sanity(args: &SanityArgs) -> anyhow::Result<()> {
    let cfg = ExplainConfig {
        top_k: args.top_k,
        ..ExplainConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let (w, v) = load_model(&args.weights, &args.vocab)?;
    let pairs = ingest_pairs(&args.pairs)?;
    let report = randomization_test(&pairs, &w, args.seed, &v, &cfg)?;
    emit((serde_json::to_string_pretty(&report)? + "\n").as_bytes(), None)
}

fn run_init(args: &InitArgs) -> anyhow::Result<()> {
    let w = EncoderWeights::<f64>::random_init(args.config, args.seed)?;
    w.save(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!("wrote {} (fingerprint {:016x})", args.out.display(), w.fingerprint());
    Ok(())
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("BTI_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("BTI_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Explain(a) => run_explain(a),
        Command::Nearest(a) => run_nearest(a),
        Command::Sanity(a) => run_sanity(a),
        Command::Compare(a) => run_compare(a),
        Command::InitRandom(a) => run_init(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("usage error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use iupac_infill::corpus::{self, bucket_histogram, fingerprint, planted_analogies, CorpusIndex, CorpusRecord};
use iupac_infill::corruption::{MaskPlan, Span, Validity};
use iupac_infill::edit::{propose_edits, DecodeMode};
use iupac_infill::embeddings::{train_embeddings, SgnsConfig};
use iupac_infill::eval::{
    baseline_scan, report_table, report_tsv, run_edit_job, token_pref_tsv, token_preference, valid_fragments, validity_shares, EditJob,
    EvalRow, Sensitivity, SpanScope,
};
use iupac_infill::model::{load_checkpoint, save_checkpoint, train, AdamWConfig, ModelConfig, ModelState, TrainSchedule};
use iupac_infill::property::LookupOracle;
use iupac_infill::{proxy_property, PropertyBucket, PropertyKind, PropertySpec, TokenId, Vocabulary};
use iupac_infill_service::AppState;

mod manifest;
use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "iupac-infill", version, about = "Property-conditioned span infilling over IUPAC names")]
struct Cli {
    /// Token vocabulary TSV; the bundled reference vocabulary when omitted.
    #[arg(long, global = true)]
    vocab: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the tokens of a name, one per line.
    Tokenize {
        #[arg(long)]
        name: String,
    },
    /// Write a seeded synthetic corpus whose property is the token proxy.
    SynthCorpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Read a name<TAB>value corpus and summarize it.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "proxy")]
        property: String,
        /// Write the usable records back out in canonical form.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train skip-gram token embeddings.
    TrainW2v(TrainW2vArgs),
    /// Train the conditional infilling model.
    TrainModel(TrainModelArgs),
    /// Propose edits of one name.
    Edit(EditArgs),
    /// Run span-enumeration editing over held-out sources.
    Evaluate(EvaluateArgs),
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: std::net::SocketAddr,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Corpus whose values score non-proxy properties.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainW2vArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = SgnsConfig::default().dim)]
    dim: usize,
    #[arg(long, default_value_t = SgnsConfig::default().window)]
    window: usize,
    #[arg(long, default_value_t = SgnsConfig::default().negatives)]
    negatives: usize,
    #[arg(long, default_value_t = SgnsConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = SgnsConfig::default().learning_rate)]
    learning_rate: f64,
}

#[derive(Args, Serialize)]
struct SplitArgs {
    /// Held-out share of the corpus.
    #[arg(long, default_value_t = 0.1)]
    valid_fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct TrainModelArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "proxy")]
    property: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = TrainSchedule::default().steps)]
    steps: u64,
    #[arg(long, default_value_t = TrainSchedule::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainSchedule::default().max_learning_rate)]
    learning_rate: f64,
    #[arg(long, default_value_t = TrainSchedule::default().warmup_steps)]
    warmup: u64,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Feed-forward width; four times `--dim` when omitted.
    #[arg(long)]
    ff_dim: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "proxy")]
    property: String,
    #[arg(long)]
    target: PropertyBucket,
    #[arg(long)]
    name: String,
    /// Span to mask as start:length in token coordinates; repeat for several.
    #[arg(long = "mask", required = true, value_parser = parse_mask)]
    masks: Vec<Span>,
    /// Sample at this temperature instead of decoding greedily.
    #[arg(long)]
    temperature: Option<f64>,
    /// Candidates to sample.
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the candidates as TSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "proxy")]
    property: String,
    /// Output directory for report.tsv, token_pref.tsv and summary.json.
    #[arg(long)]
    out: PathBuf,
    /// Held-out sources to edit.
    #[arg(long, default_value_t = 200)]
    sources: usize,
    /// Shuffles the held-out sources before taking `--sources`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    max_span: usize,
    /// Mask pairs of spans instead of single spans.
    #[arg(long)]
    multi_span: bool,
    /// Rows per bucket in the token preference table.
    #[arg(long, default_value_t = 20)]
    top: usize,
    #[command(flatten)]
    split: SplitArgs,
}

fn parse_mask(s: &str) -> Result<Span, String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("mask {s:?} is not start:length"))?;
    let start = a.trim().parse().map_err(|_| format!("bad span start in {s:?}"))?;
    let len: usize = b.trim().parse().map_err(|_| format!("bad span length in {s:?}"))?;
    if len == 0 {
        return Err(format!("span length must be at least 1 in {s:?}"));
    }
    Ok(Span::new(start, len))
}

fn load_vocab(path: &Option<PathBuf>) -> Result<Vocabulary> {
    match path {
        Some(p) => Vocabulary::load(p).with_context(|| format!("loading vocabulary {}", p.display())),
        None => Ok(Vocabulary::reference()),
    }
}

fn load_corpus(path: &Path, vocab: &Vocabulary) -> Result<corpus::Ingested> {
    corpus::ingest(path, vocab).with_context(|| format!("reading corpus {}", path.display()))
}

fn property_spec(name: &str) -> Result<PropertySpec> {
    Ok(PropertySpec::by_name(name)?)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let started = Instant::now();
    let vocab = load_vocab(&cli.vocab)?;
    let vocab_input = cli.vocab.clone();
    match cli.command {
        Command::Tokenize { name } => {
            let seq = vocab.tokenize(&name)?;
            for (i, &id) in seq.ids.iter().enumerate() {
                println!("{i}\t{}\t{}", vocab.surface(id), vocab.class(id).label());
            }
        }
        Command::SynthCorpus { seed, size, out } => {
            let records = corpus::generate_synthetic_corpus(&vocab, seed, size)?;
            write(&out, corpus::corpus_to_string(&records))?;
            let hist = bucket_histogram(&records, &PropertySpec::shipped(PropertyKind::Proxy));
            println!("wrote {} records to {} (buckets low/med/high: {hist:?})", records.len(), out.display());
            RunManifest::new("synth-corpus", json!({ "size": size, "vocabVersion": vocab.version() }), started)
                .seed("seed", seed)
                .inputs(vocab_input.iter())
                .output(&out)
                .write(&sidecar(&out, ".manifest.json"))?;
        }
        Command::Ingest { corpus, property, out } => {
            let spec = property_spec(&property)?;
            let ingested = load_corpus(&corpus, &vocab)?;
            let with_unk = ingested.records.iter().filter(|r| r.has_unk).count();
            println!("records\t{}", ingested.records.len());
            println!("skipped_lines\t{}", ingested.skipped);
            println!("distinct_names\t{}", ingested.index.distinct_names());
            println!("records_with_unk\t{with_unk}");
            println!("total_tokens\t{}", ingested.index.total_tokens());
            println!("fingerprint\t{}", fingerprint(&ingested.records));
            let hist = bucket_histogram(&ingested.records, &spec);
            println!("buckets\tlow={} med={} high={}", hist[0], hist[1], hist[2]);
            if let Some(out) = out {
                let usable: Vec<CorpusRecord> = ingested.records.into_iter().filter(|r| !r.has_unk).collect();
                write(&out, corpus::corpus_to_string(&usable))?;
                RunManifest::new("ingest", json!({ "property": spec }), started)
                    .inputs([&corpus].into_iter().chain(vocab_input.iter()))
                    .output(&out)
                    .write(&sidecar(&out, ".manifest.json"))?;
            }
        }
        Command::TrainW2v(a) => train_w2v(&vocab, vocab_input, a, started)?,
        Command::TrainModel(a) => train_model(&vocab, vocab_input, a, started)?,
        Command::Edit(a) => edit(&vocab, a, started)?,
        Command::Evaluate(a) => return evaluate(&vocab, vocab_input, a, started),
        Command::Serve { addr, checkpoint, corpus } => {
            let mut state = AppState::new(vocab);
            if let Some(path) = corpus {
                let ingested = load_corpus(&path, &state.vocab)?;
                state = state.with_lookup(LookupOracle::new(ingested.records.into_iter().map(|r| (r.name, r.property_value))));
            }
            if let Some(path) = checkpoint {
                let model = load_checkpoint(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
                state.swap(model)?;
            }
            let rt = tokio::runtime::Runtime::new()?;
            eprintln!("listening on http://{addr}/api/v1");
            rt.block_on(iupac_infill_service::serve(Arc::new(state), addr))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn train_w2v(vocab: &Vocabulary, vocab_input: Option<PathBuf>, a: TrainW2vArgs, started: Instant) -> Result<()> {
    let ingested = load_corpus(&a.corpus, vocab)?;
    let cfg = SgnsConfig {
        dim: a.dim,
        window: a.window,
        negatives: a.negatives,
        epochs: a.epochs,
        learning_rate: a.learning_rate,
        seed: a.seed,
    };
    let (table, report) = train_embeddings(vocab, &ingested.records, &cfg)?;
    ensure_parent(&a.out)?;
    table.save(vocab, &a.out)?;
    for (i, loss) in report.epoch_losses.iter().enumerate() {
        println!("epoch {}\tloss {loss:.6}", i + 1);
    }
    let mut summary = json!({ "epochLosses": report.epoch_losses, "pairsPerEpoch": report.pairs_per_epoch });
    // Planted analogies exist only when the vocabulary carries the analogy families.
    if let Ok(quads) = planted_analogies(vocab) {
        let acc = table.analogy_accuracy(&quads)?;
        println!("analogy accuracy\t{acc:.4} over {} quadruples", quads.len());
        summary["analogyAccuracy"] = json!(acc);
    }
    RunManifest::new("train-w2v", json!({ "sgns": cfg, "report": summary }), started)
        .seed("seed", a.seed)
        .inputs([&a.corpus].into_iter().chain(vocab_input.iter()))
        .output(&a.out)
        .write(&sidecar(&a.out, ".manifest.json"))
}

fn train_model(vocab: &Vocabulary, vocab_input: Option<PathBuf>, a: TrainModelArgs, started: Instant) -> Result<()> {
    let spec = property_spec(&a.property)?;
    let ingested = load_corpus(&a.corpus, vocab)?;
    let (train_set, valid_set) = corpus::split(&ingested.records, a.split.valid_fraction, a.split.split_seed);
    let config = ModelConfig {
        layers: a.layers,
        heads: a.heads,
        model_dim: a.dim,
        ff_dim: a.ff_dim.unwrap_or(4 * a.dim),
        dropout: a.dropout,
        seed: a.seed,
        ..ModelConfig::small(vocab.len())
    };
    let schedule = TrainSchedule {
        max_learning_rate: a.learning_rate,
        warmup_steps: a.warmup,
        batch_size: a.batch_size,
        steps: a.steps,
    };
    let mut state = ModelState::new(config, vocab, spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let log = train(&mut state, vocab, &train_set, &spec, &schedule, AdamWConfig::default(), &mut rng)?;
    ensure_parent(&a.out)?;
    save_checkpoint(&state, &a.out)?;

    let mut curve = String::from("step\tloss\tgrad_norm\n");
    for (i, (l, g)) in log.losses.iter().zip(&log.grad_norms).enumerate() {
        curve.push_str(&format!("{}\t{l:.6}\t{g:.6}\n", i + 1));
    }
    let curve_path = sidecar(&a.out, ".loss.tsv");
    write(&curve_path, curve)?;
    let (head, tail) = log.head_tail_means(100);
    println!(
        "trained {} steps on {} records ({} held out), {} parameters",
        state.step,
        train_set.len(),
        valid_set.len(),
        state.param_count()
    );
    println!("mean loss first 100 steps {head:.4}, last 100 steps {tail:.4}");
    RunManifest::new(
        "train-model",
        json!({
            "property": spec,
            "model": config,
            "schedule": schedule,
            "optimizer": AdamWConfig::default(),
            "split": a.split,
            "corpusFingerprint": fingerprint(&ingested.records),
            "headLoss": head,
            "tailLoss": tail,
        }),
        started,
    )
    .seed("seed", a.seed)
    .seed("splitSeed", a.split.split_seed)
    .inputs([&a.corpus].into_iter().chain(vocab_input.iter()))
    .output(&a.out)
    .output(&curve_path)
    .write(&sidecar(&a.out, ".manifest.json"))
}

fn load_model(path: &Path, vocab: &Vocabulary, spec: &PropertySpec) -> Result<ModelState> {
    let model = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    model.check_compatible(vocab, spec)?;
    if model.step == 0 {
        bail!("checkpoint {} has not been trained", path.display());
    }
    Ok(model)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

fn edit(vocab: &Vocabulary, a: EditArgs, started: Instant) -> Result<()> {
    let spec = property_spec(&a.property)?;
    if spec.kind != PropertyKind::Proxy {
        bail!("edit scores candidates with the token proxy; property {} has no oracle here", spec.kind.as_str());
    }
    let model = load_model(&a.checkpoint, vocab, &spec)?;
    let ids = vocab.tokenize(&a.name)?.ids;
    let mut spans = a.masks.clone();
    spans.sort();
    let plan = MaskPlan { spans };
    let decode = match a.temperature {
        None => DecodeMode::Greedy,
        Some(temperature) => DecodeMode::Sample {
            temperature,
            k: a.k,
            seed: a.seed,
        },
    };
    let score = |_: &str, t: &[TokenId]| proxy_property(vocab, t).ok();
    let before = proxy_property(vocab, &ids)?;
    let candidates = propose_edits(&model, vocab, &ids, &plan, a.target, decode, &score)?;
    let mut out = String::from("rank\tvalidity\tname\tfragments\tproperty_before\tproperty_after\tbucket_after\n");
    for (i, c) in candidates.iter().enumerate() {
        let frags = c
            .result
            .fragments
            .iter()
            .flatten()
            .map(|f| vocab.surfaces(f).collect::<Vec<_>>().join(" "))
            .collect::<Vec<_>>()
            .join(" | ");
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{before:.3}\t{}\t{}\n",
            i + 1,
            c.result.validity.as_str(),
            c.result.candidate_name.as_deref().unwrap_or("-"),
            frags,
            fmt_opt(c.property_after),
            c.bucket_after.map_or("-", |b| b.as_str())
        ));
    }
    print!("{out}");
    if let Some(path) = a.out {
        write(&path, &out)?;
        RunManifest::new(
            "edit",
            json!({ "name": a.name, "target": a.target, "masks": plan.spans, "decode": decode, "property": spec }),
            started,
        )
        .seed("seed", a.seed)
        .inputs([&a.checkpoint])
        .output(&path)
        .write(&sidecar(&path, ".manifest.json"))?;
    }
    Ok(())
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct TopTokens {
    target: PropertyBucket,
    tokens: Vec<TopToken>,
}

#[derive(Serialize)]
struct TopToken {
    surface: String,
    weight: f64,
    multiplier: Option<f64>,
}

fn evaluate(vocab: &Vocabulary, vocab_input: Option<PathBuf>, a: EvaluateArgs, started: Instant) -> Result<ExitCode> {
    let spec = property_spec(&a.property)?;
    let model = load_model(&a.checkpoint, vocab, &spec)?;
    let ingested = load_corpus(&a.corpus, vocab)?;
    let index = CorpusIndex::build(vocab, &ingested.records);
    let (_, mut held_out) = corpus::split(&ingested.records, a.split.valid_fraction, a.split.split_seed);
    if a.seed != 0 {
        use rand::seq::SliceRandom;
        held_out.shuffle(&mut ChaCha8Rng::seed_from_u64(a.seed));
    }
    let sources: Vec<CorpusRecord> = held_out.into_iter().filter(|r| !r.has_unk).take(a.sources).collect();
    if sources.is_empty() {
        bail!("the held-out split has no usable sources");
    }

    let targets = [PropertyBucket::High, PropertyBucket::Low];
    let mut rows: Vec<EvalRow> = Vec::new();
    let mut outcomes = Vec::with_capacity(sources.len());
    for source in &sources {
        let baseline = baseline_scan(source, &ingested.records);
        let mut per_target = Vec::with_capacity(2);
        for target in targets {
            let job = EditJob {
                span_lengths: 1..=a.max_span,
                multi_span: a.multi_span,
                ..EditJob::new(source.clone(), target)
            };
            let results = run_edit_job(&job, &model, vocab, &spec)?;
            rows.push(EvalRow::build(&job, &results, &index, baseline));
            per_target.push(results);
        }
        outcomes.push(per_target);
    }

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let report_path = a.out.join("report.tsv");
    write(&report_path, report_tsv(&rows))?;

    let mut pref = String::new();
    let mut top = Vec::new();
    for (k, target) in targets.into_iter().enumerate() {
        let fragments: Vec<Vec<TokenId>> = outcomes.iter().flat_map(|o| valid_fragments(&o[k])).collect();
        let prefs = token_preference(target, &fragments, &index);
        let table = token_pref_tsv(vocab, &prefs[..prefs.len().min(a.top)]);
        pref.push_str(if k == 0 { &table } else { table.split_once('\n').map_or("", |t| t.1) });
        top.push(TopTokens {
            target,
            tokens: prefs
                .iter()
                .take(5)
                .map(|r| TopToken {
                    surface: vocab.surface(r.token).to_string(),
                    weight: vocab.weight(r.token),
                    multiplier: r.multiplier,
                })
                .collect(),
        });
    }
    let pref_path = a.out.join("token_pref.tsv");
    write(&pref_path, &pref)?;

    let pairs = || sources.iter().zip(&outcomes).map(|(s, o)| (s, o[0].as_slice(), o[1].as_slice()));
    let property_bearing = Sensitivity::from_outcomes(vocab, SpanScope::PropertyBearing, pairs());
    let all_spans = Sensitivity::from_outcomes(vocab, SpanScope::All, pairs());
    let all_results: Vec<_> = outcomes.iter().flatten().flatten().cloned().collect();
    let valid_total = all_results.iter().filter(|o| o.result.validity == Validity::Valid).count();
    let shares: Vec<_> = validity_shares(&all_results).iter().map(|(v, s)| json!({ "validity": v, "percent": s })).collect();
    let summary = json!({
        "sources": sources.len(),
        "generations": all_results.len(),
        "validGenerations": valid_total,
        "validityShares": shares,
        "sensitivity": { "propertyBearing": property_bearing, "allSpans": all_spans },
        "topTokens": top,
    });
    let summary_path = a.out.join("summary.json");
    write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")?;

    print!("{}", report_table(&rows[..rows.len().min(10)]));
    if rows.len() > 10 {
        println!("... {} more rows in {}", rows.len() - 10, report_path.display());
    }
    for (name, s) in [("property-bearing spans", &property_bearing), ("all spans", &all_spans)] {
        println!(
            "{name}: high > low in {}/{} valid pairs ({:.1}%), ties {}, mean high {:.3} vs low {:.3}, sign-test p = {:.3e}",
            s.wins,
            s.pairs,
            100.0 * s.win_fraction(),
            s.ties,
            s.mean_high,
            s.mean_low,
            s.p_value
        );
    }
    for t in &top {
        let names: Vec<String> = t.tokens.iter().map(|x| format!("{:?} ({:+})", x.surface, x.weight)).collect();
        println!("top tokens for {}: {}", t.target, names.join(", "));
    }

    RunManifest::new(
        "evaluate",
        json!({
            "property": spec,
            "sources": a.sources,
            "maxSpan": a.max_span,
            "multiSpan": a.multi_span,
            "split": a.split,
            "checkpointStep": model.step,
        }),
        started,
    )
    .seed("seed", a.seed)
    .seed("splitSeed", a.split.split_seed)
    .inputs([&a.checkpoint, &a.corpus].into_iter().chain(vocab_input.iter()))
    .output(&report_path)
    .output(&pref_path)
    .output(&summary_path)
    .write(&a.out.join("manifest.json"))?;

    if valid_total == 0 {
        eprintln!("error: no valid generations");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

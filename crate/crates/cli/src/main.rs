//! `hylab`: build corpora, train, evaluate, run the entropy oracle, and
//! export plot data.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use hylab::certainty::WeightConfig;
use hylab::corpus::{
    build_bundle, prune_underconfident, read_dummy, read_supervised, read_unsupervised, write_dummy,
    write_supervised, write_unsupervised, BundleSpec, CorpusBundle, SupervisedExample, DEFAULT_DUMMY_FRACTION,
    DEFAULT_PRUNE_THRESHOLD,
};
use hylab::eval::{evaluate_policy, write_report, ConfidenceMetric, EvalConfig, EvalSummary};
use hylab::objectives::{run_training, Mode, MetricsRecord, TrainConfig};
use hylab::oracle::{bundled_tables, enumerate_policy_table, oracle_row, read_tables, write_table, NamedTable};
use hylab::policy::{read_checkpoint, write_checkpoint, Policy};
use hylab::vocab::Lexicon;
use hylab::Scalar;

const OUT_ENV: &str = "HYLAB_OUT";
const SUPERVISED_FILE: &str = "supervised.jsonl";
const DUMMY_FILE: &str = "dummy.jsonl";
const UNSUPERVISED_FILE: &str = "unsupervised.jsonl";
const PROBE_FILE: &str = "probe.jsonl";

#[derive(Parser)]
#[command(name = "hylab", version, about = "Hybrid post-training lab on a tiny policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or filter training corpora.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Train a policy and write metrics, checkpoint and manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a supervised corpus.
    Eval(EvalArgs),
    /// Check the posterior-entropy decomposition on exact tables.
    Oracle(OracleArgs),
    /// Turn metrics or evaluation reports into plain data tables.
    Plot(PlotArgs),
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Generate supervised, dummy, unsupervised and probe pools.
    Build(BuildArgs),
    /// Drop supervised examples with too many transitional words.
    Prune(PruneArgs),
}

#[derive(Args)]
struct BuildArgs {
    /// Output directory [default: $HYLAB_OUT/corpus]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    supervised: usize,
    #[arg(long, default_value_t = 1000)]
    unsupervised: usize,
    #[arg(long, default_value_t = 64)]
    probe: usize,
    #[arg(long, default_value_t = 1)]
    min_ops: usize,
    #[arg(long, default_value_t = 3)]
    max_ops: usize,
    #[arg(long, default_value_t = DEFAULT_DUMMY_FRACTION)]
    dummy_fraction: f64,
    #[arg(long, default_value_t = 128)]
    max_completion_len: usize,
    /// Transitional-word limit applied to the supervised pool.
    #[arg(long, default_value_t = DEFAULT_PRUNE_THRESHOLD)]
    prune_threshold: usize,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PRUNE_THRESHOLD)]
    threshold: usize,
    /// One word per line; defaults to the bundled lexicon.
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Precision {
    F64,
    F32,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config; CLI flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with the corpus files; built from the seed when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory [default: $HYLAB_OUT/<mode>-seed<seed>]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    switch_fraction: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
    /// Re-run the training recorded in a manifest and compare digests.
    #[arg(long, conflicts_with_all = ["config", "corpus", "mode", "steps", "seed", "switch_fraction", "lr", "overrides"])]
    replay: Option<PathBuf>,
    /// Also record per-rollout certainty reports in the metrics rows.
    #[arg(long)]
    verbose_metrics: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ConfidenceArg {
    Semantic,
    SelfCertainty,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Supervised JSONL file.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 8)]
    n_samples: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, value_enum, default_value_t = ConfidenceArg::Semantic)]
    confidence: ConfidenceArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    max_len: usize,
    /// Report path [default: $HYLAB_OUT/eval.jsonl]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write accuracy-by-bin data to this TSV file.
    #[arg(long)]
    bins_table: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    /// JSONL table file; the bundled fixtures are used when no source is given.
    #[arg(long, conflicts_with = "enumerate")]
    tables: Option<PathBuf>,
    /// Enumerate all trajectories of a tiny policy: vocabulary size, max length.
    #[arg(long, num_args = 2, value_names = ["V", "L"])]
    enumerate: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-10)]
    tolerance: f64,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the enumerated table here.
    #[arg(long, requires = "enumerate")]
    dump_table: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Metrics JSONL files, one curve set each.
    #[arg(long)]
    metrics: Vec<PathBuf>,
    /// Evaluation report to tabulate by confidence bin.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Output directory [default: $HYLAB_OUT/plots]
    #[arg(long)]
    out: Option<PathBuf>,
}

fn default_out() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("hylab-out"))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn write_corpus(dir: &Path, bundle: &CorpusBundle, probe: &[SupervisedExample]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_supervised(create(&dir.join(SUPERVISED_FILE))?, &bundle.supervised)?;
    write_dummy(create(&dir.join(DUMMY_FILE))?, &bundle.dummy)?;
    write_unsupervised(create(&dir.join(UNSUPERVISED_FILE))?, &bundle.unsupervised)?;
    write_supervised(create(&dir.join(PROBE_FILE))?, probe)?;
    Ok(())
}

fn read_corpus(dir: &Path) -> Result<(CorpusBundle, Vec<SupervisedExample>)> {
    let file = |name: &str| dir.join(name);
    let with_path = |name: &str| format!("reading {}", file(name).display());
    let bundle = CorpusBundle {
        supervised: read_supervised(open(&file(SUPERVISED_FILE))?).with_context(|| with_path(SUPERVISED_FILE))?,
        dummy: read_dummy(open(&file(DUMMY_FILE))?).with_context(|| with_path(DUMMY_FILE))?,
        unsupervised: read_unsupervised(open(&file(UNSUPERVISED_FILE))?)
            .with_context(|| with_path(UNSUPERVISED_FILE))?,
    };
    bundle.check_disjoint()?;
    let probe = read_supervised(open(&file(PROBE_FILE))?).with_context(|| with_path(PROBE_FILE))?;
    Ok((bundle, probe))
}

fn corpus_build(args: BuildArgs) -> Result<()> {
    if args.min_ops == 0 || args.min_ops > args.max_ops {
        bail!("need 1 <= min-ops <= max-ops");
    }
    let plan = BundleSpec {
        seed: args.seed,
        supervised: args.supervised,
        unsupervised: args.unsupervised,
        probe: args.probe,
        difficulty: args.min_ops..=args.max_ops,
        dummy_fraction: args.dummy_fraction,
        max_completion_len: args.max_completion_len,
    };
    let (mut bundle, probe) = build_bundle(&plan)?;
    let before = bundle.supervised.len();
    bundle.supervised = prune_underconfident(bundle.supervised, args.prune_threshold, &Lexicon::default());
    let dir = args.out.unwrap_or_else(|| default_out().join("corpus"));
    write_corpus(&dir, &bundle, &probe)?;
    println!(
        "wrote {}: {} supervised ({} pruned), {} dummy, {} unsupervised, {} probe",
        dir.display(),
        bundle.supervised.len(),
        before - bundle.supervised.len(),
        bundle.dummy.len(),
        bundle.unsupervised.len(),
        probe.len()
    );
    Ok(())
}

fn corpus_prune(args: PruneArgs) -> Result<()> {
    let lexicon = match &args.lexicon {
        Some(p) => Lexicon::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => Lexicon::default(),
    };
    let examples = read_supervised(open(&args.input)?).with_context(|| format!("reading {}", args.input.display()))?;
    let before = examples.len();
    let kept = prune_underconfident(examples, args.threshold, &lexicon);
    write_supervised(create(&args.output)?, &kept)?;
    println!("kept {} of {before} examples", kept.len());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Artifact {
    path: PathBuf,
    sha256: String,
}

impl Artifact {
    fn of(path: PathBuf) -> Result<Self> {
        let sha256 = sha256_file(&path)?;
        Ok(Self { path, sha256 })
    }

    fn verify(&self) -> Result<()> {
        let actual = sha256_file(&self.path)?;
        if actual != self.sha256 {
            bail!(
                "{} has digest {actual}, manifest records {}",
                self.path.display(),
                self.sha256
            );
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tool_version: String,
    precision: Precision,
    seed: u64,
    /// The effective config after defaults, file and CLI overrides.
    config: String,
    corpus: Vec<Artifact>,
    checkpoint: Artifact,
    metrics: Artifact,
}

#[derive(Serialize)]
struct MetricsSummary<'a> {
    steps: usize,
    mode: Mode,
    initial_probe: &'a hylab::objectives::ProbeStats,
    final_probe_accuracy: f64,
    final_self_certainty_mean: f64,
}

fn absolute(path: &Path) -> Result<PathBuf> {
    fs::canonicalize(path).with_context(|| format!("resolving {}", path.display()))
}

fn train(args: TrainArgs) -> Result<()> {
    if let Some(manifest) = &args.replay {
        return replay(manifest, args.out);
    }
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("in config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(f) = args.switch_fraction {
        cfg.switch_fraction = f;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("override {kv:?} is not key=value"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    let out = args
        .out
        .unwrap_or_else(|| default_out().join(format!("{}-seed{}", cfg.mode.as_str().to_lowercase(), cfg.seed)));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let corpus_dir = match args.corpus {
        Some(dir) => dir,
        None => {
            let dir = out.join("corpus");
            let plan = BundleSpec {
                seed: cfg.seed,
                max_completion_len: cfg.max_len,
                ..BundleSpec::default()
            };
            let (bundle, probe) = build_bundle(&plan)?;
            write_corpus(&dir, &bundle, &probe)?;
            dir
        }
    };
    run_and_record(&cfg, args.precision, &corpus_dir, &out, args.verbose_metrics)?;
    println!("wrote {}", out.join("manifest.json").display());
    Ok(())
}

fn run_and_record(cfg: &TrainConfig, precision: Precision, corpus_dir: &Path, out: &Path, verbose: bool) -> Result<Manifest> {
    let (bundle, probe) = read_corpus(corpus_dir)?;
    let metrics_path = out.join("metrics.jsonl");
    let checkpoint_path = out.join("checkpoint.bin");
    fs::write(out.join("config.toml"), cfg.to_text())?;
    match precision {
        Precision::F64 => train_as::<f64>(cfg, &bundle, &probe, &metrics_path, &checkpoint_path, verbose)?,
        Precision::F32 => train_as::<f32>(cfg, &bundle, &probe, &metrics_path, &checkpoint_path, verbose)?,
    }
    let corpus = [SUPERVISED_FILE, DUMMY_FILE, UNSUPERVISED_FILE, PROBE_FILE]
        .iter()
        .map(|f| Artifact::of(absolute(&corpus_dir.join(f))?))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        precision,
        seed: cfg.seed,
        config: cfg.to_text(),
        corpus,
        checkpoint: Artifact::of(absolute(&checkpoint_path)?)?,
        metrics: Artifact::of(absolute(&metrics_path)?)?,
    };
    let mut w = create(&out.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(manifest)
}

fn train_as<S: Scalar>(
    cfg: &TrainConfig,
    bundle: &CorpusBundle,
    probe: &[SupervisedExample],
    metrics_path: &Path,
    checkpoint_path: &Path,
    verbose: bool,
) -> Result<()> {
    let mut metrics = create(metrics_path)?;
    let outcome = run_training::<S>(cfg, bundle, probe, |record| {
        let mut row = record.clone();
        if !verbose {
            row.certainty.clear();
        }
        serde_json::to_writer(&mut metrics, &row)?;
        metrics.write_all(b"\n")?;
        // Flushed per row so an aborted run leaves every finished step on disk.
        metrics.flush()?;
        Ok(())
    })
    .with_context(|| format!("training; partial metrics in {}", metrics_path.display()))?;
    let last = outcome.metrics.last().expect("at least one step");
    let summary = MetricsSummary {
        steps: outcome.metrics.len(),
        mode: cfg.mode,
        initial_probe: &outcome.initial_probe,
        final_probe_accuracy: last.probe_accuracy,
        final_self_certainty_mean: last.self_certainty_mean,
    };
    serde_json::to_writer(&mut metrics, &serde_json::json!({ "summary": summary }))?;
    metrics.write_all(b"\n")?;
    metrics.flush()?;
    write_checkpoint(&outcome.policy, create(checkpoint_path)?)?;
    Ok(())
}

fn replay(manifest_path: &Path, out: Option<PathBuf>) -> Result<()> {
    let recorded: Manifest = serde_json::from_reader(open(manifest_path)?)
        .with_context(|| format!("parsing {}", manifest_path.display()))?;
    for a in &recorded.corpus {
        a.verify().context("corpus changed since the recorded run")?;
    }
    let corpus_dir = recorded
        .corpus
        .first()
        .and_then(|a| a.path.parent())
        .context("manifest lists no corpus files")?
        .to_path_buf();
    let cfg = TrainConfig::parse(&recorded.config)?;
    let out = out.unwrap_or_else(|| default_out().join("replay"));
    fs::create_dir_all(&out)?;
    let fresh = run_and_record(&cfg, recorded.precision, &corpus_dir, &out, false)?;
    if fresh.metrics.sha256 != recorded.metrics.sha256 {
        bail!(
            "metrics digest {} differs from recorded {}",
            fresh.metrics.sha256,
            recorded.metrics.sha256
        );
    }
    if fresh.checkpoint.sha256 != recorded.checkpoint.sha256 {
        bail!("checkpoint digest differs from the recorded run");
    }
    println!("replay matches: metrics {}", fresh.metrics.sha256);
    Ok(())
}

fn load_checkpoint_and_eval<S: Scalar>(path: &Path, examples: &[SupervisedExample], cfg: &EvalConfig) -> Result<hylab::eval::EvalReport> {
    let policy: Policy<S> = read_checkpoint(open(path)?).with_context(|| format!("loading {}", path.display()))?;
    Ok(evaluate_policy(&policy, examples, cfg)?)
}

fn scalar_of_checkpoint(path: &Path) -> Result<String> {
    let mut header = String::new();
    open(path)?.read_line(&mut header)?;
    let v: serde_json::Value =
        serde_json::from_str(&header).with_context(|| format!("{} has no checkpoint header", path.display()))?;
    Ok(v["scalar"].as_str().unwrap_or("").to_string())
}

fn eval(args: EvalArgs) -> Result<()> {
    let examples = read_supervised(open(&args.corpus)?).with_context(|| format!("reading {}", args.corpus.display()))?;
    if examples.is_empty() {
        bail!("{} holds no examples", args.corpus.display());
    }
    let cfg = EvalConfig {
        metric: match args.confidence {
            ConfidenceArg::Semantic => ConfidenceMetric::SemanticEntropy,
            ConfidenceArg::SelfCertainty => ConfidenceMetric::SelfCertainty,
        },
        n_samples: args.n_samples,
        temperature: args.temperature,
        max_len: args.max_len,
        seed: args.seed,
    };
    let report = match scalar_of_checkpoint(&args.checkpoint)?.as_str() {
        "f32" => load_checkpoint_and_eval::<f32>(&args.checkpoint, &examples, &cfg)?,
        _ => load_checkpoint_and_eval::<f64>(&args.checkpoint, &examples, &cfg)?,
    };
    let out = args.out.unwrap_or_else(|| default_out().join("eval.jsonl"));
    write_report(create(&out)?, &report)?;
    if let Some(path) = &args.bins_table {
        write_bins_table(path, &report.summary)?;
    }
    let s = &report.summary;
    println!(
        "accuracy {:.4} invalid_ratio {:.4} auroc {} -> {}",
        s.accuracy,
        s.invalid_ratio,
        s.auroc.map_or("n/a".to_string(), |a| format!("{a:.4}")),
        out.display()
    );
    Ok(())
}

fn oracle(args: OracleArgs) -> Result<ExitCode> {
    let tables: Vec<NamedTable<f64>> = if let Some(vl) = &args.enumerate {
        let (v, l) = (vl[0], vl[1]);
        let table = enumerate_policy_table(v, l, args.seed, &WeightConfig::default())?;
        if let Some(p) = &args.dump_table {
            let mut w = create(p)?;
            write_table(&mut w, &table, Some(&format!("enumerate-{v}-{l}")))?;
            w.flush()?;
        }
        vec![NamedTable {
            line: 0,
            name: Some(format!("enumerate-{v}-{l}")),
            table,
        }]
    } else if let Some(path) = &args.tables {
        read_tables(open(path)?).with_context(|| format!("in table file {}", path.display()))?
    } else {
        bundled_tables()?
    };
    let mut out: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut failed = Vec::new();
    for t in &tables {
        let row = oracle_row(&t.table, t.name.clone())?;
        if row.residual.is_nan() || row.residual >= args.tolerance {
            failed.push(format!(
                "{} (residual {:e})",
                t.name.clone().unwrap_or_else(|| format!("line {}", t.line)),
                row.residual
            ));
        }
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    if failed.is_empty() {
        eprintln!("{} tables, all residuals below {:e}", tables.len(), args.tolerance);
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("identity residual above {:e}: {}", args.tolerance, failed.join(", "));
        Ok(ExitCode::FAILURE)
    }
}

const CURVE_COLUMNS: [&str; 11] = [
    "step",
    "loss",
    "rlif_term",
    "rd_term",
    "kl_term",
    "prg_mean",
    "ps_mean",
    "self_certainty_mean",
    "transitional_freq",
    "probe_accuracy",
    "probe_invalid_ratio",
];

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

fn plot(args: PlotArgs) -> Result<()> {
    if args.metrics.is_empty() && args.eval.is_none() {
        bail!("nothing to plot: pass --metrics and/or --eval");
    }
    let dir = args.out.unwrap_or_else(|| default_out().join("plots"));
    if !args.metrics.is_empty() {
        let path = dir.join("training_curves.tsv");
        let mut w = create(&path)?;
        writeln!(w, "run\tmode\t{}", CURVE_COLUMNS.join("\t"))?;
        for file in &args.metrics {
            let run = file
                .parent()
                .and_then(|p| p.file_name())
                .or_else(|| file.file_stem())
                .map_or("run".into(), |s| s.to_string_lossy().into_owned());
            for (i, line) in open(file)?.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() || line.starts_with("{\"summary\"") {
                    continue;
                }
                let r: MetricsRecord = serde_json::from_str(&line)
                    .with_context(|| format!("{} line {}", file.display(), i + 1))?;
                writeln!(
                    w,
                    "{run}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    r.mode,
                    r.step,
                    r.loss,
                    r.rlif_term,
                    r.rd_term,
                    r.kl_term,
                    fmt_opt(r.prg_mean),
                    fmt_opt(r.ps_mean),
                    r.self_certainty_mean,
                    r.transitional_freq,
                    r.probe_accuracy,
                    r.probe_invalid_ratio
                )?;
            }
        }
        w.flush()?;
        println!("wrote {}", path.display());
    }
    if let Some(file) = &args.eval {
        let mut summary = None;
        for line in open(file)?.lines() {
            let v: serde_json::Value = serde_json::from_str(&line?)?;
            if let Some(s) = v.get("summary") {
                summary = Some(serde_json::from_value::<EvalSummary>(s.clone())?);
            }
        }
        let summary = summary.with_context(|| format!("{} has no summary row; the run may have aborted", file.display()))?;
        let path = dir.join("accuracy_by_bin.tsv");
        write_bins_table(&path, &summary)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn write_bins_table(path: &Path, summary: &EvalSummary) -> Result<()> {
    let bins = summary
        .bins
        .as_ref()
        .context("report has fewer than three records, so no bins")?;
    let mut w = create(path)?;
    writeln!(w, "bin\tcount\taccuracy\tmin_confidence\tmax_confidence")?;
    for (name, b) in ["low", "mid", "high"].iter().zip(bins.bins()) {
        writeln!(w, "{name}\t{}\t{}\t{}\t{}", b.count, b.accuracy, b.min_confidence, b.max_confidence)?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Corpus(CorpusCommand::Build(a)) => corpus_build(a)?,
        Command::Corpus(CorpusCommand::Prune(a)) => corpus_prune(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Oracle(a) => return oracle(a),
        Command::Plot(a) => plot(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

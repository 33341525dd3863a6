use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ordaudit::audit::{
    emit_report, load_inputs, parse_report, render_json, render_sweep_text, render_text, run_audit,
    run_inversion_grid, AuditError, AuditFailure, ReportFormat, RunConfig,
};
use ordaudit::corpus::{check_expected_checksum, compute_manifest, load_dataset, canonical_serialization, Dataset};
use ordaudit::grid::{serialize_predictions, MetricId};
use ordaudit::rank::{aggregate, condorcet, dimension_sensitivity, per_policy_rankings, win_matrix, Aggregator, Dimension, RankError, ScoreTable};
use ordaudit::resample::ResamplePlan;
use ordaudit::synth::{gold_from_counts, model_name, simulate_policy_grid, threshold_sweep, SweepConfig, DEFAULT_BASE_ACCURACY};

#[derive(Parser)]
#[command(name = "ordaudit", version, about = "Measurement audit for ordinal judge benchmarks")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; without it results go to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Text,
    Both,
}

impl Format {
    fn report_formats(self) -> Vec<ReportFormat> {
        match self {
            Format::Json => vec![ReportFormat::Json],
            Format::Text => vec![ReportFormat::Text],
            Format::Both => vec![ReportFormat::Json, ReportFormat::Text],
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Checksum a dataset and print its manifest and class counts.
    Ingest(IngestArgs),
    /// Score every grid cell on every metric.
    Score,
    /// Run the full audit and write the report.
    Audit,
    /// Aggregate rankings over a metric subset.
    Rank(SubsetArgs),
    /// Sign-flip tests over every model pair and policy.
    Inversions,
    /// Mean Kendall distance between rankings along each grid dimension.
    Dimsens(SubsetArgs),
    /// Write a synthetic dataset, prediction grid and config, or run a threshold sweep.
    Simulate(SimulateArgs),
    /// Re-render a stored JSON report.
    Report(ReportArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Dataset file; defaults to the configured path.
    dataset: Option<PathBuf>,
    #[arg(long)]
    source_id: Option<String>,
    #[arg(long)]
    access_date: Option<NaiveDate>,
    #[arg(long)]
    expected_checksum: Option<String>,
}

#[derive(Args)]
struct SubsetArgs {
    /// Comma-separated metric subset, e.g. A1,A2,A4; defaults to all five.
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<String>,
    /// A score table written by `score --format json` instead of the config inputs.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Gap in Cohen's h between adjacent models.
    #[arg(long, default_value_t = 0.3)]
    h: f64,
    #[arg(long, default_value_t = 4)]
    models: usize,
    #[arg(long, default_value_t = DEFAULT_BASE_ACCURACY)]
    base_accuracy: f64,
    /// Gold counts for labels -2..=+2.
    #[arg(long, value_delimiter = ',', default_value = "2,11,72,139,29")]
    counts: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "R1,R2,R3,R4,R5")]
    rubrics: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0.0,0.3,0.7")]
    temperatures: Vec<String>,
    /// Run the threshold sweep over the default cells and triples instead.
    #[arg(long)]
    sweep: bool,
    #[arg(long, default_value_t = 50)]
    replicates: usize,
    #[arg(long, default_value_t = 500)]
    bootstrap: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// JSON report produced by `audit`.
    input: PathBuf,
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_ref().context("--config is required for this subcommand")
        .map_err(|e| AuditError::Config(e.to_string()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn emit(cli: &Cli, name: &str, json: String, text: String) -> Result<()> {
    let fmt = cli.format.unwrap_or(Format::Text);
    match &cli.out {
        None => {
            if matches!(fmt, Format::Json | Format::Both) {
                print!("{json}");
            }
            if matches!(fmt, Format::Text | Format::Both) {
                print!("{text}");
            }
        }
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            if matches!(fmt, Format::Json | Format::Both) {
                write(&dir.join(format!("{name}.json")), &json)?;
            }
            if matches!(fmt, Format::Text | Format::Both) {
                write(&dir.join(format!("{name}.txt")), &text)?;
            }
        }
    }
    Ok(())
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| AuditError::Output {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn pretty(v: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn parse_subset(raw: &[String]) -> Result<Vec<MetricId>> {
    if raw.is_empty() {
        return Ok(MetricId::ALL.to_vec());
    }
    raw.iter()
        .map(|m| {
            serde_json::from_value(json!(m.trim().to_uppercase()))
                .map_err(|_| AuditError::Config(format!("unknown metric `{m}`")).into())
        })
        .collect()
}

fn score_table(cli: &Cli, scores: Option<&Path>) -> Result<ScoreTable> {
    if let Some(path) = scores {
        let text = fs::read_to_string(path).map_err(|e| AuditError::Report(format!("{}: {e}", path.display())))?;
        return Ok(serde_json::from_str(&text).map_err(|e| AuditError::Report(e.to_string()))?);
    }
    let cfg = config(cli)?;
    let (dataset, grid) = load_inputs(&cfg)?;
    Ok(ScoreTable::from_grid(&grid, &dataset, &MetricId::ALL, cfg.tests.kappa_weighting).map_err(AuditError::from)?)
}

fn table_text(t: &ScoreTable) -> String {
    let mut o = format!("{:<16} {:<12}", "model", "policy");
    for m in t.metrics() {
        o.push_str(&format!(" {:>7}", m.to_string()));
    }
    o.push('\n');
    for (mi, model) in t.models().iter().enumerate() {
        for (pi, policy) in t.policies().iter().enumerate() {
            o.push_str(&format!("{:<16} {:<12}", model, policy.to_string()));
            for &m in t.metrics() {
                let v = t.get(mi, pi, m).map_or("-".into(), |x| format!("{x:.4}"));
                o.push_str(&format!(" {v:>7}"));
            }
            o.push('\n');
        }
    }
    o
}

fn ingest(cli: &Cli, args: &IngestArgs) -> Result<()> {
    let cfg = match (&args.dataset, &cli.config) {
        (Some(_), _) => None,
        (None, Some(_)) => Some(config(cli)?),
        (None, None) => return Err(AuditError::Config("give a dataset path or --config".into()).into()),
    };
    let path = match (&args.dataset, &cfg) {
        (Some(p), _) => p.clone(),
        (None, Some(c)) => PathBuf::from(&c.dataset.path),
        _ => unreachable!(),
    };
    let (dataset, dist) = load_dataset(&path).map_err(AuditError::from)?;
    let source = args
        .source_id
        .clone()
        .or_else(|| cfg.as_ref().map(|c| c.dataset.source_id.clone()))
        .unwrap_or_else(|| path.display().to_string());
    let date = args
        .access_date
        .or_else(|| cfg.as_ref().and_then(|c| c.dataset.access_date))
        .unwrap_or_else(|| chrono::Utc::now().date_naive());
    let manifest = compute_manifest(&dataset, &source, date);
    let expected = args
        .expected_checksum
        .clone()
        .or_else(|| cfg.as_ref().and_then(|c| c.dataset.expected_checksum.clone()));
    if let Some(expected) = expected {
        check_expected_checksum(&expected, &manifest.checksum).map_err(AuditError::from)?;
    }
    let mut text = format!(
        "source    {}\naccessed  {}\nrows      {}\nsha256    {}\n\nlabel      n\n",
        manifest.source_id, manifest.access_date, manifest.row_count, manifest.checksum
    );
    for (label, count) in &dist.counts {
        text.push_str(&format!("{:<6} {:>5}\n", label.to_string(), count));
    }
    let counts: Vec<_> = dist
        .counts
        .iter()
        .map(|(label, n)| json!({ "label": label.to_string(), "count": n }))
        .collect();
    let json = pretty(&json!({ "manifest": manifest, "class_counts": counts }));
    emit(cli, "manifest", json, text)
}

fn rank(cli: &Cli, args: &SubsetArgs) -> Result<()> {
    let table = score_table(cli, args.scores.as_deref())?;
    let subset = parse_subset(&args.metrics)?;
    let outcomes = Aggregator::ALL
        .iter()
        .map(|&a| aggregate(a, &table, &subset))
        .collect::<Result<Vec<_>, RankError>>()
        .map_err(AuditError::from)?;
    let w = win_matrix(&table, &subset).map_err(AuditError::from)?;
    let cond = condorcet(&w);
    let mut text = String::new();
    for o in &outcomes {
        text.push_str(&format!("{:<9} {}\n", o.aggregator.short(), o.ranking));
        if let Some(n) = &o.note {
            text.push_str(&format!("          note: {n}\n"));
        }
    }
    text.push_str(&format!(
        "Condorcet winner {}  cycles {}\n",
        cond.winner.as_deref().unwrap_or("none"),
        cond.cycles.len()
    ));
    let json = pretty(&json!({ "metrics": subset, "outcomes": outcomes, "win_matrix": w.wins, "condorcet": cond }));
    emit(cli, "rank", json, text)
}

fn dimsens(cli: &Cli, args: &SubsetArgs) -> Result<()> {
    let table = score_table(cli, args.scores.as_deref())?;
    let subset = parse_subset(&args.metrics)?;
    let rankings = per_policy_rankings(&table, &subset).map_err(AuditError::from)?;
    let mut rows = Vec::new();
    let mut text = String::new();
    for dim in Dimension::ALL {
        let v = match dimension_sensitivity(&rankings, dim) {
            Ok(v) => Some(v),
            Err(RankError::NoEligiblePairs(_)) => None,
            Err(e) => return Err(AuditError::from(e).into()),
        };
        text.push_str(&format!("{:<12} {}\n", dim.to_string(), v.map_or("n/a".into(), |x| format!("{x:.3}"))));
        rows.push(json!({ "dimension": dim, "mean_distance": v }));
    }
    emit(cli, "dimsens", pretty(&json!({ "metrics": subset, "rows": rows })), text)
}

fn inversions(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    let (dataset, grid) = load_inputs(&cfg)?;
    let inv = run_inversion_grid(
        &grid,
        &dataset,
        &ResamplePlan::signflip(cfg.resample.signflip, cfg.seed),
        cfg.tests.alpha,
        cfg.tests.fdr_q,
    )?;
    let mut text = format!(
        "{} tests, B = {}; raw {}  Holm {}  BH {}\n",
        inv.family_size, inv.replicates, inv.raw_rejections, inv.holm_rejections, inv.bh_rejections
    );
    for c in &inv.cells {
        text.push_str(&format!(
            "{} vs {} {}@{}: Δ = {:+.3}  p = {:.5}{}{}\n",
            c.model_a,
            c.model_b,
            c.rubric,
            c.temperature,
            c.delta,
            c.p,
            if c.holm_reject { "  Holm" } else { "" },
            if c.bh_reject { "  BH" } else { "" }
        ));
    }
    emit(cli, "inversions", pretty(&inv), text)
}

fn simulate(cli: &Cli, args: &SimulateArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(42);
    if args.sweep {
        let sweep = SweepConfig {
            replicates: args.replicates,
            bootstrap_replicates: args.bootstrap,
            seed,
            base_accuracy: args.base_accuracy,
        };
        let out = threshold_sweep(&ordaudit::synth::default_cells(), &ordaudit::synth::default_triples(), &sweep)
            .map_err(AuditError::from)?;
        return emit(cli, "sweep", pretty(&out), render_sweep_text(&out));
    }
    let counts: [usize; 5] = args
        .counts
        .clone()
        .try_into()
        .map_err(|_| AuditError::Config("--counts needs five values".into()))?;
    let Some(dir) = &cli.out else {
        return Err(AuditError::Config("simulate needs --out".into()).into());
    };
    let gold = gold_from_counts(counts, seed);
    let dataset = Dataset::from_gold(&gold).map_err(AuditError::from)?;
    let grid = simulate_policy_grid(&gold, args.base_accuracy, args.h, args.models, &args.rubrics, &args.temperatures, seed)
        .map_err(AuditError::from)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join("dataset.jsonl"), &canonical_serialization(&dataset))?;
    write(&dir.join("predictions.jsonl"), &serialize_predictions(&grid))?;
    let quoted = |v: &[String]| v.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(", ");
    let models: Vec<String> = (0..args.models).map(model_name).collect();
    let cfg = format!(
        r#"seed = {seed}

[dataset]
path = "dataset.jsonl"
source_id = "synthetic"

[predictions]
path = "predictions.jsonl"

[grid]
models = [{}]
rubrics = [{}]
temperatures = [{}]
primary_rubric = {:?}
primary_temperature = {:?}

[thresholds]
headroom = 0.15
support = 50
snr = 1.0

[output]
dir = "report"
"#,
        quoted(&models),
        quoted(&args.rubrics),
        quoted(&args.temperatures),
        args.rubrics[0],
        args.temperatures[0]
    );
    write(&dir.join("config.toml"), &cfg)
}

fn audit(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    let report = run_audit(&cfg)?;
    let formats = cli.format.map_or_else(|| cfg.output.formats.clone(), Format::report_formats);
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from));
    match dir {
        Some(dir) => {
            for p in emit_report(&report, &dir, &formats)? {
                eprintln!("wrote {}", p.display());
            }
        }
        None => {
            for f in formats {
                match f {
                    ReportFormat::Json => print!("{}", render_json(&report)),
                    ReportFormat::Text => print!("{}", render_text(&report)),
                }
            }
        }
    }
    Ok(())
}

fn report(cli: &Cli, args: &ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&args.input)
        .map_err(|e| AuditError::Report(format!("{}: {e}", args.input.display())))?;
    let report = parse_report(&text)?;
    emit(cli, "audit_report", render_json(&report), render_text(&report))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest(a) => ingest(cli, a),
        Command::Score => {
            let table = score_table(cli, None)?;
            emit(cli, "scores", pretty(&table), table_text(&table))
        }
        Command::Audit => audit(cli),
        Command::Rank(a) => rank(cli, a),
        Command::Inversions => inversions(cli),
        Command::Dimsens(a) => dimsens(cli, a),
        Command::Simulate(a) => simulate(cli, a),
        Command::Report(a) => report(cli, a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(f) = err.downcast_ref::<AuditFailure>() {
        return f.exit_code() as u8;
    }
    if let Some(e) = err.downcast_ref::<AuditError>() {
        return e.exit_code() as u8;
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 3;
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

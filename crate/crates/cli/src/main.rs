//! `evid`: quantify Dirichlet outputs and run desk-scale active domain
//! adaptation experiments.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
//! configuration, 4 malformed or out-of-domain input.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use evidential::evidence::{DirichletPrediction, QuantificationMode, QuantifiedRecord};
use evidential::experiment::{run_ablation, run_experiment, ExperimentConfig, ExperimentSummary};
use evidential::Error;

#[derive(Parser)]
#[command(name = "evid", version, about = "Evidential uncertainty quantification and active domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Uncertainties, covariances and correlations for Dirichlet parameters
    /// read from a JSON or CSV file ("-" for stdin).
    Quantify {
        input: PathBuf,
        /// Input format; inferred from the extension when omitted.
        #[arg(long, value_parser = ["json", "csv"])]
        format: Option<String>,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the configured experiment for every seed.
    Run(ExperimentArgs),
    /// Run the five ablation rows and print a comparison table.
    Ablate(ExperimentArgs),
    /// Summarise an existing run directory.
    Report {
        run_dir: PathBuf,
    },
    /// Print the built-in desk-scale configuration.
    DefaultConfig,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config (JSON). Defaults to the built-in desk-scale setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds, ranges allowed (`0-9,42`); overrides the config.
    #[arg(long)]
    seeds: Option<String>,
    /// Quantification mode; overrides the config.
    #[arg(long)]
    mode: Option<QuantificationMode>,
}

enum Failure {
    Config(anyhow::Error),
    Input(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Config(_) => 3,
            Failure::Input(_) => 4,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Input(e) | Failure::Runtime(e) => e,
        }
    }
}

/// Sorts library errors by exit code.
fn classify(e: Error) -> Failure {
    match e {
        Error::Config(_) | Error::Schedule(_) => Failure::Config(e.into()),
        Error::Parse { .. }
        | Error::InvalidAlpha(_)
        | Error::Special(_)
        | Error::Json(_)
        | Error::Csv(_)
        | Error::InvalidInput(_) => Failure::Input(e.into()),
        other => Failure::Runtime(other.into()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Quantify { input, format, out } => quantify(&input, format.as_deref(), out.as_deref()),
        Command::Run(args) => run(&args),
        Command::Ablate(args) => ablate(&args),
        Command::Report { run_dir } => report(&run_dir),
        Command::DefaultConfig => ExperimentConfig::desk_scale()
            .to_json()
            .map(|j| println!("{j}"))
            .map_err(classify),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AlphaEntry {
    Plain(Vec<f64>),
    Record { alpha: Vec<f64> },
}

impl AlphaEntry {
    fn into_alpha(self) -> Vec<f64> {
        match self {
            AlphaEntry::Plain(a) | AlphaEntry::Record { alpha: a } => a,
        }
    }
}

fn read_input(path: &Path) -> Result<String, Failure> {
    let mut text = String::new();
    if path == Path::new("-") {
        std::io::stdin().read_to_string(&mut text)
    } else {
        std::fs::File::open(path).and_then(|mut f| f.read_to_string(&mut text))
    }
    .with_context(|| format!("reading {}", path.display()))
    .map_err(Failure::Input)?;
    Ok(text)
}

/// α rows with the line each came from.
fn parse_json_alphas(text: &str) -> Result<Vec<(usize, Vec<f64>)>, Failure> {
    // Parse once as raw values to learn each entry's line, then decode.
    let entries: Vec<serde_json::Value> = serde_json::from_str(text).map_err(|e| {
        Failure::Input(anyhow!("parse error at line {}: {e}", e.line()))
    })?;
    let lines = json_element_lines(text);
    entries
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let line = lines.get(i).copied().unwrap_or(1);
            serde_json::from_value::<AlphaEntry>(v)
                .map(|e| (line, e.into_alpha()))
                .map_err(|_| {
                    Failure::Input(anyhow!(
                        "parse error at line {line}: entry {} must be an array of numbers or {{\"alpha\": [...]}}",
                        i + 1
                    ))
                })
        })
        .collect()
}

/// Line on which each top-level array element starts.
fn json_element_lines(text: &str) -> Vec<usize> {
    let mut lines = Vec::new();
    let (mut depth, mut line, mut in_string, mut escaped, mut expect) = (0usize, 1usize, false, false, false);
    for ch in text.chars() {
        if ch == '\n' {
            line += 1;
        }
        if in_string {
            match (escaped, ch) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_string = false,
                _ => {}
            }
            continue;
        }
        if expect && !ch.is_whitespace() && ch != ']' {
            lines.push(line);
            expect = false;
        }
        match ch {
            '"' => in_string = true,
            '[' | '{' => {
                depth += 1;
                if depth == 1 {
                    expect = true;
                }
            }
            ']' | '}' => depth = depth.saturating_sub(1),
            ',' if depth == 1 => expect = true,
            _ => {}
        }
    }
    lines
}

fn parse_csv_alphas(text: &str) -> Result<Vec<(usize, Vec<f64>)>, Failure> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Failure::Input(anyhow!("parse error: {e}")))?;
        let line = record.position().map_or(i + 1, |p| p.line() as usize);
        let values: Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match values {
            Ok(v) => rows.push((line, v)),
            // a first row of non-numbers is a header
            Err(_) if i == 0 && record.iter().all(|f| f.parse::<f64>().is_err()) => {}
            Err(e) => return Err(Failure::Input(anyhow!("parse error at line {line}: {e}"))),
        }
    }
    Ok(rows)
}

fn quantify(input: &Path, format: Option<&str>, out: Option<&Path>) -> Result<(), Failure> {
    let text = read_input(input)?;
    let csv = match format {
        Some(f) => f == "csv",
        None => input.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")),
    };
    let rows = if text.trim().is_empty() {
        Vec::new()
    } else if csv {
        parse_csv_alphas(&text)?
    } else {
        parse_json_alphas(&text)?
    };
    let records = rows
        .into_iter()
        .map(|(line, alpha)| {
            DirichletPrediction::new(alpha)
                .map(|p| QuantifiedRecord::new(&p))
                .map_err(|e| Failure::Input(anyhow!("line {line}: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut json = serde_json::to_string_pretty(&records).map_err(|e| Failure::Runtime(e.into()))?;
    json.push('\n');
    match out {
        Some(path) => std::fs::write(path, json)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(Failure::Runtime),
        None => std::io::stdout()
            .write_all(json.as_bytes())
            .map_err(|e| Failure::Runtime(e.into())),
    }
}

fn parse_seeds(list: &str) -> anyhow::Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
                if a > b {
                    return Err(anyhow!("empty seed range {part}"));
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse()?),
        }
    }
    Ok(seeds)
}

fn load_config(args: &ExperimentArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(Failure::Config)?;
            ExperimentConfig::from_json(&text)
                .with_context(|| format!("parsing {}", path.display()))
                .map_err(Failure::Config)?
        }
        None => ExperimentConfig::desk_scale(),
    };
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(list) = &args.seeds {
        cfg.seeds = parse_seeds(list)
            .with_context(|| format!("invalid --seeds `{list}`"))
            .map_err(Failure::Config)?;
    }
    if let Some(mode) = args.mode {
        cfg = cfg.with_mode(mode);
    }
    cfg.validate().map_err(classify)?;
    Ok(cfg)
}

fn print_summary(summary: &ExperimentSummary) {
    for r in &summary.runs {
        println!("seed {:>4}  final target accuracy {:.4}", r.seed, r.final_accuracy);
    }
    println!(
        "{} ({}): {:.4} ± {:.4} over {} seeds",
        summary.switches.label(),
        summary.mode,
        summary.mean_accuracy,
        summary.std_accuracy,
        summary.runs.len()
    );
}

fn run(args: &ExperimentArgs) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let (summary, dir) = run_experiment(&cfg).map_err(classify)?;
    print_summary(&summary);
    println!("run directory: {}", dir.display());
    Ok(())
}

fn ablate(args: &ExperimentArgs) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let (rows, dir) = run_ablation(&cfg).map_err(classify)?;
    println!("{:<12} {:>4} {:>4} {:>4} {:>10} {:>8}", "row", "UG", "US", "CS", "accuracy", "std");
    let mark = |b: bool| if b { "x" } else { "" };
    for r in &rows {
        println!(
            "{:<12} {:>4} {:>4} {:>4} {:>10.4} {:>8.4}",
            r.label,
            mark(r.switches.guidance),
            mark(r.switches.uncertainty_sampling),
            mark(r.switches.certainty_sampling),
            r.mean_accuracy,
            r.std_accuracy
        );
    }
    println!("run directory: {}", dir.display());
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Input)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(Failure::Input)
}

fn report(dir: &Path) -> Result<(), Failure> {
    let summary_path = dir.join("summary.json");
    if !summary_path.exists() {
        let ablation = dir.join("ablation.json");
        if ablation.exists() {
            let rows: Vec<evidential::experiment::AblationRow> = read_json(&ablation)?;
            for r in rows {
                println!("{:<12} {:.4} ± {:.4}", r.label, r.mean_accuracy, r.std_accuracy);
            }
            return Ok(());
        }
        return Err(Failure::Input(anyhow!(
            "{} holds neither summary.json nor ablation.json",
            dir.display()
        )));
    }
    let summary: ExperimentSummary = read_json(&summary_path)?;
    print_summary(&summary);
    for r in &summary.runs {
        let rep: evidential::ada::AdaRunReport = read_json(&dir.join(format!("seed-{}", r.seed)).join("report.json"))?;
        let pseudo = rep
            .pseudo_label_accuracy
            .map_or("n/a".to_string(), |a| format!("{a:.4}"));
        let auroc = rep.auroc.map_or("n/a".to_string(), |a| {
            let m = match summary.mode {
                QuantificationMode::Variance => a.auroc.variance,
                QuantificationMode::Entropy => a.auroc.entropy,
            };
            let f = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
            format!("AU {} EU {} (epoch {})", f(m.aleatoric), f(m.epistemic), a.epoch)
        });
        let pairs: Vec<String> = rep
            .top_correlated_pairs
            .iter()
            .map(|p| format!("({},{}) {:.3}", p.class_i, p.class_j, p.correlation))
            .collect();
        println!(
            "seed {:>4}  oracle {} pseudo {} (acc {pseudo})  misclassification AUROC {auroc}  top pairs {}",
            r.seed,
            rep.oracle_labeled,
            rep.pseudo_labeled,
            pairs.join(", ")
        );
    }
    Ok(())
}

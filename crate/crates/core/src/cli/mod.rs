//! The `spoofbench` command line: generate, train, distill, eval, report.

mod config;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

pub use config::{DomainEntry, ExperimentConfig, ProtocolSpec, SEED_ENV};

use crate::data::{generate_domain, read_manifest, write_manifest, Session, SplitCounts};
use crate::error::{Error, Result};
use crate::eval::{format_table, run_protocol, write_scores_csv, ProtocolResult, TableRow, ThresholdPolicy};
use crate::experiment::{median, quantile};
use crate::model::{init_student, init_teacher, ModelParams, STUDENT_FEATURE_DIM, TEACHER_FEATURE_DIM};
use crate::rng::RngStream;
use crate::train::{distill, taft, DistillRunConfig, RunRecord, TaftConfig, Variant};

/// Name of the per-directory index of produced files.
pub const OUTPUTS_FILE: &str = "outputs.json";

#[derive(Debug, Parser)]
#[command(name = "spoofbench", version, about = "Face anti-spoofing workbench on synthetic domains")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate session manifests for configured domains.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Domain to generate; repeatable. Defaults to all configured domains.
        #[arg(long)]
        domain: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a teacher head on a frozen backbone.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: VariantArg,
        /// Manifest of the training domain.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill a student from a trained teacher checkpoint.
    Distill {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Output file stem; defaults to `student-<teacher stem>`.
        #[arg(long)]
        name: Option<String>,
    },
    /// Evaluate a checkpoint under configured protocols.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        /// Protocol name; repeatable. Defaults to all configured protocols.
        #[arg(long)]
        protocol: Vec<String>,
        /// Directory holding `<domain>.jsonl` manifests.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Row label in tables; defaults to the checkpoint file stem.
        #[arg(long)]
        method: Option<String>,
    },
    /// Merge eval results under a directory into one comparison table.
    Report {
        #[arg(long)]
        runs: PathBuf,
        /// Threshold policy to tabulate.
        #[arg(long, default_value = "eer-on-calib")]
        policy: String,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum VariantArg {
    V1,
    V2,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::V1 => Variant::V1,
            VariantArg::V2 => Variant::V2,
        }
    }
}

/// One evaluated (method, protocol, policy) cell as written by `eval`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: String,
    pub protocol: String,
    pub seed: u64,
    pub result: ProtocolResult,
}

/// Entry point used by the binary; returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate { config, domain, out } => {
            let cfg = ExperimentConfig::load(config.as_deref())?;
            cmd_generate(&cfg, &domain, &out)
        }
        Command::Train {
            config,
            variant,
            data,
            out,
        } => {
            let cfg = ExperimentConfig::load(config.as_deref())?;
            cmd_train(&cfg, variant.into(), &data, &out)
        }
        Command::Distill {
            config,
            teacher,
            data,
            out,
            name,
        } => {
            let cfg = ExperimentConfig::load(config.as_deref())?;
            cmd_distill(&cfg, &teacher, &data, &out, name.as_deref())
        }
        Command::Eval {
            config,
            model,
            protocol,
            data,
            out,
            method,
        } => {
            let cfg = ExperimentConfig::load(config.as_deref())?;
            cmd_eval(&cfg, &model, &protocol, &data, &out, method.as_deref())
        }
        Command::Report { runs, policy } => {
            let table = cmd_report(&runs, ThresholdPolicy::parse(&policy)?)?;
            print!("{table}");
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Input(format!("{what} not found: {}", path.display())))
    }
}

/// Append `files` (relative to `out`) to `out/outputs.json`, keyed by command.
fn record_outputs(out: &Path, command: &str, files: &[PathBuf]) -> Result<()> {
    let path = out.join(OUTPUTS_FILE);
    let mut index: BTreeMap<String, Vec<String>> = if path.is_file() {
        read_json(&path)?
    } else {
        BTreeMap::new()
    };
    let entry = index.entry(command.to_string()).or_default();
    for f in files {
        let rel = f.strip_prefix(out).unwrap_or(f).display().to_string();
        if !entry.contains(&rel) {
            entry.push(rel);
        }
    }
    write_json(&path, &index)
}

fn snapshot_config(cfg: &ExperimentConfig, out: &Path, command: &str) -> Result<PathBuf> {
    let path = out.join(format!("{command}.config.toml"));
    write_text(&path, &cfg.to_toml()?)?;
    Ok(path)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

pub fn manifest_path(data_dir: &Path, domain: &str) -> PathBuf {
    data_dir.join(format!("{domain}.jsonl"))
}

pub fn cmd_generate(cfg: &ExperimentConfig, domains: &[String], out: &Path) -> Result<()> {
    let names: Vec<String> = if domains.is_empty() {
        cfg.domains.iter().map(|d| d.name.clone()).collect()
    } else {
        domains.to_vec()
    };
    create_dir(out)?;
    let mut files = vec![snapshot_config(cfg, out, "generate")?];
    for name in &names {
        let spec = cfg.domain_spec(name)?;
        let sessions = generate_domain(&spec, cfg.domain(name)?.sessions)?;
        let path = manifest_path(out, name);
        write_manifest(&sessions, &path)?;
        let c = SplitCounts::of(&sessions);
        println!(
            "{name}: train={} calib={} test={} -> {}",
            c.train,
            c.calib,
            c.test,
            path.display()
        );
        files.push(path);
    }
    record_outputs(out, "generate", &files)
}

fn load_sessions(path: &Path) -> Result<Vec<Session>> {
    require_file(path, "manifest")?;
    read_manifest(path)
}

pub fn cmd_train(cfg: &ExperimentConfig, variant: Variant, data: &Path, out: &Path) -> Result<()> {
    let sessions = load_sessions(data)?;
    create_dir(out)?;
    let taft_cfg = TaftConfig {
        head_mask: variant.head_mask(),
        seed: cfg.seed,
        ..cfg.taft.clone()
    };
    let init = init_teacher(RngStream::new(cfg.seed, 0).derive_named("teacher"), TEACHER_FEATURE_DIM)?;
    let (model, mut record) = taft(&sessions, &taft_cfg, init)?;
    let stem = format!("teacher-{}", variant.as_str());
    let mut files = save_run(out, &stem, &model, &mut record)?;
    files.insert(0, snapshot_config(cfg, out, &stem)?);
    record_outputs(out, "train", &files)
}

/// Checkpoint, optimizer state and run record under `out/<stem>.*`.
fn save_run(out: &Path, stem: &str, model: &ModelParams, record: &mut RunRecord) -> Result<Vec<PathBuf>> {
    let ckpt = out.join(format!("{stem}.ckpt"));
    model.save(&ckpt)?;
    record.checkpoint = Some(ckpt.display().to_string());
    let mut files = vec![ckpt.clone()];
    if let Some(state) = &record.optimizer {
        let opt = out.join(format!("{stem}.opt"));
        let io = |e| Error::io(&opt, e);
        let mut w = std::io::BufWriter::new(std::fs::File::create(&opt).map_err(io)?);
        state.write_to(&mut w).and_then(|_| w.flush()).map_err(io)?;
        files.push(opt);
    }
    let run = out.join(format!("{stem}.run.json"));
    write_json(&run, record)?;
    files.push(run);
    println!("{stem}: epoch losses {:?} -> {}", record.epoch_losses, ckpt.display());
    Ok(files)
}

pub fn cmd_distill(
    cfg: &ExperimentConfig,
    teacher_path: &Path,
    data: &Path,
    out: &Path,
    name: Option<&str>,
) -> Result<()> {
    require_file(teacher_path, "teacher checkpoint")?;
    let teacher = ModelParams::load(teacher_path)?;
    let sessions = load_sessions(data)?;
    create_dir(out)?;
    let run_cfg = DistillRunConfig {
        seed: cfg.seed,
        ..cfg.distill.clone()
    };
    let init = init_student(RngStream::new(cfg.seed, 0).derive_named("student"), STUDENT_FEATURE_DIM)?;
    let (student, mut record) = distill(&teacher, &sessions, &run_cfg, init)?;
    let stem = name
        .map(str::to_string)
        .unwrap_or_else(|| format!("student-{}", file_stem(teacher_path)));
    let mut files = save_run(out, &stem, &student, &mut record)?;
    files.insert(0, snapshot_config(cfg, out, &stem)?);
    record_outputs(out, "distill", &files)
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    model_path: &Path,
    protocols: &[String],
    data: &Path,
    out: &Path,
    method: Option<&str>,
) -> Result<()> {
    require_file(model_path, "model checkpoint")?;
    let model = ModelParams::load(model_path)?;
    if !model.trained {
        return Err(Error::Input(format!(
            "{} is an untrained checkpoint",
            model_path.display()
        )));
    }
    let method = method.map(str::to_string).unwrap_or_else(|| file_stem(model_path));
    let specs: Vec<&ProtocolSpec> = if protocols.is_empty() {
        cfg.protocols.iter().collect()
    } else {
        protocols.iter().map(|p| cfg.protocol(p)).collect::<Result<_>>()?
    };
    create_dir(out)?;
    let mut cache: BTreeMap<String, Vec<Session>> = BTreeMap::new();
    let mut files = vec![snapshot_config(cfg, out, &format!("eval-{method}"))?];
    let mut rows = Vec::new();
    for spec in specs {
        for domain in [&spec.train, &spec.eval] {
            if !cache.contains_key(domain) {
                cache.insert(domain.clone(), load_sessions(&manifest_path(data, domain))?);
            }
        }
        let (train, eval) = (&cache[&spec.train], &cache[&spec.eval]);
        for &policy in &spec.policies {
            let result = run_protocol(&model, train, eval, policy, cfg.aggregator)?;
            let stem = format!("eval-{method}-{}-{}", spec.name, policy.as_str());
            let scores = out.join(format!("{stem}.scores.csv"));
            write_scores_csv(&result.scores, &scores)?;
            rows.push(row_of(&method, &spec.name, &result, String::new()));
            let record = EvalRecord {
                method: method.clone(),
                protocol: spec.name.clone(),
                seed: cfg.seed,
                result,
            };
            let json = out.join(format!("{stem}.json"));
            write_json(&json, &record)?;
            files.extend([json, scores]);
        }
    }
    let table = format_table(&rows);
    let table_path = out.join(format!("eval-{method}.txt"));
    write_text(&table_path, &table)?;
    files.push(table_path);
    print!("{table}");
    record_outputs(out, "eval", &files)
}

fn row_of(method: &str, protocol: &str, r: &ProtocolResult, note: String) -> TableRow {
    TableRow {
        method: method.into(),
        protocol: format!("{protocol} ({}->{}, {})", r.train_domain, r.eval_domain, r.policy.as_str()),
        hter: r.rates.hter,
        acer: r.acer.acer,
        eer: r.eer,
        note,
    }
}

fn collect_eval_records(dir: &Path, found: &mut Vec<EvalRecord>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    paths.sort();
    for path in paths {
        if path.is_dir() {
            collect_eval_records(&path, found)?;
        } else {
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            if name.starts_with("eval-") && name.ends_with(".json") {
                found.push(read_json(&path)?);
            }
        }
    }
    Ok(())
}

/// Median across seeds of every (method, protocol) cell under `runs`, with
/// the HTER interquartile range when more than one seed contributes.
pub fn cmd_report(runs: &Path, policy: ThresholdPolicy) -> Result<String> {
    if !runs.is_dir() {
        return Err(Error::Input(format!("runs directory not found: {}", runs.display())));
    }
    let mut records = Vec::new();
    collect_eval_records(runs, &mut records)?;
    records.retain(|r| r.result.policy == policy);
    if records.is_empty() {
        return Err(Error::Input(format!(
            "no {} eval results under {}",
            policy.as_str(),
            runs.display()
        )));
    }
    let mut groups: BTreeMap<(String, String), Vec<&EvalRecord>> = BTreeMap::new();
    for r in &records {
        groups.entry((r.method.clone(), r.protocol.clone())).or_default().push(r);
    }
    let rows: Vec<TableRow> = groups
        .iter()
        .map(|((method, protocol), group)| {
            let col = |f: fn(&ProtocolResult) -> f64| -> Vec<f64> { group.iter().map(|r| f(&r.result)).collect() };
            let hter = col(|r| r.rates.hter);
            let note = if group.len() > 1 {
                format!(
                    "(IQR {:.2}, n={})",
                    100.0 * (quantile(&hter, 0.75) - quantile(&hter, 0.25)),
                    group.len()
                )
            } else {
                String::new()
            };
            let first = &group[0].result;
            TableRow {
                method: method.clone(),
                protocol: format!("{protocol} ({}->{})", first.train_domain, first.eval_domain),
                hter: median(&hter),
                acer: median(&col(|r| r.acer.acer)),
                eer: median(&col(|r| r.eer)),
                note,
            }
        })
        .collect();
    let table = format_table(&rows);
    let path = runs.join("report.txt");
    write_text(&path, &table)?;
    Ok(table)
}

/// Split counts of a manifest, for quick inspection in tests and scripts.
pub fn manifest_counts(path: &Path) -> Result<SplitCounts> {
    Ok(SplitCounts::of(&load_sessions(path)?))
}

//! The `niesr` command line: corpus generation, training, scoring and
//! nuisance probes.
//!
//! Exit codes are 0 on success, 1 on runtime failure (I/O, corrupt files,
//! divergence) and 2 on usage or contract errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::data::{read_corpus, synth_splits, write_corpus, DataError, SynthSpec, Utterance, Vocabulary};
use crate::eval::{
    evaluate, extract_embeddings, labels, probe_train_eval, stratified_split, Embedding, EvalError, ProbeConfig,
    Report, RunReport, Target,
};
use crate::models::{load_checkpoint, save_checkpoint, Model, ModelKind};
use crate::training::{train, EpochLog, TrainConfig, TrainError, TrainOptions};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Invalid(m) => CliError::Usage(m),
            other => runtime(other),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Contract(m) => CliError::Usage(m),
            EvalError::Data(d) => d.into(),
            other => runtime(other),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Usage(m),
            TrainError::Eval(e) => e.into(),
            TrainError::Data(e) => e.into(),
            other => runtime(other),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "niesr", version, about = "Nuisance-invariant end-to-end speech recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with speaker and environment labels
    Datagen {
        /// JSON generator spec; missing fields take defaults
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n_train: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n_dev: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n_test: u64,
        /// Overrides the spec's seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and keep the checkpoint with the best dev CER
    Train {
        #[arg(long, value_parser = ["base", "niesr", "grl"])]
        model: String,
        /// Corpus directory; repeat to train on the union of several
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        /// JSON training config; missing fields take the preset's values
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "paper", value_parser = ["paper", "desk"])]
        preset: String,
        #[arg(long)]
        run: PathBuf,
        /// Overrides the config's seed
        #[arg(long)]
        seed: Option<u64>,
        /// Record wall-clock time per epoch (makes logs non-reproducible)
        #[arg(long)]
        timing: bool,
    },
    /// Greedy-decode a split and report its CER
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// JSON report to create or update
        #[arg(long)]
        report: PathBuf,
        /// Row name in the report (default: checkpoint directory name)
        #[arg(long)]
        name: Option<String>,
        /// CER of a baseline, for the relative-improvement column
        #[arg(long)]
        baseline_cer: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a nuisance classifier on frozen embeddings and report its accuracy
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_parser = ["h", "h1", "h2"])]
        embedding: String,
        #[arg(long, value_parser = ["speaker", "env"])]
        target: String,
        /// JSON report to create or update
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        name: Option<String>,
        /// Share of the split held out to score the probe
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parses `args` (including the program name) and runs the command. Returns
/// the process exit code; messages go to stdout/stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

pub fn execute(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Datagen {
            spec,
            out,
            n_train,
            n_dev,
            n_test,
            seed,
        } => cmd_datagen(spec.as_deref(), &out, [n_train, n_dev, n_test].map(|n| n as usize), seed),
        Command::Train {
            model,
            data,
            config,
            preset,
            run,
            seed,
            timing,
        } => cmd_train(&model, &data, config.as_deref(), &preset, &run, seed, timing),
        Command::Eval {
            ckpt,
            data,
            split,
            report,
            name,
            baseline_cer,
            seed: _,
        } => cmd_eval(&ckpt, &data, &split, &report, name, baseline_cer),
        Command::Probe {
            ckpt,
            data,
            split,
            embedding,
            target,
            report,
            name,
            test_fraction,
            seed,
        } => cmd_probe(&ckpt, &data, &split, &embedding, &target, &report, name, test_fraction, seed),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid {what} {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn cmd_datagen(spec: Option<&Path>, out: &Path, n: [usize; 3], seed: Option<u64>) -> CliResult<()> {
    let mut spec: SynthSpec = match spec {
        Some(p) => read_json(p, "generator spec")?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let splits = synth_splits(&spec, n[0], n[1], n[2])?;
    fs::create_dir_all(out).map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))?;
    for (name, utts) in [("train", &splits.train), ("dev", &splits.dev), ("test", &splits.test)] {
        write_corpus(out, name, utts)?;
    }
    splits.vocab.save(&out.join("vocab.json"))?;
    let snapshot = serde_json::to_string_pretty(&spec).expect("spec serializes") + "\n";
    write_file(&out.join("synth.json"), snapshot.as_bytes())?;
    println!(
        "wrote train={} dev={} test={} utterances to {} ({} speakers per split, {} envs, feat_dim {})",
        splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        out.display(),
        spec.speakers,
        spec.envs,
        spec.feat_dim
    );
    Ok(())
}

fn load_data_dir(dir: &Path, split: &str) -> CliResult<(Vec<Utterance>, Vocabulary)> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("data directory {} does not exist", dir.display())));
    }
    let vocab = Vocabulary::load(&dir.join("vocab.json")).map_err(|e| CliError::Usage(e.to_string()))?;
    let utts = read_corpus(dir, split)?;
    if utts.is_empty() {
        return Err(CliError::Usage(format!("split `{split}` in {} is empty", dir.display())));
    }
    Ok((utts, vocab))
}

/// Marker file that keeps two writers out of one run directory.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(run: &Path) -> CliResult<Self> {
        fs::create_dir_all(run).map_err(|e| runtime(format!("cannot create {}: {e}", run.display())))?;
        let path = run.join(".lock");
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|_| CliError::Usage(format!("run directory {} is locked by another process", run.display())))?;
        Ok(RunLock(path))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn cmd_train(
    model: &str,
    data: &[PathBuf],
    config: Option<&Path>,
    preset: &str,
    run: &Path,
    seed: Option<u64>,
    timing: bool,
) -> CliResult<()> {
    let kind: ModelKind = model.parse().map_err(CliError::Usage)?;
    let base = if preset == "desk" { TrainConfig::desk() } else { TrainConfig::default() };
    let mut cfg = match config {
        Some(p) => {
            // fields missing from the file keep the preset's values
            let mut v = serde_json::to_value(&base).expect("config serializes");
            let over: serde_json::Value = read_json(p, "training config")?;
            merge(&mut v, over);
            serde_json::from_value(v).map_err(|e| CliError::Usage(format!("invalid training config {}: {e}", p.display())))?
        }
        None => base,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;

    let mut train_set = Vec::new();
    let mut dev_set = Vec::new();
    let mut vocab: Option<Vocabulary> = None;
    for dir in data {
        let (t, v) = load_data_dir(dir, "train")?;
        let (d, _) = load_data_dir(dir, "dev")?;
        match &vocab {
            Some(prev) if prev != &v => {
                return Err(CliError::Usage(format!("{} has a different vocabulary", dir.display())));
            }
            _ => vocab = Some(v),
        }
        train_set.extend(t);
        dev_set.extend(d);
    }
    let vocab = vocab.expect("at least one data dir");
    if kind == ModelKind::Grl {
        labels(&train_set, cfg.grl_target).map_err(|e| match e {
            EvalError::Contract(m) => CliError::Usage(format!("--model grl needs nuisance labels: {m}")),
            other => other.into(),
        })?;
    }

    let _lock = RunLock::acquire(run)?;
    let snapshot = serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n";
    write_file(&run.join("config.json"), snapshot.as_bytes())?;
    let log_path = run.join("log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| runtime(format!("cannot write {}: {e}", log_path.display())))?;
    let mut log_err = None;
    let outcome = train(
        kind,
        &train_set,
        &dev_set,
        &vocab,
        &cfg,
        TrainOptions {
            timing,
            on_epoch: Some(Box::new(|r: &EpochLog| {
                println!("epoch {:>4}  L_y {:.4}  dev CER {:.4}", r.epoch, r.l_y, r.dev_cer);
                if let Err(e) = writeln!(log, "{}", r.to_json_line()) {
                    log_err.get_or_insert(e);
                }
            })),
        },
    )?;
    if let Some(e) = log_err {
        return Err(runtime(format!("cannot write {}: {e}", log_path.display())));
    }
    save_checkpoint(&run.join("best.ckpt"), &outcome.model.params).map_err(runtime)?;
    if let Some(d) = outcome.diverged {
        return Err(CliError::Runtime(format!(
            "training diverged ({d}); best.ckpt holds the last good model"
        )));
    }
    match (outcome.best_epoch, outcome.best_dev_cer) {
        (Some(e), Some(c)) => println!("best dev CER {c:.4} at epoch {e}; wrote {}", run.join("best.ckpt").display()),
        _ => println!("wrote {}", run.join("best.ckpt").display()),
    }
    Ok(())
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn load_model(ckpt: &Path) -> CliResult<Model> {
    let params = load_checkpoint(ckpt).map_err(runtime)?;
    Model::from_params(params).map_err(|e| runtime(format!("{}: {e}", ckpt.display())))
}

fn run_name(ckpt: &Path, name: Option<String>) -> String {
    name.unwrap_or_else(|| {
        ckpt.canonicalize()
            .ok()
            .and_then(|p| p.parent().and_then(|d| d.file_name()).map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "run".into())
    })
}

/// Applies `f` to the named row of the report at `path`, creating the file or
/// row as needed, then prints the table.
fn update_report(path: &Path, name: &str, f: impl FnOnce(&mut RunReport)) -> CliResult<()> {
    let mut report = if path.exists() {
        let text = fs::read_to_string(path).map_err(|e| runtime(format!("cannot read {}: {e}", path.display())))?;
        Report::from_json(&text).map_err(|e| runtime(format!("{} is not a report: {e}", path.display())))?
    } else {
        Report::default()
    };
    let idx = match report.runs.iter().position(|r| r.name == name) {
        Some(i) => i,
        None => {
            report.runs.push(RunReport {
                name: name.to_string(),
                cer: None,
                rel_improvement: None,
                probes: Default::default(),
            });
            report.runs.len() - 1
        }
    };
    f(&mut report.runs[idx]);
    write_file(path, report.to_json().as_bytes())?;
    print!("{}", report.render());
    Ok(())
}

fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    split: &str,
    report: &Path,
    name: Option<String>,
    baseline_cer: Option<f64>,
) -> CliResult<()> {
    let (utts, vocab) = load_data_dir(data, split)?;
    let model = load_model(ckpt)?;
    if model.vocab_size != vocab.size() {
        return Err(CliError::Runtime(format!(
            "checkpoint vocabulary has {} ids, data has {}",
            model.vocab_size,
            vocab.size()
        )));
    }
    let summary = evaluate(&model, &utts, &vocab)?;
    println!("{split}: {} edits / {} chars, CER {:.4}", summary.edits, summary.ref_chars, summary.cer);
    let name = run_name(ckpt, name);
    update_report(report, &name, |r| {
        r.cer = Some(summary.cer);
        r.rel_improvement = baseline_cer.map(|b| crate::eval::relative_improvement(b, summary.cer));
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_probe(
    ckpt: &Path,
    data: &Path,
    split: &str,
    embedding: &str,
    target: &str,
    report: &Path,
    name: Option<String>,
    test_fraction: f64,
    seed: u64,
) -> CliResult<()> {
    let which = match embedding {
        "h" => Embedding::H,
        "h1" => Embedding::H1,
        _ => Embedding::H2,
    };
    let target = if target == "env" { Target::Env } else { Target::Speaker };
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CliError::Usage("--test-fraction must lie strictly between 0 and 1".into()));
    }
    let (utts, _) = load_data_dir(data, split)?;
    let model = load_model(ckpt)?;
    let embs = extract_embeddings(&model, &utts, which)?;
    let ys = labels(&utts, target)?;
    let (tr, te) = stratified_split(&ys, test_fraction, seed);
    let pick = |idx: &[usize]| -> (Vec<_>, Vec<usize>) { (idx.iter().map(|&i| embs[i].clone()).collect(), idx.iter().map(|&i| ys[i]).collect()) };
    let (xtr, ytr) = pick(&tr);
    let (xte, yte) = pick(&te);
    let cfg = ProbeConfig {
        seed,
        ..ProbeConfig::default()
    };
    let acc = probe_train_eval(&xtr, &ytr, &xte, &yte, &cfg)?;
    println!("{} probe on {}: accuracy {:.4} ({} test utterances)", target.name(), which.name(), acc, yte.len());
    let name = run_name(ckpt, name);
    update_report(report, &name, |r| {
        r.probes
            .entry(target.name().to_string())
            .or_default()
            .insert(which.name().to_string(), acc);
    })
}

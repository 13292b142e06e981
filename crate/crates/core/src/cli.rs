//! Command-line front end: configuration loading, overrides and the four
//! subcommands.
//!
//! A run is described by one TOML document with the sections `[merge]`,
//! `[inputs]`, `[suite]`, `[synth]`, `[sweep]` and `[eval]`. Every section is
//! optional and every key has a default. `--set section.key=value` overrides
//! are applied to the parsed document before it is checked, so unknown keys
//! are rejected whether they come from the file or the command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, Checkpoint};
use crate::error::{MergeError, Result};
use crate::merge::{merge, MergeConfig, MergeMethod};
use crate::synth::{
    evaluate_gap, generate_suite, rank_sweep, run_comparison, SuiteConfig, SyntheticSuite,
};

pub const ERROR_LOG: &str = "error.log";
pub const MERGED_CHECKPOINT: &str = "merged.safetensors";
pub const MERGE_REPORT: &str = "report.json";
pub const SUITE_FILE: &str = "suite.json";
pub const PRETRAINED_CHECKPOINT: &str = "pretrained.safetensors";
pub const COMPARISON_FILE: &str = "comparison.json";
pub const SWEEP_FILE: &str = "sweep.json";
pub const GAP_FILE: &str = "gap.json";

#[derive(Debug, Parser)]
#[command(
    name = "doge",
    version,
    about = "Data-free model merging with projective gradient descent"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set merge.eta=0.15`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Directory receiving the run's artifacts.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for per-layer parallelism (0 uses every core).
    #[arg(long, global = true, value_name = "N", default_value_t = 0)]
    pub workers: usize,
    /// Only report warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Merge `inputs.finetuned` onto `inputs.pretrained`.
    Merge,
    /// Score `eval.checkpoint` against the tasks of `eval.suite`.
    Eval,
    /// Rerun the projective merge once per `sweep.ratios` entry.
    Sweep,
    /// Generate a synthetic suite and compare the configured methods on it.
    Synth,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputsConfig {
    pub pretrained: Option<PathBuf>,
    pub finetuned: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Methods compared on the suite; each runs with the `[merge]` settings.
    pub methods: Vec<MergeMethod>,
    /// Also write `sweep.json` using `[sweep]`.
    pub sweep: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            methods: vec![
                MergeMethod::Average,
                MergeMethod::TaskArithmetic,
                MergeMethod::Doge,
            ],
            sweep: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub ratios: Vec<f64>,
    /// Suite JSON to sweep on; generated from `[suite]` when unset.
    pub suite: Option<PathBuf>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            ratios: vec![0.1, 0.3, 0.5, 1.0],
            suite: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    pub suite: Option<PathBuf>,
}

/// The fully resolved configuration of one invocation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub merge: MergeConfig,
    pub inputs: InputsConfig,
    pub suite: SuiteConfig,
    pub synth: SynthConfig,
    pub sweep: SweepConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Checks everything `command` will use, before any file is touched.
    pub fn validate(&self, command: Command) -> Result<()> {
        match command {
            Command::Merge => {
                self.merge.validate()?;
                if self.inputs.pretrained.is_none() {
                    return Err(MergeError::Config(
                        "`inputs.pretrained` is required for merge".into(),
                    ));
                }
                if self.inputs.finetuned.is_empty() {
                    return Err(MergeError::Config(
                        "`inputs.finetuned` must list at least one checkpoint".into(),
                    ));
                }
            }
            Command::Eval => {
                if self.eval.checkpoint.is_none() || self.eval.suite.is_none() {
                    return Err(MergeError::Config(
                        "`eval.checkpoint` and `eval.suite` are required for eval".into(),
                    ));
                }
            }
            Command::Sweep => {
                self.merge.validate()?;
                self.validate_sweep()?;
                if self.sweep.suite.is_none() {
                    self.suite.validate()?;
                }
            }
            Command::Synth => {
                self.merge.validate()?;
                self.suite.validate()?;
                if self.synth.methods.is_empty() && !self.synth.sweep {
                    return Err(MergeError::Config(
                        "`synth.methods` is empty and `synth.sweep` is off".into(),
                    ));
                }
                if self.synth.sweep {
                    self.validate_sweep()?;
                }
            }
        }
        Ok(())
    }

    fn validate_sweep(&self) -> Result<()> {
        if self.sweep.ratios.is_empty() {
            return Err(MergeError::Config(
                "`sweep.ratios` must not be empty".into(),
            ));
        }
        if let Some(r) = self
            .sweep
            .ratios
            .iter()
            .find(|r| !(**r > 0.0 && **r <= 1.0))
        {
            return Err(MergeError::Config(format!(
                "`sweep.ratios` entry {r} must lie in (0, 1]"
            )));
        }
        Ok(())
    }
}

/// Parses `text` as TOML, applies `overrides` and deserialises the result.
pub fn resolve_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table = toml::from_str(text)
        .map_err(|e| MergeError::Config(format!("malformed configuration: {e}")))?;
    for item in overrides {
        apply_override(&mut table, item)?;
    }
    RunConfig::deserialize(toml::Value::Table(table))
        .map_err(|e| MergeError::Config(format!("invalid configuration: {}", e.message())))
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item.split_once('=').ok_or_else(|| {
        MergeError::Config(format!("override `{item}` is not of the form KEY=VALUE"))
    })?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(MergeError::Config(format!(
            "override key `{key}` is malformed"
        )));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().expect("split yields one part");
    let mut cursor = table;
    for part in parents {
        let slot = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = slot.as_table_mut().ok_or_else(|| {
            MergeError::Config(format!("override `{key}`: `{part}` is not a section"))
        })?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

/// A TOML literal when the text parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Artifacts are written under temporary names and renamed only once every
/// one of them is complete, so a failed run never leaves a truncated file.
struct Staging {
    dir: PathBuf,
    files: Vec<(PathBuf, PathBuf)>,
}

impl Staging {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| MergeError::io(dir, e))?;
        Ok(Staging {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn stage(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let target = self.dir.join(name);
        let temp = self.dir.join(format!(".{name}.partial"));
        // Registered before writing so that a failed write is cleaned up too.
        self.files.push((temp.clone(), target.clone()));
        fs::write(&temp, bytes).map_err(|e| MergeError::io(&temp, e))?;
        Ok(target)
    }

    fn commit(self) -> Result<()> {
        for (temp, target) in &self.files {
            fs::rename(temp, target).map_err(|e| MergeError::io(target, e))?;
        }
        let _ = fs::remove_file(self.dir.join(ERROR_LOG));
        Ok(())
    }
}

/// Leaves only the error log behind: partial files and stale artifacts of a
/// previous run are removed.
fn record_failure(dir: &Path, artifacts: &[String], err: &MergeError) {
    if fs::create_dir_all(dir).is_err() {
        return;
    }
    for name in artifacts {
        let _ = fs::remove_file(dir.join(name));
        let _ = fs::remove_file(dir.join(format!(".{name}.partial")));
    }
    let _ = fs::write(dir.join(ERROR_LOG), format!("error: {err}\n"));
}

fn to_pretty_json<T: Serialize>(value: &T, config: &RunConfig) -> Result<String> {
    let mut doc = serde_json::to_value(value)
        .map_err(|e| MergeError::Numerical(format!("report cannot be serialised: {e}")))?;
    if let serde_json::Value::Object(map) = &mut doc {
        let echo = serde_json::to_value(config).map_err(|e| {
            MergeError::Numerical(format!("configuration cannot be serialised: {e}"))
        })?;
        map.insert("resolved_config".into(), echo);
    }
    Ok(serde_json::to_string_pretty(&doc).expect("JSON value serialises") + "\n")
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| MergeError::io(path, e))
}

/// Loads a checkpoint, naming the file in container errors.
fn load_named(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).map_err(|e| match e {
        MergeError::Format { offset, message } => MergeError::Format {
            offset,
            message: format!("{message} (in {})", path.display()),
        },
        MergeError::Integrity { key, message } => MergeError::Integrity {
            key,
            message: format!("{message} (in {})", path.display()),
        },
        other => other,
    })
}

fn load_suite(path: &Path) -> Result<SyntheticSuite> {
    SyntheticSuite::from_json(&read_text(path)?).map_err(|e| match e {
        MergeError::Config(msg) => MergeError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn task_file(task: usize) -> String {
    format!("task_{task:02}.safetensors")
}

/// The file names `command` writes into the output directory.
fn declared_artifacts(command: Command, config: &RunConfig) -> Vec<String> {
    match command {
        Command::Merge => vec![MERGED_CHECKPOINT.into(), MERGE_REPORT.into()],
        Command::Eval => vec![GAP_FILE.into()],
        Command::Sweep => vec![SWEEP_FILE.into()],
        Command::Synth => {
            let mut names = vec![SUITE_FILE.into(), PRETRAINED_CHECKPOINT.into()];
            names.extend((1..=config.suite.n_tasks).map(task_file));
            if !config.synth.methods.is_empty() {
                names.push(COMPARISON_FILE.into());
            }
            if config.synth.sweep {
                names.push(SWEEP_FILE.into());
            }
            names
        }
    }
}

fn run_merge(config: &RunConfig, out: &Path) -> Result<()> {
    let pretrained_path = config.inputs.pretrained.as_ref().expect("validated");
    let pretrained = load_named(pretrained_path)?;
    let finetuned = config
        .inputs
        .finetuned
        .iter()
        .map(|p| load_named(p))
        .collect::<Result<Vec<Checkpoint>>>()?;
    info!(
        "merging {} checkpoints with {:?}",
        finetuned.len(),
        config.merge.method
    );
    let (merged, mut report) = merge(&pretrained, &finetuned, &config.merge)?;
    for w in &report.global.warnings {
        warn!("{w}");
    }
    info!(
        "{} layers, {} aborted, mean lambda {:.4}, {:.2}s",
        report.layers.len(),
        report.global.aborted_layers,
        report.global.mean_lambda,
        report.global.wall_time_secs
    );
    let mut staging = Staging::new(out)?;
    let target = staging.stage(MERGED_CHECKPOINT, &merged.to_bytes())?;
    report.global.output_path = Some(target.display().to_string());
    staging.stage(MERGE_REPORT, to_pretty_json(&report, config)?.as_bytes())?;
    staging.commit()?;
    info!("wrote {}", target.display());
    Ok(())
}

fn run_eval(config: &RunConfig, out: &Path) -> Result<()> {
    let checkpoint = load_named(config.eval.checkpoint.as_ref().expect("validated"))?;
    let suite = load_suite(config.eval.suite.as_ref().expect("validated"))?;
    let gap = evaluate_gap(&suite, &checkpoint)?;
    let text = to_pretty_json(&gap, config)?;
    let mut staging = Staging::new(out)?;
    staging.stage(GAP_FILE, text.as_bytes())?;
    staging.commit()?;
    // A closed stdout is not a failure: the result is already on disk.
    let _ = writeln!(
        std::io::stdout().lock(),
        "{}",
        serde_json::to_string_pretty(&gap).expect("gap serialises")
    );
    Ok(())
}

fn run_sweep(config: &RunConfig, out: &Path) -> Result<()> {
    let suite = match &config.sweep.suite {
        Some(path) => load_suite(path)?,
        None => generate_suite(&config.suite)?,
    };
    let table = rank_sweep(&suite, &config.merge, &config.sweep.ratios)?;
    for row in &table.rows {
        info!("ratio {:.3}: mean gap {:.6e}", row.ratio, row.mean_gap);
    }
    let mut staging = Staging::new(out)?;
    staging.stage(SWEEP_FILE, to_pretty_json(&table, config)?.as_bytes())?;
    staging.commit()
}

fn run_synth(config: &RunConfig, out: &Path) -> Result<()> {
    let suite = generate_suite(&config.suite)?;
    let mut staging = Staging::new(out)?;
    staging.stage(SUITE_FILE, suite.to_json().as_bytes())?;
    staging.stage(
        PRETRAINED_CHECKPOINT,
        &suite.pretrained_checkpoint()?.to_bytes(),
    )?;
    for (i, expert) in suite.expert_checkpoints()?.iter().enumerate() {
        staging.stage(&task_file(i + 1), &expert.to_bytes())?;
    }
    if !config.synth.methods.is_empty() {
        let methods: Vec<MergeConfig> = config
            .synth
            .methods
            .iter()
            .map(|&method| MergeConfig {
                method,
                ..config.merge.clone()
            })
            .collect();
        let table = run_comparison(&suite, &methods)?;
        for row in &table.rows {
            match (&row.result, &row.error) {
                (Some(r), _) => info!("{}: mean gap {:.6e}", row.label, r.mean_gap),
                (None, Some(e)) => warn!("{} failed: {e}", row.label),
                (None, None) => {}
            }
        }
        staging.stage(COMPARISON_FILE, to_pretty_json(&table, config)?.as_bytes())?;
    }
    if config.synth.sweep {
        let table = rank_sweep(&suite, &config.merge, &config.sweep.ratios)?;
        staging.stage(SWEEP_FILE, to_pretty_json(&table, config)?.as_bytes())?;
    }
    staging.commit()
}

fn init_logging(quiet: bool) {
    let level = if quiet {
        log::LevelFilter::Warn
    } else {
        log::LevelFilter::Info
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .parse_default_env()
        .try_init();
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let text = match &cli.config {
        Some(path) => read_text(path)?,
        None => String::new(),
    };
    let config = resolve_config(&text, &cli.overrides).map_err(|e| match (e, &cli.config) {
        (MergeError::Config(msg), Some(path)) => {
            MergeError::Config(format!("{}: {msg}", path.display()))
        }
        (e, _) => e,
    })?;
    config.validate(cli.command)?;
    Ok(config)
}

/// Runs one parsed invocation and returns the process exit code.
pub fn execute(cli: &Cli) -> i32 {
    init_logging(cli.quiet);
    let config = match load_config(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {} workers: {e}", cli.workers);
            return MergeError::Config(String::new()).exit_code();
        }
    };
    let started = Instant::now();
    let out = cli.out.as_path();
    let outcome = pool.install(|| match cli.command {
        Command::Merge => run_merge(&config, out),
        Command::Eval => run_eval(&config, out),
        Command::Sweep => run_sweep(&config, out),
        Command::Synth => run_synth(&config, out),
    });
    match outcome {
        Ok(()) => {
            info!("done in {:.2}s", started.elapsed().as_secs_f64());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            record_failure(out, &declared_artifacts(cli.command, &config), &e);
            e.exit_code()
        }
    }
}

/// Parses `args` (including the program name) and runs them.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(&cli),
        Err(e) => {
            let _ = e.print();
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::ProjectionMode;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(resolve_config("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_apply_after_file() {
        let text = "[merge]\neta = 0.15\niterations = 10\n";
        let config = resolve_config(
            text,
            &[
                "merge.eta=0.2".into(),
                "merge.projection_mode=along".into(),
                "suite.seed=7".into(),
                "inputs.finetuned=[\"a\", \"b\"]".into(),
            ],
        )
        .unwrap();
        assert_eq!(config.merge.eta, 0.2);
        assert_eq!(config.merge.iterations, 10);
        assert_eq!(config.merge.projection_mode, ProjectionMode::Along);
        assert_eq!(config.suite.seed, 7);
        assert_eq!(
            config.inputs.finetuned,
            vec![PathBuf::from("a"), PathBuf::from("b")]
        );
    }

    #[test]
    fn unknown_keys_rejected_from_either_source() {
        let err = resolve_config("[merge]\netta = 1.0\n", &[]).unwrap_err();
        assert!(err.to_string().contains("etta"), "{err}");
        let err = resolve_config("", &["suite.sead=1".into()]).unwrap_err();
        assert!(err.to_string().contains("sead"), "{err}");
        let err = resolve_config("", &["bogus.x=1".into()]).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn malformed_overrides_rejected() {
        assert!(resolve_config("", &["merge.eta".into()]).is_err());
        assert!(resolve_config("", &["merge..eta=1".into()]).is_err());
        assert!(resolve_config("", &["merge.eta=fast".into()]).is_err());
        assert!(resolve_config("", &["merge=1".into(), "merge.eta=1".into()]).is_err());
    }

    #[test]
    fn validation_names_fields() {
        let config = resolve_config("", &["merge.trim_fraction=0".into()]).unwrap();
        let err = config.validate(Command::Synth).unwrap_err();
        assert!(err.to_string().contains("trim_fraction"), "{err}");
        let err = RunConfig::default().validate(Command::Merge).unwrap_err();
        assert!(err.to_string().contains("inputs.pretrained"), "{err}");
        let err = RunConfig::default().validate(Command::Eval).unwrap_err();
        assert!(err.to_string().contains("eval.checkpoint"), "{err}");
        let config = resolve_config("", &["sweep.ratios=[0.5, 0.0]".into()]).unwrap();
        assert!(config.validate(Command::Sweep).is_err());
    }

    #[test]
    fn example_config_resolves() {
        let config = resolve_config(include_str!("../../../configs/example.toml"), &[]).unwrap();
        assert_eq!(config.merge, MergeConfig::default());
        assert_eq!(config.suite, SuiteConfig::default());
        assert_eq!(config.inputs.finetuned.len(), 2);
        config.validate(Command::Merge).unwrap();
    }

    #[test]
    fn bare_words_become_strings() {
        assert_eq!(parse_value("doge"), toml::Value::String("doge".into()));
        assert_eq!(parse_value("3"), toml::Value::Integer(3));
        assert_eq!(
            parse_value("layers\\..*"),
            toml::Value::String("layers\\..*".into())
        );
    }
}

//! The `flux` command line: experiment configs, overrides, run directories
//! and the subcommand drivers.
//!
//! A run resolves its configuration as defaults ← `--config` file ←
//! `--set key=value` overrides ← dedicated flags, rejects unknown keys, and
//! writes everything into `<out_dir>/<mode>-<timestamp>-<hash>/`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::FluxError;
use crate::fluxvit::{gradcheck_model, init_params, load_checkpoint, FluxViTConfig, FluxViTParams};
use crate::rng::{derive_seed, hex_digest};
use crate::sampling::SamplerConfig;
use crate::tokenopt::{flops, heuristic_search, Lattice};
use crate::train::{
    evaluate, grid_accuracy, thread_cap, train, Mode, TrainConfig, TrainHooks, TrainOutcome,
};
use crate::videogen::{export_dataset, gen_dataset, import_dataset, GenSpec, VideoSample};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    GenData,
    Pretrain,
    Finetune,
    Eval,
    Tokenopt,
    Flops,
    GradCheck,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::GenData => "gen_data",
            Self::Pretrain => "pretrain",
            Self::Finetune => "finetune",
            Self::Eval => "eval",
            Self::Tokenopt => "tokenopt",
            Self::Flops => "flops",
            Self::GradCheck => "grad_check",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    /// Directory with `train/` and `eval/` splits written by `gen-data`;
    /// when absent the splits are generated in memory from the seed.
    pub data_dir: Option<PathBuf>,
    /// Model checkpoint to start from (pretrain/finetune) or to evaluate.
    pub checkpoint: Option<PathBuf>,
    pub teacher_checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            data_dir: None,
            checkpoint: None,
            teacher_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train_count: usize,
    pub eval_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_count: 256,
            eval_count: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub counts: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { counts: vec![32, 16, 8] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenOptConfig {
    pub budget: usize,
    pub plateau_eps: f64,
    /// Evaluation clips scored per lattice point (a prefix of the eval split).
    pub eval_count: usize,
}

impl Default for TokenOptConfig {
    fn default() -> Self {
        Self {
            budget: 32,
            plateau_eps: 0.002,
            eval_count: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsConfig {
    pub tokens: usize,
}

impl Default for FlopsConfig {
    fn default() -> Self {
        Self { tokens: 2048 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub model: FluxViTConfig,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            model: FluxViTConfig::tiny(),
            eps: 1e-5,
            tolerance: 1e-4,
        }
    }
}

/// Everything a run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Must match the subcommand when given.
    pub mode: Option<RunMode>,
    pub seed: u64,
    pub paths: PathsConfig,
    pub gen: GenSpec,
    pub data: DataConfig,
    pub sampler: SamplerConfig,
    pub model: FluxViTConfig,
    pub teacher: FluxViTConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub tokenopt: TokenOptConfig,
    pub flops: FlopsConfig,
    pub grad_check: GradCheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: None,
            seed: 0,
            paths: PathsConfig::default(),
            gen: GenSpec::default(),
            data: DataConfig::default(),
            sampler: SamplerConfig::desk(),
            model: FluxViTConfig::desk_student(),
            teacher: FluxViTConfig::desk_teacher(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            tokenopt: TokenOptConfig::default(),
            flops: FlopsConfig::default(),
            grad_check: GradCheckConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// SHA-256 of the canonical JSON encoding, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.out_dir = PathBuf::new();
        hex_digest(&serde_json::to_vec(&c).expect("config serializes"))
    }

    /// Cross-section checks that individual sections cannot make alone.
    pub fn validate(&self, mode: RunMode) -> crate::Result<()> {
        let bad = |m: String| Err(FluxError::InvalidConfig(m));
        match mode {
            RunMode::Flops => return self.model.validate(),
            RunMode::GradCheck => {
                if !(self.grad_check.eps > 0.0 && self.grad_check.tolerance > 0.0) {
                    return bad("grad_check: eps and tolerance must be positive".into());
                }
                return self.grad_check.model.validate();
            }
            _ => {}
        }
        self.gen.validate()?;
        if self.data.train_count == 0 || self.data.eval_count == 0 {
            return bad("data: train_count and eval_count must be positive".into());
        }
        if mode == RunMode::GenData {
            return Ok(());
        }
        self.sampler.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.sampler.patch() != self.model.patch {
            return bad(format!(
                "sampler patch {:?} differs from model patch {:?}",
                self.sampler.patch(),
                self.model.patch
            ));
        }
        if self.model.channels != self.gen.channels {
            return bad(format!(
                "model expects {} channels, videos have {}",
                self.model.channels, self.gen.channels
            ));
        }
        if self.model.num_classes < self.gen.num_classes {
            return bad(format!(
                "model has {} classes, videos use {}",
                self.model.num_classes, self.gen.num_classes
            ));
        }
        if mode == RunMode::Pretrain {
            self.teacher.validate()?;
            if self.teacher.patch != self.model.patch || self.teacher.channels != self.model.channels {
                return bad("teacher and student must share patch size and channels".into());
            }
        }
        if mode == RunMode::Eval && (self.eval.counts.is_empty() || self.eval.counts.contains(&0)) {
            return bad("eval: counts must be a non-empty list of positive values".into());
        }
        if mode == RunMode::Tokenopt && (self.tokenopt.budget == 0 || self.tokenopt.eval_count == 0) {
            return bad("tokenopt: budget and eval_count must be positive".into());
        }
        if matches!(mode, RunMode::Eval | RunMode::Tokenopt) && self.paths.checkpoint.is_none() {
            return bad(format!("{}: paths.checkpoint (or --checkpoint) is required", mode.as_str()));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "flux", version, about = "Flexible-token video transformer pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON experiment config; omitted keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.lr=0.003`; the value is parsed as
    /// JSON and falls back to a plain string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and export the train/eval synthetic video splits.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Teacher-aligned pre-training of the student.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        teacher_checkpoint: Option<PathBuf>,
    },
    /// Supervised (multi-count) fine-tuning.
    Finetune {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Accuracy per token count on the eval split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated token counts.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
    },
    /// Search the (frames, resolution) lattice for the best grid at a budget.
    Tokenopt {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Multiply-accumulate breakdown of one forward pass.
    Flops {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        tokens: Option<usize>,
        #[arg(long)]
        num_classes: Option<usize>,
    },
    /// Finite-difference gradient check of a small model.
    GradCheck {
        #[command(flatten)]
        common: CommonArgs,
    },
}

/// Failure of a CLI run, split by exit code.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => EXIT_VALIDATION,
            Self::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Validation(m) => write!(f, "validation error: {m}"),
            Self::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<FluxError> for CliError {
    fn from(e: FluxError) -> Self {
        match e {
            FluxError::InvalidConfig(_) => Self::Validation(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn validation<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Validation(msg.into()))
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> CliResult<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return validation(format!("malformed key `{key}`"));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        if cur.is_null() {
            *cur = json!({});
        }
        let Value::Object(map) = cur else {
            return validation(format!("`{key}`: `{p}` is not a section"));
        };
        cur = map.entry(p.to_string()).or_insert(Value::Null);
    }
    if cur.is_null() {
        *cur = json!({});
    }
    let Value::Object(map) = cur else {
        return validation(format!("`{key}`: parent is not a section"));
    };
    map.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Resolves the final config. `flags` are the subcommand's dedicated
/// options as `(dotted key, value)`; a flag and a `--set` on the same key
/// must agree.
pub fn resolve_config(mode: RunMode, common: &CommonArgs, flags: &[(&str, Value)]) -> CliResult<ExperimentConfig> {
    let mut root = serde_json::to_value(ExperimentConfig::default()).expect("defaults serialize");
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        if !file.is_object() {
            return validation(format!("config {} must be a JSON object", path.display()));
        }
        merge(&mut root, file);
    }

    let mut assigned: BTreeMap<String, (Value, &'static str)> = BTreeMap::new();
    let mut assign = |key: &str, value: Value, origin: &'static str| -> CliResult<()> {
        if let Some((prev, prev_origin)) = assigned.get(key) {
            if *prev != value {
                return validation(format!(
                    "conflicting values for `{key}`: {prev} ({prev_origin}) vs {value} ({origin})"
                ));
            }
        }
        assigned.insert(key.to_string(), (value, origin));
        Ok(())
    };
    for s in &common.set {
        let Some((k, v)) = s.split_once('=') else {
            return validation(format!("--set expects KEY=VALUE, got `{s}`"));
        };
        assign(k.trim(), parse_value(v.trim()), "--set")?;
    }
    if let Some(seed) = common.seed {
        assign("seed", json!(seed), "--seed")?;
    }
    if let Some(dir) = &common.out_dir {
        assign("paths.out_dir", json!(dir), "--out-dir")?;
    }
    for (k, v) in flags {
        assign(k, v.clone(), "flag")?;
    }
    for (k, (v, _)) in assigned {
        set_path(&mut root, &k, v)?;
    }

    let mut unknown = Vec::new();
    let cfg: ExperimentConfig = serde_ignored::deserialize(root, |path| unknown.push(path.to_string()))
        .map_err(|e| CliError::Validation(format!("config: {e}")))?;
    if !unknown.is_empty() {
        return validation(format!("unknown config keys: {}", unknown.join(", ")));
    }
    if let Some(m) = cfg.mode {
        if m != mode {
            return validation(format!(
                "config mode `{}` does not match subcommand `{}`",
                m.as_str(),
                mode.as_str()
            ));
        }
    }
    let cfg = ExperimentConfig { mode: Some(mode), ..cfg };
    cfg.validate(mode)?;
    Ok(cfg)
}

/// An open run directory.
pub struct RunDir {
    pub path: PathBuf,
    pub config_hash: String,
    started_at: String,
    outputs: Vec<String>,
}

impl RunDir {
    /// Creates `<out_dir>/<mode>-<timestamp>-<hash8>` and writes the
    /// resolved config snapshot.
    pub fn create(cfg: &ExperimentConfig) -> CliResult<Self> {
        let hash = cfg.hash();
        let now = chrono::Utc::now();
        let mode = cfg.mode.map_or("run", RunMode::as_str);
        let stem = format!("{mode}-{}-{}", now.format("%Y%m%dT%H%M%S"), &hash[..8]);
        fs::create_dir_all(&cfg.paths.out_dir)?;
        let mut path = cfg.paths.out_dir.join(&stem);
        let mut n = 1;
        while path.exists() {
            path = cfg.paths.out_dir.join(format!("{stem}-{n}"));
            n += 1;
        }
        fs::create_dir_all(&path)?;
        let snapshot = serde_json::to_string_pretty(cfg).expect("config serializes");
        fs::write(path.join("config.json"), snapshot + "\n")?;
        Ok(Self {
            path,
            config_hash: hash,
            started_at: now.to_rfc3339(),
            outputs: vec!["config.json".into()],
        })
    }

    pub fn file(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.path.join(name)
    }

    fn finish(&self, cfg: &ExperimentConfig, status: &str, extra: Value) -> CliResult<()> {
        let manifest = json!({
            "mode": cfg.mode,
            "seed": cfg.seed,
            "config_hash": self.config_hash,
            "flux_version": env!("CARGO_PKG_VERSION"),
            "started_at": self.started_at,
            "finished_at": chrono::Utc::now().to_rfc3339(),
            "threads": thread_cap(),
            "status": status,
            "outputs": self.outputs,
            "result": extra,
        });
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(self.path.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}

/// Train and eval dataset seed bases the CLI derives from a run seed.
pub fn data_seeds(seed: u64) -> (u64, u64) {
    // shifted so that `seed + i` per clip cannot overflow
    (derive_seed(seed, "data.train") >> 16, derive_seed(seed, "data.eval") >> 16)
}

fn generate_splits(cfg: &ExperimentConfig) -> crate::Result<(Vec<VideoSample>, Vec<VideoSample>)> {
    let (tr, ev) = data_seeds(cfg.seed);
    Ok((
        gen_dataset(tr, &cfg.gen, cfg.data.train_count)?,
        gen_dataset(ev, &cfg.gen, cfg.data.eval_count)?,
    ))
}

fn load_splits(cfg: &ExperimentConfig) -> CliResult<(Vec<VideoSample>, Vec<VideoSample>)> {
    let Some(dir) = &cfg.paths.data_dir else {
        return Ok(generate_splits(cfg)?);
    };
    let (_, train) = import_dataset(&dir.join("train"))?;
    let (_, eval) = import_dataset(&dir.join("eval"))?;
    for s in train.iter().chain(&eval) {
        if s.c() != cfg.model.channels || s.label >= cfg.model.num_classes {
            return validation(format!(
                "dataset {} does not fit the model (channels {}, label {})",
                dir.display(),
                s.c(),
                s.label
            ));
        }
    }
    Ok((train, eval))
}

fn load_model(path: &Path, expected: &FluxViTConfig) -> CliResult<FluxViTParams> {
    let params = load_checkpoint(path)?;
    if &params.config != expected {
        return validation(format!(
            "checkpoint {} was saved with a different model config than `model`",
            path.display()
        ));
    }
    Ok(params)
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn run_gen_data(cfg: &ExperimentConfig, run: &mut RunDir) -> CliResult<Value> {
    let (train, eval) = generate_splits(cfg)?;
    let mt = export_dataset(&run.path.join("data/train"), &cfg.gen, &train)?;
    let me = export_dataset(&run.path.join("data/eval"), &cfg.gen, &eval)?;
    run.outputs.push("data/".into());
    let out = json!({
        "data_dir": run.path.join("data"),
        "train_manifest_hash": mt.hash(),
        "eval_manifest_hash": me.hash(),
        "train_count": train.len(),
        "eval_count": eval.len(),
    });
    print_json(&out);
    Ok(out)
}

fn run_train(mode: Mode, cfg: &ExperimentConfig, run: &mut RunDir, stop: Option<&AtomicBool>) -> CliResult<Value> {
    let (train_data, eval_data) = load_splits(cfg)?;
    let init = match &cfg.paths.checkpoint {
        Some(p) => load_model(p, &cfg.model)?,
        None => init_params(&cfg.model, cfg.seed)?,
    };
    let teacher = if mode == Mode::Pretrain {
        Some(match &cfg.paths.teacher_checkpoint {
            Some(p) => load_model(p, &cfg.teacher)?,
            None => init_params(&cfg.teacher, derive_seed(cfg.seed, "teacher"))?,
        })
    } else {
        None
    };
    let hooks = TrainHooks {
        threads: thread_cap(),
        checkpoint: Some(run.file("model.bin")),
        stop,
        config_hash: run.config_hash.clone(),
    };
    run.outputs.push("model.json".into());
    let result = train(
        mode,
        &cfg.train,
        &cfg.sampler,
        init,
        teacher.as_ref(),
        &train_data,
        &eval_data,
        cfg.seed,
        &hooks,
    );
    let TrainOutcome { log, .. } = match result {
        Ok(o) => o,
        Err(e) => {
            let status = if matches!(e, FluxError::Interrupted) { "interrupted" } else { "failed" };
            run.finish(cfg, status, json!({ "error": e.to_string() }))?;
            return Err(e.into());
        }
    };
    log.write(&run.path)?;
    for f in ["metrics.jsonl", "metrics.csv", "timing.jsonl"] {
        run.outputs.push(f.into());
    }
    let last = log.last_eval();
    let out = json!({
        "run_dir": run.path,
        "steps": log.records.len(),
        "final_loss": log.records.last().map(|r| r.total_loss),
        "eval_counts": cfg.train.counts,
        "eval_accuracy": last.map(|r| r.acc.clone()),
    });
    print_json(&out);
    Ok(out)
}

fn run_eval(cfg: &ExperimentConfig, run: &mut RunDir) -> CliResult<Value> {
    let params = load_model(cfg.paths.checkpoint.as_ref().expect("validated"), &cfg.model)?;
    let (_, eval_data) = load_splits(cfg)?;
    let res = evaluate(&params, &eval_data, &cfg.eval.counts, &cfg.train, thread_cap())?;
    let mut csv = String::from("count,accuracy,mean_ce\n");
    for r in &res {
        csv.push_str(&format!("{},{},{}\n", r.count, r.accuracy, r.mean_ce));
    }
    fs::write(run.file("eval.csv"), &csv)?;
    print!("{csv}");
    Ok(serde_json::to_value(&res).expect("json"))
}

fn run_tokenopt(cfg: &ExperimentConfig, run: &mut RunDir) -> CliResult<Value> {
    let params = load_model(cfg.paths.checkpoint.as_ref().expect("validated"), &cfg.model)?;
    let (_, eval_data) = load_splits(cfg)?;
    let subset = &eval_data[..cfg.tokenopt.eval_count.min(eval_data.len())];
    let lattice = Lattice::from_sampler(&cfg.sampler);
    let threads = thread_cap();
    let evaluator = |f: usize, r: usize, k: usize| grid_accuracy(&params, subset, f, r, k, &cfg.train, threads);
    let outcome = heuristic_search(evaluator, cfg.tokenopt.budget, &lattice, cfg.tokenopt.plateau_eps, &cfg.model);
    let (plan, err) = match outcome {
        Ok(p) => (p, None),
        Err(f) => (f.plan, Some(f.error)),
    };
    fs::write(run.file("tokenopt.csv"), plan.to_csv())?;
    fs::write(
        run.file("plan.json"),
        serde_json::to_string_pretty(&plan).expect("plan serializes") + "\n",
    )?;
    if let Some(e) = err {
        run.finish(cfg, "failed", json!({ "error": e.to_string(), "visited": plan.visited() }))?;
        return Err(e.into());
    }
    let out = json!({
        "budget": plan.budget,
        "visited": plan.visited(),
        "chosen": plan.chosen_entry(),
    });
    print!("{}", plan.to_csv());
    Ok(out)
}

fn run_flops(cfg: &ExperimentConfig) -> CliResult<Value> {
    let report = flops(&cfg.model, cfg.flops.tokens);
    let mut v = serde_json::to_value(&report).expect("report serializes");
    v["gflops"] = json!(report.gflops());
    print_json(&v);
    Ok(v)
}

fn run_grad_check(cfg: &ExperimentConfig) -> CliResult<(Value, bool)> {
    let gc = &cfg.grad_check;
    let (report, names) = gradcheck_model(&gc.model, cfg.seed, gc.eps)?;
    let passed = report.max_rel_error < gc.tolerance;
    let v = json!({
        "max_rel_error": report.max_rel_error,
        "tolerance": gc.tolerance,
        "entries_checked": report.entries_checked,
        "worst_tensor": names[report.worst.0],
        "worst_element": report.worst.1,
        "passed": passed,
    });
    print_json(&v);
    Ok((v, passed))
}

fn dispatch(cmd: &Command, stop: Option<&AtomicBool>) -> CliResult<()> {
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| json!(p));
    let mut flags: Vec<(&str, Value)> = Vec::new();
    let mut push = |k: &'static str, v: Option<Value>| {
        if let Some(v) = v {
            flags.push((k, v));
        }
    };
    let (mode, common) = match cmd {
        Command::GenData { common } => (RunMode::GenData, common),
        Command::Pretrain {
            common,
            checkpoint,
            teacher_checkpoint,
        } => {
            push("paths.checkpoint", path(checkpoint));
            push("paths.teacher_checkpoint", path(teacher_checkpoint));
            (RunMode::Pretrain, common)
        }
        Command::Finetune { common, checkpoint } => {
            push("paths.checkpoint", path(checkpoint));
            (RunMode::Finetune, common)
        }
        Command::Eval {
            common,
            checkpoint,
            counts,
        } => {
            push("paths.checkpoint", path(checkpoint));
            push("eval.counts", counts.as_ref().map(|c| json!(c)));
            (RunMode::Eval, common)
        }
        Command::Tokenopt {
            common,
            checkpoint,
            budget,
        } => {
            push("paths.checkpoint", path(checkpoint));
            push("tokenopt.budget", budget.map(|b| json!(b)));
            (RunMode::Tokenopt, common)
        }
        Command::Flops {
            common,
            d_model,
            depth,
            tokens,
            num_classes,
        } => {
            push("model.d_model", d_model.map(|v| json!(v)));
            push("model.depth", depth.map(|v| json!(v)));
            push("flops.tokens", tokens.map(|v| json!(v)));
            push("model.num_classes", num_classes.map(|v| json!(v)));
            (RunMode::Flops, common)
        }
        Command::GradCheck { common } => (RunMode::GradCheck, common),
    };
    let cfg = resolve_config(mode, common, &flags)?;
    let mut run = RunDir::create(&cfg)?;
    let result = match mode {
        RunMode::GenData => run_gen_data(&cfg, &mut run),
        RunMode::Pretrain => run_train(Mode::Pretrain, &cfg, &mut run, stop),
        RunMode::Finetune => run_train(Mode::Finetune, &cfg, &mut run, stop),
        RunMode::Eval => run_eval(&cfg, &mut run),
        RunMode::Tokenopt => run_tokenopt(&cfg, &mut run),
        RunMode::Flops => run_flops(&cfg),
        RunMode::GradCheck => {
            let (v, passed) = run_grad_check(&cfg)?;
            fs::write(run.file("grad_check.json"), serde_json::to_string_pretty(&v).expect("json") + "\n")?;
            if passed {
                Ok(v)
            } else {
                run.finish(&cfg, "failed", v)?;
                return Err(CliError::Runtime("gradient check exceeded tolerance".into()));
            }
        }
    };
    match result {
        Ok(v) => {
            run.finish(&cfg, "ok", v)?;
            eprintln!("run directory: {}", run.path.display());
            Ok(())
        }
        Err(e) => {
            if !run.path.join("manifest.json").exists() {
                run.finish(&cfg, "failed", json!({ "error": e.to_string() }))?;
            }
            Err(e)
        }
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I, stop: Option<&AtomicBool>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.command, stop) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

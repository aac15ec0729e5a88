//! The `synergyseg` command line tool. Every subcommand takes `--config
//! file.json`; values resolve as flag > config file > built-in default.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::autoconfig::{default_plan, fingerprint_dataset, plan_configuration, DatasetFingerprint, MemoryBudget, PlanConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, render_csv, render_rows, MetricsReport, TableRow};
use crate::phantom::{generate_mixed_corpus, PhantomSpec};
use crate::synergy_net::Checkpoint;
use crate::training::{postprocess, predict_case, train, EpochRecord, TrainConfig};
use crate::volume::{load_volume, save_mask, save_volume, DatasetManifest, Partition, Shape3};

mod plot;

pub use plot::training_curves_svg;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(name = "synergyseg", version, about = "Auto-configured 3D segmentation with a synergistic VQ bottleneck")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic phantom corpus and its manifest.
    Phantom(PhantomArgs),
    /// Compute dataset statistics over the training split.
    Fingerprint(FingerprintArgs),
    /// Derive a network plan from a fingerprint.
    Plan(PlanArgs),
    /// Train a network and write checkpoint, log and curves.
    Train(TrainArgs),
    /// Predict probability maps and masks for a split.
    Predict(PredictArgs),
    /// Score predicted masks against ground truth.
    Evaluate(EvaluateArgs),
    /// Render a comparison table from metric reports.
    Report(ReportArgs),
    /// Predict and evaluate on a foreign dataset without fine-tuning.
    Zeroshot(ZeroshotArgs),
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[arg(long)]
    pub n: Option<usize>,
    /// XxYxZ; a comma-separated list cycles through several grid sizes.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub severity: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FingerprintArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PlanArgs {
    #[arg(long)]
    pub fingerprint: PathBuf,
    #[arg(long = "budget-gb")]
    pub budget_gb: Option<f64>,
    /// Emit the fixed, fingerprint-independent plan.
    #[arg(long)]
    pub default: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Partition,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Partition,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Metric reports, or fixture files holding a list of table rows.
    #[arg(long, num_args = 1.., required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub names: Vec<String>,
    /// Directory for table.md, table.csv and report.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ZeroshotArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Partition,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomParams {
    pub n: usize,
    pub grid: String,
    pub severity: f64,
    pub noise: f64,
    pub seed: u64,
    pub spacing: [f64; 3],
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            n: 10,
            grid: "32x32x16".into(),
            severity: 0.5,
            noise: 0.1,
            seed: 0,
            spacing: [1.0; 3],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanParams {
    pub budget_gb: f64,
    pub default: bool,
}

impl Default for PlanParams {
    fn default() -> Self {
        PlanParams {
            budget_gb: 8.0,
            default: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictParams {
    pub threshold: f32,
}

impl Default for PredictParams {
    fn default() -> Self {
        PredictParams { threshold: 0.5 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoParams {}

/// Parses `XxYxZ`.
pub fn parse_grid(s: &str) -> Result<Shape3> {
    let parts: Vec<&str> = s.trim().split(['x', 'X']).collect();
    let bad = || Error::InvalidArgument(format!("grid '{s}' is not of the form XxYxZ"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut g = [0usize; 3];
    for (g, p) in g.iter_mut().zip(parts) {
        *g = p.parse().map_err(|_| bad())?;
    }
    Ok(g)
}

fn merge(base: &mut Value, over: &Value, prefix: &str) -> Result<()> {
    let (Value::Object(b), Value::Object(o)) = (&mut *base, over) else {
        *base = over.clone();
        return Ok(());
    };
    for (k, v) in o {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match b.get_mut(k) {
            None => return Err(Error::InvalidArgument(format!("unknown config key '{key}'"))),
            Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &key)?,
            Some(slot) => *slot = v.clone(),
        }
    }
    Ok(())
}

/// Defaults, overlaid by the config file, overlaid by flags that were given.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, config: Option<&Path>, flags: Map<String, Value>) -> Result<(T, Value)> {
    let mut v = serde_json::to_value(defaults).expect("config serializes");
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(|e| Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let file: Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if !file.is_object() {
            return Err(Error::InvalidArgument(format!("{} must hold a JSON object", path.display())));
        }
        merge(&mut v, &file, "")?;
    }
    merge(&mut v, &Value::Object(flags), "")?;
    let t = serde_json::from_value(v.clone()).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
    Ok((t, v))
}

fn flags(pairs: Vec<(&str, Option<Value>)>) -> Map<String, Value> {
    pairs
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
        .collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// `{tool_version, command, resolved_config, input_hashes, timestamp}`.
/// Only `timestamp` varies between identical runs; `SOURCE_DATE_EPOCH`
/// pins it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub command: String,
    pub resolved_config: Value,
    pub input_hashes: BTreeMap<String, String>,
    pub timestamp: u64,
}

fn timestamp() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.parse().ok()) {
        return t;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

struct Run {
    command: &'static str,
    config: Value,
    inputs: BTreeMap<String, String>,
}

impl Run {
    fn new(command: &'static str, config: Value) -> Self {
        Run {
            command,
            config,
            inputs: BTreeMap::new(),
        }
    }

    fn path(&mut self, key: &str, p: &Path) {
        if let Value::Object(m) = &mut self.config {
            m.insert(key.into(), json!(p.display().to_string()));
        }
    }

    fn hash(&mut self, p: &Path) -> Result<()> {
        self.inputs.insert(p.display().to_string(), sha256_file(p)?);
        Ok(())
    }

    fn hash_opt(&mut self, p: Option<&Path>) -> Result<()> {
        p.map_or(Ok(()), |p| self.hash(p))
    }

    /// The manifest plus every volume and mask it lists for `split`.
    fn hash_cases(&mut self, manifest_path: &Path, m: &DatasetManifest, split: Option<Partition>) -> Result<()> {
        self.hash(manifest_path)?;
        let cases = match split {
            Some(s) => m.cases_in(s),
            None => m.cases.iter().collect(),
        };
        let files: Vec<PathBuf> = cases
            .iter()
            .flat_map(|c| std::iter::once(m.resolve(&c.volume)).chain(c.mask.as_ref().map(|k| m.resolve(k))))
            .collect();
        let hashed: Vec<(String, String)> = files
            .par_iter()
            .map(|f| Ok((f.display().to_string(), sha256_file(f)?)))
            .collect::<Result<_>>()?;
        self.inputs.extend(hashed);
        Ok(())
    }

    fn provenance(&self) -> Value {
        serde_json::to_value(Provenance {
            tool_version: TOOL_VERSION.into(),
            command: self.command.into(),
            resolved_config: self.config.clone(),
            input_hashes: self.inputs.clone(),
            timestamp: timestamp(),
        })
        .unwrap()
    }

    fn stamp<T: Serialize>(&self, artifact: &T) -> Value {
        let mut v = serde_json::to_value(artifact).expect("artifact serializes");
        if let Value::Object(m) = &mut v {
            m.insert("provenance".into(), self.provenance());
        }
        v
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(v).unwrap() + "\n"))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Usage problems exit with 2, everything else with 1.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::TooFewCases { .. } | Error::DegenerateGrid(_) => 2,
        _ => 1,
    }
}

/// Parses `args` (program name first) and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.kind());
            exit_code(&e)
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Fingerprint(a) => cmd_fingerprint(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
        Command::Zeroshot(a) => cmd_zeroshot(a),
    }
}

fn cmd_phantom(a: PhantomArgs) -> Result<()> {
    let (p, cfg) = resolve(
        &PhantomParams::default(),
        a.config.as_deref(),
        flags(vec![
            ("n", a.n.map(|v| json!(v))),
            ("grid", a.grid.map(|v| json!(v))),
            ("severity", a.severity.map(|v| json!(v))),
            ("noise", a.noise.map(|v| json!(v))),
            ("seed", a.seed.map(|v| json!(v))),
        ]),
    )?;
    let grids: Vec<Shape3> = p.grid.split(',').map(parse_grid).collect::<Result<_>>()?;
    let templates: Vec<PhantomSpec> = grids
        .into_iter()
        .map(|g| PhantomSpec {
            spacing: p.spacing,
            ..PhantomSpec::new(g, p.severity, p.noise, p.seed)
        })
        .collect();
    let mut run = Run::new("phantom", cfg);
    run.path("out", &a.out);
    run.hash_opt(a.config.as_deref())?;
    let mut manifest = generate_mixed_corpus(p.n, &templates, p.seed, &a.out)?;
    manifest.provenance = Some(run.provenance());
    manifest.save(&a.out.join("manifest.json"))?;
    println!("wrote {} cases to {}", manifest.cases.len(), a.out.display());
    Ok(())
}

fn cmd_fingerprint(a: FingerprintArgs) -> Result<()> {
    let (_, cfg) = resolve(&NoParams::default(), a.config.as_deref(), Map::new())?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let mut run = Run::new("fingerprint", cfg);
    run.path("manifest", &a.manifest);
    run.path("out", &a.out);
    run.hash_opt(a.config.as_deref())?;
    run.hash_cases(&a.manifest, &manifest, Some(Partition::Train))?;
    let fp = fingerprint_dataset(&manifest)?;
    write_json(&a.out, &run.stamp(&fp))?;
    println!("{}", serde_json::to_string(&fp).unwrap());
    Ok(())
}

fn cmd_plan(a: PlanArgs) -> Result<()> {
    let (p, cfg) = resolve(
        &PlanParams::default(),
        a.config.as_deref(),
        flags(vec![
            ("budget_gb", a.budget_gb.map(|v| json!(v))),
            ("default", a.default.then(|| json!(true))),
        ]),
    )?;
    let fp: DatasetFingerprint = read_json(&a.fingerprint)?;
    fp.validate()?;
    let mut run = Run::new("plan", cfg);
    run.path("fingerprint", &a.fingerprint);
    run.path("out", &a.out);
    run.hash(&a.fingerprint)?;
    run.hash_opt(a.config.as_deref())?;
    let plan = if p.default {
        default_plan(&fp)
    } else {
        plan_configuration(&fp, &MemoryBudget::from_gb(p.budget_gb)?)?
    };
    plan.validate()?;
    write_json(&a.out, &run.stamp(&plan))?;
    println!("{}", serde_json::to_string(&plan).unwrap());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (cfg, resolved) = resolve(
        &TrainConfig::default(),
        a.config.as_deref(),
        flags(vec![("seed", a.seed.map(|v| json!(v)))]),
    )?;
    cfg.validate()?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let plan: PlanConfig = read_json(&a.plan)?;
    plan.validate()?;
    let mut run = Run::new("train", resolved);
    run.path("manifest", &a.manifest);
    run.path("plan", &a.plan);
    run.path("out", &a.out);
    run.hash(&a.plan)?;
    run.hash_opt(a.config.as_deref())?;
    run.hash_cases(&a.manifest, &manifest, None)?;

    ensure_dir(&a.out)?;
    let log_path = a.out.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let header = json!({ "provenance": run.provenance() });
    writeln!(log, "{header}").map_err(|e| Error::io(&log_path, e))?;
    let mut log_err = None;
    let outcome = train(&manifest, &plan, &cfg, &mut |r: &EpochRecord| {
        eprintln!(
            "epoch {:>4}{} loss {:.4} val dice {:.4} lr {:.2e} perplexity {:.2}",
            r.epoch,
            r.stage.as_deref().map(|s| format!(" [{s}]")).unwrap_or_default(),
            r.train_loss,
            r.val_dice,
            r.lr,
            r.perplexity
        );
        if let Err(e) = writeln!(log, "{}", serde_json::to_string(r).unwrap()).and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(Error::io(&log_path, e));
    }
    let mut ck = outcome.checkpoint;
    ck.provenance = Some(run.provenance());
    ck.save(&a.out.join("checkpoint.json"))?;
    write_text(
        &a.out.join("training_curves.svg"),
        &training_curves_svg(&outcome.history, &run.provenance()),
    )?;
    println!(
        "best epoch {} with validation dice {:.4}; wrote {}",
        outcome.best_epoch,
        outcome.best_val_dice,
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PredictionIndex {
    split: Partition,
    threshold: f32,
    cases: Vec<PredictionEntry>,
}

#[derive(Serialize)]
struct PredictionEntry {
    id: String,
    mask: String,
    probability: String,
    foreground_voxels: usize,
}

/// Writes `<id>.raw3d` (postprocessed mask) and `<id>_prob.raw3d` per case.
fn predict_split(run: &mut Run, ck_path: &Path, manifest_path: &Path, split: Partition, threshold: f32, out: &Path) -> Result<()> {
    if !ck_path.is_file() {
        return Err(Error::UnreadableFile {
            path: ck_path.to_path_buf(),
            reason: "checkpoint not found".into(),
        });
    }
    let ck = Checkpoint::load(ck_path)?;
    let model = ck.model()?;
    let manifest = DatasetManifest::load(manifest_path)?;
    run.hash(ck_path)?;
    run.hash_cases(manifest_path, &manifest, Some(split))?;
    ensure_dir(out)?;
    let cases = manifest.cases_in(split);
    let entries: Vec<PredictionEntry> = cases
        .par_iter()
        .map(|c| {
            let v = load_volume(&manifest.resolve(&c.volume))?;
            let prob = predict_case(&model, &ck.plan, &v)?;
            let mask = postprocess(&prob, threshold);
            let (mname, pname) = (format!("{}.raw3d", c.id), format!("{}_prob.raw3d", c.id));
            save_volume(&prob, &out.join(&pname))?;
            save_mask(&mask, &out.join(&mname))?;
            Ok(PredictionEntry {
                id: c.id.clone(),
                mask: mname,
                probability: pname,
                foreground_voxels: mask.foreground_count(),
            })
        })
        .collect::<Result<_>>()?;
    let index = PredictionIndex {
        split,
        threshold,
        cases: entries,
    };
    write_json(&out.join("predictions.json"), &run.stamp(&index))?;
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let (p, cfg) = resolve(&PredictParams::default(), a.config.as_deref(), Map::new())?;
    let mut run = Run::new("predict", cfg);
    run.path("checkpoint", &a.checkpoint);
    run.path("manifest", &a.manifest);
    run.path("out", &a.out);
    if let Value::Object(m) = &mut run.config {
        m.insert("split".into(), json!(a.split));
    }
    run.hash_opt(a.config.as_deref())?;
    predict_split(&mut run, &a.checkpoint, &a.manifest, a.split, p.threshold, &a.out)?;
    println!("wrote predictions to {}", a.out.display());
    Ok(())
}

fn summary(r: &MetricsReport) -> String {
    let g = &r.aggregate;
    let mm = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.2}"));
    format!(
        "{} cases: dice {:.4} iou {:.4} precision {:.4} recall {:.4} hd95 {} assd {} (excluded from distances: {})",
        r.n_cases,
        g.dice,
        g.iou,
        g.precision,
        g.recall,
        mm(g.hd95_mm),
        mm(g.assd_mm),
        r.excluded_cases.len()
    )
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let (_, cfg) = resolve(&NoParams::default(), a.config.as_deref(), Map::new())?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let mut run = Run::new("evaluate", cfg);
    run.path("pred", &a.pred);
    run.path("manifest", &a.manifest);
    run.path("out", &a.out);
    if let Value::Object(m) = &mut run.config {
        m.insert("split".into(), json!(a.split));
    }
    run.hash_opt(a.config.as_deref())?;
    run.hash_cases(&a.manifest, &manifest, Some(a.split))?;
    let report = evaluate_dataset(&a.pred, &manifest, a.split)?;
    write_json(&a.out, &run.stamp(&report))?;
    println!("{}", summary(&report));
    Ok(())
}

#[derive(Serialize)]
struct RowsArtifact<'a> {
    rows: &'a [TableRow],
}

fn load_rows(path: &Path, name: Option<&String>) -> Result<Vec<TableRow>> {
    let v: Value = read_json(path)?;
    let stem = || {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    let parse_rows = |v: Value| serde_json::from_value::<Vec<TableRow>>(v).map_err(|e| Error::json(path, e));
    match v {
        Value::Array(_) => parse_rows(v),
        Value::Object(ref m) if m.contains_key("rows") => parse_rows(m["rows"].clone()),
        _ => {
            let r: MetricsReport = serde_json::from_value(v).map_err(|e| Error::json(path, e))?;
            let method = name.cloned().or_else(|| r.label.clone()).unwrap_or_else(stem);
            Ok(vec![TableRow::from_report(&method, &r)])
        }
    }
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let (_, cfg) = resolve(&NoParams::default(), a.config.as_deref(), Map::new())?;
    if !a.names.is_empty() && a.names.len() != a.reports.len() {
        return Err(Error::InvalidArgument(format!(
            "{} names given for {} reports",
            a.names.len(),
            a.reports.len()
        )));
    }
    let mut run = Run::new("report", cfg);
    if let Value::Object(m) = &mut run.config {
        m.insert("names".into(), json!(a.names));
    }
    run.hash_opt(a.config.as_deref())?;
    let mut rows = Vec::new();
    for (i, p) in a.reports.iter().enumerate() {
        run.hash(p)?;
        rows.extend(load_rows(p, a.names.get(i))?);
    }
    let table = render_rows(&rows);
    print!("{table}");
    if let Some(out) = &a.out {
        run.path("out", out);
        ensure_dir(out)?;
        write_text(&out.join("table.md"), &table)?;
        write_text(&out.join("table.csv"), &render_csv(&rows))?;
        write_json(&out.join("report.json"), &run.stamp(&RowsArtifact { rows: &rows }))?;
    }
    Ok(())
}

fn cmd_zeroshot(a: ZeroshotArgs) -> Result<()> {
    let (p, cfg) = resolve(&PredictParams::default(), a.config.as_deref(), Map::new())?;
    let mut run = Run::new("zeroshot", cfg);
    run.path("checkpoint", &a.checkpoint);
    run.path("manifest", &a.manifest);
    run.path("out", &a.out);
    if let Value::Object(m) = &mut run.config {
        m.insert("split".into(), json!(a.split));
    }
    run.hash_opt(a.config.as_deref())?;
    let pred_dir = a.out.join("predictions");
    predict_split(&mut run, &a.checkpoint, &a.manifest, a.split, p.threshold, &pred_dir)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let mut report = evaluate_dataset(&pred_dir, &manifest, a.split)?;
    report.label = Some("zero-shot".into());
    write_json(&a.out.join("metrics.json"), &run.stamp(&report))?;
    let rows = [TableRow::from_report("zero-shot", &report)];
    let table = render_rows(&rows);
    write_text(&a.out.join("table.md"), &table)?;
    print!("{table}");
    println!("{}", summary(&report));
    Ok(())
}

#[cfg(test)]
mod tests;

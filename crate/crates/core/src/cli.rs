//! `mirrorlab` command-line front end.
//!
//! Every subcommand reads an optional TOML config that spells out every
//! setting (`mirrorlab print-config <kind>` emits the defaults), applies
//! flag overrides, and writes CSV/JSON into `--out`.
//!
//! Exit codes: 0 success, 1 drift failed validity checks, 2 usage or config
//! error, 3 training diverged.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::drift::{
    export_heatmap, verify_drift, DriftSpec, FeatureMask, HeatmapRequest, LearnedDrift, Tolerances,
    ValidityReport, VerifyGrid, DEFAULT_EPSILON, DPO_ALPHA, DPO_BETA,
};
use crate::envs::{EnvId, EnvSpec};
use crate::error::{Error, Result};
use crate::es::{mean_std, meta_continue, EsConfig, EsState};
use crate::trainer::{train, RunRecord, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "mirrorlab",
    version,
    about = "Mirror-learning drift functions: train, meta-train, analyse"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config; defaults apply when absent.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Overwrite existing run records and checkpoints.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train policies with a drift; one record per seed plus a summary.
    Train {
        #[command(flatten)]
        common: Common,
        /// Number of seeds, starting at --seed.
        #[arg(long, value_name = "N")]
        seeds: Option<usize>,
        /// ppo | dpo | learned:PATH
        #[arg(long)]
        drift: Option<String>,
        #[arg(long, value_parser = parse_env)]
        env: Option<EnvId>,
    },
    /// Meta-train a learned drift with antithetic ES.
    MetaTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_env)]
        env: Option<EnvId>,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Check non-negativity and identity conditions of a drift.
    VerifyDrift {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        drift: Option<String>,
    },
    /// Export the ratio derivative of the objective on an (r, A) grid.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        drift: Option<String>,
    },
    /// Tabulate returns and entropies of saved runs side by side.
    Compare {
        /// Run record files, or directories holding run_seed*.json.
        #[arg(required = true, value_name = "RUN")]
        runs: Vec<PathBuf>,
        #[arg(long, value_name = "DIR", default_value = "out")]
        out: PathBuf,
    },
    /// Meta-train once per feature mask and tabulate final fitness.
    AblateFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_env)]
        env: Option<EnvId>,
    },
    /// Print a config file with every default spelled out.
    PrintConfig {
        #[arg(value_enum)]
        kind: ConfigKind,
        #[arg(long, value_parser = parse_env)]
        env: Option<EnvId>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ConfigKind {
    Train,
    MetaTrain,
    VerifyDrift,
    Heatmap,
    AblateFeatures,
}

fn parse_env(s: &str) -> std::result::Result<EnvId, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Which drift to use, by name, with the closed-form constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftChoice {
    /// `ppo`, `dpo` or `learned:PATH` (a drift JSON file).
    pub name: String,
    pub ppo_epsilon: f64,
    pub dpo_alpha: f64,
    pub dpo_beta: f64,
}

impl Default for DriftChoice {
    fn default() -> Self {
        Self {
            name: "ppo".into(),
            ppo_epsilon: DEFAULT_EPSILON,
            dpo_alpha: DPO_ALPHA,
            dpo_beta: DPO_BETA,
        }
    }
}

impl DriftChoice {
    pub fn resolve(&self) -> Result<DriftSpec> {
        match self.name.as_str() {
            "ppo" => Ok(DriftSpec::ppo(self.ppo_epsilon)),
            "dpo" => Ok(DriftSpec::Dpo {
                alpha: self.dpo_alpha,
                beta: self.dpo_beta,
            }),
            other => match other.strip_prefix("learned:") {
                Some(path) => load_drift(Path::new(path)),
                None => Err(Error::Config(format!(
                    "unknown drift '{other}', expected ppo, dpo or learned:PATH"
                ))),
            },
        }
    }
}

/// Reads a tagged drift JSON, or a bare learned-drift object.
pub fn load_drift(path: &Path) -> Result<DriftSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read drift file {}: {e}", path.display())))?;
    if let Ok(spec) = serde_json::from_str::<DriftSpec>(&text) {
        return Ok(spec);
    }
    let learned: LearnedDrift = serde_json::from_str(&text)?;
    Ok(DriftSpec::Learned(learned))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub seeds: usize,
    pub env: EnvSpec,
    pub drift: DriftChoice,
    pub train: TrainConfig,
}

impl TrainFile {
    pub fn default_for(id: EnvId) -> Self {
        let env = EnvSpec::default_for(id);
        Self {
            seeds: 1,
            env,
            drift: DriftChoice::default(),
            train: TrainConfig::default_for(&env),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaTrainFile {
    pub seed: u64,
    pub es: EsConfig,
}

impl Default for MetaTrainFile {
    fn default() -> Self {
        Self {
            seed: 0,
            es: EsConfig::desk(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyFile {
    pub drift: DriftChoice,
    pub grid: VerifyGrid,
    pub tolerances: Tolerances,
}

impl Default for VerifyFile {
    fn default() -> Self {
        Self {
            drift: DriftChoice::default(),
            grid: VerifyGrid::default(),
            tolerances: Tolerances::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapFile {
    pub drift: DriftChoice,
    pub heatmap: HeatmapRequest,
}

impl Default for HeatmapFile {
    fn default() -> Self {
        Self {
            drift: DriftChoice::default(),
            heatmap: HeatmapRequest::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateFile {
    pub seed: u64,
    /// One meta-training run per mask; eight booleans in feature order.
    pub masks: Vec<FeatureMask>,
    pub es: EsConfig,
}

impl Default for AblateFile {
    fn default() -> Self {
        Self {
            seed: 0,
            masks: vec![
                FeatureMask::ALL,
                FeatureMask::from_indices(&[0, 1, 2, 3]),
                FeatureMask::from_indices(&[4, 5, 6, 7]),
                FeatureMask::from_indices(&[0, 1, 4, 5]),
            ],
            es: EsConfig::desk(),
        }
    }
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    Ok(toml::from_str(&text)?)
}

fn load_or<T: DeserializeOwned>(path: Option<&Path>, default: impl FnOnce() -> T) -> Result<T> {
    match path {
        Some(p) => read_config(p),
        None => Ok(default()),
    }
}

fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(format!("cannot render config: {e}")))
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidDrift(_) => EXIT_INVALID,
        Error::Diverged(_) => EXIT_DIVERGED,
        _ => EXIT_USAGE,
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn refuse_overwrite(paths: &[PathBuf], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    if let Some(p) = paths.iter().find(|p| p.exists()) {
        return Err(Error::Config(format!(
            "{} exists; pass --force to overwrite",
            p.display()
        )));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Caps rayon's worker count from `MIRRORLAB_THREADS`.
fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MIRRORLAB_THREADS") {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::Config(format!(
                "MIRRORLAB_THREADS must be a positive integer, got '{v}'"
            ))
        })?;
        // a second initialisation in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = configure_threads().and_then(|_| dispatch(cli.command));
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train {
            common,
            seeds,
            drift,
            env,
        } => cmd_train(&common, seeds, drift, env),
        Command::MetaTrain {
            common,
            env,
            resume,
        } => cmd_meta_train(&common, env, resume),
        Command::VerifyDrift { common, drift } => cmd_verify_drift(&common, drift),
        Command::Heatmap { common, drift } => cmd_heatmap(&common, drift),
        Command::Compare { runs, out } => cmd_compare(&runs, &out),
        Command::AblateFeatures { common, env } => cmd_ablate(&common, env),
        Command::PrintConfig { kind, env } => {
            let id = env.unwrap_or(EnvId::Cartpole);
            let text = match kind {
                ConfigKind::Train => to_toml(&TrainFile::default_for(id))?,
                ConfigKind::MetaTrain => {
                    let mut f = MetaTrainFile::default();
                    set_es_env(&mut f.es, id);
                    to_toml(&f)?
                }
                ConfigKind::VerifyDrift => to_toml(&VerifyFile::default())?,
                ConfigKind::Heatmap => to_toml(&HeatmapFile::default())?,
                ConfigKind::AblateFeatures => {
                    let mut f = AblateFile::default();
                    set_es_env(&mut f.es, id);
                    to_toml(&f)?
                }
            };
            print!("{text}");
            Ok(EXIT_OK)
        }
    }
}

fn set_es_env(es: &mut EsConfig, id: EnvId) {
    if es.envs != [id] {
        es.envs = vec![id];
        es.inner = TrainConfig {
            total_timesteps: es.inner.total_timesteps,
            ..TrainConfig::default_for(&EnvSpec::default_for(id))
        };
    }
}

/// Mean and standard error (`std / sqrt(n)`, `n - 1` std) of the values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub se: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let (mean, std) = mean_std(values);
        Some(Stat {
            n: values.len(),
            mean,
            se: std / (values.len() as f64).sqrt(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub env: EnvId,
    pub drift: String,
    pub seeds: Vec<u64>,
    pub final_eval_return: Option<Stat>,
    pub final_entropy: Option<Stat>,
    pub final_eval_returns: Vec<Option<f64>>,
    pub diverged_seeds: Vec<u64>,
}

pub fn summarise(records: &[(u64, RunRecord)]) -> TrainSummary {
    let first = &records[0].1;
    let finals: Vec<Option<f64>> = records.iter().map(|(_, r)| r.final_eval_return).collect();
    let rets: Vec<f64> = finals.iter().flatten().copied().collect();
    let ents: Vec<f64> = records
        .iter()
        .filter_map(|(_, r)| r.final_entropy)
        .collect();
    TrainSummary {
        env: first.env.id,
        drift: first.drift.clone(),
        seeds: records.iter().map(|(s, _)| *s).collect(),
        final_eval_return: Stat::of(&rets),
        final_entropy: Stat::of(&ents),
        final_eval_returns: finals,
        diverged_seeds: records
            .iter()
            .filter(|(_, r)| r.diverged)
            .map(|(s, _)| *s)
            .collect(),
    }
}

/// Per-iteration mean and standard error across runs. Columns for an
/// iteration with no data are left empty.
pub fn write_summary_csv(records: &[&RunRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "iteration",
        "timesteps",
        "n_runs",
        "eval_return_mean",
        "eval_return_se",
        "train_return_mean",
        "train_return_se",
        "entropy_mean",
        "entropy_se",
    ])?;
    let n_iter = records
        .iter()
        .map(|r| r.iterations.len())
        .max()
        .unwrap_or(0);
    let cells = |s: Option<Stat>| match s {
        Some(s) => [format!("{:e}", s.mean), format!("{:e}", s.se)],
        None => [String::new(), String::new()],
    };
    for it in 0..n_iter {
        let rows: Vec<_> = records
            .iter()
            .filter_map(|r| r.iterations.get(it))
            .collect();
        let pick = |f: &dyn Fn(&crate::trainer::IterationMetrics) -> Option<f64>| {
            Stat::of(&rows.iter().filter_map(|m| f(m)).collect::<Vec<_>>())
        };
        let [em, es] = cells(pick(&|m| m.eval_return));
        let [tm, ts] = cells(pick(&|m| m.train_episode_return));
        let [hm, hs] = cells(pick(&|m| Some(m.entropy)));
        w.write_record([
            it.to_string(),
            rows[0].timesteps.to_string(),
            rows.len().to_string(),
            em,
            es,
            tm,
            ts,
            hm,
            hs,
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_train(
    common: &Common,
    seeds: Option<usize>,
    drift: Option<String>,
    env: Option<EnvId>,
) -> Result<i32> {
    let mut file = load_or(common.config.as_deref(), || {
        TrainFile::default_for(env.unwrap_or(EnvId::Cartpole))
    })?;
    if let Some(id) = env {
        if id != file.env.id {
            file.env = EnvSpec::default_for(id);
            if common.config.is_none() {
                file.train = TrainConfig::default_for(&file.env);
            }
        }
    }
    if let Some(s) = seeds {
        file.seeds = s;
    }
    if let Some(d) = drift {
        file.drift.name = d;
    }
    if let Some(s) = common.seed {
        file.train.seed = s;
    }
    if file.seeds == 0 {
        return Err(Error::Config("seeds must be >= 1".into()));
    }
    let spec = file.drift.resolve()?;
    let env = file.env;
    env.validate()?;
    file.train.validate()?;

    let seed_list: Vec<u64> = (0..file.seeds as u64)
        .map(|k| file.train.seed + k)
        .collect();
    let out = &common.out;
    ensure_dir(out)?;
    let mut targets: Vec<PathBuf> = seed_list
        .iter()
        .flat_map(|s| {
            [
                out.join(format!("run_seed{s}.json")),
                out.join(format!("metrics_seed{s}.csv")),
            ]
        })
        .collect();
    targets.push(out.join("summary.json"));
    targets.push(out.join("summary.csv"));
    refuse_overwrite(&targets, common.force)?;
    std::fs::write(out.join("config.toml"), to_toml(&file)?)?;

    log::info!(
        "training {} on {} for seeds {:?}",
        spec.name(),
        env.id,
        seed_list
    );
    let records: Vec<(u64, RunRecord)> = seed_list
        .par_iter()
        .map(|&s| {
            let cfg = TrainConfig {
                seed: s,
                ..file.train.clone()
            };
            train(&env, &spec, &cfg).map(|r| (s, r))
        })
        .collect::<Result<_>>()?;

    for (s, rec) in &records {
        rec.write_json(&out.join(format!("run_seed{s}.json")))?;
        rec.write_metrics_csv(&out.join(format!("metrics_seed{s}.csv")))?;
    }
    let summary = summarise(&records);
    write_json(&out.join("summary.json"), &summary)?;
    let refs: Vec<&RunRecord> = records.iter().map(|(_, r)| r).collect();
    write_summary_csv(&refs, &out.join("summary.csv"))?;

    if let Some(st) = &summary.final_eval_return {
        println!(
            "{} on {}: final return {:.2} +- {:.2} (n={})",
            summary.drift, summary.env, st.mean, st.se, st.n
        );
    }
    if !summary.diverged_seeds.is_empty() {
        eprintln!("diverged seeds: {:?}", summary.diverged_seeds);
        return Ok(EXIT_DIVERGED);
    }
    Ok(EXIT_OK)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaSummary {
    pub generations: usize,
    pub best_fitness: Option<f64>,
    pub final_mean_fitness: Option<f64>,
    pub final_drift_valid: bool,
    pub best_drift_valid: bool,
}

fn run_meta(state: EsState, dir: &Path) -> Result<(EsState, MetaSummary)> {
    let ck = dir.join("checkpoint.json");
    let outcome = meta_continue(state, Some(&ck))?;
    let state = outcome.state;
    state.write_history_csv(&dir.join("history.csv"))?;
    let drift = state.drift()?;
    let best = state.best_drift()?;
    write_json(&dir.join("drift.json"), &drift)?;
    write_json(&dir.join("best_drift.json"), &best)?;
    let report = verify_drift(&drift, &VerifyGrid::default(), &Tolerances::default())?;
    let best_report = verify_drift(&best, &VerifyGrid::default(), &Tolerances::default())?;
    write_json(&dir.join("validity.json"), &report)?;
    let summary = MetaSummary {
        generations: state.generation,
        best_fitness: state.best_fitness,
        final_mean_fitness: state.history.last().map(|h| h.mean_fitness),
        final_drift_valid: report.valid,
        best_drift_valid: best_report.valid,
    };
    write_json(&dir.join("meta_summary.json"), &summary)?;
    Ok((state, summary))
}

fn cmd_meta_train(common: &Common, env: Option<EnvId>, resume: bool) -> Result<i32> {
    let out = &common.out;
    ensure_dir(out)?;
    let ck = out.join("checkpoint.json");
    let state = if resume {
        if !ck.exists() {
            return Err(Error::Config(format!("no checkpoint at {}", ck.display())));
        }
        EsState::read_checkpoint(&ck)?
    } else {
        let mut file = load_or(common.config.as_deref(), MetaTrainFile::default)?;
        if let Some(id) = env {
            set_es_env(&mut file.es, id);
        }
        if let Some(s) = common.seed {
            file.seed = s;
        }
        file.es.validate()?;
        refuse_overwrite(&[ck.clone(), out.join("history.csv")], common.force)?;
        std::fs::write(out.join("config.toml"), to_toml(&file)?)?;
        EsState::new(&file.es, file.seed)?
    };
    let (_, summary) = run_meta(state, out)?;
    println!(
        "meta-training: {} generations, best fitness {:?}, drift valid {}",
        summary.generations, summary.best_fitness, summary.final_drift_valid
    );
    Ok(if summary.final_drift_valid {
        EXIT_OK
    } else {
        EXIT_INVALID
    })
}

fn resolve_drift_arg(choice: &mut DriftChoice, arg: Option<String>) -> Result<DriftSpec> {
    if let Some(d) = arg {
        choice.name = d;
    }
    choice.resolve()
}

fn cmd_verify_drift(common: &Common, drift: Option<String>) -> Result<i32> {
    let mut file = load_or(common.config.as_deref(), VerifyFile::default)?;
    let spec = resolve_drift_arg(&mut file.drift, drift)?;
    let report: ValidityReport = verify_drift(&spec, &file.grid, &file.tolerances)?;
    ensure_dir(&common.out)?;
    write_json(&common.out.join("validity.json"), &report)?;
    if report.valid {
        println!(
            "{}: valid (min {:e}, max |f(1,A)| {:e}, max |df/dr(1,A)| {:e})",
            report.drift,
            report.min_value,
            report.max_abs_at_identity,
            report.max_abs_grad_at_identity
        );
        Ok(EXIT_OK)
    } else {
        println!(
            "{}: INVALID, {} violations",
            report.drift, report.violation_count
        );
        for v in report.violations.iter().take(5) {
            println!("  {:?} at r={} A={}: {:e}", v.check, v.r, v.a, v.value);
        }
        Ok(EXIT_INVALID)
    }
}

fn cmd_heatmap(common: &Common, drift: Option<String>) -> Result<i32> {
    let mut file = load_or(common.config.as_deref(), HeatmapFile::default)?;
    let spec = resolve_drift_arg(&mut file.drift, drift)?;
    let hm = export_heatmap(&spec, &file.heatmap)?;
    ensure_dir(&common.out)?;
    let name = spec.name();
    let grid = common.out.join(format!("heatmap_{name}.csv"));
    let slices = common.out.join(format!("slices_{name}.csv"));
    hm.write_grid_csv(std::fs::File::create(&grid)?)?;
    hm.write_slices_csv(std::fs::File::create(&slices)?)?;
    println!("wrote {} and {}", grid.display(), slices.display());
    Ok(EXIT_OK)
}

/// Run records named by `path`: the file itself, or every
/// `run_seed*.json` in a directory, sorted by name.
pub fn load_runs(path: &Path) -> Result<Vec<RunRecord>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("run_seed") && n.ends_with(".json"))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Config(format!(
                "no run records in {}",
                path.display()
            )));
        }
        files.iter().map(|f| RunRecord::read_json(f)).collect()
    } else if path.is_file() {
        Ok(vec![RunRecord::read_json(path)?])
    } else {
        Err(Error::Config(format!(
            "missing run record {}",
            path.display()
        )))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub label: String,
    pub env: EnvId,
    pub drift: String,
    pub n_runs: usize,
    pub final_return: Option<Stat>,
    pub final_entropy: Option<Stat>,
    /// Differences of the means from the first group.
    pub return_diff: Option<f64>,
    pub entropy_diff: Option<f64>,
}

pub fn compare_groups(groups: &[(String, Vec<RunRecord>)]) -> Vec<CompareRow> {
    let mut rows: Vec<CompareRow> = groups
        .iter()
        .map(|(label, runs)| {
            let rets: Vec<f64> = runs.iter().filter_map(|r| r.final_eval_return).collect();
            let ents: Vec<f64> = runs.iter().filter_map(|r| r.final_entropy).collect();
            CompareRow {
                label: label.clone(),
                env: runs[0].env.id,
                drift: runs[0].drift.clone(),
                n_runs: runs.len(),
                final_return: Stat::of(&rets),
                final_entropy: Stat::of(&ents),
                return_diff: None,
                entropy_diff: None,
            }
        })
        .collect();
    let base_ret = rows[0].final_return.as_ref().map(|s| s.mean);
    let base_ent = rows[0].final_entropy.as_ref().map(|s| s.mean);
    for row in &mut rows {
        row.return_diff = row
            .final_return
            .as_ref()
            .zip(base_ret)
            .map(|(s, b)| s.mean - b);
        row.entropy_diff = row
            .final_entropy
            .as_ref()
            .zip(base_ent)
            .map(|(s, b)| s.mean - b);
    }
    rows
}

fn cmd_compare(paths: &[PathBuf], out: &Path) -> Result<i32> {
    let groups: Vec<(String, Vec<RunRecord>)> = paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let stem = p
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("run")
                .to_string();
            load_runs(p).map(|r| (format!("{i}:{stem}"), r))
        })
        .collect::<Result<_>>()?;
    let rows = compare_groups(&groups);
    ensure_dir(out)?;

    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    let mut w = csv::Writer::from_path(out.join("compare_final.csv"))?;
    w.write_record([
        "label",
        "env",
        "drift",
        "n_runs",
        "return_mean",
        "return_se",
        "entropy_mean",
        "entropy_se",
        "return_diff",
        "entropy_diff",
    ])?;
    for r in &rows {
        w.write_record([
            r.label.clone(),
            r.env.to_string(),
            r.drift.clone(),
            r.n_runs.to_string(),
            opt(r.final_return.as_ref().map(|s| s.mean)),
            opt(r.final_return.as_ref().map(|s| s.se)),
            opt(r.final_entropy.as_ref().map(|s| s.mean)),
            opt(r.final_entropy.as_ref().map(|s| s.se)),
            opt(r.return_diff),
            opt(r.entropy_diff),
        ])?;
    }
    w.flush()?;

    // iteration-aligned means of evaluation return and entropy
    let mut w = csv::Writer::from_path(out.join("compare.csv"))?;
    let mut header = vec!["iteration".to_string()];
    for (label, _) in &groups {
        header.push(format!("{label}:eval_return"));
        header.push(format!("{label}:entropy"));
    }
    w.write_record(&header)?;
    let n_iter = groups
        .iter()
        .flat_map(|(_, runs)| runs.iter().map(|r| r.iterations.len()))
        .max()
        .unwrap_or(0);
    for it in 0..n_iter {
        let mut rec = vec![it.to_string()];
        for (_, runs) in &groups {
            let ms: Vec<_> = runs.iter().filter_map(|r| r.iterations.get(it)).collect();
            let ret: Vec<f64> = ms.iter().filter_map(|m| m.eval_return).collect();
            let ent: Vec<f64> = ms.iter().map(|m| m.entropy).collect();
            rec.push(opt(Stat::of(&ret).map(|s| s.mean)));
            rec.push(opt(Stat::of(&ent).map(|s| s.mean)));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    write_json(&out.join("compare.json"), &rows)?;

    for r in &rows {
        println!(
            "{:<24} {:<8} {:<8} return {:>10} entropy {:>10}",
            r.label,
            r.env,
            r.drift,
            r.final_return
                .as_ref()
                .map(|s| format!("{:.2}", s.mean))
                .unwrap_or_else(|| "-".into()),
            r.final_entropy
                .as_ref()
                .map(|s| format!("{:.4}", s.mean))
                .unwrap_or_else(|| "-".into()),
        );
    }
    Ok(EXIT_OK)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: FeatureMask,
    pub label: String,
    pub best_fitness: Option<f64>,
    pub final_mean_fitness: Option<f64>,
    pub final_drift_valid: bool,
}

fn cmd_ablate(common: &Common, env: Option<EnvId>) -> Result<i32> {
    let mut file = load_or(common.config.as_deref(), AblateFile::default)?;
    if let Some(id) = env {
        set_es_env(&mut file.es, id);
    }
    if let Some(s) = common.seed {
        file.seed = s;
    }
    if file.masks.is_empty() {
        return Err(Error::Config(
            "masks must list at least one feature mask".into(),
        ));
    }
    file.es.validate()?;
    let out = &common.out;
    ensure_dir(out)?;
    let dirs: Vec<PathBuf> = file
        .masks
        .iter()
        .map(|m| out.join(format!("mask_{:02x}", m.bits())))
        .collect();
    refuse_overwrite(
        &dirs
            .iter()
            .map(|d| d.join("checkpoint.json"))
            .collect::<Vec<_>>(),
        common.force,
    )?;
    std::fs::write(out.join("config.toml"), to_toml(&file)?)?;

    let mut rows = Vec::new();
    for (mask, dir) in file.masks.iter().zip(&dirs) {
        ensure_dir(dir)?;
        let es = EsConfig {
            feature_mask: *mask,
            ..file.es.clone()
        };
        log::info!("ablation: features [{}]", mask.label());
        let (_, summary) = run_meta(EsState::new(&es, file.seed)?, dir)?;
        rows.push(AblationRow {
            mask: *mask,
            label: mask.label(),
            best_fitness: summary.best_fitness,
            final_mean_fitness: summary.final_mean_fitness,
            final_drift_valid: summary.final_drift_valid,
        });
    }

    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    let mut w = csv::Writer::from_path(out.join("ablation.csv"))?;
    w.write_record([
        "mask_bits",
        "features",
        "best_fitness",
        "final_mean_fitness",
        "valid",
    ])?;
    for r in &rows {
        w.write_record([
            format!("{:02x}", r.mask.bits()),
            r.label.clone(),
            opt(r.best_fitness),
            opt(r.final_mean_fitness),
            r.final_drift_valid.to_string(),
        ])?;
        println!("[{}] best {:?}", r.label, r.best_fitness);
    }
    w.flush()?;
    write_json(&out.join("ablation.json"), &rows)?;
    Ok(if rows.iter().all(|r| r.final_drift_valid) {
        EXIT_OK
    } else {
        EXIT_INVALID
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_configs_round_trip_through_toml() {
        for id in [EnvId::Cartpole, EnvId::Pendulum] {
            let f = TrainFile::default_for(id);
            let back: TrainFile = toml::from_str(&to_toml(&f).unwrap()).unwrap();
            assert_eq!(back, f);
        }
        let m = MetaTrainFile::default();
        assert_eq!(
            toml::from_str::<MetaTrainFile>(&to_toml(&m).unwrap()).unwrap(),
            m
        );
        let a = AblateFile::default();
        assert_eq!(
            toml::from_str::<AblateFile>(&to_toml(&a).unwrap()).unwrap(),
            a
        );
        let v = VerifyFile::default();
        assert_eq!(
            toml::from_str::<VerifyFile>(&to_toml(&v).unwrap()).unwrap(),
            v
        );
        let h = HeatmapFile::default();
        assert_eq!(
            toml::from_str::<HeatmapFile>(&to_toml(&h).unwrap()).unwrap(),
            h
        );
    }

    #[test]
    fn configs_reject_missing_and_unknown_keys() {
        let text = to_toml(&TrainFile::default_for(EnvId::Cartpole)).unwrap();
        let missing = text.replace("learning_rate = 0.0003\n", "");
        assert!(toml::from_str::<TrainFile>(&missing).is_err());
        let extra = text.replace("[train]\n", "[train]\nwarmup = 3\n");
        assert!(toml::from_str::<TrainFile>(&extra).is_err());
    }

    #[test]
    fn drift_names_resolve() {
        let mut c = DriftChoice::default();
        assert_eq!(c.resolve().unwrap(), DriftSpec::ppo(0.2));
        c.name = "dpo".into();
        assert_eq!(c.resolve().unwrap(), DriftSpec::dpo());
        c.name = "trpo".into();
        assert!(c.resolve().is_err());
        c.name = "learned:/nonexistent/drift.json".into();
        assert!(c.resolve().is_err());
    }

    #[test]
    fn standard_error_definition() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        let std = (5.0f64 / 3.0).sqrt();
        assert!((s.se - std / 2.0).abs() < 1e-15);
        assert_eq!(Stat::of(&[7.0]).unwrap().se, 0.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn error_codes() {
        assert_eq!(exit_code(&Error::InvalidDrift("x".into())), EXIT_INVALID);
        assert_eq!(exit_code(&Error::Diverged("x".into())), EXIT_DIVERGED);
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(run(["mirrorlab", "no-such-command"]), EXIT_USAGE);
        assert_eq!(
            run(["mirrorlab", "train", "--env", "mountaincar"]),
            EXIT_USAGE
        );
    }
}

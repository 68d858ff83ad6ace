//! Command-line front end.
//!
//! Every subcommand validates its inputs, writes its artifacts and then a run
//! manifest next to them (`<out>.run.json` for file outputs, `run.json`
//! inside directory outputs). The manifest records the tool version, the
//! subcommand configuration with its SHA-256, the global seed and the
//! checksum of every input file. It carries no timestamps and no thread
//! count, so identical manifests imply identical artifacts.
//!
//! Exit codes: 0 ok, 2 usage, 3 data validation, 4 numeric failure. Failures
//! print one JSON error record to stderr.
//!
//! Generator-backed stages (collect, screen, grid, steer) drive the bundled
//! planted world, loaded from `world.json` and `studies.json` files produced
//! by `toyworld make` and `toyworld studies`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation_store::{
    collect_activations, read_shard, sha256_hex, write_shard, ActivationShard, SampleManifest, ShardListing,
    DEFAULT_MAX_TOKENS,
};
use crate::bootstrap::Resampling;
use crate::census::{census_report, summarize_model, Direction, DEFAULT_CONSENSUS_SIZE};
use crate::clinical_metrics::{
    composite, green_score, paired_bootstrap, per_type_breakdown, Alternative, BootstrapResult, ErrorCounts,
    ScoreVector, TypeBreakdown,
};
use crate::error::{Error, Result};
use crate::feature_select::{
    build_ranked_lists, causal_screen, compose_panel, AblationMode, CausalDeltaTable, RankedFeatureLists,
    ScreenConfig,
};
use crate::profiling::{profile_features, profiles_tsv, top_contexts, ReportRecord, DEFAULT_THRESHOLD};
use crate::steering::{
    aggregate_lists, grid_search, steer_generation, EditDirections, GridSpec, SteerMode, SteeringPlan, ALPHA_GRID,
    K_BUDGET_GRID,
};
use crate::topk_sae::{train, SaeModel, TrainConfig};
use crate::toy_world::{
    generate_studies, generate_world, load_studies, save_studies, toy_oracle, toy_scores, PlantedWorld,
    StudyConfig, ToyStudy, WorldConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "saesteer", version, about = "Sparse-autoencoder residual steering pipeline")]
pub struct Cli {
    /// Seed for every stochastic step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (0 = all cores). Never changes results.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Log filter, e.g. `info` or `debug`.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Record per-token activations into binary shards.
    Collect(CollectArgs),
    /// Train a Top-K SAE on one layer's shards.
    TrainSae(TrainArgs),
    /// Single-feature causal screen; writes a delta table and ranked lists.
    Screen(ScreenArgs),
    /// Freeze an operating point from ranked lists.
    Plan(PlanArgs),
    /// Evaluate a grid of operating points.
    Grid(GridArgs),
    /// Decode studies under a steering plan.
    Steer(SteerArgs),
    /// Compare baseline and steered per-sample records.
    Score(ScoreArgs),
    /// Cross-model functional overlap of causal features.
    Census(CensusArgs),
    /// Activation profiles and top contexts for chosen features.
    Profile(ProfileArgs),
    /// Planted-world utilities.
    #[command(subcommand)]
    Toyworld(ToyCommand),
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|_| format!("cannot parse {p:?}")))
        .collect()
}

fn parse_usize_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    parse_list(s)
}

#[derive(Debug, Args, Serialize)]
pub struct CollectArgs {
    /// Directory holding world.json and studies.json.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "8,16,20,24")]
    pub layers: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_MAX_TOKENS)]
    pub max_tokens: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Directory of shard files.
    #[arg(long)]
    pub shards: PathBuf,
    #[arg(long)]
    pub layer: u32,
    #[arg(long, default_value_t = 512)]
    pub dict: usize,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Zero,
    Amplify,
}

#[derive(Debug, Args, Serialize)]
pub struct ScreenArgs {
    #[arg(long)]
    pub sae: PathBuf,
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub studies: PathBuf,
    /// JSON array of study ids. Without it a quartile-balanced panel is drawn.
    #[arg(long)]
    pub panel: Option<PathBuf>,
    #[arg(long, default_value_t = 48)]
    pub panel_size: usize,
    #[arg(long, default_value_t = 16)]
    pub layer: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Zero)]
    pub mode: ModeArg,
    /// Amplification factor for `--mode amplify`.
    #[arg(long, default_value_t = 2.0)]
    pub factor: f64,
    /// Candidate features (default: all).
    #[arg(long, value_delimiter = ',')]
    pub candidates: Option<Vec<usize>>,
    #[arg(long)]
    pub min_word_f1: Option<f64>,
    /// Where to write the ranked lists (default: next to `--out`).
    #[arg(long)]
    #[serde(skip)]
    pub lists: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionsArg {
    Combined,
    SuppressOnly,
    BoostOnly,
}

impl From<DirectionsArg> for EditDirections {
    fn from(d: DirectionsArg) -> Self {
        match d {
            DirectionsArg::Combined => EditDirections::Combined,
            DirectionsArg::SuppressOnly => EditDirections::SuppressOnly,
            DirectionsArg::BoostOnly => EditDirections::BoostOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SteerModeArg {
    Residual,
    Blend,
}

impl From<SteerModeArg> for SteerMode {
    fn from(m: SteerModeArg) -> Self {
        match m {
            SteerModeArg::Residual => SteerMode::Residual,
            SteerModeArg::Blend => SteerMode::Blend,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PlanArgs {
    /// Ranked-list JSON files, one per steered layer.
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
    pub lists: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.3)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, value_enum, default_value_t = SteerModeArg::Residual)]
    pub mode: SteerModeArg,
    #[arg(long, default_value_t = 50)]
    pub k_budget: usize,
    #[arg(long, value_enum, default_value_t = DirectionsArg::Combined)]
    pub directions: DirectionsArg,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GridArgs {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub studies: PathBuf,
    /// Directory with `sae_l<layer>.bin` checkpoints.
    #[arg(long)]
    pub saes: PathBuf,
    /// Directory with `lists_l<layer>.json` ranked lists.
    #[arg(long)]
    pub lists: PathBuf,
    #[arg(long)]
    pub panel: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub kbudgets: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    pub betas: Vec<f64>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "residual")]
    pub modes: Vec<SteerModeArg>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "combined")]
    pub directions: Vec<DirectionsArg>,
    /// Layer subsets separated by `;`, e.g. `16;8,16,20,24`.
    #[arg(long, default_value = "8,16,20,24")]
    pub layer_sets: String,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SteerArgs {
    /// Steering plan; omit for unsteered decoding.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Directory with `sae_l<layer>.bin` checkpoints.
    #[arg(long)]
    pub saes: Option<PathBuf>,
    #[arg(long)]
    pub world: PathBuf,
    /// Studies JSON to decode.
    #[arg(long)]
    pub inputs: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    /// JSON lines of `{study_id, baseline: {counts, scores}, steered: {...}}`.
    #[arg(long, conflicts_with_all = ["baseline", "steered"])]
    pub pairs: Option<PathBuf>,
    /// JSON lines of `{study_id, counts, scores}`; joined with `--steered`.
    #[arg(long, requires = "steered")]
    pub baseline: Option<PathBuf>,
    #[arg(long, requires = "baseline")]
    pub steered: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    pub bootstrap: usize,
    #[arg(long)]
    pub two_sided: bool,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CensusArgs {
    /// Directory with `deltas_l<layer>.json` for the first model.
    #[arg(long)]
    pub model_a: PathBuf,
    #[arg(long)]
    pub model_b: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "8,16,20,24")]
    pub layers: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_CONSENSUS_SIZE)]
    pub n: usize,
    #[arg(long, default_value_t = 10_000)]
    pub boot: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ProfileArgs {
    #[arg(long)]
    pub sae: PathBuf,
    /// Directory of shard files; only shards of `--layer` are read.
    #[arg(long)]
    pub shards: PathBuf,
    #[arg(long)]
    pub layer: Option<u32>,
    #[arg(long)]
    pub reports: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub features: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = 3)]
    pub top: usize,
    /// Output directory for profile.tsv and profile.json.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyCommand {
    /// Generate a planted world.
    Make(MakeArgs),
    /// Generate a study set for a world.
    Studies(StudiesArgs),
    /// Score decoded reports against study references.
    Score(ToyScoreArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct MakeArgs {
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 96)]
    pub dict: usize,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    #[arg(long, default_value = "FF:3,MF:2")]
    pub drivers: String,
    #[arg(long, default_value_t = 0)]
    pub driver_offset: usize,
    #[arg(long, value_delimiter = ',', default_value = "8,16,20,24")]
    pub layers: Vec<usize>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct StudiesArgs {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 0.3)]
    pub driver_rate: f64,
    #[arg(long, default_value_t = 0.25)]
    pub weak_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    pub repetition_rate: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ToyScoreArgs {
    #[arg(long)]
    pub studies: PathBuf,
    #[arg(long)]
    pub reports: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    message: String,
    exit_code: i32,
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_DATA
    }
}

fn report_error(kind: &str, message: String, code: i32) {
    let rec = ErrorRecord {
        error: kind,
        message,
        exit_code: code,
    };
    eprintln!("{}", serde_json::to_string(&rec).unwrap_or_default());
}

/// Parses `argv` (including the program name) and runs one subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return EXIT_OK;
            }
            report_error("usage", e.to_string().trim().to_string(), EXIT_USAGE);
            return EXIT_USAGE;
        }
    };
    let _ = env_logger::Builder::new().parse_filters(&cli.log_level).try_init();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            report_error("usage", e.to_string(), EXIT_USAGE);
            return EXIT_USAGE;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            report_error(e.kind(), e.to_string(), code);
            code
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let seed = cli.seed;
    match &cli.command {
        Command::Collect(a) => collect(a, seed),
        Command::TrainSae(a) => train_sae(a, seed),
        Command::Screen(a) => screen(a, seed),
        Command::Plan(a) => plan(a, seed),
        Command::Grid(a) => grid(a, seed),
        Command::Steer(a) => steer(a, seed),
        Command::Score(a) => score(a, seed),
        Command::Census(a) => census(a, seed),
        Command::Profile(a) => profile(a, seed),
        Command::Toyworld(ToyCommand::Make(a)) => toy_make(a, seed),
        Command::Toyworld(ToyCommand::Studies(a)) => toy_studies(a, seed),
        Command::Toyworld(ToyCommand::Score(a)) => toy_score(a, seed),
    }
}

// ---------------------------------------------------------------------------
// Run manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct InputChecksum {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub inputs: Vec<InputChecksum>,
}

fn files_under(p: &Path) -> Result<Vec<PathBuf>> {
    if p.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(p)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        v.retain(|f| f.is_file());
        v.sort();
        Ok(v)
    } else {
        Ok(vec![p.to_path_buf()])
    }
}

fn write_run_manifest<C: Serialize>(
    command: &str,
    config: &C,
    seed: u64,
    inputs: &[&Path],
    at: &Path,
) -> Result<()> {
    let config = serde_json::to_value(config)?;
    let config_hash = sha256_hex(serde_json::to_string(&config)?.as_bytes());
    let mut checks = Vec::new();
    for p in inputs {
        for f in files_under(p)? {
            if f.file_name().is_some_and(|n| n == "run.json" || n.to_string_lossy().ends_with(".run.json")) {
                continue;
            }
            checks.push(InputChecksum {
                path: f.display().to_string(),
                sha256: sha256_hex(&fs::read(&f)?),
            });
        }
    }
    let m = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        seed,
        config,
        config_hash,
        inputs: checks,
    };
    fs::write(at, serde_json::to_vec_pretty(&m)?)?;
    Ok(())
}

fn file_manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn write_jsonl<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Schema {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Shared loaders
// ---------------------------------------------------------------------------

fn load_world_and_studies(world: &Path, studies: &Path) -> Result<(PlantedWorld, Vec<ToyStudy>)> {
    let w = PlantedWorld::load(world)?;
    let s = load_studies(studies)?;
    for st in &s {
        if let Some(&(j, _)) = st.schedule.iter().flatten().find(|(j, _)| *j >= w.atoms.len()) {
            return Err(Error::Schema {
                path: studies.to_path_buf(),
                reason: format!("study {} uses atom {j} outside the world", st.study_id),
            });
        }
    }
    Ok((w, s))
}

/// Shards in `dir` (files ending in `.bin`), optionally restricted to one
/// layer, in file-name order.
fn load_shards(dir: &Path, layer: Option<u32>) -> Result<Vec<ActivationShard>> {
    let mut out = Vec::new();
    for f in files_under(dir)? {
        if f.extension().is_some_and(|e| e == "bin") {
            let s = read_shard(&f)?;
            if layer.is_none_or(|l| s.layer() == l) {
                out.push(s);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyStream);
    }
    Ok(out)
}

fn sae_path(dir: &Path, layer: usize) -> PathBuf {
    dir.join(format!("sae_l{layer}.bin"))
}

fn load_saes(dir: &Path, layers: impl IntoIterator<Item = usize>) -> Result<BTreeMap<usize, SaeModel>> {
    layers
        .into_iter()
        .map(|l| Ok((l, SaeModel::load(sae_path(dir, l))?)))
        .collect()
}

/// Baseline Composite per study, used for quartile-balanced panels.
fn baseline_quality(world: &PlantedWorld, studies: &[ToyStudy]) -> Result<BTreeMap<String, f64>> {
    use crate::steering::{NoHook, SteerableGenerator};
    studies
        .par_iter()
        .map(|s| {
            let r = world.generate(s, &mut NoHook)?;
            Ok((s.study_id.clone(), composite(&toy_scores(&r.tokens(), &s.reference)?)?))
        })
        .collect()
}

fn select_panel(
    world: &PlantedWorld,
    studies: &[ToyStudy],
    panel: Option<&Path>,
    size: usize,
    seed: u64,
) -> Result<Vec<ToyStudy>> {
    let ids: Vec<String> = match panel {
        Some(p) => read_json(p)?,
        None => compose_panel(&baseline_quality(world, studies)?, size.min(studies.len()), seed)?,
    };
    let by_id: BTreeMap<&str, &ToyStudy> = studies.iter().map(|s| (s.study_id.as_str(), s)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|s| (*s).clone())
                .ok_or_else(|| Error::InvalidConfig(format!("panel study {id} not in study set")))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn collect(a: &CollectArgs, seed: u64) -> Result<()> {
    let world_p = a.input.join("world.json");
    let studies_p = a.input.join("studies.json");
    let (world, studies) = load_world_and_studies(&world_p, &studies_p)?;
    fs::create_dir_all(&a.out)?;
    let refs: Vec<(String, &ToyStudy)> = studies.iter().map(|s| (s.study_id.clone(), s)).collect();
    let mut listings = Vec::new();
    for layer in a.layers.clone() {
        let recs = collect_activations(&world, &refs, layer, a.max_tokens)?;
        let path = a.out.join(format!("shard_l{layer}.bin"));
        let desc = write_shard(recs, layer as u32, &path)?;
        log::info!("layer {layer}: {} records", desc.count);
        listings.push(ShardListing {
            path: PathBuf::from(format!("shard_l{layer}.bin")),
            layer: layer as u32,
            data_offset: desc.data_offset,
            study_ids: studies.iter().map(|s| s.study_id.clone()).collect(),
        });
    }
    let groups: BTreeMap<String, String> = studies
        .iter()
        .map(|s| (s.study_id.clone(), s.stratum.clone()))
        .collect();
    let mut labels: Vec<String> = groups.values().cloned().collect();
    labels.sort();
    labels.dedup();
    // One manifest per layer keeps "each study in exactly one listing".
    for l in &listings {
        let m = SampleManifest {
            shards: vec![l.clone()],
            group_labels: labels.clone(),
            groups: groups.clone(),
            seed,
        };
        m.validate()?;
        m.save(a.out.join(format!("manifest_l{}.json", l.layer)))?;
    }
    write_run_manifest("collect", a, seed, &[&world_p, &studies_p], &a.out.join("run.json"))
}

fn train_sae(a: &TrainArgs, seed: u64) -> Result<()> {
    let shards = load_shards(&a.shards, Some(a.layer))?;
    let data: Vec<Vec<f64>> = shards.iter().flat_map(|s| s.vectors_f64()).collect();
    let cfg = TrainConfig {
        dict_size: a.dict,
        k: a.k,
        learning_rate: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        seed,
        holdout_fraction: a.holdout,
    };
    let (model, outcome) = train(&data, &cfg)?;
    model.save(&a.out)?;
    let mut q = a.out.as_os_str().to_owned();
    q.push(".quality.json");
    write_json(&outcome, Path::new(&q))?;
    write_run_manifest("train-sae", a, seed, &[&a.shards], &file_manifest_path(&a.out))
}

fn lists_path_for(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match stem.strip_prefix("deltas") {
        Some(rest) => format!("lists{rest}.json"),
        None => format!("{stem}.lists.json"),
    };
    out.with_file_name(name)
}

fn screen(a: &ScreenArgs, seed: u64) -> Result<()> {
    let (world, studies) = load_world_and_studies(&a.world, &a.studies)?;
    let sae = SaeModel::load(&a.sae)?;
    if sae.hidden_dim() != world.hidden_dim() {
        return Err(Error::DimensionMismatch {
            expected: world.hidden_dim(),
            got: sae.hidden_dim(),
        });
    }
    let panel = select_panel(&world, &studies, a.panel.as_deref(), a.panel_size, seed)?;
    let candidates: Vec<usize> = a.candidates.clone().unwrap_or_else(|| (0..sae.dict_size()).collect());
    let config = ScreenConfig {
        layer: a.layer,
        mode: match a.mode {
            ModeArg::Zero => AblationMode::Zero,
            ModeArg::Amplify => AblationMode::Amplify { factor: a.factor },
        },
        min_word_f1: a.min_word_f1,
    };
    let table = causal_screen(&sae, &panel, &world, &crate::toy_world::ToyOracle, &candidates, &config)?;
    write_json(&table, &a.out)?;
    let lists = build_ranked_lists(&table);
    write_json(&lists, &a.lists.clone().unwrap_or_else(|| lists_path_for(&a.out)))?;
    let mut inputs: Vec<&Path> = vec![&a.sae, &a.world, &a.studies];
    if let Some(p) = &a.panel {
        inputs.push(p);
    }
    write_run_manifest("screen", a, seed, &inputs, &file_manifest_path(&a.out))
}

fn plan(a: &PlanArgs, seed: u64) -> Result<()> {
    let mut layers = BTreeMap::new();
    for p in &a.lists {
        let l = RankedFeatureLists::load(p)?;
        if layers
            .insert(l.layer, aggregate_lists(&l, a.k_budget).restrict(a.directions.into()))
            .is_some()
        {
            return Err(Error::InvalidConfig(format!("layer {} listed twice", l.layer)));
        }
    }
    let plan = SteeringPlan {
        alpha: a.alpha,
        beta: a.beta,
        mode: a.mode.into(),
        k_budget: Some(a.k_budget),
        layers,
    };
    plan.validate()?;
    for w in plan.warnings() {
        log::warn!("{w}");
    }
    write_json(&plan, &a.out)?;
    let inputs: Vec<&Path> = a.lists.iter().map(PathBuf::as_path).collect();
    write_run_manifest("plan", a, seed, &inputs, &file_manifest_path(&a.out))
}

fn parse_layer_sets(s: &str) -> Result<Vec<Vec<usize>>> {
    s.split(';')
        .map(|part| parse_usize_list(part).map_err(Error::InvalidConfig))
        .filter(|r| r.as_ref().map_or(true, |v| !v.is_empty()))
        .collect()
}

fn grid(a: &GridArgs, seed: u64) -> Result<()> {
    let (world, studies) = load_world_and_studies(&a.world, &a.studies)?;
    let spec = GridSpec {
        alphas: a.alphas.clone().unwrap_or_else(|| ALPHA_GRID.to_vec()),
        k_budgets: a.kbudgets.clone().unwrap_or_else(|| K_BUDGET_GRID.to_vec()),
        betas: a.betas.clone(),
        modes: a.modes.iter().map(|&m| m.into()).collect(),
        directions: a.directions.iter().map(|&d| d.into()).collect(),
        layer_subsets: parse_layer_sets(&a.layer_sets)?,
    };
    let mut needed: Vec<usize> = spec.layer_subsets.iter().flatten().copied().collect();
    needed.sort_unstable();
    needed.dedup();
    let saes = load_saes(&a.saes, needed.iter().copied())?;
    let lists: BTreeMap<usize, RankedFeatureLists> = needed
        .iter()
        .map(|&l| Ok((l, RankedFeatureLists::load(a.lists.join(format!("lists_l{l}.json")))?)))
        .collect::<Result<_>>()?;
    let panel = match &a.panel {
        Some(p) => select_panel(&world, &studies, Some(p), 0, seed)?,
        None => studies.clone(),
    };
    let result = grid_search(&world, &saes, &lists, &spec, &panel, |s, r| {
        let sv = toy_scores(&r.tokens(), &s.reference)?;
        Ok((composite(&sv)?, sv.green.unwrap_or(0.0)))
    })?;
    write_json(&result, &a.out)?;
    let mut inputs: Vec<&Path> = vec![&a.world, &a.studies, &a.saes, &a.lists];
    if let Some(p) = &a.panel {
        inputs.push(p);
    }
    write_run_manifest("grid", a, seed, &inputs, &file_manifest_path(&a.out))
}

fn steer(a: &SteerArgs, seed: u64) -> Result<()> {
    let world = PlantedWorld::load(&a.world)?;
    let studies = load_studies(&a.inputs)?;
    let plan = match &a.plan {
        Some(p) => SteeringPlan::load(p)?,
        None => SteeringPlan::unsteered(),
    };
    let saes = match &a.saes {
        Some(dir) => load_saes(dir, plan.layers.keys().copied())?,
        None if plan.layers.is_empty() || plan.alpha == 0.0 => BTreeMap::new(),
        None => return Err(Error::InvalidConfig("--saes is required for a steering plan".into())),
    };
    let plan = if saes.is_empty() && plan.alpha == 0.0 {
        SteeringPlan {
            layers: BTreeMap::new(),
            ..plan
        }
    } else {
        plan
    };
    let reports: Vec<ReportRecord> = studies
        .par_iter()
        .map(|s| {
            let r = steer_generation(&world, &plan, &saes, s)?;
            Ok(ReportRecord {
                study_id: s.study_id.clone(),
                tokens: r.step_texts(),
            })
        })
        .collect::<Result<_>>()?;
    write_jsonl(&reports, &a.out)?;
    let mut inputs: Vec<&Path> = vec![&a.world, &a.inputs];
    if let Some(p) = &a.plan {
        inputs.push(p);
    }
    if let Some(p) = &a.saes {
        inputs.push(p);
    }
    write_run_manifest("steer", a, seed, &inputs, &file_manifest_path(&a.out))
}

/// Per-sample record exchanged between `toyworld score` and `score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub study_id: String,
    pub counts: ErrorCounts,
    pub scores: ScoreVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub study_id: String,
    pub baseline: ArmRecord,
    pub steered: ArmRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRecord {
    pub counts: ErrorCounts,
    pub scores: ScoreVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: String,
    pub baseline_mean: f64,
    pub steered_mean: f64,
    pub test: BootstrapResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub n: usize,
    pub alternative: Alternative,
    pub metrics: Vec<MetricComparison>,
    pub per_type: TypeBreakdown,
}

fn load_pairs(a: &ScoreArgs) -> Result<Vec<PairRecord>> {
    if let Some(p) = &a.pairs {
        return read_jsonl(p);
    }
    let (Some(b), Some(s)) = (&a.baseline, &a.steered) else {
        return Err(Error::InvalidConfig("give --pairs or both --baseline and --steered".into()));
    };
    let base: Vec<SampleRecord> = read_jsonl(b)?;
    let steered: BTreeMap<String, SampleRecord> = read_jsonl::<SampleRecord>(s)?
        .into_iter()
        .map(|r| (r.study_id.clone(), r))
        .collect();
    if steered.len() != base.len() {
        return Err(Error::LengthMismatch {
            left: base.len(),
            right: steered.len(),
        });
    }
    base.into_iter()
        .map(|b| {
            let s = steered
                .get(&b.study_id)
                .ok_or_else(|| Error::Misaligned(format!("study {} missing from steered arm", b.study_id)))?;
            Ok(PairRecord {
                study_id: b.study_id,
                baseline: ArmRecord {
                    counts: b.counts,
                    scores: b.scores,
                },
                steered: ArmRecord {
                    counts: s.counts,
                    scores: s.scores,
                },
            })
        })
        .collect()
}

fn score(a: &ScoreArgs, seed: u64) -> Result<()> {
    let pairs = load_pairs(a)?;
    for p in &pairs {
        p.baseline.scores.validate()?;
        p.steered.scores.validate()?;
    }
    let scheme = Resampling::random(a.bootstrap, seed);
    let alternative = if a.two_sided {
        Alternative::TwoSided
    } else {
        Alternative::Greater
    };
    type Pick = fn(&ArmRecord) -> Option<f64>;
    let picks: [(&str, Pick); 6] = [
        ("composite", |r| composite(&r.scores).ok()),
        // Reported x100 like the other components.
        ("green", |r| Some(100.0 * green_score(&r.counts))),
        ("radgraph", |r| r.scores.radgraph),
        ("chexbert", |r| r.scores.chexbert),
        ("bertscore", |r| r.scores.bertscore),
        ("radcliq", |r| r.scores.radcliq),
    ];
    let mut metrics = Vec::new();
    for (name, pick) in picks {
        let vals: Option<Vec<(f64, f64)>> = pairs
            .iter()
            .map(|p| Some((pick(&p.baseline)?, pick(&p.steered)?)))
            .collect();
        let Some(vals) = vals else {
            log::info!("metric {name} not present in every record; skipped");
            continue;
        };
        let (b, s): (Vec<f64>, Vec<f64>) = vals.into_iter().unzip();
        let test = paired_bootstrap(&b, &s, scheme, alternative, a.level)?;
        let n = b.len() as f64;
        metrics.push(MetricComparison {
            metric: name.to_string(),
            baseline_mean: b.iter().sum::<f64>() / n,
            steered_mean: s.iter().sum::<f64>() / n,
            test,
        });
    }
    let per_type = per_type_breakdown(
        &pairs
            .iter()
            .map(|p| (p.baseline.counts, p.steered.counts))
            .collect::<Vec<_>>(),
    );
    let report = ScoreReport {
        n: pairs.len(),
        alternative,
        metrics,
        per_type,
    };
    write_json(&report, &a.out)?;
    let inputs: Vec<&Path> = [&a.pairs, &a.baseline, &a.steered]
        .into_iter()
        .flatten()
        .map(PathBuf::as_path)
        .collect();
    write_run_manifest("score", a, seed, &inputs, &file_manifest_path(&a.out))
}

fn census(a: &CensusArgs, seed: u64) -> Result<()> {
    let layers = a.layers.clone();
    let load = |dir: &Path| -> Result<BTreeMap<usize, CausalDeltaTable>> {
        layers
            .iter()
            .map(|&l| {
                let t = CausalDeltaTable::load(dir.join(format!("deltas_l{l}.json")))?;
                if t.layer != l {
                    return Err(Error::LayerMismatch(format!("file for layer {l} holds layer {}", t.layer)));
                }
                Ok((l, t))
            })
            .collect()
    };
    let name = |p: &Path| p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let (na, nb) = (name(&a.model_a), name(&a.model_b));
    let sa = summarize_model(&na, &load(&a.model_a)?, a.n)?;
    let sb = summarize_model(&nb, &load(&a.model_b)?, a.n)?;
    let report = census_report(&na, &nb, &sa, &sb, Resampling::random(a.boot, seed), a.level)?;
    let summaries: BTreeMap<String, _> = [(na.clone(), sa), (nb.clone(), sb)].into_iter().collect();
    write_json(
        &serde_json::json!({ "report": report, "summaries": summaries_json(&summaries) }),
        &a.out,
    )?;
    write_run_manifest("census", a, seed, &[&a.model_a, &a.model_b], &file_manifest_path(&a.out))
}

fn summaries_json(
    s: &BTreeMap<String, BTreeMap<Direction, crate::census::LayerSummaries>>,
) -> serde_json::Value {
    let mut out = serde_json::Map::new();
    for (model, dirs) in s {
        let mut m = serde_json::Map::new();
        for (d, layers) in dirs {
            let key = serde_json::to_value(d).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            let per: serde_json::Map<String, serde_json::Value> = layers
                .iter()
                .map(|(l, v)| (l.to_string(), serde_json::to_value(v).unwrap_or_default()))
                .collect();
            m.insert(key, per.into());
        }
        out.insert(model.clone(), m.into());
    }
    out.into()
}

fn profile(a: &ProfileArgs, seed: u64) -> Result<()> {
    let sae = SaeModel::load(&a.sae)?;
    let shards = load_shards(&a.shards, a.layer)?;
    let reports = ReportRecord::load_jsonl(&a.reports)?;
    let profiles = profile_features(&sae, &shards, &reports, &a.features, a.threshold)?;
    let contexts = top_contexts(&profiles, &reports, a.top)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("profile.tsv"), profiles_tsv(&profiles, &contexts))?;
    write_json(
        &serde_json::json!({ "threshold": a.threshold, "profiles": profiles, "contexts": contexts }),
        &a.out.join("profile.json"),
    )?;
    write_run_manifest("profile", a, seed, &[&a.sae, &a.shards, &a.reports], &a.out.join("run.json"))
}

fn toy_make(a: &MakeArgs, seed: u64) -> Result<()> {
    let cfg = WorldConfig {
        hidden_dim: a.d,
        dict_size: a.dict,
        k0: a.k,
        sigma: a.sigma,
        seed,
        drivers: WorldConfig::parse_drivers(&a.drivers)?,
        driver_slot_offset: a.driver_offset,
        layers: a.layers.clone(),
        ..Default::default()
    };
    let world = generate_world(&cfg)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    world.save(&a.out)?;
    write_run_manifest("toyworld make", a, seed, &[], &file_manifest_path(&a.out))
}

fn toy_studies(a: &StudiesArgs, seed: u64) -> Result<()> {
    let world = PlantedWorld::load(&a.world)?;
    let cfg = StudyConfig {
        count: a.count,
        seed,
        driver_rate: a.driver_rate,
        weak_fraction: a.weak_fraction,
        repetition_rate: a.repetition_rate,
        ..Default::default()
    };
    let studies = generate_studies(&world, &cfg)?;
    save_studies(&studies, &a.out)?;
    write_run_manifest("toyworld studies", a, seed, &[&a.world], &file_manifest_path(&a.out))
}

fn toy_score(a: &ToyScoreArgs, seed: u64) -> Result<()> {
    let studies = load_studies(&a.studies)?;
    let reports = ReportRecord::load_jsonl(&a.reports)?;
    let by_id: BTreeMap<&str, &ToyStudy> = studies.iter().map(|s| (s.study_id.as_str(), s)).collect();
    let rows: Vec<SampleRecord> = reports
        .iter()
        .map(|r| {
            let s = by_id
                .get(r.study_id.as_str())
                .ok_or_else(|| Error::Misaligned(format!("no study {}", r.study_id)))?;
            let tokens: Vec<&str> = r.tokens.iter().flat_map(|t| t.split_whitespace()).collect();
            Ok(SampleRecord {
                study_id: r.study_id.clone(),
                counts: toy_oracle(&tokens, &s.reference)?,
                scores: toy_scores(&tokens, &s.reference)?,
            })
        })
        .collect::<Result<_>>()?;
    write_jsonl(&rows, &a.out)?;
    write_run_manifest("toyworld score", a, seed, &[&a.studies, &a.reports], &file_manifest_path(&a.out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["saesteer", "no-such-command"]), EXIT_USAGE);
        assert_eq!(run(["saesteer", "score", "--bogus"]), EXIT_USAGE);
    }

    #[test]
    fn missing_input_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o.json");
        let code = run([
            "saesteer".as_ref(),
            "census".as_ref(),
            "--model-a".as_ref(),
            dir.path().join("nope").as_os_str(),
            "--model-b".as_ref(),
            dir.path().as_os_str(),
            "--out".as_ref(),
            out.as_os_str(),
        ]);
        assert_eq!(code, EXIT_DATA);
    }

    #[test]
    fn lists_path_naming() {
        assert_eq!(lists_path_for(Path::new("x/deltas_l16.json")), Path::new("x/lists_l16.json"));
        assert_eq!(lists_path_for(Path::new("t.json")), Path::new("t.lists.json"));
    }

    #[test]
    fn layer_sets() {
        assert_eq!(parse_layer_sets("16;8,16").unwrap(), vec![vec![16], vec![8, 16]]);
        assert!(parse_layer_sets("x").is_err());
    }

    #[test]
    fn numeric_errors_map_to_4() {
        assert_eq!(exit_code(&Error::ZeroVector), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::EmptyShard), EXIT_DATA);
    }
}

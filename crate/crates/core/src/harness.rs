//! Experiment orchestration: configs and presets, single runs, sweeps,
//! subset convergence, exports and metric files.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::allocation::{write_allocation_csv, AllocationMatrix, AllocationStrategy, StrategyKind};
use crate::data::{
    build_federation_scenario, make_synthetic_domains, write_corpus_csv, DomainCorpus, FederationScenario,
    LabeledDataset, PartitionMode, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::federation::{
    global_train_loss, round_allocation, run_federation, run_subset_training, MissingLayerStrategy, RoundConfig,
    RoundReport, ServerState, SubsetEpoch,
};
use crate::model::{ModelDims, StackModel};
use crate::rng::{derive_rng, stream};
use crate::theory::{estimate_constants, gamma_star, theorem1_bound, BoundInputs, BoundReport};

pub const OUT_DIR_ENV: &str = "FEDRA_OUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    FedRA,
    FedRAConstrained,
    DepthPrefix,
    AllLarge,
    AllSmall,
    /// FedRA with per-round capacity resampling.
    Dynamic,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::FedRA,
        Method::FedRAConstrained,
        Method::DepthPrefix,
        Method::AllLarge,
        Method::AllSmall,
        Method::Dynamic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FedRA => "FedRA",
            Method::FedRAConstrained => "FedRA-Constrained",
            Method::DepthPrefix => "DepthPrefix",
            Method::AllLarge => "AllLarge",
            Method::AllSmall => "AllSmall",
            Method::Dynamic => "Dynamic",
        }
    }

    /// Allocation rule and missing-layer handling. `missing` only applies to
    /// the random methods; the baselines always carry forward.
    pub fn round_setup(self, dynamic: bool, missing: MissingLayerStrategy) -> (AllocationStrategy, MissingLayerStrategy) {
        let (kind, missing) = match self {
            Method::FedRA | Method::Dynamic => (StrategyKind::RandomUniform, missing),
            Method::FedRAConstrained => (StrategyKind::RandomConstrained, MissingLayerStrategy::ConstrainAllocation),
            Method::DepthPrefix => (StrategyKind::DepthPrefix, MissingLayerStrategy::CarryForward),
            Method::AllLarge => (StrategyKind::AllLarge, MissingLayerStrategy::CarryForward),
            Method::AllSmall => (StrategyKind::AllSmall, MissingLayerStrategy::CarryForward),
        };
        let strategy = AllocationStrategy {
            kind,
            dynamic: dynamic || self == Method::Dynamic,
        };
        (strategy, missing)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .flat_map(char::to_lowercase)
            .collect();
        Method::ALL
            .into_iter()
            .find(|m| m.name().replace('-', "").to_lowercase() == key)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown method {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.name().to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Table1Desk,
    Table2Desk,
    Table3Desk,
    Table4Desk,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Table1Desk, Preset::Table2Desk, Preset::Table3Desk, Preset::Table4Desk];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Table1Desk => "table1-desk",
            Preset::Table2Desk => "table2-desk",
            Preset::Table3Desk => "table3-desk",
            Preset::Table4Desk => "table4-desk",
        }
    }

    pub fn scenario(self) -> ScenarioConfig {
        let base = ScenarioConfig::default();
        match self {
            Preset::Table1Desk => base,
            Preset::Table2Desk => ScenarioConfig {
                mode: PartitionMode::FeatureLabelSkew { alpha: 0.5, parts: 5 },
                capacities: TABLE1_CAPACITIES.iter().flat_map(|&c| [c; 5]).collect(),
                ..base
            },
            Preset::Table3Desk => ScenarioConfig {
                capacities: vec![6, 6, 4, 4, 3, 3],
                ..base
            },
            Preset::Table4Desk => ScenarioConfig {
                dynamic: true,
                ..base
            },
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}")))
    }
}

/// One client per domain, largest first.
pub const TABLE1_CAPACITIES: [usize; 6] = [8, 6, 5, 4, 3, 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub mode: PartitionMode,
    /// Domain-major client capacities.
    pub capacities: Vec<usize>,
    /// Resample every participant's capacity uniformly from `1..=L` each round.
    pub dynamic: bool,
    pub data: SyntheticConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            mode: PartitionMode::FeatureSkew,
            capacities: TABLE1_CAPACITIES.to_vec(),
            dynamic: false,
            data: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub rounds: usize,
    pub lr: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// All clients when absent.
    pub clients_per_round: Option<usize>,
    pub missing: MissingLayerStrategy,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            rounds: 60,
            lr: 0.01,
            local_epochs: 1,
            batch_size: 32,
            clients_per_round: None,
            missing: MissingLayerStrategy::CarryForward,
        }
    }
}

/// Settings for the empirical bound constants recorded in each manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub enabled: bool,
    pub batch_size: usize,
    pub probes: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            enabled: true,
            batch_size: 32,
            probes: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubsetConfig {
    pub sizes: Vec<usize>,
    pub epochs: usize,
}

impl Default for SubsetConfig {
    fn default() -> Self {
        SubsetConfig {
            sizes: vec![2, 4, 8],
            epochs: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Applied before the rest of the file; explicit keys win.
    pub preset: Option<Preset>,
    pub scenario: ScenarioConfig,
    pub model: ModelDims,
    pub training: TrainingConfig,
    pub method: Method,
    /// Methods compared by `sweep`.
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Write a checkpoint every this many rounds; 0 disables.
    pub checkpoint_every: usize,
    pub probe: ProbeConfig,
    pub subset: SubsetConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            preset: None,
            scenario: ScenarioConfig::default(),
            model: ModelDims::default(),
            training: TrainingConfig::default(),
            method: Method::FedRA,
            methods: vec![Method::FedRA, Method::DepthPrefix, Method::AllLarge, Method::AllSmall],
            seeds: vec![0, 1, 2],
            checkpoint_every: 0,
            probe: ProbeConfig::default(),
            subset: SubsetConfig::default(),
        }
    }
}

/// Overlays `over` onto `base`. Tables merge key by key except the partition
/// mode, which is replaced whole since its fields depend on its kind.
fn merge_toml(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if k != "mode" => merge_toml(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    pub fn from_preset(preset: Preset) -> Self {
        ExperimentConfig {
            preset: Some(preset),
            scenario: preset.scenario(),
            ..ExperimentConfig::default()
        }
    }

    /// Defaults, then the preset (`preset` argument over the file's key),
    /// then the file's explicit keys.
    pub fn resolve(text: Option<&str>, preset: Option<Preset>) -> Result<Self> {
        let file: toml::Table = match text {
            Some(t) => toml::from_str(t).map_err(|e| Error::Config(format!("malformed config: {e}")))?,
            None => toml::Table::new(),
        };
        let file_preset = match file.get("preset") {
            Some(v) => Some(
                v.as_str()
                    .ok_or_else(|| Error::Config("preset must be a string".into()))?
                    .parse::<Preset>()?,
            ),
            None => None,
        };
        let base = match preset.or(file_preset) {
            Some(p) => ExperimentConfig::from_preset(p),
            None => ExperimentConfig::default(),
        };
        let mut merged = toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        let mut over = toml::Value::Table(file);
        if let (Some(p), toml::Value::Table(t)) = (preset, &mut over) {
            t.insert("preset".into(), toml::Value::String(p.name().into()));
        }
        merge_toml(&mut merged, over);
        let cfg: ExperimentConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("malformed config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Option<Preset>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::resolve(Some(&text), preset)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one sweep method is required".into()));
        }
        if self.training.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        let data = &self.scenario.data;
        if data.input_dim != self.model.input_dim || data.num_classes != self.model.classes {
            return Err(Error::Config(format!(
                "data ({} features, {} classes) does not match the model ({} inputs, {} classes)",
                data.input_dim, data.num_classes, self.model.input_dim, self.model.classes
            )));
        }
        let l = self.model.layers;
        if let Some(&bad) = self.scenario.capacities.iter().find(|&&c| c == 0 || c > l) {
            return Err(Error::Config(format!("capacity {bad} outside 1..={l}")));
        }
        let expected = match self.scenario.mode {
            PartitionMode::FeatureSkew => data.num_domains,
            PartitionMode::FeatureLabelSkew { parts, .. } => data.num_domains * parts,
        };
        if self.scenario.capacities.len() != expected {
            return Err(Error::Config(format!(
                "{} capacities for {expected} clients",
                self.scenario.capacities.len()
            )));
        }
        if self.training.clients_per_round.is_some_and(|k| k == 0 || k > expected) {
            return Err(Error::Config(format!("clients_per_round must lie in 1..={expected}")));
        }
        if self.subset.sizes.iter().any(|&k| k == 0 || k > l) || self.subset.epochs == 0 {
            return Err(Error::Config(format!("subset sizes must lie in 1..={l} with epochs >= 1")));
        }
        Ok(())
    }

    pub fn num_clients(&self) -> usize {
        self.scenario.capacities.len()
    }

    pub fn round_config(&self, method: Method) -> RoundConfig {
        let (strategy, missing) = method.round_setup(self.scenario.dynamic, self.training.missing);
        RoundConfig {
            lr: self.training.lr,
            local_epochs: self.training.local_epochs,
            batch_size: self.training.batch_size,
            clients_per_round: self.training.clients_per_round.unwrap_or(self.num_clients()),
            strategy,
            missing,
        }
    }

    /// `sha256(config TOML ‖ method ‖ seed)`, truncated to 16 hex digits.
    pub fn run_id(&self, method: Method, seed: u64) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.to_toml()?.as_bytes());
        h.update(method.name().as_bytes());
        h.update(seed.to_le_bytes());
        Ok(hex::encode(h.finalize())[..16].to_string())
    }
}

/// CLI-level overrides applied after [`ExperimentConfig::resolve`].
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub rounds: Option<usize>,
    pub lora_rank: Option<usize>,
    pub missing: Option<MissingLayerStrategy>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(m) = self.method {
            cfg.method = m;
            cfg.methods = vec![m];
        }
        if let Some(t) = self.rounds {
            cfg.training.rounds = t;
        }
        if let Some(r) = self.lora_rank {
            cfg.model.rank = r;
        }
        if let Some(m) = self.missing {
            cfg.training.missing = m;
        }
        cfg.validate()
    }
}

/// Synthetic corpus and client split for `seed`.
pub fn build_scenario(cfg: &ExperimentConfig, seed: u64) -> Result<(DomainCorpus, FederationScenario)> {
    let mut data_rng = derive_rng(seed, &[stream::DATA]);
    let corpus = make_synthetic_domains(&cfg.scenario.data, &mut data_rng)?;
    let mut part_rng = derive_rng(seed, &[stream::PARTITION]);
    let scenario = build_federation_scenario(cfg.scenario.mode, &cfg.scenario.capacities, &corpus, &mut part_rng)?;
    Ok((corpus, scenario))
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory for periodic checkpoints (only used when `checkpoint_every > 0`).
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from a checkpoint instead of a fresh model.
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub method: Method,
    pub seed: u64,
    pub history: Vec<RoundReport>,
    pub model: StackModel,
    pub bound_inputs: Option<BoundInputs>,
    /// Bound evaluation on `bound_inputs`, or why it was rejected.
    pub bound: Option<std::result::Result<BoundReport, String>>,
    pub started_at: u64,
    pub finished_at: u64,
}

impl RunOutput {
    pub fn final_report(&self) -> &RoundReport {
        self.history.last().expect("runs have at least one round")
    }

    pub fn final_accuracies(&self) -> Vec<f64> {
        self.final_report().domain_metrics.iter().map(|m| m.accuracy).collect()
    }

    pub fn average_accuracy(&self) -> f64 {
        self.final_report().average_accuracy
    }

    pub fn allocations(&self) -> Vec<AllocationMatrix> {
        self.history.iter().map(|r| r.allocation.clone()).collect()
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn checkpoint_path(dir: &Path, round: usize) -> PathBuf {
    dir.join(format!("round-{round:04}.ckpt"))
}

pub fn load_checkpoint(path: &Path) -> Result<(StackModel, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    StackModel::from_checkpoint_text(&text)
}

/// One federated run of `method` under `seed`.
pub fn run_experiment(cfg: &ExperimentConfig, method: Method, seed: u64, opts: &RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    let started_at = unix_now();
    let (_, scenario) = build_scenario(cfg, seed)?;
    let round_cfg = cfg.round_config(method);
    let mut state = match &opts.resume {
        Some(path) => {
            let (model, round) = load_checkpoint(path)?;
            if model.dims != cfg.model {
                return Err(Error::Config(format!("checkpoint {} has different model dims", path.display())));
            }
            ServerState { model, round }
        }
        None => ServerState::new(StackModel::build(&cfg.model, seed)?),
    };
    let remaining = cfg.training.rounds.checked_sub(state.round).filter(|&r| r > 0).ok_or_else(|| {
        Error::Config(format!("checkpoint is at round {} of {}", state.round, cfg.training.rounds))
    })?;

    let initial = state.model.clone();
    if let Some(dir) = opts.checkpoint_dir.as_ref().filter(|_| cfg.checkpoint_every > 0) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let history = run_federation(&mut state, &scenario, &round_cfg, remaining, seed, |st, _| {
        match opts.checkpoint_dir.as_ref() {
            Some(dir) if cfg.checkpoint_every > 0 && st.round % cfg.checkpoint_every == 0 => {
                let path = checkpoint_path(dir, st.round);
                fs::write(&path, st.model.to_checkpoint_text(st.round)).map_err(|e| Error::io(&path, e))
            }
            _ => Ok(()),
        }
    })?;

    let (bound_inputs, bound) = if cfg.probe.enabled {
        let inputs = collect_bound_inputs(cfg, &initial, &scenario, &round_cfg, &history, seed)?;
        let report = theorem1_bound(&inputs).map_err(|e| e.to_string());
        (Some(inputs), Some(report))
    } else {
        (None, None)
    };
    Ok(RunOutput {
        config: cfg.clone(),
        method,
        seed,
        history,
        model: state.model,
        bound_inputs,
        bound,
        started_at,
        finished_at: unix_now(),
    })
}

/// Bound symbols measured on a finished run. `h`, `σ²`, `δ²` and `F1` are
/// probed at the starting model; `F1` stands in for `E[F(r₁)] − F*` since
/// cross-entropy is nonnegative.
fn collect_bound_inputs(
    cfg: &ExperimentConfig,
    initial: &StackModel,
    scenario: &FederationScenario,
    round_cfg: &RoundConfig,
    history: &[RoundReport],
    seed: u64,
) -> Result<BoundInputs> {
    let constants = estimate_constants(initial, scenario, cfg.probe.batch_size, cfg.probe.probes, seed)?;
    let allocations: Vec<AllocationMatrix> = history.iter().map(|r| r.allocation.clone()).collect();
    let j = history
        .iter()
        .flat_map(|r| r.local_steps.iter().copied())
        .max()
        .unwrap_or(1);
    Ok(BoundInputs {
        h: constants.h,
        sigma2: constants.sigma2,
        delta2: constants.delta2,
        alpha: history.iter().map(|r| r.alpha_measured).fold(0.0, f64::max),
        n: round_cfg.clients_per_round as f64,
        j: j.max(1) as f64,
        t: history.len() as f64,
        eta: round_cfg.lr,
        gamma_star: gamma_star(&allocations)? as f64,
        f1: global_train_loss(initial, scenario)?,
        sum_r_norm2: history.iter().map(|r| r.adapter_norm2).sum(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub method: Method,
    pub seed: u64,
    pub rounds: usize,
    pub domain_accuracies: Vec<f64>,
    pub domain_losses: Vec<f64>,
    pub average_accuracy: f64,
    pub gamma_star: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub method: Method,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub metrics_path: String,
    pub summary_path: String,
    pub plot_path: String,
    pub allocations_path: String,
    pub final_domain_accuracies: Vec<f64>,
    pub average_accuracy: f64,
    pub gamma_star: usize,
    pub bound_inputs: Option<BoundInputs>,
    pub bound: Option<BoundReport>,
    pub bound_error: Option<String>,
    pub bound_constants_note: &'static str,
    pub started_at_unix: u64,
    pub finished_at_unix: u64,
    pub version: &'static str,
}

pub const METRICS_FILE: &str = "rounds.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PLOT_FILE: &str = "plot.csv";
pub const ALLOCATIONS_FILE: &str = "allocations.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-round metrics: one row per (round, domain).
pub fn write_rounds_csv<W: Write>(out: W, history: &[RoundReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "domain", "accuracy", "loss", "gamma_min", "alpha_measured"])?;
    for r in history {
        let gamma = r.gamma_min.map(|g| g.to_string()).unwrap_or_default();
        for (d, m) in r.domain_metrics.iter().enumerate() {
            w.write_record([
                r.round.to_string(),
                d.to_string(),
                m.accuracy.to_string(),
                m.mean_loss.to_string(),
                gamma.clone(),
                r.alpha_measured.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::Io {
        path: PathBuf::from(METRICS_FILE),
        source: e,
    })
}

/// `round,method,average_accuracy` rows for external plotting.
pub fn write_plot_csv<W: Write>(out: W, series: &[(Method, Vec<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "method", "average_accuracy"])?;
    for (method, accs) in series {
        for (t, a) in accs.iter().enumerate() {
            w.write_record([t.to_string(), method.name().to_string(), a.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::Io {
        path: PathBuf::from(PLOT_FILE),
        source: e,
    })
}

pub fn summarize(run: &RunOutput) -> Result<RunSummary> {
    let last = run.final_report();
    Ok(RunSummary {
        run_id: run.config.run_id(run.method, run.seed)?,
        method: run.method,
        seed: run.seed,
        rounds: run.history.len(),
        domain_accuracies: run.final_accuracies(),
        domain_losses: last.domain_metrics.iter().map(|m| m.mean_loss).collect(),
        average_accuracy: last.average_accuracy,
        gamma_star: gamma_star(&run.allocations())?,
    })
}

/// Writes metrics, summary, plot data, allocations and manifest into `dir`.
/// Only the manifest carries timestamps.
pub fn emit_metrics(dir: &Path, run: &RunOutput) -> Result<RunManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(METRICS_FILE);
    write_rounds_csv(create(&path)?, &run.history)?;

    let summary = summarize(run)?;
    write_json(&dir.join(SUMMARY_FILE), &summary)?;

    let path = dir.join(PLOT_FILE);
    let series = vec![(run.method, run.history.iter().map(|r| r.average_accuracy).collect())];
    write_plot_csv(create(&path)?, &series)?;

    let path = dir.join(ALLOCATIONS_FILE);
    let clients: Vec<Vec<usize>> = run.history.iter().map(|r| r.clients.clone()).collect();
    write_allocation_csv(create(&path)?, &run.allocations(), Some(&clients))?;

    let (bound, bound_error) = match &run.bound {
        Some(Ok(b)) => (Some(*b), None),
        Some(Err(e)) => (None, Some(e.clone())),
        None => (None, None),
    };
    let manifest = RunManifest {
        run_id: summary.run_id.clone(),
        method: run.method,
        seed: run.seed,
        config: run.config.clone(),
        metrics_path: METRICS_FILE.into(),
        summary_path: SUMMARY_FILE.into(),
        plot_path: PLOT_FILE.into(),
        allocations_path: ALLOCATIONS_FILE.into(),
        final_domain_accuracies: summary.domain_accuracies.clone(),
        average_accuracy: summary.average_accuracy,
        gamma_star: summary.gamma_star,
        bound_inputs: run.bound_inputs.clone(),
        bound,
        bound_error,
        bound_constants_note: "h, sigma2 and delta2 are empirical proxies probed at the initial model",
        started_at_unix: run.started_at,
        finished_at_unix: run.finished_at,
        version: env!("CARGO_PKG_VERSION"),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn run_dir(root: &Path, method: Method, seed: u64) -> PathBuf {
    root.join(method.name()).join(format!("seed-{seed}"))
}

/// Runs and emits one (method, seed) cell under `root`.
pub fn run_cell(cfg: &ExperimentConfig, method: Method, seed: u64, root: &Path) -> Result<(RunOutput, RunManifest)> {
    let dir = run_dir(root, method, seed);
    let opts = RunOptions {
        checkpoint_dir: Some(dir.join("checkpoints")),
        resume: None,
    };
    let run = run_experiment(cfg, method, seed, &opts)?;
    let manifest = emit_metrics(&dir, &run)?;
    Ok((run, manifest))
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub method: Method,
    /// Per-domain (mean, std) of final accuracy over seeds, then the average.
    pub domains: Vec<(f64, f64)>,
    pub average: (f64, f64),
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, method: Method) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    fn header(&self) -> Vec<String> {
        let domains = self.rows.first().map_or(0, |r| r.domains.len());
        let mut h = vec!["method".to_string()];
        h.extend((0..domains).map(|d| format!("domain{d}")));
        h.push("Average".into());
        h
    }

    fn cells(row: &ComparisonRow) -> Vec<String> {
        let fmt = |(m, s): (f64, f64)| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s);
        let mut c = vec![row.method.name().to_string()];
        c.extend(row.domains.iter().map(|&d| fmt(d)));
        c.push(fmt(row.average));
        c
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for r in &self.rows {
            w.write_record(Self::cells(r))?;
        }
        w.flush().map_err(|e| Error::Io {
            path: PathBuf::from("comparison.csv"),
            source: e,
        })
    }

    pub fn to_markdown(&self) -> String {
        let header = self.header();
        let mut s = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
        for r in &self.rows {
            s.push_str(&format!("| {} |\n", Self::cells(r).join(" | ")));
        }
        s
    }
}

pub fn comparison_table(runs: &[RunOutput]) -> ComparisonTable {
    let mut methods: Vec<Method> = Vec::new();
    for r in runs {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    let rows = methods
        .into_iter()
        .map(|m| {
            let cells: Vec<&RunOutput> = runs.iter().filter(|r| r.method == m).collect();
            let domains = cells[0].final_accuracies().len();
            let per_domain = (0..domains)
                .map(|d| mean_std(&cells.iter().map(|r| r.final_accuracies()[d]).collect::<Vec<_>>()))
                .collect();
            ComparisonRow {
                method: m,
                domains: per_domain,
                average: mean_std(&cells.iter().map(|r| r.average_accuracy()).collect::<Vec<_>>()),
                seeds: cells.iter().map(|r| r.seed).collect(),
            }
        })
        .collect();
    ComparisonTable { rows }
}

/// Runs every (method, seed) cell of `cfg` on `workers` threads and writes
/// the per-cell outputs plus `comparison.csv`, `comparison.md` and a
/// seed-averaged `plot.csv` under `root`.
pub fn run_sweep(cfg: &ExperimentConfig, root: &Path, workers: usize) -> Result<(Vec<RunOutput>, ComparisonTable)> {
    cfg.validate()?;
    let cells: Vec<(Method, u64)> = cfg
        .methods
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let runs: Vec<RunOutput> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(m, s)| run_cell(cfg, m, s, root).map(|(run, _)| run))
            .collect::<Result<_>>()
    })?;

    let table = comparison_table(&runs);
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let path = root.join("comparison.csv");
    table.write_csv(create(&path)?)?;
    let path = root.join("comparison.md");
    fs::write(&path, table.to_markdown()).map_err(|e| Error::io(&path, e))?;

    let series: Vec<(Method, Vec<f64>)> = table
        .rows
        .iter()
        .map(|row| {
            let cells: Vec<&RunOutput> = runs.iter().filter(|r| r.method == row.method).collect();
            let t = cells[0].history.len();
            let avg = (0..t)
                .map(|k| cells.iter().map(|r| r.history[k].average_accuracy).sum::<f64>() / cells.len() as f64)
                .collect();
            (row.method, avg)
        })
        .collect();
    let path = root.join(PLOT_FILE);
    write_plot_csv(create(&path)?, &series)?;
    Ok((runs, table))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubsetRun {
    pub subset_size: usize,
    pub seed: u64,
    pub epochs: Vec<SubsetEpoch>,
}

impl SubsetRun {
    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.accuracy)
    }
}

/// Single-machine random-subset training on the pooled train split of every
/// domain, evaluated on the pooled test split.
pub fn run_subset_convergence(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<SubsetRun>> {
    cfg.validate()?;
    let mut data_rng = derive_rng(seed, &[stream::DATA]);
    let corpus = make_synthetic_domains(&cfg.scenario.data, &mut data_rng)?;
    let train = LabeledDataset::concat(&corpus.train.iter().collect::<Vec<_>>())?;
    let test = LabeledDataset::concat(&corpus.test.iter().collect::<Vec<_>>())?;
    let round_cfg = cfg.round_config(Method::FedRA);
    cfg.subset
        .sizes
        .par_iter()
        .map(|&k| {
            let mut model = StackModel::build(&cfg.model, seed)?;
            let epochs = run_subset_training(&mut model, &train, &test, k, cfg.subset.epochs, &round_cfg, seed)?;
            Ok(SubsetRun {
                subset_size: k,
                seed,
                epochs,
            })
        })
        .collect()
}

/// Median final accuracy per subset size over seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubsetTrend {
    pub sizes: Vec<usize>,
    pub medians: Vec<f64>,
    /// Every run ended with a lower training loss than its first epoch and
    /// above-chance accuracy.
    pub converged: bool,
    pub runs: Vec<SubsetRun>,
}

impl SubsetTrend {
    pub fn non_decreasing(&self) -> bool {
        self.medians.windows(2).all(|w| w[1] >= w[0])
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn subset_trend(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<SubsetTrend> {
    let mut runs = Vec::new();
    for &s in seeds {
        runs.extend(run_subset_convergence(cfg, s)?);
    }
    let chance = 1.0 / cfg.model.classes as f64;
    let converged = runs.iter().all(|r| {
        let first = r.epochs.first().map_or(f64::INFINITY, |e| e.train_loss);
        let last = r.epochs.last().map_or(f64::INFINITY, |e| e.train_loss);
        last < first && r.final_accuracy() > 1.5 * chance
    });
    let medians = cfg
        .subset
        .sizes
        .iter()
        .map(|&k| {
            let finals: Vec<f64> = runs
                .iter()
                .filter(|r| r.subset_size == k)
                .map(SubsetRun::final_accuracy)
                .collect();
            median(&finals)
        })
        .collect();
    Ok(SubsetTrend {
        sizes: cfg.subset.sizes.clone(),
        medians,
        converged,
        runs,
    })
}

pub fn write_subset_csv<W: Write>(out: W, runs: &[SubsetRun]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["subset_size", "seed", "epoch", "train_loss", "accuracy", "loss"])?;
    for r in runs {
        for e in &r.epochs {
            w.write_record([
                r.subset_size.to_string(),
                r.seed.to_string(),
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.accuracy.to_string(),
                e.loss.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::Io {
        path: PathBuf::from("subset.csv"),
        source: e,
    })
}

/// Dumps the corpus, the client partition and the allocation sequence the
/// configured method would draw (no training is run).
pub fn export(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (corpus, scenario) = build_scenario(cfg, seed)?;
    let corpus_path = dir.join("corpus.csv");
    write_corpus_csv(&corpus_path, &corpus)?;

    let part_path = dir.join("partition.csv");
    let mut w = csv::Writer::from_writer(create(&part_path)?);
    w.write_record(["client", "domain", "capacity", "train_index"])?;
    for (c, ix) in scenario.clients.iter().zip(&scenario.train_indices) {
        for i in ix {
            w.write_record([c.id.to_string(), c.domain.to_string(), c.capacity.to_string(), i.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(&part_path, e))?;

    let round_cfg = cfg.round_config(cfg.method);
    let mut history = Vec::with_capacity(cfg.training.rounds);
    let mut clients = Vec::with_capacity(cfg.training.rounds);
    for t in 0..cfg.training.rounds {
        let (p, m) = round_allocation(&scenario, &round_cfg, cfg.model.layers, seed, t)?;
        clients.push(p);
        history.push(m);
    }
    let alloc_path = dir.join(ALLOCATIONS_FILE);
    write_allocation_csv(create(&alloc_path)?, &history, Some(&clients))?;
    Ok(vec![corpus_path, part_path, alloc_path])
}

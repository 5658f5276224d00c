//! Experiment orchestration: configs, trial seeding, the LQR and driving
//! experiments, aggregation, controller evaluation, the Wilcoxon signed-rank
//! test and provenance-stamped exports.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::fl::{run_scheme, ClientData, FlConfig, RoundReport, Task, TrainingScheme};
use crate::forecast::{samples_from_episode, CvaeConfig, CvaeForecaster, CvaeTask, SequenceSample};
use crate::lqr::{generate_fleet, lqr_loss, param_distance, LinSystem, LqrFleetConfig, LqrRobotData, LqrTask, Transition};
use crate::params::ParamVector;
use crate::rng::derive_seed;
use crate::sim::{
    generate_initial_states, run_episode, DriverParams, Episode, EpisodeConfig, Forecaster, InitRanges,
    NaiveForecaster, Scenario,
};

/// Version string baked in at build time (`<crate version>+<git describe>`).
pub const VERSION: &str = env!("FEDFLEET_VERSION");

const SEED_TRIAL: u64 = 0x7472_6961;
const SEED_DATA: u64 = 0;
const SEED_TRAIN: u64 = 1;
const SEED_EVAL: u64 = 2;
const SEED_CONTROLLER: u64 = 3;

/// Seed of trial `trial`: `derive_seed(master, [SEED_TRIAL, trial])`. Each
/// trial then splits its seed into data, training and evaluation streams.
pub fn trial_seed(master: u64, trial: usize) -> u64 {
    derive_seed(master, &[SEED_TRIAL, trial as u64])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Lqr,
    LaneSwap,
    LaneChange,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Lqr => "lqr",
            TaskKind::LaneSwap => "lane-swap",
            TaskKind::LaneChange => "lane-change",
        }
    }

    pub fn scenario(self) -> Option<Scenario> {
        match self {
            TaskKind::Lqr => None,
            TaskKind::LaneSwap => Some(Scenario::LaneSwap),
            TaskKind::LaneChange => Some(Scenario::LaneChange),
        }
    }

    /// Metric names every record of this task carries.
    pub fn metric_names(self) -> &'static [&'static str] {
        match self {
            TaskKind::Lqr => &LQR_METRICS,
            _ => &DRIVING_METRICS,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [TaskKind::Lqr, TaskKind::LaneSwap, TaskKind::LaneChange]
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task '{s}'")))
    }
}

pub const LQR_METRICS: [&str; 5] = ["state_loss", "control_loss", "total_loss", "dynamics_distance", "control_distance"];
pub const DRIVING_METRICS: [&str; 1] = ["test_elbo"];

/// Synthetic-driver dataset settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrivingConfig {
    /// One client per risk tolerance.
    pub gammas: Vec<f64>,
    /// Sessions per driver; every driver sees the same initial states.
    pub sessions: usize,
    /// Trailing sessions held out for testing.
    pub test_sessions: usize,
    /// Step between consecutive training windows within an episode.
    pub stride: usize,
    pub ranges: InitRanges,
    pub episode: EpisodeConfig,
    /// Template driver; `gamma` is replaced per client.
    pub driver: DriverParams,
}

impl Default for DrivingConfig {
    fn default() -> Self {
        Self {
            gammas: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
            sessions: 50,
            test_sessions: 10,
            stride: 6,
            ranges: InitRanges::default(),
            episode: EpisodeConfig::default(),
            driver: DriverParams::default(),
        }
    }
}

/// Closed-loop controller evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub inits: usize,
    pub ranges: InitRanges,
    /// Scheme whose personalized forecasters are evaluated.
    pub scheme: TrainingScheme,
    /// Trial whose checkpoints are evaluated.
    pub trial: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            inits: 9,
            ranges: InitRanges::challenging(),
            scheme: TrainingScheme::Apfl,
            trial: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub schemes: Vec<TrainingScheme>,
    pub trials: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Run scheme × trial units on the rayon pool. Results do not depend on it.
    pub parallel_trials: bool,
    /// Draw a fresh dataset per trial. When false every trial trains on the
    /// dataset drawn from the master seed and only training seeds vary.
    pub resample_data: bool,
    pub fl: FlConfig,
    pub lqr: LqrFleetConfig,
    pub driving: DrivingConfig,
    pub cvae: CvaeConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(TaskKind::Lqr)
    }
}

impl ExperimentConfig {
    /// Defaults for a task. The LQR preset trains 5 rounds of 30 epochs with
    /// batch 256 on a fresh dataset per trial. The driving presets compare
    /// Cloud/SFL/SPFL/APFL over 5 training seeds on one dataset, 3 rounds.
    pub fn preset(task: TaskKind) -> Self {
        let resample_data = task == TaskKind::Lqr;
        let (schemes, trials, fl) = match task {
            TaskKind::Lqr => (
                TrainingScheme::ALL.to_vec(),
                10,
                FlConfig { rounds: 5, epochs: 30, batch_size: 256, base_lr: 0.01, ..FlConfig::default() },
            ),
            _ => (
                vec![TrainingScheme::Cloud, TrainingScheme::Sfl, TrainingScheme::Spfl, TrainingScheme::Apfl],
                5,
                FlConfig { rounds: 3, epochs: 30, batch_size: 32, base_lr: 0.001, ..FlConfig::default() },
            ),
        };
        Self {
            task,
            schemes,
            trials,
            seed: 0,
            output_dir: PathBuf::from(format!("out/{}", task.as_str())),
            parallel_trials: true,
            resample_data,
            fl,
            lqr: LqrFleetConfig::default(),
            driving: DrivingConfig::default(),
            cvae: CvaeConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Parse TOML. Missing keys take the preset of the file's `task`.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse()?;
        let task = match user.get("task") {
            None => TaskKind::Lqr,
            Some(toml::Value::String(s)) => s.parse()?,
            Some(v) => return Err(Error::Config(format!("task must be a string, got {v}"))),
        };
        let mut base = toml::Table::try_from(Self::preset(task)).map_err(|e| Error::Serde(e.to_string()))?;
        merge_toml(&mut base, user);
        let config: Self = toml::Value::Table(base).try_into()?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| e.context(path.display()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if self.schemes.is_empty() {
            return Err(Error::Config("at least one scheme is required".into()));
        }
        self.fl.validate()?;
        match self.task {
            TaskKind::Lqr => {
                if self.lqr.r_values.is_empty() {
                    return Err(Error::Config("lqr.r_values must not be empty".into()));
                }
                if !(self.lqr.test_fraction > 0.0 && self.lqr.test_fraction < 1.0) {
                    return Err(Error::Config("lqr.test_fraction must be in (0, 1)".into()));
                }
            }
            _ => {
                self.cvae.validate()?;
                self.driving.episode.mpc.validate()?;
                let d = &self.driving;
                if d.gammas.is_empty() {
                    return Err(Error::Config("driving.gammas must not be empty".into()));
                }
                if d.test_sessions == 0 || d.test_sessions >= d.sessions {
                    return Err(Error::Config("driving.test_sessions must be in [1, sessions)".into()));
                }
                if d.stride == 0 {
                    return Err(Error::Config("driving.stride must be >= 1".into()));
                }
                if d.episode.mpc.tau != self.cvae.horizon {
                    return Err(Error::Config(format!(
                        "cvae.horizon ({}) must equal the planner interval tau ({})",
                        self.cvae.horizon, d.episode.mpc.tau
                    )));
                }
                if self.eval.inits == 0 {
                    return Err(Error::Config("eval.inits must be >= 1".into()));
                }
            }
        }
        if self.schemes.contains(&TrainingScheme::Apfl) && self.num_clients() < 2 {
            return Err(Error::Config("APFL needs at least two clients".into()));
        }
        Ok(())
    }

    pub fn num_clients(&self) -> usize {
        match self.task {
            TaskKind::Lqr => self.lqr.r_values.len(),
            _ => self.driving.gammas.len(),
        }
    }

    /// Hex SHA-256 (first 16 digits) of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn merge_toml(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_toml(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Stamp written into every output file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
}

impl Provenance {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            version: VERSION.to_string(),
            seed: config.seed,
            config_hash: config.hash(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("provenance serializes")
    }
}

/// Metrics of one client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client: usize,
    pub metrics: BTreeMap<String, f64>,
}

/// Per-client metrics of one scheme in one trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub task: TaskKind,
    pub scheme: TrainingScheme,
    pub trial: usize,
    pub clients: Vec<ClientMetrics>,
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        let expected = self.task.metric_names();
        if self.clients.is_empty() {
            return Err(Error::Contract(format!("{} trial {} has no clients", self.scheme, self.trial)));
        }
        for c in &self.clients {
            if c.metrics.len() != expected.len() || expected.iter().any(|m| !c.metrics.contains_key(*m)) {
                return Err(Error::Contract(format!(
                    "record metrics {:?} do not match the {} schema {:?}",
                    c.metrics.keys().collect::<Vec<_>>(),
                    self.task,
                    expected
                )));
            }
            if let Some((k, v)) = c.metrics.iter().find(|(_, v)| !v.is_finite()) {
                return Err(Error::Numeric(format!("{k} = {v} for {} trial {} client {}", self.scheme, self.trial, c.client)));
            }
        }
        Ok(())
    }

    /// Mean of a metric over clients.
    pub fn client_mean(&self, metric: &str) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.clients.iter().map(|c| c.metrics.get(metric).copied()).collect();
        let vals = vals?;
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// One round report tagged with its trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub trial: usize,
    #[serde(flatten)]
    pub report: RoundReport,
}

/// Models trained by one scheme in one trial.
#[derive(Clone, Debug)]
pub struct TrainedModels {
    pub scheme: TrainingScheme,
    pub trial: usize,
    pub personalized: Vec<ParamVector>,
    pub global: Option<ParamVector>,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentResult {
    /// Sorted by (scheme, trial, client).
    pub records: Vec<MetricsRecord>,
    /// Sorted by (scheme, trial, round).
    pub rounds: Vec<RoundRecord>,
    /// Sorted by (scheme, trial).
    pub models: Vec<TrainedModels>,
}

impl ExperimentResult {
    pub fn models_for(&self, scheme: TrainingScheme, trial: usize) -> Option<&TrainedModels> {
        self.models.iter().find(|m| m.scheme == scheme && m.trial == trial)
    }
}

/// The LQR clients of one trial.
/// Seed of the dataset used by `trial`.
pub fn data_seed(config: &ExperimentConfig, trial: usize) -> u64 {
    if config.resample_data {
        derive_seed(trial_seed(config.seed, trial), &[SEED_DATA])
    } else {
        derive_seed(config.seed, &[SEED_DATA])
    }
}

pub fn lqr_fleet(config: &ExperimentConfig, trial: usize) -> Result<Vec<LqrRobotData>> {
    generate_fleet(&config.lqr, data_seed(config, trial))
}

pub fn lqr_clients(fleet: &[LqrRobotData]) -> Vec<ClientData<Transition>> {
    fleet
        .iter()
        .map(|r| ClientData { id: r.robot_id, train: r.train.clone(), test: r.test.clone() })
        .collect()
}

/// Episodes of one synthetic driver over shared initial states.
#[derive(Clone, Debug)]
pub struct DriverSessions {
    pub client: usize,
    pub gamma: f64,
    pub episodes: Vec<Episode>,
}

/// Simulate every driver on `sessions` shared initial states with the
/// naive-forecaster MPC robot. Returned in client order.
pub fn driving_sessions(config: &ExperimentConfig, seed: u64) -> Result<Vec<DriverSessions>> {
    let scenario = config
        .task
        .scenario()
        .ok_or_else(|| Error::Config("driving data needs a driving task".into()))?;
    let d = &config.driving;
    let inits = generate_initial_states(d.sessions, scenario, &d.ranges, &d.episode.geometry, derive_seed(seed, &[0]))?;
    let jobs: Vec<(usize, usize)> = (0..d.gammas.len()).flat_map(|k| (0..inits.len()).map(move |i| (k, i))).collect();
    let episodes: Vec<Episode> = jobs
        .par_iter()
        .map(|&(k, i)| {
            let driver = DriverParams { gamma: d.gammas[k], ..d.driver.clone() };
            run_episode(&inits[i], &NaiveForecaster, &driver, &d.episode, config.cvae.window, derive_seed(seed, &[1, k as u64, i as u64]))
                .map_err(|e| e.context(format_args!("driver {k} session {i}")))
        })
        .collect::<Result<_>>()?;
    let mut it = episodes.into_iter();
    Ok(d
        .gammas
        .iter()
        .enumerate()
        .map(|(k, &gamma)| DriverSessions { client: k, gamma, episodes: it.by_ref().take(inits.len()).collect() })
        .collect())
}

/// Cut sessions into CVAE samples; the last `test_sessions` sessions of
/// every driver form the test split.
pub fn driving_clients(config: &ExperimentConfig, sessions: &[DriverSessions]) -> Result<Vec<ClientData<SequenceSample>>> {
    let d = &config.driving;
    sessions
        .iter()
        .map(|s| {
            let cut = s.episodes.len().saturating_sub(d.test_sessions);
            let collect = |eps: &[Episode]| -> Result<Vec<SequenceSample>> {
                let mut out = Vec::new();
                for ep in eps {
                    out.extend(samples_from_episode(ep, &config.cvae, d.stride)?);
                }
                Ok(out)
            };
            Ok(ClientData { id: s.client, train: collect(&s.episodes[..cut])?, test: collect(&s.episodes[cut..])? })
        })
        .collect()
}

/// Driving clients of one trial.
pub fn driving_trial_clients(config: &ExperimentConfig, trial: usize) -> Result<Vec<ClientData<SequenceSample>>> {
    let sessions = driving_sessions(config, data_seed(config, trial))?;
    driving_clients(config, &sessions)
}

/// One line of a driving dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrivingSampleRecord {
    pub client: usize,
    pub gamma: f64,
    pub split: String,
    pub index: usize,
    pub sample: SequenceSample,
}

pub fn driving_sample_records(config: &ExperimentConfig, clients: &[ClientData<SequenceSample>]) -> Vec<DrivingSampleRecord> {
    let mut out = Vec::new();
    for c in clients {
        let gamma = config.driving.gammas[c.id];
        for (split, data) in [("train", &c.train), ("test", &c.test)] {
            out.extend(data.iter().enumerate().map(|(index, s)| DrivingSampleRecord {
                client: c.id,
                gamma,
                split: split.to_string(),
                index,
                sample: s.clone(),
            }));
        }
    }
    out
}

enum TrialData {
    Lqr(Vec<ClientData<Transition>>, Vec<[f64; 2]>),
    Driving(Vec<ClientData<SequenceSample>>),
}

struct UnitOutput {
    record: MetricsRecord,
    rounds: Vec<RoundRecord>,
    models: TrainedModels,
}

fn run_unit(config: &ExperimentConfig, data: &TrialData, scheme: TrainingScheme, trial: usize) -> Result<UnitOutput> {
    let seed = trial_seed(config.seed, trial);
    let train_seed = derive_seed(seed, &[SEED_TRAIN]);
    let eval_seed = derive_seed(seed, &[SEED_EVAL]);
    let record = |client: usize, metrics: BTreeMap<String, f64>| ClientMetrics { client, metrics };
    let (outcome, clients) = match data {
        TrialData::Lqr(clients, k_true) => {
            let outcome = run_scheme(&LqrTask, clients, scheme, &config.fl, train_seed)?;
            let sys = LinSystem::point_mass();
            let mut records = Vec::new();
            for ((c, m), k) in clients.iter().zip(&outcome.personalized).zip(k_true) {
                let loss = lqr_loss(m, &c.test)?;
                let (dyn_d, ctl_d) = param_distance(m, &sys, *k)?;
                let metrics = BTreeMap::from([
                    ("state_loss".to_string(), loss.state),
                    ("control_loss".to_string(), loss.control),
                    ("total_loss".to_string(), loss.total),
                    ("dynamics_distance".to_string(), dyn_d),
                    ("control_distance".to_string(), ctl_d),
                ]);
                records.push(record(c.id, metrics));
            }
            (outcome, records)
        }
        TrialData::Driving(clients) => {
            let task = CvaeTask::new(config.cvae.clone())?;
            let outcome = run_scheme(&task, clients, scheme, &config.fl, train_seed)?;
            let mut records = Vec::new();
            for (c, m) in clients.iter().zip(&outcome.personalized) {
                let elbo = task.eval_loss(m, &c.test, derive_seed(eval_seed, &[c.id as u64]))?;
                records.push(record(c.id, BTreeMap::from([("test_elbo".to_string(), elbo)])));
            }
            (outcome, records)
        }
    };
    let record = MetricsRecord { task: config.task, scheme, trial, clients };
    record.validate()?;
    Ok(UnitOutput {
        record,
        rounds: outcome.history.into_iter().map(|report| RoundRecord { trial, report }).collect(),
        models: TrainedModels { scheme, trial, personalized: outcome.personalized, global: outcome.global },
    })
}

fn trial_data(config: &ExperimentConfig, trial: usize) -> Result<TrialData> {
    match config.task {
        TaskKind::Lqr => {
            let fleet = lqr_fleet(config, trial)?;
            Ok(TrialData::Lqr(lqr_clients(&fleet), fleet.iter().map(|r| r.k_true).collect()))
        }
        _ => driving_trial_clients(config, trial).map(TrialData::Driving),
    }
}

/// Run every scheme × trial unit. Units that succeed are returned even when
/// others fail; the first failure (in scheme, trial order) is returned
/// alongside with its context.
pub fn run_experiment_partial(config: &ExperimentConfig) -> (ExperimentResult, Option<Error>) {
    if let Err(e) = config.validate() {
        return (ExperimentResult::default(), Some(e));
    }
    let trials: Vec<usize> = (0..config.trials).collect();
    let datasets = if config.resample_data { config.trials } else { 1 };
    let data: Vec<Result<TrialData>> = if config.parallel_trials {
        (0..datasets).into_par_iter().map(|t| trial_data(config, t)).collect()
    } else {
        (0..datasets).map(|t| trial_data(config, t)).collect()
    };
    let mut schemes = config.schemes.clone();
    schemes.sort();
    schemes.dedup();
    let units: Vec<(TrainingScheme, usize)> = schemes.iter().flat_map(|&s| trials.iter().map(move |&t| (s, t))).collect();
    let run = |&(scheme, trial): &(TrainingScheme, usize)| -> Result<UnitOutput> {
        let d = data[trial.min(datasets - 1)].as_ref().map_err(|e| e.clone().context("dataset"))?;
        run_unit(config, d, scheme, trial)
    };
    let outputs: Vec<Result<UnitOutput>> = if config.parallel_trials {
        units.par_iter().map(run).collect()
    } else {
        units.iter().map(run).collect()
    };
    let mut result = ExperimentResult::default();
    let mut first_error = None;
    for ((scheme, trial), out) in units.into_iter().zip(outputs) {
        match out {
            Ok(u) => {
                result.records.push(u.record);
                result.rounds.extend(u.rounds);
                result.models.push(u.models);
            }
            Err(e) => {
                if first_error.is_none() {
                    first_error = Some(e.context(format_args!("scheme {scheme} trial {trial}")));
                }
            }
        }
    }
    (result, first_error)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    match run_experiment_partial(config) {
        (r, None) => Ok(r),
        (_, Some(e)) => Err(e),
    }
}

/// Mean and across-trial spread of one metric for one scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub scheme: TrainingScheme,
    pub metric: String,
    /// Mean over trials of the per-trial client mean.
    pub mean: f64,
    /// Sample standard deviation of the per-trial means (0 for one trial).
    pub std: f64,
    pub trials: usize,
}

/// Aggregate records per (scheme, metric), sorted by both.
pub fn aggregate(records: &[MetricsRecord]) -> Vec<AggregateRow> {
    let mut per_trial: BTreeMap<(TrainingScheme, String), BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for r in records {
        for c in &r.clients {
            for (m, v) in &c.metrics {
                let e = per_trial.entry((r.scheme, m.clone())).or_default().entry(r.trial).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
    }
    per_trial
        .into_iter()
        .map(|((scheme, metric), trials)| {
            let means: Vec<f64> = trials.values().map(|(s, n)| s / *n as f64).collect();
            let (mean, std) = mean_std(&means);
            AggregateRow { scheme, metric, mean, std, trials: means.len() }
        })
        .collect()
}

/// Mean and sample standard deviation (0 when fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Metric × scheme table of aggregate means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub metrics: Vec<String>,
    pub schemes: Vec<TrainingScheme>,
    /// `cells[i][j]` is the mean of `metrics[i]` under `schemes[j]`.
    pub cells: Vec<Vec<f64>>,
}

impl Table {
    pub fn from_aggregates(rows: &[AggregateRow], metrics: &[&str], schemes: &[TrainingScheme]) -> Result<Self> {
        let cells = metrics
            .iter()
            .map(|m| {
                schemes
                    .iter()
                    .map(|s| {
                        rows.iter()
                            .find(|r| r.scheme == *s && r.metric == *m)
                            .map(|r| r.mean)
                            .ok_or_else(|| Error::Contract(format!("no aggregate for {s} / {m}")))
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        Ok(Self { metrics: metrics.iter().map(|m| m.to_string()).collect(), schemes: schemes.to_vec(), cells })
    }

    pub fn get(&self, metric: &str, scheme: TrainingScheme) -> Option<f64> {
        let i = self.metrics.iter().position(|m| m == metric)?;
        let j = self.schemes.iter().position(|s| *s == scheme)?;
        Some(self.cells[i][j])
    }

    pub fn data_cells(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }
}

/// The loss table of the LQR experiment: 3 losses × the configured schemes.
pub fn lqr_loss_table(records: &[MetricsRecord], schemes: &[TrainingScheme]) -> Result<Table> {
    Table::from_aggregates(&aggregate(records), &["state_loss", "control_loss", "total_loss"], schemes)
}

/// Outcome of one closed-loop evaluation episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerRecord {
    pub controller: String,
    pub driver: usize,
    pub gamma: f64,
    pub init: usize,
    pub commence_time: Option<f64>,
    pub commence_distance: Option<f64>,
    pub mean_cost: f64,
    pub collision: bool,
    pub completed: bool,
}

/// Evaluation initial states for a driving config.
pub fn eval_inits(config: &ExperimentConfig) -> Result<Vec<crate::sim::WorldState>> {
    let scenario = config
        .task
        .scenario()
        .ok_or_else(|| Error::Config("controller evaluation needs a driving task".into()))?;
    generate_initial_states(
        config.eval.inits,
        scenario,
        &config.eval.ranges,
        &config.driving.episode.geometry,
        derive_seed(config.seed, &[SEED_CONTROLLER, 0]),
    )
}

/// Run the evaluation suite with one forecaster per driver (a single
/// forecaster is shared by all drivers). Records are in (driver, init) order;
/// episode seeds depend only on (driver, init), so controllers are paired.
pub fn evaluate_controller(
    config: &ExperimentConfig,
    label: &str,
    forecasters: &[&dyn Forecaster],
) -> Result<Vec<(ControllerRecord, Episode)>> {
    let gammas = &config.driving.gammas;
    if forecasters.len() != 1 && forecasters.len() != gammas.len() {
        return Err(Error::Config(format!(
            "need 1 or {} forecasters, got {}",
            gammas.len(),
            forecasters.len()
        )));
    }
    let inits = eval_inits(config)?;
    let jobs: Vec<(usize, usize)> = (0..gammas.len()).flat_map(|k| (0..inits.len()).map(move |i| (k, i))).collect();
    jobs.par_iter()
        .map(|&(k, i)| {
            let driver = DriverParams { gamma: gammas[k], ..config.driving.driver.clone() };
            let f = forecasters[if forecasters.len() == 1 { 0 } else { k }];
            let seed = derive_seed(config.seed, &[SEED_CONTROLLER, 1, k as u64, i as u64]);
            let ep = run_episode(&inits[i], f, &driver, &config.driving.episode, config.cvae.window, seed)
                .map_err(|e| e.context(format_args!("{label} driver {k} init {i}")))?;
            let rec = ControllerRecord {
                controller: label.to_string(),
                driver: k,
                gamma: gammas[k],
                init: i,
                commence_time: ep.commence_time,
                commence_distance: ep.commence_distance,
                mean_cost: ep.mean_cost,
                collision: ep.collision,
                completed: ep.completed,
            };
            Ok((rec, ep))
        })
        .collect()
}

/// Forecasters built from one scheme's personalized models.
pub fn forecasters_from(config: &ExperimentConfig, models: &[ParamVector]) -> Result<Vec<CvaeForecaster>> {
    models.iter().map(|p| CvaeForecaster::new(config.cvae.clone(), p.clone())).collect()
}

/// Summary of a controller over an evaluation suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerSummary {
    pub controller: String,
    pub episodes: usize,
    pub median_mean_cost: f64,
    pub collisions: usize,
    pub completed: usize,
    /// Mean over episodes that commenced the lane change.
    pub mean_commence_time: Option<f64>,
    pub mean_commence_distance: Option<f64>,
}

pub fn summarize_controller(records: &[ControllerRecord]) -> Result<ControllerSummary> {
    let first = records.first().ok_or_else(|| Error::Contract("no controller records".into()))?;
    let mut costs: Vec<f64> = records.iter().map(|r| r.mean_cost).collect();
    let mean_of = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    Ok(ControllerSummary {
        controller: first.controller.clone(),
        episodes: records.len(),
        median_mean_cost: median(&mut costs),
        collisions: records.iter().filter(|r| r.collision).count(),
        completed: records.iter().filter(|r| r.completed).count(),
        mean_commence_time: mean_of(records.iter().filter_map(|r| r.commence_time).collect()),
        mean_commence_distance: mean_of(records.iter().filter_map(|r| r.commence_distance).collect()),
    })
}

pub fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Largest sample size tested by exact enumeration.
pub const WILCOXON_EXACT_MAX: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Pairs left after dropping zero differences.
    pub n: usize,
    /// min(W+, W-).
    pub w: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    pub exact: bool,
}

/// Nonzero differences `a - b` and their mid-ranks by absolute value.
fn signed_ranks(a: &[f64], b: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Contract("Wilcoxon test needs at least one pair".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite paired difference".into()));
    }
    let mut d: Vec<f64> = d.into_iter().filter(|x| *x != 0.0).collect();
    if d.is_empty() {
        return Err(Error::UndefinedTest("all paired differences are zero".into()));
    }
    d.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let mut ranks = vec![0.0; d.len()];
    let mut i = 0;
    while i < d.len() {
        let mut j = i;
        while j + 1 < d.len() && d[j + 1].abs() == d[i].abs() {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        ranks[i..=j].fill(mid);
        i = j + 1;
    }
    Ok((d, ranks))
}

/// Wilcoxon signed-rank test of paired samples.
///
/// Zero differences are dropped and tied magnitudes get mid-ranks. Up to
/// [`WILCOXON_EXACT_MAX`] pairs the two-sided p-value is exact: twice the
/// fraction of the 2^n sign assignments whose W+ is at most min(W+, W-),
/// capped at 1. Larger samples use the normal approximation with tie
/// correction and a continuity correction of 1/2.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    let (d, ranks) = signed_ranks(a, b)?;
    let n = d.len();
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let w = w_plus.min(w_minus);
    let (p_value, exact) = if n <= WILCOXON_EXACT_MAX {
        // Mid-ranks are multiples of 1/2, so doubled rank sums are integers.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max_sum: usize = doubled.iter().sum();
        let mut counts = vec![0u64; max_sum + 1];
        counts[0] = 1;
        for &r in &doubled {
            for s in (r..=max_sum).rev() {
                counts[s] += counts[s - r];
            }
        }
        let limit = (2.0 * w).round() as usize;
        let tail: u64 = counts[..=limit].iter().sum();
        (exact_two_sided(tail, n), true)
    } else {
        (normal_p(w_plus, &ranks), false)
    };
    Ok(WilcoxonResult { n, w, w_plus, w_minus, p_value, exact })
}

/// Normal approximation with tie and continuity corrections. `ranks` must
/// be sorted ascending.
fn normal_p(w_plus: f64, ranks: &[f64]) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
    for tie in ranks.chunk_by(|a, b| a == b) {
        let t = tie.len() as f64;
        var -= (t * t * t - t) / 48.0;
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    (2.0 * Normal::standard().sf(z)).clamp(f64::MIN_POSITIVE, 1.0)
}

/// `min(1, 2 * tail / 2^n)`, the exact two-sided p from a one-tail count.
pub fn exact_two_sided(tail: u64, n: usize) -> f64 {
    (2.0 * tail as f64 / (n as f64).exp2()).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Json,
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "json" | "jsonl" => Ok(ExportFormat::Json),
            _ => Err(Error::Config(format!("unknown export format '{s}' (expected csv or json)"))),
        }
    }
}

/// A JSON Lines record with the provenance stamp inlined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub provenance: Provenance,
    #[serde(flatten)]
    pub record: T,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Write one stamped JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T], provenance: &Provenance) -> Result<()> {
    let mut w = create(path)?;
    for r in records {
        let line = serde_json::to_string(&Stamped { provenance: provenance.clone(), record: r })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a JSON Lines file written by [`write_jsonl`]. Blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<Stamped<T>>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Serde(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

/// Column order of long-format metric CSVs.
pub const RECORD_COLUMNS: [&str; 9] = ["version", "seed", "config_hash", "task", "scheme", "trial", "client", "metric", "value"];
/// Column order of long-format controller CSVs. Unset commence metrics are omitted.
pub const CONTROLLER_COLUMNS: [&str; 9] =
    ["version", "seed", "config_hash", "controller", "driver", "gamma", "init", "metric", "value"];

fn write_long_csv<I>(path: &Path, header: &[&str], provenance: &Provenance, rows: I) -> Result<()>
where
    I: IntoIterator<Item = [String; 6]>,
{
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header)?;
    let seed = provenance.seed.to_string();
    for row in rows {
        let mut full = vec![provenance.version.as_str(), seed.as_str(), provenance.config_hash.as_str()];
        full.extend(row.iter().map(String::as_str));
        w.write_record(&full)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn value_str(v: f64) -> String {
    format!("{v:?}")
}

/// Export metrics records as long-format CSV or JSON Lines.
pub fn export_records(records: &[MetricsRecord], path: &Path, format: ExportFormat, provenance: &Provenance) -> Result<()> {
    match format {
        ExportFormat::Json => write_jsonl(path, records, provenance),
        ExportFormat::Csv => write_long_csv(
            path,
            &RECORD_COLUMNS,
            provenance,
            records.iter().flat_map(|r| {
                r.clients.iter().flat_map(move |c| {
                    c.metrics.iter().map(move |(m, v)| {
                        [r.task.to_string(), r.scheme.to_string(), r.trial.to_string(), c.client.to_string(), m.clone(), value_str(*v)]
                    })
                })
            }),
        ),
    }
}

/// Export controller records as long-format CSV or JSON Lines.
pub fn export_controller_records(
    records: &[ControllerRecord],
    path: &Path,
    format: ExportFormat,
    provenance: &Provenance,
) -> Result<()> {
    match format {
        ExportFormat::Json => write_jsonl(path, records, provenance),
        ExportFormat::Csv => write_long_csv(
            path,
            &CONTROLLER_COLUMNS,
            provenance,
            records.iter().flat_map(|r| {
                let metrics = [
                    ("commence_time", r.commence_time),
                    ("commence_distance", r.commence_distance),
                    ("mean_cost", Some(r.mean_cost)),
                    ("collision", Some(f64::from(u8::from(r.collision)))),
                    ("completed", Some(f64::from(u8::from(r.completed)))),
                ];
                metrics.into_iter().filter_map(move |(m, v)| {
                    v.map(|v| [r.controller.clone(), r.driver.to_string(), value_str(r.gamma), r.init.to_string(), m.to_string(), value_str(v)])
                })
            }),
        ),
    }
}

/// Export a table as CSV (`metric,<scheme>...`) or as one JSON object.
pub fn export_table(table: &Table, path: &Path, format: ExportFormat, provenance: &Provenance) -> Result<()> {
    match format {
        ExportFormat::Json => {
            let mut w = create(path)?;
            let v = Stamped { provenance: provenance.clone(), record: table };
            serde_json::to_writer_pretty(&mut w, &v)?;
            writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
        }
        ExportFormat::Csv => {
            let mut w = csv::Writer::from_writer(create(path)?);
            let mut header = vec!["version".to_string(), "seed".into(), "config_hash".into(), "metric".into()];
            header.extend(table.schemes.iter().map(|s| s.to_string()));
            w.write_record(&header)?;
            for (m, row) in table.metrics.iter().zip(&table.cells) {
                let mut rec = vec![provenance.version.clone(), provenance.seed.to_string(), provenance.config_hash.clone(), m.clone()];
                rec.extend(row.iter().map(|v| value_str(*v)));
                w.write_record(&rec)?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
    }
}

/// Write a struct or map as pretty JSON with the provenance fields merged in.
pub fn write_json<T: Serialize>(path: &Path, value: &T, provenance: &Provenance) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, &Stamped { provenance: provenance.clone(), record: value })?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Checkpoint file of one client model.
pub fn checkpoint_path(dir: &Path, scheme: TrainingScheme, trial: usize, client: usize) -> PathBuf {
    dir.join("checkpoints").join(scheme.as_str()).join(format!("trial{trial}")).join(format!("client{client}.json"))
}

/// Write a model checkpoint with architecture and provenance attached.
pub fn write_checkpoint(
    path: &Path,
    config: &ExperimentConfig,
    params: &ParamVector,
    provenance: &Provenance,
) -> Result<()> {
    let mut ck = crate::params::Checkpoint::from_params(params, None);
    if config.task != TaskKind::Lqr {
        ck = ck.with_architecture(config.cvae.architecture());
    }
    ck.provenance = Some(provenance.to_json());
    let mut w = create(path)?;
    serde_json::to_writer(&mut w, &ck)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<crate::params::Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_p(d: &[f64]) -> f64 {
        let n = d.len();
        let mut abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
        abs.sort_by(f64::total_cmp);
        let rank = |x: f64| {
            let lo = abs.iter().filter(|a| **a < x).count() as f64;
            let eq = abs.iter().filter(|a| **a == x).count() as f64;
            lo + (eq + 1.0) / 2.0
        };
        let r: Vec<f64> = d.iter().map(|x| rank(x.abs())).collect();
        let obs: f64 = d.iter().zip(&r).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
        let total: f64 = r.iter().sum();
        let w = obs.min(total - obs);
        let tail = (0u32..1 << n)
            .filter(|mask| (0..n).filter(|i| mask >> i & 1 == 1).map(|i| r[i]).sum::<f64>() <= w + 1e-9)
            .count();
        exact_two_sided(tail as u64, n)
    }

    #[test]
    fn five_positive_pairs() {
        let r = wilcoxon_signed_rank(&[2.0, 3.0, 4.0, 5.0, 6.0], &[1.0; 5]).unwrap();
        assert_eq!(r.p_value, 0.0625);
        assert_eq!(r.w, 0.0);
        assert_eq!(r.w_plus, 15.0);
        assert!(r.exact);
    }

    #[test]
    fn single_nonzero_pair() {
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0], &[1.0, 2.0, 5.0]).unwrap();
        assert_eq!(r.n, 1);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn all_zero_is_undefined() {
        let e = wilcoxon_signed_rank(&[1.0, 2.0], &[1.0, 2.0]).unwrap_err();
        assert_eq!(e.kind(), "undefined_test");
        assert!(wilcoxon_signed_rank(&[1.0], &[1.0, 2.0]).is_err());
        assert!(wilcoxon_signed_rank(&[], &[]).is_err());
    }

    #[test]
    fn matches_enumeration_with_ties() {
        let a = [1.0, 2.0, 2.0, -1.0, 3.0, -2.0, 0.5, 0.0];
        let b = [0.0; 8];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        let d: Vec<f64> = a.iter().copied().filter(|x| *x != 0.0).collect();
        assert_eq!(r.n, 7);
        assert_eq!(r.p_value, brute_p(&d));
    }

    #[test]
    fn normal_approximation_is_close_to_exact_at_twenty() {
        let a: Vec<f64> = (1..=20).map(|i| if i % 3 == 0 { -(i as f64) } else { i as f64 }).collect();
        let exact = wilcoxon_signed_rank(&a, &[0.0; 20]).unwrap();
        assert!(exact.exact);
        let (_, ranks) = signed_ranks(&a, &[0.0; 20]).unwrap();
        let approx = normal_p(exact.w_plus, &ranks);
        assert!((approx - exact.p_value).abs() < 0.01, "{approx} vs {}", exact.p_value);

        let a: Vec<f64> = (1..=24).map(|i| if i % 3 == 0 { -(i as f64) } else { i as f64 }).collect();
        let r = wilcoxon_signed_rank(&a, &[0.0; 24]).unwrap();
        assert!(!r.exact);
        // W+ = 192, mean 150, sd 35, tie-free: z = 41.5 / 35.
        assert!((r.p_value - 0.235_74).abs() < 1e-4, "{}", r.p_value);
    }

    #[test]
    fn mean_std_and_median() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    fn record(scheme: TrainingScheme, trial: usize, values: &[f64]) -> MetricsRecord {
        MetricsRecord {
            task: TaskKind::LaneChange,
            scheme,
            trial,
            clients: values
                .iter()
                .enumerate()
                .map(|(client, v)| ClientMetrics { client, metrics: BTreeMap::from([("test_elbo".to_string(), *v)]) })
                .collect(),
        }
    }

    #[test]
    fn aggregate_takes_trial_means_first() {
        let recs = vec![record(TrainingScheme::Apfl, 0, &[1.0, 3.0]), record(TrainingScheme::Apfl, 1, &[4.0, 4.0])];
        assert_eq!(recs[0].client_mean("test_elbo"), Some(2.0));
        let agg = aggregate(&recs);
        assert_eq!(agg.len(), 1);
        assert_eq!(agg[0].mean, 3.0);
        assert_eq!(agg[0].std, 2f64.sqrt());
        assert_eq!(agg[0].trials, 2);
    }

    #[test]
    fn record_schema_is_checked() {
        let mut r = record(TrainingScheme::Sfl, 0, &[1.0]);
        assert!(r.validate().is_ok());
        r.clients[0].metrics.insert("state_loss".into(), 1.0);
        assert!(r.validate().is_err());
        assert!(record(TrainingScheme::Sfl, 0, &[]).validate().is_err());
        let mut r = record(TrainingScheme::Sfl, 0, &[f64::NAN]);
        assert_eq!(r.validate().unwrap_err().kind(), "numeric");
        r.task = TaskKind::Lqr;
        assert_eq!(r.validate().unwrap_err().kind(), "contract");
    }

    #[test]
    fn toml_merges_over_task_preset() {
        let c = ExperimentConfig::from_toml_str("task = \"lane-change\"\ntrials = 2\n[fl]\nrounds = 3\n").unwrap();
        assert_eq!(c.task, TaskKind::LaneChange);
        assert_eq!(c.trials, 2);
        assert_eq!(c.fl.rounds, 3);
        assert_eq!(c.fl.base_lr, 0.001);
        assert_eq!(c.schemes.len(), 4);
        let lqr = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(lqr, ExperimentConfig::preset(TaskKind::Lqr));
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for text in ["trials = 0", "task = \"nope\"", "bogus = 1", "schemes = []"] {
            assert!(ExperimentConfig::from_toml_str(text).is_err(), "{text}");
        }
        assert!(ExperimentConfig::from_toml_str("task = \"lane-swap\"\n[cvae]\nhorizon = 4").is_err());
        assert!(ExperimentConfig::from_toml_str("[lqr]\nr_values = [1.0]").is_err());
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = ExperimentConfig::preset(TaskKind::Lqr);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        b.trials += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn trial_seeds_are_distinct() {
        let s: std::collections::HashSet<u64> = (0..100).map(|t| trial_seed(7, t)).collect();
        assert_eq!(s.len(), 100);
        assert_ne!(trial_seed(7, 0), trial_seed(8, 0));
    }
}

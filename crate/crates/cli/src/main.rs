use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fedfleet::bench::{
    self, checkpoint_path, driving_sample_records, driving_trial_clients, evaluate_controller, export_controller_records,
    export_records, export_table, forecasters_from, lqr_fleet, read_checkpoint, read_jsonl, summarize_controller,
    wilcoxon_signed_rank, write_checkpoint, write_json, write_jsonl, ControllerRecord, ExperimentConfig, ExportFormat,
    MetricsRecord, Provenance, Table, TaskKind,
};
use fedfleet::fl::TrainingScheme;
use fedfleet::forecast::CvaeForecaster;
use fedfleet::lqr::transition_records;
use fedfleet::params::ParamVector;
use fedfleet::sim::{Forecaster, NaiveForecaster};
use fedfleet::{Error, Result};

#[derive(Parser)]
#[command(name = "fedfleet", version = bench::VERSION, about = "Adaptive personalized federated learning for robot fleets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            config.seed = s;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the LQR fleet dataset as JSON Lines.
    GenLqr {
        #[command(flatten)]
        common: Common,
        /// Number of robots (takes the first entries of lqr.r_values).
        #[arg(long)]
        robots: Option<usize>,
        #[arg(long)]
        inits: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the synthetic drivers and write CVAE samples as JSON Lines.
    GenDriving {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every scheme and trial; write round reports, metrics and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run closed-loop episodes on the evaluation suite and log every step.
    Sim {
        #[command(flatten)]
        common: Common,
        /// Forecaster checkpoint shared by all drivers; naive prediction if absent.
        #[arg(long)]
        forecaster: Option<PathBuf>,
        /// Simulate only this driver index.
        #[arg(long)]
        driver: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the naive controller with trained personalized forecasters.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory holding `checkpoints/` from `train` (defaults to output_dir).
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Wilcoxon signed-rank test between two schemes or controllers.
    Stats {
        #[command(flatten)]
        common: Common,
        /// JSON Lines of metrics records (or controller records with --controllers).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        /// Metric to compare; controller records use mean_cost.
        #[arg(long, default_value = "total_loss")]
        metric: String,
        #[arg(long)]
        controllers: bool,
    },
    /// Re-export metrics records as long-format CSV/JSON Lines or as a table.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
        /// Write the metric × scheme table of means instead of long rows.
        #[arg(long)]
        table: bool,
    },
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    message: String,
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    let rec = ErrorRecord { error: kind, message };
    eprintln!("{}", serde_json::to_string(&rec).expect("error record serializes"));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim().to_string(), 2),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string(), 1),
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenLqr { common, robots, inits, horizon, noise, trial, out } => {
            let mut config = common.load()?;
            if let Some(n) = robots {
                if n == 0 || n > config.lqr.r_values.len() {
                    return Err(Error::Config(format!(
                        "--robots must be in 1..={} (one per lqr.r_values entry)",
                        config.lqr.r_values.len()
                    )));
                }
                config.lqr.r_values.truncate(n);
            }
            let r = &mut config.lqr.rollouts;
            r.n_init = inits.unwrap_or(r.n_init);
            r.horizon = horizon.unwrap_or(r.horizon);
            r.noise_var = noise.unwrap_or(r.noise_var);
            let prov = Provenance::new(&config);
            let records: Vec<_> = lqr_fleet(&config, trial)?.iter().flat_map(transition_records).collect();
            let out = out.unwrap_or_else(|| config.output_dir.join(format!("data/lqr-trial{trial}.jsonl")));
            write_jsonl(&out, &records, &prov)?;
            eprintln!("wrote {} transitions to {}", records.len(), out.display());
            Ok(())
        }
        Command::GenDriving { common, trial, out } => {
            let config = common.load()?;
            require_driving(&config)?;
            let prov = Provenance::new(&config);
            let clients = driving_trial_clients(&config, trial)?;
            let records = driving_sample_records(&config, &clients);
            let out = out.unwrap_or_else(|| config.output_dir.join(format!("data/{}-trial{trial}.jsonl", config.task)));
            write_jsonl(&out, &records, &prov)?;
            eprintln!("wrote {} samples to {}", records.len(), out.display());
            Ok(())
        }
        Command::Train { common, out_dir } => {
            let config = common.load()?;
            let dir = out_dir.unwrap_or_else(|| config.output_dir.clone());
            train(&config, &dir)
        }
        Command::Sim { common, forecaster, driver, out } => {
            let mut config = common.load()?;
            require_driving(&config)?;
            if let Some(k) = driver {
                let g = *config
                    .driving
                    .gammas
                    .get(k)
                    .ok_or_else(|| Error::Config(format!("driver {k} out of range")))?;
                config.driving.gammas = vec![g];
            }
            let prov = Provenance::new(&config);
            let cvae;
            let (label, f): (&str, &dyn Forecaster) = match &forecaster {
                Some(path) => {
                    cvae = CvaeForecaster::from_checkpoint(&read_checkpoint(path)?)?;
                    ("cvae", &cvae)
                }
                None => ("naive", &NaiveForecaster),
            };
            let results = evaluate_controller(&config, label, &[f])?;
            let mut lines = Vec::new();
            for (rec, ep) in &results {
                for step in &ep.steps {
                    lines.push(StepLine { controller: label, driver: rec.driver, gamma: rec.gamma, init: rec.init, step });
                }
            }
            let out = out.unwrap_or_else(|| config.output_dir.join(format!("episodes-{label}.jsonl")));
            write_jsonl(&out, &lines, &prov)?;
            let records: Vec<ControllerRecord> = results.into_iter().map(|(r, _)| r).collect();
            print_json(&summarize_controller(&records)?)
        }
        Command::Eval { common, checkpoints, out_dir } => {
            let config = common.load()?;
            require_driving(&config)?;
            let dir = out_dir.unwrap_or_else(|| config.output_dir.clone());
            let ck_dir = checkpoints.unwrap_or_else(|| config.output_dir.clone());
            eval(&config, &ck_dir, &dir)
        }
        Command::Stats { common, input, a, b, metric, controllers } => {
            let _config = common.load()?;
            let (xa, xb) = if controllers {
                let recs: Vec<ControllerRecord> = read_jsonl(&input)?.into_iter().map(|s| s.record).collect();
                paired_controllers(&recs, &a, &b)?
            } else {
                let recs: Vec<MetricsRecord> = read_jsonl(&input)?.into_iter().map(|s| s.record).collect();
                paired_metrics(&recs, a.parse()?, b.parse()?, &metric)?
            };
            print_json(&wilcoxon_signed_rank(&xa, &xb)?)
        }
        Command::Export { common, input, out, format, table } => {
            let config = common.load()?;
            let prov = Provenance::new(&config);
            let format: ExportFormat = format.parse()?;
            let recs: Vec<MetricsRecord> = read_jsonl(&input)?.into_iter().map(|s| s.record).collect();
            if table {
                export_table(&records_table(&recs)?, &out, format, &prov)
            } else {
                export_records(&recs, &out, format, &prov)
            }
        }
    }
}

#[derive(Serialize)]
struct StepLine<'a> {
    controller: &'a str,
    driver: usize,
    gamma: f64,
    init: usize,
    #[serde(flatten)]
    step: &'a fedfleet::sim::EpisodeStep,
}

fn require_driving(config: &ExperimentConfig) -> Result<()> {
    if config.task == TaskKind::Lqr {
        return Err(Error::Config("this subcommand needs task = lane-swap or lane-change".into()));
    }
    Ok(())
}

/// Loss table for LQR records; test ELBO table for driving records.
fn records_table(records: &[MetricsRecord]) -> Result<Table> {
    let mut schemes: Vec<TrainingScheme> = records.iter().map(|r| r.scheme).collect();
    schemes.sort();
    schemes.dedup();
    match records.first().map(|r| r.task) {
        None => Err(Error::Contract("no records to tabulate".into())),
        Some(TaskKind::Lqr) => bench::lqr_loss_table(records, &schemes),
        Some(_) => Table::from_aggregates(&bench::aggregate(records), &["test_elbo"], &schemes),
    }
}

#[derive(Serialize)]
struct AggregateFile<'a> {
    rows: &'a [bench::AggregateRow],
}

fn train(config: &ExperimentConfig, dir: &Path) -> Result<()> {
    let prov = Provenance::new(config);
    let (result, error) = bench::run_experiment_partial(config);
    write_jsonl(&dir.join("rounds.jsonl"), &result.rounds, &prov)?;
    export_records(&result.records, &dir.join("records.jsonl"), ExportFormat::Json, &prov)?;
    export_records(&result.records, &dir.join("records.csv"), ExportFormat::Csv, &prov)?;
    let aggregates = bench::aggregate(&result.records);
    write_json(&dir.join("aggregate.json"), &AggregateFile { rows: &aggregates }, &prov)?;
    for m in &result.models {
        for (k, p) in m.personalized.iter().enumerate() {
            write_checkpoint(&checkpoint_path(dir, m.scheme, m.trial, k), config, p, &prov)?;
        }
    }
    if let Some(e) = error {
        return Err(e);
    }
    let table = records_table(&result.records)?;
    export_table(&table, &dir.join("table.csv"), ExportFormat::Csv, &prov)?;
    print_json(&aggregates)
}

fn eval(config: &ExperimentConfig, ck_dir: &Path, dir: &Path) -> Result<()> {
    let prov = Provenance::new(config);
    let scheme = config.eval.scheme;
    let models = (0..config.driving.gammas.len())
        .map(|k| {
            let ck = read_checkpoint(&checkpoint_path(ck_dir, scheme, config.eval.trial, k))?;
            ParamVector::new(config.cvae.layout()?, ck.values)
        })
        .collect::<Result<Vec<_>>>()?;
    let learned = forecasters_from(config, &models)?;
    let learned_refs: Vec<&dyn Forecaster> = learned.iter().map(|f| f as &dyn Forecaster).collect();
    let naive = evaluate_controller(config, "naive", &[&NaiveForecaster])?;
    let trained = evaluate_controller(config, scheme.as_str(), &learned_refs)?;
    let mut records: Vec<ControllerRecord> = naive.into_iter().map(|(r, _)| r).collect();
    records.extend(trained.into_iter().map(|(r, _)| r));
    export_controller_records(&records, &dir.join("controller.jsonl"), ExportFormat::Json, &prov)?;
    export_controller_records(&records, &dir.join("controller.csv"), ExportFormat::Csv, &prov)?;
    let (xa, xb) = paired_controllers(&records, "naive", scheme.as_str())?;
    let by_label = |l: &str| records.iter().filter(|r| r.controller == l).cloned().collect::<Vec<_>>();
    let summary = EvalSummary {
        naive: summarize_controller(&by_label("naive"))?,
        learned: summarize_controller(&by_label(scheme.as_str()))?,
        mean_cost_test: wilcoxon_signed_rank(&xa, &xb).ok(),
    };
    write_json(&dir.join("controller_summary.json"), &summary, &prov)?;
    print_json(&summary)
}

#[derive(Serialize)]
struct EvalSummary {
    naive: bench::ControllerSummary,
    learned: bench::ControllerSummary,
    /// Paired test on per-episode mean cost; absent when all pairs tie.
    mean_cost_test: Option<bench::WilcoxonResult>,
}

fn paired_metrics(records: &[MetricsRecord], a: TrainingScheme, b: TrainingScheme, metric: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let pick = |s: TrainingScheme| -> Result<Vec<((usize, usize), f64)>> {
        let mut v: Vec<((usize, usize), f64)> = records
            .iter()
            .filter(|r| r.scheme == s)
            .flat_map(|r| r.clients.iter().map(move |c| (r.trial, c)))
            .map(|(trial, c)| {
                c.metrics
                    .get(metric)
                    .map(|x| ((trial, c.client), *x))
                    .ok_or_else(|| Error::Config(format!("records have no metric '{metric}'")))
            })
            .collect::<Result<_>>()?;
        v.sort_by_key(|(k, _)| *k);
        Ok(v)
    };
    pair_up(pick(a)?, pick(b)?)
}

fn paired_controllers(records: &[ControllerRecord], a: &str, b: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let pick = |l: &str| {
        let mut v: Vec<((usize, usize), f64)> =
            records.iter().filter(|r| r.controller == l).map(|r| ((r.driver, r.init), r.mean_cost)).collect();
        v.sort_by_key(|(k, _)| *k);
        v
    };
    pair_up(pick(a), pick(b))
}

fn pair_up<K: PartialEq + std::fmt::Debug>(a: Vec<(K, f64)>, b: Vec<(K, f64)>) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.is_empty() || a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.0 != y.0) {
        return Err(Error::Contract(format!(
            "samples do not pair up ({} vs {} entries with matching keys required)",
            a.len(),
            b.len()
        )));
    }
    Ok((a.into_iter().map(|x| x.1).collect(), b.into_iter().map(|x| x.1).collect()))
}

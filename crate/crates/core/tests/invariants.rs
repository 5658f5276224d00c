use std::sync::{Arc, OnceLock};

use fedfleet::bench::{
    aggregate, export_records, export_table, lqr_loss_table, mean_std, read_jsonl, run_experiment, wilcoxon_signed_rank,
    ClientMetrics, ExperimentConfig, ExportFormat, MetricsRecord, Provenance, TaskKind,
};
use fedfleet::fl::{run_round, ClientData, FlConfig, Server, Task, TrainingScheme};
use fedfleet::forecast::{elbo_loss, samples_from_episode, CvaeConfig, SequenceSample};
use fedfleet::lqr::{
    closed_loop, generate_fleet, lqr_loss, solve_dare, spectral_radius, LinSystem, LqrCost, LqrFleetConfig,
};
use fedfleet::params::{init_params, Layout, ParamVector};
use fedfleet::sim::{
    generate_initial_states, pooled_human_speed, run_episode, DriverParams, EpisodeConfig, Geometry, InitRanges,
    NaiveForecaster, Scenario,
};
use fedfleet::Result;
use proptest::prelude::*;

fn small_lqr(trials: usize, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig { seed, trials, ..ExperimentConfig::preset(TaskKind::Lqr) };
    c.lqr.rollouts.n_init = 12;
    c.fl.rounds = 2;
    c.fl.epochs = 5;
    c
}

fn lqr_result() -> &'static (ExperimentConfig, fedfleet::bench::ExperimentResult) {
    static CELL: OnceLock<(ExperimentConfig, fedfleet::bench::ExperimentResult)> = OnceLock::new();
    CELL.get_or_init(|| {
        let c = small_lqr(3, 5);
        let r = run_experiment(&c).unwrap();
        (c, r)
    })
}

#[test]
fn aggregate_equals_mean_of_emitted_trial_records() {
    let (config, result) = lqr_result();
    assert_eq!(result.records.len(), config.schemes.len() * config.trials);
    for row in aggregate(&result.records) {
        let per_trial: Vec<f64> = result
            .records
            .iter()
            .filter(|r| r.scheme == row.scheme)
            .map(|r| r.client_mean(&row.metric).unwrap())
            .collect();
        let (m, s) = mean_std(&per_trial);
        assert_eq!(row.trials, config.trials);
        assert!((row.mean - m).abs() <= 1e-15 * m.abs().max(1.0), "{} {}", row.scheme, row.metric);
        assert!((row.std - s).abs() <= 1e-15 * s.abs().max(1.0));
    }
}

#[test]
fn records_are_finite_and_match_schema() {
    let (config, result) = lqr_result();
    for r in &result.records {
        r.validate().unwrap();
        assert_eq!(r.clients.len(), config.lqr.r_values.len());
        for (k, c) in r.clients.iter().enumerate() {
            assert_eq!(c.client, k);
            let total = c.metrics["total_loss"];
            assert_eq!(total, c.metrics["state_loss"] + c.metrics["control_loss"]);
        }
    }
}

#[test]
fn exports_carry_provenance_and_round_trip() {
    let (config, result) = lqr_result();
    let dir = tempfile::tempdir().unwrap();
    let prov = Provenance::new(config);
    assert!(!prov.version.is_empty());
    assert_eq!(prov.seed, config.seed);
    assert_eq!(prov.config_hash.len(), 16);

    let jsonl = dir.path().join("records.jsonl");
    export_records(&result.records, &jsonl, ExportFormat::Json, &prov).unwrap();
    let back = read_jsonl::<MetricsRecord>(&jsonl).unwrap();
    assert_eq!(back.len(), result.records.len());
    for (s, r) in back.iter().zip(&result.records) {
        assert_eq!(s.provenance, prov);
        assert_eq!(&s.record, r);
    }

    let csv_path = dir.path().join("records.csv");
    export_records(&result.records, &csv_path, ExportFormat::Csv, &prov).unwrap();
    let mut rd = csv::Reader::from_path(&csv_path).unwrap();
    let header: Vec<String> = rd.headers().unwrap().iter().map(str::to_string).collect();
    assert_eq!(header, ["version", "seed", "config_hash", "task", "scheme", "trial", "client", "metric", "value"]);
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), result.records.len() * config.lqr.r_values.len() * 5);
    for row in &rows {
        assert_eq!(&row[0], prov.version);
        assert_eq!(row[1].parse::<u64>().unwrap(), prov.seed);
        assert_eq!(&row[2], prov.config_hash);
        assert!(row[8].parse::<f64>().unwrap().is_finite());
    }

    let table = lqr_loss_table(&result.records, &config.schemes).unwrap();
    let table_path = dir.path().join("table.csv");
    export_table(&table, &table_path, ExportFormat::Csv, &prov).unwrap();
    let mut rd = csv::Reader::from_path(&table_path).unwrap();
    assert_eq!(rd.headers().unwrap().len(), 4 + config.schemes.len());
    let cells: usize = rd.records().map(|r| r.unwrap().len() - 4).sum();
    assert_eq!(cells, 15);
}

#[test]
fn empty_record_set_exports_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let prov = Provenance::new(&ExperimentConfig::default());
    let path = dir.path().join("empty.csv");
    export_records(&[], &path, ExportFormat::Csv, &prov).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("version,seed,config_hash,"));
    let path = dir.path().join("empty.jsonl");
    export_records(&[], &path, ExportFormat::Json, &prov).unwrap();
    assert!(std::fs::read_to_string(&path).unwrap().is_empty());
}

/// Task whose samples are sentinel scalars; the model is a single offset.
struct Sentinel;

impl Task for Sentinel {
    type Sample = f64;

    fn layout(&self) -> Arc<Layout> {
        Arc::new(Layout::from_sizes(&[("w", 1)]).unwrap())
    }

    fn loss_and_grad(&self, p: &ParamVector, batch: &[&f64], _seed: u64) -> Result<(f64, Vec<f64>)> {
        let w = p.values()[0];
        let n = batch.len() as f64;
        let loss = batch.iter().map(|x| (w - **x).powi(2)).sum::<f64>() / n;
        let grad = batch.iter().map(|x| 2.0 * (w - **x)).sum::<f64>() / n;
        Ok((loss, vec![grad]))
    }

    fn eval_loss(&self, p: &ParamVector, data: &[f64], _seed: u64) -> Result<f64> {
        let refs: Vec<&f64> = data.iter().collect();
        Ok(self.loss_and_grad(p, &refs, 0)?.0)
    }
}

#[test]
fn server_sees_only_parameter_vectors() {
    // The aggregation entry point accepts model parameters and nothing else.
    let _: fn(&mut Server, &[ParamVector], bool) -> Result<()> = Server::aggregate;

    let sentinels = |k: usize| (0..16).map(|i| 1000.0 + 97.0 * k as f64 + 0.123 * i as f64).collect::<Vec<_>>();
    let clients: Vec<ClientData<f64>> =
        (0..3).map(|k| ClientData { id: k, train: sentinels(k), test: sentinels(k) }).collect();
    let config = FlConfig { rounds: 1, epochs: 2, batch_size: 4, ..FlConfig::default() };
    let mut server = Server::new(ParamVector::zeros(Sentinel.layout()), config.base_lr);
    for scheme in [TrainingScheme::Sfl, TrainingScheme::Spfl, TrainingScheme::Apfl] {
        run_round(&Sentinel, &mut server, &clients, scheme, &config, 3).unwrap();
        assert_eq!(server.theta_global.len(), 1);
        assert!(server.theta_global.same_layout(&ParamVector::zeros(Sentinel.layout())));
        let state = [server.theta_global.values(), server.sigma.values(), server.lr.rates()].concat();
        for x in clients.iter().flat_map(|c| c.train.iter().chain(&c.test)) {
            assert!(state.iter().all(|v| v.to_bits() != x.to_bits()));
        }
    }
}

#[test]
fn lqr_dataset_is_seed_deterministic_and_robots_differ_only_in_gain() {
    let config = LqrFleetConfig::default();
    let a = generate_fleet(&config, 42).unwrap();
    let b = generate_fleet(&config, 42).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.train, y.train);
        assert_eq!(x.test, y.test);
        assert_eq!(x.k_true, y.k_true);
    }
    let sys = LinSystem::point_mass();
    for robot in &a {
        for tr in robot.train.iter().chain(&robot.test) {
            let u = -(robot.k_true[0] * tr.x[0] + robot.k_true[1] * tr.x[1]);
            assert!((tr.u - u).abs() < 1.0, "control noise {}", tr.u - u);
            let drift = [tr.x[0] + tr.x[1], tr.x[1] + tr.u];
            let noise = [tr.x_next[0] - drift[0], tr.x_next[1] - drift[1]];
            assert!(noise.iter().all(|n| n.abs() < 1.0), "noise {noise:?}");
        }
    }
    assert_eq!(sys.a.as_slice(), &[1.0, 0.0, 1.0, 1.0]);
    assert_eq!(a[0].k_true.len(), 2);
    assert!(a.windows(2).all(|w| w[0].k_true != w[1].k_true));
}

#[test]
fn gamma_orders_pooled_human_speed_on_challenging_inits() {
    for scenario in [Scenario::LaneChange, Scenario::LaneSwap] {
        let config = EpisodeConfig::default();
        let inits = generate_initial_states(54, scenario, &InitRanges::challenging(), &config.geometry, 21).unwrap();
        let speed = |gamma: f64| {
            let eps: Vec<_> = inits
                .iter()
                .enumerate()
                .map(|(i, init)| {
                    run_episode(init, &NaiveForecaster, &DriverParams::with_gamma(gamma), &config, 10, i as u64).unwrap()
                })
                .collect();
            pooled_human_speed(&eps)
        };
        let (fast, slow) = (speed(1.0), speed(-1.0));
        assert!(fast >= slow, "{scenario:?}: gamma 1 speed {fast} < gamma -1 speed {slow}");
    }
}

fn lane_samples() -> &'static Vec<SequenceSample> {
    static CELL: OnceLock<Vec<SequenceSample>> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = CvaeConfig::default();
        let init = generate_initial_states(1, Scenario::LaneChange, &InitRanges::default(), &Geometry::default(), 4).unwrap();
        let ep = run_episode(&init[0], &NaiveForecaster, &DriverParams::with_gamma(0.5), &EpisodeConfig::default(), cfg.window, 1)
            .unwrap();
        samples_from_episode(&ep, &cfg, 7).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wilcoxon_is_symmetric_and_bounded(
        pairs in prop::collection::vec((-5i32..5, -5i32..5), 1..30),
    ) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64 * 0.5).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64 * 0.5).collect();
        match (wilcoxon_signed_rank(&a, &b), wilcoxon_signed_rank(&b, &a)) {
            (Ok(x), Ok(y)) => {
                prop_assert_eq!(x.p_value, y.p_value);
                prop_assert_eq!(x.w, y.w);
                prop_assert_eq!(x.w_plus, y.w_minus);
                prop_assert!(x.p_value > 0.0 && x.p_value <= 1.0);
                prop_assert!(x.w >= 0.0);
                prop_assert_eq!(x.w_plus + x.w_minus, (x.n * (x.n + 1)) as f64 / 2.0);
            }
            (Err(_), Err(_)) => prop_assert!(a == b),
            _ => prop_assert!(false, "asymmetric failure"),
        }
    }

    #[test]
    fn aggregate_is_mean_of_trial_client_means(
        trials in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 1..5), 1..6),
    ) {
        let records: Vec<MetricsRecord> = trials
            .iter()
            .enumerate()
            .map(|(t, vals)| MetricsRecord {
                task: TaskKind::LaneSwap,
                scheme: TrainingScheme::Cloud,
                trial: t,
                clients: vals
                    .iter()
                    .enumerate()
                    .map(|(k, v)| ClientMetrics { client: k, metrics: [("test_elbo".to_string(), *v)].into() })
                    .collect(),
            })
            .collect();
        let rows = aggregate(&records);
        prop_assert_eq!(rows.len(), 1);
        let means: Vec<f64> = records.iter().map(|r| r.client_mean("test_elbo").unwrap()).collect();
        let (m, s) = mean_std(&means);
        prop_assert!((rows[0].mean - m).abs() <= 1e-12);
        prop_assert!((rows[0].std - s).abs() <= 1e-12);
    }

    #[test]
    fn lqr_loss_decomposes(values in prop::collection::vec(-2.0f64..2.0, 8), seed in 0u64..50) {
        let fleet = generate_fleet(&LqrFleetConfig::default(), seed).unwrap();
        let layout = fedfleet::lqr::lqr_layout();
        let model = ParamVector::new(layout, values).unwrap();
        let loss = lqr_loss(&model, &fleet[0].test).unwrap();
        prop_assert_eq!(loss.total, loss.state + loss.control);
        prop_assert!(loss.state >= 0.0 && loss.control >= 0.0);
    }

    #[test]
    fn dare_gain_is_invariant_under_cost_scaling(r in 0.1f64..200.0, c in 1e-3f64..1e3) {
        let sys = LinSystem::point_mass();
        let k = solve_dare(&sys, &LqrCost::identity_q(2, r).unwrap()).unwrap().k;
        let q = nalgebra::DMatrix::identity(2, 2) * c;
        let scaled = LqrCost::new(q, nalgebra::DMatrix::from_element(1, 1, r * c)).unwrap();
        let ks = solve_dare(&sys, &scaled).unwrap().k;
        prop_assert!((&k - &ks).amax() <= 1e-9 * k.amax().max(1.0));
        prop_assert!(spectral_radius(&closed_loop(&sys, &ks)) < 1.0);
    }

    #[test]
    fn kl_term_is_non_negative(seed in any::<u64>(), scale in 0.01f64..1.0) {
        let cfg = CvaeConfig::default();
        let params = init_params(cfg.layout().unwrap(), seed, scale).unwrap();
        let batch: Vec<&SequenceSample> = lane_samples().iter().take(8).collect();
        let e = elbo_loss(&cfg, &params, &batch, seed).unwrap();
        prop_assert!(e.kl >= 0.0);
        prop_assert!(e.loss.is_finite() && e.reconstruction >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn episodes_emit_only_legal_controls_and_replay_exactly(
        seed in 0u64..1000,
        gamma in prop::sample::select(vec![-1.0, -0.5, 0.0, 0.5, 1.0]),
        lane_change in any::<bool>(),
    ) {
        let scenario = if lane_change { Scenario::LaneChange } else { Scenario::LaneSwap };
        let init = generate_initial_states(1, scenario, &InitRanges::default(), &Geometry::default(), seed).unwrap();
        let driver = DriverParams::with_gamma(gamma);
        let ep = run_episode(&init[0], &NaiveForecaster, &driver, &EpisodeConfig::default(), 10, seed).unwrap();
        for s in &ep.steps {
            prop_assert!(s.controls.robot.is_legal() && s.controls.human.is_legal());
            prop_assert_eq!(s.world.third_car.is_some(), lane_change);
        }
        prop_assert_eq!(ep.states().len(), ep.steps.len() + 1);
        let again = run_episode(&init[0], &NaiveForecaster, &driver, &EpisodeConfig::default(), 10, seed).unwrap();
        prop_assert_eq!(ep, again);
    }
}

#[test]
fn shipped_configs_equal_task_presets() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for task in [TaskKind::Lqr, TaskKind::LaneChange, TaskKind::LaneSwap] {
        let loaded = ExperimentConfig::load(&dir.join(format!("{task}.toml"))).unwrap();
        assert_eq!(loaded, ExperimentConfig::preset(task), "{task}");
    }
}

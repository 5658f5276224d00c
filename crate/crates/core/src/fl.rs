//! Federated training engine: the five training schemes over a set of
//! simulated clients.
//!
//! Clients own their datasets. The [`Server`] only ever receives
//! [`ParamVector`]s, so raw samples cannot cross into aggregation.
//!
//! One APFL round, per client `k` (all clients participate):
//! 1. reset to the global model and train with the per-group rates `l`
//!    (personalization, result kept locally as `theta_hat_k`);
//! 2. reset to the global model again and train with the uniform base rate
//!    (contribution, sent to the server).
//!
//! The server then averages the contributions, recomputes the per-parameter
//! sum of squared deviations and derives the next rates from it.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{
    init_params, lrs_from_sigma, mean_params, sum_sq_dev, AdamConfig, AdamState, Layout,
    LrVector, ParamVector, SigmaVector,
};
use crate::rng::{derive_seed, rng_from};

/// A differentiable learning problem over samples of type `Sample`.
pub trait Task: Sync {
    type Sample: Send + Sync;

    fn layout(&self) -> Arc<Layout>;

    /// Mean loss over the batch and its gradient. `seed` drives any
    /// stochasticity inside the loss (e.g. reparameterization noise).
    fn loss_and_grad(
        &self,
        params: &ParamVector,
        batch: &[&Self::Sample],
        seed: u64,
    ) -> Result<(f64, Vec<f64>)>;

    /// Mean loss over `data` for evaluation.
    fn eval_loss(&self, params: &ParamVector, data: &[Self::Sample], seed: u64) -> Result<f64>;
}

/// Wraps a task so that its whole parameter vector forms one group.
pub struct SingleGroup<T>(pub T);

impl<T: Task> Task for SingleGroup<T> {
    type Sample = T::Sample;

    fn layout(&self) -> Arc<Layout> {
        Arc::new(self.0.layout().single_group("all"))
    }

    fn loss_and_grad(&self, params: &ParamVector, batch: &[&T::Sample], seed: u64) -> Result<(f64, Vec<f64>)> {
        self.0.loss_and_grad(params, batch, seed)
    }

    fn eval_loss(&self, params: &ParamVector, data: &[T::Sample], seed: u64) -> Result<f64> {
        self.0.eval_loss(params, data, seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrainingScheme {
    Local,
    Cloud,
    #[serde(rename = "SFL")]
    Sfl,
    #[serde(rename = "SPFL")]
    Spfl,
    #[serde(rename = "APFL")]
    Apfl,
}

impl TrainingScheme {
    pub const ALL: [TrainingScheme; 5] = [
        TrainingScheme::Local,
        TrainingScheme::Cloud,
        TrainingScheme::Sfl,
        TrainingScheme::Spfl,
        TrainingScheme::Apfl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainingScheme::Local => "Local",
            TrainingScheme::Cloud => "Cloud",
            TrainingScheme::Sfl => "SFL",
            TrainingScheme::Spfl => "SPFL",
            TrainingScheme::Apfl => "APFL",
        }
    }

    pub fn is_federated(self) -> bool {
        matches!(self, TrainingScheme::Sfl | TrainingScheme::Spfl | TrainingScheme::Apfl)
    }
}

impl fmt::Display for TrainingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainingScheme::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown training scheme '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlConfig {
    pub rounds: usize,
    /// Epochs per local training pass (both personalization and contribution).
    pub epochs: usize,
    pub batch_size: usize,
    /// Base learning rate `L`.
    pub base_lr: f64,
    pub adam: AdamConfig,
    /// Initial parameters are uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
    /// Stop once the largest relative change of any personalized model
    /// between consecutive rounds drops below this value.
    pub convergence_threshold: f64,
    /// Train clients on the rayon pool. Results do not depend on this flag.
    pub parallel: bool,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            epochs: 30,
            batch_size: 32,
            base_lr: 0.01,
            adam: AdamConfig::default(),
            init_scale: 0.1,
            convergence_threshold: 1e-5,
            parallel: true,
        }
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        Ok(())
    }
}

/// A client's private data. Never handed to the [`Server`].
#[derive(Clone, Debug)]
pub struct ClientData<S> {
    pub id: usize,
    pub train: Vec<S>,
    pub test: Vec<S>,
}

/// Per-client model state kept on the robot.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    /// Model most recently trained with the uniform base rate.
    pub theta: ParamVector,
    /// Personalized model.
    pub theta_hat: ParamVector,
    /// Persistent optimizer (Local scheme only; federated passes start fresh).
    pub optimizer: Option<AdamState>,
}

/// Server-side state: global model, deviation vector and group rates.
#[derive(Clone, Debug)]
pub struct Server {
    pub theta_global: ParamVector,
    pub sigma: SigmaVector,
    pub lr: LrVector,
    pub base_lr: f64,
    pub round: usize,
}

impl Server {
    /// Deviations start at one and every group rate at `base_lr`.
    pub fn new(theta_global: ParamVector, base_lr: f64) -> Self {
        let groups = theta_global.layout().num_groups();
        let len = theta_global.len();
        Self {
            theta_global,
            sigma: SigmaVector::ones(len),
            lr: LrVector::uniform(groups, base_lr),
            base_lr,
            round: 0,
        }
    }

    /// Average the contributed models; with `adaptive`, also refresh the
    /// deviation vector and the group rates from the same contributions.
    pub fn aggregate(&mut self, contributions: &[ParamVector], adaptive: bool) -> Result<()> {
        if contributions.iter().any(|c| !c.same_layout(&self.theta_global)) {
            return Err(Error::Contract("contribution layout differs from the global model".into()));
        }
        self.theta_global = mean_params(contributions)?;
        if adaptive {
            self.sigma = sum_sq_dev(contributions)?;
            self.lr = lrs_from_sigma(&self.sigma, self.base_lr, self.theta_global.layout())?;
        }
        self.round += 1;
        Ok(())
    }
}

/// Per-round learning-curve record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub scheme: TrainingScheme,
    pub round: usize,
    /// Mean loss of the final epoch of each client's uniform-rate pass.
    pub train_loss: Vec<f64>,
    /// Loss of each client's personalized model on its held-out split.
    pub test_loss: Vec<f64>,
    /// Group means of the deviation vector after the round (empty unless
    /// the scheme aggregates).
    pub sigma: Vec<f64>,
    /// Group rates used for personalization in the next round.
    pub lr: Vec<f64>,
}

/// Seed tags for the individual training passes.
const PASS_PERSONALIZE: u64 = 0;
const PASS_CONTRIBUTE: u64 = 1;
const PASS_LOCAL: u64 = 2;
const PASS_EVAL: u64 = 3;

/// Train `start` for `epochs` epochs with a fresh Adam state. Returns the
/// model and the mean loss of the final epoch.
pub fn train_pass<T: Task>(
    task: &T,
    start: &ParamVector,
    data: &[T::Sample],
    rates: &LrVector,
    epochs: usize,
    config: &FlConfig,
    seed: u64,
) -> Result<(ParamVector, f64)> {
    let mut params = start.clone();
    let mut opt = AdamState::new(params.len(), config.adam);
    let loss = train_epochs(task, &mut params, &mut opt, data, rates, epochs, config, seed)?;
    Ok((params, loss))
}

#[allow(clippy::too_many_arguments)]
fn train_epochs<T: Task>(
    task: &T,
    params: &mut ParamVector,
    opt: &mut AdamState,
    data: &[T::Sample],
    rates: &LrVector,
    epochs: usize,
    config: &FlConfig,
    seed: u64,
) -> Result<f64> {
    if epochs == 0 {
        return Err(Error::Config("epochs must be >= 1".into()));
    }
    if data.is_empty() {
        return Err(Error::Contract("training on an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last = 0.0;
    for epoch in 0..epochs {
        order.shuffle(&mut rng_from(seed, &[epoch as u64]));
        let (mut sum, mut n) = (0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&T::Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grad) = task.loss_and_grad(params, &batch, derive_seed(seed, &[epoch as u64, b as u64]))?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss at epoch {epoch}")));
            }
            opt.step(params, &grad, rates)
                .map_err(|e| e.context(format_args!("epoch {epoch}")))?;
            sum += loss * chunk.len() as f64;
            n += chunk.len();
        }
        last = sum / n as f64;
    }
    Ok(last)
}

/// Personalization pass: start from the global model, train with `lr`.
pub fn personalize<T: Task>(
    task: &T,
    data: &ClientData<T::Sample>,
    theta_global: &ParamVector,
    lr: &LrVector,
    config: &FlConfig,
    seed: u64,
) -> Result<ParamVector> {
    train_pass(task, theta_global, &data.train, lr, config.epochs, config, seed)
        .map(|(p, _)| p)
        .map_err(|e| e.context(format_args!("client {} personalization", data.id)))
}

/// Contribution pass: start from the global model, train with the uniform
/// base rate. Returns the model sent to the server and its final train loss.
pub fn contribute<T: Task>(
    task: &T,
    data: &ClientData<T::Sample>,
    theta_global: &ParamVector,
    config: &FlConfig,
    seed: u64,
) -> Result<(ParamVector, f64)> {
    let rates = LrVector::uniform(theta_global.layout().num_groups(), config.base_lr);
    train_pass(task, theta_global, &data.train, &rates, config.epochs, config, seed)
        .map_err(|e| e.context(format_args!("client {} contribution", data.id)))
}

fn map_clients<S, R, F>(clients: &[ClientData<S>], parallel: bool, f: F) -> Result<Vec<R>>
where
    S: Send + Sync,
    R: Send,
    F: Fn(&ClientData<S>) -> Result<R> + Sync + Send,
{
    if parallel {
        clients.par_iter().map(f).collect()
    } else {
        clients.iter().map(f).collect()
    }
}

fn eval_clients<T: Task>(
    task: &T,
    clients: &[ClientData<T::Sample>],
    models: &[ParamVector],
    seed: u64,
) -> Result<Vec<f64>> {
    clients
        .iter()
        .zip(models)
        .map(|(c, m)| {
            if c.test.is_empty() {
                Ok(f64::NAN)
            } else {
                task.eval_loss(m, &c.test, derive_seed(seed, &[c.id as u64]))
            }
        })
        .collect()
}

/// One round of a federated scheme (SFL, SPFL or APFL). Returns the round
/// report and the personalized models, in client order.
pub fn run_round<T: Task>(
    task: &T,
    server: &mut Server,
    clients: &[ClientData<T::Sample>],
    scheme: TrainingScheme,
    config: &FlConfig,
    master_seed: u64,
) -> Result<(RoundReport, Vec<ParamVector>)> {
    if !scheme.is_federated() {
        return Err(Error::Config(format!("{scheme} is not a federated round scheme")));
    }
    if clients.is_empty() {
        return Err(Error::Config("a round needs at least one client".into()));
    }
    if scheme == TrainingScheme::Apfl && clients.len() < 2 {
        return Err(Error::Config("APFL needs at least two clients".into()));
    }
    let round = server.round as u64;
    let global = server.theta_global.clone();
    let personal_lr = match scheme {
        TrainingScheme::Apfl => server.lr.clone(),
        _ => LrVector::uniform(global.layout().num_groups(), config.base_lr),
    };
    let seed_p = derive_seed(master_seed, &[round, PASS_PERSONALIZE]);
    let seed_c = derive_seed(master_seed, &[round, PASS_CONTRIBUTE]);

    let outputs = map_clients(clients, config.parallel, |c| {
        let hat = match scheme {
            TrainingScheme::Sfl => None,
            _ => Some(personalize(task, c, &global, &personal_lr, config, seed_p)?),
        };
        let (theta, loss) = contribute(task, c, &global, config, seed_c)?;
        Ok((hat, theta, loss))
    })
    .map_err(|e| e.context(format_args!("round {round}")))?;

    let train_loss: Vec<f64> = outputs.iter().map(|o| o.2).collect();
    let contributions: Vec<ParamVector> = outputs.iter().map(|o| o.1.clone()).collect();
    server.aggregate(&contributions, scheme == TrainingScheme::Apfl)?;

    let personalized: Vec<ParamVector> = outputs
        .into_iter()
        .map(|(hat, _, _)| hat.unwrap_or_else(|| server.theta_global.clone()))
        .collect();
    let report = RoundReport {
        scheme,
        round: round as usize,
        train_loss,
        test_loss: eval_clients(task, clients, &personalized, derive_seed(master_seed, &[round, PASS_EVAL]))?,
        sigma: if clients.len() >= 2 {
            sum_sq_dev(&contributions)?.group_means(server.theta_global.layout())?
        } else {
            Vec::new()
        },
        lr: server.lr.rates().to_vec(),
    };
    Ok((report, personalized))
}

/// Result of a full scheme run.
#[derive(Clone, Debug)]
pub struct SchemeOutcome {
    pub scheme: TrainingScheme,
    pub personalized: Vec<ParamVector>,
    /// Final global model for SFL/SPFL/APFL, the shared model for Cloud.
    pub global: Option<ParamVector>,
    pub history: Vec<RoundReport>,
    pub final_lr: Option<LrVector>,
    pub converged: bool,
}

fn max_relative_change(prev: &[ParamVector], next: &[ParamVector]) -> f64 {
    prev.iter()
        .zip(next)
        .map(|(a, b)| a.distance(b) / a.norm().max(1e-12))
        .fold(0.0, f64::max)
}

/// Run one scheme to convergence or `config.rounds` rounds.
///
/// Every scheme starts from the same seeded initial model. Local and Cloud
/// train for `epochs` epochs per round with a persistent optimizer; Cloud
/// trains one model on the concatenation of all clients' training data.
pub fn run_scheme<T: Task>(
    task: &T,
    clients: &[ClientData<T::Sample>],
    scheme: TrainingScheme,
    config: &FlConfig,
    master_seed: u64,
) -> Result<SchemeOutcome>
where
    T::Sample: Clone,
{
    config.validate()?;
    if clients.is_empty() {
        return Err(Error::Config("no clients".into()));
    }
    let init = init_params(task.layout(), derive_seed(master_seed, &[u64::MAX]), config.init_scale)?;
    match scheme {
        TrainingScheme::Local => run_local(task, clients, init, config, master_seed),
        TrainingScheme::Cloud => run_cloud(task, clients, init, config, master_seed),
        _ => run_federated(task, clients, scheme, init, config, master_seed),
    }
}

fn run_federated<T: Task>(
    task: &T,
    clients: &[ClientData<T::Sample>],
    scheme: TrainingScheme,
    init: ParamVector,
    config: &FlConfig,
    master_seed: u64,
) -> Result<SchemeOutcome> {
    let mut server = Server::new(init, config.base_lr);
    let mut history = Vec::new();
    let mut prev: Option<Vec<ParamVector>> = None;
    let mut converged = false;
    for _ in 0..config.rounds {
        let (report, hats) = run_round(task, &mut server, clients, scheme, config, master_seed)?;
        history.push(report);
        let done = prev
            .as_ref()
            .is_some_and(|p| max_relative_change(p, &hats) < config.convergence_threshold);
        prev = Some(hats);
        if done {
            converged = true;
            break;
        }
    }
    Ok(SchemeOutcome {
        scheme,
        personalized: prev.unwrap_or_default(),
        global: Some(server.theta_global),
        history,
        final_lr: Some(server.lr),
        converged,
    })
}

fn run_local<T: Task>(
    task: &T,
    clients: &[ClientData<T::Sample>],
    init: ParamVector,
    config: &FlConfig,
    master_seed: u64,
) -> Result<SchemeOutcome> {
    let rates = LrVector::uniform(init.layout().num_groups(), config.base_lr);
    let mut states: Vec<ClientState> = clients
        .iter()
        .map(|c| ClientState {
            id: c.id,
            theta: init.clone(),
            theta_hat: init.clone(),
            optimizer: Some(AdamState::new(init.len(), config.adam)),
        })
        .collect();
    let mut history = Vec::new();
    let mut converged = false;
    for round in 0..config.rounds as u64 {
        let seed = derive_seed(master_seed, &[round, PASS_LOCAL]);
        let pairs: Vec<(ClientState, &ClientData<T::Sample>)> =
            states.drain(..).zip(clients.iter()).collect();
        let step = |(mut st, c): (ClientState, &ClientData<T::Sample>)| -> Result<(ClientState, f64)> {
            let mut opt = st.optimizer.take().expect("local clients keep an optimizer");
            let loss = train_epochs(task, &mut st.theta, &mut opt, &c.train, &rates, config.epochs, config, seed)
                .map_err(|e| e.context(format_args!("round {round} client {}", c.id)))?;
            st.optimizer = Some(opt);
            Ok((st, loss))
        };
        let results: Vec<(ClientState, f64)> = if config.parallel {
            pairs.into_par_iter().map(step).collect::<Result<_>>()?
        } else {
            pairs.into_iter().map(step).collect::<Result<_>>()?
        };
        let prev: Vec<ParamVector> = results.iter().map(|(s, _)| s.theta_hat.clone()).collect();
        let mut train_loss = Vec::with_capacity(results.len());
        for (mut st, loss) in results {
            st.theta_hat = st.theta.clone();
            train_loss.push(loss);
            states.push(st);
        }
        let hats: Vec<ParamVector> = states.iter().map(|s| s.theta_hat.clone()).collect();
        history.push(RoundReport {
            scheme: TrainingScheme::Local,
            round: round as usize,
            train_loss,
            test_loss: eval_clients(task, clients, &hats, derive_seed(master_seed, &[round, PASS_EVAL]))?,
            sigma: Vec::new(),
            lr: rates.rates().to_vec(),
        });
        if round > 0 && max_relative_change(&prev, &hats) < config.convergence_threshold {
            converged = true;
            break;
        }
    }
    Ok(SchemeOutcome {
        scheme: TrainingScheme::Local,
        personalized: states.into_iter().map(|s| s.theta_hat).collect(),
        global: None,
        history,
        final_lr: None,
        converged,
    })
}

fn run_cloud<T: Task>(
    task: &T,
    clients: &[ClientData<T::Sample>],
    init: ParamVector,
    config: &FlConfig,
    master_seed: u64,
) -> Result<SchemeOutcome>
where
    T::Sample: Clone,
{
    let pooled: Vec<T::Sample> = clients.iter().flat_map(|c| c.train.iter().cloned()).collect();
    let rates = LrVector::uniform(init.layout().num_groups(), config.base_lr);
    let mut theta = init;
    let mut opt = AdamState::new(theta.len(), config.adam);
    let mut history = Vec::new();
    let mut converged = false;
    for round in 0..config.rounds as u64 {
        let prev = theta.clone();
        let seed = derive_seed(master_seed, &[round, PASS_LOCAL]);
        let loss = train_epochs(task, &mut theta, &mut opt, &pooled, &rates, config.epochs, config, seed)
            .map_err(|e| e.context(format_args!("round {round} cloud")))?;
        let hats = vec![theta.clone(); clients.len()];
        history.push(RoundReport {
            scheme: TrainingScheme::Cloud,
            round: round as usize,
            train_loss: vec![loss; clients.len()],
            test_loss: eval_clients(task, clients, &hats, derive_seed(master_seed, &[round, PASS_EVAL]))?,
            sigma: Vec::new(),
            lr: rates.rates().to_vec(),
        });
        if round > 0 && prev.distance(&theta) / prev.norm().max(1e-12) < config.convergence_threshold {
            converged = true;
            break;
        }
    }
    Ok(SchemeOutcome {
        scheme: TrainingScheme::Cloud,
        personalized: vec![theta.clone(); clients.len()],
        global: Some(theta),
        history,
        final_lr: None,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqr::{generate_fleet, lqr_loss, LqrFleetConfig, LqrTask, Transition};
    use crate::params::Layout;

    fn lqr_clients(seed: u64) -> Vec<ClientData<Transition>> {
        generate_fleet(&LqrFleetConfig::default(), seed)
            .unwrap()
            .into_iter()
            .map(|r| ClientData { id: r.robot_id, train: r.train, test: r.test })
            .collect()
    }

    fn small_config() -> FlConfig {
        FlConfig { rounds: 3, epochs: 2, batch_size: 64, ..FlConfig::default() }
    }

    fn global(seed: u64) -> ParamVector {
        init_params(LqrTask.layout(), seed, 0.1).unwrap()
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in TrainingScheme::ALL {
            assert_eq!(s.as_str().parse::<TrainingScheme>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.as_str()));
        }
        assert!(matches!("FedProx".parse::<TrainingScheme>(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_epochs_rejected() {
        let clients = lqr_clients(1);
        let g = global(0);
        let cfg = FlConfig { epochs: 0, ..small_config() };
        assert!(personalize(&LqrTask, &clients[0], &g, &LrVector::uniform(3, 0.01), &cfg, 0).is_err());
        assert!(contribute(&LqrTask, &clients[0], &g, &cfg, 0).is_err());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_rates_leave_global_untouched() {
        let clients = lqr_clients(1);
        let g = global(3);
        let hat = personalize(&LqrTask, &clients[0], &g, &LrVector::uniform(3, 0.0), &small_config(), 9).unwrap();
        assert_eq!(hat, g);
    }

    #[test]
    fn zero_gradient_data_is_a_fixpoint() {
        let zero = Transition { x: [0.0; 2], u: 0.0, x_next: [0.0; 2] };
        let client = ClientData { id: 0, train: vec![zero; 10], test: vec![] };
        let g = ParamVector::zeros(LqrTask.layout());
        let (theta, loss) = contribute(&LqrTask, &client, &g, &small_config(), 4).unwrap();
        assert_eq!(theta, g);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn identical_data_gives_identical_contributions() {
        let mut clients = lqr_clients(2);
        clients[1].train = clients[0].train.clone();
        let g = global(5);
        let a = contribute(&LqrTask, &clients[0], &g, &small_config(), 11).unwrap();
        let b = contribute(&LqrTask, &clients[1], &g, &small_config(), 11).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn one_epoch_on_one_sample_is_one_adam_step() {
        let clients = lqr_clients(3);
        let sample = clients[0].train[0];
        let client = ClientData { id: 0, train: vec![sample], test: vec![] };
        let g = global(6);
        let cfg = FlConfig { epochs: 1, ..small_config() };
        let (theta, _) = contribute(&LqrTask, &client, &g, &cfg, 0).unwrap();

        let mut expected = g.clone();
        let (_, grad) = LqrTask.loss_and_grad(&g, &[&sample], 0).unwrap();
        AdamState::new(g.len(), cfg.adam)
            .step(&mut expected, &grad, &LrVector::uniform(3, cfg.base_lr))
            .unwrap();
        assert_eq!(theta, expected);
    }

    #[test]
    fn identical_clients_zero_sigma_uniform_rates() {
        let base = lqr_clients(4);
        let clients: Vec<_> = (0..3)
            .map(|id| ClientData { id, train: base[0].train.clone(), test: base[0].test.clone() })
            .collect();
        let mut server = Server::new(global(1), 0.01);
        let (report, _) = run_round(&LqrTask, &mut server, &clients, TrainingScheme::Apfl, &small_config(), 8).unwrap();
        assert!(server.sigma.values().iter().all(|&s| s == 0.0));
        assert!(server.lr.rates().iter().all(|&l| l == 0.01));
        assert!(report.sigma.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn single_group_apfl_equals_spfl() {
        let clients = lqr_clients(5);
        let task = SingleGroup(LqrTask);
        let cfg = small_config();
        let a = run_scheme(&task, &clients, TrainingScheme::Apfl, &cfg, 21).unwrap();
        let s = run_scheme(&task, &clients, TrainingScheme::Spfl, &cfg, 21).unwrap();
        assert_eq!(a.personalized, s.personalized);
        for (ra, rs) in a.history.iter().zip(&s.history) {
            assert_eq!(ra.test_loss, rs.test_loss);
            assert_eq!(ra.train_loss, rs.train_loss);
        }
    }

    #[test]
    fn control_gain_varies_most_across_clients() {
        let clients = lqr_clients(6);
        let mut server = Server::new(global(2), 0.01);
        let cfg = FlConfig { epochs: 30, batch_size: 256, ..FlConfig::default() };
        run_round(&LqrTask, &mut server, &clients, TrainingScheme::Apfl, &cfg, 3).unwrap();
        let means = server.sigma.group_means(server.theta_global.layout()).unwrap();
        let k = server.theta_global.layout().group_index("K").unwrap();
        for (i, m) in means.iter().enumerate() {
            if i != k {
                assert!(means[k] > *m, "sigma group means {means:?}");
            }
        }
        assert_eq!(server.lr.rates()[k], 0.01);
    }

    #[test]
    fn personalization_improves_expensive_control_client() {
        let clients = lqr_clients(7);
        let cfg = FlConfig { rounds: 3, epochs: 30, batch_size: 256, ..FlConfig::default() };
        let out = run_scheme(&LqrTask, &clients, TrainingScheme::Sfl, &cfg, 5).unwrap();
        let g = out.global.unwrap();
        let target = &clients[2];
        let hat = personalize(&LqrTask, target, &g, &LrVector::uniform(3, 0.01), &cfg, 1).unwrap();
        let before = lqr_loss(&g, &target.test).unwrap().control;
        let after = lqr_loss(&hat, &target.test).unwrap().control;
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn sfl_models_are_identical() {
        let out = run_scheme(&LqrTask, &lqr_clients(8), TrainingScheme::Sfl, &small_config(), 2).unwrap();
        assert!(out.personalized.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(out.personalized[0], out.global.unwrap());
    }

    #[test]
    fn cloud_on_copies_equals_local_on_pooled_data() {
        let base = lqr_clients(9);
        let copies: Vec<_> = (0..3)
            .map(|id| ClientData { id, train: base[0].train.clone(), test: base[0].test.clone() })
            .collect();
        let tripled = vec![ClientData {
            id: 0,
            train: base[0].train.repeat(3),
            test: base[0].test.clone(),
        }];
        let cfg = small_config();
        let cloud = run_scheme(&LqrTask, &copies, TrainingScheme::Cloud, &cfg, 13).unwrap();
        let local = run_scheme(&LqrTask, &tripled, TrainingScheme::Local, &cfg, 13).unwrap();
        assert_eq!(cloud.personalized[0], local.personalized[0]);
    }

    #[test]
    fn parallel_and_serial_runs_match_bitwise() {
        let clients = lqr_clients(10);
        for scheme in TrainingScheme::ALL {
            let par = run_scheme(&LqrTask, &clients, scheme, &small_config(), 17).unwrap();
            let ser = run_scheme(&LqrTask, &clients, scheme, &FlConfig { parallel: false, ..small_config() }, 17).unwrap();
            assert_eq!(par.personalized, ser.personalized, "{scheme}");
            assert_eq!(
                serde_json::to_string(&par.history).unwrap(),
                serde_json::to_string(&ser.history).unwrap()
            );
        }
    }

    #[test]
    fn rates_capped_and_argmax_gets_base() {
        let clients = lqr_clients(11);
        let out = run_scheme(&LqrTask, &clients, TrainingScheme::Apfl, &small_config(), 4).unwrap();
        for report in &out.history {
            let max = report.sigma.iter().cloned().fold(f64::MIN, f64::max);
            for (s, l) in report.sigma.iter().zip(&report.lr) {
                assert!(*l <= 0.01);
                if *s == max {
                    assert_eq!(*l, 0.01);
                }
            }
        }
    }

    #[test]
    fn round_scheme_and_client_count_checked() {
        let clients = lqr_clients(12);
        let mut server = Server::new(global(0), 0.01);
        let cfg = small_config();
        assert!(run_round(&LqrTask, &mut server, &clients[..1], TrainingScheme::Apfl, &cfg, 0).is_err());
        assert!(run_round(&LqrTask, &mut server, &clients, TrainingScheme::Local, &cfg, 0).is_err());
        assert!(run_round(&LqrTask, &mut server, &clients[..1], TrainingScheme::Spfl, &cfg, 0).is_ok());
        assert_eq!(server.round, 1);
    }

    #[test]
    fn server_rejects_foreign_layouts() {
        let mut server = Server::new(global(0), 0.01);
        let other = ParamVector::zeros(Arc::new(Layout::from_sizes(&[("w", 8)]).unwrap()));
        assert!(matches!(server.aggregate(&[other.clone(), other], true), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_loss_reports_context() {
        struct Exploding;
        impl Task for Exploding {
            type Sample = f64;
            fn layout(&self) -> Arc<Layout> {
                Arc::new(Layout::from_sizes(&[("w", 1)]).unwrap())
            }
            fn loss_and_grad(&self, _: &ParamVector, _: &[&f64], _: u64) -> Result<(f64, Vec<f64>)> {
                Ok((f64::NAN, vec![0.0]))
            }
            fn eval_loss(&self, _: &ParamVector, _: &[f64], _: u64) -> Result<f64> {
                Ok(0.0)
            }
        }
        let client = ClientData { id: 4, train: vec![1.0], test: vec![] };
        let g = ParamVector::zeros(Exploding.layout());
        let err = contribute(&Exploding, &client, &g, &small_config(), 0).unwrap_err();
        assert_eq!(err.kind(), "numeric");
        assert!(err.to_string().contains("client 4"), "{err}");
    }
}

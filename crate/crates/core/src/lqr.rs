//! Point-mass regulator task.
//!
//! Each robot drives a unit mass with shared dynamics `x' = A x + B u` and
//! its own quadratic cost. Expert rollouts come from the optimal gain
//! (`u = -K x`) plus Gaussian actuation and state noise. The learnable model
//! holds `A_hat`, `B_hat` and `K_hat` as three parameter groups.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fl::Task;
use crate::params::{Layout, ParamVector};
use crate::rng::{rng_from, Rng};

pub const GROUP_A: &str = "A";
pub const GROUP_B: &str = "B";
pub const GROUP_K: &str = "K";

#[derive(Clone, Debug, PartialEq)]
pub struct LinSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || b.nrows() != a.nrows() {
            return Err(Error::Contract(format!(
                "A is {}x{}, B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        Ok(Self { a, b })
    }

    /// Discrete-time unit-mass system with state (position, velocity).
    pub fn point_mass() -> Self {
        Self {
            a: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LqrCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl LqrCost {
    /// Q must be symmetric positive semidefinite, R symmetric positive definite.
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let sym = |m: &DMatrix<f64>| m.is_square() && (m - m.transpose()).amax() <= 1e-12;
        if !sym(&q) || !sym(&r) {
            return Err(Error::Config("Q and R must be square and symmetric".into()));
        }
        let q_min = q.clone().symmetric_eigenvalues().min();
        if q_min < -1e-12 {
            return Err(Error::Config(format!("Q is not PSD (eigenvalue {q_min})")));
        }
        let r_min = r.clone().symmetric_eigenvalues().min();
        if !(r_min > 0.0) {
            return Err(Error::Config(format!("R is not positive definite (eigenvalue {r_min})")));
        }
        Ok(Self { q, r })
    }

    /// `Q = I_n`, scalar `R`.
    pub fn identity_q(n: usize, r: f64) -> Result<Self> {
        Self::new(DMatrix::identity(n, n), DMatrix::from_element(1, 1, r))
    }
}

#[derive(Clone, Debug)]
pub struct DareSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub iterations: usize,
}

fn check_dims(sys: &LinSystem, cost: &LqrCost) -> Result<()> {
    let (n, m) = (sys.a.nrows(), sys.b.ncols());
    if cost.q.nrows() != n || cost.r.nrows() != m {
        return Err(Error::Contract(format!(
            "cost is sized for n={}, m={} but system has n={n}, m={m}",
            cost.q.nrows(),
            cost.r.nrows()
        )));
    }
    Ok(())
}

fn gain(sys: &LinSystem, cost: &LqrCost, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let bt_p = sys.b.transpose() * p;
    let s = &cost.r + &bt_p * &sys.b;
    let s_inv = s
        .try_inverse()
        .ok_or_else(|| Error::Numeric("R + B'PB is singular".into()))?;
    Ok(s_inv * bt_p * &sys.a)
}

/// One application of `P -> A'PA - A'PB (R + B'PB)^-1 B'PA + Q`.
pub fn riccati_map(sys: &LinSystem, cost: &LqrCost, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dims(sys, cost)?;
    let at = sys.a.transpose();
    let k = gain(sys, cost, p)?;
    let next = &at * p * &sys.a - &at * p * &sys.b * k + &cost.q;
    // Keep the iterate exactly symmetric.
    Ok((&next + next.transpose()) * 0.5)
}

const DARE_MAX_ITERS: usize = 1_000_000;
const DARE_TOL: f64 = 1e-12;

/// Value iteration on the discrete Riccati equation starting from `P = Q`.
/// Stops when the largest entry change falls below `1e-12 * max(1, |P|max)`.
pub fn solve_dare(sys: &LinSystem, cost: &LqrCost) -> Result<DareSolution> {
    check_dims(sys, cost)?;
    let mut p = cost.q.clone();
    for it in 1..=DARE_MAX_ITERS {
        let next = riccati_map(sys, cost, &p)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("Riccati iterate diverged at iteration {it}")));
        }
        let change = (&next - &p).amax();
        p = next;
        if change < DARE_TOL * p.amax().max(1.0) {
            let k = gain(sys, cost, &p)?;
            return Ok(DareSolution { p, k, iterations: it });
        }
    }
    Err(Error::Numeric(format!(
        "Riccati iteration did not converge in {DARE_MAX_ITERS} iterations"
    )))
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

/// Closed-loop matrix `A - B K`.
pub fn closed_loop(sys: &LinSystem, k: &DMatrix<f64>) -> DMatrix<f64> {
    &sys.a - &sys.b * k
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub states: Vec<[f64; 2]>,
    pub controls: Vec<f64>,
}

impl Rollout {
    pub fn transitions(&self) -> impl Iterator<Item = Transition> + '_ {
        self.controls.iter().enumerate().map(|(t, &u)| Transition {
            x: self.states[t],
            u,
            x_next: self.states[t + 1],
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub x: [f64; 2],
    pub u: f64,
    pub x_next: [f64; 2],
}

fn step_point_mass(sys: &LinSystem, x: [f64; 2], u: f64) -> [f64; 2] {
    let a = &sys.a;
    let b = &sys.b;
    [
        a[(0, 0)] * x[0] + a[(0, 1)] * x[1] + b[(0, 0)] * u,
        a[(1, 0)] * x[0] + a[(1, 1)] * x[1] + b[(1, 0)] * u,
    ]
}

/// Roll out `u_t = -K x_t + e_u`, `x_{t+1} = A x_t + B u_t + e_x` for
/// `horizon` steps. The recorded control is the executed (noisy) one.
pub fn simulate_rollout(
    sys: &LinSystem,
    k: [f64; 2],
    x0: [f64; 2],
    horizon: usize,
    noise_var: f64,
    rng: &mut Rng,
) -> Result<Rollout> {
    if sys.a.nrows() != 2 || sys.b.ncols() != 1 {
        return Err(Error::Contract("point-mass rollouts need a 2x2 / 2x1 system".into()));
    }
    if !(noise_var >= 0.0) {
        return Err(Error::Config(format!("noise variance must be >= 0, got {noise_var}")));
    }
    let noise = Normal::new(0.0, noise_var.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let draw = |rng: &mut Rng| if noise_var > 0.0 { noise.sample(rng) } else { 0.0 };
    let mut states = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    let mut x = x0;
    states.push(x);
    for _ in 0..horizon {
        let u = -(k[0] * x[0] + k[1] * x[1]) + draw(rng);
        let nx = step_point_mass(sys, x, u);
        x = [nx[0] + draw(rng), nx[1] + draw(rng)];
        controls.push(u);
        states.push(x);
    }
    Ok(Rollout { states, controls })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub n_init: usize,
    pub horizon: usize,
    pub noise_var: f64,
    /// Initial position and velocity are drawn uniformly from `[-r, r]`.
    pub init_range: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            n_init: 40,
            horizon: 30,
            noise_var: 0.01,
            init_range: 5.0,
        }
    }
}

pub fn generate_rollouts(
    sys: &LinSystem,
    k: [f64; 2],
    config: &RolloutConfig,
    seed: u64,
) -> Result<Vec<Rollout>> {
    if config.n_init == 0 || config.horizon == 0 {
        return Err(Error::Config("need at least one rollout of at least one step".into()));
    }
    let mut rng = rng_from(seed, &[]);
    let r = config.init_range;
    (0..config.n_init)
        .map(|_| {
            let x0 = if r > 0.0 {
                [rng.random_range(-r..=r), rng.random_range(-r..=r)]
            } else {
                [0.0, 0.0]
            };
            simulate_rollout(sys, k, x0, config.horizon, config.noise_var, &mut rng)
        })
        .collect()
}

pub fn lqr_layout() -> Arc<Layout> {
    Arc::new(
        Layout::from_sizes(&[(GROUP_A, 4), (GROUP_B, 2), (GROUP_K, 2)])
            .expect("static layout is valid"),
    )
}

/// Parameter vector holding the given dynamics and gain.
pub fn model_from_parts(sys: &LinSystem, k: [f64; 2]) -> ParamVector {
    let a = &sys.a;
    let values = vec![
        a[(0, 0)],
        a[(0, 1)],
        a[(1, 0)],
        a[(1, 1)],
        sys.b[(0, 0)],
        sys.b[(1, 0)],
        k[0],
        k[1],
    ];
    ParamVector::new(lqr_layout(), values).expect("finite model")
}

pub fn gain_row(k: &DMatrix<f64>) -> [f64; 2] {
    [k[(0, 0)], k[(0, 1)]]
}

fn check_model(model: &ParamVector) -> Result<()> {
    if model.len() != 8 {
        return Err(Error::Contract(format!("LQR model has 8 entries, got {}", model.len())));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqrLoss {
    pub state: f64,
    pub control: f64,
    pub total: f64,
}

struct Residuals {
    state: [f64; 2],
    control: f64,
}

fn residuals(m: &[f64], tr: &Transition) -> Residuals {
    let [x0, x1] = tr.x;
    let pred = [
        m[0] * x0 + m[1] * x1 + m[4] * tr.u,
        m[2] * x0 + m[3] * x1 + m[5] * tr.u,
    ];
    Residuals {
        state: [pred[0] - tr.x_next[0], pred[1] - tr.x_next[1]],
        control: -(m[6] * x0 + m[7] * x1) - tr.u,
    }
}

/// State loss is the per-component mean squared one-step prediction error
/// (`|x_hat - x|^2 / 2`); control loss is the mean squared error of
/// `u_hat = -K_hat x`.
pub fn lqr_loss<'a, I>(model: &ParamVector, data: I) -> Result<LqrLoss>
where
    I: IntoIterator<Item = &'a Transition>,
{
    check_model(model)?;
    let m = model.values();
    let (mut s, mut c, mut n) = (0.0, 0.0, 0usize);
    for tr in data {
        let r = residuals(m, tr);
        s += 0.5 * (r.state[0] * r.state[0] + r.state[1] * r.state[1]);
        c += r.control * r.control;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Contract("LQR loss on an empty dataset".into()));
    }
    let (state, control) = (s / n as f64, c / n as f64);
    Ok(LqrLoss {
        state,
        control,
        total: state + control,
    })
}

/// Analytic gradient of the total [`lqr_loss`] with respect to the eight
/// model entries (A row-major, then B, then K).
pub fn lqr_grads<'a, I>(model: &ParamVector, batch: I) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a Transition>,
{
    check_model(model)?;
    let m = model.values();
    let mut g = [0.0; 8];
    let mut n = 0usize;
    for tr in batch {
        let r = residuals(m, tr);
        let [x0, x1] = tr.x;
        // d/dA_jk of 0.5 * r_j^2 = r_j x_k; d/dB_j = r_j u
        g[0] += r.state[0] * x0;
        g[1] += r.state[0] * x1;
        g[2] += r.state[1] * x0;
        g[3] += r.state[1] * x1;
        g[4] += r.state[0] * tr.u;
        g[5] += r.state[1] * tr.u;
        // d/dK_k of c^2 with c = -K x - u is -2 c x_k
        g[6] += -2.0 * r.control * x0;
        g[7] += -2.0 * r.control * x1;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Contract("LQR gradient on an empty batch".into()));
    }
    Ok(g.iter().map(|v| v / n as f64).collect())
}

/// Euclidean distance of (A_hat, B_hat) to the true dynamics and of K_hat to
/// the true gain.
pub fn param_distance(model: &ParamVector, sys: &LinSystem, k_true: [f64; 2]) -> Result<(f64, f64)> {
    check_model(model)?;
    let truth = model_from_parts(sys, k_true);
    let (m, t) = (model.values(), truth.values());
    let d = |r: std::ops::Range<usize>| {
        r.map(|i| (m[i] - t[i]) * (m[i] - t[i])).sum::<f64>().sqrt()
    };
    Ok((d(0..6), d(6..8)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LqrFleetConfig {
    /// Control weights, one robot per entry; `Q = I` for every robot.
    pub r_values: Vec<f64>,
    pub rollouts: RolloutConfig,
    /// Fraction of rollouts held out per robot for testing.
    pub test_fraction: f64,
}

impl Default for LqrFleetConfig {
    fn default() -> Self {
        Self {
            r_values: vec![1.0, 50.0, 100.0],
            rollouts: RolloutConfig::default(),
            test_fraction: 0.1,
        }
    }
}

/// One robot's private data and ground truth.
#[derive(Clone, Debug)]
pub struct LqrRobotData {
    pub robot_id: usize,
    pub r: f64,
    pub k_true: [f64; 2],
    pub train: Vec<Transition>,
    pub test: Vec<Transition>,
    pub train_rollouts: Vec<usize>,
    pub test_rollouts: Vec<usize>,
    pub rollouts: Vec<Rollout>,
}

/// Generate every robot's rollouts and split them at rollout granularity.
pub fn generate_fleet(config: &LqrFleetConfig, seed: u64) -> Result<Vec<LqrRobotData>> {
    if config.r_values.is_empty() {
        return Err(Error::Config("fleet needs at least one robot".into()));
    }
    if !(0.0..1.0).contains(&config.test_fraction) {
        return Err(Error::Config("test_fraction must lie in [0, 1)".into()));
    }
    let sys = LinSystem::point_mass();
    config
        .r_values
        .iter()
        .enumerate()
        .map(|(id, &r)| {
            let cost = LqrCost::identity_q(2, r)?;
            let k = gain_row(&solve_dare(&sys, &cost)?.k);
            let rollouts = generate_rollouts(&sys, k, &config.rollouts, crate::rng::derive_seed(seed, &[id as u64]))?;
            let n = rollouts.len();
            let n_test = ((n as f64) * config.test_fraction).round() as usize;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng_from(seed, &[id as u64, 1]));
            let mut test_rollouts = order[..n_test].to_vec();
            let mut train_rollouts = order[n_test..].to_vec();
            test_rollouts.sort_unstable();
            train_rollouts.sort_unstable();
            let collect = |ids: &[usize]| -> Vec<Transition> {
                ids.iter().flat_map(|&i| rollouts[i].transitions()).collect()
            };
            Ok(LqrRobotData {
                robot_id: id,
                r,
                k_true: k,
                train: collect(&train_rollouts),
                test: collect(&test_rollouts),
                train_rollouts,
                test_rollouts,
                rollouts,
            })
        })
        .collect()
}

/// One transition as written to a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub robot_id: usize,
    pub rollout: usize,
    pub split: String,
    pub t: usize,
    pub x_t: [f64; 2],
    pub u_t: f64,
    pub x_next: [f64; 2],
}

pub fn transition_records(robot: &LqrRobotData) -> Vec<TransitionRecord> {
    let mut out = Vec::new();
    for (idx, ro) in robot.rollouts.iter().enumerate() {
        let split = if robot.test_rollouts.contains(&idx) { "test" } else { "train" };
        for (t, tr) in ro.transitions().enumerate() {
            out.push(TransitionRecord {
                robot_id: robot.robot_id,
                rollout: idx,
                split: split.to_string(),
                t,
                x_t: tr.x,
                u_t: tr.u,
                x_next: tr.x_next,
            });
        }
    }
    out
}

/// Learning task adapter: mean LQR loss over transitions.
#[derive(Clone, Debug, Default)]
pub struct LqrTask;

impl Task for LqrTask {
    type Sample = Transition;

    fn layout(&self) -> Arc<Layout> {
        lqr_layout()
    }

    fn loss_and_grad(&self, params: &ParamVector, batch: &[&Transition], _seed: u64) -> Result<(f64, Vec<f64>)> {
        let loss = lqr_loss(params, batch.iter().copied())?;
        let grad = lqr_grads(params, batch.iter().copied())?;
        Ok((loss.total, grad))
    }

    fn eval_loss(&self, params: &ParamVector, data: &[Transition], _seed: u64) -> Result<f64> {
        Ok(lqr_loss(params, data)?.total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;

    fn k_for(r: f64) -> DMatrix<f64> {
        solve_dare(&LinSystem::point_mass(), &LqrCost::identity_q(2, r).unwrap())
            .unwrap()
            .k
    }

    #[test]
    fn expensive_control_drives_gain_to_zero() {
        // The double integrator is only marginally stable, so the gain decays
        // like sqrt(2) * R^(-1/4) instead of vanishing quickly.
        let k6 = k_for(1e6).norm();
        assert!((k6 - 0.044_737_141_588).abs() < 1e-8, "|K| = {k6}");
        let k10 = k_for(1e10).norm();
        assert!(k10 < 1e-2 && (k10 * 1e10f64.powf(0.25) - 2f64.sqrt()).abs() < 1e-3);
    }

    #[test]
    fn dare_fixed_point_and_stability() {
        let sys = LinSystem::point_mass();
        for r in [1.0, 50.0, 100.0] {
            let cost = LqrCost::identity_q(2, r).unwrap();
            let sol = solve_dare(&sys, &cost).unwrap();
            let res = (riccati_map(&sys, &cost, &sol.p).unwrap() - &sol.p).amax();
            assert!(res < 1e-9, "R={r}: residual {res}");
            let rho = spectral_radius(&closed_loop(&sys, &sol.k));
            assert!(rho < 1.0, "R={r}: spectral radius {rho}");
        }
    }

    #[test]
    fn gain_invariant_under_cost_scaling() {
        let sys = LinSystem::point_mass();
        let a = solve_dare(&sys, &LqrCost::identity_q(2, 1.0).unwrap()).unwrap().k;
        let scaled = LqrCost::new(DMatrix::identity(2, 2) * 100.0, DMatrix::from_element(1, 1, 100.0)).unwrap();
        let b = solve_dare(&sys, &scaled).unwrap().k;
        assert!((a - b).amax() < 1e-10);
    }

    #[test]
    fn cost_validation() {
        assert!(LqrCost::identity_q(2, 0.0).is_err());
        assert!(LqrCost::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]), DMatrix::from_element(1, 1, 1.0)).is_err());
        assert!(LqrCost::new(-DMatrix::identity(2, 2), DMatrix::from_element(1, 1, 1.0)).is_err());
        let bad_dims = LqrCost::identity_q(3, 1.0).unwrap();
        assert!(solve_dare(&LinSystem::point_mass(), &bad_dims).is_err());
    }

    #[test]
    fn noiseless_equilibrium_stays_at_origin() {
        let sys = LinSystem::point_mass();
        let k = gain_row(&k_for(1.0));
        let mut rng = rng_from(1, &[]);
        let ro = simulate_rollout(&sys, k, [0.0, 0.0], 30, 0.0, &mut rng).unwrap();
        assert!(ro.states.iter().all(|s| *s == [0.0, 0.0]));
        assert!(ro.controls.iter().all(|u| *u == 0.0));
    }

    #[test]
    fn noiseless_rollouts_decay() {
        let sys = LinSystem::point_mass();
        let k = gain_row(&k_for(1.0));
        let cfg = RolloutConfig { noise_var: 0.0, ..Default::default() };
        for ro in generate_rollouts(&sys, k, &cfg, 3).unwrap() {
            let n = |s: [f64; 2]| (s[0] * s[0] + s[1] * s[1]).sqrt();
            assert!(n(ro.states[30]) < n(ro.states[0]));
        }
    }

    #[test]
    fn fleet_sizes_and_determinism() {
        let cfg = LqrFleetConfig::default();
        let fleet = generate_fleet(&cfg, 42).unwrap();
        assert_eq!(fleet.len(), 3);
        let total: usize = fleet.iter().map(|r| r.train.len() + r.test.len()).sum();
        assert_eq!(total, 3_600);
        for r in &fleet {
            assert_eq!(r.train.len() + r.test.len(), 1_200);
            assert_eq!(r.test_rollouts.len(), 4);
            assert_eq!(r.test.len(), 120);
        }
        let again = generate_fleet(&cfg, 42).unwrap();
        assert_eq!(fleet[2].train, again[2].train);
        // Robots differ only through K: same noise-free dynamics, different gains.
        assert!(fleet[0].k_true != fleet[1].k_true);
        assert_eq!(transition_records(&fleet[0]).len(), 1_200);
    }

    #[test]
    fn exact_model_has_zero_loss_without_noise() {
        let sys = LinSystem::point_mass();
        let k = gain_row(&k_for(50.0));
        let cfg = RolloutConfig { noise_var: 0.0, n_init: 5, ..Default::default() };
        let data: Vec<Transition> = generate_rollouts(&sys, k, &cfg, 9)
            .unwrap()
            .iter()
            .flat_map(|r| r.transitions().collect::<Vec<_>>())
            .collect();
        let loss = lqr_loss(&model_from_parts(&sys, k), &data).unwrap();
        assert!(loss.total < 1e-24, "{loss:?}");
        let g = lqr_grads(&model_from_parts(&sys, k), &data).unwrap();
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-10);
    }

    #[test]
    fn exact_model_sits_at_the_noise_floor() {
        // Per-component state noise and control noise both have variance 0.01,
        // so with per-component averaging both losses approach 0.01.
        let sys = LinSystem::point_mass();
        let k = gain_row(&k_for(1.0));
        let cfg = RolloutConfig { n_init: 400, ..Default::default() };
        let data: Vec<Transition> = generate_rollouts(&sys, k, &cfg, 5)
            .unwrap()
            .iter()
            .flat_map(|r| r.transitions().collect::<Vec<_>>())
            .collect();
        let loss = lqr_loss(&model_from_parts(&sys, k), &data).unwrap();
        assert!((loss.state - 0.01).abs() < 0.0005, "{loss:?}");
        assert!((loss.control - 0.01).abs() < 0.0005, "{loss:?}");
        assert_eq!(loss.total, loss.state + loss.control);
    }

    #[test]
    fn zero_model_loss_is_target_energy() {
        let data = vec![
            Transition { x: [1.0, 2.0], u: 0.5, x_next: [3.0, -1.0] },
            Transition { x: [0.0, 1.0], u: -2.0, x_next: [1.0, 1.0] },
        ];
        let zero = ParamVector::zeros(lqr_layout());
        let loss = lqr_loss(&zero, &data).unwrap();
        let expected_state = (0.5 * (9.0 + 1.0) + 0.5 * (1.0 + 1.0)) / 2.0;
        let expected_control = (0.25 + 4.0) / 2.0;
        assert_eq!(loss.state, expected_state);
        assert_eq!(loss.control, expected_control);
        assert!(lqr_loss(&zero, &[]).is_err());
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut rng = rng_from(21, &[]);
        let data: Vec<Transition> = (0..25)
            .map(|_| Transition {
                x: [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
                u: rng.random_range(-2.0..2.0),
                x_next: [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
            })
            .collect();
        for _ in 0..5 {
            let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.5..1.5)).collect();
            let f = |v: &[f64]| -> Result<(f64, Vec<f64>)> {
                let p = ParamVector::new(lqr_layout(), v.to_vec())?;
                Ok((lqr_loss(&p, &data)?.total, lqr_grads(&p, &data)?))
            };
            let err = finite_diff_check(f, &x, 1e-5).unwrap();
            assert!(err < 1e-6, "relative error {err}");
        }
    }

    #[test]
    fn duplicated_batch_keeps_gradient() {
        let data = vec![
            Transition { x: [1.0, -2.0], u: 0.3, x_next: [0.5, 0.1] },
            Transition { x: [0.2, 0.4], u: -1.0, x_next: [-0.3, 0.9] },
        ];
        let doubled: Vec<Transition> = data.iter().chain(data.iter()).copied().collect();
        let p = ParamVector::new(lqr_layout(), vec![0.9, 1.1, 0.1, 0.8, 0.2, 0.7, 0.4, 0.6]).unwrap();
        let a = lqr_grads(&p, &data).unwrap();
        let b = lqr_grads(&p, &doubled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn distance_examples() {
        let sys = LinSystem::point_mass();
        let k = [0.6, 1.2];
        let truth = model_from_parts(&sys, k);
        assert_eq!(param_distance(&truth, &sys, k).unwrap(), (0.0, 0.0));
        let off = model_from_parts(&sys, [0.9, 1.6]);
        let (d, c) = param_distance(&off, &sys, k).unwrap();
        assert_eq!(d, 0.0);
        assert!((c - 0.5).abs() < 1e-12);
    }
}

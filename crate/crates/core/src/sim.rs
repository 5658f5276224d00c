//! Two-lane kinematic driving simulator with a synthetic human driver, an
//! enumerating MPC robot controller and a static LQR lane-change phase.
//!
//! Coordinates: `x` is lateral, `y` longitudinal (direction of travel). The
//! robot starts in lane 0 (`x = 0`) and the human in lane 1
//! (`x = lane_width`). In the lane-change scenario a gray car travels
//! straight in the human's lane at constant speed.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DMatrix;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lqr::{solve_dare, LinSystem, LqrCost};
use crate::rng::{derive_seed, rng_from};

/// Legal throttles in enumeration order. The neutral value comes first so
/// that planner ties resolve to holding speed and heading.
pub const THROTTLES: [f64; 3] = [0.0, 1.5, -1.5];
pub const STEERS: [f64; 3] = [0.0, 0.04, -0.04];

fn snap(value: f64, set: &[f64; 3]) -> f64 {
    // Ties resolve toward the earlier entry, i.e. toward zero.
    let mut best = set[0];
    for &c in &set[1..] {
        if (value - c).abs() < (value - best).abs() {
            best = c;
        }
    }
    best
}

/// One car's throttle (m/s²) and steering (rad per step).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub throttle: f64,
    pub steer: f64,
}

impl Control {
    pub const ZERO: Control = Control { throttle: 0.0, steer: 0.0 };

    pub fn new(throttle: f64, steer: f64) -> Self {
        Self { throttle, steer }
    }

    /// Joint action `d` in `0..9`: throttle `d / 3`, steering `d % 3`.
    pub fn from_index(d: usize) -> Self {
        Self { throttle: THROTTLES[d / 3], steer: STEERS[d % 3] }
    }

    pub fn index(self) -> Option<usize> {
        let t = THROTTLES.iter().position(|&v| v == self.throttle)?;
        let s = STEERS.iter().position(|&v| v == self.steer)?;
        Some(3 * t + s)
    }

    pub fn is_legal(self) -> bool {
        self.index().is_some()
    }

    /// Nearest legal control.
    pub fn snapped(self) -> Self {
        Self { throttle: snap(self.throttle, &THROTTLES), steer: snap(self.steer, &STEERS) }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CarState {
    pub px: f64,
    pub py: f64,
    pub vx: f64,
    pub vy: f64,
    pub heading: f64,
}

impl CarState {
    /// A car at `(px, py)` driving straight along `+y` at `speed`.
    pub fn straight(px: f64, py: f64, speed: f64) -> Self {
        Self { px, py, vx: 0.0, vy: speed, heading: 0.0 }
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    /// Unicycle update with real-valued inputs; speed is floored at zero.
    pub fn advance(&self, throttle: f64, steer: f64, dt: f64) -> Self {
        let heading = self.heading + steer;
        let speed = (self.speed() + throttle * dt).max(0.0);
        let (vx, vy) = (speed * heading.sin(), speed * heading.cos());
        Self { px: self.px + vx * dt, py: self.py + vy * dt, vx, vy, heading }
    }

    pub fn is_finite(&self) -> bool {
        [self.px, self.py, self.vx, self.vy, self.heading].iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    LaneSwap,
    LaneChange,
}

impl Scenario {
    /// Context flag fed to the forecaster.
    pub fn id(self) -> u8 {
        match self {
            Scenario::LaneSwap => 0,
            Scenario::LaneChange => 1,
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lane-swap" => Ok(Scenario::LaneSwap),
            "lane-change" => Ok(Scenario::LaneChange),
            _ => Err(Error::Config(format!("unknown scenario '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlTuple {
    pub robot: Control,
    pub human: Control,
}

impl ControlTuple {
    pub const ZERO: ControlTuple = ControlTuple { robot: Control::ZERO, human: Control::ZERO };
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub robot: CarState,
    pub human: CarState,
    pub third_car: Option<CarState>,
    pub t: usize,
    pub dt: f64,
}

impl WorldState {
    pub fn scenario(&self) -> Scenario {
        if self.third_car.is_some() {
            Scenario::LaneChange
        } else {
            Scenario::LaneSwap
        }
    }

    /// Advance every car one step. The gray car coasts.
    pub fn step(&self, controls: &ControlTuple) -> Result<Self> {
        if !controls.robot.is_legal() || !controls.human.is_legal() {
            return Err(Error::Contract(format!("illegal controls {controls:?}")));
        }
        Ok(self.step_real(controls.robot, controls.human))
    }

    /// [`WorldState::step`] without the legality check, for planning with
    /// real-valued forecasts.
    pub fn step_real(&self, robot: Control, human: Control) -> Self {
        Self {
            robot: self.robot.advance(robot.throttle, robot.steer, self.dt),
            human: self.human.advance(human.throttle, human.steer, self.dt),
            third_car: self.third_car.map(|g| g.advance(0.0, 0.0, self.dt)),
            t: self.t + 1,
            dt: self.dt,
        }
    }

    pub fn robot_human_distance(&self) -> f64 {
        (self.robot.px - self.human.px).hypot(self.robot.py - self.human.py)
    }
}

// ---------------------------------------------------------------------------
// Synthetic human driver

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriverParams {
    pub gamma: f64,
    pub v_high: f64,
    pub v_low: f64,
    pub d_safe: f64,
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl Default for DriverParams {
    fn default() -> Self {
        Self { gamma: 0.0, v_high: 10.0, v_low: 5.0, d_safe: 10.0, kp: 0.5, ki: 0.0, kd: 0.1 }
    }
}

impl DriverParams {
    pub fn with_gamma(gamma: f64) -> Self {
        Self { gamma, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [-1, 1]", self.gamma)));
        }
        if !(self.v_high > self.v_low && self.v_low > 0.0) {
            return Err(Error::Config("driver speeds need v_high > v_low > 0".into()));
        }
        if !(self.d_safe > 0.0) {
            return Err(Error::Config("d_safe must be positive".into()));
        }
        Ok(())
    }
}

/// Relative gap `(p_hy - p_ry) + (v_hy - v_ry)`.
pub fn relative_gap(world: &WorldState) -> f64 {
    (world.human.py - world.robot.py) + (world.human.vy - world.robot.vy)
}

/// `v_high` when `gamma * D_rel >= 0` and the human leads the gray car by at
/// least `d_safe`; `v_low` otherwise. Without a gray car only the first
/// condition applies.
pub fn target_velocity(world: &WorldState, params: &DriverParams) -> f64 {
    let willing = params.gamma * relative_gap(world) >= 0.0;
    let clear = world.third_car.is_none_or(|g| world.human.py - g.py >= params.d_safe);
    if willing && clear {
        params.v_high
    } else {
        params.v_low
    }
}

/// PID speed tracker around [`target_velocity`]; lane keeping only.
#[derive(Clone, Debug)]
pub struct SyntheticDriver {
    pub params: DriverParams,
    integral: f64,
    prev_error: Option<f64>,
}

impl SyntheticDriver {
    pub fn new(params: DriverParams) -> Self {
        Self { params, integral: 0.0, prev_error: None }
    }

    pub fn act(&mut self, world: &WorldState) -> Control {
        let error = target_velocity(world, &self.params) - world.human.vy;
        self.integral += error * world.dt;
        let derivative = self.prev_error.map_or(0.0, |p| (error - p) / world.dt);
        self.prev_error = Some(error);
        let command = self.params.kp * error + self.params.ki * self.integral + self.params.kd * derivative;
        Control::new(snap(command, &THROTTLES), 0.0)
    }
}

// ---------------------------------------------------------------------------
// Forecasting interface and MPC

/// One history step: the state `S_j` together with the controls `C_{j-1}`
/// that produced it (zero controls before the first step).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub world: WorldState,
    pub controls: ControlTuple,
}

/// Candidate robot control sequences of length `tau`, enumerated in base 9
/// with the first step as the most significant digit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CandidateSet {
    pub tau: usize,
}

impl CandidateSet {
    pub fn new(tau: usize) -> Result<Self> {
        if tau == 0 || tau > 6 {
            return Err(Error::Config(format!("tau must be in 1..=6, got {tau}")));
        }
        Ok(Self { tau })
    }

    pub fn len(&self) -> usize {
        9usize.pow(self.tau as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn digit(&self, index: usize, step: usize) -> usize {
        (index / 9usize.pow((self.tau - 1 - step) as u32)) % 9
    }

    pub fn candidate(&self, index: usize) -> Vec<Control> {
        (0..self.tau).map(|s| Control::from_index(self.digit(index, s))).collect()
    }
}

/// Human control forecasts, indexed `[candidate][sample][step]`.
pub type Forecasts = Vec<Vec<Vec<Control>>>;

pub trait Forecaster: Sync {
    /// `n_samples` forecasts of the next `candidates.tau` human controls for
    /// every candidate, conditioned on `history` (oldest first, current
    /// state last).
    fn forecast(
        &self,
        history: &[HistoryEntry],
        candidates: &CandidateSet,
        n_samples: usize,
        seed: u64,
    ) -> Result<Forecasts>;

    /// A deterministic forecaster ignores `seed` and returns identical samples.
    fn is_deterministic(&self) -> bool {
        false
    }
}

/// The current human control repeated `tau` times.
pub fn naive_predictor(current: Control, tau: usize) -> Vec<Control> {
    vec![current; tau]
}

/// Forecaster that ignores the candidate and predicts the current human
/// control for every future step.
#[derive(Clone, Copy, Debug, Default)]
pub struct NaiveForecaster;

impl Forecaster for NaiveForecaster {
    fn forecast(&self, history: &[HistoryEntry], candidates: &CandidateSet, n: usize, _: u64) -> Result<Forecasts> {
        let current = history.last().map_or(Control::ZERO, |h| h.controls.human);
        let seq = naive_predictor(current, candidates.tau);
        Ok(vec![vec![seq; n]; candidates.len()])
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau: usize,
    pub horizon: usize,
    pub n_samples: usize,
    /// Floor applied to the per-step cost (`max(c_low, J)`).
    pub c_low: Option<f64>,
    /// Weight of the squared excursion of the robot beyond its lane corridor
    /// during planning.
    pub lane_penalty: f64,
    /// Evaluate candidates on the rayon pool. Plans do not depend on it.
    pub parallel: bool,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            alpha: -3.0,
            beta: 5000.0,
            tau: 3,
            horizon: 20,
            n_samples: 5,
            c_low: Some(0.0),
            lane_penalty: 1.0e4,
            parallel: true,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 || self.horizon <= self.tau {
            return Err(Error::Config(format!(
                "need horizon > tau >= 1, got tau {} horizon {}",
                self.tau, self.horizon
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        CandidateSet::new(self.tau).map(|_| ())
    }
}

/// `J = alpha (p_ry - p_hy)(v_ry - v_hy) + beta / |p_r - p_h|`, floored at
/// `c_low` when configured.
pub fn mpc_cost(world: &WorldState, config: &MpcConfig) -> Result<f64> {
    let dist = world.robot_human_distance();
    if !(dist > 0.0) {
        return Err(Error::Numeric("robot and human positions coincide".into()));
    }
    let j = config.alpha * (world.robot.py - world.human.py) * (world.robot.vy - world.human.vy)
        + config.beta / dist;
    Ok(config.c_low.map_or(j, |c| c.max(j)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub controls: Vec<Control>,
    pub index: usize,
    pub expected_cost: f64,
    /// Number of candidate sequences scored.
    pub evaluated: usize,
}

/// Expected accumulated cost of every candidate under `forecasts`.
pub fn candidate_costs(
    world: &WorldState,
    forecasts: &Forecasts,
    candidates: &CandidateSet,
    config: &MpcConfig,
    lane_center: f64,
    corridor: f64,
    counter: &AtomicUsize,
) -> Result<Vec<f64>> {
    if forecasts.len() != candidates.len() {
        return Err(Error::Contract(format!(
            "{} forecasts for {} candidates",
            forecasts.len(),
            candidates.len()
        )));
    }
    let score = |index: usize| -> Result<f64> {
        counter.fetch_add(1, Ordering::Relaxed);
        let plan = candidates.candidate(index);
        let samples = &forecasts[index];
        let mut total = 0.0;
        for human in samples {
            let mut w = *world;
            for h in 0..config.horizon {
                let k = h.min(candidates.tau - 1);
                w = w.step_real(plan[k], human[k.min(human.len() - 1)]);
                total += mpc_cost(&w, config)?;
                let excess = ((w.robot.px - lane_center).abs() - corridor).max(0.0);
                total += config.lane_penalty * excess * excess;
            }
        }
        Ok(total / samples.len() as f64)
    };
    if config.parallel {
        (0..candidates.len()).into_par_iter().map(score).collect()
    } else {
        (0..candidates.len()).map(score).collect()
    }
}

/// Enumerate all `9^tau` candidates and return the cheapest; ties go to the
/// lowest index.
pub fn mpc_plan(
    history: &[HistoryEntry],
    forecaster: &dyn Forecaster,
    config: &MpcConfig,
    geometry: &Geometry,
    seed: u64,
) -> Result<Plan> {
    config.validate()?;
    let world = history
        .last()
        .ok_or_else(|| Error::Contract("planning needs at least the current state".into()))?
        .world;
    let candidates = CandidateSet::new(config.tau)?;
    let n = if forecaster.is_deterministic() { 1 } else { config.n_samples };
    let forecasts = forecaster.forecast(history, &candidates, n, seed)?;
    let counter = AtomicUsize::new(0);
    let costs = candidate_costs(&world, &forecasts, &candidates, config, 0.0, geometry.corridor(), &counter)?;
    let (index, expected_cost) = costs
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, c)| if c < best.1 { (i, c) } else { best });
    if !expected_cost.is_finite() {
        return Err(Error::Numeric("no candidate has a finite expected cost".into()));
    }
    Ok(Plan {
        controls: candidates.candidate(index),
        index,
        expected_cost,
        evaluated: counter.into_inner(),
    })
}

// ---------------------------------------------------------------------------
// Lane-change phase

/// LQR on (lateral error, lateral velocity, speed error) linearized about
/// straight driving at a nominal speed. Lateral velocity is weighted by
/// `1 / speed^2`, which amounts to a unit weight on heading.
#[derive(Clone, Debug, PartialEq)]
pub struct LaneChangeController {
    /// Rows: steering, throttle.
    pub gain: [[f64; 3]; 2],
}

impl LaneChangeController {
    pub fn new(nominal_speed: f64, dt: f64) -> Result<Self> {
        let s = nominal_speed;
        let a = DMatrix::from_row_slice(3, 3, &[1.0, dt, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(3, 2, &[s * dt, 0.0, s, 0.0, 0.0, dt]);
        let q = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 1.0 / (s * s), 1.0]));
        let sol = solve_dare(&LinSystem::new(a, b)?, &LqrCost::new(q, DMatrix::identity(2, 2))?)?;
        let k = sol.k;
        Ok(Self {
            gain: [[k[(0, 0)], k[(0, 1)], k[(0, 2)]], [k[(1, 0)], k[(1, 1)], k[(1, 2)]]],
        })
    }

    /// Snapped `u = -K e` toward lateral position `target_x` at speed `target_v`.
    pub fn act(&self, car: &CarState, target_x: f64, target_v: f64) -> Control {
        let e = [car.px - target_x, car.vx, car.speed() - target_v];
        let u = |row: &[f64; 3]| -(row[0] * e[0] + row[1] * e[1] + row[2] * e[2]);
        Control::new(u(&self.gain[1]), u(&self.gain[0])).snapped()
    }
}

/// [`LaneChangeController`] relinearized at the robot's current speed.
pub fn lane_change_controller(world: &WorldState, target_lane_x: f64, target_v: f64) -> Result<Control> {
    let ctl = LaneChangeController::new(world.robot.speed().max(1.0), world.dt)?;
    Ok(ctl.act(&world.robot, target_lane_x, target_v))
}

// ---------------------------------------------------------------------------
// Episodes

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Geometry {
    pub lane_width: f64,
    pub car_length: f64,
    pub car_width: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self { lane_width: 4.0, car_length: 4.5, car_width: 2.0 }
    }
}

impl Geometry {
    /// Half-width of the band the robot's center may occupy inside its lane.
    pub fn corridor(&self) -> f64 {
        (self.lane_width - self.car_width) / 2.0
    }

    pub fn overlaps(&self, a: &CarState, b: &CarState) -> bool {
        (a.px - b.px).abs() < self.car_width && (a.py - b.py).abs() < self.car_length
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub mpc: MpcConfig,
    pub geometry: Geometry,
    /// Longitudinal gap that switches the robot to the lane-change phase.
    pub trigger_gap: f64,
    /// Lateral tolerance for declaring the lane change complete.
    pub completion_tol: f64,
    /// Speed kept above (below) cars the robot merges ahead of (behind).
    pub merge_margin: f64,
    /// Lane-change target speed is raised to this when the robot triggers
    /// the change nearly stopped.
    pub min_merge_speed: f64,
    pub max_steps: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            mpc: MpcConfig::default(),
            geometry: Geometry::default(),
            trigger_gap: 8.0,
            completion_tol: 0.1,
            merge_margin: 0.5,
            min_merge_speed: 3.0,
            max_steps: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStep {
    pub t: usize,
    pub world: WorldState,
    pub controls: ControlTuple,
    /// Cost of the state reached after applying `controls`.
    pub cost: f64,
    pub phase: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub steps: Vec<EpisodeStep>,
    pub final_world: WorldState,
    /// Seconds until the lane change starts; `None` means it never did.
    pub commence_time: Option<f64>,
    /// Robot-human distance when the lane change starts.
    pub commence_distance: Option<f64>,
    pub mean_cost: f64,
    pub collision: bool,
    pub completed: bool,
}

impl Episode {
    /// States `S_0..S_T` of the trace.
    pub fn states(&self) -> Vec<WorldState> {
        let mut s: Vec<WorldState> = self.steps.iter().map(|e| e.world).collect();
        s.push(self.final_world);
        s
    }

    pub fn controls(&self) -> Vec<ControlTuple> {
        self.steps.iter().map(|e| e.controls).collect()
    }

    pub fn mean_human_speed(&self) -> f64 {
        let states = self.states();
        states.iter().map(|w| w.human.speed()).sum::<f64>() / states.len() as f64
    }
}

/// Human speed averaged over every recorded state of every episode.
pub fn pooled_human_speed(episodes: &[Episode]) -> f64 {
    let (sum, n) = episodes.iter().flat_map(|e| e.states()).fold((0.0, 0usize), |(s, n), w| (s + w.human.speed(), n + 1));
    if n == 0 { f64::NAN } else { sum / n as f64 }
}

/// History window of length `w` ending at `states[t]`, padded at the start
/// with the initial state and zero controls.
pub fn history_window(states: &[WorldState], controls: &[ControlTuple], t: usize, w: usize) -> Vec<HistoryEntry> {
    (0..w)
        .map(|i| {
            let j = t as isize - (w - 1 - i) as isize;
            if j <= 0 {
                HistoryEntry {
                    world: states[j.max(0) as usize],
                    controls: ControlTuple::ZERO,
                }
            } else {
                let j = j as usize;
                HistoryEntry { world: states[j], controls: controls[j - 1] }
            }
        })
        .collect()
}

fn collided(world: &WorldState, g: &Geometry) -> bool {
    g.overlaps(&world.robot, &world.human) || world.third_car.is_some_and(|c| g.overlaps(&world.robot, &c))
}

/// Gap to `other` is at least `gap` and not closing.
fn clear_of(robot: &CarState, other: &CarState, gap: f64) -> bool {
    let d = robot.py - other.py;
    d.abs() >= gap && d * (robot.vy - other.vy) >= 0.0
}

fn window_open(world: &WorldState, config: &EpisodeConfig) -> bool {
    let gap = config.trigger_gap;
    clear_of(&world.robot, &world.human, gap) && world.third_car.is_none_or(|g| clear_of(&world.robot, &g, gap))
}

/// Lane-change speed: the speed at the trigger, kept clear of every car in
/// the target lane so that a gap never closes during the maneuver.
fn merge_speed(world: &WorldState, base: f64, config: &EpisodeConfig) -> f64 {
    let margin = config.merge_margin;
    let base = base.max(config.min_merge_speed);
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for car in std::iter::once(&world.human).chain(world.third_car.as_ref()) {
        if world.robot.py >= car.py {
            lo = lo.max(car.vy + margin);
        } else {
            hi = hi.min(car.vy - margin);
        }
    }
    if lo > hi { base } else { base.clamp(lo, hi).max(0.0) }
}

/// Simulate one episode: MPC every `tau` steps until the longitudinal gap
/// opens, then the lane-change controller until the robot settles in the
/// human's lane, a collision, or `max_steps`.
pub fn run_episode(
    init: &WorldState,
    forecaster: &dyn Forecaster,
    driver: &DriverParams,
    config: &EpisodeConfig,
    history_len: usize,
    seed: u64,
) -> Result<Episode> {
    driver.validate()?;
    config.mpc.validate()?;
    if history_len == 0 {
        return Err(Error::Config("history window must be >= 1".into()));
    }
    let geometry = &config.geometry;
    let target_x = geometry.lane_width;
    let mut human = SyntheticDriver::new(driver.clone());
    let mut states = vec![*init];
    let mut controls: Vec<ControlTuple> = Vec::new();
    let mut steps = Vec::new();
    let mut queue: Vec<Control> = Vec::new();
    let mut phase_two: Option<f64> = None;
    let (mut commence_time, mut commence_distance) = (None, None);
    let (mut collision, mut completed) = (collided(init, geometry), false);
    let mut world = *init;

    while !collision && !completed && steps.len() < config.max_steps {
        let t = steps.len();
        if phase_two.is_none() && window_open(&world, config) {
            phase_two = Some(world.robot.speed());
            commence_time = Some(t as f64 * world.dt);
            commence_distance = Some(world.robot_human_distance());
        }
        let robot = match phase_two {
            Some(v) => lane_change_controller(&world, target_x, merge_speed(&world, v, config))?,
            None => {
                if queue.is_empty() {
                    let hist = history_window(&states, &controls, t, history_len);
                    let plan = mpc_plan(&hist, forecaster, &config.mpc, geometry, derive_seed(seed, &[t as u64]))?;
                    queue = plan.controls;
                    queue.reverse();
                }
                queue.pop().expect("plan is non-empty")
            }
        };
        let c = ControlTuple { robot, human: human.act(&world) };
        let next = world.step(&c)?;
        let cost = mpc_cost(&next, &config.mpc).unwrap_or(f64::INFINITY);
        steps.push(EpisodeStep {
            t,
            world,
            controls: c,
            cost,
            phase: if phase_two.is_some() { 2 } else { 1 },
        });
        controls.push(c);
        states.push(next);
        world = next;
        collision = collided(&world, geometry);
        completed = phase_two.is_some()
            && (world.robot.px - target_x).abs() < config.completion_tol
            && world.robot.heading.abs() < 1e-9 + STEERS[1] / 2.0;
    }
    let mean_cost = if steps.is_empty() {
        mpc_cost(init, &config.mpc).unwrap_or(f64::INFINITY)
    } else {
        steps.iter().map(|s| s.cost).sum::<f64>() / steps.len() as f64
    };
    Ok(Episode { steps, final_world: world, commence_time, commence_distance, mean_cost, collision, completed })
}

// ---------------------------------------------------------------------------
// Initial states

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitRanges {
    pub robot_speed: (f64, f64),
    pub human_speed: (f64, f64),
    /// Human longitudinal position relative to the robot.
    pub human_offset: (f64, f64),
    pub gray_speed: (f64, f64),
    /// Gray car longitudinal position relative to the human.
    pub gray_offset: (f64, f64),
    /// Minimum longitudinal clearance between the gray car and the human.
    pub min_gray_gap: f64,
    pub dt: f64,
}

impl Default for InitRanges {
    fn default() -> Self {
        Self {
            robot_speed: (6.0, 9.0),
            human_speed: (6.0, 9.0),
            human_offset: (-10.0, 10.0),
            gray_speed: (5.0, 8.0),
            gray_offset: (-30.0, 30.0),
            min_gray_gap: 6.0,
            dt: 0.1,
        }
    }
}

impl InitRanges {
    /// Tight spacing where robot and human start nearly alongside.
    pub fn challenging() -> Self {
        Self { human_offset: (-3.0, 3.0), robot_speed: (7.0, 8.0), human_speed: (7.0, 8.0), ..Self::default() }
    }
}

fn uniform(rng: &mut crate::rng::Rng, (lo, hi): (f64, f64)) -> Result<f64> {
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Config(format!("invalid range ({lo}, {hi})")));
    }
    Ok(if lo == hi { lo } else { rng.random_range(lo..hi) })
}

/// `n` seeded initial worlds. The gray car is resampled until it clears the
/// human by `min_gray_gap`.
pub fn generate_initial_states(
    n: usize,
    scenario: Scenario,
    ranges: &InitRanges,
    geometry: &Geometry,
    seed: u64,
) -> Result<Vec<WorldState>> {
    if n == 0 {
        return Err(Error::Config("need at least one initial state".into()));
    }
    (0..n)
        .map(|i| {
            let mut rng = rng_from(seed, &[i as u64]);
            let robot = CarState::straight(0.0, 0.0, uniform(&mut rng, ranges.robot_speed)?);
            let human = CarState::straight(
                geometry.lane_width,
                uniform(&mut rng, ranges.human_offset)?,
                uniform(&mut rng, ranges.human_speed)?,
            );
            let third_car = match scenario {
                Scenario::LaneSwap => None,
                Scenario::LaneChange => {
                    let speed = uniform(&mut rng, ranges.gray_speed)?;
                    let mut placed = None;
                    for _ in 0..1000 {
                        let off = uniform(&mut rng, ranges.gray_offset)?;
                        if off.abs() >= ranges.min_gray_gap {
                            placed = Some(CarState::straight(geometry.lane_width, human.py + off, speed));
                            break;
                        }
                    }
                    Some(placed.ok_or_else(|| {
                        Error::Config("gray-car range cannot satisfy min_gray_gap".into())
                    })?)
                }
            };
            Ok(WorldState { robot, human, third_car, t: 0, dt: ranges.dt })
        })
        .collect()
}

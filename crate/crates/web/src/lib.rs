//! Browser demo: federated LQR training, one simulated lane change and a
//! Wilcoxon calculator. Every export takes plain numbers or strings and
//! returns a JSON string for the page to render.

use fedfleet::bench::wilcoxon_signed_rank;
use fedfleet::fl::{run_scheme, ClientData, FlConfig, TrainingScheme};
use fedfleet::lqr::{generate_fleet, lqr_loss, LqrFleetConfig, LqrTask, RolloutConfig};
use fedfleet::sim::{
    generate_initial_states, run_episode, DriverParams, EpisodeConfig, InitRanges, MpcConfig, NaiveForecaster,
    Scenario,
};
use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct SchemeCurve {
    scheme: String,
    /// Mean held-out loss per round, over robots.
    test_loss: Vec<f64>,
    /// Final held-out total loss per robot.
    final_loss: Vec<f64>,
    /// Group learning rates after the last round (A, B, K).
    lr: Option<Vec<f64>>,
}

/// Train SFL, SPFL and APFL on a small three-robot LQR fleet.
pub fn lqr_demo(seed: u64, rounds: usize) -> fedfleet::Result<String> {
    let fleet_cfg = LqrFleetConfig {
        rollouts: RolloutConfig { n_init: 12, ..RolloutConfig::default() },
        test_fraction: 0.25,
        ..LqrFleetConfig::default()
    };
    let fleet = generate_fleet(&fleet_cfg, seed)?;
    let clients: Vec<_> = fleet
        .iter()
        .map(|r| ClientData { id: r.robot_id, train: r.train.clone(), test: r.test.clone() })
        .collect();
    let fl = FlConfig { rounds: rounds.clamp(1, 20), epochs: 10, batch_size: 64, parallel: false, ..FlConfig::default() };
    let mut curves = Vec::new();
    for scheme in [TrainingScheme::Sfl, TrainingScheme::Spfl, TrainingScheme::Apfl] {
        let out = run_scheme(&LqrTask, &clients, scheme, &fl, seed)?;
        let final_loss = clients
            .iter()
            .zip(&out.personalized)
            .map(|(c, m)| lqr_loss(m, &c.test).map(|l| l.total))
            .collect::<fedfleet::Result<Vec<_>>>()?;
        curves.push(SchemeCurve {
            scheme: scheme.to_string(),
            test_loss: out.history.iter().map(|r| r.test_loss.iter().sum::<f64>() / r.test_loss.len() as f64).collect(),
            final_loss,
            lr: out.final_lr.map(|l| l.rates().to_vec()),
        });
    }
    let r: Vec<f64> = fleet.iter().map(|r| r.r).collect();
    Ok(json!({ "r_values": r, "schemes": curves }).to_string())
}

/// One episode of the naive-forecaster controller against a γ-driver.
pub fn episode_demo(scenario: &str, gamma: f64, seed: u64) -> fedfleet::Result<String> {
    let scenario: Scenario = scenario.parse()?;
    let config = EpisodeConfig { mpc: MpcConfig { parallel: false, ..MpcConfig::default() }, ..EpisodeConfig::default() };
    let init = generate_initial_states(1, scenario, &InitRanges::challenging(), &config.geometry, seed)?[0];
    let ep = run_episode(&init, &NaiveForecaster, &DriverParams::with_gamma(gamma), &config, 10, seed)?;
    let frames: Vec<_> = ep
        .states()
        .iter()
        .map(|w| {
            json!({
                "robot": [w.robot.px, w.robot.py, w.robot.heading],
                "human": [w.human.px, w.human.py, w.human.heading],
                "gray": w.third_car.map(|c| [c.px, c.py, c.heading]),
            })
        })
        .collect();
    Ok(json!({
        "dt": init.dt,
        "lane_width": config.geometry.lane_width,
        "car_length": config.geometry.car_length,
        "car_width": config.geometry.car_width,
        "frames": frames,
        "commence_time": ep.commence_time,
        "commence_distance": ep.commence_distance,
        "mean_cost": ep.mean_cost,
        "collision": ep.collision,
        "completed": ep.completed,
    })
    .to_string())
}

fn parse_list(s: &str) -> fedfleet::Result<Vec<f64>> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| fedfleet::Error::Config(format!("not a number: '{t}'"))))
        .collect()
}

/// Wilcoxon signed-rank test on two comma- or space-separated lists.
pub fn wilcoxon_demo(a: &str, b: &str) -> fedfleet::Result<String> {
    let r = wilcoxon_signed_rank(&parse_list(a)?, &parse_list(b)?)?;
    Ok(serde_json::to_string(&r)?)
}

fn js(r: fedfleet::Result<String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = lqrDemo)]
pub fn lqr_demo_js(seed: u32, rounds: u32) -> Result<String, JsError> {
    js(lqr_demo(seed as u64, rounds as usize))
}

#[wasm_bindgen(js_name = episodeDemo)]
pub fn episode_demo_js(scenario: &str, gamma: f64, seed: u32) -> Result<String, JsError> {
    js(episode_demo(scenario, gamma, seed as u64))
}

#[wasm_bindgen(js_name = wilcoxon)]
pub fn wilcoxon_js(a: &str, b: &str) -> Result<String, JsError> {
    js(wilcoxon_demo(a, b))
}

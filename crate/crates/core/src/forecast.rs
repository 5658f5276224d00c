//! Recurrent conditional VAE that forecasts the human's next controls.
//!
//! The encoder is a GRU that reads the interaction history, then the
//! candidate robot controls paired with the human's actual controls, and
//! emits the Gaussian posterior `(mu, logvar)`. The decoder is a second GRU
//! whose initial state is a function of the latent sample and the encoder's
//! summary of the history alone, so prior sampling at planning time still
//! sees the situation. Each decoder step consumes the latent sample, that
//! step's candidate robot control and the context flag, and emits one
//! (throttle, steering) pair.
//!
//! Controls are modelled in normalized units (throttle / 1.5, steering /
//! 0.04). Predictions are converted back but never snapped.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fl::Task;
use crate::params::{Checkpoint, Layout, ParamVector};
use crate::rng::{derive_seed, rng_from};
use crate::sim::{CandidateSet, Control, ControlTuple, Episode, Forecaster, Forecasts, HistoryEntry, WorldState};

pub const THROTTLE_SCALE: f64 = 1.5;
pub const STEER_SCALE: f64 = 0.04;

/// Per-step history features.
pub const HISTORY_FEATURES: usize = 12;
/// Encoder input width: history features followed by candidate and target
/// controls; each step fills only its own block.
pub const ENCODER_INPUT: usize = HISTORY_FEATURES + 4;
const LOGVAR_BOUND: f64 = 20.0;

const LONGITUDINAL_SCALE: f64 = 20.0;
const SPEED_SCALE: f64 = 10.0;
const RELATIVE_SPEED_SCALE: f64 = 5.0;
const LATERAL_SCALE: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvaeConfig {
    pub hidden: usize,
    pub latent: usize,
    /// History window `W`.
    pub window: usize,
    /// Forecast length; equals the planner's control interval.
    pub horizon: usize,
    pub beta_kl: f64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self { hidden: 32, latent: 4, window: 10, horizon: 3, beta_kl: 1.0 }
    }
}

impl CvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.latent == 0 || self.window == 0 || self.horizon == 0 {
            return Err(Error::Config(format!("CVAE sizes must be positive: {self:?}")));
        }
        if !(self.beta_kl >= 0.0) || !self.beta_kl.is_finite() {
            return Err(Error::Config(format!("beta_kl must be >= 0, got {}", self.beta_kl)));
        }
        Ok(())
    }

    fn decoder_input(&self) -> usize {
        self.latent + 3
    }

    /// Group names and shapes in layout order.
    pub fn groups(&self) -> Vec<(String, usize, usize)> {
        let (h, l) = (self.hidden, self.latent);
        let gru = |prefix: &str, input: usize| -> Vec<(String, usize, usize)> {
            ["z", "r", "n"]
                .into_iter()
                .flat_map(|gate| [(format!("{prefix}.w{gate}"), h, input + h), (format!("{prefix}.b{gate}"), h, 1)])
                .collect()
        };
        let mut g = gru("enc", ENCODER_INPUT);
        g.push(("mu.w".into(), l, h));
        g.push(("mu.b".into(), l, 1));
        g.push(("logvar.w".into(), l, h));
        g.push(("logvar.b".into(), l, 1));
        g.push(("dec_init.w".into(), h, h + l));
        g.push(("dec_init.b".into(), h, 1));
        g.extend(gru("dec", self.decoder_input()));
        g.push(("out.w".into(), 2, h));
        g.push(("out.b".into(), 2, 1));
        g
    }

    /// One group per weight matrix and bias.
    pub fn layout(&self) -> Result<Arc<Layout>> {
        self.validate()?;
        let sizes: Vec<(String, usize)> = self.groups().into_iter().map(|(n, r, c)| (n, r * c)).collect();
        Ok(Arc::new(Layout::from_sizes(&sizes)?))
    }

    pub fn architecture(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "gru-cvae",
            "hidden": self.hidden,
            "latent": self.latent,
            "window": self.window,
            "horizon": self.horizon,
            "beta_kl": self.beta_kl,
        })
    }
}

// ---------------------------------------------------------------------------
// Features

pub fn control_features(c: Control) -> [f64; 2] {
    [c.throttle / THROTTLE_SCALE, c.steer / STEER_SCALE]
}

pub fn control_from_features(y: [f64; 2]) -> Control {
    Control::new(y[0] * THROTTLE_SCALE, y[1] * STEER_SCALE)
}

/// Normalized features of one history entry: relative geometry, speeds,
/// the gray car's gap to the human, and the controls that led here.
pub fn history_features(entry: &HistoryEntry) -> [f64; HISTORY_FEATURES] {
    let w: &WorldState = &entry.world;
    let (r, h) = (&w.robot, &w.human);
    let (gray_gap, gray) = match &w.third_car {
        Some(g) => ((g.py - h.py) / LONGITUDINAL_SCALE, 1.0),
        None => (0.0, 0.0),
    };
    let [rt, rs] = control_features(entry.controls.robot);
    let [ht, hs] = control_features(entry.controls.human);
    [
        (h.px - r.px) / LATERAL_SCALE,
        (h.py - r.py) / LONGITUDINAL_SCALE,
        (h.vy - r.vy) / RELATIVE_SPEED_SCALE,
        r.vy / SPEED_SCALE,
        h.vy / SPEED_SCALE,
        r.px / LATERAL_SCALE,
        gray_gap,
        gray,
        rt,
        rs,
        ht,
        hs,
    ]
}

// ---------------------------------------------------------------------------
// Samples

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub history: Vec<HistoryEntry>,
    pub candidate: Vec<Control>,
    pub target: Vec<Control>,
    pub context: u8,
}

impl SequenceSample {
    pub fn validate(&self, config: &CvaeConfig) -> Result<()> {
        if self.history.len() != config.window {
            return Err(Error::Contract(format!(
                "history has {} entries, window is {}",
                self.history.len(),
                config.window
            )));
        }
        if self.candidate.len() != config.horizon || self.target.len() != config.horizon {
            return Err(Error::Contract(format!(
                "candidate/target lengths {}/{} for horizon {}",
                self.candidate.len(),
                self.target.len(),
                config.horizon
            )));
        }
        Ok(())
    }
}

/// Training samples from one episode: at every `stride`-th step `t` with a
/// full future, the window ending at `S_t`, the robot's executed controls
/// `C_t..` as candidate and the human's as target.
pub fn samples_from_episode(episode: &Episode, config: &CvaeConfig, stride: usize) -> Result<Vec<SequenceSample>> {
    if stride == 0 {
        return Err(Error::Config("sample stride must be >= 1".into()));
    }
    let states = episode.states();
    let controls: Vec<ControlTuple> = episode.controls();
    let context = states[0].scenario().id();
    let h = config.horizon;
    Ok((0..controls.len().saturating_sub(h - 1))
        .step_by(stride)
        .map(|t| SequenceSample {
            history: crate::sim::history_window(&states, &controls, t, config.window),
            candidate: controls[t..t + h].iter().map(|c| c.robot).collect(),
            target: controls[t..t + h].iter().map(|c| c.human).collect(),
            context,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Parameter views

struct Dense<'a> {
    w: &'a [f64],
    b: &'a [f64],
    cols: usize,
}

impl Dense<'_> {
    /// `out = W x + b`, where `x` is given as consecutive parts.
    fn apply(&self, parts: &[&[f64]], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.w[i * self.cols..(i + 1) * self.cols];
            let mut acc = self.b[i];
            let mut k = 0;
            for p in parts {
                for x in p.iter() {
                    acc += row[k] * x;
                    k += 1;
                }
            }
            *o = acc;
        }
    }
}

struct Gru<'a> {
    z: Dense<'a>,
    r: Dense<'a>,
    n: Dense<'a>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Gru<'_> {
    fn step(&self, x: &[&[f64]], h: &[f64]) -> Vec<f64> {
        let n_h = h.len();
        let mut parts: Vec<&[f64]> = x.to_vec();
        parts.push(h);
        let mut z = vec![0.0; n_h];
        let mut r = vec![0.0; n_h];
        self.z.apply(&parts, &mut z);
        self.r.apply(&parts, &mut r);
        let rh: Vec<f64> = r.iter().zip(h).map(|(r, h)| sigmoid(*r) * h).collect();
        let mut parts: Vec<&[f64]> = x.to_vec();
        parts.push(&rh);
        let mut n = vec![0.0; n_h];
        self.n.apply(&parts, &mut n);
        (0..n_h)
            .map(|i| {
                let (zi, ni) = (sigmoid(z[i]), n[i].tanh());
                ni + zi * (h[i] - ni)
            })
            .collect()
    }
}

struct Net<'a> {
    enc: Gru<'a>,
    mu: Dense<'a>,
    logvar: Dense<'a>,
    dec_init: Dense<'a>,
    dec: Gru<'a>,
    out: Dense<'a>,
}

impl<'a> Net<'a> {
    fn new(config: &CvaeConfig, params: &'a ParamVector) -> Result<Self> {
        let layout = params.layout();
        let expected = config.groups();
        if layout.num_groups() != expected.len()
            || layout.groups().iter().zip(&expected).any(|(g, (n, r, c))| g.name != *n || g.len != r * c)
        {
            return Err(Error::Contract("parameter layout does not match the CVAE configuration".into()));
        }
        let get = |name: &str| params.group_values(name).expect("layout checked");
        let dense = |prefix: &str, wname: &str, bname: &str| {
            let w = get(&format!("{prefix}.{wname}"));
            let b = get(&format!("{prefix}.{bname}"));
            Dense { w, b, cols: w.len() / b.len() }
        };
        let gru = |prefix: &str| Gru {
            z: dense(prefix, "wz", "bz"),
            r: dense(prefix, "wr", "br"),
            n: dense(prefix, "wn", "bn"),
        };
        Ok(Self {
            enc: gru("enc"),
            mu: dense("mu", "w", "b"),
            logvar: dense("logvar", "w", "b"),
            dec_init: dense("dec_init", "w", "b"),
            dec: gru("dec"),
            out: dense("out", "w", "b"),
        })
    }

    fn history_state(&self, config: &CvaeConfig, history: &[HistoryEntry]) -> Vec<f64> {
        let mut h = vec![0.0; config.hidden];
        let pad = [0.0; 4];
        for e in history {
            h = self.enc.step(&[&history_features(e), &pad], &h);
        }
        h
    }

    fn decoder_start(&self, h_hist: &[f64], z: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; h_hist.len()];
        self.dec_init.apply(&[h_hist, z], &mut h);
        h.iter_mut().for_each(|v| *v = v.tanh());
        h
    }

    fn decode_step(&self, z: &[f64], control: Control, context: f64, h: &[f64]) -> (Vec<f64>, [f64; 2]) {
        let h = self.dec.step(&[z, &control_features(control), &[context]], h);
        let mut y = [0.0; 2];
        self.out.apply(&[&h], &mut y);
        (h, y)
    }
}

/// Posterior `(mu, logvar)` of one full sample.
pub fn encode(config: &CvaeConfig, params: &ParamVector, sample: &SequenceSample) -> Result<(Vec<f64>, Vec<f64>)> {
    sample.validate(config)?;
    let net = Net::new(config, params)?;
    let mut h = net.history_state(config, &sample.history);
    let zeros = [0.0; HISTORY_FEATURES];
    for (c, t) in sample.candidate.iter().zip(&sample.target) {
        let (c, t) = (control_features(*c), control_features(*t));
        h = net.enc.step(&[&zeros, &c, &t], &h);
    }
    let mut mu = vec![0.0; config.latent];
    let mut lv = vec![0.0; config.latent];
    net.mu.apply(&[&h], &mut mu);
    net.logvar.apply(&[&h], &mut lv);
    lv.iter_mut().for_each(|v| *v = v.clamp(-LOGVAR_BOUND, LOGVAR_BOUND));
    Ok((mu, lv))
}

/// `z = mu + exp(logvar / 2) * eps` with `eps ~ N(0, I)` from `seed`.
pub fn reparameterize(mu: &[f64], logvar: &[f64], seed: u64) -> Result<Vec<f64>> {
    if mu.len() != logvar.len() {
        return Err(Error::Contract(format!("mu has {} entries, logvar {}", mu.len(), logvar.len())));
    }
    let mut rng = rng_from(seed, &[]);
    Ok(mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| {
            let eps: f64 = StandardNormal.sample(&mut rng);
            m + (lv.clamp(-LOGVAR_BOUND, LOGVAR_BOUND) / 2.0).exp() * eps
        })
        .collect())
}

/// Prior draw `z ~ N(0, I)` for forecast sample `index`.
fn prior_z(latent: usize, seed: u64, index: usize) -> Vec<f64> {
    let mut rng = rng_from(seed, &[index as u64]);
    (0..latent).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Decoded control sequence for latent `z` and a candidate of any length.
pub fn decode(
    config: &CvaeConfig,
    params: &ParamVector,
    history: &[HistoryEntry],
    z: &[f64],
    candidate: &[Control],
    context: u8,
) -> Result<Vec<Control>> {
    if z.len() != config.latent {
        return Err(Error::Contract(format!("latent of size {} for a {}-d model", z.len(), config.latent)));
    }
    if history.len() != config.window {
        return Err(Error::Contract(format!("history of {} entries, window is {}", history.len(), config.window)));
    }
    let net = Net::new(config, params)?;
    let mut h = net.decoder_start(&net.history_state(config, history), z);
    let mut out = Vec::with_capacity(candidate.len());
    for c in candidate {
        let (next, y) = net.decode_step(z, *c, context as f64, &h);
        h = next;
        out.push(control_from_features(y));
    }
    Ok(out)
}

/// `n` forecasts for one candidate with prior samples; sample `i` uses the
/// same latent draw as sample `i` of [`CvaeForecaster`].
pub fn sample_predictions(
    config: &CvaeConfig,
    params: &ParamVector,
    history: &[HistoryEntry],
    candidate: &[Control],
    context: u8,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<Control>>> {
    if n == 0 {
        return Err(Error::Contract("need at least one forecast sample".into()));
    }
    (0..n)
        .map(|i| decode(config, params, history, &prior_z(config.latent, seed, i), candidate, context))
        .collect()
}

// ---------------------------------------------------------------------------
// ELBO on the tape

/// Loss components, each averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Elbo {
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

struct TapeGru {
    w: [Var; 3],
    b: [Var; 3],
}

fn tape_gru_step(t: &mut Tape, g: &TapeGru, x: Var, h: Var) -> Result<Var> {
    let xh = t.concat(&[x, h])?;
    let gate = |t: &mut Tape, i: usize, input: Var| -> Result<Var> {
        let a = t.matmul(g.w[i], input)?;
        t.add_col(a, g.b[i])
    };
    let z = gate(t, 0, xh)?;
    let z = t.sigmoid(z);
    let r = gate(t, 1, xh)?;
    let r = t.sigmoid(r);
    let rh = t.mul(r, h)?;
    let xrh = t.concat(&[x, rh])?;
    let n = gate(t, 2, xrh)?;
    let n = t.tanh(n);
    let d = t.sub(h, n)?;
    let zd = t.mul(z, d)?;
    t.add(n, zd)
}

/// Build the batched ELBO. Columns are samples. `eps` overrides the noise
/// (latent x batch, row-major).
fn elbo_tape(
    config: &CvaeConfig,
    params: &ParamVector,
    batch: &[&SequenceSample],
    seed: u64,
    eps: Option<Vec<f64>>,
) -> Result<(Tape, Vec<Var>, Var, Var, Var)> {
    if batch.is_empty() {
        return Err(Error::Contract("ELBO of an empty batch".into()));
    }
    for s in batch {
        s.validate(config)?;
    }
    Net::new(config, params)?;
    let n = batch.len();
    let (hd, lat, hz) = (config.hidden, config.latent, config.horizon);
    let mut t = Tape::new();
    let leaves: Vec<Var> = config
        .groups()
        .iter()
        .map(|(name, r, c)| t.matrix(params.group_values(name).expect("layout checked").to_vec(), *r, *c))
        .collect::<Result<_>>()?;
    let gru_at = |base: usize| TapeGru {
        w: [leaves[base], leaves[base + 2], leaves[base + 4]],
        b: [leaves[base + 1], leaves[base + 3], leaves[base + 5]],
    };
    let enc = gru_at(0);
    let (mu_w, mu_b, lv_w, lv_b, di_w, di_b) = (leaves[6], leaves[7], leaves[8], leaves[9], leaves[10], leaves[11]);
    let dec = gru_at(12);
    let (out_w, out_b) = (leaves[18], leaves[19]);

    let columns = |rows: usize, f: &dyn Fn(&SequenceSample, &mut [f64])| -> Vec<f64> {
        let mut m = vec![0.0; rows * n];
        let mut col = vec![0.0; rows];
        for (j, s) in batch.iter().enumerate() {
            col.iter_mut().for_each(|v| *v = 0.0);
            f(s, &mut col);
            for i in 0..rows {
                m[i * n + j] = col[i];
            }
        }
        m
    };

    let mut h = t.matrix(vec![0.0; hd * n], hd, n)?;
    for step in 0..config.window {
        let x = columns(ENCODER_INPUT, &|s, c| c[..HISTORY_FEATURES].copy_from_slice(&history_features(&s.history[step])));
        let x = t.matrix(x, ENCODER_INPUT, n)?;
        h = tape_gru_step(&mut t, &enc, x, h)?;
    }
    let h_hist = h;
    for step in 0..hz {
        let x = columns(ENCODER_INPUT, &|s, c| {
            c[HISTORY_FEATURES..HISTORY_FEATURES + 2].copy_from_slice(&control_features(s.candidate[step]));
            c[HISTORY_FEATURES + 2..].copy_from_slice(&control_features(s.target[step]));
        });
        let x = t.matrix(x, ENCODER_INPUT, n)?;
        h = tape_gru_step(&mut t, &enc, x, h)?;
    }
    let mu = t.matmul(mu_w, h)?;
    let mu = t.add_col(mu, mu_b)?;
    let lv = t.matmul(lv_w, h)?;
    let lv = t.add_col(lv, lv_b)?;
    let lv = t.clamp(lv, -LOGVAR_BOUND, LOGVAR_BOUND);

    let eps = eps.unwrap_or_else(|| {
        let mut rng = rng_from(seed, &[]);
        (0..lat * n).map(|_| StandardNormal.sample(&mut rng)).collect()
    });
    let eps = t.matrix(eps, lat, n)?;
    let half = t.scale(lv, 0.5);
    let sd = t.exp(half);
    let noise = t.mul(sd, eps)?;
    let z = t.add(mu, noise)?;

    let init_in = t.concat(&[h_hist, z])?;
    let hdec = t.matmul(di_w, init_in)?;
    let hdec = t.add_col(hdec, di_b)?;
    let mut hdec = t.tanh(hdec);
    let ctx = columns(1, &|s, c| c[0] = s.context as f64);
    let ctx = t.matrix(ctx, 1, n)?;
    let mut sq_total: Option<Var> = None;
    for step in 0..hz {
        let cand = columns(2, &|s, c| c.copy_from_slice(&control_features(s.candidate[step])));
        let cand = t.matrix(cand, 2, n)?;
        let input = t.concat(&[z, cand, ctx])?;
        hdec = tape_gru_step(&mut t, &dec, input, hdec)?;
        let y = t.matmul(out_w, hdec)?;
        let y = t.add_col(y, out_b)?;
        let target = columns(2, &|s, c| c.copy_from_slice(&control_features(s.target[step])));
        let target = t.matrix(target, 2, n)?;
        let e = t.sub(y, target)?;
        let e = t.square(e);
        let e = t.sum(e);
        sq_total = Some(match sq_total {
            Some(acc) => t.add(acc, e)?,
            None => e,
        });
    }
    let recon = t.scale(sq_total.expect("horizon >= 1"), 1.0 / (n * hz * 2) as f64);

    // KL(N(mu, sigma^2) || N(0, I)) = 1/2 sum(exp(lv) + mu^2 - 1 - lv)
    let ev = t.exp(lv);
    let mu2 = t.square(mu);
    let a = t.add(ev, mu2)?;
    let a = t.sub(a, lv)?;
    let a = t.add_scalar(a, -1.0);
    let kl = t.sum(a);
    let kl = t.scale(kl, 0.5 / n as f64);
    let weighted = t.scale(kl, config.beta_kl);
    let loss = t.add(recon, weighted)?;
    Ok((t, leaves, loss, recon, kl))
}

/// Batch-mean ELBO loss `reconstruction MSE + beta * KL`.
pub fn elbo_loss(config: &CvaeConfig, params: &ParamVector, batch: &[&SequenceSample], seed: u64) -> Result<Elbo> {
    let (t, _, loss, recon, kl) = elbo_tape(config, params, batch, seed, None)?;
    Ok(Elbo { loss: t.value(loss)[0], reconstruction: t.value(recon)[0], kl: t.value(kl)[0] })
}

/// ELBO and its gradient in layout order.
pub fn elbo_grad(config: &CvaeConfig, params: &ParamVector, batch: &[&SequenceSample], seed: u64) -> Result<(Elbo, Vec<f64>)> {
    let (t, leaves, loss, recon, kl) = elbo_tape(config, params, batch, seed, None)?;
    let grads = t.backward(loss)?;
    let mut g = Vec::with_capacity(params.len());
    for v in &leaves {
        g.extend_from_slice(grads.get(*v));
    }
    let elbo = Elbo { loss: t.value(loss)[0], reconstruction: t.value(recon)[0], kl: t.value(kl)[0] };
    if !elbo.loss.is_finite() {
        return Err(Error::Numeric("ELBO is not finite".into()));
    }
    Ok((elbo, g))
}

const EVAL_CHUNK: usize = 256;

/// [`Task`] adapter used by the federated engine.
#[derive(Clone, Debug)]
pub struct CvaeTask {
    pub config: CvaeConfig,
    layout: Arc<Layout>,
}

impl CvaeTask {
    pub fn new(config: CvaeConfig) -> Result<Self> {
        let layout = config.layout()?;
        Ok(Self { config, layout })
    }
}

impl Task for CvaeTask {
    type Sample = SequenceSample;

    fn layout(&self) -> Arc<Layout> {
        self.layout.clone()
    }

    fn loss_and_grad(&self, params: &ParamVector, batch: &[&SequenceSample], seed: u64) -> Result<(f64, Vec<f64>)> {
        let p = params.relayout(self.layout.clone())?;
        let (elbo, g) = elbo_grad(&self.config, &p, batch, seed)?;
        Ok((elbo.loss, g))
    }

    /// Sample-weighted mean ELBO, evaluated in chunks with seeds derived
    /// from `seed`.
    fn eval_loss(&self, params: &ParamVector, data: &[SequenceSample], seed: u64) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Contract("evaluation on an empty dataset".into()));
        }
        let p = params.relayout(self.layout.clone())?;
        let mut total = 0.0;
        for (i, chunk) in data.chunks(EVAL_CHUNK).enumerate() {
            let refs: Vec<&SequenceSample> = chunk.iter().collect();
            total += elbo_loss(&self.config, &p, &refs, derive_seed(seed, &[i as u64]))?.loss * chunk.len() as f64;
        }
        Ok(total / data.len() as f64)
    }
}

// ---------------------------------------------------------------------------
// Planner integration

/// Trained model used by the MPC planner. Forecasts are decoded with prior
/// samples; sample `i` reuses the same latent draw for every candidate.
#[derive(Clone, Debug)]
pub struct CvaeForecaster {
    pub config: CvaeConfig,
    pub params: ParamVector,
}

impl CvaeForecaster {
    pub fn new(config: CvaeConfig, params: ParamVector) -> Result<Self> {
        let params = params.relayout(config.layout()?)?;
        Ok(Self { config, params })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(&self.params, None).with_architecture(self.config.architecture())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch = ck
            .architecture
            .as_ref()
            .ok_or_else(|| Error::Serde("checkpoint has no architecture descriptor".into()))?;
        if arch.get("kind").and_then(|k| k.as_str()) != Some("gru-cvae") {
            return Err(Error::Serde(format!("not a CVAE checkpoint: {arch}")));
        }
        let config: CvaeConfig = serde_json::from_value(arch.clone())?;
        Self::new(config, ck.params()?)
    }
}

impl Forecaster for CvaeForecaster {
    fn forecast(&self, history: &[HistoryEntry], candidates: &CandidateSet, n: usize, seed: u64) -> Result<Forecasts> {
        let cfg = &self.config;
        if candidates.tau != cfg.horizon {
            return Err(Error::Config(format!(
                "planner interval {} differs from forecast horizon {}",
                candidates.tau, cfg.horizon
            )));
        }
        if n == 0 {
            return Err(Error::Contract("need at least one forecast sample".into()));
        }
        let window = pad_history(history, cfg.window)?;
        let net = Net::new(cfg, &self.params)?;
        let context = window.last().expect("window >= 1").world.scenario().id() as f64;
        let h_hist = net.history_state(cfg, &window);
        let mut out = vec![Vec::with_capacity(n); candidates.len()];
        for s in 0..n {
            let z = prior_z(cfg.latent, seed, s);
            // Prefix tree: level k holds 9^k hidden states, one per distinct
            // control prefix, ordered like candidate indices.
            let mut level: Vec<(Vec<f64>, Vec<Control>)> = vec![(net.decoder_start(&h_hist, &z), Vec::new())];
            for _ in 0..cfg.horizon {
                let mut next = Vec::with_capacity(level.len() * 9);
                for (h, preds) in &level {
                    for d in 0..9 {
                        let (h2, y) = net.decode_step(&z, Control::from_index(d), context, h);
                        let mut p = preds.clone();
                        p.push(control_from_features(y));
                        next.push((h2, p));
                    }
                }
                level = next;
            }
            for (slot, (_, preds)) in out.iter_mut().zip(level) {
                slot.push(preds);
            }
        }
        Ok(out)
    }
}

/// The last `w` entries, padded at the front with the first entry and zero
/// controls when the history is shorter.
fn pad_history(history: &[HistoryEntry], w: usize) -> Result<Vec<HistoryEntry>> {
    let first = history
        .first()
        .ok_or_else(|| Error::Contract("forecasting needs at least the current state".into()))?;
    let pad = HistoryEntry { world: first.world, controls: ControlTuple::ZERO };
    let mut v: Vec<HistoryEntry> = std::iter::repeat_n(pad, w.saturating_sub(history.len())).collect();
    v.extend_from_slice(&history[history.len().saturating_sub(w)..]);
    Ok(v)
}

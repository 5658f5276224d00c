//! Parameter containers and the cross-client statistics used by the
//! adaptive personalization rule.
//!
//! A [`ParamVector`] is a flat array of reals partitioned into named,
//! contiguous groups. Learning rates are assigned per group
//! ([`LrVector`]); the server-side deviation statistic is kept per
//! parameter ([`SigmaVector`]) and reduced to groups by arithmetic mean.

use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// Ordered group partition of `[0, len)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    groups: Vec<Group>,
    len: usize,
}

impl Layout {
    /// Build a layout from `(name, size)` pairs laid out back to back.
    pub fn from_sizes<S: AsRef<str>>(spec: &[(S, usize)]) -> Result<Self> {
        let mut start = 0;
        let groups = spec
            .iter()
            .map(|(name, len)| {
                let g = Group {
                    name: name.as_ref().to_string(),
                    start,
                    len: *len,
                };
                start += len;
                g
            })
            .collect();
        Self::new(groups)
    }

    /// Validate an explicit group list: non-empty, contiguous, disjoint,
    /// starting at zero, no empty groups and no duplicate names.
    pub fn new(groups: Vec<Group>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Config("parameter layout has no groups".into()));
        }
        let mut expected = 0;
        for (i, g) in groups.iter().enumerate() {
            if g.len == 0 {
                return Err(Error::Config(format!("group '{}' is empty", g.name)));
            }
            if g.start != expected {
                return Err(Error::Config(format!(
                    "group '{}' starts at {} but previous groups end at {}",
                    g.name, g.start, expected
                )));
            }
            if groups[..i].iter().any(|o| o.name == g.name) {
                return Err(Error::Config(format!("duplicate group name '{}'", g.name)));
            }
            expected += g.len;
        }
        Ok(Self {
            groups,
            len: expected,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn group(&self, name: &str) -> Option<&Group> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    /// Collapse every group into one covering the whole vector.
    pub fn single_group(&self, name: &str) -> Layout {
        Layout {
            groups: vec![Group {
                name: name.to_string(),
                start: 0,
                len: self.len,
            }],
            len: self.len,
        }
    }
}

/// Flat learnable parameters with a shared group layout.
#[derive(Clone, Debug)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl PartialEq for ParamVector {
    fn eq(&self, other: &Self) -> bool {
        self.same_layout(other) && self.values == other.values
    }
}

impl ParamVector {
    pub fn new(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Contract(format!(
                "{} values for a layout of length {}",
                values.len(),
                layout.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter {i} is not finite")));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn group_values(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .group(name)
            .map(|g| &self.values[g.start..g.start + g.len])
    }

    pub fn group_values_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let g = self.layout.group(name)?.clone();
        Some(&mut self.values[g.start..g.start + g.len])
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    /// Same values under a different (length-compatible) layout.
    pub fn relayout(&self, layout: Arc<Layout>) -> Result<Self> {
        Self::new(layout, self.values.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Draw every parameter i.i.d. uniform in `[-scale, scale]`.
pub fn init_params(layout: Arc<Layout>, seed: u64, scale: f64) -> Result<ParamVector> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::Config(format!("init scale must be >= 0, got {scale}")));
    }
    if scale == 0.0 {
        return Ok(ParamVector::zeros(layout));
    }
    let mut rng = rng_from(seed, &[]);
    let values = (0..layout.len())
        .map(|_| rng.random_range(-scale..=scale))
        .collect();
    ParamVector::new(layout, values)
}

/// Per-group learning rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrVector(Vec<f64>);

impl LrVector {
    pub fn uniform(num_groups: usize, rate: f64) -> Self {
        LrVector(vec![rate; num_groups])
    }

    /// Rates must be finite and non-negative. A zero rate freezes its group.
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if let Some(r) = rates.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
            return Err(Error::Config(format!("invalid learning rate {r}")));
        }
        Ok(LrVector(rates))
    }

    pub fn rates(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }
}

/// Per-parameter sum of squared deviations across clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaVector(Vec<f64>);

impl SigmaVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Numeric(format!("invalid deviation entry {v}")));
        }
        Ok(SigmaVector(values))
    }

    /// Initial server state: every entry is one.
    pub fn ones(len: usize) -> Self {
        SigmaVector(vec![1.0; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Arithmetic mean of the entries inside each group.
    pub fn group_means(&self, layout: &Layout) -> Result<Vec<f64>> {
        if self.0.len() != layout.len() {
            return Err(Error::Contract(format!(
                "sigma has {} entries, layout has {}",
                self.0.len(),
                layout.len()
            )));
        }
        Ok(layout
            .groups()
            .iter()
            .map(|g| self.0[g.start..g.start + g.len].iter().sum::<f64>() / g.len as f64)
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments with bias correction; rates are applied per group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            config,
        }
    }

    pub fn step(&mut self, params: &mut ParamVector, grad: &[f64], lr: &LrVector) -> Result<()> {
        if grad.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "gradient length {} / optimizer length {} vs parameter length {}",
                grad.len(),
                self.m.len(),
                params.len()
            )));
        }
        if lr.len() != params.layout().num_groups() {
            return Err(Error::Contract(format!(
                "{} learning rates for {} groups",
                lr.len(),
                params.layout().num_groups()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("gradient entry {i} is not finite")));
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let layout = params.layout().clone();
        let values = params.values_mut();
        for (group, &rate) in layout.groups().iter().zip(lr.rates()) {
            for i in group.start..group.start + group.len {
                let g = grad[i];
                self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                if rate != 0.0 {
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    values[i] -= rate * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

fn check_clients(clients: &[ParamVector], min: usize) -> Result<()> {
    if clients.len() < min {
        return Err(Error::Contract(format!(
            "need at least {min} client parameter vectors, got {}",
            clients.len()
        )));
    }
    if let Some(k) = clients.iter().position(|c| !c.same_layout(&clients[0])) {
        return Err(Error::Contract(format!(
            "client {k} has a different parameter layout"
        )));
    }
    Ok(())
}

/// Unweighted element-wise mean (FedAvg with equal client weights).
/// Clients are reduced in index order.
pub fn mean_params(clients: &[ParamVector]) -> Result<ParamVector> {
    check_clients(clients, 1)?;
    // Accumulate deviations from the first client so that identical inputs
    // reproduce themselves exactly.
    let n = clients.len() as f64;
    let anchor = clients[0].values();
    let mut acc = vec![0.0; anchor.len()];
    for c in &clients[1..] {
        for ((a, v), r) in acc.iter_mut().zip(c.values()).zip(anchor) {
            *a += v - r;
        }
    }
    let out = anchor.iter().zip(&acc).map(|(r, a)| r + a / n).collect();
    ParamVector::new(clients[0].layout().clone(), out)
}

/// `sigma_i = sum_k (theta_k^i - mean^i)^2`, two-pass, not normalised by
/// the client count.
pub fn sum_sq_dev(clients: &[ParamVector]) -> Result<SigmaVector> {
    check_clients(clients, 2)?;
    let mean = mean_params(clients)?;
    let mut sigma = vec![0.0; mean.len()];
    for c in clients {
        for ((s, v), m) in sigma.iter_mut().zip(c.values()).zip(mean.values()) {
            let d = v - m;
            *s += d * d;
        }
    }
    SigmaVector::new(sigma)
}

/// Group rate `base * sigma_g / max_g sigma_g` where `sigma_g` is the mean
/// of the per-parameter deviations in the group. Falls back to a uniform
/// `base` when every group deviation is zero.
pub fn lrs_from_sigma(sigma: &SigmaVector, base: f64, layout: &Layout) -> Result<LrVector> {
    if !(base > 0.0) || !base.is_finite() {
        return Err(Error::Config(format!("base learning rate must be > 0, got {base}")));
    }
    let per_group = sigma.group_means(layout)?;
    let max = per_group.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(LrVector::uniform(layout.num_groups(), base));
    }
    // The arg-max group gets exactly `base`.
    LrVector::new(
        per_group
            .iter()
            .map(|&s| if s == max { base } else { base * s / max })
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerCheckpoint {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// On-disk JSON form of a parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub groups: Vec<Group>,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerCheckpoint>,
    /// Free-form model descriptor (e.g. network sizes).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<serde_json::Value>,
    /// Version, seed and config hash of the run that produced the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn from_params(params: &ParamVector, optimizer: Option<&AdamState>) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            groups: params.layout().groups().to_vec(),
            values: params.values().to_vec(),
            optimizer: optimizer.map(|s| OptimizerCheckpoint {
                m: s.m.clone(),
                v: s.v.clone(),
                step: s.step,
                beta1: s.config.beta1,
                beta2: s.config.beta2,
                eps: s.config.eps,
            }),
            architecture: None,
            provenance: None,
        }
    }

    pub fn with_architecture(mut self, arch: serde_json::Value) -> Self {
        self.architecture = Some(arch);
        self
    }

    pub fn params(&self) -> Result<ParamVector> {
        let layout = Layout::new(self.groups.clone())?;
        ParamVector::new(Arc::new(layout), self.values.clone())
    }

    pub fn adam_state(&self) -> Option<AdamState> {
        self.optimizer.as_ref().map(|o| AdamState {
            m: o.m.clone(),
            v: o.v.clone(),
            step: o.step,
            config: AdamConfig {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
            },
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Serde(format!(
                "unsupported checkpoint format_version {}",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

//! JSON scenario files.
//!
//! A file has four sections, `network`, `statistics`, `algorithm` and `run`.
//! Per-node quantities accept either one number (shared by every node) or a
//! list with one entry per node.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{
    build_weights, validate_combination, CombinationRule, DegreeConvention, Topology,
};
use crate::rng::{stream, Purpose};
use crate::simulator::{
    Confidence, ConstructionTiming, DiffusionMode, OmegaMode, ScenarioConfig, Strategy,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub network: NetworkSection,
    pub statistics: StatisticsSection,
    pub algorithm: AlgorithmSection,
    pub run: RunSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub adjacency: Vec<Vec<u8>>,
    #[serde(default)]
    pub combination: CombinationRule,
    #[serde(default)]
    pub metropolis_degree: DegreeConvention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerNode {
    Shared(f64),
    Each(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StddevRecipe {
    /// `0.1 (sqrt(10) - 1) U[0, 1] + 0.1`, one draw per node.
    Example1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RegressorStddev {
    Recipe { recipe: StddevRecipe },
    Values(PerNode),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackingSection {
    /// Random-walk increment standard deviation per coordinate.
    pub q: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatisticsSection {
    pub regressor_stddev: RegressorStddev,
    pub noise_stddev: PerNode,
    #[serde(default = "one")]
    pub projection_stddev: PerNode,
    /// Explicit `w°`; drawn from a unit Gaussian when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_parameter: Option<Vec<f64>>,
    /// Seed for `w°` and recipe draws. Defaults to `run.seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draw_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracking: Option<TrackingSection>,
}

fn one() -> PerNode {
    PerNode::Shared(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConfidenceSection {
    Fixed { delta: f64 },
    Adaptive { mu_cvx: f64 },
}

impl Default for ConfidenceSection {
    fn default() -> Self {
        ConfidenceSection::Fixed { delta: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSection {
    #[serde(default)]
    pub strategy: Strategy,
    pub diffusion_mode: DiffusionMode,
    pub filter_length: usize,
    pub mu: PerNode,
    #[serde(default = "one")]
    pub eta: PerNode,
    #[serde(default)]
    pub confidence: ConfidenceSection,
    #[serde(default)]
    pub zeta: f64,
    #[serde(default)]
    pub construction_timing: ConstructionTiming,
    #[serde(default = "default_projection_dim")]
    pub projection_dim: usize,
    #[serde(default)]
    pub omega: OmegaMode,
}

fn default_projection_dim() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub iterations: usize,
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Command-line overrides applied on top of the `run` section.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub iterations: Option<usize>,
}

impl Config {
    /// Parses a scenario file. A run manifest is accepted as well; its
    /// embedded `config` object is used.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(parse_error)?;
        if value.get("tool_version").is_some() {
            if let Some(inner) = value.get("config") {
                return serde_json::from_value(inner.clone()).map_err(|e| Error::Parse {
                    line: 0,
                    column: 0,
                    message: format!("manifest config: {e}"),
                });
            }
        }
        serde_json::from_str(text).map_err(parse_error)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn apply(&mut self, overrides: Overrides) {
        if let Some(seed) = overrides.seed {
            // w° and recipe draws stay pinned to the file's seed.
            if self.statistics.draw_seed.is_none() {
                self.statistics.draw_seed = Some(self.run.seed);
            }
            self.run.seed = seed;
        }
        if let Some(trials) = overrides.trials {
            self.run.trials = trials;
        }
        if let Some(iterations) = overrides.iterations {
            self.run.iterations = iterations;
        }
    }

    /// Validates every field and resolves per-node values, recipes and `w°`.
    pub fn resolve(&self) -> Result<ScenarioConfig> {
        let topology = Topology::from_adjacency(&self.network.adjacency).map_err(|e| match e {
            Error::Topology(msg) => Error::config("network.adjacency", msg),
            other => other,
        })?;
        let n = topology.node_count();
        let gamma = build_weights(
            &topology,
            self.network.combination,
            self.network.metropolis_degree,
        );
        validate_combination(&gamma, &topology).map_err(Error::Combination)?;

        let s = &self.statistics;
        let a = &self.algorithm;
        let m = a.filter_length;
        if m == 0 {
            return Err(Error::config("algorithm.filter_length", "must be at least 1"));
        }
        if a.projection_dim == 0 || a.projection_dim > m {
            return Err(Error::config(
                "algorithm.projection_dim",
                format!("must lie in 1..={m}"),
            ));
        }
        let draw_seed = s.draw_seed.unwrap_or(self.run.seed);

        let sigma_u = match &s.regressor_stddev {
            RegressorStddev::Values(v) => expand(v, n, "statistics.regressor_stddev")?,
            RegressorStddev::Recipe {
                recipe: StddevRecipe::Example1,
            } => {
                let mut rng = stream(draw_seed, 0, 0, Purpose::Recipe);
                let span = 0.1 * (10f64.sqrt() - 1.0);
                (0..n).map(|_| span * rng.random::<f64>() + 0.1).collect()
            }
        };
        positive(&sigma_u, "statistics.regressor_stddev")?;
        let sigma_v = expand(&s.noise_stddev, n, "statistics.noise_stddev")?;
        nonnegative(&sigma_v, "statistics.noise_stddev")?;
        let sigma_c = expand(&s.projection_stddev, n, "statistics.projection_stddev")?;
        positive(&sigma_c, "statistics.projection_stddev")?;

        let w_o = match &s.true_parameter {
            Some(w) => {
                if w.len() != m {
                    return Err(Error::config(
                        "statistics.true_parameter",
                        format!("has {} entries, expected {m}", w.len()),
                    ));
                }
                finite(w, "statistics.true_parameter")?;
                w.clone()
            }
            None => {
                let mut rng = stream(draw_seed, 0, 0, Purpose::TrueParameter);
                (0..m).map(|_| rng.sample(StandardNormal)).collect()
            }
        };
        let tracking_q = match &s.tracking {
            None => 0.0,
            Some(t) if t.q.is_finite() && t.q >= 0.0 => t.q,
            Some(_) => {
                return Err(Error::config(
                    "statistics.tracking.q",
                    "must be finite and nonnegative",
                ))
            }
        };

        let mu = expand(&a.mu, n, "algorithm.mu")?;
        nonnegative(&mu, "algorithm.mu")?;
        let eta = expand(&a.eta, n, "algorithm.eta")?;
        positive(&eta, "algorithm.eta")?;
        let confidence = match a.confidence {
            ConfidenceSection::Fixed { delta } => {
                if !(0.0..=1.0).contains(&delta) {
                    return Err(Error::config(
                        "algorithm.confidence.delta",
                        format!("must lie in [0, 1], got {delta}"),
                    ));
                }
                Confidence::Fixed(delta)
            }
            ConfidenceSection::Adaptive { mu_cvx } => {
                if !(mu_cvx.is_finite() && mu_cvx >= 0.0) {
                    return Err(Error::config(
                        "algorithm.confidence.mu_cvx",
                        "must be finite and nonnegative",
                    ));
                }
                Confidence::Adaptive { mu_cvx }
            }
        };
        if !(a.zeta.is_finite() && a.zeta >= 0.0) {
            return Err(Error::config("algorithm.zeta", "must be finite and nonnegative"));
        }
        if a.diffusion_mode == DiffusionMode::SingleBit && a.zeta == 0.0 {
            return Err(Error::config(
                "algorithm.zeta",
                "single-bit diffusion needs a positive initial construction value",
            ));
        }
        if self.run.iterations == 0 {
            return Err(Error::config("run.iterations", "must be at least 1"));
        }
        if self.run.trials == 0 {
            return Err(Error::config("run.trials", "must be at least 1"));
        }

        Ok(ScenarioConfig {
            topology,
            gamma,
            filter_length: m,
            strategy: a.strategy,
            mode: a.diffusion_mode,
            sigma_u,
            sigma_v,
            sigma_c,
            mu,
            eta,
            confidence,
            zeta: a.zeta,
            timing: a.construction_timing,
            projection_dim: a.projection_dim,
            omega: a.omega,
            w_o,
            tracking_q,
            iterations: self.run.iterations,
            trials: self.run.trials,
            master_seed: self.run.seed,
        })
    }
}

fn parse_error(e: serde_json::Error) -> Error {
    Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

fn expand(v: &PerNode, n: usize, field: &str) -> Result<Vec<f64>> {
    let out = match v {
        PerNode::Shared(x) => vec![*x; n],
        PerNode::Each(xs) if xs.len() == n => xs.clone(),
        PerNode::Each(xs) => {
            return Err(Error::config(
                field,
                format!("has {} entries, expected {n} (one per node)", xs.len()),
            ))
        }
    };
    finite(&out, field)?;
    Ok(out)
}

fn finite(v: &[f64], field: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(k) => Err(Error::config(format!("{field}[{k}]"), "must be finite")),
        None => Ok(()),
    }
}

fn positive(v: &[f64], field: &str) -> Result<()> {
    match v.iter().position(|&x| x <= 0.0) {
        Some(k) => Err(Error::config(format!("{field}[{k}]"), "must be positive")),
        None => Ok(()),
    }
}

fn nonnegative(v: &[f64], field: &str) -> Result<()> {
    match v.iter().position(|&x| x < 0.0) {
        Some(k) => Err(Error::config(format!("{field}[{k}]"), "must be nonnegative")),
        None => Ok(()),
    }
}

//! Monte Carlo engine for diffusion LMS with compressed exchange.
//!
//! One iteration of a trial, for every node `i`:
//!
//! 1. combine: `w_i = delta_i phi_i + (1 - delta_i) what_i` with
//!    `what_i = gamma_ii phi_i + sum_j gamma_ij a_j`;
//! 2. adapt: `phi_i <- w_i + mu_i u_i (d_i - u_i^T w_i)`;
//! 3. construct: `a_i <- a_i + eta_i c_i h(c_i^T (phi_i - a_i))`.
//!
//! ATC reports `w` as the node estimate and CTA reports `phi`; the recursion is
//! the same, so both series are always recorded, by role.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{apply_confidence, CombinationMatrix, Topology};
use crate::rng::{stream, Purpose};

/// Upper bound on `|alpha|` for the adaptive confidence.
pub const ALPHA_MAX: f64 = 4.0;

/// Bits charged for one real-valued payload entry.
pub const BITS_PER_REAL: u64 = 32;

const TRIAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Atc,
    Cta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionMode {
    Full,
    Scalar,
    SingleBit,
    None,
}

impl DiffusionMode {
    pub fn is_compressive(self) -> bool {
        matches!(self, DiffusionMode::Scalar | DiffusionMode::SingleBit)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Confidence {
    Fixed(f64),
    Adaptive { mu_cvx: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstructionTiming {
    /// `eps = c^T (phi_t - a_t)`.
    #[default]
    Previous,
    /// `eps = c^T (phi_{t+1} - a_t)`.
    Current,
}

/// How the theory engine linearizes the sign nonlinearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaMode {
    #[default]
    Pooled,
    PerNode,
}

/// A fully resolved experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub topology: Topology,
    /// Base combination matrix, before the confidence blend.
    pub gamma: CombinationMatrix,
    pub filter_length: usize,
    pub strategy: Strategy,
    pub mode: DiffusionMode,
    pub sigma_u: Vec<f64>,
    pub sigma_v: Vec<f64>,
    pub sigma_c: Vec<f64>,
    pub mu: Vec<f64>,
    pub eta: Vec<f64>,
    pub confidence: Confidence,
    pub zeta: f64,
    pub timing: ConstructionTiming,
    pub projection_dim: usize,
    pub omega: OmegaMode,
    pub w_o: Vec<f64>,
    pub tracking_q: f64,
    pub iterations: usize,
    pub trials: usize,
    pub master_seed: u64,
}

impl ScenarioConfig {
    pub fn node_count(&self) -> usize {
        self.topology.node_count()
    }

    /// `Gamma'` for a fixed confidence; `None` when the confidence adapts.
    pub fn blended_gamma(&self) -> Option<CombinationMatrix> {
        match self.confidence {
            Confidence::Fixed(delta) => {
                Some(apply_confidence(&self.gamma, delta).expect("delta validated on load"))
            }
            Confidence::Adaptive { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeState {
    pub w: Vec<f64>,
    pub phi: Vec<f64>,
    /// The node's constructed estimate, as replicated at its neighbors.
    pub a: Vec<f64>,
    pub alpha: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrueParameterProcess {
    pub w_o: Vec<f64>,
    /// Random-walk increment stddev; zero keeps `w°` fixed.
    pub q: f64,
}

impl TrueParameterProcess {
    pub fn is_static(&self) -> bool {
        self.q == 0.0
    }
}

/// What a node sends to its neighbors in one iteration.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Real(Vec<f64>),
    Bit(Vec<i8>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Communication {
    pub values_sent: u64,
    pub bits_sent: u64,
}

/// Per-iteration means over trials. Every series has length `iterations`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleResult {
    pub mode: DiffusionMode,
    pub strategy: Strategy,
    pub iterations: usize,
    pub trials: usize,
    /// `(1/N) E||w° - phi_t||^2`.
    pub msd_adapted: Vec<f64>,
    /// `(1/N) E||w° - w_t||^2`.
    pub msd_combined: Vec<f64>,
    pub emse_adapted: Vec<f64>,
    pub emse_combined: Vec<f64>,
    /// `(1/N) E||w° - a_t||^2`.
    pub msd_construction: Vec<f64>,
    /// `E[eps_t^T eps_t]`.
    pub eps_variance: Vec<f64>,
    /// Mean confidence over nodes.
    pub mean_delta: Vec<f64>,
    pub communication: Communication,
}

/// One trial's series, same layout as [`EnsembleResult`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrialSeries {
    pub msd_adapted: Vec<f64>,
    pub msd_combined: Vec<f64>,
    pub emse_adapted: Vec<f64>,
    pub emse_combined: Vec<f64>,
    pub msd_construction: Vec<f64>,
    pub eps_variance: Vec<f64>,
    pub mean_delta: Vec<f64>,
}

impl TrialSeries {
    fn zeros(t: usize) -> Self {
        Self {
            msd_adapted: vec![0.0; t],
            msd_combined: vec![0.0; t],
            emse_adapted: vec![0.0; t],
            emse_combined: vec![0.0; t],
            msd_construction: vec![0.0; t],
            eps_variance: vec![0.0; t],
            mean_delta: vec![0.0; t],
        }
    }

    fn fields_mut(&mut self) -> [&mut Vec<f64>; 7] {
        [
            &mut self.msd_adapted,
            &mut self.msd_combined,
            &mut self.emse_adapted,
            &mut self.emse_combined,
            &mut self.msd_construction,
            &mut self.eps_variance,
            &mut self.mean_delta,
        ]
    }

    fn fields(&self) -> [&Vec<f64>; 7] {
        [
            &self.msd_adapted,
            &self.msd_combined,
            &self.emse_adapted,
            &self.emse_combined,
            &self.msd_construction,
            &self.eps_variance,
            &self.mean_delta,
        ]
    }
}

/// Draws `u ~ N(0, sigma_u^2 I)` into `u` and returns `d = w°^T u + v`.
pub fn fill_observation<R: Rng>(
    rng: &mut R,
    sigma_u: f64,
    sigma_v: f64,
    w_o: &[f64],
    u: &mut [f64],
) -> f64 {
    let mut d = 0.0;
    for (uk, wk) in u.iter_mut().zip(w_o) {
        *uk = sigma_u * rng.sample::<f64, _>(StandardNormal);
        d += *uk * wk;
    }
    d + sigma_v * rng.sample::<f64, _>(StandardNormal)
}

pub fn generate_observation<R: Rng>(
    rng: &mut R,
    sigma_u: f64,
    sigma_v: f64,
    w_o: &[f64],
) -> (Vec<f64>, f64) {
    let mut u = vec![0.0; w_o.len()];
    let d = fill_observation(rng, sigma_u, sigma_v, w_o, &mut u);
    (u, d)
}

/// One LMS step from `start`: writes `start + mu u e` into `out`, returns
/// `e = d - u^T start`. This is the ATC adaptation from `w`, and equally the
/// CTA adaptation from the combined `phi`.
pub fn adapt_local(start: &[f64], u: &[f64], d: f64, mu: f64, out: &mut [f64]) -> f64 {
    let e = d - dot(u, start);
    for ((o, s), uk) in out.iter_mut().zip(start).zip(u) {
        *o = s + mu * uk * e;
    }
    e
}

/// `eps_k = c_k^T (phi_ref - a)` for each projection column `c_k`.
fn projection_errors(a: &[f64], phi_ref: &[f64], c: &[f64], eps: &mut [f64]) {
    let m = a.len();
    for (e, col) in eps.iter_mut().zip(c.chunks_exact(m)) {
        *e = col
            .iter()
            .zip(phi_ref.iter().zip(a))
            .map(|(ck, (r, ak))| ck * (r - ak))
            .sum();
    }
}

/// `a <- a + eta sum_k c_k h_k`.
fn add_projected(a: &mut [f64], c: &[f64], eta: f64, h: impl Iterator<Item = f64>) {
    let m = a.len();
    for (col, hk) in c.chunks_exact(m).zip(h) {
        for (ak, ck) in a.iter_mut().zip(col) {
            *ak += eta * ck * hk;
        }
    }
}

fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Builds the payload for one construction step. `c` holds the projection
/// columns of length `M`, column-major. `sign(0)` is taken as `+1`.
pub fn make_payload(a_prev: &[f64], phi_ref: &[f64], c: &[f64], mode: DiffusionMode) -> Payload {
    let mut eps = vec![0.0; c.len() / a_prev.len()];
    projection_errors(a_prev, phi_ref, c, &mut eps);
    match mode {
        DiffusionMode::SingleBit => Payload::Bit(eps.iter().map(|&x| sign(x) as i8).collect()),
        _ => Payload::Real(eps),
    }
}

/// Applies a received payload: `a <- a + eta C h`. Every replica of `a_j`
/// runs exactly this.
pub fn apply_payload(a: &mut [f64], c: &[f64], eta: f64, payload: &Payload) {
    match payload {
        Payload::Real(v) => add_projected(a, c, eta, v.iter().copied()),
        Payload::Bit(v) => add_projected(a, c, eta, v.iter().map(|&h| f64::from(h))),
    }
}

pub fn construct_estimate(
    a_prev: &[f64],
    phi_ref: &[f64],
    c: &[f64],
    eta: f64,
    mode: DiffusionMode,
) -> (Vec<f64>, Payload) {
    let payload = make_payload(a_prev, phi_ref, c, mode);
    let mut a = a_prev.to_vec();
    apply_payload(&mut a, c, eta, &payload);
    (a, payload)
}

/// `w = delta phi + (1 - delta) (gamma_ii phi + sum_j gamma_ij a_j)`.
/// Writes the neighborhood mix into `w_hat` and the result into `w`.
pub fn combine<'a>(
    phi: &[f64],
    gamma_ii: f64,
    neighbors: impl IntoIterator<Item = (f64, &'a [f64])>,
    delta: f64,
    w_hat: &mut [f64],
    w: &mut [f64],
) {
    for (h, p) in w_hat.iter_mut().zip(phi) {
        *h = gamma_ii * p;
    }
    for (g, a) in neighbors {
        for (h, ak) in w_hat.iter_mut().zip(a) {
            *h += g * ak;
        }
    }
    for ((wk, p), h) in w.iter_mut().zip(phi).zip(w_hat.iter()) {
        *wk = delta * p + (1.0 - delta) * h;
    }
}

pub fn sigmoid(alpha: f64) -> f64 {
    1.0 / (1.0 + (-alpha).exp())
}

/// Stochastic-gradient step on the confidence logit. Returns `(alpha, delta)`.
pub fn adapt_confidence(
    alpha: f64,
    e: f64,
    u: &[f64],
    phi: &[f64],
    w_hat: &[f64],
    mu_cvx: f64,
) -> (f64, f64) {
    let delta = sigmoid(alpha);
    let g: f64 = u.iter().zip(phi.iter().zip(w_hat)).map(|(uk, (p, h))| uk * (p - h)).sum();
    let next = (alpha + mu_cvx * e * g * delta * (1.0 - delta)).clamp(-ALPHA_MAX, ALPHA_MAX);
    (next, sigmoid(next))
}

pub fn evolve_true_parameter<R: Rng>(process: &mut TrueParameterProcess, rng: &mut R) {
    if process.is_static() {
        return;
    }
    for w in process.w_o.iter_mut() {
        *w += process.q * rng.sample::<f64, _>(StandardNormal);
    }
}

/// Payload entries and bits sent per iteration over all directed links.
pub fn communication_per_iteration(cfg: &ScenarioConfig) -> Communication {
    let links = cfg.topology.directed_links() as u64;
    let (per_link, bits_each) = match cfg.mode {
        DiffusionMode::Full => (cfg.filter_length as u64, BITS_PER_REAL),
        DiffusionMode::Scalar => (cfg.projection_dim as u64, BITS_PER_REAL),
        DiffusionMode::SingleBit => (cfg.projection_dim as u64, 1),
        DiffusionMode::None => (0, 0),
    };
    Communication {
        values_sent: links * per_link,
        bits_sent: links * per_link * bits_each,
    }
}

pub fn count_communication(cfg: &ScenarioConfig, iterations: usize) -> Communication {
    let per = communication_per_iteration(cfg);
    Communication {
        values_sent: per.values_sent * iterations as u64,
        bits_sent: per.bits_sent * iterations as u64,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Runs trial `trial` of the scenario.
pub fn run_trial(cfg: &ScenarioConfig, trial: usize) -> Result<TrialSeries> {
    let n = cfg.node_count();
    let m = cfg.filter_length;
    let p = cfg.projection_dim;
    let t_max = cfg.iterations;
    let seed = cfg.master_seed;
    let tr = trial as u64;

    let mut obs: Vec<ChaCha12Rng> = (0..n)
        .map(|i| stream(seed, tr, i as u64, Purpose::Observation))
        .collect();
    let mut proj: Vec<ChaCha12Rng> = (0..n)
        .map(|i| stream(seed, tr, i as u64, Purpose::Projection))
        .collect();
    let mut walk = stream(seed, tr, 0, Purpose::RandomWalk);
    let mut truth = TrueParameterProcess {
        w_o: cfg.w_o.clone(),
        q: cfg.tracking_q,
    };

    let neighbors: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| {
            cfg.topology
                .neighbors(i)
                .filter(|&j| j != i)
                .map(|j| (j, cfg.gamma.get(i, j)))
                .collect()
        })
        .collect();
    let mut delta = match cfg.confidence {
        Confidence::Fixed(d) => vec![d; n],
        Confidence::Adaptive { .. } => vec![sigmoid(0.0); n],
    };
    let mut alpha = vec![0.0; n];

    let mut phi = vec![0.0; n * m];
    let mut a = vec![cfg.zeta; n * m];
    let mut w = vec![0.0; n * m];
    let mut w_hat = vec![0.0; n * m];
    let mut phi_next = vec![0.0; n * m];
    let mut u = vec![0.0; m];
    let mut c = vec![0.0; m * p];
    let mut eps = vec![0.0; p];

    let mut out = TrialSeries::zeros(t_max);
    let inv_n = 1.0 / n as f64;

    for t in 0..t_max {
        // combine
        for i in 0..n {
            let rows = i * m..(i + 1) * m;
            let src: &[f64] = match cfg.mode {
                DiffusionMode::Full => &phi,
                _ => &a,
            };
            let d_i = if cfg.mode == DiffusionMode::None { 1.0 } else { delta[i] };
            let nb = neighbors[i].iter().map(|&(j, g)| (g, &src[j * m..(j + 1) * m]));
            let (wh, wi) = (&mut w_hat[rows.clone()], &mut w[rows.clone()]);
            combine(&phi[rows.clone()], cfg.gamma.get(i, i), nb, d_i, wh, wi);
        }

        // record
        let wo = &truth.w_o;
        let (mut msd_p, mut msd_w, mut emse_p, mut emse_w, mut msd_a, mut eps_var) =
            (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let rows = i * m..(i + 1) * m;
            let s2 = cfg.sigma_u[i] * cfg.sigma_u[i];
            let dp = sq_dist(&phi[rows.clone()], wo);
            let dw = sq_dist(&w[rows.clone()], wo);
            msd_p += dp;
            msd_w += dw;
            emse_p += s2 * dp;
            emse_w += s2 * dw;
            if cfg.mode.is_compressive() {
                msd_a += sq_dist(&a[rows.clone()], wo);
                eps_var += cfg.sigma_c[i] * cfg.sigma_c[i] * p as f64
                    * sq_dist(&phi[rows.clone()], &a[rows]);
            }
        }
        out.msd_adapted[t] = msd_p * inv_n;
        out.msd_combined[t] = msd_w * inv_n;
        out.emse_adapted[t] = emse_p * inv_n;
        out.emse_combined[t] = emse_w * inv_n;
        out.msd_construction[t] = msd_a * inv_n;
        out.eps_variance[t] = eps_var;
        out.mean_delta[t] = delta.iter().sum::<f64>() * inv_n;

        // adapt
        for i in 0..n {
            let rows = i * m..(i + 1) * m;
            let d = fill_observation(&mut obs[i], cfg.sigma_u[i], cfg.sigma_v[i], &truth.w_o, &mut u);
            let e = adapt_local(&w[rows.clone()], &u, d, cfg.mu[i], &mut phi_next[rows.clone()]);
            if let Confidence::Adaptive { mu_cvx } = cfg.confidence {
                (alpha[i], delta[i]) =
                    adapt_confidence(alpha[i], e, &u, &phi[rows.clone()], &w_hat[rows], mu_cvx);
            }
        }

        // construct
        if cfg.mode.is_compressive() {
            let reference = match cfg.timing {
                ConstructionTiming::Previous => &phi,
                ConstructionTiming::Current => &phi_next,
            };
            for j in 0..n {
                let rows = j * m..(j + 1) * m;
                for ck in c.iter_mut() {
                    *ck = cfg.sigma_c[j] * proj[j].sample::<f64, _>(StandardNormal);
                }
                let aj = &mut a[rows.clone()];
                projection_errors(aj, &reference[rows], &c, &mut eps);
                let h = eps.iter().map(|&e| match cfg.mode {
                    DiffusionMode::SingleBit => sign(e),
                    _ => e,
                });
                add_projected(aj, &c, cfg.eta[j], h);
            }
        }

        std::mem::swap(&mut phi, &mut phi_next);
        evolve_true_parameter(&mut truth, &mut walk);

        if !phi.iter().chain(a.iter()).all(|x| x.is_finite()) {
            return Err(Error::Divergence { iteration: t + 1 });
        }
    }
    Ok(out)
}

/// Runs all trials and averages them. Uses `DIFFUSIM_THREADS` workers when
/// set, else rayon's default.
pub fn run_ensemble(cfg: &ScenarioConfig) -> Result<EnsembleResult> {
    let threads = std::env::var("DIFFUSIM_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&k| k > 0);
    run_ensemble_with_threads(cfg, threads)
}

/// Results are reduced in trial order, so they do not depend on `threads`.
pub fn run_ensemble_with_threads(
    cfg: &ScenarioConfig,
    threads: Option<usize>,
) -> Result<EnsembleResult> {
    let work = || -> Result<TrialSeries> {
        let mut sum = TrialSeries::zeros(cfg.iterations);
        let ids: Vec<usize> = (0..cfg.trials).collect();
        for chunk in ids.chunks(TRIAL_CHUNK) {
            let runs: Vec<Result<TrialSeries>> =
                chunk.par_iter().map(|&k| run_trial(cfg, k)).collect();
            for run in runs {
                let run = run?;
                for (acc, x) in sum.fields_mut().into_iter().zip(run.fields()) {
                    for (s, v) in acc.iter_mut().zip(x) {
                        *s += v;
                    }
                }
            }
        }
        let scale = 1.0 / cfg.trials as f64;
        for acc in sum.fields_mut() {
            acc.iter_mut().for_each(|s| *s *= scale);
        }
        Ok(sum)
    };
    let mean = match threads {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::Unsupported(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    Ok(EnsembleResult {
        mode: cfg.mode,
        strategy: cfg.strategy,
        iterations: cfg.iterations,
        trials: cfg.trials,
        msd_adapted: mean.msd_adapted,
        msd_combined: mean.msd_combined,
        emse_adapted: mean.emse_adapted,
        emse_combined: mean.emse_combined,
        msd_construction: mean.msd_construction,
        eps_variance: mean.eps_variance,
        mean_delta: mean.mean_delta,
        communication: count_communication(cfg, cfg.iterations),
    })
}

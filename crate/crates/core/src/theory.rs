//! Weighted-energy theory for scalar and single-bit compressed diffusion.
//!
//! The stacked deviation `psi_t = col{w_bar - phi_t, w_bar - a_t}` obeys
//! `E||psi_{t+1}||^2_sigma = E||psi_t||^2_{F_t sigma} + b^T sigma`. Curves are
//! produced by iterating the second-moment vector
//! `m_{t+1} = F_t^T m_t + b`, `m_0 = bvec(psi_0 psi_0^T)`, and reading
//! `E||psi_t||^2_sigma = m_t^T sigma`.
//!
//! `F` is never formed densely during a transient. With
//! `X (.) X` written `P_xx` and so on,
//!
//! ```text
//! F^T m = P_xx m - v1 * (P_xt m) - v2 * (P_tx m) + k * A (dd * (P_tt m))
//! ```
//!
//! where `v1`, `v2`, `dd` are diagonals built from `Lambda D Omega`, `A` is the
//! Gaussian fourth-moment operator and `k` the 0/1 mask of the single-bit
//! recursion (all ones for scalar diffusion).

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CsrMatrix;
use serde::{Deserialize, Serialize};

use crate::blockalg::{
    block_kron_diagonal, block_kron_sparse, bvec_index, fourth_moment_sparse, BlockMatrix,
    MomentSpec,
};
use crate::error::{Error, Result};
use crate::netmodel::{CombinationMatrix, Topology};
use crate::simulator::{
    Confidence, ConstructionTiming, DiffusionMode, OmegaMode, ScenarioConfig,
};

/// Largest state dimension `2MN` the theory engine accepts.
pub const MAX_STATE_DIM: usize = 64;

/// Lower bound applied to `sigma_eps^2` before forming `Omega`.
pub const SIGMA_EPS_FLOOR: f64 = 1e-12;

const POWER_MAX_ITER: usize = 20_000;
const POWER_WINDOW: usize = 500;
const POWER_TOL: f64 = 1e-10;
const SINGULAR_PIVOT: f64 = 1e-12;
const FIXED_POINT_MAX_ITER: usize = 100;
const FIXED_POINT_TOL: f64 = 1e-11;
const WARM_START_MAX_ITER: usize = 400_000;
const WARM_START_WINDOW: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TheoryMode {
    Scalar,
    SingleBit,
}

/// Block matrices of the stacked deviation model.
#[derive(Clone, Debug)]
pub struct GlobalModel {
    pub nodes: usize,
    pub block_size: usize,
    /// Confidence-blended combination matrix.
    pub gamma: CombinationMatrix,
    /// `[[G_d, G_c], [0, I]]`.
    pub x: BlockMatrix,
    /// `[[G_d, G_c], [-I, I]]`.
    pub x_tilde: BlockMatrix,
    pub g_d: DMatrix<f64>,
    pub g_c: DMatrix<f64>,
    pub mu: Vec<f64>,
    pub eta: Vec<f64>,
    pub var_u: Vec<f64>,
    pub var_c: Vec<f64>,
    pub var_v: Vec<f64>,
    pub w_bar: DVector<f64>,
    pub psi0: DVector<f64>,
    pub zeta: f64,
    /// Random-walk increment variance `q^2`.
    pub q2: f64,
    pub omega_mode: OmegaMode,
}

fn repeat(v: &[f64], m: usize) -> Vec<f64> {
    v.iter().flat_map(|&x| std::iter::repeat_n(x, m)).collect()
}

impl GlobalModel {
    /// Assembles the model for `Gamma'` (the confidence already folded in).
    pub fn assemble(
        topo: &Topology,
        gamma_prime: &CombinationMatrix,
        cfg: &ScenarioConfig,
    ) -> Result<Self> {
        let n = topo.node_count();
        let m = cfg.filter_length;
        if gamma_prime.size() != n {
            return Err(Error::Shape(format!(
                "combination matrix is {0}x{0}, topology has {n} nodes",
                gamma_prime.size()
            )));
        }
        for (name, len) in [
            ("sigma_u", cfg.sigma_u.len()),
            ("sigma_v", cfg.sigma_v.len()),
            ("sigma_c", cfg.sigma_c.len()),
            ("mu", cfg.mu.len()),
            ("eta", cfg.eta.len()),
        ] {
            if len != n {
                return Err(Error::Shape(format!("{name} has {len} entries, expected {n}")));
            }
        }
        if cfg.w_o.len() != m {
            return Err(Error::Shape(format!(
                "w° has {} entries, expected {m}",
                cfg.w_o.len()
            )));
        }
        let mn = m * n;
        let mut g_d = DMatrix::zeros(mn, mn);
        let mut g_c = DMatrix::zeros(mn, mn);
        for i in 0..n {
            for j in 0..n {
                let g = gamma_prime.get(i, j);
                let target = if i == j { &mut g_d } else { &mut g_c };
                for r in 0..m {
                    target[(i * m + r, j * m + r)] = g;
                }
            }
        }
        let eye = DMatrix::<f64>::identity(mn, mn);
        let mut x = DMatrix::zeros(2 * mn, 2 * mn);
        x.view_mut((0, 0), (mn, mn)).copy_from(&g_d);
        x.view_mut((0, mn), (mn, mn)).copy_from(&g_c);
        x.view_mut((mn, mn), (mn, mn)).copy_from(&eye);
        let mut xt = x.clone();
        xt.view_mut((mn, 0), (mn, mn)).copy_from(&(-&eye));

        let w_bar = DVector::from_iterator(mn, (0..n).flat_map(|_| cfg.w_o.iter().copied()));
        let mut psi0 = DVector::zeros(2 * mn);
        psi0.rows_mut(0, mn).copy_from(&w_bar);
        psi0.rows_mut(mn, mn).copy_from(&w_bar.map(|w| w - cfg.zeta));

        let sq = |v: &[f64]| v.iter().map(|s| s * s).collect::<Vec<_>>();
        Ok(Self {
            nodes: n,
            block_size: m,
            gamma: gamma_prime.clone(),
            x: BlockMatrix::new(x, m)?,
            x_tilde: BlockMatrix::new(xt, m)?,
            g_d,
            g_c,
            mu: cfg.mu.clone(),
            eta: cfg.eta.clone(),
            var_u: sq(&cfg.sigma_u),
            var_c: sq(&cfg.sigma_c),
            var_v: sq(&cfg.sigma_v),
            w_bar,
            psi0,
            zeta: cfg.zeta,
            q2: cfg.tracking_q * cfg.tracking_q,
            omega_mode: cfg.omega,
        })
    }

    /// Checks that the scenario is covered by the theory and assembles it.
    /// No-cooperation runs are modeled as scalar diffusion with `Gamma' = I`.
    /// The construction block is then decoupled from the estimates, so it
    /// gets the step `1 / ((M + 2) sigma_c^2)` that contracts it fastest and
    /// never limits stability.
    pub fn from_scenario(cfg: &ScenarioConfig) -> Result<(Self, TheoryMode)> {
        let mode = theory_mode(cfg)?;
        if cfg.mode == DiffusionMode::None {
            let mut cfg = cfg.clone();
            let m2 = (cfg.filter_length + 2) as f64;
            cfg.eta = cfg.sigma_c.iter().map(|s| 1.0 / (m2 * s * s)).collect();
            let gamma = CombinationMatrix::identity(cfg.node_count());
            return Ok((Self::assemble(&cfg.topology, &gamma, &cfg)?, mode));
        }
        let gamma = cfg.blended_gamma().expect("fixed confidence checked");
        Ok((Self::assemble(&cfg.topology, &gamma, cfg)?, mode))
    }

    pub fn state_dim(&self) -> usize {
        2 * self.nodes * self.block_size
    }

    /// Diagonal of `D = diag{M, N}`.
    pub fn step_diagonal(&self) -> Vec<f64> {
        let mut d = repeat(&self.mu, self.block_size);
        d.extend(repeat(&self.eta, self.block_size));
        d
    }

    /// Diagonal of `Lambda = diag{Lambda_u, Lambda_c}`.
    pub fn lambda_diagonal(&self) -> Vec<f64> {
        let mut d = repeat(&self.var_u, self.block_size);
        d.extend(repeat(&self.var_c, self.block_size));
        d
    }

    /// `bvec(psi_0 psi_0^T)`.
    pub fn initial_moment(&self) -> DVector<f64> {
        let outer = &self.psi0 * self.psi0.transpose();
        bvec_dense(&outer, self.block_size)
    }

    fn blocks(&self) -> usize {
        2 * self.nodes
    }
}

/// Maps a scenario onto a theory mode, or explains why it is not covered.
pub fn theory_mode(cfg: &ScenarioConfig) -> Result<TheoryMode> {
    if let Confidence::Adaptive { .. } = cfg.confidence {
        return Err(Error::Unsupported(
            "theory covers fixed confidence only; adaptive confidence is simulation-only".into(),
        ));
    }
    if cfg.timing == ConstructionTiming::Current {
        return Err(Error::Unsupported(
            "theory assumes construction from the previous iterate (construction_timing = previous)"
                .into(),
        ));
    }
    if cfg.projection_dim != 1 {
        return Err(Error::Unsupported(
            "theory covers vector projections only (projection_dim = 1)".into(),
        ));
    }
    let dim = 2 * cfg.filter_length * cfg.node_count();
    if dim > MAX_STATE_DIM {
        return Err(Error::Unsupported(format!(
            "state dimension 2MN = {dim} exceeds the theory limit {MAX_STATE_DIM}"
        )));
    }
    match cfg.mode {
        DiffusionMode::Scalar | DiffusionMode::None => Ok(TheoryMode::Scalar),
        DiffusionMode::SingleBit => Ok(TheoryMode::SingleBit),
        DiffusionMode::Full => Err(Error::Unsupported(
            "theory covers scalar and single-bit diffusion, not full diffusion".into(),
        )),
    }
}

fn bvec_dense(s: &DMatrix<f64>, m: usize) -> DVector<f64> {
    let n = s.nrows() / m;
    let mut out = DVector::zeros(s.nrows() * s.ncols());
    for j in 0..n {
        for i in 0..n {
            for c in 0..m {
                for r in 0..m {
                    out[bvec_index(i, j, r, c, n, m)] = s[(i * m + r, j * m + c)];
                }
            }
        }
    }
    out
}

/// `bvec` of a matrix whose `(bi, bj)` block is `value(bi, bj) I_M`.
fn bvec_scaled_identities(blocks: usize, m: usize, value: impl Fn(usize, usize) -> f64) -> DVector<f64> {
    let mut out = DVector::zeros((blocks * m).pow(2));
    for j in 0..blocks {
        for i in 0..blocks {
            let v = value(i, j);
            if v != 0.0 {
                for r in 0..m {
                    out[bvec_index(i, j, r, r, blocks, m)] = v;
                }
            }
        }
    }
    out
}

/// Noise vector `b`. Scalar: `bvec{R_n D^2 Lambda}`. Single-bit: the
/// estimate part `R_v M^2 Lambda_u` lifted to the upper quadrant plus
/// `N^2 Lambda_c` lifted to the lower quadrant.
pub fn noise_vector(gm: &GlobalModel, mode: TheoryMode) -> DVector<f64> {
    let n = gm.nodes;
    bvec_scaled_identities(gm.blocks(), gm.block_size, |i, j| {
        if i != j {
            0.0
        } else if i < n {
            gm.var_v[i] * gm.mu[i] * gm.mu[i] * gm.var_u[i]
        } else if mode == TheoryMode::SingleBit {
            let k = i - n;
            gm.eta[k] * gm.eta[k] * gm.var_c[k]
        } else {
            0.0
        }
    })
}

/// `xi = bvec{[[Lambda_c, -Lambda_c], [-Lambda_c, Lambda_c]]}`, so that
/// `E||psi_t||^2_xi = E[eps_t^T eps_t]`. With `node = Some(k)` only node
/// `k`'s entries are kept.
pub fn eps_weighting(gm: &GlobalModel, node: Option<usize>) -> DVector<f64> {
    let n = gm.nodes;
    bvec_scaled_identities(gm.blocks(), gm.block_size, |i, j| {
        let (ki, kj) = (i % n, j % n);
        if ki != kj || node.is_some_and(|k| k != ki) {
            return 0.0;
        }
        let sign = if (i < n) == (j < n) { 1.0 } else { -1.0 };
        sign * gm.var_c[ki]
    })
}

/// `rho = bvec{1_{2N} (x) q^2 I_M}`.
pub fn drift_vector(gm: &GlobalModel, q2: f64) -> DVector<f64> {
    bvec_scaled_identities(gm.blocks(), gm.block_size, |_, _| q2)
}

/// `Omega` diagonal (length `MN`) and whether the floor was applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Omega {
    pub diagonal: Vec<f64>,
    pub clamped: bool,
}

/// Pooled `Omega = sqrt(2/pi) sqrt(N) / sigma_eps I_MN`.
pub fn build_omega(sigma_eps_sq: f64, nodes: usize, block_size: usize) -> Omega {
    let clamped = !(sigma_eps_sq >= SIGMA_EPS_FLOOR);
    let s = if clamped { SIGMA_EPS_FLOOR } else { sigma_eps_sq };
    let w = (2.0 / std::f64::consts::PI).sqrt() * (nodes as f64).sqrt() / s.sqrt();
    Omega {
        diagonal: vec![w; nodes * block_size],
        clamped,
    }
}

/// Per-node `Omega_i = sqrt(2/pi) / sigma_eps_i I_M`.
pub fn build_omega_per_node(sigma_eps_sq: &[f64], block_size: usize) -> Omega {
    let mut clamped = false;
    let per: Vec<f64> = sigma_eps_sq
        .iter()
        .map(|&s| {
            let s = if s >= SIGMA_EPS_FLOOR {
                s
            } else {
                clamped = true;
                SIGMA_EPS_FLOOR
            };
            (2.0 / std::f64::consts::PI).sqrt() / s.sqrt()
        })
        .collect();
    Omega {
        diagonal: repeat(&per, block_size),
        clamped,
    }
}

/// Diagonals that depend on `Omega`.
#[derive(Clone, Debug)]
pub struct Weights {
    v1: DVector<f64>,
    v2: DVector<f64>,
    dd: DVector<f64>,
}

/// Factored energy operator for one model and mode.
#[derive(Clone, Debug)]
pub struct EnergyOperator {
    dim: usize,
    block_size: usize,
    nodes: usize,
    xx: CsrMatrix<f64>,
    xt: CsrMatrix<f64>,
    tx: CsrMatrix<f64>,
    tt: CsrMatrix<f64>,
    moments: CsrMatrix<f64>,
    mask: DVector<f64>,
    step: Vec<f64>,
    lambda: Vec<f64>,
}

fn spmv(a: &CsrMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let (offsets, cols, vals) = (a.row_offsets(), a.col_indices(), a.values());
    for (r, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for k in offsets[r]..offsets[r + 1] {
            s += vals[k] * x[cols[k]];
        }
        *o = s;
    }
}

/// Diagonal of `K`: zero on the diagonal `M x M` blocks of the lower-right
/// quadrant, one elsewhere.
pub fn mask_diagonal(nodes: usize, block_size: usize) -> DVector<f64> {
    let blocks = 2 * nodes;
    let m = block_size;
    let mut out = DVector::from_element((blocks * m).pow(2), 1.0);
    for k in nodes..blocks {
        for c in 0..m {
            for r in 0..m {
                out[bvec_index(k, k, r, c, blocks, m)] = 0.0;
            }
        }
    }
    out
}

impl EnergyOperator {
    pub fn new(gm: &GlobalModel, mode: TheoryMode) -> Result<Self> {
        let dim = gm.state_dim();
        if dim > MAX_STATE_DIM {
            return Err(Error::Unsupported(format!(
                "state dimension 2MN = {dim} exceeds the theory limit {MAX_STATE_DIM}"
            )));
        }
        let m = gm.block_size;
        let u = MomentSpec::new(gm.var_u.clone(), m)?;
        let c = MomentSpec::new(gm.var_c.clone(), m)?;
        let mask = match mode {
            TheoryMode::Scalar => DVector::from_element(dim * dim, 1.0),
            TheoryMode::SingleBit => mask_diagonal(gm.nodes, m),
        };
        Ok(Self {
            dim,
            block_size: m,
            nodes: gm.nodes,
            xx: block_kron_sparse(&gm.x, &gm.x)?,
            xt: block_kron_sparse(&gm.x, &gm.x_tilde)?,
            tx: block_kron_sparse(&gm.x_tilde, &gm.x)?,
            tt: block_kron_sparse(&gm.x_tilde, &gm.x_tilde)?,
            moments: fourth_moment_sparse(&u, Some(&c))?,
            mask,
            step: gm.step_diagonal(),
            lambda: gm.lambda_diagonal(),
        })
    }

    /// Length of the moment vector, `(2MN)^2`.
    pub fn len(&self) -> usize {
        self.dim * self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.dim == 0
    }

    /// Builds the diagonals for `Omega_bar = diag{I, Omega}`; `None` means
    /// `Omega = I`.
    pub fn weights(&self, omega: Option<&Omega>) -> Weights {
        let half = self.dim / 2;
        let om: Vec<f64> = (0..self.dim)
            .map(|k| match omega {
                Some(o) if k >= half => o.diagonal[k - half],
                _ => 1.0,
            })
            .collect();
        let d_om: Vec<f64> = self.step.iter().zip(&om).map(|(d, o)| d * o).collect();
        let ld_om: Vec<f64> = self.lambda.iter().zip(&d_om).map(|(l, d)| l * d).collect();
        let ones = vec![1.0; self.dim];
        let m = self.block_size;
        Weights {
            v1: block_kron_diagonal(&ones, &ld_om, m).expect("matching lengths"),
            v2: block_kron_diagonal(&ld_om, &ones, m).expect("matching lengths"),
            dd: block_kron_diagonal(&d_om, &d_om, m).expect("matching lengths"),
        }
    }

    /// `out = F^T x`.
    pub fn apply_transpose(&self, w: &Weights, x: &[f64], out: &mut [f64], scratch: &mut Scratch) {
        spmv(&self.xx, x, out);
        spmv(&self.xt, x, &mut scratch.a);
        spmv(&self.tx, x, &mut scratch.b);
        for k in 0..out.len() {
            out[k] -= w.v1[k] * scratch.a[k] + w.v2[k] * scratch.b[k];
        }
        spmv(&self.tt, x, &mut scratch.a);
        for k in 0..out.len() {
            scratch.a[k] *= w.dd[k];
        }
        spmv(&self.moments, &scratch.a, &mut scratch.b);
        for k in 0..out.len() {
            out[k] += self.mask[k] * scratch.b[k];
        }
    }

    /// Dense `F^T`.
    pub fn dense_transpose(&self, w: &Weights) -> DMatrix<f64> {
        let n2 = self.len();
        let mut out = DMatrix::zeros(n2, n2);
        let mut add = |a: &CsrMatrix<f64>, row_scale: &dyn Fn(usize) -> f64| {
            for (r, row) in a.row_iter().enumerate() {
                let s = row_scale(r);
                if s == 0.0 {
                    continue;
                }
                for (&c, &v) in row.col_indices().iter().zip(row.values()) {
                    out[(r, c)] += s * v;
                }
            }
        };
        add(&self.xx, &|_| 1.0);
        add(&self.xt, &|r| -w.v1[r]);
        add(&self.tx, &|r| -w.v2[r]);
        let mut scaled = self.tt.clone();
        for (r, mut row) in scaled.row_iter_mut().enumerate() {
            row.values_mut().iter_mut().for_each(|v| *v *= w.dd[r]);
        }
        let last = &self.moments * &scaled;
        add(&last, &|r| self.mask[r]);
        out
    }

    /// Dense `F`.
    pub fn dense(&self, w: &Weights) -> DMatrix<f64> {
        self.dense_transpose(w).transpose()
    }

    pub fn scratch(&self) -> Scratch {
        Scratch {
            a: vec![0.0; self.len()],
            b: vec![0.0; self.len()],
        }
    }
}

pub struct Scratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

/// Scalar-diffusion `F` (dense) and `b`.
pub fn build_f_scalar(gm: &GlobalModel) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let op = EnergyOperator::new(gm, TheoryMode::Scalar)?;
    Ok((op.dense(&op.weights(None)), noise_vector(gm, TheoryMode::Scalar)))
}

/// Single-bit `F_t` (dense) for a given `Omega`, and `b`.
pub fn build_f_singlebit(gm: &GlobalModel, omega: &Omega) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let op = EnergyOperator::new(gm, TheoryMode::SingleBit)?;
    Ok((
        op.dense(&op.weights(Some(omega))),
        noise_vector(gm, TheoryMode::SingleBit),
    ))
}

/// Tracks `sigma_eps^2` for the single-bit recursion.
struct OmegaTracker {
    pooled: Option<DVector<f64>>,
    per_node: Vec<DVector<f64>>,
    nodes: usize,
    block_size: usize,
}

impl OmegaTracker {
    fn new(gm: &GlobalModel, mode: TheoryMode) -> Self {
        let (pooled, per_node) = match (mode, gm.omega_mode) {
            (TheoryMode::Scalar, _) => (None, Vec::new()),
            (TheoryMode::SingleBit, OmegaMode::Pooled) => (Some(eps_weighting(gm, None)), Vec::new()),
            (TheoryMode::SingleBit, OmegaMode::PerNode) => (
                None,
                (0..gm.nodes).map(|k| eps_weighting(gm, Some(k))).collect(),
            ),
        };
        Self {
            pooled,
            per_node,
            nodes: gm.nodes,
            block_size: gm.block_size,
        }
    }

    fn is_active(&self) -> bool {
        self.pooled.is_some() || !self.per_node.is_empty()
    }

    /// Current `sigma_eps^2` values (one pooled value or one per node).
    fn read(&self, moment: &[f64]) -> Vec<f64> {
        let dot = |xi: &DVector<f64>| xi.iter().zip(moment).map(|(a, b)| a * b).sum::<f64>();
        match &self.pooled {
            Some(xi) => vec![dot(xi)],
            None => self.per_node.iter().map(dot).collect(),
        }
    }

    fn omega(&self, s: &[f64]) -> Option<Omega> {
        if self.pooled.is_some() {
            Some(build_omega(s[0], self.nodes, self.block_size))
        } else if !self.per_node.is_empty() {
            Some(build_omega_per_node(s, self.block_size))
        } else {
            None
        }
    }
}

/// Theory curves `E||psi_t||^2_sigma`, `t = 0..T-1`, one per target.
#[derive(Clone, Debug, PartialEq)]
pub struct TransientCurves {
    pub values: Vec<Vec<f64>>,
    /// `sigma_eps^2` used at each step (single-bit only; pooled or summed).
    pub sigma_eps_sq: Vec<f64>,
    /// Whether the `sigma_eps^2` floor was ever applied.
    pub floor_clamped: bool,
}

fn drive(gm: &GlobalModel, mode: TheoryMode) -> DVector<f64> {
    let mut b = noise_vector(gm, mode);
    if gm.q2 > 0.0 {
        b += drift_vector(gm, gm.q2);
    }
    b
}

/// Forward moment recursion. Includes the random-walk drift when `gm.q2 > 0`.
pub fn iterate_transient(
    gm: &GlobalModel,
    mode: TheoryMode,
    targets: &[DVector<f64>],
    iterations: usize,
) -> Result<TransientCurves> {
    let op = EnergyOperator::new(gm, mode)?;
    let tracker = OmegaTracker::new(gm, mode);
    let b = drive(gm, mode);
    let mut moment = gm.initial_moment();
    let mut next = DVector::zeros(op.len());
    let mut scratch = op.scratch();
    let mut values = vec![Vec::with_capacity(iterations); targets.len()];
    let mut sigma_eps_sq = Vec::new();
    let mut floor_clamped = false;
    let mut weights = op.weights(None);

    for t in 0..iterations {
        for (curve, sigma) in values.iter_mut().zip(targets) {
            curve.push(moment.dot(sigma));
        }
        if tracker.is_active() {
            let s = tracker.read(moment.as_slice());
            let omega = tracker.omega(&s).expect("tracker active");
            floor_clamped |= omega.clamped;
            sigma_eps_sq.push(s.iter().sum());
            weights = op.weights(Some(&omega));
        }
        op.apply_transpose(&weights, moment.as_slice(), next.as_mut_slice(), &mut scratch);
        next += &b;
        std::mem::swap(&mut moment, &mut next);
        if !moment.iter().all(|x| x.is_finite()) {
            return Err(Error::Divergence { iteration: t + 1 });
        }
    }
    Ok(TransientCurves {
        values,
        sigma_eps_sq,
        floor_clamped,
    })
}

/// Largest state dimension for the product-form validation recursion.
pub const MAX_PRODUCT_DIM: usize = 8;

/// The same curves via the accumulated products
/// `Pi_t = Pi_{t-1} F_t`, `Delta_t = Delta_{t-1} F_t + I` and
/// `E_{t+1} = E_t - ||psi_0||^2_{Pi_{t-1}(I - F_t) sigma}
///            + b^T (I - Delta_{t-1}(I - F_t)) sigma`.
/// Dense and cubic per step; meant for validating [`iterate_transient`].
pub fn iterate_transient_products(
    gm: &GlobalModel,
    mode: TheoryMode,
    targets: &[DVector<f64>],
    iterations: usize,
) -> Result<TransientCurves> {
    if gm.state_dim() > MAX_PRODUCT_DIM {
        return Err(Error::Unsupported(format!(
            "product-form recursion is limited to 2MN <= {MAX_PRODUCT_DIM}"
        )));
    }
    let op = EnergyOperator::new(gm, mode)?;
    let tracker = OmegaTracker::new(gm, mode);
    let b = drive(gm, mode);
    let w0 = gm.initial_moment();
    let n2 = op.len();
    let eye = DMatrix::<f64>::identity(n2, n2);
    let mut pi = eye.clone();
    let mut delta = DMatrix::<f64>::zeros(n2, n2);

    // The eps weightings ride along so that Omega can be refreshed each step.
    let mut all: Vec<DVector<f64>> = targets.to_vec();
    let extra = match (&tracker.pooled, tracker.per_node.is_empty()) {
        (Some(xi), _) => vec![xi.clone()],
        (None, false) => tracker.per_node.clone(),
        _ => Vec::new(),
    };
    let first_extra = all.len();
    all.extend(extra);
    let mut current: Vec<f64> = all.iter().map(|s| w0.dot(s)).collect();

    let mut values = vec![Vec::with_capacity(iterations); targets.len()];
    let mut sigma_eps_sq = Vec::new();
    let mut floor_clamped = false;
    for t in 0..iterations {
        for (curve, v) in values.iter_mut().zip(&current) {
            curve.push(*v);
        }
        let weights = if tracker.is_active() {
            let s = &current[first_extra..];
            let omega = tracker.omega(s).expect("tracker active");
            floor_clamped |= omega.clamped;
            sigma_eps_sq.push(s.iter().sum());
            op.weights(Some(&omega))
        } else {
            op.weights(None)
        };
        let f = op.dense(&weights);
        let i_minus_f = &eye - &f;
        for (v, sigma) in current.iter_mut().zip(&all) {
            let g = &i_minus_f * sigma;
            let a = w0.dot(&(&pi * &g));
            let c = b.dot(&(sigma - &delta * &g));
            *v = *v - a + c;
        }
        pi = &pi * &f;
        delta = &delta * &f + &eye;
        if !current.iter().all(|x| x.is_finite()) {
            return Err(Error::Divergence { iteration: t + 1 });
        }
    }
    Ok(TransientCurves {
        values,
        sigma_eps_sq,
        floor_clamped,
    })
}

/// Spectral radius of `F` from power iteration on `F^T` started at
/// `bvec(I)`, using the growth rate over a sliding window.
pub fn spectral_radius(op: &EnergyOperator, w: &Weights) -> f64 {
    let n2 = op.len();
    let dim = op.dim;
    let mut x = DVector::zeros(n2);
    let blocks = 2 * op.nodes;
    for k in 0..dim {
        let (blk, r) = (k / op.block_size, k % op.block_size);
        x[bvec_index(blk, blk, r, r, blocks, op.block_size)] = 1.0;
    }
    x /= x.norm();
    let mut y = DVector::zeros(n2);
    let mut scratch = op.scratch();
    let mut log_norms = vec![0.0f64];
    let mut acc = 0.0;
    let mut last_estimate = f64::NAN;
    for k in 1..=POWER_MAX_ITER {
        op.apply_transpose(w, x.as_slice(), y.as_mut_slice(), &mut scratch);
        let norm = y.norm();
        if norm == 0.0 || !norm.is_finite() {
            return if norm == 0.0 { 0.0 } else { f64::INFINITY };
        }
        acc += norm.ln();
        log_norms.push(acc);
        x.copy_from(&y);
        x /= norm;
        if k >= POWER_WINDOW && k % (POWER_WINDOW / 5) == 0 {
            let estimate = ((acc - log_norms[k - POWER_WINDOW]) / POWER_WINDOW as f64).exp();
            if (estimate - last_estimate).abs() <= POWER_TOL * estimate {
                return estimate;
            }
            last_estimate = estimate;
        }
    }
    let k = POWER_MAX_ITER;
    ((acc - log_norms[k - POWER_WINDOW]) / POWER_WINDOW as f64).exp()
}

/// Stationary predictions `(b + rho)^T (I - F)^{-1} sigma` for each target.
#[derive(Clone, Debug, PartialEq)]
pub struct SteadyState {
    pub values: Vec<f64>,
    pub spectral_radius: f64,
    /// Fixed-point `sigma_eps^2` (single-bit only; one pooled value or one
    /// per node).
    pub sigma_eps_sq: Option<Vec<f64>>,
}

struct Solved {
    y: DVector<f64>,
}

fn solve_stationary(op: &EnergyOperator, w: &Weights, drive: &DVector<f64>) -> Option<Solved> {
    let n2 = op.len();
    let lu = (DMatrix::<f64>::identity(n2, n2) - op.dense_transpose(w)).lu();
    let pivots = lu.u().diagonal().map(f64::abs);
    if pivots.min() <= SINGULAR_PIVOT * pivots.max() {
        return None;
    }
    let y = lu.solve(drive)?;
    if y.iter().all(|v| v.is_finite()) {
        Some(Solved { y })
    } else {
        None
    }
}

/// Runs the single-bit forward recursion until `sigma_eps^2` settles.
fn warm_start(
    op: &EnergyOperator,
    tracker: &OmegaTracker,
    gm: &GlobalModel,
    drive: &DVector<f64>,
) -> Result<Vec<f64>> {
    let mut moment = gm.initial_moment();
    let mut next = DVector::zeros(op.len());
    let mut scratch = op.scratch();
    let mut prev = tracker.read(moment.as_slice());
    for t in 0..WARM_START_MAX_ITER {
        let s = tracker.read(moment.as_slice());
        let omega = tracker.omega(&s).expect("single-bit tracker");
        op.apply_transpose(&op.weights(Some(&omega)), moment.as_slice(), next.as_mut_slice(), &mut scratch);
        next += drive;
        std::mem::swap(&mut moment, &mut next);
        if !moment.iter().all(|x| x.is_finite()) {
            return Err(Error::Divergence { iteration: t + 1 });
        }
        if (t + 1) % WARM_START_WINDOW == 0 {
            let s = tracker.read(moment.as_slice());
            let settled = s
                .iter()
                .zip(&prev)
                .all(|(a, b)| (a - b).abs() <= 1e-9 * a.abs().max(f64::MIN_POSITIVE));
            if settled {
                return Ok(s);
            }
            prev = s;
        }
    }
    Ok(tracker.read(moment.as_slice()))
}

/// Solves `s = drive^T (I - F(s))^{-1} xi` for the pooled `sigma_eps^2`.
/// Bracketed Illinois iteration on `g(l) = ln h(e^l) - l`; `h` is treated as
/// `+inf` wherever the solve fails or gives a nonpositive value.
fn pooled_fixed_point(
    op: &EnergyOperator,
    tracker: &OmegaTracker,
    drive: &DVector<f64>,
    guess: f64,
) -> Result<f64> {
    let xi = tracker.pooled.as_ref().expect("pooled tracker");
    let g = |l: f64| -> f64 {
        let omega = tracker.omega(&[l.exp()]).expect("pooled tracker");
        match solve_stationary(op, &op.weights(Some(&omega)), drive) {
            Some(sol) => {
                let h = sol.y.dot(xi);
                if h > 0.0 {
                    h.ln() - l
                } else {
                    f64::INFINITY
                }
            }
            None => f64::INFINITY,
        }
    };
    let l0 = guess.max(SIGMA_EPS_FLOOR).ln();
    let (mut lo, mut hi) = (l0 - 0.05, l0 + 0.05);
    let (mut glo, mut ghi) = (g(lo), g(hi));
    let mut expand = 0;
    while !(glo > 0.0 && ghi < 0.0) {
        expand += 1;
        if expand > 60 {
            return Err(Error::Convergence {
                iterations: expand,
                residual: ghi.abs().min(glo.abs()),
            });
        }
        if glo <= 0.0 {
            lo -= 0.5 * expand as f64;
            glo = g(lo);
        }
        if ghi >= 0.0 {
            hi += 0.5 * expand as f64;
            ghi = g(hi);
        }
    }
    let mut side = 0i8;
    for _ in 0..FIXED_POINT_MAX_ITER {
        let mid = if glo.is_finite() {
            (lo * ghi - hi * glo) / (ghi - glo)
        } else {
            0.5 * (lo + hi)
        };
        let gm = g(mid);
        if gm.abs() < FIXED_POINT_TOL || (hi - lo).abs() < FIXED_POINT_TOL {
            return Ok(mid.exp());
        }
        if gm > 0.0 {
            lo = mid;
            glo = gm;
            if side == 1 {
                ghi *= 0.5;
            }
            side = 1;
        } else {
            hi = mid;
            ghi = gm;
            if side == -1 && glo.is_finite() {
                glo *= 0.5;
            }
            side = -1;
        }
    }
    Err(Error::Convergence {
        iterations: FIXED_POINT_MAX_ITER,
        residual: (hi - lo).abs(),
    })
}

/// Per-node fixed point `s_i = drive^T (I - F(s))^{-1} xi_i` by plain
/// iteration from the warm start.
fn per_node_fixed_point(
    op: &EnergyOperator,
    tracker: &OmegaTracker,
    drive: &DVector<f64>,
    guess: Vec<f64>,
) -> Result<Vec<f64>> {
    let mut s = guess;
    let mut residual = f64::INFINITY;
    for _ in 0..FIXED_POINT_MAX_ITER {
        let omega = tracker.omega(&s).expect("per-node tracker");
        let sol = solve_stationary(op, &op.weights(Some(&omega)), drive).ok_or(
            Error::Convergence {
                iterations: 0,
                residual,
            },
        )?;
        let next: Vec<f64> = tracker.per_node.iter().map(|xi| sol.y.dot(xi)).collect();
        residual = next
            .iter()
            .zip(&s)
            .map(|(a, b)| (a - b).abs() / a.abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        s = next;
        if residual < FIXED_POINT_TOL {
            return Ok(s);
        }
    }
    Err(Error::Convergence {
        iterations: FIXED_POINT_MAX_ITER,
        residual,
    })
}

fn stationary(
    gm: &GlobalModel,
    mode: TheoryMode,
    targets: &[DVector<f64>],
    q2: f64,
) -> Result<SteadyState> {
    let op = EnergyOperator::new(gm, mode)?;
    let tracker = OmegaTracker::new(gm, mode);
    let mut drive = noise_vector(gm, mode);
    if q2 > 0.0 {
        drive += drift_vector(gm, q2);
    }
    let (weights, sigma_eps_sq) = if tracker.is_active() {
        let guess = warm_start(&op, &tracker, gm, &drive)?;
        let s = if tracker.pooled.is_some() {
            vec![pooled_fixed_point(&op, &tracker, &drive, guess[0])?]
        } else {
            per_node_fixed_point(&op, &tracker, &drive, guess)?
        };
        let omega = tracker.omega(&s).expect("tracker active");
        (op.weights(Some(&omega)), Some(s))
    } else {
        (op.weights(None), None)
    };
    let radius = spectral_radius(&op, &weights);
    if radius >= 1.0 {
        return Err(Error::Instability { radius });
    }
    // A singular I - F means an eigenvalue sits exactly on the unit circle,
    // which power iteration only approaches from below.
    let sol = solve_stationary(&op, &weights, &drive).ok_or(Error::Instability {
        radius: radius.max(1.0),
    })?;
    Ok(SteadyState {
        values: targets.iter().map(|s| sol.y.dot(s)).collect(),
        spectral_radius: radius,
        sigma_eps_sq,
    })
}

/// `b^T (I - F)^{-1} sigma` for each target (`F_inf` in single-bit mode).
pub fn steady_state(gm: &GlobalModel, mode: TheoryMode, targets: &[DVector<f64>]) -> Result<SteadyState> {
    stationary(gm, mode, targets, 0.0)
}

/// `(b + rho)^T (I - F_inf)^{-1} sigma` with `Q = q2 I`.
pub fn tracking_steady_state(
    gm: &GlobalModel,
    mode: TheoryMode,
    targets: &[DVector<f64>],
    q2: f64,
) -> Result<SteadyState> {
    stationary(gm, mode, targets, q2)
}


/// Monte Carlo check of the sign linearization: returns
/// `(mean of c sign(c^T x), sqrt(2/pi) / sigma_eps E[c c^T] x)` for
/// `c ~ N(0, sigma_c^2 I)`, where `sigma_eps^2 = sigma_c^2 ||x||^2`.
pub fn sign_correlation_check(x: &[f64], sigma_c: f64, samples: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let m = x.len();
    let mut acc = vec![0.0; m];
    let mut c = vec![0.0; m];
    for _ in 0..samples {
        let mut eps = 0.0;
        for (ck, xk) in c.iter_mut().zip(x) {
            *ck = sigma_c * rng.sample::<f64, _>(rand_distr::StandardNormal);
            eps += *ck * xk;
        }
        let s = if eps >= 0.0 { 1.0 } else { -1.0 };
        for (a, ck) in acc.iter_mut().zip(&c) {
            *a += s * ck;
        }
    }
    let mc = acc.iter().map(|a| a / samples as f64).collect();
    let sigma_eps = sigma_c * x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let k = (2.0 / std::f64::consts::PI).sqrt() / sigma_eps;
    let predicted = x.iter().map(|v| k * sigma_c * sigma_c * v).collect();
    (mc, predicted)
}

/// Monte Carlo check of the constant term of the single-bit recursion.
/// For weighting `Sigma` on the stacked deviation, returns
/// `(mean of sign(eps)^T C^T N Sigma_lower N C sign(eps), b2^T bvec(Sigma))`
/// where `Sigma_lower` is the lower-right quadrant, `C = blkdiag{c_i}` and
/// `eps_i = c_i^T x_i`.
pub fn sign_energy_check(
    gm: &GlobalModel,
    sigma: &BlockMatrix,
    x: &[f64],
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    use rand::{Rng, SeedableRng};
    let n = gm.nodes;
    let m = gm.block_size;
    let mn = n * m;
    if sigma.data().nrows() != 2 * mn || x.len() != mn {
        return Err(Error::Shape("weighting or deviation has the wrong size".into()));
    }
    let lower = sigma.data().view((mn, mn), (mn, mn)).into_owned();
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut v = DVector::zeros(mn);
    let mut acc = 0.0;
    for _ in 0..samples {
        for i in 0..n {
            let sc = gm.var_c[i].sqrt();
            let mut eps = 0.0;
            for r in 0..m {
                let c = sc * rng.sample::<f64, _>(rand_distr::StandardNormal);
                v[i * m + r] = c;
                eps += c * x[i * m + r];
            }
            let s = if eps >= 0.0 { 1.0 } else { -1.0 };
            for r in 0..m {
                v[i * m + r] *= s * gm.eta[i];
            }
        }
        acc += v.dot(&(&lower * &v));
    }
    let mut b2 = noise_vector(gm, TheoryMode::SingleBit) - noise_vector(gm, TheoryMode::Scalar);
    b2.iter_mut().for_each(|x| *x = x.max(0.0));
    let target = crate::blockalg::bvec(sigma)?;
    Ok((acc / samples as f64, b2.dot(&target)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockalg::{block_kron, bvec, fourth_moment_operator, selection_and_mask};
    use crate::netmodel::build_uniform_weights;
    use approx::assert_relative_eq;

    pub(crate) fn scenario(n: usize, m: usize, mode: DiffusionMode) -> ScenarioConfig {
        let topo = Topology::fully_connected(n).unwrap();
        let gamma = build_uniform_weights(&topo);
        ScenarioConfig {
            topology: topo,
            gamma,
            filter_length: m,
            strategy: Default::default(),
            mode,
            sigma_u: (0..n).map(|i| 0.8 + 0.2 * i as f64).collect(),
            sigma_v: vec![0.1; n],
            sigma_c: (0..n).map(|i| 1.0 + 0.1 * i as f64).collect(),
            mu: vec![0.05; n],
            eta: vec![0.2; n],
            confidence: Confidence::Fixed(0.3),
            zeta: 0.01,
            timing: ConstructionTiming::Previous,
            projection_dim: 1,
            omega: OmegaMode::Pooled,
            w_o: (0..m).map(|k| 1.0 - 0.3 * k as f64).collect(),
            tracking_q: 0.0,
            iterations: 10,
            trials: 1,
            master_seed: 0,
        }
    }

    /// `F` straight from its definition with dense block Kronecker products.
    fn literal_f(gm: &GlobalModel, omega: Option<&Omega>, masked: bool) -> DMatrix<f64> {
        let m = gm.block_size;
        let dim = gm.state_dim();
        let mut om = vec![1.0; dim];
        if let Some(o) = omega {
            om[dim / 2..].copy_from_slice(&o.diagonal);
        }
        let diag = |v: Vec<f64>| BlockMatrix::from_diagonal(&DVector::from_vec(v), m).unwrap();
        let d_om: Vec<f64> = gm.step_diagonal().iter().zip(&om).map(|(a, b)| a * b).collect();
        let ld_om: Vec<f64> = gm.lambda_diagonal().iter().zip(&d_om).map(|(a, b)| a * b).collect();
        let eye = BlockMatrix::identity(2 * gm.nodes, m);
        let xt = gm.x.transpose();
        let tt = gm.x_tilde.transpose();
        let k = |a: &BlockMatrix, b: &BlockMatrix| block_kron(a, b).unwrap().into_inner();
        let u = MomentSpec::new(gm.var_u.clone(), m).unwrap();
        let c = MomentSpec::new(gm.var_c.clone(), m).unwrap();
        let a = fourth_moment_operator(&u, Some(&c)).unwrap();
        let kmask = if masked {
            selection_and_mask(m, gm.nodes).unwrap().mask
        } else {
            DMatrix::identity(a.nrows(), a.ncols())
        };
        k(&xt, &xt) - k(&xt, &tt) * k(&eye, &diag(ld_om.clone())) - k(&tt, &xt) * k(&diag(ld_om), &eye)
            + k(&tt, &tt) * k(&diag(d_om.clone()), &diag(d_om)) * a * kmask
    }

    #[test]
    fn no_cooperation_structure() {
        let cfg = scenario(2, 2, DiffusionMode::Scalar);
        let gm = GlobalModel::assemble(&cfg.topology, &CombinationMatrix::identity(2), &cfg).unwrap();
        assert!(gm.g_c.iter().all(|&x| x == 0.0));
        assert_eq!(gm.x.data(), &DMatrix::identity(8, 8));
        let xt = gm.x_tilde.data();
        assert_eq!(xt[(4, 0)], -1.0);
        assert_eq!(xt[(4, 4)], 1.0);
        assert_eq!(xt[(0, 0)], 1.0);
    }

    #[test]
    fn two_node_uniform_assembly() {
        let mut cfg = scenario(2, 2, DiffusionMode::Scalar);
        cfg.confidence = Confidence::Fixed(0.0);
        let (gm, _) = GlobalModel::from_scenario(&cfg).unwrap();
        let g = &gm.g_d + &gm.g_c;
        for r in 0..4 {
            for c in 0..4 {
                let expect = if r % 2 == c % 2 { 0.5 } else { 0.0 };
                assert_eq!(g[(r, c)], expect);
                let d = if r == c { 0.5 } else { 0.0 };
                assert_eq!(gm.g_d[(r, c)], d);
            }
        }
        // G w_bar = w_bar
        assert_relative_eq!(g * &gm.w_bar, gm.w_bar.clone(), epsilon = 1e-15);
    }

    #[test]
    fn factored_operator_matches_literal_definition() {
        for (n, m) in [(1, 1), (2, 1), (2, 2), (3, 2)] {
            let cfg = scenario(n, m, DiffusionMode::Scalar);
            let (gm, _) = GlobalModel::from_scenario(&cfg).unwrap();
            let (f, _) = build_f_scalar(&gm).unwrap();
            let lit = literal_f(&gm, None, false);
            assert!((&f - &lit).amax() < 1e-12, "scalar n={n} m={m}");

            let omega = build_omega(0.37, n, m);
            let (f, _) = build_f_singlebit(&gm, &omega).unwrap();
            let lit = literal_f(&gm, Some(&omega), true);
            assert!((&f - &lit).amax() < 1e-12, "single-bit n={n} m={m}");

            let op = EnergyOperator::new(&gm, TheoryMode::SingleBit).unwrap();
            let w = op.weights(Some(&omega));
            let x = DVector::from_fn(op.len(), |k, _| ((k * 7 + 3) % 11) as f64 - 5.0);
            let mut y = DVector::zeros(op.len());
            op.apply_transpose(&w, x.as_slice(), y.as_mut_slice(), &mut op.scratch());
            assert!((y - lit.transpose() * x).amax() < 1e-10);
        }
    }

    #[test]
    fn zero_steps_leave_only_the_coupling() {
        let mut cfg = scenario(2, 2, DiffusionMode::Scalar);
        cfg.mu = vec![0.0; 2];
        cfg.eta = vec![0.0; 2];
        let (gm, _) = GlobalModel::from_scenario(&cfg).unwrap();
        let (f, b) = build_f_scalar(&gm).unwrap();
        let k = block_kron(&gm.x.transpose(), &gm.x.transpose()).unwrap();
        assert!((f - k.data()).amax() < 1e-15);
        assert!(b.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn noiseless_b_vanishes() {
        let mut cfg = scenario(2, 1, DiffusionMode::Scalar);
        cfg.sigma_v = vec![0.0; 2];
        let (gm, _) = GlobalModel::from_scenario(&cfg).unwrap();
        assert!(noise_vector(&gm, TheoryMode::Scalar).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn omega_examples() {
        let o = build_omega(1.0, 1, 3);
        assert_relative_eq!(o.diagonal[0], 0.797_884_560_802_865_4, epsilon = 1e-15);
        let o = build_omega(2.0 / std::f64::consts::PI, 1, 1);
        assert_relative_eq!(o.diagonal[0], 1.0, epsilon = 1e-15);
        let a = build_omega(0.25, 3, 1).diagonal[0];
        let b = build_omega(1.0, 3, 1).diagonal[0];
        assert_relative_eq!(a, 2.0 * b, epsilon = 1e-15);
        let o = build_omega(0.0, 1, 1);
        assert!(o.clamped && o.diagonal[0].is_finite());
    }

    #[test]
    fn singlebit_b_lower_entry() {
        let mut cfg = scenario(1, 1, DiffusionMode::SingleBit);
        cfg.eta = vec![0.3];
        cfg.sigma_c = vec![2.0];
        let (gm, _) = GlobalModel::from_scenario(&cfg).unwrap();
        let b = noise_vector(&gm, TheoryMode::SingleBit);
        assert_relative_eq!(b[3], 0.09 * 4.0, epsilon = 1e-15);
        assert_eq!((b[1], b[2]), (0.0, 0.0));

        // lifting through the selectors gives the same vectors
        let sel = selection_and_mask(1, 1).unwrap();
        let up = block_kron(&sel.upper_selector, &sel.upper_selector).unwrap();
        let lo = block_kron(&sel.lower_selector, &sel.lower_selector).unwrap();
        let b1 = gm.var_v[0] * gm.mu[0] * gm.mu[0] * gm.var_u[0];
        let lifted = up.data() * DVector::from_element(1, b1) + lo.data() * DVector::from_element(1, 0.36);
        assert!((lifted - b).amax() < 1e-15);

        cfg.eta = vec![1e-300];
        let (gm, _) = GlobalModel::from_scenario(&cfg).unwrap();
        assert!(noise_vector(&gm, TheoryMode::SingleBit)[3] < 1e-300);
    }

    #[test]
    fn mask_diagonal_matches_selection_construction() {
        for (n, m) in [(1, 1), (2, 2), (3, 1)] {
            let k = selection_and_mask(m, n).unwrap().mask_diagonal();
            assert_eq!(k, mask_diagonal(n, m));
        }
    }

    #[test]
    fn drift_vector_scalar_case() {
        let cfg = scenario(1, 1, DiffusionMode::Scalar);
        let (gm, _) = GlobalModel::from_scenario(&cfg).unwrap();
        assert_eq!(drift_vector(&gm, 0.04).as_slice(), &[0.04; 4]);
    }

    #[test]
    fn eps_weighting_is_bvec_of_block_pattern() {
        let cfg = scenario(2, 2, DiffusionMode::SingleBit);
        let (gm, _) = GlobalModel::from_scenario(&cfg).unwrap();
        let lc = DMatrix::from_diagonal(&DVector::from_vec(repeat(&gm.var_c, 2)));
        let mut s = DMatrix::zeros(8, 8);
        s.view_mut((0, 0), (4, 4)).copy_from(&lc);
        s.view_mut((4, 4), (4, 4)).copy_from(&lc);
        s.view_mut((0, 4), (4, 4)).copy_from(&(-&lc));
        s.view_mut((4, 0), (4, 4)).copy_from(&(-&lc));
        let expect = bvec(&BlockMatrix::new(s, 2).unwrap()).unwrap();
        assert_eq!(eps_weighting(&gm, None), expect);
        let split = eps_weighting(&gm, Some(0)) + eps_weighting(&gm, Some(1));
        assert_eq!(split, expect);
    }

    #[test]
    fn transient_zero_everything() {
        let mut cfg = scenario(2, 1, DiffusionMode::Scalar);
        cfg.w_o = vec![0.0];
        cfg.zeta = 0.0;
        cfg.sigma_v = vec![0.0; 2];
        let (gm, mode) = GlobalModel::from_scenario(&cfg).unwrap();
        let sigma = DVector::from_element(16, 1.0);
        let out = iterate_transient(&gm, mode, &[sigma], 20).unwrap();
        assert!(out.values[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn one_step_matches_direct_evaluation() {
        let cfg = scenario(2, 2, DiffusionMode::Scalar);
        let (gm, mode) = GlobalModel::from_scenario(&cfg).unwrap();
        let (f, b) = build_f_scalar(&gm).unwrap();
        let sigma = DVector::from_fn(64, |k, _| (k % 5) as f64 * 0.1);
        let out = iterate_transient(&gm, mode, std::slice::from_ref(&sigma), 2).unwrap();
        let w0 = gm.initial_moment();
        let direct = w0.dot(&(&f * &sigma)) + b.dot(&sigma);
        assert_relative_eq!(out.values[0][1], direct, max_relative = 1e-12);
    }

    #[test]
    fn product_form_matches_forward_recursion() {
        for mode in [DiffusionMode::Scalar, DiffusionMode::SingleBit] {
            for omega in [OmegaMode::Pooled, OmegaMode::PerNode] {
                let mut cfg = scenario(2, 1, mode);
                if mode == DiffusionMode::SingleBit {
                    cfg.eta = vec![0.002; 2];
                }
                cfg.omega = omega;
                cfg.tracking_q = 0.01;
                let (gm, tm) = GlobalModel::from_scenario(&cfg).unwrap();
                let targets = [
                    DVector::from_fn(16, |k, _| if k == 0 || k == 5 { 0.5 } else { 0.0 }),
                    eps_weighting(&gm, None),
                ];
                let fwd = iterate_transient(&gm, tm, &targets, 60).unwrap();
                let prod = iterate_transient_products(&gm, tm, &targets, 60).unwrap();
                for (a, b) in fwd.values.iter().zip(&prod.values) {
                    for (x, y) in a.iter().zip(b) {
                        assert_relative_eq!(x, y, max_relative = 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn moments_stay_symmetric_psd() {
        let cfg = scenario(2, 2, DiffusionMode::SingleBit);
        let (gm, mode) = GlobalModel::from_scenario(&cfg).unwrap();
        let op = EnergyOperator::new(&gm, mode).unwrap();
        let tracker = OmegaTracker::new(&gm, mode);
        let b = noise_vector(&gm, mode);
        let mut w = gm.initial_moment();
        let mut next = DVector::zeros(op.len());
        let mut scratch = op.scratch();
        for _ in 0..300 {
            let s = tracker.read(w.as_slice());
            let weights = op.weights(tracker.omega(&s).as_ref());
            op.apply_transpose(&weights, w.as_slice(), next.as_mut_slice(), &mut scratch);
            next += &b;
            std::mem::swap(&mut w, &mut next);
            let s = crate::blockalg::bvec_inverse(&w, 2, 4).unwrap().into_inner();
            assert!((&s - s.transpose()).amax() < 1e-9 * s.amax().max(1.0));
            let min = s.symmetric_eigenvalues().min();
            assert!(min > -1e-9 * s.amax().max(1.0), "min eigenvalue {min}");
        }
    }

    #[test]
    fn steady_state_is_the_transient_limit() {
        for mode in [DiffusionMode::Scalar, DiffusionMode::SingleBit] {
            let cfg = scenario(2, 2, mode);
            let (gm, tm) = GlobalModel::from_scenario(&cfg).unwrap();
            let sigma = eps_weighting(&gm, None);
            let msd = bvec_scaled_identities(4, 2, |i, j| if i == j && i < 2 { 0.5 } else { 0.0 });
            let targets = [msd, sigma];
            let ss = steady_state(&gm, tm, &targets).unwrap();
            assert!(ss.spectral_radius < 1.0);
            let tr = iterate_transient(&gm, tm, &targets, 20_000).unwrap();
            for (curve, v) in tr.values.iter().zip(&ss.values) {
                assert_relative_eq!(*curve.last().unwrap(), *v, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn zero_drive_zero_steady_state() {
        let mut cfg = scenario(2, 1, DiffusionMode::Scalar);
        cfg.sigma_v = vec![0.0; 2];
        let (gm, tm) = GlobalModel::from_scenario(&cfg).unwrap();
        let ss = steady_state(&gm, tm, &[DVector::from_element(16, 1.0)]).unwrap();
        assert_eq!(ss.values[0], 0.0);
    }

    #[test]
    fn tracking_is_affine_in_q2() {
        let cfg = scenario(2, 1, DiffusionMode::Scalar);
        let (gm, tm) = GlobalModel::from_scenario(&cfg).unwrap();
        let sigma = [DVector::from_fn(16, |k, _| if k == 0 || k == 5 { 0.5 } else { 0.0 })];
        let base = steady_state(&gm, tm, &sigma).unwrap().values[0];
        assert_eq!(tracking_steady_state(&gm, tm, &sigma, 0.0).unwrap().values[0], base);
        let unit = tracking_steady_state(&gm, tm, &sigma, 1.0).unwrap().values[0] - base;
        let v = tracking_steady_state(&gm, tm, &sigma, 1e-3).unwrap().values[0];
        assert_relative_eq!(v - base, 1e-3 * unit, max_relative = 1e-8);
    }

    #[test]
    fn unstable_step_reports_radius() {
        let mut cfg = scenario(2, 1, DiffusionMode::Scalar);
        cfg.mu = vec![1.5; 2];
        let (gm, tm) = GlobalModel::from_scenario(&cfg).unwrap();
        match steady_state(&gm, tm, &[DVector::from_element(16, 1.0)]) {
            Err(Error::Instability { radius }) => assert!(radius >= 1.0),
            other => panic!("expected instability, got {other:?}"),
        }
    }

    #[test]
    fn zero_step_is_marginally_stable() {
        let mut cfg = scenario(2, 1, DiffusionMode::Scalar);
        cfg.mu = vec![0.0; 2];
        let (gm, tm) = GlobalModel::from_scenario(&cfg).unwrap();
        match steady_state(&gm, tm, &[DVector::from_element(16, 1.0)]) {
            Err(Error::Instability { radius }) => assert!(radius >= 1.0),
            other => panic!("expected instability, got {other:?}"),
        }
    }

    #[test]
    fn no_cooperation_matches_isolated_lms() {
        let (n, m) = (3, 2);
        let mut cfg = scenario(n, m, DiffusionMode::None);
        cfg.eta = vec![1.0; n];
        cfg.mu = vec![0.02, 0.05, 0.03];
        cfg.sigma_u = vec![0.8, 1.1, 1.4];
        cfg.sigma_v = vec![0.1, 0.2, 0.3];
        let (gm, tm) = GlobalModel::from_scenario(&cfg).unwrap();
        let diag = DVector::from_fn(2 * n * m, |k, _| if k < n * m { 1.0 / n as f64 } else { 0.0 });
        let sigma = bvec(&BlockMatrix::from_diagonal(&diag, m).unwrap()).unwrap();
        let ss = steady_state(&gm, tm, &[sigma]).unwrap();
        let mf = m as f64;
        let expect = (0..n)
            .map(|i| {
                let (mu, su2, sv2) = (cfg.mu[i], cfg.sigma_u[i].powi(2), cfg.sigma_v[i].powi(2));
                mu * sv2 * mf / (2.0 - (mf + 2.0) * mu * su2)
            })
            .sum::<f64>()
            / n as f64;
        assert_relative_eq!(ss.values[0], expect, max_relative = 1e-9);
    }

    #[test]
    fn unsupported_scenarios() {
        let mut cfg = scenario(2, 1, DiffusionMode::Scalar);
        cfg.confidence = Confidence::Adaptive { mu_cvx: 1.0 };
        assert!(matches!(theory_mode(&cfg), Err(Error::Unsupported(_))));
        let cfg = scenario(2, 1, DiffusionMode::Full);
        assert!(matches!(theory_mode(&cfg), Err(Error::Unsupported(_))));
        let cfg = scenario(5, 7, DiffusionMode::Scalar);
        assert!(matches!(theory_mode(&cfg), Err(Error::Unsupported(_))));
    }

    #[test]
    fn classical_lms_reduction() {
        let mut cfg = scenario(1, 1, DiffusionMode::Scalar);
        let (mu, su2, sv2): (f64, f64, f64) = (0.03, 1.7, 0.04);
        cfg.mu = vec![mu];
        cfg.sigma_u = vec![su2.sqrt()];
        cfg.sigma_v = vec![sv2.sqrt()];
        let (gm, tm) = GlobalModel::from_scenario(&cfg).unwrap();
        let (f, b) = build_f_scalar(&gm).unwrap();
        // phi_tilde^2 sits at bvec position 0 and evolves on its own
        assert_relative_eq!(f[(0, 0)], 1.0 - 2.0 * mu * su2 + 3.0 * mu * mu * su2 * su2, epsilon = 1e-14);
        assert_relative_eq!(b[0], mu * mu * su2 * sv2, epsilon = 1e-16);
        for k in 1..4 {
            assert_eq!(f[(k, 0)], 0.0);
        }
        let sigma = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        let ss = steady_state(&gm, tm, &[sigma]).unwrap();
        assert_relative_eq!(ss.values[0], mu * sv2 / (2.0 - 3.0 * mu * su2), max_relative = 1e-10);
    }

    #[test]
    fn sign_linearization_small_sample() {
        let (mc, pred) = sign_correlation_check(&[0.4, -1.0], 2.0, 200_000, 9);
        for (a, b) in mc.iter().zip(&pred) {
            assert_relative_eq!(a, b, max_relative = 0.03);
        }
    }

}

//! Performance measures: weightings for the theory engine, the matching
//! simulation series, and dB helpers.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::blockalg::{bvec, BlockMatrix};
use crate::error::{Error, Result};
use crate::simulator::{DiffusionMode, EnsembleResult, Strategy};
use crate::theory::GlobalModel;

/// Floor used for nonpositive values on the dB scale.
pub const DB_FLOOR: f64 = -300.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Measure {
    #[serde(rename = "MSD_phi")]
    MsdPhi,
    #[serde(rename = "EMSE_phi")]
    EmsePhi,
    #[serde(rename = "MSD_w_ATC")]
    MsdWAtc,
    #[serde(rename = "EMSE_w_ATC")]
    EmseWAtc,
    #[serde(rename = "MSD_construction")]
    MsdConstruction,
    #[serde(rename = "EPS_variance")]
    EpsVariance,
}

impl Measure {
    pub const ALL: [Measure; 6] = [
        Measure::MsdPhi,
        Measure::EmsePhi,
        Measure::MsdWAtc,
        Measure::EmseWAtc,
        Measure::MsdConstruction,
        Measure::EpsVariance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Measure::MsdPhi => "MSD_phi",
            Measure::EmsePhi => "EMSE_phi",
            Measure::MsdWAtc => "MSD_w_ATC",
            Measure::EmseWAtc => "EMSE_w_ATC",
            Measure::MsdConstruction => "MSD_construction",
            Measure::EpsVariance => "EPS_variance",
        }
    }

    /// Measures reported for a diffusion mode.
    pub fn for_mode(mode: DiffusionMode) -> &'static [Measure] {
        match mode {
            DiffusionMode::SingleBit => &Measure::ALL,
            DiffusionMode::Scalar => &Measure::ALL[..5],
            DiffusionMode::Full | DiffusionMode::None => &Measure::ALL[..4],
        }
    }

    /// The network MSD as the strategy reports it: ATC publishes the
    /// combined estimate, CTA the adapted one.
    pub fn network_msd(strategy: Strategy) -> Measure {
        match strategy {
            Strategy::Atc => Measure::MsdWAtc,
            Strategy::Cta => Measure::MsdPhi,
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Measure::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Domain(format!("unknown measure `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Theory,
    Simulation,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Theory => "theory",
            Source::Simulation => "simulation",
        }
    }
}

/// A weighting `Sigma` on the stacked deviation and `E||psi_0||^2_Sigma`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightingSpec {
    pub measure: Measure,
    pub sigma: BlockMatrix,
    pub initial_value: f64,
}

impl WeightingSpec {
    /// `bvec(Sigma)`, the form the moment recursion consumes.
    pub fn target(&self) -> DVector<f64> {
        bvec(&self.sigma).expect("square block matrix")
    }
}

/// Builds `Sigma` for a measure. The initial value uses the model's
/// `psi_0 = col{w_bar, w_bar - zeta 1}`.
pub fn weighting_for(measure: Measure, gm: &GlobalModel) -> Result<WeightingSpec> {
    let n = gm.nodes;
    let m = gm.block_size;
    let mn = n * m;
    let inv_n = 1.0 / n as f64;
    let lu = DMatrix::from_diagonal(&DVector::from_iterator(
        mn,
        gm.var_u.iter().flat_map(|&v| std::iter::repeat_n(v, m)),
    ));
    let lc = DMatrix::from_diagonal(&DVector::from_iterator(
        mn,
        gm.var_c.iter().flat_map(|&v| std::iter::repeat_n(v, m)),
    ));
    let eye = DMatrix::<f64>::identity(mn, mn);

    let mut sigma = DMatrix::zeros(2 * mn, 2 * mn);
    let mut set = |r: usize, c: usize, block: DMatrix<f64>| {
        sigma.view_mut((r * mn, c * mn), (mn, mn)).copy_from(&block);
    };
    // w_tilde = G_d phi_tilde + G_c a_tilde
    let combined = |inner: &DMatrix<f64>| {
        let (gd, gc) = (&gm.g_d, &gm.g_c);
        [
            gd.transpose() * inner * gd,
            gd.transpose() * inner * gc,
            gc.transpose() * inner * gd,
            gc.transpose() * inner * gc,
        ]
    };
    match measure {
        Measure::MsdPhi => set(0, 0, &eye * inv_n),
        Measure::EmsePhi => set(0, 0, &lu * inv_n),
        Measure::MsdWAtc | Measure::EmseWAtc => {
            let inner = if measure == Measure::MsdWAtc { &eye } else { &lu };
            let [a, b, c, d] = combined(inner);
            set(0, 0, a * inv_n);
            set(0, 1, b * inv_n);
            set(1, 0, c * inv_n);
            set(1, 1, d * inv_n);
        }
        Measure::MsdConstruction => set(1, 1, &eye * inv_n),
        Measure::EpsVariance => {
            set(0, 0, lc.clone());
            set(0, 1, -&lc);
            set(1, 0, -&lc);
            set(1, 1, lc);
        }
    }
    let initial_value = gm.psi0.dot(&(&sigma * &gm.psi0));
    Ok(WeightingSpec {
        measure,
        sigma: BlockMatrix::new(sigma, m)?,
        initial_value,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerformanceCurve {
    pub measure: Measure,
    pub source: Source,
    pub values: Vec<f64>,
}

impl PerformanceCurve {
    pub fn decibels(&self) -> Decibels {
        to_decibels(&self.values)
    }

    pub fn tail_average(&self) -> f64 {
        tail_average(&self.values, TAIL_FRACTION)
    }
}

/// Pulls one measure out of an ensemble result.
pub fn msd_curve_from_ensemble(result: &EnsembleResult, measure: Measure) -> Result<PerformanceCurve> {
    if !Measure::for_mode(result.mode).contains(&measure) {
        return Err(Error::Domain(format!(
            "{measure} is not recorded for {:?} diffusion",
            result.mode
        )));
    }
    let values = match measure {
        Measure::MsdPhi => &result.msd_adapted,
        Measure::EmsePhi => &result.emse_adapted,
        Measure::MsdWAtc => &result.msd_combined,
        Measure::EmseWAtc => &result.emse_combined,
        Measure::MsdConstruction => &result.msd_construction,
        Measure::EpsVariance => &result.eps_variance,
    };
    Ok(PerformanceCurve {
        measure,
        source: Source::Simulation,
        values: values.clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decibels {
    pub values: Vec<f64>,
    /// Set when some value was nonpositive and mapped to [`DB_FLOOR`].
    pub floor_clamped: bool,
}

pub fn db(x: f64) -> f64 {
    if x > 0.0 {
        10.0 * x.log10()
    } else {
        DB_FLOOR
    }
}

pub fn from_db(x: f64) -> f64 {
    10f64.powf(x / 10.0)
}

pub fn to_decibels(values: &[f64]) -> Decibels {
    Decibels {
        values: values.iter().map(|&x| db(x)).collect(),
        floor_clamped: values.iter().any(|&x| !(x > 0.0)),
    }
}

/// Share of the final iterations used for steady-state averages.
pub const TAIL_FRACTION: f64 = 0.1;

/// Mean of the last `fraction` of `values` (at least one sample).
pub fn tail_average(values: &[f64], fraction: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let k = ((values.len() as f64 * fraction).ceil() as usize).clamp(1, values.len());
    values[values.len() - k..].iter().sum::<f64>() / k as f64
}

/// `max_t |db(a_t) - db(b_t)|` over `t >= from`.
pub fn max_db_gap(a: &[f64], b: &[f64], from: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "curves have {} and {} points",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .skip(from)
        .map(|(&x, &y)| (db(x) - db(y)).abs())
        .fold(0.0, f64::max))
}

/// `|db(tail(a)) - db(tail(b))|` with the default tail fraction.
pub fn steady_state_db_gap(a: &[f64], b: &[f64]) -> f64 {
    (db(tail_average(a, TAIL_FRACTION)) - db(tail_average(b, TAIL_FRACTION))).abs()
}

//! BB84 link estimation: QBER and secret key rate from route loss and
//! in-band noise, plus noisy observation sampling for the monitoring loop.
//!
//! The key rate is phenomenological. A fitted loss exponent scales the
//! reference rate, and the binary-entropy factor accounts for error
//! correction and privacy amplification at the estimated QBER. A QBER at or
//! above the abort threshold, or a budget beyond the device limit, yields
//! exactly zero.

mod calibrate;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{
    coexistence_noise_from_geometry, ChannelError, ChannelPlan, FilterSpec, FwmParams, PathGeometry,
    RamanParams,
};
use crate::topology::{Route, Topology, TopologyError};

pub use calibrate::{
    calibrate, fit_device, read_table3, Anchor, AnchorOutcome, AnchorSet, CalibrationBounds,
    CalibrationError, CalibrationReport, Expectation, FieldTrial, Network, RowFit, Table3Row,
};

pub const QBER_ABORT_THRESHOLD_PCT: f64 = 6.0;
pub const MAX_BUDGET_DB: f64 = 10.0;
/// Back-to-back budget, the reference point of the key-rate model.
pub const REFERENCE_LOSS_DB: f64 = 4.99;
pub const DEFAULT_EC_EFFICIENCY: f64 = 1.16;
pub const DEFAULT_JITTER_REL: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QkdDeviceParams {
    /// Intrinsic optical error, %.
    pub base_qber_pct: f64,
    /// QBER growth per unit of linear loss (dark counts over signal), %.
    pub qber_loss_coeff: f64,
    /// Key rate at the reference budget, bps.
    pub skr_ref_bps: f64,
    pub skr_ref_loss_db: f64,
    pub skr_loss_exponent: f64,
    /// QBER per noise photon per second, referenced at the Alice-side tap, %.
    pub noise_qber_coeff: f64,
    pub qber_abort_threshold_pct: f64,
    pub max_budget_db: f64,
    pub ec_efficiency: f64,
}

impl QkdDeviceParams {
    fn entropy_factor(&self, qber_pct: f64) -> f64 {
        (1.0 - (1.0 + self.ec_efficiency) * binary_entropy(qber_pct / 100.0)).max(0.0)
    }

    /// QBER at the reference budget without coexistence.
    fn reference_qber_pct(&self) -> f64 {
        self.base_qber_pct + self.qber_loss_coeff * linear(self.skr_ref_loss_db)
    }
}

fn linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Shannon entropy of a Bernoulli variable, in bits.
pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
}

/// QBER in percent for a route budget and a detector-side noise rate.
///
/// `after_tap_loss_db` is the quantum-channel loss shared with the noise,
/// from the Alice-side tap to the detector.
pub fn qber_estimate(
    route_loss_db: f64,
    after_tap_loss_db: f64,
    noise_rate: f64,
    params: &QkdDeviceParams,
) -> f64 {
    let loss_term = params.qber_loss_coeff * linear(route_loss_db);
    let noise_term = if noise_rate > 0.0 {
        params.noise_qber_coeff * noise_rate * linear(after_tap_loss_db)
    } else {
        0.0
    };
    let q = params.base_qber_pct + loss_term + noise_term;
    if q.is_nan() {
        return 50.0;
    }
    q.clamp(0.0, 50.0)
}

/// Secret key rate in bps; exactly zero past the QBER threshold or the
/// device power budget.
pub fn skr_estimate(route_loss_db: f64, qber_pct: f64, params: &QkdDeviceParams) -> f64 {
    if qber_pct >= params.qber_abort_threshold_pct
        || !(route_loss_db <= params.max_budget_db)
    {
        return 0.0;
    }
    skr_unchecked(route_loss_db, qber_pct, params)
}

fn skr_unchecked(route_loss_db: f64, qber_pct: f64, params: &QkdDeviceParams) -> f64 {
    let normalizer = params.entropy_factor(params.reference_qber_pct());
    if normalizer <= 0.0 {
        return 0.0;
    }
    let attenuation = 10f64.powf(-params.skr_loss_exponent * (route_loss_db - params.skr_ref_loss_db) / 10.0);
    params.skr_ref_bps * attenuation * params.entropy_factor(qber_pct) / normalizer
}

/// Everything the model knows after calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibratedParams {
    pub device: QkdDeviceParams,
    pub raman: RamanParams,
    pub fwm: FwmParams,
    /// Bob receiver filter used by the laboratory links.
    pub receiver_filter: FilterSpec,
    /// Tunable filter used for the field-trial bandwidth sweeps.
    pub field_filter: FilterSpec,
    pub field_launch_power_dbm: f64,
    pub field_channels_thz: Vec<f64>,
    pub report: CalibrationReport,
}

impl CalibratedParams {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QkdLinkEstimate {
    pub route_loss_db: f64,
    pub qber_pct: f64,
    pub skr_bps: f64,
    /// Signal clicks per second at the detector.
    pub signal_rate: f64,
    /// Dark-count equivalent clicks per second.
    pub dark_rate: f64,
    /// Noise photons per second at the detector.
    pub noise_rate: f64,
    pub fwm_collision: bool,
    pub aborted: bool,
}

#[derive(Debug, Error)]
pub enum QkdError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

pub fn estimate_from_geometry(
    geometry: &PathGeometry,
    plan: &ChannelPlan,
    filter: &FilterSpec,
    raman: &RamanParams,
    fwm: &FwmParams,
    device: &QkdDeviceParams,
) -> Result<QkdLinkEstimate, QkdError> {
    let noise = coexistence_noise_from_geometry(geometry, plan, filter, raman, fwm)?;
    let loss = geometry.route_loss_db();
    let after_tap = geometry.after_tap_loss_db();
    let qber_pct = qber_estimate(loss, after_tap, noise.total(), device);
    let skr_bps = skr_estimate(loss, qber_pct, device);
    let aborted = qber_pct >= device.qber_abort_threshold_pct || !(loss <= device.max_budget_db);

    let (signal_rate, dark_rate) = if device.noise_qber_coeff > 0.0 {
        // noise_qber_coeff = 50 % / signal photons per second at the tap
        let signal_at_tap = 50.0 / device.noise_qber_coeff;
        let signal = signal_at_tap * linear(-after_tap);
        let dark = device.qber_loss_coeff * linear(loss) * signal / 50.0;
        (signal, dark)
    } else {
        (0.0, 0.0)
    };

    Ok(QkdLinkEstimate {
        route_loss_db: loss,
        qber_pct,
        skr_bps,
        signal_rate,
        dark_rate,
        noise_rate: noise.total(),
        fwm_collision: noise.fwm_collision,
        aborted,
    })
}

/// Chains route loss, coexistence noise, QBER and key rate for one link.
pub fn estimate_link(
    topology: &Topology,
    route: &Route,
    plan: &ChannelPlan,
    filter: &FilterSpec,
    calibrated: &CalibratedParams,
) -> Result<QkdLinkEstimate, QkdError> {
    let geometry = PathGeometry::new(topology, route)?;
    estimate_from_geometry(
        &geometry,
        plan,
        filter,
        &calibrated.raman,
        &calibrated.fwm,
        &calibrated.device,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub qber_pct: f64,
    pub skr_bps: f64,
}

/// Applies multiplicative Gaussian jitter of relative width `sigma_rel` to
/// both figures. Two normal draws are consumed on every call.
pub fn sample_observation<R: Rng + ?Sized>(
    estimate: &QkdLinkEstimate,
    sigma_rel: f64,
    threshold_pct: f64,
    rng: &mut R,
) -> Observation {
    let zq: f64 = StandardNormal.sample(rng);
    let zs: f64 = StandardNormal.sample(rng);
    let qber_pct = (estimate.qber_pct * (1.0 + sigma_rel * zq)).clamp(0.0, 50.0);
    if estimate.aborted {
        return Observation {
            qber_pct: qber_pct.max(threshold_pct),
            skr_bps: 0.0,
        };
    }
    let mut skr_bps = (estimate.skr_bps * (1.0 + sigma_rel * zs)).max(0.0);
    if qber_pct >= threshold_pct {
        skr_bps = 0.0;
    }
    Observation { qber_pct, skr_bps }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> QkdDeviceParams {
        QkdDeviceParams {
            base_qber_pct: 0.0,
            qber_loss_coeff: 0.375,
            skr_ref_bps: 2300.0,
            skr_ref_loss_db: REFERENCE_LOSS_DB,
            skr_loss_exponent: 1.25,
            noise_qber_coeff: 1e-6,
            qber_abort_threshold_pct: QBER_ABORT_THRESHOLD_PCT,
            max_budget_db: MAX_BUDGET_DB,
            ec_efficiency: DEFAULT_EC_EFFICIENCY,
        }
    }

    #[test]
    fn entropy_endpoints_are_exact() {
        assert_eq!(binary_entropy(0.0), 0.0);
        assert_eq!(binary_entropy(0.5), 1.0);
        assert_eq!(binary_entropy(1.0), 0.0);
    }

    #[test]
    fn intrinsic_error_limit() {
        let p = QkdDeviceParams {
            base_qber_pct: 0.8,
            qber_loss_coeff: 0.0,
            ..params()
        };
        assert_eq!(qber_estimate(0.0, 0.0, 0.0, &p), 0.8);
    }

    #[test]
    fn infinite_noise_saturates() {
        assert_eq!(qber_estimate(5.0, 4.0, f64::INFINITY, &params()), 50.0);
        let silent = QkdDeviceParams {
            noise_qber_coeff: 0.0,
            ..params()
        };
        assert_eq!(qber_estimate(5.0, 4.0, f64::INFINITY, &silent), 50.0);
    }

    #[test]
    fn hard_abort() {
        let p = params();
        assert_eq!(skr_estimate(5.0, 6.5, &p), 0.0);
        assert_eq!(skr_estimate(5.0, 6.0, &p), 0.0);
        assert!(skr_estimate(5.0, 5.999, &p) > 0.0);
        assert_eq!(skr_estimate(f64::INFINITY, 1.0, &p), 0.0);
        assert_eq!(skr_estimate(10.01, 1.0, &p), 0.0);
    }

    #[test]
    fn reference_rate_at_reference_point() {
        let p = params();
        let q = qber_estimate(REFERENCE_LOSS_DB, 0.0, 0.0, &p);
        assert!((skr_estimate(REFERENCE_LOSS_DB, q, &p) - p.skr_ref_bps).abs() < 1e-9);
    }

    #[test]
    fn zero_jitter_returns_the_estimate() {
        let est = QkdLinkEstimate {
            route_loss_db: 5.19,
            qber_pct: 1.31,
            skr_bps: 1762.06,
            signal_rate: 0.0,
            dark_rate: 0.0,
            noise_rate: 0.0,
            fwm_collision: false,
            aborted: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs = sample_observation(&est, 0.0, 6.0, &mut rng);
        assert_eq!(obs, Observation { qber_pct: 1.31, skr_bps: 1762.06 });
    }

    #[test]
    fn aborted_estimates_sample_to_abort() {
        let est = QkdLinkEstimate {
            route_loss_db: 5.19,
            qber_pct: 7.0,
            skr_bps: 0.0,
            signal_rate: 0.0,
            dark_rate: 0.0,
            noise_rate: 0.0,
            fwm_collision: false,
            aborted: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let obs = sample_observation(&est, 0.3, 6.0, &mut rng);
            assert!(obs.qber_pct >= 6.0);
            assert_eq!(obs.skr_bps, 0.0);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let est = QkdLinkEstimate {
            route_loss_db: 7.0,
            qber_pct: 1.9,
            skr_bps: 900.0,
            signal_rate: 0.0,
            dark_rate: 0.0,
            noise_rate: 0.0,
            fwm_collision: false,
            aborted: false,
        };
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5)
                .map(|_| sample_observation(&est, 0.05, 6.0, &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }
}

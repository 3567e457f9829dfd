//! Quantum–classical coexistence physics: photon bookkeeping, effective
//! length, Raman and four-wave-mixing noise in the receiver band, classical
//! leakage through the receiver filter and classical reachability.
//!
//! Classical launch powers are referenced at the Alice-side tap where the
//! classical comb joins the quantum channel. From there both share every
//! cross-connection and span up to the Bob terminal.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{PathElement, Route, Topology, TopologyError};

pub const PLANCK_J_S: f64 = 6.626_070_15e-34;
pub const SPEED_OF_LIGHT_M_S: f64 = 299_792_458.0;

/// DV-QKD channel, 1551.7 nm.
pub const QUANTUM_FREQ_THZ: f64 = 193.20;
/// Table frequencies of the four classical transponder channels.
pub const CLASSICAL_GRID_THZ: [f64; 4] = [193.35, 193.40, 193.45, 193.50];
pub const GRID_ANCHOR_THZ: f64 = 193.10;
pub const GRID_SPACING_GHZ: f64 = 50.0;
/// Half the grid spacing either side of the quantum channel.
pub const FWM_COLLISION_WINDOW_GHZ: f64 = 25.0;
pub const DETECTOR_SENSITIVITY_DBM: f64 = -35.0;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("model is not calibrated: {0} missing")]
    Uncalibrated(&'static str),
    #[error("invalid channel plan: {0}")]
    InvalidPlan(String),
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

pub fn thz_to_nm(freq_thz: f64) -> f64 {
    SPEED_OF_LIGHT_M_S / (freq_thz * 1e12) * 1e9
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn photon_energy_j(wavelength_nm: f64) -> f64 {
    PLANCK_J_S * SPEED_OF_LIGHT_M_S / (wavelength_nm * 1e-9)
}

/// Photon flux carried by an optical power.
pub fn photon_rate_from_power(power_dbm: f64, wavelength_nm: f64) -> f64 {
    assert!(wavelength_nm > 0.0, "wavelength must be positive");
    let watts = 10f64.powf((power_dbm - 30.0) / 10.0);
    watts / photon_energy_j(wavelength_nm)
}

/// Length over which nonlinear interactions accumulate in a lossy fibre.
pub fn effective_length(alpha_db_per_km: f64, length_km: f64) -> f64 {
    let alpha = alpha_db_per_km * std::f64::consts::LN_10 / 10.0;
    if alpha * length_km < 1e-15 {
        return length_km;
    }
    if length_km.is_infinite() {
        return 1.0 / alpha;
    }
    -(-alpha * length_km).exp_m1() / alpha
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassicalChannel {
    pub freq_thz: f64,
    pub launch_power_dbm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelPlan {
    #[serde(default = "default_quantum_freq")]
    pub quantum_freq_thz: f64,
    #[serde(default)]
    pub classical: Vec<ClassicalChannel>,
    #[serde(default = "default_grid_spacing")]
    pub grid_spacing_ghz: f64,
}

fn default_quantum_freq() -> f64 {
    QUANTUM_FREQ_THZ
}

fn default_grid_spacing() -> f64 {
    GRID_SPACING_GHZ
}

impl Default for ChannelPlan {
    fn default() -> Self {
        Self::quantum_only()
    }
}

impl ChannelPlan {
    pub fn quantum_only() -> Self {
        Self {
            quantum_freq_thz: QUANTUM_FREQ_THZ,
            classical: Vec::new(),
            grid_spacing_ghz: GRID_SPACING_GHZ,
        }
    }

    /// Every channel in `freqs_thz` launched at the same power.
    pub fn uniform(freqs_thz: &[f64], power_dbm: f64) -> Self {
        Self {
            classical: freqs_thz
                .iter()
                .map(|&freq_thz| ClassicalChannel {
                    freq_thz,
                    launch_power_dbm: power_dbm,
                })
                .collect(),
            ..Self::quantum_only()
        }
    }

    /// The first `n` grid channels, nearest the quantum channel first.
    pub fn grid(n: usize, power_dbm: f64) -> Self {
        Self::uniform(&CLASSICAL_GRID_THZ[..n.min(CLASSICAL_GRID_THZ.len())], power_dbm)
    }

    pub fn frequencies(&self) -> Vec<f64> {
        self.classical.iter().map(|c| c.freq_thz).collect()
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let mut all = vec![self.quantum_freq_thz];
        all.extend(self.frequencies());
        for (i, a) in all.iter().enumerate() {
            if !a.is_finite() || *a <= 0.0 {
                return Err(ChannelError::InvalidPlan(format!("bad frequency {a}")));
            }
            if all[..i].iter().any(|b| ((a - b) * 1e6).abs() < 1.0) {
                return Err(ChannelError::InvalidPlan(format!("duplicate frequency {a} THz")));
            }
            let slots = (a - GRID_ANCHOR_THZ) * 1e3 / self.grid_spacing_ghz;
            if (slots - slots.round()).abs() > 1e-6 {
                return Err(ChannelError::InvalidPlan(format!(
                    "{a} THz is off the {} GHz grid",
                    self.grid_spacing_ghz
                )));
            }
        }
        Ok(())
    }
}

/// Receiver band-pass filter in front of the single-photon detectors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub center_freq_thz: f64,
    pub bandwidth_ghz: f64,
    pub pass_loss_db: f64,
    pub rejection_db: f64,
}

impl FilterSpec {
    /// 100 GHz pass port centred on the quantum channel.
    pub fn receiver_default() -> Self {
        Self {
            center_freq_thz: QUANTUM_FREQ_THZ,
            bandwidth_ghz: 100.0,
            pass_loss_db: 0.5,
            rejection_db: 130.0,
        }
    }

    pub fn with_bandwidth(self, bandwidth_ghz: f64) -> Self {
        Self {
            bandwidth_ghz,
            ..self
        }
    }

    pub fn contains(&self, freq_thz: f64) -> bool {
        (freq_thz - self.center_freq_thz).abs() * 1e3 <= self.bandwidth_ghz / 2.0 + 1e-9
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(self.bandwidth_ghz > 0.0) {
            return Err(ChannelError::InvalidFilter("bandwidth must be positive".into()));
        }
        if !(self.rejection_db > 0.0) {
            return Err(ChannelError::InvalidFilter("rejection must be positive".into()));
        }
        Ok(())
    }
}

/// Spontaneous Raman scattering, flat over the receiver band.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RamanParams {
    /// Noise power per unit launch power, per km of effective length, per
    /// GHz of receiver bandwidth. `None` until calibrated.
    pub rho: Option<f64>,
    pub alpha_db_per_km: f64,
}

impl RamanParams {
    pub fn uncalibrated(alpha_db_per_km: f64) -> Self {
        Self {
            rho: None,
            alpha_db_per_km,
        }
    }

    fn rho(&self) -> Result<f64, ChannelError> {
        match self.rho {
            Some(r) if r.is_finite() && r >= 0.0 => Ok(r),
            _ => Err(ChannelError::Uncalibrated("raman rho")),
        }
    }
}

/// Four-wave-mixing noise from products that land on the quantum channel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FwmParams {
    /// Generated power per mW³ of pump product per km² of effective
    /// length, in mW. `None` until calibrated.
    pub coeff: Option<f64>,
}

impl FwmParams {
    fn coeff(&self) -> Result<f64, ChannelError> {
        match self.coeff {
            Some(c) if c.is_finite() && c >= 0.0 => Ok(c),
            _ => Err(ChannelError::Uncalibrated("fwm coefficient")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FwmProduct {
    pub freq_thz: f64,
    /// Every ordered `(i, j, k)` index triple with `f_i + f_j - f_k` here.
    pub triples: Vec<[usize; 3]>,
    pub quantum_collision: bool,
}

fn freq_key(f: f64) -> i64 {
    // 1 MHz resolution
    (f * 1e6).round() as i64
}

/// All `f_i + f_j - f_k` products over ordered index triples, deduplicated
/// and sorted by frequency. Products within the collision window of the
/// quantum channel are flagged.
pub fn fwm_products(freqs_thz: &[f64], quantum_freq_thz: f64) -> Vec<FwmProduct> {
    let mut by_freq: BTreeMap<i64, Vec<[usize; 3]>> = BTreeMap::new();
    let n = freqs_thz.len();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let f = freqs_thz[i] + freqs_thz[j] - freqs_thz[k];
                by_freq.entry(freq_key(f)).or_default().push([i, j, k]);
            }
        }
    }
    by_freq
        .into_iter()
        .map(|(key, triples)| {
            let freq_thz = key as f64 * 1e-6;
            FwmProduct {
                freq_thz,
                quantum_collision: collides(freq_thz, quantum_freq_thz),
                triples,
            }
        })
        .collect()
}

fn collides(freq_thz: f64, quantum_freq_thz: f64) -> bool {
    (freq_thz - quantum_freq_thz).abs() * 1e3 <= FWM_COLLISION_WINDOW_GHZ + 1e-6
}

/// Mixing terms that generate new light on the quantum channel: unordered
/// pump pair `{i, j}`, idler `k` distinct from both, with the degeneracy
/// weight `(D/3)^2` (1 when `i == j`, 4 otherwise).
pub fn colliding_mixing_terms(freqs_thz: &[f64], quantum_freq_thz: f64) -> Vec<([usize; 3], f64)> {
    let n = freqs_thz.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i..n {
            for k in 0..n {
                if k == i || k == j {
                    continue;
                }
                let f = freqs_thz[i] + freqs_thz[j] - freqs_thz[k];
                if collides(f, quantum_freq_thz) {
                    let weight = if i == j { 1.0 } else { 4.0 };
                    out.push(([i, j, k], weight));
                }
            }
        }
    }
    out
}

/// Loss bookkeeping along a route, split at the Alice-side tap.
#[derive(Clone, Debug, PartialEq)]
pub struct PathGeometry {
    pub tx_loss_db: f64,
    pub rx_loss_db: f64,
    /// Tap to Bob terminal input: every cross-connection and span.
    pub shared_loss_db: f64,
    pub segments: Vec<SpanSegment>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpanSegment {
    pub length_km: f64,
    pub loss_db: f64,
    /// From the tap to the span input.
    pub upstream_db: f64,
    /// From the span output to the Bob terminal input.
    pub downstream_db: f64,
}

impl PathGeometry {
    pub fn new(topology: &Topology, route: &Route) -> Result<Self, TopologyError> {
        let (src, dst) = route.endpoints();
        let elements = topology.path_elements(route)?;
        let shared_loss_db: f64 = elements.iter().map(PathElement::loss_db).sum();
        let mut upstream = 0.0;
        let mut segments = Vec::new();
        for el in &elements {
            if let PathElement::Span {
                loss_db, length_km, ..
            } = el
            {
                segments.push(SpanSegment {
                    length_km: *length_km,
                    loss_db: *loss_db,
                    upstream_db: upstream,
                    downstream_db: shared_loss_db - upstream - loss_db,
                });
            }
            upstream += el.loss_db();
        }
        Ok(Self {
            tx_loss_db: topology.node(src)?.tx_loss_db(),
            rx_loss_db: topology.node(dst)?.rx_loss_db(),
            shared_loss_db,
            segments,
        })
    }

    /// Quantum-channel loss from the tap to the detector.
    pub fn after_tap_loss_db(&self) -> f64 {
        self.shared_loss_db + self.rx_loss_db
    }

    pub fn route_loss_db(&self) -> f64 {
        self.tx_loss_db + self.after_tap_loss_db()
    }
}

/// Noise photon rates at the detector, by mechanism.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseBreakdown {
    pub raman: f64,
    pub fwm: f64,
    pub leakage: f64,
    pub fwm_collision: bool,
}

impl NoiseBreakdown {
    pub fn total(&self) -> f64 {
        self.raman + self.fwm + self.leakage
    }
}

fn noise_photons(watts: f64, quantum_freq_thz: f64) -> f64 {
    watts / photon_energy_j(thz_to_nm(quantum_freq_thz))
}

pub fn raman_noise_from_geometry(
    geometry: &PathGeometry,
    plan: &ChannelPlan,
    filter: &FilterSpec,
    params: &RamanParams,
) -> Result<f64, ChannelError> {
    if plan.classical.is_empty() {
        return Ok(0.0);
    }
    let rho = params.rho()?;
    let mut watts = 0.0;
    for seg in &geometry.segments {
        let leff = effective_length(params.alpha_db_per_km, seg.length_km);
        let to_detector = db_to_linear(-(seg.downstream_db + geometry.rx_loss_db));
        for ch in &plan.classical {
            let pump_w = dbm_to_mw(ch.launch_power_dbm) * 1e-3 * db_to_linear(-seg.upstream_db);
            watts += pump_w * rho * leff * filter.bandwidth_ghz * to_detector;
        }
    }
    Ok(noise_photons(watts, plan.quantum_freq_thz))
}

/// Raman noise photons per second reaching the detector.
pub fn raman_noise_photon_rate(
    topology: &Topology,
    route: &Route,
    plan: &ChannelPlan,
    filter: &FilterSpec,
    params: &RamanParams,
) -> Result<f64, ChannelError> {
    raman_noise_from_geometry(&PathGeometry::new(topology, route)?, plan, filter, params)
}

pub fn fwm_noise_from_geometry(
    geometry: &PathGeometry,
    plan: &ChannelPlan,
    filter: &FilterSpec,
    raman: &RamanParams,
    params: &FwmParams,
) -> Result<f64, ChannelError> {
    let freqs = plan.frequencies();
    let terms = colliding_mixing_terms(&freqs, plan.quantum_freq_thz);
    if terms.is_empty() || !filter.contains(plan.quantum_freq_thz) {
        return Ok(0.0);
    }
    let coeff = params.coeff()?;
    let mut mw = 0.0;
    for seg in &geometry.segments {
        let leff = effective_length(raman.alpha_db_per_km, seg.length_km);
        let entry = db_to_linear(-seg.upstream_db);
        let to_detector = db_to_linear(-(seg.downstream_db + geometry.rx_loss_db));
        for ([i, j, k], weight) in &terms {
            let p = |n: usize| dbm_to_mw(plan.classical[n].launch_power_dbm) * entry;
            mw += coeff * weight * p(*i) * p(*j) * p(*k) * leff * leff * to_detector;
        }
    }
    Ok(noise_photons(mw * 1e-3, plan.quantum_freq_thz))
}

/// Classical light reaching the detector directly: channels inside the
/// filter pass band see only the terminal loss, the rest are suppressed by
/// the filter rejection instead of its pass loss.
pub fn leakage_from_geometry(geometry: &PathGeometry, plan: &ChannelPlan, filter: &FilterSpec) -> f64 {
    let watts: f64 = plan
        .classical
        .iter()
        .map(|ch| {
            let at_bob = dbm_to_mw(ch.launch_power_dbm) * 1e-3 * db_to_linear(-geometry.shared_loss_db);
            let filter_db = if filter.contains(ch.freq_thz) {
                geometry.rx_loss_db
            } else {
                (geometry.rx_loss_db - filter.pass_loss_db).max(0.0) + filter.rejection_db
            };
            at_bob * db_to_linear(-filter_db)
        })
        .sum();
    noise_photons(watts, plan.quantum_freq_thz)
}

pub fn coexistence_noise_from_geometry(
    geometry: &PathGeometry,
    plan: &ChannelPlan,
    filter: &FilterSpec,
    raman: &RamanParams,
    fwm: &FwmParams,
) -> Result<NoiseBreakdown, ChannelError> {
    let collision = !colliding_mixing_terms(&plan.frequencies(), plan.quantum_freq_thz).is_empty();
    Ok(NoiseBreakdown {
        raman: raman_noise_from_geometry(geometry, plan, filter, raman)?,
        fwm: fwm_noise_from_geometry(geometry, plan, filter, raman, fwm)?,
        leakage: leakage_from_geometry(geometry, plan, filter),
        fwm_collision: collision,
    })
}

/// All in-band noise at the detector for a route carrying `plan`.
pub fn coexistence_noise(
    topology: &Topology,
    route: &Route,
    plan: &ChannelPlan,
    filter: &FilterSpec,
    raman: &RamanParams,
    fwm: &FwmParams,
) -> Result<NoiseBreakdown, ChannelError> {
    coexistence_noise_from_geometry(&PathGeometry::new(topology, route)?, plan, filter, raman, fwm)
}

/// Classical receive chain after the filter rejection port.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassicalReceiver {
    pub demux_loss_db: f64,
    pub splitter_loss_db: f64,
    #[serde(default)]
    pub edfa_gain_db: Option<f64>,
}

impl Default for ClassicalReceiver {
    /// Rejection port, 1×4 splitter, no amplifier.
    fn default() -> Self {
        Self {
            demux_loss_db: 0.5,
            splitter_loss_db: 6.0,
            edfa_gain_db: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassicalCheck {
    pub freq_thz: f64,
    pub received_dbm: f64,
    pub feasible: bool,
}

pub fn check_received(
    freq_thz: f64,
    launch_dbm: f64,
    path_loss_db: f64,
    edfa_gain_db: Option<f64>,
    sensitivity_dbm: f64,
) -> ClassicalCheck {
    let received_dbm = launch_dbm - path_loss_db + edfa_gain_db.unwrap_or(0.0);
    ClassicalCheck {
        freq_thz,
        received_dbm,
        feasible: received_dbm >= sensitivity_dbm,
    }
}

/// Received power of each classical channel against the receiver sensitivity.
pub fn classical_feasibility(
    topology: &Topology,
    route: &Route,
    plan: &ChannelPlan,
    receiver: &ClassicalReceiver,
    sensitivity_dbm: f64,
) -> Result<Vec<ClassicalCheck>, ChannelError> {
    let geometry = PathGeometry::new(topology, route)?;
    let path = geometry.shared_loss_db + receiver.demux_loss_db + receiver.splitter_loss_db;
    Ok(plan
        .classical
        .iter()
        .map(|ch| check_received(ch.freq_thz, ch.launch_power_dbm, path, receiver.edfa_gain_db, sensitivity_dbm))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn raman(rho: f64) -> RamanParams {
        RamanParams {
            rho: Some(rho),
            alpha_db_per_km: 0.2,
        }
    }

    #[test]
    fn effective_length_values() {
        assert_eq!(effective_length(0.2, 0.0), 0.0);
        assert_eq!(effective_length(0.0, 7.5), 7.5);
        // closed form 10 / (0.2 ln 10) and a hand evaluation at 5 km
        assert!((effective_length(0.2, f64::INFINITY) - 21.7147).abs() < 1e-3);
        assert!((effective_length(0.2, 5.0) - 4.467).abs() < 1e-3);
    }

    #[test]
    fn photon_rates() {
        assert_eq!(photon_rate_from_power(f64::NEG_INFINITY, 1550.0), 0.0);
        let one_mw = photon_rate_from_power(0.0, 1550.0);
        assert!((one_mw / 7.80e15 - 1.0).abs() < 2e-3, "{one_mw}");
        let one_uw = photon_rate_from_power(-30.0, 1550.0);
        assert!((one_uw / 7.80e12 - 1.0).abs() < 2e-3);
        assert!((photon_energy_j(1550.0) - 1.2816e-19).abs() < 1e-22);
    }

    #[test]
    fn quantum_channel_wavelength() {
        assert!((thz_to_nm(QUANTUM_FREQ_THZ) - 1551.7).abs() < 0.05);
    }

    #[test]
    fn fwm_two_tone_hits_the_quantum_channel() {
        let products = fwm_products(&[193.35, 193.50], QUANTUM_FREQ_THZ);
        let hit = products
            .iter()
            .find(|p| (p.freq_thz - 193.20).abs() < 1e-9)
            .expect("2f1 - f2 product");
        assert!(hit.quantum_collision);
        assert!(hit.triples.contains(&[0, 0, 1]));
    }

    #[test]
    fn fwm_single_repeated_frequency() {
        let products = fwm_products(&[193.40, 193.40], QUANTUM_FREQ_THZ);
        assert_eq!(products.len(), 1);
        assert!((products[0].freq_thz - 193.40).abs() < 1e-9);
        assert!(!products[0].quantum_collision);
        let on_q = fwm_products(&[193.20, 193.20], QUANTUM_FREQ_THZ);
        assert!(on_q[0].quantum_collision);
    }

    #[test]
    fn collision_terms_of_the_grid() {
        let terms = colliding_mixing_terms(&CLASSICAL_GRID_THZ, QUANTUM_FREQ_THZ);
        assert_eq!(terms, vec![([0, 0, 3], 1.0)]);
        let field = [193.5, 193.55, 193.6, 193.65, 193.7, 193.75];
        assert!(colliding_mixing_terms(&field, QUANTUM_FREQ_THZ).is_empty());
    }

    #[test]
    fn plan_validation() {
        assert!(ChannelPlan::grid(4, 0.0).validate().is_ok());
        assert!(ChannelPlan::uniform(&[193.35, 193.35], 0.0).validate().is_err());
        assert!(ChannelPlan::uniform(&[193.37], 0.0).validate().is_err());
        assert!(ChannelPlan::uniform(&[193.20], 0.0).validate().is_err());
    }

    #[test]
    fn raman_is_zero_without_classical_channels() {
        let topo = fixtures::lab_topology();
        let route = topo.named_route("L1").unwrap();
        let filter = FilterSpec::receiver_default();
        let rate = raman_noise_photon_rate(&topo, &route, &ChannelPlan::quantum_only(), &filter, &raman(1e-13))
            .unwrap();
        assert_eq!(rate, 0.0);
        // uncalibrated is fine when there is nothing to scatter
        let rate = raman_noise_photon_rate(
            &topo,
            &route,
            &ChannelPlan::quantum_only(),
            &filter,
            &RamanParams::uncalibrated(0.2),
        )
        .unwrap();
        assert_eq!(rate, 0.0);
    }

    #[test]
    fn raman_requires_calibration() {
        let topo = fixtures::lab_topology();
        let route = topo.named_route("L1").unwrap();
        let err = raman_noise_photon_rate(
            &topo,
            &route,
            &ChannelPlan::grid(1, 0.0),
            &FilterSpec::receiver_default(),
            &RamanParams::uncalibrated(0.2),
        )
        .unwrap_err();
        assert!(matches!(err, ChannelError::Uncalibrated(_)));
    }

    #[test]
    fn raman_is_linear_in_bandwidth_and_power() {
        let topo = fixtures::lab_topology();
        let route = topo.named_route("L1+L3").unwrap();
        let filter = FilterSpec::receiver_default();
        let p = raman(5e-14);
        let base = raman_noise_photon_rate(&topo, &route, &ChannelPlan::grid(1, 0.0), &filter, &p).unwrap();
        let wide =
            raman_noise_photon_rate(&topo, &route, &ChannelPlan::grid(1, 0.0), &filter.with_bandwidth(200.0), &p)
                .unwrap();
        let hot = raman_noise_photon_rate(&topo, &route, &ChannelPlan::grid(1, mw_to_dbm(2.0)), &filter, &p).unwrap();
        assert!(base > 0.0);
        assert!((wide / base - 2.0).abs() < 1e-12);
        assert!((hot / base - 2.0).abs() < 1e-12);
    }

    #[test]
    fn leakage_jumps_when_a_channel_enters_the_pass_band() {
        let topo = fixtures::field_topology();
        let route = topo.named_route("HPN-WTC").unwrap();
        let geometry = PathGeometry::new(&topo, &route).unwrap();
        let plan = ChannelPlan::uniform(&[193.50], -10.0);
        let narrow = FilterSpec::receiver_default();
        let wide = narrow.with_bandwidth(620.0);
        let out = leakage_from_geometry(&geometry, &plan, &narrow);
        let inside = leakage_from_geometry(&geometry, &plan, &wide);
        assert!(inside > out * 1e10);
    }

    #[test]
    fn classical_budget_arithmetic() {
        let ok = check_received(193.35, 0.0, 30.0, None, DETECTOR_SENSITIVITY_DBM);
        assert_eq!(ok.received_dbm, -30.0);
        assert!(ok.feasible);
        let bad = check_received(193.35, 0.0, 40.0, None, DETECTOR_SENSITIVITY_DBM);
        assert!(!bad.feasible);
    }

    #[test]
    fn grid_plan_over_l3_with_amplifier_is_feasible() {
        let topo = fixtures::lab_topology();
        let route = topo.named_route("L3").unwrap();
        let rx = ClassicalReceiver {
            edfa_gain_db: Some(15.0),
            ..ClassicalReceiver::default()
        };
        let checks =
            classical_feasibility(&topo, &route, &ChannelPlan::grid(4, 0.0), &rx, DETECTOR_SENSITIVITY_DBM).unwrap();
        assert_eq!(checks.len(), 4);
        // 0 dBm - (1 + 2.452 + 1) - 0.5 - 6 + 15
        for c in &checks {
            assert!((c.received_dbm - 4.048).abs() < 1e-9);
            assert!(c.feasible);
        }
    }
}

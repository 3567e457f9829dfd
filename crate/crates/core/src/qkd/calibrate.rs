//! Fits device parameters to the measured link table, then places the
//! Raman and four-wave-mixing coefficients inside the region allowed by the
//! coexistence anchors.

use std::collections::BTreeMap;
use std::io::Read;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    estimate_from_geometry, linear, qber_estimate, skr_estimate, skr_unchecked, CalibratedParams,
    QkdDeviceParams, QkdLinkEstimate, MAX_BUDGET_DB, QBER_ABORT_THRESHOLD_PCT, REFERENCE_LOSS_DB,
};
use crate::channel::{
    fwm_noise_from_geometry, leakage_from_geometry, raman_noise_from_geometry, ChannelError,
    ChannelPlan, FilterSpec, FwmParams, PathGeometry, RamanParams, CLASSICAL_GRID_THZ,
};
use crate::topology::{Topology, TopologyError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table3Row {
    pub link: String,
    pub length_km: f64,
    pub budget_db: f64,
    pub n_oxc: u32,
    pub qber_pct: f64,
    pub skr_bps: f64,
}

pub fn read_table3<R: Read>(reader: R) -> Result<Vec<Table3Row>, csv::Error> {
    csv::Reader::from_reader(reader).deserialize().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Network {
    Lab,
    Field,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    Abort,
    NoAbort,
    /// Key rate may fall by at most this percentage from the quantum-only rate.
    MaxSkrDropPct(f64),
    MinSkrBps(f64),
    MaxQberPct(f64),
    MinQberPct(f64),
}

impl Expectation {
    fn requires_key(&self) -> bool {
        matches!(
            self,
            Expectation::NoAbort | Expectation::MaxSkrDropPct(_) | Expectation::MinSkrBps(_)
        )
    }

    fn holds(&self, estimate: &QkdLinkEstimate, baseline_skr: f64) -> bool {
        match *self {
            Expectation::Abort => estimate.aborted,
            Expectation::NoAbort => !estimate.aborted,
            Expectation::MaxSkrDropPct(p) => {
                !estimate.aborted && estimate.skr_bps >= (1.0 - p / 100.0) * baseline_skr
            }
            Expectation::MinSkrBps(s) => estimate.skr_bps >= s,
            Expectation::MaxQberPct(m) => estimate.qber_pct <= m,
            Expectation::MinQberPct(m) => estimate.qber_pct >= m,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub name: String,
    pub network: Network,
    pub link: String,
    #[serde(default)]
    pub channels_thz: Option<Vec<f64>>,
    pub power_dbm: f64,
    #[serde(default)]
    pub filter_bandwidth_ghz: Option<f64>,
    pub expect: Expectation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBounds {
    pub qber_abs_pp: f64,
    pub skr_rms_rel: f64,
    pub skr_max_rel: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldTrial {
    pub launch_power_dbm: f64,
    pub channels_thz: Vec<f64>,
    /// Widest filter bandwidth at which the link still ran.
    pub pass_max_bandwidth_ghz: f64,
    /// Narrowest filter bandwidth at which the link failed.
    pub fail_min_bandwidth_ghz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub quantum_freq_thz: f64,
    pub receiver_filter: FilterSpec,
    pub noise_qber_coeff: f64,
    pub ec_efficiency: f64,
    pub raman_alpha_db_per_km: f64,
    pub bounds: CalibrationBounds,
    pub field: FieldTrial,
    pub anchors: Vec<Anchor>,
}

impl AnchorSet {
    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowFit {
    pub link: String,
    pub budget_db: f64,
    pub measured_qber_pct: f64,
    pub predicted_qber_pct: f64,
    pub measured_skr_bps: f64,
    pub predicted_skr_bps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorOutcome {
    pub name: String,
    pub qber_pct: f64,
    pub skr_bps: f64,
    pub aborted: bool,
    pub satisfied: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub rows: Vec<RowFit>,
    pub qber_max_abs_residual_pp: f64,
    pub skr_rms_rel: f64,
    pub skr_max_rel: f64,
    pub anchors: Vec<AnchorOutcome>,
}

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("not enough data: {0}")]
    NotEnoughData(String),
    #[error("fit residuals exceed bounds: {0}")]
    ResidualsExceeded(String),
    #[error("anchors are mutually inconsistent: {0}")]
    Inconsistent(String),
    #[error("no coefficients satisfy the anchors: {0}")]
    Infeasible(String),
    #[error("anchors unsatisfied after fit: {0}")]
    Unsatisfied(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Least-squares fit of the noise-free QBER and key-rate model to the
/// measured rows. Each row's budget is used as its route loss.
pub fn fit_device(
    rows: &[Table3Row],
    noise_qber_coeff: f64,
    ec_efficiency: f64,
) -> Result<QkdDeviceParams, CalibrationError> {
    if rows.len() < 2 {
        return Err(CalibrationError::NotEnoughData(format!(
            "{} rows, at least 2 required",
            rows.len()
        )));
    }
    for r in rows {
        if !(r.budget_db.is_finite() && r.qber_pct.is_finite() && r.skr_bps.is_finite()) {
            return Err(CalibrationError::NotEnoughData(format!("row {} has non-finite values", r.link)));
        }
    }

    let x: Vec<f64> = rows.iter().map(|r| linear(r.budget_db)).collect();
    let q: Vec<f64> = rows.iter().map(|r| r.qber_pct).collect();
    let (mut base, mut coeff) = linear_fit(&x, &q).ok_or_else(|| {
        CalibrationError::NotEnoughData("budgets do not vary".into())
    })?;
    if base < 0.0 {
        base = 0.0;
        coeff = through_origin(&x, &q);
    }
    if coeff < 0.0 {
        coeff = 0.0;
        base = q.iter().sum::<f64>() / q.len() as f64;
    }

    let mut params = QkdDeviceParams {
        base_qber_pct: base,
        qber_loss_coeff: coeff,
        skr_ref_bps: 1.0,
        skr_ref_loss_db: REFERENCE_LOSS_DB,
        skr_loss_exponent: 1.0,
        noise_qber_coeff,
        qber_abort_threshold_pct: QBER_ABORT_THRESHOLD_PCT,
        max_budget_db: MAX_BUDGET_DB,
        ec_efficiency,
    };

    // ln S = a - gamma * (L - Lref) * ln10 / 10 + ln factor(Q)
    let ln10_10 = std::f64::consts::LN_10 / 10.0;
    let mut dx = Vec::new();
    let mut y = Vec::new();
    for r in rows {
        let qp = qber_estimate(r.budget_db, 0.0, 0.0, &params);
        let factor = params.entropy_factor(qp);
        if r.skr_bps > 0.0 && factor > 0.0 {
            dx.push(-(r.budget_db - REFERENCE_LOSS_DB) * ln10_10);
            y.push(r.skr_bps.ln() - factor.ln());
        }
    }
    if y.len() < 2 {
        return Err(CalibrationError::NotEnoughData("fewer than 2 rows with key".into()));
    }
    let (mut a, mut gamma) = linear_fit(&dx, &y)
        .ok_or_else(|| CalibrationError::NotEnoughData("key-rate budgets do not vary".into()))?;
    if gamma < 1.0 {
        gamma = 1.0;
        a = y.iter().zip(&dx).map(|(yi, xi)| yi - gamma * xi).sum::<f64>() / y.len() as f64;
    }
    params.skr_loss_exponent = gamma;
    params.skr_ref_bps = a.exp() * params.entropy_factor(params.reference_qber_pct());
    Ok(params)
}

fn linear_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len();
    let design = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
    if design.rank(1e-12) < 2 {
        return None;
    }
    let sol = design.svd(true, true).solve(&DVector::from_column_slice(y), 1e-12).ok()?;
    Some((sol[0], sol[1]))
}

fn through_origin(x: &[f64], y: &[f64]) -> f64 {
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    if sxx > 0.0 {
        sxy / sxx
    } else {
        0.0
    }
}

fn row_report(rows: &[Table3Row], device: &QkdDeviceParams) -> (Vec<RowFit>, f64, f64, f64) {
    let fits: Vec<RowFit> = rows
        .iter()
        .map(|r| {
            let q = qber_estimate(r.budget_db, 0.0, 0.0, device);
            RowFit {
                link: r.link.clone(),
                budget_db: r.budget_db,
                measured_qber_pct: r.qber_pct,
                predicted_qber_pct: q,
                measured_skr_bps: r.skr_bps,
                predicted_skr_bps: skr_estimate(r.budget_db, q, device),
            }
        })
        .collect();
    let qmax = fits
        .iter()
        .map(|f| (f.predicted_qber_pct - f.measured_qber_pct).abs())
        .fold(0.0, f64::max);
    let rel: Vec<f64> = fits
        .iter()
        .filter(|f| f.measured_skr_bps > 0.0)
        .map(|f| (f.predicted_skr_bps - f.measured_skr_bps).abs() / f.measured_skr_bps)
        .collect();
    let rms = if rel.is_empty() {
        0.0
    } else {
        (rel.iter().map(|e| e * e).sum::<f64>() / rel.len() as f64).sqrt()
    };
    let max = rel.iter().copied().fold(0.0, f64::max);
    (fits, qmax, rms, max)
}

/// Field filter centre such that the nearest classical channel enters the
/// pass band between the last passing and first failing bandwidth.
fn field_filter(anchors: &AnchorSet) -> Result<FilterSpec, CalibrationError> {
    let f = &anchors.field;
    if !(f.pass_max_bandwidth_ghz > 0.0 && f.pass_max_bandwidth_ghz < f.fail_min_bandwidth_ghz) {
        return Err(CalibrationError::Inconsistent(format!(
            "field pass bandwidth {} must be below fail bandwidth {}",
            f.pass_max_bandwidth_ghz, f.fail_min_bandwidth_ghz
        )));
    }
    let qf = anchors.quantum_freq_thz;
    let nearest = f
        .channels_thz
        .iter()
        .copied()
        .min_by(|a, b| (a - qf).abs().total_cmp(&(b - qf).abs()))
        .ok_or_else(|| CalibrationError::NotEnoughData("field trial has no channels".into()))?;
    let half_edge_thz = (f.pass_max_bandwidth_ghz + f.fail_min_bandwidth_ghz) / 4.0 / 1000.0;
    let center = nearest - (nearest - qf).signum() * half_edge_thz;
    let filter = FilterSpec {
        center_freq_thz: center,
        bandwidth_ghz: f.pass_max_bandwidth_ghz,
        ..anchors.receiver_filter
    };
    if !filter.contains(qf) {
        return Err(CalibrationError::Inconsistent(
            "field filter cannot pass the quantum channel at the passing bandwidth".into(),
        ));
    }
    Ok(filter)
}

struct AnchorSetup {
    geometry: PathGeometry,
    plan: ChannelPlan,
    filter: FilterSpec,
}

fn anchor_setup(
    anchor: &Anchor,
    anchors: &AnchorSet,
    lab: &Topology,
    field: &Topology,
    field_filter: &FilterSpec,
) -> Result<AnchorSetup, CalibrationError> {
    let (topology, base_filter, default_channels) = match anchor.network {
        Network::Lab => (lab, anchors.receiver_filter, CLASSICAL_GRID_THZ.to_vec()),
        Network::Field => (field, *field_filter, anchors.field.channels_thz.clone()),
    };
    let route = topology.named_route(&anchor.link)?;
    let geometry = PathGeometry::new(topology, &route)?;
    let channels = anchor.channels_thz.clone().unwrap_or(default_channels);
    let mut plan = ChannelPlan::uniform(&channels, anchor.power_dbm);
    plan.quantum_freq_thz = anchors.quantum_freq_thz;
    plan.validate()?;
    let filter = match anchor.filter_bandwidth_ghz {
        Some(bw) => base_filter.with_bandwidth(bw),
        None => base_filter,
    };
    filter.validate()?;
    Ok(AnchorSetup { geometry, plan, filter })
}

/// `a * u + b * v <= rhs` in scaled coefficient space.
#[derive(Clone, Copy, Debug)]
struct HalfPlane {
    a: f64,
    b: f64,
    rhs: f64,
}

impl HalfPlane {
    fn holds(&self, u: f64, v: f64) -> bool {
        self.a * u + self.b * v <= self.rhs + 1e-9 * (1.0 + self.rhs.abs())
    }
}

/// Largest QBER at which the key rate still meets `target`.
fn qber_ceiling_for_rate(loss_db: f64, target: f64, device: &QkdDeviceParams) -> f64 {
    let thr = device.qber_abort_threshold_pct;
    if skr_unchecked(loss_db, thr, device) >= target {
        return thr;
    }
    let (mut lo, mut hi) = (0.0, thr);
    if skr_unchecked(loss_db, lo, device) < target {
        return -1.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if skr_unchecked(loss_db, mid, device) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

fn check_monotonic(anchors: &[Anchor]) -> Result<(), CalibrationError> {
    let key = |a: &Anchor| {
        format!(
            "{:?}|{}|{:?}|{:?}",
            a.network, a.link, a.channels_thz, a.filter_bandwidth_ghz
        )
    };
    let mut groups: BTreeMap<String, Vec<&Anchor>> = BTreeMap::new();
    for a in anchors {
        groups.entry(key(a)).or_default().push(a);
    }
    for group in groups.values() {
        for lo in group {
            for hi in group {
                if hi.power_dbm > lo.power_dbm
                    && matches!(lo.expect, Expectation::Abort)
                    && hi.expect.requires_key()
                {
                    return Err(CalibrationError::Inconsistent(format!(
                        "'{}' aborts at lower power than '{}' keeps key",
                        lo.name, hi.name
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Vertices of the polygon `{(u, v) >= 0 : all half-planes}`.
fn polygon_vertices(planes: &[HalfPlane]) -> Vec<(f64, f64)> {
    let mut lines = planes.to_vec();
    lines.push(HalfPlane { a: -1.0, b: 0.0, rhs: 0.0 });
    lines.push(HalfPlane { a: 0.0, b: -1.0, rhs: 0.0 });
    let mut out: Vec<(f64, f64)> = Vec::new();
    for i in 0..lines.len() {
        for j in i + 1..lines.len() {
            let (p, q) = (lines[i], lines[j]);
            let det = p.a * q.b - p.b * q.a;
            if det.abs() < 1e-12 {
                continue;
            }
            let u = (p.rhs * q.b - p.b * q.rhs) / det;
            let v = (p.a * q.rhs - p.rhs * q.a) / det;
            if lines.iter().all(|h| h.holds(u, v))
                && !out.iter().any(|&(x, y)| (x - u).abs() < 1e-9 && (y - v).abs() < 1e-9)
            {
                out.push((u, v));
            }
        }
    }
    out
}

/// Runs the full calibration: device fit, residual bounds, field filter
/// placement, noise-coefficient feasibility and a final anchor check.
pub fn calibrate(
    rows: &[Table3Row],
    anchors: &AnchorSet,
    lab: &Topology,
    field: &Topology,
) -> Result<CalibratedParams, CalibrationError> {
    let device = fit_device(rows, anchors.noise_qber_coeff, anchors.ec_efficiency)?;
    let (fits, qmax, rms, max) = row_report(rows, &device);
    let b = &anchors.bounds;
    if qmax > b.qber_abs_pp || rms > b.skr_rms_rel || max > b.skr_max_rel {
        return Err(CalibrationError::ResidualsExceeded(format!(
            "qber {qmax:.3} pp (limit {}), skr rms {rms:.3} (limit {}), skr max {max:.3} (limit {})",
            b.qber_abs_pp, b.skr_rms_rel, b.skr_max_rel
        )));
    }
    check_monotonic(&anchors.anchors)?;
    let field_filter = field_filter(anchors)?;

    let unit_raman = RamanParams {
        rho: Some(1.0),
        alpha_db_per_km: anchors.raman_alpha_db_per_km,
    };
    let unit_fwm = FwmParams { coeff: Some(1.0) };
    let thr = device.qber_abort_threshold_pct;

    // rows of (raman coefficient, fwm coefficient, sense, bound on the noise term)
    let mut raw: Vec<(f64, f64, bool, f64)> = Vec::new();
    let mut caps: Vec<(f64, f64)> = Vec::new();
    for anchor in &anchors.anchors {
        let s = anchor_setup(anchor, anchors, lab, field, &field_filter)?;
        let loss = s.geometry.route_loss_db();
        let to_qber = device.noise_qber_coeff * linear(s.geometry.after_tap_loss_db());
        let r = raman_noise_from_geometry(&s.geometry, &s.plan, &s.filter, &unit_raman)? * to_qber;
        let w = fwm_noise_from_geometry(&s.geometry, &s.plan, &s.filter, &unit_raman, &unit_fwm)? * to_qber;
        let fixed = device.base_qber_pct
            + device.qber_loss_coeff * linear(loss)
            + leakage_from_geometry(&s.geometry, &s.plan, &s.filter) * to_qber;
        caps.push((r, w));
        let over_budget = !(loss <= device.max_budget_db);

        let ceiling = |cap: f64| -> Result<Option<(f64, f64, bool, f64)>, CalibrationError> {
            if over_budget {
                return Err(CalibrationError::Infeasible(format!(
                    "'{}' needs key beyond the power budget",
                    anchor.name
                )));
            }
            Ok(Some((r, w, true, cap - fixed)))
        };
        let row = match anchor.expect {
            Expectation::Abort if over_budget => None,
            Expectation::Abort => Some((r, w, false, thr - fixed)),
            Expectation::NoAbort => ceiling(thr * (1.0 - 1e-6))?,
            Expectation::MaxSkrDropPct(p) => {
                let baseline = skr_estimate(loss, qber_estimate(loss, 0.0, 0.0, &device), &device);
                let q = qber_ceiling_for_rate(loss, (1.0 - p / 100.0) * baseline, &device);
                ceiling(q.min(thr * (1.0 - 1e-6)))?
            }
            Expectation::MinSkrBps(min) => {
                let q = qber_ceiling_for_rate(loss, min, &device);
                if q < 0.0 {
                    return Err(CalibrationError::Infeasible(format!(
                        "'{}' needs {min} bps, above the noise-free rate",
                        anchor.name
                    )));
                }
                ceiling(q.min(thr * (1.0 - 1e-6)))?
            }
            Expectation::MaxQberPct(m) => Some((r, w, true, m - fixed)),
            Expectation::MinQberPct(m) => Some((r, w, false, m - fixed)),
        };
        raw.extend(row);
    }

    let scale_r = caps.iter().map(|c| c.0).fold(0.0, f64::max);
    let scale_w = caps.iter().map(|c| c.1).fold(0.0, f64::max);
    let norm = |x: f64, s: f64| if s > 0.0 { x / s } else { 0.0 };
    let mut planes: Vec<HalfPlane> = raw
        .iter()
        .map(|&(r, w, le, bound)| {
            let sign = if le { 1.0 } else { -1.0 };
            HalfPlane {
                a: sign * norm(r, scale_r),
                b: sign * norm(w, scale_w),
                rhs: sign * bound,
            }
        })
        .collect();
    // past this box every anchor's noise term is saturated
    let min_positive = |pick: fn(&(f64, f64)) -> f64, scale: f64| {
        caps.iter()
            .map(pick)
            .filter(|&c| c > 0.0)
            .map(|c| norm(c, scale))
            .fold(f64::INFINITY, f64::min)
    };
    let box_u = 50.0 / min_positive(|c| c.0, scale_r);
    let box_v = 50.0 / min_positive(|c| c.1, scale_w);
    if box_u.is_finite() {
        planes.push(HalfPlane { a: 1.0, b: 0.0, rhs: box_u });
    }
    if box_v.is_finite() {
        planes.push(HalfPlane { a: 0.0, b: 1.0, rhs: box_v });
    }
    if scale_r == 0.0 {
        planes.push(HalfPlane { a: 1.0, b: 0.0, rhs: 0.0 });
    }
    if scale_w == 0.0 {
        planes.push(HalfPlane { a: 0.0, b: 1.0, rhs: 0.0 });
    }

    let vertices = polygon_vertices(&planes);
    if vertices.is_empty() {
        return Err(CalibrationError::Infeasible(
            "anchor constraints leave no admissible Raman/FWM coefficients".into(),
        ));
    }
    let n = vertices.len() as f64;
    let u = vertices.iter().map(|v| v.0).sum::<f64>() / n;
    let v = vertices.iter().map(|v| v.1).sum::<f64>() / n;

    let mut params = CalibratedParams {
        device,
        raman: RamanParams {
            rho: Some(norm(u, scale_r).max(0.0)),
            alpha_db_per_km: anchors.raman_alpha_db_per_km,
        },
        fwm: FwmParams {
            coeff: Some(norm(v, scale_w).max(0.0)),
        },
        receiver_filter: anchors.receiver_filter,
        field_filter,
        field_launch_power_dbm: anchors.field.launch_power_dbm,
        field_channels_thz: anchors.field.channels_thz.clone(),
        report: CalibrationReport {
            rows: fits,
            qber_max_abs_residual_pp: qmax,
            skr_rms_rel: rms,
            skr_max_rel: max,
            anchors: Vec::new(),
        },
    };

    let mut failed = Vec::new();
    for anchor in &anchors.anchors {
        let s = anchor_setup(anchor, anchors, lab, field, &params.field_filter)?;
        let est = estimate_from_geometry(&s.geometry, &s.plan, &s.filter, &params.raman, &params.fwm, &params.device)
            .map_err(|e| match e {
                super::QkdError::Channel(c) => CalibrationError::Channel(c),
                super::QkdError::Topology(t) => CalibrationError::Topology(t),
            })?;
        let loss = s.geometry.route_loss_db();
        let baseline = skr_estimate(loss, qber_estimate(loss, 0.0, 0.0, &params.device), &params.device);
        let satisfied = anchor.expect.holds(&est, baseline);
        if !satisfied {
            failed.push(anchor.name.clone());
        }
        params.report.anchors.push(AnchorOutcome {
            name: anchor.name.clone(),
            qber_pct: est.qber_pct,
            skr_bps: est.skr_bps,
            aborted: est.aborted,
            satisfied,
        });
    }
    if !failed.is_empty() {
        return Err(CalibrationError::Unsatisfied(failed.join(", ")));
    }
    Ok(params)
}

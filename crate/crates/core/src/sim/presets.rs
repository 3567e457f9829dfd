//! Steady-state evaluations of the reference experiments. Presets only
//! read the calibration.

use serde::{Deserialize, Serialize};

use crate::channel::{classical_feasibility, ChannelPlan, ClassicalReceiver, CLASSICAL_GRID_THZ, DETECTOR_SENSITIVITY_DBM};
use crate::fixtures;
use crate::qkd::{estimate_link, CalibratedParams, QkdError};
use crate::topology::Topology;

pub const POWER_SWEEP_DBM: (i32, i32) = (-6, 9);
pub const BANDWIDTH_SWEEP_GHZ: (u32, u32, u32) = (500, 900, 25);
pub const LAB_SWEEP_LINKS: [&str; 4] = ["L1", "L2", "L3", "L4"];
pub const COMPOSITE_SWEEP_LINKS: [&str; 2] = ["L1+L2", "L1+L3"];
/// Field link names and the span chains they run over.
pub const FIELD_LINKS: [(&str, &str); 2] = [("HPN-WTC", "HPN-WTC"), ("NSQI-WTC", "NSQI-HPN+HPN-WTC")];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Table3,
    Fig4a,
    Fig4b,
    Fig4cd,
    Fig5,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Table3, Preset::Fig4a, Preset::Fig4b, Preset::Fig4cd, Preset::Fig5];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Table3 => "table3",
            Preset::Fig4a => "fig4a",
            Preset::Fig4b => "fig4b",
            Preset::Fig4cd => "fig4cd",
            Preset::Fig5 => "fig5",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table3Point {
    pub link: String,
    pub budget_db: f64,
    pub qber_pct: f64,
    pub skr_bps: f64,
}

/// Every measured link, no classical channels.
pub fn table3(params: &CalibratedParams) -> Result<Vec<Table3Point>, QkdError> {
    let lab = fixtures::lab_topology();
    fixtures::table3_rows()
        .iter()
        .map(|row| {
            let route = lab.named_route(&row.link)?;
            let est = estimate_link(&lab, &route, &ChannelPlan::quantum_only(), &params.receiver_filter, params)?;
            Ok(Table3Point {
                link: row.link.clone(),
                budget_db: est.route_loss_db,
                qber_pct: est.qber_pct,
                skr_bps: est.skr_bps,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub x: f64,
    pub qber_pct: f64,
    pub skr_bps: f64,
    pub classical_feasible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// e.g. `L1 1ch`.
    pub series: String,
    /// `launch_power_dbm` or `filter_bandwidth_ghz`.
    pub variable: String,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    /// Smallest swept value with zero key, if any.
    pub fn first_zero_skr(&self) -> Option<f64> {
        self.points.iter().find(|p| p.skr_bps == 0.0).map(|p| p.x)
    }
}

fn sweep_point(
    topology: &Topology,
    link: &str,
    plan: &ChannelPlan,
    filter: &crate::channel::FilterSpec,
    params: &CalibratedParams,
    x: f64,
) -> Result<SweepPoint, QkdError> {
    let route = topology.named_route(link)?;
    let est = estimate_link(topology, &route, plan, filter, params)?;
    let checks = classical_feasibility(topology, &route, plan, &ClassicalReceiver::default(), DETECTOR_SENSITIVITY_DBM)?;
    Ok(SweepPoint {
        x,
        qber_pct: est.qber_pct,
        skr_bps: est.skr_bps,
        classical_feasible: checks.iter().all(|c| c.feasible),
    })
}

/// Lab link with the first `n_channels` grid channels, one point per dB.
pub fn power_sweep(
    link: &str,
    n_channels: usize,
    powers_dbm: impl IntoIterator<Item = i32>,
    params: &CalibratedParams,
) -> Result<SweepResult, QkdError> {
    let lab = fixtures::lab_topology();
    let freqs = &CLASSICAL_GRID_THZ[..n_channels.min(CLASSICAL_GRID_THZ.len())];
    let mut points = powers_dbm
        .into_iter()
        .map(|p| {
            let plan = ChannelPlan::uniform(freqs, p as f64);
            sweep_point(&lab, link, &plan, &params.receiver_filter, params, p as f64)
        })
        .collect::<Result<Vec<_>, _>>()?;
    points.sort_by(|a, b| a.x.total_cmp(&b.x));
    Ok(SweepResult {
        series: format!("{link} {n_channels}ch"),
        variable: "launch_power_dbm".into(),
        points,
    })
}

/// Field link carrying the field channel plan, one point per bandwidth.
/// `link` is a field link name or a span chain.
pub fn filter_sweep(
    link: &str,
    bandwidths_ghz: impl IntoIterator<Item = u32>,
    params: &CalibratedParams,
) -> Result<SweepResult, QkdError> {
    let field = fixtures::field_topology();
    let chain = FIELD_LINKS.iter().find(|(n, _)| *n == link).map_or(link, |(_, c)| c);
    let plan = ChannelPlan::uniform(&params.field_channels_thz, params.field_launch_power_dbm);
    let mut points = bandwidths_ghz
        .into_iter()
        .map(|bw| {
            let filter = params.field_filter.with_bandwidth(bw as f64);
            sweep_point(&field, chain, &plan, &filter, params, bw as f64)
        })
        .collect::<Result<Vec<_>, _>>()?;
    points.sort_by(|a, b| a.x.total_cmp(&b.x));
    Ok(SweepResult {
        series: link.to_string(),
        variable: "filter_bandwidth_ghz".into(),
        points,
    })
}

fn powers() -> impl Iterator<Item = i32> {
    POWER_SWEEP_DBM.0..=POWER_SWEEP_DBM.1
}

fn bandwidths() -> impl Iterator<Item = u32> {
    let (lo, hi, step) = BANDWIDTH_SWEEP_GHZ;
    (lo..=hi).step_by(step as usize)
}

/// All sweeps belonging to one figure preset.
pub fn sweeps(preset: Preset, params: &CalibratedParams) -> Result<Vec<SweepResult>, QkdError> {
    match preset {
        Preset::Table3 => Ok(Vec::new()),
        Preset::Fig4a => LAB_SWEEP_LINKS.iter().map(|l| power_sweep(l, 1, powers(), params)).collect(),
        Preset::Fig4b => LAB_SWEEP_LINKS.iter().map(|l| power_sweep(l, 4, powers(), params)).collect(),
        Preset::Fig4cd => COMPOSITE_SWEEP_LINKS
            .iter()
            .flat_map(|l| (1..=4).map(move |n| (l, n)))
            .map(|(l, n)| power_sweep(l, n, powers(), params))
            .collect(),
        Preset::Fig5 => FIELD_LINKS.iter().map(|(l, _)| filter_sweep(l, bandwidths(), params)).collect(),
    }
}

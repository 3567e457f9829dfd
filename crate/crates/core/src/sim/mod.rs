//! Deterministic discrete-event engine driving the controller, the QKD
//! devices and the key stores, plus steady-state experiment presets.
//!
//! Events at equal timestamps run controller first, then device reports,
//! then key-store accounting, then in insertion order.

pub mod presets;
pub mod report;
mod scenario;

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::channel::{classical_feasibility, ChannelPlan, ClassicalReceiver, DETECTOR_SENSITIVITY_DBM};
use crate::controller::{
    ConnId, ConnState, Controller, ControllerConfig, ControllerError, Directive, LogRecord,
};
use crate::kms::{AuditRecord, DEFAULT_STATS_WINDOW_S};
use crate::qkd::{estimate_link, sample_observation, skr_estimate, CalibratedParams, QkdLinkEstimate};
use crate::topology::{Route, SpanId, TopologyError};

pub use scenario::{
    Fault, Scenario, ScheduledFault, ScheduledRequest, ScheduledTeardown, TopologyRef,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("model is not calibrated: {0}")]
    Uncalibrated(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Topology(TopologyError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    Controller,
    Device,
    Kms,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Controller => "controller",
            Source::Device => "device",
            Source::Kms => "kms",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum EventKind {
    Request(usize),
    Teardown(usize),
    Fault(usize),
    Establish { conn: ConnId, generation: u64 },
    Report { conn: ConnId, generation: u64 },
    Rekey { conn: ConnId, generation: u64 },
}

impl EventKind {
    fn source(&self) -> Source {
        match self {
            EventKind::Request(_) | EventKind::Teardown(_) | EventKind::Fault(_) => Source::Controller,
            EventKind::Establish { .. } | EventKind::Report { .. } => Source::Device,
            EventKind::Rekey { .. } => Source::Kms,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Queued {
    at: f64,
    seq: u64,
    kind: EventKind,
}

impl Queued {
    fn key(&self) -> (f64, Source, u64) {
        (self.at, self.kind.source(), self.seq)
    }
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    /// Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        let (a, b) = (self.key(), other.key());
        b.0.total_cmp(&a.0)
            .then_with(|| b.1.cmp(&a.1))
            .then_with(|| b.2.cmp(&a.2))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventRecord {
    pub timestamp_s: f64,
    pub source: Source,
    pub event: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConnectionSummary {
    pub conn_id: ConnId,
    pub src: String,
    pub dst: String,
    pub kind: String,
    pub final_state: ConnState,
    pub route: String,
    pub routes_tried: usize,
    pub reports: u64,
    pub last_qber_pct: Option<f64>,
    pub last_skr_bps: Option<f64>,
    pub tunnel_state: String,
    pub rekeys: u64,
    pub failed_rekeys: u64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub events: Vec<EventRecord>,
    pub controller_log: Vec<LogRecord>,
    pub audit: Vec<AuditRecord>,
    pub summary: Vec<ConnectionSummary>,
    pub route_table: String,
    pub final_time_s: f64,
    pub generation_rate_bps: f64,
    pub consumption_rate_bps: f64,
}

struct QberOverride {
    span: Option<SpanId>,
    qber_pct: f64,
    from: f64,
    until: f64,
}

pub struct Engine<'a> {
    scenario: &'a Scenario,
    params: &'a CalibratedParams,
    controller: Controller,
    queue: BinaryHeap<Queued>,
    seq: u64,
    now: f64,
    rng: ChaCha8Rng,
    overrides: Vec<QberOverride>,
    events: Vec<EventRecord>,
    conn_of_request: Vec<Option<ConnId>>,
    reports: std::collections::BTreeMap<ConnId, u64>,
}

fn check_calibrated(params: &CalibratedParams) -> Result<(), SimError> {
    if params.raman.rho.is_none() {
        return Err(SimError::Uncalibrated("raman coefficient missing".into()));
    }
    if params.fwm.coeff.is_none() {
        return Err(SimError::Uncalibrated("four-wave-mixing coefficient missing".into()));
    }
    if !(params.device.skr_ref_bps > 0.0) {
        return Err(SimError::Uncalibrated("reference key rate missing".into()));
    }
    Ok(())
}

/// Estimate of a severed route: no photons arrive.
fn cut_estimate() -> QkdLinkEstimate {
    QkdLinkEstimate {
        route_loss_db: f64::INFINITY,
        qber_pct: 50.0,
        skr_bps: 0.0,
        signal_rate: 0.0,
        dark_rate: 0.0,
        noise_rate: 0.0,
        fwm_collision: false,
        aborted: true,
    }
}

impl<'a> Engine<'a> {
    pub fn new(scenario: &'a Scenario, params: &'a CalibratedParams, seed: u64) -> Result<Self, SimError> {
        scenario.validate()?;
        check_calibrated(params)?;
        let topology = scenario.topology.resolve()?;
        let config = ControllerConfig {
            rekey_interval_s: scenario.rekey_interval_s,
            qber_threshold_pct: params.device.qber_abort_threshold_pct,
            ..ControllerConfig::default()
        };
        let controller = Controller::new(topology, config, seed).map_err(SimError::Topology)?;
        let mut engine = Self {
            scenario,
            params,
            controller,
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            overrides: Vec::new(),
            events: Vec::new(),
            conn_of_request: vec![None; scenario.requests.len()],
            reports: Default::default(),
        };
        for (i, r) in scenario.requests.iter().enumerate() {
            engine.push(r.at_s, EventKind::Request(i));
        }
        for (i, f) in scenario.faults.iter().enumerate() {
            engine.push(f.at_s, EventKind::Fault(i));
        }
        for (i, t) in scenario.teardowns.iter().enumerate() {
            engine.push(t.at_s, EventKind::Teardown(i));
        }
        Ok(engine)
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    fn push(&mut self, at: f64, kind: EventKind) {
        self.queue.push(Queued { at, seq: self.seq, kind });
        self.seq += 1;
    }

    fn record(&mut self, source: Source, event: &str, detail: String) {
        self.events.push(EventRecord {
            timestamp_s: self.now,
            source,
            event: event.to_string(),
            detail,
        });
    }

    fn schedule(&mut self, directives: Vec<Directive>) {
        for d in directives {
            match d {
                Directive::Establish { conn, generation, at } => {
                    self.push(at, EventKind::Establish { conn, generation })
                }
                Directive::Report { conn, generation, at } => {
                    self.push(at, EventKind::Report { conn, generation })
                }
                Directive::Rekey { conn, generation, at } => {
                    self.push(at, EventKind::Rekey { conn, generation })
                }
            }
        }
    }

    fn estimate(&self, route: &Route, plan: &ChannelPlan) -> QkdLinkEstimate {
        let mut est = match estimate_link(
            self.controller.topology(),
            route,
            plan,
            &self.params.receiver_filter,
            self.params,
        ) {
            Ok(e) => e,
            Err(_) => cut_estimate(),
        };
        let device = &self.params.device;
        for o in &self.overrides {
            let active = self.now >= o.from && self.now < o.until;
            let applies = o.span.as_ref().is_none_or(|s| route.contains_span(s));
            if active && applies {
                est.qber_pct = o.qber_pct;
                est.aborted = o.qber_pct >= device.qber_abort_threshold_pct
                    || !(est.route_loss_db <= device.max_budget_db);
                est.skr_bps = skr_estimate(est.route_loss_db, o.qber_pct, device);
            }
        }
        est
    }

    fn handle(&mut self, kind: EventKind) -> Result<(), SimError> {
        match kind {
            EventKind::Request(i) => {
                let request = self.scenario.requests[i].request.clone();
                let desc = format!("{}->{} {:?}", request.src, request.dst, request.kind);
                match self.controller.handle_request(request, self.now) {
                    Ok((conn, directives)) => {
                        self.conn_of_request[i] = Some(conn);
                        let c = self.controller.connection(conn).expect("new connection");
                        let route = c.route().map(Route::label).unwrap_or_default();
                        let state = c.state();
                        self.record(
                            Source::Controller,
                            "request",
                            format!("conn={conn} {desc} route={route} state={state:?}"),
                        );
                        self.schedule(directives);
                    }
                    Err(e) => self.record(Source::Controller, "request_rejected", format!("{desc}: {e}")),
                }
            }
            EventKind::Teardown(i) => {
                let req = self.scenario.teardowns[i].request;
                match self.conn_of_request[req] {
                    Some(conn) => {
                        let state = self.controller.teardown(conn, self.now)?;
                        self.record(Source::Controller, "teardown", format!("conn={conn} state={state:?}"));
                    }
                    None => self.record(
                        Source::Controller,
                        "teardown_skipped",
                        format!("request {req} holds no connection"),
                    ),
                }
            }
            EventKind::Fault(i) => {
                let fault = self.scenario.faults[i].fault.clone();
                match &fault {
                    Fault::ForceQber { span, qber_pct, duration_s } => {
                        self.overrides.push(QberOverride {
                            span: span.clone(),
                            qber_pct: *qber_pct,
                            from: self.now,
                            until: duration_s.map_or(f64::INFINITY, |d| self.now + d),
                        });
                        let target = span.as_ref().map_or("all".to_string(), ToString::to_string);
                        self.record(Source::Controller, "fault", format!("force_qber span={target} qber={qber_pct:.4}"));
                    }
                    other => {
                        let event = other.link_event().expect("link fault");
                        match self.controller.update_route_table(&event, self.now) {
                            Ok(()) => self.record(Source::Controller, "fault", format!("{event:?}")),
                            Err(e) => self.record(Source::Controller, "fault_rejected", format!("{event:?}: {e}")),
                        }
                    }
                }
            }
            EventKind::Establish { conn, generation } => {
                let directives = self.controller.on_session_established(conn, generation, self.now)?;
                if !directives.is_empty() {
                    self.record(Source::Device, "session_generating", format!("conn={conn} gen={generation}"));
                }
                self.schedule(directives);
            }
            EventKind::Report { conn, generation } => {
                let Some(c) = self.controller.connection(conn) else {
                    return Ok(());
                };
                if c.generation() != generation || c.state().is_terminal() {
                    return Ok(());
                }
                let route = c.route().expect("monitored route").clone();
                let plan = c.request.plan.clone().unwrap_or_default();
                let est = self.estimate(&route, &plan);
                let threshold = self.params.device.qber_abort_threshold_pct;
                let obs = sample_observation(&est, self.scenario.sigma_rel, threshold, &mut self.rng);
                *self.reports.entry(conn).or_default() += 1;
                if !plan.classical.is_empty() {
                    let feasible = classical_feasibility(
                        self.controller.topology(),
                        &route,
                        &plan,
                        &ClassicalReceiver::default(),
                        DETECTOR_SENSITIVITY_DBM,
                    )
                    .map(|checks| checks.iter().all(|c| c.feasible))
                    .unwrap_or(false);
                    self.record(Source::Device, "classical_check", format!("conn={conn} feasible={feasible}"));
                }
                let outcome = self.controller.on_qkd_report(conn, generation, obs, self.now)?;
                if let Some((action, directives)) = outcome {
                    self.record(
                        Source::Device,
                        "qkd_report",
                        format!(
                            "conn={conn} route={} qber={:.4} skr={:.3} action={}",
                            route.label(),
                            obs.qber_pct,
                            obs.skr_bps,
                            action.as_str()
                        ),
                    );
                    self.schedule(directives);
                }
            }
            EventKind::Rekey { conn, generation } => {
                let directives = self.controller.on_rekey(conn, generation, self.now)?;
                if let Some(t) = self.controller.connection(conn).and_then(|c| c.tunnel()) {
                    if !directives.is_empty() {
                        let state = t.state();
                        self.record(Source::Kms, "rekey", format!("conn={conn} tunnel={state:?}"));
                    }
                }
                self.schedule(directives);
            }
        }
        Ok(())
    }

    /// Processes every event up to the scenario duration.
    pub fn run(mut self) -> Result<RunOutput, SimError> {
        let end = self.scenario.duration_s;
        while let Some(next) = self.queue.peek() {
            if next.at > end {
                break;
            }
            let ev = self.queue.pop().expect("peeked");
            debug_assert!(ev.at >= self.now);
            self.now = ev.at;
            self.handle(ev.kind)?;
        }
        self.now = end;
        let summary = self
            .controller
            .connections()
            .map(|c| {
                let report = c.last_report();
                let tunnel = c.tunnel();
                ConnectionSummary {
                    conn_id: c.id,
                    src: c.request.src.to_string(),
                    dst: c.request.dst.to_string(),
                    kind: format!("{:?}", c.request.kind),
                    final_state: c.state(),
                    route: c.route().map(Route::label).unwrap_or_default(),
                    routes_tried: c.cursor(),
                    reports: self.reports.get(&c.id).copied().unwrap_or(0),
                    last_qber_pct: report.map(|r| r.qber_pct),
                    last_skr_bps: report.map(|r| r.skr_bps),
                    tunnel_state: tunnel.map(|t| format!("{:?}", t.state())).unwrap_or_default(),
                    rekeys: tunnel.map_or(0, |t| t.rekeys),
                    failed_rekeys: tunnel.map_or(0, |t| t.failed_rekeys),
                }
            })
            .collect();
        let stats = self.controller.kms().total_stats(end, DEFAULT_STATS_WINDOW_S);
        Ok(RunOutput {
            events: self.events,
            controller_log: self.controller.log().to_vec(),
            audit: self.controller.kms().audit(),
            summary,
            route_table: self.controller.route_table().dump(),
            final_time_s: end,
            generation_rate_bps: stats.generation_rate_bps,
            consumption_rate_bps: stats.consumption_rate_bps,
        })
    }
}

/// Runs `scenario` with `seed`; the result is a pure function of both.
pub fn run(scenario: &Scenario, params: &CalibratedParams, seed: u64) -> Result<RunOutput, SimError> {
    Engine::new(scenario, params, seed)?.run()
}

pub fn write_events_csv<W: Write>(events: &[EventRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestamp_s", "source", "event", "detail"])?;
    for e in events {
        w.write_record([
            format!("{:.3}", e.timestamp_s),
            e.source.as_str().to_string(),
            e.event.clone(),
            e.detail.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

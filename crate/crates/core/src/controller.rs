//! QKD-aware path controller. Requests are served from a precomputed
//! route table; cross-connects are installed per visited node; quantum
//! connections are accepted, kept, rerouted or failed on each QBER report.
//!
//! The controller never schedules anything itself. Every method that needs
//! a future callback returns [`Directive`]s for the event engine.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::ChannelPlan;
use crate::kms::{
    KeyRateReport, Kms, KmsError, QkdSession, SessionState, Tunnel, TunnelState,
    DEFAULT_REKEY_INTERVAL_S, REPORT_INTERVAL_S,
};
use crate::qkd::{Observation, QBER_ABORT_THRESHOLD_PCT};
use crate::topology::{NodeId, Route, SpanConfig, SpanId, Topology, TopologyError};

pub type ConnId = u64;

pub const DEFAULT_MAX_HOPS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    QuantumSecured,
    ClassicalOnly,
    Coexistence,
}

impl RequestKind {
    pub fn is_quantum(self) -> bool {
        !matches!(self, RequestKind::ClassicalOnly)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectionRequest {
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: RequestKind,
    /// Classical channels sharing the fibre; only used for coexistence.
    #[serde(default)]
    pub plan: Option<ChannelPlan>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConnState {
    RouteSelected,
    PathInstalled,
    QkdStarting,
    Monitoring,
    EncryptionActive,
    Rerouting,
    Failed,
    TornDown,
}

impl ConnState {
    pub fn is_terminal(self) -> bool {
        matches!(self, ConnState::Failed | ConnState::TornDown)
    }
}

pub fn is_legal_transition(from: ConnState, to: ConnState) -> bool {
    use ConnState::*;
    match (from, to) {
        (TornDown, _) => false,
        (_, TornDown) => true,
        (Failed, _) => false,
        (RouteSelected, PathInstalled | Failed) => true,
        (PathInstalled, QkdStarting) => true,
        (QkdStarting, Monitoring | Rerouting | Failed) => true,
        (Monitoring, EncryptionActive | Rerouting | Failed) => true,
        (EncryptionActive, Rerouting | Failed) => true,
        (Rerouting, RouteSelected | Failed) => true,
        _ => false,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CrossConnect {
    pub node: NodeId,
    pub in_port: String,
    pub out_port: String,
}

impl fmt::Display for CrossConnect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}->{}", self.node, self.in_port, self.out_port)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportAction {
    Accept,
    Continue,
    Reroute,
    Fail,
}

impl ReportAction {
    pub fn as_str(self) -> &'static str {
        match self {
            ReportAction::Accept => "accept",
            ReportAction::Continue => "continue",
            ReportAction::Reroute => "reroute",
            ReportAction::Fail => "fail",
        }
    }
}

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("no connection {0}")]
    UnknownConnection(ConnId),
    #[error("report for connection {0} in state {1:?}")]
    StaleReport(ConnId, ConnState),
    #[error("port {node}:{port} is held by connection {holder}")]
    PortConflict { node: NodeId, port: String, holder: ConnId },
    #[error("QKD terminals unavailable: {0}")]
    DeviceBusy(#[source] KmsError),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// Per ordered pair, every route up to `max_hops`, cheapest first.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteTable {
    max_hops: usize,
    entries: BTreeMap<(NodeId, NodeId), Vec<(Route, f64)>>,
}

impl RouteTable {
    pub fn build(topology: &Topology, max_hops: usize) -> Result<Self, TopologyError> {
        let mut entries = BTreeMap::new();
        for a in topology.nodes() {
            for b in topology.nodes() {
                if a.id == b.id {
                    continue;
                }
                let found = match topology.enumerate_routes(&a.id, &b.id, max_hops) {
                    Err(TopologyError::NoRoute { .. }) => Vec::new(),
                    other => other?,
                };
                let routes = found
                    .into_iter()
                    .map(|r| {
                        let loss = topology.route_loss(&r)?;
                        Ok((r, loss))
                    })
                    .collect::<Result<Vec<_>, TopologyError>>()?;
                entries.insert((a.id.clone(), b.id.clone()), routes);
            }
        }
        Ok(Self { max_hops, entries })
    }

    pub fn max_hops(&self) -> usize {
        self.max_hops
    }

    pub fn routes(&self, src: &NodeId, dst: &NodeId) -> &[(Route, f64)] {
        self.entries
            .get(&(src.clone(), dst.clone()))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// One line per ordered pair: `src->dst: label (loss dB); ...`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for ((src, dst), routes) in &self.entries {
            let list: Vec<String> = routes
                .iter()
                .map(|(r, loss)| format!("{} ({loss:.3} dB)", r.label()))
                .collect();
            out.push_str(&format!("{src}->{dst}: {}\n", list.join("; ")));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LinkEvent {
    RemoveSpan(SpanId),
    AddSpan(SpanConfig),
    None,
}

/// Work the event engine must schedule on the controller's behalf. The
/// generation tag lets stale callbacks from a replaced session be dropped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Directive {
    Establish { conn: ConnId, generation: u64, at: f64 },
    Report { conn: ConnId, generation: u64, at: f64 },
    Rekey { conn: ConnId, generation: u64, at: f64 },
}

#[derive(Clone, Debug)]
pub struct Connection {
    pub id: ConnId,
    pub request: ConnectionRequest,
    state: ConnState,
    history: Vec<(f64, ConnState)>,
    route: Option<Route>,
    tried: BTreeSet<Route>,
    installed: Vec<CrossConnect>,
    generation: u64,
    session: Option<QkdSession>,
    tunnel: Option<Tunnel>,
    last_report: Option<KeyRateReport>,
}

impl Connection {
    pub fn state(&self) -> ConnState {
        self.state
    }

    pub fn history(&self) -> &[(f64, ConnState)] {
        &self.history
    }

    pub fn route(&self) -> Option<&Route> {
        self.route.as_ref()
    }

    /// Number of routes attempted so far.
    pub fn cursor(&self) -> usize {
        self.tried.len()
    }

    pub fn cross_connects(&self) -> &[CrossConnect] {
        &self.installed
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn session(&self) -> Option<&QkdSession> {
        self.session.as_ref()
    }

    pub fn tunnel(&self) -> Option<&Tunnel> {
        self.tunnel.as_ref()
    }

    pub fn last_report(&self) -> Option<&KeyRateReport> {
        self.last_report.as_ref()
    }

    fn set(&mut self, to: ConnState, now: f64) {
        debug_assert!(
            is_legal_transition(self.state, to),
            "illegal {:?} -> {:?}",
            self.state,
            to
        );
        self.state = to;
        self.history.push((now, to));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub timestamp_s: f64,
    pub conn_id: Option<ConnId>,
    pub event: String,
    pub route: String,
    pub qber_pct: Option<f64>,
    pub skr_bps: Option<f64>,
    pub action: String,
}

pub fn write_log_csv<W: Write>(records: &[LogRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestamp_s", "conn_id", "event", "route", "qber_pct", "skr_bps", "action"])?;
    for r in records {
        w.write_record([
            format!("{:.3}", r.timestamp_s),
            r.conn_id.map(|c| c.to_string()).unwrap_or_default(),
            r.event.clone(),
            r.route.clone(),
            r.qber_pct.map(|q| format!("{q:.4}")).unwrap_or_default(),
            r.skr_bps.map(|s| format!("{s:.3}")).unwrap_or_default(),
            r.action.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub max_hops: usize,
    pub qber_threshold_pct: f64,
    pub rekey_interval_s: f64,
    pub report_interval_s: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            max_hops: DEFAULT_MAX_HOPS,
            qber_threshold_pct: QBER_ABORT_THRESHOLD_PCT,
            rekey_interval_s: DEFAULT_REKEY_INTERVAL_S,
            report_interval_s: REPORT_INTERVAL_S,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Controller {
    topology: Topology,
    table: RouteTable,
    config: ControllerConfig,
    connections: BTreeMap<ConnId, Connection>,
    ports: BTreeMap<(NodeId, String), ConnId>,
    kms: Kms,
    log: Vec<LogRecord>,
    next_id: ConnId,
    seed: u64,
}

fn session_seed(seed: u64, conn: ConnId, generation: u64) -> u64 {
    seed ^ conn.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ generation.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

impl Controller {
    pub fn new(topology: Topology, config: ControllerConfig, seed: u64) -> Result<Self, TopologyError> {
        let table = RouteTable::build(&topology, config.max_hops)?;
        Ok(Self {
            topology,
            table,
            config,
            connections: BTreeMap::new(),
            ports: BTreeMap::new(),
            kms: Kms::new(seed),
            log: Vec::new(),
            next_id: 1,
            seed,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn route_table(&self) -> &RouteTable {
        &self.table
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn kms(&self) -> &Kms {
        &self.kms
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn connection(&self, id: ConnId) -> Option<&Connection> {
        self.connections.get(&id)
    }

    pub fn connections(&self) -> impl Iterator<Item = &Connection> {
        self.connections.values()
    }

    /// Held OXC ports and their owners.
    pub fn ports(&self) -> &BTreeMap<(NodeId, String), ConnId> {
        &self.ports
    }

    fn note(&mut self, now: f64, conn: Option<ConnId>, event: &str, route: &str, action: &str) {
        self.log.push(LogRecord {
            timestamp_s: now,
            conn_id: conn,
            event: event.to_string(),
            route: route.to_string(),
            qber_pct: None,
            skr_bps: None,
            action: action.to_string(),
        });
    }

    fn conn_mut(&mut self, id: ConnId) -> Result<&mut Connection, ControllerError> {
        self.connections
            .get_mut(&id)
            .ok_or(ControllerError::UnknownConnection(id))
    }

    /// Cross-connect commands for `route`: one per visited node, joining
    /// the local terminal port or the incoming span to the outgoing one.
    pub fn cross_connects_for(route: &Route, kind: RequestKind) -> Vec<CrossConnect> {
        let (src_port, dst_port) = if kind.is_quantum() {
            ("alice", "bob")
        } else {
            ("trx", "trx")
        };
        let nodes = route.nodes();
        let spans = route.spans();
        if route.is_back_to_back() {
            return vec![CrossConnect {
                node: nodes[0].clone(),
                in_port: src_port.into(),
                out_port: dst_port.into(),
            }];
        }
        nodes
            .iter()
            .enumerate()
            .map(|(i, node)| CrossConnect {
                node: node.clone(),
                in_port: if i == 0 { src_port.into() } else { spans[i - 1].to_string() },
                out_port: if i + 1 == nodes.len() {
                    dst_port.into()
                } else {
                    spans[i].to_string()
                },
            })
            .collect()
    }

    /// Claims every port of `route` for `conn`. Re-installing a route the
    /// connection already holds is a no-op.
    pub fn install_path(&mut self, conn: ConnId, route: &Route) -> Result<Vec<CrossConnect>, ControllerError> {
        let kind = self
            .connections
            .get(&conn)
            .ok_or(ControllerError::UnknownConnection(conn))?
            .request
            .kind;
        let commands = Self::cross_connects_for(route, kind);
        for xc in &commands {
            for port in [&xc.in_port, &xc.out_port] {
                if let Some(&holder) = self.ports.get(&(xc.node.clone(), port.clone())) {
                    if holder != conn {
                        return Err(ControllerError::PortConflict {
                            node: xc.node.clone(),
                            port: port.clone(),
                            holder,
                        });
                    }
                }
            }
        }
        for xc in &commands {
            for port in [&xc.in_port, &xc.out_port] {
                self.ports.insert((xc.node.clone(), port.clone()), conn);
            }
        }
        self.conn_mut(conn)?.installed = commands.clone();
        Ok(commands)
    }

    fn release_ports(&mut self, conn: ConnId) {
        self.ports.retain(|_, holder| *holder != conn);
        if let Some(c) = self.connections.get_mut(&conn) {
            c.installed.clear();
        }
    }

    /// First route of the current table for this connection's pair that it
    /// has not tried yet.
    pub fn next_route(&self, conn: ConnId) -> Result<Option<Route>, ControllerError> {
        let c = self
            .connections
            .get(&conn)
            .ok_or(ControllerError::UnknownConnection(conn))?;
        Ok(self
            .table
            .routes(&c.request.src, &c.request.dst)
            .iter()
            .map(|(r, _)| r)
            .find(|r| !c.tried.contains(*r))
            .cloned())
    }

    fn ensure_terminals(&self, request: &ConnectionRequest) -> Result<(), ControllerError> {
        if !request.kind.is_quantum() {
            return Ok(());
        }
        self.kms
            .check_terminals(&self.topology, &request.src, &request.dst)
            .map(|_| ())
            .map_err(ControllerError::DeviceBusy)
    }

    /// Tries routes in table order until one installs; returns false when
    /// the list is exhausted.
    fn select_and_install(&mut self, conn: ConnId, now: f64) -> Result<bool, ControllerError> {
        while let Some(route) = self.next_route(conn)? {
            let label = route.label();
            {
                let c = self.conn_mut(conn)?;
                c.tried.insert(route.clone());
                c.route = Some(route.clone());
                if c.state != ConnState::RouteSelected {
                    c.set(ConnState::RouteSelected, now);
                }
            }
            self.note(now, Some(conn), "route_selected", &label, "");
            match self.install_path(conn, &route) {
                Ok(cmds) => {
                    let list: Vec<String> = cmds.iter().map(ToString::to_string).collect();
                    self.conn_mut(conn)?.set(ConnState::PathInstalled, now);
                    self.note(now, Some(conn), "path_installed", &label, &list.join(" "));
                    return Ok(true);
                }
                Err(ControllerError::PortConflict { node, port, holder }) => {
                    self.note(
                        now,
                        Some(conn),
                        "port_conflict",
                        &label,
                        &format!("{node}:{port} held by {holder}"),
                    );
                }
                Err(e) => return Err(e),
            }
        }
        Ok(false)
    }

    fn fail(&mut self, conn: ConnId, now: f64, reason: &str) -> Result<(), ControllerError> {
        self.release_ports(conn);
        let c = self.conn_mut(conn)?;
        c.route = None;
        c.set(ConnState::Failed, now);
        self.note(now, Some(conn), "failed", "", reason);
        Ok(())
    }

    fn start_session(&mut self, conn: ConnId, now: f64) -> Result<Vec<Directive>, ControllerError> {
        let (route, generation) = {
            let c = self.conn_mut(conn)?;
            c.generation += 1;
            (c.route.clone().expect("installed route"), c.generation)
        };
        let seed = session_seed(self.seed, conn, generation);
        let session = self
            .kms
            .session_start(&self.topology, &route, seed, now)
            .map_err(ControllerError::DeviceBusy)?;
        let at = session.generating_at();
        let label = route.label();
        let c = self.conn_mut(conn)?;
        c.session = Some(session);
        c.set(ConnState::QkdStarting, now);
        self.note(now, Some(conn), "qkd_starting", &label, &format!("generating_at={at:.3}"));
        Ok(vec![Directive::Establish { conn, generation, at }])
    }

    /// Admits a request: picks the cheapest installable route, installs it
    /// and, for quantum kinds, starts the QKD session.
    pub fn handle_request(
        &mut self,
        request: ConnectionRequest,
        now: f64,
    ) -> Result<(ConnId, Vec<Directive>), ControllerError> {
        if request.src == request.dst {
            return Err(ControllerError::InvalidRequest("source equals destination".into()));
        }
        self.topology.node(&request.src)?;
        self.topology.node(&request.dst)?;
        self.ensure_terminals(&request)?;

        let id = self.next_id;
        self.next_id += 1;
        let kind = request.kind;
        let pair = format!("{}->{}", request.src, request.dst);
        self.connections.insert(
            id,
            Connection {
                id,
                request,
                state: ConnState::RouteSelected,
                history: vec![(now, ConnState::RouteSelected)],
                route: None,
                tried: BTreeSet::new(),
                installed: Vec::new(),
                generation: 0,
                session: None,
                tunnel: None,
                last_report: None,
            },
        );
        self.note(now, Some(id), "request", &pair, &format!("{kind:?}"));

        if !self.select_and_install(id, now)? {
            self.fail(id, now, "no_route")?;
            return Ok((id, Vec::new()));
        }
        if !kind.is_quantum() {
            return Ok((id, Vec::new()));
        }
        let directives = self.start_session(id, now)?;
        Ok((id, directives))
    }

    /// Warm-up finished: the session starts generating and monitoring begins.
    pub fn on_session_established(
        &mut self,
        conn: ConnId,
        generation: u64,
        now: f64,
    ) -> Result<Vec<Directive>, ControllerError> {
        let interval = self.config.report_interval_s;
        let c = self.conn_mut(conn)?;
        if c.generation != generation || c.state != ConnState::QkdStarting {
            return Ok(Vec::new());
        }
        let session = c.session.as_mut().expect("session while starting");
        session.establish(now).expect("establishing session");
        c.set(ConnState::Monitoring, now);
        let label = c.route.as_ref().map(Route::label).unwrap_or_default();
        self.note(now, Some(conn), "session_generating", &label, "");
        Ok(vec![Directive::Report {
            conn,
            generation,
            at: now + interval,
        }])
    }

    fn stop_resources(&mut self, conn: ConnId, abort: bool) {
        let c = self.connections.get_mut(&conn).expect("known connection");
        let pair = c.session.as_ref().map(|s| s.pair_id.clone());
        if let Some(s) = c.session.as_mut() {
            if matches!(s.state(), SessionState::Establishing | SessionState::Generating) {
                let _ = if abort { s.abort() } else { s.stop() };
            }
        }
        if let Some(t) = c.tunnel.as_mut() {
            t.close();
        }
        if let Some(pair) = pair {
            self.kms.release(&pair);
        }
    }

    /// Feeds one monitoring observation to the connection.
    ///
    /// A report whose generation does not match the live session is
    /// ignored and returns `Ok(None)`.
    pub fn on_qkd_report(
        &mut self,
        conn: ConnId,
        generation: u64,
        observation: Observation,
        now: f64,
    ) -> Result<Option<(ReportAction, Vec<Directive>)>, ControllerError> {
        let threshold = self.config.qber_threshold_pct;
        let interval = self.config.report_interval_s;
        let rekey = self.config.rekey_interval_s;
        let c = self
            .connections
            .get(&conn)
            .ok_or(ControllerError::UnknownConnection(conn))?;
        if !matches!(
            c.state,
            ConnState::QkdStarting | ConnState::Monitoring | ConnState::EncryptionActive
        ) {
            return Err(ControllerError::StaleReport(conn, c.state));
        }
        if c.generation != generation {
            return Ok(None);
        }
        let pair = c.session.as_ref().expect("session").pair_id.clone();
        let label = c.route.as_ref().map(Route::label).unwrap_or_default();

        let store = self.kms.store_mut(&pair, now);
        let c = self.connections.get_mut(&conn).expect("checked");
        if c.state == ConnState::QkdStarting {
            c.session.as_mut().expect("session").establish(now).ok();
            c.set(ConnState::Monitoring, now);
        }
        let report = c.session.as_mut().expect("session").deliver(observation, store, now);
        c.last_report = Some(report);

        let action = if observation.qber_pct < threshold {
            if c.state == ConnState::Monitoring {
                let tunnel = Tunnel::open(pair, rekey, store, now);
                c.tunnel = Some(tunnel);
                c.set(ConnState::EncryptionActive, now);
                ReportAction::Accept
            } else {
                ReportAction::Continue
            }
        } else {
            c.set(ConnState::Rerouting, now);
            ReportAction::Reroute
        };
        self.log.push(LogRecord {
            timestamp_s: now,
            conn_id: Some(conn),
            event: "qkd_report".into(),
            route: label.clone(),
            qber_pct: Some(observation.qber_pct),
            skr_bps: Some(observation.skr_bps),
            action: action.as_str().into(),
        });

        match action {
            ReportAction::Accept => {
                let state = self.connections[&conn].tunnel.as_ref().map(Tunnel::state);
                self.note(now, Some(conn), "tunnel_open", &label, &format!("{state:?}"));
                Ok(Some((
                    action,
                    vec![
                        Directive::Report { conn, generation, at: now + interval },
                        Directive::Rekey { conn, generation, at: now + rekey },
                    ],
                )))
            }
            ReportAction::Continue => Ok(Some((
                action,
                vec![Directive::Report { conn, generation, at: now + interval }],
            ))),
            _ => {
                self.stop_resources(conn, true);
                self.release_ports(conn);
                self.note(now, Some(conn), "rerouting", &label, "session_aborted");
                if self.select_and_install(conn, now)? {
                    let d = self.start_session(conn, now)?;
                    Ok(Some((ReportAction::Reroute, d)))
                } else {
                    self.fail(conn, now, "routes_exhausted")?;
                    Ok(Some((ReportAction::Fail, Vec::new())))
                }
            }
        }
    }

    /// Performs due rekeys of the connection's tunnel.
    pub fn on_rekey(&mut self, conn: ConnId, generation: u64, now: f64) -> Result<Vec<Directive>, ControllerError> {
        let c = self.conn_mut(conn)?;
        if c.generation != generation || c.state != ConnState::EncryptionActive {
            return Ok(Vec::new());
        }
        let Some(tunnel) = c.tunnel.as_ref() else {
            return Ok(Vec::new());
        };
        let pair = tunnel.pair_id.clone();
        let before = tunnel.state();
        let label = c.route.as_ref().map(Route::label).unwrap_or_default();
        let store = self.kms.store_mut(&pair, now);
        let c = self.connections.get_mut(&conn).expect("checked");
        let tunnel = c.tunnel.as_mut().expect("checked");
        let after = tunnel.tick(store, now);
        let next = tunnel.next_rekey_at();
        if after != before {
            let event = match after {
                TunnelState::Starved => "tunnel_starved",
                TunnelState::Open => "tunnel_recovered",
                TunnelState::Closed => "tunnel_closed",
            };
            self.note(now, Some(conn), event, &label, "");
        }
        Ok(vec![Directive::Rekey { conn, generation, at: next }])
    }

    /// Releases everything the connection holds. Tearing down twice only
    /// logs a warning.
    pub fn teardown(&mut self, conn: ConnId, now: f64) -> Result<ConnState, ControllerError> {
        let state = self.conn_mut(conn)?.state;
        if state == ConnState::TornDown {
            self.note(now, Some(conn), "teardown", "", "warning_already_torn_down");
            return Ok(state);
        }
        self.stop_resources(conn, false);
        self.release_ports(conn);
        let c = self.conn_mut(conn)?;
        c.generation += 1;
        let label = c.route.as_ref().map(Route::label).unwrap_or_default();
        c.set(ConnState::TornDown, now);
        self.note(now, Some(conn), "teardown", &label, "released");
        Ok(ConnState::TornDown)
    }

    /// Applies a link change and recomputes every route list. Active
    /// connections keep their current route.
    pub fn update_route_table(&mut self, event: &LinkEvent, now: f64) -> Result<(), ControllerError> {
        let (topology, desc) = match event {
            LinkEvent::RemoveSpan(id) => (self.topology.without_span(id)?, format!("remove {id}")),
            LinkEvent::AddSpan(span) => (self.topology.with_span(span.clone())?, "add span".to_string()),
            LinkEvent::None => (self.topology.clone(), "none".to_string()),
        };
        self.table = RouteTable::build(&topology, self.config.max_hops)?;
        self.topology = topology;
        self.note(now, None, "route_table_updated", "", &desc);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::kms::PairId;

    fn controller() -> Controller {
        Controller::new(fixtures::lab_topology(), ControllerConfig::default(), 42).unwrap()
    }

    fn quantum(src: &str, dst: &str) -> ConnectionRequest {
        ConnectionRequest {
            src: src.into(),
            dst: dst.into(),
            kind: RequestKind::QuantumSecured,
            plan: None,
        }
    }

    fn obs(q: f64) -> Observation {
        Observation { qber_pct: q, skr_bps: if q < 6.0 { 1500.0 } else { 0.0 } }
    }

    fn established(ctl: &mut Controller, src: &str, dst: &str) -> (ConnId, u64, f64) {
        let (id, d) = ctl.handle_request(quantum(src, dst), 0.0).unwrap();
        let Directive::Establish { generation, at, .. } = d[0] else { panic!() };
        ctl.on_session_established(id, generation, at).unwrap();
        (id, generation, at)
    }

    #[test]
    fn table_sorted_by_loss() {
        let ctl = controller();
        for (_, routes) in &ctl.table.entries {
            assert!(routes.windows(2).all(|w| w[0].1 <= w[1].1));
        }
    }

    #[test]
    fn quantum_request_on_direct_link() {
        let mut ctl = controller();
        let (id, d) = ctl.handle_request(quantum("N2", "N1"), 0.0).unwrap();
        let c = ctl.connection(id).unwrap();
        assert_eq!(c.route().unwrap().label(), "L1");
        assert_eq!(c.cross_connects().len(), 2);
        assert_eq!(c.state(), ConnState::QkdStarting);
        assert_eq!(c.session().unwrap().pair_id, PairId::new("N2", "N1"));
        assert!(matches!(d[0], Directive::Establish { .. }));
    }

    #[test]
    fn classical_request_stops_at_path() {
        let mut ctl = controller();
        let req = ConnectionRequest {
            kind: RequestKind::ClassicalOnly,
            ..quantum("N4", "N2")
        };
        let (id, d) = ctl.handle_request(req, 0.0).unwrap();
        assert!(d.is_empty());
        let c = ctl.connection(id).unwrap();
        assert_eq!(c.state(), ConnState::PathInstalled);
        assert!(c.session().is_none());
    }

    #[test]
    fn disconnected_pair_fails() {
        let mut topo = fixtures::lab_topology().to_config();
        topo.spans.retain(|s| s.a.as_str() != "N4" && s.b.as_str() != "N4");
        let topo = Topology::from_config(topo).unwrap();
        let mut ctl = Controller::new(topo, ControllerConfig::default(), 1).unwrap();
        let (id, _) = ctl.handle_request(quantum("N2", "N4"), 0.0).unwrap();
        assert_eq!(ctl.connection(id).unwrap().state(), ConnState::Failed);
    }

    #[test]
    fn first_good_report_opens_tunnel() {
        let mut ctl = controller();
        let (id, g, at) = established(&mut ctl, "N2", "N1");
        let (action, _) = ctl.on_qkd_report(id, g, obs(1.31), at + 120.0).unwrap().unwrap();
        assert_eq!(action, ReportAction::Accept);
        let c = ctl.connection(id).unwrap();
        assert_eq!(c.state(), ConnState::EncryptionActive);
        assert!(c.tunnel().is_some());
        let (action, _) = ctl.on_qkd_report(id, g, obs(1.4), at + 240.0).unwrap().unwrap();
        assert_eq!(action, ReportAction::Continue);
    }

    #[test]
    fn violation_reroutes_in_same_tick() {
        let mut ctl = controller();
        let (id, g, at) = established(&mut ctl, "N2", "N1");
        let t = at + 120.0;
        let (action, d) = ctl.on_qkd_report(id, g, obs(6.5), t).unwrap().unwrap();
        assert_eq!(action, ReportAction::Reroute);
        let c = ctl.connection(id).unwrap();
        assert_eq!(c.state(), ConnState::QkdStarting);
        assert_ne!(c.route().unwrap().label(), "L1");
        assert!(c.history().iter().any(|&(ts, s)| ts == t && s == ConnState::Rerouting));
        assert!(matches!(d[0], Directive::Establish { generation: 2, .. }));
        // reports from the replaced session are dropped
        assert!(ctl.on_qkd_report(id, g, obs(1.0), t).unwrap().is_none());
    }

    #[test]
    fn reroute_prefers_next_cheapest() {
        let mut ctl = controller();
        let (id, g, at) = established(&mut ctl, "N1", "N3");
        let first = ctl.connection(id).unwrap().route().unwrap().clone();
        let expected = ctl.route_table().routes(&"N1".into(), &"N3".into())[1].0.clone();
        ctl.on_qkd_report(id, g, obs(7.0), at + 120.0).unwrap();
        let c = ctl.connection(id).unwrap();
        assert_ne!(c.route().unwrap(), &first);
        assert_eq!(c.route().unwrap(), &expected);
        assert_eq!(c.cursor(), 2);
    }

    #[test]
    fn exhaustion_fails() {
        let mut ctl = controller();
        let (id, _, _) = established(&mut ctl, "N2", "N1");
        let n = ctl.route_table().routes(&"N2".into(), &"N1".into()).len();
        let mut now = 1000.0;
        for _ in 0..n {
            let c = ctl.connection(id).unwrap();
            let g = c.generation();
            if c.state() == ConnState::QkdStarting {
                ctl.on_session_established(id, g, now).unwrap();
            }
            now += 120.0;
            ctl.on_qkd_report(id, g, obs(9.0), now).unwrap();
        }
        assert_eq!(ctl.connection(id).unwrap().state(), ConnState::Failed);
        assert!(ctl.ports().is_empty());
    }

    #[test]
    fn cross_connects_per_node() {
        let ctl = controller();
        let r = ctl.topology().named_route("L1+L2").unwrap();
        let cmds = Controller::cross_connects_for(&r, RequestKind::QuantumSecured);
        assert_eq!(cmds.len(), 3);
        assert_eq!(cmds[1].in_port, "L1");
        assert_eq!(cmds[1].out_port, "L2");
    }

    #[test]
    fn reinstall_is_idempotent_and_conflicts_detected() {
        let mut ctl = controller();
        let req = ConnectionRequest { kind: RequestKind::ClassicalOnly, ..quantum("N2", "N1") };
        let (a, _) = ctl.handle_request(req.clone(), 0.0).unwrap();
        let route = ctl.connection(a).unwrap().route().unwrap().clone();
        let first = ctl.install_path(a, &route).unwrap();
        assert_eq!(ctl.install_path(a, &route).unwrap(), first);
        let other = ConnectionRequest { kind: RequestKind::ClassicalOnly, ..quantum("N3", "N1") };
        let (b, _) = ctl.handle_request(other, 0.0).unwrap();
        assert!(matches!(
            ctl.install_path(b, &route),
            Err(ControllerError::PortConflict { .. })
        ));
    }

    #[test]
    fn busy_terminal_is_rejected() {
        let mut ctl = controller();
        ctl.handle_request(quantum("N2", "N1"), 0.0).unwrap();
        assert!(matches!(
            ctl.handle_request(quantum("N2", "N3"), 0.0),
            Err(ControllerError::DeviceBusy(_))
        ));
        assert!(matches!(
            ctl.handle_request(quantum("N2", "N4"), 0.0).map(|_| ()),
            Err(ControllerError::DeviceBusy(_))
        ));
    }

    #[test]
    fn teardown_frees_ports_for_reuse() {
        let mut ctl = controller();
        let (id, _, _) = established(&mut ctl, "N2", "N1");
        assert_eq!(ctl.teardown(id, 2000.0).unwrap(), ConnState::TornDown);
        assert!(ctl.ports().is_empty());
        assert_eq!(ctl.teardown(id, 2001.0).unwrap(), ConnState::TornDown);
        assert!(ctl.log().last().unwrap().action.starts_with("warning"));
        let (again, _) = ctl.handle_request(quantum("N2", "N1"), 2002.0).unwrap();
        assert_eq!(ctl.connection(again).unwrap().route().unwrap().label(), "L1");
        assert!(matches!(
            ctl.on_qkd_report(id, 1, obs(1.0), 2003.0),
            Err(ControllerError::StaleReport(..))
        ));
    }

    #[test]
    fn route_table_updates() {
        let mut ctl = controller();
        let before = ctl.route_table().clone();
        ctl.update_route_table(&LinkEvent::None, 0.0).unwrap();
        assert_eq!(ctl.route_table(), &before);

        ctl.update_route_table(&LinkEvent::RemoveSpan("L1".into()), 0.0).unwrap();
        assert!(ctl
            .route_table()
            .routes(&"N2".into(), &"N1".into())
            .iter()
            .all(|(r, _)| r.label() != "L1"));

        let span: SpanConfig = serde_json::from_str(
            r#"{"id":"L7","a":"N2","b":"N1","length_km":0.1,"span_loss_db":0.1}"#,
        )
        .unwrap();
        ctl.update_route_table(&LinkEvent::AddSpan(span), 0.0).unwrap();
        let routes = ctl.route_table().routes(&"N2".into(), &"N1".into());
        assert_eq!(routes[0].0.label(), "L7");
        assert!(routes.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn legal_transition_table() {
        use ConnState::*;
        assert!(is_legal_transition(Monitoring, EncryptionActive));
        assert!(!is_legal_transition(QkdStarting, EncryptionActive));
        assert!(!is_legal_transition(Failed, RouteSelected));
        assert!(!is_legal_transition(TornDown, TornDown));
        assert!(is_legal_transition(Failed, TornDown));
    }
}

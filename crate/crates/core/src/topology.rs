//! Physical network model: nodes with optical cross-connects (OXCs), fibre
//! spans and QKD terminals.
//!
//! Losses are composed component-wise: a route costs the Alice-side terminal
//! insertion, the Bob-side terminal insertion, every span it crosses and one
//! cross-connection per node it visits. Multi-hop budgets therefore follow
//! from the single-hop components instead of being summed end-to-end.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Attenuation used for spans that carry no measured loss.
pub const DEFAULT_ATTENUATION_DB_PER_KM: f64 = 0.2;

/// Default hop limit for route enumeration.
pub const DEFAULT_MAX_HOPS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpanId(String);

impl SpanId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SpanId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SpanId {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Device {
    AliceTerminal,
    BobTerminal,
    Transponder,
}

/// A switching node. Terminal losses lump every fixed insertion between the
/// QKD device and the OXC port (couplers, filter pass port, connectors).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    pub oxc_loss_db: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_tx_loss_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_rx_loss_db: Option<f64>,
    #[serde(default)]
    pub devices: Vec<Device>,
    /// Itemized component losses kept for documentation only.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub itemized_db: BTreeMap<String, f64>,
}

impl NodeSpec {
    pub fn has(&self, device: Device) -> bool {
        self.devices.contains(&device)
    }

    pub fn tx_loss_db(&self) -> f64 {
        self.terminal_tx_loss_db.unwrap_or(0.0)
    }

    pub fn rx_loss_db(&self) -> f64 {
        self.terminal_rx_loss_db.unwrap_or(0.0)
    }
}

/// Span as it appears in a topology file. The id defaults to `a-b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<SpanId>,
    pub a: NodeId,
    pub b: NodeId,
    pub length_km: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span_loss_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attenuation_db_per_km: Option<f64>,
}

impl SpanConfig {
    fn resolved_id(&self) -> SpanId {
        self.id
            .clone()
            .unwrap_or_else(|| SpanId::new(format!("{}-{}", self.a, self.b)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FibreSpan {
    pub id: SpanId,
    pub a: NodeId,
    pub b: NodeId,
    pub length_km: f64,
    pub span_loss_db: Option<f64>,
    pub attenuation_db_per_km: f64,
}

impl FibreSpan {
    /// Measured loss when present, otherwise length times attenuation.
    pub fn loss_db(&self) -> f64 {
        self.span_loss_db
            .unwrap_or(self.length_km * self.attenuation_db_per_km)
    }

    /// A span whose both ends sit on the same node (back-to-back patch).
    pub fn is_loopback(&self) -> bool {
        self.a == self.b
    }

    pub fn other_end(&self, node: &NodeId) -> Option<&NodeId> {
        if &self.a == node {
            Some(&self.b)
        } else if &self.b == node {
            Some(&self.a)
        } else {
            None
        }
    }

    fn touches(&self, node: &NodeId) -> bool {
        &self.a == node || &self.b == node
    }
}

impl From<SpanConfig> for FibreSpan {
    fn from(cfg: SpanConfig) -> Self {
        Self {
            id: cfg.resolved_id(),
            a: cfg.a,
            b: cfg.b,
            length_km: cfg.length_km,
            span_loss_db: cfg.span_loss_db,
            attenuation_db_per_km: cfg
                .attenuation_db_per_km
                .unwrap_or(DEFAULT_ATTENUATION_DB_PER_KM),
        }
    }
}

impl From<&FibreSpan> for SpanConfig {
    fn from(span: &FibreSpan) -> Self {
        Self {
            id: Some(span.id.clone()),
            a: span.a.clone(),
            b: span.b.clone(),
            length_km: span.length_km,
            span_loss_db: span.span_loss_db,
            attenuation_db_per_km: Some(span.attenuation_db_per_km),
        }
    }
}

/// Raw topology file contents, before validation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TopologyConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub spans: Vec<SpanConfig>,
}

impl TopologyConfig {
    pub fn parse(text: &str) -> Result<Self, TopologyError> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub severity: Severity,
    /// The offending node or span id (or `topology` for global problems).
    pub element: String,
    pub message: String,
}

impl Violation {
    fn error(element: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Error,
            element: element.into(),
            message: message.into(),
        }
    }

    fn warning(element: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Warning,
            element: element.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{tag}: {}: {}", self.element, self.message)
    }
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("malformed topology: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid topology ({} violation(s)): {}", .0.len(), .0.first().map(|v| v.to_string()).unwrap_or_default())]
    Validation(Vec<Violation>),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown span {0}")]
    UnknownSpan(SpanId),
    #[error("no route between {src} and {dst}")]
    NoRoute { src: NodeId, dst: NodeId },
    #[error("invalid route: {0}")]
    InvalidRoute(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

fn bad_number(x: f64) -> bool {
    !x.is_finite() || x < 0.0
}

/// Checks every schema invariant. The result is empty iff the config is
/// fully valid; warnings flag incomplete but usable descriptions.
pub fn validate(config: &TopologyConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    if config.nodes.is_empty() {
        out.push(Violation::error("topology", "node list is empty"));
    }

    let mut node_ids = BTreeSet::new();
    for node in &config.nodes {
        let id = node.id.as_str();
        if !node_ids.insert(node.id.clone()) {
            out.push(Violation::error(id, "duplicate node id"));
        }
        if bad_number(node.oxc_loss_db) {
            out.push(Violation::error(id, "oxc_loss_db must be a non-negative number"));
        }
        if node.terminal_tx_loss_db.is_some_and(bad_number) {
            out.push(Violation::error(id, "terminal_tx_loss_db must be non-negative"));
        }
        if node.terminal_rx_loss_db.is_some_and(bad_number) {
            out.push(Violation::error(id, "terminal_rx_loss_db must be non-negative"));
        }
        if node.has(Device::BobTerminal) && node.terminal_rx_loss_db.is_none() {
            out.push(Violation::warning(
                id,
                "Bob terminal without terminal_rx_loss_db (filter pass port not declared)",
            ));
        }
        if node.has(Device::AliceTerminal) && node.terminal_tx_loss_db.is_none() {
            out.push(Violation::warning(
                id,
                "Alice terminal without terminal_tx_loss_db",
            ));
        }
    }

    let mut span_ids = BTreeSet::new();
    for span in &config.spans {
        let id = span.resolved_id();
        let name = id.as_str().to_owned();
        if !span_ids.insert(id) {
            out.push(Violation::error(&name, "duplicate span id"));
        }
        for end in [&span.a, &span.b] {
            if !node_ids.contains(end) {
                out.push(Violation::error(
                    &name,
                    format!("span references unknown node {end}"),
                ));
            }
        }
        if bad_number(span.length_km) {
            out.push(Violation::error(&name, "length_km must be non-negative"));
        }
        if span.span_loss_db.is_some_and(bad_number) {
            out.push(Violation::error(&name, "span_loss_db must be non-negative"));
        }
        if span.attenuation_db_per_km.is_some_and(bad_number) {
            out.push(Violation::error(
                &name,
                "attenuation_db_per_km must be non-negative",
            ));
        }
    }
    out
}

/// Validated, immutable network description.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    name: Option<String>,
    nodes: Vec<NodeSpec>,
    spans: Vec<FibreSpan>,
    node_index: BTreeMap<NodeId, usize>,
    span_index: BTreeMap<SpanId, usize>,
}

/// Parses and validates a JSON topology description.
pub fn load_topology(text: &str) -> Result<Topology, TopologyError> {
    Topology::from_config(TopologyConfig::parse(text)?)
}

impl Topology {
    pub fn from_config(config: TopologyConfig) -> Result<Self, TopologyError> {
        let errors: Vec<_> = validate(&config)
            .into_iter()
            .filter(|v| v.severity == Severity::Error)
            .collect();
        if !errors.is_empty() {
            return Err(TopologyError::Validation(errors));
        }
        let spans: Vec<FibreSpan> = config.spans.into_iter().map(FibreSpan::from).collect();
        let node_index = config
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.clone(), i))
            .collect();
        let span_index = spans
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect();
        Ok(Self {
            name: config.name,
            nodes: config.nodes,
            spans,
            node_index,
            span_index,
        })
    }

    pub fn to_config(&self) -> TopologyConfig {
        TopologyConfig {
            name: self.name.clone(),
            nodes: self.nodes.clone(),
            spans: self.spans.iter().map(SpanConfig::from).collect(),
        }
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn spans(&self) -> &[FibreSpan] {
        &self.spans
    }

    pub fn node(&self, id: &NodeId) -> Result<&NodeSpec, TopologyError> {
        self.node_index
            .get(id)
            .map(|&i| &self.nodes[i])
            .ok_or_else(|| TopologyError::UnknownNode(id.clone()))
    }

    pub fn span(&self, id: &SpanId) -> Result<&FibreSpan, TopologyError> {
        self.span_index
            .get(id)
            .map(|&i| &self.spans[i])
            .ok_or_else(|| TopologyError::UnknownSpan(id.clone()))
    }

    /// Copy of this topology without the given span.
    pub fn without_span(&self, id: &SpanId) -> Result<Self, TopologyError> {
        self.span(id)?;
        let mut config = self.to_config();
        config.spans.retain(|s| s.id.as_ref() != Some(id));
        Self::from_config(config)
    }

    /// Copy of this topology with one more span.
    pub fn with_span(&self, span: SpanConfig) -> Result<Self, TopologyError> {
        let mut config = self.to_config();
        config.spans.push(span);
        Self::from_config(config)
    }

    /// Builds a route from an explicit node walk and the spans joining
    /// consecutive nodes.
    pub fn route_through(&self, nodes: &[NodeId], spans: &[SpanId]) -> Result<Route, TopologyError> {
        if nodes.is_empty() {
            return Err(TopologyError::InvalidRoute("empty node list".into()));
        }
        for n in nodes {
            self.node(n)?;
        }
        if nodes.len() == 1 && spans.len() == 1 {
            let span = self.span(&spans[0])?;
            if !(span.is_loopback() && span.a == nodes[0]) {
                return Err(TopologyError::InvalidRoute(format!(
                    "single-node route needs a loopback span at {}",
                    nodes[0]
                )));
            }
            return Ok(Route {
                nodes: nodes.to_vec(),
                spans: spans.to_vec(),
                n_cross_connects: 1,
            });
        }
        if spans.len() + 1 != nodes.len() {
            return Err(TopologyError::InvalidRoute(format!(
                "{} nodes cannot be joined by {} spans",
                nodes.len(),
                spans.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for n in nodes {
            if !seen.insert(n) {
                return Err(TopologyError::InvalidRoute(format!("node {n} visited twice")));
            }
        }
        for (pair, sid) in nodes.windows(2).zip(spans) {
            let span = self.span(sid)?;
            if span.other_end(&pair[0]) != Some(&pair[1]) {
                return Err(TopologyError::InvalidRoute(format!(
                    "span {sid} does not join {} and {}",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(Route {
            nodes: nodes.to_vec(),
            spans: spans.to_vec(),
            n_cross_connects: nodes.len() as u32,
        })
    }

    /// Resolves a link label such as `L1`, `L1+L2` or a loopback span id.
    ///
    /// Spans are chained in label order. The walk starts at the end of the
    /// first span that is not shared with the second; a single span runs
    /// from `a` to `b`.
    pub fn named_route(&self, label: &str) -> Result<Route, TopologyError> {
        let ids: Vec<SpanId> = label.split('+').map(|s| SpanId::new(s.trim())).collect();
        let first = self.span(&ids[0])?;
        if first.is_loopback() {
            if ids.len() != 1 {
                return Err(TopologyError::InvalidRoute(format!(
                    "loopback span {} cannot be chained",
                    first.id
                )));
            }
            return self.route_through(std::slice::from_ref(&first.a), &ids);
        }
        let start = match ids.get(1) {
            None => first.a.clone(),
            Some(next) => {
                let next = self.span(next)?;
                if next.touches(&first.a) && !next.touches(&first.b) {
                    first.b.clone()
                } else {
                    first.a.clone()
                }
            }
        };
        let mut nodes = vec![start];
        for sid in &ids {
            let span = self.span(sid)?;
            let here = nodes.last().expect("non-empty");
            let next = span.other_end(here).ok_or_else(|| {
                TopologyError::InvalidRoute(format!("span {sid} is not contiguous in {label}"))
            })?;
            nodes.push(next.clone());
        }
        self.route_through(&nodes, &ids)
    }

    /// Ordered optical elements between the Alice-side tap and the Bob-side
    /// terminal: a cross-connection at every visited node and each span.
    pub fn path_elements(&self, route: &Route) -> Result<Vec<PathElement>, TopologyError> {
        let mut out = Vec::with_capacity(route.nodes.len() + route.spans.len());
        if route.is_back_to_back() {
            let node = self.node(&route.nodes[0])?;
            let span = self.span(&route.spans[0])?;
            out.push(PathElement::CrossConnect {
                node: node.id.clone(),
                loss_db: node.oxc_loss_db,
            });
            out.push(PathElement::Span {
                span: span.id.clone(),
                loss_db: span.loss_db(),
                length_km: span.length_km,
            });
            return Ok(out);
        }
        for (i, nid) in route.nodes.iter().enumerate() {
            let node = self.node(nid)?;
            out.push(PathElement::CrossConnect {
                node: node.id.clone(),
                loss_db: node.oxc_loss_db,
            });
            if let Some(sid) = route.spans.get(i) {
                let span = self.span(sid)?;
                out.push(PathElement::Span {
                    span: span.id.clone(),
                    loss_db: span.loss_db(),
                    length_km: span.length_km,
                });
            }
        }
        Ok(out)
    }

    /// End-to-end quantum-channel budget of a route.
    pub fn route_loss(&self, route: &Route) -> Result<f64, TopologyError> {
        let (src, dst) = route.endpoints();
        let terminals = self.node(src)?.tx_loss_db() + self.node(dst)?.rx_loss_db();
        let path: f64 = self.path_elements(route)?.iter().map(PathElement::loss_db).sum();
        Ok(terminals + path)
    }

    /// All simple paths from `src` to `dst` with at most `max_hops` spans,
    /// cheapest first. Ties break on the node sequence, then the span ids.
    pub fn enumerate_routes(
        &self,
        src: &NodeId,
        dst: &NodeId,
        max_hops: usize,
    ) -> Result<Vec<Route>, TopologyError> {
        if src == dst {
            return Err(TopologyError::InvalidRequest(
                "source and destination must differ".into(),
            ));
        }
        if max_hops == 0 {
            return Err(TopologyError::InvalidRequest("max_hops must be at least 1".into()));
        }
        self.node(src)?;
        self.node(dst)?;

        let mut adjacency: BTreeMap<&NodeId, Vec<(&SpanId, &NodeId)>> = BTreeMap::new();
        for span in self.spans.iter().filter(|s| !s.is_loopback()) {
            adjacency.entry(&span.a).or_default().push((&span.id, &span.b));
            adjacency.entry(&span.b).or_default().push((&span.id, &span.a));
        }
        for edges in adjacency.values_mut() {
            edges.sort();
        }

        let mut found = Vec::new();
        let mut nodes = vec![src.clone()];
        let mut spans = Vec::new();
        self.walk(&adjacency, dst, max_hops, &mut nodes, &mut spans, &mut found);
        if found.is_empty() {
            return Err(TopologyError::NoRoute {
                src: src.clone(),
                dst: dst.clone(),
            });
        }

        let mut keyed: Vec<(f64, Route)> = found
            .into_iter()
            .map(|r| Ok((self.route_loss(&r)?, r)))
            .collect::<Result<_, TopologyError>>()?;
        keyed.sort_by(|(la, ra), (lb, rb)| {
            la.total_cmp(lb)
                .then_with(|| ra.nodes.cmp(&rb.nodes))
                .then_with(|| ra.spans.cmp(&rb.spans))
        });
        Ok(keyed.into_iter().map(|(_, r)| r).collect())
    }

    fn walk(
        &self,
        adjacency: &BTreeMap<&NodeId, Vec<(&SpanId, &NodeId)>>,
        dst: &NodeId,
        max_hops: usize,
        nodes: &mut Vec<NodeId>,
        spans: &mut Vec<SpanId>,
        found: &mut Vec<Route>,
    ) {
        let here = nodes.last().expect("walk starts at src").clone();
        if &here == dst {
            found.push(Route {
                nodes: nodes.clone(),
                spans: spans.clone(),
                n_cross_connects: nodes.len() as u32,
            });
            return;
        }
        if spans.len() == max_hops {
            return;
        }
        for (sid, next) in adjacency.get(&here).into_iter().flatten() {
            if nodes.contains(next) {
                continue;
            }
            nodes.push((*next).clone());
            spans.push((*sid).clone());
            self.walk(adjacency, dst, max_hops, nodes, spans, found);
            nodes.pop();
            spans.pop();
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PathElement {
    CrossConnect { node: NodeId, loss_db: f64 },
    Span { span: SpanId, loss_db: f64, length_km: f64 },
}

impl PathElement {
    pub fn loss_db(&self) -> f64 {
        match self {
            PathElement::CrossConnect { loss_db, .. } | PathElement::Span { loss_db, .. } => *loss_db,
        }
    }
}

/// A walk from the Alice node to the Bob node.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Route {
    nodes: Vec<NodeId>,
    spans: Vec<SpanId>,
    n_cross_connects: u32,
}

impl Route {
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn spans(&self) -> &[SpanId] {
        &self.spans
    }

    pub fn n_cross_connects(&self) -> u32 {
        self.n_cross_connects
    }

    /// `(alice_node, bob_node)`.
    pub fn endpoints(&self) -> (&NodeId, &NodeId) {
        (&self.nodes[0], &self.nodes[self.nodes.len() - 1])
    }

    pub fn is_back_to_back(&self) -> bool {
        self.nodes.len() == 1
    }

    pub fn contains_span(&self, id: &SpanId) -> bool {
        self.spans.contains(id)
    }

    /// Span ids joined with `+`, e.g. `L1+L2`.
    pub fn label(&self) -> String {
        if self.spans.is_empty() {
            return self.nodes[0].to_string();
        }
        self.spans
            .iter()
            .map(SpanId::as_str)
            .collect::<Vec<_>>()
            .join("+")
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let path: Vec<_> = self.nodes.iter().map(NodeId::as_str).collect();
        write!(f, "{} [{}]", self.label(), path.join("-"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingMode {
    /// One QKD pair per node, any pair reachable through the switches.
    Switched,
    /// One dedicated QKD pair per node pair.
    StaticFullMesh,
}

/// Minimum number of QKD device pairs giving a direct link between every
/// pair of `n_nodes` nodes.
pub fn min_qkd_pairs(n_nodes: u64, mode: PairingMode) -> u64 {
    match mode {
        PairingMode::Switched => n_nodes,
        PairingMode::StaticFullMesh => n_nodes * n_nodes.saturating_sub(1) / 2,
    }
}

/// One measured end-to-end budget: the spans it crosses and how many
/// cross-connections it traverses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasuredBudget {
    pub label: String,
    pub components: Vec<String>,
    pub n_oxc: u32,
    pub budget_db: f64,
}

impl MeasuredBudget {
    /// Components are taken from a `+`-separated link label.
    pub fn from_label(label: &str, n_oxc: u32, budget_db: f64) -> Self {
        Self {
            label: label.to_owned(),
            components: label.split('+').map(|s| s.trim().to_owned()).collect(),
            n_oxc,
            budget_db,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("underdetermined: {rows} row(s) of rank {rank} for {unknowns} unknown(s)")]
    Underdetermined {
        rows: usize,
        rank: usize,
        unknowns: usize,
    },
    #[error("fitted component {0} is negative ({1:.3} dB)")]
    NonPhysical(String, f64),
}

/// Least-squares split of measured budgets into a lumped terminal insertion,
/// one loss per span and a fixed per-cross-connection loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossDecomposition {
    pub terminal_total_db: f64,
    pub per_span_db: BTreeMap<String, f64>,
    pub oxc_db: f64,
    /// Reconstructed minus measured budget, per input row.
    pub residuals_db: Vec<(String, f64)>,
}

impl LossDecomposition {
    /// Budget of a route made of the given spans and cross-connect count.
    pub fn budget<S: AsRef<str>>(&self, components: &[S], n_oxc: u32) -> Option<f64> {
        let spans: Option<f64> = components
            .iter()
            .map(|c| self.per_span_db.get(c.as_ref()).copied())
            .sum();
        Some(self.terminal_total_db + spans? + f64::from(n_oxc) * self.oxc_db)
    }

    pub fn max_abs_residual(&self) -> f64 {
        self.residuals_db
            .iter()
            .map(|(_, r)| r.abs())
            .fold(0.0, f64::max)
    }
}

/// Fits the lumped terminal loss and every span loss to the measured rows,
/// holding the per-cross-connection loss at `oxc_db`.
pub fn fit_component_losses(
    rows: &[MeasuredBudget],
    oxc_db: f64,
) -> Result<LossDecomposition, FitError> {
    let names: Vec<&str> = rows
        .iter()
        .flat_map(|r| r.components.iter().map(String::as_str))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let unknowns = names.len() + 1;
    let n = rows.len();

    let mut design = DMatrix::<f64>::zeros(n, unknowns);
    let mut target = DVector::<f64>::zeros(n);
    for (i, row) in rows.iter().enumerate() {
        design[(i, 0)] = 1.0;
        for c in &row.components {
            let j = names.binary_search(&c.as_str()).expect("collected above") + 1;
            design[(i, j)] += 1.0;
        }
        target[i] = row.budget_db - f64::from(row.n_oxc) * oxc_db;
    }

    let rank = if n == 0 {
        0
    } else {
        design.rank(1e-9 * design.norm().max(1.0))
    };
    if n < unknowns || rank < unknowns {
        return Err(FitError::Underdetermined {
            rows: n,
            rank,
            unknowns,
        });
    }

    let solution = design
        .clone()
        .svd(true, true)
        .solve(&target, 1e-12)
        .expect("svd computed with both factors");

    let fitted = &design * &solution;
    let residuals_db = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (r.label.clone(), fitted[i] - target[i]))
        .collect();

    let terminal_total_db = solution[0];
    if terminal_total_db < -1e-9 {
        return Err(FitError::NonPhysical("terminal".into(), terminal_total_db));
    }
    let mut per_span_db = BTreeMap::new();
    for (j, name) in names.iter().enumerate() {
        let v = solution[j + 1];
        if v < -1e-9 {
            return Err(FitError::NonPhysical((*name).to_owned(), v));
        }
        per_span_db.insert((*name).to_owned(), v.max(0.0));
    }

    Ok(LossDecomposition {
        terminal_total_db: terminal_total_db.max(0.0),
        per_span_db,
        oxc_db,
        residuals_db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn lab() -> Topology {
        fixtures::lab_topology()
    }

    fn n(s: &str) -> NodeId {
        NodeId::new(s)
    }

    #[test]
    fn fixture_has_four_nodes_and_six_links() {
        let topo = lab();
        assert_eq!(topo.nodes().len(), 4);
        let links = topo.spans().iter().filter(|s| !s.is_loopback()).count();
        assert_eq!(links, 6);
        assert!(validate(&topo.to_config()).is_empty());
    }

    #[test]
    fn empty_node_list_is_rejected() {
        let err = load_topology(r#"{"nodes": [], "spans": []}"#).unwrap_err();
        assert!(matches!(err, TopologyError::Validation(_)));
    }

    #[test]
    fn dangling_span_is_rejected() {
        let text = r#"{"nodes":[{"id":"N1","oxc_loss_db":1.0}],
            "spans":[{"a":"N1","b":"N9","length_km":1.0}]}"#;
        match load_topology(text).unwrap_err() {
            TopologyError::Validation(v) => {
                assert_eq!(v.len(), 1);
                assert!(v[0].message.contains("N9"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_text_is_a_parse_error() {
        assert!(matches!(
            load_topology("{nodes: ").unwrap_err(),
            TopologyError::Parse(_)
        ));
    }

    #[test]
    fn negative_span_loss_names_the_span() {
        let mut cfg = lab().to_config();
        cfg.spans[1].span_loss_db = Some(-0.5);
        let v = validate(&cfg);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].element, "L1");
        assert_eq!(v[0].severity, Severity::Error);
    }

    #[test]
    fn bob_without_rx_loss_is_a_warning() {
        let mut cfg = lab().to_config();
        cfg.nodes[3].terminal_rx_loss_db = None;
        let v = validate(&cfg);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].severity, Severity::Warning);
        assert_eq!(v[0].element, "N4");
        // warnings do not block loading
        assert!(Topology::from_config(cfg).is_ok());
    }

    #[test]
    fn measured_loss_overrides_coefficient() {
        let span = FibreSpan::from(SpanConfig {
            id: None,
            a: n("A"),
            b: n("B"),
            length_km: 10.0,
            span_loss_db: Some(1.0),
            attenuation_db_per_km: None,
        });
        assert_eq!(span.id.as_str(), "A-B");
        assert_eq!(span.loss_db(), 1.0);
        let plain = FibreSpan {
            span_loss_db: None,
            ..span
        };
        assert!((plain.loss_db() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_hop_route_is_the_direct_link() {
        let routes = lab().enumerate_routes(&n("N2"), &n("N1"), 1).unwrap();
        assert_eq!(routes.len(), 1);
        assert_eq!(routes[0].label(), "L1");
        assert_eq!(routes[0].n_cross_connects(), 2);
    }

    #[test]
    fn cheaper_direct_route_comes_first() {
        let topo = lab();
        let routes = topo.enumerate_routes(&n("N1"), &n("N3"), 2).unwrap();
        let losses: Vec<f64> = routes.iter().map(|r| topo.route_loss(r).unwrap()).collect();
        assert!(losses.windows(2).all(|w| w[0] <= w[1]));
        let direct = routes.iter().position(|r| r.spans().len() == 1).unwrap();
        assert!(routes[..direct].iter().all(|r| topo.route_loss(r).unwrap() <= losses[direct]));
    }

    #[test]
    fn two_hop_route_via_n2_has_three_cross_connects() {
        let routes = lab().enumerate_routes(&n("N1"), &n("N4"), 3).unwrap();
        let via_n2 = routes
            .iter()
            .find(|r| r.nodes() == [n("N1"), n("N2"), n("N4")])
            .expect("route through N2");
        assert_eq!(via_n2.n_cross_connects(), 3);
        assert_eq!(via_n2.label(), "L1+L3");
    }

    #[test]
    fn enumeration_errors() {
        let topo = lab();
        assert!(matches!(
            topo.enumerate_routes(&n("N1"), &n("N1"), 3),
            Err(TopologyError::InvalidRequest(_))
        ));
        let isolated = topo
            .without_span(&SpanId::new("L3"))
            .unwrap()
            .without_span(&SpanId::new("L5"))
            .unwrap()
            .without_span(&SpanId::new("L6"))
            .unwrap();
        assert!(matches!(
            isolated.enumerate_routes(&n("N1"), &n("N4"), 3),
            Err(TopologyError::NoRoute { .. })
        ));
    }

    #[test]
    fn zero_loss_route_costs_nothing() {
        let text = r#"{"nodes":[{"id":"A","oxc_loss_db":0.0,"terminal_tx_loss_db":0.0},
                                {"id":"B","oxc_loss_db":0.0,"terminal_rx_loss_db":0.0}],
                       "spans":[{"a":"A","b":"B","length_km":0.0}]}"#;
        let topo = load_topology(text).unwrap();
        let r = topo.enumerate_routes(&n("A"), &n("B"), 1).unwrap();
        assert_eq!(topo.route_loss(&r[0]).unwrap(), 0.0);
    }

    #[test]
    fn composite_loss_is_component_wise() {
        let topo = lab();
        let l1 = topo.named_route("L1").unwrap();
        let l2 = topo.named_route("L2").unwrap();
        let both = topo.named_route("L1+L2").unwrap();
        let terminal = 2.0 * 1.206;
        let expect = terminal + 0.743 + 1.303 + 3.0;
        assert!((topo.route_loss(&both).unwrap() - expect).abs() < 1e-9);
        let naive = topo.route_loss(&l1).unwrap() + topo.route_loss(&l2).unwrap();
        assert!(naive > expect + 2.0);
    }

    #[test]
    fn back_to_back_route() {
        let topo = lab();
        let b2b = topo.named_route("B2B").unwrap();
        assert!(b2b.is_back_to_back());
        assert_eq!(b2b.n_cross_connects(), 1);
        assert!((topo.route_loss(&b2b).unwrap() - 4.99).abs() < 0.01);
    }

    #[test]
    fn route_through_checks_contiguity() {
        let topo = lab();
        let err = topo
            .route_through(&[n("N2"), n("N1")], &[SpanId::new("L2")])
            .unwrap_err();
        assert!(matches!(err, TopologyError::InvalidRoute(_)));
    }

    #[test]
    fn pair_counting() {
        assert_eq!(min_qkd_pairs(4, PairingMode::StaticFullMesh), 6);
        assert_eq!(min_qkd_pairs(4, PairingMode::Switched), 4);
        assert_eq!(min_qkd_pairs(1, PairingMode::Switched), 1);
        assert_eq!(min_qkd_pairs(1, PairingMode::StaticFullMesh), 0);
    }

    #[test]
    fn single_row_is_underdetermined() {
        let rows = [MeasuredBudget::from_label("L1", 2, 5.19)];
        assert!(matches!(
            fit_component_losses(&rows, 1.0),
            Err(FitError::Underdetermined { unknowns: 2, .. })
        ));
    }

    #[test]
    fn synthetic_rows_are_recovered_exactly() {
        let truth: BTreeMap<&str, f64> = [("A", 0.4), ("B", 1.1), ("C", 2.5)].into();
        let terminal = 2.2;
        let labels = [("A", 2), ("B", 2), ("C", 2), ("A+B", 3), ("B+C", 3)];
        let rows: Vec<_> = labels
            .iter()
            .map(|(l, x)| {
                let spans: f64 = l.split('+').map(|s| truth[s]).sum();
                MeasuredBudget::from_label(l, *x, terminal + spans + f64::from(*x))
            })
            .collect();
        let fit = fit_component_losses(&rows, 1.0).unwrap();
        assert!((fit.terminal_total_db - terminal).abs() < 1e-9);
        for (k, v) in truth {
            assert!((fit.per_span_db[k] - v).abs() < 1e-9);
        }
        assert!(fit.max_abs_residual() < 1e-9);
    }
}

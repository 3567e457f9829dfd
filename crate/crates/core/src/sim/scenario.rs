use serde::{Deserialize, Serialize};

use crate::controller::{ConnectionRequest, LinkEvent};
use crate::fixtures;
use crate::kms::DEFAULT_REKEY_INTERVAL_S;
use crate::qkd::DEFAULT_JITTER_REL;
use crate::topology::{SpanConfig, SpanId, Topology, TopologyConfig, TopologyError};

use super::SimError;

/// A bundled topology by name, or one given inline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologyRef {
    Builtin(String),
    Inline(TopologyConfig),
}

impl TopologyRef {
    pub fn resolve(&self) -> Result<Topology, SimError> {
        match self {
            TopologyRef::Builtin(name) => match name.as_str() {
                "lab" => Ok(fixtures::lab_topology()),
                "field" => Ok(fixtures::field_topology()),
                other => Err(SimError::Schedule(format!("unknown topology '{other}'"))),
            },
            TopologyRef::Inline(config) => Ok(Topology::from_config(config.clone())?),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduledRequest {
    pub at_s: f64,
    #[serde(flatten)]
    pub request: ConnectionRequest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    RemoveSpan(SpanId),
    AddSpan(SpanConfig),
    /// Overrides the QBER of every route over `span` (all routes if absent)
    /// from the fault time on.
    ForceQber {
        #[serde(default)]
        span: Option<SpanId>,
        qber_pct: f64,
        #[serde(default)]
        duration_s: Option<f64>,
    },
}

impl Fault {
    pub fn link_event(&self) -> Option<LinkEvent> {
        match self {
            Fault::RemoveSpan(id) => Some(LinkEvent::RemoveSpan(id.clone())),
            Fault::AddSpan(span) => Some(LinkEvent::AddSpan(span.clone())),
            Fault::ForceQber { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduledFault {
    pub at_s: f64,
    pub fault: Fault,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduledTeardown {
    pub at_s: f64,
    /// Index into `requests`.
    pub request: usize,
}

fn default_sigma() -> f64 {
    DEFAULT_JITTER_REL
}

fn default_rekey() -> f64 {
    DEFAULT_REKEY_INTERVAL_S
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub topology: TopologyRef,
    pub duration_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_sigma")]
    pub sigma_rel: f64,
    #[serde(default = "default_rekey")]
    pub rekey_interval_s: f64,
    #[serde(default)]
    pub requests: Vec<ScheduledRequest>,
    #[serde(default)]
    pub faults: Vec<ScheduledFault>,
    #[serde(default)]
    pub teardowns: Vec<ScheduledTeardown>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::Schedule(format!("scenario: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Checks duration, time ordering and cross references.
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::Schedule(msg));
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad(format!("duration {} must be positive", self.duration_s));
        }
        if !(self.sigma_rel >= 0.0 && self.sigma_rel.is_finite()) {
            return bad(format!("sigma_rel {} must be non-negative", self.sigma_rel));
        }
        if !(self.rekey_interval_s > 0.0 && self.rekey_interval_s.is_finite()) {
            return bad(format!("rekey interval {} must be positive", self.rekey_interval_s));
        }
        let times = [
            ("requests", self.requests.iter().map(|r| r.at_s).collect::<Vec<_>>()),
            ("faults", self.faults.iter().map(|f| f.at_s).collect()),
            ("teardowns", self.teardowns.iter().map(|t| t.at_s).collect()),
        ];
        for (what, ts) in &times {
            if ts.iter().any(|t| !(*t >= 0.0 && *t <= self.duration_s)) {
                return bad(format!("{what} must lie within [0, duration]"));
            }
            if ts.windows(2).any(|w| w[1] < w[0]) {
                return bad(format!("{what} must be sorted by time"));
            }
        }
        for t in &self.teardowns {
            match self.requests.get(t.request) {
                None => return bad(format!("teardown refers to request {}", t.request)),
                Some(r) if r.at_s > t.at_s => {
                    return bad(format!("teardown of request {} precedes it", t.request))
                }
                _ => {}
            }
        }
        for r in &self.requests {
            if r.request.src == r.request.dst {
                return bad(format!("request {}->{} has equal endpoints", r.request.src, r.request.dst));
            }
        }
        Ok(())
    }
}

impl From<TopologyError> for SimError {
    fn from(e: TopologyError) -> Self {
        SimError::Topology(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"{
        "name": "basic",
        "topology": "lab",
        "duration_s": 3600,
        "requests": [{"at_s": 0, "src": "N2", "dst": "N1", "kind": "quantum_secured"}],
        "faults": [{"at_s": 2000, "fault": {"force_qber": {"span": "L1", "qber_pct": 7.0}}}],
        "teardowns": [{"at_s": 3500, "request": 0}]
    }"#;

    #[test]
    fn parses_with_defaults() {
        let s = Scenario::parse(BASIC).unwrap();
        assert_eq!(s.sigma_rel, DEFAULT_JITTER_REL);
        assert_eq!(s.rekey_interval_s, 60.0);
        assert!(s.validate().is_ok());
        assert!(s.topology.resolve().is_ok());
        assert_eq!(Scenario::parse(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn rejects_bad_schedules() {
        let mut s = Scenario::parse(BASIC).unwrap();
        s.duration_s = 0.0;
        assert!(s.validate().is_err());

        let mut s = Scenario::parse(BASIC).unwrap();
        s.requests.push(ScheduledRequest { at_s: -1.0, ..s.requests[0].clone() });
        assert!(s.validate().is_err());

        let mut s = Scenario::parse(BASIC).unwrap();
        s.teardowns[0].request = 3;
        assert!(s.validate().is_err());

        let mut s = Scenario::parse(BASIC).unwrap();
        s.topology = TopologyRef::Builtin("mars".into());
        assert!(s.topology.resolve().is_err());
    }
}

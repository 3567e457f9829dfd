//! Bundled reference data: the laboratory and field topologies, the
//! measured link table and the coexistence anchors.

use crate::qkd::{read_table3, AnchorSet, Table3Row};
use crate::topology::{load_topology, Topology};

pub const LAB_TOPOLOGY_JSON: &str = include_str!("../fixtures/lab_topology.json");
pub const FIELD_TOPOLOGY_JSON: &str = include_str!("../fixtures/field_topology.json");
pub const TABLE3_CSV: &str = include_str!("../fixtures/table3.csv");
pub const ANCHORS_JSON: &str = include_str!("../fixtures/anchors.json");

pub fn lab_topology() -> Topology {
    load_topology(LAB_TOPOLOGY_JSON).expect("bundled lab topology is valid")
}

pub fn field_topology() -> Topology {
    load_topology(FIELD_TOPOLOGY_JSON).expect("bundled field topology is valid")
}

pub fn table3_rows() -> Vec<Table3Row> {
    read_table3(TABLE3_CSV.as_bytes()).expect("bundled link table is valid")
}

pub fn anchors() -> AnchorSet {
    AnchorSet::parse(ANCHORS_JSON).expect("bundled anchors are valid")
}

//! Key management: per-pair key buffers, QKD session agents and the
//! AES-256 tunnel consumer.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::Write;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qkd::{sample_observation, Observation, QkdLinkEstimate};
use crate::topology::{Device, NodeId, Route, Topology};

pub const REPORT_INTERVAL_S: f64 = 120.0;
pub const WARMUP_MIN_S: f64 = 600.0;
pub const WARMUP_MAX_S: f64 = 900.0;
pub const KEY_BITS_PER_REKEY: u64 = 256;
pub const DEFAULT_REKEY_INTERVAL_S: f64 = 60.0;
pub const DEFAULT_STATS_WINDOW_S: f64 = 600.0;

#[derive(Debug, Error, PartialEq)]
pub enum KmsError {
    #[error("key block must carry at least one bit")]
    EmptyBlock,
    #[error("insufficient keys: requested {requested} bits, {available} available")]
    InsufficientKeys { requested: u64, available: u64 },
    #[error("device mismatch: {0}")]
    DeviceMismatch(String),
    #[error("session is not generating keys")]
    NotGenerating,
    #[error("illegal session transition {from:?} -> {to:?}")]
    IllegalTransition { from: SessionState, to: SessionState },
}

/// Alice node and Bob node of a QKD device pair.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairId {
    pub alice: NodeId,
    pub bob: NodeId,
}

impl PairId {
    pub fn new(alice: impl Into<NodeId>, bob: impl Into<NodeId>) -> Self {
        Self {
            alice: alice.into(),
            bob: bob.into(),
        }
    }
}

impl fmt::Display for PairId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.alice, self.bob)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyBlock {
    pub key_id: u64,
    pub bits: u64,
    pub created_at: f64,
    material: Vec<u8>,
}

/// A contiguous run of bits taken from one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeySegment {
    pub key_id: u64,
    pub offset_bits: u64,
    pub bits: u64,
}

/// Key material handed to a consumer. Bits are packed MSB first.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyHandle {
    pub segments: Vec<KeySegment>,
    pub bits: u64,
    pub material: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuditEvent {
    Push,
    Reserve,
    Starve,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditRecord {
    pub timestamp_s: f64,
    pub pair_id: PairId,
    pub event: AuditEvent,
    pub bits: u64,
    pub buffer_bits: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreStats {
    pub generation_rate_bps: f64,
    pub consumption_rate_bps: f64,
    pub buffer_bits: u64,
    pub starvation_events: u64,
}

#[derive(Clone, Debug)]
pub struct KeyStore {
    pair_id: PairId,
    blocks: VecDeque<KeyBlock>,
    /// Bits already taken from the front block.
    front_offset: u64,
    total_bits: u64,
    generated_bits: u64,
    consumed_bits: u64,
    starvation_events: u64,
    next_key_id: u64,
    created_at: f64,
    rng: ChaCha8Rng,
    audit: Vec<AuditRecord>,
}

fn bit_at(bytes: &[u8], index: u64) -> bool {
    bytes[(index / 8) as usize] & (0x80 >> (index % 8)) != 0
}

impl KeyStore {
    pub fn new(pair_id: PairId, seed: u64, created_at: f64) -> Self {
        Self {
            pair_id,
            blocks: VecDeque::new(),
            front_offset: 0,
            total_bits: 0,
            generated_bits: 0,
            consumed_bits: 0,
            starvation_events: 0,
            next_key_id: 0,
            created_at,
            rng: ChaCha8Rng::seed_from_u64(seed),
            audit: Vec::new(),
        }
    }

    pub fn pair_id(&self) -> &PairId {
        &self.pair_id
    }

    pub fn total_bits(&self) -> u64 {
        self.total_bits
    }

    pub fn generated_bits(&self) -> u64 {
        self.generated_bits
    }

    pub fn consumed_bits(&self) -> u64 {
        self.consumed_bits
    }

    pub fn starvation_events(&self) -> u64 {
        self.starvation_events
    }

    pub fn blocks(&self) -> impl Iterator<Item = &KeyBlock> {
        self.blocks.iter()
    }

    pub fn audit(&self) -> &[AuditRecord] {
        &self.audit
    }

    fn record(&mut self, now: f64, event: AuditEvent, bits: u64) {
        self.audit.push(AuditRecord {
            timestamp_s: now,
            pair_id: self.pair_id.clone(),
            event,
            bits,
            buffer_bits: self.total_bits,
        });
    }

    /// Appends a fresh block; returns its key id.
    pub fn push_key_block(&mut self, bits: u64, now: f64) -> Result<u64, KmsError> {
        if bits == 0 {
            return Err(KmsError::EmptyBlock);
        }
        let mut material = vec![0u8; bits.div_ceil(8) as usize];
        self.rng.fill_bytes(&mut material);
        let key_id = self.next_key_id;
        self.next_key_id += 1;
        self.blocks.push_back(KeyBlock {
            key_id,
            bits,
            created_at: now,
            material,
        });
        self.total_bits += bits;
        self.generated_bits += bits;
        self.record(now, AuditEvent::Push, bits);
        Ok(key_id)
    }

    /// Takes exactly `bits` from the oldest blocks, splitting the last one
    /// if needed. A shortfall leaves the store untouched and logs a starve.
    pub fn reserve_key(&mut self, bits: u64, now: f64) -> Result<KeyHandle, KmsError> {
        if bits == 0 {
            return Err(KmsError::EmptyBlock);
        }
        if bits > self.total_bits {
            self.starvation_events += 1;
            self.record(now, AuditEvent::Starve, bits);
            return Err(KmsError::InsufficientKeys {
                requested: bits,
                available: self.total_bits,
            });
        }
        let mut segments = Vec::new();
        let mut material = vec![0u8; bits.div_ceil(8) as usize];
        let mut written = 0u64;
        while written < bits {
            let front = self.blocks.front().expect("total_bits covers request");
            let available = front.bits - self.front_offset;
            let take = available.min(bits - written);
            for i in 0..take {
                if bit_at(&front.material, self.front_offset + i) {
                    let out = written + i;
                    material[(out / 8) as usize] |= 0x80 >> (out % 8);
                }
            }
            segments.push(KeySegment {
                key_id: front.key_id,
                offset_bits: self.front_offset,
                bits: take,
            });
            written += take;
            if take == available {
                self.blocks.pop_front();
                self.front_offset = 0;
            } else {
                self.front_offset += take;
            }
        }
        self.total_bits -= bits;
        self.consumed_bits += bits;
        self.record(now, AuditEvent::Reserve, bits);
        Ok(KeyHandle {
            segments,
            bits,
            material,
        })
    }

    /// Rates over the trailing `window_s`, shortened to the store's age.
    pub fn stats(&self, now: f64, window_s: f64) -> StoreStats {
        let span = window_s.min(now - self.created_at);
        let mut stats = StoreStats {
            buffer_bits: self.total_bits,
            starvation_events: self.starvation_events,
            ..StoreStats::default()
        };
        if !(span > 0.0) {
            return stats;
        }
        let since = now - span;
        let (mut generated, mut consumed) = (0u64, 0u64);
        for rec in self.audit.iter().rev() {
            if rec.timestamp_s <= since {
                break;
            }
            if rec.timestamp_s > now {
                continue;
            }
            match rec.event {
                AuditEvent::Push => generated += rec.bits,
                AuditEvent::Reserve => consumed += rec.bits,
                AuditEvent::Starve => {}
            }
        }
        stats.generation_rate_bps = generated as f64 / span;
        stats.consumption_rate_bps = consumed as f64 / span;
        stats
    }
}

pub fn write_audit_csv<W: Write>(records: &[AuditRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestamp_s", "pair_id", "event", "bits", "buffer_bits"])?;
    for r in records {
        let event = match r.event {
            AuditEvent::Push => "push",
            AuditEvent::Reserve => "reserve",
            AuditEvent::Starve => "starve",
        };
        w.write_record([
            format!("{:.3}", r.timestamp_s),
            r.pair_id.to_string(),
            event.to_string(),
            r.bits.to_string(),
            r.buffer_bits.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionState {
    Establishing,
    Generating,
    Stopped,
    Aborted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyRateReport {
    pub qber_pct: f64,
    pub skr_bps: f64,
    pub bits_pushed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QkdSession {
    pub pair_id: PairId,
    pub route: Route,
    state: SessionState,
    pub started_at: f64,
    pub warmup_s: f64,
    pub report_interval_s: f64,
    established_at: Option<f64>,
    carry_bits: f64,
}

/// Warm-up in `[600, 900]` s, a pure function of `seed`.
pub fn warmup_from_seed(seed: u64) -> f64 {
    ChaCha8Rng::seed_from_u64(seed).random_range(WARMUP_MIN_S..=WARMUP_MAX_S)
}

impl QkdSession {
    pub fn start(pair_id: PairId, route: Route, seed: u64, now: f64) -> Self {
        Self {
            pair_id,
            route,
            state: SessionState::Establishing,
            started_at: now,
            warmup_s: warmup_from_seed(seed),
            report_interval_s: REPORT_INTERVAL_S,
            established_at: None,
            carry_bits: 0.0,
        }
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn generating_at(&self) -> f64 {
        self.started_at + self.warmup_s
    }

    pub fn established_at(&self) -> Option<f64> {
        self.established_at
    }

    fn transition(&mut self, to: SessionState) -> Result<(), KmsError> {
        use SessionState::*;
        let legal = matches!(
            (self.state, to),
            (Establishing, Generating) | (Establishing | Generating, Stopped | Aborted)
        );
        if !legal {
            return Err(KmsError::IllegalTransition { from: self.state, to });
        }
        self.state = to;
        Ok(())
    }

    pub fn establish(&mut self, now: f64) -> Result<(), KmsError> {
        self.transition(SessionState::Generating)?;
        self.established_at = Some(now);
        Ok(())
    }

    pub fn stop(&mut self) -> Result<(), KmsError> {
        self.transition(SessionState::Stopped)
    }

    pub fn abort(&mut self) -> Result<(), KmsError> {
        self.transition(SessionState::Aborted)
    }

    /// Samples one monitoring report and pushes `skr × interval` bits; the
    /// fractional remainder carries into the next report.
    pub fn report<R: Rng + ?Sized>(
        &mut self,
        estimate: &QkdLinkEstimate,
        sigma_rel: f64,
        threshold_pct: f64,
        rng: &mut R,
        store: &mut KeyStore,
        now: f64,
    ) -> Result<KeyRateReport, KmsError> {
        if self.state != SessionState::Generating {
            return Err(KmsError::NotGenerating);
        }
        let obs = sample_observation(estimate, sigma_rel, threshold_pct, rng);
        Ok(self.deliver(obs, store, now))
    }

    /// Pushes the bits for an externally determined observation.
    pub fn deliver(&mut self, obs: Observation, store: &mut KeyStore, now: f64) -> KeyRateReport {
        let exact = obs.skr_bps * self.report_interval_s + self.carry_bits;
        let bits = exact.floor().max(0.0);
        self.carry_bits = if obs.skr_bps > 0.0 { exact - bits } else { 0.0 };
        let bits = bits as u64;
        if bits > 0 {
            store.push_key_block(bits, now).expect("non-zero block");
        }
        KeyRateReport {
            qber_pct: obs.qber_pct,
            skr_bps: obs.skr_bps,
            bits_pushed: bits,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TunnelState {
    Open,
    Starved,
    Closed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tunnel {
    pub pair_id: PairId,
    pub rekey_interval_s: f64,
    pub key_bits_per_rekey: u64,
    state: TunnelState,
    next_rekey_at: f64,
    pub rekeys: u64,
    pub failed_rekeys: u64,
    current_key: Option<KeyHandle>,
}

impl Tunnel {
    /// Draws the first session key immediately; without one the tunnel
    /// starts Starved.
    pub fn open(pair_id: PairId, rekey_interval_s: f64, store: &mut KeyStore, now: f64) -> Self {
        let mut t = Self {
            pair_id,
            rekey_interval_s,
            key_bits_per_rekey: KEY_BITS_PER_REKEY,
            state: TunnelState::Starved,
            next_rekey_at: now,
            rekeys: 0,
            failed_rekeys: 0,
            current_key: None,
        };
        t.rekey(store, now);
        t.next_rekey_at = now + rekey_interval_s;
        t
    }

    pub fn state(&self) -> TunnelState {
        self.state
    }

    pub fn next_rekey_at(&self) -> f64 {
        self.next_rekey_at
    }

    pub fn current_key(&self) -> Option<&KeyHandle> {
        self.current_key.as_ref()
    }

    fn rekey(&mut self, store: &mut KeyStore, now: f64) {
        match store.reserve_key(self.key_bits_per_rekey, now) {
            Ok(key) => {
                self.current_key = Some(key);
                self.rekeys += 1;
                self.state = TunnelState::Open;
            }
            Err(_) => {
                self.failed_rekeys += 1;
                self.state = TunnelState::Starved;
            }
        }
    }

    /// Performs every rekey due at or before `now`.
    pub fn tick(&mut self, store: &mut KeyStore, now: f64) -> TunnelState {
        while self.state != TunnelState::Closed && self.next_rekey_at <= now {
            let at = self.next_rekey_at;
            self.rekey(store, at);
            self.next_rekey_at += self.rekey_interval_s;
        }
        self.state
    }

    pub fn close(&mut self) {
        self.state = TunnelState::Closed;
        self.current_key = None;
    }
}

fn mix_seed(seed: u64, pair: &PairId) -> u64 {
    // FNV-1a over the pair label, folded into the base seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in pair.to_string().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.rotate_left(17)
}

/// Registry of key stores and terminal occupancy.
#[derive(Clone, Debug)]
pub struct Kms {
    seed: u64,
    stores: BTreeMap<PairId, KeyStore>,
    busy: BTreeMap<(NodeId, Device), PairId>,
}

impl Kms {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            stores: BTreeMap::new(),
            busy: BTreeMap::new(),
        }
    }

    pub fn store(&self, pair: &PairId) -> Option<&KeyStore> {
        self.stores.get(pair)
    }

    pub fn store_mut(&mut self, pair: &PairId, now: f64) -> &mut KeyStore {
        let seed = mix_seed(self.seed, pair);
        self.stores
            .entry(pair.clone())
            .or_insert_with(|| KeyStore::new(pair.clone(), seed, now))
    }

    pub fn stores(&self) -> impl Iterator<Item = &KeyStore> {
        self.stores.values()
    }

    /// Audit records of every store, merged by time then pair.
    pub fn audit(&self) -> Vec<AuditRecord> {
        let mut all: Vec<AuditRecord> = self.stores.values().flat_map(|s| s.audit().iter().cloned()).collect();
        all.sort_by(|a, b| a.timestamp_s.total_cmp(&b.timestamp_s));
        all
    }

    pub fn total_stats(&self, now: f64, window_s: f64) -> StoreStats {
        self.stores.values().map(|s| s.stats(now, window_s)).fold(StoreStats::default(), |acc, s| StoreStats {
            generation_rate_bps: acc.generation_rate_bps + s.generation_rate_bps,
            consumption_rate_bps: acc.consumption_rate_bps + s.consumption_rate_bps,
            buffer_bits: acc.buffer_bits + s.buffer_bits,
            starvation_events: acc.starvation_events + s.starvation_events,
        })
    }

    /// Role and occupancy check for a prospective pair.
    pub fn check_terminals(
        &self,
        topology: &Topology,
        alice: &NodeId,
        bob: &NodeId,
    ) -> Result<PairId, KmsError> {
        let alice_node = topology
            .node(alice)
            .map_err(|e| KmsError::DeviceMismatch(e.to_string()))?;
        let bob_node = topology
            .node(bob)
            .map_err(|e| KmsError::DeviceMismatch(e.to_string()))?;
        if !alice_node.has(Device::AliceTerminal) {
            return Err(KmsError::DeviceMismatch(format!("{alice} has no Alice terminal")));
        }
        if !bob_node.has(Device::BobTerminal) {
            return Err(KmsError::DeviceMismatch(format!("{bob} has no Bob terminal")));
        }
        let pair = PairId::new(alice.clone(), bob.clone());
        for key in [(alice.clone(), Device::AliceTerminal), (bob.clone(), Device::BobTerminal)] {
            if let Some(owner) = self.busy.get(&key) {
                if *owner != pair {
                    return Err(KmsError::DeviceMismatch(format!(
                        "{:?} at {} is occupied by {owner}",
                        key.1, key.0
                    )));
                }
            }
        }
        Ok(pair)
    }

    /// Claims both terminals of the route's endpoints and starts a session.
    pub fn session_start(
        &mut self,
        topology: &Topology,
        route: &Route,
        seed: u64,
        now: f64,
    ) -> Result<QkdSession, KmsError> {
        let (alice, bob) = route.endpoints();
        let pair = self.check_terminals(topology, alice, bob)?;
        self.busy.insert((alice.clone(), Device::AliceTerminal), pair.clone());
        self.busy.insert((bob.clone(), Device::BobTerminal), pair.clone());
        self.store_mut(&pair, now);
        Ok(QkdSession::start(pair, route.clone(), seed, now))
    }

    pub fn release(&mut self, pair: &PairId) {
        self.busy.retain(|_, owner| owner != pair);
    }

    pub fn is_busy(&self, node: &NodeId, device: Device) -> bool {
        self.busy.contains_key(&(node.clone(), device))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn store() -> KeyStore {
        KeyStore::new(PairId::new("N2", "N1"), 7, 0.0)
    }

    #[test]
    fn push_accumulates() {
        let mut s = store();
        for i in 0..10 {
            s.push_key_block(256, i as f64).unwrap();
        }
        assert_eq!(s.total_bits(), 2560);
    }

    #[test]
    fn empty_push_rejected() {
        let mut s = store();
        assert_eq!(s.push_key_block(0, 0.0), Err(KmsError::EmptyBlock));
        assert_eq!(s.total_bits(), 0);
        assert!(s.audit().is_empty());
    }

    #[test]
    fn rate_times_interval() {
        // 500 bps over 60 s
        let mut s = store();
        s.push_key_block((500.0f64 * 60.0) as u64, 60.0).unwrap();
        assert_eq!(s.total_bits(), 30_000);
    }

    #[test]
    fn reserve_from_empty_starves() {
        let mut s = store();
        assert_eq!(
            s.reserve_key(256, 0.0),
            Err(KmsError::InsufficientKeys { requested: 256, available: 0 })
        );
        assert_eq!(s.starvation_events(), 1);
        assert_eq!(s.audit()[0].event, AuditEvent::Starve);
    }

    #[test]
    fn reserve_arithmetic_and_fifo() {
        let mut s = store();
        for _ in 0..10 {
            s.push_key_block(256, 0.0).unwrap();
        }
        let ids: Vec<u64> = (0..3)
            .map(|_| s.reserve_key(256, 1.0).unwrap().segments[0].key_id)
            .collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(s.total_bits(), 1792);
    }

    #[test]
    fn split_blocks_preserve_material() {
        let mut s = store();
        s.push_key_block(100, 0.0).unwrap();
        s.push_key_block(300, 0.0).unwrap();
        let whole: Vec<bool> = s
            .blocks()
            .flat_map(|b| (0..b.bits).map(move |i| bit_at(&b.material, i)))
            .collect();
        let a = s.reserve_key(256, 1.0).unwrap();
        let b = s.reserve_key(144, 1.0).unwrap();
        assert_eq!(a.segments.len(), 2);
        assert_eq!(a.segments[1], KeySegment { key_id: 1, offset_bits: 0, bits: 156 });
        assert_eq!(b.segments, vec![KeySegment { key_id: 1, offset_bits: 156, bits: 144 }]);
        let got: Vec<bool> = (0..256)
            .map(|i| bit_at(&a.material, i))
            .chain((0..144).map(|i| bit_at(&b.material, i)))
            .collect();
        assert_eq!(got, whole);
    }

    #[test]
    fn fresh_stats_are_zero() {
        assert_eq!(store().stats(0.0, DEFAULT_STATS_WINDOW_S), StoreStats::default());
    }

    #[test]
    fn steady_rates_in_window() {
        let mut s = store();
        let mut t = Tunnel::open(PairId::new("N2", "N1"), 60.0, &mut s, 0.0);
        let mut now = 0.0;
        while now < 3600.0 {
            now += 60.0;
            if (now as u64) % 120 == 0 {
                s.push_key_block(500 * 120, now).unwrap();
            }
            t.tick(&mut s, now);
        }
        let st = s.stats(3600.0, DEFAULT_STATS_WINDOW_S);
        assert!((st.generation_rate_bps - 500.0).abs() < 1e-9);
        assert!((st.consumption_rate_bps - 256.0 / 60.0).abs() < 1e-9);
    }

    #[test]
    fn tunnel_recovers_after_starvation() {
        let mut s = store();
        let mut t = Tunnel::open(PairId::new("N2", "N1"), 60.0, &mut s, 0.0);
        assert_eq!(t.state(), TunnelState::Starved);
        s.push_key_block(256, 30.0).unwrap();
        assert_eq!(t.tick(&mut s, 60.0), TunnelState::Open);
        assert_eq!(t.tick(&mut s, 120.0), TunnelState::Starved);
        t.close();
        s.push_key_block(1024, 130.0).unwrap();
        assert_eq!(t.tick(&mut s, 600.0), TunnelState::Closed);
    }

    #[test]
    fn ample_buffer_stays_open() {
        let mut s = store();
        s.push_key_block(256 * 200, 0.0).unwrap();
        let mut t = Tunnel::open(PairId::new("N2", "N1"), 60.0, &mut s, 0.0);
        for k in 1..=100 {
            assert_eq!(t.tick(&mut s, 60.0 * k as f64), TunnelState::Open);
        }
        assert_eq!(t.rekeys, 101);
    }

    #[test]
    fn warmup_in_range_and_deterministic() {
        for seed in 0..200 {
            let w = warmup_from_seed(seed);
            assert!((WARMUP_MIN_S..=WARMUP_MAX_S).contains(&w));
            assert_eq!(w, warmup_from_seed(seed));
        }
    }

    #[test]
    fn session_roles() {
        let topo = fixtures::lab_topology();
        let mut kms = Kms::new(1);
        let l1 = topo.named_route("L1").unwrap();
        let s = kms.session_start(&topo, &l1, 5, 0.0).unwrap();
        assert_eq!(s.state(), SessionState::Establishing);
        assert_eq!(s.pair_id, PairId::new("N2", "N1"));
        assert!((600.0..=900.0).contains(&(s.generating_at())));

        // N4 hosts only a Bob terminal
        let rev = topo
            .enumerate_routes(&"N4".into(), &"N2".into(), 3)
            .unwrap()
            .remove(0);
        assert!(matches!(
            kms.session_start(&topo, &rev, 5, 0.0),
            Err(KmsError::DeviceMismatch(_))
        ));
        // Alice at N2 is already in use
        let other = topo.named_route("L3").unwrap();
        assert!(matches!(
            kms.session_start(&topo, &other, 5, 0.0),
            Err(KmsError::DeviceMismatch(_))
        ));
        kms.release(&PairId::new("N2", "N1"));
        assert!(kms.session_start(&topo, &other, 5, 0.0).is_ok());
    }

    fn estimate(skr: f64, aborted: bool) -> QkdLinkEstimate {
        QkdLinkEstimate {
            route_loss_db: 5.0,
            qber_pct: if aborted { 7.0 } else { 1.3 },
            skr_bps: skr,
            signal_rate: 0.0,
            dark_rate: 0.0,
            noise_rate: 0.0,
            fwm_collision: false,
            aborted,
        }
    }

    #[test]
    fn report_pushes_rate_times_interval() {
        let topo = fixtures::lab_topology();
        let mut s = QkdSession::start(PairId::new("N2", "N1"), topo.named_route("L1").unwrap(), 1, 0.0);
        let mut st = store();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            s.report(&estimate(600.0, false), 0.0, 6.0, &mut rng, &mut st, 10.0),
            Err(KmsError::NotGenerating)
        );
        s.establish(s.generating_at()).unwrap();
        let r = s.report(&estimate(600.0, false), 0.0, 6.0, &mut rng, &mut st, 1000.0).unwrap();
        assert_eq!(r.bits_pushed, 72_000);
        let r = s.report(&estimate(0.0, true), 0.0, 6.0, &mut rng, &mut st, 1120.0).unwrap();
        assert_eq!((r.skr_bps, r.bits_pushed), (0.0, 0));
        assert_eq!(st.total_bits(), 72_000);
        s.stop().unwrap();
        assert_eq!(
            s.report(&estimate(600.0, false), 0.0, 6.0, &mut rng, &mut st, 1240.0),
            Err(KmsError::NotGenerating)
        );
        assert!(matches!(s.establish(0.0), Err(KmsError::IllegalTransition { .. })));
    }

    #[test]
    fn audit_csv_header() {
        let mut s = store();
        s.push_key_block(256, 1.5).unwrap();
        let mut buf = Vec::new();
        write_audit_csv(s.audit(), &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "timestamp_s,pair_id,event,bits,buffer_bits\n1.500,N2-N1,push,256,256\n"
        );
    }
}

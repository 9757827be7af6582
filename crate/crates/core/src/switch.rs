//! Programmable-switch emulator: an ingress match table over coding
//! primitives, per-stream register banks, packet cloning and recirculation,
//! and a deterministic per-packet cost model.
//!
//! One `Switch` is a single-threaded state machine. A call to
//! [`Switch::ingress`] runs one pipeline pass; packets generated by code or
//! decode configs leave the pass as recirculation requests that the caller
//! (normally the simulator) re-injects via [`Switch::ingress_recirculated`]
//! after the recirculation latency. All offsets in a [`SwitchOutput`] are
//! relative to the `now` passed in, so identical configuration plus an
//! identical input sequence yields byte-identical outputs, telemetry and
//! costs.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::codec::{CodingHeader, Packet, Primitive, TelemetryRecord};
use crate::gf::{combine, rank, solve, CoeffVector, GfError, SymbolBuffer};
use crate::primitives::{
    Action, BankSpec, CodeConfig, DecodeConfig, NodeId, Output, PortId, Qualifier, TableEntry,
};

/// Default bound on how many times one generated packet may recirculate.
pub const DEFAULT_MAX_RECIRC: u8 = 8;

/// Default latency of one egress-to-ingress recirculation hop, in ns.
pub const DEFAULT_RECIRC_LATENCY_NS: u64 = 1_000;

/// Constants of the deterministic processing-latency model:
/// `latency = lookup_ns * table_lookups + byte_ns * bytes_touched +
/// recirc_ns * recirculations`.
///
/// Emission timing inside a pass uses the lookup and byte terms; the
/// recirculation term is paid on the recirculation hop itself, so keep
/// `recirc_ns` equal to the configured recirculation latency if reported
/// latencies should match event timing exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub lookup_ns: u64,
    pub byte_ns: u64,
    pub recirc_ns: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            lookup_ns: 1_000,
            byte_ns: 10,
            recirc_ns: DEFAULT_RECIRC_LATENCY_NS,
        }
    }
}

/// Deterministic counters accumulated over one packet's traversal of the
/// pipeline, including any recirculation passes it triggers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PipelineCost {
    pub table_lookups: u64,
    pub bytes_touched: u64,
    pub clones: u64,
    pub recirculations: u64,
}

impl PipelineCost {
    pub fn latency_ns(&self, model: &CostModel) -> u64 {
        model.lookup_ns * self.table_lookups
            + model.byte_ns * self.bytes_touched
            + model.recirc_ns * self.recirculations
    }

    fn absorb(&mut self, other: &PipelineCost) {
        self.table_lookups += other.table_lookups;
        self.bytes_touched += other.bytes_touched;
        self.clones += other.clones;
        self.recirculations += other.recirculations;
    }
}

/// Which decode path a batch took: arithmetic when at least one original had
/// to be materialized from coded rows, pass-through when every original
/// arrived as a basis-vector packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeBranch {
    Arithmetic,
    PassThrough,
}

/// Cost record of one packet traversal, kept per switch for benchmarks.
#[derive(Debug, Clone)]
pub struct TraversalRecord {
    pub entry_primitive: Primitive,
    pub ingress_ts: u64,
    pub cost: PipelineCost,
    pub decode_branch: Option<DecodeBranch>,
}

/// Outcome of storing one row into a register bank slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreOutcome {
    /// Row was innovative and stored.
    NewRow,
    /// Row is linearly dependent on stored rows; not stored.
    DuplicateRank,
    /// Slot held an older batch, which was evicted before storing.
    Evicted {
        old_batch: u32,
        old_delivered: bool,
    },
    /// The row's batch was already delivered (or the slot has moved past it).
    AlreadyDelivered,
}

/// Outcome the gather primitive reports for one arriving packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatherOutcome {
    Stored,
    Ready,
    Redundant,
    Late,
}

#[derive(Debug, Clone, Default)]
struct Slot {
    occupied: bool,
    batch: u32,
    rows: Vec<(CoeffVector, SymbolBuffer)>,
    /// True pre-padding length per generation position, known only for
    /// positions whose basis packet arrived.
    orig_lens: Vec<Option<u16>>,
    basis_seen: Vec<bool>,
    delivered: bool,
}

/// Per-stream ring buffer of batch slots; slot index is
/// `batch_number % capacity`. A slot holds rows of exactly one batch at a
/// time; storing a newer batch evicts the older one with no flow control.
#[derive(Debug)]
pub struct RegisterBank {
    slots: Vec<Slot>,
    gen_size: u8,
    pub evicted_batches: u64,
    pub evicted_undelivered: u64,
}

impl RegisterBank {
    pub fn new(capacity: usize, gen_size: u8) -> Self {
        assert!(capacity > 0 && gen_size > 0);
        Self {
            slots: (0..capacity).map(|_| Slot::default()).collect(),
            gen_size,
            evicted_batches: 0,
            evicted_undelivered: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn gen_size(&self) -> u8 {
        self.gen_size
    }

    fn slot_index(&self, batch: u32) -> usize {
        batch as usize % self.slots.len()
    }

    /// Stores one row. `orig_len` is recorded against the row's generation
    /// position when the row is a basis vector.
    pub fn store(
        &mut self,
        batch: u32,
        coeffs: CoeffVector,
        symbol: SymbolBuffer,
        orig_len: Option<u16>,
    ) -> StoreOutcome {
        let k = self.gen_size as usize;
        let idx = self.slot_index(batch);
        let mut evicted = None;
        {
            let slot = &mut self.slots[idx];
            if slot.occupied && slot.batch != batch {
                if slot.batch > batch {
                    // the ring has moved past this batch; the row is stale
                    return StoreOutcome::AlreadyDelivered;
                }
                evicted = Some((slot.batch, slot.delivered));
                self.evicted_batches += 1;
                if !slot.delivered {
                    self.evicted_undelivered += 1;
                }
                *slot = Slot::default();
            }
        }
        let slot = &mut self.slots[idx];
        if !slot.occupied {
            slot.occupied = true;
            slot.batch = batch;
            slot.rows = Vec::with_capacity(k);
            slot.orig_lens = vec![None; k];
            slot.basis_seen = vec![false; k];
            slot.delivered = false;
        }
        if slot.delivered {
            return StoreOutcome::AlreadyDelivered;
        }
        let before: Vec<CoeffVector> = slot.rows.iter().map(|(c, _)| c.clone()).collect();
        let mut after = before.clone();
        after.push(coeffs.clone());
        if rank(&after) == rank(&before) {
            return StoreOutcome::DuplicateRank;
        }
        if let Some(i) = coeffs.basis_index() {
            slot.basis_seen[i] = true;
            slot.orig_lens[i] = orig_len;
        }
        slot.rows.push((coeffs, symbol));
        match evicted {
            Some((old_batch, old_delivered)) => StoreOutcome::Evicted {
                old_batch,
                old_delivered,
            },
            None => StoreOutcome::NewRow,
        }
    }

    pub fn rank_of(&self, batch: u32) -> usize {
        let slot = &self.slots[self.slot_index(batch)];
        if !slot.occupied || slot.batch != batch {
            return 0;
        }
        slot.rows.len()
    }

    pub fn is_delivered(&self, batch: u32) -> bool {
        let slot = &self.slots[self.slot_index(batch)];
        slot.occupied && slot.batch == batch && slot.delivered
    }

    pub fn mark_delivered(&mut self, batch: u32) {
        let idx = self.slot_index(batch);
        let slot = &mut self.slots[idx];
        if slot.occupied && slot.batch == batch {
            slot.delivered = true;
            // payloads are no longer needed once the batch is closed out
            slot.rows.clear();
        }
    }

    fn slot(&self, batch: u32) -> Option<&Slot> {
        let slot = &self.slots[self.slot_index(batch)];
        (slot.occupied && slot.batch == batch).then_some(slot)
    }

    /// Number of occupied, undelivered slots (batches that never decoded).
    pub fn undelivered_batches(&self) -> u64 {
        self.slots
            .iter()
            .filter(|s| s.occupied && !s.delivered)
            .count() as u64
    }
}

/// Per-switch counters, exportable as a key-value snapshot. The disposition
/// counters partition external ingress packets: `ingress = forwarded +
/// stored + consumed_by_decode + dropped_*`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub ingress: u64,
    pub forwarded: u64,
    pub stored: u64,
    pub consumed_by_decode: u64,
    pub dropped_unmatched: u64,
    pub dropped_redundant: u64,
    pub dropped_late: u64,
    pub dropped_empty_ports: u64,
    pub dropped_malformed: u64,
    pub recirc_passes: u64,
    pub loop_guarded: u64,
    pub integrity_failures: u64,
    pub decoded_batches: u64,
    pub delivered_symbols: u64,
    pub coded_batches: u64,
    pub pad_symbols: u64,
    pub evicted_batches: u64,
    pub evicted_undelivered: u64,
}

impl Counters {
    pub fn snapshot(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("coded_batches", self.coded_batches),
            ("consumed_by_decode", self.consumed_by_decode),
            ("decoded_batches", self.decoded_batches),
            ("delivered_symbols", self.delivered_symbols),
            ("dropped_empty_ports", self.dropped_empty_ports),
            ("dropped_late", self.dropped_late),
            ("dropped_malformed", self.dropped_malformed),
            ("dropped_redundant", self.dropped_redundant),
            ("dropped_unmatched", self.dropped_unmatched),
            ("evicted_batches", self.evicted_batches),
            ("evicted_undelivered", self.evicted_undelivered),
            ("forwarded", self.forwarded),
            ("ingress", self.ingress),
            ("integrity_failures", self.integrity_failures),
            ("loop_guarded", self.loop_guarded),
            ("pad_symbols", self.pad_symbols),
            ("recirc_passes", self.recirc_passes),
            ("stored", self.stored),
        ]
    }
}

/// Full configuration of one switch, as emitted by the control plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwitchConfig {
    pub id: NodeId,
    pub entries: Vec<TableEntry>,
    pub code: Vec<CodeConfig>,
    pub decode: Vec<DecodeConfig>,
    pub banks: Vec<BankSpec>,
    pub cost: CostModel,
    pub max_recirc: u8,
    pub recirc_latency_ns: u64,
}

impl SwitchConfig {
    pub fn new(id: NodeId) -> Self {
        Self {
            id,
            entries: Vec::new(),
            code: Vec::new(),
            decode: Vec::new(),
            banks: Vec::new(),
            cost: CostModel::default(),
            max_recirc: DEFAULT_MAX_RECIRC,
            recirc_latency_ns: DEFAULT_RECIRC_LATENCY_NS,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SwitchConfigError {
    #[error("switch {switch}: duplicate table key for stream {stream}")]
    DuplicateKey { switch: NodeId, stream: u16 },
    #[error("switch {switch}: stream {stream} needs a register bank")]
    MissingBank { switch: NodeId, stream: u16 },
    #[error("switch {switch}: duplicate bank for stream {stream}")]
    DuplicateBank { switch: NodeId, stream: u16 },
    #[error("switch {switch}: split outputs ({outputs}) != gen_size ({gen_size})")]
    SplitShape {
        switch: NodeId,
        outputs: usize,
        gen_size: u8,
    },
    #[error("switch {switch}: code row has empty or all-zero coefficients")]
    BadCodeRow { switch: NodeId },
}

/// One packet leaving the switch: egress port plus the processing offset (ns
/// after the pass began) at which it is queued for egress.
#[derive(Debug, Clone)]
pub struct Emission {
    pub packet: Packet,
    pub port: PortId,
    pub offset_ns: u64,
}

/// One generated packet headed back to the ingress pipeline.
#[derive(Debug, Clone)]
pub struct RecircRequest {
    pub packet: Packet,
    pub depth: u8,
    pub traversal: usize,
    pub offset_ns: u64,
}

/// Everything one pipeline pass produced.
#[derive(Debug, Default)]
pub struct SwitchOutput {
    pub emissions: Vec<Emission>,
    pub recirc: Vec<RecircRequest>,
}

enum PassSource {
    External { in_port: PortId },
    Recirc { depth: u8 },
    Flush,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Disposition {
    Forwarded,
    Stored,
    ConsumedByDecode,
    DroppedUnmatched,
    DroppedRedundant,
    DroppedLate,
    DroppedEmptyPorts,
    DroppedMalformed,
}

/// The emulated switch.
#[derive(Debug)]
pub struct Switch {
    id: NodeId,
    entries: Vec<TableEntry>,
    code: Vec<CodeConfig>,
    decode: Vec<DecodeConfig>,
    cost_model: CostModel,
    max_recirc: u8,
    recirc_latency_ns: u64,
    banks: BTreeMap<u16, RegisterBank>,
    split_seq: BTreeMap<u16, u64>,
    counters: Counters,
    log: Vec<TraversalRecord>,
}

impl Switch {
    pub fn new(config: SwitchConfig) -> Result<Self, SwitchConfigError> {
        let SwitchConfig {
            id,
            mut entries,
            code,
            decode,
            banks,
            cost,
            max_recirc,
            recirc_latency_ns,
        } = config;
        entries.sort_by_key(|e| e.key);
        for pair in entries.windows(2) {
            if pair[0].key == pair[1].key {
                return Err(SwitchConfigError::DuplicateKey {
                    switch: id,
                    stream: pair[0].key.stream_id,
                });
            }
        }
        let mut bank_map = BTreeMap::new();
        for spec in &banks {
            if bank_map
                .insert(
                    spec.stream_id,
                    RegisterBank::new(spec.slots, spec.gen_size),
                )
                .is_some()
            {
                return Err(SwitchConfigError::DuplicateBank {
                    switch: id,
                    stream: spec.stream_id,
                });
            }
        }
        for e in &entries {
            match &e.action {
                Action::Split(s) => {
                    if s.outputs.len() != s.gen_size as usize {
                        return Err(SwitchConfigError::SplitShape {
                            switch: id,
                            outputs: s.outputs.len(),
                            gen_size: s.gen_size,
                        });
                    }
                    if !bank_map.contains_key(&e.key.stream_id) {
                        return Err(SwitchConfigError::MissingBank {
                            switch: id,
                            stream: e.key.stream_id,
                        });
                    }
                }
                Action::Gather(_) => {
                    if !bank_map.contains_key(&e.key.stream_id) {
                        return Err(SwitchConfigError::MissingBank {
                            switch: id,
                            stream: e.key.stream_id,
                        });
                    }
                }
                Action::Forward(_) => {}
            }
        }
        for c in &code {
            if !bank_map.contains_key(&c.stream_id) {
                return Err(SwitchConfigError::MissingBank {
                    switch: id,
                    stream: c.stream_id,
                });
            }
            for row in &c.rows {
                if row.coeffs.is_empty() || row.coeffs.is_zero() {
                    return Err(SwitchConfigError::BadCodeRow { switch: id });
                }
            }
        }
        for d in &decode {
            if !bank_map.contains_key(&d.stream_id) {
                return Err(SwitchConfigError::MissingBank {
                    switch: id,
                    stream: d.stream_id,
                });
            }
        }
        Ok(Self {
            id,
            entries,
            code,
            decode,
            cost_model: cost,
            max_recirc,
            recirc_latency_ns,
            banks: bank_map,
            split_seq: BTreeMap::new(),
            counters: Counters::default(),
            log: Vec::new(),
        })
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn counters(&self) -> Counters {
        let mut c = self.counters;
        for bank in self.banks.values() {
            c.evicted_batches += bank.evicted_batches;
            c.evicted_undelivered += bank.evicted_undelivered;
        }
        c
    }

    pub fn cost_model(&self) -> &CostModel {
        &self.cost_model
    }

    pub fn traversal_log(&self) -> &[TraversalRecord] {
        &self.log
    }

    /// Batches still sitting undelivered in this switch's banks.
    pub fn undelivered_batches(&self) -> u64 {
        self.banks.values().map(|b| b.undelivered_batches()).sum()
    }

    pub fn bank(&self, stream: u16) -> Option<&RegisterBank> {
        self.banks.get(&stream)
    }

    /// One external pipeline pass: match the ingress table on
    /// `(stream_id, next_primitive)` and execute the bound primitive.
    pub fn ingress(&mut self, packet: Packet, in_port: PortId, now: u64) -> SwitchOutput {
        self.counters.ingress += 1;
        let traversal = self.log.len();
        self.log.push(TraversalRecord {
            entry_primitive: packet.header.next_primitive,
            ingress_ts: now,
            cost: PipelineCost::default(),
            decode_branch: None,
        });
        self.pass(packet, PassSource::External { in_port }, now, traversal)
    }

    /// Re-entry of a recirculated packet, scheduled by the caller after the
    /// recirculation latency.
    pub fn ingress_recirculated(
        &mut self,
        packet: Packet,
        depth: u8,
        traversal: usize,
        now: u64,
    ) -> SwitchOutput {
        self.counters.recirc_passes += 1;
        self.pass(packet, PassSource::Recirc { depth }, now, traversal)
    }

    /// Completes any partial split batch for `stream` by running zero-length
    /// pad symbols through the split path. Called at stream end. Pad symbols
    /// count as ingress packets (see `pad_symbols`).
    pub fn end_of_stream(&mut self, stream: u16, now: u64) -> SwitchOutput {
        let Some(gen_size) = self.entries.iter().find_map(|e| {
            if e.key.stream_id != stream {
                return None;
            }
            match &e.action {
                Action::Split(s) => Some(s.gen_size),
                _ => None,
            }
        }) else {
            return SwitchOutput::default();
        };
        let k = gen_size as u64;
        let mut out = SwitchOutput::default();
        while self
            .split_seq
            .get(&stream)
            .is_some_and(|seq| seq % k != 0)
        {
            self.counters.pad_symbols += 1;
            self.counters.ingress += 1;
            let traversal = self.log.len();
            self.log.push(TraversalRecord {
                entry_primitive: Primitive::Split,
                ingress_ts: now,
                cost: PipelineCost::default(),
                decode_branch: None,
            });
            let pad = Packet {
                header: CodingHeader {
                    stream_id: stream,
                    batch_number: 0,
                    next_primitive: Primitive::Split,
                    coeffs: CoeffVector::basis(gen_size as usize, 0),
                    orig_len: 0,
                    telemetry: Vec::new(),
                },
                payload: Vec::new(),
            };
            let o = self.pass(pad, PassSource::Flush, now, traversal);
            out.emissions.extend(o.emissions);
            out.recirc.extend(o.recirc);
        }
        out
    }

    fn find_entry(&self, stream: u16, prim: Primitive, source: &PassSource) -> Option<usize> {
        let mut best: Option<(u8, usize)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            if e.key.stream_id != stream || e.key.next_primitive != prim {
                continue;
            }
            let prio = match (&e.key.qualifier, source) {
                (Qualifier::InPort(p), PassSource::External { in_port }) if p == in_port => 0,
                (Qualifier::Any, PassSource::External { .. }) => 1,
                (Qualifier::Recirculated, PassSource::Recirc { .. }) => 0,
                (Qualifier::Any, PassSource::Recirc { .. }) => 1,
                (_, PassSource::Flush) => 1,
                _ => continue,
            };
            if best.is_none_or(|(bp, _)| prio < bp) {
                best = Some((prio, i));
            }
        }
        best.map(|(_, i)| i)
    }

    fn pass(
        &mut self,
        packet: Packet,
        source: PassSource,
        now: u64,
        traversal: usize,
    ) -> SwitchOutput {
        let mut ctx = PassCtx::default();
        ctx.cost.table_lookups = 1;
        let stream = packet.header.stream_id;
        let prim = packet.header.next_primitive;

        let disposition = match self.find_entry(stream, prim, &source) {
            None => Disposition::DroppedUnmatched,
            Some(idx) => {
                let action = self.entries[idx].action.clone();
                let depth = match &source {
                    PassSource::Recirc { depth } => *depth,
                    _ => 0,
                };
                match action {
                    Action::Forward(f) => self.exec_forward(&f, packet, depth, &mut ctx),
                    Action::Split(s) => self.exec_split(&s, packet, &mut ctx),
                    Action::Gather(_) => self.exec_gather(packet, &mut ctx),
                }
            }
        };

        if matches!(source, PassSource::External { .. } | PassSource::Flush) {
            match disposition {
                Disposition::Forwarded => self.counters.forwarded += 1,
                Disposition::Stored => self.counters.stored += 1,
                Disposition::ConsumedByDecode => self.counters.consumed_by_decode += 1,
                Disposition::DroppedUnmatched => self.counters.dropped_unmatched += 1,
                Disposition::DroppedRedundant => self.counters.dropped_redundant += 1,
                Disposition::DroppedLate => self.counters.dropped_late += 1,
                Disposition::DroppedEmptyPorts => self.counters.dropped_empty_ports += 1,
                Disposition::DroppedMalformed => self.counters.dropped_malformed += 1,
            }
        }

        if let Some(branch) = ctx.decode_branch {
            self.log[traversal].decode_branch = Some(branch);
        }
        self.log[traversal].cost.absorb(&ctx.cost);

        let pass_latency =
            self.cost_model.lookup_ns * ctx.cost.table_lookups + self.cost_model.byte_ns * ctx.cost.bytes_touched;
        let ingress_ts = self.log[traversal].ingress_ts;
        let mut out = SwitchOutput::default();
        for (mut pkt, port, extra) in ctx.emissions {
            let offset = pass_latency + extra;
            pkt.header.telemetry.push(TelemetryRecord {
                switch_id: self.id,
                ingress_ts,
                egress_ts: now + offset,
            });
            out.emissions.push(Emission {
                packet: pkt,
                port,
                offset_ns: offset,
            });
        }
        for (pkt, depth, extra) in ctx.recircs {
            out.recirc.push(RecircRequest {
                packet: pkt,
                depth,
                traversal,
                offset_ns: pass_latency + extra + self.recirc_latency_ns,
            });
        }
        out
    }

    fn exec_forward(
        &mut self,
        f: &crate::primitives::ForwardAction,
        mut packet: Packet,
        depth: u8,
        ctx: &mut PassCtx,
    ) -> Disposition {
        if f.outputs.is_empty() {
            return Disposition::DroppedEmptyPorts;
        }
        if let Some(next) = f.set_next {
            packet.header.next_primitive = next;
        }
        ctx.cost.clones += f.outputs.len() as u64 - 1;
        for out in &f.outputs {
            match out {
                Output::Port(p) => ctx.emissions.push((packet.clone(), *p, 0)),
                Output::Recirculate => {
                    ctx.cost.recirculations += 1;
                    if depth + 1 > self.max_recirc {
                        self.counters.loop_guarded += 1;
                    } else {
                        ctx.recircs.push((packet.clone(), depth + 1, 0));
                    }
                }
            }
        }
        Disposition::Forwarded
    }

    fn exec_split(
        &mut self,
        s: &crate::primitives::SplitAction,
        mut packet: Packet,
        ctx: &mut PassCtx,
    ) -> Disposition {
        let stream = packet.header.stream_id;
        let k = s.gen_size as usize;
        if packet.payload.len() > u16::MAX as usize {
            return Disposition::DroppedMalformed;
        }
        let seq = self.split_seq.entry(stream).or_insert(0);
        let index = (*seq % k as u64) as usize;
        let batch = (*seq / k as u64) as u32;
        *seq += 1;

        packet.header.batch_number = batch;
        packet.header.coeffs = CoeffVector::basis(k, index);
        packet.header.orig_len = packet.payload.len() as u16;
        packet.header.next_primitive = s.outputs[index].next;

        ctx.cost.bytes_touched += packet.payload.len() as u64;
        let bank = self.banks.get_mut(&stream).expect("validated at build");
        bank.store(
            batch,
            packet.header.coeffs.clone(),
            SymbolBuffer::new(packet.payload.clone()),
            Some(packet.header.orig_len),
        );
        let port = s.outputs[index].port;
        ctx.emissions.push((packet.clone(), port, 0));

        self.try_fire_batch(stream, batch, &packet, ctx);
        Disposition::Forwarded
    }

    fn exec_gather(&mut self, packet: Packet, ctx: &mut PassCtx) -> Disposition {
        let stream = packet.header.stream_id;
        let Some(bank) = self.banks.get_mut(&stream) else {
            return Disposition::DroppedMalformed;
        };
        if packet.header.coeffs.len() != bank.gen_size() as usize {
            return Disposition::DroppedMalformed;
        }
        let batch = packet.header.batch_number;
        ctx.cost.bytes_touched += packet.payload.len() as u64;
        let orig_len = packet
            .header
            .coeffs
            .basis_index()
            .map(|_| packet.header.orig_len);
        let outcome = bank.store(
            batch,
            packet.header.coeffs.clone(),
            SymbolBuffer::new(packet.payload.clone()),
            orig_len,
        );
        let gather_outcome = match outcome {
            StoreOutcome::DuplicateRank => GatherOutcome::Redundant,
            StoreOutcome::AlreadyDelivered => GatherOutcome::Late,
            StoreOutcome::NewRow | StoreOutcome::Evicted { .. } => {
                if bank.rank_of(batch) == bank.gen_size() as usize {
                    GatherOutcome::Ready
                } else {
                    GatherOutcome::Stored
                }
            }
        };
        match gather_outcome {
            GatherOutcome::Redundant => Disposition::DroppedRedundant,
            GatherOutcome::Late => Disposition::DroppedLate,
            GatherOutcome::Stored => Disposition::Stored,
            GatherOutcome::Ready => {
                let decoded = self.try_fire_batch(stream, batch, &packet, ctx);
                if decoded {
                    Disposition::ConsumedByDecode
                } else {
                    Disposition::Stored
                }
            }
        }
    }

    /// Fires code and decode configs for a batch that just reached full rank.
    /// Returns true when a decode config consumed the batch.
    fn try_fire_batch(
        &mut self,
        stream: u16,
        batch: u32,
        trigger: &Packet,
        ctx: &mut PassCtx,
    ) -> bool {
        let k = {
            let bank = &self.banks[&stream];
            if bank.is_delivered(batch) || bank.rank_of(batch) != bank.gen_size() as usize {
                return false;
            }
            bank.gen_size() as usize
        };

        let originals = match self.batch_originals(stream, batch, k) {
            Ok(o) => o,
            Err(_) => {
                self.counters.integrity_failures += 1;
                self.banks.get_mut(&stream).unwrap().mark_delivered(batch);
                return false;
            }
        };
        let padded_len = originals.first().map(|s| s.len()).unwrap_or(0);

        let mut fired = false;
        let code_configs: Vec<CodeConfig> = self
            .code
            .iter()
            .filter(|c| c.stream_id == stream)
            .cloned()
            .collect();
        for config in code_configs {
            fired = true;
            self.counters.coded_batches += 1;
            for row in &config.rows {
                let payload = combine(&row.coeffs, &originals)
                    .expect("code rows validated against gen_size")
                    .into_bytes();
                ctx.cost.bytes_touched += ((k + 1) * padded_len) as u64;
                let generated = Packet {
                    header: CodingHeader {
                        stream_id: stream,
                        batch_number: batch,
                        next_primitive: row.next,
                        coeffs: row.coeffs.clone(),
                        orig_len: 0,
                        telemetry: trigger.header.telemetry.clone(),
                    },
                    payload,
                };
                self.clone_and_recirculate(generated, 0, ctx);
            }
        }

        let decode_config = self.decode.iter().find(|d| d.stream_id == stream).copied();
        let mut decoded = false;
        if let Some(cfg) = decode_config {
            fired = true;
            decoded = true;
            self.counters.decoded_batches += 1;
            let bank = &self.banks[&stream];
            let slot = bank.slot(batch).expect("slot checked above");
            let basis_seen = slot.basis_seen.clone();
            let orig_lens = slot.orig_lens.clone();
            let mut materialized = 0u64;
            for i in 0..k {
                let true_len = orig_lens[i]
                    .map(|l| (l as usize).min(padded_len))
                    .unwrap_or(padded_len);
                let payload = originals[i].as_bytes()[..true_len].to_vec();
                let deliver = Packet {
                    header: CodingHeader {
                        stream_id: stream,
                        batch_number: batch,
                        next_primitive: Primitive::Deliver,
                        coeffs: CoeffVector::basis(k, i),
                        orig_len: true_len as u16,
                        telemetry: trigger.header.telemetry.clone(),
                    },
                    payload,
                };
                if basis_seen[i] {
                    ctx.emissions.push((deliver, cfg.deliver_port, ctx.cursor));
                    ctx.cursor += 1;
                } else {
                    materialized += 1;
                    ctx.cost.bytes_touched += (k * padded_len) as u64;
                    self.clone_and_recirculate(deliver, 0, ctx);
                }
            }
            self.counters.delivered_symbols += k as u64;
            ctx.decode_branch = Some(if materialized > 0 {
                DecodeBranch::Arithmetic
            } else {
                DecodeBranch::PassThrough
            });
        }

        if fired {
            self.banks.get_mut(&stream).unwrap().mark_delivered(batch);
        }
        decoded
    }

    /// Assembles the batch's original symbols, zero-padded to the batch
    /// maximum, solving when stored rows are not all basis vectors.
    fn batch_originals(
        &self,
        stream: u16,
        batch: u32,
        k: usize,
    ) -> Result<Vec<SymbolBuffer>, GfError> {
        let bank = &self.banks[&stream];
        let slot = bank.slot(batch).expect("caller checked occupancy");
        let padded_len = slot.rows.iter().map(|(_, s)| s.len()).max().unwrap_or(0);
        if slot.basis_seen.iter().all(|&b| b) {
            let mut out = vec![SymbolBuffer::zeroed(padded_len); k];
            for (c, s) in &slot.rows {
                if let Some(i) = c.basis_index() {
                    out[i] = s.padded_to(padded_len);
                }
            }
            return Ok(out);
        }
        let rows: Vec<(CoeffVector, SymbolBuffer)> = slot
            .rows
            .iter()
            .map(|(c, s)| (c.clone(), s.padded_to(padded_len)))
            .collect();
        solve(&rows, k)
    }

    /// Generation loop: a mutated copy re-enters the ingress pipeline after
    /// the recirculation latency, subject to the depth guard.
    fn clone_and_recirculate(&mut self, packet: Packet, parent_depth: u8, ctx: &mut PassCtx) {
        ctx.cost.clones += 1;
        ctx.cost.recirculations += 1;
        if parent_depth + 1 > self.max_recirc {
            self.counters.loop_guarded += 1;
            return;
        }
        ctx.recircs.push((packet, parent_depth + 1, ctx.cursor));
        // keep later deliveries strictly after this one's re-emission
        ctx.cursor += self.recirc_latency_ns + self.cost_model.lookup_ns + 1;
    }
}

#[derive(Default)]
struct PassCtx {
    cost: PipelineCost,
    emissions: Vec<(Packet, PortId, u64)>,
    recircs: Vec<(Packet, u8, u64)>,
    cursor: u64,
    decode_branch: Option<DecodeBranch>,
}

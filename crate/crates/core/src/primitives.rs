//! The five atomic coding primitives — split, code, forward, gather, decode —
//! expressed as match-table entries and switch-level configs over the
//! register-bank substrate in [`crate::switch`].
//!
//! Every primitive table key carries the stream id. Split, forward and gather
//! are bound to ingress table entries matched by `(stream_id, next_primitive,
//! qualifier)`. Code and decode are bank-triggered: they fire when a batch's
//! stored rows reach the generation size, and they materialize new packets
//! through the clone + recirculate loop. A recirculated packet re-enters the
//! ingress table with the `Recirculated` qualifier, so its emission is itself
//! a table entry the control plane installs.

use crate::codec::Primitive;
use crate::gf::CoeffVector;

/// Node identifier shared by hosts and switches.
pub type NodeId = u16;

/// Port identifier, unique per node.
pub type PortId = u16;

/// Third component of a table key. `Any` matches all arrivals from links;
/// `InPort` narrows to one ingress port; `Recirculated` matches only packets
/// re-entering via the recirculation path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Qualifier {
    Any,
    InPort(PortId),
    Recirculated,
}

/// Match key of an ingress table entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TableKey {
    pub stream_id: u16,
    pub next_primitive: Primitive,
    pub qualifier: Qualifier,
}

/// Where a forward action sends copies: out a port, or back around through
/// the recirculation path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Output {
    Port(PortId),
    Recirculate,
}

/// Unicast or multicast forwarding. More than one output clones the packet;
/// all copies are byte-identical apart from telemetry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardAction {
    pub outputs: Vec<Output>,
    /// Rewrites `next_primitive` on every copy for the downstream hop.
    pub set_next: Option<Primitive>,
}

/// Per-generation-position output assignment for the split primitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitOutput {
    pub port: PortId,
    pub next: Primitive,
}

/// Splits a stream arriving from a single interface into batches: assigns
/// generation positions and batch numbers from a per-stream counter, stores
/// each symbol in the register bank for co-resident code configs, and
/// forwards per-index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAction {
    pub gen_size: u8,
    /// One entry per generation position; `outputs.len() == gen_size`.
    pub outputs: Vec<SplitOutput>,
}

/// Collects a batch of incoming packets from multiple interfaces into the
/// stream's register bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GatherAction;

/// Action bound to a table entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Forward(ForwardAction),
    Split(SplitAction),
    Gather(GatherAction),
}

impl Action {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Action::Forward(_) => "forward",
            Action::Split(_) => "split",
            Action::Gather(_) => "gather",
        }
    }
}

/// One ingress table entry: key plus bound primitive action.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableEntry {
    pub key: TableKey,
    pub action: Action,
}

/// One output row of a code config: the generated packet's coefficient
/// vector, the port it leaves on after recirculation, and the primitive the
/// downstream hop applies to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeRow {
    pub coeffs: CoeffVector,
    pub port: PortId,
    pub next: Primitive,
}

/// Generates new packets whose payloads are linear combinations of the
/// batch's stored originals. Fires once per batch when the stream's register
/// bank reaches the generation size; each row is materialized through
/// clone + recirculate and emitted by its companion `Recirculated` entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeConfig {
    pub stream_id: u16,
    pub rows: Vec<CodeRow>,
}

/// Decodes a gathered batch back into its originals and delivers them, in
/// generation order, to the receiver host. Originals that arrived as
/// basis-vector packets pass through; missing ones are materialized through
/// clone + recirculate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeConfig {
    pub stream_id: u16,
    pub deliver_port: PortId,
}

/// Register-bank sizing for one stream on one switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BankSpec {
    pub stream_id: u16,
    /// Ring capacity in batches; slot index is `batch_number % slots`.
    pub slots: usize,
    pub gen_size: u8,
}

/// Default ring capacity, in batches per stream.
pub const DEFAULT_BANK_SLOTS: usize = 64;

//! Control plane: the topology model, max-flow and disjoint-path
//! computation, and compilation of coding functions into per-switch
//! configuration documents.
//!
//! All tie-breaking (path choice, tree choice) goes by lowest node id then
//! lowest port id, so compiled configs are deterministic and can be archived
//! as golden files.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use thiserror::Error;

use crate::codec::Primitive;
use crate::gf::CoeffVector;
use crate::primitives::{
    Action, BankSpec, CodeConfig, CodeRow, DecodeConfig, ForwardAction, GatherAction, NodeId,
    Output, PortId, Qualifier, SplitAction, SplitOutput, TableEntry, TableKey, DEFAULT_BANK_SLOTS,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ControlError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {node} reuses port {port}")]
    DuplicatePort { node: NodeId, port: PortId },
    #[error("nodes {s} and {t} must differ")]
    SameEndpoints { s: NodeId, t: NodeId },
    #[error("need {needed} edge-disjoint paths, found {available}; bottleneck cut: {cut}")]
    Infeasible {
        needed: usize,
        available: usize,
        cut: String,
    },
    #[error("requested rate {requested_bps} b/s exceeds admissible rate {available_bps} b/s")]
    RateInadmissible {
        requested_bps: u64,
        available_bps: u64,
    },
    #[error("no butterfly embedding for the requested endpoints")]
    NoEmbedding,
    #[error("invalid stream spec: {0}")]
    BadSpec(String),
    #[error("host {0} has no access link")]
    NoAccessLink(NodeId),
    #[error("config references missing port {port} on node {node}")]
    MissingPort { node: NodeId, port: PortId },
}

/// Hosts source and sink streams; switches run coding primitives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Host,
    Switch,
}

/// One directed, capacitated, delayed link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TopoLink {
    pub src: NodeId,
    pub sport: PortId,
    pub dst: NodeId,
    pub dport: PortId,
    pub bandwidth_bps: u64,
    pub delay_ns: u64,
}

/// Directed multigraph of hosts, switches and links.
#[derive(Debug, Clone, Default)]
pub struct Topology {
    nodes: BTreeMap<NodeId, NodeKind>,
    links: Vec<TopoLink>,
    outgoing: BTreeMap<NodeId, Vec<usize>>,
    incoming: BTreeMap<NodeId, Vec<usize>>,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, id: NodeId, kind: NodeKind) {
        self.nodes.insert(id, kind);
    }

    pub fn add_link(&mut self, link: TopoLink) -> Result<usize, ControlError> {
        if !self.nodes.contains_key(&link.src) {
            return Err(ControlError::UnknownNode(link.src));
        }
        if !self.nodes.contains_key(&link.dst) {
            return Err(ControlError::UnknownNode(link.dst));
        }
        if self
            .links
            .iter()
            .any(|l| l.src == link.src && l.sport == link.sport)
        {
            return Err(ControlError::DuplicatePort {
                node: link.src,
                port: link.sport,
            });
        }
        if self
            .links
            .iter()
            .any(|l| l.dst == link.dst && l.dport == link.dport)
        {
            return Err(ControlError::DuplicatePort {
                node: link.dst,
                port: link.dport,
            });
        }
        let idx = self.links.len();
        self.links.push(link);
        self.reindex();
        Ok(idx)
    }

    fn reindex(&mut self) {
        // adjacency in (node id, port) order fixes every traversal order
        self.links.sort_by_key(|l| (l.src, l.sport));
        self.outgoing.clear();
        self.incoming.clear();
        for (i, l) in self.links.iter().enumerate() {
            self.outgoing.entry(l.src).or_default().push(i);
            self.incoming.entry(l.dst).or_default().push(i);
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, NodeKind)> + '_ {
        self.nodes.iter().map(|(&id, &k)| (id, k))
    }

    pub fn node_kind(&self, id: NodeId) -> Option<NodeKind> {
        self.nodes.get(&id).copied()
    }

    pub fn links(&self) -> &[TopoLink] {
        &self.links
    }

    pub fn link(&self, idx: usize) -> &TopoLink {
        &self.links[idx]
    }

    pub fn outgoing(&self, node: NodeId) -> &[usize] {
        self.outgoing.get(&node).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn incoming(&self, node: NodeId) -> &[usize] {
        self.incoming.get(&node).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Link index for a (source node, source port) pair.
    pub fn link_from(&self, node: NodeId, port: PortId) -> Option<usize> {
        self.outgoing(node)
            .iter()
            .copied()
            .find(|&i| self.links[i].sport == port)
    }

    /// Overrides one link's propagation delay (sweep parameter in
    /// benchmarks).
    pub fn set_link_delay(
        &mut self,
        node: NodeId,
        port: PortId,
        delay_ns: u64,
    ) -> Result<(), ControlError> {
        let idx = self
            .link_from(node, port)
            .ok_or(ControlError::MissingPort { node, port })?;
        self.links[idx].delay_ns = delay_ns;
        Ok(())
    }

    /// The lowest-port outgoing link of a host.
    pub fn access_link_from(&self, host: NodeId) -> Result<usize, ControlError> {
        self.outgoing(host)
            .first()
            .copied()
            .ok_or(ControlError::NoAccessLink(host))
    }

    /// The lowest-index link delivering into a host.
    pub fn access_link_to(&self, host: NodeId) -> Result<usize, ControlError> {
        self.incoming(host)
            .first()
            .copied()
            .ok_or(ControlError::NoAccessLink(host))
    }

    /// Parses the line-oriented text format:
    ///
    /// ```text
    /// node <id> host|switch
    /// link <id>:<port> <id>:<port> <bandwidth_bps> <delay_s>
    /// ```
    pub fn parse(text: &str) -> Result<Self, ControlError> {
        let mut topo = Topology::new();
        let mut pending_links = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = no + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let mut tok = stripped.split_whitespace();
            let kind = tok.next().unwrap();
            let parse_err = |msg: &str| ControlError::Parse {
                line,
                msg: msg.to_string(),
            };
            match kind {
                "node" => {
                    let id: NodeId = tok
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| parse_err("expected `node <id> host|switch`"))?;
                    let kind = match tok.next() {
                        Some("host") => NodeKind::Host,
                        Some("switch") => NodeKind::Switch,
                        _ => return Err(parse_err("expected `host` or `switch`")),
                    };
                    topo.add_node(id, kind);
                }
                "link" => {
                    let ep = |t: Option<&str>| -> Option<(NodeId, PortId)> {
                        let (n, p) = t?.split_once(':')?;
                        Some((n.parse().ok()?, p.parse().ok()?))
                    };
                    let (src, sport) =
                        ep(tok.next()).ok_or_else(|| parse_err("expected `<id>:<port>`"))?;
                    let (dst, dport) =
                        ep(tok.next()).ok_or_else(|| parse_err("expected `<id>:<port>`"))?;
                    let bandwidth_bps: u64 = tok
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| parse_err("expected bandwidth in bits/s"))?;
                    let delay_s: f64 = tok
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| parse_err("expected delay in seconds"))?;
                    if bandwidth_bps == 0 || !delay_s.is_finite() || delay_s < 0.0 {
                        return Err(parse_err("bandwidth must be positive, delay nonnegative"));
                    }
                    pending_links.push((
                        line,
                        TopoLink {
                            src,
                            sport,
                            dst,
                            dport,
                            bandwidth_bps,
                            delay_ns: (delay_s * 1e9).round() as u64,
                        },
                    ));
                }
                other => {
                    return Err(parse_err(&format!("unknown directive `{other}`")));
                }
            }
        }
        for (line, link) in pending_links {
            topo.add_link(link).map_err(|e| ControlError::Parse {
                line,
                msg: e.to_string(),
            })?;
        }
        Ok(topo)
    }
}

/// Max-flow over the given per-link capacities via BFS augmenting paths.
/// Returns the flow value together with per-link flow amounts.
fn max_flow_with_caps(topo: &Topology, caps: &[u64], s: NodeId, t: NodeId) -> (u64, Vec<u64>) {
    let n = topo.links.len();
    let mut flow = vec![0u64; n];
    let mut total = 0u64;
    if s == t {
        return (0, flow);
    }
    loop {
        // BFS on the residual graph; parent edge per node, forward or reverse
        let mut parent: BTreeMap<NodeId, (usize, bool)> = BTreeMap::new();
        let mut visited: BTreeSet<NodeId> = BTreeSet::new();
        visited.insert(s);
        let mut queue = VecDeque::new();
        queue.push_back(s);
        'bfs: while let Some(v) = queue.pop_front() {
            for &i in topo.outgoing(v) {
                let l = &topo.links[i];
                if flow[i] < caps[i] && visited.insert(l.dst) {
                    parent.insert(l.dst, (i, true));
                    if l.dst == t {
                        break 'bfs;
                    }
                    queue.push_back(l.dst);
                }
            }
            for &i in topo.incoming(v) {
                let l = &topo.links[i];
                if flow[i] > 0 && visited.insert(l.src) {
                    parent.insert(l.src, (i, false));
                    if l.src == t {
                        break 'bfs;
                    }
                    queue.push_back(l.src);
                }
            }
        }
        if !visited.contains(&t) {
            break;
        }
        let mut bottleneck = u64::MAX;
        let mut v = t;
        while v != s {
            let (i, fwd) = parent[&v];
            let room = if fwd { caps[i] - flow[i] } else { flow[i] };
            bottleneck = bottleneck.min(room);
            v = if fwd {
                topo.links[i].src
            } else {
                topo.links[i].dst
            };
        }
        let mut v = t;
        while v != s {
            let (i, fwd) = parent[&v];
            if fwd {
                flow[i] += bottleneck;
                v = topo.links[i].src;
            } else {
                flow[i] -= bottleneck;
                v = topo.links[i].dst;
            }
        }
        total += bottleneck;
    }
    (total, flow)
}

/// Nodes reachable from `s` in the residual graph of the given flow; the
/// links leaving this set form a minimum cut.
fn residual_reachable(topo: &Topology, caps: &[u64], flow: &[u64], s: NodeId) -> BTreeSet<NodeId> {
    let mut visited = BTreeSet::new();
    visited.insert(s);
    let mut queue = VecDeque::new();
    queue.push_back(s);
    while let Some(v) = queue.pop_front() {
        for &i in topo.outgoing(v) {
            if flow[i] < caps[i] && visited.insert(topo.links[i].dst) {
                queue.push_back(topo.links[i].dst);
            }
        }
        for &i in topo.incoming(v) {
            if flow[i] > 0 && visited.insert(topo.links[i].src) {
                queue.push_back(topo.links[i].src);
            }
        }
    }
    visited
}

/// Value of the maximum s→t flow respecting link bandwidths, in bits/s.
pub fn max_flow(topo: &Topology, s: NodeId, t: NodeId) -> Result<u64, ControlError> {
    if s == t {
        return Err(ControlError::SameEndpoints { s, t });
    }
    if topo.node_kind(s).is_none() {
        return Err(ControlError::UnknownNode(s));
    }
    if topo.node_kind(t).is_none() {
        return Err(ControlError::UnknownNode(t));
    }
    let caps: Vec<u64> = topo.links.iter().map(|l| l.bandwidth_bps).collect();
    Ok(max_flow_with_caps(topo, &caps, s, t).0)
}

/// Minimum over receivers of the source-to-receiver max-flow: the admissible
/// multicast rate.
pub fn min_multicast_rate(
    topo: &Topology,
    s: NodeId,
    receivers: &[NodeId],
) -> Result<u64, ControlError> {
    if receivers.is_empty() {
        return Err(ControlError::BadSpec("receivers must be nonempty".into()));
    }
    let mut rate = u64::MAX;
    for &t in receivers {
        rate = rate.min(max_flow(topo, s, t)?);
    }
    Ok(rate)
}

/// Extracts `n` pairwise edge-disjoint s→t paths from a unit-capacity flow
/// decomposition. Paths are returned as link-index sequences, sorted by
/// (length, node sequence). Fails with the bottleneck cut when fewer than
/// `n` disjoint paths exist.
pub fn edge_disjoint_paths(
    topo: &Topology,
    s: NodeId,
    t: NodeId,
    n: usize,
) -> Result<Vec<Vec<usize>>, ControlError> {
    if s == t {
        return Err(ControlError::SameEndpoints { s, t });
    }
    let caps: Vec<u64> = vec![1; topo.links.len()];
    let (value, mut flow) = max_flow_with_caps(topo, &caps, s, t);
    if (value as usize) < n {
        let reach = residual_reachable(topo, &caps, &flow, s);
        let cut: Vec<String> = topo
            .links
            .iter()
            .filter(|l| reach.contains(&l.src) && !reach.contains(&l.dst))
            .map(|l| format!("{}:{}->{}:{}", l.src, l.sport, l.dst, l.dport))
            .collect();
        return Err(ControlError::Infeasible {
            needed: n,
            available: value as usize,
            cut: cut.join(", "),
        });
    }
    let mut paths = Vec::with_capacity(n);
    for _ in 0..n {
        // walk flow edges from s, lowest link index first; trim any loops so
        // the returned path is simple
        let mut path: Vec<usize> = Vec::new();
        let mut seen_nodes: Vec<NodeId> = vec![s];
        let mut v = s;
        while v != t {
            let &i = topo
                .outgoing(v)
                .iter()
                .find(|&&i| flow[i] > 0)
                .expect("flow conservation guarantees an exit edge");
            flow[i] -= 1;
            v = topo.links[i].dst;
            if let Some(pos) = seen_nodes.iter().position(|&x| x == v) {
                // drop the cycle we just closed
                path.truncate(pos);
                seen_nodes.truncate(pos + 1);
            } else {
                path.push(i);
                seen_nodes.push(v);
            }
        }
        paths.push(path);
    }
    paths.sort_by_key(|p| {
        (
            p.len(),
            p.iter().map(|&i| topo.links[i].src).collect::<Vec<_>>(),
            p.first().map(|&i| topo.links[i].sport),
        )
    });
    Ok(paths)
}

/// Which coding function to compile for a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FunctionKind {
    /// k data paths plus one all-ones parity path; tolerates any single path
    /// failure with zero loss. `paths` = k + 1.
    Diversity { paths: u8 },
    /// Split across two branches with an XOR relay over the shared
    /// bottleneck, reaching both receivers at the min max-flow rate.
    ButterflyMulticast,
}

/// What the coding application is asked to realize for one stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamSpec {
    pub stream_id: u16,
    pub source: NodeId,
    pub receivers: Vec<NodeId>,
    pub rate_bps: u64,
    pub gen_size: u8,
    pub kind: FunctionKind,
}

/// Per-stream parameters shared by every switch handling the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamParams {
    pub gen_size: u8,
}

/// Everything one switch needs for its part of the coding functions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SwitchDoc {
    pub entries: Vec<TableEntry>,
    pub code: Vec<CodeConfig>,
    pub decode: Vec<DecodeConfig>,
    pub banks: Vec<BankSpec>,
}

/// Send or receive role of a host for one stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HostRole {
    Sender {
        stream_id: u16,
        entry: Primitive,
        gen_size: u8,
    },
    Receiver { stream_id: u16 },
}

/// The compiled configuration for one or more coding functions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigDocument {
    pub streams: BTreeMap<u16, StreamParams>,
    pub switches: BTreeMap<NodeId, SwitchDoc>,
    pub hosts: BTreeMap<NodeId, Vec<HostRole>>,
}

impl ConfigDocument {
    pub fn switch_mut(&mut self, id: NodeId) -> &mut SwitchDoc {
        self.switches.entry(id).or_default()
    }

    /// Sorts table entries by key so structurally equal documents compare
    /// equal regardless of construction order.
    fn normalize(mut self) -> Self {
        for doc in self.switches.values_mut() {
            doc.entries.sort_by_key(|e| e.key);
        }
        self
    }

    /// Verifies that every referenced node and egress port exists in the
    /// topology.
    pub fn validate_against(&self, topo: &Topology) -> Result<(), ControlError> {
        let check_port = |node: NodeId, port: PortId| -> Result<(), ControlError> {
            topo.link_from(node, port)
                .map(|_| ())
                .ok_or(ControlError::MissingPort { node, port })
        };
        for (&sw, doc) in &self.switches {
            if topo.node_kind(sw) != Some(NodeKind::Switch) {
                return Err(ControlError::UnknownNode(sw));
            }
            for e in &doc.entries {
                match &e.action {
                    Action::Forward(f) => {
                        for o in &f.outputs {
                            if let Output::Port(p) = o {
                                check_port(sw, *p)?;
                            }
                        }
                    }
                    Action::Split(s) => {
                        for o in &s.outputs {
                            check_port(sw, o.port)?;
                        }
                    }
                    Action::Gather(_) => {}
                }
            }
            for c in &doc.code {
                for row in &c.rows {
                    check_port(sw, row.port)?;
                }
            }
            for d in &doc.decode {
                check_port(sw, d.deliver_port)?;
            }
        }
        for &h in self.hosts.keys() {
            if topo.node_kind(h) != Some(NodeKind::Host) {
                return Err(ControlError::UnknownNode(h));
            }
        }
        Ok(())
    }

    /// Emits the line-oriented config text, deterministically ordered.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, p) in &self.streams {
            let _ = writeln!(out, "stream {id} gen-size {}", p.gen_size);
        }
        for (sw, doc) in &self.switches {
            for b in &doc.banks {
                let _ = writeln!(
                    out,
                    "switch {sw} bank {} slots {} gen-size {}",
                    b.stream_id, b.slots, b.gen_size
                );
            }
            let mut entries = doc.entries.clone();
            entries.sort_by_key(|e| e.key);
            for e in entries {
                let qual = match e.key.qualifier {
                    Qualifier::Any => "any".to_string(),
                    Qualifier::InPort(p) => format!("port:{p}"),
                    Qualifier::Recirculated => "recirc".to_string(),
                };
                let head = format!(
                    "switch {sw} table {} {} {qual}",
                    e.key.stream_id, e.key.next_primitive
                );
                match &e.action {
                    Action::Forward(f) => {
                        let ports: Vec<String> = f
                            .outputs
                            .iter()
                            .map(|o| match o {
                                Output::Port(p) => p.to_string(),
                                Output::Recirculate => "recirc".to_string(),
                            })
                            .collect();
                        let next = f
                            .set_next
                            .map(|p| p.to_string())
                            .unwrap_or_else(|| "keep".to_string());
                        let _ =
                            writeln!(out, "{head} forward ports {} next {next}", ports.join(","));
                    }
                    Action::Split(s) => {
                        let map: Vec<String> = s
                            .outputs
                            .iter()
                            .enumerate()
                            .map(|(i, o)| format!("{i}:{}:{}", o.port, o.next))
                            .collect();
                        let _ = writeln!(out, "{head} split map {}", map.join(","));
                    }
                    Action::Gather(_) => {
                        let _ = writeln!(out, "{head} gather");
                    }
                }
            }
            for c in &doc.code {
                for row in &c.rows {
                    let hex: String = row
                        .coeffs
                        .as_bytes()
                        .iter()
                        .map(|b| format!("{b:02x}"))
                        .collect();
                    let _ = writeln!(
                        out,
                        "switch {sw} code {} row {hex} port {} next {}",
                        c.stream_id, row.port, row.next
                    );
                }
            }
            for d in &doc.decode {
                let _ = writeln!(
                    out,
                    "switch {sw} decode {} deliver {}",
                    d.stream_id, d.deliver_port
                );
            }
        }
        for (host, roles) in &self.hosts {
            for role in roles {
                match role {
                    HostRole::Sender {
                        stream_id,
                        entry,
                        gen_size,
                    } => {
                        let _ = writeln!(
                            out,
                            "host {host} sender {stream_id} entry {entry} gen-size {gen_size}"
                        );
                    }
                    HostRole::Receiver { stream_id } => {
                        let _ = writeln!(out, "host {host} receiver {stream_id}");
                    }
                }
            }
        }
        out
    }

    /// Parses the text emitted by [`ConfigDocument::to_text`].
    pub fn from_text(text: &str) -> Result<Self, ControlError> {
        let mut doc = ConfigDocument::default();
        for (no, raw) in text.lines().enumerate() {
            let line = no + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = stripped.split_whitespace().collect();
            let err = |msg: &str| ControlError::Parse {
                line,
                msg: msg.to_string(),
            };
            let int = |t: Option<&&str>| -> Option<u64> { t.and_then(|v| v.parse().ok()) };
            match tokens[0] {
                "stream" => {
                    let id = int(tokens.get(1)).ok_or_else(|| err("stream id"))? as u16;
                    if tokens.get(2) != Some(&"gen-size") {
                        return Err(err("expected `gen-size`"));
                    }
                    let k = int(tokens.get(3)).ok_or_else(|| err("gen size"))? as u8;
                    doc.streams.insert(id, StreamParams { gen_size: k });
                }
                "switch" => {
                    let sw = int(tokens.get(1)).ok_or_else(|| err("switch id"))? as NodeId;
                    match tokens.get(2) {
                        Some(&"bank") => {
                            let stream = int(tokens.get(3)).ok_or_else(|| err("stream id"))? as u16;
                            if tokens.get(4) != Some(&"slots") || tokens.get(6) != Some(&"gen-size")
                            {
                                return Err(err("expected `slots <n> gen-size <k>`"));
                            }
                            let slots =
                                int(tokens.get(5)).ok_or_else(|| err("slot count"))? as usize;
                            let k = int(tokens.get(7)).ok_or_else(|| err("gen size"))? as u8;
                            doc.switch_mut(sw).banks.push(BankSpec {
                                stream_id: stream,
                                slots,
                                gen_size: k,
                            });
                        }
                        Some(&"table") => {
                            let stream = int(tokens.get(3)).ok_or_else(|| err("stream id"))? as u16;
                            let prim = tokens
                                .get(4)
                                .and_then(|t| Primitive::from_name(t))
                                .ok_or_else(|| err("primitive name"))?;
                            let qualifier = match tokens.get(5) {
                                Some(&"any") => Qualifier::Any,
                                Some(&"recirc") => Qualifier::Recirculated,
                                Some(q) if q.starts_with("port:") => Qualifier::InPort(
                                    q[5..].parse().map_err(|_| err("port qualifier"))?,
                                ),
                                _ => return Err(err("qualifier")),
                            };
                            let key = TableKey {
                                stream_id: stream,
                                next_primitive: prim,
                                qualifier,
                            };
                            let action = match tokens.get(6) {
                                Some(&"forward") => {
                                    if tokens.get(7) != Some(&"ports") {
                                        return Err(err("expected `ports`"));
                                    }
                                    let outputs = tokens
                                        .get(8)
                                        .ok_or_else(|| err("port list"))?
                                        .split(',')
                                        .map(|p| {
                                            if p == "recirc" {
                                                Ok(Output::Recirculate)
                                            } else {
                                                p.parse()
                                                    .map(Output::Port)
                                                    .map_err(|_| err("port number"))
                                            }
                                        })
                                        .collect::<Result<Vec<_>, _>>()?;
                                    if tokens.get(9) != Some(&"next") {
                                        return Err(err("expected `next`"));
                                    }
                                    let set_next = match tokens.get(10) {
                                        Some(&"keep") => None,
                                        Some(t) => Some(
                                            Primitive::from_name(t)
                                                .ok_or_else(|| err("primitive name"))?,
                                        ),
                                        None => return Err(err("next value")),
                                    };
                                    Action::Forward(ForwardAction { outputs, set_next })
                                }
                                Some(&"split") => {
                                    if tokens.get(7) != Some(&"map") {
                                        return Err(err("expected `map`"));
                                    }
                                    let mut outputs = Vec::new();
                                    for part in
                                        tokens.get(8).ok_or_else(|| err("split map"))?.split(',')
                                    {
                                        let mut f = part.split(':');
                                        let idx: usize = f
                                            .next()
                                            .and_then(|v| v.parse().ok())
                                            .ok_or_else(|| err("split index"))?;
                                        if idx != outputs.len() {
                                            return Err(err("split map out of order"));
                                        }
                                        let port: PortId = f
                                            .next()
                                            .and_then(|v| v.parse().ok())
                                            .ok_or_else(|| err("split port"))?;
                                        let next = f
                                            .next()
                                            .and_then(Primitive::from_name)
                                            .ok_or_else(|| err("split next"))?;
                                        outputs.push(SplitOutput { port, next });
                                    }
                                    Action::Split(SplitAction {
                                        gen_size: outputs.len() as u8,
                                        outputs,
                                    })
                                }
                                Some(&"gather") => Action::Gather(GatherAction),
                                _ => return Err(err("action")),
                            };
                            doc.switch_mut(sw).entries.push(TableEntry { key, action });
                        }
                        Some(&"code") => {
                            let stream = int(tokens.get(3)).ok_or_else(|| err("stream id"))? as u16;
                            if tokens.get(4) != Some(&"row")
                                || tokens.get(6) != Some(&"port")
                                || tokens.get(8) != Some(&"next")
                            {
                                return Err(err("expected `row <hex> port <p> next <prim>`"));
                            }
                            let hex = tokens.get(5).ok_or_else(|| err("coefficients"))?;
                            if hex.len() % 2 != 0 {
                                return Err(err("odd hex length"));
                            }
                            let coeffs: Vec<u8> = (0..hex.len() / 2)
                                .map(|i| u8::from_str_radix(&hex[2 * i..2 * i + 2], 16))
                                .collect::<Result<_, _>>()
                                .map_err(|_| err("bad hex"))?;
                            let port = int(tokens.get(7)).ok_or_else(|| err("port"))? as PortId;
                            let next = tokens
                                .get(9)
                                .and_then(|t| Primitive::from_name(t))
                                .ok_or_else(|| err("primitive name"))?;
                            let row = CodeRow {
                                coeffs: CoeffVector::from_bytes(&coeffs),
                                port,
                                next,
                            };
                            let sw_doc = doc.switch_mut(sw);
                            if let Some(c) = sw_doc.code.iter_mut().find(|c| c.stream_id == stream)
                            {
                                c.rows.push(row);
                            } else {
                                sw_doc.code.push(CodeConfig {
                                    stream_id: stream,
                                    rows: vec![row],
                                });
                            }
                        }
                        Some(&"decode") => {
                            let stream = int(tokens.get(3)).ok_or_else(|| err("stream id"))? as u16;
                            if tokens.get(4) != Some(&"deliver") {
                                return Err(err("expected `deliver`"));
                            }
                            let port = int(tokens.get(5)).ok_or_else(|| err("port"))? as PortId;
                            doc.switch_mut(sw).decode.push(DecodeConfig {
                                stream_id: stream,
                                deliver_port: port,
                            });
                        }
                        _ => return Err(err("expected bank|table|code|decode")),
                    }
                }
                "host" => {
                    let host = int(tokens.get(1)).ok_or_else(|| err("host id"))? as NodeId;
                    match tokens.get(2) {
                        Some(&"sender") => {
                            let stream = int(tokens.get(3)).ok_or_else(|| err("stream id"))? as u16;
                            if tokens.get(4) != Some(&"entry") || tokens.get(6) != Some(&"gen-size")
                            {
                                return Err(err("expected `entry <prim> gen-size <k>`"));
                            }
                            let entry = tokens
                                .get(5)
                                .and_then(|t| Primitive::from_name(t))
                                .ok_or_else(|| err("primitive name"))?;
                            let k = int(tokens.get(7)).ok_or_else(|| err("gen size"))? as u8;
                            doc.hosts.entry(host).or_default().push(HostRole::Sender {
                                stream_id: stream,
                                entry,
                                gen_size: k,
                            });
                        }
                        Some(&"receiver") => {
                            let stream = int(tokens.get(3)).ok_or_else(|| err("stream id"))? as u16;
                            doc.hosts
                                .entry(host)
                                .or_default()
                                .push(HostRole::Receiver { stream_id: stream });
                        }
                        _ => return Err(err("expected sender|receiver")),
                    }
                }
                other => return Err(err(&format!("unknown directive `{other}`"))),
            }
        }
        Ok(doc.normalize())
    }
}

/// Forwarding entries under construction: (node, in port) → outputs plus the
/// required rewrite of `next_primitive`. Multicast junctions accumulate
/// several outputs under one key; their rewrites must agree because clones
/// are byte-identical.
#[derive(Default)]
struct ForwardPlan {
    map: BTreeMap<(NodeId, PortId), (BTreeSet<PortId>, Option<Primitive>)>,
}

impl ForwardPlan {
    fn add(
        &mut self,
        node: NodeId,
        in_port: PortId,
        out_port: PortId,
        set_next: Option<Primitive>,
    ) -> Result<(), ControlError> {
        let slot = self.map.entry((node, in_port)).or_default();
        if !slot.0.is_empty() && slot.1 != set_next {
            return Err(ControlError::NoEmbedding);
        }
        slot.0.insert(out_port);
        slot.1 = set_next;
        Ok(())
    }

    fn install(self, doc: &mut ConfigDocument, stream: u16) {
        for ((node, in_port), (ports, set_next)) in self.map {
            doc.switch_mut(node).entries.push(TableEntry {
                key: TableKey {
                    stream_id: stream,
                    next_primitive: Primitive::Forward,
                    qualifier: Qualifier::InPort(in_port),
                },
                action: Action::Forward(ForwardAction {
                    outputs: ports.into_iter().map(Output::Port).collect(),
                    set_next,
                }),
            });
        }
    }
}

/// Lays interior forwarding entries along a path segment. `gather_nodes` are
/// the nodes that expect `next_primitive = gather` on arrival.
fn chain_segment(
    plan: &mut ForwardPlan,
    topo: &Topology,
    segment: &[usize],
    gather_nodes: &BTreeSet<NodeId>,
) -> Result<(), ControlError> {
    for w in segment.windows(2) {
        let prev = topo.link(w[0]);
        let cur = topo.link(w[1]);
        debug_assert_eq!(prev.dst, cur.src);
        let set_next = gather_nodes.contains(&cur.dst).then_some(Primitive::Gather);
        plan.add(cur.src, prev.dport, cur.sport, set_next)?;
    }
    Ok(())
}

/// The primitive a packet must announce when entering the first link of a
/// segment.
fn entry_next(topo: &Topology, first_link: usize, gather_nodes: &BTreeSet<NodeId>) -> Primitive {
    if gather_nodes.contains(&topo.link(first_link).dst) {
        Primitive::Gather
    } else {
        Primitive::Forward
    }
}

fn require_host(topo: &Topology, id: NodeId) -> Result<(), ControlError> {
    match topo.node_kind(id) {
        Some(NodeKind::Host) => Ok(()),
        Some(_) => Err(ControlError::BadSpec(format!("node {id} is not a host"))),
        None => Err(ControlError::UnknownNode(id)),
    }
}

/// Compiles the diversity code: split across k disjoint data paths, one
/// all-ones parity row on the extra path, gather + decode at the egress.
/// Requires `paths == gen_size + 1`.
pub fn compile_diversity(
    topo: &Topology,
    spec: &StreamSpec,
) -> Result<ConfigDocument, ControlError> {
    let FunctionKind::Diversity { paths: p } = spec.kind else {
        return Err(ControlError::BadSpec("spec kind is not diversity".into()));
    };
    if spec.receivers.len() != 1 {
        return Err(ControlError::BadSpec(
            "diversity protects exactly one receiver".into(),
        ));
    }
    let k = spec.gen_size as usize;
    if k == 0 || p as usize != k + 1 {
        return Err(ControlError::BadSpec(format!(
            "diversity needs paths = gen_size + 1, got paths={p}, gen_size={k}"
        )));
    }
    let receiver = spec.receivers[0];
    require_host(topo, spec.source)?;
    require_host(topo, receiver)?;

    let admissible = min_multicast_rate(topo, spec.source, &spec.receivers)?;
    if spec.rate_bps > admissible {
        return Err(ControlError::RateInadmissible {
            requested_bps: spec.rate_bps,
            available_bps: admissible,
        });
    }

    let up = topo.access_link_from(spec.source)?;
    let down = topo.access_link_to(receiver)?;
    let ingress_sw = topo.link(up).dst;
    let egress_sw = topo.link(down).src;
    let deliver_port = topo.link(down).sport;

    let paths = edge_disjoint_paths(topo, ingress_sw, egress_sw, p as usize)?;
    let gather_nodes: BTreeSet<NodeId> = [egress_sw].into();

    let mut doc = ConfigDocument::default();
    doc.streams.insert(
        spec.stream_id,
        StreamParams {
            gen_size: spec.gen_size,
        },
    );
    let mut plan = ForwardPlan::default();

    // data paths carry the originals, one generation position each
    let mut split_outputs = Vec::with_capacity(k);
    for path in paths.iter().take(k) {
        split_outputs.push(SplitOutput {
            port: topo.link(path[0]).sport,
            next: entry_next(topo, path[0], &gather_nodes),
        });
        chain_segment(&mut plan, topo, path, &gather_nodes)?;
    }
    // the extra path carries the parity row
    let parity_path = &paths[k];
    let parity_port = topo.link(parity_path[0]).sport;
    let parity_next = entry_next(topo, parity_path[0], &gather_nodes);
    chain_segment(&mut plan, topo, parity_path, &gather_nodes)?;

    plan.install(&mut doc, spec.stream_id);

    let ingress = doc.switch_mut(ingress_sw);
    ingress.entries.push(TableEntry {
        key: TableKey {
            stream_id: spec.stream_id,
            next_primitive: Primitive::Split,
            qualifier: Qualifier::Any,
        },
        action: Action::Split(SplitAction {
            gen_size: spec.gen_size,
            outputs: split_outputs,
        }),
    });
    ingress.entries.push(TableEntry {
        key: TableKey {
            stream_id: spec.stream_id,
            next_primitive: parity_next,
            qualifier: Qualifier::Recirculated,
        },
        action: Action::Forward(ForwardAction {
            outputs: vec![Output::Port(parity_port)],
            set_next: None,
        }),
    });
    ingress.code.push(CodeConfig {
        stream_id: spec.stream_id,
        rows: vec![CodeRow {
            coeffs: CoeffVector::ones(k),
            port: parity_port,
            next: parity_next,
        }],
    });
    ingress.banks.push(BankSpec {
        stream_id: spec.stream_id,
        slots: DEFAULT_BANK_SLOTS,
        gen_size: spec.gen_size,
    });

    install_decoder(&mut doc, spec, egress_sw, deliver_port);

    doc.hosts
        .entry(spec.source)
        .or_default()
        .push(HostRole::Sender {
            stream_id: spec.stream_id,
            entry: Primitive::Split,
            gen_size: spec.gen_size,
        });
    doc.hosts
        .entry(receiver)
        .or_default()
        .push(HostRole::Receiver {
            stream_id: spec.stream_id,
        });

    let doc = doc.normalize();
    doc.validate_against(topo)?;
    Ok(doc)
}

fn install_decoder(doc: &mut ConfigDocument, spec: &StreamSpec, sw: NodeId, deliver_port: PortId) {
    let d = doc.switch_mut(sw);
    d.entries.push(TableEntry {
        key: TableKey {
            stream_id: spec.stream_id,
            next_primitive: Primitive::Gather,
            qualifier: Qualifier::Any,
        },
        action: Action::Gather(GatherAction),
    });
    d.entries.push(TableEntry {
        key: TableKey {
            stream_id: spec.stream_id,
            next_primitive: Primitive::Deliver,
            qualifier: Qualifier::Recirculated,
        },
        action: Action::Forward(ForwardAction {
            outputs: vec![Output::Port(deliver_port)],
            set_next: None,
        }),
    });
    d.decode.push(DecodeConfig {
        stream_id: spec.stream_id,
        deliver_port,
    });
    d.banks.push(BankSpec {
        stream_id: spec.stream_id,
        slots: DEFAULT_BANK_SLOTS,
        gen_size: spec.gen_size,
    });
}

/// Enumerates all simple s→t paths as link-index sequences, neighbors in
/// (node, port) order, lexicographically ordered output.
fn simple_paths(topo: &Topology, s: NodeId, t: NodeId, limit: usize) -> Vec<Vec<usize>> {
    fn dfs(
        topo: &Topology,
        v: NodeId,
        t: NodeId,
        stack: &mut Vec<usize>,
        visited: &mut BTreeSet<NodeId>,
        out: &mut Vec<Vec<usize>>,
        limit: usize,
    ) {
        if out.len() >= limit {
            return;
        }
        if v == t {
            out.push(stack.clone());
            return;
        }
        for &i in topo.outgoing(v) {
            let next = topo.link(i).dst;
            if visited.contains(&next) {
                continue;
            }
            visited.insert(next);
            stack.push(i);
            dfs(topo, next, t, stack, visited, out, limit);
            stack.pop();
            visited.remove(&next);
        }
    }

    let mut out = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    let mut visited: BTreeSet<NodeId> = [s].into();
    dfs(topo, s, t, &mut stack, &mut visited, &mut out, limit);
    out
}

/// Longest shared edge prefix of two paths.
fn common_prefix_len(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// The shared relay chain of two paths: the edges they have in common, which
/// must form one contiguous run appearing in the same order in both. Returns
/// (start index in a, start index in b, length).
fn common_run(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize)> {
    let set_b: BTreeSet<usize> = b.iter().copied().collect();
    let shared_in_a: Vec<usize> = (0..a.len()).filter(|&i| set_b.contains(&a[i])).collect();
    if shared_in_a.is_empty() {
        return None;
    }
    let start_a = shared_in_a[0];
    let len = shared_in_a.len();
    if shared_in_a != (start_a..start_a + len).collect::<Vec<_>>() {
        return None;
    }
    let run = &a[start_a..start_a + len];
    let start_b = b.iter().position(|&e| e == run[0])?;
    if b.len() < start_b + len || &b[start_b..start_b + len] != run {
        return None;
    }
    Some((start_a, start_b, len))
}

/// The nine segments of a butterfly embedding, all as link-index sequences.
struct Embedding {
    /// Shared branch prefix from the source switch to each junction.
    prefix1: Vec<usize>,
    prefix2: Vec<usize>,
    /// Direct continuation from each junction to its receiver switch.
    direct1: Vec<usize>,
    direct2: Vec<usize>,
    /// Continuation from each junction to the relay head.
    to_relay1: Vec<usize>,
    to_relay2: Vec<usize>,
    /// The shared relay chain (the bottleneck).
    relay: Vec<usize>,
    /// From the relay tail to each receiver switch.
    tail1: Vec<usize>,
    tail2: Vec<usize>,
}

fn edges_disjoint(parts: &[&[usize]]) -> bool {
    let mut seen = BTreeSet::new();
    for part in parts {
        for &e in *part {
            if !seen.insert(e) {
                return false;
            }
        }
    }
    true
}

fn find_embedding(p1: &[Vec<usize>], p2: &[Vec<usize>]) -> Option<Embedding> {
    // B1/B2 are the relay-carrying paths, A1/A2 the direct ones. Candidates
    // are scanned in path-sorted order so the first hit is deterministic.
    for b1 in p1 {
        for b2 in p2 {
            let Some((c1, c2, clen)) = common_run(b1, b2) else {
                continue;
            };
            // the relay chain must leave room for tails into both receivers
            if c1 + clen >= b1.len() || c2 + clen >= b2.len() {
                continue;
            }
            for a1 in p1 {
                if !edges_disjoint(&[a1, b1]) {
                    continue;
                }
                // a1 shares exactly its branch prefix with b2
                let pre1 = common_prefix_len(a1, b2);
                if pre1 == 0 || pre1 > c2 || pre1 >= a1.len() {
                    continue;
                }
                let shared: BTreeSet<usize> = b2.iter().copied().collect();
                if a1[pre1..].iter().any(|e| shared.contains(e)) {
                    continue;
                }
                for a2 in p2 {
                    if !edges_disjoint(&[a2, b2]) || !edges_disjoint(&[a1, a2]) {
                        continue;
                    }
                    let pre2 = common_prefix_len(a2, b1);
                    if pre2 == 0 || pre2 > c1 || pre2 >= a2.len() {
                        continue;
                    }
                    let shared: BTreeSet<usize> = b1.iter().copied().collect();
                    if a2[pre2..].iter().any(|e| shared.contains(e)) {
                        continue;
                    }
                    let emb = Embedding {
                        prefix1: a1[..pre1].to_vec(),
                        prefix2: a2[..pre2].to_vec(),
                        direct1: a1[pre1..].to_vec(),
                        direct2: a2[pre2..].to_vec(),
                        to_relay1: b2[pre1..c2].to_vec(),
                        to_relay2: b1[pre2..c1].to_vec(),
                        relay: b1[c1..c1 + clen].to_vec(),
                        tail1: b1[c1 + clen..].to_vec(),
                        tail2: b2[c2 + clen..].to_vec(),
                    };
                    // junctions must actually forward onward to the relay
                    if emb.to_relay1.is_empty() || emb.to_relay2.is_empty() {
                        continue;
                    }
                    if !edges_disjoint(&[
                        &emb.prefix1,
                        &emb.prefix2,
                        &emb.direct1,
                        &emb.direct2,
                        &emb.to_relay1,
                        &emb.to_relay2,
                        &emb.relay,
                        &emb.tail1,
                        &emb.tail2,
                    ]) {
                        continue;
                    }
                    return Some(emb);
                }
            }
        }
    }
    None
}

/// Compiles the butterfly multicast function for a two-receiver stream: the
/// source switch splits the batch across two branches, branch junctions
/// multicast each original toward its receiver and toward the relay, the
/// relay head gathers and codes the XOR onto the bottleneck, the bottleneck
/// tail multicasts to both receiver branches, and each receiver switch
/// gathers and decodes.
pub fn compile_butterfly(
    topo: &Topology,
    spec: &StreamSpec,
) -> Result<ConfigDocument, ControlError> {
    if spec.kind != FunctionKind::ButterflyMulticast {
        return Err(ControlError::BadSpec("spec kind is not butterfly".into()));
    }
    if spec.receivers.len() != 2 || spec.receivers[0] == spec.receivers[1] {
        return Err(ControlError::BadSpec(
            "butterfly multicast needs two distinct receivers".into(),
        ));
    }
    if spec.gen_size != 2 {
        return Err(ControlError::BadSpec(
            "butterfly multicast codes batches of two".into(),
        ));
    }
    require_host(topo, spec.source)?;
    let mut receivers = spec.receivers.clone();
    receivers.sort_unstable();
    for &r in &receivers {
        require_host(topo, r)?;
    }

    let admissible = min_multicast_rate(topo, spec.source, &receivers)?;
    if spec.rate_bps > admissible {
        return Err(ControlError::RateInadmissible {
            requested_bps: spec.rate_bps,
            available_bps: admissible,
        });
    }

    let up = topo.access_link_from(spec.source)?;
    let ingress_sw = topo.link(up).dst;
    let down1 = topo.access_link_to(receivers[0])?;
    let down2 = topo.access_link_to(receivers[1])?;
    let egress1 = topo.link(down1).src;
    let egress2 = topo.link(down2).src;

    const PATH_LIMIT: usize = 4_096;
    let p1 = simple_paths(topo, ingress_sw, egress1, PATH_LIMIT);
    let p2 = simple_paths(topo, ingress_sw, egress2, PATH_LIMIT);

    let embedding = find_embedding(&p1, &p2).ok_or(ControlError::NoEmbedding)?;
    let doc = build_butterfly_doc(
        topo, spec, &receivers, ingress_sw, egress1, egress2, down1, down2, embedding,
    )?
    .normalize();
    doc.validate_against(topo)?;
    Ok(doc)
}

#[allow(clippy::too_many_arguments)]
fn build_butterfly_doc(
    topo: &Topology,
    spec: &StreamSpec,
    receivers: &[NodeId],
    ingress_sw: NodeId,
    egress1: NodeId,
    egress2: NodeId,
    down1: usize,
    down2: usize,
    emb: Embedding,
) -> Result<ConfigDocument, ControlError> {
    let relay_head = topo.link(emb.relay[0]).src;
    let gather_nodes: BTreeSet<NodeId> = [relay_head, egress1, egress2].into();

    let mut doc = ConfigDocument::default();
    doc.streams.insert(
        spec.stream_id,
        StreamParams {
            gen_size: spec.gen_size,
        },
    );
    let mut plan = ForwardPlan::default();

    // interior hops of every segment
    for seg in [
        &emb.prefix1,
        &emb.prefix2,
        &emb.direct1,
        &emb.direct2,
        &emb.to_relay1,
        &emb.to_relay2,
        &emb.relay,
        &emb.tail1,
        &emb.tail2,
    ] {
        chain_segment(&mut plan, topo, seg, &gather_nodes)?;
    }

    // branch junctions: multicast each original toward its receiver and
    // toward the relay head
    let hook =
        |plan: &mut ForwardPlan, prefix: &[usize], cont: &[usize]| -> Result<(), ControlError> {
            let last = topo.link(*prefix.last().unwrap());
            let first = topo.link(cont[0]);
            debug_assert_eq!(last.dst, first.src);
            let set_next = gather_nodes
                .contains(&first.dst)
                .then_some(Primitive::Gather);
            plan.add(first.src, last.dport, first.sport, set_next)
        };
    hook(&mut plan, &emb.prefix1, &emb.direct1)?;
    hook(&mut plan, &emb.prefix1, &emb.to_relay1)?;
    hook(&mut plan, &emb.prefix2, &emb.direct2)?;
    hook(&mut plan, &emb.prefix2, &emb.to_relay2)?;

    // bottleneck tail: multicast the coded packet into both receiver tails
    hook(&mut plan, &emb.relay, &emb.tail1)?;
    hook(&mut plan, &emb.relay, &emb.tail2)?;

    plan.install(&mut doc, spec.stream_id);

    // source switch: split the batch across the two branch prefixes
    let ingress = doc.switch_mut(ingress_sw);
    ingress.entries.push(TableEntry {
        key: TableKey {
            stream_id: spec.stream_id,
            next_primitive: Primitive::Split,
            qualifier: Qualifier::Any,
        },
        action: Action::Split(SplitAction {
            gen_size: 2,
            outputs: vec![
                SplitOutput {
                    port: topo.link(emb.prefix1[0]).sport,
                    next: entry_next(topo, emb.prefix1[0], &gather_nodes),
                },
                SplitOutput {
                    port: topo.link(emb.prefix2[0]).sport,
                    next: entry_next(topo, emb.prefix2[0], &gather_nodes),
                },
            ],
        }),
    });
    ingress.banks.push(BankSpec {
        stream_id: spec.stream_id,
        slots: DEFAULT_BANK_SLOTS,
        gen_size: spec.gen_size,
    });

    // relay head: gather both originals, code their XOR onto the bottleneck
    let relay_port = topo.link(emb.relay[0]).sport;
    let relay_next = entry_next(topo, emb.relay[0], &gather_nodes);
    let relay = doc.switch_mut(relay_head);
    relay.entries.push(TableEntry {
        key: TableKey {
            stream_id: spec.stream_id,
            next_primitive: Primitive::Gather,
            qualifier: Qualifier::Any,
        },
        action: Action::Gather(GatherAction),
    });
    relay.entries.push(TableEntry {
        key: TableKey {
            stream_id: spec.stream_id,
            next_primitive: relay_next,
            qualifier: Qualifier::Recirculated,
        },
        action: Action::Forward(ForwardAction {
            outputs: vec![Output::Port(relay_port)],
            set_next: None,
        }),
    });
    relay.code.push(CodeConfig {
        stream_id: spec.stream_id,
        rows: vec![CodeRow {
            coeffs: CoeffVector::ones(2),
            port: relay_port,
            next: relay_next,
        }],
    });
    relay.banks.push(BankSpec {
        stream_id: spec.stream_id,
        slots: DEFAULT_BANK_SLOTS,
        gen_size: spec.gen_size,
    });

    install_decoder(&mut doc, spec, egress1, topo.link(down1).sport);
    install_decoder(&mut doc, spec, egress2, topo.link(down2).sport);

    doc.hosts
        .entry(spec.source)
        .or_default()
        .push(HostRole::Sender {
            stream_id: spec.stream_id,
            entry: Primitive::Split,
            gen_size: spec.gen_size,
        });
    for &r in receivers {
        doc.hosts.entry(r).or_default().push(HostRole::Receiver {
            stream_id: spec.stream_id,
        });
    }
    Ok(doc)
}

/// Compiles the store-and-forward baseline: one shortest-path multicast tree
/// of forward entries, no coding anywhere. Senders number batches themselves
/// with a generation size of one.
pub fn compile_forwarding_baseline(
    topo: &Topology,
    spec: &StreamSpec,
) -> Result<ConfigDocument, ControlError> {
    if spec.receivers.is_empty() {
        return Err(ControlError::BadSpec("receivers must be nonempty".into()));
    }
    require_host(topo, spec.source)?;
    for &r in &spec.receivers {
        require_host(topo, r)?;
    }

    // BFS tree from the source; first-discovered parent is the lowest
    // (node, port) by adjacency order
    let mut parent: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut visited: BTreeSet<NodeId> = [spec.source].into();
    let mut queue = VecDeque::from([spec.source]);
    while let Some(v) = queue.pop_front() {
        for &i in topo.outgoing(v) {
            let dst = topo.link(i).dst;
            if visited.insert(dst) {
                parent.insert(dst, i);
                queue.push_back(dst);
            }
        }
    }

    let mut tree_links: BTreeSet<usize> = BTreeSet::new();
    for &r in &spec.receivers {
        if !visited.contains(&r) {
            return Err(ControlError::Infeasible {
                needed: 1,
                available: 0,
                cut: format!("receiver {r} unreachable"),
            });
        }
        let mut v = r;
        while v != spec.source {
            let i = parent[&v];
            tree_links.insert(i);
            v = topo.link(i).src;
        }
    }

    let mut doc = ConfigDocument::default();
    doc.streams
        .insert(spec.stream_id, StreamParams { gen_size: 1 });

    // group tree links by their source switch
    let mut by_switch: BTreeMap<NodeId, Vec<PortId>> = BTreeMap::new();
    for &i in &tree_links {
        let l = topo.link(i);
        if topo.node_kind(l.src) == Some(NodeKind::Switch) {
            by_switch.entry(l.src).or_default().push(l.sport);
        }
    }
    for (sw, mut ports) in by_switch {
        ports.sort_unstable();
        doc.switch_mut(sw).entries.push(TableEntry {
            key: TableKey {
                stream_id: spec.stream_id,
                next_primitive: Primitive::Forward,
                qualifier: Qualifier::Any,
            },
            action: Action::Forward(ForwardAction {
                outputs: ports.into_iter().map(Output::Port).collect(),
                set_next: None,
            }),
        });
    }

    doc.hosts
        .entry(spec.source)
        .or_default()
        .push(HostRole::Sender {
            stream_id: spec.stream_id,
            entry: Primitive::Forward,
            gen_size: 1,
        });
    for &r in &spec.receivers {
        doc.hosts.entry(r).or_default().push(HostRole::Receiver {
            stream_id: spec.stream_id,
        });
    }
    let doc = doc.normalize();
    doc.validate_against(topo)?;
    Ok(doc)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Canonical seven-switch butterfly with one sender host (100) and two
    /// receiver hosts (101, 102). Unit-bandwidth switch links.
    pub(crate) fn butterfly_unit() -> Topology {
        let text = "\
node 1 switch
node 2 switch
node 3 switch
node 4 switch
node 5 switch
node 6 switch
node 7 switch
node 100 host
node 101 host
node 102 host
link 100:1 1:1 10 0.001
link 1:2 6:1 1 0.005
link 1:3 7:1 1 0.005
link 6:2 2:1 1 0.005
link 6:3 4:1 1 0.005
link 7:2 3:1 1 0.005
link 7:3 4:2 1 0.005
link 4:3 5:1 1 0.005
link 5:2 2:2 1 0.005
link 5:3 3:2 1 0.005
link 2:3 101:1 10 0.001
link 3:4 102:1 10 0.001
";
        Topology::parse(text).unwrap()
    }

    /// Three-path diversity topology: ingress 1, parallel switches 2/3/4,
    /// egress 5, hosts 100 and 101.
    pub(crate) fn diversity_topo() -> Topology {
        let text = "\
node 1 switch
node 2 switch
node 3 switch
node 4 switch
node 5 switch
node 100 host
node 101 host
link 100:1 1:1 100 0.005
link 1:2 2:1 100 0.005
link 1:3 3:1 100 0.005
link 1:4 4:1 100 0.005
link 2:2 5:1 100 0.005
link 3:2 5:2 100 0.005
link 4:2 5:3 100 0.005
link 5:4 101:1 100 0.005
";
        Topology::parse(text).unwrap()
    }

    /// Exhaustive min-cut enumeration for small graphs: minimum over all
    /// source-containing subsets of the capacity leaving the subset.
    pub(crate) fn brute_force_min_cut(topo: &Topology, s: NodeId, t: NodeId) -> u64 {
        let others: Vec<NodeId> = topo
            .nodes()
            .map(|(id, _)| id)
            .filter(|&id| id != s && id != t)
            .collect();
        assert!(others.len() <= 20, "oracle is exponential");
        let mut best = u64::MAX;
        for mask in 0u32..(1 << others.len()) {
            let mut side: BTreeSet<NodeId> = [s].into();
            for (bit, &id) in others.iter().enumerate() {
                if mask & (1 << bit) != 0 {
                    side.insert(id);
                }
            }
            let cut: u64 = topo
                .links()
                .iter()
                .filter(|l| side.contains(&l.src) && !side.contains(&l.dst))
                .map(|l| l.bandwidth_bps)
                .sum();
            best = best.min(cut);
        }
        best
    }

    fn tiny_rng(state: &mut u64) -> u64 {
        *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = *state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    #[test]
    fn topology_parse_rejects_unknown_node_and_duplicate_port() {
        let bad = "node 1 switch\nlink 1:1 2:1 10 0.001\n";
        assert!(matches!(
            Topology::parse(bad),
            Err(ControlError::Parse { line: 2, .. })
        ));
        let dup = "node 1 switch\nnode 2 switch\nnode 3 switch\n\
link 1:1 2:1 10 0.001\nlink 1:1 3:1 10 0.001\n";
        assert!(matches!(
            Topology::parse(dup),
            Err(ControlError::Parse { line: 5, .. })
        ));
    }

    #[test]
    fn max_flow_on_trivial_graphs() {
        let topo =
            Topology::parse("node 1 switch\nnode 2 switch\nlink 1:1 2:1 7 0.001\n").unwrap();
        assert_eq!(max_flow(&topo, 1, 2).unwrap(), 7);
        // no path back against the directed link
        assert_eq!(max_flow(&topo, 2, 1).unwrap(), 0);
        assert_eq!(
            max_flow(&topo, 1, 1),
            Err(ControlError::SameEndpoints { s: 1, t: 1 })
        );
    }

    #[test]
    fn butterfly_min_multicast_rate_is_two_units() {
        let topo = butterfly_unit();
        // switch-to-switch max-flow: two unit paths to either receiver switch
        assert_eq!(max_flow(&topo, 1, 2).unwrap(), 2);
        assert_eq!(max_flow(&topo, 1, 3).unwrap(), 2);
        assert_eq!(min_multicast_rate(&topo, 100, &[101, 102]).unwrap(), 2);
        // idempotent under duplicate receivers
        assert_eq!(
            min_multicast_rate(&topo, 100, &[101, 101]).unwrap(),
            max_flow(&topo, 100, 101).unwrap()
        );
    }

    #[test]
    fn max_flow_matches_brute_force_min_cut_on_random_graphs() {
        let mut state = 0x00C0_FFEE_u64;
        for _ in 0..40 {
            let n = 4 + (tiny_rng(&mut state) % 4) as u16; // 4..=7 nodes
            let mut topo = Topology::new();
            for id in 0..n {
                topo.add_node(id, NodeKind::Switch);
            }
            let mut port_ctr: BTreeMap<NodeId, PortId> = BTreeMap::new();
            let edges = n as u64 + tiny_rng(&mut state) % (2 * n as u64);
            for _ in 0..edges {
                let a = (tiny_rng(&mut state) % n as u64) as u16;
                let b = (tiny_rng(&mut state) % n as u64) as u16;
                if a == b {
                    continue;
                }
                let cap = 1 + tiny_rng(&mut state) % 5;
                let sp = port_ctr.entry(a).or_insert(0);
                *sp += 1;
                let sport = *sp;
                let dp = port_ctr.entry(b).or_insert(0);
                *dp += 100;
                let dport = *dp;
                let _ = topo.add_link(TopoLink {
                    src: a,
                    sport,
                    dst: b,
                    dport,
                    bandwidth_bps: cap,
                    delay_ns: 1,
                });
            }
            let s = 0;
            let t = n - 1;
            assert_eq!(
                max_flow(&topo, s, t).unwrap(),
                brute_force_min_cut(&topo, s, t),
                "graph with {n} nodes"
            );
        }
    }

    #[test]
    fn disjoint_paths_on_diversity_topology() {
        let topo = diversity_topo();
        let paths = edge_disjoint_paths(&topo, 1, 5, 3).unwrap();
        assert_eq!(paths.len(), 3);
        // the three two-hop paths via switches 2, 3 and 4, in id order
        for (path, via) in paths.iter().zip([2u16, 3, 4]) {
            assert_eq!(path.len(), 2);
            assert_eq!(topo.link(path[0]).dst, via);
        }
        // pairwise edge-disjoint
        let mut seen = BTreeSet::new();
        for p in &paths {
            for &e in p {
                assert!(seen.insert(e));
            }
        }
        // single path is any simple path
        assert_eq!(edge_disjoint_paths(&topo, 1, 5, 1).unwrap().len(), 1);
        // a fourth disjoint path does not exist; the cut names three links
        let err = edge_disjoint_paths(&topo, 1, 5, 4).unwrap_err();
        match err {
            ControlError::Infeasible {
                needed,
                available,
                cut,
            } => {
                assert_eq!(needed, 4);
                assert_eq!(available, 3);
                assert_eq!(cut.split(", ").count(), 3);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    fn diversity_spec() -> StreamSpec {
        StreamSpec {
            stream_id: 7,
            source: 100,
            receivers: vec![101],
            rate_bps: 50,
            gen_size: 2,
            kind: FunctionKind::Diversity { paths: 3 },
        }
    }

    #[test]
    fn compile_diversity_matches_figure_structure() {
        let topo = diversity_topo();
        let doc = compile_diversity(&topo, &diversity_spec()).unwrap();

        let ingress = &doc.switches[&1];
        let split = ingress
            .entries
            .iter()
            .find_map(|e| match &e.action {
                Action::Split(s) => Some(s),
                _ => None,
            })
            .expect("ingress splits");
        assert_eq!(split.gen_size, 2);
        // data paths ride via switches 2 and 3 (ports 2 and 3)
        assert_eq!(split.outputs[0].port, 2);
        assert_eq!(split.outputs[1].port, 3);
        // parity row is all-ones onto the path via switch 4 (port 4)
        assert_eq!(ingress.code.len(), 1);
        let row = &ingress.code[0].rows[0];
        assert_eq!(row.coeffs, CoeffVector::ones(2));
        assert_eq!(row.port, 4);

        // interior switches forward with a gather rewrite into the egress
        for sw in [2u16, 3, 4] {
            let d = &doc.switches[&sw];
            assert_eq!(d.entries.len(), 1);
            match &d.entries[0].action {
                Action::Forward(f) => {
                    assert_eq!(f.outputs.len(), 1);
                    assert_eq!(f.set_next, Some(Primitive::Gather));
                }
                other => panic!("expected forward, got {other:?}"),
            }
        }

        // egress gathers and decodes to the receiver port
        let egress = &doc.switches[&5];
        assert_eq!(egress.decode.len(), 1);
        assert_eq!(egress.decode[0].deliver_port, 4);
        assert!(egress
            .entries
            .iter()
            .any(|e| matches!(e.action, Action::Gather(_))));

        assert_eq!(
            doc.hosts[&100],
            vec![HostRole::Sender {
                stream_id: 7,
                entry: Primitive::Split,
                gen_size: 2
            }]
        );
    }

    #[test]
    fn compile_diversity_degenerate_repetition_code() {
        // two disjoint paths, k = 1: duplicate-and-forward
        let text = "\
node 1 switch
node 2 switch
node 3 switch
node 4 switch
node 100 host
node 101 host
link 100:1 1:1 100 0.001
link 1:2 2:1 100 0.001
link 1:3 3:1 100 0.001
link 2:2 4:1 100 0.001
link 3:2 4:2 100 0.001
link 4:3 101:1 100 0.001
";
        let topo = Topology::parse(text).unwrap();
        let spec = StreamSpec {
            stream_id: 9,
            source: 100,
            receivers: vec![101],
            rate_bps: 10,
            gen_size: 1,
            kind: FunctionKind::Diversity { paths: 2 },
        };
        let doc = compile_diversity(&topo, &spec).unwrap();
        let ingress = &doc.switches[&1];
        let row = &ingress.code[0].rows[0];
        assert_eq!(row.coeffs, CoeffVector::ones(1));
    }

    #[test]
    fn compile_diversity_propagates_infeasibility() {
        let topo = diversity_topo();
        let mut spec = diversity_spec();
        spec.gen_size = 3;
        spec.kind = FunctionKind::Diversity { paths: 4 };
        assert!(matches!(
            compile_diversity(&topo, &spec),
            Err(ControlError::Infeasible { needed: 4, .. })
        ));
    }

    #[test]
    fn compile_diversity_rejects_excess_rate() {
        let topo = diversity_topo();
        let mut spec = diversity_spec();
        spec.rate_bps = 10_000;
        assert!(matches!(
            compile_diversity(&topo, &spec),
            Err(ControlError::RateInadmissible { .. })
        ));
    }

    fn butterfly_spec() -> StreamSpec {
        StreamSpec {
            stream_id: 5,
            source: 100,
            receivers: vec![101, 102],
            rate_bps: 2,
            gen_size: 2,
            kind: FunctionKind::ButterflyMulticast,
        }
    }

    #[test]
    fn compile_butterfly_canonical_topology() {
        let topo = butterfly_unit();
        let doc = compile_butterfly(&topo, &butterfly_spec()).unwrap();

        // the relay head is switch 4 with the all-ones row onto the
        // bottleneck toward switch 5
        let relay = &doc.switches[&4];
        assert_eq!(relay.code.len(), 1);
        let row = &relay.code[0].rows[0];
        assert_eq!(row.coeffs, CoeffVector::ones(2));
        assert_eq!(row.port, 3);
        assert!(relay
            .entries
            .iter()
            .any(|e| matches!(e.action, Action::Gather(_))));

        // the bottleneck tail multicasts into both receiver branches
        let tail = &doc.switches[&5];
        let fwd = tail
            .entries
            .iter()
            .find_map(|e| match &e.action {
                Action::Forward(f) if e.key.qualifier != Qualifier::Recirculated => Some(f),
                _ => None,
            })
            .expect("tail forwards");
        assert_eq!(fwd.outputs.len(), 2);
        assert_eq!(fwd.set_next, Some(Primitive::Gather));

        // both receiver switches decode
        assert_eq!(doc.switches[&2].decode.len(), 1);
        assert_eq!(doc.switches[&3].decode.len(), 1);

        // the branch junctions multicast toward receiver and relay
        for sw in [6u16, 7] {
            let d = &doc.switches[&sw];
            let f = d
                .entries
                .iter()
                .find_map(|e| match &e.action {
                    Action::Forward(f) => Some(f),
                    _ => None,
                })
                .unwrap();
            assert_eq!(f.outputs.len(), 2);
            assert_eq!(f.set_next, Some(Primitive::Gather));
        }
    }

    #[test]
    fn compile_butterfly_rejects_inadmissible_rate() {
        let topo = butterfly_unit();
        let mut spec = butterfly_spec();
        spec.rate_bps = 3;
        assert!(matches!(
            compile_butterfly(&topo, &spec),
            Err(ControlError::RateInadmissible {
                requested_bps: 3,
                available_bps: 2
            })
        ));
    }

    #[test]
    fn compile_butterfly_needs_an_embedding() {
        // a plain two-path graph has no shared relay chain
        let text = "\
node 1 switch
node 2 switch
node 3 switch
node 4 switch
node 100 host
node 101 host
node 102 host
link 100:1 1:1 10 0.001
link 1:2 2:1 1 0.001
link 1:3 3:1 1 0.001
link 2:2 4:1 1 0.001
link 3:2 4:2 1 0.001
link 2:3 101:1 10 0.001
link 3:3 102:1 10 0.001
";
        let topo = Topology::parse(text).unwrap();
        let spec = StreamSpec {
            stream_id: 5,
            source: 100,
            receivers: vec![101, 102],
            rate_bps: 1,
            gen_size: 2,
            kind: FunctionKind::ButterflyMulticast,
        };
        assert_eq!(
            compile_butterfly(&topo, &spec),
            Err(ControlError::NoEmbedding)
        );
    }

    #[test]
    fn baseline_is_a_forward_only_tree() {
        let topo = butterfly_unit();
        let doc = compile_forwarding_baseline(&topo, &butterfly_spec()).unwrap();
        for d in doc.switches.values() {
            assert!(d.code.is_empty());
            assert!(d.decode.is_empty());
            assert!(d.banks.is_empty());
            for e in &d.entries {
                assert!(matches!(e.action, Action::Forward(_)));
            }
        }
        // shortest-path tree: source switch fans out to both branches, which
        // forward straight to the receiver switches; the bottleneck is unused
        let src = &doc.switches[&1];
        match &src.entries[0].action {
            Action::Forward(f) => assert_eq!(f.outputs.len(), 2),
            _ => unreachable!(),
        }
        assert!(!doc.switches.contains_key(&4));
        assert!(!doc.switches.contains_key(&5));
        // sender numbers its own batches with gen size 1
        assert_eq!(
            doc.hosts[&100],
            vec![HostRole::Sender {
                stream_id: 5,
                entry: Primitive::Forward,
                gen_size: 1
            }]
        );
    }

    #[test]
    fn baseline_unicast_is_a_shortest_path() {
        let topo = diversity_topo();
        let spec = StreamSpec {
            stream_id: 3,
            source: 100,
            receivers: vec![101],
            rate_bps: 10,
            gen_size: 1,
            kind: FunctionKind::Diversity { paths: 2 },
        };
        let doc = compile_forwarding_baseline(&topo, &spec).unwrap();
        // path 100 -> 1 -> 2 -> 5 -> 101: switches 1, 2, 5 forward once each
        assert_eq!(doc.switches.len(), 3);
        for d in doc.switches.values() {
            match &d.entries[0].action {
                Action::Forward(f) => assert_eq!(f.outputs.len(), 1),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn config_document_round_trips_through_text() {
        let topo = butterfly_unit();
        let doc = compile_butterfly(&topo, &butterfly_spec()).unwrap();
        let text = doc.to_text();
        let parsed = ConfigDocument::from_text(&text).unwrap();
        assert_eq!(parsed, doc);
        assert_eq!(parsed.to_text(), text);

        let topo = diversity_topo();
        let doc = compile_diversity(&topo, &diversity_spec()).unwrap();
        let text = doc.to_text();
        let parsed = ConfigDocument::from_text(&text).unwrap();
        assert_eq!(parsed, doc);
    }

    #[test]
    fn validate_catches_missing_ports() {
        let topo = diversity_topo();
        let mut doc = compile_diversity(&topo, &diversity_spec()).unwrap();
        doc.switch_mut(5).decode[0].deliver_port = 99;
        assert_eq!(
            doc.validate_against(&topo),
            Err(ControlError::MissingPort { node: 5, port: 99 })
        );
    }
}

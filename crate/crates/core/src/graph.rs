//! Continuous-time bipartite user-item graph.
//!
//! Node events create or refresh a node's attribute; edge events add an
//! unlabeled edge, or upgrade the latest unlabeled edge of a pair to
//! positive. Every node keeps at most `m` recent edges; an evicted edge
//! leaves both endpoint lists. Reads are time-bounded: [`GraphState::khop_sample`]
//! only follows edges stamped at or before the probe time and only returns
//! attribute versions recorded at or before it.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::pipeline::Features;

pub const GRAPH_HEADER: &str = "DGDF-GRAPH v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    User,
    Item,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeKey {
    pub role: Role,
    pub id: u64,
}

impl NodeKey {
    pub fn user(id: u64) -> Self {
        Self {
            role: Role::User,
            id,
        }
    }

    pub fn item(id: u64) -> Self {
        Self {
            role: Role::Item,
            id,
        }
    }
}

impl fmt::Display for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.role {
            Role::User => write!(f, "u{}", self.id),
            Role::Item => write!(f, "i{}", self.id),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub key: NodeKey,
    pub attribute: Features,
    pub last_update_time: f64,
}

/// Edges only ever carry these two labels: negatives may be fake and are
/// kept out of the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeLabel {
    Unlabeled,
    Positive,
}

impl EdgeLabel {
    pub fn as_i8(self) -> i8 {
        match self {
            EdgeLabel::Unlabeled => -1,
            EdgeLabel::Positive => 1,
        }
    }

    fn from_i8(v: i8) -> Option<Self> {
        match v {
            -1 => Some(EdgeLabel::Unlabeled),
            1 => Some(EdgeLabel::Positive),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeRecord {
    pub user: u64,
    pub item: u64,
    pub label: EdgeLabel,
    pub timestamp: f64,
}

impl EdgeRecord {
    pub fn user_key(&self) -> NodeKey {
        NodeKey::user(self.user)
    }

    pub fn item_key(&self) -> NodeKey {
        NodeKey::item(self.item)
    }

    fn other(&self, key: NodeKey) -> NodeKey {
        if key.role == Role::User {
            self.item_key()
        } else {
            self.user_key()
        }
    }
}

type EdgeId = u64;

#[derive(Debug, Clone, PartialEq)]
struct NodeEntry {
    /// Attribute versions, oldest first, newest last.
    versions: VecDeque<(f64, Features)>,
    /// Edge ids ordered by timestamp (oldest first).
    adjacency: VecDeque<EdgeId>,
}

impl NodeEntry {
    fn attribute_at(&self, t: f64) -> Option<&(f64, Features)> {
        self.versions.iter().rev().find(|(vt, _)| *vt <= t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphState {
    edge_cap: usize,
    attribute_versions: usize,
    clock: f64,
    next_edge: EdgeId,
    nodes: HashMap<NodeKey, NodeEntry>,
    edges: HashMap<EdgeId, EdgeRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledNode {
    pub key: NodeKey,
    pub attribute: Features,
    pub attribute_time: f64,
    /// Incident edges stamped at or before the probe time.
    pub degree: usize,
    pub hop: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledEdge {
    /// Index of the user endpoint in [`NeighborSample::nodes`].
    pub user: usize,
    /// Index of the item endpoint in [`NeighborSample::nodes`].
    pub item: usize,
    pub label: EdgeLabel,
    pub timestamp: f64,
    /// Hop of the node whose expansion discovered the edge.
    pub hop: usize,
}

/// k-hop neighbourhood of a set of seeds. Nodes are stored in BFS order,
/// so the nodes of hops `0..=h` always form a prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSample {
    pub nodes: Vec<SampledNode>,
    pub edges: Vec<SampledEdge>,
    pub hops: usize,
    pub as_of_time: f64,
}

impl NeighborSample {
    /// A sample containing only detached seeds, used when a seed has not
    /// reached the graph yet.
    pub fn isolated(seeds: Vec<(NodeKey, Features)>, hops: usize, as_of_time: f64) -> Self {
        let nodes = seeds
            .into_iter()
            .map(|(key, attribute)| SampledNode {
                key,
                attribute,
                attribute_time: as_of_time,
                degree: 0,
                hop: 0,
            })
            .collect();
        Self {
            nodes,
            edges: Vec::new(),
            hops,
            as_of_time,
        }
    }

    pub fn layer_nodes(&self, hop: usize) -> impl Iterator<Item = &SampledNode> + '_ {
        self.nodes.iter().filter(move |n| n.hop == hop)
    }

    pub fn layer_edges(&self, hop: usize) -> impl Iterator<Item = &SampledEdge> + '_ {
        self.edges.iter().filter(move |e| e.hop == hop)
    }

    /// Number of nodes with hop `<= hop`.
    pub fn prefix_len(&self, hop: usize) -> usize {
        self.nodes.partition_point(|n| n.hop <= hop)
    }

    pub fn index_of(&self, key: NodeKey) -> Option<usize> {
        self.nodes.iter().position(|n| n.key == key)
    }
}

impl GraphState {
    pub fn new(edge_cap: usize) -> Result<Self> {
        Self::with_attribute_versions(edge_cap, 4)
    }

    /// `attribute_versions` bounds how many past attributes a node retains
    /// for time-bounded reads.
    pub fn with_attribute_versions(edge_cap: usize, attribute_versions: usize) -> Result<Self> {
        if edge_cap == 0 || attribute_versions == 0 {
            return Err(Error::Config(
                "edge cap m and attribute versions must be positive".into(),
            ));
        }
        Ok(Self {
            edge_cap,
            attribute_versions,
            clock: f64::NEG_INFINITY,
            next_edge: 0,
            nodes: HashMap::new(),
            edges: HashMap::new(),
        })
    }

    pub fn edge_cap(&self) -> usize {
        self.edge_cap
    }

    /// Time of the most recent applied event.
    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn contains(&self, key: NodeKey) -> bool {
        self.nodes.contains_key(&key)
    }

    pub fn node(&self, key: NodeKey) -> Option<NodeRecord> {
        self.nodes.get(&key).and_then(|n| {
            n.versions.back().map(|(t, attr)| NodeRecord {
                key,
                attribute: attr.clone(),
                last_update_time: *t,
            })
        })
    }

    /// Attribute of `key` as it was at time `t`, with its write time.
    pub fn attribute_at(&self, key: NodeKey, t: f64) -> Option<(f64, &Features)> {
        self.nodes
            .get(&key)
            .and_then(|n| n.attribute_at(t))
            .map(|(at, f)| (*at, f))
    }

    /// Whether a positive `(user, item)` edge stamped exactly `t` exists.
    pub fn has_positive_edge(&self, user: u64, item: u64, t: f64) -> bool {
        self.nodes.get(&NodeKey::user(user)).is_some_and(|n| {
            n.adjacency.iter().any(|id| {
                let e = &self.edges[id];
                e.item == item && e.label == EdgeLabel::Positive && e.timestamp == t
            })
        })
    }

    /// Edges incident to `key`, oldest first.
    pub fn adjacency(&self, key: NodeKey) -> Vec<EdgeRecord> {
        self.nodes
            .get(&key)
            .map(|n| n.adjacency.iter().map(|id| self.edges[id]).collect())
            .unwrap_or_default()
    }

    pub fn node_keys(&self) -> Vec<NodeKey> {
        let mut keys: Vec<_> = self.nodes.keys().copied().collect();
        keys.sort();
        keys
    }

    fn advance_clock(&mut self, t: f64) -> Result<()> {
        if !t.is_finite() {
            return Err(Error::Numeric(format!("non-finite event time {t}")));
        }
        if t < self.clock {
            return Err(Error::TimeRegression {
                event: t,
                clock: self.clock,
            });
        }
        self.clock = t;
        Ok(())
    }

    pub fn apply_node_event(&mut self, key: NodeKey, attribute: Features, t: f64) -> Result<()> {
        self.advance_clock(t)?;
        let cap = self.attribute_versions;
        let entry = self.nodes.entry(key).or_insert_with(|| NodeEntry {
            versions: VecDeque::new(),
            adjacency: VecDeque::new(),
        });
        entry.versions.push_back((t, attribute));
        while entry.versions.len() > cap {
            entry.versions.pop_front();
        }
        Ok(())
    }

    pub fn apply_edge_event(
        &mut self,
        user: NodeKey,
        item: NodeKey,
        label: EdgeLabel,
        t: f64,
    ) -> Result<()> {
        if user.role != Role::User || item.role != Role::Item {
            return Err(Error::Structural(format!(
                "edge must join a user and an item, got {user} and {item}"
            )));
        }
        for key in [user, item] {
            if !self.nodes.contains_key(&key) {
                return Err(Error::Structural(format!(
                    "edge endpoint {key} is not in the graph"
                )));
            }
        }
        self.advance_clock(t)?;

        if label == EdgeLabel::Positive {
            let upgrade = self.nodes[&user]
                .adjacency
                .iter()
                .rev()
                .copied()
                .find(|id| {
                    let e = &self.edges[id];
                    e.item == item.id && e.label == EdgeLabel::Unlabeled
                });
            if let Some(id) = upgrade {
                let edge = self
                    .edges
                    .get_mut(&id)
                    .expect("adjacency points at live edge");
                edge.label = EdgeLabel::Positive;
                edge.timestamp = t;
                // keep lists time-ordered: the upgraded edge is now the newest
                for key in [user, item] {
                    let adj = &mut self.nodes.get_mut(&key).expect("endpoint exists").adjacency;
                    adj.retain(|e| *e != id);
                    adj.push_back(id);
                }
                return Ok(());
            }
        }

        let id = self.next_edge;
        self.next_edge += 1;
        self.edges.insert(
            id,
            EdgeRecord {
                user: user.id,
                item: item.id,
                label,
                timestamp: t,
            },
        );
        for key in [user, item] {
            self.nodes
                .get_mut(&key)
                .expect("endpoint exists")
                .adjacency
                .push_back(id);
        }
        self.evict(user);
        self.evict(item);
        Ok(())
    }

    fn evict(&mut self, key: NodeKey) {
        loop {
            let entry = self.nodes.get_mut(&key).expect("node exists");
            if entry.adjacency.len() <= self.edge_cap {
                return;
            }
            let id = entry.adjacency.pop_front().expect("non-empty");
            let edge = self
                .edges
                .remove(&id)
                .expect("adjacency points at live edge");
            let other = edge.other(key);
            if let Some(o) = self.nodes.get_mut(&other) {
                o.adjacency.retain(|e| *e != id);
            }
        }
    }

    pub fn degree(&self, key: NodeKey, t: f64) -> Result<usize> {
        let entry = self
            .nodes
            .get(&key)
            .ok_or_else(|| Error::Structural(format!("unknown node {key}")))?;
        Ok(entry
            .adjacency
            .iter()
            .filter(|id| self.edges[id].timestamp <= t)
            .count())
    }

    /// Breadth-first neighbourhood of `seeds` over edges stamped `<= t`.
    /// Each node's edges are visited newest first, ties by neighbour key.
    pub fn khop_sample(&self, seeds: &[NodeKey], hops: usize, t: f64) -> Result<NeighborSample> {
        if hops == 0 {
            return Err(Error::Config("k-hop sampling needs k >= 1".into()));
        }
        let mut index: HashMap<NodeKey, usize> = HashMap::new();
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        let mut seen_edges: HashSet<EdgeId> = HashSet::new();

        for &seed in seeds {
            if index.contains_key(&seed) {
                continue;
            }
            let entry = self
                .nodes
                .get(&seed)
                .ok_or_else(|| Error::Structural(format!("unknown seed {seed}")))?;
            let (at, attr) = entry.attribute_at(t).ok_or_else(|| {
                Error::Structural(format!("seed {seed} has no attribute as of t={t}"))
            })?;
            index.insert(seed, nodes.len());
            nodes.push(SampledNode {
                key: seed,
                attribute: attr.clone(),
                attribute_time: *at,
                degree: self.degree(seed, t)?,
                hop: 0,
            });
        }

        let mut frontier_start = 0;
        for hop in 0..hops {
            let frontier_end = nodes.len();
            for idx in frontier_start..frontier_end {
                let key: NodeKey = nodes[idx].key;
                let mut incident: Vec<(EdgeId, &EdgeRecord)> = self.nodes[&key]
                    .adjacency
                    .iter()
                    .map(|id| (*id, &self.edges[id]))
                    .filter(|(_, e)| e.timestamp <= t)
                    .collect();
                incident.sort_by(|(ia, a), (ib, b)| {
                    b.timestamp
                        .total_cmp(&a.timestamp)
                        .then(a.other(key).cmp(&b.other(key)))
                        .then(ia.cmp(ib))
                });
                for (id, edge) in incident {
                    if !seen_edges.insert(id) {
                        continue;
                    }
                    let other = edge.other(key);
                    let other_idx = match index.get(&other) {
                        Some(&i) => i,
                        None => {
                            let entry = &self.nodes[&other];
                            // Versions older than the retained window are gone;
                            // such a node cannot be read consistently at t.
                            let Some((at, attr)) = entry.attribute_at(t) else {
                                continue;
                            };
                            index.insert(other, nodes.len());
                            nodes.push(SampledNode {
                                key: other,
                                attribute: attr.clone(),
                                attribute_time: *at,
                                degree: self.degree(other, t)?,
                                hop: hop + 1,
                            });
                            nodes.len() - 1
                        }
                    };
                    let (user, item) = if key.role == Role::User {
                        (idx, other_idx)
                    } else {
                        (other_idx, idx)
                    };
                    edges.push(SampledEdge {
                        user,
                        item,
                        label: edge.label,
                        timestamp: edge.timestamp,
                        hop,
                    });
                }
            }
            frontier_start = frontier_end;
        }

        Ok(NeighborSample {
            nodes,
            edges,
            hops,
            as_of_time: t,
        })
    }

    /// Checks the structural invariants: cap, time order, symmetry.
    pub fn check_invariants(&self) -> Result<()> {
        let mut refs: HashMap<EdgeId, usize> = HashMap::new();
        for (key, entry) in &self.nodes {
            if entry.adjacency.len() > self.edge_cap {
                return Err(Error::Structural(format!(
                    "{key} holds {} edges, cap is {}",
                    entry.adjacency.len(),
                    self.edge_cap
                )));
            }
            let mut last = f64::NEG_INFINITY;
            for id in &entry.adjacency {
                let e = self
                    .edges
                    .get(id)
                    .ok_or_else(|| Error::Structural(format!("{key} references dead edge {id}")))?;
                if e.user_key() != *key && e.item_key() != *key {
                    return Err(Error::Structural(format!("{key} lists foreign edge {id}")));
                }
                if e.timestamp < last {
                    return Err(Error::Structural(format!(
                        "{key} adjacency not time-ordered"
                    )));
                }
                last = e.timestamp;
                *refs.entry(*id).or_default() += 1;
            }
        }
        for id in self.edges.keys() {
            if refs.get(id).copied().unwrap_or(0) != 2 {
                return Err(Error::Structural(format!(
                    "edge {id} is not listed by exactly both endpoints"
                )));
            }
        }
        Ok(())
    }

    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{GRAPH_HEADER}")?;
        writeln!(
            out,
            "meta {} {} {:016x} {}",
            self.edge_cap,
            self.attribute_versions,
            self.clock.to_bits(),
            self.next_edge
        )?;
        let keys = self.node_keys();
        writeln!(out, "nodes {}", keys.len())?;
        for key in &keys {
            let entry = &self.nodes[key];
            write!(
                out,
                "N {} {} {}",
                role_tag(key.role),
                key.id,
                entry.versions.len()
            )?;
            for (t, f) in &entry.versions {
                write!(out, " {:016x} {}", t.to_bits(), f.dense.len())?;
                for v in &f.dense {
                    write!(out, " {:016x}", v.to_bits())?;
                }
                write!(out, " {}", f.categorical.len())?;
                for c in &f.categorical {
                    write!(out, " {c}")?;
                }
            }
            writeln!(out)?;
        }
        let mut ids: Vec<_> = self.edges.keys().copied().collect();
        ids.sort_unstable();
        writeln!(out, "edges {}", ids.len())?;
        for id in ids {
            let e = &self.edges[&id];
            writeln!(
                out,
                "E {id} {} {} {} {:016x}",
                e.user,
                e.item,
                e.label.as_i8(),
                e.timestamp.to_bits()
            )?;
        }
        for key in &keys {
            write!(out, "A {} {}", role_tag(key.role), key.id)?;
            for id in &self.nodes[key].adjacency {
                write!(out, " {id}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let mut next_line = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((n, Ok(l))) => Ok((n + 1, l)),
                Some((_, Err(e))) => Err(e.into()),
                None => Err(Error::Format(format!(
                    "graph checkpoint truncated before {what}"
                ))),
            }
        };
        let (_, header) = next_line("header")?;
        if header.trim_end() != GRAPH_HEADER {
            return Err(Error::Format(format!("bad graph header `{header}`")));
        }
        let (n, meta) = next_line("meta")?;
        let mut tok = Tokens::new(&meta, n);
        tok.expect("meta")?;
        let edge_cap = tok.usize()?;
        let attribute_versions = tok.usize()?;
        let clock = tok.f64_bits()?;
        let next_edge = tok.u64()?;
        let mut g = GraphState::with_attribute_versions(edge_cap, attribute_versions)?;
        g.clock = clock;
        g.next_edge = next_edge;

        let (n, line) = next_line("nodes")?;
        let mut tok = Tokens::new(&line, n);
        tok.expect("nodes")?;
        let node_count = tok.usize()?;
        for _ in 0..node_count {
            let (n, line) = next_line("node record")?;
            let mut tok = Tokens::new(&line, n);
            tok.expect("N")?;
            let key = tok.node_key()?;
            let versions = tok.usize()?;
            let mut entry = NodeEntry {
                versions: VecDeque::with_capacity(versions),
                adjacency: VecDeque::new(),
            };
            for _ in 0..versions {
                let t = tok.f64_bits()?;
                let nd = tok.usize()?;
                let dense = (0..nd)
                    .map(|_| tok.f64_bits())
                    .collect::<Result<Vec<_>>>()?;
                let nc = tok.usize()?;
                let categorical = (0..nc).map(|_| tok.u32()).collect::<Result<Vec<_>>>()?;
                entry
                    .versions
                    .push_back((t, Features { dense, categorical }));
            }
            g.nodes.insert(key, entry);
        }

        let (n, line) = next_line("edges")?;
        let mut tok = Tokens::new(&line, n);
        tok.expect("edges")?;
        let edge_count = tok.usize()?;
        for _ in 0..edge_count {
            let (n, line) = next_line("edge record")?;
            let mut tok = Tokens::new(&line, n);
            tok.expect("E")?;
            let id = tok.u64()?;
            let user = tok.u64()?;
            let item = tok.u64()?;
            let label = EdgeLabel::from_i8(tok.i8()?)
                .ok_or_else(|| Error::Format(format!("line {n}: edge label must be -1 or 1")))?;
            let timestamp = tok.f64_bits()?;
            g.edges.insert(
                id,
                EdgeRecord {
                    user,
                    item,
                    label,
                    timestamp,
                },
            );
        }
        for _ in 0..node_count {
            let (n, line) = next_line("adjacency record")?;
            let mut tok = Tokens::new(&line, n);
            tok.expect("A")?;
            let key = tok.node_key()?;
            let mut adjacency = VecDeque::new();
            while let Some(id) = tok.next_opt() {
                adjacency.push_back(
                    id.parse::<u64>()
                        .map_err(|_| Error::Format(format!("line {n}: bad edge id `{id}`")))?,
                );
            }
            g.nodes
                .get_mut(&key)
                .ok_or_else(|| {
                    Error::Format(format!("line {n}: adjacency for unknown node {key}"))
                })?
                .adjacency = adjacency;
        }
        g.check_invariants()?;
        Ok(g)
    }
}

fn role_tag(role: Role) -> &'static str {
    match role {
        Role::User => "U",
        Role::Item => "I",
    }
}

struct Tokens<'a> {
    iter: std::str::SplitWhitespace<'a>,
    line: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str, line: usize) -> Self {
        Self {
            iter: text.split_whitespace(),
            line,
        }
    }

    fn next_opt(&mut self) -> Option<&'a str> {
        self.iter.next()
    }

    fn next(&mut self) -> Result<&'a str> {
        self.iter
            .next()
            .ok_or_else(|| Error::Format(format!("line {}: unexpected end of record", self.line)))
    }

    fn expect(&mut self, tag: &str) -> Result<()> {
        let got = self.next()?;
        if got != tag {
            return Err(Error::Format(format!(
                "line {}: expected `{tag}`, found `{got}`",
                self.line
            )));
        }
        Ok(())
    }

    fn parse<T: std::str::FromStr>(&mut self) -> Result<T> {
        let line = self.line;
        let raw = self.next()?;
        raw.parse()
            .map_err(|_| Error::Format(format!("line {line}: cannot parse `{raw}`")))
    }

    fn usize(&mut self) -> Result<usize> {
        self.parse()
    }

    fn u64(&mut self) -> Result<u64> {
        self.parse()
    }

    fn u32(&mut self) -> Result<u32> {
        self.parse()
    }

    fn i8(&mut self) -> Result<i8> {
        self.parse()
    }

    fn f64_bits(&mut self) -> Result<f64> {
        let line = self.line;
        let raw = self.next()?;
        u64::from_str_radix(raw, 16)
            .map(f64::from_bits)
            .map_err(|_| Error::Format(format!("line {line}: bad float bits `{raw}`")))
    }

    fn node_key(&mut self) -> Result<NodeKey> {
        let role = match self.next()? {
            "U" => Role::User,
            "I" => Role::Item,
            other => {
                return Err(Error::Format(format!(
                    "line {}: unknown role `{other}`",
                    self.line
                )))
            }
        };
        Ok(NodeKey {
            role,
            id: self.u64()?,
        })
    }
}

//! Directed weighted information-flow graphs.
//!
//! An edge `(u, v)` means content flows from `u` to `v`: `v` follows `u` in a
//! follower network, or `v` retweeted `u` in a retweet network. Nodes are dense
//! indices backed by a side table of external account identifiers.
//!
//! Adjacency is stored twice in compressed-row form, once sorted by
//! `(source, target)` for out-neighbor scans and once transposed for the
//! in-neighbor ("following of") scans used by the equilibrium solver.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use thiserror::Error;

/// Dense index of a node within one graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct NodeId(pub u64);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("self-loop on account `{0}` rejected")]
    SelfLoop(String),
    #[error("edge weight must be positive and finite, got {0}")]
    InvalidWeight(f64),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown account `{0}`")]
    UnknownAccount(String),
    #[error("edge list line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("edge list i/o: {0}")]
    Io(String),
}

/// Bijective map between external account identifiers and dense indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Interner {
    labels: Vec<String>,
    lookup: HashMap<String, NodeId>,
}

impl Interner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, label: &str) -> NodeId {
        if let Some(&id) = self.lookup.get(label) {
            return id;
        }
        let id = NodeId(self.labels.len() as u64);
        self.labels.push(label.to_owned());
        self.lookup.insert(label.to_owned(), id);
        id
    }

    pub fn get(&self, label: &str) -> Option<NodeId> {
        self.lookup.get(label).copied()
    }

    pub fn label(&self, id: NodeId) -> Option<&str> {
        self.labels.get(id.index()).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Single-writer accumulator for a [`DirectedWeightedGraph`].
///
/// Parallel interactions are merged at insertion time, so retweet counts add up
/// as they are streamed in.
#[derive(Debug, Clone, Default)]
pub struct GraphBuilder {
    nodes: Interner,
    edges: HashMap<(u64, u64), f64>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a node without edges. Returns its index.
    pub fn add_node(&mut self, label: &str) -> NodeId {
        self.nodes.intern(label)
    }

    pub fn add_interaction(
        &mut self,
        source: &str,
        target: &str,
        weight_delta: f64,
    ) -> Result<(), GraphError> {
        if source == target {
            return Err(GraphError::SelfLoop(source.to_owned()));
        }
        if !(weight_delta > 0.0 && weight_delta.is_finite()) {
            return Err(GraphError::InvalidWeight(weight_delta));
        }
        let s = self.nodes.intern(source);
        let t = self.nodes.intern(target);
        *self.edges.entry((s.0, t.0)).or_insert(0.0) += weight_delta;
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn build(self) -> DirectedWeightedGraph {
        let mut edges: Vec<(u64, u64, f64)> =
            self.edges.into_iter().map(|((s, t), w)| (s, t, w)).collect();
        edges.sort_unstable_by_key(|&(s, t, _)| (s, t));
        DirectedWeightedGraph::from_sorted(self.nodes, &edges)
    }
}

/// Immutable compressed adjacency in both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectedWeightedGraph {
    nodes: Interner,
    out_offsets: Vec<usize>,
    out_targets: Vec<u64>,
    out_weights: Vec<f64>,
    in_offsets: Vec<usize>,
    in_sources: Vec<u64>,
    in_weights: Vec<f64>,
}

impl DirectedWeightedGraph {
    pub fn empty() -> Self {
        GraphBuilder::new().build()
    }

    /// `edges` must be sorted by `(source, target)` without duplicates.
    fn from_sorted(nodes: Interner, edges: &[(u64, u64, f64)]) -> Self {
        let n = nodes.len();
        let mut out_offsets = vec![0usize; n + 1];
        let mut in_offsets = vec![0usize; n + 1];
        for &(s, t, _) in edges {
            out_offsets[s as usize + 1] += 1;
            in_offsets[t as usize + 1] += 1;
        }
        for i in 0..n {
            out_offsets[i + 1] += out_offsets[i];
            in_offsets[i + 1] += in_offsets[i];
        }
        let out_targets = edges.iter().map(|e| e.1).collect();
        let out_weights = edges.iter().map(|e| e.2).collect();

        // Scanning edges in (source, target) order keeps each in-list sorted by source.
        let mut cursor = in_offsets.clone();
        let mut in_sources = vec![0u64; edges.len()];
        let mut in_weights = vec![0f64; edges.len()];
        for &(s, t, w) in edges {
            let slot = &mut cursor[t as usize];
            in_sources[*slot] = s;
            in_weights[*slot] = w;
            *slot += 1;
        }
        Self {
            nodes,
            out_offsets,
            out_targets,
            out_weights,
            in_offsets,
            in_sources,
            in_weights,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.out_targets.len()
    }

    pub fn interner(&self) -> &Interner {
        &self.nodes
    }

    pub fn node(&self, label: &str) -> Option<NodeId> {
        self.nodes.get(label)
    }

    pub fn label(&self, id: NodeId) -> &str {
        self.nodes.label(id).expect("node id out of range")
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.index() < self.node_count()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.node_count() as u64).map(NodeId)
    }

    fn check(&self, id: NodeId) -> Result<(), GraphError> {
        if self.contains(id) {
            Ok(())
        } else {
            Err(GraphError::UnknownNode(id))
        }
    }

    /// In-neighbors of `i`: the accounts whose content reaches `i`.
    pub fn following_of(&self, i: NodeId) -> Result<Neighbors<'_>, GraphError> {
        self.check(i)?;
        Ok(self.in_neighbors(i))
    }

    /// Out-neighbors of `j`: the accounts that receive `j`'s content.
    pub fn followers_of(&self, j: NodeId) -> Result<Neighbors<'_>, GraphError> {
        self.check(j)?;
        Ok(self.out_neighbors(j))
    }

    /// Unchecked variant of [`Self::following_of`] for hot loops.
    #[inline]
    pub fn in_neighbors(&self, i: NodeId) -> Neighbors<'_> {
        let (a, b) = (self.in_offsets[i.index()], self.in_offsets[i.index() + 1]);
        Neighbors {
            ids: &self.in_sources[a..b],
            weights: &self.in_weights[a..b],
        }
    }

    #[inline]
    pub fn out_neighbors(&self, j: NodeId) -> Neighbors<'_> {
        let (a, b) = (self.out_offsets[j.index()], self.out_offsets[j.index() + 1]);
        Neighbors {
            ids: &self.out_targets[a..b],
            weights: &self.out_weights[a..b],
        }
    }

    pub fn in_degree(&self, i: NodeId) -> usize {
        self.in_offsets[i.index() + 1] - self.in_offsets[i.index()]
    }

    pub fn out_degree(&self, j: NodeId) -> usize {
        self.out_offsets[j.index() + 1] - self.out_offsets[j.index()]
    }

    pub fn weight(&self, source: NodeId, target: NodeId) -> Option<f64> {
        let nb = self.out_neighbors(source);
        nb.ids
            .binary_search(&target.0)
            .ok()
            .map(|pos| nb.weights[pos])
    }

    /// All edges in `(source, target)` order.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId, f64)> + '_ {
        self.node_ids().flat_map(move |s| {
            self.out_neighbors(s)
                .iter()
                .map(move |(t, w)| (s, t, w))
        })
    }

    pub fn total_weight(&self) -> f64 {
        self.out_weights.iter().sum()
    }

    /// Subgraph induced by `keep`. Node order follows ascending old index.
    pub fn induced_subgraph(&self, keep: &BTreeSet<NodeId>) -> Result<Self, GraphError> {
        if let Some(&bad) = keep.iter().find(|id| !self.contains(**id)) {
            return Err(GraphError::UnknownNode(bad));
        }
        let mut remap = vec![u64::MAX; self.node_count()];
        let mut nodes = Interner::new();
        for &id in keep {
            remap[id.index()] = nodes.intern(self.label(id)).0;
        }
        let mut edges = Vec::new();
        for &s in keep {
            let ns = remap[s.index()];
            for (t, w) in self.out_neighbors(s).iter() {
                let nt = remap[t.index()];
                if nt != u64::MAX {
                    edges.push((ns, nt, w));
                }
            }
        }
        // Monotone remap preserves (source, target) order.
        Ok(Self::from_sorted(nodes, &edges))
    }

    /// Convenience wrapper keyed by external identifiers.
    pub fn induced_by_labels<'a, I>(&self, labels: I) -> Result<Self, GraphError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut keep = BTreeSet::new();
        for l in labels {
            keep.insert(
                self.node(l)
                    .ok_or_else(|| GraphError::UnknownAccount(l.to_owned()))?,
            );
        }
        self.induced_subgraph(&keep)
    }

    /// Reads `source<TAB>target[<TAB>weight]` lines. Blank lines are skipped.
    pub fn read_edge_list<R: BufRead>(reader: R) -> Result<Self, GraphError> {
        let mut builder = GraphBuilder::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| GraphError::Io(e.to_string()))?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(s), Some(t)) = (parts.next(), parts.next()) else {
                return Err(GraphError::Parse {
                    line: line_no,
                    reason: "expected at least two tab-separated fields".into(),
                });
            };
            let w = match parts.next() {
                None | Some("") => 1.0,
                Some(raw) => raw.parse::<f64>().map_err(|e| GraphError::Parse {
                    line: line_no,
                    reason: format!("bad weight `{raw}`: {e}"),
                })?,
            };
            builder
                .add_interaction(s, t, w)
                .map_err(|e| GraphError::Parse {
                    line: line_no,
                    reason: e.to_string(),
                })?;
        }
        Ok(builder.build())
    }

    /// Writes edges in external-id order, so output is independent of
    /// insertion order.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut rows: Vec<(&str, &str, f64)> = self
            .edges()
            .map(|(s, t, w)| (self.label(s), self.label(t), w))
            .collect();
        rows.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        for (s, t, w) in rows {
            writeln!(out, "{s}\t{t}\t{w}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Neighbors<'a> {
    ids: &'a [u64],
    weights: &'a [f64],
}

impl<'a> Neighbors<'a> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, f64)> + 'a {
        self.ids
            .iter()
            .zip(self.weights.iter())
            .map(|(&id, &w)| (NodeId(id), w))
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + 'a {
        self.ids.iter().map(|&id| NodeId(id))
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.ids.binary_search(&id.0).is_ok()
    }
}

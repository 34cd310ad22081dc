//! Serpentine lattice topologies, plain-chain baselines, and the structural
//! quantities derived from them (depths, distances, degrees, parameter
//! counts, receptive fields).
//!
//! Grid nodes are addressed 1-based as `(row, col)`. Odd rows run left to
//! right, even rows right to left, and every column has a downward edge, so
//! the horizontal edges trace a single serpentine path through all `n·m`
//! nodes. The image enters `(1, 1)`.

use std::collections::{BTreeSet, BinaryHeap, VecDeque};
use std::cmp::Reverse;
use std::fmt::{self, Write as _};

use serde::Serialize;
use thiserror::Error;

pub use crate::model::initialize_model;

pub const DEFAULT_FILTERS: usize = 32;
pub const DEFAULT_WIDE_FILTERS: usize = 64;
pub const DEFAULT_KERNEL: usize = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("topology contains a cycle")]
    Cyclic,
    #[error("node {0} is not on any input-to-output path")]
    DanglingNode(NodeId),
    #[error("edge refers to unknown node {0}")]
    UnknownNode(NodeId),
    #[error("no grid node at ({row}, {col})")]
    NoSuchPosition { row: usize, col: usize },
    #[error("node {0} is the output layer")]
    OutputNode(NodeId),
    #[error("node {node} expects {expected} input channels but its producers supply {actual}")]
    ChannelMismatch {
        node: NodeId,
        expected: usize,
        actual: usize,
    },
    #[error("sum fusion at node {node} needs producers of equal width")]
    UnequalSumInputs { node: NodeId },
    #[error("receptive field needs a uniform kernel size, found {0} and {1}")]
    MixedKernels(usize, usize),
}

pub type Result<T, E = TopologyError> = std::result::Result<T, E>;

pub type NodeId = usize;

/// How a node combines two incoming feature-map sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Concat,
    Sum,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Concat => "concat",
            Fusion::Sum => "sum",
        })
    }
}

impl std::str::FromStr for Fusion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "concat" => Ok(Fusion::Concat),
            "sum" => Ok(Fusion::Sum),
            other => Err(format!("unknown fusion mode `{other}` (expected concat or sum)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct LatticeSpec {
    pub rows: usize,
    pub cols: usize,
    pub filters: usize,
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub fusion: Fusion,
}

impl LatticeSpec {
    /// 32 filters per node, 3×3 kernels, concatenation fusion.
    pub fn new(rows: usize, cols: usize, channels: usize) -> Self {
        Self {
            rows,
            cols,
            filters: DEFAULT_FILTERS,
            kernel_size: DEFAULT_KERNEL,
            in_channels: channels,
            out_channels: channels,
            fusion: Fusion::Concat,
        }
    }

    pub fn with_fusion(mut self, fusion: Fusion) -> Self {
        self.fusion = fusion;
        self
    }
}

/// A straight chain of conv layers; the first `wide_prefix` hidden layers
/// use `wide_filters`, the remaining hidden layers `filters`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct PlainSpec {
    /// Total conv layers including the output layer.
    pub layers: usize,
    pub wide_prefix: usize,
    pub filters: usize,
    pub wide_filters: usize,
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl PlainSpec {
    pub fn new(layers: usize, wide_prefix: usize, channels: usize) -> Self {
        Self {
            layers,
            wide_prefix,
            filters: DEFAULT_FILTERS,
            wide_filters: DEFAULT_WIDE_FILTERS,
            kernel_size: DEFAULT_KERNEL,
            in_channels: channels,
            out_channels: channels,
        }
    }

    fn hidden_width(&self, layer: usize) -> usize {
        if layer < self.wide_prefix {
            self.wide_filters
        } else {
            self.filters
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ArchSpec {
    Lattice(LatticeSpec),
    Plain(PlainSpec),
}

impl ArchSpec {
    pub fn build(&self) -> Result<NetworkTopology> {
        match self {
            ArchSpec::Lattice(s) => build_lattice(s),
            ArchSpec::Plain(s) => build_plain(s),
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            ArchSpec::Lattice(s) => s.in_channels,
            ArchSpec::Plain(s) => s.in_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            ArchSpec::Lattice(s) => s.out_channels,
            ArchSpec::Plain(s) => s.out_channels,
        }
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchSpec::Lattice(s) => {
                write!(f, "lfnet-{}x{}-c{}", s.rows, s.cols, s.in_channels)?;
                if s.fusion == Fusion::Sum {
                    f.write_str("-sum")?;
                }
                Ok(())
            }
            ArchSpec::Plain(s) => {
                write!(f, "plain-{}-w{}-c{}", s.layers, s.wide_prefix, s.in_channels)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct GridPos {
    pub row: usize,
    pub col: usize,
}

impl fmt::Display for GridPos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.row, self.col)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKind {
    InputConv,
    FusionConv,
    OutputConv,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub pos: Option<GridPos>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    /// Conv is followed by batch norm and ReLU. False only for output layers.
    pub batch_norm: bool,
}

impl Node {
    pub fn label(&self) -> String {
        match (self.kind, self.pos) {
            (NodeKind::OutputConv, _) => "out".to_string(),
            (_, Some(p)) => p.to_string(),
            (_, None) => format!("L{}", self.id),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeRole {
    Vertical,
    Horizontal,
    ToOutput,
    Chain,
}

impl EdgeRole {
    pub fn name(&self) -> &'static str {
        match self {
            EdgeRole::Vertical => "vertical",
            EdgeRole::Horizontal => "horizontal",
            EdgeRole::ToOutput => "to-output",
            EdgeRole::Chain => "chain",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
    pub role: EdgeRole,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkTopology {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub input: NodeId,
    pub output: NodeId,
    pub fusion: Fusion,
}

impl NetworkTopology {
    /// Assemble a topology without structural checks; see [`Self::validate`].
    pub fn from_parts(
        nodes: Vec<Node>,
        edges: Vec<Edge>,
        input: NodeId,
        output: NodeId,
        fusion: Fusion,
    ) -> Self {
        Self {
            nodes,
            edges,
            input,
            output,
            fusion,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn node_at(&self, row: usize, col: usize) -> Result<NodeId> {
        self.nodes
            .iter()
            .find(|n| n.pos == Some(GridPos { row, col }))
            .map(|n| n.id)
            .ok_or(TopologyError::NoSuchPosition { row, col })
    }

    /// Incoming edges in fusion order: vertical before horizontal, then
    /// insertion order. Concatenation stacks channels in this order.
    pub fn inputs_of(&self, id: NodeId) -> Vec<Edge> {
        let mut ins: Vec<Edge> = self.edges.iter().filter(|e| e.dst == id).copied().collect();
        ins.sort_by_key(|e| e.role);
        ins
    }

    pub fn successors(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.edges.iter().filter(move |e| e.src == id).map(|e| e.dst)
    }

    pub fn in_degree(&self, id: NodeId) -> usize {
        self.edges.iter().filter(|e| e.dst == id).count()
    }

    pub fn out_degree(&self, id: NodeId) -> usize {
        self.edges.iter().filter(|e| e.src == id).count()
    }

    /// Kahn's algorithm, always taking the smallest ready id.
    pub fn topological_order(&self) -> Result<Vec<NodeId>> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        for e in &self.edges {
            if e.src >= n {
                return Err(TopologyError::UnknownNode(e.src));
            }
            if e.dst >= n {
                return Err(TopologyError::UnknownNode(e.dst));
            }
            indeg[e.dst] += 1;
        }
        let mut ready: BinaryHeap<Reverse<NodeId>> =
            (0..n).filter(|&i| indeg[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(id)) = ready.pop() {
            order.push(id);
            for e in self.edges.iter().filter(|e| e.src == id) {
                indeg[e.dst] -= 1;
                if indeg[e.dst] == 0 {
                    ready.push(Reverse(e.dst));
                }
            }
        }
        if order.len() != n {
            return Err(TopologyError::Cyclic);
        }
        Ok(order)
    }

    /// Checks acyclicity, that every node lies on an input→output path, and
    /// that declared channel counts agree with the fusion of each node's
    /// producers. Returns a topological order.
    pub fn validate(&self) -> Result<Vec<NodeId>> {
        for id in [self.input, self.output] {
            if id >= self.nodes.len() {
                return Err(TopologyError::UnknownNode(id));
            }
        }
        let order = self.topological_order()?;
        let forward = self.reachable(self.input, false);
        let backward = self.reachable(self.output, true);
        for id in 0..self.nodes.len() {
            if !forward[id] || !backward[id] {
                return Err(TopologyError::DanglingNode(id));
            }
        }
        for node in &self.nodes {
            let ins = self.inputs_of(node.id);
            if node.id == self.input {
                if !ins.is_empty() {
                    return Err(TopologyError::InvalidSpec(
                        "the input node cannot have incoming edges".into(),
                    ));
                }
                continue;
            }
            let widths: Vec<usize> = ins.iter().map(|e| self.nodes[e.src].out_channels).collect();
            let actual = match self.fusion {
                Fusion::Concat => widths.iter().sum(),
                Fusion::Sum => {
                    if widths.windows(2).any(|w| w[0] != w[1]) {
                        return Err(TopologyError::UnequalSumInputs { node: node.id });
                    }
                    widths[0]
                }
            };
            if actual != node.in_channels {
                return Err(TopologyError::ChannelMismatch {
                    node: node.id,
                    expected: node.in_channels,
                    actual,
                });
            }
        }
        Ok(order)
    }

    fn reachable(&self, start: NodeId, reverse: bool) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(id) = queue.pop_front() {
            for e in &self.edges {
                let (from, to) = if reverse { (e.dst, e.src) } else { (e.src, e.dst) };
                if from == id && to < seen.len() && !seen[to] {
                    seen[to] = true;
                    queue.push_back(to);
                }
            }
        }
        seen
    }

    /// Plain-text adjacency listing, one node per line.
    pub fn export_adjacency(&self) -> String {
        let mut out = String::new();
        for node in &self.nodes {
            let succ: Vec<String> = self.successors(node.id).map(|s| self.nodes[s].label()).collect();
            let _ = writeln!(
                out,
                "{} [{}, {}->{}]: {}",
                node.label(),
                kind_name(node.kind),
                node.in_channels,
                node.out_channels,
                succ.join(" ")
            );
        }
        out
    }

    /// One edge per line: `src -> dst [role]`.
    pub fn export_graph(&self) -> String {
        let mut out = String::new();
        for e in &self.edges {
            let _ = writeln!(
                out,
                "{} -> {} [{}]",
                self.nodes[e.src].label(),
                self.nodes[e.dst].label(),
                e.role.name()
            );
        }
        out
    }
}

fn kind_name(kind: NodeKind) -> &'static str {
    match kind {
        NodeKind::InputConv => "input-conv",
        NodeKind::FusionConv => "fusion-conv",
        NodeKind::OutputConv => "output-conv",
    }
}

/// The last grid node on the serpentine path.
pub fn serpentine_terminal(rows: usize, cols: usize) -> GridPos {
    GridPos {
        row: rows,
        col: if rows % 2 == 1 { cols } else { 1 },
    }
}

/// The second feeder of the output layer, next to the serpentine terminal.
///
/// `(n, 1)` sits directly below the input, which keeps the shortest route
/// at `n` grid layers. When the terminal already is `(n, 1)` (even `n`),
/// its horizontal predecessor is used instead.
fn output_partner(rows: usize, cols: usize) -> Option<GridPos> {
    let terminal = serpentine_terminal(rows, cols);
    if terminal.col != 1 {
        Some(GridPos { row: rows, col: 1 })
    } else if cols >= 2 {
        Some(GridPos { row: rows, col: 2 })
    } else if rows >= 2 {
        Some(GridPos {
            row: rows - 1,
            col: 1,
        })
    } else {
        None
    }
}

pub fn build_lattice(spec: &LatticeSpec) -> Result<NetworkTopology> {
    let (n, m) = (spec.rows, spec.cols);
    if n == 0 || m == 0 {
        return Err(TopologyError::InvalidSpec(format!(
            "lattice needs at least one row and one column, got {n}x{m}"
        )));
    }
    if spec.filters == 0 || spec.in_channels == 0 || spec.out_channels == 0 {
        return Err(TopologyError::InvalidSpec("channel counts must be positive".into()));
    }
    if spec.kernel_size % 2 == 0 {
        return Err(TopologyError::InvalidSpec(format!(
            "kernel size {} is not odd",
            spec.kernel_size
        )));
    }
    let id = |row: usize, col: usize| (row - 1) * m + (col - 1);
    let output = n * m;

    let mut edges = Vec::new();
    for row in 1..=n {
        for col in 1..m {
            let (src, dst) = if row % 2 == 1 { (col, col + 1) } else { (col + 1, col) };
            edges.push(Edge {
                src: id(row, src),
                dst: id(row, dst),
                role: EdgeRole::Horizontal,
            });
        }
    }
    for row in 1..n {
        for col in 1..=m {
            edges.push(Edge {
                src: id(row, col),
                dst: id(row + 1, col),
                role: EdgeRole::Vertical,
            });
        }
    }
    let terminal = serpentine_terminal(n, m);
    let feeders: Vec<GridPos> = std::iter::once(terminal).chain(output_partner(n, m)).collect();
    for p in &feeders {
        edges.push(Edge {
            src: id(p.row, p.col),
            dst: output,
            role: EdgeRole::ToOutput,
        });
    }

    let fused_width = |inputs: usize| match spec.fusion {
        Fusion::Concat => inputs * spec.filters,
        Fusion::Sum => spec.filters,
    };
    let mut nodes = Vec::with_capacity(n * m + 1);
    for row in 1..=n {
        for col in 1..=m {
            let me = id(row, col);
            let (kind, in_channels) = if me == 0 {
                (NodeKind::InputConv, spec.in_channels)
            } else {
                let k = edges.iter().filter(|e| e.dst == me).count();
                (NodeKind::FusionConv, fused_width(k))
            };
            nodes.push(Node {
                id: me,
                kind,
                pos: Some(GridPos { row, col }),
                in_channels,
                out_channels: spec.filters,
                kernel_size: spec.kernel_size,
                batch_norm: true,
            });
        }
    }
    nodes.push(Node {
        id: output,
        kind: NodeKind::OutputConv,
        pos: None,
        in_channels: fused_width(feeders.len()),
        out_channels: spec.out_channels,
        kernel_size: spec.kernel_size,
        batch_norm: false,
    });
    let topo = NetworkTopology::from_parts(nodes, edges, 0, output, spec.fusion);
    topo.validate()?;
    Ok(topo)
}

pub fn build_plain(spec: &PlainSpec) -> Result<NetworkTopology> {
    if spec.layers < 2 {
        return Err(TopologyError::InvalidSpec(format!(
            "a plain network needs at least 2 layers, got {}",
            spec.layers
        )));
    }
    if spec.wide_prefix > spec.layers - 1 {
        return Err(TopologyError::InvalidSpec(format!(
            "wide prefix {} exceeds the {} hidden layers",
            spec.wide_prefix,
            spec.layers - 1
        )));
    }
    if spec.kernel_size % 2 == 0 {
        return Err(TopologyError::InvalidSpec(format!(
            "kernel size {} is not odd",
            spec.kernel_size
        )));
    }
    let out_id = spec.layers - 1;
    let mut nodes = Vec::with_capacity(spec.layers);
    let mut prev = spec.in_channels;
    for layer in 0..spec.layers {
        let is_out = layer == out_id;
        let width = if is_out { spec.out_channels } else { spec.hidden_width(layer) };
        nodes.push(Node {
            id: layer,
            kind: match layer {
                0 => NodeKind::InputConv,
                l if l == out_id => NodeKind::OutputConv,
                _ => NodeKind::FusionConv,
            },
            pos: None,
            in_channels: prev,
            out_channels: width,
            kernel_size: spec.kernel_size,
            batch_norm: !is_out,
        });
        prev = width;
    }
    let edges = (0..out_id)
        .map(|i| Edge {
            src: i,
            dst: i + 1,
            role: EdgeRole::Chain,
        })
        .collect();
    let topo = NetworkTopology::from_parts(nodes, edges, 0, out_id, Fusion::Concat);
    topo.validate()?;
    Ok(topo)
}

/// Smallest wide prefix whose plain chain has at least `target` parameters,
/// or `None` if even an all-wide chain falls short.
pub fn match_plain_wide_prefix(base: &PlainSpec, target: usize) -> Option<usize> {
    (0..base.layers).find(|&w| {
        let spec = PlainSpec {
            wide_prefix: w,
            ..*base
        };
        build_plain(&spec)
            .map(|t| count_parameters(&t).total >= target)
            .unwrap_or(false)
    })
}

/// The plain chain compared against a lattice: as many conv layers as the
/// lattice's longest input→output path and the wide prefix whose parameter
/// count is closest to the lattice's (ties go to the larger network).
pub fn matched_plain(spec: &LatticeSpec) -> Result<PlainSpec> {
    let topo = build_lattice(spec)?;
    let (_, depth) = min_max_depth(&topo, true)?;
    let base = PlainSpec {
        layers: depth.max(2),
        wide_prefix: 0,
        filters: spec.filters,
        wide_filters: 2 * spec.filters,
        kernel_size: spec.kernel_size,
        in_channels: spec.in_channels,
        out_channels: spec.out_channels,
    };
    let target = count_parameters(&topo).total;
    let count = |w: usize| -> Result<usize> {
        Ok(count_parameters(&build_plain(&PlainSpec { wide_prefix: w, ..base })?).total)
    };
    let above = match_plain_wide_prefix(&base, target).unwrap_or(base.layers - 1);
    let mut wide_prefix = above;
    if above > 0 && target.abs_diff(count(above - 1)?) < target.abs_diff(count(above)?) {
        wide_prefix = above - 1;
    }
    Ok(PlainSpec { wide_prefix, ..base })
}

// ---------------------------------------------------------------------------
// Analysis

/// Minimum and maximum number of conv layers over all input→output paths.
/// The output layer counts as one layer when `include_output` is set.
pub fn min_max_depth(topo: &NetworkTopology, include_output: bool) -> Result<(usize, usize)> {
    let lengths = path_lengths(topo, include_output)?;
    Ok((
        *lengths.first().expect("validated topology has a path"),
        *lengths.last().expect("validated topology has a path"),
    ))
}

/// Every distinct input→output path length, in conv layers.
pub fn path_lengths(topo: &NetworkTopology, include_output: bool) -> Result<BTreeSet<usize>> {
    let order = topo.validate()?;
    let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); topo.len()];
    sets[topo.input].insert(1);
    for &id in &order {
        if id == topo.input {
            continue;
        }
        let mut acc = BTreeSet::new();
        for e in topo.inputs_of(id) {
            acc.extend(sets[e.src].iter().map(|d| d + 1));
        }
        sets[id] = acc;
    }
    let adjust = usize::from(!include_output);
    Ok(sets[topo.output].iter().map(|d| d - adjust).collect())
}

/// Conv layers on the shortest directed route from `node` to the output
/// layer, counting `node` itself but not the output layer. A feeder of the
/// output is at distance 1, the input node at the network's minimum depth.
pub fn distance_to_output(topo: &NetworkTopology, node: NodeId) -> Result<usize> {
    if node >= topo.len() {
        return Err(TopologyError::UnknownNode(node));
    }
    if node == topo.output {
        return Err(TopologyError::OutputNode(node));
    }
    let dist = hops_to_output(topo);
    dist[node].ok_or(TopologyError::DanglingNode(node))
}

/// Edge counts on the shortest path to the output, by reverse BFS.
fn hops_to_output(topo: &NetworkTopology) -> Vec<Option<usize>> {
    let mut dist = vec![None; topo.len()];
    dist[topo.output] = Some(0);
    let mut queue = VecDeque::from([topo.output]);
    while let Some(id) = queue.pop_front() {
        let d = dist[id].unwrap();
        for e in topo.edges.iter().filter(|e| e.dst == id) {
            if dist[e.src].is_none() {
                dist[e.src] = Some(d + 1);
                queue.push_back(e.src);
            }
        }
    }
    dist
}

/// Maximum in- and out-degree over all nodes.
pub fn max_degrees(topo: &NetworkTopology) -> (usize, usize) {
    let ins = (0..topo.len()).map(|i| topo.in_degree(i)).max().unwrap_or(0);
    let outs = (0..topo.len()).map(|i| topo.out_degree(i)).max().unwrap_or(0);
    (ins, outs)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NodeParamCount {
    pub node: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub per_node: Vec<NodeParamCount>,
}

/// Learnable parameters: conv weights and biases plus batch-norm γ and β.
/// Running statistics are not learnable and not counted.
pub fn count_parameters(topo: &NetworkTopology) -> ParamCount {
    let per_node: Vec<NodeParamCount> = topo
        .nodes
        .iter()
        .map(|n| {
            let conv = n.kernel_size * n.kernel_size * n.in_channels * n.out_channels + n.out_channels;
            let bn = if n.batch_norm { 2 * n.out_channels } else { 0 };
            NodeParamCount {
                node: n.label(),
                in_channels: n.in_channels,
                out_channels: n.out_channels,
                params: conv + bn,
            }
        })
        .collect();
    ParamCount {
        total: per_node.iter().map(|p| p.params).sum(),
        per_node,
    }
}

/// Side length of the receptive field: `d·(k−1) + 1` with `d` the maximum
/// depth including the output layer (`2d + 1` for 3×3 kernels).
pub fn receptive_field(topo: &NetworkTopology) -> Result<usize> {
    let k = topo.nodes[0].kernel_size;
    if let Some(other) = topo.nodes.iter().find(|n| n.kernel_size != k) {
        return Err(TopologyError::MixedKernels(k, other.kernel_size));
    }
    let (_, d) = min_max_depth(topo, true)?;
    Ok(d * (k - 1) + 1)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NodeDistance {
    pub node: String,
    pub distance: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GraphAnalysis {
    pub arch: String,
    pub conv_layers: usize,
    pub min_depth: usize,
    pub max_depth: usize,
    pub min_depth_without_output: usize,
    pub max_depth_without_output: usize,
    pub max_in_degree: usize,
    pub max_out_degree: usize,
    pub max_distance_to_output: usize,
    pub distances: Vec<NodeDistance>,
    pub receptive_field: usize,
    pub parameters: ParamCount,
}

pub fn analyze(arch: &ArchSpec) -> Result<GraphAnalysis> {
    let topo = arch.build()?;
    let (min_depth, max_depth) = min_max_depth(&topo, true)?;
    let (min_wo, max_wo) = min_max_depth(&topo, false)?;
    let (max_in_degree, max_out_degree) = max_degrees(&topo);
    let hops = hops_to_output(&topo);
    let distances: Vec<NodeDistance> = topo
        .nodes
        .iter()
        .filter(|n| n.id != topo.output)
        .map(|n| NodeDistance {
            node: n.label(),
            distance: hops[n.id].expect("validated"),
        })
        .collect();
    Ok(GraphAnalysis {
        arch: arch.to_string(),
        conv_layers: topo.len(),
        min_depth,
        max_depth,
        min_depth_without_output: min_wo,
        max_depth_without_output: max_wo,
        max_in_degree,
        max_out_degree,
        max_distance_to_output: distances.iter().map(|d| d.distance).max().unwrap_or(0),
        distances,
        receptive_field: receptive_field(&topo)?,
        parameters: count_parameters(&topo),
    })
}

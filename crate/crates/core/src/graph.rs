//! Edge-granular computational graph of a [`ModelConfig`] and circuits over it.
//!
//! Nodes are the embedding, every attention head, every MLP and the final
//! readout. Every node writes additively into the residual stream, so there
//! is an edge from each node to every downstream node input channel: heads
//! have separate `q`, `k` and `v` inputs, MLPs and the readout a single `in`.
//!
//! Node names follow `embed`, `a{layer}.h{head}`, `m{layer}`, `final`; an
//! edge is written `SRC->DST.CHANNEL`, with the channel omitted for MLP and
//! readout destinations.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const CIRCUIT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeId {
    Embed,
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
    Final,
}

impl NodeId {
    /// Position in the evaluation order: embed, then per layer all heads
    /// followed by the MLP, then the readout.
    fn topo_key(&self) -> (usize, usize, usize) {
        match *self {
            NodeId::Embed => (0, 0, 0),
            NodeId::Head { layer, head } => (layer + 1, 0, head),
            NodeId::Mlp { layer } => (layer + 1, 1, 0),
            NodeId::Final => (usize::MAX, 0, 0),
        }
    }

    pub fn channels(&self) -> &'static [InputChannel] {
        match self {
            NodeId::Embed => &[],
            NodeId::Head { .. } => &[InputChannel::Q, InputChannel::K, InputChannel::V],
            NodeId::Mlp { .. } | NodeId::Final => &[InputChannel::In],
        }
    }

    pub fn accepts(&self, channel: InputChannel) -> bool {
        self.channels().contains(&channel)
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let ok = match *self {
            NodeId::Embed | NodeId::Final => true,
            NodeId::Head { layer, head } => layer < config.n_layers && head < config.n_heads,
            NodeId::Mlp { layer } => config.use_mlp && layer < config.n_layers,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::UnknownNode(self.to_string()))
        }
    }

    /// Whether `self` writes to the residual stream before `dst` reads it.
    ///
    /// Heads of one layer read only strictly earlier layers; a layer's MLP
    /// also reads that layer's heads.
    pub fn feeds(&self, dst: &NodeId) -> bool {
        match (*self, *dst) {
            (NodeId::Final, _) | (_, NodeId::Embed) => false,
            (_, NodeId::Final) => true,
            (NodeId::Embed, _) => true,
            (NodeId::Head { layer: s, .. }, NodeId::Head { layer: d, .. }) => s < d,
            (NodeId::Mlp { layer: s }, NodeId::Head { layer: d, .. }) => s < d,
            (NodeId::Head { layer: s, .. }, NodeId::Mlp { layer: d }) => s <= d,
            (NodeId::Mlp { layer: s }, NodeId::Mlp { layer: d }) => s < d,
        }
    }
}

impl Ord for NodeId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.topo_key().cmp(&other.topo_key())
    }
}

impl PartialOrd for NodeId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Embed => f.write_str("embed"),
            NodeId::Head { layer, head } => write!(f, "a{layer}.h{head}"),
            NodeId::Mlp { layer } => write!(f, "m{layer}"),
            NodeId::Final => f.write_str("final"),
        }
    }
}

impl FromStr for NodeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownNode(s.to_string());
        let number = |digits: &str| -> Result<usize> {
            if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
                return Err(unknown());
            }
            digits.parse().map_err(|_| unknown())
        };
        match s {
            "embed" => return Ok(NodeId::Embed),
            "final" => return Ok(NodeId::Final),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix('a') {
            let (layer, head) = rest.split_once(".h").ok_or_else(unknown)?;
            return Ok(NodeId::Head {
                layer: number(layer)?,
                head: number(head)?,
            });
        }
        if let Some(rest) = s.strip_prefix('m') {
            return Ok(NodeId::Mlp {
                layer: number(rest)?,
            });
        }
        Err(unknown())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InputChannel {
    Q,
    K,
    V,
    In,
}

impl InputChannel {
    pub fn as_str(&self) -> &'static str {
        match self {
            InputChannel::Q => "q",
            InputChannel::K => "k",
            InputChannel::V => "v",
            InputChannel::In => "in",
        }
    }
}

impl fmt::Display for InputChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InputChannel {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "q" => Ok(InputChannel::Q),
            "k" => Ok(InputChannel::K),
            "v" => Ok(InputChannel::V),
            "in" => Ok(InputChannel::In),
            _ => Err(()),
        }
    }
}

/// A directed edge from a node into one input channel of a downstream node.
///
/// Ordered by destination, then source, then channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EdgeId {
    pub src: NodeId,
    pub dst: NodeId,
    pub channel: InputChannel,
}

impl EdgeId {
    /// Builds an edge after checking it against `config`.
    pub fn new(
        src: NodeId,
        dst: NodeId,
        channel: InputChannel,
        config: &ModelConfig,
    ) -> Result<Self> {
        let edge = EdgeId { src, dst, channel };
        edge.validate(config)?;
        Ok(edge)
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        self.src.validate(config)?;
        self.dst.validate(config)?;
        if !self.dst.accepts(self.channel) {
            return Err(Error::IllegalChannel {
                dst: self.dst.to_string(),
                channel: self.channel.to_string(),
            });
        }
        if !self.src.feeds(&self.dst) {
            return Err(Error::NotUpstream(self.to_string()));
        }
        Ok(())
    }

    /// Parses `SRC->DST[.CHANNEL]` and validates it against `config`.
    pub fn parse(s: &str, config: &ModelConfig) -> Result<Self> {
        let (src, dst) = s
            .split_once("->")
            .ok_or_else(|| Error::Malformed(format!("edge `{s}` lacks `->`")))?;
        let src: NodeId = src.trim().parse()?;
        let dst = dst.trim();
        let (dst, channel) = match dst.rsplit_once('.') {
            Some((node, ch)) => match ch.parse::<InputChannel>() {
                Ok(channel) => (node.parse::<NodeId>()?, channel),
                // `a0.h1` splits into `a0` / `h1`: no channel suffix present.
                Err(()) => (dst.parse::<NodeId>()?, InputChannel::In),
            },
            None => (dst.parse::<NodeId>()?, InputChannel::In),
        };
        EdgeId::new(src, dst, channel, config)
    }
}

impl Ord for EdgeId {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.dst, self.src, self.channel).cmp(&(other.dst, other.src, other.channel))
    }
}

impl PartialOrd for EdgeId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.channel {
            InputChannel::In => write!(f, "{}->{}", self.src, self.dst),
            ch => write!(f, "{}->{}.{}", self.src, self.dst, ch),
        }
    }
}

/// All nodes of `config` in evaluation order.
pub fn nodes(config: &ModelConfig) -> Vec<NodeId> {
    let mut out = vec![NodeId::Embed];
    for layer in 0..config.n_layers {
        out.extend((0..config.n_heads).map(|head| NodeId::Head { layer, head }));
        if config.use_mlp {
            out.push(NodeId::Mlp { layer });
        }
    }
    out.push(NodeId::Final);
    out
}

/// Node list plus, for every node, the indices of the nodes feeding it.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub nodes: Vec<NodeId>,
    pub upstream: Vec<Vec<usize>>,
}

impl Topology {
    pub fn new(config: &ModelConfig) -> Self {
        let nodes = nodes(config);
        let upstream = nodes
            .iter()
            .map(|dst| {
                nodes
                    .iter()
                    .enumerate()
                    .filter(|(_, src)| src.feeds(dst))
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        Topology { nodes, upstream }
    }

    pub fn index_of(&self, node: &NodeId) -> Option<usize> {
        self.nodes.binary_search(node).ok()
    }
}

/// Every legal edge of `config` exactly once, in [`EdgeId`] order.
pub fn enumerate_edges(config: &ModelConfig) -> Vec<EdgeId> {
    let topo = Topology::new(config);
    let mut edges = Vec::new();
    for (dst_idx, dst) in topo.nodes.iter().enumerate() {
        for &src_idx in &topo.upstream[dst_idx] {
            for &channel in dst.channels() {
                edges.push(EdgeId {
                    src: topo.nodes[src_idx],
                    dst: *dst,
                    channel,
                });
            }
        }
    }
    edges
}

/// A validated set of edges bound to one model configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Circuit {
    model_config_hash: String,
    edges: BTreeSet<EdgeId>,
}

impl Circuit {
    pub fn new(config: &ModelConfig, edges: impl IntoIterator<Item = EdgeId>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for edge in edges {
            edge.validate(config)?;
            if !set.insert(edge) {
                return Err(Error::DuplicateEdge(edge.to_string()));
            }
        }
        Ok(Circuit {
            model_config_hash: config.hash(),
            edges: set,
        })
    }

    pub fn full(config: &ModelConfig) -> Self {
        Circuit {
            model_config_hash: config.hash(),
            edges: enumerate_edges(config).into_iter().collect(),
        }
    }

    pub fn empty(config: &ModelConfig) -> Self {
        Circuit {
            model_config_hash: config.hash(),
            edges: BTreeSet::new(),
        }
    }

    pub fn model_config_hash(&self) -> &str {
        &self.model_config_hash
    }

    pub fn edges(&self) -> &BTreeSet<EdgeId> {
        &self.edges
    }

    pub fn contains(&self, edge: &EdgeId) -> bool {
        self.edges.contains(edge)
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        let model = config.hash();
        if model != self.model_config_hash {
            return Err(Error::ConfigHashMismatch {
                circuit: self.model_config_hash.clone(),
                model,
            });
        }
        Ok(())
    }
}

/// Edges of `config` not in `circuit`: the edges that get resample-ablated.
pub fn complement(circuit: &Circuit, config: &ModelConfig) -> Result<Vec<EdgeId>> {
    circuit.check_config(config)?;
    Ok(enumerate_edges(config)
        .into_iter()
        .filter(|e| !circuit.contains(e))
        .collect())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CircuitDocument {
    #[serde(default = "default_version")]
    format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model_config_hash: Option<String>,
    edges: Vec<String>,
}

fn default_version() -> u32 {
    CIRCUIT_FORMAT_VERSION
}

/// Parses a circuit document. A document without `model_config_hash` binds
/// to `config`; one with a hash must match it.
pub fn parse_circuit(document: &str, config: &ModelConfig) -> Result<Circuit> {
    let doc: CircuitDocument =
        serde_json::from_str(document).map_err(|e| Error::Malformed(e.to_string()))?;
    if doc.format_version != CIRCUIT_FORMAT_VERSION {
        return Err(Error::FormatVersion(doc.format_version));
    }
    let edges = doc
        .edges
        .iter()
        .map(|s| EdgeId::parse(s, config))
        .collect::<Result<Vec<_>>>()?;
    let circuit = Circuit::new(config, edges)?;
    if let Some(hash) = doc.model_config_hash {
        if hash != circuit.model_config_hash {
            return Err(Error::ConfigHashMismatch {
                circuit: hash,
                model: circuit.model_config_hash,
            });
        }
    }
    Ok(circuit)
}

pub fn serialize_circuit(circuit: &Circuit) -> String {
    let doc = CircuitDocument {
        format_version: CIRCUIT_FORMAT_VERSION,
        model_config_hash: Some(circuit.model_config_hash.clone()),
        edges: circuit.edges.iter().map(ToString::to_string).collect(),
    };
    serde_json::to_string_pretty(&doc).expect("circuit document serializes")
}

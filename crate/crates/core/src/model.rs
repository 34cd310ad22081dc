//! A topology together with its learnable parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::lattice::{ArchSpec, NetworkTopology, NodeId, TopologyError};
use crate::tensor::{BatchNormCache, BatchNormParams, ConvParams, Scalar, Shape, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("expected parameters for {expected} nodes, got {actual}")]
    NodeCount { expected: usize, actual: usize },
    #[error("parameters of node {node} do not match its layer shape: {detail}")]
    ParamShape { node: NodeId, detail: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
}

impl ParamRole {
    pub fn name(&self) -> &'static str {
        match self {
            ParamRole::ConvWeight => "conv.weight",
            ParamRole::ConvBias => "conv.bias",
            ParamRole::BnGamma => "bn.gamma",
            ParamRole::BnBeta => "bn.beta",
        }
    }
}

/// Identifies one learnable tensor: a node and the role of the tensor in it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId {
    pub node: NodeId,
    pub role: ParamRole,
}

impl std::fmt::Display for ParamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "node {} {}", self.node, self.role.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeParams<T> {
    pub conv: ConvParams<T>,
    pub bn: Option<BatchNormParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkModel<T> {
    arch: ArchSpec,
    topology: NetworkTopology,
    pub nodes: Vec<NodeParams<T>>,
}

/// Fan-in He initialization: conv weights from `N(0, 2/(k·k·in))`, zero
/// biases, identity batch norm. Deterministic in `seed`.
pub fn initialize_model<T: Scalar>(arch: &ArchSpec, seed: u64) -> Result<NetworkModel<T>, TopologyError> {
    let topology = arch.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = topology
        .nodes
        .iter()
        .map(|n| {
            let fan_in = (n.kernel_size * n.kernel_size * n.in_channels) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let shape = Shape::new(n.out_channels, n.in_channels, n.kernel_size, n.kernel_size);
            let weights: Vec<T> = (0..shape.numel())
                .map(|_| T::from_f64_lossy(normal.sample(&mut rng)))
                .collect();
            NodeParams {
                conv: ConvParams {
                    weights: Tensor::from_vec(shape, weights).expect("shape matches"),
                    bias: vec![T::zero(); n.out_channels],
                },
                bn: n.batch_norm.then(|| BatchNormParams::new(n.out_channels)),
            }
        })
        .collect();
    Ok(NetworkModel {
        arch: *arch,
        topology,
        nodes,
    })
}

impl<T: Scalar> NetworkModel<T> {
    /// Every conv weight and bias zero, batch norm at identity.
    pub fn zeroed(arch: &ArchSpec) -> Result<Self, TopologyError> {
        let mut model = initialize_model(arch, 0)?;
        for node in &mut model.nodes {
            node.conv.weights.data_mut().fill(T::zero());
        }
        Ok(model)
    }

    /// Assemble a model from explicit parameters, checking every shape
    /// against the topology built from `arch`.
    pub fn from_parts(arch: ArchSpec, nodes: Vec<NodeParams<T>>) -> Result<Self, ModelError> {
        let topology = arch.build()?;
        if nodes.len() != topology.len() {
            return Err(ModelError::NodeCount {
                expected: topology.len(),
                actual: nodes.len(),
            });
        }
        for (node, p) in topology.nodes.iter().zip(&nodes) {
            let want = Shape::new(node.out_channels, node.in_channels, node.kernel_size, node.kernel_size);
            let bad = |detail: String| ModelError::ParamShape { node: node.id, detail };
            if p.conv.weights.shape() != want {
                return Err(bad(format!("conv weights {} != {want}", p.conv.weights.shape())));
            }
            if p.conv.bias.len() != node.out_channels {
                return Err(bad(format!("conv bias length {}", p.conv.bias.len())));
            }
            match (&p.bn, node.batch_norm) {
                (Some(bn), true) => {
                    let c = node.out_channels;
                    if [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]
                        .iter()
                        .any(|v| v.len() != c)
                    {
                        return Err(bad("batch-norm vector length".into()));
                    }
                }
                (None, false) => {}
                (Some(_), false) => return Err(bad("unexpected batch norm".into())),
                (None, true) => return Err(bad("missing batch norm".into())),
            }
        }
        Ok(Self { arch, topology, nodes })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn topology(&self) -> &NetworkTopology {
        &self.topology
    }

    /// Replace the topology while keeping parameters. Used to run the same
    /// weights on an altered graph (e.g. a malformed one in tests).
    pub fn with_topology(mut self, topology: NetworkTopology) -> Self {
        self.topology = topology;
        self
    }

    /// All learnable tensors, ordered by node id then role.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (node, p) in self.nodes.iter().enumerate() {
            ids.push(ParamId { node, role: ParamRole::ConvWeight });
            ids.push(ParamId { node, role: ParamRole::ConvBias });
            if p.bn.is_some() {
                ids.push(ParamId { node, role: ParamRole::BnGamma });
                ids.push(ParamId { node, role: ParamRole::BnBeta });
            }
        }
        ids
    }

    pub fn param(&self, id: ParamId) -> &[T] {
        let p = &self.nodes[id.node];
        match id.role {
            ParamRole::ConvWeight => p.conv.weights.data(),
            ParamRole::ConvBias => &p.conv.bias,
            ParamRole::BnGamma => &p.bn.as_ref().expect("node has batch norm").gamma,
            ParamRole::BnBeta => &p.bn.as_ref().expect("node has batch norm").beta,
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut [T] {
        let p = &mut self.nodes[id.node];
        match id.role {
            ParamRole::ConvWeight => p.conv.weights.data_mut(),
            ParamRole::ConvBias => &mut p.conv.bias,
            ParamRole::BnGamma => &mut p.bn.as_mut().expect("node has batch norm").gamma,
            ParamRole::BnBeta => &mut p.bn.as_mut().expect("node has batch norm").beta,
        }
    }

    pub fn param_shape(&self, id: ParamId) -> Vec<usize> {
        match id.role {
            ParamRole::ConvWeight => self.nodes[id.node].conv.weights.shape().dims().to_vec(),
            _ => vec![self.param(id).len()],
        }
    }

    /// Element count of every learnable tensor, summed by walking the model.
    pub fn num_learnable(&self) -> usize {
        self.param_ids().iter().map(|&id| self.param(id).len()).sum()
    }

    /// Fold train-mode batch statistics into each node's running averages.
    pub fn update_running_stats<'a>(&mut self, caches: impl IntoIterator<Item = (NodeId, &'a BatchNormCache<T>)>) {
        for (node, cache) in caches {
            if let Some(bn) = self.nodes[node].bn.as_mut() {
                bn.update_running(cache);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> NetworkModel<U> {
        let conv = |v: &[T]| -> Vec<U> { v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect() };
        NetworkModel {
            arch: self.arch,
            topology: self.topology.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|p| NodeParams {
                    conv: ConvParams {
                        weights: p.conv.weights.cast(),
                        bias: conv(&p.conv.bias),
                    },
                    bn: p.bn.as_ref().map(|bn| BatchNormParams {
                        gamma: conv(&bn.gamma),
                        beta: conv(&bn.beta),
                        running_mean: conv(&bn.running_mean),
                        running_var: conv(&bn.running_var),
                        epsilon: U::from_f64_lossy(bn.epsilon.as_f64()),
                        momentum: U::from_f64_lossy(bn.momentum.as_f64()),
                    }),
                })
                .collect(),
        }
    }
}

//! Forward and reverse-mode execution of a layer graph, plus a whole-network
//! finite-difference gradient checker.
//!
//! Every node computes conv → batch norm → ReLU on the fusion of its
//! incoming feature maps; the output node is a bare conv. The backward pass
//! walks the forward order in reverse and sums the cotangents a node
//! receives from all of its consumers.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::lattice::{ArchSpec, Edge, Fusion, NodeId, TopologyError};
use crate::model::{NetworkModel, ParamId, ParamRole};
use crate::tensor::{
    batchnorm_backward, batchnorm_forward, concat_channels, conv2d_backward_with, conv2d_forward,
    relu, relu_backward, split_channels_backward, BatchNormCache, Mode, Scalar, Shape, Tensor,
    TensorError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input has {actual} channels, the network expects {expected}")]
    InputChannels { expected: usize, actual: usize },
    #[error("supplied order is not a valid topological order of the network")]
    InvalidOrder,
    #[error("trace does not belong to this model: {0}")]
    TraceMismatch(String),
    #[error("backward pass needs a train-mode trace")]
    InferTrace,
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

/// Saved state of one node from a train-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeTrace<T> {
    /// The fused conv input.
    pub input: Tensor<T>,
    pub bn: Option<BatchNormCache<T>>,
    /// The node's output (post-ReLU for hidden nodes).
    pub output: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComputeTrace<T> {
    pub arch: ArchSpec,
    pub mode: Mode,
    pub order: Vec<NodeId>,
    /// Indexed by node id; empty for infer-mode traces.
    pub nodes: Vec<NodeTrace<T>>,
}

impl<T: Scalar> ComputeTrace<T> {
    /// `(node, cache)` for every batch-norm layer, for running-stat updates.
    pub fn bn_caches(&self) -> impl Iterator<Item = (NodeId, &BatchNormCache<T>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.bn.as_ref().map(|c| (i, c)))
    }
}

/// One gradient per learnable tensor, flattened in the primal's layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T> {
    pub grads: BTreeMap<ParamId, Vec<T>>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.grads[&id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Vec<T>)> {
        self.grads.iter()
    }

    pub fn max_abs(&self) -> T {
        self.grads
            .values()
            .flatten()
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

fn fuse<T: Scalar>(fusion: Fusion, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    Ok(match (parts, fusion) {
        ([one], _) => (*one).clone(),
        ([a, b], Fusion::Concat) => concat_channels(a, b)?,
        ([a, b], Fusion::Sum) => a.add(b)?,
        _ => {
            return Err(GraphError::Topology(TopologyError::InvalidSpec(format!(
                "node has {} inputs, at most 2 are supported",
                parts.len()
            ))))
        }
    })
}

/// Run the network in its default (smallest-id-first) topological order.
/// The pass is pure: running statistics are not touched, use
/// [`NetworkModel::update_running_stats`] with [`ComputeTrace::bn_caches`].
pub fn forward_pass<T: Scalar>(
    model: &NetworkModel<T>,
    input: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, ComputeTrace<T>)> {
    let order = model.topology().validate()?;
    forward_with_order(model, input, mode, &order)
}

/// Like [`forward_pass`] with a caller-chosen topological order.
pub fn forward_with_order<T: Scalar>(
    model: &NetworkModel<T>,
    input: &Tensor<T>,
    mode: Mode,
    order: &[NodeId],
) -> Result<(Tensor<T>, ComputeTrace<T>)> {
    let topo = model.topology();
    topo.validate()?;
    check_order(model, order)?;
    let in_ch = topo.node(topo.input).in_channels;
    if input.shape().c != in_ch {
        return Err(GraphError::InputChannels {
            expected: in_ch,
            actual: input.shape().c,
        });
    }
    let retain = mode == Mode::Train;
    let inputs: Vec<Vec<Edge>> = (0..topo.len()).map(|id| topo.inputs_of(id)).collect();
    // Remaining consumers per node, so infer mode can drop activations early.
    let mut pending: Vec<usize> = (0..topo.len()).map(|id| topo.out_degree(id)).collect();
    let mut outputs: Vec<Option<Tensor<T>>> = vec![None; topo.len()];
    let mut traces: Vec<Option<NodeTrace<T>>> = vec![None; topo.len()];

    for &id in order {
        let node = topo.node(id);
        let params = &model.nodes[id];
        let fused = if id == topo.input {
            input.clone()
        } else {
            let parts: Vec<&Tensor<T>> = inputs[id]
                .iter()
                .map(|e| outputs[e.src].as_ref().expect("producer ran earlier"))
                .collect();
            fuse(topo.fusion, &parts)?
        };
        let z = conv2d_forward(&fused, &params.conv)?;
        let (out, bn_cache) = match (&params.bn, node.batch_norm) {
            (Some(bn), true) => {
                let (y, cache) = batchnorm_forward(&z, bn, mode)?;
                (relu(&y), Some(cache))
            }
            _ => (z, None),
        };
        if !retain {
            for e in &inputs[id] {
                pending[e.src] -= 1;
                if pending[e.src] == 0 {
                    outputs[e.src] = None;
                }
            }
        }
        if retain {
            traces[id] = Some(NodeTrace {
                input: fused,
                bn: bn_cache,
                output: out.clone(),
            });
        }
        outputs[id] = Some(out);
    }
    let result = outputs[topo.output].take().expect("output node ran");
    Ok((
        result,
        ComputeTrace {
            arch: *model.arch(),
            mode,
            order: order.to_vec(),
            nodes: traces.into_iter().flatten().collect(),
        },
    ))
}

fn check_order<T: Scalar>(model: &NetworkModel<T>, order: &[NodeId]) -> Result<()> {
    let topo = model.topology();
    let mut position = vec![usize::MAX; topo.len()];
    for (i, &id) in order.iter().enumerate() {
        if id >= topo.len() || position[id] != usize::MAX {
            return Err(GraphError::InvalidOrder);
        }
        position[id] = i;
    }
    if order.len() != topo.len() || topo.edges.iter().any(|e| position[e.src] >= position[e.dst]) {
        return Err(GraphError::InvalidOrder);
    }
    Ok(())
}

/// Inference-only forward pass that frees activations as soon as possible.
pub fn infer<T: Scalar>(model: &NetworkModel<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    forward_pass(model, input, Mode::Infer).map(|(y, _)| y)
}

pub fn backward_pass<T: Scalar>(
    model: &NetworkModel<T>,
    trace: &ComputeTrace<T>,
    grad_output: &Tensor<T>,
) -> Result<GradientSet<T>> {
    backward_severed(model, trace, grad_output, &[])
}

/// Backward pass in which the cotangents flowing back along the `severed`
/// edges are dropped. With no severed edges this is [`backward_pass`].
pub fn backward_severed<T: Scalar>(
    model: &NetworkModel<T>,
    trace: &ComputeTrace<T>,
    grad_output: &Tensor<T>,
    severed: &[Edge],
) -> Result<GradientSet<T>> {
    if trace.mode != Mode::Train {
        return Err(GraphError::InferTrace);
    }
    let topo = model.topology();
    if trace.arch != *model.arch() {
        return Err(GraphError::TraceMismatch(format!(
            "trace from {}, model is {}",
            trace.arch,
            model.arch()
        )));
    }
    if trace.nodes.len() != topo.len() || trace.order.len() != topo.len() {
        return Err(GraphError::TraceMismatch(format!(
            "trace has {} nodes, model has {}",
            trace.nodes.len(),
            topo.len()
        )));
    }
    for (node, t) in topo.nodes.iter().zip(&trace.nodes) {
        if t.input.shape().c != node.in_channels || t.bn.is_some() != node.batch_norm {
            return Err(GraphError::TraceMismatch(format!("node {} layout differs", node.id)));
        }
    }
    grad_output.expect_shape(trace.nodes[topo.output].output.shape())?;

    let mut cotangent: Vec<Option<Tensor<T>>> = vec![None; topo.len()];
    cotangent[topo.output] = Some(grad_output.clone());
    let mut grads = BTreeMap::new();

    for &id in trace.order.iter().rev() {
        let params = &model.nodes[id];
        let saved = &trace.nodes[id];
        let mut g = match cotangent[id].take() {
            Some(g) => g,
            // Every consumer edge was severed.
            None => Tensor::zeros(saved.output.shape()),
        };
        if let (Some(bn), Some(cache)) = (&params.bn, &saved.bn) {
            g = relu_backward(&saved.output, &g)?;
            let bg = batchnorm_backward(cache, bn, &g)?;
            grads.insert(ParamId { node: id, role: ParamRole::BnGamma }, bg.gamma);
            grads.insert(ParamId { node: id, role: ParamRole::BnBeta }, bg.beta);
            g = bg.input;
        }
        let is_input = id == topo.input;
        let cg = conv2d_backward_with(&saved.input, &params.conv, &g, !is_input)?;
        grads.insert(ParamId { node: id, role: ParamRole::ConvWeight }, cg.weights.into_data());
        grads.insert(ParamId { node: id, role: ParamRole::ConvBias }, cg.bias);
        if is_input {
            continue;
        }
        let gin = cg.input.expect("requested input gradient");
        let ins = topo.inputs_of(id);
        let parts: Vec<Tensor<T>> = match (ins.len(), topo.fusion) {
            (1, _) => vec![gin],
            (2, Fusion::Concat) => {
                let split = topo.node(ins[0].src).out_channels;
                let (a, b) = split_channels_backward(&gin, split)?;
                vec![a, b]
            }
            (2, Fusion::Sum) => vec![gin.clone(), gin],
            (k, _) => {
                return Err(GraphError::Topology(TopologyError::InvalidSpec(format!(
                    "node {id} has {k} inputs"
                ))))
            }
        };
        for (edge, part) in ins.iter().zip(parts) {
            if severed.contains(edge) {
                continue;
            }
            match cotangent[edge.src].as_mut() {
                Some(acc) => acc.add_assign(&part)?,
                None => cotangent[edge.src] = Some(part),
            }
        }
    }
    debug_assert_eq!(grads.len(), model.param_ids().len());
    Ok(GradientSet { grads })
}

/// `½‖y‖²` and its gradient `y`.
pub fn half_squared_norm<T: Scalar>(y: &Tensor<T>) -> (f64, Tensor<T>) {
    let loss = 0.5 * y.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
    (loss, y.clone())
}

// ---------------------------------------------------------------------------
// Gradient checking

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates checked per parameter tensor; smaller tensors are checked
    /// exhaustively.
    pub samples_per_param: usize,
    /// Lower bound on the denominator of the relative error, for gradients
    /// that are zero analytically (e.g. conv biases feeding batch norm).
    pub denominator_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-6,
            samples_per_param: 12,
            denominator_floor: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub param: ParamId,
    pub checked: usize,
    /// Coordinates whose perturbation flipped a ReLU; not differentiable there.
    pub kinks_skipped: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_error: f64,
    pub worst_param: ParamId,
    pub worst_index: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Compare reverse-mode gradients of `½‖f(x)‖²` (train-mode forward)
/// against central differences.
pub fn grad_check(
    model: &NetworkModel<f64>,
    input: &Tensor<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    grad_check_with(model, input, opts, backward_pass)
}

/// [`grad_check`] with a caller-supplied backward implementation.
pub fn grad_check_with<B>(
    model: &NetworkModel<f64>,
    input: &Tensor<f64>,
    opts: &GradCheckOptions,
    backward: B,
) -> Result<GradCheckReport>
where
    B: Fn(&NetworkModel<f64>, &ComputeTrace<f64>, &Tensor<f64>) -> Result<GradientSet<f64>>,
{
    let (y, trace) = forward_pass(model, input, Mode::Train)?;
    let (_, gy) = half_squared_norm(&y);
    let analytic = backward(model, &trace, &gy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = model.clone();
    let mut groups = Vec::new();

    for id in model.param_ids() {
        let len = model.param(id).len();
        // Oversample so coordinates at ReLU kinks can be replaced.
        let candidates: Vec<usize> = if len <= opts.samples_per_param {
            (0..len).collect()
        } else {
            sample(&mut rng, len, (3 * opts.samples_per_param).min(len)).into_vec()
        };
        let mut report = GroupReport {
            param: id,
            checked: 0,
            kinks_skipped: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in candidates {
            if report.checked == opts.samples_per_param {
                break;
            }
            let orig = probe.param(id)[idx];
            probe.param_mut(id)[idx] = orig + opts.step;
            let (yp, tp) = forward_pass(&probe, input, Mode::Train)?;
            probe.param_mut(id)[idx] = orig - opts.step;
            let (ym, tm) = forward_pass(&probe, input, Mode::Train)?;
            probe.param_mut(id)[idx] = orig;
            if relu_pattern_changed(&tp, &tm) {
                report.kinks_skipped += 1;
                continue;
            }
            // ½‖y₊‖² − ½‖y₋‖² = ½ Σ (y₊ − y₋)(y₊ + y₋)
            let diff: f64 = yp
                .data()
                .iter()
                .zip(ym.data())
                .map(|(a, b)| (a - b) * (a + b))
                .sum::<f64>()
                * 0.5;
            let numeric = diff / (2.0 * opts.step);
            let a = analytic.get(id)[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.denominator_floor);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        groups.push(report);
    }
    let worst = groups
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("model has parameters");
    Ok(GradCheckReport {
        max_rel_error: worst.max_rel_error,
        worst_param: worst.param,
        worst_index: worst.worst_index,
        tolerance: opts.tolerance,
        groups,
    })
}

fn relu_pattern_changed<T: Scalar>(a: &ComputeTrace<T>, b: &ComputeTrace<T>) -> bool {
    a.nodes.iter().zip(&b.nodes).any(|(x, y)| {
        x.bn.is_some()
            && x
                .output
                .data()
                .iter()
                .zip(y.output.data())
                .any(|(p, q)| (*p > T::zero()) != (*q > T::zero()))
    })
}

/// Input shape helper for tests and tools: a random batch in `[-1, 1)`.
pub fn random_input(shape: Shape, seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{LatticeSpec, PlainSpec};
    use crate::model::initialize_model;
    use crate::tensor::ConvParams;

    fn lattice(n: usize, m: usize) -> ArchSpec {
        ArchSpec::Lattice(LatticeSpec::new(n, m, 1))
    }

    #[test]
    fn zero_network_outputs_output_bias() {
        let mut model: NetworkModel<f64> = NetworkModel::zeroed(&lattice(1, 1)).unwrap();
        let out = model.topology().output;
        model.nodes[out].conv.bias = vec![0.25];
        let x = random_input(Shape::new(2, 1, 5, 6), 1);
        let (y, _) = forward_pass(&model, &x, Mode::Train).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 1, 5, 6));
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let model: NetworkModel<f32> = initialize_model(&lattice(3, 3), 0).unwrap();
        let y = infer(&model, &Tensor::zeros(Shape::new(1, 1, 7, 7))).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_preserved() {
        let model: NetworkModel<f32> = initialize_model(&ArchSpec::Lattice(LatticeSpec::new(2, 3, 3)), 4).unwrap();
        let x = random_input(Shape::new(2, 3, 9, 5), 2).cast::<f32>();
        for mode in [Mode::Train, Mode::Infer] {
            let (y, _) = forward_pass(&model, &x, mode).unwrap();
            assert_eq!(y.shape(), Shape::new(2, 3, 9, 5));
        }
        let bad = Tensor::<f32>::zeros(Shape::new(1, 1, 4, 4));
        assert_eq!(
            forward_pass(&model, &bad, Mode::Infer).map(|_| ()),
            Err(GraphError::InputChannels { expected: 3, actual: 1 })
        );
    }

    fn delta(out: usize, inp: usize, map: impl Fn(usize) -> usize) -> ConvParams<f64> {
        let mut p = ConvParams::zeros(out, inp, 3);
        for o in 0..out {
            p.weights.set(o, map(o), 1, 1, 1.0);
        }
        p
    }

    /// With delta kernels every hidden node passes the image through (it is
    /// non-negative, so ReLU is the identity and infer-mode BN is
    /// identity up to √(1+ε)).
    #[test]
    fn delta_kernels_through_2x2() {
        let mut model: NetworkModel<f64> = initialize_model(&lattice(2, 2), 0).unwrap();
        let topo = model.topology().clone();
        for node in &topo.nodes {
            let p = &mut model.nodes[node.id];
            p.conv = if node.id == topo.input {
                delta(32, 1, |_| 0)
            } else if node.id == topo.output {
                // Sum of channel 0 of both concatenated feeders.
                let mut c = ConvParams::zeros(1, 64, 3);
                c.weights.set(0, 0, 1, 1, 1.0);
                c.weights.set(0, 32, 1, 1, 1.0);
                c
            } else if node.in_channels == 64 {
                delta(32, 64, |o| o)
            } else {
                delta(32, 32, |o| o)
            };
            if let Some(bn) = p.bn.as_mut() {
                bn.epsilon = 0.0;
            }
        }
        let x = random_input(Shape::new(1, 1, 6, 6), 3).map(f64::abs);
        let y = infer(&model, &x).unwrap();
        // Manual composition: the output reads (2,1) and (2,2), each the image.
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn lattice_order_is_forced_by_the_serpentine_path() {
        let model: NetworkModel<f64> = initialize_model(&lattice(3, 3), 9).unwrap();
        let topo = model.topology();
        let order = topo.topological_order().unwrap();
        // Consecutive nodes are joined by an edge, so no other order exists.
        for w in order.windows(2) {
            assert!(topo.edges.iter().any(|e| e.src == w[0] && e.dst == w[1]));
        }
    }

    /// input → {a, b} → output: `a` and `b` may run in either order.
    fn diamond() -> NetworkModel<f64> {
        use crate::lattice::{EdgeRole, NetworkTopology, Node, NodeKind};
        use crate::model::NodeParams;
        use crate::tensor::BatchNormParams;
        let node = |id, kind, inp, out, bn| Node {
            id,
            kind,
            pos: None,
            in_channels: inp,
            out_channels: out,
            kernel_size: 3,
            batch_norm: bn,
        };
        let topo = NetworkTopology::from_parts(
            vec![
                node(0, NodeKind::InputConv, 1, 4, true),
                node(1, NodeKind::FusionConv, 4, 4, true),
                node(2, NodeKind::FusionConv, 4, 4, true),
                node(3, NodeKind::OutputConv, 8, 1, false),
            ],
            vec![
                Edge { src: 0, dst: 1, role: EdgeRole::Chain },
                Edge { src: 0, dst: 2, role: EdgeRole::Chain },
                Edge { src: 1, dst: 3, role: EdgeRole::ToOutput },
                Edge { src: 2, dst: 3, role: EdgeRole::ToOutput },
            ],
            0,
            3,
            Fusion::Concat,
        );
        let mut base = initialize_model::<f64>(&lattice(1, 1), 0).unwrap().with_topology(topo.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        base.nodes = topo
            .nodes
            .iter()
            .map(|n| {
                use rand::Rng;
                let shape = Shape::new(n.out_channels, n.in_channels, 3, 3);
                NodeParams {
                    conv: ConvParams {
                        weights: Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-0.5..0.5)),
                        bias: vec![0.1; n.out_channels],
                    },
                    bn: n.batch_norm.then(|| BatchNormParams::new(n.out_channels)),
                }
            })
            .collect();
        base
    }

    #[test]
    fn topological_order_does_not_change_output() {
        let model = diamond();
        let x = random_input(Shape::new(2, 1, 6, 6), 4);
        let (a, _) = forward_with_order(&model, &x, Mode::Train, &[0, 1, 2, 3]).unwrap();
        let (b, _) = forward_with_order(&model, &x, Mode::Train, &[0, 2, 1, 3]).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            forward_with_order(&model, &x, Mode::Train, &[1, 0, 2, 3]).map(|_| ()),
            Err(GraphError::InvalidOrder)
        );
        let report = grad_check(&model, &x, &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn cyclic_and_dangling_topologies_fail() {
        let model: NetworkModel<f64> = initialize_model(&lattice(2, 2), 0).unwrap();
        let x = random_input(Shape::new(1, 1, 4, 4), 0);
        let mut cyclic = model.topology().clone();
        cyclic.edges.push(Edge { src: 3, dst: 1, role: crate::lattice::EdgeRole::Vertical });
        let m = model.clone().with_topology(cyclic);
        assert_eq!(
            forward_pass(&m, &x, Mode::Train).map(|_| ()),
            Err(GraphError::Topology(TopologyError::Cyclic))
        );
        let mut dangling = model.topology().clone();
        dangling.edges.retain(|e| e.dst != 3);
        let m = model.clone().with_topology(dangling);
        assert!(matches!(
            forward_pass(&m, &x, Mode::Train),
            Err(GraphError::Topology(TopologyError::DanglingNode(_)))
        ));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let model: NetworkModel<f64> = initialize_model(&lattice(2, 2), 1).unwrap();
        let x = random_input(Shape::new(2, 1, 4, 4), 5);
        let (y, trace) = forward_pass(&model, &x, Mode::Train).unwrap();
        let g = backward_pass(&model, &trace, &Tensor::zeros(y.shape())).unwrap();
        assert_eq!(g.grads.len(), model.param_ids().len());
        assert_eq!(g.max_abs(), 0.0);
        for id in model.param_ids() {
            assert_eq!(g.get(id).len(), model.param(id).len());
        }
    }

    #[test]
    fn backward_rejects_foreign_or_infer_traces() {
        let model: NetworkModel<f64> = initialize_model(&lattice(2, 2), 1).unwrap();
        let other: NetworkModel<f64> = initialize_model(&lattice(2, 3), 1).unwrap();
        let x = random_input(Shape::new(2, 1, 4, 4), 5);
        let (y, trace) = forward_pass(&other, &x, Mode::Train).unwrap();
        assert!(matches!(backward_pass(&model, &trace, &y), Err(GraphError::TraceMismatch(_))));
        let (y, trace) = forward_pass(&model, &x, Mode::Infer).unwrap();
        assert_eq!(backward_pass(&model, &trace, &y), Err(GraphError::InferTrace));
    }

    #[test]
    fn fan_out_gradients_are_additive() {
        let model: NetworkModel<f64> = initialize_model(&lattice(2, 3), 2).unwrap();
        let topo = model.topology().clone();
        let x = random_input(Shape::new(2, 1, 5, 5), 6);
        let (y, trace) = forward_pass(&model, &x, Mode::Train).unwrap();
        let full = backward_pass(&model, &trace, &y).unwrap();
        // (1,2) feeds (1,3) horizontally and (2,2) vertically.
        let node = topo.node_at(1, 2).unwrap();
        let outs: Vec<Edge> = topo.edges.iter().filter(|e| e.src == node).copied().collect();
        assert_eq!(outs.len(), 2);
        let only_first = backward_severed(&model, &trace, &y, &[outs[1]]).unwrap();
        let only_second = backward_severed(&model, &trace, &y, &[outs[0]]).unwrap();
        for id in model.param_ids().into_iter().filter(|p| p.node == node) {
            for ((f, a), b) in full.get(id).iter().zip(only_first.get(id)).zip(only_second.get(id)) {
                assert!((f - (a + b)).abs() <= 1e-10 * f.abs().max(1.0), "{id}: {f} vs {}", a + b);
            }
        }
    }

    #[test]
    fn grad_check_passes_on_fresh_2x3() {
        let model: NetworkModel<f64> = initialize_model(&lattice(2, 3), 7).unwrap();
        let x = random_input(Shape::new(1, 1, 8, 8), 7);
        let report = grad_check(&model, &x, &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn grad_check_passes_on_plain_chain() {
        let model: NetworkModel<f64> = initialize_model(&ArchSpec::Plain(PlainSpec::new(3, 0, 1)), 8).unwrap();
        let x = random_input(Shape::new(2, 1, 6, 6), 8);
        let report = grad_check(&model, &x, &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn grad_check_catches_corrupted_backward() {
        let model: NetworkModel<f64> = initialize_model(&lattice(2, 2), 3).unwrap();
        let x = random_input(Shape::new(1, 1, 6, 6), 3);
        let out = model.topology().output;
        let target = ParamId { node: out, role: ParamRole::ConvBias };
        let report = grad_check_with(&model, &x, &GradCheckOptions::default(), |m, t, g| {
            let mut grads = backward_pass(m, t, g)?;
            grads.grads.get_mut(&target).unwrap()[0] += 0.5;
            Ok(grads)
        })
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst_param, target);
        assert_eq!(report.worst_index, 0);
    }
}

//! Circuit-to-tensor-network translation and network simplification.
//!
//! Every gate, input ket and output projector becomes a node; wires between
//! them become shared indices. Diagonal gates are rewritten in place as
//! low-rank factors whose index is shared by three or more nodes (a
//! hyperedge), which is what lets CZ-heavy circuits contract far below the
//! naive cost. Node payloads stay symbolic until a tensor is actually
//! needed; slice pins are applied during that materialization, never after.

use crate::circuit::{gate_unitary, Circuit, GateKind};
use crate::engine::contract_labeled;
use crate::tensor::{DenseTensor, IndexId};
use num_complex::Complex64;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

pub type NodeId = u32;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("qubit {0} is neither fixed nor open")]
    Unassigned(usize),
    #[error("qubit {0} is both fixed and open")]
    DoublyAssigned(usize),
    #[error("qubit {0} out of range")]
    QubitRange(usize),
    #[error("fixed bit for qubit {0} must be 0 or 1, got {1}")]
    BadBit(usize, u8),
}

/// One step of a single qubit's gate sequence, used by lattice-style nodes
/// that fold a whole worldline into one tensor at materialization time.
#[derive(Debug, Clone, Serialize)]
pub enum WorldlineOp {
    /// Initial rank-1 state on the running axis: (re, im) pairs.
    Start([(f64, f64); 2]),
    /// 2x2 unitary applied to the running axis, row-major.
    Unitary([(f64, f64); 4]),
    /// Expose a copy of the running axis value as a new tap axis feeding
    /// the given bond.
    TapCopy(IndexId),
    /// New tap axis k feeding the given bond with weight z^(k * cur):
    /// identity unless both bits are 1.
    TapPhase(IndexId, (f64, f64)),
    /// Project the running axis on a rank-1 vector, consuming it.
    Finish([(f64, f64); 2]),
    /// Keep the running axis as the given open index.
    FinishOpen(IndexId),
}

#[derive(Debug, Clone)]
pub enum Payload {
    /// Gate tensor. Axis order: all output axes (first listed qubit = high
    /// bit), then input axes in the same qubit order.
    Gate(GateKind),
    /// |0> ket: [1, 0].
    Input,
    /// <bit| projector: one-hot.
    Output(u8),
    /// Materialized values; indices match the node's index list.
    Dense(DenseTensor),
    /// Single-site gate chain contracted on demand; taps firing on the same
    /// bond merge (time-ordered, first firing slowest) into one grouped axis.
    Worldline(Vec<WorldlineOp>),
}

impl Payload {
    pub fn kind_tag(&self) -> &'static str {
        match self {
            Payload::Gate(_) => "gate",
            Payload::Input => "input",
            Payload::Output(_) => "output",
            Payload::Dense(_) => "dense",
            Payload::Worldline(_) => "worldline",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    /// Axis order of the materialized tensor.
    pub indices: Vec<IndexId>,
    pub payload: Payload,
}

#[derive(Debug, Clone)]
pub struct TensorNetwork {
    pub nodes: BTreeMap<NodeId, Node>,
    pub dims: BTreeMap<IndexId, usize>,
    /// Surviving axes of the fully contracted network, in caller order.
    pub open: Vec<IndexId>,
    next_node: NodeId,
    next_index: IndexId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NetworkStats {
    pub num_nodes: usize,
    pub num_indices: usize,
    pub max_rank: usize,
    /// Sum of log2(dim) over all indices.
    pub log2_total_dim: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimplifyReport {
    pub diag_rewrites: usize,
    pub absorbed: usize,
    pub fused: usize,
}

impl SimplifyReport {
    pub fn total(&self) -> usize {
        self.diag_rewrites + self.absorbed + self.fused
    }
}

impl TensorNetwork {
    pub fn new() -> Self {
        TensorNetwork {
            nodes: BTreeMap::new(),
            dims: BTreeMap::new(),
            open: Vec::new(),
            next_node: 0,
            next_index: 0,
        }
    }

    pub fn new_index(&mut self, dim: usize) -> IndexId {
        let id = self.next_index;
        self.next_index += 1;
        self.dims.insert(id, dim);
        id
    }

    pub fn add_node(&mut self, indices: Vec<IndexId>, payload: Payload) -> NodeId {
        let id = self.next_node;
        self.next_node += 1;
        self.nodes.insert(id, Node { id, indices, payload });
        id
    }

    pub fn dim(&self, id: IndexId) -> usize {
        self.dims[&id]
    }

    /// Which nodes each index touches, ascending node ids.
    pub fn incidence(&self) -> BTreeMap<IndexId, Vec<NodeId>> {
        let mut inc: BTreeMap<IndexId, Vec<NodeId>> = BTreeMap::new();
        for node in self.nodes.values() {
            for &i in &node.indices {
                inc.entry(i).or_default().push(node.id);
            }
        }
        inc
    }

    pub fn stats(&self) -> NetworkStats {
        NetworkStats {
            num_nodes: self.nodes.len(),
            num_indices: self.dims.len(),
            max_rank: self.nodes.values().map(|n| n.indices.len()).max().unwrap_or(0),
            log2_total_dim: self.dims.values().map(|&d| (d as f64).log2()).sum(),
        }
    }

    /// Replace every occurrence of index `from` with `to` (nodes, open list,
    /// dims table). Dims must agree.
    fn merge_index(&mut self, from: IndexId, to: IndexId) {
        assert_eq!(self.dims[&from], self.dims[&to]);
        for node in self.nodes.values_mut() {
            for i in node.indices.iter_mut() {
                if *i == from {
                    *i = to;
                }
            }
            if let Payload::Dense(t) = &mut node.payload {
                for i in t.indices.iter_mut() {
                    if *i == from {
                        *i = to;
                    }
                }
            }
        }
        for i in self.open.iter_mut() {
            if *i == from {
                *i = to;
            }
        }
        self.dims.remove(&from);
    }

    /// Drop index table entries nothing references anymore.
    fn prune_dims(&mut self) {
        let mut live: BTreeSet<IndexId> = self.open.iter().copied().collect();
        for node in self.nodes.values() {
            live.extend(node.indices.iter().copied());
        }
        self.dims.retain(|id, _| live.contains(id));
    }

    /// Build the node's tensor. Pinned indices are fixed to the given value
    /// during construction and do not appear as axes of the result.
    pub fn materialize(&self, node: &Node, pins: &BTreeMap<IndexId, usize>) -> DenseTensor {
        let mut t = match &node.payload {
            Payload::Gate(kind) => {
                let u = gate_unitary(kind);
                let rank = node.indices.len();
                let dims = vec![2usize; rank];
                // row-major over [outs..., ins...] equals row-major over
                // (matrix row, matrix col)
                DenseTensor::from_data(node.indices.clone(), dims, u.entries.clone())
            }
            Payload::Input => DenseTensor::from_data(
                node.indices.clone(),
                vec![2],
                vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)],
            ),
            Payload::Output(bit) => {
                let mut v = vec![Complex64::new(0.0, 0.0); 2];
                v[*bit as usize] = Complex64::new(1.0, 0.0);
                DenseTensor::from_data(node.indices.clone(), vec![2], v)
            }
            Payload::Dense(t) => t.clone(),
            Payload::Worldline(ops) => materialize_worldline(self, node, ops),
        };
        debug_assert_eq!(t.indices, node.indices);
        for (&id, &val) in pins {
            if let Some(axis) = t.indices.iter().position(|&x| x == id) {
                t = t.pin_axis(axis, val);
            }
        }
        t
    }

    /// Reference evaluator: folds all nodes in ascending id order with the
    /// direct kernel. Exponential on big networks; meant for tests and tiny
    /// cases. Output axes follow `self.open`.
    pub fn contract_all_naive(&self, pins: &BTreeMap<IndexId, usize>) -> DenseTensor {
        // appearance counts over not-yet-folded nodes
        let mut remaining: BTreeMap<IndexId, usize> = BTreeMap::new();
        for node in self.nodes.values() {
            for &i in &node.indices {
                *remaining.entry(i).or_insert(0) += 1;
            }
        }
        let open: BTreeSet<IndexId> = self.open.iter().copied().collect();
        let mut acc: Option<DenseTensor> = None;
        for node in self.nodes.values() {
            let t = self.materialize(node, pins);
            for &i in &node.indices {
                *remaining.get_mut(&i).unwrap() -= 1;
            }
            acc = Some(match acc {
                None => t,
                Some(prev) => {
                    let ext = |id: IndexId| open.contains(&id) || remaining[&id] > 0;
                    contract_labeled(&prev, &t, ext, false).unwrap().0
                }
            });
        }
        let mut result = acc.unwrap_or_else(|| DenseTensor::scalar(Complex64::new(1.0, 0.0)));
        // order the survivors as the network promises
        let want: Vec<IndexId> = self.open.iter().copied().filter(|i| !pins.contains_key(i)).collect();
        if result.indices != want {
            let perm: Vec<usize> = want
                .iter()
                .map(|id| result.indices.iter().position(|x| x == id).unwrap())
                .collect();
            result = crate::tensor::permute(&result, &perm).unwrap();
        }
        result
    }

    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct NodeOut<'a> {
            id: NodeId,
            kind: &'static str,
            indices: &'a [IndexId],
        }
        let nodes: Vec<NodeOut> = self
            .nodes
            .values()
            .map(|n| NodeOut {
                id: n.id,
                kind: n.payload.kind_tag(),
                indices: &n.indices,
            })
            .collect();
        serde_json::json!({
            "nodes": nodes,
            "dims": self.dims,
            "open": self.open,
            "stats": self.stats(),
        })
    }
}

impl Default for TensorNetwork {
    fn default() -> Self {
        Self::new()
    }
}

fn materialize_worldline(net: &TensorNetwork, node: &Node, ops: &[WorldlineOp]) -> DenseTensor {
    let cx = |p: (f64, f64)| Complex64::new(p.0, p.1);
    // running axis is always last; taps collect in front of it in op order
    let mut t = DenseTensor::scalar(Complex64::new(1.0, 0.0));
    // bond id per tap axis, in current axis order (running axis excluded)
    let mut tap_bonds: Vec<IndexId> = Vec::new();
    let mut open_axis: Option<IndexId> = None;
    let mut started = false;
    let mut finished = false;
    for op in ops {
        match op {
            WorldlineOp::Start(v) => {
                assert!(!started);
                started = true;
                let vals = vec![cx(v[0]), cx(v[1])];
                let start = DenseTensor::from_data(vec![u32::MAX], vec![2], vals);
                // outer product: running axis appended last
                let mut data = Vec::with_capacity(t.elems() * 2);
                for x in &t.data {
                    for s in &start.data {
                        data.push(x * s);
                    }
                }
                let mut dims = t.dims.clone();
                dims.push(2);
                let mut idx = t.indices.clone();
                idx.push(u32::MAX);
                t = DenseTensor::from_data(idx, dims, data);
            }
            WorldlineOp::Unitary(u) => {
                let m: Vec<Complex64> = u.iter().map(|&p| cx(p)).collect();
                let n = t.elems() / 2;
                let mut data = vec![Complex64::new(0.0, 0.0); t.elems()];
                for row in 0..n {
                    let (a, b) = (t.data[row * 2], t.data[row * 2 + 1]);
                    data[row * 2] = m[0] * a + m[1] * b;
                    data[row * 2 + 1] = m[2] * a + m[3] * b;
                }
                t = DenseTensor::from_data(t.indices.clone(), t.dims.clone(), data);
            }
            WorldlineOp::TapCopy(bond) | WorldlineOp::TapPhase(bond, _) => {
                let phase = match op {
                    WorldlineOp::TapPhase(_, z) => Some(cx(*z)),
                    _ => None,
                };
                // [.., cur] -> [.., k, cur]
                let n = t.elems() / 2;
                let mut data = vec![Complex64::new(0.0, 0.0); t.elems() * 2];
                for row in 0..n {
                    for c in 0..2 {
                        let v = t.data[row * 2 + c];
                        match phase {
                            None => data[row * 4 + c * 2 + c] = v,
                            Some(z) => {
                                for k in 0..2 {
                                    let w = if k == 1 && c == 1 { z } else { Complex64::new(1.0, 0.0) };
                                    data[row * 4 + k * 2 + c] = v * w;
                                }
                            }
                        }
                    }
                }
                let mut dims = t.dims.clone();
                dims.insert(dims.len() - 1, 2);
                let mut idx = t.indices.clone();
                idx.insert(idx.len() - 1, *bond);
                tap_bonds.push(*bond);
                t = DenseTensor::from_data(idx, dims, data);
            }
            WorldlineOp::Finish(v) => {
                assert!(!finished);
                finished = true;
                let n = t.elems() / 2;
                let mut data = vec![Complex64::new(0.0, 0.0); n];
                for (row, d) in data.iter_mut().enumerate() {
                    *d = cx(v[0]) * t.data[row * 2] + cx(v[1]) * t.data[row * 2 + 1];
                }
                let dims = t.dims[..t.dims.len() - 1].to_vec();
                let idx = t.indices[..t.indices.len() - 1].to_vec();
                t = DenseTensor::from_data(idx, dims, data);
            }
            WorldlineOp::FinishOpen(open_id) => {
                assert!(!finished);
                finished = true;
                open_axis = Some(*open_id);
                let last = t.indices.len() - 1;
                t.indices[last] = *open_id;
            }
        }
    }
    assert!(started && finished, "worldline must start and finish");
    // group tap axes by bond in node.indices order, keeping time order
    // inside each group, then merge each group into one axis
    let mut perm: Vec<usize> = Vec::with_capacity(t.rank());
    let mut grouped_dims: Vec<usize> = Vec::new();
    let mut grouped_idx: Vec<IndexId> = Vec::new();
    for &want in &node.indices {
        if open_axis == Some(want) {
            // the open running axis
            perm.push(t.rank() - 1);
            grouped_dims.push(2);
            grouped_idx.push(want);
            continue;
        }
        let mut dim = 1usize;
        for (pos, &b) in tap_bonds.iter().enumerate() {
            if b == want {
                perm.push(pos);
                dim *= 2;
            }
        }
        assert!(dim > 1, "node lists bond {want} but no tap fires on it");
        assert_eq!(dim, net.dims[&want], "bond {want} dim mismatch");
        grouped_dims.push(dim);
        grouped_idx.push(want);
    }
    assert_eq!(perm.len(), t.rank(), "worldline axes not fully claimed");
    let permuted = crate::tensor::permute(&t, &perm).unwrap();
    DenseTensor::from_data(grouped_idx, grouped_dims, permuted.data)
}

/// Translate a circuit into a tensor network computing
/// `<fixed bits| C |0...0>` with one surviving axis per open qubit, ordered
/// as `open_qubits`. Every qubit must be exactly one of fixed or open.
pub fn build_network(
    c: &Circuit,
    fixed_bits: &BTreeMap<usize, u8>,
    open_qubits: &[usize],
) -> Result<TensorNetwork, NetError> {
    let nq = c.num_qubits();
    for (&q, &b) in fixed_bits {
        if q >= nq {
            return Err(NetError::QubitRange(q));
        }
        if b > 1 {
            return Err(NetError::BadBit(q, b));
        }
    }
    let open_set: BTreeSet<usize> = open_qubits.iter().copied().collect();
    for &q in open_qubits {
        if q >= nq {
            return Err(NetError::QubitRange(q));
        }
        if fixed_bits.contains_key(&q) {
            return Err(NetError::DoublyAssigned(q));
        }
    }
    for q in 0..nq {
        if !fixed_bits.contains_key(&q) && !open_set.contains(&q) {
            return Err(NetError::Unassigned(q));
        }
    }

    let mut net = TensorNetwork::new();
    let mut cur: Vec<IndexId> = (0..nq).map(|_| net.new_index(2)).collect();
    for q in 0..nq {
        net.add_node(vec![cur[q]], Payload::Input);
    }
    for layer in &c.cycles {
        for g in layer {
            match g.qubits.len() {
                1 => {
                    let q = g.qubits[0];
                    let out = net.new_index(2);
                    net.add_node(vec![out, cur[q]], Payload::Gate(g.kind));
                    cur[q] = out;
                }
                2 => {
                    let (qh, ql) = (g.qubits[0], g.qubits[1]);
                    let (oh, ol) = (net.new_index(2), net.new_index(2));
                    net.add_node(vec![oh, ol, cur[qh], cur[ql]], Payload::Gate(g.kind));
                    cur[qh] = oh;
                    cur[ql] = ol;
                }
                _ => unreachable!(),
            }
        }
    }
    for q in 0..nq {
        if let Some(&b) = fixed_bits.get(&q) {
            net.add_node(vec![cur[q]], Payload::Output(b));
        }
    }
    net.open = open_qubits.iter().map(|&q| cur[q]).collect();
    Ok(net)
}

const DIAG_REL_TOL: f64 = 1e-10;

pub(crate) fn diagonal_factor(t: &DenseTensor) -> Option<Vec<Complex64>> {
    // t is [outs..., ins...] square operator-shaped; rank 2 or 4
    let half = t.rank() / 2;
    let d: usize = t.dims[..half].iter().product();
    let peak = t.max_abs();
    let mut diag = Vec::with_capacity(d);
    for r in 0..d {
        for col in 0..d {
            let v = t.data[r * d + col];
            if r == col {
                diag.push(v);
            } else if v.norm() > DIAG_REL_TOL * peak {
                return None;
            }
        }
    }
    Some(diag)
}

/// In-place rewrite loop: diagonal-gate re-expression, absorption of rank<=2
/// nodes through exclusively shared indices, and fusion of node pairs joined
/// by two or more exclusive parallel indices. Runs to a fixpoint; a second
/// call is a no-op. The network value is unchanged.
pub fn simplify(net: &mut TensorNetwork) -> SimplifyReport {
    let mut report = SimplifyReport::default();
    loop {
        if rewrite_one_diagonal(net) {
            report.diag_rewrites += 1;
            continue;
        }
        if absorb_one(net) {
            report.absorbed += 1;
            continue;
        }
        if fuse_one_parallel(net) {
            report.fused += 1;
            continue;
        }
        break;
    }
    net.prune_dims();
    report
}

fn rewrite_one_diagonal(net: &mut TensorNetwork) -> bool {
    let candidate = net.nodes.values().find_map(|node| {
        if !matches!(node.payload, Payload::Gate(_)) {
            return None;
        }
        let t = net.materialize(node, &BTreeMap::new());
        diagonal_factor(&t).map(|d| (node.id, d))
    });
    let Some((id, diag)) = candidate else { return false };
    let node = net.nodes.get(&id).unwrap();
    let half = node.indices.len() / 2;
    let outs: Vec<IndexId> = node.indices[..half].to_vec();
    let ins: Vec<IndexId> = node.indices[half..].to_vec();
    let dims = vec![2usize; half];
    let factor = DenseTensor::from_data(ins.clone(), dims, diag);
    net.nodes.get_mut(&id).unwrap().payload = Payload::Dense(factor);
    net.nodes.get_mut(&id).unwrap().indices = ins.clone();
    for (o, i) in outs.into_iter().zip(ins) {
        net.merge_index(o, i);
    }
    true
}

/// Shared indices safe to sum when contracting exactly `a` and `b`.
fn exclusive_shared(net: &TensorNetwork, a: NodeId, b: NodeId) -> Vec<IndexId> {
    let inc = net.incidence();
    let open: BTreeSet<IndexId> = net.open.iter().copied().collect();
    let ia = &net.nodes[&a].indices;
    let ib = &net.nodes[&b].indices;
    let mut out: Vec<IndexId> = ia
        .iter()
        .copied()
        .filter(|id| {
            ib.contains(id)
                && !open.contains(id)
                && inc[id].iter().all(|&n| n == a || n == b)
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Contract node `small` into node `host`, replacing `host` with a dense
/// result and dropping `small`.
fn contract_into(net: &mut TensorNetwork, small: NodeId, host: NodeId) {
    let summed: BTreeSet<IndexId> = exclusive_shared(net, small, host).into_iter().collect();
    let ts = net.materialize(&net.nodes[&small], &BTreeMap::new());
    let th = net.materialize(&net.nodes[&host], &BTreeMap::new());
    let (result, _) = contract_labeled(&ts, &th, |id| !summed.contains(&id), false).unwrap();
    let host_node = net.nodes.get_mut(&host).unwrap();
    host_node.indices = result.indices.clone();
    host_node.payload = Payload::Dense(result);
    net.nodes.remove(&small);
    net.prune_dims();
}

fn absorb_one(net: &mut TensorNetwork) -> bool {
    // scalars first: multiply into the lowest-id other node
    let scalar = net.nodes.values().find(|n| n.indices.is_empty()).map(|n| n.id);
    if let Some(sid) = scalar {
        if let Some(&hid) = net.nodes.keys().find(|&&k| k != sid) {
            contract_into(net, sid, hid);
            return true;
        }
        return false;
    }
    let inc = net.incidence();
    let open: BTreeSet<IndexId> = net.open.iter().copied().collect();
    let mut cand: Option<(NodeId, NodeId)> = None;
    'scan: for node in net.nodes.values() {
        if node.indices.len() > 2 {
            continue;
        }
        for &i in &node.indices {
            if open.contains(&i) || inc[&i].len() != 2 {
                continue;
            }
            let other = *inc[&i].iter().find(|&&n| n != node.id).unwrap();
            cand = Some((node.id, other));
            break 'scan;
        }
    }
    if let Some((small, host)) = cand {
        contract_into(net, small, host);
        return true;
    }
    false
}

fn fuse_one_parallel(net: &mut TensorNetwork) -> bool {
    let inc = net.incidence();
    let open: BTreeSet<IndexId> = net.open.iter().copied().collect();
    let mut pair_count: BTreeMap<(NodeId, NodeId), usize> = BTreeMap::new();
    for (id, nodes) in &inc {
        if open.contains(id) || nodes.len() != 2 {
            continue;
        }
        *pair_count.entry((nodes[0], nodes[1])).or_insert(0) += 1;
    }
    for ((a, b), count) in pair_count {
        if count >= 2 {
            contract_into(net, a, b);
            return true;
        }
    }
    false
}

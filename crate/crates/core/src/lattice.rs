//! Fixed contraction schedule for square-grid circuits with diagonal
//! two-qubit gates.
//!
//! When every two-qubit gate is diagonal, a qubit's whole gate sequence
//! folds into one site tensor (a [`Payload::Worldline`] node): each firing
//! of a grid bond splits into a copy tap on the first listed qubit and a
//! phase tap on the second, and all taps on one bond merge into a single
//! grouped index of dimension 2^firings. The network is then a plain
//! nearest-neighbour grid, one node per site, one index per bond.
//!
//! On that grid a fixed geometric order contracts a 2N x 2N instance while
//! keeping every intermediate tensor at rank N+b or below (b = 2 - N mod 2),
//! provided the 3(N-b)/2 bottom seam bonds are sliced. No search is
//! involved; the order, the slice set and the cost bound come from the
//! block layout alone.

use std::collections::{BTreeMap, BTreeSet};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{gate_unitary, Circuit, Gate};
use crate::pathopt::{cost_report, ContractionTree, SlicingPlan};
use crate::tensor::IndexId;
use crate::tensornet::{NetError, Payload, TensorNetwork, WorldlineOp};

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("lattice schedule needs a square grid, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("grid side must be even and at least 4, got {0}")]
    BadSide(usize),
    #[error("lattice schedule needs the full grid; qubit {0} is disabled")]
    DisabledQubit(usize),
    #[error("cycle {cycle}: {tag} on ({q0},{q1}) is not diagonal, cannot split across a bond")]
    NonDiagonal {
        cycle: usize,
        tag: &'static str,
        q0: usize,
        q1: usize,
    },
    #[error("cycle {cycle}: zero diagonal entry on ({q0},{q1}), bond split undefined")]
    ZeroEntry { cycle: usize, q0: usize, q1: usize },
    #[error("cycle {cycle}: qubits {q0},{q1} are not grid neighbours")]
    NotNeighbours { cycle: usize, q0: usize, q1: usize },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Derived schedule constants for a 2n x 2n grid at depth d.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeParams {
    /// Half the grid side.
    pub n: usize,
    /// Bottom band thickness above the sliced rows: 1 for odd n, 2 for even.
    pub b: usize,
    /// Number of seam bonds to slice.
    pub s: usize,
    /// Bond dimension when every firing is present: 2^ceil(d/8).
    pub l: usize,
    /// Circuit depth the instance was derived for.
    pub d: usize,
    /// Largest bond count of any tensor in the schedule.
    pub rank_cap: usize,
}

impl LatticeParams {
    /// Width of the top-left corner block.
    pub fn k(&self) -> usize {
        (self.n + self.b) / 2
    }

    /// Width of the overhang past the seam: k - b.
    pub fn w(&self) -> usize {
        self.k() - self.b
    }

    pub fn side(&self) -> usize {
        2 * self.n
    }
}

/// Schedule constants for half-side `n >= 2` and depth `d`.
pub fn lattice_slicing_params(n: usize, d: usize) -> LatticeParams {
    assert!(n >= 2, "grid side must be at least 4");
    let b = if n % 2 == 1 { 1 } else { 2 };
    LatticeParams {
        n,
        b,
        s: 3 * (n - b) / 2,
        l: 1usize << d.div_ceil(8),
        d,
        rank_cap: n + b,
    }
}

/// A grid circuit compiled to site tensors plus the fixed schedule:
/// the network, the contraction order over it, and the seam slicing plan.
#[derive(Debug, Clone)]
pub struct LatticeInstance {
    pub net: TensorNetwork,
    pub tree: ContractionTree,
    pub plan: SlicingPlan,
    pub params: LatticeParams,
    /// Grid edge (lower qubit, higher qubit) -> grouped bond index.
    pub bonds: BTreeMap<(usize, usize), IndexId>,
}

fn check_grid(c: &Circuit) -> Result<usize, LatticeError> {
    if c.rows != c.cols {
        return Err(LatticeError::NotSquare { rows: c.rows, cols: c.cols });
    }
    if c.rows < 4 || c.rows % 2 != 0 {
        return Err(LatticeError::BadSide(c.rows));
    }
    if let Some(&q) = c.disabled.iter().next() {
        return Err(LatticeError::DisabledQubit(q));
    }
    Ok(c.rows)
}

/// Unordered grid edge for a gated pair, or None if not nearest neighbours.
fn grid_edge(g: usize, q0: usize, q1: usize) -> Option<(usize, usize)> {
    let (lo, hi) = (q0.min(q1), q0.max(q1));
    let (r0, c0) = (lo / g, lo % g);
    let horizontal = hi == lo + 1 && c0 + 1 < g;
    let vertical = hi == lo + g && r0 + 1 < g;
    (horizontal || vertical).then_some((lo, hi))
}

/// Diagonal 4x4 split into per-site factors: D(a,b) = f(a) g(b) z^(ab)
/// with f = (1, f1), g = (g0, g1). Entries indexed a*2+b, a = first listed
/// qubit of the gate.
fn split_diagonal(gate: &Gate) -> Result<(Complex64, Complex64, Complex64, Complex64), LatticeError> {
    if !gate.kind.is_diagonal() {
        return Err(LatticeError::NonDiagonal {
            cycle: gate.cycle,
            tag: gate.kind.tag(),
            q0: gate.qubits[0],
            q1: gate.qubits[1],
        });
    }
    let u = gate_unitary(&gate.kind);
    let d: Vec<Complex64> = (0..4).map(|i| u.at(i, i)).collect();
    if d[0] == Complex64::ZERO || d[1] == Complex64::ZERO || d[2] == Complex64::ZERO {
        return Err(LatticeError::ZeroEntry {
            cycle: gate.cycle,
            q0: gate.qubits[0],
            q1: gate.qubits[1],
        });
    }
    let f1 = d[2] / d[0];
    let z = d[0] * d[3] / (d[1] * d[2]);
    Ok((f1, d[0], d[1], z))
}

fn is_one(v: Complex64) -> bool {
    v == Complex64::new(1.0, 0.0)
}

fn diag_unitary(e0: Complex64, e1: Complex64) -> WorldlineOp {
    WorldlineOp::Unitary([(e0.re, e0.im), (0.0, 0.0), (0.0, 0.0), (e1.re, e1.im)])
}

/// Compile the circuit to one Worldline node per site. Node ids equal site
/// indices (row-major), so the schedule's leaf slots line up for free. Bond
/// ids are allocated in row-major edge order (right edge, then down edge)
/// and only for edges with at least one firing.
pub fn build_lattice_network(
    c: &Circuit,
    fixed_bits: &BTreeMap<usize, u8>,
    open_qubits: &[usize],
) -> Result<(TensorNetwork, BTreeMap<(usize, usize), IndexId>), LatticeError> {
    let g = check_grid(c)?;
    let nq = g * g;
    for (&q, &bit) in fixed_bits {
        if q >= nq {
            return Err(NetError::QubitRange(q).into());
        }
        if bit > 1 {
            return Err(NetError::BadBit(q, bit).into());
        }
        if open_qubits.contains(&q) {
            return Err(NetError::DoublyAssigned(q).into());
        }
    }
    for &q in open_qubits {
        if q >= nq {
            return Err(NetError::QubitRange(q).into());
        }
    }
    for q in 0..nq {
        if !fixed_bits.contains_key(&q) && !open_qubits.contains(&q) {
            return Err(NetError::Unassigned(q).into());
        }
    }

    // count firings per grid edge, validating as we go
    let mut firings: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for gate in c.gates() {
        if gate.qubits.len() != 2 {
            continue;
        }
        let (q0, q1) = (gate.qubits[0], gate.qubits[1]);
        let edge = grid_edge(g, q0, q1).ok_or(LatticeError::NotNeighbours {
            cycle: gate.cycle,
            q0,
            q1,
        })?;
        split_diagonal(gate)?;
        *firings.entry(edge).or_insert(0) += 1;
    }

    let mut net = TensorNetwork::new();
    let mut bonds: BTreeMap<(usize, usize), IndexId> = BTreeMap::new();
    for s in 0..nq {
        let (r, col) = (s / g, s % g);
        if col + 1 < g {
            if let Some(&n) = firings.get(&(s, s + 1)) {
                bonds.insert((s, s + 1), net.new_index(1 << n));
            }
        }
        if r + 1 < g {
            if let Some(&n) = firings.get(&(s, s + g)) {
                bonds.insert((s, s + g), net.new_index(1 << n));
            }
        }
    }
    let open_ids: BTreeMap<usize, IndexId> =
        open_qubits.iter().map(|&q| (q, net.new_index(2))).collect();

    let mut chains: Vec<Vec<WorldlineOp>> = (0..nq)
        .map(|_| vec![WorldlineOp::Start([(1.0, 0.0), (0.0, 0.0)])])
        .collect();
    for gate in c.gates() {
        match gate.qubits.len() {
            1 => {
                let q = gate.qubits[0];
                let u = gate_unitary(&gate.kind);
                let m = [
                    (u.at(0, 0).re, u.at(0, 0).im),
                    (u.at(0, 1).re, u.at(0, 1).im),
                    (u.at(1, 0).re, u.at(1, 0).im),
                    (u.at(1, 1).re, u.at(1, 1).im),
                ];
                chains[q].push(WorldlineOp::Unitary(m));
            }
            2 => {
                let (q0, q1) = (gate.qubits[0], gate.qubits[1]);
                let edge = grid_edge(g, q0, q1).unwrap();
                let bond = bonds[&edge];
                let (f1, g0, g1, z) = split_diagonal(gate)?;
                if !is_one(f1) {
                    chains[q0].push(diag_unitary(Complex64::new(1.0, 0.0), f1));
                }
                chains[q0].push(WorldlineOp::TapCopy(bond));
                if !(is_one(g0) && is_one(g1)) {
                    chains[q1].push(diag_unitary(g0, g1));
                }
                chains[q1].push(WorldlineOp::TapPhase(bond, (z.re, z.im)));
            }
            _ => unreachable!("gates are one- or two-qubit"),
        }
    }
    for (q, chain) in chains.iter_mut().enumerate() {
        match fixed_bits.get(&q) {
            Some(&bit) => {
                let mut v = [(0.0, 0.0); 2];
                v[bit as usize] = (1.0, 0.0);
                chain.push(WorldlineOp::Finish(v));
            }
            None => chain.push(WorldlineOp::FinishOpen(open_ids[&q])),
        }
    }

    for (q, chain) in chains.into_iter().enumerate() {
        let mut indices: Vec<IndexId> = bonds
            .iter()
            .filter(|(&(a, b), _)| a == q || b == q)
            .map(|(_, &id)| id)
            .collect();
        if let Some(&id) = open_ids.get(&q) {
            indices.push(id);
        }
        indices.sort_unstable();
        let node = net.add_node(indices, Payload::Worldline(chain));
        debug_assert_eq!(node as usize, q);
    }
    net.open = open_qubits.iter().map(|&q| open_ids[&q]).collect();
    Ok((net, bonds))
}

struct TreeBuilder {
    steps: Vec<(usize, usize)>,
    next: usize,
}

impl TreeBuilder {
    fn join(&mut self, a: usize, b: usize) -> usize {
        self.steps.push((a, b));
        let slot = self.next;
        self.next += 1;
        slot
    }

    fn snake(&mut self, cells: impl IntoIterator<Item = usize>) -> usize {
        let mut it = cells.into_iter();
        let mut acc = it.next().expect("snake over an empty block");
        for s in it {
            acc = self.join(acc, s);
        }
        acc
    }
}

/// The fixed contraction order: four blocks absorbed in a sequence that
/// never exposes more than n+b unsliced bonds on any intermediate region.
/// Leaf slots are row-major site indices, matching
/// [`build_lattice_network`]'s node ids.
pub fn lattice_tree(params: &LatticeParams) -> ContractionTree {
    let g = params.side();
    let (n, b, s, k, w) = (params.n, params.b, params.s, params.k(), params.w());
    let lo = s + b;
    let site = move |r: usize, c: usize| r * g + c;
    let mut tb = TreeBuilder { steps: Vec::new(), next: g * g };

    // bottom-left block, rows bottom-up, each row left to right
    let bl = tb.snake((0..lo).flat_map(|r| (0..n).map(move |c| site(r, c))));
    // bottom-right block, mirrored: each row right to left
    let br = tb.snake((0..lo).flat_map(|r| (n..g).rev().map(move |c| site(r, c))));
    // top-left corner, rows top-down, each row left to right
    let tl = tb.snake((lo..g).rev().flat_map(|r| (0..k).map(move |c| site(r, c))));
    let mut acc = tb.join(bl, tl);
    // notch columns between the corner and the seam, bottom-up
    for c in k..n {
        for r in lo..g {
            acc = tb.join(acc, site(r, c));
        }
    }
    // overhang columns just past the seam, top-down
    for c in n..n + w {
        for r in (lo..g).rev() {
            acc = tb.join(acc, site(r, c));
        }
    }
    acc = tb.join(acc, br);
    // remaining top-right columns, bottom-up
    for c in n + w..g {
        for r in lo..g {
            acc = tb.join(acc, site(r, c));
        }
    }
    debug_assert_eq!(acc + 1, 2 * g * g - 1);
    ContractionTree { steps: tb.steps }
}

/// Compile a grid circuit into a ready-to-run instance: network, fixed
/// contraction order, and the seam slicing plan (bottom s rows of the
/// central vertical seam). Seam bonds missing at very small depth are
/// simply not sliced.
pub fn lattice_instance(
    c: &Circuit,
    fixed_bits: &BTreeMap<usize, u8>,
    open_qubits: &[usize],
) -> Result<LatticeInstance, LatticeError> {
    let g = check_grid(c)?;
    let params = lattice_slicing_params(g / 2, c.depth);
    let (net, bonds) = build_lattice_network(c, fixed_bits, open_qubits)?;
    let tree = lattice_tree(&params);

    let mut sliced_indices = Vec::new();
    let mut dims = Vec::new();
    for r in 0..params.s {
        let q = site_index(g, r, params.n - 1);
        if let Some(&id) = bonds.get(&(q, q + 1)) {
            sliced_indices.push(id);
            dims.push(net.dim(id));
        }
    }

    let empty = BTreeSet::new();
    let base = cost_report(&net, &tree, &empty);
    let set: BTreeSet<IndexId> = sliced_indices.iter().copied().collect();
    let per_slice = cost_report(&net, &tree, &set);
    let log2_tasks: f64 = dims.iter().map(|&d| (d as f64).log2()).sum();
    let plan = SlicingPlan {
        s: sliced_indices.len(),
        sliced_indices,
        dims,
        overhead_log2: log2_tasks + per_slice.log2_flops - base.log2_flops,
        lattice: Some(params),
    };
    Ok(LatticeInstance { net, tree, plan, params, bonds })
}

fn site_index(g: usize, r: usize, c: usize) -> usize {
    r * g + c
}

/// Cost of the full sliced run, in both conventions: complex multiply-adds
/// (one per output-element x contracted-element pair) and real flops at 8
/// per multiply-add.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LatticeCost {
    pub params: LatticeParams,
    pub log2_num_tasks: f64,
    /// log2 of complex multiply-adds summed over every task and step.
    pub log2_madds: f64,
    /// Same volume at 8 real operations per complex multiply-add.
    pub log2_flops: f64,
    /// Largest axis count over all tensors materialized inside one task.
    pub max_rank: usize,
    /// log2 elements of the largest such tensor.
    pub log2_max_intermediate: f64,
}

pub fn lattice_cost(inst: &LatticeInstance) -> LatticeCost {
    let set: BTreeSet<IndexId> = inst.plan.sliced_indices.iter().copied().collect();
    let per_slice = cost_report(&inst.net, &inst.tree, &set);
    let log2_tasks: f64 = inst.plan.dims.iter().map(|&d| (d as f64).log2()).sum();
    LatticeCost {
        params: inst.params,
        log2_num_tasks: log2_tasks,
        log2_madds: per_slice.log2_flops - 3.0 + log2_tasks,
        log2_flops: per_slice.log2_flops + log2_tasks,
        max_rank: per_slice.max_rank,
        log2_max_intermediate: per_slice.log2_max_intermediate,
    }
}

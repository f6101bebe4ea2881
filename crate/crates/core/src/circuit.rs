//! Random quantum circuits on a rectangular qubit lattice.
//!
//! Conventions used across the whole crate:
//! - Qubit index = `row * cols + col`; qubit 0 is the least significant bit
//!   of a state-vector index.
//! - For a two-qubit gate the first listed qubit is the high bit of the 4x4
//!   matrix index (all built-in two-qubit gates are symmetric, so this only
//!   matters for reading the matrices).
//! - Bitstrings are written with qubit 0 as the first character.
//!
//! A generated circuit has `1 + depth + 1` layers: an initial Hadamard wall,
//! `depth` random middle cycles, and a final layer that is a Hadamard wall in
//! CZ style and empty in FSIM style. Zero-depth circuits get an empty final
//! layer in both styles, so they prepare the uniform superposition.

use num_complex::Complex64;
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_4};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CircuitError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: qubit {q} out of range (lattice has {nq} qubits)")]
    QubitRange { line: usize, q: usize, nq: usize },
    #[error("line {line}: qubit {q} used twice in cycle {cycle}")]
    Collision { line: usize, q: usize, cycle: usize },
    #[error("line {line}: unknown gate tag '{tag}'")]
    UnknownTag { line: usize, tag: String },
    #[error("line {line}: fsim takes exactly 2 qubits and 2 params")]
    FsimArity { line: usize },
    #[error("line {line}: two-qubit gate on non-adjacent qubits {q0},{q1}")]
    NonAdjacent { line: usize, q0: usize, q1: usize },
    #[error("line {line}: qubit {q} is disabled")]
    Disabled { line: usize, q: usize },
    #[error("cycle numbers not contiguous: missing cycle {missing}")]
    NonContiguousCycles { missing: usize },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateKind {
    H,
    SqrtX,
    SqrtY,
    SqrtW,
    T,
    Cz,
    ISwap,
    FSim { theta: f64, phi: f64 },
}

impl GateKind {
    pub fn arity(&self) -> usize {
        match self {
            GateKind::H | GateKind::SqrtX | GateKind::SqrtY | GateKind::SqrtW | GateKind::T => 1,
            GateKind::Cz | GateKind::ISwap | GateKind::FSim { .. } => 2,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            GateKind::H => "h",
            GateKind::SqrtX => "sx",
            GateKind::SqrtY => "sy",
            GateKind::SqrtW => "sw",
            GateKind::T => "t",
            GateKind::Cz => "cz",
            GateKind::ISwap => "iswap",
            GateKind::FSim { .. } => "fsim",
        }
    }

    /// Diagonal in the computational basis?
    pub fn is_diagonal(&self) -> bool {
        match self {
            GateKind::T | GateKind::Cz => true,
            GateKind::FSim { theta, .. } => *theta == 0.0,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub kind: GateKind,
    /// 1 or 2 qubit indices; first listed = high bit.
    pub qubits: Vec<usize>,
    pub cycle: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Circuit {
    pub rows: usize,
    pub cols: usize,
    /// Middle-cycle count (the "d" in 1 + d + 1). For files that do not
    /// follow the generated layout this is `cycles.len() - 2` clamped at 0.
    pub depth: usize,
    /// Disabled lattice sites: never gated, always |0>.
    pub disabled: BTreeSet<usize>,
    /// Gate lists per cycle, cycle number = position.
    pub cycles: Vec<Vec<Gate>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CircuitStyle {
    Cz,
    Fsim,
}

#[derive(Debug, Clone)]
pub struct UnitaryMatrix {
    pub dim: usize,
    /// Row-major entries, dim x dim.
    pub entries: Vec<Complex64>,
}

impl UnitaryMatrix {
    pub fn at(&self, r: usize, c: usize) -> Complex64 {
        self.entries[r * self.dim + c]
    }

    /// max |U†U - I| over entries.
    pub fn unitarity_defect(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..d {
                    acc += self.at(k, i).conj() * self.at(k, j);
                }
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((acc - Complex64::new(want, 0.0)).norm());
            }
        }
        worst
    }
}

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// The gate's unitary under the conventions in the module docs.
pub fn gate_unitary(kind: &GateKind) -> UnitaryMatrix {
    let s = FRAC_1_SQRT_2;
    match kind {
        GateKind::H => UnitaryMatrix {
            dim: 2,
            entries: vec![c(s, 0.0), c(s, 0.0), c(s, 0.0), c(-s, 0.0)],
        },
        GateKind::SqrtX => UnitaryMatrix {
            dim: 2,
            entries: vec![c(0.5, 0.5), c(0.5, -0.5), c(0.5, -0.5), c(0.5, 0.5)],
        },
        GateKind::SqrtY => UnitaryMatrix {
            dim: 2,
            entries: vec![c(0.5, 0.5), c(-0.5, -0.5), c(0.5, 0.5), c(0.5, 0.5)],
        },
        GateKind::SqrtW => {
            // W = (X+Y)/sqrt(2); this is its principal square root
            let r2 = std::f64::consts::SQRT_2;
            UnitaryMatrix {
                dim: 2,
                entries: vec![c(0.5, 0.5), c(0.0, -r2 / 2.0), c(r2 / 2.0, 0.0), c(0.5, 0.5)],
            }
        }
        GateKind::T => UnitaryMatrix {
            dim: 2,
            entries: vec![c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(FRAC_PI_4.cos(), FRAC_PI_4.sin())],
        },
        GateKind::Cz => {
            let mut e = vec![c(0.0, 0.0); 16];
            e[0] = c(1.0, 0.0);
            e[5] = c(1.0, 0.0);
            e[10] = c(1.0, 0.0);
            e[15] = c(-1.0, 0.0);
            UnitaryMatrix { dim: 4, entries: e }
        }
        GateKind::ISwap => {
            let mut e = vec![c(0.0, 0.0); 16];
            e[0] = c(1.0, 0.0);
            e[6] = c(0.0, 1.0);
            e[9] = c(0.0, 1.0);
            e[15] = c(1.0, 0.0);
            UnitaryMatrix { dim: 4, entries: e }
        }
        GateKind::FSim { theta, phi } => {
            let mut e = vec![c(0.0, 0.0); 16];
            e[0] = c(1.0, 0.0);
            e[5] = c(theta.cos(), 0.0);
            e[6] = c(0.0, -theta.sin());
            e[9] = c(0.0, -theta.sin());
            e[10] = c(theta.cos(), 0.0);
            e[15] = c(phi.cos(), -phi.sin());
            UnitaryMatrix { dim: 4, entries: e }
        }
    }
}

impl Circuit {
    pub fn num_qubits(&self) -> usize {
        self.rows * self.cols
    }

    pub fn qubit_at(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn row_col(&self, q: usize) -> (usize, usize) {
        (q / self.cols, q % self.cols)
    }

    pub fn is_enabled(&self, q: usize) -> bool {
        !self.disabled.contains(&q)
    }

    /// All gates with their cycle numbers, cycle-major.
    pub fn gates(&self) -> impl Iterator<Item = &Gate> {
        self.cycles.iter().flatten()
    }

    /// Structural validity: ranges, per-cycle collisions, adjacency,
    /// disabled-qubit use, and gate/cycle agreement.
    pub fn validate(&self) -> Result<(), CircuitError> {
        let nq = self.num_qubits();
        for (cyc, gates) in self.cycles.iter().enumerate() {
            let mut used = BTreeSet::new();
            for g in gates {
                if g.cycle != cyc {
                    return Err(CircuitError::Invalid(format!(
                        "gate in layer {cyc} carries cycle {}",
                        g.cycle
                    )));
                }
                if g.qubits.len() != g.kind.arity() {
                    return Err(CircuitError::Invalid(format!(
                        "gate {} wants {} qubits, has {}",
                        g.kind.tag(),
                        g.kind.arity(),
                        g.qubits.len()
                    )));
                }
                for &q in &g.qubits {
                    if q >= nq {
                        return Err(CircuitError::QubitRange { line: 0, q, nq });
                    }
                    if self.disabled.contains(&q) {
                        return Err(CircuitError::Disabled { line: 0, q });
                    }
                    if !used.insert(q) {
                        return Err(CircuitError::Collision { line: 0, q, cycle: cyc });
                    }
                }
                if g.qubits.len() == 2 {
                    let (r0, c0) = self.row_col(g.qubits[0]);
                    let (r1, c1) = self.row_col(g.qubits[1]);
                    if r0.abs_diff(r1) + c0.abs_diff(c1) != 1 {
                        return Err(CircuitError::NonAdjacent {
                            line: 0,
                            q0: g.qubits[0],
                            q1: g.qubits[1],
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Adjacent pairs gated in pattern class `class` (0..7). Classes 0-3 pair
/// horizontally (by column/row parity), classes 4-7 vertically. Over any 8
/// consecutive cycles every lattice bond fires exactly once.
pub fn pattern_pairs(rows: usize, cols: usize, class: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    if class < 4 {
        let (cpar, rpar) = (class / 2, class % 2);
        for r in 0..rows {
            if r % 2 != rpar {
                continue;
            }
            for ccol in 0..cols.saturating_sub(1) {
                if ccol % 2 == cpar {
                    pairs.push((r * cols + ccol, r * cols + ccol + 1));
                }
            }
        }
    } else {
        let (rpar, cpar) = ((class - 4) / 2, class % 2);
        for r in 0..rows.saturating_sub(1) {
            if r % 2 != rpar {
                continue;
            }
            for ccol in 0..cols {
                if ccol % 2 == cpar {
                    pairs.push((r * cols + ccol, (r + 1) * cols + ccol));
                }
            }
        }
    }
    pairs
}

/// Deterministic random circuit. CZ style: CZ pairs on the 8-class schedule
/// with single-qubit gates from {sx, sy, t} on every unpaired qubit; FSIM
/// style: FSim(pi/2, pi/6) pairs with single-qubit gates from {sx, sy, sw}.
/// No qubit repeats its previous random single-qubit gate.
pub fn generate_rqc(rows: usize, cols: usize, depth: usize, seed: u64, style: CircuitStyle) -> Circuit {
    use rand::{Rng, SeedableRng};
    assert!(rows >= 1 && cols >= 1);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let nq = rows * cols;
    let single_set: [GateKind; 3] = match style {
        CircuitStyle::Cz => [GateKind::SqrtX, GateKind::SqrtY, GateKind::T],
        CircuitStyle::Fsim => [GateKind::SqrtX, GateKind::SqrtY, GateKind::SqrtW],
    };
    let two_q = |a: usize, b: usize, cycle: usize| Gate {
        kind: match style {
            CircuitStyle::Cz => GateKind::Cz,
            CircuitStyle::Fsim => GateKind::FSim {
                theta: std::f64::consts::FRAC_PI_2,
                phi: std::f64::consts::PI / 6.0,
            },
        },
        qubits: vec![a, b],
        cycle,
    };

    let mut cycles: Vec<Vec<Gate>> = Vec::with_capacity(depth + 2);
    cycles.push(
        (0..nq)
            .map(|q| Gate {
                kind: GateKind::H,
                qubits: vec![q],
                cycle: 0,
            })
            .collect(),
    );
    let mut last_single: Vec<Option<usize>> = vec![None; nq];
    for t in 1..=depth {
        let class = (t - 1) % 8;
        let mut layer = Vec::new();
        let mut paired = vec![false; nq];
        for (a, b) in pattern_pairs(rows, cols, class) {
            layer.push(two_q(a, b, t));
            paired[a] = true;
            paired[b] = true;
        }
        for q in 0..nq {
            if paired[q] {
                continue;
            }
            let pick = loop {
                let k = rng.random_range(0..single_set.len());
                if last_single[q] != Some(k) {
                    break k;
                }
            };
            last_single[q] = Some(pick);
            layer.push(Gate {
                kind: single_set[pick],
                qubits: vec![q],
                cycle: t,
            });
        }
        // canonical order within a cycle: by first qubit
        layer.sort_by_key(|g| g.qubits[0]);
        cycles.push(layer);
    }
    // Final layer: CZ style undoes the Hadamard basis; zero-depth circuits
    // keep it empty so they prepare the uniform superposition.
    let final_cycle = depth + 1;
    let final_layer = if style == CircuitStyle::Cz && depth > 0 {
        (0..nq)
            .map(|q| Gate {
                kind: GateKind::H,
                qubits: vec![q],
                cycle: final_cycle,
            })
            .collect()
    } else {
        Vec::new()
    };
    cycles.push(final_layer);
    let c = Circuit {
        rows,
        cols,
        depth,
        disabled: BTreeSet::new(),
        cycles,
    };
    debug_assert!(c.validate().is_ok());
    c
}

/// Canonical text form; `parse_circuit` inverts it byte-for-byte.
pub fn serialize_circuit(c: &Circuit) -> String {
    let mut out = String::new();
    let _ = write!(out, "{} {}", c.rows, c.cols);
    for q in &c.disabled {
        let _ = write!(out, " {q}");
    }
    out.push('\n');
    for (cyc, gates) in c.cycles.iter().enumerate() {
        for g in gates {
            let _ = write!(out, "{cyc} {}", g.kind.tag());
            for q in &g.qubits {
                let _ = write!(out, " {q}");
            }
            if let GateKind::FSim { theta, phi } = g.kind {
                let _ = write!(out, " {theta} {phi}");
            }
            out.push('\n');
        }
    }
    out
}

/// SHA-256 of the canonical serialization, hex-encoded.
pub fn circuit_hash(c: &Circuit) -> String {
    let digest = Sha256::digest(serialize_circuit(c).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn parse_circuit(text: &str) -> Result<Circuit, CircuitError> {
    let mut header: Option<(usize, usize, BTreeSet<usize>)> = None;
    // (cycle, gate, line) before regrouping
    let mut staged: Vec<(usize, Gate, usize)> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("");
        let toks: Vec<&str> = content.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        let parse_usize = |tok: &str, what: &str| -> Result<usize, CircuitError> {
            tok.parse().map_err(|_| CircuitError::Syntax {
                line,
                msg: format!("expected {what}, got '{tok}'"),
            })
        };
        if header.is_none() {
            if toks.len() < 2 {
                return Err(CircuitError::Syntax {
                    line,
                    msg: "header needs 'rows cols [disabled...]'".into(),
                });
            }
            let rows = parse_usize(toks[0], "rows")?;
            let cols = parse_usize(toks[1], "cols")?;
            if rows == 0 || cols == 0 {
                return Err(CircuitError::Syntax {
                    line,
                    msg: "rows and cols must be positive".into(),
                });
            }
            let mut disabled = BTreeSet::new();
            for t in &toks[2..] {
                let q = parse_usize(t, "disabled qubit")?;
                if q >= rows * cols {
                    return Err(CircuitError::QubitRange { line, q, nq: rows * cols });
                }
                disabled.insert(q);
            }
            header = Some((rows, cols, disabled));
            continue;
        }
        let (rows, cols, ref disabled) = *header.as_ref().unwrap();
        let nq = rows * cols;
        if toks.len() < 3 {
            return Err(CircuitError::Syntax {
                line,
                msg: "gate line needs 'cycle tag q0 ...'".into(),
            });
        }
        let cycle = parse_usize(toks[0], "cycle")?;
        let tag = toks[1];
        let (kind, nqubits, nparams) = match tag {
            "h" => (GateKind::H, 1, 0),
            "sx" => (GateKind::SqrtX, 1, 0),
            "sy" => (GateKind::SqrtY, 1, 0),
            "sw" => (GateKind::SqrtW, 1, 0),
            "t" => (GateKind::T, 1, 0),
            "cz" => (GateKind::Cz, 2, 0),
            "iswap" => (GateKind::ISwap, 2, 0),
            "fsim" => (GateKind::FSim { theta: 0.0, phi: 0.0 }, 2, 2),
            other => {
                return Err(CircuitError::UnknownTag {
                    line,
                    tag: other.to_string(),
                })
            }
        };
        let rest = &toks[2..];
        if rest.len() != nqubits + nparams {
            if tag == "fsim" {
                return Err(CircuitError::FsimArity { line });
            }
            return Err(CircuitError::Syntax {
                line,
                msg: format!("{tag} takes {nqubits} qubit(s) and {nparams} param(s)"),
            });
        }
        let mut qubits = Vec::with_capacity(nqubits);
        for t in &rest[..nqubits] {
            let q = parse_usize(t, "qubit")?;
            if q >= nq {
                return Err(CircuitError::QubitRange { line, q, nq });
            }
            if disabled.contains(&q) {
                return Err(CircuitError::Disabled { line, q });
            }
            qubits.push(q);
        }
        let kind = if tag == "fsim" {
            let mut params = [0.0f64; 2];
            for (i, t) in rest[nqubits..].iter().enumerate() {
                params[i] = t.parse().map_err(|_| CircuitError::FsimArity { line })?;
            }
            GateKind::FSim {
                theta: params[0],
                phi: params[1],
            }
        } else {
            kind
        };
        if nqubits == 2 {
            if qubits[0] == qubits[1] {
                return Err(CircuitError::Collision {
                    line,
                    q: qubits[0],
                    cycle,
                });
            }
            let (r0, c0) = (qubits[0] / cols, qubits[0] % cols);
            let (r1, c1) = (qubits[1] / cols, qubits[1] % cols);
            if r0.abs_diff(r1) + c0.abs_diff(c1) != 1 {
                return Err(CircuitError::NonAdjacent {
                    line,
                    q0: qubits[0],
                    q1: qubits[1],
                });
            }
        }
        staged.push((cycle, Gate { kind, qubits, cycle }, line));
    }

    let (rows, cols, disabled) = header.ok_or(CircuitError::Syntax {
        line: 1,
        msg: "empty circuit file".into(),
    })?;

    let max_cycle = staged.iter().map(|(c, _, _)| *c).max();
    let n_cycles = max_cycle.map_or(0, |m| m + 1);
    let mut cycles: Vec<Vec<Gate>> = vec![Vec::new(); n_cycles];
    let mut used: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_cycles];
    for (cyc, gate, line) in staged {
        for &q in &gate.qubits {
            if !used[cyc].insert(q) {
                return Err(CircuitError::Collision { line, q, cycle: cyc });
            }
        }
        cycles[cyc].push(gate);
    }
    // every cycle number up to the max must appear at least once (the max
    // itself is nonempty by construction)
    if let Some(missing) = cycles.iter().position(|g| g.is_empty()) {
        return Err(CircuitError::NonContiguousCycles { missing });
    }
    // Empty trailing layers have no file representation, so depth is
    // inferred: a closing Hadamard wall marks a (1 + d + 1) layout, its
    // absence a (1 + d) one. Middle layers never consist solely of H.
    let n_enabled = rows * cols - disabled.len();
    let closes_with_h_wall = n_cycles >= 2
        && cycles[n_cycles - 1].len() == n_enabled
        && cycles[n_cycles - 1].iter().all(|g| g.kind == GateKind::H);
    let depth = if closes_with_h_wall {
        n_cycles - 2
    } else {
        n_cycles.saturating_sub(1)
    };
    Ok(Circuit {
        rows,
        cols,
        depth,
        disabled,
        cycles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_parses() {
        let c = parse_circuit("1 1\n0 h 0\n").unwrap();
        assert_eq!((c.rows, c.cols), (1, 1));
        assert_eq!(c.cycles.len(), 1);
        assert_eq!(c.cycles[0][0].kind, GateKind::H);
    }

    #[test]
    fn two_cycle_file_parses() {
        let c = parse_circuit("2 2\n0 h 0\n0 h 1\n0 h 2\n0 h 3\n1 cz 0 1\n").unwrap();
        assert_eq!(c.num_qubits(), 4);
        assert_eq!(c.cycles.len(), 2);
        assert_eq!(c.cycles[1][0].kind, GateKind::Cz);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let c = parse_circuit("# hi\n\n1 2\n0 h 0 # trailing\n0 h 1\n").unwrap();
        assert_eq!(c.cycles[0].len(), 2);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match parse_circuit("1 2\n0 h 5\n") {
            Err(CircuitError::QubitRange { line: 2, q: 5, .. }) => {}
            other => panic!("want qubit range error, got {other:?}"),
        }
        match parse_circuit("1 2\n0 h 0\n0 t 0\n") {
            Err(CircuitError::Collision { line: 3, q: 0, cycle: 0 }) => {}
            other => panic!("want collision, got {other:?}"),
        }
        match parse_circuit("1 2\n0 frob 0\n") {
            Err(CircuitError::UnknownTag { line: 2, tag }) => assert_eq!(tag, "frob"),
            other => panic!("want unknown tag, got {other:?}"),
        }
        match parse_circuit("1 2\n0 fsim 0 1 0.5\n") {
            Err(CircuitError::FsimArity { line: 2 }) => {}
            other => panic!("want fsim arity, got {other:?}"),
        }
        match parse_circuit("2 2\n0 cz 0 3\n") {
            Err(CircuitError::NonAdjacent { line: 2, .. }) => {}
            other => panic!("want non-adjacent, got {other:?}"),
        }
        match parse_circuit("1 2\n2 h 0\n") {
            Err(CircuitError::NonContiguousCycles { .. }) => {}
            other => panic!("want non-contiguous, got {other:?}"),
        }
        match parse_circuit("1 2 1\n0 h 1\n") {
            Err(CircuitError::Disabled { line: 2, q: 1 }) => {}
            other => panic!("want disabled, got {other:?}"),
        }
    }

    #[test]
    fn all_unitaries_are_unitary() {
        let kinds = [
            GateKind::H,
            GateKind::SqrtX,
            GateKind::SqrtY,
            GateKind::SqrtW,
            GateKind::T,
            GateKind::Cz,
            GateKind::ISwap,
            GateKind::FSim { theta: 0.3, phi: 1.1 },
            GateKind::FSim {
                theta: std::f64::consts::FRAC_PI_2,
                phi: std::f64::consts::PI / 6.0,
            },
        ];
        for k in kinds {
            assert!(
                gate_unitary(&k).unitarity_defect() < 1e-12,
                "{} is not unitary",
                k.tag()
            );
        }
    }

    #[test]
    fn fsim_zero_angles_is_identity() {
        let u = gate_unitary(&GateKind::FSim { theta: 0.0, phi: 0.0 });
        for r in 0..4 {
            for cc in 0..4 {
                let want = if r == cc { 1.0 } else { 0.0 };
                assert!((u.at(r, cc) - Complex64::new(want, 0.0)).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn cz_is_diag_1_1_1_minus1() {
        let u = gate_unitary(&GateKind::Cz);
        assert_eq!(u.at(3, 3), Complex64::new(-1.0, 0.0));
        assert_eq!(u.at(0, 0), Complex64::new(1.0, 0.0));
    }

    #[test]
    fn sqrtw_squares_to_w() {
        let u = gate_unitary(&GateKind::SqrtW);
        let s = FRAC_1_SQRT_2;
        // W = (X+Y)/sqrt(2) = [[0, (1-i)/sqrt2],[(1+i)/sqrt2, 0]]
        let w = [
            Complex64::new(0.0, 0.0),
            Complex64::new(s, -s),
            Complex64::new(s, s),
            Complex64::new(0.0, 0.0),
        ];
        for r in 0..2 {
            for cc in 0..2 {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..2 {
                    acc += u.at(r, k) * u.at(k, cc);
                }
                assert!((acc - w[r * 2 + cc]).norm() < 1e-15, "W mismatch at {r},{cc}");
            }
        }
    }

    #[test]
    fn pattern_classes_cover_every_bond_once_per_8_cycles() {
        let (rows, cols) = (5, 6);
        let mut seen = std::collections::BTreeSet::new();
        for class in 0..8 {
            for (a, b) in pattern_pairs(rows, cols, class) {
                assert!(seen.insert((a, b)), "bond {a},{b} fired twice");
            }
        }
        let want = rows * (cols - 1) + (rows - 1) * cols;
        assert_eq!(seen.len(), want);
    }

    #[test]
    fn generation_is_deterministic_and_roundtrips() {
        for style in [CircuitStyle::Cz, CircuitStyle::Fsim] {
            let a = generate_rqc(3, 4, 9, 42, style);
            let b = generate_rqc(3, 4, 9, 42, style);
            assert_eq!(serialize_circuit(&a), serialize_circuit(&b));
            let c = generate_rqc(3, 4, 9, 43, style);
            assert_ne!(serialize_circuit(&a), serialize_circuit(&c));
            let text = serialize_circuit(&a);
            let parsed = parse_circuit(&text).unwrap();
            assert_eq!(serialize_circuit(&parsed), text);
            assert_eq!(parsed.depth, 9);
        }
    }

    #[test]
    fn no_consecutive_repeat_single_qubit_gates() {
        let c = generate_rqc(4, 4, 12, 7, CircuitStyle::Cz);
        let nq = c.num_qubits();
        let mut last: Vec<Option<&'static str>> = vec![None; nq];
        for layer in &c.cycles[1..=c.depth] {
            for g in layer {
                if g.kind.arity() == 1 {
                    let tag = g.kind.tag();
                    assert_ne!(last[g.qubits[0]], Some(tag), "qubit {} repeated {tag}", g.qubits[0]);
                    last[g.qubits[0]] = Some(tag);
                }
            }
        }
    }

    #[test]
    fn zero_depth_has_empty_final_layer() {
        for style in [CircuitStyle::Cz, CircuitStyle::Fsim] {
            let c = generate_rqc(2, 2, 0, 1, style);
            assert_eq!(c.cycles.len(), 2);
            assert!(c.cycles[1].is_empty());
            assert!(c.gates().all(|g| g.kind.arity() == 1));
        }
    }

    #[test]
    fn cz_final_layer_is_hadamard_wall() {
        let c = generate_rqc(2, 3, 5, 9, CircuitStyle::Cz);
        assert_eq!(c.cycles.len(), 7);
        assert_eq!(c.cycles[6].len(), 6);
        assert!(c.cycles[6].iter().all(|g| g.kind == GateKind::H));
        let f = generate_rqc(2, 3, 5, 9, CircuitStyle::Fsim);
        assert!(f.cycles[6].is_empty());
    }

    #[test]
    fn fsim_style_uses_fsim_pairs() {
        let c = generate_rqc(3, 3, 8, 5, CircuitStyle::Fsim);
        let mut n2q = 0;
        for g in c.gates() {
            if g.kind.arity() == 2 {
                n2q += 1;
                assert!(matches!(g.kind, GateKind::FSim { .. }));
            }
        }
        assert!(n2q > 0);
    }

    #[test]
    fn fuzz_roundtrip_100_circuits() {
        for seed in 0..100 {
            let style = if seed % 2 == 0 { CircuitStyle::Cz } else { CircuitStyle::Fsim };
            let rows = 1 + (seed as usize % 4);
            let cols = 1 + (seed as usize / 2 % 3);
            let depth = seed as usize % 10;
            let c = generate_rqc(rows, cols, depth, seed, style);
            let text = serialize_circuit(&c);
            let p = parse_circuit(&text).unwrap();
            assert_eq!(serialize_circuit(&p), text, "roundtrip failed for seed {seed}");
            p.validate().unwrap();
        }
    }

    #[test]
    fn circuit_hash_is_stable_and_distinguishes() {
        let a = generate_rqc(2, 2, 4, 1, CircuitStyle::Cz);
        let b = generate_rqc(2, 2, 4, 2, CircuitStyle::Cz);
        assert_eq!(circuit_hash(&a), circuit_hash(&a));
        assert_ne!(circuit_hash(&a), circuit_hash(&b));
        assert_eq!(circuit_hash(&a).len(), 64);
    }
}

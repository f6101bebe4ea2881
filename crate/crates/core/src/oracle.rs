//! Brute-force state-vector simulation, the ground truth everything else is
//! checked against. Exponential in qubit count, capped to keep mistakes from
//! eating all memory.

use crate::circuit::{gate_unitary, Circuit, GateKind};
use num_complex::Complex64;
use thiserror::Error;

pub const DEFAULT_QUBIT_CAP: usize = 20;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("{n} qubits exceeds the state-vector cap of {cap}")]
    TooLarge { n: usize, cap: usize },
    #[error("bitstring '{s}' does not have {n} characters of 0/1")]
    BadBitstring { s: String, n: usize },
}

/// Full amplitude vector over `2^n` basis states. Qubit 0 is the least
/// significant bit of the vector index.
#[derive(Debug, Clone)]
pub struct StateVector {
    pub n: usize,
    pub amps: Vec<Complex64>,
}

impl StateVector {
    /// |00..0>
    pub fn zero(n: usize) -> Self {
        let mut amps = vec![Complex64::new(0.0, 0.0); 1 << n];
        amps[0] = Complex64::new(1.0, 0.0);
        StateVector { n, amps }
    }

    pub fn norm_sq(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Amplitude of a basis state given as text, qubit 0 first.
    pub fn amplitude(&self, bits: &str) -> Result<Complex64, OracleError> {
        Ok(self.amps[bitstring_index(bits, self.n)?])
    }

    pub fn all_probs(&self) -> Vec<f64> {
        self.amps.iter().map(|a| a.norm_sqr()).collect()
    }

    fn apply_1q(&mut self, u: &[Complex64; 4], q: usize) {
        let bit = 1usize << q;
        for i in 0..self.amps.len() {
            if i & bit == 0 {
                let j = i | bit;
                let (a, b) = (self.amps[i], self.amps[j]);
                self.amps[i] = u[0] * a + u[1] * b;
                self.amps[j] = u[2] * a + u[3] * b;
            }
        }
    }

    /// `q_hi` is the high bit of the 4x4 matrix index.
    fn apply_2q(&mut self, u: &[Complex64; 16], q_hi: usize, q_lo: usize) {
        let (bh, bl) = (1usize << q_hi, 1usize << q_lo);
        for i in 0..self.amps.len() {
            if i & bh == 0 && i & bl == 0 {
                let idx = [i, i | bl, i | bh, i | bh | bl];
                let v = [self.amps[idx[0]], self.amps[idx[1]], self.amps[idx[2]], self.amps[idx[3]]];
                for r in 0..4 {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for k in 0..4 {
                        acc += u[r * 4 + k] * v[k];
                    }
                    self.amps[idx[r]] = acc;
                }
            }
        }
    }
}

/// Basis-state index for a bitstring written with qubit 0 as the first
/// character.
pub fn bitstring_index(bits: &str, n: usize) -> Result<usize, OracleError> {
    let bad = || OracleError::BadBitstring {
        s: bits.to_string(),
        n,
    };
    if bits.len() != n {
        return Err(bad());
    }
    let mut idx = 0usize;
    for (k, ch) in bits.chars().enumerate() {
        match ch {
            '0' => {}
            '1' => idx |= 1 << k,
            _ => return Err(bad()),
        }
    }
    Ok(idx)
}

/// Inverse of `bitstring_index`.
pub fn index_bitstring(idx: usize, n: usize) -> String {
    (0..n).map(|k| if idx >> k & 1 == 1 { '1' } else { '0' }).collect()
}

pub fn simulate(c: &Circuit) -> Result<StateVector, OracleError> {
    simulate_with_cap(c, DEFAULT_QUBIT_CAP)
}

pub fn simulate_with_cap(c: &Circuit, cap: usize) -> Result<StateVector, OracleError> {
    let n = c.num_qubits();
    if n > cap {
        return Err(OracleError::TooLarge { n, cap });
    }
    let mut sv = StateVector::zero(n);
    for layer in &c.cycles {
        for g in layer {
            let u = gate_unitary(&g.kind);
            match g.kind.arity() {
                1 => {
                    let m: [Complex64; 4] = u.entries.clone().try_into().unwrap();
                    sv.apply_1q(&m, g.qubits[0]);
                }
                2 => {
                    let m: [Complex64; 16] = u.entries.clone().try_into().unwrap();
                    sv.apply_2q(&m, g.qubits[0], g.qubits[1]);
                }
                _ => unreachable!(),
            }
        }
        let norm = sv.norm_sq();
        assert!(
            (norm - 1.0).abs() < 1e-9,
            "state norm drifted to {norm} after a gate layer"
        );
    }
    Ok(sv)
}

/// Convenience wrapper used by gate-level tests.
pub fn apply_gate_sequence(n: usize, gates: &[(GateKind, Vec<usize>)]) -> StateVector {
    let mut sv = StateVector::zero(n);
    for (kind, qubits) in gates {
        let u = gate_unitary(kind);
        match kind.arity() {
            1 => {
                let m: [Complex64; 4] = u.entries.clone().try_into().unwrap();
                sv.apply_1q(&m, qubits[0]);
            }
            2 => {
                let m: [Complex64; 16] = u.entries.clone().try_into().unwrap();
                sv.apply_2q(&m, qubits[0], qubits[1]);
            }
            _ => unreachable!(),
        }
    }
    sv
}

//! From amplitudes to bitstrings: batched amplitude computation, frugal
//! rejection sampling, and the statistical checks (cross-entropy score,
//! exp(-x) histogram fit) that judge the output.
//!
//! A batch holds every amplitude over a small set of open qubits with the
//! rest of the circuit pinned, so one contraction yields `2^k` amplitudes
//! for nearly the price of one. Sampling then consumes batches as a stream
//! and never stores a full state.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::circuit::{circuit_hash, Circuit};
use crate::executor::{execute, execute_ordinals, ExecError, RunConfig, RunReport};
use crate::lattice::build_lattice_network;
use crate::pathopt::{
    anneal_path, general_slicing, greedy_path, ContractionTree, LossWeights, PathError,
    SlicingPlan,
};
use crate::tensornet::{build_network, simplify, NetError, TensorNetwork};

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("open qubits: {0}")]
    BadOpen(String),
    #[error("fixed bits: {0}")]
    BadFixed(String),
    #[error("batch advertises {want} amplitudes but holds {have}")]
    BatchShape { want: usize, have: usize },
    #[error("qubit {0} is not open in this batch")]
    NotOpen(usize),
    #[error("task fraction {0} is outside (0, 1]")]
    BadFraction(f64),
    #[error("amplitude stream ended after {accepted} of {wanted} samples")]
    StreamExhausted { accepted: usize, wanted: usize },
    #[error("probabilities sum to {0}, want 1")]
    BadDistribution(f64),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Most open qubits a single batch may carry (2^12 amplitudes).
pub const MAX_OPEN: usize = 12;

/// Open-qubit count used when the caller does not pick one.
pub const DEFAULT_OPEN: usize = 9;

/// Every amplitude over a set of open qubits, with the remaining qubits
/// pinned to `fixed_bits`.
///
/// `amplitudes` is row-major over the open qubits in list order, so
/// `open_qubits[0]` is the most significant bit of the batch index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AmplitudeBatch {
    pub open_qubits: Vec<usize>,
    /// Bits of the non-open qubits, ascending by qubit id (first char is
    /// the lowest id).
    pub fixed_bits: String,
    pub amplitudes: Vec<Complex64>,
    /// Hash of the circuit the batch came from.
    pub circuit_id: String,
    /// Hash of the contraction order and slicing that produced it.
    pub path_id: String,
}

impl AmplitudeBatch {
    pub fn num_qubits(&self) -> usize {
        self.open_qubits.len() + self.fixed_bits.len()
    }

    pub fn validate(&self) -> Result<(), SampleError> {
        let k = self.open_qubits.len();
        if k > MAX_OPEN {
            return Err(SampleError::BadOpen(format!(
                "{k} open qubits, cap is {MAX_OPEN}"
            )));
        }
        let want = 1usize << k;
        if self.amplitudes.len() != want {
            return Err(SampleError::BatchShape {
                want,
                have: self.amplitudes.len(),
            });
        }
        let n = self.num_qubits();
        let mut seen = BTreeSet::new();
        for &q in &self.open_qubits {
            if q >= n {
                return Err(SampleError::BadOpen(format!("qubit {q} out of range")));
            }
            if !seen.insert(q) {
                return Err(SampleError::BadOpen(format!("qubit {q} repeats")));
            }
        }
        if let Some(ch) = self.fixed_bits.chars().find(|c| *c != '0' && *c != '1') {
            return Err(SampleError::BadFixed(format!("character {ch:?}")));
        }
        Ok(())
    }

    pub fn probs(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }

    /// Text of the full assignment behind batch entry `idx`, lowest qubit
    /// id first.
    pub fn full_bitstring(&self, idx: usize) -> String {
        let n = self.num_qubits();
        let k = self.open_qubits.len();
        let mut out = vec!['?'; n];
        for (j, &q) in self.open_qubits.iter().enumerate() {
            out[q] = if (idx >> (k - 1 - j)) & 1 == 1 { '1' } else { '0' };
        }
        let mut fixed = self.fixed_bits.chars();
        for slot in out.iter_mut() {
            if *slot == '?' {
                *slot = fixed.next().expect("fixed bits cover the non-open qubits");
            }
        }
        out.into_iter().collect()
    }

    /// Restrict the batch to the entries where `qubit` reads `bit`,
    /// dropping it from the open list. The surviving amplitudes keep their
    /// relative order, so the result is exactly the batch a fresh
    /// contraction with that qubit pinned would produce.
    pub fn fix_qubit(&self, qubit: usize, bit: u8) -> Result<AmplitudeBatch, SampleError> {
        if bit > 1 {
            return Err(SampleError::BadFixed(format!("bit {bit} for qubit {qubit}")));
        }
        let Some(j) = self.open_qubits.iter().position(|&q| q == qubit) else {
            return Err(SampleError::NotOpen(qubit));
        };
        let k = self.open_qubits.len();
        let low = k - 1 - j;
        let mut amplitudes = Vec::with_capacity(self.amplitudes.len() / 2);
        for hi in 0..1usize << j {
            let base = ((hi << 1) | bit as usize) << low;
            amplitudes.extend_from_slice(&self.amplitudes[base..base + (1 << low)]);
        }
        let mut open_qubits = self.open_qubits.clone();
        open_qubits.remove(j);
        // splice the newly pinned bit into the ascending fixed text
        let n = self.num_qubits();
        let mut fixed_bits = String::with_capacity(self.fixed_bits.len() + 1);
        let mut old = self.fixed_bits.chars();
        for q in 0..n {
            if q == qubit {
                fixed_bits.push(if bit == 1 { '1' } else { '0' });
            } else if !self.open_qubits.contains(&q) {
                fixed_bits.push(old.next().expect("fixed bits cover the non-open qubits"));
            }
        }
        Ok(AmplitudeBatch {
            open_qubits,
            fixed_bits,
            amplitudes,
            circuit_id: self.circuit_id.clone(),
            path_id: self.path_id.clone(),
        })
    }
}

/// Stable id for a contraction order plus slicing choice.
pub fn path_id(tree: &ContractionTree, plan: &SlicingPlan) -> String {
    let blob = serde_json::to_vec(&(&tree.steps, &plan.sliced_indices, &plan.dims))
        .expect("plain data serializes");
    let digest = Sha256::digest(&blob);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Knobs for one batch contraction.
#[derive(Debug, Clone)]
pub struct BatchConfig {
    pub run: RunConfig,
    /// Run the network rewrite passes before ordering.
    pub simplify: bool,
    /// Cost evaluations granted to the order search; 0 or 1 keeps the
    /// greedy order.
    pub anneal_budget: usize,
    /// Seed for the order search and for task subsetting.
    pub seed: u64,
    /// Contract only this fraction of the slice tasks, rescaling the sum
    /// so amplitudes stay unbiased. The skipped tasks cost fidelity, which
    /// the output reports.
    pub task_fraction: Option<f64>,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            run: RunConfig::default(),
            simplify: true,
            anneal_budget: 0,
            seed: 7,
            task_fraction: None,
        }
    }
}

/// A batch plus the run diagnostics behind it.
#[derive(Debug)]
pub struct BatchOutput {
    pub batch: AmplitudeBatch,
    pub report: RunReport,
    /// Fraction of slice tasks contracted; 1.0 for a full run.
    pub fidelity: f64,
}

fn fixed_string(fixed: &BTreeMap<usize, u8>) -> String {
    fixed
        .values()
        .map(|&b| if b == 1 { '1' } else { '0' })
        .collect()
}

/// The network behind a batch. Square grids of diagonal-gate circuits
/// compile to the grouped-bond site form (one node per qubit, all firings
/// of a bond merged into one index), which confines open-leg overhead to
/// the few bonds at the open corner; other circuits get the generic
/// gate-by-gate form.
fn batch_network(
    c: &Circuit,
    fixed: &BTreeMap<usize, u8>,
    open_qubits: &[usize],
) -> Result<TensorNetwork, SampleError> {
    if let Ok((net, _)) = build_lattice_network(c, fixed, open_qubits) {
        return Ok(net);
    }
    Ok(build_network(c, fixed, open_qubits)?)
}

/// Contract one amplitude batch end to end: network, order, slicing, run.
/// `fixed` and `open_qubits` must partition the circuit's qubits.
pub fn batch_run(
    c: &Circuit,
    fixed: &BTreeMap<usize, u8>,
    open_qubits: &[usize],
    cfg: &BatchConfig,
) -> Result<BatchOutput, SampleError> {
    if open_qubits.len() > MAX_OPEN {
        return Err(SampleError::BadOpen(format!(
            "{} open qubits, cap is {MAX_OPEN}",
            open_qubits.len()
        )));
    }
    let mut seen = BTreeSet::new();
    if let Some(&q) = open_qubits.iter().find(|&&q| !seen.insert(q)) {
        return Err(SampleError::BadOpen(format!("qubit {q} repeats")));
    }
    let mut net = batch_network(c, fixed, open_qubits)?;
    if cfg.simplify {
        simplify(&mut net);
    }
    let tree = if cfg.anneal_budget > 1 {
        anneal_path(&net, cfg.anneal_budget, &LossWeights::default(), cfg.seed).tree
    } else {
        greedy_path(&net)
    };
    let plan = general_slicing(&net, &tree, cfg.run.memory_cap_log2)?;
    let (report, fidelity) = match cfg.task_fraction {
        None => (execute(&net, &tree, &plan, &cfg.run)?, 1.0),
        Some(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(SampleError::BadFraction(f));
            }
            let total = plan.num_tasks();
            let keep = ((f * total as f64).round() as usize).clamp(1, total);
            let mut ordinals: Vec<usize> = (0..total).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7461_736b);
            for i in (1..ordinals.len()).rev() {
                let j = rng.random_range(0..=i);
                ordinals.swap(i, j);
            }
            ordinals.truncate(keep);
            ordinals.sort_unstable();
            let mut report = execute_ordinals(&net, &tree, &plan, &cfg.run, &ordinals)?;
            let scale = total as f64 / keep as f64;
            for a in report.amplitudes.data.iter_mut() {
                *a *= scale;
            }
            (report, keep as f64 / total as f64)
        }
    };
    let batch = AmplitudeBatch {
        open_qubits: open_qubits.to_vec(),
        fixed_bits: fixed_string(fixed),
        amplitudes: report.amplitudes.data.clone(),
        circuit_id: circuit_hash(c),
        path_id: path_id(&tree, &plan),
    };
    Ok(BatchOutput {
        batch,
        report,
        fidelity,
    })
}

/// [`batch_run`] returning just the batch.
pub fn compute_batch(
    c: &Circuit,
    fixed: &BTreeMap<usize, u8>,
    open_qubits: &[usize],
    cfg: &BatchConfig,
) -> Result<AmplitudeBatch, SampleError> {
    Ok(batch_run(c, fixed, open_qubits, cfg)?.batch)
}

/// Pick `k` qubits in a corner block of the grid, nearest to (0, 0) by
/// ring, so k = 9 on a square grid is the 3 x 3 corner. Corner qubits keep
/// the open legs close together, which keeps the batch contraction cheap.
pub fn default_open_qubits(c: &Circuit, k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..c.num_qubits()).collect();
    ids.sort_by_key(|&q| {
        let (r, col) = c.row_col(q);
        (r.max(col), r, col)
    });
    ids.truncate(k.min(ids.len()));
    ids.sort_unstable();
    ids
}

/// How a bitstring set was drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMethod {
    Frugal,
    Exact,
    Uniform,
}

impl SampleMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            SampleMethod::Frugal => "frugal",
            SampleMethod::Exact => "exact",
            SampleMethod::Uniform => "uniform",
        }
    }
}

/// Bitstrings drawn from a run, tagged with how and how faithfully.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSet {
    pub bitstrings: Vec<String>,
    pub method: SampleMethod,
    pub fidelity_estimate: f64,
}

/// Rejection-sample bitstrings from a stream of batches without ever
/// holding the state: batch entry `i` is accepted with probability
/// `min(1, |a_i|^2 * 2^n / c)`, so accepted strings follow the amplitude
/// distribution while memory stays at one batch.
///
/// Returns the samples and the realized acceptance rate; a uniform state
/// accepts at rate `1 / c`. Tune `c` up if any scaled probability exceeds
/// it, down for throughput.
pub fn frugal_rejection_sample<I>(
    batches: I,
    m: usize,
    c: f64,
    seed: u64,
    fidelity_estimate: f64,
) -> Result<(SampleSet, f64), SampleError>
where
    I: IntoIterator<Item = AmplitudeBatch>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bitstrings = Vec::with_capacity(m);
    let mut trials = 0u64;
    if m > 0 {
        'stream: for batch in batches {
            batch.validate()?;
            let boost = (batch.num_qubits() as f64).exp2() / c;
            for (idx, a) in batch.amplitudes.iter().enumerate() {
                trials += 1;
                let accept = (a.norm_sqr() * boost).min(1.0);
                if rng.random::<f64>() < accept {
                    bitstrings.push(batch.full_bitstring(idx));
                    if bitstrings.len() == m {
                        break 'stream;
                    }
                }
            }
        }
    }
    if bitstrings.len() < m {
        return Err(SampleError::StreamExhausted {
            accepted: bitstrings.len(),
            wanted: m,
        });
    }
    let rate = if trials == 0 {
        0.0
    } else {
        bitstrings.len() as f64 / trials as f64
    };
    Ok((
        SampleSet {
            bitstrings,
            method: SampleMethod::Frugal,
            fidelity_estimate,
        },
        rate,
    ))
}

/// Draw from one batch's own normalized distribution by inverting the
/// cumulative sum. The batch must carry nonzero weight.
pub fn exact_sample(
    batch: &AmplitudeBatch,
    m: usize,
    seed: u64,
) -> Result<SampleSet, SampleError> {
    batch.validate()?;
    let probs = batch.probs();
    let total: f64 = probs.iter().sum();
    if !(total > 0.0) {
        return Err(SampleError::BadDistribution(total));
    }
    let mut cum = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for p in &probs {
        acc += p;
        cum.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bitstrings = (0..m)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            let idx = cum.partition_point(|&x| x <= u).min(probs.len() - 1);
            batch.full_bitstring(idx)
        })
        .collect();
    Ok(SampleSet {
        bitstrings,
        method: SampleMethod::Exact,
        fidelity_estimate: 1.0,
    })
}

/// Bitstrings drawn uniformly at random, the zero-fidelity control.
pub fn uniform_sample(n: usize, m: usize, seed: u64) -> SampleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bitstrings = (0..m)
        .map(|_| {
            (0..n)
                .map(|_| if rng.random::<bool>() { '1' } else { '0' })
                .collect()
        })
        .collect();
    SampleSet {
        bitstrings,
        method: SampleMethod::Uniform,
        fidelity_estimate: 0.0,
    }
}

/// Cross-entropy score of a sample set: `2^n * mean(p) - 1` over the ideal
/// probabilities of the sampled strings. Ideal-state samples score near 1,
/// uniform noise near 0, with standard error about `1 / sqrt(num_samples)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct XebReport {
    pub n: usize,
    pub num_samples: usize,
    pub f_xeb: f64,
}

pub fn xeb<F>(bitstrings: &[String], n: usize, mut ideal_prob: F) -> XebReport
where
    F: FnMut(&str) -> f64,
{
    let mean = if bitstrings.is_empty() {
        0.0
    } else {
        bitstrings.iter().map(|b| ideal_prob(b)).sum::<f64>() / bitstrings.len() as f64
    };
    XebReport {
        n,
        num_samples: bitstrings.len(),
        f_xeb: (n as f64).exp2() * mean - 1.0,
    }
}

/// Standard error of the cross-entropy score at `m` samples.
pub fn xeb_sigma(m: usize) -> f64 {
    if m == 0 {
        f64::INFINITY
    } else {
        1.0 / (m as f64).sqrt()
    }
}

/// Number of histogram cells used by [`porter_thomas_check`].
pub const PT_BINS: usize = 24;

/// One cell of the scaled-probability histogram.
#[derive(Debug, Clone, Serialize)]
pub struct PtBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
    pub expected: f64,
}

/// Chi-square fit of scaled probabilities `x = 2^n p` against the exp(-x)
/// law that chaotic circuit output follows.
#[derive(Debug, Clone, Serialize)]
pub struct PorterThomas {
    pub bins: Vec<PtBin>,
    pub chi2: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Fit a whole output distribution (must sum to 1 within 1e-6) against the
/// exp(-x) law. Cells are equal-mass under the law, so each expects
/// `probs.len() / 24` entries and sparse tails cannot starve the fit.
pub fn porter_thomas_check(probs: &[f64]) -> Result<PorterThomas, SampleError> {
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(SampleError::BadDistribution(total));
    }
    let b = PT_BINS;
    let edges: Vec<f64> = (0..=b)
        .map(|i| {
            if i == b {
                f64::INFINITY
            } else {
                (b as f64 / (b - i) as f64).ln()
            }
        })
        .collect();
    let n_states = probs.len();
    let mut counts = vec![0u64; b];
    for &p in probs {
        let x = p * n_states as f64;
        let cell = edges[1..].partition_point(|&hi| hi <= x).min(b - 1);
        counts[cell] += 1;
    }
    let expected = n_states as f64 / b as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    let dof = b - 1;
    let dist = ChiSquared::new(dof as f64).expect("positive dof");
    let p_value = dist.sf(chi2);
    let bins = (0..b)
        .map(|i| PtBin {
            lo: edges[i],
            hi: edges[i + 1],
            count: counts[i],
            expected,
        })
        .collect();
    Ok(PorterThomas {
        bins,
        chi2,
        dof,
        p_value,
    })
}

/// Write a sample set: `#`-prefixed header lines, then one bitstring per
/// line. `extra` appends caller headers such as a manifest hash.
pub fn write_samples<W: Write>(
    mut w: W,
    set: &SampleSet,
    circuit_id: &str,
    f_xeb: Option<f64>,
    extra: &[(&str, &str)],
) -> std::io::Result<()> {
    writeln!(w, "# circuit {circuit_id}")?;
    writeln!(w, "# method {}", set.method.tag())?;
    writeln!(w, "# fidelity_estimate {}", set.fidelity_estimate)?;
    if let Some(f) = f_xeb {
        writeln!(w, "# f_xeb {f}")?;
    }
    for (k, v) in extra {
        writeln!(w, "# {k} {v}")?;
    }
    for b in &set.bitstrings {
        writeln!(w, "{b}")?;
    }
    Ok(())
}

/// Histogram rows of an exp(-x) fit as CSV.
pub fn write_pt_histogram_csv<W: Write>(mut w: W, pt: &PorterThomas) -> std::io::Result<()> {
    writeln!(w, "bin_lo,bin_hi,count,expected")?;
    for bin in &pt.bins {
        writeln!(w, "{},{},{},{}", bin.lo, bin.hi, bin.count, bin.expected)?;
    }
    Ok(())
}

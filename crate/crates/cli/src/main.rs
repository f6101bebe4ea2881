//! Command-line front end for the tensor-network pipeline: generate
//! circuits, inspect and optimize their networks, estimate contraction
//! cost, run amplitude batches, draw samples, and validate or benchmark
//! the results. Figure-style artifacts are emitted as CSV or JSON only.
//!
//! Exit codes: 0 success, 1 failure (including validation verdicts), 2
//! usage error. Every output embeds or references the hash of a manifest
//! describing the exact inputs, flags, seeds and tool version behind it.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use rqcsim_core::circuit::{generate_rqc, parse_circuit, serialize_circuit, Circuit, CircuitStyle};
use rqcsim_core::engine::{
    contract_pair_ttgt, contract_pair_unfused, ContractionSpec, OutAxis,
};
use rqcsim_core::executor::{execute, PrecisionMode, RunConfig, RunReport};
use rqcsim_core::lattice::{lattice_cost, lattice_instance};
use rqcsim_core::oracle;
use rqcsim_core::pathopt::{
    anneal_path, cost_report, general_slicing, greedy_path, ContractionTree, LossWeights,
    SlicingPlan,
};
use rqcsim_core::sampling::{
    batch_run, default_open_qubits, exact_sample, frugal_rejection_sample, path_id,
    porter_thomas_check, uniform_sample, write_pt_histogram_csv, write_samples, AmplitudeBatch,
    BatchConfig, SampleSet, XebReport, DEFAULT_OPEN, MAX_OPEN,
};
use rqcsim_core::tensor::DenseTensor;
use rqcsim_core::tensornet::simplify;

#[derive(Parser)]
#[command(name = "rqcsim", version, about = "Tensor-network simulator for random quantum circuits")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a random circuit file
    Gen(GenArgs),
    /// Report circuit and network statistics
    Stats(StatsArgs),
    /// Search a contraction order and slicing plan, writing a path file
    Optimize(OptimizeArgs),
    /// Estimate contraction cost without running anything
    Estimate(EstimateArgs),
    /// Contract amplitudes
    Run(RunArgs),
    /// Draw bitstring samples
    Sample(SampleArgs),
    /// Check outputs against the oracle or statistical laws
    Validate(ValidateArgs),
    /// Time kernels and worker scaling, emitting CSV data
    Bench(BenchArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StyleArg {
    Cz,
    Fsim,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    Single,
    Mixed,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SchemeArg {
    Lattice,
    Search,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Frugal,
    Exact,
    Uniform,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SuiteArg {
    Kernels,
    Scaling,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    #[arg(long)]
    depth: usize,
    #[arg(long, value_enum, default_value_t = StyleArg::Cz)]
    style: StyleArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    circuit: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Flags shared by every subcommand that builds an amplitude network.
#[derive(Args)]
struct TargetArgs {
    #[arg(long)]
    circuit: PathBuf,
    /// Bits of the fixed (non-open) qubits, ascending by qubit id.
    /// Defaults to all zeros.
    #[arg(long)]
    bits: Option<String>,
    /// Number of open qubits, taken as a corner block.
    #[arg(long, default_value_t = 0)]
    open: usize,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long, default_value_t = 30.0)]
    mem_cap_log2: f64,
    /// Cost evaluations for the order search; 0 keeps the greedy order.
    #[arg(long, default_value_t = 0)]
    anneal_budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long, value_enum, default_value_t = SchemeArg::Search)]
    scheme: SchemeArg,
    #[arg(long, default_value_t = 30.0)]
    mem_cap_log2: f64,
    #[arg(long, default_value_t = 0)]
    anneal_budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExecArgs {
    #[arg(long, env = "RQCSIM_WORKERS", default_value_t = 1)]
    workers: usize,
    #[arg(long, value_enum, default_value_t = PrecisionArg::Single)]
    precision: PrecisionArg,
    #[arg(long, default_value_t = 30.0)]
    mem_cap_log2: f64,
    #[arg(long, default_value_t = true)]
    deterministic_reduce: std::primitive::bool,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Write the checkpoint every N finished tasks.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Stop after N tasks (resume later from the checkpoint).
    #[arg(long)]
    stop_after: Option<usize>,
}

impl ExecArgs {
    fn config(&self) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.workers = self.workers.max(1);
        cfg.precision_mode = match self.precision {
            PrecisionArg::Single => PrecisionMode::Single,
            PrecisionArg::Mixed => PrecisionMode::Mixed,
        };
        cfg.memory_cap_log2 = self.mem_cap_log2;
        cfg.deterministic_reduce = self.deterministic_reduce;
        cfg.checkpoint_path = self.checkpoint.clone();
        cfg.checkpoint_every = self.checkpoint_every;
        cfg.stop_after_tasks = self.stop_after;
        cfg
    }

    fn snapshot(&self) -> Value {
        json!({
            "workers": self.workers,
            "precision": match self.precision { PrecisionArg::Single => "single", PrecisionArg::Mixed => "mixed" },
            "mem_cap_log2": self.mem_cap_log2,
            "deterministic_reduce": self.deterministic_reduce,
            "checkpoint": self.checkpoint.as_ref().map(|p| p.display().to_string()),
            "checkpoint_every": self.checkpoint_every,
            "stop_after": self.stop_after,
        })
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    target: TargetArgs,
    /// Path file from `optimize`; the order and plan are reused.
    #[arg(long)]
    path: Option<PathBuf>,
    /// Slicing plan JSON overriding the path file's plan.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[command(flatten)]
    exec: ExecArgs,
    /// Contract only this fraction of slice tasks (fidelity trade).
    #[arg(long)]
    task_fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    anneal_budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    circuit: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Frugal)]
    method: MethodArg,
    /// Number of samples to draw.
    #[arg(long, default_value_t = 100)]
    m: usize,
    /// Rejection envelope: candidates are accepted with probability
    /// |a|^2 * 2^n / c.
    #[arg(long, default_value_t = 10.0)]
    envelope: f64,
    /// Open qubits per batch (corner block); capped at the qubit count.
    #[arg(long, default_value_t = DEFAULT_OPEN)]
    open: usize,
    #[command(flatten)]
    exec: ExecArgs,
    #[arg(long)]
    task_fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    anneal_budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    circuit: PathBuf,
    /// Compare a `run` output's amplitudes against the state-vector oracle.
    #[arg(long)]
    against_oracle: bool,
    /// Fit the oracle's output distribution against the exp(-x) law,
    /// writing the histogram as CSV.
    #[arg(long)]
    porter_thomas: bool,
    /// Score a samples file by linear cross-entropy against the oracle.
    #[arg(long)]
    xeb: bool,
    /// Run output file (for --against-oracle).
    #[arg(long)]
    run: Option<PathBuf>,
    /// Samples file (for --xeb).
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Relative tolerance for --against-oracle.
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum)]
    suite: SuiteArg,
    /// Timing repetitions per case; the best is reported.
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// Worker counts for the scaling suite.
    #[arg(long, default_value = "1,2,4")]
    workers: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Usage-level problem found after flag parsing; exits with code 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<u8> {
    match cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Stats(a) => cmd_stats(a),
        Cmd::Optimize(a) => cmd_optimize(a),
        Cmd::Estimate(a) => cmd_estimate(a),
        Cmd::Run(a) => cmd_run(a),
        Cmd::Sample(a) => cmd_sample(a),
        Cmd::Validate(a) => cmd_validate(a),
        Cmd::Bench(a) => cmd_bench(a),
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// The provenance record embedded in or referenced by every output.
fn manifest(sub: &str, config: Value, inputs: &[(&str, String)], seeds: &[u64]) -> (Value, String) {
    let hashes: BTreeMap<&str, &str> = inputs.iter().map(|(k, v)| (*k, v.as_str())).collect();
    let m = json!({
        "subcommand": sub,
        "config": config,
        "input_hashes": hashes,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "seeds": seeds,
    });
    let hash = sha_hex(m.to_string().as_bytes());
    (m, hash)
}

fn read_file(path: &Path, what: &str) -> Result<(String, String)> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("{what} file {}", path.display()))?;
    let hash = sha_hex(text.as_bytes());
    Ok((text, hash))
}

fn load_circuit(path: &Path) -> Result<(Circuit, String)> {
    let (text, hash) = read_file(path, "circuit")?;
    let c = parse_circuit(&text).map_err(|e| anyhow!("circuit: {e}"))?;
    Ok((c, hash))
}

fn emit_json(out: &Option<PathBuf>, v: &Value) -> Result<()> {
    let text = format!("{}\n", serde_json::to_string_pretty(v)?);
    emit_text(out, &text)
}

fn emit_text(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Full manifest next to a non-JSON artifact, so the hash it references
/// stays resolvable.
fn write_manifest_sidecar(out: &Option<PathBuf>, m: &Value, hash: &str) -> Result<()> {
    if let Some(p) = out {
        let side = p.with_extension(format!(
            "{}manifest.json",
            p.extension().map(|e| format!("{}.", e.to_string_lossy())).unwrap_or_default()
        ));
        let v = json!({ "manifest": m, "manifest_hash": hash });
        fs::write(&side, format!("{}\n", serde_json::to_string_pretty(&v)?))
            .with_context(|| format!("writing {}", side.display()))?;
    }
    Ok(())
}

fn parse_bits(s: &str) -> Result<Vec<u8>> {
    s.chars()
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            other => Err(usage(format!("bits must be 0s and 1s, got {other:?}"))),
        })
        .collect()
}

/// Resolve --bits/--open into the fixed map and open list batch_run wants.
fn resolve_target(c: &Circuit, t: &TargetArgs) -> Result<(BTreeMap<usize, u8>, Vec<usize>)> {
    let n = c.num_qubits();
    if t.open > MAX_OPEN {
        return Err(usage(format!("--open {} exceeds the cap of {MAX_OPEN}", t.open)));
    }
    if t.open > n {
        return Err(usage(format!("--open {} exceeds the {n} qubits", t.open)));
    }
    let open = default_open_qubits(c, t.open);
    let fixed_qubits: Vec<usize> = (0..n).filter(|q| !open.contains(q)).collect();
    let bits = match &t.bits {
        Some(s) => {
            let b = parse_bits(s)?;
            if b.len() != fixed_qubits.len() {
                return Err(usage(format!(
                    "--bits covers {} qubits but {} are fixed",
                    b.len(),
                    fixed_qubits.len()
                )));
            }
            b
        }
        None => vec![0; fixed_qubits.len()],
    };
    Ok((fixed_qubits.into_iter().zip(bits).collect(), open))
}

fn cmd_gen(a: GenArgs) -> Result<u8> {
    let style = match a.style {
        StyleArg::Cz => CircuitStyle::Cz,
        StyleArg::Fsim => CircuitStyle::Fsim,
    };
    if a.rows == 0 || a.cols == 0 {
        return Err(usage("rows and cols must be positive"));
    }
    let c = generate_rqc(a.rows, a.cols, a.depth, a.seed, style);
    let config = json!({
        "rows": a.rows, "cols": a.cols, "depth": a.depth,
        "style": match a.style { StyleArg::Cz => "cz", StyleArg::Fsim => "fsim" },
    });
    let (m, hash) = manifest("gen", config, &[], &[a.seed]);
    let text = format!("# manifest {hash}\n{}", serialize_circuit(&c));
    emit_text(&a.out, &text)?;
    write_manifest_sidecar(&a.out, &m, &hash)?;
    Ok(0)
}

fn cmd_stats(a: StatsArgs) -> Result<u8> {
    let (c, file_hash) = load_circuit(&a.circuit)?;
    let mut gate_counts: BTreeMap<&'static str, usize> = BTreeMap::new();
    for g in c.gates() {
        *gate_counts.entry(g.kind.tag()).or_default() += 1;
    }
    let fixed: BTreeMap<usize, u8> = (0..c.num_qubits()).map(|q| (q, 0)).collect();
    let mut net = rqcsim_core::tensornet::build_network(&c, &fixed, &[])
        .map_err(|e| anyhow!("tensornet: {e}"))?;
    let raw = net.stats();
    let rewrites = simplify(&mut net);
    let simplified = net.stats();
    let (m, hash) = manifest("stats", json!({}), &[("circuit", file_hash)], &[]);
    let v = json!({
        "manifest": m,
        "manifest_hash": hash,
        "circuit": {
            "hash": rqcsim_core::circuit::circuit_hash(&c),
            "rows": c.rows, "cols": c.cols, "depth": c.depth,
            "qubits": c.num_qubits(),
            "cycles": c.cycles.len(),
            "gates": gate_counts,
        },
        "network": {
            "raw": raw,
            "simplified": simplified,
            "rewrites": {
                "diag_rewrites": rewrites.diag_rewrites,
                "absorbed": rewrites.absorbed,
                "fused": rewrites.fused,
            },
        },
    });
    emit_json(&a.out, &v)?;
    Ok(0)
}

/// Network, order and plan for a target, shared by optimize/estimate/run.
fn build_path(
    c: &Circuit,
    fixed: &BTreeMap<usize, u8>,
    open: &[usize],
    mem_cap_log2: f64,
    anneal_budget: usize,
    seed: u64,
) -> Result<(rqcsim_core::tensornet::TensorNetwork, ContractionTree, SlicingPlan)> {
    let mut net = batch_network_cli(c, fixed, open)?;
    simplify(&mut net);
    let tree = if anneal_budget > 1 {
        anneal_path(&net, anneal_budget, &LossWeights::default(), seed).tree
    } else {
        greedy_path(&net)
    };
    let plan =
        general_slicing(&net, &tree, mem_cap_log2).map_err(|e| anyhow!("pathopt: {e}"))?;
    Ok((net, tree, plan))
}

/// Same network selection batch_run makes: grouped-bond site form for
/// square grids of diagonal-gate circuits, generic form otherwise.
fn batch_network_cli(
    c: &Circuit,
    fixed: &BTreeMap<usize, u8>,
    open: &[usize],
) -> Result<rqcsim_core::tensornet::TensorNetwork> {
    if let Ok((net, _)) = rqcsim_core::lattice::build_lattice_network(c, fixed, open) {
        return Ok(net);
    }
    rqcsim_core::tensornet::build_network(c, fixed, open).map_err(|e| anyhow!("tensornet: {e}"))
}

fn fixed_bits_string(fixed: &BTreeMap<usize, u8>) -> String {
    fixed.values().map(|&b| if b == 1 { '1' } else { '0' }).collect()
}

fn cmd_optimize(a: OptimizeArgs) -> Result<u8> {
    let (c, file_hash) = load_circuit(&a.target.circuit)?;
    let (fixed, open) = resolve_target(&c, &a.target)?;
    let (net, tree, plan) = build_path(&c, &fixed, &open, a.mem_cap_log2, a.anneal_budget, a.seed)?;
    let sliced = plan.sliced_indices.iter().copied().collect();
    let cost = cost_report(&net, &tree, &sliced);
    let config = json!({
        "bits": fixed_bits_string(&fixed),
        "open": open,
        "mem_cap_log2": a.mem_cap_log2,
        "anneal_budget": a.anneal_budget,
    });
    let (m, hash) = manifest("optimize", config, &[("circuit", file_hash)], &[a.seed]);
    let v = json!({
        "manifest": m,
        "manifest_hash": hash,
        "circuit": rqcsim_core::circuit::circuit_hash(&c),
        "fixed_bits": fixed_bits_string(&fixed),
        "open_qubits": open,
        "tree": tree,
        "plan": plan,
        "per_slice_cost": cost,
        "num_tasks": plan.num_tasks(),
        "path_id": path_id(&tree, &plan),
    });
    emit_json(&a.out, &v)?;
    Ok(0)
}

fn cmd_estimate(a: EstimateArgs) -> Result<u8> {
    let (c, file_hash) = load_circuit(&a.target.circuit)?;
    let (fixed, open) = resolve_target(&c, &a.target)?;
    let config = json!({
        "scheme": match a.scheme { SchemeArg::Lattice => "lattice", SchemeArg::Search => "search" },
        "bits": fixed_bits_string(&fixed),
        "open": open,
        "mem_cap_log2": a.mem_cap_log2,
        "anneal_budget": a.anneal_budget,
    });
    let (m, hash) = manifest("estimate", config, &[("circuit", file_hash)], &[a.seed]);
    let v = match a.scheme {
        SchemeArg::Lattice => {
            let inst =
                lattice_instance(&c, &fixed, &open).map_err(|e| anyhow!("lattice: {e}"))?;
            let cost = lattice_cost(&inst);
            json!({
                "manifest": m,
                "manifest_hash": hash,
                "circuit": rqcsim_core::circuit::circuit_hash(&c),
                "scheme": "lattice",
                "params": {
                    "n": inst.params.n, "b": inst.params.b, "s": inst.params.s,
                    "l": inst.params.l, "d": inst.params.d,
                    "rank_cap": inst.params.rank_cap,
                    "k": inst.params.k(), "w": inst.params.w(),
                },
                "cost": cost,
                "num_tasks": inst.plan.num_tasks(),
            })
        }
        SchemeArg::Search => {
            let (net, tree, plan) =
                build_path(&c, &fixed, &open, a.mem_cap_log2, a.anneal_budget, a.seed)?;
            let sliced = plan.sliced_indices.iter().copied().collect();
            let cost = cost_report(&net, &tree, &sliced);
            let log2_tasks: f64 =
                plan.dims.iter().map(|&d| (d as f64).log2()).sum();
            json!({
                "manifest": m,
                "manifest_hash": hash,
                "circuit": rqcsim_core::circuit::circuit_hash(&c),
                "scheme": "search",
                "per_slice_cost": cost,
                "plan": plan,
                "num_tasks": plan.num_tasks(),
                "total_log2_flops": cost.log2_flops + log2_tasks,
                "path_id": path_id(&tree, &plan),
            })
        }
    };
    emit_json(&a.out, &v)?;
    Ok(0)
}

/// Amplitudes as [re, im] pairs in batch order.
fn amplitude_rows(t: &DenseTensor) -> Value {
    Value::Array(
        t.data
            .iter()
            .map(|a| json!([a.re, a.im]))
            .collect(),
    )
}

/// Report fields that are stable across reruns; timing goes to stderr.
fn stable_report(r: &RunReport) -> Value {
    json!({
        "tasks": r.tasks,
        "tasks_done": r.tasks_done,
        "resumed_from": r.resumed_from,
        "completed": r.completed,
        "flops": r.flops,
        "discarded_fraction": r.discarded_fraction,
        "peak_task_elems": r.peak_task_elems,
        "max_rank": r.max_rank,
    })
}

fn cmd_run(a: RunArgs) -> Result<u8> {
    let (c, file_hash) = load_circuit(&a.target.circuit)?;
    let (fixed, open) = resolve_target(&c, &a.target)?;
    let mut inputs = vec![("circuit", file_hash)];
    let mut seeds = vec![a.seed];

    let run_cfg = a.exec.config();
    let mut config = a.exec.snapshot();
    config["bits"] = json!(fixed_bits_string(&fixed));
    config["open"] = json!(open);
    config["task_fraction"] = json!(a.task_fraction);
    config["anneal_budget"] = json!(a.anneal_budget);

    let (batch, report, fidelity) = if let Some(path_file) = &a.path {
        if a.task_fraction.is_some() {
            return Err(usage("--task-fraction needs an internally optimized plan, not --path"));
        }
        let (text, path_hash) = read_file(path_file, "path")?;
        inputs.push(("path", path_hash));
        let pv: Value = serde_json::from_str(&text).context("path file is not JSON")?;
        if pv["circuit"].as_str() != Some(rqcsim_core::circuit::circuit_hash(&c).as_str()) {
            return Err(anyhow!("path file was optimized for a different circuit"));
        }
        let path_open: Vec<usize> = serde_json::from_value(pv["open_qubits"].clone())
            .context("path file open_qubits")?;
        let path_bits = pv["fixed_bits"].as_str().unwrap_or_default().to_string();
        if path_open != open || path_bits != fixed_bits_string(&fixed) {
            return Err(anyhow!(
                "path file was optimized for bits {path_bits} open {path_open:?}"
            ));
        }
        let tree: ContractionTree =
            serde_json::from_value(pv["tree"].clone()).context("path file tree")?;
        let mut plan: SlicingPlan =
            serde_json::from_value(pv["plan"].clone()).context("path file plan")?;
        if let Some(plan_file) = &a.plan {
            let (ptext, plan_hash) = read_file(plan_file, "plan")?;
            inputs.push(("plan", plan_hash));
            plan = serde_json::from_str(&ptext).context("plan file")?;
        }
        let mut net = batch_network_cli(&c, &fixed, &open)?;
        simplify(&mut net);
        let report = execute(&net, &tree, &plan, &run_cfg).map_err(|e| anyhow!("executor: {e}"))?;
        let batch = AmplitudeBatch {
            open_qubits: open.clone(),
            fixed_bits: fixed_bits_string(&fixed),
            amplitudes: report.amplitudes.data.clone(),
            circuit_id: rqcsim_core::circuit::circuit_hash(&c),
            path_id: path_id(&tree, &plan),
        };
        (batch, report, 1.0)
    } else {
        if a.plan.is_some() {
            return Err(usage("--plan only overrides a --path file"));
        }
        let cfg = BatchConfig {
            run: run_cfg,
            simplify: true,
            anneal_budget: a.anneal_budget,
            seed: a.seed,
            task_fraction: a.task_fraction,
        };
        seeds.push(cfg.seed);
        let out = batch_run(&c, &fixed, &open, &cfg).map_err(|e| anyhow!("sampling: {e}"))?;
        (out.batch, out.report, out.fidelity)
    };

    eprintln!(
        "run: {} tasks in {:.3}s, utilization {:?}",
        report.tasks_done, report.wall_time, report.worker_utilization
    );
    let (m, hash) = manifest("run", config, &inputs, &seeds);
    let v = json!({
        "manifest": m,
        "manifest_hash": hash,
        "circuit": batch.circuit_id,
        "fixed_bits": batch.fixed_bits,
        "open_qubits": batch.open_qubits,
        "path_id": batch.path_id,
        "fidelity": fidelity,
        "amplitudes": amplitude_rows(&report.amplitudes),
        "report": stable_report(&report),
    });
    emit_json(&a.out, &v)?;
    Ok(0)
}

/// Deterministic assignment of the fixed qubits for stream batch `i`:
/// bits are drawn from sha256(seed, i).
fn stream_bits(seed: u64, i: u64, count: usize) -> Vec<u8> {
    let mut bits = Vec::with_capacity(count);
    let mut block = 0u64;
    while bits.len() < count {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(i.to_le_bytes());
        h.update(block.to_le_bytes());
        for byte in h.finalize() {
            for k in 0..8 {
                if bits.len() == count {
                    break;
                }
                bits.push((byte >> k) & 1);
            }
        }
        block += 1;
    }
    bits
}

fn cmd_sample(a: SampleArgs) -> Result<u8> {
    let (c, file_hash) = load_circuit(&a.circuit)?;
    let n = c.num_qubits();
    let open_count = a.open.min(n).min(MAX_OPEN);
    let open = default_open_qubits(&c, open_count);
    let fixed_qubits: Vec<usize> = (0..n).filter(|q| !open.contains(q)).collect();
    let cfg = BatchConfig {
        run: a.exec.config(),
        simplify: true,
        anneal_budget: a.anneal_budget,
        seed: a.seed,
        task_fraction: a.task_fraction,
    };

    let mut config = a.exec.snapshot();
    config["method"] = json!(match a.method {
        MethodArg::Frugal => "frugal",
        MethodArg::Exact => "exact",
        MethodArg::Uniform => "uniform",
    });
    config["m"] = json!(a.m);
    config["envelope"] = json!(a.envelope);
    config["open"] = json!(open);
    config["task_fraction"] = json!(a.task_fraction);
    config["anneal_budget"] = json!(a.anneal_budget);
    let (m, hash) = manifest("sample", config, &[("circuit", file_hash)], &[a.seed]);

    let make_batch = |i: u64| -> Result<(AmplitudeBatch, f64)> {
        let bits = stream_bits(a.seed, i, fixed_qubits.len());
        let fixed: BTreeMap<usize, u8> =
            fixed_qubits.iter().copied().zip(bits).collect();
        let out = batch_run(&c, &fixed, &open, &cfg).map_err(|e| anyhow!("sampling: {e}"))?;
        Ok((out.batch, out.fidelity))
    };

    let set: SampleSet = match a.method {
        MethodArg::Uniform => uniform_sample(n, a.m, a.seed),
        MethodArg::Exact => {
            let (batch, fidelity) = make_batch(0)?;
            let mut set =
                exact_sample(&batch, a.m, a.seed).map_err(|e| anyhow!("sampling: {e}"))?;
            set.fidelity_estimate = fidelity;
            set
        }
        MethodArg::Frugal => {
            // enough candidate amplitudes for ~8x the expected need
            let per_batch = 1u64 << open.len();
            let want = (a.envelope * a.m as f64 * 8.0).max(64.0) as u64;
            let max_batches = if fixed_qubits.is_empty() {
                want.div_ceil(per_batch).max(1)
            } else {
                want.div_ceil(per_batch).max(1).min(1 << 20)
            };
            let stream_err = std::cell::RefCell::new(None);
            let fidelity = std::cell::Cell::new(1.0);
            let mut i = 0u64;
            let stream = std::iter::from_fn(|| {
                if i >= max_batches {
                    return None;
                }
                // a full-state batch holds the whole distribution; rescan it
                let idx = if fixed_qubits.is_empty() { 0 } else { i };
                i += 1;
                match make_batch(idx) {
                    Ok((b, f)) => {
                        fidelity.set(f);
                        Some(b)
                    }
                    Err(e) => {
                        *stream_err.borrow_mut() = Some(e);
                        None
                    }
                }
            });
            let drawn = frugal_rejection_sample(stream, a.m, a.envelope, a.seed, 1.0);
            if let Some(e) = stream_err.into_inner() {
                return Err(e);
            }
            let (mut set, rate) = drawn.map_err(|e| anyhow!("sampling: {e}"))?;
            set.fidelity_estimate = fidelity.get();
            eprintln!("sample: acceptance rate {rate:.4}");
            set
        }
    };

    // score against the ideal distribution when the oracle can hold it
    let f_xeb = if n <= 16 {
        let sv = oracle::simulate(&c).map_err(|e| anyhow!("oracle: {e}"))?;
        let probs = sv.all_probs();
        let r = rqcsim_core::sampling::xeb(&set.bitstrings, n, |b| {
            probs[oracle::bitstring_index(b, n).expect("sample length")]
        });
        Some(r.f_xeb)
    } else {
        None
    };

    let mut buf = Vec::new();
    write_samples(
        &mut buf,
        &set,
        &rqcsim_core::circuit::circuit_hash(&c),
        f_xeb,
        &[("manifest", &hash)],
    )?;
    emit_text(&a.out, &String::from_utf8(buf).expect("ascii output"))?;
    write_manifest_sidecar(&a.out, &m, &hash)?;
    Ok(0)
}

fn cmd_validate(a: ValidateArgs) -> Result<u8> {
    let modes = [a.against_oracle, a.porter_thomas, a.xeb];
    if modes.iter().filter(|&&b| b).count() != 1 {
        return Err(usage(
            "pick exactly one of --against-oracle, --porter-thomas, --xeb",
        ));
    }
    let (c, file_hash) = load_circuit(&a.circuit)?;
    if a.against_oracle {
        let run_file = a
            .run
            .as_ref()
            .ok_or_else(|| usage("--against-oracle needs --run <run output>"))?;
        let (text, run_hash) = read_file(run_file, "run")?;
        let rv: Value = serde_json::from_str(&text).context("run file is not JSON")?;
        if rv["circuit"].as_str() != Some(rqcsim_core::circuit::circuit_hash(&c).as_str()) {
            return Err(anyhow!("run file belongs to a different circuit"));
        }
        let batch = AmplitudeBatch {
            open_qubits: serde_json::from_value(rv["open_qubits"].clone())
                .context("run file open_qubits")?,
            fixed_bits: rv["fixed_bits"].as_str().unwrap_or_default().to_string(),
            amplitudes: rv["amplitudes"]
                .as_array()
                .ok_or_else(|| anyhow!("run file has no amplitudes"))?
                .iter()
                .map(|p| {
                    Ok(num_complex::Complex64::new(
                        p[0].as_f64().ok_or_else(|| anyhow!("bad amplitude"))?,
                        p[1].as_f64().ok_or_else(|| anyhow!("bad amplitude"))?,
                    ))
                })
                .collect::<Result<_>>()?,
            circuit_id: String::new(),
            path_id: String::new(),
        };
        let sv = oracle::simulate(&c).map_err(|e| anyhow!("oracle: {e}"))?;
        let mut max_rel: f64 = 0.0;
        let mut worst = 0usize;
        for (idx, got) in batch.amplitudes.iter().enumerate() {
            let want = sv
                .amplitude(&batch.full_bitstring(idx))
                .map_err(|e| anyhow!("oracle: {e}"))?;
            let d = (got - want).norm();
            let rel = if d < 1e-9 { 0.0 } else { d / want.norm().max(1e-300) };
            if rel > max_rel {
                max_rel = rel;
                worst = idx;
            }
        }
        let pass = max_rel < a.tolerance;
        let (m, hash) = manifest(
            "validate",
            json!({"mode": "against_oracle", "tolerance": a.tolerance}),
            &[("circuit", file_hash), ("run", run_hash)],
            &[],
        );
        let v = json!({
            "manifest": m,
            "manifest_hash": hash,
            "mode": "against_oracle",
            "amplitudes": batch.amplitudes.len(),
            "max_rel_err": max_rel,
            "worst_index": worst,
            "tolerance": a.tolerance,
            "pass": pass,
        });
        emit_json(&a.out, &v)?;
        println!("{}", if pass { "PASS" } else { "FAIL" });
        return Ok(if pass { 0 } else { 1 });
    }
    if a.porter_thomas {
        let sv = oracle::simulate(&c).map_err(|e| anyhow!("oracle: {e}"))?;
        let probs = sv.all_probs();
        // collision number 2^n sum(p^2) - 1: the exact-sampling xeb score,
        // 1 for a chaotic state
        let collision = probs.len() as f64 * probs.iter().map(|p| p * p).sum::<f64>() - 1.0;
        let pt = porter_thomas_check(&probs).map_err(|e| anyhow!("sampling: {e}"))?;
        let (m, hash) = manifest(
            "validate",
            json!({"mode": "porter_thomas"}),
            &[("circuit", file_hash)],
            &[],
        );
        let mut csv = Vec::new();
        write_pt_histogram_csv(&mut csv, &pt)?;
        emit_text(&a.out, &String::from_utf8(csv).expect("ascii output"))?;
        write_manifest_sidecar(&a.out, &m, &hash)?;
        let pass = pt.p_value > 0.001;
        println!(
            "{} chi2 {:.2} at {} dof, p {:.6}, collision number {:.4}",
            if pass { "PASS" } else { "FAIL" },
            pt.chi2,
            pt.dof,
            pt.p_value,
            collision
        );
        return Ok(if pass { 0 } else { 1 });
    }
    // --xeb
    let samples_file = a
        .samples
        .as_ref()
        .ok_or_else(|| usage("--xeb needs --samples <samples file>"))?;
    let (text, samples_hash) = read_file(samples_file, "samples")?;
    let n = c.num_qubits();
    let bitstrings: Vec<String> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| l.trim().to_string())
        .collect();
    if let Some(bad) = bitstrings.iter().find(|b| b.len() != n) {
        return Err(anyhow!("sample {bad:?} does not cover {n} qubits"));
    }
    let sv = oracle::simulate(&c).map_err(|e| anyhow!("oracle: {e}"))?;
    let probs = sv.all_probs();
    let r: XebReport = rqcsim_core::sampling::xeb(&bitstrings, n, |b| {
        probs[oracle::bitstring_index(b, n).expect("checked length")]
    });
    let sigma = rqcsim_core::sampling::xeb_sigma(r.num_samples);
    let (m, hash) = manifest(
        "validate",
        json!({"mode": "xeb"}),
        &[("circuit", file_hash), ("samples", samples_hash)],
        &[],
    );
    let v = json!({
        "manifest": m,
        "manifest_hash": hash,
        "mode": "xeb",
        "xeb": r,
        "sigma": sigma,
    });
    emit_json(&a.out, &v)?;
    println!("f_xeb {:.4} over {} samples (sigma {:.4})", r.f_xeb, r.num_samples, sigma);
    Ok(0)
}

fn time_best<F: FnMut()>(reps: usize, mut f: F) -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        f();
        best = best.min(t.elapsed().as_secs_f64());
    }
    best
}

fn random_dense(seed: u64, indices: Vec<u32>, dims: Vec<usize>) -> DenseTensor {
    // cheap deterministic fill, good enough for timing work
    let n: usize = dims.iter().product();
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let data = (0..n)
        .map(|_| num_complex::Complex64::new(next(), next()))
        .collect();
    DenseTensor::from_data(indices, dims, data)
}

fn cmd_bench(a: BenchArgs) -> Result<u8> {
    match a.suite {
        SuiteArg::Kernels => {
            // imbalanced contractions, a large tensor against a small one,
            // plus one balanced case for contrast
            let cases: Vec<(&str, Vec<usize>, Vec<usize>, usize)> = vec![
                ("imbalanced_r16_r4", vec![2; 16], vec![2; 4], 2),
                ("imbalanced_r18_r4", vec![2; 18], vec![2; 4], 2),
                ("imbalanced_r20_r4", vec![2; 20], vec![2; 4], 2),
                ("imbalanced_r20_r6", vec![2; 20], vec![2; 6], 3),
                ("balanced_d16_r4", vec![16; 4], vec![16; 4], 2),
            ];
            let mut rows = String::from(
                "case,rank_a,rank_b,contracted,fused_secs,unfused_secs,speedup\n",
            );
            for (name, adims, bdims, nk) in cases {
                let ra = adims.len();
                let rb = bdims.len();
                let mut bdims = bdims;
                for i in 0..nk {
                    bdims[i] = adims[i];
                }
                let x = random_dense(a.seed ^ 1, (0..ra as u32).collect(), adims);
                let y = random_dense(
                    a.seed ^ 2,
                    (100..100 + rb as u32).collect(),
                    bdims,
                );
                let spec = ContractionSpec {
                    contracted: (0..nk).map(|i| (i, i)).collect(),
                    output: (nk..ra)
                        .map(OutAxis::A)
                        .chain((nk..rb).map(OutAxis::B))
                        .collect(),
                };
                contract_pair_ttgt(&x, &y, &spec)
                    .map_err(|e| anyhow!("engine: case {name}: {e}"))?;
                contract_pair_unfused(&x, &y, &spec)
                    .map_err(|e| anyhow!("engine: case {name}: {e}"))?;
                let fused = time_best(a.reps, || {
                    let _ = contract_pair_ttgt(&x, &y, &spec);
                });
                let unfused = time_best(a.reps, || {
                    let _ = contract_pair_unfused(&x, &y, &spec);
                });
                rows.push_str(&format!(
                    "{name},{ra},{rb},{nk},{fused:.6},{unfused:.6},{:.3}\n",
                    unfused / fused
                ));
            }
            let (m, hash) = manifest(
                "bench",
                json!({"suite": "kernels", "reps": a.reps}),
                &[],
                &[a.seed],
            );
            emit_text(&a.out, &rows)?;
            write_manifest_sidecar(&a.out, &m, &hash)?;
            eprintln!("bench: kernels suite done (manifest {hash})");
        }
        SuiteArg::Scaling => {
            let workers: Vec<usize> = a
                .workers
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| usage(format!("bad worker count {s:?}"))))
                .collect::<Result<_>>()?;
            if workers.is_empty() {
                return Err(usage("no worker counts given"));
            }
            let c = generate_rqc(6, 6, 16, a.seed, CircuitStyle::Cz);
            let fixed: BTreeMap<usize, u8> = (0..36).map(|q| (q, 0)).collect();
            let mut net = batch_network_cli(&c, &fixed, &[])?;
            simplify(&mut net);
            let tree = greedy_path(&net);
            let unsliced = cost_report(&net, &tree, &std::collections::BTreeSet::new());
            // aim for a few hundred tasks; deep cuts can force the slicer
            // through every index, so pick the cut by resulting task count
            let plan = [8.0, 6.0, 4.0, 2.0]
                .iter()
                .filter_map(|cut| {
                    general_slicing(&net, &tree, unsliced.log2_max_intermediate - cut).ok()
                })
                .filter(|p| (32..=4096).contains(&p.num_tasks()))
                .max_by_key(|p| p.num_tasks())
                .ok_or_else(|| anyhow!("pathopt: no slicing cut lands near 256 tasks"))?;
            let mut rows = String::from("workers,tasks,wall_secs,flops,mean_utilization\n");
            for &w in &workers {
                let mut cfg = RunConfig::default();
                cfg.workers = w.max(1);
                let report =
                    execute(&net, &tree, &plan, &cfg).map_err(|e| anyhow!("executor: {e}"))?;
                let util = report.worker_utilization.iter().sum::<f64>()
                    / report.worker_utilization.len().max(1) as f64;
                rows.push_str(&format!(
                    "{w},{},{:.6},{},{util:.3}\n",
                    report.tasks, report.wall_time, report.flops
                ));
            }
            let (m, hash) = manifest(
                "bench",
                json!({"suite": "scaling", "reps": a.reps, "workers": workers}),
                &[],
                &[a.seed],
            );
            emit_text(&a.out, &rows)?;
            write_manifest_sidecar(&a.out, &m, &hash)?;
            eprintln!("bench: scaling suite done (manifest {hash})");
        }
    }
    Ok(0)
}

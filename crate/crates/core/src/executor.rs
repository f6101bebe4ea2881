//! Runs a sliced contraction to completion: enumerates the plan's
//! independent subtasks, contracts each one along the shared schedule, and
//! reduces the per-task tensors under a small worker pool. The reduction can
//! be made bit-stable across worker counts, tasks flagged by the
//! half-precision policy are filtered out with an unbiasing rescale, and
//! long runs can checkpoint and resume.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use num_complex::Complex32;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{contract_pair_ttgt, contraction_flops, spec_from_ids};
use crate::pathopt::{step_schedule, ContractionTree, PathError, Schedule, SlicingPlan};
use crate::precision::{
    adaptive_scale, round_to_half, PathResult, PrecisionError, PrecisionFlags, ScalingState,
};
use crate::tensor::{permute, DenseTensor, IndexId, Precision, TensorError};
use crate::tensornet::TensorNetwork;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("worker count must be at least 1")]
    NoWorkers,
    #[error("bad task list: {0}")]
    BadOrdinals(String),
    #[error("task {ordinal}: assignment does not match the plan's sliced indices")]
    BadAssignment { ordinal: usize },
    #[error("{site} would hold 2^{log2_elems:.2} elements, over the 2^{cap_log2:.2} cap")]
    MemoryCap {
        site: String,
        log2_elems: f64,
        cap_log2: f64,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Precision(#[from] PrecisionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrecisionMode {
    Single,
    Mixed,
}

/// Knobs for one run. `workers` must be at least 1; the memory cap bounds
/// the largest single tensor a task may hold.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub workers: usize,
    pub precision_mode: PrecisionMode,
    /// Reduce partial sums in ascending task order through a fixed pairwise
    /// tree, making the output bit-identical across worker counts and runs.
    pub deterministic_reduce: bool,
    /// log2 of the largest element count any single materialized tensor may
    /// reach inside one task.
    pub memory_cap_log2: f64,
    pub checkpoint_path: Option<PathBuf>,
    /// Write the checkpoint every this many reduced tasks.
    pub checkpoint_every: Option<usize>,
    /// Stop once this many tasks are reduced (checkpointing if configured);
    /// for budgeted partial runs and resume tests.
    pub stop_after_tasks: Option<usize>,
    /// Mixed mode: step outputs at most this many levels above the leaves
    /// keep single-precision storage; deeper ones are rescaled and rounded
    /// to half.
    pub mixed_keep_levels: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            workers: 1,
            precision_mode: PrecisionMode::Single,
            deterministic_reduce: true,
            memory_cap_log2: 30.0,
            checkpoint_path: None,
            checkpoint_every: None,
            stop_after_tasks: None,
            mixed_keep_levels: 2,
        }
    }
}

/// One subtask of a slicing plan: every sliced index pinned to a value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceTask {
    pub assignment: BTreeMap<IndexId, usize>,
    pub task_ordinal: usize,
}

/// The `ordinal`-th subtask: the mixed-radix decoding of the ordinal over
/// the plan's dims, first sliced index most significant.
pub fn slice_task(plan: &SlicingPlan, ordinal: usize) -> SliceTask {
    debug_assert!(ordinal < plan.num_tasks().max(1));
    let mut assignment = BTreeMap::new();
    let mut rest = ordinal;
    for j in (0..plan.s).rev() {
        assignment.insert(plan.sliced_indices[j], rest % plan.dims[j]);
        rest /= plan.dims[j];
    }
    SliceTask {
        assignment,
        task_ordinal: ordinal,
    }
}

/// All subtasks in ascending ordinal order. An empty plan yields the single
/// unsliced task.
pub fn enumerate_tasks(plan: &SlicingPlan) -> Vec<SliceTask> {
    (0..plan.num_tasks()).map(|o| slice_task(plan, o)).collect()
}

/// Everything measured while contracting one slice.
#[derive(Debug, Clone)]
pub struct TaskOutcome {
    /// Tensor over the unsliced open indices, in network order. Half-stored
    /// with a scale exponent in mixed mode.
    pub tensor: DenseTensor,
    /// Range violations that lost information binary16 could have held;
    /// these decide filtering. With the stage peak rescaled into [1, 2),
    /// anything that flushes to zero sits below half of the smallest
    /// subnormal, so zero is its correctly rounded value and only overflow
    /// still poisons a path.
    pub flags: PrecisionFlags,
    /// Every raw rounding event, sub-resolution flushes included (exact
    /// cancellations leave 1e-16-scale residue that always flushes).
    pub raw_flags: PrecisionFlags,
    pub flops: u64,
    /// Largest single tensor held during the slice, in elements.
    pub peak_elems: usize,
    pub max_rank: usize,
}

impl TaskOutcome {
    /// Scalar outcomes viewed as one filterable path value.
    pub fn path_result(&self) -> Option<PathResult> {
        (self.tensor.rank() == 0).then(|| PathResult {
            value: Complex32::new(self.tensor.data[0].re as f32, self.tensor.data[0].im as f32),
            scale_exp: self.tensor.scale_exp,
            flags: self.flags,
        })
    }
}

/// Per-run state shared by every task and worker: the schedule and step
/// heights are computed once. Immutable after construction.
pub struct SliceRunner<'a> {
    net: &'a TensorNetwork,
    schedule: Schedule,
    heights: Vec<usize>,
    sliced_dims: BTreeMap<IndexId, usize>,
    mixed: bool,
    keep_levels: usize,
    cap_elems: f64,
    cap_log2: f64,
}

impl<'a> SliceRunner<'a> {
    pub fn new(
        net: &'a TensorNetwork,
        tree: &ContractionTree,
        sliced: &BTreeSet<IndexId>,
        config: &RunConfig,
    ) -> Result<Self, ExecError> {
        let schedule = step_schedule(net, tree, sliced)?;
        Ok(SliceRunner {
            net,
            schedule,
            heights: tree.step_heights(),
            sliced_dims: sliced.iter().map(|&id| (id, net.dim(id))).collect(),
            mixed: config.precision_mode == PrecisionMode::Mixed,
            keep_levels: config.mixed_keep_levels,
            cap_elems: 2f64.powf(config.memory_cap_log2),
            cap_log2: config.memory_cap_log2,
        })
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    fn check_cap(&self, elems: usize, site: impl Fn() -> String) -> Result<(), ExecError> {
        if elems as f64 > self.cap_elems * (1.0 + 1e-9) {
            return Err(ExecError::MemoryCap {
                site: site(),
                log2_elems: (elems as f64).log2(),
                cap_log2: self.cap_log2,
            });
        }
        Ok(())
    }

    /// Contract one slice. Sliced indices are pinned while each leaf tensor
    /// is built, so nothing of the unsliced size is ever held.
    pub fn run(&self, task: &SliceTask) -> Result<TaskOutcome, ExecError> {
        let pins = &task.assignment;
        let consistent = pins.len() == self.sliced_dims.len()
            && pins
                .iter()
                .all(|(id, &v)| self.sliced_dims.get(id).is_some_and(|&d| v < d));
        if !consistent {
            return Err(ExecError::BadAssignment {
                ordinal: task.task_ordinal,
            });
        }

        let n_leaves = self.schedule.leaf_nodes.len();
        let mut slots: Vec<Option<DenseTensor>> =
            Vec::with_capacity(n_leaves + self.schedule.steps.len());
        let mut flops = 0u64;
        let mut peak_elems = 0usize;
        let mut max_rank = 0usize;
        let mut flags = PrecisionFlags::default();
        let mut raw_flags = PrecisionFlags::default();
        let mut scaling = ScalingState::default();

        for (slot, &node_id) in self.schedule.leaf_nodes.iter().enumerate() {
            let t = self.net.materialize(&self.net.nodes[&node_id], pins);
            self.check_cap(t.elems(), || format!("leaf slot {slot}"))?;
            peak_elems = peak_elems.max(t.elems());
            max_rank = max_rank.max(t.rank());
            slots.push(Some(t));
        }

        for (k, step) in self.schedule.steps.iter().enumerate() {
            let a = slots[step.a_slot].take().expect("slot consumed once");
            let b = slots[step.b_slot].take().expect("slot consumed once");
            let spec = spec_from_ids(&a, &b, &step.contracted, &step.out)?;
            let out_elems: usize = spec.output_dims(&a, &b).iter().product();
            self.check_cap(out_elems, || format!("step {k}"))?;
            flops += contraction_flops(&spec, &a, &b);
            let mut out = contract_pair_ttgt(&a, &b, &spec)?;
            drop(a);
            drop(b);
            if self.mixed && self.heights[k] > self.keep_levels {
                let scaled = adaptive_scale(&out, &mut scaling);
                let (half, f) = round_to_half(&scaled);
                raw_flags.merge(f);
                flags.merge(PrecisionFlags {
                    underflow_hit: false,
                    overflow_hit: f.overflow_hit,
                });
                out = half;
            }
            peak_elems = peak_elems.max(out.elems());
            max_rank = max_rank.max(out.rank());
            slots.push(Some(out));
        }

        // the root is the last produced (or the lone leaf); every other slot
        // was consumed above
        let result = slots
            .last_mut()
            .and_then(Option::take)
            .expect("schedule leaves a root");
        let tensor = if result.indices == self.schedule.final_out {
            result
        } else {
            let perm: Vec<usize> = self
                .schedule
                .final_out
                .iter()
                .map(|id| {
                    result
                        .indices
                        .iter()
                        .position(|x| x == id)
                        .expect("open index on the root tensor")
                })
                .collect();
            permute(&result, &perm)?
        };
        Ok(TaskOutcome {
            tensor,
            flags,
            raw_flags,
            flops,
            peak_elems,
            max_rank,
        })
    }
}

/// Sum over a set of reduced tasks, resolved to single precision.
#[derive(Debug, Clone)]
pub struct PartialSum {
    pub tensor: DenseTensor,
    pub tasks_done: usize,
    pub flops: u64,
}

/// Contract one slice on its own; see [`execute`] for whole-plan runs.
pub fn run_slice(
    net: &TensorNetwork,
    tree: &ContractionTree,
    task: &SliceTask,
    config: &RunConfig,
) -> Result<PartialSum, ExecError> {
    let sliced: BTreeSet<IndexId> = task.assignment.keys().copied().collect();
    let runner = SliceRunner::new(net, tree, &sliced, config)?;
    let outcome = runner.run(task)?;
    Ok(PartialSum {
        tensor: resolve_single(outcome.tensor),
        tasks_done: 1,
        flops: outcome.flops,
    })
}

fn resolve_single(mut t: DenseTensor) -> DenseTensor {
    t.apply_scale();
    t.precision = Precision::Single;
    t
}

fn add_tensors(mut a: DenseTensor, b: &DenseTensor) -> DenseTensor {
    debug_assert_eq!(a.indices, b.indices);
    debug_assert_eq!(a.dims, b.dims);
    for (x, y) in a.data.iter_mut().zip(&b.data) {
        *x += *y;
    }
    a
}

/// Binary-counter pairwise summation. Pushing values in a fixed order gives
/// a fixed reduction tree (so bit-identical totals) with O(log n) roundoff
/// growth instead of linear.
struct FoldStack {
    /// (tree level, partial); levels strictly decrease bottom to top.
    levels: Vec<(u32, DenseTensor)>,
}

impl FoldStack {
    fn push(&mut self, mut t: DenseTensor) {
        let mut level = 0u32;
        while self.levels.last().is_some_and(|&(l, _)| l == level) {
            let (_, prev) = self.levels.pop().unwrap();
            // earlier partial on the left
            t = add_tensors(prev, &t);
            level += 1;
        }
        self.levels.push((level, t));
    }

    /// Collapse newest to oldest, the order a stream of further pushes
    /// would force.
    fn total(&self, zero: impl FnOnce() -> DenseTensor) -> DenseTensor {
        let mut it = self.levels.iter().rev();
        match it.next() {
            None => zero(),
            Some((_, top)) => {
                let mut acc = top.clone();
                for (_, t) in it {
                    acc = add_tensors(t.clone(), &acc);
                }
                acc
            }
        }
    }
}

/// Reduction-side state: the fold stack plus every counter the run report
/// needs. Restored wholesale from a checkpoint on resume.
struct Reduction {
    stack: FoldStack,
    /// Tasks reduced so far, restored prefix included.
    folded: usize,
    kept: u64,
    discarded: u64,
    flops: u64,
    peak_elems: usize,
    max_rank: usize,
    mixed: bool,
}

impl Reduction {
    fn fold(&mut self, o: TaskOutcome) {
        self.folded += 1;
        self.flops += o.flops;
        self.peak_elems = self.peak_elems.max(o.peak_elems);
        self.max_rank = self.max_rank.max(o.max_rank);
        if self.mixed && o.flags.any() {
            self.discarded += 1;
            return;
        }
        self.kept += 1;
        self.stack.push(resolve_single(o.tensor));
    }
}

/// What [`execute`] returns: the reduced amplitude tensor plus the counters
/// of the run report.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    #[serde(skip_serializing)]
    pub amplitudes: DenseTensor,
    /// Tasks in this run's scope.
    pub tasks: usize,
    pub tasks_done: usize,
    /// Tasks restored from a checkpoint rather than recomputed.
    pub resumed_from: usize,
    pub completed: bool,
    pub flops: u64,
    pub wall_time: f64,
    pub discarded_fraction: f64,
    /// Busy fraction per worker over the wall time.
    pub worker_utilization: Vec<f64>,
    /// Largest single tensor held by any task, in elements.
    pub peak_task_elems: usize,
    pub max_rank: usize,
}

struct Msg {
    worker: usize,
    pos: usize,
    secs: f64,
    result: Result<TaskOutcome, ExecError>,
}

/// Run every task of the plan and reduce. Resumes from
/// `config.checkpoint_path` when that file exists.
pub fn execute(
    net: &TensorNetwork,
    tree: &ContractionTree,
    plan: &SlicingPlan,
    config: &RunConfig,
) -> Result<RunReport, ExecError> {
    // a plan this wide cannot finish here; refuse before materializing it
    if plan.num_tasks() > 1 << 30 {
        return Err(ExecError::BadOrdinals(format!(
            "plan spans {} tasks, beyond this executor",
            plan.num_tasks()
        )));
    }
    let ordinals: Vec<usize> = (0..plan.num_tasks()).collect();
    execute_ordinals(net, tree, plan, config, &ordinals)
}

/// Run a chosen subset of task ordinals (strictly increasing). The report's
/// amplitudes are the plain sum over those tasks; fraction-of-tasks callers
/// rescale themselves.
pub fn execute_ordinals(
    net: &TensorNetwork,
    tree: &ContractionTree,
    plan: &SlicingPlan,
    config: &RunConfig,
    ordinals: &[usize],
) -> Result<RunReport, ExecError> {
    if config.workers == 0 {
        return Err(ExecError::NoWorkers);
    }
    let total = plan.num_tasks();
    if ordinals.is_empty() {
        return Err(ExecError::BadOrdinals("no tasks given".into()));
    }
    if ordinals.windows(2).any(|w| w[0] >= w[1]) || *ordinals.last().unwrap() >= total {
        return Err(ExecError::BadOrdinals(
            "ordinals must be strictly increasing and within the plan".into(),
        ));
    }
    if config.checkpoint_path.is_some() && !config.deterministic_reduce {
        return Err(ExecError::Checkpoint(
            "checkpointing requires deterministic reduction".into(),
        ));
    }

    let started = Instant::now();
    let sliced: BTreeSet<IndexId> = plan.sliced_indices.iter().copied().collect();
    let runner = SliceRunner::new(net, tree, &sliced, config)?;
    let final_out = runner.schedule().final_out.clone();
    let final_dims: Vec<usize> = final_out.iter().map(|&id| net.dim(id)).collect();

    let p_hash = plan_hash(runner.schedule(), plan);
    let c_hash = config_hash(config);
    let l_hash = list_hash(ordinals);

    let mut red = Reduction {
        stack: FoldStack { levels: Vec::new() },
        folded: 0,
        kept: 0,
        discarded: 0,
        flops: 0,
        peak_elems: 0,
        max_rank: 0,
        mixed: config.precision_mode == PrecisionMode::Mixed,
    };
    if let Some(path) = &config.checkpoint_path {
        if path.exists() {
            let st = read_checkpoint(path, &p_hash, &c_hash, &l_hash, total, ordinals, &final_out, &final_dims)?;
            red.folded = st.folded;
            red.flops = st.flops;
            red.kept = st.kept;
            red.discarded = st.discarded;
            red.peak_elems = st.peak_elems;
            red.max_rank = st.max_rank;
            red.stack.levels = st.stack;
        }
    }
    let resumed_from = red.folded;
    let stop_at = config
        .stop_after_tasks
        .map_or(ordinals.len(), |s| s.min(ordinals.len()))
        .max(resumed_from);

    let next = AtomicUsize::new(resumed_from);
    let abort = AtomicBool::new(resumed_from >= stop_at);
    let (tx, rx) = mpsc::channel::<Msg>();
    let mut busy = vec![0.0f64; config.workers];
    let mut run_error: Option<ExecError> = None;

    thread::scope(|s| {
        for w in 0..config.workers {
            let tx = tx.clone();
            let runner = &runner;
            let next = &next;
            let abort = &abort;
            s.spawn(move || loop {
                if abort.load(Ordering::Relaxed) {
                    break;
                }
                let pos = next.fetch_add(1, Ordering::Relaxed);
                if pos >= ordinals.len() {
                    break;
                }
                let task = slice_task(plan, ordinals[pos]);
                let t0 = Instant::now();
                let result = runner.run(&task);
                let secs = t0.elapsed().as_secs_f64();
                if tx
                    .send(Msg {
                        worker: w,
                        pos,
                        secs,
                        result,
                    })
                    .is_err()
                {
                    break;
                }
            });
        }
        drop(tx);

        // single-threaded reducer; workers never block on it
        let mut stash: BTreeMap<usize, TaskOutcome> = BTreeMap::new();
        while let Ok(msg) = rx.recv() {
            busy[msg.worker] += msg.secs;
            let outcome = match msg.result {
                Ok(o) => o,
                Err(e) => {
                    run_error.get_or_insert(e);
                    abort.store(true, Ordering::Relaxed);
                    continue;
                }
            };
            if run_error.is_some() || red.folded >= stop_at {
                continue; // drained, not folded
            }
            if config.deterministic_reduce {
                stash.insert(msg.pos, outcome);
                while red.folded < stop_at {
                    let Some(o) = stash.remove(&red.folded) else {
                        break;
                    };
                    red.fold(o);
                    let due = config
                        .checkpoint_every
                        .is_some_and(|k| k > 0 && red.folded % k == 0);
                    if due {
                        if let Some(path) = &config.checkpoint_path {
                            if let Err(e) = write_checkpoint(
                                path, &p_hash, &c_hash, &l_hash, total, ordinals, &red,
                            ) {
                                run_error.get_or_insert(e);
                                abort.store(true, Ordering::Relaxed);
                                break;
                            }
                        }
                    }
                }
            } else {
                red.fold(outcome);
            }
            if red.folded >= stop_at {
                abort.store(true, Ordering::Relaxed);
            }
        }
    });
    if let Some(e) = run_error {
        return Err(e);
    }

    let completed = red.folded == ordinals.len();
    if let Some(path) = &config.checkpoint_path {
        if completed {
            match fs::remove_file(path) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
                _ => {}
            }
        } else {
            write_checkpoint(path, &p_hash, &c_hash, &l_hash, total, ordinals, &red)?;
        }
    }

    if red.mixed && red.kept == 0 && red.discarded > 0 {
        return Err(PrecisionError::AllPathsDiscarded(red.discarded as usize).into());
    }
    let mut amplitudes = red
        .stack
        .total(|| DenseTensor::zeros(final_out.clone(), final_dims.clone()));
    if red.mixed && red.kept > 0 {
        // kept tasks are an unbiased sample of the reduced ones; exact 1.0
        // when nothing was discarded
        let rescale = red.folded as f64 / red.kept as f64;
        for v in &mut amplitudes.data {
            *v *= rescale;
        }
    }

    let wall_time = started.elapsed().as_secs_f64();
    let worker_utilization = busy
        .iter()
        .map(|&b| if wall_time > 0.0 { b / wall_time } else { 0.0 })
        .collect();
    Ok(RunReport {
        amplitudes,
        tasks: ordinals.len(),
        tasks_done: red.folded,
        resumed_from,
        completed,
        flops: red.flops,
        wall_time,
        discarded_fraction: if red.folded == 0 {
            0.0
        } else {
            red.discarded as f64 / red.folded as f64
        },
        worker_utilization,
        peak_task_elems: red.peak_elems,
        max_rank: red.max_rank,
    })
}

// ---- checkpoint file ----
//
// magic, version, plan/config/list hashes, counters, a bitmap of done
// ordinals (always a prefix of the task list), then the fold-stack partials
// as exact f64 dumps. Written to a temp file and renamed into place.

const CKPT_MAGIC: &[u8; 4] = b"RQCK";
const CKPT_VERSION: u32 = 1;

struct CheckpointState {
    folded: usize,
    flops: u64,
    kept: u64,
    discarded: u64,
    peak_elems: usize,
    max_rank: usize,
    stack: Vec<(u32, DenseTensor)>,
}

fn plan_hash(schedule: &Schedule, plan: &SlicingPlan) -> [u8; 32] {
    let enc = serde_json::to_vec(&(schedule, &plan.sliced_indices, &plan.dims))
        .expect("schedule serializes");
    Sha256::digest(&enc).into()
}

/// Only the settings that change the numbers; worker count and caps do not.
fn config_hash(config: &RunConfig) -> [u8; 32] {
    let enc = format!(
        "{:?}|{}|{}",
        config.precision_mode, config.deterministic_reduce, config.mixed_keep_levels
    );
    Sha256::digest(enc.as_bytes()).into()
}

fn list_hash(ordinals: &[usize]) -> [u8; 32] {
    let mut h = Sha256::new();
    for &o in ordinals {
        h.update((o as u64).to_le_bytes());
    }
    h.finalize().into()
}

fn write_tensor_f64<W: Write>(w: &mut W, t: &DenseTensor) -> std::io::Result<()> {
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in &t.dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&t.scale_exp.to_le_bytes())?;
    for v in &t.data {
        w.write_all(&v.re.to_le_bytes())?;
        w.write_all(&v.im.to_le_bytes())?;
    }
    Ok(())
}

fn rd<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn rd_u32(r: &mut impl Read) -> std::io::Result<u32> {
    Ok(u32::from_le_bytes(rd(r)?))
}

fn rd_u64(r: &mut impl Read) -> std::io::Result<u64> {
    Ok(u64::from_le_bytes(rd(r)?))
}

fn read_tensor_f64(
    r: &mut impl Read,
    indices: &[IndexId],
    dims: &[usize],
) -> Result<DenseTensor, ExecError> {
    let rank = rd_u32(r)? as usize;
    if rank != dims.len() {
        return Err(ExecError::Checkpoint(format!(
            "partial tensor rank {rank} does not match the open indices"
        )));
    }
    let mut got = Vec::with_capacity(rank);
    for _ in 0..rank {
        got.push(rd_u64(r)? as usize);
    }
    if got != dims {
        return Err(ExecError::Checkpoint("partial tensor dims mismatch".into()));
    }
    let scale_exp = i32::from_le_bytes(rd(r)?);
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let re = f64::from_le_bytes(rd(r)?);
        let im = f64::from_le_bytes(rd(r)?);
        data.push(num_complex::Complex64::new(re, im));
    }
    let mut t = DenseTensor::from_data(indices.to_vec(), dims.to_vec(), data);
    t.scale_exp = scale_exp;
    Ok(t)
}

fn write_checkpoint(
    path: &Path,
    p_hash: &[u8; 32],
    c_hash: &[u8; 32],
    l_hash: &[u8; 32],
    total: usize,
    ordinals: &[usize],
    red: &Reduction,
) -> Result<(), ExecError> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(p_hash)?;
        w.write_all(c_hash)?;
        w.write_all(l_hash)?;
        w.write_all(&(total as u64).to_le_bytes())?;
        w.write_all(&(red.folded as u64).to_le_bytes())?;
        w.write_all(&red.flops.to_le_bytes())?;
        w.write_all(&red.kept.to_le_bytes())?;
        w.write_all(&red.discarded.to_le_bytes())?;
        w.write_all(&(red.peak_elems as u64).to_le_bytes())?;
        w.write_all(&(red.max_rank as u32).to_le_bytes())?;
        let mut bitmap = vec![0u8; total.div_ceil(8)];
        for &o in &ordinals[..red.folded] {
            bitmap[o / 8] |= 1 << (o % 8);
        }
        w.write_all(&bitmap)?;
        w.write_all(&(red.stack.levels.len() as u32).to_le_bytes())?;
        for (level, t) in &red.stack.levels {
            w.write_all(&level.to_le_bytes())?;
            write_tensor_f64(&mut w, t)?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn read_checkpoint(
    path: &Path,
    p_hash: &[u8; 32],
    c_hash: &[u8; 32],
    l_hash: &[u8; 32],
    total: usize,
    ordinals: &[usize],
    final_out: &[IndexId],
    final_dims: &[usize],
) -> Result<CheckpointState, ExecError> {
    let mut r = BufReader::new(fs::File::open(path)?);
    if &rd::<4>(&mut r)? != CKPT_MAGIC {
        return Err(ExecError::Checkpoint("not a checkpoint file".into()));
    }
    let version = rd_u32(&mut r)?;
    if version != CKPT_VERSION {
        return Err(ExecError::Checkpoint(format!(
            "version {version} not supported (want {CKPT_VERSION})"
        )));
    }
    if &rd::<32>(&mut r)? != p_hash {
        return Err(ExecError::Checkpoint(
            "plan hash mismatch: written for a different network, tree, or slicing".into(),
        ));
    }
    if &rd::<32>(&mut r)? != c_hash {
        return Err(ExecError::Checkpoint(
            "config hash mismatch: precision or reduction settings differ".into(),
        ));
    }
    if &rd::<32>(&mut r)? != l_hash {
        return Err(ExecError::Checkpoint(
            "task list mismatch: written for different ordinals".into(),
        ));
    }
    if rd_u64(&mut r)? as usize != total {
        return Err(ExecError::Checkpoint("task count mismatch".into()));
    }
    let folded = rd_u64(&mut r)? as usize;
    if folded > ordinals.len() {
        return Err(ExecError::Checkpoint(
            "done count exceeds the task list".into(),
        ));
    }
    let flops = rd_u64(&mut r)?;
    let kept = rd_u64(&mut r)?;
    let discarded = rd_u64(&mut r)?;
    let peak_elems = rd_u64(&mut r)? as usize;
    let max_rank = rd_u32(&mut r)? as usize;
    if kept + discarded != folded as u64 {
        return Err(ExecError::Checkpoint("inconsistent task counters".into()));
    }
    let mut bitmap = vec![0u8; total.div_ceil(8)];
    r.read_exact(&mut bitmap)?;
    let mut want = vec![false; total];
    for &o in &ordinals[..folded] {
        want[o] = true;
    }
    for o in 0..total {
        let bit = bitmap[o / 8] >> (o % 8) & 1 == 1;
        if bit != want[o] {
            return Err(ExecError::Checkpoint(
                "done bitmap is not a prefix of the task list".into(),
            ));
        }
    }
    let stack_len = rd_u32(&mut r)? as usize;
    if stack_len > 64 {
        return Err(ExecError::Checkpoint("implausible fold stack".into()));
    }
    let mut stack = Vec::with_capacity(stack_len);
    let mut prev_level = u32::MAX;
    for _ in 0..stack_len {
        let level = rd_u32(&mut r)?;
        if level >= prev_level {
            return Err(ExecError::Checkpoint("fold stack out of order".into()));
        }
        prev_level = level;
        stack.push((level, read_tensor_f64(&mut r, final_out, final_dims)?));
    }
    Ok(CheckpointState {
        folded,
        flops,
        kept,
        discarded,
        peak_elems,
        max_rank,
        stack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{generate_rqc, CircuitStyle};
    use crate::oracle;
    use crate::pathopt::{cost_report, exact_flops, greedy_path};
    use crate::tensornet::{build_network, Payload, WorldlineOp};
    use num_complex::Complex64;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn cz_fixture(rows: usize, cols: usize, depth: usize, seed: u64) -> (crate::circuit::Circuit, TensorNetwork) {
        let c = generate_rqc(rows, cols, depth, seed, CircuitStyle::Cz);
        let fixed: BTreeMap<usize, u8> = (0..c.num_qubits()).map(|q| (q, 0u8)).collect();
        let net = build_network(&c, &fixed, &[]).unwrap();
        (c, net)
    }

    /// Plan slicing the k lowest-id internal dim-2 indices.
    fn manual_plan(net: &TensorNetwork, k: usize) -> SlicingPlan {
        let open: BTreeSet<IndexId> = net.open.iter().copied().collect();
        let sliced_indices: Vec<IndexId> = net
            .dims
            .iter()
            .filter(|&(id, &d)| d == 2 && !open.contains(id))
            .map(|(&id, _)| id)
            .take(k)
            .collect();
        assert_eq!(sliced_indices.len(), k, "fixture lacks dim-2 indices");
        SlicingPlan {
            s: k,
            dims: vec![2; k],
            sliced_indices,
            overhead_log2: 0.0,
            lattice: None,
        }
    }

    fn scalar_bits(t: &DenseTensor) -> (u64, u64) {
        assert_eq!(t.rank(), 0);
        (t.data[0].re.to_bits(), t.data[0].im.to_bits())
    }

    fn temp_ckpt(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("rqcsim-exec-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join(name);
        let _ = fs::remove_file(&path);
        path
    }

    #[test]
    fn single_h_worldline_gives_half_sqrt2() {
        let s = FRAC_1_SQRT_2;
        let mut net = TensorNetwork::new();
        net.add_node(
            vec![],
            Payload::Worldline(vec![
                WorldlineOp::Start([(1.0, 0.0), (0.0, 0.0)]),
                WorldlineOp::Unitary([(s, 0.0), (s, 0.0), (s, 0.0), (-s, 0.0)]),
                WorldlineOp::Finish([(1.0, 0.0), (0.0, 0.0)]),
            ]),
        );
        let tree = ContractionTree::linear(1);
        let report = execute(&net, &tree, &SlicingPlan::default(), &RunConfig::default()).unwrap();
        assert_eq!(report.tasks, 1);
        assert!(report.completed);
        assert_eq!(report.amplitudes.rank(), 0);
        let got = report.amplitudes.data[0];
        assert!((got - Complex64::new(s, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn tasks_enumerate_in_mixed_radix_order() {
        let plan = SlicingPlan {
            sliced_indices: vec![7, 9],
            dims: vec![2, 3],
            s: 2,
            overhead_log2: 0.0,
            lattice: None,
        };
        let tasks = enumerate_tasks(&plan);
        assert_eq!(tasks.len(), 6);
        for (i, t) in tasks.iter().enumerate() {
            assert_eq!(t.task_ordinal, i);
        }
        // first index is the most significant digit
        assert_eq!(tasks[0].assignment, BTreeMap::from([(7u32, 0usize), (9, 0)]));
        assert_eq!(tasks[1].assignment, BTreeMap::from([(7u32, 0usize), (9, 1)]));
        assert_eq!(tasks[2].assignment, BTreeMap::from([(7u32, 0usize), (9, 2)]));
        assert_eq!(tasks[3].assignment, BTreeMap::from([(7u32, 1usize), (9, 0)]));

        let unsliced = enumerate_tasks(&SlicingPlan::default());
        assert_eq!(unsliced.len(), 1);
        assert!(unsliced[0].assignment.is_empty());
    }

    #[test]
    fn sliced_tasks_sum_to_unsliced_and_match_oracle() {
        let (c, net) = cz_fixture(3, 3, 6, 11);
        let tree = greedy_path(&net);
        let cfg = RunConfig::default();

        let base = execute(&net, &tree, &SlicingPlan::default(), &cfg).unwrap();
        let plan = manual_plan(&net, 2);
        let sliced = execute(&net, &tree, &plan, &cfg).unwrap();
        assert_eq!(sliced.tasks, 4);
        assert!(sliced.completed);

        let a = base.amplitudes.data[0];
        let b = sliced.amplitudes.data[0];
        assert!((a - b).norm() <= 1e-8 * a.norm().max(1e-12));

        let sv = oracle::simulate(&c).unwrap();
        let want = sv.amplitude(&"0".repeat(9)).unwrap();
        assert!((a - want).norm() <= 1e-9 + 1e-6 * want.norm());
    }

    #[test]
    fn slice_stats_match_the_cost_report() {
        let (_, net) = cz_fixture(4, 4, 8, 5);
        let tree = greedy_path(&net);
        let report = cost_report(&net, &tree, &BTreeSet::new());
        let runner =
            SliceRunner::new(&net, &tree, &BTreeSet::new(), &RunConfig::default()).unwrap();
        let outcome = runner
            .run(&SliceTask {
                assignment: BTreeMap::new(),
                task_ordinal: 0,
            })
            .unwrap();
        assert_eq!(outcome.max_rank, report.max_rank);
        assert!(((outcome.peak_elems as f64).log2() - report.log2_max_intermediate).abs() < 1e-9);
        assert_eq!(outcome.flops as u128, exact_flops(&net, &tree, &BTreeSet::new()).unwrap());
    }

    #[test]
    fn worker_counts_reduce_bit_identically() {
        let (_, net) = cz_fixture(4, 4, 8, 5);
        let tree = greedy_path(&net);
        let plan = manual_plan(&net, 3);
        let mut seen: Option<((u64, u64), u64)> = None;
        for workers in [1usize, 2, 4, 8] {
            let cfg = RunConfig {
                workers,
                ..RunConfig::default()
            };
            let report = execute(&net, &tree, &plan, &cfg).unwrap();
            assert_eq!(report.tasks, 8);
            assert!(report.completed);
            assert_eq!(report.worker_utilization.len(), workers);
            assert!(report.peak_task_elems as f64 <= 2f64.powf(cfg.memory_cap_log2));
            let bits = scalar_bits(&report.amplitudes);
            match &seen {
                None => seen = Some((bits, report.flops)),
                Some((b, f)) => {
                    assert_eq!(bits, *b, "workers={workers} changed the amplitude bits");
                    assert_eq!(report.flops, *f);
                }
            }
        }
    }

    #[test]
    fn reported_flops_equal_analytic_sum() {
        let (_, net) = cz_fixture(4, 4, 8, 5);
        let tree = greedy_path(&net);
        let plan = manual_plan(&net, 3);
        let sliced: BTreeSet<IndexId> = plan.sliced_indices.iter().copied().collect();
        let per_slice = exact_flops(&net, &tree, &sliced).unwrap();
        let report = execute(&net, &tree, &plan, &RunConfig::default()).unwrap();
        assert_eq!(report.flops as u128, per_slice * plan.num_tasks() as u128);
    }

    #[test]
    fn arrival_order_fold_matches_on_one_worker() {
        let (_, net) = cz_fixture(3, 3, 6, 11);
        let tree = greedy_path(&net);
        let plan = manual_plan(&net, 2);
        let det = execute(&net, &tree, &plan, &RunConfig::default()).unwrap();
        let arrival = execute(
            &net,
            &tree,
            &plan,
            &RunConfig {
                deterministic_reduce: false,
                ..RunConfig::default()
            },
        )
        .unwrap();
        // one worker hands results over in ordinal order, so the two fold
        // orders coincide exactly
        assert_eq!(scalar_bits(&det.amplitudes), scalar_bits(&arrival.amplitudes));
    }

    #[test]
    fn partial_stop_reports_the_prefix_sum() {
        let (_, net) = cz_fixture(3, 3, 6, 11);
        let tree = greedy_path(&net);
        let plan = manual_plan(&net, 2);
        let cfg = RunConfig {
            stop_after_tasks: Some(2),
            ..RunConfig::default()
        };
        let report = execute(&net, &tree, &plan, &cfg).unwrap();
        assert!(!report.completed);
        assert_eq!(report.tasks_done, 2);

        let tasks = enumerate_tasks(&plan);
        let t0 = run_slice(&net, &tree, &tasks[0], &cfg).unwrap();
        let t1 = run_slice(&net, &tree, &tasks[1], &cfg).unwrap();
        let manual = t0.tensor.data[0] + t1.tensor.data[0];
        assert_eq!(
            scalar_bits(&report.amplitudes),
            (manual.re.to_bits(), manual.im.to_bits())
        );
        assert_eq!(report.flops, t0.flops + t1.flops);
    }

    #[test]
    fn checkpoint_resume_equals_uninterrupted() {
        let (_, net) = cz_fixture(4, 4, 8, 5);
        let tree = greedy_path(&net);
        let plan = manual_plan(&net, 3);
        let fresh = execute(&net, &tree, &plan, &RunConfig::default()).unwrap();

        for (name, stop) in [("resume-half.ckpt", 3usize), ("resume-zero.ckpt", 0)] {
            let path = temp_ckpt(name);
            let stopped = execute(
                &net,
                &tree,
                &plan,
                &RunConfig {
                    workers: 2,
                    checkpoint_path: Some(path.clone()),
                    stop_after_tasks: Some(stop),
                    ..RunConfig::default()
                },
            )
            .unwrap();
            assert!(!stopped.completed);
            assert_eq!(stopped.tasks_done, stop);
            assert!(path.exists());

            let resumed = execute(
                &net,
                &tree,
                &plan,
                &RunConfig {
                    workers: 2,
                    checkpoint_path: Some(path.clone()),
                    ..RunConfig::default()
                },
            )
            .unwrap();
            assert!(resumed.completed);
            assert_eq!(resumed.resumed_from, stop);
            assert_eq!(resumed.tasks_done, 8);
            assert_eq!(
                scalar_bits(&resumed.amplitudes),
                scalar_bits(&fresh.amplitudes)
            );
            assert_eq!(resumed.flops, fresh.flops);
            assert!(!path.exists(), "finished run should clear its checkpoint");
        }
    }

    #[test]
    fn checkpoint_refuses_mismatched_inputs() {
        let (_, net) = cz_fixture(3, 3, 6, 11);
        let tree = greedy_path(&net);
        let plan = manual_plan(&net, 2);
        let path = temp_ckpt("mismatch.ckpt");
        let cfg = |stop| RunConfig {
            checkpoint_path: Some(path.clone()),
            stop_after_tasks: stop,
            ..RunConfig::default()
        };
        execute(&net, &tree, &plan, &cfg(Some(1))).unwrap();

        // different tree
        let other_tree = ContractionTree::linear(net.nodes.len());
        let err = execute(&net, &other_tree, &plan, &cfg(None)).unwrap_err();
        assert!(matches!(err, ExecError::Checkpoint(_)));
        assert!(err.to_string().contains("plan hash"));

        // different precision settings
        let err = execute(
            &net,
            &tree,
            &plan,
            &RunConfig {
                precision_mode: PrecisionMode::Mixed,
                ..cfg(None)
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("config hash"));

        // arrival-order reduction cannot honour a prefix checkpoint
        let err = execute(
            &net,
            &tree,
            &plan,
            &RunConfig {
                deterministic_reduce: false,
                ..cfg(None)
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("deterministic"));
        let _ = fs::remove_file(&path);
    }

    #[test]
    fn memory_cap_reports_the_offending_step() {
        let (_, net) = cz_fixture(4, 4, 12, 11);
        let tree = greedy_path(&net);
        // cap between the largest leaf and the largest intermediate, so the
        // violation happens at a step
        let leaf_max = net
            .nodes
            .values()
            .map(|n| n.indices.iter().map(|&i| net.dim(i)).product::<usize>())
            .max()
            .unwrap();
        let cap = (leaf_max as f64).log2();
        let report = cost_report(&net, &tree, &BTreeSet::new());
        assert!(report.log2_max_intermediate > cap + 0.5, "fixture too small");
        let err = execute(
            &net,
            &tree,
            &SlicingPlan::default(),
            &RunConfig {
                memory_cap_log2: cap,
                ..RunConfig::default()
            },
        )
        .unwrap_err();
        match &err {
            ExecError::MemoryCap { site, cap_log2, .. } => {
                assert!(site.contains("step"), "site was {site}");
                assert_eq!(*cap_log2, cap);
            }
            other => panic!("expected a memory cap error, got {other}"),
        }
    }

    #[test]
    fn mixed_mode_stays_near_single_and_reduces_deterministically() {
        let (_, net) = cz_fixture(4, 4, 8, 5);
        let tree = greedy_path(&net);
        let plan = manual_plan(&net, 3);
        let single = execute(&net, &tree, &plan, &RunConfig::default()).unwrap();
        let mixed_cfg = |workers| RunConfig {
            workers,
            precision_mode: PrecisionMode::Mixed,
            ..RunConfig::default()
        };
        let mixed = execute(&net, &tree, &plan, &mixed_cfg(1)).unwrap();
        let a = single.amplitudes.data[0];
        let b = mixed.amplitudes.data[0];
        assert!(
            (a - b).norm() < 0.05 * a.norm(),
            "mixed {b} strayed from single {a}"
        );
        // per-stage rescaling keeps every rounded value in range
        assert!(mixed.discarded_fraction < 0.05);

        let mixed4 = execute(&net, &tree, &plan, &mixed_cfg(4)).unwrap();
        assert_eq!(scalar_bits(&mixed.amplitudes), scalar_bits(&mixed4.amplitudes));
    }

    #[test]
    fn reduction_drops_flagged_tasks_and_rescales() {
        let outcome = |v: f64, overflow: bool| TaskOutcome {
            tensor: DenseTensor::scalar(Complex64::new(v, 0.0)),
            flags: PrecisionFlags {
                underflow_hit: false,
                overflow_hit: overflow,
            },
            raw_flags: PrecisionFlags::default(),
            flops: 10,
            peak_elems: 1,
            max_rank: 0,
        };
        let mut red = Reduction {
            stack: FoldStack { levels: Vec::new() },
            folded: 0,
            kept: 0,
            discarded: 0,
            flops: 0,
            peak_elems: 0,
            max_rank: 0,
            mixed: true,
        };
        red.fold(outcome(1.0, false));
        red.fold(outcome(f64::MAX, true)); // poisoned value never summed
        red.fold(outcome(3.0, false));
        assert_eq!((red.folded, red.kept, red.discarded), (3, 2, 1));
        assert_eq!(red.flops, 30);
        let total = red.stack.total(|| DenseTensor::scalar(Complex64::new(0.0, 0.0)));
        // the execute-side rescale folded/kept = 3/2 would then unbias this
        assert_eq!(total.data[0], Complex64::new(4.0, 0.0));
    }

    #[test]
    fn runner_rejects_assignments_off_the_plan() {
        let (_, net) = cz_fixture(3, 3, 6, 11);
        let tree = greedy_path(&net);
        let plan = manual_plan(&net, 2);
        let sliced: BTreeSet<IndexId> = plan.sliced_indices.iter().copied().collect();
        let runner = SliceRunner::new(&net, &tree, &sliced, &RunConfig::default()).unwrap();

        let empty = SliceTask {
            assignment: BTreeMap::new(),
            task_ordinal: 9,
        };
        assert!(matches!(
            runner.run(&empty),
            Err(ExecError::BadAssignment { ordinal: 9 })
        ));

        let mut wide = enumerate_tasks(&plan)[0].assignment.clone();
        *wide.values_mut().next().unwrap() = 5; // past the dim
        assert!(matches!(
            runner.run(&SliceTask {
                assignment: wide,
                task_ordinal: 0
            }),
            Err(ExecError::BadAssignment { .. })
        ));
    }
}

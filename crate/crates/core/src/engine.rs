//! Pairwise tensor contraction kernels.
//!
//! [`contract_pair_naive`] is the correctness oracle: direct nested loops.
//! [`contract_pair_ttgt`] realizes the same contraction as
//! permute / stream / GEMM with the output transpose fused into the write
//! positions. Both accumulate each output element over the contracted
//! multi-index in the same (row-major over `spec.contracted`) order, so they
//! agree to the last bit in practice; tests still allow a small tolerance.
//!
//! Flop convention: one complex multiply-add = 8 real operations, so a
//! contraction costs `8 * prod(output dims) * prod(contracted dims)`.
//! Permutations cost 0 (data movement only).

use crate::tensor::{DenseTensor, Precision, TensorError};
use num_complex::Complex64;

/// Where an output axis comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutAxis {
    /// Axis of A that B does not share.
    A(usize),
    /// Axis of B that A does not share.
    B(usize),
    /// Axis present in both operands and kept (batch axis): positions in A
    /// and B. The output runs over the diagonal of the two axes.
    Shared(usize, usize),
}

/// Describes one pairwise contraction: which axis pairs are summed and the
/// exact order of the surviving axes in the output.
#[derive(Debug, Clone)]
pub struct ContractionSpec {
    /// (axis position in A, axis position in B) pairs to sum over.
    pub contracted: Vec<(usize, usize)>,
    /// Output axes in order.
    pub output: Vec<OutAxis>,
}

impl ContractionSpec {
    /// Checks positions, dimension agreement and exact coverage: every axis
    /// of A and B must be used exactly once across `contracted` + `output`.
    pub fn validate(&self, a: &DenseTensor, b: &DenseTensor) -> Result<(), TensorError> {
        let mut used_a = vec![0u8; a.rank()];
        let mut used_b = vec![0u8; b.rank()];
        for &(pa, pb) in &self.contracted {
            if pa >= a.rank() || pb >= b.rank() {
                return Err(TensorError::ShapeMismatch(format!(
                    "contracted positions ({pa},{pb}) out of range"
                )));
            }
            if a.dims[pa] != b.dims[pb] {
                return Err(TensorError::ShapeMismatch(format!(
                    "contracted dims differ: a[{pa}]={} b[{pb}]={}",
                    a.dims[pa], b.dims[pb]
                )));
            }
            used_a[pa] += 1;
            used_b[pb] += 1;
        }
        for ax in &self.output {
            match *ax {
                OutAxis::A(p) => {
                    if p >= a.rank() {
                        return Err(TensorError::ShapeMismatch(format!("output A({p}) out of range")));
                    }
                    used_a[p] += 1;
                }
                OutAxis::B(p) => {
                    if p >= b.rank() {
                        return Err(TensorError::ShapeMismatch(format!("output B({p}) out of range")));
                    }
                    used_b[p] += 1;
                }
                OutAxis::Shared(pa, pb) => {
                    if pa >= a.rank() || pb >= b.rank() {
                        return Err(TensorError::ShapeMismatch(format!(
                            "output Shared({pa},{pb}) out of range"
                        )));
                    }
                    if a.dims[pa] != b.dims[pb] {
                        return Err(TensorError::ShapeMismatch(format!(
                            "shared dims differ: a[{pa}]={} b[{pb}]={}",
                            a.dims[pa], b.dims[pb]
                        )));
                    }
                    used_a[pa] += 1;
                    used_b[pb] += 1;
                }
            }
        }
        if used_a.iter().any(|&u| u != 1) || used_b.iter().any(|&u| u != 1) {
            return Err(TensorError::ShapeMismatch(
                "every operand axis must appear exactly once in the spec".into(),
            ));
        }
        Ok(())
    }

    pub fn output_dims(&self, a: &DenseTensor, b: &DenseTensor) -> Vec<usize> {
        self.output
            .iter()
            .map(|ax| match *ax {
                OutAxis::A(p) => a.dims[p],
                OutAxis::B(p) | OutAxis::Shared(_, p) => b.dims[p],
            })
            .collect()
    }

    pub fn output_indices(&self, a: &DenseTensor, b: &DenseTensor) -> Vec<u32> {
        self.output
            .iter()
            .map(|ax| match *ax {
                OutAxis::A(p) => a.indices[p],
                OutAxis::B(p) | OutAxis::Shared(_, p) => b.indices[p],
            })
            .collect()
    }
}

/// Analytic cost of a contraction: 8 real flops per complex multiply-add.
pub fn contraction_flops(spec: &ContractionSpec, a: &DenseTensor, b: &DenseTensor) -> u64 {
    let k_dims: Vec<usize> = spec.contracted.iter().map(|&(pa, _)| a.dims[pa]).collect();
    flops_for_dims(&spec.output_dims(a, b), &k_dims)
}

/// Same cost formula from bare dimension lists (no tensors needed).
pub fn flops_for_dims(out_dims: &[usize], contracted_dims: &[usize]) -> u64 {
    let out: u128 = out_dims.iter().map(|&d| d as u128).product();
    let k: u128 = contracted_dims.iter().map(|&d| d as u128).product();
    u64::try_from(8u128 * out * k).expect("flop count overflows u64")
}

/// log2 of [`flops_for_dims`], usable for estimates too large to execute.
pub fn log2_flops_for_dims(out_dims: &[usize], contracted_dims: &[usize]) -> f64 {
    let bits: f64 = out_dims
        .iter()
        .chain(contracted_dims)
        .map(|&d| (d as f64).log2())
        .sum();
    3.0 + bits
}

/// Running flop total for one executor task. Monotone; permutations add 0.
#[derive(Debug, Default, Clone)]
pub struct FlopCounter {
    total: u64,
}

impl FlopCounter {
    pub fn new() -> Self {
        FlopCounter { total: 0 }
    }
    pub fn add(&mut self, flops: u64) {
        self.total += flops;
    }
    pub fn total(&self) -> u64 {
        self.total
    }
}

/// Builds a [`ContractionSpec`] from index labels. `contracted` ids must
/// appear on both operands; each `out` id on at least one (both makes it a
/// batch axis). Output axis order follows `out`.
pub fn spec_from_ids(
    a: &DenseTensor,
    b: &DenseTensor,
    contracted: &[crate::tensor::IndexId],
    out: &[crate::tensor::IndexId],
) -> Result<ContractionSpec, TensorError> {
    let pos = |t: &DenseTensor, id| t.indices.iter().position(|&x| x == id);
    let mut spec = ContractionSpec {
        contracted: Vec::with_capacity(contracted.len()),
        output: Vec::with_capacity(out.len()),
    };
    for &id in contracted {
        match (pos(a, id), pos(b, id)) {
            (Some(pa), Some(pb)) => spec.contracted.push((pa, pb)),
            _ => {
                return Err(TensorError::ShapeMismatch(format!(
                    "contracted index {id} missing from an operand"
                )))
            }
        }
    }
    for &id in out {
        match (pos(a, id), pos(b, id)) {
            (Some(pa), Some(pb)) => spec.output.push(OutAxis::Shared(pa, pb)),
            (Some(pa), None) => spec.output.push(OutAxis::A(pa)),
            (None, Some(pb)) => spec.output.push(OutAxis::B(pb)),
            (None, None) => {
                return Err(TensorError::ShapeMismatch(format!(
                    "output index {id} on neither operand"
                )))
            }
        }
    }
    Ok(spec)
}

/// Contracts two labeled tensors: shared ids are summed unless `external`
/// says they must survive (those become batch axes). Surviving axes come out
/// in ascending id order. Returns the result and its flop cost.
pub fn contract_labeled(
    a: &DenseTensor,
    b: &DenseTensor,
    external: impl Fn(crate::tensor::IndexId) -> bool,
    use_ttgt: bool,
) -> Result<(DenseTensor, u64), TensorError> {
    let in_b = |id| b.indices.contains(&id);
    let mut contracted: Vec<u32> = a
        .indices
        .iter()
        .copied()
        .filter(|&id| in_b(id) && !external(id))
        .collect();
    contracted.sort_unstable();
    let mut out: Vec<u32> = a
        .indices
        .iter()
        .chain(&b.indices)
        .copied()
        .filter(|&id| !contracted.contains(&id))
        .collect();
    out.sort_unstable();
    out.dedup();
    let spec = spec_from_ids(a, b, &contracted, &out)?;
    let flops = contraction_flops(&spec, a, b);
    let result = if use_ttgt {
        contract_pair_ttgt(a, b, &spec)?
    } else {
        contract_pair_naive(a, b, &spec)?
    };
    Ok((result, flops))
}

/// Direct nested-loop contraction; the oracle every kernel is tested against.
pub fn contract_pair_naive(
    a: &DenseTensor,
    b: &DenseTensor,
    spec: &ContractionSpec,
) -> Result<DenseTensor, TensorError> {
    spec.validate(a, b)?;
    let out_dims = spec.output_dims(a, b);
    let out_indices = spec.output_indices(a, b);
    let n_out: usize = out_dims.iter().product();
    let a_strides = DenseTensor::strides(&a.dims);
    let b_strides = DenseTensor::strides(&b.dims);

    // per-output-axis stride contributions into A and B
    let oa: Vec<usize> = spec
        .output
        .iter()
        .map(|ax| match *ax {
            OutAxis::A(p) => a_strides[p],
            OutAxis::B(_) => 0,
            OutAxis::Shared(p, _) => a_strides[p],
        })
        .collect();
    let ob: Vec<usize> = spec
        .output
        .iter()
        .map(|ax| match *ax {
            OutAxis::A(_) => 0,
            OutAxis::B(p) => b_strides[p],
            OutAxis::Shared(_, p) => b_strides[p],
        })
        .collect();
    let k_dims: Vec<usize> = spec.contracted.iter().map(|&(pa, _)| a.dims[pa]).collect();
    let ka: Vec<usize> = spec.contracted.iter().map(|&(pa, _)| a_strides[pa]).collect();
    let kb: Vec<usize> = spec.contracted.iter().map(|&(_, pb)| b_strides[pb]).collect();
    let n_k: usize = k_dims.iter().product();

    let mut data = vec![Complex64::new(0.0, 0.0); n_out];
    let out_strides = DenseTensor::strides(&out_dims);
    for (lin, slot) in data.iter_mut().enumerate() {
        let mut a_base = 0usize;
        let mut b_base = 0usize;
        let mut rem = lin;
        for (i, &os) in out_strides.iter().enumerate() {
            let c = rem / os;
            rem %= os;
            a_base += c * oa[i];
            b_base += c * ob[i];
        }
        // sum over the contracted multi-index, row-major in spec order
        let mut acc = Complex64::new(0.0, 0.0);
        let mut kc = vec![0usize; k_dims.len()];
        let mut a_off = a_base;
        let mut b_off = b_base;
        for _ in 0..n_k {
            acc += a.data[a_off] * b.data[b_off];
            for ax in (0..k_dims.len()).rev() {
                kc[ax] += 1;
                a_off += ka[ax];
                b_off += kb[ax];
                if kc[ax] < k_dims[ax] {
                    break;
                }
                a_off -= kc[ax] * ka[ax];
                b_off -= kc[ax] * kb[ax];
                kc[ax] = 0;
            }
        }
        *slot = acc;
    }
    Ok(DenseTensor {
        indices: out_indices,
        dims: out_dims,
        data,
        precision: Precision::Single,
        scale_exp: a.scale_exp + b.scale_exp,
    })
}

/// Default scratch budget for the streamed operand and output tile, chosen so
/// two operand blocks plus an output tile fit comfortably in a 256 KB local
/// buffer.
pub const DEFAULT_SCRATCH_BYTES: usize = 256 * 1024;

const ELEM_BYTES: usize = 16; // Complex64

/// Fused TTGT contraction with the default scratch budget.
pub fn contract_pair_ttgt(
    a: &DenseTensor,
    b: &DenseTensor,
    spec: &ContractionSpec,
) -> Result<DenseTensor, TensorError> {
    contract_pair_ttgt_with_scratch(a, b, spec, DEFAULT_SCRATCH_BYTES)
}

/// Fused TTGT contraction.
///
/// The smaller operand is permuted in full to a [batch, k, cols] layout. The
/// larger operand streams through a scratch buffer in row blocks, gathered
/// via precomputed position arrays; each block is multiplied by the permuted
/// operand and the result rows are scattered straight into their final
/// positions in `spec.output` order (the trailing transpose is fused into the
/// write). A budget below one GEMM tile streams a single row at a time.
pub fn contract_pair_ttgt_with_scratch(
    a: &DenseTensor,
    b: &DenseTensor,
    spec: &ContractionSpec,
    scratch_bytes: usize,
) -> Result<DenseTensor, TensorError> {
    spec.validate(a, b)?;
    let out_dims = spec.output_dims(a, b);
    let out_indices = spec.output_indices(a, b);
    let n_out: usize = out_dims.iter().product();
    let out_strides = DenseTensor::strides(&out_dims);
    let a_strides = DenseTensor::strides(&a.dims);
    let b_strides = DenseTensor::strides(&b.dims);

    // Classify axes. "rows" = output axes private to the streamed operand,
    // "cols" = output axes private to the fully permuted operand.
    let stream_is_a = a.elems() >= b.elems();

    // batch axes in output order
    struct AxisSet {
        dims: Vec<usize>,
        stream_strides: Vec<usize>, // strides into the streamed operand
        small_strides: Vec<usize>,  // strides into the permuted operand
        out_strides: Vec<usize>,    // strides into the output array
    }
    let mut batch = AxisSet {
        dims: vec![],
        stream_strides: vec![],
        small_strides: vec![],
        out_strides: vec![],
    };
    let mut rows: (Vec<usize>, Vec<usize>, Vec<usize>) = (vec![], vec![], vec![]); // dims, stream strides, out strides
    let mut cols: (Vec<usize>, Vec<usize>, Vec<usize>) = (vec![], vec![], vec![]); // dims, small strides, out strides
    for (i, ax) in spec.output.iter().enumerate() {
        match *ax {
            OutAxis::Shared(pa, pb) => {
                batch.dims.push(a.dims[pa]);
                let (sa, sb) = (a_strides[pa], b_strides[pb]);
                let (st, sm) = if stream_is_a { (sa, sb) } else { (sb, sa) };
                batch.stream_strides.push(st);
                batch.small_strides.push(sm);
                batch.out_strides.push(out_strides[i]);
            }
            OutAxis::A(p) => {
                if stream_is_a {
                    rows.0.push(a.dims[p]);
                    rows.1.push(a_strides[p]);
                    rows.2.push(out_strides[i]);
                } else {
                    cols.0.push(a.dims[p]);
                    cols.1.push(a_strides[p]);
                    cols.2.push(out_strides[i]);
                }
            }
            OutAxis::B(p) => {
                if stream_is_a {
                    cols.0.push(b.dims[p]);
                    cols.1.push(b_strides[p]);
                    cols.2.push(out_strides[i]);
                } else {
                    rows.0.push(b.dims[p]);
                    rows.1.push(b_strides[p]);
                    rows.2.push(out_strides[i]);
                }
            }
        }
    }
    let k_dims: Vec<usize> = spec.contracted.iter().map(|&(pa, _)| a.dims[pa]).collect();
    let k_stream: Vec<usize> = spec
        .contracted
        .iter()
        .map(|&(pa, pb)| if stream_is_a { a_strides[pa] } else { b_strides[pb] })
        .collect();
    let k_small: Vec<usize> = spec
        .contracted
        .iter()
        .map(|&(pa, pb)| if stream_is_a { b_strides[pb] } else { a_strides[pa] })
        .collect();

    let n_batch: usize = batch.dims.iter().product();
    let m: usize = rows.0.iter().product();
    let n: usize = cols.0.iter().product();
    let k: usize = k_dims.iter().product();

    // Row block size: one streamed block plus the matching output tile
    // should fit in the scratch budget. A budget below even one row
    // degrades to row-at-a-time streaming rather than failing.
    let per_row_bytes = (k + n) * ELEM_BYTES;
    let block_rows = (scratch_bytes / per_row_bytes.max(1)).clamp(1, m.max(1));

    // Position arrays: offsets of every row / col / k coordinate, precomputed
    // once so the gather and scatter loops do no address arithmetic.
    let row_off_stream = offsets(&rows.0, &rows.1);
    let row_off_out = offsets(&rows.0, &rows.2);
    let col_off_small = offsets(&cols.0, &cols.1);
    let col_off_out = offsets(&cols.0, &cols.2);
    let k_off_stream = offsets(&k_dims, &k_stream);
    let k_off_small = offsets(&k_dims, &k_small);
    let batch_off_stream = offsets(&batch.dims, &batch.stream_strides);
    let batch_off_small = offsets(&batch.dims, &batch.small_strides);
    let batch_off_out = offsets(&batch.dims, &batch.out_strides);

    let stream_data = if stream_is_a { &a.data } else { &b.data };
    let small_data = if stream_is_a { &b.data } else { &a.data };

    // Full permute of the smaller operand: [k][n] per batch, row-major.
    let mut small_perm = vec![Complex64::new(0.0, 0.0); k * n];
    let mut block = vec![Complex64::new(0.0, 0.0); block_rows * k];
    let mut tile = vec![Complex64::new(0.0, 0.0); block_rows * n];
    let mut out = vec![Complex64::new(0.0, 0.0); n_out];

    for bi in 0..n_batch.max(1) {
        let (bs, bm, bo) = if batch.dims.is_empty() {
            (0, 0, 0)
        } else {
            (batch_off_stream[bi], batch_off_small[bi], batch_off_out[bi])
        };
        // gather the permuted small operand for this batch coordinate
        for (ki, &ko) in k_off_small.iter().enumerate() {
            let dst = ki * n;
            for (ni, &no) in col_off_small.iter().enumerate() {
                small_perm[dst + ni] = small_data[bm + ko + no];
            }
        }
        let mut r0 = 0usize;
        while r0 < m {
            let rb = block_rows.min(m - r0);
            // gather a row block of the streamed operand into scratch
            for r in 0..rb {
                let src = bs + row_off_stream[r0 + r];
                let dst = r * k;
                for (ki, &ko) in k_off_stream.iter().enumerate() {
                    block[dst + ki] = stream_data[src + ko];
                }
            }
            // GEMM: tile[r][n] = sum_k block[r][k] * small_perm[k][n],
            // ascending k so the accumulation order matches the naive loop.
            gemm_kernel(rb, n, k, &block, &small_perm, &mut tile);
            // fused output transpose: scatter tile rows to final positions
            for r in 0..rb {
                let obase = bo + row_off_out[r0 + r];
                let trow = r * n;
                for (ni, &no) in col_off_out.iter().enumerate() {
                    out[obase + no] = tile[trow + ni];
                }
            }
            r0 += rb;
        }
    }
    Ok(DenseTensor {
        indices: out_indices,
        dims: out_dims,
        data: out,
        precision: Precision::Single,
        scale_exp: a.scale_exp + b.scale_exp,
    })
}

/// All linear offsets of the multi-index over `dims` with the given per-axis
/// strides, enumerated row-major. Empty `dims` yields a single offset 0.
fn offsets(dims: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = dims.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut coords = vec![0usize; dims.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for ax in (0..dims.len()).rev() {
            coords[ax] += 1;
            off += strides[ax];
            if coords[ax] < dims[ax] {
                break;
            }
            off -= coords[ax] * strides[ax];
            coords[ax] = 0;
        }
    }
    if out.is_empty() {
        out.push(0);
    }
    out
}

/// Permute-then-multiply reference path: both operands are materialized in
/// full as freshly permuted GEMM layouts, multiplied, and the product
/// permuted again into `spec.output` order. Same result as
/// [`contract_pair_ttgt`]; kept as the wall-time baseline the fused kernel
/// is measured against. Batch ([`OutAxis::Shared`]) axes are not supported.
pub fn contract_pair_unfused(
    a: &DenseTensor,
    b: &DenseTensor,
    spec: &ContractionSpec,
) -> Result<DenseTensor, TensorError> {
    spec.validate(a, b)?;
    if spec.output.iter().any(|ax| matches!(ax, OutAxis::Shared(..))) {
        return Err(TensorError::ShapeMismatch(
            "the unfused baseline does not batch shared axes".into(),
        ));
    }
    let a_contr: Vec<usize> = spec.contracted.iter().map(|&(pa, _)| pa).collect();
    let a_free: Vec<usize> = (0..a.rank()).filter(|p| !a_contr.contains(p)).collect();
    let perm_a: Vec<usize> = a_free.iter().chain(&a_contr).copied().collect();
    let ap = crate::tensor::permute(a, &perm_a)?;
    let b_contr: Vec<usize> = spec.contracted.iter().map(|&(_, pb)| pb).collect();
    let b_free: Vec<usize> = (0..b.rank()).filter(|p| !b_contr.contains(p)).collect();
    let perm_b: Vec<usize> = b_contr.iter().chain(&b_free).copied().collect();
    let bp = crate::tensor::permute(b, &perm_b)?;

    let m: usize = a_free.iter().map(|&p| a.dims[p]).product();
    let k: usize = a_contr.iter().map(|&p| a.dims[p]).product();
    let n: usize = b_free.iter().map(|&p| b.dims[p]).product();
    let am = DenseTensor {
        indices: vec![0, 1],
        dims: vec![m, k],
        data: ap.data,
        precision: Precision::Single,
        scale_exp: ap.scale_exp,
    };
    let bm = DenseTensor {
        indices: vec![1, 2],
        dims: vec![k, n],
        data: bp.data,
        precision: Precision::Single,
        scale_exp: bp.scale_exp,
    };
    let cm = gemm(&am, &bm)?;

    // product axes are A's free then B's free, each in operand order
    let c_axes: Vec<OutAxis> = a_free
        .iter()
        .map(|&p| OutAxis::A(p))
        .chain(b_free.iter().map(|&p| OutAxis::B(p)))
        .collect();
    let c_dims: Vec<usize> = a_free
        .iter()
        .map(|&p| a.dims[p])
        .chain(b_free.iter().map(|&p| b.dims[p]))
        .collect();
    let full = DenseTensor {
        indices: (0..c_dims.len() as u32).collect(),
        dims: c_dims,
        data: cm.data,
        precision: Precision::Single,
        scale_exp: cm.scale_exp,
    };
    let perm: Vec<usize> = spec
        .output
        .iter()
        .map(|ax| c_axes.iter().position(|c| c == ax).expect("validated axis"))
        .collect();
    let out = crate::tensor::permute(&full, &perm)?;
    Ok(DenseTensor {
        indices: spec.output_indices(a, b),
        dims: out.dims,
        data: out.data,
        precision: Precision::Single,
        scale_exp: out.scale_exp,
    })
}

/// c[m][n] = sum_k a[m][k] * b[k][n], k ascending. Blocked over k and n for
/// locality; the per-element accumulation order stays ascending in k.
fn gemm_kernel(m: usize, n: usize, k: usize, a: &[Complex64], b: &[Complex64], c: &mut [Complex64]) {
    const NB: usize = 64;
    const KB: usize = 64;
    for slot in c.iter_mut().take(m * n) {
        *slot = Complex64::new(0.0, 0.0);
    }
    let mut k0 = 0;
    while k0 < k {
        let kb = KB.min(k - k0);
        let mut n0 = 0;
        while n0 < n {
            let nb = NB.min(n - n0);
            for r in 0..m {
                let arow = r * k + k0;
                let crow = r * n + n0;
                for kk in 0..kb {
                    let av = a[arow + kk];
                    let brow = (k0 + kk) * n + n0;
                    for nn in 0..nb {
                        c[crow + nn] += av * b[brow + nn];
                    }
                }
            }
            n0 += nb;
        }
        k0 += kb;
    }
}

/// Blocked complex matrix product of two rank-2 tensors (row-major).
/// The result reuses A's row index and B's column index.
pub fn gemm(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor, TensorError> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(TensorError::ShapeMismatch("gemm wants rank-2 tensors".into()));
    }
    if a.dims[1] != b.dims[0] {
        return Err(TensorError::ShapeMismatch(format!(
            "gemm inner dims differ: {} vs {}",
            a.dims[1], b.dims[0]
        )));
    }
    let (m, k, n) = (a.dims[0], a.dims[1], b.dims[1]);
    let mut data = vec![Complex64::new(0.0, 0.0); m * n];
    gemm_kernel(m, n, k, &a.data, &b.data, &mut data);
    Ok(DenseTensor {
        indices: vec![a.indices[0], b.indices[1]],
        dims: vec![m, n],
        data,
        precision: Precision::Single,
        scale_exp: a.scale_exp + b.scale_exp,
    })
}

/// Flops of a rank-2 product under the 8-real-ops-per-complex-MAC convention.
pub fn gemm_flops(m: usize, n: usize, k: usize) -> u64 {
    8 * (m as u64) * (n as u64) * (k as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::IndexId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, indices: Vec<IndexId>, dims: Vec<usize>) -> DenseTensor {
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        DenseTensor::from_data(indices, dims, data)
    }

    fn max_rel_err(x: &DenseTensor, y: &DenseTensor) -> f64 {
        assert_eq!(x.dims, y.dims);
        let scale = x.max_abs().max(y.max_abs()).max(1e-300);
        x.data
            .iter()
            .zip(&y.data)
            .map(|(a, b)| (a - b).norm() / scale)
            .fold(0.0, f64::max)
    }

    #[test]
    fn identity_times_matrix_is_matrix() {
        let eye = DenseTensor::from_data(
            vec![0, 1],
            vec![2, 2],
            vec![
                Complex64::new(1.0, 0.0),
                Complex64::new(0.0, 0.0),
                Complex64::new(0.0, 0.0),
                Complex64::new(1.0, 0.0),
            ],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_tensor(&mut rng, vec![1, 2], vec![2, 2]);
        let spec = ContractionSpec {
            contracted: vec![(1, 0)],
            output: vec![OutAxis::A(0), OutAxis::B(1)],
        };
        let c = contract_pair_naive(&eye, &m, &spec).unwrap();
        assert_eq!(c.data, m.data);
        let g = gemm(&eye, &m).unwrap();
        assert_eq!(g.data, m.data);
    }

    #[test]
    fn rank1_dot_product() {
        let u = DenseTensor::from_data(
            vec![0],
            vec![3],
            vec![
                Complex64::new(1.0, 1.0),
                Complex64::new(2.0, 0.0),
                Complex64::new(0.0, -1.0),
            ],
        );
        let v = DenseTensor::from_data(
            vec![0],
            vec![3],
            vec![
                Complex64::new(1.0, 0.0),
                Complex64::new(0.5, 0.5),
                Complex64::new(2.0, 2.0),
            ],
        );
        let spec = ContractionSpec {
            contracted: vec![(0, 0)],
            output: vec![],
        };
        let c = contract_pair_naive(&u, &v, &spec).unwrap();
        // (1+i) + (1+i) + (-i)(2+2i) = 2+2i + 2-2i = 4
        assert!((c.data[0] - Complex64::new(4.0, 0.0)).norm() < 1e-12);
        assert_eq!(contraction_flops(&spec, &u, &v), 8 * 3);
    }

    #[test]
    fn flops_of_2x2_gemm_is_64() {
        assert_eq!(gemm_flops(2, 2, 2), 64);
    }

    #[test]
    fn gemm_matches_naive_triple_loop_37_29_41() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_tensor(&mut rng, vec![0, 1], vec![37, 29]);
        let b = random_tensor(&mut rng, vec![1, 2], vec![29, 41]);
        let g = gemm(&a, &b).unwrap();
        let spec = ContractionSpec {
            contracted: vec![(1, 0)],
            output: vec![OutAxis::A(0), OutAxis::B(1)],
        };
        let n = contract_pair_naive(&a, &b, &spec).unwrap();
        // identical k-order: expect agreement far inside the 4-ulp budget
        assert!(max_rel_err(&g, &n) < 1e-14);
    }

    #[test]
    fn worked_case_rank7_times_rank4() {
        // A[a,b,c,d,e,f,g] x B[h,a,f,i], contract {a,f} -> C[b,c,d,e,g,h,i]
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_tensor(&mut rng, vec![0, 1, 2, 3, 4, 5, 6], vec![2; 7]);
        let b = random_tensor(&mut rng, vec![7, 0, 5, 8], vec![2; 4]);
        let spec = ContractionSpec {
            contracted: vec![(0, 1), (5, 2)],
            output: vec![
                OutAxis::A(1),
                OutAxis::A(2),
                OutAxis::A(3),
                OutAxis::A(4),
                OutAxis::A(6),
                OutAxis::B(0),
                OutAxis::B(3),
            ],
        };
        let c1 = contract_pair_naive(&a, &b, &spec).unwrap();
        let c2 = contract_pair_ttgt(&a, &b, &spec).unwrap();
        assert_eq!(c1.dims, vec![2; 7]);
        assert_eq!(c1.indices, vec![1, 2, 3, 4, 6, 7, 8]);
        assert!(max_rel_err(&c1, &c2) < 1e-15);
        assert_eq!(contraction_flops(&spec, &a, &b), 8 * 128 * 4);
    }

    #[test]
    fn balanced_case_rank5_dim32_flops() {
        // two rank-5 dim-32 tensors sharing 2 contracted indices: the flop
        // formula gives 8*32^8 (the full tensors would be 17 GB, so the value
        // equality runs at dim 8 below with the same structure)
        assert_eq!(flops_for_dims(&[32; 6], &[32; 2]), 8 * 32u64.pow(8));
        assert!((log2_flops_for_dims(&[32; 6], &[32; 2]) - (3.0 + 40.0)).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dims = vec![8usize; 5];
        let a = random_tensor(&mut rng, vec![0, 1, 2, 3, 4], dims.clone());
        let b = random_tensor(&mut rng, vec![3, 4, 5, 6, 7], dims);
        let spec = ContractionSpec {
            contracted: vec![(3, 0), (4, 1)],
            output: vec![
                OutAxis::A(0),
                OutAxis::A(1),
                OutAxis::A(2),
                OutAxis::B(2),
                OutAxis::B(3),
                OutAxis::B(4),
            ],
        };
        assert_eq!(contraction_flops(&spec, &a, &b), 8 * 8u64.pow(8));
        let c1 = contract_pair_naive(&a, &b, &spec).unwrap();
        let c2 = contract_pair_ttgt(&a, &b, &spec).unwrap();
        assert!(max_rel_err(&c1, &c2) < 1e-13);
    }

    #[test]
    fn batch_axis_contracts_as_batched_gemm() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = random_tensor(&mut rng, vec![0, 1, 2], vec![3, 4, 5]);
        let b = random_tensor(&mut rng, vec![0, 2, 3], vec![3, 5, 6]);
        // index 0 batched, index 2 contracted
        let spec = ContractionSpec {
            contracted: vec![(2, 1)],
            output: vec![OutAxis::Shared(0, 0), OutAxis::A(1), OutAxis::B(2)],
        };
        let c1 = contract_pair_naive(&a, &b, &spec).unwrap();
        let c2 = contract_pair_ttgt(&a, &b, &spec).unwrap();
        assert_eq!(c1.dims, vec![3, 4, 6]);
        assert!(max_rel_err(&c1, &c2) < 1e-14);
        // hand-check one element: c[1,2,3] = sum_k a[1,2,k] b[1,k,3]
        let mut want = Complex64::new(0.0, 0.0);
        for kk in 0..5 {
            want += a.data[1 * 20 + 2 * 5 + kk] * b.data[1 * 30 + kk * 6 + 3];
        }
        assert!((c1.data[1 * 24 + 2 * 6 + 3] - want).norm() < 1e-12);
        assert_eq!(contraction_flops(&spec, &a, &b), 8 * (3 * 4 * 6) * 5);
    }

    #[test]
    fn scale_exponents_add() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut a = random_tensor(&mut rng, vec![0, 1], vec![2, 2]);
        let mut b = random_tensor(&mut rng, vec![1, 2], vec![2, 2]);
        a.scale_exp = 5;
        b.scale_exp = -3;
        let spec = ContractionSpec {
            contracted: vec![(1, 0)],
            output: vec![OutAxis::A(0), OutAxis::B(1)],
        };
        assert_eq!(contract_pair_naive(&a, &b, &spec).unwrap().scale_exp, 2);
        assert_eq!(contract_pair_ttgt(&a, &b, &spec).unwrap().scale_exp, 2);
        assert_eq!(gemm(&a, &b).unwrap().scale_exp, 2);
    }

    #[test]
    fn scratch_below_one_tile_streams_row_by_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = random_tensor(&mut rng, vec![0, 1], vec![64, 64]);
        let b = random_tensor(&mut rng, vec![1, 2], vec![64, 64]);
        let spec = ContractionSpec {
            contracted: vec![(1, 0)],
            output: vec![OutAxis::A(0), OutAxis::B(1)],
        };
        let roomy = contract_pair_ttgt(&a, &b, &spec).unwrap();
        let cramped = contract_pair_ttgt_with_scratch(&a, &b, &spec, 64).unwrap();
        assert_eq!(roomy.data, cramped.data);
    }

    #[test]
    fn imbalanced_rank20_by_rank4() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let a = random_tensor(&mut rng, (0..20).collect(), vec![2; 20]);
        let b = random_tensor(&mut rng, vec![0, 1, 20, 21], vec![2; 4]);
        let spec = ContractionSpec {
            contracted: vec![(0, 0), (1, 1)],
            output: (2..20)
                .map(OutAxis::A)
                .chain([OutAxis::B(2), OutAxis::B(3)])
                .collect(),
        };
        let c1 = contract_pair_naive(&a, &b, &spec).unwrap();
        let c2 = contract_pair_ttgt(&a, &b, &spec).unwrap();
        assert!(max_rel_err(&c1, &c2) < 1e-14);
    }

    #[test]
    fn unfused_baseline_matches_fused() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        // imbalanced, balanced, outer-product and full-contraction shapes
        let cases: Vec<(Vec<usize>, Vec<usize>, usize)> = vec![
            (vec![2; 18], vec![2, 2, 2, 2], 2),
            (vec![16, 8, 4], vec![16, 8, 4], 2),
            (vec![3, 5], vec![7], 0),
            (vec![4, 6], vec![4, 6], 2),
        ];
        for (adims, bdims, nk) in cases {
            let ra = adims.len();
            let rb = bdims.len();
            let a = random_tensor(&mut rng, (0..ra as u32).collect(), adims);
            let b = random_tensor(&mut rng, (100..100 + rb as u32).collect(), bdims);
            let mut output: Vec<OutAxis> = (nk..ra)
                .map(OutAxis::A)
                .chain((nk..rb).map(OutAxis::B))
                .collect();
            for i in (1..output.len()).rev() {
                let j = rng.random_range(0..=i);
                output.swap(i, j);
            }
            let spec = ContractionSpec {
                contracted: (0..nk).map(|i| (i, i)).collect(),
                output,
            };
            let fused = contract_pair_ttgt(&a, &b, &spec).unwrap();
            let base = contract_pair_unfused(&a, &b, &spec).unwrap();
            assert_eq!(fused.indices, base.indices);
            assert!(max_rel_err(&fused, &base) < 1e-13);
        }

        let a = random_tensor(&mut rng, vec![0, 1], vec![2, 3]);
        let b = random_tensor(&mut rng, vec![0, 2], vec![2, 3]);
        let spec = ContractionSpec {
            contracted: vec![(1, 1)],
            output: vec![OutAxis::Shared(0, 0)],
        };
        assert!(contract_pair_unfused(&a, &b, &spec).is_err());
    }

    #[test]
    fn fuzz_ttgt_equals_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for case in 0..60 {
            let dim_mode_32 = case % 2 == 0;
            let (max_rank, dim_hi) = if dim_mode_32 { (4, 6) } else { (8, 2) };
            let ra = rng.random_range(1..=max_rank);
            let rb = rng.random_range(1..=max_rank);
            let nk = rng.random_range(1..=ra.min(rb));
            let n_shared = if ra > nk && rb > nk && rng.random_range(0..3) == 0 { 1 } else { 0 };
            let adims: Vec<usize> = (0..ra).map(|_| rng.random_range(2..=dim_hi)).collect();
            let mut bdims: Vec<usize> = (0..rb).map(|_| rng.random_range(2..=dim_hi)).collect();
            for i in 0..nk {
                bdims[i] = adims[i];
            }
            if n_shared == 1 {
                bdims[nk] = adims[nk];
            }
            let a = random_tensor(&mut rng, (0..ra as u32).collect(), adims);
            let b = random_tensor(
                &mut rng,
                (100..100 + rb as u32).collect(),
                bdims,
            );
            let mut output = vec![];
            if n_shared == 1 {
                output.push(OutAxis::Shared(nk, nk));
            }
            for p in (nk + n_shared)..ra {
                output.push(OutAxis::A(p));
            }
            for p in (nk + n_shared)..rb {
                output.push(OutAxis::B(p));
            }
            // shuffle output order
            for i in (1..output.len()).rev() {
                let j = rng.random_range(0..=i);
                output.swap(i, j);
            }
            let spec = ContractionSpec {
                contracted: (0..nk).map(|i| (i, i)).collect(),
                output,
            };
            let c1 = contract_pair_naive(&a, &b, &spec).unwrap();
            let c2 = contract_pair_ttgt(&a, &b, &spec).unwrap();
            assert!(
                max_rel_err(&c1, &c2) < 1e-13,
                "case {case}: ttgt deviates from naive"
            );
        }
    }
}

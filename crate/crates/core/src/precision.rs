//! Half-precision storage emulation and the bookkeeping around it.
//!
//! The mixed mode stores intermediate tensors on the IEEE binary16 grid while
//! all arithmetic stays in wider floats: [`round_to_half`] pushes a tensor
//! onto that grid and reports whether anything fell off either end of the
//! representable range. [`adaptive_scale`] keeps magnitudes near 1 by moving
//! a power of 2 into the tensor's `scale_exp` before each rounding, so deep
//! contractions do not drift into the subnormal range. Per-task scalar
//! results carry their flags ([`PathResult`]); flagged tasks are dropped and
//! the survivors rescaled ([`filter_paths`]). [`BlockAccumulator`] groups
//! task results into fixed-size blocks and tracks how the running mixed sum
//! converges onto a reference sum ([`error_curve`]).

use num_complex::{Complex32, Complex64};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{DenseTensor, Precision};

#[derive(Debug, Error)]
pub enum PrecisionError {
    #[error("every path was filtered out (all {0} flagged underflow/overflow)")]
    AllPathsDiscarded(usize),
    #[error("reference sum is zero; relative error undefined")]
    ZeroReference,
    #[error("block accumulator holds no reference sums")]
    MissingReference,
}

/// IEEE binary16 bit pattern: 1 sign, 5 exponent (bias 15), 10 mantissa.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Half16 {
    pub bits: u16,
}

impl Half16 {
    pub const MAX: f32 = 65504.0;
    /// Smallest positive subnormal, 2^-24.
    pub const MIN_POSITIVE: f32 = 5.960_464_5e-8;

    /// Round-to-nearest-even conversion. Values above the range go to
    /// infinity, values below the smallest subnormal go to zero.
    pub fn from_single(x: f32) -> Half16 {
        let b = x.to_bits();
        let sign = ((b >> 16) & 0x8000) as u16;
        let exp32 = ((b >> 23) & 0xff) as i32;
        let mant = b & 0x007f_ffff;

        if exp32 == 0xff {
            // Inf stays Inf; NaN keeps its quiet bit so the payload is nonzero
            let mant16 = if mant == 0 { 0 } else { 0x0200 | ((mant >> 13) as u16 & 0x03ff) };
            return Half16 { bits: sign | 0x7c00 | mant16 };
        }
        let e = exp32 - 127 + 15;
        if e >= 0x1f {
            return Half16 { bits: sign | 0x7c00 };
        }
        if e <= 0 {
            // below the normal range; shift the full 24-bit significand
            if e < -10 {
                return Half16 { bits: sign }; // rounds to zero even at the halfway point
            }
            let m24 = mant | 0x0080_0000;
            let shift = (14 - e) as u32; // 14..=24
            let kept = m24 >> shift;
            let rem = m24 & ((1 << shift) - 1);
            let half = 1u32 << (shift - 1);
            let up = rem > half || (rem == half && kept & 1 == 1);
            return Half16 { bits: sign | (kept + up as u32) as u16 };
        }
        // normal range: cut the mantissa 23 -> 10 bits; a carry out of the
        // mantissa bumps the exponent and can legitimately reach Inf
        let mut out = ((e as u32) << 10) | (mant >> 13);
        let rem = mant & 0x1fff;
        if rem > 0x1000 || (rem == 0x1000 && out & 1 == 1) {
            out += 1;
        }
        Half16 { bits: sign | out as u16 }
    }

    pub fn to_single(self) -> f32 {
        let sign = ((self.bits >> 15) as u32) << 31;
        let exp = (self.bits >> 10) & 0x1f;
        let mant = (self.bits & 0x03ff) as u32;
        let out = match (exp, mant) {
            (0, 0) => sign,
            (0, _) => {
                // subnormal, value = mant * 2^-24: normalize the leading bit
                // away and rebias (lead - 24 + 127)
                let lead = 31 - mant.leading_zeros(); // 0..=9
                let exp32 = lead + 103;
                let m32 = (mant << (23 - lead)) & 0x007f_ffff;
                sign | (exp32 << 23) | m32
            }
            (0x1f, 0) => sign | 0x7f80_0000,
            (0x1f, _) => sign | 0x7f80_0000 | (mant << 13),
            _ => sign | (((exp as u32) + 127 - 15) << 23) | (mant << 13),
        };
        f32::from_bits(out)
    }
}

/// Underflow/overflow record for one rounding stage or one whole path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionFlags {
    /// Some nonzero element rounded to zero.
    pub underflow_hit: bool,
    /// Some finite element rounded to infinity.
    pub overflow_hit: bool,
}

impl PrecisionFlags {
    pub fn any(&self) -> bool {
        self.underflow_hit || self.overflow_hit
    }

    pub fn merge(&mut self, other: PrecisionFlags) {
        self.underflow_hit |= other.underflow_hit;
        self.overflow_hit |= other.overflow_hit;
    }
}

fn round_component(x: f64, flags: &mut PrecisionFlags) -> f64 {
    let h = Half16::from_single(x as f32).to_single();
    if h == 0.0 && x != 0.0 {
        flags.underflow_hit = true;
    }
    if h.is_infinite() && (x as f32).is_finite() {
        flags.overflow_hit = true;
    }
    h as f64
}

/// Push every element onto the binary16 grid (real and imaginary parts
/// independently), recording any range violations. The scale exponent is
/// untouched: rounding applies to the stored mantissas.
pub fn round_to_half(t: &DenseTensor) -> (DenseTensor, PrecisionFlags) {
    let mut flags = PrecisionFlags::default();
    let data = t
        .data
        .iter()
        .map(|v| {
            Complex64::new(round_component(v.re, &mut flags), round_component(v.im, &mut flags))
        })
        .collect();
    let out = DenseTensor {
        indices: t.indices.clone(),
        dims: t.dims.clone(),
        data,
        precision: Precision::HalfStored,
        scale_exp: t.scale_exp,
    };
    (out, flags)
}

/// Running record of the scaling applied along one contraction path.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct ScalingState {
    /// Cumulative exponent moved out of the data so far.
    pub scale_exp: i32,
    /// Largest pre-scaling magnitude observed at any stage.
    pub max_abs_seen: f64,
}

/// Move the tensor's magnitude into its scale exponent: after the call the
/// largest element magnitude lies in [1, 2) (so within the [2^-2, 2^2]
/// window that keeps binary16 rounding loss-free on the exponent side).
/// All-zero tensors pass through unchanged. Exact: only powers of 2 touch
/// the data.
pub fn adaptive_scale(t: &DenseTensor, state: &mut ScalingState) -> DenseTensor {
    let peak = t.max_abs();
    state.max_abs_seen = state.max_abs_seen.max(peak);
    if peak == 0.0 {
        state.scale_exp = t.scale_exp;
        return t.clone();
    }
    let e = peak.log2().floor() as i32;
    let factor = 2f64.powi(-e);
    let mut out = t.clone();
    for v in &mut out.data {
        *v *= factor;
    }
    out.scale_exp = t.scale_exp + e;
    state.scale_exp = out.scale_exp;
    out
}

/// One task's scalar result in mixed mode: a single-precision value, the
/// residual power-of-2 exponent, and the flags its stages accumulated.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PathResult {
    pub value: Complex32,
    pub scale_exp: i32,
    pub flags: PrecisionFlags,
}

impl PathResult {
    /// The value with its scale folded back in.
    pub fn resolved(&self) -> Complex64 {
        Complex64::new(self.value.re as f64, self.value.im as f64) * 2f64.powi(self.scale_exp)
    }
}

/// Drop flagged paths. Returns the survivors and the discarded fraction.
pub fn filter_paths(results: &[PathResult]) -> Result<(Vec<PathResult>, f64), PrecisionError> {
    let kept: Vec<PathResult> = results.iter().filter(|r| !r.flags.any()).copied().collect();
    if kept.is_empty() {
        return Err(PrecisionError::AllPathsDiscarded(results.len()));
    }
    let discarded = (results.len() - kept.len()) as f64 / results.len() as f64;
    Ok((kept, discarded))
}

/// Sum of the surviving paths, rescaled by 1/kept_fraction: dropping a
/// small fraction of equally contributing paths keeps the estimate
/// unbiased. Also returns the discarded fraction.
pub fn filtered_sum(results: &[PathResult]) -> Result<(Complex64, f64), PrecisionError> {
    let (kept, discarded) = filter_paths(results)?;
    let sum: Complex64 = kept.iter().map(|r| r.resolved()).sum();
    let rescale = results.len() as f64 / kept.len() as f64;
    Ok((sum * rescale, discarded))
}

/// Groups per-path results into fixed-size blocks, keeping the mixed sum
/// and, when provided, a reference sum per block. Single-writer; the
/// executor owns one instance on the reduction side.
#[derive(Debug, Clone)]
pub struct BlockAccumulator {
    pub block_size: usize,
    mixed_blocks: Vec<Complex64>,
    ref_blocks: Vec<Complex64>,
    cur_mixed: Complex64,
    cur_ref: Complex64,
    cur_count: usize,
    missing_reference: bool,
    total_mixed: Complex64,
}

pub const DEFAULT_BLOCK_SIZE: usize = 90;

impl Default for BlockAccumulator {
    fn default() -> Self {
        Self::new(DEFAULT_BLOCK_SIZE)
    }
}

impl BlockAccumulator {
    pub fn new(block_size: usize) -> Self {
        assert!(block_size > 0);
        BlockAccumulator {
            block_size,
            mixed_blocks: Vec::new(),
            ref_blocks: Vec::new(),
            cur_mixed: Complex64::new(0.0, 0.0),
            cur_ref: Complex64::new(0.0, 0.0),
            cur_count: 0,
            missing_reference: false,
            total_mixed: Complex64::new(0.0, 0.0),
        }
    }

    /// Add one path's mixed value without a reference; the error curve
    /// becomes unavailable.
    pub fn push(&mut self, mixed: Complex64) {
        self.missing_reference = true;
        self.push_pair(mixed, Complex64::new(0.0, 0.0));
    }

    /// Add one path's mixed value together with its reference value.
    pub fn push_pair(&mut self, mixed: Complex64, reference: Complex64) {
        self.cur_mixed += mixed;
        self.cur_ref += reference;
        self.total_mixed += mixed;
        self.cur_count += 1;
        if self.cur_count == self.block_size {
            self.mixed_blocks.push(self.cur_mixed);
            self.ref_blocks.push(self.cur_ref);
            self.cur_mixed = Complex64::new(0.0, 0.0);
            self.cur_ref = Complex64::new(0.0, 0.0);
            self.cur_count = 0;
        }
    }

    /// Completed blocks only; a partial tail block is not visible here.
    pub fn num_blocks(&self) -> usize {
        self.mixed_blocks.len()
    }

    pub fn block_sums(&self) -> &[Complex64] {
        &self.mixed_blocks
    }

    /// Sum of every pushed mixed value, tail included.
    pub fn total(&self) -> Complex64 {
        self.total_mixed
    }
}

/// Convergence of the running mixed sum onto the whole-run reference sum:
/// entry k-1 is |sum of the first k mixed blocks - reference| / |reference|.
/// Only completed blocks participate, on both sides.
pub fn error_curve(acc: &BlockAccumulator) -> Result<Vec<f64>, PrecisionError> {
    if acc.missing_reference {
        return Err(PrecisionError::MissingReference);
    }
    let reference: Complex64 = acc.ref_blocks.iter().sum();
    let denom = reference.norm();
    if denom == 0.0 {
        return Err(PrecisionError::ZeroReference);
    }
    let mut curve = Vec::with_capacity(acc.mixed_blocks.len());
    let mut prefix = Complex64::new(0.0, 0.0);
    for m in &acc.mixed_blocks {
        prefix += m;
        curve.push((prefix - reference).norm() / denom);
    }
    Ok(curve)
}

/// Slope of the least-squares line through (0, ys[0]), (1, ys[1]), ...
pub fn least_squares_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &y) in ys.iter().enumerate() {
        let dx = i as f64 - mean_x;
        num += dx * (y - mean_y);
        den += dx * dx;
    }
    num / den
}

/// CSV rendering of an error curve: `block_index,relative_error`, indices
/// counting aggregated blocks from 1.
pub fn write_error_curve_csv<W: std::io::Write>(w: &mut W, curve: &[f64]) -> std::io::Result<()> {
    writeln!(w, "block_index,relative_error")?;
    for (i, e) in curve.iter().enumerate() {
        writeln!(w, "{},{}", i + 1, e)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::IndexId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn h(x: f32) -> f32 {
        Half16::from_single(x).to_single()
    }

    #[test]
    fn decodes_anchor_bit_patterns() {
        assert_eq!(Half16 { bits: 0x3c00 }.to_single(), 1.0);
        assert_eq!(Half16 { bits: 0x0001 }.to_single(), 2f32.powi(-24));
        assert_eq!(Half16 { bits: 0x0400 }.to_single(), 2f32.powi(-14));
        assert_eq!(Half16 { bits: 0x7bff }.to_single(), 65504.0);
        assert_eq!(Half16 { bits: 0x8000 }.to_single(), 0.0);
        assert!(Half16 { bits: 0x8000 }.to_single().is_sign_negative());
        assert_eq!(Half16 { bits: 0xc000 }.to_single(), -2.0);
        assert_eq!(Half16 { bits: 0x7c00 }.to_single(), f32::INFINITY);
        assert_eq!(Half16 { bits: 0xfc00 }.to_single(), f32::NEG_INFINITY);
        assert!(Half16 { bits: 0x7e00 }.to_single().is_nan());
        assert_eq!(Half16 { bits: 0x3555 }.to_single(), 0.333251953125);
    }

    #[test]
    fn rounds_hand_values() {
        assert_eq!(h(1.0), 1.0);
        assert_eq!(h(65504.0), 65504.0);
        assert_eq!(h(1e-9), 0.0);
        assert_eq!(h(70000.0), f32::INFINITY);
        assert_eq!(h(-70000.0), f32::NEG_INFINITY);
        assert_eq!(h(1e30), f32::INFINITY);
        assert_eq!(h(-1e30), f32::NEG_INFINITY);
        // 65520 is halfway between 65504 and the next step; even goes up
        assert_eq!(h(65520.0), f32::INFINITY);
        assert_eq!(h(65519.996), 65504.0);
        // smallest subnormal and the tie just below it
        assert_eq!(h(2f32.powi(-24)), 2f32.powi(-24));
        assert_eq!(h(2f32.powi(-25)), 0.0); // tie, zero mantissa is even
        assert_eq!(h(2f32.powi(-25) * 1.0001), 2f32.powi(-24));
        assert_eq!(h(3.0 * 2f32.powi(-25)), 2f32.powi(-23)); // tie to even: 2 ulps
        assert!(h(f32::NAN).is_nan());
        assert_eq!(h(f32::INFINITY), f32::INFINITY);
        assert_eq!(h(-0.0), 0.0);
        assert!(h(-0.0).is_sign_negative());
    }

    /// Nearest representable binary16 by brute force over all bit patterns,
    /// ties to the even mantissa.
    fn nearest_by_scan(x: f32) -> f32 {
        let mut best = f32::INFINITY;
        let mut best_dist = f64::INFINITY;
        let mut best_bits = 0u16;
        for bits in 0u16..=0xffff {
            let half = Half16 { bits };
            let v = half.to_single();
            if v.is_nan() {
                continue;
            }
            // Inf is the correct rounding only past the overflow threshold;
            // the scan treats it as the value 65536 (one step past max)
            let vv = if v.is_infinite() { v.signum() * 65536.0 } else { v };
            let dist = ((x as f64) - (vv as f64)).abs();
            let better = dist < best_dist
                || (dist == best_dist && (bits & 1) == 0 && (best_bits & 1) == 1);
            if better {
                best_dist = dist;
                best = v;
                best_bits = bits;
            }
        }
        let _ = best_bits;
        best
    }

    #[test]
    fn matches_bruteforce_nearest_on_sampled_floats() {
        let mut rng = ChaCha8Rng::seed_from_u64(20260819);
        let mut cases: Vec<f32> = vec![
            0.0,
            -0.0,
            1.0,
            1.00048828125, // exactly between 1.0 and 1+2^-10
            2f32.powi(-14),
            2f32.powi(-14) * 0.9999,
            6e-8,
            5.9e-8,
            65504.0,
            65519.0,
            65520.0,
            65521.0,
            1e6,
            -1e6,
        ];
        // the scan compares exact f64 distances, so keep |x| small enough
        // that the gap to 65536 stays resolvable
        for _ in 0..400 {
            let exp = rng.random_range(-30..20);
            let mantissa: f32 = rng.random_range(1.0..2.0);
            let sign = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
            cases.push(sign * mantissa * 2f32.powi(exp));
        }
        for x in cases {
            let got = h(x);
            let want = nearest_by_scan(x);
            assert!(
                got == want || (got == 0.0 && want == 0.0),
                "x={x:e}: got {got:e}, want {want:e}"
            );
            if got == 0.0 && x != 0.0 {
                // sign must survive the underflow
                assert_eq!(got.is_sign_negative(), x.is_sign_negative(), "x={x:e}");
            }
        }
    }

    #[test]
    fn rounding_is_idempotent_on_sampled_floats() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let x: f32 = rng.random_range(-1e5..1e5);
            let once = h(x);
            assert_eq!(h(once).to_bits(), once.to_bits(), "x={x}");
        }
    }

    fn tensor_of(vals: &[f64]) -> DenseTensor {
        let data = vals.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        DenseTensor::from_data(vec![0 as IndexId], vec![vals.len()], data)
    }

    #[test]
    fn round_to_half_sets_flags_and_tag() {
        let (t, flags) = round_to_half(&tensor_of(&[1.0, 1e-9]));
        assert!(flags.underflow_hit && !flags.overflow_hit);
        assert_eq!(t.precision, Precision::HalfStored);
        assert_eq!(t.data[0], Complex64::new(1.0, 0.0));
        assert_eq!(t.data[1], Complex64::new(0.0, 0.0));

        let (t, flags) = round_to_half(&tensor_of(&[70000.0]));
        assert!(flags.overflow_hit && !flags.underflow_hit);
        assert!(t.data[0].re.is_infinite());

        let (t2, flags2) = round_to_half(&t);
        assert!(!flags2.underflow_hit && !flags2.overflow_hit); // already on the grid
        assert_eq!(t2.data[0].re, t.data[0].re);

        let imag = DenseTensor::scalar(Complex64::new(0.0, 1e-9));
        assert!(round_to_half(&imag).1.underflow_hit);
    }

    #[test]
    fn adaptive_scale_moves_magnitude_into_exponent() {
        let mut state = ScalingState::default();
        let t = tensor_of(&[2f64.powi(-20), 2f64.powi(-22)]);
        let scaled = adaptive_scale(&t, &mut state);
        assert_eq!(scaled.scale_exp, -20);
        assert_eq!(scaled.data[0], Complex64::new(1.0, 0.0));
        assert_eq!(state.max_abs_seen, 2f64.powi(-20));
        let (_, flags) = round_to_half(&scaled);
        assert!(!flags.underflow_hit, "scaling must prevent the underflow");

        // unscale reproduces the original bits exactly
        let back: Vec<Complex64> =
            scaled.data.iter().map(|v| v * 2f64.powi(scaled.scale_exp)).collect();
        assert_eq!(back, t.data);

        let zero = tensor_of(&[0.0, 0.0]);
        let z = adaptive_scale(&zero, &mut state);
        assert_eq!(z.scale_exp, 0);
        assert_eq!(z.data, zero.data);
    }

    #[test]
    fn adaptive_scale_lands_in_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let vals: Vec<f64> =
                (0..8).map(|_| rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-30..30))).collect();
            let t = tensor_of(&vals);
            if t.max_abs() == 0.0 {
                continue;
            }
            let mut state = ScalingState::default();
            let scaled = adaptive_scale(&t, &mut state);
            let peak = scaled.max_abs();
            assert!((0.25..4.0).contains(&peak), "peak {peak}");
        }
    }

    fn pr(v: f64, flagged: bool) -> PathResult {
        PathResult {
            value: Complex32::new(v as f32, 0.0),
            scale_exp: 0,
            flags: PrecisionFlags { underflow_hit: flagged, overflow_hit: false },
        }
    }

    #[test]
    fn filter_drops_flagged_and_rescales() {
        let mut results: Vec<PathResult> = (0..100).map(|i| pr(1.0 + i as f64, false)).collect();
        results[3].flags.overflow_hit = true;
        results[77].flags.underflow_hit = true;
        let (kept, discarded) = filter_paths(&results).unwrap();
        assert_eq!(kept.len(), 98);
        assert!((discarded - 0.02).abs() < 1e-15);

        let (sum, _) = filtered_sum(&results).unwrap();
        let kept_sum: f64 = (0..100)
            .filter(|i| *i != 3 && *i != 77)
            .map(|i| 1.0 + i as f64)
            .sum();
        assert!((sum.re - kept_sum * 100.0 / 98.0).abs() < 1e-9);

        let all_flagged: Vec<PathResult> = (0..5).map(|i| pr(i as f64, true)).collect();
        assert!(matches!(
            filter_paths(&all_flagged),
            Err(PrecisionError::AllPathsDiscarded(5))
        ));
    }

    #[test]
    fn scale_exp_feeds_resolved_values() {
        let r = PathResult {
            value: Complex32::new(1.5, -0.5),
            scale_exp: 3,
            flags: PrecisionFlags::default(),
        };
        assert_eq!(r.resolved(), Complex64::new(12.0, -4.0));
    }

    #[test]
    fn random_subsets_estimate_the_full_sum() {
        // dropping to a fraction f of paths and rescaling by 1/f is unbiased
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let values: Vec<Complex64> = (0..64)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let full: Complex64 = values.iter().sum();
        let mut mean = Complex64::new(0.0, 0.0);
        let trials = 4000;
        for _ in 0..trials {
            let mut est = Complex64::new(0.0, 0.0);
            let mut kept = 0usize;
            for v in &values {
                if rng.random_bool(0.5) {
                    est += v;
                    kept += 1;
                }
            }
            if kept == 0 {
                continue;
            }
            mean += est * (values.len() as f64 / kept as f64);
        }
        mean /= trials as f64;
        assert!(
            (mean - full).norm() < 0.05 * full.norm().max(1.0),
            "mean {mean} vs full {full}"
        );
    }

    #[test]
    fn block_accumulator_counts_whole_blocks() {
        let mut acc = BlockAccumulator::new(90);
        for i in 0..200 {
            let v = Complex64::new(i as f64, 0.0);
            acc.push_pair(v, v);
        }
        assert_eq!(acc.num_blocks(), 2);
        assert_eq!(acc.total(), Complex64::new((0..200).sum::<i64>() as f64, 0.0));
        let curve = error_curve(&acc).unwrap();
        assert_eq!(curve.len(), 2);
        // mixed == reference, but the reference is both blocks: the first
        // entry still reflects the missing second block
        assert!(curve[0] > 0.0);
        assert_eq!(curve[1], 0.0);
    }

    #[test]
    fn error_curve_requires_a_reference() {
        let mut acc = BlockAccumulator::new(2);
        acc.push(Complex64::new(1.0, 0.0));
        acc.push(Complex64::new(1.0, 0.0));
        assert!(matches!(error_curve(&acc), Err(PrecisionError::MissingReference)));

        let mut acc = BlockAccumulator::new(1);
        acc.push_pair(Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0));
        assert!(matches!(error_curve(&acc), Err(PrecisionError::ZeroReference)));
    }

    #[test]
    fn perturbed_sum_converges_with_nonpositive_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let mut acc = BlockAccumulator::new(90);
        for _ in 0..30 * 90 {
            let v = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let noise = 1.0 + rng.random_range(-1e-3..1e-3);
            acc.push_pair(v * noise, v);
        }
        let curve = error_curve(&acc).unwrap();
        assert_eq!(curve.len(), 30);
        let slope = least_squares_slope(&curve);
        assert!(slope <= 0.0, "slope {slope}");
        assert!(curve[29] < 0.01, "final error {}", curve[29]);
        assert!(curve[0] > curve[29], "curve must fall overall");
    }

    #[test]
    fn csv_has_header_and_rows() {
        let mut buf = Vec::new();
        write_error_curve_csv(&mut buf, &[0.5, 0.25]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "block_index,relative_error");
        assert_eq!(lines[1], "1,0.5");
        assert_eq!(lines[2], "2,0.25");
        assert_eq!(lines.len(), 3);
    }
}

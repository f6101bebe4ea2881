//! Dense complex tensors: the unit of computation for every contraction.
//!
//! A tensor is a flat row-major array of complex values plus an ordered list
//! of index ids and their dimensions. Values are carried in `Complex64`; the
//! `precision` tag records which storage grid the elements are constrained to
//! (see [`Precision`]), and `scale_exp` is a power-of-2 factor kept out of the
//! mantissas so magnitudes can stay near 1 through long contractions.

use num_complex::Complex64;
use std::io::{Read, Write};
use thiserror::Error;

/// Identifier of a tensor-network index (hyperedge). Dimensions live with the
/// tensors / network, not the id.
pub type IndexId = u32;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid permutation {perm:?} for rank {rank}")]
    InvalidPermutation { perm: Vec<usize>, rank: usize },
    #[error("tensor dump i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad tensor dump: {0}")]
    BadDump(String),
}

/// Storage grid the element values are constrained to.
///
/// `Single` elements are unconstrained working values. `HalfStored` elements
/// have been rounded through IEEE binary16, i.e. they are exactly
/// representable in half precision (after the power-of-2 scale is removed).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    Single,
    HalfStored,
}

#[derive(Debug, Clone)]
pub struct DenseTensor {
    /// Index ids, one per axis, in storage (row-major) order.
    pub indices: Vec<IndexId>,
    /// Dimension of each axis, parallel to `indices`.
    pub dims: Vec<usize>,
    /// Row-major data; `data.len() == dims.iter().product()`.
    pub data: Vec<Complex64>,
    pub precision: Precision,
    /// Logical value of element i is `data[i] * 2^scale_exp`.
    pub scale_exp: i32,
}

impl DenseTensor {
    pub fn zeros(indices: Vec<IndexId>, dims: Vec<usize>) -> Self {
        assert_eq!(indices.len(), dims.len());
        let n = dims.iter().product();
        DenseTensor {
            indices,
            dims,
            data: vec![Complex64::new(0.0, 0.0); n],
            precision: Precision::Single,
            scale_exp: 0,
        }
    }

    pub fn from_data(indices: Vec<IndexId>, dims: Vec<usize>, data: Vec<Complex64>) -> Self {
        assert_eq!(indices.len(), dims.len());
        assert_eq!(data.len(), dims.iter().product::<usize>());
        DenseTensor {
            indices,
            dims,
            data,
            precision: Precision::Single,
            scale_exp: 0,
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: Complex64) -> Self {
        DenseTensor {
            indices: vec![],
            dims: vec![],
            data: vec![value],
            precision: Precision::Single,
            scale_exp: 0,
        }
    }

    pub fn rank(&self) -> usize {
        self.indices.len()
    }

    pub fn elems(&self) -> usize {
        self.data.len()
    }

    /// Position of index `id` among the axes.
    pub fn axis_of(&self, id: IndexId) -> Option<usize> {
        self.indices.iter().position(|&i| i == id)
    }

    /// Row-major strides for `dims`.
    pub fn strides(dims: &[usize]) -> Vec<usize> {
        let mut s = vec![1usize; dims.len()];
        for i in (0..dims.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * dims[i + 1];
        }
        s
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Element value with the scale factor applied.
    pub fn logical(&self, i: usize) -> Complex64 {
        self.data[i] * 2f64.powi(self.scale_exp)
    }

    /// Fold `2^scale_exp` into the data, leaving `scale_exp == 0`.
    pub fn apply_scale(&mut self) {
        if self.scale_exp != 0 {
            let f = 2f64.powi(self.scale_exp);
            for v in &mut self.data {
                *v *= f;
            }
            self.scale_exp = 0;
            self.precision = Precision::Single;
        }
    }

    /// Fix `axis` to `value`, dropping that axis.
    pub fn pin_axis(&self, axis: usize, value: usize) -> DenseTensor {
        assert!(axis < self.rank() && value < self.dims[axis]);
        let strides = Self::strides(&self.dims);
        let mut out_indices = self.indices.clone();
        let mut out_dims = self.dims.clone();
        out_indices.remove(axis);
        out_dims.remove(axis);
        let n: usize = out_dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let out_strides = Self::strides(&out_dims);
        for lin in 0..n {
            let mut src = value * strides[axis];
            let mut rem = lin;
            for (o, &os) in out_strides.iter().enumerate() {
                let coord = rem / os;
                rem %= os;
                let src_axis = if o < axis { o } else { o + 1 };
                src += coord * strides[src_axis];
            }
            data.push(self.data[src]);
        }
        DenseTensor {
            indices: out_indices,
            dims: out_dims,
            data,
            precision: self.precision,
            scale_exp: self.scale_exp,
        }
    }
}

/// Reorder axes: axis `i` of the result is axis `perm[i]` of the input.
/// Value-preserving; moves data only.
pub fn permute(t: &DenseTensor, perm: &[usize]) -> Result<DenseTensor, TensorError> {
    let rank = t.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(TensorError::InvalidPermutation {
            perm: perm.to_vec(),
            rank,
        });
    }
    let new_dims: Vec<usize> = perm.iter().map(|&p| t.dims[p]).collect();
    let new_indices: Vec<IndexId> = perm.iter().map(|&p| t.indices[p]).collect();
    let old_strides = DenseTensor::strides(&t.dims);
    // stride of output axis i in the source array
    let src_strides: Vec<usize> = perm.iter().map(|&p| old_strides[p]).collect();
    let mut data = Vec::with_capacity(t.data.len());
    if rank == 0 {
        data.push(t.data[0]);
    } else {
        let mut coords = vec![0usize; rank];
        let mut src = 0usize;
        loop {
            data.push(t.data[src]);
            // odometer increment over new_dims
            let mut axis = rank;
            loop {
                if axis == 0 {
                    break;
                }
                axis -= 1;
                coords[axis] += 1;
                src += src_strides[axis];
                if coords[axis] < new_dims[axis] {
                    break;
                }
                src -= coords[axis] * src_strides[axis];
                coords[axis] = 0;
                if axis == 0 {
                    return Ok(DenseTensor {
                        indices: new_indices,
                        dims: new_dims,
                        data,
                        precision: t.precision,
                        scale_exp: t.scale_exp,
                    });
                }
            }
            if data.len() == t.data.len() {
                break;
            }
        }
    }
    Ok(DenseTensor {
        indices: new_indices,
        dims: new_dims,
        data,
        precision: t.precision,
        scale_exp: t.scale_exp,
    })
}

const DUMP_MAGIC: &[u8; 4] = b"TDMP";
const DUMP_VERSION: u16 = 1;

/// Serialize: header (magic, version, precision, scale_exp, rank, dims) then
/// little-endian f32 re/im pairs.
pub fn write_dump<W: Write>(t: &DenseTensor, w: &mut W) -> Result<(), TensorError> {
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&DUMP_VERSION.to_le_bytes())?;
    let prec: u8 = match t.precision {
        Precision::Single => 0,
        Precision::HalfStored => 1,
    };
    w.write_all(&[prec, 0])?;
    w.write_all(&t.scale_exp.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in &t.dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in &t.data {
        w.write_all(&(v.re as f32).to_le_bytes())?;
        w.write_all(&(v.im as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Inverse of [`write_dump`]. Index ids are not part of the format; the
/// caller re-attaches them (fixtures and checkpoints know their own axes).
pub fn read_dump<R: Read>(r: &mut R) -> Result<DenseTensor, TensorError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(TensorError::BadDump("wrong magic".into()));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    if u16::from_le_bytes(b2) != DUMP_VERSION {
        return Err(TensorError::BadDump("unsupported version".into()));
    }
    r.read_exact(&mut b2)?;
    let precision = match b2[0] {
        0 => Precision::Single,
        1 => Precision::HalfStored,
        p => return Err(TensorError::BadDump(format!("unknown precision {p}"))),
    };
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let scale_exp = i32::from_le_bytes(b4);
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 64 {
        return Err(TensorError::BadDump(format!("rank {rank} too large")));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        dims.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = dims.iter().product();
    if n > (1usize << 34) {
        return Err(TensorError::BadDump("element count implausible".into()));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b4)?;
        let re = f32::from_le_bytes(b4) as f64;
        r.read_exact(&mut b4)?;
        let im = f32::from_le_bytes(b4) as f64;
        data.push(Complex64::new(re, im));
    }
    Ok(DenseTensor {
        indices: (0..rank as u32).collect(),
        dims,
        data,
        precision,
        scale_exp,
    })
}

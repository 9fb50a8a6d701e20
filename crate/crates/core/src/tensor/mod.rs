//! Dense row-major tensors, the unit of all checkpointed state.

mod file;
mod gen;

pub use file::{decode_tensor, encode_tensor, read_tensor, write_tensor, TENSOR_FORMAT_VERSION, TENSOR_MAGIC};
pub use gen::{element_bits, fill_stream, gen_tensor, hash_str, splitmix64, stream_key, unit_value};

use half::{bf16, f16};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UcpError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
    BF16,
}

impl DType {
    pub const fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    pub const fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
            DType::BF16 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F16),
            2 => Some(DType::BF16),
            _ => None,
        }
    }
}

impl std::str::FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "f32" | "fp32" | "float32" => Ok(DType::F32),
            "f16" | "fp16" | "float16" => Ok(DType::F16),
            "bf16" | "bfloat16" => Ok(DType::BF16),
            other => Err(format!("unknown dtype `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Storage {
    F32(Vec<f32>),
    F16(Vec<f16>),
    BF16(Vec<bf16>),
}

impl Storage {
    fn len(&self) -> usize {
        match self {
            Storage::F32(v) => v.len(),
            Storage::F16(v) => v.len(),
            Storage::BF16(v) => v.len(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            Storage::F32(_) => DType::F32,
            Storage::F16(_) => DType::F16,
            Storage::BF16(_) => DType::BF16,
        }
    }

    fn zeros(dtype: DType, n: usize) -> Self {
        match dtype {
            DType::F32 => Storage::F32(vec![0.0; n]),
            DType::F16 => Storage::F16(vec![f16::ZERO; n]),
            DType::BF16 => Storage::BF16(vec![bf16::ZERO; n]),
        }
    }
}

/// Dense tensor with contiguous row-major storage.
///
/// Equality is bitwise: `-0.0 != 0.0` and identical NaN payloads compare equal.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    storage: Storage,
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::from_storage(shape, Storage::F32(data))
    }

    pub fn from_storage(shape: Vec<usize>, storage: Storage) -> Result<Self> {
        let n = numel_of(&shape);
        if storage.len() != n {
            return Err(UcpError::ShapeMismatch(format!(
                "shape {shape:?} needs {n} elements, buffer has {}",
                storage.len()
            )));
        }
        Ok(Tensor { shape, storage })
    }

    pub fn zeros(dtype: DType, shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Tensor {
            shape,
            storage: Storage::zeros(dtype, n),
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            storage: Storage::F32(vec![value]),
        }
    }

    pub fn dtype(&self) -> DType {
        self.storage.dtype()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.storage.len()
    }

    pub fn nbytes(&self) -> usize {
        self.numel() * self.dtype().width()
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.storage {
            Storage::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f32_mut(&mut self) -> Option<&mut [f32]> {
        match &mut self.storage {
            Storage::F32(v) => Some(v),
            _ => None,
        }
    }

    /// Raw bit patterns widened to u32, one per element.
    pub fn bits(&self) -> Vec<u32> {
        match &self.storage {
            Storage::F32(v) => v.iter().map(|x| x.to_bits()).collect(),
            Storage::F16(v) => v.iter().map(|x| x.to_bits() as u32).collect(),
            Storage::BF16(v) => v.iter().map(|x| x.to_bits() as u32).collect(),
        }
    }

    fn bits_at(&self, i: usize) -> u32 {
        match &self.storage {
            Storage::F32(v) => v[i].to_bits(),
            Storage::F16(v) => v[i].to_bits() as u32,
            Storage::BF16(v) => v[i].to_bits() as u32,
        }
    }

    /// First flat index where the two tensors differ bitwise, or `None` when
    /// dtype, shape and every bit pattern agree. A dtype or shape mismatch
    /// reports index 0.
    pub fn first_difference(&self, other: &Tensor) -> Option<usize> {
        if self.dtype() != other.dtype() || self.shape != other.shape {
            return Some(0);
        }
        match (&self.storage, &other.storage) {
            (Storage::F32(a), Storage::F32(b)) => a
                .iter()
                .zip(b)
                .position(|(x, y)| x.to_bits() != y.to_bits()),
            _ => (0..self.numel()).find(|&i| self.bits_at(i) != other.bits_at(i)),
        }
    }

    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.first_difference(other).is_none()
    }

    /// Row-major coordinates of a flat index.
    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut coords = vec![0; self.shape.len()];
        for (axis, &extent) in self.shape.iter().enumerate().rev() {
            if extent > 0 {
                coords[axis] = flat % extent;
                flat /= extent;
            }
        }
        coords
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if numel_of(&shape) != self.numel() {
            return Err(UcpError::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            storage: self.storage,
        })
    }

    pub fn flatten(self) -> Self {
        let n = self.numel();
        Tensor {
            shape: vec![n],
            storage: self.storage,
        }
    }

    /// Elements `[start, end)` of the flattened row-major view, as a rank-1 tensor.
    pub fn slice_flat(&self, start: usize, end: usize) -> Result<Tensor> {
        if start > end || end > self.numel() {
            return Err(UcpError::Bounds(format!(
                "flat range {start}..{end} outside 0..{}",
                self.numel()
            )));
        }
        let storage = match &self.storage {
            Storage::F32(v) => Storage::F32(v[start..end].to_vec()),
            Storage::F16(v) => Storage::F16(v[start..end].to_vec()),
            Storage::BF16(v) => Storage::BF16(v[start..end].to_vec()),
        };
        Ok(Tensor {
            shape: vec![end - start],
            storage,
        })
    }

    /// Sub-range `[start, end)` along one axis.
    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(UcpError::Bounds(format!(
                "axis {axis} on rank-{} tensor",
                self.shape.len()
            )));
        }
        if start > end || end > self.shape[axis] {
            return Err(UcpError::Bounds(format!(
                "range {start}..{end} outside axis {axis} of extent {}",
                self.shape[axis]
            )));
        }
        let outer = numel_of(&self.shape[..axis]);
        let inner = numel_of(&self.shape[axis + 1..]);
        let extent = self.shape[axis];
        let storage = match &self.storage {
            Storage::F32(v) => Storage::F32(slice_rows(v, outer, extent, inner, start, end)),
            Storage::F16(v) => Storage::F16(slice_rows(v, outer, extent, inner, start, end)),
            Storage::BF16(v) => Storage::BF16(slice_rows(v, outer, extent, inner, start, end)),
        };
        let mut shape = self.shape.clone();
        shape[axis] = end - start;
        Ok(Tensor { shape, storage })
    }

    /// Concatenates parts along `axis`. All parts share dtype, rank and every
    /// extent except `axis`.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| UcpError::ShapeMismatch("concat of zero parts".into()))?;
        let rank = first.shape.len();
        if axis >= rank {
            return Err(UcpError::Bounds(format!("concat axis {axis} on rank-{rank} tensors")));
        }
        let mut axis_total = 0;
        for p in parts {
            if p.dtype() != first.dtype() {
                return Err(UcpError::DTypeMismatch(format!(
                    "concat of {:?} and {:?}",
                    first.dtype(),
                    p.dtype()
                )));
            }
            let same_rest = p.shape.len() == rank
                && p
                    .shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(a, (x, y))| a == axis || x == y);
            if !same_rest {
                return Err(UcpError::ShapeMismatch(format!(
                    "concat along axis {axis}: {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
            axis_total += p.shape[axis];
        }
        let outer = numel_of(&first.shape[..axis]);
        let inner = numel_of(&first.shape[axis + 1..]);
        let mut shape = first.shape.clone();
        shape[axis] = axis_total;

        macro_rules! gather {
            ($variant:ident) => {{
                let mut out = Vec::with_capacity(numel_of(&shape));
                for o in 0..outer {
                    for p in parts {
                        let Storage::$variant(v) = &p.storage else { unreachable!() };
                        let chunk = p.shape[axis] * inner;
                        out.extend_from_slice(&v[o * chunk..(o + 1) * chunk]);
                    }
                }
                Storage::$variant(out)
            }};
        }
        let storage = match first.dtype() {
            DType::F32 => gather!(F32),
            DType::F16 => gather!(F16),
            DType::BF16 => gather!(BF16),
        };
        Ok(Tensor { shape, storage })
    }

    /// Converts to another dtype with round-to-nearest-even. Narrow-to-narrow
    /// casts must route through F32.
    pub fn cast(&self, to: DType) -> Result<Tensor> {
        let from = self.dtype();
        if from == to {
            return Ok(self.clone());
        }
        let storage = match (&self.storage, to) {
            (Storage::F32(v), DType::F16) => Storage::F16(v.iter().map(|&x| f16::from_f32(x)).collect()),
            (Storage::F32(v), DType::BF16) => Storage::BF16(v.iter().map(|&x| bf16::from_f32(x)).collect()),
            (Storage::F16(v), DType::F32) => Storage::F32(v.iter().map(|x| x.to_f32()).collect()),
            (Storage::BF16(v), DType::F32) => Storage::F32(v.iter().map(|x| x.to_f32()).collect()),
            _ => return Err(UcpError::UnsupportedCast { from, to }),
        };
        Ok(Tensor {
            shape: self.shape.clone(),
            storage,
        })
    }

    /// Copies `src` into the flat element range starting at `offset`.
    pub fn write_flat(&mut self, offset: usize, src: &Tensor) -> Result<()> {
        let end = offset + src.numel();
        if end > self.numel() {
            return Err(UcpError::Bounds(format!(
                "write of {} elements at {offset} into {}",
                src.numel(),
                self.numel()
            )));
        }
        match (&mut self.storage, &src.storage) {
            (Storage::F32(d), Storage::F32(s)) => d[offset..end].copy_from_slice(s),
            (Storage::F16(d), Storage::F16(s)) => d[offset..end].copy_from_slice(s),
            (Storage::BF16(d), Storage::BF16(s)) => d[offset..end].copy_from_slice(s),
            _ => {
                return Err(UcpError::DTypeMismatch(format!(
                    "write of {:?} into {:?}",
                    src.dtype(),
                    self.dtype()
                )))
            }
        }
        Ok(())
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.bit_eq(other)
    }
}

impl Eq for Tensor {}

fn slice_rows<T: Copy>(data: &[T], outer: usize, extent: usize, inner: usize, start: usize, end: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        let base = o * extent * inner;
        out.extend_from_slice(&data[base + start * inner..base + end * inner]);
    }
    out
}

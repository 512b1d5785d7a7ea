//! Dense row-major `f64` arrays and the `RGT1` tensor dump format.
//!
//! The dump format is shared by checkpoints and exported maps:
//!
//! ```text
//! "RGT1"            magic, 4 bytes
//! u32               entry count
//! per entry:
//!   u16             name length in bytes
//!   [u8]            UTF-8 name
//!   u8              rank
//!   u32 * rank      extents
//!   f64 * product   values, row-major
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("zero extent in shape {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a tensor whose length is already known to match `shape`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Zero-mean Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("standard deviation must be finite and >= 0");
        let len = shape.iter().product();
        let data = (0..len).map(|_| normal.sample(rng)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(lo..hi)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let at = self.offset(index);
        self.data[at] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                acc * d + i
            })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sub-tensor at `index` along the leading axis.
    pub fn outer(&self, index: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() > 1 {
            self.shape[1..].to_vec()
        } else {
            vec![1]
        };
        Tensor {
            shape,
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

/// Writes named tensors in the `RGT1` dump format.
pub fn write_dump<W: Write>(mut out: W, entries: &[(String, Tensor)]) -> Result<()> {
    out.write_all(b"RGT1")?;
    out.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        let name_len = u16::try_from(bytes.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        out.write_all(&name_len.to_le_bytes())?;
        out.write_all(bytes)?;
        let rank = u8::try_from(tensor.rank())
            .map_err(|_| Error::Format(format!("rank too large for {name}")))?;
        out.write_all(&[rank])?;
        for &extent in tensor.shape() {
            let extent = u32::try_from(extent)
                .map_err(|_| Error::Format(format!("extent too large for {name}")))?;
            out.write_all(&extent.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(tensor.len() * 8);
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads an `RGT1` dump, preserving entry order.
pub fn read_dump<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != b"RGT1" {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let count = read_u32(&mut input)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len = [0u8; 2];
        input.read_exact(&mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let mut rank = [0u8; 1];
        input.read_exact(&mut rank)?;
        let shape = (0..rank[0])
            .map(|_| read_u32(&mut input).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let mut raw = vec![0u8; len * 8];
        input.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        entries.push((name, tensor));
    }
    Ok(entries)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn dump_layout_is_little_endian() {
        let t = Tensor::new(&[2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_dump(&mut buf, &[("ab".to_string(), t)]).unwrap();
        assert_eq!(&buf[..4], b"RGT1");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..10], &2u16.to_le_bytes());
        assert_eq!(&buf[10..12], b"ab");
        assert_eq!(buf[12], 1);
        assert_eq!(&buf[13..17], &2u32.to_le_bytes());
        assert_eq!(&buf[17..25], &1.0f64.to_le_bytes());
        assert_eq!(&buf[25..33], &(-2.5f64).to_le_bytes());
        assert_eq!(buf.len(), 33);
    }

    #[test]
    fn dump_rejects_bad_magic() {
        assert!(read_dump(&b"XXXX\0\0\0\0"[..]).is_err());
    }

    proptest! {
        #[test]
        fn dump_round_trips(
            dims in prop::collection::vec(1usize..4, 1..4),
            seed in any::<u64>(),
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::randn(&dims, 3.0, &mut rng);
            let entries = vec![("layer.w".to_string(), t.clone()), ("ß".to_string(), Tensor::scalar(seed as f64))];
            let mut buf = Vec::new();
            write_dump(&mut buf, &entries).unwrap();
            let back = read_dump(&buf[..]).unwrap();
            prop_assert_eq!(back, entries);
        }
    }
}

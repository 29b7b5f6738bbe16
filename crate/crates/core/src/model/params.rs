//! Named parameter storage and the on-disk blob encoding.
//!
//! A blob is a little-endian header (`rank: u64`, then `rank` dimensions as
//! `u64`) followed by the `f32` values in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered collection of named tensors. Registration order is the canonical
/// order used by the optimizer and by checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    params: Vec<Param>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, shape, data });
        ParamId(self.params.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.params[id.0].data
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.params[id.0].data
    }

    pub fn find(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn find_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Same names and shapes, all values zero.
    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![0.0; p.data.len()],
                })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for p in &mut self.params {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Bitwise equality of every value (distinguishes `0.0` from `-0.0`, equates NaNs).
    pub fn bitwise_eq(&self, other: &ParameterSet) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.shape == b.shape
                    && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Checks that `other` carries exactly the names and shapes of `self`.
    pub fn check_layout(&self, other: &ParameterSet) -> Result<()> {
        for p in &self.params {
            match other.find(&p.name) {
                None => {
                    return Err(Error::ShapeMismatch {
                        name: p.name.clone(),
                        expected: p.shape.clone(),
                        found: Vec::new(),
                    })
                }
                Some(q) if q.shape != p.shape => {
                    return Err(Error::ShapeMismatch {
                        name: p.name.clone(),
                        expected: p.shape.clone(),
                        found: q.shape.clone(),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = other.params.iter().find(|q| self.find(&q.name).is_none()) {
            return Err(Error::ShapeMismatch {
                name: extra.name.clone(),
                expected: Vec::new(),
                found: extra.shape.clone(),
            });
        }
        Ok(())
    }

    /// Writes one `<name>.bin` blob per parameter into `dir`.
    pub fn save_blobs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for p in &self.params {
            write_blob(&dir.join(format!("{}.bin", p.name)), &p.shape, &p.data)?;
        }
        Ok(())
    }

    /// Reads blobs for every parameter of `layout` from `dir`, checking shapes.
    pub fn load_blobs(layout: &ParameterSet, dir: &Path) -> Result<ParameterSet> {
        let mut out = layout.clone();
        for p in &mut out.params {
            let path = dir.join(format!("{}.bin", p.name));
            let (shape, data) = read_blob(&path)?;
            if shape != p.shape {
                return Err(Error::ShapeMismatch {
                    name: p.name.clone(),
                    expected: p.shape.clone(),
                    found: shape,
                });
            }
            p.data = data;
        }
        Ok(out)
    }
}

pub fn encode_blob(shape: &[usize], data: &[f32]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 * (shape.len() + 1) + 4 * data.len());
    buf.extend_from_slice(&(shape.len() as u64).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn write_blob(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let buf = encode_blob(shape, data);
    let mut f = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn decode_blob(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let read_u64 = |off: usize| -> Option<u64> {
        bytes
            .get(off..off + 8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    };
    let rank = read_u64(0).ok_or_else(|| corrupt("missing rank header".into()))?;
    if rank > 8 {
        return Err(corrupt(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for i in 0..rank as usize {
        let d = read_u64(8 + 8 * i).ok_or_else(|| corrupt("truncated dimension header".into()))?;
        shape.push(usize::try_from(d).map_err(|_| corrupt(format!("dimension {d} overflows")))?);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| corrupt("element count overflows".into()))?;
    let header = 8 * (rank as usize + 1);
    let body = &bytes[header.min(bytes.len())..];
    if body.len() != count * 4 {
        return Err(corrupt(format!(
            "expected {} payload bytes, found {}",
            count * 4,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, data))
}

pub fn read_blob(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_blob(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_header_layout() {
        let bytes = encode_blob(&[2, 3], &[1.0; 6]);
        assert_eq!(bytes.len(), 8 * 3 + 4 * 6);
        assert_eq!(&bytes[..8], &2u64.to_le_bytes());
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &3u64.to_le_bytes());
        assert_eq!(&bytes[24..28], &1.0f32.to_le_bytes());
    }

    #[test]
    fn truncated_blob_is_corrupt() {
        let bytes = encode_blob(&[4], &[1.0, 2.0, 3.0, 4.0]);
        for cut in [0, 5, 12, bytes.len() - 1] {
            let err = decode_blob(&bytes[..cut], Path::new("x.bin")).unwrap_err();
            assert!(matches!(err, Error::Corrupt { .. }), "cut {cut}: {err}");
        }
        let (shape, data) = decode_blob(&bytes, Path::new("x.bin")).unwrap();
        assert_eq!(shape, vec![4]);
        assert_eq!(data, vec![1.0, 2.0, 3.0, 4.0]);
    }
}

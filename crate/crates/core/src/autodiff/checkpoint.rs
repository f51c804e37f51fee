//! Named-tensor container.
//!
//! Layout (little-endian): magic `GBNT`, `u32` version, `u32` metadata length
//! and UTF-8 metadata, `u32` tensor count, then per tensor: `u32` name length,
//! UTF-8 name, `u8` dtype (1 = f64), `u32` rank, `u64` extents, payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GBNT";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

pub fn save_tensors(path: &Path, metadata: &str, tensors: &[NamedTensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_str(&mut w, metadata)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        write_str(&mut w, &t.name)?;
        w.write_all(&[DTYPE_F64])?;
        w.write_all(&(t.value.ndim() as u32).to_le_bytes())?;
        for &d in t.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.value.as_standard_layout().iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<(String, Vec<NamedTensor>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a tensor checkpoint",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let metadata = read_str(&mut r)?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_str(&mut r)?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        if dtype[0] != DTYPE_F64 {
            return Err(Error::Format(format!(
                "tensor {name}: unknown dtype {}",
                dtype[0]
            )));
        }
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let value = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Format(e.to_string()))?;
        tensors.push(NamedTensor { name, value });
    }
    Ok((metadata, tensors))
}

impl ParamSet {
    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                value: p.value.clone(),
            })
            .collect()
    }

    /// Overwrites every parameter from `tensors`, which must carry exactly
    /// the same names and shapes.
    pub fn load_named(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        if tensors.len() != self.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                self.len()
            )));
        }
        for t in tensors {
            let idx = self
                .index_of(&t.name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {}", t.name)))?;
            let p = self.get_mut(idx);
            if p.value.shape() != t.value.shape() {
                return Err(Error::Format(format!(
                    "tensor {}: shape {:?}, expected {:?}",
                    t.name,
                    t.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.value.clone();
        }
        Ok(())
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut ps = ParamSet::new();
        ps.add(
            "a",
            arr2(&[[1.0, 2.0], [3.0, f64::MIN_POSITIVE]]).into_dyn(),
            true,
        );
        ps.add("b", ArrayD::from_elem(vec![3], -0.25), false);
        save_tensors(&path, "{\"k\":1}", &ps.to_named()).unwrap();
        let (meta, ts) = load_tensors(&path).unwrap();
        assert_eq!(meta, "{\"k\":1}");
        let mut other = ps.clone();
        other.get_mut(0).value.fill(0.0);
        other.load_named(&ts).unwrap();
        assert_eq!(other, ps);

        let mut wrong = ParamSet::new();
        wrong.add("a", ArrayD::zeros(vec![2, 3]), true);
        wrong.add("b", ArrayD::zeros(vec![3]), true);
        assert!(wrong.load_named(&ts).is_err());
        let mut renamed = ParamSet::new();
        renamed.add("a", ArrayD::zeros(vec![2, 2]), true);
        renamed.add("c", ArrayD::zeros(vec![3]), true);
        assert!(renamed.load_named(&ts).is_err());
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, b"hello world").unwrap();
        assert!(load_tensors(&path).is_err());
    }
}

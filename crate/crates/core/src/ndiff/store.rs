use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndiff::tensor::{Dtype, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"TTLV";
const FORMAT_VERSION: u32 = 1;

/// Named parameter tensors. Keys are dotted paths such as
/// `"decoder.lstm1.w_ih"`; iteration order is always sorted so that
/// serialization and optimizer sweeps are deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore<S> {
    entries: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        ParameterStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<S>> {
        self.entries.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Copies every entry of `other`, overwriting on name collision.
    pub fn merge(&mut self, other: ParameterStore<S>) {
        self.entries.extend(other.entries);
    }

    /// A store with the same names and shapes, all zeros. Used to
    /// accumulate gradients.
    pub fn zeros_like(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        ParameterStore { entries }
    }

    pub fn cast<T: Scalar>(&self) -> ParameterStore<T> {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), v.cast::<T>()))
            .collect();
        ParameterStore { entries }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        write_u32(&mut out, FORMAT_VERSION);
        write_u32(&mut out, self.entries.len() as u32);
        for (name, tensor) in &self.entries {
            write_entry(&mut out, name, tensor);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic()?;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {version}"
            )));
        }
        let count = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let (name, tensor) = read_entry::<S>(&mut r)?;
            entries.insert(name, tensor);
        }
        r.expect_end()?;
        Ok(ParameterStore { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Global L2 norm over all entries.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|t| t.sq_norm())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: S) {
        for t in self.entries.values_mut() {
            for v in t.data_mut() {
                *v = *v * factor;
            }
        }
    }
}

/// Content tag carried by feature containers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureRole {
    Mel,
    Mcc,
    F0,
    Ctx,
    Emb,
}

impl FeatureRole {
    pub fn tag(self) -> u8 {
        match self {
            FeatureRole::Mel => 1,
            FeatureRole::Mcc => 2,
            FeatureRole::F0 => 3,
            FeatureRole::Ctx => 4,
            FeatureRole::Emb => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            1 => FeatureRole::Mel,
            2 => FeatureRole::Mcc,
            3 => FeatureRole::F0,
            4 => FeatureRole::Ctx,
            5 => FeatureRole::Emb,
            other => return Err(Error::Format(format!("unknown feature role tag {other}"))),
        })
    }

    pub fn entry_name(self) -> &'static str {
        match self {
            FeatureRole::Mel => "mel",
            FeatureRole::Mcc => "mcc",
            FeatureRole::F0 => "f0",
            FeatureRole::Ctx => "ctx",
            FeatureRole::Emb => "emb",
        }
    }
}

/// Writes a single-tensor feature file: the checkpoint container with a
/// role tag byte after the version field.
pub fn save_feature(path: &Path, role: FeatureRole, tensor: &Tensor<f32>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    write_u32(&mut out, FORMAT_VERSION);
    out.push(role.tag());
    write_u32(&mut out, 1);
    write_entry(&mut out, role.entry_name(), tensor);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_feature(path: &Path, expected: FeatureRole) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&bytes);
    r.expect_magic()?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported container version {version}",
            path.display()
        )));
    }
    let role = FeatureRole::from_tag(r.u8()?)?;
    if role != expected {
        return Err(Error::Format(format!(
            "{}: expected {:?} feature, found {:?}",
            path.display(),
            expected,
            role
        )));
    }
    let count = r.u32()?;
    if count != 1 {
        return Err(Error::Format(format!(
            "{}: feature file must hold one entry, found {count}",
            path.display()
        )));
    }
    let (_, tensor) = read_entry::<f32>(&mut r)?;
    r.expect_end()?;
    Ok(tensor)
}

fn write_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_entry<S: Scalar>(out: &mut Vec<u8>, name: &str, tensor: &Tensor<S>) {
    write_u16(out, name.len() as u16);
    out.extend_from_slice(name.as_bytes());
    out.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        write_u32(out, d as u32);
    }
    out.push(S::DTYPE.tag());
    for &v in tensor.data() {
        v.write_le(out);
    }
}

fn read_entry<S: Scalar>(r: &mut Reader) -> Result<(String, Tensor<S>)> {
    let name_len = r.u16()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::Format("entry name is not valid UTF-8".into()))?;
    let rank = r.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let dtype = Dtype::from_tag(r.u8()?)?;
    let len: usize = shape.iter().product();
    let raw = r.take(len * dtype.size_bytes())?;
    let mut data = Vec::with_capacity(len);
    match dtype {
        Dtype::F32 => {
            for chunk in raw.chunks_exact(4) {
                data.push(S::from_f64(f32::read_le(chunk) as f64));
            }
        }
        Dtype::F64 => {
            for chunk in raw.chunks_exact(8) {
                data.push(S::from_f64(f64::read_le(chunk)));
            }
        }
    }
    let tensor = Tensor::from_vec(&shape, data)?;
    Ok((name, tensor))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated container: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn expect_magic(&mut self) -> Result<()> {
        let m = self.take(4)?;
        if m != MAGIC {
            return Err(Error::Format("bad magic, not a TTLV container".into()));
        }
        Ok(())
    }

    fn expect_end(&mut self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last entry",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParameterStore<f32> {
        let mut ps = ParameterStore::new();
        ps.insert(
            "b.weight",
            Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.25, -0.5]).unwrap(),
        );
        ps.insert("a.bias", Tensor::from_vec(&[2], vec![0.125, 9.0]).unwrap());
        ps
    }

    #[test]
    fn roundtrip_preserves_entries() {
        let ps = sample_store();
        let bytes = ps.to_bytes();
        let back = ParameterStore::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(ps, back);
    }

    #[test]
    fn serialization_is_sorted_and_deterministic() {
        let ps = sample_store();
        let mut ps2 = ParameterStore::new();
        // Insert in the opposite order; bytes must match.
        ps2.insert("a.bias", ps.get("a.bias").unwrap().clone());
        ps2.insert("b.weight", ps.get("b.weight").unwrap().clone());
        assert_eq!(ps.to_bytes(), ps2.to_bytes());
    }

    #[test]
    fn header_layout() {
        let mut ps = ParameterStore::<f32>::new();
        ps.insert("x", Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let b = ps.to_bytes();
        assert_eq!(&b[0..4], b"TTLV");
        assert_eq!(u32::from_le_bytes([b[4], b[5], b[6], b[7]]), 1); // version
        assert_eq!(u32::from_le_bytes([b[8], b[9], b[10], b[11]]), 1); // count
        assert_eq!(u16::from_le_bytes([b[12], b[13]]), 1); // name len
        assert_eq!(b[14], b'x');
        assert_eq!(b[15], 1); // rank
        assert_eq!(u32::from_le_bytes([b[16], b[17], b[18], b[19]]), 1); // dim
        assert_eq!(b[20], 1); // f32 tag
        assert_eq!(&b[21..25], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 25);
    }

    #[test]
    fn truncated_container_is_rejected() {
        let ps = sample_store();
        let bytes = ps.to_bytes();
        let err = ParameterStore::<f32>::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn f64_roundtrip_through_f32_load() {
        let mut ps = ParameterStore::<f64>::new();
        ps.insert("v", Tensor::from_vec(&[2], vec![1.5, -2.5]).unwrap());
        let back = ParameterStore::<f32>::from_bytes(&ps.to_bytes()).unwrap();
        assert_eq!(back.get("v").unwrap().data(), &[1.5f32, -2.5]);
    }

    #[test]
    fn feature_roundtrip_and_role_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ttlv");
        let t = Tensor::from_vec(&[2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        save_feature(&path, FeatureRole::Mel, &t).unwrap();
        let back = load_feature(&path, FeatureRole::Mel).unwrap();
        assert_eq!(back, t);
        let err = load_feature(&path, FeatureRole::F0).unwrap_err();
        assert!(err.to_string().contains("expected F0"));
    }
}

//! On-disk tensor cache.
//!
//! File layout (all integers little-endian):
//! `b"SSTN"` | version u16 | dtype u8 | ndim u8 | shape u64*ndim |
//! key hash [32] | payload length u64 | payload sha256 [32] | payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::error::{invalid_input, Error, Result};

pub const CACHE_ENV: &str = "SOURCESPACE_CACHE";
const MAGIC: &[u8; 4] = b"SSTN";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::checked(shape, TensorData::F64(data))
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::checked(shape, TensorData::U8(data))
    }

    fn checked(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = shape.iter().product();
        let len = match &data {
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        };
        if n != len {
            return Err(invalid_input(format!(
                "shape {shape:?} needs {n} elements, got {len}"
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Ok(v),
            TensorData::U8(_) => Err(invalid_input("expected an f64 tensor")),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            TensorData::F64(_) => Err(invalid_input("expected a u8 tensor")),
        }
    }

    fn dtype(&self) -> u8 {
        match self.data {
            TensorData::F64(_) => 1,
            TensorData::U8(_) => 2,
        }
    }

    fn payload(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::U8(v) => v.clone(),
        }
    }
}

/// Identifies one cached tensor: location plus every parameter it depends on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheKey {
    pub dataset: String,
    pub subject: String,
    pub session: String,
    pub params: BTreeMap<String, String>,
}

impl CacheKey {
    pub fn new(dataset: &str, subject: &str, session: &str) -> Self {
        Self {
            dataset: dataset.into(),
            subject: subject.into(),
            session: session.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, k: &str, v: impl ToString) -> Self {
        self.params.insert(k.into(), v.to_string());
        self
    }

    pub fn canonical(&self) -> String {
        let mut s = format!("{}\n{}\n{}\n", self.dataset, self.subject, self.session);
        for (k, v) in &self.params {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }

    /// Hex prefix of the parameter hash used as the file name.
    pub fn param_hash(&self) -> String {
        self.digest()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Cache {
    pub root: PathBuf,
}

impl Cache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Root from the environment variable, else `./cache`.
    pub fn from_env() -> Self {
        Self::new(
            std::env::var_os(CACHE_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("cache")),
        )
    }

    pub fn path(&self, key: &CacheKey) -> PathBuf {
        self.root
            .join(&key.dataset)
            .join(&key.subject)
            .join(&key.session)
            .join(format!("{}.tns", key.param_hash()))
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.path(key).is_file()
    }

    pub fn store(&self, key: &CacheKey, t: &Tensor) -> Result<PathBuf> {
        let path = self.path(key);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let payload = t.payload();
        let mut buf = Vec::with_capacity(payload.len() + 96 + 8 * t.shape.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(t.dtype());
        buf.push(u8::try_from(t.shape.len()).map_err(|_| invalid_input("too many dimensions"))?);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.extend_from_slice(&key.digest());
        buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        buf.extend_from_slice(&Sha256::digest(&payload));
        buf.extend_from_slice(&payload);
        // Write-then-rename so readers never see a partial file.
        let tmp = path.with_extension("tns.tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn load(&self, key: &CacheKey) -> Result<Tensor> {
        let path = self.path(key);
        let bytes = fs::read(&path)?;
        decode(&bytes, key).map_err(|reason| Error::CorruptCache {
            path: path.display().to_string(),
            reason,
        })
    }

    /// `Ok(None)` when absent; corrupt files are still errors.
    pub fn try_load(&self, key: &CacheKey) -> Result<Option<Tensor>> {
        if self.contains(key) {
            self.load(key).map(Some)
        } else {
            Ok(None)
        }
    }
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.b.len())
            .ok_or("truncated file")?;
        let s = &self.b[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8], key: &CacheKey) -> std::result::Result<Tensor, String> {
    let mut r = Reader { b: bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let dtype = r.take(1)?[0];
    let ndim = r.take(1)?[0] as usize;
    let shape = (0..ndim)
        .map(|_| r.u64().map(|d| d as usize))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if r.take(32)? != key.digest() {
        return Err("key hash mismatch".into());
    }
    let len = r.u64()? as usize;
    let checksum = r.take(32)?.to_vec();
    let payload = r.take(len)?;
    if r.at != bytes.len() {
        return Err("trailing bytes".into());
    }
    if Sha256::digest(payload).as_slice() != checksum.as_slice() {
        return Err("checksum mismatch".into());
    }
    let n: usize = shape.iter().product();
    let data = match dtype {
        1 if len == 8 * n => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        2 if len == n => TensorData::U8(payload.to_vec()),
        1 | 2 => return Err("payload length disagrees with shape".into()),
        d => return Err(format!("unknown dtype {d}")),
    };
    Ok(Tensor { shape, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key() -> CacheKey {
        CacheKey::new("ds", "sub", "ses")
            .with("snr", 3)
            .with("method", "min_norm")
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let c = Cache::new(dir.path());
        let vals = vec![
            0.1,
            -0.0,
            f64::MIN_POSITIVE,
            1e300,
            std::f64::consts::PI,
            -7.25,
        ];
        let t = Tensor::f64(vec![2, 3], vals.clone()).unwrap();
        let p = c.store(&key(), &t).unwrap();
        assert!(p.ends_with(format!("ds/sub/ses/{}.tns", key().param_hash())));
        let back = c.load(&key()).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.as_f64().unwrap()), bits(&vals));
        assert_eq!(back.shape, vec![2, 3]);
        let u = Tensor::u8(vec![4], vec![0, 1, 1, 0]).unwrap();
        let k2 = key().with("kind", "labels");
        c.store(&k2, &u).unwrap();
        assert_eq!(c.load(&k2).unwrap(), u);
    }

    #[test]
    fn snr_changes_the_entry() {
        let a = key();
        let b = key().with("snr", 5);
        assert_ne!(a.param_hash(), b.param_hash());
        let dir = tempfile::tempdir().unwrap();
        let c = Cache::new(dir.path());
        assert_ne!(c.path(&a), c.path(&b));
    }

    #[test]
    fn truncated_and_tampered_files_are_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let c = Cache::new(dir.path());
        let p = c
            .store(&key(), &Tensor::f64(vec![3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(c.load(&key()), Err(Error::CorruptCache { .. })));
        let mut t = bytes.clone();
        *t.last_mut().unwrap() ^= 1;
        fs::write(&p, &t).unwrap();
        let err = c.load(&key()).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(Tensor::f64(vec![2, 2], vec![1.0]).is_err());
    }
}

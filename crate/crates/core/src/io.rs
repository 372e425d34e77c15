//! Binary tensor files and dataset directories.
//!
//! Layout: `DDGT`, u32 version, u32 tensor count, then per tensor a u16
//! name length, UTF-8 name, u8 rank, u64 dims, u8 dtype (0 = f32,
//! 1 = f64) and the little-endian payload. All integers are little-endian.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::{DomainSample, SyntheticDatasetConfig};
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"DDGT";
pub const VERSION: u32 = 1;

/// A tensor of either supported precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    /// Convert into `T`; fails if the stored precision differs.
    pub fn into_scalar<T: Scalar>(self, name: &str) -> Result<Tensor<T>> {
        match (&self, T::DTYPE) {
            (AnyTensor::F32(t), DType::F32) => Ok(t.cast()),
            (AnyTensor::F64(t), DType::F64) => Ok(t.cast()),
            _ => Err(Error::Format(format!(
                "tensor '{name}' stored as {:?}, expected {:?}",
                self.dtype(),
                T::DTYPE
            ))),
        }
    }

    /// Values widened to f64, for integer-coded metadata.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            AnyTensor::F32(t) => t.data().iter().map(|&v| v as f64).collect(),
            AnyTensor::F64(t) => t.data().to_vec(),
        }
    }
}

impl<T: Scalar> From<Tensor<T>> for AnyTensor {
    fn from(t: Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }
}

pub type NamedTensor = (String, AnyTensor);

pub fn encode_tensors(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Format(format!("rank too large: {name}")))?;
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(t.dtype() as u8);
        match t {
            AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!("truncated file while reading {what} at byte {}", self.pos))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn read_payload<T: Scalar>(r: &mut Reader<'_>, shape: &[usize], name: &str) -> Result<Tensor<T>> {
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("tensor '{name}' is too large")))?;
    let bytes = n
        .checked_mul(T::DTYPE.size())
        .ok_or_else(|| Error::Format(format!("tensor '{name}' is too large")))?;
    let raw = r.take(bytes, name)?;
    let data = raw.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a tensor file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u64("dims")?;
            shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?);
        }
        let dtype = DType::from_byte(r.u8("dtype")?)
            .ok_or_else(|| Error::Format(format!("tensor '{name}' has unknown dtype")))?;
        let t = match dtype {
            DType::F32 => AnyTensor::F32(read_payload(&mut r, &shape, &name)?),
            DType::F64 => AnyTensor::F64(read_payload(&mut r, &shape, &name)?),
        };
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn write_tensor_file(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let bytes = encode_tensors(tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn take_named(tensors: &mut Vec<NamedTensor>, name: &str) -> Result<AnyTensor> {
    let pos = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))?;
    Ok(tensors.remove(pos).1)
}

pub const MANIFEST: &str = "manifest.txt";

fn split_file(domain: usize) -> String {
    format!("domain{domain}.ddgt")
}

/// Write a dataset as `manifest.txt` (config echo and per-file SHA-256)
/// plus one tensor file per domain holding `images`, `labels`, `domains`.
pub fn save_dataset(dir: &Path, config: &SyntheticDatasetConfig, samples: &[DomainSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_text = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
    let mut manifest = String::from("format=ddg-dataset\nversion=1\n");
    manifest.push_str(&format!("config={}\n", config_text.escape_default()));
    manifest.push_str(&format!("domains={}\n", config.num_domains));
    for d in 0..config.num_domains {
        let split: Vec<&DomainSample> = samples.iter().filter(|s| s.domain == Some(d)).collect();
        if split.is_empty() {
            return Err(Error::Validation(format!("domain {d} has no samples")));
        }
        let (images, labels) = crate::data::stack_samples(&split)?;
        let codes: Vec<f64> = split.iter().map(|s| s.domain_code() as f64).collect();
        let tensors = vec![
            ("images".to_string(), AnyTensor::F32(images)),
            ("labels".to_string(), AnyTensor::F32(labels)),
            ("domains".to_string(), AnyTensor::F64(Tensor::from_vec(&[codes.len()], codes)?)),
        ];
        let bytes = encode_tensors(&tensors)?;
        let name = split_file(d);
        manifest.push_str(&format!("sha256.{name}={}\n", sha256_hex(&bytes)));
        let path = dir.join(&name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

fn unescape(s: &str) -> String {
    let mut out = String::new();
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            Some('u') => {
                let hex: String = chars.by_ref().skip(1).take_while(|&c| c != '}').collect();
                if let Some(c) = u32::from_str_radix(&hex, 16).ok().and_then(char::from_u32) {
                    out.push(c);
                }
            }
            Some(other) => out.push(other),
            None => {}
        }
    }
    out
}

/// Parse `key=value` lines, ignoring blanks and `#` comments.
pub fn parse_key_values(text: &str) -> Vec<(String, String)> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.trim().to_string(), v.trim().to_string())))
        .collect()
}

/// Load a dataset directory written by [`save_dataset`], verifying hashes.
pub fn load_dataset(dir: &Path) -> Result<(SyntheticDatasetConfig, Vec<DomainSample>)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let kv = parse_key_values(&text);
    let get = |k: &str| {
        kv.iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("manifest lacks '{k}'")))
    };
    if get("format")? != "ddg-dataset" || get("version")? != "1" {
        return Err(Error::Format("unsupported dataset manifest".into()));
    }
    let config: SyntheticDatasetConfig =
        toml::from_str(&unescape(get("config")?)).map_err(|e| Error::Format(format!("manifest config: {e}")))?;
    let mut samples = Vec::new();
    for d in 0..config.num_domains {
        let name = split_file(d);
        let path = dir.join(&name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != get(&format!("sha256.{name}"))? {
            return Err(Error::Format(format!("{} does not match its manifest hash", path.display())));
        }
        let mut tensors = decode_tensors(&bytes)?;
        let images: Tensor<f32> = take_named(&mut tensors, "images")?.into_scalar("images")?;
        let labels: Tensor<f32> = take_named(&mut tensors, "labels")?.into_scalar("labels")?;
        let domains = take_named(&mut tensors, "domains")?.to_f64_vec();
        for (i, &code) in domains.iter().enumerate() {
            let domain = if code < 0.0 { None } else { Some(code as usize) };
            let image = images.batch_item(i).reshape(&images.shape()[1..])?;
            let label = labels.batch_item(i).reshape(&labels.shape()[1..])?;
            samples.push(DomainSample::new(image, label, domain)?);
        }
    }
    Ok((config, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<NamedTensor> {
        vec![
            ("a".into(), AnyTensor::F32(Tensor::from_vec(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap())),
            ("b/c".into(), AnyTensor::F64(Tensor::scalar(std::f64::consts::PI))),
        ]
    }

    #[test]
    fn round_trip_is_exact() {
        let bytes = encode_tensors(&sample()).unwrap();
        let back = decode_tensors(&bytes).unwrap();
        assert_eq!(encode_tensors(&back).unwrap(), bytes);
        assert_eq!(&bytes[..4], b"DDGT");
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let bytes = encode_tensors(&sample()).unwrap();
        for n in 0..bytes.len() {
            assert!(matches!(decode_tensors(&bytes[..n]), Err(Error::Format(_))), "len {n}");
        }
    }

    #[test]
    fn version_and_magic_checked() {
        let mut bytes = encode_tensors(&sample()).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_tensors(&bytes), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_tensors(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn escaped_config_round_trips() {
        let s = "a = \"x\"\n[b]\nc = 1\n";
        assert_eq!(unescape(&s.escape_default().to_string()), s);
    }
}

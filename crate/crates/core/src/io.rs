//! Persistence: `.npy` arrays, checkpoints and configuration digests.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CvdmError, Result};
use crate::tensor::Tensor;

const NPY_MAGIC: &[u8] = b"\x93NUMPY";

/// Writes a little-endian `f64` array in NumPy `.npy` format (version 1.0).
pub fn write_npy(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&npy_bytes(t))?;
    w.flush()?;
    Ok(())
}

pub fn npy_bytes(t: &Tensor) -> Vec<u8> {
    let shape = match t.shape() {
        [] => "()".to_string(),
        [n] => format!("({n},)"),
        s => format!(
            "({})",
            s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape}, }}");
    // magic(6) + version(2) + len(2) + header + '\n' aligned to 64
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + 8 * t.numel());
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Reads a C-ordered little-endian `f64` `.npy` file.
pub fn read_npy(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    parse_npy(&bytes).map_err(|e| match e {
        CvdmError::Config(m) => CvdmError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_npy(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| CvdmError::Config(format!("invalid npy: {m}"));
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(bad("missing magic"));
    }
    let (hlen, start) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(bad("truncated header"));
            }
            (u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize, 12)
        }
        v => return Err(bad(&format!("unsupported version {v}"))),
    };
    let header = std::str::from_utf8(bytes.get(start..start + hlen).ok_or_else(|| bad("truncated header"))?)
        .map_err(|_| bad("header not utf-8"))?;
    let field = |key: &str| -> Result<&str> {
        let k = header
            .find(&format!("'{key}'"))
            .ok_or_else(|| bad(&format!("missing {key}")))?;
        Ok(header[k + key.len() + 2..].trim_start().trim_start_matches(':').trim_start())
    };
    if !field("descr")?.starts_with("'<f8'") {
        return Err(bad("only little-endian f64 arrays are supported"));
    }
    if !field("fortran_order")?.starts_with("False") {
        return Err(bad("fortran order not supported"));
    }
    let shape_str = field("shape")?;
    let close = shape_str.find(')').ok_or_else(|| bad("malformed shape"))?;
    let shape: Vec<usize> = shape_str[1..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad("malformed shape")))
        .collect::<Result<_>>()?;
    let n: usize = shape.iter().product();
    let body = &bytes[start + hlen..];
    if body.len() != 8 * n {
        return Err(bad(&format!("expected {} data bytes, found {}", 8 * n, body.len())));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(&shape, data)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Canonical JSON (object keys sorted) of a serialisable value.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's map keeps keys sorted, so a round-trip through Value canonicalises
    Ok(serde_json::to_string(&serde_json::to_value(value)?)?)
}

/// SHA-256 of the canonical JSON form; independent of field order in the source document.
pub fn config_digest<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(canonical_json(value)?.as_bytes()))
}

const CKPT_MAGIC: &[u8; 8] = b"CVDMCKPT";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    dtype: String,
    step: u64,
    config_digest: String,
    seed: u64,
    optimizer_step: u64,
    alpha: serde_json::Value,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
    has_optimizer_state: bool,
}

/// Everything needed to resume training bit-identically. Random streams are
/// derived from `(seed, step)`, so no generator state is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config_digest: String,
    pub seed: u64,
    pub optimizer_step: u64,
    /// Serialised α policy state.
    pub alpha: serde_json::Value,
    /// The configuration that produced the parameters.
    pub config: serde_json::Value,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    /// Adam first and second moments, aligned with `params`.
    pub moments: Option<(Vec<Tensor>, Vec<Tensor>)>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if self.names.len() != self.params.len() {
            return Err(CvdmError::Checkpoint("names and tensors differ in length".into()));
        }
        let header = CheckpointHeader {
            version: CKPT_VERSION,
            dtype: "f64-le".into(),
            step: self.step,
            config_digest: self.config_digest.clone(),
            seed: self.seed,
            optimizer_step: self.optimizer_step,
            alpha: self.alpha.clone(),
            config: self.config.clone(),
            tensors: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            has_optimizer_state: self.moments.is_some(),
        };
        let json = serde_json::to_vec(&header)?;
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(CKPT_MAGIC)?;
            w.write_all(&CKPT_VERSION.to_le_bytes())?;
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
            let mut put = |ts: &[Tensor]| -> std::io::Result<()> {
                for t in ts {
                    for v in t.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Ok(())
            };
            put(&self.params)?;
            if let Some((m, v)) = &self.moments {
                put(m)?;
                put(v)?;
            }
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(CvdmError::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CKPT_VERSION {
            return Err(CvdmError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let mut json = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; 8 * n];
            r.read_exact(&mut buf)
                .map_err(|_| CvdmError::Checkpoint("checkpoint truncated".into()))?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::new(shape, data)
        };
        let read_all = |take: &mut dyn FnMut(&[usize]) -> Result<Tensor>| -> Result<Vec<Tensor>> {
            header.tensors.iter().map(|e| take(&e.shape)).collect()
        };
        let params = read_all(&mut take)?;
        let moments = if header.has_optimizer_state {
            let m = read_all(&mut take)?;
            let v = read_all(&mut take)?;
            Some((m, v))
        } else {
            None
        };
        drop(take);
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(CvdmError::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            step: header.step,
            config_digest: header.config_digest,
            seed: header.seed,
            optimizer_step: header.optimizer_step,
            alpha: header.alpha,
            config: header.config,
            names: header.tensors.into_iter().map(|e| e.name).collect(),
            params,
            moments,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn npy_roundtrip_and_header_alignment() {
        let dir = tempfile::tempdir().unwrap();
        for shape in [vec![], vec![3], vec![2, 3, 4]] {
            let t = Tensor::from_fn(&shape, |i| i as f64 * 0.5 - 1.0);
            let bytes = npy_bytes(&t);
            let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
            assert_eq!((10 + hlen) % 64, 0);
            let p = dir.path().join("a.npy");
            write_npy(&p, &t).unwrap();
            assert_eq!(read_npy(&p).unwrap(), t);
        }
        assert!(parse_npy(b"not an array").is_err());
    }

    #[test]
    fn digest_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"b": 1, "a": {"y": 2, "x": [1, 2]}}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"a": {"x": [1, 2], "y": 2}, "b": 1}"#).unwrap();
        assert_eq!(config_digest(&a).unwrap(), config_digest(&b).unwrap());
        let c: serde_json::Value = serde_json::from_str(r#"{"a": {"x": [2, 1], "y": 2}, "b": 1}"#).unwrap();
        assert_ne!(config_digest(&a).unwrap(), config_digest(&c).unwrap());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let params = vec![
            Tensor::new(&[2], vec![0.1, f64::MIN_POSITIVE]).unwrap(),
            Tensor::from_fn(&[2, 2], |i| -(i as f64) / 3.0),
        ];
        let ck = Checkpoint {
            step: 17,
            config_digest: "abc".into(),
            seed: 9,
            optimizer_step: 17,
            alpha: serde_json::json!({"frozen": 0.5}),
            config: serde_json::json!({"k": 1}),
            names: vec!["a".into(), "b".into()],
            moments: Some((params.clone(), params.clone())),
            params,
        };
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.params.iter().zip(&ck.params) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        std::fs::write(&p, b"CVDMCKPT").unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }
}

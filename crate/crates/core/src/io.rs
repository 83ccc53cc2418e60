//! Tensor container.
//!
//! Layout: `"PMKT"`, version (u32 LE), header length (u32 LE), a canonical
//! JSON header `{"dtype","meta","order","shape"}` with sorted keys and no
//! whitespace, then the row-major little-endian payload.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use pmk_tensor::{DType, Scalar, Tensor};
use serde_json::{Map, Value};

use crate::error::{CoreError, Result};

pub const MAGIC: [u8; 4] = *b"PMKT";
pub const VERSION: u32 = 1;

/// Free-form metadata stored in the header.
pub type Meta = Map<String, Value>;

fn dtype_name(d: DType) -> &'static str {
    d.name()
}

fn parse_dtype(s: &str) -> Option<DType> {
    match s {
        "f32" => Some(DType::F32),
        "f64" => Some(DType::F64),
        _ => None,
    }
}

/// Serializes a tensor into container bytes.
pub fn encode_tensor<T: Scalar>(t: &Tensor<T>, meta: &Meta) -> Vec<u8> {
    let mut header = Map::new();
    header.insert("dtype".into(), Value::from(dtype_name(T::DTYPE)));
    header.insert("meta".into(), Value::Object(meta.clone()));
    header.insert("order".into(), Value::from("row-major"));
    header.insert("shape".into(), Value::from(t.shape().to_vec()));
    // serde_json's default map is ordered by key, so this is canonical.
    let header = Value::Object(header).to_string();

    let mut out = Vec::with_capacity(12 + header.len() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    match T::DTYPE {
        DType::F32 => {
            for v in t.data() {
                out.extend_from_slice(&(Scalar::to_f64(*v) as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for v in t.data() {
                out.extend_from_slice(&Scalar::to_f64(*v).to_le_bytes());
            }
        }
    }
    out
}

/// Parses container bytes; `path` is only used in error messages.
pub fn decode_tensor<T: Scalar>(bytes: &[u8], path: &Path) -> Result<(Tensor<T>, Meta)> {
    let p = || path.to_path_buf();
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        for (f, b) in found.iter_mut().zip(bytes) {
            *f = *b;
        }
        return Err(CoreError::BadMagic { path: p(), found });
    }
    if bytes.len() < 12 {
        return Err(CoreError::Truncated {
            path: p(),
            expected: 12,
            found: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CoreError::UnsupportedVersion {
            path: p(),
            found: version,
        });
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        return Err(CoreError::Truncated {
            path: p(),
            expected: 12 + hlen,
            found: bytes.len(),
        });
    }
    let header: Value = serde_json::from_slice(&bytes[12..12 + hlen]).map_err(|e| CoreError::Header {
        path: p(),
        detail: e.to_string(),
    })?;
    let bad = |detail: &str| CoreError::Header {
        path: p(),
        detail: detail.to_string(),
    };
    let dtype_s = header.get("dtype").and_then(Value::as_str).ok_or_else(|| bad("missing dtype"))?;
    let dtype = parse_dtype(dtype_s).ok_or_else(|| bad("unknown dtype"))?;
    if header.get("order").and_then(Value::as_str) != Some("row-major") {
        return Err(bad("order must be \"row-major\""));
    }
    let shape: Vec<usize> = header
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing shape"))?
        .iter()
        .map(|v| v.as_u64().map(|x| x as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| bad("shape entries must be non-negative integers"))?;
    let meta = match header.get("meta") {
        Some(Value::Object(m)) => m.clone(),
        None => Map::new(),
        Some(_) => return Err(bad("meta must be an object")),
    };
    if dtype != T::DTYPE {
        return Err(CoreError::DTypeMismatch {
            path: p(),
            expected: T::DTYPE.name().into(),
            found: dtype.name().into(),
        });
    }
    let n: usize = shape.iter().product();
    let payload = &bytes[12 + hlen..];
    let expected = n * dtype.size();
    if payload.len() != expected {
        return Err(CoreError::Truncated {
            path: p(),
            expected,
            found: payload.len(),
        });
    }
    let data: Vec<T> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    };
    Ok((Tensor::from_vec(&shape, data)?, meta))
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        }
    }
    let name = path
        .file_name()
        .ok_or_else(|| CoreError::invalid("write", format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| CoreError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| CoreError::io(&tmp, e))?;
        f.sync_all().map_err(|e| CoreError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>, meta: &Meta) -> Result<()> {
    write_atomic(path, &encode_tensor(t, meta))
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    read_tensor_meta(path).map(|(t, _)| t)
}

pub fn read_tensor_meta<T: Scalar>(path: &Path) -> Result<(Tensor<T>, Meta)> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode_tensor(&bytes, path)
}

/// Serializes any value as sorted-key compact JSON.
pub fn canonical_json<S: serde::Serialize>(v: &S) -> Result<String> {
    let v = serde_json::to_value(v).map_err(|e| CoreError::Config(e.to_string()))?;
    Ok(v.to_string())
}

pub fn write_json<S: serde::Serialize>(path: &Path, v: &S) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| CoreError::invalid("write_json", e.to_string()))?;
    write_atomic(path, s.as_bytes())
}

/// Lower-case hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

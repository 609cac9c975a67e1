//! Self-describing tensor container.
//!
//! Layout: 4-byte magic `MMT1`, u32 little-endian header length, JSON header
//! `{"dtype", "shape", "order": "row-major"}`, then the raw little-endian
//! payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"MMT1";
const PREFIX_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub shape: Vec<usize>,
    pub data: TensorData,
    /// Extra JSON carried in the header (used by checkpoints).
    pub meta: Option<serde_json::Value>,
}

impl TensorFile {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        validate_shape(&shape, data.len())?;
        Ok(Self {
            shape,
            data,
            meta: None,
        })
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: DType,
    shape: Vec<usize>,
    order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

fn validate_shape(shape: &[usize], count: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Shape(format!(
            "shape {shape:?} must be non-empty with positive dims"
        )));
    }
    let product: usize = shape.iter().product();
    if product != count {
        return Err(Error::Shape(format!(
            "shape {shape:?} holds {product} values but {count} were given"
        )));
    }
    Ok(())
}

pub fn encode(tensor: &TensorFile) -> Result<Vec<u8>> {
    validate_shape(&tensor.shape, tensor.data.len())?;
    let header = Header {
        dtype: tensor.dtype(),
        shape: tensor.shape.clone(),
        order: "row-major".into(),
        meta: tensor.meta.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    let payload_len = tensor.data.len() * tensor.dtype().size();
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    match &tensor.data {
        TensorData::F32(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F64(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

struct Parsed {
    header: Header,
    payload_offset: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Parsed> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    if bytes.len() < PREFIX_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            offset: 4,
            expected: 4,
            found: (bytes.len() - 4) as u64,
        });
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let available = bytes.len() - PREFIX_LEN;
    if available < header_len {
        return Err(Error::Truncated {
            path: path.into(),
            offset: PREFIX_LEN as u64,
            expected: header_len as u64,
            found: available as u64,
        });
    }
    let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..PREFIX_LEN + header_len])
        .map_err(|e| Error::BadHeader {
            path: path.into(),
            offset: PREFIX_LEN as u64,
            reason: e.to_string(),
        })?;
    if header.order != "row-major" {
        return Err(Error::BadHeader {
            path: path.into(),
            offset: PREFIX_LEN as u64,
            reason: format!("unsupported order {:?}", header.order),
        });
    }
    if header.shape.is_empty() || header.shape.contains(&0) {
        return Err(Error::BadHeader {
            path: path.into(),
            offset: PREFIX_LEN as u64,
            reason: format!("invalid shape {:?}", header.shape),
        });
    }
    Ok(Parsed {
        header,
        payload_offset: PREFIX_LEN + header_len,
    })
}

fn payload_len(header: &Header) -> u64 {
    header.shape.iter().map(|&d| d as u64).product::<u64>() * header.dtype.size() as u64
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<TensorFile> {
    let Parsed {
        header,
        payload_offset,
    } = parse_header(bytes, path)?;
    let expected = payload_len(&header);
    let found = (bytes.len() - payload_offset) as u64;
    if found < expected {
        return Err(Error::Truncated {
            path: path.into(),
            offset: payload_offset as u64,
            expected,
            found,
        });
    }
    if found > expected {
        return Err(Error::BadHeader {
            path: path.into(),
            offset: payload_offset as u64 + expected,
            reason: format!("{} trailing bytes after payload", found - expected),
        });
    }
    let payload = &bytes[payload_offset..];
    let data = match header.dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        ),
        DType::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        ),
    };
    Ok(TensorFile {
        shape: header.shape,
        data,
        meta: header.meta,
    })
}

/// Writes `values` (row-major) as a tensor of the given dtype. `f32` output
/// rounds each value to nearest.
pub fn write_tensor(
    path: impl AsRef<Path>,
    dtype: DType,
    shape: &[usize],
    values: &[f64],
) -> Result<()> {
    let data = match dtype {
        DType::F32 => TensorData::F32(values.iter().map(|&v| v as f32).collect()),
        DType::F64 => TensorData::F64(values.to_vec()),
    };
    write_tensor_file(path, &TensorFile::new(shape.to_vec(), data)?)
}

pub fn write_tensor_file(path: impl AsRef<Path>, tensor: &TensorFile) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(tensor)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes, path)
}

/// Reads only the header and checks the file size against it.
pub fn probe_tensor(path: impl AsRef<Path>) -> Result<(DType, Vec<usize>)> {
    use std::io::Read;
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(io_err(path))?;
    let total = file.metadata().map_err(io_err(path))?.len();
    let mut prefix = [0u8; PREFIX_LEN];
    let got = file.read(&mut prefix).map_err(io_err(path))?;
    let header_len = if got == PREFIX_LEN {
        u32::from_le_bytes(prefix[4..8].try_into().expect("4 bytes")) as usize
    } else {
        0
    };
    let mut head = prefix[..got].to_vec();
    let mut rest = vec![0u8; header_len.min(total.saturating_sub(PREFIX_LEN as u64) as usize)];
    file.read_exact(&mut rest).map_err(io_err(path))?;
    head.extend_from_slice(&rest);
    let Parsed {
        header,
        payload_offset,
    } = parse_header(&head, path)?;
    let expected = payload_len(&header);
    let found = total - payload_offset as u64;
    if found < expected {
        return Err(Error::Truncated {
            path: path.into(),
            offset: payload_offset as u64,
            expected,
            found,
        });
    }
    Ok((header.dtype, header.shape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.mmt");
        write_tensor(&path, DType::F64, &[2, 3], &[0.0; 6]).unwrap();
        let t = read_tensor(&path).unwrap();
        assert_eq!(t.shape, vec![2, 3]);
        assert_eq!(t.data, TensorData::F64(vec![0.0; 6]));
    }

    #[test]
    fn header_layout_is_exact() {
        let t = TensorFile::new(vec![2], TensorData::F32(vec![1.0, -2.0])).unwrap();
        let bytes = encode(&t).unwrap();
        let header = br#"{"dtype":"f32","shape":[2],"order":"row-major"}"#;
        assert_eq!(&bytes[..4], b"MMT1");
        assert_eq!(
            u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize,
            header.len()
        );
        assert_eq!(&bytes[8..8 + header.len()], header);
        assert_eq!(&bytes[8 + header.len()..], &[0, 0, 128, 63, 0, 0, 0, 192]);
    }

    #[test]
    fn truncated_payload_is_reported_with_offset() {
        let t = TensorFile::new(vec![6], TensorData::F64(vec![1.0; 6])).unwrap();
        let mut bytes = encode(&t).unwrap();
        bytes.truncate(bytes.len() - 8);
        let err = decode(&bytes, Path::new("x.mmt")).unwrap_err();
        match err {
            Error::Truncated {
                expected,
                found,
                offset,
                ..
            } => {
                assert_eq!(expected, 48);
                assert_eq!(found, 40);
                assert_eq!(offset as usize, bytes.len() - 40);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_header_are_distinct() {
        let t = TensorFile::new(vec![1], TensorData::F64(vec![1.0])).unwrap();
        let mut bytes = encode(&t).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            decode(&bytes, Path::new("m")),
            Err(Error::BadMagic { .. })
        ));
        let mut bytes = encode(&t).unwrap();
        bytes[9] = b'#';
        assert!(matches!(
            decode(&bytes, Path::new("m")),
            Err(Error::BadHeader { .. })
        ));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_tensor(dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn shape_must_match_values() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_tensor(dir.path().join("a"), DType::F64, &[2, 2], &[0.0; 3]).is_err());
        assert!(write_tensor(dir.path().join("a"), DType::F64, &[], &[]).is_err());
    }

    #[test]
    fn probe_matches_full_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.mmt");
        write_tensor(&path, DType::F32, &[3, 4], &[1.5; 12]).unwrap();
        assert_eq!(probe_tensor(&path).unwrap(), (DType::F32, vec![3, 4]));
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(bits in proptest::collection::vec(any::<u64>(), 1..200), as_f32 in any::<bool>()) {
            let shape = vec![bits.len()];
            let data = if as_f32 {
                TensorData::F32(bits.iter().map(|&b| f32::from_bits(b as u32)).collect())
            } else {
                TensorData::F64(bits.iter().map(|&b| f64::from_bits(b)).collect())
            };
            let t = TensorFile::new(shape, data).unwrap();
            let back = decode(&encode(&t).unwrap(), Path::new("p")).unwrap();
            let same = match (&t.data, &back.data) {
                (TensorData::F32(a), TensorData::F32(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
                (TensorData::F64(a), TensorData::F64(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
                _ => false,
            };
            prop_assert!(same);
            prop_assert_eq!(back.shape, t.shape);
        }
    }
}

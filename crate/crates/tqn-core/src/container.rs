//! A minimal self-describing binary container for run artefacts.
//!
//! Datasets, checkpoints, and bank snapshots are all stored as a flat list of
//! named, typed sections behind a magic header. Three section kinds cover
//! every need: raw bytes, UTF-8 text (CSV/JSON/TOML payloads), and tensors.
//! Tensor elements are written as IEEE-754 bit patterns, so a round trip is
//! bit-exact by construction.
//!
//! All integers are little-endian. Layout:
//!
//! ```text
//! magic  b"TQNBOX1\n"
//! u32    section count
//! per section:
//!   u32  name length, then UTF-8 name
//!   u8   kind (0 bytes | 1 text | 2 tensor)
//!   u64  payload length, then payload
//! tensor payload:
//!   u32  rank; u64 per dimension; f64 bits per element (row-major)
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TQNBOX1\n";

/// Guards against absurd lengths from corrupt files before allocating.
const MAX_SECTION_BYTES: u64 = 1 << 34;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("container io: {0}")]
    Io(#[from] io::Error),
    #[error("not a container file (bad magic)")]
    BadMagic,
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error("missing section `{0}`")]
    MissingSection(String),
    #[error("section `{name}` holds {actual}, expected {expected}")]
    WrongKind {
        name: String,
        expected: &'static str,
        actual: &'static str,
    },
    #[error("duplicate section `{0}`")]
    DuplicateSection(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Section {
    Bytes(Vec<u8>),
    Text(String),
    Tensor(Tensor),
}

impl Section {
    fn kind_name(&self) -> &'static str {
        match self {
            Section::Bytes(_) => "bytes",
            Section::Text(_) => "text",
            Section::Tensor(_) => "tensor",
        }
    }

    fn kind_tag(&self) -> u8 {
        match self {
            Section::Bytes(_) => 0,
            Section::Text(_) => 1,
            Section::Tensor(_) => 2,
        }
    }
}

/// An ordered collection of named sections; order is preserved on disk.
#[derive(Debug, Clone, Default)]
pub struct Container {
    sections: Vec<(String, Section)>,
    index: BTreeMap<String, usize>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.sections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sections.is_empty()
    }

    pub fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn put(&mut self, name: &str, section: Section) -> Result<(), ContainerError> {
        if self.index.contains_key(name) {
            return Err(ContainerError::DuplicateSection(name.to_string()));
        }
        self.index.insert(name.to_string(), self.sections.len());
        self.sections.push((name.to_string(), section));
        Ok(())
    }

    pub fn put_bytes(&mut self, name: &str, bytes: Vec<u8>) -> Result<(), ContainerError> {
        self.put(name, Section::Bytes(bytes))
    }

    pub fn put_text(&mut self, name: &str, text: impl Into<String>) -> Result<(), ContainerError> {
        self.put(name, Section::Text(text.into()))
    }

    pub fn put_tensor(&mut self, name: &str, tensor: Tensor) -> Result<(), ContainerError> {
        self.put(name, Section::Tensor(tensor))
    }

    pub fn get(&self, name: &str) -> Result<&Section, ContainerError> {
        self.index
            .get(name)
            .map(|&i| &self.sections[i].1)
            .ok_or_else(|| ContainerError::MissingSection(name.to_string()))
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8], ContainerError> {
        match self.get(name)? {
            Section::Bytes(b) => Ok(b),
            other => Err(ContainerError::WrongKind {
                name: name.to_string(),
                expected: "bytes",
                actual: other.kind_name(),
            }),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str, ContainerError> {
        match self.get(name)? {
            Section::Text(t) => Ok(t),
            other => Err(ContainerError::WrongKind {
                name: name.to_string(),
                expected: "text",
                actual: other.kind_name(),
            }),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, ContainerError> {
        match self.get(name)? {
            Section::Tensor(t) => Ok(t),
            other => Err(ContainerError::WrongKind {
                name: name.to_string(),
                expected: "tensor",
                actual: other.kind_name(),
            }),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.sections.len() as u32).to_le_bytes())?;
        for (name, section) in &self.sections {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[section.kind_tag()])?;
            let payload = match section {
                Section::Bytes(b) => b.clone(),
                Section::Text(t) => t.as_bytes().to_vec(),
                Section::Tensor(t) => encode_tensor(t),
            };
            w.write_all(&(payload.len() as u64).to_le_bytes())?;
            w.write_all(&payload)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, ContainerError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let count = read_u32(&mut r)? as usize;
        let mut out = Container::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as u64;
            if name_len > MAX_SECTION_BYTES {
                return Err(ContainerError::Corrupt(format!(
                    "section name length {name_len} out of range"
                )));
            }
            let mut name_bytes = vec![0u8; name_len as usize];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| ContainerError::Corrupt("section name is not UTF-8".into()))?;
            let mut kind = [0u8; 1];
            r.read_exact(&mut kind)?;
            let payload_len = read_u64(&mut r)?;
            if payload_len > MAX_SECTION_BYTES {
                return Err(ContainerError::Corrupt(format!(
                    "section `{name}` length {payload_len} out of range"
                )));
            }
            let mut payload = vec![0u8; payload_len as usize];
            r.read_exact(&mut payload)?;
            let section = match kind[0] {
                0 => Section::Bytes(payload),
                1 => Section::Text(String::from_utf8(payload).map_err(|_| {
                    ContainerError::Corrupt(format!("section `{name}` is not UTF-8"))
                })?),
                2 => Section::Tensor(decode_tensor(&name, &payload)?),
                k => {
                    return Err(ContainerError::Corrupt(format!(
                        "section `{name}` has unknown kind {k}"
                    )))
                }
            };
            out.put(&name, section)?;
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, ContainerError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, ContainerError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + t.rank() * 8 + t.numel() * 8);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &dim in t.shape() {
        out.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_bits().to_le_bytes());
    }
    out
}

fn decode_tensor(name: &str, payload: &[u8]) -> Result<Tensor, ContainerError> {
    let corrupt = |msg: &str| ContainerError::Corrupt(format!("tensor `{name}`: {msg}"));
    let mut r = payload;
    let rank = read_u32(&mut r)? as usize;
    if rank > 8 {
        return Err(corrupt("rank out of range"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let dim = read_u64(&mut r)?;
        if dim > MAX_SECTION_BYTES {
            return Err(corrupt("dimension out of range"));
        }
        shape.push(dim as usize);
    }
    let numel: usize = shape.iter().product();
    if r.len() != numel * 8 {
        return Err(corrupt("element count does not match shape"));
    }
    let mut data = Vec::with_capacity(numel);
    for chunk in r.chunks_exact(8) {
        data.push(f64::from_bits(u64::from_le_bytes(
            chunk.try_into().expect("chunk is 8 bytes"),
        )));
    }
    Tensor::new(shape, data).map_err(|e| corrupt(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::gaussian;
    use crate::rngs::stream_rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = stream_rng(5, 0);
        let t = gaussian(&mut rng, vec![7, 3], 1.0);
        let mut c = Container::new();
        c.put_bytes("raw", vec![0, 255, 128]).unwrap();
        c.put_text("note", "hello, 容器").unwrap();
        c.put_tensor("weights", t.clone()).unwrap();

        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Container::read_from(&buf[..]).unwrap();

        assert_eq!(back.names().collect::<Vec<_>>(), vec!["raw", "note", "weights"]);
        assert_eq!(back.bytes("raw").unwrap(), &[0, 255, 128]);
        assert_eq!(back.text("note").unwrap(), "hello, 容器");
        assert!(back.tensor("weights").unwrap().bit_eq(&t));

        // Re-serialising the loaded container yields identical bytes.
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn rejects_bad_magic_truncation_and_duplicates() {
        let mut c = Container::new();
        c.put_text("a", "x").unwrap();
        assert!(matches!(
            c.put_text("a", "y"),
            Err(ContainerError::DuplicateSection(_))
        ));

        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            Container::read_from(&buf[..]),
            Err(ContainerError::BadMagic)
        ));

        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(Container::read_from(&buf[..]).is_err());
    }

    #[test]
    fn kind_mismatch_is_reported() {
        let mut c = Container::new();
        c.put_text("t", "x").unwrap();
        let err = c.tensor("t").unwrap_err();
        assert!(matches!(err, ContainerError::WrongKind { .. }));
        assert!(matches!(
            c.bytes("missing"),
            Err(ContainerError::MissingSection(_))
        ));
    }
}

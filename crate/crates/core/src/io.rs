//! Binary weight and feature files, token tables, atomic writes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};

const WEIGHT_MAGIC: &[u8; 4] = b"TSCW";
const FEATURE_MAGIC: &[u8; 4] = b"TSCF";
const VERSION: u32 = 1;

/// Named float32 tensors, kept in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightSet {
    tensors: BTreeMap<String, ArrayD<f32>>,
}

impl WeightSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f32>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f32>> {
        self.tensors.get_mut(name)
    }

    /// Tensor `name` checked against `shape`.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&ArrayD<f32>> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "tensor '{name}' has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
            let rank = u8::try_from(t.ndim())
                .map_err(|_| Error::Format(format!("rank too high: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Format(format!("dimension too large: {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != WEIGHT_MAGIC {
            return Err(Error::Format("not a TSCW weight file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported weight file version {version}"
            )));
        }
        let count = r.u32()?;
        let mut set = WeightSet::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_owned();
            let rank = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let n: usize = dims.iter().product();
            let data = r.f32s(n)?;
            let t = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| Error::Format(e.to_string()))?;
            if set.tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor '{name}'")));
            }
        }
        if !r.done() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }
}

/// Feature matrix with its frame shift.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub frame_ms: f32,
    pub data: Array2<f32>,
}

impl FeatureFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let (t, d) = self.data.dim();
        let mut out = Vec::with_capacity(20 + 4 * t * d);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(t as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&self.frame_ms.to_le_bytes());
        for v in self.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != FEATURE_MAGIC {
            return Err(Error::Format("not a TSCF feature file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported feature file version {version}"
            )));
        }
        let t = r.u32()? as usize;
        let d = r.u32()? as usize;
        let frame_ms = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        let data = r.f32s(t * d)?;
        if !r.done() {
            return Err(Error::Format("payload longer than T * d_feat".into()));
        }
        let data =
            Array2::from_shape_vec((t, d), data).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self { frame_ms, data })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("payload too large".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Token table: one token per line, line number is the id, line 0 is the
/// blank `<blank>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenTable {
    tokens: Vec<String>,
}

pub const BLANK_TOKEN: &str = "<blank>";

impl TokenTable {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(BLANK_TOKEN) {
            return Err(Error::Format(format!("token 0 must be {BLANK_TOKEN}")));
        }
        Ok(Self { tokens })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::new(text.lines().map(str::to_owned).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// `<blank>`, space, `a`..`z`, then filler symbols up to `vocab` entries.
    pub fn synthetic(vocab: usize) -> Self {
        let mut tokens = vec![BLANK_TOKEN.to_owned()];
        tokens.extend((1..vocab).map(|i| match i {
            1 => " ".to_owned(),
            2..=27 => ((b'a' + (i - 2) as u8) as char).to_string(),
            _ => format!("<{i}>"),
        }));
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or("<unk>", String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.tokens
            .iter()
            .position(|t| t == token)
            .map(|i| i as u32)
    }

    pub fn render(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }
}

/// Writes through a temporary file in the same directory and renames it over
/// `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(Error::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_round_trip_bit_exact() {
        let mut w = WeightSet::new();
        w.insert(
            "a",
            ArrayD::from_shape_vec(
                IxDyn(&[2, 3]),
                vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25],
            )
            .unwrap(),
        );
        w.insert(
            "b.bias",
            ArrayD::from_shape_vec(IxDyn(&[1]), vec![f32::MAX]).unwrap(),
        );
        let bytes = w.to_bytes().unwrap();
        let back = WeightSet::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let a = back.get("a").unwrap();
        assert_eq!(a[[0, 1]].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn weights_reject_garbage() {
        assert!(WeightSet::from_bytes(b"TSCF").is_err());
        let mut w = WeightSet::new();
        w.insert("x", ArrayD::zeros(IxDyn(&[4])));
        let mut bytes = w.to_bytes().unwrap();
        bytes.pop();
        assert!(matches!(
            WeightSet::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            w.expect("x", &[2, 2]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn features_round_trip() {
        let f = FeatureFile {
            frame_ms: 10.0,
            data: Array2::from_shape_fn((5, 3), |(i, j)| i as f32 * 0.5 - j as f32),
        };
        let bytes = f.to_bytes();
        assert_eq!(bytes.len(), 20 + 5 * 3 * 4);
        assert_eq!(FeatureFile::from_bytes(&bytes).unwrap(), f);
        let empty = FeatureFile {
            frame_ms: 10.0,
            data: Array2::zeros((0, 80)),
        };
        assert_eq!(FeatureFile::from_bytes(&empty.to_bytes()).unwrap(), empty);
    }

    #[test]
    fn token_table_needs_blank_first() {
        assert!(TokenTable::parse("a\n<blank>\n").is_err());
        let t = TokenTable::parse("<blank>\n \nh\n").unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.render(&[2, 1, 2]), "h h");
        assert_eq!(TokenTable::synthetic(32).len(), 32);
        assert_eq!(TokenTable::synthetic(32).token(9), "h");
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = std::env::temp_dir().join(format!("tsca-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("f.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        fs::remove_dir_all(&dir).unwrap();
    }
}

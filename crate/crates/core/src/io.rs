//! On-disk formats.
//!
//! Manifest: CSV with header `sample_id,identity,camera,split,source`.
//!
//! Feature file (little endian):
//!
//! ```text
//! "PAMF" | version u32 = 1 | rank u32 | dims u32 x rank | f64 x prod(dims)
//! ```
//!
//! Checkpoint: the same magic with version 2, a section count, then for each
//! section its name (u32 length + UTF-8), a kind tag (0 = tensor, 1 = text)
//! and either a complete feature-file record or a length-prefixed string.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PAMF";
pub const TENSOR_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 2;

pub const MANIFEST_HEADER: [&str; 5] = ["sample_id", "identity", "camera", "split", "source"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Gallery,
    Query,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Gallery => "gallery",
            Split::Query => "query",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "gallery" => Some(Split::Gallery),
            "query" => Some(Split::Query),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub identity: String,
    pub camera: String,
    pub split: Split,
    /// Feature file path, relative to the manifest's directory unless
    /// absolute.
    pub source: String,
}

pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<SampleRecord>> {
    let bad = |line: usize, field: &'static str, reason: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        field,
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = reader.records();
    let header = match rows.next() {
        Some(row) => row.map_err(|e| bad(1, "header", e.to_string()))?,
        None => return Err(bad(1, "header", "empty manifest".into())),
    };
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(bad(
            1,
            "header",
            format!("expected `{}`", MANIFEST_HEADER.join(",")),
        ));
    }

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in rows {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            bad(line, "row", e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != MANIFEST_HEADER.len() {
            return Err(bad(line, "row", format!("expected 5 fields, found {}", row.len())));
        }
        let field = |i: usize| row.get(i).unwrap_or("").to_string();
        let (sample_id, identity, camera, split, source) =
            (field(0), field(1), field(2), field(3), field(4));
        if sample_id.is_empty() {
            return Err(bad(line, "sample_id", "empty".into()));
        }
        if identity.is_empty() {
            return Err(bad(line, "identity", "empty".into()));
        }
        if camera.is_empty() {
            return Err(bad(line, "camera", "empty".into()));
        }
        let split = Split::parse(&split)
            .ok_or_else(|| bad(line, "split", format!("unknown split `{split}`")))?;
        if source.is_empty() {
            return Err(bad(line, "source", "empty".into()));
        }
        if !seen.insert(sample_id.clone()) {
            return Err(bad(line, "sample_id", format!("duplicate id `{sample_id}`")));
        }
        out.push(SampleRecord {
            sample_id,
            identity,
            camera,
            split,
            source,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.sample_id.as_str(),
            &r.identity,
            &r.camera,
            r.split.as_str(),
            &r.source,
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Resolves a record's source against the manifest location.
pub fn resolve_source(manifest: &Path, source: &str) -> PathBuf {
    let p = Path::new(source);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    if t.rank() == 0 {
        return Err(Error::Data("refusing to encode a rank-0 tensor".into()));
    }
    if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite value at element {i}")));
    }
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Data(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(t.numel() * 8);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Data(format!(
                "truncated payload: need {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn decode_magic(cur: &mut Cursor<'_>) -> Result<u32> {
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Data(format!("bad magic {magic:?}, expected \"PAMF\"")));
    }
    cur.u32("version")
}

fn decode_tensor_body(cur: &mut Cursor<'_>) -> Result<Tensor> {
    let rank = cur.u32("rank")? as usize;
    if rank == 0 {
        return Err(Error::Data("rank-0 tensor in feature record".into()));
    }
    if rank > 16 {
        return Err(Error::Data(format!("implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(cur.u32("dimension")? as usize);
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Data(format!("shape {dims:?} overflows")))?;
    let bytes = numel
        .checked_mul(8)
        .ok_or_else(|| Error::Data(format!("shape {dims:?} overflows")))?;
    let payload = cur.take(bytes, "payload")?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(dims, data)
}

fn decode_tensor_record(cur: &mut Cursor<'_>) -> Result<Tensor> {
    let version = decode_magic(cur)?;
    if version != TENSOR_VERSION {
        return Err(Error::Data(format!("unsupported feature record version {version}")));
    }
    decode_tensor_body(cur)
}

pub fn decode_tensor(buf: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { buf, pos: 0 };
    let t = decode_tensor_record(&mut cur)?;
    if cur.pos != buf.len() {
        return Err(Error::Data(format!(
            "{} trailing bytes after tensor payload",
            buf.len() - cur.pos
        )));
    }
    Ok(t)
}

pub fn write_feature_file(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf)?;
    write_atomic(path, &buf)
}

pub fn read_feature_file(path: &Path) -> Result<Tensor> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&buf).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Section {
    Tensor(Tensor),
    Text(String),
}

/// Ordered named sections in one file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    sections: Vec<(String, Section)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.put(name.into(), Section::Tensor(t));
    }

    pub fn put_text(&mut self, name: impl Into<String>, text: impl Into<String>) {
        self.put(name.into(), Section::Text(text.into()));
    }

    fn put(&mut self, name: String, section: Section) {
        match self.sections.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = section,
            None => self.sections.push((name, section)),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.get(name) {
            Some(Section::Tensor(t)) => Ok(t),
            Some(Section::Text(_)) => Err(Error::Data(format!("section `{name}` is text, not a tensor"))),
            None => Err(Error::Data(format!("checkpoint has no section `{name}`"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name) {
            Some(Section::Text(s)) => Ok(s),
            Some(Section::Tensor(_)) => Err(Error::Data(format!("section `{name}` is a tensor, not text"))),
            None => Err(Error::Data(format!("checkpoint has no section `{name}`"))),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, section) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match section {
                Section::Tensor(t) => {
                    out.extend_from_slice(&0u32.to_le_bytes());
                    encode_tensor(t, &mut out)
                        .map_err(|e| Error::Data(format!("section `{name}`: {e}")))?;
                }
                Section::Text(s) => {
                    out.extend_from_slice(&1u32.to_le_bytes());
                    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf, pos: 0 };
        let version = decode_magic(&mut cur)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("not a checkpoint (version {version})")));
        }
        let count = cur.u32("section count")? as usize;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = cur.u32("section name length")? as usize;
            let name = std::str::from_utf8(cur.take(len, "section name")?)
                .map_err(|_| Error::Data("section name is not UTF-8".into()))?
                .to_string();
            let section = match cur.u32("section kind")? {
                0 => Section::Tensor(decode_tensor_record(&mut cur)?),
                1 => {
                    let len = cur.u32("text length")? as usize;
                    let s = std::str::from_utf8(cur.take(len, "text")?)
                        .map_err(|_| Error::Data(format!("section `{name}` is not UTF-8")))?;
                    Section::Text(s.to_string())
                }
                k => return Err(Error::Data(format!("unknown section kind {k}"))),
            };
            ck.put(name, section);
        }
        if cur.pos != buf.len() {
            return Err(Error::Data("trailing bytes after last section".into()));
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&buf).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const VALID: &str = "sample_id,identity,camera,split,source
s1,a,c1,train,f/s1.pamf
s2,a,c2,query,f/s2.pamf
s3,b,c1,gallery,f/s3.pamf
";

    #[test]
    fn parses_valid_manifest() {
        let r = parse_manifest(VALID, Path::new("m.csv")).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r[1].split, Split::Query);
        assert_eq!(r[2].identity, "b");
    }

    #[test]
    fn duplicate_id_names_the_line() {
        let text = format!("{VALID}s2,b,c3,train,x.pamf\n");
        let err = parse_manifest(&text, Path::new("m.csv")).unwrap_err();
        match err {
            Error::Manifest { line, field, .. } => {
                assert_eq!(line, 5);
                assert_eq!(field, "sample_id");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn unknown_split_rejected() {
        let text = "sample_id,identity,camera,split,source\ns1,a,c1,validation,x\n";
        let err = parse_manifest(text, Path::new("m.csv")).unwrap_err();
        assert!(matches!(err, Error::Manifest { field: "split", line: 2, .. }), "{err}");
    }

    #[test]
    fn bad_header_and_empty_fields() {
        assert!(parse_manifest("id,identity,camera,split,source\n", Path::new("m")).is_err());
        let text = "sample_id,identity,camera,split,source\ns1,,c1,train,x\n";
        assert!(matches!(
            parse_manifest(text, Path::new("m")),
            Err(Error::Manifest { field: "identity", .. })
        ));
        let text = "sample_id,identity,camera,split,source\ns1,a,c1,train\n";
        assert!(parse_manifest(text, Path::new("m")).is_err());
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf).unwrap();
        let mut want = b"PAMF".to_vec();
        want.extend_from_slice(&[1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        want.extend_from_slice(&1.0f64.to_le_bytes());
        want.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn rejects_corrupt_files() {
        let t = Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf).unwrap();
        assert!(decode_tensor(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(decode_tensor(&bad).unwrap_err().to_string().contains("magic"));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(decode_tensor(&extra).is_err());
        // rank 0
        let mut r0 = b"PAMF".to_vec();
        r0.extend_from_slice(&1u32.to_le_bytes());
        r0.extend_from_slice(&0u32.to_le_bytes());
        r0.extend_from_slice(&1.0f64.to_le_bytes());
        assert!(decode_tensor(&r0).is_err());
        assert!(encode_tensor(&Tensor::scalar(1.0), &mut Vec::new()).is_err());
        assert!(encode_tensor(&Tensor::vector(vec![f64::NAN]), &mut Vec::new()).is_err());
    }

    #[test]
    fn feature_file_roundtrip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pamf");
        let data: Vec<f64> = (0..12 * 12 * 64).map(|i| (i as f64).sin() * 1e-3).collect();
        let t = Tensor::new(vec![12, 12, 64], data).unwrap();
        write_feature_file(&path, &t).unwrap();
        assert_eq!(read_feature_file(&path).unwrap(), t);
    }

    #[test]
    fn checkpoint_sections() {
        let mut ck = Checkpoint::new();
        ck.put_tensor("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        ck.put_text("meta", "p1=6\n");
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.text("meta").unwrap(), "p1=6\n");
        assert!(back.tensor("meta").is_err());
        assert!(back.tensor("nope").is_err());
        let enc = ck.encode().unwrap();
        assert!(Checkpoint::decode(&enc[..enc.len() - 1]).is_err());
        assert!(decode_tensor(&enc).is_err());
    }

    proptest! {
        #[test]
        fn tensor_roundtrip(dims in proptest::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.rotate_left(i as u32) >> 2)).collect();
            prop_assume!(data.iter().all(|v| v.is_finite()));
            let t = Tensor::new(dims, data).unwrap();
            let mut buf = Vec::new();
            encode_tensor(&t, &mut buf).unwrap();
            prop_assert_eq!(decode_tensor(&buf).unwrap(), t);
        }
    }
}

//! On-disk formats: raw volumes, checkpoints, flat key=value configs,
//! episode manifests and CSV evaluation reports. All binary formats are
//! little-endian and fully validated on read (magic, version, and exact
//! total length — trailing bytes are an error, not a warning).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::taskgen::TaskKind;
use crate::tensor::Tensor;

const NVOL_MAGIC: &[u8; 4] = b"NVOL";
const NVOL_VERSION: u32 = 1;
const NVOL_DTYPE_F32: u8 = 0;

const CKPT_MAGIC: &[u8; 4] = b"NV3D";
const CKPT_VERSION: u32 = 1;

/// Refuse to allocate for absurd dimension products from corrupt headers.
const MAX_ELEMS: u64 = 1 << 30;

// ---------------------------------------------------------------------------
// Byte-level reader over an in-memory buffer.

struct Cur<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Cur<'a> {
    fn new(buf: &'a [u8], what: &'a str) -> Self {
        Cur { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "{}: truncated at byte {} (wanted {} more of {})",
                self.what,
                self.pos,
                n,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes after the declared content",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn read_dims(cur: &mut Cur, rank: u8) -> Result<Vec<usize>> {
    if rank as usize > crate::tensor::MAX_RANK {
        return Err(Error::Format(format!(
            "{}: rank {} exceeds the maximum {}",
            cur.what,
            rank,
            crate::tensor::MAX_RANK
        )));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    let mut prod: u64 = 1;
    for _ in 0..rank {
        let d = cur.u64()?;
        prod = prod.saturating_mul(d.max(1));
        if prod > MAX_ELEMS {
            return Err(Error::Format(format!(
                "{}: dimension product exceeds the {} element cap",
                cur.what, MAX_ELEMS
            )));
        }
        dims.push(d as usize);
    }
    Ok(dims)
}

// ---------------------------------------------------------------------------
// NVOL raw volumes.

/// Write a tensor as an NVOL file (f32 payload).
pub fn write_nvol(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut out = Vec::with_capacity(16 + t.numel() * 4);
    out.extend_from_slice(NVOL_MAGIC);
    out.extend_from_slice(&NVOL_VERSION.to_le_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(NVOL_DTYPE_F32);
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read an NVOL file, validating magic, version, dtype and exact length.
pub fn read_nvol(path: &Path) -> Result<Tensor<f32>> {
    let buf = fs::read(path)?;
    let what = format!("NVOL {}", path.display());
    let mut cur = Cur::new(&buf, &what);
    if cur.take(4)? != NVOL_MAGIC {
        return Err(Error::Format(format!("{what}: bad magic")));
    }
    let version = cur.u32()?;
    if version != NVOL_VERSION {
        return Err(Error::Format(format!(
            "{what}: unsupported version {version}"
        )));
    }
    let rank = cur.u8()?;
    let dims = read_dims(&mut cur, rank)?;
    let dtype = cur.u8()?;
    if dtype != NVOL_DTYPE_F32 {
        return Err(Error::Format(format!("{what}: unsupported dtype tag {dtype}")));
    }
    let numel: usize = dims.iter().product();
    let data = cur.f32s(numel)?;
    cur.finish()?;
    Tensor::new(dims, data)
}

// ---------------------------------------------------------------------------
// Checkpoints.

/// A checkpoint: a UTF-8 config blob plus named f32 tensors (model weights
/// and, when saved mid-training, optimizer moments under `adam.m.` /
/// `adam.v.` prefixes).
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let cfg = ck.config.as_bytes();
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(cfg);
    out.extend_from_slice(&(ck.tensors.len() as u64).to_le_bytes());
    for (name, t) in &ck.tensors {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::invalid(format!(
                "tensor name '{}...' longer than 65535 bytes",
                &name[..32.min(name.len())]
            )));
        }
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path)?;
    let what = format!("checkpoint {}", path.display());
    let mut cur = Cur::new(&buf, &what);
    if cur.take(4)? != CKPT_MAGIC {
        return Err(Error::Format(format!("{what}: bad magic")));
    }
    let version = cur.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!(
            "{what}: unsupported version {version}"
        )));
    }
    let cfg_len = cur.u64()? as usize;
    let config = String::from_utf8(cur.take(cfg_len)?.to_vec())
        .map_err(|e| Error::Format(format!("{what}: config blob is not UTF-8: {e}")))?;
    let count = cur.u64()?;
    let mut tensors = BTreeMap::new();
    for i in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|e| Error::Format(format!("{what}: tensor {i} name is not UTF-8: {e}")))?;
        let rank = cur.u8()?;
        let dims = read_dims(&mut cur, rank)?;
        let numel: usize = dims.iter().product();
        let data = cur.f32s(numel)?;
        if tensors.insert(name.clone(), Tensor::new(dims, data)?).is_some() {
            return Err(Error::Format(format!("{what}: duplicate tensor '{name}'")));
        }
    }
    cur.finish()?;
    Ok(Checkpoint { config, tensors })
}

// ---------------------------------------------------------------------------
// Flat key = value configs.

/// Parse flat `key = value` text. Blank lines and `#` comments are skipped;
/// anything else must contain `=`. Duplicate keys and empty keys are
/// rejected with their 1-based line number.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let Some(eq) = s.find('=') else {
            return Err(Error::Config {
                line,
                msg: format!("expected 'key = value', got '{s}'"),
            });
        };
        let key = s[..eq].trim().to_string();
        let value = s[eq + 1..].trim().to_string();
        if key.is_empty() {
            return Err(Error::Config {
                line,
                msg: "empty key".into(),
            });
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::Config {
                line,
                msg: format!("duplicate key '{key}'"),
            });
        }
    }
    Ok(map)
}

/// Render a config map back to the flat text form (sorted by key).
pub fn render_config(map: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in map {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Episode manifests.

/// One generated episode on disk: the task, the seed it was grown from, and
/// tab-separated (input, output) volume paths — context pairs first, the
/// target pair last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub kind: TaskKind,
    pub seed: u64,
    pub pairs: Vec<(String, String)>,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(e.kind.name());
        out.push('\t');
        out.push_str(&e.seed.to_string());
        for (input, output) in &e.pairs {
            out.push('\t');
            out.push_str(input);
            out.push('\t');
            out.push_str(output);
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() < 4 || (fields.len() - 2) % 2 != 0 {
            return Err(Error::Config {
                line,
                msg: format!(
                    "manifest record needs task, seed and (input, output) path pairs; got {} fields",
                    fields.len()
                ),
            });
        }
        let kind = TaskKind::parse(fields[0]).map_err(|e| Error::Config {
            line,
            msg: e.to_string(),
        })?;
        let seed: u64 = fields[1].parse().map_err(|_| Error::Config {
            line,
            msg: format!("bad seed '{}'", fields[1]),
        })?;
        let pairs = fields[2..]
            .chunks_exact(2)
            .map(|c| (c[0].to_string(), c[1].to_string()))
            .collect();
        entries.push(ManifestEntry { kind, seed, pairs });
    }
    Ok(entries)
}

// ---------------------------------------------------------------------------
// Evaluation reports.

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub task: String,
    pub context_size: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub repeats: usize,
}

/// Write the evaluation CSV: `task,context_size,metric,mean,std,repeats`.
pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    fs::write(path, render_report(rows))?;
    Ok(())
}

pub fn render_report(rows: &[ReportRow]) -> String {
    let mut out = String::from("task,context_size,metric,mean,std,repeats\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{}\n",
            r.task, r.context_size, r.metric, r.mean, r.std, r.repeats
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn nvol_round_trips_bitwise() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("v.nvol");
        let t = Tensor::from_fn(vec![1, 3, 4, 5], |i| (i as f32) * 0.125 - 3.0);
        write_nvol(&p, &t).unwrap();
        let back = read_nvol(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back.bitwise_eq(&t));
    }

    #[test]
    fn nvol_rejects_corruption() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("v.nvol");
        let t = Tensor::full(&[2, 2], 1.0f32);
        write_nvol(&p, &t).unwrap();
        let mut bytes = fs::read(&p).unwrap();

        // Bad magic.
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(read_nvol(&p), Err(Error::Format(_))));

        // Truncated payload.
        fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_nvol(&p), Err(Error::Format(_))));

        // Trailing garbage.
        bytes.push(0);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_nvol(&p), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_round_trips_config_and_tensors() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.nv3d");
        let mut ck = Checkpoint {
            config: "seed = 7\nstep = 120\n".into(),
            tensors: BTreeMap::new(),
        };
        ck.tensors
            .insert("tgt.stem.w".into(), Tensor::from_fn(vec![4, 2, 3, 3, 3], |i| i as f32));
        ck.tensors.insert("tgt.stem.b".into(), Tensor::full(&[4], 0.5f32));
        write_checkpoint(&p, &ck).unwrap();
        let back = read_checkpoint(&p).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.tensors.len(), 2);
        for (name, t) in &ck.tensors {
            assert!(back.tensors[name].bitwise_eq(t), "{name}");
        }
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.nv3d");
        let ck = Checkpoint {
            config: "a = 1\n".into(),
            tensors: BTreeMap::from([("w".into(), Tensor::full(&[3], 2.0f32))]),
        };
        write_checkpoint(&p, &ck).unwrap();
        let bytes = fs::read(&p).unwrap();
        let mut bad = bytes.clone();
        bad[2] = b'?';
        fs::write(&p, &bad).unwrap();
        assert!(read_checkpoint(&p).is_err());
        fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(read_checkpoint(&p).is_err());
    }

    #[test]
    fn config_parsing_reports_line_numbers() {
        let map = parse_config("# comment\nseed = 9\n\nlr = 1e-4\n").unwrap();
        assert_eq!(map["seed"], "9");
        assert_eq!(map["lr"], "1e-4");
        let err = parse_config("seed = 1\nbogus line\n").unwrap_err();
        match err {
            Error::Config { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
        let dup = parse_config("a = 1\na = 2\n").unwrap_err();
        match dup {
            Error::Config { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("duplicate"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("episodes.tsv");
        let entries = vec![
            ManifestEntry {
                kind: TaskKind::Segmentation,
                seed: 42,
                pairs: vec![
                    ("a_in.nvol".into(), "a_out.nvol".into()),
                    ("t_in.nvol".into(), "t_out.nvol".into()),
                ],
            },
            ManifestEntry {
                kind: TaskKind::Inpainting,
                seed: 7,
                pairs: vec![("b_in.nvol".into(), "b_out.nvol".into())],
            },
        ];
        write_manifest(&p, &entries).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), entries);
    }

    #[test]
    fn report_csv_has_the_documented_header() {
        let rows = vec![ReportRow {
            task: "segmentation".into(),
            context_size: 4,
            metric: "dice".into(),
            mean: 0.8125,
            std: 0.03,
            repeats: 20,
        }];
        let text = render_report(&rows);
        assert_eq!(
            text,
            "task,context_size,metric,mean,std,repeats\nsegmentation,4,dice,0.812500,0.030000,20\n"
        );
    }
}

//! Line-oriented dataset manifests and relevance judgments.
//!
//! A manifest holds one JSON object per line with the fields `id`, `kind`,
//! `text`, `image`, `group_id` and `split`. Images are stored as canonical
//! scene strings, so every pixel can be regenerated from the manifest.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::scene::SceneSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Text,
    Image,
    ImageText,
}

impl ItemKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ItemKind::Text => "text",
            ItemKind::Image => "image",
            ItemKind::ImageText => "image_text",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub kind: ItemKind,
    pub text: Option<String>,
    pub image: Option<SceneSpec>,
    pub group_id: Option<String>,
    pub split: Split,
}

impl Record {
    fn check(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        let (needs_text, needs_image) = match self.kind {
            ItemKind::Text => (true, false),
            ItemKind::Image => (false, true),
            ItemKind::ImageText => (true, true),
        };
        if needs_text && self.text.is_none() {
            return Err(format!("{} record {} lacks text", self.kind.as_str(), self.id));
        }
        if needs_image && self.image.is_none() {
            return Err(format!("{} record {} lacks an image", self.kind.as_str(), self.id));
        }
        Ok(())
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("records always serialize")
    }
}

fn parse_line(path: &Path, line_no: usize, line: &str) -> Result<Record> {
    let err = |msg: String| Error::Manifest { path: path.to_path_buf(), line: line_no, msg };
    let r: Record = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
    r.check().map_err(err)?;
    Ok(r)
}

/// Streaming reader: yields records one line at a time and rejects
/// malformed lines and repeated ids with their line number.
pub struct ManifestReader<B> {
    path: std::path::PathBuf,
    lines: std::io::Lines<B>,
    line_no: usize,
    seen: HashSet<String>,
}

impl ManifestReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(ManifestReader { path: path.to_path_buf(), lines: BufReader::new(f).lines(), line_no: 0, seen: HashSet::new() })
    }
}

impl<B: BufRead> Iterator for ManifestReader<B> {
    type Item = Result<Record>;

    fn next(&mut self) -> Option<Self::Item> {
        let line = match self.lines.next()? {
            Ok(l) => l,
            Err(e) => return Some(Err(Error::io(&self.path, e))),
        };
        self.line_no += 1;
        let rec = parse_line(&self.path, self.line_no, &line);
        Some(rec.and_then(|r| {
            if self.seen.insert(r.id.clone()) {
                Ok(r)
            } else {
                Err(Error::Manifest { path: self.path.clone(), line: self.line_no, msg: format!("duplicate id {}", r.id) })
            }
        }))
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<Record>> {
    ManifestReader::open(path)?.collect()
}

/// Writes records in the given order, one line each.
pub fn write_manifest<'a, I>(path: &Path, records: I) -> Result<usize>
where
    I: IntoIterator<Item = &'a Record>,
{
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut seen = HashSet::new();
    let mut n = 0;
    for r in records {
        r.check().map_err(|msg| Error::Manifest { path: path.to_path_buf(), line: n + 1, msg })?;
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Manifest { path: path.to_path_buf(), line: n + 1, msg: format!("duplicate id {}", r.id) });
        }
        writeln!(w, "{}", r.to_line()).map_err(|e| Error::io(path, e))?;
        n += 1;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(n)
}

/// query id → relevant candidate ids.
pub type Qrels = BTreeMap<String, Vec<String>>;

/// Reads `query_id candidate_id relevance` lines (tab or space separated);
/// only relevance 1 enters the map, but every query appears.
pub fn read_qrels(path: &Path) -> Result<Qrels> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Qrels::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Manifest { path: path.to_path_buf(), line: i + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [q, c, rel] = fields[..] else {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        };
        let entry = out.entry(q.to_string()).or_default();
        match rel {
            "1" => entry.push(c.to_string()),
            "0" => {}
            other => return Err(err(format!("relevance must be 0 or 1, got {other:?}"))),
        }
    }
    Ok(out)
}

pub fn write_qrels(path: &Path, qrels: &Qrels) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for (q, cands) in qrels {
        for c in cands {
            writeln!(w, "{q}\t{c}\t1").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, kind: ItemKind) -> Record {
        Record {
            id: id.into(),
            kind,
            text: (kind != ItemKind::Image).then(|| "a red circle".into()),
            image: (kind != ItemKind::Text).then(|| "bg:white;red-circle-large@0,0".parse().unwrap()),
            group_id: Some("g1".into()),
            split: Split::Dev,
        }
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let recs = vec![rec("a", ItemKind::Text), rec("b", ItemKind::Image), rec("c", ItemKind::ImageText)];
        write_manifest(&p, &recs).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let back = read_manifest(&p).unwrap();
        assert_eq!(back, recs);
        let p2 = dir.path().join("m2.jsonl");
        write_manifest(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p2).unwrap(), bytes);
    }

    #[test]
    fn malformed_lines_report_their_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let good = rec("a", ItemKind::Text).to_line();
        let missing_kind = r#"{"id":"b","text":"x","image":null,"group_id":null,"split":"dev"}"#;
        std::fs::write(&p, format!("{good}\n{missing_kind}\n")).unwrap();
        match read_manifest(&p).unwrap_err() {
            Error::Manifest { line, msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains("kind"), "{msg}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn duplicate_ids_and_missing_images_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let a = rec("a", ItemKind::Text).to_line();
        std::fs::write(&p, format!("{a}\n{a}\n")).unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::Manifest { line: 2, .. })));
        let mut bad = rec("x", ItemKind::Image);
        bad.image = None;
        assert!(write_manifest(&p, &[bad]).is_err());
    }

    #[test]
    fn qrels_round_trip_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.tsv");
        let mut q = Qrels::new();
        q.insert("q1".into(), vec!["c1".into(), "c3".into()]);
        q.insert("q2".into(), vec!["c2".into()]);
        write_qrels(&p, &q).unwrap();
        assert_eq!(read_qrels(&p).unwrap(), q);
        std::fs::write(&p, "q1\tc1\t2\n").unwrap();
        assert!(read_qrels(&p).is_err());
    }
}

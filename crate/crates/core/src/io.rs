//! File formats: the binary bundle and feature containers, proposal JSON lines,
//! and small helpers for reading and writing paths (`-` is standard output).
//!
//! Binary layout, all integers and floats little-endian:
//!
//! ```text
//! bundle:  "TFNB" u16 version u32 count { u32 id_len, id, u32 D, u8 kind, f32 start[D], end[D], map_a[D*D], map_b[D*D] }*
//! feature: "TFNF" u16 version u32 count { u32 id_len, id, u32 C, u32 T, f32 data[C*T] }*
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::bundle::ScoreBundle;
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::proposal::{Proposal, VideoProposals};
use crate::segment::Segment;

pub const BUNDLE_MAGIC: &[u8; 4] = b"TFNB";
pub const FEATURE_MAGIC: &[u8; 4] = b"TFNF";
pub const FORMAT_VERSION: u16 = 1;

/// Whether a bundle record holds model output or training targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BundleKind {
    Prediction = 0,
    Label = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleRecord {
    pub video_id: String,
    pub kind: BundleKind,
    pub bundle: ScoreBundle,
}

/// Reads a whole file, naming it in the error.
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes` to `path`, or to standard output when `path` is `-`.
pub fn write_output(path: &Path, bytes: &[u8]) -> Result<()> {
    if path.as_os_str() == "-" {
        let mut out = std::io::stdout().lock();
        return out.write_all(bytes).and_then(|_| out.flush()).map_err(|e| Error::io(path, e));
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Reader { cur: Cursor::new(bytes), what }
    }

    fn offset(&self) -> u64 {
        self.cur.position()
    }

    fn truncated(&self, field: &str) -> Error {
        self.truncated_at(self.offset(), field)
    }

    fn truncated_at(&self, at: u64, field: &str) -> Error {
        Error::format(format!("{}: truncated payload at byte {at} reading {field}", self.what))
    }

    fn remaining(&self) -> usize {
        self.cur.get_ref().len() - self.cur.position() as usize
    }

    fn need(&self, bytes: usize, field: &str) -> Result<()> {
        if self.remaining() < bytes {
            return Err(self.truncated(field));
        }
        Ok(())
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        let at = self.offset();
        self.cur.read_u8().map_err(|_| self.truncated_at(at, field))
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        let at = self.offset();
        self.cur.read_u16::<LittleEndian>().map_err(|_| self.truncated_at(at, field))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let at = self.offset();
        self.cur.read_u32::<LittleEndian>().map_err(|_| self.truncated_at(at, field))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<u32> {
        self.need(4, "magic")?;
        let mut got = [0u8; 4];
        self.cur.read_exact(&mut got).map_err(|_| self.truncated("magic"))?;
        if &got != magic {
            return Err(Error::format(format!(
                "{}: bad magic {:?} at byte 0, expected {:?}",
                self.what,
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "{}: unsupported version {version} at byte 4 (this build reads version {FORMAT_VERSION})",
                self.what
            )));
        }
        self.u32("record count")
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32("id length")? as usize;
        self.need(len, "video id")?;
        let at = self.offset();
        let mut buf = vec![0u8; len];
        self.cur.read_exact(&mut buf).map_err(|_| self.truncated("video id"))?;
        String::from_utf8(buf).map_err(|_| Error::format(format!("{}: video id at byte {at} is not UTF-8", self.what)))
    }

    fn f32s(&mut self, n: usize, field: &str) -> Result<Vec<f32>> {
        self.need(n.checked_mul(4).ok_or_else(|| self.truncated(field))?, field)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let at = self.offset();
            let x = self.cur.read_f32::<LittleEndian>().map_err(|_| self.truncated(field))?;
            if !x.is_finite() {
                return Err(Error::format(format!("{}: non-finite {field} value {x} at byte {at}", self.what)));
            }
            out.push(x);
        }
        Ok(out)
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(format!(
                "{}: {} unexpected trailing bytes at byte {}",
                self.what,
                self.remaining(),
                self.offset()
            )));
        }
        Ok(())
    }
}

/// Parses a bundle container, keeping record order and kind tags.
pub fn parse_bundle_records(bytes: &[u8]) -> Result<Vec<BundleRecord>> {
    let mut r = Reader::new(bytes, "bundle container");
    let count = r.header(BUNDLE_MAGIC)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let video_id = r.string()?;
        let d = r.u32("grid length")? as usize;
        let at = r.offset();
        let kind = match r.u8("kind tag")? {
            0 => BundleKind::Prediction,
            1 => BundleKind::Label,
            k => return Err(Error::format(format!("bundle container: unknown kind tag {k} at byte {at}"))),
        };
        let start = r.f32s(d, "start")?;
        let end = r.f32s(d, "end")?;
        let map_a = r.f32s(d * d, "map_a")?;
        let map_b = r.f32s(d * d, "map_b")?;
        let bundle = ScoreBundle::new(d, start, end, map_a, map_b)
            .map_err(|e| Error::format(format!("bundle container: record {video_id:?}: {e}")))?;
        out.push(BundleRecord { video_id, kind, bundle });
    }
    r.finish()?;
    Ok(out)
}

pub fn read_bundle_records(path: &Path) -> Result<Vec<BundleRecord>> {
    parse_bundle_records(&read_file(path)?).map_err(|e| in_file(path, e))
}

/// Bundles by video id. Duplicate ids are rejected.
pub fn read_bundles(path: &Path) -> Result<BTreeMap<String, ScoreBundle>> {
    let mut out = BTreeMap::new();
    for rec in read_bundle_records(path)? {
        if out.insert(rec.video_id.clone(), rec.bundle).is_some() {
            return Err(Error::format(format!("{}: duplicate video id {:?}", path.display(), rec.video_id)));
        }
    }
    Ok(out)
}

fn put_id(buf: &mut Vec<u8>, id: &str) {
    buf.write_u32::<LittleEndian>(id.len() as u32).unwrap();
    buf.extend_from_slice(id.as_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, v: &[f32]) {
    for &x in v {
        buf.write_f32::<LittleEndian>(x).unwrap();
    }
}

pub fn encode_bundles<'a>(records: impl IntoIterator<Item = (&'a str, BundleKind, &'a ScoreBundle)>) -> Vec<u8> {
    let records: Vec<_> = records.into_iter().collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(BUNDLE_MAGIC);
    buf.write_u16::<LittleEndian>(FORMAT_VERSION).unwrap();
    buf.write_u32::<LittleEndian>(records.len() as u32).unwrap();
    for (id, kind, b) in records {
        put_id(&mut buf, id);
        buf.write_u32::<LittleEndian>(b.d() as u32).unwrap();
        buf.write_u8(kind as u8).unwrap();
        put_f32s(&mut buf, b.start_prob());
        put_f32s(&mut buf, b.end_prob());
        put_f32s(&mut buf, b.map_a());
        put_f32s(&mut buf, b.map_b());
    }
    buf
}

/// Writes prediction bundles in video-id order.
pub fn write_bundles(path: &Path, bundles: &BTreeMap<String, ScoreBundle>) -> Result<()> {
    write_bundles_tagged(path, bundles, BundleKind::Prediction)
}

pub fn write_bundles_tagged(path: &Path, bundles: &BTreeMap<String, ScoreBundle>, kind: BundleKind) -> Result<()> {
    let bytes = encode_bundles(bundles.iter().map(|(id, b)| (id.as_str(), kind, b)));
    write_output(path, &bytes)
}

pub fn parse_features(bytes: &[u8]) -> Result<BTreeMap<String, FeatureSequence>> {
    let mut r = Reader::new(bytes, "feature container");
    let count = r.header(FEATURE_MAGIC)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let video_id = r.string()?;
        let c = r.u32("channel count")? as usize;
        let t = r.u32("length")? as usize;
        let n = c.checked_mul(t).ok_or_else(|| Error::format("feature container: record size overflows"))?;
        let data = r.f32s(n, "feature")?.into_iter().map(|x| x as f64).collect();
        let seq = FeatureSequence::new(c, t, data)
            .map_err(|e| Error::format(format!("feature container: record {video_id:?}: {e}")))?;
        if out.insert(video_id.clone(), seq).is_some() {
            return Err(Error::format(format!("feature container: duplicate video id {video_id:?}")));
        }
    }
    r.finish()?;
    Ok(out)
}

pub fn read_features(path: &Path) -> Result<BTreeMap<String, FeatureSequence>> {
    parse_features(&read_file(path)?).map_err(|e| in_file(path, e))
}

/// Encodes features as `f32`; values not representable in `f32` are rounded.
pub fn encode_features(features: &BTreeMap<String, FeatureSequence>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.write_u16::<LittleEndian>(FORMAT_VERSION).unwrap();
    buf.write_u32::<LittleEndian>(features.len() as u32).unwrap();
    for (id, f) in features {
        put_id(&mut buf, id);
        buf.write_u32::<LittleEndian>(f.channels() as u32).unwrap();
        buf.write_u32::<LittleEndian>(f.length() as u32).unwrap();
        for &x in f.data() {
            buf.write_f32::<LittleEndian>(x as f32).unwrap();
        }
    }
    buf
}

pub fn write_features(path: &Path, features: &BTreeMap<String, FeatureSequence>) -> Result<()> {
    write_output(path, &encode_features(features))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProposalLine {
    video: String,
    start: f64,
    end: f64,
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<usize>,
    #[serde(default)]
    stage: u32,
}

/// One JSON object per line, videos in id order, proposals in stored order.
pub fn encode_proposals(sets: &VideoProposals) -> String {
    let mut out = String::new();
    for (video, ps) in sets {
        for p in ps {
            let line = ProposalLine {
                video: video.clone(),
                start: p.segment.start(),
                end: p.segment.end(),
                score: p.score,
                class: p.class_id,
                stage: p.stage,
            };
            out.push_str(&serde_json::to_string(&line).expect("proposal serializes"));
            out.push('\n');
        }
    }
    out
}

/// Parses proposal lines; blank lines are skipped. Errors carry the 1-based
/// line number.
pub fn parse_proposals(reader: impl BufRead) -> Result<VideoProposals> {
    let mut out = VideoProposals::new();
    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::format(format!("line {lineno}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: ProposalLine =
            serde_json::from_str(&line).map_err(|e| Error::format(format!("line {lineno}: {e}")))?;
        let segment = Segment::new(raw.start, raw.end).map_err(|e| Error::format(format!("line {lineno}: {e}")))?;
        if !raw.score.is_finite() {
            return Err(Error::format(format!("line {lineno}: score must be finite")));
        }
        out.entry(raw.video).or_default().push(Proposal {
            segment,
            score: raw.score,
            class_id: raw.class,
            stage: raw.stage,
        });
    }
    Ok(out)
}

pub fn read_proposals(path: &Path) -> Result<VideoProposals> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_proposals(BufReader::new(file)).map_err(|e| in_file(path, e))
}

pub fn write_proposals(path: &Path, sets: &VideoProposals) -> Result<()> {
    write_output(path, encode_proposals(sets).as_bytes())
}

fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    }
}

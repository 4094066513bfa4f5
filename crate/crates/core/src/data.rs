//! Trajectory records, the `TTPE` embedding container and dataset manifests.
//!
//! `TTPE` layout (all integers little-endian):
//!
//! ```text
//! "TTPE" | version u32 = 1 | d u32 | record count u32
//! per record:
//!   id, task_text, dataset_tag   each as u16 byte length + UTF-8
//!   T u32 | has_labels u8
//!   goal embedding      d   x f32
//!   visual embeddings   T*d x f32, row-major
//!   labels              T   x f32 (only if has_labels = 1)
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{fuse, FusedInput};

pub const CONTAINER_MAGIC: [u8; 4] = *b"TTPE";
pub const CONTAINER_VERSION: u32 = 1;
pub const VECTOR_MAGIC: [u8; 4] = *b"TTPV";
pub const VECTOR_VERSION: u32 = 1;

/// One expert demonstration.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub id: String,
    pub task_text: String,
    pub dataset_tag: String,
    dim: usize,
    goal: Vec<f32>,
    /// `T x d`, row-major.
    visual: Vec<f32>,
    labels: Option<Vec<f32>>,
}

impl TrajectoryRecord {
    /// Builds a record; `visual` holds `T` rows of `goal.len()` values.
    pub fn new(
        id: impl Into<String>,
        task_text: impl Into<String>,
        dataset_tag: impl Into<String>,
        goal: Vec<f32>,
        visual: Vec<f32>,
        labels: Option<Vec<f32>>,
    ) -> Result<Self> {
        let dim = goal.len();
        if dim == 0 {
            return Err(Error::DimensionMismatch("empty goal embedding".into()));
        }
        if !visual.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch(format!(
                "{} visual values is not a multiple of d = {dim}",
                visual.len()
            )));
        }
        let rec = Self {
            id: id.into(),
            task_text: task_text.into(),
            dataset_tag: dataset_tag.into(),
            dim,
            goal,
            visual,
            labels,
        };
        rec.validate()?;
        Ok(rec)
    }

    /// Normalized progress labels `t / T` for `t = 1..=T`.
    pub fn progress_labels(len: usize) -> Vec<f32> {
        (1..=len).map(|t| t as f32 / len as f32).collect()
    }

    pub fn with_progress_labels(mut self) -> Self {
        self.labels = Some(Self::progress_labels(self.len()));
        self
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    fn validate(&self) -> Result<()> {
        let invalid = |message: String| Error::InvalidRecord { index: 0, message };
        if self.visual.is_empty() {
            return Err(invalid(format!("trajectory {:?} has no frames", self.id)));
        }
        if self.goal.iter().chain(&self.visual).any(|v| !v.is_finite()) {
            return Err(invalid(format!("trajectory {:?} has non-finite embeddings", self.id)));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.len() {
                return Err(invalid(format!("{} labels for {} frames", labels.len(), self.len())));
            }
            let increasing = labels.windows(2).all(|w| w[0] < w[1]);
            let in_range = labels.iter().all(|&y| y.is_finite() && y > 0.0 && y <= 1.0);
            if !increasing || !in_range || labels.last() != Some(&1.0) {
                return Err(invalid(
                    "labels must increase strictly inside (0, 1] and end at 1".into(),
                ));
            }
        }
        Ok(())
    }

    /// Number of frames `T`.
    pub fn len(&self) -> usize {
        self.visual.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.visual.is_empty()
    }

    /// Encoder dimension `d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn goal(&self) -> &[f32] {
        &self.goal
    }

    /// Visual embedding of frame `t` (0-based).
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.visual[t * self.dim..(t + 1) * self.dim]
    }

    pub fn visual(&self) -> &[f32] {
        &self.visual
    }

    pub fn labels(&self) -> Option<&[f32]> {
        self.labels.as_deref()
    }

    /// Labels promoted to `f64`, or a [`Error::MissingLabels`] naming the trajectory.
    pub fn labels_f64(&self) -> Result<Vec<f64>> {
        self.labels
            .as_ref()
            .map(|l| l.iter().map(|&v| v as f64).collect())
            .ok_or_else(|| Error::MissingLabels(format!("trajectory {:?}", self.id)))
    }

    pub fn goal_f64(&self) -> Vec<f64> {
        self.goal.iter().map(|&v| v as f64).collect()
    }

    pub fn frame_f64(&self, t: usize) -> Vec<f64> {
        self.frame(t).iter().map(|&v| v as f64).collect()
    }

    /// `[visual_t; goal]` for every frame.
    pub fn fused_inputs(&self) -> Result<Vec<FusedInput>> {
        let goal = self.goal_f64();
        (0..self.len()).map(|t| fuse(&self.frame_f64(t), &goal)).collect()
    }
}

/// Distribution-shift category of an evaluation split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Shift {
    #[serde(rename = "ID")]
    InDistribution,
    #[serde(rename = "ES")]
    Environment,
    #[serde(rename = "EM")]
    Embodiment,
    #[serde(rename = "ES&EM")]
    EnvironmentEmbodiment,
}

impl Shift {
    pub const ALL: [Shift; 4] = [
        Shift::InDistribution,
        Shift::Environment,
        Shift::Embodiment,
        Shift::EnvironmentEmbodiment,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Shift::InDistribution => "ID",
            Shift::Environment => "ES",
            Shift::Embodiment => "EM",
            Shift::EnvironmentEmbodiment => "ES&EM",
        }
    }
}

impl fmt::Display for Shift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Shift {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Shift::ALL
            .into_iter()
            .find(|k| k.tag().eq_ignore_ascii_case(s) || (s == "ES+EM" && *k == Shift::EnvironmentEmbodiment))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown shift tag {s:?}")))
    }
}

// ---------------------------------------------------------------------------
// Container I/O

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &dyn Fn() -> String) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::truncated(context()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u8(&mut self, context: &dyn Fn() -> String) -> Result<u8> {
        Ok(self.take(1, context)?[0])
    }

    fn u16(&mut self, context: &dyn Fn() -> String) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, context)?.try_into().unwrap()))
    }

    fn u32(&mut self, context: &dyn Fn() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, context: &dyn Fn() -> String) -> Result<Vec<f32>> {
        let bytes = n.checked_mul(4).ok_or_else(|| Error::truncated(context()))?;
        let raw = self.take(bytes, context)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self, context: &dyn Fn() -> String) -> Result<String> {
        let n = self.u16(context)? as usize;
        let raw = self.take(n, context)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Encoding(context()))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4, &|| "magic".into())?.try_into().unwrap();
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }
}

fn write_string(out: &mut Vec<u8>, s: &str, what: &str) -> Result<()> {
    let len: u16 = s
        .len()
        .try_into()
        .map_err(|_| Error::InvalidConfig(format!("{what} is {} bytes, the limit is 65535", s.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Serializes records into `TTPE` bytes. All records must share one dimension.
pub fn encode_container(records: &[TrajectoryRecord]) -> Result<Vec<u8>> {
    let dim = records.first().map_or(0, |r| r.dim);
    let mut out = Vec::new();
    out.extend_from_slice(&CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (i, r) in records.iter().enumerate() {
        if r.dim != dim {
            return Err(Error::DimensionMismatch(format!(
                "record {i} has d = {}, file has d = {dim}",
                r.dim
            )));
        }
        write_string(&mut out, &r.id, "id")?;
        write_string(&mut out, &r.task_text, "task text")?;
        write_string(&mut out, &r.dataset_tag, "dataset tag")?;
        out.extend_from_slice(&(r.len() as u32).to_le_bytes());
        out.push(r.labels.is_some() as u8);
        for v in r.goal.iter().chain(&r.visual).chain(r.labels.iter().flatten()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses `TTPE` bytes.
pub fn decode_container(bytes: &[u8]) -> Result<Vec<TrajectoryRecord>> {
    let mut rd = Reader { buf: bytes, pos: 0 };
    rd.magic(CONTAINER_MAGIC)?;
    let version = rd.u32(&|| "header version".into())?;
    if version != CONTAINER_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dim = rd.u32(&|| "header dimension".into())? as usize;
    let count = rd.u32(&|| "header record count".into())? as usize;
    if dim == 0 && count > 0 {
        return Err(Error::DimensionMismatch("header declares d = 0".into()));
    }
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for index in 0..count {
        let ctx = |what: &'static str| move || format!("record {index} ({what})");
        let id = rd.string(&ctx("id"))?;
        let task_text = rd.string(&ctx("task text"))?;
        let dataset_tag = rd.string(&ctx("dataset tag"))?;
        let len = rd.u32(&ctx("length"))? as usize;
        let has_labels = rd.u8(&ctx("label flag"))?;
        if has_labels > 1 {
            return Err(Error::InvalidRecord {
                index,
                message: format!("label flag is {has_labels}"),
            });
        }
        if len == 0 {
            return Err(Error::InvalidRecord {
                index,
                message: "zero-length trajectory".into(),
            });
        }
        let goal = rd.f32s(dim, &ctx("goal embedding"))?;
        let frames = len
            .checked_mul(dim)
            .ok_or_else(|| Error::truncated(ctx("visual embeddings")()))?;
        if frames.saturating_mul(4) > rd.remaining() {
            return Err(Error::truncated(ctx("visual embeddings")()));
        }
        let visual = rd.f32s(frames, &ctx("visual embeddings"))?;
        let labels = if has_labels == 1 {
            Some(rd.f32s(len, &ctx("labels"))?)
        } else {
            None
        };
        let rec = TrajectoryRecord::new(id, task_text, dataset_tag, goal, visual, labels).map_err(|e| match e {
            Error::InvalidRecord { message, .. } => Error::InvalidRecord { index, message },
            other => other,
        })?;
        records.push(rec);
    }
    if rd.remaining() > 0 {
        return Err(Error::TrailingData(rd.remaining()));
    }
    Ok(records)
}

pub fn save_container(path: impl AsRef<Path>, records: &[TrajectoryRecord]) -> Result<()> {
    fs::write(path, encode_container(records)?)?;
    Ok(())
}

pub fn load_container(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRecord>> {
    decode_container(&fs::read(path)?)
}

/// Writes a single embedding vector (`TTPV`: magic, version u32, d u32, d x f32).
pub fn save_vector(path: impl AsRef<Path>, v: &[f32]) -> Result<()> {
    let mut out = Vec::with_capacity(12 + 4 * v.len());
    out.extend_from_slice(&VECTOR_MAGIC);
    out.extend_from_slice(&VECTOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn decode_vector(bytes: &[u8]) -> Result<Vec<f32>> {
    let mut rd = Reader { buf: bytes, pos: 0 };
    rd.magic(VECTOR_MAGIC)?;
    let version = rd.u32(&|| "vector version".into())?;
    if version != VECTOR_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dim = rd.u32(&|| "vector dimension".into())? as usize;
    let v = rd.f32s(dim, &|| "vector payload".into())?;
    if rd.remaining() > 0 {
        return Err(Error::TrailingData(rd.remaining()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("embedding vector".into()));
    }
    Ok(v)
}

pub fn load_vector(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    decode_vector(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Manifest

/// One named split of a dataset bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitEntry {
    pub name: String,
    pub path: PathBuf,
    pub shift: Shift,
}

/// Dataset manifest: `name = path SHIFT` lines plus an optional
/// `baseline = path` line naming the reference-prompt embedding. Relative
/// paths resolve against the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub splits: Vec<SplitEntry>,
    pub baseline: Option<PathBuf>,
}

pub const TRAIN_SPLIT: &str = "train";
const BASELINE_KEY: &str = "baseline";

impl Manifest {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut m = Manifest::default();
        for (key, value, line) in crate::config::key_values(text)? {
            let resolve = |p: &str| {
                let p = Path::new(p);
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base_dir.join(p)
                }
            };
            if key == BASELINE_KEY {
                m.baseline = Some(resolve(&value));
                continue;
            }
            let mut parts = value.split_whitespace();
            let (Some(path), Some(shift), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::ConfigSyntax {
                    line,
                    message: format!("expected `{key} = <path> <shift>`"),
                });
            };
            if m.splits.iter().any(|s| s.name == key) {
                return Err(Error::ConfigSyntax {
                    line,
                    message: format!("duplicate split {key:?}"),
                });
            }
            let shift = shift.parse().map_err(|_| Error::ConfigSyntax {
                line,
                message: format!("unknown shift tag {shift:?}"),
            })?;
            m.splits.push(SplitEntry {
                name: key,
                path: resolve(path),
                shift,
            });
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Renders with paths relative to `base_dir` where possible.
    pub fn render(&self, base_dir: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base_dir).unwrap_or(p).to_string_lossy().into_owned();
        let mut s = String::from("# split = path shift\n");
        for e in &self.splits {
            s.push_str(&format!("{} = {} {}\n", e.name, rel(&e.path), e.shift));
        }
        if let Some(b) = &self.baseline {
            s.push_str(&format!("{BASELINE_KEY} = {}\n", rel(b)));
        }
        s
    }

    pub fn split(&self, name: &str) -> Option<&SplitEntry> {
        self.splits.iter().find(|s| s.name == name)
    }

    /// All splits except the training split, in manifest order.
    pub fn eval_splits(&self) -> impl Iterator<Item = &SplitEntry> {
        self.splits.iter().filter(|s| s.name != TRAIN_SPLIT)
    }

    /// Loads the training split, requiring labels on every record.
    pub fn load_training(&self) -> Result<Vec<TrajectoryRecord>> {
        let entry = self
            .split(TRAIN_SPLIT)
            .ok_or_else(|| Error::MissingLabels(format!("manifest has no {TRAIN_SPLIT:?} split")))?;
        let records = load_container(&entry.path)?;
        if let Some(r) = records.iter().find(|r| r.labels().is_none()) {
            return Err(Error::MissingLabels(format!(
                "trajectory {:?} in split {TRAIN_SPLIT:?} has no labels",
                r.id
            )));
        }
        Ok(records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, len: usize, dim: usize, labels: bool) -> TrajectoryRecord {
        let visual = (0..len * dim).map(|i| (i as f32 * 0.37).sin()).collect();
        let goal = (0..dim).map(|i| i as f32 - 0.5).collect();
        let r = TrajectoryRecord::new(id, "put the cup in the sink", "tk_pnp", goal, visual, None).unwrap();
        if labels {
            r.with_progress_labels()
        } else {
            r
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let recs = vec![record("a", 3, 4, true), record("b", 1, 4, false)];
        let bytes = encode_container(&recs).unwrap();
        assert_eq!(decode_container(&bytes).unwrap(), recs);
    }

    #[test]
    fn byte_count_matches_layout() {
        let r = record("ab", 3, 5, true);
        let bytes = encode_container(std::slice::from_ref(&r)).unwrap();
        let strings = 2 + 2 + 2 + r.task_text.len() + 2 + r.dataset_tag.len();
        let expected = 16 + strings + 4 + 1 + 4 * (5 + 15 + 3);
        assert_eq!(bytes.len(), expected);
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = encode_container(&[record("a", 2, 2, true)]).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_container(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncation_names_record() {
        let bytes = encode_container(&[record("a", 2, 3, true), record("b", 4, 3, true)]).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        match decode_container(cut) {
            Err(Error::Truncated { context }) => assert!(context.contains("record 1"), "{context}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn labels_are_progress() {
        let r = record("a", 4, 2, true);
        assert_eq!(r.labels().unwrap(), &[0.25, 0.5, 0.75, 1.0]);
        let bad = TrajectoryRecord::new("x", "", "", vec![0.0], vec![1.0, 2.0], Some(vec![0.5, 0.4]));
        assert!(matches!(bad, Err(Error::InvalidRecord { .. })));
        let nan = TrajectoryRecord::new("x", "", "", vec![f32::NAN], vec![1.0], None);
        assert!(nan.is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let text = "# bundle\ntrain = train.ttpe ID\nes = es.ttpe ES\nboth = /abs/x.ttpe ES&EM\nbaseline = base.ttpv\n";
        let m = Manifest::parse(text, Path::new("/data")).unwrap();
        assert_eq!(m.splits.len(), 3);
        assert_eq!(m.splits[0].path, Path::new("/data/train.ttpe"));
        assert_eq!(m.splits[2].shift, Shift::EnvironmentEmbodiment);
        assert_eq!(m.baseline.as_deref(), Some(Path::new("/data/base.ttpv")));
        assert_eq!(m.eval_splits().count(), 2);
        let again = Manifest::parse(&m.render(Path::new("/data")), Path::new("/data")).unwrap();
        assert_eq!(again, m);
        assert!(Manifest::parse("x = a.ttpe NOPE\n", Path::new(".")).is_err());
        assert!(Manifest::parse("x = a.ttpe\n", Path::new(".")).is_err());
    }

    #[test]
    fn vector_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.ttpv");
        save_vector(&p, &[1.0, -2.5, 3.0]).unwrap();
        assert_eq!(load_vector(&p).unwrap(), vec![1.0, -2.5, 3.0]);
        assert!(matches!(decode_vector(b"TTPVxx"), Err(Error::Truncated { .. })));
    }
}

//! JSON-lines manifest: a header `{"version":1,"count":N,...}` followed by one
//! session object per line. Frames are either inline base64 of the tensor
//! snapshot format or paths (relative to the manifest) of snapshot files.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{AttackType, AttributeLabels, Frame, Session, Split};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, SNAPSHOT_MAGIC};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub calib: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn of(sessions: &[Session]) -> Self {
        sessions.iter().fold(Self::default(), |mut acc, s| {
            match s.split {
                Split::Train => acc.train += 1,
                Split::Calib => acc.calib += 1,
                Split::Test => acc.test += 1,
            }
            acc
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub version: u32,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<SplitCounts>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    domain: String,
    split: Split,
    labels: [u8; 8],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attack_type: Option<AttackType>,
    frames: Vec<String>,
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_lines(
    path: &Path,
    sessions: &[Session],
    mut frame_ref: impl FnMut(&Session, usize, &Frame) -> Result<String>,
) -> Result<()> {
    let mut w = create(path)?;
    let header = ManifestHeader {
        version: MANIFEST_VERSION,
        count: sessions.len(),
        splits: Some(SplitCounts::of(sessions)),
    };
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for s in sessions {
        let frames = s
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| frame_ref(s, i, f))
            .collect::<Result<Vec<_>>>()?;
        let rec = Record {
            id: s.id.clone(),
            domain: s.domain.clone(),
            split: s.split,
            labels: s.labels.bits(),
            attack_type: Some(s.attack_type),
            frames,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Write sessions with frames inlined as base64 snapshots.
pub fn write_manifest(sessions: &[Session], path: &Path) -> Result<()> {
    write_lines(path, sessions, |_, _, f| {
        Ok(B64.encode(f.pixels().to_snapshot_bytes()))
    })
}

/// Write sessions with each frame in its own snapshot file under
/// `<manifest dir>/<frames_dir>/`.
pub fn write_manifest_with_files(sessions: &[Session], path: &Path, frames_dir: &str) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let dir = base.join(frames_dir);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_lines(path, sessions, |s, i, f| {
        let rel = format!("{frames_dir}/{}-{i:03}.spbt", s.id);
        let target = base.join(&rel);
        fs::write(&target, f.pixels().to_snapshot_bytes()).map_err(|e| Error::io(&target, e))?;
        Ok(rel)
    })
}

fn is_inline(s: &str) -> bool {
    // base64 of the magic "SPBT" starts with "U1BCV"
    let prefix = B64.encode(SNAPSHOT_MAGIC);
    s.starts_with(&prefix[..5])
}

fn load_frame(reference: &str, base: &Path, line: usize) -> Result<Frame> {
    let bytes = if is_inline(reference) {
        B64.decode(reference).map_err(|e| Error::Parse {
            line,
            message: format!("bad base64 frame: {e}"),
        })?
    } else {
        let path = base.join(reference);
        fs::read(&path).map_err(|e| Error::io(&path, e))?
    };
    let tensor = Tensor::from_snapshot_bytes(&bytes).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    Frame::new(tensor).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })
}

/// Read a manifest written by [`write_manifest`] or
/// [`write_manifest_with_files`]. Line numbers in errors are 1-based and
/// count the header.
pub fn read_manifest(path: &Path) -> Result<Vec<Session>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or(Error::Parse {
            line: 1,
            message: "empty manifest".into(),
        })?
        .map_err(|e| Error::io(path, e))?;
    let header: ManifestHeader = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        line: 1,
        message: format!("bad header: {e}"),
    })?;
    if header.version != MANIFEST_VERSION {
        return Err(Error::Parse {
            line: 1,
            message: format!("unsupported manifest version {}", header.version),
        });
    }
    let mut sessions = Vec::with_capacity(header.count.min(1 << 20));
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let labels = AttributeLabels::new(rec.labels).map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("line {lineno} ({}): {msg}", rec.id)),
            other => other,
        })?;
        if rec.frames.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: format!("session {} has no frames", rec.id),
            });
        }
        let frames = rec
            .frames
            .iter()
            .map(|f| load_frame(f, base, lineno))
            .collect::<Result<Vec<_>>>()?;
        let attack_type = rec.attack_type.unwrap_or(if labels.is_attack() {
            if labels.has_visible_cue() {
                AttackType::Replay
            } else {
                AttackType::Imperceptible
            }
        } else {
            AttackType::BonaFide
        });
        if (attack_type == AttackType::BonaFide) == labels.is_attack() {
            return Err(Error::Validation(format!(
                "line {lineno} ({}): attack type {} disagrees with bits[8]",
                rec.id,
                attack_type.as_str()
            )));
        }
        sessions.push(Session {
            id: rec.id,
            domain: rec.domain,
            split: rec.split,
            attack_type,
            labels,
            frames,
        });
    }
    if sessions.len() != header.count {
        return Err(Error::Parse {
            line: 1,
            message: format!("header count {} but {} sessions", header.count, sessions.len()),
        });
    }
    if let Some(expected) = header.splits {
        let got = SplitCounts::of(&sessions);
        if got != expected {
            return Err(Error::Parse {
                line: 1,
                message: format!("header split counts {expected:?} but found {got:?}"),
            });
        }
    }
    Ok(sessions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domain, DomainSpec};

    #[test]
    fn inline_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let sessions = generate_domain(&DomainSpec::domain_a(1), 12).unwrap();
        write_manifest(&sessions, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), sessions);
    }

    #[test]
    fn file_backed_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("m.jsonl");
        let sessions = generate_domain(&DomainSpec::domain_b(1), 5).unwrap();
        write_manifest_with_files(&sessions, &path, "frames").unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("frames/domain-b-000000-000.spbt"));
        assert_eq!(read_manifest(&path).unwrap(), sessions);
    }

    fn one_line_manifest(labels: &str) -> String {
        let frame = B64.encode(Tensor::zeros(&[3, 16, 16]).to_snapshot_bytes());
        format!(
            "{{\"version\":1,\"count\":1}}\n{{\"id\":\"s\",\"domain\":\"d\",\"split\":\"train\",\"labels\":{labels},\"frames\":[\"{frame}\"]}}\n"
        )
    }

    #[test]
    fn schema_violation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, one_line_manifest("[1,0,0,0,0,0,0,0]")).unwrap();
        match read_manifest(&path) {
            Err(Error::Validation(msg)) => assert!(msg.contains("bits[8]") && msg.contains("line 2")),
            other => panic!("expected validation error, got {other:?}"),
        }
        fs::write(&path, one_line_manifest("[0,0,0,0,0,0,0,0]")).unwrap();
        assert_eq!(read_manifest(&path).unwrap().len(), 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut text = one_line_manifest("[0,0,0,0,0,0,0,0]");
        text = text.replace("{\"version\":1,\"count\":1}", "{\"version\":1,\"count\":2}");
        text.push_str("{not json\n");
        fs::write(&path, text).unwrap();
        match read_manifest(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let text = one_line_manifest("[0,0,0,0,0,0,0,0]").replace("\"count\":1", "\"count\":3");
        fs::write(&path, text).unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Parse { line: 1, .. })));
    }
}

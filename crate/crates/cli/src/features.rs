//! Paired glottal flow feature files (`.gfw`) and the analysis index.
//!
//! A feature file is an ASCII header followed by raw little-endian doubles:
//!
//! ```text
//! GFWPAIR v1
//! recording_id=spk000_a
//! speaker_id=spk000
//! label=positive
//! sample_rate=8000
//! frames=39
//! frame_len=400
//! dtype=f64le
//! layout=frame,stream,sample
//! streams=u_filter:filter,u_model:model
//! frame_indices=0,1,2,...
//! end
//! ```
//!
//! Every header line ends in `\n`. The payload holds
//! `frames × 2 × frame_len` values: for each frame, `u_filter` then
//! `u_model`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use glottal_core::evaluation::RecordingFrames;
use glottal_core::s2ap::FramePair;
use glottal_core::Label;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MAGIC: &str = "GFWPAIR v1";
pub const INDEX_FILE: &str = "features.csv";

fn malformed(path: &Path, detail: impl Into<String>) -> CliError {
    CliError::Invalid(format!("{}: malformed feature file: {}", path.display(), detail.into()))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Invalid(format!("{}: {e}", path.display()))
}

pub fn write_features(path: &Path, rec: &RecordingFrames, sample_rate: u32) -> Result<(), CliError> {
    let frame_len = rec.frames.first().map_or(0, |f| f.len());
    for text in [&rec.recording_id, &rec.speaker_id] {
        if text.contains(['\n', '\r']) {
            return Err(CliError::Invalid(format!("identifier {text:?} contains a line break")));
        }
    }
    let indices: Vec<String> = rec.frames.iter().map(|f| f.frame_index.to_string()).collect();
    let mut out = Vec::new();
    let header = format!(
        "{MAGIC}\nrecording_id={}\nspeaker_id={}\nlabel={}\nsample_rate={sample_rate}\nframes={}\nframe_len={frame_len}\ndtype=f64le\nlayout=frame,stream,sample\nstreams=u_filter:filter,u_model:model\nframe_indices={}\nend\n",
        rec.recording_id,
        rec.speaker_id,
        rec.label,
        rec.frames.len(),
        indices.join(","),
    );
    out.extend_from_slice(header.as_bytes());
    for f in &rec.frames {
        if f.len() != frame_len {
            return Err(CliError::Invalid(format!("{}: frames differ in length", rec.recording_id)));
        }
        for v in f.u_filter.iter().chain(&f.u_model) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&out).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub sample_rate: u32,
    pub recording: RecordingFrames,
}

pub fn read_features(path: &Path) -> Result<FeatureFile, CliError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    let mut next_line = |reader: &mut BufReader<std::fs::File>| -> Result<String, CliError> {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| io_err(path, e))?;
        if n == 0 || !line.ends_with('\n') {
            return Err(malformed(path, "truncated header"));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut reader)? != MAGIC {
        return Err(malformed(path, format!("missing {MAGIC:?} tag")));
    }
    let mut fields = std::collections::BTreeMap::new();
    loop {
        let l = next_line(&mut reader)?;
        if l == "end" {
            break;
        }
        let (k, v) = l.split_once('=').ok_or_else(|| malformed(path, format!("bad header line {l:?}")))?;
        if fields.insert(k.to_string(), v.to_string()).is_some() {
            return Err(malformed(path, format!("duplicate key {k}")));
        }
    }
    let field = |k: &str| fields.get(k).ok_or_else(|| malformed(path, format!("missing {k}")));
    let number = |k: &str| -> Result<usize, CliError> {
        field(k)?.parse().map_err(|_| malformed(path, format!("{k} is not a count")))
    };
    for (k, want) in [("dtype", "f64le"), ("layout", "frame,stream,sample"), ("streams", "u_filter:filter,u_model:model")] {
        if field(k)? != want {
            return Err(malformed(path, format!("unsupported {k}")));
        }
    }
    let frames = number("frames")?;
    let frame_len = number("frame_len")?;
    let sample_rate = number("sample_rate")? as u32;
    let label: Label = field("label")?.parse().map_err(|_| malformed(path, "bad label"))?;
    let indices: Vec<usize> = if frames == 0 {
        Vec::new()
    } else {
        field("frame_indices")?
            .split(',')
            .map(|s| s.parse().map_err(|_| malformed(path, "bad frame index")))
            .collect::<Result<_, _>>()?
    };
    if indices.len() != frames {
        return Err(malformed(path, "frame_indices does not match frames"));
    }
    let recording_id = field("recording_id")?.clone();
    let speaker_id = field("speaker_id")?.clone();

    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(|e| io_err(path, e))?;
    if payload.len() != frames * 2 * frame_len * 8 {
        return Err(malformed(path, format!("payload is {} bytes, expected {}", payload.len(), frames * 2 * frame_len * 8)));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let pairs = indices
        .iter()
        .enumerate()
        .map(|(i, &frame_index)| {
            let base = i * 2 * frame_len;
            FramePair::new(
                values[base..base + frame_len].to_vec(),
                values[base + frame_len..base + 2 * frame_len].to_vec(),
                label,
                recording_id.clone(),
                frame_index,
            )
            .map_err(|e| malformed(path, e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FeatureFile {
        sample_rate,
        recording: RecordingFrames {
            recording_id,
            speaker_id,
            label,
            frames: pairs,
        },
    })
}

/// One row of `features.csv` in an analysis output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRow {
    pub recording_id: String,
    pub speaker_id: String,
    pub label: Label,
    pub features: PathBuf,
    pub fits: PathBuf,
    pub frames: usize,
    pub skipped: usize,
}

pub fn write_index(dir: &Path, rows: &[IndexRow]) -> Result<(), CliError> {
    let path = dir.join(INDEX_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Failed(e.to_string()))?;
    }
    w.flush().map_err(|e| io_err(&path, e))
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexRow>, CliError> {
    let path = dir.join(INDEX_FILE);
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    rdr.deserialize::<IndexRow>()
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

/// Loads every feature file listed in `dir/features.csv`, in index order.
pub fn read_feature_dir(dir: &Path) -> Result<Vec<RecordingFrames>, CliError> {
    let path = dir.join(INDEX_FILE);
    let mut out = Vec::new();
    for row in read_index(dir)? {
        let file = read_features(&dir.join(&row.features))?;
        if file.recording.speaker_id != row.speaker_id || file.recording.label != row.label {
            return Err(CliError::Invalid(format!("{}: header disagrees with {INDEX_FILE}", row.features.display())));
        }
        out.push(file.recording);
    }
    if out.is_empty() {
        return Err(CliError::Invalid(format!("{}: no recordings listed", path.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RecordingFrames {
        let frames = (0..3)
            .map(|i| {
                let u: Vec<f64> = (0..5).map(|t| (t as f64 * 0.3 + i as f64).sin()).collect();
                let m: Vec<f64> = u.iter().map(|v| v * 0.5 - 1e-17).collect();
                FramePair::new(u, m, Label::Negative, "spk001_a", 2 * i + 1).unwrap()
            })
            .collect();
        RecordingFrames {
            recording_id: "spk001_a".into(),
            speaker_id: "spk001".into(),
            label: Label::Negative,
            frames,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.gfw");
        let rec = sample();
        write_features(&path, &rec, 8000).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back.recording, rec);
        assert_eq!(back.sample_rate, 8000);
    }

    #[test]
    fn layout_is_header_then_interleaved_streams() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.gfw");
        let rec = sample();
        write_features(&path, &rec, 8000).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("GFWPAIR v1\nrecording_id=spk001_a\nspeaker_id=spk001\nlabel=negative\n"));
        assert!(text.contains("frame_indices=1,3,5\nend\n"));
        let start = text.find("end\n").unwrap() + 4;
        assert_eq!(bytes.len() - start, 3 * 2 * 5 * 8);
        let first = f64::from_le_bytes(bytes[start..start + 8].try_into().unwrap());
        assert_eq!(first, rec.frames[0].u_filter[0]);
        let model0 = f64::from_le_bytes(bytes[start + 40..start + 48].try_into().unwrap());
        assert_eq!(model0, rec.frames[0].u_model[0]);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.gfw");
        write_features(&path, &sample(), 8000).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.gfw");
        std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_features(&cut).is_err());
        let wrong = dir.path().join("wrong.gfw");
        std::fs::write(&wrong, b"GFWPAIR v2\nend\n").unwrap();
        assert!(read_features(&wrong).is_err());
        assert!(read_features(&dir.path().join("missing.gfw")).is_err());
    }
}

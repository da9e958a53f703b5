use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{GazeRecording, IngestError, Result};

pub const MANIFEST_HEADER: [&str; 6] = [
    "recording_id",
    "viewer_id",
    "dataset_id",
    "sampling_hz",
    "px_per_dva",
    "path",
];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads a manifest and every recording it references. Relative recording
/// paths are resolved against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<GazeRecording>> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    if text.trim().is_empty() {
        return Err(IngestError::Parse {
            path: shown,
            row: 0,
            msg: "empty manifest".into(),
        });
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| IngestError::Parse {
            path: shown.clone(),
            row: 1,
            msg: e.to_string(),
        })?
        .clone();
    let mut cols = [0usize; 6];
    for (slot, name) in cols.iter_mut().zip(MANIFEST_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn {
                path: shown.clone(),
                column: name.to_string(),
            })?;
    }

    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // header is row 1
        let row = i + 2;
        let parse_err = |msg: String| IngestError::Parse {
            path: shown.clone(),
            row,
            msg,
        };
        let record = record.map_err(|e| parse_err(e.to_string()))?;
        let field = |c: usize| record.get(cols[c]).unwrap_or("");
        let number = |c: usize| -> Result<f64> {
            field(c)
                .parse::<f64>()
                .map_err(|_| parse_err(format!("{} is not a number: `{}`", MANIFEST_HEADER[c], field(c))))
        };
        let recording_id = field(0).to_string();
        if recording_id.is_empty() {
            return Err(parse_err("empty recording_id".into()));
        }
        let viewer_id = field(1).to_string();
        if viewer_id.is_empty() {
            return Err(parse_err("empty viewer_id".into()));
        }
        let file = PathBuf::from(field(5));
        let file = if file.is_absolute() { file } else { base.join(file) };
        let rec = GazeRecording {
            recording_id,
            viewer_id,
            dataset_id: field(2).to_string(),
            sampling_hz: number(3)?,
            px_per_dva: number(4)?,
            positions: load_positions(&file)?,
        };
        rec.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(IngestError::Parse {
            path: shown,
            row: 1,
            msg: "manifest lists no recordings".into(),
        });
    }

    let mut seen = HashSet::new();
    let dups: BTreeSet<String> = out
        .iter()
        .filter(|r| !seen.insert(r.recording_id.as_str()))
        .map(|r| r.recording_id.clone())
        .collect();
    if !dups.is_empty() {
        return Err(IngestError::DuplicateIds(dups.into_iter().collect()));
    }
    Ok(out)
}

fn load_positions(path: &Path) -> Result<Vec<(f64, f64)>> {
    let shown = path.display().to_string();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| IngestError::Parse {
            path: shown.clone(),
            row: i + 1,
            msg,
        };
        let mut parts = line.split('\t');
        let mut coord = |axis: &str| -> Result<f64> {
            let raw = parts
                .next()
                .ok_or_else(|| err(format!("missing {axis} coordinate")))?
                .trim();
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("non-numeric {axis} coordinate `{raw}`")))
        };
        let x = coord("x")?;
        let y = coord("y")?;
        if parts.next().is_some() {
            return Err(err("expected exactly two tab-separated columns".into()));
        }
        out.push((x, y));
    }
    if out.is_empty() {
        return Err(IngestError::Parse {
            path: shown,
            row: 0,
            msg: "empty recording file".into(),
        });
    }
    Ok(out)
}

/// Writes `recordings` as a manifest plus one `.tsv` per recording under
/// `dir`; returns the manifest path.
pub fn write_corpus(dir: impl AsRef<Path>, recordings: &[GazeRecording]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let rec_dir = dir.join("recordings");
    fs::create_dir_all(&rec_dir).map_err(io_err(&rec_dir))?;
    let manifest = dir.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest).map_err(|e| IngestError::Io {
        path: manifest.display().to_string(),
        source: e.into(),
    })?;
    let csv_err = |e: csv::Error| IngestError::Io {
        path: manifest.display().to_string(),
        source: e.into(),
    };
    writer.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for rec in recordings {
        let rel = format!("recordings/{}.tsv", rec.recording_id);
        let file = dir.join(&rel);
        let mut body = String::with_capacity(rec.positions.len() * 24);
        for (x, y) in &rec.positions {
            body.push_str(&format!("{x}\t{y}\n"));
        }
        fs::File::create(&file)
            .and_then(|mut f| f.write_all(body.as_bytes()))
            .map_err(io_err(&file))?;
        writer
            .write_record([
                rec.recording_id.as_str(),
                &rec.viewer_id,
                &rec.dataset_id,
                &rec.sampling_hz.to_string(),
                &rec.px_per_dva.to_string(),
                &rel,
            ])
            .map_err(csv_err)?;
    }
    writer.flush().map_err(io_err(&manifest))?;
    Ok(manifest)
}

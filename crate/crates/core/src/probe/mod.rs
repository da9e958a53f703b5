//! Frozen-encoder embeddings and linear-probe evaluation on viewer
//! identification.

mod ablation;
mod eval;
mod svm;

pub use ablation::{ablation_run, ablation_table, parse_grid, reference_grid, AblationCell, AblationRow, AblationSettings};
pub use eval::{cross_validate, evaluate, viewer_folds, ClassScore, EvalReport};
pub use svm::{binary_objective, train_binary, train_linear_svm, LinearSvmModel, SvmConfig};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::encoder::{EncoderError, EncoderParams};
use crate::ingest::VelocitySignal;
use crate::numcore::{ExecMode, Tensor};
use crate::pipeline::PipelineError;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("unknown class label `{0}`")]
    UnknownLabel(String),
    #[error("{path}: row {row}: {msg}")]
    Parse { path: String, row: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

pub type Result<T> = std::result::Result<T, ProbeError>;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub recording_id: String,
    pub viewer_id: String,
    pub dataset_id: String,
    pub h: Vec<f32>,
}

/// One representation per recording, all of the same width.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    width: usize,
    rows: Vec<EmbeddingRow>,
}

impl EmbeddingSet {
    pub fn new(rows: Vec<EmbeddingRow>) -> Result<Self> {
        let width = rows.first().map_or(0, |r| r.h.len());
        if let Some(bad) = rows.iter().find(|r| r.h.len() != width) {
            return Err(ProbeError::Contract(format!(
                "row `{}` has width {}, expected {width}",
                bad.recording_id,
                bad.h.len()
            )));
        }
        let mut ids: Vec<&str> = rows.iter().map(|r| r.recording_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(ProbeError::Contract(format!("duplicate recording `{}`", w[0])));
        }
        Ok(Self { width, rows })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[EmbeddingRow] {
        &self.rows
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> EmbeddingSet {
        EmbeddingSet {
            width: self.width,
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |source| ProbeError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        let mut header = String::from("recording_id,viewer_id,dataset_id");
        for i in 0..self.width {
            header.push_str(&format!(",h_{i}"));
        }
        writeln!(out, "{header}").map_err(io)?;
        for r in &self.rows {
            write!(out, "{},{},{}", r.recording_id, r.viewer_id, r.dataset_id).map_err(io)?;
            for v in &r.h {
                write!(out, ",{v}").map_err(io)?;
            }
            writeln!(out).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let name = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| ProbeError::Parse {
                path: name.clone(),
                row: 0,
                msg: e.to_string(),
            })?;
        let header = reader.headers().map_err(|e| ProbeError::Parse {
            path: name.clone(),
            row: 1,
            msg: e.to_string(),
        })?;
        let fixed = ["recording_id", "viewer_id", "dataset_id"];
        let width = header.len().saturating_sub(3);
        let expected = (0..width).map(|i| format!("h_{i}"));
        if header.len() < 3 || !header.iter().take(3).eq(fixed) || !header.iter().skip(3).eq(expected) {
            return Err(ProbeError::Parse {
                path: name,
                row: 1,
                msg: "header must be recording_id,viewer_id,dataset_id,h_0,...".into(),
            });
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let row = i + 2;
            let parse_err = |msg: String| ProbeError::Parse {
                path: name.clone(),
                row,
                msg,
            };
            let rec = rec.map_err(|e| parse_err(e.to_string()))?;
            let h = rec
                .iter()
                .skip(3)
                .map(|v| v.parse::<f32>().map_err(|_| parse_err(format!("`{v}` is not a number"))))
                .collect::<Result<Vec<f32>>>()?;
            rows.push(EmbeddingRow {
                recording_id: rec[0].to_string(),
                viewer_id: rec[1].to_string(),
                dataset_id: rec[2].to_string(),
                h,
            });
        }
        Self::new(rows)
    }
}

/// Velocity signal as a `[2,T]` single-precision tensor.
pub fn signal_tensor(signal: &VelocitySignal) -> Tensor<f32> {
    let data = signal.values().iter().map(|v| *v as f32).collect();
    Tensor::new(vec![2, signal.len()], data).expect("two channels")
}

/// Encodes every full-length signal in eval mode; the projection head is
/// not applied.
pub fn embed_corpus(
    params: &EncoderParams<f32>,
    corpus: &[VelocitySignal],
    exec: ExecMode,
) -> Result<EmbeddingSet> {
    if corpus.is_empty() {
        return Err(ProbeError::Contract("cannot embed an empty corpus".into()));
    }
    let embed = |s: &VelocitySignal| -> Result<EmbeddingRow> {
        let h = params.encode(&signal_tensor(s))?;
        Ok(EmbeddingRow {
            recording_id: s.recording_id.clone(),
            viewer_id: s.viewer_id.clone(),
            dataset_id: s.dataset_id.clone(),
            h: h.into_data(),
        })
    };
    let rows = match exec {
        ExecMode::Sequential => corpus.iter().map(embed).collect::<Result<Vec<_>>>()?,
        ExecMode::Parallel => corpus.par_iter().map(embed).collect::<Result<Vec<_>>>()?,
    };
    EmbeddingSet::new(rows)
}

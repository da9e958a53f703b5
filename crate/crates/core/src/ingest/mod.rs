//! Gaze recordings, normalization to 500 Hz velocity signals, and the
//! synthetic corpus generator.

mod manifest;
mod resample;
mod synth;

pub use manifest::{load_manifest, write_corpus, MANIFEST_HEADER};
pub use resample::{resample_to_500hz, CubicSpline, TARGET_HZ};
pub use synth::{synthesize_corpus, SynthConfig, ViewerProfile};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: row {row}: {msg}")]
    Parse { path: String, row: usize, msg: String },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: String, column: String },
    #[error("duplicate recording ids: {0:?}")]
    DuplicateIds(Vec<String>),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid recording: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, IngestError>;

/// Raw gaze positions in pixels plus acquisition metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeRecording {
    pub recording_id: String,
    pub viewer_id: String,
    pub dataset_id: String,
    pub sampling_hz: f64,
    pub px_per_dva: f64,
    pub positions: Vec<(f64, f64)>,
}

impl GazeRecording {
    pub fn validate(&self) -> Result<()> {
        if self.positions.len() < 2 {
            return Err(IngestError::Invalid(format!(
                "{}: needs at least 2 samples, has {}",
                self.recording_id,
                self.positions.len()
            )));
        }
        if !(self.sampling_hz > 0.0 && self.sampling_hz.is_finite()) {
            return Err(IngestError::Invalid(format!(
                "{}: sampling_hz must be positive",
                self.recording_id
            )));
        }
        if !(self.px_per_dva > 0.0 && self.px_per_dva.is_finite()) {
            return Err(IngestError::Invalid(format!(
                "{}: px_per_dva must be positive",
                self.recording_id
            )));
        }
        if self.viewer_id.is_empty() {
            return Err(IngestError::Invalid(format!("{}: empty viewer_id", self.recording_id)));
        }
        Ok(())
    }
}

/// Gaze velocity in dva per sample at 500 Hz, channel-major `[2, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocitySignal {
    pub recording_id: String,
    pub viewer_id: String,
    pub dataset_id: String,
    values: Vec<f64>,
}

impl VelocitySignal {
    /// `values` is channel-major: all x samples, then all y samples.
    pub fn new(
        recording_id: impl Into<String>,
        viewer_id: impl Into<String>,
        dataset_id: impl Into<String>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.is_empty() || values.len() % 2 != 0 {
            return Err(IngestError::Invalid(format!(
                "velocity signal needs 2 equal-length channels, got {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(IngestError::Invalid("velocity signal contains non-finite values".into()));
        }
        Ok(Self {
            recording_id: recording_id.into(),
            viewer_id: viewer_id.into(),
            dataset_id: dataset_id.into(),
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let t = self.len();
        &self.values[c * t..(c + 1) * t]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// First differences in dva per sample; the first sample is zero.
pub fn to_velocity(
    positions: &[(f64, f64)],
    px_per_dva: f64,
    recording_id: &str,
    viewer_id: &str,
    dataset_id: &str,
) -> Result<VelocitySignal> {
    if !(px_per_dva > 0.0 && px_per_dva.is_finite()) {
        return Err(IngestError::Invalid(format!("px_per_dva must be positive, got {px_per_dva}")));
    }
    if positions.len() < 2 {
        return Err(IngestError::InsufficientData(format!(
            "velocity needs at least 2 samples, got {}",
            positions.len()
        )));
    }
    let t = positions.len();
    let mut values = vec![0.0; 2 * t];
    for i in 1..t {
        values[i] = (positions[i].0 - positions[i - 1].0) / px_per_dva;
        values[t + i] = (positions[i].1 - positions[i - 1].1) / px_per_dva;
    }
    VelocitySignal::new(recording_id, viewer_id, dataset_id, values)
}

/// Resample to 500 Hz and convert to velocity.
pub fn preprocess(rec: &GazeRecording) -> Result<VelocitySignal> {
    rec.validate()?;
    let positions = resample_to_500hz(&rec.positions, rec.sampling_hz)?;
    to_velocity(
        &positions,
        rec.px_per_dva,
        &rec.recording_id,
        &rec.viewer_id,
        &rec.dataset_id,
    )
}

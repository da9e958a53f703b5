//! Synthetic free-viewing gaze with viewer-specific oculomotor statistics.
//!
//! Each viewer draws a persistent profile; each recording alternates
//! drifting fixations with minimum-jerk saccades whose duration follows the
//! saccadic main sequence scaled by the viewer's speed.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use rayon::prelude::*;

use super::{GazeRecording, IngestError, Result, TARGET_HZ};
use crate::rng::{substream, Domain, StreamRng};

const SCREEN_HALF_WIDTH_DVA: f64 = 16.0;
const SCREEN_HALF_HEIGHT_DVA: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_viewers: usize,
    pub recordings_per_viewer: usize,
    pub duration_s: f64,
    pub seed: u64,
    /// Per-channel speed limit in dva per sample.
    pub velocity_cap: f64,
    pub px_per_dva: f64,
    pub dataset_id: String,
}

impl SynthConfig {
    pub fn new(num_viewers: usize, recordings_per_viewer: usize, duration_s: f64, seed: u64) -> Self {
        Self {
            num_viewers,
            recordings_per_viewer,
            duration_s,
            seed,
            velocity_cap: 2.0,
            px_per_dva: 35.0,
            dataset_id: "synthetic".into(),
        }
    }

    pub fn viewer_profile(&self, viewer: usize) -> ViewerProfile {
        let mut rng = substream(self.seed, Domain::Viewer, viewer as u64, 0);
        ViewerProfile {
            fixation_ms: rng.random_range(150.0..450.0),
            saccade_amplitude_dva: rng.random_range(2.0..10.0),
            speed_factor: rng.random_range(0.6..1.4),
            drift_sigma: rng.random_range(0.002..0.02),
            tremor_sigma: rng.random_range(0.003..0.03),
            vertical_ratio: rng.random_range(0.3..1.0),
        }
    }

    pub fn generate(&self) -> Result<Vec<GazeRecording>> {
        if self.num_viewers < 2 {
            return Err(IngestError::Invalid("synthetic corpus needs at least 2 viewers".into()));
        }
        if !(self.duration_s >= 1.0) {
            return Err(IngestError::Invalid("synthetic recordings must last at least 1 s".into()));
        }
        if !(self.velocity_cap > 0.0) {
            return Err(IngestError::Invalid("velocity cap must be positive".into()));
        }
        let profiles: Vec<ViewerProfile> = (0..self.num_viewers).map(|v| self.viewer_profile(v)).collect();
        let total = self.num_viewers * self.recordings_per_viewer;
        let samples = (self.duration_s * TARGET_HZ).round() as usize;
        Ok((0..total)
            .into_par_iter()
            .map(|idx| {
                let viewer = idx / self.recordings_per_viewer;
                let rec = idx % self.recordings_per_viewer;
                let mut rng = substream(self.seed, Domain::Recording, viewer as u64, rec as u64);
                let dva = profiles[viewer].trace(samples, self.velocity_cap, &mut rng);
                GazeRecording {
                    recording_id: format!("v{viewer:03}_r{rec:04}"),
                    viewer_id: format!("v{viewer:03}"),
                    dataset_id: self.dataset_id.clone(),
                    sampling_hz: TARGET_HZ,
                    px_per_dva: self.px_per_dva,
                    positions: dva
                        .into_iter()
                        .map(|(x, y)| {
                            (
                                (x + SCREEN_HALF_WIDTH_DVA) * self.px_per_dva,
                                (y + SCREEN_HALF_HEIGHT_DVA) * self.px_per_dva,
                            )
                        })
                        .collect(),
                }
            })
            .collect())
    }
}

/// Convenience wrapper with default cap and pixel scale.
pub fn synthesize_corpus(
    num_viewers: usize,
    recordings_per_viewer: usize,
    duration_s: f64,
    seed: u64,
) -> Result<Vec<GazeRecording>> {
    SynthConfig::new(num_viewers, recordings_per_viewer, duration_s, seed).generate()
}

/// Idiosyncratic oculomotor parameters of one synthetic viewer.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewerProfile {
    pub fixation_ms: f64,
    pub saccade_amplitude_dva: f64,
    /// Multiplies saccadic peak velocity (shortens saccades).
    pub speed_factor: f64,
    /// Random-walk step of fixational drift, dva per sample.
    pub drift_sigma: f64,
    /// White positional noise, dva.
    pub tremor_sigma: f64,
    /// Vertical to horizontal saccade amplitude ratio.
    pub vertical_ratio: f64,
}

impl ViewerProfile {
    /// Positions in dva relative to the screen centre, `samples` long.
    fn trace(&self, samples: usize, cap: f64, rng: &mut StreamRng) -> Vec<(f64, f64)> {
        let ms_per_sample = 1000.0 / TARGET_HZ;
        let fix_len = Gamma::new(4.0, self.fixation_ms / ms_per_sample / 4.0).expect("gamma");
        let amp = Gamma::new(3.0, self.saccade_amplitude_dva / 3.0).expect("gamma");
        let drift = Normal::new(0.0, self.drift_sigma).expect("normal");
        let tremor = Normal::new(0.0, self.tremor_sigma).expect("normal");

        let mut out = Vec::with_capacity(samples);
        let mut cx = rng.random_range(-5.0..5.0);
        let mut cy = rng.random_range(-4.0..4.0);
        while out.len() < samples {
            let dur = (fix_len.sample(rng) as usize).max(20);
            for _ in 0..dur {
                cx += drift.sample(rng);
                cy += drift.sample(rng);
                out.push((cx + tremor.sample(rng), cy + tremor.sample(rng)));
            }

            let a = amp.sample(rng).clamp(0.3, 20.0);
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let mut dx = a * theta.cos();
            let mut dy = a * theta.sin() * self.vertical_ratio;
            if (cx + dx).abs() > SCREEN_HALF_WIDTH_DVA {
                dx = -dx;
            }
            if (cy + dy).abs() > SCREEN_HALF_HEIGHT_DVA {
                dy = -dy;
            }
            let main_sequence_ms = (2.2 * a + 21.0) / self.speed_factor;
            let mut steps = (main_sequence_ms / ms_per_sample).ceil().max(3.0);
            // minimum-jerk peak velocity is 1.875 * A / D
            steps = steps.max((1.875 * a / (0.9 * cap)).ceil());
            let steps = steps as usize;
            let (sx, sy) = (cx, cy);
            for k in 1..=steps {
                let s = k as f64 / steps as f64;
                let shape = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
                cx = sx + dx * shape;
                cy = sy + dy * shape;
                out.push((cx + tremor.sample(rng), cy + tremor.sample(rng)));
            }
        }
        out.truncate(samples);

        // enforce the per-sample speed limit
        for i in 1..out.len() {
            let (px, py) = out[i - 1];
            let (x, y) = &mut out[i];
            *x = px + (*x - px).clamp(-cap, cap);
            *y = py + (*y - py).clamp(-cap, cap);
        }
        out
    }
}

//! Positive-pair construction: three cropping methods, nine stochastic
//! signal transforms, and contrastive mini-batch assembly.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::ingest::VelocitySignal;
use crate::numcore::{ExecMode, Tensor};
use crate::rng::{substream, Domain, StreamRng};

/// Fraction of the segment affected by dropout and chunk transforms.
pub const CHUNK_FRACTION: f64 = 0.2;
/// Standard deviation of the additive noise transforms.
pub const NOISE_STD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unknown {kind} `{name}`")]
    UnknownName { kind: &'static str, name: String },
}

pub type Result<T> = std::result::Result<T, AugmentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CropMethod {
    Same,
    Consecutive,
    Random,
}

impl CropMethod {
    pub const ALL: [CropMethod; 3] = [CropMethod::Same, CropMethod::Consecutive, CropMethod::Random];

    pub fn name(self) -> &'static str {
        match self {
            CropMethod::Same => "same",
            CropMethod::Consecutive => "consecutive",
            CropMethod::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransformKind {
    Identity,
    Dropout,
    ChunkDropout,
    AlternateDropout,
    ChannelDropout,
    GaussianNoise,
    DropoutAndNoise,
    ChunkCopy,
    ChunkSwap,
}

impl TransformKind {
    pub const ALL: [TransformKind; 9] = [
        TransformKind::Identity,
        TransformKind::Dropout,
        TransformKind::ChunkDropout,
        TransformKind::AlternateDropout,
        TransformKind::ChannelDropout,
        TransformKind::GaussianNoise,
        TransformKind::DropoutAndNoise,
        TransformKind::ChunkCopy,
        TransformKind::ChunkSwap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::Dropout => "dropout",
            TransformKind::ChunkDropout => "chunk_dropout",
            TransformKind::AlternateDropout => "alternate_dropout",
            TransformKind::ChannelDropout => "channel_dropout",
            TransformKind::GaussianNoise => "gaussian_noise",
            TransformKind::DropoutAndNoise => "dropout_noise",
            TransformKind::ChunkCopy => "chunk_copy",
            TransformKind::ChunkSwap => "chunk_swap",
        }
    }
}

macro_rules! name_impls {
    ($t:ty, $kind:literal) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $t {
            type Err = AugmentError;

            fn from_str(s: &str) -> Result<Self> {
                let wanted = s.trim().to_ascii_lowercase().replace('-', "_");
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.name() == wanted)
                    .ok_or_else(|| AugmentError::UnknownName {
                        kind: $kind,
                        name: s.to_string(),
                    })
            }
        }

        impl Serialize for $t {
            fn serialize<Se: Serializer>(&self, s: Se) -> std::result::Result<Se::Ok, Se::Error> {
                s.serialize_str(self.name())
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let name = String::deserialize(d)?;
                name.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

name_impls!(CropMethod, "crop method");
name_impls!(TransformKind, "transform");

/// A `[2, len]` window of a velocity signal, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    len: usize,
    data: Vec<f32>,
}

impl Segment {
    pub fn from_channels(x: &[f32], y: &[f32]) -> Self {
        assert_eq!(x.len(), y.len(), "channels must have equal length");
        let mut data = x.to_vec();
        data.extend_from_slice(y);
        Self { len: x.len(), data }
    }

    fn window(signal: &VelocitySignal, start: usize, len: usize) -> Self {
        // positions past the end of a short signal are zero
        let mut data = vec![0.0f32; 2 * len];
        for c in 0..2 {
            let src = signal.channel(c);
            for t in 0..len {
                if let Some(v) = src.get(start + t) {
                    data[c * len + t] = *v as f32;
                }
            }
        }
        Self { len, data }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        &mut self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn zero_time(&mut self, t: usize) {
        let len = self.len;
        self.data[t] = 0.0;
        self.data[len + t] = 0.0;
    }
}

/// `round(0.2 * len)`, the size of every dropout mask and chunk.
pub fn chunk_len(segment_len: usize) -> usize {
    (CHUNK_FRACTION * segment_len as f64).round() as usize
}

/// Two windows of length `segment_len` forming a positive pair.
///
/// Signals shorter than the window are treated as right-padded with zeros.
/// `Consecutive` falls back to `Random` when the signal is shorter than two
/// windows. Returns the pair and the method actually applied.
pub fn crop_pair(
    signal: &VelocitySignal,
    method: CropMethod,
    segment_len: usize,
    rng: &mut impl Rng,
) -> Result<(Segment, Segment, CropMethod)> {
    if segment_len == 0 {
        return Err(AugmentError::Contract("segment length must be positive".into()));
    }
    let total = signal.len().max(segment_len);
    let max_start = total - segment_len;
    let method = if method == CropMethod::Consecutive && total < 2 * segment_len {
        CropMethod::Random
    } else {
        method
    };
    let (a, b) = match method {
        CropMethod::Same => {
            let s = rng.random_range(0..=max_start);
            (s, s)
        }
        CropMethod::Consecutive => {
            let s = rng.random_range(0..=total - 2 * segment_len);
            if rng.random_bool(0.5) {
                (s, s + segment_len)
            } else {
                (s + segment_len, s)
            }
        }
        CropMethod::Random => (rng.random_range(0..=max_start), rng.random_range(0..=max_start)),
    };
    Ok((
        Segment::window(signal, a, segment_len),
        Segment::window(signal, b, segment_len),
        method,
    ))
}

/// Two non-overlapping chunk starts, uniform over disjoint placements.
fn disjoint_chunks(len: usize, chunk: usize, rng: &mut impl Rng) -> (usize, usize) {
    let max_start = len - chunk;
    loop {
        let a = rng.random_range(0..=max_start);
        let b = rng.random_range(0..=max_start);
        if a.abs_diff(b) >= chunk {
            return (a, b);
        }
    }
}

fn dropout(seg: &mut Segment, rng: &mut impl Rng) {
    let count = chunk_len(seg.len);
    for t in index::sample(rng, seg.len, count) {
        seg.zero_time(t);
    }
}

fn add_noise(seg: &mut Segment, rng: &mut impl Rng) {
    let noise = Normal::new(0.0, NOISE_STD).expect("normal");
    for v in &mut seg.data {
        *v += noise.sample(rng) as f32;
    }
}

/// Applies one transform in place of a copy of `segment`.
pub fn apply_transform(segment: &Segment, kind: TransformKind, rng: &mut impl Rng) -> Result<Segment> {
    let len = segment.len;
    if len < 10 {
        return Err(AugmentError::Contract(format!(
            "transforms need segments of at least 10 samples, got {len}"
        )));
    }
    let chunk = chunk_len(len);
    let mut out = segment.clone();
    match kind {
        TransformKind::Identity => {}
        TransformKind::Dropout => dropout(&mut out, rng),
        TransformKind::ChunkDropout => {
            let s = rng.random_range(0..=len - chunk);
            for t in s..s + chunk {
                out.zero_time(t);
            }
        }
        TransformKind::AlternateDropout => {
            for t in (0..len).step_by(2) {
                out.zero_time(t);
            }
        }
        TransformKind::ChannelDropout => {
            let c = rng.random_range(0..2);
            out.channel_mut(c).fill(0.0);
        }
        TransformKind::GaussianNoise => add_noise(&mut out, rng),
        TransformKind::DropoutAndNoise => {
            dropout(&mut out, rng);
            add_noise(&mut out, rng);
        }
        TransformKind::ChunkCopy => {
            let (src, dst) = disjoint_chunks(len, chunk, rng);
            for c in 0..2 {
                let from = segment.channel(c)[src..src + chunk].to_vec();
                out.channel_mut(c)[dst..dst + chunk].copy_from_slice(&from);
            }
        }
        TransformKind::ChunkSwap => {
            let (a, b) = disjoint_chunks(len, chunk, rng);
            for c in 0..2 {
                let orig = segment.channel(c);
                let ch = out.channel_mut(c);
                ch[a..a + chunk].copy_from_slice(&orig[b..b + chunk]);
                ch[b..b + chunk].copy_from_slice(&orig[a..a + chunk]);
            }
        }
    }
    Ok(out)
}

/// Uniform draw from a non-empty menu.
pub fn choose<T: Copy>(menu: &[T], rng: &mut impl Rng) -> Result<T> {
    if menu.is_empty() {
        return Err(AugmentError::Contract("menu must not be empty".into()));
    }
    Ok(menu[rng.random_range(0..menu.len())])
}

/// Uniform draw over all nine transforms.
pub fn choose_transform(rng: &mut impl Rng) -> TransformKind {
    TransformKind::ALL[rng.random_range(0..TransformKind::ALL.len())]
}

/// Shape and menus of a contrastive batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchSpec<'a> {
    pub pairs: usize,
    pub segment_len: usize,
    pub crops: &'a [CropMethod],
    pub transforms: &'a [TransformKind],
    pub exec: ExecMode,
}

/// `2N` transformed segments; slot `i < N` is paired with slot `i + N`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub pairs: usize,
    pub segment_len: usize,
    /// `[2N, 2, T']`, row-major.
    pub segments: Vec<f32>,
    pub source_ids: Vec<String>,
    pub crops: Vec<CropMethod>,
    pub transforms: Vec<TransformKind>,
}

impl PairBatch {
    pub fn size(&self) -> usize {
        2 * self.pairs
    }

    pub fn pair_of(&self, i: usize) -> usize {
        pair_of(i, self.pairs)
    }

    pub fn segment(&self, i: usize) -> &[f32] {
        let w = 2 * self.segment_len;
        &self.segments[i * w..(i + 1) * w]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.size(), 2, self.segment_len], self.segments.clone()).expect("batch layout")
    }

    /// Exact byte serialization, for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.segments.iter().flat_map(|v| v.to_le_bytes()).collect();
        for id in &self.source_ids {
            out.extend_from_slice(id.as_bytes());
            out.push(0);
        }
        out
    }
}

/// Partner index in the `[a-segments | b-segments]` layout.
pub fn pair_of(i: usize, pairs: usize) -> usize {
    if i < pairs {
        i + pairs
    } else {
        i - pairs
    }
}

fn validate(spec: &BatchSpec<'_>) -> Result<()> {
    if spec.pairs == 0 {
        return Err(AugmentError::Contract("batch needs at least one pair".into()));
    }
    if spec.crops.is_empty() || spec.transforms.is_empty() {
        return Err(AugmentError::Contract("crop and transform menus must be non-empty".into()));
    }
    if spec.segment_len < 10 {
        return Err(AugmentError::Contract(format!(
            "segment length must be at least 10, got {}",
            spec.segment_len
        )));
    }
    Ok(())
}

/// Builds a batch from exactly `spec.pairs` sources, in order. Slot `i`
/// draws from its own substream of `seed`.
pub fn assemble_pairs(sources: &[&VelocitySignal], spec: &BatchSpec<'_>, seed: u64) -> Result<PairBatch> {
    validate(spec)?;
    if sources.len() != spec.pairs {
        return Err(AugmentError::Contract(format!(
            "expected {} sources, got {}",
            spec.pairs,
            sources.len()
        )));
    }
    let build = |i: usize| -> Result<(Segment, Segment, CropMethod, TransformKind, TransformKind)> {
        let mut rng: StreamRng = substream(seed, Domain::Slot, i as u64, 0);
        let method = choose(spec.crops, &mut rng)?;
        let (a, b, used) = crop_pair(sources[i], method, spec.segment_len, &mut rng)?;
        let ka = choose(spec.transforms, &mut rng)?;
        let kb = choose(spec.transforms, &mut rng)?;
        Ok((apply_transform(&a, ka, &mut rng)?, apply_transform(&b, kb, &mut rng)?, used, ka, kb))
    };
    let slots: Vec<_> = match spec.exec {
        ExecMode::Sequential => (0..spec.pairs).map(build).collect::<Result<_>>()?,
        ExecMode::Parallel => (0..spec.pairs).into_par_iter().map(build).collect::<Result<_>>()?,
    };

    let n = spec.pairs;
    let w = 2 * spec.segment_len;
    let mut segments = vec![0.0f32; 2 * n * w];
    let mut transforms = vec![TransformKind::Identity; 2 * n];
    let mut crops = Vec::with_capacity(n);
    for (i, (a, b, used, ka, kb)) in slots.into_iter().enumerate() {
        segments[i * w..(i + 1) * w].copy_from_slice(a.data());
        segments[(i + n) * w..(i + n + 1) * w].copy_from_slice(b.data());
        transforms[i] = ka;
        transforms[i + n] = kb;
        crops.push(used);
    }
    let ids: Vec<String> = sources.iter().map(|s| s.recording_id.clone()).collect();
    let source_ids = ids.iter().chain(ids.iter()).cloned().collect();
    Ok(PairBatch {
        pairs: n,
        segment_len: spec.segment_len,
        segments,
        source_ids,
        crops,
        transforms,
    })
}

/// Samples `spec.pairs` distinct signals and assembles their pairs.
pub fn make_batch(signals: &[VelocitySignal], spec: &BatchSpec<'_>, rng: &mut impl Rng) -> Result<PairBatch> {
    validate(spec)?;
    if signals.len() < spec.pairs {
        return Err(AugmentError::Contract(format!(
            "batch of {} pairs needs at least {} signals, got {}",
            spec.pairs,
            spec.pairs,
            signals.len()
        )));
    }
    let picked: Vec<&VelocitySignal> = index::sample(rng, signals.len(), spec.pairs)
        .into_iter()
        .map(|i| &signals[i])
        .collect();
    let seed = rng.random();
    assemble_pairs(&picked, spec, seed)
}

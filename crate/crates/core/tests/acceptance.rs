//! Acceptance runner. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a subset,
//! e.g. `cargo test --release --test acceptance -- 2 3`.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use gazecon::augment::{apply_transform, choose_transform, chunk_len, CropMethod, Segment, TransformKind};
use gazecon::encoder::{EncoderConfig, EncoderParams};
use gazecon::ingest::{resample_to_500hz, to_velocity, GazeRecording, preprocess};
use gazecon::numcore::{ExecMode, Tensor};
use gazecon::objective::nt_xent;
use gazecon::pipeline::{decode_checkpoint, encode_checkpoint, Checkpoint, LossRecord, TrainConfig};
use gazecon::probe::{ablation_run, cross_validate, embed_corpus, signal_tensor, AblationCell, AblationSettings, SvmConfig};
use rand::seq::SliceRandom;
use rand::Rng;

use common::{gradient_suite, naive_nt_xent, rng, GRAD_TOLERANCE};

const GRAD_TRIALS_PER_OP: usize = 20;
const GRAD_MIN_TRIALS: usize = 100;
const GRAD_BUDGET: Duration = Duration::from_secs(120);

const NTXENT_BATCHES: usize = 1000;
const NTXENT_TOLERANCE: f64 = 1e-10;
const CLOSED_FORM_TOLERANCE: f64 = 1e-6;

const AUGMENT_TRIALS: usize = 10_000;
const AUGMENT_SEGMENT_LEN: usize = 500;
const FREQUENCY_DRAWS: usize = 90_000;
/// Absolute deviation allowed from 1/9 for each transform's draw frequency.
const FREQUENCY_TOLERANCE: f64 = 0.01;
/// Relative deviation allowed for the pooled noise standard deviation.
const NOISE_STD_TOLERANCE: f64 = 0.01;
const AUGMENT_BUDGET: Duration = Duration::from_secs(60);

const PROBE_VIEWERS: usize = 10;
const PROBE_PER_VIEWER: usize = 200;
const PROBE_SECONDS: f64 = 3.0;
const PROBE_DATA_SEED: u64 = 1;
const PROBE_EPOCHS: usize = 50;
const PROBE_MIN_ACCURACY: f64 = 0.80;
const PROBE_BUDGET: Duration = Duration::from_secs(15 * 60);
/// Width of the uniform encoder trained at desk scale.
const DESK_WIDTH: usize = 8;

const ABLATION_SEEDS: [u64; 3] = [11, 12, 13];
const ABLATION_EPOCHS: usize = 10;

const LENGTHS: [usize; 4] = [500, 600, 1250, 2250];

const CUBIC_TOLERANCE: f64 = 1e-9;
const ROUNDTRIP_TOLERANCE: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn exec() -> ExecMode {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    if cores > 1 {
        ExecMode::Parallel
    } else {
        ExecMode::Sequential
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let reports = gradient_suite(GRAD_TRIALS_PER_OP, 2024);
    let elapsed = start.elapsed();
    let trials: usize = reports.iter().map(|r| r.trials).sum();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let per_op: Vec<String> = reports
        .iter()
        .map(|r| format!("{} {:.1e} ({} coords, {} kinks)", r.name, r.max_rel_err, r.checked, r.kinks))
        .collect();
    let pass = worst <= GRAD_TOLERANCE
        && trials >= GRAD_MIN_TRIALS
        && reports.iter().all(|r| r.checked > 0)
        && elapsed < GRAD_BUDGET;
    outcome(
        pass,
        format!(
            "max rel err {worst:.2e} <= {GRAD_TOLERANCE:e} over {trials} trials in {:.1}s (< {}s); {}",
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs(),
            per_op.join(", ")
        ),
    )
}

fn random_pairing(rows: usize, rng: &mut common::TestRng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rows).collect();
    idx.shuffle(rng);
    let mut pair_of = vec![0; rows];
    for p in idx.chunks(2) {
        pair_of[p[0]] = p[1];
        pair_of[p[1]] = p[0];
    }
    pair_of
}

fn nt_xent_oracle() -> Outcome {
    let mut rng = rng(7);
    let mut worst = 0.0f64;
    for _ in 0..NTXENT_BATCHES {
        let rows = 2 * rng.random_range(2..=8);
        let d = rng.random_range(2..=16);
        let tau = rng.random_range(0.05..1.0);
        let z: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let pair_of = random_pairing(rows, &mut rng);
        let t = Tensor::new(vec![rows, d], z.concat()).unwrap();
        let lib = nt_xent(&t, &pair_of, tau).unwrap().total;
        worst = worst.max((lib - naive_nt_xent(&z, &pair_of, tau)).abs());
    }
    let tau = 0.3;
    let z = Tensor::new(vec![4, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    let closed = nt_xent(&z, &[1, 0, 3, 2], tau).unwrap().total;
    let expected = -((1.0f64 / tau).exp() / ((1.0f64 / tau).exp() + 2.0)).ln();
    let pass = worst <= NTXENT_TOLERANCE && (closed - expected).abs() <= CLOSED_FORM_TOLERANCE;
    outcome(
        pass,
        format!(
            "max |lib - naive| {worst:.2e} <= {NTXENT_TOLERANCE:e} over {NTXENT_BATCHES} batches; closed form {closed:.7} vs {expected:.7} (tol {CLOSED_FORM_TOLERANCE:e})"
        ),
    )
}

fn random_segment(rng: &mut common::TestRng, len: usize) -> Segment {
    // magnitudes bounded away from zero so zeroed samples are unambiguous
    let mut draw = || {
        let v: f32 = rng.random_range(0.5..1.5);
        if rng.random_bool(0.5) { v } else { -v }
    };
    let x: Vec<f32> = (0..len).map(|_| draw()).collect();
    let y: Vec<f32> = (0..len).map(|_| draw()).collect();
    Segment::from_channels(&x, &y)
}

fn zero_mask(ch: &[f32]) -> Vec<bool> {
    ch.iter().map(|v| *v == 0.0).collect()
}

/// Checks one transform output against its input; returns a description of
/// the first violated property.
fn check_transform(kind: TransformKind, input: &Segment, out: &Segment, noise: &mut (f64, usize)) -> Result<(), String> {
    let len = input.len();
    let chunk = chunk_len(len);
    let (ix, iy, ox, oy) = (input.channel(0), input.channel(1), out.channel(0), out.channel(1));
    let unchanged_or_zero = |masked: &[bool]| {
        (0..len).all(|t| if masked[t] { ox[t] == 0.0 && oy[t] == 0.0 } else { ox[t] == ix[t] && oy[t] == iy[t] })
    };
    match kind {
        TransformKind::Identity => (out == input).then_some(()).ok_or("identity changed the segment".into()),
        TransformKind::Dropout | TransformKind::ChunkDropout | TransformKind::AlternateDropout => {
            let (mx, my) = (zero_mask(ox), zero_mask(oy));
            if mx != my {
                return Err(format!("{kind:?}: channel masks differ"));
            }
            let expected = if kind == TransformKind::AlternateDropout { len.div_ceil(2) } else { chunk };
            let count = mx.iter().filter(|m| **m).count();
            if count != expected {
                return Err(format!("{kind:?}: {count} zeroed steps, expected {expected}"));
            }
            if kind == TransformKind::ChunkDropout {
                let first = mx.iter().position(|m| *m).unwrap();
                if !mx[first..first + chunk].iter().all(|m| *m) {
                    return Err("chunk dropout mask is not contiguous".into());
                }
            }
            if kind == TransformKind::AlternateDropout && !(0..len).all(|t| mx[t] == (t % 2 == 0)) {
                return Err("alternate dropout must zero even steps".into());
            }
            unchanged_or_zero(&mx).then_some(()).ok_or(format!("{kind:?}: unmasked values changed"))
        }
        TransformKind::ChannelDropout => {
            let ok = (ox.iter().all(|v| *v == 0.0) && oy == iy) || (oy.iter().all(|v| *v == 0.0) && ox == ix);
            ok.then_some(()).ok_or("channel dropout must zero exactly one channel".into())
        }
        TransformKind::GaussianNoise => {
            for (o, i) in out.data().iter().zip(input.data()) {
                let e = (*o - *i) as f64;
                noise.0 += e * e;
                noise.1 += 1;
            }
            Ok(())
        }
        TransformKind::DropoutAndNoise => {
            // zeroed steps become pure noise; the rest are perturbed inputs
            let n = out.data().iter().zip(input.data()).filter(|(o, i)| **o != **i).count();
            (n == 2 * len).then_some(()).ok_or("dropout+noise must perturb every value".into())
        }
        TransformKind::ChunkSwap => {
            for (o, i) in [(ox, ix), (oy, iy)] {
                let mut a = o.to_vec();
                let mut b = i.to_vec();
                a.sort_by(f32::total_cmp);
                b.sort_by(f32::total_cmp);
                if a != b {
                    return Err("chunk swap changed the value multiset".into());
                }
            }
            let changed = (0..len).filter(|t| ox[*t] != ix[*t]).count();
            (changed == 2 * chunk).then_some(()).ok_or(format!("chunk swap changed {changed} steps, expected {}", 2 * chunk))
        }
        TransformKind::ChunkCopy => {
            let dst = (0..len).position(|t| ox[t] != ix[t]).ok_or("chunk copy changed nothing")?;
            if dst + chunk > len {
                return Err("chunk copy destination out of range".into());
            }
            let outside = (0..len).filter(|t| !(dst..dst + chunk).contains(t)).all(|t| ox[t] == ix[t] && oy[t] == iy[t]);
            let source = (0..=len - chunk).find(|s| {
                s.abs_diff(dst) >= chunk && ox[dst..dst + chunk] == ix[*s..s + chunk] && oy[dst..dst + chunk] == iy[*s..s + chunk]
            });
            (outside && source.is_some())
                .then_some(())
                .ok_or("chunk copy must duplicate one disjoint chunk and leave the rest".into())
        }
    }
}

fn augmentation() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(99);
    let mut noise = (0.0, 0usize);
    let mut failure = None;
    'outer: for kind in TransformKind::ALL {
        for _ in 0..AUGMENT_TRIALS {
            let seg = random_segment(&mut rng, AUGMENT_SEGMENT_LEN);
            let out = apply_transform(&seg, kind, &mut rng).unwrap();
            if let Err(e) = check_transform(kind, &seg, &out, &mut noise) {
                failure = Some(e);
                break 'outer;
            }
        }
    }
    let noise_std = (noise.0 / noise.1.max(1) as f64).sqrt();
    let noise_ok = (noise_std / 0.5 - 1.0).abs() <= NOISE_STD_TOLERANCE;

    let mut counts = [0usize; 9];
    for _ in 0..FREQUENCY_DRAWS {
        let k = choose_transform(&mut rng);
        counts[TransformKind::ALL.iter().position(|t| *t == k).unwrap()] += 1;
    }
    let freqs: Vec<f64> = counts.iter().map(|c| *c as f64 / FREQUENCY_DRAWS as f64).collect();
    let worst_freq = freqs.iter().map(|f| (f - 1.0 / 9.0).abs()).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let pass = failure.is_none() && noise_ok && worst_freq <= FREQUENCY_TOLERANCE && elapsed < AUGMENT_BUDGET;
    outcome(
        pass,
        format!(
            "{} trials x 9 transforms at T'={AUGMENT_SEGMENT_LEN}: {}; noise std {noise_std:.4} (tol {:.0}%); max |freq - 1/9| {worst_freq:.4} <= {FREQUENCY_TOLERANCE} over {FREQUENCY_DRAWS} draws; {:.1}s (< {}s)",
            AUGMENT_TRIALS,
            failure.unwrap_or_else(|| "all properties hold".into()),
            NOISE_STD_TOLERANCE * 100.0,
            elapsed.as_secs_f64(),
            AUGMENT_BUDGET.as_secs()
        ),
    )
}

fn desk_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        encoder: EncoderConfig::uniform(DESK_WIDTH),
        epochs,
        seed,
        parallel: exec() == ExecMode::Parallel,
        ..TrainConfig::desk()
    }
}

fn probe() -> Outcome {
    let start = Instant::now();
    let corpus = common::corpus(PROBE_VIEWERS, PROBE_PER_VIEWER, PROBE_SECONDS, PROBE_DATA_SEED);
    let config = desk_config(1, PROBE_EPOCHS);
    let fingerprint = config.fingerprint();
    let (state, log) = gazecon::pipeline::train(config, &corpus).unwrap();
    let embeddings = embed_corpus(&state.params, &corpus, exec()).unwrap();
    let report = cross_validate(&embeddings, 5, SvmConfig::default(), 0, &fingerprint).unwrap();
    let elapsed = start.elapsed();
    let epoch_mean = |e: usize| {
        let losses: Vec<f64> = log.iter().filter(|r| r.epoch == e).map(|r| r.loss).collect();
        losses.iter().sum::<f64>() / losses.len() as f64
    };
    let (first, last) = (epoch_mean(0), epoch_mean(PROBE_EPOCHS - 1));
    let pass = report.accuracy >= PROBE_MIN_ACCURACY && last < first && elapsed <= PROBE_BUDGET;
    outcome(
        pass,
        format!(
            "5-fold accuracy {:.4} >= {PROBE_MIN_ACCURACY} (chance 0.10; folds {:?}); {} iterations, epoch mean loss {first:.3} -> {last:.3}; {:.0}s (<= {}s)",
            report.accuracy,
            report.fold_accuracies.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>(),
            log.len(),
            elapsed.as_secs_f64(),
            PROBE_BUDGET.as_secs()
        ),
    )
}

fn ablation() -> Outcome {
    let start = Instant::now();
    let corpus = common::corpus(PROBE_VIEWERS, PROBE_PER_VIEWER, PROBE_SECONDS, PROBE_DATA_SEED);
    let grid = [
        AblationCell::new("Same, Identity", &[CropMethod::Same], &[TransformKind::Identity]),
        AblationCell::new("Random, all transforms", &[CropMethod::Random], &TransformKind::ALL),
    ];
    let settings = AblationSettings {
        base: desk_config(0, ABLATION_EPOCHS),
        seeds: ABLATION_SEEDS.to_vec(),
        folds: 5,
        svm: SvmConfig::default(),
    };
    let rows = ablation_run(&grid, &corpus, &settings);
    let describe = |i: usize| {
        let r = &rows[i];
        match (&r.error, r.mean_accuracy) {
            (None, Some(m)) => format!(
                "{} mean {m:.4} {:?}",
                r.cell.name,
                r.accuracies.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>()
            ),
            (e, _) => format!("{} failed: {}", r.cell.name, e.as_deref().unwrap_or("no accuracies")),
        }
    };
    let pass = matches!((rows[0].mean_accuracy, rows[1].mean_accuracy), (Some(a), Some(b)) if b > a);
    outcome(
        pass,
        format!(
            "{} < {} (strict, {} seeds, {ABLATION_EPOCHS} epochs each); {:.0}s",
            describe(0),
            describe(1),
            ABLATION_SEEDS.len(),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn small_config() -> TrainConfig {
    TrainConfig {
        segment_len: 64,
        batch_size: 8,
        epochs: 2,
        seed: 5,
        parallel: false,
        encoder: common::small_train_encoder(),
        ..TrainConfig::default()
    }
}

fn run_losses(state: &mut Checkpoint, corpus: &[gazecon::ingest::VelocitySignal]) -> Vec<LossRecord> {
    state.run(corpus, |_| {}).unwrap()
}

fn determinism() -> Outcome {
    let corpus = common::corpus(4, 6, 1.0, 3);
    let five = TrainConfig {
        max_iterations: Some(5),
        ..small_config()
    };
    let a = run_losses(&mut Checkpoint::fresh(five.clone()).unwrap(), &corpus);
    let b = run_losses(&mut Checkpoint::fresh(five).unwrap(), &corpus);
    let bits = |log: &[LossRecord]| log.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    let identical = a.len() == 5 && bits(&a) == bits(&b);

    let mut full = Checkpoint::fresh(small_config()).unwrap();
    let uninterrupted = run_losses(&mut full, &corpus);
    let mut partial = Checkpoint::fresh(TrainConfig {
        max_iterations: Some(4),
        ..small_config()
    })
    .unwrap();
    let mut resumed = run_losses(&mut partial, &corpus);
    let bytes = encode_checkpoint(&partial);
    let mut restored = decode_checkpoint(&bytes).unwrap();
    let byte_identical = encode_checkpoint(&restored) == bytes && restored == partial;
    restored.config.max_iterations = None;
    resumed.extend(run_losses(&mut restored, &corpus));
    let resume_exact = bits(&resumed) == bits(&uninterrupted) && encode_checkpoint(&restored) == encode_checkpoint(&full);

    outcome(
        identical && resume_exact && byte_identical,
        format!(
            "5-iteration logs bit-identical: {identical}; resume after 4 of {} iterations matches uninterrupted run and final state: {resume_exact}; checkpoint roundtrip byte-identical: {byte_identical}",
            uninterrupted.len()
        ),
    )
}

fn arbitrary_length() -> Outcome {
    let params = EncoderParams::<f32>::init(&EncoderConfig::default(), 0).unwrap();
    let mut rng = rng(31);
    let mut shapes = Vec::new();
    let mut ok = true;
    for t in LENGTHS {
        let data = (0..2 * t).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        match params.encode(&Tensor::new(vec![2, t], data).unwrap()) {
            Ok(h) => {
                ok &= h.shape() == [512] && h.is_finite();
                shapes.push(format!("T={t} -> {:?}", h.shape()));
            }
            Err(e) => {
                ok = false;
                shapes.push(format!("T={t} -> error {e}"));
            }
        }
    }
    let mixed: Vec<_> = [1.0, 1.2, 2.5, 4.5, 3.3]
        .iter()
        .enumerate()
        .flat_map(|(i, secs)| common::corpus(2, 1, *secs, 40 + i as u64).into_iter().enumerate().map(move |(j, mut s)| {
            s.recording_id = format!("mix{i}_{j}");
            s
        }))
        .collect();
    let lens: Vec<usize> = mixed.iter().map(|s| s.len()).collect();
    let mixed_ok = match embed_corpus(&params, &mixed, exec()) {
        Ok(set) => set.rows().iter().zip(&mixed).all(|(row, s)| {
            // each row must equal encoding the signal on its own
            row.h.len() == 512
                && row.h.iter().all(|v| v.is_finite())
                && params.encode(&signal_tensor(s)).unwrap().data() == row.h.as_slice()
        }),
        Err(_) => false,
    };
    outcome(
        ok && mixed_ok,
        format!("{}; mixed corpus lengths {lens:?} embedded finite and per-signal exact: {mixed_ok}", shapes.join(", ")),
    )
}

fn preprocessing() -> Outcome {
    let mut rng = rng(17);
    let raw: Vec<(f64, f64)> = (0..1001).map(|_| (rng.random_range(0.0..1920.0), rng.random_range(0.0..1080.0))).collect();
    let decimated = resample_to_500hz(&raw, 1000.0).unwrap();
    let expected: Vec<(f64, f64)> = raw.iter().step_by(2).copied().collect();
    let decimation_exact = decimated == expected;

    let cx = |t: f64| 400.0 + 120.0 * t - 35.0 * t * t + 8.0 * t * t * t;
    let cy = |t: f64| 300.0 - 60.0 * t + 12.0 * t * t - 2.5 * t * t * t;
    let slow: Vec<(f64, f64)> = (0..750).map(|i| i as f64 / 250.0).map(|t| (cx(t), cy(t))).collect();
    let up = resample_to_500hz(&slow, 250.0).unwrap();
    let cubic_err = up
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let t = k as f64 / 500.0;
            (p.0 - cx(t)).abs().max((p.1 - cy(t)).abs())
        })
        .fold(0.0, f64::max);

    let px = 35.0;
    let velocity = to_velocity(&raw, px, "r", "v", "d").unwrap();
    let (mut x, mut y) = raw[0];
    let mut roundtrip_err = 0.0f64;
    for (i, p) in raw.iter().enumerate().skip(1) {
        x += velocity.channel(0)[i] * px;
        y += velocity.channel(1)[i] * px;
        roundtrip_err = roundtrip_err.max((x - p.0).abs()).max((y - p.1).abs());
    }
    let rec = GazeRecording {
        recording_id: "r".into(),
        viewer_id: "v".into(),
        dataset_id: "d".into(),
        sampling_hz: 1000.0,
        px_per_dva: px,
        positions: raw.clone(),
    };
    let pipeline_len = preprocess(&rec).unwrap().len();
    let pass = decimation_exact
        && pipeline_len == expected.len()
        && up.len() == 2 * slow.len()
        && cubic_err <= CUBIC_TOLERANCE
        && roundtrip_err <= ROUNDTRIP_TOLERANCE;
    outcome(
        pass,
        format!(
            "decimation exact: {decimation_exact}; cubic max err {cubic_err:.2e} <= {CUBIC_TOLERANCE:e}; velocity roundtrip max err {roundtrip_err:.2e} px <= {ROUNDTRIP_TOLERANCE:e}"
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient correctness", gradients),
        ("nt-xent oracle equivalence", nt_xent_oracle),
        ("augmentation properties", augmentation),
        ("synthetic biometric probe", probe),
        ("ablation direction", ablation),
        ("determinism and persistence", determinism),
        ("arbitrary-length encoding", arbitrary_length),
        ("preprocessing fidelity", preprocessing),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !selected.is_empty() && !selected.contains(&number) {
            continue;
        }
        let start = Instant::now();
        let result = check();
        let status = if result.pass { "PASS" } else { "FAIL" };
        println!("[{status}] {number}. {name} ({:.1}s): {}", start.elapsed().as_secs_f64(), result.detail);
        failed += usize::from(!result.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

use gazecon::augment::{apply_transform, chunk_len, crop_pair, CropMethod, Segment, TransformKind};
use gazecon::ingest::VelocitySignal;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Signal whose samples encode their own index, so windows can be located.
fn indexed_signal(len: usize) -> VelocitySignal {
    let mut values: Vec<f64> = (0..len).map(|t| (t + 1) as f64).collect();
    values.extend((0..len).map(|t| -((t + 1) as f64)));
    VelocitySignal::new("r", "v", "d", values).unwrap()
}

/// Start of the window a segment was cut from; padding reads as index 0.
fn window_start(seg: &Segment) -> usize {
    seg.channel(0)[0] as usize - 1
}

fn is_window(seg: &Segment, signal_len: usize) -> bool {
    let start = window_start(seg);
    (0..seg.len()).all(|t| {
        let want = if start + t < signal_len { (start + t + 1) as f32 } else { 0.0 };
        seg.channel(0)[t] == want && seg.channel(1)[t] == -want
    })
}

fn segment(values: &[f32]) -> Segment {
    let half = values.len() / 2;
    Segment::from_channels(&values[..half], &values[half..])
}

fn nonzero_values(len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(prop_oneof![0.25f32..4.0, -4.0f32..-0.25], 2 * len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn crops_are_windows_of_the_source(len in 20usize..400, seg in 10usize..120, seed: u64) {
        let signal = indexed_signal(len);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for method in CropMethod::ALL {
            let (a, b, used) = crop_pair(&signal, method, seg, &mut rng).unwrap();
            prop_assert_eq!((a.len(), b.len()), (seg, seg));
            prop_assert!(is_window(&a, len) && is_window(&b, len));
            match used {
                CropMethod::Same => prop_assert_eq!(&a, &b),
                CropMethod::Consecutive => {
                    prop_assert!(len >= 2 * seg);
                    prop_assert_eq!(window_start(&a).abs_diff(window_start(&b)), seg);
                }
                CropMethod::Random => prop_assert!(method == CropMethod::Random || len < 2 * seg),
            }
        }
    }

    #[test]
    fn dropout_family_zeroes_shared_steps(values in (10usize..300).prop_flat_map(nonzero_values), seed: u64) {
        let seg = segment(&values);
        let len = seg.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for kind in [TransformKind::Dropout, TransformKind::ChunkDropout, TransformKind::AlternateDropout] {
            let out = apply_transform(&seg, kind, &mut rng).unwrap();
            let zeros: Vec<usize> = (0..len).filter(|t| out.channel(0)[*t] == 0.0).collect();
            let expected = if kind == TransformKind::AlternateDropout { len.div_ceil(2) } else { chunk_len(len) };
            prop_assert_eq!(zeros.len(), expected);
            for t in 0..len {
                let masked = zeros.binary_search(&t).is_ok();
                prop_assert_eq!(out.channel(1)[t] == 0.0, masked);
                if !masked {
                    prop_assert_eq!((out.channel(0)[t], out.channel(1)[t]), (seg.channel(0)[t], seg.channel(1)[t]));
                }
            }
            if kind == TransformKind::ChunkDropout && !zeros.is_empty() {
                prop_assert_eq!(zeros[zeros.len() - 1] - zeros[0] + 1, zeros.len());
            }
        }
    }

    #[test]
    fn channel_dropout_zeroes_one_channel(values in (10usize..200).prop_flat_map(nonzero_values), seed: u64) {
        let seg = segment(&values);
        let out = apply_transform(&seg, TransformKind::ChannelDropout, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let zeroed: Vec<usize> = (0..2).filter(|c| out.channel(*c).iter().all(|v| *v == 0.0)).collect();
        prop_assert_eq!(zeroed.len(), 1);
        let kept = 1 - zeroed[0];
        prop_assert_eq!(out.channel(kept), seg.channel(kept));
    }

    #[test]
    fn chunk_swap_and_copy_move_whole_chunks(values in (10usize..300).prop_flat_map(nonzero_values), seed: u64) {
        let seg = segment(&values);
        let len = seg.len();
        let chunk = chunk_len(len);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let swapped = apply_transform(&seg, TransformKind::ChunkSwap, &mut rng).unwrap();
        for c in 0..2 {
            let mut a = swapped.channel(c).to_vec();
            let mut b = seg.channel(c).to_vec();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            prop_assert_eq!(a, b);
        }

        let copied = apply_transform(&seg, TransformKind::ChunkCopy, &mut rng).unwrap();
        let changed: Vec<usize> = (0..len).filter(|t| copied.channel(0)[*t] != seg.channel(0)[*t]).collect();
        prop_assert!(!changed.is_empty());
        let dst = changed[0];
        prop_assert!(changed[changed.len() - 1] < dst + chunk && dst + chunk <= len);
        let found = (0..=len - chunk).any(|s| {
            s.abs_diff(dst) >= chunk
                && (0..2).all(|c| copied.channel(c)[dst..dst + chunk] == seg.channel(c)[s..s + chunk])
        });
        prop_assert!(found);
    }

    #[test]
    fn transforms_preserve_shape_and_determinism(values in (10usize..100).prop_flat_map(nonzero_values), seed: u64) {
        let seg = segment(&values);
        for kind in TransformKind::ALL {
            let a = apply_transform(&seg, kind, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = apply_transform(&seg, kind, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(a.len(), seg.len());
            prop_assert_eq!(&a, &b);
        }
    }
}

#[test]
fn short_segments_are_rejected() {
    let seg = Segment::from_channels(&[1.0; 9], &[1.0; 9]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(apply_transform(&seg, TransformKind::Identity, &mut rng).is_err());
    assert!(crop_pair(&indexed_signal(50), CropMethod::Same, 0, &mut rng).is_err());
}

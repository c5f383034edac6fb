use std::io::Cursor;

use genlie_core::aligner::mean_pool;
use genlie_core::cues::{parse_cue_track, CorpusManifest, FrameCueRecord, Label, VideoCueTrack, GAZE_DIM};
use genlie_core::encoder::FeatureBank;
use genlie_core::gradcheck::fixture;
use genlie_core::metrics;
use genlie_core::model::{checkpoint_bytes, params_from_checkpoint, ModelDims};
use genlie_core::preprocess::{preprocess, segment_ranges, PreprocessConfig, Strategy as Selection, FRAME_BUDGET};
use genlie_core::synth::{generate_corpus, SynthConfig};
use proptest::prelude::*;

fn frame(au: usize, kp: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<(f64, f64)>)> {
    (
        prop::collection::vec(0.0f64..=5.0, au),
        prop::collection::vec(-1.0f64..1.0, GAZE_DIM),
        prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), kp),
    )
}

fn track() -> impl Strategy<Value = VideoCueTrack> {
    (1usize..6, 1usize..4)
        .prop_flat_map(|(au, kp)| {
            (
                Just((au, kp)),
                prop::collection::vec(frame(au, kp), 1..40),
                any::<bool>(),
                1.0f64..120.0,
            )
        })
        .prop_map(|((au, kp), frames, deceptive, fps)| VideoCueTrack {
            video_id: "vid".into(),
            speaker_id: "spk".into(),
            label: if deceptive { Label::Deceptive } else { Label::Truthful },
            fps,
            au_count: au,
            keypoint_count: kp,
            frames: frames
                .into_iter()
                .enumerate()
                .map(|(i, (a, g, p))| FrameCueRecord {
                    frame_index: i,
                    au_intensities: a,
                    gaze_descriptor: g,
                    pose_keypoints: p,
                })
                .collect(),
        })
}

fn strategy() -> impl Strategy<Value = Selection> {
    prop_oneof![
        Just(Selection::Uniform),
        Just(Selection::Au),
        Just(Selection::MicroExpression),
        Just(Selection::Gaze),
        Just(Selection::Posture),
        Just(Selection::Fusion),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cue_track_text_round_trip(t in track()) {
        let text = t.serialize();
        let back = parse_cue_track(Cursor::new(text.as_bytes())).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn segments_tile_the_video(t in 1usize..2000, n in 1usize..200) {
        let ranges = segment_ranges(t, n).unwrap();
        prop_assert_eq!(ranges.len(), n);
        prop_assert_eq!(ranges[0].start, 0);
        prop_assert_eq!(ranges[n - 1].end, t);
        let lens: Vec<usize> = ranges.iter().map(|r| r.len()).collect();
        prop_assert!(lens.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
        prop_assert!(ranges.windows(2).all(|w| w[0].end == w[1].start));
    }

    #[test]
    fn selection_respects_budget(t in track(), log_n in 0u32..=7, s in strategy()) {
        let n = 1usize << log_n;
        let cfg = PreprocessConfig {
            n_segments: n,
            frames_per_segment: FRAME_BUDGET / n,
            strategy: s,
            ..PreprocessConfig::default()
        };
        let sel = preprocess(&t, &cfg).unwrap();
        prop_assert_eq!(sel.total_selected(), t.len().min(FRAME_BUDGET));
        for seg in &sel.segments {
            prop_assert!(seg.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn mean_pool_ignores_order(rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..12)) {
        let pooled = mean_pool(&rows).unwrap();
        let mut reversed = rows.clone();
        reversed.reverse();
        let back = mean_pool(&reversed).unwrap();
        for (a, b) in pooled.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn auc_depends_only_on_order(
        pairs in prop::collection::vec((-5.0f64..5.0, 0u8..2), 2..150),
        shift in -3.0f64..3.0,
    ) {
        let (scores, mut labels): (Vec<f64>, Vec<u8>) = pairs.into_iter().unzip();
        labels[0] = 0;
        labels[1] = 1;
        let auc = metrics::auc(&scores, &labels).unwrap();
        let moved: Vec<f64> = scores.iter().map(|s| s.exp() + shift).collect();
        prop_assert_eq!(metrics::auc(&moved, &labels).unwrap(), auc);
        let flipped: Vec<u8> = labels.iter().map(|y| 1 - y).collect();
        prop_assert!((metrics::auc(&scores, &flipped).unwrap() - (100.0 - auc)).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), d in 1usize..8, h in 1usize..8, o in 1usize..8, c in 2usize..5) {
        let dims = ModelDims { d, hidden: h, d_out: o, n_speakers: c };
        let (params, _) = fixture(seed, dims, 2).unwrap();
        let back = params_from_checkpoint(&checkpoint_bytes(&params), 0.0).unwrap();
        prop_assert_eq!(back, params);
    }

    #[test]
    fn feature_bank_round_trip(rows in prop::collection::vec(prop::collection::vec(-1e3f32..1e3, 3), 1..10)) {
        let mut bank = FeatureBank::new(3);
        for (i, r) in rows.iter().enumerate() {
            bank.insert("v", i as u32, r.clone()).unwrap();
        }
        let back = FeatureBank::from_bytes(&bank.to_bytes()).unwrap();
        prop_assert_eq!(back.to_bytes(), bank.to_bytes());
        prop_assert_eq!(back.len(), rows.len());
    }
}

#[test]
fn synthetic_corpus_reloads_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n_speakers: 2,
        videos_per_speaker: 3,
        frames_per_video: 64,
        ..SynthConfig::default()
    };
    let (manifest, _) = generate_corpus(&cfg).unwrap();
    let path = manifest.write_to_dir(dir.path()).unwrap();
    let loaded = genlie_core::cues::load_manifest(&path).unwrap();
    assert_eq!(loaded.videos(), manifest.videos());
    assert_eq!(loaded.speaker_index(), manifest.speaker_index());
    let rebuilt = CorpusManifest::from_tracks(loaded.videos().to_vec(), cfg.au_count, cfg.keypoint_count).unwrap();
    assert_eq!(rebuilt.n_speakers(), 2);
}

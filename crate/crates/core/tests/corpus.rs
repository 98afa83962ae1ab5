use std::fs;

use minute::corpus::{
    generate_synthetic_corpus, load_corpus, read_features, save_corpus, temporal_iou, write_features, CorpusError,
    Span, SyntheticConfig,
};
use minute::numerics::Tensor;
use proptest::prelude::*;

fn small(noise: f64) -> SyntheticConfig {
    SyntheticConfig {
        n_videos: 50,
        min_frames: 12,
        max_frames: 20,
        noise_std: noise,
        train_queries_per_video: 1,
        ..SyntheticConfig::default()
    }
}

fn nearest(table: &Tensor<f32>, x: &[f32], rows: std::ops::Range<usize>) -> usize {
    let dist = |r: usize| -> f64 {
        table
            .row(r)
            .iter()
            .zip(x)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum()
    };
    rows.min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap()
}

#[test]
fn same_seed_gives_identical_files() {
    let cfg = small(0.1);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_corpus(a.path(), &generate_synthetic_corpus(&cfg, 3).unwrap().corpus).unwrap();
    save_corpus(b.path(), &generate_synthetic_corpus(&cfg, 3).unwrap().corpus).unwrap();
    let mut files = 0;
    for entry in walk(a.path()) {
        let rel = entry.strip_prefix(a.path()).unwrap();
        assert_eq!(fs::read(&entry).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel:?}");
        files += 1;
    }
    assert!(files > 100);
    let other = generate_synthetic_corpus(&cfg, 4).unwrap().corpus;
    assert_ne!(other, generate_synthetic_corpus(&cfg, 3).unwrap().corpus);
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn noise_free_nearest_neighbour_oracle_recovers_every_moment() {
    let out = generate_synthetic_corpus(&small(0.0), 9).unwrap();
    let (corpus, truth) = (&out.corpus, &out.truth);
    let n_c = truth.image_table.rows();
    let mut checked = 0;
    for q in corpus.queries.values().flatten() {
        // Decode words to concepts, frames to concepts, then find the frames
        // where a decoded visual and dialogue concept co-occur.
        let words: Vec<usize> = (0..q.n_words())
            .map(|i| nearest(&truth.word_table, q.word_features.row(i), 0..truth.word_table.rows()))
            .collect();
        let a = *words.iter().find(|&&w| w < n_c).unwrap();
        let b = *words.iter().find(|&&w| (n_c..2 * n_c).contains(&w)).unwrap() - n_c;
        let mut hits = Vec::new();
        for v in &corpus.videos {
            for j in 0..v.n_frames() {
                let f = v.frame(j);
                let img = nearest(&truth.image_table, f.image_feature, 0..n_c);
                let sub = f
                    .has_subtitle
                    .then(|| nearest(&truth.subtitle_table, f.subtitle_feature, 0..n_c));
                if img == a && sub == Some(b) {
                    hits.push((v.video_id.clone(), j));
                }
            }
        }
        let gt = q.ground_truth.as_ref().unwrap();
        let expect: Vec<_> = (gt.st_frame..=gt.ed_frame).map(|j| (gt.video_id.clone(), j)).collect();
        assert_eq!(hits, expect, "query {}", q.query_id);
        checked += 1;
    }
    assert_eq!(checked, 100);
}

#[test]
fn round_trip_through_disk() {
    let corpus = generate_synthetic_corpus(&small(0.1), 1).unwrap().corpus;
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_corpus(dir.path(), &corpus).unwrap();
    let (m, loaded) = load_corpus(&manifest).unwrap();
    assert_eq!(loaded, corpus);
    assert_eq!(m.videos.len(), 50);
}

#[test]
fn truncated_feature_file_reports_frame_count() {
    let corpus = generate_synthetic_corpus(&small(0.1), 1).unwrap().corpus;
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_corpus(dir.path(), &corpus).unwrap();
    let v = &corpus.videos[0];
    let path = dir.path().join("features").join(format!("{}.img.mntf", v.video_id));
    let n = v.n_frames() - 1;
    let short = Tensor::new(&[n, v.d_img()], v.image_features.data()[..n * v.d_img()].to_vec()).unwrap();
    write_features(&path, &short).unwrap();
    let err = load_corpus(&manifest).unwrap_err();
    assert!(matches!(err, CorpusError::FrameCountMismatch { .. }));
    assert!(err.to_string().contains("frame count mismatch"), "{err}");
}

#[test]
fn manifest_dimension_disagreement_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.mntf");
    write_features(&path, &Tensor::zeros(&[4, 16])).unwrap();
    let err = read_features(&path, Some(4), Some(32)).unwrap_err();
    assert!(err.to_string().contains("dimension mismatch"), "{err}");
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in 0usize..50, la in 0usize..20, b in 0usize..50, lb in 0usize..20) {
        let x = Span::new(a, a + la);
        let y = Span::new(b, b + lb);
        let i = temporal_iou(x, y).unwrap();
        prop_assert_eq!(i, temporal_iou(y, x).unwrap());
        prop_assert!((0.0..=1.0).contains(&i));
        prop_assert_eq!(temporal_iou(x, x).unwrap(), 1.0);
    }

    #[test]
    fn arbitrary_bytes_never_panic_the_reader(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.mntf");
        fs::write(&path, &bytes).unwrap();
        let _ = read_features(&path, Some(2), Some(3));
    }
}

#[test]
fn default_config_resolves_every_accidental_cooccurrence() {
    for seed in 0..3 {
        let out = generate_synthetic_corpus(&SyntheticConfig::default(), seed).unwrap();
        assert_eq!(out.truth.unresolved_conflicts, 0, "seed {seed}");
        assert_eq!(out.corpus.split("eval").len(), 200);
        assert!(!out.truth.distractors.is_empty());
    }
}

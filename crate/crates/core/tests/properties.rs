use std::collections::BTreeSet;

use proptest::collection::vec;
use proptest::prelude::*;

use drift_audit::analysis::{
    centroid_variance, cross_domain_normalize, jsd_from_histograms, mean_intra_distance, wasserstein_1d,
};
use drift_audit::chain::{parse_dataset, serialize_to_vec, AuditDataset, ParseOptions, RecommendationChain, VideoRecord};
use drift_audit::embedding::{load_embeddings, save_embeddings, EmbeddingKey, EmbeddingSet, Modality};
use drift_audit::keyframe::{select_keyframes, KeyframeConfig, SalienceSeries};
use drift_audit::projection::{convex_hull, hull_contains, pca};

fn cloud(max_n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    vec(vec(-50.0..50.0f64, d), 2..max_n)
}

fn dataset() -> impl Strategy<Value = AuditDataset> {
    let chain = (prop::collection::btree_set("[a-z0-9_-]{1,12}", 1..7), "[a-z ]{0,10}", any::<bool>());
    vec(chain, 1..6).prop_map(|chains| {
        let mut max_depth = 0;
        let chains = chains
            .into_iter()
            .enumerate()
            .map(|(i, (ids, keyword, with_dir))| {
                let seed_id = format!("SEED{i}");
                let mut seed = VideoRecord::seed(&seed_id, "dom");
                seed.keyword = keyword.clone();
                if with_dir {
                    seed.frame_dir = Some(format!("frames/{seed_id}"));
                }
                seed.extra.insert("views".into(), serde_json::json!(i * 10));
                let recs: Vec<VideoRecord> = ids
                    .iter()
                    .enumerate()
                    .map(|(d, id)| {
                        let mut r = VideoRecord::recommended(id, "dom", &seed_id, d as u32 + 1);
                        r.keyword = keyword.clone();
                        r
                    })
                    .collect();
                max_depth = max_depth.max(recs.len() as u32);
                RecommendationChain::new(seed, recs, format!("sess{i}")).unwrap()
            })
            .collect();
        AuditDataset::new("roundtrip", max_depth, chains).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dataset_round_trips(d in dataset()) {
        let bytes = serialize_to_vec(&d);
        let back = parse_dataset(&bytes[..], &ParseOptions::named("roundtrip")).unwrap();
        prop_assert_eq!(&back, &d);
        prop_assert_eq!(serialize_to_vec(&back), bytes);
    }

    #[test]
    fn spread_is_permutation_invariant(p in cloud(60, 4), seed in any::<u64>()) {
        let mut q = p.clone();
        let n = q.len();
        for i in (1..n).rev() {
            q.swap(i, (seed.wrapping_mul(i as u64 + 7) % (i as u64 + 1)) as usize);
        }
        let (a, b) = (centroid_variance(&p).unwrap(), centroid_variance(&q).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
        let (a, b) = (mean_intra_distance(&p, 100, 0).unwrap().mean, mean_intra_distance(&q, 100, 0).unwrap().mean);
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
    }

    #[test]
    fn jsd_is_bounded_and_symmetric(
        pq in (1usize..40).prop_flat_map(|n| (vec(0u32..100, n), vec(0u32..100, n)))
    ) {
        let (mut p, mut q): (Vec<f64>, Vec<f64>) =
            (pq.0.iter().map(|&x| x as f64).collect(), pq.1.iter().map(|&x| x as f64).collect());
        p[0] += 1.0;
        q[0] += 1.0;
        let a = jsd_from_histograms(&p, &q);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(a, jsd_from_histograms(&q, &p));
        prop_assert_eq!(jsd_from_histograms(&p, &p), 0.0);
    }

    #[test]
    fn wasserstein_shift_and_symmetry(a in vec(-10.0..10.0f64, 1..40), b in vec(-10.0..10.0f64, 1..40), c in -5.0..5.0f64) {
        let shifted: Vec<f64> = a.iter().map(|x| x + c).collect();
        prop_assert!((wasserstein_1d(&a, &shifted).unwrap() - c.abs()).abs() < 1e-9);
        prop_assert!((wasserstein_1d(&a, &b).unwrap() - wasserstein_1d(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn normalization_shares_sum_to_one(a in 0.01..100.0f64, b in 0.01..100.0f64) {
        let s = cross_domain_normalize(a, b).unwrap() + cross_domain_normalize(b, a).unwrap();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn higher_lambda_selects_a_subset(
        raw in vec(0.0..1.0f64, 2..80),
        min_gap in 1usize..6,
        window in prop::sample::select(vec![1usize, 3, 5]),
    ) {
        let mut scores = raw;
        scores[0] = 0.0;
        let s = SalienceSeries { scores };
        let mut prev: Option<BTreeSet<usize>> = None;
        for step in 0..12 {
            let cfg = KeyframeConfig { lambda: step as f64 * 0.3, min_gap, smoothing_window: window };
            let k: BTreeSet<usize> = select_keyframes(&s, &cfg).indices.into_iter().collect();
            prop_assert!(k.contains(&0));
            if let Some(p) = &prev {
                prop_assert!(k.is_subset(p));
            }
            prev = Some(k);
        }
    }

    #[test]
    fn hull_contains_its_points(pts in vec((-100.0..100.0f64, -100.0..100.0f64), 3..80)) {
        let pts: Vec<[f64; 2]> = pts.into_iter().map(|(x, y)| [x, y]).collect();
        let hull = convex_hull(&pts).unwrap();
        for p in &pts {
            prop_assert!(hull_contains(&hull, *p, 1e-9));
        }
    }

    #[test]
    fn pca_ignores_translation(p in cloud(40, 5), shift in vec(-100.0..100.0f64, 5)) {
        let moved: Vec<Vec<f64>> = p.iter().map(|x| x.iter().zip(&shift).map(|(a, s)| a + s).collect()).collect();
        let (Ok(a), Ok(b)) = (pca(&p, 3), pca(&moved, 3)) else { return Ok(()) };
        for (x, y) in a.eigenvalues.iter().zip(&b.eigenvalues) {
            prop_assert!((x - y).abs() <= 1e-6 * (1.0 + x));
        }
        // Coordinates agree up to the sign of each well-separated axis.
        let ev = &a.eigenvalues;
        for c in 0..2 {
            let gap = (ev[c] - ev[c + 1]).abs().min(if c > 0 { (ev[c - 1] - ev[c]).abs() } else { f64::INFINITY });
            if gap < 1e-3 * ev[0] {
                continue;
            }
            let same = a.coords.iter().zip(&b.coords).all(|(u, v)| (u[c] - v[c]).abs() < 1e-6);
            let flipped = a.coords.iter().zip(&b.coords).all(|(u, v)| (u[c] + v[c]).abs() < 1e-6);
            prop_assert!(same || flipped);
        }
    }

    #[test]
    fn embedding_file_round_trips(rows in vec(vec(-1.0..1.0f64, 6), 1..20)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.embf");
        let mut set = EmbeddingSet::<f64>::new(6).unwrap();
        for (i, r) in rows.iter().enumerate() {
            if r.iter().map(|x| x * x).sum::<f64>() < 1e-6 {
                continue;
            }
            set.insert(EmbeddingKey::new(format!("v{i}"), i as u32, Modality::ALL[i % 2]), r.clone()).unwrap();
        }
        prop_assume!(!set.is_empty());
        save_embeddings(&set, &path).unwrap();
        let back = load_embeddings::<f64>(&path, Some(6)).unwrap();
        prop_assert!(back.renormalized.is_empty());
        prop_assert_eq!(back.set.len(), set.len());
        for (k, v) in set.iter() {
            let w = back.set.get(k).unwrap();
            // Rows are stored as f32.
            prop_assert!(v.iter().zip(w).all(|(a, b)| (a - b).abs() < 1e-6));
        }
    }
}

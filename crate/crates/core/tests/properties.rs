use proptest::prelude::*;

use terralabel::clustering::{fcm_fit, FcmParams, Spectra};
use terralabel::ingest::{decode_raster, encode_raster, rotate_index, rotate_planes};
use terralabel::matching::{chip_similarity, cosine, hungarian, similarity_matrix, SimilarityMatrix};
use terralabel::superpixels::SegmentMap;

fn brute_force(rows: usize, cols: usize, cost: &[f64]) -> f64 {
    fn go(r: usize, rows: usize, cols: usize, cost: &[f64], used: &mut Vec<bool>) -> f64 {
        if r == rows {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                best = best.min(cost[r * cols + c] + go(r + 1, rows, cols, cost, used));
                used[c] = false;
            }
        }
        best
    }
    if rows <= cols {
        go(0, rows, cols, cost, &mut vec![false; cols])
    } else {
        let t: Vec<f64> = (0..cols * rows).map(|i| cost[(i % rows) * cols + i / rows]).collect();
        go(0, cols, rows, &t, &mut vec![false; rows])
    }
}

fn cost_matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..6, 1usize..6).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(0u8..20, r * c)))
        .prop_map(|(r, c, v)| (r, c, v.into_iter().map(f64::from).collect()))
}

fn rows(n: std::ops::Range<usize>, dim: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec(-5.0f32..5.0, dim), n)
}

proptest! {
    #[test]
    fn assignment_is_optimal_and_injective((r, c, cost) in cost_matrix()) {
        let a = hungarian(r, c, &cost).unwrap();
        prop_assert_eq!(a.pairs.len(), r.min(c));
        let mut cols: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        cols.sort_unstable();
        cols.dedup();
        prop_assert_eq!(cols.len(), r.min(c));
        let total: f64 = a.pairs.iter().map(|&(i, j)| cost[i * c + j]).sum();
        prop_assert_eq!(total, a.total_cost);
        prop_assert_eq!(a.total_cost, brute_force(r, c, &cost));
    }

    #[test]
    fn cosine_is_bounded(a in prop::collection::vec(-5.0f32..5.0, 4), b in prop::collection::vec(-5.0f32..5.0, 4)) {
        let s = cosine(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn chip_similarity_ignores_segment_order(a in rows(2..7, 5), seed in any::<u64>()) {
        prop_assume!(a.iter().all(|r| r.iter().any(|v| v.abs() > 1e-3)));
        let mut b = a.clone();
        let n = b.len();
        b.rotate_left((seed as usize) % n);
        prop_assert_eq!(chip_similarity(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn similarity_matrix_is_symmetric_with_unit_diagonal(chips in prop::collection::vec(rows(1..5, 3), 2..5)) {
        prop_assume!(chips.iter().flatten().all(|r| r.iter().any(|v| v.abs() > 1e-3)));
        let ids: Vec<String> = (0..chips.len()).map(|i| format!("c{i}")).collect();
        let (sim, _) = similarity_matrix(&ids, &chips).unwrap();
        for i in 0..sim.len() {
            prop_assert_eq!(sim.get(i, i), 1.0);
            for j in 0..sim.len() {
                prop_assert_eq!(sim.get(i, j), sim.get(j, i));
            }
        }
        // Stored as f32.
        let back = SimilarityMatrix::decode(&sim.encode().unwrap()).unwrap();
        prop_assert_eq!(&back.ids, &sim.ids);
        let narrowed: Vec<f64> = sim.values.iter().map(|&v| v as f32 as f64).collect();
        prop_assert_eq!(back.values, narrowed);
    }

    #[test]
    fn fcm_memberships_sum_to_one(points in rows(12..40, 3), clusters in 2usize..5, seed in any::<u64>()) {
        let fit = fcm_fit(&Spectra::from_rows(&points), &FcmParams { seed, ..FcmParams::new(clusters) }).unwrap();
        for p in &points {
            let u = fit.model.membership(p);
            prop_assert!((u.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(u.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        }
        for w in fit.objective.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9));
        }
    }

    #[test]
    fn four_quarter_turns_are_identity(size in 1usize..9, planes in 1usize..4, k in 0usize..4) {
        let data: Vec<u32> = (0..(planes * size * size) as u32).collect();
        let once = rotate_planes(&data, planes, size, k);
        prop_assert_eq!(rotate_planes(&once, planes, size, 4 - k), data.clone());
        for r in 0..size {
            for c in 0..size {
                let (nr, nc) = rotate_index(r, c, size, k);
                prop_assert_eq!(once[nr * size + nc], data[r * size + c]);
            }
        }
    }

    #[test]
    fn raster_round_trip(bands in 1usize..4, h in 1usize..10, w in 1usize..10, seed in any::<u32>()) {
        let data: Vec<f32> = (0..bands * h * w).map(|i| (i as u32 ^ seed) as f32 * 0.37 - 11.0).collect();
        let (b2, h2, w2, d2) = decode_raster(&encode_raster(bands, h, w, &data).unwrap()).unwrap();
        prop_assert_eq!((b2, h2, w2), (bands, h, w));
        prop_assert_eq!(d2, data);
    }

    #[test]
    fn segment_ids_are_dense_and_cover_the_chip(h in 1usize..8, w in 1usize..8, raw in prop::collection::vec(0u32..1000, 64)) {
        let labels = &raw[..h * w];
        let seg = SegmentMap::from_labels(h, w, labels).unwrap();
        let distinct: std::collections::BTreeSet<u32> = labels.iter().copied().collect();
        prop_assert_eq!(seg.len(), distinct.len());
        prop_assert_eq!(seg.segments.iter().map(|s| s.pixel_count).sum::<usize>(), h * w);
        prop_assert!(seg.labels.iter().all(|&l| (l as usize) < seg.len()));
        // Same partition: equal raw ids iff equal dense ids.
        for i in 0..h * w {
            for j in 0..h * w {
                prop_assert_eq!(labels[i] == labels[j], seg.labels[i] == seg.labels[j]);
            }
        }
    }
}

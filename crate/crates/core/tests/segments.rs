mod common;

use std::collections::{BTreeSet, HashSet};

use oodseg::scores::normalized_entropy;
use oodseg::segments::{compute_features, extract_from_maps, PixelMaps};
use oodseg::synth::generate_scene;
use oodseg::{
    argmax_map, connected_components, entropy_map, extract_segments, margin_map, maxprob_map,
    threshold_mask, BinaryMask, Connectivity, ProbMap, SceneConfig, ScoreMap,
};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn argmax_equals_brute_force_scan() {
    let mut rng = common::rng(11);
    let probs = common::random_probmap(&mut rng, 16, 16, 7);
    let pred = argmax_map(&probs);
    for r in 0..16 {
        for c in 0..16 {
            let px = probs.pixel(r, c);
            let max = px.iter().cloned().fold(f32::MIN, f32::max);
            let first = px.iter().position(|&p| p == max).unwrap();
            assert_eq!(pred.get(r, c), first as i32);
        }
    }
}

#[test]
fn threshold_equals_per_pixel_comparison() {
    let mut rng = common::rng(12);
    let scores = common::random_scores(&mut rng, 32, 32);
    let mask = threshold_mask(&scores, 0.5).unwrap();
    for r in 0..32 {
        for c in 0..32 {
            assert_eq!(mask.get(r, c), scores.get(r, c) >= 0.5);
        }
    }
}

fn partition(segments: &[oodseg::SegmentRecord]) -> Vec<Vec<(usize, usize)>> {
    segments
        .iter()
        .map(|s| {
            let mut p = s.pixels.clone();
            p.sort();
            p
        })
        .collect()
}

#[test]
fn components_match_flood_fill_on_thousand_masks() {
    let mut rng = common::rng(13);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let density = rng.gen_range(0.2..0.7);
        let bits = common::random_bools(&mut rng, 32 * 32, density);
        let mask = BinaryMask::new(32, 32, bits.clone()).unwrap();
        for (conn, eight) in [(Connectivity::Four, false), (Connectivity::Eight, true)] {
            let ours = partition(&connected_components(&mask, conn));
            if ours != common::flood_fill_components(&bits, 32, 32, eight) {
                mismatches += 1;
            }
        }
    }
    assert_eq!(mismatches, 0);
}

/// Independent per-pixel recomputation of every feature.
fn naive_features(pixels: &[(usize, usize)], maps: &PixelMaps) -> [f64; 15] {
    let (h, w) = (maps.entropy.height(), maps.entropy.width());
    let set: HashSet<(usize, usize)> = pixels.iter().copied().collect();
    let neighbours = |r: usize, c: usize| {
        let mut out = Vec::new();
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr >= 0 && nc >= 0 && nr < h as i64 && nc < w as i64 {
                    out.push((nr as usize, nc as usize));
                }
            }
        }
        out
    };
    let is_interior = |&(r, c): &(usize, usize)| {
        neighbours(r, c).len() == 8 && neighbours(r, c).iter().all(|p| set.contains(p))
    };
    let e = |&(r, c): &(usize, usize)| f64::from(maps.entropy.get(r, c));
    let n = pixels.len() as f64;
    let interior: Vec<_> = pixels.iter().filter(|p| is_interior(p)).copied().collect();
    let boundary: Vec<_> = pixels.iter().filter(|p| !is_interior(p)).copied().collect();
    let mean = |ps: &[(usize, usize)]| {
        if ps.is_empty() {
            0.0
        } else {
            ps.iter().map(e).sum::<f64>() / ps.len() as f64
        }
    };
    let mean_e = mean(pixels);
    let var = pixels.iter().map(|p| (e(p) - mean_e).powi(2)).sum::<f64>() / n;
    let rows: Vec<usize> = pixels.iter().map(|p| p.0).collect();
    let cols: Vec<usize> = pixels.iter().map(|p| p.1).collect();
    let mut ring = BTreeSet::new();
    for r in 0..h {
        for c in 0..w {
            if !set.contains(&(r, c)) && neighbours(r, c).iter().any(|p| set.contains(p)) {
                ring.insert(maps.pred.get(r, c));
            }
        }
    }
    [
        n,
        interior.len() as f64,
        boundary.len() as f64,
        interior.len() as f64 / n,
        mean_e,
        mean(&interior),
        mean(&boundary),
        var,
        pixels
            .iter()
            .map(|&(r, c)| f64::from(maps.margin.get(r, c)))
            .sum::<f64>()
            / n,
        pixels
            .iter()
            .map(|&(r, c)| f64::from(maps.maxprob_unc.get(r, c)))
            .sum::<f64>()
            / n,
        (rows.iter().max().unwrap() - rows.iter().min().unwrap() + 1) as f64 / h as f64,
        (cols.iter().max().unwrap() - cols.iter().min().unwrap() + 1) as f64 / w as f64,
        (rows.iter().sum::<usize>() as f64 / n + 0.5) / h as f64,
        (cols.iter().sum::<usize>() as f64 / n + 0.5) / w as f64,
        ring.len() as f64 / maps.num_classes as f64,
    ]
}

#[test]
fn features_equal_naive_recomputation() {
    let mut rng = common::rng(14);
    for _ in 0..50 {
        let (h, w, c) = (
            rng.gen_range(4..20),
            rng.gen_range(4..20),
            rng.gen_range(2..6),
        );
        let probs = common::random_probmap(&mut rng, h, w, c);
        let maps = PixelMaps::from_probs(&probs);
        let density = rng.gen_range(0.3..0.9);
        let bits = common::random_bools(&mut rng, h * w, density);
        let comps =
            connected_components(&BinaryMask::new(h, w, bits).unwrap(), Connectivity::Eight);
        for seg in comps.iter().take(5) {
            let f = compute_features(
                seg,
                &maps.entropy,
                &maps.margin,
                &maps.maxprob_unc,
                &maps.pred,
                c,
            );
            let oracle = naive_features(&seg.pixels, &maps);
            for (k, (a, b)) in f.to_array().iter().zip(oracle).enumerate() {
                assert!((a - b).abs() <= 1e-12, "feature {k}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn feature_invariants_hold_on_synthetic_scene() {
    let scene = generate_scene(&SceneConfig::default()).unwrap();
    for t in [0.3, 0.5, 0.8] {
        for seg in extract_segments(&scene.probs, t, Connectivity::Eight, 1).unwrap() {
            let f = seg.features.unwrap();
            assert_eq!(f.size, f.interior_size + f.boundary_size);
            assert!(f.size >= 1.0 && f.var_entropy >= 0.0);
            for v in [
                f.rel_interior,
                f.mean_entropy,
                f.mean_entropy_interior,
                f.mean_entropy_boundary,
                f.mean_margin,
                f.mean_maxprob_unc,
                f.bbox_height_rel,
                f.bbox_width_rel,
                f.centroid_row_rel,
                f.centroid_col_rel,
                f.n_adjacent_classes_rel,
            ] {
                assert!((0.0..=1.0).contains(&v), "{f:?}");
            }
        }
    }
}

#[test]
fn synthetic_scene_segment_count_matches_flood_fill_pipeline() {
    let scene = generate_scene(&SceneConfig::default()).unwrap();
    let entropy = entropy_map(&scene.probs);
    let (h, w) = (entropy.height(), entropy.width());
    for (t, min_size) in [(0.5, 1), (0.5, 10), (0.35, 3)] {
        let bits: Vec<bool> = entropy.data().iter().map(|&s| f64::from(s) >= t).collect();
        let expected = common::flood_fill_components(&bits, h, w, true)
            .into_iter()
            .filter(|c| c.len() >= min_size)
            .count();
        let segs = extract_segments(&scene.probs, t, Connectivity::Eight, min_size).unwrap();
        assert_eq!(segs.len(), expected, "t={t} min_size={min_size}");
    }
}

#[test]
fn entropy_map_matches_direct_formula() {
    let mut rng = common::rng(15);
    let probs = common::random_probmap(&mut rng, 8, 8, 5);
    let map = entropy_map(&probs);
    for (px, &s) in probs.pixels().zip(map.data()) {
        let direct: f64 = -px
            .iter()
            .map(|&p| f64::from(p))
            .filter(|&p| p > 0.0)
            .map(|p| p * p.ln() / 5f64.ln())
            .sum::<f64>();
        assert!((f64::from(s) - direct.clamp(0.0, 1.0)).abs() < 1e-6);
        assert_eq!(s, normalized_entropy(px).clamp(0.0, 1.0) as f32);
    }
    for m in [margin_map(&probs), maxprob_map(&probs)] {
        assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn features_are_bit_identical_across_threads() {
    let scene = generate_scene(&SceneConfig::default()).unwrap();
    let reference = extract_segments(&scene.probs, 0.4, Connectivity::Eight, 1).unwrap();
    let probs = std::sync::Arc::new(scene.probs);
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let probs = probs.clone();
            std::thread::spawn(move || {
                extract_segments(&probs, 0.4, Connectivity::Eight, 1).unwrap()
            })
        })
        .collect();
    for h in handles {
        let other = h.join().unwrap();
        assert_eq!(other.len(), reference.len());
        for (a, b) in other.iter().zip(&reference) {
            let bits = |s: &oodseg::SegmentRecord| s.features.unwrap().to_array().map(f64::to_bits);
            assert_eq!(bits(a), bits(b));
        }
    }
}

fn score_strategy() -> impl Strategy<Value = (usize, usize, Vec<f32>)> {
    (1usize..16, 1usize..16)
        .prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(0.0f32..=1.0, h * w)))
}

proptest! {
    #[test]
    fn threshold_segments_are_nested(
        (h, w, data) in score_strategy(),
        t1 in 0.0f64..=1.0,
        dt in 0.0f64..=1.0,
        min_size in 1usize..4,
    ) {
        let t2 = (t1 + dt).min(1.0);
        let scores = ScoreMap::new(h, w, data).unwrap();
        // Probabilities are irrelevant here; only the entropy map drives extraction.
        let maps = PixelMaps {
            entropy: scores.clone(),
            margin: scores.clone(),
            maxprob_unc: scores,
            pred: oodseg::LabelMask::filled(h, w, 0).unwrap(),
            num_classes: 2,
        };
        let low = extract_from_maps(&maps, t1, Connectivity::Eight, min_size).unwrap();
        let high = extract_from_maps(&maps, t2, Connectivity::Eight, min_size).unwrap();
        let low_pixels: HashSet<_> = low.iter().flat_map(|s| s.pixels.iter().copied()).collect();
        for seg in &high {
            prop_assert!(seg.pixels.iter().all(|p| low_pixels.contains(p)));
        }
        // Partition: no pixel twice and total equals the surviving mask pixels.
        let total: usize = low.iter().map(|s| s.size()).sum();
        prop_assert_eq!(total, low_pixels.len());
        let mask = threshold_mask(&maps.entropy, t1).unwrap();
        let surviving: usize = connected_components(&mask, Connectivity::Eight)
            .iter().filter(|s| s.size() >= min_size).map(|s| s.size()).sum();
        prop_assert_eq!(total, surviving);
    }
}

#[test]
fn zero_threshold_flags_every_pixel() {
    let mut rng = common::rng(16);
    let probs: ProbMap = common::random_probmap(&mut rng, 9, 7, 3);
    let segs = extract_segments(&probs, 0.0, Connectivity::Four, 1).unwrap();
    assert_eq!(segs.iter().map(|s| s.size()).sum::<usize>(), 63);
}

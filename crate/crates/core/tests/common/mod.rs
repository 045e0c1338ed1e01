#![allow(dead_code)]

use oodseg::{LabelMask, ProbMap, ScoreMap, IGNORE_ID, OOD_ID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_probmap(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ProbMap {
    let mut data = Vec::with_capacity(h * w * c);
    for _ in 0..h * w {
        let raw: Vec<f64> = (0..c).map(|_| rng.gen::<f64>().powi(3)).collect();
        let total: f64 = raw.iter().sum::<f64>().max(1e-12);
        data.extend(raw.iter().map(|v| (v / total) as f32));
    }
    ProbMap::new(h, w, c, data).unwrap()
}

pub fn random_scores(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ScoreMap {
    ScoreMap::new(h, w, (0..h * w).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

/// Random ground truth with blocky OoD regions and a sprinkle of ignore pixels.
pub fn random_gt(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> LabelMask {
    let mut data: Vec<i32> = (0..h * w).map(|_| rng.gen_range(0..c as i32)).collect();
    for _ in 0..rng.gen_range(0..4) {
        let (r0, c0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (dh, dw) = (rng.gen_range(1..6), rng.gen_range(1..6));
        for r in r0..(r0 + dh).min(h) {
            for col in c0..(c0 + dw).min(w) {
                data[r * w + col] = OOD_ID;
            }
        }
    }
    for v in data.iter_mut() {
        if rng.gen_bool(0.05) {
            *v = IGNORE_ID;
        }
    }
    LabelMask::new(h, w, data).unwrap()
}

pub fn random_bools(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.gen_bool(p)).collect()
}

/// Recursive flood fill; returns components as sorted pixel lists in raster order of first pixel.
pub fn flood_fill_components(
    mask: &[bool],
    h: usize,
    w: usize,
    eight: bool,
) -> Vec<Vec<(usize, usize)>> {
    fn fill(
        r: usize,
        c: usize,
        mask: &[bool],
        seen: &mut [bool],
        h: usize,
        w: usize,
        eight: bool,
        out: &mut Vec<(usize, usize)>,
    ) {
        seen[r * w + c] = true;
        out.push((r, c));
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if (dr == 0 && dc == 0) || (!eight && dr != 0 && dc != 0) {
                    continue;
                }
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                if mask[nr * w + nc] && !seen[nr * w + nc] {
                    fill(nr, nc, mask, seen, h, w, eight, out);
                }
            }
        }
    }
    let mut seen = vec![false; h * w];
    let mut comps = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask[r * w + c] && !seen[r * w + c] {
                let mut comp = Vec::new();
                fill(r, c, mask, &mut seen, h, w, eight, &mut comp);
                comp.sort();
                comps.push(comp);
            }
        }
    }
    comps
}

/// Two unit-variance Gaussian classes centred at (-1, -1) and (1, 1), alternating labels.
pub fn gaussian_dataset(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<oodseg::MetaLabel>) {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rng(seed);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let positive = i % 2 == 1;
        let centre = if positive { 1.0 } else { -1.0 };
        let x: f64 = StandardNormal.sample(&mut rng);
        let y: f64 = StandardNormal.sample(&mut rng);
        rows.push(vec![centre + x, centre + y]);
        labels.push(if positive {
            oodseg::MetaLabel::True
        } else {
            oodseg::MetaLabel::False
        });
    }
    (rows, labels)
}

/// Central finite difference of `f` along every coordinate.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
    (0..at.len())
        .map(|i| {
            let mut plus = at.to_vec();
            let mut minus = at.to_vec();
            plus[i] += h;
            minus[i] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

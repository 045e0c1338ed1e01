//! Candidate OoD segments: thresholding, connected components and
//! per-segment hand-crafted features.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scores::{argmax_map, entropy_map, margin_map, maxprob_map};
use crate::tensor::{LabelMask, ProbMap, ScoreMap};

/// Which neighbours of a pixel are connected to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    /// N, S, E and W neighbours.
    Four,
    /// All eight surrounding pixels.
    #[default]
    Eight,
}

impl Connectivity {
    /// Offsets of neighbours that precede a pixel in raster order.
    fn backward_offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(0, -1), (-1, 0)],
            Connectivity::Eight => &[(0, -1), (-1, -1), (-1, 0), (-1, 1)],
        }
    }
}

impl FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "4" => Ok(Connectivity::Four),
            "8" => Ok(Connectivity::Eight),
            other => Err(Error::Domain(format!(
                "connectivity must be 4 or 8, got '{other}'"
            ))),
        }
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Connectivity::Four => "4",
            Connectivity::Eight => "8",
        })
    }
}

const NEIGHBOURS_8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Schema(format!(
                "mask {height}x{width} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let data = (0..height * width)
            .map(|i| f(i / width, i % width))
            .collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BoundingBox {
    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }
}

/// Number of entries in a [`SegmentFeatures`] vector.
pub const NUM_FEATURES: usize = 15;

/// Column names of the feature vector in canonical order.
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "size",
    "interior_size",
    "boundary_size",
    "rel_interior",
    "mean_entropy",
    "mean_entropy_interior",
    "mean_entropy_boundary",
    "var_entropy",
    "mean_margin",
    "mean_maxprob_unc",
    "bbox_height_rel",
    "bbox_width_rel",
    "centroid_row_rel",
    "centroid_col_rel",
    "n_adjacent_classes_rel",
];

/// Hand-crafted statistics of one segment, in canonical order.
///
/// Interior pixels are those whose eight neighbours all exist and belong to
/// the segment; the rest are boundary pixels. Interior means are 0 for
/// segments without interior pixels. Centroids use pixel centres, i.e.
/// `(mean_row + 0.5) / H`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SegmentFeatures {
    pub size: f64,
    pub interior_size: f64,
    pub boundary_size: f64,
    pub rel_interior: f64,
    pub mean_entropy: f64,
    pub mean_entropy_interior: f64,
    pub mean_entropy_boundary: f64,
    pub var_entropy: f64,
    pub mean_margin: f64,
    pub mean_maxprob_unc: f64,
    pub bbox_height_rel: f64,
    pub bbox_width_rel: f64,
    pub centroid_row_rel: f64,
    pub centroid_col_rel: f64,
    pub n_adjacent_classes_rel: f64,
}

impl SegmentFeatures {
    pub fn to_array(&self) -> [f64; NUM_FEATURES] {
        [
            self.size,
            self.interior_size,
            self.boundary_size,
            self.rel_interior,
            self.mean_entropy,
            self.mean_entropy_interior,
            self.mean_entropy_boundary,
            self.var_entropy,
            self.mean_margin,
            self.mean_maxprob_unc,
            self.bbox_height_rel,
            self.bbox_width_rel,
            self.centroid_row_rel,
            self.centroid_col_rel,
            self.n_adjacent_classes_rel,
        ]
    }

    pub fn from_array(v: [f64; NUM_FEATURES]) -> Self {
        Self {
            size: v[0],
            interior_size: v[1],
            boundary_size: v[2],
            rel_interior: v[3],
            mean_entropy: v[4],
            mean_entropy_interior: v[5],
            mean_entropy_boundary: v[6],
            var_entropy: v[7],
            mean_margin: v[8],
            mean_maxprob_unc: v[9],
            bbox_height_rel: v[10],
            bbox_width_rel: v[11],
            centroid_row_rel: v[12],
            centroid_col_rel: v[13],
            n_adjacent_classes_rel: v[14],
        }
    }
}

/// One connected component of a thresholded score map.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRecord {
    pub id: usize,
    /// `(row, col)` coordinates in raster order.
    pub pixels: Vec<(usize, usize)>,
    pub bbox: BoundingBox,
    pub features: Option<SegmentFeatures>,
}

impl SegmentRecord {
    pub fn size(&self) -> usize {
        self.pixels.len()
    }
}

/// Score maps and prediction derived once from a probability map and shared by
/// every threshold.
#[derive(Debug, Clone)]
pub struct PixelMaps {
    pub entropy: ScoreMap,
    pub margin: ScoreMap,
    pub maxprob_unc: ScoreMap,
    pub pred: LabelMask,
    pub num_classes: usize,
}

impl PixelMaps {
    pub fn from_probs(probs: &ProbMap) -> Self {
        Self {
            entropy: entropy_map(probs),
            margin: margin_map(probs),
            maxprob_unc: maxprob_map(probs),
            pred: argmax_map(probs),
            num_classes: probs.num_classes(),
        }
    }
}

/// Marks every pixel whose score is at least `t`.
pub fn threshold_mask(scores: &ScoreMap, t: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("threshold {t} outside [0, 1]")));
    }
    let data = scores.data().iter().map(|&s| f64::from(s) >= t).collect();
    BinaryMask::new(scores.height(), scores.width(), data)
}

struct DisjointSets {
    parent: Vec<u32>,
}

impl DisjointSets {
    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) -> u32 {
        let (ra, rb) = (self.find(a), self.find(b));
        let root = ra.min(rb);
        self.parent[ra.max(rb) as usize] = root;
        root
    }
}

/// Labels the maximal connected sets of foreground pixels.
///
/// Two-pass union-find labelling. Ids follow the raster order of each
/// component's first pixel; features are left unset.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> Vec<SegmentRecord> {
    const NONE: u32 = u32::MAX;
    let (h, w) = (mask.height, mask.width);
    let mut provisional = vec![NONE; h * w];
    let mut sets = DisjointSets { parent: Vec::new() };

    for r in 0..h {
        for c in 0..w {
            if !mask.data[r * w + c] {
                continue;
            }
            let mut label = NONE;
            for &(dr, dc) in connectivity.backward_offsets() {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nc >= w as isize {
                    continue;
                }
                let neighbour = provisional[nr as usize * w + nc as usize];
                if neighbour == NONE {
                    continue;
                }
                label = if label == NONE {
                    neighbour
                } else {
                    sets.union(label, neighbour)
                };
            }
            provisional[r * w + c] = if label == NONE { sets.make() } else { label };
        }
    }

    let mut root_to_id = vec![NONE; sets.parent.len()];
    let mut segments: Vec<SegmentRecord> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let label = provisional[r * w + c];
            if label == NONE {
                continue;
            }
            let root = sets.find(label) as usize;
            if root_to_id[root] == NONE {
                root_to_id[root] = segments.len() as u32;
                segments.push(SegmentRecord {
                    id: segments.len(),
                    pixels: Vec::new(),
                    bbox: BoundingBox {
                        row_min: r,
                        col_min: c,
                        row_max: r,
                        col_max: c,
                    },
                    features: None,
                });
            }
            let seg = &mut segments[root_to_id[root] as usize];
            seg.pixels.push((r, c));
            seg.bbox.col_min = seg.bbox.col_min.min(c);
            seg.bbox.col_max = seg.bbox.col_max.max(c);
            seg.bbox.row_max = r;
        }
    }
    segments
}

/// Computes the canonical feature vector of `seg`.
pub fn compute_features(
    seg: &SegmentRecord,
    entropy: &ScoreMap,
    margin: &ScoreMap,
    maxprob_unc: &ScoreMap,
    pred: &LabelMask,
    num_classes: usize,
) -> SegmentFeatures {
    let (h, w) = (entropy.height(), entropy.width());
    let bbox = seg.bbox;
    // Local occupancy grid over the bounding box grown by one pixel on each side.
    let (gh, gw) = (bbox.height() + 2, bbox.width() + 2);
    let mut inside = vec![false; gh * gw];
    let local = |r: usize, c: usize| (r + 1 - bbox.row_min) * gw + (c + 1 - bbox.col_min);
    for &(r, c) in &seg.pixels {
        inside[local(r, c)] = true;
    }
    let neighbour = |r: usize, c: usize, (dr, dc): (isize, isize)| {
        let (nr, nc) = (r as isize + dr, c as isize + dc);
        (nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w)
            .then_some((nr as usize, nc as usize))
    };

    let n = seg.pixels.len() as f64;
    let (mut sum_e, mut sum_e_in, mut sum_e_bd) = (0.0, 0.0, 0.0);
    let (mut sum_margin, mut sum_maxprob) = (0.0, 0.0);
    let (mut sum_row, mut sum_col) = (0.0, 0.0);
    let mut interior = 0usize;
    let mut ring_classes = vec![false; num_classes];
    for &(r, c) in &seg.pixels {
        let e = f64::from(entropy.get(r, c));
        sum_e += e;
        sum_margin += f64::from(margin.get(r, c));
        sum_maxprob += f64::from(maxprob_unc.get(r, c));
        sum_row += r as f64;
        sum_col += c as f64;

        let mut all_inside = true;
        for off in NEIGHBOURS_8 {
            match neighbour(r, c, off) {
                Some((nr, nc)) if inside[local(nr, nc)] => {}
                Some((nr, nc)) => {
                    all_inside = false;
                    let class = pred.get(nr, nc);
                    if class >= 0 && (class as usize) < num_classes {
                        ring_classes[class as usize] = true;
                    }
                }
                None => all_inside = false,
            }
        }
        if all_inside {
            interior += 1;
            sum_e_in += e;
        } else {
            sum_e_bd += e;
        }
    }
    let mean_e = sum_e / n;
    let var_e = seg
        .pixels
        .iter()
        .map(|&(r, c)| {
            let d = f64::from(entropy.get(r, c)) - mean_e;
            d * d
        })
        .sum::<f64>()
        / n;
    let boundary = seg.pixels.len() - interior;
    let mean_or_zero = |sum: f64, count: usize| if count == 0 { 0.0 } else { sum / count as f64 };

    SegmentFeatures {
        size: n,
        interior_size: interior as f64,
        boundary_size: boundary as f64,
        rel_interior: interior as f64 / n,
        mean_entropy: mean_e,
        mean_entropy_interior: mean_or_zero(sum_e_in, interior),
        mean_entropy_boundary: mean_or_zero(sum_e_bd, boundary),
        var_entropy: var_e,
        mean_margin: sum_margin / n,
        mean_maxprob_unc: sum_maxprob / n,
        bbox_height_rel: bbox.height() as f64 / h as f64,
        bbox_width_rel: bbox.width() as f64 / w as f64,
        centroid_row_rel: (sum_row / n + 0.5) / h as f64,
        centroid_col_rel: (sum_col / n + 0.5) / w as f64,
        n_adjacent_classes_rel: ring_classes.iter().filter(|&&b| b).count() as f64
            / num_classes as f64,
    }
}

/// Segments of `entropy >= t` with at least `min_size` pixels, features filled,
/// renumbered consecutively in raster order.
pub fn extract_from_maps(
    maps: &PixelMaps,
    t: f64,
    connectivity: Connectivity,
    min_size: usize,
) -> Result<Vec<SegmentRecord>> {
    if min_size == 0 {
        return Err(Error::Domain("min_size must be at least 1".into()));
    }
    let mask = threshold_mask(&maps.entropy, t)?;
    let segments = connected_components(&mask, connectivity)
        .into_iter()
        .filter(|s| s.size() >= min_size)
        .enumerate()
        .map(|(id, mut seg)| {
            seg.id = id;
            seg.features = Some(compute_features(
                &seg,
                &maps.entropy,
                &maps.margin,
                &maps.maxprob_unc,
                &maps.pred,
                maps.num_classes,
            ));
            seg
        })
        .collect();
    Ok(segments)
}

pub fn extract_segments(
    probs: &ProbMap,
    t: f64,
    connectivity: Connectivity,
    min_size: usize,
) -> Result<Vec<SegmentRecord>> {
    extract_from_maps(&PixelMaps::from_probs(probs), t, connectivity, min_size)
}

//! Detection error counts, threshold sweeps, pixel-level precision-recall and
//! mIoU of the underlying segmentation.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::{apply_meta_filter, label_segments, MetaLabel, MetaModel};
use crate::segments::{
    connected_components, extract_from_maps, BinaryMask, Connectivity, PixelMaps, SegmentRecord,
    NUM_FEATURES,
};
use crate::synth::{with_jobs, Benchmark};
use crate::table::format_sig9;
use crate::tensor::{LabelMask, ScoreMap, IGNORE_ID, OOD_ID};

/// Outcome of matching one predicted segment against the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentMatch {
    /// At least `coverage` of its valid pixels are ground-truth OoD.
    True,
    /// A false OoD indication.
    False,
    /// Lies entirely on ignore pixels; not counted.
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Ground-truth OoD components that are detected.
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Number of predicted segments that are not false positives.
    pub true_segments: usize,
    pub assignment: Vec<SegmentMatch>,
    /// Per ground-truth component, whether it is detected.
    pub detected: Vec<bool>,
}

/// Connected components (8-connectivity) of the ground-truth OoD pixels.
pub fn ood_components(gt: &LabelMask) -> Vec<SegmentRecord> {
    let mask = BinaryMask::new(
        gt.height(),
        gt.width(),
        gt.data().iter().map(|&v| v == OOD_ID).collect(),
    )
    .expect("ground truth has a valid shape");
    connected_components(&mask, Connectivity::Eight)
}

/// Matches predicted segments to ground-truth OoD components under the
/// majority-coverage rule.
pub fn match_segments(
    pred: &[SegmentRecord],
    gt: &LabelMask,
    coverage: f64,
) -> Result<MatchResult> {
    match_with_components(pred, gt, &ood_components(gt), coverage)
}

pub fn match_with_components(
    pred: &[SegmentRecord],
    gt: &LabelMask,
    gt_components: &[SegmentRecord],
    coverage: f64,
) -> Result<MatchResult> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::Domain(format!("coverage {coverage} outside (0, 1]")));
    }
    let (h, w) = (gt.height(), gt.width());
    let mut covered = vec![false; h * w];
    let mut assignment = Vec::with_capacity(pred.len());
    for seg in pred {
        let (mut valid, mut ood) = (0usize, 0usize);
        for &(r, c) in &seg.pixels {
            if r >= h || c >= w {
                return Err(Error::Schema(format!(
                    "segment {} lies outside the {h}x{w} ground truth",
                    seg.id
                )));
            }
            covered[r * w + c] = true;
            match gt.get(r, c) {
                IGNORE_ID => {}
                OOD_ID => {
                    valid += 1;
                    ood += 1;
                }
                _ => valid += 1,
            }
        }
        assignment.push(if valid == 0 {
            SegmentMatch::Ignored
        } else if (ood as f64) < coverage * valid as f64 {
            SegmentMatch::False
        } else {
            SegmentMatch::True
        });
    }
    let detected: Vec<bool> = gt_components
        .iter()
        .map(|comp| {
            let hit = comp
                .pixels
                .iter()
                .filter(|&&(r, c)| covered[r * w + c])
                .count();
            hit as f64 >= coverage * comp.size() as f64
        })
        .collect();
    let tp = detected.iter().filter(|&&d| d).count();
    let count = |m: SegmentMatch| assignment.iter().filter(|&&a| a == m).count();
    Ok(MatchResult {
        tp,
        fp: count(SegmentMatch::False),
        fn_: detected.len() - tp,
        true_segments: count(SegmentMatch::True),
        assignment,
        detected,
    })
}

/// Pixel-wise counts of a flagged set against the ground truth, ignore pixels excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PixelCounts {
    pub flagged: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl PixelCounts {
    pub fn of(flagged: &BinaryMask, gt: &LabelMask) -> Self {
        let mut out = Self::default();
        for (&f, &g) in flagged.data().iter().zip(gt.data()) {
            match (g, f) {
                (IGNORE_ID, _) => {}
                (OOD_ID, true) => out.tp += 1,
                (OOD_ID, false) => out.fn_ += 1,
                (_, true) => out.fp += 1,
                (_, false) => {}
            }
            out.flagged += usize::from(f && g != IGNORE_ID);
        }
        out
    }

    fn add(&mut self, o: &Self) {
        self.flagged += o.flagged;
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Union of the segments' pixels as a mask.
pub fn segments_mask(segments: &[SegmentRecord], height: usize, width: usize) -> BinaryMask {
    let mut data = vec![false; height * width];
    for seg in segments {
        for &(r, c) in &seg.pixels {
            data[r * width + c] = true;
        }
    }
    BinaryMask::new(height, width, data).expect("dimensions are non-zero")
}

/// Confusion counts between predicted and ground-truth classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    /// Row = ground truth class, column = predicted id (`num_classes` collects reserved ids).
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * (num_classes + 1)],
        }
    }

    /// Accumulates a prediction; ground-truth OoD and ignore pixels are skipped.
    pub fn add(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::Schema(format!(
                "prediction {}x{} and ground truth {}x{} differ",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let c = self.num_classes;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == OOD_ID || g == IGNORE_ID {
                continue;
            }
            if g < 0 || g as usize >= c {
                return Err(Error::Validation(format!(
                    "ground-truth class {g} outside 0..{c}"
                )));
            }
            let col = if p >= 0 && (p as usize) < c {
                p as usize
            } else {
                c
            };
            self.counts[g as usize * (c + 1) + col] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Mean IoU over classes occurring in prediction or ground truth.
    pub fn miou(&self) -> Result<f64> {
        let c = self.num_classes;
        if self.counts.iter().all(|&n| n == 0) {
            return Err(Error::Domain("no valid pixels for mIoU".into()));
        }
        let mut total = 0.0;
        let mut classes = 0usize;
        for k in 0..c {
            let inter = self.counts[k * (c + 1) + k];
            let gt_k: u64 = self.counts[k * (c + 1)..(k + 1) * (c + 1)].iter().sum();
            let pred_k: u64 = (0..c).map(|g| self.counts[g * (c + 1) + k]).sum();
            let union = gt_k + pred_k - inter;
            if union > 0 {
                total += inter as f64 / union as f64;
                classes += 1;
            }
        }
        Ok(total / classes as f64)
    }
}

pub fn miou(pred: &LabelMask, gt: &LabelMask, num_classes: usize) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred, gt)?;
    cm.miou()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub cutoff: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// One point per distinct score, cutoffs descending.
    pub points: Vec<PrPoint>,
    pub auprc: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl PrCurve {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "cutoff,precision,recall")?;
        for p in &self.points {
            writeln!(
                out,
                "{},{},{}",
                format_sig9(p.cutoff),
                format_sig9(p.precision),
                format_sig9(p.recall)
            )?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> String {
        serde_json::json!({ "auprc": self.auprc }).to_string()
    }
}

/// Neumaier-compensated running sum.
#[derive(Default)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Pixel-level precision-recall with ground-truth OoD pixels as positives.
///
/// Each distinct score is a cutoff (flag `score >= cutoff`); the area is the
/// step-wise sum of recall increments times precision.
pub fn pixel_pr_curve(scores: &[ScoreMap], gts: &[LabelMask]) -> Result<PrCurve> {
    if scores.len() != gts.len() {
        return Err(Error::Schema(format!(
            "{} score maps but {} ground truths",
            scores.len(),
            gts.len()
        )));
    }
    let mut samples: Vec<(f32, bool)> = Vec::new();
    for (s, g) in scores.iter().zip(gts) {
        if (s.height(), s.width()) != (g.height(), g.width()) {
            return Err(Error::Schema(
                "score map and ground truth differ in size".into(),
            ));
        }
        samples.extend(
            s.data()
                .iter()
                .zip(g.data())
                .filter(|(_, &g)| g != IGNORE_ID)
                .map(|(&v, &g)| (v, g == OOD_ID)),
        );
    }
    let positives = samples.iter().filter(|s| s.1).count();
    if positives == 0 {
        return Err(Error::Domain("no positive (OoD) pixels".into()));
    }
    samples.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = CompensatedSum::default();
    let mut i = 0;
    while i < samples.len() {
        let cutoff = samples[i].0;
        while i < samples.len() && samples[i].0 == cutoff {
            if samples[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / positives as f64;
        area.add((recall - prev_recall) * precision);
        prev_recall = recall;
        points.push(PrPoint {
            cutoff: f64::from(cutoff),
            precision,
            recall,
        });
    }
    Ok(PrCurve {
        points,
        auprc: area.value().clamp(0.0, 1.0),
        positives,
        negatives: samples.len() - positives,
    })
}

/// Segment and pixel counts at one threshold for one method combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub t: f64,
    pub ood_training: bool,
    pub meta: bool,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Percent points of mIoU lost relative to the reference configuration.
    pub miou_loss: f64,
    pub pixels: PixelCounts,
}

/// Aggregate figures of one method combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinationSummary {
    pub ood_training: bool,
    pub meta: bool,
    pub auprc: f64,
    pub miou: f64,
    pub miou_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub grid: Vec<f64>,
    /// Ordered by threshold, then `ood_training`, then `meta`.
    pub outcomes: Vec<DetectionOutcome>,
    /// mIoU of the plain (no OoD training) prediction.
    pub reference_miou: f64,
    pub combinations: Vec<CombinationSummary>,
    /// False when no meta model was supplied and meta rows are absent.
    pub meta_available: bool,
    pub gt_components: usize,
}

impl SweepResult {
    pub fn outcome(&self, t: f64, ood_training: bool, meta: bool) -> Option<&DetectionOutcome> {
        self.outcomes
            .iter()
            .find(|o| o.t == t && o.ood_training == ood_training && o.meta == meta)
    }

    /// Plot-ready table: `t,ood_training,meta,tp,fp,fn,miou_loss`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,ood_training,meta,tp,fp,fn,miou_loss")?;
        for o in &self.outcomes {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                format_sig9(o.t),
                u8::from(o.ood_training),
                u8::from(o.meta),
                o.tp,
                o.fp,
                o.fn_,
                format_sig9(o.miou_loss)
            )?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub connectivity: Connectivity,
    pub min_size: usize,
    pub coverage: f64,
    pub meta_cutoff: f64,
    pub jobs: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            connectivity: Connectivity::Eight,
            min_size: 1,
            coverage: 0.5,
            meta_cutoff: 0.5,
            jobs: 1,
        }
    }
}

/// Checks that a threshold grid is non-empty, strictly increasing and inside `[0, 1]`.
pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Domain("threshold grid is empty".into()));
    }
    if let Some(t) = grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Domain(format!("threshold {t} outside [0, 1]")));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain(
            "threshold grid must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Parses an explicit comma-separated threshold list.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let grid = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Domain(format!("malformed threshold '{}'", s.trim())))
        })
        .collect::<Result<Vec<_>>>()?;
    validate_grid(&grid)?;
    Ok(grid)
}

/// Segments flagged at threshold `t`, optionally filtered by a meta model.
pub fn flagged_segments(
    maps: &PixelMaps,
    t: f64,
    model: Option<&MetaModel>,
    options: &SweepOptions,
) -> Result<Vec<SegmentRecord>> {
    let segments = extract_from_maps(maps, t, options.connectivity, options.min_size)?;
    match model {
        Some(m) => Ok(apply_meta_filter(segments, m, options.meta_cutoff)?.0),
        None => Ok(segments),
    }
}

/// Entropy map with pixels of meta-rejected segments at `t` zeroed.
pub fn meta_gated_scores(
    maps: &PixelMaps,
    t: f64,
    model: &MetaModel,
    options: &SweepOptions,
) -> Result<ScoreMap> {
    let segments = extract_from_maps(maps, t, options.connectivity, options.min_size)?;
    let (_, removed) = apply_meta_filter(segments, model, options.meta_cutoff)?;
    let mut data = maps.entropy.data().to_vec();
    let w = maps.entropy.width();
    for seg in &removed {
        for &(r, c) in &seg.pixels {
            data[r * w + c] = 0.0;
        }
    }
    ScoreMap::new(maps.entropy.height(), w, data)
}

#[derive(Default, Clone)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
    pixels: PixelCounts,
}

struct SceneEval {
    /// Indexed `[variant][meta][threshold]`.
    counts: Vec<Vec<Vec<Counts>>>,
    confusion: Vec<ConfusionMatrix>,
    /// Indexed `[variant][meta]`.
    scores: Vec<Vec<ScoreMap>>,
    gt_components: usize,
}

fn evaluate_scene(
    pair: &crate::synth::ScenePair,
    num_classes: usize,
    grid: &[f64],
    model: Option<&MetaModel>,
    options: &SweepOptions,
) -> Result<SceneEval> {
    let components = ood_components(&pair.gt);
    let (h, w) = (pair.gt.height(), pair.gt.width());
    let metas: &[bool] = if model.is_some() {
        &[false, true]
    } else {
        &[false]
    };
    let mut counts = Vec::new();
    let mut confusion = Vec::new();
    let mut scores = Vec::new();
    for boosted in [false, true] {
        let maps = PixelMaps::from_probs(pair.probs(boosted));
        let mut cm = ConfusionMatrix::new(num_classes);
        cm.add(&maps.pred, &pair.gt)?;
        confusion.push(cm);
        let mut per_meta = Vec::new();
        let mut per_meta_scores = Vec::new();
        for &meta in metas {
            let m = if meta { model } else { None };
            let mut per_t = Vec::with_capacity(grid.len());
            for &t in grid {
                let segs = flagged_segments(&maps, t, m, options)?;
                let matched =
                    match_with_components(&segs, &pair.gt, &components, options.coverage)?;
                per_t.push(Counts {
                    tp: matched.tp,
                    fp: matched.fp,
                    fn_: matched.fn_,
                    pixels: PixelCounts::of(&segments_mask(&segs, h, w), &pair.gt),
                });
            }
            per_meta.push(per_t);
            per_meta_scores.push(match m {
                Some(model) => meta_gated_scores(&maps, grid[0], model, options)?,
                None => maps.entropy.clone(),
            });
        }
        counts.push(per_meta);
        scores.push(per_meta_scores);
    }
    Ok(SceneEval {
        counts,
        confusion,
        scores,
        gt_components: components.len(),
    })
}

/// Runs every threshold of `grid` over the benchmark for the plain and
/// boosted variants, with and without the meta filter when a model is given.
///
/// Per-scene results are reduced in scene order with exact integer sums, so
/// the outcome does not depend on `options.jobs`.
pub fn sweep(
    bench: &Benchmark,
    grid: &[f64],
    model: Option<&MetaModel>,
    options: &SweepOptions,
) -> Result<SweepResult> {
    validate_grid(grid)?;
    if bench.scenes.is_empty() {
        return Err(Error::Config("benchmark has no scenes".into()));
    }
    let num_classes = bench.config.num_classes;
    let per_scene = with_jobs(options.jobs, || {
        bench
            .scenes
            .par_iter()
            .map(|pair| evaluate_scene(pair, num_classes, grid, model, options))
            .collect::<Result<Vec<_>>>()
    })?;

    let metas: &[bool] = if model.is_some() {
        &[false, true]
    } else {
        &[false]
    };
    let mut confusion = vec![ConfusionMatrix::new(num_classes); 2];
    let mut totals = vec![vec![vec![Counts::default(); grid.len()]; metas.len()]; 2];
    for scene in &per_scene {
        for v in 0..2 {
            confusion[v].merge(&scene.confusion[v]);
            for m in 0..metas.len() {
                for (acc, c) in totals[v][m].iter_mut().zip(&scene.counts[v][m]) {
                    acc.tp += c.tp;
                    acc.fp += c.fp;
                    acc.fn_ += c.fn_;
                    acc.pixels.add(&c.pixels);
                }
            }
        }
    }
    let miou = [confusion[0].miou()?, confusion[1].miou()?];
    let reference_miou = miou[0];
    let loss = |v: usize| 100.0 * (reference_miou - miou[v]);

    let mut combinations = Vec::new();
    for (v, boosted) in [false, true].into_iter().enumerate() {
        for (m, &meta) in metas.iter().enumerate() {
            let scores: Vec<ScoreMap> = per_scene.iter().map(|s| s.scores[v][m].clone()).collect();
            let gts: Vec<LabelMask> = bench.scenes.iter().map(|s| s.gt.clone()).collect();
            combinations.push(CombinationSummary {
                ood_training: boosted,
                meta,
                auprc: pixel_pr_curve(&scores, &gts)?.auprc,
                miou: miou[v],
                miou_loss: loss(v),
            });
        }
    }

    let mut outcomes = Vec::new();
    for (k, &t) in grid.iter().enumerate() {
        for (v, boosted) in [false, true].into_iter().enumerate() {
            for (m, &meta) in metas.iter().enumerate() {
                let c = &totals[v][m][k];
                outcomes.push(DetectionOutcome {
                    t,
                    ood_training: boosted,
                    meta,
                    tp: c.tp,
                    fp: c.fp,
                    fn_: c.fn_,
                    miou_loss: loss(v),
                    pixels: c.pixels,
                });
            }
        }
    }

    Ok(SweepResult {
        grid: grid.to_vec(),
        outcomes,
        reference_miou,
        combinations,
        meta_available: model.is_some(),
        gt_components: per_scene.iter().map(|s| s.gt_components).sum(),
    })
}

/// Labelled segment features pooled over every scene, both variants and every
/// threshold of `grid`, for fitting a meta model.
pub fn meta_training_set(
    bench: &Benchmark,
    grid: &[f64],
    options: &SweepOptions,
    tau_tp: f64,
) -> Result<(Vec<[f64; NUM_FEATURES]>, Vec<MetaLabel>)> {
    validate_grid(grid)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for pair in &bench.scenes {
        for boosted in [false, true] {
            let maps = PixelMaps::from_probs(pair.probs(boosted));
            for &t in grid {
                let segs = extract_from_maps(&maps, t, options.connectivity, options.min_size)?;
                let seg_labels = label_segments(&segs, &pair.gt, tau_tp)?;
                for (seg, label) in segs.iter().zip(seg_labels) {
                    if let (Some(f), Some(l)) = (seg.features, label) {
                        rows.push(f.to_array());
                        labels.push(l);
                    }
                }
            }
        }
    }
    Ok((rows, labels))
}

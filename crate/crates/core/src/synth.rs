//! Seeded synthetic scenes standing in for a segmentation network's softmax
//! output.
//!
//! A scene is a Voronoi partition of the image into classes. In-distribution
//! pixels draw their probability vector from `Dirichlet(a0 + k e_class)`.
//! Unknown objects are ellipses whose pixels mix a confidently wrong
//! `Dirichlet(a0 + k e_r)` draw with a flat `Dirichlet(a0)` draw by the
//! weight `ood_entropy_boost`. Small discs of in-distribution pixels are
//! blended toward uniform to produce false-positive candidates.
//!
//! Randomness comes from ChaCha8 keyed by the scene seed, with one stream per
//! purpose (layout, in-distribution draws, blob geometry, OoD draws, speckle).
//! The streams are consumed identically for every `ood_entropy_boost`, so two
//! configs differing only in the boost share geometry and in-distribution
//! probabilities bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy::{read_label_mask, read_prob_map, write_npy};
use crate::tensor::{LabelMask, ProbMap, OOD_ID};

const STREAM_LAYOUT: u64 = 1;
const STREAM_INDIST: u64 = 2;
const STREAM_BLOBS: u64 = 3;
const STREAM_OOD_SHARP: u64 = 4;
const STREAM_OOD_FLAT: u64 = 5;
const STREAM_SPECKLE: u64 = 6;

/// Speckle disc radii in pixels, inclusive.
const SPECKLE_RADIUS: (i64, i64) = (2, 4);
const BLOB_ATTEMPTS: usize = 1000;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub n_regions: usize,
    pub n_ood_blobs: usize,
    /// Inclusive range of ellipse semi-axes in pixels.
    pub blob_radius_range: [f64; 2],
    /// Concentration added to the true (or wrong) class.
    pub sharpness: f64,
    /// Symmetric Dirichlet floor.
    pub base_alpha: f64,
    pub ood_entropy_boost: f64,
    pub speckle_rate: f64,
    pub speckle_strength: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            num_classes: 11,
            n_regions: 12,
            n_ood_blobs: 3,
            blob_radius_range: [6.0, 14.0],
            sharpness: 25.0,
            base_alpha: 0.3,
            ood_entropy_boost: 0.9,
            speckle_rate: 0.02,
            speckle_strength: 0.6,
            seed: 42,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.height == 0 || self.width == 0 {
            return fail(format!(
                "image must be at least 1x1, got {}x{}",
                self.height, self.width
            ));
        }
        if self.num_classes < 2 || self.num_classes > OOD_ID as usize {
            return fail(format!("num_classes {} outside 2..=254", self.num_classes));
        }
        if self.n_regions == 0 {
            return fail("n_regions must be at least 1".into());
        }
        let [rmin, rmax] = self.blob_radius_range;
        if !(rmin >= 1.0 && rmin <= rmax && rmax.is_finite()) {
            return fail(format!(
                "blob_radius_range [{rmin}, {rmax}] must satisfy 1 <= min <= max"
            ));
        }
        if !(self.sharpness > 0.0 && self.sharpness.is_finite()) {
            return fail(format!("sharpness {} must be positive", self.sharpness));
        }
        if !(self.base_alpha > 0.0 && self.base_alpha.is_finite()) {
            return fail(format!("base_alpha {} must be positive", self.base_alpha));
        }
        if !(0.0..=1.0).contains(&self.ood_entropy_boost) {
            return fail(format!(
                "ood_entropy_boost {} outside [0, 1]",
                self.ood_entropy_boost
            ));
        }
        if !(0.0..1.0).contains(&self.speckle_rate) {
            return fail(format!("speckle_rate {} outside [0, 1)", self.speckle_rate));
        }
        if !(0.0..=1.0).contains(&self.speckle_strength) {
            return fail(format!(
                "speckle_strength {} outside [0, 1]",
                self.speckle_strength
            ));
        }
        Ok(())
    }

    /// Same scene with unknown objects left confidently wrong.
    pub fn unboosted(&self) -> Self {
        Self {
            ood_entropy_boost: 0.0,
            ..self.clone()
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// One generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub probs: ProbMap,
    /// Class layout with unknown objects stamped as [`OOD_ID`].
    pub gt: LabelMask,
    /// Class layout before stamping.
    pub layout: LabelMask,
}

struct Dirichlet {
    gammas: Vec<Gamma<f64>>,
}

impl Dirichlet {
    fn new(base: f64, num_classes: usize, peak: Option<(usize, f64)>) -> Self {
        let gammas = (0..num_classes)
            .map(|c| {
                let extra = match peak {
                    Some((class, k)) if class == c => k,
                    _ => 0.0,
                };
                Gamma::new(base + extra, 1.0).expect("positive shape")
            })
            .collect();
        Self { gammas }
    }

    fn sample_into(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        loop {
            for (slot, g) in out.iter_mut().zip(&self.gammas) {
                *slot = g.sample(rng);
            }
            let total: f64 = out.iter().sum();
            if total > 0.0 && total.is_finite() {
                out.iter_mut().for_each(|v| *v /= total);
                return;
            }
        }
    }
}

struct Ellipse {
    center: (f64, f64),
    axes: (f64, f64),
    angle: f64,
}

impl Ellipse {
    fn contains(&self, row: usize, col: usize) -> bool {
        let (dy, dx) = (row as f64 - self.center.0, col as f64 - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.axes.0;
        let v = (-dx * s + dy * c) / self.axes.1;
        u * u + v * v <= 1.0
    }

    fn reach(&self) -> f64 {
        self.axes.0.max(self.axes.1)
    }
}

fn place_blobs(cfg: &SceneConfig) -> Result<Vec<Ellipse>> {
    let mut rng = cfg.rng(STREAM_BLOBS);
    let [rmin, rmax] = cfg.blob_radius_range;
    let mut blobs: Vec<Ellipse> = Vec::with_capacity(cfg.n_ood_blobs);
    for k in 0..cfg.n_ood_blobs {
        let mut placed = false;
        for _ in 0..BLOB_ATTEMPTS {
            let axes = (rng.gen_range(rmin..=rmax), rng.gen_range(rmin..=rmax));
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let reach = axes.0.max(axes.1);
            let (hi_r, hi_c) = (
                cfg.height as f64 - 1.0 - reach,
                cfg.width as f64 - 1.0 - reach,
            );
            if hi_r < reach || hi_c < reach {
                return Err(Error::Config(format!(
                    "blob radius {reach:.1} does not fit a {}x{} image",
                    cfg.height, cfg.width
                )));
            }
            let center = (rng.gen_range(reach..=hi_r), rng.gen_range(reach..=hi_c));
            let candidate = Ellipse {
                center,
                axes,
                angle,
            };
            // Keep a one-pixel gap so blobs stay separate components.
            let clear = blobs.iter().all(|b| {
                let d = ((b.center.0 - center.0).powi(2) + (b.center.1 - center.1).powi(2)).sqrt();
                d > b.reach() + reach + 2.0
            });
            if clear {
                blobs.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place OoD blob {} of {} without overlap",
                k + 1,
                cfg.n_ood_blobs
            )));
        }
    }
    Ok(blobs)
}

/// Generates one scene, a pure function of `cfg`.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let (h, w, c) = (cfg.height, cfg.width, cfg.num_classes);

    let mut rng = cfg.rng(STREAM_LAYOUT);
    let sites: Vec<(f64, f64, i32)> = (0..cfg.n_regions)
        .map(|_| {
            (
                rng.gen_range(0.0..h as f64),
                rng.gen_range(0.0..w as f64),
                rng.gen_range(0..c) as i32,
            )
        })
        .collect();
    let layout: Vec<i32> = (0..h * w)
        .map(|i| {
            let (r, col) = ((i / w) as f64, (i % w) as f64);
            let mut best = (f64::INFINITY, 0);
            for &(sr, sc, class) in &sites {
                let d = (sr - r).powi(2) + (sc - col).powi(2);
                if d < best.0 {
                    best = (d, class);
                }
            }
            best.1
        })
        .collect();

    let blobs = place_blobs(cfg)?;
    let mut blob_of = vec![usize::MAX; h * w];
    for (k, blob) in blobs.iter().enumerate() {
        let reach = blob.reach().ceil() as usize;
        let (cr, cc) = (
            blob.center.0.round() as usize,
            blob.center.1.round() as usize,
        );
        for r in cr.saturating_sub(reach)..=(cr + reach).min(h - 1) {
            for col in cc.saturating_sub(reach)..=(cc + reach).min(w - 1) {
                if blob.contains(r, col) {
                    blob_of[r * w + col] = k;
                }
            }
        }
    }
    let mut wrong_rng = cfg.rng(STREAM_BLOBS ^ 0x100);
    let wrong_class: Vec<usize> = blobs
        .iter()
        .map(|b| {
            let under =
                layout[b.center.0.round() as usize * w + b.center.1.round() as usize] as usize;
            (under + wrong_rng.gen_range(1..c)) % c
        })
        .collect();

    let mut probs = vec![0.0f64; h * w * c];
    let mut indist_rng = cfg.rng(STREAM_INDIST);
    let class_dists: Vec<Dirichlet> = (0..c)
        .map(|k| Dirichlet::new(cfg.base_alpha, c, Some((k, cfg.sharpness))))
        .collect();
    for (i, px) in probs.chunks_exact_mut(c).enumerate() {
        class_dists[layout[i] as usize].sample_into(&mut indist_rng, px);
    }

    let beta = cfg.ood_entropy_boost;
    let flat = Dirichlet::new(cfg.base_alpha, c, None);
    let mut sharp_rng = cfg.rng(STREAM_OOD_SHARP);
    let mut flat_rng = cfg.rng(STREAM_OOD_FLAT);
    let mut sharp = vec![0.0; c];
    let mut uniform = vec![0.0; c];
    for (i, px) in probs.chunks_exact_mut(c).enumerate() {
        let k = blob_of[i];
        if k == usize::MAX {
            continue;
        }
        class_dists[wrong_class[k]].sample_into(&mut sharp_rng, &mut sharp);
        flat.sample_into(&mut flat_rng, &mut uniform);
        let mut total = 0.0;
        for ((p, s), u) in px.iter_mut().zip(&sharp).zip(&uniform) {
            *p = (1.0 - beta) * s + beta * u;
            total += *p;
        }
        px.iter_mut().for_each(|p| *p /= total);
    }

    let indist_count = blob_of.iter().filter(|&&b| b == usize::MAX).count();
    let target = (cfg.speckle_rate * indist_count as f64).round() as usize;
    let mut speckled = vec![false; h * w];
    let mut count = 0;
    let mut speckle_rng = cfg.rng(STREAM_SPECKLE);
    let max_discs = 100 * (target + 1);
    for _ in 0..max_discs {
        if count >= target {
            break;
        }
        let radius = speckle_rng.gen_range(SPECKLE_RADIUS.0..=SPECKLE_RADIUS.1);
        let (cr, cc) = (
            speckle_rng.gen_range(0..h) as i64,
            speckle_rng.gen_range(0..w) as i64,
        );
        for r in (cr - radius).max(0)..=(cr + radius).min(h as i64 - 1) {
            for col in (cc - radius).max(0)..=(cc + radius).min(w as i64 - 1) {
                let i = r as usize * w + col as usize;
                if (r - cr).pow(2) + (col - cc).pow(2) <= radius * radius
                    && blob_of[i] == usize::MAX
                    && !speckled[i]
                {
                    speckled[i] = true;
                    count += 1;
                }
            }
        }
    }
    let strength = cfg.speckle_strength;
    let u = 1.0 / c as f64;
    for (i, px) in probs.chunks_exact_mut(c).enumerate() {
        if speckled[i] {
            px.iter_mut()
                .for_each(|p| *p = (1.0 - strength) * *p + strength * u);
        }
    }

    let gt: Vec<i32> = layout
        .iter()
        .zip(&blob_of)
        .map(|(&class, &b)| if b == usize::MAX { class } else { OOD_ID })
        .collect();
    Ok(Scene {
        probs: ProbMap::new(h, w, c, probs.into_iter().map(|p| p as f32).collect())?,
        gt: LabelMask::new(h, w, gt)?,
        layout: LabelMask::new(h, w, layout)?,
    })
}

/// Seed of scene `index` in a benchmark rooted at `seed` (SplitMix64 finaliser).
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A scene rendered with and without the entropy boost on unknown objects.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub seed: u64,
    pub gt: LabelMask,
    pub boosted: ProbMap,
    pub plain: ProbMap,
}

impl ScenePair {
    pub fn probs(&self, boosted: bool) -> &ProbMap {
        if boosted {
            &self.boosted
        } else {
            &self.plain
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub config: SceneConfig,
    pub scenes: Vec<ScenePair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestScene {
    pub index: usize,
    pub seed: u64,
    pub prob_boosted: String,
    pub prob_plain: String,
    pub gt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub config: SceneConfig,
    pub n_scenes: usize,
    pub scenes: Vec<ManifestScene>,
}

pub fn generate_pair(cfg: &SceneConfig, index: usize) -> Result<ScenePair> {
    let scene_cfg = SceneConfig {
        seed: scene_seed(cfg.seed, index),
        ..cfg.clone()
    };
    let boosted = generate_scene(&scene_cfg)?;
    let plain = generate_scene(&scene_cfg.unboosted())?;
    debug_assert_eq!(boosted.gt, plain.gt);
    Ok(ScenePair {
        seed: scene_cfg.seed,
        gt: boosted.gt,
        boosted: boosted.probs,
        plain: plain.probs,
    })
}

/// Runs `f` on a pool of `jobs` threads; `jobs <= 1` stays on the caller's thread.
pub(crate) fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> T {
    if jobs <= 1 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

impl Benchmark {
    /// Generates `n_scenes` paired scenes in memory.
    pub fn generate(cfg: &SceneConfig, n_scenes: usize, jobs: usize) -> Result<Self> {
        if n_scenes == 0 {
            return Err(Error::Config("n_scenes must be at least 1".into()));
        }
        cfg.validate()?;
        let scenes = with_jobs(jobs, || {
            (0..n_scenes)
                .into_par_iter()
                .map(|k| generate_pair(cfg, k))
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(Self {
            config: cfg.clone(),
            scenes,
        })
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION.into(),
            config: self.config.clone(),
            n_scenes: self.scenes.len(),
            scenes: self
                .scenes
                .iter()
                .enumerate()
                .map(|(k, s)| ManifestScene {
                    index: k,
                    seed: s.seed,
                    prob_boosted: format!("scene_{k}_prob_boosted.npy"),
                    prob_plain: format!("scene_{k}_prob_plain.npy"),
                    gt: format!("scene_{k}_gt.npy"),
                })
                .collect(),
        }
    }

    /// Writes NPY files and the manifest; returns the manifest path.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest();
        for (scene, entry) in self.scenes.iter().zip(&manifest.scenes) {
            write_npy(&scene.boosted, dir.join(&entry.prob_boosted))?;
            write_npy(&scene.plain, dir.join(&entry.prob_plain))?;
            write_npy(&scene.gt, dir.join(&entry.gt))?;
        }
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported benchmark format version '{}'",
                manifest.format_version
            )));
        }
        if manifest.scenes.len() != manifest.n_scenes {
            return Err(Error::Config(format!(
                "manifest declares {} scenes but lists {}",
                manifest.n_scenes,
                manifest.scenes.len()
            )));
        }
        let mut scenes = Vec::with_capacity(manifest.scenes.len());
        for entry in &manifest.scenes {
            let boosted_path = dir.join(&entry.prob_boosted);
            if entry.prob_boosted.is_empty() || !boosted_path.is_file() {
                return Err(Error::Config(format!(
                    "scene {} has no boosted probability map",
                    entry.index
                )));
            }
            let gt = read_label_mask(dir.join(&entry.gt))?;
            gt.validate(manifest.config.num_classes)?;
            scenes.push(ScenePair {
                seed: entry.seed,
                gt,
                boosted: read_prob_map(boosted_path, true)?,
                plain: read_prob_map(dir.join(&entry.prob_plain), true)?,
            });
        }
        Ok(Self {
            config: manifest.config,
            scenes,
        })
    }
}

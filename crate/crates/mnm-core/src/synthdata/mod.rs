//! Deterministic generator of paired-view synthetic breasts.
//!
//! The generator reproduces the clinical data-distribution problem at desk
//! scale: sparse malignant findings, benign distractors, a large negative
//! majority, cross-view correspondence through a shared radial coordinate,
//! and box annotations that are withheld for most non-malignant breasts.
//!
//! Malignancy is only decodable from the *joint* view evidence: a malignant
//! finding carries a strong halo texture in both views except on an
//! "ambiguous" fraction, where exactly one view renders it benign-like.
//! Benign findings never carry the halo. An oracle reading both views'
//! texture cues therefore separates the classes perfectly, while any
//! single-view oracle misses ambiguous lesions.

mod io;
mod render;

pub use io::{load, save, SynthError};
pub use render::render_views;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Malignant,
    Benign,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingLabel {
    Malignant,
    Benign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Cc,
    Mlo,
}

/// One localized finding, placed consistently in both views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub label: FindingLabel,
    pub box_cc: BBox,
    pub box_mlo: BBox,
    /// Peak brightness over the background.
    pub contrast: f64,
    /// Intrinsic suspicion cue (halo strength) of the lesion.
    pub texture: f64,
    /// Cue actually rendered in each view; an ambiguous malignant finding
    /// has one view lowered into the benign range.
    pub texture_cc: f64,
    pub texture_mlo: f64,
    /// Geometry shared by both views.
    pub radius_x: f64,
    pub radius_y: f64,
    pub angle_cc: f64,
    pub angle_mlo: f64,
}

/// Row-major single-channel image, stored at `f32` like the on-disk format.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl ViewImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        ViewImage {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

/// Paired CC/MLO images of one breast with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct BreastSample {
    pub breast_id: String,
    pub exam_id: u32,
    pub side: Side,
    pub category: Category,
    /// When false, boxes are withheld from the loss but kept for evaluation.
    pub annotated: bool,
    pub image_cc: ViewImage,
    pub image_mlo: ViewImage,
    pub findings: Vec<Finding>,
}

impl BreastSample {
    pub fn image(&self, view: View) -> &ViewImage {
        match view {
            View::Cc => &self.image_cc,
            View::Mlo => &self.image_mlo,
        }
    }

    pub fn image_id(&self, view: View) -> String {
        match view {
            View::Cc => format!("{}_cc", self.breast_id),
            View::Mlo => format!("{}_mlo", self.breast_id),
        }
    }

    pub fn finding_box(f: &Finding, view: View) -> BBox {
        match view {
            View::Cc => f.box_cc,
            View::Mlo => f.box_mlo,
        }
    }

    /// Breast-level malignancy label used by classification metrics.
    pub fn label(&self) -> bool {
        self.category == Category::Malignant
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub breasts: Vec<BreastSample>,
}

/// Generator knobs. Category counts default to the 15:6:79 prevalence mix;
/// annotated fractions default to 0.88 / 0.28 / 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub malignant: usize,
    pub benign: usize,
    pub negative: usize,
    pub annotated_fraction_malignant: f64,
    pub annotated_fraction_benign: f64,
    pub annotated_fraction_negative: f64,
    pub image_size: usize,
    /// Lesion Gaussian radii are drawn uniformly from this range (pixels).
    pub lesion_radius: (f64, f64),
    pub contrast_range: (f64, f64),
    /// Halo strength ranges for the two classes; they must not overlap.
    pub benign_texture: (f64, f64),
    pub malignant_texture: (f64, f64),
    /// Fraction of malignant findings rendered benign-like in one view.
    pub ambiguity_fraction: f64,
    /// Allowed disagreement of the normalized radial position across views.
    pub radial_jitter: f64,
    pub noise_level: f64,
    /// Mean count of smooth background clutter blobs per image.
    pub clutter_rate: f64,
    pub clutter_contrast: (f64, f64),
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            malignant: 15,
            benign: 6,
            negative: 79,
            annotated_fraction_malignant: 0.88,
            annotated_fraction_benign: 0.28,
            annotated_fraction_negative: 0.0,
            image_size: 128,
            lesion_radius: (3.5, 7.0),
            contrast_range: (0.45, 0.85),
            benign_texture: (0.0, 0.25),
            malignant_texture: (0.7, 1.0),
            ambiguity_fraction: 0.3,
            radial_jitter: 0.04,
            noise_level: 0.03,
            clutter_rate: 1.5,
            clutter_contrast: (0.05, 0.22),
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn total(&self) -> usize {
        self.malignant + self.benign + self.negative
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.total() == 0 {
            return Err(SynthError::Config("zero total breast count".into()));
        }
        for (name, f) in [
            ("malignant", self.annotated_fraction_malignant),
            ("benign", self.annotated_fraction_benign),
            ("negative", self.annotated_fraction_negative),
            ("ambiguity", self.ambiguity_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(SynthError::Config(format!(
                    "{name} fraction {f} outside [0, 1]"
                )));
            }
        }
        if self.image_size % 8 != 0 || self.image_size < 32 {
            return Err(SynthError::Config(format!(
                "image size {} must be a multiple of 8 and at least 32",
                self.image_size
            )));
        }
        Ok(())
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent substream for a (breast, purpose) pair so generation order
/// and parallelism cannot change the output.
pub(crate) fn substream(master: u64, breast: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(master ^ salt) ^ breast))
}

const SALT_SHUFFLE: u64 = 0x01;
const SALT_ANNOTATION: u64 = 0x02;
const SALT_FINDINGS: u64 = 0x10;
const SALT_BG_CC: u64 = 0x20;
const SALT_BG_MLO: u64 = 0x21;

/// Simulated nipple point of a view; findings radiate from here into the
/// tissue toward decreasing x.
pub fn nipple_point(view: View, size: usize) -> (f64, f64) {
    let s = size as f64;
    match view {
        View::Cc => (s - 1.0, s * 0.50),
        View::Mlo => (s - 1.0, s * 0.45),
    }
}

/// The radial extent against which positions are normalized.
pub fn breast_extent(size: usize) -> f64 {
    0.85 * size as f64
}

/// Normalized radial position of a box center in its view.
pub fn radial_position(b: &BBox, view: View, size: usize) -> f64 {
    let (nx, ny) = nipple_point(view, size);
    let (cx, cy) = b.center();
    ((cx - nx).powi(2) + (cy - ny).powi(2)).sqrt() / breast_extent(size)
}

const BOX_RADII: f64 = 3.0; // box half-extent in units of the Gaussian radii

fn place_view(
    rng: &mut ChaCha8Rng,
    view: View,
    rho: f64,
    rx: f64,
    ry: f64,
    size: usize,
) -> (BBox, f64) {
    let (nx, ny) = nipple_point(view, size);
    let extent = breast_extent(size);
    let margin_x = BOX_RADII * rx + 1.0;
    let margin_y = BOX_RADII * ry + 1.0;
    loop {
        let theta: f64 = rng.gen_range(-0.95..0.95);
        let cx = nx - rho * extent * theta.cos();
        let cy = ny + rho * extent * theta.sin();
        if cx - margin_x < 0.0
            || cx + margin_x > size as f64
            || cy - margin_y < 0.0
            || cy + margin_y > size as f64
        {
            continue;
        }
        let b = BBox::new(cx - margin_x, cy - margin_y, cx + margin_x, cy + margin_y)
            .expect("margins are positive");
        return (b, theta);
    }
}

fn sample_finding(rng: &mut ChaCha8Rng, label: FindingLabel, cfg: &DatasetConfig) -> Finding {
    let rho: f64 = rng.gen_range(0.30..0.75);
    let jitter = if cfg.radial_jitter > 0.0 {
        rng.gen_range(-cfg.radial_jitter..cfg.radial_jitter)
    } else {
        0.0
    };
    let rho_mlo = rho + jitter;
    let rx = rng.gen_range(cfg.lesion_radius.0..cfg.lesion_radius.1);
    let ry = rng.gen_range(cfg.lesion_radius.0..cfg.lesion_radius.1);
    let contrast = rng.gen_range(cfg.contrast_range.0..cfg.contrast_range.1);
    let texture = match label {
        FindingLabel::Malignant => rng.gen_range(cfg.malignant_texture.0..cfg.malignant_texture.1),
        FindingLabel::Benign => rng.gen_range(cfg.benign_texture.0..cfg.benign_texture.1),
    };
    let (mut texture_cc, mut texture_mlo) = (texture, texture);
    if label == FindingLabel::Malignant && rng.gen::<f64>() < cfg.ambiguity_fraction {
        let masked = rng.gen_range(cfg.benign_texture.0..cfg.benign_texture.1);
        if rng.gen::<bool>() {
            texture_cc = masked;
        } else {
            texture_mlo = masked;
        }
    }
    let (box_cc, angle_cc) = place_view(rng, View::Cc, rho, rx, ry, cfg.image_size);
    let (box_mlo, angle_mlo) = place_view(rng, View::Mlo, rho_mlo, rx, ry, cfg.image_size);
    Finding {
        label,
        box_cc,
        box_mlo,
        contrast,
        texture,
        texture_cc,
        texture_mlo,
        radius_x: rx,
        radius_y: ry,
        angle_cc,
        angle_mlo,
    }
}

fn sample_findings(
    rng: &mut ChaCha8Rng,
    category: Category,
    cfg: &DatasetConfig,
) -> Vec<Finding> {
    match category {
        Category::Negative => Vec::new(),
        Category::Malignant => {
            let mut findings = vec![sample_finding(rng, FindingLabel::Malignant, cfg)];
            if rng.gen::<f64>() < 0.3 {
                findings.push(sample_finding(rng, FindingLabel::Benign, cfg));
            }
            findings
        }
        Category::Benign => {
            let count = if rng.gen::<bool>() { 1 } else { 2 };
            (0..count)
                .map(|_| sample_finding(rng, FindingLabel::Benign, cfg))
                .collect()
        }
    }
}

/// Generate the full dataset: exactly the configured number of breasts per
/// category, bit-identical for identical `(config, seed)`.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset, SynthError> {
    config.validate()?;

    // category per breast, shuffled so exams mix categories
    let mut categories = Vec::with_capacity(config.total());
    categories.extend(std::iter::repeat(Category::Malignant).take(config.malignant));
    categories.extend(std::iter::repeat(Category::Benign).take(config.benign));
    categories.extend(std::iter::repeat(Category::Negative).take(config.negative));
    categories.shuffle(&mut substream(config.seed, 0, SALT_SHUFFLE));

    // exact annotated counts per category, assigned to a random subset
    let mut annotated = vec![false; categories.len()];
    let mut ann_rng = substream(config.seed, 0, SALT_ANNOTATION);
    for (cat, frac) in [
        (Category::Malignant, config.annotated_fraction_malignant),
        (Category::Benign, config.annotated_fraction_benign),
        (Category::Negative, config.annotated_fraction_negative),
    ] {
        let mut idx: Vec<usize> = (0..categories.len())
            .filter(|&i| categories[i] == cat)
            .collect();
        idx.shuffle(&mut ann_rng);
        let k = (frac * idx.len() as f64).round() as usize;
        for &i in idx.iter().take(k) {
            annotated[i] = true;
        }
    }

    let breasts = categories
        .iter()
        .enumerate()
        .map(|(i, &category)| {
            let mut finding_rng = substream(config.seed, i as u64, SALT_FINDINGS);
            let findings = sample_findings(&mut finding_rng, category, config);
            let mut bg_cc = substream(config.seed, i as u64, SALT_BG_CC);
            let mut bg_mlo = substream(config.seed, i as u64, SALT_BG_MLO);
            let (image_cc, image_mlo) =
                render_views(&findings, &mut bg_cc, &mut bg_mlo, config);
            BreastSample {
                breast_id: format!("b{i:04}"),
                exam_id: (i / 2) as u32,
                side: if i % 2 == 0 { Side::Left } else { Side::Right },
                category,
                annotated: annotated[i],
                image_cc,
                image_mlo,
                findings,
            }
        })
        .collect();

    Ok(Dataset {
        config: config.clone(),
        breasts,
    })
}

/// Split a dataset into train/val/test at exam granularity (both breasts of
/// an exam stay together), stratified by exam-level malignancy so small
/// datasets keep malignant cases in every split.
pub fn split_dataset(dataset: &Dataset, seed: u64) -> (Dataset, Dataset, Dataset) {
    use std::collections::BTreeMap;
    let mut exams: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, b) in dataset.breasts.iter().enumerate() {
        exams.entry(b.exam_id).or_default().push(i);
    }
    let mut malignant_exams = Vec::new();
    let mut other_exams = Vec::new();
    for (&exam, members) in &exams {
        if members.iter().any(|&i| dataset.breasts[i].label()) {
            malignant_exams.push(exam);
        } else {
            other_exams.push(exam);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x5f17));
    malignant_exams.shuffle(&mut rng);
    other_exams.shuffle(&mut rng);

    let mut buckets: [Vec<u32>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for stratum in [malignant_exams, other_exams] {
        let n = stratum.len();
        let n_test = (n as f64 * 0.10).round() as usize;
        let n_val = (n as f64 * 0.10).round() as usize;
        for (k, &exam) in stratum.iter().enumerate() {
            if k < n_test {
                buckets[2].push(exam);
            } else if k < n_test + n_val {
                buckets[1].push(exam);
            } else {
                buckets[0].push(exam);
            }
        }
    }

    let subset = |wanted: &[u32]| -> Dataset {
        let set: std::collections::HashSet<u32> = wanted.iter().copied().collect();
        Dataset {
            config: dataset.config.clone(),
            breasts: dataset
                .breasts
                .iter()
                .filter(|b| set.contains(&b.exam_id))
                .cloned()
                .collect(),
        }
    };
    (subset(&buckets[0]), subset(&buckets[1]), subset(&buckets[2]))
}

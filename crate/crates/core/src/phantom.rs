//! Synthetic six-layer tissue volumes, the on-disk stack format, and
//! patient-level dataset splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::stable_seed;

/// Number of admissible mask labels (background plus six layers).
pub const NUM_LABELS: usize = 7;
/// Number of tissue layers.
pub const NUM_LAYERS: usize = 6;

/// Mask label, in depth order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum TissueLayer {
    Background = 0,
    Dermis = 1,
    SuperficialFat = 2,
    SuperficialFascia = 3,
    DeepFat = 4,
    DeepFascia = 5,
    Muscle = 6,
}

impl TissueLayer {
    pub const LAYERS: [TissueLayer; NUM_LAYERS] = [
        TissueLayer::Dermis,
        TissueLayer::SuperficialFat,
        TissueLayer::SuperficialFascia,
        TissueLayer::DeepFat,
        TissueLayer::DeepFascia,
        TissueLayer::Muscle,
    ];

    pub fn from_label(v: u8) -> Option<Self> {
        use TissueLayer::*;
        Some(match v {
            0 => Background,
            1 => Dermis,
            2 => SuperficialFat,
            3 => SuperficialFascia,
            4 => DeepFat,
            5 => DeepFascia,
            6 => Muscle,
            _ => return None,
        })
    }

    pub fn label(self) -> u8 {
        self as u8
    }

    /// Column name used in reports.
    pub fn short_name(self) -> &'static str {
        use TissueLayer::*;
        match self {
            Background => "background",
            Dermis => "dermis",
            SuperficialFat => "superficial_fat",
            SuperficialFascia => "sfm",
            DeepFat => "deep_fat",
            DeepFascia => "dfm",
            Muscle => "muscle",
        }
    }
}

/// One grayscale slice and its layer mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMaskPair {
    pub height: usize,
    pub width: usize,
    /// Row-major intensities in `[0, 1]`.
    pub image: Vec<f32>,
    /// Row-major labels in `0..=6`.
    pub mask: Vec<u8>,
    pub slice_index: usize,
    pub annotated: bool,
}

impl ImageMaskPair {
    pub fn new(height: usize, width: usize, image: Vec<f32>, mask: Vec<u8>, slice_index: usize) -> Result<Self> {
        let imp = ImageMaskPair {
            height,
            width,
            image,
            mask,
            slice_index,
            annotated: true,
        };
        imp.validate()?;
        Ok(imp)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.image.len() != n || self.mask.len() != n {
            return Err(Error::Shape(format!(
                "slice {}: image has {} pixels, mask {}, expected {n}",
                self.slice_index,
                self.image.len(),
                self.mask.len()
            )));
        }
        if let Some(bad) = self.mask.iter().find(|&&v| v as usize >= NUM_LABELS) {
            return Err(Error::Validation(format!(
                "slice {}: mask label {bad} outside 0..=6",
                self.slice_index
            )));
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &ImageMaskPair) -> bool {
        self.height == other.height && self.width == other.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Location {
    #[serde(rename = "MF")]
    Multifidus,
    #[serde(rename = "ES")]
    ErectorSpinae,
}

/// Ordered slices of one scan.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    pub pairs: Vec<ImageMaskPair>,
    pub patient_id: String,
    pub scan_id: String,
    pub side: Side,
    pub location: Location,
    pub pixel_spacing_mm: f64,
}

impl SliceStack {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pairs.first().map(|p| (p.height, p.width)).unwrap_or((0, 0))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_spacing_mm > 0.0) {
            return Err(Error::Validation("pixel spacing must be positive".into()));
        }
        let (h, w) = self.dims();
        for (i, p) in self.pairs.iter().enumerate() {
            p.validate()?;
            if p.slice_index != i {
                return Err(Error::Validation(format!("slice {i} carries index {}", p.slice_index)));
            }
            if (p.height, p.width) != (h, w) {
                return Err(Error::Validation(format!(
                    "slice {i} is {}x{}, stack is {h}x{w}",
                    p.height, p.width
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic layered volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub num_slices: usize,
    pub height: usize,
    pub width: usize,
    /// Peak lateral undulation of the layer stack.
    pub boundary_amplitude_px: f64,
    /// Largest displacement of any boundary between adjacent slices.
    pub drift_max_px: f64,
    pub speckle_strength: f64,
    pub min_layer_thickness_px: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            num_slices: 33,
            height: 64,
            width: 64,
            boundary_amplitude_px: 3.0,
            drift_max_px: 1.5,
            speckle_strength: 0.3,
            min_layer_thickness_px: 3,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_slices < 3 {
            return bad(format!("num_slices {} < 3", self.num_slices));
        }
        if self.height < 32 || self.width < 32 {
            return bad(format!("image {}x{} smaller than 32x32", self.height, self.width));
        }
        if !(self.boundary_amplitude_px > 0.0) {
            return bad("boundary_amplitude_px must be positive".into());
        }
        if !(self.drift_max_px >= 0.0) {
            return bad("drift_max_px must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.speckle_strength) {
            return bad("speckle_strength must lie in [0, 1]".into());
        }
        if self.min_layer_thickness_px < 1 {
            return bad("min_layer_thickness_px must be at least 1".into());
        }
        if self.drift_max_px >= self.min_layer_thickness_px as f64 {
            return bad(format!(
                "drift_max_px {} must be below min_layer_thickness_px {}",
                self.drift_max_px, self.min_layer_thickness_px
            ));
        }
        Ok(())
    }
}

/// Smooth scalar field `sum_m c_m sin(2 pi f_m x / W + phase_m + omega s)`.
#[derive(Clone, Debug)]
struct Undulation {
    coeffs: Vec<f64>,
    freqs: Vec<f64>,
    phases: Vec<f64>,
    omega: f64,
}

impl Undulation {
    fn random(amplitude: f64, rng: &mut ChaCha8Rng) -> Self {
        let split: f64 = rng.gen_range(0.55..0.85);
        Undulation {
            coeffs: vec![amplitude * split, amplitude * (1.0 - split)],
            freqs: vec![rng.gen_range(0.4..1.0), rng.gen_range(1.0..2.0)],
            phases: vec![
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            ],
            omega: 0.0,
        }
    }

    fn amplitude(&self) -> f64 {
        self.coeffs.iter().map(|c| c.abs()).sum()
    }

    /// Set the slice-axis angular speed so the per-slice change stays within
    /// `budget` (|sin(a + w) - sin(a)| <= w).
    fn with_budget(mut self, budget: f64, direction: f64) -> Self {
        let amp = self.amplitude();
        self.omega = if amp > 0.0 {
            direction * (budget / amp).min(0.5)
        } else {
            0.0
        };
        self
    }

    fn eval(&self, x: f64, width: f64, s: f64) -> f64 {
        self.coeffs
            .iter()
            .zip(&self.freqs)
            .zip(&self.phases)
            .map(|((c, f), p)| c * (std::f64::consts::TAU * f * x / width + p + self.omega * s).sin())
            .sum()
    }
}

/// Continuous boundary geometry of one phantom stack.
///
/// Boundary `j` is the top edge of label `j + 1`. The first boundary is an
/// offset field; every later one adds a strictly positive thickness field,
/// so boundaries never cross.
#[derive(Clone, Debug)]
pub struct LayerGeometry {
    height: usize,
    width: usize,
    top_base: f64,
    top: Undulation,
    thickness_base: [f64; NUM_LAYERS - 1],
    thickness: Vec<Undulation>,
}

/// Share of the drift budget spent on the common offset; the rest is split
/// over the five thickness fields.
const OFFSET_DRIFT_SHARE: f64 = 0.6;

impl LayerGeometry {
    fn random(config: &PhantomConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let h = config.height as f64;
        let min_t = config.min_layer_thickness_px as f64;
        let amp = config.boundary_amplitude_px;
        let jitter = |rng: &mut ChaCha8Rng| rng.gen_range(0.85..1.15);
        // dermis, superficial fat, SFM, deep fat, DFM
        let thickness_base = [
            (0.07 * h * jitter(rng)).max(min_t + 1.0),
            (0.15 * h * jitter(rng)).max(min_t + 1.0),
            min_t + 1.0,
            (0.15 * h * jitter(rng)).max(min_t + 1.0),
            min_t + 1.0,
        ];
        let top_base = (0.06 * h * jitter(rng)).max(amp + 1.0);
        let per_thickness = (1.0 - OFFSET_DRIFT_SHARE) / (NUM_LAYERS - 1) as f64;
        let drift = config.drift_max_px;
        let top = Undulation::random(amp, rng)
            .with_budget(drift * OFFSET_DRIFT_SHARE, if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
        let thickness = thickness_base
            .iter()
            .map(|&base| {
                let a = (0.5 * amp).min(base - min_t).max(0.0);
                Undulation::random(a, rng)
                    .with_budget(drift * per_thickness, if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
            })
            .collect::<Vec<_>>();
        let deepest = top_base
            + top.amplitude()
            + thickness_base
                .iter()
                .zip(&thickness)
                .map(|(b, u)| b + u.amplitude())
                .sum::<f64>();
        if deepest > h - min_t {
            return Err(Error::Config(format!(
                "layer stack reaches row {deepest:.1}; muscle needs {min_t} rows below it in a {h}-row image"
            )));
        }
        Ok(LayerGeometry {
            height: config.height,
            width: config.width,
            top_base,
            top,
            thickness_base,
            thickness,
        })
    }

    /// Real-valued boundary rows for one column of one slice.
    pub fn boundaries_at(&self, slice: usize, column: usize) -> [f64; NUM_LAYERS] {
        let (x, w, s) = (column as f64 + 0.5, self.width as f64, slice as f64);
        let mut b = [0.0; NUM_LAYERS];
        b[0] = self.top_base + self.top.eval(x, w, s);
        for j in 1..NUM_LAYERS {
            b[j] = b[j - 1] + self.thickness_base[j - 1] + self.thickness[j - 1].eval(x, w, s);
        }
        b
    }

    /// Integer boundary rows: label `j + 1` starts at row `round(b_j)`.
    pub fn raster_boundaries(&self, slice: usize, column: usize) -> [usize; NUM_LAYERS] {
        let b = self.boundaries_at(slice, column);
        let mut r = [0usize; NUM_LAYERS];
        for j in 0..NUM_LAYERS {
            r[j] = (b[j].round().max(0.0) as usize).min(self.height);
        }
        r
    }

    pub fn mask(&self, slice: usize) -> Vec<u8> {
        let (h, w) = (self.height, self.width);
        let mut mask = vec![0u8; h * w];
        for col in 0..w {
            let rb = self.raster_boundaries(slice, col);
            for row in 0..h {
                let label = rb.iter().filter(|&&b| b <= row).count();
                mask[row * w + col] = label as u8;
            }
        }
        mask
    }
}

/// Geometry shared by every slice of the stack for `(config, ids)`.
pub fn phantom_geometry(config: &PhantomConfig, patient_id: &str, scan_id: &str) -> Result<LayerGeometry> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(&[
        &config.seed.to_le_bytes(),
        patient_id.as_bytes(),
        b"/",
        scan_id.as_bytes(),
    ]));
    LayerGeometry::random(config, &mut rng)
}

/// Generate a deterministic synthetic stack.
pub fn generate_phantom_stack(config: &PhantomConfig, patient_id: &str, scan_id: &str) -> Result<SliceStack> {
    let geometry = phantom_geometry(config, patient_id, scan_id)?;
    let base_seed = stable_seed(&[
        &config.seed.to_le_bytes(),
        patient_id.as_bytes(),
        b"/",
        scan_id.as_bytes(),
        b"/intensity",
    ]);
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    // background, dermis, superficial fat, SFM, deep fat, DFM, muscle
    let nominal = [0.05, 0.72, 0.22, 0.88, 0.28, 0.85, 0.48];
    let levels: Vec<f64> = nominal
        .iter()
        .map(|&v: &f64| (v * rng.gen_range(0.9..1.1)).clamp(0.0, 1.0))
        .collect();
    let attenuation = rng.gen_range(0.15..0.3);
    let side = if rng.gen_bool(0.5) { Side::Left } else { Side::Right };
    let location = if rng.gen_bool(0.5) {
        Location::Multifidus
    } else {
        Location::ErectorSpinae
    };

    let (h, w) = (config.height, config.width);
    let mut pairs = Vec::with_capacity(config.num_slices);
    for s in 0..config.num_slices {
        let mask = geometry.mask(s);
        let mut noise = ChaCha8Rng::seed_from_u64(stable_seed(&[&base_seed.to_le_bytes(), &(s as u64).to_le_bytes()]));
        let image = mask
            .iter()
            .enumerate()
            .map(|(i, &label)| {
                let depth = (i / w) as f64 / h as f64;
                let base = levels[label as usize] * (1.0 - attenuation * depth);
                let u: f64 = noise.gen();
                let v = (base * (1.0 + config.speckle_strength * (2.0 * u - 1.0))).clamp(0.0, 1.0);
                quantize_intensity(v)
            })
            .collect();
        pairs.push(ImageMaskPair::new(h, w, image, mask, s)?);
    }
    Ok(SliceStack {
        pairs,
        patient_id: patient_id.to_string(),
        scan_id: scan_id.to_string(),
        side,
        location,
        pixel_spacing_mm: 0.2,
    })
}

/// Snap an intensity to the 8-bit grid used on disk.
pub fn quantize_intensity(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

/// How subset A is divided into train / validation / test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WithinA {
    Fractions {
        train: f64,
        val: f64,
        test: f64,
    },
    Explicit {
        train: Vec<String>,
        val: Vec<String>,
        test: Vec<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub subset_a: Vec<String>,
    pub subset_b: Vec<String>,
    pub within_a: WithinA,
}

/// Patient-level partition of a set of stacks.
#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<SliceStack>,
    pub val: Vec<SliceStack>,
    pub test: Vec<SliceStack>,
    pub subset_b: Vec<SliceStack>,
}

/// Patient ids of each partition; serialized alongside a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub subset_b: BTreeSet<String>,
}

impl SplitAssignment {
    fn partitions(&self) -> [(&'static str, &BTreeSet<String>); 4] {
        [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
            ("subset_b", &self.subset_b),
        ]
    }

    /// Fails if any patient sits in two partitions.
    pub fn check_leakage(&self) -> Result<()> {
        let parts = self.partitions();
        for i in 0..parts.len() {
            for j in i + 1..parts.len() {
                if let Some(p) = parts[i].1.intersection(parts[j].1).next() {
                    return Err(Error::Leakage(format!(
                        "patient {p} appears in both {} and {}",
                        parts[i].0, parts[j].0
                    )));
                }
            }
        }
        Ok(())
    }
}

impl DatasetSplit {
    pub fn assignment(&self) -> SplitAssignment {
        let ids = |v: &[SliceStack]| v.iter().map(|s| s.patient_id.clone()).collect();
        SplitAssignment {
            train: ids(&self.train),
            val: ids(&self.val),
            test: ids(&self.test),
            subset_b: ids(&self.subset_b),
        }
    }
}

/// Partition stacks by patient according to `spec`.
pub fn split_dataset(stacks: &[SliceStack], spec: &SplitSpec, seed: u64) -> Result<DatasetSplit> {
    let a: BTreeSet<&str> = spec.subset_a.iter().map(String::as_str).collect();
    let b: BTreeSet<&str> = spec.subset_b.iter().map(String::as_str).collect();
    if a.len() != spec.subset_a.len() || b.len() != spec.subset_b.len() {
        return Err(Error::Validation("duplicate patient id in split spec".into()));
    }
    if let Some(p) = a.intersection(&b).next() {
        return Err(Error::Validation(format!("patient {p} listed in both subsets")));
    }
    for s in stacks {
        if !a.contains(s.patient_id.as_str()) && !b.contains(s.patient_id.as_str()) {
            return Err(Error::Validation(format!(
                "patient {} is not assigned to any subset",
                s.patient_id
            )));
        }
    }

    let mut role: BTreeMap<String, usize> = BTreeMap::new();
    match &spec.within_a {
        WithinA::Explicit { train, val, test } => {
            for (k, list) in [train, val, test].into_iter().enumerate() {
                for p in list {
                    if !a.contains(p.as_str()) {
                        return Err(Error::Validation(format!("patient {p} is not in subset A")));
                    }
                    if role.insert(p.clone(), k).is_some() {
                        return Err(Error::Validation(format!(
                            "patient {p} assigned to more than one partition"
                        )));
                    }
                }
            }
            if let Some(p) = a.iter().find(|p| !role.contains_key(**p)) {
                return Err(Error::Validation(format!("subset A patient {p} has no partition")));
            }
        }
        WithinA::Fractions { train, val, test } => {
            let total = train + val + test;
            if !(total > 0.0) || *train < 0.0 || *val < 0.0 || *test < 0.0 {
                return Err(Error::Validation("split fractions must be non-negative".into()));
            }
            let mut ids: Vec<&str> = a.iter().copied().collect();
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n = ids.len();
            let n_val = ((val / total) * n as f64).round() as usize;
            let n_test = (((test / total) * n as f64).round() as usize).min(n - n_val.min(n));
            let n_val = n_val.min(n);
            let n_train = n - n_val - n_test;
            for (i, p) in ids.iter().enumerate() {
                let k = if i < n_train {
                    0
                } else if i < n_train + n_val {
                    1
                } else {
                    2
                };
                role.insert(p.to_string(), k);
            }
        }
    }

    let mut split = DatasetSplit::default();
    for s in stacks {
        if b.contains(s.patient_id.as_str()) {
            split.subset_b.push(s.clone());
            continue;
        }
        match role[&s.patient_id] {
            0 => split.train.push(s.clone()),
            1 => split.val.push(s.clone()),
            _ => split.test.push(s.clone()),
        }
    }
    split.assignment().check_leakage()?;
    Ok(split)
}

pub const FORMAT_VERSION: u32 = 1;

/// `manifest.json` of a stack directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackManifest {
    pub patient_id: String,
    pub scan_id: String,
    pub side: Side,
    pub location: Location,
    pub num_slices: usize,
    pub height: usize,
    pub width: usize,
    pub pixel_spacing_mm: f64,
    pub format_version: u32,
    /// Per-slice annotation flags; absent means every slice is annotated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotated: Option<Vec<bool>>,
}

pub fn image_file_name(i: usize) -> String {
    format!("image_{i:04}.png")
}

pub fn mask_file_name(i: usize) -> String {
    format!("mask_{i:04}.png")
}

/// Write a stack as PNG slices plus `manifest.json`.
pub fn persist_stack(stack: &SliceStack, dir: &Path) -> Result<()> {
    stack.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = stack.dims();
    for p in &stack.pairs {
        let pixels: Vec<u8> = p
            .image
            .iter()
            .map(|&v| (255.0 * v.clamp(0.0, 1.0) as f64).round() as u8)
            .collect();
        let path = dir.join(image_file_name(p.slice_index));
        image::GrayImage::from_raw(w as u32, h as u32, pixels)
            .expect("buffer size matches dims")
            .save(&path)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        let path = dir.join(mask_file_name(p.slice_index));
        image::GrayImage::from_raw(w as u32, h as u32, p.mask.clone())
            .expect("buffer size matches dims")
            .save(&path)
            .map_err(|e| Error::format(&path, e.to_string()))?;
    }
    let annotated = if stack.pairs.iter().all(|p| p.annotated) {
        None
    } else {
        Some(stack.pairs.iter().map(|p| p.annotated).collect())
    };
    let manifest = StackManifest {
        patient_id: stack.patient_id.clone(),
        scan_id: stack.scan_id.clone(),
        side: stack.side,
        location: stack.location,
        num_slices: stack.len(),
        height: h,
        width: w,
        pixel_spacing_mm: stack.pixel_spacing_mm,
        format_version: FORMAT_VERSION,
        annotated,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn read_gray(path: &Path, h: usize, w: usize) -> Result<Vec<u8>> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::format(
            path,
            format!("expected 8-bit grayscale, got {:?}", img.color()),
        ));
    }
    let img = img.into_luma8();
    if (img.height() as usize, img.width() as usize) != (h, w) {
        return Err(Error::format(
            path,
            format!("size {}x{} does not match manifest {h}x{w}", img.height(), img.width()),
        ));
    }
    Ok(img.into_raw())
}

/// Read a stack written by [`persist_stack`].
pub fn load_stack(dir: &Path) -> Result<SliceStack> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::format(&path, format!("missing manifest: {e}")))?;
    let m: StackManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported format_version {}", m.format_version),
        ));
    }
    if let Some(flags) = &m.annotated {
        if flags.len() != m.num_slices {
            return Err(Error::format(&path, "annotated flags do not match num_slices"));
        }
    }
    let mut pairs = Vec::with_capacity(m.num_slices);
    for i in 0..m.num_slices {
        let ipath = dir.join(image_file_name(i));
        let image = read_gray(&ipath, m.height, m.width)?
            .into_iter()
            .map(|v| (v as f64 / 255.0) as f32)
            .collect();
        let mpath = dir.join(mask_file_name(i));
        let mask = read_gray(&mpath, m.height, m.width)?;
        if let Some(bad) = mask.iter().find(|&&v| v as usize >= NUM_LABELS) {
            return Err(Error::format(&mpath, format!("label {bad} outside 0..=6")));
        }
        pairs.push(ImageMaskPair {
            height: m.height,
            width: m.width,
            image,
            mask,
            slice_index: i,
            annotated: m.annotated.as_ref().map(|f| f[i]).unwrap_or(true),
        });
    }
    Ok(SliceStack {
        pairs,
        patient_id: m.patient_id,
        scan_id: m.scan_id,
        side: m.side,
        location: m.location,
        pixel_spacing_mm: m.pixel_spacing_mm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomConfig {
        PhantomConfig {
            num_slices: 9,
            seed: 7,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn nine_slice_stack_partitions_grid_in_depth_order() {
        let stack = generate_phantom_stack(&small(), "p0", "s0").unwrap();
        assert_eq!(stack.len(), 9);
        stack.validate().unwrap();
        for p in &stack.pairs {
            assert_eq!(p.mask.len(), 64 * 64);
            for col in 0..64 {
                let column: Vec<u8> = (0..64).map(|r| p.mask[r * 64 + col]).collect();
                assert!(column.windows(2).all(|w| w[0] <= w[1]), "labels not in depth order");
                for label in 1..=6u8 {
                    let rows = column.iter().filter(|&&v| v == label).count();
                    assert!(rows >= 3, "label {label} has {rows} rows");
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_phantom_stack(&small(), "p0", "s0").unwrap();
        let b = generate_phantom_stack(&small(), "p0", "s0").unwrap();
        assert_eq!(a, b);
        let c = generate_phantom_stack(&small(), "p1", "s0").unwrap();
        assert_ne!(a.pairs[0].mask, c.pairs[0].mask);
    }

    #[test]
    fn zero_drift_freezes_masks() {
        let cfg = PhantomConfig {
            drift_max_px: 0.0,
            ..small()
        };
        let stack = generate_phantom_stack(&cfg, "p0", "s0").unwrap();
        for p in &stack.pairs[1..] {
            assert_eq!(p.mask, stack.pairs[0].mask);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            PhantomConfig {
                num_slices: 2,
                ..small()
            },
            PhantomConfig { height: 16, ..small() },
            PhantomConfig {
                drift_max_px: 3.0,
                ..small()
            },
            PhantomConfig {
                speckle_strength: 1.5,
                ..small()
            },
            PhantomConfig {
                boundary_amplitude_px: 40.0,
                ..small()
            },
        ] {
            assert!(matches!(generate_phantom_stack(&cfg, "p", "s"), Err(Error::Config(_))));
        }
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:02}")).collect()
    }

    fn stub_stack(patient: &str) -> SliceStack {
        SliceStack {
            pairs: vec![ImageMaskPair::new(1, 1, vec![0.0], vec![0], 0).unwrap()],
            patient_id: patient.into(),
            scan_id: "s".into(),
            side: Side::Left,
            location: Location::Multifidus,
            pixel_spacing_mm: 1.0,
        }
    }

    #[test]
    fn nineteen_ten_split() {
        let all = ids(29);
        let stacks: Vec<_> = all.iter().map(|p| stub_stack(p)).collect();
        let spec = SplitSpec {
            subset_a: all[..19].to_vec(),
            subset_b: all[19..].to_vec(),
            within_a: WithinA::Fractions {
                train: 16.0,
                val: 2.0,
                test: 1.0,
            },
        };
        let split = split_dataset(&stacks, &spec, 3).unwrap();
        let asg = split.assignment();
        assert_eq!(asg.train.len() + asg.val.len() + asg.test.len(), 19);
        assert_eq!(asg.subset_b.len(), 10);
        assert_eq!((asg.train.len(), asg.val.len(), asg.test.len()), (16, 2, 1));
        asg.check_leakage().unwrap();
    }

    #[test]
    fn degenerate_and_forced_splits() {
        let spec = SplitSpec {
            subset_a: vec!["solo".into()],
            subset_b: vec![],
            within_a: WithinA::Fractions {
                train: 1.0,
                val: 0.0,
                test: 0.0,
            },
        };
        let split = split_dataset(&[stub_stack("solo")], &spec, 0).unwrap();
        assert!(split.subset_b.is_empty());
        assert_eq!(split.train[0].patient_id, "solo");

        let spec = SplitSpec {
            subset_a: vec!["a".into()],
            subset_b: vec!["b".into()],
            within_a: WithinA::Explicit {
                train: vec!["a".into()],
                val: vec![],
                test: vec![],
            },
        };
        let split = split_dataset(&[stub_stack("a"), stub_stack("b")], &spec, 0).unwrap();
        assert_eq!(split.train[0].patient_id, "a");
        assert_eq!(split.subset_b[0].patient_id, "b");
    }

    #[test]
    fn patient_in_both_subsets_is_rejected() {
        let spec = SplitSpec {
            subset_a: vec!["a".into()],
            subset_b: vec!["a".into()],
            within_a: WithinA::Fractions {
                train: 1.0,
                val: 0.0,
                test: 0.0,
            },
        };
        assert!(matches!(
            split_dataset(&[stub_stack("a")], &spec, 0),
            Err(Error::Validation(_))
        ));
        let spec = SplitSpec {
            subset_a: vec!["a".into(), "b".into()],
            subset_b: vec![],
            within_a: WithinA::Explicit {
                train: vec!["a".into()],
                val: vec!["a".into(), "b".into()],
                test: vec![],
            },
        };
        assert!(split_dataset(&[stub_stack("a")], &spec, 0).is_err());
    }

    #[test]
    fn contaminated_assignment_fails_leakage_check() {
        let mut asg = SplitAssignment::default();
        asg.train.insert("x".into());
        asg.test.insert("x".into());
        assert!(matches!(asg.check_leakage(), Err(Error::Leakage(_))));
    }

    #[test]
    fn persist_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stack = generate_phantom_stack(&small(), "p0", "s0").unwrap();
        persist_stack(&stack, dir.path()).unwrap();
        let files = fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(files, 9 + 9 + 1);
        assert_eq!(load_stack(dir.path()).unwrap(), stack);
    }

    #[test]
    fn load_rejects_bad_label_and_missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_stack(dir.path()), Err(Error::Format { .. })));
        let stack = generate_phantom_stack(&small(), "p0", "s0").unwrap();
        persist_stack(&stack, dir.path()).unwrap();
        let bad = dir.path().join(mask_file_name(4));
        image::GrayImage::from_raw(64, 64, vec![7u8; 64 * 64])
            .unwrap()
            .save(&bad)
            .unwrap();
        match load_stack(dir.path()) {
            Err(Error::Format { path, .. }) => assert_eq!(path, bad),
            other => panic!("expected format error, got {other:?}"),
        }
        let small_img = dir.path().join(image_file_name(2));
        image::GrayImage::from_raw(32, 32, vec![0u8; 32 * 32])
            .unwrap()
            .save(&small_img)
            .unwrap();
        assert!(matches!(load_stack(dir.path()), Err(Error::Format { .. })));
    }
}

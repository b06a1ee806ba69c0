//! Synthetic two-modality patients, the fixed second-modality transform,
//! image augmentation, triplet batch assembly, fold splitting and dataset
//! files.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::binio::ByteReader;
use crate::error::{Error, Result};
use crate::linalg::{Mat, SeededRng};

/// Subtracted from every pixel when an image becomes an encoder input row.
pub const INPUT_CENTER: f64 = 0.5;

pub const DEFAULT_BATCH_PATIENTS: usize = 75;

/// Single-channel image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Image { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image { height, width, pixels: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }

    fn set(&mut self, r: usize, c: usize, v: f64) {
        self.pixels[r * self.width + c] = v;
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    fn clamp_unit(mut self) -> Self {
        self.pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    /// Encoder input row: centered pixels.
    pub fn to_input(&self) -> Vec<f64> {
        self.pixels.iter().map(|v| v - INPUT_CENTER).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientSample {
    pub patient_id: u64,
    /// Evaluation label; never read by self-supervised training.
    pub label: usize,
    pub fundus: Image,
    pub modality: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<PatientSample>,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<PatientSample>, height: usize, width: usize, n_classes: usize) -> Result<Self> {
        let d = Dataset { samples, height, width, n_classes };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.patient_id) {
                return Err(Error::format(format!("patient {}", s.patient_id), "duplicate patient id"));
            }
            if s.label >= self.n_classes {
                return Err(Error::format(
                    format!("patient {}", s.patient_id),
                    format!("label {} out of range for {} classes", s.label, self.n_classes),
                ));
            }
            for img in [&s.fundus, &s.modality] {
                if img.height != self.height || img.width != self.width {
                    return Err(Error::format(
                        format!("patient {}", s.patient_id),
                        format!("image is {}x{}, dataset is {}x{}", img.height, img.width, self.height, self.width),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.height * self.width
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.patient_id).collect()
    }

    /// Subset by sample position, order preserved.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            height: self.height,
            width: self.width,
            n_classes: self.n_classes,
        }
    }

    /// Centered fundus images, one row per sample.
    pub fn fundus_inputs(&self) -> Mat {
        let rows = self.samples.iter().map(|s| s.fundus.to_input());
        Mat::from_rows(self.input_dim(), rows).expect("validated dataset")
    }

    /// Centered second-modality images, one row per sample.
    pub fn modality_inputs(&self) -> Mat {
        let rows = self.samples.iter().map(|s| s.modality.to_input());
        Mat::from_rows(self.input_dim(), rows).expect("validated dataset")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub patients_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub class_pattern_seed: u64,
    /// Mean intensity of the class prototypes.
    pub background_level: f64,
    /// Root-mean-square amplitude of each class's smooth pattern around mid-gray.
    pub pattern_amplitude: f64,
    pub within_class_noise_sigma: f64,
    pub modality_noise_sigma: f64,
    /// Per-patient fundus acquisition differences: a horizontal flip with
    /// probability 1/2 and contrast/brightness factors drawn from this range.
    /// `None` disables them.
    pub acquisition_jitter: Option<[f64; 2]>,
    /// Largest end-to-end change of a per-patient linear illumination ramp
    /// added to the fundus image along each axis.
    pub illumination_gradient: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_classes: 4,
            patients_per_class: 50,
            height: 16,
            width: 16,
            class_pattern_seed: 1,
            background_level: 0.5,
            pattern_amplitude: 0.12,
            within_class_noise_sigma: 0.05,
            modality_noise_sigma: 0.02,
            acquisition_jitter: Some([0.5, 1.5]),
            illumination_gradient: 0.4,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.patients_per_class == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("synthetic counts and image sizes must be positive".into()));
        }
        for (name, s) in [
            ("within_class_noise_sigma", self.within_class_noise_sigma),
            ("modality_noise_sigma", self.modality_noise_sigma),
        ] {
            if !(0.0..0.5).contains(&s) {
                return Err(Error::Config(format!("{name} must be in [0, 0.5), got {s}")));
            }
        }
        if !(self.pattern_amplitude > 0.0 && self.pattern_amplitude.is_finite()) {
            return Err(Error::Config("pattern_amplitude must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.background_level) {
            return Err(Error::Config("background_level must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.illumination_gradient) {
            return Err(Error::Config("illumination_gradient must be in [0, 1]".into()));
        }
        if let Some([lo, hi]) = self.acquisition_jitter {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!("acquisition_jitter needs 0 < lo <= hi, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Knots per side of the coarse grid that smooth fields are interpolated from.
const FIELD_KNOTS: usize = 4;

/// Gaussian values on a coarse grid, bilinearly interpolated to `h × w` and
/// scaled to unit root-mean-square around zero mean.
fn smooth_field(h: usize, w: usize, rng: &mut SeededRng) -> Vec<f64> {
    let coarse: Vec<f64> = (0..FIELD_KNOTS * FIELD_KNOTS).map(|_| rng.normal()).collect();
    let coarse = Image::new(FIELD_KNOTS, FIELD_KNOTS, coarse).unwrap();
    let mut field = resize_bilinear(&coarse, 0, 0, FIELD_KNOTS, FIELD_KNOTS, h, w).pixels;
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    field.iter_mut().for_each(|v| *v -= mean);
    let rms = (field.iter().map(|v| v * v).sum::<f64>() / field.len() as f64).sqrt();
    if rms > 0.0 {
        field.iter_mut().for_each(|v| *v /= rms);
    }
    field
}

/// One mid-gray prototype per class with a seeded smooth pattern on top.
/// Patterns are Gram-Schmidt orthogonalized so every pair of classes is
/// equally dissimilar before noise.
pub fn class_prototypes(cfg: &SyntheticConfig) -> Vec<Image> {
    let mut rng = SeededRng::new(cfg.class_pattern_seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_classes);
    while basis.len() < cfg.n_classes {
        let mut field = smooth_field(cfg.height, cfg.width, &mut rng);
        for b in &basis {
            let proj = crate::linalg::dot(&field, b) / crate::linalg::dot(b, b);
            field.iter_mut().zip(b).for_each(|(f, bv)| *f -= proj * bv);
        }
        let rms = (field.iter().map(|v| v * v).sum::<f64>() / field.len() as f64).sqrt();
        // more classes than the smooth fields can span: keep the raw draw
        if rms < 1e-6 {
            basis.push(smooth_field(cfg.height, cfg.width, &mut rng));
            continue;
        }
        field.iter_mut().for_each(|v| *v /= rms);
        basis.push(field);
    }
    basis
        .iter()
        .map(|field| {
            let pixels = field.iter().map(|v| cfg.background_level + cfg.pattern_amplitude * v).collect();
            Image::new(cfg.height, cfg.width, pixels).unwrap().clamp_unit()
        })
        .collect()
}

/// Patients ordered class by class; ids run from 0.
pub fn generate_synthetic(cfg: &SyntheticConfig, rng: &mut SeededRng) -> Result<Dataset> {
    cfg.validate()?;
    let prototypes = class_prototypes(cfg);
    let mut samples = Vec::with_capacity(cfg.n_classes * cfg.patients_per_class);
    for (label, proto) in prototypes.iter().enumerate() {
        for _ in 0..cfg.patients_per_class {
            let clean = add_noise(proto, cfg.within_class_noise_sigma, rng);
            let modality = add_noise(&synthesize_modality(&clean), cfg.modality_noise_sigma, rng);
            let fundus = acquire(&clean, cfg, rng);
            samples.push(PatientSample { patient_id: samples.len() as u64, label, fundus, modality });
        }
    }
    Dataset::new(samples, cfg.height, cfg.width, cfg.n_classes)
}

/// Patient-level fundus acquisition effects; the second modality never sees them.
fn acquire(clean: &Image, cfg: &SyntheticConfig, rng: &mut SeededRng) -> Image {
    let mut out = match cfg.acquisition_jitter {
        Some([lo, hi]) => AugmentDraw {
            flip: rng.bernoulli(0.5),
            contrast: rng.uniform_range(lo, hi),
            brightness: rng.uniform_range(lo, hi),
            ..AugmentDraw::identity(cfg.height, cfg.width)
        }
        .apply(clean),
        None => clean.clone(),
    };
    let g = cfg.illumination_gradient;
    if g > 0.0 {
        let (gy, gx) = (rng.uniform_range(-g, g), rng.uniform_range(-g, g));
        let span = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 - 0.5 } else { 0.0 };
        for r in 0..out.height {
            for c in 0..out.width {
                let v = out.get(r, c) + gy * span(r, out.height) + gx * span(c, out.width);
                out.set(r, c, v);
            }
        }
    }
    out.clamp_unit()
}

fn add_noise(img: &Image, sigma: f64, rng: &mut SeededRng) -> Image {
    let mut out = img.clone();
    if sigma > 0.0 {
        out.pixels.iter_mut().for_each(|v| *v += sigma * rng.normal());
    }
    out.clamp_unit()
}

/// Normalized 3×3 binomial smoothing kernel.
pub const MODALITY_KERNEL: [[f64; 3]; 3] = [
    [1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0],
    [2.0 / 16.0, 4.0 / 16.0, 2.0 / 16.0],
    [1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0],
];

/// Fixed stand-in for the second imaging modality: smooth with
/// [`MODALITY_KERNEL`] (edge pixels replicated) and invert.
pub fn synthesize_modality(fundus: &Image) -> Image {
    let (h, w) = (fundus.height as isize, fundus.width as isize);
    let mut out = Image::filled(fundus.height, fundus.width, 0.0);
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (dr, krow) in (-1..=1).zip(MODALITY_KERNEL.iter()) {
                for (dc, &k) in (-1..=1).zip(krow.iter()) {
                    let rr = (r + dr).clamp(0, h - 1) as usize;
                    let cc = (c + dc).clamp(0, w - 1) as usize;
                    acc += k * fundus.get(rr, cc);
                }
            }
            out.set(r as usize, c as usize, 1.0 - acc);
        }
    }
    out.clamp_unit()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the image.
    pub crop_scale_range: [f64; 2],
    pub flip_prob: f64,
    /// Drawn for every image but has no effect on single-channel data.
    pub grayscale_prob: f64,
    /// Range for both the contrast and the brightness factor.
    pub jitter_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale_range: [0.2, 1.0],
            flip_prob: 0.5,
            grayscale_prob: 0.2,
            jitter_range: [0.6, 1.4],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop_scale_range must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]")));
        }
        let [jl, jh] = self.jitter_range;
        if !(0.0 <= jl && jl <= jh) {
            return Err(Error::Config(format!("jitter_range must be ordered and non-negative, got [{jl}, {jh}]")));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("grayscale_prob", self.grayscale_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Every random choice made by one augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub crop_scale: f64,
    pub crop_height: usize,
    pub crop_width: usize,
    pub top: usize,
    pub left: usize,
    pub flip: bool,
    pub grayscale: bool,
    pub contrast: f64,
    pub brightness: f64,
}

impl AugmentDraw {
    /// Draws in a fixed order: crop scale, crop position (row, column), flip,
    /// grayscale, contrast, brightness.
    pub fn sample(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut SeededRng) -> Self {
        let crop_scale = rng.uniform_range(cfg.crop_scale_range[0], cfg.crop_scale_range[1]);
        let side = crop_scale.sqrt();
        let crop_height = ((side * height as f64).floor() as usize).clamp(1, height);
        let crop_width = ((side * width as f64).floor() as usize).clamp(1, width);
        let top = rng.below(height - crop_height + 1);
        let left = rng.below(width - crop_width + 1);
        let flip = rng.bernoulli(cfg.flip_prob);
        let grayscale = rng.bernoulli(cfg.grayscale_prob);
        let contrast = rng.uniform_range(cfg.jitter_range[0], cfg.jitter_range[1]);
        let brightness = rng.uniform_range(cfg.jitter_range[0], cfg.jitter_range[1]);
        AugmentDraw { crop_scale, crop_height, crop_width, top, left, flip, grayscale, contrast, brightness }
    }

    /// The draw that leaves an image unchanged.
    pub fn identity(height: usize, width: usize) -> Self {
        AugmentDraw {
            crop_scale: 1.0,
            crop_height: height,
            crop_width: width,
            top: 0,
            left: 0,
            flip: false,
            grayscale: false,
            contrast: 1.0,
            brightness: 1.0,
        }
    }

    /// Crop and resize back, mirror, then `clamp(a·(x − μ) + b·μ)`.
    pub fn apply(&self, img: &Image) -> Image {
        let (h, w) = (img.height, img.width);
        let mut out = resize_bilinear(img, self.top, self.left, self.crop_height, self.crop_width, h, w);
        if self.flip {
            for r in 0..h {
                out.pixels[r * w..(r + 1) * w].reverse();
            }
        }
        // grayscale: single channel already
        let mean = out.mean();
        out.pixels
            .iter_mut()
            .for_each(|v| *v = self.contrast * (*v - mean) + self.brightness * mean);
        out.clamp_unit()
    }
}

pub fn augment(img: &Image, cfg: &AugmentConfig, rng: &mut SeededRng) -> Image {
    AugmentDraw::sample(cfg, img.height, img.width, rng).apply(img)
}

/// Bilinear resize of the window `[top, top+ch) × [left, left+cw)` to
/// `out_h × out_w`, sampling at pixel centers with edge clamping.
fn resize_bilinear(
    img: &Image,
    top: usize,
    left: usize,
    ch: usize,
    cw: usize,
    out_h: usize,
    out_w: usize,
) -> Image {
    let mut out = Image::filled(out_h, out_w, 0.0);
    let axis = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    for r in 0..out_h {
        let (r0, r1, fr) = axis(r, ch, out_h);
        for c in 0..out_w {
            let (c0, c1, fc) = axis(c, cw, out_w);
            let p = |rr: usize, cc: usize| img.get(top + rr, left + cc);
            let v = (1.0 - fr) * ((1.0 - fc) * p(r0, c0) + fc * p(r0, c1))
                + fr * ((1.0 - fc) * p(r1, c0) + fc * p(r1, c1));
            out.set(r, c, v);
        }
    }
    out
}

/// Encoder inputs for one triplet batch; row `i` of each matrix belongs to
/// dataset sample `patients[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletInputs {
    pub patients: Vec<usize>,
    pub fundus: Mat,
    pub transformed: Mat,
    pub modality: Mat,
}

/// Samples `n` distinct patients and augments each image of their triplet
/// independently: fundus, a second fundus view, then the second modality.
pub fn make_batch(dataset: &Dataset, n: usize, cfg: &AugmentConfig, rng: &mut SeededRng) -> Result<TripletInputs> {
    if n > dataset.len() || n == 0 {
        return Err(Error::InsufficientPatients { requested: n, available: dataset.len() });
    }
    let patients = rng.sample_indices(dataset.len(), n);
    let dim = dataset.input_dim();
    let mut fundus = Mat::zeros(n, dim);
    let mut transformed = Mat::zeros(n, dim);
    let mut modality = Mat::zeros(n, dim);
    for (row, &p) in patients.iter().enumerate() {
        let s = &dataset.samples[p];
        fundus.row_mut(row).copy_from_slice(&augment(&s.fundus, cfg, rng).to_input());
        transformed.row_mut(row).copy_from_slice(&augment(&s.fundus, cfg, rng).to_input());
        modality.row_mut(row).copy_from_slice(&augment(&s.modality, cfg, rng).to_input());
    }
    Ok(TripletInputs { patients, fundus, transformed, modality })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldSplit {
    pub k: usize,
    pub assignments: BTreeMap<u64, usize>,
}

impl FoldSplit {
    /// Ids assigned to fold `f`, ascending.
    pub fn members(&self, f: usize) -> Vec<u64> {
        self.assignments.iter().filter(|&(_, &a)| a == f).map(|(&id, _)| id).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in self.assignments.values() {
            s[f] += 1;
        }
        s
    }
}

/// Seeded shuffle, then round-robin assignment to `k` folds.
pub fn make_folds(patient_ids: &[u64], k: usize, rng: &mut SeededRng) -> Result<FoldSplit> {
    if k < 2 || k > patient_ids.len() {
        return Err(Error::InvalidK { k, n: patient_ids.len() });
    }
    let mut ids = patient_ids.to_vec();
    rng.shuffle(&mut ids);
    let assignments = ids.into_iter().enumerate().map(|(pos, id)| (id, pos % k)).collect();
    Ok(FoldSplit { k, assignments })
}

/// Class-stratified variant of [`make_folds`]: ids are shuffled within each
/// class, classes are concatenated in label order, and the round-robin runs
/// over the concatenation, so every fold receives each class as evenly as
/// possible while overall fold sizes still differ by at most one.
pub fn make_stratified_folds(patient_ids: &[u64], labels: &[usize], k: usize, rng: &mut SeededRng) -> Result<FoldSplit> {
    if patient_ids.len() != labels.len() {
        return Err(Error::LengthMismatch { left: patient_ids.len(), right: labels.len() });
    }
    if k < 2 || k > patient_ids.len() {
        return Err(Error::InvalidK { k, n: patient_ids.len() });
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut order = Vec::with_capacity(patient_ids.len());
    for c in 0..n_classes {
        let mut members: Vec<u64> = patient_ids.iter().zip(labels).filter(|(_, &l)| l == c).map(|(&id, _)| id).collect();
        rng.shuffle(&mut members);
        order.extend(members);
    }
    let assignments = order.into_iter().enumerate().map(|(pos, id)| (id, pos % k)).collect();
    Ok(FoldSplit { k, assignments })
}

const TEXT_MAGIC: &str = "SSLDS";
const TEXT_VERSION: &str = "v1";
const BINARY_MAGIC: &[u8; 8] = b"SSLDSB01";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Text,
    Binary,
}

pub fn dataset_to_text(d: &Dataset) -> String {
    let mut out = String::new();
    writeln!(out, "{TEXT_MAGIC} {TEXT_VERSION} {} {} {} {}", d.height, d.width, d.n_classes, d.len()).unwrap();
    for s in &d.samples {
        writeln!(out, "P {} {}", s.patient_id, s.label).unwrap();
        for (tag, img) in [("F", &s.fundus), ("M", &s.modality)] {
            out.push_str(tag);
            for v in &img.pixels {
                write!(out, " {v:.16e}").unwrap();
            }
            out.push('\n');
        }
    }
    out
}

pub fn dataset_from_text(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (ln, header) = lines.next().ok_or_else(|| Error::format("line 1", "empty file"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 6 || fields[0] != TEXT_MAGIC || fields[1] != TEXT_VERSION {
        return Err(Error::format(
            format!("line {ln}"),
            format!("expected `{TEXT_MAGIC} {TEXT_VERSION} <H> <W> <n_classes> <n_samples>`"),
        ));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::format(format!("line {ln}"), format!("bad {what} `{s}`")))
    };
    let height = num(fields[2], "height")?;
    let width = num(fields[3], "width")?;
    let n_classes = num(fields[4], "class count")?;
    let n_samples = num(fields[5], "sample count")?;

    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let (ln, p) = lines
            .next()
            .ok_or_else(|| Error::format("end of file", format!("expected {n_samples} samples, found {}", samples.len())))?;
        let pf: Vec<&str> = p.split_whitespace().collect();
        if pf.len() != 3 || pf[0] != "P" {
            return Err(Error::format(format!("line {ln}"), "expected `P <patient_id> <label>`"));
        }
        let patient_id = pf[1]
            .parse()
            .map_err(|_| Error::format(format!("line {ln}"), format!("bad patient id `{}`", pf[1])))?;
        let label = pf[2]
            .parse()
            .map_err(|_| Error::format(format!("line {ln}"), format!("bad label `{}`", pf[2])))?;
        let mut read_image = |tag: &str| -> Result<Image> {
            let (ln, l) = lines
                .next()
                .ok_or_else(|| Error::format("end of file", format!("missing `{tag}` line")))?;
            let mut parts = l.split_whitespace();
            if parts.next() != Some(tag) {
                return Err(Error::format(format!("line {ln}"), format!("expected `{tag}` pixel line")));
            }
            let pixels = parts
                .enumerate()
                .map(|(col, v)| {
                    v.parse::<f64>()
                        .map_err(|_| Error::format(format!("line {ln}, value {}", col + 1), format!("bad number `{v}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            if pixels.len() != height * width {
                return Err(Error::format(
                    format!("line {ln}"),
                    format!("expected {} pixels, found {}", height * width, pixels.len()),
                ));
            }
            Image::new(height, width, pixels)
        };
        let fundus = read_image("F")?;
        let modality = read_image("M")?;
        samples.push(PatientSample { patient_id, label, fundus, modality });
    }
    if let Some((ln, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(Error::format(format!("line {ln}"), format!("unexpected trailing content `{extra}`")));
    }
    Dataset::new(samples, height, width, n_classes)
}

pub fn dataset_to_binary(d: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(BINARY_MAGIC);
    for v in [d.height, d.width, d.n_classes] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(d.len() as u64).to_le_bytes());
    for s in &d.samples {
        buf.extend_from_slice(&s.patient_id.to_le_bytes());
        buf.extend_from_slice(&(s.label as u32).to_le_bytes());
        for v in s.fundus.pixels.iter().chain(&s.modality.pixels) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn dataset_from_binary(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    if r.take(8)? != BINARY_MAGIC {
        return Err(Error::format("offset 0", "not a binary dataset (bad magic)"));
    }
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let n_classes = r.u32()? as usize;
    let n = r.u64()? as usize;
    let px = height * width;
    let mut samples = Vec::new();
    for _ in 0..n {
        let at = r.pos();
        let patient_id = r.u64()?;
        let label = r.u32()? as usize;
        let fundus = Image::new(height, width, r.f64s(px)?)?;
        let modality = Image::new(height, width, r.f64s(px)?)?;
        if label >= n_classes {
            return Err(Error::format(format!("offset {at}"), format!("label {label} out of range")));
        }
        samples.push(PatientSample { patient_id, label, fundus, modality });
    }
    r.finish()?;
    Dataset::new(samples, height, width, n_classes)
}

pub fn save_dataset(d: &Dataset, path: &Path, format: DatasetFormat) -> Result<()> {
    let bytes = match format {
        DatasetFormat::Text => dataset_to_text(d).into_bytes(),
        DatasetFormat::Binary => dataset_to_binary(d),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads either format, chosen by the leading magic bytes.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(BINARY_MAGIC) {
        return dataset_from_binary(&bytes);
    }
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::format(format!("byte {}", e.valid_up_to()), "not UTF-8 text"))?;
    dataset_from_text(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, px: &[f64]) -> Image {
        Image::new(h, w, px.to_vec()).unwrap()
    }

    #[test]
    fn synthetic_bookkeeping() {
        let d = generate_synthetic(&SyntheticConfig::default(), &mut SeededRng::new(1)).unwrap();
        assert_eq!(d.len(), 200);
        for c in 0..4 {
            assert_eq!(d.labels().iter().filter(|&&l| l == c).count(), 50);
        }
        let ids: HashSet<u64> = d.ids().into_iter().collect();
        assert_eq!(ids.len(), 200);
        assert!(d.samples.iter().all(|s| s.fundus.pixels.iter().chain(&s.modality.pixels).all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn zero_noise_gives_identical_class_members() {
        let cfg = SyntheticConfig {
            within_class_noise_sigma: 0.0,
            patients_per_class: 5,
            acquisition_jitter: None,
            illumination_gradient: 0.0,
            ..SyntheticConfig::default()
        };
        let d = generate_synthetic(&cfg, &mut SeededRng::new(2)).unwrap();
        for s in &d.samples {
            let first = d.samples.iter().find(|t| t.label == s.label).unwrap();
            assert_eq!(s.fundus, first.fundus);
        }
    }

    #[test]
    fn acquisition_effects_reach_only_the_fundus_image() {
        let cfg = SyntheticConfig {
            within_class_noise_sigma: 0.0,
            modality_noise_sigma: 0.0,
            patients_per_class: 6,
            ..SyntheticConfig::default()
        };
        let d = generate_synthetic(&cfg, &mut SeededRng::new(2)).unwrap();
        let protos = class_prototypes(&cfg);
        for s in &d.samples {
            assert_eq!(s.modality, synthesize_modality(&protos[s.label]));
        }
        let class0: Vec<&PatientSample> = d.samples.iter().filter(|s| s.label == 0).collect();
        assert!(class0.windows(2).any(|w| w[0].fundus != w[1].fundus));
    }

    #[test]
    fn within_class_closer_than_between_class() {
        let d = generate_synthetic(&SyntheticConfig::default(), &mut SeededRng::new(3)).unwrap();
        let dist = |a: &Image, b: &Image| -> f64 {
            a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..d.len() {
            for j in i + 1..d.len() {
                let v = dist(&d.samples[i].fundus, &d.samples[j].fundus);
                if d.samples[i].label == d.samples[j].label {
                    within += v;
                    nw += 1;
                } else {
                    between += v;
                    nb += 1;
                }
            }
        }
        assert!(within / (nw as f64) < between / (nb as f64));
    }

    #[test]
    fn modality_of_constant_images() {
        let z = Image::filled(5, 4, 0.0);
        assert!(synthesize_modality(&z).pixels.iter().all(|&v| v == 1.0));
        let o = Image::filled(5, 4, 1.0);
        assert!(synthesize_modality(&o).pixels.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn modality_matches_unrolled_convolution() {
        #[rustfmt::skip]
        let px = [
            0.1, 0.2, 0.3, 0.4,
            0.5, 0.6, 0.7, 0.8,
            0.9, 1.0, 0.0, 0.1,
            0.2, 0.3, 0.4, 0.5,
        ];
        let im = img(4, 4, &px);
        let out = synthesize_modality(&im);
        // replicate-padded 6x6 copy, then the 1-2-1 binomial stencil by hand
        let at = |r: i32, c: i32| px[(r.clamp(0, 3) * 4 + c.clamp(0, 3)) as usize];
        for r in 0..4i32 {
            for c in 0..4i32 {
                let s = (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1)
                    + 2.0 * at(r, c - 1) + 4.0 * at(r, c) + 2.0 * at(r, c + 1)
                    + at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                    / 16.0;
                let expected = (1.0 - s).clamp(0.0, 1.0);
                assert!((out.get(r as usize, c as usize) - expected).abs() < 1e-15);
            }
        }
        // corner (0,0): 4·0.1 + 2·0.2 + 2·0.1 + 2·0.5 + 1·0.6 + ... written out
        let corner = (0.1 + 2.0 * 0.1 + 0.2 + 2.0 * 0.1 + 4.0 * 0.1 + 2.0 * 0.2 + 0.5 + 2.0 * 0.5 + 0.6) / 16.0;
        assert!((out.get(0, 0) - (1.0 - corner)).abs() < 1e-15);
    }

    #[test]
    fn identity_draw_is_identity() {
        let d = generate_synthetic(&SyntheticConfig { patients_per_class: 1, ..SyntheticConfig::default() }, &mut SeededRng::new(4)).unwrap();
        let im = &d.samples[0].fundus;
        let out = AugmentDraw::identity(16, 16).apply(im);
        for (a, b) in out.pixels.iter().zip(&im.pixels) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn flip_mirrors_rows() {
        let im = img(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        // zero mean would make jitter a no-op anyway, but keep factors at 1
        let draw = AugmentDraw { flip: true, ..AugmentDraw::identity(2, 2) };
        assert_eq!(draw.apply(&im).pixels, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn augmentation_replays_from_the_rng_stream() {
        let d = generate_synthetic(&SyntheticConfig { patients_per_class: 1, ..SyntheticConfig::default() }, &mut SeededRng::new(5)).unwrap();
        let im = &d.samples[0].fundus;
        let cfg = AugmentConfig::default();
        let mut rng = SeededRng::new(6);
        let mut replay = SeededRng::new(6);
        let min_side = (0.2f64.sqrt() * 16.0).floor() as usize;
        for _ in 0..1000 {
            let out = augment(im, &cfg, &mut rng);
            assert_eq!((out.height, out.width), (16, 16));
            assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            // independent replay of the draw order
            let u = replay.uniform_range(0.2, 1.0);
            let side = (u.sqrt() * 16.0).floor() as usize;
            let _top = replay.below(16 - side + 1);
            let _left = replay.below(16 - side + 1);
            let _flip = replay.bernoulli(0.5);
            let _gray = replay.bernoulli(0.2);
            let _a = replay.uniform_range(0.6, 1.4);
            let _b = replay.uniform_range(0.6, 1.4);
            assert!((min_side..=16).contains(&side));
        }
        // both streams consumed the same number of draws
        assert_eq!(rng.uniform().to_bits(), replay.uniform().to_bits());
    }

    #[test]
    fn batches_are_distinct_and_deterministic() {
        let d = generate_synthetic(&SyntheticConfig::default(), &mut SeededRng::new(7)).unwrap();
        let cfg = AugmentConfig::default();
        let a = make_batch(&d, DEFAULT_BATCH_PATIENTS, &cfg, &mut SeededRng::new(8)).unwrap();
        let b = make_batch(&d, DEFAULT_BATCH_PATIENTS, &cfg, &mut SeededRng::new(8)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fundus.rows(), 75);
        assert_eq!(a.transformed.rows(), 75);
        assert_eq!(a.modality.rows(), 75);
        let uniq: HashSet<usize> = a.patients.iter().copied().collect();
        assert_eq!(uniq.len(), 75);
        assert_ne!(a.fundus, a.transformed);

        let all = make_batch(&d, 200, &cfg, &mut SeededRng::new(9)).unwrap();
        let mut p = all.patients.clone();
        p.sort();
        assert_eq!(p, (0..200).collect::<Vec<_>>());
        assert!(matches!(make_batch(&d, 201, &cfg, &mut SeededRng::new(9)), Err(Error::InsufficientPatients { .. })));
    }

    #[test]
    fn fold_sizes_and_partition() {
        let ids: Vec<u64> = (0..10).collect();
        let f = make_folds(&ids, 5, &mut SeededRng::new(1)).unwrap();
        assert_eq!(f.sizes(), vec![2; 5]);
        let ids: Vec<u64> = (100..111).collect();
        let f = make_folds(&ids, 5, &mut SeededRng::new(1)).unwrap();
        let mut sizes = f.sizes();
        sizes.sort();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
        let mut union: Vec<u64> = (0..5).flat_map(|k| f.members(k)).collect();
        union.sort();
        assert_eq!(union, ids);
        assert_eq!(f, make_folds(&ids, 5, &mut SeededRng::new(1)).unwrap());
        assert!(matches!(make_folds(&ids, 1, &mut SeededRng::new(1)), Err(Error::InvalidK { .. })));
        assert!(matches!(make_folds(&ids, 12, &mut SeededRng::new(1)), Err(Error::InvalidK { .. })));
    }

    #[test]
    fn text_round_trip_and_empty() {
        let empty = Dataset::new(vec![], 2, 2, 3).unwrap();
        let t = dataset_to_text(&empty);
        assert_eq!(t, "SSLDS v1 2 2 3 0\n");
        assert_eq!(dataset_from_text(&t).unwrap(), empty);

        let d = generate_synthetic(&SyntheticConfig { patients_per_class: 3, ..SyntheticConfig::default() }, &mut SeededRng::new(2)).unwrap();
        assert_eq!(dataset_from_text(&dataset_to_text(&d)).unwrap(), d);
        assert_eq!(dataset_from_binary(&dataset_to_binary(&d)).unwrap(), d);
    }

    #[test]
    fn hand_written_fixture_parses() {
        let text = "SSLDS v1 1 2 2 2\n\
                    P 7 1\nF 0.25 0.5\nM 1 0\n\
                    P 3 0\nF 0 1e-1\nM 0.75 0.125\n";
        let d = dataset_from_text(text).unwrap();
        assert_eq!(d.ids(), vec![7, 3]);
        assert_eq!(d.labels(), vec![1, 0]);
        assert_eq!(d.samples[0].fundus.pixels, vec![0.25, 0.5]);
        assert_eq!(d.samples[1].fundus.pixels, vec![0.0, 0.1]);
        assert_eq!(d.samples[1].modality.pixels, vec![0.75, 0.125]);
    }

    #[test]
    fn format_errors_carry_locations() {
        let bad = "SSLDS v1 1 2 2 1\nP 7 1\nF 0.25 x\nM 1 0\n";
        match dataset_from_text(bad) {
            Err(Error::Format { location, .. }) => assert_eq!(location, "line 3, value 2"),
            other => panic!("unexpected {other:?}"),
        }
        let short = "SSLDS v1 1 2 2 1\nP 7 1\nF 0.25\nM 1 0\n";
        assert!(matches!(dataset_from_text(short), Err(Error::Format { .. })));
        let bad_label = "SSLDS v1 1 1 2 1\nP 7 5\nF 0.25\nM 1\n";
        assert!(dataset_from_text(bad_label).is_err());
        assert!(matches!(dataset_from_text("nonsense"), Err(Error::Format { .. })));
        assert!(dataset_from_binary(b"SSLDSB01\x01").is_err());
    }
}

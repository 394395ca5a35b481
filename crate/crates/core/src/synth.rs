//! Synthetic 9-band plate images with exact ground truth.
//!
//! A plate is a matte black background carrying a few thalli (smooth
//! closed blobs with the `Normal` signature). Chlorosis and pigment
//! lesions are blobs placed strictly inside a thallus; tipburn lesions are
//! crescents that start at the thallus margin. The mask returned with each
//! plate is `build_semantic_mask` of the returned annotations, so image,
//! mask and polygons always agree.
//!
//! Healthy tissue carries a smooth "pallor" field that shifts its visible
//! reflectance in the same direction as chlorosis while leaving the
//! near-infrared untouched. In the RGB projection a chlorotic patch is
//! therefore hard to tell from pale healthy tissue; with the NIR bands it
//! is not.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotation::{
    build_semantic_mask, class_statistics, class_statistics_csv, rasterize_polygon,
    AnnotationSet, PolygonAnnotation,
};
use crate::error::{Error, Result};
use crate::raster_io::{save_image, write_mask_tiff, SampleFormat};
use crate::spectral::{
    BandManifest, ClassLabel, MultiSpectralImage, Raster, SemanticMask, BACKGROUND,
};

/// Default ratio of the chlorosis RGB gap to its NIR gap.
pub const DEFAULT_CHLOROSIS_RGB_CONTRAST: f32 = 0.4;

/// Reflectance drop of chlorotic tissue at 780/840 nm.
const CHLOROSIS_NIR_GAP: f32 = 0.12;

/// Day at which a plate spec's counts and sizes apply unscaled.
pub const REFERENCE_DAY: u32 = 21;

const BACKGROUND_REFLECTANCE: f32 = 0.03;
const BACKGROUND_NOISE_SD: f32 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSignature {
    pub class: ClassLabel,
    pub mean_reflectance: Vec<f32>,
    pub noise_sd: Vec<f32>,
}

pub type Signatures = BTreeMap<ClassLabel, SpectralSignature>;

/// Signatures for the canonical manifest at the default RGB contrast.
pub fn default_signatures(manifest: &BandManifest) -> Result<Signatures> {
    signatures_with_contrast(manifest, DEFAULT_CHLOROSIS_RGB_CONTRAST)
}

/// `chlorosis_rgb_contrast` is the mean chlorosis-vs-normal gap over the
/// 470/530/620 nm bands divided by the gap at 840 nm.
pub fn signatures_with_contrast(
    manifest: &BandManifest,
    chlorosis_rgb_contrast: f32,
) -> Result<Signatures> {
    if !manifest.is_canonical() {
        return Err(Error::Manifest(
            "built-in signatures are defined for the canonical 9-band manifest only".into(),
        ));
    }
    if !(0.0..=1.0).contains(&chlorosis_rgb_contrast) {
        return Err(Error::InvalidArgument(format!(
            "chlorosis_rgb_contrast {chlorosis_rgb_contrast} not in [0, 1]"
        )));
    }
    //                     470   530   570   620   660   700   740   780   840
    let normal = [0.06, 0.20, 0.15, 0.09, 0.08, 0.22, 0.46, 0.56, 0.58];
    let pigment = [0.08, 0.09, 0.08, 0.14, 0.12, 0.20, 0.42, 0.52, 0.54];
    let tipburn = [0.03, 0.035, 0.035, 0.035, 0.035, 0.04, 0.06, 0.07, 0.07];
    let sd = [0.02, 0.02, 0.02, 0.02, 0.02, 0.02, 0.015, 0.015, 0.015];

    let visible = chlorosis_visible_shift(chlorosis_rgb_contrast);
    let nir_drop = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.7, 1.0, 1.0];
    let chlorosis: Vec<f32> = (0..9)
        .map(|b| normal[b] + visible[b] - nir_drop[b] * CHLOROSIS_NIR_GAP)
        .collect();

    let make = |class, mean: &[f32]| SpectralSignature {
        class,
        mean_reflectance: mean.to_vec(),
        noise_sd: sd.to_vec(),
    };
    Ok([
        make(ClassLabel::Normal, &normal),
        make(ClassLabel::Chlorosis, &chlorosis),
        make(ClassLabel::PigmentAccumulation, &pigment),
        make(ClassLabel::Tipburn, &tipburn),
    ]
    .into_iter()
    .map(|s| (s.class, s))
    .collect())
}

/// Visible-band brightening of chlorotic tissue; its mean over the RGB
/// bands is `contrast * CHLOROSIS_NIR_GAP`.
fn chlorosis_visible_shift(contrast: f32) -> [f32; 9] {
    // relative shape; 470/530/620 entries average to 1
    let shape = [0.5, 1.0, 1.4, 1.5, 1.0, 0.5, 0.0, 0.0, 0.0];
    shape.map(|s| s * contrast * CHLOROSIS_NIR_GAP)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub class: ClassLabel,
    /// Inclusive count range at [`REFERENCE_DAY`].
    pub count: (usize, usize),
    /// Blob area range in pixels at [`REFERENCE_DAY`].
    pub blob_area: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateSpec {
    /// Frame height and width in pixels.
    pub size: usize,
    pub n_thalli: usize,
    pub thallus_radius: (f64, f64),
    pub defects: Vec<DefectSpec>,
    pub day: u32,
    pub rng_seed: u64,
    /// Strength of the visible-band pallor of healthy tissue, as a
    /// multiple of the chlorosis visible shift.
    pub normal_pallor: f32,
}

impl PlateSpec {
    /// A plate layout scaled to a square frame of `size` pixels.
    pub fn default_for(size: usize) -> Self {
        let s = size as f64;
        let area = |lo: f64, hi: f64| (lo * s * s, hi * s * s);
        PlateSpec {
            size,
            n_thalli: 3,
            thallus_radius: (0.13 * s, 0.17 * s),
            defects: vec![
                DefectSpec {
                    class: ClassLabel::Chlorosis,
                    count: (1, 3),
                    blob_area: area(0.006, 0.014),
                },
                DefectSpec {
                    class: ClassLabel::PigmentAccumulation,
                    count: (1, 2),
                    blob_area: area(0.004, 0.010),
                },
                DefectSpec {
                    class: ClassLabel::Tipburn,
                    count: (1, 2),
                    blob_area: area(0.003, 0.008),
                },
            ],
            day: REFERENCE_DAY,
            rng_seed: 0,
            normal_pallor: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleSpec(m));
        if self.size < 8 {
            return bad(format!("frame size {} too small", self.size));
        }
        let (rlo, rhi) = self.thallus_radius;
        if !(rlo > 0.0 && rhi >= rlo) {
            return bad(format!("thallus radius range {rlo}..{rhi}"));
        }
        if self.n_thalli > 0 && 2.0 * rhi * 1.15 + 2.0 >= self.size as f64 {
            return bad(format!(
                "thallus radius {rhi} does not fit a {} px frame",
                self.size
            ));
        }
        for d in &self.defects {
            if d.class == ClassLabel::Normal {
                return bad("defect list may not contain Normal".into());
            }
            if d.count.0 > d.count.1 || !(d.blob_area.0 > 0.0 && d.blob_area.1 >= d.blob_area.0) {
                return bad(format!("bad ranges for {}", d.class));
            }
            if d.count.1 > 0 && self.n_thalli == 0 {
                return bad(format!("{} lesions need at least one thallus", d.class));
            }
        }
        Ok(())
    }

    fn day_factor(&self) -> f64 {
        (self.day as f64 / REFERENCE_DAY as f64).clamp(0.0, 2.0)
    }
}

/// Star-shaped closed curve `r(θ) = r0 (1 + Σ a_k cos(kθ + φ_k))`.
#[derive(Debug, Clone)]
struct Blob {
    cx: f64,
    cy: f64,
    r0: f64,
    harmonics: Vec<(usize, f64, f64)>,
}

impl Blob {
    fn random(rng: &mut impl Rng, cx: f64, cy: f64, area: f64, amp: f64) -> Self {
        let harmonics: Vec<(usize, f64, f64)> = (2..=3)
            .map(|k| (k, rng.random_range(-amp..=amp), rng.random_range(0.0..TAU)))
            .collect();
        let boost: f64 = 1.0 + harmonics.iter().map(|h| h.1 * h.1 / 2.0).sum::<f64>();
        let r0 = (area / std::f64::consts::PI / boost).sqrt();
        Blob {
            cx,
            cy,
            r0,
            harmonics,
        }
    }

    fn radius_at(&self, theta: f64) -> f64 {
        self.r0
            * (1.0
                + self
                    .harmonics
                    .iter()
                    .map(|&(k, a, phi)| a * (k as f64 * theta + phi).cos())
                    .sum::<f64>())
    }

    fn bound(&self) -> (f64, f64) {
        let amp: f64 = self.harmonics.iter().map(|h| h.1.abs()).sum();
        (self.r0 * (1.0 - amp), self.r0 * (1.0 + amp))
    }

    fn vertex_angle(i: usize, n: usize) -> f64 {
        TAU * i as f64 / n as f64
    }

    fn polygon(&self, n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| {
                let t = Self::vertex_angle(i, n);
                let r = self.radius_at(t);
                (self.cx + r * t.cos(), self.cy + r * t.sin())
            })
            .collect()
    }
}

const THALLUS_VERTICES: usize = 96;
const LESION_VERTICES: usize = 40;
const PLACEMENT_TRIES: usize = 400;
/// Whole-layout restarts before a spec is declared infeasible.
const LAYOUT_ATTEMPTS: usize = 20;

/// One generated plate.
#[derive(Debug, Clone)]
pub struct Plate {
    pub image: MultiSpectralImage,
    pub mask: SemanticMask,
    pub annotations: AnnotationSet,
}

fn count_in(mask: &[bool]) -> usize {
    mask.iter().filter(|&&b| b).count()
}

/// Marks every pixel within one step (8-neighborhood) of `src`.
fn dilate(src: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = src.to_vec();
    for y in 0..h {
        for x in 0..w {
            if !src[y * w + x] {
                continue;
            }
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    out[ny * w + nx] = true;
                }
            }
        }
    }
    out
}

/// Generates one plate. Deterministic in `spec.rng_seed`.
pub fn gen_plate(spec: &PlateSpec, signatures: &Signatures, sample_id: &str) -> Result<Plate> {
    spec.validate()?;
    for class in ClassLabel::ALL {
        let sig = signatures
            .get(&class)
            .ok_or_else(|| Error::InvalidArgument(format!("no signature for {class}")))?;
        if sig.mean_reflectance.len() != 9 || sig.noise_sd.len() != 9 {
            return Err(Error::InvalidArgument(format!(
                "{class} signature must have 9 bands"
            )));
        }
    }
    let size = spec.size;
    let (h, w) = (size, size);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut attempt = 0;
    let (ann, thalli) = loop {
        match layout(spec, &mut rng, sample_id) {
            Ok(v) => break v,
            Err(Error::InfeasibleSpec(msg)) if attempt + 1 < LAYOUT_ATTEMPTS => {
                log::debug!("{sample_id}: layout attempt {attempt} failed: {msg}");
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    };

    let mask = build_semantic_mask(&ann);
    let pallor = pallor_field(&mut rng, &thalli, h, w);
    let pixels = render(&mut rng, &mask, &pallor, signatures, spec.normal_pallor)?;
    let mut image = MultiSpectralImage::new(pixels, BandManifest::canonical(), sample_id);
    image.day = Some(spec.day);
    Ok(Plate {
        image,
        mask,
        annotations: ann,
    })
}

/// Places thalli then lesions; fails when something does not fit.
fn layout(
    spec: &PlateSpec,
    rng: &mut ChaCha8Rng,
    sample_id: &str,
) -> Result<(AnnotationSet, Vec<(Blob, Vec<bool>)>)> {
    let size = spec.size;
    let (h, w) = (size, size);
    let mut ann = AnnotationSet::new(sample_id, h, w);

    // thalli
    let mut thalli: Vec<(Blob, Vec<bool>)> = Vec::new();
    for _ in 0..spec.n_thalli {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let r = rng.random_range(spec.thallus_radius.0..=spec.thallus_radius.1);
            let area = std::f64::consts::PI * r * r;
            let margin = r * 1.15 + 1.0;
            if 2.0 * margin >= size as f64 {
                continue;
            }
            let cx = rng.random_range(margin..size as f64 - margin);
            let cy = rng.random_range(margin..size as f64 - margin);
            let blob = Blob::random(rng, cx, cy, area, 0.07);
            let (_, rmax) = blob.bound();
            let clear = thalli.iter().all(|(other, _)| {
                let d = ((other.cx - cx).powi(2) + (other.cy - cy).powi(2)).sqrt();
                d > rmax + other.bound().1 + 2.0
            });
            if clear {
                let poly = PolygonAnnotation::new(ClassLabel::Normal, blob.polygon(THALLUS_VERTICES))?;
                let pixels = rasterize_polygon(&poly, h, w);
                ann.polygons.push(poly);
                thalli.push((blob, pixels));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InfeasibleSpec(format!(
                "could not place {} non-overlapping thalli in a {size} px frame",
                spec.n_thalli
            )));
        }
    }

    // lesions
    let factor = spec.day_factor();
    let mut occupied = vec![false; h * w];
    for defect in &spec.defects {
        let base = rng.random_range(defect.count.0..=defect.count.1);
        let count = (base as f64 * factor).round() as usize;
        for _ in 0..count {
            let area = rng.random_range(defect.blob_area.0..=defect.blob_area.1) * factor;
            let poly = place_lesion(rng, defect.class, area, &thalli, &occupied, h, w)?;
            let pixels = rasterize_polygon(&poly, h, w);
            for (o, p) in occupied.iter_mut().zip(dilate(&pixels, h, w)) {
                *o |= p;
            }
            ann.polygons.push(poly);
        }
    }

    Ok((ann, thalli))
}

fn place_lesion(
    rng: &mut ChaCha8Rng,
    class: ClassLabel,
    area: f64,
    thalli: &[(Blob, Vec<bool>)],
    occupied: &[bool],
    h: usize,
    w: usize,
) -> Result<PolygonAnnotation> {
    let inscribed = |b: &Blob| b.bound().0 * (std::f64::consts::PI / THALLUS_VERTICES as f64).cos();
    let largest = thalli.iter().map(|(b, _)| inscribed(b)).fold(0.0, f64::max);
    let lesion_radius = (area / std::f64::consts::PI).sqrt();
    let fits = match class {
        ClassLabel::Tipburn => lesion_radius < 0.8 * largest,
        _ => lesion_radius * 1.25 + 1.0 < largest,
    };
    if !fits {
        return Err(Error::InfeasibleSpec(format!(
            "{class} lesion of {area:.0} px does not fit inside a thallus"
        )));
    }
    for _ in 0..PLACEMENT_TRIES {
        let (thallus, inside) = &thalli[rng.random_range(0..thalli.len())];
        let points = match class {
            ClassLabel::Tipburn => crescent(rng, thallus, area),
            _ => {
                let blob_area = area;
                let probe = Blob::random(rng, 0.0, 0.0, blob_area, 0.12);
                let reach = inscribed(thallus) - probe.bound().1 - 1.0;
                if reach <= 0.0 {
                    continue;
                }
                let rho = reach * rng.random::<f64>().sqrt();
                let phi = rng.random_range(0.0..TAU);
                Blob {
                    cx: thallus.cx + rho * phi.cos(),
                    cy: thallus.cy + rho * phi.sin(),
                    ..probe
                }
                .polygon(LESION_VERTICES)
            }
        };
        let Some(points) = points_or_none(points) else {
            continue;
        };
        let poly = PolygonAnnotation::new(class, points)?;
        let pixels = rasterize_polygon(&poly, h, w);
        let n = count_in(&pixels);
        let contained = pixels
            .iter()
            .zip(inside)
            .all(|(&p, &t)| !p || t);
        let collides = pixels.iter().zip(occupied).any(|(&p, &o)| p && o);
        if n > 0 && contained && !collides {
            return Ok(poly);
        }
    }
    Err(Error::InfeasibleSpec(format!(
        "could not place a {class} lesion of {area:.0} px without overlap"
    )))
}

fn points_or_none(points: Vec<(f64, f64)>) -> Option<Vec<(f64, f64)>> {
    (points.len() >= 3).then_some(points)
}

/// Crescent hugging the thallus margin: its outer edge reuses the
/// thallus polygon vertices, its inner edge is a sine-shaped bite.
fn crescent(rng: &mut ChaCha8Rng, thallus: &Blob, area: f64) -> Vec<(f64, f64)> {
    let n = THALLUS_VERTICES;
    let r_mean = thallus.r0;
    let half_span = rng.random_range(0.35..0.6);
    let arc = 2.0 * half_span * r_mean;
    let depth = (area / (arc * 2.0 / std::f64::consts::PI)).min(0.6 * r_mean);
    let step = TAU / n as f64;
    let steps = ((half_span / step).round() as usize).max(2);
    let start = rng.random_range(0..n);
    let idx: Vec<usize> = (0..=2 * steps).map(|k| (start + k) % n).collect();
    let mut outer = Vec::with_capacity(idx.len());
    let mut inner = Vec::with_capacity(idx.len());
    for (k, &i) in idx.iter().enumerate() {
        let t = Blob::vertex_angle(i, n);
        let r = thallus.radius_at(t);
        let frac = k as f64 / (2 * steps) as f64;
        let d = depth * (std::f64::consts::PI * frac).sin();
        outer.push((thallus.cx + r * t.cos(), thallus.cy + r * t.sin()));
        if k > 0 && k < 2 * steps {
            let ri = (r - d).max(0.0);
            inner.push((thallus.cx + ri * t.cos(), thallus.cy + ri * t.sin()));
        }
    }
    outer.extend(inner.into_iter().rev());
    outer
}

/// Smooth [0, 1] field of pale patches over healthy tissue.
fn pallor_field(rng: &mut ChaCha8Rng, thalli: &[(Blob, Vec<bool>)], h: usize, w: usize) -> Vec<f32> {
    let mut field = vec![0.0f32; h * w];
    for (blob, _) in thalli {
        let n_patches = rng.random_range(1..=3);
        for _ in 0..n_patches {
            let rho = blob.r0 * rng.random_range(0.0..0.8);
            let phi = rng.random_range(0.0..TAU);
            let px = blob.cx + rho * phi.cos();
            let py = blob.cy + rho * phi.sin();
            let sigma = blob.r0 * rng.random_range(0.2..0.4);
            let peak = rng.random_range(0.6..1.0);
            let reach = (3.0 * sigma).ceil() as isize;
            let (x0, y0) = (px.floor() as isize, py.floor() as isize);
            for y in (y0 - reach).max(0)..(y0 + reach + 1).min(h as isize) {
                for x in (x0 - reach).max(0)..(x0 + reach + 1).min(w as isize) {
                    let dx = x as f64 + 0.5 - px;
                    let dy = y as f64 + 0.5 - py;
                    let v = peak * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    let cell = &mut field[y as usize * w + x as usize];
                    *cell = (*cell + v as f32).min(1.0);
                }
            }
        }
    }
    field
}

fn render(
    rng: &mut ChaCha8Rng,
    mask: &SemanticMask,
    pallor: &[f32],
    signatures: &Signatures,
    normal_pallor: f32,
) -> Result<Raster> {
    let (h, w) = (mask.height, mask.width);
    let normal = &signatures[&ClassLabel::Normal];
    let chlorosis = &signatures[&ClassLabel::Chlorosis];
    // pallor moves healthy tissue toward chlorosis in the visible bands only
    let pallor_shift: Vec<f32> = (0..9)
        .map(|b| {
            let d = chlorosis.mean_reflectance[b] - normal.mean_reflectance[b];
            if b < 6 {
                d.max(0.0) * normal_pallor
            } else {
                0.0
            }
        })
        .collect();
    let unit = Normal::new(0.0f32, 1.0).expect("unit normal");
    let mut raster = Raster::filled(9, h, w, 0.0);
    let plane = h * w;
    for i in 0..plane {
        let code = mask.labels[i];
        for b in 0..9 {
            let z = unit.sample(rng);
            let v = if code == BACKGROUND {
                BACKGROUND_REFLECTANCE + BACKGROUND_NOISE_SD * z
            } else {
                let sig = &signatures[&ClassLabel::from_code(code).expect("valid mask code")];
                let mut mean = sig.mean_reflectance[b];
                if code == ClassLabel::Normal.code() {
                    mean += pallor[i] * pallor_shift[b];
                }
                mean + sig.noise_sd[b] * z
            };
            raster.data[b * plane + i] = v.clamp(0.0, 1.0);
        }
    }
    Ok(raster)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub sample_id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub annotation_path: PathBuf,
    pub seed: u64,
}

/// CSV manifest `sample_id,image_path,mask_path,annotation_path,seed`.
/// Paths are relative to the manifest's directory.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<DatasetEntry>,
}

pub const MANIFEST_HEADER: &str = "sample_id,image_path,mask_path,annotation_path,seed";

impl DatasetManifest {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                e.sample_id,
                e.image_path.display(),
                e.mask_path.display(),
                e.annotation_path.display(),
                e.seed
            );
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
            return Err(Error::InvalidArgument(format!(
                "dataset manifest must start with `{MANIFEST_HEADER}`"
            )));
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let [id, img, mask, ann, seed] = f.as_slice() else {
                return Err(Error::InvalidArgument(format!(
                    "manifest row {}: expected 5 fields",
                    i + 2
                )));
            };
            entries.push(DatasetEntry {
                sample_id: id.to_string(),
                image_path: PathBuf::from(img),
                mask_path: PathBuf::from(mask),
                annotation_path: PathBuf::from(ann),
                seed: seed.trim().parse().map_err(|_| {
                    Error::InvalidArgument(format!("manifest row {}: bad seed {seed:?}", i + 2))
                })?,
            });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.sample_id.clone()).collect()
    }
}

pub const MANIFEST_FILE: &str = "dataset.csv";
pub const BALANCE_FILE: &str = "class_balance.csv";

#[derive(Debug, Clone)]
pub struct DatasetOptions {
    pub n: usize,
    pub template: PlateSpec,
    pub base_seed: u64,
    /// Inclusive range the acquisition day is drawn from; `None` keeps
    /// the template's day.
    pub days: Option<(u32, u32)>,
    pub chlorosis_rgb_contrast: f32,
    pub format: SampleFormat,
}

impl DatasetOptions {
    pub fn new(n: usize, size: usize, base_seed: u64) -> Self {
        Self {
            n,
            template: PlateSpec::default_for(size),
            base_seed,
            days: None,
            chlorosis_rgb_contrast: DEFAULT_CHLOROSIS_RGB_CONTRAST,
            format: SampleFormat::F32,
        }
    }
}

/// Per-plate seeds drawn from one stream seeded by `base_seed`.
pub fn plate_seeds(base_seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// Generates plates in memory, in manifest order.
pub fn gen_plates(opts: &DatasetOptions) -> Result<Vec<(u64, Plate)>> {
    if opts.n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    let signatures =
        signatures_with_contrast(&BandManifest::canonical(), opts.chlorosis_rgb_contrast)?;
    let mut day_rng = ChaCha8Rng::seed_from_u64(opts.base_seed ^ 0x5eed_da75);
    plate_seeds(opts.base_seed, opts.n)
        .into_iter()
        .enumerate()
        .map(|(i, seed)| {
            let mut spec = opts.template.clone();
            spec.rng_seed = seed;
            if let Some((lo, hi)) = opts.days {
                spec.day = day_rng.random_range(lo..=hi);
            }
            gen_plate(&spec, &signatures, &format!("plate_{i:04}")).map(|p| (seed, p))
        })
        .collect()
}

/// Writes `n` plates under `out_dir` as `images/*.tif` (+ band sidecars),
/// `masks/*.tif` and `annotations/*.json`, plus the dataset manifest and
/// the class-balance CSV.
pub fn gen_dataset(opts: &DatasetOptions, out_dir: &Path) -> Result<DatasetManifest> {
    let plates = gen_plates(opts)?;
    for sub in ["images", "masks", "annotations"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut manifest = DatasetManifest::default();
    for (seed, plate) in &plates {
        let id = &plate.image.sample_id;
        let entry = DatasetEntry {
            sample_id: id.clone(),
            image_path: PathBuf::from(format!("images/{id}.tif")),
            mask_path: PathBuf::from(format!("masks/{id}.tif")),
            annotation_path: PathBuf::from(format!("annotations/{id}.json")),
            seed: *seed,
        };
        save_image(&out_dir.join(&entry.image_path), &plate.image, opts.format)?;
        write_mask_tiff(&out_dir.join(&entry.mask_path), &plate.mask)?;
        let ann_path = out_dir.join(&entry.annotation_path);
        let doc = plate.annotations.to_labelme(&format!("../images/{id}.tif"));
        fs::write(&ann_path, doc).map_err(|e| Error::io(&ann_path, e))?;
        manifest.entries.push(entry);
    }
    let stats = class_statistics(plates.iter().map(|(_, p)| (&p.annotations, &p.mask)));
    let balance = out_dir.join(BALANCE_FILE);
    fs::write(&balance, class_statistics_csv(&stats)).map_err(|e| Error::io(&balance, e))?;
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sigs() -> Signatures {
        default_signatures(&BandManifest::canonical()).unwrap()
    }

    fn band(nm: u32) -> usize {
        BandManifest::canonical().position(nm).unwrap()
    }

    #[test]
    fn signature_ordering_constraints() {
        let s = sigs();
        let m = |c: ClassLabel, nm: u32| s[&c].mean_reflectance[band(nm)];
        assert!(m(ClassLabel::Chlorosis, 840) < m(ClassLabel::Normal, 840));
        assert!(m(ClassLabel::Chlorosis, 780) < m(ClassLabel::Normal, 780));
        for nm in [530, 570, 620] {
            assert!(m(ClassLabel::Chlorosis, nm) > m(ClassLabel::Normal, nm));
        }
        assert!(m(ClassLabel::PigmentAccumulation, 530) < m(ClassLabel::Normal, 530));
        assert!(m(ClassLabel::PigmentAccumulation, 620) > m(ClassLabel::Normal, 620));
        for other in [ClassLabel::Normal, ClassLabel::Chlorosis, ClassLabel::PigmentAccumulation] {
            for b in 0..9 {
                assert!(s[&ClassLabel::Tipburn].mean_reflectance[b] <= s[&other].mean_reflectance[b]);
            }
        }
        for sig in s.values() {
            assert_eq!(sig.mean_reflectance.len(), 9);
            assert!(sig.mean_reflectance.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(sig.noise_sd.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn rgb_gap_tracks_contrast_parameter() {
        for contrast in [0.0f32, 0.25, 0.4, 1.0] {
            let s = signatures_with_contrast(&BandManifest::canonical(), contrast).unwrap();
            let gap = |nm| {
                (s[&ClassLabel::Chlorosis].mean_reflectance[band(nm)]
                    - s[&ClassLabel::Normal].mean_reflectance[band(nm)])
                    .abs()
            };
            let rgb = (gap(470) + gap(530) + gap(620)) / 3.0;
            assert!((rgb - contrast * gap(840)).abs() < 1e-6);
        }
    }

    #[test]
    fn non_canonical_manifest_rejected() {
        let m = BandManifest::new(&[470, 530, 620]).unwrap();
        assert!(default_signatures(&m).is_err());
    }

    #[test]
    fn plate_without_defects_has_only_normal() {
        let mut spec = PlateSpec::default_for(64);
        spec.defects.clear();
        spec.rng_seed = 3;
        let plate = gen_plate(&spec, &sigs(), "p").unwrap();
        let codes: std::collections::BTreeSet<u8> = plate.mask.labels.iter().copied().collect();
        assert_eq!(codes, [0, 255].into_iter().collect());
    }

    #[test]
    fn plate_is_deterministic_and_mask_matches_polygons() {
        let mut spec = PlateSpec::default_for(96);
        spec.rng_seed = 11;
        let a = gen_plate(&spec, &sigs(), "p").unwrap();
        let b = gen_plate(&spec, &sigs(), "p").unwrap();
        assert_eq!(a.image.pixels, b.image.pixels);
        assert_eq!(a.mask, b.mask);
        assert_eq!(build_semantic_mask(&a.annotations), a.mask);
        spec.rng_seed = 12;
        let c = gen_plate(&spec, &sigs(), "p").unwrap();
        assert_ne!(a.mask, c.mask);
    }

    #[test]
    fn tipburn_touches_thallus_margin() {
        let mut spec = PlateSpec::default_for(128);
        spec.defects.retain(|d| d.class == ClassLabel::Tipburn);
        spec.defects[0].count = (2, 2);
        spec.rng_seed = 5;
        let plate = gen_plate(&spec, &sigs(), "p").unwrap();
        let (h, w) = (plate.mask.height, plate.mask.width);
        let tip = ClassLabel::Tipburn.code();
        let mut touches_background = false;
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                if plate.mask.get(y, x) != tip {
                    continue;
                }
                let neigh = [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)];
                touches_background |= neigh.iter().any(|&(ny, nx)| plate.mask.get(ny, nx) == BACKGROUND);
            }
        }
        assert!(touches_background);
    }

    #[test]
    fn oversized_lesion_is_infeasible() {
        let mut spec = PlateSpec::default_for(64);
        spec.defects = vec![DefectSpec {
            class: ClassLabel::Chlorosis,
            count: (1, 1),
            blob_area: (2000.0, 2000.0),
        }];
        assert!(matches!(
            gen_plate(&spec, &sigs(), "p"),
            Err(Error::InfeasibleSpec(_))
        ));
    }

    #[test]
    fn day_scales_lesion_count() {
        let mut spec = PlateSpec::default_for(96);
        spec.day = 0;
        let plate = gen_plate(&spec, &sigs(), "p").unwrap();
        assert!(plate
            .annotations
            .polygons
            .iter()
            .all(|p| p.label == ClassLabel::Normal));
    }

    #[test]
    fn manifest_csv_round_trip() {
        let manifest = DatasetManifest {
            entries: vec![DatasetEntry {
                sample_id: "plate_0000".into(),
                image_path: "images/plate_0000.tif".into(),
                mask_path: "masks/plate_0000.tif".into(),
                annotation_path: "annotations/plate_0000.json".into(),
                seed: 42,
            }],
        };
        let csv = manifest.to_csv();
        assert!(csv.starts_with(MANIFEST_HEADER));
        assert_eq!(DatasetManifest::parse_csv(&csv).unwrap(), manifest);
        assert!(DatasetManifest::parse_csv("nope\n").is_err());
    }
}

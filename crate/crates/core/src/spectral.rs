//! Multi-spectral rasters, band manifests and the class vocabulary.
//!
//! Every raster in the pipeline is stored band-major (`[C, H, W]`) and is
//! paired with a [`BandManifest`] that fixes which wavelength each channel
//! holds. Channel 1 of a multi-spectral manifest is always 470 nm and
//! channel 2 is always 530 nm; the loaders and the network rely on that
//! ordering never changing between training and inference.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial size every image is resized to before it reaches the network.
pub const CANONICAL_SIZE: usize = 640;

/// Mask code for pixels that belong to no class.
pub const BACKGROUND: u8 = 255;

/// Canonical 9-band layout, visible through near-infrared.
pub const DEFAULT_WAVELENGTHS_NM: [u32; 9] = [470, 530, 570, 620, 660, 700, 740, 780, 840];

/// Blue, green and red centers used for the RGB projection.
pub const BLUE_NM: u32 = 470;
pub const GREEN_NM: u32 = 530;
pub const RED_NM: u32 = 620;

/// Symptom classes. The integer codes are stable and used in masks,
/// confusion matrices and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum ClassLabel {
    Normal = 0,
    Chlorosis = 1,
    PigmentAccumulation = 2,
    Tipburn = 3,
}

impl ClassLabel {
    pub const COUNT: usize = 4;
    pub const ALL: [ClassLabel; 4] = [
        ClassLabel::Normal,
        ClassLabel::Chlorosis,
        ClassLabel::PigmentAccumulation,
        ClassLabel::Tipburn,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// Snake-case name used in CSV reports.
    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Normal => "normal",
            ClassLabel::Chlorosis => "chlorosis",
            ClassLabel::PigmentAccumulation => "pigment_accumulation",
            ClassLabel::Tipburn => "tipburn",
        }
    }

    pub fn is_defect(self) -> bool {
        self != ClassLabel::Normal
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    /// Case-insensitive; accepts the spellings annotators actually use.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .map(|c| if c == ' ' || c == '-' { '_' } else { c })
            .collect();
        match key.as_str() {
            "normal" => Ok(ClassLabel::Normal),
            "chlorosis" => Ok(ClassLabel::Chlorosis),
            "pigment_accumulation" | "pigment_accum" | "pigment" => {
                Ok(ClassLabel::PigmentAccumulation)
            }
            "tipburn" | "tip_burn" => Ok(ClassLabel::Tipburn),
            _ => Err(Error::UnknownLabel(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    /// 1-based channel index.
    pub index: usize,
    pub wavelength_nm: u32,
}

/// Ordered channel-to-wavelength mapping.
///
/// Two layouts are accepted: a multi-spectral layout with strictly
/// increasing wavelengths that starts 470 nm, 530 nm, and the fixed RGB
/// projection layout (620, 530, 470) produced by [`extract_rgb`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandManifest {
    bands: Vec<Band>,
}

impl BandManifest {
    pub fn new(wavelengths_nm: &[u32]) -> Result<Self> {
        let bands = wavelengths_nm
            .iter()
            .enumerate()
            .map(|(i, &wavelength_nm)| Band {
                index: i + 1,
                wavelength_nm,
            })
            .collect();
        Self::from_bands(bands)
    }

    pub fn from_bands(bands: Vec<Band>) -> Result<Self> {
        if bands.is_empty() {
            return Err(Error::Manifest("no bands".into()));
        }
        for (i, band) in bands.iter().enumerate() {
            if band.index != i + 1 {
                return Err(Error::Manifest(format!(
                    "band indices must be contiguous from 1, found {} at position {}",
                    band.index,
                    i + 1
                )));
            }
        }
        let wavelengths: Vec<u32> = bands.iter().map(|b| b.wavelength_nm).collect();
        if wavelengths == [RED_NM, GREEN_NM, BLUE_NM] {
            return Ok(Self { bands });
        }
        if wavelengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Manifest(format!(
                "wavelengths must be strictly increasing: {wavelengths:?}"
            )));
        }
        if wavelengths.len() < 2 || wavelengths[0] != BLUE_NM || wavelengths[1] != GREEN_NM {
            return Err(Error::Manifest(format!(
                "band 1 must be {BLUE_NM} nm and band 2 {GREEN_NM} nm, got {wavelengths:?}"
            )));
        }
        Ok(Self { bands })
    }

    /// The default 9-band multi-spectral layout.
    pub fn canonical() -> Self {
        Self::new(&DEFAULT_WAVELENGTHS_NM).expect("canonical manifest is valid")
    }

    /// The (R, G, B) = (620, 530, 470) nm layout of the baseline model.
    pub fn rgb() -> Self {
        Self::new(&[RED_NM, GREEN_NM, BLUE_NM]).expect("rgb manifest is valid")
    }

    pub fn count(&self) -> usize {
        self.bands.len()
    }

    pub fn bands(&self) -> &[Band] {
        &self.bands
    }

    pub fn wavelengths(&self) -> impl Iterator<Item = u32> + '_ {
        self.bands.iter().map(|b| b.wavelength_nm)
    }

    /// 0-based channel position of a wavelength.
    pub fn position(&self, wavelength_nm: u32) -> Option<usize> {
        self.bands.iter().position(|b| b.wavelength_nm == wavelength_nm)
    }

    pub fn is_canonical(&self) -> bool {
        self.wavelengths().eq(DEFAULT_WAVELENGTHS_NM)
    }

    /// Sidecar text form: one `<index> <wavelength_nm>` line per band.
    pub fn to_sidecar(&self) -> String {
        self.bands
            .iter()
            .map(|b| format!("{} {}\n", b.index, b.wavelength_nm))
            .collect()
    }

    pub fn parse_sidecar(text: &str) -> Result<Self> {
        let mut bands = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(idx), Some(nm), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Manifest(format!(
                    "line {}: expected `<index> <wavelength_nm>`",
                    lineno + 1
                )));
            };
            let index = idx
                .parse()
                .map_err(|_| Error::Manifest(format!("line {}: bad index {idx:?}", lineno + 1)))?;
            let wavelength_nm: f64 = nm.parse().map_err(|_| {
                Error::Manifest(format!("line {}: bad wavelength {nm:?}", lineno + 1))
            })?;
            bands.push(Band {
                index,
                wavelength_nm: wavelength_nm.round() as u32,
            });
        }
        Self::from_bands(bands)
    }
}

/// Band-major `[C, H, W]` buffer of `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot be [{channels}, {height}, {width}]",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Bilinear resampling with half-pixel centers, per band.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Raster {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        let mut out = Raster::filled(self.channels, height, width, 0.0);
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                for c in 0..self.channels {
                    let top = self.get(c, y0, x0) * (1.0 - wx) + self.get(c, y0, x1) * wx;
                    let bot = self.get(c, y1, x0) * (1.0 - wx) + self.get(c, y1, x1) * wx;
                    out.data[(c * height + y) * width + x] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        out
    }
}

/// Normalized reflectance raster plus its band manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSpectralImage {
    pub pixels: Raster,
    pub manifest: BandManifest,
    pub sample_id: String,
    pub day: Option<u32>,
}

impl MultiSpectralImage {
    pub fn new(pixels: Raster, manifest: BandManifest, sample_id: impl Into<String>) -> Self {
        Self {
            pixels,
            manifest,
            sample_id: sample_id.into(),
            day: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.pixels.channels
    }

    pub fn height(&self) -> usize {
        self.pixels.height
    }

    pub fn width(&self) -> usize {
        self.pixels.width
    }

    /// Plane for a wavelength, if the manifest carries it.
    pub fn band(&self, wavelength_nm: u32) -> Option<&[f32]> {
        self.manifest
            .position(wavelength_nm)
            .map(|c| self.pixels.plane(c))
    }
}

/// Per-pixel class codes: 0..=3 or [`BACKGROUND`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl SemanticMask {
    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![BACKGROUND; height * width],
        }
    }

    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} labels cannot be a {height}x{width} mask",
                labels.len()
            )));
        }
        if let Some(bad) = labels
            .iter()
            .find(|&&l| l != BACKGROUND && ClassLabel::from_code(l).is_none())
        {
            return Err(Error::Shape(format!("illegal mask code {bad}")));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Pixel count per class code 0..=3.
    pub fn class_counts(&self) -> [usize; 4] {
        let mut counts = [0usize; 4];
        for &l in &self.labels {
            if let Some(c) = counts.get_mut(l as usize) {
                *c += 1;
            }
        }
        counts
    }

    /// Binary mask of one class.
    pub fn class_mask(&self, class: ClassLabel) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class.code()).collect()
    }

    /// Nearest-neighbor resampling (pixel-center sampling).
    pub fn resize_nearest(&self, height: usize, width: usize) -> SemanticMask {
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = ((y * self.height) + self.height / 2) / height;
            for x in 0..width {
                let sx = ((x * self.width) + self.width / 2) / width;
                labels.push(self.get(sy.min(self.height - 1), sx.min(self.width - 1)));
            }
        }
        SemanticMask {
            height,
            width,
            labels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    ChannelCount { manifest: usize, raster: usize },
    SpatialSize { expected: usize, height: usize, width: usize },
    NonFinite { count: usize },
    OutOfRange { count: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ChannelCount { manifest, raster } => write!(
                f,
                "raster has {raster} channels but the manifest lists {manifest}"
            ),
            Violation::SpatialSize {
                expected,
                height,
                width,
            } => write!(f, "spatial size {height}x{width}, expected {expected}x{expected}"),
            Violation::NonFinite { count } => write!(f, "{count} non-finite values"),
            Violation::OutOfRange { count } => write!(f, "{count} values outside [0, 1]"),
        }
    }
}

/// Checks an image against the [`CANONICAL_SIZE`] contract.
pub fn validate_image(img: &MultiSpectralImage) -> Vec<Violation> {
    validate_image_at(img, CANONICAL_SIZE)
}

/// Like [`validate_image`] for pipelines running at a reduced input size.
pub fn validate_image_at(img: &MultiSpectralImage, size: usize) -> Vec<Violation> {
    let mut report = Vec::new();
    let px = &img.pixels;
    if px.channels != img.manifest.count() {
        report.push(Violation::ChannelCount {
            manifest: img.manifest.count(),
            raster: px.channels,
        });
    }
    if px.height != size || px.width != size {
        report.push(Violation::SpatialSize {
            expected: size,
            height: px.height,
            width: px.width,
        });
    }
    let non_finite = px.data.iter().filter(|v| !v.is_finite()).count();
    if non_finite > 0 {
        report.push(Violation::NonFinite { count: non_finite });
    }
    let out_of_range = px
        .data
        .iter()
        .filter(|v| v.is_finite() && !(0.0..=1.0).contains(*v))
        .count();
    if out_of_range > 0 {
        report.push(Violation::OutOfRange {
            count: out_of_range,
        });
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormalizeMode {
    /// Each band's min maps to 0 and max to 1.
    PerBandMinMax,
    /// Divide every value by a sensor full-scale constant, then clamp.
    GlobalScale(f32),
}

impl Default for NormalizeMode {
    /// 16-bit full scale; keeps inter-band reflectance ratios intact.
    fn default() -> Self {
        NormalizeMode::GlobalScale(u16::MAX as f32)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NormalizeReport {
    /// 0-based channels that were constant and zeroed.
    pub degenerate_bands: Vec<usize>,
}

pub fn normalize(
    raw: &Raster,
    manifest: &BandManifest,
    mode: NormalizeMode,
    sample_id: &str,
) -> Result<(MultiSpectralImage, NormalizeReport)> {
    if raw.channels != manifest.count() {
        return Err(Error::Shape(format!(
            "raster has {} channels, manifest {}",
            raw.channels,
            manifest.count()
        )));
    }
    if raw.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("raw raster contains non-finite values".into()));
    }
    let mut out = raw.clone();
    let mut report = NormalizeReport::default();
    match mode {
        NormalizeMode::GlobalScale(divisor) => {
            if !(divisor > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "global scale divisor must be positive, got {divisor}"
                )));
            }
            for v in &mut out.data {
                *v = (*v / divisor).clamp(0.0, 1.0);
            }
        }
        NormalizeMode::PerBandMinMax => {
            for c in 0..out.channels {
                let plane = out.plane_mut(c);
                let (lo, hi) = plane
                    .iter()
                    .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                        (lo.min(v), hi.max(v))
                    });
                if hi > lo {
                    let span = hi - lo;
                    for v in plane.iter_mut() {
                        *v = ((*v - lo) / span).clamp(0.0, 1.0);
                    }
                } else {
                    plane.fill(0.0);
                    report.degenerate_bands.push(c);
                }
            }
        }
    }
    Ok((
        MultiSpectralImage::new(out, manifest.clone(), sample_id),
        report,
    ))
}

/// Projects a multi-spectral image onto (R, G, B) = (620, 530, 470) nm.
pub fn extract_rgb(img: &MultiSpectralImage) -> Result<MultiSpectralImage> {
    let mut data = Vec::with_capacity(3 * img.pixels.plane_len());
    for nm in [RED_NM, GREEN_NM, BLUE_NM] {
        let plane = img.band(nm).ok_or(Error::MissingBand(nm))?;
        data.extend_from_slice(plane);
    }
    let pixels = Raster::new(3, img.height(), img.width(), data)?;
    Ok(MultiSpectralImage {
        pixels,
        manifest: BandManifest::rgb(),
        sample_id: img.sample_id.clone(),
        day: img.day,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant_image(channels: usize, size: usize, value: f32) -> MultiSpectralImage {
        let manifest = if channels == 9 {
            BandManifest::canonical()
        } else {
            BandManifest::rgb()
        };
        MultiSpectralImage::new(Raster::filled(channels, size, size, value), manifest, "t")
    }

    #[test]
    fn well_formed_image_validates() {
        let img = constant_image(9, CANONICAL_SIZE, 0.3);
        assert!(validate_image(&img).is_empty());
    }

    #[test]
    fn channel_count_mismatch_reported() {
        let mut img = constant_image(9, CANONICAL_SIZE, 0.3);
        img.pixels = Raster::filled(3, CANONICAL_SIZE, CANONICAL_SIZE, 0.3);
        let report = validate_image(&img);
        assert!(report
            .iter()
            .any(|v| matches!(v, Violation::ChannelCount { manifest: 9, raster: 3 })));
    }

    #[test]
    fn single_nan_reported() {
        let mut img = constant_image(9, 16, 0.3);
        img.pixels.data[17] = f32::NAN;
        let report = validate_image_at(&img, 16);
        assert_eq!(report, vec![Violation::NonFinite { count: 1 }]);
    }

    #[test]
    fn wrong_size_and_range_reported() {
        let mut img = constant_image(9, 8, 0.3);
        img.pixels.data[0] = 1.5;
        let report = validate_image(&img);
        assert!(report.contains(&Violation::OutOfRange { count: 1 }));
        assert!(report
            .iter()
            .any(|v| matches!(v, Violation::SpatialSize { expected: 640, .. })));
    }

    #[test]
    fn manifest_ordering_contract() {
        let m = BandManifest::canonical();
        assert_eq!(m.count(), 9);
        assert_eq!(m.bands()[0].wavelength_nm, 470);
        assert_eq!(m.bands()[1].wavelength_nm, 530);
        assert!(BandManifest::new(&[530, 470, 620]).is_err());
        assert!(BandManifest::new(&[470, 530, 530]).is_err());
        assert!(BandManifest::new(&[450, 530, 620]).is_err());
        let bad_index = vec![
            Band { index: 1, wavelength_nm: 470 },
            Band { index: 3, wavelength_nm: 530 },
        ];
        assert!(BandManifest::from_bands(bad_index).is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let m = BandManifest::canonical();
        let text = m.to_sidecar();
        assert!(text.starts_with("1 470\n2 530\n"));
        assert_eq!(BandManifest::parse_sidecar(&text).unwrap(), m);
        assert!(BandManifest::parse_sidecar("1 470\n2\n").is_err());
    }

    #[test]
    fn minmax_maps_endpoints() {
        let raw = Raster::new(1, 1, 3, vec![0.0, 50.0, 100.0]).unwrap();
        let raw9 = stack_band(&raw, 9);
        let (img, report) = normalize(
            &raw9,
            &BandManifest::canonical(),
            NormalizeMode::PerBandMinMax,
            "s",
        )
        .unwrap();
        assert_eq!(img.pixels.plane(0), &[0.0, 0.5, 1.0]);
        assert!(report.degenerate_bands.is_empty());
    }

    fn stack_band(raw: &Raster, channels: usize) -> Raster {
        let mut data = Vec::new();
        for _ in 0..channels {
            data.extend_from_slice(&raw.data);
        }
        Raster::new(channels, raw.height, raw.width, data).unwrap()
    }

    #[test]
    fn constant_band_flagged_degenerate() {
        let mut raw = stack_band(&Raster::new(1, 1, 3, vec![0.0, 50.0, 100.0]).unwrap(), 9);
        raw.plane_mut(4).fill(7.0);
        let (img, report) = normalize(
            &raw,
            &BandManifest::canonical(),
            NormalizeMode::PerBandMinMax,
            "s",
        )
        .unwrap();
        assert_eq!(img.pixels.plane(4), &[0.0, 0.0, 0.0]);
        assert_eq!(report.degenerate_bands, vec![4]);
    }

    #[test]
    fn global_scale_divides() {
        let raw = stack_band(&Raster::new(1, 1, 3, vec![0.0, 128.0, 255.0]).unwrap(), 9);
        let (img, _) = normalize(
            &raw,
            &BandManifest::canonical(),
            NormalizeMode::GlobalScale(255.0),
            "s",
        )
        .unwrap();
        let p = img.pixels.plane(0);
        assert_eq!(p[0], 0.0);
        assert!((p[1] - 0.50196).abs() < 1e-5);
        assert_eq!(p[2], 1.0);
        assert!(normalize(
            &raw,
            &BandManifest::canonical(),
            NormalizeMode::GlobalScale(0.0),
            "s"
        )
        .is_err());
    }

    #[test]
    fn rgb_takes_red_green_blue_planes() {
        let mut img = constant_image(9, 4, 0.0);
        for c in 0..9 {
            img.pixels.plane_mut(c).fill(c as f32 / 10.0);
        }
        let rgb = extract_rgb(&img).unwrap();
        assert_eq!(rgb.channels(), 3);
        assert_eq!(rgb.pixels.plane(0), img.band(620).unwrap());
        assert_eq!(rgb.pixels.plane(1), img.band(530).unwrap());
        assert_eq!(rgb.pixels.plane(2), img.band(470).unwrap());
    }

    #[test]
    fn rgb_of_identical_planes_is_gray() {
        let img = constant_image(9, 4, 0.42);
        let rgb = extract_rgb(&img).unwrap();
        assert_eq!(rgb.pixels.plane(0), rgb.pixels.plane(1));
        assert_eq!(rgb.pixels.plane(1), rgb.pixels.plane(2));
    }

    #[test]
    fn rgb_requires_red_band() {
        let manifest = BandManifest::new(&[470, 530, 570, 660, 700, 740, 780, 840, 900]).unwrap();
        let img = MultiSpectralImage::new(Raster::filled(9, 2, 2, 0.1), manifest, "x");
        match extract_rgb(&img) {
            Err(Error::MissingBand(620)) => {}
            other => panic!("expected missing 620 nm, got {other:?}"),
        }
    }

    #[test]
    fn labels_parse_case_insensitively() {
        assert_eq!("Tipburn".parse::<ClassLabel>().unwrap(), ClassLabel::Tipburn);
        assert_eq!(
            "Pigment Accumulation".parse::<ClassLabel>().unwrap(),
            ClassLabel::PigmentAccumulation
        );
        assert_eq!(
            "pigment_accum".parse::<ClassLabel>().unwrap(),
            ClassLabel::PigmentAccumulation
        );
        assert!(matches!(
            "rust".parse::<ClassLabel>(),
            Err(Error::UnknownLabel(s)) if s == "rust"
        ));
    }

    fn raster_strategy() -> impl Strategy<Value = Raster> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            prop::collection::vec(-1000.0f32..1000.0, 9 * h * w)
                .prop_map(move |data| Raster::new(9, h, w, data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn minmax_is_idempotent(raw in raster_strategy()) {
            let m = BandManifest::canonical();
            let (once, _) = normalize(&raw, &m, NormalizeMode::PerBandMinMax, "p").unwrap();
            let (twice, _) = normalize(&once.pixels, &m, NormalizeMode::PerBandMinMax, "p").unwrap();
            for (a, b) in once.pixels.data.iter().zip(&twice.pixels.data) {
                prop_assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }

        #[test]
        fn rgb_restack_is_valid(raw in raster_strategy()) {
            let (img, _) = normalize(&raw, &BandManifest::canonical(), NormalizeMode::PerBandMinMax, "p").unwrap();
            let rgb = extract_rgb(&img).unwrap();
            let size = img.height();
            if img.height() == img.width() {
                prop_assert!(validate_image_at(&rgb, size).is_empty());
            }
            prop_assert_eq!(rgb.manifest.count(), 3);
        }

        #[test]
        fn global_scale_preserves_channel_order(raw in raster_strategy()) {
            let (img, _) = normalize(&raw, &BandManifest::canonical(), NormalizeMode::GlobalScale(1000.0), "p").unwrap();
            for c in 0..9 {
                for (o, r) in img.pixels.plane(c).iter().zip(raw.plane(c)) {
                    prop_assert_eq!(*o, (r / 1000.0).clamp(0.0, 1.0));
                }
            }
        }
    }
}

//! On-disk formats: multi-page TIFF rasters with a band sidecar, and
//! single-page 8-bit masks (TIFF or binary PGM).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, TiffEncoder};

use crate::error::{Error, Result};
use crate::spectral::{
    normalize, BandManifest, MultiSpectralImage, NormalizeMode, Raster, SemanticMask,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    U16,
    F32,
}

/// `plate_0001.tif` → `plate_0001.bands.txt`
pub fn sidecar_path(image_path: &Path) -> PathBuf {
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    image_path.with_file_name(format!("{stem}.bands.txt"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// One page per band, page order equal to band order.
pub fn write_raster_tiff(path: &Path, raster: &Raster, format: SampleFormat) -> Result<()> {
    let mut out = create(path)?;
    {
        let mut enc = TiffEncoder::new(&mut out)?;
        let (w, h) = (raster.width as u32, raster.height as u32);
        for c in 0..raster.channels {
            let plane = raster.plane(c);
            match format {
                SampleFormat::F32 => enc.write_image::<colortype::Gray32Float>(w, h, plane)?,
                SampleFormat::U16 => {
                    let counts: Vec<u16> = plane
                        .iter()
                        .map(|v| (v.clamp(0.0, 1.0) * u16::MAX as f32).round() as u16)
                        .collect();
                    enc.write_image::<colortype::Gray16>(w, h, &counts)?
                }
            }
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads every page as a band. `U16` pages are returned as raw counts.
pub fn read_raster_tiff(path: &Path) -> Result<(Raster, SampleFormat)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file))?.with_limits(Limits::unlimited());
    let (w, h) = dec.dimensions()?;
    let mut data = Vec::new();
    let mut format = None;
    let mut channels = 0;
    loop {
        if dec.dimensions()? != (w, h) {
            return Err(Error::Shape(format!(
                "{}: page {} has different dimensions",
                path.display(),
                channels + 1
            )));
        }
        let page_format = match dec.read_image()? {
            DecodingResult::F32(v) => {
                data.extend(v);
                SampleFormat::F32
            }
            DecodingResult::U16(v) => {
                data.extend(v.into_iter().map(f32::from));
                SampleFormat::U16
            }
            DecodingResult::U8(v) => {
                data.extend(v.into_iter().map(|x| f32::from(x) * 257.0));
                SampleFormat::U16
            }
            _ => {
                return Err(Error::Shape(format!(
                    "{}: unsupported sample type",
                    path.display()
                )))
            }
        };
        if *format.get_or_insert(page_format) != page_format {
            return Err(Error::Shape(format!("{}: mixed sample types", path.display())));
        }
        channels += 1;
        if !dec.more_images() {
            break;
        }
        dec.next_image()?;
    }
    let raster = Raster::new(channels, h as usize, w as usize, data)?;
    Ok((raster, format.unwrap_or(SampleFormat::F32)))
}

pub fn write_manifest(path: &Path, manifest: &BandManifest) -> Result<()> {
    fs::write(path, manifest.to_sidecar()).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<BandManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    BandManifest::parse_sidecar(&text)
}

/// Writes the raster and its sidecar manifest.
pub fn save_image(path: &Path, img: &MultiSpectralImage, format: SampleFormat) -> Result<()> {
    write_raster_tiff(path, &img.pixels, format)?;
    write_manifest(&sidecar_path(path), &img.manifest)
}

/// Loads a raster plus sidecar. Float pages are taken as reflectance;
/// integer pages are normalized with `mode`.
pub fn load_image(path: &Path, mode: NormalizeMode) -> Result<MultiSpectralImage> {
    let (raster, format) = read_raster_tiff(path)?;
    let manifest = read_manifest(&sidecar_path(path))?;
    let sample_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match format {
        SampleFormat::F32 => {
            if raster.channels != manifest.count() {
                return Err(Error::Shape(format!(
                    "{}: {} pages but manifest lists {} bands",
                    path.display(),
                    raster.channels,
                    manifest.count()
                )));
            }
            Ok(MultiSpectralImage::new(raster, manifest, sample_id))
        }
        SampleFormat::U16 => Ok(normalize(&raster, &manifest, mode, &sample_id)?.0),
    }
}

pub fn write_mask_tiff(path: &Path, mask: &SemanticMask) -> Result<()> {
    let mut out = create(path)?;
    {
        let mut enc = TiffEncoder::new(&mut out)?;
        enc.write_image::<colortype::Gray8>(mask.width as u32, mask.height as u32, &mask.labels)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_mask_tiff(path: &Path) -> Result<SemanticMask> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file))?;
    let (w, h) = dec.dimensions()?;
    match dec.read_image()? {
        DecodingResult::U8(labels) => SemanticMask::new(h as usize, w as usize, labels),
        _ => Err(Error::Shape(format!("{}: mask must be 8-bit", path.display()))),
    }
}

/// Binary portable graymap (P5).
pub fn write_mask_pgm(path: &Path, mask: &SemanticMask) -> Result<()> {
    let mut out = create(path)?;
    write!(out, "P5\n{} {}\n255\n", mask.width, mask.height).map_err(|e| Error::io(path, e))?;
    out.write_all(&mask.labels).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_mask_pgm(path: &Path) -> Result<SemanticMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::Shape(format!("{}: not a binary 8-bit PGM", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let labels = bytes.get(pos..pos + w * h).ok_or_else(bad)?.to_vec();
    SemanticMask::new(h, w, labels)
}

/// Dispatches on extension: `.pgm` or TIFF.
pub fn read_mask(path: &Path) -> Result<SemanticMask> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => read_mask_pgm(path),
        _ => read_mask_tiff(path),
    }
}

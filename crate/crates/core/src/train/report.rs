//! PNG figures: training curves, confusion heat map, per-class bars.
//!
//! Text needs a TrueType font. One is looked up at runtime (the
//! `SPECTRALEAF_FONT` variable, then common system paths); without it the
//! figures are skipped with a warning and the functions return `Ok(false)`.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::FontStyle;

use crate::error::{Error, Result};
use crate::spectral::{extract_rgb, ClassLabel, MultiSpectralImage, SemanticMask};
use crate::train::evaluate::MetricReport;
use crate::train::metrics::ConfusionMatrix;
use crate::train::trainer::History;

const FONT: &str = "sans-serif";

const FONT_PATHS: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

/// Registers a font once per process; false when none could be loaded.
pub fn font_available() -> bool {
    static LOADED: OnceLock<bool> = OnceLock::new();
    *LOADED.get_or_init(|| {
        let env = std::env::var_os("SPECTRALEAF_FONT").map(PathBuf::from);
        let candidates = env.into_iter().chain(FONT_PATHS.iter().map(PathBuf::from));
        for path in candidates {
            let Ok(bytes) = std::fs::read(&path) else {
                continue;
            };
            let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
            if plotters::style::register_font(FONT, FontStyle::Normal, bytes).is_ok() {
                log::debug!("plot font: {}", path.display());
                return true;
            }
        }
        log::warn!("no TrueType font found; set SPECTRALEAF_FONT to enable figures");
        false
    })
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

/// Six panels: box, seg and cls loss on top, precision, recall and mAP@0.5
/// below, each against epoch.
pub fn plot_history(history: &History, path: &Path) -> Result<bool> {
    if history.records.is_empty() {
        return Err(Error::InvalidArgument("history is empty".into()));
    }
    if !font_available() {
        return Ok(false);
    }
    ensure_parent(path)?;
    let root = BitMapBackend::new(path, (1500, 800)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let panels = root.split_evenly((2, 3));
    type Field = fn(&crate::train::trainer::EpochRecord) -> f64;
    let series: [(&str, Field); 6] = [
        ("box loss", |r| r.box_loss),
        ("seg loss", |r| r.seg_loss),
        ("cls loss", |r| r.cls_loss),
        ("precision", |r| r.precision),
        ("recall", |r| r.recall),
        ("mAP@0.5", |r| r.map50),
    ];
    let last = history.records.last().map_or(1, |r| r.epoch).max(2);
    for (area, (title, f)) in panels.iter().zip(series) {
        let pts: Vec<(f64, f64)> = history.records.iter().map(|r| (r.epoch as f64, f(r))).collect();
        let hi = pts.iter().map(|p| p.1).fold(f64::MIN, f64::max);
        let lo = pts.iter().map(|p| p.1).fold(f64::MAX, f64::min).min(0.0);
        let hi = if hi > lo { hi * 1.05 } else { lo + 1.0 };
        let mut chart = ChartBuilder::on(area)
            .caption(title, (FONT, 20))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(1f64..last as f64, lo..hi)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("epoch")
            .label_style((FONT, 12))
            .draw()
            .map_err(plot_err)?;
        chart
            .draw_series(LineSeries::new(pts, BLUE.stroke_width(2)))
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(true)
}

/// Column-normalized confusion matrix as a heat map with the fraction in
/// each cell; truth along x, prediction along y.
pub fn plot_confusion(cm: &ConfusionMatrix, path: &Path) -> Result<bool> {
    if !font_available() {
        return Ok(false);
    }
    ensure_parent(path)?;
    let norm = cm.normalized();
    let root = BitMapBackend::new(path, (720, 640)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let names: Vec<&str> = ClassLabel::ALL.iter().map(|c| c.name()).collect();
    let mut chart = ChartBuilder::on(&root)
        .caption("confusion (column-normalized)", (FONT, 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(150)
        .build_cartesian_2d(0i32..4, 0i32..4)
        .map_err(plot_err)?;
    let label = |v: &i32| names.get(*v as usize).map_or(String::new(), |s| s.to_string());
    chart
        .configure_mesh()
        .disable_mesh()
        .x_desc("true")
        .y_desc("predicted")
        .x_labels(4)
        .y_labels(4)
        .x_label_formatter(&label)
        .y_label_formatter(&label)
        .label_style((FONT, 13))
        .draw()
        .map_err(plot_err)?;
    let cells = (0..4).flat_map(|r| (0..4).map(move |c| (r, c)));
    chart
        .draw_series(cells.clone().map(|(r, c)| {
            let v = norm[r][c];
            let shade = (255.0 * (1.0 - v)).round() as u8;
            Rectangle::new(
                [(c as i32, r as i32), (c as i32 + 1, r as i32 + 1)],
                RGBColor(shade, shade, 255).filled(),
            )
        }))
        .map_err(plot_err)?;
    chart
        .draw_series(cells.map(|(r, c)| {
            let v = norm[r][c];
            let color = if v > 0.5 { WHITE } else { BLACK };
            Text::new(
                format!("{v:.2}"),
                (c as i32, r as i32 + 1),
                (FONT, 18).into_font().color(&color),
            )
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(true)
}

/// Grouped bars of per-class IoU and Dice for one or more named reports.
pub fn plot_metric_bars(reports: &[(&str, &MetricReport)], path: &Path) -> Result<bool> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to plot".into()));
    }
    if !font_available() {
        return Ok(false);
    }
    ensure_parent(path)?;
    let palette = [BLUE, RED, GREEN, MAGENTA, CYAN];
    let root = BitMapBackend::new(path, (1200, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let halves = root.split_evenly((1, 2));
    let n = reports.len() as f64;
    type Pick = fn(&MetricReport, usize) -> f64;
    let metrics: [(&str, Pick); 2] = [("IoU", |r, c| r.per_class[c].iou), ("Dice", |r, c| r.per_class[c].dice)];
    for (area, (title, pick)) in halves.iter().zip(metrics) {
        let mut chart = ChartBuilder::on(area)
            .caption(title, (FONT, 20))
            .margin(10)
            .x_label_area_size(40)
            .y_label_area_size(45)
            .build_cartesian_2d(0f64..4.0, 0f64..1.05)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(4)
            .x_label_formatter(&|v| {
                ClassLabel::ALL
                    .get(v.floor() as usize)
                    .map_or(String::new(), |c| c.name().to_string())
            })
            .label_style((FONT, 12))
            .draw()
            .map_err(plot_err)?;
        for (k, (name, report)) in reports.iter().enumerate() {
            let color = palette[k % palette.len()];
            chart
                .draw_series(ClassLabel::ALL.iter().map(|c| {
                    let x0 = c.index() as f64 + 0.1 + 0.8 * k as f64 / n;
                    let x1 = x0 + 0.8 / n;
                    Rectangle::new([(x0, 0.0), (x1, pick(report, c.index()))], color.filled())
                }))
                .map_err(plot_err)?
                .label(*name)
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .label_font((FONT, 13))
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(true)
}

/// Contour colour per class.
pub const CLASS_COLORS: [[u8; 3]; 4] = [[40, 200, 60], [255, 220, 0], [220, 0, 220], [255, 40, 40]];

/// RGB projection of an image (620/530/470 nm for 9 bands), stretched so
/// the brightest value maps to white.
pub fn rgb_projection(img: &MultiSpectralImage) -> Result<image::RgbImage> {
    let rgb = if img.channels() == 3 { img.clone() } else { extract_rgb(img)? };
    let p = &rgb.pixels;
    let peak = p.data.iter().copied().fold(0.0f32, f32::max).max(1e-6);
    Ok(image::RgbImage::from_fn(p.width as u32, p.height as u32, |x, y| {
        let v = |c| (255.0 * p.get(c, y as usize, x as usize) / peak).round().clamp(0.0, 255.0) as u8;
        image::Rgb([v(0), v(1), v(2)])
    }))
}

/// Paints class-coloured contours of `mask` onto `base`: a labelled pixel
/// is on a contour when a 4-neighbour has a different label or lies
/// outside the frame.
pub fn draw_contours(base: &mut image::RgbImage, mask: &SemanticMask) -> Result<()> {
    let (h, w) = (mask.height, mask.width);
    if (base.height() as usize, base.width() as usize) != (h, w) {
        return Err(Error::Shape(format!(
            "overlay {}x{} does not match mask {h}x{w}",
            base.height(),
            base.width()
        )));
    }
    for y in 0..h {
        for x in 0..w {
            let l = mask.get(y, x);
            let Some(class) = ClassLabel::from_code(l) else {
                continue;
            };
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)]
                    .iter()
                    .any(|&(ny, nx)| mask.get(ny, nx) != l);
            if edge {
                base.put_pixel(x as u32, y as u32, image::Rgb(CLASS_COLORS[class.index()]));
            }
        }
    }
    Ok(())
}

/// RGB projection with the contours of `mask`.
pub fn overlay(img: &MultiSpectralImage, mask: &SemanticMask) -> Result<image::RgbImage> {
    let mut base = rgb_projection(img)?;
    draw_contours(&mut base, mask)?;
    Ok(base)
}

/// Panels side by side, separated by a 4 px white gutter.
pub fn side_by_side(panels: &[image::RgbImage]) -> Result<image::RgbImage> {
    const GUTTER: u32 = 4;
    let Some(first) = panels.first() else {
        return Err(Error::InvalidArgument("no panels".into()));
    };
    let h = first.height();
    if panels.iter().any(|p| p.height() != h) {
        return Err(Error::Shape("panels differ in height".into()));
    }
    let w = panels.iter().map(|p| p.width()).sum::<u32>() + GUTTER * (panels.len() as u32 - 1);
    let mut out = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
    let mut x0 = 0;
    for p in panels {
        image::imageops::replace(&mut out, p, x0 as i64, 0);
        x0 += p.width() + GUTTER;
    }
    Ok(out)
}

//! Polygon annotations: LabelMe ingestion, rasterization, semantic mask
//! assembly, dataset splits and per-class statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::spectral::{ClassLabel, SemanticMask, BACKGROUND};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonAnnotation {
    pub label: ClassLabel,
    /// Vertices in pixel coordinates, `(x, y)`.
    pub points: Vec<(f64, f64)>,
}

impl PolygonAnnotation {
    pub fn new(label: ClassLabel, points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::Annotation(format!(
                "{label} polygon has {} points, need at least 3",
                points.len()
            )));
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::Annotation(format!("{label} polygon has non-finite vertex")));
        }
        Ok(Self { label, points })
    }

    /// Shoelace area.
    pub fn area(&self) -> f64 {
        let n = self.points.len();
        let twice: f64 = (0..n)
            .map(|i| {
                let (x0, y0) = self.points[i];
                let (x1, y1) = self.points[(i + 1) % n];
                x0 * y1 - x1 * y0
            })
            .sum();
        twice.abs() / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub sample_id: String,
    /// `(height, width)`
    pub image_size: (usize, usize),
    pub polygons: Vec<PolygonAnnotation>,
    /// Shapes that were not polygons and were dropped while parsing.
    #[serde(default)]
    pub skipped_shapes: usize,
}

impl AnnotationSet {
    pub fn new(sample_id: impl Into<String>, height: usize, width: usize) -> Self {
        Self {
            sample_id: sample_id.into(),
            image_size: (height, width),
            polygons: Vec::new(),
            skipped_shapes: 0,
        }
    }

    /// LabelMe-compatible JSON document.
    pub fn to_labelme(&self, image_path: &str) -> String {
        let shapes: Vec<Value> = self
            .polygons
            .iter()
            .map(|p| {
                serde_json::json!({
                    "label": p.label.name(),
                    "points": p.points.iter().map(|&(x, y)| [x, y]).collect::<Vec<_>>(),
                    "group_id": null,
                    "shape_type": "polygon",
                    "flags": {},
                })
            })
            .collect();
        let doc = serde_json::json!({
            "version": "5.2.1",
            "flags": {},
            "shapes": shapes,
            "imagePath": image_path,
            "imageData": null,
            "imageHeight": self.image_size.0,
            "imageWidth": self.image_size.1,
        });
        serde_json::to_string_pretty(&doc).expect("json values always serialize")
    }
}

/// Parses a LabelMe document. `sample_id` falls back to the stem of
/// `imagePath` when `None`.
pub fn parse_labelme(document: &str, sample_id: Option<&str>) -> Result<AnnotationSet> {
    let doc: Value = serde_json::from_str(document)?;
    let dim = |key: &str| -> Result<usize> {
        doc.get(key)
            .and_then(Value::as_u64)
            .filter(|&v| v > 0)
            .map(|v| v as usize)
            .ok_or_else(|| Error::Annotation(format!("missing or invalid `{key}`")))
    };
    let height = dim("imageHeight")?;
    let width = dim("imageWidth")?;
    let shapes = doc
        .get("shapes")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Annotation("missing `shapes` array".into()))?;
    let sample_id = match sample_id {
        Some(id) => id.to_string(),
        None => doc
            .get("imagePath")
            .and_then(Value::as_str)
            .map(|p| {
                let name = p.rsplit(['/', '\\']).next().unwrap_or(p);
                name.rsplit_once('.').map_or(name, |(stem, _)| stem).to_string()
            })
            .unwrap_or_default(),
    };

    let mut set = AnnotationSet::new(sample_id, height, width);
    for (i, shape) in shapes.iter().enumerate() {
        let kind = shape
            .get("shape_type")
            .and_then(Value::as_str)
            .unwrap_or("polygon");
        if kind != "polygon" {
            set.skipped_shapes += 1;
            continue;
        }
        let label_text = shape
            .get("label")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Annotation(format!("shape {i} has no label")))?;
        let label: ClassLabel = label_text.parse()?;
        let points = shape
            .get("points")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Annotation(format!("shape {i} has no points")))?
            .iter()
            .map(|p| match p.as_array().map(Vec::as_slice) {
                Some([x, y]) => match (x.as_f64(), y.as_f64()) {
                    (Some(x), Some(y)) => Ok((x, y)),
                    _ => Err(Error::Annotation(format!("shape {i}: non-numeric point"))),
                },
                _ => Err(Error::Annotation(format!("shape {i}: point is not [x, y]"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some((x, y)) = points
            .iter()
            .find(|(x, y)| *x < 0.0 || *y < 0.0 || *x > width as f64 || *y > height as f64)
        {
            return Err(Error::Annotation(format!(
                "shape {i}: point ({x}, {y}) outside {width}x{height} image"
            )));
        }
        set.polygons.push(PolygonAnnotation::new(label, points)?);
    }
    if set.skipped_shapes > 0 {
        log::warn!(
            "{}: skipped {} non-polygon shapes",
            set.sample_id,
            set.skipped_shapes
        );
    }
    Ok(set)
}

/// Even-odd fill sampled at pixel centers `(c + 0.5, r + 0.5)`.
///
/// A center lying exactly on a left/bottom-facing edge counts as inside and
/// one on a right/top-facing edge as outside, so abutting polygons never
/// share a pixel.
pub fn rasterize_polygon(poly: &PolygonAnnotation, height: usize, width: usize) -> Vec<bool> {
    let mut mask = vec![false; height * width];
    let n = poly.points.len();
    let mut crossings: Vec<f64> = Vec::with_capacity(n);
    let (ymin, ymax) = poly
        .points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.1), hi.max(p.1))
        });
    let r0 = (ymin - 0.5).ceil().max(0.0) as usize;
    let r1 = ((ymax - 0.5).floor() + 1.0).clamp(0.0, height as f64) as usize;
    for r in r0..r1 {
        let y = r as f64 + 0.5;
        crossings.clear();
        for i in 0..n {
            let (x0, y0) = poly.points[i];
            let (x1, y1) = poly.points[(i + 1) % n];
            if (y0 <= y && y < y1) || (y1 <= y && y < y0) {
                crossings.push(x0 + (y - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        crossings.sort_by(f64::total_cmp);
        let row = &mut mask[r * width..(r + 1) * width];
        for span in crossings.chunks_exact(2) {
            // centers with xa <= c + 0.5 < xb
            let c0 = (span[0] - 0.5).ceil().max(0.0) as usize;
            let c1 = (span[1] - 0.5).ceil().clamp(0.0, width as f64) as usize;
            for px in row.iter_mut().take(c1).skip(c0) {
                *px = !*px;
            }
        }
    }
    mask
}

/// Paints polygons in file order. Later polygons overwrite earlier ones,
/// except that `Normal` never overwrites a defect class.
pub fn build_semantic_mask(ann: &AnnotationSet) -> SemanticMask {
    let (h, w) = ann.image_size;
    let mut mask = SemanticMask::background(h, w);
    for poly in &ann.polygons {
        let fill = rasterize_polygon(poly, h, w);
        for (dst, inside) in mask.labels.iter_mut().zip(fill) {
            if !inside {
                continue;
            }
            let keeps_defect = poly.label == ClassLabel::Normal
                && ClassLabel::from_code(*dst).is_some_and(ClassLabel::is_defect);
            if !keeps_defect {
                *dst = poly.label.code();
            }
        }
    }
    mask
}

/// Per-polygon instance masks restricted to the pixels that kept the
/// polygon's class after overlap resolution. Empty instances are dropped.
pub fn instance_masks(ann: &AnnotationSet, semantic: &SemanticMask) -> Vec<(ClassLabel, Vec<bool>)> {
    let (h, w) = ann.image_size;
    ann.polygons
        .iter()
        .filter_map(|poly| {
            let mut fill = rasterize_polygon(poly, h, w);
            for (px, &l) in fill.iter_mut().zip(&semantic.labels) {
                *px &= l == poly.label.code();
            }
            fill.iter().any(|&b| b).then_some((poly.label, fill))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub seed: u64,
}

pub const DEFAULT_VAL_FRACTION: f64 = 0.1;

/// Seeded shuffle; the first `round(val_fraction * n)` ids become validation.
pub fn split_dataset(ids: &[String], val_fraction: f64, seed: u64) -> Result<SplitAssignment> {
    if ids.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples to split, got {}",
            ids.len()
        )));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction {val_fraction} not in [0, 1)"
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (val_fraction * ids.len() as f64).round() as usize;
    let train_ids = shuffled.split_off(n_val);
    Ok(SplitAssignment {
        train_ids,
        val_ids: shuffled,
        seed,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassStats {
    pub instances: usize,
    pub pixel_area: usize,
}

/// Instance counts and painted pixel areas per class over a dataset.
pub fn class_statistics<'a>(
    items: impl IntoIterator<Item = (&'a AnnotationSet, &'a SemanticMask)>,
) -> BTreeMap<ClassLabel, ClassStats> {
    let mut stats: BTreeMap<ClassLabel, ClassStats> =
        ClassLabel::ALL.iter().map(|&c| (c, ClassStats::default())).collect();
    for (ann, mask) in items {
        for poly in &ann.polygons {
            stats.entry(poly.label).or_default().instances += 1;
        }
        for (class, count) in ClassLabel::ALL.iter().zip(mask.class_counts()) {
            stats.entry(*class).or_default().pixel_area += count;
        }
    }
    stats
}

/// `class,instances,pixel_area`
pub fn class_statistics_csv(stats: &BTreeMap<ClassLabel, ClassStats>) -> String {
    let mut out = String::from("class,instances,pixel_area\n");
    for (class, s) in stats {
        let _ = writeln!(out, "{},{},{}", class.name(), s.instances, s.pixel_area);
    }
    out
}

/// Pixels that are not background in a mask.
pub fn labeled_pixels(mask: &SemanticMask) -> usize {
    mask.labels.iter().filter(|&&l| l != BACKGROUND).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Crossing-number test, independent of the scanline rasterizer.
    fn point_in_polygon(pts: &[(f64, f64)], x: f64, y: f64) -> bool {
        let mut inside = false;
        let mut j = pts.len() - 1;
        for i in 0..pts.len() {
            let (xi, yi) = pts[i];
            let (xj, yj) = pts[j];
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    fn oracle_mask(pts: &[(f64, f64)], h: usize, w: usize) -> Vec<bool> {
        (0..h * w)
            .map(|i| point_in_polygon(pts, (i % w) as f64 + 0.5, (i / w) as f64 + 0.5))
            .collect()
    }

    fn poly(label: ClassLabel, pts: &[(f64, f64)]) -> PolygonAnnotation {
        PolygonAnnotation::new(label, pts.to_vec()).unwrap()
    }

    #[test]
    fn square_on_8x8_covers_16_centers() {
        let pts = [(1.0, 1.0), (5.0, 1.0), (5.0, 5.0), (1.0, 5.0)];
        let m = rasterize_polygon(&poly(ClassLabel::Tipburn, &pts), 8, 8);
        assert_eq!(m, oracle_mask(&pts, 8, 8));
        assert_eq!(m.iter().filter(|&&b| b).count(), 16);
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(m[r * 8 + c], (1..5).contains(&r) && (1..5).contains(&c));
            }
        }
    }

    #[test]
    fn collinear_polygon_is_empty() {
        let pts = [(0.0, 0.0), (3.0, 3.0), (6.0, 6.0)];
        let m = rasterize_polygon(&poly(ClassLabel::Normal, &pts), 8, 8);
        assert!(m.iter().all(|&b| !b));
    }

    #[test]
    fn full_frame_polygon_covers_everything() {
        let (h, w) = (7, 11);
        let pts = [(0.0, 0.0), (w as f64, 0.0), (w as f64, h as f64), (0.0, h as f64)];
        let m = rasterize_polygon(&poly(ClassLabel::Normal, &pts), h, w);
        assert!(m.iter().all(|&b| b));
    }

    #[test]
    fn self_intersecting_uses_even_odd() {
        // pentagram: the center pentagon is outside under even-odd
        let pts: Vec<(f64, f64)> = (0..5)
            .map(|k| {
                let a = std::f64::consts::PI * (0.5 + 0.8 * k as f64);
                (20.0 + 15.0 * a.cos(), 20.0 - 15.0 * a.sin())
            })
            .collect();
        let m = rasterize_polygon(&poly(ClassLabel::Chlorosis, &pts), 40, 40);
        assert_eq!(m, oracle_mask(&pts, 40, 40));
        assert!(!m[20 * 40 + 20]);
    }

    const GOLDEN: &str = r#"{
      "version": "5.2.1",
      "flags": {},
      "shapes": [
        {"label": "tipburn", "points": [[2, 2], [6, 2], [6, 6], [2, 6]], "group_id": null, "shape_type": "polygon", "flags": {}},
        {"label": "Normal", "points": [[0, 0], [10, 0], [10, 8], [0, 8]], "shape_type": "polygon"},
        {"label": "chlorosis", "points": [[1, 1], [3, 3]], "shape_type": "rectangle"}
      ],
      "imagePath": "plates/plate_007.tif",
      "imageData": null,
      "imageHeight": 8,
      "imageWidth": 10
    }"#;

    #[test]
    fn parse_golden_document() {
        let set = parse_labelme(GOLDEN, None).unwrap();
        assert_eq!(set.sample_id, "plate_007");
        assert_eq!(set.image_size, (8, 10));
        assert_eq!(set.skipped_shapes, 1);
        assert_eq!(set.polygons.len(), 2);
        assert_eq!(set.polygons[0].label, ClassLabel::Tipburn);
        assert_eq!(set.polygons[0].points.len(), 4);
        assert_eq!(set.polygons[1].label, ClassLabel::Normal);
    }

    #[test]
    fn zero_shapes_is_empty_set() {
        let doc = r#"{"shapes": [], "imageHeight": 4, "imageWidth": 4}"#;
        let set = parse_labelme(doc, Some("x")).unwrap();
        assert!(set.polygons.is_empty());
    }

    #[test]
    fn unknown_label_is_named() {
        let doc = r#"{"shapes": [{"label": "rust", "points": [[0,0],[1,0],[1,1]], "shape_type": "polygon"}],
                      "imageHeight": 4, "imageWidth": 4}"#;
        match parse_labelme(doc, None) {
            Err(Error::UnknownLabel(l)) => assert_eq!(l, "rust"),
            other => panic!("expected unknown label, got {other:?}"),
        }
    }

    #[test]
    fn missing_dimensions_rejected() {
        assert!(parse_labelme(r#"{"shapes": []}"#, None).is_err());
        assert!(parse_labelme("not json", None).is_err());
    }

    #[test]
    fn labelme_writer_round_trips() {
        let set = parse_labelme(GOLDEN, None).unwrap();
        let text = set.to_labelme("plate_007.tif");
        let mut back = parse_labelme(&text, None).unwrap();
        back.skipped_shapes = set.skipped_shapes;
        assert_eq!(back, set);
    }

    #[test]
    fn tipburn_polygon_paints_only_its_pixels() {
        let mut set = AnnotationSet::new("s", 640, 640);
        // 5 x 2 rectangle of pixel centers
        set.polygons.push(poly(
            ClassLabel::Tipburn,
            &[(100.0, 200.0), (105.0, 200.0), (105.0, 202.0), (100.0, 202.0)],
        ));
        let m = build_semantic_mask(&set);
        assert_eq!(m.class_counts(), [0, 0, 0, 10]);
        assert_eq!(
            m.labels.iter().filter(|&&l| l == BACKGROUND).count(),
            640 * 640 - 10
        );
    }

    #[test]
    fn normal_never_overwrites_defect() {
        let mut set = AnnotationSet::new("s", 10, 10);
        set.polygons.push(poly(
            ClassLabel::Chlorosis,
            &[(2.0, 2.0), (5.0, 2.0), (5.0, 5.0), (2.0, 5.0)],
        ));
        set.polygons.push(poly(
            ClassLabel::Normal,
            &[(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)],
        ));
        let m = build_semantic_mask(&set);
        assert_eq!(m.class_counts(), [91, 9, 0, 0]);
        assert_eq!(m.get(3, 3), 1);
    }

    #[test]
    fn later_defect_wins_over_earlier_defect() {
        let mut set = AnnotationSet::new("s", 10, 10);
        set.polygons.push(poly(
            ClassLabel::Chlorosis,
            &[(0.0, 0.0), (6.0, 0.0), (6.0, 6.0), (0.0, 6.0)],
        ));
        set.polygons.push(poly(
            ClassLabel::Tipburn,
            &[(3.0, 3.0), (9.0, 3.0), (9.0, 9.0), (3.0, 9.0)],
        ));
        let m = build_semantic_mask(&set);
        assert_eq!(m.get(4, 4), ClassLabel::Tipburn.code());
        assert_eq!(m.class_counts(), [0, 36 - 9, 0, 36]);
    }

    #[test]
    fn disjoint_polygons_match_rasterized_counts() {
        let a = poly(ClassLabel::Chlorosis, &[(1.2, 1.7), (8.3, 2.1), (4.4, 9.6)]);
        let b = poly(
            ClassLabel::PigmentAccumulation,
            &[(12.0, 12.0), (19.5, 13.0), (18.0, 19.0), (11.0, 18.2)],
        );
        let mut set = AnnotationSet::new("s", 24, 24);
        set.polygons = vec![a.clone(), b.clone()];
        let m = build_semantic_mask(&set);
        let na = rasterize_polygon(&a, 24, 24).iter().filter(|&&x| x).count();
        let nb = rasterize_polygon(&b, 24, 24).iter().filter(|&&x| x).count();
        assert_eq!(m.class_counts(), [0, na, nb, 0]);
        let codes: std::collections::BTreeSet<u8> = m.labels.iter().copied().collect();
        assert_eq!(codes, [1, 2, 255].into_iter().collect());
    }

    #[test]
    fn split_160_gives_144_16() {
        let ids: Vec<String> = (0..160).map(|i| format!("p{i:03}")).collect();
        let s = split_dataset(&ids, 0.1, 7).unwrap();
        assert_eq!((s.train_ids.len(), s.val_ids.len()), (144, 16));
        assert_eq!(s, split_dataset(&ids, 0.1, 7).unwrap());
    }

    #[test]
    fn split_depends_on_seed() {
        let ids: Vec<String> = (0..10).map(|i| i.to_string()).collect();
        let a = split_dataset(&ids, 0.1, 0).unwrap();
        let b = split_dataset(&ids, 0.1, 1).unwrap();
        assert_ne!(a.val_ids, b.val_ids);
    }

    #[test]
    fn split_rejects_tiny_input() {
        assert!(split_dataset(&["a".to_string()], 0.1, 0).is_err());
    }

    #[test]
    fn statistics_csv_layout() {
        let set = parse_labelme(GOLDEN, None).unwrap();
        let mask = build_semantic_mask(&set);
        let stats = class_statistics([(&set, &mask)]);
        let csv = class_statistics_csv(&stats);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class,instances,pixel_area");
        assert_eq!(lines[1], "normal,1,64");
        assert_eq!(lines[4], "tipburn,1,16");
    }

    fn polygon_strategy() -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((0.0f64..32.0, 0.0f64..32.0), 3..9)
    }

    proptest! {
        #[test]
        fn rasterizer_matches_point_in_polygon(pts in polygon_strategy()) {
            let p = PolygonAnnotation::new(ClassLabel::Normal, pts.clone()).unwrap();
            prop_assert_eq!(rasterize_polygon(&p, 32, 32), oracle_mask(&pts, 32, 32));
        }

        #[test]
        fn painter_matches_brute_force(polys in prop::collection::vec((0u8..4, polygon_strategy()), 1..5)) {
            let mut set = AnnotationSet::new("p", 32, 32);
            for (code, pts) in &polys {
                set.polygons.push(PolygonAnnotation::new(ClassLabel::from_code(*code).unwrap(), pts.clone()).unwrap());
            }
            let m = build_semantic_mask(&set);
            for r in 0..32 {
                for c in 0..32 {
                    let mut expect = BACKGROUND;
                    for (code, pts) in &polys {
                        if point_in_polygon(pts, c as f64 + 0.5, r as f64 + 0.5)
                            && !(*code == 0 && expect != BACKGROUND && expect != 0)
                        {
                            expect = *code;
                        }
                    }
                    prop_assert_eq!(m.get(r, c), expect);
                }
            }
        }

        #[test]
        fn split_is_partition(n in 2usize..200, seed in any::<u64>()) {
            let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
            let s = split_dataset(&ids, 0.1, seed).unwrap();
            prop_assert_eq!(s.val_ids.len(), (0.1 * n as f64).round() as usize);
            let mut all: Vec<String> = s.train_ids.iter().chain(&s.val_ids).cloned().collect();
            all.sort();
            let mut expect = ids.clone();
            expect.sort();
            prop_assert_eq!(all, expect);
        }
    }
}

//! Turning raw network outputs into detections, instance masks and
//! semantic masks.

use candle_core::{DType, Tensor};

use super::config::{ModelConfig, STRIDES};
use super::network::ModelOutput;
use crate::error::Result;
use crate::spectral::{ClassLabel, SemanticMask, BACKGROUND};

/// Box corners `(x0, y0, x1, y1)` in input pixels.
pub type BBox = [f32; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class: ClassLabel,
    pub score: f32,
    pub bbox: BBox,
    pub coeffs: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub class: ClassLabel,
    pub score: f32,
    pub bbox: BBox,
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl Instance {
    /// Instance whose box is the tight pixel extent of `mask`.
    pub fn from_mask(class: ClassLabel, score: f32, height: usize, width: usize, mask: Vec<bool>) -> Self {
        let bbox = mask_bbox(&mask, width).unwrap_or([0.0; 4]);
        Self {
            class,
            score,
            bbox,
            height,
            width,
            mask,
        }
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Tight box around set pixels, with pixel `(x, y)` covering `[x, x+1)`.
pub fn mask_bbox(mask: &[bool], width: usize) -> Option<BBox> {
    let mut b = [f32::MAX, f32::MAX, f32::MIN, f32::MIN];
    let mut any = false;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = ((i % width) as f32, (i / width) as f32);
        b = [b[0].min(x), b[1].min(y), b[2].max(x + 1.0), b[3].max(y + 1.0)];
        any = true;
    }
    any.then_some(b)
}

pub fn box_iou(a: &BBox, b: &BBox) -> f32 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &BBox| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Decodes every anchor of batch item `b` and keeps those scoring at least
/// `conf_thresh`. Score is objectness times the best class probability.
pub fn decode_detections(
    out: &ModelOutput,
    cfg: &ModelConfig,
    b: usize,
    conf_thresh: f32,
) -> Result<Vec<Detection>> {
    let nc = cfg.n_classes;
    let mut dets = Vec::new();
    for (scale, det) in out.detections.iter().enumerate() {
        let (_, na, gh, gw, no) = det.dims5()?;
        let vals = det.get(b)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let stride = STRIDES[scale] as f32;
        for a in 0..na {
            let (aw, ah) = cfg.anchors[scale][a];
            for gy in 0..gh {
                for gx in 0..gw {
                    let p = &vals[((a * gh + gy) * gw + gx) * no..][..no];
                    let obj = sigmoid(p[4]);
                    let (ci, cls) = p[5..5 + nc]
                        .iter()
                        .enumerate()
                        .fold((0, f32::MIN), |m, (i, &v)| if v > m.1 { (i, v) } else { m });
                    let score = obj * sigmoid(cls);
                    if score < conf_thresh {
                        continue;
                    }
                    let cx = (2.0 * sigmoid(p[0]) - 0.5 + gx as f32) * stride;
                    let cy = (2.0 * sigmoid(p[1]) - 0.5 + gy as f32) * stride;
                    let w = (2.0 * sigmoid(p[2])).powi(2) * aw as f32;
                    let h = (2.0 * sigmoid(p[3])).powi(2) * ah as f32;
                    dets.push(Detection {
                        class: ClassLabel::ALL[ci],
                        score,
                        bbox: [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0],
                        coeffs: p[5 + nc..].to_vec(),
                    });
                }
            }
        }
    }
    Ok(dets)
}

/// Greedy per-class non-maximum suppression. Output sorted by descending
/// score; equal scores keep their input order.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f32) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        let suppressed = keep
            .iter()
            .any(|k| k.class == d.class && box_iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            keep.push(d);
        }
    }
    keep
}

/// Builds a full-resolution mask from prototype planes `[nm, ph, pw]`:
/// each pixel takes the nearest prototype cell, is set where the
/// coefficient-weighted sum is positive (sigmoid above 0.5), and is cleared
/// outside the box.
pub fn compose_mask(
    protos: &[f32],
    ph: usize,
    pw: usize,
    coeffs: &[f32],
    bbox: &BBox,
    height: usize,
    width: usize,
) -> Vec<bool> {
    let plane = ph * pw;
    let logits: Vec<f32> = (0..plane)
        .map(|i| coeffs.iter().enumerate().map(|(k, c)| c * protos[k * plane + i]).sum())
        .collect();
    let mut mask = vec![false; height * width];
    for y in 0..height {
        let cy = y as f32 + 0.5;
        if cy < bbox[1] || cy >= bbox[3] {
            continue;
        }
        let py = y * ph / height;
        for x in 0..width {
            let cx = x as f32 + 0.5;
            if cx < bbox[0] || cx >= bbox[2] {
                continue;
            }
            mask[y * width + x] = logits[py * pw + x * pw / width] > 0.0;
        }
    }
    mask
}

/// Thresholded, suppressed and mask-composed detections for batch item `b`.
pub fn compose_instance_masks(
    out: &ModelOutput,
    cfg: &ModelConfig,
    b: usize,
    conf_thresh: f32,
    nms_iou: f32,
) -> Result<Vec<Instance>> {
    let dets = nms(decode_detections(out, cfg, b, conf_thresh)?, nms_iou);
    instances_from_detections(out, b, dets)
}

/// Composes the mask of each detection of batch item `b`.
pub fn instances_from_detections(out: &ModelOutput, b: usize, dets: Vec<Detection>) -> Result<Vec<Instance>> {
    if dets.is_empty() {
        return Ok(Vec::new());
    }
    let (_, _, ph, pw) = out.prototypes.dims4()?;
    let (_, _, h, w) = out.semantic.dims4()?;
    let protos = out
        .prototypes
        .get(b)?
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    Ok(dets
        .into_iter()
        .map(|d| Instance {
            mask: compose_mask(&protos, ph, pw, &d.coeffs, &d.bbox, h, w),
            class: d.class,
            score: d.score,
            bbox: d.bbox,
            height: h,
            width: w,
        })
        .collect())
}

/// Each pixel takes the class of the highest-scoring instance covering it;
/// uncovered pixels are background.
pub fn semantic_from_instances(instances: &[Instance], height: usize, width: usize) -> SemanticMask {
    let mut labels = vec![BACKGROUND; height * width];
    let mut best = vec![f32::NEG_INFINITY; height * width];
    for inst in instances {
        for (i, _) in inst.mask.iter().enumerate().filter(|(_, &m)| m) {
            if inst.score > best[i] {
                best[i] = inst.score;
                labels[i] = inst.class.code();
            }
        }
    }
    SemanticMask {
        height,
        width,
        labels,
    }
}

/// Per-pixel decision from the semantic logits of batch item `b`: the arg-max
/// class when its probability reaches `threshold`, background otherwise.
pub fn semantic_prediction(out: &ModelOutput, b: usize, threshold: f32) -> Result<SemanticMask> {
    semantic_from_logits(&out.semantic.get(b)?, threshold)
}

/// Same decision rule on a `[4, H, W]` logit tensor.
pub fn semantic_from_logits(logits: &Tensor, threshold: f32) -> Result<SemanticMask> {
    let (nc, h, w) = logits.dims3()?;
    let v = logits.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let plane = h * w;
    let labels = (0..plane)
        .map(|i| {
            let (c, best) = (0..nc)
                .map(|c| (c, v[c * plane + i]))
                .fold((0, f32::MIN), |m, cur| if cur.1 > m.1 { cur } else { m });
            if sigmoid(best) >= threshold {
                ClassLabel::ALL[c].code()
            } else {
                BACKGROUND
            }
        })
        .collect();
    Ok(SemanticMask {
        height: h,
        width: w,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class: ClassLabel, score: f32, bbox: BBox) -> Detection {
        Detection {
            class,
            score,
            bbox,
            coeffs: vec![],
        }
    }

    #[test]
    fn nms_keeps_best_of_duplicates() {
        let b = [0.0, 0.0, 10.0, 10.0];
        let kept = nms(
            vec![det(ClassLabel::Chlorosis, 0.8, b), det(ClassLabel::Chlorosis, 0.9, b)],
            0.5,
        );
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        let kept = nms(
            vec![det(ClassLabel::Chlorosis, 0.8, b), det(ClassLabel::Tipburn, 0.9, b)],
            0.5,
        );
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn box_iou_cases() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &[2.0, 2.0, 3.0, 3.0]), 0.0);
        assert!((box_iou(&a, &[1.0, 0.0, 3.0, 2.0]) - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn semantic_from_instances_rules() {
        let (h, w) = (3, 3);
        assert!(semantic_from_instances(&[], h, w).labels.iter().all(|&l| l == BACKGROUND));
        let full = Instance::from_mask(ClassLabel::Normal, 0.5, h, w, vec![true; 9]);
        assert!(semantic_from_instances(std::slice::from_ref(&full), h, w)
            .labels
            .iter()
            .all(|&l| l == 0));
        let mut a = vec![false; 9];
        let mut b = vec![false; 9];
        a[..6].iter_mut().for_each(|v| *v = true);
        b[3..].iter_mut().for_each(|v| *v = true);
        let chl = Instance::from_mask(ClassLabel::Chlorosis, 0.9, h, w, a);
        let pig = Instance::from_mask(ClassLabel::PigmentAccumulation, 0.7, h, w, b);
        let m = semantic_from_instances(&[pig, chl], h, w);
        assert_eq!(m.labels, vec![1, 1, 1, 1, 1, 1, 2, 2, 2]);
    }

    #[test]
    fn bbox_of_mask() {
        let mut m = vec![false; 12];
        m[5] = true;
        m[10] = true;
        assert_eq!(mask_bbox(&m, 4), Some([1.0, 1.0, 3.0, 3.0]));
        assert_eq!(mask_bbox(&[false; 4], 2), None);
    }
}

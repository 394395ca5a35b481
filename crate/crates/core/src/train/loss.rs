//! Training objective: CIoU box loss, objectness and class BCE, and mask
//! BCE on composed instance masks plus the semantic map.

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::output::{mask_bbox, BBox};
use crate::model::{ModelConfig, ModelOutput, STRIDES};
use crate::spectral::{ClassLabel, SemanticMask};

/// Anchors match a box when neither side ratio exceeds this factor.
const ANCHOR_RATIO: f64 = 4.0;
/// Objectness weight per scale, finest first.
const OBJ_BALANCE: [f64; 3] = [4.0, 1.0, 0.4];

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTarget {
    pub class: ClassLabel,
    pub bbox: BBox,
    pub mask: Vec<bool>,
}

/// Ground truth for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTargets {
    pub semantic: SemanticMask,
    pub instances: Vec<InstanceTarget>,
}

impl SampleTargets {
    pub fn new(semantic: SemanticMask, instances: &[(ClassLabel, Vec<bool>)]) -> Self {
        let w = semantic.width;
        let instances = instances
            .iter()
            .filter_map(|(class, mask)| {
                mask_bbox(mask, w).map(|bbox| InstanceTarget {
                    class: *class,
                    bbox,
                    mask: mask.clone(),
                })
            })
            .collect();
        Self { semantic, instances }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub box_: f64,
    pub seg: f64,
    pub cls: f64,
    pub obj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            box_: 0.05,
            seg: 1.0,
            cls: 0.5,
            obj: 1.0,
        }
    }
}

/// Loss terms as graph tensors plus their values.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Tensor,
    pub box_: f64,
    pub seg: f64,
    pub cls: f64,
    pub obj: f64,
}

/// Per-pixel weights for the semantic term, indexed by true class;
/// background pixels weigh 1.
pub type ClassWeights = [f64; 4];

/// Inverse pixel frequency, scaled so the most frequent class weighs 1.
pub fn inverse_frequency_weights(masks: &[&SemanticMask]) -> ClassWeights {
    let mut counts = [0usize; 4];
    for m in masks {
        for (c, n) in m.class_counts().into_iter().enumerate() {
            counts[c] += n;
        }
    }
    let max = *counts.iter().max().unwrap_or(&0) as f64;
    let mut w = [1.0; 4];
    for (wc, &n) in w.iter_mut().zip(&counts) {
        if n > 0 {
            *wc = max / n as f64;
        }
    }
    w
}

/// Elementwise arctangent with an exact derivative.
struct Atan;

impl CustomOp1 for Atan {
    fn name(&self) -> &'static str {
        "atan"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let Some((a, b)) = layout.contiguous_offsets() else {
            candle_core::bail!("atan needs a contiguous input")
        };
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(v[a..b].iter().map(|x| x.atan()).collect()),
            CpuStorage::F64(v) => CpuStorage::F64(v[a..b].iter().map(|x| x.atan()).collect()),
            _ => candle_core::bail!("atan supports f32 and f64"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.div(&(arg.sqr()? + 1.0)?)?))
    }
}

fn atan(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Atan)?)
}

/// Elementwise binary cross-entropy on logits.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let softplus_neg_abs = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((logits.relu()? - (logits * target)?)? + softplus_neg_abs)?)
}

/// Complete IoU of `[P, 4]` boxes given as `(cx, cy, w, h)`.
pub fn ciou(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let eps = 1e-7;
    let col = |t: &Tensor, i: usize| t.narrow(1, i, 1);
    let (px, py, pw, ph) = (col(pred, 0)?, col(pred, 1)?, col(pred, 2)?, col(pred, 3)?);
    let (tx, ty, tw, th) = (col(target, 0)?, col(target, 1)?, col(target, 2)?, col(target, 3)?);
    let half = |c: &Tensor, s: &Tensor, sign: f64| -> Result<Tensor> { Ok((c + (s * (0.5 * sign))?)?) };
    let (px0, px1, py0, py1) = (half(&px, &pw, -1.0)?, half(&px, &pw, 1.0)?, half(&py, &ph, -1.0)?, half(&py, &ph, 1.0)?);
    let (tx0, tx1, ty0, ty1) = (half(&tx, &tw, -1.0)?, half(&tx, &tw, 1.0)?, half(&ty, &th, -1.0)?, half(&ty, &th, 1.0)?);
    let iw = (px1.minimum(&tx1)? - px0.maximum(&tx0)?)?.relu()?;
    let ih = (py1.minimum(&ty1)? - py0.maximum(&ty0)?)?.relu()?;
    let inter = (iw * ih)?;
    let union = ((((&pw * &ph)? + (&tw * &th)?)? - &inter)? + eps)?;
    let iou = (&inter / &union)?;
    let cw = (px1.maximum(&tx1)? - px0.minimum(&tx0)?)?;
    let chh = (py1.maximum(&ty1)? - py0.minimum(&ty0)?)?;
    let c2 = ((cw.sqr()? + chh.sqr()?)? + eps)?;
    let rho2 = ((&px - &tx)?.sqr()? + (&py - &ty)?.sqr()?)?;
    let v = ((atan(&(&tw / (&th + eps)?)?)? - atan(&(&pw / (&ph + eps)?)?)?)?.sqr()?
        * (4.0 / std::f64::consts::PI.powi(2)))?;
    let alpha = (&v / (((&v - &iou)? + 1.0)? + eps)?)?;
    Ok(((iou - (rho2 / c2)?)? - (v * alpha)?)?.squeeze(1)?)
}

/// An anchor cell responsible for a ground-truth instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Positive {
    pub image: usize,
    pub anchor: usize,
    pub gy: usize,
    pub gx: usize,
    pub instance: usize,
    pub class: ClassLabel,
    /// Box in grid units with the centre relative to the cell corner.
    pub tbox: [f64; 4],
}

/// Anchor assignment for one scale: every anchor whose shape is within a
/// factor of 4 of the box claims the centre cell and the two neighbouring
/// cells nearest the centre.
pub fn build_targets(
    cfg: &ModelConfig,
    scale: usize,
    grid: (usize, usize),
    targets: &[SampleTargets],
) -> Vec<Positive> {
    let stride = STRIDES[scale] as f64;
    let (gh, gw) = grid;
    let mut out = Vec::new();
    for (image, t) in targets.iter().enumerate() {
        for (instance, inst) in t.instances.iter().enumerate() {
            let b = inst.bbox;
            let gx = (b[0] + b[2]) as f64 / 2.0 / stride;
            let gy = (b[1] + b[3]) as f64 / 2.0 / stride;
            let w = (b[2] - b[0]) as f64 / stride;
            let h = (b[3] - b[1]) as f64 / stride;
            for (anchor, &(aw, ah)) in cfg.anchors[scale].iter().enumerate() {
                let (rw, rh) = (w / (aw / stride), h / (ah / stride));
                if rw.max(1.0 / rw).max(rh.max(1.0 / rh)) >= ANCHOR_RATIO {
                    continue;
                }
                let cx = (gx.floor() as usize).min(gw - 1);
                let cy = (gy.floor() as usize).min(gh - 1);
                let mut cells = vec![(cx, cy)];
                let (fx, fy) = (gx - gx.floor(), gy - gy.floor());
                if fx < 0.5 && cx > 0 {
                    cells.push((cx - 1, cy));
                } else if fx > 0.5 && cx + 1 < gw {
                    cells.push((cx + 1, cy));
                }
                if fy < 0.5 && cy > 0 {
                    cells.push((cx, cy - 1));
                } else if fy > 0.5 && cy + 1 < gh {
                    cells.push((cx, cy + 1));
                }
                for (x, y) in cells {
                    out.push(Positive {
                        image,
                        anchor,
                        gy: y,
                        gx: x,
                        instance,
                        class: inst.class,
                        tbox: [gx - x as f64, gy - y as f64, w, h],
                    });
                }
            }
        }
    }
    out
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_finite(v: f64, component: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss { component })
    }
}

/// Ground-truth mask sampled at prototype resolution (cell-centre pixel) and
/// the box crop at the same resolution.
fn proto_targets(inst: &InstanceTarget, h: usize, w: usize, ph: usize, pw: usize) -> (Vec<f64>, Vec<f64>) {
    let mut target = vec![0.0; ph * pw];
    let mut crop = vec![0.0; ph * pw];
    let (sy, sx) = (h / ph, w / pw);
    for py in 0..ph {
        for px in 0..pw {
            let (y, x) = (py * sy + sy / 2, px * sx + sx / 2);
            target[py * pw + px] = inst.mask[y * w + x] as u8 as f64;
            let (cy, cx) = ((py as f32 + 0.5) * sy as f32, (px as f32 + 0.5) * sx as f32);
            let b = inst.bbox;
            if cx >= b[0] && cx < b[2] && cy >= b[1] && cy < b[3] {
                crop[py * pw + px] = 1.0;
            }
        }
    }
    let n = crop.iter().sum::<f64>();
    if n == 0.0 {
        // Box smaller than a prototype cell: score the cell holding its centre.
        let b = inst.bbox;
        let py = ((((b[1] + b[3]) / 2.0) as usize) / sy).min(ph - 1);
        let px = ((((b[0] + b[2]) / 2.0) as usize) / sx).min(pw - 1);
        crop[py * pw + px] = 1.0;
    } else {
        crop.iter_mut().for_each(|c| *c /= n);
    }
    (target, crop)
}

fn semantic_targets(targets: &[SampleTargets], weights: Option<&ClassWeights>) -> (Vec<f64>, Vec<f64>) {
    let nc = ClassLabel::COUNT;
    let plane = targets[0].semantic.labels.len();
    let mut onehot = vec![0.0; targets.len() * nc * plane];
    let mut pix_w = vec![1.0; targets.len() * nc * plane];
    for (b, t) in targets.iter().enumerate() {
        for (i, &l) in t.semantic.labels.iter().enumerate() {
            if let Some(c) = ClassLabel::from_code(l) {
                onehot[(b * nc + c.index()) * plane + i] = 1.0;
                if let Some(w) = weights {
                    for k in 0..nc {
                        pix_w[(b * nc + k) * plane + i] = w[c.index()];
                    }
                }
            }
        }
    }
    (onehot, pix_w)
}

/// Mean over classes of `1 - (2 sum(p y) + 1) / (sum(p) + sum(y) + 1)`,
/// with `p` the sigmoid of `[B, C, H, W]` logits and sums taken over the
/// batch. Rare classes get the same say as common ones.
pub fn soft_dice(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let p = candle_nn::ops::sigmoid(logits)?.transpose(0, 1)?.flatten_from(1)?;
    let y = target.transpose(0, 1)?.flatten_from(1)?;
    let inter = (&p * &y)?.sum(1)?;
    let num = ((inter * 2.0)? + 1.0)?;
    let den = ((p.sum(1)? + y.sum(1)?)? + 1.0)?;
    Ok((1.0 - (num / den)?.mean_all()?)?)
}

/// Weighted loss over a batch.
pub fn total_loss(
    out: &ModelOutput,
    cfg: &ModelConfig,
    targets: &[SampleTargets],
    weights: &LossWeights,
    class_weights: Option<&ClassWeights>,
) -> Result<LossOutput> {
    let dev: &Device = out.semantic.device();
    let dtype = out.semantic.dtype();
    let (bsz, nc_sem, h, w) = out.semantic.dims4()?;
    if targets.len() != bsz {
        return Err(Error::InvalidArgument(format!(
            "{} targets for a batch of {bsz}",
            targets.len()
        )));
    }
    let nc = cfg.n_classes;
    let nm = cfg.mask_proto_channels;
    let (_, _, ph, pw) = out.prototypes.dims4()?;
    let protos = out.prototypes.reshape((bsz, nm, ph * pw))?;
    let zero = Tensor::zeros((), dtype, dev)?;

    let mut box_terms = Vec::new();
    let mut cls_terms = Vec::new();
    let mut seg_terms = Vec::new();
    let mut obj = zero.clone();
    for (scale, det) in out.detections.iter().enumerate() {
        let (_, na, gh, gw, no) = det.dims5()?;
        let cells = bsz * na * gh * gw;
        let flat = det.reshape((cells, no))?;
        let pos = build_targets(cfg, scale, (gh, gw), targets);

        let mut obj_t = vec![0.0f64; cells];
        for p in &pos {
            obj_t[((p.image * na + p.anchor) * gh + p.gy) * gw + p.gx] = 1.0;
        }
        let obj_t = Tensor::from_vec(obj_t, cells, dev)?.to_dtype(dtype)?;
        let obj_l = bce_with_logits(&flat.narrow(1, 4, 1)?.squeeze(1)?, &obj_t)?.mean_all()?;
        obj = (obj + (obj_l * OBJ_BALANCE[scale])?)?;

        if pos.is_empty() {
            continue;
        }
        let np = pos.len();
        let idx: Vec<u32> = pos
            .iter()
            .map(|p| (((p.image * na + p.anchor) * gh + p.gy) * gw + p.gx) as u32)
            .collect();
        let idx = Tensor::from_vec(idx, np, dev)?;
        let pred = flat.index_select(&idx, 0)?;

        let stride = STRIDES[scale] as f64;
        let anchors: Vec<f64> = pos
            .iter()
            .flat_map(|p| {
                let (aw, ah) = cfg.anchors[scale][p.anchor];
                [aw / stride, ah / stride]
            })
            .collect();
        let anchors = Tensor::from_vec(anchors, (np, 2), dev)?.to_dtype(dtype)?;
        let sig = candle_nn::ops::sigmoid(&pred.narrow(1, 0, 4)?)?;
        let pxy = ((sig.narrow(1, 0, 2)? * 2.0)? - 0.5)?;
        let pwh = (sig.narrow(1, 2, 2)? * 2.0)?.sqr()?.mul(&anchors)?;
        let pbox = Tensor::cat(&[pxy, pwh], 1)?;
        let tbox: Vec<f64> = pos.iter().flat_map(|p| p.tbox).collect();
        let tbox = Tensor::from_vec(tbox, (np, 4), dev)?.to_dtype(dtype)?;
        box_terms.push((ciou(&pbox, &tbox)?.affine(-1.0, 1.0))?.mean_all()?);

        let mut onehot = vec![0.0f64; np * nc];
        for (i, p) in pos.iter().enumerate() {
            onehot[i * nc + p.class.index()] = 1.0;
        }
        let onehot = Tensor::from_vec(onehot, (np, nc), dev)?.to_dtype(dtype)?;
        cls_terms.push(bce_with_logits(&pred.narrow(1, 5, nc)?, &onehot)?.mean_all()?);

        let coeffs = pred.narrow(1, 5 + nc, nm)?.unsqueeze(1)?;
        let img_idx = Tensor::from_vec(pos.iter().map(|p| p.image as u32).collect::<Vec<_>>(), np, dev)?;
        let pp = protos.index_select(&img_idx, 0)?;
        let mask_logits = coeffs.matmul(&pp)?.squeeze(1)?;
        let mut mt = Vec::with_capacity(np * ph * pw);
        let mut crop = Vec::with_capacity(np * ph * pw);
        for p in &pos {
            let (t, c) = proto_targets(&targets[p.image].instances[p.instance], h, w, ph, pw);
            mt.extend(t);
            crop.extend(c);
        }
        let mt = Tensor::from_vec(mt, (np, ph * pw), dev)?.to_dtype(dtype)?;
        let crop = Tensor::from_vec(crop, (np, ph * pw), dev)?.to_dtype(dtype)?;
        let per = (bce_with_logits(&mask_logits, &mt)? * crop)?.sum(D::Minus1)?;
        seg_terms.push(per.mean_all()?);
    }

    let mean_of = |terms: Vec<Tensor>| -> Result<Tensor> {
        if terms.is_empty() {
            return Ok(zero.clone());
        }
        let n = terms.len() as f64;
        Ok((Tensor::stack(&terms, 0)?.sum_all()? / n)?)
    };
    let box_l = mean_of(box_terms)?;
    let cls_l = mean_of(cls_terms)?;
    let seg_inst = mean_of(seg_terms)?;

    let (onehot, pix_w) = semantic_targets(targets, class_weights);
    let shape = (bsz, nc_sem, h, w);
    let onehot = Tensor::from_vec(onehot, shape, dev)?.to_dtype(dtype)?;
    let sem = bce_with_logits(&out.semantic, &onehot)?;
    let sem = match class_weights {
        None => sem.mean_all()?,
        Some(_) => {
            let total_w: f64 = pix_w.iter().sum();
            let pw_t = Tensor::from_vec(pix_w, shape, dev)?.to_dtype(dtype)?;
            ((sem * pw_t)?.sum_all()? / total_w)?
        }
    };
    let dice = soft_dice(&out.semantic, &onehot)?;
    let seg_l = ((seg_inst + sem)? + dice)?;

    let values = [
        check_finite(scalar(&box_l)?, "box")?,
        check_finite(scalar(&seg_l)?, "seg")?,
        check_finite(scalar(&cls_l)?, "cls")?,
        check_finite(scalar(&obj)?, "obj")?,
    ];
    let total = ((((box_l * weights.box_)? + (seg_l * weights.seg)?)? + (cls_l * weights.cls)?)?
        + (obj * weights.obj)?)?;
    Ok(LossOutput {
        total,
        box_: values[0],
        seg: values[1],
        cls: values[2],
        obj: values[3],
    })
}

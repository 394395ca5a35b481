//! Split-level evaluation and report tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::output::semantic_from_logits;
use crate::model::{decode_detections, instances_from_detections, nms, Instance, Model};
use crate::spectral::{ClassLabel, SemanticMask};
use crate::train::data::{batch_tensor, Sample};
use crate::train::metrics::{map50, round_half_even, ConfusionMatrix, PixelCounts};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

impl ClassMetrics {
    fn from_counts(c: &PixelCounts) -> Self {
        Self {
            iou: c.iou(),
            dice: c.dice(),
            precision: c.precision(),
            recall: c.recall(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_class: [ClassMetrics; 4],
    /// Unweighted average of the four class rows.
    pub mean: ClassMetrics,
    pub map50: f64,
    pub confusion: ConfusionMatrix,
}

impl MetricReport {
    /// Pixel metrics pool counts over the whole split; mAP uses the
    /// instance lists.
    pub fn from_predictions(
        pred_sem: &[SemanticMask],
        gt_sem: &[SemanticMask],
        pred_inst: &[Vec<Instance>],
        gt_inst: &[Vec<Instance>],
    ) -> Result<Self> {
        if pred_sem.len() != gt_sem.len() || pred_inst.len() != gt_inst.len() {
            return Err(Error::InvalidArgument("prediction and ground-truth counts differ".into()));
        }
        let mut counts = [PixelCounts::default(); 4];
        let mut confusion = ConfusionMatrix::default();
        for (p, g) in pred_sem.iter().zip(gt_sem) {
            confusion.accumulate(p, g)?;
            for class in ClassLabel::ALL {
                counts[class.index()].add(PixelCounts::from_masks(&p.class_mask(class), &g.class_mask(class))?);
            }
        }
        let per_class = counts.map(|c| ClassMetrics::from_counts(&c));
        let avg = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / 4.0;
        Ok(Self {
            mean: ClassMetrics {
                iou: avg(|m| m.iou),
                dice: avg(|m| m.dice),
                precision: avg(|m| m.precision),
                recall: avg(|m| m.recall),
            },
            per_class,
            map50: map50(pred_inst, gt_inst),
            confusion,
        })
    }

    /// `class,iou,dice,precision,recall` rows for each class then `mean`.
    pub fn report_csv(&self) -> String {
        let mut s = String::from("class,iou,dice,precision,recall\n");
        let rows = ClassLabel::ALL
            .iter()
            .map(|c| (c.name(), &self.per_class[c.index()]))
            .chain(std::iter::once(("mean", &self.mean)));
        for (name, m) in rows {
            s.push_str(&format!(
                "{name},{:.6},{:.6},{:.6},{:.6}\n",
                m.iou, m.dice, m.precision, m.recall
            ));
        }
        s
    }

    pub fn confusion_csv(&self) -> String {
        self.confusion.to_csv()
    }
}

/// Two-decimal value with ties to even, as printed in comparison tables.
pub fn table_value(x: f64) -> String {
    format!("{:.2}", round_half_even(x, 2))
}

/// Side-by-side IoU and Dice per class with deltas `b - a`.
pub fn comparison_table(a: &MetricReport, b: &MetricReport, a_name: &str, b_name: &str) -> String {
    let mut s = format!(
        "class,iou_{a_name},iou_{b_name},iou_delta,dice_{a_name},dice_{b_name},dice_delta\n"
    );
    let rows = ClassLabel::ALL
        .iter()
        .map(|c| (c.name(), a.per_class[c.index()], b.per_class[c.index()]))
        .chain(std::iter::once(("mean", a.mean, b.mean)));
    for (name, x, y) in rows {
        s.push_str(&format!(
            "{name},{},{},{},{},{},{}\n",
            table_value(x.iou),
            table_value(y.iou),
            table_value(y.iou - x.iou),
            table_value(x.dice),
            table_value(y.dice),
            table_value(y.dice - x.dice),
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    pub conf_thresh: f32,
    pub nms_iou: f32,
    pub max_det: usize,
    /// Minimum class probability for a pixel to be labelled.
    pub semantic_threshold: f32,
    pub batch_size: usize,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            conf_thresh: 0.001,
            nms_iou: 0.6,
            max_det: 100,
            semantic_threshold: 0.5,
            batch_size: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub semantic: SemanticMask,
    pub instances: Vec<Instance>,
}

pub fn predict(model: &Model, samples: &[Sample], opts: &PredictOptions) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(opts.batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let x = batch_tensor(&refs, model.dtype(), model.device())?;
        let o = model.forward(&x)?;
        for b in 0..chunk.len() {
            let mut dets = nms(decode_detections(&o, model.config(), b, opts.conf_thresh)?, opts.nms_iou);
            dets.truncate(opts.max_det);
            out.push(Prediction {
                semantic: semantic_from_logits(&o.semantic.get(b)?, opts.semantic_threshold)?,
                instances: instances_from_detections(&o, b, dets)?,
            });
        }
    }
    Ok(out)
}

/// Ground-truth instances of a sample with score 1.
pub fn gt_instances(sample: &Sample) -> Vec<Instance> {
    let (h, w) = sample.size();
    sample
        .instances
        .iter()
        .map(|(c, m)| Instance::from_mask(*c, 1.0, h, w, m.clone()))
        .collect()
}

pub fn evaluate(model: &Model, samples: &[Sample], opts: &PredictOptions) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
    }
    let preds = predict(model, samples, opts)?;
    let pred_sem: Vec<SemanticMask> = preds.iter().map(|p| p.semantic.clone()).collect();
    let gt_sem: Vec<SemanticMask> = samples.iter().map(|s| s.semantic.clone()).collect();
    let pred_inst: Vec<Vec<Instance>> = preds.into_iter().map(|p| p.instances).collect();
    let gt_inst: Vec<Vec<Instance>> = samples.iter().map(gt_instances).collect();
    MetricReport::from_predictions(&pred_sem, &gt_sem, &pred_inst, &gt_inst)
}

/// Scores the ground truth against itself; every metric is 1.
pub fn oracle_report(samples: &[Sample]) -> Result<MetricReport> {
    let gt_sem: Vec<SemanticMask> = samples.iter().map(|s| s.semantic.clone()).collect();
    let gt_inst: Vec<Vec<Instance>> = samples.iter().map(gt_instances).collect();
    MetricReport::from_predictions(&gt_sem, &gt_sem, &gt_inst, &gt_inst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_is_unweighted_row_average() {
        let gt = SemanticMask::new(1, 8, vec![0, 0, 0, 0, 1, 1, 2, 3]).unwrap();
        let pred = SemanticMask::new(1, 8, vec![0, 0, 1, 255, 1, 2, 2, 3]).unwrap();
        let r = MetricReport::from_predictions(&[pred], &[gt], &[vec![]], &[vec![]]).unwrap();
        let m = r.per_class.iter().map(|c| c.iou).sum::<f64>() / 4.0;
        assert!((r.mean.iou - m).abs() < 1e-12);
        assert!(r.report_csv().lines().last().unwrap().starts_with("mean,"));
        assert_eq!(r.report_csv().lines().count(), 6);
    }

    #[test]
    fn comparison_has_deltas() {
        let gt = SemanticMask::new(1, 4, vec![0, 1, 2, 3]).unwrap();
        let a = MetricReport::from_predictions(&[SemanticMask::background(1, 4)], &[gt.clone()], &[], &[]).unwrap();
        let b = MetricReport::from_predictions(&[gt.clone()], &[gt], &[], &[]).unwrap();
        let t = comparison_table(&a, &b, "baseline", "proposed");
        assert!(t.starts_with("class,iou_baseline,iou_proposed,iou_delta"));
        assert!(t.contains("mean,0.00,1.00,1.00,0.00,1.00,1.00"));
    }
}

//! Pixel metrics, the confusion matrix and mask mAP.

use crate::error::{Error, Result};
use crate::model::Instance;
use crate::spectral::{ClassLabel, SemanticMask};

/// Pixel counts of a binary prediction against a binary ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PixelCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl PixelCounts {
    pub fn from_masks(pred: &[bool], gt: &[bool]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(c)
    }

    pub fn add(&mut self, other: PixelCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }

    /// 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    /// 1 when nothing is predicted.
    pub fn precision(&self) -> f64 {
        let denom = self.tp + self.fp;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }

    /// 1 when the ground truth is empty.
    pub fn recall(&self) -> f64 {
        let denom = self.tp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }
}

pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    Ok(PixelCounts::from_masks(pred, gt)?.iou())
}

pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    Ok(PixelCounts::from_masks(pred, gt)?.dice())
}

pub fn precision_recall(pred: &[bool], gt: &[bool]) -> Result<(f64, f64)> {
    let c = PixelCounts::from_masks(pred, gt)?;
    Ok((c.precision(), c.recall()))
}

/// Rounds to `decimals` places, ties to even. Values within 1e-9 (in units
/// of the last kept place) of a tie count as ties, so `0.505` reported from
/// a float sum still rounds to `0.50`.
pub fn round_half_even(x: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    let s = x * scale;
    let floor = s.floor();
    let frac = s - floor;
    let r = if (frac - 0.5).abs() < 1e-9 {
        if floor % 2.0 == 0.0 {
            floor
        } else {
            floor + 1.0
        }
    } else {
        s.round()
    };
    r / scale
}

/// Pixel confusion counts, rows predicted class, columns true class.
/// Pixels that are background in either mask are not counted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 4]; 4],
}

impl ConfusionMatrix {
    pub fn accumulate(&mut self, pred: &SemanticMask, gt: &SemanticMask) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if let (Some(p), Some(g)) = (ClassLabel::from_code(p), ClassLabel::from_code(g)) {
                self.counts[p.index()][g.index()] += 1;
            }
        }
        Ok(())
    }

    pub fn column_total(&self, col: usize) -> u64 {
        (0..4).map(|r| self.counts[r][col]).sum()
    }

    /// Classes with no ground-truth pixels; their columns normalize to zeros.
    pub fn absent_classes(&self) -> Vec<ClassLabel> {
        ClassLabel::ALL
            .into_iter()
            .filter(|c| self.column_total(c.index()) == 0)
            .collect()
    }

    /// Entry `(r, c)` is the fraction of true-class-`c` pixels predicted as `r`.
    pub fn normalized(&self) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for c in 0..4 {
            let total = self.column_total(c);
            if total == 0 {
                continue;
            }
            for (r, row) in m.iter_mut().enumerate() {
                row[c] = self.counts[r][c] as f64 / total as f64;
            }
        }
        m
    }

    pub fn to_csv(&self) -> String {
        let m = self.normalized();
        let mut s = String::from("predicted\\true");
        for c in ClassLabel::ALL {
            s.push(',');
            s.push_str(c.name());
        }
        s.push('\n');
        for r in ClassLabel::ALL {
            s.push_str(r.name());
            for v in m[r.index()] {
                s.push_str(&format!(",{v:.6}"));
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion_matrix(preds: &[SemanticMask], gts: &[SemanticMask]) -> Result<ConfusionMatrix> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let mut m = ConfusionMatrix::default();
    for (p, g) in preds.iter().zip(gts) {
        m.accumulate(p, g)?;
    }
    Ok(m)
}

/// Area under the precision envelope sampled at recall 0, 0.01, ..., 1.
/// `hits` are the ranked detections' match flags.
pub fn average_precision(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(hits.len());
    for (i, &hit) in hits.iter().enumerate() {
        tp += hit as usize;
        points.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let p = points
            .iter()
            .find(|(rec, _)| *rec >= r - 1e-12)
            .map_or(0.0, |&(_, p)| p);
        sum += p;
    }
    sum / 101.0
}

fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per-class AP at mask IoU 0.5; `None` for classes without ground truth.
pub fn per_class_ap(preds: &[Vec<Instance>], gts: &[Vec<Instance>]) -> [Option<f64>; 4] {
    let mut out = [None; 4];
    for class in ClassLabel::ALL {
        let n_gt: usize = gts
            .iter()
            .map(|g| g.iter().filter(|i| i.class == class).count())
            .sum();
        if n_gt == 0 {
            continue;
        }
        let mut ranked: Vec<(usize, &Instance)> = preds
            .iter()
            .enumerate()
            .flat_map(|(img, p)| p.iter().filter(|i| i.class == class).map(move |i| (img, i)))
            .collect();
        ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let hits: Vec<bool> = ranked
            .iter()
            .map(|&(img, det)| {
                let best = gts[img]
                    .iter()
                    .enumerate()
                    .filter(|(j, g)| g.class == class && !used[img][*j])
                    .map(|(j, g)| (j, mask_iou(&det.mask, &g.mask)))
                    .filter(|&(_, v)| v >= 0.5)
                    .max_by(|a, b| a.1.total_cmp(&b.1));
                match best {
                    Some((j, _)) => {
                        used[img][j] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect();
        out[class.index()] = Some(average_precision(&hits, n_gt));
    }
    out
}

/// Class-mean AP at mask IoU 0.5 over classes that have ground truth; 0
/// when no class does.
pub fn map50(preds: &[Vec<Instance>], gts: &[Vec<Instance>]) -> f64 {
    let aps: Vec<f64> = per_class_ap(preds, gts).into_iter().flatten().collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(class: ClassLabel, score: f32, mask: Vec<bool>) -> Instance {
        Instance::from_mask(class, score, 1, mask.len(), mask)
    }

    #[test]
    fn squares_sharing_two_pixels() {
        let mut a = vec![false; 16];
        let mut b = vec![false; 16];
        for i in [0, 1, 4, 5] {
            a[i] = true;
        }
        for i in [1, 2, 5, 6] {
            b[i] = true;
        }
        assert!((iou(&a, &b).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert!(iou(&a, &b[..15]).is_err());
    }

    #[test]
    fn empty_conventions() {
        let e = vec![false; 4];
        let f = vec![true; 4];
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &f).unwrap(), 0.0);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(precision_recall(&e, &f).unwrap(), (1.0, 0.0));
        assert_eq!(precision_recall(&f, &e).unwrap(), (0.0, 1.0));
    }

    #[test]
    fn superset_prediction() {
        let mut p = vec![false; 16];
        let mut g = vec![false; 16];
        p[..8].iter_mut().for_each(|v| *v = true);
        g[..4].iter_mut().for_each(|v| *v = true);
        assert_eq!(precision_recall(&p, &g).unwrap(), (0.5, 1.0));
    }

    #[test]
    fn half_even_rounding() {
        assert_eq!(round_half_even(0.505, 2), 0.50);
        assert_eq!(round_half_even((0.58 + 0.25 + 0.51 + 0.68) / 4.0, 2), 0.50);
        assert_eq!(round_half_even(0.515, 2), 0.52);
        assert_eq!(round_half_even(0.5151, 2), 0.52);
        assert_eq!(round_half_even(0.61, 2), 0.61);
    }

    #[test]
    fn ap_traces() {
        assert_eq!(average_precision(&[true, false], 1), 1.0);
        assert_eq!(average_precision(&[], 3), 0.0);
        // Hit, miss, hit with 2 gt: precision 1 up to recall 0.5, then 2/3.
        let ap = average_precision(&[true, false, true], 2);
        let expected = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((ap - expected).abs() < 1e-12);
    }

    #[test]
    fn map_spurious_after_correct() {
        let gt = vec![vec![inst(ClassLabel::Tipburn, 1.0, vec![true, true, false, false])]];
        let preds = vec![vec![
            inst(ClassLabel::Tipburn, 0.9, vec![true, true, false, false]),
            inst(ClassLabel::Tipburn, 0.8, vec![false, false, true, true]),
        ]];
        assert_eq!(map50(&preds, &gt), 1.0);
        assert_eq!(map50(&[vec![]], &gt), 0.0);
    }

    #[test]
    fn confusion_absent_class_column_zero() {
        let gt = SemanticMask::new(1, 4, vec![0, 0, 1, 255]).unwrap();
        let pred = SemanticMask::new(1, 4, vec![0, 1, 1, 2]).unwrap();
        let m = confusion_matrix(&[pred], &[gt]).unwrap();
        let n = m.normalized();
        assert_eq!(n[0][0], 0.5);
        assert_eq!(n[1][0], 0.5);
        assert_eq!(n[1][1], 1.0);
        assert_eq!(
            m.absent_classes(),
            vec![ClassLabel::PigmentAccumulation, ClassLabel::Tipburn]
        );
        assert!(m.to_csv().starts_with("predicted\\true,normal,chlorosis"));
    }
}

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model, ModelConfig};
use crate::train::augment::{augment, AugmentConfig};
use crate::train::data::{batch_tensor, Sample};
use crate::train::evaluate::{evaluate, PredictOptions};
use crate::train::loss::{inverse_frequency_weights, total_loss, LossWeights, SampleTargets};
use crate::train::optim::Sgd;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Weight the semantic term by inverse class pixel frequency.
    pub class_weighting: bool,
    pub clip_norm: Option<f64>,
    pub predict: PredictOptions,
}

impl Default for TrainConfig {
    /// 500 epochs of SGD at lr 1e-4, momentum 0.99, batch 4, with flips,
    /// quarter-turn rotations and colour jitter.
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 1e-4,
            momentum: 0.99,
            weight_decay: 0.0,
            batch_size: 4,
            augment: AugmentConfig::default(),
            seed: 0,
            loss_weights: LossWeights::default(),
            class_weighting: false,
            clip_norm: None,
            predict: PredictOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub box_loss: f64,
    pub seg_loss: f64,
    pub cls_loss: f64,
    pub obj_loss: f64,
    pub total_loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub dice: f64,
}

pub const HISTORY_HEADER: &str = "epoch,box_loss,seg_loss,cls_loss,precision,recall,map50";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{HISTORY_HEADER}\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.epoch, r.box_loss, r.seg_loss, r.cls_loss, r.precision, r.recall, r.map50
            ));
        }
        s
    }

    /// Trailing means of the total loss over full `window`-epoch spans.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        self.records
            .windows(window)
            .map(|w| w.iter().map(|r| r.total_loss).sum::<f64>() / window as f64)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Highest validation mAP, ties broken by mean Dice then earlier epoch.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: History,
}

fn snapshot(model: &Model, r: &EpochRecord) -> Result<Checkpoint> {
    let metrics = BTreeMap::from([
        ("map50".to_string(), r.map50),
        ("dice".to_string(), r.dice),
        ("precision".to_string(), r.precision),
        ("recall".to_string(), r.recall),
        ("total_loss".to_string(), r.total_loss),
    ]);
    model.checkpoint(r.epoch, metrics)
}

/// Builds a model seeded from `train_cfg.seed` and trains it.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
) -> Result<TrainOutcome> {
    let model = Model::new(model_cfg, train_cfg.seed)?;
    train_model(&model, train_cfg, train_set, val_set, |_| {})
}

/// Trains `model` in place. Validation runs after every epoch on `val_set`,
/// or on `train_set` when no validation samples are given.
pub fn train_model(
    model: &Model,
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let want = model.config().in_channels;
    if let Some(s) = train_set.iter().chain(val_set).find(|s| s.image.channels != want) {
        return Err(Error::ChannelMismatch {
            expected: want,
            got: s.image.channels,
        });
    }
    let val = if val_set.is_empty() { train_set } else { val_set };
    let class_weights = cfg
        .class_weighting
        .then(|| inverse_frequency_weights(&train_set.iter().map(|s| &s.semantic).collect::<Vec<_>>()));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a1_7a1);
    let mut opt = Sgd::new(
        model.store.named_vars().into_iter().map(|(_, v)| v).collect(),
        cfg.lr,
        cfg.momentum,
    );
    opt.weight_decay = cfg.weight_decay;
    opt.clip_norm = cfg.clip_norm;

    let mut history = History::default();
    let mut best: Option<(f64, f64, Checkpoint)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| augment(&train_set[i], &cfg.augment, &mut rng))
                .collect();
            let refs: Vec<&Sample> = batch.iter().collect();
            let x = batch_tensor(&refs, model.dtype(), model.device())?;
            let targets: Vec<SampleTargets> = batch.iter().map(Sample::targets).collect();
            let out = model.forward(&x)?;
            let loss = match total_loss(&out, model.config(), &targets, &cfg.loss_weights, class_weights.as_ref()) {
                Ok(l) => l,
                Err(Error::NonFiniteLoss { component }) => {
                    let last_good = match &best {
                        Some((_, _, c)) => c.clone(),
                        None => model.checkpoint(epoch - 1, BTreeMap::new())?,
                    };
                    return Err(Error::Diverged {
                        epoch,
                        component,
                        last_good: Box::new(last_good),
                    });
                }
                Err(e) => return Err(e),
            };
            let total = loss.total.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            let grads = loss.total.backward()?;
            opt.step(&grads)?;
            for (s, v) in sums.iter_mut().zip([loss.box_, loss.seg, loss.cls, loss.obj, total]) {
                *s += v;
            }
            batches += 1;
        }
        let n = batches as f64;
        let report = evaluate(model, val, &cfg.predict)?;
        let record = EpochRecord {
            epoch,
            box_loss: sums[0] / n,
            seg_loss: sums[1] / n,
            cls_loss: sums[2] / n,
            obj_loss: sums[3] / n,
            total_loss: sums[4] / n,
            precision: report.mean.precision,
            recall: report.mean.recall,
            map50: report.map50,
            dice: report.mean.dice,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (box {:.4} seg {:.4} cls {:.4} obj {:.4}) mAP50 {:.4} dice {:.4}",
            record.total_loss,
            record.box_loss,
            record.seg_loss,
            record.cls_loss,
            record.obj_loss,
            record.map50,
            record.dice
        );
        on_epoch(&record);
        history.records.push(record);
        let improves = match &best {
            None => true,
            Some((m, d, _)) => record.map50 > *m || (record.map50 == *m && record.dice > *d),
        };
        if improves {
            best = Some((record.map50, record.dice, snapshot(model, &record)?));
        }
    }
    let last = snapshot(model, history.records.last().expect("at least one epoch"))?;
    let best = best.map(|(_, _, c)| c).expect("at least one epoch");
    Ok(TrainOutcome { best, last, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_checks() {
        TrainConfig::default().validate().unwrap();
        for f in [
            |c: &mut TrainConfig| c.lr = 0.0,
            |c: &mut TrainConfig| c.momentum = 1.0,
            |c: &mut TrainConfig| c.batch_size = 0,
        ] {
            let mut c = TrainConfig::default();
            f(&mut c);
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn history_csv_and_moving_average() {
        let rec = |epoch, total_loss| EpochRecord {
            epoch,
            box_loss: 0.1,
            seg_loss: 0.2,
            cls_loss: 0.3,
            obj_loss: 0.4,
            total_loss,
            precision: 0.5,
            recall: 0.6,
            map50: 0.7,
            dice: 0.8,
        };
        let h = History {
            records: vec![rec(1, 4.0), rec(2, 2.0), rec(3, 3.0)],
        };
        let csv = h.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().all(|l| l.split(',').count() == 7));
        assert_eq!(h.moving_average(2), vec![3.0, 2.5]);
    }
}

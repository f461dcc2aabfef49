//! Per-sample and mean Dice / IoU / HD95 over a dataset, rendered as CSV or
//! an aligned text table.

use std::fmt::Write as _;

use super::data::SegmentationSample;
use crate::error::{Error, Result};
use crate::metrics::{dice, hd95, iou, masks_from_logits, BinaryMask};
use crate::network::RichUNet;
use crate::tensor::{seeded_rng, Mode, Session, Tensor};

/// Anything that maps a `[C,H,W]` image to a foreground mask.
pub trait Predictor {
    fn predict(&mut self, image: &Tensor) -> Result<BinaryMask>;
}

impl Predictor for RichUNet {
    fn predict(&mut self, image: &Tensor) -> Result<BinaryMask> {
        Ok(predict_masks(self, image)?.remove(0))
    }
}

/// Eval-mode forward of one `[C,H,W]` image or a `[B,C,H,W]` batch.
pub fn predict_masks(net: &RichUNet, images: &Tensor) -> Result<Vec<BinaryMask>> {
    let batch = match images.rank() {
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(images.shape());
            images.reshape(&shape)?
        }
        _ => images.clone(),
    };
    // Eval mode never draws from the generator.
    let mut rng = seeded_rng(0);
    let mut s = Session::new(net.store(), Mode::Eval, &mut rng);
    let x = s.input(batch);
    let logits = net.forward(&mut s, x)?;
    Ok(masks_from_logits(s.tape.value(logits)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleScore {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    /// `None` when either mask is empty.
    pub hd95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SampleScore>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    /// Mean over samples with a defined HD95; `None` if there are none.
    pub mean_hd95: Option<f64>,
    pub hd95_undefined: usize,
}

/// Published reference row quoted in text reports for orientation only.
pub const REFERENCE_ROW: (&str, f64, f64, f64) = ("ISIC2018 (reference)", 0.9116, 0.8397, 1.7637);

pub fn score(id: &str, pred: &BinaryMask, gt: &BinaryMask) -> Result<SampleScore> {
    let hd = match hd95(pred, gt) {
        Ok(v) => Some(v),
        Err(Error::MetricUndefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(SampleScore {
        id: id.to_owned(),
        dice: dice(pred, gt)?,
        iou: iou(pred, gt)?,
        hd95: hd,
    })
}

pub fn evaluate(predictor: &mut dyn Predictor, data: &[SegmentationSample]) -> Result<EvalReport> {
    let samples = data
        .iter()
        .map(|s| score(&s.id, &predictor.predict(&s.image)?, &s.mask))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_scores(samples))
}

impl EvalReport {
    pub fn from_scores(samples: Vec<SampleScore>) -> Self {
        let n = samples.len().max(1) as f64;
        let mean_dice = samples.iter().map(|s| s.dice).sum::<f64>() / n;
        let mean_iou = samples.iter().map(|s| s.iou).sum::<f64>() / n;
        let defined: Vec<f64> = samples.iter().filter_map(|s| s.hd95).collect();
        let mean_hd95 = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        Self {
            hd95_undefined: samples.len() - defined.len(),
            samples,
            mean_dice,
            mean_iou,
            mean_hd95,
        }
    }

    /// Columns `id,dice,iou,hd95,hd95_defined`; undefined HD95 is left blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,dice,iou,hd95,hd95_defined\n");
        for s in &self.samples {
            let hd = s.hd95.map(|v| format!("{v:.9}")).unwrap_or_default();
            writeln!(out, "{},{:.9},{:.9},{hd},{}", s.id, s.dice, s.iou, s.hd95.is_some()).unwrap();
        }
        out
    }

    pub fn to_table(&self) -> String {
        let width = self
            .samples
            .iter()
            .map(|s| s.id.len())
            .chain([REFERENCE_ROW.0.len(), 4])
            .max()
            .unwrap();
        let hd = |v: Option<f64>| v.map_or_else(|| "undefined".to_owned(), |v| format!("{v:.4}"));
        let mut out = String::new();
        writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>9}", "id", "Dice", "IoU", "HD95").unwrap();
        for s in &self.samples {
            writeln!(out, "{:<width$}  {:>8.4}  {:>8.4}  {:>9}", s.id, s.dice, s.iou, hd(s.hd95)).unwrap();
        }
        writeln!(out, "{:<width$}  {:>8.4}  {:>8.4}  {:>9}", "mean", self.mean_dice, self.mean_iou, hd(self.mean_hd95)).unwrap();
        let (name, d, i, h) = REFERENCE_ROW;
        writeln!(out, "{name:<width$}  {d:>8.4}  {i:>8.4}  {h:>9.4}").unwrap();
        writeln!(out, "hd95 undefined for {} of {} samples", self.hd95_undefined, self.samples.len()).unwrap();
        out
    }
}

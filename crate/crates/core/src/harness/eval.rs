//! Batched evaluation of a mask predictor over a dataset.

use std::path::Path;

use crate::error::{Error, Result};
use crate::head::SegmentationMask;
use crate::metrics::{MetricsAccumulator, MetricsReport, ThresholdRule};

use super::data::{make_batch, Dataset, Example};
use super::model::RefSegModel;
use super::train::load_checkpoint;

/// Anything that produces one mask per example.
pub trait MaskPredictor {
    fn predict(&self, examples: &[&Example]) -> Result<Vec<SegmentationMask>>;
}

impl MaskPredictor for RefSegModel {
    fn predict(&self, examples: &[&Example]) -> Result<Vec<SegmentationMask>> {
        RefSegModel::predict(self, &make_batch(examples, self)?)
    }
}

/// Returns the ground truth unchanged.
pub struct OraclePredictor;

impl MaskPredictor for OraclePredictor {
    fn predict(&self, examples: &[&Example]) -> Result<Vec<SegmentationMask>> {
        Ok(examples.iter().map(|e| e.mask.clone()).collect())
    }
}

impl<F> MaskPredictor for F
where
    F: Fn(&Example) -> SegmentationMask,
{
    fn predict(&self, examples: &[&Example]) -> Result<Vec<SegmentationMask>> {
        Ok(examples.iter().map(|e| self(e)).collect())
    }
}

pub fn evaluate(
    predictor: &dyn MaskPredictor,
    data: &Dataset,
    batch_size: usize,
    rule: ThresholdRule,
) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new(rule);
    let refs: Vec<&Example> = data.examples.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let preds = predictor.predict(chunk)?;
        if preds.len() != chunk.len() {
            return Err(Error::shape(format!(
                "predictor returned {} masks for {} examples",
                preds.len(),
                chunk.len()
            )));
        }
        for (p, e) in preds.iter().zip(chunk) {
            acc.add(p, &e.mask, e.category.as_deref())?;
        }
    }
    acc.report()
}

/// Evaluate a checkpoint on a corpus, writing `report.json` into `out_dir`
/// and, with `save_masks`, each predicted mask under `out_dir/masks/`.
pub fn evaluate_checkpoint(ckpt: &Path, data: &Path, out_dir: &Path, save_masks: bool) -> Result<MetricsReport> {
    let c = load_checkpoint(ckpt)?;
    let cfg = &c.meta.config;
    let (cats, spatial) = super::data::lexicons(cfg)?;
    let dataset = Dataset::load(data, cfg.image_size, &cats, &spatial)?;
    let report = evaluate(&c.model, &dataset, cfg.batch_size, cfg.threshold_rule)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    report.write_json(out_dir.join("report.json"))?;
    if save_masks {
        let dir = out_dir.join("masks");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let refs: Vec<&Example> = dataset.examples.iter().collect();
        let mut index = 0;
        for chunk in refs.chunks(cfg.batch_size) {
            for m in MaskPredictor::predict(&c.model, chunk)? {
                m.save_png(dir.join(format!("{index:05}.png")))?;
                index += 1;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::Provenance;
    use candle_core::{DType, Device, Tensor};

    fn example(px: Vec<bool>, cat: &str) -> Example {
        Example {
            id: String::new(),
            image: Tensor::zeros((3, 2, 2), DType::F32, &Device::Cpu).unwrap(),
            mask: SegmentationMask::new(2, 2, px, Provenance::GroundTruth).unwrap(),
            decomposed: crate::parser::DecomposedExpression {
                context: cat.into(),
                ground_object: cat.into(),
                spatial_position: String::new(),
            },
            category: Some(cat.into()),
        }
    }

    fn dataset() -> Dataset {
        Dataset {
            root: ".".into(),
            examples: vec![
                example(vec![true, true, false, false], "car"),
                example(vec![true, false, false, false], "car"),
                example(vec![false, false, true, true], "ship"),
            ],
        }
    }

    #[test]
    fn oracle_scores_perfectly() {
        let r = evaluate(&OraclePredictor, &dataset(), 2, ThresholdRule::Strict).unwrap();
        assert_eq!(r.miou, 100.0);
        assert_eq!(r.oiou, 100.0);
        assert_eq!(r.pr(0.9), 100.0);
        assert_eq!(r.per_category["ship"], 100.0);
    }

    #[test]
    fn injected_predictions() {
        // predict the top row everywhere
        let top = |_: &Example| {
            SegmentationMask::new(2, 2, vec![true, true, false, false], Provenance::Predicted).unwrap()
        };
        let r = evaluate(&top, &dataset(), 1, ThresholdRule::Strict).unwrap();
        // IoUs: 1, 1/2, 0
        assert!((r.miou - 100.0 * 1.5 / 3.0).abs() < 1e-12);
        // intersections 2+1+0, unions 2+2+4
        assert!((r.oiou - 100.0 * 3.0 / 8.0).abs() < 1e-12);
        assert!((r.per_category["car"] - 75.0).abs() < 1e-12);
        assert_eq!(r.per_category["ship"], 0.0);
    }
}

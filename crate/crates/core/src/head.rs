//! Top-down decoder and the BCE + dice training loss.

use std::path::Path;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::encoders::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Padding, ParamStore};

pub const DEFAULT_DICE_WEIGHT: f64 = 0.1;
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Predicted,
    GroundTruth,
}

/// Hard binary mask in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMask {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<bool>,
    pub provenance: Provenance,
}

impl SegmentationMask {
    pub fn new(height: usize, width: usize, pixels: Vec<bool>, provenance: Provenance) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width],
                actual: vec![pixels.len()],
            });
        }
        Ok(Self {
            height,
            width,
            pixels,
            provenance,
        })
    }

    pub fn empty(height: usize, width: usize, provenance: Provenance) -> Self {
        Self {
            height,
            width,
            pixels: vec![false; height * width],
            provenance,
        }
    }

    /// Threshold a `(H, W)` logit map at probability 0.5, i.e. logit > 0.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let (h, w) = logits.dims2()?;
        let v = logits.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Self::new(h, w, v.into_iter().map(|x| x > 0.0).collect(), Provenance::Predicted)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.pixels[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn inverted(&self) -> Self {
        Self {
            pixels: self.pixels.iter().map(|p| !p).collect(),
            ..self.clone()
        }
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let v: Vec<f32> = self.pixels.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
        Ok(Tensor::from_vec(v, (self.height, self.width), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Single-channel 8-bit PNG with values {0, 255}.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf: Vec<u8> = self.pixels.iter().map(|&p| if p { 255 } else { 0 }).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer matches dimensions");
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Any nonzero pixel is foreground.
    pub fn load_png(path: impl AsRef<Path>, provenance: Provenance) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        Self::new(
            h as usize,
            w as usize,
            img.into_raw().into_iter().map(|v| v > 127).collect(),
            provenance,
        )
    }
}

/// Progressive top-down decoder. Every layer is either pointwise or a 3x3
/// convolution with replicated borders, so constant inputs stay constant.
pub struct Decoder {
    pub lateral: Vec<Conv2d>,
    pub fuse: Vec<Conv2d>,
    pub out: Conv2d,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, channels: [usize; 4], width: usize) -> Result<Self> {
        let lateral = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::pointwise(store, &format!("{name}.lateral{}", i + 1), c, width))
            .collect::<Result<Vec<_>>>()?;
        let fuse = (1..=3)
            .map(|i| {
                Conv2d::new(
                    store,
                    &format!("{name}.fuse{i}"),
                    width,
                    width,
                    3,
                    1,
                    1,
                    Padding::Replicate,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let out = Conv2d::pointwise(store, &format!("{name}.out"), width, 1)?;
        Ok(Self { lateral, fuse, out })
    }

    /// Logits `(B, H, W)` at the image resolution `out_hw`.
    pub fn decode(&self, pyramid: &FeaturePyramid, out_hw: (usize, usize)) -> Result<Tensor> {
        pyramid.validate()?;
        let s = &pyramid.stages;
        let mut x = self.lateral[3].forward(&s[3])?.relu()?;
        for i in (0..3).rev() {
            let (_, _, h, w) = s[i].dims4()?;
            let up = x.upsample_nearest2d(h, w)?;
            let merged = (up + self.lateral[i].forward(&s[i])?)?;
            // fuse[0] handles stage 3 -> fuse[2] handles stage 1
            x = self.fuse[2 - i].forward(&merged)?.relu()?;
        }
        let logits = self.out.forward(&x)?;
        let (h1, w1) = (s[0].dims()[2], s[0].dims()[3]);
        if out_hw.0 != 4 * h1 || out_hw.1 != 4 * w1 {
            return Err(Error::shape(format!(
                "output {out_hw:?} is not 4x the stage-1 grid {h1}x{w1}"
            )));
        }
        let logits = nn::resize_bilinear(&logits, out_hw.0, out_hw.1)?;
        Ok(logits.squeeze(1)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
    pub dice_weight: f64,
}

/// Differentiable loss terms for a batch. `logits` and `target` are `(B, H, W)`.
pub struct LossTensors {
    pub total: Tensor,
    pub ce: Tensor,
    pub dice: Tensor,
    pub dice_weight: f64,
}

impl LossTensors {
    pub fn report(&self) -> Result<LossReport> {
        let s = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossReport {
            total: s(&self.total)?,
            ce: s(&self.ce)?,
            dice: s(&self.dice)?,
            dice_weight: self.dice_weight,
        })
    }
}

/// Mean pixelwise BCE plus `dice_weight` times the soft dice loss
/// `1 - (2 sum(pg) + 1) / (sum(p) + sum(g) + 1)`, averaged over the batch.
pub fn loss_tensors(logits: &Tensor, target: &Tensor, dice_weight: f64) -> Result<LossTensors> {
    if logits.dims() != target.dims() {
        return Err(Error::ShapeMismatch {
            expected: target.dims().to_vec(),
            actual: logits.dims().to_vec(),
        });
    }
    let g = target.to_dtype(logits.dtype())?;
    // max(x, 0) - x g + log(1 + exp(-|x|))
    let ce_map = ((logits.relu()? - (logits * &g)?)? + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    let ce = ce_map.mean_all()?;

    let p = nn::sigmoid(logits)?;
    let b = logits.dims()[0];
    let flat_p = p.reshape((b, ()))?;
    let flat_g = g.reshape((b, ()))?;
    let inter = (&flat_p * &flat_g)?.sum(D::Minus1)?;
    let denom = ((flat_p.sum(D::Minus1)? + flat_g.sum(D::Minus1)?)? + DICE_SMOOTH)?;
    let ratio = ((inter * 2.0)? + DICE_SMOOTH)?.div(&denom)?;
    let dice = (1.0 - ratio)?.mean_all()?;
    let total = (&ce + (&dice * dice_weight)?)?;
    Ok(LossTensors {
        total,
        ce,
        dice,
        dice_weight,
    })
}

/// Loss for a single `(H, W)` logit map against a ground-truth mask.
pub fn loss(logits: &Tensor, gt: &SegmentationMask, dice_weight: f64) -> Result<LossReport> {
    let (h, w) = logits.dims2()?;
    if (h, w) != gt.shape() {
        return Err(Error::ShapeMismatch {
            expected: vec![gt.height, gt.width],
            actual: vec![h, w],
        });
    }
    let target = gt.to_tensor(logits.dtype())?.unsqueeze(0)?;
    loss_tensors(&logits.unsqueeze(0)?, &target, dice_weight)?.report()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn zero_logits_half_positive() {
        let logits = Tensor::zeros((4, 4), DType::F64, &Device::Cpu).unwrap();
        let gt = SegmentationMask::new(4, 4, (0..16).map(|i| i < 8).collect(), Provenance::GroundTruth)
            .unwrap();
        let r = loss(&logits, &gt, 0.1).unwrap();
        assert!((r.ce - std::f64::consts::LN_2).abs() < 1e-12);
        // p = 0.5: dice = 1 - (2*4 + 1)/(8 + 8 + 1)
        assert!((r.dice - (1.0 - 9.0 / 17.0)).abs() < 1e-12);
        assert!((r.total - (r.ce + 0.1 * r.dice)).abs() < 1e-15);
    }

    #[test]
    fn saturated_prediction_has_zero_loss() {
        let gt = SegmentationMask::new(2, 2, vec![true, false, false, true], Provenance::GroundTruth)
            .unwrap();
        let logits = Tensor::new(&[[500f64, -500.0], [-500.0, 500.0]], &Device::Cpu).unwrap();
        let r = loss(&logits, &gt, 0.1).unwrap();
        assert!(r.total.abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn shape_mismatch() {
        let gt = SegmentationMask::empty(2, 2, Provenance::GroundTruth);
        let logits = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(loss(&logits, &gt, 0.1), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = SegmentationMask::new(2, 3, vec![true, false, true, false, false, true], Provenance::Predicted)
            .unwrap();
        let p = dir.path().join("m.png");
        m.save_png(&p).unwrap();
        let back = SegmentationMask::load_png(&p, Provenance::Predicted).unwrap();
        assert_eq!(back, m);
    }
}

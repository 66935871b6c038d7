//! Single-image inference from a checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::head::{Provenance, SegmentationMask};
use crate::parser::{decompose, DecomposedExpression};

use super::data::{image_tensor, lexicons, load_image, resize_mask};
use super::model::{Batch, RefSegModel};
use super::train::{dump_tensors, load_checkpoint};

#[derive(Clone, Debug)]
pub struct Inference {
    pub decomposed: DecomposedExpression,
    /// At the input image's resolution.
    pub mask: SegmentationMask,
    pub mask_path: PathBuf,
    pub overlay_path: PathBuf,
    pub dump_path: Option<PathBuf>,
}

/// Blend red into the masked pixels.
pub fn overlay(image: &RgbImage, mask: &SegmentationMask) -> RgbImage {
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if mask.get(y as usize, x as usize) {
            let [r, g, b] = px.0;
            *px = Rgb([
                ((r as u16 + 255) / 2) as u8,
                (g / 2),
                (b / 2),
            ]);
        }
    }
    out
}

/// Predict a mask for one image and expression.
pub fn predict_one(model: &RefSegModel, image: &RgbImage, expr: &DecomposedExpression) -> Result<(SegmentationMask, Batch)> {
    let size = model.config.image_size;
    let batch = Batch {
        images: image_tensor(image, size)?.unsqueeze(0)?,
        texts: vec![model.tokenize(expr)],
        targets: None,
    };
    let small = model.predict(&batch)?.remove(0);
    let (w, h) = image.dimensions();
    let mask = resize_mask(&small, h as usize, w as usize);
    Ok((mask, batch))
}

/// Run a checkpoint on `image` and write `mask.png` and `overlay.png` into
/// `out_dir`. With `dump`, every intermediate tensor is saved under
/// `out_dir/debug/`.
pub fn infer(ckpt: &Path, image: &Path, text: &str, out_dir: &Path, dump: bool) -> Result<Inference> {
    let c = load_checkpoint(ckpt)?;
    let (cats, spatial) = lexicons(&c.meta.config)?;
    let decomposed = decompose(text, &cats, &spatial)?;
    let img = load_image(image)?;
    let (mut mask, batch) = predict_one(&c.model, &img, &decomposed)?;
    mask.provenance = Provenance::Predicted;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mask_path = out_dir.join("mask.png");
    mask.save_png(&mask_path)?;
    let overlay_path = out_dir.join("overlay.png");
    overlay(&img, &mask).save(&overlay_path).map_err(|source| Error::Image {
        path: overlay_path.clone(),
        source,
    })?;
    let dump_path = if dump {
        let mut trace = c.model.forward(&batch, true)?.trace;
        trace.insert("input.image".into(), batch.images.clone());
        let p = out_dir.join("debug").join("intermediates.safetensors");
        dump_tensors(&p, &trace)?;
        Some(p)
    } else {
        None
    };
    Ok(Inference {
        decomposed,
        mask,
        mask_path,
        overlay_path,
        dump_path,
    })
}

/// Load tensors written by a debug dump.
pub fn load_dump(path: &Path) -> Result<std::collections::HashMap<String, Tensor>> {
    Ok(candle_core::safetensors::load(path, &candle_core::Device::Cpu)?)
}

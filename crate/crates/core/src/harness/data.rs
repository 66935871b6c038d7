//! JSON Lines corpora of image, mask and expression triplets.
//!
//! A corpus directory holds `refs.jsonl`; each line names an image and a
//! mask relative to that directory. Images and masks are resized to a square
//! side on load.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::RgbImage;

use crate::error::{Error, Result};
use crate::head::{Provenance, SegmentationMask};
use crate::parser::{
    decompose, CategoryLexicon, DecomposedExpression, SpatialLexicon, REFSEGRS_CATEGORIES,
    RRSISD_CATEGORIES, SYNTHETIC_CATEGORIES,
};
use crate::synth::CorpusRecord;

use super::config::RunConfig;
use super::model::{Batch, RefSegModel};

#[derive(Clone, Debug)]
pub struct Example {
    /// Image path as written in the corpus.
    pub id: String,
    /// `(3, S, S)` in [0, 1].
    pub image: Tensor,
    pub mask: SegmentationMask,
    pub decomposed: DecomposedExpression,
    pub category: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub examples: Vec<Example>,
}

/// Category and spatial lexicons named by a config, falling back to the
/// bundled ones.
pub fn lexicons(cfg: &RunConfig) -> Result<(CategoryLexicon, SpatialLexicon)> {
    let cats = match &cfg.categories {
        Some(p) => CategoryLexicon::load(p)?,
        None => CategoryLexicon::parse(
            &[REFSEGRS_CATEGORIES, RRSISD_CATEGORIES, SYNTHETIC_CATEGORIES].join("\n"),
        ),
    };
    let spatial = match &cfg.spatial {
        Some(p) => SpatialLexicon::load(p)?,
        None => SpatialLexicon::default_lexicon(),
    };
    Ok((cats, spatial))
}

/// `(3, size, size)` tensor of an RGB image in [0, 1].
pub fn image_tensor(img: &RgbImage, size: usize) -> Result<Tensor> {
    let img = if img.dimensions() == (size as u32, size as u32) {
        img.clone()
    } else {
        image::imageops::resize(img, size as u32, size as u32, FilterType::Triangle)
    };
    let hw = size * size;
    let mut data = vec![0f32; 3 * hw];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * hw + i] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(data, (3, size, size), &Device::Cpu)?)
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8())
}

/// Nearest-neighbour resize of a mask.
pub fn resize_mask(mask: &SegmentationMask, height: usize, width: usize) -> SegmentationMask {
    if mask.shape() == (height, width) {
        return mask.clone();
    }
    let pixels = (0..height * width)
        .map(|i| {
            let (y, x) = (i / width, i % width);
            let sy = ((y as f64 + 0.5) * mask.height as f64 / height as f64) as usize;
            let sx = ((x as f64 + 0.5) * mask.width as f64 / width as f64) as usize;
            mask.get(sy.min(mask.height - 1), sx.min(mask.width - 1))
        })
        .collect();
    SegmentationMask {
        height,
        width,
        pixels,
        provenance: mask.provenance,
    }
}

impl Dataset {
    /// Load `root/refs.jsonl`, or `root` itself when it is a file.
    pub fn load(
        root: impl AsRef<Path>,
        size: usize,
        categories: &CategoryLexicon,
        spatial: &SpatialLexicon,
    ) -> Result<Self> {
        let root = root.as_ref();
        let (dir, index) = if root.is_file() {
            (root.parent().unwrap_or(Path::new(".")).to_path_buf(), root.to_path_buf())
        } else {
            (root.to_path_buf(), root.join("refs.jsonl"))
        };
        let file = fs::File::open(&index).map_err(|e| Error::io(&index, e))?;
        let mut examples = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&index, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Config(format!("{}:{}: {e}", index.display(), lineno + 1))
            })?;
            examples.push(Self::example(&dir, rec, size, categories, spatial)?);
        }
        if examples.is_empty() {
            return Err(Error::EmptyEvaluation);
        }
        Ok(Self {
            root: dir,
            examples,
        })
    }

    fn example(
        dir: &Path,
        rec: CorpusRecord,
        size: usize,
        categories: &CategoryLexicon,
        spatial: &SpatialLexicon,
    ) -> Result<Example> {
        let image = image_tensor(&load_image(&dir.join(&rec.image))?, size)?;
        let mask = SegmentationMask::load_png(dir.join(&rec.mask), Provenance::GroundTruth)?;
        let mask = resize_mask(&mask, size, size);
        let decomposed = match &rec.ground_object {
            Some(obj) => DecomposedExpression {
                context: rec.expression.clone(),
                ground_object: obj.clone(),
                spatial_position: rec.spatial_position.clone().unwrap_or_default(),
            },
            None => decompose(&rec.expression, categories, spatial)?,
        };
        let category = rec
            .category
            .clone()
            .or_else(|| categories.canonical(&decomposed.ground_object));
        Ok(Example {
            id: rec.image,
            image,
            mask,
            decomposed,
            category,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// First `n` examples.
    pub fn take(&self, n: usize) -> Self {
        Self {
            root: self.root.clone(),
            examples: self.examples.iter().take(n).cloned().collect(),
        }
    }

    pub fn batch(&self, indices: &[usize], model: &RefSegModel) -> Result<Batch> {
        let ex: Vec<&Example> = indices.iter().map(|&i| &self.examples[i]).collect();
        make_batch(&ex, model)
    }
}

pub fn make_batch(examples: &[&Example], model: &RefSegModel) -> Result<Batch> {
    if examples.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let images: Vec<&Tensor> = examples.iter().map(|e| &e.image).collect();
    let targets = examples
        .iter()
        .map(|e| e.mask.to_tensor(model.dtype()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        images: Tensor::stack(&images, 0)?.to_dtype(model.dtype())?,
        texts: examples.iter().map(|e| model.tokenize(&e.decomposed)).collect(),
        targets: Some(Tensor::stack(&targets, 0)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_resize_nearest() {
        let m = SegmentationMask::new(2, 2, vec![true, false, false, true], Provenance::GroundTruth)
            .unwrap();
        let r = resize_mask(&m, 4, 4);
        assert_eq!(r.area(), 8);
        assert!(r.get(0, 1) && !r.get(0, 2) && r.get(3, 3));
        assert_eq!(resize_mask(&r, 2, 2), m);
    }

    #[test]
    fn loads_synthetic_split() {
        let dir = tempfile::tempdir().unwrap();
        crate::synth::generate_split(3, 5, 64, dir.path()).unwrap();
        let cfg = RunConfig::default();
        let (c, s) = lexicons(&cfg).unwrap();
        let d = Dataset::load(dir.path(), 32, &c, &s).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.examples[0].image.dims(), &[3, 32, 32]);
        assert_eq!(d.examples[0].mask.shape(), (32, 32));
        assert!(d.examples[0].category.is_some());
        let via_file = Dataset::load(dir.path().join("refs.jsonl"), 32, &c, &s).unwrap();
        assert_eq!(via_file.len(), 3);
    }

    #[test]
    fn missing_corpus_is_an_io_error() {
        let (c, s) = lexicons(&RunConfig::default()).unwrap();
        assert!(matches!(Dataset::load("/nonexistent/x", 32, &c, &s), Err(Error::Io { .. })));
    }
}

//! Deterministic synthetic referring-segmentation scenes.
//!
//! A scene is a canvas split into a 3x3 grid of cells, each holding at most
//! one coloured shape. The referent is described as
//! `the {color} {shape} {spatial phrase}`; the spatial phrase names the
//! referent's cell and is always present when another object shares its
//! colour and shape.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{Provenance, SegmentationMask};
use crate::parser::{decompose, CategoryLexicon, DecomposedExpression, SpatialLexicon};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether `(dy, dx)` relative to the centre falls inside a shape of radius `r`.
    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dy * dy + dx * dx <= r * r,
            Shape::Square => {
                let h = 0.85 * r;
                dy.abs() <= h && dx.abs() <= h
            }
            Shape::Triangle => {
                // apex up, base at +r, height 2r
                let t = (dy + r) / (2.0 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Orange,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::White,
        Color::Orange,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Orange => "orange",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [50, 80, 220],
            Color::Yellow => [230, 210, 40],
            Color::Cyan => [40, 200, 210],
            Color::Magenta => [200, 50, 200],
            Color::White => [240, 240, 240],
            Color::Orange => [240, 140, 30],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Large,
}

impl SizeClass {
    fn radius_fraction(self) -> f64 {
        match self {
            SizeClass::Small => 0.22,
            SizeClass::Large => 0.40,
        }
    }
}

/// Phrase for each cell of the 3x3 grid, row-major.
pub const CELL_PHRASES: [&str; 9] = [
    "in the top left",
    "at the top",
    "in the top right",
    "on the left",
    "in the middle",
    "on the right",
    "in the bottom left",
    "at the bottom",
    "in the bottom right",
];
pub const CENTER_CELL: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    pub size: SizeClass,
    /// Row-major index into the 3x3 grid.
    pub cell: usize,
    /// Centre offset from the cell centre, as a fraction of the free slack.
    pub jitter: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Painted back to front.
    pub objects: Vec<ObjectSpec>,
    pub referent: usize,
    /// Name the referent's cell even when colour and shape already identify it.
    pub mention_position: bool,
}

pub const DEFAULT_CANVAS: usize = 96;

impl SceneSpec {
    /// Random scene with 1-4 objects in distinct cells.
    pub fn random(seed: u64, height: usize, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=4usize);
        let mut cells: Vec<usize> = (0..9).collect();
        for i in 0..n {
            let j = rng.random_range(i..9);
            cells.swap(i, j);
        }
        let mut objects: Vec<ObjectSpec> = (0..n)
            .map(|i| ObjectSpec {
                shape: Shape::ALL[rng.random_range(0..3)],
                color: Color::ALL[rng.random_range(0..8)],
                size: if rng.random_bool(0.5) { SizeClass::Small } else { SizeClass::Large },
                cell: cells[i],
                jitter: (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)),
            })
            .collect();
        let referent = rng.random_range(0..n);
        // Make some scenes need the spatial phrase.
        if n > 1 && rng.random_bool(0.35) {
            let other = (referent + 1 + rng.random_range(0..n - 1)) % n;
            objects[other].shape = objects[referent].shape;
            objects[other].color = objects[referent].color;
        }
        let mention_position = objects[referent].cell != CENTER_CELL && rng.random_bool(0.3);
        Self {
            seed,
            height,
            width,
            objects,
            referent,
            mention_position,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.objects.len();
        if !(1..=4).contains(&n) {
            return Err(Error::AmbiguousScene(format!("{n} objects, expected 1-4")));
        }
        if self.referent >= n {
            return Err(Error::AmbiguousScene(format!("referent {} out of range", self.referent)));
        }
        if self.height % 32 != 0 || self.width % 32 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::shape(format!(
                "canvas {}x{} must be divisible by 32",
                self.height, self.width
            )));
        }
        for (i, a) in self.objects.iter().enumerate() {
            if a.cell >= 9 {
                return Err(Error::AmbiguousScene(format!("object {i} has cell {}", a.cell)));
            }
            for b in &self.objects[i + 1..] {
                if a.cell == b.cell {
                    return Err(Error::AmbiguousScene(format!("two objects share cell {}", a.cell)));
                }
            }
        }
        Ok(())
    }

    fn needs_position(&self) -> bool {
        let r = &self.objects[self.referent];
        self.objects
            .iter()
            .enumerate()
            .any(|(i, o)| i != self.referent && o.shape == r.shape && o.color == r.color)
    }

    pub fn expression(&self) -> String {
        let r = &self.objects[self.referent];
        let mut s = format!("the {} {}", r.color.word(), r.shape.word());
        if self.needs_position() || self.mention_position {
            s.push(' ');
            s.push_str(CELL_PHRASES[r.cell]);
        }
        s
    }

    fn geometry(&self, o: &ObjectSpec) -> (f64, f64, f64) {
        let ch = self.height as f64 / 3.0;
        let cw = self.width as f64 / 3.0;
        let r = o.size.radius_fraction() * ch.min(cw);
        let slack_y = (ch / 2.0 - r - 1.0).max(0.0);
        let slack_x = (cw / 2.0 - r - 1.0).max(0.0);
        let cy = (o.cell / 3) as f64 * ch + ch / 2.0 + o.jitter.0 * slack_y;
        let cx = (o.cell % 3) as f64 * cw + cw / 2.0 + o.jitter.1 * slack_x;
        (cy, cx, r)
    }
}

/// One image-mask-expression sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub image: RgbImage,
    pub mask: SegmentationMask,
    pub expression: String,
    pub decomposed: DecomposedExpression,
    pub category: String,
}

const BACKGROUND: [u8; 3] = [40, 40, 44];

/// Rasterise a scene into an image, referent mask and expression.
pub fn generate(spec: &SceneSpec) -> Result<Triplet> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0f_5cae);
    let mut image = RgbImage::new(w as u32, h as u32);
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    let geo: Vec<(f64, f64, f64)> = spec.objects.iter().map(|o| spec.geometry(o)).collect();
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            for (i, (o, &(cy, cx, r))) in spec.objects.iter().zip(&geo).enumerate() {
                if o.shape.contains(py - cy, px - cx, r) {
                    owner[y * w + x] = Some(i);
                }
            }
            let base = match owner[y * w + x] {
                Some(i) => spec.objects[i].color.rgb(),
                None => BACKGROUND,
            };
            let noise: i16 = rng.random_range(-6..=6);
            let px = base.map(|c| (c as i16 + noise).clamp(0, 255) as u8);
            image.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    let pixels: Vec<bool> = owner.iter().map(|o| *o == Some(spec.referent)).collect();
    let mask = SegmentationMask::new(h, w, pixels, Provenance::GroundTruth)?;
    if mask.area() == 0 {
        return Err(Error::AmbiguousScene("referent is not visible".into()));
    }
    let expression = spec.expression();
    let decomposed = decompose(
        &expression,
        &CategoryLexicon::synthetic(),
        &SpatialLexicon::default_lexicon(),
    )?;
    Ok(Triplet {
        image,
        mask,
        expression,
        decomposed,
        category: spec.objects[spec.referent].shape.word().to_string(),
    })
}

/// One line of `refs.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub image: String,
    pub mask: String,
    pub expression: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_object: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spatial_position: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

/// Seed of sample `index` in a split seeded with `seed`. Different split
/// seeds give disjoint sample seeds.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    (seed << 32) | index as u64
}

/// Write `n` samples as `images/`, `masks/` and `refs.jsonl` under `out`.
pub fn generate_split(n: usize, seed: u64, canvas: usize, out: impl AsRef<Path>) -> Result<()> {
    let out = out.as_ref();
    for sub in ["images", "masks"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let refs = out.join("refs.jsonl");
    let file = fs::File::create(&refs).map_err(|e| Error::io(&refs, e))?;
    let mut w = BufWriter::new(file);
    for i in 0..n {
        let t = generate(&SceneSpec::random(sample_seed(seed, i), canvas, canvas))?;
        let rec = CorpusRecord {
            image: format!("images/{i:05}.png"),
            mask: format!("masks/{i:05}.png"),
            expression: t.expression.clone(),
            ground_object: Some(t.decomposed.ground_object.clone()),
            spatial_position: Some(t.decomposed.spatial_position.clone()),
            category: Some(t.category.clone()),
        };
        let img_path = out.join(&rec.image);
        t.image.save(&img_path).map_err(|source| Error::Image {
            path: img_path.clone(),
            source,
        })?;
        t.mask.save_png(out.join(&rec.mask))?;
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(&refs, e))?;
    }
    w.flush().map_err(|e| Error::io(&refs, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(shape: Shape, color: Color, cell: usize) -> ObjectSpec {
        ObjectSpec {
            shape,
            color,
            size: SizeClass::Large,
            cell,
            jitter: (0.0, 0.0),
        }
    }

    #[test]
    fn single_red_circle() {
        let spec = SceneSpec {
            seed: 1,
            height: 96,
            width: 96,
            objects: vec![obj(Shape::Circle, Color::Red, 4)],
            referent: 0,
            mention_position: false,
        };
        let t = generate(&spec).unwrap();
        assert_eq!(t.expression, "the red circle");
        assert_eq!(t.decomposed.ground_object, "circle");
        assert_eq!(t.decomposed.spatial_position, "");
        // every mask pixel is inside the circle and red
        let (cy, cx, r) = spec.geometry(&spec.objects[0]);
        for y in 0..96 {
            for x in 0..96 {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                assert_eq!(t.mask.get(y, x), dy * dy + dx * dx <= r * r);
            }
        }
    }

    #[test]
    fn duplicate_description_forces_position() {
        let spec = SceneSpec {
            seed: 2,
            height: 96,
            width: 96,
            objects: vec![obj(Shape::Circle, Color::Red, 0), obj(Shape::Circle, Color::Red, 8)],
            referent: 1,
            mention_position: false,
        };
        let t = generate(&spec).unwrap();
        assert_eq!(t.expression, "the red circle in the bottom right");
        assert_eq!(t.decomposed.spatial_position, "in the bottom right");
    }

    #[test]
    fn invalid_scenes() {
        let mut spec = SceneSpec {
            seed: 2,
            height: 96,
            width: 96,
            objects: vec![obj(Shape::Circle, Color::Red, 3), obj(Shape::Square, Color::Red, 3)],
            referent: 0,
            mention_position: false,
        };
        assert!(matches!(generate(&spec), Err(Error::AmbiguousScene(_))));
        spec.objects.truncate(1);
        spec.referent = 4;
        assert!(matches!(generate(&spec), Err(Error::AmbiguousScene(_))));
        spec.objects.clear();
        assert!(matches!(generate(&spec), Err(Error::AmbiguousScene(_))));
    }

    #[test]
    fn same_seed_same_triplet() {
        let a = generate(&SceneSpec::random(77, 96, 96)).unwrap();
        let b = generate(&SceneSpec::random(77, 96, 96)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_seeds_are_disjoint() {
        assert_ne!(sample_seed(7, 0), sample_seed(8, 0));
        assert_ne!(sample_seed(7, 1), sample_seed(8, 0));
    }
}

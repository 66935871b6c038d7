//! Visual and text encoders.
//!
//! Both are small trainable stand-ins with the same tensor contracts as the
//! pre-trained backbones they replace: a 4-stage visual pyramid at strides
//! 4/8/16/32 and contextualised token embeddings with a padding mask.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, LayerNorm, Linear, Padding, ParamStore};
use crate::parser;

pub const PAD: u32 = 0;
pub const OOV: u32 = 1;
/// Stand-in token for an empty spatial fragment.
pub const NO_POSITION: u32 = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<oov>", "<no-position>"];

const EXTRA_WORDS: &str = "the a an of to in on at is this that which with and one object \
    red green blue yellow cyan magenta white orange black gray grey brown purple pink dark light \
    small large big little long short tall wide narrow round left right top bottom middle center \
    upper lower side first second third other";

/// Fixed word vocabulary with an out-of-vocabulary bucket.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: BTreeSet<String> = all.iter().cloned().collect();
        for w in words {
            let w = w.as_ref().trim().to_lowercase();
            if !w.is_empty() && seen.insert(w.clone()) {
                all.push(w);
            }
        }
        let index = all
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words: all, index }
    }

    /// Words from the bundled lexicons plus common attribute words, sorted.
    pub fn builtin() -> Self {
        let mut words = BTreeSet::new();
        for body in [
            parser::REFSEGRS_CATEGORIES,
            parser::RRSISD_CATEGORIES,
            parser::SYNTHETIC_CATEGORIES,
            parser::DEFAULT_SPATIAL,
        ] {
            for line in body.lines().filter(|l| !l.trim_start().starts_with('#')) {
                words.extend(tokenize_words(line));
            }
        }
        words.extend(EXTRA_WORDS.split_whitespace().map(str::to_string));
        Self::new(words)
    }

    /// One token per line. Special tokens are always prepended.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(body.lines().filter(|l| !SPECIALS.contains(&l.trim()))))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut body = self.words.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(OOV)
    }

    pub fn word(&self, id: u32) -> &str {
        self.words.get(id as usize).map_or(SPECIALS[1], String::as_str)
    }

    /// Whitespace tokenisation; a blank fragment yields a single OOV token.
    pub fn tokenize(&self, fragment: &str) -> Vec<u32> {
        let ids: Vec<u32> = tokenize_words(fragment).iter().map(|w| self.id(w)).collect();
        if ids.is_empty() {
            vec![OOV]
        } else {
            ids
        }
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }
}

fn tokenize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Four visual feature maps `(B, C_i, H / 2^(i+1), W / 2^(i+1))`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub stages: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(stages: Vec<Tensor>) -> Result<Self> {
        let p = Self { stages };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(Error::shape(format!(
                "pyramid needs 4 stages, got {}",
                self.stages.len()
            )));
        }
        let (b, _, h4, w4) = self.stages[3].dims4()?;
        for (i, s) in self.stages.iter().enumerate() {
            let (bi, _, h, w) = s.dims4()?;
            let f = 1 << (3 - i);
            if bi != b || h != h4 * f || w != w4 * f {
                return Err(Error::shape(format!(
                    "stage {} has grid {h}x{w}, expected {}x{}",
                    i + 1,
                    h4 * f,
                    w4 * f
                )));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.dims()[1]).collect()
    }

    pub fn grids(&self) -> Vec<(usize, usize)> {
        self.stages
            .iter()
            .map(|s| (s.dims()[2], s.dims()[3]))
            .collect()
    }
}

/// Token embeddings `(B, N, D)` with a `(B, N)` mask (1 = real token).
#[derive(Clone, Debug)]
pub struct LinguisticFeatures {
    pub embeddings: Tensor,
    pub mask: Tensor,
}

impl LinguisticFeatures {
    pub fn new(embeddings: Tensor, mask: Tensor) -> Result<Self> {
        let (b, n, _) = embeddings.dims3()?;
        if mask.dims() != [b, n] {
            return Err(Error::ShapeMismatch {
                expected: vec![b, n],
                actual: mask.dims().to_vec(),
            });
        }
        if n == 0 {
            return Err(Error::EmptyText);
        }
        let mask = mask.to_dtype(embeddings.dtype())?;
        Ok(Self { embeddings, mask })
    }

    pub fn batch(&self) -> usize {
        self.embeddings.dims()[0]
    }

    pub fn len(&self) -> usize {
        self.embeddings.dims()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dims()[2]
    }

    pub fn mask_vec(&self) -> Result<Vec<Vec<bool>>> {
        Ok(self
            .mask
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?
            .into_iter()
            .map(|r| r.into_iter().map(|m| m > 0.5).collect())
            .collect())
    }

    /// Rows `start..start + len` of the batch.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            embeddings: self.embeddings.narrow(0, start, len)?,
            mask: self.mask.narrow(0, start, len)?,
        })
    }

    /// Append `extra` padding tokens whose embeddings are `filler`.
    pub fn pad_with(&self, extra: usize, filler: f64) -> Result<Self> {
        let (b, _, d) = self.embeddings.dims3()?;
        let dt = self.embeddings.dtype();
        let dev = self.embeddings.device();
        let emb = Tensor::full(filler, (b, extra, d), dev)?.to_dtype(dt)?;
        let m = Tensor::zeros((b, extra), dt, dev)?;
        Ok(Self {
            embeddings: Tensor::cat(&[&self.embeddings, &emb], 1)?,
            mask: Tensor::cat(&[&self.mask, &m], 1)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VisualConfig {
    pub channels: [usize; 4],
}

impl Default for VisualConfig {
    fn default() -> Self {
        Self {
            channels: [32, 64, 128, 256],
        }
    }
}

/// One encoder block: a strided downsampling convolution followed by a
/// residual 3x3 convolution, each normalised over channels.
struct VisualBlock {
    down: Conv2d,
    down_norm: LayerNorm,
    conv: Conv2d,
    conv_norm: LayerNorm,
}

impl VisualBlock {
    fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            down: Conv2d::new(store, &format!("{name}.down"), input, output, stride, stride, 0, Padding::Zeros)?,
            down_norm: LayerNorm::new(store, &format!("{name}.down_norm"), output)?,
            conv: Conv2d::new(store, &format!("{name}.conv"), output, output, 3, 1, 1, Padding::Zeros)?,
            conv_norm: LayerNorm::new(store, &format!("{name}.conv_norm"), output)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = nn::channel_norm(&self.down.forward(x)?, &self.down_norm)?;
        let r = nn::channel_norm(&self.conv.forward(&h.relu()?)?, &self.conv_norm)?;
        Ok((h + r)?.relu()?)
    }
}

/// Strided-convolution pyramid encoder. Block 1 is a stride-4 stem, blocks
/// 2-4 each halve the grid.
pub struct VisualEncoder {
    blocks: Vec<VisualBlock>,
    channels: [usize; 4],
}

impl VisualEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: VisualConfig) -> Result<Self> {
        let c = cfg.channels;
        let mut blocks = Vec::with_capacity(4);
        blocks.push(VisualBlock::new(store, &format!("{name}.block1"), 3, c[0], 4)?);
        for i in 1..4 {
            blocks.push(VisualBlock::new(store, &format!("{name}.block{}", i + 1), c[i - 1], c[i], 2)?);
        }
        Ok(Self {
            blocks,
            channels: c,
        })
    }

    pub fn channels(&self) -> [usize; 4] {
        self.channels
    }

    pub fn check_input(image: &Tensor) -> Result<()> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 || h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape(format!(
                "image must be (B, 3, H, W) with H, W divisible by 32; got {:?}",
                image.dims()
            )));
        }
        Ok(())
    }

    /// Encoder block `index` (0-based). Block 0 expects the raw image in [0, 1].
    pub fn block(&self, index: usize, x: &Tensor) -> Result<Tensor> {
        let x = if index == 0 {
            Self::check_input(x)?;
            (x - 0.5)?
        } else {
            x.clone()
        };
        self.blocks[index].forward(&x)
    }

    /// Plain pyramid, without any cross-modal fusion between blocks.
    pub fn encode_image(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let mut x = image.clone();
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            x = self.block(i, &x)?;
            stages.push(x.clone());
        }
        FeaturePyramid::new(stages)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub max_len: usize,
}

/// Embedding table plus one pre-norm self-attention block.
pub struct TextEncoder {
    table: candle_core::Var,
    positions: candle_core::Var,
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    mlp1: Linear,
    mlp2: Linear,
    cfg: TextConfig,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: TextConfig) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            table: store.uniform(&format!("{name}.embedding"), &[cfg.vocab_size, d], 1.0)?,
            positions: store.uniform(&format!("{name}.positions"), &[cfg.max_len, d], 0.1)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            q: Linear::new(store, &format!("{name}.attn.q"), d, d)?,
            k: Linear::new(store, &format!("{name}.attn.k"), d, d)?,
            v: Linear::new(store, &format!("{name}.attn.v"), d, d)?,
            o: Linear::new(store, &format!("{name}.attn.o"), d, d)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            mlp1: Linear::new(store, &format!("{name}.mlp.fc1"), d, 2 * d)?,
            mlp2: Linear::new(store, &format!("{name}.mlp.fc2"), 2 * d, d)?,
            cfg,
        })
    }

    pub fn config(&self) -> TextConfig {
        self.cfg
    }

    /// Encode one sequence padded to `max_len`.
    pub fn encode_text(&self, tokens: &[u32]) -> Result<LinguisticFeatures> {
        self.encode_padded(&[tokens], self.cfg.max_len)
    }

    /// Encode a batch padded to its longest member.
    pub fn encode_batch(&self, seqs: &[&[u32]]) -> Result<LinguisticFeatures> {
        let n = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        self.encode_padded(seqs, n)
    }

    pub fn encode_padded(&self, seqs: &[&[u32]], pad_to: usize) -> Result<LinguisticFeatures> {
        let b = seqs.len();
        if b == 0 {
            return Err(Error::EmptyText);
        }
        for s in seqs {
            if s.is_empty() {
                return Err(Error::EmptyText);
            }
            if s.len() > self.cfg.max_len || s.len() > pad_to {
                return Err(Error::TextTooLong {
                    len: s.len(),
                    max_len: self.cfg.max_len.min(pad_to),
                });
            }
            if let Some(&bad) = s.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
                return Err(Error::Config(format!("token id {bad} outside vocabulary")));
            }
        }
        let n = pad_to;
        let mut ids = Vec::with_capacity(b * n);
        let mut mask = Vec::with_capacity(b * n);
        for s in seqs {
            for j in 0..n {
                ids.push(s.get(j).copied().unwrap_or(PAD));
                mask.push(if j < s.len() { 1.0 } else { 0.0 });
            }
        }
        let dev = self.table.device();
        let dt = self.table.dtype();
        let ids = Tensor::from_vec(ids, b * n, dev)?;
        let mask = Tensor::from_vec(mask, (b, n), dev)?.to_dtype(dt)?;

        let x = self.table.index_select(&ids, 0)?.reshape((b, n, self.cfg.dim))?;
        let x = x.broadcast_add(&self.positions.narrow(0, 0, n)?)?;

        let h = self.ln1.forward(&x)?;
        let (q, k, v) = (self.q.forward(&h)?, self.k.forward(&h)?, self.v.forward(&h)?);
        let (att, _) = nn::masked_attention(&q, &k, &v, &mask, 1.0 / (self.cfg.dim as f64).sqrt())?;
        let x = (x + self.o.forward(&att)?)?;
        let h = self.ln2.forward(&x)?;
        let x = (&x + self.mlp2.forward(&self.mlp1.forward(&h)?.gelu_erf()?)?)?;
        LinguisticFeatures::new(x, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text_encoder(dtype: DType) -> TextEncoder {
        let mut s = ParamStore::new(3, dtype);
        TextEncoder::new(
            &mut s,
            "text",
            TextConfig {
                vocab_size: 40,
                dim: 8,
                max_len: 8,
            },
        )
        .unwrap()
    }

    #[test]
    fn tokenize_cases() {
        let v = Vocabulary::builtin();
        assert_eq!(v.tokenize("van"), vec![v.id("van")]);
        assert_ne!(v.id("van"), OOV);
        assert_eq!(v.tokenize(""), vec![OOV]);
        assert_eq!(v.tokenize("the gray van").len(), 3);
        assert_eq!(v.tokenize("zzqx"), vec![OOV]);
        assert_eq!(v.detokenize(&v.tokenize("The gray VAN")), "the gray van");
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = Vocabulary::builtin();
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }

    #[test]
    fn padding_layout() {
        let enc = text_encoder(DType::F64);
        let f = enc.encode_text(&[5, 6, 7, 8, 9]).unwrap();
        assert_eq!(f.embeddings.dims(), &[1, 8, 8]);
        assert_eq!(
            f.mask_vec().unwrap()[0],
            vec![true, true, true, true, true, false, false, false]
        );
        let one = enc.encode_batch(&[&[5]]).unwrap();
        assert_eq!(one.embeddings.dims(), &[1, 1, 8]);
        assert_eq!(one.mask_vec().unwrap()[0], vec![true]);
    }

    #[test]
    fn empty_and_long_text_rejected() {
        let enc = text_encoder(DType::F64);
        assert!(matches!(enc.encode_text(&[]), Err(Error::EmptyText)));
        assert!(matches!(
            enc.encode_text(&[3; 9]),
            Err(Error::TextTooLong { len: 9, .. })
        ));
    }

    #[test]
    fn deterministic_and_padding_independent() {
        let enc = text_encoder(DType::F64);
        let a = enc.encode_batch(&[&[4, 5, 6]]).unwrap();
        let b = enc.encode_batch(&[&[4, 5, 6]]).unwrap();
        let padded = enc.encode_text(&[4, 5, 6]).unwrap();
        let diff = |x: &Tensor, y: &Tensor| {
            (x - y).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
        };
        assert_eq!(diff(&a.embeddings, &b.embeddings), 0.0);
        let head = padded.embeddings.narrow(1, 0, 3).unwrap();
        assert!(diff(&a.embeddings, &head) < 1e-12);
    }

    #[test]
    fn pyramid_shapes() {
        let mut s = ParamStore::new(1, DType::F32);
        let enc = VisualEncoder::new(&mut s, "visual", VisualConfig { channels: [4, 8, 8, 8] }).unwrap();
        let dev = candle_core::Device::Cpu;
        for (h, w) in [(32, 32), (480, 320), (96, 96)] {
            let img = Tensor::zeros((1, 3, h, w), DType::F32, &dev).unwrap();
            let p = enc.encode_image(&img).unwrap();
            let grids = p.grids();
            for (i, g) in grids.iter().enumerate() {
                assert_eq!(*g, (h >> (i + 2), w >> (i + 2)));
            }
        }
        let bad = Tensor::zeros((1, 3, 40, 32), DType::F32, &dev).unwrap();
        assert!(matches!(enc.encode_image(&bad), Err(Error::Shape(_))));
    }
}

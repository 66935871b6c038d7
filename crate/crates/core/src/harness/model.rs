//! The full network: encoders, four alignment modules, the multi-scale
//! enhancement stage and the decoder.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, Var};

use crate::encoders::{
    FeaturePyramid, LinguisticFeatures, TextConfig, TextEncoder, VisualConfig, VisualEncoder,
    Vocabulary, NO_POSITION,
};
use crate::error::{Error, Result};
use crate::fiam::{Fiam, FiamConfig, FiamToggles};
use crate::head::{self, Decoder, LossTensors, SegmentationMask};
use crate::nn::ParamStore;
use crate::parser::DecomposedExpression;
use crate::tmem::{Tmem, TmemConfig};

use super::config::RunConfig;

/// Token ids of the three fragments of one expression.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedExpression {
    pub context: Vec<u32>,
    pub object: Vec<u32>,
    pub spatial: Vec<u32>,
}

/// Model input for `B` samples.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `(B, 3, H, W)` in [0, 1].
    pub images: Tensor,
    pub texts: Vec<TokenizedExpression>,
    /// `(B, H, W)` binary targets, when known.
    pub targets: Option<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `(B, H, W)` mask logits.
    pub logits: Tensor,
    /// Named intermediates, filled when tracing.
    pub trace: BTreeMap<String, Tensor>,
}

pub struct RefSegModel {
    pub store: ParamStore,
    pub vocab: Vocabulary,
    pub text: TextEncoder,
    pub visual: VisualEncoder,
    pub fiams: Vec<Fiam>,
    pub tmem: Tmem,
    pub decoder: Decoder,
    pub config: RunConfig,
}

impl RefSegModel {
    pub fn new(config: &RunConfig, vocab: Vocabulary, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed, dtype);
        let channels = config.channels;
        let text = TextEncoder::new(
            &mut store,
            "text",
            TextConfig {
                vocab_size: vocab.len(),
                dim: config.text_dim,
                max_len: config.max_text_len,
            },
        )?;
        let visual = VisualEncoder::new(&mut store, "visual", VisualConfig { channels })?;
        let toggles = FiamToggles {
            enabled: config.fiam,
            channel_modulation: config.channel_modulation,
            object_branch: config.object_branch,
            spatial_branch: config.spatial_branch,
        };
        let fiams = (0..4)
            .map(|i| {
                Fiam::new(
                    &mut store,
                    &format!("fiam{}", i + 1),
                    FiamConfig {
                        channels: channels[i],
                        text_dim: config.text_dim,
                        reduction: config.reduction,
                        toggles,
                    },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let tmem = Tmem::new(
            &mut store,
            "tmem",
            TmemConfig {
                stage_channels: channels,
                text_dim: config.text_dim,
                attn_dim: config.attn_dim,
                mlp_hidden: config.mlp_hidden,
                blocks: config.tmem_blocks,
                pos_embedding: config.pos_embedding,
                max_grid: config.max_grid,
                mode: config.tmem,
                upsample: config.upsample,
            },
        )?;
        let decoder = Decoder::new(&mut store, "decoder", channels, config.decoder_dim)?;
        Ok(Self {
            store,
            vocab,
            text,
            visual,
            fiams,
            tmem,
            decoder,
            config: config.clone(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Token ids for the three fragments. Each is truncated to `max_text_len`;
    /// an empty spatial fragment becomes the single no-position token.
    pub fn tokenize(&self, expr: &DecomposedExpression) -> TokenizedExpression {
        let max = self.config.max_text_len;
        let cut = |mut v: Vec<u32>| {
            v.truncate(max);
            v
        };
        let spatial = if expr.spatial_position.trim().is_empty() {
            vec![NO_POSITION]
        } else {
            cut(self.vocab.tokenize(&expr.spatial_position))
        };
        TokenizedExpression {
            context: cut(self.vocab.tokenize(&expr.context)),
            object: cut(self.vocab.tokenize(&expr.ground_object)),
            spatial,
        }
    }

    /// Encode the fragments of every sample in one pass.
    pub fn encode_texts(
        &self,
        texts: &[TokenizedExpression],
    ) -> Result<(LinguisticFeatures, LinguisticFeatures, LinguisticFeatures)> {
        let b = texts.len();
        let seqs: Vec<&[u32]> = texts
            .iter()
            .map(|t| t.context.as_slice())
            .chain(texts.iter().map(|t| t.object.as_slice()))
            .chain(texts.iter().map(|t| t.spatial.as_slice()))
            .collect();
        let all = self.text.encode_batch(&seqs)?;
        Ok((all.narrow(0, b)?, all.narrow(b, b)?, all.narrow(2 * b, b)?))
    }

    pub fn forward(&self, batch: &Batch, trace: bool) -> Result<ForwardOutput> {
        if batch.images.dims4()?.0 != batch.texts.len() {
            return Err(Error::shape(format!(
                "{} images but {} expressions",
                batch.images.dims()[0],
                batch.texts.len()
            )));
        }
        let (context, object, spatial) = self.encode_texts(&batch.texts)?;
        self.forward_features(&batch.images, &context, &object, &spatial, trace)
    }

    /// Forward pass from already encoded text features.
    pub fn forward_features(
        &self,
        images: &Tensor,
        context: &LinguisticFeatures,
        object: &LinguisticFeatures,
        spatial: &LinguisticFeatures,
        trace: bool,
    ) -> Result<ForwardOutput> {
        let (_, _, h, w) = images.dims4()?;
        let mut traced = BTreeMap::new();
        let mut x = images.to_dtype(self.dtype())?;
        let mut stages = Vec::with_capacity(4);
        for (i, fiam) in self.fiams.iter().enumerate() {
            let v = self.visual.block(i, &x)?;
            let out = fiam.forward(&v, context, object, spatial)?;
            if trace {
                traced.insert(format!("stage{}.visual", i + 1), v.clone());
                for (k, t) in out.intermediates.named() {
                    traced.insert(format!("stage{}.{k}", i + 1), t);
                }
                traced.insert(format!("stage{}.fused", i + 1), out.fused.clone());
            }
            x = out.fused;
            stages.push(x.clone());
        }
        let pyramid = FeaturePyramid::new(stages)?;
        let enhanced = self.tmem.forward(&pyramid, context)?;
        let logits = self.decoder.decode(&enhanced.pyramid, (h, w))?;
        if trace {
            for (j, z) in enhanced.states.iter().enumerate() {
                traced.insert(format!("tmem.z{j}"), z.clone());
            }
            for (i, s) in enhanced.pyramid.stages.iter().enumerate() {
                traced.insert(format!("tmem.out{}", i + 1), s.clone());
            }
            traced.insert("logits".into(), logits.clone());
        }
        Ok(ForwardOutput {
            logits,
            trace: traced,
        })
    }

    pub fn loss(&self, batch: &Batch) -> Result<(ForwardOutput, LossTensors)> {
        let target = batch
            .targets
            .as_ref()
            .ok_or_else(|| Error::Config("batch has no targets".into()))?;
        let out = self.forward(batch, false)?;
        let loss = head::loss_tensors(&out.logits, target, self.config.dice_weight)?;
        Ok((out, loss))
    }

    pub fn predict(&self, batch: &Batch) -> Result<Vec<SegmentationMask>> {
        let logits = self.forward(batch, false)?.logits;
        (0..batch.len())
            .map(|i| SegmentationMask::from_logits(&logits.get(i)?))
            .collect()
    }

    /// Prefixes of the parameters used under the current toggles.
    pub fn active_prefixes(&self) -> Vec<String> {
        let mut v: Vec<String> = ["text.", "visual.", "decoder."].map(String::from).to_vec();
        for f in &self.fiams {
            v.extend(f.active_prefixes());
        }
        v.extend(self.tmem.active_prefixes());
        v
    }

    pub fn is_active(&self, name: &str) -> bool {
        self.active_prefixes().iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Parameters that receive gradient updates.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        let prefixes = self.active_prefixes();
        self.store
            .iter()
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p.as_str())))
            .map(|(n, v)| (n.to_string(), v.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tmem::TmemMode;
    use candle_core::Device;

    pub(crate) fn tiny_config() -> RunConfig {
        RunConfig {
            image_size: 32,
            channels: [4, 6, 8, 10],
            text_dim: 8,
            max_text_len: 8,
            attn_dim: 8,
            mlp_hidden: 12,
            tmem_blocks: 1,
            reduction: 2,
            decoder_dim: 4,
            max_grid: 4,
            ..RunConfig::default()
        }
    }

    fn batch(model: &RefSegModel) -> Batch {
        let images = Tensor::rand(0f32, 1f32, (2, 3, 32, 32), &Device::Cpu).unwrap();
        let e1 = DecomposedExpression {
            context: "the red circle on the left".into(),
            ground_object: "circle".into(),
            spatial_position: "on the left".into(),
        };
        let e2 = DecomposedExpression {
            context: "square".into(),
            ground_object: "square".into(),
            spatial_position: String::new(),
        };
        Batch {
            images,
            texts: vec![model.tokenize(&e1), model.tokenize(&e2)],
            targets: None,
        }
    }

    #[test]
    fn forward_shapes_and_trace() {
        let m = RefSegModel::new(&tiny_config(), Vocabulary::builtin(), DType::F32).unwrap();
        let b = batch(&m);
        assert_eq!(b.texts[1].spatial, vec![NO_POSITION]);
        let out = m.forward(&b, true).unwrap();
        assert_eq!(out.logits.dims(), &[2, 32, 32]);
        for key in ["stage1.F_GOB", "stage4.F_OPAB", "stage2.c", "tmem.z0", "tmem.z1", "logits"] {
            assert!(out.trace.contains_key(key), "{key}");
        }
        assert_eq!(m.predict(&b).unwrap().len(), 2);
    }

    #[test]
    fn disabled_branches_are_not_trainable() {
        let mut cfg = tiny_config();
        cfg.object_branch = false;
        cfg.tmem = TmemMode::Off;
        let m = RefSegModel::new(&cfg, Vocabulary::builtin(), DType::F32).unwrap();
        let names: Vec<String> = m.trainable().into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().all(|n| !n.contains(".object.") && !n.contains(".spatial.")));
        assert!(names.iter().all(|n| !n.starts_with("tmem.block") && !n.starts_with("tmem.pos")));
        assert!(names.iter().any(|n| n.starts_with("tmem.scale_gate")));
        assert!(names.len() < m.store.len());
    }

    #[test]
    fn truncates_long_fragments() {
        let m = RefSegModel::new(&tiny_config(), Vocabulary::builtin(), DType::F32).unwrap();
        let e = DecomposedExpression {
            context: "a ".repeat(20),
            ground_object: "car".into(),
            spatial_position: String::new(),
        };
        assert_eq!(m.tokenize(&e).context.len(), 8);
    }
}

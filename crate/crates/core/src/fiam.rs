//! Fine-grained image-text alignment.
//!
//! One instance fuses a single encoder stage with the context, ground-object
//! and spatial-position text features:
//!
//! ```text
//! F_IG   = attend(F_I, F_G)              F_GOB = gate(F_IG) * F_IG
//! F_IS   = attend(F_I, F_S)              F_SPB = sigmoid(conv1x1([avg_c F_IS, max_c F_IS]))
//! F_OPAB = F_GOB * F_SPB
//! F_IC   = attend(F_I, F_C)              F^_IC = gate(F_IC) * F_IC
//! F_IO   = F^_IC + F_OPAB
//! c      = sigmoid(W2 relu(W1 avgpool(F_IO)))
//! out    = c * F_IO + F_I
//! ```
//!
//! Visual maps are flattened row-major (H then W) into `(B, H*W, C)` tokens.

use std::collections::BTreeMap;

use candle_core::{Tensor, D};

use crate::encoders::LinguisticFeatures;
use crate::error::{Error, Result};
use crate::nn::{self, Linear, ParamStore};

/// Query/key/value projections for attending visual tokens to text tokens.
/// Queries and values keep the visual width `C`, keys map text `D -> C`.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, text_dim: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::no_bias(store, &format!("{name}.q"), channels, channels)?,
            k: Linear::no_bias(store, &format!("{name}.k"), text_dim, channels)?,
            v: Linear::no_bias(store, &format!("{name}.v"), text_dim, channels)?,
        })
    }
}

/// Softmax attention of visual tokens `(B, HW, C)` over unmasked text tokens,
/// scaled by `1/sqrt(C)`. Returns `(output, weights)`.
pub fn cross_attend_weights(
    visual: &Tensor,
    text: &LinguisticFeatures,
    proj: &CrossAttention,
) -> Result<(Tensor, Tensor)> {
    let (b, _, c) = visual.dims3()?;
    if text.batch() != b {
        return Err(Error::shape(format!(
            "visual batch {b} vs text batch {}",
            text.batch()
        )));
    }
    nn::check_mask(&text.mask)?;
    let q = proj.q.forward(visual)?;
    let k = proj.k.forward(&text.embeddings)?;
    let v = proj.v.forward(&text.embeddings)?;
    nn::masked_attention(&q, &k, &v, &text.mask, 1.0 / (c as f64).sqrt())
}

pub fn cross_attend(visual: &Tensor, text: &LinguisticFeatures, proj: &CrossAttention) -> Result<Tensor> {
    Ok(cross_attend_weights(visual, text, proj)?.0)
}

/// `tanh(l2(relu(l1(x)))) * x`, feature-wise over the last axis.
#[derive(Clone, Debug)]
pub struct TanhGate {
    pub l1: Linear,
    pub l2: Linear,
}

impl TanhGate {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}.fc1"), channels, channels)?,
            l2: Linear::new(store, &format!("{name}.fc2"), channels, channels)?,
        })
    }

    pub fn gate(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.l2.forward(&self.l1.forward(x)?.relu()?)?.tanh()?)
    }
}

pub fn tanh_gate(x: &Tensor, gate: &TanhGate) -> Result<Tensor> {
    Ok((gate.gate(x)? * x)?)
}

/// Spatial prior from channel-wise average and max pooling followed by a
/// 1x1 convolution over the two pooled maps.
#[derive(Clone, Debug)]
pub struct SpatialPrior {
    pub conv: Linear,
}

impl SpatialPrior {
    pub fn new(store: &mut ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            conv: Linear::new(store, &format!("{name}.conv"), 2, 1)?,
        })
    }

    /// `(B, HW, C)` -> `(B, HW, 1)` in (0, 1).
    pub fn forward(&self, attended: &Tensor) -> Result<Tensor> {
        let avg = attended.mean_keepdim(D::Minus1)?;
        let max = attended.max_keepdim(D::Minus1)?;
        let pooled = Tensor::cat(&[&avg, &max], D::Minus1)?;
        nn::sigmoid(&self.conv.forward(&pooled)?)
    }
}

/// Squeeze-excitation style channel weights.
#[derive(Clone, Debug)]
pub struct ChannelModulation {
    pub w1: Linear,
    pub w2: Linear,
}

impl ChannelModulation {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = (channels / reduction.max(1)).max(1);
        Ok(Self {
            w1: Linear::new(store, &format!("{name}.w1"), channels, hidden)?,
            w2: Linear::new(store, &format!("{name}.w2"), hidden, channels)?,
        })
    }
}

/// `sigmoid(W2 relu(W1 mean_hw(x)))` for tokens `(B, HW, C)`; returns `(B, 1, C)`.
pub fn channel_modulate(tokens: &Tensor, cm: &ChannelModulation) -> Result<Tensor> {
    let pooled = tokens.mean_keepdim(1)?;
    nn::sigmoid(&cm.w2.forward(&cm.w1.forward(&pooled)?.relu()?)?)
}

/// Which parts of the module are active. With `enabled = false` only the
/// context alignment runs (plain pixel-word fusion with a residual).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FiamToggles {
    pub enabled: bool,
    pub channel_modulation: bool,
    pub object_branch: bool,
    pub spatial_branch: bool,
}

impl Default for FiamToggles {
    fn default() -> Self {
        Self {
            enabled: true,
            channel_modulation: true,
            object_branch: true,
            spatial_branch: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FiamConfig {
    pub channels: usize,
    pub text_dim: usize,
    pub reduction: usize,
    pub toggles: FiamToggles,
}

/// Parameters of one alignment module.
pub struct Fiam {
    pub object_attn: CrossAttention,
    pub object_gate: TanhGate,
    pub spatial_attn: CrossAttention,
    pub spatial_prior: SpatialPrior,
    pub context_attn: CrossAttention,
    pub context_gate: TanhGate,
    pub channel_mod: ChannelModulation,
    pub cfg: FiamConfig,
    name: String,
}

/// Intermediate tensors in token layout `(B, HW, *)`.
#[derive(Clone, Debug, Default)]
pub struct FiamIntermediates {
    pub object_attended: Option<Tensor>,
    pub object_gated: Option<Tensor>,
    pub spatial_attended: Option<Tensor>,
    pub spatial_prior: Option<Tensor>,
    pub opab: Option<Tensor>,
    pub context_attended: Option<Tensor>,
    pub context_gated: Option<Tensor>,
    pub combined: Option<Tensor>,
    pub channel_weights: Option<Tensor>,
}

impl FiamIntermediates {
    pub fn named(&self) -> BTreeMap<&'static str, Tensor> {
        [
            ("F_IG", &self.object_attended),
            ("F_GOB", &self.object_gated),
            ("F_IS", &self.spatial_attended),
            ("F_SPB", &self.spatial_prior),
            ("F_OPAB", &self.opab),
            ("F_IC", &self.context_attended),
            ("F_IC_hat", &self.context_gated),
            ("F_IO", &self.combined),
            ("c", &self.channel_weights),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.clone().map(|t| (k, t)))
        .collect()
    }
}

#[derive(Clone, Debug)]
pub struct FiamOutput {
    /// Same shape as the visual input.
    pub fused: Tensor,
    pub intermediates: FiamIntermediates,
}

impl Fiam {
    pub fn new(store: &mut ParamStore, name: &str, cfg: FiamConfig) -> Result<Self> {
        let (c, d) = (cfg.channels, cfg.text_dim);
        Ok(Self {
            object_attn: CrossAttention::new(store, &format!("{name}.object.attn"), c, d)?,
            object_gate: TanhGate::new(store, &format!("{name}.object.gate"), c)?,
            spatial_attn: CrossAttention::new(store, &format!("{name}.spatial.attn"), c, d)?,
            spatial_prior: SpatialPrior::new(store, &format!("{name}.spatial.prior"))?,
            context_attn: CrossAttention::new(store, &format!("{name}.context.attn"), c, d)?,
            context_gate: TanhGate::new(store, &format!("{name}.context.gate"), c)?,
            channel_mod: ChannelModulation::new(store, &format!("{name}.channel"), c, cfg.reduction)?,
            cfg,
            name: name.to_string(),
        })
    }

    /// Parameter-name prefixes that take part in the forward pass under the
    /// current toggles.
    pub fn active_prefixes(&self) -> Vec<String> {
        let t = self.cfg.toggles;
        let mut v = vec![format!("{}.context.", self.name)];
        if t.enabled {
            if t.object_branch {
                v.push(format!("{}.object.", self.name));
                if t.spatial_branch {
                    v.push(format!("{}.spatial.", self.name));
                }
            }
            if t.channel_modulation {
                v.push(format!("{}.channel.", self.name));
            }
        }
        v
    }

    /// Names of the layers whose zeroing silences every branch, leaving the
    /// residual path only.
    pub fn branch_output_prefixes(&self) -> [String; 2] {
        [
            format!("{}.object.gate.fc2.", self.name),
            format!("{}.context.gate.fc2.", self.name),
        ]
    }

    /// Object-position alignment block on tokens `(B, HW, C)`.
    /// Returns `None` when the object branch is disabled.
    pub fn opab(
        &self,
        visual: &Tensor,
        object: &LinguisticFeatures,
        spatial: &LinguisticFeatures,
        inter: &mut FiamIntermediates,
    ) -> Result<Option<Tensor>> {
        let t = self.cfg.toggles;
        if !t.object_branch {
            return Ok(None);
        }
        let f_ig = cross_attend(visual, object, &self.object_attn)?;
        let f_gob = tanh_gate(&f_ig, &self.object_gate)?;
        let out = if t.spatial_branch {
            let f_is = cross_attend(visual, spatial, &self.spatial_attn)?;
            let f_spb = self.spatial_prior.forward(&f_is)?;
            let out = f_gob.broadcast_mul(&f_spb)?;
            inter.spatial_attended = Some(f_is);
            inter.spatial_prior = Some(f_spb);
            out
        } else {
            f_gob.clone()
        };
        inter.object_attended = Some(f_ig);
        inter.object_gated = Some(f_gob);
        inter.opab = Some(out.clone());
        Ok(Some(out))
    }

    /// Pixel-word attention against the full expression, then a tanh gate.
    pub fn context_align(
        &self,
        visual: &Tensor,
        context: &LinguisticFeatures,
        inter: &mut FiamIntermediates,
    ) -> Result<Tensor> {
        let f_ic = cross_attend(visual, context, &self.context_attn)?;
        let gated = tanh_gate(&f_ic, &self.context_gate)?;
        inter.context_attended = Some(f_ic);
        inter.context_gated = Some(gated.clone());
        Ok(gated)
    }

    /// Fuse a `(B, C, H, W)` stage with the three text features.
    pub fn forward(
        &self,
        visual: &Tensor,
        context: &LinguisticFeatures,
        object: &LinguisticFeatures,
        spatial: &LinguisticFeatures,
    ) -> Result<FiamOutput> {
        let (_, c, h, w) = visual.dims4()?;
        if c != self.cfg.channels {
            return Err(Error::shape(format!(
                "alignment module built for {} channels, got {c}",
                self.cfg.channels
            )));
        }
        let tokens = nn::to_tokens(visual)?;
        let mut inter = FiamIntermediates::default();
        let t = self.cfg.toggles;

        let context_term = self.context_align(&tokens, context, &mut inter)?;
        let combined = if t.enabled {
            match self.opab(&tokens, object, spatial, &mut inter)? {
                Some(opab) => (context_term + opab)?,
                None => context_term,
            }
        } else {
            context_term
        };
        let modulated = if t.enabled && t.channel_modulation {
            let weights = channel_modulate(&combined, &self.channel_mod)?;
            let m = combined.broadcast_mul(&weights)?;
            inter.channel_weights = Some(weights);
            m
        } else {
            combined.clone()
        };
        inter.combined = Some(combined);
        let fused = nn::from_tokens(&(modulated + &tokens)?, h, w)?;
        Ok(FiamOutput {
            fused,
            intermediates: inter,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn text(vals: &[f64], b: usize, n: usize, d: usize, mask: &[f64]) -> LinguisticFeatures {
        let dev = Device::Cpu;
        LinguisticFeatures::new(
            Tensor::from_vec(vals.to_vec(), (b, n, d), &dev).unwrap(),
            Tensor::from_vec(mask.to_vec(), (b, n), &dev).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn all_masked_text_is_an_error() {
        let mut s = ParamStore::new(0, DType::F64);
        let p = CrossAttention::new(&mut s, "a", 2, 2).unwrap();
        let vis = Tensor::ones((1, 3, 2), DType::F64, &Device::Cpu).unwrap();
        let t = text(&[1.0, 2.0, 3.0, 4.0], 1, 2, 2, &[0.0, 0.0]);
        assert!(matches!(cross_attend(&vis, &t, &p), Err(Error::AllMasked { row: 0 })));
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut s = ParamStore::new(0, DType::F64);
        let p = CrossAttention::new(&mut s, "a", 3, 2).unwrap();
        let vis = Tensor::randn(0f64, 1.0, (1, 4, 3), &Device::Cpu).unwrap();
        let t = text(&[0.3, -0.7], 1, 1, 2, &[1.0]);
        let out = cross_attend(&vis, &t, &p).unwrap();
        let v = p.v.forward(&t.embeddings).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for row in out.get(0).unwrap().to_vec2::<f64>().unwrap() {
            for (a, b) in row.iter().zip(&v) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_gate_output_layer_kills_the_gate() {
        let mut s = ParamStore::new(0, DType::F64);
        let g = TanhGate::new(&mut s, "g", 3).unwrap();
        s.zero_prefix("g.fc2").unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 5, 3), &Device::Cpu).unwrap();
        let y = tanh_gate(&x, &g).unwrap();
        assert_eq!(y.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn zero_w2_gives_half() {
        let mut s = ParamStore::new(0, DType::F64);
        let cm = ChannelModulation::new(&mut s, "cm", 8, 4).unwrap();
        s.zero_prefix("cm.w2").unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 6, 8), &Device::Cpu).unwrap();
        let c = channel_modulate(&x, &cm).unwrap();
        assert_eq!(c.dims(), &[2, 1, 8]);
        for v in c.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn active_prefixes_follow_toggles() {
        let mut s = ParamStore::new(0, DType::F64);
        let mut cfg = FiamConfig {
            channels: 4,
            text_dim: 4,
            reduction: 4,
            toggles: FiamToggles::default(),
        };
        cfg.toggles.object_branch = false;
        let f = Fiam::new(&mut s, "f", cfg).unwrap();
        assert_eq!(f.active_prefixes(), vec!["f.context.", "f.channel."]);
    }
}

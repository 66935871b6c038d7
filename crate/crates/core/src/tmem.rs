//! Text-aware multi-scale enhancement.
//!
//! The four fused stages are average-pooled to the stage-4 grid and
//! concatenated along channels. The resulting grid tokens go through `L_N`
//! pre-norm blocks whose attention takes queries from the grid and keys and
//! values from the context text features, followed by a GELU MLP. The
//! enhanced grid is split back per stage, upsampled, and blended with the
//! original stage through a learned sigmoid gate.

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoders::{FeaturePyramid, LinguisticFeatures};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, LayerNorm, Linear, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TmemMode {
    /// Grid queries attend to context text tokens.
    Text,
    /// Text-free grid self-attention, a stand-in for cross-scale interaction
    /// without language guidance.
    GridSelfAttention,
    /// Pooled features bypass the blocks.
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Upsample {
    Nearest,
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TmemConfig {
    pub stage_channels: [usize; 4],
    pub text_dim: usize,
    /// Attention width `C'`.
    pub attn_dim: usize,
    pub mlp_hidden: usize,
    pub blocks: usize,
    pub pos_embedding: bool,
    /// Largest stage-4 grid side supported by the positional table.
    pub max_grid: usize,
    pub mode: TmemMode,
    pub upsample: Upsample,
}

impl TmemConfig {
    pub fn total_channels(&self) -> usize {
        self.stage_channels.iter().sum()
    }
}

/// Average-pool every stage to the stage-4 grid and concatenate channels.
pub fn pool_and_concat(pyramid: &FeaturePyramid) -> Result<Tensor> {
    pyramid.validate()?;
    let pooled = pyramid
        .stages
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let f = 1usize << (3 - i);
            if f == 1 {
                Ok(s.clone())
            } else {
                s.avg_pool2d(f)
            }
        })
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::cat(&pooled, 1)?)
}

/// One pre-norm block: text attention plus MLP, both residual.
pub struct TmemBlock {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    attn_dim: usize,
    mode: TmemMode,
}

impl TmemBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &TmemConfig) -> Result<Self> {
        let c = cfg.total_channels();
        let kv_in = match cfg.mode {
            TmemMode::GridSelfAttention => c,
            _ => cfg.text_dim,
        };
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), c)?,
            q: Linear::no_bias(store, &format!("{name}.attn.q"), c, cfg.attn_dim)?,
            k: Linear::no_bias(store, &format!("{name}.attn.k"), kv_in, cfg.attn_dim)?,
            v: Linear::no_bias(store, &format!("{name}.attn.v"), kv_in, cfg.attn_dim)?,
            o: Linear::new(store, &format!("{name}.attn.o"), cfg.attn_dim, c)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), c)?,
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), c, cfg.mlp_hidden)?,
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), cfg.mlp_hidden, c)?,
            attn_dim: cfg.attn_dim,
            mode: cfg.mode,
        })
    }

    /// Attention output before the output projection, `(B, T, C')`.
    pub fn attention(&self, normed: &Tensor, context: &LinguisticFeatures) -> Result<Tensor> {
        let scale = 1.0 / (self.attn_dim as f64).sqrt();
        let q = self.q.forward(normed)?;
        match self.mode {
            TmemMode::GridSelfAttention => {
                let (b, t, _) = normed.dims3()?;
                let mask = Tensor::ones((b, t), normed.dtype(), normed.device())?;
                let (k, v) = (self.k.forward(normed)?, self.v.forward(normed)?);
                Ok(nn::masked_attention(&q, &k, &v, &mask, scale)?.0)
            }
            _ => {
                nn::check_mask(&context.mask)?;
                let k = self.k.forward(&context.embeddings)?;
                let v = self.v.forward(&context.embeddings)?;
                Ok(nn::masked_attention(&q, &k, &v, &context.mask, scale)?.0)
            }
        }
    }

    /// `z' = o(attn(LN(z), F_C)) + z`, `z_out = MLP(LN(z')) + z'`.
    pub fn forward(&self, z: &Tensor, context: &LinguisticFeatures) -> Result<Tensor> {
        let att = self.attention(&self.ln1.forward(z)?, context)?;
        let z1 = (self.o.forward(&att)? + z)?;
        let h = self.fc1.forward(&self.ln2.forward(&z1)?)?.gelu_erf()?;
        Ok((self.fc2.forward(&h)? + z1)?)
    }
}

/// Per-stage, per-channel blend gate computed from `[enhanced, original]`.
pub struct ScaleGate {
    pub gates: Vec<Conv2d>,
}

impl ScaleGate {
    pub fn new(store: &mut ParamStore, name: &str, channels: [usize; 4]) -> Result<Self> {
        let gates = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::pointwise(store, &format!("{name}.stage{}", i + 1), 2 * c, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { gates })
    }

    pub fn gate(&self, stage: usize, enhanced: &Tensor, original: &Tensor) -> Result<Tensor> {
        let both = Tensor::cat(&[enhanced, original], 1)?;
        nn::sigmoid(&self.gates[stage].forward(&both)?)
    }
}

/// Split `(B, sum C_i, h, w)` into stage chunks, upsample each to its stage
/// grid and blend: `g * enhanced + (1 - g) * original`.
pub fn split_and_upsample(
    enhanced: &Tensor,
    original: &FeaturePyramid,
    gate: &ScaleGate,
    upsample: Upsample,
) -> Result<FeaturePyramid> {
    original.validate()?;
    let channels = original.channels();
    let total: usize = channels.iter().sum();
    let (_, c, _, _) = enhanced.dims4()?;
    if c != total {
        return Err(Error::shape(format!(
            "enhanced grid has {c} channels, pyramid needs {total}"
        )));
    }
    let mut offset = 0;
    let mut stages = Vec::with_capacity(4);
    for (i, (orig, &ci)) in original.stages.iter().zip(&channels).enumerate() {
        let chunk = enhanced.narrow(1, offset, ci)?;
        offset += ci;
        let (_, _, h, w) = orig.dims4()?;
        let up = match upsample {
            Upsample::Nearest => chunk.upsample_nearest2d(h, w)?,
            Upsample::Bilinear => nn::resize_bilinear(&chunk, h, w)?,
        };
        let g = gate.gate(i, &up, orig)?;
        let blended = ((&g * &up)? + ((1.0 - &g)? * orig)?)?;
        stages.push(blended);
    }
    FeaturePyramid::new(stages)
}

pub struct Tmem {
    pub blocks: Vec<TmemBlock>,
    pub pos_row: Var,
    pub pos_col: Var,
    pub gate: ScaleGate,
    pub cfg: TmemConfig,
    name: String,
}

#[derive(Clone, Debug)]
pub struct TmemOutput {
    pub pyramid: FeaturePyramid,
    /// `z_0 .. z_L` as `(B, h*w, sum C_i)` tokens.
    pub states: Vec<Tensor>,
}

impl Tmem {
    pub fn new(store: &mut ParamStore, name: &str, cfg: TmemConfig) -> Result<Self> {
        if cfg.blocks == 0 {
            return Err(Error::Config("TMEM needs at least one block".into()));
        }
        let c = cfg.total_channels();
        let pos_row = store.uniform(&format!("{name}.pos_row"), &[cfg.max_grid, c], 0.02)?;
        let pos_col = store.uniform(&format!("{name}.pos_col"), &[cfg.max_grid, c], 0.02)?;
        let blocks = (0..cfg.blocks)
            .map(|i| TmemBlock::new(store, &format!("{name}.block{}", i + 1), &cfg))
            .collect::<Result<Vec<_>>>()?;
        let gate = ScaleGate::new(store, &format!("{name}.scale_gate"), cfg.stage_channels)?;
        Ok(Self {
            blocks,
            pos_row,
            pos_col,
            gate,
            cfg,
            name: name.to_string(),
        })
    }

    pub fn active_prefixes(&self) -> Vec<String> {
        let mut v = vec![format!("{}.scale_gate.", self.name)];
        if self.cfg.mode != TmemMode::Off {
            v.push(format!("{}.block", self.name));
            if self.cfg.pos_embedding {
                v.push(format!("{}.pos_", self.name));
            }
        }
        v
    }

    /// Output layers of every block; zeroing them makes each block an identity.
    pub fn block_output_prefixes(&self) -> Vec<String> {
        (1..=self.blocks.len())
            .flat_map(|i| {
                [
                    format!("{}.block{i}.attn.o.", self.name),
                    format!("{}.block{i}.mlp.fc2.", self.name),
                ]
            })
            .collect()
    }

    fn positions(&self, h: usize, w: usize) -> Result<Tensor> {
        if h > self.cfg.max_grid || w > self.cfg.max_grid {
            return Err(Error::shape(format!(
                "grid {h}x{w} exceeds positional table size {}",
                self.cfg.max_grid
            )));
        }
        let c = self.cfg.total_channels();
        let rows = self.pos_row.narrow(0, 0, h)?.unsqueeze(1)?; // (h, 1, C)
        let cols = self.pos_col.narrow(0, 0, w)?.unsqueeze(0)?; // (1, w, C)
        Ok(rows.broadcast_add(&cols)?.reshape((1, h * w, c))?)
    }

    pub fn forward(&self, pyramid: &FeaturePyramid, context: &LinguisticFeatures) -> Result<TmemOutput> {
        let cat = pool_and_concat(pyramid)?;
        let (_, _, h, w) = cat.dims4()?;
        let mut z = nn::to_tokens(&cat)?;
        let mut states = vec![z.clone()];
        if self.cfg.mode != TmemMode::Off {
            if self.cfg.pos_embedding {
                z = z.broadcast_add(&self.positions(h, w)?)?;
            }
            for block in &self.blocks {
                z = block.forward(&z, context)?;
                states.push(z.clone());
            }
        }
        let enhanced = nn::from_tokens(&z, h, w)?;
        let pyramid = split_and_upsample(&enhanced, pyramid, &self.gate, self.cfg.upsample)?;
        Ok(TmemOutput { pyramid, states })
    }
}

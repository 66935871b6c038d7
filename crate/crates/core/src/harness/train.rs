//! Training loop, checkpoints and diagnostics dumps.
//!
//! A checkpoint is a directory holding `model.safetensors` (parameters plus
//! the AdamW moments), `meta.json` and `vocab.txt`. Each epoch's shuffle is
//! derived from the seed and the epoch index alone, so a run resumed from a
//! checkpoint follows the same trajectory as an uninterrupted one.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

use super::config::RunConfig;
use super::data::{lexicons, Dataset};
use super::eval::evaluate;
use super::model::{Batch, RefSegModel};
use super::optim::{scheduled_lr, AdamW};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Total loss of every step in the epoch.
    pub step_losses: Vec<f64>,
    pub mean_loss: f64,
    pub mean_ce: f64,
    pub mean_dice: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<MetricsReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub config: RunConfig,
    pub history: Vec<EpochLog>,
    pub best_miou: Option<f64>,
}

pub fn save_checkpoint(dir: &Path, model: &RefSegModel, opt: &AdamW, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors: HashMap<String, Tensor> = model.store.snapshot()?.into_iter().collect();
    tensors.extend(opt.state());
    candle_core::safetensors::save(&tensors, dir.join("model.safetensors"))?;
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(meta)? + "\n").map_err(|e| Error::io(&meta_path, e))?;
    model.vocab.save(dir.join("vocab.txt"))
}

pub struct Checkpoint {
    pub model: RefSegModel,
    pub optimizer: AdamW,
    pub meta: CheckpointMeta,
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta_path = dir.join("meta.json");
    let meta: CheckpointMeta =
        serde_json::from_str(&fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
    let vocab = Vocabulary::load(dir.join("vocab.txt"))?;
    let model = RefSegModel::new(&meta.config, vocab, DType::F32)?;
    let tensors: BTreeMap<String, Tensor> =
        candle_core::safetensors::load(dir.join("model.safetensors"), &Device::Cpu)?
            .into_iter()
            .collect();
    model.store.load_snapshot(&tensors)?;
    let mut optimizer = AdamW::new(meta.config.weight_decay);
    optimizer.load_state(&tensors, meta.step)?;
    Ok(Checkpoint {
        model,
        optimizer,
        meta,
    })
}

/// Write named tensors to `path` for offline inspection.
pub fn dump_tensors(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let map: HashMap<String, Tensor> = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.detach().contiguous()?)))
        .collect::<Result<_>>()?;
    candle_core::safetensors::save(&map, path)?;
    Ok(())
}

fn is_finite(t: &Tensor) -> Result<bool> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?.is_finite())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochLog>,
    pub last: PathBuf,
    pub best: Option<PathBuf>,
    /// Validation report of the final model.
    pub report: Option<MetricsReport>,
}

pub struct Trainer {
    pub model: RefSegModel,
    pub optimizer: AdamW,
    pub config: RunConfig,
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub history: Vec<EpochLog>,
    pub best_miou: Option<f64>,
    epoch: usize,
}

impl Trainer {
    /// Fresh model; datasets are read from the paths in `config`.
    pub fn new(config: &RunConfig) -> Result<Self> {
        let (cats, spatial) = lexicons(config)?;
        let train = Dataset::load(&config.train_data, config.image_size, &cats, &spatial)?;
        let val = config
            .val_data
            .as_ref()
            .map(|p| Dataset::load(p, config.image_size, &cats, &spatial))
            .transpose()?;
        Self::with_data(config, train, val)
    }

    pub fn with_data(config: &RunConfig, train: Dataset, val: Option<Dataset>) -> Result<Self> {
        let vocab = match &config.vocab {
            Some(p) => Vocabulary::load(p)?,
            None => Vocabulary::builtin(),
        };
        Ok(Self {
            model: RefSegModel::new(config, vocab, DType::F32)?,
            optimizer: AdamW::new(config.weight_decay),
            config: config.clone(),
            train,
            val,
            history: Vec::new(),
            best_miou: None,
            epoch: 0,
        })
    }

    /// Continue from a checkpoint. `epochs`, when given, replaces the
    /// configured epoch count.
    pub fn resume(dir: &Path, train: Dataset, val: Option<Dataset>, epochs: Option<usize>) -> Result<Self> {
        let ckpt = load_checkpoint(dir)?;
        let mut config = ckpt.meta.config.clone();
        if let Some(e) = epochs {
            config.epochs = e;
        }
        Ok(Self {
            model: ckpt.model,
            optimizer: ckpt.optimizer,
            config,
            train,
            val,
            history: ckpt.meta.history,
            best_miou: ckpt.meta.best_miou,
            epoch: ckpt.meta.epoch,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.config.batch_size)
    }

    fn total_steps(&self) -> usize {
        let planned = self.config.epochs * self.steps_per_epoch();
        match self.config.max_steps {
            0 => planned,
            cap => cap.min(planned),
        }
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let seed = self.config.seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }

    fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            epoch: self.epoch,
            step: self.optimizer.step,
            config: self.config.clone(),
            history: self.history.clone(),
            best_miou: self.best_miou,
        }
    }

    fn dump_failure(&self, batch: &Batch, step: usize) -> Result<PathBuf> {
        let path = self
            .config
            .run_dir
            .join("debug")
            .join(format!("nonfinite_step{step}.safetensors"));
        let mut tensors = self.model.forward(batch, true)?.trace;
        tensors.insert("input.images".into(), batch.images.clone());
        if let Some(t) = &batch.targets {
            tensors.insert("input.targets".into(), t.clone());
        }
        for (name, t) in self.model.store.snapshot()? {
            tensors.insert(format!("param.{name}"), t);
        }
        dump_tensors(&path, &tensors)?;
        Ok(path)
    }

    /// Save every named intermediate of the first training batch to
    /// `run_dir/debug/intermediates.safetensors`.
    pub fn dump_intermediates(&self) -> Result<PathBuf> {
        let n = self.train.len().min(self.config.batch_size);
        let batch = self.train.batch(&(0..n).collect::<Vec<_>>(), &self.model)?;
        let mut trace = self.model.forward(&batch, true)?.trace;
        trace.insert("input.images".into(), batch.images.clone());
        let path = self.config.run_dir.join("debug").join("intermediates.safetensors");
        dump_tensors(&path, &trace)?;
        Ok(path)
    }

    /// One optimisation step; returns the loss terms.
    pub fn step(&mut self, batch: &Batch) -> Result<(f64, f64, f64)> {
        let step = self.optimizer.step;
        let (_, loss) = self.model.loss(batch)?;
        if !is_finite(&loss.total)? {
            let dump = self.dump_failure(batch, step)?;
            return Err(Error::NonFiniteLoss { step, dump });
        }
        let grads = loss.total.backward()?;
        let lr = scheduled_lr(self.config.lr, self.config.lr_schedule, step, self.total_steps());
        self.optimizer.update(&self.model.trainable(), &grads, lr)?;
        let r = loss.report()?;
        Ok((r.total, r.ce, r.dice))
    }

    /// Train until `config.epochs` epochs or `config.max_steps` steps.
    pub fn run(&mut self) -> Result<TrainOutcome> {
        let run_dir = self.config.run_dir.clone();
        fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        self.config.save(run_dir.join("config.snapshot"))?;
        let last = run_dir.join("ckpt").join("last");
        let best = run_dir.join("ckpt").join("best");
        let total = self.total_steps();
        let bs = self.config.batch_size;

        while self.epoch < self.config.epochs && self.optimizer.step < total {
            let started = Instant::now();
            let order = self.epoch_order(self.epoch);
            let mut losses = Vec::new();
            let (mut ce, mut dice) = (0.0, 0.0);
            for chunk in order.chunks(bs) {
                if self.optimizer.step >= total {
                    break;
                }
                let batch = self.train.batch(chunk, &self.model)?;
                let (t, c, d) = self.step(&batch)?;
                losses.push(t);
                ce += c;
                dice += d;
            }
            let n = losses.len().max(1) as f64;
            let val = match &self.val {
                Some(v) => Some(evaluate(&self.model, v, bs, self.config.threshold_rule)?),
                None => None,
            };
            let log = EpochLog {
                epoch: self.epoch,
                mean_loss: losses.iter().sum::<f64>() / n,
                mean_ce: ce / n,
                mean_dice: dice / n,
                step_losses: losses,
                val,
            };
            log::info!(
                "epoch {} loss {:.4} (ce {:.4}, dice {:.4}){} in {:.1}s",
                self.epoch + 1,
                log.mean_loss,
                log.mean_ce,
                log.mean_dice,
                log.val.as_ref().map_or(String::new(), |r| format!(", val mIoU {:.2}", r.miou)),
                started.elapsed().as_secs_f64()
            );
            let improved = match (&log.val, self.best_miou) {
                (Some(r), Some(b)) => r.miou > b,
                (Some(_), None) => true,
                (None, _) => false,
            };
            if improved {
                self.best_miou = log.val.as_ref().map(|r| r.miou);
            }
            self.history.push(log);
            self.epoch += 1;
            let meta = self.checkpoint_meta();
            save_checkpoint(&last, &self.model, &self.optimizer, &meta)?;
            if improved {
                save_checkpoint(&best, &self.model, &self.optimizer, &meta)?;
            }
        }

        let report = self.history.last().and_then(|l| l.val.clone());
        if let Some(r) = &report {
            r.write_json(run_dir.join("report.json"))?;
        }
        Ok(TrainOutcome {
            history: self.history.clone(),
            last,
            best: self.best_miou.map(|_| best),
            report,
        })
    }
}

/// Train from scratch with the datasets named in `config`.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    Trainer::new(config)?.run()
}

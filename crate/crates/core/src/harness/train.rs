//! Patch-based training with a JSON-lines run log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use phnet_tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::mean_foreground_dice;
use super::optim::{lr_for_batch, AdamW, AdamWConfig};
use crate::data::{load_case, read_manifest, resample_image, resample_labels, sample_patches, zscore, Split};
use crate::error::{io_err, PhnetError, Result};
use crate::metrics::dice_ce_loss;
use crate::model::{save_checkpoint, PhNet, PhnetConfig};
use crate::volume::{LabelVolume, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Replaces the batch-size rule when set.
    pub lr: Option<f64>,
    /// Linear warmup length in steps; 0 disables it.
    pub warmup_steps: usize,
    pub adamw: AdamWConfig,
    pub seed: u64,
    /// Training window `(d, h, w)`; defaults to the model's patch size.
    pub patch_dhw: Option<[usize; 3]>,
    pub patches_per_case: usize,
    /// Probability that a patch is centred on foreground.
    pub fg_bias: f64,
    /// Sliding-window overlap for validation.
    pub overlap: f64,
    /// Validate every this many epochs (and after the last one).
    pub val_every: usize,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 2,
            lr: None,
            warmup_steps: 0,
            adamw: AdamWConfig::default(),
            seed: 0,
            patch_dhw: None,
            patches_per_case: 3,
            fg_bias: 0.5,
            overlap: 0.5,
            val_every: 1,
            checkpoint: None,
            log: None,
        }
    }
}

impl TrainConfig {
    pub fn base_lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| lr_for_batch(self.batch_size))
    }

    /// Learning rate for 1-based step `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        let base = self.base_lr();
        if self.warmup_steps > 0 && t <= self.warmup_steps {
            base * t as f64 / self.warmup_steps as f64
        } else {
            base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PhnetError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.patches_per_case == 0 || self.val_every == 0 {
            return bad("epochs, batch_size, patches_per_case and val_every must be at least 1".into());
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("lr override must be positive, got {lr}"));
            }
        }
        if !(0.0..=1.0).contains(&self.fg_bias) {
            return bad(format!("fg_bias must be in [0, 1], got {}", self.fg_bias));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return bad(format!("overlap must be in [0, 1), got {}", self.overlap));
        }
        self.adamw.validate().map_err(|e| PhnetError::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step { step: usize, epoch: usize, loss: f64, lr: f64, wall_s: f64 },
    Epoch { epoch: usize, step: usize, train_loss: f64, val_dice: Option<f64>, best: bool, wall_s: f64 },
}

/// Network plus optimizer; one call to [`Trainer::step`] is one update.
pub struct Trainer {
    pub net: PhNet<f32>,
    pub opt: AdamW,
    pub cfg: TrainConfig,
}

/// Stacks single-channel volumes into a `(B, 1, D, H, W)` tensor.
pub fn batch_tensor(images: &[Volume]) -> Result<Tensor<f32>> {
    let dims = images.first().map(|v| v.dims()).unwrap_or([0; 3]);
    let mut data = Vec::with_capacity(images.len() * dims.iter().product::<usize>());
    for v in images {
        if v.dims() != dims {
            return Err(PhnetError::InvalidArgument(format!("batch mixes shapes {:?} and {dims:?}", v.dims())));
        }
        data.extend_from_slice(v.data());
    }
    Ok(Tensor::from_vec(&[images.len(), 1, dims[0], dims[1], dims[2]], data)?)
}

impl Trainer {
    pub fn new(model: &PhnetConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = PhNet::<f32>::build(model, cfg.seed)?;
        let opt = AdamW::new(&net.params, cfg.adamw)?;
        Ok(Trainer { net, opt, cfg: cfg.clone() })
    }

    /// Number of completed updates.
    pub fn steps(&self) -> usize {
        self.opt.t as usize
    }

    /// One forward/backward/update on a batch; returns the loss before the
    /// update.
    pub fn step(&mut self, images: &[Volume], labels: &[LabelVolume]) -> Result<f64> {
        let t = self.steps() + 1;
        let mut g = Graph::new();
        let p = self.net.params.bind(&mut g, true);
        let x = g.constant(batch_tensor(images)?);
        let logits = self.net.forward(&mut g, &p, x)?;
        let loss = dice_ce_loss(&mut g, logits, labels)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(PhnetError::Training { step: t, msg: format!("loss is {value}") });
        }
        let grads = g.backward(loss)?;
        self.net.params.zero_grad();
        self.net.params.accumulate_grads(&grads, &p)?;
        self.opt.step(&mut self.net.params, self.cfg.lr_at(t))?;
        Ok(value)
    }
}

/// A case resampled to the network spacing, with z-scored intensities.
pub struct PreparedCase {
    pub id: String,
    pub image: Volume,
    pub labels: LabelVolume,
}

pub fn prepare_case(dir: &Path, id: &str, model: &PhnetConfig) -> Result<PreparedCase> {
    let (image, labels) = load_case(dir, id, model.num_classes)?;
    let (image, labels) = if image.spacing_mm() == model.spacing_mm {
        (image, labels)
    } else {
        (resample_image(&image, model.spacing_mm)?, resample_labels(&labels, model.spacing_mm)?)
    };
    Ok(PreparedCase { id: id.to_string(), image: zscore(&image), labels })
}

pub struct TrainOutcome {
    pub net: PhNet<f32>,
    pub records: Vec<LogRecord>,
    pub final_loss: f64,
    pub best_val_dice: Option<f64>,
}

struct RunLog {
    out: Option<BufWriter<File>>,
    path: Option<PathBuf>,
    records: Vec<LogRecord>,
}

impl RunLog {
    fn open(path: Option<&Path>) -> Result<Self> {
        let out = match path {
            Some(p) => Some(BufWriter::new(File::create(p).map_err(io_err(p))?)),
            None => None,
        };
        Ok(RunLog { out, path: path.map(Path::to_path_buf), records: Vec::new() })
    }

    fn push(&mut self, r: LogRecord) -> Result<()> {
        if let (Some(out), Some(path)) = (&mut self.out, &self.path) {
            serde_json::to_writer(&mut *out, &r)?;
            out.write_all(b"\n").and_then(|_| out.flush()).map_err(io_err(path))?;
        }
        self.records.push(r);
        Ok(())
    }
}

/// Trains `model` on the dataset in `data_dir`. Each epoch draws
/// `patches_per_case` patches from every training case, shuffles them and
/// splits them into batches, so an epoch has exactly
/// `cases · patches_per_case / batch_size` steps (the product must divide).
pub fn train(model: &PhnetConfig, data_dir: &Path, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = read_manifest(data_dir)?;
    if manifest.num_classes != model.num_classes {
        return Err(PhnetError::Config(format!(
            "dataset has {} classes, model predicts {}",
            manifest.num_classes, model.num_classes
        )));
    }
    if model.in_channels != 1 {
        return Err(PhnetError::Config(format!("volumes have one channel, model expects {}", model.in_channels)));
    }
    let patch = cfg.patch_dhw.unwrap_or(model.patch_dhw);
    let train_ids: Vec<&str> = manifest.ids(Split::Train).collect();
    if train_ids.is_empty() {
        return Err(PhnetError::Config("dataset has no training cases".into()));
    }
    let per_epoch = train_ids.len() * cfg.patches_per_case;
    if per_epoch % cfg.batch_size != 0 {
        return Err(PhnetError::Config(format!(
            "{} cases × {} patches do not split into batches of {}",
            train_ids.len(),
            cfg.patches_per_case,
            cfg.batch_size
        )));
    }
    let load = |ids: Vec<&str>| -> Result<Vec<PreparedCase>> { ids.into_iter().map(|id| prepare_case(data_dir, id, model)).collect() };
    let train_cases = load(train_ids)?;
    let val_cases = load(manifest.ids(Split::Val).collect())?;
    let mut trainer = Trainer::new(model, cfg)?;
    trainer.net.check_extents(patch)?;
    for c in train_cases.iter().chain(&val_cases) {
        let dims = c.image.dims();
        if (0..3).any(|a| patch[a] > dims[a]) {
            return Err(PhnetError::Config(format!("patch {patch:?} exceeds case {} of shape {dims:?}", c.id)));
        }
    }

    let mut log = RunLog::open(cfg.log.as_deref())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_DA7A);
    let start = Instant::now();
    let mut best: Option<f64> = None;
    let mut last_loss = f64::NAN;
    for epoch in 1..=cfg.epochs {
        let mut patches = Vec::with_capacity(per_epoch);
        for c in &train_cases {
            patches.extend(sample_patches(&c.image, &c.labels, patch, cfg.patches_per_case, cfg.fg_bias, &mut rng)?);
        }
        patches.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in patches.chunks(cfg.batch_size) {
            let images: Vec<Volume> = batch.iter().map(|p| p.image.clone()).collect();
            let labels: Vec<LabelVolume> = batch.iter().map(|p| p.labels.clone()).collect();
            let lr = cfg.lr_at(trainer.steps() + 1);
            last_loss = trainer.step(&images, &labels)?;
            epoch_loss += last_loss;
            log.push(LogRecord::Step {
                step: trainer.steps(),
                epoch,
                loss: last_loss,
                lr,
                wall_s: start.elapsed().as_secs_f64(),
            })?;
        }
        let validate = !val_cases.is_empty() && (epoch % cfg.val_every == 0 || epoch == cfg.epochs);
        let val_dice = if validate {
            Some(mean_foreground_dice(&trainer.net, &val_cases, patch, cfg.overlap)?)
        } else {
            None
        };
        let improved = matches!((val_dice, best), (Some(v), None) if v.is_finite())
            || matches!((val_dice, best), (Some(v), Some(b)) if v > b);
        if improved {
            best = val_dice;
            if let Some(path) = &cfg.checkpoint {
                let meta = serde_json::json!({ "epoch": epoch, "step": trainer.steps(), "val_dice": val_dice });
                save_checkpoint(path, &trainer.net, meta)?;
            }
        }
        log.push(LogRecord::Epoch {
            epoch,
            step: trainer.steps(),
            train_loss: epoch_loss / (per_epoch / cfg.batch_size) as f64,
            val_dice,
            best: improved,
            wall_s: start.elapsed().as_secs_f64(),
        })?;
    }
    if val_cases.is_empty() {
        if let Some(path) = &cfg.checkpoint {
            let meta = serde_json::json!({ "epoch": cfg.epochs, "step": trainer.steps(), "val_dice": null });
            save_checkpoint(path, &trainer.net, meta)?;
        }
    }
    Ok(TrainOutcome { net: trainer.net, records: log.records, final_loss: last_loss, best_val_dice: best })
}

//! Training and fine-tuning loops.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{normalize, Grid};
use crate::nn::ops::l1_loss;
use crate::nn::{AdamConfig, AdamState, Checkpoint, Mode, Model, Tensor, TrainingStats};
use crate::par::Exec;
use crate::pipeline::dataset::{is_train, Dataset, Fold, Sample};
use crate::rng::{derive_seed, stream};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneMode {
    #[default]
    None,
    /// Every parameter is updated.
    Full,
    /// Only the final 1x1 convolution is updated.
    LastLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: String,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub finetune_mode: FinetuneMode,
    pub tile_size: usize,
    /// Training fold left out for cross-validation, if any.
    pub holdout_fold: Option<u8>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: "unet-opt".into(),
            batch_size: 20,
            epochs: 500,
            lr: 0.1,
            seed: 0,
            finetune_mode: FinetuneMode::None,
            tile_size: 256,
            holdout_fold: None,
        }
    }
}

impl TrainConfig {
    /// Settings for the desk-scale corpus.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            lr: DESK_LR,
            tile_size: 64,
            ..Self::default()
        }
    }

    /// Fine-tuning defaults: 100 epochs at the same learning rate.
    pub fn finetune(mode: FinetuneMode) -> Self {
        Self {
            epochs: 100,
            finetune_mode: mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if matches!(self.holdout_fold, Some(k) if k >= 5) {
            return Err(Error::invalid("holdout fold must lie in 0..5"));
        }
        Ok(())
    }
}

/// Learning rate of the desk profile. The full schedule's 0.1 leaves dead
/// ReLU channels in a 30-epoch Adam run.
pub const DESK_LR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_l1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Batch loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub initial_val_l1: f64,
    pub best_val_l1: f64,
    /// 0 when no epoch improved on the initial model.
    pub best_epoch: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-on-validation model.
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub stats: TrainingStats,
    pub history: TrainHistory,
}

impl TrainOutcome {
    pub fn into_checkpoint(self) -> Checkpoint {
        Checkpoint {
            model: self.model,
            adam: Some(self.adam),
            stats: Some(self.stats),
        }
    }
}

/// Stacks normalized grids into an `(n, 1, h, w)` tensor.
pub fn stack(grids: &[&Grid], stats: &crate::grid::NormalizationStats, mode: crate::grid::NormMode) -> Result<Tensor<f32>> {
    let first = grids.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(grids.len() * h * w);
    for g in grids {
        if g.height() != h || g.width() != w {
            return Err(Error::dims(format!("{w}x{h}"), format!("{}x{}", g.width(), g.height())));
        }
        data.extend(normalize(g, stats, mode).values().iter().map(|&v| v as f32));
    }
    Tensor::from_vec([grids.len(), 1, h, w], data)
}

/// Normalized input and target tensors for a sample set.
struct Batches {
    x: Tensor<f32>,
    y: Tensor<f32>,
}

impl Batches {
    fn new(samples: &[Sample], stats: &TrainingStats) -> Result<Self> {
        let ints: Vec<&Grid> = samples.iter().map(|s| &s.intensity).collect();
        let rels: Vec<&Grid> = samples.iter().map(|s| &s.relief).collect();
        Ok(Self {
            x: stack(&ints, &stats.intensity, stats.mode)?,
            y: stack(&rels, &stats.relief, stats.mode)?,
        })
    }

    fn len(&self) -> usize {
        self.x.batch()
    }

    fn gather(&self, idx: &[usize]) -> (Tensor<f32>, Tensor<f32>) {
        let pick = |t: &Tensor<f32>| {
            let [_, c, h, w] = t.shape();
            let mut data = Vec::with_capacity(idx.len() * t.item_len());
            for &i in idx {
                data.extend_from_slice(t.item(i));
            }
            Tensor::from_vec([idx.len(), c, h, w], data).expect("gathered shape")
        };
        (pick(&self.x), pick(&self.y))
    }
}

/// Mean per-image L1 of eval-mode predictions against targets, in
/// normalized relief units.
fn eval_l1(model: &Model<f32>, data: &Batches, batch: usize) -> Result<f64> {
    let n = data.len();
    let mut total = 0.0;
    for start in (0..n).step_by(batch) {
        let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
        let (x, y) = data.gather(&idx);
        let pred = model.infer(&x)?;
        total += l1_loss(&pred, &y)?.0 * idx.len() as f64;
    }
    Ok(total / n as f64)
}

fn check_tiles(samples: &[Sample], cfg: &TrainConfig, multiple: usize) -> Result<()> {
    for s in samples {
        let (w, h) = (s.intensity.width(), s.intensity.height());
        if w != cfg.tile_size || h != cfg.tile_size {
            return Err(Error::invalid(format!(
                "tile {} is {w}x{h}, config expects {}",
                s.id, cfg.tile_size
            )));
        }
        if w % multiple != 0 || h % multiple != 0 {
            return Err(Error::invalid(format!("tile size {w} is not a multiple of {multiple}")));
        }
    }
    Ok(())
}

/// Shared optimization loop. Keeps the model with the lowest validation L1,
/// starting from the incoming model itself.
fn optimize(mut model: Model<f32>, dataset: &Dataset, cfg: &TrainConfig, exec: Exec) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.lr >= 0.05 {
        log::warn!("learning rate {} is high for Adam; training may diverge", cfg.lr);
    }
    let stats = dataset.manifest.stats;
    let holdout = cfg.holdout_fold;
    let train = dataset.load(|f| is_train(f) && Some(f) != holdout.map(Fold::Train), exec)?;
    if train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let val = dataset.load(|f| f == Fold::Val, exec)?;
    if val.is_empty() {
        return Err(Error::invalid("validation split is empty"));
    }
    let multiple = model.spec().size_multiple();
    check_tiles(&train, cfg, multiple)?;
    check_tiles(&val, cfg, multiple)?;
    let train = Batches::new(&train, &stats)?;
    let val = Batches::new(&val, &stats)?;

    model.set_exec(exec);
    model.set_mode(Mode::Train);
    let mut adam = AdamState::new(
        &model,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    )?;
    let initial = eval_l1(&model, &val, cfg.batch_size)?;
    log::info!("initial validation L1 {initial:.5}");
    let mut history = TrainHistory {
        initial_val_l1: initial,
        best_val_l1: initial,
        ..TrainHistory::default()
    };
    let mut best = (model.clone(), adam.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(cfg.seed, &[0xE90C, epoch as u64]));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.gather(chunk);
            let pred = model.forward(&x)?;
            let (loss, grad) = l1_loss(&pred, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            let grads = model.backward(&grad)?;
            adam.step(&mut model, &grads)?;
            history.step_losses.push(loss);
            epoch_loss += loss * chunk.len() as f64;
        }
        let val_l1 = eval_l1(&model, &val, cfg.batch_size)?;
        let train_loss = epoch_loss / train.len() as f64;
        log::info!("epoch {epoch}: train L1 {train_loss:.5}, validation L1 {val_l1:.5}");
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_l1,
        });
        if val_l1 < history.best_val_l1 {
            history.best_val_l1 = val_l1;
            history.best_epoch = epoch;
            best = (model.clone(), adam.clone());
        }
    }
    let (mut model, adam) = best;
    model.set_mode(Mode::Eval);
    Ok(TrainOutcome {
        model,
        adam,
        stats,
        history,
    })
}

/// Trains a freshly initialized model on the dataset's training folds.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, exec: Exec) -> Result<TrainOutcome> {
    if cfg.finetune_mode != FinetuneMode::None {
        return Err(Error::invalid("train starts from scratch; use finetune for a checkpoint"));
    }
    let model = Model::<f32>::build(&cfg.model, derive_seed(cfg.seed, &[0x1417]))?;
    optimize(model, dataset, cfg, exec)
}

/// Continues training a checkpoint on another dataset with a fresh
/// optimizer. The new dataset's normalization statistics replace the
/// checkpoint's.
pub fn finetune(checkpoint: Checkpoint, dataset: &Dataset, cfg: &TrainConfig, exec: Exec) -> Result<TrainOutcome> {
    let mut model = checkpoint.model;
    if model.spec().name != cfg.model {
        return Err(Error::invalid(format!(
            "checkpoint holds `{}`, config names `{}`",
            model.spec().name,
            cfg.model
        )));
    }
    match cfg.finetune_mode {
        FinetuneMode::None => return Err(Error::invalid("finetune mode `none`; use train instead")),
        FinetuneMode::Full => model.set_trainable(vec![true; model.params().len()])?,
        FinetuneMode::LastLayer => model.freeze_all_but_output(),
    }
    optimize(model, dataset, cfg, exec)
}

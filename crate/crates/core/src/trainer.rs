//! Mini-batch training with Adam and validation-HM model selection.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{DataError, EmbeddingTable, FeatureDataset, Split, VocabSpace};
use crate::evaluator::{evaluate_split, split_seen_unseen, EvalError};
use crate::model::{forward_tape, loss_tape, Mode, ModelConfig, ModelError, ModelParams};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, TensorError};

pub use crate::model::{load_checkpoint, save_checkpoint};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error(
        "non-finite value at epoch {epoch}, batch {batch} ({detail}); largest parameter {parameter} has norm {norm}"
    )]
    NonFinite {
        epoch: usize,
        batch: usize,
        parameter: String,
        norm: f64,
        detail: String,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Architecture. `d_word` and `d_img` are taken from the embeddings and
    /// the dataset.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            batch_size: 128,
            learning_rate: 1e-3,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        self.model.validate().map_err(|e| TrainError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_seen: f64,
    pub val_unseen: f64,
    pub val_hm: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the selected epoch.
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    /// 1-based epoch the parameters come from.
    pub best_epoch: usize,
}

/// Name and norm of the largest parameter tensor.
fn largest_parameter(params: &ModelParams) -> (String, f64) {
    params
        .weights
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.norm()))
        .fold((String::new(), f64::NEG_INFINITY), |best, cur| {
            // a NaN norm is the likeliest culprit, so the first one sticks
            if best.1.is_nan() {
                best
            } else if cur.1.is_nan() || cur.1 > best.1 {
                cur
            } else {
                best
            }
        })
}

/// One forward/backward pass and Adam update on a batch. Returns the
/// batch loss before the update.
pub fn train_step(
    params: &mut ModelParams,
    adam: &mut Adam,
    z: &Tensor,
    attr_targets: &[usize],
    obj_targets: &[usize],
    mut mode: Mode<'_>,
) -> std::result::Result<f64, ModelError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let zv = tape.constant(z.clone());
    let scores = forward_tape(
        &mut tape,
        &params.config,
        &bound.weights,
        bound.attr_tokens,
        bound.obj_tokens,
        zv,
        &mut mode,
    )?;
    let loss = loss_tape(&mut tape, &scores, attr_targets, obj_targets)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let grads: Vec<Tensor> = bound.weights.named().into_iter().map(|(_, &v)| grads.wrt(v)).collect();
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TensorError::NonFinite { op: "backward" }.into());
    }
    adam.step(params.weights.slots_mut(), &grads)?;
    if params.weights.named().iter().any(|(_, t)| !t.is_finite()) {
        return Err(TensorError::NonFinite { op: "adam update" }.into());
    }
    Ok(value)
}

/// Trains from scratch and returns the parameters with the best validation
/// HM; later epochs win ties. Without validation images the last epoch is
/// returned.
pub fn train(
    config: &TrainConfig,
    vocab: &VocabSpace,
    dataset: &FeatureDataset,
    embeddings: &EmbeddingTable,
) -> Result<TrainOutcome> {
    let config = &TrainConfig {
        model: ModelConfig {
            d_word: embeddings.dim(),
            d_img: dataset.dim(),
            ..config.model.clone()
        },
        ..config.clone()
    };
    config.validate()?;
    dataset.validate(vocab)?;
    let mut train_idx = dataset.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let has_val = !dataset.indices(Split::Val).is_empty();
    if has_val {
        let (seen, unseen) = split_seen_unseen(dataset, Split::Val, vocab);
        for (what, part) in [("seen", &seen), ("unseen", &unseen)] {
            if part.is_empty() {
                log::warn!("validation split has no {what} images; validation {what} accuracy and HM are 0");
            }
        }
    } else {
        log::warn!("no validation images; the last epoch is returned");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::from_embeddings(config.model.clone(), vocab, embeddings, &mut rng)?;
    let mut adam = Adam::new(AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    });

    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for epoch in 1..=config.epochs {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in train_idx.chunks(config.batch_size).enumerate() {
            let z = dataset.batch(batch);
            let ta: Vec<usize> = batch.iter().map(|&i| dataset.attr_labels[i]).collect();
            let to: Vec<usize> = batch.iter().map(|&i| dataset.obj_labels[i]).collect();
            let step = train_step(&mut params, &mut adam, &z, &ta, &to, Mode::Train(&mut rng));
            let loss = match step {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(ModelError::Tensor(TensorError::NonFinite { .. })) => {
                    let (parameter, norm) = largest_parameter(&params);
                    let detail = match step {
                        Err(e) => e.to_string(),
                        Ok(l) => format!("loss {l}"),
                    };
                    return Err(TrainError::NonFinite {
                        epoch,
                        batch: b + 1,
                        parameter,
                        norm,
                        detail,
                    });
                }
                Err(e) => return Err(e.into()),
            };
            total += loss * batch.len() as f64;
        }
        let train_loss = total / train_idx.len() as f64;

        let entry = if has_val {
            let curve = evaluate_split(&params, vocab, dataset, Split::Val, None, false)?;
            EpochLog {
                epoch,
                train_loss,
                val_seen: curve.best_seen,
                val_unseen: curve.best_unseen,
                val_hm: curve.best_hm,
                val_auc: curve.auc,
            }
        } else {
            EpochLog {
                epoch,
                train_loss,
                val_seen: 0.0,
                val_unseen: 0.0,
                val_hm: 0.0,
                val_auc: 0.0,
            }
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, val S {:.3} U {:.3} HM {:.3} AUC {:.3}",
            entry.train_loss,
            entry.val_seen,
            entry.val_unseen,
            entry.val_hm,
            entry.val_auc
        );
        if best.as_ref().is_none_or(|(hm, _, _)| entry.val_hm >= *hm) {
            best = Some((entry.val_hm, epoch, params.clone()));
        }
        log.push(entry);
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        log,
        best_epoch,
    })
}

/// Architecture knob varied by [`ablate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Heads,
    Depth,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Heads => "heads",
            AblationAxis::Depth => "depth",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub value: usize,
    /// Best test-split HM of the selected checkpoint, without a feasibility mask.
    pub hm: f64,
}

/// Trains one model per grid value, each from the same seed, and reports
/// its test-split best HM.
pub fn ablate(
    base: &TrainConfig,
    axis: AblationAxis,
    grid: &[usize],
    vocab: &VocabSpace,
    dataset: &FeatureDataset,
    embeddings: &EmbeddingTable,
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(TrainError::Config(format!("empty {} grid", axis.name())));
    }
    let configs: Vec<TrainConfig> = grid
        .iter()
        .map(|&value| {
            let mut cfg = base.clone();
            match axis {
                AblationAxis::Heads => cfg.model.heads = value,
                AblationAxis::Depth => cfg.model.mlp_depth = value,
            }
            cfg.model.d_word = embeddings.dim();
            cfg.validate().map(|_| cfg)
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(grid.len());
    for (&value, cfg) in grid.iter().zip(&configs) {
        let outcome = train(cfg, vocab, dataset, embeddings)?;
        let curve = evaluate_split(&outcome.params, vocab, dataset, Split::Test, None, true)?;
        log::info!("{} {value}: test HM {:.4}", axis.name(), curve.best_hm);
        rows.push(AblationRow {
            value,
            hm: curve.best_hm,
        });
    }
    Ok(rows)
}

pub fn format_ablation_csv(axis: AblationAxis, rows: &[AblationRow]) -> String {
    let mut out = format!("{},hm\n", axis.name());
    for r in rows {
        out.push_str(&format!("{},{}\n", r.value, r.hm));
    }
    out
}

const LOG_HEADER: &str = "epoch,train_loss,val_seen,val_unseen,val_hm,val_auc";

pub fn format_train_log(log: &[EpochLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for e in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.epoch, e.train_loss, e.val_seen, e.val_unseen, e.val_hm, e.val_auc
        ));
    }
    out
}

pub fn write_train_log(log: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_train_log(log)).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

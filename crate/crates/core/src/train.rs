//! Joint training of weights and topology.
//!
//! Each epoch first draws which layers run masked (mask enabling ramps from
//! none to all over the warm-up), then sets the mask-loss weight from the
//! previous epoch's task loss. Every batch back-propagates the task loss
//! into kernels, biases, head and effect factors, and the mask loss into the
//! effect factors of the enabled layers. Parameters are stored at 32-bit
//! precision after every step so checkpoints reload exactly.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::MaskSnapshot;
use crate::config::{DatasetKind, RunConfig};
use crate::data::{load_cifar10, synth_dataset, Dataset};
use crate::error::{LhcError, Result};
use crate::layer::MaskTensor;
use crate::model::{softmax_cross_entropy, Model};
use crate::objective::{
    global_density, mask_enable_schedule, mask_loss, mask_loss_element_grad, DensityObjective,
};

// Stream offsets so that data order, augmentation and mask enabling do not
// shift when one of them draws more or fewer numbers.
const DATA_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
const MASK_STREAM: u64 = 0x6a09_e667_f3bc_c909;

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub task_loss: f64,
    pub mask_loss: f64,
    pub alpha: f64,
    pub density: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Keep the topology masks of every epoch.
    pub snapshot_masks: bool,
    /// Print one line per epoch.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
    pub snapshots: Vec<MaskSnapshot>,
    /// Epoch after which early stopping ended the run.
    pub stopped_at: Option<usize>,
}

impl TrainOutcome {
    pub fn final_metrics(&self) -> Option<&EpochMetrics> {
        self.metrics.last()
    }
}

pub fn write_metrics_csv<W: Write>(metrics: &[EpochMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}

/// Training and test sets for a config.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let all = match &cfg.dataset {
        DatasetKind::Synthetic => {
            synth_dataset(cfg.seed, cfg.n_train + cfg.n_test, cfg.classes, cfg.image_size)?
        }
        DatasetKind::Cifar10(path) => load_cifar10(path, Some(cfg.n_train + cfg.n_test))?,
    };
    if all.len() < cfg.n_train + cfg.n_test {
        return Err(LhcError::InvalidArgument(format!(
            "dataset has {} samples, config asks for {} + {}",
            all.len(),
            cfg.n_train,
            cfg.n_test
        )));
    }
    Ok(all.split(cfg.n_train))
}

/// Model initialised from the config's seed.
pub fn init_model(cfg: &RunConfig, in_channels: usize, classes: usize) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Model::init(&cfg.layers, in_channels, classes, &mut rng)
}

/// Top-1 accuracy.
pub fn evaluate(model: &Model, data: &Dataset, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for (x, y) in data.batches(batch) {
        let pred = model.predict(&x)?;
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn topology(model: &Model) -> Result<Vec<MaskTensor>> {
    model.topology_masks()
}

fn refs(m: &[MaskTensor]) -> Vec<&MaskTensor> {
    m.iter().collect()
}

fn diverged(epoch: usize, e: LhcError) -> LhcError {
    match e {
        LhcError::NonFinite(what) => LhcError::Divergence {
            epoch,
            what: what.to_string(),
        },
        other => other,
    }
}

pub fn train(
    cfg: &RunConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let [_, _, c] = train_set.image_dims();
    let model = init_model(cfg, c, train_set.classes())?;
    train_model(cfg, model, train_set, test_set, opts)
}

/// Trains an already initialised model.
pub fn train_model(
    cfg: &RunConfig,
    mut model: Model,
    train_set: &Dataset,
    test_set: &Dataset,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(LhcError::InvalidArgument("empty training set".into()));
    }
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DATA_STREAM);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ MASK_STREAM);
    let mut objective = DensityObjective::new(cfg.d_t, cfg.alpha_t, cfg.n_warm)?
        .with_scale_source(cfg.alpha_scale);
    let n_lhc = model.lhc_indices().len();
    let lhc = model.lhc_indices();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::new();
    let mut prev_task = 0.0;
    let mut best = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut stopped_at = None;

    for epoch in 1..=cfg.epochs {
        let schedule = mask_enable_schedule(epoch, cfg.n_warm, n_lhc, &mut mask_rng);
        let enabled = if cfg.dense {
            vec![false; n_lhc]
        } else {
            schedule
        };
        model.set_masks_enabled(&enabled)?;
        let alpha = objective.alpha_schedule(epoch, prev_task);
        let lr = cfg.lr_at(epoch);
        let effect_lr = lr * cfg.effect_lr_scale;

        let order = train_set.shuffled_indices(&mut data_rng);
        let mut task_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train_set.gather(chunk);
            let x = cfg.augment.apply(&x, &mut data_rng);
            let (logits, cache) = model.forward(&x).map_err(|e| diverged(epoch, e))?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &y, model.classes());
            if !loss.is_finite() {
                return Err(LhcError::Divergence {
                    epoch,
                    what: "task loss".into(),
                });
            }
            task_sum += loss * chunk.len() as f64;
            let mut grads = model.backward(&cache, &dlogits).map_err(|e| diverged(epoch, e))?;

            if let Some(d_t) = cfg.d_t.filter(|_| alpha > 0.0 && !cfg.dense) {
                let masks = topology(&model)?;
                let per_element = alpha * mask_loss_element_grad(&refs(&masks), d_t)?;
                if per_element != 0.0 {
                    for &i in &lhc {
                        let extra = model.layers()[i]
                            .conv
                            .uniform_mask_effect_grad(cache.layer_cache(i), per_element)?;
                        for (g, e) in grads.layers[i].effect.iter_mut().zip(extra) {
                            *g += e;
                        }
                    }
                }
            }

            for (l, g) in model.layers_mut().iter_mut().zip(&grads.layers) {
                let kernel = l.conv.kernel_mut();
                for (p, d) in kernel.data_mut().iter_mut().zip(g.kernel.data()) {
                    *p -= lr * d;
                }
                for (p, d) in l.bias.iter_mut().zip(&g.bias) {
                    *p -= lr * d;
                }
                if l.learns_topology && !cfg.dense {
                    for (p, d) in l.conv.effect_mut().values_mut().iter_mut().zip(&g.effect) {
                        *p -= effect_lr * d;
                    }
                }
            }
            let (hw, hb) = model.head_mut();
            for (p, d) in hw.iter_mut().zip(&grads.head_w) {
                *p -= lr * d;
            }
            for (p, d) in hb.iter_mut().zip(&grads.head_b) {
                *p -= lr * d;
            }
            model.round_params_to_f32();
        }
        let task_loss = task_sum / train_set.len() as f64;

        let masks = topology(&model)?;
        let density = global_density(&refs(&masks));
        let mask_loss = match cfg.d_t {
            Some(d_t) => mask_loss(&refs(&masks), d_t)?,
            None => 0.0,
        };
        let accuracy = evaluate(&model, test_set, cfg.batch_size.max(64))?;
        let m = EpochMetrics {
            epoch,
            task_loss,
            mask_loss,
            alpha,
            density,
            accuracy,
        };
        if opts.verbose {
            eprintln!(
                "epoch {epoch:3}  task {task_loss:.4}  mask {mask_loss:.4}  alpha {alpha:.4}  density {density:.4}  acc {accuracy:.4}"
            );
        }
        metrics.push(m);
        if opts.snapshot_masks {
            snapshots.push(MaskSnapshot { epoch, masks });
        }
        prev_task = task_loss;

        if accuracy > best {
            best = accuracy;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                stopped_at = Some(epoch);
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model,
        metrics,
        snapshots,
        stopped_at,
    })
}

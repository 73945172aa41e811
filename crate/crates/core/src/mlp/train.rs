use std::time::Instant;

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::net::{backward, forward, infer, mse, Mode};
use super::{BatchNorm, Dense, MlpConfig, MlpModel, Standardizer, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::rng;
use crate::sampler::{Dataset, Part};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPSILON: f64 = 1e-7;

/// Raw (unstandardized) training and validation matrices.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub z_train: ArrayView2<'a, f64>,
    pub x_train: ArrayView2<'a, f64>,
    pub z_val: ArrayView2<'a, f64>,
    pub x_val: ArrayView2<'a, f64>,
}

impl<'a> TrainData<'a> {
    pub fn from_dataset(ds: &'a Dataset) -> Self {
        TrainData {
            z_train: ds.z(Part::Train),
            x_train: ds.x(Part::Train),
            z_val: ds.z(Part::Val),
            x_val: ds.x(Part::Val),
        }
    }

    fn check(&self) -> Result<()> {
        if self.z_train.nrows() == 0 {
            return Err(Error::Dimension("training split is empty".into()));
        }
        if self.z_train.nrows() != self.x_train.nrows() || self.z_val.nrows() != self.x_val.nrows()
        {
            return Err(Error::Dimension(
                "feature and state row counts differ".into(),
            ));
        }
        if self.z_val.nrows() > 0
            && (self.z_val.ncols() != self.z_train.ncols()
                || self.x_val.ncols() != self.x_train.ncols())
        {
            return Err(Error::Dimension(
                "validation columns differ from training columns".into(),
            ));
        }
        Ok(())
    }
}

/// Loss history of one training run. Losses are mean squared errors in
/// standardized target units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Zero-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn best_val_loss(&self) -> f64 {
        self.val_loss
            .get(self.best_epoch)
            .copied()
            .unwrap_or(f64::NAN)
    }
}

/// Trains a fresh network on the dataset's training split, stopping early on
/// the validation split.
pub fn train(dataset: &Dataset, config: &MlpConfig) -> Result<(MlpModel, TrainReport)> {
    let (mut model, report) = train_arrays(TrainData::from_dataset(dataset), config)?;
    model.feature_names = dataset.feature_names.clone();
    model.target_names = dataset.state_names.clone();
    model.topology = dataset.topology.clone();
    Ok((model, report))
}

pub fn train_arrays(data: TrainData<'_>, config: &MlpConfig) -> Result<(MlpModel, TrainReport)> {
    config.validate()?;
    data.check()?;
    let (input_norm, output_norm) = if config.normalize {
        (
            Standardizer::fit(data.z_train)?,
            Standardizer::fit(data.x_train)?,
        )
    } else {
        (
            Standardizer::identity(data.z_train.ncols()),
            Standardizer::identity(data.x_train.ncols()),
        )
    };
    for (what, s) in [("feature", &input_norm), ("state", &output_norm)] {
        let n = s.floored.iter().filter(|&&f| f).count();
        if n > 0 {
            log::info!("{n} constant {what} column(s); their spread was floored");
        }
    }
    let mut model = init_model(
        data.z_train.ncols(),
        data.x_train.ncols(),
        config,
        input_norm,
        output_norm,
    );
    let report = run_epochs(
        &mut model,
        data,
        config.learning_rate,
        config.max_epochs,
        config.patience,
        config.seed,
    )?;
    Ok((model, report))
}

/// He-uniform weights on ReLU layers, Glorot-uniform on the linear output,
/// zero biases.
fn init_model(
    m: usize,
    n: usize,
    config: &MlpConfig,
    input_norm: Standardizer,
    output_norm: Standardizer,
) -> MlpModel {
    let mut g = rng::stream(config.seed, "init");
    let mut sizes = vec![m];
    sizes.extend(std::iter::repeat_n(config.width, config.hidden_layers));
    sizes.push(n);
    let last = sizes.len() - 2;
    let layers = sizes
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let limit = if i < last {
                (6.0 / w[0] as f64).sqrt()
            } else {
                (6.0 / (w[0] + w[1]) as f64).sqrt()
            };
            Dense {
                w: Array2::from_shape_simple_fn((w[0], w[1]), || g.random_range(-limit..limit)),
                b: Array1::zeros(w[1]),
            }
        })
        .collect();
    let norms = (0..config.hidden_layers)
        .map(|_| config.batch_norm.then(|| BatchNorm::new(config.width)))
        .collect();
    MlpModel {
        layers,
        norms,
        input_norm,
        output_norm,
        config: config.clone(),
        topology: String::new(),
        feature_names: (0..m).map(|i| format!("z{i}")).collect(),
        target_names: (0..n).map(|i| format!("x{i}")).collect(),
    }
}

struct Adam {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(model: &mut MlpModel, lr: f64) -> Self {
        let zeros: Vec<ArrayD<f64>> = model
            .param_views_mut()
            .iter()
            .map(|p| ArrayD::zeros(p.raw_dim()))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr,
        }
    }

    fn step(&mut self, model: &mut MlpModel, grads: &super::net::Grads) {
        self.t += 1;
        let lr_t =
            self.lr * (1.0 - ADAM_BETA2.powi(self.t)).sqrt() / (1.0 - ADAM_BETA1.powi(self.t));
        for (k, (mut p, g)) in model
            .param_views_mut()
            .into_iter()
            .zip(grads.views())
            .enumerate()
        {
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(&mut self.m[k])
                .and(&mut self.v[k])
                .for_each(|p, &g, m, v| {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *p -= lr_t * *m / (v.sqrt() + ADAM_EPSILON);
                });
        }
    }
}

fn update_running_stats(model: &mut MlpModel, cache: &super::net::Cache) {
    for (bn, stats) in model.norms.iter_mut().zip(cache.batch_stats()) {
        if let (Some(bn), Some((mean, var))) = (bn, stats) {
            bn.running_mean.zip_mut_with(mean, |r, &b| {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b
            });
            bn.running_var
                .zip_mut_with(var, |r, &b| *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b);
        }
    }
}

/// Mini-batch Adam with early stopping. Weights of the epoch with the lowest
/// validation loss are restored at the end. Without validation rows the
/// training loss is monitored instead.
fn run_epochs(
    model: &mut MlpModel,
    data: TrainData<'_>,
    lr: f64,
    max_epochs: usize,
    patience: usize,
    seed: u64,
) -> Result<TrainReport> {
    let start = Instant::now();
    let zt = model.input_norm.forward(data.z_train);
    let yt = model.output_norm.forward(data.x_train);
    let zv = model.input_norm.forward(data.z_val);
    let yv = model.output_norm.forward(data.x_val);
    let n = zt.nrows();
    let batch = model.config.batch_size.min(n);
    let shuffle_seed = rng::sub_seed(seed, "shuffle");
    let dropout_seed = rng::sub_seed(seed, "dropout");

    let mut adam = Adam::new(model, lr);
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = TrainReport {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        epochs_run: 0,
        stopped_early: false,
        wall_seconds: 0.0,
    };
    let mut best: Option<(f64, MlpModel)> = None;
    let mut wait = 0;
    for epoch in 0..max_epochs {
        order.shuffle(&mut rng::row_stream(shuffle_seed, epoch as u64));
        let mut drop_rng = rng::row_stream(dropout_seed, epoch as u64);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let zb = zt.select(Axis(0), chunk);
            let yb = yt.select(Axis(0), chunk);
            let (pred, cache) = forward(model, zb.view(), Mode::Train(&mut drop_rng));
            let (loss, d_out) = mse(&pred, yb.view());
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            total += loss * chunk.len() as f64;
            let grads = backward(model, &cache, d_out);
            update_running_stats(model, &cache);
            adam.step(model, &grads);
        }
        let train_loss = total / n as f64;
        let monitored = if zv.nrows() > 0 {
            mse(&infer(model, zv.clone()), yv.view()).0
        } else {
            train_loss
        };
        if !monitored.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        report.train_loss.push(train_loss);
        report.val_loss.push(monitored);
        report.epochs_run = epoch + 1;
        log::debug!("epoch {epoch}: train {train_loss:.6e}, val {monitored:.6e}");
        if best.as_ref().is_none_or(|(b, _)| monitored < *b) {
            best = Some((monitored, model.clone()));
            report.best_epoch = epoch;
            wait = 0;
        } else {
            wait += 1;
            if wait >= patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Settings for adapting a trained model to a new topology.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTune {
    /// Training rows used, taken from the start of the training split.
    pub samples: usize,
    pub epochs: usize,
    /// Defaults to a tenth of the base learning rate.
    pub learning_rate: Option<f64>,
    /// Allow the dataset's features to be a subset of the model's, matched
    /// by name.
    pub remap: bool,
}

impl Default for FineTune {
    fn default() -> Self {
        FineTune {
            samples: 2000,
            epochs: 90,
            learning_rate: None,
            remap: false,
        }
    }
}

/// Continues training every layer on data from a new topology. All `epochs`
/// run; the weights with the lowest validation loss are kept. Normalization
/// statistics are recomputed on the fine-tuning rows and folded into the
/// first and last layers so the starting function is unchanged.
pub fn fine_tune(
    model: &MlpModel,
    dataset: &Dataset,
    ft: &FineTune,
) -> Result<(MlpModel, TrainReport)> {
    if ft.samples == 0 || ft.epochs == 0 {
        return Err(Error::Config(
            "fine-tuning needs at least one sample and one epoch".into(),
        ));
    }
    if dataset.state_names != model.target_names {
        return Err(Error::Schema(
            "dataset states differ from the model's outputs".into(),
        ));
    }
    let mut tuned = remap_inputs(model, &dataset.feature_names, ft.remap)?;
    let rows = ft.samples.min(dataset.splits.train);
    let train_rows = dataset.range(Part::Train).start..dataset.range(Part::Train).start + rows;
    let data = TrainData {
        z_train: dataset.z_noisy.slice(ndarray::s![train_rows.clone(), ..]),
        x_train: dataset.x_true.slice(ndarray::s![train_rows, ..]),
        z_val: dataset.z(Part::Val),
        x_val: dataset.x(Part::Val),
    };
    data.check()?;
    if tuned.config.normalize {
        let input = Standardizer::fit(data.z_train)?;
        let output = Standardizer::fit(data.x_train)?;
        refold_normalization(&mut tuned, input, output);
    }
    let lr = ft
        .learning_rate
        .unwrap_or(model.config.learning_rate / 10.0);
    if !(lr > 0.0 && lr < 1.0) {
        return Err(Error::Config(format!(
            "fine-tune learning rate must be in (0, 1), got {lr}"
        )));
    }
    let report = run_epochs(
        &mut tuned,
        data,
        lr,
        ft.epochs,
        ft.epochs,
        rng::sub_seed(model.config.seed, "finetune"),
    )?;
    tuned.topology = dataset.topology.clone();
    Ok((tuned, report))
}

/// Drops first-layer rows for model inputs absent from `names`. Names the
/// model has never seen are rejected.
fn remap_inputs(model: &MlpModel, names: &[String], remap: bool) -> Result<MlpModel> {
    if names == model.feature_names.as_slice() {
        return Ok(model.clone());
    }
    if !remap {
        return Err(Error::Schema(format!(
            "dataset has {} features, the model expects {}; enable remapping to match them by name",
            names.len(),
            model.feature_names.len()
        )));
    }
    let keep: Vec<usize> = names
        .iter()
        .map(|n| {
            model
                .feature_names
                .iter()
                .position(|m| m == n)
                .ok_or_else(|| Error::Schema(format!("model has no input '{n}'")))
        })
        .collect::<Result<_>>()?;
    let mut out = model.clone();
    out.layers[0].w = model.layers[0].w.select(Axis(0), &keep);
    let pick = |v: &[f64]| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
    out.input_norm = Standardizer {
        mean: pick(&model.input_norm.mean),
        std: pick(&model.input_norm.std),
        floored: keep.iter().map(|&i| model.input_norm.floored[i]).collect(),
    };
    out.feature_names = names.to_vec();
    Ok(out)
}

/// Swaps in new normalization statistics and rescales the first and last
/// layers so that the network computes the same function in raw units.
fn refold_normalization(model: &mut MlpModel, input: Standardizer, output: Standardizer) {
    let old_in = std::mem::replace(&mut model.input_norm, input);
    let new_in = &model.input_norm;
    let first = &mut model.layers[0];
    for i in 0..first.w.nrows() {
        if old_in.floored[i] {
            continue;
        }
        let shift = (new_in.mean[i] - old_in.mean[i]) / old_in.std[i];
        let scale = if new_in.floored[i] {
            1.0
        } else {
            new_in.std[i] / old_in.std[i]
        };
        let mut row = first.w.row_mut(i);
        first.b.scaled_add(shift, &row);
        row *= scale;
    }

    let old_out = std::mem::replace(&mut model.output_norm, output);
    let new_out = &model.output_norm;
    let last = model.layers.last_mut().expect("at least one layer");
    for k in 0..last.w.ncols() {
        let mut col = last.w.column_mut(k);
        if new_out.floored[k] {
            col.fill(0.0);
            last.b[k] = 0.0;
        } else {
            col *= old_out.std[k] / new_out.std[k];
            last.b[k] =
                (last.b[k] * old_out.std[k] + old_out.mean[k] - new_out.mean[k]) / new_out.std[k];
        }
    }
}

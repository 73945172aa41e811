//! Dense feed-forward network used as the MMSE state estimator.
//!
//! Hidden layers are `Linear -> BatchNorm -> ReLU -> Dropout`; the output
//! layer is linear. Inputs and targets are standardized with statistics of
//! the training split and the loss is the mean squared error in that space.

mod io;
mod net;
mod train;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_model, load_model_checked, save_model, MODEL_FORMAT_VERSION};
pub use net::grad_check;
pub use train::{fine_tune, train, train_arrays, FineTune, TrainData, TrainReport};

pub const BN_EPSILON: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.99;
/// Floor applied to normalization standard deviations.
pub const STD_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden_layers: usize,
    pub width: usize,
    pub dropout: f64,
    pub batch_norm: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Standardize inputs and targets with training-split statistics.
    #[serde(default = "yes")]
    pub normalize: bool,
}

fn yes() -> bool {
    true
}

impl MlpConfig {
    /// Hyperparameters tuned for the 118-bus system.
    pub fn table3(seed: u64) -> Self {
        MlpConfig {
            hidden_layers: 4,
            width: 500,
            dropout: 0.3,
            batch_norm: true,
            learning_rate: 0.0207,
            batch_size: 128,
            max_epochs: 2000,
            patience: 10,
            seed,
            normalize: true,
        }
    }

    /// A single affine map from inputs to outputs.
    pub fn linear(learning_rate: f64, max_epochs: usize, seed: u64) -> Self {
        MlpConfig {
            hidden_layers: 0,
            width: 1,
            dropout: 0.0,
            batch_norm: false,
            learning_rate,
            batch_size: 32,
            max_epochs,
            patience: max_epochs.max(1),
            seed,
            normalize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate < 1.0) {
            return bad(format!(
                "learning rate must be in (0, 1), got {}",
                self.learning_rate
            ));
        }
        if self.hidden_layers > 0 && self.width == 0 {
            return bad("hidden width must be positive".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch size and epoch count must be positive".into());
        }
        if self.patience == 0 {
            return bad("early-stopping patience must be at least 1".into());
        }
        Ok(())
    }
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig::table3(0)
    }
}

/// Per-column affine standardization `(v - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Columns whose spread fell below [`STD_FLOOR`].
    pub floored: Vec<bool>,
}

impl Standardizer {
    pub fn identity(n: usize) -> Self {
        Standardizer {
            mean: vec![0.0; n],
            std: vec![1.0; n],
            floored: vec![false; n],
        }
    }

    /// Population statistics of the columns of `x`.
    pub fn fit(x: ArrayView2<'_, f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::Dimension(
                "cannot standardize an empty matrix".into(),
            ));
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let var = x.var_axis(Axis(0), 0.0);
        let mut floored = vec![false; x.ncols()];
        let std = var
            .iter()
            .zip(&mut floored)
            .map(|(&v, f)| {
                let s = v.sqrt();
                if s < STD_FLOOR || !s.is_finite() {
                    *f = true;
                    STD_FLOOR
                } else {
                    s
                }
            })
            .collect();
        Ok(Standardizer {
            mean: mean.to_vec(),
            std,
            floored,
        })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn inverse(&self, y: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = y.to_owned();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Dense {
    /// `inputs × outputs`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn new(n: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(n),
            beta: Array1::zeros(n),
            running_mean: Array1::zeros(n),
            running_var: Array1::ones(n),
        }
    }
}

/// A trained (or constructed) estimator. Immutable once built; `predict`
/// takes `&self` and can be shared across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub(crate) layers: Vec<Dense>,
    /// One entry per hidden layer.
    pub(crate) norms: Vec<Option<BatchNorm>>,
    pub input_norm: Standardizer,
    pub output_norm: Standardizer,
    pub config: MlpConfig,
    pub topology: String,
    pub feature_names: Vec<String>,
    pub target_names: Vec<String>,
}

impl MlpModel {
    /// Builds a network from explicit `(W, b)` pairs with identity
    /// normalization and no batch norm. `W` is `inputs × outputs`.
    pub fn from_layers(layers: Vec<(Array2<f64>, Array1<f64>)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Dimension(
                "a network needs at least one layer".into(),
            ));
        }
        for (i, (w, b)) in layers.iter().enumerate() {
            if w.ncols() != b.len() {
                return Err(Error::Dimension(format!(
                    "layer {i}: {} outputs but {} biases",
                    w.ncols(),
                    b.len()
                )));
            }
            if i > 0 && layers[i - 1].0.ncols() != w.nrows() {
                return Err(Error::Dimension(format!(
                    "layer {i} takes {} inputs but layer {} produces {}",
                    w.nrows(),
                    i - 1,
                    layers[i - 1].0.ncols()
                )));
            }
        }
        let m = layers[0].0.nrows();
        let n = layers.last().unwrap().0.ncols();
        let hidden = layers.len() - 1;
        let config = MlpConfig {
            hidden_layers: hidden,
            width: if hidden > 0 { layers[0].0.ncols() } else { 1 },
            dropout: 0.0,
            batch_norm: false,
            ..MlpConfig::linear(1e-3, 1, 0)
        };
        Ok(MlpModel {
            layers: layers.into_iter().map(|(w, b)| Dense { w, b }).collect(),
            norms: vec![None; hidden],
            input_norm: Standardizer::identity(m),
            output_norm: Standardizer::identity(n),
            config,
            topology: String::new(),
            feature_names: (0..m).map(|i| format!("z{i}")).collect(),
            target_names: (0..n).map(|i| format!("x{i}")).collect(),
        })
    }

    pub fn n_inputs(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn n_outputs(&self) -> usize {
        self.layers.last().unwrap().w.ncols()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Weights and biases of layer `i`.
    pub fn layer(&self, i: usize) -> (&Array2<f64>, &Array1<f64>) {
        (&self.layers[i].w, &self.layers[i].b)
    }

    pub fn n_parameters(&self) -> usize {
        let dense: usize = self.layers.iter().map(|l| l.w.len() + l.b.len()).sum();
        let bn: usize = self.norms.iter().flatten().map(|n| 2 * n.gamma.len()).sum();
        dense + bn
    }

    /// Estimates the state for one feature vector.
    pub fn predict(&self, z: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, z.len()), z).expect("row vector");
        Ok(self.predict_batch(view)?.into_raw_vec_and_offset().0)
    }

    /// Estimates the state for every row of `z`.
    pub fn predict_batch(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.n_inputs() {
            return Err(Error::Dimension(format!(
                "model takes {} features, got {}",
                self.n_inputs(),
                z.ncols()
            )));
        }
        if let Some(pos) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite feature at row {}, column {}",
                pos / z.ncols().max(1),
                pos % z.ncols().max(1)
            )));
        }
        let h = self.input_norm.forward(z);
        let y = net::infer(self, h);
        Ok(self.output_norm.inverse(y.view()))
    }

    /// Reorders the columns of `z` (named by `names`) into the model's input
    /// order. Inputs the model expects but `z` lacks are filled with zeros,
    /// which is what a PMU reports for a current channel on an open line.
    pub fn align_features(&self, z: ArrayView2<'_, f64>, names: &[String]) -> Result<Array2<f64>> {
        if names.len() != z.ncols() {
            return Err(Error::Dimension(format!(
                "{} names for {} columns",
                names.len(),
                z.ncols()
            )));
        }
        let mut out = Array2::zeros((z.nrows(), self.n_inputs()));
        for (j, name) in self.feature_names.iter().enumerate() {
            if let Some(src) = names.iter().position(|n| n == name) {
                out.column_mut(j).assign(&z.column(src));
            }
        }
        Ok(out)
    }

    /// `Some(message)` when the model was trained for another topology.
    pub fn topology_warning(&self, topology: &str) -> Option<String> {
        (self.topology != topology).then(|| {
            format!(
                "model was trained for topology '{}' but is applied to '{}'",
                self.topology, topology
            )
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    /// relu(x) - relu(-x) = x through one hidden layer of width 2m.
    fn identity_net(m: usize) -> MlpModel {
        let eye = Array2::<f64>::eye(m);
        let mut w1 = Array2::zeros((m, 2 * m));
        w1.slice_mut(ndarray::s![.., ..m]).assign(&eye);
        w1.slice_mut(ndarray::s![.., m..]).assign(&(-&eye));
        let mut w2 = Array2::zeros((2 * m, m));
        w2.slice_mut(ndarray::s![..m, ..]).assign(&eye);
        w2.slice_mut(ndarray::s![m.., ..]).assign(&(-&eye));
        MlpModel::from_layers(vec![(w1, Array1::zeros(2 * m)), (w2, Array1::zeros(m))]).unwrap()
    }

    #[test]
    fn constructed_identity_reproduces_input() {
        let net = identity_net(3);
        let z = [0.5, -1.25, 3.0];
        assert_eq!(net.predict(&z).unwrap(), z.to_vec());
    }

    #[test]
    fn predict_is_repeatable() {
        let net = identity_net(4);
        let z = [0.1, 0.2, -0.3, 0.4];
        let a = net.predict(&z).unwrap();
        for _ in 0..5 {
            assert_eq!(net.predict(&z).unwrap(), a);
        }
    }

    #[test]
    fn predict_rejects_bad_input() {
        let net = identity_net(2);
        assert!(matches!(net.predict(&[1.0]), Err(Error::Dimension(_))));
        assert!(net.predict(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn from_layers_checks_chaining() {
        let l1 = (Array2::zeros((2, 3)), Array1::zeros(3));
        let l2 = (Array2::zeros((4, 1)), Array1::zeros(1));
        assert!(MlpModel::from_layers(vec![l1, l2]).is_err());
    }

    #[test]
    fn standardizer_round_trip_and_floor() {
        let x = array![[1.0, 5.0], [3.0, 5.0]];
        let s = Standardizer::fit(x.view()).unwrap();
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std[0], 1.0);
        assert_eq!(s.floored, vec![false, true]);
        assert_eq!(s.std[1], STD_FLOOR);
        let back = s.inverse(s.forward(x.view()).view());
        assert_eq!(back, x);
    }

    #[test]
    fn align_fills_missing_with_zero() {
        let mut net = identity_net(3);
        net.feature_names = vec!["a".into(), "b".into(), "c".into()];
        let z = array![[7.0, 9.0]];
        let out = net
            .align_features(z.view(), &["c".into(), "a".into()])
            .unwrap();
        assert_eq!(out, array![[9.0, 0.0, 7.0]]);
    }

    #[test]
    fn config_validation() {
        assert!(MlpConfig::table3(0).validate().is_ok());
        let mut c = MlpConfig::table3(0);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        c = MlpConfig::table3(0);
        c.patience = 0;
        assert!(c.validate().is_err());
        c = MlpConfig::table3(0);
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }
}

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{BatchNorm, Dense, MlpConfig, MlpModel, Standardizer};
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "tsse-mlp";

#[derive(Serialize, Deserialize)]
struct BnFile {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    inputs: usize,
    outputs: usize,
    /// Row-major `inputs × outputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    batch_norm: Option<BnFile>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    topology: String,
    config: MlpConfig,
    feature_names: Vec<String>,
    target_names: Vec<String>,
    input_norm: Standardizer,
    output_norm: Standardizer,
    layers: Vec<LayerFile>,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
}

pub fn save_model(model: &MlpModel, path: impl AsRef<Path>) -> Result<()> {
    let layers = model
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| LayerFile {
            inputs: l.w.nrows(),
            outputs: l.w.ncols(),
            weights: l.w.iter().copied().collect(),
            bias: l.b.to_vec(),
            batch_norm: model
                .norms
                .get(i)
                .and_then(|n| n.as_ref())
                .map(|bn| BnFile {
                    gamma: bn.gamma.to_vec(),
                    beta: bn.beta.to_vec(),
                    running_mean: bn.running_mean.to_vec(),
                    running_var: bn.running_var.to_vec(),
                }),
        })
        .collect();
    let file = ModelFile {
        format: FORMAT_TAG.into(),
        version: MODEL_FORMAT_VERSION,
        topology: model.topology.clone(),
        config: model.config.clone(),
        feature_names: model.feature_names.clone(),
        target_names: model.target_names.clone(),
        input_norm: model.input_norm.clone(),
        output_norm: model.output_norm.clone(),
        layers,
    };
    fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MlpModel> {
    let text = fs::read(path)?;
    let header: Header =
        serde_json::from_slice(&text).map_err(|e| Error::CorruptModel(e.to_string()))?;
    if header.format != FORMAT_TAG {
        return Err(Error::CorruptModel(format!(
            "unexpected format tag '{}'",
            header.format
        )));
    }
    if header.version != MODEL_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: header.version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let file: ModelFile =
        serde_json::from_slice(&text).map_err(|e| Error::CorruptModel(e.to_string()))?;
    from_file(file).map_err(|e| match e {
        Error::Dimension(msg) => Error::CorruptModel(msg),
        other => other,
    })
}

/// Loads a model and reports a warning when it was trained for a topology
/// other than `topology`.
pub fn load_model_checked(
    path: impl AsRef<Path>,
    topology: &str,
) -> Result<(MlpModel, Vec<String>)> {
    let model = load_model(path)?;
    let warnings: Vec<String> = model.topology_warning(topology).into_iter().collect();
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((model, warnings))
}

fn from_file(file: ModelFile) -> Result<MlpModel> {
    let hidden = file.layers.len().saturating_sub(1);
    let mut layers = Vec::with_capacity(file.layers.len());
    let mut norms = Vec::with_capacity(hidden);
    for (i, l) in file.layers.into_iter().enumerate() {
        let w = Array2::from_shape_vec((l.inputs, l.outputs), l.weights)
            .map_err(|e| Error::Dimension(format!("layer {i}: {e}")))?;
        if l.bias.len() != l.outputs {
            return Err(Error::Dimension(format!(
                "layer {i}: {} biases for {} outputs",
                l.bias.len(),
                l.outputs
            )));
        }
        if i < hidden {
            let bn = match l.batch_norm {
                Some(bn) => {
                    if [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]
                        .iter()
                        .any(|v| v.len() != l.outputs)
                    {
                        return Err(Error::Dimension(format!(
                            "layer {i}: batch-norm length mismatch"
                        )));
                    }
                    Some(BatchNorm {
                        gamma: Array1::from(bn.gamma),
                        beta: Array1::from(bn.beta),
                        running_mean: Array1::from(bn.running_mean),
                        running_var: Array1::from(bn.running_var),
                    })
                }
                None => None,
            };
            norms.push(bn);
        }
        layers.push(Dense {
            w,
            b: Array1::from(l.bias),
        });
    }
    let mut model = MlpModel::from_layers(layers.into_iter().map(|d| (d.w, d.b)).collect())?;
    model.norms = norms;
    if file.input_norm.len() != model.n_inputs()
        || file.output_norm.len() != model.n_outputs()
        || file.feature_names.len() != model.n_inputs()
        || file.target_names.len() != model.n_outputs()
    {
        return Err(Error::Dimension(
            "normalization or names do not match layer shapes".into(),
        ));
    }
    model.input_norm = file.input_norm;
    model.output_norm = file.output_norm;
    model.config = file.config;
    model.topology = file.topology;
    model.feature_names = file.feature_names;
    model.target_names = file.target_names;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{train_arrays, TrainData};
    use crate::rng;
    use rand::Rng;

    fn trained() -> MlpModel {
        let mut g = rng::stream(1, "io");
        let z = Array2::from_shape_simple_fn((120, 3), || g.random_range(-1.0..1.0));
        let x = Array2::from_shape_fn((120, 2), |(i, j)| z[(i, j)] * 2.0 + z[(i, 2)]);
        let data = TrainData {
            z_train: z.view(),
            x_train: x.view(),
            z_val: z.view(),
            x_val: x.view(),
        };
        let cfg = MlpConfig {
            hidden_layers: 2,
            width: 7,
            batch_size: 16,
            max_epochs: 3,
            ..MlpConfig::table3(5)
        };
        let mut m = train_arrays(data, &cfg).unwrap().0;
        m.topology = "base".into();
        m
    }

    #[test]
    fn round_trip_gives_identical_predictions() {
        let m = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, m);
        let mut g = rng::stream(2, "io-check");
        let z = Array2::from_shape_simple_fn((100, 3), || g.random_range(-3.0..3.0));
        assert_eq!(
            m.predict_batch(z.view()).unwrap(),
            back.predict_batch(z.view()).unwrap()
        );
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&trained(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::CorruptModel(_))));
    }

    #[test]
    fn other_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&trained(), &path).unwrap();
        let text =
            fs::read_to_string(&path)
                .unwrap()
                .replacen("\"version\":1", "\"version\":99", 1);
        fs::write(&path, text).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(Error::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn topology_mismatch_warns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&trained(), &path).unwrap();
        let (_, same) = load_model_checked(&path, "base").unwrap();
        assert!(same.is_empty());
        let (_, other) = load_model_checked(&path, "base-open-75-77").unwrap();
        assert_eq!(other.len(), 1);
    }
}

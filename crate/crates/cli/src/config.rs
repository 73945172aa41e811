use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};
use tsse_core::bddc::BddcConfig;
use tsse_core::mlp::{FineTune, MlpConfig};
use tsse_core::{Error, Result};

/// Everything a run needs. Each section has defaults, so an empty file is a
/// valid configuration for the 118-bus study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub case: CaseSection,
    pub placement: PlacementSection,
    pub injections: InjectionSection,
    pub noise: NoiseSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub mlp: MlpSection,
    pub finetune: FineTuneSection,
    pub bddc: BddcSection,
    pub extreme: ExtremeSection,
    pub oracle: OracleSection,
    pub stream: StreamSection,
    pub db_study: DbStudySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: PathBuf::from("out"),
            case: CaseSection::default(),
            placement: PlacementSection::default(),
            injections: InjectionSection::default(),
            noise: NoiseSection::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            mlp: MlpSection::default(),
            finetune: FineTuneSection::default(),
            bddc: BddcSection::default(),
            extreme: ExtremeSection::default(),
            oracle: OracleSection::default(),
            stream: StreamSection::default(),
            db_study: DbStudySection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaseSection {
    /// JSON case or MATPOWER-style `.m` file; overrides `builtin`.
    pub path: Option<PathBuf>,
    /// `ieee118`, `three_bus`, `triangle` or `two_bus`.
    pub builtin: String,
    /// Opens the line between these two buses.
    pub open_line: Option<[u32; 2]>,
}

impl Default for CaseSection {
    fn default() -> Self {
        CaseSection {
            path: None,
            builtin: "ieee118".into(),
            open_line: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementSection {
    pub buses: Option<Vec<u32>>,
    /// JSON array of bus ids; overrides `buses`.
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionSection {
    /// `parametric`, `three_bus`, `kde` or `file`.
    pub kind: String,
    /// Standard deviation of each injection, percent of nominal (parametric).
    pub pct_std: f64,
    /// History CSV (kde) or injection-model JSON (file).
    pub path: Option<PathBuf>,
}

impl Default for InjectionSection {
    fn default() -> Self {
        InjectionSection {
            kind: "parametric".into(),
            pct_std: 5.0,
            path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    /// `none`, `gaussian`, `gmm` or `laplace`.
    pub family: String,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            family: "gaussian".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub samples: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Dataset directory; `<out_dir>/data` when unset.
    pub dir: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            samples: 14_000,
            train: 7500,
            val: 2500,
            test: 4000,
            dir: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Model file; `<out_dir>/model.json` when unset.
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpSection {
    /// `table3` or `linear`; the fields below override it.
    pub preset: String,
    pub hidden_layers: Option<usize>,
    pub width: Option<usize>,
    pub dropout: Option<f64>,
    pub batch_norm: Option<bool>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
}

impl Default for MlpSection {
    fn default() -> Self {
        MlpSection {
            preset: "table3".into(),
            hidden_layers: None,
            width: None,
            dropout: None,
            batch_norm: None,
            learning_rate: None,
            batch_size: None,
            max_epochs: None,
            patience: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneSection {
    pub samples: usize,
    pub epochs: usize,
    pub learning_rate: Option<f64>,
    /// Allow the new topology to have fewer input features than the model.
    pub remap: bool,
}

impl Default for FineTuneSection {
    fn default() -> Self {
        let d = FineTune::default();
        FineTuneSection {
            samples: d.samples,
            epochs: d.epochs,
            learning_rate: d.learning_rate,
            remap: d.remap,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BddcSection {
    pub alpha: f64,
    pub esf_enabled: bool,
    pub min_group: usize,
    pub standardized_distance: bool,
    /// Training rows used as the operating-condition database; all when unset.
    pub database_rows: Option<usize>,
    /// Bad-data probabilities of the probability sweep.
    pub etas: Vec<f64>,
    /// Severity of the probability sweep, in training standard deviations.
    pub eta_severity: f64,
    /// Severities of the severity sweep.
    pub severities: Vec<f64>,
    /// Probability of the severity sweep.
    pub severity_eta: f64,
}

impl Default for BddcSection {
    fn default() -> Self {
        BddcSection {
            alpha: 0.05,
            esf_enabled: false,
            min_group: 2,
            standardized_distance: false,
            database_rows: None,
            etas: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            eta_severity: 3.0,
            severities: vec![3.0, 4.0, 5.0, 6.0, 7.0],
            severity_eta: 0.3,
        }
    }
}

impl BddcSection {
    pub fn core(&self) -> BddcConfig {
        BddcConfig {
            alpha: self.alpha,
            esf_enabled: self.esf_enabled,
            min_group: self.min_group,
            standardized_distance: self.standardized_distance,
            ..BddcConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtremeSection {
    /// Run the stressed-scenario study in `bddc simulate`.
    pub enabled: bool,
    pub count: usize,
    pub stressed: Vec<u32>,
    pub scale: [f64; 2],
    pub bad_pmus: Vec<u32>,
    pub severity: f64,
}

impl Default for ExtremeSection {
    fn default() -> Self {
        ExtremeSection {
            enabled: false,
            count: 1000,
            stressed: vec![8, 10],
            scale: [2.0, 3.0],
            bad_pmus: vec![68, 81],
            severity: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub samples: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection { samples: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSection {
    /// Test rows replayed; all when unset.
    pub frames: Option<usize>,
    pub budget_ms: f64,
    pub bddc: bool,
}

impl Default for StreamSection {
    fn default() -> Self {
        StreamSection {
            frames: None,
            budget_ms: tsse_core::eval::FRAME_INTERVAL_MS,
            bddc: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbStudySection {
    pub sizes: Vec<usize>,
    pub test_rows: usize,
    pub val_fraction: f64,
}

impl Default for DbStudySection {
    fn default() -> Self {
        DbStudySection {
            sizes: vec![2500, 5000, 10_000, 15_000, 20_000],
            test_rows: 4000,
            val_fraction: 0.25,
        }
    }
}

impl RunConfig {
    /// Reads `path` (when given), applies `overrides` (`dotted.key=value`)
    /// and checks the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.samples < d.train + d.val + d.test {
            return Err(Error::Config(format!(
                "data.samples = {} is smaller than train + val + test = {}",
                d.samples,
                d.train + d.val + d.test
            )));
        }
        for p in [&self.case.path, &self.placement.path, &self.injections.path]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(Error::Config(format!(
                    "file {} does not exist",
                    p.display()
                )));
            }
        }
        self.mlp_config()?.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data
            .dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("data"))
    }

    pub fn model_path(&self) -> PathBuf {
        self.model
            .path
            .clone()
            .unwrap_or_else(|| self.out_dir.join("model.json"))
    }

    pub fn mlp_config(&self) -> Result<MlpConfig> {
        let m = &self.mlp;
        let base = match m.preset.as_str() {
            "table3" => MlpConfig::table3(self.seed),
            "linear" => MlpConfig::linear(1e-3, 200, self.seed),
            other => return Err(Error::Config(format!("unknown MLP preset '{other}'"))),
        };
        Ok(MlpConfig {
            hidden_layers: m.hidden_layers.unwrap_or(base.hidden_layers),
            width: m.width.unwrap_or(base.width),
            dropout: m.dropout.unwrap_or(base.dropout),
            batch_norm: m.batch_norm.unwrap_or(base.batch_norm),
            learning_rate: m.learning_rate.unwrap_or(base.learning_rate),
            batch_size: m.batch_size.unwrap_or(base.batch_size),
            max_epochs: m.max_epochs.unwrap_or(base.max_epochs),
            patience: m.patience.unwrap_or(base.patience),
            ..base
        })
    }

    pub fn finetune(&self) -> FineTune {
        let f = &self.finetune;
        FineTune {
            samples: f.samples,
            epochs: f.epochs,
            learning_rate: f.learning_rate,
            remap: f.remap,
        }
    }
}

/// Sets `a.b.c = value`, creating tables on the way. The value is read as
/// TOML and taken as a bare string when that fails.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
    let value = format!("v = {}", raw.trim())
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{p}' in '{key}' is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

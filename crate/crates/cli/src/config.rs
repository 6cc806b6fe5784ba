//! Run configuration: a TOML file with `model`, `window`, `fusion`, `train`
//! and `data` sections. Every key is optional and unknown keys are errors.
//!
//! ```toml
//! [model]
//! arch = "cnn"            # cnn | rnn
//! cell = "lstm"           # lstm | gru | rnn | bi_rnn (rnn arch only)
//! scale = 8               # channel divisor, base width is 48 / scale
//! compact = true          # one block per stage
//! stage3_repeats = 3      # third stage repeats of the full pattern
//!
//! [window]
//! mode = "dilated"        # dilated | non_dilated
//! groups = 4              # groups of non-dilated windows
//! region_threshold = 0.1
//! ms_mode = "activate"    # activate | passthrough
//!
//! [fusion]
//! enabled = true
//! kind = "omega"          # omega | linear_sum | relu | sigmoid | tanh
//! theta = 0.5
//! th = 0.5                # threshold of the area analysis
//! thetas = [0.1, 0.3, 0.5, 0.7, 0.9]
//!
//! [train]                 # see wsnn::train::TrainConfig
//! epochs = 50
//! seed = 0
//!
//! [data]
//! source = "synthetic"    # synthetic | binary_file
//! train_path = "train.bin"
//! test_path = "test.bin"  # optional, otherwise every fifth record is held out
//! channels = 1
//! height = 16
//! width = 16
//! num_classes = 2
//! per_class = 500         # synthetic training images per class
//! test_per_class = 200
//! seed = 1                # synthetic seed, the test split uses seed + 1000
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wsnn::data::{load_binary_images, make_synthetic, Dataset, Normalization, Source};
use wsnn::fusion::{FusionConfig, FusionKind};
use wsnn::net::{build_cnn, build_rnn, CellKind, CnnOptions, InputShape, NetworkSpec, RnnOptions};
use wsnn::train::TrainConfig;
use wsnn::window::{MsMode, WindowMode};

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    #[default]
    Cnn,
    Rnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub arch: Arch,
    pub cell: CellKind,
    pub scale: usize,
    pub compact: bool,
    pub stage3_repeats: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: Arch::Cnn,
            cell: CellKind::Lstm,
            scale: 8,
            compact: true,
            stage3_repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSection {
    pub mode: WindowMode,
    pub groups: usize,
    pub region_threshold: f64,
    pub ms_mode: MsMode,
}

impl Default for WindowSection {
    fn default() -> Self {
        Self {
            mode: WindowMode::Dilated,
            groups: 4,
            region_threshold: 0.1,
            ms_mode: MsMode::Activate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub enabled: bool,
    pub kind: FusionKind,
    pub theta: f64,
    pub th: f64,
    /// Angles of `sweep-theta`.
    pub thetas: Vec<f64>,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            enabled: true,
            kind: FusionKind::Omega,
            theta: 0.5,
            th: 0.5,
            thetas: vec![0.1, 0.3, 0.5, 0.7, 0.9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: Source,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: Source::Synthetic,
            train_path: None,
            test_path: None,
            channels: 1,
            height: 16,
            width: 16,
            num_classes: 2,
            per_class: 500,
            test_per_class: 200,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelSection,
    pub window: WindowSection,
    pub fusion: FusionSection,
    pub train: TrainConfig,
    pub data: DataSection,
}

/// Normalized training and held-out splits.
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub normalization: Normalization,
}

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config_err(format!("dataset not found: {}", path.display())))
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Failure::Config(m) => config_err(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, Failure> {
        toml::from_str(text).map_err(|e| config_err(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), Failure> {
        if self.model.scale == 0 {
            return Err(config_err("model.scale must be positive"));
        }
        if self.window.groups == 0 {
            return Err(config_err("window.groups must be positive"));
        }
        if !(0.0..=1.0).contains(&self.window.region_threshold) {
            return Err(config_err("window.region_threshold must lie in [0, 1]"));
        }
        if let Some(t) = self
            .fusion
            .thetas
            .iter()
            .find(|t| !(**t > 0.0 && t.is_finite()))
        {
            return Err(config_err(format!(
                "fusion.thetas: theta must be positive, got {t}"
            )));
        }
        self.fusion_config()
            .validate()
            .map_err(|e| config_err(format!("fusion: {e}")))?;
        self.train
            .validate()
            .map_err(|e| config_err(format!("train: {e}")))?;
        let d = &self.data;
        if d.channels == 0 || d.height == 0 || d.width == 0 {
            return Err(config_err(
                "data.channels, data.height and data.width must be positive",
            ));
        }
        if d.num_classes < 2 {
            return Err(config_err("data.num_classes must be at least 2"));
        }
        if d.source == Source::BinaryFile && d.train_path.is_none() {
            return Err(config_err(
                "data.train_path is required for binary_file data",
            ));
        }
        Ok(())
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            theta: self.fusion.theta,
            th: self.fusion.th,
            enabled: self.fusion.enabled,
            kind: self.fusion.kind,
        }
    }

    pub fn network(&self) -> Result<NetworkSpec, Failure> {
        let d = &self.data;
        let mut o = CnnOptions::new(self.model.scale, d.num_classes);
        o.input = InputShape {
            channels: d.channels,
            height: d.height,
            width: d.width,
        };
        o.stage3_repeats = self.model.stage3_repeats;
        o.groups = self.window.groups;
        o.fusion = self.fusion_config();
        o.dilated = self.window.mode == WindowMode::Dilated;
        o.compact = self.model.compact;
        let mut net = match self.model.arch {
            Arch::Cnn => build_cnn(&o)?,
            Arch::Rnn => build_rnn(&RnnOptions {
                cnn: o,
                cell: self.model.cell,
            })?,
        };
        for l in &mut net.layers {
            l.window.region_threshold = self.window.region_threshold;
            l.window.ms_mode = self.window.ms_mode;
        }
        net.validate()?;
        Ok(net)
    }

    /// Loads or generates both splits, normalized with training statistics.
    pub fn splits(&self) -> Result<Splits, Failure> {
        let (train, test) = self.raw_splits()?;
        let normalization = Normalization::fit(&train);
        Ok(Splits {
            train: normalization.apply(&train)?,
            test: normalization.apply(&test)?,
            normalization,
        })
    }

    /// Training and held-out splits with pixels in `[0, 1]`.
    pub fn raw_splits(&self) -> Result<(Dataset, Dataset), Failure> {
        let d = &self.data;
        Ok(match d.source {
            Source::Synthetic => (
                make_synthetic(d.num_classes, d.per_class, d.height, d.width, d.seed)?,
                make_synthetic(
                    d.num_classes,
                    d.test_per_class,
                    d.height,
                    d.width,
                    d.seed + 1000,
                )?,
            ),
            Source::BinaryFile => {
                let path = d.train_path.as_deref().ok_or_else(|| {
                    config_err("data.train_path is required for binary_file data")
                })?;
                require_file(path)?;
                if let Some(t) = &d.test_path {
                    require_file(t)?;
                }
                let load =
                    |p: &Path| load_binary_images(p, d.channels, d.height, d.width, d.num_classes);
                let all = load(path)?;
                match &d.test_path {
                    Some(t) => (all, load(t)?),
                    None => hold_out(&all, 5),
                }
            }
        })
    }
}

/// Every `k`-th record goes to the second split.
fn hold_out(ds: &Dataset, k: usize) -> (Dataset, Dataset) {
    let (test, train): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|i| i % k == k - 1);
    let pick = |idx: &[usize]| Dataset {
        pixels: idx
            .iter()
            .flat_map(|&i| ds.image(i).iter().copied())
            .collect(),
        labels: idx.iter().map(|&i| ds.labels[i]).collect(),
        ..ds.clone()
    };
    (pick(&train), pick(&test))
}

/// Flag overrides. Each has a config key: `model.scale`, `fusion.theta`,
/// `fusion.th`, `window.mode`, `window.ms_mode`, `train.seed`,
/// `train.epochs`, `data.train_path` and `data.test_path`.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dataset: Option<PathBuf>,
    pub test_dataset: Option<PathBuf>,
    pub theta: Option<f64>,
    pub th: Option<f64>,
    pub window_mode: Option<WindowMode>,
    pub ms_mode: Option<MsMode>,
    pub seed: Option<u64>,
    pub scale: Option<usize>,
    pub epochs: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut Config) {
        if let Some(p) = &self.dataset {
            cfg.data.source = Source::BinaryFile;
            cfg.data.train_path = Some(p.clone());
        }
        if let Some(p) = &self.test_dataset {
            cfg.data.test_path = Some(p.clone());
        }
        if let Some(v) = self.theta {
            cfg.fusion.theta = v;
        }
        if let Some(v) = self.th {
            cfg.fusion.th = v;
        }
        if let Some(v) = self.window_mode {
            cfg.window.mode = v;
        }
        if let Some(v) = self.ms_mode {
            cfg.window.ms_mode = v;
        }
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = self.scale {
            cfg.model.scale = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn round_trip() {
        let mut c = Config::default();
        c.data.train_path = Some("a.bin".into());
        c.model.arch = Arch::Rnn;
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let e = Config::from_toml("[train]\nepoch = 3\n").unwrap_err();
        assert!(
            matches!(&e, Failure::Config(m) if m.contains("epoch")),
            "{e}"
        );
        assert!(Config::from_toml("[modle]\n").is_err());
    }

    #[test]
    fn overrides_win() {
        let mut c = Config::from_toml("[fusion]\ntheta = 0.3\n[train]\nseed = 4\n").unwrap();
        Overrides {
            theta: Some(0.7),
            seed: Some(9),
            window_mode: Some(WindowMode::NonDilated),
            ..Overrides::default()
        }
        .apply(&mut c);
        assert_eq!((c.fusion.theta, c.train.seed), (0.7, 9));
        assert_eq!(c.window.mode, WindowMode::NonDilated);
    }

    #[test]
    fn non_positive_theta_is_a_config_error() {
        let mut c = Config::default();
        c.fusion.thetas = vec![0.5, 0.0];
        assert!(matches!(c.validate(), Err(Failure::Config(_))));
    }

    #[test]
    fn window_settings_reach_every_layer() {
        let mut c = Config::default();
        c.window.ms_mode = MsMode::Passthrough;
        c.window.mode = WindowMode::NonDilated;
        let net = c.network().unwrap();
        assert!(net
            .layers
            .iter()
            .all(|l| l.window.ms_mode == MsMode::Passthrough));
        assert!(net
            .layers
            .iter()
            .all(|l| l.window.mode == WindowMode::NonDilated));
    }
}

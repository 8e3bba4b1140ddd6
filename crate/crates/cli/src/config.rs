//! Declarative run configuration.
//!
//! ```toml
//! output_dir = "runs/desk"
//!
//! [model]
//! depth = 16
//! widen = 2
//! classes = 10
//!
//! [train]
//! mode = "sdpoint"      # sdpoint | baseline | multiscale
//! epochs = 40
//! seed = 1
//! ratios = [0.5, 0.75]
//!
//! [data]
//! dir = "cifar-10-batches-bin"
//! train_images = 10000
//! ```

use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use toml::Spanned;

use sdpoint::data::AugmentPolicy;
use sdpoint::train::{TrainConfig, TrainMode};
use sdpoint::NetworkSpec;

/// A configuration problem, located by line where possible.
#[derive(Debug)]
pub struct ConfigError {
    pub path: PathBuf,
    pub line: Option<usize>,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "{}:{line}: {}", self.path.display(), self.msg),
            None => write!(f, "{}: {}", self.path.display(), self.msg),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub model: ModelSection,
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub depth: usize,
    pub widen: usize,
    pub classes: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub mode: ModeName,
    pub epochs: usize,
    pub seed: u64,
    pub batch_size: Option<usize>,
    pub base_lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub lr_drop_points: Option<Spanned<Vec<f64>>>,
    pub ratios: Option<Spanned<Vec<f64>>>,
    pub points: Option<usize>,
    pub multiscale_sizes: Option<(usize, usize)>,
    pub augment: Option<bool>,
    /// Also save a checkpoint when each learning-rate drop is reached.
    #[serde(default)]
    pub milestone_checkpoints: bool,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Sdpoint,
    Baseline,
    Multiscale,
}

impl From<ModeName> for TrainMode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::Sdpoint => TrainMode::SdPoint,
            ModeName::Baseline => TrainMode::Baseline,
            ModeName::Multiscale => TrainMode::Multiscale,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dir: Option<PathBuf>,
    pub train_images: Option<usize>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: path.to_path_buf(),
            line: None,
            msg: e.to_string(),
        })?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let err = |span: Option<Range<usize>>, msg: String| ConfigError {
            path: path.to_path_buf(),
            line: span.map(|s| line_of(text, s.start)),
            msg,
        };
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| err(e.span(), e.message().trim_end().to_string()))?;
        if let Some(r) = &cfg.train.ratios {
            if r.get_ref().is_empty() || r.get_ref().iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
                return Err(err(
                    Some(r.span()),
                    "ratios must be a non-empty list of values in (0, 1]".into(),
                ));
            }
        }
        if let Some(d) = &cfg.train.lr_drop_points {
            if d.get_ref().iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
                return Err(err(
                    Some(d.span()),
                    "lr_drop_points must lie strictly between 0 and 1".into(),
                ));
            }
        }
        cfg.spec().map_err(|e| err(None, e.to_string()))?;
        cfg.train_config()
            .validate()
            .map_err(|e| err(None, e.to_string()))?;
        Ok(cfg)
    }

    pub fn spec(&self) -> sdpoint::Result<NetworkSpec> {
        NetworkSpec::wide_resnet(self.model.depth, self.model.widen, self.model.classes)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let d = TrainConfig::default();
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            base_lr: t.base_lr.unwrap_or(d.base_lr),
            momentum: t.momentum.unwrap_or(d.momentum),
            weight_decay: t.weight_decay.unwrap_or(d.weight_decay),
            lr_drop_points: t
                .lr_drop_points
                .as_ref()
                .map_or(d.lr_drop_points, |s| s.get_ref().clone()),
            mode: t.mode.into(),
            seed: t.seed,
            ratios: t.ratios.as_ref().map_or(d.ratios, |s| s.get_ref().clone()),
            points: t.points,
            multiscale_sizes: t.multiscale_sizes.unwrap_or(d.multiscale_sizes),
            augment: if t.augment.unwrap_or(true) {
                AugmentPolicy::default()
            } else {
                AugmentPolicy::disabled()
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "output_dir = \"out\"\n\n[model]\ndepth = 16\nwiden = 2\nclasses = 10\n\n[train]\nmode = \"sdpoint\"\nepochs = 2\nseed = 3\n";

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::parse(text, Path::new("run.toml"))
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = parse(MINIMAL).unwrap();
        let t = cfg.train_config();
        assert_eq!(t.epochs, 2);
        assert_eq!(t.mode, TrainMode::SdPoint);
        assert_eq!(t.ratios, vec![0.5, 0.75]);
        assert_eq!(cfg.spec().unwrap().downsampling_points(), 6);
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let text = MINIMAL.replace("seed = 3", "seed = 3\nlearning_rate = 0.1");
        let e = parse(&text).unwrap_err();
        assert_eq!(e.line, Some(12));
        assert!(e.msg.contains("learning_rate"), "{}", e.msg);
    }

    #[test]
    fn missing_key_is_rejected() {
        let e = parse(&MINIMAL.replace("epochs = 2\n", "")).unwrap_err();
        assert!(e.msg.contains("epochs"), "{}", e.msg);
    }

    #[test]
    fn bad_ratio_reports_its_line() {
        let text = MINIMAL.replace("seed = 3", "seed = 3\nratios = [0.5, 1.5]");
        let e = parse(&text).unwrap_err();
        assert_eq!(e.line, Some(12));
    }

    #[test]
    fn bad_mode_and_depth() {
        assert!(parse(&MINIMAL.replace("\"sdpoint\"", "\"fast\"")).is_err());
        let e = parse(&MINIMAL.replace("depth = 16", "depth = 15")).unwrap_err();
        assert!(e.msg.contains("depth"), "{}", e.msg);
    }
}

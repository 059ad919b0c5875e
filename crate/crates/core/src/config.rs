//! Training configuration and its `key=value` text form.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use qsattn_tensor::Upsample;

use crate::attn::{parse_selector, Routing, SelectionStrategy, Selector, DEFAULT_WINDOW};
use crate::contrast::{PatchNce, QsLayers, DEFAULT_TAU};
use crate::error::{QsError, Result};
use crate::nets::{Discriminator, DiscriminatorConfig, GeneratorConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GanMode {
    #[default]
    LeastSquares,
    NonSaturatingLog,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum UpdateOrder {
    #[default]
    DThenG,
    GThenD,
}

/// Coefficients of the generator objective's three terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub adv: f64,
    pub con_x: f64,
    pub con_y: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adv: 1.0,
            con_x: 1.0,
            con_y: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay_start_epoch: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub n_queries: usize,
    pub strategy: Selector,
    pub routing: Routing,
    pub window: usize,
    pub tau: f64,
    pub gan_mode: GanMode,
    pub seed: u64,
    pub size: usize,
    pub ngf: usize,
    pub ndf: usize,
    pub upsample: Upsample,
    pub qs_layers: QsLayers,
    pub update_order: UpdateOrder,
    pub weights: LossWeights,
    /// Dataset root with `trainA`/`trainB`; synthetic data when unset.
    pub data_root: Option<PathBuf>,
    /// Images per domain of the synthetic dataset.
    pub synth_images: usize,
    /// Epochs between checkpoints; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    /// Desk-scale profile: 64×64 images, 20 epochs.
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 1,
            lr: 2e-4,
            decay_start_epoch: 10,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            n_queries: 256,
            strategy: Selector::Global,
            routing: Routing::CrossDomain,
            window: DEFAULT_WINDOW,
            tau: DEFAULT_TAU,
            gan_mode: GanMode::LeastSquares,
            seed: 0,
            size: 64,
            ngf: 64,
            ndf: 64,
            upsample: Upsample::TransposedConv,
            qs_layers: QsLayers::LastTwo,
            update_order: UpdateOrder::DThenG,
            weights: LossWeights::default(),
            data_root: None,
            synth_images: 64,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale profile: 256×256 images, 400 epochs with decay over the last 200.
    pub fn full_scale() -> Self {
        TrainConfig {
            epochs: 400,
            decay_start_epoch: 200,
            size: 256,
            ..Self::default()
        }
    }

    /// Small-width profile used for quick runs and tests.
    pub fn toy() -> Self {
        TrainConfig {
            ngf: 16,
            ndf: 16,
            n_queries: 64,
            ..Self::default()
        }
    }

    pub fn selection(&self) -> Result<SelectionStrategy> {
        let selector = match self.strategy {
            Selector::Local(_) => Selector::Local(self.window),
            Selector::LocalGlobal(_) => Selector::LocalGlobal(self.window),
            s => s,
        };
        SelectionStrategy::new(selector, self.routing)
    }

    pub fn patch_nce(&self) -> Result<PatchNce> {
        Ok(PatchNce {
            n_queries: self.n_queries,
            strategy: self.selection()?,
            tau: self.tau,
            qs_layers: self.qs_layers,
        })
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            ngf: self.ngf,
            upsample: self.upsample,
            ..GeneratorConfig::default()
        }
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        DiscriminatorConfig { ndf: self.ndf }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(QsError::Config(msg));
        if self.epochs == 0 || self.decay_start_epoch == 0 || self.decay_start_epoch > self.epochs {
            return fail(format!(
                "need 0 < decay_start_epoch ({}) <= epochs ({})",
                self.decay_start_epoch, self.epochs
            ));
        }
        if self.batch_size != 1 {
            return fail(format!("only batch_size = 1 is supported, got {}", self.batch_size));
        }
        if !(self.lr > 0.0) || !(self.tau > 0.0) {
            return fail(format!("lr ({}) and tau ({}) must be positive", self.lr, self.tau));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.size < 8 || !self.size.is_multiple_of(4) {
            return fail(format!("size {} must be a multiple of 4 and at least 8", self.size));
        }
        if Discriminator::output_side(self.size).is_none() {
            return fail(format!("size {} is below the discriminator's receptive field", self.size));
        }
        if self.ngf == 0 || self.ndf == 0 {
            return fail("ngf and ndf must be positive".into());
        }
        let deep = (self.size / 4).pow(2);
        if self.n_queries < 2 || self.n_queries > deep {
            return fail(format!(
                "n_queries {} must lie in 2..={deep} for {}×{} images",
                self.n_queries, self.size, self.size
            ));
        }
        if self.synth_images == 0 && self.data_root.is_none() {
            return fail("synth_images must be positive".into());
        }
        self.selection()?;
        Ok(())
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let bad = |what: &str| QsError::config(format!("{key}: invalid {what} `{value}`"));
        let int = || value.parse::<usize>().map_err(|_| bad("integer"));
        let float = || value.parse::<f64>().map_err(|_| bad("number"));
        match key {
            "epochs" => self.epochs = int()?,
            "batch_size" => self.batch_size = int()?,
            "lr" => self.lr = float()?,
            "decay_start_epoch" => self.decay_start_epoch = int()?,
            "adam_beta1" => self.adam_beta1 = float()?,
            "adam_beta2" => self.adam_beta2 = float()?,
            "n_queries" => self.n_queries = int()?,
            "strategy" => self.strategy = parse_selector(value, self.window)?,
            "routing" => self.routing = value.parse()?,
            "window" => self.window = int()?,
            "tau" => self.tau = float()?,
            "gan_mode" => self.gan_mode = value.parse()?,
            "seed" => self.seed = value.parse().map_err(|_| bad("integer"))?,
            "size" => self.size = int()?,
            "ngf" => self.ngf = int()?,
            "ndf" => self.ndf = int()?,
            "upsample" => {
                self.upsample = match value {
                    "transposed" => Upsample::TransposedConv,
                    "nearest" => Upsample::NearestConv,
                    _ => return Err(bad("upsampling (transposed|nearest)")),
                }
            }
            "qs_layers" => {
                self.qs_layers = match value {
                    "last-two" => QsLayers::LastTwo,
                    "none" => QsLayers::None,
                    _ => return Err(bad("layer set (last-two|none)")),
                }
            }
            "update_order" => {
                self.update_order = match value {
                    "d-then-g" => UpdateOrder::DThenG,
                    "g-then-d" => UpdateOrder::GThenD,
                    _ => return Err(bad("order (d-then-g|g-then-d)")),
                }
            }
            "lambda_adv" => self.weights.adv = float()?,
            "lambda_con_x" => self.weights.con_x = float()?,
            "lambda_con_y" => self.weights.con_y = float()?,
            "data_root" => self.data_root = (!value.is_empty()).then(|| PathBuf::from(value)),
            "synth_images" => self.synth_images = int()?,
            "checkpoint_every" => self.checkpoint_every = int()?,
            _ => return Err(QsError::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every `key=value` line; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| QsError::config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Every setting as `(key, value)`, in a stable order that [`TrainConfig::set`] accepts.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let upsample = match self.upsample {
            Upsample::TransposedConv => "transposed",
            Upsample::NearestConv => "nearest",
        };
        let qs_layers = match self.qs_layers {
            QsLayers::LastTwo => "last-two",
            QsLayers::None => "none",
        };
        let order = match self.update_order {
            UpdateOrder::DThenG => "d-then-g",
            UpdateOrder::GThenD => "g-then-d",
        };
        vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("decay_start_epoch", self.decay_start_epoch.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("n_queries", self.n_queries.to_string()),
            ("window", self.window.to_string()),
            ("strategy", self.strategy.to_string()),
            ("routing", self.routing.to_string()),
            ("tau", self.tau.to_string()),
            ("gan_mode", self.gan_mode.to_string()),
            ("seed", self.seed.to_string()),
            ("size", self.size.to_string()),
            ("ngf", self.ngf.to_string()),
            ("ndf", self.ndf.to_string()),
            ("upsample", upsample.into()),
            ("qs_layers", qs_layers.into()),
            ("update_order", order.into()),
            ("lambda_adv", self.weights.adv.to_string()),
            ("lambda_con_x", self.weights.con_x.to_string()),
            ("lambda_con_y", self.weights.con_y.to_string()),
            (
                "data_root",
                self.data_root.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("synth_images", self.synth_images.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ]
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

impl fmt::Display for GanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GanMode::LeastSquares => "lsgan",
            GanMode::NonSaturatingLog => "log",
        })
    }
}

impl FromStr for GanMode {
    type Err = QsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lsgan" => Ok(GanMode::LeastSquares),
            "log" => Ok(GanMode::NonSaturatingLog),
            other => Err(QsError::config(format!("unknown gan mode `{other}` (expected lsgan|log)"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::toy();
        cfg.strategy = Selector::LocalGlobal(5);
        cfg.window = 5;
        cfg.gan_mode = GanMode::NonSaturatingLog;
        cfg.data_root = Some(PathBuf::from("/tmp/data"));
        let mut back = TrainConfig::default();
        back.apply_text(&cfg.to_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::default().apply_text("epochs=3\nfrobnicate=1\n").unwrap_err();
        assert!(err.to_string().contains("frobnicate"));
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.set("strategy", "quantum").is_err());
        assert!(cfg.set("epochs", "-1").is_err());
        assert!(cfg.set("gan_mode", "wgan").is_err());
        assert!(cfg.apply_text("no equals sign").is_err());
    }

    #[test]
    fn validation_checks_schedule_and_queries() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::full_scale().validate().is_ok());
        let mut cfg = TrainConfig::default();
        cfg.decay_start_epoch = 21;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.n_queries = 257;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.strategy = Selector::Random;
        cfg.routing = Routing::NoRouting;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn window_applies_to_local_strategies() {
        let mut cfg = TrainConfig::default();
        cfg.apply_text("strategy=local\nwindow=5").unwrap();
        assert_eq!(cfg.selection().unwrap().selector, Selector::Local(5));
    }
}

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::loss::FocalConfig;
use crate::model::{ModelConfig, ModelKind};
use crate::nn::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Fl,
    Sbfl,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Fl => "fl",
            LossKind::Sbfl => "sbfl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fl" => Ok(LossKind::Fl),
            "sbfl" => Ok(LossKind::Sbfl),
            other => Err(Error::Config(format!(
                "unknown loss {other:?} (expected fl or sbfl)"
            ))),
        }
    }
}

/// Everything a training, evaluation or cross-validation run needs.
///
/// `image_size` is the preprocessed slice size; the network sees half-size
/// patches, so `model.input_size == image_size / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model_kind: ModelKind,
    pub model: ModelConfig,
    pub image_size: usize,
    pub loss: LossKind,
    pub focal: FocalConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub augment: bool,
    /// Probability that a batch slot is drawn from patches holding foreground.
    pub fg_bias: f64,
    pub folds: usize,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            model_kind: ModelKind::TsCnn,
            image_size: model.input_size * 2,
            model,
            loss: LossKind::Sbfl,
            focal: FocalConfig::default(),
            adam: AdamConfig::default(),
            batch_size: 8,
            epochs: 50,
            steps_per_epoch: 50,
            augment: false,
            fg_bias: 0.5,
            folds: 5,
            seed: 0,
            data: None,
            out: None,
        }
    }
}

impl RunConfig {
    /// Reads a config file; relative `data`/`out` paths resolve against the
    /// file's directory.
    pub fn read(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_keys(KeyValues::read(path)?, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        Self::from_keys(KeyValues::parse(text)?, base)
    }

    pub fn from_keys(mut kv: KeyValues, base: &Path) -> Result<Self> {
        let d = Self::default();
        let image_size = kv.take_or("image_size", d.image_size)?;
        let model_kind = match kv.take::<String>("model")? {
            Some(s) => ModelKind::parse(&s)?,
            None => d.model_kind,
        };
        let loss = match kv.take::<String>("loss")? {
            Some(s) => LossKind::parse(&s)?,
            None => d.loss,
        };
        let path = |p: Option<String>| p.map(|p| base.join(p));
        let cfg = Self {
            model_kind,
            model: ModelConfig {
                base_channels: kv.take_or("base_channels", d.model.base_channels)?,
                num_scales: kv.take_or("num_scales", d.model.num_scales)?,
                input_size: image_size / 2,
                seg_threshold: kv.take_or("seg_threshold", d.model.seg_threshold)?,
            },
            image_size,
            loss,
            focal: FocalConfig {
                alpha: kv.take_or("alpha", d.focal.alpha)?,
                gamma: kv.take_or("gamma", d.focal.gamma)?,
                epsilon: kv.take_or("epsilon", d.focal.epsilon)?,
                literal_eq2: kv.take_flag("sbfl_literal_eq2", d.focal.literal_eq2)?,
            },
            adam: AdamConfig {
                lr: kv.take_or("lr", d.adam.lr)?,
                ..d.adam
            },
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            epochs: kv.take_or("epochs", d.epochs)?,
            steps_per_epoch: kv.take_or("steps_per_epoch", d.steps_per_epoch)?,
            augment: kv.take_flag("augment", d.augment)?,
            fg_bias: kv.take_or("fg_bias", d.fg_bias)?,
            folds: kv.take_or("folds", d.folds)?,
            seed: kv.take_or("seed", d.seed)?,
            data: path(kv.take("data")?),
            out: path(kv.take("out")?),
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "image_size must be even (slices are split into half-size patches), got {}",
                self.image_size
            )));
        }
        if self.model.input_size * 2 != self.image_size {
            return Err(Error::Config(format!(
                "model input {} must be half of image_size {}",
                self.model.input_size, self.image_size
            )));
        }
        self.model.validate()?;
        self.focal.validate()?;
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("steps_per_epoch", self.steps_per_epoch),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!(
                "folds must be at least 2, got {}",
                self.folds
            )));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.adam.lr
            )));
        }
        if !(0.0..=1.0).contains(&self.fg_bias) {
            return Err(Error::Config(format!(
                "fg_bias must lie in [0, 1], got {}",
                self.fg_bias
            )));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Config("missing required key \"data\"".into()))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("missing required key \"out\"".into()))
    }

    /// Run label used in summaries, e.g. `tscnn-sbfl`.
    pub fn label(&self) -> String {
        format!("{}-{}", self.model_kind.name(), self.loss.name())
    }

    /// Config text without the `data`/`out` paths, re-readable by `parse`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("model", self.model_kind.name().into());
        kv("base_channels", self.model.base_channels.to_string());
        kv("num_scales", self.model.num_scales.to_string());
        kv("image_size", self.image_size.to_string());
        kv("seg_threshold", self.model.seg_threshold.to_string());
        kv("loss", self.loss.name().into());
        kv("alpha", self.focal.alpha.to_string());
        kv("gamma", self.focal.gamma.to_string());
        kv("epsilon", self.focal.epsilon.to_string());
        kv(
            "sbfl_literal_eq2",
            if self.focal.literal_eq2 { "on" } else { "off" }.into(),
        );
        kv("lr", self.adam.lr.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("steps_per_epoch", self.steps_per_epoch.to_string());
        kv("augment", if self.augment { "on" } else { "off" }.into());
        kv("fg_bias", self.fg_bias.to_string());
        kv("folds", self.folds.to_string());
        kv("seed", self.seed.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_setup() {
        let c = RunConfig::default();
        assert_eq!(
            (c.adam.lr, c.batch_size, c.epochs, c.steps_per_epoch),
            (2e-4, 8, 50, 50)
        );
        assert_eq!((c.image_size, c.model.input_size, c.folds), (256, 128, 5));
        assert_eq!(c.focal.alpha, 0.9);
        c.validate().unwrap();
    }

    #[test]
    fn parse_and_round_trip() {
        let text = "model = residual_unet\nloss = fl\nimage_size = 64\nbase_channels = 8\naugment = on\ndata = phantoms\n";
        let c = RunConfig::parse(text, Path::new("/runs")).unwrap();
        assert_eq!(c.model_kind, ModelKind::ResidualUnet);
        assert_eq!(c.loss, LossKind::Fl);
        assert_eq!(c.model.input_size, 32);
        assert!(c.augment);
        assert_eq!(c.data.as_deref(), Some(Path::new("/runs/phantoms")));
        assert_eq!(c.label(), "residual_unet-fl");
        let again = RunConfig::parse(&c.to_text(), Path::new("/")).unwrap();
        assert_eq!(
            RunConfig {
                data: c.data.clone(),
                ..again
            },
            c
        );
    }

    #[test]
    fn invalid_configs() {
        let base = Path::new(".");
        assert!(RunConfig::parse("image_size = 63", base).is_err());
        assert!(RunConfig::parse("image_size = 36", base).is_err());
        assert!(RunConfig::parse("loss = dice", base).is_err());
        assert!(RunConfig::parse("epochs = 0", base).is_err());
        assert!(RunConfig::parse("learning_rate = 1", base).is_err());
        assert!(RunConfig::parse("alpha = 1.5", base).is_err());
        assert!(RunConfig::default().data_dir().is_err());
    }
}

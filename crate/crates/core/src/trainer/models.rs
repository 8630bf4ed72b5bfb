use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversarial::ConditioningMap;
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::ZScoreStats;
use crate::error::{Error, Result};
use crate::models::{BoundModel, FinalActivation, MlpSpec, Model};
use crate::rng::derive_seed;

use super::config::TrainConfig;

/// Feature extractor, classifier head, discriminator and the conditioning
/// map that joins them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Models {
    pub feature: Model,
    pub classifier: Model,
    pub discriminator: Model,
    pub conditioning: ConditioningMap,
}

impl Models {
    /// Each network draws from its own stream derived from `cfg.seed`.
    pub fn init(cfg: &TrainConfig, input_dim: usize, class_count: usize) -> Result<Self> {
        let arch = &cfg.architecture;
        let mut fw = vec![input_dim];
        fw.extend(&arch.feature_widths);
        let feature_dim = *fw.last().expect("non-empty");
        let conditioning =
            cfg.conditioning
                .build(feature_dim, class_count, derive_seed(cfg.seed, &[4]))?;
        let mut dw = vec![conditioning.output_dim()];
        dw.extend(&arch.discriminator_hidden);
        dw.push(1);
        Ok(Self {
            feature: Model::init(
                MlpSpec::new(fw, FinalActivation::None)?,
                derive_seed(cfg.seed, &[1]),
            )?,
            classifier: Model::init(
                MlpSpec::new(vec![feature_dim, class_count], FinalActivation::None)?,
                derive_seed(cfg.seed, &[2]),
            )?,
            discriminator: Model::init(
                MlpSpec::new(dw, FinalActivation::Sigmoid)?,
                derive_seed(cfg.seed, &[3]),
            )?,
            conditioning,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.feature.spec.input_dim()
    }

    pub fn class_count(&self) -> usize {
        self.classifier.spec.output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.feature.validate()?;
        self.classifier.validate()?;
        self.discriminator.validate()?;
        let fd = self.feature.spec.output_dim();
        if self.classifier.spec.input_dim() != fd
            || self.conditioning.feature_dim() != fd
            || self.conditioning.class_count() != self.class_count()
            || self.discriminator.spec.input_dim() != self.conditioning.output_dim()
            || self.discriminator.spec.output_dim() != 1
        {
            return Err(Error::Checkpoint("network widths do not chain".into()));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModels<'_>> {
        Ok(BoundModels {
            feature: self.feature.bind(tape)?,
            classifier: self.classifier.bind(tape)?,
            discriminator: self.discriminator.bind(tape)?,
            conditioning: &self.conditioning,
        })
    }

    /// Mutable parameters in optimizer order: F, then N, then D.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.feature
            .params
            .iter_mut()
            .chain(self.classifier.params.iter_mut())
            .chain(self.discriminator.params.iter_mut())
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (net, m) in [
            ("feature", &self.feature),
            ("classifier", &self.classifier),
            ("discriminator", &self.discriminator),
        ] {
            for l in 0..m.spec.layers() {
                names.push(format!("{net}.w{l}"));
                names.push(format!("{net}.b{l}"));
            }
        }
        names
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.feature.predict(x)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.classifier.predict(&self.feature.predict(x)?)
    }
}

pub struct BoundModels<'a> {
    pub feature: BoundModel<'a>,
    pub classifier: BoundModel<'a>,
    pub discriminator: BoundModel<'a>,
    pub conditioning: &'a ConditioningMap,
}

impl BoundModels<'_> {
    /// Parameter vars in the order of [`Models::params_mut`].
    pub fn vars(&self) -> Vec<Var> {
        [&self.feature, &self.classifier, &self.discriminator]
            .iter()
            .flat_map(|b| b.vars().to_vec())
            .collect()
    }
}

pub const CHECKPOINT_FORMAT: &str = "udakit-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON file holding the trained networks, the config that produced them and
/// the input normalization applied before the feature extractor. Floats are
/// written in shortest round-trip form, so loading restores every bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub normalization: Option<ZScoreStats>,
    pub models: Models,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, normalization: Option<ZScoreStats>, models: Models) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config,
            normalization,
            models,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
        }
        let header: Header =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "not a checkpoint (format `{}`)",
                header.format
            )));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let ck: Self = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ck.models.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

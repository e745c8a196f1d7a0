//! Run configuration, read from TOML. Every section and field is optional;
//! missing values take their defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{SchemeName, ThresholdScheme};
use crate::error::{Error, Result};
use crate::evaluation::DEFAULT_MARGIN_EDGES;
use crate::ingestion::{AggregationConfig, QpvtParams};
use crate::models::{ModelConfig, ModelKind, RnnCell};
use crate::synthetic::SynthConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub aggregation: AggregationConfig,
    pub qpvt: QpvtParams,
    pub prepare: PrepareConfig,
    pub train: TrainConfig,
    pub models: ModelsConfig,
    pub evaluation: EvaluationConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    /// Replaces the shipped cut points of balanced_ranges or max_margins.
    pub thresholds: Option<Vec<f64>>,
}

/// Per-kind overrides of the default model sizes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    pub rnn: ModelOverrides,
    pub mtan: ModelOverrides,
    pub cyctime: ModelOverrides,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub hidden_dim: Option<usize>,
    pub num_heads: Option<usize>,
    pub num_layers: Option<usize>,
    pub ref_points: Option<usize>,
    pub time_embed_dim: Option<usize>,
    pub dropout: Option<f64>,
    pub rnn_cell: Option<RnnCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Lower bounds of the likelihood-margin buckets.
    pub margin_edges: Vec<f64>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            margin_edges: DEFAULT_MARGIN_EDGES.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.qpvt.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.aggregation.max_masked_fraction) {
            return Err(Error::Config("max_masked_fraction must lie in [0, 1]".into()));
        }
        for kind in ModelKind::ALL {
            self.model(kind)?;
        }
        if let Some(t) = &self.prepare.thresholds {
            ThresholdScheme::from_slice(self.train.scheme, t)?;
        }
        let edges = &self.evaluation.margin_edges;
        if edges.is_empty() || edges.windows(2).any(|w| w[1] <= w[0]) || edges.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(Error::Config("margin_edges must be increasing values in [0, 1]".into()));
        }
        Ok(())
    }

    /// Default sizes for `kind` with this config's overrides applied.
    pub fn model(&self, kind: ModelKind) -> Result<ModelConfig> {
        let o = match kind {
            ModelKind::Rnn => &self.models.rnn,
            ModelKind::Mtan => &self.models.mtan,
            ModelKind::Cyctime => &self.models.cyctime,
        };
        let mut m = ModelConfig::default_for(kind);
        m.hidden_dim = o.hidden_dim.unwrap_or(m.hidden_dim);
        m.num_heads = o.num_heads.unwrap_or(m.num_heads);
        m.num_layers = o.num_layers.unwrap_or(m.num_layers);
        m.ref_points = o.ref_points.unwrap_or(m.ref_points);
        m.time_embed_dim = o.time_embed_dim.unwrap_or(m.time_embed_dim);
        m.dropout = o.dropout.unwrap_or(m.dropout);
        m.rnn_cell = o.rnn_cell.unwrap_or(m.rnn_cell);
        m.validate()?;
        Ok(m)
    }

    /// The fixed scheme for `name`, honoring a threshold override. Balanced
    /// classes is fit on training data instead and has no fixed form.
    pub fn fixed_scheme(&self, name: SchemeName) -> Result<ThresholdScheme> {
        match &self.prepare.thresholds {
            Some(t) => ThresholdScheme::from_slice(name, t),
            None => Ok(ThresholdScheme::default_for(name)),
        }
    }
}

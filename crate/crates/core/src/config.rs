//! Run configuration: one JSON document with every field defaulted and
//! unknown keys rejected, serialized canonically and hashed to name runs.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::data::{DataSource, GridWorldConfig};
use crate::error::{Error, Result};
use crate::sampler::SamplerConfig;
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::training::TrainConfig;
use crate::vocab::{JointVocabulary, SequenceLayout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    pub k_text: u32,
    pub k_img: u32,
    pub len_report: usize,
    pub len_image: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            k_text: 3,
            k_img: 3,
            len_report: 4,
            len_image: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Joint samples drawn for the distribution metric.
    pub n_samples: usize,
    /// Held-out pairs for the conditional, recovery, text and NELBO metrics.
    pub n_eval_set: usize,
    /// Passes over the held-out set, each with fresh `t` draws.
    pub nelbo_t_samples: usize,
    pub recovery_t: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 20_000,
            n_eval_set: 1000,
            nelbo_t_samples: 4,
            recovery_t: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub vocab: VocabConfig,
    pub schedule: ScheduleConfig,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: GridWorldConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn canonical(&self) -> String {
        canonical_json(&self.to_value())
    }

    /// SHA-256 of the canonical bytes, lowercase hex.
    pub fn hash(&self) -> String {
        config_hash(&self.canonical())
    }

    pub fn joint_vocab(&self) -> Result<JointVocabulary> {
        JointVocabulary::new(self.vocab.k_text, self.vocab.k_img)
    }

    pub fn layout(&self) -> Result<SequenceLayout> {
        SequenceLayout::new(self.vocab.len_report, self.vocab.len_image)
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(&self.schedule)
    }

    pub fn data_source(&self) -> Result<DataSource> {
        DataSource::new(&self.data, self.joint_vocab()?, self.layout()?)
    }

    /// Checks every section and their cross-constraints. Does not fit the
    /// codebook.
    pub fn validate(&self) -> Result<()> {
        let vocab = self.joint_vocab()?;
        let layout = self.layout()?;
        self.noise_schedule()?;
        self.backbone.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        self.data.validate()?;
        if self.backbone.vocab_out != vocab.vocab_out() {
            return Err(Error::Config(format!(
                "backbone.vocab_out is {} but the vocabulary needs {}",
                self.backbone.vocab_out,
                vocab.vocab_out()
            )));
        }
        if self.backbone.max_len < layout.len_total() {
            return Err(Error::Config(format!(
                "backbone.max_len {} is shorter than the sequence ({})",
                self.backbone.max_len,
                layout.len_total()
            )));
        }
        let k_img = if self.data.pixel_mode {
            self.data.codebook_size
        } else {
            self.data.n_colors
        };
        let n = self.data.n_cells();
        if vocab.k_text() as usize != self.data.n_colors
            || vocab.k_img() as usize != k_img
            || layout.len_report() != n
            || layout.len_image() != n
        {
            return Err(Error::Config(format!(
                "vocab section ({}, {}, {}, {}) does not match the data world \
                 (expected {}, {k_img}, {n}, {n})",
                vocab.k_text(),
                vocab.k_img(),
                layout.len_report(),
                layout.len_image(),
                self.data.n_colors
            )));
        }
        if self.eval.n_samples == 0 || self.eval.n_eval_set == 0 || self.eval.nelbo_t_samples == 0 {
            return Err(Error::Config("eval sample counts must be positive".into()));
        }
        if !(self.schedule.t_min..=1.0).contains(&self.eval.recovery_t) {
            return Err(Error::OutOfRange {
                name: "eval.recovery_t",
                value: self.eval.recovery_t,
                lo: self.schedule.t_min,
                hi: 1.0,
            });
        }
        Ok(())
    }
}

/// Compact JSON with object keys sorted and floats in shortest round-trip
/// form.
pub fn canonical_json(value: &Value) -> String {
    // serde_json's map is ordered by key unless `preserve_order` is on,
    // which this crate never enables.
    serde_json::to_string(value).expect("JSON values serialize")
}

pub fn config_hash(canonical: &str) -> String {
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.canonical();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.canonical(), text);
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn keys_are_sorted_regardless_of_input_order() {
        let a = RunConfig::from_json(r#"{"train": {"seed": 4, "batch_size": 8}}"#).unwrap();
        let b = RunConfig::from_json(r#"{"train": {"batch_size": 8, "seed": 4}}"#).unwrap();
        assert_eq!(a.canonical(), b.canonical());
        assert_eq!(a.hash(), b.hash());
        let text = a.canonical();
        assert!(text.find("\"backbone\"").unwrap() < text.find("\"vocab\"").unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"lr": 1.0}}"#).is_err());
    }

    #[test]
    fn cross_section_mismatch_is_rejected() {
        let bad = r#"{"vocab": {"k_text": 4}}"#;
        assert!(matches!(RunConfig::from_json(bad), Err(Error::Config(_))));
        let bad = r#"{"backbone": {"max_len": 6}}"#;
        assert!(RunConfig::from_json(bad).is_err());
    }

    #[test]
    fn hash_changes_with_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}

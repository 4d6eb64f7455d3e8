//! Run configuration and corpus preparation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::episodic::PhaseConfig;
use crate::error::{Error, Result};
use crate::eval::EvalSettings;
use crate::model::ModelConfig;
use crate::synth::{
    default_class_counts, default_class_specs, expand_augmented, generate_corpus, read_corpus, split_corpus, Corpus,
    CorpusSplit, DefectClassSpec, SplitPolicy,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    /// `[height, width]`.
    pub image_size: [usize; 2],
    pub classes: Vec<DefectClassSpec>,
    /// Original images per class, before augmentation.
    pub counts: Vec<usize>,
    pub augment: bool,
    pub eval_fraction: f64,
    pub split_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let classes = default_class_specs();
        let counts = default_class_counts(&classes);
        Self {
            seed: 7,
            image_size: [128, 128],
            classes,
            counts,
            augment: true,
            eval_fraction: 0.25,
            split_seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointConfig {
    /// Query images per episode, drawn from the pooled training set.
    pub query_images: usize,
    pub seed: u64,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            query_images: 12,
            seed: 303,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    /// Weight initialisation seed.
    pub model_seed: u64,
    pub base: PhaseConfig,
    pub finetune: PhaseConfig,
    pub joint: JointConfig,
    pub eval: EvalSettings,
    pub checkpoint_every: u64,
    /// Eval images per class exported by `export-embeddings`.
    pub embeddings_per_class: usize,
    pub embeddings_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            model_seed: 1,
            base: PhaseConfig::base(),
            finetune: PhaseConfig::finetune(),
            joint: JointConfig::default(),
            eval: EvalSettings::default(),
            checkpoint_every: 50,
            embeddings_per_class: 20,
            embeddings_seed: 11,
        }
    }
}

impl RunConfig {
    /// Parse a config file; keys it omits, at any depth, keep their
    /// defaults. Unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !user.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let mut merged = serde_json::to_value(RunConfig::default())?;
        merge(&mut merged, user);
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.base.validate()?;
        self.finetune.validate()?;
        if self.joint.query_images == 0 {
            return Err(Error::Config("joint.query_images must be at least 1".into()));
        }
        if !(self.corpus.eval_fraction > 0.0 && self.corpus.eval_fraction < 1.0) {
            return Err(Error::Config(format!("eval_fraction {} outside (0, 1)", self.corpus.eval_fraction)));
        }
        let [h, w] = self.corpus.image_size;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!("image size {h}x{w} must be divisible by 8")));
        }
        if self.corpus.counts.len() != self.corpus.classes.len() {
            return Err(Error::Config("corpus.counts needs one entry per class".into()));
        }
        Ok(())
    }

    /// Phase settings of the joint baseline: the base schedule stretched over
    /// both phases' episode budget.
    pub fn joint_phase(&self) -> PhaseConfig {
        PhaseConfig {
            episodes: self.base.episodes + self.finetune.episodes,
            seed: self.joint.seed,
            ..self.base.clone()
        }
    }

    /// Train images each class needs for episodic sampling.
    pub fn min_train_per_class(&self) -> usize {
        (self.base.s + self.base.q).max(self.finetune.s + self.finetune.q)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Generate, augment and split the corpus; the split is recorded in the
/// manifest.
pub fn prepare_corpus(cfg: &RunConfig) -> Result<(Corpus, CorpusSplit)> {
    let c = &cfg.corpus;
    let originals = generate_corpus(&c.classes, &c.counts, (c.image_size[0], c.image_size[1]), c.seed)?;
    let mut corpus = if c.augment { expand_augmented(&originals) } else { originals };
    let policy = SplitPolicy::from_corpus(&corpus, c.eval_fraction, c.split_seed, cfg.min_train_per_class());
    let split = split_corpus(&corpus, &policy)?;
    corpus.manifest.split = Some(split.record(&corpus, &policy));
    Ok((corpus, split))
}

/// Read a corpus directory and its recorded split.
pub fn load_corpus(dir: &Path) -> Result<(Corpus, CorpusSplit)> {
    let corpus = read_corpus(dir)?;
    corpus.validate()?;
    let record = corpus
        .manifest
        .split
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("{}: manifest has no split", dir.display())))?;
    let split = CorpusSplit::from_record(&corpus, record)?;
    Ok((corpus, split))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_match_protocol() {
        let cfg = RunConfig::default();
        assert_eq!((cfg.base.s, cfg.base.q, cfg.base.lr, cfg.base.momentum), (5, 2, 1e-4, 0.9));
        assert_eq!(cfg.model.m(), 32);
        assert_eq!(cfg.eval.iou_threshold, 0.5);
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = RunConfig::from_json(r#"{"finetune": {"episodes": 3}, "corpus": {"image_size": [64, 64]}}"#).unwrap();
        assert_eq!(cfg.finetune.episodes, 3);
        assert_eq!(cfg.finetune.seed, PhaseConfig::finetune().seed);
        assert_eq!(cfg.corpus.image_size, [64, 64]);
        assert_eq!(cfg.corpus.counts, CorpusConfig::default().counts);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"bogus": 1}"#), Err(Error::Config(_))));
        assert!(RunConfig::from_json(r#"{"corpus": {"sed": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"nms": {"score": 0.5}}}"#).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut cfg = RunConfig::default();
        cfg.base.lr = 0.0;
        assert!(RunConfig::from_json(&cfg.to_json().unwrap()).is_err());
        let mut cfg = RunConfig::default();
        cfg.corpus.image_size = [100, 128];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn small_corpus_is_split_and_recorded() {
        let mut cfg = RunConfig::default();
        cfg.corpus.counts = vec![6, 6, 6, 6, 3, 3];
        cfg.corpus.image_size = [64, 64];
        let (corpus, split) = prepare_corpus(&cfg).unwrap();
        assert_eq!(corpus.images.len(), 30 * 4);
        let record = corpus.manifest.split.as_ref().unwrap();
        assert_eq!(CorpusSplit::from_record(&corpus, record).unwrap(), split);
    }
}

//! Two-phase episodic training: base training on common classes, then
//! balanced few-shot fine-tuning with the feature extractor frozen.

pub mod checkpoint;
pub mod deploy;
pub mod episode;
pub mod task;

use std::path::Path;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step, OptimState, Tape};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::synth::{Corpus, CorpusSplit, Rarity};

pub use checkpoint::{load_checkpoint, load_deployed, save_checkpoint, save_deployed};
pub use deploy::{canonical_support, DeployedModel, Detection, StoredPrototype};
pub use episode::{episode_loss, EpisodeOutput};
pub use task::{sample_pooled_task, sample_task, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Base,
    Finetune,
    Joint,
}

impl Phase {
    pub fn code(self) -> u8 {
        match self {
            Phase::Base => 0,
            Phase::Finetune => 1,
            Phase::Joint => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Phase::Base),
            1 => Ok(Phase::Finetune),
            2 => Ok(Phase::Joint),
            c => Err(Error::Checkpoint(format!("unknown phase marker {c}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub episodes: u64,
    /// Support images per class.
    pub s: usize,
    /// Query images per class.
    pub q: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl PhaseConfig {
    pub fn base() -> Self {
        Self {
            episodes: 200,
            s: 5,
            q: 2,
            lr: 1e-4,
            momentum: 0.9,
            seed: 101,
        }
    }

    pub fn finetune() -> Self {
        Self {
            episodes: 100,
            seed: 202,
            ..Self::base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.s == 0 || self.q == 0 {
            return Err(Error::Config(format!("s and q must be at least 1, got s={} q={}", self.s, self.q)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0,1), got {}", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: u64,
    pub loss: f64,
    pub l_loc: f64,
    pub l_cla: f64,
}

/// Model weights plus everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub optim: OptimState<f32>,
    pub rng: Xoshiro256PlusPlus,
    pub phase: Phase,
    /// Episodes completed in the current phase.
    pub episode: u64,
}

impl Trainer {
    /// Fresh optimizer and RNG for `phase`. Fine-tuning freezes the
    /// extractor; the other phases train everything.
    pub fn new(mut model: Model<f32>, phase: Phase, cfg: &PhaseConfig) -> Result<Self> {
        cfg.validate()?;
        model.set_extractor_frozen(phase == Phase::Finetune);
        let optim = OptimState::new(&model.store, cfg.lr, cfg.momentum)?;
        Ok(Self {
            model,
            optim,
            rng: Xoshiro256PlusPlus::seed_from_u64(cfg.seed),
            phase,
            episode: 0,
        })
    }

    /// Forward, backward and one SGD step on `task`.
    pub fn run_episode(&mut self, corpus: &Corpus, task: &Task) -> Result<EpisodeLog> {
        let episode = self.episode;
        let wrap = |e: Error| Error::Episode {
            episode,
            source: Box::new(e),
        };
        let mut tape = Tape::new();
        let out = episode_loss(&mut tape, &self.model, corpus, task, &mut self.rng).map_err(wrap)?;
        let loss = tape.value(out.loss).item().map_err(wrap)?;
        if !loss.is_finite() {
            return Err(wrap(Error::NonFinite("episode loss")));
        }
        let grads = tape.backward(out.loss).map_err(wrap)?;
        self.model.store.absorb_grads(&tape, &grads);
        sgd_step(&mut self.model.store, &mut self.optim).map_err(wrap)?;
        self.episode += 1;
        Ok(EpisodeLog {
            episode,
            loss: f64::from(loss),
            l_loc: out.l_loc,
            l_cla: out.l_cla,
        })
    }
}

/// Periodic checkpoint target.
#[derive(Clone, Copy, Debug)]
pub struct Checkpointing<'a> {
    pub path: &'a Path,
    pub every: u64,
}

fn train_loop(
    trainer: &mut Trainer,
    corpus: &Corpus,
    episodes: u64,
    ckpt: Option<Checkpointing<'_>>,
    log: &mut dyn FnMut(&EpisodeLog) -> Result<()>,
    mut sample: impl FnMut(&mut Xoshiro256PlusPlus) -> Result<Task>,
) -> Result<()> {
    while trainer.episode < episodes {
        let task = sample(&mut trainer.rng).map_err(|e| Error::Episode {
            episode: trainer.episode,
            source: Box::new(e),
        })?;
        let entry = trainer.run_episode(corpus, &task)?;
        log(&entry)?;
        if let Some(c) = ckpt {
            if c.every > 0 && (trainer.episode.is_multiple_of(c.every) || trainer.episode == episodes) {
                save_checkpoint(c.path, trainer)?;
            }
        }
    }
    Ok(())
}

fn all_classes(corpus: &Corpus) -> Vec<u32> {
    corpus.specs().iter().map(|s| s.class_id).collect()
}

/// Episodic training on the common classes of `split.base`, continuing from
/// `trainer.episode` until `cfg.episodes`.
pub fn base_train(
    trainer: &mut Trainer,
    corpus: &Corpus,
    split: &CorpusSplit,
    cfg: &PhaseConfig,
    ckpt: Option<Checkpointing<'_>>,
    log: &mut dyn FnMut(&EpisodeLog) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if trainer.phase != Phase::Base {
        return Err(Error::invalid(format!("base training needs a base-phase trainer, got {:?}", trainer.phase)));
    }
    for &i in &split.base {
        let img = &corpus.images[i];
        if corpus.spec(img.class_id).map(|s| s.rarity) != Some(Rarity::Common) {
            return Err(Error::invalid(format!(
                "base split contains {} of non-common class {}",
                img.id, img.class_id
            )));
        }
    }
    let classes = corpus.classes_with(Rarity::Common);
    train_loop(trainer, corpus, cfg.episodes, ckpt, log, |rng| {
        sample_task(corpus, &split.base, &classes, cfg.s, cfg.q, rng)
    })
}

/// Balanced few-shot fine-tuning over every class with the extractor
/// frozen, then deployment with the canonical support set.
pub fn finetune(
    trainer: &mut Trainer,
    corpus: &Corpus,
    split: &CorpusSplit,
    cfg: &PhaseConfig,
    ckpt: Option<Checkpointing<'_>>,
    log: &mut dyn FnMut(&EpisodeLog) -> Result<()>,
) -> Result<DeployedModel> {
    cfg.validate()?;
    if trainer.phase != Phase::Finetune {
        return Err(Error::invalid(format!("fine-tuning needs a finetune-phase trainer, got {:?}", trainer.phase)));
    }
    if !trainer.model.extractor_frozen() {
        return Err(Error::invalid("feature extractor must be frozen during fine-tuning"));
    }
    let classes = all_classes(corpus);
    train_loop(trainer, corpus, cfg.episodes, ckpt, log, |rng| {
        sample_task(corpus, &split.full, &classes, cfg.s, cfg.q, rng)
    })?;
    deploy(trainer, corpus, split, cfg.s)
}

/// Single-phase training on every class at once: `s` support images per
/// class and `n_query` query images drawn from the pooled, imbalanced
/// training set.
pub fn joint_train(
    trainer: &mut Trainer,
    corpus: &Corpus,
    split: &CorpusSplit,
    cfg: &PhaseConfig,
    n_query: usize,
    ckpt: Option<Checkpointing<'_>>,
    log: &mut dyn FnMut(&EpisodeLog) -> Result<()>,
) -> Result<DeployedModel> {
    cfg.validate()?;
    if trainer.phase != Phase::Joint {
        return Err(Error::invalid(format!("joint training needs a joint-phase trainer, got {:?}", trainer.phase)));
    }
    let classes = all_classes(corpus);
    train_loop(trainer, corpus, cfg.episodes, ckpt, log, |rng| {
        sample_pooled_task(corpus, &split.full, &classes, cfg.s, n_query, rng)
    })?;
    deploy(trainer, corpus, split, cfg.s)
}

/// Deployed copy of the trainer's model with a bank over every class.
pub fn deploy(trainer: &Trainer, corpus: &Corpus, split: &CorpusSplit, s: usize) -> Result<DeployedModel> {
    let mut t = trainer.clone();
    let support = canonical_support(corpus, &split.full, &all_classes(corpus), s, &mut t.rng)?;
    DeployedModel::build(t, corpus, &support)
}

//! End-to-end runs: two-phase transfer learning and the joint baseline.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use crate::config::RunConfig;
use crate::episodic::{
    base_train, finetune, joint_train, Checkpointing, DeployedModel, Detection, EpisodeLog, Phase, Trainer,
};
use crate::error::{Error, Result};
use crate::eval::{aggregate, EvalReport};
use crate::episodic::checkpoint::{decode_deployed, decode_trainer};
use crate::episodic::deploy;
use crate::model::Model;
use crate::synth::{manifest_hash, Corpus, CorpusSplit, Rarity};
use rand::seq::index;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type LogFn<'a> = &'a mut dyn FnMut(&EpisodeLog) -> Result<()>;

pub fn base_trainer(cfg: &RunConfig) -> Result<Trainer> {
    Trainer::new(Model::new(cfg.model.clone(), cfg.model_seed)?, Phase::Base, &cfg.base)
}

/// Fine-tuning trainer starting from base-trained weights.
pub fn finetune_trainer(base: &Trainer, cfg: &RunConfig) -> Result<Trainer> {
    if base.phase != Phase::Base {
        return Err(Error::invalid(format!("fine-tuning starts from a base checkpoint, got {:?}", base.phase)));
    }
    Trainer::new(base.model.clone(), Phase::Finetune, &cfg.finetune)
}

pub fn joint_trainer(cfg: &RunConfig) -> Result<Trainer> {
    Trainer::new(Model::new(cfg.model.clone(), cfg.model_seed)?, Phase::Joint, &cfg.joint_phase())
}

pub fn run_base(
    trainer: &mut Trainer,
    cfg: &RunConfig,
    corpus: &Corpus,
    split: &CorpusSplit,
    ckpt: Option<Checkpointing<'_>>,
    log: LogFn<'_>,
) -> Result<()> {
    base_train(trainer, corpus, split, &cfg.base, ckpt, log)
}

pub fn run_finetune(
    trainer: &mut Trainer,
    cfg: &RunConfig,
    corpus: &Corpus,
    split: &CorpusSplit,
    ckpt: Option<Checkpointing<'_>>,
    log: LogFn<'_>,
) -> Result<DeployedModel> {
    finetune(trainer, corpus, split, &cfg.finetune, ckpt, log)
}

pub fn run_joint(
    trainer: &mut Trainer,
    cfg: &RunConfig,
    corpus: &Corpus,
    split: &CorpusSplit,
    ckpt: Option<Checkpointing<'_>>,
    log: LogFn<'_>,
) -> Result<DeployedModel> {
    joint_train(trainer, corpus, split, &cfg.joint_phase(), cfg.joint.query_images, ckpt, log)
}

fn workers() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

/// Detections for every image in `images`, spread over the available cores.
pub fn detect_all(model: &DeployedModel, corpus: &Corpus, images: &[usize]) -> Result<Vec<Vec<Detection>>> {
    let chunk = images.len().div_ceil(workers()).max(1);
    thread::scope(|s| {
        let handles: Vec<_> = images
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|&i| model.detect(&corpus.images[i].image))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(images.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::invalid("detection worker panicked"))??);
        }
        Ok(out)
    })
}

/// Evaluate `model` on the eval split.
pub fn evaluate(model: &DeployedModel, cfg: &RunConfig, corpus: &Corpus, split: &CorpusSplit) -> Result<EvalReport> {
    if split.eval.is_empty() {
        return Err(Error::invalid("eval split is empty"));
    }
    let detections = detect_all(model, corpus, &split.eval)?;
    let rows = aggregate(corpus, &split.eval, &detections, &cfg.eval)?;
    let mean = |rarity| {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r.rarity == rarity && !r.no_data)
            .map(|r| r.ap_paper)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(EvalReport {
        corpus_fingerprint: manifest_hash(&corpus.manifest)?,
        model_fingerprint: model.fingerprint()?,
        config: serde_json::to_value(cfg)?,
        score_threshold: cfg.eval.score_threshold,
        iou_threshold: cfg.eval.iou_threshold,
        eval_images: split.eval.len(),
        common_mean_ap_paper: mean(Rarity::Common),
        rare_mean_ap_paper: mean(Rarity::Rare),
        rows,
        reference: crate::eval::reference_points(),
    })
}

pub struct Comparison {
    pub base: Trainer,
    pub base_log: Vec<EpisodeLog>,
    pub two_phase: DeployedModel,
    pub joint: DeployedModel,
    pub two_phase_report: EvalReport,
    pub joint_report: EvalReport,
    pub train_time: Duration,
    pub total_time: Duration,
}

impl Comparison {
    /// Rare-class mean ap_paper of the two-phase model minus the joint
    /// baseline's, in points.
    pub fn rare_gain_points(&self) -> Option<f64> {
        Some(100.0 * (self.two_phase_report.rare_mean_ap_paper? - self.joint_report.rare_mean_ap_paper?))
    }
}

/// Train the two-phase model and the joint baseline side by side, then
/// evaluate both.
pub fn compare(cfg: &RunConfig, corpus: &Corpus, split: &CorpusSplit) -> Result<Comparison> {
    let t0 = Instant::now();
    let (tl, joint) = thread::scope(|s| {
        let tl = s.spawn(|| -> Result<_> {
            let mut base = base_trainer(cfg)?;
            let mut base_log = Vec::new();
            run_base(&mut base, cfg, corpus, split, None, &mut |l| {
                base_log.push(*l);
                Ok(())
            })?;
            let mut ft = finetune_trainer(&base, cfg)?;
            let deployed = run_finetune(&mut ft, cfg, corpus, split, None, &mut |_| Ok(()))?;
            Ok((base, base_log, deployed))
        });
        let joint = s.spawn(|| -> Result<_> {
            let mut t = joint_trainer(cfg)?;
            run_joint(&mut t, cfg, corpus, split, None, &mut |_| Ok(()))
        });
        let panicked = |_| Error::invalid("training worker panicked");
        (tl.join().map_err(panicked), joint.join().map_err(panicked))
    });
    let (base, base_log, two_phase) = tl??;
    let joint = joint??;
    let train_time = t0.elapsed();
    let two_phase_report = evaluate(&two_phase, cfg, corpus, split)?;
    let joint_report = evaluate(&joint, cfg, corpus, split)?;
    Ok(Comparison {
        base,
        base_log,
        two_phase,
        joint,
        two_phase_report,
        joint_report,
        train_time,
        total_time: t0.elapsed(),
    })
}

pub const LOSS_HEADER: &str = "episode,loss,L_loc,L_cla";

pub fn loss_line(l: &EpisodeLog) -> String {
    format!("{},{},{},{}", l.episode, l.loss, l.l_loc, l.l_cla)
}

/// Episode loss CSV, appended one row per episode.
pub struct LossLog {
    file: fs::File,
    path: std::path::PathBuf,
}

impl LossLog {
    /// Open `path` for a run that has completed `done` episodes: a fresh
    /// file when `done` is zero, otherwise the existing log cut back to its
    /// first `done` rows.
    pub fn open(path: &Path, done: u64) -> Result<Self> {
        let mut text = format!("{LOSS_HEADER}\n");
        if done > 0 {
            let old = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut lines = old.lines();
            if lines.next() != Some(LOSS_HEADER) {
                return Err(Error::invalid(format!("{}: not a loss log", path.display())));
            }
            for k in 0..done {
                let line = lines.next().ok_or_else(|| {
                    Error::invalid(format!("{}: {done} episodes done but only {k} logged", path.display()))
                })?;
                if line.split(',').next() != Some(k.to_string().as_str()) {
                    return Err(Error::invalid(format!("{}: row {k} out of order", path.display())));
                }
                text.push_str(line);
                text.push('\n');
            }
        }
        fs::write(path, &text).map_err(|e| Error::io(path, e))?;
        let file = fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn push(&mut self, l: &EpisodeLog) -> Result<()> {
        writeln!(self.file, "{}", loss_line(l)).map_err(|e| Error::io(&self.path, e))
    }
}

/// A model file as either a trainer checkpoint, deployed here with the
/// canonical support set, or an already deployed model.
pub fn load_model(path: &Path, cfg: &RunConfig, corpus: &Corpus, split: &CorpusSplit) -> Result<DeployedModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match decode_trainer(&bytes, &cfg.model, cfg.base.lr, cfg.base.momentum) {
        Ok(trainer) => deploy(&trainer, corpus, split, cfg.finetune.s),
        Err(_) => decode_deployed(&bytes, &cfg.model),
    }
}

/// Up to `embeddings_per_class` eval images of every class, seeded.
pub fn embedding_sample(cfg: &RunConfig, corpus: &Corpus, split: &CorpusSplit) -> Vec<usize> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.embeddings_seed);
    let mut out = Vec::new();
    for spec in corpus.specs() {
        let pool = CorpusSplit::of_class(corpus, &split.eval, spec.class_id);
        let n = cfg.embeddings_per_class.min(pool.len());
        out.extend(index::sample(&mut rng, pool.len(), n).into_iter().map(|k| pool[k]));
    }
    out.sort_unstable();
    out
}

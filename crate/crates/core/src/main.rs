use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use defect_fewshot::config::{load_corpus, prepare_corpus, RunConfig};
use defect_fewshot::episodic::{load_checkpoint, save_deployed, Checkpointing, DeployedModel, Phase, Trainer};
use defect_fewshot::eval::embeddings::{export_embeddings, intra_inter_distances, write_embeddings_csv};
use defect_fewshot::eval::{write_report, EvalReport};
use defect_fewshot::pipeline::{self, LossLog};
use defect_fewshot::synth::{manifest_hash, write_corpus, Rarity};

#[derive(Parser)]
#[command(name = "defect-fewshot", version, about = "Few-shot surface defect detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the seed of the stage this command runs.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Joint,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its train/eval split.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Episodic base training on the common classes.
    TrainBase {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Few-shot fine-tuning over every class with the extractor frozen.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Base-phase checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Per-class precision, recall and AP on the eval split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Deployed model or trainer checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Also train and evaluate a baseline for comparison.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        #[arg(long)]
        resume: bool,
    },
    /// Region embeddings of eval boxes and prototypes with a 2-d projection.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn archive_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let path = dir.join("run_config.json");
    fs::write(&path, cfg.to_json()?).with_context(|| format!("cannot write {}", path.display()))
}

/// Timestamped progress lines; kept apart from the deterministic outputs.
struct RunLog(fs::File);

impl RunLog {
    fn open(dir: &Path) -> Result<Self> {
        let path = dir.join("run.log");
        let f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .with_context(|| format!("cannot open {}", path.display()))?;
        Ok(Self(f))
    }

    fn line(&mut self, msg: &str) -> Result<()> {
        let t = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        writeln!(self.0, "{}.{:03} {msg}", t.as_secs(), t.subsec_millis())?;
        Ok(())
    }
}

fn resume_trainer(path: &Path, resume: bool, cfg: &RunConfig, fresh: impl FnOnce() -> Result<Trainer>) -> Result<Trainer> {
    if resume && path.exists() {
        let t = load_checkpoint(path, &cfg.model, cfg.base.lr, cfg.base.momentum)?;
        Ok(t)
    } else {
        fresh()
    }
}

fn check_phase(t: &Trainer, phase: Phase, path: &Path) -> Result<()> {
    if t.phase != phase {
        bail!("{} holds a {:?} checkpoint, expected {:?}", path.display(), t.phase, phase);
    }
    Ok(())
}

fn gen_data(common: &Common, force: bool) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.corpus.seed = s;
    }
    cfg.validate()?;
    let out = &common.out;
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        if !force {
            bail!("{} is not empty; pass --force to overwrite", out.display());
        }
        fs::remove_dir_all(out).with_context(|| format!("cannot clear {}", out.display()))?;
    }
    let (corpus, split) = prepare_corpus(&cfg)?;
    write_corpus(out, &corpus)?;
    archive_config(out, &cfg)?;
    for spec in corpus.specs() {
        let n = corpus.images.iter().filter(|im| im.class_id == spec.class_id).count();
        let train = defect_fewshot::synth::CorpusSplit::of_class(&corpus, &split.full, spec.class_id).len();
        println!(
            "class {} {:<14} {:<6} images {:>5} train {:>5} eval {:>5}",
            spec.class_id,
            spec.name,
            spec.rarity.as_str(),
            n,
            train,
            n - train
        );
    }
    println!("manifest sha256 {}", manifest_hash(&corpus.manifest)?);
    Ok(())
}

fn train_base(common: &Common, corpus_dir: &Path, resume: bool) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.base.seed = s;
    }
    cfg.validate()?;
    let (corpus, split) = load_corpus(corpus_dir)?;
    let out = &common.out;
    prepare_out(out)?;
    archive_config(out, &cfg)?;
    let ckpt_path = out.join("base.ckpt");
    let mut trainer = resume_trainer(&ckpt_path, resume, &cfg, || Ok(pipeline::base_trainer(&cfg)?))?;
    check_phase(&trainer, Phase::Base, &ckpt_path)?;
    let mut losses = LossLog::open(&out.join("base_loss.csv"), trainer.episode)?;
    let mut log = RunLog::open(out)?;
    log.line(&format!("train-base from episode {}", trainer.episode))?;
    let ckpt = Checkpointing {
        path: &ckpt_path,
        every: cfg.checkpoint_every,
    };
    pipeline::run_base(&mut trainer, &cfg, &corpus, &split, Some(ckpt), &mut |l| {
        losses.push(l)?;
        log.line(&format!("episode {} loss {:.5}", l.episode, l.loss)).ok();
        Ok(())
    })?;
    defect_fewshot::episodic::save_checkpoint(&ckpt_path, &trainer)?;
    log.line("train-base done")?;
    println!("base checkpoint {} after {} episodes", ckpt_path.display(), trainer.episode);
    Ok(())
}

fn finetune(common: &Common, corpus_dir: &Path, base_path: &Path, resume: bool) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.finetune.seed = s;
    }
    cfg.validate()?;
    let (corpus, split) = load_corpus(corpus_dir)?;
    let out = &common.out;
    prepare_out(out)?;
    archive_config(out, &cfg)?;
    let base = load_checkpoint(base_path, &cfg.model, cfg.base.lr, cfg.base.momentum)
        .with_context(|| format!("{} is not a training checkpoint", base_path.display()))?;
    check_phase(&base, Phase::Base, base_path)?;
    let ckpt_path = out.join("finetune.ckpt");
    let mut trainer = if resume && ckpt_path.exists() {
        let t = load_checkpoint(&ckpt_path, &cfg.model, cfg.finetune.lr, cfg.finetune.momentum)?;
        check_phase(&t, Phase::Finetune, &ckpt_path)?;
        t
    } else {
        pipeline::finetune_trainer(&base, &cfg)?
    };
    let mut losses = LossLog::open(&out.join("finetune_loss.csv"), trainer.episode)?;
    let mut log = RunLog::open(out)?;
    log.line(&format!("finetune from episode {}", trainer.episode))?;
    let ckpt = Checkpointing {
        path: &ckpt_path,
        every: cfg.checkpoint_every,
    };
    let deployed = pipeline::run_finetune(&mut trainer, &cfg, &corpus, &split, Some(ckpt), &mut |l| {
        losses.push(l)?;
        log.line(&format!("episode {} loss {:.5}", l.episode, l.loss)).ok();
        Ok(())
    })?;
    let model_path = out.join("deployed.model");
    save_deployed(&model_path, &deployed)?;
    log.line("finetune done")?;
    println!(
        "deployed model {} with {} prototypes",
        model_path.display(),
        deployed.prototypes.len()
    );
    Ok(())
}

fn print_summary(label: &str, r: &EvalReport) {
    let pct = |v: Option<f64>| v.map_or("no data".to_string(), |v| format!("{:.2}", 100.0 * v));
    println!(
        "{label}: common mean ap_paper {} rare mean ap_paper {}",
        pct(r.common_mean_ap_paper),
        pct(r.rare_mean_ap_paper)
    );
}

fn write_comparison(dir: &Path, tl: &EvalReport, joint: &EvalReport) -> Result<()> {
    let path = dir.join("comparison.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["class", "name", "rarity", "two_phase_ap_paper", "joint_ap_paper", "gain_points"])?;
    for (a, b) in tl.rows.iter().zip(&joint.rows) {
        let cells = if a.no_data {
            ["no data".to_string(), "no data".to_string(), "no data".to_string()]
        } else {
            [
                format!("{:.6}", a.ap_paper),
                format!("{:.6}", b.ap_paper),
                format!("{:.4}", 100.0 * (a.ap_paper - b.ap_paper)),
            ]
        };
        let mut rec = vec![a.class_id.to_string(), a.name.clone(), a.rarity.as_str().to_string()];
        rec.extend(cells);
        w.write_record(&rec)?;
    }
    for (rarity, x, y) in [
        (Rarity::Common, tl.common_mean_ap_paper, joint.common_mean_ap_paper),
        (Rarity::Rare, tl.rare_mean_ap_paper, joint.rare_mean_ap_paper),
    ] {
        let cells = match (x, y) {
            (Some(x), Some(y)) => [format!("{x:.6}"), format!("{y:.6}"), format!("{:.4}", 100.0 * (x - y))],
            _ => ["no data".to_string(), "no data".to_string(), "no data".to_string()],
        };
        let mut rec = vec!["mean".to_string(), String::new(), rarity.as_str().to_string()];
        rec.extend(cells);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn evaluate(common: &Common, corpus_dir: &Path, model_path: &Path, baseline: Option<Baseline>, resume: bool) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.joint.seed = s;
    }
    cfg.validate()?;
    let (corpus, split) = load_corpus(corpus_dir)?;
    if split.eval.is_empty() {
        bail!("eval split is empty");
    }
    let out = &common.out;
    prepare_out(out)?;
    archive_config(out, &cfg)?;
    let mut log = RunLog::open(out)?;
    let model = pipeline::load_model(model_path, &cfg, &corpus, &split)?;
    log.line("evaluate")?;
    let report = pipeline::evaluate(&model, &cfg, &corpus, &split)?;
    write_report(out, "report", &report)?;
    print_summary("model", &report);
    if let Some(Baseline::Joint) = baseline {
        let joint = train_joint(&cfg, &corpus, &split, out, resume, &mut log)?;
        let joint_report = pipeline::evaluate(&joint, &cfg, &corpus, &split)?;
        write_report(out, "joint_report", &joint_report)?;
        write_comparison(out, &report, &joint_report)?;
        print_summary("joint baseline", &joint_report);
    }
    log.line("evaluate done")?;
    Ok(())
}

fn train_joint(
    cfg: &RunConfig,
    corpus: &defect_fewshot::synth::Corpus,
    split: &defect_fewshot::synth::CorpusSplit,
    out: &Path,
    resume: bool,
    log: &mut RunLog,
) -> Result<DeployedModel> {
    let ckpt_path = out.join("joint.ckpt");
    let phase = cfg.joint_phase();
    let mut trainer = if resume && ckpt_path.exists() {
        let t = load_checkpoint(&ckpt_path, &cfg.model, phase.lr, phase.momentum)?;
        check_phase(&t, Phase::Joint, &ckpt_path)?;
        t
    } else {
        pipeline::joint_trainer(cfg)?
    };
    let mut losses = LossLog::open(&out.join("joint_loss.csv"), trainer.episode)?;
    log.line(&format!("joint baseline from episode {}", trainer.episode))?;
    let ckpt = Checkpointing {
        path: &ckpt_path,
        every: cfg.checkpoint_every,
    };
    let deployed = pipeline::run_joint(&mut trainer, cfg, corpus, split, Some(ckpt), &mut |l| {
        losses.push(l)?;
        log.line(&format!("joint episode {} loss {:.5}", l.episode, l.loss)).ok();
        Ok(())
    })?;
    save_deployed(&out.join("joint.model"), &deployed)?;
    Ok(deployed)
}

fn export(common: &Common, corpus_dir: &Path, model_path: &Path) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.embeddings_seed = s;
    }
    cfg.validate()?;
    let (corpus, split) = load_corpus(corpus_dir)?;
    if split.eval.is_empty() {
        bail!("eval split is empty");
    }
    let out = &common.out;
    prepare_out(out)?;
    archive_config(out, &cfg)?;
    let model = pipeline::load_model(model_path, &cfg, &corpus, &split)?;
    let sample = pipeline::embedding_sample(&cfg, &corpus, &split);
    let table = export_embeddings(&model, &corpus, &sample)?;
    let path = out.join("embeddings.csv");
    write_embeddings_csv(&path, &table)?;
    let (intra, inter) = intra_inter_distances(&table, &corpus.classes_with(Rarity::Common));
    println!(
        "{} rows to {}; common classes: mean intra {intra:.4} inter {inter:.4}",
        table.rows.len(),
        path.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { common, force } => gen_data(common, *force),
        Command::TrainBase { common, corpus, resume } => train_base(common, corpus, *resume),
        Command::Finetune {
            common,
            corpus,
            checkpoint,
            resume,
        } => finetune(common, corpus, checkpoint, *resume),
        Command::Evaluate {
            common,
            corpus,
            model,
            baseline,
            resume,
        } => evaluate(common, corpus, model, *baseline, *resume),
        Command::ExportEmbeddings { common, corpus, model } => export(common, corpus, model),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            let msg = msg.replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

//! Python bindings for `defect_fewshot`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;

use defect_fewshot::config::{self, RunConfig};
use defect_fewshot::episodic::{self, EpisodeLog, Phase};
use defect_fewshot::eval;
use defect_fewshot::pipeline;
use defect_fewshot::proposals::BBox;
use defect_fewshot::synth;
use defect_fewshot::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_config(json: Option<&str>) -> PyResult<RunConfig> {
    match json {
        Some(text) => RunConfig::from_json(text).map_err(py_err),
        None => Ok(RunConfig::default()),
    }
}

type LogRow = (u64, f64, f64, f64);

fn row(l: &EpisodeLog) -> LogRow {
    (l.episode, l.loss, l.l_loc, l.l_cla)
}

/// Default run configuration as JSON.
#[pyfunction]
fn default_config() -> PyResult<String> {
    RunConfig::default().to_json().map_err(py_err)
}

type AnnotationRow = (u32, u32, u32, u32, u32);
type DetectionRow = (u32, f64, f64, f64, f64, f64);
type EmbeddingRow = (i32, bool, f64, f64, Vec<f32>);

/// A labelled image corpus with its train/eval split.
#[pyclass(module = "defect_fewshot", frozen)]
struct Corpus {
    corpus: synth::Corpus,
    split: synth::CorpusSplit,
}

#[pymethods]
impl Corpus {
    /// Generate the seeded synthetic corpus described by a config.
    #[staticmethod]
    #[pyo3(signature = (config=None))]
    fn generate(py: Python<'_>, config: Option<&str>) -> PyResult<Self> {
        let cfg = parse_config(config)?;
        let (corpus, split) = py.detach(|| config::prepare_corpus(&cfg)).map_err(py_err)?;
        Ok(Self { corpus, split })
    }

    #[staticmethod]
    fn load(py: Python<'_>, dir: PathBuf) -> PyResult<Self> {
        let (corpus, split) = py.detach(|| config::load_corpus(&dir)).map_err(py_err)?;
        Ok(Self { corpus, split })
    }

    fn save(&self, py: Python<'_>, dir: PathBuf) -> PyResult<()> {
        py.detach(|| synth::write_corpus(&dir, &self.corpus)).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.corpus.images.len()
    }

    fn manifest_hash(&self) -> PyResult<String> {
        synth::manifest_hash(&self.corpus.manifest).map_err(py_err)
    }

    /// `(class_id, name, rarity)` for every class.
    fn classes(&self) -> Vec<(u32, String, String)> {
        self.corpus
            .specs()
            .iter()
            .map(|s| (s.class_id, s.name.clone(), s.rarity.as_str().to_string()))
            .collect()
    }

    /// Image indices of the base, full-train and eval splits.
    fn split(&self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        (self.split.base.clone(), self.split.full.clone(), self.split.eval.clone())
    }

    /// `(id, class_id, width, height, pixels)` of image `i`.
    fn image(&self, i: usize) -> PyResult<(String, u32, usize, usize, Vec<u8>)> {
        let im = self
            .corpus
            .images
            .get(i)
            .ok_or_else(|| PyIndexError::new_err(format!("image {i} out of range")))?;
        Ok((im.id.clone(), im.class_id, im.image.width, im.image.height, im.image.pixels.clone()))
    }

    /// Ground-truth boxes of image `i` as `(class_id, x1, y1, x2, y2)`.
    fn annotations(&self, i: usize) -> PyResult<Vec<AnnotationRow>> {
        let im = self
            .corpus
            .images
            .get(i)
            .ok_or_else(|| PyIndexError::new_err(format!("image {i} out of range")))?;
        Ok(im
            .annotations
            .iter()
            .map(|a| (a.class_id, a.bbox.x1, a.bbox.y1, a.bbox.x2, a.bbox.y2))
            .collect())
    }
}

/// Model weights, optimizer and RNG state of one training phase.
#[pyclass(module = "defect_fewshot")]
struct Trainer {
    inner: episodic::Trainer,
    config: RunConfig,
}

#[pymethods]
impl Trainer {
    /// Fresh base-phase trainer.
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        let config = parse_config(config)?;
        let inner = pipeline::base_trainer(&config).map_err(py_err)?;
        Ok(Self { inner, config })
    }

    #[staticmethod]
    #[pyo3(signature = (path, config=None))]
    fn load(path: PathBuf, config: Option<&str>) -> PyResult<Self> {
        let config = parse_config(config)?;
        let inner = episodic::load_checkpoint(&path, &config.model, config.base.lr, config.base.momentum).map_err(py_err)?;
        Ok(Self { inner, config })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        episodic::save_checkpoint(&path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn phase(&self) -> &'static str {
        match self.inner.phase {
            Phase::Base => "base",
            Phase::Finetune => "finetune",
            Phase::Joint => "joint",
        }
    }

    #[getter]
    fn episode(&self) -> u64 {
        self.inner.episode
    }

    /// Continue base training until `episodes` (default: the configured
    /// count); returns `(episode, loss, L_loc, L_cla)` rows.
    #[pyo3(signature = (corpus, episodes=None))]
    fn train_base(&mut self, py: Python<'_>, corpus: &Corpus, episodes: Option<u64>) -> PyResult<Vec<LogRow>> {
        let mut cfg = self.config.clone();
        if let Some(n) = episodes {
            cfg.base.episodes = n;
        }
        let trainer = &mut self.inner;
        py.detach(|| {
            let mut rows = Vec::new();
            pipeline::run_base(trainer, &cfg, &corpus.corpus, &corpus.split, None, &mut |l| {
                rows.push(row(l));
                Ok(())
            })
            .map(|()| rows)
        })
        .map_err(py_err)
    }

    /// Few-shot fine-tuning from this base trainer; returns the deployed
    /// model and the loss rows.
    #[pyo3(signature = (corpus, episodes=None))]
    fn finetune(&self, py: Python<'_>, corpus: &Corpus, episodes: Option<u64>) -> PyResult<(DeployedModel, Vec<LogRow>)> {
        let mut cfg = self.config.clone();
        if let Some(n) = episodes {
            cfg.finetune.episodes = n;
        }
        let base = &self.inner;
        let (model, rows) = py
            .detach(|| {
                let mut t = pipeline::finetune_trainer(base, &cfg)?;
                let mut rows = Vec::new();
                let model = pipeline::run_finetune(&mut t, &cfg, &corpus.corpus, &corpus.split, None, &mut |l| {
                    rows.push(row(l));
                    Ok(())
                })?;
                Ok::<_, Error>((model, rows))
            })
            .map_err(py_err)?;
        Ok((
            DeployedModel {
                inner: model,
                config: cfg,
            },
            rows,
        ))
    }

    /// Deploy the current weights with the canonical support set.
    fn deploy(&self, py: Python<'_>, corpus: &Corpus) -> PyResult<DeployedModel> {
        let inner = py
            .detach(|| episodic::deploy(&self.inner, &corpus.corpus, &corpus.split, self.config.finetune.s))
            .map_err(py_err)?;
        Ok(DeployedModel {
            inner,
            config: self.config.clone(),
        })
    }
}

/// Train the single-phase joint baseline on every class.
#[pyfunction]
#[pyo3(signature = (corpus, config=None, episodes=None))]
fn train_joint(py: Python<'_>, corpus: &Corpus, config: Option<&str>, episodes: Option<u64>) -> PyResult<DeployedModel> {
    let mut cfg = parse_config(config)?;
    if let Some(n) = episodes {
        cfg.base.episodes = n;
        cfg.finetune.episodes = 0;
    }
    let inner = py
        .detach(|| {
            let mut t = pipeline::joint_trainer(&cfg)?;
            pipeline::run_joint(&mut t, &cfg, &corpus.corpus, &corpus.split, None, &mut |_| Ok(()))
        })
        .map_err(py_err)?;
    Ok(DeployedModel { inner, config: cfg })
}

/// A trained model with its prototype bank, ready for detection.
#[pyclass(module = "defect_fewshot", frozen)]
struct DeployedModel {
    inner: episodic::DeployedModel,
    config: RunConfig,
}

#[pymethods]
impl DeployedModel {
    #[staticmethod]
    #[pyo3(signature = (path, config=None))]
    fn load(path: PathBuf, config: Option<&str>) -> PyResult<Self> {
        let config = parse_config(config)?;
        let inner = episodic::load_deployed(&path, &config.model).map_err(py_err)?;
        Ok(Self { inner, config })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        episodic::save_deployed(&path, &self.inner).map_err(py_err)
    }

    fn classes(&self) -> Vec<u32> {
        self.inner.classes()
    }

    fn fingerprint(&self) -> PyResult<String> {
        self.inner.fingerprint().map_err(py_err)
    }

    /// Detections on corpus image `i` as `(class_id, score, x1, y1, x2, y2)`.
    fn detect(&self, py: Python<'_>, corpus: &Corpus, i: usize) -> PyResult<Vec<DetectionRow>> {
        let im = corpus
            .corpus
            .images
            .get(i)
            .ok_or_else(|| PyIndexError::new_err(format!("image {i} out of range")))?;
        let dets = py.detach(|| self.inner.detect(&im.image)).map_err(py_err)?;
        Ok(dets
            .iter()
            .map(|d| (d.class_id, d.score, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2))
            .collect())
    }

    /// Evaluation report over the eval split, as JSON.
    fn evaluate(&self, py: Python<'_>, corpus: &Corpus) -> PyResult<String> {
        let report = py
            .detach(|| pipeline::evaluate(&self.inner, &self.config, &corpus.corpus, &corpus.split))
            .map_err(py_err)?;
        serde_json::to_string_pretty(&report).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Embedding rows `(class_id, is_prototype, pca_x, pca_y, embedding)`
    /// for a seeded sample of eval boxes plus every prototype.
    fn export_embeddings(&self, py: Python<'_>, corpus: &Corpus) -> PyResult<Vec<EmbeddingRow>> {
        let table = py
            .detach(|| {
                let sample = pipeline::embedding_sample(&self.config, &corpus.corpus, &corpus.split);
                eval::export_embeddings(&self.inner, &corpus.corpus, &sample)
            })
            .map_err(py_err)?;
        Ok(table
            .rows
            .into_iter()
            .map(|r| (r.class_id, r.is_prototype, r.pca[0], r.pca[1], r.e))
            .collect())
    }
}

fn bbox(b: (f64, f64, f64, f64)) -> BBox {
    BBox::new(b.0, b.1, b.2, b.3)
}

#[pyfunction]
fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> PyResult<f64> {
    defect_fewshot::proposals::iou(&bbox(a), &bbox(b)).map_err(py_err)
}

#[pyfunction]
fn precision(tp: usize, fp: usize) -> f64 {
    eval::precision(tp, fp)
}

#[pyfunction]
fn recall(tp: usize, fn_: usize) -> f64 {
    eval::recall(tp, fn_)
}

#[pyfunction]
fn ap_paper(precision: f64, recall: f64) -> f64 {
    eval::ap_paper(precision, recall)
}

/// Greedy matching of `(x1, y1, x2, y2, score)` predictions against ground
/// truth boxes; returns `(tp, fp, fn)`.
#[pyfunction]
#[pyo3(signature = (preds, gts, iou_threshold=0.5))]
fn match_detections(
    preds: Vec<(f64, f64, f64, f64, f64)>,
    gts: Vec<(f64, f64, f64, f64)>,
    iou_threshold: f64,
) -> (usize, usize, usize) {
    let preds: Vec<(BBox, f64)> = preds.iter().map(|p| (bbox((p.0, p.1, p.2, p.3)), p.4)).collect();
    let gts: Vec<BBox> = gts.into_iter().map(bbox).collect();
    let m = eval::match_detections(&preds, &gts, iou_threshold);
    (m.tp, m.fp, m.fn_)
}

#[pymodule]
#[pyo3(name = "defect_fewshot")]
fn py_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<Trainer>()?;
    m.add_class::<DeployedModel>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(train_joint, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(precision, m)?)?;
    m.add_function(wrap_pyfunction!(recall, m)?)?;
    m.add_function(wrap_pyfunction!(ap_paper, m)?)?;
    m.add_function(wrap_pyfunction!(match_detections, m)?)?;
    Ok(())
}

//! Detection matching, per-class precision/recall/AP and report files.

pub mod embeddings;
pub mod pca;

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::episodic::{DeployedModel, Detection};
use crate::error::{Error, Result};
use crate::proposals::{iou_unchecked, BBox};
use crate::synth::{Corpus, Rarity};

pub use embeddings::{export_embeddings, write_embeddings_csv, EmbeddingRow, EmbeddingTable};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MatchResult {
    pub fn add(&mut self, other: MatchResult) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Indices of `scores` by descending score, ties in input order.
fn by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    order
}

/// Greedy matching of one image's predictions of one class. Per prediction,
/// in descending score order, returns whether it matched an unmatched ground
/// truth with IoU ≥ `iou_thr` (the highest-IoU one is taken).
pub fn match_flags(preds: &[(BBox, f64)], gts: &[BBox], iou_thr: f64) -> Vec<(f64, bool)> {
    let scores: Vec<f64> = preds.iter().map(|p| p.1).collect();
    let mut used = vec![false; gts.len()];
    by_score(&scores)
        .into_iter()
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] {
                    continue;
                }
                let v = iou_unchecked(&preds[i].0, gt);
                if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                used[g] = true;
            }
            (preds[i].1, best.is_some())
        })
        .collect()
}

pub fn match_detections(preds: &[(BBox, f64)], gts: &[BBox], iou_thr: f64) -> MatchResult {
    let tp = match_flags(preds, gts, iou_thr).iter().filter(|f| f.1).count();
    MatchResult {
        tp,
        fp: preds.len() - tp,
        fn_: gts.len() - tp,
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `TP / (TP + FP)`, 0 when there are no predictions.
pub fn precision(tp: usize, fp: usize) -> f64 {
    ratio(tp, tp + fp)
}

/// `TP / (TP + FN)`, 0 when there is no ground truth.
pub fn recall(tp: usize, fn_: usize) -> f64 {
    ratio(tp, tp + fn_)
}

/// Arithmetic mean of precision and recall.
pub fn ap_paper(precision: f64, recall: f64) -> f64 {
    (precision + recall) / 2.0
}

/// All-points interpolated area under the precision-recall curve of
/// `(score, is_true_positive)` pairs pooled over a dataset with `n_gt`
/// ground-truth boxes.
pub fn ap_voc(flags: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let scores: Vec<f64> = flags.iter().map(|f| f.0).collect();
    let order = by_score(&scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::with_capacity(order.len());
    for i in order {
        if flags[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..points.len() {
        let (r, _) = points[k];
        if r > prev_recall {
            let p_max = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
            ap += (r - prev_recall) * p_max;
            prev_recall = r;
        }
    }
    ap
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: u32,
    pub name: String,
    pub rarity: Rarity,
    pub counts: MatchResult,
    pub gt_boxes: usize,
    pub precision: f64,
    pub recall: f64,
    pub ap_paper: f64,
    pub ap_voc: f64,
    /// The eval set held no ground truth of this class.
    pub no_data: bool,
}

/// Published per-class AP (%) of a jointly trained baseline and of the
/// two-phase method, kept for side-by-side reading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub class: String,
    pub joint_baseline: f64,
    pub two_phase: f64,
}

pub fn reference_points() -> Vec<ReferencePoint> {
    vec![
        ReferencePoint {
            class: "Convex powder".into(),
            joint_baseline: 46.01,
            two_phase: 59.78,
        },
        ReferencePoint {
            class: "Chafed".into(),
            joint_baseline: 49.08,
            two_phase: 61.84,
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus_fingerprint: String,
    pub model_fingerprint: String,
    pub config: serde_json::Value,
    pub score_threshold: f64,
    pub iou_threshold: f64,
    pub eval_images: usize,
    /// Common classes first, then rare, each ascending by id.
    pub rows: Vec<ClassAp>,
    pub common_mean_ap_paper: Option<f64>,
    pub rare_mean_ap_paper: Option<f64>,
    pub reference: Vec<ReferencePoint>,
}

impl EvalReport {
    pub fn row(&self, class_id: u32) -> Option<&ClassAp> {
        self.rows.iter().find(|r| r.class_id == class_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub score_threshold: f64,
    pub iou_threshold: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            score_threshold: 0.5,
            iou_threshold: 0.5,
        }
    }
}

fn mean_of(rows: &[ClassAp], rarity: Rarity) -> Option<f64> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.rarity == rarity && !r.no_data)
        .map(|r| r.ap_paper)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-class rows from detections already computed for each eval image.
pub fn aggregate(
    corpus: &Corpus,
    eval: &[usize],
    detections: &[Vec<Detection>],
    settings: &EvalSettings,
) -> Result<Vec<ClassAp>> {
    if detections.len() != eval.len() {
        return Err(Error::invalid("one detection list per eval image required"));
    }
    let mut specs: Vec<_> = corpus.specs().iter().collect();
    specs.sort_by_key(|s| (s.rarity != Rarity::Common, s.class_id));
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let c = spec.class_id;
        let mut counts = MatchResult::default();
        let mut flags = Vec::new();
        let mut n_gt = 0;
        for (&i, dets) in eval.iter().zip(detections) {
            let gts: Vec<BBox> = corpus.images[i]
                .annotations
                .iter()
                .filter(|a| a.class_id == c)
                .map(|a| BBox::from(a.bbox))
                .collect();
            n_gt += gts.len();
            let all: Vec<(BBox, f64)> = dets
                .iter()
                .filter(|d| d.class_id == c)
                .map(|d| (d.bbox, d.score))
                .collect();
            let kept: Vec<(BBox, f64)> = all
                .iter()
                .copied()
                .filter(|d| d.1 >= settings.score_threshold)
                .collect();
            counts.add(match_detections(&kept, &gts, settings.iou_threshold));
            flags.extend(match_flags(&all, &gts, settings.iou_threshold));
        }
        let p = precision(counts.tp, counts.fp);
        let r = recall(counts.tp, counts.fn_);
        rows.push(ClassAp {
            class_id: c,
            name: spec.name.clone(),
            rarity: spec.rarity,
            counts,
            gt_boxes: n_gt,
            precision: p,
            recall: r,
            ap_paper: ap_paper(p, r),
            ap_voc: ap_voc(&flags, n_gt),
            no_data: n_gt == 0,
        });
    }
    Ok(rows)
}

/// Run the deployed model over `eval` and tabulate every class.
pub fn build_report(
    model: &DeployedModel,
    model_fingerprint: String,
    corpus: &Corpus,
    eval: &[usize],
    settings: &EvalSettings,
    config: serde_json::Value,
) -> Result<EvalReport> {
    if eval.is_empty() {
        return Err(Error::invalid("eval split is empty"));
    }
    let detections = eval
        .iter()
        .map(|&i| model.detect(&corpus.images[i].image))
        .collect::<Result<Vec<_>>>()?;
    let rows = aggregate(corpus, eval, &detections, settings)?;
    Ok(EvalReport {
        corpus_fingerprint: crate::synth::manifest_hash(&corpus.manifest)?,
        model_fingerprint,
        config,
        score_threshold: settings.score_threshold,
        iou_threshold: settings.iou_threshold,
        eval_images: eval.len(),
        common_mean_ap_paper: mean_of(&rows, Rarity::Common),
        rare_mean_ap_paper: mean_of(&rows, Rarity::Rare),
        rows,
        reference: reference_points(),
    })
}

pub fn write_report(dir: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    let json_path = dir.join(format!("{stem}.json"));
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let csv_err = |e: csv::Error| Error::invalid(format!("{}: {e}", csv_path.display()));
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    w.write_record(["class", "name", "rarity", "precision", "recall", "ap_paper", "ap_voc"])
        .map_err(csv_err)?;
    for r in &report.rows {
        let num = |v: f64| if r.no_data { "no data".to_string() } else { format!("{v:.6}") };
        w.write_record([
            r.class_id.to_string(),
            r.name.clone(),
            r.rarity.as_str().to_string(),
            num(r.precision),
            num(r.recall),
            num(r.ap_paper),
            num(r.ap_voc),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2)
    }

    #[test]
    fn matching_examples() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(match_detections(&[(g, 0.9)], &[g], 0.5), MatchResult { tp: 1, fp: 0, fn_: 0 });
        let g2 = b(20.0, 0.0, 30.0, 10.0);
        assert_eq!(match_detections(&[], &[g, g2], 0.5), MatchResult { tp: 0, fp: 0, fn_: 2 });
        // two predictions compete for the first box; the lower-scored one loses
        let preds = [(b(0.0, 0.0, 10.0, 9.0), 0.6), (g, 0.9), (b(20.0, 1.0, 30.0, 10.0), 0.7)];
        assert_eq!(match_detections(&preds, &[g, g2], 0.5), MatchResult { tp: 2, fp: 1, fn_: 0 });
        let flags = match_flags(&preds, &[g, g2], 0.5);
        assert_eq!(flags, vec![(0.9, true), (0.7, true), (0.6, false)]);
    }

    #[test]
    fn rate_examples() {
        assert_eq!(precision(8, 2), 0.8);
        assert_eq!(precision(0, 0), 0.0);
        assert_eq!(recall(0, 0), 0.0);
        assert_eq!(recall(5, 0), 1.0);
        assert_eq!(ap_paper(0.8, 0.6), 0.7);
        assert_eq!(ap_paper(1.0, 1.0), 1.0);
        assert_eq!(ap_paper(0.0, 0.0), 0.0);
    }

    #[test]
    fn voc_boundaries() {
        assert_eq!(ap_voc(&[(0.9, true), (0.8, true)], 2), 1.0);
        assert_eq!(ap_voc(&[(0.9, false), (0.8, false)], 2), 0.0);
        assert_eq!(ap_voc(&[], 3), 0.0);
        assert_eq!(ap_voc(&[(0.5, false)], 0), 0.0);
        // TP, FP, TP over 2 GT: 0.5·1 + 0.5·(2/3)
        let v = ap_voc(&[(0.9, true), (0.8, false), (0.7, true)], 2);
        assert!((v - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }
}

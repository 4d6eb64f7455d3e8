use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Scalar, Tape, Var};
use crate::backbone::WORKING_STRIDE;
use crate::error::{Error, Result};
use crate::metric::{
    background_prototype, cla_loss, classify, compute_prototype, embed, total_loss, ClassProbs, Label, PrototypeBank,
};
use crate::model::Model;
use crate::proposals::{
    anchor_deltas, build_loc_targets, decode_and_nms, iou_unchecked, loc_loss, roi_pool, sample_anchors, Anchor,
    BBox, LocTargets, NmsConfig, Proposal, RpnOutput, NEG_IOU, POS_IOU,
};
use crate::reweight::{apply_reweighting, ReweightingVector};
use crate::synth::{Corpus, DefectImage, GrayImage, PixelBox};

use super::task::Task;

/// Negative regions pooled per support image for the background prototype.
pub const NEG_PER_SUPPORT: usize = 2;
/// Fewest classified regions per query image.
pub const MIN_ROIS: usize = 4;

/// Reweighting vectors and prototypes computed from one support set.
#[derive(Clone, Debug)]
pub struct SupportBank {
    pub weights: BTreeMap<u32, ReweightingVector>,
    pub bank: PrototypeBank,
}

#[derive(Clone, Copy, Debug)]
pub struct EpisodeOutput {
    pub loss: Var,
    pub l_loc: f64,
    pub l_cla: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct QueryLoss {
    pub total: Var,
    pub l_loc: Var,
    pub l_cla: Var,
}

fn gt_boxes(image: &DefectImage) -> Vec<(BBox, u32)> {
    image.annotations.iter().map(|a| (BBox::from(a.bbox), a.class_id)).collect()
}

fn class_boxes(image: &DefectImage, class_id: u32) -> Vec<PixelBox> {
    image
        .annotations
        .iter()
        .filter(|a| a.class_id == class_id)
        .map(|a| a.bbox)
        .collect()
}

fn max_iou(bbox: &BBox, gts: &[(BBox, u32)]) -> (f64, Option<u32>) {
    let mut best = (0.0, None);
    for (g, c) in gts {
        let v = iou_unchecked(bbox, g);
        if v > best.0 {
            best = (v, Some(*c));
        }
    }
    best
}

/// RPN heads on `f` and the proposals they yield.
pub fn propose<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    f: Var,
    anchors: &[Anchor],
    nms: &NmsConfig,
    image_size: (usize, usize),
) -> Result<(RpnOutput, Vec<Proposal>)> {
    let out = model.rpn.forward(tape, &model.store, f)?;
    let shape = tape.shape(out.objectness);
    let plane = shape[1] * shape[2];
    let scores = tape.value(out.objectness).to_f64_vec();
    let deltas = anchor_deltas(&tape.value(out.deltas).to_f64_vec(), anchors.len(), plane)?;
    let proposals = decode_and_nms(anchors, &scores, &deltas, nms, image_size)?;
    Ok((out, proposals))
}

/// Anchors whose overlap with every ground truth is below the negative
/// threshold, clipped to the image, in random order.
fn negative_anchor_boxes(
    anchors: &[Anchor],
    max_iou: &[f64],
    image_size: (usize, usize),
    rng: &mut impl Rng,
) -> Vec<BBox> {
    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    let mut idx: Vec<usize> = (0..anchors.len()).filter(|&i| max_iou[i] < NEG_IOU).collect();
    idx.shuffle(rng);
    idx.into_iter()
        .map(|i| anchors[i].bbox.clip(w, h))
        .filter(|b| b.width() >= 1.0 && b.height() >= 1.0)
        .collect()
}

/// `n` background regions: proposals below the negative IoU threshold in
/// score order, topped up with random negative anchors.
fn negative_regions(
    proposals: &[Proposal],
    anchors: &[Anchor],
    targets: &LocTargets,
    gts: &[(BBox, u32)],
    n: usize,
    image_size: (usize, usize),
    rng: &mut impl Rng,
) -> Vec<BBox> {
    let mut out: Vec<BBox> = proposals
        .iter()
        .filter(|p| max_iou(&p.bbox, gts).0 < NEG_IOU)
        .map(|p| p.bbox)
        .take(n)
        .collect();
    if out.len() < n {
        let extra = negative_anchor_boxes(anchors, &targets.max_iou, image_size, rng);
        out.extend(extra.into_iter().take(n - out.len()));
    }
    out
}

/// Regions classified for one query image: every ground truth and every
/// proposal with IoU ≥ 0.5 (labelled with the matched class), plus as many
/// background regions, with at least [`MIN_ROIS`] in total.
pub fn sample_rois(
    proposals: &[Proposal],
    anchors: &[Anchor],
    targets: &LocTargets,
    gts: &[(BBox, u32)],
    image_size: (usize, usize),
    rng: &mut impl Rng,
) -> Vec<(BBox, Label)> {
    let mut rois: Vec<(BBox, Label)> = gts.iter().map(|&(b, c)| (b, Label::Class(c))).collect();
    for p in proposals {
        if let (v, Some(c)) = max_iou(&p.bbox, gts) {
            if v >= POS_IOU {
                rois.push((p.bbox, Label::Class(c)));
            }
        }
    }
    let n_neg = rois.len().max(MIN_ROIS.saturating_sub(rois.len()));
    let negs = negative_regions(proposals, anchors, targets, gts, n_neg, image_size, rng);
    rois.extend(negs.into_iter().map(|b| (b, Label::Background)));
    rois
}

/// Class-matched embeddings of one region: pooled from `F_c` for each class
/// `c` and from the unweighted `F` for background.
pub fn region_embeddings<T: Scalar>(
    tape: &mut Tape<T>,
    f: Var,
    class_features: &[(u32, Var)],
    bbox: &BBox,
) -> Result<Vec<(Label, Var)>> {
    let mut out = Vec::with_capacity(class_features.len() + 1);
    for &(c, fc) in class_features {
        let roi = roi_pool(tape, fc, bbox, WORKING_STRIDE)?;
        out.push((Label::Class(c), embed(tape, roi)?));
    }
    let roi = roi_pool(tape, f, bbox, WORKING_STRIDE)?;
    out.push((Label::Background, embed(tape, roi)?));
    Ok(out)
}

pub fn class_features<T: Scalar>(
    tape: &mut Tape<T>,
    f: Var,
    weights: &BTreeMap<u32, ReweightingVector>,
) -> Result<Vec<(u32, Var)>> {
    weights
        .iter()
        .map(|(&c, w)| Ok((c, apply_reweighting(tape, f, w)?.f)))
        .collect()
}

/// Per-class reweighting vectors and prototypes from ground-truth support
/// boxes, with a background prototype from support negatives.
pub fn build_support_bank<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    corpus: &Corpus,
    support: &BTreeMap<u32, Vec<usize>>,
    rng: &mut impl Rng,
) -> Result<SupportBank> {
    let size = corpus.image_size();
    let anchors = model.anchors(size);
    let mut weights = BTreeMap::new();
    for (&c, idx) in support {
        let pairs: Vec<(&GrayImage, Vec<PixelBox>)> = idx
            .iter()
            .map(|&i| (&corpus.images[i].image, class_boxes(&corpus.images[i], c)))
            .collect();
        weights.insert(c, model.reweight.class_reweighting_vector(tape, &model.store, &pairs, c)?);
    }
    let mut prototypes = Vec::with_capacity(support.len() + 1);
    let mut negatives = Vec::new();
    for (&c, idx) in support {
        let mut embs = Vec::new();
        for &i in idx {
            let img = &corpus.images[i];
            let f = model.feature(tape, &img.image)?;
            let fc = apply_reweighting(tape, f, &weights[&c])?.f;
            for b in class_boxes(img, c) {
                let roi = roi_pool(tape, fc, &BBox::from(b), WORKING_STRIDE)?;
                embs.push(embed(tape, roi)?);
            }
            let gts = gt_boxes(img);
            let (_, proposals) = propose(tape, model, f, &anchors, &model.config.train_nms, size)?;
            let plain: Vec<BBox> = gts.iter().map(|g| g.0).collect();
            let targets = build_loc_targets(&anchors, &plain);
            for b in negative_regions(&proposals, &anchors, &targets, &gts, NEG_PER_SUPPORT, size, rng) {
                let roi = roi_pool(tape, f, &b, WORKING_STRIDE)?;
                negatives.push(embed(tape, roi)?);
            }
        }
        prototypes.push(compute_prototype(tape, &embs, Label::Class(c))?);
    }
    prototypes.push(background_prototype(tape, &negatives)?);
    let bank = PrototypeBank::new(tape, prototypes)?;
    Ok(SupportBank { weights, bank })
}

/// `L_loc + mean L_cla` of one query image.
pub fn query_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    sb: &SupportBank,
    image: &DefectImage,
    anchors: &[Anchor],
    rng: &mut impl Rng,
) -> Result<QueryLoss> {
    let size = (image.image.height, image.image.width);
    let f = model.feature(tape, &image.image)?;
    let (rpn, proposals) = propose(tape, model, f, anchors, &model.config.train_nms, size)?;
    let gts = gt_boxes(image);
    let plain: Vec<BBox> = gts.iter().map(|g| g.0).collect();
    let targets = build_loc_targets(anchors, &plain);
    let sampled = sample_anchors(&targets, rng);
    let loc = loc_loss(tape, &rpn, &targets, &sampled)?;

    let rois = sample_rois(&proposals, anchors, &targets, &gts, size, rng);
    let feats = class_features(tape, f, &sb.weights)?;
    let mut clas = Vec::with_capacity(rois.len());
    for (bbox, label) in &rois {
        let embs = region_embeddings(tape, f, &feats, bbox)?;
        let probs: ClassProbs = classify(tape, &embs, &sb.bank)?;
        clas.push(cla_loss(tape, &probs, *label)?);
    }
    let l_cla = if clas.len() == 1 { clas[0] } else { tape.mean(&clas)? };
    Ok(QueryLoss {
        total: total_loss(tape, loc.total, l_cla)?,
        l_loc: loc.total,
        l_cla,
    })
}

/// Episode loss: the mean over query images of `L_loc + mean L_cla`, with
/// prototypes and reweighting vectors built from the task's support set.
pub fn episode_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    corpus: &Corpus,
    task: &Task,
    rng: &mut impl Rng,
) -> Result<EpisodeOutput> {
    if task.query.is_empty() {
        return Err(Error::invalid("task without query images"));
    }
    let sb = build_support_bank(tape, model, corpus, &task.support, rng)?;
    let anchors = model.anchors(corpus.image_size());
    let mut totals = Vec::with_capacity(task.query.len());
    let (mut l_loc, mut l_cla) = (0.0, 0.0);
    for &q in &task.query {
        let ql = query_loss(tape, model, &sb, &corpus.images[q], &anchors, rng)?;
        l_loc += tape.value(ql.l_loc).item()?.as_f64();
        l_cla += tape.value(ql.l_cla).item()?.as_f64();
        totals.push(ql.total);
    }
    let n = task.query.len() as f64;
    let loss = if totals.len() == 1 { totals[0] } else { tape.mean(&totals)? };
    Ok(EpisodeOutput {
        loss,
        l_loc: l_loc / n,
        l_cla: l_cla / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proposals::{generate_anchors, AnchorLabel};
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    #[test]
    fn rois_have_positives_and_matching_negatives() {
        let anchors = generate_anchors((16, 16), 4, &[16.0, 32.0]);
        let gts = vec![(BBox::new(10.0, 10.0, 26.0, 26.0), 3)];
        let targets = build_loc_targets(&anchors, &[gts[0].0]);
        let proposals = vec![
            Proposal {
                bbox: BBox::new(11.0, 10.0, 27.0, 26.0),
                score: 0.9,
                anchor: 0,
            },
            Proposal {
                bbox: BBox::new(40.0, 40.0, 60.0, 60.0),
                score: 0.8,
                anchor: 1,
            },
        ];
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
        let rois = sample_rois(&proposals, &anchors, &targets, &gts, (64, 64), &mut rng);
        let pos: Vec<_> = rois.iter().filter(|r| r.1 == Label::Class(3)).collect();
        let neg: Vec<_> = rois.iter().filter(|r| r.1 == Label::Background).collect();
        assert_eq!(pos.len(), 2);
        assert_eq!(neg.len(), 2);
        // the hard negative proposal comes first
        assert_eq!(neg[0].0, proposals[1].bbox);
        for (b, _) in neg {
            assert!(max_iou(b, &gts).0 < NEG_IOU);
        }
    }

    #[test]
    fn rois_reach_minimum_without_proposals() {
        let anchors = generate_anchors((16, 16), 4, &[16.0]);
        let gts = vec![(BBox::new(0.0, 0.0, 8.0, 8.0), 1)];
        let targets = build_loc_targets(&anchors, &[gts[0].0]);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
        let rois = sample_rois(&[], &anchors, &targets, &gts, (64, 64), &mut rng);
        assert_eq!(rois.len(), MIN_ROIS);
        assert_eq!(rois.iter().filter(|r| r.1 == Label::Background).count(), 3);
        assert!(targets.labels.contains(&AnchorLabel::Positive));
    }
}

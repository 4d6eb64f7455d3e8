use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::metric::{classify, Label, Prototype, PrototypeBank};
use crate::model::Model;
use crate::proposals::BBox;
use crate::reweight::ReweightingVector;
use crate::synth::{Corpus, CorpusSplit, GrayImage, Rarity};

use super::episode::{build_support_bank, class_features, propose, region_embeddings};
use super::Trainer;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredPrototype {
    pub label: Label,
    pub support_count: usize,
    pub c: Tensor<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: u32,
    pub score: f64,
}

/// Trained weights with cached per-class reweighting vectors and a fixed
/// prototype bank.
#[derive(Clone, Debug)]
pub struct DeployedModel {
    pub trainer: Trainer,
    pub reweighting: BTreeMap<u32, Tensor<f32>>,
    pub prototypes: Vec<StoredPrototype>,
}

/// Deployment support: every training image of a rare class, and `s`
/// randomly chosen training images of each common class.
pub fn canonical_support(
    corpus: &Corpus,
    pool: &[usize],
    classes: &[u32],
    s: usize,
    rng: &mut impl Rng,
) -> Result<BTreeMap<u32, Vec<usize>>> {
    let mut out = BTreeMap::new();
    for &c in classes {
        let spec = corpus
            .spec(c)
            .ok_or_else(|| Error::invalid(format!("unknown class {c}")))?;
        let members = CorpusSplit::of_class(corpus, pool, c);
        if members.len() < s.max(1) {
            return Err(Error::InsufficientImages {
                class: spec.name.clone(),
                needed: s.max(1),
                available: members.len(),
            });
        }
        let mut chosen = match spec.rarity {
            Rarity::Rare => members,
            Rarity::Common => index::sample(rng, members.len(), s).into_iter().map(|k| members[k]).collect(),
        };
        chosen.sort_by(|&a, &b| corpus.images[a].id.cmp(&corpus.images[b].id));
        out.insert(c, chosen);
    }
    Ok(out)
}

impl DeployedModel {
    /// Freeze the trainer's weights and compute the bank from `support`.
    pub fn build(
        mut trainer: Trainer,
        corpus: &Corpus,
        support: &BTreeMap<u32, Vec<usize>>,
    ) -> Result<Self> {
        let mut tape = Tape::inference();
        let sb = build_support_bank(&mut tape, &trainer.model, corpus, support, &mut trainer.rng)?;
        let reweighting = sb
            .weights
            .iter()
            .map(|(&c, w)| (c, tape.value(w.w).clone()))
            .collect();
        let prototypes = sb
            .bank
            .prototypes()
            .iter()
            .map(|p| StoredPrototype {
                label: p.label,
                support_count: p.support_count,
                c: tape.value(p.c).clone(),
            })
            .collect();
        Self::from_parts(trainer, reweighting, prototypes)
    }

    pub fn from_parts(
        trainer: Trainer,
        reweighting: BTreeMap<u32, Tensor<f32>>,
        prototypes: Vec<StoredPrototype>,
    ) -> Result<Self> {
        let m = trainer.model.m();
        let classes: Vec<u32> = prototypes
            .iter()
            .filter_map(|p| match p.label {
                Label::Class(c) => Some(c),
                Label::Background => None,
            })
            .collect();
        if classes != reweighting.keys().copied().collect::<Vec<_>>() {
            return Err(Error::invalid("prototype classes and reweighting vectors disagree"));
        }
        if reweighting.values().any(|w| w.shape() != [m]) {
            return Err(Error::shape("deployed model", format!("reweighting vectors must have length {m}")));
        }
        let d = Self {
            trainer,
            reweighting,
            prototypes,
        };
        let mut tape = Tape::inference();
        d.bank_on(&mut tape)?;
        Ok(d)
    }

    pub fn model(&self) -> &Model<f32> {
        &self.trainer.model
    }

    /// Hex sha256 of the serialized model.
    pub fn fingerprint(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(hex::encode(Sha256::digest(super::checkpoint::encode_deployed(self)?)))
    }

    /// Deployed defect classes, ascending.
    pub fn classes(&self) -> Vec<u32> {
        self.reweighting.keys().copied().collect()
    }

    fn bank_on(&self, tape: &mut Tape<f32>) -> Result<(BTreeMap<u32, ReweightingVector>, PrototypeBank)> {
        let weights = self
            .reweighting
            .iter()
            .map(|(&c, w)| {
                let w = tape.constant(w.clone());
                (c, ReweightingVector { w, class_id: c })
            })
            .collect();
        let prototypes = self
            .prototypes
            .iter()
            .map(|p| Prototype {
                c: tape.constant(p.c.clone()),
                label: p.label,
                support_count: p.support_count,
            })
            .collect();
        Ok((weights, PrototypeBank::new(tape, prototypes)?))
    }

    /// Proposals classified against the bank; background-labelled regions
    /// are dropped and the score is the winning class probability.
    pub fn detect(&self, image: &GrayImage) -> Result<Vec<Detection>> {
        let model = self.model();
        let size = (image.height, image.width);
        let mut tape = Tape::inference();
        let f = model.feature(&mut tape, image)?;
        let anchors = model.anchors(size);
        let (_, proposals) = propose(&mut tape, model, f, &anchors, &model.config.nms, size)?;
        let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        let labels = self.classify_on(&mut tape, f, &boxes)?;
        Ok(boxes
            .into_iter()
            .zip(labels)
            .filter_map(|(bbox, (label, score))| match label {
                Label::Class(class_id) => Some(Detection { bbox, class_id, score }),
                Label::Background => None,
            })
            .collect())
    }

    /// Most probable label of each box and its probability.
    pub fn classify_boxes(&self, image: &GrayImage, boxes: &[BBox]) -> Result<Vec<(Label, f64)>> {
        let mut tape = Tape::inference();
        let f = self.model().feature(&mut tape, image)?;
        self.classify_on(&mut tape, f, boxes)
    }

    fn classify_on(&self, tape: &mut Tape<f32>, f: Var, boxes: &[BBox]) -> Result<Vec<(Label, f64)>> {
        let (weights, bank) = self.bank_on(tape)?;
        let feats = class_features(tape, f, &weights)?;
        boxes
            .iter()
            .map(|b| {
                let embs = region_embeddings(tape, f, &feats, b)?;
                Ok(classify(tape, &embs, &bank)?.argmax(tape))
            })
            .collect()
    }

    /// Class-matched embedding of each `(box, class)`: pooled from the
    /// feature reweighted for that class.
    pub fn embed_boxes(&self, image: &GrayImage, boxes: &[(BBox, u32)]) -> Result<Vec<Vec<f32>>> {
        let mut tape = Tape::inference();
        let (weights, _) = self.bank_on(&mut tape)?;
        let f = self.model().feature(&mut tape, image)?;
        let feats = class_features(&mut tape, f, &weights)?;
        boxes
            .iter()
            .map(|(b, c)| {
                let fc = feats
                    .iter()
                    .find(|(k, _)| k == c)
                    .map(|&(_, v)| v)
                    .ok_or_else(|| Error::invalid(format!("class {c} is not deployed")))?;
                let roi = crate::proposals::roi_pool(&mut tape, fc, b, crate::backbone::WORKING_STRIDE)?;
                let e = crate::metric::embed(&mut tape, roi)?;
                Ok(tape.value(e).data().to_vec())
            })
            .collect()
    }
}

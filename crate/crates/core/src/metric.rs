//! Prototype-based distance classification.

use std::collections::BTreeSet;
use std::fmt;

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::proposals::POOL_SIZE;

/// Probability floor applied before taking the log in the class loss.
pub const LOG_FLOOR: f64 = 1e-12;

/// A defect class or the background (rejection) class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Class(u32),
    Background,
}

impl Label {
    /// Signed on-disk code, `-1` for background.
    pub fn code(self) -> i32 {
        match self {
            Label::Class(c) => c as i32,
            Label::Background => -1,
        }
    }

    pub fn from_code(code: i32) -> Result<Self> {
        match code {
            -1 => Ok(Label::Background),
            c if c >= 0 => Ok(Label::Class(c as u32)),
            c => Err(Error::invalid(format!("invalid label code {c}"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Class(c) => write!(f, "{c}"),
            Label::Background => f.write_str("background"),
        }
    }
}

/// Channel-major flattening of a pooled `[m,4,4]` ROI.
pub fn embed<T: Scalar>(tape: &mut Tape<T>, roi: Var) -> Result<Var> {
    let shape = tape.shape(roi).to_vec();
    if shape.len() != 3 || shape[1] != POOL_SIZE || shape[2] != POOL_SIZE {
        return Err(Error::shape("embed", format!("expected [m,4,4], got {shape:?}")));
    }
    tape.reshape(roi, &[shape[0] * POOL_SIZE * POOL_SIZE])
}

pub fn sq_euclid<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(
            "sq_euclid",
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    tape.sq_euclid(a, b)
}

#[derive(Clone, Copy, Debug)]
pub struct Prototype {
    pub c: Var,
    pub label: Label,
    pub support_count: usize,
}

/// Mean of the embeddings, summed in the given order.
pub fn compute_prototype<T: Scalar>(tape: &mut Tape<T>, embeddings: &[Var], label: Label) -> Result<Prototype> {
    if embeddings.is_empty() {
        return Err(Error::invalid(format!("no embeddings for prototype {label}")));
    }
    let c = if embeddings.len() == 1 {
        embeddings[0]
    } else {
        tape.mean(embeddings)?
    };
    Ok(Prototype {
        c,
        label,
        support_count: embeddings.len(),
    })
}

pub fn background_prototype<T: Scalar>(tape: &mut Tape<T>, negatives: &[Var]) -> Result<Prototype> {
    compute_prototype(tape, negatives, Label::Background)
}

/// One prototype per defect class plus exactly one background prototype.
#[derive(Clone, Debug)]
pub struct PrototypeBank {
    prototypes: Vec<Prototype>,
}

impl PrototypeBank {
    pub fn new<T: Scalar>(tape: &Tape<T>, prototypes: Vec<Prototype>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for p in &prototypes {
            if !seen.insert(p.label) {
                return Err(Error::invalid(format!("duplicate prototype for {}", p.label)));
            }
            if p.support_count == 0 {
                return Err(Error::invalid(format!("prototype {} has no support", p.label)));
            }
        }
        if !seen.contains(&Label::Background) {
            return Err(Error::invalid("prototype bank needs a background prototype"));
        }
        let dim = tape.shape(prototypes[0].c).to_vec();
        if prototypes.iter().any(|p| tape.shape(p.c) != dim.as_slice()) {
            return Err(Error::shape("prototype bank", "prototype dimensions differ"));
        }
        Ok(Self { prototypes })
    }

    pub fn prototypes(&self) -> &[Prototype] {
        &self.prototypes
    }

    pub fn labels(&self) -> Vec<Label> {
        self.prototypes.iter().map(|p| p.label).collect()
    }

    /// Defect classes in bank order.
    pub fn classes(&self) -> Vec<u32> {
        self.prototypes
            .iter()
            .filter_map(|p| match p.label {
                Label::Class(c) => Some(c),
                Label::Background => None,
            })
            .collect()
    }
}

/// Softmax over negative prototype distances, in bank order.
#[derive(Clone, Debug)]
pub struct ClassProbs {
    pub probs: Var,
    pub labels: Vec<Label>,
}

impl ClassProbs {
    pub fn index_of(&self, label: Label) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }

    /// Most probable label and its probability; ties go to bank order.
    pub fn argmax<T: Scalar>(&self, tape: &Tape<T>) -> (Label, f64) {
        let p = tape.value(self.probs).data();
        let mut best = 0;
        for i in 1..p.len() {
            if p[i] > p[best] {
                best = i;
            }
        }
        (self.labels[best], p[best].as_f64())
    }
}

/// `P(y = i | x) = softmax_i(-d(e_i, c_i))` where `e_i` is the embedding
/// pooled for label `i`.
pub fn classify<T: Scalar>(tape: &mut Tape<T>, embeddings: &[(Label, Var)], bank: &PrototypeBank) -> Result<ClassProbs> {
    let mut dists = Vec::with_capacity(bank.prototypes.len());
    for p in &bank.prototypes {
        let e = embeddings
            .iter()
            .find(|(l, _)| *l == p.label)
            .map(|&(_, v)| v)
            .ok_or_else(|| Error::invalid(format!("missing embedding for {}", p.label)))?;
        dists.push(sq_euclid(tape, e, p.c)?);
    }
    let d = tape.stack(&dists)?;
    let logits = tape.scale(d, -T::one())?;
    Ok(ClassProbs {
        probs: tape.softmax(logits)?,
        labels: bank.labels(),
    })
}

/// `-ln max(P(truth), 1e-12)`.
pub fn cla_loss<T: Scalar>(tape: &mut Tape<T>, probs: &ClassProbs, truth: Label) -> Result<Var> {
    let idx = probs
        .index_of(truth)
        .ok_or_else(|| Error::invalid(format!("class {truth} not in prototype bank")))?;
    tape.neg_log(probs.probs, idx, T::from_f64(LOG_FLOOR))
}

/// Unweighted sum of the localization and classification losses.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, l_loc: Var, l_cla: Var) -> Result<Var> {
    for v in [l_loc, l_cla] {
        let x = tape.value(v).item()?;
        if !x.is_finite() {
            return Err(Error::NonFinite("total_loss"));
        }
        if x < T::zero() {
            return Err(Error::invalid(format!("negative loss term {x}")));
        }
    }
    tape.add(l_loc, l_cla)
}

//! Anchor-based region proposals, ROI pooling and the localization loss.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, PoolBins, Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Conv;
use crate::synth::PixelBox;

/// Side of the pooled ROI grid.
pub const POOL_SIZE: usize = 4;
pub const BCE_EPS: f64 = 1e-6;
/// Largest log-scale delta applied when decoding, `ln(1000/16)`.
const MAX_LOG_DELTA: f64 = 4.135_166_556_742_356;

/// Continuous axis-aligned box in image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }
}

impl From<PixelBox> for BBox {
    fn from(b: PixelBox) -> Self {
        Self::new(f64::from(b.x1), f64::from(b.y1), f64::from(b.x2), f64::from(b.y2))
    }
}

/// Intersection over union of two non-degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    if !a.is_valid() || !b.is_valid() {
        return Err(Error::invalid(format!("degenerate box in iou: {a:?} / {b:?}")));
    }
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub bbox: BBox,
    /// Grid cell as (row, column).
    pub cell: (usize, usize),
    pub scale: usize,
}

/// Square anchors, `sides.len()` per cell. Anchor `s·h·w + y·w + x` has
/// side `sides[s]` and is centred on cell `(y, x)`, matching the flat
/// layout of the objectness map.
pub fn generate_anchors(grid: (usize, usize), stride: usize, sides: &[f64]) -> Vec<Anchor> {
    let (h, w) = grid;
    let mut out = Vec::with_capacity(h * w * sides.len());
    for (s, &side) in sides.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let cx = (x * stride) as f64 + stride as f64 / 2.0;
                let cy = (y * stride) as f64 + stride as f64 / 2.0;
                out.push(Anchor {
                    bbox: BBox::new(cx - side / 2.0, cy - side / 2.0, cx + side / 2.0, cy + side / 2.0),
                    cell: (y, x),
                    scale: s,
                });
            }
        }
    }
    out
}

/// Regression target `(dx, dy, dw, dh)` of `gt` relative to `anchor`.
pub fn encode_delta(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    [
        (gx - ax) / anchor.width(),
        (gy - ay) / anchor.height(),
        (gt.width() / anchor.width()).ln(),
        (gt.height() / anchor.height()).ln(),
    ]
}

pub fn decode_delta(anchor: &BBox, d: [f64; 4]) -> BBox {
    let (ax, ay) = anchor.center();
    let cx = ax + d[0] * anchor.width();
    let cy = ay + d[1] * anchor.height();
    let w = anchor.width() * d[2].min(MAX_LOG_DELTA).exp();
    let h = anchor.height() * d[3].min(MAX_LOG_DELTA).exp();
    BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

/// Region proposal head: shared 3×3 conv, sigmoid objectness and raw
/// box deltas per anchor scale.
#[derive(Clone, Debug)]
pub struct Rpn {
    conv: Conv,
    objectness: Conv,
    deltas: Conv,
    scales: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct RpnOutput {
    /// `[A,h,w]` probabilities.
    pub objectness: Var,
    /// `[4A,h,w]`, channel `4s + j` holds coordinate `j` of scale `s`.
    pub deltas: Var,
}

const OBJECTNESS_STD: f64 = 0.5;
const DELTA_STD: f64 = 0.01;

impl Rpn {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, m: usize, scales: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(store, "rpn.conv", m, m, 3, 1, rng)?,
            objectness: Conv::with_init(store, "rpn.objectness", [scales, m, 1, 1], 1, OBJECTNESS_STD, 0.0, rng)?,
            deltas: Conv::with_init(store, "rpn.deltas", [4 * scales, m, 1, 1], 1, DELTA_STD, 0.0, rng)?,
            scales,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.conv, self.objectness, self.deltas].iter().flat_map(|c| c.params()).collect()
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        [self.objectness, self.deltas].iter().flat_map(|c| c.params()).collect()
    }

    pub fn scales(&self) -> usize {
        self.scales
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, f: Var) -> Result<RpnOutput> {
        let h = self.conv.forward_relu(tape, store, f)?;
        let logits = self.objectness.forward(tape, store, h)?;
        Ok(RpnOutput {
            objectness: tape.sigmoid(logits)?,
            deltas: self.deltas.forward(tape, store, h)?,
        })
    }
}

/// Flat position of coordinate `j` of anchor `index` in the delta map.
pub fn delta_index(index: usize, plane: usize, j: usize) -> usize {
    let (s, r) = (index / plane, index % plane);
    (s * 4 + j) * plane + r
}

/// Per-anchor `(dx, dy, dw, dh)` rows from a flat `[4A,h,w]` delta map.
pub fn anchor_deltas(deltas: &[f64], n_anchors: usize, plane: usize) -> Result<Vec<[f64; 4]>> {
    if deltas.len() != 4 * n_anchors || plane == 0 || !n_anchors.is_multiple_of(plane) {
        return Err(Error::shape(
            "anchor_deltas",
            format!("{} deltas for {n_anchors} anchors on a {plane}-cell grid", deltas.len()),
        ));
    }
    Ok((0..n_anchors)
        .map(|i| std::array::from_fn(|j| deltas[delta_index(i, plane, j)]))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NmsConfig {
    pub pre_nms_top: usize,
    pub nms_iou: f64,
    pub post_nms_top: usize,
    pub score_min: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            pre_nms_top: 32,
            nms_iou: 0.5,
            post_nms_top: 8,
            score_min: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
    pub anchor: usize,
}

/// Top-scoring anchors decoded, clipped to the image and thinned by greedy
/// non-maximum suppression. Score ties go to the lower anchor index.
pub fn decode_and_nms(
    anchors: &[Anchor],
    objectness: &[f64],
    deltas: &[[f64; 4]],
    cfg: &NmsConfig,
    image_size: (usize, usize),
) -> Result<Vec<Proposal>> {
    if objectness.len() != anchors.len() || deltas.len() != anchors.len() {
        return Err(Error::shape(
            "decode_and_nms",
            format!(
                "{} anchors, {} scores, {} deltas",
                anchors.len(),
                objectness.len(),
                deltas.len()
            ),
        ));
    }
    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    let mut order: Vec<usize> = (0..anchors.len())
        .filter(|&i| objectness[i] >= cfg.score_min)
        .collect();
    order.sort_by(|&a, &b| {
        objectness[b]
            .partial_cmp(&objectness[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(cfg.pre_nms_top);
    let mut kept: Vec<Proposal> = Vec::with_capacity(cfg.post_nms_top);
    for i in order {
        let bbox = decode_delta(&anchors[i].bbox, deltas[i]).clip(w, h);
        if !(bbox.is_valid() && bbox.width() >= 1.0 && bbox.height() >= 1.0) {
            continue;
        }
        if kept.iter().all(|k| iou_unchecked(&k.bbox, &bbox) <= cfg.nms_iou) {
            kept.push(Proposal {
                bbox,
                score: objectness[i],
                anchor: i,
            });
            if kept.len() == cfg.post_nms_top {
                break;
            }
        }
    }
    Ok(kept)
}

/// Feature-grid bins of `bbox`: divided by `stride`, rounded outward,
/// widened to at least one cell, then split into `POOL_SIZE` near-equal
/// (possibly overlapping) bins per axis.
pub fn roi_bins(bbox: &BBox, stride: usize, grid: (usize, usize)) -> PoolBins {
    let axis = |lo: f64, hi: f64, n: usize| {
        let s = stride as f64;
        let a = ((lo / s).floor().max(0.0) as usize).min(n - 1);
        let b = ((hi / s).ceil().max(0.0) as usize).min(n).max(a + 1);
        let len = b - a;
        (0..POOL_SIZE)
            .map(|i| (a + i * len / POOL_SIZE, a + ((i + 1) * len).div_ceil(POOL_SIZE)))
            .collect::<Vec<_>>()
    };
    PoolBins {
        rows: axis(bbox.y1, bbox.y2, grid.0),
        cols: axis(bbox.x1, bbox.x2, grid.1),
    }
}

/// Max-pool the region of `f [m,h,w]` under `bbox` to `[m,4,4]`.
pub fn roi_pool<T: Scalar>(tape: &mut Tape<T>, f: Var, bbox: &BBox, stride: usize) -> Result<Var> {
    let shape = tape.shape(f).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("roi_pool", format!("feature {shape:?}")));
    }
    if !bbox.is_valid() {
        return Err(Error::invalid(format!("roi_pool on degenerate box {bbox:?}")));
    }
    let bins = roi_bins(bbox, stride, (shape[1], shape[2]));
    tape.region_max_pool(f, &bins)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Debug)]
pub struct LocTargets {
    pub labels: Vec<AnchorLabel>,
    /// Regression target against the matched ground truth (zero unless positive).
    pub deltas: Vec<[f64; 4]>,
    /// Highest IoU of each anchor with any ground truth.
    pub max_iou: Vec<f64>,
}

pub const POS_IOU: f64 = 0.5;
pub const NEG_IOU: f64 = 0.3;
pub const ANCHOR_SAMPLES: usize = 32;

/// IoU-based anchor labelling: `>= 0.5` positive, `< 0.3` negative,
/// otherwise ignored. The best anchor of each ground truth is also made
/// positive, so boxes smaller than every anchor still get a positive.
pub fn build_loc_targets(anchors: &[Anchor], gts: &[BBox]) -> LocTargets {
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut deltas = vec![[0.0; 4]; n];
    let mut max_iou = vec![0.0; n];
    let mut matched = vec![usize::MAX; n];
    let mut best_for_gt = vec![(0usize, -1.0f64); gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            let v = iou_unchecked(&a.bbox, gt);
            if v > max_iou[i] {
                max_iou[i] = v;
                matched[i] = g;
            }
            if v > best_for_gt[g].1 {
                best_for_gt[g] = (i, v);
            }
        }
        labels[i] = if max_iou[i] >= POS_IOU {
            AnchorLabel::Positive
        } else if max_iou[i] < NEG_IOU {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
    }
    for (g, &(i, v)) in best_for_gt.iter().enumerate() {
        if v > 0.0 {
            labels[i] = AnchorLabel::Positive;
            matched[i] = g;
        }
    }
    for i in 0..n {
        if labels[i] == AnchorLabel::Positive {
            deltas[i] = encode_delta(&anchors[i].bbox, &gts[matched[i]]);
        }
    }
    LocTargets {
        labels,
        deltas,
        max_iou,
    }
}

/// Up to `ANCHOR_SAMPLES / 2` positives and as many negatives (one when
/// there is no positive), drawn by seeded shuffle. Returned ascending.
pub fn sample_anchors(targets: &LocTargets, rng: &mut impl Rng) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..targets.labels.len())
        .filter(|&i| targets.labels[i] == AnchorLabel::Positive)
        .collect();
    let mut neg: Vec<usize> = (0..targets.labels.len())
        .filter(|&i| targets.labels[i] == AnchorLabel::Negative)
        .collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(ANCHOR_SAMPLES / 2);
    let n_neg = pos.len().max(1).min(neg.len());
    let mut out = pos;
    out.extend_from_slice(&neg[..n_neg]);
    out.sort_unstable();
    out
}

/// Localization loss parts, kept separately for logging.
#[derive(Clone, Copy, Debug)]
pub struct LocLoss {
    pub total: Var,
    pub bce: Var,
    pub smooth_l1: Option<Var>,
}

/// Mean BCE of the sampled anchors' objectness plus mean smooth-L1 over the
/// coordinates of sampled positives.
pub fn loc_loss<T: Scalar>(
    tape: &mut Tape<T>,
    rpn: &RpnOutput,
    targets: &LocTargets,
    sampled: &[usize],
) -> Result<LocLoss> {
    if sampled.is_empty() {
        return Err(Error::invalid("loc_loss without sampled anchors"));
    }
    let obj_shape = tape.shape(rpn.objectness).to_vec();
    let plane = obj_shape[1] * obj_shape[2];
    let probs = tape.gather(rpn.objectness, sampled)?;
    let labels: Vec<T> = sampled
        .iter()
        .map(|&i| match targets.labels[i] {
            AnchorLabel::Positive => T::one(),
            _ => T::zero(),
        })
        .collect();
    let bce = tape.bce(probs, &labels, T::from_f64(BCE_EPS))?;
    let positives: Vec<usize> = sampled
        .iter()
        .copied()
        .filter(|&i| targets.labels[i] == AnchorLabel::Positive)
        .collect();
    if positives.is_empty() {
        return Ok(LocLoss {
            total: bce,
            bce,
            smooth_l1: None,
        });
    }
    let mut idx = Vec::with_capacity(4 * positives.len());
    let mut tgt = Vec::with_capacity(4 * positives.len());
    for &i in &positives {
        for j in 0..4 {
            idx.push(delta_index(i, plane, j));
            tgt.push(T::from_f64(targets.deltas[i][j]));
        }
    }
    let pred = tape.gather(rpn.deltas, &idx)?;
    let reg = tape.smooth_l1(pred, &tgt)?;
    Ok(LocLoss {
        total: tape.add(bce, reg)?,
        bce,
        smooth_l1: Some(reg),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{random_tensor, GradCheck};
    use crate::autodiff::Tensor;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    const SIDES: [f64; 3] = [16.0, 32.0, 64.0];

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 30.0, 30.0)).unwrap(), 0.0);
        let v = iou(&a, &BBox::new(5.0, 5.0, 15.0, 15.0)).unwrap();
        assert!((v - 25.0 / 175.0).abs() < 1e-15);
        assert!(iou(&a, &BBox::new(3.0, 3.0, 3.0, 5.0)).is_err());
    }

    #[test]
    fn anchor_layout() {
        let anchors = generate_anchors((32, 32), 4, &SIDES);
        assert_eq!(anchors.len(), 3072);
        assert_eq!(anchors[0].bbox, BBox::new(-6.0, -6.0, 10.0, 10.0));
        let mut seen = std::collections::HashSet::new();
        for a in &anchors {
            assert!(seen.insert((a.cell, a.scale)));
        }
        let i = 2 * 1024 + 5 * 32 + 7;
        assert_eq!((anchors[i].cell, anchors[i].scale), ((5, 7), 2));
    }

    #[test]
    fn zero_heads_give_half_objectness() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
        let rpn = Rpn::new(&mut store, 8, 3, &mut rng).unwrap();
        for id in rpn.head_params() {
            let p = store.get_mut(id);
            p.tensor = Tensor::zeros(p.tensor.shape());
        }
        let mut tape = Tape::new();
        let f = tape.constant(random_tensor(&[8, 32, 32], 1.0, &mut rng));
        let out = rpn.forward(&mut tape, &store, f).unwrap();
        assert_eq!(tape.shape(out.objectness), &[3, 32, 32]);
        assert_eq!(tape.shape(out.deltas), &[12, 32, 32]);
        assert!(tape.value(out.objectness).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rpn_gradcheck() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let rpn = Rpn::new(&mut store, 4, 3, &mut rng).unwrap();
        let f = random_tensor(&[4, 6, 6], 1.0, &mut rng);
        let report = GradCheck::with_seed(3)
            .run(&[f], |tape, v| {
                let out = rpn.forward(tape, &store, v[0])?;
                let a = tape.sum(out.objectness)?;
                let b = tape.sum(out.deltas)?;
                tape.add(a, b)
            })
            .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn nms_keeps_highest_of_overlapping_pair() {
        let anchors = vec![
            Anchor {
                bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
                cell: (0, 0),
                scale: 0,
            },
            Anchor {
                bbox: BBox::new(0.0, 0.0, 10.0, 8.0),
                cell: (0, 1),
                scale: 0,
            },
        ];
        let out = decode_and_nms(&anchors, &[0.9, 0.8], &[[0.0; 4]; 2], &NmsConfig::default(), (64, 64)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
        // equal scores keep the lower anchor index
        let out = decode_and_nms(&anchors, &[0.7, 0.7], &[[0.0; 4]; 2], &NmsConfig::default(), (64, 64)).unwrap();
        assert_eq!(out[0].anchor, 0);
    }

    #[test]
    fn zero_deltas_reproduce_clipped_anchors() {
        let anchors = generate_anchors((2, 2), 4, &[16.0]);
        let cfg = NmsConfig {
            nms_iou: 1.0,
            score_min: 0.0,
            ..NmsConfig::default()
        };
        let out = decode_and_nms(&anchors, &[0.9, 0.8, 0.7, 0.6], &[[0.0; 4]; 4], &cfg, (64, 64)).unwrap();
        assert_eq!(out.len(), 4);
        for p in out {
            assert_eq!(p.bbox, anchors[p.anchor].bbox.clip(64.0, 64.0));
        }
        let none = decode_and_nms(&anchors, &[0.1; 4], &[[0.0; 4]; 4], &NmsConfig::default(), (64, 64)).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn roi_pool_examples() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::full(&[2, 32, 32], 3.0));
        let r = roi_pool(&mut tape, f, &BBox::new(0.0, 0.0, 128.0, 128.0), 4).unwrap();
        assert_eq!(tape.shape(r), &[2, 4, 4]);
        assert!(tape.value(r).data().iter().all(|&v| v == 3.0));

        let bins = roi_bins(&BBox::new(0.0, 0.0, 16.0, 16.0), 4, (32, 32));
        assert_eq!(bins.rows, vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
        assert_eq!(bins.cols, bins.rows);
        let grid = tape.constant(Tensor::from_fn(&[1, 32, 32], |i| i as f64));
        let r = roi_pool(&mut tape, grid, &BBox::new(0.0, 0.0, 16.0, 16.0), 4).unwrap();
        let expected: Vec<f64> = (0..4).flat_map(|y| (0..4).map(move |x| (y * 32 + x) as f64)).collect();
        assert_eq!(tape.value(r).data(), expected.as_slice());

        // a sub-cell box snaps to one cell; boxes at the far edge stay inside
        let tiny = roi_bins(&BBox::new(5.0, 5.0, 5.5, 5.5), 4, (32, 32));
        assert!(tiny.rows.iter().all(|&r| r == (1, 2)));
        let edge = roi_bins(&BBox::new(127.5, 127.5, 128.0, 128.0), 4, (32, 32));
        assert!(edge.rows.iter().all(|&r| r == (31, 32)));
    }

    #[test]
    fn roi_pool_gradcheck() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
        let f = random_tensor(&[3, 8, 8], 1.0, &mut rng);
        let bbox = BBox::new(3.0, 5.0, 27.0, 21.0);
        let report = GradCheck::with_seed(5)
            .run(&[f], |tape, v| roi_pool(tape, v[0], &bbox, 4))
            .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn delta_round_trip() {
        let a = BBox::new(-6.0, -6.0, 10.0, 10.0);
        let d = [0.3, -0.2, 0.5, -0.7];
        let back = encode_delta(&a, &decode_delta(&a, d));
        for j in 0..4 {
            assert!((back[j] - d[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn targets_label_by_iou_and_best_anchor() {
        let anchors = generate_anchors((32, 32), 4, &SIDES);
        let gt = BBox::new(40.0, 40.0, 72.0, 72.0);
        let t = build_loc_targets(&anchors, &[gt]);
        for (i, l) in t.labels.iter().enumerate() {
            match l {
                AnchorLabel::Positive => assert!(t.max_iou[i] >= 0.5),
                AnchorLabel::Negative => assert!(t.max_iou[i] < 0.3),
                AnchorLabel::Ignore => assert!((0.3..0.5).contains(&t.max_iou[i])),
            }
        }
        // a 6×6 spot matches no anchor at 0.5 but still gets one positive
        let spot = BBox::new(60.0, 60.0, 66.0, 66.0);
        let t = build_loc_targets(&anchors, &[spot]);
        assert_eq!(t.labels.iter().filter(|&&l| l == AnchorLabel::Positive).count(), 1);
    }

    #[test]
    fn sampling_respects_ratio() {
        let anchors = generate_anchors((32, 32), 4, &SIDES);
        let gts = [BBox::new(40.0, 40.0, 72.0, 72.0), BBox::new(0.0, 0.0, 60.0, 60.0)];
        let t = build_loc_targets(&anchors, &gts);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let s = sample_anchors(&t, &mut rng);
        let pos = s.iter().filter(|&&i| t.labels[i] == AnchorLabel::Positive).count();
        assert!(pos <= ANCHOR_SAMPLES / 2 && pos > 0);
        assert_eq!(s.len(), 2 * pos);
        assert!(s.iter().all(|&i| t.labels[i] != AnchorLabel::Ignore));
        assert!(s.windows(2).all(|w| w[0] < w[1]));

        let empty = build_loc_targets(&anchors, &[]);
        let s = sample_anchors(&empty, &mut rng);
        assert_eq!(s.len(), 1);
        assert_eq!(empty.labels[s[0]], AnchorLabel::Negative);
    }

    fn rpn_from(tape: &mut Tape<f64>, obj: Vec<f64>, deltas: Vec<f64>) -> RpnOutput {
        let n = obj.len();
        RpnOutput {
            objectness: tape.constant(Tensor::new(vec![1, 1, n], obj).unwrap()),
            deltas: tape.constant(Tensor::new(vec![4, 1, n], deltas).unwrap()),
        }
    }

    #[test]
    fn loc_loss_examples() {
        let targets = LocTargets {
            labels: vec![AnchorLabel::Positive, AnchorLabel::Negative, AnchorLabel::Negative],
            deltas: vec![[0.1, 0.2, 0.3, 0.4], [0.0; 4], [0.0; 4]],
            max_iou: vec![0.8, 0.0, 0.1],
        };
        // delta layout [4,1,3]: coordinate j of anchor i at j*3 + i
        let mut exact = vec![0.0; 12];
        for j in 0..4 {
            exact[j * 3] = targets.deltas[0][j];
        }
        let mut tape = Tape::new();
        let out = rpn_from(&mut tape, vec![1.0, 0.0, 0.0], exact.clone());
        let l = loc_loss(&mut tape, &out, &targets, &[0, 1, 2]).unwrap();
        assert!(tape.value(l.total).item().unwrap() <= 1e-5);

        let mut off = exact.clone();
        for j in 0..4 {
            off[j * 3] += 1.0;
        }
        let out = rpn_from(&mut tape, vec![1.0, 0.0, 0.0], off);
        let l = loc_loss(&mut tape, &out, &targets, &[0, 1, 2]).unwrap();
        let reg = tape.value(l.smooth_l1.unwrap()).item().unwrap();
        assert!((reg - 0.5).abs() < 1e-12);

        let out = rpn_from(&mut tape, vec![0.3, 0.6, 0.2], exact);
        let l = loc_loss(&mut tape, &out, &targets, &[1, 2]).unwrap();
        assert!(l.smooth_l1.is_none());
        let bce = -((0.4f64).ln() + (0.8f64).ln()) / 2.0;
        assert!((tape.value(l.total).item().unwrap() - bce).abs() < 1e-12);
        assert!(loc_loss(&mut tape, &out, &targets, &[]).is_err());
    }
}

use defect_fewshot::autodiff::{Tape, Tensor};
use defect_fewshot::eval::{ap_paper, match_detections};
use defect_fewshot::metric::{cla_loss, classify, compute_prototype, Label, Prototype, PrototypeBank};
use defect_fewshot::proposals::{
    build_loc_targets, decode_and_nms, decode_delta, encode_delta, generate_anchors, iou, roi_pool, AnchorLabel,
    BBox, NmsConfig, NEG_IOU, POS_IOU,
};
use defect_fewshot::reweight::{apply_reweighting, ReweightingVector};
use proptest::prelude::*;

const SIDES: [f64; 3] = [16.0, 32.0, 64.0];

fn bbox(max: f64) -> impl Strategy<Value = BBox> {
    (0.0..max - 2.0, 0.0..max - 2.0, 1.0..max / 2.0, 1.0..max / 2.0)
        .prop_map(move |(x, y, w, h)| BBox::new(x, y, (x + w).min(max), (y + h).min(max)))
}

fn constant(tape: &mut Tape<f64>, v: &[f64]) -> defect_fewshot::autodiff::Var {
    tape.constant(Tensor::from_f64_slice(&[v.len()], v).unwrap())
}

/// Class probabilities for one embedding per bank entry; the last entry is
/// the background.
fn probs_of(embs: &[Vec<f64>], protos: &[Vec<f64>]) -> (Vec<f64>, Vec<Label>) {
    let mut tape = Tape::<f64>::inference();
    let labels: Vec<Label> = (0..embs.len() - 1)
        .map(|c| Label::Class(c as u32))
        .chain([Label::Background])
        .collect();
    let bank: Vec<Prototype> = protos
        .iter()
        .zip(&labels)
        .map(|(p, &label)| Prototype {
            c: constant(&mut tape, p),
            label,
            support_count: 1,
        })
        .collect();
    let bank = PrototypeBank::new(&tape, bank).unwrap();
    let e: Vec<_> = embs.iter().zip(&labels).map(|(v, &l)| (l, constant(&mut tape, v))).collect();
    let probs = classify(&mut tape, &e, &bank).unwrap();
    (tape.value(probs.probs).to_f64_vec(), probs.labels)
}

fn metric_case() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (2usize..6, 1usize..8).prop_flat_map(|(k, d)| {
        let rows = prop::collection::vec(prop::collection::vec(-2.0..2.0f64, d), k);
        (rows.clone(), rows)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn nms_output_is_clipped_antichain(
        scores in prop::collection::vec(0.0..1.0f64, 8 * 8 * 3),
        deltas in prop::collection::vec(prop::array::uniform4(-1.0..1.0f64), 8 * 8 * 3),
    ) {
        let anchors = generate_anchors((8, 8), 4, &SIDES);
        let cfg = NmsConfig::default();
        let out = decode_and_nms(&anchors, &scores, &deltas, &cfg, (32, 32)).unwrap();
        prop_assert!(out.len() <= cfg.post_nms_top);
        for (i, p) in out.iter().enumerate() {
            let b = p.bbox;
            prop_assert!(0.0 <= b.x1 && b.x1 < b.x2 && b.x2 <= 32.0, "{:?}", b);
            prop_assert!(0.0 <= b.y1 && b.y1 < b.y2 && b.y2 <= 32.0, "{:?}", b);
            prop_assert!(p.score >= cfg.score_min);
            for q in &out[i + 1..] {
                prop_assert!(iou(&p.bbox, &q.bbox).unwrap() <= cfg.nms_iou);
                prop_assert!(p.score >= q.score);
            }
        }
    }

    #[test]
    fn delta_round_trip(anchor in bbox(128.0), d in prop::array::uniform4(-1.5..1.5f64)) {
        let back = encode_delta(&anchor, &decode_delta(&anchor, d));
        for j in 0..4 {
            prop_assert!((back[j] - d[j]).abs() < 1e-5, "{:?} vs {:?}", back, d);
        }
    }

    #[test]
    fn roi_pool_extent_is_fixed(b in bbox(64.0), m in 1usize..5) {
        let mut tape = Tape::<f64>::inference();
        let values: Vec<f64> = (0..m * 16 * 16).map(|i| (i % 7) as f64).collect();
        let f = tape.constant(Tensor::from_f64_slice(&[m, 16, 16], &values).unwrap());
        let r = roi_pool(&mut tape, f, &b, 4).unwrap();
        prop_assert_eq!(tape.shape(r), &[m, 4, 4][..]);
    }

    #[test]
    fn targets_respect_iou_bands(gts in prop::collection::vec(bbox(64.0), 1..4)) {
        let anchors = generate_anchors((16, 16), 4, &SIDES);
        let t = build_loc_targets(&anchors, &gts);
        let mut forced = 0;
        for (i, l) in t.labels.iter().enumerate() {
            match l {
                AnchorLabel::Positive if t.max_iou[i] < POS_IOU => forced += 1,
                AnchorLabel::Negative => prop_assert!(t.max_iou[i] < NEG_IOU),
                AnchorLabel::Ignore => prop_assert!((NEG_IOU..POS_IOU).contains(&t.max_iou[i])),
                _ => {}
            }
        }
        // only each box's best anchor may sit below the positive band
        prop_assert!(forced <= gts.len());
    }

    #[test]
    fn reweighting_is_homogeneous(
        f in prop::collection::vec(-3.0..3.0f64, 3 * 4 * 4),
        w in prop::collection::vec(-2.0..2.0f64, 3),
        alpha in -4.0..4.0f64,
    ) {
        let mut tape = Tape::<f64>::inference();
        let fv = tape.constant(Tensor::from_f64_slice(&[3, 4, 4], &f).unwrap());
        let scaled: Vec<f64> = w.iter().map(|x| alpha * x).collect();
        let a = ReweightingVector { w: constant(&mut tape, &w), class_id: 0 };
        let b = ReweightingVector { w: constant(&mut tape, &scaled), class_id: 0 };
        let fa = apply_reweighting(&mut tape, fv, &a).unwrap().f;
        let fb = apply_reweighting(&mut tape, fv, &b).unwrap().f;
        let (ya, yb) = (tape.value(fa).to_f64_vec(), tape.value(fb).to_f64_vec());
        for (x, y) in ya.iter().zip(&yb) {
            prop_assert!((alpha * x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn probabilities_sum_to_one_and_argmax_is_nearest((embs, protos) in metric_case()) {
        let (p, labels) = probs_of(&embs, &protos);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        let d: Vec<f64> = embs
            .iter()
            .zip(&protos)
            .map(|(e, c)| e.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect();
        let nearest = (0..d.len()).fold(0, |best, i| if d[i] < d[best] { i } else { best });
        let top = (0..p.len()).fold(0, |best, i| if p[i] > p[best] { i } else { best });
        prop_assert_eq!(labels[top], labels[nearest]);
    }

    #[test]
    fn scaling_keeps_argmax((embs, protos) in metric_case(), alpha in 0.1..5.0f64) {
        let scale = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter().map(|r| r.iter().map(|x| alpha * x).collect()).collect()
        };
        let (p, _) = probs_of(&embs, &protos);
        let (q, _) = probs_of(&scale(&embs), &scale(&protos));
        let argmax = |v: &[f64]| (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best });
        // near-ties can legitimately flip in floating point
        let mut sorted = p.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        prop_assume!(sorted[0] - sorted[1] > 1e-9);
        prop_assert_eq!(argmax(&p), argmax(&q));
    }

    #[test]
    fn cla_loss_nonnegative((embs, protos) in metric_case(), pick in 0usize..8) {
        let mut tape = Tape::<f64>::inference();
        let labels: Vec<Label> = (0..embs.len() - 1).map(|c| Label::Class(c as u32)).chain([Label::Background]).collect();
        let bank: Vec<Prototype> = protos
            .iter()
            .zip(&labels)
            .map(|(p, &label)| Prototype { c: constant(&mut tape, p), label, support_count: 1 })
            .collect();
        let bank = PrototypeBank::new(&tape, bank).unwrap();
        let e: Vec<_> = embs.iter().zip(&labels).map(|(v, &l)| (l, constant(&mut tape, v))).collect();
        let probs = classify(&mut tape, &e, &bank).unwrap();
        let loss = cla_loss(&mut tape, &probs, labels[pick % labels.len()]).unwrap();
        prop_assert!(tape.value(loss).to_f64_vec()[0] >= 0.0);
    }

    #[test]
    fn prototype_is_order_free(rows in prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 4), 1..6)) {
        let mut tape = Tape::<f64>::inference();
        let vars: Vec<_> = rows.iter().map(|r| constant(&mut tape, r)).collect();
        let mut rev = vars.clone();
        rev.reverse();
        let a = compute_prototype(&mut tape, &vars, Label::Class(0)).unwrap();
        let b = compute_prototype(&mut tape, &rev, Label::Class(0)).unwrap();
        let (va, vb) = (tape.value(a.c).to_f64_vec(), tape.value(b.c).to_f64_vec());
        for (x, y) in va.iter().zip(&vb) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert_eq!(a.support_count, rows.len());
    }

    #[test]
    fn matching_conserves_ground_truth(
        preds in prop::collection::vec((bbox(64.0), 0.0..1.0f64), 0..7),
        gts in prop::collection::vec(bbox(64.0), 0..7),
    ) {
        let r = match_detections(&preds, &gts, 0.5);
        prop_assert_eq!(r.tp + r.fn_, gts.len());
        prop_assert_eq!(r.tp + r.fp, preds.len());
    }

    #[test]
    fn ap_paper_bounded_and_monotone(p in 0.0..=1.0f64, r in 0.0..=1.0f64, dp in 0.0..0.5f64, dr in 0.0..0.5f64) {
        let a = ap_paper(p, r);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(ap_paper((p + dp).min(1.0), r) >= a);
        prop_assert!(ap_paper(p, (r + dr).min(1.0)) >= a);
    }
}

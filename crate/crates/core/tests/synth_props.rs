use defect_fewshot::synth::{
    augment, default_class_specs, expand_augmented, generate_corpus, manifest_bytes, Archetype, Transform,
};
use proptest::prelude::*;

const IMAGES_PER_CASE: usize = 6 * 5;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    // 40 cases x 30 images covers well over 1000 generated images
    #[test]
    fn boxes_in_bounds_and_single_class(seed in any::<u64>(), side in prop::sample::select(vec![64usize, 96, 128])) {
        let specs = default_class_specs();
        let corpus = generate_corpus(&specs, &[5; 6], (side, side), seed).unwrap();
        prop_assert_eq!(corpus.images.len(), IMAGES_PER_CASE);
        for im in &corpus.images {
            prop_assert!(!im.annotations.is_empty() && im.annotations.len() <= 3);
            for a in &im.annotations {
                prop_assert_eq!(a.class_id, im.class_id);
                let b = a.bbox;
                prop_assert!(b.x1 < b.x2 && b.x2 as usize <= side, "{:?}", b);
                prop_assert!(b.y1 < b.y2 && b.y2 as usize <= side, "{:?}", b);
                if specs[im.class_id as usize].archetype == Archetype::MicroSpot {
                    prop_assert!(b.area() <= 100, "micro spot area {}", b.area());
                }
            }
        }
    }

    #[test]
    fn augmentation_preserves_histogram_and_composes(seed in any::<u64>(), class in 0usize..6) {
        let specs = default_class_specs();
        let mut counts = [1usize; 6];
        counts[class] = 2;
        let corpus = generate_corpus(&specs, &counts, (64, 64), seed).unwrap();
        for im in &corpus.images {
            for t in Transform::ALL {
                let out = augment(im, t);
                prop_assert_eq!(out.image.histogram(), im.image.histogram());
                prop_assert_eq!(&augment(&out, t), im);
            }
            let hv = augment(&augment(im, Transform::Vmirror), Transform::Hmirror);
            prop_assert_eq!(hv, augment(im, Transform::Rot180));
        }
    }

    #[test]
    fn generation_is_deterministic(seed in any::<u64>()) {
        let specs = default_class_specs();
        let a = expand_augmented(&generate_corpus(&specs, &[2; 6], (64, 64), seed).unwrap());
        let b = expand_augmented(&generate_corpus(&specs, &[2; 6], (64, 64), seed).unwrap());
        prop_assert_eq!(manifest_bytes(&a.manifest).unwrap(), manifest_bytes(&b.manifest).unwrap());
        prop_assert_eq!(a.images, b.images);
    }
}

#[test]
fn desk_counts_mirror_imbalance() {
    let specs = default_class_specs();
    let counts = defect_fewshot::synth::default_class_counts(&specs);
    let corpus = expand_augmented(&generate_corpus(&specs, &counts, (128, 128), 7).unwrap());
    let totals: Vec<usize> = corpus.manifest.counts.iter().map(|c| c.total).collect();
    assert_eq!(totals, vec![1200, 1200, 1200, 1200, 64, 64]);
    corpus.validate().unwrap();
}

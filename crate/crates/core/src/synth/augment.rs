use serde::{Deserialize, Serialize};

use super::{count_classes, BBoxAnnotation, Corpus, DefectImage, GrayImage, PixelBox, Provenance, ProvenanceKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Hmirror,
    Vmirror,
    Rot180,
}

impl Transform {
    pub const ALL: [Transform; 3] = [Transform::Hmirror, Transform::Vmirror, Transform::Rot180];

    fn flips(self) -> (bool, bool) {
        match self {
            Transform::Hmirror => (true, false),
            Transform::Vmirror => (false, true),
            Transform::Rot180 => (true, true),
        }
    }
}

fn flip_pixels(img: &GrayImage, h: bool, v: bool) -> GrayImage {
    let (w, ht) = (img.width, img.height);
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in 0..ht {
        let sy = if v { ht - 1 - y } else { y };
        for x in 0..w {
            let sx = if h { w - 1 - x } else { x };
            pixels.push(img.pixels[sy * w + sx]);
        }
    }
    GrayImage {
        width: w,
        height: ht,
        pixels,
    }
}

fn flip_box(b: PixelBox, w: u32, ht: u32, h: bool, v: bool) -> PixelBox {
    let (x1, x2) = if h { (w - b.x2, w - b.x1) } else { (b.x1, b.x2) };
    let (y1, y2) = if v { (ht - b.y2, ht - b.y1) } else { (b.y1, b.y2) };
    PixelBox::new(x1, y1, x2, y2)
}

/// Mirror or rotate an image together with its boxes. Provenance composes,
/// so applying a transform twice returns the original id and kind.
pub fn augment(img: &DefectImage, transform: Transform) -> DefectImage {
    let (h, v) = transform.flips();
    let (w, ht) = (img.image.width as u32, img.image.height as u32);
    let (ph, pv) = img.provenance.kind.flips();
    let kind = ProvenanceKind::from_flips(ph ^ h, pv ^ v);
    let source = img.provenance.source.clone();
    let stem = source
        .strip_suffix(ProvenanceKind::Original.tag())
        .unwrap_or(&source)
        .trim_end_matches('_');
    DefectImage {
        id: format!("{stem}_{}", kind.tag()),
        image: flip_pixels(&img.image, h, v),
        class_id: img.class_id,
        annotations: img
            .annotations
            .iter()
            .map(|a| BBoxAnnotation {
                class_id: a.class_id,
                bbox: flip_box(a.bbox, w, ht, h, v),
            })
            .collect(),
        provenance: Provenance { kind, source },
    }
}

/// Every original followed by its three transformed copies.
pub fn expand_augmented(corpus: &Corpus) -> Corpus {
    let mut images = Vec::with_capacity(corpus.images.len() * 4);
    for im in corpus.images.iter().filter(|im| im.provenance.kind == ProvenanceKind::Original) {
        images.push(im.clone());
        images.extend(Transform::ALL.iter().map(|&t| augment(im, t)));
    }
    let mut manifest = corpus.manifest.clone();
    manifest.counts = count_classes(&manifest.classes, &images);
    manifest.split = None;
    Corpus { manifest, images }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DefectImage {
        let pixels: Vec<u8> = (0..100 * 60).map(|i| (i * 7 % 251) as u8).collect();
        DefectImage {
            id: "c0_00003_orig".into(),
            image: GrayImage::new(100, 60, pixels).unwrap(),
            class_id: 0,
            annotations: vec![BBoxAnnotation {
                class_id: 0,
                bbox: PixelBox::new(10, 20, 30, 40),
            }],
            provenance: Provenance {
                kind: ProvenanceKind::Original,
                source: "c0_00003_orig".into(),
            },
        }
    }

    #[test]
    fn hmirror_box_example() {
        let out = augment(&sample(), Transform::Hmirror);
        assert_eq!(out.annotations[0].bbox, PixelBox::new(70, 20, 90, 40));
        assert_eq!(out.id, "c0_00003_hmir");
        assert_eq!(out.provenance.source, "c0_00003_orig");
        let out = augment(&sample(), Transform::Vmirror);
        assert_eq!(out.annotations[0].bbox, PixelBox::new(10, 20, 30, 40));
    }

    #[test]
    fn pixel_mapping() {
        let s = sample();
        let h = augment(&s, Transform::Hmirror);
        let v = augment(&s, Transform::Vmirror);
        assert_eq!(h.image.get(0, 5), s.image.get(99, 5));
        assert_eq!(v.image.get(3, 0), s.image.get(3, 59));
    }

    #[test]
    fn involution_and_group_identity() {
        let s = sample();
        for t in Transform::ALL {
            assert_eq!(augment(&augment(&s, t), t), s);
        }
        let hv = augment(&augment(&s, Transform::Vmirror), Transform::Hmirror);
        assert_eq!(hv, augment(&s, Transform::Rot180));
    }
}

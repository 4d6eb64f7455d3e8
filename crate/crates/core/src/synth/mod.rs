//! Deterministic synthetic defect corpus: six defect archetypes rendered on
//! banded metal-like backgrounds, with box annotations and mirror/rotation
//! augmentation.

mod augment;
mod io;
mod render;
mod split;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, expand_augmented, Transform};
pub use io::{manifest_bytes, manifest_hash, read_corpus, read_pgm, write_corpus, write_pgm};
pub use render::MICRO_SPOT_MAX_SIDE;
pub use split::{split_corpus, CorpusSplit, SplitPolicy, SplitRecord};

pub const GENERATOR_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    BlobDark,
    PitCluster,
    MicroSpot,
    TexturePatch,
    BrightBlob,
    ScratchStreak,
}

impl Archetype {
    pub const ALL: [Archetype; 6] = [
        Archetype::BlobDark,
        Archetype::PitCluster,
        Archetype::MicroSpot,
        Archetype::TexturePatch,
        Archetype::BrightBlob,
        Archetype::ScratchStreak,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Archetype::BlobDark => "blob_dark",
            Archetype::PitCluster => "pit_cluster",
            Archetype::MicroSpot => "micro_spot",
            Archetype::TexturePatch => "texture_patch",
            Archetype::BrightBlob => "bright_blob",
            Archetype::ScratchStreak => "scratch_streak",
        }
    }
}

impl FromStr for Archetype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Archetype::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown archetype {s:?}")))
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rarity {
    Common,
    Rare,
}

impl Rarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Rarity::Common => "common",
            Rarity::Rare => "rare",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefectClassSpec {
    pub class_id: u32,
    pub name: String,
    pub archetype: Archetype,
    /// Inclusive size range in pixels (diameter, or length for streaks).
    pub size_range: (u32, u32),
    /// Inclusive intensity delta range as a fraction of full scale.
    pub contrast_range: (f64, f64),
    pub rarity: Rarity,
}

/// The six-class roster: four common classes and two rare ones.
pub fn default_class_specs() -> Vec<DefectClassSpec> {
    let spec = |class_id, name: &str, archetype, size_range, contrast_range, rarity| DefectClassSpec {
        class_id,
        name: name.to_string(),
        archetype,
        size_range,
        contrast_range,
        rarity,
    };
    vec![
        spec(0, "Leak", Archetype::BlobDark, (14, 32), (0.2, 0.4), Rarity::Common),
        spec(1, "Pit", Archetype::PitCluster, (14, 28), (0.25, 0.45), Rarity::Common),
        spec(2, "Spot", Archetype::MicroSpot, (5, 9), (0.3, 0.5), Rarity::Common),
        spec(3, "Orange skin", Archetype::TexturePatch, (18, 36), (0.12, 0.25), Rarity::Common),
        spec(4, "Convex powder", Archetype::BrightBlob, (12, 28), (0.2, 0.4), Rarity::Rare),
        spec(5, "Chafed", Archetype::ScratchStreak, (22, 40), (0.25, 0.45), Rarity::Rare),
    ]
}

/// Original images per class before augmentation: 300 per common class and
/// 16 per rare class.
pub fn default_class_counts(specs: &[DefectClassSpec]) -> Vec<usize> {
    specs
        .iter()
        .map(|s| match s.rarity {
            Rarity::Common => 300,
            Rarity::Rare => 16,
        })
        .collect()
}

/// Axis-aligned pixel box, half-open: `x1 <= x < x2`, `y1 <= y < y2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PixelBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl PixelBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> u32 {
        self.width() * self.height()
    }

    pub fn is_valid_in(&self, width: u32, height: u32) -> bool {
        self.x1 < self.x2 && self.x2 <= width && self.y1 < self.y2 && self.y2 <= height
    }

    /// True when the boxes are separated by at least `gap` pixels on some axis.
    fn separated(&self, other: &PixelBox, gap: u32) -> bool {
        self.x2 + gap <= other.x1
            || other.x2 + gap <= self.x1
            || self.y2 + gap <= other.y1
            || other.y2 + gap <= self.y1
    }

    pub fn to_array(self) -> [u32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl Serialize for PixelBox {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for PixelBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[u32; 4]>::deserialize(d)?;
        if x1 >= x2 || y1 >= y2 {
            return Err(serde::de::Error::custom(format!(
                "degenerate box [{x1},{y1},{x2},{y2}]"
            )));
        }
        Ok(PixelBox::new(x1, y1, x2, y2))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBoxAnnotation {
    pub class_id: u32,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProvenanceKind {
    Original,
    Hmirror,
    Vmirror,
    Rot180,
}

impl ProvenanceKind {
    fn flips(self) -> (bool, bool) {
        match self {
            ProvenanceKind::Original => (false, false),
            ProvenanceKind::Hmirror => (true, false),
            ProvenanceKind::Vmirror => (false, true),
            ProvenanceKind::Rot180 => (true, true),
        }
    }

    fn from_flips(h: bool, v: bool) -> Self {
        match (h, v) {
            (false, false) => ProvenanceKind::Original,
            (true, false) => ProvenanceKind::Hmirror,
            (false, true) => ProvenanceKind::Vmirror,
            (true, true) => ProvenanceKind::Rot180,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ProvenanceKind::Original => "orig",
            ProvenanceKind::Hmirror => "hmir",
            ProvenanceKind::Vmirror => "vmir",
            ProvenanceKind::Rot180 => "r180",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: ProvenanceKind,
    /// Id of the original image this one derives from (its own id for originals).
    pub source: String,
}

/// 8-bit grayscale raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::invalid(format!(
                "{width}x{height} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn histogram(&self) -> [usize; 256] {
        let mut h = [0; 256];
        for &p in &self.pixels {
            h[p as usize] += 1;
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DefectImage {
    pub id: String,
    pub image: GrayImage,
    pub class_id: u32,
    pub annotations: Vec<BBoxAnnotation>,
    pub provenance: Provenance,
}

impl DefectImage {
    pub fn boxes(&self) -> impl Iterator<Item = PixelBox> + '_ {
        self.annotations.iter().map(|a| a.bbox)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassCount {
    pub class_id: u32,
    pub originals: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub generator_version: u32,
    pub image_height: usize,
    pub image_width: usize,
    pub classes: Vec<DefectClassSpec>,
    pub counts: Vec<ClassCount>,
    pub split: Option<SplitRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: Manifest,
    pub images: Vec<DefectImage>,
}

impl Corpus {
    pub fn specs(&self) -> &[DefectClassSpec] {
        &self.manifest.classes
    }

    pub fn spec(&self, class_id: u32) -> Option<&DefectClassSpec> {
        self.manifest.classes.iter().find(|s| s.class_id == class_id)
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.manifest.image_height, self.manifest.image_width)
    }

    /// Class ids with the given rarity, ascending.
    pub fn classes_with(&self, rarity: Rarity) -> Vec<u32> {
        self.manifest
            .classes
            .iter()
            .filter(|s| s.rarity == rarity)
            .map(|s| s.class_id)
            .collect()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.images.iter().position(|im| im.id == id)
    }

    /// Recount images per class and compare with the manifest.
    pub fn validate(&self) -> Result<()> {
        validate_specs(&self.manifest.classes)?;
        let (h, w) = self.image_size();
        let counted = count_classes(&self.manifest.classes, &self.images);
        if counted != self.manifest.counts {
            return Err(Error::invalid("manifest counts differ from corpus contents"));
        }
        let mut ids = BTreeSet::new();
        for im in &self.images {
            if !ids.insert(im.id.as_str()) {
                return Err(Error::invalid(format!("duplicate image id {}", im.id)));
            }
            if im.image.width != w || im.image.height != h {
                return Err(Error::invalid(format!("{}: wrong image size", im.id)));
            }
            if im.annotations.is_empty() {
                return Err(Error::invalid(format!("{}: no annotations", im.id)));
            }
            for a in &im.annotations {
                if a.class_id != im.class_id {
                    return Err(Error::invalid(format!("{}: mixed classes", im.id)));
                }
                if !a.bbox.is_valid_in(w as u32, h as u32) {
                    return Err(Error::invalid(format!("{}: box out of bounds", im.id)));
                }
            }
        }
        Ok(())
    }
}

fn validate_specs(specs: &[DefectClassSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::invalid("empty class roster"));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.class_id as usize != i {
            return Err(Error::invalid(format!(
                "class ids must be contiguous from 0, found {} at position {i}",
                s.class_id
            )));
        }
        let (lo, hi) = s.size_range;
        let (clo, chi) = s.contrast_range;
        if lo == 0 || lo > hi || hi > 48 {
            return Err(Error::invalid(format!("{}: bad size range", s.name)));
        }
        if !(clo > 0.0 && clo <= chi && chi <= 1.0) {
            return Err(Error::invalid(format!("{}: bad contrast range", s.name)));
        }
    }
    Ok(())
}

fn count_classes(specs: &[DefectClassSpec], images: &[DefectImage]) -> Vec<ClassCount> {
    let mut counts: Vec<ClassCount> = specs
        .iter()
        .map(|s| ClassCount {
            class_id: s.class_id,
            originals: 0,
            total: 0,
        })
        .collect();
    for im in images {
        if let Some(c) = counts.get_mut(im.class_id as usize) {
            c.total += 1;
            if im.provenance.kind == ProvenanceKind::Original {
                c.originals += 1;
            }
        }
    }
    counts
}

/// Minimum gap in pixels between instance boxes of one image.
const INSTANCE_GAP: u32 = 2;
const PLACEMENT_ATTEMPTS: usize = 64;

/// Render the original (unaugmented) images, `counts[i]` of class `i`.
///
/// Image `g` (global index in class-major order) is rendered from its own
/// stream seeded with `seed ^ g`.
pub fn generate_corpus(
    specs: &[DefectClassSpec],
    counts: &[usize],
    image_size: (usize, usize),
    seed: u64,
) -> Result<Corpus> {
    validate_specs(specs)?;
    if counts.len() != specs.len() {
        return Err(Error::invalid(format!(
            "{} counts for {} classes",
            counts.len(),
            specs.len()
        )));
    }
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("class {} has count 0", specs[i].name)));
    }
    let (h, w) = image_size;
    if h < 64 || w < 64 {
        return Err(Error::invalid(format!("image size {h}x{w} below 64x64")));
    }

    let mut images = Vec::with_capacity(counts.iter().sum());
    let mut global = 0u64;
    for (spec, &count) in specs.iter().zip(counts) {
        for idx in 0..count {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ global);
            let id = format!("c{}_{idx:05}_{}", spec.class_id, ProvenanceKind::Original.tag());
            let rendered = render_image(spec, w, h, &mut rng);
            images.push(DefectImage {
                provenance: Provenance {
                    kind: ProvenanceKind::Original,
                    source: id.clone(),
                },
                id,
                image: rendered.image,
                class_id: spec.class_id,
                annotations: rendered.annotations,
            });
            global += 1;
        }
    }
    let manifest = Manifest {
        seed,
        generator_version: GENERATOR_VERSION,
        image_height: h,
        image_width: w,
        classes: specs.to_vec(),
        counts: count_classes(specs, &images),
        split: None,
    };
    Ok(Corpus { manifest, images })
}

pub(crate) struct Rendered {
    pub image: GrayImage,
    #[allow(dead_code)]
    pub background: GrayImage,
    pub annotations: Vec<BBoxAnnotation>,
}

pub(crate) fn render_image(spec: &DefectClassSpec, w: usize, h: usize, rng: &mut impl Rng) -> Rendered {
    let mut canvas = render::background(w, h, rng);
    let background = quantize(&canvas, w, h);
    let wanted = rng.random_range(1..=3);
    let mut boxes: Vec<PixelBox> = Vec::with_capacity(wanted);
    for _ in 0..wanted {
        let stamp = render::stamp(spec, rng);
        if stamp.width > w || stamp.height > h {
            continue;
        }
        for _ in 0..PLACEMENT_ATTEMPTS {
            let x = rng.random_range(0..=w - stamp.width);
            let y = rng.random_range(0..=h - stamp.height);
            let b = PixelBox::new(
                x as u32,
                y as u32,
                (x + stamp.width) as u32,
                (y + stamp.height) as u32,
            );
            if boxes.iter().all(|o| o.separated(&b, INSTANCE_GAP)) {
                for sy in 0..stamp.height {
                    for sx in 0..stamp.width {
                        canvas[(y + sy) * w + x + sx] += stamp.delta[sy * stamp.width + sx];
                    }
                }
                boxes.push(b);
                break;
            }
        }
    }
    debug_assert!(!boxes.is_empty(), "first instance always fits");
    Rendered {
        image: quantize(&canvas, w, h),
        background,
        annotations: boxes
            .into_iter()
            .map(|bbox| BBoxAnnotation {
                class_id: spec.class_id,
                bbox,
            })
            .collect(),
    }
}

fn quantize(values: &[f64], w: usize, h: usize) -> GrayImage {
    GrayImage {
        width: w,
        height: h,
        pixels: values.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
    }
}

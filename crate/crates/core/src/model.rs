//! The full detector: backbone with pyramid fusion, reweighting net and RPN,
//! sharing one parameter store.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::backbone::{Backbone, BackboneConfig, WORKING_STRIDE};
use crate::error::{Error, Result};
use crate::proposals::{generate_anchors, Anchor, NmsConfig, Rpn};
use crate::reweight::ReweightNet;
use crate::synth::GrayImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Square anchor side lengths in pixels.
    pub anchor_sides: Vec<f64>,
    /// Proposal settings at inference time.
    pub nms: NmsConfig,
    /// Proposal settings while training and building prototype banks.
    pub train_nms: NmsConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            anchor_sides: vec![16.0, 32.0, 64.0],
            nms: NmsConfig::default(),
            train_nms: NmsConfig {
                score_min: 0.0,
                ..NmsConfig::default()
            },
        }
    }
}

impl ModelConfig {
    pub fn m(&self) -> usize {
        self.backbone.fpn_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchor_sides.is_empty() || self.anchor_sides.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("bad anchor sides {:?}", self.anchor_sides)));
        }
        for nms in [&self.nms, &self.train_nms] {
            if nms.post_nms_top == 0 || !(0.0..=1.0).contains(&nms.nms_iou) || !(0.0..=1.0).contains(&nms.score_min) {
                return Err(Error::Config(format!("bad proposal settings {nms:?}")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("model config serializes");
        Sha256::digest(json).into()
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub reweight: ReweightNet,
    pub rpn: Rpn,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, config.backbone.clone(), &mut rng)?;
        let reweight = ReweightNet::new(&mut store, config.m(), &mut rng)?;
        let rpn = Rpn::new(&mut store, config.m(), config.anchor_sides.len(), &mut rng)?;
        Ok(Self {
            config,
            store,
            backbone,
            reweight,
            rpn,
        })
    }

    pub fn m(&self) -> usize {
        self.config.m()
    }

    /// Backbone and pyramid-fusion parameters.
    pub fn extractor_params(&self) -> Vec<ParamId> {
        self.backbone.params()
    }

    pub fn set_extractor_frozen(&mut self, frozen: bool) {
        let ids = self.extractor_params();
        self.store.set_frozen(&ids, frozen);
    }

    pub fn extractor_frozen(&self) -> bool {
        self.extractor_params().iter().all(|&id| self.store.get(id).frozen)
    }

    /// Anchors tiled over the working feature grid of an `(h, w)` image.
    pub fn anchors(&self, image_size: (usize, usize)) -> Vec<Anchor> {
        let grid = (image_size.0 / WORKING_STRIDE, image_size.1 / WORKING_STRIDE);
        generate_anchors(grid, WORKING_STRIDE, &self.config.anchor_sides)
    }

    /// Working feature `F` of one image.
    pub fn feature(&self, tape: &mut Tape<T>, image: &GrayImage) -> Result<Var> {
        let x = tape.constant(image_tensor(image));
        self.backbone.working(tape, &self.store, x)
    }

    /// Little-endian bytes of the given parameters, concatenated.
    pub fn param_bytes(&self, ids: &[ParamId]) -> Vec<u8> {
        ids.iter().flat_map(|&id| self.store.get(id).tensor.to_le_bytes()).collect()
    }
}

/// `[1,H,W]` tensor of pixels scaled to `[0,1]`.
pub fn image_tensor<T: Scalar>(image: &GrayImage) -> Tensor<T> {
    let data = image.pixels.iter().map(|&p| T::from_f64(f64::from(p) / 255.0)).collect();
    Tensor::new(vec![1, image.height, image.width], data).expect("pixel count matches size")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let a = Model::<f32>::new(ModelConfig::default(), 5).unwrap();
        let b = Model::<f32>::new(ModelConfig::default(), 5).unwrap();
        let c = Model::<f32>::new(ModelConfig::default(), 6).unwrap();
        let all: Vec<ParamId> = a.store.iter().map(|(id, _)| id).collect();
        assert_eq!(a.param_bytes(&all), b.param_bytes(&all));
        assert_ne!(a.param_bytes(&all), c.param_bytes(&all));
    }

    #[test]
    fn feature_grid_and_anchor_count() {
        let model = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
        let img = GrayImage::new(64, 64, vec![128; 64 * 64]).unwrap();
        let mut tape = Tape::inference();
        let f = model.feature(&mut tape, &img).unwrap();
        assert_eq!(tape.shape(f), &[32, 16, 16]);
        assert_eq!(model.anchors((64, 64)).len(), 3 * 16 * 16);
    }

    #[test]
    fn freezing_marks_only_extractor() {
        let mut model = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
        model.set_extractor_frozen(true);
        assert!(model.extractor_frozen());
        let ext = model.extractor_params();
        for (id, p) in model.store.iter() {
            assert_eq!(p.frozen, ext.contains(&id), "{}", p.name);
        }
    }

    #[test]
    fn config_validation_and_fingerprint() {
        let mut cfg = ModelConfig::default();
        assert!(cfg.validate().is_ok());
        let fp = cfg.fingerprint();
        cfg.anchor_sides.clear();
        assert!(cfg.validate().is_err());
        assert_ne!(cfg.fingerprint(), fp);
    }
}

//! Feature extractor: a small conv backbone with top-down pyramid fusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Conv;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 3],
    /// Channel count `m` shared by every fused level.
    pub fpn_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem_channels: 8,
            stage_channels: [16, 32, 64],
            fpn_channels: 32,
        }
    }
}

/// Stride of the working level P3 relative to the input.
pub const WORKING_STRIDE: usize = 4;

/// Bottom-up maps at strides 2, 4 and 8.
#[derive(Clone, Copy, Debug)]
pub struct PyramidFeatures {
    pub c2: Var,
    pub c3: Var,
    pub c4: Var,
}

/// Fused maps, all with `m` channels.
#[derive(Clone, Copy, Debug)]
pub struct FusedFeature {
    pub p2: Var,
    pub p3: Var,
    pub p4: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: Conv,
    stages: [[Conv; 2]; 3],
    laterals: [Conv; 3],
    smooth: [Conv; 3],
}

impl Backbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        let m = config.fpn_channels;
        if m == 0 || config.stem_channels == 0 || config.stage_channels.contains(&0) {
            return Err(Error::Config("backbone channel counts must be positive".into()));
        }
        let stem = Conv::new(store, "backbone.stem", config.stem_channels, 1, 3, 1, rng)?;
        let mut c_in = config.stem_channels;
        let mut stages = Vec::with_capacity(3);
        for (i, &c) in config.stage_channels.iter().enumerate() {
            let down = Conv::new(store, &format!("backbone.stage{}.down", i + 2), c, c_in, 3, 2, rng)?;
            let conv = Conv::new(store, &format!("backbone.stage{}.conv", i + 2), c, c, 3, 1, rng)?;
            stages.push([down, conv]);
            c_in = c;
        }
        let mut laterals = Vec::with_capacity(3);
        for (i, &c) in config.stage_channels.iter().enumerate() {
            laterals.push(Conv::new(store, &format!("fpn.lateral{}", i + 2), m, c, 1, 1, rng)?);
        }
        let mut smooth = Vec::with_capacity(3);
        for i in 0..3 {
            smooth.push(Conv::new(store, &format!("fpn.smooth{}", i + 2), m, m, 3, 1, rng)?);
        }
        Ok(Self {
            config,
            stem,
            stages: stages.try_into().expect("three stages"),
            laterals: laterals.try_into().expect("three laterals"),
            smooth: smooth.try_into().expect("three smoothing convs"),
        })
    }

    /// Every parameter of the backbone and the fusion convs.
    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.stem.params().to_vec();
        for stage in &self.stages {
            for conv in stage {
                ids.extend(conv.params());
            }
        }
        for conv in self.laterals.iter().chain(&self.smooth) {
            ids.extend(conv.params());
        }
        ids
    }

    /// `x` is `[1,H,W]` with pixels in `[0,1]`; H and W divisible by 8.
    pub fn extract_pyramid<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<PyramidFeatures> {
        let shape = tape.shape(x);
        if shape.len() != 3 || shape[0] != 1 || !shape[1].is_multiple_of(8) || !shape[2].is_multiple_of(8) {
            return Err(Error::shape(
                "extract_pyramid",
                format!("expected [1,H,W] with H,W divisible by 8, got {shape:?}"),
            ));
        }
        let mut h = self.stem.forward_relu(tape, store, x)?;
        let mut outs = [h; 3];
        for (i, [down, conv]) in self.stages.iter().enumerate() {
            h = down.forward_relu(tape, store, h)?;
            h = conv.forward_relu(tape, store, h)?;
            outs[i] = h;
        }
        Ok(PyramidFeatures {
            c2: outs[0],
            c3: outs[1],
            c4: outs[2],
        })
    }

    /// 1×1 projection of pyramid level `level` (0 = C2) to `m` channels.
    pub fn lateral_project<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, level: usize, c: Var) -> Result<Var> {
        self.laterals
            .get(level)
            .ok_or_else(|| Error::invalid(format!("no lateral for level {level}")))?
            .forward(tape, store, c)
    }

    /// Top-down merge of `[L2, L3, L4]` followed by 3×3 smoothing.
    pub fn fuse_topdown<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, laterals: [Var; 3]) -> Result<FusedFeature> {
        let [l2, l3, l4] = laterals;
        check_chain(tape, l3, l4)?;
        check_chain(tape, l2, l3)?;
        let m4 = l4;
        let up4 = tape.upsample2(m4)?;
        let m3 = tape.add(l3, up4)?;
        let up3 = tape.upsample2(m3)?;
        let m2 = tape.add(l2, up3)?;
        Ok(FusedFeature {
            p2: self.smooth[0].forward(tape, store, m2)?,
            p3: self.smooth[1].forward(tape, store, m3)?,
            p4: self.smooth[2].forward(tape, store, m4)?,
        })
    }

    /// Full pyramid: extraction, lateral projections and fusion.
    pub fn fused<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<FusedFeature> {
        let c = self.extract_pyramid(tape, store, x)?;
        let l2 = self.lateral_project(tape, store, 0, c.c2)?;
        let l3 = self.lateral_project(tape, store, 1, c.c3)?;
        let l4 = self.lateral_project(tape, store, 2, c.c4)?;
        self.fuse_topdown(tape, store, [l2, l3, l4])
    }

    /// The working map `F = P3`, computing only what P3 depends on. The
    /// P2/P4-only parameters are still bound so they receive zero gradients.
    pub fn working<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = self.extract_pyramid(tape, store, x)?;
        let l3 = self.lateral_project(tape, store, 1, c.c3)?;
        let l4 = self.lateral_project(tape, store, 2, c.c4)?;
        check_chain(tape, l3, l4)?;
        let up4 = tape.upsample2(l4)?;
        let m3 = tape.add(l3, up4)?;
        let p3 = self.smooth[1].forward(tape, store, m3)?;
        for conv in [&self.laterals[0], &self.smooth[0], &self.smooth[2]] {
            for id in conv.params() {
                tape.param(store, id);
            }
        }
        Ok(p3)
    }
}

/// The working feature of a fused pyramid.
pub fn working_feature(fused: &FusedFeature) -> Var {
    fused.p3
}

fn check_chain<T: Scalar>(tape: &Tape<T>, fine: Var, coarse: Var) -> Result<()> {
    let (f, c) = (tape.shape(fine), tape.shape(coarse));
    if f.len() != 3 || c.len() != 3 || f[0] != c[0] || f[1] != 2 * c[1] || f[2] != 2 * c[2] {
        return Err(Error::shape("fuse_topdown", format!("{f:?} is not twice {c:?}")));
    }
    Ok(())
}

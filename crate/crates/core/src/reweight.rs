//! Support-conditioned channel reweighting of the working feature.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, Linear};
use crate::synth::{GrayImage, PixelBox};

/// Channel widths of the three stride-2 convs.
pub const REWEIGHT_CHANNELS: [usize; 3] = [8, 16, 32];
const FINAL_WEIGHT_STD: f64 = 1e-3;

/// Per-class channel weights `w` of length `m`.
#[derive(Clone, Copy, Debug)]
pub struct ReweightingVector {
    pub w: Var,
    pub class_id: u32,
}

/// `F ⊗ w` for one class.
#[derive(Clone, Copy, Debug)]
pub struct ClassFeature {
    pub f: Var,
    pub class_id: u32,
}

#[derive(Clone, Debug)]
pub struct ReweightNet {
    convs: [Conv; 3],
    fc: Linear,
    m: usize,
}

impl ReweightNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, m: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut c_in = 2;
        let mut convs = Vec::with_capacity(3);
        for (i, &c) in REWEIGHT_CHANNELS.iter().enumerate() {
            convs.push(Conv::new(store, &format!("reweight.conv{i}"), c, c_in, 3, 2, rng)?);
            c_in = c;
        }
        // near-zero weights and unit bias: w starts close to all-ones
        let fc = Linear::with_init(store, "reweight.fc", m, c_in, FINAL_WEIGHT_STD, 1.0, rng)?;
        Ok(Self {
            convs: convs.try_into().expect("three convs"),
            fc,
            m,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.convs.iter().flat_map(|c| c.params()).collect();
        ids.extend(self.fc.params());
        ids
    }

    pub fn channels(&self) -> usize {
        self.m
    }

    /// Reweighting vector of one annotated support image.
    pub fn encode_support<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: &GrayImage,
        boxes: &[PixelBox],
        class_id: u32,
    ) -> Result<ReweightingVector> {
        let input = tape.constant(support_input(image, boxes)?);
        let mut h = input;
        for conv in &self.convs {
            h = conv.forward_relu(tape, store, h)?;
        }
        let pooled = tape.global_max_pool(h)?;
        let w = self.fc.forward(tape, store, pooled)?;
        Ok(ReweightingVector { w, class_id })
    }

    /// Elementwise mean of [`ReweightNet::encode_support`] over a class's
    /// support examples, summed in the given order.
    pub fn class_reweighting_vector<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        support: &[(&GrayImage, Vec<PixelBox>)],
        class_id: u32,
    ) -> Result<ReweightingVector> {
        if support.is_empty() {
            return Err(Error::invalid(format!("empty support for class {class_id}")));
        }
        let mut ws = Vec::with_capacity(support.len());
        for (image, boxes) in support {
            ws.push(self.encode_support(tape, store, image, boxes, class_id)?.w);
        }
        let w = if ws.len() == 1 { ws[0] } else { tape.mean(&ws)? };
        Ok(ReweightingVector { w, class_id })
    }
}

/// `[2,H,W]`: normalised pixels stacked with the binary box mask.
pub fn support_input<T: Scalar>(image: &GrayImage, boxes: &[PixelBox]) -> Result<Tensor<T>> {
    if boxes.is_empty() {
        return Err(Error::invalid("support example without annotations"));
    }
    let (w, h) = (image.width, image.height);
    let mut data = Vec::with_capacity(2 * w * h);
    data.extend(image.pixels.iter().map(|&p| T::from_f64(f64::from(p) / 255.0)));
    let mut mask = vec![T::zero(); w * h];
    for b in boxes {
        if !b.is_valid_in(w as u32, h as u32) {
            return Err(Error::invalid(format!("support box {b:?} outside {w}x{h}")));
        }
        for y in b.y1 as usize..b.y2 as usize {
            mask[y * w + b.x1 as usize..y * w + b.x2 as usize].fill(T::one());
        }
    }
    data.extend(mask);
    Tensor::new(vec![2, h, w], data)
}

pub fn apply_reweighting<T: Scalar>(tape: &mut Tape<T>, f: Var, w: &ReweightingVector) -> Result<ClassFeature> {
    Ok(ClassFeature {
        f: tape.channel_scale(f, w.w)?,
        class_id: w.class_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::GradCheck;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn image(seed: u64, side: usize) -> GrayImage {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        GrayImage::new(side, side, (0..side * side).map(|_| rng.random::<u8>()).collect()).unwrap()
    }

    fn net<T: Scalar>(seed: u64) -> (ParamStore<T>, ReweightNet) {
        let mut store = ParamStore::new();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let net = ReweightNet::new(&mut store, 32, &mut rng).unwrap();
        (store, net)
    }

    #[test]
    fn mask_marks_box_union() {
        let img = image(1, 8);
        let t: Tensor<f64> = support_input(&img, &[PixelBox::new(1, 1, 3, 2), PixelBox::new(2, 1, 4, 3)]).unwrap();
        let mask = &t.data()[64..];
        let ones: Vec<usize> = (0..64).filter(|&i| mask[i] == 1.0).collect();
        assert_eq!(ones, vec![9, 10, 11, 18, 19]);
        assert!(support_input::<f64>(&img, &[]).is_err());
    }

    #[test]
    fn fresh_net_is_near_ones_and_pure() {
        let (store, net) = net::<f32>(3);
        for seed in 0..5 {
            let img = image(seed, 128);
            let boxes = [PixelBox::new(10, 10, 40, 30)];
            let mut tape = Tape::inference();
            let a = net.encode_support(&mut tape, &store, &img, &boxes, 0).unwrap();
            let b = net.encode_support(&mut tape, &store, &img, &boxes, 0).unwrap();
            assert_eq!(tape.shape(a.w), &[32]);
            let dev = tape.value(a.w).data().iter().map(|&v| (v - 1.0).abs()).fold(0.0f32, f32::max);
            assert!(dev < 0.1);
            assert_eq!(tape.value(a.w), tape.value(b.w));
        }
    }

    #[test]
    fn class_vector_is_mean_and_order_free() {
        let (store, net) = net::<f32>(4);
        let (i1, i2, i3) = (image(1, 64), image(2, 64), image(3, 64));
        let b = vec![PixelBox::new(5, 5, 20, 20)];
        let mut tape = Tape::inference();
        let single = net.class_reweighting_vector(&mut tape, &store, &[(&i1, b.clone())], 0).unwrap();
        let direct = net.encode_support(&mut tape, &store, &i1, &b, 0).unwrap();
        assert_eq!(tape.value(single.w), tape.value(direct.w));

        let fwd = net
            .class_reweighting_vector(&mut tape, &store, &[(&i1, b.clone()), (&i2, b.clone()), (&i3, b.clone())], 0)
            .unwrap();
        let rev = net
            .class_reweighting_vector(&mut tape, &store, &[(&i3, b.clone()), (&i2, b.clone()), (&i1, b.clone())], 0)
            .unwrap();
        for (x, y) in tape.value(fwd.w).data().iter().zip(tape.value(rev.w).data()) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(net.class_reweighting_vector::<f32>(&mut tape, &store, &[], 0).is_err());
    }

    #[test]
    fn reweighting_examples() {
        let mut tape = Tape::<f64>::new();
        let f = tape.variable(Tensor::from_fn(&[3, 2, 2], |i| i as f64 - 4.0));
        let two = tape.variable(Tensor::full(&[3], 2.0));
        let rv = ReweightingVector { w: two, class_id: 1 };
        let out = apply_reweighting(&mut tape, f, &rv).unwrap();
        let doubled: Vec<f64> = tape.value(f).data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.value(out.f).data(), doubled.as_slice());
        assert_eq!(out.class_id, 1);

        // gradients reach both F and w through a distance loss
        let target = tape.constant(Tensor::ones(&[3, 2, 2]));
        let loss = tape.sq_euclid(out.f, target).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(f).unwrap().data().iter().any(|&v| v != 0.0));
        assert!(g.get(two).unwrap().data().iter().any(|&v| v != 0.0));

        let bad = tape.constant(Tensor::ones(&[2]));
        assert!(apply_reweighting(&mut tape, f, &ReweightingVector { w: bad, class_id: 0 }).is_err());
    }

    #[test]
    fn gradcheck_through_encode_support() {
        let (store, net) = net::<f64>(9);
        let img = image(5, 16);
        let boxes = vec![PixelBox::new(2, 3, 9, 12)];
        let ids = net.params();
        let inputs: Vec<Tensor<f64>> = ids.iter().map(|&id| store.get(id).tensor.clone()).collect();
        let report = GradCheck::with_seed(2)
            .run(&inputs, |tape, v| {
                for (&id, &var) in ids.iter().zip(v) {
                    tape.bind_param(id, var);
                }
                Ok(net.encode_support(tape, &store, &img, &boxes, 0)?.w)
            })
            .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}

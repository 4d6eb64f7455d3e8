//! Reverse-mode automatic differentiation over dense CPU tensors, plus
//! SGD with momentum.

pub mod gradcheck;
mod optim;
mod param;
mod tape;
mod tensor;

pub use optim::{sgd_step, OptimState};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, PoolBins, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};


#[cfg(test)]
mod tests {
    use super::gradcheck::{random_tensor, GradCheck};
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn t(shape: &[usize], values: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, values).unwrap()
    }

    #[test]
    fn conv_all_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 3, 3]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_zero_kernel_gives_zero() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(random_tensor(&[2, 7, 5], 1.0, &mut rng));
        let k = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv2d(x, k, b, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[3, 4, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_shape_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[2, 3, 3]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(tape.conv2d(x, k, b, 1, 0).is_err());
        let k = tape.constant(Tensor::ones(&[1, 2, 5, 5]));
        assert!(tape.conv2d(x, k, b, 1, 0).is_err());
    }

    #[test]
    fn conv_non_finite_is_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 1], &[f64::INFINITY]));
        let k = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(tape.conv2d(x, k, b, 1, 0).is_err());
    }

    #[test]
    fn conv_gradcheck() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        let inputs = vec![
            random_tensor(&[2, 6, 6], 1.0, &mut rng),
            random_tensor(&[3, 2, 3, 3], 0.5, &mut rng),
            random_tensor(&[3], 0.5, &mut rng),
        ];
        for (stride, pad) in [(1, 0), (2, 1), (1, 1)] {
            let report = GradCheck::with_seed(5)
                .run(&inputs, |tape, v| tape.conv2d(v[0], v[1], v[2], stride, pad))
                .unwrap();
            assert!(report.passes(1e-4), "stride {stride} pad {pad}: {report:?}");
        }
    }

    #[test]
    fn channel_scale_examples() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[2], &[2.0, 0.0]));
        let y = tape.channel_scale(f, w).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0, 0.0, 0.0]);
        let bad = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
        assert!(tape.channel_scale(f, bad).is_err());
    }

    #[test]
    fn channel_scale_ones_is_bitwise_identity() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let mut tape = Tape::<f32>::new();
        let src: Tensor<f32> = random_tensor(&[3, 4, 4], 3.0, &mut rng).cast();
        let f = tape.constant(src.clone());
        let w = tape.constant(Tensor::ones(&[3]));
        let y = tape.channel_scale(f, w).unwrap();
        assert_eq!(tape.value(y).to_le_bytes(), src.to_le_bytes());
    }

    #[test]
    fn maxpool_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let c = tape.constant(Tensor::full(&[2, 4, 4], 1.5));
        let y = tape.maxpool2(c).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 1.5));
        let odd = tape.constant(Tensor::ones(&[1, 3, 2]));
        assert!(tape.maxpool2(odd).is_err());
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::ones(&[1, 2, 2]));
        let y = tape.maxpool2(x).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_example_and_inverse() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.upsample2(x).unwrap();
        let expected = [
            1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(tape.value(y).data(), &expected);
        // 2x2 average pooling recovers the input
        let up = tape.value(y).data();
        let avg: Vec<f64> = (0..2)
            .flat_map(|oy| {
                (0..2).map(move |ox| {
                    let at = |y: usize, x: usize| up[y * 4 + x];
                    (at(2 * oy, 2 * ox) + at(2 * oy, 2 * ox + 1) + at(2 * oy + 1, 2 * ox) + at(2 * oy + 1, 2 * ox + 1)) / 4.0
                })
            })
            .collect();
        assert_eq!(avg, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn relu_linear_add() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let w = tape.constant(eye);
        let b = tape.constant(Tensor::zeros(&[3]));
        let z = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(z).data(), tape.value(x).data());

        let s = tape.add(x, z).unwrap();
        assert_eq!(tape.value(s).data(), &[-2.0, 0.0, 4.0]);
        let bad = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.add(x, bad).is_err());
    }

    #[test]
    fn relu_zero_subgradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[0.0, 0.0]));
        let p = tape.softmax(a).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);

        let b = tape.constant(t(&[2], &[2f64.ln(), 0.0]));
        let p = tape.softmax(b).unwrap();
        let v = tape.value(p).data();
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-15 && (v[1] - 1.0 / 3.0).abs() < 1e-15);

        let bad = tape.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(tape.softmax(bad).is_err());
    }

    #[test]
    fn backward_linearity_and_square() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(t(&[4], &[1.0, -2.0, 3.0, 0.5]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);

        let zero = tape.constant(Tensor::zeros(&[4]));
        let sq = tape.sq_euclid(x, zero).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::ones(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::full(&[1], 3.0)).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a, b);
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s).unwrap();
        let g = tape.backward(loss).unwrap();
        store.absorb_grads(&tape, &g);
        assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &[2.0]);
    }
}

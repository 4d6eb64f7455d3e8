//! Parameterised conv and linear layers over the tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// He-normal kernel, zero bias. Square `k×k` kernel with "same" padding.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        Self::with_init(store, name, [c_out, c_in, k, k], stride, std, 0.0, rng)
    }

    pub fn with_init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        shape: [usize; 4],
        stride: usize,
        weight_std: f64,
        bias: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), normal_tensor(&shape, weight_std, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::full(&[shape[0]], T::from_f64(bias)))?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad: shape[2] / 2,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn forward_relu<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.forward(tape, store, x)?;
        tape.relu(y)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn with_init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        out: usize,
        inp: usize,
        weight_std: f64,
        bias: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), normal_tensor(&[out, inp], weight_std, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::full(&[out], T::from_f64(bias)))?;
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

pub(crate) fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).expect("finite positive std");
    Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
}

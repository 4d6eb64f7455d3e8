use super::param::ParamStore;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// SGD-with-momentum state: one velocity buffer per parameter, in store order.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub velocities: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParamStore<T>, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0,1), got {momentum}")));
        }
        let velocities = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.tensor.shape()))
            .collect();
        Ok(Self {
            learning_rate,
            momentum,
            velocities,
        })
    }
}

/// `v ← momentum·v + grad; p ← p − lr·v` for every unfrozen parameter.
/// Frozen parameters and their velocities are left untouched. Gradients are
/// cleared afterwards.
pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, state: &mut OptimState<T>) -> Result<()> {
    if state.velocities.len() != params.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("{} velocity buffers for {} parameters", state.velocities.len(), params.len()),
        ));
    }
    for ((_, p), v) in params.iter().zip(&state.velocities) {
        if v.shape() != p.tensor.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("velocity {:?} vs parameter {} {:?}", v.shape(), p.name, p.tensor.shape()),
            ));
        }
        if p.frozen {
            continue;
        }
        match &p.grad {
            None => return Err(Error::MissingGrad(p.name.clone())),
            Some(g) => g.ensure_finite("sgd_step gradient")?,
        }
    }

    let lr = T::from_f64(state.learning_rate);
    let mu = T::from_f64(state.momentum);
    for (p, v) in params.iter_mut().zip(&mut state.velocities) {
        if p.frozen {
            continue;
        }
        let g = p.grad.take().expect("checked above");
        for ((w, vel), &gv) in p.tensor.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vel = mu * *vel + gv;
            *w -= lr * *vel;
        }
    }
    params.clear_grads();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        store.add("p", Tensor::full(&[1], value)).unwrap();
        store
    }

    fn set_grad(store: &mut ParamStore<f64>, g: f64) {
        let id = store.id("p").unwrap();
        store.get_mut(id).grad = Some(Tensor::full(&[1], g));
    }

    #[test]
    fn plain_step() {
        let mut store = single(1.0);
        let mut state = OptimState::new(&store, 0.1, 0.0).unwrap();
        set_grad(&mut store, 2.0);
        sgd_step(&mut store, &mut state).unwrap();
        let p = store.get(store.id("p").unwrap());
        assert!((p.tensor.data()[0] - 0.8).abs() < 1e-12);
        assert!(p.grad.is_none());
    }

    #[test]
    fn momentum_two_steps() {
        let (lr, g) = (0.1, 2.0);
        let mut store = single(1.0);
        let mut state = OptimState::new(&store, lr, 0.9).unwrap();
        for _ in 0..2 {
            set_grad(&mut store, g);
            sgd_step(&mut store, &mut state).unwrap();
        }
        let p = store.get(store.id("p").unwrap()).tensor.data()[0];
        let expected = 1.0 - lr * g * (1.0 + 1.9);
        assert!((p - expected).abs() < 1e-12, "{p} vs {expected}");
    }

    #[test]
    fn frozen_untouched() {
        let mut store = single(1.0);
        let id = store.id("p").unwrap();
        store.get_mut(id).frozen = true;
        let mut state = OptimState::new(&store, 0.1, 0.9).unwrap();
        set_grad(&mut store, 5.0);
        let before = store.get(id).tensor.to_le_bytes();
        sgd_step(&mut store, &mut state).unwrap();
        assert_eq!(before, store.get(id).tensor.to_le_bytes());
        assert_eq!(state.velocities[0].data(), &[0.0]);
    }

    #[test]
    fn missing_grad_is_error() {
        let mut store = single(1.0);
        let mut state = OptimState::new(&store, 0.1, 0.9).unwrap();
        assert!(matches!(sgd_step(&mut store, &mut state), Err(Error::MissingGrad(_))));
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let store = single(1.0);
        assert!(OptimState::new(&store, 0.0, 0.9).is_err());
        assert!(OptimState::new(&store, 0.1, 1.0).is_err());
    }
}

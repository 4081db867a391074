use super::tensor::{Parameter, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment buffers plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Parameter]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update using the gradients stored in `params`.
///
/// Every gradient is checked before any parameter moves, so a failure leaves the model untouched.
pub fn adam_step(params: &mut [Parameter], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Argument(format!("optimizer state tracks {} tensors, model has {}", state.m.len(), params.len())));
    }
    for p in params.iter() {
        if let Some(i) = p.grad.first_non_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in {} at flat index {i}", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2, eps) = (cfg.beta1 as Real, cfg.beta2 as Real, cfg.eps as Real);
    let step_size = (lr / c1) as Real;
    let c2 = c2 as Real;
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            *w -= step_size * *mi / ((*vi / c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: Vec<Real>) -> Parameter {
        let n = v.len();
        Parameter::new("p", Tensor::from_vec(&[n], v).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut ps = vec![param(vec![1.0, -2.0, 3.0])];
        let before = ps[0].value.clone();
        let mut st = AdamState::new(&ps);
        for _ in 0..5 {
            adam_step(&mut ps, &mut st, 1e-2, &AdamConfig::default()).unwrap();
        }
        assert_eq!(ps[0].value, before);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut ps = vec![param(vec![0.0, 0.0])];
        ps[0].grad = Tensor::from_vec(&[2], vec![0.3, -4.0]).unwrap();
        let mut st = AdamState::new(&ps);
        let lr = 1e-3;
        let mut prev = ps[0].value.clone();
        for _ in 0..200 {
            adam_step(&mut ps, &mut st, lr, &AdamConfig::default()).unwrap();
            let d0 = ps[0].value.data()[0] - prev.data()[0];
            let d1 = ps[0].value.data()[1] - prev.data()[1];
            assert!((d0 + lr as Real).abs() < 1e-6 * lr as Real * 10.0);
            assert!((d1 - lr as Real).abs() < 1e-6 * lr as Real * 10.0);
            prev = ps[0].value.clone();
        }
    }

    #[test]
    fn deterministic_updates() {
        let run = || {
            let mut ps = vec![param(vec![0.5, 1.5])];
            let mut st = AdamState::new(&ps);
            for k in 0..10 {
                ps[0].grad = Tensor::from_vec(&[2], vec![0.1 * k as Real, -0.2]).unwrap();
                adam_step(&mut ps, &mut st, 1e-2, &AdamConfig::default()).unwrap();
            }
            (ps, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut ps = vec![param(vec![1.0])];
        ps[0].name = "enc0.conv1.weight".into();
        ps[0].grad.data_mut()[0] = Real::NAN;
        let mut st = AdamState::new(&ps);
        match adam_step(&mut ps, &mut st, 1e-3, &AdamConfig::default()) {
            Err(Error::Numeric(m)) => assert!(m.contains("enc0.conv1.weight")),
            other => panic!("{other:?}"),
        }
        assert_eq!(ps[0].value.data(), &[1.0]);
    }
}

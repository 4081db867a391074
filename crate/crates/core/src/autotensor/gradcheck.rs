//! Central finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{conv3d_backward, conv3d_forward};
use super::layers::{
    concat_channels, maxpool2_spatial_backward, maxpool2_spatial_forward, mse_loss_backward, mse_loss_forward, relu_backward, relu_forward,
    split_channels, upsample2_nearest_backward, upsample2_nearest_forward,
};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Perturbation for central differences.
pub const GRADCHECK_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Coordinate {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub tolerance: f64,
    /// Largest errors first.
    pub worst: Vec<Coordinate>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let listing: Vec<String> = self
            .worst
            .iter()
            .map(|c| format!("{}[{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}", c.tensor, c.index, c.analytic, c.numeric, c.rel_error))
            .collect();
        Err(Error::Numeric(format!(
            "gradcheck max relative error {:.3e} exceeds {:.1e}; worst: {}",
            self.max_rel_error,
            self.tolerance,
            listing.join("; ")
        )))
    }
}

/// max(|a−n| / max(|a|, |n|, 1e-8))
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `grads(inputs)` against central differences of `loss` for every coordinate of every named input.
pub fn gradcheck<L, G>(inputs: &[(String, Tensor)], loss: L, grads: G, tolerance: f64) -> Result<GradcheckReport>
where
    L: Fn(&[Tensor]) -> Result<f64>,
    G: Fn(&[Tensor]) -> Result<Vec<Tensor>>,
{
    if std::mem::size_of::<Real>() < 8 {
        return Err(Error::Argument("gradcheck requires the 64-bit tensor build".into()));
    }
    let mut tensors: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let analytic = grads(&tensors)?;
    if analytic.len() != tensors.len() {
        return Err(Error::Argument(format!("{} gradients for {} inputs", analytic.len(), tensors.len())));
    }
    let mut coords = Vec::new();
    for ti in 0..tensors.len() {
        if analytic[ti].shape() != tensors[ti].shape() {
            return Err(Error::Argument(format!("gradient shape mismatch for {}", inputs[ti].0)));
        }
        for i in 0..tensors[ti].len() {
            let orig = tensors[ti].data()[i];
            tensors[ti].data_mut()[i] = orig + GRADCHECK_EPS as Real;
            let up = loss(&tensors)?;
            tensors[ti].data_mut()[i] = orig - GRADCHECK_EPS as Real;
            let down = loss(&tensors)?;
            tensors[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * GRADCHECK_EPS);
            let a = analytic[ti].data()[i] as f64;
            coords.push(Coordinate { tensor: inputs[ti].0.clone(), index: i, analytic: a, numeric, rel_error: relative_error(a, numeric) });
        }
    }
    let checked = coords.len();
    coords.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    coords.truncate(5);
    Ok(GradcheckReport { max_rel_error: coords.first().map_or(0.0, |c| c.rel_error), checked, tolerance, worst: coords })
}

/// Gradient checks of every layer used by the network on small seeded inputs, with the
/// scalar loss Σ r·f(x) for a fixed random cotangent r (MSE is checked directly).
pub fn layer_gradchecks(seed: u64, tolerance: f64) -> Result<Vec<(String, GradcheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = |shape: &[usize], lo: f64, hi: f64| {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi) as Real).collect())
    };
    let project = |y: &Tensor, r: &Tensor| y.dot(r);
    let mut out = Vec::new();

    let (x, w, b) = (random(&[2, 2, 4, 5, 5], -1.0, 1.0)?, random(&[3, 2, 3, 3, 3], -0.5, 0.5)?, random(&[3], -0.5, 0.5)?);
    let r = random(&[2, 3, 4, 5, 5], -1.0, 1.0)?;
    let named = vec![("input".to_string(), x), ("weight".to_string(), w), ("bias".to_string(), b)];
    let rep = gradcheck(
        &named,
        |t| Ok(project(&conv3d_forward(&t[0], &t[1], &t[2])?, &r)),
        |t| {
            let g = conv3d_backward(&r, &t[0], &t[1])?;
            Ok(vec![g.input, g.weight, g.bias])
        },
        tolerance,
    )?;
    out.push(("conv3d".to_string(), rep));

    // distinct values spaced far beyond the perturbation keep every window's argmax stable
    let n = 2 * 3 * 2 * 4 * 4;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)));
    let x = Tensor::from_vec(&[2, 3, 2, 4, 4], order.iter().map(|&k| k as Real * 0.01).collect())?;
    let r = random(&[2, 3, 2, 2, 2], -1.0, 1.0)?;
    let rep = gradcheck(
        &[("input".to_string(), x)],
        |t| Ok(project(&maxpool2_spatial_forward(&t[0])?.output, &r)),
        |t| Ok(vec![maxpool2_spatial_backward(&r, &maxpool2_spatial_forward(&t[0])?)?]),
        tolerance,
    )?;
    out.push(("maxpool2".to_string(), rep));

    // magnitudes at least 0.1 keep inputs away from the kink
    let x = random(&[1, 2, 3, 4, 4], 0.1, 1.0)?;
    let signs = random(&[1, 2, 3, 4, 4], -1.0, 1.0)?;
    let x = Tensor::from_vec(x.shape(), x.data().iter().zip(signs.data()).map(|(&v, &s)| if s < 0.0 { -v } else { v }).collect())?;
    let r = random(&[1, 2, 3, 4, 4], -1.0, 1.0)?;
    let rep = gradcheck(
        &[("input".to_string(), x)],
        |t| Ok(project(&relu_forward(&t[0]), &r)),
        |t| Ok(vec![relu_backward(&r, &relu_forward(&t[0]))]),
        tolerance,
    )?;
    out.push(("relu".to_string(), rep));

    let x = random(&[1, 2, 2, 3, 3], -1.0, 1.0)?;
    let r = random(&[1, 2, 2, 6, 6], -1.0, 1.0)?;
    let rep = gradcheck(
        &[("input".to_string(), x)],
        |t| Ok(project(&upsample2_nearest_forward(&t[0])?, &r)),
        |_| Ok(vec![upsample2_nearest_backward(&r)?]),
        tolerance,
    )?;
    out.push(("upsample2".to_string(), rep));

    let (a, b) = (random(&[1, 2, 2, 3, 3], -1.0, 1.0)?, random(&[1, 3, 2, 3, 3], -1.0, 1.0)?);
    let r = random(&[1, 5, 2, 3, 3], -1.0, 1.0)?;
    let rep = gradcheck(
        &[("a".to_string(), a), ("b".to_string(), b)],
        |t| Ok(project(&concat_channels(&t[0], &t[1])?, &r)),
        |_| {
            let (ga, gb) = split_channels(&r, 2)?;
            Ok(vec![ga, gb])
        },
        tolerance,
    )?;
    out.push(("concat".to_string(), rep));

    let (p, y) = (random(&[2, 3, 4, 4], -1.0, 2.0)?, random(&[2, 3, 4, 4], -1.0, 2.0)?);
    let rep =
        gradcheck(&[("pred".to_string(), p)], |t| mse_loss_forward(&t[0], &y), |t| Ok(vec![mse_loss_backward(&t[0], &y)?]), tolerance)?;
    out.push(("mse".to_string(), rep));
    Ok(out)
}

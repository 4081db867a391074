//! Pointwise, pooling, resampling and loss layers used by the U-Net.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Routes `grad_y` through the units whose forward output was positive.
pub fn relu_backward(grad_y: &Tensor, y: &Tensor) -> Tensor {
    let data = grad_y.data().iter().zip(y.data()).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect();
    Tensor::from_vec(grad_y.shape(), data).expect("shape preserved")
}

/// 2×2 max pooling over H and W; T untouched. Keeps the flat argmax of every window.
#[derive(Debug, Clone)]
pub struct MaxPool {
    pub output: Tensor,
    pub argmax: Vec<usize>,
    input_shape: Vec<usize>,
}

pub fn maxpool2_spatial_forward(x: &Tensor) -> Result<MaxPool> {
    x.expect_rank(5, "maxpool2_spatial")?;
    let s = x.shape();
    let (outer, h, w) = (s[0] * s[1] * s[2], s[3], s[4]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Argument(format!("maxpool needs even H and W, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(outer * ho * wo);
    let mut argmax = Vec::with_capacity(outer * ho * wo);
    let d = x.data();
    for p in 0..outer {
        let base = p * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let k = base + (2 * i + di) * w + 2 * j + dj;
                    if d[k] > d[best] {
                        best = k;
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
    }
    Ok(MaxPool { output: Tensor::from_vec(&[s[0], s[1], s[2], ho, wo], out)?, argmax, input_shape: s.to_vec() })
}

pub fn maxpool2_spatial_backward(grad_y: &Tensor, pool: &MaxPool) -> Result<Tensor> {
    if grad_y.shape() != pool.output.shape() {
        return Err(Error::Argument(format!("maxpool grad shape {:?}, expected {:?}", grad_y.shape(), pool.output.shape())));
    }
    let mut gx = Tensor::zeros(&pool.input_shape);
    let g = gx.data_mut();
    for (&k, &v) in pool.argmax.iter().zip(grad_y.data()) {
        g[k] += v;
    }
    Ok(gx)
}

/// Nearest-neighbour ×2 upsampling over H and W.
pub fn upsample2_nearest_forward(x: &Tensor) -> Result<Tensor> {
    x.expect_rank(5, "upsample2_nearest")?;
    let s = x.shape();
    let (outer, h, w) = (s[0] * s[1] * s[2], s[3], s[4]);
    let mut out = Vec::with_capacity(outer * 4 * h * w);
    let d = x.data();
    for p in 0..outer {
        for i in 0..2 * h {
            let row = &d[p * h * w + (i / 2) * w..][..w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Tensor::from_vec(&[s[0], s[1], s[2], 2 * h, 2 * w], out)
}

pub fn upsample2_nearest_backward(grad_y: &Tensor) -> Result<Tensor> {
    grad_y.expect_rank(5, "upsample2_nearest backward")?;
    let s = grad_y.shape();
    if s[3] % 2 != 0 || s[4] % 2 != 0 {
        return Err(Error::Argument(format!("upsample gradient has odd extent {:?}", s)));
    }
    let (outer, h, w) = (s[0] * s[1] * s[2], s[3] / 2, s[4] / 2);
    let g = grad_y.data();
    let mut out = vec![0.0 as Real; outer * h * w];
    for p in 0..outer {
        for i in 0..2 * h {
            for j in 0..2 * w {
                out[p * h * w + (i / 2) * w + j / 2] += g[p * 4 * h * w + i * 2 * w + j];
            }
        }
    }
    Tensor::from_vec(&[s[0], s[1], s[2], h, w], out)
}

/// Stacks `a` and `b` along axis 1.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(Error::Argument(format!("cannot concatenate {sa:?} with {sb:?} along channels")));
    }
    let inner: usize = sa[2..].iter().product();
    let (ca, cb) = (sa[1] * inner, sb[1] * inner);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for n in 0..sa[0] {
        out.extend_from_slice(&a.data()[n * ca..][..ca]);
        out.extend_from_slice(&b.data()[n * cb..][..cb]);
    }
    let mut shape = sa.to_vec();
    shape[1] += sb[1];
    Tensor::from_vec(&shape, out)
}

/// Splits a channel-concatenated gradient back into the parts of width `ca` and the remainder.
pub fn split_channels(g: &Tensor, ca: usize) -> Result<(Tensor, Tensor)> {
    let s = g.shape();
    if s.len() < 2 || ca == 0 || ca >= s[1] {
        return Err(Error::Argument(format!("cannot split {s:?} at channel {ca}")));
    }
    let inner: usize = s[2..].iter().product();
    let cb = s[1] - ca;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for n in 0..s[0] {
        let block = &g.data()[n * s[1] * inner..][..s[1] * inner];
        a.extend_from_slice(&block[..ca * inner]);
        b.extend_from_slice(&block[ca * inner..]);
    }
    let mut sa = s.to_vec();
    sa[1] = ca;
    let mut sb = s.to_vec();
    sb[1] = cb;
    Ok((Tensor::from_vec(&sa, a)?, Tensor::from_vec(&sb, b)?))
}

/// Mean over all elements of (pred − target)².
pub fn mse_loss_forward(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Argument(format!("mse shapes differ: {:?} vs {:?}", pred.shape(), target.shape())));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

pub fn mse_loss_backward(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::Argument("mse shapes differ".into()));
    }
    let scale = 2.0 / pred.len() as Real;
    let data = pred.data().iter().zip(target.data()).map(|(&p, &t)| scale * (p - t)).collect();
    Tensor::from_vec(pred.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_on_negatives() {
        let x = Tensor::from_vec(&[1, 4], vec![-1.0, -2.0, -0.5, -3.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.max_abs(), 0.0);
        let g = relu_backward(&Tensor::full(&[1, 4], 1.0), &y);
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn mse_identity_case() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(mse_loss_forward(&x, &x).unwrap(), 0.0);
        assert_eq!(mse_loss_backward(&x, &x).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn pool_then_upsample_constant() {
        let x = Tensor::full(&[1, 2, 3, 4, 6], 2.5);
        let p = maxpool2_spatial_forward(&x).unwrap();
        assert_eq!(p.output.shape(), &[1, 2, 3, 2, 3]);
        assert_eq!(upsample2_nearest_forward(&p.output).unwrap(), x);
    }

    #[test]
    fn pool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(&[1, 1, 1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let p = maxpool2_spatial_forward(&x).unwrap();
        assert_eq!(p.output.data(), &[5.0]);
        let g = maxpool2_spatial_backward(&Tensor::full(&[1, 1, 1, 1, 1], 7.0), &p).unwrap();
        assert_eq!(g.data(), &[0.0, 7.0, 0.0, 0.0]);
        assert!(maxpool2_spatial_forward(&Tensor::zeros(&[1, 1, 1, 3, 2])).is_err());
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let g = Tensor::from_vec(&[1, 1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(upsample2_nearest_backward(&g).unwrap().data(), &[10.0]);
    }

    #[test]
    fn concat_split_inverse() {
        let a = Tensor::from_vec(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2, 2], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]);
        let (a2, b2) = split_channels(&c, 1).unwrap();
        assert_eq!((a2, b2), (a, b));
    }
}

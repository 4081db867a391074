//! Stride-1 3D convolution over `[B, C, T, H, W]` tensors.
//!
//! Every output element accumulates its bias first and then the taps in
//! (input channel, dt, dh, dw) order, whichever thread computes it, so the
//! results are bitwise reproducible.

use rayon::prelude::*;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    cin: usize,
    cout: usize,
    dims: [usize; 3],
    kernel: [usize; 3],
    pad: [usize; 3],
    out: [usize; 3],
}

impl Geometry {
    fn new(input: &[usize], weight: &[usize], pad: [usize; 3]) -> Result<Self> {
        if input.len() != 5 || weight.len() != 5 {
            return Err(Error::Argument(format!("conv3d expects rank-5 input and weight, got {input:?} and {weight:?}")));
        }
        if input[1] != weight[1] {
            return Err(Error::Argument(format!("conv3d channel mismatch: input has {}, weight expects {}", input[1], weight[1])));
        }
        let dims = [input[2], input[3], input[4]];
        let kernel = [weight[2], weight[3], weight[4]];
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = dims[a] + 2 * pad[a];
            if kernel[a] == 0 || kernel[a] > padded {
                return Err(Error::Argument(format!("kernel {kernel:?} does not fit input {dims:?} with padding {pad:?}")));
            }
            out[a] = padded - kernel[a] + 1;
        }
        Ok(Geometry { batch: input[0], cin: input[1], cout: weight[0], dims, kernel, pad, out })
    }

    fn in_volume(&self) -> usize {
        self.dims.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.out.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn out_shape(&self) -> [usize; 5] {
        [self.batch, self.cout, self.out[0], self.out[1], self.out[2]]
    }
}

/// Output indices `o` in `[0, out)` whose source `o + d - p` lies in `[0, len)`.
#[inline]
fn out_range(len: usize, out: usize, d: usize, p: usize) -> (usize, usize) {
    let lo = p.saturating_sub(d);
    let hi = (len + p).saturating_sub(d).min(out);
    (lo, hi.max(lo))
}

/// Input indices `i` in `[0, len)` whose output `i + p - d` lies in `[0, out)`.
#[inline]
fn in_range(len: usize, out: usize, d: usize, p: usize) -> (usize, usize) {
    let lo = d.saturating_sub(p);
    let hi = (out + d).saturating_sub(p).min(len);
    (lo, hi.max(lo))
}

fn same_padding(weight: &Tensor) -> Result<[usize; 3]> {
    weight.expect_rank(5, "conv3d weight")?;
    let k = &weight.shape()[2..];
    if k.iter().any(|&e| e % 2 == 0) {
        return Err(Error::Argument(format!("same-size conv3d needs odd kernel extents, got {k:?}")));
    }
    Ok([k[0] / 2, k[1] / 2, k[2] / 2])
}

/// Same-size convolution with zero padding of half the (odd) kernel extent.
pub fn conv3d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let pad = same_padding(weight)?;
    conv3d_forward_padded(input, weight, bias, pad)
}

/// Convolution with explicit zero padding per (T, H, W) axis.
pub fn conv3d_forward_padded(input: &Tensor, weight: &Tensor, bias: &Tensor, pad: [usize; 3]) -> Result<Tensor> {
    let g = Geometry::new(input.shape(), weight.shape(), pad)?;
    if bias.shape() != [g.cout] {
        return Err(Error::Argument(format!("conv3d bias shape {:?} does not match {} output channels", bias.shape(), g.cout)));
    }
    let (x, w, bv) = (input.data(), weight.data(), bias.data());
    let [t_len, h_len, w_len] = g.dims;
    let [_, kh, kw] = g.kernel;
    let [pt, ph, pw] = g.pad;
    let [to, ho, wo] = g.out;
    let (si, so, taps) = (g.in_volume(), g.out_volume(), g.taps());

    let mut out = vec![0.0 as Real; g.batch * g.cout * so];
    out.par_chunks_mut(so).enumerate().for_each(|(bo, plane)| {
        let (b, o) = (bo / g.cout, bo % g.cout);
        plane.fill(bv[o]);
        for c in 0..g.cin {
            let vol = &x[(b * g.cin + c) * si..][..si];
            let wk = &w[(o * g.cin + c) * taps..][..taps];
            for (tap, &wv) in wk.iter().enumerate() {
                let (dt, dh, dw) = (tap / (kh * kw), (tap / kw) % kh, tap % kw);
                let (t_lo, t_hi) = out_range(t_len, to, dt, pt);
                let (h_lo, h_hi) = out_range(h_len, ho, dh, ph);
                let (w_lo, w_hi) = out_range(w_len, wo, dw, pw);
                if w_lo >= w_hi {
                    continue;
                }
                let n = w_hi - w_lo;
                for t in t_lo..t_hi {
                    let ti = t + dt - pt;
                    for h in h_lo..h_hi {
                        let hi = h + dh - ph;
                        let orow = &mut plane[(t * ho + h) * wo + w_lo..][..n];
                        let irow = &vol[(ti * h_len + hi) * w_len + w_lo + dw - pw..][..n];
                        for (ov, &iv) in orow.iter_mut().zip(irow) {
                            *ov += wv * iv;
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(&g.out_shape(), out)
}

/// Gradients of a convolution with respect to its three inputs.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv3d_backward(grad_out: &Tensor, input: &Tensor, weight: &Tensor) -> Result<ConvGrads> {
    let pad = same_padding(weight)?;
    conv3d_backward_padded(grad_out, input, weight, pad)
}

/// Adjoint of [`conv3d_forward_padded`].
pub fn conv3d_backward_padded(grad_out: &Tensor, input: &Tensor, weight: &Tensor, pad: [usize; 3]) -> Result<ConvGrads> {
    let g = Geometry::new(input.shape(), weight.shape(), pad)?;
    if grad_out.shape() != g.out_shape() {
        return Err(Error::Argument(format!("conv3d grad_out shape {:?}, expected {:?}", grad_out.shape(), g.out_shape())));
    }
    Ok(ConvGrads {
        input: backward_input(&g, grad_out.data(), weight.data())?,
        weight: backward_weight(&g, grad_out.data(), input.data())?,
        bias: backward_bias(&g, grad_out.data())?,
    })
}

fn backward_input(g: &Geometry, gy: &[Real], w: &[Real]) -> Result<Tensor> {
    let [t_len, h_len, w_len] = g.dims;
    let [_, kh, kw] = g.kernel;
    let [pt, ph, pw] = g.pad;
    let [to, ho, wo] = g.out;
    let (si, so, taps) = (g.in_volume(), g.out_volume(), g.taps());

    let mut gx = vec![0.0 as Real; g.batch * g.cin * si];
    gx.par_chunks_mut(si).enumerate().for_each(|(bc, vol)| {
        let (b, c) = (bc / g.cin, bc % g.cin);
        for o in 0..g.cout {
            let plane = &gy[(b * g.cout + o) * so..][..so];
            let wk = &w[(o * g.cin + c) * taps..][..taps];
            for (tap, &wv) in wk.iter().enumerate() {
                let (dt, dh, dw) = (tap / (kh * kw), (tap / kw) % kh, tap % kw);
                let (t_lo, t_hi) = in_range(t_len, to, dt, pt);
                let (h_lo, h_hi) = in_range(h_len, ho, dh, ph);
                let (w_lo, w_hi) = in_range(w_len, wo, dw, pw);
                if w_lo >= w_hi {
                    continue;
                }
                let n = w_hi - w_lo;
                for t in t_lo..t_hi {
                    let tt = t + pt - dt;
                    for h in h_lo..h_hi {
                        let hh = h + ph - dh;
                        let xrow = &mut vol[(t * h_len + h) * w_len + w_lo..][..n];
                        let yrow = &plane[(tt * ho + hh) * wo + w_lo + pw - dw..][..n];
                        for (xv, &yv) in xrow.iter_mut().zip(yrow) {
                            *xv += wv * yv;
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(&[g.batch, g.cin, t_len, h_len, w_len], gx)
}

fn backward_weight(g: &Geometry, gy: &[Real], x: &[Real]) -> Result<Tensor> {
    let [t_len, h_len, w_len] = g.dims;
    let [_, kh, kw] = g.kernel;
    let [pt, ph, pw] = g.pad;
    let [to, ho, wo] = g.out;
    let (si, so, taps) = (g.in_volume(), g.out_volume(), g.taps());

    let mut gw = vec![0.0 as Real; g.cout * g.cin * taps];
    gw.par_chunks_mut(g.cin * taps).enumerate().for_each(|(o, wo_block)| {
        for c in 0..g.cin {
            for tap in 0..taps {
                let (dt, dh, dw) = (tap / (kh * kw), (tap / kw) % kh, tap % kw);
                let (t_lo, t_hi) = out_range(t_len, to, dt, pt);
                let (h_lo, h_hi) = out_range(h_len, ho, dh, ph);
                let (w_lo, w_hi) = out_range(w_len, wo, dw, pw);
                let mut acc: Real = 0.0;
                if w_lo < w_hi {
                    let n = w_hi - w_lo;
                    for b in 0..g.batch {
                        let plane = &gy[(b * g.cout + o) * so..][..so];
                        let vol = &x[(b * g.cin + c) * si..][..si];
                        for t in t_lo..t_hi {
                            let ti = t + dt - pt;
                            for h in h_lo..h_hi {
                                let hi = h + dh - ph;
                                let yrow = &plane[(t * ho + h) * wo + w_lo..][..n];
                                let xrow = &vol[(ti * h_len + hi) * w_len + w_lo + dw - pw..][..n];
                                acc += yrow.iter().zip(xrow).map(|(a, b)| a * b).sum::<Real>();
                            }
                        }
                    }
                }
                wo_block[c * taps + tap] = acc;
            }
        }
    });
    Tensor::from_vec(&[g.cout, g.cin, g.kernel[0], g.kernel[1], g.kernel[2]], gw)
}

fn backward_bias(g: &Geometry, gy: &[Real]) -> Result<Tensor> {
    let so = g.out_volume();
    let gb = (0..g.cout).map(|o| (0..g.batch).map(|b| gy[(b * g.cout + o) * so..][..so].iter().sum::<Real>()).sum()).collect();
    Tensor::from_vec(&[g.cout], gb)
}

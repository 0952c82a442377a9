//! 2-D convolution and frequency-axis max pooling.
//!
//! Layouts follow the rest of the model: `[C x F x T]` feature maps in
//! row-major order, stride fixed at 1x1. Forward and backward parallelize
//! over channels; each channel is computed by a single sequential loop, so
//! results do not depend on the worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::Tensor;

/// Spatial padding mode for [`Tensor::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad so the spatial dimensions are preserved (requires odd kernels).
    Same,
    /// No padding; output shrinks by `kernel - 1` per axis.
    Valid,
}

/// Shift-window bounds: the range of output index `i` for which
/// `i + u - pad` lands inside `[0, extent)`.
fn overlap(extent: usize, out_extent: usize, u: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(u);
    let hi = (extent + pad - u).min(out_extent);
    (lo, hi.max(lo))
}

impl Tensor {
    /// 2-D convolution of `[C_in x H x W]` with kernels
    /// `[C_out x C_in x kH x kW]` and bias `[C_out]`, stride 1x1.
    pub fn conv2d(&self, kernels: &Tensor, bias: &Tensor, padding: Padding) -> Result<Tensor> {
        let xs = self.shape();
        let ks = kernels.shape();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, kernels {:?}", xs, ks),
            ));
        }
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let (c_out, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels but kernels expect {}", c_in, kc),
            ));
        }
        if bias.shape() != [c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {} output channels", bias.shape(), c_out),
            ));
        }
        let (ph, pw, oh, ow) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::shape(
                        "conv2d",
                        format!("same padding requires odd kernel, got {}x{}", kh, kw),
                    ));
                }
                ((kh - 1) / 2, (kw - 1) / 2, h, w)
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::shape(
                        "conv2d",
                        format!("kernel {}x{} larger than input {}x{}", kh, kw, h, w),
                    ));
                }
                (0, 0, h - kh + 1, w - kw + 1)
            }
        };

        let x = self.data.clone();
        let k = kernels.data.clone();
        let b = bias.data.clone();

        let mut out = vec![0.0; c_out * oh * ow];
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(co, plane)| {
            plane.fill(b[co]);
            for ci in 0..c_in {
                let xplane = &x[ci * h * w..(ci + 1) * h * w];
                for u in 0..kh {
                    let (i0, i1) = overlap(h, oh, u, ph);
                    for v in 0..kw {
                        let weight = k[((co * c_in + ci) * kh + u) * kw + v];
                        if weight == 0.0 {
                            continue;
                        }
                        let (j0, j1) = overlap(w, ow, v, pw);
                        for i in i0..i1 {
                            let xrow = &xplane[(i + u - ph) * w..(i + u - ph + 1) * w];
                            let orow = &mut plane[i * ow..(i + 1) * ow];
                            for j in j0..j1 {
                                orow[j] += weight * xrow[j + v - pw];
                            }
                        }
                    }
                }
            }
        });

        let dims = ConvDims {
            c_in,
            c_out,
            h,
            w,
            oh,
            ow,
            kh,
            kw,
            ph,
            pw,
        };
        Tensor::from_op(
            &[self, kernels, bias],
            vec![c_out, oh, ow],
            out,
            move |g, sinks| {
                sinks.add(0, |buf| conv2d_grad_input(buf, g, &k, &dims));
                sinks.add(1, |buf| conv2d_grad_kernels(buf, g, &x, &dims));
                sinks.add(2, |buf| {
                    for co in 0..dims.c_out {
                        buf[co] += g[co * dims.oh * dims.ow..(co + 1) * dims.oh * dims.ow]
                            .iter()
                            .sum::<f64>();
                    }
                });
            },
        )
    }

    /// Max pooling over the frequency axis of a `[C x F x T]` tensor. The
    /// time axis is untouched; the gradient routes to the first maximum of
    /// each window.
    pub fn maxpool_freq(&self, pool: usize) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 3 {
            return Err(Error::shape("maxpool_freq", format!("{:?}", xs)));
        }
        let (c, f, t) = (xs[0], xs[1], xs[2]);
        if pool == 0 || f % pool != 0 {
            return Err(Error::shape(
                "maxpool_freq",
                format!("{} frequency bands not divisible by pool {}", f, pool),
            ));
        }
        let fo = f / pool;
        let x = self.data();
        let mut out = vec![0.0; c * fo * t];
        let mut argmax = vec![0u32; c * fo * t];
        for ci in 0..c {
            for fi in 0..fo {
                for ti in 0..t {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_r = 0u32;
                    for r in 0..pool {
                        let v = x[(ci * f + fi * pool + r) * t + ti];
                        if v > best {
                            best = v;
                            best_r = r as u32;
                        }
                    }
                    out[(ci * fo + fi) * t + ti] = best;
                    argmax[(ci * fo + fi) * t + ti] = best_r;
                }
            }
        }
        Tensor::from_op(&[self], vec![c, fo, t], out, move |g, sinks| {
            sinks.add(0, |buf| {
                for ci in 0..c {
                    for fi in 0..fo {
                        for ti in 0..t {
                            let o = (ci * fo + fi) * t + ti;
                            let r = argmax[o] as usize;
                            buf[(ci * f + fi * pool + r) * t + ti] += g[o];
                        }
                    }
                }
            });
        })
    }

    /// Add a per-channel bias to a `[C x H x W]` tensor.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 3 || bias.shape() != [xs[0]] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("input {:?}, bias {:?}", xs, bias.shape()),
            ));
        }
        let (c, plane) = (xs[0], xs[1] * xs[2]);
        let b = bias.data.clone();
        let mut out = self.data().to_vec();
        for ci in 0..c {
            for v in &mut out[ci * plane..(ci + 1) * plane] {
                *v += b[ci];
            }
        }
        Tensor::from_op(&[self, bias], xs.to_vec(), out, move |g, sinks| {
            sinks.add(0, |buf| {
                for (d, &gi) in buf.iter_mut().zip(g) {
                    *d += gi;
                }
            });
            sinks.add(1, |buf| {
                for ci in 0..c {
                    buf[ci] += g[ci * plane..(ci + 1) * plane].iter().sum::<f64>();
                }
            });
        })
    }
}

#[derive(Clone, Copy)]
struct ConvDims {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
}

fn conv2d_grad_input(buf: &mut [f64], g: &[f64], k: &[f64], d: &ConvDims) {
    buf.par_chunks_mut(d.h * d.w).enumerate().for_each(|(ci, dplane)| {
        for co in 0..d.c_out {
            let gplane = &g[co * d.oh * d.ow..(co + 1) * d.oh * d.ow];
            for u in 0..d.kh {
                let (i0, i1) = overlap(d.h, d.oh, u, d.ph);
                for v in 0..d.kw {
                    let weight = k[((co * d.c_in + ci) * d.kh + u) * d.kw + v];
                    if weight == 0.0 {
                        continue;
                    }
                    let (j0, j1) = overlap(d.w, d.ow, v, d.pw);
                    for i in i0..i1 {
                        let grow = &gplane[i * d.ow..(i + 1) * d.ow];
                        let drow =
                            &mut dplane[(i + u - d.ph) * d.w..(i + u - d.ph + 1) * d.w];
                        for j in j0..j1 {
                            drow[j + v - d.pw] += weight * grow[j];
                        }
                    }
                }
            }
        }
    });
}

fn conv2d_grad_kernels(buf: &mut [f64], g: &[f64], x: &[f64], d: &ConvDims) {
    let kplane = d.c_in * d.kh * d.kw;
    buf.par_chunks_mut(kplane).enumerate().for_each(|(co, dk)| {
        let gplane = &g[co * d.oh * d.ow..(co + 1) * d.oh * d.ow];
        for ci in 0..d.c_in {
            let xplane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for u in 0..d.kh {
                let (i0, i1) = overlap(d.h, d.oh, u, d.ph);
                for v in 0..d.kw {
                    let (j0, j1) = overlap(d.w, d.ow, v, d.pw);
                    let mut acc = 0.0;
                    for i in i0..i1 {
                        let grow = &gplane[i * d.ow..(i + 1) * d.ow];
                        let xrow = &xplane[(i + u - d.ph) * d.w..(i + u - d.ph + 1) * d.w];
                        for j in j0..j1 {
                            acc += grow[j] * xrow[j + v - d.pw];
                        }
                    }
                    dk[(ci * d.kh + u) * d.kw + v] += acc;
                }
            }
        }
    });
}

//! Structural ops: convolutions, resampling, pooling, channel utilities,
//! attention, and the MAE loss.
//!
//! All ops take `[C,H,W]` tensors (no batch axis; batching is a loop over
//! samples). Convolution is cross-correlation, the deep-learning convention.
//! Channel loops parallelize with rayon above a fixed work threshold; the
//! partition is by channel index, so results are bit-identical regardless of
//! thread count.

use rayon::prelude::*;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// MACs below this run single-threaded; tiny tensors are not worth a fork.
const PAR_THRESHOLD: usize = 1 << 18;

fn out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if extent + 2 * pad < k {
        return Err(Error::InvalidArgument(format!(
            "spatial extent {extent} with padding {pad} smaller than kernel {k}"
        )));
    }
    Ok((extent + 2 * pad - k) / stride + 1)
}

fn check_conv_args(k: usize, stride: usize) -> Result<()> {
    if k % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel size must be odd, got {k}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    Ok(())
}

/// One output channel of cross-correlation. `input` holds `ci` channels of
/// `h*w`; `w_c` holds that channel's `ci*k*k` weights.
#[allow(clippy::too_many_arguments)]
fn conv_forward_channel<E: Element>(
    out_c: &mut [E],
    input: &[E],
    w_c: &[E],
    bias: E,
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for v in out_c.iter_mut() {
        *v = bias;
    }
    for c in 0..ci {
        let in_c = &input[c * h * w..(c + 1) * h * w];
        let w_k = &w_c[c * k * k..(c + 1) * k * k];
        for ky in 0..k {
            for oy in 0..oh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let in_row = &in_c[iy as usize * w..(iy as usize + 1) * w];
                let out_row = &mut out_c[oy * ow..(oy + 1) * ow];
                for kx in 0..k {
                    let wv = w_k[ky * k + kx];
                    let kxp = kx as isize - pad as isize;
                    let (lo, hi) = ox_range(kxp, w, stride, ow);
                    if lo > hi {
                        continue;
                    }
                    if stride == 1 {
                        let ibase = (lo as isize + kxp) as usize;
                        let n = hi - lo + 1;
                        let irow = &in_row[ibase..ibase + n];
                        let orow = &mut out_row[lo..lo + n];
                        for i in 0..n {
                            orow[i] += wv * irow[i];
                        }
                    } else {
                        for ox in lo..=hi {
                            let ix = (ox * stride) as isize + kxp;
                            out_row[ox] += wv * in_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Valid output-column range for a kernel column offset `kxp = kx - pad`.
fn ox_range(kxp: isize, w: usize, stride: usize, ow: usize) -> (usize, usize) {
    let lo = if kxp >= 0 {
        0
    } else {
        ((-kxp) as usize + stride - 1) / stride
    };
    let hi_num = w as isize - 1 - kxp;
    if hi_num < 0 {
        return (1, 0);
    }
    let hi = (hi_num as usize / stride).min(ow.saturating_sub(1));
    (lo, hi)
}

/// Weight gradient for one output channel.
#[allow(clippy::too_many_arguments)]
fn conv_backward_weight_channel<E: Element>(
    gw_c: &mut [E],
    gout_c: &[E],
    input: &[E],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for c in 0..ci {
        let in_c = &input[c * h * w..(c + 1) * h * w];
        let gw_k = &mut gw_c[c * k * k..(c + 1) * k * k];
        for ky in 0..k {
            for oy in 0..oh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let in_row = &in_c[iy as usize * w..(iy as usize + 1) * w];
                let g_row = &gout_c[oy * ow..(oy + 1) * ow];
                for kx in 0..k {
                    let kxp = kx as isize - pad as isize;
                    let (lo, hi) = ox_range(kxp, w, stride, ow);
                    if lo > hi {
                        continue;
                    }
                    let mut acc = E::zero();
                    if stride == 1 {
                        let ibase = (lo as isize + kxp) as usize;
                        let n = hi - lo + 1;
                        let irow = &in_row[ibase..ibase + n];
                        let grow = &g_row[lo..lo + n];
                        for i in 0..n {
                            acc += grow[i] * irow[i];
                        }
                    } else {
                        for ox in lo..=hi {
                            let ix = (ox * stride) as isize + kxp;
                            acc += g_row[ox] * in_row[ix as usize];
                        }
                    }
                    gw_k[ky * k + kx] += acc;
                }
            }
        }
    }
}

/// Input gradient for one input channel, accumulating over all output
/// channels.
#[allow(clippy::too_many_arguments)]
fn conv_backward_input_channel<E: Element>(
    gin_c: &mut [E],
    gout: &[E],
    weight: &[E],
    c: usize,
    co: usize,
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for o in 0..co {
        let g_c = &gout[o * oh * ow..(o + 1) * oh * ow];
        let w_k = &weight[(o * ci + c) * k * k..(o * ci + c + 1) * k * k];
        for ky in 0..k {
            for oy in 0..oh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let gin_row = &mut gin_c[iy as usize * w..(iy as usize + 1) * w];
                let g_row = &g_c[oy * ow..(oy + 1) * ow];
                for kx in 0..k {
                    let wv = w_k[ky * k + kx];
                    let kxp = kx as isize - pad as isize;
                    let (lo, hi) = ox_range(kxp, w, stride, ow);
                    if lo > hi {
                        continue;
                    }
                    if stride == 1 {
                        let ibase = (lo as isize + kxp) as usize;
                        let n = hi - lo + 1;
                        let irow = &mut gin_row[ibase..ibase + n];
                        let grow = &g_row[lo..lo + n];
                        for i in 0..n {
                            irow[i] += wv * grow[i];
                        }
                    } else {
                        for ox in lo..=hi {
                            let ix = (ox * stride) as isize + kxp;
                            gin_row[ix as usize] += wv * g_row[ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of `[Ci,H,W]` with `[Co,Ci,k,k]`, odd square
/// kernels only.
pub fn conv2d<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    let id = input.dims();
    let wd = weight.dims();
    if id.len() != 3 || wd.len() != 4 || wd[2] != wd[3] {
        return Err(Error::shape("conv2d", wd, id));
    }
    let (ci, h, w) = (id[0], id[1], id[2]);
    let (co, k) = (wd[0], wd[2]);
    if wd[1] != ci {
        return Err(Error::shape("conv2d channels", wd, id));
    }
    check_conv_args(k, stride)?;
    if let Some(b) = bias {
        if b.dims() != [co] {
            return Err(Error::shape("conv2d bias", &[co], b.dims()));
        }
    }
    let oh = out_extent(h, k, stride, padding)?;
    let ow = out_extent(w, k, stride, padding)?;

    let mut out = vec![E::zero(); co * oh * ow];
    {
        let iv_guard = input.values();
        let iv: &[E] = &iv_guard;
        let wv_guard = weight.values();
        let wv: &[E] = &wv_guard;
        let bv: Vec<E> = bias.map_or_else(|| vec![E::zero(); co], |b| b.to_vec());
        let bv: &[E] = &bv;
        let macs = co * ci * k * k * oh * ow;
        let run = |(o, out_c): (usize, &mut [E])| {
            conv_forward_channel(
                out_c,
                iv,
                &wv[o * ci * k * k..(o + 1) * ci * k * k],
                bv[o],
                ci,
                h,
                w,
                k,
                stride,
                padding,
                oh,
                ow,
            );
        };
        if macs >= PAR_THRESHOLD {
            out.par_chunks_mut(oh * ow).enumerate().for_each(run);
        } else {
            out.chunks_mut(oh * ow).enumerate().for_each(run);
        }
    }

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(
        "conv2d",
        parents,
        vec![co, oh, ow],
        out,
        Box::new(move |gout, _, parents| {
            let (input, weight) = (&parents[0], &parents[1]);
            let id = input.dims().to_vec();
            let (ci, h, w) = (id[0], id[1], id[2]);
            let co = weight.dims()[0];
            let k = weight.dims()[2];
            let macs = co * ci * k * k * oh * ow;
            if has_bias && parents[2].wants_grad() {
                let mut gb = parents[2].grad_mut();
                for o in 0..co {
                    let mut acc = E::zero();
                    for g in &gout[o * oh * ow..(o + 1) * oh * ow] {
                        acc += *g;
                    }
                    gb[o] += acc;
                }
            }
            if weight.wants_grad() {
                let iv_guard = input.values();
                let iv: &[E] = &iv_guard;
                let mut gw = weight.grad_mut();
                let gw_slice: &mut [E] = &mut gw;
                let run = |(o, gw_c): (usize, &mut [E])| {
                    conv_backward_weight_channel(
                        gw_c,
                        &gout[o * oh * ow..(o + 1) * oh * ow],
                        iv,
                        ci,
                        h,
                        w,
                        k,
                        stride,
                        padding,
                        oh,
                        ow,
                    );
                };
                if macs >= PAR_THRESHOLD {
                    gw_slice.par_chunks_mut(ci * k * k).enumerate().for_each(run);
                } else {
                    gw_slice.chunks_mut(ci * k * k).enumerate().for_each(run);
                }
            }
            if input.wants_grad() {
                let wv_guard = weight.values();
                let wv: &[E] = &wv_guard;
                let mut gi = input.grad_mut();
                let gi_slice: &mut [E] = &mut gi;
                let run = |(c, gin_c): (usize, &mut [E])| {
                    conv_backward_input_channel(
                        gin_c, gout, wv, c, co, ci, h, w, k, stride, padding, oh, ow,
                    );
                };
                if macs >= PAR_THRESHOLD {
                    gi_slice.par_chunks_mut(h * w).enumerate().for_each(run);
                } else {
                    gi_slice.chunks_mut(h * w).enumerate().for_each(run);
                }
            }
        }),
    ))
}

/// Depthwise 2-D cross-correlation: `[C,H,W]` with per-channel `[C,1,k,k]`
/// kernels.
pub fn depthwise_conv2d<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    let id = input.dims();
    let wd = weight.dims();
    if id.len() != 3 || wd.len() != 4 || wd[1] != 1 || wd[2] != wd[3] {
        return Err(Error::shape("depthwise_conv2d", wd, id));
    }
    let (c, h, w) = (id[0], id[1], id[2]);
    let k = wd[2];
    if wd[0] != c {
        return Err(Error::shape("depthwise_conv2d channels", wd, id));
    }
    check_conv_args(k, stride)?;
    if let Some(b) = bias {
        if b.dims() != [c] {
            return Err(Error::shape("depthwise_conv2d bias", &[c], b.dims()));
        }
    }
    let oh = out_extent(h, k, stride, padding)?;
    let ow = out_extent(w, k, stride, padding)?;

    let mut out = vec![E::zero(); c * oh * ow];
    {
        let iv = input.values();
        let wv = weight.values();
        let bv = bias.map(|b| b.to_vec());
        for (ch, out_c) in out.chunks_mut(oh * ow).enumerate() {
            conv_forward_channel(
                out_c,
                &iv[ch * h * w..(ch + 1) * h * w],
                &wv[ch * k * k..(ch + 1) * k * k],
                bv.as_ref().map_or(E::zero(), |b| b[ch]),
                1,
                h,
                w,
                k,
                stride,
                padding,
                oh,
                ow,
            );
        }
    }

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(
        "depthwise_conv2d",
        parents,
        vec![c, oh, ow],
        out,
        Box::new(move |gout, _, parents| {
            let (input, weight) = (&parents[0], &parents[1]);
            let id = input.dims().to_vec();
            let (c, h, w) = (id[0], id[1], id[2]);
            let k = weight.dims()[2];
            if has_bias && parents[2].wants_grad() {
                let mut gb = parents[2].grad_mut();
                for ch in 0..c {
                    let mut acc = E::zero();
                    for g in &gout[ch * oh * ow..(ch + 1) * oh * ow] {
                        acc += *g;
                    }
                    gb[ch] += acc;
                }
            }
            if weight.wants_grad() {
                let iv = input.values();
                let mut gw = weight.grad_mut();
                for ch in 0..c {
                    conv_backward_weight_channel(
                        &mut gw[ch * k * k..(ch + 1) * k * k],
                        &gout[ch * oh * ow..(ch + 1) * oh * ow],
                        &iv[ch * h * w..(ch + 1) * h * w],
                        1,
                        h,
                        w,
                        k,
                        stride,
                        padding,
                        oh,
                        ow,
                    );
                }
            }
            if input.wants_grad() {
                let wv = weight.values();
                let mut gi = input.grad_mut();
                for ch in 0..c {
                    conv_backward_input_channel(
                        &mut gi[ch * h * w..(ch + 1) * h * w],
                        &gout[ch * oh * ow..(ch + 1) * oh * ow],
                        &wv[ch * k * k..(ch + 1) * k * k],
                        0,
                        1,
                        1,
                        h,
                        w,
                        k,
                        stride,
                        padding,
                        oh,
                        ow,
                    );
                }
            }
        }),
    ))
}

/// Nearest-neighbor 2x spatial upsampling.
pub fn upsample_nearest2x<E: Element>(input: &Tensor<E>) -> Result<Tensor<E>> {
    let d = input.dims();
    if d.len() != 3 {
        return Err(Error::shape("upsample_nearest2x", &[0, 0, 0], d));
    }
    let (c, h, w) = (d[0], d[1], d[2]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![E::zero(); c * oh * ow];
    {
        let iv = input.values();
        for ch in 0..c {
            for oy in 0..oh {
                let src_row = &iv[(ch * h + oy / 2) * w..(ch * h + oy / 2 + 1) * w];
                let dst_row = &mut out[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
                for ox in 0..ow {
                    dst_row[ox] = src_row[ox / 2];
                }
            }
        }
    }
    Ok(Tensor::from_op(
        "upsample_nearest2x",
        vec![input.clone()],
        vec![c, oh, ow],
        out,
        Box::new(move |gout, _, parents| {
            let input = &parents[0];
            if !input.wants_grad() {
                return;
            }
            let d = input.dims().to_vec();
            let (c, h, w) = (d[0], d[1], d[2]);
            let (oh, ow) = (2 * h, 2 * w);
            let mut gi = input.grad_mut();
            for ch in 0..c {
                for oy in 0..oh {
                    let g_row = &gout[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
                    let gi_row = &mut gi[(ch * h + oy / 2) * w..(ch * h + oy / 2 + 1) * w];
                    for ox in 0..ow {
                        gi_row[ox / 2] += g_row[ox];
                    }
                }
            }
        }),
    ))
}

/// Learned downsampling: stride-2 convolution. Requires even spatial dims.
pub fn downsample<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let d = input.dims();
    if d.len() != 3 || d[1] % 2 != 0 || d[2] % 2 != 0 {
        return Err(Error::ShapeMismatch {
            context: "downsample requires even spatial dims".into(),
            expected: vec![d[0], d[1] / 2 * 2, d[2] / 2 * 2],
            found: d.to_vec(),
        });
    }
    let k = weight.dims()[2];
    conv2d(input, weight, bias, 2, k / 2)
}

/// Learned upsampling: nearest-neighbor 2x followed by a same-padding
/// convolution, restoring the spatial size `downsample` halved.
pub fn upsample<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let k = weight.dims()[2];
    conv2d(&upsample_nearest2x(input)?, weight, bias, 1, k / 2)
}

/// Global average pool `[C,H,W] -> [C,1,1]`.
pub fn global_avg_pool<E: Element>(input: &Tensor<E>) -> Result<Tensor<E>> {
    let d = input.dims();
    if d.len() != 3 {
        return Err(Error::shape("global_avg_pool", &[0, 0, 0], d));
    }
    let (c, h, w) = (d[0], d[1], d[2]);
    let inv = E::one() / E::from_f64((h * w) as f64);
    let out: Vec<E> = {
        let iv = input.values();
        (0..c)
            .map(|ch| {
                let mut acc = E::zero();
                for v in &iv[ch * h * w..(ch + 1) * h * w] {
                    acc += *v;
                }
                acc * inv
            })
            .collect()
    };
    Ok(Tensor::from_op(
        "global_avg_pool",
        vec![input.clone()],
        vec![c, 1, 1],
        out,
        Box::new(move |gout, _, parents| {
            let input = &parents[0];
            if !input.wants_grad() {
                return;
            }
            let d = input.dims().to_vec();
            let (c, hw) = (d[0], d[1] * d[2]);
            let mut gi = input.grad_mut();
            for ch in 0..c {
                let g = gout[ch] * inv;
                for v in &mut gi[ch * hw..(ch + 1) * hw] {
                    *v += g;
                }
            }
        }),
    ))
}

/// Per-pixel mean over channels `[C,H,W] -> [1,H,W]`.
pub fn channel_mean<E: Element>(input: &Tensor<E>) -> Result<Tensor<E>> {
    let d = input.dims();
    if d.len() != 3 {
        return Err(Error::shape("channel_mean", &[0, 0, 0], d));
    }
    let (c, h, w) = (d[0], d[1], d[2]);
    let inv = E::one() / E::from_f64(c as f64);
    let mut out = vec![E::zero(); h * w];
    {
        let iv = input.values();
        for ch in 0..c {
            for (o, v) in out.iter_mut().zip(&iv[ch * h * w..(ch + 1) * h * w]) {
                *o += *v;
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
    }
    Ok(Tensor::from_op(
        "channel_mean",
        vec![input.clone()],
        vec![1, h, w],
        out,
        Box::new(move |gout, _, parents| {
            let input = &parents[0];
            if !input.wants_grad() {
                return;
            }
            let d = input.dims().to_vec();
            let (c, hw) = (d[0], d[1] * d[2]);
            let mut gi = input.grad_mut();
            for ch in 0..c {
                for (g, v) in gout.iter().zip(&mut gi[ch * hw..(ch + 1) * hw]) {
                    *v += *g * inv;
                }
            }
        }),
    ))
}

/// Concatenate along the channel axis.
pub fn concat_channels<E: Element>(parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
    if parts.is_empty() {
        return Err(Error::InvalidArgument("concat of zero tensors".into()));
    }
    let (h, w) = {
        let d = parts[0].dims();
        if d.len() != 3 {
            return Err(Error::shape("concat_channels", &[0, 0, 0], d));
        }
        (d[1], d[2])
    };
    let mut total_c = 0;
    for p in parts {
        let d = p.dims();
        if d.len() != 3 || d[1] != h || d[2] != w {
            return Err(Error::shape("concat_channels", &[d[0], h, w], d));
        }
        total_c += d[0];
    }
    let mut out = Vec::with_capacity(total_c * h * w);
    for p in parts {
        out.extend_from_slice(&p.values());
    }
    Ok(Tensor::from_op(
        "concat_channels",
        parts.iter().map(|p| (*p).clone()).collect(),
        vec![total_c, h, w],
        out,
        Box::new(move |gout, _, parents| {
            let mut offset = 0;
            for p in parents {
                let n = p.len();
                if p.wants_grad() {
                    let mut gp = p.grad_mut();
                    for (gv, g) in gp.iter_mut().zip(&gout[offset..offset + n]) {
                        *gv += *g;
                    }
                }
                offset += n;
            }
        }),
    ))
}

/// Multiply `[C,H,W]` by a per-channel scale `[C,1,1]`.
pub fn broadcast_mul_channel<E: Element>(x: &Tensor<E>, scale: &Tensor<E>) -> Result<Tensor<E>> {
    let d = x.dims();
    let sd = scale.dims();
    if d.len() != 3 || sd != [d[0], 1, 1] {
        return Err(Error::shape("broadcast_mul_channel", &[d[0], 1, 1], sd));
    }
    let (c, hw) = (d[0], d[1] * d[2]);
    let out: Vec<E> = {
        let xv = x.values();
        let sv = scale.values();
        let mut out = Vec::with_capacity(c * hw);
        for ch in 0..c {
            let s = sv[ch];
            out.extend(xv[ch * hw..(ch + 1) * hw].iter().map(|&v| v * s));
        }
        out
    };
    Ok(Tensor::from_op(
        "broadcast_mul_channel",
        vec![x.clone(), scale.clone()],
        d.to_vec(),
        out,
        Box::new(move |gout, _, parents| {
            let (x, scale) = (&parents[0], &parents[1]);
            let d = x.dims().to_vec();
            let (c, hw) = (d[0], d[1] * d[2]);
            if x.wants_grad() {
                let sv = scale.values();
                let mut gx = x.grad_mut();
                for ch in 0..c {
                    let s = sv[ch];
                    for (gv, g) in gx[ch * hw..(ch + 1) * hw].iter_mut().zip(&gout[ch * hw..]) {
                        *gv += *g * s;
                    }
                }
            }
            if scale.wants_grad() {
                let xv = x.values();
                let mut gs = scale.grad_mut();
                for ch in 0..c {
                    let mut acc = E::zero();
                    for (g, v) in gout[ch * hw..(ch + 1) * hw].iter().zip(&xv[ch * hw..]) {
                        acc += *g * *v;
                    }
                    gs[ch] += acc;
                }
            }
        }),
    ))
}

/// Multiply `[C,H,W]` by a per-pixel map `[1,H,W]`, broadcast over channels.
pub fn broadcast_mul_map<E: Element>(x: &Tensor<E>, map: &Tensor<E>) -> Result<Tensor<E>> {
    let d = x.dims();
    let md = map.dims();
    if d.len() != 3 || md != [1, d[1], d[2]] {
        return Err(Error::shape("broadcast_mul_map", &[1, d[1], d[2]], md));
    }
    let (c, hw) = (d[0], d[1] * d[2]);
    let out: Vec<E> = {
        let xv = x.values();
        let mv = map.values();
        let mut out = Vec::with_capacity(c * hw);
        for ch in 0..c {
            out.extend(
                xv[ch * hw..(ch + 1) * hw]
                    .iter()
                    .zip(mv.iter())
                    .map(|(&v, &m)| v * m),
            );
        }
        out
    };
    Ok(Tensor::from_op(
        "broadcast_mul_map",
        vec![x.clone(), map.clone()],
        d.to_vec(),
        out,
        Box::new(move |gout, _, parents| {
            let (x, map) = (&parents[0], &parents[1]);
            let d = x.dims().to_vec();
            let (c, hw) = (d[0], d[1] * d[2]);
            if x.wants_grad() {
                let mv = map.values();
                let mut gx = x.grad_mut();
                for ch in 0..c {
                    for i in 0..hw {
                        gx[ch * hw + i] += gout[ch * hw + i] * mv[i];
                    }
                }
            }
            if map.wants_grad() {
                let xv = x.values();
                let mut gm = map.grad_mut();
                for ch in 0..c {
                    for i in 0..hw {
                        gm[i] += gout[ch * hw + i] * xv[ch * hw + i];
                    }
                }
            }
        }),
    ))
}

/// Mean absolute error as a scalar graph node.
pub fn mae_loss<E: Element>(pred: &Tensor<E>, target: &Tensor<E>) -> Result<Tensor<E>> {
    Ok(pred.sub(target)?.abs().mean_all())
}

/// Weights for [`channel_attention`]: an optional 1x1 projection for the
/// context branch and a two-layer 1x1 MLP producing the per-channel gate.
pub struct AttentionParams<'a, E: Element> {
    pub ctx_proj: Option<(&'a Tensor<E>, &'a Tensor<E>)>,
    pub fc1: (&'a Tensor<E>, &'a Tensor<E>),
    pub fc2: (&'a Tensor<E>, &'a Tensor<E>),
}

/// Per-channel recalibration gated on pooled statistics of the input,
/// optionally conditioned on a guidance feature.
///
/// `gate = sigmoid(fc2(gelu(fc1(GAP(x) + proj(GAP(ctx))))))`, output
/// `x * gate`. Without a context the projection term is simply absent,
/// contributing zeros. Pooling before the 1x1 projection is exactly
/// equivalent to projecting first (both are linear) and far cheaper.
pub fn channel_attention<E: Element>(
    input: &Tensor<E>,
    context: Option<&Tensor<E>>,
    params: &AttentionParams<'_, E>,
) -> Result<Tensor<E>> {
    let pooled = global_avg_pool(input)?;
    let summary = match (context, &params.ctx_proj) {
        (Some(ctx), Some((w, b))) => {
            let ctx_pooled = global_avg_pool(ctx)?;
            pooled.add(&conv2d(&ctx_pooled, w, Some(b), 1, 0)?)?
        }
        (None, _) => pooled,
        (Some(_), None) => {
            return Err(Error::InvalidArgument(
                "channel_attention given a context but no projection weights".into(),
            ))
        }
    };
    let hidden = conv2d(&summary, params.fc1.0, Some(params.fc1.1), 1, 0)?.gelu();
    let gate = conv2d(&hidden, params.fc2.0, Some(params.fc2.1), 1, 0)?.sigmoid();
    broadcast_mul_channel(input, &gate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct six-nested-loop convolution used as the independent oracle.
    fn conv_oracle(
        input: &Tensor<f64>,
        weight: &Tensor<f64>,
        bias: &[f64],
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let (ci, h, w) = (input.dims()[0], input.dims()[1], input.dims()[2]);
        let (co, k) = (weight.dims()[0], weight.dims()[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let iv = input.values();
        let wv = weight.values();
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += iv[(c * h + iy as usize) * w + ix as usize]
                                    * wv[((o * ci + c) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_on_zero_input_yields_bias() {
        let input = Tensor::<f64>::zeros(&[1, 3, 3]);
        let weight = Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64);
        let bias = Tensor::from_vec(&[2], vec![0.5, -1.5]).unwrap();
        let out = conv2d(&input, &weight, Some(&bias), 1, 1).unwrap();
        for (i, v) in out.to_vec().iter().enumerate() {
            let expect = if i < 9 { 0.5 } else { -1.5 };
            assert_eq!(*v, expect);
        }
    }

    #[test]
    fn identity_1x1_kernel_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = rand_tensor(&[1, 4, 5], &mut rng);
        let weight = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let out = conv2d(&input, &weight, None, 1, 0).unwrap();
        assert_eq!(out.to_vec(), input.to_vec());
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for &(ci, co, k, h, w, stride, pad) in &[
            (2usize, 3usize, 3usize, 5usize, 5usize, 1usize, 1usize),
            (3, 2, 3, 6, 7, 2, 1),
            (1, 4, 5, 9, 8, 1, 2),
            (4, 1, 1, 4, 4, 1, 0),
            (2, 2, 3, 5, 5, 1, 0),
        ] {
            let input = rand_tensor(&[ci, h, w], &mut rng);
            let weight = rand_tensor(&[co, ci, k, k], &mut rng);
            let bias: Vec<f64> = (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bias_t = Tensor::from_vec(&[co], bias.clone()).unwrap();
            let got = conv2d(&input, &weight, Some(&bias_t), stride, pad).unwrap();
            let want = conv_oracle(&input, &weight, &bias, stride, pad);
            for (g, w_) in got.to_vec().iter().zip(want.iter()) {
                assert!((g - w_).abs() < 1e-5, "conv mismatch: {g} vs {w_}");
            }
        }
    }

    #[test]
    fn depthwise_matches_grouped_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, k, h, w) = (3, 5, 8, 6);
        let input = rand_tensor(&[c, h, w], &mut rng);
        let weight = rand_tensor(&[c, 1, k, k], &mut rng);
        let bias: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias_t = Tensor::from_vec(&[c], bias.clone()).unwrap();
        let got = depthwise_conv2d(&input, &weight, Some(&bias_t), 1, k / 2).unwrap();
        // oracle: run each channel as an independent 1-in/1-out conv
        for ch in 0..c {
            let in_c = input.slice_spatial(0, 0, h, w).unwrap(); // full copy
            let single_in = Tensor::from_vec(
                &[1, h, w],
                in_c.to_vec()[ch * h * w..(ch + 1) * h * w].to_vec(),
            )
            .unwrap();
            let single_w = Tensor::from_vec(
                &[1, 1, k, k],
                weight.to_vec()[ch * k * k..(ch + 1) * k * k].to_vec(),
            )
            .unwrap();
            let want = conv_oracle(&single_in, &single_w, &bias[ch..ch + 1], 1, k / 2);
            let got_v = got.to_vec();
            for (i, w_) in want.iter().enumerate() {
                assert!((got_v[ch * h * w + i] - w_).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let input = Tensor::<f32>::zeros(&[3, 4, 4]);
        let weight = Tensor::<f32>::zeros(&[2, 2, 3, 3]);
        assert!(matches!(
            conv2d(&input, &weight, None, 1, 1),
            Err(crate::error::Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn nearest_upsample_repeats_pixels() {
        let t = Tensor::<f32>::from_vec(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let up = upsample_nearest2x(&t).unwrap();
        assert_eq!(up.dims(), &[1, 4, 4]);
        assert_eq!(
            up.to_vec(),
            vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn down_then_up_restores_spatial_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for hw in (4..=64).step_by(6) {
            let x = rand_tensor(&[2, hw, hw], &mut rng);
            let wd = rand_tensor(&[3, 2, 3, 3], &mut rng);
            let wu = rand_tensor(&[2, 3, 3, 3], &mut rng);
            let down = downsample(&x, &wd, None).unwrap();
            assert_eq!(&down.dims()[1..], &[hw / 2, hw / 2]);
            let up = upsample(&down, &wu, None).unwrap();
            assert_eq!(up.dims(), &[2, hw, hw]);
        }
    }

    #[test]
    fn downsample_rejects_odd_dims() {
        let x = Tensor::<f32>::zeros(&[1, 5, 4]);
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        assert!(downsample(&x, &w, None).is_err());
    }

    #[test]
    fn attention_with_zero_mlp_is_half_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = 4;
        let x = rand_tensor(&[c, 3, 3], &mut rng);
        let fc1_w = Tensor::zeros(&[c, c, 1, 1]);
        let fc1_b = Tensor::zeros(&[c]);
        let fc2_w = Tensor::zeros(&[c, c, 1, 1]);
        let fc2_b = Tensor::zeros(&[c]);
        let out = channel_attention(
            &x,
            None,
            &AttentionParams {
                ctx_proj: None,
                fc1: (&fc1_w, &fc1_b),
                fc2: (&fc2_w, &fc2_b),
            },
        )
        .unwrap();
        for (o, i) in out.to_vec().iter().zip(x.to_vec().iter()) {
            assert!((o - 0.5 * i).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_on_zero_input_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = 3;
        let x = Tensor::<f64>::zeros(&[c, 4, 4]);
        let ctx = rand_tensor(&[c, 4, 4], &mut rng);
        let pw = rand_tensor(&[c, c, 1, 1], &mut rng);
        let pb = rand_tensor(&[c], &mut rng);
        let fc1_w = rand_tensor(&[c, c, 1, 1], &mut rng);
        let fc1_b = rand_tensor(&[c], &mut rng);
        let fc2_w = rand_tensor(&[c, c, 1, 1], &mut rng);
        let fc2_b = rand_tensor(&[c], &mut rng);
        let out = channel_attention(
            &x,
            Some(&ctx),
            &AttentionParams {
                ctx_proj: Some((&pw, &pb)),
                fc1: (&fc1_w, &fc1_b),
                fc2: (&fc2_w, &fc2_b),
            },
        )
        .unwrap();
        assert!(out.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mae_examples() {
        let x = Tensor::<f64>::from_vec(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(mae_loss(&x, &x).unwrap().item(), 0.0);
        let zeros = Tensor::<f64>::zeros(&[5]);
        let ones = Tensor::<f64>::full(&[5], 1.0);
        assert_eq!(mae_loss(&zeros, &ones).unwrap().item(), 1.0);
    }

    #[test]
    fn concat_splits_gradient() {
        let a = Tensor::<f64>::param(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f64>::param(&[2, 2, 2], vec![0.; 8]).unwrap();
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.dims(), &[3, 2, 2]);
        let loss = cat.mul_scalar(2.0).sum_all();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0; 4]);
        assert_eq!(b.grad().unwrap(), vec![2.0; 8]);
    }

    #[test]
    fn global_avg_pool_means_each_channel() {
        let t = Tensor::<f64>::from_vec(&[2, 1, 2], vec![1.0, 3.0, 10.0, 20.0]).unwrap();
        let p = global_avg_pool(&t).unwrap();
        assert_eq!(p.dims(), &[2, 1, 1]);
        assert_eq!(p.to_vec(), vec![2.0, 15.0]);
    }
}

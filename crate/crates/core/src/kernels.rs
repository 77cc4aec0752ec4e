//! Convolution and cross-correlation kernels.
//!
//! Each algorithm variant sits behind a common trait and is registered by
//! name, so the executing kernel can be picked at runtime from config or the
//! command line (`--conv-kernel`, `--corr-kernel`). All variants of one
//! operation agree to 1e-5 relative; [`conv2d`] and [`cross_correlate`] are
//! the definitional reference forms.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A 2-D convolution strategy over `(out_c, in_c, kh, kw)` weights.
pub trait ConvKernel: Send + Sync {
    fn name(&self) -> &'static str;
    fn run(
        &self,
        input: &Tensor,
        weights: &Tensor,
        bias: &[f32],
        stride: usize,
        padding: usize,
    ) -> Result<Tensor>;
}

/// A template-over-search cross-correlation strategy.
pub trait CorrKernel: Send + Sync {
    fn name(&self) -> &'static str;
    fn run(&self, template: &Tensor, search: &Tensor) -> Result<Tensor>;
}

/// Direct seven-loop convolution; the reference semantics.
pub struct DirectConv;

/// im2col + row-parallel matmul; faster, agrees with [`DirectConv`] to 1e-5.
pub struct Im2colConv;

/// Multi-channel correlation: one output channel per template batch entry,
/// each cell the full inner product over channels and window.
pub struct FullCorr;

/// Per-channel correlation preserving channel count for the heads.
pub struct DepthwiseCorr;

static CONV_KERNELS: [&dyn ConvKernel; 2] = [&DirectConv, &Im2colConv];
static CORR_KERNELS: [&dyn CorrKernel; 2] = [&FullCorr, &DepthwiseCorr];

pub fn conv_kernels() -> &'static [&'static dyn ConvKernel] {
    &CONV_KERNELS
}

pub fn corr_kernels() -> &'static [&'static dyn CorrKernel] {
    &CORR_KERNELS
}

pub fn conv_kernel(name: &str) -> Result<&'static dyn ConvKernel> {
    CONV_KERNELS
        .iter()
        .find(|k| k.name() == name)
        .copied()
        .ok_or_else(|| Error::UnknownKernel {
            name: name.into(),
            available: CONV_KERNELS
                .iter()
                .map(|k| k.name())
                .collect::<Vec<_>>()
                .join(", "),
        })
}

pub fn corr_kernel(name: &str) -> Result<&'static dyn CorrKernel> {
    CORR_KERNELS
        .iter()
        .find(|k| k.name() == name)
        .copied()
        .ok_or_else(|| Error::UnknownKernel {
            name: name.into(),
            available: CORR_KERNELS
                .iter()
                .map(|k| k.name())
                .collect::<Vec<_>>()
                .join(", "),
        })
}

pub fn default_conv_kernel() -> &'static dyn ConvKernel {
    &Im2colConv
}

pub fn default_corr_kernel() -> &'static dyn CorrKernel {
    &DepthwiseCorr
}

fn conv_check(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f32],
    stride: usize,
) -> Result<(usize, usize)> {
    let [out_c, in_c, kh, kw] = weights.shape();
    if kh < 1 || kw < 1 || stride < 1 {
        return Err(Error::InvalidArgument(format!(
            "conv2d: kernel {kh}x{kw} and stride {stride} must be >= 1"
        )));
    }
    if input.channels() != in_c {
        return Err(Error::ShapeMismatch {
            context: "conv2d input channels".into(),
            expected: format!("{in_c}"),
            actual: format!("{}", input.channels()),
        });
    }
    if bias.len() != out_c {
        return Err(Error::ShapeMismatch {
            context: "conv2d bias".into(),
            expected: format!("{out_c}"),
            actual: format!("{}", bias.len()),
        });
    }
    Ok((kh, kw))
}

pub fn conv_output_hw(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    let eff_h = h + 2 * padding;
    let eff_w = w + 2 * padding;
    if eff_h < kh || eff_w < kw {
        return Err(Error::InvalidArgument(format!(
            "conv2d: {kh}x{kw} kernel larger than padded {eff_h}x{eff_w} input"
        )));
    }
    Ok(((eff_h - kh) / stride + 1, (eff_w - kw) / stride + 1))
}

impl ConvKernel for DirectConv {
    fn name(&self) -> &'static str {
        "direct"
    }

    fn run(
        &self,
        input: &Tensor,
        weights: &Tensor,
        bias: &[f32],
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let (kh, kw) = conv_check(input, weights, bias, stride)?;
        let [out_c, in_c, _, _] = weights.shape();
        let (h, w) = (input.height(), input.width());
        let (oh, ow) = conv_output_hw(h, w, kh, kw, stride, padding)?;
        let batch = input.batch();
        let mut out = Tensor::zeros([batch, out_c, oh, ow]);
        let ohw = oh * ow;
        out.data_mut()
            .par_chunks_mut(ohw)
            .enumerate()
            .for_each(|(chunk, plane)| {
                let n = chunk / out_c;
                let oc = chunk % out_c;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[oc];
                        for ic in 0..in_c {
                            let in_plane = input.plane(n, ic);
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let row = iy as usize * w;
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc +=
                                        weights.get(oc, ic, ky, kx) * in_plane[row + ix as usize];
                                }
                            }
                        }
                        plane[oy * ow + ox] = acc;
                    }
                }
            });
        Ok(out)
    }
}

/// Unfold one image into a `(in_c*kh*kw) x (oh*ow)` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    input: &Tensor,
    n: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let in_c = input.channels();
    let (h, w) = (input.height(), input.width());
    let p = oh * ow;
    let mut cols = vec![0.0f32; in_c * kh * kw * p];
    for ic in 0..in_c {
        let plane = input.plane(n, ic);
        for ky in 0..kh {
            for kx in 0..kw {
                let dst_row = (ic * kh + ky) * kw + kx;
                let dst = &mut cols[dst_row * p..(dst_row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = iy as usize * w;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, slot) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            *slot = plane[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// `out[m x p] = a[m x k] * b[k x p]`, rows in parallel, fixed k order per cell.
fn matmul_rows(a: &[f32], b: &[f32], m: usize, k: usize, p: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * p);
    out.par_chunks_mut(p).enumerate().for_each(|(i, row)| {
        row.fill(0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
}

impl ConvKernel for Im2colConv {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn run(
        &self,
        input: &Tensor,
        weights: &Tensor,
        bias: &[f32],
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let (kh, kw) = conv_check(input, weights, bias, stride)?;
        let [out_c, in_c, _, _] = weights.shape();
        let (oh, ow) = conv_output_hw(input.height(), input.width(), kh, kw, stride, padding)?;
        let batch = input.batch();
        let p = oh * ow;
        let k = in_c * kh * kw;
        let mut out = Tensor::zeros([batch, out_c, oh, ow]);
        for n in 0..batch {
            let cols = im2col(input, n, kh, kw, stride, padding, oh, ow);
            let start = n * out_c * p;
            matmul_rows(
                weights.data(),
                &cols,
                out_c,
                k,
                p,
                &mut out.data_mut()[start..start + out_c * p],
            );
            for (oc, &b) in bias.iter().enumerate() {
                if b != 0.0 {
                    for v in &mut out.data_mut()[start + oc * p..start + (oc + 1) * p] {
                        *v += b;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Direct 2-D convolution (reference semantics).
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f32],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    DirectConv.run(input, weights, bias, stride, padding)
}

fn corr_check(template: &Tensor, search: &Tensor) -> Result<(usize, usize)> {
    if template.channels() != search.channels() {
        return Err(Error::ShapeMismatch {
            context: "cross_correlate channels".into(),
            expected: format!("{}", search.channels()),
            actual: format!("{}", template.channels()),
        });
    }
    if template.height() > search.height() || template.width() > search.width() {
        return Err(Error::InvalidArgument(format!(
            "cross_correlate: template {}x{} exceeds search {}x{}",
            template.height(),
            template.width(),
            search.height(),
            search.width()
        )));
    }
    Ok((
        search.height() - template.height() + 1,
        search.width() - template.width() + 1,
    ))
}

impl CorrKernel for FullCorr {
    fn name(&self) -> &'static str {
        "full"
    }

    fn run(&self, template: &Tensor, search: &Tensor) -> Result<Tensor> {
        let (oh, ow) = corr_check(template, search)?;
        let c = template.channels();
        let (th, tw) = (template.height(), template.width());
        let sw = search.width();
        let n_templates = template.batch();
        let batch = search.batch();
        let mut out = Tensor::zeros([batch, n_templates, oh, ow]);
        let ohw = oh * ow;
        out.data_mut()
            .par_chunks_mut(ohw)
            .enumerate()
            .for_each(|(chunk, plane)| {
                let n = chunk / n_templates;
                let t = chunk % n_templates;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f32;
                        for ch in 0..c {
                            let tp = template.plane(t, ch);
                            let sp = search.plane(n, ch);
                            for ky in 0..th {
                                let trow = ky * tw;
                                let srow = (oy + ky) * sw + ox;
                                for kx in 0..tw {
                                    acc += tp[trow + kx] * sp[srow + kx];
                                }
                            }
                        }
                        plane[oy * ow + ox] = acc;
                    }
                }
            });
        Ok(out)
    }
}

impl CorrKernel for DepthwiseCorr {
    fn name(&self) -> &'static str {
        "depthwise"
    }

    fn run(&self, template: &Tensor, search: &Tensor) -> Result<Tensor> {
        let (oh, ow) = corr_check(template, search)?;
        let c = template.channels();
        let (th, tw) = (template.height(), template.width());
        let sw = search.width();
        let batch = search.batch();
        let mut out = Tensor::zeros([batch, c, oh, ow]);
        let ohw = oh * ow;
        out.data_mut()
            .par_chunks_mut(ohw)
            .enumerate()
            .for_each(|(chunk, plane)| {
                let n = chunk / c;
                let ch = chunk % c;
                let tp = template.plane(0, ch);
                let sp = search.plane(n, ch);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f32;
                        for ky in 0..th {
                            let trow = ky * tw;
                            let srow = (oy + ky) * sw + ox;
                            for kx in 0..tw {
                                acc += tp[trow + kx] * sp[srow + kx];
                            }
                        }
                        plane[oy * ow + ox] = acc;
                    }
                }
            });
        Ok(out)
    }
}

/// Full multi-channel cross-correlation (one output channel per template).
pub fn cross_correlate(template: &Tensor, search: &Tensor) -> Result<Tensor> {
    FullCorr.run(template, search)
}

/// Per-channel cross-correlation (channel count preserved).
pub fn cross_correlate_depthwise(template: &Tensor, search: &Tensor) -> Result<Tensor> {
    DepthwiseCorr.run(template, search)
}

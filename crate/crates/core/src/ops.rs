//! Differentiable CPU kernels the network needs beyond candle's built-ins.
//!
//! Convolution is lowered to an `im2col` gather followed by a batched
//! matmul, so both the forward and the backward pass run through gemm.
//! Max pooling carries its own argmax backward so overlapping windows work.

use std::ops::AddAssign;

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

/// Kernel geometry shared by convolution and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, pad: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            dilation,
        }
    }

    /// Same-size 3x3-style convolution with the given dilation.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self::new(kernel, 1, dilation * (kernel - 1) / 2, dilation)
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let f = |x: usize| (x + 2 * self.pad - span) / self.stride + 1;
        (f(h), f(w))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn dims4(layout: &Layout) -> candle_core::Result<(usize, usize, usize, usize)> {
    layout.shape().dims4()
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("custom op expects a contiguous input"),
    }
}

fn im2col<T: Copy + Default>(src: &[T], (n, c, h, w): (usize, usize, usize, usize), g: ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_size(h, w);
    let k = g.kernel;
    let l = ho * wo;
    let rows = c * k * k;
    let mut dst = vec![T::default(); rows * n * l];
    for b in 0..n {
        for ci in 0..c {
            let plane = &src[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let out = &mut dst[(row * n + b) * l..(row * n + b + 1) * l];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut out[oy * wo..(oy + 1) * wo];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *o = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn col2im<T: Copy + Default + AddAssign>(
    cols: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    g: ConvGeom,
) -> Vec<T> {
    let (ho, wo) = g.out_size(h, w);
    let k = g.kernel;
    let l = ho * wo;
    let mut dst = vec![T::default(); n * c * h * w];
    for b in 0..n {
        for ci in 0..c {
            let plane = &mut dst[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let col = &cols[(row * n + b) * l..(row * n + b + 1) * l];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = iy as usize * w;
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[base + ix as usize] += col[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

struct Im2Col(ConvGeom);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = dims4(layout)?;
        let (ho, wo) = self.0.out_size(h, w);
        // (rows, N, L): rows of the gemm operand, batch folded into columns
        let shape = Shape::from((c * self.0.kernel * self.0.kernel, n, ho * wo));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous(v, layout)?, (n, c, h, w), self.0)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous(v, layout)?, (n, c, h, w), self.0)),
            other => candle_core::bail!("im2col: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, _, h, w) = arg.dims4()?;
        let grad = grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im { geom: self.0, h, w })?;
        Ok(Some(grad))
    }
}

struct Col2Im {
    geom: ConvGeom,
    h: usize,
    w: usize,
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (rows, n, _) = layout.shape().dims3()?;
        let k2 = self.geom.kernel * self.geom.kernel;
        let c = rows / k2;
        let dims = (n, c, self.h, self.w);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous(v, layout)?, dims, self.geom)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous(v, layout)?, dims, self.geom)),
            other => candle_core::bail!("col2im: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, Shape::from(dims)))
    }
}

/// 2-D convolution without bias. `x`: (N, C, H, W), `weight`: (O, C, k, k).
pub fn conv2d(x: &Tensor, weight: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, wc, kh, kw) = weight.dims4()?;
    if wc != c || kh != geom.kernel || kw != geom.kernel {
        return Err(Error::ShapeMismatch(format!(
            "conv weight {:?} does not fit input channels {c} / kernel {}",
            weight.dims(),
            geom.kernel
        )));
    }
    let span = geom.dilation * (geom.kernel - 1) + 1;
    if h + 2 * geom.pad < span || w + 2 * geom.pad < span {
        return Err(Error::ShapeMismatch(format!(
            "input {h}x{w} smaller than kernel span {span}"
        )));
    }
    let (ho, wo) = geom.out_size(h, w);
    let rows = c * geom.kernel * geom.kernel;
    // batch is folded into the gemm columns so the weight gradient is a
    // single matmul instead of a per-sample product plus a reduction
    let cols = if geom.is_pointwise() {
        if n == 1 {
            x.reshape((c, h * w))?
        } else {
            x.transpose(0, 1)?.contiguous()?.reshape((c, n * h * w))?
        }
    } else {
        x.contiguous()?.apply_op1(Im2Col(geom))?.reshape((rows, n * ho * wo))?
    };
    let y = weight.reshape((o, rows))?.matmul(&cols)?;
    if n == 1 {
        Ok(y.reshape((1, o, ho, wo))?)
    } else {
        Ok(y.reshape((o, n, ho, wo))?.transpose(0, 1)?.contiguous()?)
    }
}

fn max_pool_fwd<T: Copy + PartialOrd>(
    src: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    g: ConvGeom,
) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = g.out_size(h, w);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best: Option<(T, usize)> = None;
                for ki in 0..g.kernel {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..g.kernel {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        let v = src[idx];
                        if best.map_or(true, |(b, _)| v > b) {
                            best = Some((v, idx));
                        }
                    }
                }
                let (v, idx) = best.expect("pool window overlaps the input");
                out.push(v);
                arg.push(idx);
            }
        }
    }
    (out, arg)
}

struct MaxPool(ConvGeom);

impl CustomOp1 for MaxPool {
    fn name(&self) -> &'static str {
        "max_pool2d"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = dims4(layout)?;
        let (ho, wo) = self.0.out_size(dims.2, dims.3);
        let shape = Shape::from((dims.0, dims.1, ho, wo));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(max_pool_fwd(contiguous(v, layout)?, dims, self.0).0),
            CpuStorage::F64(v) => CpuStorage::F64(max_pool_fwd(contiguous(v, layout)?, dims, self.0).0),
            other => candle_core::bail!("max_pool2d: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let grad = arg
            .contiguous()?
            .apply_op2_no_bwd(&grad_res.contiguous()?, &MaxPoolGrad(self.0))?;
        Ok(Some(grad))
    }
}

struct MaxPoolGrad(ConvGeom);

fn scatter_grad<T: Copy + Default + AddAssign + PartialOrd>(
    src: &[T],
    grad: &[T],
    dims: (usize, usize, usize, usize),
    g: ConvGeom,
) -> Vec<T> {
    let (_, arg) = max_pool_fwd(src, dims, g);
    let mut out = vec![T::default(); src.len()];
    for (gv, idx) in grad.iter().zip(arg) {
        out[idx] += *gv;
    }
    out
}

impl CustomOp2 for MaxPoolGrad {
    fn name(&self) -> &'static str {
        "max_pool2d_grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = dims4(l1)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                CpuStorage::F32(scatter_grad(contiguous(x, l1)?, contiguous(g, l2)?, dims, self.0))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(scatter_grad(contiguous(x, l1)?, contiguous(g, l2)?, dims, self.0))
            }
            _ => candle_core::bail!("max_pool2d_grad: dtype mismatch"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Max pooling; out-of-bounds positions never win the max.
pub fn max_pool2d(x: &Tensor, kernel: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let geom = ConvGeom::new(kernel, stride, pad, 1);
    Ok(x.contiguous()?.apply_op1(MaxPool(geom))?)
}

/// Row-stochastic (out x in) bilinear interpolation matrix with half-pixel
/// centers, matching the usual `align_corners = false` convention.
pub fn bilinear_matrix(in_size: usize, out_size: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_size * in_size];
    let scale = in_size as f64 / out_size as f64;
    for o in 0..out_size {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_size - 1);
        let i1 = (i0 + 1).min(in_size - 1);
        let frac = src - i0 as f64;
        m[o * in_size + i0] += 1.0 - frac;
        m[o * in_size + i1] += frac;
    }
    m
}

/// Bilinear resize of an (N, C, H, W) tensor; differentiable through matmul.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dtype = x.dtype();
    let dev = x.device();
    let rows = Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), dev)?.to_dtype(dtype)?;
    let cols = Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), dev)?
        .to_dtype(dtype)?
        .t()?
        .contiguous()?;
    let y = x.contiguous()?.broadcast_matmul(&cols)?;
    Ok(rows.broadcast_matmul(&y)?)
}

/// Activation fused into batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Relu,
    Relu6,
    Identity,
}

impl Act {
    fn apply(self, v: f64) -> f64 {
        match self {
            Act::Relu => v.max(0.0),
            Act::Relu6 => v.clamp(0.0, 6.0),
            Act::Identity => v,
        }
    }

    /// Whether the gradient flows, judged from the activated output.
    fn passes(self, y: f64) -> bool {
        match self {
            Act::Relu => y > 0.0,
            Act::Relu6 => y > 0.0 && y < 6.0,
            Act::Identity => true,
        }
    }
}

/// Per-channel (mean, biased variance) of an (N, C, H, W) buffer.
fn channel_stats<T: WithDType>(x: &[T], (n, c, hw): (usize, usize, usize)) -> Vec<(f64, f64)> {
    let count = (n * hw) as f64;
    (0..c)
        .map(|ch| {
            let planes = || (0..n).flat_map(move |b| x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter());
            let mean = planes().map(|v| v.to_f64()).sum::<f64>() / count;
            let var = planes().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / count;
            (mean, var)
        })
        .collect()
}

fn nchw(layout: &Layout) -> candle_core::Result<(usize, usize, usize)> {
    let (n, c, h, w) = dims4(layout)?;
    Ok((n, c, h * w))
}

/// y = act(scale[c] * x + shift[c]).
fn affine_act<T: WithDType>(x: &[T], scale: &[f64], shift: &[f64], (n, c, hw): (usize, usize, usize), act: Act) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for ch in 0..c {
            let (a, s) = (scale[ch], shift[ch]);
            out.extend(
                x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                    .iter()
                    .map(|v| T::from_f64(act.apply(a * v.to_f64() + s))),
            );
        }
    }
    out
}

fn to_f64s<T: WithDType>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64()).collect()
}

/// Training-mode batch normalization over (N, H, W) with a fused activation.
struct BatchNormTrain {
    eps: f64,
    act: Act,
}

impl BatchNormTrain {
    fn fwd_typed<T: WithDType>(&self, x: &[T], gamma: &[T], beta: &[T], dims: (usize, usize, usize)) -> Vec<T> {
        let stats = channel_stats(x, dims);
        let scale: Vec<f64> = stats
            .iter()
            .zip(gamma)
            .map(|(&(_, var), g)| g.to_f64() / (var + self.eps).sqrt())
            .collect();
        let shift: Vec<f64> = stats
            .iter()
            .zip(&scale)
            .zip(beta)
            .map(|((&(mean, _), a), b)| b.to_f64() - mean * a)
            .collect();
        affine_act(x, &scale, &shift, dims, self.act)
    }

    fn bwd_typed<T: WithDType>(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        y: &Tensor,
        dy: &Tensor,
    ) -> candle_core::Result<(Tensor, Tensor, Tensor)> {
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let flat = |t: &Tensor| t.flatten_all()?.to_vec1::<T>();
        let (xs, ys, dys, gs) = (flat(x)?, flat(y)?, flat(dy)?, flat(gamma)?);
        let stats = channel_stats(&xs, (n, c, hw));
        let count = (n * hw) as f64;
        let mut dx = vec![T::zero(); xs.len()];
        let mut dgamma = Vec::with_capacity(c);
        let mut dbeta = Vec::with_capacity(c);
        for ch in 0..c {
            let (mean, var) = stats[ch];
            let istd = 1.0 / (var + self.eps).sqrt();
            let idx = || (0..n).flat_map(move |b| (b * c + ch) * hw..(b * c + ch + 1) * hw);
            let dz = |i: usize| {
                if self.act.passes(ys[i].to_f64()) {
                    dys[i].to_f64()
                } else {
                    0.0
                }
            };
            let (mut sum_dz, mut sum_dz_xhat) = (0.0, 0.0);
            for i in idx() {
                let d = dz(i);
                sum_dz += d;
                sum_dz_xhat += d * (xs[i].to_f64() - mean) * istd;
            }
            let k = gs[ch].to_f64() * istd / count;
            for i in idx() {
                let xhat = (xs[i].to_f64() - mean) * istd;
                dx[i] = T::from_f64(k * (count * dz(i) - sum_dz - xhat * sum_dz_xhat));
            }
            dgamma.push(T::from_f64(sum_dz_xhat));
            dbeta.push(T::from_f64(sum_dz));
        }
        let dev = x.device();
        Ok((
            Tensor::from_vec(dx, x.shape(), dev)?,
            Tensor::from_vec(dgamma, c, dev)?,
            Tensor::from_vec(dbeta, c, dev)?,
        ))
    }
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = nchw(l1)?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => CpuStorage::F32(self.fwd_typed(
                contiguous(x, l1)?,
                contiguous(g, l2)?,
                contiguous(b, l3)?,
                dims,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => CpuStorage::F64(self.fwd_typed(
                contiguous(x, l1)?,
                contiguous(g, l2)?,
                contiguous(b, l3)?,
                dims,
            )),
            _ => candle_core::bail!("batch norm: unsupported or mixed dtypes {:?}", s1.dtype()),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        y: &Tensor,
        dy: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (dx, dg, db) = match x.dtype() {
            DType::F32 => self.bwd_typed::<f32>(x, gamma, y, dy)?,
            DType::F64 => self.bwd_typed::<f64>(x, gamma, y, dy)?,
            other => candle_core::bail!("batch norm: unsupported dtype {other:?}"),
        };
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

/// Batch statistics normalization: `act(gamma * (x - mean) / sqrt(var + eps) + beta)`
/// per channel of an (N, C, H, W) tensor. Also returns each channel's
/// (mean, biased variance) for running-statistics updates.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    act: Act,
) -> Result<(Tensor, Vec<(f64, f64)>)> {
    let x = x.contiguous()?;
    let (n, c, h, w) = x.dims4()?;
    let stats = match x.dtype() {
        DType::F32 => channel_stats(&x.flatten_all()?.to_vec1::<f32>()?, (n, c, h * w)),
        DType::F64 => channel_stats(&x.flatten_all()?.to_vec1::<f64>()?, (n, c, h * w)),
        other => return Err(Error::InvalidInput(format!("batch norm on {other:?}"))),
    };
    let y = x.apply_op3(gamma, beta, BatchNormTrain { eps, act })?;
    Ok((y, stats))
}

/// Fixed per-channel affine map plus activation (inference normalization).
struct AffineAct {
    scale: Vec<f64>,
    shift: Vec<f64>,
    act: Act,
}

impl CustomOp1 for AffineAct {
    fn name(&self) -> &'static str {
        "affine-act"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = nchw(layout)?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(affine_act(contiguous(v, layout)?, &self.scale, &self.shift, dims, self.act)),
            CpuStorage::F64(v) => CpuStorage::F64(affine_act(contiguous(v, layout)?, &self.scale, &self.shift, dims, self.act)),
            other => candle_core::bail!("affine: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, layout.shape().clone()))
    }
}

/// `act(scale[c] * x + shift[c])` on an (N, C, H, W) tensor; no gradient.
pub fn affine_act_infer(x: &Tensor, scale: &[f64], shift: &[f64], act: Act) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1_no_bwd(&AffineAct {
        scale: scale.to_vec(),
        shift: shift.to_vec(),
        act,
    })?)
}

/// Reads a rank-1 tensor as f64 values.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(match t.dtype() {
        DType::F32 => to_f64s(&t.flatten_all()?.to_vec1::<f32>()?),
        _ => t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?,
    })
}

/// Scalar value of a rank-0 or single-element tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    /// Direct-loop convolution used as an oracle.
    fn conv_naive(x: &[f64], (n, c, h, w): (usize, usize, usize, usize), wt: &[f64], o: usize, g: ConvGeom) -> Vec<f64> {
        let (ho, wo) = g.out_size(h, w);
        let k = g.kernel;
        let mut out = vec![0.0; n * o * ho * wo];
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((b * c + ci) * h + iy as usize) * w + ix as usize]
                                        * wt[((oc * c + ci) * k + ki) * k + kj];
                                }
                            }
                        }
                        out[((b * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (i, g) in [
            ConvGeom::same(3, 1),
            ConvGeom::same(3, 3),
            ConvGeom::new(3, 2, 1, 1),
            ConvGeom::new(1, 1, 0, 1),
        ]
        .into_iter()
        .enumerate()
        {
            let x = rand_tensor(&[2, 3, 7, 6], i as u64);
            let wt = rand_tensor(&[4, 3, g.kernel, g.kernel], 100 + i as u64);
            let y = conv2d(&x, &wt, g).unwrap();
            let want = conv_naive(
                &x.flatten_all().unwrap().to_vec1().unwrap(),
                (2, 3, 7, 6),
                &wt.flatten_all().unwrap().to_vec1().unwrap(),
                4,
                g,
            );
            let got: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{g:?}: {a} vs {b}");
            }
        }
    }

    fn fd_check(f: impl Fn(&Tensor) -> Tensor, x: &Tensor) {
        let var = Var::from_tensor(x).unwrap();
        let grads = f(var.as_tensor()).backward().unwrap();
        let g: Vec<f64> = grads.get(&var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let base: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let eps = 1e-6;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += eps;
            let mut m = base.clone();
            m[i] -= eps;
            let fp = scalar(&f(&Tensor::from_vec(p, x.shape(), x.device()).unwrap())).unwrap();
            let fm = scalar(&f(&Tensor::from_vec(m, x.shape(), x.device()).unwrap())).unwrap();
            let fd = (fp - fm) / (2.0 * eps);
            assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "elem {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn conv_input_and_weight_gradients() {
        let g = ConvGeom::same(3, 2);
        let x = rand_tensor(&[1, 2, 5, 5], 7);
        let wt = rand_tensor(&[3, 2, 3, 3], 8);
        let probe = rand_tensor(&[1, 3, 5, 5], 9);
        fd_check(|x| (conv2d(x, &wt, g).unwrap() * &probe).unwrap().sum_all().unwrap(), &x);
        fd_check(|w| (conv2d(&x, w, g).unwrap() * &probe).unwrap().sum_all().unwrap(), &wt);
    }

    #[test]
    fn batch_norm_gradients() {
        let x = rand_tensor(&[2, 3, 3, 2], 11);
        let gamma = (rand_tensor(&[3], 12) + 1.5).unwrap();
        let beta = rand_tensor(&[3], 13);
        let probe = rand_tensor(&[2, 3, 3, 2], 14);
        for act in [Act::Identity, Act::Relu, Act::Relu6] {
            let f = |x: &Tensor, g: &Tensor, b: &Tensor| {
                let (y, _) = batch_norm_train(x, g, b, 1e-5, act).unwrap();
                (y * &probe).unwrap().sum_all().unwrap()
            };
            fd_check(|x| f(x, &gamma, &beta), &x);
            fd_check(|g| f(&x, g, &beta), &gamma);
            fd_check(|b| f(&x, &gamma, b), &beta);
        }
    }

    #[test]
    fn batch_norm_normalizes_each_channel() {
        let x = ((rand_tensor(&[4, 2, 5, 5], 21) * 3.0).unwrap() + 7.0).unwrap();
        let ones = Tensor::ones(2, DType::F64, &Device::Cpu).unwrap();
        let zeros = Tensor::zeros(2, DType::F64, &Device::Cpu).unwrap();
        let (y, stats) = batch_norm_train(&x, &ones, &zeros, 0.0, Act::Identity).unwrap();
        let mean: Vec<f64> = y.mean_keepdim((0, 2, 3)).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let var: Vec<f64> = y.sqr().unwrap().mean_keepdim((0, 2, 3)).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for ch in 0..2 {
            assert!(mean[ch].abs() < 1e-12);
            assert!((var[ch] - 1.0).abs() < 1e-10);
            assert!((stats[ch].0 - 7.0).abs() < 1.0);
        }
        let z = affine_act_infer(&x, &[1.0, -1.0], &[0.5, 0.0], Act::Relu).unwrap();
        let z: Vec<f64> = z.flatten_all().unwrap().to_vec1().unwrap();
        for (i, v) in z.iter().enumerate() {
            // channel 1 has a negative scale and is clipped away
            assert_eq!(*v > 0.0, (i / 25) % 2 == 0);
        }
    }

    #[test]
    fn max_pool_forward_and_gradient() {
        let x = rand_tensor(&[1, 2, 6, 6], 3);
        let y = max_pool2d(&x, 3, 2, 1).unwrap();
        assert_eq!(y.dims(), &[1, 2, 3, 3]);
        let probe = rand_tensor(&[1, 2, 3, 3], 4);
        fd_check(|x| (max_pool2d(x, 3, 2, 1).unwrap() * &probe).unwrap().sum_all().unwrap(), &x);
        let y2 = max_pool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y2.dims(), &[1, 2, 3, 3]);
    }

    #[test]
    fn bilinear_rows_sum_to_one_and_constant_is_preserved() {
        for (i, o) in [(4, 8), (8, 4), (5, 20), (3, 3)] {
            let m = bilinear_matrix(i, o);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        let x = Tensor::full(2.5f64, (1, 1, 4, 4), &Device::Cpu).unwrap();
        let y = resize_bilinear(&x, 16, 16).unwrap();
        let v: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|&a| (a - 2.5).abs() < 1e-12));
        let x = rand_tensor(&[1, 2, 4, 4], 5);
        let probe = rand_tensor(&[1, 2, 8, 8], 6);
        fd_check(|x| (resize_bilinear(x, 8, 8).unwrap() * &probe).unwrap().sum_all().unwrap(), &x);
    }
}

//! Numeric kernels with their adjoints: convolution, ReLU, max pooling,
//! global average pooling and bilinear resampling.
//!
//! All kernels are pure and deterministic. Spatial tensors are channel-last.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Geometry of a square-kernel convolution over an `h×w×cin` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(
        h: usize,
        w: usize,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(shape_err!("stride must be at least 1"));
        }
        if k == 0 || k > h + 2 * pad || k > w + 2 * pad {
            return Err(shape_err!(
                "kernel {k} does not fit input {h}x{w} with padding {pad}"
            ));
        }
        Ok(Self {
            h,
            w,
            cin,
            cout,
            k,
            stride,
            pad,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Input coordinate for output `o` and kernel tap `t`, if inside the image.
    #[inline]
    fn source(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        (o * self.stride + t)
            .checked_sub(self.pad)
            .filter(|&i| i < extent)
    }
}

/// Forward convolution on raw buffers. Kernels are laid out `[ky][kx][ci][co]`.
pub(crate) fn conv2d_raw(g: &ConvGeom, input: &[f64], kernels: &[f64], bias: &[f64]) -> Vec<f64> {
    let (oh, ow, cin, cout) = (g.out_h(), g.out_w(), g.cin, g.cout);
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = &mut out[(oy * ow + ox) * cout..][..cout];
            o.copy_from_slice(bias);
            for ky in 0..g.k {
                let Some(iy) = g.source(oy, ky, g.h) else {
                    continue;
                };
                for kx in 0..g.k {
                    let Some(ix) = g.source(ox, kx, g.w) else {
                        continue;
                    };
                    let inp = &input[(iy * g.w + ix) * cin..][..cin];
                    let taps = &kernels[(ky * g.k + kx) * cin * cout..][..cin * cout];
                    for (ci, &v) in inp.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let row = &taps[ci * cout..][..cout];
                        for (acc, &kv) in o.iter_mut().zip(row) {
                            *acc += v * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates the convolution adjoint into the supplied gradient buffers.
pub(crate) fn conv2d_backward_raw(
    g: &ConvGeom,
    input: &[f64],
    kernels: &[f64],
    grad_out: &[f64],
    grad_kernels: &mut [f64],
    grad_bias: &mut [f64],
    mut grad_input: Option<&mut [f64]>,
) {
    let (oh, ow, cin, cout) = (g.out_h(), g.out_w(), g.cin, g.cout);
    for oy in 0..oh {
        for ox in 0..ow {
            let go = &grad_out[(oy * ow + ox) * cout..][..cout];
            if go.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (b, &v) in grad_bias.iter_mut().zip(go) {
                *b += v;
            }
            for ky in 0..g.k {
                let Some(iy) = g.source(oy, ky, g.h) else {
                    continue;
                };
                for kx in 0..g.k {
                    let Some(ix) = g.source(ox, kx, g.w) else {
                        continue;
                    };
                    let base = (iy * g.w + ix) * cin;
                    let tap = (ky * g.k + kx) * cin * cout;
                    for ci in 0..cin {
                        let v = input[base + ci];
                        let gk = &mut grad_kernels[tap + ci * cout..][..cout];
                        if v != 0.0 {
                            for (acc, &gv) in gk.iter_mut().zip(go) {
                                *acc += v * gv;
                            }
                        }
                        if let Some(gi) = grad_input.as_deref_mut() {
                            let row = &kernels[tap + ci * cout..][..cout];
                            let dot: f64 = row.iter().zip(go).map(|(a, b)| a * b).sum();
                            gi[base + ci] += dot;
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom_of(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (h, w, cin) = input.dims3()?;
    let [k, k2, kcin, cout] = kernels.shape()[..] else {
        return Err(shape_err!(
            "kernels must be k×k×Cin×Cout, got {:?}",
            kernels.shape()
        ));
    };
    if k != k2 || kcin != cin {
        return Err(shape_err!(
            "kernels {:?} incompatible with input {:?}",
            kernels.shape(),
            input.shape()
        ));
    }
    ConvGeom::new(h, w, cin, cout, k, stride, pad)
}

/// Zero-padded 2-D convolution: `H×W×Cin` input, `k×k×Cin×Cout` kernels.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = conv_geom_of(input, kernels, stride, pad)?;
    if bias.len() != g.cout {
        return Err(shape_err!("bias has {} entries, expected {}", bias.len(), g.cout));
    }
    let out = conv2d_raw(&g, input.data(), kernels.data(), bias);
    Ok(Tensor::from_parts(vec![g.out_h(), g.out_w(), g.cout], out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Vec<f64>,
}

/// Adjoint of [`conv2d`] with respect to input, kernels and bias.
pub fn conv2d_vjp(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    pad: usize,
    grad_output: &Tensor,
) -> Result<ConvGrads> {
    let g = conv_geom_of(input, kernels, stride, pad)?;
    if grad_output.shape() != [g.out_h(), g.out_w(), g.cout] {
        return Err(shape_err!(
            "grad_output {:?} does not match conv output {}x{}x{}",
            grad_output.shape(),
            g.out_h(),
            g.out_w(),
            g.cout
        ));
    }
    let mut gi = vec![0.0; input.len()];
    let mut gk = vec![0.0; kernels.len()];
    let mut gb = vec![0.0; g.cout];
    conv2d_backward_raw(
        &g,
        input.data(),
        kernels.data(),
        grad_output.data(),
        &mut gk,
        &mut gb,
        Some(&mut gi),
    );
    Ok(ConvGrads {
        input: Tensor::from_parts(input.shape().to_vec(), gi),
        kernels: Tensor::from_parts(kernels.shape().to_vec(), gk),
        bias: gb,
    })
}

pub fn relu(t: &Tensor) -> Tensor {
    Tensor::from_parts(
        t.shape().to_vec(),
        t.data().iter().map(|&v| v.max(0.0)).collect(),
    )
}

/// Passes `g` where `t > 0`; the subgradient at exactly zero is zero.
pub fn relu_vjp(t: &Tensor, g: &Tensor) -> Result<Tensor> {
    if t.shape() != g.shape() {
        return Err(shape_err!("relu_vjp shapes {:?} vs {:?}", t.shape(), g.shape()));
    }
    let data = t
        .data()
        .iter()
        .zip(g.data())
        .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
        .collect();
    Ok(Tensor::from_parts(t.shape().to_vec(), data))
}

fn pool_dims(input: &Tensor, window: usize) -> Result<(usize, usize, usize)> {
    let (h, w, c) = input.dims3()?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(shape_err!(
            "{h}x{w} input is not divisible by pooling window {window}"
        ));
    }
    Ok((h, w, c))
}

/// Flat index of the window maximum; ties resolve to the first cell in scan order.
#[inline]
fn window_argmax(data: &[f64], w: usize, c: usize, window: usize, py: usize, px: usize, ch: usize) -> usize {
    let mut best = ((py * window) * w + px * window) * c + ch;
    for dy in 0..window {
        for dx in 0..window {
            let idx = ((py * window + dy) * w + px * window + dx) * c + ch;
            if data[idx] > data[best] {
                best = idx;
            }
        }
    }
    best
}

pub fn maxpool2d(input: &Tensor, window: usize) -> Result<Tensor> {
    let (h, w, c) = pool_dims(input, window)?;
    let (ph, pw) = (h / window, w / window);
    let src = input.data();
    let mut out = Vec::with_capacity(ph * pw * c);
    for py in 0..ph {
        for px in 0..pw {
            for ch in 0..c {
                out.push(src[window_argmax(src, w, c, window, py, px, ch)]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![ph, pw, c], out))
}

/// Routes each pooled gradient to its window's argmax cell.
pub fn maxpool2d_vjp(input: &Tensor, window: usize, grad_output: &Tensor) -> Result<Tensor> {
    let (h, w, c) = pool_dims(input, window)?;
    let (ph, pw) = (h / window, w / window);
    if grad_output.shape() != [ph, pw, c] {
        return Err(shape_err!(
            "grad_output {:?} does not match pooled shape {ph}x{pw}x{c}",
            grad_output.shape()
        ));
    }
    let src = input.data();
    let go = grad_output.data();
    let mut grad = vec![0.0; input.len()];
    for py in 0..ph {
        for px in 0..pw {
            for ch in 0..c {
                let g = go[(py * pw + px) * c + ch];
                grad[window_argmax(src, w, c, window, py, px, ch)] += g;
            }
        }
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), grad))
}

/// Per-channel spatial mean of an `h×w×D` map.
pub fn global_avg_pool(fm: &Tensor) -> Result<Vec<f64>> {
    let (h, w, d) = fm.dims3()?;
    let mut out = vec![0.0; d];
    for cell in fm.data().chunks_exact(d) {
        for (acc, &v) in out.iter_mut().zip(cell) {
            *acc += v;
        }
    }
    let n = (h * w) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Adjoint of [`global_avg_pool`]: spreads `g / (h·w)` over every cell.
pub fn gap_vjp(h: usize, w: usize, g: &[f64]) -> Tensor {
    let n = (h * w) as f64;
    let scaled: Vec<f64> = g.iter().map(|v| v / n).collect();
    let mut data = Vec::with_capacity(h * w * g.len());
    for _ in 0..h * w {
        data.extend_from_slice(&scaled);
    }
    Tensor::from_parts(vec![h, w, g.len()], data)
}

/// Lower neighbor, upper neighbor and blend fraction for a clamped coordinate.
#[inline]
fn axis_neighbors(s: f64, extent: usize) -> (usize, usize, f64) {
    let s = s.clamp(0.0, (extent - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(extent - 1);
    (lo, hi, s - lo as f64)
}

/// Half-pixel-center bilinear resize of an `h×w` map to `out_h×out_w`, with
/// source coordinates clamped to the map.
pub fn bilinear_resize(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = map.dims2()?;
    if out_h == 0 || out_w == 0 {
        return Err(shape_err!("target extents must be positive"));
    }
    let src = map.data();
    let (sy_scale, sx_scale) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let cols: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|x| axis_neighbors((x as f64 + 0.5) * sx_scale - 0.5, w))
        .collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = axis_neighbors((y as f64 + 0.5) * sy_scale - 0.5, h);
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(Tensor::from_parts(vec![out_h, out_w], out))
}

/// The four `(cell index, weight)` pairs of a bilinear sample at `(y, x)` on
/// an `h×w` grid. Cell index is `y·w + x`; weights sum to one.
pub fn sample_weights(h: usize, w: usize, y: f64, x: f64) -> [(usize, f64); 4] {
    let (y0, y1, fy) = axis_neighbors(y, h);
    let (x0, x1, fx) = axis_neighbors(x, w);
    [
        (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * w + x1, (1.0 - fy) * fx),
        (y1 * w + x0, fy * (1.0 - fx)),
        (y1 * w + x1, fy * fx),
    ]
}

/// Bilinear sample of every channel of an `h×w×D` map at a continuous cell
/// coordinate. Integer coordinates return the cell exactly.
pub fn bilinear_sample(fm: &Tensor, y: f64, x: f64) -> Result<Vec<f64>> {
    let (h, w, d) = fm.dims3()?;
    let mut out = vec![0.0; d];
    let src = fm.data();
    for (cell, weight) in sample_weights(h, w, y, x) {
        for (acc, &v) in out.iter_mut().zip(&src[cell * d..][..d]) {
            *acc += weight * v;
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_sample`]: scatters `g` into `grad_fm` with the
/// sample's blend weights.
pub fn bilinear_sample_vjp(grad_fm: &mut Tensor, y: f64, x: f64, g: &[f64]) -> Result<()> {
    let (h, w, d) = grad_fm.dims3()?;
    if g.len() != d {
        return Err(shape_err!("gradient has {} channels, map has {d}", g.len()));
    }
    let dst = grad_fm.data_mut();
    for (cell, weight) in sample_weights(h, w, y, x) {
        for (acc, &gv) in dst[cell * d..][..d].iter_mut().zip(g) {
            *acc += weight * gv;
        }
    }
    Ok(())
}

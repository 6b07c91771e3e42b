//! Raw kernels behind the differentiable ops. All buffers are row-major
//! `[B, C, H, W]`. Unit-stride convolutions over four or more channels run
//! directly on padded images; the rest lower each image to a column matrix
//! and multiply it with the filter bank. Batch images are independent and
//! dispatched through [`Exec`].

use super::direct;
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub height: usize,
    pub width: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn new(input: [usize; 4], weight: [usize; 4], stride: usize, padding: usize) -> Result<Self> {
        let [batch, cin, height, width] = input;
        let [cout, wcin, kh, kw] = weight;
        if wcin != cin {
            return Err(Error::Dimension(format!(
                "input has {cin} channels but the filter expects {wcin}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Config(format!("kernel must be square and odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        let span = |n: usize| -> Result<usize> {
            let padded = n + 2 * padding;
            if padded < kh || !(padded - kh).is_multiple_of(stride) {
                return Err(Error::Config(format!(
                    "size {n} with padding {padding}, kernel {kh}, stride {stride} gives a non-integral output"
                )));
            }
            Ok((padded - kh) / stride + 1)
        };
        Ok(Self {
            batch,
            cin,
            height,
            width,
            cout,
            kernel: kh,
            stride,
            padding,
            out_height: span(height)?,
            out_width: span(width)?,
        })
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_height * self.out_width
    }

    fn in_image(&self) -> usize {
        self.cin * self.height * self.width
    }

    fn out_image(&self) -> usize {
        self.cout * self.out_pixels()
    }

    /// Multiply-accumulate count of one forward pass over the whole batch.
    pub fn macs(&self) -> u64 {
        (self.batch * self.out_image() * self.col_rows()) as u64
    }
}

/// `c = beta * c + op(a) * op(b)` with `op(a)` of size m x k and `op(b)` k x n.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad`
/// falls inside the image.
fn valid_span(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let (s, p) = (g.stride as isize, g.padding as isize);
    let first = (p - kx as isize).max(0);
    let lo = ((first + s - 1) / s) as usize;
    let last = g.width as isize - 1 + p - kx as isize;
    let hi = if last < 0 { 0 } else { ((last / s) as usize + 1).min(g.out_width) };
    (lo.min(hi), hi)
}

fn im2col(g: &ConvGeom, image: &[f64], cols: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let np = g.out_pixels();
    for ci in 0..g.cin {
        let plane = &image[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                let (lo, hi) = valid_span(g, kx);
                for oy in 0..g.out_height {
                    let iy = (oy * s) as isize + ky as isize - p;
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize || lo == hi {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let ix0 = (lo * s) as isize + kx as isize - p;
                    if s == 1 {
                        line[lo..hi].copy_from_slice(&src[ix0 as usize..ix0 as usize + hi - lo]);
                    } else {
                        for (j, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[ix0 as usize + j * s];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], image: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let np = g.out_pixels();
    for ci in 0..g.cin {
        let plane = &mut image[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * np..(row + 1) * np];
                let (lo, hi) = valid_span(g, kx);
                if lo == hi {
                    continue;
                }
                let ix0 = (lo * s) as isize + kx as isize - p;
                for oy in 0..g.out_height {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &src[oy * g.out_width + lo..oy * g.out_width + hi];
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (j, v) in line.iter().enumerate() {
                        dst[ix0 as usize + j * s] += v;
                    }
                }
            }
        }
    }
}

fn lower(g: &ConvGeom, input: &[f64], exec: Exec) -> Vec<f64> {
    let chunk = g.col_rows() * g.out_pixels();
    let mut cols = vec![0.0; g.batch * chunk];
    exec.for_each_chunk(&mut cols, chunk, |b, dst| im2col(g, &input[b * g.in_image()..(b + 1) * g.in_image()], dst));
    cols
}

/// 1x1 convolutions without padding or striding read the image directly.
fn is_pointwise(g: &ConvGeom) -> bool {
    g.kernel == 1 && g.stride == 1 && g.padding == 0
}

/// Forward convolution. Returns the output and, for lowered non-pointwise
/// convolutions, the column matrices of every image for reuse by
/// [`conv2d_backward`].
pub fn conv2d_forward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    exec: Exec,
) -> (Vec<f64>, Vec<f64>) {
    if direct::applies(g) {
        return (direct::forward(g, input, weight, bias, exec), Vec::new());
    }
    let (rows, np) = (g.col_rows(), g.out_pixels());
    let pointwise = is_pointwise(g);
    let cols = if pointwise { Vec::new() } else { lower(g, input, exec) };
    let mut out = vec![0.0; g.batch * g.out_image()];
    exec.for_each_chunk(&mut out, g.out_image(), |b, dst| {
        let src = if pointwise {
            &input[b * g.in_image()..(b + 1) * g.in_image()]
        } else {
            &cols[b * rows * np..(b + 1) * rows * np]
        };
        let beta = match bias {
            Some(bias) => {
                for (co, plane) in dst.chunks_mut(np).enumerate() {
                    plane.fill(bias[co]);
                }
                1.0
            }
            None => 0.0,
        };
        gemm(g.cout, rows, np, weight, false, src, false, beta, dst);
    });
    (out, cols)
}

/// Gradients of a convolution: `(d_input, d_weight, d_bias)`. `cols` is the
/// column buffer returned by the forward pass.
pub fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    cols: &[f64],
    weight: &[f64],
    d_out: &[f64],
    need_dx: bool,
    exec: Exec,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (d_input, d_weight) = if direct::applies(g) {
        direct::backward(g, input, weight, d_out, need_dx, exec)
    } else {
        lowered_backward(g, input, cols, weight, d_out, need_dx, exec)
    };
    let np = g.out_pixels();
    let mut d_bias = vec![0.0; g.cout];
    for b in 0..g.batch {
        for (co, db) in d_bias.iter_mut().enumerate() {
            let start = b * g.out_image() + co * np;
            *db += d_out[start..start + np].iter().sum::<f64>();
        }
    }
    (d_input, d_weight, d_bias)
}

fn lowered_backward(
    g: &ConvGeom,
    input: &[f64],
    cols: &[f64],
    weight: &[f64],
    d_out: &[f64],
    need_dx: bool,
    exec: Exec,
) -> (Option<Vec<f64>>, Vec<f64>) {
    let (rows, np) = (g.col_rows(), g.out_pixels());
    let pointwise = is_pointwise(g);
    let per_image = exec.map(g.batch, |b| {
        let image = &input[b * g.in_image()..(b + 1) * g.in_image()];
        let dy = &d_out[b * g.out_image()..(b + 1) * g.out_image()];
        let mut dw = vec![0.0; g.cout * rows];
        let lowered = if pointwise { image } else { &cols[b * rows * np..(b + 1) * rows * np] };
        gemm(g.cout, np, rows, dy, false, lowered, true, 0.0, &mut dw);
        if !need_dx {
            return (Vec::new(), dw);
        }
        let mut dcols = vec![0.0; rows * np];
        gemm(rows, g.cout, np, weight, true, dy, false, 0.0, &mut dcols);
        let dx = if pointwise {
            dcols
        } else {
            let mut dx = vec![0.0; g.in_image()];
            col2im(g, &dcols, &mut dx);
            dx
        };
        (dx, dw)
    });
    let mut d_input = Vec::with_capacity(if need_dx { g.batch * g.in_image() } else { 0 });
    let mut d_weight = vec![0.0; g.cout * rows];
    for (dx, dw) in per_image {
        d_input.extend_from_slice(&dx);
        d_weight.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
    }
    (need_dx.then_some(d_input), d_weight)
}

/// Sum with four interleaved accumulators, so the adds pipeline.
pub fn lane_sum<'a>(values: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    let mut acc = [0.0; 4];
    for v in values {
        let mut quads = v.chunks_exact(4);
        for q in &mut quads {
            for (a, x) in acc.iter_mut().zip(q) {
                *a += x;
            }
        }
        for (a, x) in acc.iter_mut().zip(quads.remainder()) {
            *a += x;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// Per-channel mean and sum of squared deviations of a `[B, C, H, W]` buffer.
pub fn channel_moments(dims: [usize; 4], xs: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let [b, c, h, w] = dims;
    let (hw, m) = (h * w, (b * h * w) as f64);
    let mut mean = vec![0.0; c];
    let mut m2 = vec![0.0; c];
    let mut dev = vec![0.0; hw];
    for ch in 0..c {
        let planes = (0..b).map(|n| &xs[(n * c + ch) * hw..(n * c + ch + 1) * hw]);
        let mu = lane_sum(planes.clone()) / m;
        let mut acc = 0.0;
        for plane in planes {
            dev.iter_mut().zip(plane).for_each(|(d, &v)| *d = (v - mu) * (v - mu));
            acc += lane_sum([dev.as_slice()]);
        }
        mean[ch] = mu;
        m2[ch] = acc;
    }
    (mean, m2)
}

/// Max pooling over `k x k` windows. Returns values and the flat input
/// index of each window's maximum (first occurrence wins ties).
pub fn maxpool2d_forward(
    dims: [usize; 4],
    input: &[f64],
    k: usize,
    stride: usize,
) -> Result<(Vec<f64>, Vec<usize>, [usize; 4])> {
    let [b, c, h, w] = dims;
    if k == 0 || stride == 0 {
        return Err(Error::Config("pooling window and stride must be positive".into()));
    }
    if h < k || w < k || !(h - k).is_multiple_of(stride) || !(w - k).is_multiple_of(stride) {
        return Err(Error::Dimension(format!(
            "spatial size {h}x{w} is not divisible for pooling window {k} stride {stride}"
        )));
    }
    let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let top = base + oy * stride * w + ox * stride;
                let mut best = top;
                let mut value = input[top];
                for dy in 0..k {
                    let row = top + dy * w;
                    for (dx, &v) in input[row..row + k].iter().enumerate() {
                        if v > value {
                            value = v;
                            best = row + dx;
                        }
                    }
                }
                out.push(value);
                arg.push(best);
            }
        }
    }
    Ok((out, arg, [b, c, ho, wo]))
}

pub fn upsample_nearest_forward(dims: [usize; 4], input: &[f64], factor: usize) -> (Vec<f64>, [usize; 4]) {
    let [b, c, h, w] = dims;
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(b * c * ho * wo);
    for row in input.chunks(w) {
        let start = out.len();
        for &v in row {
            out.extend(std::iter::repeat_n(v, factor));
        }
        for _ in 1..factor {
            out.extend_from_within(start..start + wo);
        }
    }
    (out, [b, c, ho, wo])
}

pub fn upsample_nearest_backward(dims: [usize; 4], d_out: &[f64], factor: usize) -> Vec<f64> {
    let [b, c, h, w] = dims;
    let wo = w * factor;
    let mut dx = vec![0.0; b * c * h * w];
    for (dst, block) in dx.chunks_mut(w).zip(d_out.chunks(wo * factor)) {
        for line in block.chunks(wo) {
            for (d, group) in dst.iter_mut().zip(line.chunks(factor)) {
                for g in group {
                    *d += g;
                }
            }
        }
    }
    dx
}

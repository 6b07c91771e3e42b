//! Unit-stride convolution without lowering. Each image is zero-padded once.
//! The forward pass and the input gradient are register-blocked
//! correlations over the padded planes; the filter gradient is one strided
//! matrix product per kernel tap.

use super::kernels::ConvGeom;
use crate::exec::Exec;

/// Output channels and pixels accumulated together in registers.
const CB: usize = 8;
const XB: usize = 4;

/// Narrow inputs make the per-tap products too thin to pay off.
pub(super) fn applies(g: &ConvGeom) -> bool {
    g.stride == 1 && g.kernel > 1 && g.padding < g.kernel && g.cin >= 4
}

fn pad(planes: usize, h: usize, w: usize, p: usize, src: &[f64]) -> Vec<f64> {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; planes * hp * wp];
    for (dst, plane) in out.chunks_mut(hp * wp).zip(src.chunks(h * w)) {
        for (y, row) in plane.chunks(w).enumerate() {
            dst[(y + p) * wp + p..][..w].copy_from_slice(row);
        }
    }
    out
}

/// Shape of one correlation: `cin` padded planes of `(oh + k - 1) x (ow + k - 1)`
/// in, `cout` planes of `oh x ow` out.
#[derive(Clone, Copy)]
struct Corr {
    cin: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

#[inline(always)]
fn span<const C: usize, const X: usize>(
    s: Corr,
    xpad: &[f64],
    taps: &[f64],
    bias: Option<&[f64]>,
    co0: usize,
    (ox0, ox1): (usize, usize),
    out: &mut [f64],
) {
    let (hp, wp) = (s.oh + s.k - 1, s.ow + s.k - 1);
    for oy in 0..s.oh {
        let mut ox = ox0;
        while ox + X <= ox1 {
            let mut acc = [[0.0; X]; C];
            if let Some(bias) = bias {
                for (c, a) in acc.iter_mut().enumerate() {
                    *a = [bias[co0 + c]; X];
                }
            }
            for ci in 0..s.cin {
                for ky in 0..s.k {
                    let row = &xpad[(ci * hp + oy + ky) * wp + ox..];
                    for kx in 0..s.k {
                        let xv: &[f64; X] = row[kx..kx + X].try_into().unwrap();
                        let wv: &[f64; C] = taps[((ci * s.k + ky) * s.k + kx) * s.cout + co0..][..C].try_into().unwrap();
                        for c in 0..C {
                            for l in 0..X {
                                acc[c][l] += wv[c] * xv[l];
                            }
                        }
                    }
                }
            }
            for (c, a) in acc.iter().enumerate() {
                out[((co0 + c) * s.oh + oy) * s.ow + ox..][..X].copy_from_slice(a);
            }
            ox += X;
        }
    }
}

/// `taps` holds the filters as `[ci][ky][kx][co]`.
#[inline(always)]
fn correlate_body(s: Corr, xpad: &[f64], taps: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let full = s.ow / XB * XB;
    let mut co = 0;
    while co + CB <= s.cout {
        span::<CB, XB>(s, xpad, taps, bias, co, (0, full), out);
        span::<CB, 1>(s, xpad, taps, bias, co, (full, s.ow), out);
        co += CB;
    }
    for co in co..s.cout {
        span::<1, XB>(s, xpad, taps, bias, co, (0, full), out);
        span::<1, 1>(s, xpad, taps, bias, co, (full, s.ow), out);
    }
}

/// The AVX2 build is used when the CPU has it. Only element-wise products
/// and sums in a fixed order are involved, so both builds agree bitwise.
fn correlate(s: Corr, xpad: &[f64], taps: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        #[target_feature(enable = "avx2")]
        unsafe fn wide(s: Corr, xpad: &[f64], taps: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
            correlate_body(s, xpad, taps, bias, out)
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { wide(s, xpad, taps, bias, out) };
        }
    }
    correlate_body(s, xpad, taps, bias, out)
}

pub(super) fn forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>, exec: Exec) -> Vec<f64> {
    let (k, rows) = (g.kernel, g.cin * g.kernel * g.kernel);
    let mut taps = vec![0.0; weight.len()];
    for (co, filter) in weight.chunks(rows).enumerate() {
        for (r, &v) in filter.iter().enumerate() {
            taps[r * g.cout + co] = v;
        }
    }
    let s = Corr { cin: g.cin, cout: g.cout, k, oh: g.out_height, ow: g.out_width };
    let (in_image, out_image) = (g.cin * g.height * g.width, g.cout * g.out_height * g.out_width);
    let mut out = vec![0.0; g.batch * out_image];
    exec.for_each_chunk(&mut out, out_image, |b, dst| {
        let xpad = pad(g.cin, g.height, g.width, g.padding, &input[b * in_image..(b + 1) * in_image]);
        correlate(s, &xpad, &taps, bias, dst);
    });
    out
}

/// `dw` of one image: for every tap, `dy` (rows padded to the input row
/// pitch) times the shifted padded input planes.
fn filter_grad(g: &ConvGeom, xpad: &[f64], dy: &[f64]) -> Vec<f64> {
    let (k, oh, ow) = (g.kernel, g.out_height, g.out_width);
    let (hp, wp) = (oh + k - 1, ow + k - 1);
    let len = (oh - 1) * wp + ow;
    let mut dyp = vec![0.0; g.cout * oh * wp];
    for (dst, src) in dyp.chunks_mut(wp).zip(dy.chunks(ow)) {
        dst[..ow].copy_from_slice(src);
    }
    let kk = k * k;
    let mut dw = vec![0.0; g.cout * g.cin * kk];
    assert!(xpad.len() == g.cin * hp * wp && dyp.len() >= g.cout * oh * wp);
    for ky in 0..k {
        for kx in 0..k {
            let (off, tap) = (ky * wp + kx, ky * k + kx);
            // SAFETY: the last element read from the shifted planes is
            // `off + (cin - 1) * hp * wp + len - 1 < cin * hp * wp`, and every
            // written index `(co * cin + ci) * kk + tap` lies inside `dw`.
            unsafe {
                matrixmultiply::dgemm(
                    g.cout,
                    len,
                    g.cin,
                    1.0,
                    dyp.as_ptr(),
                    (oh * wp) as isize,
                    1,
                    xpad.as_ptr().add(off),
                    1,
                    (hp * wp) as isize,
                    0.0,
                    dw.as_mut_ptr().add(tap),
                    (g.cin * kk) as isize,
                    kk as isize,
                );
            }
        }
    }
    dw
}

/// `(d_input, d_weight)`; the input gradient is a correlation of the
/// padded output gradient with the flipped, transposed filters.
pub(super) fn backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    d_out: &[f64],
    need_dx: bool,
    exec: Exec,
) -> (Option<Vec<f64>>, Vec<f64>) {
    let (k, p) = (g.kernel, g.padding);
    let kk = k * k;
    let mut flipped = vec![0.0; weight.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for t in 0..kk {
                flipped[(co * kk + kk - 1 - t) * g.cin + ci] = weight[(co * g.cin + ci) * kk + t];
            }
        }
    }
    let s = Corr { cin: g.cout, cout: g.cin, k, oh: g.height, ow: g.width };
    let (in_image, out_image) = (g.cin * g.height * g.width, g.cout * g.out_height * g.out_width);
    let per_image = exec.map(g.batch, |b| {
        let dy = &d_out[b * out_image..(b + 1) * out_image];
        let xpad = pad(g.cin, g.height, g.width, p, &input[b * in_image..(b + 1) * in_image]);
        let dw = filter_grad(g, &xpad, dy);
        let mut dx = Vec::new();
        if need_dx {
            let dpad = pad(g.cout, g.out_height, g.out_width, k - 1 - p, dy);
            dx = vec![0.0; in_image];
            correlate(s, &dpad, &flipped, None, &mut dx);
        }
        (dx, dw)
    });
    let mut d_input = Vec::with_capacity(if need_dx { g.batch * in_image } else { 0 });
    let mut d_weight = vec![0.0; weight.len()];
    for (dx, dw) in per_image {
        d_input.extend_from_slice(&dx);
        d_weight.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
    }
    (need_dx.then_some(d_input), d_weight)
}

//! Test-only oracles, independent of the engine's kernels.
#![allow(dead_code)]

use cdcl_core::rng::rng;
use cdcl_core::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

/// Quintuple-loop cross-correlation over `[B, Cin, H, W]` with `[Cout, Cin, K, K]`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    input: &[f64],
    [b, cin, h, w]: [usize; 4],
    weight: &[f64],
    [cout, _, k, _]: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; b * cout * ho * wo];
    for n in 0..b {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bb| bb[co]);
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = input[((n * cin + ci) * h + iy as usize) * w + ix as usize];
                                let wv = weight[((co * cin + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, [b, cout, ho, wo])
}

pub fn random_tensor(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| lo + (hi - lo) * r.random::<f64>()).collect()).unwrap()
}

/// Random values in [0.05, 1] with random sign, so nothing sits on a ReLU kink.
pub fn random_away_from_zero(seed: u64, shape: &[usize]) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = 0.05 + 0.95 * r.random::<f64>();
            if r.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Relative error used by every gradient check: `|a - n| / max(|a|, |n|)`,
/// with pairs where both magnitudes are below 1e-7 compared absolutely.
pub fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-7 {
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

/// Compares the tape gradient of every parameter in `store` against central
/// finite differences of `loss_fn`. Returns the maximum relative error.
pub fn grad_check<F>(store: &ParamStore, loss_fn: F) -> f64
where
    F: Fn(&ParamStore, &mut Tape) -> Var,
{
    let mut analytic = store.clone();
    analytic.clear_grads();
    let mut tape = Tape::new();
    let loss = loss_fn(&analytic, &mut tape);
    tape.backward(loss, &mut analytic).unwrap();

    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let l = loss_fn(s, &mut t);
        t.value(l).item().unwrap()
    };

    let mut worst: f64 = 0.0;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        let g = analytic.get(id).grad().map_or(vec![0.0; n], <[f64]>::to_vec);
        for (i, &gi) in g.iter().enumerate() {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[i] += FD_STEP;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(gi, numeric));
        }
    }
    worst
}

/// `sum(y * r)` for a fixed random projection `r`, turning any op output
/// into a scalar with a non-trivial upstream gradient.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let r = random_tensor(seed, tape.shape(y), -1.0, 1.0);
    let r = tape.constant(r);
    let p = tape.mul(y, r).unwrap();
    tape.sum(p)
}

/// Small synthetic dataset: 16x16 images, classes background/disk/square
/// (plus triangle when `classes == 4`).
pub fn tiny_dataset(name: &str, classes: usize, offset: f64, size: usize, seed: u64) -> cdcl_core::data::Dataset {
    use cdcl_core::data::{BackgroundStyle, DatasetSpec, ObjectStyle, Shape, Shift};
    let all = ["background", "disk", "square", "triangle"];
    let shapes = [Shape::Disk, Shape::Square, Shape::Triangle];
    let objects = (1..classes)
        .map(|c| ObjectStyle {
            class: c,
            shape: shapes[c - 1],
            color: [0.2 * c as f64, 0.8 - 0.2 * c as f64, 0.5],
            color_jitter: 0.05,
            stripe_amplitude: 0.0,
            stripe_period: 4.0,
        })
        .collect();
    let spec = DatasetSpec {
        name: name.to_string(),
        class_names: all[..classes].iter().map(|s| s.to_string()).collect(),
        shift: Shift { intensity_offset: offset, contrast_scale: 1.0, noise_sigma: 0.02 },
        background: BackgroundStyle { color: [0.4, 0.4, 0.4], color_jitter: 0.05, texture_amplitude: 0.05, grain: 0.02 },
        objects,
        objects_per_image: [1, 3],
        object_radius: [2.0, 5.0],
        height: 16,
        width: 16,
        size,
        seed,
    };
    cdcl_core::data::generate(&spec).unwrap()
}

/// Random images and labels for dataset `id` with `classes` classes.
pub fn random_batch(id: usize, classes: usize, b: usize, h: usize, w: usize, seed: u64) -> cdcl_core::data::Batch {
    use cdcl_core::tensor::Labels;
    let mut r = rng(seed);
    let images = random_tensor(seed ^ 0x5eed, &[b, 3, h, w], 0.0, 1.0);
    let labels: Vec<u8> = (0..b * h * w)
        .map(|_| if r.random::<f64>() < 0.1 { 255 } else { r.random_range(0..classes) as u8 })
        .collect();
    cdcl_core::data::Batch {
        images,
        labels: Labels::new([b, h, w], labels).unwrap(),
        dataset: cdcl_core::dab::DatasetId(id),
        indices: (0..b).collect(),
    }
}

/// Every gradient in the store, zeros where absent.
pub fn all_grads(store: &ParamStore) -> Vec<Vec<f64>> {
    store
        .ids()
        .map(|id| {
            let t = store.get(id);
            t.grad().map_or(vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect()
}

pub fn all_values(store: &ParamStore) -> Vec<Vec<f64>> {
    store.ids().map(|id| store.get(id).data().to_vec()).collect()
}

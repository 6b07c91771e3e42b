//! The shifted-triptych benchmark: three synthetic datasets drawn from one
//! scene distribution under different appearance shifts, plus a held-out
//! fourth shift for zero-shot evaluation.
//!
//! | dataset | classes                                  | offset | contrast | noise |
//! |---------|------------------------------------------|--------|----------|-------|
//! | alpha   | background, disk, square, triangle       |  0.00  |   1.00   | 0.02  |
//! | beta    | background, disk, square, triangle       |  0.45  |   0.50   | 0.04  |
//! | gamma   | background, disk, block (square+triangle)|  0.05  |   0.50   | 0.03  |
//! | delta   | as alpha (held out)                      | -0.15  |   1.25   | 0.03  |
//!
//! Beta is washed out and gamma is dim, on opposite sides of alpha, so
//! statistics pooled over all three match none of them.

use super::synth::{BackgroundStyle, DatasetSpec, ObjectStyle, Shape, Shift};
use crate::rng::derive_seed;

pub const TRAIN_SIZE: usize = 200;
pub const VAL_SIZE: usize = 50;
pub const IMAGE_SIZE: usize = 64;

fn classes(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn objects(square_class: usize, triangle_class: usize) -> Vec<ObjectStyle> {
    let style = |class, shape, color| ObjectStyle {
        class,
        shape,
        color,
        color_jitter: 0.06,
        stripe_amplitude: 0.0,
        stripe_period: 6.0,
    };
    vec![
        style(1, Shape::Disk, [0.70, 0.35, 0.30]),
        style(square_class, Shape::Square, [0.35, 0.62, 0.35]),
        style(triangle_class, Shape::Triangle, [0.35, 0.40, 0.68]),
    ]
}

fn spec(name: &str, class_names: Vec<String>, objects: Vec<ObjectStyle>, shift: Shift, size: usize, seed: u64) -> DatasetSpec {
    DatasetSpec {
        name: name.to_string(),
        class_names,
        shift,
        background: BackgroundStyle { color: [0.45, 0.45, 0.42], color_jitter: 0.08, texture_amplitude: 0.10, grain: 0.04 },
        objects,
        objects_per_image: [3, 6],
        object_radius: [6.0, 14.0],
        height: IMAGE_SIZE,
        width: IMAGE_SIZE,
        size,
        seed,
    }
}

fn members() -> Vec<(&'static str, Vec<String>, Vec<ObjectStyle>, Shift)> {
    let four = classes(&["background", "disk", "square", "triangle"]);
    vec![
        ("alpha", four.clone(), objects(2, 3), Shift { intensity_offset: 0.0, contrast_scale: 1.0, noise_sigma: 0.02 }),
        ("beta", four, objects(2, 3), Shift { intensity_offset: 0.45, contrast_scale: 0.5, noise_sigma: 0.04 }),
        (
            "gamma",
            classes(&["background", "disk", "block"]),
            objects(2, 2),
            Shift { intensity_offset: 0.05, contrast_scale: 0.5, noise_sigma: 0.03 },
        ),
    ]
}

/// `(train, val)` specs of the three benchmark datasets.
pub fn triptych_specs(seed: u64) -> Vec<(DatasetSpec, DatasetSpec)> {
    members()
        .into_iter()
        .enumerate()
        .map(|(i, (name, cls, obj, shift))| {
            let train = spec(&format!("{name}-train"), cls.clone(), obj.clone(), shift, TRAIN_SIZE, derive_seed(seed, 2 * i as u64));
            let val = spec(&format!("{name}-val"), cls, obj, shift, VAL_SIZE, derive_seed(seed, 2 * i as u64 + 1));
            (train, val)
        })
        .collect()
}

/// A fourth dataset with alpha's label space under a shift none of the
/// triptych members uses.
pub fn held_out_spec(seed: u64, size: usize) -> DatasetSpec {
    spec(
        "delta",
        classes(&["background", "disk", "square", "triangle"]),
        objects(2, 3),
        Shift { intensity_offset: -0.15, contrast_scale: 1.25, noise_sigma: 0.03 },
        size,
        derive_seed(seed, 100),
    )
}

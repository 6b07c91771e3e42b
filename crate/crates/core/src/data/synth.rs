//! Procedural scenes: textured backgrounds with colored geometric objects.
//! Each object kind carries a class label; labels are rasterized from the
//! same geometry as the image, before the dataset's appearance shift is
//! applied.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::{derive_seed, rng, SplitMix64};

/// Appearance shift `x <- clamp(contrast_scale * x + intensity_offset + N(0, noise_sigma^2), 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shift {
    pub intensity_offset: f64,
    pub contrast_scale: f64,
    pub noise_sigma: f64,
}

impl Shift {
    pub const IDENTITY: Self = Self { intensity_offset: 0.0, contrast_scale: 1.0, noise_sigma: 0.0 };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Diamond,
    Ring,
    Cross,
}

impl Shape {
    /// Whether offset `(dx, dy)` from the center lies inside a shape of radius `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Disk => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            Shape::Triangle => {
                // apex up, base at dy = 0.7r
                dy <= 0.7 * r && dy >= -r && dx.abs() <= (dy + r) * 0.6
            }
            Shape::Diamond => dx.abs() + dy.abs() <= r,
            Shape::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.3 * r * r
            }
            Shape::Cross => {
                (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r)
            }
        }
    }
}

/// One kind of foreground object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectStyle {
    /// Class index painted into the label map (>= 1).
    pub class: usize,
    pub shape: Shape,
    /// Base RGB color.
    pub color: [f64; 3],
    /// Half-width of the uniform per-channel color jitter.
    pub color_jitter: f64,
    /// Amplitude of a stripe pattern modulating the object's intensity.
    pub stripe_amplitude: f64,
    /// Stripe period in pixels (ignored when the amplitude is 0).
    pub stripe_period: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundStyle {
    pub color: [f64; 3],
    pub color_jitter: f64,
    /// Amplitude of the low-frequency sinusoidal texture.
    pub texture_amplitude: f64,
    /// Amplitude of per-pixel uniform grain.
    pub grain: f64,
}

/// Full description of a synthetic dataset; equal specs generate
/// bit-identical datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    /// Index 0 must be `"background"`.
    pub class_names: Vec<String>,
    pub shift: Shift,
    pub background: BackgroundStyle,
    pub objects: Vec<ObjectStyle>,
    /// Objects per image, inclusive range.
    pub objects_per_image: [usize; 2],
    /// Object radius in pixels, inclusive range.
    pub object_radius: [f64; 2],
    pub height: usize,
    pub width: usize,
    pub size: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_names.first().map(String::as_str) != Some("background") {
            return Err(Error::Config(format!("{}: class 0 must be \"background\"", self.name)));
        }
        if self.class_names.len() < 2 || self.class_names.len() > 255 {
            return Err(Error::Config(format!("{}: need 2..=255 classes", self.name)));
        }
        if self.size == 0 {
            return Err(Error::Config(format!("{}: size must be at least 1", self.name)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!("{}: empty image size", self.name)));
        }
        if self.objects.is_empty() {
            return Err(Error::Config(format!("{}: no object styles", self.name)));
        }
        if let Some(o) = self.objects.iter().find(|o| o.class == 0 || o.class >= self.class_names.len()) {
            return Err(Error::Config(format!("{}: object class {} is not a foreground class", self.name, o.class)));
        }
        let [lo, hi] = self.objects_per_image;
        let [rlo, rhi] = self.object_radius;
        if lo > hi || !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::Config(format!("{}: invalid object count or radius range", self.name)));
        }
        if !(self.shift.contrast_scale.is_finite() && self.shift.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("{}: invalid shift", self.name)));
        }
        Ok(())
    }
}

/// Clean rendering of sample `index`: image `[3, H, W]` and labels.
pub fn render_unshifted(spec: &DatasetSpec, index: usize) -> (Vec<f64>, Vec<u8>) {
    let (h, w) = (spec.height, spec.width);
    let mut r = rng(derive_seed(spec.seed, 2 * index as u64));
    let bg = &spec.background;
    let base: Vec<f64> = bg.color.iter().map(|c| c + bg.color_jitter * (2.0 * r.random::<f64>() - 1.0)).collect();
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            let angle = r.random::<f64>() * PI;
            let freq = 2.0 * PI / (8.0 + 24.0 * r.random::<f64>());
            (angle.cos() * freq, angle.sin() * freq, r.random::<f64>() * 2.0 * PI)
        })
        .collect();
    let mut image = vec![0.0; 3 * h * w];
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let tex: f64 = waves.iter().map(|(fx, fy, ph)| (fx * x as f64 + fy * y as f64 + ph).sin()).sum::<f64>() / 2.0;
            for (c, b) in base.iter().enumerate() {
                let grain = bg.grain * (2.0 * r.random::<f64>() - 1.0);
                image[(c * h + y) * w + x] = b + bg.texture_amplitude * tex + grain;
            }
        }
    }

    let [lo, hi] = spec.objects_per_image;
    let count = r.random_range(lo..=hi);
    for _ in 0..count {
        let style = &spec.objects[r.random_range(0..spec.objects.len())];
        let [rlo, rhi] = spec.object_radius;
        let radius = rlo + (rhi - rlo) * r.random::<f64>();
        let cx = r.random::<f64>() * w as f64;
        let cy = r.random::<f64>() * h as f64;
        let color: Vec<f64> = style
            .color
            .iter()
            .map(|c| c + style.color_jitter * (2.0 * r.random::<f64>() - 1.0))
            .collect();
        let stripe_angle = r.random::<f64>() * PI;
        let (sx, sy) = (stripe_angle.cos(), stripe_angle.sin());
        let y0 = (cy - radius).floor().max(0.0) as usize;
        let y1 = ((cy + radius).ceil() as usize).min(h.saturating_sub(1));
        let x0 = (cx - radius).floor().max(0.0) as usize;
        let x1 = ((cx + radius).ceil() as usize).min(w.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if !style.shape.contains(dx, dy, radius) {
                    continue;
                }
                let stripe = if style.stripe_amplitude > 0.0 {
                    style.stripe_amplitude * (2.0 * PI * (sx * dx + sy * dy) / style.stripe_period).sin()
                } else {
                    0.0
                };
                for (c, col) in color.iter().enumerate() {
                    image[(c * h + y) * w + x] = col + stripe;
                }
                labels[y * w + x] = style.class as u8;
            }
        }
    }
    (image, labels)
}

fn shift_noise(r: &mut SplitMix64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        sigma * r.sample::<f64, _>(StandardNormal)
    }
}

/// Pre-clamp shifted image of sample `index`.
pub fn render_shifted_unclamped(spec: &DatasetSpec, index: usize) -> (Vec<f64>, Vec<u8>) {
    let (clean, labels) = render_unshifted(spec, index);
    let s = spec.shift;
    let mut r = rng(derive_seed(spec.seed, 2 * index as u64 + 1));
    let image = clean
        .iter()
        .map(|&v| s.contrast_scale * v + s.intensity_offset + shift_noise(&mut r, s.noise_sigma))
        .collect();
    (image, labels)
}

fn render_sample(spec: &DatasetSpec, index: usize) -> Sample {
    let (image, labels) = render_shifted_unclamped(spec, index);
    Sample { image: image.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(), labels }
}

/// Renders every sample of `spec` in memory.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    generate_with(spec, Exec::default())
}

pub fn generate_with(spec: &DatasetSpec, exec: Exec) -> Result<Dataset> {
    spec.validate()?;
    let samples = exec.map(spec.size, |i| render_sample(spec, i));
    Ok(Dataset {
        name: spec.name.clone(),
        class_names: spec.class_names.clone(),
        shift: spec.shift,
        seed: spec.seed,
        height: spec.height,
        width: spec.width,
        samples,
    })
}

/// Renders `spec` and writes it to `dir`.
pub fn generate_to_dir(spec: &DatasetSpec, dir: &Path) -> Result<Dataset> {
    let ds = generate(spec)?;
    ds.write_to_dir(dir)?;
    Ok(ds)
}

//! Procedural "shapes on a background" domains. A source spec draws a large,
//! varied set; a target shift (hue rotation plus a stripe texture) applied to a
//! small draw yields the few-shot target set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSource, ImageDataset};
use crate::error::{config_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

const SHAPES: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attributes {
    pub shape: ShapeKind,
    /// Hue in turns, [0, 1).
    pub hue: f64,
    /// Centre, in units of the image side.
    pub x: f64,
    pub y: f64,
    /// Half-extent, in units of the image side.
    pub scale: f64,
    pub accessory: bool,
    pub background: f64,
    pub striped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetShift {
    /// Added to every hue, in turns.
    pub hue_rotation: f64,
    pub stripes: bool,
}

impl Default for TargetShift {
    fn default() -> Self {
        Self { hue_rotation: 0.5, stripes: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDomainSpec {
    pub count: usize,
    pub seed: u64,
    pub resolution: usize,
    pub hue_range: (f64, f64),
    pub position_range: (f64, f64),
    pub scale_range: (f64, f64),
    pub background_range: (f64, f64),
    pub accessory_probability: f64,
    pub target_shift: Option<TargetShift>,
}

impl SynthDomainSpec {
    /// The default source domain: hues confined to the first 40% of the wheel.
    pub fn source(count: usize, seed: u64, resolution: usize) -> Self {
        Self {
            count,
            seed,
            resolution,
            hue_range: (0.0, 0.4),
            position_range: (0.3, 0.7),
            scale_range: (0.15, 0.3),
            background_range: (-0.9, -0.3),
            accessory_probability: 0.5,
            target_shift: None,
        }
    }

    /// The default few-shot target: the source family under a half-turn hue shift with stripes.
    pub fn target(count: usize, seed: u64, resolution: usize) -> Self {
        Self { target_shift: Some(TargetShift::default()), ..Self::source(count, seed, resolution) }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("hue_range", self.hue_range),
            ("position_range", self.position_range),
            ("scale_range", self.scale_range),
            ("background_range", self.background_range),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo < hi) {
                return Err(config_err!("{name} is empty or degenerate: [{lo}, {hi}]"));
            }
        }
        if self.count == 0 {
            return Err(config_err!("count must be >= 1"));
        }
        if self.resolution < 8 {
            return Err(config_err!("resolution must be >= 8"));
        }
        if !(0.0..=1.0).contains(&self.accessory_probability) {
            return Err(config_err!("accessory_probability must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Hue (turns) and saturation of an RGB triple in [0, 1].
pub fn rgb_to_hue_sat(rgb: [f64; 3]) -> (f64, f64) {
    let max = rgb.iter().copied().fold(f64::MIN, f64::max);
    let min = rgb.iter().copied().fold(f64::MAX, f64::min);
    let d = max - min;
    if d <= 0.0 || max <= 0.0 {
        return (0.0, 0.0);
    }
    let h = if max == rgb[0] {
        ((rgb[1] - rgb[2]) / d).rem_euclid(6.0)
    } else if max == rgb[1] {
        (rgb[2] - rgb[0]) / d + 2.0
    } else {
        (rgb[0] - rgb[1]) / d + 4.0
    };
    (h / 6.0, d / max)
}

fn inside(a: &Attributes, px: f64, py: f64) -> bool {
    let (dx, dy) = (px - a.x, py - a.y);
    match a.shape {
        ShapeKind::Circle => dx * dx + dy * dy <= a.scale * a.scale,
        ShapeKind::Square => dx.abs() <= a.scale && dy.abs() <= a.scale,
        ShapeKind::Triangle => {
            // Apex up; base at y + scale.
            let t = (dy + a.scale) / (2.0 * a.scale);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * a.scale
        }
    }
}

/// Render one image (3, R, R) in [−1, 1], 2×2 supersampled.
pub fn render(a: &Attributes, resolution: usize) -> Vec<f32> {
    let r = resolution;
    let fill = hsv_to_rgb(a.hue, 0.85, 0.95);
    let bg = (a.background + 1.0) / 2.0;
    let mut out = vec![0.0f32; 3 * r * r];
    let acc = (a.x + 0.7 * a.scale, a.y - 0.7 * a.scale, 0.25 * a.scale);
    for y in 0..r {
        for x in 0..r {
            let mut rgb = [0.0f64; 3];
            for sy in 0..2 {
                for sx in 0..2 {
                    let px = (x as f64 + 0.25 + 0.5 * sx as f64) / r as f64;
                    let py = (y as f64 + 0.25 + 0.5 * sy as f64) / r as f64;
                    let mut c = [bg * 0.9, bg * 0.9, bg];
                    if inside(a, px, py) {
                        c = fill;
                        if a.striped && ((py * r as f64 / 2.0).floor() as i64) % 2 == 0 {
                            c = [c[0] * 0.55, c[1] * 0.55, c[2] * 0.55];
                        }
                    }
                    if a.accessory && (px - acc.0).powi(2) + (py - acc.1).powi(2) <= acc.2 * acc.2 {
                        c = [1.0, 1.0, 1.0];
                    }
                    for k in 0..3 {
                        rgb[k] += c[k] / 4.0;
                    }
                }
            }
            for k in 0..3 {
                out[k * r * r + y * r + x] = (rgb[k] * 2.0 - 1.0) as f32;
            }
        }
    }
    out
}

fn draw_attributes(spec: &SynthDomainSpec, rng: &mut ChaCha8Rng) -> Attributes {
    let u = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| rng.random_range(lo..hi);
    let mut a = Attributes {
        shape: SHAPES[rng.random_range(0..SHAPES.len())],
        hue: u(rng, spec.hue_range),
        x: u(rng, spec.position_range),
        y: u(rng, spec.position_range),
        scale: u(rng, spec.scale_range),
        accessory: rng.random_bool(spec.accessory_probability),
        background: u(rng, spec.background_range),
        striped: false,
    };
    if let Some(shift) = spec.target_shift {
        a.hue = (a.hue + shift.hue_rotation).rem_euclid(1.0);
        a.striped = shift.stripes;
    }
    a
}

/// Deterministic dataset for `spec`, with attribute labels retained.
pub fn synth_domain(spec: &SynthDomainSpec) -> Result<ImageDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let r = spec.resolution;
    let mut data = Vec::with_capacity(spec.count * 3 * r * r);
    let mut labels = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let a = draw_attributes(spec, &mut rng);
        data.extend(render(&a, r));
        labels.push(a);
    }
    Ok(ImageDataset {
        images: Tensor::new(vec![spec.count, 3, r, r], data)?,
        resolution: r,
        source: DatasetSource::Synthetic { description: spec.describe() },
        labels: Some(labels),
    })
}

/// Index of the most populated bin of the hue histogram over saturated pixels.
pub fn hue_histogram_peak(chw: &[f32], resolution: usize, bins: usize) -> Option<usize> {
    let plane = resolution * resolution;
    let mut hist = vec![0usize; bins];
    for p in 0..plane {
        let rgb = [0, 1, 2].map(|k| (chw[k * plane + p] as f64 + 1.0) / 2.0);
        let (h, s) = rgb_to_hue_sat(rgb);
        if s > 0.4 {
            hist[((h * bins as f64) as usize).min(bins - 1)] += 1;
        }
    }
    let (idx, &count) = hist.iter().enumerate().max_by_key(|(_, &c)| c)?;
    (count > 0).then_some(idx)
}

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{one_hot, DomainSample};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
}

impl ShapeKind {
    pub const REGISTERED: [ShapeKind; 5] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
    ];

    /// Membership test in shape-local coordinates, shape radius 1.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Circle => u * u + v * v <= 1.0,
            ShapeKind::Square => u.abs().max(v.abs()) <= 0.8,
            ShapeKind::Triangle => (-0.8..=0.75).contains(&v) && u.abs() <= 0.6 * (v + 0.8),
            ShapeKind::Cross => (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95),
            ShapeKind::Ring => (0.55..=1.0).contains(&(u * u + v * v).sqrt()),
        }
    }
}

/// Per-sample geometry and intensity of a rendered shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latent {
    /// Center in pixels.
    pub cx: f64,
    pub cy: f64,
    /// Radius in pixels.
    pub radius: f64,
    pub rotation: f64,
    pub foreground: f64,
    pub background: f64,
}

impl Latent {
    pub fn sample(size: usize, rng: &mut Rng) -> Self {
        let s = size as f64;
        let radius = rng.uniform_range(0.22, 0.36) * s;
        let margin = radius + 1.0;
        Latent {
            cx: rng.uniform_range(margin, s - margin),
            cy: rng.uniform_range(margin, s - margin),
            radius,
            rotation: rng.uniform_range(0.0, 2.0 * PI),
            foreground: rng.uniform_range(0.6, 1.0),
            background: rng.uniform_range(0.0, 0.3),
        }
    }
}

/// Grayscale `[size, size]` render with 2x2 supersampling.
pub fn render_shape(kind: ShapeKind, latent: &Latent, size: usize) -> Vec<f64> {
    let (sin, cos) = latent.rotation.sin_cos();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let dx = (x as f64 + ox - latent.cx) / latent.radius;
                let dy = (y as f64 + oy - latent.cy) / latent.radius;
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                hits += kind.contains(u, v) as usize;
            }
            let cover = hits as f64 / 4.0;
            out[y * size + x] = latent.background + cover * (latent.foreground - latent.background);
        }
    }
    out
}

/// Appearance transform of one domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainStyle {
    /// Gray replicated to three channels.
    Gray,
    /// One channel inverted, then hue-rotated by `hue_degrees` plus a
    /// uniform per-sample jitter of up to `jitter_degrees`.
    InvertHue {
        channel: usize,
        hue_degrees: f64,
        jitter_degrees: f64,
    },
    /// Additive sinusoid with seeded frequency and phase per channel.
    Texture { amplitude: f64, max_frequency: f64 },
    /// Repeated 3x3 box blur followed by min-max contrast stretch.
    BlurContrast { passes: usize },
}

impl DomainStyle {
    pub fn defaults() -> Vec<DomainStyle> {
        vec![
            DomainStyle::Gray,
            DomainStyle::InvertHue {
                channel: 0,
                hue_degrees: 120.0,
                jitter_degrees: 20.0,
            },
            DomainStyle::Texture {
                amplitude: 0.25,
                max_frequency: 4.0,
            },
            DomainStyle::BlurContrast { passes: 2 },
        ]
    }
}

fn hue_rotation(degrees: f64) -> [[f64; 3]; 3] {
    let (s, c) = degrees.to_radians().sin_cos();
    let a = (1.0 - c) / 3.0;
    let b = (1.0f64 / 3.0).sqrt() * s;
    [[c + a, a - b, a + b], [a + b, c + a, a - b], [a - b, a + b, c + a]]
}

fn box_blur(plane: &[f64], size: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, size as isize - 1) as usize;
        let x = x.clamp(0, size as isize - 1) as usize;
        plane[y * size + x]
    };
    let mut out = vec![0.0; plane.len()];
    for y in 0..size as isize {
        for x in 0..size as isize {
            let mut s = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    s += at(y + dy, x + dx);
                }
            }
            out[y as usize * size + x as usize] = s / 9.0;
        }
    }
    out
}

/// Turn a grayscale render into a `[3, size, size]` image in the given
/// style. `rng` supplies the per-sample noise of stochastic styles.
pub fn apply_style(gray: &[f64], size: usize, style: &DomainStyle, rng: &mut Rng) -> Tensor<f32> {
    let n = size * size;
    let mut rgb = vec![0.0f64; 3 * n];
    match *style {
        DomainStyle::Gray => {
            for c in 0..3 {
                rgb[c * n..(c + 1) * n].copy_from_slice(gray);
            }
        }
        DomainStyle::InvertHue {
            channel,
            hue_degrees,
            jitter_degrees,
        } => {
            let m = hue_rotation(hue_degrees + jitter_degrees * (2.0 * rng.uniform() - 1.0));
            for i in 0..n {
                let mut p = [gray[i]; 3];
                p[channel % 3] = 1.0 - gray[i];
                for c in 0..3 {
                    rgb[c * n + i] = m[c][0] * p[0] + m[c][1] * p[1] + m[c][2] * p[2];
                }
            }
        }
        DomainStyle::Texture {
            amplitude,
            max_frequency,
        } => {
            for c in 0..3 {
                let fx = rng.uniform_range(1.0, max_frequency);
                let fy = rng.uniform_range(1.0, max_frequency);
                let phase = rng.uniform_range(0.0, 2.0 * PI);
                for y in 0..size {
                    for x in 0..size {
                        let t = 2.0 * PI * (fx * x as f64 + fy * y as f64) / size as f64 + phase;
                        rgb[c * n + y * size + x] = gray[y * size + x] + amplitude * t.sin();
                    }
                }
            }
        }
        DomainStyle::BlurContrast { passes } => {
            let mut plane = gray.to_vec();
            for _ in 0..passes {
                plane = box_blur(&plane, size);
            }
            let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1e-6);
            for c in 0..3 {
                for i in 0..n {
                    rgb[c * n + i] = (plane[i] - lo) / span;
                }
            }
        }
    }
    let data = rgb.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Tensor::from_vec(&[3, size, size], data).expect("shape matches")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDatasetConfig {
    pub num_domains: usize,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Per-sample Gaussian pixel noise applied before styling.
    pub noise_std: f64,
    pub styles: Vec<DomainStyle>,
}

impl Default for SyntheticDatasetConfig {
    fn default() -> Self {
        SyntheticDatasetConfig {
            num_domains: 4,
            num_classes: 5,
            samples_per_class: 200,
            image_size: 32,
            seed: 0,
            noise_std: 0.03,
            styles: DomainStyle::defaults(),
        }
    }
}

impl SyntheticDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 2 || self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 domains and 2 classes, got {} and {}",
                self.num_domains, self.num_classes
            )));
        }
        if self.num_classes > ShapeKind::REGISTERED.len() {
            return Err(Error::Config(format!(
                "{} classes requested but only {} shapes are registered",
                self.num_classes,
                ShapeKind::REGISTERED.len()
            )));
        }
        if self.styles.len() < self.num_domains {
            return Err(Error::Config(format!(
                "{} domains but only {} styles configured",
                self.num_domains,
                self.styles.len()
            )));
        }
        if self.image_size < 8 || self.samples_per_class == 0 {
            return Err(Error::Config("image_size must be >= 8 and samples_per_class > 0".into()));
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.num_domains * self.num_classes * self.samples_per_class
    }
}

/// Render the full dataset, ordered by domain, then class, then index.
pub fn generate_dataset(config: &SyntheticDatasetConfig) -> Result<Vec<DomainSample>> {
    config.validate()?;
    let root = Rng::new(config.seed);
    let size = config.image_size;
    let mut out = Vec::with_capacity(config.num_samples());
    for d in 0..config.num_domains {
        let domain_rng = root.derive(d as u64);
        for c in 0..config.num_classes {
            let kind = ShapeKind::REGISTERED[c];
            for i in 0..config.samples_per_class {
                let mut rng = domain_rng.derive((c * config.samples_per_class + i) as u64);
                let latent = Latent::sample(size, &mut rng);
                let mut gray = render_shape(kind, &latent, size);
                for v in &mut gray {
                    *v += config.noise_std * rng.normal();
                }
                let image = apply_style(&gray, size, &config.styles[d], &mut rng);
                out.push(DomainSample::new(image, one_hot(c, config.num_classes), Some(d))?);
            }
        }
    }
    Ok(out)
}

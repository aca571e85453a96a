//! Procedural desk-scale corpus: per-class shape families rendered as
//! textured "photos" on cluttered backgrounds plus free-hand style
//! outline sketches. Everything is a pure function of the spec,
//! including the seed, so repeated generation is byte-identical.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::util::{derive_seed, fnv1a64};

use super::{write_manifest, LabelSpace, Modality, PixelSource, Sample, ZeroShotSplit};

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub sketches_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Seen-class count override; `None` applies the default 3:1 ratio.
    pub seen_classes: Option<usize>,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<usize> {
        if self.num_classes < 4 {
            return Err(Error::Validation(format!(
                "num_classes={} too small: need at least 4 to form a nonempty unseen set \
                 alongside the >=2 seen classes triplet mining requires",
                self.num_classes
            )));
        }
        if self.image_size < 32 {
            return Err(Error::Validation(format!(
                "image_size={} too small (minimum 32)",
                self.image_size
            )));
        }
        if self.images_per_class == 0 || self.sketches_per_class == 0 {
            return Err(Error::Validation(
                "images_per_class and sketches_per_class must be positive".into(),
            ));
        }
        let seen = self
            .seen_classes
            .unwrap_or((self.num_classes * 3).div_ceil(4));
        if seen < 2 || seen >= self.num_classes {
            return Err(Error::Validation(format!(
                "seen_classes={seen} must satisfy 2 <= seen < num_classes={}",
                self.num_classes
            )));
        }
        Ok(seen)
    }
}

#[derive(Clone, Copy)]
enum Family {
    Polygon,
    Ellipse,
    Star,
    Compound,
}

impl Family {
    fn of(class_idx: usize) -> Family {
        match class_idx % 4 {
            0 => Family::Polygon,
            1 => Family::Ellipse,
            2 => Family::Star,
            _ => Family::Compound,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Family::Polygon => "polygon",
            Family::Ellipse => "ellipse",
            Family::Star => "star",
            Family::Compound => "compound",
        }
    }
}

#[derive(Clone, Copy)]
enum Pattern {
    Stripes { angle: f64, period: f64 },
    Checker { period: f64 },
    Dots { period: f64 },
}

/// Frozen per-class appearance: canonical outline loops (unit scale,
/// centered) plus the fill pattern shared by every image of the class.
struct ClassStyle {
    name: String,
    loops: Vec<Vec<(f64, f64)>>,
    base_rgb: [f64; 3],
    pattern: Pattern,
}

fn closed_loop(n: usize, mut radius: impl FnMut(usize, f64) -> f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let t = 2.0 * PI * i as f64 / n as f64;
            let r = radius(i, t);
            (r * t.cos(), r * t.sin())
        })
        .collect()
}

fn class_style(class_idx: usize, seed: u64) -> ClassStyle {
    let tag = fnv1a64(format!("class-style/{class_idx}").as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag));
    let family = Family::of(class_idx);
    let loops = match family {
        Family::Polygon => {
            let k = rng.random_range(3..=6usize);
            let radii: Vec<f64> = (0..k).map(|_| 0.72 + 0.28 * rng.random::<f64>()).collect();
            vec![closed_loop(k, |i, _| radii[i])]
        }
        Family::Ellipse => {
            let b = 0.42 + 0.36 * rng.random::<f64>();
            vec![closed_loop(48, |_, t| {
                let c = t.cos();
                let s = t.sin();
                1.0 / (c * c + (s / b) * (s / b)).sqrt()
            })]
        }
        Family::Star => {
            let spikes = rng.random_range(5..=7usize);
            let inner = 0.34 + 0.22 * rng.random::<f64>();
            vec![closed_loop(2 * spikes, |i, _| {
                if i % 2 == 0 {
                    1.0
                } else {
                    inner
                }
            })]
        }
        Family::Compound => {
            let b = 0.5 + 0.15 * rng.random::<f64>();
            let body = closed_loop(40, |_, t| {
                let c = t.cos();
                let s = t.sin();
                0.9 / (c * c + (s / b) * (s / b)).sqrt()
            });
            let head_angle = rng.random::<f64>() * 2.0 * PI;
            let head_r = 0.3 + 0.12 * rng.random::<f64>();
            let (hx, hy) = (0.95 * head_angle.cos(), 0.95 * head_angle.sin());
            let sides = rng.random_range(3..=5usize);
            let head: Vec<(f64, f64)> = (0..sides)
                .map(|i| {
                    let t = 2.0 * PI * i as f64 / sides as f64;
                    (hx + head_r * t.cos(), hy + head_r * t.sin())
                })
                .collect();
            vec![body, head]
        }
    };
    let base_rgb = [
        25.0 + 90.0 * rng.random::<f64>(),
        25.0 + 90.0 * rng.random::<f64>(),
        25.0 + 90.0 * rng.random::<f64>(),
    ];
    let pattern = match rng.random_range(0..3u32) {
        0 => Pattern::Stripes {
            angle: rng.random::<f64>() * PI,
            period: 4.0 + 6.0 * rng.random::<f64>(),
        },
        1 => Pattern::Checker {
            period: 4.0 + 5.0 * rng.random::<f64>(),
        },
        _ => Pattern::Dots {
            period: 5.0 + 5.0 * rng.random::<f64>(),
        },
    };
    ClassStyle {
        name: format!("c{class_idx:02}_{}", family.name()),
        loops,
        base_rgb,
        pattern,
    }
}

fn pattern_value(p: Pattern, x: f64, y: f64, phase: f64) -> f64 {
    match p {
        Pattern::Stripes { angle, period } => {
            let u = x * angle.cos() + y * angle.sin();
            ((u / period * 2.0 * PI + phase).sin()).signum()
        }
        Pattern::Checker { period } => {
            let cx = ((x + phase) / period).floor() as i64;
            let cy = ((y + phase) / period).floor() as i64;
            if (cx + cy) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
        Pattern::Dots { period } => {
            let fx = ((x + phase) / period).fract() - 0.5;
            let fy = ((y + phase) / period).fract() - 0.5;
            if fx * fx + fy * fy < 0.09 {
                1.0
            } else {
                -1.0
            }
        }
    }
}

/// Map canonical loop coordinates into pixel space.
struct Placement {
    cx: f64,
    cy: f64,
    scale: f64,
    rot: f64,
    aspect: f64,
}

impl Placement {
    fn sample(rng: &mut ChaCha8Rng, size: usize) -> Placement {
        let s = size as f64;
        Placement {
            cx: s * (0.5 + 0.08 * (rng.random::<f64>() - 0.5)),
            cy: s * (0.5 + 0.08 * (rng.random::<f64>() - 0.5)),
            scale: s * (0.26 + 0.07 * rng.random::<f64>()),
            rot: rng.random::<f64>() * 2.0 * PI,
            aspect: 0.9 + 0.2 * rng.random::<f64>(),
        }
    }

    fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let (x, y) = (p.0 * self.aspect, p.1);
        let (c, s) = (self.rot.cos(), self.rot.sin());
        (
            self.cx + self.scale * (x * c - y * s),
            self.cy + self.scale * (x * s + y * c),
        )
    }
}

/// Even-odd scanline fill of one closed loop.
fn fill_loop(points: &[(f64, f64)], size: usize, mut paint: impl FnMut(usize, usize)) {
    if points.len() < 3 {
        return;
    }
    for y in 0..size {
        let sy = y as f64 + 0.5;
        let mut xs: Vec<f64> = Vec::new();
        for i in 0..points.len() {
            let (x0, y0) = points[i];
            let (x1, y1) = points[(i + 1) % points.len()];
            if (y0 <= sy && y1 > sy) || (y1 <= sy && y0 > sy) {
                xs.push(x0 + (sy - y0) / (y1 - y0) * (x1 - x0));
            }
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in xs.chunks_exact(2) {
            let lo = pair[0].max(0.0).ceil() as i64;
            let hi = pair[1].min(size as f64 - 1.0).floor() as i64;
            for x in lo..=hi {
                paint(x as usize, y);
            }
        }
    }
}

fn draw_segment(r: &mut Raster, a: (f64, f64), b: (f64, f64), width: usize, v: u8) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = a.0 + t * (b.0 - a.0);
        let y = a.1 + t * (b.1 - a.1);
        let (xi, yi) = (x.round() as i64, y.round() as i64);
        for dy in 0..width as i64 {
            for dx in 0..width as i64 {
                let (px, py) = (xi + dx, yi + dy);
                if px >= 0 && py >= 0 && (px as usize) < r.width() && (py as usize) < r.height() {
                    r.set_gray(px as usize, py as usize, v);
                }
            }
        }
    }
}

/// Resample a closed loop to roughly unit pixel spacing.
fn resample(points: &[(f64, f64)], spacing: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for i in 0..points.len() {
        let a = points[i];
        let b = points[(i + 1) % points.len()];
        let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let n = (len / spacing).ceil().max(1.0) as usize;
        for k in 0..n {
            let t = k as f64 / n as f64;
            out.push((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
        }
    }
    out
}

fn render_image(style: &ClassStyle, size: usize, rng: &mut ChaCha8Rng) -> Raster {
    let mut r = Raster::new_rgb(size, size);
    // Light background with a gentle gradient and low-contrast clutter
    // blobs. Clutter stays well below the shape boundary contrast so a
    // relative-threshold edge detector keeps the silhouette.
    let grad_amp = 8.0 * (rng.random::<f64>() - 0.5) * 2.0;
    let base = 205.0 + 10.0 * rng.random::<f64>();
    for y in 0..size {
        for x in 0..size {
            let v = base + grad_amp * (y as f64 / size as f64 - 0.5);
            let v = v.clamp(0.0, 255.0) as u8;
            r.set_rgb(x, y, [v, v, v]);
        }
    }
    let blobs = 6 + rng.random_range(0..5usize);
    for _ in 0..blobs {
        let bx = rng.random::<f64>() * size as f64;
        let by = rng.random::<f64>() * size as f64;
        let rad = 2.0 + rng.random::<f64>() * size as f64 / 7.0;
        let delta: f64 = if rng.random::<bool>() { 12.0 } else { -12.0 };
        let lo_y = ((by - rad).floor().max(0.0)) as usize;
        let hi_y = ((by + rad).ceil().min(size as f64 - 1.0)) as usize;
        for y in lo_y..=hi_y {
            for x in 0..size {
                let dx = x as f64 - bx;
                let dy = y as f64 - by;
                if dx * dx + dy * dy <= rad * rad {
                    let [g, _, _] = r.get_rgb(x, y);
                    let v = (g as f64 + delta).clamp(0.0, 255.0) as u8;
                    r.set_rgb(x, y, [v, v, v]);
                }
            }
        }
    }

    let place = Placement::sample(rng, size);
    let phase = rng.random::<f64>() * 17.0;
    let amp = 11.0;
    for lp in &style.loops {
        let pts: Vec<(f64, f64)> = lp.iter().map(|&p| place.apply(p)).collect();
        fill_loop(&pts, size, |x, y| {
            let m = amp * pattern_value(style.pattern, x as f64, y as f64, phase);
            let px = [
                (style.base_rgb[0] + m).clamp(0.0, 255.0) as u8,
                (style.base_rgb[1] + m).clamp(0.0, 255.0) as u8,
                (style.base_rgb[2] + m).clamp(0.0, 255.0) as u8,
            ];
            r.set_rgb(x, y, px);
        });
    }
    r
}

fn render_sketch(style: &ClassStyle, size: usize, rng: &mut ChaCha8Rng) -> Raster {
    let mut r = Raster::from_gray_fn(size, size, |_, _| 255);
    let place = Placement::sample(rng, size);
    let wobble_amp = 0.5 + 1.2 * rng.random::<f64>();
    let wobble_freq = 3.0 + 6.0 * rng.random::<f64>();
    let wobble_phase = rng.random::<f64>() * 2.0 * PI;
    let stroke = if rng.random::<f64>() < 0.3 { 2 } else { 1 };
    for lp in &style.loops {
        let pts: Vec<(f64, f64)> = lp.iter().map(|&p| place.apply(p)).collect();
        let dense = resample(&pts, 1.0);
        let n = dense.len();
        let jittered: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let prev = dense[(i + n - 1) % n];
                let next = dense[(i + 1) % n];
                let (tx, ty) = (next.0 - prev.0, next.1 - prev.1);
                let norm = (tx * tx + ty * ty).sqrt().max(1e-9);
                let (nx, ny) = (-ty / norm, tx / norm);
                let t = i as f64 / n as f64;
                let w = wobble_amp * (wobble_freq * 2.0 * PI * t + wobble_phase).sin()
                    + 0.35 * (rng.random::<f64>() - 0.5);
                (dense[i].0 + w * nx, dense[i].1 + w * ny)
            })
            .collect();
        for i in 0..n {
            draw_segment(&mut r, jittered[i], jittered[(i + 1) % n], stroke, 0);
        }
    }
    r
}

/// Generate the corpus under `root` and write `root/manifest.jsonl`.
/// Layout: `<root>/<split>/<modality>/<class>/<id>.png`.
pub fn generate_synthetic_corpus(root: &Path, spec: &SyntheticSpec) -> Result<ZeroShotSplit> {
    let num_seen = spec.validate()?;
    let styles: Vec<ClassStyle> = (0..spec.num_classes)
        .map(|c| class_style(c, spec.seed))
        .collect();

    let seen_names: Vec<String> = styles[..num_seen].iter().map(|s| s.name.clone()).collect();
    let unseen_names: Vec<String> = styles[num_seen..].iter().map(|s| s.name.clone()).collect();
    let label_space = LabelSpace::new(seen_names, unseen_names)?;

    let mut split = ZeroShotSplit {
        train_images: Vec::new(),
        train_sketches: Vec::new(),
        test_images: Vec::new(),
        test_sketches: Vec::new(),
        label_space,
    };

    for (ci, style) in styles.iter().enumerate() {
        let seen = ci < num_seen;
        let split_dir = if seen { "train" } else { "test" };
        for i in 0..spec.images_per_class {
            let id = format!("{}_im{i:03}", style.name);
            let tag = fnv1a64(format!("image/{ci}/{i}").as_bytes());
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, tag));
            let raster = render_image(style, spec.image_size, &mut rng);
            let path = root
                .join(split_dir)
                .join("image")
                .join(&style.name)
                .join(format!("{id}.png"));
            raster.save_png(&path)?;
            let sample = Sample {
                id,
                modality: Modality::Image,
                class_label: ci,
                source: PixelSource::Path(path),
            };
            if seen {
                split.train_images.push(sample);
            } else {
                split.test_images.push(sample);
            }
        }
        for i in 0..spec.sketches_per_class {
            let id = format!("{}_sk{i:03}", style.name);
            let tag = fnv1a64(format!("sketch/{ci}/{i}").as_bytes());
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, tag));
            let raster = render_sketch(style, spec.image_size, &mut rng);
            let path = root
                .join(split_dir)
                .join("sketch")
                .join(&style.name)
                .join(format!("{id}.png"));
            raster.save_png(&path)?;
            let sample = Sample {
                id,
                modality: Modality::Sketch,
                class_label: ci,
                source: PixelSource::Path(path),
            };
            if seen {
                split.train_sketches.push(sample);
            } else {
                split.test_sketches.push(sample);
            }
        }
    }

    split.validate()?;
    write_manifest(&split, &root.join("manifest.jsonl"))?;
    Ok(split)
}

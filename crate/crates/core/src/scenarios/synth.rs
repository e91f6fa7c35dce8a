//! Seeded synthetic task generators.
//!
//! All three generators are pure functions of their arguments: the same
//! parameters and seed produce bit-identical streams.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{split, Sample, SampleId, ScenarioKind, Task, TaskStream};
use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap};
use crate::seeding::{self, Rng as StreamRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthOptions {
    /// Square image side in pixels.
    pub size: usize,
    /// Guaranteed minimum separation of mean image intensity between
    /// neighbouring domains (domain-cl).
    pub mean_gap: f64,
    /// class-cl: draw every task from one shared image pool instead of fresh
    /// images per task.
    pub shared_pool: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            size: 64,
            mean_gap: 0.3,
            shared_pool: false,
        }
    }
}

// ---- small raster helpers -------------------------------------------------

type Mask = Vec<bool>;

fn ellipse(size: usize, cy: f64, cx: f64, ry: f64, rx: f64, angle: f64) -> Mask {
    let (s, c) = angle.sin_cos();
    let mut m = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            m[y * size + x] = (u / rx).powi(2) + (v / ry).powi(2) <= 1.0;
        }
    }
    m
}

/// Low-frequency field in roughly [-1, 1]: a sum of a few random planar
/// cosines.
fn smooth_field(size: usize, rng: &mut StreamRng, waves: usize) -> Vec<f64> {
    let comps: Vec<(f64, f64, f64)> = (0..waves)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = rng.random_range(0.5..1.5) * std::f64::consts::TAU / size as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (theta, freq, phase)
        })
        .collect();
    let mut f = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut v = 0.0;
            for &(theta, freq, phase) in &comps {
                v += ((x as f64 * theta.cos() + y as f64 * theta.sin()) * freq + phase).cos();
            }
            f[y * size + x] = v / waves as f64;
        }
    }
    f
}

fn add_noise(img: &mut [f64], sd: f64, rng: &mut StreamRng) {
    if sd <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sd).expect("finite sd");
    for v in img.iter_mut() {
        *v += normal.sample(rng);
    }
}

fn random_ellipse(size: usize, rng: &mut StreamRng) -> Mask {
    let s = size as f64;
    let cy = rng.random_range(0.35..0.65) * s;
    let cx = rng.random_range(0.35..0.65) * s;
    let ry = rng.random_range(0.14..0.26) * s;
    let rx = rng.random_range(0.14..0.26) * s;
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    ellipse(size, cy, cx, ry, rx, angle)
}

fn mask_to_label(mask: &Mask, class: u8, size: usize) -> LabelMap {
    LabelMap {
        height: size,
        width: size,
        data: mask.iter().map(|&m| if m { class } else { 0 }).collect(),
    }
}

// ---- domain-cl ------------------------------------------------------------

/// Fixed appearance transform of one domain.
#[derive(Clone, Debug)]
struct DomainStyle {
    gain: f64,
    noise: f64,
    bias_amp: f64,
    invert: bool,
    target_mean: f64,
    bias_seed: u64,
}

fn domain_styles(n: usize, seed: u64, opts: &SynthOptions) -> Vec<DomainStyle> {
    let spacing = opts.mean_gap / 0.8;
    (0..n)
        .map(|d| {
            let mut rng = seeding::stream(seed, "domain-style", d as u64);
            DomainStyle {
                gain: rng.random_range(0.7..1.3),
                noise: rng.random_range(0.03..0.10),
                bias_amp: rng.random_range(0.0..0.3),
                invert: d % 2 == 1,
                target_mean: (d as f64 - (n as f64 - 1.0) / 2.0) * spacing,
                bias_seed: rng.random(),
            }
        })
        .collect()
}

/// Binary-foreground tasks sharing the label space `{1}`; each domain
/// applies its own gain, noise level, smooth multiplicative bias field,
/// optional contrast inversion, and intensity level to randomly placed
/// ellipses drawn from one geometry distribution.
pub fn make_domain_cl(n_domains: usize, n_per_domain: usize, seed: u64, opts: &SynthOptions) -> Result<TaskStream> {
    if n_domains < 2 {
        return Err(Error::Config("domain-cl needs at least two domains".into()));
    }
    super::split_sizes(n_per_domain)?;
    let size = opts.size;
    let spacing = opts.mean_gap / 0.8;
    let styles = domain_styles(n_domains, seed, opts);
    let mut tasks = Vec::with_capacity(n_domains);
    for (d, style) in styles.iter().enumerate() {
        let mut bias_rng = seeding::stream(style.bias_seed, "bias-field", 0);
        let bias = smooth_field(size, &mut bias_rng, 2);
        let mut samples = Vec::with_capacity(n_per_domain);
        for i in 0..n_per_domain {
            // geometry stream is shared across domains' index space only via the
            // distribution, not the draws themselves
            let mut rng = seeding::stream(seed, "domain-sample", ((d as u64) << 32) | i as u64);
            let mask = random_ellipse(size, &mut rng);
            let mut tex_rng = seeding::stream(seed, "domain-texture", ((d as u64) << 32) | i as u64);
            let texture = smooth_field(size, &mut tex_rng, 3);
            let gain = style.gain * rng.random_range(0.95..1.05);
            let mut img: Vec<f64> = (0..size * size)
                .map(|p| {
                    let base = if mask[p] { 0.75 } else { 0.25 } + 0.05 * texture[p];
                    let v = if style.invert { 1.0 - base } else { base };
                    gain * v * (1.0 + style.bias_amp * bias[p])
                })
                .collect();
            add_noise(&mut img, style.noise, &mut rng);
            let mean = img.iter().sum::<f64>() / img.len() as f64;
            let shift = style.target_mean + rng.random_range(-0.1..0.1) * spacing - mean;
            for v in &mut img {
                *v += shift;
            }
            samples.push(Sample {
                id: SampleId { origin: d + 1, index: i },
                image: Image::from_vec(size, size, img)?,
                label: mask_to_label(&mask, 1, size),
                full_label: None,
            });
        }
        let (train, val, test) = split(samples)?;
        tasks.push(Task {
            id: d + 1,
            origin: d + 1,
            label_set: vec![1],
            train,
            val,
            test,
            distribution_tag: format!("domain-{}", d + 1),
        });
    }
    let stream = TaskStream {
        kind: ScenarioKind::DomainCl,
        tasks,
        full_label_set: vec![1],
    };
    stream.check_laws()?;
    Ok(stream)
}

// ---- class-cl -------------------------------------------------------------

/// Grid cell (row, col) of a 3×3 layout and intensity for structure `c`.
fn archetype(class: u32) -> ((usize, usize), f64) {
    const CELLS: [(usize, usize); 9] = [(1, 1), (0, 1), (1, 2), (1, 0), (0, 0), (2, 1), (2, 2), (0, 2), (2, 0)];
    let k = ((class - 1) % 9) as usize;
    let intensity = 0.15 + 0.8 * ((class - 1) % 9) as f64 / 8.0;
    (CELLS[k], intensity)
}

fn structure_mask(class: u32, size: usize, rng: &mut StreamRng) -> Mask {
    let ((row, col), _) = archetype(class);
    let cell = size as f64 / 3.0;
    let cy = (row as f64 + 0.5) * cell + rng.random_range(-0.08..0.08) * cell;
    let cx = (col as f64 + 0.5) * cell + rng.random_range(-0.08..0.08) * cell;
    let r = cell * rng.random_range(0.30..0.40);
    let shape = (class - 1) % 7;
    let mut m = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            let rr = (dy * dy + dx * dx).sqrt();
            m[y * size + x] = match shape {
                0 => (dx / r).powi(2) + (dy / (0.7 * r)).powi(2) <= 1.0,
                1 => rr <= 0.8 * r,
                2 => rr <= r && rr >= 0.5 * r,
                3 => dx.abs() <= 0.75 * r && dy.abs() <= 0.75 * r,
                4 => dx.abs() + dy.abs() <= r,
                5 => (dx / (0.6 * r)).powi(2) + (dy / r).powi(2) <= 1.0,
                _ => (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r),
            };
        }
    }
    m
}

fn class_image(classes: &[u32], size: usize, rng: &mut StreamRng) -> Result<(Image, LabelMap)> {
    let mut img = vec![0.0; size * size];
    let mut lbl = LabelMap::zeros(size, size);
    for &c in classes {
        let mask = structure_mask(c, size, rng);
        let (_, intensity) = archetype(c);
        for p in 0..size * size {
            if mask[p] {
                img[p] = intensity;
                lbl.data[p] = c as u8;
            }
        }
    }
    add_noise(&mut img, 0.03, rng);
    Ok((Image::from_vec(size, size, img)?, lbl))
}

/// One task per class group over images that contain every structure.
/// Each task's label maps keep only its own group; every other structure
/// is relabelled background. Full annotations are retained on each sample.
pub fn make_class_cl(class_groups: &[Vec<u32>], n_images: usize, seed: u64, opts: &SynthOptions) -> Result<TaskStream> {
    if class_groups.is_empty() {
        return Err(Error::Config("class-cl needs at least one class group".into()));
    }
    let mut all: Vec<u32> = Vec::new();
    for g in class_groups {
        if g.is_empty() {
            return Err(Error::Config("class groups must be nonempty".into()));
        }
        for &c in g {
            if c == 0 || c >= 255 || all.contains(&c) {
                return Err(Error::Config(format!("class {c} is invalid or appears in more than one group")));
            }
            all.push(c);
        }
    }
    super::split_sizes(n_images)?;
    let size = opts.size;
    let mut full_set = all.clone();
    full_set.sort_unstable();
    let mut tasks = Vec::with_capacity(class_groups.len());
    for (k, group) in class_groups.iter().enumerate() {
        let pool_key = if opts.shared_pool { 0 } else { k as u64 };
        let mut samples = Vec::with_capacity(n_images);
        for i in 0..n_images {
            let mut rng = seeding::stream(seed, "class-image", (pool_key << 32) | i as u64);
            let (image, full) = class_image(&full_set, size, &mut rng)?;
            samples.push(Sample {
                id: SampleId { origin: k + 1, index: i },
                image,
                label: full.restrict_to(group),
                full_label: Some(full),
            });
        }
        let (train, val, test) = split(samples)?;
        tasks.push(Task {
            id: k + 1,
            origin: k + 1,
            label_set: group.clone(),
            train,
            val,
            test,
            distribution_tag: "shared".into(),
        });
    }
    let stream = TaskStream {
        kind: ScenarioKind::ClassCl,
        tasks,
        full_label_set: full_set,
    };
    stream.check_laws()?;
    Ok(stream)
}

// ---- organ-cl -------------------------------------------------------------

/// Intensity regime of organ task `k`: background level, foreground
/// contrast, noise level, texture amplitude.
fn organ_regime(k: usize) -> (f64, f64, f64, f64) {
    const BASE: [(f64, f64, f64, f64); 4] = [
        (0.2, 0.5, 0.04, 0.05),
        (0.6, -0.35, 0.08, 0.10),
        (-0.4, 0.3, 0.03, 0.15),
        (0.9, 0.6, 0.06, 0.02),
    ];
    let (b, c, n, t) = BASE[k % 4];
    let shift = (k / 4) as f64 * 0.45;
    (b + shift, c, n, t)
}

fn notched_rectangle(size: usize, rng: &mut StreamRng) -> Mask {
    let s = size as f64;
    let h = rng.random_range(0.30..0.50) * s;
    let w = rng.random_range(0.30..0.50) * s;
    let y0 = rng.random_range(0.1..(0.9 - h / s)) * s;
    let x0 = rng.random_range(0.1..(0.9 - w / s)) * s;
    let nh = h * rng.random_range(0.3..0.5);
    let nw = w * rng.random_range(0.3..0.5);
    let corner = rng.random_range(0..4);
    let mut m = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let inside = fy >= y0 && fy < y0 + h && fx >= x0 && fx < x0 + w;
            let ny = if corner < 2 { fy < y0 + nh } else { fy >= y0 + h - nh };
            let nx = if corner % 2 == 0 { fx < x0 + nw } else { fx >= x0 + w - nw };
            m[y * size + x] = inside && !(ny && nx);
        }
    }
    m
}

fn noise_blob(size: usize, rng: &mut StreamRng) -> Mask {
    let field = smooth_field(size, rng, 4);
    let s = size as f64;
    let (cy, cx) = (rng.random_range(0.4..0.6) * s, rng.random_range(0.4..0.6) * s);
    let sigma = 0.22 * s;
    let score: Vec<f64> = (0..size * size)
        .map(|p| {
            let (y, x) = ((p / size) as f64 + 0.5, (p % size) as f64 + 0.5);
            let g = (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * sigma * sigma)).exp();
            g * (1.0 + 0.6 * field[p])
        })
        .collect();
    let mut sorted = score.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let frac = rng.random_range(0.15..0.25);
    let thr = sorted[((size * size) as f64 * frac) as usize];
    score.iter().map(|&v| v > thr).collect()
}

fn lesions(size: usize, rng: &mut StreamRng) -> Mask {
    let s = size as f64;
    let n = rng.random_range(3..=5);
    let mut m = vec![false; size * size];
    for _ in 0..n {
        let r = rng.random_range(0.05..0.09) * s;
        let e = ellipse(
            size,
            rng.random_range(0.15..0.85) * s,
            rng.random_range(0.15..0.85) * s,
            r,
            r,
            0.0,
        );
        for (a, b) in m.iter_mut().zip(e) {
            *a |= b;
        }
    }
    m
}

/// One singleton-label task per organ, each with its own shape family
/// (ellipse, notched rectangle, thresholded smooth blob, multi-focal
/// lesions; cycling beyond four) and intensity regime.
pub fn make_organ_cl(n_tasks: usize, n_per_task: usize, seed: u64, opts: &SynthOptions) -> Result<TaskStream> {
    if n_tasks < 2 {
        return Err(Error::Config("organ-cl needs at least two tasks".into()));
    }
    if n_tasks >= 255 {
        return Err(Error::Config("too many organ tasks for 8-bit labels".into()));
    }
    super::split_sizes(n_per_task)?;
    let size = opts.size;
    let mut tasks = Vec::with_capacity(n_tasks);
    for k in 0..n_tasks {
        let (bg, contrast, noise, tex) = organ_regime(k);
        let class = (k + 1) as u8;
        let mut samples = Vec::with_capacity(n_per_task);
        for i in 0..n_per_task {
            let mut rng = seeding::stream(seed, "organ-sample", ((k as u64) << 32) | i as u64);
            let mask = match k % 4 {
                0 => random_ellipse(size, &mut rng),
                1 => notched_rectangle(size, &mut rng),
                2 => noise_blob(size, &mut rng),
                _ => lesions(size, &mut rng),
            };
            let texture = smooth_field(size, &mut rng, 3);
            let mut img: Vec<f64> = (0..size * size)
                .map(|p| bg + tex * texture[p] + if mask[p] { contrast } else { 0.0 })
                .collect();
            add_noise(&mut img, noise, &mut rng);
            samples.push(Sample {
                id: SampleId { origin: k + 1, index: i },
                image: Image::from_vec(size, size, img)?,
                label: mask_to_label(&mask, class, size),
                full_label: None,
            });
        }
        let (train, val, test) = split(samples)?;
        tasks.push(Task {
            id: k + 1,
            origin: k + 1,
            label_set: vec![class as u32],
            train,
            val,
            test,
            distribution_tag: format!("organ-{}", k + 1),
        });
    }
    let stream = TaskStream {
        kind: ScenarioKind::OrganCl,
        tasks,
        full_label_set: (1..=n_tasks as u32).collect(),
    };
    stream.check_laws()?;
    Ok(stream)
}

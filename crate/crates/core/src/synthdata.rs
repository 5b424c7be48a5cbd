//! Deterministic multi-instance toy task.
//!
//! Each image holds one to four "vesicle" glyphs (a disk with a brighter
//! rim) over smooth value noise and class-agnostic square distractors. The
//! class is the rim thickness as a fraction of the radius, so the cue is
//! local and fine-grained. Rim and interior intensities are chosen so the
//! glyph's pixel mean and variance are the same for every class, which
//! leaves global intensity statistics uninformative.
//!
//! Layout, background and noise are drawn from a generator seeded by the
//! sample seed alone; the class only changes how glyphs are painted.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::localizer::PixelBox;
use crate::rng;
use crate::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    /// Square image side.
    pub image_size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Maximum number of distractor squares.
    pub clutter: usize,
    /// Half-width of the uniform per-pixel noise.
    pub noise_amplitude: f64,
    /// Rim thickness over radius of the first and last class; the others
    /// are spaced evenly between.
    pub rim_min: f64,
    pub rim_max: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            image_size: 128,
            min_instances: 1,
            max_instances: 4,
            radius_min: 14.0,
            radius_max: 20.0,
            clutter: 4,
            noise_amplitude: 0.03,
            rim_min: 0.1,
            rim_max: 0.55,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::usage("synth: classes must be at least 1"));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return Err(Error::usage("synth: need 1 <= min_instances <= max_instances"));
        }
        if !(self.radius_min >= 4.0 && self.radius_min <= self.radius_max) {
            return Err(Error::usage("synth: glyph radius must be at least 4 pixels and min <= max"));
        }
        if 2.0 * self.radius_max + 2.0 > self.image_size as f64 {
            return Err(Error::usage("synth: glyphs do not fit in the image"));
        }
        if !(0.0..0.5).contains(&self.noise_amplitude) {
            return Err(Error::usage("synth: noise_amplitude must lie in [0, 0.5)"));
        }
        let in_range = |t: f64| {
            let (rim, interior) = glyph_levels(t);
            t > 0.0 && t < 1.0 && rim <= 1.0 && interior >= 0.0
        };
        if !(self.rim_min <= self.rim_max && in_range(self.rim_min) && in_range(self.rim_max)) {
            return Err(Error::usage(
                "synth: rim ratios must satisfy rim_min <= rim_max and keep glyph levels in [0, 1] (about 0.09 to 0.65)",
            ));
        }
        Ok(())
    }

    /// Rim thickness over radius for `class`.
    pub fn rim_ratio(&self, class: usize) -> f64 {
        if self.classes <= 1 {
            return 0.5 * (self.rim_min + self.rim_max);
        }
        self.rim_min + (self.rim_max - self.rim_min) * class as f64 / (self.classes - 1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    /// `(1, 3, H, W)`, values in `[0, 1]`.
    pub image: Tensor4,
    pub label: usize,
    /// Ground-truth glyph boxes, pairwise disjoint. Empty for data without
    /// instance annotations.
    pub gt_boxes: Vec<PixelBox>,
    pub seed: u64,
}

const GLYPH_MEAN: f64 = 0.55;
const GLYPH_STD: f64 = 0.2;

/// `(rim, interior)` intensities giving the glyph a fixed mean and spread.
fn glyph_levels(ratio: f64) -> (f64, f64) {
    let inner = 1.0 - ratio;
    let rim_fraction = 1.0 - inner * inner;
    let rim = GLYPH_MEAN + GLYPH_STD * libm::sqrt((1.0 - rim_fraction) / rim_fraction);
    let interior = GLYPH_MEAN - GLYPH_STD * libm::sqrt(rim_fraction / (1.0 - rim_fraction));
    (rim, interior)
}

struct Glyph {
    cy: f64,
    cx: f64,
    radius: f64,
}

impl Glyph {
    fn bbox(&self, size: usize) -> PixelBox {
        let lo = |c: f64| libm::floor(c - self.radius).max(0.0) as usize;
        let hi = |c: f64| (libm::ceil(c + self.radius) as usize).min(size);
        PixelBox::new(lo(self.cy), lo(self.cx), hi(self.cy), hi(self.cx))
    }
}

fn grown(b: &PixelBox, margin: usize, size: usize) -> PixelBox {
    PixelBox::new(
        b.row0.saturating_sub(margin),
        b.col0.saturating_sub(margin),
        (b.row1 + margin).min(size),
        (b.col1 + margin).min(size),
    )
}

/// Smooth noise: a coarse random lattice interpolated with smoothstep.
fn value_noise(rng: &mut impl Rng, size: usize, cell: usize, lo: f64, hi: f64) -> Vec<f64> {
    let lattice = size / cell + 2;
    let grid: Vec<f64> = (0..lattice * lattice).map(|_| rng.gen_range(lo..hi)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let gy = y as f64 / cell as f64;
        let (iy, ty) = (gy as usize, smooth(gy - libm::floor(gy)));
        for x in 0..size {
            let gx = x as f64 / cell as f64;
            let (ix, tx) = (gx as usize, smooth(gx - libm::floor(gx)));
            let g = |r: usize, c: usize| grid[r * lattice + c];
            let top = g(iy, ix) + tx * (g(iy, ix + 1) - g(iy, ix));
            let bottom = g(iy + 1, ix) + tx * (g(iy + 1, ix + 1) - g(iy + 1, ix));
            out.push(top + ty * (bottom - top));
        }
    }
    out
}

pub fn gen_sample(seed: u64, class: usize, config: &SynthConfig) -> Result<SynthSample> {
    config.validate()?;
    if class >= config.classes {
        return Err(Error::usage("gen_sample: class out of range"));
    }
    let size = config.image_size;
    let mut rng = rng::stream(seed, 0x5EED);

    let luminance = value_noise(&mut rng, size, 16, 0.15, 0.45);
    let tint: [f64; 3] = core::array::from_fn(|_| rng.gen_range(-0.04..0.04));

    let count = rng.gen_range(config.min_instances..=config.max_instances);
    let mut glyphs: Vec<Glyph> = Vec::new();
    let mut boxes: Vec<PixelBox> = Vec::new();
    for _ in 0..count {
        for _attempt in 0..200 {
            let radius = rng.gen_range(config.radius_min..=config.radius_max);
            let lo = radius + 1.0;
            let hi = size as f64 - radius - 1.0;
            let g = Glyph {
                cy: rng.gen_range(lo..hi),
                cx: rng.gen_range(lo..hi),
                radius,
            };
            let b = g.bbox(size);
            if boxes.iter().all(|o| !grown(o, 3, size).overlaps(&b)) {
                boxes.push(b);
                glyphs.push(g);
                break;
            }
        }
    }

    let mut squares: Vec<(PixelBox, f64)> = Vec::new();
    let n_squares = rng.gen_range(0..=config.clutter);
    for _ in 0..n_squares {
        for _attempt in 0..50 {
            let side = rng.gen_range(5..=10usize);
            let r0 = rng.gen_range(0..size - side);
            let c0 = rng.gen_range(0..size - side);
            let level = rng.gen_range(0.35..0.65);
            let b = PixelBox::new(r0, c0, r0 + side, c0 + side);
            if boxes.iter().all(|o| !grown(o, 2, size).overlaps(&b)) {
                squares.push((b, level));
                break;
            }
        }
    }

    let mut plane = luminance;
    for (b, level) in &squares {
        for r in b.row0..b.row1 {
            plane[r * size + b.col0..r * size + b.col1].fill(*level);
        }
    }
    let ratio = config.rim_ratio(class);
    let (rim, interior) = glyph_levels(ratio);
    let mut is_glyph = alloc::vec![false; size * size];
    for (g, b) in glyphs.iter().zip(&boxes) {
        let inner = g.radius * (1.0 - ratio);
        for r in b.row0..b.row1 {
            for c in b.col0..b.col1 {
                let dy = r as f64 + 0.5 - g.cy;
                let dx = c as f64 + 0.5 - g.cx;
                let d = libm::sqrt(dy * dy + dx * dx);
                if d <= g.radius {
                    plane[r * size + c] = if d <= inner { interior } else { rim };
                    is_glyph[r * size + c] = true;
                }
            }
        }
    }

    let mut image = Tensor4::zeros([1, 3, size, size]);
    let amp = config.noise_amplitude;
    for (ch, t) in tint.iter().enumerate() {
        for (i, &base) in plane.iter().enumerate() {
            let noise = if amp > 0.0 { rng.gen_range(-amp..amp) } else { 0.0 };
            let tinted = if is_glyph[i] { base } else { base + t };
            image.data_mut()[ch * size * size + i] = (tinted + noise).clamp(0.0, 1.0);
        }
    }

    Ok(SynthSample {
        image,
        label: class,
        gt_boxes: boxes,
        seed,
    })
}

/// `n_per_class` samples of every class; sample `i` of class `c` uses seed
/// `base_seed + c · n_per_class + i`.
pub fn gen_dataset(n_per_class: usize, base_seed: u64, config: &SynthConfig) -> Result<Vec<SynthSample>> {
    if n_per_class == 0 {
        return Err(Error::usage("gen_dataset: n_per_class must be at least 1"));
    }
    let mut out = Vec::with_capacity(n_per_class * config.classes);
    for class in 0..config.classes {
        for i in 0..n_per_class {
            let seed = base_seed + (class * n_per_class + i) as u64;
            out.push(gen_sample(seed, class, config)?);
        }
    }
    Ok(out)
}

/// Train and test sets over disjoint seed ranges: test seeds start right
/// after the last train seed.
pub fn gen_split(
    n_train_per_class: usize,
    n_test_per_class: usize,
    base_seed: u64,
    config: &SynthConfig,
) -> Result<(Vec<SynthSample>, Vec<SynthSample>)> {
    let train = gen_dataset(n_train_per_class, base_seed, config)?;
    let test_base = base_seed + (config.classes * n_train_per_class) as u64;
    let test = gen_dataset(n_test_per_class, test_base, config)?;
    Ok((train, test))
}

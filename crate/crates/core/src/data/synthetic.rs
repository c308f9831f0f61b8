use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Half of the image that carries the class signal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Region {
    Top,
    #[default]
    Bottom,
    Left,
    Right,
}

impl Region {
    /// Row and column bounds `[r0, r1) x [c0, c1)` of the half. The middle
    /// line of an odd extent belongs to neither half.
    pub fn bounds(self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        match self {
            Region::Top => (0, h / 2, 0, w),
            Region::Bottom => (h - h / 2, h, 0, w),
            Region::Left => (0, h, 0, w / 2),
            Region::Right => (0, h, w - w / 2, w),
        }
    }

    pub fn contains(self, h: usize, w: usize, i: usize, j: usize) -> bool {
        let (r0, r1, c0, c1) = self.bounds(h, w);
        (r0..r1).contains(&i) && (c0..c1).contains(&j)
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(Region::Top),
            "bottom" => Ok(Region::Bottom),
            "left" => Ok(Region::Left),
            "right" => Ok(Region::Right),
            other => Err(Error::config(
                "data.region",
                format!("unknown region `{other}` (top|bottom|left|right)"),
            )),
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Top => "top",
            Region::Bottom => "bottom",
            Region::Left => "left",
            Region::Right => "right",
        })
    }
}

/// Recipe for a synthetic pathology dataset.
///
/// Each image is a smooth value-noise background in
/// `[background, background + noise]` plus, for classes above 0, a few
/// truncated Gaussian lesions inside `region`. Class `k` draws lesion peaks
/// around `intensity * k / (K-1)`, so class 0 is pure background.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub train_counts: Vec<usize>,
    pub val_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    pub region: Region,
    pub background: f64,
    pub noise: f64,
    /// Lattice spacing of the background noise, in pixels.
    pub noise_cell: usize,
    pub intensity: f64,
    pub intensity_jitter: f64,
    pub blobs: (usize, usize),
    pub radius: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::balanced(0)
    }
}

impl SyntheticSpec {
    /// 4 classes of 32x32 images, 1000 training samples per class.
    pub fn balanced(seed: u64) -> Self {
        SyntheticSpec {
            height: 32,
            width: 32,
            classes: 4,
            train_counts: vec![1000; 4],
            val_counts: vec![200; 4],
            test_counts: vec![200; 4],
            region: Region::Bottom,
            background: 0.2,
            noise: 0.2,
            noise_cell: 8,
            intensity: 0.55,
            intensity_jitter: 0.05,
            blobs: (1, 3),
            radius: (2.0, 4.0),
            seed,
        }
    }

    /// Training counts `(1000, 1000, 1000, 100)`; validation and test stay balanced.
    pub fn imbalanced(seed: u64) -> Self {
        SyntheticSpec {
            train_counts: vec![1000, 1000, 1000, 100],
            ..Self::balanced(seed)
        }
    }

    pub fn counts(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train_counts,
            Split::Val => &self.val_counts,
            Split::Test => &self.test_counts,
        }
    }

    /// Mean lesion peak of class `k`.
    pub fn class_intensity(&self, k: usize) -> f64 {
        self.intensity * k as f64 / (self.classes - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let spec = |m: String| Err(Error::Spec(m));
        if self.classes < 2 || self.classes > 255 {
            return spec(format!("class count must be in 2..=255, got {}", self.classes));
        }
        if self.height < 2 || self.width < 2 {
            return spec(format!("image must be at least 2x2, got {}x{}", self.height, self.width));
        }
        for split in Split::ALL {
            let c = self.counts(split);
            if c.len() != self.classes {
                return spec(format!("{split} lists {} counts for {} classes", c.len(), self.classes));
            }
            if let Some(k) = c.iter().position(|&n| n == 0) {
                return spec(format!("{split} count for class {k} is zero"));
            }
        }
        for (name, v) in [
            ("background", self.background),
            ("noise", self.noise),
            ("intensity", self.intensity),
            ("intensity_jitter", self.intensity_jitter),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return spec(format!("{name} must lie in [0,1], got {v}"));
            }
        }
        if self.background + self.noise + self.intensity + self.intensity_jitter > 1.0 + 1e-12 {
            return spec("background + noise + intensity + jitter exceeds 1".into());
        }
        if self.noise_cell == 0 {
            return spec("noise cell must be positive".into());
        }
        let (lo, hi) = self.blobs;
        if lo > hi || hi == 0 {
            return spec(format!("blob count range {lo}..={hi} is empty"));
        }
        let (rmin, rmax) = self.radius;
        if !(rmin > 0.0 && rmin <= rmax) {
            return spec(format!("radius range {rmin}..{rmax} is invalid"));
        }
        let (r0, r1, c0, c1) = self.region.bounds(self.height, self.width);
        let room = (r1 - r0).min(c1 - c0) as f64;
        if 2.0 * rmax >= room {
            return spec(format!(
                "blob radius {rmax} does not fit strictly inside the {} half ({}x{})",
                self.region,
                r1 - r0,
                c1 - c0
            ));
        }
        Ok(())
    }
}

/// A lesion: centre in continuous pixel coordinates, radius and peak.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Blob {
    pub y: f64,
    pub x: f64,
    pub radius: f64,
    pub peak: f64,
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinearly interpolated lattice noise in `[0,1]`.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen::<f64>()).collect();
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let fy = i as f64 / cell as f64;
        let (gy, ty) = (fy as usize, smoothstep(fy.fract()));
        for j in 0..w {
            let fx = j as f64 / cell as f64;
            let (gx, tx) = (fx as usize, smoothstep(fx.fract()));
            let at = |y: usize, x: usize| lattice[y * gw + x];
            let top = at(gy, gx) + (at(gy, gx + 1) - at(gy, gx)) * tx;
            let bottom = at(gy + 1, gx) + (at(gy + 1, gx + 1) - at(gy + 1, gx)) * tx;
            out.push(top + (bottom - top) * ty);
        }
    }
    out
}

pub(crate) fn draw_sample(spec: &SyntheticSpec, class: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<Blob>) {
    let (h, w) = (spec.height, spec.width);
    let mut img: Vec<f64> = value_noise(rng, h, w, spec.noise_cell)
        .into_iter()
        .map(|v| spec.background + spec.noise * v)
        .collect();
    let mean = spec.class_intensity(class);
    if mean == 0.0 {
        return (img, Vec::new());
    }
    let (r0, r1, c0, c1) = spec.region.bounds(h, w);
    let count = rng.gen_range(spec.blobs.0..=spec.blobs.1);
    let blobs: Vec<Blob> = (0..count)
        .map(|_| {
            let radius = rng.gen_range(spec.radius.0..=spec.radius.1);
            let y = rng.gen_range(r0 as f64 + radius..=r1 as f64 - radius);
            let x = rng.gen_range(c0 as f64 + radius..=c1 as f64 - radius);
            let jitter = spec.intensity_jitter;
            let peak = mean + if jitter > 0.0 { rng.gen_range(-jitter..=jitter) } else { 0.0 };
            Blob { y, x, radius, peak }
        })
        .collect();
    for i in r0..r1 {
        for j in c0..c1 {
            let (py, px) = (i as f64 + 0.5, j as f64 + 0.5);
            let lesion = blobs
                .iter()
                .map(|b| {
                    let d2 = (py - b.y).powi(2) + (px - b.x).powi(2);
                    if d2 <= b.radius * b.radius {
                        let sigma = b.radius / 2.0;
                        b.peak * (-d2 / (2.0 * sigma * sigma)).exp()
                    } else {
                        0.0
                    }
                })
                .fold(0.0, f64::max);
            let v = &mut img[i * w + j];
            *v = (*v + lesion).clamp(0.0, 1.0);
        }
    }
    (img, blobs)
}

fn generate_split(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(match split {
        Split::Train => 1,
        Split::Val => 2,
        Split::Test => 3,
    });
    let mut labels: Vec<usize> = spec
        .counts(split)
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| std::iter::repeat_n(k, n))
        .collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(labels.len() * spec.height * spec.width);
    for &y in &labels {
        data.extend(draw_sample(spec, y, &mut rng).0);
    }
    let images = Tensor::new(&[labels.len(), 1, spec.height, spec.width], data)?;
    Dataset::new(images, labels, spec.classes, split)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Generates the three splits, each from its own stream of the seeded generator.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Splits> {
    spec.validate()?;
    Ok(Splits {
        train: generate_split(spec, Split::Train)?,
        val: generate_split(spec, Split::Val)?,
        test: generate_split(spec, Split::Test)?,
    })
}

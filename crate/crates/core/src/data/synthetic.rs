//! Synthetic stand-ins for the labeled, triplet and unlabeled streams.
//!
//! Every class owns a prototype image with values drawn uniformly from
//! `[0, 1]` under a per-class seed, either per pixel (the default) or on a
//! coarse grid that is bilinearly upsampled into a smooth image. A sample is its class prototype plus an optional per-sample smooth
//! "identity" pattern, optionally shifted and contrast-scaled, plus a global
//! brightness offset and Gaussian pixel noise, clipped to `[0, 1]`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{image_len, ImageShape, LabeledDataset, TripletDataset, UnlabeledDataset, NUM_CLASSES};
use crate::error::{FeverError, Result};
use crate::losses::SimilarPair;

/// Base seed of the class prototypes; class `k` uses `PROTOTYPE_SEED + k`.
pub const PROTOTYPE_SEED: u64 = 0x5EED_FACE;
/// Coarse grid side of the identity patterns.
pub const IDENTITY_GRID: usize = 4;

/// How a sample is rendered from its prototype.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rendering {
    pub noise_sigma: f64,
    /// Brightness offset drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[contrast_min, 1]`, applied around 0.5.
    pub contrast_min: f64,
    /// Circular translation by up to this many pixels per axis.
    pub max_shift: usize,
    /// Amplitude of the per-sample identity pattern, which is centred on 0.
    #[serde(default)]
    pub identity: f64,
}

impl Rendering {
    pub fn plain(noise_sigma: f64) -> Self {
        Rendering {
            noise_sigma,
            brightness: 0.1,
            contrast_min: 1.0,
            max_shift: 0,
            identity: 0.0,
        }
    }

    /// A rendering unlike the training one, used for transfer evaluation.
    pub fn transfer() -> Self {
        Rendering {
            noise_sigma: 0.4,
            brightness: 0.1,
            contrast_min: 0.3,
            max_shift: 0,
            identity: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub image_shape: ImageShape,
    pub num_classes: usize,
    pub rendering: Rendering,
    /// Coarse prototype grid side; `None` draws every pixel independently.
    pub prototype_grid: Option<usize>,
    prototypes: Vec<Vec<f32>>,
}

impl SyntheticWorld {
    pub fn new(image_shape: ImageShape, num_classes: usize, rendering: Rendering) -> Result<Self> {
        if num_classes < 2 || image_len(&image_shape) == 0 {
            return Err(FeverError::InvalidArgument(
                "synthetic world needs >= 2 classes and non-empty images".into(),
            ));
        }
        if !(rendering.noise_sigma >= 0.0) || !(0.0..=1.0).contains(&rendering.contrast_min) {
            return Err(FeverError::InvalidArgument(format!("invalid rendering {rendering:?}")));
        }
        Ok(SyntheticWorld {
            image_shape,
            num_classes,
            rendering,
            prototype_grid: None,
            prototypes: Self::make_prototypes(image_shape, num_classes, None),
        })
    }

    fn make_prototypes(shape: ImageShape, num_classes: usize, grid: Option<usize>) -> Vec<Vec<f32>> {
        // A grid at least as large as the image is the per-pixel draw.
        let g = grid.unwrap_or(shape[1].max(shape[2]));
        (0..num_classes)
            .map(|k| smooth_pattern(shape, g, &mut ChaCha8Rng::seed_from_u64(PROTOTYPE_SEED + k as u64)))
            .collect()
    }

    /// The same world with smooth prototypes on a `grid x grid` lattice.
    pub fn with_prototype_grid(&self, grid: Option<usize>) -> Result<Self> {
        if grid == Some(0) {
            return Err(FeverError::InvalidArgument("prototype grid must be > 0".into()));
        }
        Ok(SyntheticWorld {
            prototype_grid: grid,
            prototypes: Self::make_prototypes(self.image_shape, self.num_classes, grid),
            ..self.clone()
        })
    }

    pub fn desk(noise_sigma: f64) -> Self {
        Self::new([3, 32, 32], NUM_CLASSES, Rendering::plain(noise_sigma)).expect("valid desk world")
    }

    pub fn with_rendering(&self, rendering: Rendering) -> Self {
        SyntheticWorld {
            rendering,
            ..self.clone()
        }
    }

    pub fn prototype(&self, class: usize) -> &[f32] {
        &self.prototypes[class]
    }

    /// Appends one rendered sample of `class` to `out`.
    pub fn render<R: Rng + ?Sized>(&self, class: usize, rng: &mut R, out: &mut Vec<f32>) {
        let [c, h, w] = self.image_shape;
        let r = &self.rendering;
        let proto = &self.prototypes[class];
        let (dy, dx) = if r.max_shift > 0 {
            let s = r.max_shift as i64;
            (rng.random_range(-s..=s), rng.random_range(-s..=s))
        } else {
            (0, 0)
        };
        let contrast = if r.contrast_min < 1.0 {
            rng.random_range(r.contrast_min..=1.0)
        } else {
            1.0
        };
        let shift = if r.brightness > 0.0 {
            rng.random_range(-r.brightness..=r.brightness)
        } else {
            0.0
        };
        let identity = (r.identity > 0.0).then(|| smooth_pattern(self.image_shape, IDENTITY_GRID, rng));
        let noise = Normal::new(0.0, r.noise_sigma.max(0.0)).expect("finite sigma");
        for ci in 0..c {
            for yi in 0..h {
                for xi in 0..w {
                    let sy = (yi as i64 - dy).rem_euclid(h as i64) as usize;
                    let sx = (xi as i64 - dx).rem_euclid(w as i64) as usize;
                    let at = (ci * h + sy) * w + sx;
                    let mut p = proto[at] as f64;
                    if let Some(id) = &identity {
                        p += r.identity * (id[at] as f64 - 0.5);
                    }
                    let mut v = contrast * (p - 0.5) + 0.5 + shift;
                    if r.noise_sigma > 0.0 {
                        v += noise.sample(rng);
                    }
                    out.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }

    /// Class-stratified labeled set: label `i mod K`, then shuffled.
    pub fn labeled(&self, n: usize, seed: u64) -> Result<LabeledDataset> {
        if n == 0 {
            return Err(FeverError::InvalidArgument("n must be > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.num_classes).collect();
        labels.shuffle(&mut rng);
        let mut pixels = Vec::with_capacity(n * image_len(&self.image_shape));
        for &l in &labels {
            self.render(l, &mut rng, &mut pixels);
        }
        LabeledDataset::new(self.image_shape, self.num_classes, pixels, labels)
    }

    /// Triplets of two same-class samples and one sample of another class,
    /// in random positions.
    pub fn triplets(&self, n: usize, seed: u64) -> Result<TripletDataset> {
        if n == 0 {
            return Err(FeverError::InvalidArgument("n must be > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.num_classes;
        let mut pixels = Vec::with_capacity(3 * n * image_len(&self.image_shape));
        let mut pairs = Vec::with_capacity(n);
        for _ in 0..n {
            let same = rng.random_range(0..k);
            let other = (same + rng.random_range(1..k)) % k;
            let odd_pos = rng.random_range(0..3);
            for pos in 0..3 {
                let class = if pos == odd_pos { other } else { same };
                self.render(class, &mut rng, &mut pixels);
            }
            let pair = match odd_pos {
                0 => SimilarPair::P23,
                1 => SimilarPair::P13,
                _ => SimilarPair::P12,
            };
            pairs.push(pair);
        }
        TripletDataset::new(self.image_shape, pixels, pairs)
    }

    /// Unlabeled images with uniformly random classes.
    pub fn unlabeled(&self, n: usize, seed: u64) -> Result<UnlabeledDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pixels = Vec::with_capacity(n * image_len(&self.image_shape));
        for _ in 0..n {
            let class = rng.random_range(0..self.num_classes);
            self.render(class, &mut rng, &mut pixels);
        }
        UnlabeledDataset::new(self.image_shape, pixels)
    }
}

/// Uniform `[0, 1]` values on a `g x g` grid per channel, bilinearly
/// upsampled to the image size with pixel-centre alignment.
fn smooth_pattern<R: Rng + ?Sized>(shape: ImageShape, grid: usize, rng: &mut R) -> Vec<f32> {
    let [c, h, w] = shape;
    let (gh, gw) = (grid.min(h).max(1), grid.min(w).max(1));
    let coarse: Vec<f32> = (0..c * gh * gw).map(|_| rng.random::<f32>()).collect();
    let axis = |i: usize, n: usize, g: usize| -> (usize, usize, f32) {
        let t = ((i as f32 + 0.5) * g as f32 / n as f32 - 0.5).clamp(0.0, (g - 1) as f32);
        let lo = t.floor() as usize;
        (lo, (lo + 1).min(g - 1), t - lo as f32)
    };
    let mut out = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        let g = &coarse[ci * gh * gw..(ci + 1) * gh * gw];
        for yi in 0..h {
            let (y0, y1, fy) = axis(yi, h, gh);
            for xi in 0..w {
                let (x0, x1, fx) = axis(xi, w, gw);
                let top = g[y0 * gw + x0] * (1.0 - fx) + g[y0 * gw + x1] * fx;
                let bot = g[y1 * gw + x0] * (1.0 - fx) + g[y1 * gw + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Desk-shaped (3x32x32) stratified labeled set with the plain rendering.
pub fn gen_synthetic_labeled(n: usize, num_classes: usize, noise_sigma: f64, seed: u64) -> Result<LabeledDataset> {
    SyntheticWorld::new([3, 32, 32], num_classes, Rendering::plain(noise_sigma))?.labeled(n, seed)
}

/// Desk-shaped synthetic triplets with the plain rendering.
pub fn gen_synthetic_triplets(n: usize, noise_sigma: f64, seed: u64) -> Result<TripletDataset> {
    SyntheticWorld::new([3, 32, 32], NUM_CLASSES, Rendering::plain(noise_sigma))?.triplets(n, seed)
}

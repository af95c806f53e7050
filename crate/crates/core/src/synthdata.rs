//! Seeded generators for paired-view embedding scenes and toy detection
//! scenes.
//!
//! Every generator derives independent ChaCha streams from one 64-bit seed:
//! stream 0 for shared structure, stream `1 + i` for item `i`. Item `i` is
//! therefore identical no matter how many items are generated or in which
//! order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::FeatureMap;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::BoxCxcywh;
use crate::losses::GroundTruth;
use crate::numerics::Mat;

pub const N_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; N_CLASSES] = ["car", "person", "bicycle"];
pub const IMAGE_WIDTH: f64 = 640.0;
pub const IMAGE_HEIGHT: f64 = 512.0;
pub const MAX_OBJECTS: usize = 10;
pub const MIN_SIDE: f64 = 0.05;
pub const MAX_SIDE: f64 = 0.5;

pub(crate) fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub n_scenes: usize,
    /// Dimension of the latent and of each view.
    pub latent_dim: usize,
    pub view_noise_sigma: f64,
    pub seed: u64,
    /// Fraction of view coordinates whose mixing rows are common to both
    /// views; the remaining rows are drawn independently per view.
    pub shared_fraction: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self { n_scenes: 64, latent_dim: 32, view_noise_sigma: 0.1, seed: 0, shared_fraction: 0.0 }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_scenes < 2 {
            return Err(Error::InvalidSpec(format!("need at least 2 scenes, got {}", self.n_scenes)));
        }
        if self.latent_dim < 2 {
            return Err(Error::InvalidSpec(format!("latent_dim must be >= 2, got {}", self.latent_dim)));
        }
        if !(self.view_noise_sigma >= 0.0) || !self.view_noise_sigma.is_finite() {
            return Err(Error::InvalidSpec(format!("sigma must be finite and >= 0, got {}", self.view_noise_sigma)));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(Error::InvalidSpec(format!("shared_fraction must lie in [0,1], got {}", self.shared_fraction)));
        }
        Ok(())
    }

    pub fn shared_rows(&self) -> usize {
        (self.shared_fraction * self.latent_dim as f64).round() as usize
    }
}

/// The fixed view maps `(A, B)` of a spec. Entries are `N(0, 1/d)`.
pub fn view_maps(spec: &SceneSpec) -> Result<(Mat, Mat)> {
    spec.validate()?;
    let d = spec.latent_dim;
    let s = 1.0 / (d as f64).sqrt();
    let mut rng = stream(spec.seed, 0);
    let a = Mat::from_fn(d, d, |_, _| s * gaussian(&mut rng));
    let shared = spec.shared_rows();
    let b = Mat::from_fn(d, d, |i, j| if i < shared { a.get(i, j) } else { s * gaussian(&mut rng) });
    Ok((a, b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedScene {
    pub scene_id: usize,
    pub latent: Vec<f64>,
    pub view_a: Vec<f64>,
    pub view_b: Vec<f64>,
}

/// Per scene `s`: `z_s ~ N(0, I)`, `view_a = A z_s + sigma e_a`,
/// `view_b = B z_s + sigma e_b`.
pub fn gen_paired_views(spec: &SceneSpec) -> Result<Vec<PairedScene>> {
    gen_paired_views_with(spec, Execution::default())
}

pub fn gen_paired_views_with(spec: &SceneSpec, exec: Execution) -> Result<Vec<PairedScene>> {
    let (a, b) = view_maps(spec)?;
    let d = spec.latent_dim;
    Ok(exec.map_range(spec.n_scenes, |s| {
        let mut rng = stream(spec.seed, 1 + s as u64);
        let latent: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
        let mut view_a = a.matvec(&latent).expect("square map");
        let mut view_b = b.matvec(&latent).expect("square map");
        for v in view_a.iter_mut().chain(view_b.iter_mut()) {
            *v += spec.view_noise_sigma * gaussian(&mut rng);
        }
        PairedScene { scene_id: s, latent, view_a, view_b }
    }))
}

/// Interleaved batch `[a_0, b_0, a_1, b_1, ...]`.
pub fn interleave_views(scenes: &[PairedScene]) -> Vec<Vec<f64>> {
    scenes.iter().flat_map(|s| [s.view_a.clone(), s.view_b.clone()]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionScene {
    pub width: f64,
    pub height: f64,
    pub objects: Vec<GroundTruth>,
}

/// A box with sides in `[0.05, 0.5]` lying inside the unit square.
pub fn random_box(rng: &mut impl Rng) -> BoxCxcywh {
    let w = rng.random_range(MIN_SIDE..=MAX_SIDE);
    let h = rng.random_range(MIN_SIDE..=MAX_SIDE);
    let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
    let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
    BoxCxcywh::new(cx, cy, w, h).expect("sampled inside valid ranges")
}

pub fn gen_detection_scene(n_objects: usize, seed: u64) -> Result<DetectionScene> {
    if !(1..=MAX_OBJECTS).contains(&n_objects) {
        return Err(Error::InvalidSpec(format!(
            "n_objects must be in 1..={MAX_OBJECTS}, got {n_objects}"
        )));
    }
    let objects = (0..n_objects)
        .map(|i| {
            let mut rng = stream(seed, 1 + i as u64);
            let class = rng.random_range(0..N_CLASSES);
            GroundTruth { class, bbox: random_box(&mut rng) }
        })
        .collect();
    Ok(DetectionScene { width: IMAGE_WIDTH, height: IMAGE_HEIGHT, objects })
}

/// `n` independent (init, target) box pairs.
pub fn gen_box_pairs(n: usize, seed: u64) -> Vec<(BoxCxcywh, BoxCxcywh)> {
    (0..n)
        .map(|i| {
            let mut rng = stream(seed, 1 + i as u64);
            (random_box(&mut rng), random_box(&mut rng))
        })
        .collect()
}

impl DetectionScene {
    /// `h x w x c` map with a Gaussian blob per object centered on its box,
    /// written to channel `class mod c`.
    pub fn feature_map(&self, h: usize, w: usize, c: usize) -> Result<FeatureMap> {
        FeatureMap::from_fn(h, w, c, |y, x, ch| {
            let py = (y as f64 + 0.5) / h as f64;
            let px = (x as f64 + 0.5) / w as f64;
            self.objects
                .iter()
                .filter(|o| o.class % c == ch)
                .map(|o| {
                    let b = o.bbox;
                    let dx = (px - b.cx()) / (b.w() / 2.0);
                    let dy = (py - b.cy()) / (b.h() / 2.0);
                    (-(dx * dx + dy * dy)).exp()
                })
                .sum()
        })
    }
}
